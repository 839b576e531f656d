#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace provconf {

class Error : public std::runtime_error
{
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

class ValidationError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "ValidationError"; }
};

/// Null variance of a provider's Z-score evaluated to a nonpositive value.
class DegenerateVarianceError : public Error
{
 public:
  DegenerateVarianceError(std::string provider_id, double variance)
      : Error("degenerate null variance " + std::to_string(variance) + " for provider '" +
              provider_id + "'"),
        provider_id_(std::move(provider_id))
  {
  }
  const char* kind() const noexcept override { return "DegenerateVarianceError"; }
  const std::string& provider_id() const noexcept { return provider_id_; }

 private:
  std::string provider_id_;
};

class SingularDesignError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "SingularDesignError"; }
};

class InvalidStartError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "InvalidStartError"; }
};

class NoNullProvidersError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "NoNullProvidersError"; }
};

class FitError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "FitError"; }
};

class NumericalError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "NumericalError"; }
};

class ScenarioError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "ScenarioError"; }
};

/// Malformed input file. Row is 1-based counting the header as row 1; 0 means "whole file".
class IngestError : public Error
{
 public:
  IngestError(const std::string& message, std::size_t row = 0, std::string column = {})
      : Error(format(message, row, column)), row_(row), column_(std::move(column))
  {
  }
  const char* kind() const noexcept override { return "IngestError"; }
  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  static std::string format(const std::string& message, std::size_t row, const std::string& column)
  {
    std::string out = message;
    if (row > 0)
      out += " (row " + std::to_string(row);
    if (!column.empty())
      out += std::string(row > 0 ? ", " : " (") + "column '" + column + "'";
    if (row > 0 || !column.empty())
      out += ")";
    return out;
  }

  std::size_t row_;
  std::string column_;
};

class ConfigError : public Error
{
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "ConfigError"; }
};

}  // namespace provconf
