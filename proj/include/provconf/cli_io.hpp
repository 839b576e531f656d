#pragma once

// File formats and orchestration behind the command-line tool: key-value
// configs, provider CSV ingestion, fit reports, posterior grids and
// simulation metrics. Everything here returns strings or JSON so the tests
// can check outputs without touching the filesystem.

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "provconf/en_fit.hpp"
#include "provconf/error.hpp"
#include "provconf/pseudo_bayes.hpp"
#include "provconf/sim_lab.hpp"
#include "provconf/stats.hpp"
#include "provconf/summary_model.hpp"

namespace provconf::io {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Scalars

inline std::string_view trim(std::string_view s)
{
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos)
    return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

/// Shortest representation that round-trips; NA for NaN.
inline std::string format_number(double x)
{
  if (std::isnan(x))
    return "NA";
  if (std::isinf(x))
    return x > 0 ? "Inf" : "-Inf";
  if (x == 0.0)
    return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline std::optional<double> try_parse_double(std::string_view text)
{
  text = trim(text);
  if (text.empty())
    return std::nullopt;
  if (text.front() == '+')
    text.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || !std::isfinite(v))
    return std::nullopt;
  return v;
}

inline double parse_double(std::string_view text, const std::string& key)
{
  if (auto v = try_parse_double(text))
    return *v;
  throw ConfigError("'" + key + "': expected a number, got '" + std::string(text) + "'");
}

inline long long parse_integer(std::string_view text, const std::string& key)
{
  text = trim(text);
  long long v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw ConfigError("'" + key + "': expected an integer, got '" + std::string(text) + "'");
  return v;
}

inline bool parse_bool(std::string_view text, const std::string& key)
{
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on")
    return true;
  if (t == "false" || t == "0" || t == "no" || t == "off")
    return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + std::string(text) + "'");
}

inline std::vector<std::string> split_list(std::string_view text)
{
  std::vector<std::string> out;
  while (true) {
    const auto comma = text.find(',');
    const auto item = trim(text.substr(0, comma));
    if (!item.empty())
      out.emplace_back(item);
    if (comma == std::string_view::npos)
      break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

inline std::vector<double> parse_double_list(std::string_view text, const std::string& key)
{
  std::vector<double> out;
  for (const auto& item : split_list(text))
    out.push_back(parse_double(item, key));
  if (out.empty())
    throw ConfigError("'" + key + "': empty list");
  return out;
}

inline std::string csv_field(std::string_view s)
{
  if (s.find_first_of(",\"\n") == std::string_view::npos)
    return std::string(s);
  std::string out = "\"";
  for (char c : s)
    out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

// ---------------------------------------------------------------------------
// Key-value config files: `key = value` lines, `#` starts a comment.

struct KeyValue
{
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::vector<KeyValue> parse_key_values(std::string_view text)
{
  std::vector<KeyValue> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    KeyValue kv{std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))),
                line_no};
    if (kv.key.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    for (const auto& prev : out)
      if (prev.key == kv.key)
        throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + kv.key + "'");
    out.push_back(std::move(kv));
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IngestError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary file, then renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, std::string_view content)
{
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw Error("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out)
      throw Error("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error("cannot rename into '" + path.string() + "'");
  }
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig
{
  std::string family = "poisson";
  double dispersion = 1.0;
  std::string mode = "robust";
  double pi0_min = 0.02;
  double pi0_max = 1.0;
  int pi0_points = 50;
  double interval_multiplier = 1.96;
  int refit_intervals = 0;
  bool compute_covariance = true;
  /// Diagonal of the prior covariance of nu; one value means v * I.
  std::vector<double> prior_variance{1.0};
  int quadrature_nodes = 64;
  bool quadrature_adaptive = true;
  int quadrature_max_nodes = 512;
  double level = 0.05;
  int posterior_grid_points = 200;
  std::uint64_t seed = 1;

  void set(const std::string& key, const std::string& value)
  {
    if (key == "family") {
      parse_family_kind(value);
      family = value;
    } else if (key == "dispersion") {
      dispersion = parse_double(value, key);
    } else if (key == "mode") {
      mode = value;
    } else if (key == "pi0_min") {
      pi0_min = parse_double(value, key);
    } else if (key == "pi0_max") {
      pi0_max = parse_double(value, key);
    } else if (key == "pi0_points") {
      pi0_points = static_cast<int>(parse_integer(value, key));
    } else if (key == "interval_multiplier") {
      interval_multiplier = parse_double(value, key);
    } else if (key == "refit_intervals") {
      refit_intervals = static_cast<int>(parse_integer(value, key));
    } else if (key == "compute_covariance") {
      compute_covariance = parse_bool(value, key);
    } else if (key == "prior_variance") {
      prior_variance = parse_double_list(value, key);
    } else if (key == "quadrature_nodes") {
      quadrature_nodes = static_cast<int>(parse_integer(value, key));
    } else if (key == "quadrature_adaptive") {
      quadrature_adaptive = parse_bool(value, key);
    } else if (key == "quadrature_max_nodes") {
      quadrature_max_nodes = static_cast<int>(parse_integer(value, key));
    } else if (key == "level") {
      level = parse_double(value, key);
    } else if (key == "posterior_grid_points") {
      posterior_grid_points = static_cast<int>(parse_integer(value, key));
    } else if (key == "seed") {
      const auto s = parse_integer(value, key);
      if (s < 0)
        throw ConfigError("'seed' must be nonnegative");
      seed = static_cast<std::uint64_t>(s);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }

  void validate() const
  {
    const auto kind = parse_family_kind(family);
    if (!(dispersion > 0.0))
      throw ConfigError("dispersion must be positive");
    if (kind == FamilyKind::Poisson && dispersion != 1.0)
      throw ConfigError("the poisson family has dispersion fixed at 1");
    if (mode != "robust" && mode != "normal_mle")
      throw ConfigError("mode must be 'robust' or 'normal_mle'");
    if (!(pi0_min > 0.0 && pi0_min <= pi0_max && pi0_max <= 1.0) || pi0_points < 1)
      throw ConfigError("pi0 grid needs 0 < pi0_min <= pi0_max <= 1 and pi0_points >= 1");
    if (!(interval_multiplier > 0.0))
      throw ConfigError("interval_multiplier must be positive");
    if (refit_intervals < 0)
      throw ConfigError("refit_intervals must be nonnegative");
    for (double v : prior_variance)
      if (!(v >= 0.0))
        throw ConfigError("prior_variance entries must be nonnegative");
    if (quadrature_nodes < 8 || quadrature_max_nodes < quadrature_nodes)
      throw ConfigError("quadrature needs 8 <= quadrature_nodes <= quadrature_max_nodes");
    if (!(level > 0.0 && level < 1.0))
      throw ConfigError("level must lie in (0, 1)");
    if (posterior_grid_points < 2)
      throw ConfigError("posterior_grid_points must be at least 2");
  }

  Family make_family() const
  {
    const auto kind = parse_family_kind(family);
    return kind == FamilyKind::Poisson ? Family::poisson() : Family(kind, dispersion);
  }

  FitConfig fit_config(unsigned threads = 1) const
  {
    FitConfig c;
    c.mode = mode == "normal_mle" ? FitMode::NormalMle : FitMode::Robust;
    c.pi0_grid = make_pi0_grid(pi0_min, pi0_max, pi0_points);
    c.interval_multiplier = interval_multiplier;
    c.refit_intervals = refit_intervals;
    c.compute_covariance = compute_covariance;
    c.threads = threads;
    return c;
  }

  QuadratureOptions quadrature() const
  {
    QuadratureOptions q;
    q.nodes = quadrature_nodes;
    q.adaptive = quadrature_adaptive;
    q.max_nodes = quadrature_max_nodes;
    return q;
  }

  Eigen::MatrixXd prior_covariance(Eigen::Index dim) const
  {
    if (prior_variance.size() == 1)
      return prior_variance.front() * Eigen::MatrixXd::Identity(dim, dim);
    if (static_cast<Eigen::Index>(prior_variance.size()) != dim)
      throw ConfigError("prior_variance has " + std::to_string(prior_variance.size()) +
                        " entries for " + std::to_string(dim) + " covariates");
    Eigen::VectorXd d(dim);
    for (Eigen::Index j = 0; j < dim; ++j)
      d(j) = prior_variance[static_cast<std::size_t>(j)];
    return d.asDiagonal();
  }

  /// Every setting, including defaults. Thread count and paths are left out
  /// because they do not affect results.
  json to_json() const
  {
    json j;
    j["family"] = family;
    j["dispersion"] = dispersion;
    j["mode"] = mode;
    j["pi0_min"] = pi0_min;
    j["pi0_max"] = pi0_max;
    j["pi0_points"] = pi0_points;
    j["interval_multiplier"] = interval_multiplier;
    j["refit_intervals"] = refit_intervals;
    j["compute_covariance"] = compute_covariance;
    j["prior_variance"] = prior_variance;
    j["quadrature_nodes"] = quadrature_nodes;
    j["quadrature_adaptive"] = quadrature_adaptive;
    j["quadrature_max_nodes"] = quadrature_max_nodes;
    j["level"] = level;
    j["posterior_grid_points"] = posterior_grid_points;
    j["seed"] = seed;
    return j;
  }

  static RunConfig from_json(const json& j)
  {
    RunConfig c;
    for (const auto& [key, value] : j.items()) {
      if (value.is_string())
        c.set(key, value.get<std::string>());
      else if (value.is_array()) {
        std::string joined;
        for (const auto& v : value)
          joined += (joined.empty() ? "" : ",") + format_number(v.get<double>());
        c.set(key, joined);
      } else if (value.is_boolean())
        c.set(key, value.get<bool>() ? "true" : "false");
      else if (value.is_number_integer() || value.is_number_unsigned())
        c.set(key, std::to_string(value.get<long long>()));
      else
        c.set(key, format_number(value.get<double>()));
    }
    c.validate();
    return c;
  }
};

inline RunConfig load_run_config(const std::vector<KeyValue>& entries, RunConfig base = {})
{
  for (const auto& kv : entries) {
    try {
      base.set(kv.key, kv.value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(kv.line) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Provider CSV ingestion

struct Dataset
{
  std::vector<ProviderSummary> providers;
  std::vector<std::string> covariate_names;
  std::vector<double> centers;
  std::vector<std::string> warnings;
};

namespace detail {

// Splits one CSV record; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(std::string_view line, std::size_t row)
{
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur += '"';
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::string(trim(cur)));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted)
    throw IngestError("unterminated quoted field", row);
  fields.push_back(std::string(trim(cur)));
  return fields;
}

inline std::optional<int> covariate_index(std::string_view name)
{
  if (name.size() < 3 || name.substr(0, 2) != "w_")
    return std::nullopt;
  int k = 0;
  const auto digits = name.substr(2);
  const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), k);
  if (res.ec != std::errc{} || res.ptr != digits.data() + digits.size() || k < 1)
    return std::nullopt;
  return k;
}

}  // namespace detail

/// Parses provider summaries from CSV text. Covariates are centered by column
/// means, or by `centers` when given (reusing a previous fit's centering).
inline Dataset parse_providers_csv(std::string_view text,
                                   const std::optional<std::vector<double>>& centers = {})
{
  if (text.substr(0, 3) == "\xEF\xBB\xBF")
    text.remove_prefix(3);

  std::vector<std::pair<std::size_t, std::string_view>> lines;
  std::size_t row = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++row;
    if (!trim(line).empty())
      lines.emplace_back(row, line);
  }
  if (lines.empty())
    throw IngestError("input has no header row");

  const auto header = detail::split_csv_line(lines.front().second, lines.front().first);
  std::map<std::string, std::size_t> col;
  std::vector<std::pair<int, std::size_t>> w_cols;
  Dataset data;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& name = header[c];
    if (name.empty())
      throw IngestError("empty column name", lines.front().first);
    if (col.count(name))
      throw IngestError("duplicate column", lines.front().first, name);
    col[name] = c;
    if (auto k = detail::covariate_index(name))
      w_cols.emplace_back(*k, c);
    else if (name != "id" && name != "observed" && name != "expected" &&
             name != "effective_size" && name != "n_patients" && name != "b3_sum")
      data.warnings.push_back("ignoring unrecognized column '" + name + "'");
  }
  for (const char* required : {"id", "observed", "expected", "effective_size"})
    if (!col.count(required))
      throw IngestError("missing required column", 1, required);
  std::sort(w_cols.begin(), w_cols.end());
  for (std::size_t k = 0; k < w_cols.size(); ++k)
    if (w_cols[k].first != static_cast<int>(k + 1))
      throw IngestError("covariate columns must be numbered w_1..w_P without gaps", 1,
                        "w_" + std::to_string(k + 1));
  for (const auto& [k, c] : w_cols)
    data.covariate_names.push_back(header[c]);
  const auto dim = static_cast<Eigen::Index>(w_cols.size());

  if (lines.size() < 2)
    throw IngestError("input has no data rows");

  const auto has_n = col.count("n_patients") > 0;
  const auto has_b3 = col.count("b3_sum") > 0;
  std::map<std::string, std::size_t> seen;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto [r, line] = lines[li];
    const auto fields = detail::split_csv_line(line, r);
    if (fields.size() != header.size())
      throw IngestError("expected " + std::to_string(header.size()) + " fields, found " +
                            std::to_string(fields.size()),
                        r);
    auto number = [&, r = r](const std::string& name) {
      const auto& cell = fields[col.at(name)];
      if (auto v = try_parse_double(cell))
        return *v;
      throw IngestError("non-numeric value '" + cell + "'", r, name);
    };
    ProviderSummary p;
    p.id = fields[col.at("id")];
    if (p.id.empty())
      throw IngestError("empty id", r, "id");
    if (auto [it, inserted] = seen.emplace(p.id, r); !inserted)
      throw IngestError("duplicate id '" + p.id + "' (first seen on row " +
                            std::to_string(it->second) + ")",
                        r, "id");
    p.observed = number("observed");
    p.expected = number("expected");
    p.effective_size = number("effective_size");
    if (has_n)
      p.n_patients = number("n_patients");
    if (has_b3)
      p.b3_sum = number("b3_sum");
    p.covariates.resize(dim);
    for (Eigen::Index j = 0; j < dim; ++j)
      p.covariates(j) = number(header[w_cols[static_cast<std::size_t>(j)].second]);
    data.providers.push_back(std::move(p));
  }

  if (centers && static_cast<Eigen::Index>(centers->size()) != dim)
    throw IngestError("saved centering has " + std::to_string(centers->size()) +
                      " entries but the input has " + std::to_string(dim) + " covariates");
  const double count = static_cast<double>(data.providers.size());
  data.centers.assign(static_cast<std::size_t>(dim), 0.0);
  for (Eigen::Index j = 0; j < dim; ++j) {
    double mean = 0.0;
    for (const auto& p : data.providers)
      mean += p.covariates(j);
    mean /= count;
    double ss = 0.0;
    for (const auto& p : data.providers)
      ss += (p.covariates(j) - mean) * (p.covariates(j) - mean);
    if (ss <= 1e-24 * std::max(1.0, mean * mean) * count)
      data.warnings.push_back("covariate '" + data.covariate_names[static_cast<std::size_t>(j)] +
                              "' is constant; the design will be rank deficient");
    const double center = centers ? (*centers)[static_cast<std::size_t>(j)] : mean;
    data.centers[static_cast<std::size_t>(j)] = center;
    for (auto& p : data.providers)
      p.covariates(j) -= center;
  }
  return data;
}

/// Inverse of parse_providers_csv for uncentered summaries.
inline std::string providers_to_csv(std::span<const ProviderSummary> providers)
{
  if (providers.empty())
    return {};
  const auto dim = providers.front().covariates.size();
  const bool has_n = providers.front().n_patients.has_value();
  const bool has_b3 = providers.front().b3_sum.has_value();
  std::string out = "id,observed,expected,effective_size";
  if (has_n)
    out += ",n_patients";
  if (has_b3)
    out += ",b3_sum";
  for (Eigen::Index j = 0; j < dim; ++j)
    out += ",w_" + std::to_string(j + 1);
  out += '\n';
  for (const auto& p : providers) {
    out += csv_field(p.id) + "," + format_number(p.observed) + "," + format_number(p.expected) + "," +
           format_number(p.effective_size);
    if (has_n)
      out += "," + format_number(p.n_patients.value_or(std::nan("")));
    if (has_b3)
      out += "," + format_number(p.b3_sum.value_or(std::nan("")));
    for (Eigen::Index j = 0; j < dim; ++j)
      out += "," + format_number(p.covariates(j));
    out += '\n';
  }
  return out;
}

inline Dataset ingest(const std::filesystem::path& path,
                      const std::optional<std::vector<double>>& centers = {})
{
  return parse_providers_csv(read_file(path), centers);
}

// ---------------------------------------------------------------------------
// Per-provider report

struct Interval3
{
  double median = std::numeric_limits<double>::quiet_NaN();
  double lower = std::numeric_limits<double>::quiet_NaN();
  double upper = std::numeric_limits<double>::quiet_NaN();
};

struct ProviderRow
{
  std::string id;
  double z_naive = 0.0;
  double z_corrected = std::numeric_limits<double>::quiet_NaN();
  NullInterval interval;
  bool in_null_set = false;
  Interval3 original;
  Interval3 adjusted;
  std::array<std::optional<Flag>, 4> flags;
};

/// Everything needed to flag providers, whether freshly fitted or loaded.
struct FittedModel
{
  Family family = Family::poisson();
  ConfoundingParams params;
  Eigen::MatrixXd covariance;
  std::vector<NullInterval> intervals;
  std::vector<bool> null_set;
};

inline bool supports_bayes(const Family& f)
{
  return f.kind() == FamilyKind::Poisson || f.kind() == FamilyKind::QuasiPoisson;
}

/// Corrected posterior of one provider, or nullopt when the model cannot
/// produce one (non-count family or missing covariance).
inline std::optional<PosteriorR> adjusted_posterior(const ProviderSummary& p,
                                                    const FittedModel& model,
                                                    const RunConfig& config)
{
  if (!supports_bayes(model.family) || !model.covariance.allFinite())
    return std::nullopt;
  const auto dim = model.params.nu.size();
  const auto nu_post =
      nu_posterior(model.params.nu, model.covariance, config.prior_covariance(dim));
  const auto lambda = lambda_posterior(p.covariates, nu_post, model.params.sigma2_alpha);
  return corrected_posterior(p, lambda, config.quadrature());
}

inline std::vector<ProviderRow> provider_rows(std::span<const ProviderSummary> providers,
                                              const FittedModel& model, const RunConfig& config,
                                              std::vector<std::string>& warnings)
{
  std::vector<ProviderRow> rows;
  rows.reserve(providers.size());
  const bool bayes = supports_bayes(model.family);
  bool warned_cov = false;
  std::vector<std::string> unstable;
  for (std::size_t i = 0; i < providers.size(); ++i) {
    const auto& p = providers[i];
    ProviderRow row;
    row.id = p.id;
    row.z_naive = naive_z(p, model.family);
    row.interval = model.intervals[i];
    row.in_null_set = model.null_set[i];
    row.flags[0] = flag_frequentist(p.id, row.z_naive, FlagMethod::NaiveFrequentist, config.level).flag;
    if (auto m = try_null_moments(p, model.family,
                                  p.covariates.size() ? p.covariates.dot(model.params.nu) : 0.0,
                                  model.params.sigma2_alpha)) {
      row.z_corrected = (row.z_naive - m->mean) / m->sd();
      row.flags[1] =
          flag_frequentist(p.id, row.z_corrected, FlagMethod::AdjustedFrequentist, config.level).flag;
    } else {
      warnings.push_back("provider '" + p.id + "': degenerate null variance; corrected Z is NA");
    }
    if (bayes) {
      const auto orig = original_posterior(p);
      const auto d = flag_bayesian(p.id, orig, FlagMethod::NaiveBayes, config.level);
      row.original = {d.statistic, d.interval.first, d.interval.second};
      row.flags[2] = d.flag;
      if (auto adj = adjusted_posterior(p, model, config)) {
        const auto a = flag_bayesian(p.id, *adj, FlagMethod::AdjustedBayes, config.level);
        row.adjusted = {a.statistic, a.interval.first, a.interval.second};
        row.flags[3] = a.flag;
        if (!adj->quadrature_converged())
          unstable.push_back(p.id);
      } else if (!warned_cov) {
        warnings.push_back("covariance unavailable; adjusted Bayesian columns are NA");
        warned_cov = true;
      }
    }
    rows.push_back(std::move(row));
  }
  if (!unstable.empty())
    warnings.push_back(std::to_string(unstable.size()) +
                       " corrected posteriors did not stabilize within the node limit (first: '" +
                       unstable.front() + "')");
  return rows;
}

inline constexpr std::array<const char*, 16> kProviderColumns = {
    "id",           "z_naive",         "z_corrected",     "A",
    "B",            "in_null_set",     "r_median_orig",   "r_lo_orig",
    "r_hi_orig",    "r_median_adj",    "r_lo_adj",        "r_hi_adj",
    "flag_freq_naive", "flag_freq_adj", "flag_bayes_naive", "flag_bayes_adj"};

inline std::string providers_csv(const std::vector<ProviderRow>& rows)
{
  std::string out;
  for (std::size_t k = 0; k < kProviderColumns.size(); ++k)
    out += std::string(k ? "," : "") + kProviderColumns[k];
  out += '\n';
  for (const auto& r : rows) {
    std::vector<std::string> cells = {
        csv_field(r.id),
        format_number(r.z_naive),
        format_number(r.z_corrected),
        format_number(r.interval.lower),
        format_number(r.interval.upper),
        r.in_null_set ? "1" : "0",
        format_number(r.original.median),
        format_number(r.original.lower),
        format_number(r.original.upper),
        format_number(r.adjusted.median),
        format_number(r.adjusted.lower),
        format_number(r.adjusted.upper)};
    for (const auto& f : r.flags)
      cells.push_back(f ? std::string(to_string(*f)) : "NA");
    for (std::size_t k = 0; k < cells.size(); ++k)
      out += (k ? "," : "") + cells[k];
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fit report

struct FitReport
{
  EnFit fit;
  FittedModel model;
  std::vector<ProviderRow> rows;
  std::vector<std::string> warnings;
};

inline FitReport run_fit(const Dataset& data, const RunConfig& config, unsigned threads = 1)
{
  config.validate();
  FitReport report;
  report.warnings = data.warnings;
  const Family family = config.make_family();
  report.fit = fit(data.providers, family, config.fit_config(threads));
  for (const auto& w : report.fit.warnings)
    report.warnings.push_back(w);
  report.model = {family, report.fit.params, report.fit.covariance, report.fit.intervals,
                  report.fit.null_set};
  report.rows = provider_rows(data.providers, report.model, config, report.warnings);
  return report;
}

namespace detail {

inline json number_or_null(double x)
{
  return std::isfinite(x) ? json(x) : json(nullptr);
}

inline json matrix_json(const Eigen::MatrixXd& m)
{
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      row.push_back(number_or_null(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

inline json fit_json(const Dataset& data, const FitReport& report, const RunConfig& config)
{
  const auto& f = report.fit;
  const auto dim = f.params.nu.size();
  const double zq = stats::normal_quantile(0.975);
  json j;
  j["schema_version"] = kSchemaVersion;
  j["family"] = std::string(to_string(report.model.family.kind()));
  j["dispersion"] = report.model.family.dispersion();
  j["n_providers"] = data.providers.size();
  j["n_null"] = f.null_count();
  json nu = json::array(), se = json::array(), ci = json::array();
  for (Eigen::Index k = 0; k < dim; ++k) {
    nu.push_back(f.params.nu(k));
    const double v = f.covariance(k, k);
    const double s = std::isfinite(v) && v >= 0.0 ? std::sqrt(v) : std::nan("");
    se.push_back(detail::number_or_null(s));
    ci.push_back({detail::number_or_null(f.params.nu(k) - zq * s),
                  detail::number_or_null(f.params.nu(k) + zq * s)});
  }
  j["nu_hat"] = nu;
  j["nu_se"] = se;
  j["nu_ci"] = ci;
  j["sigma2_alpha_hat"] = f.params.sigma2_alpha;
  j["pi0_hat"] = f.pi0;
  j["loglik"] = detail::number_or_null(f.loglik);
  j["converged"] = f.converged;
  j["covariance"] = detail::matrix_json(f.covariance);
  j["covariate_names"] = data.covariate_names;
  j["centers"] = data.centers;
  json init;
  init["nu0"] = json::array();
  for (Eigen::Index k = 0; k < f.init.nu0.size(); ++k)
    init["nu0"].push_back(f.init.nu0(k));
  init["scale0"] = f.init.scale0;
  init["sigma2_alpha0"] = f.init.sigma2_alpha0;
  j["init"] = init;
  json intervals = json::array();
  for (std::size_t i = 0; i < data.providers.size(); ++i)
    intervals.push_back({{"id", data.providers[i].id},
                         {"A", detail::number_or_null(f.intervals[i].lower)},
                         {"B", detail::number_or_null(f.intervals[i].upper)},
                         {"in_null_set", static_cast<bool>(f.null_set[i])}});
  j["null_intervals"] = intervals;
  j["config"] = config.to_json();
  j["warnings"] = report.warnings;
  return j;
}

/// Model and config from a previously written fit.json.
struct SavedFit
{
  FittedModel model;
  RunConfig config;
  std::vector<double> centers;
  std::vector<std::string> ids;
};

inline SavedFit load_fit_json(const json& j)
{
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw ConfigError("unsupported fit.json schema_version");
    SavedFit s;
    s.config = RunConfig::from_json(j.at("config"));
    s.model.family = s.config.make_family();
    const auto& nu = j.at("nu_hat");
    const auto dim = static_cast<Eigen::Index>(nu.size());
    s.model.params.nu.resize(dim);
    for (Eigen::Index k = 0; k < dim; ++k)
      s.model.params.nu(k) = nu.at(static_cast<std::size_t>(k)).get<double>();
    s.model.params.sigma2_alpha = j.at("sigma2_alpha_hat").get<double>();
    s.model.covariance.resize(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r)
      for (Eigen::Index c = 0; c < dim; ++c) {
        const auto& v = j.at("covariance").at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c));
        s.model.covariance(r, c) = v.is_null() ? std::nan("") : v.get<double>();
      }
    s.centers = j.at("centers").get<std::vector<double>>();
    for (const auto& e : j.at("null_intervals")) {
      s.ids.push_back(e.at("id").get<std::string>());
      const auto& a = e.at("A");
      const auto& b = e.at("B");
      s.model.intervals.push_back({a.is_null() ? -stats::kInf : a.get<double>(),
                                   b.is_null() ? stats::kInf : b.get<double>()});
      s.model.null_set.push_back(e.at("in_null_set").get<bool>());
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed fit.json: ") + e.what());
  }
}

/// Re-flags providers under a saved fit. Providers must match the saved ids.
inline std::vector<ProviderRow> flag_with_saved(const Dataset& data, const SavedFit& saved,
                                                const RunConfig& config,
                                                std::vector<std::string>& warnings)
{
  if (data.providers.size() != saved.ids.size())
    throw ValidationError("input has " + std::to_string(data.providers.size()) +
                          " providers but the saved fit has " + std::to_string(saved.ids.size()));
  for (std::size_t i = 0; i < saved.ids.size(); ++i)
    if (data.providers[i].id != saved.ids[i])
      throw ValidationError("provider " + std::to_string(i + 1) + " is '" + data.providers[i].id +
                            "' but the saved fit has '" + saved.ids[i] + "'");
  validate(data.providers, saved.model.family);
  if (data.providers.front().covariates.size() != saved.model.params.nu.size())
    throw ValidationError("covariate count differs from the saved fit");
  return provider_rows(data.providers, saved.model, config, warnings);
}

// ---------------------------------------------------------------------------
// Posterior density grid

inline std::string posterior_grid_csv(const PosteriorR& original,
                                      const std::optional<PosteriorR>& adjusted, int points)
{
  if (points < 2)
    throw ValidationError("posterior grid needs at least 2 points");
  double lo = original.quantile(0.0005), hi = original.quantile(0.9995);
  if (adjusted) {
    lo = std::min(lo, adjusted->quantile(0.0005));
    hi = std::max(hi, adjusted->quantile(0.9995));
  }
  std::string out = "r,pdf_orig,cdf_orig,pdf_adj,cdf_adj\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int k = 0; k < points; ++k) {
    const double r = lo + (hi - lo) * static_cast<double>(k) / (points - 1);
    out += format_number(r) + "," + format_number(original.pdf(r)) + "," +
           format_number(original.cdf(r)) + "," + format_number(adjusted ? adjusted->pdf(r) : nan) +
           "," + format_number(adjusted ? adjusted->cdf(r) : nan) + "\n";
  }
  return out;
}

/// File-name-safe form of a provider id.
inline std::string sanitize_id(std::string_view id)
{
  std::string out;
  for (char c : id)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return out.empty() ? "_" : out;
}

// ---------------------------------------------------------------------------
// Simulation scenarios: same key-value grammar, with `sweep.<key> = v1, v2`
// lines expanded as a cartesian product (first sweep outermost).

struct ScenarioPoint
{
  std::vector<std::pair<std::string, std::string>> coordinates;
  AnyScenario scenario;
  RunOptions options;
};

namespace detail {

struct ScenarioBuilder
{
  std::string type = "glm";
  SimScenario glm;
  CreScenario cre;
  RunOptions options;
  RunConfig config;
  bool family_set = false;
  std::optional<std::uint64_t> seed;

  void set(const std::string& key, const std::string& value)
  {
    auto d = [&] { return parse_double(value, key); };
    auto i = [&] { return static_cast<int>(parse_integer(value, key)); };
    auto vec = [&] {
      const auto v = parse_double_list(value, key);
      return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    if (key == "type") {
      if (value != "glm" && value != "cre")
        throw ConfigError("'type' must be 'glm' or 'cre'");
      type = value;
    } else if (key == "n_providers") {
      glm.n_providers = cre.n_providers = i();
    } else if (key == "n_per_provider") {
      glm.n_per_provider = cre.n_per_provider = i();
    } else if (key == "nu") {
      glm.nu = vec();
    } else if (key == "sigma2_alpha") {
      glm.sigma2_alpha = d();
    } else if (key == "outlier_proportion") {
      glm.outlier_proportion = d();
    } else if (key == "outlier_effect") {
      glm.outlier_effect = d();
    } else if (key == "outlier_w_coupling") {
      glm.outlier_w_coupling = d();
    } else if (key == "mu_star") {
      glm.mu_star = cre.mu_star = d();
    } else if (key == "beta") {
      glm.beta = vec();
      cre.beta = glm.beta.size() > 0 ? glm.beta(0) : 0.0;
    } else if (key == "target_w") {
      glm.target_w = d();
    } else if (key == "target_gamma") {
      glm.target_gamma = d();
    } else if (key == "xi") {
      cre.xi = d();
    } else if (key == "sigma2_tau") {
      cre.sigma2_tau = d();
    } else if (key == "sigma2_eps") {
      cre.sigma2_eps = d();
    } else if (key == "contamination") {
      cre.contamination = d();
    } else if (key == "outlier_shift") {
      cre.outlier_shift = d();
    } else if (key == "x_mean_mean") {
      cre.x_mean_mean = d();
    } else if (key == "x_mean_variance") {
      cre.x_mean_variance = d();
    } else if (key == "x_within_variance") {
      cre.x_within_variance = d();
    } else if (key == "n_reps") {
      options.n_reps = i();
    } else if (key == "fit_baseline") {
      options.fit_baseline = parse_bool(value, key);
    } else if (key == "flag_target") {
      options.flag_target = parse_bool(value, key);
    } else if (key == "max_failure_rate") {
      options.max_failure_rate = d();
    } else if (key == "seed") {
      config.set(key, value);
      seed = config.seed;
    } else {
      config.set(key, value);
      family_set = family_set || key == "family" || key == "dispersion";
    }
  }

  ScenarioPoint build() const
  {
    config.validate();
    ScenarioPoint p;
    p.options = options;
    p.options.fit = config.fit_config(1);
    p.options.level = config.level;
    p.options.quadrature = config.quadrature();
    if (config.prior_variance.size() != 1)
      throw ConfigError("simulation accepts a single prior_variance value");
    p.options.prior_variance = config.prior_variance.front();
    if (type == "glm") {
      SimScenario s = glm;
      s.family = config.make_family();
      s.seed = config.seed;
      provconf::detail::check_scenario(s);
      if (s.nu.size() != glm.nu.size())
        throw ConfigError("nu has the wrong length");
      p.scenario = s;
    } else {
      CreScenario s = cre;
      s.seed = config.seed;
      provconf::detail::check_scenario(s);
      p.scenario = s;
    }
    return p;
  }
};

}  // namespace detail

inline std::vector<ScenarioPoint> expand_scenarios(const std::vector<KeyValue>& entries,
                                                   std::optional<std::uint64_t> seed_override = {},
                                                   std::optional<int> reps_override = {})
{
  detail::ScenarioBuilder base;
  std::vector<std::pair<std::string, std::vector<std::string>>> sweeps;
  for (const auto& kv : entries) {
    try {
      if (kv.key.rfind("sweep.", 0) == 0) {
        auto values = split_list(kv.value);
        if (values.empty())
          throw ConfigError("sweep '" + kv.key + "' has no values");
        const auto key = kv.key.substr(6);
        base.set(key, values.front());  // validates the key early
        sweeps.emplace_back(key, std::move(values));
      } else {
        base.set(kv.key, kv.value);
      }
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(kv.line) + ": " + e.what());
    }
  }
  if (seed_override)
    base.set("seed", std::to_string(*seed_override));
  if (reps_override)
    base.options.n_reps = *reps_override;

  std::size_t total = 1;
  for (const auto& sw : sweeps)
    total *= sw.second.size();
  std::vector<ScenarioPoint> points;
  for (std::size_t n = 0; n < total; ++n) {
    // Mixed-radix digits of n, last sweep varying fastest.
    std::vector<std::size_t> idx(sweeps.size());
    std::size_t rest = n;
    for (std::size_t s = sweeps.size(); s-- > 0;) {
      idx[s] = rest % sweeps[s].second.size();
      rest /= sweeps[s].second.size();
    }
    detail::ScenarioBuilder b = base;
    std::vector<std::pair<std::string, std::string>> coords;
    for (std::size_t s = 0; s < sweeps.size(); ++s) {
      b.set(sweeps[s].first, sweeps[s].second[idx[s]]);
      coords.emplace_back(sweeps[s].first, sweeps[s].second[idx[s]]);
    }
    if (seed_override)
      b.set("seed", std::to_string(*seed_override));
    auto point = b.build();
    point.coordinates = std::move(coords);
    points.push_back(std::move(point));
  }
  return points;
}

inline std::string metrics_csv(const std::vector<ScenarioPoint>& points,
                               const std::vector<ReplicateMetrics>& results)
{
  std::vector<std::string> coord_names;
  if (!points.empty())
    for (const auto& [k, v] : points.front().coordinates)
      coord_names.push_back(k);
  std::string out = "point";
  for (const auto& k : coord_names)
    out += "," + k;
  out +=
      ",method,n_reps,n_failed,n,bias_nu,se_bias_nu,bias_sigma2_alpha,se_bias_sigma2_alpha,"
      "mse_nu,se_mse_nu,coverage,se_coverage,n_null_target,ffp,se_ffp,n_outlier_target,tfp,"
      "se_tfp\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (const auto& m : results[p].methods) {
      out += std::to_string(p + 1);
      for (const auto& [k, v] : points[p].coordinates)
        out += "," + csv_field(v);
      auto est = [&](double x) { return format_number(m.is_estimator ? x : nan); };
      auto flg = [&](double x) { return format_number(m.is_estimator ? nan : x); };
      out += "," + m.method + "," + std::to_string(results[p].n_reps) + "," +
             std::to_string(results[p].n_failed) + "," + std::to_string(m.n) + "," +
             est(m.bias_nu) + "," + est(m.se_bias_nu) + "," + est(m.bias_sigma2_alpha) + "," +
             est(m.se_bias_sigma2_alpha) + "," + est(m.mse_nu) + "," + est(m.se_mse_nu) + "," +
             est(m.coverage) + "," + est(m.se_coverage) + "," +
             (m.is_estimator ? "NA" : std::to_string(m.n_null_target)) + "," + flg(m.ffp) + "," +
             flg(m.se_ffp) + "," + (m.is_estimator ? "NA" : std::to_string(m.n_outlier_target)) +
             "," + flg(m.tfp) + "," + flg(m.se_tfp) + "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// One-line machine-readable error record.
inline std::string error_record(const std::exception& e)
{
  json j;
  if (const auto* pe = dynamic_cast<const Error*>(&e)) {
    j["error"] = pe->kind();
    j["message"] = pe->what();
    if (const auto* ie = dynamic_cast<const IngestError*>(&e)) {
      if (ie->row() > 0)
        j["row"] = ie->row();
      if (!ie->column().empty())
        j["column"] = ie->column();
    }
    if (const auto* de = dynamic_cast<const DegenerateVarianceError*>(&e))
      j["provider"] = de->provider_id();
  } else {
    j["error"] = "InternalError";
    j["message"] = e.what();
  }
  return j.dump();
}

}  // namespace provconf::io
