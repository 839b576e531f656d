// Command-line front end: fit, flag, simulate, posterior.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "provconf/cli_io.hpp"

namespace fs = std::filesystem;
using namespace provconf;

namespace {

struct Common
{
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string config_path;
};

void add_common(CLI::App* cmd, Common& c)
{
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Random seed (all randomness derives from it)");
  cmd->add_option("--threads", c.threads, "Worker threads")->check(CLI::Range(1u, 256u))->capture_default_str();
  cmd->add_option("--config", c.config_path, "Key-value config file")->check(CLI::ExistingFile);
}

io::RunConfig resolve_config(const Common& c, io::RunConfig base = {})
{
  if (!c.config_path.empty())
    base = io::load_run_config(io::parse_key_values(io::read_file(c.config_path)), base);
  if (c.seed)
    base.seed = *c.seed;
  base.validate();
  return base;
}

void report_warnings(const std::vector<std::string>& warnings)
{
  for (const auto& w : warnings)
    std::cerr << "warning: " << w << '\n';
}

std::vector<std::string> posterior_targets(const std::string& request, const io::Dataset& data)
{
  std::vector<std::string> ids;
  if (request.empty())
    return ids;
  if (request == "all") {
    for (const auto& p : data.providers)
      ids.push_back(p.id);
    return ids;
  }
  return io::split_list(request);
}

void write_posteriors(const fs::path& dir, const std::vector<std::string>& ids,
                      const io::Dataset& data, const io::FittedModel& model,
                      const io::RunConfig& config)
{
  if (ids.empty())
    return;
  if (!io::supports_bayes(model.family))
    throw ValidationError("posterior grids need the poisson or quasipoisson family");
  for (const auto& id : ids) {
    const auto it = std::find_if(data.providers.begin(), data.providers.end(),
                                 [&](const ProviderSummary& p) { return p.id == id; });
    if (it == data.providers.end())
      throw ValidationError("unknown provider id '" + id + "'");
    const auto adjusted = io::adjusted_posterior(*it, model, config);
    io::write_atomic(dir / ("posterior_" + io::sanitize_id(id) + ".csv"),
                     io::posterior_grid_csv(original_posterior(*it), adjusted,
                                            config.posterior_grid_points));
  }
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Provider profiling with cluster-level confounding adjustment"};
  app.require_subcommand(1);

  Common fit_opts, flag_opts, sim_opts, post_opts;
  std::string fit_input, fit_mode, fit_family, fit_posterior;
  std::optional<double> fit_dispersion;
  auto* fit_cmd = app.add_subcommand("fit", "Fit the empirical-null model and flag providers");
  add_common(fit_cmd, fit_opts);
  fit_cmd->add_option("--input", fit_input, "Provider summary CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--mode", fit_mode, "robust or normal_mle");
  fit_cmd->add_option("--family", fit_family, "normal, poisson, quasipoisson or expfamily");
  fit_cmd->add_option("--dispersion", fit_dispersion, "a(psi) for the chosen family");
  fit_cmd->add_option("--posterior", fit_posterior,
                      "Comma-separated provider ids (or 'all') for posterior_<id>.csv grids");

  std::string flag_fit, flag_input;
  auto* flag_cmd = app.add_subcommand("flag", "Flag providers under a saved fit");
  add_common(flag_cmd, flag_opts);
  flag_cmd->add_option("--fit", flag_fit, "fit.json from a previous run")->required()->check(CLI::ExistingFile);
  flag_cmd->add_option("--input", flag_input, "Provider summary CSV")->required()->check(CLI::ExistingFile);

  std::string scenario_path;
  std::optional<int> reps;
  auto* sim_cmd = app.add_subcommand("simulate", "Run a simulation scenario and write metrics.csv");
  add_common(sim_cmd, sim_opts);
  sim_cmd->add_option("--scenario", scenario_path, "Scenario file")->required()->check(CLI::ExistingFile);
  sim_cmd->add_option("--reps", reps, "Replicates per scenario point")->check(CLI::PositiveNumber);

  std::string post_fit, post_input, post_id;
  auto* post_cmd = app.add_subcommand("posterior", "Write the posterior density grid of one provider");
  add_common(post_cmd, post_opts);
  post_cmd->add_option("--fit", post_fit, "fit.json from a previous run")->required()->check(CLI::ExistingFile);
  post_cmd->add_option("--input", post_input, "Provider summary CSV")->required()->check(CLI::ExistingFile);
  post_cmd->add_option("--id", post_id, "Provider id")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (fit_cmd->parsed()) {
      auto config = resolve_config(fit_opts);
      if (!fit_family.empty())
        config.set("family", fit_family);
      if (fit_dispersion)
        config.dispersion = *fit_dispersion;
      if (!fit_mode.empty())
        config.set("mode", fit_mode);
      config.validate();
      const auto data = io::ingest(fit_input);
      const auto report = io::run_fit(data, config, fit_opts.threads);
      const fs::path dir = fit_opts.out;
      fs::create_directories(dir);
      io::write_atomic(dir / "fit.json", io::fit_json(data, report, config).dump(2) + "\n");
      io::write_atomic(dir / "providers.csv", io::providers_csv(report.rows));
      write_posteriors(dir, posterior_targets(fit_posterior, data), data, report.model, config);
      report_warnings(report.warnings);
    } else if (flag_cmd->parsed()) {
      const auto saved = io::load_fit_json(io::json::parse(io::read_file(flag_fit)));
      const auto config = resolve_config(flag_opts, saved.config);
      const auto data = io::ingest(flag_input, saved.centers);
      std::vector<std::string> warnings = data.warnings;
      const auto rows = io::flag_with_saved(data, saved, config, warnings);
      const fs::path dir = flag_opts.out;
      fs::create_directories(dir);
      io::write_atomic(dir / "providers.csv", io::providers_csv(rows));
      report_warnings(warnings);
    } else if (sim_cmd->parsed()) {
      auto entries = io::parse_key_values(io::read_file(scenario_path));
      if (!sim_opts.config_path.empty())
        for (auto& kv : io::parse_key_values(io::read_file(sim_opts.config_path)))
          entries.push_back(kv);
      const auto points = io::expand_scenarios(entries, sim_opts.seed, reps);
      std::vector<ReplicateMetrics> results;
      for (std::size_t p = 0; p < points.size(); ++p) {
        auto options = points[p].options;
        options.threads = sim_opts.threads;
        results.push_back(run_replicates(points[p].scenario, options));
        std::cerr << "point " << p + 1 << "/" << points.size() << " done ("
                  << results.back().n_failed << " failed replicates)\n";
      }
      const fs::path dir = sim_opts.out;
      fs::create_directories(dir);
      io::write_atomic(dir / "metrics.csv", io::metrics_csv(points, results));
    } else if (post_cmd->parsed()) {
      const auto saved = io::load_fit_json(io::json::parse(io::read_file(post_fit)));
      const auto config = resolve_config(post_opts, saved.config);
      const auto data = io::ingest(post_input, saved.centers);
      std::vector<std::string> warnings;
      io::flag_with_saved(data, saved, config, warnings);
      const fs::path dir = post_opts.out;
      fs::create_directories(dir);
      write_posteriors(dir, {post_id}, data, saved.model, config);
    }
  } catch (const std::exception& e) {
    std::cerr << io::error_record(e) << '\n';
    return 1;
  }
  return 0;
}
