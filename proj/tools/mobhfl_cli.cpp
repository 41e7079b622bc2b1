#include <CLI11.hpp>

#include <iostream>

#include "mobhfl/harness/commands.hpp"
#include "mobhfl/harness/config.hpp"

namespace h = mobhfl::harness;

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical federated learning simulator with mobile clients"};
  app.require_subcommand(1);

  std::string config_path;
  h::CommandOptions opts;
  std::uint64_t seed = 0;
  std::vector<double> speeds;
  std::vector<std::uint64_t> seeds;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--out", opts.out_dir, "output directory (default: output.dir)");
    sub->add_option("--seed", seed, "override every seed in the config");
    sub->add_option("--parallel", opts.parallel, "worker threads")->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "train and write metrics, summary and checkpoint");
  auto* sweep = app.add_subcommand("sweep-speed", "paired-seed sweep over vehicle speeds");
  auto* verify = app.add_subcommand("verify-bounds", "check the convergence inequalities on a convex instance");
  auto* report = app.add_subcommand("partition-report", "write the partition and mobility trace CSVs");
  for (auto* sub : {run, sweep, verify, report}) common(sub);
  sweep->add_option("--speeds", speeds, "speeds in m/s (default: experiment.speeds)")->delimiter(',');
  sweep->add_option("--seeds", seeds, "seeds (default: experiment.seeds)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : h::kConfigInvalid;
  }

  h::ExperimentConfig cfg;
  {
    const int rc = h::guarded(std::cerr, [&] {
      cfg = h::load_config(config_path);
      return 0;
    });
    if (rc != 0) return rc;
  }
  for (auto* sub : {run, sweep, verify, report}) {
    if (sub->count("--seed") > 0) opts.seed = seed;
  }
  opts.speeds = speeds;
  opts.seeds = seeds;

  if (*run) return h::cmd_run(cfg, opts);
  if (*sweep) return h::cmd_sweep_speed(cfg, opts);
  if (*verify) return h::cmd_verify_bounds(cfg, opts);
  return h::cmd_partition_report(cfg, opts);
}
