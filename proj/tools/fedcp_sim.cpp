// Command-line front end: run one experiment, sweep an axis, run the
// built-in check suite, or emit a partition sidecar for auditing.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedcp/config.hpp"
#include "fedcp/selftest.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int workers = 0;
  std::string output;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "experiment description (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  a.seed_opt =
      cmd->add_option("--seed", a.seed, "override the file's master seed");
  cmd->add_option("--workers", a.workers,
                  "worker threads, 0 = machine parallelism")
      ->envname("FEDCP_SIM_WORKERS");
  cmd->add_option("--output", a.output,
                  "output directory, wins over the file's output_dir");
  cmd->add_flag("--force", a.force, "write into a non-empty output directory");
}

fedcp::ExperimentConfig load(const CommonArgs& a) {
  fedcp::ExperimentConfig cfg = fedcp::parse_config_file(a.config);
  if (a.seed_opt != nullptr && a.seed_opt->count() > 0)
    cfg.master_seed = a.seed;
  return cfg;
}

fedcp::RunOptions options(const CommonArgs& a) {
  fedcp::RunOptions opt;
  opt.workers = a.workers;
  opt.force = a.force;
  opt.output_override = a.output;
  return opt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Deterministic single-process simulator for federated personalization "
      "with per-sample policies"};
  app.require_subcommand(1);

  CommonArgs run_args, sweep_args, part_args;
  std::string axis;
  std::vector<std::string> values;

  CLI::App* cmd_run = app.add_subcommand("run", "execute one experiment");
  add_common(cmd_run, run_args);

  CLI::App* cmd_sweep =
      app.add_subcommand("sweep", "run one experiment per axis value");
  add_common(cmd_sweep, sweep_args);
  cmd_sweep->add_option("--axis", axis, "algorithm | lambda | beta")
      ->required();
  cmd_sweep->add_option("--values", values, "comma-separated axis values")
      ->required()
      ->delimiter(',');

  CLI::App* cmd_selftest =
      app.add_subcommand("selftest", "run the built-in check suite");

  CLI::App* cmd_partition = app.add_subcommand(
      "partition", "emit the partition sidecar without training");
  add_common(cmd_partition, part_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_run->parsed()) {
      fedcp::RunOutcome out =
          fedcp::run_experiment(load(run_args), options(run_args));
      std::printf("best mean accuracy %.4f over %d rounds\n",
                  out.best_accuracy, out.rounds_run);
      if (!out.output_dir.empty())
        std::printf("outputs in %s\n", out.output_dir.c_str());
      return 0;
    }
    if (cmd_sweep->parsed()) {
      fedcp::SweepOutcome out = fedcp::run_sweep(load(sweep_args), axis,
                                                 values, options(sweep_args));
      for (const fedcp::SweepPoint& p : out.points) {
        if (p.ok)
          std::printf("%-24s best accuracy %.4f\n", p.label.c_str(),
                      p.best_accuracy);
        else
          std::printf("%-24s FAILED: %s\n", p.label.c_str(), p.error.c_str());
      }
      if (!out.output_dir.empty())
        std::printf("outputs in %s\n", out.output_dir.c_str());
      return out.ok ? 0 : 1;
    }
    if (cmd_selftest->parsed()) {
      const std::vector<fedcp::CheckResult> results = fedcp::run_selftests();
      std::fputs(fedcp::render_check_table(results).c_str(), stdout);
      return fedcp::all_passed(results) ? 0 : 1;
    }
    if (cmd_partition->parsed()) {
      fedcp::ExperimentConfig cfg = load(part_args);
      fedcp::PreparedExperiment prep = fedcp::prepare_experiment(cfg);
      const std::string sidecar = fedcp::plan_sidecar(prep.plan);
      const std::string outdir =
          part_args.output.empty() ? cfg.output_dir : part_args.output;
      if (outdir.empty()) {
        std::fputs(sidecar.c_str(), stdout);
      } else {
        fedcp::ensure_output_dir(outdir, part_args.force);
        const std::string path =
            (std::filesystem::path(outdir) / "partition.txt").string();
        fedcp::write_atomic(path, sidecar);
        std::printf("partition sidecar in %s\n", path.c_str());
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fedcp_sim: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
