#include "calibfield/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumerical = 4 };

}  // namespace

int main(int argc, char** argv) {
  using namespace calibfield;

  CLI::App app{"Discover, audit and correct input-dependent miscalibration."};
  app.require_subcommand(1);

  CommandOverrides o;
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
  int jobs = 0;
  int bootstrap = 0;
  int permutation_null = 0;
  std::vector<std::uint64_t> seeds;
  double epsilon = 0.0;
  std::string format;
  std::string checkpoint;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "Output directory");
    cmd->add_option("--seed", seed, "Global seed");
    cmd->add_option("--jobs", jobs, "Parallel training jobs")->check(CLI::PositiveNumber);
    cmd->add_option("--format", format, "Dataset file format")->check(CLI::IsMember({"csv", "jsonl", "bin"}));
  };
  auto add_model = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint written by train or sweep")->required();
    cmd->add_option("--epsilon", epsilon, "Regime threshold");
  };

  CLI::App* generate = app.add_subcommand("generate", "Write a synthetic dataset and its manifest");
  CLI::App* train = app.add_subcommand("train", "Train one field at the configured sigma and lambda");
  CLI::App* sweep = app.add_subcommand("sweep", "Grid search over sigma and lambda with proxy selection");
  CLI::App* evaluate = app.add_subcommand("evaluate", "Test-split report for raw, corrected, isotonic and TS");
  CLI::App* audit = app.add_subcommand("audit", "Regime audit with optional resampling suites");
  for (CLI::App* cmd : {generate, train, sweep, evaluate, audit}) add_common(cmd);
  add_model(evaluate);
  add_model(audit);
  audit->add_option("--bootstrap", bootstrap, "Bootstrap replicates");
  audit->add_option("--permutation-null", permutation_null, "Label-permutation reruns");
  audit->add_option("--seeds", seeds, "Training seeds for the stability suite")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  auto given = [](CLI::App* cmd, const char* name) { return cmd->count(name) > 0; };
  CLI::App* cmd = app.get_subcommands().front();
  o.config_path = config_path;
  if (given(cmd, "--out")) o.out = out;
  if (given(cmd, "--seed")) o.seed = seed;
  if (given(cmd, "--jobs")) o.jobs = jobs;
  if (given(cmd, "--format")) o.format = format;
  if (cmd == evaluate || cmd == audit) {
    if (given(cmd, "--epsilon")) o.epsilon = epsilon;
  }
  if (cmd == audit) {
    if (given(cmd, "--bootstrap")) o.bootstrap = bootstrap;
    if (given(cmd, "--permutation-null")) o.permutation_null = permutation_null;
    if (given(cmd, "--seeds")) o.seeds = seeds;
  }

  try {
    const RunConfig config = resolve_config(o);
    if (cmd == generate) {
      cmd_generate(config);
    } else if (cmd == train) {
      cmd_train(config);
    } else if (cmd == sweep) {
      cmd_sweep(config);
    } else if (cmd == evaluate) {
      cmd_evaluate(config, checkpoint);
    } else {
      cmd_audit(config, checkpoint);
    }
    std::cout << "wrote " << config.output_dir.string() << '\n';
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
}
