// cliplab: batch experiment driver. One subcommand per pipeline stage;
// everything is driven by a JSON config plus a handful of overrides.

#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cliplab/experiment.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  long long seed = -1;
  int deterministic = -1;  // -1: leave as configured
};

void add_common(CLI::App* sub, CommonFlags* flags) {
  sub->add_option("--config", flags->config_path, "experiment config (JSON)")->required();
  sub->add_option("--out", flags->out_dir, "override output directory");
  sub->add_option("--seed", flags->seed, "override the global seed");
  sub->add_flag("--deterministic,!--no-deterministic", flags->deterministic,
                "force deterministic mode on/off");
}

cliplab::ExperimentConfig load_with_overrides(const CommonFlags& flags) {
  cliplab::ExperimentConfig cfg = cliplab::load_experiment_config(flags.config_path);
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  if (flags.seed >= 0) {
    cfg.seed = static_cast<uint64_t>(flags.seed);
    // Stage seeds re-derive from the new global seed.
    cfg.dataset.seed = 0;
    cfg.poison.seed = 0;
    cfg.arch.init_seed = 0;
    cfg.pretrain.optim.seed = 0;
    cfg.finetune.optim.seed = 0;
  }
  if (flags.deterministic >= 0) {
    cfg.deterministic = flags.deterministic != 0;
    cfg.pretrain.optim.determinism = cfg.deterministic;
    cfg.finetune.optim.determinism = cfg.deterministic;
  }
  return cfg;
}

std::vector<double> parse_values(const std::vector<std::string>& raw) {
  std::vector<double> values;
  for (const auto& item : raw) {
    std::stringstream ss(item);
    std::string piece;
    while (std::getline(ss, piece, ',')) {
      if (piece.empty()) continue;
      values.push_back(std::stod(piece));
    }
  }
  return values;
}

void print_report(const cliplab::MetricsReport& r) {
  std::printf("clean_accuracy        %.4f\n", r.clean_accuracy);
  std::printf("attack_success_rate   %.4f\n", r.attack_success_rate);
  std::printf("mean_pair_distance    %.4f\n", r.mean_pair_distance);
  if (r.detection_recall)
    std::printf("detection_recall      %.4f\n", *r.detection_recall);
  if (r.detection_precision)
    std::printf("detection_precision   %.4f\n", *r.detection_precision);
  if (!r.clipscore_curves.empty())
    std::printf("clipscore_epochs      %zu\n", r.clipscore_curves.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"backdoor poisoning & CleanCLIP defenses, desk scale"};
  app.require_subcommand(1);

  CommonFlags generate_flags, poison_flags, train_flags, eval_flags, sweep_flags, report_flags;
  std::string stage = "pretrain";
  std::string checkpoint;
  bool force = false;
  std::string axis;
  std::vector<std::string> raw_values;

  CLI::App* generate = app.add_subcommand("generate", "render the paired corpus + val split");
  add_common(generate, &generate_flags);

  CLI::App* poison = app.add_subcommand("poison", "inject the configured trigger into the corpus");
  add_common(poison, &poison_flags);

  CLI::App* train = app.add_subcommand("train", "run one training stage");
  add_common(train, &train_flags);
  train->add_option("--stage", stage, "pretrain | finetune")
      ->check(CLI::IsMember({"pretrain", "finetune"}));
  train->add_option("--checkpoint", checkpoint, "input checkpoint (finetune)");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
  add_common(eval_cmd, &eval_flags);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  eval_cmd->add_flag("--force", force, "ignore config-hash mismatches");

  CLI::App* sweep = app.add_subcommand("sweep", "run a one-axis grid of full pipelines");
  add_common(sweep, &sweep_flags);
  sweep->add_option("--axis", axis, "lambda2 | num_poison | finetune_size | pretrain_size")
      ->required()
      ->check(CLI::IsMember({"lambda2", "num_poison", "finetune_size", "pretrain_size"}));
  sweep->add_option("--values", raw_values, "axis values (comma-separated or repeated)");

  CLI::App* report = app.add_subcommand("report", "print the saved metrics report");
  add_common(report, &report_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (generate->parsed()) {
      cliplab::cmd_generate(load_with_overrides(generate_flags));
    } else if (poison->parsed()) {
      cliplab::cmd_poison(load_with_overrides(poison_flags));
    } else if (train->parsed()) {
      cliplab::cmd_train(load_with_overrides(train_flags), stage, checkpoint);
    } else if (eval_cmd->parsed()) {
      print_report(cliplab::cmd_eval(load_with_overrides(eval_flags), checkpoint, force));
    } else if (sweep->parsed()) {
      auto rows = cliplab::cmd_sweep(load_with_overrides(sweep_flags), axis,
                                     parse_values(raw_values));
      std::printf("%-12s %-16s %-20s %s\n", "value", "clean_accuracy", "attack_success_rate",
                  "status");
      for (const auto& r : rows)
        std::printf("%-12g %-16.4f %-20.4f %s\n", r.value, r.clean_accuracy,
                    r.attack_success_rate, r.failed ? r.error.c_str() : "ok");
    } else if (report->parsed()) {
      cliplab::ExperimentConfig cfg = load_with_overrides(report_flags);
      print_report(cliplab::load_metrics_report(cfg.out_dir + "/report.json"));
    }
  } catch (const cliplab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const cliplab::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
