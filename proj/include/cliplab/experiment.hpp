#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cliplab/augment.hpp"
#include "cliplab/dataset.hpp"
#include "cliplab/eval.hpp"
#include "cliplab/optim.hpp"
#include "cliplab/triggers.hpp"

namespace cliplab {

// One pipeline stage: which data it sees, which objective it optimizes.
struct StageConfig {
  std::string objective = "mmcl";  // mmcl | ssl | cleanclip | abl | supervised_ce
  std::string data = "poisoned";   // poisoned | clean
  double fraction = 1.0;           // seeded subset of the stage corpus
  OptimConfig optim;
  LossConfig loss;
  // abl only: detection inputs
  std::string abl_reference_checkpoint;
  int abl_k = 0;  // 0: ceil(0.0033 * |corpus|)
};

struct EvalConfig {
  int pair_distance_samples = 200;
  std::string detect_mode = "lowest";
  int detect_k = 0;  // 0: |true poison set| when a manifest exists
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::string out_dir = "runs/experiment";
  bool deterministic = true;
  DatasetSpec dataset;
  double val_fraction = 0.2;
  PoisonSpec poison;
  ArchSpec arch;
  AugmentPolicy augment;
  StageConfig pretrain;
  StageConfig finetune;
  EvalConfig eval;

  void validate() const;
};

ExperimentConfig default_experiment_config();
ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::string& path);
std::string canonical_config_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

// Pipeline stages; each writes its artifacts under cfg.out_dir.
void cmd_generate(const ExperimentConfig& cfg);
void cmd_poison(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg, const std::string& stage,
               const std::string& checkpoint_path = "");
MetricsReport cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                       bool force = false);

struct SweepRow {
  double value = 0.0;
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
  bool failed = false;
  std::string error;
};
std::vector<SweepRow> cmd_sweep(const ExperimentConfig& cfg, const std::string& axis,
                                const std::vector<double>& values);

// Seeded class-stratified subset used for finetuning stages.
PairedCorpus subset_corpus(const PairedCorpus& corpus, double fraction, uint64_t seed);

// Trigger applier over validation images for the configured poison spec.
TriggerApplier make_trigger_applier(const PoisonSpec& poison);

}  // namespace cliplab
