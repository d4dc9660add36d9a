#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cliplab/augment.hpp"
#include "cliplab/dataset.hpp"
#include "cliplab/model.hpp"
#include "cliplab/objectives.hpp"

namespace cliplab {

struct OptimConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.1;
  int warmup_steps = 200;
  int total_steps = 0;  // 0: epochs * ceil(n / batch_size)
  int batch_size = 64;
  int epochs = 40;
  uint64_t seed = 0;
  bool determinism = true;

  void validate() const;
};

struct OptimState {
  std::vector<double> m;
  std::vector<double> v;
  int64_t step = 0;
};

double cosine_lr(int step, const OptimConfig& cfg);

// One decoupled-weight-decay Adam update over a flat parameter vector.
void adamw_step(std::vector<double>& params, const std::vector<double>& grads, OptimState& state,
                double lr_t, const OptimConfig& cfg);

enum class ObjectiveKind { Mmcl, Ssl, CleanClip, Abl };

ObjectiveKind objective_kind_from_name(const std::string& name);
const char* objective_kind_name(ObjectiveKind k);

struct TrainObjective {
  ObjectiveKind kind = ObjectiveKind::Mmcl;
  LossConfig loss;
  AugmentPolicy augment;                   // used by Ssl / CleanClip
  std::vector<size_t> abl_poison_indices;  // detected set, used by Abl
  int abl_sample_per_step = 16;
};

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochScores {
  int epoch = 0;
  double clean_mean = 0.0;
  double poison_mean = 0.0;
};

struct TrainingLog {
  std::vector<StepRecord> steps;
  std::vector<EpochScores> clipscores;
};

// Newline-delimited records.
void save_training_log(const TrainingLog& log, const std::string& path);

struct TrainHooks {
  bool log_clipscores = false;
  int checkpoint_every_epochs = 0;
  std::string checkpoint_dir;
  std::string config_hash;
  std::string corpus_hash;
};

TrainingLog run_training(const PairedCorpus& corpus, ModelParams& params,
                         const TrainObjective& objective, const OptimConfig& cfg,
                         const TrainHooks& hooks = {});

// Linear classifier head on top of the (unit-norm) vision embedding.
struct ClassifierHead {
  int num_classes = 0;
  int proj_dim = 0;
  std::vector<double> w;  // num_classes x proj_dim
  std::vector<double> b;  // num_classes
};

ClassifierHead init_head(const ArchSpec& arch, int num_classes, uint64_t seed);

// Supervised cross-entropy finetuning of the vision tower + head; the text
// tower and temperature are frozen.
TrainingLog run_supervised_finetune(const PairedCorpus& corpus, ModelParams& params,
                                    ClassifierHead& head, const OptimConfig& cfg);

}  // namespace cliplab
