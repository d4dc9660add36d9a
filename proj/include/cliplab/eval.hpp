#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cliplab/dataset.hpp"
#include "cliplab/model.hpp"

namespace cliplab {

// Maps a clean image to its triggered counterpart; the index selects the
// per-example trigger stream where the trigger uses one.
using TriggerApplier = std::function<Image(const Image&, size_t index)>;

struct MetricsReport {
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
  double mean_pair_distance = 0.0;
  std::vector<double> per_class_accuracy;
  std::optional<double> detection_recall;
  std::optional<double> detection_precision;
  std::vector<std::array<double, 2>> clipscore_curves;  // per-epoch (clean, poison) means
};

void save_metrics_report(const MetricsReport& report, const std::string& path);
MetricsReport load_metrics_report(const std::string& path);

// Proxy caption "a photo of a {name}" per class, encoded once.
std::vector<Embedding> class_caption_embeddings(const ModelParams& params,
                                                const std::vector<std::string>& class_names,
                                                const Vocab& vocab);

int zero_shot_classify(const ModelParams& params, const Image& image,
                       const std::vector<std::string>& class_names, const Vocab& vocab);
int zero_shot_classify(const Embedding& image_emb, const std::vector<Embedding>& class_embs);

double clean_accuracy(const ModelParams& params, const PairedCorpus& val_corpus,
                      std::vector<double>* per_class = nullptr);

// Triggered non-target-class images predicted as the target class.
double attack_success_rate(const ModelParams& params, const PairedCorpus& val_corpus,
                           const TriggerApplier& trigger, int target_class);

// 2 - 2 cos; squared Euclidean distance for unit vectors.
double pair_distance(const Embedding& e1, const Embedding& e2);
double mean_pair_distance(const ModelParams& params, const std::vector<Image>& clean_images,
                          const TriggerApplier& trigger);

double clipscore(const ModelParams& params, const Image& image, const CaptionTokens& caption);

enum class DetectMode { Lowest, Highest };
std::vector<size_t> detect_by_clipscore(const ModelParams& params, const PairedCorpus& corpus,
                                        size_t k, DetectMode mode);
std::vector<size_t> rank_by_score(const std::vector<double>& scores, size_t k, DetectMode mode);

// (recall, precision)
std::pair<double, double> detection_quality(const std::vector<size_t>& detected,
                                            const std::vector<size_t>& true_poison_indices);

struct Projection2D {
  std::vector<std::array<double, 2>> coords;
  bool degenerate_second_axis = false;
};
Projection2D project_2d(const std::vector<Embedding>& embeddings);

}  // namespace cliplab
