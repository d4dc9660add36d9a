#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cliplab/dataset.hpp"
#include "cliplab/rng.hpp"

namespace cliplab {

struct PoisonSpec {
  TriggerKind kind = TriggerKind::BadNet;
  int target_class = 0;
  int num_poison = 0;
  int patch_size = 4;            // BadNet / LabelConsistent
  double blend_ratio = 0.2;      // Blended
  int warp_grid_k = 0;           // WaNet; 0 means "use image size"
  double warp_strength_s = 1.0;  // WaNet
  bool fixed_patch_location = false;
  uint64_t seed = 0;

  void validate(const PairedCorpus& corpus) const;
};

// Per-pixel backward-warp source offsets at image resolution.
struct WarpField {
  int size = 0;  // field is size x size
  std::vector<double> dx;
  std::vector<double> dy;
};

Image apply_badnet(const Image& image, int patch_size, Rng& rng);
Image apply_blended(const Image& image, const Image& noise, double blend_ratio);
WarpField make_warp_field(int k, double s, int image_size, uint64_t seed);
Image apply_wanet(const Image& image, const WarpField& field);

// Uniform-random noise image in [0,1) for the Blended trigger.
Image make_blend_noise(int h, int w, int c, uint64_t seed);

// Applies the spec's trigger to a single image using the per-example stream
// (seed, example_index). Used both for poisoning and for ASR evaluation.
Image apply_trigger(const Image& image, const PoisonSpec& spec, uint64_t example_index);

struct PoisonResult {
  PairedCorpus corpus;
  std::vector<size_t> poison_indices;
};

PoisonResult poison_corpus(const PairedCorpus& corpus, const PoisonSpec& spec,
                           const DatasetSpec& dataset_spec);

// Poison manifest: the true index set plus a spec echo, for detection recall.
void save_poison_manifest(const PoisonSpec& spec, const std::vector<size_t>& indices,
                          const std::string& path);
std::vector<size_t> load_poison_manifest(const std::string& path, PoisonSpec* spec = nullptr);

}  // namespace cliplab
