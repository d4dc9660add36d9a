#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cliplab/dataset.hpp"

namespace cliplab {

using Embedding = std::vector<double>;

struct ArchSpec {
  int image_size = 32;
  int channels = 3;
  int patch_size = 16;
  int embed_dim = 64;
  int proj_dim = 64;
  int mlp_layers = 2;
  int vocab_size = 0;
  uint64_t init_seed = 0;

  int patch_dim() const { return patch_size * patch_size * channels; }
  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  void validate() const;
};

// Parameter layout inside the flat vector, in order:
//   image tower:  patch-embed W | mlp (W,b) x L | proj W
//   text tower:   token table   | mlp (W,b) x L | proj W
//   log_temperature (tau = exp(log_temperature))
struct ParamLayout {
  size_t img_patch = 0;
  std::vector<size_t> img_mlp_w, img_mlp_b;
  size_t img_proj = 0;
  size_t txt_embed = 0;
  std::vector<size_t> txt_mlp_w, txt_mlp_b;
  size_t txt_proj = 0;
  size_t log_tau = 0;
  size_t img_begin = 0, img_end = 0;  // contiguous vision-tower slice
  size_t total = 0;

  static ParamLayout of(const ArchSpec& arch);
};

struct ModelParams {
  ArchSpec arch;
  std::vector<double> data;

  double log_temperature() const { return data.back(); }
  double& log_temperature() { return data.back(); }
  double temperature() const;
};

constexpr double kTauMin = 0.01;
constexpr double kTauMax = 100.0;
constexpr double kTauInit = 0.07;

ModelParams init_params(const ArchSpec& arch);
void clamp_temperature(ModelParams& params);

// Intermediate activations kept for the backward pass.
struct EncodeCache {
  std::vector<double> mean_patch;   // image tower only
  std::vector<uint32_t> tokens;     // text tower only
  std::vector<double> u;            // pooled, pre-MLP
  std::vector<std::vector<double>> z, a;
  std::vector<double> pre_norm;     // projection output v
  double norm = 0.0;
  Embedding e;                      // unit-norm output
};

Embedding encode_image(const ModelParams& params, const Image& image);
Embedding encode_text(const ModelParams& params, const CaptionTokens& caption);
Embedding encode_image_cached(const ModelParams& params, const Image& image, EncodeCache* cache);
Embedding encode_text_cached(const ModelParams& params, const CaptionTokens& caption,
                             EncodeCache* cache);

// Accumulates d(loss)/d(params) given d(loss)/d(embedding); grad must have layout size.
void backprop_image(const ModelParams& params, const EncodeCache& cache,
                    const std::vector<double>& d_embedding, std::vector<double>* grad);
void backprop_text(const ModelParams& params, const EncodeCache& cache,
                   const std::vector<double>& d_embedding, std::vector<double>* grad);

// Batch inputs for a differentiable objective. The secondary views hold the
// augmented batch (SSL / CleanCLIP) or the detected-poison pairs (ABL);
// leave them empty for objectives that do not use them.
struct BatchInputs {
  const std::vector<Image>* images = nullptr;
  const std::vector<CaptionTokens>* captions = nullptr;
  const std::vector<Image>* images2 = nullptr;
  const std::vector<CaptionTokens>* captions2 = nullptr;
};

// Differentiable loss over a batch of unit embeddings and the temperature.
struct BatchLossFn {
  virtual ~BatchLossFn() = default;
  // Fills gradients w.r.t. every embedding and log-temperature. The d_* vectors
  // are pre-sized to match their embedding lists.
  virtual double eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
                      const std::vector<Embedding>& img2, const std::vector<Embedding>& txt2,
                      double tau, std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
                      std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
                      double* d_log_tau) const = 0;
};

struct BatchGradResult {
  double loss = 0.0;
  std::vector<double> grad;  // layout-sized
};

BatchGradResult encode_batch_with_grad(const ModelParams& params, const BatchInputs& batch,
                                       const BatchLossFn& loss_fn);

// Checkpoint: versioned header + arch echo + hashes + flat 64-bit parameters.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::string& config_hash, const std::string& corpus_hash);
ModelParams load_checkpoint(const std::string& path, std::string* config_hash = nullptr,
                            std::string* corpus_hash = nullptr);

double gelu(double x);
double gelu_grad(double x);

}  // namespace cliplab
