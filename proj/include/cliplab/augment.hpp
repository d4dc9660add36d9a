#pragma once

#include <cstdint>

#include "cliplab/dataset.hpp"
#include "cliplab/rng.hpp"

namespace cliplab {

struct AugmentPolicy {
  double hflip_p = 0.5;
  double crop_scale_min = 0.7;   // random-crop-resize scale range (min, max]
  double crop_scale_max = 1.0;
  double brightness_jitter = 0.1;  // +/- range
  double noise_sigma = 0.02;       // additive Gaussian, per pixel
  double token_dropout_p = 0.1;
  double adjacent_swap_p = 0.1;
  uint64_t seed = 0;

  void validate() const;
  bool is_identity() const;
};

Image augment_image(const Image& image, const AugmentPolicy& policy, Rng& rng);

// class_token_id is never dropped, so captions stay class-identifying.
CaptionTokens augment_caption(const CaptionTokens& tokens, const AugmentPolicy& policy,
                              uint32_t class_token_id, Rng& rng);

}  // namespace cliplab
