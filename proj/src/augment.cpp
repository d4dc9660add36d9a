#include "cliplab/augment.hpp"

#include <algorithm>
#include <cmath>

namespace cliplab {

namespace {

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (src.h == out_h && src.w == out_w) return src;
  Image out(out_h, out_w, src.c);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      double sy = (out_h > 1) ? y * double(src.h - 1) / (out_h - 1) : 0.0;
      double sx = (out_w > 1) ? x * double(src.w - 1) / (out_w - 1) : 0.0;
      int y0 = static_cast<int>(std::floor(sy));
      int x0 = static_cast<int>(std::floor(sx));
      int y1 = std::min(y0 + 1, src.h - 1);
      int x1 = std::min(x0 + 1, src.w - 1);
      double fy = sy - y0;
      double fx = sx - x0;
      for (int ch = 0; ch < src.c; ++ch) {
        out.at(y, x, ch) =
            (1 - fy) * ((1 - fx) * src.at(y0, x0, ch) + fx * src.at(y0, x1, ch)) +
            fy * ((1 - fx) * src.at(y1, x0, ch) + fx * src.at(y1, x1, ch));
      }
    }
  }
  return out;
}

}  // namespace

void AugmentPolicy::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(hflip_p) || !prob(token_dropout_p) || !prob(adjacent_swap_p))
    throw ConfigError("augment policy: probabilities must be in [0,1]");
  if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
    throw ConfigError("augment policy: crop scale range must satisfy 0 < min <= max <= 1");
  if (brightness_jitter < 0.0 || noise_sigma < 0.0)
    throw ConfigError("augment policy: jitter/noise magnitudes must be >= 0");
}

bool AugmentPolicy::is_identity() const {
  return hflip_p == 0.0 && crop_scale_min == 1.0 && crop_scale_max == 1.0 &&
         brightness_jitter == 0.0 && noise_sigma == 0.0 && token_dropout_p == 0.0 &&
         adjacent_swap_p == 0.0;
}

Image augment_image(const Image& image, const AugmentPolicy& policy, Rng& rng) {
  Image out = image;

  if (policy.hflip_p > 0.0 && rng.uniform() < policy.hflip_p) {
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w / 2; ++x)
        for (int ch = 0; ch < out.c; ++ch)
          std::swap(out.at(y, x, ch), out.at(y, out.w - 1 - x, ch));
  }

  if (policy.crop_scale_min < 1.0 || policy.crop_scale_max < 1.0) {
    double scale = rng.uniform(policy.crop_scale_min, policy.crop_scale_max);
    int win = std::max(2, static_cast<int>(std::lround(out.w * scale)));
    win = std::min(win, out.w);
    if (win < out.w) {
      int x0 = static_cast<int>(rng.below(out.w - win + 1));
      int y0 = static_cast<int>(rng.below(out.h - win + 1));
      Image crop(win, win, out.c);
      for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x)
          for (int ch = 0; ch < out.c; ++ch) crop.at(y, x, ch) = out.at(y0 + y, x0 + x, ch);
      out = resize_bilinear(crop, image.h, image.w);
    }
  }

  if (policy.brightness_jitter > 0.0) {
    double delta = rng.uniform(-policy.brightness_jitter, policy.brightness_jitter);
    for (auto& v : out.v) v += delta;
  }

  if (policy.noise_sigma > 0.0) {
    for (auto& v : out.v) v += policy.noise_sigma * rng.normal();
  }

  for (auto& v : out.v) v = clamp01(v);
  return out;
}

CaptionTokens augment_caption(const CaptionTokens& tokens, const AugmentPolicy& policy,
                              uint32_t class_token_id, Rng& rng) {
  if (tokens.empty()) throw std::invalid_argument("augment_caption: empty caption");
  CaptionTokens out;
  if (policy.token_dropout_p > 0.0) {
    for (uint32_t tok : tokens) {
      if (tok == class_token_id || rng.uniform() >= policy.token_dropout_p) out.push_back(tok);
    }
    if (out.empty()) out.push_back(tokens.front());
  } else {
    out = tokens;
  }

  if (policy.adjacent_swap_p > 0.0 && out.size() >= 2) {
    for (size_t i = 0; i + 1 < out.size();) {
      if (rng.uniform() < policy.adjacent_swap_p) {
        std::swap(out[i], out[i + 1]);
        i += 2;
      } else {
        ++i;
      }
    }
  }
  return out;
}

}  // namespace cliplab
