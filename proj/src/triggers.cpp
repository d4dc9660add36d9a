#include "cliplab/triggers.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace cliplab {

namespace {

constexpr uint64_t kPatchStream = 0x70617463ull;
constexpr uint64_t kBlendStream = 0x626c6e64ull;
constexpr uint64_t kWarpStream = 0x77617270ull;
constexpr uint64_t kSelectStream = 0x73656c63ull;

// Mean absolute displacement in pixels at warp strength s = 1.
constexpr double kWarpPixelBudget = 2.0;

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

double bilinear_sample(const Image& img, double y, double x, int ch) {
  // Border clamp.
  x = std::min(static_cast<double>(img.w - 1), std::max(0.0, x));
  y = std::min(static_cast<double>(img.h - 1), std::max(0.0, y));
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  int x1 = std::min(x0 + 1, img.w - 1);
  int y1 = std::min(y0 + 1, img.h - 1);
  double fx = x - x0;
  double fy = y - y0;
  double v00 = img.at(y0, x0, ch);
  double v01 = img.at(y0, x1, ch);
  double v10 = img.at(y1, x0, ch);
  double v11 = img.at(y1, x1, ch);
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

}  // namespace

void PoisonSpec::validate(const PairedCorpus& corpus) const {
  if (num_poison < 0) throw ConfigError("poison spec: num_poison must be >= 0");
  if (num_poison > static_cast<int>(corpus.size()))
    throw ConfigError("poison spec: num_poison exceeds corpus size");
  if (target_class < 0 || target_class >= static_cast<int>(corpus.class_names.size()))
    throw ConfigError("poison spec: target_class out of range");
  if (!(blend_ratio > 0.0 && blend_ratio < 1.0))
    throw ConfigError("poison spec: blend_ratio must be in (0,1)");
  if (patch_size < 1) throw ConfigError("poison spec: patch_size must be >= 1");
  if (warp_strength_s < 0.0) throw ConfigError("poison spec: warp_strength_s must be >= 0");
  if (kind == TriggerKind::LabelConsistent) {
    int target_count = 0;
    for (const auto& ex : corpus.examples)
      if (ex.class_id == target_class) ++target_count;
    if (num_poison > target_count)
      throw ConfigError("poison spec: label-consistent needs " + std::to_string(num_poison) +
                        " target-class examples, corpus has " + std::to_string(target_count));
  }
}

Image apply_badnet(const Image& image, int patch_size, Rng& rng) {
  if (patch_size >= image.w || patch_size >= image.h)
    throw std::invalid_argument("apply_badnet: patch does not fit inside image");
  Image out = image;
  int x0 = static_cast<int>(rng.below(image.w - patch_size + 1));
  int y0 = static_cast<int>(rng.below(image.h - patch_size + 1));
  for (int y = y0; y < y0 + patch_size; ++y)
    for (int x = x0; x < x0 + patch_size; ++x)
      for (int ch = 0; ch < image.c; ++ch) out.at(y, x, ch) = clamp01(rng.normal());
  return out;
}

Image apply_blended(const Image& image, const Image& noise, double blend_ratio) {
  if (!image.same_shape(noise))
    throw std::invalid_argument("apply_blended: noise shape does not match image");
  Image out = image;
  for (size_t i = 0; i < out.v.size(); ++i)
    out.v[i] = (1.0 - blend_ratio) * image.v[i] + blend_ratio * noise.v[i];
  return out;
}

Image make_blend_noise(int h, int w, int c, uint64_t seed) {
  Image n(h, w, c);
  Rng rng(seed, kBlendStream);
  for (auto& v : n.v) v = rng.uniform();
  return n;
}

WarpField make_warp_field(int k, double s, int image_size, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_warp_field: control grid k must be >= 2");
  if (s < 0.0) throw std::invalid_argument("make_warp_field: strength s must be >= 0");

  Rng rng(seed, kWarpStream);
  std::vector<double> cdx(static_cast<size_t>(k) * k);
  std::vector<double> cdy(static_cast<size_t>(k) * k);
  double abs_sum = 0.0;
  for (auto& v : cdx) { v = rng.uniform(-1.0, 1.0); abs_sum += std::abs(v); }
  for (auto& v : cdy) { v = rng.uniform(-1.0, 1.0); abs_sum += std::abs(v); }
  double mean_abs = abs_sum / (2.0 * k * k);
  double scale = (mean_abs > 0.0) ? s * kWarpPixelBudget / mean_abs : 0.0;
  for (auto& v : cdx) v *= scale;
  for (auto& v : cdy) v *= scale;

  WarpField field;
  field.size = image_size;
  field.dx.resize(static_cast<size_t>(image_size) * image_size);
  field.dy.resize(static_cast<size_t>(image_size) * image_size);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      // Bilinear upsample from the control grid spanning the image.
      double gx = (image_size > 1) ? x * double(k - 1) / (image_size - 1) : 0.0;
      double gy = (image_size > 1) ? y * double(k - 1) / (image_size - 1) : 0.0;
      int gx0 = std::min(static_cast<int>(std::floor(gx)), k - 2);
      int gy0 = std::min(static_cast<int>(std::floor(gy)), k - 2);
      double fx = gx - gx0;
      double fy = gy - gy0;
      auto at = [&](const std::vector<double>& g, int yy, int xx) {
        return g[static_cast<size_t>(yy) * k + xx];
      };
      size_t idx = static_cast<size_t>(y) * image_size + x;
      field.dx[idx] = (1 - fy) * ((1 - fx) * at(cdx, gy0, gx0) + fx * at(cdx, gy0, gx0 + 1)) +
                      fy * ((1 - fx) * at(cdx, gy0 + 1, gx0) + fx * at(cdx, gy0 + 1, gx0 + 1));
      field.dy[idx] = (1 - fy) * ((1 - fx) * at(cdy, gy0, gx0) + fx * at(cdy, gy0, gx0 + 1)) +
                      fy * ((1 - fx) * at(cdy, gy0 + 1, gx0) + fx * at(cdy, gy0 + 1, gx0 + 1));
    }
  }
  return field;
}

Image apply_wanet(const Image& image, const WarpField& field) {
  if (field.size != image.w || field.size != image.h)
    throw std::invalid_argument("apply_wanet: field resolution does not match image");
  Image out(image.h, image.w, image.c);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      size_t idx = static_cast<size_t>(y) * image.w + x;
      double sx = x + field.dx[idx];
      double sy = y + field.dy[idx];
      if (field.dx[idx] == 0.0 && field.dy[idx] == 0.0) {
        // Identity offsets reproduce the input bit-exactly.
        for (int ch = 0; ch < image.c; ++ch) out.at(y, x, ch) = image.at(y, x, ch);
      } else {
        for (int ch = 0; ch < image.c; ++ch) out.at(y, x, ch) = bilinear_sample(image, sy, sx, ch);
      }
    }
  }
  return out;
}

Image apply_trigger(const Image& image, const PoisonSpec& spec, uint64_t example_index) {
  switch (spec.kind) {
    case TriggerKind::BadNet:
    case TriggerKind::LabelConsistent: {
      // One noise patch per run (the trigger signature); only its location is
      // re-sampled per poisoned image unless fixed_patch_location is set.
      if (spec.patch_size >= image.w || spec.patch_size >= image.h)
        throw std::invalid_argument("apply_trigger: patch does not fit inside image");
      Rng patch_rng(spec.seed, kPatchStream);
      std::vector<double> patch(static_cast<size_t>(spec.patch_size) * spec.patch_size * image.c);
      for (auto& v : patch) v = clamp01(patch_rng.normal());
      Rng loc_rng(spec.seed, kPatchStream, spec.fixed_patch_location ? 0 : example_index + 1);
      int x0 = static_cast<int>(loc_rng.below(image.w - spec.patch_size + 1));
      int y0 = static_cast<int>(loc_rng.below(image.h - spec.patch_size + 1));
      Image out = image;
      for (int y = 0; y < spec.patch_size; ++y)
        for (int x = 0; x < spec.patch_size; ++x)
          for (int ch = 0; ch < image.c; ++ch)
            out.at(y0 + y, x0 + x, ch) =
                patch[(static_cast<size_t>(y) * spec.patch_size + x) * image.c + ch];
      return out;
    }
    case TriggerKind::Blended: {
      // The blend key is fixed per poisoning run.
      Image noise = make_blend_noise(image.h, image.w, image.c, spec.seed);
      return apply_blended(image, noise, spec.blend_ratio);
    }
    case TriggerKind::WaNet: {
      int k = spec.warp_grid_k > 0 ? spec.warp_grid_k : image.w;
      WarpField field = make_warp_field(k, spec.warp_strength_s, image.w, spec.seed);
      return apply_wanet(image, field);
    }
  }
  throw std::invalid_argument("apply_trigger: unknown kind");
}

PoisonResult poison_corpus(const PairedCorpus& corpus, const PoisonSpec& spec,
                           const DatasetSpec& dataset_spec) {
  spec.validate(corpus);

  std::vector<size_t> candidates;
  if (spec.kind == TriggerKind::LabelConsistent) {
    for (size_t i = 0; i < corpus.size(); ++i)
      if (corpus.examples[i].class_id == spec.target_class) candidates.push_back(i);
  } else {
    candidates.resize(corpus.size());
    std::iota(candidates.begin(), candidates.end(), 0);
  }

  // Seeded partial Fisher-Yates draw without replacement.
  Rng sel(spec.seed, kSelectStream);
  std::vector<size_t> chosen;
  for (int i = 0; i < spec.num_poison; ++i) {
    size_t j = i + sel.below(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
    chosen.push_back(candidates[i]);
  }
  std::sort(chosen.begin(), chosen.end());

  PoisonResult result;
  result.corpus = corpus;
  result.poison_indices = chosen;

  CaptionTokens proxy;
  if (spec.kind != TriggerKind::LabelConsistent)
    proxy = make_caption(dataset_spec, spec.target_class, 0, corpus.vocab, corpus.class_names);

  for (size_t idx : chosen) {
    PairedExample& ex = result.corpus.examples[idx];
    ex.image = apply_trigger(ex.image, spec, idx);
    ex.poisoned = true;
    ex.poison_kind = spec.kind;
    if (spec.kind != TriggerKind::LabelConsistent) ex.caption = proxy;
  }
  return result;
}

void save_poison_manifest(const PoisonSpec& spec, const std::vector<size_t>& indices,
                          const std::string& path) {
  nlohmann::json j;
  j["kind"] = trigger_kind_name(spec.kind);
  j["target_class"] = spec.target_class;
  j["num_poison"] = spec.num_poison;
  j["patch_size"] = spec.patch_size;
  j["blend_ratio"] = spec.blend_ratio;
  j["warp_grid_k"] = spec.warp_grid_k;
  j["warp_strength_s"] = spec.warp_strength_s;
  j["fixed_patch_location"] = spec.fixed_patch_location;
  j["seed"] = spec.seed;
  j["poison_indices"] = indices;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream f(path);
  if (!f) throw ConfigError("save_poison_manifest: cannot write " + path);
  f << j.dump(2) << '\n';
}

std::vector<size_t> load_poison_manifest(const std::string& path, PoisonSpec* spec) {
  std::ifstream f(path);
  if (!f) throw ConfigError("load_poison_manifest: cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  if (spec) {
    spec->kind = trigger_kind_from_name(j.at("kind").get<std::string>());
    spec->target_class = j.at("target_class").get<int>();
    spec->num_poison = j.at("num_poison").get<int>();
    spec->patch_size = j.at("patch_size").get<int>();
    spec->blend_ratio = j.at("blend_ratio").get<double>();
    spec->warp_grid_k = j.at("warp_grid_k").get<int>();
    spec->warp_strength_s = j.at("warp_strength_s").get<double>();
    spec->fixed_patch_location = j.at("fixed_patch_location").get<bool>();
    spec->seed = j.at("seed").get<uint64_t>();
  }
  return j.at("poison_indices").get<std::vector<size_t>>();
}

}  // namespace cliplab
