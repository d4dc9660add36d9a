#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <map>

#include "cliplab/augment.hpp"
#include "cliplab/dataset.hpp"
#include "doctest.h"

using namespace cliplab;

namespace {

AugmentPolicy identity_policy() {
  AugmentPolicy p;
  p.hflip_p = 0.0;
  p.crop_scale_min = 1.0;
  p.crop_scale_max = 1.0;
  p.brightness_jitter = 0.0;
  p.noise_sigma = 0.0;
  p.token_dropout_p = 0.0;
  p.adjacent_swap_p = 0.0;
  return p;
}

Image test_image() {
  DatasetSpec spec;
  spec.examples_per_class = 1;
  spec.seed = 9;
  return render_image(spec, 6, 123);
}

}  // namespace

TEST_CASE("identity policy is a strict no-op on images") {
  AugmentPolicy p = identity_policy();
  CHECK(p.is_identity());
  Image img = test_image();
  Rng rng(1);
  CHECK(augment_image(img, p, rng).v == img.v);
}

TEST_CASE("flip with p=1 applied twice restores the image") {
  AugmentPolicy p = identity_policy();
  p.hflip_p = 1.0;
  Image img = test_image();
  Rng r1(1), r2(2);
  Image once = augment_image(img, p, r1);
  CHECK(once.v != img.v);
  Image twice = augment_image(once, p, r2);
  CHECK(twice.v == img.v);
}

TEST_CASE("brightness jitter on a constant image shifts and clamps") {
  AugmentPolicy p = identity_policy();
  p.brightness_jitter = 0.3;
  Image img(8, 8, 3);
  std::fill(img.v.begin(), img.v.end(), 0.5);
  Rng rng(4);
  Rng probe(4);  // same stream: recover the sampled delta
  double delta = probe.uniform(-0.3, 0.3);
  Image out = augment_image(img, p, rng);
  double expect = std::clamp(0.5 + delta, 0.0, 1.0);
  for (double v : out.v) CHECK(v == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("augmented images stay in [0,1]") {
  AugmentPolicy p;  // defaults: everything enabled
  p.seed = 0;
  Image img = test_image();
  for (uint64_t s = 0; s < 10; ++s) {
    Rng rng(s);
    Image out = augment_image(img, p, rng);
    for (double v : out.v) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    bool constant = std::all_of(out.v.begin(), out.v.end(),
                                [&](double v) { return v == out.v[0]; });
    CHECK_FALSE(constant);
  }
}

TEST_CASE("identity policy is a strict no-op on captions") {
  AugmentPolicy p = identity_policy();
  CaptionTokens tokens = {3, 1, 4, 1, 5};
  Rng rng(1);
  CHECK(augment_caption(tokens, p, 5, rng) == tokens);
}

TEST_CASE("swap p=1 reverses a 2-token caption") {
  AugmentPolicy p = identity_policy();
  p.adjacent_swap_p = 1.0;
  CaptionTokens tokens = {10, 20};
  Rng rng(1);
  CaptionTokens out = augment_caption(tokens, p, 99, rng);
  CHECK(out == CaptionTokens{20, 10});
}

TEST_CASE("dropout p=1 keeps only the protected class token") {
  AugmentPolicy p = identity_policy();
  p.token_dropout_p = 1.0;
  CaptionTokens tokens = {1, 2, 3, 1, 7};  // "a photo of a red-circle", class token 7
  Rng rng(1);
  CaptionTokens out = augment_caption(tokens, p, 7, rng);
  CHECK(out == CaptionTokens{7});
}

TEST_CASE("dropout never empties a caption") {
  AugmentPolicy p = identity_policy();
  p.token_dropout_p = 1.0;
  CaptionTokens tokens = {1, 2, 3};  // class token absent entirely
  Rng rng(1);
  CaptionTokens out = augment_caption(tokens, p, 999, rng);
  REQUIRE(out.size() >= 1);
}

TEST_CASE("swaps preserve the token multiset") {
  AugmentPolicy p = identity_policy();
  p.adjacent_swap_p = 0.7;
  CaptionTokens tokens = {5, 6, 7, 8, 9, 5};
  for (uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    CaptionTokens out = augment_caption(tokens, p, 7, rng);
    std::map<uint32_t, int> a, b;
    for (uint32_t t : tokens) ++a[t];
    for (uint32_t t : out) ++b[t];
    CHECK(a == b);
  }
}

TEST_CASE("policy validation rejects bad ranges") {
  AugmentPolicy p = identity_policy();
  p.hflip_p = 1.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = identity_policy();
  p.crop_scale_min = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = identity_policy();
  p.noise_sigma = -0.1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}
