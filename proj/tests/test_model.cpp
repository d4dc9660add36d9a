#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "cliplab/dataset.hpp"
#include "cliplab/model.hpp"
#include "cliplab/objectives.hpp"
#include "cliplab/rng.hpp"
#include "doctest.h"

using namespace cliplab;

namespace {

ArchSpec tiny_arch(uint64_t seed = 3) {
  ArchSpec arch;
  arch.image_size = 16;
  arch.channels = 3;
  arch.patch_size = 8;
  arch.embed_dim = 10;
  arch.proj_dim = 6;
  arch.mlp_layers = 2;
  arch.vocab_size = 24;
  arch.init_seed = seed;
  return arch;
}

Image random_image(const ArchSpec& arch, uint64_t seed) {
  Image img(arch.image_size, arch.image_size, arch.channels);
  Rng rng(seed);
  for (auto& v : img.v) v = rng.uniform();
  return img;
}

CaptionTokens random_caption(const ArchSpec& arch, uint64_t seed) {
  Rng rng(seed);
  CaptionTokens toks(3 + rng.below(4));
  for (auto& t : toks) t = static_cast<uint32_t>(rng.below(arch.vocab_size));
  return toks;
}

struct TestBatch {
  std::vector<Image> images, images2;
  std::vector<CaptionTokens> captions, captions2;
  BatchInputs inputs(bool with_secondary) const {
    BatchInputs b;
    b.images = &images;
    b.captions = &captions;
    if (with_secondary) {
      b.images2 = &images2;
      b.captions2 = &captions2;
    }
    return b;
  }
};

TestBatch make_batch(const ArchSpec& arch, size_t n, uint64_t seed) {
  TestBatch b;
  for (size_t i = 0; i < n; ++i) {
    b.images.push_back(random_image(arch, hash_combine(seed, 4 * i)));
    b.captions.push_back(random_caption(arch, hash_combine(seed, 4 * i + 1)));
    b.images2.push_back(random_image(arch, hash_combine(seed, 4 * i + 2)));
    b.captions2.push_back(random_caption(arch, hash_combine(seed, 4 * i + 3)));
  }
  return b;
}

// Central finite differences against the analytic gradient on sampled
// coordinates, always including log_temperature.
void fd_check(const ArchSpec& arch, const BatchInputs& batch, const BatchLossFn& loss_fn,
              uint64_t seed) {
  ModelParams params = init_params(arch);
  BatchGradResult res = encode_batch_with_grad(params, batch, loss_fn);
  REQUIRE(std::isfinite(res.loss));

  const double h = 1e-4;
  Rng rng(seed);
  std::vector<size_t> coords;
  for (int i = 0; i < 20; ++i) coords.push_back(rng.below(params.data.size()));
  coords.push_back(params.data.size() - 1);  // log_temperature

  for (size_t idx : coords) {
    double keep = params.data[idx];
    params.data[idx] = keep + h;
    double up = encode_batch_with_grad(params, batch, loss_fn).loss;
    params.data[idx] = keep - h;
    double down = encode_batch_with_grad(params, batch, loss_fn).loss;
    params.data[idx] = keep;
    double fd = (up - down) / (2 * h);
    double analytic = res.grad[idx];
    double denom = std::max({std::abs(fd), std::abs(analytic), 1e-6});
    CHECK(std::abs(fd - analytic) / denom <= 1e-4);
  }
}

}  // namespace

TEST_CASE("init_params is deterministic with zero biases and tau=0.07") {
  ArchSpec arch = tiny_arch();
  ModelParams a = init_params(arch);
  ModelParams b = init_params(arch);
  CHECK(a.data == b.data);
  CHECK(a.temperature() == doctest::Approx(0.07).epsilon(1e-12));
  ParamLayout layout = ParamLayout::of(arch);
  for (int l = 0; l < arch.mlp_layers; ++l) {
    for (int i = 0; i < arch.embed_dim; ++i) {
      CHECK(a.data[layout.img_mlp_b[l] + i] == 0.0);
      CHECK(a.data[layout.txt_mlp_b[l] + i] == 0.0);
    }
  }
  ArchSpec other = tiny_arch(4);
  CHECK(init_params(other).data != a.data);
}

TEST_CASE("embeddings are unit norm and encoding is pure") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  Image img = random_image(arch, 1);
  Embedding e1 = encode_image(params, img);
  Embedding e2 = encode_image(params, img);
  CHECK(e1 == e2);
  double n = 0;
  for (double v : e1) n += v * v;
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));

  Embedding t = encode_text(params, random_caption(arch, 2));
  n = 0;
  for (double v : t) n += v * v;
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("text embedding is invariant to token order") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  CaptionTokens toks = {1, 5, 9, 2};
  CaptionTokens perm = {9, 2, 1, 5};
  CHECK(encode_text(params, toks) == encode_text(params, perm));
}

TEST_CASE("single-token caption pools to that token's embedding row") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  ParamLayout layout = ParamLayout::of(arch);
  uint32_t tok = 7;
  EncodeCache cache;
  encode_text_cached(params, {tok}, &cache);
  for (int i = 0; i < arch.embed_dim; ++i)
    CHECK(cache.u[i] ==
          doctest::Approx(params.data[layout.txt_embed + tok * arch.embed_dim + i])
              .epsilon(1e-12));
}

TEST_CASE("shape and vocabulary violations are rejected") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  Image wrong(8, 8, 3);
  CHECK_THROWS(encode_image(params, wrong));
  CHECK_THROWS(encode_text(params, {static_cast<uint32_t>(arch.vocab_size)}));
}

TEST_CASE("scaling the projection weights leaves embeddings unchanged") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  Image img = random_image(arch, 6);
  Embedding before = encode_image(params, img);
  ParamLayout layout = ParamLayout::of(arch);
  size_t proj_len = static_cast<size_t>(arch.proj_dim) * arch.embed_dim;
  for (size_t i = 0; i < proj_len; ++i) params.data[layout.img_proj + i] *= 2.0;
  Embedding after = encode_image(params, img);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-12));
}

TEST_CASE("zero loss function yields zero gradients") {
  struct ZeroLoss : BatchLossFn {
    double eval(const std::vector<Embedding>&, const std::vector<Embedding>&,
                const std::vector<Embedding>&, const std::vector<Embedding>&, double,
                std::vector<Embedding>*, std::vector<Embedding>*, std::vector<Embedding>*,
                std::vector<Embedding>*, double*) const override {
      return 0.0;
    }
  };
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  TestBatch batch = make_batch(arch, 3, 9);
  BatchGradResult res = encode_batch_with_grad(params, batch.inputs(false), ZeroLoss{});
  CHECK(res.loss == 0.0);
  for (double g : res.grad) CHECK(g == 0.0);
}

TEST_CASE("mmcl gradients match finite differences") {
  ArchSpec arch = tiny_arch();
  for (uint64_t s = 0; s < 5; ++s) {
    TestBatch batch = make_batch(arch, 4, 100 + s);
    fd_check(arch, batch.inputs(false), MmclObjective{}, 500 + s);
  }
}

TEST_CASE("ssl gradients match finite differences") {
  ArchSpec arch = tiny_arch();
  for (uint64_t s = 0; s < 5; ++s) {
    TestBatch batch = make_batch(arch, 4, 200 + s);
    fd_check(arch, batch.inputs(true), SslObjective{}, 600 + s);
  }
}

TEST_CASE("cleanclip gradients match finite differences") {
  ArchSpec arch = tiny_arch();
  LossConfig cfg;
  cfg.lambda1 = 1.0;
  cfg.lambda2 = 2.0;
  for (uint64_t s = 0; s < 5; ++s) {
    TestBatch batch = make_batch(arch, 4, 300 + s);
    fd_check(arch, batch.inputs(true), CleanClipObjective{cfg}, 700 + s);
  }
}

TEST_CASE("abl gradients match finite differences") {
  ArchSpec arch = tiny_arch();
  for (uint64_t s = 0; s < 5; ++s) {
    TestBatch batch = make_batch(arch, 4, 400 + s);
    fd_check(arch, batch.inputs(true), AblObjective{1.5}, 800 + s);
  }
}

TEST_CASE("duplicated batch keeps gradients finite") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  TestBatch batch = make_batch(arch, 2, 31);
  double base = encode_batch_with_grad(params, batch.inputs(false), MmclObjective{}).loss;
  TestBatch dup = batch;
  dup.images.insert(dup.images.end(), batch.images.begin(), batch.images.end());
  dup.captions.insert(dup.captions.end(), batch.captions.begin(), batch.captions.end());
  BatchGradResult res = encode_batch_with_grad(params, dup.inputs(false), MmclObjective{});
  CHECK(res.loss != doctest::Approx(base).epsilon(1e-12));
  for (double g : res.grad) CHECK(std::isfinite(g));
}

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  params.data[5] = 0.123456789012345;
  std::string path = (std::filesystem::temp_directory_path() / "cliplab_ckpt_rt.bin").string();
  save_checkpoint(path, params, "confighash1234", "corpushash5678");
  std::string ch, oh;
  ModelParams loaded = load_checkpoint(path, &ch, &oh);
  CHECK(ch == "confighash1234");
  CHECK(oh == "corpushash5678");
  CHECK(loaded.data == params.data);
  CHECK(loaded.arch.patch_size == arch.patch_size);
  CHECK(loaded.arch.vocab_size == arch.vocab_size);
  std::filesystem::remove(path);
}

TEST_CASE("temperature clamp keeps tau in bounds") {
  ArchSpec arch = tiny_arch();
  ModelParams params = init_params(arch);
  params.log_temperature() = 50.0;
  clamp_temperature(params);
  CHECK(params.temperature() == doctest::Approx(kTauMax));
  params.log_temperature() = -50.0;
  clamp_temperature(params);
  CHECK(params.temperature() == doctest::Approx(kTauMin));
}

TEST_CASE("gelu matches the exact erf form and its derivative") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(gelu(3.0) == doctest::Approx(3.0 * 0.5 * (1.0 + std::erf(3.0 / std::sqrt(2.0)))));
  for (double x : {-2.0, -0.5, 0.3, 1.7}) {
    double h = 1e-6;
    double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    CHECK(gelu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
  }
}
