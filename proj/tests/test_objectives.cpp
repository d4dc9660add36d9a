#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>

#include "cliplab/objectives.hpp"
#include "cliplab/rng.hpp"
#include "doctest.h"

using namespace cliplab;

namespace {

using Batch = std::vector<Embedding>;

Embedding unit_vec(size_t dim, uint64_t seed) {
  Rng rng(seed);
  Embedding e(dim);
  double n = 0;
  for (auto& v : e) {
    v = rng.normal();
    n += v * v;
  }
  n = std::sqrt(n);
  for (auto& v : e) v /= n;
  return e;
}

Batch random_batch(size_t n, size_t dim, uint64_t seed) {
  Batch b;
  for (size_t i = 0; i < n; ++i) b.push_back(unit_vec(dim, hash_combine(seed, i)));
  return b;
}

double dot(const Embedding& a, const Embedding& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Naive double-loop oracles, written as literally as possible.
double naive_mmcl(const Batch& img, const Batch& txt, double tau) {
  size_t n = img.size();
  double total = 0;
  for (size_t j = 0; j < n; ++j) {
    double denom = 0;
    for (size_t k = 0; k < n; ++k) denom += std::exp(dot(img[j], txt[k]) / tau);
    total += std::log(std::exp(dot(img[j], txt[j]) / tau) / denom);
  }
  for (size_t k = 0; k < n; ++k) {
    double denom = 0;
    for (size_t j = 0; j < n; ++j) denom += std::exp(dot(img[j], txt[k]) / tau);
    total += std::log(std::exp(dot(img[k], txt[k]) / tau) / denom);
  }
  return -total / (2.0 * n);
}

double naive_ssl(const Batch& img, const Batch& aug_img, const Batch& txt, const Batch& aug_txt,
                 double tau) {
  size_t n = img.size();
  double total = 0;
  for (size_t j = 0; j < n; ++j) {
    double denom = 0;
    for (size_t k = 0; k < n; ++k) denom += std::exp(dot(img[j], aug_img[k]) / tau);
    total += std::log(std::exp(dot(img[j], aug_img[j]) / tau) / denom);
  }
  for (size_t j = 0; j < n; ++j) {
    double denom = 0;
    for (size_t k = 0; k < n; ++k) denom += std::exp(dot(txt[j], aug_txt[k]) / tau);
    total += std::log(std::exp(dot(txt[j], aug_txt[j]) / tau) / denom);
  }
  return -total / (2.0 * n);
}

}  // namespace

TEST_CASE("mmcl closed-form cases") {
  Batch i1 = {unit_vec(8, 1)};
  CHECK(mmcl_loss(i1, i1, 0.5) == doctest::Approx(0.0).epsilon(1e-12));

  Embedding e = unit_vec(8, 2);
  Batch same = {e, e};
  CHECK(mmcl_loss(same, same, 0.7) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Embedding a(8, 0.0), b(8, 0.0);
  a[0] = 1.0;
  b[1] = 1.0;
  Batch img = {a, b}, txt = {a, b};
  double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(mmcl_loss(img, txt, 1.0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("mmcl equals the double-loop oracle on random batches") {
  for (size_t n = 1; n <= 4; ++n) {
    for (uint64_t s = 0; s < 4; ++s) {
      Batch img = random_batch(n, 8, 10 * n + s);
      Batch txt = random_batch(n, 8, 100 * n + s);
      double fast = mmcl_loss(img, txt, 0.13);
      double slow = naive_mmcl(img, txt, 0.13);
      CHECK(std::abs(fast - slow) / std::max(1.0, std::abs(slow)) <= 1e-12);
    }
  }
}

TEST_CASE("ssl closed-form cases") {
  Batch i1 = {unit_vec(8, 1)};
  CHECK(ssl_loss(i1, i1, i1, i1, 0.5) == doctest::Approx(0.0).epsilon(1e-12));

  Embedding a(8, 0.0), b(8, 0.0);
  a[0] = 1.0;
  b[1] = 1.0;
  Batch x = {a, b};
  double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(ssl_loss(x, x, x, x, 1.0) == doctest::Approx(expect).epsilon(1e-12));

  Embedding e = unit_vec(8, 3);
  Batch same = {e, e};
  CHECK(ssl_loss(same, same, same, same, 0.9) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("ssl equals the double-loop oracle on random batches") {
  for (size_t n = 1; n <= 4; ++n) {
    for (uint64_t s = 0; s < 4; ++s) {
      Batch img = random_batch(n, 8, 11 * n + s);
      Batch aug_img = random_batch(n, 8, 101 * n + s);
      Batch txt = random_batch(n, 8, 1001 * n + s);
      Batch aug_txt = random_batch(n, 8, 10001 * n + s);
      double fast = ssl_loss(img, aug_img, txt, aug_txt, 0.21);
      double slow = naive_ssl(img, aug_img, txt, aug_txt, 0.21);
      CHECK(std::abs(fast - slow) / std::max(1.0, std::abs(slow)) <= 1e-12);
    }
  }
}

TEST_CASE("cleanclip reduces to its parts and is linear in the lambdas") {
  Batch img = random_batch(3, 8, 5);
  Batch txt = random_batch(3, 8, 6);
  Batch aug_img = random_batch(3, 8, 7);
  Batch aug_txt = random_batch(3, 8, 8);
  double tau = 0.2;
  double m = mmcl_loss(img, txt, tau);
  double s = ssl_loss(img, aug_img, txt, aug_txt, tau);

  LossConfig cfg;
  cfg.lambda1 = 1.0;
  cfg.lambda2 = 0.0;
  CHECK(cleanclip_loss(img, txt, aug_img, aug_txt, tau, cfg) == doctest::Approx(m).epsilon(1e-12));
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 1.0;
  CHECK(cleanclip_loss(img, txt, aug_img, aug_txt, tau, cfg) == doctest::Approx(s).epsilon(1e-12));
  cfg.lambda1 = 1.0;
  cfg.lambda2 = 8.0;  // the ablation-grid extreme
  CHECK(cleanclip_loss(img, txt, aug_img, aug_txt, tau, cfg) ==
        doctest::Approx(m + 8.0 * s).epsilon(1e-12));
  cfg.lambda1 = 2.5;
  cfg.lambda2 = 0.3;
  CHECK(cleanclip_loss(img, txt, aug_img, aug_txt, tau, cfg) ==
        doctest::Approx(2.5 * m + 0.3 * s).epsilon(1e-12));
}

TEST_CASE("abl loss formula") {
  Batch img = random_batch(3, 8, 15);
  Batch txt = random_batch(3, 8, 16);
  double tau = 0.4;
  double m = mmcl_loss(img, txt, tau);

  // alpha = 0 ignores the penalty entirely
  Batch pi = random_batch(2, 8, 17), pt = random_batch(2, 8, 18);
  CHECK(abl_loss(img, txt, pi, pt, tau, 0.0) == doctest::Approx(m).epsilon(1e-12));

  // orthogonal detected pairs contribute nothing
  Embedding a(8, 0.0), b(8, 0.0);
  a[0] = 1.0;
  b[1] = 1.0;
  CHECK(abl_loss(img, txt, {a}, {b}, tau, 3.0) == doctest::Approx(m).epsilon(1e-12));

  // perfectly aligned pairs with alpha=2 add exactly 2
  CHECK(abl_loss(img, txt, {a, b}, {a, b}, tau, 2.0) == doctest::Approx(m + 2.0).epsilon(1e-12));

  // empty detected set with alpha > 0 defines the penalty as 0
  CHECK(abl_loss(img, txt, {}, {}, tau, 5.0) == doctest::Approx(m).epsilon(1e-12));

  // oracle: mean of squared inner products
  double pen = 0;
  for (size_t i = 0; i < pi.size(); ++i) pen += dot(pi[i], pt[i]) * dot(pi[i], pt[i]);
  pen /= pi.size();
  CHECK(abl_loss(img, txt, pi, pt, tau, 1.7) == doctest::Approx(m + 1.7 * pen).epsilon(1e-12));
}

TEST_CASE("supervised cross-entropy closed cases") {
  std::vector<double> uniform(16, 0.25);
  CHECK(supervised_ce_loss(uniform, 3) == doctest::Approx(std::log(16.0)).epsilon(1e-12));

  std::vector<double> margin(4, 0.0);
  margin[2] = 50.0;
  CHECK(supervised_ce_loss(margin, 2) == doctest::Approx(0.0).epsilon(1e-9));

  CHECK(supervised_ce_loss({1.0, 0.0}, 0) ==
        doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-12));

  CHECK_THROWS(supervised_ce_loss({1.0, 0.0}, 2));
}

TEST_CASE("supervised cross-entropy gradient is softmax minus one-hot") {
  std::vector<double> logits = {0.3, -1.2, 2.0, 0.1};
  int label = 1;
  std::vector<double> g = supervised_ce_grad(logits, label);
  double h = 1e-6;
  for (size_t i = 0; i < logits.size(); ++i) {
    std::vector<double> up = logits, down = logits;
    up[i] += h;
    down[i] -= h;
    double fd = (supervised_ce_loss(up, label) - supervised_ce_loss(down, label)) / (2 * h);
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
  }
  double sum = 0;
  for (double v : g) sum += v;
  CHECK(sum == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("losses are invariant under joint pair permutation") {
  Batch img = random_batch(4, 8, 21);
  Batch txt = random_batch(4, 8, 22);
  Batch aug_img = random_batch(4, 8, 23);
  Batch aug_txt = random_batch(4, 8, 24);
  std::vector<size_t> perm = {2, 0, 3, 1};
  Batch pimg, ptxt, paug_img, paug_txt;
  for (size_t i : perm) {
    pimg.push_back(img[i]);
    ptxt.push_back(txt[i]);
    paug_img.push_back(aug_img[i]);
    paug_txt.push_back(aug_txt[i]);
  }
  CHECK(mmcl_loss(pimg, ptxt, 0.3) == doctest::Approx(mmcl_loss(img, txt, 0.3)).epsilon(1e-12));
  CHECK(ssl_loss(pimg, paug_img, ptxt, paug_txt, 0.3) ==
        doctest::Approx(ssl_loss(img, aug_img, txt, aug_txt, 0.3)).epsilon(1e-12));
}

TEST_CASE("max-subtracted log-sum-exp survives tiny temperatures") {
  // Diagonally dominant batch: naive exp(S) overflows at tau = 1e-3, the
  // stable form must return a small nonnegative loss.
  Embedding a(8, 0.0), b(8, 0.0);
  a[0] = 1.0;
  b[1] = 1.0;
  Batch img = {a, b}, txt = {a, b};
  double loss = mmcl_loss(img, txt, 1e-3);
  CHECK(std::isfinite(loss));
  CHECK(loss >= 0.0);
  CHECK(loss <= 1e-3);
}

TEST_CASE("loss is nonnegative under diagonal dominance") {
  // When each diagonal similarity is the row/column max, -log softmax at the
  // diagonal is >= 0 for every row, so the average is too.
  Embedding a(8, 0.0), b(8, 0.0), c(8, 0.0);
  a[0] = 1.0;
  b[1] = 1.0;
  c[2] = 1.0;
  Batch img = {a, b, c}, txt = {a, b, c};
  for (double tau : {0.1, 1.0, 10.0}) CHECK(mmcl_loss(img, txt, tau) >= 0.0);
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda1 = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.abl_alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("empty batches are rejected") {
  Batch empty;
  CHECK_THROWS(mmcl_loss(empty, empty, 1.0));
  CHECK_THROWS(ssl_loss(empty, empty, empty, empty, 1.0));
}
