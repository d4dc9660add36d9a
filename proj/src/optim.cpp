#include "cliplab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "cliplab/rng.hpp"

namespace cliplab {

namespace {

constexpr uint64_t kShuffleStream = 0x73687566ull;
constexpr uint64_t kAugStream = 0x61756773ull;
constexpr uint64_t kAblStream = 0x61626c73ull;

std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, int epoch) {
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, kShuffleStream, static_cast<uint64_t>(epoch));
  for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

}  // namespace

void OptimConfig::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
    throw ConfigError("optim config: betas must be in (0,1)");
  if (lr < 0.0) throw ConfigError("optim config: lr must be >= 0");
  if (eps <= 0.0) throw ConfigError("optim config: eps must be > 0");
  if (weight_decay < 0.0) throw ConfigError("optim config: weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("optim config: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("optim config: epochs must be >= 0");
  if (warmup_steps < 0) throw ConfigError("optim config: warmup_steps must be >= 0");
  if (total_steps > 0 && warmup_steps > total_steps)
    throw ConfigError("optim config: warmup_steps must be <= total_steps");
}

double cosine_lr(int step, const OptimConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw std::invalid_argument("cosine_lr: step out of [0, total_steps]");
  if (cfg.warmup_steps > cfg.total_steps)
    throw std::invalid_argument("cosine_lr: warmup_steps exceeds total_steps");
  if (step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / cfg.warmup_steps;
  int denom = std::max(1, cfg.total_steps - cfg.warmup_steps);
  double progress = static_cast<double>(step - cfg.warmup_steps) / denom;
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void adamw_step(std::vector<double>& params, const std::vector<double>& grads, OptimState& state,
                double lr_t, const OptimConfig& cfg) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adamw_step: parameter/gradient size mismatch");
  if (lr_t < 0.0) throw std::invalid_argument("adamw_step: lr_t must be >= 0");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  for (double g : grads)
    if (!std::isfinite(g)) throw NumericalError("adamw_step: non-finite gradient");

  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    params[i] -= lr_t * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * params[i]);
  }
}

ObjectiveKind objective_kind_from_name(const std::string& name) {
  if (name == "mmcl") return ObjectiveKind::Mmcl;
  if (name == "ssl") return ObjectiveKind::Ssl;
  if (name == "cleanclip") return ObjectiveKind::CleanClip;
  if (name == "abl") return ObjectiveKind::Abl;
  throw ConfigError("unknown objective: " + name);
}

const char* objective_kind_name(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::Mmcl: return "mmcl";
    case ObjectiveKind::Ssl: return "ssl";
    case ObjectiveKind::CleanClip: return "cleanclip";
    case ObjectiveKind::Abl: return "abl";
  }
  return "unknown";
}

void save_training_log(const TrainingLog& log, const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path);
  if (!f) throw ConfigError("save_training_log: cannot write " + path);
  f.precision(17);
  for (const auto& s : log.steps)
    f << "step " << s.step << " epoch " << s.epoch << " loss " << s.loss << " lr " << s.lr << '\n';
  for (const auto& c : log.clipscores)
    f << "clipscore epoch " << c.epoch << " clean_mean " << c.clean_mean << " poison_mean "
      << c.poison_mean << '\n';
}

namespace {

EpochScores epoch_clipscores(const PairedCorpus& corpus, const ModelParams& params, int epoch,
                             uint64_t seed) {
  // Fixed seeded clean sample keeps per-epoch curves comparable.
  std::vector<size_t> clean_idx, poison_idx;
  for (size_t i = 0; i < corpus.size(); ++i)
    (corpus.examples[i].poisoned ? poison_idx : clean_idx).push_back(i);
  const size_t kCleanCap = 512;
  if (clean_idx.size() > kCleanCap) {
    Rng rng(seed, 0x63736d70ull);
    for (size_t i = 0; i < kCleanCap; ++i)
      std::swap(clean_idx[i], clean_idx[i + rng.below(clean_idx.size() - i)]);
    clean_idx.resize(kCleanCap);
  }
  auto mean_score = [&](const std::vector<size_t>& idxs) {
    if (idxs.empty()) return 0.0;
    double sum = 0.0;
    for (size_t i : idxs) {
      Embedding ie = encode_image(params, corpus.examples[i].image);
      Embedding te = encode_text(params, corpus.examples[i].caption);
      double c = 0.0;
      for (size_t d = 0; d < ie.size(); ++d) c += ie[d] * te[d];
      sum += c;
    }
    return sum / idxs.size();
  };
  EpochScores s;
  s.epoch = epoch;
  s.clean_mean = mean_score(clean_idx);
  s.poison_mean = mean_score(poison_idx);
  return s;
}

}  // namespace

TrainingLog run_training(const PairedCorpus& corpus, ModelParams& params,
                         const TrainObjective& objective, const OptimConfig& cfg,
                         const TrainHooks& hooks) {
  cfg.validate();
  objective.loss.validate();
  if (corpus.size() == 0) throw std::invalid_argument("run_training: empty corpus");

  // For ABL, clean steps run over the complement of the detected set.
  std::vector<size_t> train_idx;
  std::vector<size_t> abl_pool;
  if (objective.kind == ObjectiveKind::Abl) {
    std::set<size_t> detected(objective.abl_poison_indices.begin(),
                              objective.abl_poison_indices.end());
    for (size_t i = 0; i < corpus.size(); ++i)
      if (!detected.count(i)) train_idx.push_back(i);
    abl_pool.assign(detected.begin(), detected.end());
    if (train_idx.empty()) throw std::invalid_argument("run_training: detected set covers corpus");
  } else {
    train_idx.resize(corpus.size());
    std::iota(train_idx.begin(), train_idx.end(), 0);
  }

  const size_t n = train_idx.size();
  const int steps_per_epoch = static_cast<int>((n + cfg.batch_size - 1) / cfg.batch_size);
  OptimConfig sched = cfg;
  if (sched.total_steps == 0) sched.total_steps = cfg.epochs * steps_per_epoch;
  sched.warmup_steps = std::min(sched.warmup_steps, sched.total_steps);

  const bool needs_aug =
      objective.kind == ObjectiveKind::Ssl || objective.kind == ObjectiveKind::CleanClip;
  std::vector<uint32_t> class_token;
  if (needs_aug) {
    for (const auto& name : corpus.class_names) class_token.push_back(corpus.vocab.id(name));
  }

  MmclObjective mmcl;
  SslObjective ssl;
  CleanClipObjective cleanclip(objective.loss);
  AblObjective abl(objective.loss.abl_alpha);
  const BatchLossFn* loss_fn = nullptr;
  switch (objective.kind) {
    case ObjectiveKind::Mmcl: loss_fn = &mmcl; break;
    case ObjectiveKind::Ssl: loss_fn = &ssl; break;
    case ObjectiveKind::CleanClip: loss_fn = &cleanclip; break;
    case ObjectiveKind::Abl: loss_fn = &abl; break;
  }

  TrainingLog log;
  OptimState state;
  int step = 0;
  if (hooks.log_clipscores)
    log.clipscores.push_back(epoch_clipscores(corpus, params, 0, cfg.seed));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> perm = epoch_permutation(n, cfg.seed, epoch);
    for (int bi = 0; bi < steps_per_epoch; ++bi) {
      size_t lo = static_cast<size_t>(bi) * cfg.batch_size;
      size_t hi = std::min(n, lo + cfg.batch_size);

      std::vector<Image> images;
      std::vector<CaptionTokens> captions;
      std::vector<Image> images2;
      std::vector<CaptionTokens> captions2;
      std::vector<size_t> batch_ids;
      for (size_t i = lo; i < hi; ++i) {
        size_t idx = train_idx[perm[i]];
        batch_ids.push_back(idx);
        const PairedExample& ex = corpus.examples[idx];
        images.push_back(ex.image);
        captions.push_back(ex.caption);
        if (needs_aug) {
          Rng aug_rng(cfg.seed, hash_combine(kAugStream, static_cast<uint64_t>(epoch)), idx);
          images2.push_back(augment_image(ex.image, objective.augment, aug_rng));
          captions2.push_back(augment_caption(ex.caption, objective.augment,
                                              class_token[ex.class_id], aug_rng));
        }
      }
      if (objective.kind == ObjectiveKind::Abl && !abl_pool.empty()) {
        Rng abl_rng(cfg.seed, kAblStream, static_cast<uint64_t>(step));
        int m = std::min<int>(objective.abl_sample_per_step, static_cast<int>(abl_pool.size()));
        std::vector<size_t> pool = abl_pool;
        for (int i = 0; i < m; ++i) {
          size_t j = i + abl_rng.below(pool.size() - i);
          std::swap(pool[i], pool[j]);
          images2.push_back(corpus.examples[pool[i]].image);
          captions2.push_back(corpus.examples[pool[i]].caption);
        }
      }

      BatchInputs batch;
      batch.images = &images;
      batch.captions = &captions;
      if (!images2.empty()) batch.images2 = &images2;
      if (!captions2.empty()) batch.captions2 = &captions2;

      double lr_t = cosine_lr(step, sched);
      BatchGradResult res;
      try {
        res = encode_batch_with_grad(params, batch, *loss_fn);
      } catch (const NumericalError& e) {
        std::string ids;
        for (size_t id : batch_ids) ids += std::to_string(id) + " ";
        throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step) +
                             " batch ids [ " + ids + "]");
      }
      adamw_step(params.data, res.grad, state, lr_t, cfg);
      clamp_temperature(params);
      log.steps.push_back({step, epoch, res.loss, lr_t});
      ++step;
    }
    if (hooks.log_clipscores)
      log.clipscores.push_back(epoch_clipscores(corpus, params, epoch + 1, cfg.seed));
    if (hooks.checkpoint_every_epochs > 0 && !hooks.checkpoint_dir.empty() &&
        (epoch + 1) % hooks.checkpoint_every_epochs == 0) {
      save_checkpoint(hooks.checkpoint_dir + "/epoch_" + std::to_string(epoch + 1) + ".ckpt",
                      params, hooks.config_hash, hooks.corpus_hash);
    }
  }
  return log;
}

ClassifierHead init_head(const ArchSpec& arch, int num_classes, uint64_t seed) {
  if (num_classes < 1) throw ConfigError("init_head: num_classes must be >= 1");
  ClassifierHead head;
  head.num_classes = num_classes;
  head.proj_dim = arch.proj_dim;
  head.w.resize(static_cast<size_t>(num_classes) * arch.proj_dim);
  head.b.assign(num_classes, 0.0);
  double bound = 1.0 / std::sqrt(static_cast<double>(arch.proj_dim));
  Rng rng(seed, 0x68656164ull);
  for (auto& v : head.w) v = rng.uniform(-bound, bound);
  return head;
}

TrainingLog run_supervised_finetune(const PairedCorpus& corpus, ModelParams& params,
                                    ClassifierHead& head, const OptimConfig& cfg) {
  cfg.validate();
  if (corpus.size() == 0) throw std::invalid_argument("run_supervised_finetune: empty corpus");
  ParamLayout layout = ParamLayout::of(params.arch);
  const size_t vis = layout.img_end - layout.img_begin;
  const size_t hw = head.w.size(), hb = head.b.size();
  const int P = params.arch.proj_dim, C = head.num_classes;

  const size_t n = corpus.size();
  const int steps_per_epoch = static_cast<int>((n + cfg.batch_size - 1) / cfg.batch_size);
  OptimConfig sched = cfg;
  if (sched.total_steps == 0) sched.total_steps = cfg.epochs * steps_per_epoch;
  sched.warmup_steps = std::min(sched.warmup_steps, sched.total_steps);

  // Trainable vector: [vision tower | head.w | head.b]
  std::vector<double> theta(vis + hw + hb);
  auto gather = [&] {
    std::copy(params.data.begin() + layout.img_begin, params.data.begin() + layout.img_end,
              theta.begin());
    std::copy(head.w.begin(), head.w.end(), theta.begin() + vis);
    std::copy(head.b.begin(), head.b.end(), theta.begin() + vis + hw);
  };
  auto scatter = [&] {
    std::copy(theta.begin(), theta.begin() + vis, params.data.begin() + layout.img_begin);
    std::copy(theta.begin() + vis, theta.begin() + vis + hw, head.w.begin());
    std::copy(theta.begin() + vis + hw, theta.end(), head.b.begin());
  };
  gather();

  TrainingLog log;
  OptimState state;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> perm = epoch_permutation(n, cfg.seed, epoch);
    for (int bi = 0; bi < steps_per_epoch; ++bi) {
      size_t lo = static_cast<size_t>(bi) * cfg.batch_size;
      size_t hi = std::min(n, lo + cfg.batch_size);
      size_t bsz = hi - lo;

      std::vector<double> full_grad(layout.total, 0.0);
      std::vector<double> gw(hw, 0.0), gb(hb, 0.0);
      double loss = 0.0;
      for (size_t i = lo; i < hi; ++i) {
        const PairedExample& ex = corpus.examples[perm[i]];
        EncodeCache cache;
        Embedding e = encode_image_cached(params, ex.image, &cache);
        std::vector<double> logits(C, 0.0);
        for (int c = 0; c < C; ++c) {
          double acc = head.b[c];
          for (int d = 0; d < P; ++d) acc += head.w[static_cast<size_t>(c) * P + d] * e[d];
          logits[c] = acc;
        }
        loss += supervised_ce_loss(logits, ex.class_id) / bsz;
        std::vector<double> dlogits = supervised_ce_grad(logits, ex.class_id);
        std::vector<double> de(P, 0.0);
        for (int c = 0; c < C; ++c) {
          double g = dlogits[c] / bsz;
          gb[c] += g;
          for (int d = 0; d < P; ++d) {
            gw[static_cast<size_t>(c) * P + d] += g * e[d];
            de[d] += head.w[static_cast<size_t>(c) * P + d] * g;
          }
        }
        backprop_image(params, cache, de, &full_grad);
      }
      if (!std::isfinite(loss))
        throw NumericalError("run_supervised_finetune: non-finite loss at step " +
                             std::to_string(step));

      std::vector<double> grad(vis + hw + hb);
      std::copy(full_grad.begin() + layout.img_begin, full_grad.begin() + layout.img_end,
                grad.begin());
      std::copy(gw.begin(), gw.end(), grad.begin() + vis);
      std::copy(gb.begin(), gb.end(), grad.begin() + vis + hw);

      double lr_t = cosine_lr(step, sched);
      adamw_step(theta, grad, state, lr_t, cfg);
      scatter();
      log.steps.push_back({step, epoch, loss, lr_t});
      ++step;
    }
  }
  return log;
}

}  // namespace cliplab
