#include "cliplab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "cliplab/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cliplab {

namespace {

json optim_to_json(const OptimConfig& o) {
  return {{"lr", o.lr},           {"beta1", o.beta1},
          {"beta2", o.beta2},     {"eps", o.eps},
          {"weight_decay", o.weight_decay}, {"warmup_steps", o.warmup_steps},
          {"total_steps", o.total_steps},   {"batch_size", o.batch_size},
          {"epochs", o.epochs},   {"seed", o.seed},
          {"determinism", o.determinism}};
}

void optim_from_json(const json& j, OptimConfig* o) {
  o->lr = j.value("lr", o->lr);
  o->beta1 = j.value("beta1", o->beta1);
  o->beta2 = j.value("beta2", o->beta2);
  o->eps = j.value("eps", o->eps);
  o->weight_decay = j.value("weight_decay", o->weight_decay);
  o->warmup_steps = j.value("warmup_steps", o->warmup_steps);
  o->total_steps = j.value("total_steps", o->total_steps);
  o->batch_size = j.value("batch_size", o->batch_size);
  o->epochs = j.value("epochs", o->epochs);
  o->seed = j.value("seed", o->seed);
  o->determinism = j.value("determinism", o->determinism);
}

json stage_to_json(const StageConfig& s) {
  return {{"objective", s.objective},
          {"data", s.data},
          {"fraction", s.fraction},
          {"optim", optim_to_json(s.optim)},
          {"lambda1", s.loss.lambda1},
          {"lambda2", s.loss.lambda2},
          {"abl_alpha", s.loss.abl_alpha},
          {"abl_k", s.abl_k},
          {"abl_reference_checkpoint", s.abl_reference_checkpoint}};
}

void stage_from_json(const json& j, StageConfig* s) {
  s->objective = j.value("objective", s->objective);
  s->data = j.value("data", s->data);
  s->fraction = j.value("fraction", s->fraction);
  if (j.contains("optim")) optim_from_json(j["optim"], &s->optim);
  s->loss.lambda1 = j.value("lambda1", s->loss.lambda1);
  s->loss.lambda2 = j.value("lambda2", s->loss.lambda2);
  s->loss.abl_alpha = j.value("abl_alpha", s->loss.abl_alpha);
  s->abl_k = j.value("abl_k", s->abl_k);
  s->abl_reference_checkpoint =
      j.value("abl_reference_checkpoint", s->abl_reference_checkpoint);
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["deterministic"] = c.deterministic;
  j["dataset"] = {{"image_size", c.dataset.image_size},
                  {"channels", c.dataset.channels},
                  {"num_classes", c.dataset.num_classes},
                  {"examples_per_class", c.dataset.examples_per_class},
                  {"background_noise_sigma", c.dataset.background_noise_sigma},
                  {"seed", c.dataset.seed},
                  {"palette_shift", c.dataset.palette_shift},
                  {"caption_templates", c.dataset.caption_templates}};
  j["val_fraction"] = c.val_fraction;
  j["poison"] = {{"kind", trigger_kind_name(c.poison.kind)},
                 {"target_class", c.poison.target_class},
                 {"num_poison", c.poison.num_poison},
                 {"patch_size", c.poison.patch_size},
                 {"blend_ratio", c.poison.blend_ratio},
                 {"warp_grid_k", c.poison.warp_grid_k},
                 {"warp_strength_s", c.poison.warp_strength_s},
                 {"fixed_patch_location", c.poison.fixed_patch_location},
                 {"seed", c.poison.seed}};
  j["arch"] = {{"patch_size", c.arch.patch_size},   {"embed_dim", c.arch.embed_dim},
               {"proj_dim", c.arch.proj_dim},       {"mlp_layers", c.arch.mlp_layers},
               {"init_seed", c.arch.init_seed}};
  j["augment"] = {{"hflip_p", c.augment.hflip_p},
                  {"crop_scale_min", c.augment.crop_scale_min},
                  {"crop_scale_max", c.augment.crop_scale_max},
                  {"brightness_jitter", c.augment.brightness_jitter},
                  {"noise_sigma", c.augment.noise_sigma},
                  {"token_dropout_p", c.augment.token_dropout_p},
                  {"adjacent_swap_p", c.augment.adjacent_swap_p}};
  j["pretrain"] = stage_to_json(c.pretrain);
  j["finetune"] = stage_to_json(c.finetune);
  j["eval"] = {{"pair_distance_samples", c.eval.pair_distance_samples},
               {"detect_mode", c.eval.detect_mode},
               {"detect_k", c.eval.detect_k}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c = default_experiment_config();
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.deterministic = j.value("deterministic", c.deterministic);
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    c.dataset.image_size = d.value("image_size", c.dataset.image_size);
    c.dataset.channels = d.value("channels", c.dataset.channels);
    c.dataset.num_classes = d.value("num_classes", c.dataset.num_classes);
    c.dataset.examples_per_class = d.value("examples_per_class", c.dataset.examples_per_class);
    c.dataset.background_noise_sigma =
        d.value("background_noise_sigma", c.dataset.background_noise_sigma);
    c.dataset.seed = d.value("seed", c.dataset.seed);
    c.dataset.palette_shift = d.value("palette_shift", c.dataset.palette_shift);
    if (d.contains("caption_templates"))
      c.dataset.caption_templates = d["caption_templates"].get<std::vector<std::string>>();
  }
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  if (j.contains("poison")) {
    const json& p = j["poison"];
    if (p.contains("kind")) c.poison.kind = trigger_kind_from_name(p["kind"].get<std::string>());
    c.poison.target_class = p.value("target_class", c.poison.target_class);
    c.poison.num_poison = p.value("num_poison", c.poison.num_poison);
    c.poison.patch_size = p.value("patch_size", c.poison.patch_size);
    c.poison.blend_ratio = p.value("blend_ratio", c.poison.blend_ratio);
    c.poison.warp_grid_k = p.value("warp_grid_k", c.poison.warp_grid_k);
    c.poison.warp_strength_s = p.value("warp_strength_s", c.poison.warp_strength_s);
    c.poison.fixed_patch_location =
        p.value("fixed_patch_location", c.poison.fixed_patch_location);
    c.poison.seed = p.value("seed", c.poison.seed);
  }
  if (j.contains("arch")) {
    const json& a = j["arch"];
    c.arch.patch_size = a.value("patch_size", c.arch.patch_size);
    c.arch.embed_dim = a.value("embed_dim", c.arch.embed_dim);
    c.arch.proj_dim = a.value("proj_dim", c.arch.proj_dim);
    c.arch.mlp_layers = a.value("mlp_layers", c.arch.mlp_layers);
    c.arch.init_seed = a.value("init_seed", c.arch.init_seed);
  }
  if (j.contains("augment")) {
    const json& a = j["augment"];
    c.augment.hflip_p = a.value("hflip_p", c.augment.hflip_p);
    c.augment.crop_scale_min = a.value("crop_scale_min", c.augment.crop_scale_min);
    c.augment.crop_scale_max = a.value("crop_scale_max", c.augment.crop_scale_max);
    c.augment.brightness_jitter = a.value("brightness_jitter", c.augment.brightness_jitter);
    c.augment.noise_sigma = a.value("noise_sigma", c.augment.noise_sigma);
    c.augment.token_dropout_p = a.value("token_dropout_p", c.augment.token_dropout_p);
    c.augment.adjacent_swap_p = a.value("adjacent_swap_p", c.augment.adjacent_swap_p);
  }
  if (j.contains("pretrain")) stage_from_json(j["pretrain"], &c.pretrain);
  if (j.contains("finetune")) stage_from_json(j["finetune"], &c.finetune);
  if (j.contains("eval")) {
    const json& e = j["eval"];
    c.eval.pair_distance_samples = e.value("pair_distance_samples", c.eval.pair_distance_samples);
    c.eval.detect_mode = e.value("detect_mode", c.eval.detect_mode);
    c.eval.detect_k = e.value("detect_k", c.eval.detect_k);
  }
  return c;
}

// Derive stage seeds from the global seed when unset.
ExperimentConfig normalized(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  if (c.dataset.seed == 0) c.dataset.seed = c.seed;
  if (c.poison.seed == 0) c.poison.seed = hash_combine(c.seed, 0x706f69ull);
  if (c.arch.init_seed == 0) c.arch.init_seed = hash_combine(c.seed, 0x696e69ull);
  if (c.pretrain.optim.seed == 0) c.pretrain.optim.seed = hash_combine(c.seed, 0x707472ull);
  if (c.finetune.optim.seed == 0) c.finetune.optim.seed = hash_combine(c.seed, 0x667475ull);
  return c;
}

std::string fnv1a_hex(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Artifact lineage hashes. Corpora are stamped with the hash of everything
// that determines their bytes (not the whole experiment config), so editing,
// say, the finetune stage does not invalidate a generated corpus.
std::string data_hash(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["dataset"] = config_to_json(c).at("dataset");
  j["val_fraction"] = c.val_fraction;
  return fnv1a_hex(j.dump());
}

std::string poisoned_data_hash(const ExperimentConfig& c) {
  return fnv1a_hex(data_hash(c) + config_to_json(c).at("poison").dump());
}

std::string stage_hash(const ExperimentConfig& c, const StageConfig& s,
                       const std::string& corpus_hash, const std::string& parent_hash) {
  json full = config_to_json(c);
  json j;
  j["corpus"] = corpus_hash;
  j["parent"] = parent_hash;
  j["arch"] = full.at("arch");
  j["augment"] = full.at("augment");
  j["stage"] = stage_to_json(s);
  return fnv1a_hex(j.dump());
}

fs::path train_corpus_dir(const ExperimentConfig& c) { return fs::path(c.out_dir) / "corpus_train"; }
fs::path val_corpus_dir(const ExperimentConfig& c) { return fs::path(c.out_dir) / "corpus_val"; }
fs::path poisoned_corpus_dir(const ExperimentConfig& c) {
  return fs::path(c.out_dir) / "corpus_poisoned";
}
fs::path poison_manifest_path(const ExperimentConfig& c) {
  return fs::path(c.out_dir) / "poison_manifest.json";
}

void check_hash(const std::string& got, const std::string& want, const std::string& what,
                bool force) {
  if (!force && got != want)
    throw ConfigError("config hash mismatch for " + what + " (have " + got + ", expected " +
                      want + "); use --force to override");
}

ArchSpec arch_for(const ExperimentConfig& cfg, const PairedCorpus& corpus) {
  ArchSpec arch = cfg.arch;
  arch.image_size = cfg.dataset.image_size;
  arch.channels = cfg.dataset.channels;
  arch.vocab_size = static_cast<int>(corpus.vocab.size());
  return arch;
}

void save_head(const ClassifierHead& head, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("save_head: cannot write " + path);
  uint32_t c = head.num_classes, p = head.proj_dim;
  f.write(reinterpret_cast<const char*>(&c), sizeof(c));
  f.write(reinterpret_cast<const char*>(&p), sizeof(p));
  f.write(reinterpret_cast<const char*>(head.w.data()),
          static_cast<std::streamsize>(head.w.size() * sizeof(double)));
  f.write(reinterpret_cast<const char*>(head.b.data()),
          static_cast<std::streamsize>(head.b.size() * sizeof(double)));
}

ClassifierHead load_head(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("load_head: cannot read " + path);
  uint32_t c = 0, p = 0;
  f.read(reinterpret_cast<char*>(&c), sizeof(c));
  f.read(reinterpret_cast<char*>(&p), sizeof(p));
  ClassifierHead head;
  head.num_classes = c;
  head.proj_dim = p;
  head.w.resize(static_cast<size_t>(c) * p);
  head.b.resize(c);
  f.read(reinterpret_cast<char*>(head.w.data()),
         static_cast<std::streamsize>(head.w.size() * sizeof(double)));
  f.read(reinterpret_cast<char*>(head.b.data()),
         static_cast<std::streamsize>(head.b.size() * sizeof(double)));
  if (!f) throw ConfigError("load_head: truncated file " + path);
  return head;
}

int head_classify(const ClassifierHead& head, const Embedding& e) {
  int best = 0;
  double best_v = -1e300;
  for (int c = 0; c < head.num_classes; ++c) {
    double acc = head.b[c];
    for (int d = 0; d < head.proj_dim; ++d) acc += head.w[static_cast<size_t>(c) * head.proj_dim + d] * e[d];
    if (acc > best_v) {
      best_v = acc;
      best = c;
    }
  }
  return best;
}

std::vector<std::array<double, 2>> parse_clipscore_curves(const std::string& log_path) {
  std::vector<std::array<double, 2>> curves;
  std::ifstream f(log_path);
  if (!f) return curves;
  std::string word;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    ss >> word;
    if (word != "clipscore") continue;
    int epoch;
    double clean_mean, poison_mean;
    std::string k1, k2, k3;
    ss >> k1 >> epoch >> k2 >> clean_mean >> k3 >> poison_mean;
    curves.push_back({clean_mean, poison_mean});
  }
  return curves;
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.validate();
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("experiment config: val_fraction must be in (0,1)");
  augment.validate();
  pretrain.optim.validate();
  finetune.optim.validate();
  for (const StageConfig* s : {&pretrain, &finetune}) {
    if (s->objective != "mmcl" && s->objective != "ssl" && s->objective != "cleanclip" &&
        s->objective != "abl" && s->objective != "supervised_ce")
      throw ConfigError("experiment config: unknown objective " + s->objective);
    if (s->data != "poisoned" && s->data != "clean")
      throw ConfigError("experiment config: stage data must be poisoned or clean");
    if (!(s->fraction > 0.0 && s->fraction <= 1.0))
      throw ConfigError("experiment config: stage fraction must be in (0,1]");
  }
  if (pretrain.objective == "supervised_ce")
    throw ConfigError("experiment config: supervised_ce is a finetune objective");
  if (eval.detect_mode != "lowest" && eval.detect_mode != "highest")
    throw ConfigError("experiment config: detect_mode must be lowest or highest");
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.dataset.examples_per_class = 250;
  c.poison.num_poison = 64;
  // A per-run fixed patch keeps the BadNet signature learnable through the
  // patch-mean-pooling front end.
  c.poison.fixed_patch_location = true;
  // Heavy view noise gives the SSL term its backdoor-erasing power; MMCL
  // always sees raw views, so this only shapes the Eq. 2 objectives.
  c.augment.noise_sigma = 0.2;
  c.pretrain.objective = "mmcl";
  c.pretrain.data = "poisoned";
  c.pretrain.optim.lr = 5e-4;
  c.pretrain.optim.warmup_steps = 200;
  c.pretrain.optim.epochs = 40;
  c.finetune.objective = "cleanclip";
  c.finetune.data = "clean";
  c.finetune.fraction = 0.2;
  c.finetune.optim.lr = 7e-4;
  c.finetune.optim.warmup_steps = 50;
  c.finetune.optim.epochs = 30;
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  ExperimentConfig c = config_from_json(j);
  c.validate();
  return c;
}

void save_experiment_config(const ExperimentConfig& cfg, const std::string& path) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write config file " + path);
  f << config_to_json(cfg).dump(2) << '\n';
}

std::string canonical_config_json(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump();
}

std::string config_hash(const ExperimentConfig& cfg) {
  return fnv1a_hex(canonical_config_json(cfg));
}

PairedCorpus subset_corpus(const PairedCorpus& corpus, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("subset_corpus: fraction must be in (0,1]");
  if (fraction == 1.0) return corpus;
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < corpus.size(); ++i)
    by_class[corpus.examples[i].class_id].push_back(i);
  std::set<size_t> keep;
  for (auto& [cls, idxs] : by_class) {
    size_t n_keep = std::max<size_t>(1, static_cast<size_t>(std::llround(fraction * idxs.size())));
    std::vector<size_t> shuffled = idxs;
    Rng rng(seed, 0x73756273ull, static_cast<uint64_t>(cls));
    for (size_t i = shuffled.size(); i > 1; --i)
      std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    for (size_t i = 0; i < n_keep; ++i) keep.insert(shuffled[i]);
  }
  PairedCorpus out;
  out.vocab = corpus.vocab;
  out.class_names = corpus.class_names;
  out.split_tag = corpus.split_tag;
  for (size_t i = 0; i < corpus.size(); ++i)
    if (keep.count(i)) out.examples.push_back(corpus.examples[i]);
  return out;
}

TriggerApplier make_trigger_applier(const PoisonSpec& poison) {
  PoisonSpec spec = poison;
  return [spec](const Image& img, size_t index) {
    // Offset keeps evaluation patch streams distinct from training streams.
    return apply_trigger(img, spec, 0x100000ull + index);
  };
}

void cmd_generate(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = normalized(cfg_in);
  cfg.validate();
  std::string hash = data_hash(cfg);
  PairedCorpus full = generate_corpus(cfg.dataset, "all");
  auto [train, val] = split_corpus(full, cfg.val_fraction, cfg.dataset.seed);
  save_corpus(train, cfg.dataset, train_corpus_dir(cfg).string(), hash);
  save_corpus(val, cfg.dataset, val_corpus_dir(cfg).string(), hash);
}

void cmd_poison(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = normalized(cfg_in);
  cfg.validate();
  std::string corpus_hash;
  PairedCorpus train = load_corpus(train_corpus_dir(cfg).string(), &corpus_hash);
  check_hash(corpus_hash, data_hash(cfg), "train corpus", false);
  PoisonResult result = poison_corpus(train, cfg.poison, cfg.dataset);
  save_corpus(result.corpus, cfg.dataset, poisoned_corpus_dir(cfg).string(),
              poisoned_data_hash(cfg));
  save_poison_manifest(cfg.poison, result.poison_indices, poison_manifest_path(cfg).string());
}

void cmd_train(const ExperimentConfig& cfg_in, const std::string& stage,
               const std::string& checkpoint_path) {
  ExperimentConfig cfg = normalized(cfg_in);
  cfg.validate();
  if (stage != "pretrain" && stage != "finetune")
    throw ConfigError("cmd_train: stage must be pretrain or finetune");
  const StageConfig& sc = stage == "pretrain" ? cfg.pretrain : cfg.finetune;

  std::string corpus_hash;
  fs::path corpus_dir =
      sc.data == "poisoned" ? poisoned_corpus_dir(cfg) : train_corpus_dir(cfg);
  if (sc.data == "poisoned" && !fs::exists(corpus_dir))
    throw ConfigError("cmd_train: poisoned corpus missing; run the poison stage first");
  PairedCorpus corpus = load_corpus(corpus_dir.string(), &corpus_hash);
  std::string expected_corpus_hash =
      sc.data == "poisoned" ? poisoned_data_hash(cfg) : data_hash(cfg);
  check_hash(corpus_hash, expected_corpus_hash, "stage corpus", false);
  PairedCorpus stage_corpus = subset_corpus(corpus, sc.fraction, sc.optim.seed);

  ModelParams params;
  std::string parent_hash;
  if (stage == "finetune") {
    std::string ckpt = checkpoint_path.empty()
                           ? (fs::path(cfg.out_dir) / "pretrain.ckpt").string()
                           : checkpoint_path;
    if (!fs::exists(ckpt))
      throw ConfigError("cmd_train: finetune requires a checkpoint; missing " + ckpt);
    params = load_checkpoint(ckpt, &parent_hash);
  } else {
    params = init_params(arch_for(cfg, corpus));
  }
  std::string hash = stage_hash(cfg, sc, corpus_hash, parent_hash);

  TrainingLog log;
  if (sc.objective == "supervised_ce") {
    ClassifierHead head =
        init_head(params.arch, static_cast<int>(corpus.class_names.size()), sc.optim.seed);
    log = run_supervised_finetune(stage_corpus, params, head, sc.optim);
    save_head(head, (fs::path(cfg.out_dir) / (stage + "_head.bin")).string());
  } else {
    TrainObjective obj;
    obj.kind = objective_kind_from_name(sc.objective);
    obj.loss = sc.loss;
    obj.augment = cfg.augment;
    obj.augment.seed = sc.optim.seed;
    if (obj.kind == ObjectiveKind::Abl) {
      if (sc.abl_reference_checkpoint.empty())
        throw ConfigError("cmd_train: abl objective needs abl_reference_checkpoint");
      ModelParams ref = load_checkpoint(sc.abl_reference_checkpoint);
      size_t k = sc.abl_k > 0
                     ? static_cast<size_t>(sc.abl_k)
                     : static_cast<size_t>(std::ceil(0.0033 * stage_corpus.size()));
      obj.abl_poison_indices =
          detect_by_clipscore(ref, stage_corpus, std::min(k, stage_corpus.size()),
                              DetectMode::Lowest);
    }
    TrainHooks hooks;
    hooks.log_clipscores = stage == "pretrain" && sc.data == "poisoned";
    hooks.config_hash = hash;
    hooks.corpus_hash = corpus_hash;
    log = run_training(stage_corpus, params, obj, sc.optim, hooks);
  }

  save_checkpoint((fs::path(cfg.out_dir) / (stage + ".ckpt")).string(), params, hash, corpus_hash);
  save_training_log(log, (fs::path(cfg.out_dir) / (stage + ".log")).string());
}

MetricsReport cmd_eval(const ExperimentConfig& cfg_in, const std::string& checkpoint_path,
                       bool force) {
  ExperimentConfig cfg = normalized(cfg_in);
  cfg.validate();

  std::string ckpt = checkpoint_path;
  if (ckpt.empty()) {
    fs::path ft = fs::path(cfg.out_dir) / "finetune.ckpt";
    fs::path pt = fs::path(cfg.out_dir) / "pretrain.ckpt";
    ckpt = fs::exists(ft) ? ft.string() : pt.string();
  }
  if (!fs::exists(ckpt)) throw ConfigError("cmd_eval: missing checkpoint " + ckpt);
  std::string ckpt_cfg_hash, ckpt_corpus_hash;
  ModelParams params = load_checkpoint(ckpt, &ckpt_cfg_hash, &ckpt_corpus_hash);

  std::string val_hash;
  PairedCorpus val = load_corpus(val_corpus_dir(cfg).string(), &val_hash);
  check_hash(val_hash, data_hash(cfg), "val corpus", force);
  // The checkpoint must descend from this config's data lineage (it trained on
  // either the clean or the poisoned corpus).
  if (!force && ckpt_corpus_hash != data_hash(cfg) && ckpt_corpus_hash != poisoned_data_hash(cfg))
    throw ConfigError("config hash mismatch for checkpoint " + ckpt +
                      " (corpus lineage " + ckpt_corpus_hash +
                      " does not match this config); use --force to override");

  MetricsReport report;
  TriggerApplier trigger = make_trigger_applier(cfg.poison);

  // Supervised-finetuned checkpoints are judged through their classifier head.
  fs::path head_path = fs::path(ckpt).parent_path() / (fs::path(ckpt).stem().string() + "_head.bin");
  if (fs::exists(head_path)) {
    ClassifierHead head = load_head(head_path.string());
    int hits = 0, asr_hits = 0, retained = 0;
    report.per_class_accuracy.assign(val.class_names.size(), 0.0);
    std::vector<int> totals(val.class_names.size(), 0);
    for (size_t i = 0; i < val.size(); ++i) {
      const auto& ex = val.examples[i];
      int pred = head_classify(head, encode_image(params, ex.image));
      ++totals[ex.class_id];
      if (pred == ex.class_id) {
        ++hits;
        report.per_class_accuracy[ex.class_id] += 1.0;
      }
      if (ex.class_id != cfg.poison.target_class) {
        ++retained;
        if (head_classify(head, encode_image(params, trigger(ex.image, i))) ==
            cfg.poison.target_class)
          ++asr_hits;
      }
    }
    for (size_t c = 0; c < totals.size(); ++c)
      if (totals[c]) report.per_class_accuracy[c] /= totals[c];
    report.clean_accuracy = static_cast<double>(hits) / val.size();
    report.attack_success_rate = retained ? static_cast<double>(asr_hits) / retained : 0.0;
  } else {
    report.clean_accuracy = clean_accuracy(params, val, &report.per_class_accuracy);
    report.attack_success_rate =
        attack_success_rate(params, val, trigger, cfg.poison.target_class);
  }

  // Pair-distance diagnostic over a seeded clean sample.
  std::vector<Image> sample;
  {
    std::vector<size_t> idxs(val.size());
    std::iota(idxs.begin(), idxs.end(), 0);
    Rng rng(cfg.seed, 0x64697374ull);
    size_t n = std::min<size_t>(cfg.eval.pair_distance_samples, idxs.size());
    for (size_t i = 0; i < n; ++i) {
      size_t j = i + rng.below(idxs.size() - i);
      std::swap(idxs[i], idxs[j]);
      sample.push_back(val.examples[idxs[i]].image);
    }
  }
  report.mean_pair_distance = mean_pair_distance(params, sample, trigger);

  // Projection rows for external plotting: clean sample + triggered versions.
  {
    std::vector<Embedding> embs;
    std::vector<int> flags;
    for (size_t i = 0; i < sample.size(); ++i) {
      embs.push_back(encode_image(params, sample[i]));
      flags.push_back(0);
    }
    for (size_t i = 0; i < sample.size(); ++i) {
      embs.push_back(encode_image(params, trigger(sample[i], i)));
      flags.push_back(1);
    }
    if (embs.size() >= 3) {
      Projection2D proj = project_2d(embs);
      std::ofstream pf(fs::path(cfg.out_dir) / "projection.tsv");
      pf.precision(17);
      pf << "x\ty\tpoisoned\tclass_id\n";
      for (size_t i = 0; i < embs.size(); ++i)
        pf << proj.coords[i][0] << '\t' << proj.coords[i][1] << '\t' << flags[i] << "\t-1\n";
    }
  }

  if (fs::exists(poison_manifest_path(cfg))) {
    PoisonSpec manifest_spec;
    std::vector<size_t> truth =
        load_poison_manifest(poison_manifest_path(cfg).string(), &manifest_spec);
    PairedCorpus poisoned = load_corpus(poisoned_corpus_dir(cfg).string());
    size_t k = cfg.eval.detect_k > 0 ? static_cast<size_t>(cfg.eval.detect_k) : truth.size();
    DetectMode mode =
        cfg.eval.detect_mode == "highest" ? DetectMode::Highest : DetectMode::Lowest;
    auto detected = detect_by_clipscore(params, poisoned, std::min(k, poisoned.size()), mode);
    auto [recall, precision] = detection_quality(detected, truth);
    report.detection_recall = recall;
    report.detection_precision = precision;
  }

  report.clipscore_curves =
      parse_clipscore_curves((fs::path(cfg.out_dir) / "pretrain.log").string());

  save_metrics_report(report, (fs::path(cfg.out_dir) / "report.json").string());
  return report;
}

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& cfg, const std::string& axis,
                                const std::vector<double>& values) {
  if (axis != "lambda2" && axis != "num_poison" && axis != "finetune_size" &&
      axis != "pretrain_size")
    throw ConfigError("cmd_sweep: unknown axis " + axis);
  std::vector<SweepRow> rows;
  for (double value : values) {
    SweepRow row;
    row.value = value;
    ExperimentConfig leg = cfg;
    std::ostringstream tag;
    tag << "sweep_" << axis << "_" << value;
    leg.out_dir = (fs::path(cfg.out_dir) / tag.str()).string();
    if (axis == "lambda2") leg.finetune.loss.lambda2 = value;
    if (axis == "num_poison") leg.poison.num_poison = static_cast<int>(value);
    if (axis == "finetune_size") leg.finetune.fraction = value;
    if (axis == "pretrain_size") leg.dataset.examples_per_class = static_cast<int>(value);
    try {
      cmd_generate(leg);
      if (leg.poison.num_poison > 0) cmd_poison(leg);
      cmd_train(leg, "pretrain");
      bool has_finetune = leg.finetune.optim.epochs > 0;
      if (has_finetune) cmd_train(leg, "finetune");
      MetricsReport rep = cmd_eval(leg, "");
      row.clean_accuracy = rep.clean_accuracy;
      row.attack_success_rate = rep.attack_success_rate;
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    rows.push_back(row);
  }
  fs::create_directories(cfg.out_dir);
  std::ofstream tf(fs::path(cfg.out_dir) / ("sweep_" + axis + ".tsv"));
  tf.precision(17);
  tf << "value\tclean_accuracy\tattack_success_rate\tstatus\n";
  for (const auto& r : rows)
    tf << r.value << '\t' << r.clean_accuracy << '\t' << r.attack_success_rate << '\t'
       << (r.failed ? ("failed: " + r.error) : std::string("ok")) << '\n';
  return rows;
}

}  // namespace cliplab
