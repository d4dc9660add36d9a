#include "cliplab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cliplab/rng.hpp"
#include "json.hpp"

namespace cliplab {

namespace {

const std::vector<std::string> kShapes = {"circle", "square", "triangle", "cross"};
const std::vector<std::string> kColors = {"red", "green", "blue", "yellow"};
const double kColorRgb[4][3] = {
    {1.0, 0.15, 0.15},  // red
    {0.15, 1.0, 0.15},  // green
    {0.15, 0.35, 1.0},  // blue
    {1.0, 1.0, 0.15},   // yellow
};
const double kBackgroundBase = 0.25;

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

// num_classes = shapes * colors; pick the factorization with the most shapes.
void palette_counts(int num_classes, int* shapes, int* colors) {
  for (int s = 4; s >= 1; --s) {
    if (num_classes % s == 0 && num_classes / s <= 4) {
      *shapes = s;
      *colors = num_classes / s;
      return;
    }
  }
  *shapes = 0;
  *colors = 0;
}

}  // namespace

uint32_t Vocab::id(const std::string& tok) const {
  auto it = ids.find(tok);
  if (it == ids.end()) throw NumericalError("token not in closed vocabulary: " + tok);
  return it->second;
}

Vocab Vocab::build(const std::vector<std::string>& token_set) {
  std::set<std::string> uniq(token_set.begin(), token_set.end());
  Vocab v;
  for (const auto& t : uniq) {
    v.ids[t] = static_cast<uint32_t>(v.tokens.size());
    v.tokens.push_back(t);
  }
  return v;
}

const char* trigger_kind_name(TriggerKind k) {
  switch (k) {
    case TriggerKind::BadNet: return "badnet";
    case TriggerKind::Blended: return "blended";
    case TriggerKind::WaNet: return "wanet";
    case TriggerKind::LabelConsistent: return "label_consistent";
  }
  return "unknown";
}

TriggerKind trigger_kind_from_name(const std::string& name) {
  if (name == "badnet") return TriggerKind::BadNet;
  if (name == "blended") return TriggerKind::Blended;
  if (name == "wanet") return TriggerKind::WaNet;
  if (name == "label_consistent") return TriggerKind::LabelConsistent;
  throw ConfigError("unknown trigger kind: " + name);
}

std::vector<std::string> DatasetSpec::default_caption_templates() {
  return {"a photo of a {cls}", "an image of a {cls}", "this is a {cls}"};
}

void DatasetSpec::validate() const {
  if (image_size < 16)
    throw ConfigError("dataset spec: image_size must be >= 16, got " + std::to_string(image_size));
  if (channels != 3)
    throw ConfigError("dataset spec: channels must be 3, got " + std::to_string(channels));
  if (examples_per_class < 1)
    throw ConfigError("dataset spec: examples_per_class must be >= 1, got " +
                      std::to_string(examples_per_class));
  int s = 0, c = 0;
  palette_counts(num_classes, &s, &c);
  if (s == 0)
    throw ConfigError("dataset spec: num_classes must factor as shapes*colors with both <= 4, got " +
                      std::to_string(num_classes));
  if (background_noise_sigma < 0.0)
    throw ConfigError("dataset spec: background_noise_sigma must be >= 0");
  if (caption_templates.empty()) throw ConfigError("dataset spec: caption_templates is empty");
}

std::vector<std::string> class_names_for(const DatasetSpec& spec) {
  int s = 0, c = 0;
  palette_counts(spec.num_classes, &s, &c);
  std::vector<std::string> names;
  for (int ci = 0; ci < c; ++ci)
    for (int si = 0; si < s; ++si) names.push_back(kColors[ci] + "-" + kShapes[si]);
  return names;
}

void class_color(const DatasetSpec& spec, int class_id, double rgb[3]) {
  int s = 0, c = 0;
  palette_counts(spec.num_classes, &s, &c);
  int color_idx = class_id / s;
  for (int k = 0; k < 3; ++k) rgb[k] = kColorRgb[color_idx][k];
  if (spec.palette_shift != 0.0) {
    // Rotate the palette in RGB space; a cheap hue shift for the second-source analog.
    double t = spec.palette_shift;
    double r = rgb[0], g = rgb[1], b = rgb[2];
    rgb[0] = clamp01((1 - t) * r + t * g);
    rgb[1] = clamp01((1 - t) * g + t * b);
    rgb[2] = clamp01((1 - t) * b + t * r);
  }
}

Image render_image(const DatasetSpec& spec, int class_id, uint64_t placement_seed) {
  if (class_id < 0 || class_id >= spec.num_classes)
    throw std::invalid_argument("render_image: class_id out of range");
  int s = 0, c = 0;
  palette_counts(spec.num_classes, &s, &c);
  int shape_idx = class_id % s;

  const int S = spec.image_size;
  Image img(S, S, spec.channels);

  Rng placement(placement_seed, 0x706c6163ull);  // shape placement stream
  double cx = S / 2.0 + placement.uniform(-S / 8.0, S / 8.0);
  double cy = S / 2.0 + placement.uniform(-S / 8.0, S / 8.0);
  double r = placement.uniform(S * 0.22, S * 0.34);

  Rng noise(placement_seed, 0x6e6f6973ull);  // background noise stream
  double rgb[3];
  class_color(spec, class_id, rgb);

  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      double dx = x + 0.5 - cx;
      double dy = y + 0.5 - cy;
      bool inside = false;
      switch (shape_idx) {
        case 0:  // circle
          inside = dx * dx + dy * dy <= r * r;
          break;
        case 1:  // square
          inside = std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
          break;
        case 2:  // triangle, apex up
          inside = dy >= -r && dy <= r * 0.7 && std::abs(dx) <= (dy + r) * 0.62;
          break;
        case 3:  // cross
          inside = (std::abs(dx) <= r * 0.28 && std::abs(dy) <= r) ||
                   (std::abs(dy) <= r * 0.28 && std::abs(dx) <= r);
          break;
      }
      for (int ch = 0; ch < spec.channels; ++ch) {
        double val;
        if (inside) {
          val = rgb[ch];
        } else {
          val = kBackgroundBase + spec.background_noise_sigma * noise.normal();
        }
        img.at(y, x, ch) = clamp01(val);
      }
    }
  }
  return img;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

CaptionTokens make_caption(const DatasetSpec& spec, int class_id, int template_index,
                           const Vocab& vocab, const std::vector<std::string>& class_names) {
  if (template_index < 0 || template_index >= static_cast<int>(spec.caption_templates.size()))
    throw std::invalid_argument("make_caption: template_index out of range");
  if (class_id < 0 || class_id >= static_cast<int>(class_names.size()))
    throw std::invalid_argument("make_caption: class_id out of range");
  CaptionTokens out;
  for (const auto& tok : tokenize(spec.caption_templates[template_index])) {
    const std::string& word = (tok == "{cls}") ? class_names[class_id] : tok;
    out.push_back(vocab.id(word));
  }
  return out;
}

std::string detokenize(const CaptionTokens& tokens, const Vocab& vocab) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab.size()) throw std::invalid_argument("detokenize: token id out of range");
    if (i) out += ' ';
    out += vocab.tokens[tokens[i]];
  }
  return out;
}

PairedCorpus generate_corpus(const DatasetSpec& spec, const std::string& split_tag) {
  spec.validate();
  PairedCorpus corpus;
  corpus.split_tag = split_tag;
  corpus.class_names = class_names_for(spec);

  std::vector<std::string> token_set;
  for (const auto& tmpl : spec.caption_templates)
    for (const auto& tok : tokenize(tmpl))
      if (tok != "{cls}") token_set.push_back(tok);
  for (const auto& name : corpus.class_names) token_set.push_back(name);
  corpus.vocab = Vocab::build(token_set);

  uint64_t split_salt = hash_combine(spec.seed, std::hash<std::string>{}(split_tag));
  corpus.examples.reserve(static_cast<size_t>(spec.num_classes) * spec.examples_per_class);
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    for (int e = 0; e < spec.examples_per_class; ++e) {
      uint64_t ex_seed = hash_combine(split_salt, static_cast<uint64_t>(cls) * 1000003ull + e);
      PairedExample ex;
      ex.class_id = cls;
      ex.image = render_image(spec, cls, ex_seed);
      Rng tmpl_rng(ex_seed, 0x74656d70ull);
      int t = static_cast<int>(tmpl_rng.below(spec.caption_templates.size()));
      ex.caption = make_caption(spec, cls, t, corpus.vocab, corpus.class_names);
      corpus.examples.push_back(std::move(ex));
    }
  }
  return corpus;
}

std::pair<PairedCorpus, PairedCorpus> split_corpus(const PairedCorpus& corpus,
                                                   double val_fraction, uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("split_corpus: val_fraction must be in (0,1)");

  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < corpus.examples.size(); ++i)
    by_class[corpus.examples[i].class_id].push_back(i);

  std::set<size_t> val_set;
  for (auto& [cls, idxs] : by_class) {
    size_t n_val = static_cast<size_t>(std::llround(val_fraction * idxs.size()));
    std::vector<size_t> shuffled = idxs;
    Rng rng(seed, static_cast<uint64_t>(cls));
    for (size_t i = shuffled.size(); i > 1; --i)
      std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    for (size_t i = 0; i < n_val; ++i) val_set.insert(shuffled[i]);
  }

  PairedCorpus train, val;
  train.vocab = val.vocab = corpus.vocab;
  train.class_names = val.class_names = corpus.class_names;
  train.split_tag = "train";
  val.split_tag = "val";
  for (size_t i = 0; i < corpus.examples.size(); ++i) {
    if (val_set.count(i))
      val.examples.push_back(corpus.examples[i]);
    else
      train.examples.push_back(corpus.examples[i]);
  }
  return {std::move(train), std::move(val)};
}

void save_corpus(const PairedCorpus& corpus, const DatasetSpec& spec,
                 const std::string& dir, const std::string& config_hash) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["config_hash"] = config_hash;
  manifest["split_tag"] = corpus.split_tag;
  manifest["num_examples"] = corpus.examples.size();
  manifest["class_names"] = corpus.class_names;
  manifest["vocab"] = corpus.vocab.tokens;
  manifest["spec"] = {{"image_size", spec.image_size},
                      {"channels", spec.channels},
                      {"num_classes", spec.num_classes},
                      {"examples_per_class", spec.examples_per_class},
                      {"background_noise_sigma", spec.background_noise_sigma},
                      {"seed", spec.seed},
                      {"palette_shift", spec.palette_shift},
                      {"caption_templates", spec.caption_templates}};
  std::vector<int> class_ids;
  std::vector<int> poisoned;
  std::vector<std::string> kinds;
  for (const auto& ex : corpus.examples) {
    class_ids.push_back(ex.class_id);
    poisoned.push_back(ex.poisoned ? 1 : 0);
    kinds.push_back(ex.poison_kind ? trigger_kind_name(*ex.poison_kind) : "");
  }
  manifest["class_ids"] = class_ids;
  manifest["poisoned"] = poisoned;
  manifest["poison_kinds"] = kinds;
  {
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw ConfigError("save_corpus: cannot write manifest in " + dir);
    mf << manifest.dump(2) << '\n';
  }
  {
    std::ofstream imf(fs::path(dir) / "images.f64", std::ios::binary);
    for (const auto& ex : corpus.examples)
      imf.write(reinterpret_cast<const char*>(ex.image.v.data()),
                static_cast<std::streamsize>(ex.image.v.size() * sizeof(double)));
    if (!imf) throw ConfigError("save_corpus: cannot write images.f64 in " + dir);
  }
  {
    std::ofstream cf(fs::path(dir) / "captions.bin", std::ios::binary);
    uint32_t n = static_cast<uint32_t>(corpus.examples.size());
    cf.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (const auto& ex : corpus.examples) {
      uint32_t len = static_cast<uint32_t>(ex.caption.size());
      cf.write(reinterpret_cast<const char*>(&len), sizeof(len));
      cf.write(reinterpret_cast<const char*>(ex.caption.data()),
               static_cast<std::streamsize>(len * sizeof(uint32_t)));
    }
    if (!cf) throw ConfigError("save_corpus: cannot write captions.bin in " + dir);
  }
}

PairedCorpus load_corpus(const std::string& dir, std::string* config_hash) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw ConfigError("load_corpus: missing manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);

  PairedCorpus corpus;
  corpus.split_tag = manifest.at("split_tag").get<std::string>();
  corpus.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  corpus.vocab = Vocab::build(manifest.at("vocab").get<std::vector<std::string>>());
  if (config_hash) *config_hash = manifest.at("config_hash").get<std::string>();

  size_t n = manifest.at("num_examples").get<size_t>();
  auto class_ids = manifest.at("class_ids").get<std::vector<int>>();
  auto poisoned = manifest.at("poisoned").get<std::vector<int>>();
  auto kinds = manifest.at("poison_kinds").get<std::vector<std::string>>();
  int S = manifest.at("spec").at("image_size").get<int>();
  int C = manifest.at("spec").at("channels").get<int>();
  if (class_ids.size() != n || poisoned.size() != n || kinds.size() != n)
    throw ConfigError("load_corpus: manifest arrays inconsistent in " + dir);

  std::ifstream imf(fs::path(dir) / "images.f64", std::ios::binary);
  std::ifstream cf(fs::path(dir) / "captions.bin", std::ios::binary);
  if (!imf || !cf) throw ConfigError("load_corpus: missing tensor files in " + dir);
  uint32_t cap_n = 0;
  cf.read(reinterpret_cast<char*>(&cap_n), sizeof(cap_n));
  if (cap_n != n) throw ConfigError("load_corpus: captions.bin count mismatch in " + dir);

  corpus.examples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    PairedExample& ex = corpus.examples[i];
    ex.image = Image(S, S, C);
    imf.read(reinterpret_cast<char*>(ex.image.v.data()),
             static_cast<std::streamsize>(ex.image.v.size() * sizeof(double)));
    uint32_t len = 0;
    cf.read(reinterpret_cast<char*>(&len), sizeof(len));
    ex.caption.resize(len);
    cf.read(reinterpret_cast<char*>(ex.caption.data()),
            static_cast<std::streamsize>(len * sizeof(uint32_t)));
    ex.class_id = class_ids[i];
    ex.poisoned = poisoned[i] != 0;
    if (!kinds[i].empty()) ex.poison_kind = trigger_kind_from_name(kinds[i]);
  }
  if (!imf || !cf) throw ConfigError("load_corpus: truncated tensor files in " + dir);
  return corpus;
}

}  // namespace cliplab
