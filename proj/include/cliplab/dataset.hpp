#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cliplab/common.hpp"

namespace cliplab {

// Dense H x W x C image, row-major, channels-last, intensities in [0,1].
struct Image {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> v;

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(static_cast<size_t>(h_) * w_ * c_, 0.0) {}

  double& at(int y, int x, int ch) { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }
  double at(int y, int x, int ch) const { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }
  size_t size() const { return v.size(); }
  bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

using CaptionTokens = std::vector<uint32_t>;

struct Vocab {
  std::vector<std::string> tokens;           // id -> token
  std::map<std::string, uint32_t> ids;       // token -> id

  uint32_t id(const std::string& tok) const;
  size_t size() const { return tokens.size(); }
  static Vocab build(const std::vector<std::string>& token_set);
};

enum class TriggerKind { BadNet, Blended, WaNet, LabelConsistent };

const char* trigger_kind_name(TriggerKind k);
TriggerKind trigger_kind_from_name(const std::string& name);

struct DatasetSpec {
  int image_size = 32;
  int channels = 3;
  int num_classes = 16;
  int examples_per_class = 100;
  double background_noise_sigma = 0.05;
  uint64_t seed = 0;
  // Hue rotation of the color palette, used to emulate a second data source.
  double palette_shift = 0.0;
  std::vector<std::string> caption_templates = default_caption_templates();

  static std::vector<std::string> default_caption_templates();
  void validate() const;  // throws ConfigError naming the violated bound
};

struct PairedExample {
  Image image;
  CaptionTokens caption;
  int class_id = 0;
  bool poisoned = false;
  std::optional<TriggerKind> poison_kind;
};

struct PairedCorpus {
  std::vector<PairedExample> examples;
  Vocab vocab;
  std::vector<std::string> class_names;
  std::string split_tag = "train";

  size_t size() const { return examples.size(); }
};

// Palette handling: classes are (color, shape) pairs, color-major, so
// class 0 is "red-circle" for the default palette.
std::vector<std::string> class_names_for(const DatasetSpec& spec);
void class_color(const DatasetSpec& spec, int class_id, double rgb[3]);

Image render_image(const DatasetSpec& spec, int class_id, uint64_t placement_seed);
CaptionTokens make_caption(const DatasetSpec& spec, int class_id, int template_index,
                           const Vocab& vocab, const std::vector<std::string>& class_names);
std::string detokenize(const CaptionTokens& tokens, const Vocab& vocab);
std::vector<std::string> tokenize(const std::string& text);

PairedCorpus generate_corpus(const DatasetSpec& spec, const std::string& split_tag = "train");
std::pair<PairedCorpus, PairedCorpus> split_corpus(const PairedCorpus& corpus,
                                                   double val_fraction, uint64_t seed);

// Corpus persistence: <dir>/manifest.json + images.f64 + captions.bin.
void save_corpus(const PairedCorpus& corpus, const DatasetSpec& spec,
                 const std::string& dir, const std::string& config_hash);
PairedCorpus load_corpus(const std::string& dir, std::string* config_hash = nullptr);

}  // namespace cliplab
