#include "cliplab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "cliplab/rng.hpp"
#include "json.hpp"

namespace cliplab {

namespace {

double dot(const Embedding& a, const Embedding& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

void save_metrics_report(const MetricsReport& report, const std::string& path) {
  nlohmann::json j;
  j["clean_accuracy"] = report.clean_accuracy;
  j["attack_success_rate"] = report.attack_success_rate;
  j["mean_pair_distance"] = report.mean_pair_distance;
  j["per_class_accuracy"] = report.per_class_accuracy;
  if (report.detection_recall) j["detection_recall"] = *report.detection_recall;
  if (report.detection_precision) j["detection_precision"] = *report.detection_precision;
  if (!report.clipscore_curves.empty()) {
    nlohmann::json curves = nlohmann::json::array();
    for (const auto& c : report.clipscore_curves) curves.push_back({c[0], c[1]});
    j["clipscore_curves"] = curves;
  }
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path);
  if (!f) throw ConfigError("save_metrics_report: cannot write " + path);
  f << j.dump(2) << '\n';
}

MetricsReport load_metrics_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("load_metrics_report: cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  MetricsReport r;
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  r.attack_success_rate = j.at("attack_success_rate").get<double>();
  r.mean_pair_distance = j.at("mean_pair_distance").get<double>();
  r.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
  if (j.contains("detection_recall")) r.detection_recall = j["detection_recall"].get<double>();
  if (j.contains("detection_precision"))
    r.detection_precision = j["detection_precision"].get<double>();
  if (j.contains("clipscore_curves"))
    for (const auto& c : j["clipscore_curves"])
      r.clipscore_curves.push_back({c[0].get<double>(), c[1].get<double>()});
  return r;
}

std::vector<Embedding> class_caption_embeddings(const ModelParams& params,
                                                const std::vector<std::string>& class_names,
                                                const Vocab& vocab) {
  if (class_names.empty())
    throw std::invalid_argument("class_caption_embeddings: class_names is empty");
  std::vector<Embedding> out;
  for (const auto& name : class_names) {
    CaptionTokens tokens;
    for (const auto& tok : {std::string("a"), std::string("photo"), std::string("of"),
                            std::string("a"), name})
      tokens.push_back(vocab.id(tok));
    out.push_back(encode_text(params, tokens));
  }
  return out;
}

int zero_shot_classify(const Embedding& image_emb, const std::vector<Embedding>& class_embs) {
  if (class_embs.empty()) throw std::invalid_argument("zero_shot_classify: no classes");
  int best = 0;
  double best_sim = dot(image_emb, class_embs[0]);
  for (size_t c = 1; c < class_embs.size(); ++c) {
    double s = dot(image_emb, class_embs[c]);
    if (s > best_sim) {  // ties keep the lowest class index
      best_sim = s;
      best = static_cast<int>(c);
    }
  }
  return best;
}

int zero_shot_classify(const ModelParams& params, const Image& image,
                       const std::vector<std::string>& class_names, const Vocab& vocab) {
  std::vector<Embedding> class_embs = class_caption_embeddings(params, class_names, vocab);
  return zero_shot_classify(encode_image(params, image), class_embs);
}

double clean_accuracy(const ModelParams& params, const PairedCorpus& val_corpus,
                      std::vector<double>* per_class) {
  if (val_corpus.size() == 0) throw std::invalid_argument("clean_accuracy: empty corpus");
  std::vector<Embedding> class_embs =
      class_caption_embeddings(params, val_corpus.class_names, val_corpus.vocab);
  std::vector<int> correct(val_corpus.class_names.size(), 0);
  std::vector<int> total(val_corpus.class_names.size(), 0);
  int hits = 0;
  for (const auto& ex : val_corpus.examples) {
    int pred = zero_shot_classify(encode_image(params, ex.image), class_embs);
    ++total[ex.class_id];
    if (pred == ex.class_id) {
      ++hits;
      ++correct[ex.class_id];
    }
  }
  if (per_class) {
    per_class->assign(total.size(), 0.0);
    for (size_t c = 0; c < total.size(); ++c)
      (*per_class)[c] = total[c] ? static_cast<double>(correct[c]) / total[c] : 0.0;
  }
  return static_cast<double>(hits) / val_corpus.size();
}

double attack_success_rate(const ModelParams& params, const PairedCorpus& val_corpus,
                           const TriggerApplier& trigger, int target_class) {
  std::vector<Embedding> class_embs =
      class_caption_embeddings(params, val_corpus.class_names, val_corpus.vocab);
  int retained = 0;
  int hits = 0;
  for (size_t i = 0; i < val_corpus.size(); ++i) {
    const auto& ex = val_corpus.examples[i];
    if (ex.class_id == target_class) continue;  // target-class images cannot evidence an attack
    ++retained;
    Image triggered = trigger(ex.image, i);
    if (zero_shot_classify(encode_image(params, triggered), class_embs) == target_class) ++hits;
  }
  if (retained == 0) throw std::invalid_argument("attack_success_rate: no non-target images");
  return static_cast<double>(hits) / retained;
}

double pair_distance(const Embedding& e1, const Embedding& e2) {
  return 2.0 - 2.0 * dot(e1, e2);
}

double mean_pair_distance(const ModelParams& params, const std::vector<Image>& clean_images,
                          const TriggerApplier& trigger) {
  if (clean_images.empty()) throw std::invalid_argument("mean_pair_distance: empty image list");
  double sum = 0.0;
  for (size_t i = 0; i < clean_images.size(); ++i) {
    Embedding e1 = encode_image(params, clean_images[i]);
    Embedding e2 = encode_image(params, trigger(clean_images[i], i));
    sum += pair_distance(e1, e2);
  }
  return sum / clean_images.size();
}

double clipscore(const ModelParams& params, const Image& image, const CaptionTokens& caption) {
  return dot(encode_image(params, image), encode_text(params, caption));
}

std::vector<size_t> rank_by_score(const std::vector<double>& scores, size_t k, DetectMode mode) {
  if (k > scores.size()) throw std::invalid_argument("rank_by_score: k exceeds corpus size");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  // Ties broken by example index.
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b])
      return mode == DetectMode::Lowest ? scores[a] < scores[b] : scores[a] > scores[b];
    return a < b;
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<size_t> detect_by_clipscore(const ModelParams& params, const PairedCorpus& corpus,
                                        size_t k, DetectMode mode) {
  std::vector<double> scores;
  scores.reserve(corpus.size());
  for (const auto& ex : corpus.examples) scores.push_back(clipscore(params, ex.image, ex.caption));
  return rank_by_score(scores, k, mode);
}

std::pair<double, double> detection_quality(const std::vector<size_t>& detected,
                                            const std::vector<size_t>& true_poison_indices) {
  std::set<size_t> truth(true_poison_indices.begin(), true_poison_indices.end());
  size_t inter = 0;
  for (size_t i : detected)
    if (truth.count(i)) ++inter;
  double recall = truth.empty() ? 0.0 : static_cast<double>(inter) / truth.size();
  double precision = detected.empty() ? 0.0 : static_cast<double>(inter) / detected.size();
  return {recall, precision};
}

Projection2D project_2d(const std::vector<Embedding>& embeddings) {
  if (embeddings.size() < 3) throw std::invalid_argument("project_2d: need at least 3 embeddings");
  const size_t n = embeddings.size();
  const size_t d = embeddings[0].size();

  std::vector<double> mean(d, 0.0);
  for (const auto& e : embeddings)
    for (size_t i = 0; i < d; ++i) mean[i] += e[i] / n;
  std::vector<std::vector<double>> X(n, std::vector<double>(d));
  for (size_t r = 0; r < n; ++r)
    for (size_t i = 0; i < d; ++i) X[r][i] = embeddings[r][i] - mean[i];

  // Covariance (d x d), then power iteration with deflation.
  std::vector<double> cov(d * d, 0.0);
  for (size_t r = 0; r < n; ++r)
    for (size_t i = 0; i < d; ++i)
      for (size_t j = 0; j < d; ++j) cov[i * d + j] += X[r][i] * X[r][j] / n;

  auto power_iterate = [&](uint64_t stream, double* eigenvalue) {
    Rng rng(0x70636132ull, stream);
    std::vector<double> v(d);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    double lambda = 0.0;
    for (int it = 0; it < 500; ++it) {
      std::vector<double> w(d, 0.0);
      for (size_t i = 0; i < d; ++i)
        for (size_t j = 0; j < d; ++j) w[i] += cov[i * d + j] * v[j];
      double nrm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
      if (nrm < 1e-14) {
        *eigenvalue = 0.0;
        return std::vector<double>(d, 0.0);
      }
      for (size_t i = 0; i < d; ++i) v[i] = w[i] / nrm;
      lambda = nrm;
    }
    *eigenvalue = lambda;
    return v;
  };
  auto deflate = [&](const std::vector<double>& v, double lambda) {
    for (size_t i = 0; i < d; ++i)
      for (size_t j = 0; j < d; ++j) cov[i * d + j] -= lambda * v[i] * v[j];
  };

  double l1 = 0.0, l2 = 0.0;
  std::vector<double> v1 = power_iterate(1, &l1);
  deflate(v1, l1);
  std::vector<double> v2 = power_iterate(2, &l2);

  Projection2D out;
  out.coords.resize(n);
  double total_var = 0.0;
  for (size_t r = 0; r < n; ++r)
    for (size_t i = 0; i < d; ++i) total_var += X[r][i] * X[r][i] / n;
  out.degenerate_second_axis = l2 < 1e-10 * std::max(1.0, total_var);
  for (size_t r = 0; r < n; ++r) {
    double x = 0.0, y = 0.0;
    for (size_t i = 0; i < d; ++i) {
      x += X[r][i] * v1[i];
      y += X[r][i] * v2[i];
    }
    out.coords[r] = {x, out.degenerate_second_axis ? 0.0 : y};
  }
  return out;
}

}  // namespace cliplab
