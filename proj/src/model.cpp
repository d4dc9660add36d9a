#include "cliplab/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cliplab/common.hpp"
#include "cliplab/rng.hpp"

namespace cliplab {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// y = W x, W row-major [rows x cols]
void matvec(const double* W, const double* x, double* y, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* wr = W + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

// dW += dy x^T ; dx += W^T dy
void matvec_backward(const double* W, const double* x, const double* dy, double* dW, double* dx,
                     int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* wr = W + static_cast<size_t>(r) * cols;
    double* dwr = dW + static_cast<size_t>(r) * cols;
    double g = dy[r];
    for (int c = 0; c < cols; ++c) {
      dwr[c] += g * x[c];
      if (dx) dx[c] += wr[c] * g;
    }
  }
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void ArchSpec::validate() const {
  if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0)
    throw ConfigError("arch spec: image_size must be divisible by patch_size");
  if (proj_dim < 2) throw ConfigError("arch spec: proj_dim must be >= 2");
  if (embed_dim < 1) throw ConfigError("arch spec: embed_dim must be >= 1");
  if (mlp_layers < 0) throw ConfigError("arch spec: mlp_layers must be >= 0");
  if (vocab_size < 1) throw ConfigError("arch spec: vocab_size must be >= 1");
  if (channels < 1) throw ConfigError("arch spec: channels must be >= 1");
}

ParamLayout ParamLayout::of(const ArchSpec& arch) {
  ParamLayout l;
  size_t off = 0;
  const size_t E = arch.embed_dim, P = arch.proj_dim, PD = arch.patch_dim(), V = arch.vocab_size;
  l.img_begin = off;
  l.img_patch = off;
  off += E * PD;
  for (int i = 0; i < arch.mlp_layers; ++i) {
    l.img_mlp_w.push_back(off);
    off += E * E;
    l.img_mlp_b.push_back(off);
    off += E;
  }
  l.img_proj = off;
  off += P * E;
  l.img_end = off;
  l.txt_embed = off;
  off += V * E;
  for (int i = 0; i < arch.mlp_layers; ++i) {
    l.txt_mlp_w.push_back(off);
    off += E * E;
    l.txt_mlp_b.push_back(off);
    off += E;
  }
  l.txt_proj = off;
  off += P * E;
  l.log_tau = off;
  off += 1;
  l.total = off;
  return l;
}

double ModelParams::temperature() const { return std::exp(log_temperature()); }

ModelParams init_params(const ArchSpec& arch) {
  arch.validate();
  ParamLayout l = ParamLayout::of(arch);
  ModelParams p;
  p.arch = arch;
  p.data.assign(l.total, 0.0);

  auto fill = [&](size_t off, size_t count, int fan_in, uint64_t stream) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Rng rng(arch.init_seed, stream);
    for (size_t i = 0; i < count; ++i) p.data[off + i] = rng.uniform(-bound, bound);
  };

  const size_t E = arch.embed_dim, P = arch.proj_dim, PD = arch.patch_dim(), V = arch.vocab_size;
  uint64_t stream = 1;
  fill(l.img_patch, E * PD, static_cast<int>(PD), stream++);
  for (int i = 0; i < arch.mlp_layers; ++i) fill(l.img_mlp_w[i], E * E, (int)E, stream++);
  fill(l.img_proj, P * E, (int)E, stream++);
  fill(l.txt_embed, V * E, (int)E, stream++);
  for (int i = 0; i < arch.mlp_layers; ++i) fill(l.txt_mlp_w[i], E * E, (int)E, stream++);
  fill(l.txt_proj, P * E, (int)E, stream++);
  p.data[l.log_tau] = std::log(kTauInit);
  return p;
}

void clamp_temperature(ModelParams& params) {
  double lo = std::log(kTauMin), hi = std::log(kTauMax);
  double& lt = params.log_temperature();
  if (lt < lo) lt = lo;
  if (lt > hi) lt = hi;
}

namespace {

// Shared MLP + projection + l2-normalize tail, starting from pooled vector u.
Embedding tower_tail(const ModelParams& params, const ParamLayout& l, bool image,
                     EncodeCache* cache) {
  const ArchSpec& arch = params.arch;
  const int E = arch.embed_dim, P = arch.proj_dim;
  const auto& mlp_w = image ? l.img_mlp_w : l.txt_mlp_w;
  const auto& mlp_b = image ? l.img_mlp_b : l.txt_mlp_b;
  const size_t proj = image ? l.img_proj : l.txt_proj;

  cache->z.assign(arch.mlp_layers, std::vector<double>(E));
  cache->a.assign(arch.mlp_layers, std::vector<double>(E));
  const std::vector<double>* prev = &cache->u;
  for (int li = 0; li < arch.mlp_layers; ++li) {
    matvec(params.data.data() + mlp_w[li], prev->data(), cache->z[li].data(), E, E);
    for (int i = 0; i < E; ++i) {
      cache->z[li][i] += params.data[mlp_b[li] + i];
      cache->a[li][i] = gelu(cache->z[li][i]);
    }
    prev = &cache->a[li];
  }

  cache->pre_norm.assign(P, 0.0);
  matvec(params.data.data() + proj, prev->data(), cache->pre_norm.data(), P, E);

  double nrm2 = 0.0;
  for (double v : cache->pre_norm) nrm2 += v * v;
  cache->norm = std::sqrt(nrm2);
  if (!(cache->norm > 1e-12) || !std::isfinite(cache->norm))
    throw NumericalError("tower output norm is degenerate");
  cache->e.assign(P, 0.0);
  for (int i = 0; i < P; ++i) cache->e[i] = cache->pre_norm[i] / cache->norm;
  return cache->e;
}

void tower_tail_backward(const ModelParams& params, const ParamLayout& l, bool image,
                         const EncodeCache& cache, const std::vector<double>& d_e,
                         std::vector<double>* grad, std::vector<double>* d_u) {
  const ArchSpec& arch = params.arch;
  const int E = arch.embed_dim, P = arch.proj_dim;
  const auto& mlp_w = image ? l.img_mlp_w : l.txt_mlp_w;
  const auto& mlp_b = image ? l.img_mlp_b : l.txt_mlp_b;
  const size_t proj = image ? l.img_proj : l.txt_proj;

  // Through l2-normalize: dv = (g - (g.e) e) / |v|
  double ge = 0.0;
  for (int i = 0; i < P; ++i) ge += d_e[i] * cache.e[i];
  std::vector<double> dv(P);
  for (int i = 0; i < P; ++i) dv[i] = (d_e[i] - ge * cache.e[i]) / cache.norm;

  const std::vector<double>& last =
      arch.mlp_layers > 0 ? cache.a[arch.mlp_layers - 1] : cache.u;
  std::vector<double> da(E, 0.0);
  matvec_backward(params.data.data() + proj, last.data(), dv.data(),
                  grad->data() + proj, da.data(), P, E);

  for (int li = arch.mlp_layers - 1; li >= 0; --li) {
    std::vector<double> dz(E);
    for (int i = 0; i < E; ++i) dz[i] = da[i] * gelu_grad(cache.z[li][i]);
    for (int i = 0; i < E; ++i) (*grad)[mlp_b[li] + i] += dz[i];
    const std::vector<double>& prev = li > 0 ? cache.a[li - 1] : cache.u;
    std::vector<double> dprev(E, 0.0);
    matvec_backward(params.data.data() + mlp_w[li], prev.data(), dz.data(),
                    grad->data() + mlp_w[li], dprev.data(), E, E);
    da = std::move(dprev);
  }
  *d_u = std::move(da);
}

}  // namespace

Embedding encode_image_cached(const ModelParams& params, const Image& image, EncodeCache* cache) {
  const ArchSpec& arch = params.arch;
  if (image.h != arch.image_size || image.w != arch.image_size || image.c != arch.channels)
    throw std::invalid_argument("encode_image: image shape does not match arch");
  ParamLayout l = ParamLayout::of(arch);
  const int p = arch.patch_size, C = arch.channels, G = arch.image_size / p;
  const int PD = arch.patch_dim();

  // Linear patch embedding commutes with mean pooling, so pool patches first.
  cache->mean_patch.assign(PD, 0.0);
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx)
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < C; ++ch)
            cache->mean_patch[(static_cast<size_t>(py) * p + px) * C + ch] +=
                image.at(gy * p + py, gx * p + px, ch);
  double inv = 1.0 / (G * G);
  for (auto& v : cache->mean_patch) v *= inv;

  cache->u.assign(arch.embed_dim, 0.0);
  matvec(params.data.data() + l.img_patch, cache->mean_patch.data(), cache->u.data(),
         arch.embed_dim, PD);
  return tower_tail(params, l, /*image=*/true, cache);
}

Embedding encode_text_cached(const ModelParams& params, const CaptionTokens& caption,
                             EncodeCache* cache) {
  const ArchSpec& arch = params.arch;
  if (caption.empty()) throw std::invalid_argument("encode_text: empty caption");
  for (uint32_t t : caption)
    if (t >= static_cast<uint32_t>(arch.vocab_size))
      throw std::invalid_argument("encode_text: token id out of vocabulary");
  ParamLayout l = ParamLayout::of(arch);
  const int E = arch.embed_dim;

  cache->tokens = caption;
  cache->u.assign(E, 0.0);
  for (uint32_t t : caption) {
    const double* row = params.data.data() + l.txt_embed + static_cast<size_t>(t) * E;
    for (int i = 0; i < E; ++i) cache->u[i] += row[i];
  }
  double inv = 1.0 / caption.size();
  for (auto& v : cache->u) v *= inv;
  return tower_tail(params, l, /*image=*/false, cache);
}

Embedding encode_image(const ModelParams& params, const Image& image) {
  EncodeCache cache;
  return encode_image_cached(params, image, &cache);
}

Embedding encode_text(const ModelParams& params, const CaptionTokens& caption) {
  EncodeCache cache;
  return encode_text_cached(params, caption, &cache);
}

void backprop_image(const ModelParams& params, const EncodeCache& cache,
                    const std::vector<double>& d_embedding, std::vector<double>* grad) {
  ParamLayout l = ParamLayout::of(params.arch);
  std::vector<double> du;
  tower_tail_backward(params, l, /*image=*/true, cache, d_embedding, grad, &du);
  matvec_backward(params.data.data() + l.img_patch, cache.mean_patch.data(), du.data(),
                  grad->data() + l.img_patch, nullptr, params.arch.embed_dim,
                  params.arch.patch_dim());
}

void backprop_text(const ModelParams& params, const EncodeCache& cache,
                   const std::vector<double>& d_embedding, std::vector<double>* grad) {
  ParamLayout l = ParamLayout::of(params.arch);
  const int E = params.arch.embed_dim;
  std::vector<double> du;
  tower_tail_backward(params, l, /*image=*/false, cache, d_embedding, grad, &du);
  double inv = 1.0 / cache.tokens.size();
  for (uint32_t t : cache.tokens) {
    double* row = grad->data() + l.txt_embed + static_cast<size_t>(t) * E;
    for (int i = 0; i < E; ++i) row[i] += du[i] * inv;
  }
}

BatchGradResult encode_batch_with_grad(const ModelParams& params, const BatchInputs& batch,
                                       const BatchLossFn& loss_fn) {
  if (!batch.images || !batch.captions || batch.images->empty())
    throw std::invalid_argument("encode_batch_with_grad: empty batch");
  ParamLayout l = ParamLayout::of(params.arch);

  auto encode_images = [&](const std::vector<Image>* imgs, std::vector<EncodeCache>* caches,
                           std::vector<Embedding>* embs) {
    if (!imgs) return;
    caches->resize(imgs->size());
    embs->resize(imgs->size());
    for (size_t i = 0; i < imgs->size(); ++i)
      (*embs)[i] = encode_image_cached(params, (*imgs)[i], &(*caches)[i]);
  };
  auto encode_texts = [&](const std::vector<CaptionTokens>* caps, std::vector<EncodeCache>* caches,
                          std::vector<Embedding>* embs) {
    if (!caps) return;
    caches->resize(caps->size());
    embs->resize(caps->size());
    for (size_t i = 0; i < caps->size(); ++i)
      (*embs)[i] = encode_text_cached(params, (*caps)[i], &(*caches)[i]);
  };

  std::vector<EncodeCache> img_c, txt_c, img2_c, txt2_c;
  std::vector<Embedding> img_e, txt_e, img2_e, txt2_e;
  encode_images(batch.images, &img_c, &img_e);
  encode_texts(batch.captions, &txt_c, &txt_e);
  encode_images(batch.images2, &img2_c, &img2_e);
  encode_texts(batch.captions2, &txt2_c, &txt2_e);

  const int P = params.arch.proj_dim;
  std::vector<Embedding> d_img(img_e.size(), Embedding(P, 0.0));
  std::vector<Embedding> d_txt(txt_e.size(), Embedding(P, 0.0));
  std::vector<Embedding> d_img2(img2_e.size(), Embedding(P, 0.0));
  std::vector<Embedding> d_txt2(txt2_e.size(), Embedding(P, 0.0));
  double d_log_tau = 0.0;

  double loss = loss_fn.eval(img_e, txt_e, img2_e, txt2_e, params.temperature(), &d_img, &d_txt,
                             &d_img2, &d_txt2, &d_log_tau);
  if (!std::isfinite(loss)) throw NumericalError("encode_batch_with_grad: non-finite loss");

  BatchGradResult result;
  result.loss = loss;
  result.grad.assign(l.total, 0.0);
  for (size_t i = 0; i < img_e.size(); ++i) backprop_image(params, img_c[i], d_img[i], &result.grad);
  for (size_t i = 0; i < txt_e.size(); ++i) backprop_text(params, txt_c[i], d_txt[i], &result.grad);
  for (size_t i = 0; i < img2_e.size(); ++i)
    backprop_image(params, img2_c[i], d_img2[i], &result.grad);
  for (size_t i = 0; i < txt2_e.size(); ++i)
    backprop_text(params, txt2_c[i], d_txt2[i], &result.grad);
  result.grad[l.log_tau] = d_log_tau;

  for (size_t i = 0; i < result.grad.size(); ++i)
    if (!std::isfinite(result.grad[i]))
      throw NumericalError("encode_batch_with_grad: non-finite gradient at coordinate " +
                           std::to_string(i));
  return result;
}

namespace {
constexpr char kCkptMagic[8] = {'C', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};

void write_string(std::ofstream& f, const std::string& s) {
  uint32_t n = static_cast<uint32_t>(s.size());
  f.write(reinterpret_cast<const char*>(&n), sizeof(n));
  f.write(s.data(), n);
}

std::string read_string(std::ifstream& f) {
  uint32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::string s(n, '\0');
  f.read(s.data(), n);
  return s;
}
}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::string& config_hash, const std::string& corpus_hash) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("save_checkpoint: cannot write " + path);
  f.write(kCkptMagic, sizeof(kCkptMagic));
  uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  int32_t fields[7] = {params.arch.image_size, params.arch.channels, params.arch.patch_size,
                       params.arch.embed_dim, params.arch.proj_dim, params.arch.mlp_layers,
                       params.arch.vocab_size};
  f.write(reinterpret_cast<const char*>(fields), sizeof(fields));
  uint64_t init_seed = params.arch.init_seed;
  f.write(reinterpret_cast<const char*>(&init_seed), sizeof(init_seed));
  write_string(f, config_hash);
  write_string(f, corpus_hash);
  uint64_t count = params.data.size();
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  f.write(reinterpret_cast<const char*>(params.data.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!f) throw ConfigError("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path, std::string* config_hash,
                            std::string* corpus_hash) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("load_checkpoint: cannot read " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw ConfigError("load_checkpoint: bad magic in " + path);
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != 1) throw ConfigError("load_checkpoint: unsupported version in " + path);
  int32_t fields[7];
  f.read(reinterpret_cast<char*>(fields), sizeof(fields));
  ModelParams p;
  p.arch.image_size = fields[0];
  p.arch.channels = fields[1];
  p.arch.patch_size = fields[2];
  p.arch.embed_dim = fields[3];
  p.arch.proj_dim = fields[4];
  p.arch.mlp_layers = fields[5];
  p.arch.vocab_size = fields[6];
  uint64_t init_seed = 0;
  f.read(reinterpret_cast<char*>(&init_seed), sizeof(init_seed));
  p.arch.init_seed = init_seed;
  std::string cfg = read_string(f);
  std::string cor = read_string(f);
  if (config_hash) *config_hash = cfg;
  if (corpus_hash) *corpus_hash = cor;
  uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (count != ParamLayout::of(p.arch).total)
    throw ConfigError("load_checkpoint: parameter count mismatch in " + path);
  p.data.resize(count);
  f.read(reinterpret_cast<char*>(p.data.data()),
         static_cast<std::streamsize>(count * sizeof(double)));
  if (!f) throw ConfigError("load_checkpoint: truncated file " + path);
  return p;
}

}  // namespace cliplab
