#include "cliplab/objectives.hpp"

#include <cmath>
#include <limits>

#include "cliplab/common.hpp"

namespace cliplab {

namespace {

double dot(const Embedding& a, const Embedding& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Similarity matrix S_jk = <A_j, B_k> / tau, row-major N x N.
std::vector<double> sim_matrix(const std::vector<Embedding>& A, const std::vector<Embedding>& B,
                               double tau) {
  const size_t N = A.size();
  std::vector<double> S(N * N);
  double inv_tau = 1.0 / tau;
  for (size_t j = 0; j < N; ++j)
    for (size_t k = 0; k < N; ++k) {
      double s = dot(A[j], B[k]) * inv_tau;
      if (!std::isfinite(s)) throw NumericalError("non-finite similarity in contrastive loss");
      S[j * N + k] = s;
    }
  return S;
}

// -w * sum_j [S_jj - logsumexp_k S_jk]; accumulates dL/dS when dS != nullptr.
double infonce_rows(const std::vector<double>& S, size_t N, double w, std::vector<double>* dS) {
  double loss = 0.0;
  for (size_t j = 0; j < N; ++j) {
    const double* row = S.data() + j * N;
    double m = -std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < N; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (size_t k = 0; k < N; ++k) z += std::exp(row[k] - m);
    double lse = m + std::log(z);
    loss += -w * (row[j] - lse);
    if (dS) {
      for (size_t k = 0; k < N; ++k) {
        double p = std::exp(row[k] - m) / z;
        (*dS)[j * N + k] += -w * ((k == j ? 1.0 : 0.0) - p);
      }
    }
  }
  return loss;
}

// Same over columns (softmax over j for each fixed k).
double infonce_cols(const std::vector<double>& S, size_t N, double w, std::vector<double>* dS) {
  double loss = 0.0;
  for (size_t k = 0; k < N; ++k) {
    double m = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < N; ++j) m = std::max(m, S[j * N + k]);
    double z = 0.0;
    for (size_t j = 0; j < N; ++j) z += std::exp(S[j * N + k] - m);
    double lse = m + std::log(z);
    loss += -w * (S[k * N + k] - lse);
    if (dS) {
      for (size_t j = 0; j < N; ++j) {
        double p = std::exp(S[j * N + k] - m) / z;
        (*dS)[j * N + k] += -w * ((j == k ? 1.0 : 0.0) - p);
      }
    }
  }
  return loss;
}

// Scatters dL/dS into embedding gradients and the log-temperature gradient.
void scatter_sim_grad(const std::vector<double>& S, const std::vector<double>& dS,
                      const std::vector<Embedding>& A, const std::vector<Embedding>& B, double tau,
                      std::vector<Embedding>* dA, std::vector<Embedding>* dB, double* d_log_tau) {
  const size_t N = A.size();
  const size_t D = A.empty() ? 0 : A[0].size();
  double inv_tau = 1.0 / tau;
  for (size_t j = 0; j < N; ++j) {
    for (size_t k = 0; k < N; ++k) {
      double g = dS[j * N + k];
      if (g == 0.0) continue;
      for (size_t i = 0; i < D; ++i) {
        (*dA)[j][i] += g * inv_tau * B[k][i];
        (*dB)[k][i] += g * inv_tau * A[j][i];
      }
      *d_log_tau += -g * S[j * N + k];
    }
  }
}

void check_pair(const std::vector<Embedding>& A, const std::vector<Embedding>& B,
                const char* name) {
  if (A.empty()) throw std::invalid_argument(std::string(name) + ": batch must be nonempty");
  if (A.size() != B.size())
    throw std::invalid_argument(std::string(name) + ": embedding lists must have equal length");
}

}  // namespace

void LossConfig::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss config: lambdas must be >= 0");
  if (abl_alpha < 0.0) throw ConfigError("loss config: abl_alpha must be >= 0");
  if (abl_k < 0) throw ConfigError("loss config: abl_k must be >= 0");
}

double mmcl_loss(const std::vector<Embedding>& img_embs, const std::vector<Embedding>& txt_embs,
                 double tau) {
  check_pair(img_embs, txt_embs, "mmcl_loss");
  if (!(tau > 0.0)) throw std::invalid_argument("mmcl_loss: tau must be > 0");
  const size_t N = img_embs.size();
  std::vector<double> S = sim_matrix(img_embs, txt_embs, tau);
  double w = 1.0 / (2.0 * N);
  return infonce_rows(S, N, w, nullptr) + infonce_cols(S, N, w, nullptr);
}

double ssl_loss(const std::vector<Embedding>& img_embs, const std::vector<Embedding>& aug_img_embs,
                const std::vector<Embedding>& txt_embs, const std::vector<Embedding>& aug_txt_embs,
                double tau) {
  check_pair(img_embs, aug_img_embs, "ssl_loss");
  check_pair(txt_embs, aug_txt_embs, "ssl_loss");
  if (img_embs.size() != txt_embs.size())
    throw std::invalid_argument("ssl_loss: modality batches must have equal length");
  if (!(tau > 0.0)) throw std::invalid_argument("ssl_loss: tau must be > 0");
  const size_t N = img_embs.size();
  double w = 1.0 / (2.0 * N);
  std::vector<double> Si = sim_matrix(img_embs, aug_img_embs, tau);
  std::vector<double> St = sim_matrix(txt_embs, aug_txt_embs, tau);
  return infonce_rows(Si, N, w, nullptr) + infonce_rows(St, N, w, nullptr);
}

double cleanclip_loss(const std::vector<Embedding>& img_embs,
                      const std::vector<Embedding>& txt_embs,
                      const std::vector<Embedding>& aug_img_embs,
                      const std::vector<Embedding>& aug_txt_embs, double tau,
                      const LossConfig& cfg) {
  cfg.validate();
  double l1 = cfg.lambda1 != 0.0 ? mmcl_loss(img_embs, txt_embs, tau) : 0.0;
  double l2 = cfg.lambda2 != 0.0
                  ? ssl_loss(img_embs, aug_img_embs, txt_embs, aug_txt_embs, tau)
                  : 0.0;
  return cfg.lambda1 * l1 + cfg.lambda2 * l2;
}

double abl_loss(const std::vector<Embedding>& clean_img_embs,
                const std::vector<Embedding>& clean_txt_embs,
                const std::vector<Embedding>& poison_img_embs,
                const std::vector<Embedding>& poison_txt_embs, double tau, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("abl_loss: alpha must be >= 0");
  double loss = mmcl_loss(clean_img_embs, clean_txt_embs, tau);
  if (alpha > 0.0 && !poison_img_embs.empty()) {
    if (poison_img_embs.size() != poison_txt_embs.size())
      throw std::invalid_argument("abl_loss: poison embedding lists must have equal length");
    double penalty = 0.0;
    for (size_t i = 0; i < poison_img_embs.size(); ++i) {
      double c = dot(poison_img_embs[i], poison_txt_embs[i]);
      penalty += c * c;
    }
    loss += alpha * penalty / poison_img_embs.size();
  }
  return loss;
}

double supervised_ce_loss(const std::vector<double>& logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw std::invalid_argument("supervised_ce_loss: label out of range");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return -(logits[label] - m - std::log(z));
}

std::vector<double> supervised_ce_grad(const std::vector<double>& logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw std::invalid_argument("supervised_ce_grad: label out of range");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  std::vector<double> g(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) g[i] = std::exp(logits[i] - m) / z;
  g[label] -= 1.0;
  return g;
}

double MmclObjective::eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
                           const std::vector<Embedding>&, const std::vector<Embedding>&, double tau,
                           std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
                           std::vector<Embedding>*, std::vector<Embedding>*,
                           double* d_log_tau) const {
  check_pair(img, txt, "MmclObjective");
  const size_t N = img.size();
  std::vector<double> S = sim_matrix(img, txt, tau);
  std::vector<double> dS(N * N, 0.0);
  double w = 1.0 / (2.0 * N);
  double loss = infonce_rows(S, N, w, &dS) + infonce_cols(S, N, w, &dS);
  scatter_sim_grad(S, dS, img, txt, tau, d_img, d_txt, d_log_tau);
  return loss;
}

double SslObjective::eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
                          const std::vector<Embedding>& img2, const std::vector<Embedding>& txt2,
                          double tau, std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
                          std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
                          double* d_log_tau) const {
  check_pair(img, img2, "SslObjective");
  check_pair(txt, txt2, "SslObjective");
  const size_t N = img.size();
  double w = 1.0 / (2.0 * N);
  double loss = 0.0;
  {
    std::vector<double> S = sim_matrix(img, img2, tau);
    std::vector<double> dS(N * N, 0.0);
    loss += infonce_rows(S, N, w, &dS);
    scatter_sim_grad(S, dS, img, img2, tau, d_img, d_img2, d_log_tau);
  }
  {
    std::vector<double> S = sim_matrix(txt, txt2, tau);
    std::vector<double> dS(N * N, 0.0);
    loss += infonce_rows(S, N, w, &dS);
    scatter_sim_grad(S, dS, txt, txt2, tau, d_txt, d_txt2, d_log_tau);
  }
  return loss;
}

double CleanClipObjective::eval(const std::vector<Embedding>& img,
                                const std::vector<Embedding>& txt,
                                const std::vector<Embedding>& img2,
                                const std::vector<Embedding>& txt2, double tau,
                                std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
                                std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
                                double* d_log_tau) const {
  cfg.validate();
  double loss = 0.0;
  if (cfg.lambda1 != 0.0) {
    std::vector<Embedding> gi(img.size(), Embedding(img[0].size(), 0.0));
    std::vector<Embedding> gt(txt.size(), Embedding(txt[0].size(), 0.0));
    double dlt = 0.0;
    loss += cfg.lambda1 * MmclObjective{}.eval(img, txt, {}, {}, tau, &gi, &gt, nullptr, nullptr, &dlt);
    for (size_t i = 0; i < img.size(); ++i)
      for (size_t d = 0; d < gi[i].size(); ++d) (*d_img)[i][d] += cfg.lambda1 * gi[i][d];
    for (size_t i = 0; i < txt.size(); ++i)
      for (size_t d = 0; d < gt[i].size(); ++d) (*d_txt)[i][d] += cfg.lambda1 * gt[i][d];
    *d_log_tau += cfg.lambda1 * dlt;
  }
  if (cfg.lambda2 != 0.0) {
    std::vector<Embedding> gi(img.size(), Embedding(img[0].size(), 0.0));
    std::vector<Embedding> gt(txt.size(), Embedding(txt[0].size(), 0.0));
    std::vector<Embedding> gi2(img2.size(), Embedding(img[0].size(), 0.0));
    std::vector<Embedding> gt2(txt2.size(), Embedding(txt[0].size(), 0.0));
    double dlt = 0.0;
    loss += cfg.lambda2 *
            SslObjective{}.eval(img, txt, img2, txt2, tau, &gi, &gt, &gi2, &gt2, &dlt);
    for (size_t i = 0; i < img.size(); ++i)
      for (size_t d = 0; d < gi[i].size(); ++d) (*d_img)[i][d] += cfg.lambda2 * gi[i][d];
    for (size_t i = 0; i < txt.size(); ++i)
      for (size_t d = 0; d < gt[i].size(); ++d) (*d_txt)[i][d] += cfg.lambda2 * gt[i][d];
    for (size_t i = 0; i < img2.size(); ++i)
      for (size_t d = 0; d < gi2[i].size(); ++d) (*d_img2)[i][d] += cfg.lambda2 * gi2[i][d];
    for (size_t i = 0; i < txt2.size(); ++i)
      for (size_t d = 0; d < gt2[i].size(); ++d) (*d_txt2)[i][d] += cfg.lambda2 * gt2[i][d];
    *d_log_tau += cfg.lambda2 * dlt;
  }
  return loss;
}

double AblObjective::eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
                          const std::vector<Embedding>& img2, const std::vector<Embedding>& txt2,
                          double tau, std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
                          std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
                          double* d_log_tau) const {
  double loss = MmclObjective{}.eval(img, txt, {}, {}, tau, d_img, d_txt, nullptr, nullptr, d_log_tau);
  if (alpha > 0.0 && !img2.empty()) {
    const size_t M = img2.size();
    double penalty = 0.0;
    for (size_t i = 0; i < M; ++i) {
      double c = dot(img2[i], txt2[i]);
      penalty += c * c;
      double scale = alpha * 2.0 * c / M;
      for (size_t d = 0; d < img2[i].size(); ++d) {
        (*d_img2)[i][d] += scale * txt2[i][d];
        (*d_txt2)[i][d] += scale * img2[i][d];
      }
    }
    loss += alpha * penalty / M;
  }
  return loss;
}

}  // namespace cliplab
