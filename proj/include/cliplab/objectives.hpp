#pragma once

#include <vector>

#include "cliplab/model.hpp"

namespace cliplab {

struct LossConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double abl_alpha = 1.0;
  int abl_k = 0;  // 0: ceil(0.0033 * |corpus|) at use site

  void validate() const;
};

// Value-only forms over unit embeddings.
double mmcl_loss(const std::vector<Embedding>& img_embs, const std::vector<Embedding>& txt_embs,
                 double tau);
double ssl_loss(const std::vector<Embedding>& img_embs, const std::vector<Embedding>& aug_img_embs,
                const std::vector<Embedding>& txt_embs, const std::vector<Embedding>& aug_txt_embs,
                double tau);
double cleanclip_loss(const std::vector<Embedding>& img_embs,
                      const std::vector<Embedding>& txt_embs,
                      const std::vector<Embedding>& aug_img_embs,
                      const std::vector<Embedding>& aug_txt_embs, double tau,
                      const LossConfig& cfg);
double abl_loss(const std::vector<Embedding>& clean_img_embs,
                const std::vector<Embedding>& clean_txt_embs,
                const std::vector<Embedding>& poison_img_embs,
                const std::vector<Embedding>& poison_txt_embs, double tau, double alpha);
double supervised_ce_loss(const std::vector<double>& logits, int label);
// d(loss)/d(logits): softmax(logits) - one_hot(label)
std::vector<double> supervised_ce_grad(const std::vector<double>& logits, int label);

// Differentiable batch objectives (see BatchInputs for the view mapping).
struct MmclObjective : BatchLossFn {
  double eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
              const std::vector<Embedding>& img2, const std::vector<Embedding>& txt2, double tau,
              std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
              std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
              double* d_log_tau) const override;
};

struct SslObjective : BatchLossFn {
  double eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
              const std::vector<Embedding>& img2, const std::vector<Embedding>& txt2, double tau,
              std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
              std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
              double* d_log_tau) const override;
};

struct CleanClipObjective : BatchLossFn {
  LossConfig cfg;
  explicit CleanClipObjective(const LossConfig& c) : cfg(c) {}
  double eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
              const std::vector<Embedding>& img2, const std::vector<Embedding>& txt2, double tau,
              std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
              std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
              double* d_log_tau) const override;
};

// img2/txt2 carry the detected-poison pairs.
struct AblObjective : BatchLossFn {
  double alpha = 1.0;
  explicit AblObjective(double a) : alpha(a) {}
  double eval(const std::vector<Embedding>& img, const std::vector<Embedding>& txt,
              const std::vector<Embedding>& img2, const std::vector<Embedding>& txt2, double tau,
              std::vector<Embedding>* d_img, std::vector<Embedding>* d_txt,
              std::vector<Embedding>* d_img2, std::vector<Embedding>* d_txt2,
              double* d_log_tau) const override;
};

}  // namespace cliplab
