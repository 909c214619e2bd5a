// Contextual InfoNCE, auxiliary predictor MSE and their weighted sum, each
// returning the gradient with respect to its inputs.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxssl/error.hpp"
#include "ctxssl/model.hpp"

namespace ctxssl {

struct LossConfig {
  double tau = 0.5;
  double lambda = 1.0;
  bool symmetric = true;

  void validate() const {
    require(tau > 0.0, ErrorKind::Config, "tau must be positive");
    require(lambda >= 0.0, ErrorKind::Config, "lambda must be non-negative");
  }
};

struct LossBreakdown {
  double contrastive = 0.0;
  double predictor = 0.0;
  double total = 0.0;
  std::vector<double> per_index;  // contrastive term per context index
};

inline LossBreakdown total_loss(double contrastive, double predictor, double lambda) {
  require(std::isfinite(contrastive) && std::isfinite(predictor), ErrorKind::Numeric,
          "non-finite loss component");
  LossBreakdown b;
  b.contrastive = contrastive;
  b.predictor = predictor;
  b.total = contrastive + lambda * predictor;
  return b;
}

template <typename T>
struct InfoNceResult {
  T loss = 0;              // mean of the per-index terms
  std::vector<T> terms;    // -log softmax at the positive, per anchor
  Mat<T> d_anchor, d_target;  // gradients of `loss`
};

/// Anchor i's positive is target i; the other K-1 targets of the same
/// sequence are its negatives. Inputs are unit vectors.
template <typename T>
InfoNceResult<T> info_nce_contextual(const Mat<T>& anchors, const Mat<T>& targets, T tau) {
  const Eigen::Index K = anchors.rows();
  require(K >= 2, ErrorKind::Config, "InfoNCE needs at least two pairs (one negative)");
  require(targets.rows() == K && targets.cols() == anchors.cols(), ErrorKind::Shape,
          "InfoNCE anchor/target shape mismatch");
  require(tau > T(0), ErrorKind::Config, "tau must be positive");
  for (Eigen::Index i = 0; i < K; ++i)
    require(anchors.row(i).norm() > T(0) && targets.row(i).norm() > T(0), ErrorKind::Numeric,
            "zero-norm embedding in InfoNCE");

  InfoNceResult<T> r;
  const Mat<T> logits = anchors * targets.transpose() / tau;
  Mat<T> dlogits(K, K);
  r.terms.resize(static_cast<std::size_t>(K));
  T sum = 0;
  for (Eigen::Index i = 0; i < K; ++i) {
    const T mx = logits.row(i).maxCoeff();
    T denom = 0;
    for (Eigen::Index j = 0; j < K; ++j) denom += std::exp(logits(i, j) - mx);
    const T lse = mx + std::log(denom);
    const T term = lse - logits(i, i);
    r.terms[static_cast<std::size_t>(i)] = term;
    sum += term;
    for (Eigen::Index j = 0; j < K; ++j)
      dlogits(i, j) = (std::exp(logits(i, j) - lse) - (i == j ? T(1) : T(0))) / static_cast<T>(K);
  }
  r.loss = sum / static_cast<T>(K);
  r.d_anchor = dlogits * targets / tau;
  r.d_target = dlogits.transpose() * anchors / tau;
  return r;
}

template <typename T>
struct SymmetricResult {
  T loss = 0;
  std::vector<T> terms;
  Mat<T> d_x, d_y;  // gradients w.r.t. the (x|a) and y embeddings
};

/// Mean of the (x|a)-anchored and y-anchored InfoNCE losses; forward-only
/// when `symmetric` is false.
template <typename T>
SymmetricResult<T> symmetric_contrastive(const Mat<T>& x_embs, const Mat<T>& y_embs, T tau,
                                         bool symmetric) {
  SymmetricResult<T> r;
  auto fwd = info_nce_contextual<T>(x_embs, y_embs, tau);
  if (!symmetric) {
    r.loss = fwd.loss;
    r.terms = std::move(fwd.terms);
    r.d_x = std::move(fwd.d_anchor);
    r.d_y = std::move(fwd.d_target);
    return r;
  }
  auto bwd = info_nce_contextual<T>(y_embs, x_embs, tau);
  r.loss = (fwd.loss + bwd.loss) / T(2);
  r.terms.resize(fwd.terms.size());
  for (std::size_t i = 0; i < fwd.terms.size(); ++i) r.terms[i] = (fwd.terms[i] + bwd.terms[i]) / T(2);
  r.d_x = (fwd.d_anchor + bwd.d_target) / T(2);
  r.d_y = (fwd.d_target + bwd.d_anchor) / T(2);
  return r;
}

template <typename T>
struct MseResult {
  T loss = 0;
  Mat<T> d_pred;
  std::size_t count = 0;  // supervised entries
};

/// Mean squared error over entries where `mask` is set (one mask row per
/// predicted row). Returns 0 with zero gradient when nothing is supervised.
template <typename T>
MseResult<T> predictor_mse(const Mat<T>& pred, const Mat<T>& truth,
                           const std::vector<std::vector<std::uint8_t>>& mask) {
  require(pred.rows() == truth.rows() && pred.cols() == truth.cols(), ErrorKind::Shape,
          "predictor_mse shape mismatch");
  require(static_cast<Eigen::Index>(mask.size()) == pred.rows(), ErrorKind::Shape,
          "predictor_mse mask row count mismatch");
  MseResult<T> r;
  r.d_pred = Mat<T>::Zero(pred.rows(), pred.cols());
  T sum = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    require(static_cast<Eigen::Index>(mask[static_cast<std::size_t>(i)].size()) == pred.cols(),
            ErrorKind::Shape, "predictor_mse mask width mismatch");
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      require(!std::isnan(pred(i, j)) && !std::isnan(truth(i, j)), ErrorKind::Numeric,
              "NaN in predictor_mse input");
      if (!mask[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) continue;
      const T e = pred(i, j) - truth(i, j);
      sum += e * e;
      r.d_pred(i, j) = e;
      ++r.count;
    }
  }
  if (r.count == 0) return r;
  r.loss = sum / static_cast<T>(r.count);
  r.d_pred *= T(2) / static_cast<T>(r.count);
  return r;
}

/// Unmasked convenience overload: mean over every entry.
template <typename T>
T predictor_mse(const Mat<T>& pred, const Mat<T>& truth) {
  std::vector<std::vector<std::uint8_t>> mask(static_cast<std::size_t>(pred.rows()),
                                              std::vector<std::uint8_t>(static_cast<std::size_t>(pred.cols()), 1));
  return predictor_mse<T>(pred, truth, mask).loss;
}

}  // namespace ctxssl
