#pragma once

#include "nodule_align/annotations.hpp"
#include "nodule_align/common.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace nodule_align {

/// How the per-instance attribute weights enter the image-attribute and class-attribute
/// objectives.
enum class AttributeWeighting {
  /// Cosine against w_m * A_m as written. Cosine similarity absorbs the positive scale,
  /// so the weights have no effect.
  cosine_inert,
  /// Cosine against A_m with log(w_m) added to the logit of attribute m.
  log_weight,
};

inline AttributeWeighting parse_attribute_weighting(std::string_view s) {
  if (s == "cosine_inert") return AttributeWeighting::cosine_inert;
  if (s == "log_weight") return AttributeWeighting::log_weight;
  throw ConfigError("attribute_weighting must be cosine_inert or log_weight, got '" + std::string(s) + "'");
}

inline std::string to_string(AttributeWeighting w) {
  return w == AttributeWeighting::cosine_inert ? "cosine_inert" : "log_weight";
}

class NonFiniteLoss : public RuntimeFailure {
public:
  using RuntimeFailure::RuntimeFailure;
};

/// Learnable temperature stored as log(tau), so tau > 0 holds structurally.
template <class S>
struct Temperature {
  S log_tau = static_cast<S>(std::log(0.07));

  static Temperature from_value(double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    return {static_cast<S>(std::log(tau))};
  }
  S value() const { return std::exp(log_tau); }
};

template <class S>
S cosine_sim(const RowVec<S>& u, const RowVec<S>& v) {
  const S nu = u.norm(), nv = v.norm();
  if (!(nu > S(0)) || !(nv > S(0))) throw ValidationError("cosine similarity of a zero vector");
  return u.dot(v) / (nu * nv);
}

/// Loss value with gradients w.r.t. both feature sets and log(tau).
template <class S>
struct AlignmentResult {
  S loss = 0;
  Mat<S> d_query;
  Mat<S> d_keys;
  S d_log_tau = 0;
};

namespace detail {

template <class S>
Mat<S> normalize_rows(const Mat<S>& X, Vec<S>& norms, const char* what) {
  norms = X.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r)
    if (!(norms(r) > S(0)) || !std::isfinite(static_cast<double>(norms(r))))
      throw ValidationError(std::string(what) + " row " + std::to_string(r) + " has zero or non-finite norm");
  return norms.asDiagonal().inverse() * X;
}

template <class S>
Mat<S> normalized_backward(const Mat<S>& Xn, const Vec<S>& norms, const Mat<S>& dXn) {
  const Vec<S> proj = (dXn.cwiseProduct(Xn)).rowwise().sum();
  return norms.asDiagonal().inverse() * (dXn - proj.asDiagonal() * Xn);
}

}  // namespace detail

/// loss = -sum_r sum_c target(r,c) * log softmax_c( cos(Q_r, K_c) / tau + bias_c ).
template <class S>
AlignmentResult<S> softmax_alignment(const Mat<S>& Q, const Mat<S>& K, const RowVec<S>& bias, const Mat<S>& target,
                                     S log_tau, bool with_grad = true) {
  if (Q.cols() != K.cols()) throw ValidationError("feature widths differ");
  Vec<S> qn, kn;
  const Mat<S> Qn = detail::normalize_rows(Q, qn, "query");
  const Mat<S> Kn = detail::normalize_rows(K, kn, "key");
  const S tau = std::exp(log_tau);
  const Mat<S> sim = Qn * Kn.transpose();
  Mat<S> logits = sim / tau;
  if (bias.size() > 0) logits.rowwise() += bias;
  if (!logits.allFinite()) throw NonFiniteLoss("non-finite similarity logits");
  const Vec<S> top = logits.rowwise().maxCoeff();
  Mat<S> shifted = logits.colwise() - top;
  const Vec<S> lse = shifted.array().exp().rowwise().sum().log().matrix();
  const Mat<S> logp = shifted.colwise() - lse;

  AlignmentResult<S> out;
  out.loss = -(target.cwiseProduct(logp)).sum();
  if (!with_grad) return out;
  const Mat<S> p = logp.array().exp().matrix();
  const Vec<S> mass = target.rowwise().sum();
  const Mat<S> d_logits = mass.asDiagonal() * p - target;
  const Mat<S> d_sim = d_logits / tau;
  out.d_query = detail::normalized_backward(Qn, qn, Mat<S>(d_sim * Kn));
  out.d_keys = detail::normalized_backward(Kn, kn, Mat<S>(d_sim.transpose() * Qn));
  out.d_log_tau = -(d_logits.cwiseProduct(sim)).sum() / tau;
  return out;
}

/// Per-group cross-entropy of F against the class features, summed over the T groups.
template <class S>
AlignmentResult<S> image_class_loss(const Mat<S>& F, const Mat<S>& C, int y, S log_tau, bool with_grad = true) {
  if (y < 0 || y >= C.rows())
    throw ValidationError("class index " + std::to_string(y) + " outside 0.." + std::to_string(C.rows() - 1));
  Mat<S> target = Mat<S>::Zero(F.rows(), C.rows());
  target.col(y).setOnes();
  return softmax_alignment<S>(F, C, RowVec<S>(), target, log_tau, with_grad);
}

namespace detail {

template <class S>
AlignmentResult<S> attribute_alignment(const Mat<S>& Q, const Mat<S>& A, const AttributeWeights& w, S log_tau,
                                       AttributeWeighting mode, bool with_grad) {
  if (A.rows() != kAttributeCount)
    throw ValidationError("attribute features must have 8 rows, got " + std::to_string(A.rows()));
  const Mat<S> target = Mat<S>::Ones(Q.rows(), A.rows());
  if (mode == AttributeWeighting::log_weight) {
    RowVec<S> bias(A.rows());
    for (int m = 0; m < kAttributeCount; ++m) bias(m) = static_cast<S>(std::log(w[m]));
    return softmax_alignment<S>(Q, A, bias, target, log_tau, with_grad);
  }
  Vec<S> wv(A.rows());
  for (int m = 0; m < kAttributeCount; ++m) wv(m) = static_cast<S>(w[m]);
  const Mat<S> weighted = wv.asDiagonal() * A;
  auto r = softmax_alignment<S>(Q, weighted, RowVec<S>(), target, log_tau, with_grad);
  if (with_grad) r.d_keys = wv.asDiagonal() * r.d_keys;
  return r;
}

}  // namespace detail

/// InfoNCE between every group feature F_t and every (weighted) attribute feature.
template <class S>
AlignmentResult<S> image_attribute_loss(const Mat<S>& F, const Mat<S>& A, const AttributeWeights& w, S log_tau,
                                        AttributeWeighting mode = AttributeWeighting::log_weight,
                                        bool with_grad = true) {
  return detail::attribute_alignment(F, A, w, log_tau, mode, with_grad);
}

/// Same structure as the image-attribute loss with class features as queries.
template <class S>
AlignmentResult<S> class_attribute_loss(const Mat<S>& C, const Mat<S>& A, const AttributeWeights& w, S log_tau,
                                        AttributeWeighting mode = AttributeWeighting::log_weight,
                                        bool with_grad = true) {
  return detail::attribute_alignment(C, A, w, log_tau, mode, with_grad);
}

/// Softmax cross-entropy of one logit row; gradient is written to `d_logits` if given.
template <class S>
S cross_entropy(const RowVec<S>& logits, int y, RowVec<S>* d_logits = nullptr) {
  if (y < 0 || y >= logits.size()) throw ValidationError("label outside the classifier range");
  const S top = logits.maxCoeff();
  const RowVec<S> e = (logits.array() - top).exp().matrix();
  const S z = e.sum();
  if (d_logits) {
    *d_logits = e / z;
    (*d_logits)(y) -= S(1);
  }
  return -(logits(y) - top - std::log(z));
}

struct LossBreakdown {
  double ce = 0, ic = 0, ia = 0, ca = 0, total = 0;
  double alpha = 1.0, beta = 0.5;
};

/// total = ce + ic + alpha * ia + beta * ca.
inline LossBreakdown total_loss(double ce, double ic, double ia, double ca, double alpha = 1.0, double beta = 0.5) {
  const std::pair<const char*, double> parts[] = {{"ce", ce}, {"ic", ic}, {"ia", ia}, {"ca", ca}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite loss component ") + name + " = " + std::to_string(v));
  return {ce, ic, ia, ca, ce + ic + alpha * ia + beta * ca, alpha, beta};
}

/// Mean over instances, component by component.
inline LossBreakdown batch_mean(std::span<const LossBreakdown> items) {
  if (items.empty()) throw ValidationError("empty batch");
  LossBreakdown m;
  m.alpha = items.front().alpha;
  m.beta = items.front().beta;
  for (const auto& l : items) {
    m.ce += l.ce;
    m.ic += l.ic;
    m.ia += l.ia;
    m.ca += l.ca;
    m.total += l.total;
  }
  const double n = static_cast<double>(items.size());
  m.ce /= n;
  m.ic /= n;
  m.ia /= n;
  m.ca /= n;
  m.total /= n;
  return m;
}

}  // namespace nodule_align
