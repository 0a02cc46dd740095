#pragma once

// Softmax objectives over cosine similarities scaled by a temperature:
// next-item recommendation loss and text-image alignment regularizer.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "antrec/autodiff.hpp"
#include "antrec/error.hpp"

namespace antrec {

struct LossBreakdown {
  double rec_loss = 0.0;
  double align_reg = 0.0;
  double total = 0.0;
  std::vector<double> per_instance_p;
  std::vector<double> per_item_q;
};

inline void check_tau(double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0,1]");
}

/// Temperature-scaled cosine logits: normalize(a) normalize(b)^T / tau.
template <class T>
ad::Var<T> cosine_logits(const ad::Var<T>& a, const ad::Var<T>& b, double tau) {
  check_tau(tau);
  return ad::scale(ad::matmul_nt(ad::l2_normalize_rows(a), ad::l2_normalize_rows(b)), static_cast<T>(1.0 / tau));
}

/// Softmax probability of each row's target column.
template <class T>
std::vector<double> target_probabilities(const Mat<T>& logits, std::span<const std::size_t> targets) {
  std::vector<double> p(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(i)).template cast<double>();
    const double m = row.maxCoeff();
    const double denom = (row.array() - m).exp().sum();
    p[i] = std::exp(row(static_cast<Eigen::Index>(targets[i])) - m) / denom;
  }
  return p;
}

/// -sum_j log p_j with p_j the softmax of cos(pref_j, item)/tau over all
/// candidate rows, evaluated at row targets[j].
template <class T>
ad::Var<T> recommendation_loss(const ad::Var<T>& preferences, const ad::Var<T>& candidates,
                               std::span<const std::size_t> targets, double tau) {
  if (static_cast<Eigen::Index>(targets.size()) != preferences.rows())
    throw ValidationError("recommendation_loss: one target per preference row required");
  for (std::size_t t : targets)
    if (t >= static_cast<std::size_t>(candidates.rows())) throw ValidationError("recommendation_loss: target not in candidate table");
  return ad::softmax_cross_entropy(cosine_logits(preferences, candidates, tau), targets);
}

/// Image i anchors against every text: -sum_i log softmax_i'(cos(image_i, text_i')/tau)[i].
template <class T>
ad::Var<T> alignment_regularizer(const ad::Var<T>& text, const ad::Var<T>& image, double tau) {
  if (text.rows() != image.rows()) throw ValidationError("alignment_regularizer: text and image tables differ in size");
  std::vector<std::size_t> diag(static_cast<std::size_t>(text.rows()));
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  return ad::softmax_cross_entropy(cosine_logits(image, text, tau), diag);
}

inline double pretrain_objective(double rec_loss, double align_reg, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  return rec_loss + lambda * align_reg;
}

// Plain-matrix entry points returning the loss and the per-row probabilities.

template <class T>
std::pair<double, std::vector<double>> recommendation_loss(const Mat<T>& preferences, const Mat<T>& candidates,
                                                           std::span<const std::size_t> targets, double tau) {
  ad::Tape<T> tape;
  const auto pv = tape.constant(preferences);
  const auto cv = tape.constant(candidates);
  const auto loss = recommendation_loss(pv, cv, targets, tau);
  const auto logits = cosine_logits(pv, cv, tau);
  return {static_cast<double>(loss.value()(0, 0)), target_probabilities(logits.value(), targets)};
}

template <class T>
std::pair<double, std::vector<double>> alignment_regularizer(const Mat<T>& text, const Mat<T>& image, double tau) {
  ad::Tape<T> tape;
  const auto tv = tape.constant(text);
  const auto iv = tape.constant(image);
  const auto reg = alignment_regularizer(tv, iv, tau);
  std::vector<std::size_t> diag(static_cast<std::size_t>(text.rows()));
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  return {static_cast<double>(reg.value()(0, 0)), target_probabilities(cosine_logits(iv, tv, tau).value(), diag)};
}

}  // namespace antrec
