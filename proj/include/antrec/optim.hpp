#pragma once

#include <cmath>
#include <cstdint>

#include "antrec/autodiff.hpp"
#include "antrec/error.hpp"

namespace antrec {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  Mat<T> m;
  Mat<T> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update in place.
template <class T>
void adam_step(Mat<T>& param, const Mat<T>& grad, AdamState<T>& state, const AdamConfig& cfg) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) throw ValidationError("adam_step: gradient shape mismatch");
  if (!grad.allFinite()) throw NumericError("adam_step: non-finite gradient");
  if (state.t == 0) {
    state.m = Mat<T>::Zero(param.rows(), param.cols());
    state.v = Mat<T>::Zero(param.rows(), param.cols());
  }
  ++state.t;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  state.m = b1 * state.m + (T(1) - b1) * grad;
  state.v = b2 * state.v + (T(1) - b2) * grad.cwiseProduct(grad);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.t)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)));
  const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.eps);
  param.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + eps);
}

}  // namespace antrec
