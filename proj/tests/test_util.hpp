#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "antrec/autodiff.hpp"

namespace antrec::testing {

inline Mat<double> random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

/// Builds f on a fresh tape with every input as a variable; returns the
/// largest |analytic - central difference| / max(|a|, |n|, 1e-8).
inline double max_gradient_error(
    std::vector<Mat<double>> inputs,
    const std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>& f, double h = 1e-6,
    double floor = 1e-8, std::size_t* worst_input = nullptr) {
  std::vector<Mat<double>> analytic;
  {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    auto out = f(tape, vars);
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad().size() ? v.grad() : Mat<double>::Zero(v.rows(), v.cols()));
  }
  auto eval = [&] {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.constant(x));
    return f(tape, vars).value()(0, 0);
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      double& x = inputs[k].data()[i];
      const double keep = x;
      x = keep + h;
      const double up = eval();
      x = keep - h;
      const double down = eval();
      x = keep;
      const double num = (up - down) / (2 * h);
      const double a = analytic[k].data()[i];
      const double e = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      if (worst_input && e > worst) *worst_input = k;
      worst = std::max(worst, e);
    }
  }
  return worst;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("antrec_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace antrec::testing
