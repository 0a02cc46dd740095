#pragma once

// Named-tensor plumbing and the parameter initialization policy.
//
// Each tensor is initialized from an rng seeded by (seed, tensor name), so a
// tensor's initial value depends only on the seed, its name and its shape.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "antrec/autodiff.hpp"

namespace antrec {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t tensor_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return splitmix64(seed ^ splitmix64(h));
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = rows.
template <class T>
Mat<T> init_fan_in(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, std::string_view name) {
  std::mt19937_64 rng(tensor_seed(seed, name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<T>(u(rng));
  return m;
}

/// N(0, 0.02^2), the embedding-table policy.
template <class T>
Mat<T> init_embedding(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, std::string_view name) {
  std::mt19937_64 rng(tensor_seed(seed, name));
  std::normal_distribution<double> n(0.0, 0.02);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<T>(n(rng));
  return m;
}

/// Flattened (name, tensor*) view used by the optimizer, checkpoints and the
/// gradient checker. Order is the structure's canonical visiting order.
template <class E>
using TensorRefs = std::vector<std::pair<std::string, E*>>;

template <class Tensors>
auto tensor_refs(Tensors& t) {
  using E = typename Tensors::element_type;
  TensorRefs<E> out;
  t.for_each([&](const std::string& name, E& e) { out.emplace_back(name, &e); });
  return out;
}

template <class Tensors>
auto tensor_refs(const Tensors& t) {
  using E = typename Tensors::element_type;
  TensorRefs<const E> out;
  t.for_each([&](const std::string& name, const E& e) { out.emplace_back(name, &e); });
  return out;
}

}  // namespace antrec
