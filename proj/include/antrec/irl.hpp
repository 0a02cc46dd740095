#pragma once

// Item representation learning: turns an item's raw text embedding, image
// embedding and price into one comprehensive item embedding.
//
//   price      -> sinusoidal encoding (d_p)
//   per head k -> (v - b_k) W_k for text/image, v W_k + b_k for price
//   routing    -> softmax(alpha) over heads, alpha ~ N(v B, softplus(v U)^2)
//   item       =  z_text + z_image + z_price + beta * (z_text (.) z_image)

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antrec/autodiff.hpp"
#include "antrec/dataio.hpp"
#include "antrec/error.hpp"
#include "antrec/params.hpp"

namespace antrec {

enum class RoutingMode { sample, mean };

inline std::string to_string(RoutingMode m) { return m == RoutingMode::sample ? "sample" : "mean"; }

inline RoutingMode parse_routing(const std::string& s) {
  if (s == "sample") return RoutingMode::sample;
  if (s == "mean") return RoutingMode::mean;
  throw ConfigError("routing must be 'sample' or 'mean', got '" + s + "'");
}

struct IrlConfig {
  std::size_t d = 256;
  std::size_t n_h = 8;
  std::size_t d_p = 64;
  double omega = 50000.0;
  double beta = 0.1;
  double price_norm_max = 100.0;
  bool zero_text = false;
  bool zero_image = false;
  bool zero_price = false;
  bool zero_fusion = false;
  bool linear_routing = false;

  void validate() const {
    if (d < 1 || n_h < 1 || d_p < 1) throw ConfigError("irl: d, n_h and d_p must be >= 1");
    if (d_p % 2 != 0) throw ConfigError("irl: d_p must be even");
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("irl: beta must lie in (0,1)");
    if (!(omega > 0.0)) throw ConfigError("irl: omega must be > 0");
    if (!(price_norm_max > 0.0)) throw ConfigError("irl: price_norm_max must be > 0");
  }
};

/// Affine map of raw prices onto [0, ceiling], frozen from the pre-training
/// item union and reused on the target task. Out-of-range prices clamp.
struct PriceNorm {
  double min = 0.0;
  double max = 100.0;

  double apply(double price, double ceiling) const {
    if (!std::isfinite(price)) throw ValidationError("price must be finite");
    const double span = max - min;
    const double v = span > 0 ? ceiling * (price - min) / span : 0.0;
    return std::clamp(v, 0.0, ceiling);
  }

  static PriceNorm fit(const std::vector<const TaskDataset*>& tasks) {
    PriceNorm n{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto* t : tasks)
      for (const auto& [_, rec] : t->items) {
        n.min = std::min(n.min, rec.price);
        n.max = std::max(n.max, rec.price);
      }
    if (!std::isfinite(n.min)) return PriceNorm{};
    return n;
  }

  bool operator==(const PriceNorm&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <class E>
struct ModalityTensors {
  std::vector<E> shift;  // whitening shift (text/image) or projection bias (price)
  std::vector<E> proj;
  E route_mean{};
  E route_std{};

  template <class F>
  void visit(const std::string& prefix, const char* shift_name, F&& f) {
    for (std::size_t k = 0; k < proj.size(); ++k) {
      f(prefix + "." + shift_name + "." + std::to_string(k), shift[k]);
      f(prefix + ".proj." + std::to_string(k), proj[k]);
    }
    f(prefix + ".route_mean", route_mean);
    f(prefix + ".route_std", route_std);
  }
  template <class F>
  void visit(const std::string& prefix, const char* shift_name, F&& f) const {
    for (std::size_t k = 0; k < proj.size(); ++k) {
      f(prefix + "." + shift_name + "." + std::to_string(k), shift[k]);
      f(prefix + ".proj." + std::to_string(k), proj[k]);
    }
    f(prefix + ".route_mean", route_mean);
    f(prefix + ".route_std", route_std);
  }

  template <class E2>
  ModalityTensors<E2> with_element() const {
    ModalityTensors<E2> m;
    m.shift.resize(shift.size());
    m.proj.resize(proj.size());
    return m;
  }
};

template <class E>
struct IrlTensors {
  using element_type = E;
  ModalityTensors<E> text, image, price;

  template <class F>
  void for_each(F&& f) {
    text.visit("irl.text", "shift", f);
    image.visit("irl.image", "shift", f);
    price.visit("irl.price", "bias", f);
  }
  template <class F>
  void for_each(F&& f) const {
    text.visit("irl.text", "shift", f);
    image.visit("irl.image", "shift", f);
    price.visit("irl.price", "bias", f);
  }

  template <class E2>
  IrlTensors<E2> with_element() const {
    return IrlTensors<E2>{text.template with_element<E2>(), image.template with_element<E2>(),
                          price.template with_element<E2>()};
  }
};

template <class T>
using IrlParams = IrlTensors<Mat<T>>;

/// Fresh parameters: projections and routing matrices fan-in uniform, shifts
/// and biases zero.
template <class T>
IrlParams<T> init_irl(const IrlConfig& cfg, std::size_t d_text, std::size_t d_image, std::uint64_t seed) {
  cfg.validate();
  IrlParams<T> p;
  auto fill = [&](ModalityTensors<Mat<T>>& m, const std::string& prefix, std::size_t dx, bool shift_is_input_side) {
    const auto rows = static_cast<Eigen::Index>(dx);
    const auto d = static_cast<Eigen::Index>(cfg.d);
    for (std::size_t k = 0; k < cfg.n_h; ++k) {
      const auto ks = std::to_string(k);
      m.shift.push_back(Mat<T>::Zero(1, shift_is_input_side ? rows : d));
      m.proj.push_back(init_fan_in<T>(rows, d, seed, prefix + ".proj." + ks));
    }
    m.route_mean = init_fan_in<T>(rows, static_cast<Eigen::Index>(cfg.n_h), seed, prefix + ".route_mean");
    m.route_std = init_fan_in<T>(rows, static_cast<Eigen::Index>(cfg.n_h), seed, prefix + ".route_std");
  };
  fill(p.text, "irl.text", d_text, true);
  fill(p.image, "irl.image", d_image, true);
  fill(p.price, "irl.price", cfg.d_p, false);
  return p;
}

// ---------------------------------------------------------------------------
// Elementary operations on row vectors

/// Sinusoidal price encoding: entries 2j, 2j+1 are sin/cos(omega^(-2j/d_p) * price).
template <class T = double>
Mat<T> encode_price(double price, std::size_t d_p, double omega) {
  if (d_p % 2 != 0) throw ConfigError("encode_price: d_p must be even");
  if (!std::isfinite(price)) throw ValidationError("encode_price: price must be finite");
  Mat<T> out(1, static_cast<Eigen::Index>(d_p));
  for (std::size_t j = 0; j < d_p / 2; ++j) {
    const double freq = std::pow(omega, -2.0 * static_cast<double>(j) / static_cast<double>(d_p));
    out(0, static_cast<Eigen::Index>(2 * j)) = static_cast<T>(std::sin(freq * price));
    out(0, static_cast<Eigen::Index>(2 * j + 1)) = static_cast<T>(std::cos(freq * price));
  }
  return out;
}

/// (v - shift) W
template <class T>
Mat<T> whiten_project(const Mat<T>& v, const Mat<T>& shift, const Mat<T>& w) {
  if (v.cols() != shift.cols() || shift.rows() != 1 || v.cols() != w.rows())
    throw ValidationError("whiten_project: shape mismatch");
  return (v.rowwise() - shift.row(0)) * w;
}

/// v W + bias
template <class T>
Mat<T> linear_project(const Mat<T>& v, const Mat<T>& w, const Mat<T>& bias) {
  if (v.cols() != w.rows() || bias.rows() != 1 || bias.cols() != w.cols())
    throw ValidationError("linear_project: shape mismatch");
  Mat<T> out = v * w;
  out.rowwise() += bias.row(0);
  return out;
}

template <class T>
Mat<T> fuse(const Mat<T>& text, const Mat<T>& image) {
  if (text.rows() != image.rows() || text.cols() != image.cols()) throw ValidationError("fuse: shape mismatch");
  return text.cwiseProduct(image);
}

// ---------------------------------------------------------------------------
// Differentiable forward

template <class T>
struct RouteVars {
  ad::Var<T> output;   // N x d
  ad::Var<T> weights;  // N x n_h, rows on the simplex
};

/// Gaussian routing over n_h projected heads. In sample mode the logits are
/// mean + std * eps with eps ~ N(0,1) drawn from rng (reparameterized).
template <class T>
RouteVars<T> gaussian_route(const ad::Var<T>& raw, const std::vector<ad::Var<T>>& heads, const ad::Var<T>& route_mean,
                            const ad::Var<T>& route_std, RoutingMode mode, std::mt19937_64* rng) {
  if (heads.empty()) throw ValidationError("gaussian_route: need at least one head");
  if (route_mean.cols() != static_cast<Eigen::Index>(heads.size()) || route_std.cols() != route_mean.cols())
    throw ValidationError("gaussian_route: routing matrices must have one column per head");
  for (const auto& h : heads)
    if (h.rows() != raw.rows() || h.cols() != heads[0].cols()) throw ValidationError("gaussian_route: head shape mismatch");
  ad::Tape<T>& tape = *raw.tape();
  ad::Var<T> alpha = ad::matmul(raw, route_mean);
  if (mode == RoutingMode::sample) {
    if (rng == nullptr) throw ValidationError("gaussian_route: sample mode needs an rng");
    const ad::Var<T> sigma = ad::softplus(ad::matmul(raw, route_std));
    std::normal_distribution<double> n(0.0, 1.0);
    Mat<T> eps(alpha.rows(), alpha.cols());
    for (Eigen::Index i = 0; i < eps.rows(); ++i)
      for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = static_cast<T>(n(*rng));
    alpha = ad::add(alpha, ad::hadamard(sigma, tape.constant(std::move(eps))));
  }
  const ad::Var<T> w = ad::softmax_rows(alpha);
  ad::Var<T> out = ad::mul_col(heads[0], ad::slice_cols(w, 0, 1));
  for (std::size_t k = 1; k < heads.size(); ++k)
    out = ad::add(out, ad::mul_col(heads[k], ad::slice_cols(w, static_cast<Eigen::Index>(k), 1)));
  return {out, w};
}

/// Raw per-item inputs of a batch of items: N x d_text, N x d_image and the
/// N x d_p price encodings.
template <class T>
struct ItemFeatures {
  Mat<T> text;
  Mat<T> image;
  Mat<T> price;

  Eigen::Index size() const { return text.rows(); }
};

template <class T>
ItemFeatures<T> item_features(const std::vector<const ItemRecord*>& items, const IrlConfig& cfg, const PriceNorm& norm) {
  if (items.empty()) throw ValidationError("item_features: empty item list");
  const auto n = static_cast<Eigen::Index>(items.size());
  const auto dt = static_cast<Eigen::Index>(items[0]->text_emb.size());
  const auto dm = static_cast<Eigen::Index>(items[0]->image_emb.size());
  ItemFeatures<T> f{Mat<T>(n, dt), Mat<T>(n, dm), Mat<T>(n, static_cast<Eigen::Index>(cfg.d_p))};
  for (Eigen::Index i = 0; i < n; ++i) {
    const ItemRecord& r = *items[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(r.text_emb.size()) != dt || static_cast<Eigen::Index>(r.image_emb.size()) != dm)
      throw ValidationError("item " + std::to_string(r.item_id) + ": modality dimension mismatch");
    for (Eigen::Index j = 0; j < dt; ++j) f.text(i, j) = static_cast<T>(r.text_emb[static_cast<std::size_t>(j)]);
    for (Eigen::Index j = 0; j < dm; ++j) f.image(i, j) = static_cast<T>(r.image_emb[static_cast<std::size_t>(j)]);
    f.price.row(i) = encode_price<T>(norm.apply(r.price, cfg.price_norm_max), cfg.d_p, cfg.omega);
  }
  return f;
}

template <class T>
struct IrlVars {
  ad::Var<T> text;   // transformed text embedding per item
  ad::Var<T> image;
  ad::Var<T> price;
  ad::Var<T> fused;
  ad::Var<T> item;   // comprehensive item embedding
  // Routing weights per modality; invalid under linear routing or when zeroed.
  ad::Var<T> text_weights, image_weights, price_weights;
};

namespace detail {

template <class T>
RouteVars<T> modality_forward(ad::Tape<T>& tape, const ModalityTensors<ad::Var<T>>& m, const Mat<T>& raw_value,
                              bool whitening, const IrlConfig& cfg, RoutingMode mode, std::mt19937_64* rng) {
  const ad::Var<T> raw = tape.constant(raw_value);
  if (m.proj.empty() || raw.cols() != m.proj[0].rows()) throw ValidationError("irl: modality input dimension mismatch");
  const std::size_t n_heads = cfg.linear_routing ? 1 : m.proj.size();
  std::vector<ad::Var<T>> heads;
  heads.reserve(n_heads);
  for (std::size_t k = 0; k < n_heads; ++k)
    heads.push_back(whitening ? ad::matmul(ad::sub_row(raw, m.shift[k]), m.proj[k])
                              : ad::add_row(ad::matmul(raw, m.proj[k]), m.shift[k]));
  if (cfg.linear_routing) return {heads[0], ad::Var<T>()};
  return gaussian_route(raw, heads, m.route_mean, m.route_std, mode, rng);
}

}  // namespace detail

/// Builds the item-embedding graph for every row of `features`.
template <class T>
IrlVars<T> irl_forward(ad::Tape<T>& tape, const IrlTensors<ad::Var<T>>& p, const ItemFeatures<T>& features,
                       const IrlConfig& cfg, RoutingMode mode, std::mt19937_64* rng) {
  const Eigen::Index n = features.size();
  const auto d = static_cast<Eigen::Index>(cfg.d);
  auto zero = [&] { return tape.constant(Mat<T>::Zero(n, d)); };
  IrlVars<T> out;
  if (cfg.zero_text) {
    out.text = zero();
  } else {
    auto r = detail::modality_forward(tape, p.text, features.text, true, cfg, mode, rng);
    out.text = r.output;
    out.text_weights = r.weights;
  }
  if (cfg.zero_image) {
    out.image = zero();
  } else {
    auto r = detail::modality_forward(tape, p.image, features.image, true, cfg, mode, rng);
    out.image = r.output;
    out.image_weights = r.weights;
  }
  if (cfg.zero_price) {
    out.price = zero();
  } else {
    auto r = detail::modality_forward(tape, p.price, features.price, false, cfg, mode, rng);
    out.price = r.output;
    out.price_weights = r.weights;
  }
  out.fused = (cfg.zero_fusion || cfg.zero_text || cfg.zero_image) ? zero() : ad::hadamard(out.text, out.image);
  out.item = ad::add(ad::add(ad::add(out.text, out.image), out.price), ad::scale(out.fused, static_cast<T>(cfg.beta)));
  return out;
}

template <class T>
IrlTensors<ad::Var<T>> bind_constant(ad::Tape<T>& tape, const IrlParams<T>& p) {
  auto vars = p.template with_element<ad::Var<T>>();
  auto src = tensor_refs(p);
  auto dst = tensor_refs(vars);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = tape.constant(*src[i].second);
  return vars;
}

/// Comprehensive embedding of a single item (no gradients).
template <class T>
Mat<T> item_embedding(const ItemRecord& item, const IrlParams<T>& params, const IrlConfig& cfg, const PriceNorm& norm,
                      RoutingMode mode, std::mt19937_64* rng = nullptr) {
  ad::Tape<T> tape;
  const auto vars = bind_constant(tape, params);
  const auto f = item_features<T>({&item}, cfg, norm);
  return irl_forward(tape, vars, f, cfg, mode, rng).item.value();
}

/// Gaussian routing applied to plain matrices (no gradients).
template <class T>
std::pair<Mat<T>, Mat<T>> gaussian_route(const Mat<T>& raw, const std::vector<Mat<T>>& heads, const Mat<T>& route_mean,
                                         const Mat<T>& route_std, RoutingMode mode, std::mt19937_64* rng = nullptr) {
  ad::Tape<T> tape;
  std::vector<ad::Var<T>> hv;
  for (const auto& h : heads) hv.push_back(tape.constant(h));
  if (raw.cols() != route_mean.rows() || raw.cols() != route_std.rows())
    throw ValidationError("gaussian_route: routing matrix rows must match the raw input dimension");
  auto r = gaussian_route(tape.constant(raw), hv, tape.constant(route_mean), tape.constant(route_std), mode, rng);
  return {r.output.value(), r.weights.value()};
}

inline void to_json(nlohmann::json& j, const IrlConfig& c) {
  j = nlohmann::json{{"d", c.d},           {"n_h", c.n_h},
                     {"d_p", c.d_p},       {"omega", c.omega},
                     {"beta", c.beta},     {"price_norm_max", c.price_norm_max},
                     {"zero_text", c.zero_text}, {"zero_image", c.zero_image},
                     {"zero_price", c.zero_price}, {"zero_fusion", c.zero_fusion},
                     {"linear_routing", c.linear_routing}};
}

}  // namespace antrec
