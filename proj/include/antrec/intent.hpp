#pragma once

// Causal self-attention encoder over a user's sequence of item embeddings.
// Row t of the output summarizes the prefix ending at position t.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antrec/autodiff.hpp"
#include "antrec/error.hpp"
#include "antrec/params.hpp"

namespace antrec {

struct IntentConfig {
  std::size_t d = 256;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_seq_len = 50;
  double dropout = 0.1;
  /// false: LayerNorm(x + sublayer(x)); true: x + sublayer(LayerNorm(x)).
  bool pre_norm = false;
  double ln_eps = 1e-8;

  void validate() const {
    if (d < 1 || n_layers < 1 || n_heads < 1 || max_seq_len < 1) throw ConfigError("intent: sizes must be >= 1");
    if (d % n_heads != 0) throw ConfigError("intent: d must be divisible by n_heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("intent: dropout must lie in [0,1)");
  }
};

template <class E>
struct LayerTensors {
  // No key bias: it would add the same amount to every logit of a query row.
  E wq{}, bq{}, wk{}, wv{}, bv{}, wo{}, bo{};
  E ln1_gain{}, ln1_bias{};
  E ff1_w{}, ff1_b{}, ff2_w{}, ff2_b{};
  E ln2_gain{}, ln2_bias{};

  template <class Self, class F>
  static void visit(Self& s, const std::string& p, F&& f) {
    f(p + ".attn_q.weight", s.wq);
    f(p + ".attn_q.bias", s.bq);
    f(p + ".attn_k.weight", s.wk);
    f(p + ".attn_v.weight", s.wv);
    f(p + ".attn_v.bias", s.bv);
    f(p + ".attn_out.weight", s.wo);
    f(p + ".attn_out.bias", s.bo);
    f(p + ".ln1.gain", s.ln1_gain);
    f(p + ".ln1.bias", s.ln1_bias);
    f(p + ".ff1.weight", s.ff1_w);
    f(p + ".ff1.bias", s.ff1_b);
    f(p + ".ff2.weight", s.ff2_w);
    f(p + ".ff2.bias", s.ff2_b);
    f(p + ".ln2.gain", s.ln2_gain);
    f(p + ".ln2.bias", s.ln2_bias);
  }
};

template <class E>
struct IntentTensors {
  using element_type = E;
  E pos_emb{};  // max_seq_len x d
  std::vector<LayerTensors<E>> layers;

  template <class F>
  void for_each(F&& f) {
    f(std::string("intent.pos_emb"), pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) LayerTensors<E>::visit(layers[l], "intent.layer" + std::to_string(l), f);
  }
  template <class F>
  void for_each(F&& f) const {
    f(std::string("intent.pos_emb"), pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) LayerTensors<E>::visit(layers[l], "intent.layer" + std::to_string(l), f);
  }

  template <class E2>
  IntentTensors<E2> with_element() const {
    IntentTensors<E2> t;
    t.layers.resize(layers.size());
    return t;
  }
};

template <class T>
using IntentParams = IntentTensors<Mat<T>>;

inline bool is_position_tensor(const std::string& name) { return name == "intent.pos_emb"; }

template <class T>
IntentParams<T> init_intent(const IntentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto d = static_cast<Eigen::Index>(cfg.d);
  IntentParams<T> p;
  p.pos_emb = init_embedding<T>(static_cast<Eigen::Index>(cfg.max_seq_len), d, seed, "intent.pos_emb");
  p.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerTensors<Mat<T>>::visit(p.layers[l], "intent.layer" + std::to_string(l), [&](const std::string& name, Mat<T>& m) {
      const bool is_weight = name.ends_with(".weight");
      if (is_weight) {
        m = init_fan_in<T>(d, d, seed, name);
      } else if (name.ends_with(".gain")) {
        m = Mat<T>::Ones(1, d);
      } else {
        m = Mat<T>::Zero(1, d);
      }
    });
  }
  return p;
}

/// Dropout masks come from `rng` when `train` is set; otherwise inactive.
template <class T>
struct EncodeOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;
  /// When set, receives each layer/head's attention matrix (before dropout).
  std::vector<Mat<T>>* attention_out = nullptr;
};

namespace detail {

template <class T>
ad::Var<T> dropout(const ad::Var<T>& x, double rate, const EncodeOptions<T>& opt) {
  if (!opt.train || rate <= 0.0) return x;
  if (opt.rng == nullptr) throw ValidationError("dropout: train mode needs an rng");
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = static_cast<T>(1.0 / (1.0 - rate));
  Mat<T> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j) mask(i, j) = keep(*opt.rng) ? s : T(0);
  return ad::hadamard(x, x.tape()->constant(std::move(mask)));
}

template <class T>
ad::Var<T> affine(const ad::Var<T>& x, const ad::Var<T>& w, const ad::Var<T>& b) {
  return ad::add_row(ad::matmul(x, w), b);
}

template <class T>
ad::Var<T> self_attention(const ad::Var<T>& x, const LayerTensors<ad::Var<T>>& p, const IntentConfig& cfg,
                          const EncodeOptions<T>& opt) {
  const ad::Var<T> q = affine(x, p.wq, p.bq);
  const ad::Var<T> k = ad::matmul(x, p.wk);
  const ad::Var<T> v = affine(x, p.wv, p.bv);
  const auto dh = static_cast<Eigen::Index>(cfg.d / cfg.n_heads);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<ad::Var<T>> heads;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    const auto qh = cfg.n_heads == 1 ? q : ad::slice_cols(q, off, dh);
    const auto kh = cfg.n_heads == 1 ? k : ad::slice_cols(k, off, dh);
    const auto vh = cfg.n_heads == 1 ? v : ad::slice_cols(v, off, dh);
    const auto attn = ad::causal_softmax(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    if (opt.attention_out) opt.attention_out->push_back(attn.value());
    heads.push_back(ad::matmul(dropout(attn, cfg.dropout, opt), vh));
  }
  const ad::Var<T> joined = heads.size() == 1 ? heads[0] : ad::concat_cols(heads);
  return affine(joined, p.wo, p.bo);
}

template <class T>
ad::Var<T> feed_forward(const ad::Var<T>& x, const LayerTensors<ad::Var<T>>& p) {
  return affine(ad::relu(affine(x, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b);
}

}  // namespace detail

/// Encodes an L x d matrix of item embeddings (L <= max_seq_len) into L x d
/// hidden states under a strict causal mask.
template <class T>
ad::Var<T> encode_sequence(const ad::Var<T>& items, const IntentTensors<ad::Var<T>>& p, const IntentConfig& cfg,
                           const EncodeOptions<T>& opt = {}) {
  const Eigen::Index len = items.rows();
  if (len == 0) throw ValidationError("encode_sequence: empty sequence");
  if (len > static_cast<Eigen::Index>(cfg.max_seq_len)) throw ValidationError("encode_sequence: sequence longer than max_seq_len");
  if (items.cols() != p.pos_emb.cols()) throw ValidationError("encode_sequence: embedding dimension mismatch");
  const T eps = static_cast<T>(cfg.ln_eps);
  ad::Var<T> x = ad::add(items, ad::slice_rows(p.pos_emb, 0, len));
  for (const auto& layer : p.layers) {
    if (cfg.pre_norm) {
      const auto a = detail::self_attention(ad::layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias, eps), layer, cfg, opt);
      x = ad::add(x, detail::dropout(a, cfg.dropout, opt));
      const auto f = detail::feed_forward(ad::layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias, eps), layer);
      x = ad::add(x, detail::dropout(f, cfg.dropout, opt));
    } else {
      const auto a = detail::self_attention(x, layer, cfg, opt);
      x = ad::layer_norm_rows(ad::add(x, detail::dropout(a, cfg.dropout, opt)), layer.ln1_gain, layer.ln1_bias, eps);
      const auto f = detail::feed_forward(x, layer);
      x = ad::layer_norm_rows(ad::add(x, detail::dropout(f, cfg.dropout, opt)), layer.ln2_gain, layer.ln2_bias, eps);
    }
  }
  return x;
}

/// Plain-matrix convenience wrapper (no gradients).
template <class T>
Mat<T> encode_sequence(const Mat<T>& items, const IntentParams<T>& params, const IntentConfig& cfg,
                       const EncodeOptions<T>& opt = {}) {
  ad::Tape<T> tape;
  auto vars = params.template with_element<ad::Var<T>>();
  auto src = tensor_refs(params);
  auto dst = tensor_refs(vars);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = tape.constant(*src[i].second);
  return encode_sequence(tape.constant(items), vars, cfg, opt).value();
}

inline void to_json(nlohmann::json& j, const IntentConfig& c) {
  j = nlohmann::json{{"d", c.d},           {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                     {"max_seq_len", c.max_seq_len}, {"dropout", c.dropout}, {"pre_norm", c.pre_norm},
                     {"ln_eps", c.ln_eps}};
}

}  // namespace antrec
