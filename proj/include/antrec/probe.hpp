#pragma once

// Cross-task separability probe: can a linear classifier tell target items
// from auxiliary items using one transformed modality embedding?

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antrec/checkpoint.hpp"
#include "antrec/dataio.hpp"
#include "antrec/error.hpp"
#include "antrec/irl.hpp"
#include "antrec/model.hpp"
#include "antrec/params.hpp"

namespace antrec {

enum class Modality { text, image, price };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::text:
      return "text";
    case Modality::image:
      return "image";
    case Modality::price:
      return "price";
  }
  return "unknown";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "text") return Modality::text;
  if (s == "image") return Modality::image;
  if (s == "price") return Modality::price;
  throw ConfigError("modality must be text, image or price, got '" + s + "'");
}

inline const std::vector<Modality>& all_modalities() {
  static const std::vector<Modality> v{Modality::text, Modality::image, Modality::price};
  return v;
}

struct ProbeOptions {
  std::uint64_t seed = 0;
  std::size_t max_epochs = 500;
  double learning_rate = 0.1;
  /// Two-layer perceptron instead of logistic regression.
  bool nonlinear = false;
  std::size_t hidden = 32;
  RoutingMode routing = RoutingMode::mean;
  /// Accept adapted or scratch checkpoints as the embedding source.
  bool allow_any_stage = false;
};

struct ProbeSplit {
  Mat<double> x;
  std::vector<int> y;
};

struct ProbeDataset {
  std::string target_id;
  std::string aux_id;
  Modality modality = Modality::text;
  std::size_t n_per_class = 0;
  std::uint64_t seed = 0;
  ProbeSplit train, val, test;
};

struct ProbeResult {
  std::string target_id;
  std::string aux_id;
  Modality modality = Modality::text;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t n_per_class = 0;
  std::uint64_t seed = 0;
  bool nonlinear = false;
};

inline nlohmann::ordered_json to_json(const ProbeResult& r) {
  nlohmann::ordered_json j;
  j["target_id"] = r.target_id;
  j["aux_id"] = r.aux_id;
  j["modality"] = to_string(r.modality);
  j["classifier"] = r.nonlinear ? "mlp" : "linear";
  j["train_accuracy"] = r.train_accuracy;
  j["val_accuracy"] = r.val_accuracy;
  j["test_accuracy"] = r.test_accuracy;
  j["best_epoch"] = r.best_epoch;
  j["n_per_class"] = r.n_per_class;
  j["seed"] = r.seed;
  return j;
}

/// Transformed embedding of one modality for each item (no fusion, no sum).
inline Mat<double> modality_embeddings(const std::vector<const ItemRecord*>& items, const Checkpoint& ck, Modality m,
                                       RoutingMode routing, std::mt19937_64* rng = nullptr) {
  const auto& cfg = ck.config.irl;
  if ((m == Modality::text && cfg.zero_text) || (m == Modality::image && cfg.zero_image) ||
      (m == Modality::price && cfg.zero_price))
    throw ConfigError("probe: modality " + to_string(m) + " is disabled in this checkpoint");
  ad::Tape<double> tape;
  const auto vars = bind_constant(tape, ck.params.irl);
  const auto f = item_features<double>(items, cfg, ck.price_norm);
  const auto out = irl_forward(tape, vars, f, cfg, routing, rng);
  switch (m) {
    case Modality::text:
      return out.text.value();
    case Modality::image:
      return out.image.value();
    case Modality::price:
      return out.price.value();
  }
  return {};
}

/// One auxiliary item per target item, sampled without replacement, then a
/// per-class 70/10/20 split (floors for train and validation).
inline ProbeDataset build_probe_dataset(const TaskDataset& target, const TaskDataset& aux, Modality modality,
                                        const Checkpoint& ck, const ProbeOptions& opt = {}) {
  if (!opt.allow_any_stage && ck.stage != Stage::pretrained)
    throw ValidationError("probe: expected a pretrained checkpoint, got " + to_string(ck.stage));
  const std::uint64_t seed = opt.seed;
  const std::size_t n = target.items.size();
  if (n < 10) throw ValidationError("probe: target task " + target.task_id + " has too few items");
  if (aux.items.size() < n)
    throw ValidationError("probe: auxiliary task " + aux.task_id + " has " + std::to_string(aux.items.size()) +
                          " items, need at least " + std::to_string(n));
  std::mt19937_64 rng(tensor_seed(seed, "probe:" + target.task_id + ":" + aux.task_id));
  std::vector<const ItemRecord*> tgt, aux_all;
  for (const auto& [_, r] : target.items) tgt.push_back(&r);
  for (const auto& [_, r] : aux.items) aux_all.push_back(&r);
  std::shuffle(aux_all.begin(), aux_all.end(), rng);
  aux_all.resize(n);

  std::mt19937_64 route_rng(tensor_seed(seed, "probe-routing"));
  const Mat<double> xt = modality_embeddings(tgt, ck, modality, opt.routing, &route_rng);
  const Mat<double> xa = modality_embeddings(aux_all, ck, modality, opt.routing, &route_rng);

  ProbeDataset ds;
  ds.target_id = target.task_id;
  ds.aux_id = aux.task_id;
  ds.modality = modality;
  ds.n_per_class = n;
  ds.seed = seed;
  const std::size_t n_train = n * 7 / 10, n_val = n / 10;
  std::vector<std::pair<const Mat<double>*, int>> classes{{&xt, 1}, {&xa, 0}};
  std::vector<std::vector<std::pair<const Mat<double>*, Eigen::Index>>> parts(3);
  std::vector<std::vector<int>> labels(3);
  for (const auto& [x, label] : classes) {
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t part = i < n_train ? 0 : i < n_train + n_val ? 1 : 2;
      parts[part].emplace_back(x, order[i]);
      labels[part].push_back(label);
    }
  }
  ProbeSplit* out[3] = {&ds.train, &ds.val, &ds.test};
  for (std::size_t p = 0; p < 3; ++p) {
    out[p]->x.resize(static_cast<Eigen::Index>(parts[p].size()), xt.cols());
    for (std::size_t i = 0; i < parts[p].size(); ++i) out[p]->x.row(static_cast<Eigen::Index>(i)) = parts[p][i].first->row(parts[p][i].second);
    out[p]->y = labels[p];
  }
  return ds;
}

namespace detail {

struct ProbeModel {
  Mat<double> w1;  // in x hidden (MLP) or in x 1 (linear)
  Mat<double> b1;
  Mat<double> w2;  // hidden x 1 (MLP only)
  double b2 = 0.0;
  bool mlp = false;

  Eigen::VectorXd logits(const Mat<double>& x, Mat<double>* hidden = nullptr) const {
    if (!mlp) return ((x * w1).col(0).array() + b1(0, 0)).matrix();
    Mat<double> h = ((x * w1).rowwise() + b1.row(0)).cwiseMax(0.0);
    Eigen::VectorXd z = ((h * w2).col(0).array() + b2).matrix();
    if (hidden) *hidden = std::move(h);
    return z;
  }

  double accuracy(const ProbeSplit& s) const {
    const auto z = logits(s.x);
    std::size_t hit = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) hit += ((z(i) >= 0.0 ? 1 : 0) == s.y[static_cast<std::size_t>(i)]);
    return static_cast<double>(hit) / static_cast<double>(s.y.size());
  }

  /// One full-batch gradient-descent step on mean binary cross-entropy.
  void step(const ProbeSplit& s, double lr) {
    Mat<double> h;
    const auto z = logits(s.x, &h);
    const double n = static_cast<double>(s.y.size());
    Eigen::VectorXd dz(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) dz(i) = (sigmoid(z(i)) - s.y[static_cast<std::size_t>(i)]) / n;
    if (!mlp) {
      w1.col(0) -= lr * (s.x.transpose() * dz);
      b1(0, 0) -= lr * dz.sum();
      return;
    }
    const Eigen::VectorXd gw2 = h.transpose() * dz;
    const double gb2 = dz.sum();
    Mat<double> dh = dz * w2.col(0).transpose();
    dh = dh.cwiseProduct((h.array() > 0.0).cast<double>().matrix());
    w1 -= lr * (s.x.transpose() * dh);
    b1 -= lr * dh.colwise().sum();
    w2.col(0) -= lr * gw2;
    b2 -= lr * gb2;
  }
};

inline void standardize(ProbeDataset& ds) {
  const Eigen::RowVectorXd mean = ds.train.x.colwise().mean();
  Eigen::RowVectorXd sd = ((ds.train.x.rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1.0;
  for (ProbeSplit* s : {&ds.train, &ds.val, &ds.test})
    s->x = ((s->x.rowwise() - mean).array().rowwise() / sd.array()).matrix();
}

}  // namespace detail

/// Trains on the train split, keeps the epoch with the best validation
/// accuracy (earliest on ties) and reports its test accuracy. Features are
/// standardized with train-split statistics first.
inline ProbeResult train_linear_probe(ProbeDataset ds, const ProbeOptions& opt = {}) {
  for (const ProbeSplit* s : {&ds.train, &ds.val, &ds.test}) {
    if (s->y.empty()) throw ValidationError("probe: empty split");
    const bool has0 = std::count(s->y.begin(), s->y.end(), 0) > 0;
    const bool has1 = std::count(s->y.begin(), s->y.end(), 1) > 0;
    if (!(has0 && has1)) throw ValidationError("probe: degenerate single-class split");
  }
  detail::standardize(ds);
  const auto in = ds.train.x.cols();
  detail::ProbeModel model;
  model.mlp = opt.nonlinear;
  if (opt.nonlinear) {
    const auto hd = static_cast<Eigen::Index>(opt.hidden);
    model.w1 = init_fan_in<double>(in, hd, opt.seed, "probe.w1");
    model.b1 = Mat<double>::Zero(1, hd);
    model.w2 = init_fan_in<double>(hd, 1, opt.seed, "probe.w2");
  } else {
    model.w1 = Mat<double>::Zero(in, 1);
    model.b1 = Mat<double>::Zero(1, 1);
  }
  ProbeResult r;
  r.target_id = ds.target_id;
  r.aux_id = ds.aux_id;
  r.modality = ds.modality;
  r.n_per_class = ds.n_per_class;
  r.seed = ds.seed;
  r.nonlinear = opt.nonlinear;
  detail::ProbeModel best = model;
  double best_val = -1.0;
  for (std::size_t e = 1; e <= opt.max_epochs; ++e) {
    model.step(ds.train, opt.learning_rate);
    const double v = model.accuracy(ds.val);
    if (v > best_val) {
      best_val = v;
      best = model;
      r.best_epoch = e;
    }
  }
  r.train_accuracy = best.accuracy(ds.train);
  r.val_accuracy = best_val;
  r.test_accuracy = best.accuracy(ds.test);
  return r;
}

/// Every ordered (target, auxiliary) pair crossed with every modality.
inline nlohmann::ordered_json probe_matrix(const std::vector<const TaskDataset*>& targets,
                                           const std::vector<const TaskDataset*>& auxes, const Checkpoint& ck,
                                           const ProbeOptions& opt = {}) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["results"] = nlohmann::ordered_json::array();
  for (const auto* t : targets)
    for (const auto* a : auxes) {
      if (t->task_id == a->task_id) continue;
      for (Modality m : all_modalities()) {
        if ((m == Modality::text && ck.config.irl.zero_text) || (m == Modality::image && ck.config.irl.zero_image) ||
            (m == Modality::price && ck.config.irl.zero_price))
          continue;
        j["results"].push_back(to_json(train_linear_probe(build_probe_dataset(*t, *a, m, ck, opt), opt)));
      }
    }
  return j;
}

}  // namespace antrec
