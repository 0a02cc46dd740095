#pragma once

// Joint pre-training over auxiliary tasks, the shared minibatch machinery
// used by adaptation, and the finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antrec/autodiff.hpp"
#include "antrec/checkpoint.hpp"
#include "antrec/dataio.hpp"
#include "antrec/digest.hpp"
#include "antrec/error.hpp"
#include "antrec/model.hpp"
#include "antrec/objective.hpp"
#include "antrec/optim.hpp"

namespace antrec {

/// Which items the softmax runs over: the whole catalogue, or only the items
/// present in the current batch.
enum class CandidateMode { full, in_batch };

inline std::string to_string(CandidateMode m) { return m == CandidateMode::full ? "full" : "in_batch"; }

inline CandidateMode parse_candidates(const std::string& s) {
  if (s == "full") return CandidateMode::full;
  if (s == "in_batch") return CandidateMode::in_batch;
  throw ConfigError("candidates must be 'full' or 'in_batch', got '" + s + "'");
}

enum class Precision { f64, f32 };

inline std::string to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw ConfigError("precision must be 'f64' or 'f32', got '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  /// Sequences per optimizer step.
  std::size_t batch_size = 2048;
  std::size_t n_epochs = 30;
  double tau = 0.07;
  double lambda = 1e-3;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double dropout = 0.1;
  double gradcheck_tolerance = 1e-4;
  RoutingMode routing = RoutingMode::sample;
  /// Predict at every position of a training sequence rather than the last only.
  bool multi_position = true;
  CandidateMode candidates = CandidateMode::full;
  Precision precision = Precision::f64;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    check_tau(tau);
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0))
      throw ConfigError("adam: betas must lie in [0,1) and eps must be > 0");
  }

  AdamConfig adam() const { return AdamConfig{learning_rate, adam_beta1, adam_beta2, adam_eps}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"n_epochs", c.n_epochs},
                     {"tau", c.tau},
                     {"lambda", c.lambda},
                     {"seed", c.seed},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"dropout", c.dropout},
                     {"routing", to_string(c.routing)},
                     {"multi_position", c.multi_position},
                     {"candidates", to_string(c.candidates)},
                     {"precision", to_string(c.precision)}};
}

inline Digest config_digest(const nlohmann::json& j) { return sha256(j.dump()); }

// ---------------------------------------------------------------------------
// One batch

template <class T>
struct BatchGraph {
  ad::Var<T> total;
  double rec_loss = 0.0;
  double align_reg = 0.0;
  std::size_t n_predictions = 0;
};

struct BatchOptions {
  bool train = false;
  /// Add the text-image alignment term (pre-training only).
  bool alignment = true;
};

/// Builds the objective for `sequences` (catalogue rows, length >= 2 each).
template <class T>
BatchGraph<T> batch_objective(ad::Tape<T>& tape, const ModelTensors<ad::Var<T>>& vars, const ModelConfig& mcfg,
                              const TrainConfig& cfg, const ItemFeatures<T>& features,
                              const std::vector<std::vector<std::size_t>>& sequences, const BatchOptions& bopt,
                              std::mt19937_64* rng) {
  std::vector<std::size_t> present;
  for (const auto& s : sequences) {
    if (s.size() < 2) throw ValidationError("batch_objective: training sequences need at least 2 items");
    present.insert(present.end(), s.begin(), s.end());
  }
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());

  // Map catalogue rows to candidate rows.
  const bool full = cfg.candidates == CandidateMode::full;
  std::vector<std::size_t> to_cand(static_cast<std::size_t>(features.size()), 0);
  if (full) {
    std::iota(to_cand.begin(), to_cand.end(), 0);
  } else {
    for (std::size_t i = 0; i < present.size(); ++i) to_cand[present[i]] = i;
  }
  const RoutingMode mode = bopt.train ? cfg.routing : RoutingMode::mean;
  const TableVars<T> table =
      full ? item_table_forward(tape, vars, features, mcfg, mode, rng)
           : item_table_forward(tape, vars, select_features(features, present), mcfg, mode, rng, &present);

  std::vector<std::vector<std::size_t>> inputs;
  std::vector<std::size_t> targets;
  inputs.reserve(sequences.size());
  for (const auto& s : sequences) {
    std::vector<std::size_t> in;
    for (std::size_t t = 0; t + 1 < s.size(); ++t) in.push_back(to_cand[s[t]]);
    if (cfg.multi_position) {
      for (std::size_t t = 1; t < s.size(); ++t) targets.push_back(to_cand[s[t]]);
    } else {
      targets.push_back(to_cand[s.back()]);
    }
    inputs.push_back(std::move(in));
  }

  IntentConfig icfg = mcfg.intent;
  icfg.dropout = cfg.dropout;
  EncodeOptions<T> eopt;
  eopt.train = bopt.train;
  eopt.rng = rng;
  const auto prefs = encode_batch(table.items, vars.intent, icfg, inputs, !cfg.multi_position, eopt);
  const auto rec = recommendation_loss(prefs, table.items, targets, cfg.tau);

  BatchGraph<T> g;
  g.n_predictions = targets.size();
  g.rec_loss = static_cast<double>(rec.value()(0, 0));
  g.total = rec;
  const bool has_pair = !(mcfg.irl.zero_text || mcfg.irl.zero_image);
  if (bopt.alignment && cfg.lambda > 0.0 && has_pair) {
    std::vector<std::size_t> rows;
    rows.reserve(present.size());
    for (std::size_t r : present) rows.push_back(to_cand[r]);
    const auto reg = alignment_regularizer(ad::gather_rows(table.irl.text, rows), ad::gather_rows(table.irl.image, rows), cfg.tau);
    g.align_reg = static_cast<double>(reg.value()(0, 0));
    g.total = ad::add(rec, ad::scale(reg, static_cast<T>(cfg.lambda)));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Epoch loop

using TrainablePredicate = std::function<bool(const std::string&)>;

/// Shuffled minibatch Adam over `instances`; returns the mean loss per
/// prediction of the epoch. Tensors rejected by `trainable` are left
/// untouched.
template <class T>
class EpochRunner {
 public:
  EpochRunner(const ModelConfig& mcfg, const TrainConfig& cfg, const ItemFeatures<T>& features,
              std::vector<std::vector<std::size_t>> instances, TrainablePredicate trainable, BatchOptions bopt,
              std::uint64_t rng_seed)
      : mcfg_(mcfg),
        cfg_(cfg),
        features_(features),
        instances_(std::move(instances)),
        trainable_(std::move(trainable)),
        bopt_(bopt),
        rng_(rng_seed) {
    if (instances_.empty()) throw ValidationError("training: no sequence has enough interactions to form an instance");
    bopt_.train = true;
  }

  double run_epoch(ModelParams<T>& params) {
    ++epoch_;
    std::vector<std::size_t> order(instances_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    double loss_sum = 0.0;
    std::size_t predictions = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      std::vector<std::vector<std::size_t>> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(instances_[order[i]]);

      ad::Tape<T> tape;
      const auto vars = bind_params(tape, params, trainable_);
      const auto g = batch_objective(tape, vars, mcfg_, cfg_, features_, batch, bopt_, &rng_);
      const double total = static_cast<double>(g.total.value()(0, 0));
      if (!std::isfinite(total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch_) + ", batch starting at " +
                           std::to_string(start) + " (rec " + std::to_string(g.rec_loss) + ", align " +
                           std::to_string(g.align_reg) + ")");
      tape.backward(g.total);
      auto prefs = tensor_refs(params);
      auto vrefs = tensor_refs(vars);
      for (std::size_t i = 0; i < prefs.size(); ++i) {
        if (!trainable_(prefs[i].first)) continue;
        const Mat<T>& grad = vrefs[i].second->grad();
        if (grad.size() == 0) continue;  // no data path this step
        adam_step(*prefs[i].second, grad, adam_[prefs[i].first], cfg_.adam());
      }
      loss_sum += total;
      predictions += g.n_predictions;
    }
    return loss_sum / static_cast<double>(predictions);
  }

 private:
  ModelConfig mcfg_;
  TrainConfig cfg_;
  const ItemFeatures<T>& features_;
  std::vector<std::vector<std::size_t>> instances_;
  TrainablePredicate trainable_;
  BatchOptions bopt_;
  std::mt19937_64 rng_;
  std::map<std::string, AdamState<T>> adam_;
  std::size_t epoch_ = 0;
};

/// Catalogue-row sequences from each user's leave-one-out train part; users
/// whose train part cannot form a prediction are skipped.
inline std::vector<std::vector<std::size_t>> training_instances(const std::vector<const TaskDataset*>& tasks,
                                                                const ItemTable& table) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto* t : tasks)
    for (const auto& u : split_leave_one_out(*t).users)
      if (u.train.size() >= 2) out.push_back(table.rows(u.train));
  return out;
}

inline void check_shared_dims(const std::vector<const TaskDataset*>& tasks) {
  if (tasks.empty()) throw ValidationError("at least one task is required");
  for (const auto* t : tasks)
    if (t->d_text != tasks[0]->d_text || t->d_image != tasks[0]->d_image)
      throw ValidationError("task " + t->task_id + " has modality dimensions (" + std::to_string(t->d_text) + ", " +
                            std::to_string(t->d_image) + "), expected (" + std::to_string(tasks[0]->d_text) + ", " +
                            std::to_string(tasks[0]->d_image) + ")");
}

// ---------------------------------------------------------------------------
// Pre-training

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
};

/// Model shape for a run: the caller's item and intent settings with the
/// modality sizes of the data and the training dropout.
inline ModelConfig model_config_for(const IrlConfig& irl, const IntentConfig& intent, const TaskDataset& data,
                                    const TrainConfig& cfg) {
  ModelConfig m;
  m.irl = irl;
  m.intent = intent;
  m.intent.d = irl.d;
  m.intent.dropout = cfg.dropout;
  m.d_text = data.d_text;
  m.d_image = data.d_image;
  return m;
}

template <class T>
TrainResult pretrain_as(const std::vector<const TaskDataset*>& aux, const TrainConfig& cfg, const IrlConfig& irl,
                        const IntentConfig& intent) {
  cfg.validate();
  check_shared_dims(aux);
  const ModelConfig mcfg = model_config_for(irl, intent, *aux[0], cfg);
  mcfg.validate();
  const ItemTable table = ItemTable::from_tasks(aux);
  const PriceNorm norm = PriceNorm::fit(aux);
  const auto features = table.features<T>(mcfg.irl, norm);

  ModelParams<T> params = init_model<T>(mcfg, 0, cfg.seed);
  EpochRunner<T> runner(mcfg, cfg, features, training_instances(aux, table), [](const std::string&) { return true; },
                        BatchOptions{}, tensor_seed(cfg.seed, "pretrain"));
  TrainResult out;
  for (std::size_t e = 0; e < cfg.n_epochs; ++e) out.epoch_losses.push_back(runner.run_epoch(params));

  Checkpoint& ck = out.checkpoint;
  ck.config = mcfg;
  ck.params = cast_params<double>(params);
  ck.price_norm = norm;
  ck.config_hash = config_digest(nlohmann::json{{"model", mcfg}, {"train", cfg}});
  ck.seed = cfg.seed;
  ck.stage = Stage::pretrained;
  return out;
}

inline TrainResult pretrain(const std::vector<const TaskDataset*>& aux, const TrainConfig& cfg, const IrlConfig& irl,
                            const IntentConfig& intent = {}) {
  return cfg.precision == Precision::f64 ? pretrain_as<double>(aux, cfg, irl, intent)
                                         : pretrain_as<float>(aux, cfg, irl, intent);
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  CandidateMode candidates = CandidateMode::full;
  /// Test hook: applied to each analytic gradient before comparison.
  std::function<void(const std::string&, Mat<double>&)> tamper;
};

struct GradCheckReport {
  std::map<std::string, double> max_rel_error;  // per parameter tensor
  double worst = 0.0;
  std::string worst_tensor;
  std::size_t n_parameters = 0;
};

/// The tiny setting the checker runs on: one synthetic task of 20 items.
inline TaskDataset gradcheck_task(std::uint64_t seed) {
  SynthConfig s;
  s.n_tasks = 1;
  s.n_items_per_task = 20;
  s.n_users_per_task = 6;
  s.latent_dim = 4;
  s.seq_len_min = 3;
  s.seq_len_max = 7;
  s.d_text = 6;
  s.d_image = 5;
  s.n_clusters = 4;
  s.seed = seed;
  return generate_synthetic_tasks(s)[0];
}

inline ModelConfig gradcheck_model() {
  ModelConfig m;
  m.irl.d = 8;
  m.irl.n_h = 2;
  m.irl.d_p = 8;
  m.intent.d = 8;
  m.intent.n_layers = 1;
  m.intent.n_heads = 1;
  m.intent.max_seq_len = 8;
  m.intent.dropout = 0.0;
  m.d_text = 6;
  m.d_image = 5;
  m.interaction_emb = true;
  return m;
}

/// Compares analytic gradients of the total objective (mean routing, no
/// dropout) with central differences, per tensor, as
/// |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport gradient_check(const ModelConfig& mcfg, const TaskDataset& data, TrainConfig cfg,
                                      const GradCheckOptions& opt = {}) {
  mcfg.validate();
  cfg.dropout = 0.0;
  cfg.routing = RoutingMode::mean;
  cfg.candidates = opt.candidates;
  const ItemTable table = ItemTable::from_task(data);
  const PriceNorm norm = PriceNorm::fit({&data});
  const auto features = table.features<double>(mcfg.irl, norm);
  const auto batch = training_instances({&data}, table);
  ModelParams<double> params = init_model<double>(mcfg, table.size(), opt.seed);
  // Shifts, biases and LayerNorm affine terms start at constants; move them
  // off so their gradients are exercised at a generic point.
  {
    std::mt19937_64 rng(tensor_seed(opt.seed, "gradcheck"));
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& [name, m] : tensor_refs(params))
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += n(rng);
  }
  const BatchOptions bopt{false, true};
  auto objective = [&](const ModelParams<double>& p) {
    ad::Tape<double> tape;
    return batch_objective(tape, bind_constants(tape, p), mcfg, cfg, features, batch, bopt, nullptr).total.value()(0, 0);
  };

  ad::Tape<double> tape;
  const auto vars = bind_params(tape, params, [](const std::string&) { return true; });
  const auto g = batch_objective(tape, vars, mcfg, cfg, features, batch, bopt, nullptr);
  tape.backward(g.total);

  GradCheckReport report;
  auto prefs = tensor_refs(params);
  auto vrefs = tensor_refs(vars);
  for (std::size_t k = 0; k < prefs.size(); ++k) {
    const std::string& name = prefs[k].first;
    Mat<double> analytic = vrefs[k].second->grad();
    if (analytic.size() == 0) analytic = Mat<double>::Zero(prefs[k].second->rows(), prefs[k].second->cols());
    if (opt.tamper) opt.tamper(name, analytic);
    double worst = 0.0;
    Mat<double>& m = *prefs[k].second;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double& x = m.data()[i];
      const double keep = x;
      x = keep + opt.step;
      const double up = objective(params);
      x = keep - opt.step;
      const double down = objective(params);
      x = keep;
      const double num = (up - down) / (2 * opt.step);
      const double a = analytic.data()[i];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8}));
    }
    report.max_rel_error[name] = worst;
    report.n_parameters += static_cast<std::size_t>(m.size());
    if (worst >= report.worst) {
      report.worst = worst;
      report.worst_tensor = name;
    }
  }
  return report;
}

}  // namespace antrec
