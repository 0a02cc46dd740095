#pragma once

// Moving a pre-trained model to a target task: re-learning the item layer
// and positions under a frozen encoder, fine-tuning the item layer, or
// training from scratch; optionally with a per-item interaction table.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antrec/checkpoint.hpp"
#include "antrec/dataio.hpp"
#include "antrec/error.hpp"
#include "antrec/eval.hpp"
#include "antrec/model.hpp"
#include "antrec/training.hpp"

namespace antrec {

enum class AdaptMode { relearn, finetune, scratch };

inline std::string to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::relearn:
      return "relearn";
    case AdaptMode::finetune:
      return "finetune";
    case AdaptMode::scratch:
      return "scratch";
  }
  return "unknown";
}

inline AdaptMode parse_adapt_mode(const std::string& s) {
  if (s == "relearn") return AdaptMode::relearn;
  if (s == "finetune") return AdaptMode::finetune;
  if (s == "scratch") return AdaptMode::scratch;
  throw ConfigError("mode must be relearn, finetune or scratch, got '" + s + "'");
}

enum class Variant { base, with_interaction_emb };

inline std::string to_string(Variant v) { return v == Variant::base ? "base" : "with_interaction_emb"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "base") return Variant::base;
  if (s == "with_interaction_emb") return Variant::with_interaction_emb;
  throw ConfigError("variant must be base or with_interaction_emb, got '" + s + "'");
}

struct AdaptSpec {
  AdaptMode mode = AdaptMode::relearn;
  Variant variant = Variant::base;
  /// n_epochs is the epoch budget; the best validation epoch is kept.
  TrainConfig train;
  /// Overrides the fusion weight on the target task when set.
  std::optional<double> beta;
  /// Model shape for scratch runs (the checkpoint's shape is used otherwise).
  IrlConfig irl;
  IntentConfig intent;
  std::size_t select_k = 10;
};

struct AdaptResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
  std::vector<double> val_recall;  // per epoch
  std::size_t best_epoch = 0;      // 1-based; 0 = untrained snapshot
};

/// Which tensors each mode trains.
inline TrainablePredicate adapt_trainable(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::relearn:
      return [](const std::string& n) { return is_irl_tensor(n) || is_position_tensor(n) || n == "interaction_emb"; };
    case AdaptMode::finetune:
      return [](const std::string& n) { return is_irl_tensor(n) || n == "interaction_emb"; };
    case AdaptMode::scratch:
      break;
  }
  return [](const std::string&) { return true; };
}

namespace detail {

template <class T>
double validation_recall(const ModelParams<T>& params, const ModelConfig& cfg, const ItemTable& table,
                         const PriceNorm& norm, const SplitDataset& split, std::size_t k) {
  const Scorer<T> scorer(params, cfg, table, norm);
  const auto ranks = held_out_ranks(scorer, split, EvalSplit::validation);
  double hits = 0.0;
  for (auto r : ranks) hits += recall_at_k(r, k);
  return hits / static_cast<double>(ranks.size());
}

}  // namespace detail

template <class T>
AdaptResult adapt_as(const Checkpoint* pretrained, const TaskDataset& target, const AdaptSpec& spec) {
  spec.train.validate();
  const bool needs_ck = spec.mode != AdaptMode::scratch;
  if (needs_ck && pretrained == nullptr) throw ConfigError("adapt: mode " + to_string(spec.mode) + " requires a pre-trained checkpoint");
  if (needs_ck && pretrained->stage != Stage::pretrained)
    throw ValidationError("adapt: expected a pretrained checkpoint, got " + to_string(pretrained->stage));

  ModelConfig mcfg = needs_ck ? pretrained->config : model_config_for(spec.irl, spec.intent, target, spec.train);
  if (needs_ck && (mcfg.d_text != target.d_text || mcfg.d_image != target.d_image))
    throw ValidationError("adapt: task " + target.task_id + " modality dimensions do not match the checkpoint");
  mcfg.interaction_emb = spec.variant == Variant::with_interaction_emb;
  mcfg.intent.dropout = spec.train.dropout;
  if (spec.beta) mcfg.irl.beta = *spec.beta;
  mcfg.validate();

  const ItemTable table = ItemTable::from_task(target);
  const PriceNorm norm = needs_ck ? pretrained->price_norm : PriceNorm::fit({&target});
  const auto features = table.features<T>(mcfg.irl, norm);
  const auto split = split_leave_one_out(target);

  // Fresh tensors everywhere, then the checkpoint supplies what this mode
  // carries over.
  ModelParams<T> params = init_model<T>(mcfg, table.size(), spec.train.seed);
  if (needs_ck) {
    const auto src = cast_params<T>(pretrained->params);
    std::map<std::string, const Mat<T>*> by_name;
    for (const auto& [name, m] : tensor_refs(src)) by_name[name] = m;
    for (auto& [name, m] : tensor_refs(params)) {
      const bool carry = spec.mode == AdaptMode::finetune ? name != "interaction_emb"
                                                          : !is_irl_tensor(name) && !is_position_tensor(name) && name != "interaction_emb";
      if (carry) *m = *by_name.at(name);
    }
  }

  TrainConfig tcfg = spec.train;
  EpochRunner<T> runner(mcfg, tcfg, features, training_instances({&target}, table), adapt_trainable(spec.mode),
                        BatchOptions{true, false}, tensor_seed(spec.train.seed, "adapt"));
  AdaptResult out;
  ModelParams<T> best = params;
  double best_recall = -1.0;
  if (tcfg.n_epochs == 0) best_recall = detail::validation_recall(params, mcfg, table, norm, split, spec.select_k);
  for (std::size_t e = 1; e <= tcfg.n_epochs; ++e) {
    out.epoch_losses.push_back(runner.run_epoch(params));
    const double r = detail::validation_recall(params, mcfg, table, norm, split, spec.select_k);
    out.val_recall.push_back(r);
    if (r > best_recall) {
      best_recall = r;
      best = params;
      out.best_epoch = e;
    }
  }

  Checkpoint& ck = out.checkpoint;
  ck.config = mcfg;
  ck.params = cast_params<double>(best);
  ck.price_norm = norm;
  if (mcfg.interaction_emb) ck.interaction_ids = table.ids();
  ck.config_hash = config_digest(nlohmann::json{{"model", mcfg},
                                                {"train", tcfg},
                                                {"mode", to_string(spec.mode)},
                                                {"variant", to_string(spec.variant)},
                                                {"select_k", spec.select_k}});
  ck.seed = spec.train.seed;
  ck.stage = spec.mode == AdaptMode::scratch ? Stage::scratch : Stage::adapted;
  // Frozen tensors are copied back from the source so they stay bit-identical
  // even through the float path.
  if (needs_ck && std::is_same_v<T, float>) {
    std::map<std::string, const Mat<double>*> by_name;
    for (const auto& [name, m] : tensor_refs(pretrained->params)) by_name[name] = m;
    const auto trainable = adapt_trainable(spec.mode);
    for (auto& [name, m] : tensor_refs(ck.params))
      if (!trainable(name)) *m = *by_name.at(name);
  }
  return out;
}

inline AdaptResult adapt(const Checkpoint* pretrained, const TaskDataset& target, const AdaptSpec& spec) {
  return spec.train.precision == Precision::f64 ? adapt_as<double>(pretrained, target, spec)
                                                : adapt_as<float>(pretrained, target, spec);
}

/// Ranked catalogue for one user sequence.
inline std::vector<std::pair<ItemId, double>> score_all_items(const Checkpoint& ck, const TaskDataset& target,
                                                              const std::vector<ItemId>& sequence) {
  if (ck.stage == Stage::pretrained) throw ValidationError("score_all_items: checkpoint must be adapted or scratch");
  return checkpoint_scorer(ck, target).ranked(sequence);
}

}  // namespace antrec
