#pragma once

// The full recommender: item representation layer, intent encoder and the
// optional per-item interaction table, plus the item catalogue it scores.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antrec/autodiff.hpp"
#include "antrec/dataio.hpp"
#include "antrec/error.hpp"
#include "antrec/intent.hpp"
#include "antrec/irl.hpp"
#include "antrec/params.hpp"

namespace antrec {

struct ModelConfig {
  IrlConfig irl;
  IntentConfig intent;
  std::uint32_t d_text = 0;
  std::uint32_t d_image = 0;
  bool interaction_emb = false;

  void validate() const {
    irl.validate();
    intent.validate();
    if (irl.d != intent.d) throw ConfigError("model: item and intent dimensions differ");
    if (d_text < 1 || d_image < 1) throw ConfigError("model: modality dimensions must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"irl", c.irl},
                     {"intent", c.intent},
                     {"d_text", c.d_text},
                     {"d_image", c.d_image},
                     {"interaction_emb", c.interaction_emb}};
}

template <class E>
struct ModelTensors {
  using element_type = E;
  IrlTensors<E> irl;
  IntentTensors<E> intent;
  bool has_interaction_emb = false;
  E interaction_emb{};  // one row per catalogue item

  template <class F>
  void for_each(F&& f) {
    irl.for_each(f);
    intent.for_each(f);
    if (has_interaction_emb) f(std::string("interaction_emb"), interaction_emb);
  }
  template <class F>
  void for_each(F&& f) const {
    irl.for_each(f);
    intent.for_each(f);
    if (has_interaction_emb) f(std::string("interaction_emb"), interaction_emb);
  }

  template <class E2>
  ModelTensors<E2> with_element() const {
    ModelTensors<E2> t;
    t.irl = irl.template with_element<E2>();
    t.intent = intent.template with_element<E2>();
    t.has_interaction_emb = has_interaction_emb;
    return t;
  }
};

template <class T>
using ModelParams = ModelTensors<Mat<T>>;

inline bool is_irl_tensor(const std::string& name) { return name.starts_with("irl."); }

template <class T>
Mat<T> init_interaction_emb(std::size_t n_items, std::size_t d, std::uint64_t seed) {
  return init_embedding<T>(static_cast<Eigen::Index>(n_items), static_cast<Eigen::Index>(d), seed, "interaction_emb");
}

template <class T>
ModelParams<T> init_model(const ModelConfig& cfg, std::size_t n_items, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  p.irl = init_irl<T>(cfg.irl, cfg.d_text, cfg.d_image, seed);
  p.intent = init_intent<T>(cfg.intent, seed);
  if (cfg.interaction_emb) {
    p.has_interaction_emb = true;
    p.interaction_emb = init_interaction_emb<T>(n_items, cfg.irl.d, seed);
  }
  return p;
}

/// Converts every tensor to another scalar type.
template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out = p.template with_element<Mat<To>>();
  auto src = tensor_refs(p);
  auto dst = tensor_refs(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<To>();
  return out;
}

/// Puts every tensor on `tape`; tensors for which `trainable(name)` holds
/// become variables, the rest constants.
template <class T, class Pred>
ModelTensors<ad::Var<T>> bind_params(ad::Tape<T>& tape, const ModelParams<T>& p, Pred&& trainable) {
  auto vars = p.template with_element<ad::Var<T>>();
  auto src = tensor_refs(p);
  auto dst = tensor_refs(vars);
  for (std::size_t i = 0; i < src.size(); ++i)
    *dst[i].second = trainable(src[i].first) ? tape.variable(*src[i].second) : tape.constant(*src[i].second);
  return vars;
}

template <class T>
ModelTensors<ad::Var<T>> bind_constants(ad::Tape<T>& tape, const ModelParams<T>& p) {
  return bind_params(tape, p, [](const std::string&) { return false; });
}

// ---------------------------------------------------------------------------
// Item catalogue

/// Items in ascending id order with a lookup from id to row.
class ItemTable {
 public:
  ItemTable() = default;

  static ItemTable from_tasks(const std::vector<const TaskDataset*>& tasks) {
    ItemTable t;
    std::map<ItemId, const ItemRecord*> merged;
    for (const auto* ds : tasks)
      for (const auto& [id, rec] : ds->items) {
        auto [it, fresh] = merged.emplace(id, &rec);
        if (!fresh && (it->second->text_emb != rec.text_emb || it->second->image_emb != rec.image_emb ||
                       it->second->price != rec.price))
          throw ValidationError("item " + std::to_string(id) + " differs between tasks");
      }
    for (const auto& [id, rec] : merged) {
      t.index_.emplace(id, t.records_.size());
      t.records_.push_back(*rec);
    }
    return t;
  }

  static ItemTable from_task(const TaskDataset& ds) { return from_tasks({&ds}); }

  std::size_t size() const { return records_.size(); }
  const ItemRecord& record(std::size_t row) const { return records_.at(row); }
  ItemId id(std::size_t row) const { return records_.at(row).item_id; }
  bool contains(ItemId id) const { return index_.count(id) != 0; }

  std::size_t row(ItemId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("item " + std::to_string(id) + " is not in the candidate table");
    return it->second;
  }

  std::vector<ItemId> ids() const {
    std::vector<ItemId> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.item_id);
    return out;
  }

  std::vector<std::size_t> rows(const std::vector<ItemId>& ids) const {
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (ItemId id : ids) out.push_back(row(id));
    return out;
  }

  template <class T>
  ItemFeatures<T> features(const IrlConfig& cfg, const PriceNorm& norm) const {
    std::vector<const ItemRecord*> ptrs;
    ptrs.reserve(records_.size());
    for (const auto& r : records_) ptrs.push_back(&r);
    return item_features<T>(ptrs, cfg, norm);
  }

 private:
  std::vector<ItemRecord> records_;
  std::map<ItemId, std::size_t> index_;
};

template <class T>
ItemFeatures<T> select_features(const ItemFeatures<T>& f, const std::vector<std::size_t>& rows) {
  ItemFeatures<T> out{Mat<T>(static_cast<Eigen::Index>(rows.size()), f.text.cols()),
                      Mat<T>(static_cast<Eigen::Index>(rows.size()), f.image.cols()),
                      Mat<T>(static_cast<Eigen::Index>(rows.size()), f.price.cols())};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    out.text.row(static_cast<Eigen::Index>(i)) = f.text.row(r);
    out.image.row(static_cast<Eigen::Index>(i)) = f.image.row(r);
    out.price.row(static_cast<Eigen::Index>(i)) = f.price.row(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes

template <class T>
struct TableVars {
  IrlVars<T> irl;
  ad::Var<T> items;  // comprehensive embedding per row, interaction rows added
};

/// Item embeddings for the rows of `features`. `emb_rows` selects the
/// interaction-table rows that go with them (all rows in order when null).
template <class T>
TableVars<T> item_table_forward(ad::Tape<T>& tape, const ModelTensors<ad::Var<T>>& p, const ItemFeatures<T>& features,
                                const ModelConfig& cfg, RoutingMode mode, std::mt19937_64* rng,
                                const std::vector<std::size_t>* emb_rows = nullptr) {
  TableVars<T> out;
  out.irl = irl_forward(tape, p.irl, features, cfg.irl, mode, rng);
  out.items = out.irl.item;
  if (p.has_interaction_emb) {
    const auto e = emb_rows ? ad::gather_rows(p.interaction_emb, *emb_rows) : p.interaction_emb;
    if (e.rows() != out.items.rows()) throw ValidationError("interaction table does not match the candidate table");
    out.items = ad::add(out.items, e);
  }
  return out;
}

/// Hidden states for each sequence of item-table rows, stacked. With
/// `last_only` one row per sequence, else one row per position.
template <class T>
ad::Var<T> encode_batch(const ad::Var<T>& item_table, const IntentTensors<ad::Var<T>>& p, const IntentConfig& cfg,
                        const std::vector<std::vector<std::size_t>>& sequences, bool last_only,
                        const EncodeOptions<T>& opt = {}) {
  std::vector<ad::Var<T>> rows;
  rows.reserve(sequences.size());
  for (const auto& s : sequences) {
    const auto h = encode_sequence(ad::gather_rows(item_table, s), p, cfg, opt);
    rows.push_back(last_only ? ad::slice_rows(h, h.rows() - 1, 1) : h);
  }
  if (rows.empty()) throw ValidationError("encode_batch: no sequences");
  return rows.size() == 1 ? rows[0] : ad::concat_rows(rows);
}

/// Deterministic scorer over a fixed catalogue: mean-mode routing, no dropout.
template <class T>
class Scorer {
 public:
  Scorer(const ModelParams<T>& params, const ModelConfig& cfg, const ItemTable& table, const PriceNorm& norm)
      : params_(params), cfg_(cfg), table_(table) {
    if (params.has_interaction_emb && params.interaction_emb.rows() != static_cast<Eigen::Index>(table.size()))
      throw ValidationError("interaction table does not match the candidate table");
    ad::Tape<T> tape;
    const auto vars = bind_constants(tape, params_);
    const auto f = table.template features<T>(cfg.irl, norm);
    items_ = item_table_forward(tape, vars, f, cfg_, RoutingMode::mean, nullptr).items.value();
    normalized_ = items_;
    for (Eigen::Index i = 0; i < normalized_.rows(); ++i) {
      const T n = normalized_.row(i).norm();
      if (!std::isfinite(n))
        throw NumericError("item " + std::to_string(table.id(static_cast<std::size_t>(i))) + " has a non-finite embedding");
      if (!(n > T(0))) throw ValidationError("item " + std::to_string(table.id(static_cast<std::size_t>(i))) + " has a zero embedding");
      normalized_.row(i) /= n;
    }
  }

  const Mat<T>& item_embeddings() const { return items_; }
  const ItemTable& table() const { return table_; }

  /// Preference vector: last hidden row over the sequence.
  Mat<T> preference(const std::vector<ItemId>& sequence) const {
    if (sequence.empty()) throw ValidationError("score: empty sequence");
    std::vector<ItemId> tail = sequence;
    if (tail.size() > cfg_.intent.max_seq_len)
      tail.erase(tail.begin(), tail.end() - static_cast<std::ptrdiff_t>(cfg_.intent.max_seq_len));
    const auto rows = table_.rows(tail);
    Mat<T> x(static_cast<Eigen::Index>(rows.size()), items_.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = items_.row(static_cast<Eigen::Index>(rows[i]));
    const Mat<T> h = encode_sequence(x, params_.intent, cfg_.intent);
    return h.bottomRows(1);
  }

  /// Cosine score for every catalogue row.
  std::vector<double> scores(const std::vector<ItemId>& sequence) const {
    Mat<T> h = preference(sequence);
    const T n = h.norm();
    if (!(n > T(0))) throw ValidationError("score: zero preference vector");
    h /= n;
    const Mat<T> s = normalized_ * h.transpose();
    std::vector<double> out(static_cast<std::size_t>(s.rows()));
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::clamp(static_cast<double>(s(static_cast<Eigen::Index>(i), 0)), -1.0, 1.0);
    return out;
  }

  /// All items by descending score, ties by ascending id.
  std::vector<std::pair<ItemId, double>> ranked(const std::vector<ItemId>& sequence) const {
    const auto s = scores(sequence);
    std::vector<std::pair<ItemId, double>> out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out.emplace_back(table_.id(i), s[i]);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    return out;
  }

 private:
  ModelParams<T> params_;
  ModelConfig cfg_;
  ItemTable table_;
  Mat<T> items_;
  Mat<T> normalized_;
};

/// 1-based rank of `truth_row` under descending score with ascending-id ties.
/// Catalogue rows are in ascending id order, so id order equals row order.
inline std::size_t rank_of(const std::vector<double>& scores, std::size_t truth_row) {
  const double s = scores.at(truth_row);
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > s || (scores[i] == s && i < truth_row)) ++ahead;
  return ahead + 1;
}

}  // namespace antrec
