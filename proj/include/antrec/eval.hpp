#pragma once

// Leave-one-out ranking metrics over the full target catalogue and the
// paired t-test used to compare two runs.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "antrec/checkpoint.hpp"
#include "antrec/dataio.hpp"
#include "antrec/digest.hpp"
#include "antrec/error.hpp"
#include "antrec/model.hpp"

namespace antrec {

inline double recall_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw ValidationError("rank must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

/// Single-relevant-item NDCG.
inline double ndcg_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw ValidationError("rank must be >= 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

enum class EvalSplit { validation, test };

inline std::string to_string(EvalSplit s) { return s == EvalSplit::validation ? "validation" : "test"; }

inline EvalSplit parse_split(const std::string& s) {
  if (s == "validation") return EvalSplit::validation;
  if (s == "test") return EvalSplit::test;
  throw ConfigError("split must be 'validation' or 'test', got '" + s + "'");
}

struct UserMetrics {
  std::string user_id;
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
};

inline constexpr int kMetricsReportVersion = 1;

struct MetricsReport {
  std::string task_id;
  std::vector<std::size_t> k_values{10, 50};
  std::vector<UserMetrics> users;
  std::map<std::size_t, double> recall_mean;
  std::map<std::size_t, double> ndcg_mean;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();

  double aggregate(const std::string& metric, std::size_t k) const {
    const auto& m = metric_map(metric);
    auto it = m.find(k);
    if (it == m.end()) throw ValidationError("report has no " + metric + "@" + std::to_string(k));
    return it->second;
  }

  std::vector<double> per_user(const std::string& metric, std::size_t k) const {
    std::vector<double> out;
    out.reserve(users.size());
    for (const auto& u : users) {
      const auto& m = metric == "recall" ? u.recall : metric == "ndcg" ? u.ndcg : throw ConfigError("unknown metric '" + metric + "'");
      auto it = m.find(k);
      if (it == m.end()) throw ValidationError("user " + u.user_id + " has no " + metric + "@" + std::to_string(k));
      out.push_back(it->second);
    }
    return out;
  }

 private:
  const std::map<std::size_t, double>& metric_map(const std::string& metric) const {
    if (metric == "recall") return recall_mean;
    if (metric == "ndcg") return ndcg_mean;
    throw ConfigError("metric must be 'recall' or 'ndcg', got '" + metric + "'");
  }
};

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  auto per_k = [](const std::map<std::size_t, double>& m) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m) j[std::to_string(k)] = v;
    return j;
  };
  nlohmann::ordered_json j;
  j["version"] = kMetricsReportVersion;
  j["task_id"] = r.task_id;
  j["k_values"] = r.k_values;
  j["users"] = nlohmann::ordered_json::array();
  for (const auto& u : r.users) {
    nlohmann::ordered_json ju;
    ju["user_id"] = u.user_id;
    ju["recall"] = per_k(u.recall);
    ju["ndcg"] = per_k(u.ndcg);
    j["users"].push_back(std::move(ju));
  }
  j["aggregates"]["recall"] = per_k(r.recall_mean);
  j["aggregates"]["ndcg"] = per_k(r.ndcg_mean);
  j["meta"] = r.meta;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::ordered_json& j) {
  try {
    if (j.at("version").get<int>() != kMetricsReportVersion)
      throw FormatError("metrics report: unsupported version " + j.at("version").dump());
    auto per_k = [](const nlohmann::ordered_json& o) {
      std::map<std::size_t, double> m;
      for (auto it = o.begin(); it != o.end(); ++it) m[std::stoul(it.key())] = it.value().get<double>();
      return m;
    };
    MetricsReport r;
    r.task_id = j.at("task_id").get<std::string>();
    r.k_values = j.at("k_values").get<std::vector<std::size_t>>();
    for (const auto& ju : j.at("users"))
      r.users.push_back(UserMetrics{ju.at("user_id").get<std::string>(), per_k(ju.at("recall")), per_k(ju.at("ndcg"))});
    r.recall_mean = per_k(j.at("aggregates").at("recall"));
    r.ndcg_mean = per_k(j.at("aggregates").at("ndcg"));
    r.meta = j.at("meta");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
}

/// Builds a report from 1-based ground-truth ranks.
inline MetricsReport metrics_from_ranks(const std::string& task_id, const std::vector<std::string>& user_ids,
                                        const std::vector<std::size_t>& ranks, const std::vector<std::size_t>& ks) {
  if (user_ids.size() != ranks.size()) throw ValidationError("metrics: one rank per user required");
  if (ks.empty()) throw ConfigError("metrics: at least one k is required");
  MetricsReport r;
  r.task_id = task_id;
  r.k_values = ks;
  for (std::size_t u = 0; u < ranks.size(); ++u) {
    UserMetrics m{user_ids[u], {}, {}};
    for (auto k : ks) {
      m.recall[k] = recall_at_k(ranks[u], k);
      m.ndcg[k] = ndcg_at_k(ranks[u], k);
    }
    r.users.push_back(std::move(m));
  }
  for (auto k : ks) {
    double rs = 0.0, ns = 0.0;
    for (const auto& u : r.users) {
      rs += u.recall.at(k);
      ns += u.ndcg.at(k);
    }
    const double n = static_cast<double>(std::max<std::size_t>(r.users.size(), 1));
    r.recall_mean[k] = rs / n;
    r.ndcg_mean[k] = ns / n;
  }
  return r;
}

struct EvalOptions {
  /// Test-time input is train + validation item.
  bool include_validation = true;
};

/// Input sequence and held-out item for each user under `split`.
inline std::vector<std::pair<std::vector<ItemId>, ItemId>> eval_cases(const SplitDataset& split, EvalSplit which,
                                                                      const EvalOptions& opt) {
  std::vector<std::pair<std::vector<ItemId>, ItemId>> out;
  out.reserve(split.users.size());
  for (const auto& u : split.users) {
    if (which == EvalSplit::validation) {
      out.emplace_back(u.train, u.validation);
    } else {
      auto seq = u.train;
      if (opt.include_validation) seq.push_back(u.validation);
      out.emplace_back(std::move(seq), u.test);
    }
  }
  return out;
}

/// Ranks of the held-out items under `scorer`.
template <class T>
std::vector<std::size_t> held_out_ranks(const Scorer<T>& scorer, const SplitDataset& split, EvalSplit which,
                                        const EvalOptions& opt = {}) {
  std::vector<std::size_t> ranks;
  ranks.reserve(split.users.size());
  for (const auto& [seq, truth] : eval_cases(split, which, opt)) {
    if (!scorer.table().contains(truth))
      throw ValidationError("ground-truth item " + std::to_string(truth) + " is not in the candidate table");
    ranks.push_back(rank_of(scorer.scores(seq), scorer.table().row(truth)));
  }
  return ranks;
}

inline Scorer<double> checkpoint_scorer(const Checkpoint& ck, const TaskDataset& target) {
  ItemTable table = ItemTable::from_task(target);
  if (ck.params.has_interaction_emb && ck.interaction_ids != table.ids())
    throw ValidationError("checkpoint interaction table was trained for a different item set than task " + target.task_id);
  return Scorer<double>(ck.params, ck.config, table, ck.price_norm);
}

inline MetricsReport evaluate(const Checkpoint& ck, const TaskDataset& target, EvalSplit which,
                              const std::vector<std::size_t>& ks = {10, 50}, const EvalOptions& opt = {}) {
  if (ck.stage == Stage::pretrained) throw ValidationError("evaluate: checkpoint must be adapted or scratch, got pretrained");
  const auto split = split_leave_one_out(target);
  const auto scorer = checkpoint_scorer(ck, target);
  std::vector<std::string> ids;
  for (const auto& u : split.users) ids.push_back(u.user_id);
  MetricsReport r = metrics_from_ranks(target.task_id, ids, held_out_ranks(scorer, split, which, opt), ks);
  r.meta["checkpoint_hash"] = to_hex(ck.config_hash);
  r.meta["seed"] = ck.seed;
  r.meta["stage"] = to_string(ck.stage);
  r.meta["variant"] = ck.params.has_interaction_emb ? "with_interaction_emb" : "base";
  r.meta["split"] = to_string(which);
  r.meta["include_validation"] = opt.include_validation;
  return r;
}

// ---------------------------------------------------------------------------
// Paired t-test

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
  double mean_diff = 0.0;
};

/// Two-sided paired t-test on per-item differences a - b. Zero-variance
/// differences give p = 0 (nonzero mean) or t = 0, p = 1 (all zero).
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("paired t-test: samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw ValidationError("paired t-test: need at least 2 pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTestResult r;
  r.df = n - 1;
  r.mean_diff = mean;
  if (sd == 0.0) {
    if (mean == 0.0) return r;
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(r.df));
  r.p = 2.0 * boost::math::cdf(dist, -std::abs(r.t));
  return r;
}

inline TTestResult paired_t_test(const MetricsReport& a, const MetricsReport& b, const std::string& metric, std::size_t k) {
  if (a.users.size() != b.users.size()) throw ValidationError("paired t-test: reports cover different user sets");
  for (std::size_t i = 0; i < a.users.size(); ++i)
    if (a.users[i].user_id != b.users[i].user_id)
      throw ValidationError("paired t-test: user " + a.users[i].user_id + " vs " + b.users[i].user_id + " at position " +
                            std::to_string(i));
  return paired_t_test(a.per_user(metric, k), b.per_user(metric, k));
}

}  // namespace antrec
