#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "antrec/eval.hpp"

using namespace antrec;

TEST(Metrics, RecallBoundaries) {
  EXPECT_EQ(recall_at_k(1, 10), 1.0);
  EXPECT_EQ(recall_at_k(10, 10), 1.0);
  EXPECT_EQ(recall_at_k(11, 10), 0.0);
  EXPECT_THROW(recall_at_k(0, 10), ValidationError);
}

TEST(Metrics, NdcgValues) {
  EXPECT_EQ(ndcg_at_k(1, 10), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k(3, 10), 0.5);
  EXPECT_EQ(ndcg_at_k(12, 10), 0.0);
  for (std::size_t r = 1; r < 60; ++r) {
    EXPECT_GE(ndcg_at_k(r, 50), ndcg_at_k(r + 1, 50));
    EXPECT_LE(ndcg_at_k(r, 10), ndcg_at_k(r, 50));
  }
}

TEST(Metrics, ComposedReport) {
  const auto r = metrics_from_ranks("t", {"a", "b"}, {1, 3}, {10, 50});
  EXPECT_EQ(r.aggregate("recall", 10), 1.0);
  EXPECT_DOUBLE_EQ(r.aggregate("ndcg", 10), 0.75);
  const auto perfect = metrics_from_ranks("t", {"a", "b", "c"}, {1, 1, 1}, {10, 50});
  for (auto k : {10u, 50u}) {
    EXPECT_EQ(perfect.aggregate("recall", k), 1.0);
    EXPECT_EQ(perfect.aggregate("ndcg", k), 1.0);
  }
}

TEST(Metrics, RankOfBreaksTiesByRow) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.1};
  EXPECT_EQ(rank_of(s, 1), 1u);
  EXPECT_EQ(rank_of(s, 0), 2u);
  EXPECT_EQ(rank_of(s, 2), 3u);
  EXPECT_EQ(rank_of(s, 3), 4u);
}

TEST(Metrics, JsonRoundTripKeepsKeyOrder) {
  auto r = metrics_from_ranks("task_3", {"u1", "u2"}, {4, 70}, {10, 50});
  r.meta["seed"] = 3;
  const auto j = to_json(r);
  const std::string text = j.dump();
  EXPECT_LT(text.find("\"version\""), text.find("\"task_id\""));
  EXPECT_LT(text.find("\"users\""), text.find("\"aggregates\""));
  const auto back = report_from_json(nlohmann::ordered_json::parse(text));
  EXPECT_EQ(to_json(back).dump(), text);
  EXPECT_EQ(back.per_user("ndcg", 10)[0], ndcg_at_k(4, 10));
  EXPECT_THROW(report_from_json(nlohmann::ordered_json::parse("{\"version\":2}")), FormatError);
  EXPECT_THROW(report_from_json(nlohmann::ordered_json::parse("{\"version\":1}")), FormatError);
}

TEST(TTest, HandComputedExample) {
  const std::vector<double> a{1, -1, 2, 0, 3}, b(5, 0.0);
  const auto r = paired_t_test(a, b);
  EXPECT_EQ(r.df, 4u);
  EXPECT_NEAR(r.t, std::sqrt(2.0), 1e-12);
  // Independent check: integrate the t(4) density from |t| to a large bound
  // with composite Simpson and double it.
  auto pdf = [](double x) { return 3.0 / 8.0 * std::pow(1.0 + x * x / 4.0, -2.5); };
  const double lo = std::sqrt(2.0), hi = 4000.0;
  const int n = 2'000'000;
  const double h = (hi - lo) / n;
  double s = pdf(lo) + pdf(hi);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(lo + i * h);
  const double tail = s * h / 3.0;  // mass beyond hi is below 1e-13
  EXPECT_NEAR(r.p, 2.0 * tail, 1e-8);
  EXPECT_NEAR(r.p, 0.2302, 1e-4);
}

TEST(TTest, DegenerateConventions) {
  const std::vector<double> x{0.3, 0.5, 0.1};
  auto same = paired_t_test(x, x);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p, 1.0);
  const std::vector<double> ones{1, 1, 1, 1}, zeros(4, 0.0);
  EXPECT_EQ(paired_t_test(ones, zeros).p, 0.0);
  EXPECT_THROW(paired_t_test(std::vector<double>{1}, std::vector<double>{0}), ValidationError);
  EXPECT_THROW(paired_t_test(ones, x), ValidationError);
}

TEST(TTest, AntisymmetricInArguments) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(30), b(30);
  for (auto& v : a) v = n(rng);
  for (auto& v : b) v = n(rng) + 0.3;
  const auto ab = paired_t_test(a, b), ba = paired_t_test(b, a);
  EXPECT_DOUBLE_EQ(ab.t, -ba.t);
  EXPECT_DOUBLE_EQ(ab.p, ba.p);
}

TEST(TTest, ReportsMustCoverSameUsers) {
  const auto a = metrics_from_ranks("t", {"a", "b"}, {1, 3}, {10});
  const auto b = metrics_from_ranks("t", {"a", "c"}, {1, 3}, {10});
  EXPECT_THROW(paired_t_test(a, b, "recall", 10), ValidationError);
  const auto r = paired_t_test(a, a, "ndcg", 10);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);
  EXPECT_THROW(paired_t_test(a, a, "mrr", 10), ConfigError);
}
