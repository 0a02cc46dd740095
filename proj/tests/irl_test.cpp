#include <gtest/gtest.h>

#include <cmath>

#include "antrec/irl.hpp"
#include "test_util.hpp"

using namespace antrec;
using antrec::testing::max_gradient_error;
using antrec::testing::random_mat;

namespace {

IrlConfig tiny_config() {
  IrlConfig c;
  c.d = 4;
  c.n_h = 2;
  c.d_p = 4;
  return c;
}

std::vector<ItemRecord> tiny_items() {
  return {ItemRecord{1, {0.5f, -1.0f, 2.0f}, {1.0f, 0.0f}, 10.0}, ItemRecord{2, {1.5f, 0.5f, -0.5f}, {-1.0f, 2.0f}, 55.0},
          ItemRecord{3, {-0.2f, 0.3f, 0.9f}, {0.3f, 0.7f}, 90.0}};
}

std::vector<const ItemRecord*> ptrs(const std::vector<ItemRecord>& v) {
  std::vector<const ItemRecord*> out;
  for (const auto& r : v) out.push_back(&r);
  return out;
}

}  // namespace

TEST(PriceEncoding, KnownValues) {
  const auto e = encode_price(1.0, 2, 50000.0);
  EXPECT_NEAR(e(0, 0), 0.841471, 1e-6);
  EXPECT_NEAR(e(0, 1), 0.540302, 1e-6);
  const auto z = encode_price(0.0, 8, 50000.0);
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(z(0, 2 * j), 0.0);
    EXPECT_EQ(z(0, 2 * j + 1), 1.0);
  }
}

TEST(PriceEncoding, ConstantNormAndTranslationInvariance) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double p = u(rng), q = u(rng), c = u(rng);
    EXPECT_NEAR(encode_price(p, 64, 5e4).squaredNorm(), 32.0, 1e-9);
    const double a = (encode_price(p, 64, 5e4) * encode_price(q, 64, 5e4).transpose())(0, 0);
    const double b = (encode_price(p + c, 64, 5e4) * encode_price(q + c, 64, 5e4).transpose())(0, 0);
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(PriceEncoding, Errors) {
  EXPECT_THROW(encode_price(1.0, 3, 5e4), ConfigError);
  EXPECT_THROW(encode_price(std::nan(""), 4, 5e4), ValidationError);
}

TEST(Projections, HandOracles) {
  Mat<double> v(1, 2), b(1, 2), w(2, 2);
  v << 1, 2;
  b << 1, 0;
  w << 1, 0, 0, 2;
  const auto white = whiten_project(v, b, w);
  EXPECT_DOUBLE_EQ(white(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(white(0, 1), 4.0);

  Mat<double> x(1, 2), m(2, 2), bias(1, 2);
  x << 1, 1;
  m << 1, 2, 3, 4;
  bias << 1, 1;
  const auto lin = linear_project(x, m, bias);
  EXPECT_DOUBLE_EQ(lin(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(lin(0, 1), 7.0);

  Mat<double> t(1, 3), i(1, 3);
  t << 1, 0, -1;
  i << 4, 5, 3;
  EXPECT_TRUE(fuse(t, i).isApprox((Mat<double>(1, 3) << 4, 0, -3).finished()));
  EXPECT_THROW(fuse(t, Mat<double>(1, 2)), ValidationError);
}

TEST(Routing, MeanModeWeightsFollowSoftmax) {
  // raw = [1], mean logits = [ln 3, 0] -> weights [0.75, 0.25]
  Mat<double> raw(1, 1), mu(1, 2), sd(1, 2);
  raw << 1;
  mu << std::log(3.0), 0.0;
  sd << 0.3, -0.1;
  Mat<double> h0(1, 2), h1(1, 2);
  h0 << 4, 0;
  h1 << 0, 8;
  const auto [out, w] = gaussian_route<double>(raw, {h0, h1}, mu, sd, RoutingMode::mean);
  EXPECT_NEAR(w(0, 0), 0.75, 1e-12);
  EXPECT_NEAR(w(0, 1), 0.25, 1e-12);
  EXPECT_NEAR(out(0, 0), 3.0, 1e-12);
  EXPECT_NEAR(out(0, 1), 2.0, 1e-12);
}

TEST(Routing, SampleModeStaysOnSimplexAndNeedsRng) {
  std::mt19937_64 rng(3);
  const Mat<double> raw = random_mat(50, 6, rng);
  std::vector<Mat<double>> heads;
  for (int k = 0; k < 4; ++k) heads.push_back(random_mat(50, 3, rng));
  const Mat<double> mu = random_mat(6, 4, rng, 3.0), sd = random_mat(6, 4, rng, 3.0);
  const auto [out, w] = gaussian_route(raw, heads, mu, sd, RoutingMode::sample, &rng);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-9);
    EXPECT_GE(w.row(i).minCoeff(), 0.0);
  }
  EXPECT_THROW(gaussian_route(raw, heads, mu, sd, RoutingMode::sample), ValidationError);
  const auto [out_a, w_a] = gaussian_route(raw, heads, mu, sd, RoutingMode::mean);
  const auto [out_b, w_b] = gaussian_route(raw, heads, mu, sd, RoutingMode::mean);
  EXPECT_EQ(out_a, out_b);
}

TEST(PriceNormalization, FitApplyAndClamp) {
  TaskDataset a, b;
  a.items[1] = ItemRecord{1, {}, {}, 20.0};
  b.items[2] = ItemRecord{2, {}, {}, 220.0};
  const auto n = PriceNorm::fit({&a, &b});
  EXPECT_EQ(n.min, 20.0);
  EXPECT_EQ(n.max, 220.0);
  EXPECT_DOUBLE_EQ(n.apply(120.0, 100.0), 50.0);
  EXPECT_DOUBLE_EQ(n.apply(500.0, 100.0), 100.0);
  EXPECT_DOUBLE_EQ(n.apply(0.0, 100.0), 0.0);
}

TEST(Irl, InitDependsOnlyOnSeedNameShape) {
  const auto cfg = tiny_config();
  const auto p1 = init_irl<double>(cfg, 3, 2, 5);
  const auto p2 = init_irl<double>(cfg, 3, 2, 5);
  const auto p3 = init_irl<double>(cfg, 3, 2, 6);
  const auto r1 = tensor_refs(p1), r2 = tensor_refs(p2), r3 = tensor_refs(p3);
  ASSERT_EQ(r1.size(), r2.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < r1.size(); ++i) {
    EXPECT_EQ(r1[i].first, r2[i].first);
    EXPECT_EQ(*r1[i].second, *r2[i].second);
    any_diff |= r1[i].second->size() > 0 && !(*r1[i].second == *r3[i].second) && r1[i].second->norm() > 0;
  }
  EXPECT_TRUE(any_diff);
  EXPECT_EQ(p1.text.proj.size(), 2u);
  EXPECT_EQ(p1.text.proj[0].rows(), 3);
  EXPECT_EQ(p1.price.proj[0].rows(), 4);
  EXPECT_EQ(p1.text.route_mean.cols(), 2);
}

TEST(Irl, ComposesModalitiesWithFusion) {
  auto cfg = tiny_config();
  const auto items = tiny_items();
  const auto params = init_irl<double>(cfg, 3, 2, 1);
  ad::Tape<double> tape;
  const auto vars = bind_constant(tape, params);
  const auto f = item_features<double>(ptrs(items), cfg, PriceNorm{});
  const auto out = irl_forward(tape, vars, f, cfg, RoutingMode::mean, nullptr);
  const Mat<double> expected =
      out.text.value() + out.image.value() + out.price.value() + cfg.beta * out.text.value().cwiseProduct(out.image.value());
  EXPECT_TRUE(out.item.value().isApprox(expected, 1e-12));
  EXPECT_EQ(out.item.rows(), 3);
  EXPECT_EQ(out.item.cols(), 4);

  cfg.zero_text = true;
  ad::Tape<double> tape2;
  const auto out2 = irl_forward(tape2, bind_constant(tape2, params), f, cfg, RoutingMode::mean, nullptr);
  EXPECT_TRUE(out2.item.value().isApprox(out.image.value() + out.price.value(), 1e-12));
  EXPECT_EQ(out2.fused.value().norm(), 0.0);
}

TEST(Irl, LinearRoutingUsesSingleHead) {
  auto cfg = tiny_config();
  cfg.linear_routing = true;
  const auto items = tiny_items();
  const auto params = init_irl<double>(cfg, 3, 2, 1);
  ad::Tape<double> tape;
  const auto f = item_features<double>(ptrs(items), cfg, PriceNorm{});
  const auto out = irl_forward(tape, bind_constant(tape, params), f, cfg, RoutingMode::sample, nullptr);
  EXPECT_TRUE(out.text.value().isApprox(whiten_project(f.text, params.text.shift[0], params.text.proj[0]), 1e-12));
  EXPECT_FALSE(out.text_weights.valid());
}

TEST(Irl, GradientsMatchFiniteDifferences) {
  const auto cfg = tiny_config();
  const auto items = tiny_items();
  auto params = init_irl<double>(cfg, 3, 2, 4);
  // make shifts and biases non-trivial so their gradients are exercised
  std::mt19937_64 g(9);
  for (auto& [name, m] : tensor_refs(params)) *m = random_mat(m->rows(), m->cols(), g, 0.5);
  const auto f = item_features<double>(ptrs(items), cfg, PriceNorm{});
  std::vector<Mat<double>> inputs;
  for (auto& [name, m] : tensor_refs(params)) inputs.push_back(*m);
  for (auto mode : {RoutingMode::mean, RoutingMode::sample}) {
    const double err = max_gradient_error(inputs, [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& v) {
      auto vars = params.with_element<ad::Var<double>>();
      auto refs = tensor_refs(vars);
      for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].second = v[i];
      std::mt19937_64 rng(21);
      const auto out = irl_forward(tape, vars, f, cfg, mode, &rng);
      return ad::sum(ad::hadamard(out.item, out.item));
    });
    EXPECT_LT(err, 1e-6) << to_string(mode);
  }
}

TEST(Irl, ConfigValidation) {
  IrlConfig c;
  c.d_p = 63;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.beta = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_routing("greedy"), ConfigError);
}
