#include <gtest/gtest.h>

#include <cmath>

#include "antrec/intent.hpp"
#include "test_util.hpp"

using namespace antrec;
using antrec::testing::max_gradient_error;
using antrec::testing::random_mat;

namespace {

IntentConfig small_config() {
  IntentConfig c;
  c.d = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 10;
  c.dropout = 0.0;
  return c;
}

Mat<double> layer_norm(const Mat<double>& x, const Mat<double>& g, const Mat<double>& b, double eps) {
  Mat<double> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    out.row(i) = ((x.row(i).array() - mean) / std::sqrt(var + eps)).matrix().cwiseProduct(g.row(0)) + b.row(0);
  }
  return out;
}

// Straight-line reference for one post-norm layer with a single head.
Mat<double> reference_layer(const Mat<double>& x, const LayerTensors<Mat<double>>& p, double eps) {
  const Mat<double> q = (x * p.wq).rowwise() + p.bq.row(0);
  const Mat<double> k = x * p.wk;
  const Mat<double> v = (x * p.wv).rowwise() + p.bv.row(0);
  const auto n = x.rows();
  Mat<double> attn = Mat<double>::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double z = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) z += std::exp(q.row(i).dot(k.row(j)) / std::sqrt(double(x.cols())));
    for (Eigen::Index j = 0; j <= i; ++j) attn(i, j) = std::exp(q.row(i).dot(k.row(j)) / std::sqrt(double(x.cols()))) / z;
  }
  const Mat<double> a = ((attn * v) * p.wo).rowwise() + p.bo.row(0);
  const Mat<double> h = layer_norm(x + a, p.ln1_gain, p.ln1_bias, eps);
  const Mat<double> f1 = ((h * p.ff1_w).rowwise() + p.ff1_b.row(0)).cwiseMax(0.0);
  const Mat<double> f = (f1 * p.ff2_w).rowwise() + p.ff2_b.row(0);
  return layer_norm(h + f, p.ln2_gain, p.ln2_bias, eps);
}

}  // namespace

TEST(Intent, MatchesStraightLineReference) {
  IntentConfig cfg = small_config();
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  auto params = init_intent<double>(cfg, 3);
  std::mt19937_64 rng(2);
  for (auto& [name, m] : tensor_refs(params)) *m = random_mat(m->rows(), m->cols(), rng, 0.4);
  const Mat<double> items = random_mat(5, 8, rng);
  const Mat<double> got = encode_sequence(items, params, cfg);
  const Mat<double> want = reference_layer(items + params.pos_emb.topRows(5), params.layers[0], cfg.ln_eps);
  EXPECT_TRUE(got.isApprox(want, 1e-10));
}

TEST(Intent, IsStrictlyCausal) {
  const auto cfg = small_config();
  const auto params = init_intent<double>(cfg, 7);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pos(0, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const Mat<double> a = random_mat(9, 8, rng);
    Mat<double> b = a;
    const int t = pos(rng);
    b.bottomRows(9 - (t + 1)) = random_mat(9 - (t + 1), 8, rng);
    const Mat<double> ha = encode_sequence(a, params, cfg);
    const Mat<double> hb = encode_sequence(b, params, cfg);
    EXPECT_EQ(ha.topRows(t + 1), hb.topRows(t + 1)) << "trial " << trial << " t " << t;
  }
}

TEST(Intent, AttentionRowsAreCausalDistributions) {
  const auto cfg = small_config();
  const auto params = init_intent<double>(cfg, 7);
  std::mt19937_64 rng(5);
  std::vector<Mat<double>> attn;
  EncodeOptions<double> opt;
  opt.attention_out = &attn;
  encode_sequence(Mat<double>(random_mat(6, 8, rng)), params, cfg, opt);
  ASSERT_EQ(attn.size(), cfg.n_layers * cfg.n_heads);
  for (const auto& a : attn)
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
      for (Eigen::Index j = i + 1; j < a.cols(); ++j) EXPECT_EQ(a(i, j), 0.0);
    }
}

TEST(Intent, GradientsMatchFiniteDifferences) {
  for (bool pre_norm : {false, true}) {
    auto cfg = small_config();
    cfg.pre_norm = pre_norm;
    cfg.max_seq_len = 4;
    const auto params = init_intent<double>(cfg, 1);
    std::mt19937_64 rng(8);
    std::vector<Mat<double>> inputs{random_mat(4, 8, rng)};
    for (const auto& [name, m] : tensor_refs(params)) inputs.push_back(*m);
    std::size_t worst = 0;
    const double err = max_gradient_error(inputs, [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& v) {
      auto vars = params.with_element<ad::Var<double>>();
      auto refs = tensor_refs(vars);
      for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].second = v[i + 1];
      (void)tape;
      const auto h = encode_sequence(v[0], vars, cfg);
      return ad::sum(ad::hadamard(h, ad::slice_rows(v[0], 0, 4)));
    }, 1e-5, 1e-8, &worst);
    EXPECT_LT(err, 1e-5) << "pre_norm=" << pre_norm << " worst input " << worst;
  }
}

TEST(Intent, DropoutOnlyInTraining) {
  auto cfg = small_config();
  cfg.dropout = 0.5;
  const auto params = init_intent<double>(cfg, 1);
  std::mt19937_64 rng(3);
  const Mat<double> x = random_mat(6, 8, rng);
  EXPECT_EQ(encode_sequence(x, params, cfg), encode_sequence(x, params, cfg));
  EncodeOptions<double> train;
  train.train = true;
  train.rng = &rng;
  EXPECT_FALSE(encode_sequence(x, params, cfg, train).isApprox(encode_sequence(x, params, cfg)));
  train.rng = nullptr;
  EXPECT_THROW(encode_sequence(x, params, cfg, train), ValidationError);
}

TEST(Intent, RejectsBadShapes) {
  const auto cfg = small_config();
  const auto params = init_intent<double>(cfg, 1);
  EXPECT_THROW(encode_sequence(Mat<double>(Mat<double>::Ones(11, 8)), params, cfg), ValidationError);
  EXPECT_THROW(encode_sequence(Mat<double>(Mat<double>::Ones(3, 7)), params, cfg), ValidationError);
  EXPECT_THROW(encode_sequence(Mat<double>(0, 8), params, cfg), ValidationError);
  IntentConfig bad = cfg;
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Intent, ParameterNamesAreStable) {
  const auto params = init_intent<double>(small_config(), 1);
  const auto refs = tensor_refs(params);
  EXPECT_EQ(refs.front().first, "intent.pos_emb");
  EXPECT_EQ(refs[1].first, "intent.layer0.attn_q.weight");
  EXPECT_EQ(refs.size(), 1u + 2 * 15);
  EXPECT_TRUE(is_position_tensor(refs.front().first));
}
