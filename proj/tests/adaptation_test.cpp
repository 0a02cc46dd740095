#include <gtest/gtest.h>

#include <cmath>

#include "antrec/adaptation.hpp"
#include "test_util.hpp"

using namespace antrec;

namespace {

struct Fixture {
  std::vector<TaskDataset> suite;
  Checkpoint pretrained;
};

SynthConfig synth() {
  SynthConfig s;
  s.n_tasks = 3;
  s.n_items_per_task = 30;
  s.n_users_per_task = 25;
  s.d_text = 8;
  s.d_image = 6;
  s.latent_dim = 4;
  s.n_clusters = 5;
  s.seq_len_max = 10;
  s.seed = 11;
  return s;
}

IrlConfig irl() {
  IrlConfig c;
  c.d = 16;
  c.n_h = 2;
  c.d_p = 8;
  return c;
}

IntentConfig intent() {
  IntentConfig c;
  c.n_layers = 1;
  c.max_seq_len = 20;
  return c;
}

TrainConfig train(std::uint64_t seed = 1) {
  TrainConfig t;
  t.batch_size = 16;
  t.n_epochs = 3;
  t.seed = seed;
  return t;
}

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.suite = generate_synthetic_tasks(synth());
    x.pretrained = pretrain({&x.suite[0], &x.suite[1]}, train(), irl(), intent()).checkpoint;
    return x;
  }();
  return f;
}

AdaptSpec spec(AdaptMode mode, Variant v = Variant::base, std::uint64_t seed = 2) {
  AdaptSpec s;
  s.mode = mode;
  s.variant = v;
  s.train = train(seed);
  s.irl = irl();
  s.intent = intent();
  return s;
}

std::map<std::string, Mat<double>> by_name(const ModelParams<double>& p) {
  std::map<std::string, Mat<double>> out;
  for (const auto& [n, m] : tensor_refs(p)) out[n] = *m;
  return out;
}

}  // namespace

TEST(Adapt, RelearnFreezesEncoderBody) {
  const auto& f = fixture();
  const auto res = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn));
  const auto src = by_name(f.pretrained.params);
  const auto out = by_name(res.checkpoint.params);
  std::size_t frozen = 0;
  for (const auto& [name, m] : out) {
    if (is_irl_tensor(name) || is_position_tensor(name)) {
      EXPECT_NE(m, src.at(name)) << name;
    } else {
      EXPECT_EQ(m, src.at(name)) << name;
      ++frozen;
    }
  }
  EXPECT_GT(frozen, 10u);
  EXPECT_EQ(res.checkpoint.stage, Stage::adapted);
  EXPECT_EQ(res.epoch_losses.size(), 3u);
  EXPECT_GE(res.best_epoch, 1u);
}

TEST(Adapt, RelearnInitDependsOnlyOnAdaptSeed) {
  const auto& f = fixture();
  auto s = spec(AdaptMode::relearn, Variant::base, 4);
  s.train.n_epochs = 0;
  const auto res = adapt(&f.pretrained, f.suite[2], s);
  const auto fresh = init_irl<double>(res.checkpoint.config.irl, f.suite[2].d_text, f.suite[2].d_image, 4);
  const auto a = tensor_refs(fresh);
  const auto b = tensor_refs(res.checkpoint.params.irl);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second) << a[i].first;

  const auto r1 = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn, Variant::base, 5));
  const auto r2 = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn, Variant::base, 6));
  const auto n1 = by_name(r1.checkpoint.params), n2 = by_name(r2.checkpoint.params);
  for (const auto& [name, m] : n1) {
    if (is_irl_tensor(name) && name.find("proj") != std::string::npos) {
      EXPECT_NE(m, n2.at(name)) << name;
    }
    if (!is_irl_tensor(name) && !is_position_tensor(name)) {
      EXPECT_EQ(m, n2.at(name)) << name;
    }
  }
}

TEST(Adapt, FinetuneStartsFromPretrainedAndFreezesPositions) {
  const auto& f = fixture();
  auto s = spec(AdaptMode::finetune);
  s.train.n_epochs = 0;
  const auto untouched = adapt(&f.pretrained, f.suite[2], s);
  EXPECT_EQ(by_name(untouched.checkpoint.params), by_name(f.pretrained.params));

  const auto res = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::finetune));
  const auto src = by_name(f.pretrained.params);
  for (const auto& [name, m] : by_name(res.checkpoint.params)) {
    if (is_irl_tensor(name))
      continue;
    EXPECT_EQ(m, src.at(name)) << name;
  }
  EXPECT_NE(res.checkpoint.params.irl.text.proj[0], f.pretrained.params.irl.text.proj[0]);
}

TEST(Adapt, ScratchNeedsNoCheckpointAndOthersDo) {
  const auto& f = fixture();
  const auto res = adapt(nullptr, f.suite[2], spec(AdaptMode::scratch));
  EXPECT_EQ(res.checkpoint.stage, Stage::scratch);
  EXPECT_THROW(adapt(nullptr, f.suite[2], spec(AdaptMode::relearn)), ConfigError);
  EXPECT_THROW(adapt(&res.checkpoint, f.suite[2], spec(AdaptMode::finetune)), ValidationError);
  TaskDataset other = f.suite[2];
  other.d_text = 3;
  EXPECT_THROW(adapt(&f.pretrained, other, spec(AdaptMode::relearn)), ValidationError);
}

TEST(Adapt, DeterministicBytes) {
  const auto& f = fixture();
  const auto a = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn, Variant::with_interaction_emb));
  const auto b = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn, Variant::with_interaction_emb));
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  EXPECT_EQ(a.checkpoint.interaction_ids, ItemTable::from_task(f.suite[2]).ids());
}

TEST(Scoring, BaseVariantIgnoresInteractionTable) {
  const auto& f = fixture();
  auto ck = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn)).checkpoint;
  const auto& seq = f.suite[2].sequences[0].items;
  const auto before = score_all_items(ck, f.suite[2], seq);
  // a stray table with has_interaction_emb unset is never read
  ck.params.interaction_emb = Mat<double>::Constant(static_cast<Eigen::Index>(f.suite[2].items.size()), 16, 7.0);
  EXPECT_EQ(score_all_items(ck, f.suite[2], seq), before);
}

TEST(Scoring, RanksInteractionFreeItemsAndBreaksTies) {
  const auto& f = fixture();
  const auto ck = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn)).checkpoint;
  TaskDataset target = f.suite[2];
  // a brand-new item nobody interacted with, and an exact duplicate of it
  ItemRecord fresh = target.items.begin()->second;
  fresh.item_id = 9'000'001;
  fresh.price = 42.0;
  target.items[fresh.item_id] = fresh;
  fresh.item_id = 9'000'000;
  target.items[fresh.item_id] = fresh;
  const auto ranked = score_all_items(ck, target, target.sequences[1].items);
  ASSERT_EQ(ranked.size(), target.items.size());
  std::size_t pos_a = 0, pos_b = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    EXPECT_TRUE(std::isfinite(ranked[i].second));
    EXPECT_GE(ranked[i].second, -1.0);
    EXPECT_LE(ranked[i].second, 1.0);
    if (i > 0) {
      EXPECT_GE(ranked[i - 1].second, ranked[i].second);
    }
    if (ranked[i].first == 9'000'000) pos_a = i;
    if (ranked[i].first == 9'000'001) pos_b = i;
  }
  EXPECT_EQ(pos_b, pos_a + 1);
  EXPECT_THROW(score_all_items(ck, target, {}), ValidationError);
  EXPECT_THROW(score_all_items(ck, target, {12345}), ValidationError);
  EXPECT_THROW(score_all_items(f.pretrained, target, target.sequences[1].items), ValidationError);
}

TEST(Evaluate, ReportShapeAndDeterminism) {
  const auto& f = fixture();
  const auto ck = adapt(&f.pretrained, f.suite[2], spec(AdaptMode::relearn)).checkpoint;
  const auto r1 = evaluate(ck, f.suite[2], EvalSplit::test);
  const auto r2 = evaluate(ck, f.suite[2], EvalSplit::test);
  EXPECT_EQ(to_json(r1).dump(), to_json(r2).dump());
  EXPECT_EQ(r1.users.size(), f.suite[2].sequences.size());
  for (auto k : r1.k_values) {
    double s = 0.0;
    for (double v : r1.per_user("recall", k)) s += v;
    EXPECT_NEAR(r1.aggregate("recall", k), s / r1.users.size(), 1e-12);
    EXPECT_LE(r1.aggregate("recall", 10), r1.aggregate("recall", 50));
  }
  EXPECT_EQ(r1.meta["stage"], "adapted");
  EXPECT_THROW(evaluate(f.pretrained, f.suite[2], EvalSplit::test), ValidationError);
  // excluding the validation item changes the test input
  EvalOptions no_val;
  no_val.include_validation = false;
  EXPECT_EQ(evaluate(ck, f.suite[2], EvalSplit::test, {10}, no_val).meta["include_validation"], false);
}
