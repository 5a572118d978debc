#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

#include "gandef/defenses.hpp"

using namespace gandef;

namespace {

double value(Var v) { return v.value().item(); }

DefenseConfig small_config(DefenseKind kind, std::size_t batch, std::size_t steps) {
  DefenseConfig c;
  c.kind = kind;
  c.epochs = 2;
  c.batch_size = batch;
  c.steps_per_epoch = steps;
  c.classifier_optimizer = {OptimizerKind::Adam, 1e-2};
  c.seed = 11;
  return c;
}

struct Toy {
  ModelSpec spec = build_mlp(2, {16}, 2);
  Dataset data = make_toy_dataset(512, 3);
};

}  // namespace

TEST(Losses, VanillaOracle) {
  Graph g;
  const std::vector<int> t{0};
  EXPECT_NEAR(value(vanilla_loss(g.constant(Tensor({1, 2}, {1.0, 0.0})), t)), 0.313261687518, 1e-9);
  const std::vector<int> t10{4};
  EXPECT_NEAR(value(vanilla_loss(g.constant(Tensor({1, 10}, 0.0)), t10)), std::log(10.0), 1e-9);
  EXPECT_NEAR(value(vanilla_loss(g.constant(Tensor({1, 2}, {50.0, 0.0})), t)), 0.0, 1e-9);
}

TEST(Losses, ClsOracle) {
  Graph g;
  const std::vector<int> t{1};
  EXPECT_NEAR(value(cls_loss(g.constant(Tensor({1, 2}, {3.0, 4.0})), t, 0.4)), 2.313261687518, 1e-9);
  EXPECT_NEAR(value(cls_loss(g.constant(Tensor({1, 2}, {3.0, 4.0})), t, 0.4, true)),
              0.313261687518 + 0.4 * 25.0, 1e-9);
}

TEST(Losses, ClpOracle) {
  Graph g;
  const std::vector<int> t{0};
  Var z1 = g.constant(Tensor({1, 2}, {1.0, 0.0}));
  Var z2 = g.constant(Tensor({1, 2}, {0.0, 1.0}));
  EXPECT_NEAR(value(clp_loss(z1, t, z2, t, 0.4)), 2.192208799986, 1e-9);
  EXPECT_NEAR(value(clp_loss(z1, t, z2, t, 0.4, true)), 2.426523375036, 1e-9);
}

TEST(Losses, GandefValueOracle) {
  Graph g;
  const std::vector<int> t{0, 1};
  const std::vector<double> s{0.0, 1.0};
  auto v = gandef_value(g.constant(Tensor({2, 2}, {2.0, 0.0, 0.0, 1.0})), g.constant(Tensor({2}, {0.2, 0.7})), t, s,
                        2.0);
  EXPECT_NEAR(value(v.classifier_loss), 0.220094849281, 1e-9);
  EXPECT_NEAR(value(v.discriminator_loss), 0.289909247626, 1e-9);
  EXPECT_NEAR(value(v.objective), -0.359723645972, 1e-9);
}

TEST(Losses, ClpIsSymmetric) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    Tensor a({3, 10}), b({3, 10});
    for (auto& x : a.data()) x = uniform(rng, -5.0, 5.0);
    for (auto& x : b.data()) x = uniform(rng, -5.0, 5.0);
    std::vector<int> t1(3), t2(3);
    for (auto& x : t1) x = static_cast<int>(rng() % 10);
    for (auto& x : t2) x = static_cast<int>(rng() % 10);
    const double lam = uniform(rng, 0.0, 2.0);
    EXPECT_NEAR(value(clp_loss(g.constant(a), t1, g.constant(b), t2, lam)),
                value(clp_loss(g.constant(b), t2, g.constant(a), t1, lam)), 1e-12);
  }
}

TEST(Losses, ClsDominatesVanilla) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    Tensor z({4, 10});
    for (auto& x : z.data()) x = uniform(rng, -5.0, 5.0);
    std::vector<int> t(4);
    for (auto& x : t) x = static_cast<int>(rng() % 10);
    const double lam = trial % 10 == 0 ? 0.0 : uniform(rng, 0.0, 2.0);
    const double v = value(vanilla_loss(g.constant(z), t));
    const double c = value(cls_loss(g.constant(z), t, lam));
    if (lam == 0.0) {
      EXPECT_EQ(c, v);
    } else {
      EXPECT_GT(c, v);
    }
  }
  Graph g;
  const std::vector<int> t{3};
  EXPECT_EQ(value(cls_loss(g.constant(Tensor({1, 10}, 0.0)), t, 0.7)),
            value(vanilla_loss(g.constant(Tensor({1, 10}, 0.0)), t)));
}

TEST(Losses, VanillaIsShiftInvariant) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    Tensor z({2, 10});
    for (auto& x : z.data()) x = uniform(rng, -5.0, 5.0);
    Tensor shifted = z;
    const double c = uniform(rng, -100.0, 100.0);
    for (auto& x : shifted.data()) x += c;
    const std::vector<int> t{static_cast<int>(rng() % 10), static_cast<int>(rng() % 10)};
    EXPECT_NEAR(value(vanilla_loss(g.constant(z), t)), value(vanilla_loss(g.constant(shifted), t)), 1e-9);
  }
}

TEST(Config, DefaultsAndValidation) {
  DefenseConfig c;
  EXPECT_DOUBLE_EQ(c.lambda, 0.4);
  EXPECT_DOUBLE_EQ(c.gamma, 2.0);
  EXPECT_DOUBLE_EQ(c.sigma, 1.0);
  EXPECT_EQ(c.inner, 3);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_DOUBLE_EQ(c.discriminator_optimizer.learning_rate, 1e-4);
  EXPECT_NO_THROW(validate(c));
  auto bad = c;
  bad.lambda = -0.1;
  EXPECT_THROW(validate(bad), Error);
  bad = c;
  bad.gamma = -1.0;
  EXPECT_THROW(validate(bad), Error);
  bad = c;
  bad.inner = 0;
  EXPECT_THROW(validate(bad), Error);
  bad = c;
  bad.batch_size = 7;
  try {
    validate(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::OddBatchSize);
  }
  auto cifar = make_defense_config(DefenseKind::PgdAdv, "cifar10", 8);
  EXPECT_EQ(cifar.classifier_optimizer.kind, OptimizerKind::Momentum);
  EXPECT_EQ(cifar.milestones, (std::vector<int>{4, 6}));
  EXPECT_EQ(cifar.attack, attack_preset("cifar-pgd"));
  EXPECT_EQ(make_defense_config(DefenseKind::FgsmAdv, "mnist").attack, attack_preset("mnist-fgsm"));
  for (auto k : all_defenses()) EXPECT_EQ(defense_from_string(to_string(k)), k);
  EXPECT_THROW(defense_from_string("magic"), Error);
}

TEST(Steps, GammaZeroClassifierStepMatchesCrossEntropyStep) {
  auto cspec = build_mlp(4, {8}, 10);
  cspec.layers.insert(cspec.layers.begin() + 2, LayerSpec::dropout(0.3));
  auto dspec = build_discriminator(10);
  const auto cp0 = init_parameters(cspec, 1);
  const auto dp = init_parameters(dspec, 2);
  Rng rng(3);
  LabeledBatch b;
  b.x = Tensor({6, 4});
  for (auto& v : b.x.data()) v = uniform(rng, -1.0, 1.0);
  b.t = {0, 1, 2, 3, 4, 5};
  b.s = {0, 0, 0, 1, 1, 1};
  auto a = cp0, c = cp0;
  auto oa = make_opt_state(a, {OptimizerKind::Adam, 1e-3});
  auto oc = make_opt_state(c, {OptimizerKind::Adam, 1e-3});
  for (int k = 0; k < 3; ++k) {
    const auto la = gan_classifier_step(cspec, a, oa, dspec, dp, b, 0.0, 1e-3, 40 + k);
    const auto lc = classifier_ce_step(cspec, c, oc, b.x, b.t, 1e-3, 40 + k);
    EXPECT_EQ(la.classifier, lc.classifier);
    ASSERT_TRUE(a == c) << "step " << k;
  }
  EXPECT_FALSE(a == cp0);
}

TEST(Steps, UpdatesFreezeTheOtherNetwork) {
  auto cspec = build_mlp(4, {8}, 10);
  auto dspec = build_discriminator(10);
  auto cp = init_parameters(cspec, 1);
  auto dp = init_parameters(dspec, 2);
  Rng rng(3);
  LabeledBatch b;
  b.x = Tensor({4, 4});
  for (auto& v : b.x.data()) v = uniform(rng, -1.0, 1.0);
  b.t = {1, 2, 3, 4};
  b.s = {0, 0, 1, 1};
  auto copt = make_opt_state(cp, {OptimizerKind::Adam, 1e-3});
  auto dopt = make_opt_state(dp, discriminator_optimizer());

  const auto c_before = cp, d_before = dp;
  const auto dl = discriminator_step(cspec, cp, dspec, dp, dopt, b, 1e-4, 9);
  EXPECT_TRUE(cp == c_before);
  EXPECT_FALSE(dp == d_before);
  EXPECT_TRUE(std::isfinite(dl.discriminator));

  const auto d_mid = dp;
  gan_classifier_step(cspec, cp, copt, dspec, dp, b, 2.0, 1e-3, 10);
  EXPECT_TRUE(dp == d_mid);
  EXPECT_FALSE(cp == c_before);
}

TEST(Training, RecordShapeAndDeterminism) {
  Toy toy;
  for (auto kind : {DefenseKind::Vanilla, DefenseKind::Cls, DefenseKind::Clp, DefenseKind::ZkGanDef,
                    DefenseKind::FgsmAdv}) {
    auto c = small_config(kind, 16, 5);
    c.attack = fgsm_config(0.1);
    const auto a = train_defense(toy.spec, toy.data, c);
    ASSERT_EQ(a.record.epochs.size(), 2u) << to_string(kind);
    EXPECT_EQ(a.record.step_losses.size(), 10u);
    EXPECT_FALSE(a.record.diverged);
    for (const auto& e : a.record.epochs) {
      EXPECT_GT(e.seconds, 0.0);
      EXPECT_EQ(std::isfinite(e.discriminator_loss), uses_discriminator(kind));
    }
    const auto b = train_defense(toy.spec, toy.data, c);
    EXPECT_TRUE(a.classifier == b.classifier) << to_string(kind);
    EXPECT_EQ(a.record.step_losses, b.record.step_losses);
  }
}

TEST(Training, ClsWithoutNoiseOrPenaltyIsVanilla) {
  Toy toy;
  auto v = small_config(DefenseKind::Vanilla, 32, 20);
  auto c = v;
  c.kind = DefenseKind::Cls;
  c.lambda = 0.0;
  c.sigma = 0.0;
  const auto rv = train_defense(toy.spec, toy.data, v);
  const auto rc = train_defense(toy.spec, toy.data, c);
  ASSERT_EQ(rv.record.step_losses.size(), rc.record.step_losses.size());
  for (std::size_t i = 0; i < rv.record.step_losses.size(); ++i)
    EXPECT_NEAR(rv.record.step_losses[i], rc.record.step_losses[i], 1e-10) << "step " << i;
}

TEST(Training, ClpWithoutNoiseOrPenaltyIsVanilla) {
  // CLP sums two half-batch means, twice the vanilla mean; plain momentum
  // with half the learning rate then follows the same trajectory.
  Toy toy;
  auto v = small_config(DefenseKind::Vanilla, 32, 20);
  v.classifier_optimizer = {OptimizerKind::Momentum, 0.05};
  auto c = v;
  c.kind = DefenseKind::Clp;
  c.lambda = 0.0;
  c.sigma = 0.0;
  c.classifier_optimizer.learning_rate = 0.025;
  const auto rv = train_defense(toy.spec, toy.data, v);
  const auto rc = train_defense(toy.spec, toy.data, c);
  for (std::size_t i = 0; i < rv.record.step_losses.size(); ++i)
    EXPECT_NEAR(2.0 * rv.record.step_losses[i], rc.record.step_losses[i], 1e-10) << "step " << i;
}

TEST(Training, ZeroEpsilonAdversarialIsVanillaOnDuplicatedBatches) {
  Toy toy;
  auto a = small_config(DefenseKind::FgsmAdv, 32, 20);
  a.attack = fgsm_config(0.0);
  auto v = small_config(DefenseKind::Vanilla, 16, 20);
  const auto ra = train_defense(toy.spec, toy.data, a);
  const auto rv = train_defense(toy.spec, toy.data, v);
  for (std::size_t i = 0; i < rv.record.step_losses.size(); ++i)
    EXPECT_NEAR(ra.record.step_losses[i], rv.record.step_losses[i], 1e-10) << "step " << i;
  for (std::size_t i = 0; i < ra.classifier.tensors.size(); ++i)
    EXPECT_LT(max_abs_diff(ra.classifier.tensors[i], rv.classifier.tensors[i]), 1e-10);
}

TEST(Training, PgdGandefWithGammaZeroIsPgdAdv) {
  Toy toy;
  const auto pgd = pgd_config(0.2, 0.05, 3);
  auto a = small_config(DefenseKind::PgdAdv, 16, 6);
  auto g = a;
  g.gamma = 0.0;
  const auto ra = train_adversarial(toy.spec, toy.data, a, pgd);
  const auto rg = train_pgd_gandef(toy.spec, toy.data, g, pgd);
  EXPECT_EQ(ra.record.step_losses, rg.record.step_losses);
  EXPECT_TRUE(ra.classifier == rg.classifier);
  EXPECT_FALSE(rg.discriminator.tensors.empty());
}

TEST(Training, ZkGandefToyLossHalvesWithin200Iterations) {
  Toy toy;
  auto c = small_config(DefenseKind::ZkGanDef, 32, 200);
  c.epochs = 1;
  c.noise_mask = toy_noise_mask();
  const auto r = train_zk_gandef(toy.spec, toy.data, c);
  ASSERT_FALSE(r.record.diverged);
  const auto& s = r.record.step_cross_entropy;
  ASSERT_EQ(s.size(), 200u);
  auto window_mean = [&](std::size_t from) {
    double m = 0.0;
    for (std::size_t i = from; i < from + 10; ++i) m += s[i];
    return m / 10.0;
  };
  const double start = window_mean(0);
  const double end = window_mean(190);
  EXPECT_LE(end, 0.5 * start) << "start " << start << " end " << end;
}

TEST(Training, NonFiniteLossIsFlagged) {
  Toy toy;
  auto c = small_config(DefenseKind::Vanilla, 16, 5);
  c.classifier_optimizer = {OptimizerKind::Momentum, 1e300};
  const auto r = train_defense(toy.spec, toy.data, c);
  EXPECT_TRUE(r.record.diverged);
  ASSERT_FALSE(r.record.epochs.empty());
  EXPECT_TRUE(r.record.epochs.back().diverged);
  EXPECT_LE(r.record.epochs.size(), 2u);
}

TEST(Training, RecordSerializesAsJsonLines) {
  Toy toy;
  auto c = small_config(DefenseKind::ZkGanDef, 16, 3);
  const auto r = train_defense(toy.spec, toy.data, c);
  const std::string path = ::testing::TempDir() + "record.jsonl";
  write_train_record(r.record, path);
  std::ifstream is(path);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"].get<int>(), n);
    EXPECT_GT(j["seconds"].get<double>(), 0.0);
    EXPECT_TRUE(j["discriminator_loss"].is_number());
    EXPECT_FALSE(j["diverged"].get<bool>());
    ++n;
  }
  EXPECT_EQ(n, 2);
  std::remove(path.c_str());
}
