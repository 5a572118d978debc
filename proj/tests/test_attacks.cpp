#include <gtest/gtest.h>

#include <cmath>

#include "gandef/attacks.hpp"

using namespace gandef;

namespace {

// Two logits (0, w*x): cross-entropy for class 1 is -log sigmoid(w*x).
struct Logistic {
  ModelSpec spec{"logistic", {1}, {LayerSpec::dense(2, Init::Default)}};
  ParamSet params{{0}, {Tensor({1, 2}, {0.0, 1.0}), Tensor({2}, {0.0, 0.0})}};
};

// Same-sign linear model on an N x d input: logit difference sum_j x_j.
struct Linear {
  ModelSpec spec;
  ParamSet params;
  explicit Linear(std::size_t d) : spec{"linear", {d}, {LayerSpec::dense(2, Init::Default)}} {
    Tensor w({d, 2}, 0.0);
    for (std::size_t j = 0; j < d; ++j) w[j * 2 + 1] = 1.0;
    params = {{0}, {w, Tensor({2}, 0.0)}};
  }
};

Tensor uniform_tensor(const Shape& s, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.data()) v = uniform(rng, -1.0, 1.0);
  return t;
}

double linf(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b); }

}  // namespace

TEST(Projection, ClipValid) {
  auto y = clip_valid(Tensor({3}, {1.5, -0.3, -7.0}));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], -0.3);
  EXPECT_EQ(y[2], -1.0);
  EXPECT_TRUE(clip_valid(y) == y);
}

TEST(Projection, LinfBall) {
  Tensor origin({2}, {0.9, 0.0});
  EXPECT_TRUE(project_linf(Tensor({2}, {0.3, -0.8}), origin, 0.0) == origin);
  Tensor inside({2}, {1.0, 0.2});
  EXPECT_TRUE(project_linf(inside, origin, 0.5) == inside);
  auto p = project_linf(Tensor({1}, {1.6}), Tensor({1}, {0.9}), 0.5);
  EXPECT_NEAR(p[0], 1.4, 1e-15);
  EXPECT_EQ(clip_valid(p)[0], 1.0);
  EXPECT_THROW(project_linf(Tensor({2}), Tensor({3}), 0.1), Error);
}

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  Linear m(4);
  Rng rng(1);
  auto x = uniform_tensor({3, 4}, rng);
  const std::vector<int> t{0, 1, 0};
  EXPECT_TRUE(generate(m.spec, m.params, x, t, fgsm_config(0.0)) == x);
}

TEST(Fgsm, LogisticClosedForm) {
  Logistic m;
  Tensor x({1, 1}, 0.0);
  const std::vector<int> t{1};
  auto g = model_oracle(m.spec, m.params)(x, t);
  EXPECT_NEAR(g.grad[0], -0.5, 1e-15);
  EXPECT_NEAR(g.losses[0], std::log(2.0), 1e-15);
  auto adv = generate(m.spec, m.params, x, t, fgsm_config(0.3));
  EXPECT_NEAR(adv[0], -0.3, 1e-15);
}

TEST(Fgsm, EqualsSingleStepBimBitForBit) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto spec = build_mlp(6, {8}, 4);
    auto p = init_parameters(spec, 10 + trial);
    auto x = uniform_tensor({5, 6}, rng);
    std::vector<int> t(5);
    for (auto& v : t) v = static_cast<int>(rng() % 4);
    const double eps = uniform(rng, 0.01, 1.0);
    EXPECT_TRUE(generate(spec, p, x, t, fgsm_config(eps)) == generate(spec, p, x, t, bim_config(eps, eps, 1)));
  }
}

TEST(Bim, PresetReachesBoundaryAfterSixSteps) {
  const auto c = attack_preset("mnist-bim");
  EXPECT_DOUBLE_EQ(c.epsilon, 0.6);
  EXPECT_DOUBLE_EQ(c.step_size, 0.1);
  EXPECT_GE(c.iterations, static_cast<int>(std::ceil(c.epsilon / c.step_size - 1e-12)));
  Linear m(3);
  Tensor x({1, 3}, 0.0);
  const std::vector<int> t{1};
  auto five = generate(m.spec, m.params, x, t, bim_config(0.6, 0.1, 5));
  auto six = generate(m.spec, m.params, x, t, bim_config(0.6, 0.1, 6));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_GT(five[j], -0.6 + 0.05);
    EXPECT_NEAR(six[j], -0.6, 1e-12);
  }
}

TEST(Pgd, ConstantModelStaysAtRandomStart) {
  auto spec = build_mlp(5, {7}, 3);
  auto p = init_parameters(spec, 2);
  for (auto& t : p.tensors) t.fill(0.0);
  Rng rng(8);
  auto x = uniform_tensor({4, 5}, rng);
  const std::vector<int> t{0, 1, 2, 0};
  auto c = pgd_config(0.3, 0.05, 10, 77);
  auto adv = generate(spec, p, x, t, c);
  EXPECT_TRUE(adv == detail::random_start(x, 0.3, derive_seed(77, 0)));
  EXPECT_LE(linf(adv, x), 0.3);
  EXPECT_GT(linf(adv, x), 0.0);
}

TEST(Pgd, SeedDeterminesOutput) {
  auto spec = build_mlp(5, {7}, 3);
  auto p = init_parameters(spec, 2);
  Rng rng(8);
  auto x = uniform_tensor({4, 5}, rng);
  const std::vector<int> t{0, 1, 2, 0};
  auto a = generate(spec, p, x, t, pgd_config(0.3, 0.05, 5, 1));
  EXPECT_TRUE(a == generate(spec, p, x, t, pgd_config(0.3, 0.05, 5, 1)));
  EXPECT_FALSE(a == generate(spec, p, x, t, pgd_config(0.3, 0.05, 5, 2)));
}

TEST(Pgd, RestartsNeverLowerTheLoss) {
  auto spec = build_mlp(5, {16}, 3);
  auto p = init_parameters(spec, 4);
  Rng rng(9);
  auto x = uniform_tensor({30, 5}, rng);
  std::vector<int> t(30);
  for (auto& v : t) v = static_cast<int>(rng() % 3);
  auto one = generate(spec, p, x, t, pgd_config(0.2, 0.05, 3, 11, 1));
  auto three = generate(spec, p, x, t, pgd_config(0.2, 0.05, 3, 11, 3));
  const auto l1 = example_losses(spec, p, one, t);
  const auto l3 = example_losses(spec, p, three, t);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_GE(l3[i], l1[i]);
}

TEST(Attacks, PresetsMatchPublishedSettings) {
  EXPECT_DOUBLE_EQ(attack_preset("mnist-fgsm").epsilon, 0.6);
  auto mp = attack_preset("mnist-pgd");
  EXPECT_EQ(mp.iterations, 40);
  EXPECT_DOUBLE_EQ(mp.step_size, 0.02);
  EXPECT_TRUE(mp.random_start);
  EXPECT_DOUBLE_EQ(attack_preset("cifar-fgsm").epsilon, 0.06);
  EXPECT_DOUBLE_EQ(attack_preset("cifar-bim").step_size, 0.016);
  auto cp = attack_preset("cifar-pgd");
  EXPECT_EQ(cp.iterations, 20);
  EXPECT_DOUBLE_EQ(cp.step_size, 0.016);
  EXPECT_THROW(attack_preset("svhn-pgd"), Error);
}

TEST(Attacks, FgsmConfigIsNormalized) {
  AttackConfig c{AttackKind::Fgsm, 0.2, 0.01, 7, true, 3, 5};
  auto v = validated(c);
  EXPECT_EQ(v.iterations, 1);
  EXPECT_FALSE(v.random_start);
  EXPECT_THROW(validated({AttackKind::Bim, 0.2, 0.0, 3, false, 1, 0}), Error);
  EXPECT_THROW(validated({AttackKind::Pgd, -0.1, 0.1, 3, true, 1, 0}), Error);
}

TEST(Attacks, NonFiniteGradientIsReported) {
  Logistic m;
  m.params.tensors[0][1] = std::nan("");
  Tensor x({1, 1}, 0.0);
  const std::vector<int> t{1};
  try {
    generate(m.spec, m.params, x, t, fgsm_config(0.1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteGradient);
  }
}

TEST(Attacks, FuzzedBallAndRangeInvariants) {
  Rng rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const bool conv = trial % 5 == 0;
    ModelSpec spec;
    if (conv) {
      spec = {"tiny_conv",
              {4, 4, 1},
              {LayerSpec::conv(3, 2, Padding::Same, Init::He), LayerSpec::simple(LayerKind::Relu),
               LayerSpec::maxpool(2, 2), LayerSpec::simple(LayerKind::Flatten), LayerSpec::dense(3, Init::Default)}};
    } else {
      spec = build_mlp(1 + rng() % 6, {1 + rng() % 8}, 2 + rng() % 4);
    }
    const auto p = init_parameters(spec, rng());
    const std::size_t n = 1 + rng() % 3;
    Shape s{n};
    s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
    const Tensor x = uniform_tensor(s, rng);
    const Tensor x_copy = x;
    std::vector<int> t(n);
    const auto k = spec.output_shape()[0];
    for (auto& v : t) v = static_cast<int>(rng() % k);
    AttackConfig c;
    c.kind = static_cast<AttackKind>(rng() % 3);
    c.epsilon = uniform(rng, 0.0, 1.2);
    c.step_size = uniform(rng, 1e-3, 0.5);
    c.iterations = 1 + static_cast<int>(rng() % 5);
    c.restarts = 1 + static_cast<int>(rng() % 2);
    c.seed = rng();
    const Tensor adv = generate(spec, p, x, t, c);
    ASSERT_EQ(adv.shape(), x.shape());
    ASSERT_LE(linf(adv, x), c.epsilon + 1e-9) << "trial " << trial;
    for (double v : adv.data()) ASSERT_TRUE(v >= -1.0 && v <= 1.0) << "trial " << trial;
    ASSERT_TRUE(x == x_copy);
    if (trial % 50 == 0) {
      ASSERT_TRUE(adv == generate(spec, p, x, t, c));
    }
    ++checked;
  }
  EXPECT_GE(checked, 10000);
}
