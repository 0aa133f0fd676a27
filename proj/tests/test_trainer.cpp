#include <gtest/gtest.h>

#include <cmath>

#include "meshpop/rng.hpp"
#include "meshpop/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace meshpop;
using namespace meshpop::train;

namespace {

using test::ScalarAdam;

nn::ParamStore<double> scalar_store(double theta) {
  nn::ParamStore<double> ps;
  ps.add("theta", {1}, true);
  ps[0].value[0] = theta;
  return ps;
}

}  // namespace

TEST(Trainer, LossHandCases) {
  EXPECT_EQ(loss(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}), 0.0);
  EXPECT_EQ(loss(std::vector<double>{3, 4, 0}, std::vector<double>{0, 0, 0}), 5.0);
  EXPECT_EQ(loss(std::vector<double>{1, 0, 0, 0, 3, 0}, std::vector<double>(6, 0.0)), 2.0);
  EXPECT_EQ(loss(std::vector<double>{3, -4, 1}, std::vector<double>{0, 0, 0}, 3, LossKind::l1), 8.0);
  EXPECT_THROW(loss(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(parse_loss("l3"), ConfigError);
}

TEST(Trainer, LossPermutationAndDuplication) {
  Rng rng(1);
  std::vector<double> p(30), l(30);
  for (int i = 0; i < 30; ++i) {
    p[i] = rng.normal();
    l[i] = rng.normal();
  }
  const double ref = loss(p, l);
  std::vector<double> pp, ll;
  for (int i = 9; i >= 0; --i) {
    pp.insert(pp.end(), p.begin() + i * 3, p.begin() + i * 3 + 3);
    ll.insert(ll.end(), l.begin() + i * 3, l.begin() + i * 3 + 3);
  }
  EXPECT_NEAR(loss(pp, ll), ref, 1e-12);
  pp.insert(pp.end(), pp.begin(), pp.end());
  ll.insert(ll.end(), ll.begin(), ll.end());
  EXPECT_NEAR(loss(pp, ll), ref, 1e-12);
}

TEST(Trainer, LossGradientMatchesFiniteDifference) {
  Rng rng(2);
  std::vector<double> p(12), l(12);
  for (int i = 0; i < 12; ++i) {
    p[i] = rng.normal();
    l[i] = rng.normal();
  }
  const auto g = loss_gradient(p, l);
  for (int i = 0; i < 12; ++i) {
    auto a = p, b = p;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    EXPECT_NEAR(g[i], (loss(a, l) - loss(b, l)) / 2e-6, 1e-7);
  }
  EXPECT_EQ(loss_gradient(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}), (std::vector<double>{0, 0, 0}));
}

TEST(Trainer, AdamFirstStepAndZeroGradient) {
  auto ps = scalar_store(1.0);
  nn::Moments<double> mom;
  nn::TrainState st;
  ps[0].grad[0] = 1.0;
  adam_step(st, ps, mom);
  EXPECT_NEAR(1.0 - ps[0].value[0], 0.001, 1e-10);
  EXPECT_EQ(st.step, 1u);

  auto ps2 = scalar_store(1.0);
  nn::Moments<double> mom2;
  nn::TrainState st2;
  adam_step(st2, ps2, mom2);
  EXPECT_EQ(ps2[0].value[0], 1.0);
}

TEST(Trainer, AdamMatchesScalarReference) {
  Rng rng(3);
  nn::ParamStore<double> ps;
  ps.add("a", {4}, true);
  ps.add("b", {2, 3}, true);
  ps.add("frozen", {2}, false);
  std::vector<ScalarAdam> ref(10, ScalarAdam{0.01, 0.9, 0.999, 1e-8});
  std::vector<double> theta(10);
  for (int i = 0; i < 10; ++i) theta[i] = rng.normal();
  for (int i = 0; i < 4; ++i) ps[0].value[i] = theta[i];
  for (int i = 0; i < 6; ++i) ps[1].value[i] = theta[4 + i];
  nn::Moments<double> mom;
  nn::TrainState st;
  st.alpha = 0.01;
  for (int step = 0; step < 1000; ++step) {
    for (int i = 0; i < 10; ++i) {
      const double g = rng.normal();
      (i < 4 ? ps[0].grad[i] : ps[1].grad[i - 4]) = g;
      theta[i] = ref[i].step(theta[i], g);
    }
    adam_step(st, ps, mom);
  }
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(i < 4 ? ps[0].value[i] : ps[1].value[i - 4], theta[i], 1e-9);
  for (const auto& v : mom.v)
    for (double x : v) EXPECT_GE(x, 0.0);
  EXPECT_EQ(st.step, 1000u);
}

TEST(Trainer, AdamConvergesOnQuadratic) {
  auto ps = scalar_store(0.0);
  nn::Moments<double> mom;
  nn::TrainState st;
  st.alpha = 0.1;
  for (int i = 0; i < 2000; ++i) {
    ps[0].grad[0] = 2.0 * (ps[0].value[0] - 3.0);
    adam_step(st, ps, mom);
  }
  EXPECT_LT(std::abs(ps[0].value[0] - 3.0), 1e-3);
}

TEST(Trainer, AdamRejectsNonFinite) {
  auto ps = scalar_store(1.0);
  nn::Moments<double> mom;
  nn::TrainState st;
  ps[0].grad[0] = std::nan("");
  EXPECT_THROW(adam_step(st, ps, mom), NumericalError);
  EXPECT_EQ(ps[0].value[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(Trainer, R2Identities) {
  const std::vector<double> l{1, 5, 2, 2, 6, 1, 3, 7, 5};
  for (auto v : {R2Variant::standard, R2Variant::paper_printed})
    for (int g = 0; g < 3; ++g) {
      EXPECT_DOUBLE_EQ(r2_group(l, l, g, v), 1.0);
      double mean = 0;
      for (int i = 0; i < 3; ++i) mean += l[i * 3 + g] / 3.0;
      std::vector<double> p = l;
      for (int i = 0; i < 3; ++i) p[i * 3 + g] = mean;
      EXPECT_NEAR(r2_group(p, l, g, v), 0.0, 1e-12);
    }
  EXPECT_DOUBLE_EQ(r2_group(std::vector<double>{1, 2, 4}, std::vector<double>{1, 2, 3}, 0, R2Variant::standard, 1), 0.5);
  EXPECT_THROW(r2_group(std::vector<double>{1, 2}, std::vector<double>{1, 1}, 0, R2Variant::standard, 1), DomainError);
  EXPECT_THROW(r2_group(std::vector<double>{1}, std::vector<double>{1}, 0, R2Variant::standard, 1), DomainError);
}

TEST(Trainer, R2StandardNeverExceedsOne) {
  Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    std::vector<double> p(30), l(30);
    for (int i = 0; i < 30; ++i) {
      l[i] = rng.normal();
      p[i] = l[i] + rng.normal(0, rng.uniform(0, 2));
    }
    for (int g = 0; g < 3; ++g) EXPECT_LE(r2_group(p, l, g), 1.0);
  }
}

TEST(Trainer, MetricsSchema) {
  const std::vector<float> l{1, 2, 3, 2, 3, 1, 3, 1, 2};
  const auto m = metrics_from(l, l);
  const auto j = m.to_json();
  EXPECT_EQ(j.at("n"), 3);
  EXPECT_EQ(j.at("loss"), 0.0);
  for (const char* g : kGroupNames) {
    EXPECT_EQ(j.at("r2").at("standard").at(g), 1.0);
    EXPECT_EQ(j.at("r2").at("paper_printed").at(g), 1.0);
  }
  EXPECT_EQ(metrics_from(l, l).to_json(), j);
}

TEST(Trainer, LossCurveRoundTrip) {
  test::TempDir dir;
  write_loss_curve(dir / "c.csv", {{1, 0.5, 0.75}, {2, 0.25, 0.125}});
  const auto c = read_loss_curve(dir / "c.csv");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[1].epoch, 2);
  EXPECT_DOUBLE_EQ(c[1].val_loss, 0.125);
}

TEST(Trainer, R2VariantsDivergeOnConstantShift) {
  const std::vector<double> l{1, 5, 2, 2, 6, 1, 3, 7, 5, 4, 4, 4};
  std::vector<double> p = l;
  for (auto& v : p) v += 0.5;
  for (int g = 0; g < 3; ++g) {
    EXPECT_LT(r2_group(p, l, g, R2Variant::standard), 1.0);
    EXPECT_GT(r2_group(p, l, g, R2Variant::paper_printed), 1.0);
  }
}
