// Math kernel accuracy, RNG reproducibility, optimizer behavior, and the
// finite-difference checker's own plumbing.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "mcam/adam.hpp"
#include "mcam/grad_check.hpp"
#include "mcam/mathkit.hpp"
#include "mcam/ops.hpp"
#include "mcam/random.hpp"

using namespace mcam;

TEST(FastExp, TracksLibmOverWideRange) {
  Rng rng(123);
  double max_rel = 0.0;
  for (int i = 0; i < 200000; ++i) {
    const double x = rng.uniform(-700.0, 700.0);
    const double rel = std::abs(detail::fast_exp(x) - std::exp(x)) / std::exp(x);
    max_rel = std::max(max_rel, rel);
  }
  EXPECT_LT(max_rel, 5e-14);
}

TEST(FastExp, EdgeBehavior) {
  EXPECT_EQ(detail::fast_exp(0.0), 1.0);
  EXPECT_EQ(detail::fast_exp(-750.0), 0.0);
  EXPECT_EQ(detail::fast_exp(-1e300), 0.0);
  EXPECT_TRUE(std::isfinite(detail::fast_exp(709.0)));
  EXPECT_NEAR(detail::fast_exp(1.0), std::exp(1.0), 1e-14);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(99), b(99);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next(), b.next());
}

TEST(Rng, HashMixSeparatesStreams) {
  // Adjacent (seed, index) pairs must not give adjacent streams.
  EXPECT_NE(hash_mix(1, 2), hash_mix(1, 3));
  EXPECT_NE(hash_mix(1, 2), hash_mix(2, 2));
  EXPECT_NE(hash_mix(1, 2, 3), hash_mix(1, 3, 2));
}

TEST(Rng, UniformBoundsAndMoments) {
  Rng rng(7);
  double acc = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform01();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    acc += u;
  }
  EXPECT_NEAR(acc / 100000.0, 0.5, 0.01);
}

TEST(Rng, NormalMoments) {
  Rng rng(8);
  double s1 = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s1 += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s1 / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, UniformIntCoversInclusiveRange) {
  Rng rng(15);
  std::set<int64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const int64_t v = rng.uniform_int(3, 6);
    ASSERT_GE(v, 3);
    ASSERT_LE(v, 6);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_THROW(rng.uniform_int(5, 4), std::invalid_argument);
}

TEST(Rng, PermutationIsBijective) {
  Rng rng(31);
  auto p = permutation(257, rng);
  std::set<int64_t> seen(p.begin(), p.end());
  EXPECT_EQ(seen.size(), 257u);
  EXPECT_EQ(*seen.begin(), 0);
  EXPECT_EQ(*seen.rbegin(), 256);
  // Deterministic for a fixed seed.
  Rng rng2(31);
  EXPECT_EQ(p, permutation(257, rng2));
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor> params = {p};
  OptimizerState state(params);
  state.step(params);  // no grad buffer was ever touched
  EXPECT_DOUBLE_EQ(p.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(p.data()[1], -2.0);
  EXPECT_DOUBLE_EQ(p.data()[2], 0.5);
  EXPECT_EQ(state.step_count(), 1u);
}

TEST(Adam, UnitGradientFirstStepMagnitude) {
  // With g=1 at t=1: mhat = vhat = 1, so the update is lr / (1 + eps).
  Tensor p = Tensor::from_data({1}, {0.0}, true);
  p.grad()[0] = 1.0;
  std::vector<Tensor> params = {p};
  OptimizerState state(params);
  state.step(params);
  EXPECT_NEAR(p.data()[0], -1e-3, 1e-10);
  EXPECT_NEAR(p.data()[0] + 1e-3 / (1.0 + 1e-8), 0.0, 1e-18);
}

TEST(Adam, ConstantGradientKeepsFullStepSize) {
  // Bias correction makes every step along a constant gradient ~lr.
  Tensor p = Tensor::from_data({1}, {0.0}, true);
  std::vector<Tensor> params = {p};
  OptimizerState state(params);
  double prev = 0.0;
  for (int t = 0; t < 5; ++t) {
    p.zero_grad();
    p.grad()[0] = 1.0;
    state.step(params);
    EXPECT_NEAR(prev - p.data()[0], 1e-3, 1e-8);
    prev = p.data()[0];
  }
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = []() {
    Rng rng(55);
    Tensor p = Tensor::zeros({4}, true);
    for (double& v : p.data()) v = rng.uniform(-1, 1);
    std::vector<Tensor> params = {p};
    OptimizerState state(params);
    for (int t = 0; t < 10; ++t) {
      p.zero_grad();
      auto g = p.grad();
      for (size_t i = 0; i < 4; ++i) g[i] = p.data()[i] * 0.3 + 0.1;
      state.step(params);
    }
    return std::vector<double>(p.data().begin(), p.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, RejectsMismatchedAndNonFinite) {
  Tensor p = Tensor::zeros({3}, true);
  std::vector<Tensor> params = {p};
  OptimizerState state(params);
  std::vector<Tensor> wrong_count = {p, p};
  EXPECT_THROW(state.step(wrong_count), std::invalid_argument);
  std::vector<Tensor> wrong_shape = {Tensor::zeros({4}, true)};
  EXPECT_THROW(state.step(wrong_shape), std::invalid_argument);
  p.grad()[1] = std::nan("");
  EXPECT_THROW(state.step(params), std::invalid_argument);
}

TEST(GradCheck, AcceptsExactGradient) {
  Tensor x = Tensor::from_data({4}, {0.3, -0.7, 1.2, 0.9});
  const double err = grad_check([&](Graph& g) { return sum(g, mul(g, x, x)); }, {x});
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, DetectsNonDeterministicFunction) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0});
  int calls = 0;
  EXPECT_THROW(grad_check(
                   [&](Graph& g) {
                     ++calls;
                     return sum(g, add_scalar(g, x, 0.001 * calls));
                   },
                   {x}),
               std::runtime_error);
}

TEST(GradCheck, RejectsNonScalarLoss) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0});
  EXPECT_THROW(grad_check([&](Graph& g) { return mul(g, x, x); }, {x}), std::invalid_argument);
}

TEST(GradCheck, StandardBatteryPassesForEveryOp) {
  const std::vector<GradCheckCase> results = run_gradient_battery(0);
  ASSERT_FALSE(results.empty());
  std::set<std::string> names;
  for (const GradCheckCase& c : results) {
    EXPECT_LT(c.max_rel_error, kGradCheckTolerance) << c.name;
    EXPECT_TRUE(names.insert(c.name).second) << "duplicate case name: " << c.name;
  }
}
