#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "covidfact/capsule.hpp"
#include "grad_check.hpp"
#include "routing_oracle.hpp"

using namespace covidfact;
using testing_support::check_grad;
using testing_support::project;

namespace {

double norm_of(const Tensor& t, std::size_t row, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += t[row * d + k] * t[row * d + k];
  return std::sqrt(s);
}

testing_support::Votes to_votes(const Tensor& t, std::size_t n) {
  const std::size_t I = t.dim(1), J = t.dim(2), D = t.dim(3);
  testing_support::Votes u(I, std::vector<std::vector<double>>(J, std::vector<double>(D)));
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < D; ++k) u[i][j][k] = t[((n * I + i) * J + j) * D + k];
  return u;
}

}  // namespace

TEST(Squash, UnitNormHalves) {
  Graph g(false);
  const Tensor v = squash(g.constant(Tensor({1, 2}, {0.6, 0.8}))).value();
  EXPECT_NEAR(norm_of(v, 0, 2), 0.5, 1e-15);
}

TEST(Squash, ZeroVector) {
  Graph g;
  Var s = g.input(Tensor({1, 3}, 0.0));
  Var v = squash(s);
  EXPECT_EQ(v.value(), Tensor({1, 3}, 0.0));
  g.backward(project(g, v, 1));
  EXPECT_TRUE(g.grad(s).all_finite());
}

TEST(Squash, ThreeFour) {
  Graph g(false);
  const Tensor v = squash(g.constant(Tensor({2}, {3, 4}))).value();
  EXPECT_NEAR(norm_of(v, 0, 2), 25.0 / 26.0, 1e-15);
  EXPECT_NEAR(v[0] / norm_of(v, 0, 2), 0.6, 1e-15);
  EXPECT_NEAR(v[1] / norm_of(v, 0, 2), 0.8, 1e-15);
}

TEST(Squash, GradientAndBound) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Tensor s = rng.normal_tensor({3, 4}, 0.2 + 3.0 * rng.uniform());
    EXPECT_LT(check_grad([&](Graph& g, Var x) { return project(g, squash(x), 7); }, s), 1e-6);
    Graph g(false);
    const Tensor v = squash(g.constant(s)).value();
    for (std::size_t r = 0; r < 3; ++r) EXPECT_LT(norm_of(v, r, 4), 1.0);
  }
}

TEST(Votes, IdentityWeights) {
  Rng rng(2);
  const Tensor u = rng.normal_tensor({2, 3, 4});
  Tensor w({3, 2, 4, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) w[(((i * 2 + j) * 4) + k) * 4 + k] = 1.0;
  Graph g(false);
  const Tensor v = predict_votes(g.constant(u), g.constant(w)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(v[((n * 3 + i) * 2 + j) * 4 + k], u[(n * 3 + i) * 4 + k]);
}

TEST(Votes, ZeroInput) {
  Rng rng(3);
  Graph g(false);
  const Tensor v = predict_votes(g.constant(Tensor({1, 2, 3})), g.constant(rng.normal_tensor({2, 4, 3, 5}))).value();
  EXPECT_EQ(v, Tensor({1, 2, 4, 5}, 0.0));
}

TEST(Votes, PerPairMatrixProducts) {
  // u_i as a row vector times W_ij (dim_in x dim_out)
  const Tensor u({1, 2, 2}, {1.0, 2.0, -1.0, 0.5});
  const Tensor w({2, 1, 2, 2}, {1, 2, 3, 4, 0, -1, 2, 1});
  Graph g(false);
  const Tensor v = predict_votes(g.constant(u), g.constant(w)).value();
  EXPECT_EQ(v, Tensor({1, 2, 1, 2}, {1 * 1 + 2 * 3, 1 * 2 + 2 * 4, -1 * 0 + 0.5 * 2, -1 * -1 + 0.5 * 1}));
}

TEST(Votes, ShapeMismatch) {
  Graph g(false);
  EXPECT_THROW(predict_votes(g.constant(Tensor({1, 2, 3})), g.constant(Tensor({2, 2, 4, 3}))), DimensionError);
  EXPECT_THROW(predict_votes(g.constant(Tensor({1, 3, 3})), g.constant(Tensor({2, 2, 3, 3}))), DimensionError);
}

TEST(Route, SingleIterationIsUniformMean) {
  Rng rng(4);
  const Tensor u = rng.normal_tensor({1, 3, 2, 4});
  Graph g(false);
  const Tensor v = route(g.constant(u), 1).value();
  for (std::size_t j = 0; j < 2; ++j) {
    std::vector<double> mean(4, 0.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) mean[k] += u[((i * 2) + j) * 4 + k] / 2.0;  // c = 1/J = 1/2
    const auto expect = testing_support::oracle_squash(mean);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(v[j * 4 + k], expect[k], 1e-14);
  }
}

TEST(Route, IdenticalVotesAreAFixedPoint) {
  // I == J, so the uniform coupling gives s_j = x exactly
  const std::vector<double> x{0.3, -1.2, 0.7};
  Tensor u({1, 3, 3, 3});
  for (std::size_t p = 0; p < 9; ++p)
    for (std::size_t k = 0; k < 3; ++k) u[p * 3 + k] = x[k];
  const auto expect = testing_support::oracle_squash(x);
  for (int r = 1; r <= 5; ++r) {
    Graph g(false);
    const Tensor v = route(g.constant(u), r).value();
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(v[j * 3 + k], expect[k], 1e-15);
  }
}

TEST(Route, MatchesStraightLineOracle) {
  // Hand-set I=2, J=2, d=2, r=3
  const Tensor u({1, 2, 2, 2}, {0.9, -0.3, 0.2, 0.8, 1.1, 0.1, -0.4, 0.5});
  Graph g(false);
  const Tensor v = route(g.constant(u), 3).value();
  const auto ref = testing_support::oracle_route(to_votes(u, 0), 3);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(v[j * 2 + k], ref[j][k], 1e-12);

  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t N = 1 + rng.below(3), I = 1 + rng.below(5), J = 1 + rng.below(4), D = 1 + rng.below(4);
    const int r = 1 + static_cast<int>(rng.below(4));
    const Tensor uu = rng.normal_tensor({N, I, J, D});
    Graph h(false);
    const Tensor vv = route(h.constant(uu), r).value();
    for (std::size_t n = 0; n < N; ++n) {
      const auto rr = testing_support::oracle_route(to_votes(uu, n), r);
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t k = 0; k < D; ++k) ASSERT_NEAR(vv[(n * J + j) * D + k], rr[j][k], 1e-12);
    }
  }
}

TEST(Route, CouplingRowsSumToOne) {
  Rng rng(6);
  const Tensor u = rng.normal_tensor({2, 5, 3, 4}, 2.0);
  Graph g(false);
  RoutingTrace trace;
  route(g.constant(u), 4, &trace);
  ASSERT_EQ(trace.coupling.size(), 4u);
  EXPECT_EQ(trace.agreement.size(), 3u);
  EXPECT_EQ(trace.logits.front(), Tensor({2, 5, 3}, 0.0));
  for (const auto& c : trace.coupling)
    for (std::size_t row = 0; row < 10; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < 3; ++j) s += c[row * 3 + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Route, LogitsResetBetweenCalls) {
  Rng rng(7);
  const Tensor u = rng.normal_tensor({1, 3, 2, 2});
  Graph g(false);
  const Tensor a = route(g.constant(u), 3).value();
  const Tensor b = route(g.constant(u), 3).value();
  EXPECT_EQ(a, b);
}

TEST(Route, LengthsBelowOneOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const Tensor u = rng.normal_tensor({1, 1 + rng.below(6), 1 + rng.below(3), 1 + rng.below(4)}, 0.1 + 10.0 * rng.uniform());
    Graph g(false);
    const Tensor l = capsule_lengths(route(g.constant(u), 3)).value();
    for (double x : l.data()) {
      ASSERT_GE(x, 0.0);
      ASSERT_LT(x, 1.0);
    }
  }
}

TEST(Route, PermutationEquivariantInInputIndex) {
  Rng rng(8);
  const std::size_t I = 5, J = 3, P = 4, Q = 3;
  const Tensor u = rng.normal_tensor({1, I, P});
  const Tensor w = rng.normal_tensor({I, J, P, Q}, 0.5);
  std::vector<std::size_t> perm(I);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Tensor up(u.shape()), wp(w.shape());
  for (std::size_t i = 0; i < I; ++i) {
    std::copy_n(&u[perm[i] * P], P, &up[i * P]);
    std::copy_n(&w[perm[i] * J * P * Q], J * P * Q, &wp[i * J * P * Q]);
  }
  Graph g(false);
  const Tensor a = route(predict_votes(g.constant(u), g.constant(w)), 3).value();
  const Tensor b = route(predict_votes(g.constant(up), g.constant(wp)), 3).value();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-13);
}

TEST(Route, RejectsZeroIterations) {
  Graph g(false);
  EXPECT_THROW(route(g.constant(Tensor({1, 1, 1, 1}, 1.0)), 0), Error);
}

TEST(CapsuleLayer, GradientsThroughUnrolledRouting) {
  Rng rng(9);
  for (int r = 1; r <= 3; ++r)
    for (int t = 0; t < 4; ++t) {
      const std::size_t N = 1 + rng.below(2), I = 2 + rng.below(3), J = 2, P = 2 + rng.below(2), Q = 2 + rng.below(2);
      const Tensor u = rng.normal_tensor({N, I, P});
      const Tensor w = rng.normal_tensor({I, J, P, Q}, 0.7);
      auto seed = static_cast<std::uint64_t>(r * 10 + t);
      EXPECT_LT(check_grad([&](Graph& g, Var x) { return project(g, capsule_lengths(route(predict_votes(x, g.constant(w)), r)), seed); }, u), 1e-4);
      EXPECT_LT(check_grad([&](Graph& g, Var x) { return project(g, route(predict_votes(g.constant(u), x), r), seed); }, w), 1e-4);
    }
}

TEST(CapsuleLayer, MakeValidates) {
  Rng rng(1);
  EXPECT_THROW(CapsuleLayer::make("c", {4, 2, 2, 3, 0}, rng), ConfigError);
  EXPECT_THROW(CapsuleLayer::make("c", {0, 2, 2, 3, 3}, rng), ConfigError);
  const auto l = CapsuleLayer::make("c", {4, 2, 3, 5, 3}, rng);
  EXPECT_EQ(l.weights.value.shape(), (Shape{4, 3, 2, 5}));
}

TEST(CapsuleLengths, Examples) {
  Graph g(false);
  const Tensor l = capsule_lengths(g.constant(Tensor({1, 2, 2}, {0, 0, 0.3, 0.4}))).value();
  EXPECT_EQ(l.shape(), (Shape{1, 2}));
  EXPECT_EQ(l[0], 0.0);
  EXPECT_NEAR(l[1], 0.5, 1e-15);
}

TEST(MarginLoss, Examples) {
  Graph g(false);
  const Tensor onehot({1, 2}, {1, 0});
  EXPECT_EQ(margin_loss(g.constant(Tensor({1, 2}, {0.95, 0.05})), onehot).value()[0], 0.0);
  EXPECT_NEAR(margin_loss(g.constant(Tensor({1, 2}, {0.0, 0.0})), onehot).value()[0], 0.81, 1e-15);
  EXPECT_NEAR(margin_loss(g.constant(Tensor({1, 2}, {0.5, 0.5})), onehot).value()[0], 0.24, 1e-15);
}

TEST(MarginLoss, AveragesOverBatch) {
  Graph g(false);
  const Tensor l({2, 2}, {0.0, 0.0, 0.95, 0.05});
  EXPECT_NEAR(margin_loss(g.constant(l), Tensor({2, 2}, {1, 0, 1, 0})).value()[0], 0.405, 1e-15);
}

TEST(MarginLoss, NonNegativeAndZeroOnlyInsideMargins) {
  Rng rng(10);
  const MarginLossParams p;
  for (int t = 0; t < 2000; ++t) {
    const double a = rng.uniform(), b = rng.uniform();
    Graph g(false);
    const double loss = margin_loss(g.constant(Tensor({1, 2}, {a, b})), Tensor({1, 2}, {1, 0})).value()[0];
    ASSERT_GE(loss, 0.0);
    ASSERT_EQ(loss == 0.0, a >= p.m_plus && b <= p.m_minus);
  }
}

TEST(MarginLoss, Gradient) {
  Rng rng(11);
  const Tensor l = rng.uniform_tensor({4, 2}, 0.0, 1.0);
  const Tensor t({4, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
  EXPECT_LT(check_grad([&](Graph&, Var x) { return margin_loss(x, t); }, l), 1e-6);
}

TEST(MarginLoss, RejectsNonOneHot) {
  Graph g(false);
  Var l = g.constant(Tensor({1, 2}, 0.5));
  EXPECT_THROW(margin_loss(l, Tensor({1, 2}, {1, 1})), Error);
  EXPECT_THROW(margin_loss(l, Tensor({1, 2}, {0.5, 0.5})), Error);
  EXPECT_THROW(margin_loss(l, Tensor({1, 3}, {1, 0, 0})), DimensionError);
  MarginLossParams bad;
  bad.m_minus = 0.95;
  EXPECT_THROW(margin_loss(l, Tensor({1, 2}, {1, 0}), bad), ConfigError);
}

TEST(WeightedLoss, Examples) {
  EXPECT_DOUBLE_EQ(weighted_loss(0.4, 0.8, 10, 10), 0.5 * (0.4 + 0.8));
  EXPECT_DOUBLE_EQ(weighted_loss(0.4, 0.8, 0, 7), 0.4);
  EXPECT_DOUBLE_EQ(weighted_loss(1.0, 1.0, 4962, 18447), 1.0);
  EXPECT_THROW(weighted_loss(1.0, 1.0, 0, 0), Error);
  EXPECT_THROW(weighted_loss(1.0, 1.0, -1, 3), Error);
}

TEST(WeightedLoss, RarerClassGetsLargerWeight) {
  // 1 positive, 3 negatives: positives' loss weighted 3/4
  EXPECT_DOUBLE_EQ(weighted_loss(1.0, 0.0, 1, 3), 0.75);
  EXPECT_DOUBLE_EQ(weighted_loss(0.0, 1.0, 1, 3), 0.25);
}

TEST(WeightedLoss, SwappingCountsSwapsCoefficients) {
  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    const double lp = rng.uniform(), ln = rng.uniform();
    const long a = static_cast<long>(rng.below(50)), b = 1 + static_cast<long>(rng.below(50));
    EXPECT_NEAR(weighted_loss(lp, ln, a, b), weighted_loss(ln, lp, b, a), 1e-15);
  }
  Graph g(false);
  EXPECT_DOUBLE_EQ(weighted_loss(g.constant(Tensor::scalar(0.3)), g.constant(Tensor::scalar(0.9)), 4962, 18447).value()[0],
                   weighted_loss(0.3, 0.9, 4962, 18447));
}

TEST(PrimaryCapsules, Regrouping) {
  // 4 channels of a 1x2 map, capsules of dim 2
  const Tensor x({1, 4, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Graph g(false);
  const Tensor u = to_primary_capsules(g.constant(x), 2).value();
  EXPECT_EQ(u, Tensor({1, 4, 2}, {1, 3, 2, 4, 5, 7, 6, 8}));
  EXPECT_THROW(to_primary_capsules(g.constant(x), 3), DimensionError);
  Rng rng(13);
  const Tensor r = rng.normal_tensor({2, 6, 3, 3});
  EXPECT_LT(check_grad([](Graph& h, Var v) { return project(h, to_primary_capsules(v, 3), 1); }, r), 1e-8);
}
