#include <gtest/gtest.h>

#include <cmath>

#include "calg/algebra.hpp"
#include "oracles.hpp"

using namespace calg;

namespace {

const std::vector<std::string> kNames{"a", "b", "c", "d"};

PrimitiveBank random_bank(std::size_t feature_dim, RngStream& rng) {
  PrimitiveBank bank;
  for (const auto& n : kNames) {
    Vector w(feature_dim + 1);
    for (double& v : w) v = rng.normal();
    bank.add(n, {w, ClassifierSource::SvmPrimitive});
  }
  return bank;
}

Classifier random_classifier(std::size_t dim, RngStream& rng) {
  Vector w(dim);
  for (double& v : w) v = rng.normal();
  return {w, ClassifierSource::SvmPrimitive};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Algebra, ConjunctionNetMatchesLoopOracle) {
  auto rng = rng_stream(1, "test.net");
  for (std::size_t dim : {2u, 5u, 9u}) {
    const auto net = CompositionNet::kaiming(dim, rng);
    // Give the biases nonzero values so they are exercised.
    auto perturbed = net;
    for (double& v : perturbed.b1) v = 0.3 * rng.normal();
    for (double& v : perturbed.b2) v = 0.3 * rng.normal();
    for (int t = 0; t < 20; ++t) {
      const auto a = random_classifier(dim, rng), b = random_classifier(dim, rng);
      const auto got = g_and(perturbed, a, b);
      const auto expect = oracle::mlp(perturbed, a.weights.values(), b.weights.values());
      EXPECT_LT(max_abs_diff(got.weights, expect), 1e-12);
      EXPECT_EQ(got.source, ClassifierSource::Composed);
    }
  }
}

TEST(Algebra, HiddenWidthIsOneAndAHalfTimesDim) {
  EXPECT_EQ(CompositionNet::hidden_for(10), 15u);
  EXPECT_EQ(CompositionNet::hidden_for(65), 98u);
  const auto n = CompositionNet::zeros(4);
  EXPECT_EQ(n.w1.rows(), 6u);
  EXPECT_EQ(n.w1.cols(), 8u);
  EXPECT_EQ(n.parameter_count(), 6u * 8 + 6 + 4 * 6 + 4);
  EXPECT_THROW(CompositionNet::zeros(4, 1.5), Error);
}

TEST(Algebra, FlattenAssignRoundTrip) {
  auto rng = rng_stream(2, "test.flat");
  auto alg = NeuralAlgebra::init(5, rng, 0.1, true);
  const auto flat = alg.flatten();
  ASSERT_EQ(flat.size(), alg.parameter_count());
  auto other = alg.zeros_like();
  other.assign(flat);
  EXPECT_EQ(other, alg);
  EXPECT_DOUBLE_EQ(flat.front(), alg.conj.w1(0, 0));
  EXPECT_DOUBLE_EQ(flat[alg.conj.parameter_count() - 1], alg.conj.b2[4]);
}

TEST(Algebra, NegationIsAnInvolutionAndFlipsScores) {
  auto rng = rng_stream(3, "test.not");
  const auto w = random_classifier(6, rng);
  EXPECT_EQ(g_not(g_not(w)).weights, w.weights);
  const std::vector<double> x{0.1, -0.2, 0.3, 0.4, -0.5};
  EXPECT_DOUBLE_EQ(score(g_not(w), x), -score(w, x));
}

TEST(Algebra, DisjunctionObeysDeMorgan) {
  auto rng = rng_stream(4, "test.demorgan");
  const auto net = CompositionNet::kaiming(6, rng);
  for (int t = 0; t < 20; ++t) {
    const auto a = random_classifier(6, rng), b = random_classifier(6, rng);
    const auto lhs = g_or(net, a, b);
    // ¬(a ∨ b) = ¬a ∧ ¬b
    const auto rhs = g_and(net, g_not(a), g_not(b));
    EXPECT_LT(max_abs_diff(g_not(lhs).weights, rhs.weights), 1e-14);
  }
}

TEST(Algebra, ComposeFollowsTheExpressionTree) {
  auto rng = rng_stream(5, "test.compose");
  const auto bank = random_bank(4, rng);
  auto alg = NeuralAlgebra::init(5, rng);
  const auto e = parse("(a & !b) | c");
  const auto got = compose(alg, bank, e);
  const auto& A = bank.at("a");
  const auto& B = bank.at("b");
  const auto& C = bank.at("c");
  const auto manual = g_or(alg.conj, g_and(alg.conj, A, g_not(B)), C);
  EXPECT_LT(max_abs_diff(got.classifier.weights, manual.weights), 1e-14);
  EXPECT_EQ(got.trace.nodes.size(), e.node_count());
  EXPECT_EQ(got.trace.conjunction_applications(), 2u);

  // Primitive leaves return the bank classifier unchanged.
  EXPECT_EQ(compose(alg, bank, parse("d")).classifier, bank.at("d"));
}

TEST(Algebra, DoubleNegationComposesToTheSameClassifier) {
  auto rng = rng_stream(6, "test.notnot");
  const auto bank = random_bank(3, rng);
  const auto alg = NeuralAlgebra::init(4, rng);
  for (int t = 0; t < 50; ++t) {
    const auto e = oracle::random_expression(kNames, 3, rng);
    const auto plain = compose(alg, bank, e).classifier;
    const auto twice = compose(alg, bank, Expression::negation(Expression::negation(e))).classifier;
    EXPECT_EQ(plain.weights, twice.weights) << print(e);
  }
}

TEST(Algebra, BiasOnlyClassifierScoresItsBias) {
  Vector w(6);
  w[5] = 1.0;
  const Classifier c{w, ClassifierSource::Composed};
  const std::vector<double> x{3.0, -1.0, 7.0, 0.5, 2.0};
  EXPECT_DOUBLE_EQ(score(c, x), 1.0);
}

TEST(Algebra, SymmetryStatistic) {
  auto rng = rng_stream(7, "test.sym");
  auto net = CompositionNet::kaiming(4, rng);
  const auto a = random_classifier(4, rng), b = random_classifier(4, rng);
  EXPECT_GT(symmetry_statistic(net, a, b), 0.0);
  // Identical left and right halves of W1 make g order-invariant.
  for (std::size_t i = 0; i < net.hidden; ++i) {
    for (std::size_t j = 0; j < 4; ++j) net.w1(i, j + 4) = net.w1(i, j);
  }
  EXPECT_LT(symmetry_statistic(net, a, b), 1e-14);
}

class BackwardCheck : public ::testing::TestWithParam<int> {};

TEST_P(BackwardCheck, MatchesFiniteDifferences) {
  const int variant = GetParam();  // 0 plain, 1 learned disjunction, 2 unit norm
  auto rng = rng_stream(8 + static_cast<std::uint64_t>(variant), "test.backward");
  const auto bank = random_bank(4, rng);
  auto alg = NeuralAlgebra::init(5, rng, 0.1, variant == 1);
  alg.unit_norm = variant == 2;
  for (int t = 0; t < 15; ++t) {
    const auto e = oracle::random_expression(kNames, 4, rng);
    if (e.is_primitive()) continue;
    Vector x(5);
    for (double& v : x) v = rng.normal();
    // Loss = <f(e), x>, so dL/df = x.
    const auto c = compose(alg, bank, e);
    const auto grad = compose_backward(alg, c.trace, x);
    const auto analytic = grad.params.flatten();
    auto f = [&](std::span<const double> p) {
      auto probe = alg;
      probe.assign(p);
      return dot(compose(probe, bank, e).classifier.weights, x);
    };
    const auto numeric = finite_diff(f, alg.flatten(), 1e-6);
    EXPECT_LT(relative_error(analytic, numeric), 1e-6) << print(e);

    for (const auto& name : e.primitives()) {
      auto g = [&](std::span<const double> w) {
        auto probe = bank;
        probe.at(name).weights = Vector(w);
        return dot(compose(alg, probe, e).classifier.weights, x);
      };
      const auto leaf_numeric = finite_diff(g, bank.at(name).weights, 1e-6);
      EXPECT_LT(relative_error(grad.leaves.at(name), leaf_numeric), 1e-6) << print(e) << " " << name;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, BackwardCheck, ::testing::Values(0, 1, 2));

TEST(Algebra, TraceFromAnotherAlgebraIsRejected) {
  auto rng = rng_stream(9, "test.trace");
  const auto bank = random_bank(4, rng);
  const auto alg = NeuralAlgebra::init(5, rng);
  const auto c = compose(alg, bank, parse("a & b"));
  const auto wide = NeuralAlgebra::init(7, rng);
  const Vector g(5, 1.0);
  try {
    compose_backward(wide, c.trace, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TraceMismatch);
  }
  const auto with_disj = NeuralAlgebra::init(5, rng, 0.1, true);
  EXPECT_THROW(compose_backward(with_disj, c.trace, g), Error);
}

TEST(Algebra, UnknownPrimitiveIsReported) {
  auto rng = rng_stream(10, "test.unknown");
  const auto bank = random_bank(4, rng);
  const auto alg = NeuralAlgebra::init(5, rng);
  try {
    compose(alg, bank, parse("a & zebra"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownPrimitive);
  }
}
