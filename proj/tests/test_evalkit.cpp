#include <gtest/gtest.h>

#include <cmath>

#include "calg/evalkit.hpp"
#include "oracles.hpp"

using namespace calg;

namespace {

std::vector<ScoredPair> random_pairs(RngStream& rng, std::size_t n, bool coarse) {
  std::vector<ScoredPair> out(n);
  bool has_pos = false, has_neg = false;
  for (std::size_t i = 0; i < n; ++i) {
    out[i].expr_id = rng.uniform_int(4);
    out[i].image_id = i;
    out[i].label = rng.uniform() < 0.3;
    // Coarse scores produce many ties.
    const double s = rng.normal() + (out[i].label ? 0.8 : 0.0);
    out[i].score = coarse ? std::round(s * 2.0) / 2.0 : s;
    (out[i].label ? has_pos : has_neg) = true;
  }
  if (!has_pos) out[0].label = true;
  if (!has_neg) out[1].label = false;
  return out;
}

PrimitiveBank two_primitive_bank() {
  PrimitiveBank bank;
  // Scores s = x0 for "a" and s = x1 for "b"; Platt with A=1, B=0.
  bank.add("a", {Vector{1.0, 0.0, 0.0}, ClassifierSource::SvmPrimitive});
  bank.add("b", {Vector{0.0, 1.0, 0.0}, ClassifierSource::SvmPrimitive});
  bank.platt[0] = PlattParams{1.0, 0.0, 0};
  bank.platt[1] = PlattParams{1.0, 0.0, 0};
  return bank;
}

double logit(double p) { return std::log(p / (1 - p)); }

}  // namespace

TEST(Evalkit, MetricsMatchOracles) {
  auto rng = rng_stream(1, "test.metrics");
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.uniform_int(499);
    const auto pairs = random_pairs(rng, n, t % 2 == 0);
    EXPECT_NEAR(global_map(pairs), oracle::average_precision(pairs), 1e-9) << t;
    EXPECT_NEAR(global_auc(pairs), oracle::auc(pairs), 1e-9) << t;
    EXPECT_NEAR(global_eer(pairs), oracle::eer(pairs), 1e-9) << t;
  }
}

TEST(Evalkit, HandWorkedExamples) {
  // Ranking: +, -, +, -  ⇒ AP = (1/1 + 2/3)/2.
  std::vector<ScoredPair> p{{0, 0, 0.9, true}, {0, 1, 0.8, false}, {0, 2, 0.7, true}, {0, 3, 0.1, false}};
  EXPECT_NEAR(global_map(p), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(global_auc(p), 0.75, 1e-15);

  // Single positive ranked second of two: AP 0.5.
  std::vector<ScoredPair> q{{0, 0, 0.9, false}, {0, 1, 0.1, true}};
  EXPECT_DOUBLE_EQ(global_map(q), 0.5);
  EXPECT_DOUBLE_EQ(global_auc(q), 0.0);
  EXPECT_DOUBLE_EQ(global_eer(q), 1.0);

  // Single positive ranked second of four: AP 0.5, AUC 2/3.
  std::vector<ScoredPair> u{{0, 0, 0.9, false}, {0, 1, 0.7, true}, {0, 2, 0.5, false}, {0, 3, 0.3, false}};
  EXPECT_DOUBLE_EQ(global_map(u), 0.5);
  EXPECT_NEAR(global_auc(u), 2.0 / 3.0, 1e-15);

  // Perfect separation.
  std::vector<ScoredPair> r{{0, 0, 2.0, true}, {0, 1, 1.0, false}};
  EXPECT_DOUBLE_EQ(global_map(r), 1.0);
  EXPECT_DOUBLE_EQ(global_auc(r), 1.0);
  EXPECT_DOUBLE_EQ(global_eer(r), 0.0);
}

TEST(Evalkit, AllTiedScores) {
  std::vector<ScoredPair> p;
  for (std::size_t i = 0; i < 10; ++i) p.push_back({0, i, 0.5, i < 3});
  EXPECT_DOUBLE_EQ(global_auc(p), 0.5);
  EXPECT_NEAR(global_eer(p), 0.5, 1e-12);
  // Ties broken by image id: positives 0,1,2 come first.
  EXPECT_DOUBLE_EQ(global_map(p), 1.0);
}

TEST(Evalkit, DegenerateInputs) {
  std::vector<ScoredPair> neg{{0, 0, 0.1, false}, {0, 1, 0.2, false}};
  try {
    global_map(neg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoPositives);
  }
  EXPECT_THROW(global_auc(neg), Error);
  EXPECT_THROW(global_eer(neg), Error);
}

TEST(Evalkit, IndependentBaselineArithmetic) {
  const auto bank = two_primitive_bank();
  const std::vector<double> x{logit(0.8), logit(0.5)};
  EXPECT_NEAR(baseline_independent(bank, parse("a & b"), x), 0.4, 1e-12);
  EXPECT_NEAR(baseline_independent(bank, parse("a | b"), x), 0.9, 1e-12);
  EXPECT_NEAR(baseline_independent(bank, parse("!a"), x), 0.2, 1e-12);
  EXPECT_NEAR(baseline_independent(bank, parse("!a | !b"), x), 1 - 0.4, 1e-12);
}

TEST(Evalkit, IndependentBaselineNeedsCalibration) {
  auto bank = two_primitive_bank();
  bank.platt[1].reset();
  const std::vector<double> x{0.0, 0.0};
  try {
    baseline_independent(bank, parse("a & b"), x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingCalibration);
  }
}

namespace {

Dataset small_dataset() {
  SyntheticConfig sc;
  sc.primitives = 6;
  sc.dim = 12;
  sc.images = 2000;
  sc.blocks = 0;
  sc.noise = 1.0;
  return synth_generate(sc);
}

}  // namespace

TEST(Evalkit, ChanceIsNearHalfAndOrderIndependent) {
  const auto d = small_dataset();
  auto erng = rng_stream(1, "exprs");
  const auto exprs = random_binary_expressions(d.primitive_names, Op::Or, 10, erng);
  const auto images = all_images(d);
  const auto r = evaluate(chance_scorer(7), exprs, d, images);
  EXPECT_NEAR(r.auc, 0.5, 0.02);
  EXPECT_NEAR(r.eer, 0.5, 0.02);
  EXPECT_EQ(r, evaluate(chance_scorer(7), exprs, d, images, Pooling::Global, 4));

  // Scores depend on the expression and image, not on the position in a list.
  std::vector<Expression> reversed(exprs.rbegin(), exprs.rend());
  const auto fwd = score_pairs(chance_scorer(7), exprs, d, images);
  const auto rev = score_pairs(chance_scorer(7), reversed, d, images);
  const std::size_t n = images.size();
  for (std::size_t k = 0; k < n; ++k) EXPECT_EQ(fwd[k].score, rev[9 * n + k].score);

  auto rng = rng_stream(2, "chance");
  const auto pairs = baseline_chance(score_pairs(oracle_scorer(d), exprs, d, images), rng);
  EXPECT_NEAR(global_auc(pairs), 0.5, 0.02);
}

TEST(Evalkit, OracleScorerIsPerfect) {
  const auto d = small_dataset();
  auto rng = rng_stream(3, "exprs");
  const auto exprs = random_binary_expressions(d.primitive_names, Op::And, 8, rng);
  const auto r = evaluate(oracle_scorer(d), exprs, d, all_images(d));
  EXPECT_DOUBLE_EQ(r.auc, 1.0);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_DOUBLE_EQ(r.eer, 0.0);
  EXPECT_EQ(r.pairs, 8 * d.size());
}

TEST(Evalkit, SupervisedBeatsChance) {
  const auto d = small_dataset();
  auto rng = rng_stream(4, "exprs");
  const auto exprs = random_binary_expressions(d.primitive_names, Op::Or, 6, rng);
  IndexList train, test;
  for (std::size_t i = 0; i < d.size(); ++i) (i % 3 == 0 ? test : train).push_back(i);
  const auto sup = baseline_supervised(d, exprs, train, {}, 4);
  ASSERT_EQ(sup.size(), 6u);
  const auto s = evaluate(supervised_scorer(sup, d), exprs, d, test);
  const auto c = evaluate(chance_scorer(4), exprs, d, test);
  EXPECT_GT(s.auc, c.auc + 0.3);
  EXPECT_THROW(sup.at(parse("p00 & p01 & p02")), Error);
}

TEST(Evalkit, PerExpressionPoolingAveragesGroups) {
  const auto d = small_dataset();
  auto rng = rng_stream(5, "exprs");
  const auto exprs = random_binary_expressions(d.primitive_names, Op::Or, 5, rng);
  const auto images = all_images(d);
  const auto scorer = chance_scorer(3);
  const auto r = evaluate(scorer, exprs, d, images, Pooling::PerExpression);
  double auc = 0;
  for (const auto& e : exprs) auc += evaluate(scorer, {e}, d, images).auc;
  EXPECT_NEAR(r.auc, auc / 5.0, 1e-12);
}

TEST(Evalkit, CnfSetsAreDistinctAndRespectExclusions) {
  const auto d = small_dataset();
  auto rng = rng_stream(6, "exprs");
  const auto pool = random_binary_expressions(d.primitive_names, Op::Or, 12, rng);
  SweepConfig cfg;
  cfg.complexities = {2, 3};
  cfg.per_complexity = 30;
  const auto sets = sweep_expression_sets(pool, cfg, 1);
  std::set<std::string> exclude;
  for (const auto& e : sets.at(2)) exclude.insert(print(e));
  for (const auto& [c, exprs] : sets) {
    std::set<std::string> keys;
    for (const auto& e : exprs) {
      EXPECT_EQ(conjuncts(e).size(), c);
      keys.insert(print(e));
    }
    EXPECT_EQ(keys.size(), 30u);
  }
  auto rng2 = rng_stream(1, "sweep.c2");
  for (const auto& e : sample_cnf_set(pool, 2, 30, exclude, rng2)) {
    EXPECT_FALSE(exclude.count(print(e)));
  }
  auto rng3 = rng_stream(2, "tiny");
  EXPECT_THROW(sample_cnf_set(pool, 12, 5, {}, rng3, 5), Error);
}
