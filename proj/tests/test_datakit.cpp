#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "calg/datakit.hpp"
#include "oracles.hpp"

using namespace calg;

namespace {

double phi(const Dataset& d, std::size_t a, std::size_t b) {
  double n = static_cast<double>(d.size()), sa = 0, sb = 0, sab = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.label(i, a), y = d.label(i, b);
    sa += x;
    sb += y;
    sab += x * y;
  }
  const double pa = sa / n, pb = sb / n;
  return (sab / n - pa * pb) / std::sqrt(pa * (1 - pa) * pb * (1 - pb));
}

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.primitives = 6;
  c.dim = 10;
  c.images = 1500;
  c.blocks = 1;
  c.block_size = 3;
  return c;
}

}  // namespace

TEST(Datakit, IdentityProjectionWithoutNoiseReproducesBits) {
  SyntheticConfig c;
  c.primitives = 5;
  c.dim = 5;
  c.images = 400;
  c.blocks = 0;
  c.identity_projection = true;
  c.noise = 0.0;
  const auto d = synth_generate(c);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      ASSERT_EQ(d.features(i, j), d.label(i, j) ? 1.0 : 0.0);
    }
  }
}

TEST(Datakit, IndependentLatentsGiveUncorrelatedLabels) {
  SyntheticConfig c;
  c.primitives = 6;
  c.dim = 6;
  c.images = 10000;
  c.blocks = 0;
  const auto d = synth_generate(c);
  for (std::size_t a = 0; a < 6; ++a) {
    for (std::size_t b = a + 1; b < 6; ++b) EXPECT_LT(std::abs(phi(d, a, b)), 0.05);
  }
}

TEST(Datakit, BlockCorrelationShowsUpInLabels) {
  SyntheticConfig c;
  c.primitives = 8;
  c.dim = 8;
  c.images = 10000;
  c.blocks = 1;
  c.block_size = 4;
  c.block_rho = 0.8;
  const auto d = synth_generate(c);
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      const double r = phi(d, a, b);
      EXPECT_GT(r, 0.4) << a << "," << b;
      EXPECT_LT(r, 0.9) << a << "," << b;
    }
    for (std::size_t b = 4; b < 8; ++b) EXPECT_LT(std::abs(phi(d, a, b)), 0.05);
  }
}

TEST(Datakit, InvalidCorrelationRejected) {
  auto c = small_config();
  c.correlation.assign(36, 0.0);
  for (std::size_t i = 0; i < 6; ++i) c.correlation[i * 6 + i] = 1.0;
  c.correlation[1] = 0.5;  // asymmetric
  EXPECT_THROW(
      {
        try {
          synth_generate(c);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), ErrorCode::InvalidCorrelation);
          throw;
        }
      },
      Error);

  c.correlation.assign(36, 0.0);
  for (std::size_t i = 0; i < 6; ++i) c.correlation[i * 6 + i] = 1.0;
  c.correlation[1] = c.correlation[6] = 1.5;  // not PSD
  try {
    synth_generate(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidCorrelation);
  }

  auto bad_blocks = small_config();
  bad_blocks.blocks = 3;
  bad_blocks.block_size = 3;
  EXPECT_THROW(synth_generate(bad_blocks), Error);
}

TEST(Datakit, PerfectlyCorrelatedBlockIsAllowed) {
  auto c = small_config();
  c.block_rho = 1.0;
  c.tau_min = c.tau_max = 0.3;
  const auto d = synth_generate(c);
  for (std::size_t i = 0; i < d.size(); ++i) {
    ASSERT_EQ(d.label(i, 0), d.label(i, 1));
    ASSERT_EQ(d.label(i, 1), d.label(i, 2));
  }
}

TEST(Datakit, GenerationIsSeedDeterministic) {
  auto c = small_config();
  const auto a = synth_generate(c), b = synth_generate(c);
  EXPECT_EQ(a.digest(), b.digest());
  c.seed = 8;
  EXPECT_NE(synth_generate(c).digest(), a.digest());
}

TEST(Datakit, ExpressionLabelsMatchTruthTable) {
  const auto d = synth_generate(small_config());
  auto rng = rng_stream(21, "test.labels");
  for (int t = 0; t < 100; ++t) {
    const auto e = oracle::random_expression(d.primitive_names, 4, rng);
    const auto lab = expr_label(d, e);
    for (std::size_t i = 0; i < d.size(); i += 7) {
      Assignment a;
      for (std::size_t j = 0; j < d.primitive_count(); ++j) a[d.primitive_names[j]] = d.label(i, j);
      ASSERT_EQ(lab[i] != 0, oracle::truth(e, a)) << print(e) << " image " << i;
    }
  }
  EXPECT_THROW(expr_label(d, parse("nope & p00")), Error);
}

TEST(Datakit, FourPrimitivesGiveAtMostSixPairsPerOperator) {
  SyntheticConfig c;
  c.primitives = 4;
  c.dim = 4;
  c.images = 2000;
  c.blocks = 0;
  const auto d = synth_generate(c);
  const auto ands = enumerate_and_filter(d, {Op::And}, 0.0, 0, {all_images(d)});
  const auto both = enumerate_and_filter(d, {Op::And, Op::Or}, 0.0, 0, {all_images(d)});
  EXPECT_LE(ands.size(), 6u);
  EXPECT_LE(both.size(), 12u);
  std::set<std::string> keys;
  for (const auto& e : both) keys.insert(print(e));
  EXPECT_EQ(keys.size(), both.size());
}

TEST(Datakit, SplitsAreDisjointAndCovered) {
  auto c = small_config();
  c.images = 3000;
  const auto d = synth_generate(c);
  SplitConfig sc;
  sc.max_attempts = 10;
  const auto cands = prefilter_candidates(d, sc);
  ASSERT_FALSE(cands.empty());
  const auto s = make_splits(d, cands, sc, 5);
  EXPECT_LE(s.attempts, 10u);

  std::set<std::size_t> seen;
  for (const auto* part : {&s.train_images, &s.val_images, &s.test_images}) {
    for (auto i : *part) EXPECT_TRUE(seen.insert(i).second) << "image " << i << " reused";
  }
  EXPECT_EQ(seen.size(), d.size());
  EXPECT_FALSE(split_violation(d, cands, s.train_images, s.val_images, s.test_images, sc));

  std::set<std::string> tr, te;
  for (const auto& e : s.train_exprs) tr.insert(print(e));
  for (const auto& e : s.test_exprs) te.insert(print(e));
  EXPECT_EQ(tr.size() + te.size(), cands.size());
  for (const auto& k : tr) EXPECT_FALSE(te.count(k)) << k;

  EXPECT_EQ(s.svm_images().size() + s.calibration_images().size(), s.train_images.size());
  EXPECT_EQ(s.calibration_count(),
            static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(s.train_images.size()))));
}

TEST(Datakit, InfeasibleSplitReported) {
  auto c = small_config();
  c.images = 200;
  const auto d = synth_generate(c);
  SplitConfig sc;
  sc.min_count = 500;
  sc.max_attempts = 3;
  try {
    make_splits(d, {}, sc, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InfeasibleSplit);
  }
}
