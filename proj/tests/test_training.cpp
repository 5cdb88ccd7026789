#include <gtest/gtest.h>

#include <set>

#include "calg/datakit.hpp"
#include "calg/training.hpp"

using namespace calg;

namespace {

struct Fixture {
  Dataset data;
  SplitSpec split;
  PrimitiveBank bank;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture f;
    SyntheticConfig sc;
    sc.primitives = 6;
    sc.dim = 8;
    sc.images = 1500;
    sc.blocks = 1;
    sc.block_size = 3;
    sc.noise = 1.0;
    f.data = synth_generate(sc);
    SplitConfig cfg;
    cfg.min_count = 10;
    f.split = make_splits(f.data, prefilter_candidates(f.data, cfg), cfg, 3);
    f.bank = train_primitive_bank(f.data, f.data.primitive_names, f.split.svm_images(), {}, 3);
    calibrate_bank(f.bank, f.data, f.split.calibration_images());
    return f;
  }();
  return f;
}

TrainConfig small_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs_main = epochs;
  c.batch_expressions = 8;
  c.lr = 1e-2;
  return c;
}

}  // namespace

TEST(Training, BatchHasFivePositivesAndFiveNegatives) {
  const auto& f = fixture();
  auto rng = rng_stream(1, "test.batch");
  const auto batch = sample_batch(f.data, f.split.train_exprs, f.split.train_images, rng);
  ASSERT_EQ(batch.items.size(), f.split.train_exprs.size());
  for (const auto& item : batch.items) {
    ASSERT_EQ(item.images.size(), 10u);
    const auto lab = expr_label(f.data, item.expr, item.images);
    for (std::size_t k = 0; k < 10; ++k) {
      EXPECT_EQ(item.targets[k] > 0, lab[k] != 0);
      EXPECT_EQ(item.targets[k] > 0, k < 5);
    }
    EXPECT_EQ(std::set<std::size_t>(item.images.begin(), item.images.end()).size(), 10u);
    const std::set<std::size_t> train(f.split.train_images.begin(), f.split.train_images.end());
    for (auto i : item.images) EXPECT_TRUE(train.count(i));
  }
  EXPECT_EQ(batch.pair_count(), 10 * batch.items.size());
}

TEST(Training, HingeAndGradient) {
  EXPECT_DOUBLE_EQ(hinge(0.3, 1.0), 0.7);
  EXPECT_DOUBLE_EQ(hinge(2.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(hinge(-0.5, -1.0), 0.5);
  EXPECT_DOUBLE_EQ(hinge_grad(0.3, 1.0), -1.0);
  EXPECT_DOUBLE_EQ(hinge_grad(-0.5, -1.0), 1.0);
  EXPECT_DOUBLE_EQ(hinge_grad(1.0, 1.0), 0.0);
}

TEST(Training, ObjectiveGradientMatchesFiniteDifferences) {
  const auto& f = fixture();
  auto cfg = small_train(1);
  cfg.alpha2 = 0.05;
  cfg.alpha3 = 0.02;
  auto alg = init_algebra(f.data.dim(), cfg, 11);
  auto rng = rng_stream(2, "test.objective");
  std::vector<Expression> exprs(f.split.train_exprs.begin(), f.split.train_exprs.begin() + 4);
  exprs.push_back(Expression::conjunction(exprs[0], Expression::negation(exprs[1])));
  const auto batch = sample_batch(f.data, exprs, f.split.train_images, rng);
  const auto obj = objective(alg, f.bank, f.data, batch, cfg);
  EXPECT_NEAR(obj.loss, obj.terms.fit + obj.terms.expr_l2 + obj.terms.param_l2, 1e-12);
  auto loss = [&](std::span<const double> p) {
    auto probe = alg;
    probe.assign(p);
    return objective(probe, f.bank, f.data, batch, cfg).loss;
  };
  const auto numeric = finite_diff(loss, alg.flatten(), 1e-6);
  EXPECT_LT(relative_error(obj.grad.params.flatten(), numeric), 1e-5);
  EXPECT_TRUE(obj.grad.leaves.empty());
}

TEST(Training, UnfrozenPrimitivesGetLeafGradients) {
  const auto& f = fixture();
  auto cfg = small_train(1);
  cfg.freeze_primitives = false;
  const auto alg = init_algebra(f.data.dim(), cfg, 11);
  auto rng = rng_stream(3, "test.leaves");
  const auto batch = sample_batch(f.data, f.split.train_exprs, f.split.train_images, rng);
  const auto obj = objective(alg, f.bank, f.data, batch, cfg);
  EXPECT_FALSE(obj.grad.leaves.empty());
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  const auto& f = fixture();
  auto cfg = small_train(2);
  cfg.lr = 0.0;
  cfg.validate = false;
  const auto init = init_algebra(f.data.dim(), cfg, 5);
  const TrainInputs in{&f.data, f.split.train_images, {}};
  const auto r = train(init, f.bank, in, f.split.train_exprs, cfg, 5);
  EXPECT_EQ(r.algebra, init);
  EXPECT_EQ(r.bank, f.bank);
  ASSERT_EQ(r.history.size(), 2u);
}

TEST(Training, LossDecreasesAndValidationIsRecorded) {
  const auto& f = fixture();
  const auto cfg = small_train(25);
  const auto init = init_algebra(f.data.dim(), cfg, 5);
  const TrainInputs in{&f.data, f.split.train_images, f.split.val_images};
  const auto r = train(init, f.bank, in, f.split.train_exprs, cfg, 5);
  ASSERT_EQ(r.history.size(), 25u);
  EXPECT_LT(r.history.back().mean_loss, 0.8 * r.history.front().mean_loss);
  ASSERT_TRUE(r.history.back().validation.has_value());
  EXPECT_GT(r.history.back().validation->auc, 0.6);
}

TEST(Training, SameSeedSameModel) {
  const auto& f = fixture();
  const auto cfg = small_train(3);
  const TrainInputs in{&f.data, f.split.train_images, f.split.val_images};
  const auto a = train(init_algebra(f.data.dim(), cfg, 9), f.bank, in, f.split.train_exprs, cfg, 9);
  const auto b = train(init_algebra(f.data.dim(), cfg, 9), f.bank, in, f.split.train_exprs, cfg, 9);
  EXPECT_EQ(a.algebra, b.algebra);
  const auto c = train(init_algebra(f.data.dim(), cfg, 10), f.bank, in, f.split.train_exprs, cfg, 10);
  EXPECT_FALSE(a.algebra == c.algebra);
}

TEST(Training, BestValidationSelection) {
  const auto& f = fixture();
  auto cfg = small_train(6);
  cfg.select_best_val = true;
  const TrainInputs in{&f.data, f.split.train_images, f.split.val_images};
  const auto r = train(init_algebra(f.data.dim(), cfg, 4), f.bank, in, f.split.train_exprs, cfg, 4);
  double best = 0;
  for (const auto& h : r.history) best = std::max(best, h.validation->auc);
  const auto chosen = evaluate(composed_scorer(r.algebra, f.bank, f.data), f.split.train_exprs,
                               f.data, f.split.val_images);
  EXPECT_DOUBLE_EQ(chosen.auc, best);
}

TEST(Training, FinetuneNeverUsesExcludedExpressions) {
  const auto& f = fixture();
  const auto disj = f.split.exprs_with_root(f.split.train_exprs, Op::Or);
  ASSERT_GE(disj.size(), 4u);
  auto cfg = small_train(1);
  cfg.finetune_expressions = 20;
  cfg.finetune_complexity = 2;
  cfg.epochs_finetune = 1;
  const TrainInputs in{&f.data, f.split.train_images, {}};

  // Exclude a set drawn the same way the finetune set is drawn.
  const auto first = finetune_expressions(f.data, disj, f.split.train_images, cfg, 21);
  std::set<std::string> exclude;
  for (std::size_t k = 0; k < 10; ++k) exclude.insert(print(first[k]));

  std::vector<Expression> used;
  finetune_cnf(init_algebra(f.data.dim(), cfg, 21), f.bank, in, disj, cfg, 21, exclude, &used);
  ASSERT_EQ(used.size(), 20u);
  for (const auto& e : used) {
    EXPECT_FALSE(exclude.count(print(e))) << print(e);
    EXPECT_EQ(conjuncts(e).size(), 2u);
  }

  EXPECT_THROW(finetune_expressions(f.data, f.split.train_exprs, f.split.train_images, cfg, 21),
               Error);
}
