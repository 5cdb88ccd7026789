#pragma once

// Learning the composition network. For a batch of expressions, each with a
// few positive and negative training images, the objective is
//
//   α1 · mean_pairs hinge(f(e)·[x;1], y)
//     + (α2/2) · mean_e ‖f(e)‖²
//     + α3 · (‖W1‖² + ‖W2‖²)
//
// with labels y ∈ {−1, +1}. An epoch is one shuffled pass over all training
// expressions, grouped into batches.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "calg/algebra.hpp"
#include "calg/datakit.hpp"
#include "calg/errors.hpp"
#include "calg/evalkit.hpp"
#include "calg/exprlang.hpp"
#include "calg/numcore.hpp"
#include "calg/primitives.hpp"

namespace calg {

struct TrainConfig {
  double alpha1 = 1.0;   // fit
  double alpha2 = 1e-4;  // L2 of composed classifiers
  double alpha3 = 1e-4;  // L2 of network weights
  double lr = 3e-3;
  std::size_t epochs_main = 400;
  std::size_t epochs_finetune = 10;
  std::size_t batch_expressions = 32;
  std::size_t pos_per_expr = 5;
  std::size_t neg_per_expr = 5;
  bool freeze_primitives = true;
  bool validate = true;           // record validation metrics every epoch
  bool select_best_val = false;   // keep the epoch with the best validation AUC
  double slope = 0.1;
  bool learn_disjunction = false;  // separate network for ∨ instead of De Morgan
  bool unit_norm = false;          // rescale composed classifiers before re-composition
  std::size_t finetune_expressions = 400;
  std::size_t finetune_complexity = 4;
  std::size_t threads = 1;

  void validate_config() const {
    if (alpha1 < 0 || alpha2 < 0 || alpha3 < 0) throw Error(ErrorCode::Usage, "alpha must be >= 0");
    if (batch_expressions < 1 || pos_per_expr < 1 || neg_per_expr < 1) {
      throw Error(ErrorCode::Usage, "batch counts must be >= 1");
    }
    if (!(lr >= 0)) throw Error(ErrorCode::Usage, "lr must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Batches

/// Training expressions with their positive/negative images in one split.
struct ExpressionPool {
  std::vector<Expression> exprs;
  std::vector<IndexList> positives;
  std::vector<IndexList> negatives;
};

inline ExpressionPool make_expression_pool(const Dataset& data,
                                           const std::vector<Expression>& exprs,
                                           std::span<const std::size_t> images,
                                           std::size_t min_pos, std::size_t min_neg) {
  ExpressionPool pool;
  pool.exprs = exprs;
  for (const auto& e : exprs) {
    const auto lab = expr_label(data, e, images);
    IndexList pos, neg;
    for (std::size_t k = 0; k < images.size(); ++k) (lab[k] ? pos : neg).push_back(images[k]);
    if (pos.size() < min_pos || neg.size() < min_neg) {
      throw Error(ErrorCode::InsufficientExamples,
                  "expression " + print(e) + " has " + std::to_string(pos.size()) +
                      " positives and " + std::to_string(neg.size()) + " negatives");
    }
    pool.positives.push_back(std::move(pos));
    pool.negatives.push_back(std::move(neg));
  }
  return pool;
}

struct BatchItem {
  std::size_t expr_index = 0;  // position in the pool
  Expression expr;
  IndexList images;
  std::vector<double> targets;  // ±1, aligned with images
};

struct Batch {
  std::vector<BatchItem> items;

  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.images.size();
    return n;
  }
};

/// For each selected expression, positives and negatives drawn uniformly
/// without replacement.
inline Batch sample_batch(const ExpressionPool& pool, std::span<const std::size_t> selection,
                          std::size_t pos_per_expr, std::size_t neg_per_expr, RngStream& rng) {
  Batch batch;
  batch.items.reserve(selection.size());
  for (std::size_t idx : selection) {
    const auto& pos = pool.positives.at(idx);
    const auto& neg = pool.negatives.at(idx);
    if (pos.size() < pos_per_expr || neg.size() < neg_per_expr) {
      throw Error(ErrorCode::InsufficientExamples, "expression " + print(pool.exprs[idx]));
    }
    BatchItem item{idx, pool.exprs[idx], {}, {}};
    for (std::size_t k : rng.choice(pos.size(), pos_per_expr)) {
      item.images.push_back(pos[k]);
      item.targets.push_back(1.0);
    }
    for (std::size_t k : rng.choice(neg.size(), neg_per_expr)) {
      item.images.push_back(neg[k]);
      item.targets.push_back(-1.0);
    }
    batch.items.push_back(std::move(item));
  }
  return batch;
}

/// Convenience form: a batch over all of `exprs` within the `images` split.
inline Batch sample_batch(const Dataset& data, const std::vector<Expression>& exprs,
                          std::span<const std::size_t> images, RngStream& rng,
                          std::size_t pos_per_expr = 5, std::size_t neg_per_expr = 5) {
  const auto pool = make_expression_pool(data, exprs, images, pos_per_expr, neg_per_expr);
  std::vector<std::size_t> all(exprs.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return sample_batch(pool, all, pos_per_expr, neg_per_expr, rng);
}

// ---------------------------------------------------------------------------
// Loss

inline double hinge(double s, double y) { return std::max(0.0, 1.0 - y * s); }

/// d hinge / d s; zero at the kink.
inline double hinge_grad(double s, double y) { return 1.0 - y * s > 0.0 ? -y : 0.0; }

struct ObjectiveTerms {
  double fit = 0.0;       // α1 · mean hinge
  double expr_l2 = 0.0;   // (α2/2) · mean ‖f(e)‖²
  double param_l2 = 0.0;  // α3 · ‖W‖²

  double total() const { return fit + expr_l2 + param_l2; }
};

struct ObjectiveResult {
  double loss = 0.0;
  ObjectiveTerms terms;
  CompositionGrad grad;
};

inline double weight_l2(const NeuralAlgebra& alg) {
  double acc = squared_norm(alg.conj.w1.span()) + squared_norm(alg.conj.w2.span());
  if (alg.disj) acc += squared_norm(alg.disj->w1.span()) + squared_norm(alg.disj->w2.span());
  return acc;
}

inline ObjectiveResult objective(const NeuralAlgebra& alg, const PrimitiveBank& bank,
                                 const Dataset& data, const Batch& batch, const TrainConfig& cfg) {
  if (batch.items.empty()) throw Error(ErrorCode::Usage, "empty batch");
  ObjectiveResult res;
  res.grad = {alg.zeros_like(), {}};
  const double inv_pairs = 1.0 / static_cast<double>(batch.pair_count());
  const double inv_exprs = 1.0 / static_cast<double>(batch.items.size());
  const std::size_t dim = alg.classifier_dim();
  double hinge_sum = 0.0;
  double norm_sum = 0.0;
  for (const auto& item : batch.items) {
    const auto comp = compose(alg, bank, item.expr);
    const Vector& w = comp.classifier.weights;
    Vector gw(dim);
    for (std::size_t k = 0; k < item.images.size(); ++k) {
      const auto x = data.feature(item.images[k]);
      const double s = decision_value(w, x);
      const double y = item.targets[k];
      hinge_sum += hinge(s, y);
      const double g = cfg.alpha1 * hinge_grad(s, y) * inv_pairs;
      if (g != 0.0) {
        for (std::size_t i = 0; i + 1 < dim; ++i) gw[i] += g * x[i];
        gw[dim - 1] += g;
      }
    }
    norm_sum += squared_norm(w);
    axpy_inplace(cfg.alpha2 * inv_exprs, w, gw);
    compose_backward_into(alg, comp.trace, gw, res.grad);
  }
  res.terms.fit = cfg.alpha1 * hinge_sum * inv_pairs;
  res.terms.expr_l2 = 0.5 * cfg.alpha2 * norm_sum * inv_exprs;
  res.terms.param_l2 = cfg.alpha3 * weight_l2(alg);
  res.loss = res.terms.total();

  auto add_weight_decay = [&cfg](const CompositionNet& net, CompositionNet& g) {
    axpy_inplace(2.0 * cfg.alpha3, net.w1.span(), g.w1.span());
    axpy_inplace(2.0 * cfg.alpha3, net.w2.span(), g.w2.span());
  };
  add_weight_decay(alg.conj, res.grad.params.conj);
  if (alg.disj) add_weight_decay(*alg.disj, *res.grad.params.disj);
  if (cfg.freeze_primitives) res.grad.leaves.clear();
  return res;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  ObjectiveTerms terms;  // means over the epoch's batches
  std::optional<MetricsReport> validation;
};

struct TrainResult {
  NeuralAlgebra algebra;
  PrimitiveBank bank;  // unchanged unless freeze_primitives is false
  std::vector<EpochRecord> history;
};

struct TrainInputs {
  const Dataset* data = nullptr;
  std::span<const std::size_t> train_images;
  std::span<const std::size_t> val_images;  // may be empty
};

/// Runs `epochs` passes of the objective over `exprs`. `stage` labels the
/// random streams so the main run and finetuning draw independently.
inline TrainResult run_training(NeuralAlgebra alg, PrimitiveBank bank, const TrainInputs& in,
                                const std::vector<Expression>& exprs, const TrainConfig& cfg,
                                std::size_t epochs, std::uint64_t seed, const std::string& stage) {
  cfg.validate_config();
  if (exprs.empty()) throw Error(ErrorCode::Usage, "no training expressions");
  const Dataset& data = *in.data;
  bank.check_dataset(data);
  const auto pool =
      make_expression_pool(data, exprs, in.train_images, cfg.pos_per_expr, cfg.neg_per_expr);

  OptimState opt = OptimState::adam(alg.parameter_count(), cfg.lr);
  std::map<std::string, OptimState> leaf_opt;
  RngStream order_rng = rng_stream(seed, stage + ".order");
  RngStream batch_rng = rng_stream(seed, stage + ".batch");

  TrainResult result;
  std::optional<std::pair<double, NeuralAlgebra>> best;
  std::vector<std::size_t> order(exprs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    order_rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_expressions) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_expressions);
      std::span<const std::size_t> sel(order.data() + start, stop - start);
      const Batch batch = sample_batch(pool, sel, cfg.pos_per_expr, cfg.neg_per_expr, batch_rng);
      const auto obj = objective(alg, bank, data, batch, cfg);
      if (!std::isfinite(obj.loss)) {
        std::string exprs_text;
        for (const auto& it : batch.items) exprs_text += " " + print(it.expr);
        throw Error(ErrorCode::NonFiniteLoss, stage + " epoch " + std::to_string(epoch) +
                                                  " batch" + exprs_text);
      }
      auto params = alg.flatten();
      const auto grads = obj.grad.params.flatten();
      opt_step(opt, params, grads);
      alg.assign(params);
      for (const auto& [name, g] : obj.grad.leaves) {
        auto [it, fresh] = leaf_opt.try_emplace(name, OptimState::adam(g.size(), cfg.lr));
        opt_step(it->second, bank.at(name).weights.span(), g);
      }
      rec.mean_loss += obj.loss;
      rec.terms.fit += obj.terms.fit;
      rec.terms.expr_l2 += obj.terms.expr_l2;
      rec.terms.param_l2 += obj.terms.param_l2;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    rec.mean_loss *= inv;
    rec.terms.fit *= inv;
    rec.terms.expr_l2 *= inv;
    rec.terms.param_l2 *= inv;
    if (cfg.validate && !in.val_images.empty()) {
      rec.validation = evaluate(composed_scorer(alg, bank, data), exprs, data, in.val_images,
                                Pooling::Global, cfg.threads);
      if (cfg.select_best_val && (!best || rec.validation->auc > best->first)) {
        best.emplace(rec.validation->auc, alg);
      }
    }
    result.history.push_back(rec);
  }
  result.algebra = best ? std::move(best->second) : std::move(alg);
  result.bank = std::move(bank);
  return result;
}

inline TrainResult train(const NeuralAlgebra& init, const PrimitiveBank& bank,
                         const TrainInputs& in, const std::vector<Expression>& train_exprs,
                         const TrainConfig& cfg, std::uint64_t seed) {
  return run_training(init, bank, in, train_exprs, cfg, cfg.epochs_main, seed, "train");
}

/// Freshly initialized algebra for a bank of classifiers of length D+1.
inline NeuralAlgebra init_algebra(std::size_t feature_dim, const TrainConfig& cfg,
                                  std::uint64_t seed) {
  RngStream rng = rng_stream(seed, "net.init");
  NeuralAlgebra alg = NeuralAlgebra::init(feature_dim + 1, rng, cfg.slope, cfg.learn_disjunction);
  alg.unit_norm = cfg.unit_norm;
  return alg;
}

// ---------------------------------------------------------------------------
// CNF finetuning

/// Complexity-k CNFs built from known disjunctions; each must have enough
/// positives and negatives among `images` and must not be in `exclude`.
inline std::vector<Expression> finetune_expressions(const Dataset& data,
                                                    const std::vector<Expression>& known_disjunctions,
                                                    std::span<const std::size_t> images,
                                                    const TrainConfig& cfg, std::uint64_t seed,
                                                    const std::set<std::string>& exclude = {}) {
  if (known_disjunctions.empty()) throw Error(ErrorCode::Usage, "no known disjunctions");
  for (const auto& d : known_disjunctions) {
    if (d.op() != Op::Or) throw Error(ErrorCode::Usage, "finetune clause is not a disjunction: " + print(d));
  }
  RngStream rng = rng_stream(seed, "finetune.exprs");
  auto accept = [&](const Expression& e) {
    const auto lab = expr_label(data, e, images);
    const auto pos = static_cast<std::size_t>(std::count(lab.begin(), lab.end(), 1));
    return pos >= cfg.pos_per_expr && images.size() - pos >= cfg.neg_per_expr;
  };
  return sample_cnf_set(known_disjunctions, cfg.finetune_complexity, cfg.finetune_expressions,
                        exclude, rng, 50, accept);
}

/// Continues training on complexity-k CNFs of known disjunctions for
/// `epochs_finetune` passes. Throws if any finetune expression is in
/// `test_cnfs`.
inline TrainResult finetune_cnf(const NeuralAlgebra& alg, const PrimitiveBank& bank,
                                const TrainInputs& in,
                                const std::vector<Expression>& known_disjunctions,
                                const TrainConfig& cfg, std::uint64_t seed,
                                const std::set<std::string>& test_cnfs = {},
                                std::vector<Expression>* used = nullptr) {
  auto exprs = finetune_expressions(*in.data, known_disjunctions, in.train_images, cfg, seed,
                                    test_cnfs);
  for (const auto& e : exprs) {
    if (test_cnfs.count(print(e))) {
      throw Error(ErrorCode::Usage, "finetune expression overlaps test set: " + print(e));
    }
  }
  TrainConfig ft = cfg;
  ft.validate = false;
  ft.select_best_val = false;
  auto result = run_training(alg, bank, in, exprs, ft, cfg.epochs_finetune, seed, "finetune");
  if (used) *used = std::move(exprs);
  return result;
}

}  // namespace calg
