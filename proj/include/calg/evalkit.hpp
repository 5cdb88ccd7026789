#pragma once

// Ranking metrics pooled over all (expression, image) pairs, the chance /
// supervised / independent baselines, and the evaluation drivers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "calg/algebra.hpp"
#include "calg/datakit.hpp"
#include "calg/errors.hpp"
#include "calg/exprlang.hpp"
#include "calg/numcore.hpp"
#include "calg/parallel.hpp"
#include "calg/primitives.hpp"

namespace calg {

struct ScoredPair {
  std::size_t expr_id = 0;
  std::size_t image_id = 0;
  double score = 0.0;
  bool label = false;
};

struct MetricsReport {
  double map = 0.0;
  double auc = 0.0;
  double eer = 0.0;
  std::size_t pairs = 0;
  std::size_t positives = 0;

  bool operator==(const MetricsReport&) const = default;
};

namespace detail {

inline void count_classes(std::span<const ScoredPair> pairs, std::size_t& pos, std::size_t& neg) {
  pos = 0;
  for (const auto& p : pairs) pos += p.label ? 1 : 0;
  neg = pairs.size() - pos;
}

inline void require_both_classes(std::span<const ScoredPair> pairs, const char* metric) {
  std::size_t pos, neg;
  count_classes(pairs, pos, neg);
  if (pos == 0 || neg == 0) {
    throw Error(ErrorCode::SingleClass, std::string(metric) + " needs both classes");
  }
}

}  // namespace detail

/// Average precision of the single pooled ranking. Scores sort descending;
/// equal scores are ordered by (expression id, image id) ascending.
inline double global_map(std::span<const ScoredPair> pairs) {
  std::vector<ScoredPair> ranked(pairs.begin(), pairs.end());
  std::sort(ranked.begin(), ranked.end(), [](const ScoredPair& a, const ScoredPair& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.expr_id != b.expr_id) return a.expr_id < b.expr_id;
    return a.image_id < b.image_id;
  });
  double hits = 0.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    if (ranked[k].label) {
      hits += 1.0;
      sum += hits / static_cast<double>(k + 1);
    }
  }
  if (hits == 0.0) throw Error(ErrorCode::NoPositives, "average precision needs a positive");
  return sum / hits;
}

/// Mann-Whitney statistic with ties counted as one half.
inline double global_auc(std::span<const ScoredPair> pairs) {
  detail::require_both_classes(pairs, "AUC");
  std::vector<std::pair<double, bool>> v;
  v.reserve(pairs.size());
  for (const auto& p : pairs) v.emplace_back(p.score, p.label);
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  double n_pos = 0.0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (v[k].second) {
        rank_sum += avg_rank;
        n_pos += 1.0;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(v.size()) - n_pos;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Equal error rate: the ROC is traced over distinct score thresholds from
/// high to low, and the point where FPR = FNR is found by linear
/// interpolation between the adjacent operating points.
inline double global_eer(std::span<const ScoredPair> pairs) {
  detail::require_both_classes(pairs, "EER");
  std::vector<std::pair<double, bool>> v;
  v.reserve(pairs.size());
  for (const auto& p : pairs) v.emplace_back(p.score, p.label);
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t n_pos, n_neg;
  detail::count_classes(pairs, n_pos, n_neg);
  const double P = static_cast<double>(n_pos);
  const double N = static_cast<double>(n_neg);

  double prev_fpr = 0.0, prev_fnr = 1.0;
  double tp = 0.0, fp = 0.0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) {
      (v[j].second ? tp : fp) += 1.0;
      ++j;
    }
    const double fpr = fp / N;
    const double fnr = 1.0 - tp / P;
    if (fpr >= fnr) {
      // Crossing lies on the segment from (prev_fpr, prev_fnr) to (fpr, fnr).
      const double d_prev = prev_fpr - prev_fnr;  // <= 0
      const double d_cur = fpr - fnr;             // >= 0
      const double t = d_cur == d_prev ? 0.0 : -d_prev / (d_cur - d_prev);
      return prev_fpr + t * (fpr - prev_fpr);
    }
    prev_fpr = fpr;
    prev_fnr = fnr;
    i = j;
  }
  return prev_fpr;  // unreachable: the last point has fpr = 1 >= fnr = 0
}

inline MetricsReport metrics_report(std::span<const ScoredPair> pairs) {
  MetricsReport r;
  r.pairs = pairs.size();
  for (const auto& p : pairs) r.positives += p.label ? 1 : 0;
  r.map = global_map(pairs);
  r.auc = global_auc(pairs);
  r.eer = global_eer(pairs);
  return r;
}

// ---------------------------------------------------------------------------
// Scorers

/// Fills `out[k]` with the score of `expr` on image `images[k]`.
using ScoreFn = std::function<void(const Expression& expr, std::span<const std::size_t> images,
                                   std::span<double> out)>;

struct Scorer {
  std::string name;
  ScoreFn fn;
};

/// Scores from the composed classifier f(e)·[x; 1].
inline Scorer composed_scorer(const NeuralAlgebra& alg, const PrimitiveBank& bank,
                              const Dataset& data, std::string name = "neural_algebra") {
  bank.check_dataset(data);
  return {std::move(name), [&alg, &bank, &data](const Expression& e,
                                                std::span<const std::size_t> images,
                                                std::span<double> out) {
            const auto w = compose(alg, bank, e).classifier;
            for (std::size_t k = 0; k < images.size(); ++k) out[k] = score(w, data.feature(images[k]));
          }};
}

/// Probability of `expr` under the assumption that primitives are independent:
/// p(a∧b) = p(a)p(b), p(a∨b) = p(a) + p(b) − p(a)p(b), p(¬a) = 1 − p(a).
/// Leaves use the Platt-calibrated primitive SVM.
inline double baseline_independent(const PrimitiveBank& bank, const Expression& expr,
                                   std::span<const double> features) {
  switch (expr.op()) {
    case Op::Primitive: {
      const auto& w = bank.at(expr.name());
      return platt_apply(bank.calibration(expr.name()), decision_value(w.weights, features));
    }
    case Op::Not: return 1.0 - baseline_independent(bank, expr.child(), features);
    case Op::And:
      return baseline_independent(bank, expr.left(), features) *
             baseline_independent(bank, expr.right(), features);
    case Op::Or: {
      const double a = baseline_independent(bank, expr.left(), features);
      const double b = baseline_independent(bank, expr.right(), features);
      return a + b - a * b;
    }
  }
  return 0.0;
}

inline Scorer independent_scorer(const PrimitiveBank& bank, const Dataset& data,
                                 std::string name = "independent") {
  bank.check_dataset(data);
  return {std::move(name), [&bank, &data](const Expression& e, std::span<const std::size_t> images,
                                          std::span<double> out) {
            for (const auto& p : e.primitives()) (void)bank.calibration(p);
            for (std::size_t k = 0; k < images.size(); ++k) {
              out[k] = baseline_independent(bank, e, data.feature(images[k]));
            }
          }};
}

/// Replaces every score with a uniform draw.
inline std::vector<ScoredPair> baseline_chance(std::span<const ScoredPair> pairs, RngStream& rng) {
  std::vector<ScoredPair> out(pairs.begin(), pairs.end());
  for (auto& p : out) p.score = rng.uniform();
  return out;
}

/// Uniform random scores keyed on (seed, expression text, image id), so the
/// result does not depend on evaluation order.
inline Scorer chance_scorer(std::uint64_t seed, std::string name = "chance") {
  return {std::move(name), [seed](const Expression& e, std::span<const std::size_t> images,
                                  std::span<double> out) {
            const std::uint64_t key = fnv1a64(print(e), splitmix64(seed));
            for (std::size_t k = 0; k < images.size(); ++k) {
              out[k] = static_cast<double>(splitmix64(key ^ splitmix64(images[k])) >> 11) * 0x1.0p-53;
            }
          }};
}

/// One SVM per expression, trained on expression-level labels.
class SupervisedBaseline {
 public:
  SupervisedBaseline() = default;

  void add(const Expression& e, Classifier w) { models_[print(e)] = std::move(w); }

  bool knows(const Expression& e) const { return models_.count(print(e)) != 0; }

  const Classifier& at(const Expression& e) const {
    auto it = models_.find(print(e));
    if (it == models_.end()) throw Error(ErrorCode::UnknownExpression, print(e));
    return it->second;
  }

  std::size_t size() const { return models_.size(); }

 private:
  std::map<std::string, Classifier> models_;
};

inline std::vector<double> expression_targets(const Dataset& data, const Expression& e,
                                              std::span<const std::size_t> images) {
  const auto lab = expr_label(data, e, images);
  std::vector<double> y(images.size());
  for (std::size_t k = 0; k < images.size(); ++k) y[k] = lab[k] ? 1.0 : -1.0;
  return y;
}

inline SupervisedBaseline baseline_supervised(const Dataset& data,
                                              const std::vector<Expression>& exprs,
                                              std::span<const std::size_t> images,
                                              const BankConfig& cfg, std::uint64_t seed,
                                              std::size_t threads = 1) {
  std::vector<std::vector<double>> targets(exprs.size());
  for (std::size_t k = 0; k < exprs.size(); ++k) {
    targets[k] = expression_targets(data, exprs[k], images);
    const auto pos = static_cast<std::size_t>(
        std::count(targets[k].begin(), targets[k].end(), 1.0));
    const std::size_t neg = images.size() - pos;
    if (pos < cfg.min_pos || neg < cfg.min_neg) {
      throw Error(ErrorCode::InsufficientExamples,
                  "expression " + print(exprs[k]) + " has " + std::to_string(pos) +
                      " positives and " + std::to_string(neg) + " negatives");
    }
  }
  std::vector<Classifier> fitted(exprs.size());
  parallel_for(exprs.size(), threads, [&](std::size_t k) {
    RngStream rng = rng_stream(seed, "supervised." + print(exprs[k]));
    fitted[k] = train_linear_svm(data, images, targets[k], cfg.svm, rng);
    fitted[k].source = ClassifierSource::SupervisedExpression;
  });
  SupervisedBaseline out;
  for (std::size_t k = 0; k < exprs.size(); ++k) out.add(exprs[k], std::move(fitted[k]));
  return out;
}

inline Scorer supervised_scorer(const SupervisedBaseline& sup, const Dataset& data,
                                std::string name = "supervised") {
  return {std::move(name), [&sup, &data](const Expression& e, std::span<const std::size_t> images,
                                         std::span<double> out) {
            const auto& w = sup.at(e);
            for (std::size_t k = 0; k < images.size(); ++k) out[k] = score(w, data.feature(images[k]));
          }};
}

/// Scores equal to the ground-truth label (upper bound, used in tests).
inline Scorer oracle_scorer(const Dataset& data, std::string name = "oracle") {
  return {std::move(name), [&data](const Expression& e, std::span<const std::size_t> images,
                                   std::span<double> out) {
            const auto lab = expr_label(data, e, images);
            for (std::size_t k = 0; k < images.size(); ++k) out[k] = lab[k];
          }};
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Pooling { Global, PerExpression };

/// Every (expression, image) pair scored and labeled, in (expression, image)
/// order. Expression ids are positions in `exprs`.
inline std::vector<ScoredPair> score_pairs(const Scorer& scorer,
                                           const std::vector<Expression>& exprs,
                                           const Dataset& data,
                                           std::span<const std::size_t> images,
                                           std::size_t threads = 1) {
  const std::size_t n = images.size();
  std::vector<ScoredPair> pairs(exprs.size() * n);
  parallel_for(exprs.size(), threads, [&](std::size_t e) {
    std::vector<double> s(n);
    scorer.fn(exprs[e], images, s);
    const auto lab = expr_label(data, exprs[e], images);
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::isfinite(s[k])) {
        throw Error(ErrorCode::NonFiniteLoss,
                    scorer.name + " produced a non-finite score for " + print(exprs[e]));
      }
      pairs[e * n + k] = {e, images[k], s[k], lab[k] != 0};
    }
  });
  return pairs;
}

inline MetricsReport evaluate(const Scorer& scorer, const std::vector<Expression>& exprs,
                              const Dataset& data, std::span<const std::size_t> images,
                              Pooling pooling = Pooling::Global, std::size_t threads = 1) {
  if (exprs.empty() || images.empty()) throw Error(ErrorCode::Usage, "evaluate needs input");
  const auto pairs = score_pairs(scorer, exprs, data, images, threads);
  if (pooling == Pooling::Global) return metrics_report(pairs);

  // Mean over expressions that have both classes in the split.
  MetricsReport r;
  r.pairs = pairs.size();
  std::size_t used = 0;
  const std::size_t n = images.size();
  for (std::size_t e = 0; e < exprs.size(); ++e) {
    std::span<const ScoredPair> group(pairs.data() + e * n, n);
    std::size_t pos, neg;
    detail::count_classes(group, pos, neg);
    r.positives += pos;
    if (pos == 0 || neg == 0) continue;
    r.map += global_map(group);
    r.auc += global_auc(group);
    r.eer += global_eer(group);
    ++used;
  }
  if (used == 0) throw Error(ErrorCode::NoPositives, "no expression has both classes");
  r.map /= static_cast<double>(used);
  r.auc /= static_cast<double>(used);
  r.eer /= static_cast<double>(used);
  return r;
}

// ---------------------------------------------------------------------------
// CNF complexity sweep

struct SweepConfig {
  std::vector<std::size_t> complexities{2, 4, 6, 8, 10};
  std::size_t per_complexity = 200;
  std::size_t max_attempts_factor = 50;  // draws allowed per requested expression
};

/// `count` distinct CNFs of `complexity` clauses from `pool`, none of which
/// appear in `exclude` (compared by canonical text).
inline std::vector<Expression> sample_cnf_set(const std::vector<Expression>& pool,
                                              std::size_t complexity, std::size_t count,
                                              const std::set<std::string>& exclude,
                                              RngStream& rng, std::size_t max_attempts_factor = 50,
                                              const std::function<bool(const Expression&)>& accept = {}) {
  std::vector<Expression> out;
  std::set<std::string> seen;
  const std::size_t max_attempts = std::max<std::size_t>(1, count * max_attempts_factor);
  for (std::size_t attempt = 0; attempt < max_attempts && out.size() < count; ++attempt) {
    auto e = random_cnf_from_clauses(pool, complexity, rng);
    auto key = print(e);
    if (exclude.count(key) || !seen.insert(key).second) continue;
    if (accept && !accept(e)) continue;
    out.push_back(std::move(e));
  }
  if (out.size() < count) {
    throw Error(ErrorCode::InsufficientExamples,
                "could only draw " + std::to_string(out.size()) + " of " +
                    std::to_string(count) + " CNF expressions of complexity " +
                    std::to_string(complexity));
  }
  return out;
}

struct SweepRow {
  std::string scorer;
  std::size_t complexity = 0;
  MetricsReport report;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::map<std::size_t, std::vector<Expression>> expressions;  // per complexity
};

/// The CNF test sets of a sweep, keyed by complexity. Each complexity draws
/// from its own stream ("sweep.c<c>").
inline std::map<std::size_t, std::vector<Expression>> sweep_expression_sets(
    const std::vector<Expression>& clause_pool, const SweepConfig& cfg, std::uint64_t seed,
    const std::set<std::string>& exclude = {}) {
  std::map<std::size_t, std::vector<Expression>> out;
  for (std::size_t c : cfg.complexities) {
    RngStream rng = rng_stream(seed, "sweep.c" + std::to_string(c));
    out[c] = sample_cnf_set(clause_pool, c, cfg.per_complexity, exclude, rng,
                            cfg.max_attempts_factor);
  }
  return out;
}

/// Scores every scorer on every complexity's test set over `images`.
inline SweepResult complexity_sweep(const std::vector<Scorer>& scorers, const Dataset& data,
                                    std::map<std::size_t, std::vector<Expression>> sets,
                                    std::span<const std::size_t> images,
                                    Pooling pooling = Pooling::Global, std::size_t threads = 1) {
  SweepResult result;
  for (const auto& [c, exprs] : sets) {
    for (const auto& s : scorers) {
      result.rows.push_back({s.name, c, evaluate(s, exprs, data, images, pooling, threads)});
    }
  }
  result.expressions = std::move(sets);
  return result;
}

/// Test CNFs built from `clause_pool` (unknown simple disjunctions) for each
/// complexity, scored by every scorer on `images`.
inline SweepResult complexity_sweep(const std::vector<Scorer>& scorers, const Dataset& data,
                                    const std::vector<Expression>& clause_pool,
                                    std::span<const std::size_t> images, const SweepConfig& cfg,
                                    std::uint64_t seed, const std::set<std::string>& exclude = {},
                                    std::size_t threads = 1) {
  return complexity_sweep(scorers, data, sweep_expression_sets(clause_pool, cfg, seed, exclude),
                          images, Pooling::Global, threads);
}

}  // namespace calg
