#pragma once

// The experiment pipeline, stage by stage: synthetic data, splits, primitive
// bank, calibration, composition training, simple-expression evaluation,
// CNF finetuning and the complexity sweep.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "calg/algebra.hpp"
#include "calg/config.hpp"
#include "calg/datakit.hpp"
#include "calg/evalkit.hpp"
#include "calg/io.hpp"
#include "calg/primitives.hpp"
#include "calg/training.hpp"

namespace calg {

inline Dataset make_dataset(const ExperimentConfig& cfg) { return synth_generate(cfg.synth); }

inline SplitSpec make_experiment_split(const Dataset& data, const ExperimentConfig& cfg) {
  return make_splits(data, prefilter_candidates(data, cfg.split), cfg.split, cfg.seed);
}

inline std::string bank_config_digest(const ExperimentConfig& cfg) {
  return config_digest(cfg, {"seed", "split.", "svm.", "bank.", "platt."});
}

inline std::string net_config_digest(const ExperimentConfig& cfg) {
  return config_digest(cfg, {"seed", "split.", "svm.", "bank.", "platt.", "train."});
}

/// Primitive SVMs on the split's SVM images, without calibration.
inline PrimitiveBank build_bank(const Dataset& data, const SplitSpec& split,
                                const ExperimentConfig& cfg) {
  const auto images = split.svm_images();
  auto bank = train_primitive_bank(data, data.primitive_names, images, cfg.bank, cfg.seed,
                                   cfg.threads);
  bank.config_digest = bank_config_digest(cfg);
  return bank;
}

inline void calibrate(PrimitiveBank& bank, const Dataset& data, const SplitSpec& split,
                      const ExperimentConfig& cfg) {
  const auto images = split.calibration_images();
  calibrate_bank(bank, data, images, cfg.platt);
}

inline TrainResult train_algebra(const Dataset& data, const SplitSpec& split,
                                 const PrimitiveBank& bank, const ExperimentConfig& cfg) {
  const auto init = init_algebra(data.dim(), cfg.train, cfg.seed);
  const TrainInputs in{&data, split.train_images, split.val_images};
  return train(init, bank, in, split.train_exprs, cfg.train, cfg.seed);
}

/// Unknown disjunctions: the clause pool of the test CNFs.
inline std::vector<Expression> unknown_disjunctions(const SplitSpec& split) {
  return split.exprs_with_root(split.test_exprs, Op::Or);
}

inline std::vector<Expression> known_disjunctions(const SplitSpec& split) {
  return split.exprs_with_root(split.train_exprs, Op::Or);
}

inline std::map<std::size_t, std::vector<Expression>> sweep_sets(const SplitSpec& split,
                                                                  const ExperimentConfig& cfg) {
  return sweep_expression_sets(unknown_disjunctions(split), cfg.sweep, cfg.seed);
}

inline std::set<std::string> expression_keys(
    const std::map<std::size_t, std::vector<Expression>>& sets) {
  std::set<std::string> keys;
  for (const auto& [c, exprs] : sets) {
    for (const auto& e : exprs) keys.insert(print(e));
  }
  return keys;
}

/// Finetunes on complexity-k CNFs of known disjunctions, never touching the
/// sweep's test CNFs.
inline TrainResult finetune_algebra(const Dataset& data, const SplitSpec& split,
                                    const TrainResult& trained, const ExperimentConfig& cfg,
                                    std::vector<Expression>* used = nullptr) {
  const TrainInputs in{&data, split.train_images, {}};
  return finetune_cnf(trained.algebra, trained.bank, in, known_disjunctions(split), cfg.train,
                      cfg.seed, expression_keys(sweep_sets(split, cfg)), used);
}

/// Rows for ∧ and ∨ roots, known (training) and unknown (held-out)
/// expressions, every applicable scorer, all scored on test images.
inline std::vector<ReportRow> evaluate_simple(const Dataset& data, const SplitSpec& split,
                                              const PrimitiveBank& bank, const NeuralAlgebra& alg,
                                              const SupervisedBaseline* supervised,
                                              const ExperimentConfig& cfg) {
  std::vector<Scorer> scorers{chance_scorer(cfg.seed), independent_scorer(bank, data),
                              composed_scorer(alg, bank, data)};
  std::optional<Scorer> sup;
  if (supervised) sup = supervised_scorer(*supervised, data);
  std::vector<ReportRow> rows;
  const Pooling pooling = cfg.pooling_mode();
  for (Op op : {Op::And, Op::Or}) {
    const std::string root = op == Op::And ? "and" : "or";
    const auto known = split.exprs_with_root(split.train_exprs, op);
    const auto unknown = split.exprs_with_root(split.test_exprs, op);
    for (const auto& [subset, exprs] :
         {std::pair{root + "/known", &known}, std::pair{root + "/unknown", &unknown}}) {
      if (exprs->empty()) continue;
      auto all = scorers;
      if (sup && subset.ends_with("/known")) all.insert(all.begin() + 1, *sup);
      for (const auto& s : all) {
        rows.push_back({"simple", s.name, subset, 1,
                        evaluate(s, *exprs, data, split.test_images, pooling, cfg.threads)});
      }
    }
  }
  return rows;
}

inline std::vector<ReportRow> sweep_rows(const SweepResult& sweep) {
  std::vector<ReportRow> rows;
  for (const auto& r : sweep.rows) rows.push_back({"cnf", r.scorer, "cnf", r.complexity, r.report});
  return rows;
}

struct ExperimentResult {
  Dataset data;
  SplitSpec split;
  PrimitiveBank bank;  // calibrated
  TrainResult trained;
  std::optional<TrainResult> finetuned;
  std::vector<Expression> finetune_exprs;
  std::vector<ReportRow> simple;
  SweepResult sweep;

  std::vector<ReportRow> all_rows() const {
    auto rows = simple;
    const auto cnf = sweep_rows(sweep);
    rows.insert(rows.end(), cnf.begin(), cnf.end());
    return rows;
  }
};

/// Every stage in order, entirely in memory.
inline ExperimentResult run_experiment(ExperimentConfig cfg) {
  cfg.sync();
  ExperimentResult r;
  r.data = make_dataset(cfg);
  r.split = make_experiment_split(r.data, cfg);
  r.bank = build_bank(r.data, r.split, cfg);
  calibrate(r.bank, r.data, r.split, cfg);
  r.trained = train_algebra(r.data, r.split, r.bank, cfg);
  const auto supervised = baseline_supervised(r.data, r.split.train_exprs, r.split.svm_images(),
                                              cfg.bank, cfg.seed, cfg.threads);
  r.simple = evaluate_simple(r.data, r.split, r.bank, r.trained.algebra, &supervised, cfg);
  if (cfg.run_finetune) r.finetuned = finetune_algebra(r.data, r.split, r.trained, cfg, &r.finetune_exprs);
  if (cfg.run_sweep) {
    std::vector<Scorer> scorers{chance_scorer(cfg.seed), independent_scorer(r.bank, r.data),
                                composed_scorer(r.trained.algebra, r.bank, r.data)};
    if (r.finetuned) {
      scorers.push_back(composed_scorer(r.finetuned->algebra, r.bank, r.data, "neural_algebra_ft"));
    }
    r.sweep = complexity_sweep(scorers, r.data, sweep_sets(r.split, cfg), r.split.test_images,
                               cfg.pooling_mode(), cfg.threads);
  }
  return r;
}

inline const ReportRow* find_row(const std::vector<ReportRow>& rows, std::string_view scorer,
                                 std::string_view subset, std::size_t complexity = 0) {
  for (const auto& r : rows) {
    if (r.scorer == scorer && r.subset == subset && (complexity == 0 || r.complexity == complexity)) {
      return &r;
    }
  }
  return nullptr;
}

}  // namespace calg
