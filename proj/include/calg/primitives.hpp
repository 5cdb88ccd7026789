#pragma once

// One-vs-all linear SVMs for primitives and Platt calibration of their scores.
//
// A classifier is a (D+1)-vector whose last coordinate is the bias, paired
// with a constant +1 feature appended to every image.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calg/datakit.hpp"
#include "calg/errors.hpp"
#include "calg/numcore.hpp"
#include "calg/parallel.hpp"

namespace calg {

enum class ClassifierSource { SvmPrimitive, Composed, SupervisedExpression };

struct Classifier {
  Vector weights;  // D weights followed by the bias
  ClassifierSource source = ClassifierSource::SvmPrimitive;

  std::size_t feature_dim() const { return weights.size() - 1; }
  double bias() const { return weights[weights.size() - 1]; }

  bool operator==(const Classifier&) const = default;
};

/// w · [x; 1]
inline double decision_value(std::span<const double> w, std::span<const double> x) {
  detail::require_shape(w.size() == x.size() + 1, "score", w.size(), x.size() + 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += w[i] * x[i];
  return acc + w[x.size()];
}

// ---------------------------------------------------------------------------
// Linear SVM: Pegasos stochastic subgradient on
//   (λ/2)‖w‖² + mean_i max(0, 1 − y_i (w·x_i + b))
// with the bias excluded from the regularizer. The returned classifier is the
// final iterate after `epochs` shuffled passes.

struct SvmConfig {
  double lambda = 1e-2;
  std::size_t epochs = 20;
  // Step size is 1/(λ (t + step_offset)); the offset damps the first updates,
  // which otherwise leave a large unregularized bias behind.
  double step_offset = 1e4;
};

struct SvmTrace {
  std::vector<double> epoch_objective;  // objective of the iterate at each epoch end
};

template <typename Rows>
double svm_objective(const Rows& rows, std::size_t n, std::span<const double> labels,
                     std::span<const double> w, double lambda) {
  const std::size_t d = w.size() - 1;
  double reg = 0.0;
  for (std::size_t k = 0; k < d; ++k) reg += w[k] * w[k];
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += std::max(0.0, 1.0 - labels[i] * decision_value(w, rows(i)));
  }
  return 0.5 * lambda * reg + loss / static_cast<double>(n);
}

namespace detail {

template <typename Rows>
void check_svm_inputs(const Rows& rows, std::size_t n, std::size_t d,
                      std::span<const double> labels, const SvmConfig& cfg) {
  if (labels.size() != n) throw Error(ErrorCode::ShapeMismatch, "svm labels vs rows");
  if (!(cfg.lambda > 0.0)) throw Error(ErrorCode::Usage, "svm lambda must be positive");
  std::size_t pos = 0;
  for (double y : labels) {
    if (y != 1.0 && y != -1.0) throw Error(ErrorCode::Usage, "svm labels must be ±1");
    pos += y > 0 ? 1 : 0;
  }
  if (pos == 0 || pos == n) throw Error(ErrorCode::SingleClass, "svm training data has one class");
  auto first = rows(0);
  bool identical = true;
  for (std::size_t i = 1; i < n && identical; ++i) {
    auto r = rows(i);
    identical = std::equal(first.begin(), first.end(), r.begin());
  }
  if (identical && d > 0) {
    throw Error(ErrorCode::DegenerateFeatures,
                "all feature rows identical with conflicting labels");
  }
}

}  // namespace detail

/// Core solver over an arbitrary row accessor `rows(i) -> span<const double>`.
template <typename Rows>
Classifier train_linear_svm_rows(const Rows& rows, std::size_t n, std::size_t d,
                                 std::span<const double> labels, const SvmConfig& cfg,
                                 RngStream& rng, SvmTrace* trace = nullptr) {
  detail::check_svm_inputs(rows, n, d, labels, cfg);
  Vector w(d + 1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  double t = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t i : order) {
      t += 1.0;
      const double eta = 1.0 / (cfg.lambda * (t + cfg.step_offset));
      auto x = rows(i);
      const double y = labels[i];
      const bool violated = y * decision_value(w, x) < 1.0;
      const double shrink = 1.0 - eta * cfg.lambda;
      for (std::size_t k = 0; k < d; ++k) w[k] *= shrink;
      if (violated) {
        for (std::size_t k = 0; k < d; ++k) w[k] += eta * y * x[k];
        w[d] += eta * y;
      }
    }
    if (trace) trace->epoch_objective.push_back(svm_objective(rows, n, labels, w, cfg.lambda));
  }
  return {std::move(w), ClassifierSource::SvmPrimitive};
}

inline Classifier train_linear_svm(const Matrix& features, std::span<const double> labels,
                                   const SvmConfig& cfg, RngStream& rng,
                                   SvmTrace* trace = nullptr) {
  auto rows = [&features](std::size_t i) { return features.row(i); };
  return train_linear_svm_rows(rows, features.rows(), features.cols(), labels, cfg, rng, trace);
}

/// SVM over a subset of dataset images.
inline Classifier train_linear_svm(const Dataset& data, std::span<const std::size_t> images,
                                   std::span<const double> labels, const SvmConfig& cfg,
                                   RngStream& rng, SvmTrace* trace = nullptr) {
  auto rows = [&](std::size_t k) { return data.feature(images[k]); };
  return train_linear_svm_rows(rows, images.size(), data.dim(), labels, cfg, rng, trace);
}

// ---------------------------------------------------------------------------
// Platt calibration: p(s) = σ(A·s + B) with the standard logistic
// σ(z) = 1/(1 + e^{-z}). Under this convention A > 0 when a higher raw score
// means "positive".

struct PlattParams {
  double a = 0.0;
  double b = 0.0;
  std::size_t iterations = 0;

  bool operator==(const PlattParams& o) const { return a == o.a && b == o.b; }
};

struct PlattConfig {
  std::size_t max_iterations = 100;
  double gradient_tolerance = 1e-10;  // on the per-sample mean gradient
};

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Calibrated probability, strictly inside (0, 1).
inline double platt_apply(const PlattParams& p, double score) {
  constexpr double lo = 1e-15;
  constexpr double hi = 1.0 - 1e-15;
  return std::clamp(logistic(p.a * score + p.b), lo, hi);
}

/// Regularized maximum likelihood with Platt's prior-smoothed targets,
/// solved by Newton iterations with backtracking.
inline PlattParams platt_fit(std::span<const double> scores, std::span<const double> labels,
                             const PlattConfig& cfg = {}) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "platt inputs");
  const std::size_t n = scores.size();
  double n_pos = 0.0;
  for (double y : labels) n_pos += y > 0 ? 1.0 : 0.0;
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw Error(ErrorCode::SingleClass, "platt labels one class");

  const double t_pos = (n_pos + 1.0) / (n_pos + 2.0);
  const double t_neg = 1.0 / (n_neg + 2.0);
  std::vector<double> target(n);
  for (std::size_t i = 0; i < n; ++i) target[i] = labels[i] > 0 ? t_pos : t_neg;

  // Fit on standardized scores and map the solution back; keeps the Newton
  // system well conditioned whatever the raw score scale.
  double mean = 0.0;
  for (double v : scores) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : scores) var += (v - mean) * (v - mean);
  const double sd = var > 0.0 ? std::sqrt(var / static_cast<double>(n)) : 1.0;
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = (scores[i] - mean) / sd;
  auto unscale = [&](double a, double b, std::size_t it) {
    return PlattParams{a / sd, b - a * mean / sd, it};
  };

  // Negative log-likelihood, computed stably: Σ log(1 + e^f) − t·f.
  auto nll = [&](double a, double b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double f = a * z[i] + b;
      const double softplus = f > 0 ? f + std::log1p(std::exp(-f)) : std::log1p(std::exp(f));
      acc += softplus - target[i] * f;
    }
    return acc;
  };

  const double inv_n = 1.0 / static_cast<double>(n);
  double a = 0.0;
  double b = std::log((n_pos + 1.0) / (n_neg + 1.0));
  double fval = nll(a, b);
  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    double ga = 0.0, gb = 0.0, haa = 1e-12, hab = 0.0, hbb = 1e-12;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = logistic(a * z[i] + b);
      const double r = p - target[i];
      const double w = p * (1.0 - p);
      ga += r * z[i];
      gb += r;
      haa += w * z[i] * z[i];
      hab += w * z[i];
      hbb += w;
    }
    if (std::max(std::abs(ga), std::abs(gb)) * inv_n < cfg.gradient_tolerance) {
      return unscale(a, b, it - 1);
    }
    const double det = haa * hbb - hab * hab;
    const double da = -(hbb * ga - hab * gb) / det;
    const double db = -(-hab * ga + haa * gb) / det;
    const double slope = ga * da + gb * db;
    // Below this the predicted decrease is lost in rounding of the
    // objective, so the full Newton step is taken unchecked.
    const bool in_noise = -slope < 1e-12 * std::max(1.0, std::abs(fval));
    double step = 1.0;
    bool moved = false;
    while (step >= 1e-10) {
      const double na = a + step * da;
      const double nb = b + step * db;
      const double nf = nll(na, nb);
      if (in_noise || nf <= fval + 1e-4 * step * slope) {
        a = na;
        b = nb;
        fval = nf;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) {
      // No representable decrease left: accept if already at a stationary point.
      if (std::max(std::abs(ga), std::abs(gb)) * inv_n < 1e-7) return unscale(a, b, it);
      throw Error(ErrorCode::NoConvergence, "platt line search failed");
    }
  }
  throw Error(ErrorCode::NoConvergence,
              "platt fit did not converge in " + std::to_string(cfg.max_iterations) +
                  " iterations");
}

// ---------------------------------------------------------------------------
// Primitive banks

struct PrimitiveBank {
  std::size_t dim = 0;  // feature dimension D (classifiers have D+1 entries)
  std::vector<std::string> names;
  std::vector<Classifier> classifiers;
  std::vector<std::optional<PlattParams>> platt;
  std::string config_digest;
  std::string dataset_digest;

  std::size_t size() const { return names.size(); }

  std::optional<std::size_t> find(std::string_view name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names.begin());
  }

  const Classifier& at(std::string_view name) const {
    auto idx = find(name);
    if (!idx) throw Error(ErrorCode::UnknownPrimitive, "'" + std::string(name) + "' not in bank");
    return classifiers[*idx];
  }

  Classifier& at(std::string_view name) {
    return const_cast<Classifier&>(std::as_const(*this).at(name));
  }

  const PlattParams& calibration(std::string_view name) const {
    auto idx = find(name);
    if (!idx) throw Error(ErrorCode::UnknownPrimitive, "'" + std::string(name) + "' not in bank");
    if (!platt[*idx]) throw Error(ErrorCode::MissingCalibration, std::string(name));
    return *platt[*idx];
  }

  void add(std::string name, Classifier c) {
    if (dim == 0 && names.empty()) dim = c.feature_dim();
    if (c.feature_dim() != dim) {
      throw Error(ErrorCode::ShapeMismatch, "bank classifier for " + name + " has wrong length");
    }
    if (find(name)) throw Error(ErrorCode::Usage, "duplicate primitive " + name);
    names.push_back(std::move(name));
    classifiers.push_back(std::move(c));
    platt.emplace_back();
  }

  /// Fails fast when the bank is used with data of another dimension.
  void check_dataset(const Dataset& data) const {
    if (data.dim() != dim) {
      throw Error(ErrorCode::ShapeMismatch,
                  "bank has D=" + std::to_string(dim) + ", dataset has D=" +
                      std::to_string(data.dim()));
    }
  }

  bool operator==(const PrimitiveBank& o) const {
    return dim == o.dim && names == o.names && classifiers == o.classifiers && platt == o.platt;
  }
};

struct BankConfig {
  SvmConfig svm;
  std::size_t min_pos = 5;
  std::size_t min_neg = 5;
};

inline std::vector<double> primitive_targets(const Dataset& data, std::size_t primitive,
                                             std::span<const std::size_t> images) {
  std::vector<double> y(images.size());
  for (std::size_t k = 0; k < images.size(); ++k) {
    y[k] = data.label(images[k], primitive) ? 1.0 : -1.0;
  }
  return y;
}

/// One SVM per named primitive on `images`. Each primitive draws from its own
/// stream ("svm.<name>"), so the bank does not depend on `threads`.
inline PrimitiveBank train_primitive_bank(const Dataset& data,
                                          const std::vector<std::string>& names,
                                          std::span<const std::size_t> images,
                                          const BankConfig& cfg, std::uint64_t seed,
                                          std::size_t threads = 1) {
  std::vector<std::size_t> columns;
  for (const auto& name : names) {
    const std::size_t j = data.primitive_index(name);
    std::size_t pos = 0;
    for (std::size_t i : images) pos += data.label(i, j) ? 1 : 0;
    const std::size_t neg = images.size() - pos;
    if (pos < cfg.min_pos || neg < cfg.min_neg) {
      throw Error(ErrorCode::InsufficientExamples,
                  "primitive " + name + " has " + std::to_string(pos) + " positives and " +
                      std::to_string(neg) + " negatives");
    }
    columns.push_back(j);
  }
  std::vector<Classifier> fitted(names.size());
  parallel_for(names.size(), threads, [&](std::size_t k) {
    RngStream rng = rng_stream(seed, "svm." + names[k]);
    const auto y = primitive_targets(data, columns[k], images);
    fitted[k] = train_linear_svm(data, images, y, cfg.svm, rng);
  });
  PrimitiveBank bank;
  bank.dim = data.dim();
  for (std::size_t k = 0; k < names.size(); ++k) bank.add(names[k], std::move(fitted[k]));
  bank.dataset_digest = hex_digest(data.digest());
  return bank;
}

/// Fits Platt parameters for every primitive on held-out `images`.
inline void calibrate_bank(PrimitiveBank& bank, const Dataset& data,
                           std::span<const std::size_t> images, const PlattConfig& cfg = {}) {
  bank.check_dataset(data);
  for (std::size_t k = 0; k < bank.size(); ++k) {
    const std::size_t j = data.primitive_index(bank.names[k]);
    const auto y = primitive_targets(data, j, images);
    std::vector<double> s(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      s[i] = decision_value(bank.classifiers[k].weights, data.feature(images[i]));
    }
    try {
      bank.platt[k] = platt_fit(s, y, cfg);
    } catch (const Error& err) {
      throw Error(err.code(), "calibrating " + bank.names[k] + ": " + err.what());
    }
  }
}

}  // namespace calg
