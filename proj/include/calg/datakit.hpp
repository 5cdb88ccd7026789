#pragma once

// Datasets of precomputed image features with per-primitive ground truth,
// the synthetic correlated-attribute generator, expression labeling,
// candidate enumeration/filtering and image/expression splits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calg/errors.hpp"
#include "calg/exprlang.hpp"
#include "calg/numcore.hpp"

namespace calg {

using IndexList = std::vector<std::size_t>;

struct Dataset {
  Matrix features;                   // N×D, bias feature not stored
  std::vector<std::uint8_t> labels;  // N×M row-major, 0/1
  std::vector<std::string> primitive_names;
  std::string provenance;  // JSON text describing where the data came from

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
  std::size_t primitive_count() const { return primitive_names.size(); }

  bool label(std::size_t image, std::size_t primitive) const {
    return labels[image * primitive_count() + primitive] != 0;
  }

  std::span<const double> feature(std::size_t image) const { return features.row(image); }

  std::size_t primitive_index(std::string_view name) const {
    auto it = std::find(primitive_names.begin(), primitive_names.end(), name);
    if (it == primitive_names.end()) {
      throw Error(ErrorCode::UnknownPrimitive, "'" + std::string(name) + "' not in dataset");
    }
    return static_cast<std::size_t>(it - primitive_names.begin());
  }

  bool has_primitive(std::string_view name) const {
    return std::find(primitive_names.begin(), primitive_names.end(), name) !=
           primitive_names.end();
  }

  /// FNV-1a over shape, names, features and labels.
  std::uint64_t digest() const {
    std::uint64_t h = fnv1a64("calg.dataset");
    auto mix_u64 = [&h](std::uint64_t v) {
      unsigned char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
      h = fnv1a64(std::span<const unsigned char>(bytes, 8), h);
    };
    mix_u64(size());
    mix_u64(dim());
    mix_u64(primitive_count());
    for (const auto& n : primitive_names) {
      h = fnv1a64(n, h);
      mix_u64(0);
    }
    for (double v : features.span()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      mix_u64(bits);
    }
    h = fnv1a64(std::span<const unsigned char>(labels.data(), labels.size()), h);
    return h;
  }

  void validate() const {
    if (labels.size() != size() * primitive_count()) {
      throw Error(ErrorCode::Format, "label matrix does not match N×M");
    }
    std::vector<std::string> sorted = primitive_names;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw Error(ErrorCode::Format, "duplicate primitive names");
    }
    for (const auto& n : primitive_names) {
      if (!Expression::is_identifier(n)) throw Error(ErrorCode::Format, "bad primitive name " + n);
    }
  }
};

inline std::string hex_digest(std::uint64_t d) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, d >>= 4) out[static_cast<std::size_t>(i)] = digits[d & 0xf];
  return out;
}

// ---------------------------------------------------------------------------
// Expression labeling. Expressions are compiled to a postfix program over
// primitive column indices so labeling N images is a tight loop.

class CompiledExpr {
 public:
  CompiledExpr(const Expression& e, const Dataset& data) : m_(data.primitive_count()) {
    for (const auto& node : post_order(e)) {
      Instr in{node.op(), 0};
      if (node.is_primitive()) in.index = data.primitive_index(node.name());
      program_.push_back(in);
    }
    stack_.reserve(program_.size());
  }

  bool operator()(std::span<const std::uint8_t> row) {
    stack_.clear();
    for (const auto& in : program_) {
      switch (in.op) {
        case Op::Primitive: stack_.push_back(row[in.index] != 0); break;
        case Op::Not: stack_.back() = !stack_.back(); break;
        case Op::And: {
          const bool r = stack_.back();
          stack_.pop_back();
          stack_.back() = stack_.back() && r;
          break;
        }
        case Op::Or: {
          const bool r = stack_.back();
          stack_.pop_back();
          stack_.back() = stack_.back() || r;
          break;
        }
      }
    }
    return stack_.back();
  }

  bool on_image(const Dataset& data, std::size_t image) {
    return (*this)(std::span<const std::uint8_t>(data.labels.data() + image * m_, m_));
  }

 private:
  struct Instr {
    Op op;
    std::size_t index;
  };
  std::size_t m_;
  std::vector<Instr> program_;
  std::vector<bool> stack_;
};

/// Ground truth of `expr` for every image.
inline std::vector<std::uint8_t> expr_label(const Dataset& data, const Expression& expr) {
  CompiledExpr prog(expr, data);
  std::vector<std::uint8_t> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = prog.on_image(data, i) ? 1 : 0;
  return out;
}

/// Ground truth of `expr` restricted to `images`.
inline std::vector<std::uint8_t> expr_label(const Dataset& data, const Expression& expr,
                                            std::span<const std::size_t> images) {
  CompiledExpr prog(expr, data);
  std::vector<std::uint8_t> out(images.size());
  for (std::size_t k = 0; k < images.size(); ++k) out[k] = prog.on_image(data, images[k]) ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data: latent z ~ N(0, Σ), attribute bits a_j = [z_j > τ_j],
// features x = P·a + σ·ε with a fixed random projection P.

struct SyntheticConfig {
  std::size_t primitives = 16;  // M
  std::size_t dim = 64;         // D
  std::size_t images = 6000;    // N
  std::size_t blocks = 3;       // correlated blocks of `block_size` primitives
  std::size_t block_size = 4;
  double block_rho = 0.6;
  double tau_min = 0.0;  // thresholds τ_j ~ U[tau_min, tau_max]
  double tau_max = 1.0;
  double noise = 3.0;  // σ
  bool identity_projection = false;  // requires dim == primitives
  std::vector<double> correlation;   // optional explicit M×M Σ (row-major)
  std::vector<std::string> names;    // optional primitive names
  std::uint64_t seed = 7;
};

/// Lower-triangular L with L·Lᵀ = Σ, tolerating positive semidefinite Σ.
inline Matrix psd_cholesky(const Matrix& sigma, double tol = 1e-10) {
  const std::size_t n = sigma.rows();
  if (sigma.cols() != n) throw Error(ErrorCode::InvalidCorrelation, "correlation not square");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(sigma(i, j) - sigma(j, i)) > tol) {
        throw Error(ErrorCode::InvalidCorrelation, "correlation not symmetric");
      }
    }
  }
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = sigma(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (d < -tol) {
      throw Error(ErrorCode::InvalidCorrelation,
                  "correlation not positive semidefinite (pivot " + std::to_string(j) + ")");
    }
    const bool zero_pivot = d <= tol;
    l(j, j) = zero_pivot ? 0.0 : std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = sigma(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (zero_pivot) {
        if (std::abs(s) > 1e-8) {
          throw Error(ErrorCode::InvalidCorrelation, "correlation not positive semidefinite");
        }
        l(i, j) = 0.0;
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

inline Matrix synthetic_correlation(const SyntheticConfig& cfg) {
  const std::size_t m = cfg.primitives;
  Matrix sigma(m, m);
  if (!cfg.correlation.empty()) {
    if (cfg.correlation.size() != m * m) {
      throw Error(ErrorCode::InvalidCorrelation, "explicit correlation must be M×M");
    }
    std::copy(cfg.correlation.begin(), cfg.correlation.end(), sigma.data());
    return sigma;
  }
  if (cfg.blocks * cfg.block_size > m) {
    throw Error(ErrorCode::InvalidCorrelation, "blocks exceed primitive count");
  }
  for (std::size_t i = 0; i < m; ++i) sigma(i, i) = 1.0;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::size_t lo = b * cfg.block_size;
    for (std::size_t i = lo; i < lo + cfg.block_size; ++i) {
      for (std::size_t j = lo; j < lo + cfg.block_size; ++j) {
        if (i != j) sigma(i, j) = cfg.block_rho;
      }
    }
  }
  return sigma;
}

inline std::vector<std::string> default_primitive_names(std::size_t m) {
  std::vector<std::string> out;
  for (std::size_t j = 0; j < m; ++j) {
    std::string n = std::to_string(j);
    out.push_back("p" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n);
  }
  return out;
}

inline Dataset synth_generate(const SyntheticConfig& cfg) {
  const std::size_t m = cfg.primitives;
  const std::size_t d = cfg.dim;
  if (m == 0 || d == 0 || cfg.images == 0) throw Error(ErrorCode::Usage, "empty synthetic shape");
  if (!(cfg.noise >= 0.0)) throw Error(ErrorCode::Usage, "noise must be >= 0");
  if (cfg.identity_projection && d != m) {
    throw Error(ErrorCode::Usage, "identity projection needs dim == primitives");
  }
  const Matrix chol = psd_cholesky(synthetic_correlation(cfg));

  RngStream structure = rng_stream(cfg.seed, "synth.structure");
  std::vector<double> tau(m);
  for (auto& t : tau) t = structure.uniform(cfg.tau_min, cfg.tau_max);
  Matrix proj(d, m);
  if (cfg.identity_projection) {
    proj = Matrix::identity(m);
  } else {
    for (double& v : proj.span()) v = structure.normal();
  }

  Dataset out;
  out.primitive_names = cfg.names.empty() ? default_primitive_names(m) : cfg.names;
  if (out.primitive_names.size() != m) {
    throw Error(ErrorCode::Usage, "names list must have one entry per primitive");
  }
  out.features = Matrix(cfg.images, d);
  out.labels.assign(cfg.images * m, 0);

  RngStream draws = rng_stream(cfg.seed, "synth.images");
  Vector z(m), latent(m), bits(m);
  for (std::size_t i = 0; i < cfg.images; ++i) {
    for (auto& v : z) v = draws.normal();
    for (std::size_t r = 0; r < m; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c <= r; ++c) acc += chol(r, c) * z[c];
      latent[r] = acc;
    }
    for (std::size_t j = 0; j < m; ++j) {
      const bool on = latent[j] > tau[j];
      bits[j] = on ? 1.0 : 0.0;
      out.labels[i * m + j] = on ? 1 : 0;
    }
    auto row = out.features.row(i);
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += proj(r, j) * bits[j];
      row[r] = acc + cfg.noise * draws.normal();
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < cfg.images; ++i) pos += out.labels[i * m + j];
    if (pos == 0 || pos == cfg.images) {
      throw Error(ErrorCode::InsufficientExamples,
                  "primitive " + out.primitive_names[j] + " is constant in synthetic data");
    }
  }
  out.provenance = "synthetic";
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Candidate enumeration and splits

struct SplitConfig {
  double train_frac = 0.6;
  double val_frac = 0.2;  // test gets the remainder
  double min_pos_frac = 0.02;
  std::size_t min_count = 20;
  double expr_train_ratio = 0.75;
  double calib_frac = 0.1;  // tail of the shuffled training images, for Platt
  double prefilter_margin = 2.0;
  std::size_t max_attempts = 50;
  bool use_and = true;
  bool use_or = true;
};

/// Positives and negatives an expression or primitive needs within a split.
inline std::size_t required_count(std::size_t split_size, double min_pos_frac,
                                  std::size_t min_count) {
  const auto frac = static_cast<std::size_t>(
      std::ceil(min_pos_frac * static_cast<double>(split_size) - 1e-9));
  return std::max(min_count, frac);
}

inline bool has_coverage(const std::vector<std::uint8_t>& labels,
                         std::span<const std::size_t> images, double min_pos_frac,
                         std::size_t min_count) {
  std::size_t pos = 0;
  for (std::size_t i : images) pos += labels[i];
  const std::size_t neg = images.size() - pos;
  const std::size_t need = required_count(images.size(), min_pos_frac, min_count);
  return pos >= need && neg >= need;
}

inline IndexList all_images(const Dataset& data) {
  IndexList out(data.size());
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

/// Every unordered binary expression per requested operator that has enough
/// positives and negatives in each of `splits`. Order: And pairs then Or
/// pairs, each in (i, j) lexicographic order of primitive indices.
inline std::vector<Expression> enumerate_and_filter(const Dataset& data,
                                                    const std::vector<Op>& ops,
                                                    double min_pos_frac, std::size_t min_count,
                                                    const std::vector<IndexList>& splits) {
  std::vector<Expression> out;
  const auto& names = data.primitive_names;
  for (Op op : ops) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      for (std::size_t j = i + 1; j < names.size(); ++j) {
        auto e = Expression::binary(op, Expression::primitive(names[i]),
                                    Expression::primitive(names[j]));
        const auto lab = expr_label(data, e);
        const bool ok = std::all_of(splits.begin(), splits.end(), [&](const IndexList& s) {
          return has_coverage(lab, s, min_pos_frac, min_count);
        });
        if (ok) out.push_back(e);
      }
    }
  }
  return out;
}

inline std::vector<Op> split_ops(const SplitConfig& cfg) {
  std::vector<Op> ops;
  if (cfg.use_and) ops.push_back(Op::And);
  if (cfg.use_or) ops.push_back(Op::Or);
  return ops;
}

/// Candidates pre-filtered over the whole image set with thresholds inflated
/// by `prefilter_margin` and scaled to the smallest split, so that a random
/// split keeps all of them with high probability.
inline std::vector<Expression> prefilter_candidates(const Dataset& data, const SplitConfig& cfg) {
  const double test_frac = 1.0 - cfg.train_frac - cfg.val_frac;
  const double smallest = std::min({cfg.train_frac, cfg.val_frac, test_frac});
  const auto min_count = static_cast<std::size_t>(
      std::ceil(cfg.prefilter_margin * static_cast<double>(cfg.min_count) / smallest));
  return enumerate_and_filter(data, split_ops(cfg), cfg.min_pos_frac * cfg.prefilter_margin,
                              min_count, {all_images(data)});
}

struct SplitSpec {
  IndexList train_images;  // shuffled order; the calibration tail is at the end
  IndexList val_images;
  IndexList test_images;
  std::vector<Expression> train_exprs;
  std::vector<Expression> test_exprs;
  SplitConfig config;
  std::uint64_t seed = 0;
  std::size_t attempts = 0;

  std::size_t calibration_count() const {
    return static_cast<std::size_t>(
        std::ceil(config.calib_frac * static_cast<double>(train_images.size()) - 1e-9));
  }
  /// Training images used to fit the primitive SVMs.
  IndexList svm_images() const {
    return {train_images.begin(),
            train_images.end() - static_cast<std::ptrdiff_t>(calibration_count())};
  }
  /// Held-out tail of the training images used for Platt calibration.
  IndexList calibration_images() const {
    return {train_images.end() - static_cast<std::ptrdiff_t>(calibration_count()),
            train_images.end()};
  }

  std::vector<Expression> exprs_with_root(const std::vector<Expression>& from, Op op) const {
    std::vector<Expression> out;
    for (const auto& e : from) {
      if (e.op() == op) out.push_back(e);
    }
    return out;
  }
};

/// Checks the coverage invariants of a split; returns a description of the
/// first violation or nullopt.
inline std::optional<std::string> split_violation(const Dataset& data,
                                                  const std::vector<Expression>& exprs,
                                                  const IndexList& train, const IndexList& val,
                                                  const IndexList& test,
                                                  const SplitConfig& cfg) {
  const std::vector<const IndexList*> splits{&train, &val, &test};
  const char* split_names[] = {"train", "validation", "test"};
  for (std::size_t j = 0; j < data.primitive_count(); ++j) {
    std::vector<std::uint8_t> col(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) col[i] = data.label(i, j) ? 1 : 0;
    for (std::size_t s = 0; s < splits.size(); ++s) {
      if (!has_coverage(col, *splits[s], cfg.min_pos_frac, cfg.min_count)) {
        return "primitive " + data.primitive_names[j] + " in " + split_names[s] + " split";
      }
    }
  }
  for (const auto& e : exprs) {
    const auto lab = expr_label(data, e);
    for (std::size_t s = 0; s < splits.size(); ++s) {
      if (!has_coverage(lab, *splits[s], cfg.min_pos_frac, cfg.min_count)) {
        return "expression " + print(e) + " in " + split_names[s] + " split";
      }
    }
  }
  return std::nullopt;
}

/// Random disjoint image splits, resampled until every primitive and
/// candidate has enough positives and negatives in each split, followed by a
/// per-operator random split of the candidates into train/test expressions.
inline SplitSpec make_splits(const Dataset& data, const std::vector<Expression>& candidates,
                             const SplitConfig& cfg, std::uint64_t seed) {
  if (cfg.train_frac <= 0.0 || cfg.val_frac <= 0.0 || cfg.train_frac + cfg.val_frac >= 1.0) {
    throw Error(ErrorCode::Usage, "split fractions must be positive and sum below 1");
  }
  const std::size_t n = data.size();
  const auto n_train = static_cast<std::size_t>(std::round(cfg.train_frac * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::round(cfg.val_frac * static_cast<double>(n)));
  if (n_train + n_val >= n) throw Error(ErrorCode::InfeasibleSplit, "dataset too small to split");

  RngStream rng = rng_stream(seed, "splits.images");
  SplitSpec spec;
  spec.config = cfg;
  spec.seed = seed;
  std::string last_violation = "no attempts made";
  for (std::size_t attempt = 1; attempt <= cfg.max_attempts; ++attempt) {
    IndexList order = all_images(data);
    rng.shuffle(order);
    IndexList train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    IndexList val(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                  order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    IndexList test(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    auto violation = split_violation(data, candidates, train, val, test, cfg);
    if (!violation) {
      spec.train_images = std::move(train);
      spec.val_images = std::move(val);
      spec.test_images = std::move(test);
      spec.attempts = attempt;
      break;
    }
    last_violation = *violation;
  }
  if (spec.attempts == 0) {
    throw Error(ErrorCode::InfeasibleSplit, "after " + std::to_string(cfg.max_attempts) +
                                                " attempts, still violated by " + last_violation);
  }

  RngStream erng = rng_stream(seed, "splits.exprs");
  for (Op op : {Op::And, Op::Or}) {
    std::vector<Expression> group;
    for (const auto& e : candidates) {
      if (e.op() == op) group.push_back(e);
    }
    erng.shuffle(group);
    const auto n_tr = static_cast<std::size_t>(
        std::round(cfg.expr_train_ratio * static_cast<double>(group.size())));
    spec.train_exprs.insert(spec.train_exprs.end(), group.begin(),
                            group.begin() + static_cast<std::ptrdiff_t>(n_tr));
    spec.test_exprs.insert(spec.test_exprs.end(),
                           group.begin() + static_cast<std::ptrdiff_t>(n_tr), group.end());
  }
  return spec;
}

}  // namespace calg
