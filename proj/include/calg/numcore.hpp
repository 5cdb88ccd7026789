#pragma once

// Dense numeric kernel: vectors, matrices, LeakyReLU, optimizers, seeded
// random streams and central finite differences. 64-bit floats throughout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calg/errors.hpp"

namespace calg {

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double value = 0.0) : data_(n, value) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}
  explicit Vector(std::span<const double> values)
      : data_(values.begin(), values.end()) {}

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  operator std::span<const double>() const noexcept { return data_; }
  operator std::span<double>() noexcept { return data_; }

  const std::vector<double>& values() const noexcept { return data_; }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double value = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, value) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void require_shape(bool ok, const char* what, std::size_t a, std::size_t b) {
  if (!ok) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(what) + " (" + std::to_string(a) + " vs " +
                    std::to_string(b) + ")");
  }
}

}  // namespace detail

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require_shape(a.size() == b.size(), "dot", a.size(), b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double squared_norm(std::span<const double> a) {
  double acc = 0.0;
  for (double v : a) acc += v * v;
  return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

/// M·v
inline Vector gemv(const Matrix& m, std::span<const double> v) {
  detail::require_shape(m.cols() == v.size(), "gemv", m.cols(), v.size());
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * v[c];
    out[r] = acc;
  }
  return out;
}

/// Mᵀ·v
inline Vector gemv_transposed(const Matrix& m, std::span<const double> v) {
  detail::require_shape(m.rows() == v.size(), "gemv_transposed", m.rows(), v.size());
  Vector out(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double vr = v[r];
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c] * vr;
  }
  return out;
}

/// M += alpha · u vᵀ
inline void add_outer(Matrix& m, double alpha, std::span<const double> u,
                      std::span<const double> v) {
  detail::require_shape(m.rows() == u.size(), "add_outer rows", m.rows(), u.size());
  detail::require_shape(m.cols() == v.size(), "add_outer cols", m.cols(), v.size());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double s = alpha * u[r];
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += s * v[c];
  }
}

/// Returns alpha·x + y.
inline Vector axpy(double alpha, std::span<const double> x, std::span<const double> y) {
  detail::require_shape(x.size() == y.size(), "axpy", x.size(), y.size());
  Vector out(y);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += alpha * x[i];
  return out;
}

/// y += alpha·x in place.
inline void axpy_inplace(double alpha, std::span<const double> x, std::span<double> y) {
  detail::require_shape(x.size() == y.size(), "axpy_inplace", x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector scaled(std::span<const double> x, double alpha) {
  Vector out(x);
  for (double& v : out) v *= alpha;
  return out;
}

inline Vector concat(std::span<const double> a, std::span<const double> b) {
  Vector out(a.size() + b.size());
  std::copy(a.begin(), a.end(), out.begin());
  std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

inline bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

// LeakyReLU. The subgradient at exactly 0 takes the slope branch.
inline Vector leaky_relu(std::span<const double> x, double slope) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  return out;
}

inline Vector leaky_relu_grad(std::span<const double> x, double slope) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? 1.0 : slope;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimKind { Sgd, Adam };

struct OptimState {
  OptimKind kind = OptimKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  Vector m;  // first moment (Adam only)
  Vector v;  // second moment (Adam only)

  static OptimState sgd(double lr) {
    OptimState s;
    s.kind = OptimKind::Sgd;
    s.lr = lr;
    return s;
  }

  static OptimState adam(std::size_t n, double lr = 1e-3, double beta1 = 0.9,
                         double beta2 = 0.999, double eps = 1e-8) {
    OptimState s;
    s.kind = OptimKind::Adam;
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    s.m = Vector(n);
    s.v = Vector(n);
    return s;
  }
};

/// One in-place update of `params`. Adam uses bias-corrected moments.
inline void opt_step(OptimState& state, std::span<double> params,
                     std::span<const double> grads) {
  detail::require_shape(params.size() == grads.size(), "opt_step", params.size(),
                        grads.size());
  if (!all_finite(grads)) throw Error(ErrorCode::NonFiniteGradient, "opt_step");
  ++state.step;
  if (state.kind == OptimKind::Sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= state.lr * grads[i];
    return;
  }
  detail::require_shape(state.m.size() == params.size(), "opt_step moments",
                        state.m.size(), params.size());
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// ---------------------------------------------------------------------------
// Randomness. All draws in the library go through RngStream. The engine is
// mt19937_64 (fully specified by the standard); the distributions are
// implemented here because the std:: ones are not portable bit-for-bit.

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t fnv1a64(std::string_view text,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  return fnv1a64(std::span<const unsigned char>(
                     reinterpret_cast<const unsigned char*>(text.data()), text.size()),
                 hash);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view label)
      : engine_(splitmix64(seed ^ splitmix64(fnv1a64(label)))) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased.
  std::size_t uniform_int(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  /// Standard normal via Box-Muller (one value per call; the pair is cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_int(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  /// `k` distinct indices from [0, n), in draw order.
  std::vector<std::size_t> choice(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + uniform_int(n - i);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline RngStream rng_stream(std::uint64_t seed, std::string_view label) {
  return RngStream(seed, label);
}

/// Central differences of a scalar function, one coordinate at a time.
inline Vector finite_diff(const std::function<double(std::span<const double>)>& f,
                          std::span<const double> p, double h) {
  if (!(h > 0.0)) throw Error(ErrorCode::Usage, "finite_diff step must be positive");
  Vector work(p);
  Vector grad(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = work[i];
    work[i] = orig + h;
    const double fp = f(work);
    work[i] = orig - h;
    const double fm = f(work);
    work[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor). Used by gradient checks.
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-12) {
  detail::require_shape(a.size() == b.size(), "relative_error", a.size(), b.size());
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(diff) / std::max({norm(a), norm(b), floor});
}

}  // namespace calg
