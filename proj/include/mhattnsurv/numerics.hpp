#pragma once

// Dense kernels, seeded random streams, k-means and a finite-difference
// gradient oracle. Everything here is single-threaded and bit-deterministic
// for fixed inputs.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mhattnsurv/errors.hpp"

namespace mhattnsurv {

template <std::floating_point T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: " + std::to_string(values_.size()) +
                           " values for a " + std::to_string(rows_) + "x" +
                           std::to_string(cols_) + " matrix");
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      values_.insert(values_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return values_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {values_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {values_.data() + r * cols_, cols_};
  }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  template <std::floating_point U>
  Matrix<U> cast() const {
    return Matrix<U>(rows_, cols_, std::vector<U>(values_.begin(), values_.end()));
  }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> values_;
};

using DenseMatrix = Matrix<double>;

// ---------------------------------------------------------------------------
// Kernels

template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " times " + std::to_string(b.rows()) +
                         "x" + std::to_string(b.cols()));
  }
  Matrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T{0}) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

template <std::floating_point T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <std::floating_point T>
Matrix<T> relu(Matrix<T> a) {
  for (auto& v : a.values()) v = std::max(v, T{0});
  return a;
}

/// Column-wise mean over rows: an n x d matrix becomes a length-d vector.
template <std::floating_point T>
std::vector<T> row_mean(const Matrix<T>& a) {
  if (a.rows() == 0) throw DomainError("row_mean: matrix has no rows");
  std::vector<T> out(a.cols(), T{0});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += r[j];
  }
  const T inv = T{1} / static_cast<T>(a.rows());
  for (auto& v : out) v *= inv;
  return out;
}

template <std::floating_point T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Max-shifted softmax. Sums to one; invariant to adding a constant.
template <std::floating_point T>
std::vector<T> softmax_stable(std::span<const T> logits) {
  if (logits.empty()) throw DomainError("softmax_stable: empty input");
  const T shift = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(shift)) throw NumericError("softmax_stable: non-finite logit");
  std::vector<T> out(logits.size());
  T total{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - shift);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

template <std::floating_point T>
std::vector<T> softmax_stable(const std::vector<T>& logits) {
  return softmax_stable(std::span<const T>(logits));
}

/// Solves A x = b for a small symmetric positive semi-definite A using an
/// LDL^T factorisation. Pivots below `tol` are treated as zero, which makes
/// this a generalised inverse on the range of A.
inline std::vector<double> solve_psd(DenseMatrix a, std::vector<double> b,
                                     double tol = 1e-12) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw DimensionError("solve_psd: shape mismatch");
  std::vector<double> diag(n, 0.0);
  DenseMatrix lower = DenseMatrix::identity(n);
  for (std::size_t j = 0; j < n; ++j) {
    double dj = a(j, j);
    for (std::size_t k = 0; k < j; ++k) dj -= lower(j, k) * lower(j, k) * diag[k];
    diag[j] = dj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = a(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= lower(i, k) * lower(j, k) * diag[k];
      lower(i, j) = std::abs(dj) > tol ? v / dj : 0.0;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k) b[i] -= lower(i, k) * b[k];
  for (std::size_t i = 0; i < n; ++i) b[i] = std::abs(diag[i]) > tol ? b[i] / diag[i] : 0.0;
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t k = i + 1; k < n; ++k) b[i] -= lower(k, i) * b[k];
  return b;
}

// ---------------------------------------------------------------------------
// Random streams

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based generator: draw i of stream (seed, label, index) is
/// splitmix64(key + i * golden), so output depends only on those values and
/// the draw count. Identical on every platform.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view label, std::uint64_t index = 0)
      : seed_(seed), label_(label) {
    key_ = detail::splitmix64(seed ^ detail::splitmix64(detail::fnv1a(label)) ^
                              detail::splitmix64(index + 0x632BE59BD9B4E019ULL));
  }

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& label() const noexcept { return label_; }
  std::uint64_t draws() const noexcept { return counter_; }

  /// Independent child stream; does not advance this one.
  RngStream child(std::string_view label, std::uint64_t index = 0) const {
    return RngStream(key_, label, index);
  }

  std::uint64_t next_u64() noexcept {
    return detail::splitmix64(key_ + 0x9E3779B97F4A7C15ULL * ++counter_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in the open interval (0, 1).
  double uniform_open() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, bound) by rejection.
  std::uint64_t uniform_index(std::uint64_t bound) {
    if (bound == 0) throw DomainError("uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % bound;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Box-Muller; each call consumes two draws.
  double normal(double mean = 0.0, double sd = 1.0) noexcept {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double exponential(double rate) noexcept { return -std::log(uniform_open()) / rate; }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(std::distance(first, last));
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = uniform_index(i);
      std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1),
                     first + static_cast<std::ptrdiff_t>(j));
    }
  }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  std::vector<std::size_t> assignments;
  DenseMatrix centroids;
  /// Sum of squared distances after each assignment step.
  std::vector<double> objective_trace;
};

namespace detail {

template <std::floating_point T>
double squared_distance(std::span<const T> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double diff = static_cast<double>(a[j]) - b[j];
    acc += diff * diff;
  }
  return acc;
}

}  // namespace detail

/// Index of the nearest centroid (first on ties).
template <std::floating_point T>
std::size_t nearest_centroid(std::span<const T> point, const DenseMatrix& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double dist = detail::squared_distance(point, centroids.row(c));
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  return best;
}

/// Lloyd's algorithm with k-means++ seeding drawn from `rng`. Empty clusters
/// keep their previous centroid.
template <std::floating_point T>
KMeansResult kmeans(const Matrix<T>& points, std::size_t k, RngStream rng,
                    std::size_t max_iters = 100) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (k == 0) throw DomainError("kmeans: k must be >= 1");
  if (k > n) {
    throw DomainError("kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(n) +
                      " points");
  }
  if (max_iters == 0) throw DomainError("kmeans: max_iters must be >= 1");

  DenseMatrix centroids(k, d);
  auto set_centroid = [&](std::size_t c, std::size_t p) {
    for (std::size_t j = 0; j < d; ++j) centroids(c, j) = static_cast<double>(points(p, j));
  };
  set_centroid(0, rng.uniform_index(n));
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      nearest[p] = std::min(nearest[p],
                            detail::squared_distance(points.row(p), centroids.row(c - 1)));
      total += nearest[p];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t p = 0; p < n; ++p) {
        target -= nearest[p];
        if (target < 0.0) {
          pick = p;
          break;
        }
      }
    } else {
      pick = rng.uniform_index(n);
    }
    set_centroid(c, pick);
  }

  KMeansResult result;
  result.assignments.assign(n, 0);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = iter == 0;
    double objective = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t c = nearest_centroid(points.row(p), centroids);
      if (c != result.assignments[p]) changed = true;
      result.assignments[p] = c;
      objective += detail::squared_distance(points.row(p), centroids.row(c));
    }
    result.objective_trace.push_back(objective);
    if (!changed) break;

    DenseMatrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t c = result.assignments[p];
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) sums(c, j) += static_cast<double>(points(p, j));
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j)
        centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
  }
  result.centroids = std::move(centroids);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient oracle

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
inline std::vector<double> central_difference_grad(
    const std::function<double(std::span<const double>)>& f, std::vector<double> x,
    double step) {
  if (!(step > 0.0)) throw DomainError("central_difference_grad: step must be > 0");
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("central_difference_grad: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace mhattnsurv
