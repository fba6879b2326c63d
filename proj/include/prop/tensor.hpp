#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "prop/errors.hpp"

namespace prop {

#ifdef PROP_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

#if defined(PROP_CHECK_FINITE) || !defined(NDEBUG)
inline constexpr bool kCheckFinite = true;
#else
inline constexpr bool kCheckFinite = false;
#endif

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

/// Dense row-major array with an explicit shape.
///
/// Rank 1 and rank 2 are the only ranks the algorithms use; a rank-1 tensor of
/// width n is treated as a 1 x n row wherever a matrix is expected.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, real fill = real(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor vector(std::vector<real> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<real> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<real>> rows) {
    std::vector<real> flat;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat));
  }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.size() == 1 ? 1 : shape_[0];
  }
  std::size_t cols() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.back();
  }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  const std::vector<real>& values() const noexcept { return data_; }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }
  real& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  real operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<const real> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<real> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  bool is_scalar() const noexcept { return data_.size() == 1; }
  real item() const {
    if (!is_scalar()) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](real v) { return std::isfinite(v); });
  }

  void check_finite(const char* where) const {
    if (!all_finite()) throw NonFiniteError(std::string("non-finite value in ") + where);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<real> data_;
};

// ---------------------------------------------------------------------------
// Plain (untaped) kernels. Reductions always run left to right.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const real av = a(i, p);
      const real* brow = b.data().data() + p * n;
      real* orow = out.data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor softmax_rows(const Tensor& a) {
  if constexpr (kCheckFinite) a.check_finite("softmax_rows");
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    real mx = in[0];
    for (auto v : in) mx = std::max(mx, v);
    real sum = 0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (auto& v : o) v /= sum;
  }
  return out;
}

inline real dot(std::span<const real> a, std::span<const real> b) {
  if (a.size() != b.size()) throw DimensionError("dot: width mismatch");
  real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline real l2_norm(std::span<const real> a) { return std::sqrt(dot(a, a)); }

/// Cosine of the angle between two equal-width vectors. Throws ZeroNormError
/// when either side cannot be normalized.
inline real cosine(std::span<const real> a, std::span<const real> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: width mismatch");
  const real na = l2_norm(a), nb = l2_norm(b);
  if (na == 0 || nb == 0) throw ZeroNormError("cosine similarity of a zero-norm vector");
  return std::clamp(dot(a, b) / (na * nb), real(-1), real(1));
}

inline Tensor scaled(const Tensor& a, real c) {
  Tensor out = a;
  for (auto& v : out.data()) v *= c;
  return out;
}

/// FNV-1a over shape and raw bytes. Used to prove parameters stay frozen.
inline std::uint64_t content_hash(const Tensor& t, std::uint64_t h = 1469598103934665603ull) {
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (auto d : t.shape()) {
    const std::uint64_t d64 = d;
    mix(&d64, sizeof d64);
  }
  mix(t.data().data(), t.size() * sizeof(real));
  return h;
}

}  // namespace prop
