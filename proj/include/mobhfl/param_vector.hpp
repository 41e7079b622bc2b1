#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "mobhfl/errors.hpp"

namespace mobhfl {

// Flat model parameter vector (w, w_m, w_{e,n}, u, v, ...).
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : values_(n, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](double x) { return std::isfinite(x); });
  }

  void fill(double x) noexcept { std::fill(values_.begin(), values_.end(), x); }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

inline void require_same_size(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) {
    throw DimensionMismatch("parameter length " + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()));
  }
}

inline double dot(const ParamVector& a, const ParamVector& b) {
  require_same_size(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const ParamVector& a) noexcept {
  double s = 0.0;
  for (double x : a.values()) s += x * x;
  return std::sqrt(s);
}

inline double distance(const ParamVector& a, const ParamVector& b) {
  require_same_size(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// y += alpha * x
inline void axpy(double alpha, const ParamVector& x, ParamVector& y) {
  require_same_size(x, y);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline ParamVector operator-(const ParamVector& a, const ParamVector& b) {
  require_same_size(a, b);
  ParamVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline ParamVector operator+(const ParamVector& a, const ParamVector& b) {
  require_same_size(a, b);
  ParamVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline ParamVector operator*(double s, const ParamVector& a) {
  ParamVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a[i];
  return out;
}

// Sum of weights[k] * items[k], accumulated in index order.
inline ParamVector weighted_sum(std::span<const ParamVector* const> items,
                                std::span<const double> weights) {
  if (items.empty() || items.size() != weights.size()) {
    throw DimensionMismatch("weighted_sum: " + std::to_string(items.size()) +
                            " items vs " + std::to_string(weights.size()) +
                            " weights");
  }
  ParamVector out(items.front()->size());
  for (std::size_t k = 0; k < items.size(); ++k) axpy(weights[k], *items[k], out);
  return out;
}

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t x) noexcept {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((x >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

inline void write_u64(std::ostream& os, std::uint64_t x) {
  const std::uint64_t le = to_little_endian(x);
  os.write(reinterpret_cast<const char*>(&le), sizeof le);
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t le = 0;
  if (!is.read(reinterpret_cast<char*>(&le), sizeof le)) {
    throw IoError("unexpected end of stream");
  }
  return to_little_endian(le);
}

}  // namespace detail

// Wire format: u64 length, then length IEEE-754 binary64 values, all
// little-endian.
inline void write_param_vector(std::ostream& os, const ParamVector& w) {
  detail::write_u64(os, w.size());
  for (double x : w.values()) detail::write_u64(os, std::bit_cast<std::uint64_t>(x));
}

inline ParamVector read_param_vector(std::istream& is) {
  const std::uint64_t n = detail::read_u64(is);
  if (n > (std::uint64_t{1} << 32)) throw IoError("implausible parameter length");
  ParamVector w(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::bit_cast<double>(detail::read_u64(is));
  }
  return w;
}

}  // namespace mobhfl
