#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <utility>

namespace mobhfl {

// Counter-based SplitMix64 stream.
//
// A stream is identified by a seed plus an optional list of stream ids
// (vehicle id, pass number, ...). Its key is derived by folding each id
// through the SplitMix64 finalizer; output k is finalize(key + k * gamma).
// Every output is a pure function of (seed, ids, k), so any language with
// 64-bit wrapping arithmetic reproduces the stream bit for bit.
//
//   finalize(z): z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//                z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//                return z ^ (z >> 31)
//   key(seed, ids...): k = finalize(seed); for id in ids: k = finalize(k ^ (id + gamma))
//   uniform():  (next() >> 11) * 2^-53            in [0, 1)
//   normal():   Box-Muller on two uniforms, cosine branch only
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  explicit Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> ids = {})
      : key_(finalize(seed)) {
    for (std::uint64_t id : ids) key_ = finalize(key_ ^ (id + kGamma));
  }

  static constexpr std::uint64_t finalize(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return finalize(key_ + counter_ * kGamma);
  }

  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // (0, 1), never hits either endpoint.
  double uniform_open() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() noexcept {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n) by rejection; n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Fisher-Yates from the back.
  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mobhfl
