#pragma once

// Data-parallel inner loops. Each kernel exists twice: a plain serial
// reference (kernels/serial.cpp) and an OpenMP version (kernels/parallel.cpp).
// Both produce bit-identical output: per-element arithmetic is shared and
// every reduction runs in a fixed order inside one work item.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

#include "hbias/util.hpp"

namespace hbias::kernels {

inline constexpr std::size_t kLanes = 8;

// Dot product accumulated in double with per-lane Kahan compensation; lanes
// and the tail are merged in a fixed order, so the value depends only on the
// inputs. Products of two floats are exact in double.
template <typename T>
inline double dot_compensated(const T* a, const T* b, std::size_t d) noexcept {
  double s[kLanes] = {};
  double c[kLanes] = {};
  std::size_t k = 0;
  for (; k + kLanes <= d; k += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) {
      const double y = static_cast<double>(a[k + l]) * static_cast<double>(b[k + l]) - c[l];
      const double t = s[l] + y;
      c[l] = (t - s[l]) - y;
      s[l] = t;
    }
  }
  KahanSum total;
  for (std::size_t l = 0; l < kLanes; ++l) {
    total.add(s[l]);
    total.add(-c[l]);
  }
  for (; k < d; ++k) total.add(static_cast<double>(a[k]) * static_cast<double>(b[k]));
  return total.value();
}

template <typename T>
inline double norm(const T* a, std::size_t d) noexcept {
  return std::sqrt(dot_compensated(a, a, d));
}

inline double cosine_from_parts(double dot, double norm_a, double norm_b) noexcept {
  const double c = dot / (norm_a * norm_b);
  return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

// Number of pairs (r, j), r < i, j > r: the output offset of row i.
inline std::size_t pair_offset(std::size_t i, std::size_t n) noexcept {
  return i * (n - 1) - i * (i - 1) / 2;
}

inline std::size_t pair_count(std::size_t n) noexcept { return n < 2 ? 0 : n * (n - 1) / 2; }

struct Moments {
  std::uint64_t n = 0;
  double sum = 0.0;
  double sum_sq = 0.0;
};

namespace serial {
void row_norms(const float* data, std::size_t n, std::size_t dim, double* norms);
// out must hold pair_count(n) values in (i, j) lexicographic order.
void pairwise_cosine(const float* data, std::size_t n, std::size_t dim, double* out);
void block_moments(std::span<const std::span<const double>> blocks, Moments* out);
}  // namespace serial

namespace parallel {
void row_norms(const float* data, std::size_t n, std::size_t dim, double* norms);
void pairwise_cosine(const float* data, std::size_t n, std::size_t dim, double* out);
void block_moments(std::span<const std::span<const double>> blocks, Moments* out);
int max_threads();
}  // namespace parallel

}  // namespace hbias::kernels
