#include <omp.h>

#include <vector>

#include "hbias/kernels.hpp"

namespace hbias::kernels::parallel {

int max_threads() { return omp_get_max_threads(); }

void row_norms(const float* data, std::size_t n, std::size_t dim, double* norms) {
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) norms[i] = norm(data + i * dim, dim);
}

void pairwise_cosine(const float* data, std::size_t n, std::size_t dim, double* out) {
  std::vector<double> norms(n);
  row_norms(data, n, dim, norms.data());
  const auto rows = static_cast<std::ptrdiff_t>(n);
  // Row i owns pairs [pair_offset(i), pair_offset(i+1)); rows shrink with i.
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    double* dst = out + pair_offset(static_cast<std::size_t>(i), n);
    const float* a = data + i * dim;
    for (std::size_t j = static_cast<std::size_t>(i) + 1; j < n; ++j) {
      const double d = dot_compensated(a, data + j * dim, dim);
      *dst++ = cosine_from_parts(d, norms[i], norms[j]);
    }
  }
}

void block_moments(std::span<const std::span<const double>> blocks, Moments* out) {
  const auto nb = static_cast<std::ptrdiff_t>(blocks.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t b = 0; b < nb; ++b) {
    KahanSum s, ss;
    for (double y : blocks[b]) {
      s.add(y);
      ss.add(y * y);
    }
    out[b] = {blocks[b].size(), s.value(), ss.value()};
  }
}

}  // namespace hbias::kernels::parallel
