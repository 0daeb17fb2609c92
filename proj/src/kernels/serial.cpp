#include "hbias/kernels.hpp"

#include <vector>

namespace hbias::kernels::serial {

void row_norms(const float* data, std::size_t n, std::size_t dim, double* norms) {
  for (std::size_t i = 0; i < n; ++i) norms[i] = norm(data + i * dim, dim);
}

void pairwise_cosine(const float* data, std::size_t n, std::size_t dim, double* out) {
  std::vector<double> norms(n);
  row_norms(data, n, dim, norms.data());
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = dot_compensated(data + i * dim, data + j * dim, dim);
      out[k++] = cosine_from_parts(d, norms[i], norms[j]);
    }
  }
}

void block_moments(std::span<const std::span<const double>> blocks, Moments* out) {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    KahanSum s, ss;
    for (double y : blocks[b]) {
      s.add(y);
      ss.add(y * y);
    }
    out[b] = {blocks[b].size(), s.value(), ss.value()};
  }
}

}  // namespace hbias::kernels::serial
