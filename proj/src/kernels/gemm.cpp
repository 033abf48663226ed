#include <algorithm>
#include <cstdint>

#include "mmfusion/kernels.hpp"

namespace mmfusion::kernels {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const auto rows = static_cast<std::int64_t>(m);
  const bool big = m * n * k > 32768;

#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = pc + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    if (!trans_b) {
      // Row-of-C += a_ip * row p of B: unit stride on the inner loop.
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = trans_a ? pa[p * m + i] : pa[i * k + p];
        const double* brow = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = pb + j * k;
        double acc = 0.0;
        if (!trans_a) {
          const double* arow = pa + i * k;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) acc += pa[p * m + i] * brow[p];
        }
        crow[j] += acc;
      }
    }
  }
}

namespace reference {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

}  // namespace reference

}  // namespace mmfusion::kernels
