#pragma once

// Dense compute kernels behind the autograd ops.  The top-level functions are
// OpenMP-parallel; the `reference` namespace holds straightforward serial
// versions with identical signatures, kept for tests and benchmarks.

#include <cstddef>
#include <span>

namespace mmfusion::kernels {

// Row-major C[m x n] = op(A) * op(B), or += when accumulate is set.
// op(A) is m x k; A is stored k x m when trans_a.  Likewise B.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);

// Cubic-kernel 3-D convolution, zero padding, same stride on all axes.
struct Conv3dGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t depth = 1, height = 1, width = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_depth() const { return (depth + 2 * pad - kernel) / stride + 1; }
  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t in_size() const { return in_channels * depth * height * width; }
  std::size_t out_size() const { return out_channels * out_depth() * out_height() * out_width(); }
  std::size_t weight_size() const {
    return out_channels * in_channels * kernel * kernel * kernel;
  }
};

// out = conv(in, weight) + bias.  Overwrites out.
void conv3d_forward(const Conv3dGeometry& g, std::span<const double> in,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> out);
// grad_in += conv^T(grad_out, weight).
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in);
// grad_weight += in (*) grad_out,  grad_bias += sum(grad_out).
void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const double> in,
                            std::span<const double> grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias);

namespace reference {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b, std::span<double> c,
          bool accumulate = false);
void conv3d_forward(const Conv3dGeometry& g, std::span<const double> in,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> out);
void conv3d_backward_input(const Conv3dGeometry& g, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in);
void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const double> in,
                            std::span<const double> grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias);

}  // namespace reference

}  // namespace mmfusion::kernels
