#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mmfusion/kernels.hpp"

namespace mmfusion::kernels {
namespace {

// Output positions o in [lo, hi) whose input index o*stride + tap - pad is in [0, n).
struct Range {
  std::size_t lo = 0, hi = 0;
};

Range valid_outputs(std::size_t n, std::size_t out_n, std::size_t tap, std::size_t stride,
                    std::size_t pad) {
  const auto s = static_cast<std::int64_t>(stride);
  const std::int64_t shift = static_cast<std::int64_t>(tap) - static_cast<std::int64_t>(pad);
  std::int64_t lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
  const std::int64_t last = static_cast<std::int64_t>(n) - 1 - shift;
  std::int64_t hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(out_n));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

std::size_t input_index(std::size_t o, std::size_t tap, std::size_t stride, std::size_t pad) {
  return o * stride + tap - pad;
}


// col is (C * k^3) x P with P = output positions; row r = (ic, kd, kh, kw).
// Entries that read padding stay zero.
void im2col(const Conv3dGeometry& g, std::span<const double> in, std::vector<double>& col) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  const std::size_t p_count = od * oh * ow, in_vol = g.depth * g.height * g.width, kk = g.kernel;
  const std::size_t taps = kk * kk * kk;
  col.assign(g.in_channels * taps * p_count, 0.0);
  const auto rows = static_cast<std::int64_t>(g.in_channels * taps);
#pragma omp parallel for schedule(static) if (rows * static_cast<std::int64_t>(p_count) > 32768)
  for (std::int64_t rr = 0; rr < rows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const std::size_t ic = r / taps, tap = r % taps;
    const std::size_t kd = tap / (kk * kk), kh = (tap / kk) % kk, kw = tap % kk;
    const Range rd = valid_outputs(g.depth, od, kd, g.stride, g.pad);
    const Range rh = valid_outputs(g.height, oh, kh, g.stride, g.pad);
    const Range rw = valid_outputs(g.width, ow, kw, g.stride, g.pad);
    const double* src = in.data() + ic * in_vol;
    double* dst = col.data() + r * p_count;
    for (std::size_t z = rd.lo; z < rd.hi; ++z) {
      const std::size_t iz = input_index(z, kd, g.stride, g.pad);
      for (std::size_t y = rh.lo; y < rh.hi; ++y) {
        const std::size_t iy = input_index(y, kh, g.stride, g.pad);
        const double* irow = src + (iz * g.height + iy) * g.width;
        double* crow = dst + (z * oh + y) * ow;
        for (std::size_t x = rw.lo; x < rw.hi; ++x) crow[x] = irow[x * g.stride + kw - g.pad];
      }
    }
  }
}

// Scatter-add of a column matrix back onto the input grid.  Parallel over
// input channels so no two threads touch the same voxel.
void col2im(const Conv3dGeometry& g, const std::vector<double>& col, std::span<double> grad_in) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  const std::size_t p_count = od * oh * ow, in_vol = g.depth * g.height * g.width, kk = g.kernel;
  const std::size_t taps = kk * kk * kk;
  const auto cin = static_cast<std::int64_t>(g.in_channels);
#pragma omp parallel for schedule(static) if (cin * static_cast<std::int64_t>(taps * p_count) > 32768)
  for (std::int64_t icc = 0; icc < cin; ++icc) {
    const auto ic = static_cast<std::size_t>(icc);
    double* dst = grad_in.data() + ic * in_vol;
    for (std::size_t tap = 0; tap < taps; ++tap) {
      const std::size_t kd = tap / (kk * kk), kh = (tap / kk) % kk, kw = tap % kk;
      const Range rd = valid_outputs(g.depth, od, kd, g.stride, g.pad);
      const Range rh = valid_outputs(g.height, oh, kh, g.stride, g.pad);
      const Range rw = valid_outputs(g.width, ow, kw, g.stride, g.pad);
      const double* src = col.data() + (ic * taps + tap) * p_count;
      for (std::size_t z = rd.lo; z < rd.hi; ++z) {
        const std::size_t iz = input_index(z, kd, g.stride, g.pad);
        for (std::size_t y = rh.lo; y < rh.hi; ++y) {
          const std::size_t iy = input_index(y, kh, g.stride, g.pad);
          double* irow = dst + (iz * g.height + iy) * g.width;
          const double* crow = src + (z * oh + y) * ow;
          for (std::size_t x = rw.lo; x < rw.hi; ++x) irow[x * g.stride + kw - g.pad] += crow[x];
        }
      }
    }
  }
}

}  // namespace

void conv3d_forward(const Conv3dGeometry& g, std::span<const double> in,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> out) {
  const std::size_t p_count = g.out_depth() * g.out_height() * g.out_width();
  const std::size_t r_count = g.in_channels * g.kernel * g.kernel * g.kernel;
  std::vector<double> col;
  im2col(g, in, col);
  for (std::size_t oc = 0; oc < g.out_channels; ++oc)
    std::fill_n(out.data() + oc * p_count, p_count, bias.empty() ? 0.0 : bias[oc]);
  gemm(false, false, g.out_channels, p_count, r_count, weight, col, out, true);
}

void conv3d_backward_input(const Conv3dGeometry& g, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in) {
  const std::size_t p_count = g.out_depth() * g.out_height() * g.out_width();
  const std::size_t r_count = g.in_channels * g.kernel * g.kernel * g.kernel;
  std::vector<double> col(r_count * p_count);
  gemm(true, false, r_count, p_count, g.out_channels, weight, grad_out, col);
  col2im(g, col, grad_in);
}

void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const double> in,
                            std::span<const double> grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  const std::size_t p_count = g.out_depth() * g.out_height() * g.out_width();
  const std::size_t r_count = g.in_channels * g.kernel * g.kernel * g.kernel;
  std::vector<double> col;
  im2col(g, in, col);
  gemm(false, true, g.out_channels, r_count, p_count, grad_out, col, grad_weight, true);
  if (!grad_bias.empty())
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      const double* go = grad_out.data() + oc * p_count;
      grad_bias[oc] += std::accumulate(go, go + p_count, 0.0);
    }
}

namespace reference {
namespace {

// Input value at signed coordinates, zero outside the volume.
double sample(const Conv3dGeometry& g, std::span<const double> in, std::size_t c, long z, long y,
              long x) {
  if (z < 0 || y < 0 || x < 0) return 0.0;
  const auto uz = static_cast<std::size_t>(z), uy = static_cast<std::size_t>(y),
             ux = static_cast<std::size_t>(x);
  if (uz >= g.depth || uy >= g.height || ux >= g.width) return 0.0;
  return in[((c * g.depth + uz) * g.height + uy) * g.width + ux];
}

}  // namespace

void conv3d_forward(const Conv3dGeometry& g, std::span<const double> in,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> out) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  const std::size_t k = g.kernel;
  const long pad = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  for (std::size_t oc = 0; oc < g.out_channels; ++oc)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bias.empty() ? 0.0 : bias[oc];
          for (std::size_t ic = 0; ic < g.in_channels; ++ic)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b)
                for (std::size_t c = 0; c < k; ++c) {
                  const double v = sample(g, in, ic, static_cast<long>(z) * s + static_cast<long>(a) - pad,
                                          static_cast<long>(y) * s + static_cast<long>(b) - pad,
                                          static_cast<long>(x) * s + static_cast<long>(c) - pad);
                  acc += v * weight[(((oc * g.in_channels + ic) * k + a) * k + b) * k + c];
                }
          out[((oc * od + z) * oh + y) * ow + x] = acc;
        }
}

void conv3d_backward_input(const Conv3dGeometry& g, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  const std::size_t k = g.kernel;
  const long pad = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  for (std::size_t oc = 0; oc < g.out_channels; ++oc)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const double go = grad_out[((oc * od + z) * oh + y) * ow + x];
          for (std::size_t ic = 0; ic < g.in_channels; ++ic)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b)
                for (std::size_t c = 0; c < k; ++c) {
                  const long iz = static_cast<long>(z) * s + static_cast<long>(a) - pad;
                  const long iy = static_cast<long>(y) * s + static_cast<long>(b) - pad;
                  const long ix = static_cast<long>(x) * s + static_cast<long>(c) - pad;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<long>(g.depth) ||
                      iy >= static_cast<long>(g.height) || ix >= static_cast<long>(g.width))
                    continue;
                  grad_in[((ic * g.depth + static_cast<std::size_t>(iz)) * g.height +
                           static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                      go * weight[(((oc * g.in_channels + ic) * k + a) * k + b) * k + c];
                }
        }
}

void conv3d_backward_weight(const Conv3dGeometry& g, std::span<const double> in,
                            std::span<const double> grad_out, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  const std::size_t od = g.out_depth(), oh = g.out_height(), ow = g.out_width();
  const std::size_t k = g.kernel;
  const long pad = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  for (std::size_t oc = 0; oc < g.out_channels; ++oc)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const double go = grad_out[((oc * od + z) * oh + y) * ow + x];
          if (!grad_bias.empty()) grad_bias[oc] += go;
          for (std::size_t ic = 0; ic < g.in_channels; ++ic)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b)
                for (std::size_t c = 0; c < k; ++c)
                  grad_weight[(((oc * g.in_channels + ic) * k + a) * k + b) * k + c] +=
                      go * sample(g, in, ic, static_cast<long>(z) * s + static_cast<long>(a) - pad,
                                  static_cast<long>(y) * s + static_cast<long>(b) - pad,
                                  static_cast<long>(x) * s + static_cast<long>(c) - pad);
        }
}

}  // namespace reference

}  // namespace mmfusion::kernels
