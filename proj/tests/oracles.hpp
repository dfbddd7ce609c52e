#ifndef STNALIGN_TESTS_ORACLES_HPP_
#define STNALIGN_TESTS_ORACLES_HPP_

// Deliberately naive reference implementations. None of these share code with
// the library beyond the Tensor container.

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "stnalign/tensor.hpp"

namespace oracle {

using stnalign::Tensor;

/// Cross-correlation by direct loops with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const long n = static_cast<long>(x.dim(0)), c = static_cast<long>(x.dim(1)), h = static_cast<long>(x.dim(2)),
             wd = static_cast<long>(x.dim(3));
  const long f = static_cast<long>(w.dim(0)), k = static_cast<long>(w.dim(2));
  const long oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({static_cast<std::size_t>(n), static_cast<std::size_t>(f), static_cast<std::size_t>(oh),
              static_cast<std::size_t>(ow)});
  for (long i = 0; i < n; ++i)
    for (long o = 0; o < f; ++o)
      for (long y = 0; y < oh; ++y)
        for (long xx = 0; xx < ow; ++xx) {
          double s = b[static_cast<std::size_t>(o)];
          for (long ch = 0; ch < c; ++ch)
            for (long ky = 0; ky < k; ++ky)
              for (long kx = 0; kx < k; ++kx) {
                const long iy = y * stride + ky - pad, ix = xx * stride + kx - pad;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                s += x[static_cast<std::size_t>(((i * c + ch) * h + iy) * wd + ix)] *
                     w[static_cast<std::size_t>(((o * c + ch) * k + ky) * k + kx)];
              }
          out[static_cast<std::size_t>(((i * f + o) * oh + y) * ow + xx)] = s;
        }
  return out;
}

/// The bilinear sampling sum taken literally over every source pixel:
/// V = sum_n sum_m U[n][m] max(0, 1 - |x - m|) max(0, 1 - |y - n|),
/// with x, y the 0-based pixel positions of normalized coordinates in [-1, 1].
inline double literal_sample(const Tensor& image, std::size_t channel, double xn, double yn) {
  const std::size_t h = image.dim(2), w = image.dim(3);
  const double x = (xn + 1.0) / 2.0 * static_cast<double>(w - 1);
  const double y = (yn + 1.0) / 2.0 * static_cast<double>(h - 1);
  double v = 0.0;
  for (std::size_t n = 0; n < h; ++n)
    for (std::size_t m = 0; m < w; ++m) {
      const double kx = std::max(0.0, 1.0 - std::abs(x - static_cast<double>(m)));
      const double ky = std::max(0.0, 1.0 - std::abs(y - static_cast<double>(n)));
      v += image[(channel * h + n) * w + m] * kx * ky;
    }
  return v;
}

using Mat3 = std::array<std::array<double, 3>, 3>;

/// Gauss-Jordan elimination with partial pivoting.
inline Mat3 inverse(Mat3 a) {
  Mat3 inv{};
  for (int i = 0; i < 3; ++i) inv[i][i] = 1.0;
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-300) throw std::runtime_error("singular");
    std::swap(a[col], a[piv]);
    std::swap(inv[col], inv[piv]);
    const double d = a[col][col];
    for (int k = 0; k < 3; ++k) {
      a[col][k] /= d;
      inv[col][k] /= d;
    }
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double m = a[r][col];
      for (int k = 0; k < 3; ++k) {
        a[r][k] -= m * a[col][k];
        inv[r][k] -= m * inv[col][k];
      }
    }
  }
  return inv;
}

inline Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

/// Parameter count of a localization network, from its layer list:
/// conv k x k (weights + bias) + per-channel PReLU + 2x2 ceil pool per block,
/// then FC + per-unit PReLU layers, then the linear head.
inline std::size_t locnet_param_count(int input, int channels, const std::vector<int>& widths,
                                      const std::vector<int>& kernels, int blocks, int fc_layers, int fc_width,
                                      int head) {
  long count = 0, extent = input, in_c = channels;
  for (int i = 0; i < blocks; ++i) {
    count += static_cast<long>(kernels[i]) * kernels[i] * in_c * widths[i] + widths[i];  // conv
    count += widths[i];                                                                   // prelu
    extent = extent - kernels[i] + 1;
    extent = (extent + 1) / 2;
    in_c = widths[i];
  }
  long in = extent * extent * in_c;
  for (int j = 0; j < fc_layers; ++j) {
    count += in * fc_width + fc_width + fc_width;
    in = fc_width;
  }
  count += in * head + head;
  return static_cast<std::size_t>(count);
}

/// Fraction of values <= level, by counting.
inline double cumulative_fraction(const std::vector<double>& values, double level) {
  std::size_t c = 0;
  for (double v : values) c += v <= level;
  return static_cast<double>(c) / static_cast<double>(values.size());
}

/// Verification accuracy at a threshold: predict same iff score > t.
inline double threshold_accuracy(const std::vector<double>& scores, const std::vector<bool>& same, double t) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) ok += (scores[i] > t) == same[i];
  return static_cast<double>(ok) / static_cast<double>(scores.size());
}

}  // namespace oracle

#endif  // STNALIGN_TESTS_ORACLES_HPP_
