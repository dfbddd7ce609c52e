#ifndef STNALIGN_SAMPLER_HPP_
#define STNALIGN_SAMPLER_HPP_

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stnalign/tensor.hpp"
#include "stnalign/transforms.hpp"

namespace stnalign {

/*
 * Bilinear sampler. Normalized coordinates map to 0-based pixel positions by
 *   p = (x + 1) / 2 * (W - 1),
 * i.e. -1 and +1 land on the centers of the first and last pixel. Pixels outside
 * the image read as zero. The coordinate gradient of the bilinear kernel is
 * taken as zero where a source coordinate is exactly an integer.
 */

namespace detail {

// Positions within this distance of an integer are treated as exact hits, so
// grids that land on pixel centers reproduce pixel values bit-for-bit.
inline constexpr double kIntegerSnap = 1e-9;

inline double to_pixel(double norm, std::size_t extent) {
  const double p = (norm + 1.0) * 0.5 * static_cast<double>(extent - 1);
  const double r = std::nearbyint(p);
  return std::abs(p - r) <= kIntegerSnap ? r : p;
}

// Neighbor pair along one axis: indices i0, i0 + 1 with weights (1 - f), f.
struct Taps {
  long i0 = 0;
  double frac = 0.0;
  bool exact = false;  // position is an integer
  bool outside = false;  // no neighbor lies inside [0, extent)
};

inline Taps taps(double p, std::size_t extent) {
  Taps t;
  if (p <= -1.0 || p >= static_cast<double>(extent)) {
    t.outside = true;
    t.exact = p == std::floor(p);
    return t;
  }
  const double fl = std::floor(p);
  t.i0 = static_cast<long>(fl);
  t.frac = p - fl;
  t.exact = t.frac == 0.0;
  return t;
}

}  // namespace detail

/// Derivative sign of the bilinear kernel max(0, 1 - |d|) w.r.t. the sample position, d = w - x_s.
/// Zero outside [-1, 1] and at the kink d = 0.
inline double sg(double d) {
  if (std::abs(d) > 1.0 || d == 0.0) return 0.0;
  return d > 0.0 ? 1.0 : -1.0;
}

struct SampleOutput {
  Tensor image;  // (batch, channel, out_h, out_w)
  std::span<const SamplingGrid> grids;
};

/// Samples U (N, C, H, W) at the grid coordinates. `grids` holds one grid shared by
/// the batch or one grid per batch item.
inline SampleOutput bilinear_sample(const Tensor& input, std::span<const SamplingGrid> grids) {
  if (input.rank() != 4) throw DimensionError("bilinear_sample expects (N, C, H, W) input");
  const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h == 0 || w == 0) throw DimensionError("bilinear_sample: empty image");
  if (grids.empty() || (grids.size() != 1 && grids.size() != batch)) {
    throw DimensionError("bilinear_sample: need one grid or one grid per batch item");
  }
  const std::size_t oh = grids[0].out_h, ow = grids[0].out_w;
  for (const auto& g : grids) {
    if (g.out_h != oh || g.out_w != ow) throw DimensionError("bilinear_sample: grids differ in size");
  }
  SampleOutput out{Tensor({batch, channels, oh, ow}), grids};
  for (std::size_t n = 0; n < batch; ++n) {
    const SamplingGrid& grid = grids.size() == 1 ? grids[0] : grids[n];
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (std::isnan(grid.xs[i]) || std::isnan(grid.ys[i])) {
        throw InputError("bilinear_sample: NaN coordinate at pixel " + std::to_string(i));
      }
      const auto tx = detail::taps(detail::to_pixel(grid.xs[i], w), w);
      const auto ty = detail::taps(detail::to_pixel(grid.ys[i], h), h);
      if (tx.outside || ty.outside) continue;
      const double wx[2] = {1.0 - tx.frac, tx.frac};
      const double wy[2] = {1.0 - ty.frac, ty.frac};
      for (std::size_t c = 0; c < channels; ++c) {
        double v = 0.0;
        for (int dy = 0; dy < 2; ++dy) {
          const long yy = ty.i0 + dy;
          if (yy < 0 || yy >= static_cast<long>(h) || wy[dy] == 0.0) continue;
          for (int dx = 0; dx < 2; ++dx) {
            const long xx = tx.i0 + dx;
            if (xx < 0 || xx >= static_cast<long>(w) || wx[dx] == 0.0) continue;
            v += wy[dy] * wx[dx] * input.at(n, c, yy, xx);
          }
        }
        out.image[((n * channels + c) * oh * ow) + i] = v;
      }
    }
  }
  return out;
}

inline SampleOutput bilinear_sample(const Tensor& input, const SamplingGrid& grid) {
  return bilinear_sample(input, std::span<const SamplingGrid>(&grid, 1));
}

/// Per-pixel loss gradients w.r.t. normalized source coordinates.
struct CoordGrad {
  std::vector<double> dxs;
  std::vector<double> dys;
};

struct SamplerGrads {
  Tensor input;                  // empty unless requested
  std::vector<CoordGrad> coords;  // one per grid
};

inline SamplerGrads bilinear_backward(const Tensor& upstream, const Tensor& input,
                                      std::span<const SamplingGrid> grids, bool need_input_grad = true) {
  if (input.rank() != 4 || upstream.rank() != 4) throw DimensionError("bilinear_backward expects rank-4 tensors");
  const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (grids.empty() || (grids.size() != 1 && grids.size() != batch)) {
    throw DimensionError("bilinear_backward: need one grid or one grid per batch item");
  }
  const std::size_t oh = grids[0].out_h, ow = grids[0].out_w;
  if (upstream.shape() != Shape{batch, channels, oh, ow}) {
    throw DimensionError("bilinear_backward: upstream " + shape_string(upstream.shape()) +
                         " does not match sample output");
  }
  SamplerGrads g;
  if (need_input_grad) g.input = Tensor(input.shape());
  g.coords.resize(grids.size());
  for (std::size_t k = 0; k < grids.size(); ++k) {
    g.coords[k].dxs.assign(grids[k].size(), 0.0);
    g.coords[k].dys.assign(grids[k].size(), 0.0);
  }
  const double sx = 0.5 * static_cast<double>(w - 1), sy = 0.5 * static_cast<double>(h - 1);
  auto pixel = [&](std::size_t n, std::size_t c, long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
    return input.at(n, c, yy, xx);
  };
  for (std::size_t n = 0; n < batch; ++n) {
    const std::size_t k = grids.size() == 1 ? 0 : n;
    const SamplingGrid& grid = grids[k];
    CoordGrad& cg = g.coords[k];
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (std::isnan(grid.xs[i]) || std::isnan(grid.ys[i])) {
        throw InputError("bilinear_backward: NaN coordinate at pixel " + std::to_string(i));
      }
      const auto tx = detail::taps(detail::to_pixel(grid.xs[i], w), w);
      const auto ty = detail::taps(detail::to_pixel(grid.ys[i], h), h);
      if (tx.outside || ty.outside) continue;
      const double wx[2] = {1.0 - tx.frac, tx.frac};
      const double wy[2] = {1.0 - ty.frac, ty.frac};
      double gpx = 0.0, gpy = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double up = upstream[((n * channels + c) * oh * ow) + i];
        if (up == 0.0) continue;
        const double u00 = pixel(n, c, ty.i0, tx.i0), u01 = pixel(n, c, ty.i0, tx.i0 + 1);
        const double u10 = pixel(n, c, ty.i0 + 1, tx.i0), u11 = pixel(n, c, ty.i0 + 1, tx.i0 + 1);
        // Only the two neighbors with |w - x_s| < 1 have nonzero sg: -1 left, +1 right.
        if (!tx.exact) gpx += up * (wy[0] * (u01 - u00) + wy[1] * (u11 - u10));
        if (!ty.exact) gpy += up * (wx[0] * (u10 - u00) + wx[1] * (u11 - u01));
        if (need_input_grad) {
          for (int dy = 0; dy < 2; ++dy) {
            const long yy = ty.i0 + dy;
            if (yy < 0 || yy >= static_cast<long>(h)) continue;
            for (int dx = 0; dx < 2; ++dx) {
              const long xx = tx.i0 + dx;
              if (xx < 0 || xx >= static_cast<long>(w)) continue;
              g.input.at(n, c, yy, xx) += up * wy[dy] * wx[dx];
            }
          }
        }
      }
      cg.dxs[i] += gpx * sx;
      cg.dys[i] += gpy * sy;
    }
  }
  return g;
}

inline SamplerGrads bilinear_backward(const Tensor& upstream, const Tensor& input, const SamplingGrid& grid,
                                      bool need_input_grad = true) {
  return bilinear_backward(upstream, input, std::span<const SamplingGrid>(&grid, 1), need_input_grad);
}

/// Mirror along the width axis.
inline Tensor flip_horizontal(const Tensor& image) {
  if (image.rank() != 4) throw DimensionError("flip_horizontal expects (N, C, H, W)");
  Tensor out(image.shape());
  const std::size_t w = image.dim(3), rows = image.size() / w;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t x = 0; x < w; ++x) out[r * w + x] = image[r * w + (w - 1 - x)];
  return out;
}

/// Box-filter downsample by an integer factor per axis.
inline Tensor area_downsample(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 4) throw DimensionError("area_downsample expects (N, C, H, W)");
  const std::size_t h = image.dim(2), w = image.dim(3);
  if (out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0) {
    throw DimensionError("area_downsample: " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not an integer multiple of " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const std::size_t fy = h / out_h, fx = w / out_w;
  if (fy == 1 && fx == 1) return image;
  Tensor out({image.dim(0), image.dim(1), out_h, out_w});
  const double inv = 1.0 / static_cast<double>(fy * fx);
  const std::size_t planes = image.dim(0) * image.dim(1);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = image.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      for (std::size_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < fy; ++dy)
          for (std::size_t dx = 0; dx < fx; ++dx) s += src[(y * fy + dy) * w + x * fx + dx];
        dst[y * out_w + x] = s * inv;
      }
    }
  }
  return out;
}

}  // namespace stnalign

#endif  // STNALIGN_SAMPLER_HPP_
