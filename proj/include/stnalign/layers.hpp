#ifndef STNALIGN_LAYERS_HPP_
#define STNALIGN_LAYERS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stnalign/tensor.hpp"

namespace stnalign {

// Layer kernels used by the localization and recognition networks. Every
// forward has an exact analytic backward. Image tensors are NCHW.

enum class LayerKind { conv, maxpool, prelu, fc, softmax_xent, center_loss };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  int in_channels = 1;
  int out_channels = 1;  // conv output channels, fc output width, class count
  double center_weight = 0.0;

  void validate() const {
    const bool dimensional = kind == LayerKind::conv || kind == LayerKind::fc;
    if (dimensional && (kernel <= 0 || stride <= 0 || in_channels <= 0 || out_channels <= 0 || pad < 0)) {
      throw DimensionError("layer hyperparameters must be positive");
    }
    if (center_weight < 0.0) throw InputError("center-loss weight must be non-negative");
  }
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const BasicTensor<T>& input, const BasicTensor<T>& weights, int stride, int pad) {
  if (input.rank() != 4 || weights.rank() != 4) throw DimensionError("conv2d expects rank-4 input and weights");
  if (stride <= 0 || pad < 0) throw DimensionError("conv2d: stride must be positive and pad non-negative");
  if (input.dim(1) != weights.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(input.dim(1)) + " vs weight channels " +
                         std::to_string(weights.dim(1)));
  }
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weights.dim(2), weights.dim(3),
                 static_cast<std::size_t>(stride), static_cast<std::size_t>(pad), 0, 0};
  if (g.height + 2 * g.pad < g.kernel_h || g.width + 2 * g.pad < g.kernel_w) {
    throw DimensionError("conv2d: spatial extent " + shape_string(input.shape()) + " smaller than kernel");
  }
  g.out_h = (g.height + 2 * g.pad - g.kernel_h) / g.stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kernel_w) / g.stride + 1;
  return g;
}

// cols is (C*kh*kw) x (out_h*out_w), row-major.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const long pad = static_cast<long>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++row) {
        T* dst = cols + row * g.positions();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            *dst++ = inside ? plane[iy * g.width + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  const long pad = static_cast<long>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++row) {
        const T* src = cols + row * g.positions();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          for (std::size_t ox = 0; ox < g.out_w; ++ox, ++src) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) && ix < static_cast<long>(g.width)) {
              plane[iy * g.width + ix] += *src;
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation, zero padding `pad` (0 = valid).
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                              const BasicTensor<T>& bias, int stride = 1, int pad = 0) {
  const auto g = detail::conv_geometry(input, weights, stride, pad);
  const std::size_t filters = weights.dim(0);
  if (bias.size() != filters) throw DimensionError("conv2d: bias length must equal filter count");
  const std::size_t batch = input.dim(0);
  BasicTensor<T> out({batch, filters, g.out_h, g.out_w});
  AlignedVector<T> cols(g.patch() * g.positions());
  detail::ConstMatrixMap<T> w(weights.data(), filters, g.patch());
  for (std::size_t n = 0; n < batch; ++n) {
    detail::im2col(input.data() + n * g.channels * g.height * g.width, g, cols.data());
    detail::ConstMatrixMap<T> c(cols.data(), g.patch(), g.positions());
    detail::MatrixMap<T> o(out.data() + n * filters * g.positions(), filters, g.positions());
    o.noalias() = w * c;
    for (std::size_t k = 0; k < filters; ++k) o.row(k).array() += bias[k];
  }
  return out;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

/// Gradients of sum(upstream * conv2d_forward(...)).
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& upstream, const BasicTensor<T>& saved_input,
                             const BasicTensor<T>& weights, int stride = 1, int pad = 0,
                             bool need_input_grad = true) {
  const auto g = detail::conv_geometry(saved_input, weights, stride, pad);
  const std::size_t filters = weights.dim(0);
  const std::size_t batch = saved_input.dim(0);
  if (upstream.shape() != Shape{batch, filters, g.out_h, g.out_w}) {
    throw DimensionError("conv2d_backward: upstream " + shape_string(upstream.shape()) +
                         " does not match forward output");
  }
  ConvGrads<T> grads{need_input_grad ? BasicTensor<T>(saved_input.shape()) : BasicTensor<T>(),
                     BasicTensor<T>(weights.shape()), BasicTensor<T>(Shape{filters})};
  AlignedVector<T> cols(g.patch() * g.positions());
  detail::ConstMatrixMap<T> w(weights.data(), filters, g.patch());
  detail::MatrixMap<T> gw(grads.weights.data(), filters, g.patch());
  for (std::size_t n = 0; n < batch; ++n) {
    detail::ConstMatrixMap<T> up(upstream.data() + n * filters * g.positions(), filters, g.positions());
    detail::im2col(saved_input.data() + n * g.channels * g.height * g.width, g, cols.data());
    detail::MatrixMap<T> c(cols.data(), g.patch(), g.positions());
    gw.noalias() += up * c.transpose();
    for (std::size_t k = 0; k < filters; ++k) grads.bias[k] += up.row(k).sum();
    if (need_input_grad) {
      c.noalias() = w.transpose() * up;
      detail::col2im_add(cols.data(), g, grads.input.data() + n * g.channels * g.height * g.width);
    }
  }
  return grads;
}

template <typename T>
struct PoolOutput {
  BasicTensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index of each output's winner
};

/// 2x2/stride-2 max pooling. Odd extents are replication-padded by one row/column.
template <typename T>
PoolOutput<T> maxpool2x2_forward(const BasicTensor<T>& input) {
  if (input.rank() != 4) throw DimensionError("maxpool2x2 expects rank-4 input");
  const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h == 0 || w == 0) throw DimensionError("maxpool2x2: empty spatial extent");
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  PoolOutput<T> res{BasicTensor<T>({batch, channels, oh, ow}), std::vector<std::size_t>(batch * channels * oh * ow)};
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < batch * channels; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        std::size_t best = base + (2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          const std::size_t iy = std::min(2 * y + dy, h - 1);
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t ix = std::min(2 * x + dx, w - 1);
            const std::size_t idx = base + iy * w + ix;
            if (input[idx] > input[best]) best = idx;
          }
        }
        res.output[o] = input[best];
        res.argmax[o] = best;
      }
    }
  }
  return res;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const BasicTensor<T>& upstream, const std::vector<std::size_t>& argmax,
                                   const Shape& input_shape) {
  if (upstream.size() != argmax.size()) throw DimensionError("maxpool2x2_backward: mask/upstream mismatch");
  BasicTensor<T> grad(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) grad[argmax[o]] += upstream[o];
  return grad;
}

namespace detail {
template <typename T>
std::size_t spatial_size(const BasicTensor<T>& t) {
  std::size_t s = 1;
  for (std::size_t a = 2; a < t.rank(); ++a) s *= t.dim(a);
  return s;
}
}  // namespace detail

/// out = x for x >= 0, slope[c] * x otherwise. Works on (N, C, ...) tensors.
template <typename T>
BasicTensor<T> prelu_forward(const BasicTensor<T>& input, const BasicTensor<T>& slope) {
  if (input.rank() < 2 || slope.size() != input.dim(1)) throw DimensionError("prelu: slope length must equal channels");
  BasicTensor<T> out = input;
  const std::size_t channels = input.dim(1), inner = detail::spatial_size(input);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] < T(0)) out[i] *= slope[(i / inner) % channels];
  }
  return out;
}

template <typename T>
struct PreluGrads {
  BasicTensor<T> input;
  BasicTensor<T> slope;
};

template <typename T>
PreluGrads<T> prelu_backward(const BasicTensor<T>& upstream, const BasicTensor<T>& saved_input,
                             const BasicTensor<T>& slope) {
  upstream.require_same_shape(saved_input, "prelu_backward");
  PreluGrads<T> g{upstream, BasicTensor<T>(slope.shape())};
  const std::size_t channels = saved_input.dim(1), inner = detail::spatial_size(saved_input);
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    if (saved_input[i] < T(0)) {
      const std::size_t c = (i / inner) % channels;
      g.slope[c] += upstream[i] * saved_input[i];
      g.input[i] = upstream[i] * slope[c];
    }
  }
  return g;
}

/// out[n] = W * flatten(x[n]) + b; output shape (N, O).
template <typename T>
BasicTensor<T> fc_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights, const BasicTensor<T>& bias) {
  if (weights.rank() != 2 || input.rank() < 1) throw DimensionError("fc expects rank-2 weights");
  const std::size_t batch = input.dim(0), width = input.size() / std::max<std::size_t>(batch, 1);
  const std::size_t outputs = weights.dim(0);
  if (weights.dim(1) != width) {
    throw DimensionError("fc: input width " + std::to_string(width) + " vs weight columns " +
                         std::to_string(weights.dim(1)));
  }
  if (bias.size() != outputs) throw DimensionError("fc: bias length must equal output width");
  BasicTensor<T> out({batch, outputs});
  detail::ConstMatrixMap<T> x(input.data(), batch, width);
  detail::ConstMatrixMap<T> w(weights.data(), outputs, width);
  detail::MatrixMap<T> o(out.data(), batch, outputs);
  o.noalias() = x * w.transpose();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < outputs; ++j) o(n, j) += bias[j];
  return out;
}

template <typename T>
struct FcGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

template <typename T>
FcGrads<T> fc_backward(const BasicTensor<T>& upstream, const BasicTensor<T>& saved_input,
                       const BasicTensor<T>& weights, bool need_input_grad = true) {
  const std::size_t batch = saved_input.dim(0), width = saved_input.size() / std::max<std::size_t>(batch, 1);
  const std::size_t outputs = weights.dim(0);
  if (upstream.shape() != Shape{batch, outputs}) throw DimensionError("fc_backward: upstream shape mismatch");
  FcGrads<T> g{need_input_grad ? BasicTensor<T>(saved_input.shape()) : BasicTensor<T>(),
               BasicTensor<T>(weights.shape()), BasicTensor<T>(Shape{outputs})};
  detail::ConstMatrixMap<T> up(upstream.data(), batch, outputs);
  detail::ConstMatrixMap<T> x(saved_input.data(), batch, width);
  detail::ConstMatrixMap<T> w(weights.data(), outputs, width);
  detail::MatrixMap<T> gw(g.weights.data(), outputs, width);
  gw.noalias() = up.transpose() * x;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < outputs; ++j) g.bias[j] += up(n, j);
  if (need_input_grad) {
    detail::MatrixMap<T> gi(g.input.data(), batch, width);
    gi.noalias() = up * w;
  }
  return g;
}

template <typename T>
struct SoftmaxXentResult {
  T loss = T(0);
  BasicTensor<T> grad_logits;
  std::size_t correct = 0;  // rows whose argmax equals the label
};

/// Mean negative log-softmax of the true class.
template <typename T>
SoftmaxXentResult<T> softmax_xent(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_xent expects (batch, classes) logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw DimensionError("softmax_xent: label count must equal batch");
  SoftmaxXentResult<T> r{T(0), BasicTensor<T>(logits.shape()), 0};
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InputError("softmax_xent: label " + std::to_string(label) + " out of range");
    }
    const T* row = logits.data() + n * classes;
    T* grow = r.grad_logits.data() + n * classes;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
    const T top = row[arg];
    T denom = T(0);
    for (std::size_t j = 0; j < classes; ++j) denom += std::exp(row[j] - top);
    const T log_denom = std::log(denom);
    r.loss += -(row[label] - top - log_denom);
    for (std::size_t j = 0; j < classes; ++j) {
      const T p = std::exp(row[j] - top - log_denom);
      grow[j] = (p - (j == static_cast<std::size_t>(label) ? T(1) : T(0))) / static_cast<T>(batch);
    }
    if (arg == static_cast<std::size_t>(label)) ++r.correct;
  }
  r.loss /= static_cast<T>(batch);
  return r;
}

template <typename T>
struct CenterLossResult {
  T loss = T(0);                 // 1/2 * mean ||x_i - c_{y_i}||^2
  BasicTensor<T> grad_features;  // d loss / d x, not yet scaled by the loss weight
  BasicTensor<T> center_step;    // additive update for the centers: -damping * delta_c
};

/**
 * Center loss. Centers move by the damped per-class mean of (c_j - x_i),
 * delta_c_j = sum_{i: y_i = j}(c_j - x_i) / (1 + n_j); classes absent from the
 * batch get an exactly-zero step.
 */
template <typename T>
CenterLossResult<T> center_loss(const BasicTensor<T>& features, std::span<const int> labels,
                                const BasicTensor<T>& centers, T damping = T(0.5)) {
  if (features.rank() != 2 || centers.rank() != 2 || features.dim(1) != centers.dim(1)) {
    throw DimensionError("center_loss: features and centers must share width");
  }
  const std::size_t batch = features.dim(0), width = features.dim(1), classes = centers.dim(0);
  if (labels.size() != batch) throw DimensionError("center_loss: label count must equal batch");
  CenterLossResult<T> r{T(0), BasicTensor<T>(features.shape()), BasicTensor<T>(centers.shape())};
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InputError("center_loss: label " + std::to_string(label) + " out of range");
    }
    ++counts[label];
    for (std::size_t d = 0; d < width; ++d) {
      const T diff = features[n * width + d] - centers[label * width + d];
      r.loss += diff * diff;
      r.grad_features[n * width + d] = diff / static_cast<T>(batch);
      r.center_step[label * width + d] += diff;  // sum of (x_i - c_j) = -sum(c_j - x_i)
    }
  }
  r.loss *= T(0.5) / static_cast<T>(batch);
  for (std::size_t j = 0; j < classes; ++j) {
    const T scale = damping / static_cast<T>(1 + counts[j]);
    for (std::size_t d = 0; d < width; ++d) r.center_step[j * width + d] *= scale;
  }
  return r;
}

struct LossBundle {
  double softmax_loss = 0.0;
  double center_loss = 0.0;
  double center_weight = 0.0;
  double total = 0.0;
};

inline LossBundle make_loss_bundle(double softmax_loss, double center_loss_value, double center_weight) {
  if (center_weight < 0.0) throw InputError("center-loss weight must be non-negative");
  return {softmax_loss, center_loss_value, center_weight, softmax_loss + center_weight * center_loss_value};
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T, typename Rng>
void xavier_uniform(BasicTensor<T>& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
}

}  // namespace stnalign

#endif  // STNALIGN_LAYERS_HPP_
