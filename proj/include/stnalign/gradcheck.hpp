#ifndef STNALIGN_GRADCHECK_HPP_
#define STNALIGN_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stnalign/layers.hpp"
#include "stnalign/pipeline.hpp"
#include "stnalign/sampler.hpp"
#include "stnalign/seeding.hpp"
#include "stnalign/transforms.hpp"

namespace stnalign {

// Central finite-difference checks of every analytic backward pass. Relative error
// is |analytic - numeric| / max(|analytic|, |numeric|, kGradFloor).

inline constexpr double kGradFloor = 1e-2;
inline constexpr double kTransformTolerance = 1e-7;
inline constexpr double kSamplerTolerance = 1e-7;
inline constexpr double kLayerTolerance = 1e-6;
inline constexpr double kPipelineTolerance = 1e-5;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
}

struct GradCheckStats {
  std::string op;
  double tolerance = 0.0;
  std::size_t checks = 0;
  std::size_t skipped = 0;  // finite differences straddling a kink
  double worst = 0.0;

  void record(double analytic, double numeric) {
    ++checks;
    const double e = relative_error(analytic, numeric);
    if (!(e <= worst)) worst = std::isnan(e) ? INFINITY : e;
  }
  /// Passes when every check is within tolerance and kink skips stay under 5%.
  bool pass() const { return worst < tolerance && skipped * 20 <= checks + skipped; }
};

struct GradCheckReport {
  std::vector<GradCheckStats> ops;
  bool pass() const {
    return std::all_of(ops.begin(), ops.end(), [](const GradCheckStats& s) { return s.pass(); });
  }
};

namespace detail {

/// Central difference of f at x along one coordinate.
inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2.0 * h);
}

/// Central difference that also reports a kink within [x - 2h, x + 2h]. For smooth f
/// the three second differences on that stencil agree to O(h^3); a slope jump breaks that.
inline std::pair<double, bool> guarded_difference(const std::function<double()>& f, double& x, double h) {
  const double x0 = x;
  double v[5];
  for (int k = 0; k < 5; ++k) {
    x = x0 + (k - 2) * h;
    v[k] = f();
  }
  x = x0;
  const double d = (v[3] - v[1]) / (2.0 * h);
  const double s_minus = v[0] - 2 * v[1] + v[2], s_mid = v[1] - 2 * v[2] + v[3], s_plus = v[2] - 2 * v[3] + v[4];
  double scale = 0.0;
  for (double e : v) scale = std::max(scale, std::abs(e));
  const double noise = 64 * std::numeric_limits<double>::epsilon() * scale;
  const double limit = noise + 1e-6 * h * std::max(std::abs(d), kGradFloor);
  const bool kink = std::max(std::abs(s_plus - s_mid), std::abs(s_mid - s_minus)) > limit;
  return {d, kink};
}

template <typename Rng>
void fill_uniform(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename Rng>
TransformParams random_params(TransformKind kind, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  switch (kind) {
    case TransformKind::identity: return IdentityTransform{};
    case TransformKind::similarity: return SimilarityTransform{u(rng) * 3.0, 0.5 + 0.5 * (u(rng) + 1.0), 0.3 * u(rng), 0.3 * u(rng)};
    case TransformKind::affine:
      return AffineTransform{1 + 0.4 * u(rng), 0.4 * u(rng), 0.3 * u(rng), 0.4 * u(rng), 1 + 0.4 * u(rng), 0.3 * u(rng)};
    case TransformKind::projective:
      return ProjectiveTransform{1 + 0.4 * u(rng), 0.4 * u(rng), 0.3 * u(rng), 0.4 * u(rng),
                                 1 + 0.4 * u(rng), 0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)};
  }
  return IdentityTransform{};
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Jacobians of the source coordinates w.r.t. transform parameters, through a random
/// smooth loss sum(a x_s + b y_s + c x_s^2 / 2 + d y_s^2 / 2) on a 4x4 grid.
template <typename Rng>
void check_transforms(GradCheckReport& rep, int trials, Rng& rng, std::optional<double> tol) {
  for (TransformKind kind : {TransformKind::similarity, TransformKind::affine, TransformKind::projective}) {
    GradCheckStats s{std::string("param_jacobian/") + kind_name(kind), tol.value_or(kTransformTolerance)};
    for (int t = 0; t < trials; ++t) {
      const TransformParams params = detail::random_params(kind, rng);
      const std::size_t n = 4;
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      std::vector<double> a(n * n), b(n * n), c(n * n), d(n * n);
      for (std::size_t i = 0; i < n * n; ++i) a[i] = u(rng), b[i] = u(rng), c[i] = u(rng), d[i] = u(rng);
      auto loss = [&](const TransformParams& p) {
        const SamplingGrid g = generate_grid(p, n, n);
        double l = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          l += a[i] * g.xs[i] + b[i] * g.ys[i] + 0.5 * c[i] * g.xs[i] * g.xs[i] + 0.5 * d[i] * g.ys[i] * g.ys[i];
        }
        return l;
      };
      const SamplingGrid g = generate_grid(params, n, n);
      std::vector<double> gx(g.size()), gy(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = a[i] + c[i] * g.xs[i], gy[i] = b[i] + d[i] * g.ys[i];
      const ParamGrad analytic = param_jacobian(params, g, gx, gy);
      std::vector<double> v = to_vector(params);
      for (std::size_t k = 0; k < v.size(); ++k) {
        const double num = detail::central_difference([&] { return loss(from_vector(kind, v)); }, v[k], 1e-6);
        s.record(analytic.values[k], num);
      }
    }
    rep.ops.push_back(s);
  }
}

/// Sampler gradients w.r.t. image values and source coordinates on strictly
/// fractional (possibly out-of-bounds) random grids.
template <typename Rng>
void check_sampler(GradCheckReport& rep, int trials, Rng& rng, std::optional<double> tol) {
  GradCheckStats sx{"bilinear_backward/coords", tol.value_or(kSamplerTolerance)};
  GradCheckStats su{"bilinear_backward/image", tol.value_or(kSamplerTolerance)};
  std::uniform_real_distribution<double> u(-1.15, 1.15);
  for (int t = 0; t < trials; ++t) {
    const std::size_t h = 5, w = 6, oh = 3, ow = 4;
    Tensor img({1, 2, h, w});
    detail::fill_uniform(img, rng);
    SamplingGrid grid;
    grid.kind = TransformKind::identity;
    grid.out_h = oh;
    grid.out_w = ow;
    for (std::size_t i = 0; i < oh * ow; ++i) {
      double x, y;
      do {
        x = u(rng);
        y = u(rng);
      } while (std::abs(detail::to_pixel(x, w) - std::round(detail::to_pixel(x, w))) < 1e-3 ||
               std::abs(detail::to_pixel(y, h) - std::round(detail::to_pixel(y, h))) < 1e-3);
      grid.xs.push_back(x);
      grid.ys.push_back(y);
      grid.zs.push_back(1.0);
    }
    Tensor up({1, 2, oh, ow});
    detail::fill_uniform(up, rng);
    const SamplerGrads g = bilinear_backward(up, img, grid, true);
    auto loss = [&] { return detail::dot(up, bilinear_sample(img, grid).image); };
    for (std::size_t i = 0; i < oh * ow; ++i) {
      // piecewise linear in each coordinate; the step stays inside the cell
      sx.record(g.coords[0].dxs[i], detail::central_difference(loss, grid.xs[i], 1e-5));
      sx.record(g.coords[0].dys[i], detail::central_difference(loss, grid.ys[i], 1e-5));
    }
    for (std::size_t i = 0; i < img.size(); ++i) su.record(g.input[i], detail::central_difference(loss, img[i], 1e-6));
  }
  rep.ops.push_back(sx);
  rep.ops.push_back(su);
}

/// Layer kernels, each through sum(upstream * output) (or its own scalar loss).
template <typename Rng>
void check_layers(GradCheckReport& rep, int trials, Rng& rng, std::optional<double> tol) {
  const double t0 = tol.value_or(kLayerTolerance);
  GradCheckStats conv{"conv2d_backward", t0}, pool{"maxpool2x2_backward", t0}, prelu{"prelu_backward", t0},
      fc{"fc_backward", t0}, xent{"softmax_xent", t0}, center{"center_loss", t0};
  const double h = 1e-6;
  for (int t = 0; t < trials; ++t) {
    {
      const int stride = 1 + t % 2, pad = (t / 2) % 2;
      Tensor x({2, 2, 5, 5}), wgt({3, 2, 3, 3}), b({3});
      detail::fill_uniform(x, rng);
      detail::fill_uniform(wgt, rng);
      detail::fill_uniform(b, rng);
      const Tensor y = conv2d_forward(x, wgt, b, stride, pad);
      Tensor up(y.shape());
      detail::fill_uniform(up, rng);
      const auto g = conv2d_backward(up, x, wgt, stride, pad, true);
      auto loss = [&] { return detail::dot(up, conv2d_forward(x, wgt, b, stride, pad)); };
      for (std::size_t i = 0; i < x.size(); ++i) conv.record(g.input[i], detail::central_difference(loss, x[i], h));
      for (std::size_t i = 0; i < wgt.size(); ++i) conv.record(g.weights[i], detail::central_difference(loss, wgt[i], h));
      for (std::size_t i = 0; i < b.size(); ++i) conv.record(g.bias[i], detail::central_difference(loss, b[i], h));
    }
    {
      Tensor x({1, 2, 5, 6});  // odd height exercises the replication pad
      detail::fill_uniform(x, rng);
      const auto y = maxpool2x2_forward(x);
      Tensor up(y.output.shape());
      detail::fill_uniform(up, rng);
      const Tensor g = maxpool2x2_backward(up, y.argmax, x.shape());
      auto loss = [&] { return detail::dot(up, maxpool2x2_forward(x).output); };
      for (std::size_t i = 0; i < x.size(); ++i) {
        auto [num, kink] = detail::guarded_difference(loss, x[i], h);
        if (kink) ++pool.skipped;
        else pool.record(g[i], num);
      }
    }
    {
      Tensor x({2, 3, 2, 2}), slope({3});
      detail::fill_uniform(x, rng);
      detail::fill_uniform(slope, rng, 0.0, 0.5);
      for (auto& v : x.storage())
        if (std::abs(v) < 1e-3) v = 0.5;
      Tensor up(x.shape());
      detail::fill_uniform(up, rng);
      const auto g = prelu_backward(up, x, slope);
      auto loss = [&] { return detail::dot(up, prelu_forward(x, slope)); };
      for (std::size_t i = 0; i < x.size(); ++i) prelu.record(g.input[i], detail::central_difference(loss, x[i], h));
      for (std::size_t i = 0; i < slope.size(); ++i) prelu.record(g.slope[i], detail::central_difference(loss, slope[i], h));
    }
    {
      Tensor x({3, 4}), wgt({5, 4}), b({5});
      detail::fill_uniform(x, rng);
      detail::fill_uniform(wgt, rng);
      detail::fill_uniform(b, rng);
      Tensor up({3, 5});
      detail::fill_uniform(up, rng);
      const auto g = fc_backward(up, x, wgt, true);
      auto loss = [&] { return detail::dot(up, fc_forward(x, wgt, b)); };
      for (std::size_t i = 0; i < x.size(); ++i) fc.record(g.input[i], detail::central_difference(loss, x[i], h));
      for (std::size_t i = 0; i < wgt.size(); ++i) fc.record(g.weights[i], detail::central_difference(loss, wgt[i], h));
      for (std::size_t i = 0; i < b.size(); ++i) fc.record(g.bias[i], detail::central_difference(loss, b[i], h));
    }
    {
      Tensor logits({4, 5});
      detail::fill_uniform(logits, rng, -3.0, 3.0);
      std::vector<int> labels{0, 3, 4, 3};
      const auto r = softmax_xent(logits, labels);
      auto loss = [&] { return softmax_xent(logits, labels).loss; };
      for (std::size_t i = 0; i < logits.size(); ++i) {
        xent.record(r.grad_logits[i], detail::central_difference(loss, logits[i], h));
      }
    }
    {
      Tensor feats({4, 3}), centers({3, 3});
      detail::fill_uniform(feats, rng);
      detail::fill_uniform(centers, rng);
      std::vector<int> labels{2, 0, 2, 1};
      const auto r = center_loss(feats, labels, centers);
      auto loss = [&] { return center_loss(feats, labels, centers).loss; };
      for (std::size_t i = 0; i < feats.size(); ++i) {
        center.record(r.grad_features[i], detail::central_difference(loss, feats[i], h));
      }
    }
  }
  for (auto* s : {&conv, &pool, &prelu, &fc, &xent, &center}) rep.ops.push_back(*s);
}

/// A pipeline small enough for exhaustive finite differences.
inline PipelineConfig tiny_pipeline_config(TransformKind kind) {
  PipelineConfig c;
  c.kind = kind;
  c.image_size = 8;
  c.loc_input_size = 8;
  c.warp_size = 6;
  c.loc.conv_blocks = 1;
  c.loc.conv_widths = {2};
  c.loc.kernel_sizes = {3};
  c.loc.fc_width = 4;
  c.rec.stage_widths = {2};
  c.rec.residual_blocks = 1;
  c.rec.feature_width = 3;
  c.rec.class_count = 3;
  c.center_weight = 0.5;  // large enough that the center term is visible in the check
  c.sync();
  return c;
}

/// End-to-end gradient of the training objective w.r.t. every parameter, for each kind.
/// All weights (including the localization head) are randomized so no path is trivially zero.
template <typename Rng>
void check_pipeline(GradCheckReport& rep, int trials, Rng& rng, std::optional<double> tol) {
  for (TransformKind kind :
       {TransformKind::identity, TransformKind::similarity, TransformKind::affine, TransformKind::projective}) {
    GradCheckStats s{std::string("pipeline/") + kind_name(kind), tol.value_or(kPipelineTolerance)};
    for (int t = 0; t < trials; ++t) {
      PipelineState st = build_pipeline(tiny_pipeline_config(kind), rng());
      std::normal_distribution<double> g(0.0, 1.0);
      for (auto& [name, p] : st.params) {
        const double scale = name.rfind("loc.head", 0) == 0 ? 0.05 : 0.5;
        for (auto& v : p.storage()) v += scale * g(rng);
      }
      Tensor images({2, 1, 8, 8});
      detail::fill_uniform(images, rng, 0.0, 1.0);
      const std::vector<int> labels{static_cast<int>(rng() % 3), static_cast<int>(rng() % 3)};
      const PipelineForward fwd = forward_pipeline(st, images, 1, true);
      const LossGrads lg = pipeline_loss(st, fwd, labels);
      const ParamSet grads = backward_pipeline(st, fwd, lg, 1);
      auto loss = [&] { return pipeline_loss(st, forward_pipeline(st, images), labels).objective; };
      for (auto& [name, p] : st.params) {
        if (name == "centers") continue;
        const auto it = grads.find(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
          auto [num, kink] = detail::guarded_difference(loss, p[i], 1e-6);
          if (kink) {
            ++s.skipped;
            continue;
          }
          s.record(it == grads.end() ? 0.0 : it->second[i], num);
        }
      }
    }
    rep.ops.push_back(s);
  }
}

inline const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> m{"transforms", "sampler", "layers", "pipeline", "all"};
  return m;
}

/// Runs the named suite ("transforms", "sampler", "layers", "pipeline" or "all").
/// `tolerance` overrides every per-op default.
inline GradCheckReport run_gradcheck(const std::string& module, int trials, std::uint64_t seed,
                                     std::optional<double> tolerance = std::nullopt) {
  if (trials < 0) throw InputError("trials must be non-negative");
  const auto& known = gradcheck_modules();
  if (std::find(known.begin(), known.end(), module) == known.end()) throw InputError("unknown module '" + module + "'");
  GradCheckReport rep;
  const bool all = module == "all";
  std::mt19937_64 rng(derive_seed(seed, 0x6c4cULL));
  if (all || module == "transforms") check_transforms(rep, trials, rng, tolerance);
  if (all || module == "sampler") check_sampler(rep, trials, rng, tolerance);
  if (all || module == "layers") check_layers(rep, trials, rng, tolerance);
  if (all || module == "pipeline") check_pipeline(rep, trials, rng, tolerance);
  return rep;
}

}  // namespace stnalign

#endif  // STNALIGN_GRADCHECK_HPP_
