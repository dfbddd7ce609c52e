#ifndef STNALIGN_SYNTH_DATA_HPP_
#define STNALIGN_SYNTH_DATA_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "stnalign/config.hpp"
#include "stnalign/sampler.hpp"
#include "stnalign/seeding.hpp"
#include "stnalign/tensor.hpp"
#include "stnalign/transforms.hpp"

namespace stnalign {

// Synthetic identities: every glyph shares a face-like layout (a soft head
// ellipse, two "eye" blobs, a "mouth" bar) so that pose is recoverable across
// identities, plus a handful of oriented bars and blobs unique to the identity.
// Observations are the canonical glyph warped by a known random transform.

struct GlyphPrimitive {
  bool bar = false;
  double cx = 0.0, cy = 0.0;
  double half_length = 0.0;  // bars only
  double angle = 0.0;        // bars only
  double sigma = 0.05;
  double intensity = 1.0;
};

/// Primitives shared by every identity.
inline std::vector<GlyphPrimitive> shared_layout() {
  return {
      {false, -0.3, -0.25, 0.0, 0.0, 0.09, 0.9},  // left eye
      {false, 0.3, -0.25, 0.0, 0.0, 0.09, 0.9},   // right eye
      {true, 0.0, 0.42, 0.2, 0.0, 0.05, 0.8},     // mouth
  };
}

/// Landmarks of the canonical glyph in normalized coordinates. Points 0 and 1 are
/// the eye centers; their distance is the reference (inter-ocular) length.
inline std::vector<Point2> canonical_landmarks() {
  return {{-0.3, -0.25}, {0.3, -0.25},  {-0.42, -0.25}, {-0.18, -0.25}, {0.18, -0.25}, {0.42, -0.25},
          {-0.2, 0.42},  {0.2, 0.42},   {0.0, 0.42},    {0.0, 0.1},     {-0.62, 0.05}, {0.62, 0.05},
          {0.0, -0.73},  {0.0, 0.83},   {-0.44, 0.6},   {0.44, 0.6}};
}

struct GlyphOptions {
  int unique_primitives = 6;
  double sigma_min = 0.04;  // width range of the unique primitives
  double sigma_max = 0.06;
  bool mirror_symmetric = false;  // mirror the unique primitives across x = 0
};

inline std::vector<GlyphPrimitive> glyph_primitives(std::uint64_t seed, int id, const GlyphOptions& opt = {}) {
  std::mt19937_64 rng(derive_seed(seed, 0x91f7ULL, static_cast<std::uint64_t>(id)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto prims = shared_layout();
  for (int k = 0; k < opt.unique_primitives; ++k) {
    GlyphPrimitive p;
    p.bar = u(rng) < 0.6;
    p.cx = -0.5 + u(rng);
    p.cy = -0.5 + u(rng);
    p.half_length = 0.08 + 0.14 * u(rng);
    p.angle = std::numbers::pi * u(rng);
    p.sigma = opt.sigma_min + (opt.sigma_max - opt.sigma_min) * u(rng);
    p.intensity = 0.5 + 0.5 * u(rng);
    prims.push_back(p);
    if (opt.mirror_symmetric) {
      GlyphPrimitive m = p;
      m.cx = -p.cx;
      m.angle = std::numbers::pi - p.angle;
      prims.push_back(m);
    }
  }
  return prims;
}

/// Renders primitives at `size` x `size`; returns (1, 1, size, size) with values in [0, 1].
inline Tensor render_glyph(const std::vector<GlyphPrimitive>& prims, std::size_t size) {
  Tensor img({1, 1, size, size});
  for (std::size_t i = 0; i < size; ++i) {
    const double y = normalized_coord(i, size);
    for (std::size_t j = 0; j < size; ++j) {
      const double x = normalized_coord(j, size);
      // head: soft ellipse
      const double r = std::hypot(x / 0.62, (y - 0.05) / 0.78);
      double v = 0.25 / (1.0 + std::exp((r - 1.0) / 0.04));
      for (const auto& p : prims) {
        double dx = x - p.cx, dy = y - p.cy;
        if (p.bar) {
          const double ca = std::cos(p.angle), sa = std::sin(p.angle);
          const double along = std::clamp(dx * ca + dy * sa, -p.half_length, p.half_length);
          dx -= along * ca;
          dy -= along * sa;
        }
        v += p.intensity * std::exp(-(dx * dx + dy * dy) / (2.0 * p.sigma * p.sigma));
      }
      img[i * size + j] = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

struct Identity {
  int id = 0;
  Tensor canonical;
};

inline Identity make_identity(std::uint64_t seed, int id, std::size_t size, const GlyphOptions& opt = {}) {
  return {id, render_glyph(glyph_primitives(seed, id, opt), size)};
}

/// Sampling ranges for the truth transforms. Angles in radians; scale is drawn log-uniformly.
struct PerturbationRanges {
  double alpha = std::numbers::pi / 6;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double shift = 0.2;
  double shear = 0.1;        // affine only: shear and anisotropy magnitude
  double perspective = 0.2;  // projective only: G, H

  static PerturbationRanges zero() { return {0.0, 1.0, 1.0, 0.0, 0.0, 0.0}; }

  void validate() const {
    if (alpha < 0.0 || alpha > std::numbers::pi / 4 + 1e-12) throw InputError("alpha range must lie in [0, pi/4]");
    if (scale_min < 0.7 || scale_max > 1.4 || scale_min > scale_max) {
      throw InputError("scale range must lie in [0.7, 1.4]");
    }
    if (shift < 0.0 || shift > 0.25) throw InputError("shift range must lie in [0, 0.25]");
    if (shear < 0.0 || shear > 0.2) throw InputError("shear range must lie in [0, 0.2]");
    if (perspective < 0.0 || perspective > 0.2) throw InputError("perspective range must lie in [0, 0.2]");
  }
};

/// Draws one truth transform of `kind` (identity kind draws nothing).
template <typename Rng>
TransformParams sample_perturbation(TransformKind kind, const PerturbationRanges& r, Rng& rng,
                                    std::size_t check_size = 0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (;;) {
    const double alpha = r.alpha * u(rng);
    const double log_lo = std::log(r.scale_min), log_hi = std::log(r.scale_max);
    const double lambda = std::exp(0.5 * (log_lo + log_hi) + 0.5 * (log_hi - log_lo) * u(rng));
    const double t1 = r.shift * u(rng), t2 = r.shift * u(rng);
    const SimilarityTransform sim{alpha, lambda, t1, t2};
    switch (kind) {
      case TransformKind::identity: return IdentityTransform{};
      case TransformKind::similarity: return sim;
      case TransformKind::affine: {
        const double an = r.shear * u(rng), sh = r.shear * u(rng);
        const Matrix3 m = to_matrix(sim);
        // linear part: M * [[1 + an, sh], [0, 1 - an]]
        return AffineTransform{m[0][0] * (1 + an), m[0][0] * sh + m[0][1] * (1 - an), t1,
                               m[1][0] * (1 + an), m[1][0] * sh + m[1][1] * (1 - an), t2};
      }
      case TransformKind::projective: {
        const Matrix3 m = to_matrix(sim);
        ProjectiveTransform p{m[0][0], m[0][1], t1, m[1][0], m[1][1], t2, r.perspective * u(rng),
                              r.perspective * u(rng)};
        if (check_size == 0 || min_abs_divisor(p, check_size, check_size) >= kDefaultDivisorFloor) return p;
        continue;  // degenerate draw
      }
    }
  }
}

/// Conjugation by the horizontal mirror: the transform relating a mirrored
/// observation to the mirrored canonical.
inline TransformParams mirror_transform(const TransformParams& p) {
  return std::visit(
      [](const auto& t) -> TransformParams {
        using P = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<P, IdentityTransform>) return t;
        else if constexpr (std::is_same_v<P, SimilarityTransform>) return SimilarityTransform{-t.alpha, t.lambda, -t.t1, t.t2};
        else if constexpr (std::is_same_v<P, AffineTransform>) return AffineTransform{t.a11, -t.a12, -t.a13, -t.a21, t.a22, t.a23};
        else return ProjectiveTransform{t.a, -t.b, -t.c, -t.d, t.e, t.f, -t.g, t.h};
      },
      p);
}

/// Warps the canonical glyph by `truth` (target -> canonical map) at the canonical's size.
inline Tensor warp_canonical(const Tensor& canonical, const TransformParams& truth) {
  const SamplingGrid grid = generate_grid(truth, canonical.dim(2), canonical.dim(3));
  return bilinear_sample(canonical, grid).image;
}

struct Observation {
  int obs_id = 0;
  int label = 0;  // identity id
  Tensor image;   // (1, 1, S, S)
  TransformParams truth = IdentityTransform{};
  double noise_level = 0.0;
  bool mirrored = false;
};

/// Gaussian noise field for one observation, reproducible from (seed, obs_id).
inline Tensor observation_noise(std::uint64_t seed, int obs_id, std::size_t size, double sigma) {
  Tensor n({1, 1, size, size});
  if (sigma == 0.0) return n;
  std::mt19937_64 rng(derive_seed(seed, 0x0b5eULL, static_cast<std::uint64_t>(obs_id)));
  std::normal_distribution<double> g(0.0, sigma);
  for (auto& v : n.storage()) v = g(rng);
  return n;
}

struct VerificationPair {
  std::size_t first = 0;   // indices into DatasetSplit::test
  std::size_t second = 0;
  bool same = false;
};

struct DatasetOptions {
  std::uint64_t seed = 1;
  int identities = 50;
  int observations_per_identity = 40;
  int image_size = 128;
  TransformKind perturbation = TransformKind::similarity;
  PerturbationRanges ranges;
  double noise = 0.02;
  double test_fraction = 0.3;
  int pairs = 600;
  GlyphOptions glyph;

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("seed", std::to_string(seed));
    kv.set("identities", std::to_string(identities));
    kv.set("observations_per_identity", std::to_string(observations_per_identity));
    kv.set("image_size", std::to_string(image_size));
    kv.set("perturbation", kind_name(perturbation));
    kv.set("alpha", KeyValues::format(ranges.alpha));
    kv.set("scale_min", KeyValues::format(ranges.scale_min));
    kv.set("scale_max", KeyValues::format(ranges.scale_max));
    kv.set("shift", KeyValues::format(ranges.shift));
    kv.set("shear", KeyValues::format(ranges.shear));
    kv.set("perspective", KeyValues::format(ranges.perspective));
    kv.set("noise", KeyValues::format(noise));
    kv.set("test_fraction", KeyValues::format(test_fraction));
    kv.set("pairs", std::to_string(pairs));
    kv.set("unique_primitives", std::to_string(glyph.unique_primitives));
    kv.set("glyph_sigma_min", KeyValues::format(glyph.sigma_min));
    kv.set("glyph_sigma_max", KeyValues::format(glyph.sigma_max));
    return kv;
  }
  void read(const KeyValues& kv) {
    seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<long>(seed)));
    identities = kv.get("identities", identities);
    observations_per_identity = kv.get("observations_per_identity", observations_per_identity);
    image_size = kv.get("image_size", image_size);
    perturbation = parse_kind(kv.get("perturbation", std::string(kind_name(perturbation))));
    ranges.alpha = kv.get("alpha", ranges.alpha);
    ranges.scale_min = kv.get("scale_min", ranges.scale_min);
    ranges.scale_max = kv.get("scale_max", ranges.scale_max);
    ranges.shift = kv.get("shift", ranges.shift);
    ranges.shear = kv.get("shear", ranges.shear);
    ranges.perspective = kv.get("perspective", ranges.perspective);
    noise = kv.get("noise", noise);
    test_fraction = kv.get("test_fraction", test_fraction);
    pairs = kv.get("pairs", pairs);
    glyph.unique_primitives = kv.get("unique_primitives", glyph.unique_primitives);
    glyph.sigma_min = kv.get("glyph_sigma_min", glyph.sigma_min);
    glyph.sigma_max = kv.get("glyph_sigma_max", glyph.sigma_max);
  }
};

struct DatasetSplit {
  DatasetOptions options;
  std::vector<Identity> identities;
  std::vector<Observation> train;  // labels 0 .. train_classes - 1
  std::vector<Observation> test;   // held-out identities only
  std::vector<VerificationPair> pairs;
  int train_classes = 0;
};

inline Observation make_observation(const DatasetOptions& opt, const Identity& ident, int obs_id) {
  std::mt19937_64 rng(derive_seed(opt.seed, 0x7a11ULL, static_cast<std::uint64_t>(obs_id)));
  const auto size = static_cast<std::size_t>(opt.image_size);
  Observation o;
  o.obs_id = obs_id;
  o.label = ident.id;
  o.truth = sample_perturbation(opt.perturbation, opt.ranges, rng, size);
  o.noise_level = opt.noise;
  o.image = warp_canonical(ident.canonical, o.truth);
  if (opt.noise > 0.0) {
    o.image += observation_noise(opt.seed, obs_id, size, opt.noise);
    for (auto& v : o.image.storage()) v = std::clamp(v, 0.0, 1.0);
  }
  return o;
}

/// Deterministic in `opt`. The first identities train; the rest form the test split.
inline DatasetSplit generate_dataset(const DatasetOptions& opt) {
  opt.ranges.validate();
  if (opt.glyph.unique_primitives < 0 || !(opt.glyph.sigma_min > 0.0) || opt.glyph.sigma_max < opt.glyph.sigma_min) {
    throw InputError("glyph options need unique_primitives >= 0 and 0 < sigma_min <= sigma_max");
  }
  if (opt.identities < 2 || opt.observations_per_identity < 2 || opt.image_size < 2) {
    throw InputError("dataset needs >= 2 identities, >= 2 observations each and image_size >= 2");
  }
  if (opt.test_fraction <= 0.0 || opt.test_fraction >= 1.0) throw InputError("test_fraction must lie in (0, 1)");
  if (opt.pairs < 0 || opt.pairs % 2 != 0) throw InputError("pair count must be even");
  DatasetSplit split;
  split.options = opt;
  const int test_ids = std::max(2, static_cast<int>(std::lround(opt.identities * opt.test_fraction)));
  split.train_classes = opt.identities - test_ids;
  if (split.train_classes < 2) throw InputError("too few training identities");
  const auto size = static_cast<std::size_t>(opt.image_size);
  for (int id = 0; id < opt.identities; ++id) {
    split.identities.push_back(make_identity(opt.seed, id, size, opt.glyph));
    for (int k = 0; k < opt.observations_per_identity; ++k) {
      Observation o = make_observation(opt, split.identities.back(), id * opt.observations_per_identity + k);
      (id < split.train_classes ? split.train : split.test).push_back(std::move(o));
    }
  }
  std::mt19937_64 rng(derive_seed(opt.seed, 0x9a125ULL));
  const auto per = static_cast<std::size_t>(opt.observations_per_identity);
  std::uniform_int_distribution<std::size_t> pick_id(0, static_cast<std::size_t>(test_ids - 1));
  std::uniform_int_distribution<std::size_t> pick_obs(0, per - 1);
  for (int k = 0; k < opt.pairs; ++k) {
    VerificationPair p;
    p.same = k % 2 == 0;
    const std::size_t a = pick_id(rng);
    std::size_t b = a;
    if (!p.same)
      while (b == a) b = pick_id(rng);
    const std::size_t oa = pick_obs(rng);
    std::size_t ob = pick_obs(rng);
    if (p.same)
      while (ob == oa) ob = pick_obs(rng);
    p.first = a * per + oa;
    p.second = b * per + ob;
    split.pairs.push_back(p);
  }
  return split;
}

/// Appends a horizontally mirrored copy of every training observation.
inline DatasetSplit augment_flip(DatasetSplit split) {
  const std::size_t n = split.train.size();
  split.train.reserve(2 * n);
  int next_id = 0;
  for (const auto& o : split.train) next_id = std::max(next_id, o.obs_id + 1);
  for (const auto& o : split.test) next_id = std::max(next_id, o.obs_id + 1);
  for (std::size_t i = 0; i < n; ++i) {
    Observation m = split.train[i];
    m.obs_id = next_id++;
    m.image = flip_horizontal(m.image);
    m.truth = mirror_transform(m.truth);
    m.mirrored = !m.mirrored;
    split.train.push_back(std::move(m));
  }
  return split;
}

/// Stacks observation images into a (N, 1, S, S) batch.
inline Tensor stack_images(const std::vector<Observation>& obs, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("stack_images: empty selection");
  const Shape& s = obs[indices[0]].image.shape();
  Tensor batch({indices.size(), s[1], s[2], s[3]});
  const std::size_t stride = obs[indices[0]].image.size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& img = obs[indices[k]].image;
    std::copy(img.storage().begin(), img.storage().end(), batch.data() + k * stride);
  }
  return batch;
}

}  // namespace stnalign

#endif  // STNALIGN_SYNTH_DATA_HPP_
