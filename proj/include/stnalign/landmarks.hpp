#ifndef STNALIGN_LANDMARKS_HPP_
#define STNALIGN_LANDMARKS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stnalign/seeding.hpp"
#include "stnalign/synth_data.hpp"
#include "stnalign/transforms.hpp"

namespace stnalign {

/// `normalized_image` is the aligned (warp target) frame; `original` is the input image's frame.
/// Both use normalized [-1, 1] coordinates.
enum class LandmarkFrame { original, normalized_image };

inline const char* frame_name(LandmarkFrame f) {
  return f == LandmarkFrame::original ? "original" : "normalized_image";
}

inline LandmarkFrame parse_frame(const std::string& s) {
  if (s == "original") return LandmarkFrame::original;
  if (s == "normalized_image" || s == "normalized-image") return LandmarkFrame::normalized_image;
  throw InputError("unknown landmark frame '" + s + "'");
}

struct LandmarkSet {
  std::vector<Point2> points;
  LandmarkFrame frame = LandmarkFrame::original;
  std::optional<double> reference_distance;

  void validate() const {
    if (reference_distance && !(*reference_distance > 0.0)) throw InputError("reference distance must be positive");
  }
};

/// Maps aligned-frame points back to the original frame. The grid map of `params`
/// runs from target (aligned) to source (original), which is exactly this direction.
inline LandmarkSet relocate(const LandmarkSet& aligned, const TransformParams& params,
                            double floor = kDefaultDivisorFloor) {
  if (aligned.frame != LandmarkFrame::normalized_image) throw InputError("relocate expects aligned-frame points");
  LandmarkSet out;
  out.frame = LandmarkFrame::original;
  out.points.reserve(aligned.points.size());
  for (const auto& p : aligned.points) out.points.push_back(apply_point(params, p, floor));
  return out;
}

/// Mean Euclidean distance between corresponding points.
inline double mean_point_error(const std::vector<Point2>& a, const std::vector<Point2>& b) {
  if (a.size() != b.size() || a.empty()) throw InputError("landmark sets must be non-empty and equal length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::hypot(a[i].x - b[i].x, a[i].y - b[i].y);
  return s / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Cumulative error distribution
// ---------------------------------------------------------------------------

struct CedCurve {
  std::vector<double> errors;     // normalized, ascending
  std::vector<double> fractions;  // fraction of images with error <= errors[k]

  /// Fraction of images whose normalized error is <= level.
  double fraction_at(double level) const {
    if (errors.empty()) return 0.0;
    const auto it = std::upper_bound(errors.begin(), errors.end(), level);
    return static_cast<double>(it - errors.begin()) / static_cast<double>(errors.size());
  }
};

inline CedCurve ced_curve(const std::vector<double>& errors, const std::vector<double>& normalizers) {
  if (errors.size() != normalizers.size()) throw InputError("ced_curve: errors and normalizers differ in length");
  if (errors.empty()) throw InputError("ced_curve: no errors");
  CedCurve c;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!(normalizers[i] > 0.0)) throw InputError("ced_curve: normalizers must be positive");
    c.errors.push_back(errors[i] / normalizers[i]);
  }
  std::sort(c.errors.begin(), c.errors.end());
  const auto n = static_cast<double>(c.errors.size());
  for (std::size_t k = 0; k < c.errors.size(); ++k) {
    const auto last = std::upper_bound(c.errors.begin(), c.errors.end(), c.errors[k]);
    c.fractions.push_back(static_cast<double>(last - c.errors.begin()) / n);
  }
  return c;
}

/// Share of error levels (every error observed in either curve) at which `a` lies on or above `b`.
inline double ced_dominance(const CedCurve& a, const CedCurve& b) {
  std::vector<double> levels = a.errors;
  levels.insert(levels.end(), b.errors.begin(), b.errors.end());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  if (levels.empty()) return 1.0;
  std::size_t ok = 0;
  for (double l : levels) ok += a.fraction_at(l) >= b.fraction_at(l);
  return static_cast<double>(ok) / static_cast<double>(levels.size());
}

/// Two columns, "error fraction", one line per curve point.
inline std::string format_ced(const CedCurve& c) {
  std::string out = "# error fraction\n";
  char buf[96];
  for (std::size_t k = 0; k < c.errors.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g\n", c.errors[k], c.fractions[k]);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV landmark files
// ---------------------------------------------------------------------------
//
//   frame=<original|normalized_image>
//   image_id,x,y
//   <id>,<x>,<y>          one line per point, points of an image in order

inline std::string format_landmark_csv(const std::map<int, LandmarkSet>& sets) {
  if (sets.empty()) throw InputError("no landmark sets to write");
  const LandmarkFrame frame = sets.begin()->second.frame;
  std::string out = std::string("frame=") + frame_name(frame) + "\nimage_id,x,y\n";
  char buf[96];
  for (const auto& [id, set] : sets) {
    if (set.frame != frame) throw InputError("landmark sets in one file must share a frame");
    for (const auto& p : set.points) {
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", id, p.x, p.y);
      out += buf;
    }
  }
  return out;
}

inline std::map<int, LandmarkSet> parse_landmark_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::optional<LandmarkFrame> frame;
  std::map<int, LandmarkSet> sets;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!frame) {
      if (line.rfind("frame=", 0) != 0) throw InputError("landmark CSV must start with a frame= line");
      frame = parse_frame(line.substr(6));
      continue;
    }
    if (line == "image_id,x,y") continue;
    int id = 0;
    double x = 0.0, y = 0.0;
    char c1 = 0, c2 = 0;
    std::istringstream ls(line);
    if (!(ls >> id >> c1 >> x >> c2 >> y) || c1 != ',' || c2 != ',') {
      throw InputError("landmark CSV line " + std::to_string(lineno) + " is not image_id,x,y");
    }
    auto& set = sets[id];
    set.frame = *frame;
    set.points.push_back({x, y});
  }
  if (!frame) throw InputError("landmark CSV has no frame line");
  return sets;
}

// ---------------------------------------------------------------------------
// Synthetic detector and the relocation experiment
// ---------------------------------------------------------------------------

/**
 * Stand-in point locator: true landmarks, pulled toward the upright template by
 * `pose_bias` (so the error grows with how far the pose departs from upright),
 * plus isotropic Gaussian noise of std `noise`, all in the frame it runs in.
 */
struct DetectorModel {
  double noise = 0.01;
  double pose_bias = 0.5;
};

template <typename Rng>
std::vector<Point2> synthetic_detect(const std::vector<Point2>& truth, const std::vector<Point2>& upright,
                                     const DetectorModel& model, Rng& rng) {
  if (truth.size() != upright.size()) throw InputError("detector template size mismatch");
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Point2> out(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    out[i].x = truth[i].x + model.pose_bias * (upright[i].x - truth[i].x);
    out[i].y = truth[i].y + model.pose_bias * (upright[i].y - truth[i].y);
    if (model.noise > 0.0) {
      out[i].x += model.noise * g(rng);
      out[i].y += model.noise * g(rng);
    }
  }
  return out;
}

/// Landmarks as they appear in an observation: obs(p) = canonical(T p), so a
/// canonical point c sits at T^-1 c.
inline std::vector<Point2> observed_landmarks(const Observation& o, const std::vector<Point2>& canonical) {
  const TransformParams inv = invert(o.truth);
  std::vector<Point2> out;
  for (const auto& c : canonical) out.push_back(apply_point(inv, c));
  return out;
}

/// Frobenius distance of the truth matrix from the identity.
inline double pose_magnitude(const TransformParams& t) {
  const Matrix3 m = to_matrix(t);
  double s = 0.0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double d = m[r][c] - (r == c ? 1.0 : 0.0);
      s += d * d;
    }
  return std::sqrt(s);
}

struct RelocationTrial {
  double direct_error = 0.0;     // unnormalized, original frame
  double relocated_error = 0.0;
  double normalizer = 0.0;       // inter-ocular distance in the original frame
  double pose = 0.0;
};

struct RelocationExperiment {
  std::vector<RelocationTrial> trials;
  CedCurve direct;
  CedCurve relocated;
  double mean_direct = 0.0;     // mean normalized error
  double mean_relocated = 0.0;
  double dominance = 0.0;       // share of levels where relocated CED >= direct CED
};

/**
 * For each observation: detect directly in the observation frame, and detect in the
 * frame aligned by `aligner(o)` then relocate. Errors are normalized by the
 * distance between landmarks 0 and 1 (the eye centers).
 */
inline RelocationExperiment relocation_experiment(const std::vector<Observation>& obs,
                                                  const std::function<TransformParams(const Observation&)>& aligner,
                                                  const DetectorModel& model, std::uint64_t seed,
                                                  const std::vector<Point2>& canonical = canonical_landmarks()) {
  if (obs.empty()) throw InputError("relocation experiment needs observations");
  RelocationExperiment ex;
  std::vector<double> direct, relocated, norms;
  for (const auto& o : obs) {
    std::mt19937_64 rng(derive_seed(seed, 0x1a4dULL, static_cast<std::uint64_t>(o.obs_id)));
    const std::vector<Point2> truth = observed_landmarks(o, canonical);
    RelocationTrial t;
    t.pose = pose_magnitude(o.truth);
    t.normalizer = std::hypot(truth[1].x - truth[0].x, truth[1].y - truth[0].y);
    t.direct_error = mean_point_error(synthetic_detect(truth, canonical, model, rng), truth);

    const TransformParams a = aligner(o);
    const TransformParams a_inv = invert(a);
    LandmarkSet aligned_truth{{}, LandmarkFrame::normalized_image, std::nullopt};
    for (const auto& p : truth) aligned_truth.points.push_back(apply_point(a_inv, p));
    LandmarkSet found{synthetic_detect(aligned_truth.points, canonical, model, rng), LandmarkFrame::normalized_image,
                      std::nullopt};
    t.relocated_error = mean_point_error(relocate(found, a).points, truth);

    direct.push_back(t.direct_error);
    relocated.push_back(t.relocated_error);
    norms.push_back(t.normalizer);
    ex.mean_direct += t.direct_error / t.normalizer;
    ex.mean_relocated += t.relocated_error / t.normalizer;
    ex.trials.push_back(t);
  }
  ex.mean_direct /= static_cast<double>(obs.size());
  ex.mean_relocated /= static_cast<double>(obs.size());
  ex.direct = ced_curve(direct, norms);
  ex.relocated = ced_curve(relocated, norms);
  ex.dominance = ced_dominance(ex.relocated, ex.direct);
  return ex;
}

}  // namespace stnalign

#endif  // STNALIGN_LANDMARKS_HPP_
