#ifndef STNALIGN_TRANSFORMS_HPP_
#define STNALIGN_TRANSFORMS_HPP_

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "stnalign/tensor.hpp"

namespace stnalign {

/// A transform whose projective divisor or determinant is (near) zero.
class DegeneracyError : public std::runtime_error {
 public:
  explicit DegeneracyError(const std::string& what, long pixel = -1)
      : std::runtime_error(what), pixel_(pixel) {}
  /// Flat index of the offending output pixel, or -1.
  long pixel() const { return pixel_; }

 private:
  long pixel_;
};

inline constexpr double kDefaultDivisorFloor = 1e-6;
inline constexpr double kSingularDeterminant = 1e-9;

enum class TransformKind { identity, similarity, affine, projective };

inline const char* kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::identity: return "identity";
    case TransformKind::similarity: return "similarity";
    case TransformKind::affine: return "affine";
    case TransformKind::projective: return "projective";
  }
  return "?";
}

inline TransformKind parse_kind(const std::string& s) {
  if (s == "identity" || s == "identical") return TransformKind::identity;
  if (s == "similarity") return TransformKind::similarity;
  if (s == "affine") return TransformKind::affine;
  if (s == "projective") return TransformKind::projective;
  throw InputError("unknown transform kind '" + s + "'");
}

/// Number of regressed parameters: 0, 4, 6 or 8.
inline std::size_t param_count(TransformKind k) {
  switch (k) {
    case TransformKind::identity: return 0;
    case TransformKind::similarity: return 4;
    case TransformKind::affine: return 6;
    case TransformKind::projective: return 8;
  }
  return 0;
}

struct IdentityTransform {};

/// Non-reflective similarity: rotation alpha (radians), scale lambda > 0, translation (t1, t2).
struct SimilarityTransform {
  double alpha = 0.0;
  double lambda = 1.0;
  double t1 = 0.0;
  double t2 = 0.0;
};

/// x_s = a11 x + a12 y + a13, y_s = a21 x + a22 y + a23.
struct AffineTransform {
  double a11 = 1.0, a12 = 0.0, a13 = 0.0;
  double a21 = 0.0, a22 = 1.0, a23 = 0.0;
};

/// Homography [[A B C] [D E F] [G H 1]] with divisor z = G x + H y + 1.
struct ProjectiveTransform {
  double a = 1.0, b = 0.0, c = 0.0;
  double d = 0.0, e = 1.0, f = 0.0;
  double g = 0.0, h = 0.0;
};

using TransformParams = std::variant<IdentityTransform, SimilarityTransform, AffineTransform, ProjectiveTransform>;

inline TransformKind kind_of(const TransformParams& p) { return static_cast<TransformKind>(p.index()); }

inline TransformParams identity_params(TransformKind k) {
  switch (k) {
    case TransformKind::identity: return IdentityTransform{};
    case TransformKind::similarity: return SimilarityTransform{};
    case TransformKind::affine: return AffineTransform{};
    case TransformKind::projective: return ProjectiveTransform{};
  }
  return IdentityTransform{};
}

/// Flat parameter vector in regression order (alpha, lambda, t1, t2 / a11..a23 / A..H).
inline std::vector<double> to_vector(const TransformParams& p) {
  return std::visit(
      [](const auto& t) -> std::vector<double> {
        using P = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<P, IdentityTransform>) return {};
        else if constexpr (std::is_same_v<P, SimilarityTransform>) return {t.alpha, t.lambda, t.t1, t.t2};
        else if constexpr (std::is_same_v<P, AffineTransform>) return {t.a11, t.a12, t.a13, t.a21, t.a22, t.a23};
        else return {t.a, t.b, t.c, t.d, t.e, t.f, t.g, t.h};
      },
      p);
}

inline TransformParams from_vector(TransformKind k, std::span<const double> v) {
  if (v.size() != param_count(k)) {
    throw DimensionError(std::string(kind_name(k)) + " transform needs " + std::to_string(param_count(k)) +
                         " parameters, got " + std::to_string(v.size()));
  }
  switch (k) {
    case TransformKind::identity: return IdentityTransform{};
    case TransformKind::similarity: return SimilarityTransform{v[0], v[1], v[2], v[3]};
    case TransformKind::affine: return AffineTransform{v[0], v[1], v[2], v[3], v[4], v[5]};
    case TransformKind::projective: return ProjectiveTransform{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
  }
  return IdentityTransform{};
}

using Matrix3 = std::array<std::array<double, 3>, 3>;

/// Homogeneous 3x3 matrix of the target -> source map.
inline Matrix3 to_matrix(const TransformParams& p) {
  return std::visit(
      [](const auto& t) -> Matrix3 {
        using P = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<P, IdentityTransform>) {
          return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
        } else if constexpr (std::is_same_v<P, SimilarityTransform>) {
          const double c = t.lambda * std::cos(t.alpha), s = t.lambda * std::sin(t.alpha);
          return {{{c, -s, t.t1}, {s, c, t.t2}, {0, 0, 1}}};
        } else if constexpr (std::is_same_v<P, AffineTransform>) {
          return {{{t.a11, t.a12, t.a13}, {t.a21, t.a22, t.a23}, {0, 0, 1}}};
        } else {
          return {{{t.a, t.b, t.c}, {t.d, t.e, t.f}, {t.g, t.h, 1}}};
        }
      },
      p);
}

/// Re-tag `p` as the wider kind `target` (identity < similarity < affine < projective).
inline TransformParams promote(const TransformParams& p, TransformKind target) {
  const TransformKind from = kind_of(p);
  if (from == target) return p;
  if (static_cast<int>(target) < static_cast<int>(from)) {
    throw InputError(std::string("cannot narrow ") + kind_name(from) + " to " + kind_name(target));
  }
  if (target == TransformKind::similarity) return SimilarityTransform{};
  const Matrix3 m = to_matrix(p);
  if (target == TransformKind::affine) return AffineTransform{m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]};
  return ProjectiveTransform{m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1]};
}

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Maps one normalized target point to its source point.
inline Point2 apply_point(const TransformParams& params, Point2 target, double divisor_floor = kDefaultDivisorFloor) {
  return std::visit(
      [&](const auto& t) -> Point2 {
        using P = std::decay_t<decltype(t)>;
        const double x = target.x, y = target.y;
        if constexpr (std::is_same_v<P, IdentityTransform>) {
          return target;
        } else if constexpr (std::is_same_v<P, SimilarityTransform>) {
          const double c = t.lambda * std::cos(t.alpha), s = t.lambda * std::sin(t.alpha);
          return {c * x - s * y + t.t1, s * x + c * y + t.t2};
        } else if constexpr (std::is_same_v<P, AffineTransform>) {
          return {t.a11 * x + t.a12 * y + t.a13, t.a21 * x + t.a22 * y + t.a23};
        } else {
          const double z = t.g * x + t.h * y + 1.0;
          if (!(std::abs(z) >= divisor_floor)) {
            throw DegeneracyError("projective divisor " + std::to_string(z) + " below floor");
          }
          return {(t.a * x + t.b * y + t.c) / z, (t.d * x + t.e * y + t.f) / z};
        }
      },
      params);
}

/// Normalized coordinate of pixel index i on an axis with n samples: -1 .. 1.
inline double normalized_coord(std::size_t i, std::size_t n) {
  return n > 1 ? -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
}

/**
 * Source coordinates for every output pixel, in normalized [-1, 1] space.
 * Row-major over (out_h, out_w); target coordinates are implied by position.
 */
struct SamplingGrid {
  TransformKind kind = TransformKind::identity;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::vector<double> xs, ys, zs;

  std::size_t size() const { return out_h * out_w; }
  double target_x(std::size_t i) const { return normalized_coord(i % out_w, out_w); }
  double target_y(std::size_t i) const { return normalized_coord(i / out_w, out_h); }
};

/// Smallest |z_s| over the grid; 1 for non-projective transforms.
inline double min_abs_divisor(const TransformParams& params, std::size_t out_h, std::size_t out_w,
                              std::size_t* where = nullptr) {
  const auto* p = std::get_if<ProjectiveTransform>(&params);
  if (!p) return 1.0;
  double best = INFINITY;
  for (std::size_t i = 0; i < out_h * out_w; ++i) {
    const double z = p->g * normalized_coord(i % out_w, out_w) + p->h * normalized_coord(i / out_w, out_h) + 1.0;
    if (!(std::abs(z) >= best)) {
      best = std::abs(z);
      if (where) *where = i;
    }
  }
  return best;
}

inline SamplingGrid generate_grid(const TransformParams& params, std::size_t out_h, std::size_t out_w,
                                  double divisor_floor = kDefaultDivisorFloor) {
  if (out_h == 0 || out_w == 0) throw DimensionError("generate_grid: output extents must be >= 1");
  SamplingGrid grid;
  grid.kind = kind_of(params);
  grid.out_h = out_h;
  grid.out_w = out_w;
  const std::size_t n = out_h * out_w;
  grid.xs.resize(n);
  grid.ys.resize(n);
  grid.zs.assign(n, 1.0);
  std::visit(
      [&](const auto& t) {
        using P = std::decay_t<decltype(t)>;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = grid.target_x(i), y = grid.target_y(i);
          if constexpr (std::is_same_v<P, IdentityTransform>) {
            grid.xs[i] = x;
            grid.ys[i] = y;
          } else if constexpr (std::is_same_v<P, SimilarityTransform>) {
            const double c = t.lambda * std::cos(t.alpha), s = t.lambda * std::sin(t.alpha);
            grid.xs[i] = c * x - s * y + t.t1;
            grid.ys[i] = s * x + c * y + t.t2;
          } else if constexpr (std::is_same_v<P, AffineTransform>) {
            grid.xs[i] = t.a11 * x + t.a12 * y + t.a13;
            grid.ys[i] = t.a21 * x + t.a22 * y + t.a23;
          } else {
            const double z = t.g * x + t.h * y + 1.0;
            if (!(std::abs(z) >= divisor_floor)) {
              throw DegeneracyError("projective divisor " + std::to_string(z) + " below floor at pixel " +
                                        std::to_string(i),
                                    static_cast<long>(i));
            }
            grid.zs[i] = z;
            grid.xs[i] = (t.a * x + t.b * y + t.c) / z;
            grid.ys[i] = (t.d * x + t.e * y + t.f) / z;
          }
        }
      },
      params);
  return grid;
}

/// One gradient per transform parameter, in to_vector() order.
struct ParamGrad {
  TransformKind kind = TransformKind::identity;
  std::vector<double> values;
};

/**
 * Chain rule from per-pixel source-coordinate gradients to transform
 * parameters, summed over the grid. Similarity and projective follow the
 * closed forms in terms of (x_s, y_s, z_s); affine is the z_s = 1 case.
 */
inline ParamGrad param_jacobian(const TransformParams& params, const SamplingGrid& grid,
                                std::span<const double> dl_dxs, std::span<const double> dl_dys) {
  if (grid.kind != kind_of(params)) {
    throw InputError(std::string("param_jacobian: grid was generated for ") + kind_name(grid.kind) +
                     ", params are " + kind_name(kind_of(params)));
  }
  if (dl_dxs.size() != grid.size() || dl_dys.size() != grid.size()) {
    throw DimensionError("param_jacobian: gradient arrays must match grid size");
  }
  ParamGrad out{grid.kind, std::vector<double>(param_count(grid.kind), 0.0)};
  auto& g = out.values;
  std::visit(
      [&](const auto& t) {
        using P = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<P, IdentityTransform>) {
          return;
        } else if constexpr (std::is_same_v<P, SimilarityTransform>) {
          const double ca = std::cos(t.alpha), sa = std::sin(t.alpha);
          for (std::size_t i = 0; i < grid.size(); ++i) {
            const double x = grid.target_x(i), y = grid.target_y(i);
            const double gx = dl_dxs[i], gy = dl_dys[i];
            g[0] += gx * (t.t2 - grid.ys[i]) + gy * (grid.xs[i] - t.t1);
            g[1] += gx * (x * ca - y * sa) + gy * (x * sa + y * ca);
            g[2] += gx;
            g[3] += gy;
          }
        } else if constexpr (std::is_same_v<P, AffineTransform>) {
          for (std::size_t i = 0; i < grid.size(); ++i) {
            const double x = grid.target_x(i), y = grid.target_y(i);
            const double gx = dl_dxs[i], gy = dl_dys[i];
            g[0] += gx * x;
            g[1] += gx * y;
            g[2] += gx;
            g[3] += gy * x;
            g[4] += gy * y;
            g[5] += gy;
          }
        } else {
          for (std::size_t i = 0; i < grid.size(); ++i) {
            const double x = grid.target_x(i), y = grid.target_y(i), z = grid.zs[i];
            const double gx = dl_dxs[i] / z, gy = dl_dys[i] / z;
            const double radial = gx * grid.xs[i] + gy * grid.ys[i];
            g[0] += gx * x;
            g[1] += gx * y;
            g[2] += gx;
            g[3] += gy * x;
            g[4] += gy * y;
            g[5] += gy;
            g[6] -= x * radial;
            g[7] -= y * radial;
          }
        }
      },
      params);
  return out;
}

inline double determinant(const Matrix3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

/// Parameters of the inverse map, same kind as the input.
inline TransformParams invert(const TransformParams& params) {
  return std::visit(
      [&](const auto& t) -> TransformParams {
        using P = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<P, IdentityTransform>) {
          return t;
        } else if constexpr (std::is_same_v<P, SimilarityTransform>) {
          if (!(t.lambda * t.lambda > kSingularDeterminant)) throw DegeneracyError("similarity scale is singular");
          const double inv_l = 1.0 / t.lambda, ca = std::cos(t.alpha), sa = std::sin(t.alpha);
          // R(-alpha) / lambda applied to -t
          const double t1 = -inv_l * (ca * t.t1 + sa * t.t2);
          const double t2 = -inv_l * (-sa * t.t1 + ca * t.t2);
          return SimilarityTransform{-t.alpha, inv_l, t1, t2};
        } else if constexpr (std::is_same_v<P, AffineTransform>) {
          const double det = t.a11 * t.a22 - t.a12 * t.a21;
          if (!(std::abs(det) > kSingularDeterminant)) throw DegeneracyError("affine transform is singular");
          const double i11 = t.a22 / det, i12 = -t.a12 / det, i21 = -t.a21 / det, i22 = t.a11 / det;
          return AffineTransform{i11, i12, -(i11 * t.a13 + i12 * t.a23), i21, i22, -(i21 * t.a13 + i22 * t.a23)};
        } else {
          const Matrix3 m = to_matrix(params);
          const double det = determinant(m);
          if (!(std::abs(det) > kSingularDeterminant)) throw DegeneracyError("projective transform is singular");
          Matrix3 adj{};
          for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
              const int r1 = (c + 1) % 3, r2 = (c + 2) % 3, c1 = (r + 1) % 3, c2 = (r + 2) % 3;
              adj[r][c] = m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
            }
          }
          const double corner = adj[2][2];
          if (!(std::abs(corner) > kSingularDeterminant)) {
            throw DegeneracyError("inverse homography cannot be normalized (bottom-right entry is zero)");
          }
          return ProjectiveTransform{adj[0][0] / corner, adj[0][1] / corner, adj[0][2] / corner,
                                     adj[1][0] / corner, adj[1][1] / corner, adj[1][2] / corner,
                                     adj[2][0] / corner, adj[2][1] / corner};
        }
      },
      params);
}

namespace detail {

inline std::vector<std::string> field_names(TransformKind k) {
  switch (k) {
    case TransformKind::identity: return {};
    case TransformKind::similarity: return {"alpha", "lambda", "t1", "t2"};
    case TransformKind::affine: return {"a11", "a12", "a13", "a21", "a22", "a23"};
    case TransformKind::projective: return {"A", "B", "C", "D", "E", "F", "G", "H"};
  }
  return {};
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::pair<std::string, std::string>> record_fields(const TransformParams& p) {
  std::vector<std::pair<std::string, std::string>> fields{{"kind", kind_name(kind_of(p))}};
  const auto names = field_names(kind_of(p));
  const auto values = to_vector(p);
  for (std::size_t i = 0; i < names.size(); ++i) fields.emplace_back(names[i], format_double(values[i]));
  return fields;
}

inline TransformParams parse_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
  if (fields.empty() || fields.front().first != "kind") throw InputError("transform record must start with kind=");
  const TransformKind kind = parse_kind(fields.front().second);
  std::map<std::string, double> values;
  for (std::size_t i = 1; i < fields.size(); ++i) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(fields[i].second, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != fields[i].second.size()) throw InputError("bad numeric field '" + fields[i].first + "'");
    if (!values.emplace(fields[i].first, v).second) throw InputError("duplicate field '" + fields[i].first + "'");
  }
  const auto names = field_names(kind);
  if (values.size() != names.size()) throw InputError(std::string("wrong field count for ") + kind_name(kind));
  std::vector<double> ordered;
  for (const auto& n : names) {
    auto it = values.find(n);
    if (it == values.end()) throw InputError("missing field '" + n + "'");
    ordered.push_back(it->second);
  }
  return from_vector(kind, ordered);
}

}  // namespace detail

/// Plain-text record: `kind=<name>` then one `name=value` line per parameter, 17 significant digits.
inline std::string to_record(const TransformParams& p) {
  std::string s;
  for (const auto& [k, v] : detail::record_fields(p)) s += k + "=" + v + "\n";
  return s;
}

/// Single-line form of the record (fields joined by ';') for line-oriented manifests.
inline std::string to_inline_record(const TransformParams& p) {
  std::string s;
  for (const auto& [k, v] : detail::record_fields(p)) s += (s.empty() ? "" : ";") + k + "=" + v;
  return s;
}

/// Parses either form; blank lines and '#' comments are ignored.
inline TransformParams parse_record(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> fields;
  std::string token;
  auto flush = [&] {
    const auto first = token.find_first_not_of(" \t\r");
    if (first == std::string::npos || token[first] == '#') {
      token.clear();
      return;
    }
    const auto last = token.find_last_not_of(" \t\r");
    const std::string t = token.substr(first, last - first + 1);
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InputError("transform record line without '=': " + t);
    fields.emplace_back(t.substr(0, eq), t.substr(eq + 1));
    token.clear();
  };
  for (char ch : text) {
    if (ch == '\n' || ch == ';') flush();
    else token += ch;
  }
  flush();
  return detail::parse_fields(fields);
}

}  // namespace stnalign

#endif  // STNALIGN_TRANSFORMS_HPP_
