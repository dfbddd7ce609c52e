#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace stnalign;

namespace {

constexpr TransformKind kKinds[] = {TransformKind::identity, TransformKind::similarity, TransformKind::affine,
                                    TransformKind::projective};

oracle::Mat3 as_oracle(const Matrix3& m) {
  oracle::Mat3 o{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) o[r][c] = m[r][c];
  return o;
}

TransformParams random_transform(TransformKind kind, std::mt19937_64& rng) {
  return sample_perturbation(kind, PerturbationRanges{}, rng, 16);
}

}  // namespace

TEST(Transforms, ParameterCountsPerKind) {
  EXPECT_EQ(param_count(TransformKind::identity), 0u);
  EXPECT_EQ(param_count(TransformKind::similarity), 4u);
  EXPECT_EQ(param_count(TransformKind::affine), 6u);
  EXPECT_EQ(param_count(TransformKind::projective), 8u);
  for (auto k : kKinds) EXPECT_EQ(parse_kind(kind_name(k)), k);
  EXPECT_THROW(parse_kind("thin-plate"), InputError);
}

TEST(Transforms, IdentityParamsMapEveryPointToItself) {
  for (auto k : kKinds) {
    const TransformParams id = identity_params(k);
    EXPECT_EQ(kind_of(id), k);
    for (double x : {-1.0, -0.3, 0.0, 0.7, 1.0}) {
      const Point2 p = apply_point(id, {x, 0.5 * x - 0.2});
      EXPECT_EQ(p.x, x);
      EXPECT_EQ(p.y, 0.5 * x - 0.2);
    }
  }
}

TEST(Transforms, SimilarityMatchesRotationScaleTranslation) {
  const SimilarityTransform s{std::numbers::pi / 2, 2.0, 0.1, -0.2};
  const Point2 p = apply_point(s, {1.0, 0.0});
  EXPECT_NEAR(p.x, 0.1, 1e-15);
  EXPECT_NEAR(p.y, 1.8, 1e-15);
}

TEST(Transforms, ProjectiveDividesByTheHomogeneousCoordinate) {
  const ProjectiveTransform h{1, 0, 0, 0, 1, 0, 0.5, 0};
  const Point2 p = apply_point(h, {1.0, 1.0});
  EXPECT_NEAR(p.x, 1.0 / 1.5, 1e-15);
  EXPECT_NEAR(p.y, 1.0 / 1.5, 1e-15);
  EXPECT_THROW(apply_point(h, {-2.0, 0.0}), DegeneracyError);
}

TEST(Transforms, InverseAgreesWithGaussJordan) {
  std::mt19937_64 rng(21);
  for (auto k : kKinds) {
    for (int trial = 0; trial < 50; ++trial) {
      const TransformParams t = random_transform(k, rng);
      const Matrix3 inv = to_matrix(invert(t));
      const oracle::Mat3 want = oracle::inverse(as_oracle(to_matrix(t)));
      const double scale = want[2][2];  // homographies are defined up to scale
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(inv[r][c], want[r][c] / scale, 1e-12) << kind_name(k);
      EXPECT_EQ(kind_of(invert(t)), k);
    }
  }
}

TEST(Transforms, ComposingWithTheInverseGivesIdentity) {
  std::mt19937_64 rng(22);
  for (auto k : kKinds) {
    const TransformParams t = random_transform(k, rng);
    const oracle::Mat3 prod = oracle::multiply(as_oracle(to_matrix(t)), as_oracle(to_matrix(invert(t))));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(prod[r][c] / prod[2][2], r == c ? 1.0 : 0.0, 1e-12);
    const Point2 q{0.3, -0.4};
    const Point2 back = apply_point(invert(t), apply_point(t, q));
    EXPECT_NEAR(back.x, q.x, 1e-12);
    EXPECT_NEAR(back.y, q.y, 1e-12);
  }
}

TEST(Transforms, SingularTransformsAreRejected) {
  EXPECT_THROW(invert(SimilarityTransform{0.3, 0.0, 0, 0}), DegeneracyError);
  EXPECT_THROW(invert(AffineTransform{1, 2, 0, 2, 4, 0}), DegeneracyError);
  EXPECT_THROW(invert(ProjectiveTransform{1, 1, 0, 1, 1, 0, 0, 0}), DegeneracyError);
}

TEST(Transforms, PromotePreservesTheMap) {
  std::mt19937_64 rng(23);
  const TransformParams s = random_transform(TransformKind::similarity, rng);
  for (auto target : {TransformKind::affine, TransformKind::projective}) {
    const TransformParams w = promote(s, target);
    EXPECT_EQ(kind_of(w), target);
    const Point2 a = apply_point(s, {0.2, 0.9}), b = apply_point(w, {0.2, 0.9});
    EXPECT_NEAR(a.x, b.x, 1e-15);
    EXPECT_NEAR(a.y, b.y, 1e-15);
  }
  EXPECT_THROW(promote(AffineTransform{}, TransformKind::similarity), InputError);
}

TEST(Transforms, MirrorTransformConjugatesByTheFlip) {
  // mirrored observation at p equals observation at F p; so its truth is F T F.
  std::mt19937_64 rng(24);
  for (auto k : kKinds) {
    const TransformParams t = random_transform(k, rng);
    const TransformParams m = mirror_transform(t);
    EXPECT_EQ(kind_of(m), k);
    const Point2 p{0.31, -0.52};
    const Point2 direct = apply_point(m, p);
    const Point2 via = apply_point(t, {-p.x, p.y});
    EXPECT_NEAR(direct.x, -via.x, 1e-14);
    EXPECT_NEAR(direct.y, via.y, 1e-14);
  }
}

TEST(Grid, TargetCoordinatesSpanMinusOneToOne) {
  const SamplingGrid g = generate_grid(IdentityTransform{}, 3, 5);
  EXPECT_EQ(g.size(), 15u);
  EXPECT_EQ(g.xs[0], -1.0);
  EXPECT_EQ(g.xs[4], 1.0);
  EXPECT_EQ(g.ys[14], 1.0);
  EXPECT_EQ(g.xs[2], 0.0);
  EXPECT_THROW(generate_grid(IdentityTransform{}, 0, 3), DimensionError);
}

TEST(Grid, ProjectiveDegeneracyReportsThePixel) {
  const ProjectiveTransform h{1, 0, 0, 0, 1, 0, 1.0, 0.0};  // z = x + 1 vanishes at x = -1
  try {
    generate_grid(h, 4, 4);
    FAIL();
  } catch (const DegeneracyError& e) {
    EXPECT_EQ(e.pixel(), 0);
  }
  EXPECT_LT(min_abs_divisor(h, 4, 4), kDefaultDivisorFloor);
}

TEST(Jacobian, FiniteDifferenceSuitePasses) {
  const GradCheckReport rep = run_gradcheck("transforms", 25, 7);
  for (const auto& op : rep.ops) EXPECT_TRUE(op.pass()) << op.op << " worst " << op.worst;
}

TEST(Jacobian, SimilarityClosedFormOnOnePixel) {
  // one output pixel at target (1, 1): x_s = lambda (cos a - sin a) + t1
  const SimilarityTransform s{0.4, 1.3, 0.1, 0.2};
  const SamplingGrid g = generate_grid(s, 1, 1);  // single pixel at (0, 0)
  const std::vector<double> gx{1.0}, gy{0.0};
  const ParamGrad pg = param_jacobian(s, g, gx, gy);
  // at target (0, 0), x_s = t1 so only d/dt1 is nonzero
  EXPECT_EQ(pg.values[2], 1.0);
  EXPECT_NEAR(pg.values[0], 0.0, 1e-15);
  EXPECT_NEAR(pg.values[1], 0.0, 1e-15);
  EXPECT_THROW(param_jacobian(AffineTransform{}, g, gx, gy), InputError);
}

TEST(Records, RoundTripBitExactly) {
  std::mt19937_64 rng(25);
  for (auto k : kKinds) {
    const TransformParams t = random_transform(k, rng);
    for (const std::string& text : {to_record(t), to_inline_record(t)}) {
      const TransformParams back = parse_record(text);
      ASSERT_EQ(kind_of(back), k);
      EXPECT_EQ(to_vector(back), to_vector(t));
    }
  }
}

TEST(Records, RejectMalformedInput) {
  EXPECT_THROW(parse_record("alpha=1\n"), InputError);
  EXPECT_THROW(parse_record("kind=similarity\nalpha=1\nlambda=1\nt1=0\n"), InputError);
  EXPECT_THROW(parse_record("kind=similarity;alpha=x;lambda=1;t1=0;t2=0"), InputError);
  EXPECT_THROW(parse_record("kind=affine;a11=1;a11=1;a13=0;a21=0;a22=1;a23=0"), InputError);
  EXPECT_NO_THROW(parse_record("# comment\nkind=identity\n"));
}
