#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace stnalign;

namespace {

SamplingGrid random_grid(std::size_t h, std::size_t w, std::mt19937_64& rng, double spread = 1.3) {
  std::uniform_real_distribution<double> u(-spread, spread);
  SamplingGrid g;
  g.kind = TransformKind::affine;
  g.out_h = h;
  g.out_w = w;
  for (std::size_t i = 0; i < h * w; ++i) {
    g.xs.push_back(u(rng));
    g.ys.push_back(u(rng));
    g.zs.push_back(1.0);
  }
  return g;
}

}  // namespace

TEST(Sampler, MatchesTheLiteralDoubleSum) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor img = fixture::random_image(2, 5 + trial % 4, 6 + trial % 3, rng);
    const SamplingGrid g = random_grid(4, 5, rng);
    const Tensor out = bilinear_sample(img, g).image;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < g.size(); ++i)
        EXPECT_NEAR(out[c * g.size() + i], oracle::literal_sample(img, c, g.xs[i], g.ys[i]), 1e-12);
  }
}

TEST(Sampler, IdentityGridReproducesThePixelsExactly) {
  std::mt19937_64 rng(32);
  const Tensor img = fixture::random_image(1, 9, 7, rng);
  const Tensor out = bilinear_sample(img, generate_grid(IdentityTransform{}, 9, 7)).image;
  EXPECT_EQ(out.storage(), img.storage());
}

TEST(Sampler, OutsideTheImageReadsZero) {
  const Tensor img({1, 1, 3, 3}, 1.0);
  SamplingGrid g;
  g.out_h = 1;
  g.out_w = 3;
  g.xs = {-3.0, 1.0 + 2.0 / 2.0 * 0.5, 0.0};  // far left, half a pixel beyond the right edge, center
  g.ys = {0.0, 0.0, 0.0};
  g.zs = {1.0, 1.0, 1.0};
  const Tensor out = bilinear_sample(img, g).image;
  EXPECT_EQ(out[0], 0.0);
  EXPECT_NEAR(out[1], 0.5, 1e-15);
  EXPECT_EQ(out[2], 1.0);
}

TEST(Sampler, PerItemGridsAreUsedPerItem) {
  std::mt19937_64 rng(33);
  Tensor batch({2, 1, 5, 5});
  const Tensor a = fixture::random_image(1, 5, 5, rng), b = fixture::random_image(1, 5, 5, rng);
  std::copy(a.storage().begin(), a.storage().end(), batch.data());
  std::copy(b.storage().begin(), b.storage().end(), batch.data() + 25);
  const std::vector<SamplingGrid> grids{random_grid(3, 3, rng), random_grid(3, 3, rng)};
  const Tensor out = bilinear_sample(batch, grids).image;
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(out[i], oracle::literal_sample(a, 0, grids[0].xs[i], grids[0].ys[i]), 1e-12);
    EXPECT_NEAR(out[9 + i], oracle::literal_sample(b, 0, grids[1].xs[i], grids[1].ys[i]), 1e-12);
  }
  const std::vector<SamplingGrid> three(3, grids[0]);
  EXPECT_THROW(bilinear_sample(batch, three), DimensionError);
}

TEST(Sampler, InputGradientIsTheAdjoint) {
  // V is linear in U: <V(U), W> = <U, dV/dU^T W>.
  std::mt19937_64 rng(34);
  const Tensor img = fixture::random_image(2, 6, 5, rng);
  const SamplingGrid g = random_grid(4, 4, rng);
  const Tensor v = bilinear_sample(img, g).image;
  const Tensor w = fixture::random_image(2, 4, 4, rng);
  const SamplerGrads grads = bilinear_backward(w, img, g);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) lhs += v[i] * w[i];
  for (std::size_t i = 0; i < img.size(); ++i) rhs += img[i] * grads.input[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Sampler, CoordinateGradientsVanishAtExactPixelHits) {
  const Tensor img = fixture::smooth_image(5, 5);
  const SamplingGrid g = generate_grid(IdentityTransform{}, 5, 5);
  const SamplerGrads grads = bilinear_backward(Tensor({1, 1, 5, 5}, 1.0), img, g, false);
  ASSERT_EQ(grads.coords.size(), 1u);
  for (double d : grads.coords[0].dxs) EXPECT_EQ(d, 0.0);
  for (double d : grads.coords[0].dys) EXPECT_EQ(d, 0.0);
}

TEST(Sampler, SignFunctionOfTheKernel) {
  EXPECT_EQ(sg(0.5), 1.0);
  EXPECT_EQ(sg(-0.5), -1.0);
  EXPECT_EQ(sg(0.0), 0.0);
  EXPECT_EQ(sg(1.5), 0.0);
  EXPECT_EQ(sg(-1.0), -1.0);
}

TEST(Sampler, FiniteDifferenceSuitePasses) {
  const GradCheckReport rep = run_gradcheck("sampler", 25, 8);
  for (const auto& op : rep.ops) EXPECT_TRUE(op.pass()) << op.op << " worst " << op.worst;
}

TEST(Resampling, FlipAndDownsample) {
  const Tensor img({1, 1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor f = flip_horizontal(img);
  EXPECT_EQ(f.to_vector(), (std::vector<double>{4, 3, 2, 1, 8, 7, 6, 5}));
  const Tensor d = area_downsample(img, 1, 2);
  EXPECT_EQ(d.to_vector(), (std::vector<double>{3.5, 5.5}));
  EXPECT_THROW(area_downsample(img, 1, 3), DimensionError);
  EXPECT_EQ(area_downsample(img, 2, 4).storage(), img.storage());
}
