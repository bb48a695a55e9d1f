#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "devit/gradcheck.hpp"
#include "devit/ops.hpp"
#include "oracles.hpp"

using namespace devit;

namespace {

constexpr int kSeeds = 20;

void expect_grad(const ScalarClosure& f, const std::vector<Tensor>& in, const char* what, int seed) {
  GradReport r = grad_check(f, in, 1e-4, 1e-3);
  EXPECT_TRUE(r.passed) << what << " seed " << seed << " worst rel error " << r.worst();
}

// values whose magnitude stays clear of zero (kinks of abs/relu)
Tensor away_from_zero(Shape s, std::mt19937_64& rng) {
  Tensor t = Tensor::uniform(std::move(s), rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.data()) v = sign(rng) ? v : -v;
  return t;
}

// normalized grid coordinates whose pixel positions are not near integers
Tensor safe_grid(Shape s, std::size_t H, std::size_t W, std::mt19937_64& rng, double span = 1.3) {
  Tensor g = Tensor::uniform(std::move(s), rng, -span, span);
  for (std::size_t i = 0; i < g.numel(); ++i) {
    const std::size_t n = i % 2 == 0 ? W : H;
    const double px = (g[i] + 1.0) * 0.5 * static_cast<double>(n - 1);
    const double frac = px - std::floor(px);
    if (frac < 0.05 || frac > 0.95) g[i] += 0.2 / static_cast<double>(n - 1);
  }
  return g;
}

Tensor mat(std::initializer_list<double> v, Shape s) { return Tensor(std::move(s), std::vector<double>(v)); }

}  // namespace

// ---------------------------------------------------------------- affine_grid

TEST(AffineGrid, IdentityIsNormalizedLattice) {
  Tensor g = affine_grid(mat({1, 0, 0, 0, 1, 0}, {1, 2, 3}), 4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      EXPECT_DOUBLE_EQ(g.at({0, y, x, 0}), -1.0 + 2.0 * x / 3.0);
      EXPECT_DOUBLE_EQ(g.at({0, y, x, 1}), -1.0 + 2.0 * y / 3.0);
    }
}

TEST(AffineGrid, TranslationShiftsX) {
  Tensor id = affine_grid(mat({1, 0, 0, 0, 1, 0}, {1, 2, 3}), 4, 4);
  Tensor tr = affine_grid(mat({1, 0, 0.5, 0, 1, 0}, {1, 2, 3}), 4, 4);
  for (std::size_t i = 0; i < id.numel(); i += 2) {
    EXPECT_DOUBLE_EQ(tr[i], id[i] + 0.5);
    EXPECT_DOUBLE_EQ(tr[i + 1], id[i + 1]);
  }
}

TEST(AffineGrid, ScaleMapsCornerToTwo) {
  Tensor g = affine_grid(mat({2, 0, 0, 0, 2, 0}, {1, 2, 3}), 4, 4);
  EXPECT_DOUBLE_EQ(g.at({0, 3, 3, 0}), 2.0);
  EXPECT_DOUBLE_EQ(g.at({0, 3, 3, 1}), 2.0);
}

// ---------------------------------------------------------------- sampling

TEST(BilinearSample, IdentityGridIsExact) {
  std::mt19937_64 rng(5);
  Tensor src = Tensor::uniform({3, 5, 7}, rng);
  Tensor grid = reshape(affine_grid(mat({1, 0, 0, 0, 1, 0}, {1, 2, 3}), 5, 7), {5, 7, 2});
  EXPECT_LE(max_abs_diff(bilinear_sample(src, grid), src), 1e-12);
}

TEST(BilinearSample, CenterOfTwoByTwo) {
  Tensor src = mat({1, 2, 3, 4}, {1, 2, 2});
  Tensor out = bilinear_sample(src, mat({0.0, 0.0}, {1, 1, 2}));
  EXPECT_DOUBLE_EQ(out[0], 2.5);
}

TEST(BilinearSample, FarOutsideIsZero) {
  Tensor src = Tensor::full({2, 3, 3}, 7.0);
  Tensor out = bilinear_sample(src, mat({-3.0, -3.0}, {1, 1, 2}));
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
}

TEST(BilinearSample, MatchesDirectInterpolation) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t H = 4, W = 6;
    Tensor src = Tensor::uniform({1, H, W}, rng);
    Tensor grid = Tensor::uniform({3, 3, 2}, rng, -1.4, 1.4);
    Tensor out = bilinear_sample(src, grid);
    for (std::size_t i = 0; i < 9; ++i) {
      const double px = (grid[2 * i] + 1) * 0.5 * (W - 1), py = (grid[2 * i + 1] + 1) * 0.5 * (H - 1);
      EXPECT_NEAR(out[i], oracle::bilinear(src.vec(), H, W, px, py), 1e-12);
    }
  }
}

TEST(BilinearSample, WarpThenInverseRecoversInterior) {
  std::mt19937_64 rng(6);
  const std::size_t H = 16, W = 16;
  // smooth content so that double interpolation stays accurate
  Tensor src({1, 1, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) src[y * W + x] = 0.3 * x + 0.2 * y + 1.0;
  // a small rotation+scale and its exact inverse in normalized coordinates
  const double a = 0.9, b = -0.1, c = 0.05, d = 1.05, tx = 0.03, ty = -0.02;
  const double det = a * d - b * c;
  const double ia = d / det, ib = -b / det, ic = -c / det, id = a / det;
  const double itx = -(ia * tx + ib * ty), ity = -(ic * tx + id * ty);
  Tensor fwd = grid_sample(src, affine_grid(mat({a, b, tx, c, d, ty}, {1, 2, 3}), H, W));
  Tensor back = grid_sample(fwd, affine_grid(mat({ia, ib, itx, ic, id, ity}, {1, 2, 3}), H, W));
  for (std::size_t y = 4; y < H - 4; ++y)
    for (std::size_t x = 4; x < W - 4; ++x) EXPECT_NEAR(back[y * W + x], src[y * W + x], 1e-6);
}

TEST(BilinearSample, GridGradientTakesRightLimitAtIntegers) {
  // sample exactly at pixel 1 of a ramp [0, 10, 30]; right-limit slope is 20
  Tensor src = mat({0, 10, 30}, {1, 1, 3});
  Tensor grid = mat({0.0, 0.0}, {1, 1, 2}).set_requires_grad(true);
  backward(sum(bilinear_sample(src, grid)));
  EXPECT_DOUBLE_EQ(grid.grad()[0], 20.0 * 1.0);  // d px / d gx = (W-1)/2 = 1
}

// ---------------------------------------------------------------- softmax

TEST(Softmax, Examples) {
  Tensor u = softmax(mat({0, 0, 0}, {1, 3}), 1);
  for (double v : u.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  Tensor big = softmax(mat({1000, 1000}, {1, 2}), 1);
  EXPECT_DOUBLE_EQ(big[0], 0.5);
  EXPECT_DOUBLE_EQ(big[1], 0.5);
  Tensor l3 = softmax(mat({0, std::log(3.0)}, {1, 2}), 1);
  EXPECT_NEAR(l3[0], 0.25, 1e-15);
  EXPECT_NEAR(l3[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = Tensor::uniform({4, 7}, rng, -20, 20);
    Tensor s = softmax(x, 1);
    Tensor s2 = softmax(add_scalar(x, 13.5), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double z = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        z += s[r * 7 + c];
        EXPECT_GT(s[r * 7 + c], 0.0);
      }
      EXPECT_NEAR(z, 1.0, 1e-9);
    }
    EXPECT_LE(max_abs_diff(s, s2), 1e-9);
  }
}

TEST(Softmax, AlongLeadingAxis) {
  Tensor s = softmax(mat({0, 1, 0, 1}, {2, 2}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(MaskedSoftmax, EmptyRowIsAnError) {
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 0, 0});
  EXPECT_THROW(masked_softmax_rows(Tensor::zeros({2, 2}), mask), std::invalid_argument);
}

TEST(MaskedSoftmax, ZeroOutsideMask) {
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 0, 1, 1});
  Tensor s = masked_softmax_rows(mat({0, 5, 0, 9, 0, std::log(3.0)}, {2, 3}), mask);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_EQ(s[1], 0.0);
  EXPECT_DOUBLE_EQ(s[2], 0.5);
  EXPECT_EQ(s[3], 0.0);
  EXPECT_NEAR(s[5], 0.75, 1e-15);
}

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(7);
  Tensor x = Tensor::uniform({2, 1, 5, 6}, rng);
  Tensor y = conv2d(x, Tensor::ones({1, 1, 1, 1}), Tensor::zeros({1}), 1, 0);
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(Conv2d, OnesKernelOnConstantSeven) {
  Tensor y = conv2d(Tensor::full({1, 1, 6, 6}, 7.0), Tensor::ones({1, 1, 3, 3}), Tensor(), 1, 1);
  for (std::size_t yy = 1; yy < 5; ++yy)
    for (std::size_t xx = 1; xx < 5; ++xx) EXPECT_DOUBLE_EQ(y.at({0, 0, yy, xx}), 63.0);
  EXPECT_DOUBLE_EQ(y.at({0, 0, 0, 0}), 28.0);  // corner sees 4 pixels
}

TEST(Conv2d, PaperStridesGiveSixtyByOneHundredEight) {
  std::size_t h = 240, w = 432;
  for (std::size_t s : {2, 1, 2, 1}) {
    h = (h + 2 - 3) / s + 1;
    w = (w + 2 - 3) / s + 1;
  }
  EXPECT_EQ(h, 60u);
  EXPECT_EQ(w, 108u);
  Tensor y = conv2d(Tensor::zeros({1, 1, 240, 432}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 120, 216}));
}

TEST(Conv2d, MatchesDirectSummation) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t stride = 1 + seed % 2, pad = seed % 3 == 0 ? 0 : 1;
    Tensor x = Tensor::uniform({2, 3, 7, 6}, rng), w = Tensor::uniform({4, 3, 3, 3}, rng);
    Tensor b = Tensor::uniform({4}, rng);
    std::size_t Ho, Wo;
    auto ref = oracle::conv2d(x.vec(), w.vec(), b.vec(), 2, 3, 7, 6, 4, 3, stride, pad, Ho, Wo);
    Tensor y = conv2d(x, w, b, stride, pad);
    ASSERT_EQ(y.shape(), (Shape{2, 4, Ho, Wo}));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, ErrorNamesAxes) {
  try {
    conv2d(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({2, 5, 3, 3}), Tensor(), 1, 1);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
  }
}

TEST(Conv3d, MatchesPerSliceSummation) {
  std::mt19937_64 rng(8);
  const std::size_t Ci = 2, T = 3, H = 6, W = 6, Co = 2;
  Tensor x = Tensor::uniform({Ci, T, H, W}, rng), w = Tensor::uniform({Co, Ci, 3, 5, 5}, rng);
  Tensor b = Tensor::uniform({Co}, rng);
  Tensor y = conv3d(x, w, b, {1, 2, 2}, {1, 2, 2});
  ASSERT_EQ(y.shape(), (Shape{Co, T, 3, 3}));
  for (std::size_t o = 0; o < Co; ++o)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t yy = 0; yy < 3; ++yy)
        for (std::size_t xx = 0; xx < 3; ++xx) {
          double s = b[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t dt = 0; dt < 3; ++dt)
              for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 5; ++j) {
                  const long tt = static_cast<long>(t + dt) - 1;
                  const long iy = static_cast<long>(yy * 2 + i) - 2, ix = static_cast<long>(xx * 2 + j) - 2;
                  if (tt < 0 || tt >= (long)T || iy < 0 || iy >= (long)H || ix < 0 || ix >= (long)W) continue;
                  s += w[(((o * Ci + c) * 3 + dt) * 5 + i) * 5 + j] * x[((c * T + tt) * H + iy) * W + ix];
                }
          EXPECT_NEAR(y.at({o, t, yy, xx}), s, 1e-12);
        }
}

TEST(Upsample2x, CornersAlignAndLinearRampIsPreserved) {
  Tensor x({1, 1, 2, 3});
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t xx = 0; xx < 3; ++xx) x[y * 3 + xx] = 2.0 * xx + 5.0 * y;
  Tensor u = upsample2x(x);
  ASSERT_EQ(u.shape(), (Shape{1, 1, 4, 6}));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t xx = 0; xx < 6; ++xx)
      EXPECT_NEAR(u[y * 6 + xx], 2.0 * (xx * 2.0 / 5.0) + 5.0 * (y / 3.0), 1e-12);
}

// ---------------------------------------------------------------- spectral norm

TEST(SpectralNormalize, DiagonalMatrix) {
  SpectralNormResult r = spectral_normalize(mat({3, 0, 0, 1}, {2, 2}), 30);
  EXPECT_NEAR(r.sigma, 3.0, 1e-9);
  EXPECT_NEAR(r.weight[0], 1.0, 1e-9);
  EXPECT_NEAR(r.weight[3], 1.0 / 3.0, 1e-9);
  EXPECT_FALSE(r.degenerate);
}

TEST(SpectralNormalize, IdentityAndZero) {
  SpectralNormResult id = spectral_normalize(mat({1, 0, 0, 1}, {2, 2}), 5);
  EXPECT_NEAR(id.weight[0], 1.0, 1e-12);
  EXPECT_NEAR(id.weight[3], 1.0, 1e-12);
  SpectralNormResult z = spectral_normalize(Tensor::zeros({3, 2}), 5);
  EXPECT_TRUE(z.degenerate);
  for (double v : z.weight.data()) EXPECT_EQ(v, 0.0);
}

TEST(SpectralNormalize, GenericMatricesAreUnitNormAndIdempotent) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor w = Tensor::normal({6, 4, 3, 3}, rng);
    SpectralNormResult r = spectral_normalize(w, 200);
    SpectralNormResult check = spectral_normalize(r.weight, 200);
    EXPECT_NEAR(check.sigma, 1.0, 1e-3) << "seed " << seed;
    SpectralNormResult twice = spectral_normalize(r.weight, 200);
    EXPECT_LE(max_abs_diff(twice.weight, r.weight), 1e-3);
  }
}

// ---------------------------------------------------------------- gradients

TEST(Gradients, Elementwise) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor a = Tensor::uniform({3, 4}, rng), b = Tensor::uniform({3, 4}, rng), w = Tensor::uniform({3, 4}, rng);
    auto weighted = [w](const Tensor& t) { return sum(mul(t, w)); };
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(add(x[0], x[1])); }, {a, b}, "add", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(sub(x[0], x[1])); }, {a, b}, "sub", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(mul(x[0], x[1])); }, {a, b}, "mul", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(scale(x[0], -1.7)); }, {a}, "scale", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(add_scalar(x[0], 0.3)); }, {a}, "add_scalar", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(tanh(x[0])); }, {a}, "tanh", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(leaky_relu(x[0], 0.2)); },
                {away_from_zero({3, 4}, rng)}, "leaky_relu", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(relu(x[0])); }, {away_from_zero({3, 4}, rng)},
                "relu", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(abs(x[0])); }, {away_from_zero({3, 4}, rng)},
                "abs", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return weighted(scale_by(x[0], x[1])); },
                {a, Tensor::uniform({1}, rng)}, "scale_by", seed);
  }
}

TEST(Gradients, ReductionsAndLayout) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor a = Tensor::uniform({2, 3, 2, 2}, rng), w24 = Tensor::uniform({2, 3}, rng);
    expect_grad([](const std::vector<Tensor>& x) { return mul(sum(x[0]), sum(x[0])); }, {a}, "sum", seed);
    expect_grad([](const std::vector<Tensor>& x) { return mul(mean(x[0]), mean(x[0])); }, {a}, "mean", seed);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(mean_spatial(x[0]), w24)); }, {a}, "mean_spatial",
                seed);
    Tensor w = Tensor::uniform({6, 4}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(reshape(x[0], {6, 4}), w)); }, {a}, "reshape",
                seed);
    auto perm = std::make_shared<std::vector<std::size_t>>(24);
    for (std::size_t i = 0; i < 24; ++i) (*perm)[i] = (i * 7) % 24;
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(remap(x[0], {6, 4}, perm), w)); }, {a}, "remap",
                seed);
    Tensor wg = Tensor::uniform({3, 3, 2, 2}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(gather_rows(x[0], {1, 0, 1}), wg)); }, {a},
                "gather_rows", seed);
    Tensor b = Tensor::uniform({2, 1, 2, 2}, rng), wc = Tensor::uniform({2, 4, 2, 2}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(concat({x[0], x[1]}, 1), wc)); }, {a, b}, "concat",
                seed);
    Tensor ws = Tensor::uniform({2, 2, 2, 2}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(slice(x[0], 1, 1, 2), ws)); }, {a}, "slice", seed);
    Tensor wa = Tensor::uniform({2, 3, 2, 2}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(add_channel_bias(x[0], x[1]), wa)); },
                {a, Tensor::uniform({3}, rng)}, "add_channel_bias", seed);
  }
}

TEST(Gradients, MatmulLinearSoftmax) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor a = Tensor::uniform({3, 4}, rng), b = Tensor::uniform({4, 2}, rng), w = Tensor::uniform({3, 2}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(matmul(x[0], x[1]), w)); }, {a, b}, "matmul", seed);
    Tensor lw = Tensor::uniform({2, 4}, rng), lb = Tensor::uniform({2}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(linear(x[0], x[1], x[2]), w)); }, {a, lw, lb},
                "linear", seed);
    Tensor ws = Tensor::uniform({3, 4}, rng);
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(softmax(x[0], 1), ws)); }, {a}, "softmax", seed);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(12, 1);
    (*mask)[1] = (*mask)[6] = (*mask)[11] = 0;
    expect_grad([&](const std::vector<Tensor>& x) { return sum(mul(masked_softmax_rows(x[0], mask), ws)); }, {a},
                "masked_softmax_rows", seed);
  }
}

TEST(Gradients, Convolutions) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t stride = 1 + seed % 2;
    Tensor x = Tensor::uniform({2, 2, 5, 5}, rng), w = Tensor::uniform({3, 2, 3, 3}, rng);
    Tensor b = Tensor::uniform({3}, rng);
    Tensor probe = conv2d(x, w, b, stride, 1);
    Tensor wo = Tensor::uniform(probe.shape(), rng);
    expect_grad([&](const std::vector<Tensor>& in) { return sum(mul(conv2d(in[0], in[1], in[2], stride, 1), wo)); },
                {x, w, b}, "conv2d", seed);
    Tensor x3 = Tensor::uniform({2, 3, 4, 4}, rng), w3 = Tensor::uniform({2, 2, 3, 5, 5}, rng);
    Tensor b3 = Tensor::uniform({2}, rng);
    Tensor p3 = conv3d(x3, w3, b3, {1, 2, 2}, {1, 2, 2});
    Tensor wo3 = Tensor::uniform(p3.shape(), rng);
    expect_grad(
        [&](const std::vector<Tensor>& in) { return sum(mul(conv3d(in[0], in[1], in[2], {1, 2, 2}, {1, 2, 2}), wo3)); },
        {x3, w3, b3}, "conv3d", seed);
    Tensor xu = Tensor::uniform({1, 2, 3, 3}, rng), wu = Tensor::uniform({1, 2, 6, 6}, rng);
    expect_grad([&](const std::vector<Tensor>& in) { return sum(mul(upsample2x(in[0]), wu)); }, {xu}, "upsample2x",
                seed);
  }
}

TEST(Gradients, Sampling) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor src = Tensor::uniform({1, 5, 5}, rng);
    Tensor grid = safe_grid({4, 4, 2}, 5, 5, rng);
    Tensor w = Tensor::uniform({1, 4, 4}, rng);
    expect_grad([&](const std::vector<Tensor>& in) { return sum(mul(bilinear_sample(in[0], in[1]), w)); },
                {src, grid}, "bilinear_sample", seed);

    Tensor x = Tensor::uniform({2, 2, 4, 4}, rng);
    Tensor g2 = safe_grid({2, 3, 3, 2}, 4, 4, rng);
    Tensor w2 = Tensor::uniform({2, 2, 3, 3}, rng);
    expect_grad([&](const std::vector<Tensor>& in) { return sum(mul(grid_sample(in[0], in[1]), w2)); }, {x, g2},
                "grid_sample", seed);

    Tensor theta = Tensor::uniform({2, 2, 3}, rng, -0.6, 0.6);
    for (std::size_t p = 0; p < 2; ++p) {
      theta[p * 6] += 1.0;
      theta[p * 6 + 4] += 1.0;
    }
    Tensor wg = Tensor::uniform({2, 3, 3, 2}, rng);
    expect_grad([&](const std::vector<Tensor>& in) { return sum(mul(affine_grid(in[0], 3, 3), wg)); }, {theta},
                "affine_grid", seed);

    auto si = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{0, 1, 1});
    auto ti = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{1, 0, 1});
    Tensor ww = Tensor::uniform({3, 2, 4, 4}, rng);
    expect_grad([&](const std::vector<Tensor>& in) { return sum(mul(affine_warp(in[0], in[1], si, ti), ww)); },
                {x, theta}, "affine_warp", seed);
  }
}

TEST(Gradients, SpectralNormApply) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor w = Tensor::uniform({3, 2, 2, 2}, rng);
    Tensor wo = Tensor::uniform({3, 2, 2, 2}, rng);
    // a converged singular vector makes the forward value a smooth function of w
    expect_grad(
        [&](const std::vector<Tensor>& in) {
          SpectralNorm sn(3, 11);
          return sum(mul(sn.apply(in[0], 200), wo));
        },
        {w}, "spectral_norm", seed);
  }
}
