#include "test_support.hpp"

using namespace adsam;
using namespace adsam::oracle;

namespace {

// y(b, o, p) = bias_o + sum_{c, k} w[o, c, k] * m[b, k, p] * x_c(p + p_k + dp_k), written per output pixel.
std::vector<double> naive_deform(const TensorD& x, const TensorD& w, const TensorD& bias, const TensorD& off,
                                 const TensorD& mask) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0), KH = w.dim(2),
                    KW = w.dim(3);
  std::vector<double> out(B * O * H * W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          double acc = bias.data()[o];
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const std::size_t k = ky * KW + kx;
              const double py = static_cast<double>(y) + static_cast<double>(ky) - static_cast<double>(KH / 2) +
                                off.at({b, 2 * k, y, xx});
              const double px = static_cast<double>(xx) + static_cast<double>(kx) - static_cast<double>(KW / 2) +
                                off.at({b, 2 * k + 1, y, xx});
              for (std::size_t c = 0; c < C; ++c) {
                const double* plane = x.data().data() + (b * C + c) * H * W;
                acc += w.at({o, c, ky, kx}) * mask.at({b, k, y, xx}) * naive_bilinear(plane, H, W, py, px);
              }
            }
          out[((b * O + o) * H + y) * W + xx] = acc;
        }
  return out;
}

// Random value in (lo, hi) kept away from integers so bilinear kinks are not straddled.
double off_grid(Rng& rng, double lo, double hi) {
  double v = 0;
  do v = rng.uniform(lo, hi);
  while (std::abs(v - std::round(v)) < 0.05);
  return v;
}

}  // namespace

TEST(BilinearSample, MatchesTextbookFormulaIncludingOutside) {
  Rng rng(1);
  auto f = random_tensor({2, 3, 4, 5}, rng, -1, 1, false);
  auto pts = random_tensor({2, 7, 2}, rng, -1.5, 5.5, false);
  const auto s = bilinear_sample(f, pts);
  ASSERT_EQ(s.shape(), (Shape{2, 3, 7}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 7; ++i) {
        const double expected = naive_bilinear(f.data().data() + (b * 3 + c) * 20, 4, 5, pts.at({b, i, 0}),
                                               pts.at({b, i, 1}));
        ASSERT_NEAR(s.at({b, c, i}), expected, 1e-12);
      }
}

TEST(BilinearSample, IntegerPointsReadPixelsAndFarPointsReadZero) {
  auto f = TensorD::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto pts = TensorD::from_data({1, 3, 2}, {1, 0, 0, 1, 50, -50});
  const auto s = bilinear_sample(f, pts);
  EXPECT_EQ(s.data()[0], 3.0);
  EXPECT_EQ(s.data()[1], 2.0);
  EXPECT_EQ(s.data()[2], 0.0);
}

TEST(BilinearSample, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(10 + seed);
    auto f = random_tensor({1, 2, 4, 4}, rng);
    std::vector<double> p(12);
    for (auto& v : p) v = off_grid(rng, -0.8, 3.8);
    auto pts = TensorD::from_data({1, 6, 2}, p, true);
    auto fn = [](const std::vector<TensorD>& v) { return weighted_sum(bilinear_sample(v[0], v[1])); };
    const auto r = grad_check(fn, {f, pts});
    ASSERT_LT(r.max_rel_error, 1e-4) << r.where;
  }
}

TEST(DeformConv2d, ZeroOffsetsUnitMasksEqualConvolution) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + rng.below(2), cin = 1 + rng.below(4), cout = 1 + rng.below(4);
    const std::size_t k = 1 + 2 * rng.below(3), h = 1 + rng.below(7), w = 1 + rng.below(7);
    auto x = random_tensor({b, cin, h, w}, rng, -1, 1, false);
    auto wt = random_tensor({cout, cin, k, k}, rng, -1, 1, false);
    auto bias = random_tensor({cout}, rng, -1, 1, false);
    const auto offsets = TensorD::zeros({b, 2 * k * k, h, w});
    const auto masks = TensorD::full({b, k * k, h, w}, 1.0);
    const auto d = deform_conv2d(x, wt, bias, offsets, masks);
    const auto c = conv2d(x, wt, bias, 1, k / 2);
    ASSERT_EQ(d.shape(), c.shape());
    for (std::size_t i = 0; i < d.numel(); ++i) ASSERT_NEAR(d.data()[i], c.data()[i], 1e-6);
  }
}

TEST(DeformConv2d, MatchesPerPixelFormulaWithRandomOffsets) {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({2, 3, 5, 6}, rng, -1, 1, false);
    auto wt = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
    auto bias = random_tensor({4}, rng, -1, 1, false);
    auto off = random_tensor({2, 18, 5, 6}, rng, -2.5, 2.5, false);
    auto mask = random_tensor({2, 9, 5, 6}, rng, 0, 1, false);
    const auto y = deform_conv2d(x, wt, bias, off, mask);
    const auto expected = naive_deform(x, wt, bias, off, mask);
    for (std::size_t i = 0; i < expected.size(); ++i) ASSERT_NEAR(y.data()[i], expected[i], 1e-12);
  }
}

TEST(DeformConv2d, ValidatesOffsetAndMaskShapes) {
  auto x = TensorD::zeros({1, 2, 4, 4});
  auto w = TensorD::zeros({3, 2, 3, 3});
  EXPECT_THROW(deform_conv2d(x, w, TensorD{}, TensorD::zeros({1, 9, 4, 4}), TensorD::zeros({1, 9, 4, 4})),
               ShapeError);
  EXPECT_THROW(deform_conv2d(x, w, TensorD{}, TensorD::zeros({1, 18, 4, 4}), TensorD::zeros({1, 8, 4, 4})),
               ShapeError);
  EXPECT_THROW(deform_conv2d(x, TensorD::zeros({3, 2, 2, 2}), TensorD{}, TensorD::zeros({1, 8, 4, 4}),
                             TensorD::zeros({1, 4, 4, 4})),
               ShapeError);
}

TEST(DeformConv2d, GradientMatchesFiniteDifferencesForAllInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(30 + seed);
    auto x = random_tensor({1, 2, 4, 4}, rng);
    auto wt = random_tensor({2, 2, 3, 3}, rng);
    auto bias = random_tensor({2}, rng);
    std::vector<double> o(1 * 18 * 16);
    for (auto& v : o) v = off_grid(rng, -1.5, 1.5);
    auto off = TensorD::from_data({1, 18, 4, 4}, o, true);
    auto mask = random_tensor({1, 9, 4, 4}, rng, 0.1, 0.9);
    auto fn = [](const std::vector<TensorD>& v) { return weighted_sum(deform_conv2d(v[0], v[1], v[2], v[3], v[4])); };
    const auto r = grad_check(fn, {x, wt, bias, off, mask});
    ASSERT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " " << r.where;
  }
}

TEST(OffsetMaskPredict, SplitsChannelsAndSquashesMasks) {
  Rng rng(5);
  auto x = random_tensor({1, 2, 3, 3}, rng, -1, 1, false);
  auto w = random_tensor({27, 2, 3, 3}, rng, -1, 1, false);
  auto b = random_tensor({27}, rng, -1, 1, false);
  const auto [offsets, masks] = offset_mask_predict(x, w, b, 9);
  const auto raw = conv2d(x, w, b, 1, 1);
  ASSERT_EQ(offsets.shape(), (Shape{1, 18, 3, 3}));
  ASSERT_EQ(masks.shape(), (Shape{1, 9, 3, 3}));
  for (std::size_t i = 0; i < offsets.numel(); ++i) EXPECT_EQ(offsets.data()[i], raw.data()[i]);
  for (std::size_t i = 0; i < masks.numel(); ++i)
    EXPECT_NEAR(masks.data()[i], 1.0 / (1.0 + std::exp(-raw.data()[18 * 9 + i])), 1e-12);
  EXPECT_THROW(offset_mask_predict(x, TensorD::zeros({20, 2, 3, 3}), TensorD{}, 9), ShapeError);
}

TEST(DeformConvLayer, FreshLayerIsHalfConvolution) {
  Rng rng(6);
  DeformConvLayer<double> layer(3, 4, rng);
  auto x = random_tensor({2, 3, 5, 5}, rng, -1, 1, false);
  const auto y = layer(x);
  const auto c = conv2d(x, layer.weight, layer.bias, 1, 1);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], 0.5 * c.data()[i], 1e-12);
}

TEST(DeformConvLayer, GradientReachesOffsetPredictor) {
  Rng rng(7);
  DeformConvLayer<double> layer(2, 2, rng);
  for (auto& v : layer.offset_weight.mutable_data()) v = rng.uniform(-0.2, 0.2);
  auto x = random_tensor({1, 2, 4, 4}, rng, -1, 1, false);
  backward(weighted_sum(layer(x)));
  double norm = 0;
  for (auto g : layer.offset_weight.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}
