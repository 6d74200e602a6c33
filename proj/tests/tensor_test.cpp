#include "pgl/tensor.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "common/gradcheck.hpp"
#include "pgl/rng.hpp"

namespace pgl {
namespace {

using testing::bit_identical;
using testing::max_grad_rel_error;
using testing::random_tensor;

TEST(TensorBasics, FactoryAndShape) {
  Tensor32 t = Tensor32::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(t.rank(), 3);
  EXPECT_THROW(Tensor32::from({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);
  EXPECT_FLOAT_EQ(Tensor32::scalar(2.5f).item(), 2.5f);
  EXPECT_THROW(t.item(), ShapeError);
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

TEST(Conv3d, IdentityKernelReproducesInput) {
  Rng rng(7);
  Tensor32 x = random_tensor<float>({1, 1, 2, 3, 4}, rng);
  Tensor32 w = Tensor32::full({1, 1, 1, 1, 1}, 1.0f);
  Tensor32 y = conv3d<float>(x, w, std::nullopt);
  EXPECT_TRUE(bit_identical(x, y));
}

TEST(Conv3d, AllOnesKernelSums27) {
  Tensor32 x = Tensor32::full({1, 1, 5, 5, 5}, 1.0f);
  Tensor32 w = Tensor32::full({1, 1, 3, 3, 3}, 1.0f);
  Tensor32 y = conv3d<float>(x, w, std::nullopt);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3, 3}));
  for (float v : y.data()) {
    EXPECT_FLOAT_EQ(v, 27.0f);
  }
}

TEST(Conv3d, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor64 x = random_tensor<double>({1, 2, 4, 5, 5}, rng);
  Tensor64 w = random_tensor<double>({3, 2, 2, 3, 3}, rng);
  Tensor64 b = random_tensor<double>({3}, rng);
  Tensor64 probe = random_tensor<double>({1, 3, 2, 3, 3}, rng);
  std::vector<Tensor64> leaves{x, w, b};
  Conv3dSpec spec;
  spec.stride = {2, 2, 2};
  spec.padding = {0, 1, 1};
  const double err = max_grad_rel_error(leaves, [&] {
    return sum_all(mul(conv3d<double>(x, w, b, spec), probe));
  });
  EXPECT_LE(err, 1e-6);
}

TEST(Conv3d, GroupedAndDilatedGradient) {
  Rng rng(12);
  Tensor64 x = random_tensor<double>({2, 4, 3, 5, 5}, rng);
  Tensor64 w = random_tensor<double>({4, 1, 1, 3, 3}, rng);
  Tensor64 probe = random_tensor<double>({2, 4, 3, 5, 5}, rng);
  Conv3dSpec spec;
  spec.padding = {0, 2, 2};
  spec.dilation = {1, 2, 2};
  spec.groups = 4;
  std::vector<Tensor64> leaves{x, w};
  const double err = max_grad_rel_error(leaves, [&] {
    return sum_all(mul(conv3d<double>(x, w, std::nullopt, spec), probe));
  });
  EXPECT_LE(err, 1e-6);
}

TEST(Conv3d, ShapeErrorsNameTheProblem) {
  Tensor32 x = Tensor32::zeros({1, 3, 4, 4, 4});
  Tensor32 w = Tensor32::zeros({2, 2, 3, 3, 3});
  try {
    conv3d<float>(x, w, std::nullopt);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
  }

  Tensor32 w2 = Tensor32::zeros({2, 3, 5, 3, 3});
  try {
    conv3d<float>(x, w2, std::nullopt);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("depth"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// conv_transpose3d
// ---------------------------------------------------------------------------

TEST(ConvTranspose3d, ShapeAndGradient) {
  Rng rng(13);
  Tensor64 x = random_tensor<double>({1, 2, 2, 3, 3}, rng);
  Tensor64 w = random_tensor<double>({2, 3, 2, 2, 2}, rng);
  Tensor64 b = random_tensor<double>({3}, rng);
  Tensor64 y = conv_transpose3d<double>(x, w, b, {2, 2, 2});
  ASSERT_EQ(y.shape(), (Shape{1, 3, 4, 6, 6}));

  Tensor64 probe = random_tensor<double>({1, 3, 4, 6, 6}, rng);
  std::vector<Tensor64> leaves{x, w, b};
  const double err = max_grad_rel_error(leaves, [&] {
    return sum_all(mul(conv_transpose3d<double>(x, w, b, {2, 2, 2}), probe));
  });
  EXPECT_LE(err, 1e-6);
}

// ---------------------------------------------------------------------------
// batchnorm3d
// ---------------------------------------------------------------------------

TEST(BatchNorm3d, NormalizesToZeroMeanUnitVariance) {
  Rng rng(17);
  Tensor32 x = random_tensor<float>({2, 3, 4, 4, 4}, rng, -5.0, 5.0);
  Tensor32 gamma = Tensor32::full({3}, 1.0f);
  Tensor32 beta = Tensor32::zeros({3});
  Tensor32 rm = Tensor32::zeros({3});
  Tensor32 rv = Tensor32::full({3}, 1.0f);
  Tensor32 y = batchnorm3d<float>(x, gamma, beta, rm, rv, 0.1, 1e-5, /*training=*/true);

  const std::int64_t vox = 4 * 4 * 4;
  for (std::int64_t c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::int64_t n = 0; n < 2; ++n) {
      for (std::int64_t s = 0; s < vox; ++s) {
        const double v = y.data()[static_cast<std::size_t>((n * 3 + c) * vox + s)];
        sum += v;
        sq += v * v;
      }
    }
    const double m = 2.0 * vox;
    const double mean = sum / m;
    const double var = sq / m - mean * mean;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(BatchNorm3d, ZeroGammaCollapsesToBeta) {
  Rng rng(18);
  Tensor32 x = random_tensor<float>({2, 2, 3, 3, 3}, rng);
  Tensor32 gamma = Tensor32::zeros({2});
  Tensor32 beta = Tensor32::full({2}, 5.0f);
  Tensor32 rm = Tensor32::zeros({2});
  Tensor32 rv = Tensor32::full({2}, 1.0f);
  Tensor32 y = batchnorm3d<float>(x, gamma, beta, rm, rv, 0.1, 1e-5, true);
  for (float v : y.data()) {
    EXPECT_FLOAT_EQ(v, 5.0f);
  }
}

TEST(BatchNorm3d, GradientMatchesFiniteDifferences) {
  Rng rng(19);
  Tensor64 x = random_tensor<double>({2, 2, 3, 3, 3}, rng);
  Tensor64 gamma = random_tensor<double>({2}, rng, 0.5, 1.5);
  Tensor64 beta = random_tensor<double>({2}, rng);
  Tensor64 rm = Tensor64::zeros({2});
  Tensor64 rv = Tensor64::full({2}, 1.0);
  Tensor64 probe = random_tensor<double>({2, 2, 3, 3, 3}, rng);
  std::vector<Tensor64> leaves{x, gamma, beta};
  const double err = max_grad_rel_error(leaves, [&] {
    return sum_all(mul(
        batchnorm3d<double>(x, gamma, beta, rm, rv, 0.1, 1e-5, true, /*update_running=*/false),
        probe));
  });
  EXPECT_LE(err, 1e-5);
}

TEST(BatchNorm3d, EvalModeUsesRunningStats) {
  Tensor32 x = Tensor32::from({1, 1, 1, 1, 2}, {3.0f, 7.0f});
  Tensor32 gamma = Tensor32::full({1}, 1.0f);
  Tensor32 beta = Tensor32::zeros({1});
  Tensor32 rm = Tensor32::full({1}, 1.0f);
  Tensor32 rv = Tensor32::full({1}, 4.0f);
  Tensor32 y = batchnorm3d<float>(x, gamma, beta, rm, rv, 0.1, 0.0001, /*training=*/false);
  EXPECT_NEAR(y.data()[0], (3.0 - 1.0) / std::sqrt(4.0001), 1e-5);
  EXPECT_NEAR(y.data()[1], (7.0 - 1.0) / std::sqrt(4.0001), 1e-5);
}

TEST(BatchNorm3d, SingleElementBatchIsAnError) {
  Tensor32 x = Tensor32::zeros({1, 2, 1, 1, 1});
  Tensor32 gamma = Tensor32::full({2}, 1.0f);
  Tensor32 beta = Tensor32::zeros({2});
  Tensor32 rm = Tensor32::zeros({2});
  Tensor32 rv = Tensor32::full({2}, 1.0f);
  EXPECT_THROW(batchnorm3d<float>(x, gamma, beta, rm, rv, 0.1, 1e-5, true), ShapeError);
  EXPECT_NO_THROW(batchnorm3d<float>(x, gamma, beta, rm, rv, 0.1, 1e-5, false));
}

TEST(BatchNorm3d, RunningStatUpdateFollowsMomentum) {
  Tensor32 x = Tensor32::from({1, 1, 1, 1, 4}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor32 gamma = Tensor32::full({1}, 1.0f);
  Tensor32 beta = Tensor32::zeros({1});
  Tensor32 rm = Tensor32::full({1}, 10.0f);
  Tensor32 rv = Tensor32::full({1}, 2.0f);
  batchnorm3d<float>(x, gamma, beta, rm, rv, 0.1, 1e-5, true);
  // batch mean 2.5, biased var 1.25, unbiased var 5/3
  EXPECT_NEAR(rm.data()[0], 0.9 * 10.0 + 0.1 * 2.5, 1e-6);
  EXPECT_NEAR(rv.data()[0], 0.9 * 2.0 + 0.1 * (5.0 / 3.0), 1e-6);
}

// ---------------------------------------------------------------------------
// relu / add / elementwise
// ---------------------------------------------------------------------------

TEST(Elementwise, ReluValues) {
  Tensor32 x = Tensor32::from({2}, {-2.0f, 3.5f});
  Tensor32 y = relu(x);
  EXPECT_FLOAT_EQ(y.data()[0], 0.0f);
  EXPECT_FLOAT_EQ(y.data()[1], 3.5f);
}

TEST(Elementwise, AddZerosIsIdentity) {
  Rng rng(23);
  Tensor32 x = random_tensor<float>({3, 4}, rng);
  Tensor32 y = add(x, Tensor32::zeros({3, 4}));
  EXPECT_TRUE(bit_identical(x, y));
  EXPECT_THROW(add(x, Tensor32::zeros({4, 3})), ShapeError);
}

TEST(Elementwise, ReluSubgradient) {
  Tensor64 x = Tensor64::from({3}, {-1.0, 0.0, 2.0});
  x.set_requires_grad(true);
  Tensor64 upstream = Tensor64::from({3}, {3.0, 4.0, 5.0});
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  Tensor64 loss = sum_all(mul(relu(x), upstream));
  tape.backward(loss);
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);  // negative input blocks gradient
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);  // subgradient at exactly 0 is 0
  EXPECT_DOUBLE_EQ(x.grad()[2], 5.0);  // upstream gradient passes through
}

TEST(Elementwise, SigmoidSoftmaxGradients) {
  Rng rng(29);
  Tensor64 x = random_tensor<double>({2, 3, 2, 2, 2}, rng);
  Tensor64 probe = random_tensor<double>({2, 3, 2, 2, 2}, rng);
  std::vector<Tensor64> leaves{x};
  EXPECT_LE(max_grad_rel_error(leaves, [&] { return sum_all(mul(sigmoid(x), probe)); }), 1e-6);
  EXPECT_LE(max_grad_rel_error(leaves, [&] { return sum_all(mul(softmax_channels(x), probe)); }),
            1e-6);
}

TEST(Elementwise, SoftmaxSumsToOne) {
  Rng rng(31);
  Tensor32 x = random_tensor<float>({2, 4, 2, 2, 2}, rng, -3.0, 3.0);
  Tensor32 p = softmax_channels(x);
  const std::int64_t spatial = 8;
  for (std::int64_t n = 0; n < 2; ++n) {
    for (std::int64_t s = 0; s < spatial; ++s) {
      double sum = 0.0;
      for (std::int64_t c = 0; c < 4; ++c) {
        sum += p.data()[static_cast<std::size_t>((n * 4 + c) * spatial + s)];
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

// ---------------------------------------------------------------------------
// trilinear sampling
// ---------------------------------------------------------------------------

TEST(TrilinearSample, ExactAtGridPoints) {
  Rng rng(37);
  Tensor32 x = random_tensor<float>({1, 1, 4, 5, 3}, rng);
  std::vector<Dvec3> points{{2.0, 3.0, 1.0}};
  Tensor32 y = trilinear_sample(x, points);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_FLOAT_EQ(y.data()[0], x.data()[static_cast<std::size_t>((2 * 5 + 3) * 3 + 1)]);
}

TEST(TrilinearSample, ExactOnLinearRamp) {
  // v(d, h, w) = d + 2h + 3w; trilinear interpolation is exact on linear fields.
  std::vector<float> values;
  for (int d = 0; d < 4; ++d) {
    for (int h = 0; h < 5; ++h) {
      for (int w = 0; w < 6; ++w) {
        values.push_back(static_cast<float>(d + 2 * h + 3 * w));
      }
    }
  }
  Tensor32 x = Tensor32::from({1, 1, 4, 5, 6}, std::move(values));
  std::vector<Dvec3> points{{1.5, 0.25, 2.75}};
  Tensor32 y = trilinear_sample(x, points);
  EXPECT_NEAR(y.data()[0], 10.25, 1e-6);
}

TEST(TrilinearSample, EmptyPointListGivesEmptyTensor) {
  Tensor32 x = Tensor32::zeros({2, 3, 2, 2, 2});
  Tensor32 y = trilinear_sample(x, std::span<const Dvec3>{});
  EXPECT_EQ(y.shape(), (Shape{2, 3, 0}));
  EXPECT_EQ(y.numel(), 0);
}

TEST(TrilinearSample, ClampsOutOfRangeToBorder) {
  Tensor32 x = Tensor32::from({1, 1, 1, 1, 3}, {10.0f, 20.0f, 30.0f});
  std::vector<Dvec3> points{{-5.0, 0.0, -1.0}, {0.0, 7.0, 9.0}};
  Tensor32 y = trilinear_sample(x, points);
  EXPECT_FLOAT_EQ(y.data()[0], 10.0f);
  EXPECT_FLOAT_EQ(y.data()[1], 30.0f);
}

TEST(TrilinearSample, GradientMatchesFiniteDifferences) {
  Rng rng(41);
  Tensor64 x = random_tensor<double>({1, 2, 3, 4, 4}, rng);
  std::vector<Dvec3> points;
  for (int i = 0; i < 20; ++i) {
    points.push_back({rng.uniform(-0.5, 3.0), rng.uniform(-0.5, 3.5), rng.uniform(-0.5, 3.5)});
  }
  Tensor64 probe = random_tensor<double>({1, 2, 20}, rng);
  std::vector<Tensor64> leaves{x};
  const double err =
      max_grad_rel_error(leaves, [&] { return sum_all(mul(trilinear_sample(x, points), probe)); });
  EXPECT_LE(err, 1e-6);
}

TEST(ResizeTrilinear, IdentityWhenSizesMatch) {
  Rng rng(43);
  Tensor32 x = random_tensor<float>({1, 2, 3, 4, 5}, rng);
  Tensor32 y = resize_trilinear(x, {3, 4, 5});
  EXPECT_TRUE(bit_identical(x, y));
}

TEST(ResizeTrilinear, GradientMatchesFiniteDifferences) {
  Rng rng(47);
  Tensor64 x = random_tensor<double>({1, 2, 2, 3, 3}, rng);
  Tensor64 probe = random_tensor<double>({1, 2, 4, 5, 6}, rng);
  std::vector<Tensor64> leaves{x};
  const double err = max_grad_rel_error(
      leaves, [&] { return sum_all(mul(resize_trilinear(x, {4, 5, 6}), probe)); });
  EXPECT_LE(err, 1e-6);
}

TEST(RoiAlign3d, GradientMatchesFiniteDifferences) {
  Rng rng(53);
  Tensor64 x = random_tensor<double>({2, 2, 3, 4, 4}, rng);
  std::vector<SampleRoi> rois{{{0.25, 0.5, 1.0}, {2.5, 3.25, 3.75}},
                              {{0.0, 0.0, 0.0}, {3.0, 4.0, 4.0}}};
  Tensor64 probe = random_tensor<double>({2, 2, 2, 3, 3}, rng);
  std::vector<Tensor64> leaves{x};
  const double err = max_grad_rel_error(
      leaves, [&] { return sum_all(mul(roi_align3d(x, rois, {2, 3, 3}, 2), probe)); });
  EXPECT_LE(err, 1e-6);
}

TEST(RoiAlign3d, RejectsOutOfBoundsRoi) {
  Tensor32 x = Tensor32::zeros({1, 1, 2, 2, 2});
  std::vector<SampleRoi> rois{{{0.0, 0.0, 0.0}, {2.0, 2.0, 2.5}}};
  EXPECT_THROW(roi_align3d(x, rois, {1, 1, 1}, 1), ShapeError);
}

// ---------------------------------------------------------------------------
// l2 normalization
// ---------------------------------------------------------------------------

TEST(L2Normalize, ThreeFourFive) {
  Tensor32 x = Tensor32::from({1, 2, 1, 1, 1}, {3.0f, 4.0f});
  Tensor32 y = l2_normalize_channels(x, 1e-12);
  EXPECT_FLOAT_EQ(y.data()[0], 0.6f);
  EXPECT_FLOAT_EQ(y.data()[1], 0.8f);
}

TEST(L2Normalize, ZeroVectorStaysZero) {
  Tensor32 x = Tensor32::zeros({1, 3, 1, 1, 1});
  Tensor32 y = l2_normalize_channels(x, 1e-12);
  for (float v : y.data()) {
    EXPECT_FLOAT_EQ(v, 0.0f);
  }
}

TEST(L2Normalize, UnitNormWhereInputIsLargeEnough) {
  Rng rng(59);
  const double eps = 1e-6;
  Tensor32 x = random_tensor<float>({2, 4, 2, 2, 2}, rng, -2.0, 2.0);
  Tensor32 y = l2_normalize_channels(x, eps);
  const std::int64_t spatial = 8;
  for (std::int64_t n = 0; n < 2; ++n) {
    for (std::int64_t s = 0; s < spatial; ++s) {
      double in_sq = 0.0, out_sq = 0.0;
      for (std::int64_t c = 0; c < 4; ++c) {
        const std::size_t i = static_cast<std::size_t>((n * 4 + c) * spatial + s);
        in_sq += x.data()[i] * x.data()[i];
        out_sq += y.data()[i] * y.data()[i];
      }
      if (std::sqrt(in_sq) >= 10 * eps) {
        EXPECT_NEAR(std::sqrt(out_sq), 1.0, 1e-6);
      }
    }
  }
}

TEST(L2Normalize, GradientMatchesFiniteDifferences) {
  Rng rng(61);
  Tensor64 x = random_tensor<double>({2, 3, 2, 2, 2}, rng, -2.0, 2.0);
  Tensor64 probe = random_tensor<double>({2, 3, 2, 2, 2}, rng);
  std::vector<Tensor64> leaves{x};
  const double err = max_grad_rel_error(
      leaves, [&] { return sum_all(mul(l2_normalize_channels(x, 1e-9), probe)); });
  EXPECT_LE(err, 1e-6);
}

// ---------------------------------------------------------------------------
// backward / tape semantics
// ---------------------------------------------------------------------------

TEST(Backward, SumOfSquaresGradient) {
  Tensor64 x = Tensor64::from({4}, {1.0, -2.0, 3.0, 0.5});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  Tensor64 loss = sum_all(mul(x, x));
  tape.backward(loss);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
  }
}

TEST(Backward, NonScalarLossIsAnError) {
  Tensor64 x = Tensor64::from({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  Tensor64 y = mul(x, x);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, StopGradientBlocksPropagation) {
  Tensor64 x = Tensor64::from({3}, {1.0, 2.0, 3.0});
  Tensor64 y = Tensor64::from({3}, {4.0, 5.0, 6.0});
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  Tensor64 blocked = sum_all(stop_gradient(mul(x, x)));
  Tensor64 live = sum_all(mul(y, y));
  tape.backward(add(blocked, live));
  EXPECT_FALSE(x.has_grad());  // upstream gradients of x are exactly zero
  ASSERT_TRUE(y.has_grad());
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(y.grad()[i], 2.0 * y.data()[i]);
  }
}

TEST(Backward, CompositeNetworkMatchesFiniteDifferences) {
  Rng rng(67);
  Tensor64 x = random_tensor<double>({2, 2, 3, 4, 4}, rng);
  Tensor64 w = random_tensor<double>({3, 2, 2, 2, 2}, rng);
  Tensor64 b = random_tensor<double>({3}, rng);
  Tensor64 gamma = random_tensor<double>({3}, rng, 0.5, 1.5);
  Tensor64 beta = random_tensor<double>({3}, rng);
  Tensor64 rm = Tensor64::zeros({3});
  Tensor64 rv = Tensor64::full({3}, 1.0);
  std::vector<Tensor64> leaves{x, w, b, gamma, beta};
  const double err = max_grad_rel_error(leaves, [&] {
    Conv3dSpec spec;
    spec.stride = {1, 2, 2};
    spec.padding = {1, 1, 1};
    Tensor64 h = conv3d<double>(x, w, b, spec);
    h = batchnorm3d<double>(h, gamma, beta, rm, rv, 0.1, 1e-5, true, false);
    return sum_all(relu(h));
  });
  EXPECT_LE(err, 1e-5);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor64 x = Tensor64::from({2}, {3.0, -1.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  Tensor64 loss = sum_all(mul(x, x));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * 2.0 * 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0 * 2.0 * -1.0);
}

TEST(Backward, SharedSubgraphAcrossTwoBackwardCalls) {
  // Two losses sharing the intermediate m = x*x, backpropagated separately on
  // the same tape: leaf gradients must sum without double-counting.
  Tensor64 x = Tensor64::from({2}, {1.5, -2.0});
  Tensor64 w = Tensor64::from({2}, {2.0, 3.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  Tensor64 m = mul(x, x);
  Tensor64 l1 = sum_all(m);
  Tensor64 l2 = sum_all(mul(m, w));
  tape.backward(l1);
  tape.backward(l2);
  for (std::size_t i = 0; i < 2; ++i) {
    const double expected = 2.0 * x.data()[i] + 2.0 * x.data()[i] * w.data()[i];
    EXPECT_DOUBLE_EQ(x.grad()[i], expected);
  }
}

TEST(Backward, LinearityOfCombinedLosses) {
  Rng rng(71);
  Tensor64 x = random_tensor<double>({5}, rng);
  Tensor64 c = random_tensor<double>({5}, rng);
  const double a = 2.5, b = -1.25;

  auto grads_for = [&](double s1, double s2) {
    Tensor64 leaf = x.clone_data();
    leaf.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(&tape);
    Tensor64 loss =
        add(scale(sum_all(mul(leaf, leaf)), s1), scale(sum_all(mul(leaf, c)), s2));
    tape.backward(loss);
    return std::vector<double>(leaf.grad().begin(), leaf.grad().end());
  };

  const auto g1 = grads_for(1.0, 0.0);
  const auto g2 = grads_for(0.0, 1.0);
  const auto combined = grads_for(a, b);
  for (std::size_t i = 0; i < combined.size(); ++i) {
    EXPECT_NEAR(combined[i], a * g1[i] + b * g2[i], 1e-12);
  }
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

TEST(StructuralOps, FlipIsAnInvolution) {
  Rng rng(73);
  Tensor32 x = random_tensor<float>({2, 2, 3, 4, 5}, rng);
  for (const Bvec3 mask : {Bvec3{true, false, true}, Bvec3{true, true, true}, Bvec3{false, false, false}}) {
    Tensor32 y = flip_spatial(flip_spatial(x, mask), mask);
    EXPECT_TRUE(bit_identical(x, y));
  }
}

TEST(StructuralOps, FlipReversesDepth) {
  Tensor32 x = Tensor32::from({1, 1, 4, 1, 1}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor32 y = flip_spatial(x, {true, false, false});
  EXPECT_FLOAT_EQ(y.data()[0], 4.0f);
  EXPECT_FLOAT_EQ(y.data()[1], 3.0f);
  EXPECT_FLOAT_EQ(y.data()[2], 2.0f);
  EXPECT_FLOAT_EQ(y.data()[3], 1.0f);
}

TEST(StructuralOps, ConcatSelectFlipGradients) {
  Rng rng(79);
  Tensor64 a = random_tensor<double>({2, 2, 2, 2, 2}, rng);
  Tensor64 b = random_tensor<double>({2, 3, 2, 2, 2}, rng);
  Tensor64 probe = random_tensor<double>({2, 5, 2, 2, 2}, rng);
  std::vector<Tensor64> leaves{a, b};
  const double err = max_grad_rel_error(leaves, [&] {
    std::vector<Tensor64> parts{a, b};
    Tensor64 cat = concat_channels<double>(parts);
    Tensor64 flipped = flip_spatial(cat, {true, false, true});
    std::vector<std::int64_t> idx{1, 0};
    return sum_all(mul(select_batch(flipped, idx), probe));
  });
  EXPECT_LE(err, 1e-6);
}

TEST(StructuralOps, GlobalAvgPoolAndReshapeGradients) {
  Rng rng(83);
  Tensor64 x = random_tensor<double>({2, 3, 2, 2, 2}, rng);
  Tensor64 probe = random_tensor<double>({2, 3, 1, 1, 1}, rng);
  std::vector<Tensor64> leaves{x};
  const double err = max_grad_rel_error(leaves, [&] {
    return sum_all(mul(global_avg_pool(x), probe));
  });
  EXPECT_LE(err, 1e-6);

  Tensor64 y = reshape(x, {6, 8});
  EXPECT_EQ(y.numel(), x.numel());
  EXPECT_THROW(reshape(x, {7, 7}), ShapeError);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalResults) {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor32 x = random_tensor<float>({1, 2, 4, 4, 4}, rng);
    Tensor32 w = random_tensor<float>({3, 2, 3, 3, 3}, rng);
    Tensor32 b = random_tensor<float>({3}, rng);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    Conv3dSpec spec;
    spec.padding = {1, 1, 1};
    Tape<float> tape;
    Tape<float>::Scope scope(&tape);
    Tensor32 y = relu(conv3d<float>(x, w, b, spec));
    Tensor32 loss = sum_all(mul(y, y));
    tape.backward(loss);
    std::vector<float> all(y.data().begin(), y.data().end());
    all.insert(all.end(), x.grad().begin(), x.grad().end());
    all.insert(all.end(), w.grad().begin(), w.grad().end());
    return all;
  };
  const auto r1 = run(97);
  const auto r2 = run(97);
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    EXPECT_EQ(r1[i], r2[i]);
  }
}

}  // namespace
}  // namespace pgl
