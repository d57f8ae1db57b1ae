#include <gtest/gtest.h>

#include <cmath>

#include "mfi/error.hpp"
#include "mfi/kernels.hpp"
#include "mfi/rng.hpp"
#include "oracles.hpp"

using namespace mfi;

struct ConvCase {
    std::int64_t batch, in, height, width, out, kernel, stride, padding;
};

class ConvAgainstLoops : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvAgainstLoops, ForwardMatchesDirectLoops) {
    const auto c = GetParam();
    SeededRng rng(c.in * 31 + c.kernel);
    const Tensor x = rng.normal_tensor({c.batch, c.in, c.height, c.width}, 0.0f, 1.0f);
    const Tensor w = rng.normal_tensor({c.out, c.in, c.kernel, c.kernel}, 0.0f, 1.0f);
    const Tensor y = kernels::conv2d_forward(x, w, {c.stride, c.padding});
    const auto ref = oracle::conv2d_reference(x, w, c.stride, c.padding);
    ASSERT_EQ(static_cast<std::size_t>(y.numel()), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[static_cast<std::int64_t>(i)], ref[i], 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvAgainstLoops,
                         ::testing::Values(ConvCase{2, 3, 5, 5, 4, 3, 1, 1}, ConvCase{1, 2, 7, 6, 3, 3, 2, 1},
                                           ConvCase{3, 4, 4, 4, 5, 1, 1, 0}, ConvCase{2, 4, 6, 6, 2, 1, 2, 0},
                                           ConvCase{1, 1, 3, 3, 1, 3, 1, 0}, ConvCase{2, 3, 9, 5, 2, 3, 2, 0}));

TEST(Conv, ChannelMismatchThrows) {
    EXPECT_THROW(kernels::conv2d_forward(Tensor({1, 3, 4, 4}), Tensor({2, 4, 3, 3}), {1, 1}), ShapeError);
}

TEST(Conv, OutputExtent) {
    EXPECT_EQ(kernels::conv_out_extent(32, 3, {1, 1}), 32);
    EXPECT_EQ(kernels::conv_out_extent(32, 3, {2, 1}), 16);
    EXPECT_EQ(kernels::conv_out_extent(32, 1, {2, 0}), 16);
}

TEST(Conv, AdjointIdentities) {
    // <conv(x, w), g> = <x, conv_grad_input(g, w)> = <w, conv_grad_weight(g, x)>
    SeededRng rng(5);
    const Tensor x = rng.normal_tensor({2, 3, 6, 6}, 0.0f, 1.0f);
    const Tensor w = rng.normal_tensor({4, 3, 3, 3}, 0.0f, 1.0f);
    const kernels::ConvGeometry g{2, 1};
    const Tensor y = kernels::conv2d_forward(x, w, g);
    const Tensor gy = rng.normal_tensor(y.shape(), 0.0f, 1.0f);
    const Tensor gx = kernels::conv2d_grad_input(gy, w, x.shape(), g);
    const Tensor gw = kernels::conv2d_grad_weight(gy, x, w.shape(), g);
    double lhs = 0, rx = 0, rw = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) lhs += static_cast<double>(y[i]) * gy[i];
    for (std::int64_t i = 0; i < x.numel(); ++i) rx += static_cast<double>(x[i]) * gx[i];
    for (std::int64_t i = 0; i < w.numel(); ++i) rw += static_cast<double>(w[i]) * gw[i];
    EXPECT_NEAR(lhs, rx, 1e-3 * std::abs(lhs) + 1e-3);
    EXPECT_NEAR(lhs, rw, 1e-3 * std::abs(lhs) + 1e-3);
}

TEST(BatchNorm, TrainingNormalizesPerChannel) {
    SeededRng rng(9);
    const Tensor x = rng.normal_tensor({4, 3, 5, 5}, 2.0f, 3.0f);
    NormBuffers buf{Tensor::zeros({3}), Tensor::ones({3})};
    const Tensor y = batch_norm2d(x, Tensor::ones({3}), Tensor::zeros({3}), buf, true);
    for (std::int64_t c = 0; c < 3; ++c) {
        double s = 0, sq = 0;
        for (std::int64_t b = 0; b < 4; ++b)
            for (std::int64_t i = 0; i < 25; ++i) {
                const double v = y[(b * 3 + c) * 25 + i];
                s += v;
                sq += v * v;
            }
        EXPECT_NEAR(s / 100.0, 0.0, 1e-5);
        EXPECT_NEAR(sq / 100.0, 1.0, 1e-3);
    }
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
    const Tensor x = Tensor::from({2, 1, 1, 2}, {1, 3, 5, 7});  // mean 4, biased var 5, unbiased 20/3
    NormBuffers buf{Tensor::zeros({1}), Tensor::ones({1})};
    batch_norm2d(x, Tensor::ones({1}), Tensor::zeros({1}), buf, true);
    EXPECT_NEAR(buf.running_mean[0], 0.1 * 4.0, 1e-6);
    EXPECT_NEAR(buf.running_var[0], 0.9 + 0.1 * 20.0 / 3.0, 1e-5);
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
    const Tensor x = Tensor::from({1, 1, 1, 2}, {1, 3});
    NormBuffers buf{Tensor::from({1}, {1.0f}), Tensor::from({1}, {4.0f})};
    buf.eps = 0.0f;
    const Tensor y = batch_norm2d(x, Tensor::from({1}, {2.0f}), Tensor::from({1}, {0.5f}), buf, false);
    EXPECT_FLOAT_EQ(y[0], 0.5f);
    EXPECT_FLOAT_EQ(y[1], 2.5f);
    EXPECT_EQ(buf.running_mean[0], 1.0f);
}

TEST(CrossEntropy, MatchesBruteForce) {
    SeededRng rng(2);
    const Tensor logits = rng.normal_tensor({3, 5}, 0.0f, 2.0f);
    const std::vector<int> labels{0, 4, 2};
    const float eps = 0.1f;
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) {
        double z = 0.0;
        for (int k = 0; k < 5; ++k) z += std::exp(static_cast<double>(logits.at({i, k})));
        for (int k = 0; k < 5; ++k) {
            const double q = (k == labels[static_cast<std::size_t>(i)] ? 1.0 - eps : 0.0) + eps / 5.0;
            expect -= q * (logits.at({i, k}) - std::log(z));
        }
    }
    expect /= 3.0;
    EXPECT_NEAR(cross_entropy_label_smoothed(logits, labels, eps).item(), expect, 1e-5);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    const std::vector<int> labels{1, 2};
    EXPECT_NEAR(cross_entropy_label_smoothed(Tensor({2, 10}), labels, 0.1f).item(), std::log(10.0), 1e-6);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
    const std::vector<int> labels{3};
    EXPECT_THROW(cross_entropy_label_smoothed(Tensor({1, 3}), labels, 0.0f), ShapeError);
}
