#include <gtest/gtest.h>

#include "mfi/error.hpp"
#include "mfi/tensor.hpp"

using namespace mfi;

TEST(Tensor, ShapeAndFill) {
    Tensor t({2, 3}, 1.5f);
    EXPECT_EQ(t.numel(), 6);
    EXPECT_EQ(t.rank(), 2);
    EXPECT_EQ(t.dim(1), 3);
    for (float v : t.data()) EXPECT_EQ(v, 1.5f);
    EXPECT_EQ(Tensor::scalar(4.0f).item(), 4.0f);
}

TEST(Tensor, DataSizeMustMatchShape) { EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError); }

TEST(Tensor, BroadcastAdd) {
    const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor b = Tensor::from({1, 3}, {10, 20, 30});
    const Tensor c = add(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 3}));
    EXPECT_EQ(c.at({1, 2}), 36.0f);
    const Tensor col = Tensor::from({2, 1}, {100, 200});
    EXPECT_EQ(mul(a, col).at({1, 0}), 800.0f);
}

TEST(Tensor, IncompatibleBroadcastThrows) {
    EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
}

TEST(Tensor, ReduceToUndoesBroadcast) {
    const Tensor g = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor r = reduce_to(g, {1, 3});
    EXPECT_EQ(r.at({0, 0}), 5.0f);
    EXPECT_EQ(r.at({0, 2}), 9.0f);
}

TEST(Tensor, MatmulMatchesHandComputation) {
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    const Tensor c = matmul(a, b);
    EXPECT_EQ(c.at({0, 0}), 19.0f);
    EXPECT_EQ(c.at({0, 1}), 22.0f);
    EXPECT_EQ(c.at({1, 0}), 43.0f);
    EXPECT_EQ(c.at({1, 1}), 50.0f);
    EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(Tensor, LinearIsXWtPlusB) {
    const Tensor x = Tensor::from({1, 2}, {1, 2});
    const Tensor w = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
    const Tensor b = Tensor::from({3}, {0.5f, 0, -1});
    const Tensor y = linear(x, w, b);
    EXPECT_EQ(y.at({0, 0}), 1.5f);
    EXPECT_EQ(y.at({0, 1}), 2.0f);
    EXPECT_EQ(y.at({0, 2}), 2.0f);
}

TEST(Tensor, RowsRoundTrip) {
    Tensor x({2, 3, 2, 2});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(i);
    const Tensor rows = nchw_to_rows(x);
    EXPECT_EQ(rows.shape(), (Shape{8, 3}));
    // row (b, y, x) holds the channel vector at that location
    EXPECT_EQ(rows.at({5, 1}), x.at({1, 1, 0, 1}));
    EXPECT_TRUE(rows_to_nchw(rows, 2, 2, 2).same_values(x));
}

TEST(Tensor, ConcatAndSliceCols) {
    const Tensor a = Tensor::from({2, 1}, {1, 2});
    const Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
    const Tensor parts[] = {a, b};
    const Tensor c = concat_cols(parts);
    EXPECT_EQ(c.shape(), (Shape{2, 3}));
    EXPECT_EQ(c.at({1, 0}), 2.0f);
    EXPECT_EQ(c.at({1, 2}), 6.0f);
    EXPECT_TRUE(slice_cols(c, 1, 2).same_values(b));
}

TEST(Tensor, SumAndMeanOverAxes) {
    const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(sum(a, {0}).at({2}), 9.0f);
    EXPECT_EQ(mean(a, {1}, true).shape(), (Shape{2, 1}));
    EXPECT_EQ(mean(a, {1}).at({1}), 5.0f);
    EXPECT_EQ(sum_all(a).item(), 21.0f);
}

TEST(Tensor, GlobalAvgPool) {
    Tensor x({1, 2, 2, 2});
    for (std::int64_t i = 0; i < 8; ++i) x[i] = static_cast<float>(i);
    const Tensor p = global_avg_pool(x);
    EXPECT_EQ(p.shape(), (Shape{1, 2}));
    EXPECT_EQ(p.at({0, 0}), 1.5f);
    EXPECT_EQ(p.at({0, 1}), 5.5f);
}

TEST(Tensor, FiniteCheck) {
    Tensor x({3}, 1.0f);
    EXPECT_TRUE(x.all_finite());
    x[1] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_FALSE(x.all_finite());
}
