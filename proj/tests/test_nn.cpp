#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mfi/error.hpp"
#include "mfi/nn.hpp"

using namespace mfi;

TEST(AdamW, FirstStepsMatchHandComputation) {
    Parameter p{"w", Tensor::from({2}, {1.0f, -2.0f})};
    p.value.set_requires_grad(true);
    nn::AdamW opt(0.1f, 0.01f);
    Parameter* params[] = {&p};
    double w[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
    const double grads[2][2] = {{0.5, -1.0}, {0.25, 3.0}};
    for (int step = 1; step <= 2; ++step) {
        GradMap g{{"w", Tensor::from({2}, {static_cast<float>(grads[step - 1][0]), static_cast<float>(grads[step - 1][1])})}};
        opt.step(params, g);
        for (int i = 0; i < 2; ++i) {
            const double gi = grads[step - 1][i];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
            w[i] = w[i] * (1 - 0.1 * 0.01) - 0.1 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(p.value[i], w[i], 1e-6) << "step " << step << " elem " << i;
        }
    }
}

TEST(AdamW, FrozenParametersAreUntouched) {
    Parameter p{"w", Tensor::from({1}, {1.0f})};
    p.value.set_requires_grad(false);
    nn::AdamW opt(0.1f, 0.5f);
    Parameter* params[] = {&p};
    opt.step(params, {{"w", Tensor::from({1}, {1.0f})}});
    EXPECT_EQ(p.value[0], 1.0f);
}

TEST(AdamW, NonFiniteGradientThrowsBeforeUpdating) {
    Parameter a{"a", Tensor::from({1}, {1.0f})}, b{"b", Tensor::from({1}, {1.0f})};
    a.value.set_requires_grad(true);
    b.value.set_requires_grad(true);
    nn::AdamW opt;
    Parameter* params[] = {&a, &b};
    GradMap g{{"a", Tensor::from({1}, {1.0f})}, {"b", Tensor::from({1}, {NAN})}};
    EXPECT_THROW(opt.step(params, g), NumericalError);
    EXPECT_EQ(a.value[0], 1.0f);
}

TEST(CosineSchedule, EndpointsAndMidpoint) {
    const nn::CosineSchedule s(1e-3f, 100);
    EXPECT_FLOAT_EQ(s.at(0), 1e-3f);
    EXPECT_NEAR(s.at(50), 5e-4f, 1e-9);
    EXPECT_NEAR(s.at(25), 0.5e-3 * (1 + std::cos(std::numbers::pi / 4)), 1e-9);
    EXPECT_EQ(s.at(100), 0.0f);
}

TEST(Layers, ConvHeInitScale) {
    SeededRng rng(1);
    nn::Conv2d conv("c", 64, 128, 3, 1, 1, rng);
    double sq = 0;
    for (float v : conv.weight.value.data()) sq += static_cast<double>(v) * v;
    const double var = sq / static_cast<double>(conv.weight.value.numel());
    EXPECT_NEAR(var, 2.0 / (128 * 9), 0.05 * 2.0 / (128 * 9));
    EXPECT_FALSE(conv.bias.value.defined());
}

TEST(Layers, ParameterNamesAreQualified) {
    SeededRng rng(1);
    nn::Linear fc("head.fc", 4, 2, rng);
    nn::StateRefs refs;
    fc.collect(refs);
    ASSERT_EQ(refs.params.size(), 2u);
    EXPECT_EQ(refs.params[0]->name, "head.fc.weight");
    EXPECT_EQ(refs.params[1]->name, "head.fc.bias");
    EXPECT_EQ(refs.parameter_count(), 10);
}

TEST(Layers, FrozenBatchNormUsesRunningStatistics) {
    nn::BatchNorm2d bn("bn", 1);
    bn.buffers.running_mean[0] = 2.0f;
    bn.buffers.running_var[0] = 4.0f;
    bn.gamma.value.set_requires_grad(false);
    GradTape tape;
    const nn::TapeMode m{&tape, true};
    const Var y = bn.forward(m, tape.constant(Tensor::from({1, 1, 1, 2}, {2.0f, 6.0f})));
    EXPECT_NEAR(y.value()[1], 2.0f, 1e-4);
    EXPECT_EQ(bn.buffers.running_mean[0], 2.0f);
}
