#include "mfi/nn.hpp"

#include <cmath>
#include <numbers>

#include "mfi/error.hpp"

namespace mfi::nn {

std::int64_t StateRefs::parameter_count() const {
    std::int64_t n = 0;
    for (const auto* p : params) n += p->value.numel();
    return n;
}

std::string join_name(const std::string& prefix, const std::string& leaf) {
    return prefix.empty() ? leaf : prefix + "." + leaf;
}

Conv2d::Conv2d(const std::string& name, std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
               std::int64_t stride, std::int64_t padding, SeededRng& rng, bool with_bias)
    : geometry{stride, padding} {
    const float std = std::sqrt(2.0f / static_cast<float>(out_channels * kernel * kernel));
    weight = {join_name(name, "weight"), rng.normal_tensor({out_channels, in_channels, kernel, kernel}, 0.0f, std)};
    weight.value.set_requires_grad(true);
    if (with_bias) {
        bias = {join_name(name, "bias"), Tensor({out_channels})};
        bias.value.set_requires_grad(true);
    }
}

void Conv2d::collect(StateRefs& refs) {
    refs.params.push_back(&weight);
    if (bias.value.defined()) refs.params.push_back(&bias);
}

BatchNorm2d::BatchNorm2d(const std::string& name, std::int64_t channels, float eps, float momentum)
    : gamma{join_name(name, "weight"), Tensor::ones({channels})},
      beta{join_name(name, "bias"), Tensor::zeros({channels})},
      buffers{Tensor::zeros({channels}), Tensor::ones({channels}), momentum, eps},
      name(name) {
    gamma.value.set_requires_grad(true);
    beta.value.set_requires_grad(true);
}

void BatchNorm2d::collect(StateRefs& refs) {
    refs.params.push_back(&gamma);
    refs.params.push_back(&beta);
    refs.buffers.push_back({join_name(name, "running_mean"), &buffers.running_mean});
    refs.buffers.push_back({join_name(name, "running_var"), &buffers.running_var});
}

Linear::Linear(const std::string& name, std::int64_t in_features, std::int64_t out_features, SeededRng& rng) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(in_features));
    weight = {join_name(name, "weight"), rng.uniform_tensor({out_features, in_features}, -bound, bound)};
    bias = {join_name(name, "bias"), rng.uniform_tensor({out_features}, -bound, bound)};
    weight.value.set_requires_grad(true);
    bias.value.set_requires_grad(true);
}

void Linear::zero_() {
    weight.value.fill(0.0f);
    bias.value.fill(0.0f);
}

void Linear::collect(StateRefs& refs) {
    refs.params.push_back(&weight);
    refs.params.push_back(&bias);
}

AdamW::AdamW(float learning_rate, float weight_decay) {
    state_.learning_rate = learning_rate;
    state_.weight_decay = weight_decay;
}

void AdamW::step(std::span<Parameter* const> params, const GradMap& grads) {
    std::vector<std::pair<Parameter*, const Tensor*>> work;
    for (Parameter* p : params) {
        if (!p->trainable()) continue;
        auto it = grads.find(p->name);
        if (it == grads.end()) continue;
        if (it->second.shape() != p->value.shape()) {
            throw ShapeError("adamw: gradient for '" + p->name + "' has shape " + to_string(it->second.shape()) +
                             ", parameter has " + to_string(p->value.shape()));
        }
        if (!it->second.all_finite()) throw NumericalError("adamw: non-finite gradient for parameter '" + p->name + "'");
        work.emplace_back(p, &it->second);
    }
    ++state_.step;
    const auto& s = state_;
    const float bc1 = 1.0f - std::pow(s.beta1, static_cast<float>(s.step));
    const float bc2 = 1.0f - std::pow(s.beta2, static_cast<float>(s.step));
    const float decay = 1.0f - s.learning_rate * s.weight_decay;
    for (auto [p, g] : work) {
        auto& mom = state_.moments[p->name];
        if (!mom.first.defined()) {
            mom.first = Tensor(p->value.shape());
            mom.second = Tensor(p->value.shape());
        }
        float* w = p->value.ptr();
        float* m = mom.first.ptr();
        float* v = mom.second.ptr();
        const float* gr = g->ptr();
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            m[i] = s.beta1 * m[i] + (1.0f - s.beta1) * gr[i];
            v[i] = s.beta2 * v[i] + (1.0f - s.beta2) * gr[i] * gr[i];
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            w[i] = w[i] * decay - s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon);
        }
    }
}

float CosineSchedule::at(int epoch) const {
    if (total_ <= 0) return base_;
    const int e = std::clamp(epoch, 0, total_);
    if (e == total_) return 0.0f;
    return 0.5f * base_ * (1.0f + static_cast<float>(std::cos(std::numbers::pi * e / total_)));
}

}  // namespace mfi::nn
