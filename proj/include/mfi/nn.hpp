#pragma once

// Layers, optimizer and learning-rate schedule.
//
// Layers are written once against an execution mode:
//   PlainMode  -> Tensor  (inference, no recording)
//   TapeMode   -> Var     (reverse-mode recording on a GradTape)
//   DualMode   -> Dual    (forward-mode tangent propagation)
// A mode also carries the train/eval flag that batch norm consults.

#include <map>
#include <string>
#include <vector>

#include "mfi/autodiff.hpp"
#include "mfi/dual.hpp"
#include "mfi/rng.hpp"

namespace mfi::nn {

struct PlainMode {
    using Value = Tensor;
    bool training = false;

    const Tensor& param(Parameter& p) const { return p.value; }
    Tensor input(const Tensor& t) const { return t; }
    PlainMode eval() const { return {false}; }
};

struct TapeMode {
    using Value = Var;
    GradTape* tape = nullptr;
    bool training = true;

    Var param(Parameter& p) const { return tape->param(p); }
    Var input(const Tensor& t) const { return tape->constant(t); }
    TapeMode eval() const { return {tape, false}; }
};

struct DualMode {
    using Value = Dual;
    bool training = false;

    Dual param(Parameter& p) const { return Dual(p.value); }
    Dual input(const Tensor& t) const { return Dual(t); }
    DualMode eval() const { return {false}; }
};

inline const Tensor& value_of(const Tensor& t) { return t; }
inline const Tensor& value_of(const Var& v) { return v.value(); }
inline const Tensor& value_of(const Dual& d) { return d.primal(); }

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

/// Non-owning view of a model's parameters and buffers, in a stable order.
struct StateRefs {
    std::vector<Parameter*> params;
    std::vector<NamedTensor> buffers;

    std::int64_t parameter_count() const;
};

std::string join_name(const std::string& prefix, const std::string& leaf);

class Conv2d {
  public:
    Conv2d() = default;
    /// He fan-out normal initialization; no bias unless requested.
    Conv2d(const std::string& name, std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
           std::int64_t stride, std::int64_t padding, SeededRng& rng, bool with_bias = false);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        auto y = conv2d(x, m.param(weight), geometry);
        if (bias.value.defined()) y = add(y, reshape(m.param(bias), {out_channels(), 1, 1}));
        return y;
    }

    std::int64_t in_channels() const { return weight.value.dim(1); }
    std::int64_t out_channels() const { return weight.value.dim(0); }
    std::int64_t kernel_size() const { return weight.value.dim(2); }
    void collect(StateRefs& refs);

    Parameter weight;
    Parameter bias;
    kernels::ConvGeometry geometry;
};

/// A batch norm whose affine parameters are frozen always normalizes with
/// its running statistics, so frozen sub-networks never drift.
class BatchNorm2d {
  public:
    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, std::int64_t channels, float eps = 1e-5f, float momentum = 0.1f);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        const bool batch_stats = m.training && gamma.trainable();
        return batch_norm2d(x, m.param(gamma), m.param(beta), buffers, batch_stats);
    }

    void collect(StateRefs& refs);

    Parameter gamma;
    Parameter beta;
    NormBuffers buffers;
    std::string name;
};

class Linear {
  public:
    Linear() = default;
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization for weight and bias.
    Linear(const std::string& name, std::int64_t in_features, std::int64_t out_features, SeededRng& rng);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        return linear(x, m.param(weight), m.param(bias));
    }

    std::int64_t in_features() const { return weight.value.dim(1); }
    std::int64_t out_features() const { return weight.value.dim(0); }
    void zero_();
    void collect(StateRefs& refs);

    Parameter weight;  // [out, in]
    Parameter bias;    // [out]
};

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct OptimizerState {
    struct Moments {
        Tensor first;
        Tensor second;
    };
    std::map<std::string, Moments> moments;
    std::int64_t step = 0;
    float learning_rate = 1e-3f;
    float weight_decay = 0.01f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
};

/// Adam with decoupled weight decay: w <- w (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
class AdamW {
  public:
    explicit AdamW(float learning_rate = 1e-3f, float weight_decay = 0.01f);

    /// Updates every trainable parameter that has an entry in `grads`.
    /// Throws NumericalError (before touching anything) on a non-finite gradient.
    void step(std::span<Parameter* const> params, const GradMap& grads);

    void set_learning_rate(float lr) { state_.learning_rate = lr; }
    const OptimizerState& state() const { return state_; }
    OptimizerState& state() { return state_; }

  private:
    OptimizerState state_;
};

/// lr(e) = 0.5 base (1 + cos(pi e / E)), clamped to [0, E].
class CosineSchedule {
  public:
    CosineSchedule(float base, int total_epochs) : base_(base), total_(total_epochs) {}
    float at(int epoch) const;
    float base() const { return base_; }
    int total_epochs() const { return total_; }

  private:
    float base_;
    int total_;
};

}  // namespace mfi::nn
