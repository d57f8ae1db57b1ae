#pragma once

// MeanFlow stage mapping: a 1x1 alignment layer lifts X^(l-1) to the shape of
// X^(l), then a per-location velocity network transports the aligned features
// toward the teacher's stage output in one step (two for stage 4).
//
// Conventions used throughout:
//   z_t = (1 - t) z_align + t z_target,    v = z_align - z_target
//   z_mapped = z_align - (t - r) u(z_align, r, t)

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mfi/error.hpp"
#include "mfi/nn.hpp"

namespace mfi::meanflow {

enum class JvpMode {
    Full,     // total derivative along the path: tangents (dz, dr, dt) = (-v, 0, 1)
    Literal,  // partial derivative in t only
};

JvpMode parse_jvp_mode(std::string_view text);
std::string_view to_string(JvpMode mode);
using mfi::to_string;

/// Per-row time pairs, each column [N, 1], with 0 <= r <= t <= 1.
struct TimeBatch {
    Tensor r;
    Tensor t;

    std::int64_t size() const { return t.defined() ? t.dim(0) : 0; }
};

struct TimeSampler {
    double mean = -0.4;
    double stddev = 1.0;
    double equal_fraction = 0.75;

    /// Two sigmoid-normal draws sorted into (r, t); r collapses onto t with
    /// probability `equal_fraction`.
    TimeBatch sample(SeededRng& rng, std::int64_t n) const;
};

/// Affine map of times from [0, 1] onto [lo, hi].
TimeBatch rescale(const TimeBatch& times, float lo, float hi);

struct FeatureDims {
    std::int64_t channels = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;

    bool operator==(const FeatureDims&) const = default;
    std::string str() const;
};

/// relu(bn(W_align * x)) with a 1x1 kernel; the stride is the spatial ratio
/// between source and target, which must be 1 or 2.
class AlignmentLayer {
  public:
    AlignmentLayer() = default;
    AlignmentLayer(const std::string& name, FeatureDims source, FeatureDims target, SeededRng& rng);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        check_input(nn::value_of(x).shape());
        return relu(bn.forward(m, conv.forward(m, x)));
    }

    void collect(nn::StateRefs& refs);

    FeatureDims source;
    FeatureDims target;
    nn::Conv2d conv;
    nn::BatchNorm2d bn;

  private:
    void check_input(const Shape& shape) const;
};

/// Largest angular frequency of the sinusoidal (r, t) embedding.
inline constexpr double kMaxTimeFrequency = 10.0;

struct VelocityNetConfig {
    std::int64_t channels = 0;
    std::int64_t hidden = 64;
    std::int64_t embed_dim = 64;  // multiple of 4
};

/// Per-row MLP u(z, r, t): [z, W (emb(r), emb(t))] -> h -> h -> C with relu.
/// The output layer starts at zero, so a fresh net is the zero field.
class VelocityNet {
  public:
    VelocityNet() = default;
    VelocityNet(const std::string& name, const VelocityNetConfig& cfg, SeededRng& rng);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& z, const typename Mode::Value& r,
                                 const typename Mode::Value& t) {
        using V = typename Mode::Value;
        const V er = mul(r, frequencies);
        const V et = mul(t, frequencies);
        const V emb_parts[] = {sin(er), cos(er), sin(et), cos(et)};
        const V emb = time_mix.forward(m, concat_cols(std::span<const V>(emb_parts)));
        const V in_parts[] = {z, emb};
        V h = relu(fc1.forward(m, concat_cols(std::span<const V>(in_parts))));
        h = relu(fc2.forward(m, h));
        return fc3.forward(m, h);
    }

    const VelocityNetConfig& config() const { return cfg_; }
    void collect(nn::StateRefs& refs);

    nn::Linear time_mix;
    nn::Linear fc1, fc2, fc3;
    Tensor frequencies;  // [1, embed_dim / 4]

  private:
    VelocityNetConfig cfg_;
};

/// Parameter count of a VelocityNet without building it.
std::int64_t velocity_net_params(const VelocityNetConfig& cfg);

/// Alignment plus one velocity net (stages 1-3) or two (stage 4).
class MeanFlowModule {
  public:
    MeanFlowModule() = default;
    MeanFlowModule(int stage, FeatureDims source, FeatureDims target, std::int64_t hidden, std::int64_t embed_dim,
                   SeededRng& rng);

    bool two_step() const { return nets.size() == 2; }

    /// Single step for stages 1-3, two steps for stage 4.
    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        return two_step() ? map_two_step(m, x) : map_single_step(m, x);
    }

    /// z_align - u(z_align, 0, 1), reshaped to the target dims.
    template <class Mode>
    typename Mode::Value map_single_step(const Mode& m, const typename Mode::Value& x) {
        if (nets.size() != 1) {
            throw ShapeError("map_single_step: stage " + std::to_string(stage) +
                             " module has two velocity nets; use map_two_step");
        }
        const auto aligned = align.forward(m, x);
        const std::int64_t batch = nn::value_of(aligned).dim(0);
        const auto z0 = nchw_to_rows(aligned);
        const auto z1 = sub(z0, nets[0].forward(m, z0, time_column(m, z0, 0.0f), time_column(m, z0, 1.0f)));
        return rows_to_nchw(z1, batch, target.height, target.width);
    }

    /// z_0.5 = z_0 - 0.5 u1(z_0, 0, 0.5); z_1 = z_0.5 - 0.5 u2(z_0.5, 0.5, 1).
    template <class Mode>
    typename Mode::Value map_two_step(const Mode& m, const typename Mode::Value& x) {
        if (nets.size() != 2) {
            throw ShapeError("map_two_step: stage " + std::to_string(stage) + " module needs two velocity nets, has " +
                             std::to_string(nets.size()));
        }
        const auto aligned = align.forward(m, x);
        const std::int64_t batch = nn::value_of(aligned).dim(0);
        const auto z0 = nchw_to_rows(aligned);
        const auto half = time_column(m, z0, 0.5f);
        const auto zh = sub(z0, scale(nets[0].forward(m, z0, time_column(m, z0, 0.0f), half), 0.5f));
        const auto z1 = sub(zh, scale(nets[1].forward(m, zh, half, time_column(m, z0, 1.0f)), 0.5f));
        return rows_to_nchw(z1, batch, target.height, target.width);
    }

    void collect(nn::StateRefs& refs);
    std::int64_t parameter_count();

    int stage = 0;
    FeatureDims source;
    FeatureDims target;
    AlignmentLayer align;
    std::vector<VelocityNet> nets;

  private:
    template <class Mode>
    static typename Mode::Value time_column(const Mode& m, const typename Mode::Value& rows, float value) {
        return m.input(Tensor::full({nn::value_of(rows).dim(0), 1}, value));
    }
};

/// Parameter count of a MeanFlowModule without building it.
std::int64_t meanflow_module_params(int stage, FeatureDims source, FeatureDims target, std::int64_t hidden,
                                    std::int64_t embed_dim);

/// Rows of one training batch for a single velocity net.
struct FlowBatch {
    Tensor z_align;   // [N, C]
    Tensor z_target;  // [N, C]
    Tensor v;         // z_align - z_target
    TimeBatch times;
    Tensor z_t;
};

FlowBatch make_flow_batch(Tensor z_align, Tensor z_target, TimeBatch times);

/// (1 - t) z_align + t z_target, row-wise t.
Tensor make_interpolant(const Tensor& z_align, const Tensor& z_target, const Tensor& t);
Var make_interpolant(const Var& z_align, const Tensor& z_target, const Tensor& t);

/// u_target = v - (t - r) du/dt, evaluated by forward-mode differentiation and
/// returned as a plain (detached) tensor. Throws NumericalError if non-finite.
Tensor target_velocity(VelocityNet& net, const Tensor& z_t, const TimeBatch& times, const Tensor& v, JvpMode mode);

/// Any field u(z, r, t) written against dual numbers.
using DualField = std::function<Dual(const Dual& z, const Dual& r, const Dual& t)>;
Tensor target_velocity(const DualField& field, const Tensor& z_t, const TimeBatch& times, const Tensor& v,
                       JvpMode mode);

/// Mean over rows of the squared row norm of (u_pred - u_target).
Tensor flow_matching_loss(const Tensor& u_pred, const Tensor& u_target);
Var flow_matching_loss(const Var& u_pred, const Tensor& u_target);

}  // namespace mfi::meanflow
