#include "mfi/meanflow.hpp"

#include <algorithm>
#include <cmath>

namespace mfi::meanflow {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// (1 - t) broadcast over the columns of an [N, 1] time column.
Tensor one_minus(const Tensor& t) {
    Tensor out(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = 1.0f - t[i];
    return out;
}

void check_rows(const Tensor& a, const Tensor& b, const Tensor& t, std::string_view what) {
    if (a.shape() != b.shape() || a.rank() != 2) {
        throw ShapeError(std::string(what) + ": row blocks must be equal rank-2 shapes, got " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
    }
    if (t.shape() != Shape{a.dim(0), 1}) {
        throw ShapeError(std::string(what) + ": time column must be [" + std::to_string(a.dim(0)) + ", 1], got " +
                         to_string(t.shape()));
    }
}

}  // namespace

JvpMode parse_jvp_mode(std::string_view text) {
    if (text == "full" || text == "full-jvp") return JvpMode::Full;
    if (text == "literal") return JvpMode::Literal;
    throw ConfigError("unknown jvp mode '" + std::string(text) + "' (expected full-jvp or literal)");
}

std::string_view to_string(JvpMode mode) { return mode == JvpMode::Full ? "full-jvp" : "literal"; }

TimeBatch TimeSampler::sample(SeededRng& rng, std::int64_t n) const {
    TimeBatch out{Tensor({n, 1}), Tensor({n, 1})};
    for (std::int64_t i = 0; i < n; ++i) {
        const double a = sigmoid(rng.normal(mean, stddev));
        const double b = sigmoid(rng.normal(mean, stddev));
        const float t = static_cast<float>(std::max(a, b));
        float r = static_cast<float>(std::min(a, b));
        if (rng.bernoulli(equal_fraction)) r = t;
        out.r[i] = r;
        out.t[i] = t;
    }
    return out;
}

TimeBatch rescale(const TimeBatch& times, float lo, float hi) {
    TimeBatch out{Tensor(times.r.shape()), Tensor(times.t.shape())};
    const float span = hi - lo;
    for (std::int64_t i = 0; i < times.size(); ++i) {
        out.r[i] = lo + span * times.r[i];
        out.t[i] = lo + span * times.t[i];
        // Keep collapsed pairs exactly collapsed after rounding.
        if (times.r[i] == times.t[i]) out.r[i] = out.t[i];
    }
    return out;
}

std::string FeatureDims::str() const {
    return "[" + std::to_string(channels) + "," + std::to_string(height) + "," + std::to_string(width) + "]";
}

AlignmentLayer::AlignmentLayer(const std::string& name, FeatureDims src, FeatureDims dst, SeededRng& rng)
    : source(src), target(dst) {
    if (dst.height <= 0 || src.height % dst.height != 0 || src.width % dst.width != 0) {
        throw ShapeError("align: unsupported spatial ratio from " + src.str() + " to " + dst.str());
    }
    const std::int64_t stride = src.height / dst.height;
    if ((stride != 1 && stride != 2) || src.width / dst.width != stride) {
        throw ShapeError("align: unsupported spatial ratio from " + src.str() + " to " + dst.str() +
                         " (stride must be 1 or 2)");
    }
    conv = nn::Conv2d(nn::join_name(name, "conv"), src.channels, dst.channels, 1, stride, 0, rng);
    bn = nn::BatchNorm2d(nn::join_name(name, "bn"), dst.channels);
}

void AlignmentLayer::check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != source.channels || s[2] != source.height || s[3] != source.width) {
        throw ShapeError("align: expected input [B," + std::to_string(source.channels) + "," +
                         std::to_string(source.height) + "," + std::to_string(source.width) + "], got " +
                         mfi::to_string(s));
    }
}

void AlignmentLayer::collect(nn::StateRefs& refs) {
    conv.collect(refs);
    bn.collect(refs);
}

VelocityNet::VelocityNet(const std::string& name, const VelocityNetConfig& cfg, SeededRng& rng) : cfg_(cfg) {
    if (cfg.channels < 1 || cfg.hidden < 1) throw ConfigError("velocity net: channels and hidden width must be positive");
    if (cfg.embed_dim < 4 || cfg.embed_dim % 4 != 0) {
        throw ConfigError("velocity net: embedding width must be a positive multiple of 4, got " +
                          std::to_string(cfg.embed_dim));
    }
    const std::int64_t k = cfg.embed_dim / 4;
    frequencies = Tensor({1, k});
    // Geometric frequencies from 10 down to 1e-3. The target velocity contains
    // du/dt, and the diffusion-style 1000x scale made it dominate and diverge.
    for (std::int64_t i = 0; i < k; ++i) {
        frequencies[i] = static_cast<float>(kMaxTimeFrequency * std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                                               static_cast<double>(k)));
    }
    time_mix = nn::Linear(nn::join_name(name, "time_mix"), cfg.embed_dim, cfg.embed_dim, rng);
    fc1 = nn::Linear(nn::join_name(name, "fc1"), cfg.channels + cfg.embed_dim, cfg.hidden, rng);
    fc2 = nn::Linear(nn::join_name(name, "fc2"), cfg.hidden, cfg.hidden, rng);
    fc3 = nn::Linear(nn::join_name(name, "fc3"), cfg.hidden, cfg.channels, rng);
    fc3.zero_();
}

void VelocityNet::collect(nn::StateRefs& refs) {
    time_mix.collect(refs);
    fc1.collect(refs);
    fc2.collect(refs);
    fc3.collect(refs);
}

std::int64_t velocity_net_params(const VelocityNetConfig& c) {
    const std::int64_t e = c.embed_dim, h = c.hidden, ch = c.channels;
    return (e * e + e) + ((ch + e) * h + h) + (h * h + h) + (h * ch + ch);
}

MeanFlowModule::MeanFlowModule(int stage_, FeatureDims src, FeatureDims dst, std::int64_t hidden,
                               std::int64_t embed_dim, SeededRng& rng)
    : stage(stage_), source(src), target(dst) {
    if (stage < 1 || stage > 4) throw ConfigError("meanflow: stage must be in [1, 4], got " + std::to_string(stage));
    const std::string name = "mf" + std::to_string(stage);
    align = AlignmentLayer(nn::join_name(name, "align"), src, dst, rng);
    const VelocityNetConfig cfg{dst.channels, hidden, embed_dim};
    nets.emplace_back(nn::join_name(name, "u1"), cfg, rng);
    if (stage == 4) nets.emplace_back(nn::join_name(name, "u2"), cfg, rng);
}

void MeanFlowModule::collect(nn::StateRefs& refs) {
    align.collect(refs);
    for (auto& n : nets) n.collect(refs);
}

std::int64_t MeanFlowModule::parameter_count() {
    nn::StateRefs refs;
    collect(refs);
    return refs.parameter_count();
}

std::int64_t meanflow_module_params(int stage, FeatureDims src, FeatureDims dst, std::int64_t hidden,
                                    std::int64_t embed_dim) {
    const std::int64_t align = src.channels * dst.channels + 2 * dst.channels;
    const std::int64_t nets = stage == 4 ? 2 : 1;
    return align + nets * velocity_net_params({dst.channels, hidden, embed_dim});
}

Tensor make_interpolant(const Tensor& z_align, const Tensor& z_target, const Tensor& t) {
    check_rows(z_align, z_target, t, "make_interpolant");
    return add(mul(z_align, one_minus(t)), mul(z_target, t));
}

Var make_interpolant(const Var& z_align, const Tensor& z_target, const Tensor& t) {
    check_rows(z_align.value(), z_target, t, "make_interpolant");
    return add(mul(z_align, one_minus(t)), mul(z_target, t));
}

FlowBatch make_flow_batch(Tensor z_align, Tensor z_target, TimeBatch times) {
    FlowBatch b;
    b.z_t = make_interpolant(z_align, z_target, times.t);
    b.v = sub(z_align, z_target);
    b.z_align = std::move(z_align);
    b.z_target = std::move(z_target);
    b.times = std::move(times);
    return b;
}

Tensor target_velocity(VelocityNet& net, const Tensor& z_t, const TimeBatch& times, const Tensor& v, JvpMode mode) {
    const nn::DualMode m;
    return target_velocity([&](const Dual& z, const Dual& r, const Dual& t) { return net.forward(m, z, r, t); }, z_t,
                           times, v, mode);
}

Tensor target_velocity(const DualField& field, const Tensor& z_t, const TimeBatch& times, const Tensor& v,
                       JvpMode mode) {
    if (z_t.shape() != v.shape()) {
        throw ShapeError("target_velocity: z_t " + to_string(z_t.shape()) + " and v " + to_string(v.shape()) +
                         " differ");
    }
    if (times.size() != z_t.dim(0)) throw ShapeError("target_velocity: time batch does not match row count");

    const Dual z = mode == JvpMode::Full ? Dual(z_t, neg(v)) : Dual(z_t);
    const Dual r(times.r);
    const Dual t(times.t, Tensor::ones(times.t.shape()));
    const Dual u = field(z, r, t);

    const Tensor gap = sub(times.t, times.r);
    Tensor out = sub(v, mul(u.tangent_or_zero(), gap));
    // Rows with r == t must return v exactly, whatever the derivative is.
    const std::int64_t cols = v.dim(1);
    for (std::int64_t i = 0; i < gap.numel(); ++i) {
        if (gap[i] == 0.0f) std::copy_n(v.ptr() + i * cols, cols, out.ptr() + i * cols);
    }
    if (!out.all_finite()) throw NumericalError("target_velocity: non-finite JVP result");
    return out;
}

Tensor flow_matching_loss(const Tensor& u_pred, const Tensor& u_target) {
    if (u_pred.shape() != u_target.shape() || u_pred.rank() != 2) {
        throw ShapeError("flow_matching_loss: prediction " + to_string(u_pred.shape()) + " and target " +
                         to_string(u_target.shape()) + " must be equal rank-2 shapes");
    }
    const Tensor d = sub(u_pred, u_target);
    return scale(sum_all(mul(d, d)), 1.0f / static_cast<float>(u_pred.dim(0)));
}

Var flow_matching_loss(const Var& u_pred, const Tensor& u_target) {
    if (u_pred.shape() != u_target.shape() || u_pred.value().rank() != 2) {
        throw ShapeError("flow_matching_loss: prediction " + to_string(u_pred.shape()) + " and target " +
                         to_string(u_target.shape()) + " must be equal rank-2 shapes");
    }
    const Var d = sub(u_pred, u_target);
    return scale(sum_all(mul(d, d)), 1.0f / static_cast<float>(u_pred.value().dim(0)));
}

}  // namespace mfi::meanflow
