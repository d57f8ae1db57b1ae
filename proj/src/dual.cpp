#include "mfi/dual.hpp"

#include <cmath>

#include "mfi/error.hpp"

namespace mfi {

Dual::Dual(Tensor primal, Tensor tangent) : primal_(std::move(primal)), tangent_(std::move(tangent)) {
    if (tangent_.defined() && tangent_.shape() != primal_.shape()) {
        throw ShapeError("dual: tangent shape " + to_string(tangent_.shape()) + " differs from primal " +
                         to_string(primal_.shape()));
    }
}

namespace {

Tensor expand_to(const Tensor& t, const Shape& shape) {
    if (t.shape() == shape) return t;
    return add(Tensor(shape), t);
}

// Sum of two optional tangents, each broadcast to `shape`.
Tensor tangent_sum(Tensor a, Tensor b, const Shape& shape) {
    if (!a.defined() && !b.defined()) return Tensor();
    if (!a.defined()) return expand_to(b, shape);
    if (!b.defined()) return expand_to(a, shape);
    return add(a, b);
}

// Apply a linear map to the tangent, keeping zero tangents symbolic.
template <class F>
Dual linear_map(const Dual& a, Tensor primal, F f) {
    if (!a.has_tangent()) return Dual(std::move(primal));
    return Dual(std::move(primal), f(a.tangent()));
}

}  // namespace

JvpResult jvp(const DualFunction& f, std::span<const Tensor> inputs, std::span<const Tensor> tangents) {
    if (inputs.size() != tangents.size()) {
        throw ShapeError("jvp: " + std::to_string(inputs.size()) + " inputs but " + std::to_string(tangents.size()) +
                         " tangents");
    }
    std::vector<Dual> duals;
    duals.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (tangents[i].defined() && tangents[i].shape() != inputs[i].shape()) {
            throw ShapeError("jvp: tangent " + std::to_string(i) + " has shape " + to_string(tangents[i].shape()) +
                             " but input has " + to_string(inputs[i].shape()));
        }
        duals.emplace_back(inputs[i], tangents[i]);
    }
    Dual out = f(duals);
    return {out.primal(), out.tangent_or_zero()};
}

Dual add(const Dual& a, const Dual& b) {
    Tensor p = add(a.primal(), b.primal());
    Shape s = p.shape();
    return Dual(std::move(p), tangent_sum(a.tangent(), b.tangent(), s));
}

Dual sub(const Dual& a, const Dual& b) {
    Tensor p = sub(a.primal(), b.primal());
    Shape s = p.shape();
    return Dual(std::move(p), tangent_sum(a.tangent(), b.has_tangent() ? neg(b.tangent()) : Tensor(), s));
}

Dual mul(const Dual& a, const Dual& b) {
    Tensor p = mul(a.primal(), b.primal());
    Shape s = p.shape();
    Tensor ta = a.has_tangent() ? mul(a.tangent(), b.primal()) : Tensor();
    Tensor tb = b.has_tangent() ? mul(a.primal(), b.tangent()) : Tensor();
    return Dual(std::move(p), tangent_sum(std::move(ta), std::move(tb), s));
}

Dual add(const Dual& a, const Tensor& b) { return add(a, Dual(b)); }
Dual sub(const Dual& a, const Tensor& b) { return sub(a, Dual(b)); }
Dual mul(const Dual& a, const Tensor& b) { return mul(a, Dual(b)); }

Dual scale(const Dual& a, float s) {
    return linear_map(a, scale(a.primal(), s), [s](const Tensor& t) { return scale(t, s); });
}

Dual neg(const Dual& a) { return scale(a, -1.0f); }

Dual relu(const Dual& a) {
    return linear_map(a, relu(a.primal()), [&](const Tensor& t) {
        Tensor out = t;
        const float* x = a.primal().ptr();
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            if (!(x[i] > 0.0f)) out[i] = 0.0f;
        }
        return out;
    });
}

Dual sin(const Dual& a) {
    return linear_map(a, sin(a.primal()), [&](const Tensor& t) { return mul(t, cos(a.primal())); });
}

Dual cos(const Dual& a) {
    return linear_map(a, cos(a.primal()), [&](const Tensor& t) { return neg(mul(t, sin(a.primal()))); });
}

Dual matmul(const Dual& a, const Dual& b) {
    Tensor p = matmul(a.primal(), b.primal());
    Shape s = p.shape();
    Tensor ta = a.has_tangent() ? matmul(a.tangent(), b.primal()) : Tensor();
    Tensor tb = b.has_tangent() ? matmul(a.primal(), b.tangent()) : Tensor();
    return Dual(std::move(p), tangent_sum(std::move(ta), std::move(tb), s));
}

Dual transpose_last2(const Dual& a) {
    return linear_map(a, transpose_last2(a.primal()), [](const Tensor& t) { return transpose_last2(t); });
}

Dual reshape(const Dual& a, Shape shape) {
    Tensor p = a.primal().reshape(shape);
    return linear_map(a, std::move(p), [&](const Tensor& t) { return t.reshape(shape); });
}

Dual flatten(const Dual& a, int start_axis) {
    return linear_map(a, flatten(a.primal(), start_axis), [=](const Tensor& t) { return flatten(t, start_axis); });
}

Dual sum(const Dual& a, std::vector<int> axes, bool keepdim) {
    return linear_map(a, sum(a.primal(), axes, keepdim), [&](const Tensor& t) { return sum(t, axes, keepdim); });
}

Dual mean(const Dual& a, std::vector<int> axes, bool keepdim) {
    return linear_map(a, mean(a.primal(), axes, keepdim), [&](const Tensor& t) { return mean(t, axes, keepdim); });
}

Dual sum_all(const Dual& a) {
    return linear_map(a, sum_all(a.primal()), [](const Tensor& t) { return sum_all(t); });
}

Dual mean_all(const Dual& a) {
    return linear_map(a, mean_all(a.primal()), [](const Tensor& t) { return mean_all(t); });
}

Dual concat_cols(std::span<const Dual> parts) {
    std::vector<Tensor> primals;
    bool any = false;
    for (const auto& p : parts) {
        primals.push_back(p.primal());
        any = any || p.has_tangent();
    }
    Tensor primal = concat_cols(primals);
    if (!any) return Dual(std::move(primal));
    std::vector<Tensor> tangents;
    for (const auto& p : parts) tangents.push_back(p.tangent_or_zero());
    return Dual(std::move(primal), concat_cols(tangents));
}

Dual slice_cols(const Dual& a, std::int64_t begin, std::int64_t count) {
    return linear_map(a, slice_cols(a.primal(), begin, count),
                      [=](const Tensor& t) { return slice_cols(t, begin, count); });
}

Dual linear(const Dual& x, const Dual& weight, const Dual& bias) {
    const bool has_bias = bias.primal().defined();
    Tensor p = linear(x.primal(), weight.primal(), has_bias ? bias.primal() : Tensor());
    Shape s = p.shape();
    // d(xW^T + b) = dx W^T + x dW^T + db
    Tensor tx = x.has_tangent() ? linear(x.tangent(), weight.primal(), Tensor()) : Tensor();
    Tensor tw;
    if (weight.has_tangent() || (has_bias && bias.has_tangent())) {
        tw = linear(x.primal(), weight.tangent_or_zero(), has_bias ? bias.tangent_or_zero() : Tensor());
    }
    return Dual(std::move(p), tangent_sum(std::move(tx), std::move(tw), s));
}

Dual nchw_to_rows(const Dual& x) {
    return linear_map(x, nchw_to_rows(x.primal()), [](const Tensor& t) { return nchw_to_rows(t); });
}

Dual rows_to_nchw(const Dual& rows, std::int64_t batch, std::int64_t height, std::int64_t width) {
    return linear_map(rows, rows_to_nchw(rows.primal(), batch, height, width),
                      [=](const Tensor& t) { return rows_to_nchw(t, batch, height, width); });
}

Dual global_avg_pool(const Dual& x) {
    return linear_map(x, global_avg_pool(x.primal()), [](const Tensor& t) { return global_avg_pool(t); });
}

Dual conv2d(const Dual& x, const Dual& weight, const kernels::ConvGeometry& g) {
    Tensor p = kernels::conv2d_forward(x.primal(), weight.primal(), g);
    Shape s = p.shape();
    Tensor tx = x.has_tangent() ? kernels::conv2d_forward(x.tangent(), weight.primal(), g) : Tensor();
    Tensor tw = weight.has_tangent() ? kernels::conv2d_forward(x.primal(), weight.tangent(), g) : Tensor();
    return Dual(std::move(p), tangent_sum(std::move(tx), std::move(tw), s));
}

Dual batch_norm2d(const Dual& x, const Dual& gamma, const Dual& beta, NormBuffers& buffers, bool training) {
    const Tensor& xv = x.primal();
    std::vector<float> mu, var;
    if (training) {
        auto stats = kernels::channel_stats(xv);
        mu = std::move(stats.mean);
        var = std::move(stats.var);
    } else {
        mu.assign(buffers.running_mean.data().begin(), buffers.running_mean.data().end());
        var.assign(buffers.running_var.data().begin(), buffers.running_var.data().end());
    }
    Tensor y = kernels::batch_norm_apply(xv, mu, var, gamma.primal(), beta.primal(), buffers.eps);
    if (!x.has_tangent() && !gamma.has_tangent() && !beta.has_tangent()) return Dual(std::move(y));

    const std::int64_t b = xv.dim(0), ch = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    const float count = static_cast<float>(b * hw);
    const Tensor dx = x.tangent_or_zero();
    const Tensor dg = gamma.tangent_or_zero();
    const Tensor db = beta.tangent_or_zero();
    Tensor t(xv.shape());
    for (std::int64_t k = 0; k < ch; ++k) {
        const float inv = 1.0f / std::sqrt(var[k] + buffers.eps);
        // In training mode the statistics move with x:
        // xhat' = (x' - mean(x')) inv - xhat * mean(xhat * x') inv
        float m_dx = 0.0f, m_xhat_dx = 0.0f;
        if (training) {
            for (std::int64_t i = 0; i < b; ++i) {
                const std::int64_t off = (i * ch + k) * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                    const float xhat = (xv[off + p] - mu[k]) * inv;
                    m_dx += dx[off + p];
                    m_xhat_dx += xhat * dx[off + p];
                }
            }
            m_dx /= count;
            m_xhat_dx /= count;
        }
        for (std::int64_t i = 0; i < b; ++i) {
            const std::int64_t off = (i * ch + k) * hw;
            for (std::int64_t p = 0; p < hw; ++p) {
                const float xhat = (xv[off + p] - mu[k]) * inv;
                const float dxhat = (dx[off + p] - m_dx) * inv - xhat * m_xhat_dx * inv;
                t[off + p] = dg[k] * xhat + gamma.primal()[k] * dxhat + db[k];
            }
        }
    }
    return Dual(std::move(y), std::move(t));
}

Dual cross_entropy_label_smoothed(const Dual&, std::span<const int>, float) {
    throw UnsupportedKernel("cross_entropy_label_smoothed");
}

}  // namespace mfi
