#include "mfi/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "eigen_maps.hpp"
#include "mfi/error.hpp"

namespace mfi::kernels {

namespace {

// Upper bound on the im2col buffer, in floats; the batch is processed in chunks below it.
constexpr std::int64_t kColumnBudget = std::int64_t{1} << 23;

struct ConvDims {
    std::int64_t batch, in_ch, height, width;
    std::int64_t out_ch, kh, kw;
    std::int64_t out_h, out_w;

    std::int64_t patch() const { return in_ch * kh * kw; }
    std::int64_t out_hw() const { return out_h * out_w; }
    std::int64_t chunk() const { return std::clamp<std::int64_t>(kColumnBudget / (patch() * out_hw()), 1, batch); }
};

ConvDims conv_dims(const Shape& x, const Shape& w, const ConvGeometry& g) {
    if (x.size() != 4 || w.size() != 4) {
        throw ShapeError("conv2d: expected rank-4 input and weight, got " + to_string(x) + " and " + to_string(w));
    }
    if (x[1] != w[1]) {
        throw ShapeError("conv2d: input has " + std::to_string(x[1]) + " channels but weight " + to_string(w) +
                         " expects " + std::to_string(w[1]));
    }
    if (g.stride < 1 || g.padding < 0) throw ShapeError("conv2d: invalid stride/padding");
    ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0};
    d.out_h = conv_out_extent(d.height, d.kh, g);
    d.out_w = conv_out_extent(d.width, d.kw, g);
    if (d.out_h < 1 || d.out_w < 1) {
        throw ShapeError("conv2d: kernel " + to_string(w) + " larger than padded input " + to_string(x));
    }
    return d;
}

// Output columns [lo, hi) read an in-bounds input column for kernel offset kj.
std::pair<std::int64_t, std::int64_t> valid_columns(const ConvDims& d, const ConvGeometry& g, std::int64_t kj) {
    const std::int64_t shift = kj - g.padding;
    const std::int64_t lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
    const std::int64_t last = d.width - 1 - shift;
    const std::int64_t hi = last < 0 ? 0 : std::min(last / g.stride + 1, d.out_w);
    return {std::min(lo, d.out_w), std::max(hi, std::min(lo, d.out_w))};
}

// cols[(c*kh + i)*kw + j, (b - b0)*out_hw + oy*out_w + ox] = x[b, c, oy*s - p + i, ox*s - p + j]
void im2col(const float* x, const ConvDims& d, const ConvGeometry& g, std::int64_t b0, std::int64_t nb,
            float* cols) {
    const std::int64_t ncols = nb * d.out_hw();
    for (std::int64_t c = 0; c < d.in_ch; ++c) {
        for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
                float* row = cols + ((c * d.kh + ki) * d.kw + kj) * ncols;
                const auto [lo, hi] = valid_columns(d, g, kj);
                const std::int64_t shift = kj - g.padding;
                for (std::int64_t b = 0; b < nb; ++b) {
                    const float* plane = x + ((b0 + b) * d.in_ch + c) * d.height * d.width;
                    float* dst = row + b * d.out_hw();
                    for (std::int64_t oy = 0; oy < d.out_h; ++oy) {
                        const std::int64_t iy = oy * g.stride - g.padding + ki;
                        float* drow = dst + oy * d.out_w;
                        if (iy < 0 || iy >= d.height) {
                            std::fill(drow, drow + d.out_w, 0.0f);
                            continue;
                        }
                        const float* srow = plane + iy * d.width;
                        std::fill(drow, drow + lo, 0.0f);
                        if (g.stride == 1) {
                            if (hi > lo) std::copy(srow + lo + shift, srow + hi + shift, drow + lo);
                        } else {
                            for (std::int64_t ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * g.stride + shift];
                        }
                        std::fill(drow + hi, drow + d.out_w, 0.0f);
                    }
                }
            }
        }
    }
}

void col2im(const float* cols, const ConvDims& d, const ConvGeometry& g, std::int64_t b0, std::int64_t nb,
            float* x) {
    const std::int64_t ncols = nb * d.out_hw();
    for (std::int64_t c = 0; c < d.in_ch; ++c) {
        for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
                const float* row = cols + ((c * d.kh + ki) * d.kw + kj) * ncols;
                const auto [lo, hi] = valid_columns(d, g, kj);
                const std::int64_t shift = kj - g.padding;
                for (std::int64_t b = 0; b < nb; ++b) {
                    float* plane = x + ((b0 + b) * d.in_ch + c) * d.height * d.width;
                    const float* src = row + b * d.out_hw();
                    for (std::int64_t oy = 0; oy < d.out_h; ++oy) {
                        const std::int64_t iy = oy * g.stride - g.padding + ki;
                        if (iy < 0 || iy >= d.height) continue;
                        float* drow = plane + iy * d.width;
                        const float* srow = src + oy * d.out_w;
                        for (std::int64_t ox = lo; ox < hi; ++ox) drow[ox * g.stride + shift] += srow[ox];
                    }
                }
            }
        }
    }
}

// 1x1, stride 1, no padding: the input planes already are the column matrix.
bool is_pointwise(const ConvDims& d, const ConvGeometry& g) {
    return d.kh == 1 && d.kw == 1 && g.stride == 1 && g.padding == 0;
}

// [Cout, nb*out_hw] <-> NCHW slice of images [b0, b0 + nb)
void scatter_output(const float* mat, const ConvDims& d, std::int64_t b0, std::int64_t nb, float* out) {
    const std::int64_t ncols = nb * d.out_hw();
    for (std::int64_t b = 0; b < nb; ++b) {
        for (std::int64_t co = 0; co < d.out_ch; ++co) {
            const float* src = mat + co * ncols + b * d.out_hw();
            std::copy(src, src + d.out_hw(), out + ((b0 + b) * d.out_ch + co) * d.out_hw());
        }
    }
}

void gather_output(const float* out, const ConvDims& d, std::int64_t b0, std::int64_t nb, float* mat) {
    const std::int64_t ncols = nb * d.out_hw();
    for (std::int64_t b = 0; b < nb; ++b) {
        for (std::int64_t co = 0; co < d.out_ch; ++co) {
            const float* src = out + ((b0 + b) * d.out_ch + co) * d.out_hw();
            std::copy(src, src + d.out_hw(), mat + co * ncols + b * d.out_hw());
        }
    }
}

void check_channels(const Tensor& x, std::int64_t n, const char* kernel) {
    if (x.rank() != 4) throw ShapeError(std::string(kernel) + ": expected NCHW input, got " + to_string(x.shape()));
    if (x.dim(1) != n) {
        throw ShapeError(std::string(kernel) + ": input " + to_string(x.shape()) + " vs " + std::to_string(n) +
                         " channel parameters");
    }
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, const ConvGeometry& g) {
    const std::int64_t span = in + 2 * g.padding - kernel;
    if (span < 0) return 0;
    return span / g.stride + 1;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const ConvGeometry& g) {
    const ConvDims d = conv_dims(x.shape(), weight.shape(), g);
    Tensor out({d.batch, d.out_ch, d.out_h, d.out_w});
    if (is_pointwise(d, g)) {
        const auto w = detail::map(weight.ptr(), d.out_ch, d.in_ch);
        for (std::int64_t b = 0; b < d.batch; ++b) {
            detail::map(out.ptr() + b * d.out_ch * d.out_hw(), d.out_ch, d.out_hw()).noalias() =
                w * detail::map(x.ptr() + b * d.in_ch * d.out_hw(), d.in_ch, d.out_hw());
        }
        return out;
    }
    const std::int64_t chunk = d.chunk();
    std::vector<float> cols(static_cast<std::size_t>(d.patch() * chunk * d.out_hw()));
    std::vector<float> mat(static_cast<std::size_t>(d.out_ch * chunk * d.out_hw()));
    const auto w = detail::map(weight.ptr(), d.out_ch, d.patch());
    for (std::int64_t b0 = 0; b0 < d.batch; b0 += chunk) {
        const std::int64_t nb = std::min(chunk, d.batch - b0);
        const std::int64_t ncols = nb * d.out_hw();
        im2col(x.ptr(), d, g, b0, nb, cols.data());
        detail::map(mat.data(), d.out_ch, ncols).noalias() = w * detail::map(cols.data(), d.patch(), ncols);
        scatter_output(mat.data(), d, b0, nb, out.ptr());
    }
    return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape,
                         const ConvGeometry& g) {
    const ConvDims d = conv_dims(input_shape, weight.shape(), g);
    Tensor grad_in(input_shape);
    if (is_pointwise(d, g)) {
        const auto w = detail::map(weight.ptr(), d.out_ch, d.in_ch);
        for (std::int64_t b = 0; b < d.batch; ++b) {
            detail::map(grad_in.ptr() + b * d.in_ch * d.out_hw(), d.in_ch, d.out_hw()).noalias() =
                w.transpose() * detail::map(grad_out.ptr() + b * d.out_ch * d.out_hw(), d.out_ch, d.out_hw());
        }
        return grad_in;
    }
    const std::int64_t chunk = d.chunk();
    std::vector<float> cols(static_cast<std::size_t>(d.patch() * chunk * d.out_hw()));
    std::vector<float> mat(static_cast<std::size_t>(d.out_ch * chunk * d.out_hw()));
    const auto w = detail::map(weight.ptr(), d.out_ch, d.patch());
    for (std::int64_t b0 = 0; b0 < d.batch; b0 += chunk) {
        const std::int64_t nb = std::min(chunk, d.batch - b0);
        const std::int64_t ncols = nb * d.out_hw();
        gather_output(grad_out.ptr(), d, b0, nb, mat.data());
        detail::map(cols.data(), d.patch(), ncols).noalias() =
            w.transpose() * detail::map(mat.data(), d.out_ch, ncols);
        col2im(cols.data(), d, g, b0, nb, grad_in.ptr());
    }
    return grad_in;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape,
                          const ConvGeometry& g) {
    const ConvDims d = conv_dims(x.shape(), weight_shape, g);
    Tensor grad_w(weight_shape);
    if (is_pointwise(d, g)) {
        auto gw = detail::map(grad_w.ptr(), d.out_ch, d.in_ch);
        for (std::int64_t b = 0; b < d.batch; ++b) {
            gw.noalias() += detail::map(grad_out.ptr() + b * d.out_ch * d.out_hw(), d.out_ch, d.out_hw()) *
                            detail::map(x.ptr() + b * d.in_ch * d.out_hw(), d.in_ch, d.out_hw()).transpose();
        }
        return grad_w;
    }
    const std::int64_t chunk = d.chunk();
    std::vector<float> cols(static_cast<std::size_t>(d.patch() * chunk * d.out_hw()));
    std::vector<float> mat(static_cast<std::size_t>(d.out_ch * chunk * d.out_hw()));
    auto gw = detail::map(grad_w.ptr(), d.out_ch, d.patch());
    for (std::int64_t b0 = 0; b0 < d.batch; b0 += chunk) {
        const std::int64_t nb = std::min(chunk, d.batch - b0);
        const std::int64_t ncols = nb * d.out_hw();
        im2col(x.ptr(), d, g, b0, nb, cols.data());
        gather_output(grad_out.ptr(), d, b0, nb, mat.data());
        gw.noalias() += detail::map(mat.data(), d.out_ch, ncols) * detail::map(cols.data(), d.patch(), ncols).transpose();
    }
    return grad_w;
}

ChannelStats channel_stats(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("batch_norm2d: expected NCHW input, got " + to_string(x.shape()));
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const float count = static_cast<float>(b * hw);
    ChannelStats s{std::vector<float>(c, 0.0f), std::vector<float>(c, 0.0f)};
    const float* px = x.ptr();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        float acc = 0.0f;
        for (std::int64_t i = 0; i < b; ++i) {
            const float* p = px + (i * c + ch) * hw;
            float row = 0.0f;
            for (std::int64_t k = 0; k < hw; ++k) row += p[k];
            acc += row;
        }
        const float m = acc / count;
        float sq = 0.0f;
        for (std::int64_t i = 0; i < b; ++i) {
            const float* p = px + (i * c + ch) * hw;
            float row = 0.0f;
            for (std::int64_t k = 0; k < hw; ++k) row += (p[k] - m) * (p[k] - m);
            sq += row;
        }
        s.mean[ch] = m;
        s.var[ch] = sq / count;
    }
    return s;
}

Tensor batch_norm_apply(const Tensor& x, std::span<const float> mean, std::span<const float> var,
                        const Tensor& gamma, const Tensor& beta, float eps) {
    check_channels(x, gamma.numel(), "batch_norm2d");
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    const float* px = x.ptr();
    float* po = out.ptr();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const float inv = 1.0f / std::sqrt(var[ch] + eps);
        const float a = gamma[ch] * inv;
        const float shift = beta[ch] - mean[ch] * a;
        for (std::int64_t i = 0; i < b; ++i) {
            const std::int64_t off = (i * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) po[off + k] = px[off + k] * a + shift;
        }
    }
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    check_channels(x, bias.numel(), "conv2d_bias");
    Tensor out = x;
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    float* po = out.ptr();
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            float* p = po + (i * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) p[k] += bias[ch];
        }
    }
    return out;
}

Tensor channel_sum(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("channel_sum: expected NCHW input, got " + to_string(x.shape()));
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({c});
    const float* px = x.ptr();
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const float* p = px + (i * c + ch) * hw;
            float acc = 0.0f;
            for (std::int64_t k = 0; k < hw; ++k) acc += p[k];
            out[ch] += acc;
        }
    }
    return out;
}

}  // namespace mfi::kernels

namespace mfi::kernels {

CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> labels, float epsilon) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy_label_smoothed: expected logits [B, K], got " + to_string(logits.shape()));
    }
    const std::int64_t b = logits.dim(0), k = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b) {
        throw ShapeError("cross_entropy_label_smoothed: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(b));
    }
    if (!(epsilon >= 0.0f && epsilon < 1.0f)) {
        throw ShapeError("cross_entropy_label_smoothed: epsilon must lie in [0, 1)");
    }
    CrossEntropy out{0.0f, Tensor(logits.shape())};
    const float off = epsilon / static_cast<float>(k);
    const float on = 1.0f - epsilon + off;
    float total = 0.0f;
    for (std::int64_t i = 0; i < b; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= k) {
            throw ShapeError("cross_entropy_label_smoothed: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(k) + ")");
        }
        const float* row = logits.ptr() + i * k;
        float* p = out.probs.ptr() + i * k;
        const float mx = *std::max_element(row, row + k);
        float z = 0.0f;
        for (std::int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const float log_z = std::log(z) + mx;
        float sample = 0.0f;
        for (std::int64_t j = 0; j < k; ++j) {
            const float log_p = row[j] - log_z;
            p[j] = std::exp(log_p);
            sample -= (j == y ? on : off) * log_p;
        }
        total += sample;
    }
    out.loss = total / static_cast<float>(b);
    return out;
}

Tensor cross_entropy_grad(const Tensor& probs, std::span<const int> labels, float epsilon) {
    const std::int64_t b = probs.dim(0), k = probs.dim(1);
    const float off = epsilon / static_cast<float>(k);
    const float on = 1.0f - epsilon + off;
    Tensor g(probs.shape());
    const float inv_b = 1.0f / static_cast<float>(b);
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
            g[i * k + j] = (probs[i * k + j] - (j == labels[i] ? on : off)) * inv_b;
        }
    }
    return g;
}

}  // namespace mfi::kernels

namespace mfi {

void NormBuffers::update(const kernels::ChannelStats& batch, std::int64_t count) {
    const float unbias = count > 1 ? static_cast<float>(count) / static_cast<float>(count - 1) : 1.0f;
    for (std::size_t c = 0; c < batch.mean.size(); ++c) {
        running_mean[c] = (1.0f - momentum) * running_mean[c] + momentum * batch.mean[c];
        running_var[c] = (1.0f - momentum) * running_var[c] + momentum * batch.var[c] * unbias;
    }
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const kernels::ConvGeometry& g) {
    return kernels::conv2d_forward(x, weight, g);
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormBuffers& buffers, bool training) {
    if (!training) {
        return kernels::batch_norm_apply(x, buffers.running_mean.data(), buffers.running_var.data(), gamma, beta,
                                         buffers.eps);
    }
    auto stats = kernels::channel_stats(x);
    Tensor y = kernels::batch_norm_apply(x, stats.mean, stats.var, gamma, beta, buffers.eps);
    buffers.update(stats, x.dim(0) * x.dim(2) * x.dim(3));
    return y;
}

Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const int> labels, float epsilon) {
    return Tensor::scalar(kernels::cross_entropy(logits, labels, epsilon).loss);
}

}  // namespace mfi
