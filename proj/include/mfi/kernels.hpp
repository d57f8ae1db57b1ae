#pragma once

// Convolution and batch-normalization kernels shared by the plain, tape and
// dual front-ends. Layouts are NCHW; weights are [out, in, kh, kw].

#include <cstdint>
#include <span>
#include <vector>

#include "mfi/tensor.hpp"

namespace mfi::kernels {

struct ConvGeometry {
    std::int64_t stride = 1;
    std::int64_t padding = 0;
};

/// floor((in + 2*pad - k) / stride) + 1
std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, const ConvGeometry& g);

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const ConvGeometry& g);
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape,
                         const ConvGeometry& g);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape,
                          const ConvGeometry& g);

/// Per-channel statistics over (B, H, W).
struct ChannelStats {
    std::vector<float> mean;
    std::vector<float> var;  // biased
};
ChannelStats channel_stats(const Tensor& x);

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
Tensor batch_norm_apply(const Tensor& x, std::span<const float> mean, std::span<const float> var,
                        const Tensor& gamma, const Tensor& beta, float eps);

/// Add a per-channel vector to an NCHW tensor.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// Sum an NCHW tensor over (B, H, W).
Tensor channel_sum(const Tensor& x);

/// Softmax probabilities and the mean label-smoothed cross-entropy of logits [B, K].
struct CrossEntropy {
    float loss = 0.0f;
    Tensor probs;
};
CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> labels, float epsilon);
/// d(loss)/d(logits) = (softmax - smoothed target) / B
Tensor cross_entropy_grad(const Tensor& probs, std::span<const int> labels, float epsilon);

}  // namespace mfi::kernels

namespace mfi {

/// Batch-norm running statistics (buffers, not parameters).
struct NormBuffers {
    Tensor running_mean;
    Tensor running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;

    /// Blend in batch statistics; the variance is stored unbiased.
    void update(const kernels::ChannelStats& batch, std::int64_t count);
};

Tensor conv2d(const Tensor& x, const Tensor& weight, const kernels::ConvGeometry& g);
/// Training mode normalizes with batch statistics and updates the buffers;
/// evaluation mode is the affine map given the running statistics.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormBuffers& buffers, bool training);
/// Mean over the batch of -sum_k q_k log softmax(logits)_k, q = (1 - eps) onehot + eps / K.
Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const int> labels, float epsilon);

}  // namespace mfi
