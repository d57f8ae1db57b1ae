#pragma once

// Forward-mode differentiation by dual-number propagation. A Dual carries a
// primal value and a tangent of the same shape; an undefined tangent stands
// for zero and is propagated without arithmetic.

#include <functional>
#include <span>
#include <vector>

#include "mfi/kernels.hpp"
#include "mfi/tensor.hpp"

namespace mfi {

class Dual {
  public:
    Dual() = default;
    explicit Dual(Tensor primal) : primal_(std::move(primal)) {}
    Dual(Tensor primal, Tensor tangent);

    const Tensor& primal() const { return primal_; }
    const Shape& shape() const { return primal_.shape(); }
    bool has_tangent() const { return tangent_.defined(); }
    /// Undefined when the tangent is identically zero.
    const Tensor& tangent() const { return tangent_; }
    Tensor tangent_or_zero() const { return has_tangent() ? tangent_ : Tensor(primal_.shape()); }

  private:
    Tensor primal_;
    Tensor tangent_;
};

struct JvpResult {
    Tensor value;
    Tensor tangent;  // J_f(x) v, always defined
};

using DualFunction = std::function<Dual(std::span<const Dual>)>;

/// f(x) and J_f(x) v in one forward pass.
JvpResult jvp(const DualFunction& f, std::span<const Tensor> inputs, std::span<const Tensor> tangents);

Dual add(const Dual& a, const Dual& b);
Dual sub(const Dual& a, const Dual& b);
Dual mul(const Dual& a, const Dual& b);
Dual add(const Dual& a, const Tensor& b);
Dual sub(const Dual& a, const Tensor& b);
Dual mul(const Dual& a, const Tensor& b);
Dual scale(const Dual& a, float s);
Dual neg(const Dual& a);
Dual relu(const Dual& a);
Dual sin(const Dual& a);
Dual cos(const Dual& a);
Dual matmul(const Dual& a, const Dual& b);
Dual transpose_last2(const Dual& a);
Dual reshape(const Dual& a, Shape shape);
Dual flatten(const Dual& a, int start_axis = 1);
Dual sum(const Dual& a, std::vector<int> axes, bool keepdim = false);
Dual mean(const Dual& a, std::vector<int> axes, bool keepdim = false);
Dual sum_all(const Dual& a);
Dual mean_all(const Dual& a);
Dual concat_cols(std::span<const Dual> parts);
Dual slice_cols(const Dual& a, std::int64_t begin, std::int64_t count);
Dual linear(const Dual& x, const Dual& weight, const Dual& bias);
Dual nchw_to_rows(const Dual& x);
Dual rows_to_nchw(const Dual& rows, std::int64_t batch, std::int64_t height, std::int64_t width);
Dual global_avg_pool(const Dual& x);

Dual conv2d(const Dual& x, const Dual& weight, const kernels::ConvGeometry& g);
/// Forward-mode evaluation never updates the running statistics.
Dual batch_norm2d(const Dual& x, const Dual& gamma, const Dual& beta, NormBuffers& buffers, bool training);
/// Not differentiable in forward mode; throws UnsupportedKernel.
Dual cross_entropy_label_smoothed(const Dual& logits, std::span<const int> labels, float epsilon);

}  // namespace mfi
