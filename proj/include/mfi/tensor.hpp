#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mfi {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major float32 tensor with value semantics.
///
/// A default-constructed tensor is *undefined* (no storage); a rank-0 tensor
/// with one element is a scalar.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
    static Tensor full(Shape shape, float value) { return Tensor(std::move(shape), value); }
    static Tensor scalar(float value) { return Tensor(Shape{}, value); }
    static Tensor from(Shape shape, std::initializer_list<float> values);

    bool defined() const { return !data_.empty(); }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    /// Extent of axis `axis`; negative indices count from the back.
    std::int64_t dim(int axis) const;
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    float* ptr() { return data_.data(); }
    const float* ptr() const { return data_.data(); }
    std::vector<float>& storage() { return data_; }

    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
    float& at(std::initializer_list<std::int64_t> index);
    float at(std::initializer_list<std::int64_t> index) const;

    /// Value of a one-element tensor.
    float item() const;

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool flag) {
        requires_grad_ = flag;
        return *this;
    }

    /// Same data under a new shape; one extent may be -1.
    Tensor reshape(Shape shape) const&;
    Tensor reshape(Shape shape) &&;
    void fill(float value);
    bool all_finite() const;
    bool same_values(const Tensor& other) const;

  private:
    std::int64_t offset(std::initializer_list<std::int64_t> index) const;

    Shape shape_;
    std::vector<float> data_;
    bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Plain kernels. Every kernel here has a reverse-mode overload on Var
// (autodiff.hpp) and a forward-mode overload on Dual (dual.hpp).
// ---------------------------------------------------------------------------

/// Result shape of broadcasting `a` against `b` (trailing alignment, extent 1 stretches).
Shape broadcast_shapes(const Shape& a, const Shape& b, std::string_view kernel);
/// Sum `grad` down to `shape`, undoing a broadcast.
Tensor reduce_to(const Tensor& grad, const Shape& shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);

/// [..., M, K] x [K, N] or batched [..., M, K] x [..., K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// Collapse axes [start_axis, rank) into one.
Tensor flatten(const Tensor& a, int start_axis = 1);

Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdim = false);
Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

/// Concatenate rank-2 tensors with equal row counts along the column axis.
Tensor concat_cols(std::span<const Tensor> parts);
/// Inverse of concat_cols for one part: columns [begin, begin + count).
Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t count);

/// x [N, in] * W^T + b, W [out, in], b [out] (may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// [B, C, H, W] -> [B*H*W, C] (one row per spatial location).
Tensor nchw_to_rows(const Tensor& x);
/// [B*H*W, C] -> [B, C, H, W].
Tensor rows_to_nchw(const Tensor& rows, std::int64_t batch, std::int64_t height, std::int64_t width);

/// [B, C, H, W] -> [B, C]
Tensor global_avg_pool(const Tensor& x);

}  // namespace mfi
