#include "mfi/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "mfi/error.hpp"
#include "eigen_maps.hpp"

namespace mfi {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    for (auto e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
}

[[noreturn]] void shape_mismatch(std::string_view kernel, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(kernel) + ": incompatible shapes " + to_string(a) + " and " +
                     to_string(b));
}

int normalize_axis(int axis, int rank, std::string_view kernel) {
    int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw ShapeError(std::string(kernel) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    }
    return a;
}

Shape row_major_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

// Strides of `shape` viewed inside the broadcast shape `out` (0 on stretched axes).
Shape broadcast_strides(const Shape& shape, const Shape& out) {
    Shape own = row_major_strides(shape);
    Shape strides(out.size(), 0);
    const std::size_t offset = out.size() - shape.size();
    for (std::size_t i = 0; i < shape.size(); ++i) {
        strides[offset + i] = shape[i] == 1 ? 0 : own[i];
    }
    return strides;
}

// Calls f(out_offset, a_offset, b_offset, inner_count, a_inner_stride, b_inner_stride)
// for each innermost row of the broadcast iteration space.
template <class F>
void for_each_row(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
    const int rank = static_cast<int>(out.size());
    if (rank == 0) {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    const std::int64_t inner = out.back();
    const std::int64_t rows = numel(out) / inner;
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
        f(r * inner, oa, ob, inner, sa[rank - 1], sb[rank - 1]);
        for (int d = rank - 2; d >= 0; --d) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out[d]) break;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F op, std::string_view kernel) {
    if (!a.defined() || !b.defined()) throw ShapeError(std::string(kernel) + ": undefined operand");
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        const float* pa = a.ptr();
        const float* pb = b.ptr();
        float* po = out.ptr();
        const std::int64_t n = a.numel();
        for (std::int64_t i = 0; i < n; ++i) po[i] = op(pa[i], pb[i]);
        return out;
    }
    Shape shape = broadcast_shapes(a.shape(), b.shape(), kernel);
    Tensor out(shape);
    Shape sa = broadcast_strides(a.shape(), shape);
    Shape sb = broadcast_strides(b.shape(), shape);
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    float* po = out.ptr();
    for_each_row(shape, sa, sb,
                 [&](std::int64_t o, std::int64_t ia, std::int64_t ib, std::int64_t n,
                     std::int64_t da, std::int64_t db) {
                     for (std::int64_t i = 0; i < n; ++i) po[o + i] = op(pa[ia + i * da], pb[ib + i * db]);
                 });
    return out;
}

template <class F>
Tensor unary(const Tensor& a, F op) {
    Tensor out(a.shape());
    const float* pa = a.ptr();
    float* po = out.ptr();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = op(pa[i]);
    return out;
}

}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(static_cast<std::size_t>(mfi::numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (static_cast<std::int64_t>(data_.size()) != mfi::numel(shape_)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + to_string(shape_));
    }
}

Tensor Tensor::from(Shape shape, std::initializer_list<float> values) {
    return Tensor(std::move(shape), std::vector<float>(values));
}

std::int64_t Tensor::dim(int axis) const {
    return shape_[static_cast<std::size_t>(normalize_axis(axis, rank(), "dim"))];
}

std::int64_t Tensor::offset(std::initializer_list<std::int64_t> index) const {
    if (static_cast<int>(index.size()) != rank()) throw ShapeError("at: index rank mismatch");
    std::int64_t off = 0;
    std::size_t d = 0;
    for (auto i : index) {
        if (i < 0 || i >= shape_[d]) throw ShapeError("at: index out of range");
        off = off * shape_[d] + i;
        ++d;
    }
    return off;
}

float& Tensor::at(std::initializer_list<std::int64_t> index) { return (*this)[offset(index)]; }

float Tensor::at(std::initializer_list<std::int64_t> index) const { return (*this)[offset(index)]; }

float Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a single value");
    }
    return data_[0];
}

namespace {

Shape resolve_reshape(const Shape& from, Shape shape) {
    const std::int64_t total = numel(from);
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0 && total % known == 0) shape[infer] = total / known;
    if (numel(shape) != total) {
        throw ShapeError("reshape: cannot view " + to_string(from) + " as " + to_string(shape));
    }
    check_extents(shape);
    return shape;
}

}  // namespace

Tensor Tensor::reshape(Shape shape) const& {
    Tensor out;
    out.shape_ = resolve_reshape(shape_, std::move(shape));
    out.data_ = data_;
    return out;
}

Tensor Tensor::reshape(Shape shape) && {
    Tensor out;
    out.shape_ = resolve_reshape(shape_, std::move(shape));
    out.data_ = std::move(data_);
    return out;
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool Tensor::same_values(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

Shape broadcast_shapes(const Shape& a, const Shape& b, std::string_view kernel) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) shape_mismatch(kernel, a, b);
        out[i] = std::max(ea, eb);
    }
    return out;
}

Tensor reduce_to(const Tensor& grad, const Shape& shape) {
    if (grad.shape() == shape) return grad;
    const Shape& gs = grad.shape();
    if (shape.size() > gs.size()) shape_mismatch("reduce_to", gs, shape);
    Tensor out(shape);
    Shape so = broadcast_strides(shape, gs);
    Shape sg = row_major_strides(gs);
    const float* pg = grad.ptr();
    float* po = out.ptr();
    for_each_row(gs, sg, so,
                 [&](std::int64_t, std::int64_t ig, std::int64_t io, std::int64_t n, std::int64_t dg,
                     std::int64_t d_o) {
                     if (d_o == 0) {
                         float acc = 0.0f;
                         for (std::int64_t i = 0; i < n; ++i) acc += pg[ig + i * dg];
                         po[io] += acc;
                     } else {
                         for (std::int64_t i = 0; i < n; ++i) po[io + i * d_o] += pg[ig + i * dg];
                     }
                 });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(a, b, [](float x, float y) { return x + y; }, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(a, b, [](float x, float y) { return x - y; }, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(a, b, [](float x, float y) { return x * y; }, "mul");
}
Tensor scale(const Tensor& a, float s) {
    return unary(a, [s](float x) { return x * s; });
}
Tensor neg(const Tensor& a) {
    return unary(a, [](float x) { return -x; });
}
Tensor relu(const Tensor& a) {
    return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; });
}
Tensor sin(const Tensor& a) {
    return unary(a, [](float x) { return std::sin(x); });
}
Tensor cos(const Tensor& a) {
    return unary(a, [](float x) { return std::cos(x); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) shape_mismatch("matmul", a.shape(), b.shape());
    const std::int64_t m = a.dim(-2), k = a.dim(-1);
    if (b.dim(-2) != k) shape_mismatch("matmul", a.shape(), b.shape());
    const std::int64_t n = b.dim(-1);
    if (b.rank() == 2) {
        Shape out_shape = a.shape();
        out_shape.back() = n;
        Tensor out(out_shape);
        const std::int64_t rows = a.numel() / k;
        detail::map(out.ptr(), rows, n).noalias() = detail::map(a.ptr(), rows, k) * detail::map(b.ptr(), k, n);
        return out;
    }
    if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
        shape_mismatch("matmul", a.shape(), b.shape());
    }
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    const std::int64_t batches = a.numel() / (m * k);
    for (std::int64_t i = 0; i < batches; ++i) {
        detail::map(out.ptr() + i * m * n, m, n).noalias() =
            detail::map(a.ptr() + i * m * k, m, k) * detail::map(b.ptr() + i * k * n, k, n);
    }
    return out;
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("transpose_last2: rank " + std::to_string(a.rank()) + " < 2");
    const std::int64_t m = a.dim(-2), n = a.dim(-1);
    Shape shape = a.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    Tensor out(shape);
    const std::int64_t batches = a.numel() / (m * n);
    for (std::int64_t i = 0; i < batches; ++i) {
        detail::map(out.ptr() + i * m * n, n, m) = detail::map(a.ptr() + i * m * n, m, n).transpose();
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) { return a.reshape(std::move(shape)); }

Tensor flatten(const Tensor& a, int start_axis) {
    const int s = normalize_axis(start_axis, a.rank(), "flatten");
    Shape shape(a.shape().begin(), a.shape().begin() + s);
    shape.push_back(numel(Shape(a.shape().begin() + s, a.shape().end())));
    return a.reshape(std::move(shape));
}

Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdim) {
    std::vector<bool> reduced(a.rank(), false);
    for (int ax : axes) reduced[normalize_axis(ax, a.rank(), "sum")] = true;
    Shape kept;
    for (int d = 0; d < a.rank(); ++d) kept.push_back(reduced[d] ? 1 : a.shape()[d]);
    Tensor out = reduce_to(a, kept);
    if (keepdim) return out;
    Shape squeezed;
    for (int d = 0; d < a.rank(); ++d) {
        if (!reduced[d]) squeezed.push_back(a.shape()[d]);
    }
    return std::move(out).reshape(squeezed);
}

Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdim) {
    std::int64_t count = 1;
    for (int ax : axes) count *= a.shape()[normalize_axis(ax, a.rank(), "mean")];
    return scale(sum(a, std::move(axes), keepdim), 1.0f / static_cast<float>(count));
}

Tensor sum_all(const Tensor& a) {
    float acc = 0.0f;
    for (float v : a.data()) acc += v;
    return Tensor::scalar(acc);
}

Tensor mean_all(const Tensor& a) { return Tensor::scalar(sum_all(a).item() / static_cast<float>(a.numel())); }

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    const std::int64_t rows = parts[0].dim(0);
    std::int64_t cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) shape_mismatch("concat_cols", parts[0].shape(), p.shape());
        cols += p.dim(1);
    }
    Tensor out({rows, cols});
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        detail::map(out.ptr(), rows, cols).middleCols(offset, p.dim(1)) = detail::map(p.ptr(), rows, p.dim(1));
        offset += p.dim(1);
    }
    return out;
}

Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t count) {
    if (a.rank() != 2 || begin < 0 || count <= 0 || begin + count > a.dim(1)) {
        throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " + to_string(a.shape()));
    }
    Tensor out({a.dim(0), count});
    detail::map(out.ptr(), a.dim(0), count) = detail::map(a.ptr(), a.dim(0), a.dim(1)).middleCols(begin, count);
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        shape_mismatch("linear", x.shape(), weight.shape());
    }
    const std::int64_t n = x.dim(0), in = x.dim(1), outf = weight.dim(0);
    Tensor out({n, outf});
    auto o = detail::map(out.ptr(), n, outf);
    o.noalias() = detail::map(x.ptr(), n, in) * detail::map(weight.ptr(), outf, in).transpose();
    if (bias.defined()) {
        if (bias.numel() != outf) shape_mismatch("linear", weight.shape(), bias.shape());
        o.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.ptr(), outf);
    }
    return out;
}

Tensor nchw_to_rows(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("nchw_to_rows: expected rank 4, got " + to_string(x.shape()));
    const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({b * hw, c});
    for (std::int64_t i = 0; i < b; ++i) {
        detail::map(out.ptr() + i * hw * c, hw, c) = detail::map(x.ptr() + i * c * hw, c, hw).transpose();
    }
    return out;
}

Tensor rows_to_nchw(const Tensor& rows, std::int64_t batch, std::int64_t height, std::int64_t width) {
    const std::int64_t hw = height * width;
    if (rows.rank() != 2 || rows.dim(0) != batch * hw) {
        throw ShapeError("rows_to_nchw: " + to_string(rows.shape()) + " does not hold " +
                         std::to_string(batch) + "x" + std::to_string(height) + "x" + std::to_string(width) +
                         " locations");
    }
    const std::int64_t c = rows.dim(1);
    Tensor out({batch, c, height, width});
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::map(out.ptr() + i * c * hw, c, hw) = detail::map(rows.ptr() + i * hw * c, hw, c).transpose();
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: expected rank 4, got " + to_string(x.shape()));
    const std::int64_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({x.dim(0), x.dim(1)});
    const float* px = x.ptr();
    for (std::int64_t i = 0; i < bc; ++i) {
        float acc = 0.0f;
        for (std::int64_t p = 0; p < hw; ++p) acc += px[i * hw + p];
        out[i] = acc / static_cast<float>(hw);
    }
    return out;
}

}  // namespace mfi
