#pragma once

// Reverse-mode differentiation: a single-owner tape of recorded kernels.

#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mfi/kernels.hpp"
#include "mfi/tensor.hpp"

namespace mfi {

/// A named trainable tensor. Trainability is `value.requires_grad()`.
struct Parameter {
    std::string name;
    Tensor value;

    bool trainable() const { return value.requires_grad(); }
};

using GradMap = std::map<std::string, Tensor>;

class GradTape;

/// Handle to a value recorded on a GradTape.
class Var {
  public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    GradTape* tape() const { return tape_; }
    int id() const { return id_; }

  private:
    friend class GradTape;
    Var(GradTape* tape, int id) : tape_(tape), id_(id) {}

    GradTape* tape_ = nullptr;
    int id_ = -1;
};

/// View handed to a kernel's backward rule.
class BackwardContext {
  public:
    const Tensor& grad() const;
    const Tensor& output() const;
    const Tensor& input(std::size_t i) const;
    bool needs(std::size_t i) const;
    /// Add `g` into the gradient of input `i` (no-op if that input needs none).
    void accumulate(std::size_t i, Tensor g);

  private:
    friend class GradTape;
    BackwardContext(GradTape& tape, int node) : tape_(tape), node_(node) {}

    GradTape& tape_;
    int node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class GradTape {
  public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    /// A value that never receives a gradient.
    Var constant(Tensor value);
    /// An input that receives a gradient, readable through grad() after backward.
    Var leaf(Tensor value);
    /// Bind a parameter. Repeated calls return the same node; frozen parameters
    /// are bound as constants but still registered.
    Var param(Parameter& p);
    /// Register a parameter so backward reports a (possibly zero) gradient for it.
    void register_parameter(Parameter& p);

    /// Record a kernel result. If no input requires a gradient the node is a constant.
    Var record(std::string_view kernel, Tensor value, std::span<const Var> inputs, BackwardFn backward);
    Var record(std::string_view kernel, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        return record(kernel, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                      std::move(backward));
    }

    /// Propagate d(loss) to every registered parameter and leaf, then release the tape.
    GradMap backward(const Var& loss);
    const Tensor& grad(const Var& leaf) const;

    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }

  private:
    friend class Var;
    friend class BackwardContext;

    struct Node {
        Tensor value;
        std::vector<int> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        bool is_leaf = false;
        Parameter* param = nullptr;
        std::string_view kernel;
    };

    int push(Node node);
    void check_live() const;
    void check_owned(const Var& v, std::string_view kernel) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::unordered_map<const Parameter*, int> bound_;
    std::vector<Parameter*> registered_;
    std::unordered_map<int, Tensor> leaf_grads_;
    std::unordered_map<int, Shape> leaf_shapes_;
    bool consumed_ = false;
};

/// Same value, cut from the gradient graph.
Var detach(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add(const Var& a, const Tensor& b);
Var sub(const Var& a, const Tensor& b);
Var mul(const Var& a, const Tensor& b);
Var scale(const Var& a, float s);
Var neg(const Var& a);
Var relu(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var matmul(const Var& a, const Var& b);
Var transpose_last2(const Var& a);
Var reshape(const Var& a, Shape shape);
Var flatten(const Var& a, int start_axis = 1);
Var sum(const Var& a, std::vector<int> axes, bool keepdim = false);
Var mean(const Var& a, std::vector<int> axes, bool keepdim = false);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, std::int64_t begin, std::int64_t count);
Var linear(const Var& x, const Var& weight, const Var& bias);
Var nchw_to_rows(const Var& x);
Var rows_to_nchw(const Var& rows, std::int64_t batch, std::int64_t height, std::int64_t width);
Var global_avg_pool(const Var& x);

Var conv2d(const Var& x, const Var& weight, const kernels::ConvGeometry& g);
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, NormBuffers& buffers, bool training);
Var cross_entropy_label_smoothed(const Var& logits, std::span<const int> labels, float epsilon);

}  // namespace mfi
