#include "mfi/autodiff.hpp"

#include <cmath>

#include "eigen_maps.hpp"
#include "mfi/error.hpp"

namespace mfi {

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
    if (!tape_) throw TapeError("value of an unbound Var");
    tape_->check_live();
    return tape_->nodes_[static_cast<std::size_t>(id_)].value;
}

bool Var::requires_grad() const {
    return tape_ && !tape_->consumed_ && tape_->nodes_[static_cast<std::size_t>(id_)].requires_grad;
}

const Tensor& BackwardContext::grad() const { return tape_.grads_[static_cast<std::size_t>(node_)]; }

const Tensor& BackwardContext::output() const { return tape_.nodes_[static_cast<std::size_t>(node_)].value; }

const Tensor& BackwardContext::input(std::size_t i) const {
    return tape_.nodes_[static_cast<std::size_t>(tape_.nodes_[static_cast<std::size_t>(node_)].inputs.at(i))].value;
}

bool BackwardContext::needs(std::size_t i) const {
    const int in = tape_.nodes_[static_cast<std::size_t>(node_)].inputs.at(i);
    return tape_.nodes_[static_cast<std::size_t>(in)].requires_grad;
}

void BackwardContext::accumulate(std::size_t i, Tensor g) {
    const int in = tape_.nodes_[static_cast<std::size_t>(node_)].inputs.at(i);
    const auto& target = tape_.nodes_[static_cast<std::size_t>(in)];
    if (!target.requires_grad) return;
    if (g.shape() != target.value.shape()) {
        throw ShapeError(std::string(tape_.nodes_[static_cast<std::size_t>(node_)].kernel) +
                         " backward: gradient shape " + to_string(g.shape()) + " vs input " +
                         to_string(target.value.shape()));
    }
    Tensor& slot = tape_.grads_[static_cast<std::size_t>(in)];
    if (!slot.defined()) {
        slot = std::move(g);
        return;
    }
    float* dst = slot.ptr();
    const float* src = g.ptr();
    const std::int64_t n = slot.numel();
    for (std::int64_t k = 0; k < n; ++k) dst[k] += src[k];
}

void GradTape::check_live() const {
    if (consumed_) throw TapeError("tape already consumed by backward");
}

void GradTape::check_owned(const Var& v, std::string_view kernel) const {
    if (v.tape_ != this) throw TapeError(std::string(kernel) + ": operand recorded on a different tape");
}

int GradTape::push(Node node) {
    check_live();
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

Var GradTape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.kernel = "constant";
    return Var(this, push(std::move(n)));
}

Var GradTape::leaf(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    n.is_leaf = true;
    n.kernel = "leaf";
    const int id = push(std::move(n));
    leaf_shapes_[id] = nodes_.back().value.shape();
    return Var(this, id);
}

void GradTape::register_parameter(Parameter& p) {
    check_live();
    if (std::find(registered_.begin(), registered_.end(), &p) == registered_.end()) registered_.push_back(&p);
}

Var GradTape::param(Parameter& p) {
    check_live();
    if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
    register_parameter(p);
    Node n;
    n.value = p.value;
    n.requires_grad = p.trainable();
    n.param = &p;
    n.kernel = "parameter";
    const int id = push(std::move(n));
    bound_[&p] = id;
    return Var(this, id);
}

Var GradTape::record(std::string_view kernel, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    check_live();
    Node n;
    n.value = std::move(value);
    n.kernel = kernel;
    for (const auto& v : inputs) {
        check_owned(v, kernel);
        n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id_)].requires_grad;
    }
    if (n.requires_grad) {
        n.inputs.reserve(inputs.size());
        for (const auto& v : inputs) n.inputs.push_back(v.id_);
        n.backward = std::move(backward);
    }
    return Var(this, push(std::move(n)));
}

GradMap GradTape::backward(const Var& loss) {
    check_live();
    check_owned(loss, "backward");
    const auto& out = nodes_[static_cast<std::size_t>(loss.id_)];
    if (out.value.numel() != 1) {
        throw TapeError("backward: loss must be a scalar, got shape " + to_string(out.value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    if (out.requires_grad) grads_[static_cast<std::size_t>(loss.id_)] = Tensor(out.value.shape(), 1.0f);

    for (int id = loss.id_; id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (!grads_[static_cast<std::size_t>(id)].defined()) continue;
        if (node.backward) {
            BackwardContext ctx(*this, id);
            node.backward(ctx);
            grads_[static_cast<std::size_t>(id)] = Tensor();
        }
    }

    GradMap result;
    for (Parameter* p : registered_) {
        auto it = bound_.find(p);
        Tensor g;
        if (it != bound_.end()) g = std::move(grads_[static_cast<std::size_t>(it->second)]);
        if (!g.defined()) g = Tensor(p->value.shape());
        result[p->name] = std::move(g);
    }
    for (auto& [id, shape] : leaf_shapes_) {
        Tensor g = std::move(grads_[static_cast<std::size_t>(id)]);
        leaf_grads_[id] = g.defined() ? std::move(g) : Tensor(shape);
    }
    consumed_ = true;
    nodes_.clear();
    nodes_.shrink_to_fit();
    grads_.clear();
    return result;
}

const Tensor& GradTape::grad(const Var& leaf) const {
    auto it = leaf_grads_.find(leaf.id_);
    if (leaf.tape_ != this || it == leaf_grads_.end()) {
        throw TapeError("grad: no gradient recorded for this Var (not a leaf, or backward not run)");
    }
    return it->second;
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace {

GradTape& tape_of(const Var& v, std::string_view kernel) {
    if (!v.tape()) throw TapeError(std::string(kernel) + ": unbound operand");
    return *v.tape();
}

Var lift(const Var& like, const Tensor& t) { return tape_of(like, "constant").constant(t); }

// Broadcast g (a keepdim-shaped reduction result) back out to `shape`.
Tensor expand(const Tensor& g, const Shape& shape) { return add(Tensor(shape), g); }

}  // namespace

Var detach(const Var& x) { return tape_of(x, "detach").constant(x.value()); }

Var add(const Var& a, const Var& b) {
    return tape_of(a, "add").record("add", add(a.value(), b.value()), {a, b}, [](BackwardContext& c) {
        if (c.needs(0)) c.accumulate(0, reduce_to(c.grad(), c.input(0).shape()));
        if (c.needs(1)) c.accumulate(1, reduce_to(c.grad(), c.input(1).shape()));
    });
}

Var sub(const Var& a, const Var& b) {
    return tape_of(a, "sub").record("sub", sub(a.value(), b.value()), {a, b}, [](BackwardContext& c) {
        if (c.needs(0)) c.accumulate(0, reduce_to(c.grad(), c.input(0).shape()));
        if (c.needs(1)) c.accumulate(1, reduce_to(neg(c.grad()), c.input(1).shape()));
    });
}

Var mul(const Var& a, const Var& b) {
    return tape_of(a, "mul").record("mul", mul(a.value(), b.value()), {a, b}, [](BackwardContext& c) {
        if (c.needs(0)) c.accumulate(0, reduce_to(mul(c.grad(), c.input(1)), c.input(0).shape()));
        if (c.needs(1)) c.accumulate(1, reduce_to(mul(c.grad(), c.input(0)), c.input(1).shape()));
    });
}

Var add(const Var& a, const Tensor& b) { return add(a, lift(a, b)); }
Var sub(const Var& a, const Tensor& b) { return sub(a, lift(a, b)); }
Var mul(const Var& a, const Tensor& b) { return mul(a, lift(a, b)); }

Var scale(const Var& a, float s) {
    return tape_of(a, "scale").record("scale", scale(a.value(), s), {a},
                                      [s](BackwardContext& c) { c.accumulate(0, scale(c.grad(), s)); });
}

Var neg(const Var& a) { return scale(a, -1.0f); }

Var relu(const Var& a) {
    return tape_of(a, "relu").record("relu", relu(a.value()), {a}, [](BackwardContext& c) {
        Tensor g = c.grad();
        const float* x = c.input(0).ptr();
        float* pg = g.ptr();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (!(x[i] > 0.0f)) pg[i] = 0.0f;
        }
        c.accumulate(0, std::move(g));
    });
}

Var sin(const Var& a) {
    return tape_of(a, "sin").record("sin", sin(a.value()), {a}, [](BackwardContext& c) {
        c.accumulate(0, mul(c.grad(), cos(c.input(0))));
    });
}

Var cos(const Var& a) {
    return tape_of(a, "cos").record("cos", cos(a.value()), {a}, [](BackwardContext& c) {
        c.accumulate(0, neg(mul(c.grad(), sin(c.input(0)))));
    });
}

Var matmul(const Var& a, const Var& b) {
    return tape_of(a, "matmul").record("matmul", matmul(a.value(), b.value()), {a, b}, [](BackwardContext& c) {
        const Tensor& x = c.input(0);
        const Tensor& y = c.input(1);
        if (c.needs(0)) c.accumulate(0, matmul(c.grad(), transpose_last2(y)));
        if (c.needs(1)) {
            if (y.rank() == 2) {
                const std::int64_t k = x.dim(-1);
                Tensor x2 = x.reshape({-1, k});
                Tensor g2 = c.grad().reshape({-1, y.dim(1)});
                c.accumulate(1, matmul(transpose_last2(x2), g2));
            } else {
                c.accumulate(1, matmul(transpose_last2(x), c.grad()));
            }
        }
    });
}

Var transpose_last2(const Var& a) {
    return tape_of(a, "transpose_last2")
        .record("transpose_last2", transpose_last2(a.value()), {a},
                [](BackwardContext& c) { c.accumulate(0, transpose_last2(c.grad())); });
}

Var reshape(const Var& a, Shape shape) {
    return tape_of(a, "reshape").record("reshape", a.value().reshape(std::move(shape)), {a}, [](BackwardContext& c) {
        c.accumulate(0, c.grad().reshape(c.input(0).shape()));
    });
}

Var flatten(const Var& a, int start_axis) {
    return tape_of(a, "flatten").record("flatten", flatten(a.value(), start_axis), {a}, [](BackwardContext& c) {
        c.accumulate(0, c.grad().reshape(c.input(0).shape()));
    });
}

Var sum(const Var& a, std::vector<int> axes, bool keepdim) {
    Tensor kept = sum(a.value(), axes, true);
    Shape kept_shape = kept.shape();
    Tensor out = keepdim ? std::move(kept) : sum(a.value(), axes, false);
    return tape_of(a, "sum").record("sum", std::move(out), {a}, [kept_shape](BackwardContext& c) {
        c.accumulate(0, expand(c.grad().reshape(kept_shape), c.input(0).shape()));
    });
}

Var mean(const Var& a, std::vector<int> axes, bool keepdim) {
    std::int64_t count = 1;
    for (int ax : axes) count *= a.value().dim(ax);
    return scale(sum(a, std::move(axes), keepdim), 1.0f / static_cast<float>(count));
}

Var sum_all(const Var& a) {
    return tape_of(a, "sum_all").record("sum_all", sum_all(a.value()), {a}, [](BackwardContext& c) {
        c.accumulate(0, Tensor(c.input(0).shape(), c.grad().item()));
    });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0f / static_cast<float>(a.value().numel())); }

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (const auto& p : parts) values.push_back(p.value());
    return tape_of(parts[0], "concat_cols")
        .record("concat_cols", concat_cols(values), parts, [n = parts.size()](BackwardContext& c) {
            std::int64_t offset = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::int64_t w = c.input(i).dim(1);
                if (c.needs(i)) c.accumulate(i, slice_cols(c.grad(), offset, w));
                offset += w;
            }
        });
}

Var slice_cols(const Var& a, std::int64_t begin, std::int64_t count) {
    return tape_of(a, "slice_cols")
        .record("slice_cols", slice_cols(a.value(), begin, count), {a}, [begin, count](BackwardContext& c) {
            const Shape& s = c.input(0).shape();
            Tensor g(s);
            detail::map(g.ptr(), s[0], s[1]).middleCols(begin, count) = detail::map(c.grad().ptr(), s[0], count);
            c.accumulate(0, std::move(g));
        });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    const bool has_bias = bias.tape() != nullptr;
    Tensor out = linear(x.value(), weight.value(), has_bias ? bias.value() : Tensor());
    auto backward = [](BackwardContext& c) {
        const Tensor& g = c.grad();
        const Tensor& in = c.input(0);
        const Tensor& w = c.input(1);
        const std::int64_t n = g.dim(0), outf = g.dim(1), inf = in.dim(1);
        const auto gm = detail::map(g.ptr(), n, outf);
        if (c.needs(0)) {
            Tensor gx(in.shape());
            detail::map(gx.ptr(), n, inf).noalias() = gm * detail::map(w.ptr(), outf, inf);
            c.accumulate(0, std::move(gx));
        }
        if (c.needs(1)) {
            Tensor gw(w.shape());
            detail::map(gw.ptr(), outf, inf).noalias() = gm.transpose() * detail::map(in.ptr(), n, inf);
            c.accumulate(1, std::move(gw));
        }
        if (c.needs(2)) {
            Tensor gb(c.input(2).shape());
            detail::map(gb.ptr(), 1, outf) = gm.colwise().sum();
            c.accumulate(2, std::move(gb));
        }
    };
    auto& tape = tape_of(x, "linear");
    if (has_bias) return tape.record("linear", std::move(out), {x, weight, bias}, backward);
    return tape.record("linear", std::move(out), {x, weight}, backward);
}

Var nchw_to_rows(const Var& x) {
    return tape_of(x, "nchw_to_rows").record("nchw_to_rows", nchw_to_rows(x.value()), {x}, [](BackwardContext& c) {
        const Shape& s = c.input(0).shape();
        c.accumulate(0, rows_to_nchw(c.grad(), s[0], s[2], s[3]));
    });
}

Var rows_to_nchw(const Var& rows, std::int64_t batch, std::int64_t height, std::int64_t width) {
    return tape_of(rows, "rows_to_nchw")
        .record("rows_to_nchw", rows_to_nchw(rows.value(), batch, height, width), {rows},
                [](BackwardContext& c) { c.accumulate(0, nchw_to_rows(c.grad())); });
}

Var global_avg_pool(const Var& x) {
    return tape_of(x, "global_avg_pool")
        .record("global_avg_pool", global_avg_pool(x.value()), {x}, [](BackwardContext& c) {
            const Shape& s = c.input(0).shape();
            const std::int64_t hw = s[2] * s[3];
            Tensor g(s);
            const float inv = 1.0f / static_cast<float>(hw);
            for (std::int64_t i = 0; i < s[0] * s[1]; ++i) {
                const float v = c.grad()[i] * inv;
                std::fill(g.ptr() + i * hw, g.ptr() + (i + 1) * hw, v);
            }
            c.accumulate(0, std::move(g));
        });
}

Var conv2d(const Var& x, const Var& weight, const kernels::ConvGeometry& g) {
    return tape_of(x, "conv2d")
        .record("conv2d", kernels::conv2d_forward(x.value(), weight.value(), g), {x, weight}, [g](BackwardContext& c) {
            if (c.needs(0)) c.accumulate(0, kernels::conv2d_grad_input(c.grad(), c.input(1), c.input(0).shape(), g));
            if (c.needs(1)) c.accumulate(1, kernels::conv2d_grad_weight(c.grad(), c.input(0), c.input(1).shape(), g));
        });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, NormBuffers& buffers, bool training) {
    const Tensor& xv = x.value();
    std::vector<float> mu, var;
    if (training) {
        auto stats = kernels::channel_stats(xv);
        buffers.update(stats, xv.dim(0) * xv.dim(2) * xv.dim(3));
        mu = std::move(stats.mean);
        var = std::move(stats.var);
    } else {
        mu.assign(buffers.running_mean.data().begin(), buffers.running_mean.data().end());
        var.assign(buffers.running_var.data().begin(), buffers.running_var.data().end());
    }
    Tensor y = kernels::batch_norm_apply(xv, mu, var, gamma.value(), beta.value(), buffers.eps);
    std::vector<float> inv(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) inv[i] = 1.0f / std::sqrt(var[i] + buffers.eps);

    auto backward = [mu = std::move(mu), inv = std::move(inv), training](BackwardContext& c) {
        const Tensor& in = c.input(0);
        const Tensor& gam = c.input(1);
        const Tensor& dy = c.grad();
        const std::int64_t b = in.dim(0), ch = in.dim(1), hw = in.dim(2) * in.dim(3);
        const float count = static_cast<float>(b * hw);
        std::vector<float> sum_dy(ch, 0.0f), sum_dy_xhat(ch, 0.0f);
        for (std::int64_t i = 0; i < b; ++i) {
            for (std::int64_t k = 0; k < ch; ++k) {
                const std::int64_t off = (i * ch + k) * hw;
                float s = 0.0f, sx = 0.0f;
                for (std::int64_t p = 0; p < hw; ++p) {
                    const float xhat = (in[off + p] - mu[k]) * inv[k];
                    s += dy[off + p];
                    sx += dy[off + p] * xhat;
                }
                sum_dy[k] += s;
                sum_dy_xhat[k] += sx;
            }
        }
        if (c.needs(0)) {
            Tensor dx(in.shape());
            for (std::int64_t i = 0; i < b; ++i) {
                for (std::int64_t k = 0; k < ch; ++k) {
                    const std::int64_t off = (i * ch + k) * hw;
                    const float a = gam[k] * inv[k];
                    if (training) {
                        const float m_dy = sum_dy[k] / count;
                        const float m_dyx = sum_dy_xhat[k] / count;
                        for (std::int64_t p = 0; p < hw; ++p) {
                            const float xhat = (in[off + p] - mu[k]) * inv[k];
                            dx[off + p] = a * (dy[off + p] - m_dy - xhat * m_dyx);
                        }
                    } else {
                        for (std::int64_t p = 0; p < hw; ++p) dx[off + p] = a * dy[off + p];
                    }
                }
            }
            c.accumulate(0, std::move(dx));
        }
        if (c.needs(1)) c.accumulate(1, Tensor({ch}, std::vector<float>(sum_dy_xhat)));
        if (c.needs(2)) c.accumulate(2, Tensor({ch}, std::vector<float>(sum_dy)));
    };
    return tape_of(x, "batch_norm2d").record("batch_norm2d", std::move(y), {x, gamma, beta}, std::move(backward));
}

Var cross_entropy_label_smoothed(const Var& logits, std::span<const int> labels, float epsilon) {
    auto ce = kernels::cross_entropy(logits.value(), labels, epsilon);
    return tape_of(logits, "cross_entropy_label_smoothed")
        .record("cross_entropy_label_smoothed", Tensor::scalar(ce.loss), {logits},
                [probs = std::move(ce.probs), labels = std::vector<int>(labels.begin(), labels.end()),
                 epsilon](BackwardContext& c) {
                    c.accumulate(0, scale(kernels::cross_entropy_grad(probs, labels, epsilon), c.grad().item()));
                });
}

}  // namespace mfi
