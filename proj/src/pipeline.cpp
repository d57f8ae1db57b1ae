#include "mfi/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace mfi::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

std::string stage_prefix(int l) { return "stage" + std::to_string(l); }

std::uint64_t label_seed(std::uint64_t seed, std::string_view label) {
    return mix_seed(seed, fnv1a64({reinterpret_cast<const std::uint8_t*>(label.data()), label.size()}));
}

void check_stage_index(int stage, int hi, std::string_view what) {
    if (stage < 1 || stage > hi) {
        throw ConfigError(std::string(what) + ": stage must be in [1, " + std::to_string(hi) + "], got " +
                          std::to_string(stage));
    }
}

std::int64_t stem_params(const resnet::ResNetConfig& cfg) { return 3 * cfg.stem_channels * 9 + 2 * cfg.stem_channels; }
std::int64_t head_params(const resnet::ResNetConfig& cfg) { return cfg.channels(4) * cfg.classes + cfg.classes; }

/// Rows [begin, end) of an NCHW tensor (or any tensor, along axis 0).
Tensor gather_rows(const Tensor& t, std::span<const std::int64_t> idx) {
    Shape s = t.shape();
    const std::int64_t per = t.numel() / s[0];
    s[0] = static_cast<std::int64_t>(idx.size());
    Tensor out(s);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        std::copy_n(t.ptr() + idx[k] * per, per, out.ptr() + static_cast<std::int64_t>(k) * per);
    }
    return out;
}

/// Teacher features entering and leaving stage `l`, in eval mode.
std::pair<Tensor, Tensor> stage_io(resnet::ResNet& teacher, const Tensor& images, int l) {
    const nn::PlainMode m;
    Tensor h = teacher.stem.forward(m, images);
    for (int k = 1; k < l; ++k) h = teacher.stages[static_cast<std::size_t>(k - 1)].forward(m, h);
    Tensor out = teacher.stages[static_cast<std::size_t>(l - 1)].forward(m, h);
    return {std::move(h), std::move(out)};
}

/// Unaugmented stage input/output pairs for a whole split.
std::pair<Tensor, Tensor> split_stage_io(resnet::ResNet& teacher, const data::Dataset& split, int l,
                                         const Context& ctx) {
    std::vector<Tensor> src, dst;
    for (const auto& b : data::eval_batches(split, ctx.eval_batch_size, ctx.augment.norm)) {
        auto [x, y] = stage_io(teacher, b.images, l);
        src.push_back(std::move(x));
        dst.push_back(std::move(y));
    }
    const auto stack = [](const std::vector<Tensor>& parts) {
        Shape s = parts.front().shape();
        s[0] = 0;
        for (const auto& p : parts) s[0] += p.dim(0);
        Tensor out(s);
        float* d = out.ptr();
        for (const auto& p : parts) d = std::copy_n(p.ptr(), p.numel(), d);
        return out;
    };
    return {stack(src), stack(dst)};
}

/// Sets the alignment batch norm to the exact statistics of its convolution
/// output over `src`; the layer is then used in eval mode.
void calibrate_alignment(meanflow::AlignmentLayer& align, const Tensor& src, std::int64_t batch) {
    const std::int64_t channels = align.target.channels;
    std::vector<double> sum(static_cast<std::size_t>(channels)), sq(static_cast<std::size_t>(channels));
    std::int64_t count = 0;
    const nn::PlainMode m;
    for (std::int64_t b = 0; b < src.dim(0); b += batch) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = b; i < std::min(src.dim(0), b + batch); ++i) idx.push_back(i);
        const Tensor y = align.conv.forward(m, gather_rows(src, idx));
        const std::int64_t hw = y.dim(2) * y.dim(3);
        for (std::int64_t n = 0; n < y.dim(0); ++n) {
            for (std::int64_t c = 0; c < channels; ++c) {
                const float* p = y.ptr() + (n * channels + c) * hw;
                for (std::int64_t k = 0; k < hw; ++k) {
                    sum[static_cast<std::size_t>(c)] += p[k];
                    sq[static_cast<std::size_t>(c)] += static_cast<double>(p[k]) * p[k];
                }
            }
        }
        count += y.dim(0) * hw;
    }
    auto& buf = align.bn.buffers;
    for (std::int64_t c = 0; c < channels; ++c) {
        const double mean = sum[static_cast<std::size_t>(c)] / static_cast<double>(count);
        const double var = sq[static_cast<std::size_t>(c)] / static_cast<double>(count) - mean * mean;
        buf.running_mean[c] = static_cast<float>(mean);
        buf.running_var[c] = static_cast<float>(std::max(var, 0.0) * static_cast<double>(count) /
                                                static_cast<double>(std::max<std::int64_t>(count - 1, 1)));
    }
}

/// Fits the alignment conv and batch-norm affine so that z_align itself
/// approximates the stage output (per-element squared error). The velocity
/// nets then only have to carry the remaining displacement.
double fit_alignment(meanflow::AlignmentLayer& align, const Tensor& src, const Tensor& dst, const TrainHyper& hp,
                     const SeededRng& base, const std::string& phase, const Context& ctx) {
    nn::AdamW opt(hp.lr, hp.weight_decay);
    const nn::CosineSchedule schedule(hp.lr, hp.epochs);
    double mean_loss = 0.0;
    for (int e = 0; e < hp.epochs; ++e) {
        opt.set_learning_rate(schedule.at(e));
        SeededRng rng = base.fork(0xA1000 + static_cast<std::uint64_t>(e));
        double loss_sum = 0.0;
        int batches = 0;
        for (const auto& idx : data::epoch_order(src.dim(0), hp.batch_size, rng)) {
            GradTape tape;
            const nn::TapeMode m{&tape, true};
            nn::StateRefs refs;
            align.collect(refs);
            const Var y = align.forward(m, tape.constant(gather_rows(src, idx)));
            const Var d = sub(y, tape.constant(gather_rows(dst, idx)));
            const Var loss = mean_all(mul(d, d));
            const float value = loss.value().item();
            if (!std::isfinite(value)) {
                throw NumericalError(phase + ": non-finite alignment loss at epoch " + std::to_string(e + 1));
            }
            opt.step(refs.params, tape.backward(loss));
            loss_sum += value;
            ++batches;
        }
        mean_loss = loss_sum / std::max(batches, 1);
        ctx.say(phase + " align epoch " + std::to_string(e + 1) + "/" + std::to_string(hp.epochs) + " mse " +
                std::to_string(mean_loss));
    }
    return mean_loss;
}

template <class Model>
EvalResult evaluate_any(Model& model, const data::Dataset& split, const Context& ctx, float eps) {
    EvalResult r;
    const nn::PlainMode m;
    double correct = 0.0, loss = 0.0;
    for (const auto& b : data::eval_batches(split, ctx.eval_batch_size, ctx.augment.norm)) {
        const Tensor logits = model.forward(m, b.images);
        loss += static_cast<double>(cross_entropy_label_smoothed(logits, b.labels, eps).item()) *
                static_cast<double>(b.labels.size());
        const std::int64_t k = logits.dim(1);
        for (std::size_t i = 0; i < b.labels.size(); ++i) {
            const float* row = logits.ptr() + static_cast<std::int64_t>(i) * k;
            const auto arg = std::max_element(row, row + k) - row;
            if (arg == b.labels[i]) correct += 1.0;
        }
        r.samples += static_cast<std::int64_t>(b.labels.size());
    }
    r.accuracy = correct / static_cast<double>(r.samples);
    r.loss = loss / static_cast<double>(r.samples);
    return r;
}

template <class Model>
ClassifierRun<Model> fit_classifier(Model model, const std::string& phase, const Context& ctx, const TrainHyper& hp,
                                    bool start_is_candidate) {
    if (hp.epochs < 0) throw ConfigError(phase + ": epochs must be non-negative");
    ClassifierRun<Model> run;
    const std::string label = ctx.metrics ? ctx.metrics->begin_phase(phase) : phase;
    const data::Dataset& train = ctx.splits.train;
    const data::Dataset& val = ctx.splits.val;
    const bool has_val = val.size() > 0;

    nn::AdamW opt(hp.lr, hp.weight_decay);
    const nn::CosineSchedule schedule(hp.lr, hp.epochs);
    const SeededRng base(label_seed(hp.seed, phase));
    const auto start = Clock::now();

    run.best = model;
    run.best_val_accuracy = -1.0;
    if (start_is_candidate && has_val) run.best_val_accuracy = evaluate_any(model, val, ctx, 0.0f).accuracy;

    for (int e = 0; e < hp.epochs; ++e) {
        const float lr = schedule.at(e);
        opt.set_learning_rate(lr);
        SeededRng rng = base.fork(static_cast<std::uint64_t>(e));
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        for (const auto& idx : data::epoch_order(train.size(), hp.batch_size, rng)) {
            const data::Batch b = data::make_batch(train, idx, ctx.augment, &rng);
            GradTape tape;
            const nn::TapeMode m{&tape, true};
            const nn::StateRefs refs = model.state();
            const Var logits = model.forward(m, tape.constant(b.images));
            const Var loss = cross_entropy_label_smoothed(logits, b.labels, hp.label_smoothing);
            const float value = loss.value().item();
            if (!std::isfinite(value)) {
                throw NumericalError(phase + ": non-finite loss at epoch " + std::to_string(e + 1));
            }
            const GradMap grads = tape.backward(loss);
            opt.step(refs.params, grads);
            loss_sum += static_cast<double>(value) * static_cast<double>(b.labels.size());
            seen += static_cast<std::int64_t>(b.labels.size());
        }
        const double val_acc = has_val ? evaluate_any(model, val, ctx, 0.0f).accuracy : std::nan("");
        const double mean_loss = loss_sum / static_cast<double>(std::max<std::int64_t>(seen, 1));
        run.log.push_back({e + 1, mean_loss, val_acc, lr});
        const double wall = std::chrono::duration<double>(Clock::now() - start).count();
        if (ctx.metrics) ctx.metrics->append({label, e + 1, wall, mean_loss, val_acc, lr});
        std::ostringstream line;
        line << phase << " epoch " << (e + 1) << "/" << hp.epochs << " loss " << mean_loss << " val_acc " << val_acc
             << " (" << wall << " s)";
        ctx.say(line.str());
        if (!has_val || val_acc > run.best_val_accuracy) {
            run.best = model;
            run.best_val_accuracy = val_acc;
        }
    }
    run.last = std::move(model);
    return run;
}

resnet::ResNetConfig backbone_from(const Checkpoint& c) {
    auto cfg = resnet::ResNetConfig::by_name(c.hyper_value("backbone"), std::stoi(c.hyper_value("classes")),
                                             std::stod(c.hyper_value("width")));
    cfg.zero_init_residual = c.hyper.contains("zero_init_residual") && c.hyper.at("zero_init_residual") == "true";
    return cfg;
}

void put_backbone(Checkpoint& c, const resnet::ResNetConfig& cfg) {
    std::ostringstream w;
    w.precision(17);
    w << cfg.width_multiplier;
    c.hyper["backbone"] = cfg.name;
    c.hyper["classes"] = std::to_string(cfg.classes);
    c.hyper["width"] = w.str();
    c.hyper["zero_init_residual"] = cfg.zero_init_residual ? "true" : "false";
}

void put_dims(Checkpoint& c, const std::string& key, const meanflow::FeatureDims& d) {
    c.hyper[key] = std::to_string(d.channels) + "x" + std::to_string(d.height) + "x" + std::to_string(d.width);
}

meanflow::FeatureDims get_dims(const Checkpoint& c, const std::string& key) {
    const std::string& s = c.hyper_value(key);
    meanflow::FeatureDims d;
    char x1 = 0, x2 = 0;
    std::istringstream in(s);
    if (!(in >> d.channels >> x1 >> d.height >> x2 >> d.width) || x1 != 'x' || x2 != 'x') {
        throw FormatError("checkpoint hyperparameter '" + key + "' is not CxHxW: '" + s + "'");
    }
    return d;
}

StagedModel build_staged(const resnet::ResNetConfig& cfg, std::int64_t hidden, std::int64_t embed_dim,
                         std::int64_t image_size, std::string_view layout) {
    if (layout.size() != 4) throw FormatError("staged model layout must have four slots");
    SeededRng rng(0);
    StagedModel m;
    m.backbone = cfg;
    m.hidden = hidden;
    m.embed_dim = embed_dim;
    m.image_size = image_size;
    m.stem = resnet::Stem(cfg.stem_channels, rng);
    for (int l = 1; l <= 4; ++l) {
        const char kind = layout[static_cast<std::size_t>(l - 1)];
        auto& slot = m.slots[static_cast<std::size_t>(l - 1)];
        if (kind == 'r') {
            slot = resnet::Stage(stage_prefix(l), cfg.block, cfg.channels(l - 1), cfg.stages[static_cast<std::size_t>(l - 1)], rng);
        } else if (kind == 'm') {
            slot = meanflow::MeanFlowModule(l, feature_dims(cfg, l - 1, image_size), feature_dims(cfg, l, image_size),
                                            hidden, embed_dim, rng);
        } else {
            throw FormatError("staged model layout has unknown slot '" + std::string(1, kind) + "'");
        }
    }
    m.head = resnet::Head(cfg.channels(4), cfg.classes, rng);
    return m;
}

std::string layout_of(const StagedModel& m) {
    std::string s;
    for (int l = 1; l <= 4; ++l) s += m.is_meanflow(l) ? 'm' : 'r';
    return s;
}

void check_stage_shape(resnet::Stage& stage, const resnet::ResNetConfig& cfg, int l) {
    SeededRng rng(0);
    resnet::Stage ref(stage_prefix(l), cfg.block, cfg.channels(l - 1), cfg.stages[static_cast<std::size_t>(l - 1)], rng);
    nn::StateRefs a, b;
    stage.collect(a);
    ref.collect(b);
    bool same = a.params.size() == b.params.size();
    for (std::size_t i = 0; same && i < a.params.size(); ++i) {
        same = a.params[i]->name == b.params[i]->name && a.params[i]->value.shape() == b.params[i]->value.shape();
    }
    if (!same) throw ShapeError("stage " + std::to_string(l) + " does not match the backbone's stage layout");
}

}  // namespace

// ---------------------------------------------------------------------------
// StagedModel
// ---------------------------------------------------------------------------

nn::StateRefs StagedModel::state() {
    nn::StateRefs refs;
    stem.collect(refs);
    for (auto& slot : slots) std::visit([&](auto& s) { s.collect(refs); }, slot);
    head.collect(refs);
    return refs;
}

bool StagedModel::is_meanflow(int stage) const {
    check_stage_index(stage, 4, "staged model");
    return std::holds_alternative<meanflow::MeanFlowModule>(slots[static_cast<std::size_t>(stage - 1)]);
}

std::string StagedModel::kind() const {
    const std::string layout = layout_of(*this);
    if (layout == "mmmm") return "meta";
    if (layout == "rrrm") return "hybrid";
    return "staged";
}

meanflow::MeanFlowModule& StagedModel::module(int stage) {
    if (!is_meanflow(stage)) throw ShapeError("stage " + std::to_string(stage) + " is a residual stage");
    return std::get<meanflow::MeanFlowModule>(slots[static_cast<std::size_t>(stage - 1)]);
}

resnet::Stage& StagedModel::residual(int stage) {
    if (is_meanflow(stage)) throw ShapeError("stage " + std::to_string(stage) + " is a MeanFlow module");
    return std::get<resnet::Stage>(slots[static_cast<std::size_t>(stage - 1)]);
}

ParamBreakdown count_params(StagedModel& model) {
    ParamBreakdown c;
    nn::StateRefs s;
    model.stem.collect(s);
    c.stem = s.parameter_count();
    for (std::size_t l = 0; l < 4; ++l) {
        nn::StateRefs r;
        std::visit([&](auto& slot) { slot.collect(r); }, model.slots[l]);
        c.stage[l] = r.parameter_count();
    }
    nn::StateRefs h;
    model.head.collect(h);
    c.head = h.parameter_count();
    return c;
}

ParamBreakdown count_params(resnet::ResNet& model) {
    const auto p = model.count_params();
    return {p.stem, p.stage, p.head};
}

meanflow::FeatureDims feature_dims(const resnet::ResNetConfig& cfg, int level, std::int64_t image_size) {
    const std::int64_t s = cfg.spatial(level, image_size);
    return {cfg.channels(level), s, s};
}

ParamBreakdown meta_param_counts(const resnet::ResNetConfig& cfg, std::int64_t hidden, std::int64_t embed_dim,
                                 std::int64_t image_size) {
    ParamBreakdown c;
    c.stem = stem_params(cfg);
    for (int l = 1; l <= 4; ++l) {
        c.stage[static_cast<std::size_t>(l - 1)] = meanflow::meanflow_module_params(
            l, feature_dims(cfg, l - 1, image_size), feature_dims(cfg, l, image_size), hidden, embed_dim);
    }
    c.head = head_params(cfg);
    return c;
}

ParamBreakdown hybrid_param_counts(const resnet::ResNetConfig& cfg, std::int64_t hidden, std::int64_t embed_dim,
                                   std::int64_t image_size) {
    const auto teacher = resnet::count_params(cfg);
    ParamBreakdown c = meta_param_counts(cfg, hidden, embed_dim, image_size);
    for (std::size_t l = 0; l < 3; ++l) c.stage[l] = teacher.stage[l];
    return c;
}

double meta_budget(const resnet::ResNetConfig& cfg) {
    const bool r50 = cfg.block == resnet::BlockKind::Bottleneck;
    const double at10 = r50 ? 5.11e6 : 5.08e6;
    const double at100 = r50 ? 5.43e6 : 5.39e6;
    const double k = static_cast<double>(cfg.classes);
    return (at10 + (k - 10.0) / 90.0 * (at100 - at10)) * cfg.width_multiplier * cfg.width_multiplier;
}

std::int64_t calibrate_hidden(const resnet::ResNetConfig& cfg, std::int64_t embed_dim, double target) {
    const auto total = [&](std::int64_t h) { return static_cast<double>(meta_param_counts(cfg, h, embed_dim).total()); };
    std::int64_t lo = 1, hi = 1 << 16;
    if (total(lo) >= target) return lo;
    while (hi - lo > 1) {
        const std::int64_t mid = (lo + hi) / 2;
        (total(mid) < target ? lo : hi) = mid;
    }
    return std::abs(total(lo) - target) <= std::abs(total(hi) - target) ? lo : hi;
}

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

bool FreezeMask::is_trainable(const std::string& name) const {
    for (const auto& p : trainable) {
        if (name.starts_with(p)) return true;
    }
    return false;
}

void FreezeMask::apply(const nn::StateRefs& state) const {
    for (auto* p : state.params) p->value.set_requires_grad(is_trainable(p->name));
}

std::uint64_t FreezeMask::frozen_hash(const nn::StateRefs& state) const {
    nn::StateRefs frozen;
    for (auto* p : state.params) {
        if (!is_trainable(p->name)) frozen.params.push_back(p);
    }
    for (const auto& b : state.buffers) {
        if (!is_trainable(b.name)) frozen.buffers.push_back(b);
    }
    return state_hash(frozen);
}

FreezeMask meta_finetune_mask() { return {{"mf1.u", "mf2.u", "mf3.u", "mf4.u", "head."}}; }

FreezeMask incubation_mask(int stage) { return {{stage_prefix(stage) + "."}}; }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

Context make_context(const RunConfig& cfg) {
    Context ctx;
    data::DatasetSpec spec = cfg.dataset;
    spec.classes = cfg.classes;
    ctx.splits = data::load_splits(spec);
    if (ctx.splits.train.classes != cfg.classes) {
        throw ConfigError("config: classes = " + std::to_string(cfg.classes) + " but the dataset has " +
                          std::to_string(ctx.splits.train.classes));
    }
    ctx.augment.random_crop = cfg.augment_crop;
    ctx.augment.padding = cfg.augment_padding;
    ctx.augment.flip_prob = cfg.augment_flip_prob;
    ctx.augment.norm = cfg.norm ? *cfg.norm : data::channel_stats(ctx.splits.train);
    ctx.eval_batch_size = cfg.eval_batch_size;
    return ctx;
}

EvalResult evaluate(resnet::ResNet& model, const data::Dataset& split, const Context& ctx, float eps) {
    return evaluate_any(model, split, ctx, eps);
}

EvalResult evaluate(StagedModel& model, const data::Dataset& split, const Context& ctx, float eps) {
    return evaluate_any(model, split, ctx, eps);
}

ClassifierRun<resnet::ResNet> train_teacher(const resnet::ResNetConfig& cfg, const Context& ctx,
                                            const TrainHyper& hyper) {
    SeededRng init(label_seed(hyper.seed, "teacher.init"));
    return fit_classifier(resnet::ResNet(cfg, init), "teacher", ctx, hyper, false);
}

double stage_mapping_mse(meanflow::MeanFlowModule& module, resnet::ResNet& teacher, const data::Dataset& split,
                         const Context& ctx) {
    double sum = 0.0;
    std::int64_t n = 0;
    const nn::PlainMode m;
    for (const auto& b : data::eval_batches(split, ctx.eval_batch_size, ctx.augment.norm)) {
        const auto [x, y] = stage_io(teacher, b.images, module.stage);
        const Tensor out = module.forward(m, x);
        const Tensor d = sub(out, y);
        for (float v : d.data()) sum += static_cast<double>(v) * v;
        n += d.numel();
    }
    return sum / static_cast<double>(n);
}

StageRun train_stage_meanflow(resnet::ResNet& teacher, int stage, const Context& ctx, const MeanFlowHyper& hp) {
    check_stage_index(stage, 4, "train_stage_meanflow");
    const std::string phase = "compress." + stage_prefix(stage);
    const std::string label = ctx.metrics ? ctx.metrics->begin_phase(phase) : phase;
    const auto& cfg = teacher.config;
    const std::int64_t image = ctx.splits.train.image_size();
    const SeededRng base(label_seed(hp.train.seed, phase));
    SeededRng init = base.fork(0xA11C);

    StageRun run;
    run.module = meanflow::MeanFlowModule(stage, feature_dims(cfg, stage - 1, image), feature_dims(cfg, stage, image),
                                          hp.hidden, hp.embed_dim, init);
    auto& module = run.module;
    // Teacher features are fixed, so they are computed once per split.
    const auto [src_all, dst_all] = split_stage_io(teacher, ctx.splits.train, stage, ctx);
    const data::Dataset& probe = ctx.splits.val.size() > 0 ? ctx.splits.val : ctx.splits.train;
    calibrate_alignment(module.align, src_all, ctx.eval_batch_size);
    run.mse_before = stage_mapping_mse(module, teacher, probe, ctx);

    fit_alignment(module.align, src_all, dst_all, hp.train, base, phase, ctx);
    calibrate_alignment(module.align, src_all, ctx.eval_batch_size);
    run.mse_aligned = stage_mapping_mse(module, teacher, probe, ctx);

    nn::AdamW opt(hp.train.lr, hp.train.weight_decay);
    const nn::CosineSchedule schedule(hp.train.lr, hp.train.epochs);
    const auto start = Clock::now();
    for (int e = 0; e < hp.train.epochs; ++e) {
        const float lr = schedule.at(e);
        opt.set_learning_rate(lr);
        SeededRng rng = base.fork(static_cast<std::uint64_t>(e) + 1);
        double loss_sum = 0.0;
        int batches = 0;
        for (const auto& idx : data::epoch_order(src_all.dim(0), hp.train.batch_size, rng)) {
            const Tensor xs = gather_rows(src_all, idx);
            const Tensor z_target = nchw_to_rows(gather_rows(dst_all, idx));

            // The flow-matching loss reaches only the velocity nets; the calibrated
            // alignment layer supplies fixed z_align endpoints.
            const Tensor z_align = nchw_to_rows(module.align.forward(nn::PlainMode{false}, xs));
            const Tensor v = sub(z_align, z_target);
            const std::int64_t rows = v.dim(0);

            GradTape tape;
            const nn::TapeMode m{&tape, true};
            nn::StateRefs refs;
            for (auto& net : module.nets) net.collect(refs);
            Var loss;
            for (std::size_t k = 0; k < module.nets.size(); ++k) {
                meanflow::TimeBatch times = hp.time.sample(rng, rows);
                if (module.two_step()) times = meanflow::rescale(times, 0.5f * static_cast<float>(k), 0.5f * static_cast<float>(k + 1));
                auto& net = module.nets[k];
                const Tensor z_t = meanflow::make_interpolant(z_align, z_target, times.t);
                const Tensor u_target = meanflow::target_velocity(net, z_t, times, v, hp.mode);
                const Var u = net.forward(m, tape.constant(z_t), tape.constant(times.r), tape.constant(times.t));
                const Var part = meanflow::flow_matching_loss(u, u_target);
                loss = k == 0 ? part : add(loss, part);
            }
            const float value = loss.value().item();
            if (!std::isfinite(value)) {
                throw NumericalError(phase + ": non-finite flow-matching loss at epoch " + std::to_string(e + 1));
            }
            const GradMap grads = tape.backward(loss);
            opt.step(refs.params, grads);
            loss_sum += value;
            ++batches;
        }
        const double mean_loss = loss_sum / std::max(batches, 1);
        run.epoch_loss.push_back(mean_loss);
        const double wall = std::chrono::duration<double>(Clock::now() - start).count();
        if (ctx.metrics) ctx.metrics->append({label, e + 1, wall, mean_loss, std::nan(""), lr});
        std::ostringstream line;
        line << phase << " epoch " << (e + 1) << "/" << hp.train.epochs << " loss " << mean_loss << " (" << wall
             << " s)";
        ctx.say(line.str());
    }
    run.mse_after = stage_mapping_mse(module, teacher, probe, ctx);
    return run;
}

StagedModel assemble_meta(const resnet::ResNet& teacher, std::array<meanflow::MeanFlowModule, 4> modules,
                          std::int64_t image_size) {
    const auto& cfg = teacher.config;
    meanflow::FeatureDims prev = feature_dims(cfg, 0, image_size);
    for (int l = 1; l <= 4; ++l) {
        const auto& mod = modules[static_cast<std::size_t>(l - 1)];
        if (mod.stage != l) {
            throw ShapeError("assemble_meta: slot " + std::to_string(l) + " holds the stage " +
                             std::to_string(mod.stage) + " module");
        }
        if (mod.source != prev) {
            throw ShapeError("assemble_meta: stage " + std::to_string(l) + " expects input " + mod.source.str() +
                             " but the previous stage produces " + prev.str());
        }
        if (mod.target != feature_dims(cfg, l, image_size)) {
            throw ShapeError("assemble_meta: stage " + std::to_string(l) + " output " + mod.target.str() +
                             " does not match the backbone");
        }
        prev = mod.target;
    }
    StagedModel m;
    m.backbone = cfg;
    m.hidden = modules[0].nets.front().config().hidden;
    m.embed_dim = modules[0].nets.front().config().embed_dim;
    m.image_size = image_size;
    m.stem = teacher.stem;
    for (std::size_t l = 0; l < 4; ++l) m.slots[l] = std::move(modules[l]);
    m.head = teacher.head;
    return m;
}

FinetuneRun finetune_meta(const StagedModel& meta, const Context& ctx, const TrainHyper& hyper) {
    if (meta.kind() != "meta") throw ShapeError("finetune_meta: model is a " + meta.kind() + " model");
    StagedModel model = meta;
    const FreezeMask mask = meta_finetune_mask();
    mask.apply(model.state());
    FinetuneRun out;
    out.frozen_hash_before = mask.frozen_hash(model.state());
    out.test_before = evaluate(model, ctx.splits.test, ctx);
    out.run = fit_classifier(std::move(model), "finetune-meta", ctx, hyper, true);
    out.frozen_hash_after = mask.frozen_hash(out.run.last.state());
    out.test_after = evaluate(out.run.best, ctx.splits.test, ctx);
    return out;
}

IncubationRun incubate_stage(const StagedModel& meta, const resnet::ResNet& teacher, int stage, const Context& ctx,
                             const TrainHyper& hyper) {
    if (stage == 4) throw ConfigError("incubate: stage 4 is never incubated; it stays a MeanFlow module");
    check_stage_index(stage, 3, "incubate");
    if (meta.backbone.name != teacher.config.name || meta.backbone.classes != teacher.config.classes ||
        meta.backbone.width_multiplier != teacher.config.width_multiplier) {
        throw ConfigError("incubate: meta model and teacher use different backbones");
    }
    StagedModel model = meta;
    model.slots[static_cast<std::size_t>(stage - 1)] = teacher.stages[static_cast<std::size_t>(stage - 1)];
    const FreezeMask mask = incubation_mask(stage);
    mask.apply(model.state());

    IncubationRun out;
    out.frozen_hash_before = mask.frozen_hash(model.state());
    TrainHyper hp = hyper;
    hp.seed = mix_seed(hyper.seed, static_cast<std::uint64_t>(stage));
    auto run = fit_classifier(std::move(model), "incubate." + stage_prefix(stage), ctx, hp, false);
    out.frozen_hash_after = mask.frozen_hash(run.last.state());
    out.stage = run.best.residual(stage);
    out.log = std::move(run.log);
    return out;
}

StagedModel assemble_hybrid(const StagedModel& meta, std::array<resnet::Stage, 3> stages) {
    if (!meta.is_meanflow(4)) throw ShapeError("assemble_hybrid: the meta model's stage 4 is not a MeanFlow module");
    StagedModel m = meta;
    for (int l = 1; l <= 3; ++l) {
        auto& s = stages[static_cast<std::size_t>(l - 1)];
        check_stage_shape(s, meta.backbone, l);
        m.slots[static_cast<std::size_t>(l - 1)] = std::move(s);
    }
    FreezeMask::all().apply(m.state());
    return m;
}

FinetuneRun finetune_global(const StagedModel& hybrid, const Context& ctx, const TrainHyper& hyper) {
    StagedModel model = hybrid;
    const FreezeMask mask = FreezeMask::all();
    mask.apply(model.state());
    FinetuneRun out;
    out.frozen_hash_before = mask.frozen_hash(model.state());
    out.test_before = evaluate(model, ctx.splits.test, ctx);
    out.run = fit_classifier(std::move(model), "finetune-global", ctx, hyper, true);
    out.frozen_hash_after = mask.frozen_hash(out.run.last.state());
    out.test_after = evaluate(out.run.best, ctx.splits.test, ctx);
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

Checkpoint teacher_checkpoint(resnet::ResNet& model) {
    Checkpoint c;
    c.kind = "teacher";
    put_backbone(c, model.config);
    store_state(c, model.state());
    return c;
}

resnet::ResNet teacher_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "teacher") throw KindError("expected a teacher checkpoint, got '" + c.kind + "'");
    SeededRng rng(0);
    resnet::ResNet m(backbone_from(c), rng);
    restore_state(m.state(), c);
    return m;
}

Checkpoint module_checkpoint(meanflow::MeanFlowModule& module, const resnet::ResNetConfig& backbone,
                             std::int64_t image_size) {
    Checkpoint c;
    c.kind = "meanflow";
    put_backbone(c, backbone);
    c.hyper["stage"] = std::to_string(module.stage);
    c.hyper["hidden"] = std::to_string(module.nets.front().config().hidden);
    c.hyper["embed_dim"] = std::to_string(module.nets.front().config().embed_dim);
    c.hyper["image_size"] = std::to_string(image_size);
    put_dims(c, "source", module.source);
    put_dims(c, "target", module.target);
    nn::StateRefs refs;
    module.collect(refs);
    store_state(c, refs);
    return c;
}

meanflow::MeanFlowModule module_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "meanflow") throw KindError("expected a meanflow checkpoint, got '" + c.kind + "'");
    SeededRng rng(0);
    meanflow::MeanFlowModule m(std::stoi(c.hyper_value("stage")), get_dims(c, "source"), get_dims(c, "target"),
                               std::stoll(c.hyper_value("hidden")), std::stoll(c.hyper_value("embed_dim")), rng);
    nn::StateRefs refs;
    m.collect(refs);
    restore_state(refs, c);
    return m;
}

Checkpoint stage_checkpoint(resnet::Stage& stage, int index, const resnet::ResNetConfig& backbone) {
    check_stage_index(index, 3, "stage checkpoint");
    Checkpoint c;
    c.kind = "stage";
    put_backbone(c, backbone);
    c.hyper["stage"] = std::to_string(index);
    nn::StateRefs refs;
    stage.collect(refs);
    store_state(c, refs);
    return c;
}

resnet::Stage stage_from_checkpoint(const Checkpoint& c, int expected_index) {
    if (c.kind != "stage") throw KindError("expected a stage checkpoint, got '" + c.kind + "'");
    const int l = std::stoi(c.hyper_value("stage"));
    if (l != expected_index) {
        throw FormatError("stage checkpoint holds stage " + std::to_string(l) + ", expected " +
                          std::to_string(expected_index));
    }
    const auto cfg = backbone_from(c);
    SeededRng rng(0);
    resnet::Stage s(stage_prefix(l), cfg.block, cfg.channels(l - 1), cfg.stages[static_cast<std::size_t>(l - 1)], rng);
    nn::StateRefs refs;
    s.collect(refs);
    restore_state(refs, c);
    return s;
}

Checkpoint staged_checkpoint(StagedModel& model) {
    const std::string kind = model.kind();
    if (kind != "meta" && kind != "hybrid") throw KindError("only meta and hybrid models are saved, not '" + kind + "'");
    Checkpoint c;
    c.kind = kind;
    put_backbone(c, model.backbone);
    c.hyper["hidden"] = std::to_string(model.hidden);
    c.hyper["embed_dim"] = std::to_string(model.embed_dim);
    c.hyper["image_size"] = std::to_string(model.image_size);
    c.hyper["layout"] = layout_of(model);
    store_state(c, model.state());
    return c;
}

StagedModel staged_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "meta" && c.kind != "hybrid") {
        throw KindError("expected a meta or hybrid checkpoint, got '" + c.kind + "'");
    }
    StagedModel m = build_staged(backbone_from(c), std::stoll(c.hyper_value("hidden")),
                                 std::stoll(c.hyper_value("embed_dim")), std::stoll(c.hyper_value("image_size")),
                                 c.hyper_value("layout"));
    if (m.kind() != c.kind) throw FormatError("checkpoint layout does not match its kind '" + c.kind + "'");
    restore_state(m.state(), c);
    return m;
}

Manifest Manifest::load(const std::filesystem::path& path) {
    Manifest m;
    if (!std::filesystem::exists(path)) return m;
    std::ifstream in(path);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const auto sp = line.rfind(' ');
        if (eq == std::string::npos || sp == std::string::npos || sp < eq) {
            throw FormatError("manifest '" + path.string() + "' line " + std::to_string(n) + " is malformed");
        }
        m.entries[line.substr(0, eq)] = {line.substr(eq + 1, sp - eq - 1), line.substr(sp + 1)};
    }
    return m;
}

void Manifest::record(const std::string& phase, const std::filesystem::path& checkpoint) {
    entries[phase] = {checkpoint, file_digest(checkpoint)};
}

void Manifest::save(const std::filesystem::path& path) const {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw FormatError("cannot write '" + tmp.string() + "'");
        for (const auto& [phase, e] : entries) out << phase << "=" << e.path.string() << " " << e.digest << "\n";
    }
    std::filesystem::rename(tmp, path);
}

std::optional<std::filesystem::path> Manifest::find(const std::string& phase) const {
    auto it = entries.find(phase);
    if (it == entries.end()) return std::nullopt;
    return it->second.path;
}

}  // namespace mfi::pipeline
