#pragma once

// Compression and expansion lifecycle:
//   teacher -> four MeanFlow modules -> meta model -> incubated stages 1-3
//   -> hybrid (residual stages 1-3 + MeanFlow stage 4) -> global fine-tune.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mfi/checkpoint.hpp"
#include "mfi/config.hpp"
#include "mfi/data.hpp"
#include "mfi/meanflow.hpp"
#include "mfi/metrics.hpp"
#include "mfi/resnet.hpp"

namespace mfi::pipeline {

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

using StageSlot = std::variant<resnet::Stage, meanflow::MeanFlowModule>;

/// Stem, four stage slots (residual stage or MeanFlow module) and head.
/// All MeanFlow slots: the meta model. Residual 1-3 with MeanFlow 4: the hybrid.
class StagedModel {
  public:
    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        auto h = stem.forward(m, x);
        for (auto& slot : slots) {
            h = std::visit([&](auto& s) { return s.forward(m, h); }, slot);
        }
        return head.forward(m, h);
    }

    nn::StateRefs state();
    bool is_meanflow(int stage) const;
    /// "meta", "hybrid", or "staged" for any other mix.
    std::string kind() const;
    meanflow::MeanFlowModule& module(int stage);
    resnet::Stage& residual(int stage);

    resnet::ResNetConfig backbone;
    std::int64_t hidden = 0;
    std::int64_t embed_dim = 64;
    std::int64_t image_size = 32;
    resnet::Stem stem;
    std::array<StageSlot, 4> slots;
    resnet::Head head;
};

struct ParamBreakdown {
    std::int64_t stem = 0;
    std::array<std::int64_t, 4> stage{};
    std::int64_t head = 0;
    std::int64_t total() const { return stem + stage[0] + stage[1] + stage[2] + stage[3] + head; }
};

ParamBreakdown count_params(StagedModel& model);
ParamBreakdown count_params(resnet::ResNet& model);

meanflow::FeatureDims feature_dims(const resnet::ResNetConfig& cfg, int level, std::int64_t image_size);

/// Closed-form totals for a backbone and velocity-net width.
ParamBreakdown meta_param_counts(const resnet::ResNetConfig& cfg, std::int64_t hidden, std::int64_t embed_dim,
                                 std::int64_t image_size = 32);
ParamBreakdown hybrid_param_counts(const resnet::ResNetConfig& cfg, std::int64_t hidden, std::int64_t embed_dim,
                                   std::int64_t image_size = 32);

/// Meta-model budget used for width calibration: the published meta
/// totals at full width (R-34 uses 5.08M / 5.39M and R-50 5.11M / 5.43M for
/// 10 / 100 classes), scaled by width^2.
double meta_budget(const resnet::ResNetConfig& cfg);
/// Velocity-net width whose meta total is closest to `target`.
std::int64_t calibrate_hidden(const resnet::ResNetConfig& cfg, std::int64_t embed_dim, double target);

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

/// Parameters whose names start with one of `trainable` train; all others freeze.
struct FreezeMask {
    std::vector<std::string> trainable;

    static FreezeMask all() { return {{""}}; }
    bool is_trainable(const std::string& name) const;
    void apply(const nn::StateRefs& state) const;
    /// Hash of everything the mask freezes (parameters and buffers).
    std::uint64_t frozen_hash(const nn::StateRefs& state) const;
};

/// Velocity nets and head train; stem and alignment layers stay fixed.
FreezeMask meta_finetune_mask();
/// Only the residual stage `stage` trains.
FreezeMask incubation_mask(int stage);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainHyper {
    int epochs = 1;
    float lr = 1e-3f;
    float weight_decay = 0.01f;
    std::int64_t batch_size = 128;
    float label_smoothing = 0.1f;
    std::uint64_t seed = 0;
};

/// Shared runtime state for a pipeline phase.
struct Context {
    data::Splits splits;
    data::AugmentConfig augment;
    std::int64_t eval_batch_size = 256;
    MetricsLog* metrics = nullptr;
    /// Progress lines; may be empty.
    std::function<void(const std::string&)> log;

    void say(const std::string& line) const {
        if (log) log(line);
    }
};

/// Builds the splits and normalization from a run configuration.
Context make_context(const RunConfig& cfg);

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
    std::int64_t samples = 0;
};

EvalResult evaluate(resnet::ResNet& model, const data::Dataset& split, const Context& ctx, float label_smoothing = 0.0f);
EvalResult evaluate(StagedModel& model, const data::Dataset& split, const Context& ctx, float label_smoothing = 0.0f);

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double val_accuracy = 0.0;
    float lr = 0.0f;
};

template <class Model>
struct ClassifierRun {
    Model last;
    Model best;  // best validation accuracy (the starting point counts for fine-tuning)
    double best_val_accuracy = 0.0;
    std::vector<EpochLog> log;
};

ClassifierRun<resnet::ResNet> train_teacher(const resnet::ResNetConfig& cfg, const Context& ctx,
                                            const TrainHyper& hyper);

struct MeanFlowHyper {
    TrainHyper train;
    meanflow::JvpMode mode = meanflow::JvpMode::Full;
    meanflow::TimeSampler time;
    std::int64_t hidden = 64;
    std::int64_t embed_dim = 64;
};

struct StageRun {
    meanflow::MeanFlowModule module;
    std::vector<double> epoch_loss;
    /// Mean squared error against the teacher tap on the validation split:
    /// fresh module, after the alignment fit (zero field), and after training.
    double mse_before = 0.0;
    double mse_aligned = 0.0;
    double mse_after = 0.0;
};

/// Fits the MeanFlow module of `stage` to the frozen teacher's (X^(l-1), X^(l)) pairs.
StageRun train_stage_meanflow(resnet::ResNet& teacher, int stage, const Context& ctx, const MeanFlowHyper& hyper);

/// Per-element mean squared error of a module's mapping against teacher taps.
double stage_mapping_mse(meanflow::MeanFlowModule& module, resnet::ResNet& teacher, const data::Dataset& split,
                         const Context& ctx);

/// Stem and head from the teacher, MeanFlow modules for all four stages.
StagedModel assemble_meta(const resnet::ResNet& teacher, std::array<meanflow::MeanFlowModule, 4> modules,
                          std::int64_t image_size = 32);

struct FinetuneRun {
    ClassifierRun<StagedModel> run;
    EvalResult test_before;
    EvalResult test_after;  // of the best-on-validation model
    std::uint64_t frozen_hash_before = 0;
    std::uint64_t frozen_hash_after = 0;
};

FinetuneRun finetune_meta(const StagedModel& meta, const Context& ctx, const TrainHyper& hyper);

struct IncubationRun {
    resnet::Stage stage;
    std::vector<EpochLog> log;
    std::uint64_t frozen_hash_before = 0;
    std::uint64_t frozen_hash_after = 0;
};

/// Branches from `meta` (left untouched), swaps in the teacher's stage `l` and
/// trains only that stage. Stage 4 is rejected.
IncubationRun incubate_stage(const StagedModel& meta, const resnet::ResNet& teacher, int stage, const Context& ctx,
                             const TrainHyper& hyper);

/// Residual stages 1-3 with the meta model's stem, stage-4 module and head.
StagedModel assemble_hybrid(const StagedModel& meta, std::array<resnet::Stage, 3> stages);

FinetuneRun finetune_global(const StagedModel& hybrid, const Context& ctx, const TrainHyper& hyper);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

Checkpoint teacher_checkpoint(resnet::ResNet& model);
resnet::ResNet teacher_from_checkpoint(const Checkpoint& ckpt);

Checkpoint module_checkpoint(meanflow::MeanFlowModule& module, const resnet::ResNetConfig& backbone,
                             std::int64_t image_size);
meanflow::MeanFlowModule module_from_checkpoint(const Checkpoint& ckpt);

Checkpoint stage_checkpoint(resnet::Stage& stage, int index, const resnet::ResNetConfig& backbone);
resnet::Stage stage_from_checkpoint(const Checkpoint& ckpt, int expected_index);

Checkpoint staged_checkpoint(StagedModel& model);
StagedModel staged_from_checkpoint(const Checkpoint& ckpt);

/// Plain-text `phase=path digest` lines.
class Manifest {
  public:
    static Manifest load(const std::filesystem::path& path);
    void record(const std::string& phase, const std::filesystem::path& checkpoint);
    void save(const std::filesystem::path& path) const;
    std::optional<std::filesystem::path> find(const std::string& phase) const;

    struct Entry {
        std::filesystem::path path;
        std::string digest;
    };
    std::map<std::string, Entry> entries;
};

}  // namespace mfi::pipeline
