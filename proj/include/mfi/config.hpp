#pragma once

// Plain-text run configuration: one `key = value` per line, `#` starts a
// comment. Unknown keys are rejected. Defaults follow the published training
// recipe; the teacher recipe and the dataset default are our own choices.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "mfi/data.hpp"
#include "mfi/meanflow.hpp"

namespace mfi {

struct PhaseConfig {
    int epochs = 100;
    float lr = 1e-3f;
};

struct RunConfig {
    std::string backbone = "resnet34";
    int classes = 10;
    double width = 1.0;
    bool zero_init_residual = false;
    std::uint64_t seed = 0;
    std::filesystem::path out = "runs/mfi";

    data::DatasetSpec dataset{data::DatasetKind::Cifar10, "data/cifar-10-batches-bin"};
    bool augment_crop = true;
    int augment_padding = 4;
    double augment_flip_prob = 0.5;
    /// Unset: computed from the training split.
    std::optional<data::ChannelNorm> norm;

    std::int64_t batch_size = 128;
    std::int64_t eval_batch_size = 256;
    float weight_decay = 0.01f;
    float label_smoothing = 0.1f;

    PhaseConfig teacher{200, 1e-3f};
    PhaseConfig meanflow{300, 2e-4f};
    PhaseConfig meta{100, 1e-3f};
    PhaseConfig incubate{200, 1e-3f};
    PhaseConfig global{100, 1e-3f};

    /// 0: calibrate against the meta-model budget.
    std::int64_t hidden = 0;
    std::int64_t embed_dim = 64;
    meanflow::JvpMode jvp_mode = meanflow::JvpMode::Full;
    meanflow::TimeSampler time;

    static RunConfig parse(std::string_view text);
    static RunConfig from_file(const std::filesystem::path& path);
    /// Canonical text form; parse(to_text()) reproduces the config.
    std::string to_text() const;
    /// Apply one `key = value` assignment.
    void set(std::string_view key, std::string_view value);
};

}  // namespace mfi
