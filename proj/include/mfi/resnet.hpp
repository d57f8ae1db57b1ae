#pragma once

// CIFAR-style residual networks (3x3 stem, no max-pool) built from the layers
// in nn.hpp. Parameter names follow "stem.conv.weight", "stage2.0.bn1.bias",
// "head.fc.weight" so checkpoints are stable across builds.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mfi/error.hpp"
#include "mfi/nn.hpp"

namespace mfi::resnet {

enum class BlockKind { Basic, Bottleneck };

struct StageConfig {
    int blocks = 0;
    std::int64_t width = 0;  // inner width; output is width * expansion
    int stride = 1;
};

struct ResNetConfig {
    std::string name;
    BlockKind block = BlockKind::Basic;
    std::array<StageConfig, 4> stages{};
    std::int64_t stem_channels = 64;
    int classes = 10;
    double width_multiplier = 1.0;
    /// Zero the last batch-norm scale of every block so each starts as identity + relu.
    bool zero_init_residual = false;

    static ResNetConfig resnet18(int classes, double width_multiplier = 1.0);
    static ResNetConfig resnet34(int classes, double width_multiplier = 1.0);
    static ResNetConfig resnet50(int classes, double width_multiplier = 1.0);
    /// "resnet18" | "resnet34" | "resnet50"; throws ConfigError otherwise.
    static ResNetConfig by_name(std::string_view name, int classes, double width_multiplier = 1.0);

    int expansion() const { return block == BlockKind::Bottleneck ? 4 : 1; }
    /// Channels of X^(l): l = 0 is the stem output, l = 1..4 the stage outputs.
    std::int64_t channels(int level) const;
    /// Spatial extent of X^(l) for a square input of side `image_size`.
    std::int64_t spatial(int level, std::int64_t image_size) const;
};

/// Scaled width, never below one channel.
std::int64_t scaled_width(std::int64_t base, double multiplier);

class ResidualBlock {
  public:
    ResidualBlock() = default;
    ResidualBlock(const std::string& name, BlockKind kind, std::int64_t in_channels, std::int64_t width, int stride,
                  SeededRng& rng);

    /// relu(f(x) + shortcut(x)); the shortcut is the identity unless the
    /// stride or channel count changes, in which case it is 1x1 conv + BN.
    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        auto y = relu(bn1.forward(m, conv1.forward(m, x)));
        if (kind == BlockKind::Basic) {
            y = bn2.forward(m, conv2.forward(m, y));
        } else {
            y = relu(bn2.forward(m, conv2.forward(m, y)));
            y = bn3.forward(m, conv3.forward(m, y));
        }
        auto shortcut = has_downsample ? down_bn.forward(m, down_conv.forward(m, x)) : x;
        if (nn::value_of(y).shape() != nn::value_of(shortcut).shape()) {
            throw ShapeError("residual_block: branch shape " + to_string(nn::value_of(y).shape()) +
                             " does not match shortcut shape " + to_string(nn::value_of(shortcut).shape()));
        }
        return relu(add(y, shortcut));
    }

    std::int64_t out_channels() const;
    nn::BatchNorm2d& last_bn() { return kind == BlockKind::Basic ? bn2 : bn3; }
    void collect(nn::StateRefs& refs);

    BlockKind kind = BlockKind::Basic;
    nn::Conv2d conv1, conv2, conv3;
    nn::BatchNorm2d bn1, bn2, bn3;
    bool has_downsample = false;
    nn::Conv2d down_conv;
    nn::BatchNorm2d down_bn;
};

class Stage {
  public:
    Stage() = default;
    Stage(const std::string& name, BlockKind kind, std::int64_t in_channels, const StageConfig& cfg, SeededRng& rng);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, typename Mode::Value x) {
        for (auto& b : blocks) x = b.forward(m, x);
        return x;
    }

    void collect(nn::StateRefs& refs);

    std::vector<ResidualBlock> blocks;
};

class Stem {
  public:
    Stem() = default;
    Stem(std::int64_t channels, SeededRng& rng);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        return relu(bn.forward(m, conv.forward(m, x)));
    }

    void collect(nn::StateRefs& refs);

    nn::Conv2d conv;
    nn::BatchNorm2d bn;
};

class Head {
  public:
    Head() = default;
    Head(std::int64_t in_channels, int classes, SeededRng& rng);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        return fc.forward(m, global_avg_pool(x));
    }

    void collect(nn::StateRefs& refs);

    nn::Linear fc;
};

/// Intermediate features of one forward pass.
template <class Value>
struct Taps {
    Value stem;                  // X^(0)
    std::array<Value, 4> stage;  // X^(1..4)
    Value logits;

    const Value& level(int l) const { return l == 0 ? stem : stage.at(static_cast<std::size_t>(l - 1)); }
};

struct ParamCounts {
    std::int64_t stem = 0;
    std::array<std::int64_t, 4> stage{};
    std::int64_t head = 0;
    std::int64_t total() const { return stem + stage[0] + stage[1] + stage[2] + stage[3] + head; }
};

class ResNet {
  public:
    ResNet() = default;
    ResNet(const ResNetConfig& config, SeededRng& rng);

    template <class Mode>
    typename Mode::Value forward(const Mode& m, const typename Mode::Value& x) {
        auto h = stem.forward(m, x);
        for (auto& s : stages) h = s.forward(m, h);
        return head.forward(m, h);
    }

    template <class Mode>
    Taps<typename Mode::Value> forward_with_taps(const Mode& m, const typename Mode::Value& x) {
        Taps<typename Mode::Value> taps;
        taps.stem = stem.forward(m, x);
        auto h = taps.stem;
        for (std::size_t l = 0; l < 4; ++l) {
            h = stages[l].forward(m, h);
            taps.stage[l] = h;
        }
        taps.logits = head.forward(m, h);
        return taps;
    }

    /// Parameters and buffers in a fixed order. Re-collect after moving the model.
    nn::StateRefs state();
    ParamCounts count_params();

    ResNetConfig config;
    Stem stem;
    std::array<Stage, 4> stages;
    Head head;
};

/// Closed-form parameter count of a configuration, without building it.
ParamCounts count_params(const ResNetConfig& config);

}  // namespace mfi::resnet
