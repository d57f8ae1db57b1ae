#include "mfi/resnet.hpp"

#include <cmath>

namespace mfi::resnet {

namespace {

ResNetConfig make(std::string name, BlockKind block, std::array<int, 4> depth, int classes, double w) {
    if (classes < 2) throw ConfigError("resnet: need at least 2 classes, got " + std::to_string(classes));
    if (!(w > 0.0)) throw ConfigError("resnet: width multiplier must be positive");
    ResNetConfig c;
    c.name = std::move(name);
    c.block = block;
    c.classes = classes;
    c.width_multiplier = w;
    c.stem_channels = scaled_width(64, w);
    const std::array<std::int64_t, 4> widths{64, 128, 256, 512};
    for (std::size_t l = 0; l < 4; ++l) {
        c.stages[l] = {depth[l], scaled_width(widths[l], w), l == 0 ? 1 : 2};
    }
    return c;
}

std::int64_t conv_params(std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k * k; }

std::int64_t block_params(BlockKind kind, std::int64_t in, std::int64_t width, int stride) {
    std::int64_t n = 0;
    std::int64_t out = width;
    if (kind == BlockKind::Basic) {
        n += conv_params(in, width, 3) + 2 * width;
        n += conv_params(width, width, 3) + 2 * width;
    } else {
        out = width * 4;
        n += conv_params(in, width, 1) + 2 * width;
        n += conv_params(width, width, 3) + 2 * width;
        n += conv_params(width, out, 1) + 2 * out;
    }
    if (stride != 1 || in != out) n += conv_params(in, out, 1) + 2 * out;
    return n;
}

}  // namespace

std::int64_t scaled_width(std::int64_t base, double multiplier) {
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(base) * multiplier));
}

ResNetConfig ResNetConfig::resnet18(int classes, double w) {
    return make("resnet18", BlockKind::Basic, {2, 2, 2, 2}, classes, w);
}
ResNetConfig ResNetConfig::resnet34(int classes, double w) {
    return make("resnet34", BlockKind::Basic, {3, 4, 6, 3}, classes, w);
}
ResNetConfig ResNetConfig::resnet50(int classes, double w) {
    return make("resnet50", BlockKind::Bottleneck, {3, 4, 6, 3}, classes, w);
}

ResNetConfig ResNetConfig::by_name(std::string_view name, int classes, double w) {
    if (name == "resnet18") return resnet18(classes, w);
    if (name == "resnet34") return resnet34(classes, w);
    if (name == "resnet50") return resnet50(classes, w);
    throw ConfigError("unknown backbone '" + std::string(name) + "' (expected resnet18, resnet34 or resnet50)");
}

std::int64_t ResNetConfig::channels(int level) const {
    if (level < 0 || level > 4) throw ShapeError("resnet: feature level must be in [0, 4], got " + std::to_string(level));
    if (level == 0) return stem_channels;
    return stages[static_cast<std::size_t>(level - 1)].width * expansion();
}

std::int64_t ResNetConfig::spatial(int level, std::int64_t image_size) const {
    if (level < 0 || level > 4) throw ShapeError("resnet: feature level must be in [0, 4], got " + std::to_string(level));
    std::int64_t s = image_size;
    const kernels::ConvGeometry g3{2, 1};
    for (int l = 1; l <= level; ++l) {
        if (stages[static_cast<std::size_t>(l - 1)].stride == 2) s = kernels::conv_out_extent(s, 3, g3);
    }
    return s;
}

ResidualBlock::ResidualBlock(const std::string& name, BlockKind kind_, std::int64_t in, std::int64_t width, int stride,
                             SeededRng& rng)
    : kind(kind_) {
    const auto n = [&](const char* leaf) { return nn::join_name(name, leaf); };
    if (kind == BlockKind::Basic) {
        conv1 = nn::Conv2d(n("conv1"), in, width, 3, stride, 1, rng);
        bn1 = nn::BatchNorm2d(n("bn1"), width);
        conv2 = nn::Conv2d(n("conv2"), width, width, 3, 1, 1, rng);
        bn2 = nn::BatchNorm2d(n("bn2"), width);
    } else {
        conv1 = nn::Conv2d(n("conv1"), in, width, 1, 1, 0, rng);
        bn1 = nn::BatchNorm2d(n("bn1"), width);
        conv2 = nn::Conv2d(n("conv2"), width, width, 3, stride, 1, rng);
        bn2 = nn::BatchNorm2d(n("bn2"), width);
        conv3 = nn::Conv2d(n("conv3"), width, width * 4, 1, 1, 0, rng);
        bn3 = nn::BatchNorm2d(n("bn3"), width * 4);
    }
    const std::int64_t out = out_channels();
    has_downsample = stride != 1 || in != out;
    if (has_downsample) {
        down_conv = nn::Conv2d(n("downsample.conv"), in, out, 1, stride, 0, rng);
        down_bn = nn::BatchNorm2d(n("downsample.bn"), out);
    }
}

std::int64_t ResidualBlock::out_channels() const {
    return kind == BlockKind::Basic ? conv2.out_channels() : conv3.out_channels();
}

void ResidualBlock::collect(nn::StateRefs& refs) {
    conv1.collect(refs);
    bn1.collect(refs);
    conv2.collect(refs);
    bn2.collect(refs);
    if (kind == BlockKind::Bottleneck) {
        conv3.collect(refs);
        bn3.collect(refs);
    }
    if (has_downsample) {
        down_conv.collect(refs);
        down_bn.collect(refs);
    }
}

Stage::Stage(const std::string& name, BlockKind kind, std::int64_t in, const StageConfig& cfg, SeededRng& rng) {
    if (cfg.blocks < 1) throw ConfigError("resnet: stage '" + name + "' needs at least one block");
    for (int i = 0; i < cfg.blocks; ++i) {
        blocks.emplace_back(nn::join_name(name, std::to_string(i)), kind, in, cfg.width, i == 0 ? cfg.stride : 1, rng);
        in = blocks.back().out_channels();
    }
}

void Stage::collect(nn::StateRefs& refs) {
    for (auto& b : blocks) b.collect(refs);
}

Stem::Stem(std::int64_t channels, SeededRng& rng)
    : conv("stem.conv", 3, channels, 3, 1, 1, rng), bn("stem.bn", channels) {}

void Stem::collect(nn::StateRefs& refs) {
    conv.collect(refs);
    bn.collect(refs);
}

Head::Head(std::int64_t in_channels, int classes, SeededRng& rng) : fc("head.fc", in_channels, classes, rng) {}

void Head::collect(nn::StateRefs& refs) { fc.collect(refs); }

ResNet::ResNet(const ResNetConfig& cfg, SeededRng& rng) : config(cfg), stem(cfg.stem_channels, rng) {
    std::int64_t in = cfg.stem_channels;
    for (std::size_t l = 0; l < 4; ++l) {
        stages[l] = Stage("stage" + std::to_string(l + 1), cfg.block, in, cfg.stages[l], rng);
        in = cfg.channels(static_cast<int>(l) + 1);
        if (cfg.zero_init_residual) {
            for (auto& b : stages[l].blocks) b.last_bn().gamma.value.fill(0.0f);
        }
    }
    head = Head(in, cfg.classes, rng);
}

nn::StateRefs ResNet::state() {
    nn::StateRefs refs;
    stem.collect(refs);
    for (auto& s : stages) s.collect(refs);
    head.collect(refs);
    return refs;
}

ParamCounts ResNet::count_params() {
    ParamCounts c;
    nn::StateRefs r;
    stem.collect(r);
    c.stem = r.parameter_count();
    for (std::size_t l = 0; l < 4; ++l) {
        nn::StateRefs s;
        stages[l].collect(s);
        c.stage[l] = s.parameter_count();
    }
    nn::StateRefs h;
    head.collect(h);
    c.head = h.parameter_count();
    return c;
}

ParamCounts count_params(const ResNetConfig& cfg) {
    ParamCounts c;
    c.stem = conv_params(3, cfg.stem_channels, 3) + 2 * cfg.stem_channels;
    std::int64_t in = cfg.stem_channels;
    for (std::size_t l = 0; l < 4; ++l) {
        const auto& s = cfg.stages[l];
        for (int i = 0; i < s.blocks; ++i) {
            c.stage[l] += block_params(cfg.block, in, s.width, i == 0 ? s.stride : 1);
            in = s.width * cfg.expansion();
        }
    }
    c.head = in * cfg.classes + cfg.classes;
    return c;
}

}  // namespace mfi::resnet
