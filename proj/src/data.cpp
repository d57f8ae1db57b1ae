#include "mfi/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mfi::data {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::int64_t> permutation(std::int64_t n, SeededRng& rng) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    // Fisher-Yates with our own generator so the order is platform-stable.
    for (std::int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
}

Dataset concat(std::vector<Dataset> parts) {
    Dataset out;
    std::int64_t n = 0;
    for (const auto& p : parts) n += p.size();
    if (parts.empty() || n == 0) return out;
    const Shape& s = parts.front().images.shape();
    out.images = Tensor({n, s[1], s[2], s[3]});
    out.classes = parts.front().classes;
    float* dst = out.images.ptr();
    for (auto& p : parts) {
        dst = std::copy_n(p.images.ptr(), p.images.numel(), dst);
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
        out.coarse_labels.insert(out.coarse_labels.end(), p.coarse_labels.begin(), p.coarse_labels.end());
    }
    return out;
}

std::vector<std::int64_t> range(std::int64_t begin, std::int64_t end, const std::vector<std::int64_t>& order) {
    return {order.begin() + begin, order.begin() + end};
}

}  // namespace

DatasetKind parse_dataset_kind(std::string_view text) {
    if (text == "cifar10") return DatasetKind::Cifar10;
    if (text == "cifar100") return DatasetKind::Cifar100;
    if (text == "synthetic") return DatasetKind::Synthetic;
    throw ConfigError("unknown dataset kind '" + std::string(text) + "' (expected cifar10, cifar100 or synthetic)");
}

std::string_view to_string(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::Cifar10: return "cifar10";
        case DatasetKind::Cifar100: return "cifar100";
        case DatasetKind::Synthetic: break;
    }
    return "synthetic";
}

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
    Dataset out;
    out.classes = classes;
    const Shape& s = images.shape();
    const std::int64_t per = s[1] * s[2] * s[3];
    out.images = Tensor({static_cast<std::int64_t>(indices.size()), s[1], s[2], s[3]});
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::int64_t i = indices[k];
        if (i < 0 || i >= size()) throw ShapeError("dataset subset: index " + std::to_string(i) + " out of range");
        std::copy_n(images.ptr() + i * per, per, out.images.ptr() + static_cast<std::int64_t>(k) * per);
        out.labels.push_back(labels[static_cast<std::size_t>(i)]);
        if (!coarse_labels.empty()) out.coarse_labels.push_back(coarse_labels[static_cast<std::size_t>(i)]);
    }
    return out;
}

Tensor Dataset::image(std::int64_t i) const {
    const Shape& s = images.shape();
    const std::int64_t per = s[1] * s[2] * s[3];
    Tensor out({s[1], s[2], s[3]});
    std::copy_n(images.ptr() + i * per, per, out.ptr());
    return out;
}

std::int64_t cifar_record_size(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::Cifar10: return 1 + kCifarPixels;
        case DatasetKind::Cifar100: return 2 + kCifarPixels;
        case DatasetKind::Synthetic: break;
    }
    throw ConfigError("synthetic data has no binary record format");
}

Dataset parse_cifar_records(std::span<const std::uint8_t> bytes, DatasetKind kind) {
    const auto rec = static_cast<std::size_t>(cifar_record_size(kind));
    if (bytes.empty()) throw TruncationError("CIFAR data is empty");
    if (bytes.size() % rec != 0) {
        throw TruncationError("CIFAR data of " + std::to_string(bytes.size()) + " bytes is not a multiple of the " +
                              std::to_string(rec) + "-byte record size");
    }
    const auto n = static_cast<std::int64_t>(bytes.size() / rec);
    Dataset ds;
    ds.classes = kind == DatasetKind::Cifar10 ? 10 : 100;
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.reserve(static_cast<std::size_t>(n));
    float* px = ds.images.ptr();
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint8_t* r = bytes.data() + static_cast<std::size_t>(i) * rec;
        int label = r[0];
        if (kind == DatasetKind::Cifar100) {
            if (r[0] >= 20) {
                throw CorruptionError("CIFAR-100 record " + std::to_string(i) + " has coarse label " +
                                      std::to_string(r[0]));
            }
            ds.coarse_labels.push_back(r[0]);
            label = r[1];
        }
        if (label >= ds.classes) {
            throw CorruptionError("CIFAR record " + std::to_string(i) + " has label " + std::to_string(label) +
                                  " outside [0, " + std::to_string(ds.classes) + ")");
        }
        ds.labels.push_back(label);
        const std::uint8_t* p = r + (rec - kCifarPixels);
        for (std::int64_t k = 0; k < kCifarPixels; ++k) *px++ = static_cast<float>(p[k]) / 255.0f;
    }
    return ds;
}

std::vector<std::uint8_t> serialize_cifar_records(const Dataset& ds, DatasetKind kind) {
    const auto rec = static_cast<std::size_t>(cifar_record_size(kind));
    if (ds.images.numel() != ds.size() * kCifarPixels) throw ShapeError("serialize_cifar_records: images must be 3x32x32");
    std::vector<std::uint8_t> out;
    out.reserve(rec * static_cast<std::size_t>(ds.size()));
    const float* px = ds.images.ptr();
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        if (kind == DatasetKind::Cifar100) {
            out.push_back(static_cast<std::uint8_t>(ds.coarse_labels.empty() ? 0 : ds.coarse_labels[static_cast<std::size_t>(i)]));
        }
        out.push_back(static_cast<std::uint8_t>(ds.labels[static_cast<std::size_t>(i)]));
        for (std::int64_t k = 0; k < kCifarPixels; ++k) {
            const float v = std::clamp(*px++, 0.0f, 1.0f);
            out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
        }
    }
    return out;
}

Dataset load_cifar_binary(const std::filesystem::path& root, DatasetKind kind, Split split) {
    std::vector<std::filesystem::path> files;
    if (kind == DatasetKind::Cifar10) {
        if (split == Split::Train) {
            for (int i = 1; i <= 5; ++i) files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
        } else {
            files.push_back(root / "test_batch.bin");
        }
    } else if (kind == DatasetKind::Cifar100) {
        files.push_back(root / (split == Split::Train ? "train.bin" : "test.bin"));
    } else {
        throw ConfigError("load_cifar_binary: synthetic data has no files");
    }
    std::vector<Dataset> parts;
    for (const auto& f : files) {
        if (!std::filesystem::exists(f)) throw ConfigError("CIFAR file not found: '" + f.string() + "'");
        parts.push_back(parse_cifar_records(read_file(f), kind));
    }
    return concat(std::move(parts));
}

Dataset synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.classes < 2) throw ConfigError("synthetic dataset: need at least 2 classes");
    if (spec.n < spec.classes) {
        throw ConfigError("synthetic dataset: n = " + std::to_string(spec.n) + " is smaller than the class count " +
                          std::to_string(spec.classes));
    }
    const std::int64_t S = spec.image_size;
    SeededRng template_rng = SeededRng(spec.seed).fork(1);
    SeededRng sample_rng = SeededRng(spec.seed).fork(2);

    // Each class template is a sum of coloured Gaussian blobs; its peak
    // magnitude is `separation` noise standard deviations.
    constexpr int kBlobs = 3;
    std::vector<Tensor> templates;
    for (int c = 0; c < spec.classes; ++c) {
        Tensor t({3, S, S});
        for (int b = 0; b < kBlobs; ++b) {
            const double cx = template_rng.uniform(0.2, 0.8) * static_cast<double>(S);
            const double cy = template_rng.uniform(0.2, 0.8) * static_cast<double>(S);
            const double sigma = template_rng.uniform(0.08, 0.2) * static_cast<double>(S);
            std::array<double, 3> colour{};
            for (auto& v : colour) v = template_rng.uniform(-1.0, 1.0);
            for (std::int64_t y = 0; y < S; ++y) {
                for (std::int64_t x = 0; x < S; ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    const double g = std::exp(-d2 / (2.0 * sigma * sigma));
                    for (int ch = 0; ch < 3; ++ch) t.at({ch, y, x}) += static_cast<float>(colour[static_cast<std::size_t>(ch)] * g);
                }
            }
        }
        float peak = 0.0f;
        for (float v : t.data()) peak = std::max(peak, std::abs(v));
        const float gain = static_cast<float>(spec.separation * spec.noise) / std::max(peak, 1e-6f);
        for (auto& v : t.data()) v *= gain;
        templates.push_back(std::move(t));
    }

    std::vector<int> labels(static_cast<std::size_t>(spec.n));
    for (std::int64_t i = 0; i < spec.n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % spec.classes);
    const auto order = permutation(spec.n, sample_rng);

    Dataset ds;
    ds.classes = spec.classes;
    ds.images = Tensor({spec.n, 3, S, S});
    for (std::int64_t i = 0; i < spec.n; ++i) {
        const int label = labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        ds.labels.push_back(label);
        const Tensor& t = templates[static_cast<std::size_t>(label)];
        const auto dx = static_cast<std::int64_t>(sample_rng.below(2 * spec.max_shift + 1)) - spec.max_shift;
        const auto dy = static_cast<std::int64_t>(sample_rng.below(2 * spec.max_shift + 1)) - spec.max_shift;
        float* out = ds.images.ptr() + i * 3 * S * S;
        for (int ch = 0; ch < 3; ++ch) {
            for (std::int64_t y = 0; y < S; ++y) {
                for (std::int64_t x = 0; x < S; ++x) {
                    const std::int64_t sy = y - dy, sx = x - dx;
                    const float base = (sy >= 0 && sy < S && sx >= 0 && sx < S) ? t.at({ch, sy, sx}) : 0.0f;
                    const float v = 0.5f + base + static_cast<float>(sample_rng.normal(0.0, spec.noise));
                    *out++ = std::clamp(v, 0.0f, 1.0f);
                }
            }
        }
    }
    return ds;
}

Splits load_splits(const DatasetSpec& spec) {
    Splits s;
    SeededRng rng = SeededRng(spec.seed).fork(3);
    if (spec.kind == DatasetKind::Synthetic) {
        const std::int64_t train = spec.train_size > 0 ? spec.train_size : 2000;
        const std::int64_t val = spec.val_size > 0 ? spec.val_size : 500;
        const std::int64_t test = spec.test_size > 0 ? spec.test_size : 1000;
        SyntheticSpec syn;
        syn.seed = spec.seed;
        syn.n = train + val + test;
        syn.classes = spec.classes;
        syn.image_size = spec.image_size;
        syn.separation = spec.separation;
        syn.noise = spec.noise;
        const Dataset all = synthetic_dataset(syn);
        std::vector<std::int64_t> order(static_cast<std::size_t>(syn.n));
        std::iota(order.begin(), order.end(), 0);
        s.train = all.subset(range(0, train, order));
        s.val = all.subset(range(train, train + val, order));
        s.test = all.subset(range(train + val, syn.n, order));
        return s;
    }
    const Dataset train_all = load_cifar_binary(spec.root, spec.kind, Split::Train);
    const Dataset test_all = load_cifar_binary(spec.root, spec.kind, Split::Test);
    const std::int64_t val = spec.val_size;
    const std::int64_t train = spec.train_size > 0 ? spec.train_size : train_all.size() - val;
    if (train + val > train_all.size() || train <= 0) {
        throw ConfigError("dataset: train_size + val_size = " + std::to_string(train + val) + " exceeds the " +
                          std::to_string(train_all.size()) + " available training records");
    }
    const std::int64_t test = spec.test_size > 0 ? spec.test_size : test_all.size();
    if (test > test_all.size()) throw ConfigError("dataset: test_size exceeds the available test records");
    const auto order = permutation(train_all.size(), rng);
    s.train = train_all.subset(range(0, train, order));
    s.val = train_all.subset(range(train, train + val, order));
    const auto test_order = permutation(test_all.size(), rng);
    s.test = test_all.subset(range(0, test, test_order));
    return s;
}

ChannelNorm channel_stats(const Dataset& ds) {
    ChannelNorm n;
    if (ds.size() == 0) return n;
    const std::int64_t hw = ds.images.dim(2) * ds.images.dim(3);
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        for (std::int64_t i = 0; i < ds.size(); ++i) {
            const float* p = ds.images.ptr() + (i * 3 + c) * hw;
            for (std::int64_t k = 0; k < hw; ++k) {
                s += p[k];
                s2 += static_cast<double>(p[k]) * p[k];
            }
        }
        const double count = static_cast<double>(ds.size() * hw);
        const double mean = s / count;
        n.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
        n.std[static_cast<std::size_t>(c)] = static_cast<float>(std::sqrt(std::max(s2 / count - mean * mean, 1e-12)));
    }
    return n;
}

Tensor flip_horizontal(const Tensor& image) {
    Tensor out(image.shape());
    const std::int64_t w = image.dim(-1);
    const std::int64_t rows = image.numel() / w;
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* src = image.ptr() + r * w;
        std::reverse_copy(src, src + w, out.ptr() + r * w);
    }
    return out;
}

Tensor augment_geometry(const Tensor& image, const AugmentConfig& cfg, SeededRng& rng) {
    if (cfg.flip_prob < 0.0 || cfg.flip_prob > 1.0) throw ConfigError("augment: flip probability must be in [0, 1]");
    Tensor out = image;
    if (cfg.random_crop && cfg.padding > 0) {
        const std::int64_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
        const std::int64_t pad = cfg.padding;
        const auto oy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
        const auto ox = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
        out = Tensor(image.shape());
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t y = 0; y < H; ++y) {
                const std::int64_t sy = y + oy;
                if (sy < 0 || sy >= H) continue;
                for (std::int64_t x = 0; x < W; ++x) {
                    const std::int64_t sx = x + ox;
                    if (sx >= 0 && sx < W) out[(c * H + y) * W + x] = image[(c * H + sy) * W + sx];
                }
            }
        }
    }
    if (rng.bernoulli(cfg.flip_prob)) out = flip_horizontal(out);
    return out;
}

Tensor normalize(const Tensor& images, const ChannelNorm& norm) {
    Tensor out = images;
    const std::int64_t hw = images.dim(-1) * images.dim(-2);
    const std::int64_t planes = images.numel() / hw;
    for (std::int64_t p = 0; p < planes; ++p) {
        const auto c = static_cast<std::size_t>(p % 3);
        const float m = norm.mean[c], inv = 1.0f / norm.std[c];
        float* d = out.ptr() + p * hw;
        for (std::int64_t k = 0; k < hw; ++k) d[k] = (d[k] - m) * inv;
    }
    return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, SeededRng& rng) {
    return normalize(augment_geometry(image, cfg, rng), cfg.norm);
}

std::vector<std::vector<std::int64_t>> epoch_order(std::int64_t n, std::int64_t batch_size, SeededRng& rng) {
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    const auto p = permutation(n, rng);
    std::vector<std::vector<std::int64_t>> batches;
    for (std::int64_t b = 0; b < n; b += batch_size) batches.push_back(range(b, std::min(n, b + batch_size), p));
    return batches;
}

Batch make_batch(const Dataset& ds, std::span<const std::int64_t> indices, const AugmentConfig& cfg,
                 SeededRng* rng) {
    Batch b;
    const Shape& s = ds.images.shape();
    const std::int64_t per = s[1] * s[2] * s[3];
    b.images = Tensor({static_cast<std::int64_t>(indices.size()), s[1], s[2], s[3]});
    for (std::size_t k = 0; k < indices.size(); ++k) {
        Tensor img = ds.image(indices[k]);
        if (rng) img = augment_geometry(img, cfg, *rng);
        std::copy_n(img.ptr(), per, b.images.ptr() + static_cast<std::int64_t>(k) * per);
        b.labels.push_back(ds.labels[static_cast<std::size_t>(indices[k])]);
    }
    b.images = normalize(b.images, cfg.norm);
    return b;
}

std::vector<Batch> eval_batches(const Dataset& ds, std::int64_t batch_size, const ChannelNorm& norm) {
    if (ds.size() == 0) throw ConfigError("evaluation split is empty");
    AugmentConfig cfg;
    cfg.norm = norm;
    std::vector<Batch> out;
    for (std::int64_t b = 0; b < ds.size(); b += batch_size) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = b; i < std::min(ds.size(), b + batch_size); ++i) idx.push_back(i);
        out.push_back(make_batch(ds, idx, cfg, nullptr));
    }
    return out;
}

}  // namespace mfi::data
