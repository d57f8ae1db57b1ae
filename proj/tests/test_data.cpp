#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "mfi/data.hpp"

using namespace mfi;
using namespace mfi::data;
namespace fs = std::filesystem;

namespace {

// Record i: label (i * 7) % classes, pixel k = (i + k) % 256.
std::vector<std::uint8_t> fixture_bytes(DatasetKind kind, int records) {
    std::vector<std::uint8_t> out;
    for (int i = 0; i < records; ++i) {
        if (kind == DatasetKind::Cifar100) out.push_back(static_cast<std::uint8_t>(i % 20));
        out.push_back(static_cast<std::uint8_t>((i * 7) % (kind == DatasetKind::Cifar10 ? 10 : 100)));
        for (int k = 0; k < kCifarPixels; ++k) out.push_back(static_cast<std::uint8_t>((i + k) % 256));
    }
    return out;
}

void write_file(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

class CifarDir : public ::testing::Test {
  protected:
    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("mfi_cifar_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }
    fs::path dir;
};

}  // namespace

TEST(CifarRecords, RecordSizes) {
    EXPECT_EQ(cifar_record_size(DatasetKind::Cifar10), 3073);
    EXPECT_EQ(cifar_record_size(DatasetKind::Cifar100), 3074);
    EXPECT_THROW(cifar_record_size(DatasetKind::Synthetic), ConfigError);
}

TEST(CifarRecords, ParsesLabelsAndPlanarPixels) {
    const auto bytes = fixture_bytes(DatasetKind::Cifar10, 4);
    ASSERT_EQ(bytes.size(), 4u * 3073u);
    const Dataset ds = parse_cifar_records(bytes, DatasetKind::Cifar10);
    ASSERT_EQ(ds.size(), 4);
    EXPECT_EQ(ds.classes, 10);
    EXPECT_EQ(ds.labels, (std::vector<int>{0, 7, 4, 1}));
    // byte k of the pixel block is plane k / 1024, row (k % 1024) / 32, column k % 32
    const int k = 1024 + 5 * 32 + 9;
    EXPECT_FLOAT_EQ(ds.images.at({2, 1, 5, 9}), static_cast<float>((2 + k) % 256) / 255.0f);
    EXPECT_FLOAT_EQ(ds.images.at({0, 0, 0, 0}), 0.0f);
}

TEST(CifarRecords, Cifar100UsesFineLabel) {
    const Dataset ds = parse_cifar_records(fixture_bytes(DatasetKind::Cifar100, 30), DatasetKind::Cifar100);
    EXPECT_EQ(ds.size(), 30);
    EXPECT_EQ(ds.classes, 100);
    EXPECT_EQ(ds.labels[29], (29 * 7) % 100);
    EXPECT_EQ(ds.coarse_labels[25], 5);
}

TEST(CifarRecords, SerializeIsExactInverse) {
    for (auto kind : {DatasetKind::Cifar10, DatasetKind::Cifar100}) {
        const auto bytes = fixture_bytes(kind, 3);
        EXPECT_EQ(serialize_cifar_records(parse_cifar_records(bytes, kind), kind), bytes);
    }
}

TEST(CifarRecords, MalformedSizesRejected) {
    auto bytes = fixture_bytes(DatasetKind::Cifar10, 2);
    for (std::size_t cut : {1u, 100u, 3072u}) {
        EXPECT_THROW(parse_cifar_records(std::span(bytes.data(), bytes.size() - cut), DatasetKind::Cifar10),
                     TruncationError)
            << cut;
    }
    // a CIFAR-10 file read as CIFAR-100 is off by one byte per record
    EXPECT_THROW(parse_cifar_records(bytes, DatasetKind::Cifar100), TruncationError);
    EXPECT_THROW(parse_cifar_records({}, DatasetKind::Cifar10), TruncationError);
}

TEST(CifarRecords, OutOfRangeLabelsRejected) {
    auto bytes = fixture_bytes(DatasetKind::Cifar10, 2);
    bytes[3073] = 10;
    EXPECT_THROW(parse_cifar_records(bytes, DatasetKind::Cifar10), CorruptionError);
    auto b100 = fixture_bytes(DatasetKind::Cifar100, 1);
    b100[0] = 20;
    EXPECT_THROW(parse_cifar_records(b100, DatasetKind::Cifar100), CorruptionError);
    b100[0] = 0;
    b100[1] = 100;
    EXPECT_THROW(parse_cifar_records(b100, DatasetKind::Cifar100), CorruptionError);
}

TEST_F(CifarDir, LoadsStandardLayout) {
    for (int i = 1; i <= 5; ++i) write_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), fixture_bytes(DatasetKind::Cifar10, 6));
    write_file(dir / "test_batch.bin", fixture_bytes(DatasetKind::Cifar10, 4));
    EXPECT_EQ(fs::file_size(dir / "data_batch_3.bin"), 6u * 3073u);
    const Dataset train = load_cifar_binary(dir, DatasetKind::Cifar10, Split::Train);
    const Dataset test = load_cifar_binary(dir, DatasetKind::Cifar10, Split::Test);
    EXPECT_EQ(train.size(), 30);
    EXPECT_EQ(test.size(), 4);
    EXPECT_EQ(train.labels[6], 0);  // second file starts over
    EXPECT_EQ(train.labels[7], 7);

    DatasetSpec spec{DatasetKind::Cifar10, dir};
    spec.val_size = 5;
    spec.train_size = 20;
    const Splits s = load_splits(spec);
    EXPECT_EQ(s.train.size(), 20);
    EXPECT_EQ(s.val.size(), 5);
    EXPECT_EQ(s.test.size(), 4);
    spec.train_size = 26;
    EXPECT_THROW(load_splits(spec), ConfigError);
}

TEST_F(CifarDir, MissingOrTruncatedFile) {
    EXPECT_THROW(load_cifar_binary(dir, DatasetKind::Cifar10, Split::Test), ConfigError);
    auto bytes = fixture_bytes(DatasetKind::Cifar10, 2);
    bytes.pop_back();
    write_file(dir / "test_batch.bin", bytes);
    EXPECT_THROW(load_cifar_binary(dir, DatasetKind::Cifar10, Split::Test), TruncationError);
    write_file(dir / "test.bin", fixture_bytes(DatasetKind::Cifar100, 3));
    EXPECT_EQ(load_cifar_binary(dir, DatasetKind::Cifar100, Split::Test).size(), 3);
}

TEST(Synthetic, DeterministicAndBalanced) {
    SyntheticSpec spec;
    spec.seed = 5;
    spec.n = 200;
    const Dataset a = synthetic_dataset(spec), b = synthetic_dataset(spec);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_TRUE(a.images.same_values(b.images));
    std::vector<int> counts(10);
    for (int l : a.labels) ++counts[static_cast<std::size_t>(l)];
    for (int c : counts) EXPECT_EQ(c, 20);
    for (float v : a.images.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    spec.seed = 6;
    EXPECT_FALSE(synthetic_dataset(spec).images.same_values(a.images));
}

TEST(Synthetic, SplitsAreDisjointSizes) {
    DatasetSpec spec;
    spec.seed = 3;
    spec.train_size = 50;
    spec.val_size = 20;
    spec.test_size = 30;
    const Splits s = load_splits(spec);
    EXPECT_EQ(s.train.size(), 50);
    EXPECT_EQ(s.val.size(), 20);
    EXPECT_EQ(s.test.size(), 30);
}

TEST(Synthetic, TooFewSamplesRejected) {
    SyntheticSpec spec;
    spec.n = 5;
    EXPECT_THROW(synthetic_dataset(spec), ConfigError);
}

TEST(Augment, FlipIsInvolution) {
    SeededRng rng(1);
    const Tensor img = rng.uniform_tensor({3, 8, 8}, 0.0f, 1.0f);
    const Tensor f = flip_horizontal(img);
    EXPECT_EQ(f.at({1, 2, 0}), img.at({1, 2, 7}));
    EXPECT_TRUE(flip_horizontal(f).same_values(img));
}

TEST(Augment, CropKeepsShapeAndContent) {
    SeededRng rng(2);
    const Tensor img = rng.uniform_tensor({3, 8, 8}, 0.1f, 1.0f);
    AugmentConfig cfg;
    cfg.flip_prob = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Tensor out = augment_geometry(img, cfg, rng);
        ASSERT_EQ(out.shape(), img.shape());
        // every nonzero pixel comes from the source image
        std::set<float> src(img.data().begin(), img.data().end());
        for (float v : out.data()) ASSERT_TRUE(v == 0.0f || src.contains(v));
    }
    cfg.random_crop = false;
    EXPECT_TRUE(augment_geometry(img, cfg, rng).same_values(img));
}

TEST(Augment, NormalizationCentresChannels) {
    SyntheticSpec spec;
    spec.n = 100;
    const Dataset ds = synthetic_dataset(spec);
    const ChannelNorm norm = channel_stats(ds);
    const Tensor z = normalize(ds.images, norm);
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        std::int64_t n = 0;
        for (std::int64_t i = 0; i < ds.size(); ++i) {
            for (std::int64_t y = 0; y < 32; ++y) {
                for (std::int64_t x = 0; x < 32; ++x) {
                    const double v = z.at({i, c, y, x});
                    s += v;
                    s2 += v * v;
                    ++n;
                }
            }
        }
        EXPECT_NEAR(s / n, 0.0, 1e-4);
        EXPECT_NEAR(s2 / n, 1.0, 1e-3);
    }
}

TEST(Batching, EpochOrderIsAPermutation) {
    SeededRng rng(3);
    const auto batches = epoch_order(103, 10, rng);
    ASSERT_EQ(batches.size(), 11u);
    EXPECT_EQ(batches.back().size(), 3u);
    std::set<std::int64_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    EXPECT_EQ(seen.size(), 103u);
}

TEST(Batching, SameSeedSameBatch) {
    SyntheticSpec spec;
    spec.n = 20;
    const Dataset ds = synthetic_dataset(spec);
    const std::vector<std::int64_t> idx{3, 1, 4};
    SeededRng a(9), b(9);
    const Batch x = make_batch(ds, idx, {}, &a), y = make_batch(ds, idx, {}, &b);
    EXPECT_TRUE(x.images.same_values(y.images));
    EXPECT_EQ(x.labels, (std::vector<int>{ds.labels[3], ds.labels[1], ds.labels[4]}));
    const auto eval = eval_batches(ds, 8, {});
    ASSERT_EQ(eval.size(), 3u);
    EXPECT_EQ(eval[2].images.dim(0), 4);
}

TEST(DatasetKindText, Parse) {
    EXPECT_EQ(parse_dataset_kind("cifar100"), DatasetKind::Cifar100);
    EXPECT_EQ(parse_dataset_kind(to_string(DatasetKind::Synthetic)), DatasetKind::Synthetic);
    EXPECT_THROW(parse_dataset_kind("imagenet"), ConfigError);
}
