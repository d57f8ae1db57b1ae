#include <gtest/gtest.h>

#include <filesystem>
#include <memory>

#include "mfi/pipeline.hpp"

using namespace mfi;
using namespace mfi::pipeline;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
    RunConfig c;
    c.backbone = "resnet18";
    c.width = 0.0625;
    c.seed = 3;
    c.dataset.kind = data::DatasetKind::Synthetic;
    c.dataset.seed = 4;
    c.dataset.image_size = 16;
    c.dataset.train_size = 40;
    c.dataset.val_size = 20;
    c.dataset.test_size = 20;
    c.batch_size = 20;
    return c;
}

TrainHyper hyper(int epochs, std::uint64_t seed = 3) { return {epochs, 1e-3f, 0.01f, 20, 0.1f, seed}; }

// Teacher, meta model and context shared by the tests below; built once.
struct Fixture {
    Context ctx;
    resnet::ResNet teacher;
    StagedModel meta;

    Fixture() : ctx(make_context(tiny_config())) {
        teacher = train_teacher(resnet::ResNetConfig::resnet18(10, 0.0625), ctx, hyper(2)).best;
        MeanFlowHyper hp;
        hp.train = hyper(1);
        hp.hidden = 8;
        hp.embed_dim = 8;
        std::array<meanflow::MeanFlowModule, 4> modules;
        for (int l = 1; l <= 4; ++l) modules[l - 1] = train_stage_meanflow(teacher, l, ctx, hp).module;
        meta = assemble_meta(teacher, std::move(modules), 16);
    }
};

Fixture& shared() {
    static Fixture f;
    return f;
}

}  // namespace

TEST(Budget, MetaAndHybridForResNet50) {
    const auto cfg = resnet::ResNetConfig::resnet50(10);
    const std::int64_t h = calibrate_hidden(cfg, 64, meta_budget(cfg));
    const auto meta = meta_param_counts(cfg, h, 64);
    const auto hybrid = hybrid_param_counts(cfg, h, 64);
    const double teacher = static_cast<double>(resnet::count_params(cfg).total());
    EXPECT_GE(meta.total(), 4'900'000);
    EXPECT_LE(meta.total(), 5'400'000);
    EXPECT_GE(hybrid.total(), 12'000'000);
    EXPECT_LE(hybrid.total(), 13'200'000);
    EXPECT_GE(1.0 - hybrid.total() / teacher, 0.43);
}

TEST(Budget, CalibrationIsClosestWidth) {
    const auto cfg = resnet::ResNetConfig::resnet34(10, 0.25);
    const double target = meta_budget(cfg);
    const std::int64_t h = calibrate_hidden(cfg, 64, target);
    const auto dist = [&](std::int64_t k) { return std::abs(meta_param_counts(cfg, k, 64).total() - target); };
    EXPECT_LE(dist(h), dist(h - 1));
    EXPECT_LE(dist(h), dist(h + 1));
    EXPECT_NEAR(meta_budget(cfg), 5.08e6 / 16.0, 1.0);
}

TEST(Budget, ClosedFormMatchesAssembledModel) {
    auto& f = shared();
    const auto built = count_params(f.meta);
    const auto closed = meta_param_counts(f.teacher.config, 8, 8, 16);
    EXPECT_EQ(built.stem, closed.stem);
    EXPECT_EQ(built.stage, closed.stage);
    EXPECT_EQ(built.head, closed.head);
}

TEST(Masks, PrefixesSelectTheRightTensors) {
    const auto m = meta_finetune_mask();
    EXPECT_TRUE(m.is_trainable("mf3.u1.fc2.weight"));
    EXPECT_TRUE(m.is_trainable("mf4.u2.time_mix.bias"));
    EXPECT_TRUE(m.is_trainable("head.fc.weight"));
    EXPECT_FALSE(m.is_trainable("mf2.align.conv.weight"));
    EXPECT_FALSE(m.is_trainable("stem.conv.weight"));
    const auto inc = incubation_mask(2);
    EXPECT_TRUE(inc.is_trainable("stage2.1.bn1.gamma"));
    EXPECT_FALSE(inc.is_trainable("stage1.0.conv1.weight"));
    EXPECT_FALSE(inc.is_trainable("mf4.u1.fc1.weight"));
}

TEST(Assembly, MetaLayoutAndStageChecks) {
    auto& f = shared();
    EXPECT_EQ(f.meta.kind(), "meta");
    for (int l = 1; l <= 4; ++l) EXPECT_TRUE(f.meta.is_meanflow(l));
    EXPECT_TRUE(f.meta.module(4).two_step());
    std::array<meanflow::MeanFlowModule, 4> swapped{f.meta.module(2), f.meta.module(1), f.meta.module(3),
                                                    f.meta.module(4)};
    EXPECT_THROW(assemble_meta(f.teacher, swapped, 16), ShapeError);
}

TEST(Assembly, HybridKeepsStageFourModule) {
    auto& f = shared();
    auto hybrid = assemble_hybrid(f.meta, {f.teacher.stages[0], f.teacher.stages[1], f.teacher.stages[2]});
    EXPECT_EQ(hybrid.kind(), "hybrid");
    EXPECT_TRUE(hybrid.is_meanflow(4));
    EXPECT_FALSE(hybrid.is_meanflow(1));
    EXPECT_THROW(assemble_hybrid(f.meta, {f.teacher.stages[1], f.teacher.stages[1], f.teacher.stages[2]}),
                 ShapeError);
    EXPECT_THROW(finetune_meta(hybrid, f.ctx, hyper(1)), ShapeError);
}

TEST(Freeze, MetaFinetuneLeavesStemAndAlignmentUntouched) {
    auto& f = shared();
    StagedModel before = f.meta;
    auto r = finetune_meta(f.meta, f.ctx, hyper(1));
    EXPECT_EQ(r.frozen_hash_before, r.frozen_hash_after);
    const std::string frozen[] = {"stem.", "mf1.align.", "mf4.align."};
    EXPECT_EQ(state_hash(before.state(), frozen), state_hash(r.run.last.state(), frozen));
    const std::string trained[] = {"mf1.u1."};
    EXPECT_NE(state_hash(before.state(), trained), state_hash(r.run.last.state(), trained));
}

TEST(Freeze, IncubationTrainsOnlyItsStage) {
    auto& f = shared();
    const auto r = incubate_stage(f.meta, f.teacher, 2, f.ctx, hyper(1));
    EXPECT_EQ(r.frozen_hash_before, r.frozen_hash_after);
    nn::StateRefs mine, theirs;
    auto copy = r.stage;
    copy.collect(mine);
    f.teacher.stages[1].collect(theirs);
    EXPECT_NE(state_hash(mine), state_hash(theirs));
    EXPECT_THROW(incubate_stage(f.meta, f.teacher, 4, f.ctx, hyper(1)), ConfigError);
    EXPECT_THROW(incubate_stage(f.meta, f.teacher, 0, f.ctx, hyper(1)), ConfigError);
}

TEST(Freeze, IncubationOrderDoesNotMatter) {
    auto& f = shared();
    const StagedModel meta_copy = f.meta;
    std::array<std::uint64_t, 3> forward{}, backward{};
    for (int l : {1, 2, 3}) {
        auto s = incubate_stage(f.meta, f.teacher, l, f.ctx, hyper(1)).stage;
        nn::StateRefs r;
        s.collect(r);
        forward[l - 1] = state_hash(r);
    }
    for (int l : {3, 1, 2}) {
        auto s = incubate_stage(f.meta, f.teacher, l, f.ctx, hyper(1)).stage;
        nn::StateRefs r;
        s.collect(r);
        backward[l - 1] = state_hash(r);
    }
    EXPECT_EQ(forward, backward);
    StagedModel a = meta_copy, b = f.meta;
    EXPECT_EQ(state_hash(a.state()), state_hash(b.state()));
}

TEST(Freeze, GlobalFinetuneTrainsEverything) {
    auto& f = shared();
    auto hybrid = assemble_hybrid(f.meta, {f.teacher.stages[0], f.teacher.stages[1], f.teacher.stages[2]});
    auto r = finetune_global(hybrid, f.ctx, hyper(1));
    EXPECT_EQ(r.frozen_hash_before, r.frozen_hash_after);
    const std::string stem[] = {"stem."};
    EXPECT_NE(state_hash(hybrid.state(), stem), state_hash(r.run.last.state(), stem));
}

TEST(Persistence, StagedRoundTripsAndEvaluatesIdentically) {
    auto& f = shared();
    StagedModel meta = f.meta;
    const Checkpoint c = staged_checkpoint(meta);
    StagedModel back = staged_from_checkpoint(Checkpoint::parse(c.serialize()));
    EXPECT_EQ(staged_checkpoint(back).serialize(), c.serialize());
    const auto a = evaluate(meta, f.ctx.splits.test, f.ctx);
    const auto b = evaluate(back, f.ctx.splits.test, f.ctx);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.loss, b.loss);
}

TEST(Persistence, ModuleAndStageRoundTrip) {
    auto& f = shared();
    auto mod = f.meta.module(4);
    const Checkpoint c = module_checkpoint(mod, f.teacher.config, 16);
    auto back = module_from_checkpoint(c);
    EXPECT_EQ(back.stage, 4);
    EXPECT_EQ(module_checkpoint(back, f.teacher.config, 16).serialize(), c.serialize());
    auto st = f.teacher.stages[2];
    const Checkpoint sc = stage_checkpoint(st, 3, f.teacher.config);
    EXPECT_NO_THROW(stage_from_checkpoint(sc, 3));
    EXPECT_THROW(stage_from_checkpoint(sc, 2), FormatError);
}

TEST(Persistence, ManifestRecordsDigests) {
    const auto dir = fs::temp_directory_path() / "mfi_manifest";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto& f = shared();
    auto t = f.teacher;
    teacher_checkpoint(t).save(dir / "t.ckpt");
    Manifest m;
    m.record("teacher", dir / "t.ckpt");
    m.save(dir / "manifest.txt");
    const auto back = Manifest::load(dir / "manifest.txt");
    ASSERT_TRUE(back.find("teacher"));
    EXPECT_EQ(back.entries.at("teacher").digest, file_digest(dir / "t.ckpt"));
    EXPECT_FALSE(back.find("meta"));
    EXPECT_TRUE(Manifest::load(dir / "absent.txt").entries.empty());
    fs::remove_all(dir);
}

TEST(Training, TeacherIsReproducible) {
    auto& f = shared();
    auto a = train_teacher(resnet::ResNetConfig::resnet18(10, 0.0625), f.ctx, hyper(1)).last;
    auto b = train_teacher(resnet::ResNetConfig::resnet18(10, 0.0625), f.ctx, hyper(1)).last;
    EXPECT_EQ(state_hash(a.state()), state_hash(b.state()));
}

TEST(Training, FlowMatchingReducesMappingError) {
    auto& f = shared();
    MeanFlowHyper hp;
    hp.train = hyper(8);
    hp.train.lr = 3e-3f;
    hp.hidden = 16;
    hp.embed_dim = 8;
    const auto run = train_stage_meanflow(f.teacher, 1, f.ctx, hp);
    EXPECT_LT(run.mse_after, run.mse_before);
    EXPECT_LT(run.mse_aligned, run.mse_before);
    EXPECT_LT(run.epoch_loss.back(), run.epoch_loss.front());
}
