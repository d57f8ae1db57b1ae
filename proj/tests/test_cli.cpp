#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mfi/checkpoint.hpp"
#include "mfi/cli.hpp"
#include "mfi/pipeline.hpp"

using namespace mfi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome call(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli_dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

// A run small enough to go through every subcommand in a few seconds.
std::vector<std::string> tiny(const fs::path& dir) {
    return {"--out",
            dir.string(),
            "--set",
            "backbone=resnet18",
            "--set",
            "width=0.0625",
            "--set",
            "dataset.kind=synthetic",
            "--set",
            "dataset.image_size=16",
            "--set",
            "dataset.train_size=40",
            "--set",
            "dataset.val_size=20",
            "--set",
            "dataset.test_size=20",
            "--set",
            "batch_size=20",
            "--set",
            "meanflow.hidden=8",
            "--set",
            "meanflow.embed_dim=8",
            "--set",
            "teacher.epochs=1",
            "--set",
            "meanflow.epochs=1",
            "--set",
            "meta.epochs=1",
            "--set",
            "incubate.epochs=1",
            "--set",
            "global.epochs=1"};
}

std::vector<std::string> with(std::string command, std::vector<std::string> rest, std::vector<std::string> extra = {}) {
    std::vector<std::string> a{std::move(command)};
    a.insert(a.end(), rest.begin(), rest.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
}

fs::path scratch(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("mfi_cli_" + name);
    fs::remove_all(d);
    return d;
}

}  // namespace

TEST(Cli, UsageAndUnknownCommands) {
    EXPECT_EQ(call({}).code, kExitConfig);
    const auto bad = call({"train-student"});
    EXPECT_EQ(bad.code, kExitConfig);
    EXPECT_NE(bad.err.find("unknown command"), std::string::npos);
    EXPECT_NE(bad.err.find("count-params"), std::string::npos);
    EXPECT_EQ(call({"--help"}).code, kExitOk);
    EXPECT_EQ(call({"count-params", "--bogus"}).code, kExitConfig);
    EXPECT_EQ(call({"count-params", "--seed", "abc"}).code, kExitConfig);
}

TEST(Cli, StageRules) {
    const auto d = scratch("stage");
    const auto four = call({"incubate", "--stage", "4", "--out", d.string()});
    EXPECT_EQ(four.code, kExitConfig);
    EXPECT_NE(four.err.find("stage 4"), std::string::npos);
    EXPECT_EQ(call({"incubate", "--out", d.string()}).code, kExitConfig);
    EXPECT_EQ(call({"incubate", "--stage", "0", "--out", d.string()}).code, kExitConfig);
    EXPECT_EQ(call({"count-params", "--stage", "1"}).code, kExitConfig);
}

TEST(Cli, MissingInputsAreConfigErrors) {
    const auto d = scratch("missing");
    EXPECT_EQ(call({"finetune-meta", "--out", d.string()}).code, kExitConfig);
    EXPECT_EQ(call({"eval", "--out", d.string()}).code, kExitConfig);
    EXPECT_EQ(call({"count-params", "--config", (d / "none.cfg").string()}).code, kExitConfig);
    EXPECT_EQ(call({"count-params", "--set", "nokey"}).code, kExitConfig);
}

TEST(Cli, CountParamsResNet50) {
    const auto r = call({"count-params", "--set", "backbone=resnet50"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto t = resnet::count_params(resnet::ResNetConfig::resnet50(10));
    EXPECT_NE(r.out.find("total " + std::to_string(t.total())), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("stage4 14964736 (14.96M)"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("reduction"), std::string::npos);
}

TEST(Cli, NonFiniteTrainingExitsTwo) {
    const auto d = scratch("nan");
    const auto r = call(with("train-teacher", tiny(d), {"--set", "teacher.lr=1e30", "--set", "teacher.epochs=2"}));
    EXPECT_EQ(r.code, kExitNumerical) << r.err;
}

TEST(Cli, EveryCommandEndToEnd) {
    const auto d = scratch("e2e");
    const auto base = tiny(d);
    for (const char* cmd : {"train-teacher", "compress", "assemble-meta", "finetune-meta"}) {
        const auto r = call(with(cmd, base));
        ASSERT_EQ(r.code, kExitOk) << cmd << "\n" << r.err;
    }
    for (const char* stage : {"2", "1", "3"}) {
        const auto r = call(with("incubate", base, {"--stage", stage}));
        ASSERT_EQ(r.code, kExitOk) << r.err;
    }
    const auto g = call(with("finetune-global", base));
    ASSERT_EQ(g.code, kExitOk) << g.err;

    const auto e1 = call(with("eval", base));
    ASSERT_EQ(e1.code, kExitOk) << e1.err;
    EXPECT_NE(e1.out.find("kind = hybrid"), std::string::npos);
    EXPECT_TRUE(fs::exists(d / "eval_report.txt"));
    const auto e2 = call(with("eval", base));
    EXPECT_EQ(e1.out, e2.out);

    const auto m = pipeline::Manifest::load(d / "manifest.txt");
    for (const char* phase : {"teacher", "meanflow.stage4", "meta.assembled", "meta", "incubate.stage3", "hybrid"}) {
        ASSERT_TRUE(m.find(phase).has_value()) << phase;
        EXPECT_EQ(m.entries.at(phase).digest, file_digest(*m.find(phase)));
    }
    const auto rows = read_metrics(d / "metrics.csv");
    EXPECT_GE(rows.size(), 8u);

    const auto teacher_eval = call(with("eval", base, {"--checkpoint", (d / "teacher.ckpt").string()}));
    EXPECT_NE(teacher_eval.out.find("kind = teacher"), std::string::npos);
    const auto stage_eval = call(with("eval", base, {"--checkpoint", (d / "incubated_stage1.ckpt").string()}));
    EXPECT_EQ(stage_eval.code, kExitConfig);
}
