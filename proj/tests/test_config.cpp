#include <gtest/gtest.h>

#include "mfi/config.hpp"

using namespace mfi;

TEST(Config, DefaultsFollowTrainingRecipe) {
    const RunConfig c = RunConfig::parse("");
    EXPECT_EQ(c.batch_size, 128);
    EXPECT_FLOAT_EQ(c.weight_decay, 0.01f);
    EXPECT_FLOAT_EQ(c.label_smoothing, 0.1f);
    EXPECT_FLOAT_EQ(c.meanflow.lr, 2e-4f);
    EXPECT_EQ(c.meanflow.epochs, 300);
    EXPECT_DOUBLE_EQ(c.time.mean, -0.4);
    EXPECT_DOUBLE_EQ(c.time.stddev, 1.0);
    EXPECT_DOUBLE_EQ(c.time.equal_fraction, 0.75);
    EXPECT_EQ(c.jvp_mode, meanflow::JvpMode::Full);
}

TEST(Config, ParsesCommentsAndWhitespace) {
    const RunConfig c = RunConfig::parse(
        "# run\n  backbone = resnet50   # trailing\n\nclasses=100\nmeanflow.jvp_mode = literal\naugment.mean = 0.5, 0.4,0.3\n");
    EXPECT_EQ(c.backbone, "resnet50");
    EXPECT_EQ(c.classes, 100);
    EXPECT_EQ(c.dataset.classes, 100);
    EXPECT_EQ(c.jvp_mode, meanflow::JvpMode::Literal);
    ASSERT_TRUE(c.norm.has_value());
    EXPECT_FLOAT_EQ(c.norm->mean[2], 0.3f);
}

TEST(Config, TextRoundTrip) {
    RunConfig c = RunConfig::parse("backbone = resnet18\nwidth = 0.375\nteacher.lr = 0.003\nmeanflow.hidden = 96\n"
                                   "dataset.kind = synthetic\naugment.std = 0.2,0.3,0.4\n");
    const RunConfig back = RunConfig::parse(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.hidden, 96);
    EXPECT_DOUBLE_EQ(back.width, 0.375);
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(RunConfig::parse("colour = red\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("backbone = resnet152\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("classes = ten\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("classes = 1\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("width = -1\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("just words\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("seed =\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("meanflow.embed_dim = 10\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("augment.mean = 1,2\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("label_smoothing = 1\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("time.equal_fraction = 1.5\n"), ConfigError);
}

TEST(Config, ErrorNamesTheLine) {
    try {
        RunConfig::parse("seed = 1\nbogus = 2\n");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(Config, SetOverridesSingleKey) {
    RunConfig c;
    c.set("incubate.epochs", "3");
    EXPECT_EQ(c.incubate.epochs, 3);
    c.set("meanflow.hidden", "auto");
    EXPECT_EQ(c.hidden, 0);
    EXPECT_THROW(c.set("incubate.epochs", "-1"), ConfigError);
}

TEST(Config, MissingFile) { EXPECT_THROW(RunConfig::from_file("/nonexistent/x.cfg"), ConfigError); }

TEST(Config, ShippedConfigsParse) {
    for (const char* name : {"desk.cfg", "r34.cfg", "r50.cfg"}) {
        EXPECT_NO_THROW(RunConfig::from_file(std::string(MFI_SOURCE_DIR) + "/configs/" + name)) << name;
    }
    const RunConfig desk = RunConfig::from_file(std::string(MFI_SOURCE_DIR) + "/configs/desk.cfg");
    EXPECT_EQ(desk.teacher.epochs, 30);
    EXPECT_EQ(desk.meanflow.epochs, 40);
    EXPECT_EQ(desk.meta.epochs, 15);
    EXPECT_EQ(desk.incubate.epochs, 20);
    EXPECT_EQ(desk.global.epochs, 15);
    EXPECT_DOUBLE_EQ(desk.width, 0.25);
    EXPECT_EQ(desk.dataset.train_size, 2000);
}
