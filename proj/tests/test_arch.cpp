#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "mer/arch.hpp"
#include "mer/checkpoint.hpp"
#include "oracles/param_count.hpp"
#include "test_util.hpp"

using namespace mer;

namespace {

std::uint64_t oracle_count(Arch a, double w, std::size_t hw) {
    switch (a) {
        case Arch::vgg16: return oracle::vgg16_params(w, hw);
        case Arch::resnet18: return oracle::resnet18_params(w);
        case Arch::squeezenet_v10: return oracle::squeezenet_v10_params(w);
        case Arch::mobilenet_v2: return oracle::mobilenet_v2_params(w);
    }
    return 0;
}

Tensor<float> random_images(std::size_t n, std::size_t hw, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> d;
    std::vector<float> v(n * 3 * hw * hw);
    for (float& x : v) x = d(rng);
    return Tensor<float>({n, 3, hw, hw}, std::move(v));
}

const ArchSpec kTiny(Arch a) { return {a, 0.125, 64}; }

}  // namespace

class FullWidth : public ::testing::TestWithParam<Arch> {};

// Values frozen from the layer-table oracle.
TEST_P(FullWidth, ParameterCountMatchesOracle) {
    const Arch a = GetParam();
    auto m = build_model<float>({a, 1.0, 224});
    const std::uint64_t expected = oracle_count(a, 1.0, 224);
    EXPECT_EQ(m.parameter_count(), expected);
    switch (a) {
        case Arch::vgg16: EXPECT_EQ(expected, 138357544u); break;
        case Arch::resnet18: EXPECT_EQ(expected, 11689512u); break;
        case Arch::squeezenet_v10: EXPECT_EQ(expected, 1248424u); break;
        case Arch::mobilenet_v2: EXPECT_EQ(expected, 3504872u); break;
    }
    m.append_emotion_head();
    EXPECT_EQ(m.parameter_count(), expected + 2002);
}

INSTANTIATE_TEST_SUITE_P(AllArchs, FullWidth, ::testing::ValuesIn(kAllArchs),
                         [](const auto& info) { return std::string(arch_name(info.param)); });

class Tiny : public ::testing::TestWithParam<Arch> {};

TEST_P(Tiny, ParameterCountMatchesOracle) {
    const Arch a = GetParam();
    auto m = build_model<float>(kTiny(a));
    EXPECT_EQ(m.parameter_count(), oracle_count(a, 0.125, 64));
}

TEST_P(Tiny, ForwardShapes) {
    auto m = build_emotion_model<float>(kTiny(GetParam()), 3);
    m.set_mode(Mode::eval);
    NoGradGuard guard;
    const auto x = random_images(2, 64, 1);
    EXPECT_EQ(m.features(x).shape(), (Shape{2, 125}));
    const auto y = m.forward(x);
    EXPECT_EQ(y.shape(), (Shape{2, 2}));
    for (float v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST_P(Tiny, SameSeedSameWeights) {
    auto a = build_emotion_model<float>(kTiny(GetParam()), 42);
    auto b = build_emotion_model<float>(kTiny(GetParam()), 42);
    auto c = build_emotion_model<float>(kTiny(GetParam()), 43);
    EXPECT_EQ(a.snapshot(), b.snapshot());
    EXPECT_NE(a.snapshot(), c.snapshot());
}

TEST_P(Tiny, CheckpointRoundTrip) {
    testutil::TempDir tmp;
    auto m = build_emotion_model<float>(kTiny(GetParam()), 5);
    // Move the running statistics away from their defaults.
    {
        m.set_mode(Mode::train);
        NoGradGuard guard;
        m.forward(random_images(3, 64, 2));
    }
    InputPipeline pipe;
    pipe.dsp.n_mels = 64;
    pipe.sub_clip_s = 4.0;
    save_checkpoint(m, tmp / "m.bin", pipe);
    auto loaded = load_checkpoint<float>(tmp / "m.bin");
    EXPECT_EQ(loaded.model.snapshot(), m.snapshot());
    EXPECT_EQ(loaded.model.mode(), Mode::eval);
    EXPECT_EQ(loaded.pipeline.dsp.n_mels, 64u);
    EXPECT_DOUBLE_EQ(loaded.pipeline.sub_clip_s, 4.0);

    m.set_mode(Mode::eval);
    NoGradGuard guard;
    const auto x = random_images(2, 64, 3);
    EXPECT_EQ(m.forward(x).values(), loaded.model.forward(x).values());
}

INSTANTIATE_TEST_SUITE_P(AllArchs, Tiny, ::testing::ValuesIn(kAllArchs),
                         [](const auto& info) { return std::string(arch_name(info.param)); });

TEST(Checkpoint, TruncatedOrCorruptFilesFailLoudly) {
    auto m = build_emotion_model<float>(kTiny(Arch::squeezenet_v10), 1);
    auto bytes = encode_checkpoint(m);
    auto cut = bytes;
    cut.resize(cut.size() - 4);
    try {
        decode_checkpoint<float>(cut);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("blob length mismatch"), std::string::npos);
    }
    const std::vector<std::uint8_t> no_header(16, 'x');
    EXPECT_THROW(decode_checkpoint<float>(no_header), CheckpointError);

    std::string text(bytes.begin(), bytes.end());
    text.replace(text.find("squeezenet_v10"), 14, "squeezenet_v99");
    EXPECT_THROW(decode_checkpoint<float>(std::vector<std::uint8_t>(text.begin(), text.end())), CheckpointError);

    testutil::TempDir tmp;
    try {
        load_checkpoint<float>(tmp / "missing.bin");
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("missing.bin"), std::string::npos);
    }
}

TEST(Checkpoint, ShapeMismatchIsReported) {
    auto m = build_emotion_model<float>(kTiny(Arch::resnet18), 1);
    const auto bytes = encode_checkpoint(m);
    std::string text(bytes.begin(), bytes.end());
    // Same architecture name but a different width changes every shape.
    const auto pos = text.find("\"width_mult\":0.125");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, 18, "\"width_mult\":0.250");
    try {
        decode_checkpoint<float>(std::vector<std::uint8_t>(text.begin(), text.end()));
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("mismatch"), std::string::npos);
    }
}

TEST(Fire, SqueezeMustBeSmallerThanExpand) {
    EXPECT_THROW(Fire<float>(16, 8, 4, 4), ArchError);
    EXPECT_THROW(Fire<float>(16, 9, 4, 4), ArchError);
    EXPECT_NO_THROW(Fire<float>(16, 7, 4, 4));
    Fire<float> f(16, 4, 8, 8);
    EXPECT_EQ(f.out_channels(), 16u);
}

TEST(Blocks, ResidualShortcutShapes) {
    NoGradGuard guard;
    ForwardContext ctx{Mode::eval, nullptr};
    BasicBlock<float> same(8, 8, 1);
    EXPECT_EQ(same.forward(random_images(1, 8, 1).reshape({1, 8, 4, 6}), ctx).shape(), (Shape{1, 8, 4, 6}));
    BasicBlock<float> down(8, 16, 2);
    EXPECT_EQ(down.forward(Tensor<float>({1, 8, 8, 8}), ctx).shape(), (Shape{1, 16, 4, 4}));
    InvertedResidual<float> ir(8, 8, 1, 6);
    EXPECT_EQ(ir.forward(Tensor<float>({1, 8, 5, 5}), ctx).shape(), (Shape{1, 8, 5, 5}));
    InvertedResidual<float> irs(8, 12, 2, 6);
    EXPECT_EQ(irs.forward(Tensor<float>({1, 8, 6, 6}), ctx).shape(), (Shape{1, 12, 3, 3}));
}

TEST(Model, RejectsBadInputAndSpecs) {
    auto m = build_emotion_model<float>(kTiny(Arch::resnet18));
    EXPECT_THROW(m.forward(Tensor<float>({1, 1, 64, 64})), ShapeError);
    EXPECT_THROW(m.append_emotion_head(), ArchError);
    EXPECT_THROW(build_model<float>({Arch::vgg16, 0.0, 64}), ArchError);
    EXPECT_THROW(build_model<float>({Arch::vgg16, 1.5, 64}), ArchError);
    EXPECT_THROW(build_model<float>({Arch::vgg16, 0.125, 16}), ArchError);
    EXPECT_EQ(parse_arch("squeezenet"), Arch::squeezenet_v10);
    EXPECT_FALSE(parse_arch("alexnet").has_value());
}

TEST(Model, PredictNeedsEvalModeAndHead) {
    auto m = build_emotion_model<float>(kTiny(Arch::squeezenet_v10), 2);
    ModelInput in{64, 64, std::vector<float>(3 * 64 * 64, 0.1f)};
    EXPECT_THROW(predict(m, in), ModeError);
    m.set_mode(Mode::eval);
    const Prediction p = predict(m, in);
    EXPECT_NEAR(p.probabilities[0] + p.probabilities[1], 1.0, 1e-9);
    auto bare = build_model<float>(kTiny(Arch::squeezenet_v10));
    bare.set_mode(Mode::eval);
    EXPECT_THROW(predict(bare, in), ArchError);
}

TEST(Model, EvalForwardIsDeterministicTrainDropoutIsSeeded) {
    auto m = build_emotion_model<float>(kTiny(Arch::vgg16), 1);
    const auto x = random_images(2, 64, 9);
    NoGradGuard guard;
    m.set_mode(Mode::eval);
    EXPECT_EQ(m.forward(x).values(), m.forward(x).values());
    m.set_mode(Mode::train);
    m.reseed(7);
    const auto a = m.forward(x).values();
    m.reseed(7);
    EXPECT_EQ(m.forward(x).values(), a);
}
