#pragma once

// The four backbones (VGG16, ResNet18, SqueezeNet v1.0, MobileNetV2), their
// building blocks, and the two-way emotion head.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mer/dsp.hpp"
#include "mer/metrics.hpp"
#include "mer/nn.hpp"

namespace mer {

class ArchError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Arch { vgg16, resnet18, squeezenet_v10, mobilenet_v2 };

inline constexpr std::array<Arch, 4> kAllArchs{Arch::vgg16, Arch::resnet18, Arch::squeezenet_v10,
                                               Arch::mobilenet_v2};

inline std::string_view arch_name(Arch a) {
    switch (a) {
        case Arch::vgg16: return "vgg16";
        case Arch::resnet18: return "resnet18";
        case Arch::squeezenet_v10: return "squeezenet_v10";
        case Arch::mobilenet_v2: return "mobilenet_v2";
    }
    return "?";
}

/// Name used in accuracy tables.
inline std::string_view arch_display_name(Arch a) {
    switch (a) {
        case Arch::vgg16: return "VGG16";
        case Arch::resnet18: return "ResNet18";
        case Arch::squeezenet_v10: return "SqueezeNetV1";
        case Arch::mobilenet_v2: return "MobileNetV2";
    }
    return "?";
}

inline std::optional<Arch> parse_arch(std::string_view s) {
    if (s == "vgg16") return Arch::vgg16;
    if (s == "resnet18") return Arch::resnet18;
    if (s == "squeezenet" || s == "squeezenet_v10") return Arch::squeezenet_v10;
    if (s == "mobilenet_v2") return Arch::mobilenet_v2;
    return std::nullopt;
}

struct ArchSpec {
    Arch arch = Arch::resnet18;
    double width_mult = 1.0;
    std::size_t input_hw = 224;

    /// max(1, round(reference * width_mult)).
    std::size_t width(std::size_t reference) const {
        const auto w = static_cast<std::size_t>(std::llround(static_cast<double>(reference) * width_mult));
        return std::max<std::size_t>(1, w);
    }

    std::size_t backbone_out() const { return width(1000); }

    void validate() const {
        if (!(width_mult > 0.0 && width_mult <= 1.0)) throw ArchError("width_mult must lie in (0, 1]");
        if (input_hw < 32) throw ArchError("input_hw must be at least 32");
    }
};

// ---------------------------------------------------------------------------
// Blocks

/// Two 3x3 conv/BN stages with a shortcut: relu(F(x) + shortcut(x)). The
/// shortcut is the identity when shapes are preserved, otherwise a strided
/// 1x1 conv with BN.
template <typename T>
class BasicBlock : public Module<T> {
public:
    BasicBlock(std::size_t in_ch, std::size_t out_ch, std::size_t stride)
        : conv1(in_ch, out_ch, 3, stride, 1, false),
          bn1(out_ch),
          conv2(out_ch, out_ch, 3, 1, 1, false),
          bn2(out_ch),
          in_ch_(in_ch) {
        if (stride != 1 && stride != 2) throw ArchError("residual block stride must be 1 or 2");
        if (stride != 1 || in_ch != out_ch) {
            down_conv = std::make_unique<Conv2d<T>>(in_ch, out_ch, 1, stride, 0, false);
            down_bn = std::make_unique<BatchNorm2d<T>>(out_ch);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
        if (x.ndim() != 4 || x.dim(1) != in_ch_) {
            throw ShapeError("residual block expects " + std::to_string(in_ch_) + " channels, got " +
                             shape_string(x.shape()));
        }
        Tensor<T> f = relu(bn1.forward(conv1.forward(x, ctx), ctx));
        f = bn2.forward(conv2.forward(f, ctx), ctx);
        const Tensor<T> shortcut = down_conv ? down_bn->forward(down_conv->forward(x, ctx), ctx) : x;
        return relu(add(f, shortcut));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        conv1.collect(qualify(prefix, "conv1"), out);
        bn1.collect(qualify(prefix, "bn1"), out);
        conv2.collect(qualify(prefix, "conv2"), out);
        bn2.collect(qualify(prefix, "bn2"), out);
        if (down_conv) {
            down_conv->collect(qualify(prefix, "downsample.0"), out);
            down_bn->collect(qualify(prefix, "downsample.1"), out);
        }
    }

    void reset_parameters(std::mt19937_64& rng) override {
        conv1.reset_parameters(rng);
        bn1.reset_parameters(rng);
        conv2.reset_parameters(rng);
        bn2.reset_parameters(rng);
        if (down_conv) {
            down_conv->reset_parameters(rng);
            down_bn->reset_parameters(rng);
        }
    }

    Conv2d<T> conv1;
    BatchNorm2d<T> bn1;
    Conv2d<T> conv2;
    BatchNorm2d<T> bn2;
    std::unique_ptr<Conv2d<T>> down_conv;
    std::unique_ptr<BatchNorm2d<T>> down_bn;

private:
    std::size_t in_ch_;
};

/// Squeeze 1x1 conv + relu feeding parallel 1x1 and 3x3 expand convs (+ relu)
/// whose outputs are concatenated.
template <typename T>
class Fire : public Module<T> {
public:
    Fire(std::size_t in_ch, std::size_t squeeze, std::size_t expand1x1, std::size_t expand3x3)
        : squeeze_conv(in_ch, checked_squeeze(squeeze, expand1x1, expand3x3), 1),
          expand1(squeeze, expand1x1, 1),
          expand3(squeeze, expand3x3, 3, 1, 1) {}

    Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
        const Tensor<T> s = relu(squeeze_conv.forward(x, ctx));
        return channel_concat<T>({relu(expand1.forward(s, ctx)), relu(expand3.forward(s, ctx))});
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        squeeze_conv.collect(qualify(prefix, "squeeze"), out);
        expand1.collect(qualify(prefix, "expand1x1"), out);
        expand3.collect(qualify(prefix, "expand3x3"), out);
    }

    void reset_parameters(std::mt19937_64& rng) override {
        squeeze_conv.reset_parameters(rng);
        expand1.reset_parameters(rng);
        expand3.reset_parameters(rng);
    }

    std::size_t out_channels() const { return expand1.weight.dim(0) + expand3.weight.dim(0); }

    Conv2d<T> squeeze_conv;
    Conv2d<T> expand1;
    Conv2d<T> expand3;

private:
    static std::size_t checked_squeeze(std::size_t s, std::size_t e1, std::size_t e3) {
        if (s >= e1 + e3) {
            throw ArchError("fire module needs fewer squeeze kernels (" + std::to_string(s) +
                            ") than expand kernels (" + std::to_string(e1 + e3) + ")");
        }
        return s;
    }
};

/// 1x1 expansion (skipped when t = 1) + BN + relu6, depthwise 3x3 + BN +
/// relu6, linear 1x1 projection + BN. The input is added back only for
/// stride-1 blocks that keep the channel count.
template <typename T>
class InvertedResidual : public Module<T> {
public:
    InvertedResidual(std::size_t in_ch, std::size_t out_ch, std::size_t stride, std::size_t expansion)
        : depthwise(in_ch * expansion, 3, stride, 1),
          dw_bn(in_ch * expansion),
          project(in_ch * expansion, out_ch, 1, 1, 0, false),
          project_bn(out_ch),
          use_residual_(stride == 1 && in_ch == out_ch) {
        if (stride != 1 && stride != 2) throw ArchError("inverted residual stride must be 1 or 2");
        if (expansion == 0) throw ArchError("expansion factor must be positive");
        if (expansion != 1) {
            expand = std::make_unique<Conv2d<T>>(in_ch, in_ch * expansion, 1, 1, 0, false);
            expand_bn = std::make_unique<BatchNorm2d<T>>(in_ch * expansion);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
        Tensor<T> h = x;
        if (expand) h = relu6(expand_bn->forward(expand->forward(h, ctx), ctx));
        h = relu6(dw_bn.forward(depthwise.forward(h, ctx), ctx));
        h = project_bn.forward(project.forward(h, ctx), ctx);
        return use_residual_ && residual_enabled_ ? add(h, x) : h;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        if (expand) {
            expand->collect(qualify(prefix, "expand.conv"), out);
            expand_bn->collect(qualify(prefix, "expand.bn"), out);
        }
        depthwise.collect(qualify(prefix, "depthwise.conv"), out);
        dw_bn.collect(qualify(prefix, "depthwise.bn"), out);
        project.collect(qualify(prefix, "project.conv"), out);
        project_bn.collect(qualify(prefix, "project.bn"), out);
    }

    void reset_parameters(std::mt19937_64& rng) override {
        if (expand) {
            expand->reset_parameters(rng);
            expand_bn->reset_parameters(rng);
        }
        depthwise.reset_parameters(rng);
        dw_bn.reset_parameters(rng);
        project.reset_parameters(rng);
        project_bn.reset_parameters(rng);
    }

    bool has_residual() const { return use_residual_; }
    // Ablation switch for tests.
    void set_residual_enabled(bool on) { residual_enabled_ = on; }

    std::unique_ptr<Conv2d<T>> expand;
    std::unique_ptr<BatchNorm2d<T>> expand_bn;
    DepthwiseConv2d<T> depthwise;
    BatchNorm2d<T> dw_bn;
    Conv2d<T> project;
    BatchNorm2d<T> project_bn;

private:
    bool use_residual_;
    bool residual_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Model

template <typename T>
class Model {
public:
    Model(ArchSpec spec, std::unique_ptr<Sequential<T>> backbone, std::uint64_t seed = 0)
        : spec_(spec), backbone_(std::move(backbone)), seed_(seed), rng_(seed) {
        std::mt19937_64 init(seed);
        backbone_->reset_parameters(init);
    }

    const ArchSpec& spec() const { return spec_; }
    std::uint64_t seed() const { return seed_; }

    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }

    /// Resets the dropout generator.
    void reseed(std::uint64_t seed) { rng_.seed(seed); }

    bool has_head() const { return static_cast<bool>(head_); }

    /// Adds linear(backbone_out -> 2).
    void append_emotion_head() {
        if (head_) throw ArchError("emotion head already present");
        head_ = std::make_unique<Linear<T>>(spec_.backbone_out(), kNumEmotions);
        std::mt19937_64 init(seed_ ^ 0x9E3779B97F4A7C15ULL);
        head_->reset_parameters(init);
    }

    Tensor<T> features(const Tensor<T>& x) {
        check_input(x);
        ForwardContext ctx{mode_, &rng_};
        return backbone_->forward(x, ctx);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        check_input(x);
        ForwardContext ctx{mode_, &rng_};
        Tensor<T> y = backbone_->forward(x, ctx);
        if (head_) y = head_->forward(y, ctx);
        return y;
    }

    /// Parameters and buffers in registration order under stable names.
    std::vector<NamedTensor<T>> state() {
        std::vector<NamedTensor<T>> out;
        backbone_->collect("", out);
        if (head_) head_->collect("head", out);
        return out;
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        for (auto& nt : state()) {
            if (nt.trainable) out.push_back(nt.tensor);
        }
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    std::vector<std::vector<T>> snapshot() {
        std::vector<std::vector<T>> out;
        for (auto& nt : state()) out.push_back(nt.tensor.values());
        return out;
    }

    void restore(const std::vector<std::vector<T>>& snap) {
        auto st = state();
        if (snap.size() != st.size()) throw ArchError("snapshot does not match model state");
        for (std::size_t i = 0; i < st.size(); ++i) {
            if (snap[i].size() != st[i].tensor.numel()) throw ArchError("snapshot shape mismatch at " + st[i].name);
            std::copy(snap[i].begin(), snap[i].end(), st[i].tensor.data().begin());
        }
    }

    Sequential<T>& backbone() { return *backbone_; }
    Linear<T>* head() { return head_.get(); }

private:
    void check_input(const Tensor<T>& x) const {
        if (x.ndim() != 4 || x.dim(1) != 3) {
            throw ShapeError("model input must be (N, 3, H, W), got " + shape_string(x.shape()));
        }
    }

    ArchSpec spec_;
    std::unique_ptr<Sequential<T>> backbone_;
    std::unique_ptr<Linear<T>> head_;
    std::uint64_t seed_;
    std::mt19937_64 rng_;
    Mode mode_ = Mode::train;
};

// ---------------------------------------------------------------------------
// Builders

template <typename T>
Model<T> build_vgg16(const ArchSpec& spec, std::uint64_t seed = 0) {
    spec.validate();
    constexpr std::size_t M = 0;
    constexpr std::array<std::size_t, 18> cfg{64, 64, M, 128, 128, M, 256, 256, 256, M,
                                              512, 512, 512, M, 512, 512, 512, M};
    auto net = std::make_unique<Sequential<T>>();
    auto features = std::make_unique<Sequential<T>>();
    std::size_t in = 3, side = spec.input_hw;
    for (std::size_t v : cfg) {
        if (v == M) {
            features->template emplace<MaxPool2d<T>>(2, 2);
            side /= 2;
        } else {
            const std::size_t c = spec.width(v);
            features->template emplace<Conv2d<T>>(in, c, 3, 1, 1);
            features->template emplace<ReLU<T>>();
            in = c;
        }
    }
    const std::size_t hidden = spec.width(4096);
    auto classifier = std::make_unique<Sequential<T>>();
    classifier->template emplace<Linear<T>>(in * side * side, hidden);
    classifier->template emplace<ReLU<T>>();
    classifier->template emplace<Dropout<T>>(0.5);
    classifier->template emplace<Linear<T>>(hidden, hidden);
    classifier->template emplace<ReLU<T>>();
    classifier->template emplace<Dropout<T>>(0.5);
    classifier->template emplace<Linear<T>>(hidden, spec.backbone_out());
    net->add("features", std::move(features));
    net->add("flatten", std::make_unique<Flatten<T>>());
    net->add("classifier", std::move(classifier));
    return Model<T>(spec, std::move(net), seed);
}

template <typename T>
Model<T> build_resnet18(const ArchSpec& spec, std::uint64_t seed = 0) {
    spec.validate();
    auto net = std::make_unique<Sequential<T>>();
    const std::size_t stem = spec.width(64);
    net->add("conv1", std::make_unique<Conv2d<T>>(3, stem, 7, 2, 3, false));
    net->add("bn1", std::make_unique<BatchNorm2d<T>>(stem));
    net->add("relu", std::make_unique<ReLU<T>>());
    net->add("maxpool", std::make_unique<MaxPool2d<T>>(3, 2, 1));
    std::size_t in = stem;
    constexpr std::array<std::size_t, 4> widths{64, 128, 256, 512};
    for (std::size_t s = 0; s < widths.size(); ++s) {
        auto stage = std::make_unique<Sequential<T>>();
        const std::size_t out = spec.width(widths[s]);
        stage->template emplace<BasicBlock<T>>(in, out, s == 0 ? 1 : 2);
        stage->template emplace<BasicBlock<T>>(out, out, 1);
        net->add("layer" + std::to_string(s + 1), std::move(stage));
        in = out;
    }
    net->add("avgpool", std::make_unique<GlobalAvgPool<T>>());
    net->add("fc", std::make_unique<Linear<T>>(in, spec.backbone_out()));
    return Model<T>(spec, std::move(net), seed);
}

template <typename T>
Model<T> build_squeezenet_v10(const ArchSpec& spec, std::uint64_t seed = 0) {
    spec.validate();
    auto net = std::make_unique<Sequential<T>>();
    auto features = std::make_unique<Sequential<T>>();
    const std::size_t stem = spec.width(96);
    features->template emplace<Conv2d<T>>(3, stem, 7, 2, 0);
    features->template emplace<ReLU<T>>();
    features->template emplace<MaxPool2d<T>>(3, 2);
    std::size_t in = stem;
    auto fire = [&](std::size_t s, std::size_t e) {
        auto& f = features->template emplace<Fire<T>>(in, spec.width(s), spec.width(e), spec.width(e));
        in = f.out_channels();
    };
    fire(16, 64);
    fire(16, 64);
    fire(32, 128);
    features->template emplace<MaxPool2d<T>>(3, 2);
    fire(32, 128);
    fire(48, 192);
    fire(48, 192);
    fire(64, 256);
    features->template emplace<MaxPool2d<T>>(3, 2);
    fire(64, 256);
    auto classifier = std::make_unique<Sequential<T>>();
    classifier->template emplace<Dropout<T>>(0.5);
    classifier->template emplace<Conv2d<T>>(in, spec.backbone_out(), 1);
    classifier->template emplace<ReLU<T>>();
    classifier->template emplace<GlobalAvgPool<T>>();
    net->add("features", std::move(features));
    net->add("classifier", std::move(classifier));
    return Model<T>(spec, std::move(net), seed);
}

template <typename T>
Model<T> build_mobilenet_v2(const ArchSpec& spec, std::uint64_t seed = 0) {
    spec.validate();
    struct Stage {
        std::size_t t, c, n, s;
    };
    constexpr std::array<Stage, 7> table{{{1, 16, 1, 1},
                                          {6, 24, 2, 2},
                                          {6, 32, 3, 2},
                                          {6, 64, 4, 2},
                                          {6, 96, 3, 1},
                                          {6, 160, 3, 2},
                                          {6, 320, 1, 1}}};
    auto net = std::make_unique<Sequential<T>>();
    auto features = std::make_unique<Sequential<T>>();
    std::size_t in = spec.width(32);
    {
        auto stem = std::make_unique<Sequential<T>>();
        stem->template emplace<Conv2d<T>>(3, in, 3, 2, 1, false);
        stem->template emplace<BatchNorm2d<T>>(in);
        stem->template emplace<ReLU6<T>>();
        features->add("0", std::move(stem));
    }
    for (const Stage& st : table) {
        const std::size_t out = spec.width(st.c);
        for (std::size_t i = 0; i < st.n; ++i) {
            features->template emplace<InvertedResidual<T>>(in, out, i == 0 ? st.s : 1, st.t);
            in = out;
        }
    }
    const std::size_t last = spec.width(1280);
    {
        auto head = std::make_unique<Sequential<T>>();
        head->template emplace<Conv2d<T>>(in, last, 1, 1, 0, false);
        head->template emplace<BatchNorm2d<T>>(last);
        head->template emplace<ReLU6<T>>();
        features->add(std::to_string(features->size()), std::move(head));
    }
    net->add("features", std::move(features));
    net->add("pool", std::make_unique<GlobalAvgPool<T>>());
    net->add("classifier", std::make_unique<Linear<T>>(last, spec.backbone_out()));
    return Model<T>(spec, std::move(net), seed);
}

/// Backbone only; call append_emotion_head() for the two-way classifier.
template <typename T>
Model<T> build_model(const ArchSpec& spec, std::uint64_t seed = 0) {
    switch (spec.arch) {
        case Arch::vgg16: return build_vgg16<T>(spec, seed);
        case Arch::resnet18: return build_resnet18<T>(spec, seed);
        case Arch::squeezenet_v10: return build_squeezenet_v10<T>(spec, seed);
        case Arch::mobilenet_v2: return build_mobilenet_v2<T>(spec, seed);
    }
    throw ArchError("unknown architecture");
}

template <typename T>
Model<T> build_emotion_model(const ArchSpec& spec, std::uint64_t seed = 0) {
    Model<T> m = build_model<T>(spec, seed);
    m.append_emotion_head();
    return m;
}

/// Packs a batch of images into an (N, 3, H, W) tensor.
template <typename T>
Tensor<T> to_batch(std::span<const ModelInput* const> inputs) {
    if (inputs.empty()) throw ShapeError("empty batch");
    const std::size_t H = inputs.front()->height, W = inputs.front()->width;
    std::vector<T> v;
    v.reserve(inputs.size() * 3 * H * W);
    for (const ModelInput* in : inputs) {
        if (in->height != H || in->width != W) throw ShapeError("batch images differ in size");
        v.insert(v.end(), in->pixels.begin(), in->pixels.end());
    }
    return Tensor<T>({inputs.size(), 3, H, W}, std::move(v));
}

template <typename T>
Prediction predict(Model<T>& model, const ModelInput& input) {
    if (model.mode() != Mode::eval) throw ModeError("predict needs a model in eval mode");
    if (!model.has_head()) throw ArchError("predict needs the emotion head");
    const ModelInput* one[] = {&input};
    NoGradGuard guard;
    const Tensor<T> logits = model.forward(to_batch<T>(one));
    return prediction_from_logits(logits[0], logits[1]);
}

}  // namespace mer
