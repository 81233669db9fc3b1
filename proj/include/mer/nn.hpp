#pragma once

// Parameterized layers over the op set. A module owns its parameters and
// buffers and reports them under stable dotted names.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mer/ops.hpp"
#include "mer/tensor.hpp"

namespace mer {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;  // false for buffers such as running statistics
};

struct ForwardContext {
    Mode mode = Mode::eval;
    std::mt19937_64* rng = nullptr;
};

inline std::string qualify(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

/// Kaiming-uniform fan-in initialization with the ReLU gain: U(-b, b), b = sqrt(6 / fan_in).
template <typename T>
void kaiming_uniform(Tensor<T>& w, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
}

template <typename T>
class Module {
public:
    virtual ~Module() = default;
    virtual Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) = 0;
    virtual void collect(const std::string& /*prefix*/, std::vector<NamedTensor<T>>& /*out*/) {}
    virtual void reset_parameters(std::mt19937_64& /*rng*/) {}
};

template <typename T>
class Conv2d : public Module<T> {
public:
    Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1, std::size_t padding = 0,
           bool with_bias = true)
        : weight({out, in, k, k}, true), stride_(stride), padding_(padding) {
        if (with_bias) bias = Tensor<T>({out}, true);
    }

    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override {
        return conv2d(x, weight, bias, stride_, padding_);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        out.push_back({qualify(prefix, "weight"), weight, true});
        if (bias.defined()) out.push_back({qualify(prefix, "bias"), bias, true});
    }

    void reset_parameters(std::mt19937_64& rng) override {
        kaiming_uniform(weight, weight.dim(1) * weight.dim(2) * weight.dim(3), rng);
        if (bias.defined()) std::fill(bias.data().begin(), bias.data().end(), T{});
    }

    std::size_t stride() const { return stride_; }
    std::size_t padding() const { return padding_; }

    Tensor<T> weight;
    Tensor<T> bias;

private:
    std::size_t stride_, padding_;
};

template <typename T>
class DepthwiseConv2d : public Module<T> {
public:
    DepthwiseConv2d(std::size_t channels, std::size_t k, std::size_t stride = 1, std::size_t padding = 0,
                    bool with_bias = false)
        : weight({channels, 1, k, k}, true), stride_(stride), padding_(padding) {
        if (with_bias) bias = Tensor<T>({channels}, true);
    }

    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override {
        return depthwise_conv2d(x, weight, bias, stride_, padding_);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        out.push_back({qualify(prefix, "weight"), weight, true});
        if (bias.defined()) out.push_back({qualify(prefix, "bias"), bias, true});
    }

    void reset_parameters(std::mt19937_64& rng) override {
        kaiming_uniform(weight, weight.dim(2) * weight.dim(3), rng);
        if (bias.defined()) std::fill(bias.data().begin(), bias.data().end(), T{});
    }

    std::size_t stride() const { return stride_; }
    std::size_t padding() const { return padding_; }

    Tensor<T> weight;
    Tensor<T> bias;

private:
    std::size_t stride_, padding_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
public:
    explicit BatchNorm2d(std::size_t channels)
        : gamma({channels}, std::vector<T>(channels, T{1}), true),
          beta({channels}, true),
          running_mean({channels}),
          running_var({channels}, std::vector<T>(channels, T{1})) {}

    Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
        return batchnorm2d(x, gamma, beta, running_mean, running_var, ctx.mode);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        out.push_back({qualify(prefix, "weight"), gamma, true});
        out.push_back({qualify(prefix, "bias"), beta, true});
        out.push_back({qualify(prefix, "running_mean"), running_mean, false});
        out.push_back({qualify(prefix, "running_var"), running_var, false});
    }

    void reset_parameters(std::mt19937_64&) override {
        std::fill(gamma.data().begin(), gamma.data().end(), T{1});
        std::fill(beta.data().begin(), beta.data().end(), T{});
        std::fill(running_mean.data().begin(), running_mean.data().end(), T{});
        std::fill(running_var.data().begin(), running_var.data().end(), T{1});
    }

    Tensor<T> gamma, beta, running_mean, running_var;
};

template <typename T>
class Linear : public Module<T> {
public:
    Linear(std::size_t in, std::size_t out) : weight({out, in}, true), bias({out}, true) {}

    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return linear(x, weight, bias); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        out.push_back({qualify(prefix, "weight"), weight, true});
        out.push_back({qualify(prefix, "bias"), bias, true});
    }

    void reset_parameters(std::mt19937_64& rng) override {
        kaiming_uniform(weight, weight.dim(1), rng);
        std::fill(bias.data().begin(), bias.data().end(), T{});
    }

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }

    Tensor<T> weight, bias;
};

template <typename T>
class ReLU : public Module<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return relu(x); }
};

template <typename T>
class ReLU6 : public Module<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return relu6(x); }
};

template <typename T>
class MaxPool2d : public Module<T> {
public:
    MaxPool2d(std::size_t k, std::size_t stride, std::size_t padding = 0) : k_(k), stride_(stride), padding_(padding) {}
    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return maxpool2d(x, k_, stride_, padding_); }

private:
    std::size_t k_, stride_, padding_;
};

template <typename T>
class GlobalAvgPool : public Module<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return global_avgpool(x); }
};

template <typename T>
class Flatten : public Module<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, ForwardContext&) override { return flatten(x); }
};

template <typename T>
class Dropout : public Module<T> {
public:
    explicit Dropout(double p) : p_(p) {}

    Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
        if (ctx.mode == Mode::train && !ctx.rng) throw ModeError("dropout in train mode needs a generator");
        if (ctx.mode == Mode::eval) return x;
        return dropout(x, p_, ctx.mode, *ctx.rng);
    }

private:
    double p_;
};

template <typename T>
class Sequential : public Module<T> {
public:
    template <typename M>
    M& add(std::string name, std::unique_ptr<M> m) {
        M& ref = *m;
        children_.emplace_back(std::move(name), std::move(m));
        return ref;
    }

    template <typename M, typename... Args>
    M& emplace(Args&&... args) {
        return add(std::to_string(children_.size()), std::make_unique<M>(std::forward<Args>(args)...));
    }

    Tensor<T> forward(const Tensor<T>& x, ForwardContext& ctx) override {
        Tensor<T> y = x;
        for (auto& [name, child] : children_) y = child->forward(y, ctx);
        return y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) override {
        for (auto& [name, child] : children_) child->collect(qualify(prefix, name), out);
    }

    void reset_parameters(std::mt19937_64& rng) override {
        for (auto& [name, child] : children_) child->reset_parameters(rng);
    }

    std::size_t size() const { return children_.size(); }
    Module<T>& child(std::size_t i) { return *children_.at(i).second; }
    const std::string& child_name(std::size_t i) const { return children_.at(i).first; }

private:
    std::vector<std::pair<std::string, std::unique_ptr<Module<T>>>> children_;
};

}  // namespace mer
