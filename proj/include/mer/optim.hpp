#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mer/tensor.hpp"

namespace mer {

struct OptimizerConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::adam;
    double lr = 1e-3;
    double momentum = 0.0;  // sgd only
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must lie in [0, 1)");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw std::invalid_argument("Adam betas must lie in [0, 1)");
        }
    }
};

inline std::string_view to_string(OptimizerConfig::Kind k) { return k == OptimizerConfig::Kind::sgd ? "sgd" : "adam"; }

/// Owns per-parameter state. SGD: v = momentum * v + g; p -= lr * v.
/// Adam: bias-corrected first and second moments.
template <typename T>
class Optimizer {
public:
    Optimizer(std::vector<Tensor<T>> params, OptimizerConfig config)
        : params_(std::move(params)), config_(config) {
        config_.validate();
        for (const auto& p : params_) {
            first_.emplace_back(p.numel(), 0.0);
            if (config_.kind == OptimizerConfig::Kind::adam) second_.emplace_back(p.numel(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++steps_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            auto values = p.data();
            auto grads = p.grad();
            auto& m = first_[k];
            if (config_.kind == OptimizerConfig::Kind::sgd) {
                for (std::size_t i = 0; i < values.size(); ++i) {
                    m[i] = config_.momentum * m[i] + grads[i];
                    values[i] = static_cast<T>(values[i] - config_.lr * m[i]);
                }
            } else {
                auto& v = second_[k];
                for (std::size_t i = 0; i < values.size(); ++i) {
                    const double g = grads[i];
                    m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
                    v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    values[i] = static_cast<T>(values[i] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
                }
            }
        }
    }

    std::size_t steps() const { return steps_; }
    const OptimizerConfig& config() const { return config_; }

private:
    std::vector<Tensor<T>> params_;
    OptimizerConfig config_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::size_t steps_ = 0;
};

}  // namespace mer
