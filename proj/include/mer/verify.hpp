#pragma once

// Finite-difference verification of every differentiable op and of the four
// networks at reduced width, in double precision.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mer/arch.hpp"
#include "mer/gradcheck.hpp"
#include "mer/ops.hpp"

namespace mer {

struct VerifyRow {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t trials = 0;
    std::size_t coords = 0;
    bool passed = false;
};

struct VerifyOptions {
    std::size_t trials = 20;  // random trials per op
    double tolerance = 1e-4;
    std::uint64_t seed = 1;
    bool ops = true;
    bool archs = true;
    double arch_width = 0.125;
    std::size_t arch_input_hw = 64;
    std::size_t arch_coords_per_tensor = 3;
    // Smaller than the op-level step so perturbations rarely cross a kink.
    double arch_eps = 1e-7;
    std::function<void(const VerifyRow&)> on_row;
};

namespace verify_detail {

using TD = Tensor<double>;

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline TD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = lo + (hi - lo) * uniform01(rng);
    return TD(std::move(shape), std::move(v));
}

/// Values bounded away from the given kinks by at least `gap`.
inline TD away_from(Shape shape, std::mt19937_64& rng, std::vector<double> kinks, double lo, double hi,
                    double gap = 0.05) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        bool ok = false;
        while (!ok) {
            x = lo + (hi - lo) * uniform01(rng);
            ok = std::all_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(x - k) >= gap; });
        }
    }
    return TD(std::move(shape), std::move(v));
}

/// Distinct values at least 0.01 apart, so a max never flips under perturbation.
inline TD distinct_tensor(Shape shape, std::mt19937_64& rng) {
    std::vector<double> v(shape_numel(shape));
    std::iota(v.begin(), v.end(), 0.0);
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
    for (auto& x : v) x = 0.01 * x - 0.005 * static_cast<double>(v.size());
    return TD(std::move(shape), std::move(v));
}

/// sum(y * r) with a fixed random r, so every output coordinate matters.
inline TD project(const TD& y, const TD& r) { return sum(mul(y, r)); }

struct Case {
    std::string name;
    // Builds one trial: returns the program and the tensors to differentiate.
    std::function<std::pair<std::function<TD()>, std::vector<TD>>(std::mt19937_64&)> make;
};

inline std::vector<Case> op_cases() {
    std::vector<Case> cases;
    cases.push_back({"add", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
                         TD a = random_tensor(s, rng), b = random_tensor(s, rng), r = random_tensor(s, rng);
                         return std::pair{std::function<TD()>([=] { return project(add(a, b), r); }),
                                          std::vector<TD>{a, b}};
                     }});
    cases.push_back({"mul", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
                         TD a = random_tensor(s, rng), b = random_tensor(s, rng), r = random_tensor(s, rng);
                         return std::pair{std::function<TD()>([=] { return project(mul(a, b), r); }),
                                          std::vector<TD>{a, b}};
                     }});
    cases.push_back({"scale", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
                         const double c = 4.0 * uniform01(rng) - 2.0;
                         TD a = random_tensor(s, rng), r = random_tensor(s, rng);
                         return std::pair{std::function<TD()>([=] { return project(scale(a, c), r); }),
                                          std::vector<TD>{a}};
                     }});
    cases.push_back({"sum_mean", [](std::mt19937_64& rng) {
                         TD a = random_tensor({pick(rng, 1, 5), pick(rng, 1, 5)}, rng);
                         return std::pair{std::function<TD()>([=] { return add(sum(a), scale(mean(a), 3.0)); }),
                                          std::vector<TD>{a}};
                     }});
    cases.push_back({"relu", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 4), pick(rng, 1, 8)};
                         TD a = away_from(s, rng, {0.0}, -2.0, 2.0), r = random_tensor(s, rng);
                         return std::pair{std::function<TD()>([=] { return project(relu(a), r); }),
                                          std::vector<TD>{a}};
                     }});
    cases.push_back({"relu6", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 4), pick(rng, 1, 8)};
                         TD a = away_from(s, rng, {0.0, 6.0}, -3.0, 9.0), r = random_tensor(s, rng);
                         return std::pair{std::function<TD()>([=] { return project(relu6(a), r); }),
                                          std::vector<TD>{a}};
                     }});
    cases.push_back({"flatten", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
                         TD a = random_tensor(s, rng);
                         TD r = random_tensor({s[0], s[1] * s[2] * s[3]}, rng);
                         return std::pair{std::function<TD()>([=] { return project(flatten(a), r); }),
                                          std::vector<TD>{a}};
                     }});
    cases.push_back({"conv2d", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 2), C = pick(rng, 1, 3), O = pick(rng, 1, 4);
                         const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 2);
                         const std::size_t H = pick(rng, k, 7), W = pick(rng, k, 7);
                         TD x = random_tensor({N, C, H, W}, rng), w = random_tensor({O, C, k, k}, rng);
                         TD b = random_tensor({O}, rng);
                         const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
                         TD r = random_tensor({N, O, Ho, Wo}, rng);
                         return std::pair{
                             std::function<TD()>([=] { return project(conv2d(x, w, b, stride, pad), r); }),
                             std::vector<TD>{x, w, b}};
                     }});
    cases.push_back({"depthwise_conv2d", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 2), C = pick(rng, 1, 4);
                         const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                         const std::size_t H = pick(rng, k, 7), W = pick(rng, k, 7);
                         TD x = random_tensor({N, C, H, W}, rng), w = random_tensor({C, 1, k, k}, rng);
                         TD b = random_tensor({C}, rng);
                         const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
                         TD r = random_tensor({N, C, Ho, Wo}, rng);
                         return std::pair{
                             std::function<TD()>([=] { return project(depthwise_conv2d(x, w, b, stride, pad), r); }),
                             std::vector<TD>{x, w, b}};
                     }});
    cases.push_back({"maxpool2d", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 2), C = pick(rng, 1, 3);
                         const std::size_t k = pick(rng, 2, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, k / 2);
                         const std::size_t H = pick(rng, k, 7), W = pick(rng, k, 7);
                         TD x = distinct_tensor({N, C, H, W}, rng);
                         const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
                         TD r = random_tensor({N, C, Ho, Wo}, rng);
                         return std::pair{
                             std::function<TD()>([=] { return project(maxpool2d(x, k, stride, pad), r); }),
                             std::vector<TD>{x}};
                     }});
    cases.push_back({"global_avgpool", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 3), C = pick(rng, 1, 4);
                         TD x = random_tensor({N, C, pick(rng, 1, 5), pick(rng, 1, 5)}, rng);
                         TD r = random_tensor({N, C}, rng);
                         return std::pair{std::function<TD()>([=] { return project(global_avgpool(x), r); }),
                                          std::vector<TD>{x}};
                     }});
    cases.push_back({"linear", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 4), F = pick(rng, 1, 6), O = pick(rng, 1, 5);
                         TD x = random_tensor({N, F}, rng), w = random_tensor({O, F}, rng), b = random_tensor({O}, rng);
                         TD r = random_tensor({N, O}, rng);
                         return std::pair{std::function<TD()>([=] { return project(linear(x, w, b), r); }),
                                          std::vector<TD>{x, w, b}};
                     }});
    cases.push_back({"batchnorm2d_train", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 2, 3), C = pick(rng, 1, 3);
                         const Shape s{N, C, pick(rng, 1, 4), pick(rng, 1, 4)};
                         TD x = random_tensor(s, rng), g = random_tensor({C}, rng, 0.5, 1.5);
                         TD b = random_tensor({C}, rng), r = random_tensor(s, rng);
                         return std::pair{std::function<TD()>([=] {
                                              TD rm({C}), rv({C}, std::vector<double>(C, 1.0));
                                              return project(batchnorm2d(x, g, b, rm, rv, Mode::train), r);
                                          }),
                                          std::vector<TD>{x, g, b}};
                     }});
    cases.push_back({"batchnorm2d_eval", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 3), C = pick(rng, 1, 3);
                         const Shape s{N, C, pick(rng, 1, 4), pick(rng, 1, 4)};
                         TD x = random_tensor(s, rng), g = random_tensor({C}, rng, 0.5, 1.5);
                         TD b = random_tensor({C}, rng), r = random_tensor(s, rng);
                         TD rm = random_tensor({C}, rng), rv = random_tensor({C}, rng, 0.5, 2.0);
                         return std::pair{std::function<TD()>([=]() mutable {
                                              return project(batchnorm2d(x, g, b, rm, rv, Mode::eval), r);
                                          }),
                                          std::vector<TD>{x, g, b}};
                     }});
    cases.push_back({"dropout", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 4), pick(rng, 1, 8)};
                         TD x = random_tensor(s, rng), r = random_tensor(s, rng);
                         const std::uint64_t mask_seed = rng();
                         return std::pair{std::function<TD()>([=] {
                                              std::mt19937_64 g(mask_seed);
                                              return project(dropout(x, 0.5, Mode::train, g), r);
                                          }),
                                          std::vector<TD>{x}};
                     }});
    cases.push_back({"channel_concat", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 2), H = pick(rng, 1, 3), W = pick(rng, 1, 3);
                         const std::size_t c1 = pick(rng, 1, 3), c2 = pick(rng, 1, 3);
                         TD a = random_tensor({N, c1, H, W}, rng), b = random_tensor({N, c2, H, W}, rng);
                         TD r = random_tensor({N, c1 + c2, H, W}, rng);
                         return std::pair{std::function<TD()>([=] { return project(channel_concat<double>({a, b}), r); }),
                                          std::vector<TD>{a, b}};
                     }});
    cases.push_back({"softmax", [](std::mt19937_64& rng) {
                         const Shape s{pick(rng, 1, 4), pick(rng, 2, 5)};
                         TD z = random_tensor(s, rng, -3.0, 3.0), r = random_tensor(s, rng);
                         return std::pair{std::function<TD()>([=] { return project(softmax(z), r); }),
                                          std::vector<TD>{z}};
                     }});
    cases.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                         const std::size_t N = pick(rng, 1, 5), K = pick(rng, 2, 4);
                         TD z = random_tensor({N, K}, rng, -3.0, 3.0);
                         std::vector<std::size_t> t(N);
                         for (auto& v : t) v = pick(rng, 0, K - 1);
                         return std::pair{std::function<TD()>([=] { return cross_entropy(z, std::span(t)); }),
                                          std::vector<TD>{z}};
                     }});
    return cases;
}

}  // namespace verify_detail

/// Gradient check of a whole network: cross-entropy of a random 2-image batch
/// in train mode, differentiated with respect to the input and every
/// trainable tensor (a seeded sample of coordinates per tensor).
inline VerifyRow verify_architecture(Arch arch, const VerifyOptions& opt) {
    using verify_detail::TD;
    std::mt19937_64 rng(opt.seed ^ (static_cast<std::uint64_t>(arch) + 1) * 0x9E3779B97F4A7C15ULL);
    Model<double> model = build_emotion_model<double>(ArchSpec{arch, opt.arch_width, opt.arch_input_hw}, opt.seed);
    model.set_mode(Mode::train);
    // Zero biases and BN shifts put dead channels exactly on a ReLU kink;
    // check at a generic point instead.
    for (auto& nt : model.state()) {
        if (!nt.trainable || nt.tensor.ndim() != 1) continue;
        const bool is_bias = nt.name.ends_with("bias");
        for (auto& v : nt.tensor.data()) v = is_bias ? 0.2 * uniform01(rng) - 0.1 : 0.5 + uniform01(rng);
    }
    const std::size_t hw = opt.arch_input_hw;
    TD x = verify_detail::random_tensor({2, 3, hw, hw}, rng);
    const std::vector<std::size_t> targets{0, 1};
    std::vector<TD> inputs{x};
    for (auto& p : model.parameters()) inputs.push_back(p);
    const std::uint64_t dropout_seed = rng();
    const auto fn = [&] {
        model.reseed(dropout_seed);
        return cross_entropy(model.forward(x), std::span<const std::size_t>(targets));
    };
    GradCheckOptions gopt;
    gopt.eps = opt.arch_eps;
    gopt.max_coords_per_input = opt.arch_coords_per_tensor;
    gopt.seed = opt.seed;
    const GradCheckResult r = grad_check(fn, inputs, gopt);
    return {std::string(arch_display_name(arch)), r.max_rel_error, 1, r.coords_checked,
            r.max_rel_error < opt.tolerance};
}

/// Runs the op suite and the architecture checks; one row per op or network.
inline std::vector<VerifyRow> run_gradient_suite(const VerifyOptions& opt = {}) {
    std::vector<VerifyRow> rows;
    const auto emit = [&](VerifyRow row) {
        if (opt.on_row) opt.on_row(row);
        rows.push_back(std::move(row));
    };
    if (opt.ops) {
        std::mt19937_64 rng(opt.seed);
        for (const auto& c : verify_detail::op_cases()) {
            VerifyRow row{c.name, 0.0, 0, 0, true};
            for (std::size_t t = 0; t < opt.trials; ++t) {
                auto [fn, inputs] = c.make(rng);
                const GradCheckResult r = grad_check(fn, inputs);
                row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
                row.coords += r.coords_checked;
                ++row.trials;
            }
            row.passed = row.max_rel_error < opt.tolerance;
            emit(std::move(row));
        }
    }
    if (opt.archs) {
        for (Arch a : kAllArchs) emit(verify_architecture(a, opt));
    }
    return rows;
}

}  // namespace mer
