#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "mer/tensor.hpp"

namespace mer {

class NondeterminismError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
    double eps = 1e-4;
    // 0 checks every coordinate; otherwise a seeded sample of this many per input.
    std::size_t max_coords_per_input = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients of a scalar program against central finite
/// differences. The error per coordinate is |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& fn, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& opt = {}) {
    {
        NoGradGuard guard;
        const Tensor<double> a = fn();
        const Tensor<double> b = fn();
        if (a.numel() != 1) throw ShapeError("grad_check: program must return a scalar");
        if (a.item() != b.item()) throw NondeterminismError("grad_check: two forward passes differ");
    }

    for (auto& x : inputs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    fn().backward();
    std::vector<std::vector<double>> analytic;
    for (const auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());

    GradCheckResult result;
    std::mt19937_64 rng(opt.seed);
    NoGradGuard guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& x = inputs[k];
        std::vector<std::size_t> coords(x.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opt.max_coords_per_input != 0 && coords.size() > opt.max_coords_per_input) {
            for (std::size_t i = 0; i < opt.max_coords_per_input; ++i) {
                std::uniform_int_distribution<std::size_t> pick(i, coords.size() - 1);
                std::swap(coords[i], coords[pick(rng)]);
            }
            coords.resize(opt.max_coords_per_input);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t i : coords) {
            const double orig = x[i];
            x[i] = orig + opt.eps;
            const double fp = fn().item();
            x[i] = orig - opt.eps;
            const double fm = fn().item();
            x[i] = orig;
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
            ++result.coords_checked;
            if (result.coords_checked == 1 || err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_input = k;
                result.worst_coord = i;
                result.analytic = analytic[k][i];
                result.numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace mer
