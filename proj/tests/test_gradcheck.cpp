#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mer/gradcheck.hpp"
#include "mer/verify.hpp"

using namespace mer;

namespace {

// y = x^2 elementwise with a deliberately wrong adjoint (3x instead of 2x).
Tensor<double> bad_square(const Tensor<double>& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
    return Tensor<double>::from_op(x.shape(), std::move(out), "bad_square", {x}, [](TensorNode<double>& self) {
        auto& in = *self.inputs[0];
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * in.data[i] * self.grad[i];
    });
}

}  // namespace

TEST(GradCheck, PassesOnCorrectProgram) {
    Tensor<double> x({4}, {0.3, -1.2, 2.0, 0.7});
    Tensor<double> w({4}, {1.0, 0.5, -0.25, 2.0});
    const auto r = grad_check([&] { return sum(mul(mul(x, x), w)); }, {x, w});
    EXPECT_LT(r.max_rel_error, 1e-8);
    EXPECT_EQ(r.coords_checked, 8u);
}

TEST(GradCheck, DetectsWrongAdjoint) {
    Tensor<double> x({3}, {0.5, 1.5, -2.0});
    const auto r = grad_check([&] { return sum(bad_square(x)); }, {x});
    EXPECT_GT(r.max_rel_error, 0.1);
    EXPECT_EQ(r.worst_input, 0u);
    EXPECT_NEAR(r.analytic, 1.5 * r.numeric, 1e-6);
}

TEST(GradCheck, DetectsNondeterministicProgram) {
    Tensor<double> x({2}, {1.0, 2.0});
    int calls = 0;
    EXPECT_THROW(grad_check([&] { return scale(sum(x), static_cast<double>(++calls)); }, {x}), NondeterminismError);
}

TEST(GradCheck, SampledCoordinatesAreCapped) {
    Tensor<double> x({100});
    for (std::size_t i = 0; i < 100; ++i) x[i] = 0.01 * static_cast<double>(i);
    GradCheckOptions opt;
    opt.max_coords_per_input = 7;
    const auto r = grad_check([&] { return sum(mul(x, x)); }, {x}, opt);
    EXPECT_EQ(r.coords_checked, 7u);
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradSuite, EveryOpPassesWithTwentyTrials) {
    VerifyOptions opt;
    opt.archs = false;
    const auto rows = run_gradient_suite(opt);
    ASSERT_EQ(rows.size(), 18u);
    for (const auto& r : rows) {
        EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
        EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
        EXPECT_EQ(r.trials, 20u) << r.name;
    }
}

class ArchGrad : public ::testing::TestWithParam<Arch> {};

TEST_P(ArchGrad, TinyNetworkPasses) {
    VerifyOptions opt;
    const VerifyRow r = verify_architecture(GetParam(), opt);
    EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-4);
    EXPECT_GT(r.coords, 20u);
}

INSTANTIATE_TEST_SUITE_P(AllArchs, ArchGrad, ::testing::ValuesIn(kAllArchs),
                         [](const auto& info) { return std::string(arch_name(info.param)); });
