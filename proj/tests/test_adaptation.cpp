#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace adamix;
using adamix::testing::max_abs_diff;
using adamix::testing::same_values;
using adamix::testing::uniform_tensor;
using adamix::testing::weighted_sum;

namespace {

// Numerical rank by modified Gram-Schmidt on the rows.
std::size_t numerical_rank(std::vector<std::vector<double>> rows, double tol) {
    std::vector<std::vector<double>> basis;
    for (auto& v : rows) {
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > tol) {
            for (double& x : v) x /= norm;
            basis.push_back(v);
        }
    }
    return basis.size();
}

}  // namespace

TEST(Adapter, ZeroUpProjectionIsIdentity) {
    Rng rng(1);
    AdapterModule m{uniform_tensor({4, 2}, rng), uniform_tensor({2}, rng), Tensor({2, 4}, 0.0, true), Tensor({4}, 0.0, true)};
    const Tensor x = uniform_tensor({2, 3, 4}, rng, false);
    EXPECT_TRUE(same_values(adapter_forward(m, x), x));
}

TEST(Adapter, HandEvaluatedExample) {
    AdapterModule m{Tensor({2, 1}, {1.0, 0.0}), Tensor({1}, 0.0), Tensor({1, 2}, {2.0, 0.0}), Tensor({2}, 0.0)};
    const Tensor y = adapter_forward(m, Tensor({1, 2}, {1.0, 0.0}));
    EXPECT_NEAR(y.data()[0], 2.6826894921370859, 1e-12);
    EXPECT_NEAR(y.data()[0], 2.68269, 1e-4);
    EXPECT_EQ(y.data()[1], 0.0);
}

TEST(Adapter, GradientAllFourTensors) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        AdapterModule m{uniform_tensor({6, 3}, rng), uniform_tensor({3}, rng), uniform_tensor({3, 6}, rng), uniform_tensor({6}, rng)};
        const Tensor x = uniform_tensor({2, 4, 6}, rng, false);
        const Tensor w = uniform_tensor({2, 4, 6}, rng, false);
        const auto report = finite_diff_check([&] { return weighted_sum(adapter_forward(m, x), w); }, {m.w_down, m.b_down, m.w_up, m.b_up});
        EXPECT_EQ(report.inputs.size(), 4u);
        EXPECT_TRUE(report.passed) << report.max_rel_error;
    }
}

TEST(Adapter, DimensionMismatch) {
    const AdapterModule m = init_adapter(8, 2, 1);
    EXPECT_THROW((void)adapter_forward(m, Tensor({2, 7})), DimensionError);
}

TEST(Adapter, DeltaSpansAtMostBottleneckDimensions) {
    const std::size_t d = 12, r = 3;
    AdapterModule m = init_adapter(d, r, 4);
    Rng rng(5);
    fill_gaussian(m.w_up.mutable_data(), 1.0, rng);
    fill_gaussian(m.w_down.mutable_data(), 1.0, rng);
    const Tensor probes = uniform_tensor({d + 1, d}, rng, false);
    const Tensor delta = sub(adapter_forward(m, probes), probes);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i <= d; ++i) rows.emplace_back(delta.data().begin() + i * d, delta.data().begin() + (i + 1) * d);
    EXPECT_LE(numerical_rank(rows, 1e-9), r);
    EXPECT_EQ(numerical_rank(rows, 1e-9), r);
}

TEST(Adapter, ForwardIsPure) {
    Rng rng(6);
    AdapterModule m = init_adapter(8, 4, 2);
    fill_gaussian(m.w_up.mutable_data(), 1.0, rng);
    const Tensor x = uniform_tensor({3, 8}, rng, false);
    EXPECT_TRUE(same_values(adapter_forward(m, x), adapter_forward(m, x)));
}

TEST(Lora, ZeroBIsFrozenProjection) {
    Rng rng(1);
    LoraModule m{uniform_tensor({2, 5}, rng), Tensor({4, 2}, 0.0, true), 8.0};
    const Tensor w = uniform_tensor({4, 5}, rng, false);
    const Tensor x = uniform_tensor({3, 5}, rng, false);
    EXPECT_TRUE(same_values(lora_forward(m, x, w), matmul_nt(x, w)));
}

TEST(Lora, HandEvaluatedExample) {
    LoraModule m{Tensor({1, 2}, {1.0, 0.0}), Tensor({2, 1}, {1.0, 0.0}), 1.0};
    const Tensor y = lora_forward(m, Tensor({1, 2}, {3.0, 4.0}), Tensor({2, 2}, 0.0));
    EXPECT_EQ(y.values(), (std::vector<double>{3.0, 0.0}));
}

TEST(Lora, GradientAandB) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        LoraModule m{uniform_tensor({3, 5}, rng), uniform_tensor({4, 3}, rng), 8.0};
        const Tensor w = uniform_tensor({4, 5}, rng, false);
        const Tensor x = uniform_tensor({2, 5}, rng, false);
        const Tensor probe = uniform_tensor({2, 4}, rng, false);
        const auto report = finite_diff_check([&] { return weighted_sum(lora_forward(m, x, w), probe); }, {m.a, m.b});
        EXPECT_TRUE(report.passed) << report.max_rel_error;
    }
}

TEST(Lora, DimensionMismatch) {
    const LoraModule m = init_lora(6, 6, 2, 8.0, 1);
    EXPECT_THROW((void)lora_forward(m, Tensor({2, 6}), Tensor({6, 5})), DimensionError);
    EXPECT_THROW((void)lora_forward(m, Tensor({2, 5}), Tensor({6, 5})), DimensionError);
}

TEST(InitAdapter, FreshModuleIsIdentityAndSeeded) {
    const AdapterModule a = init_adapter(16, 4, 9);
    const AdapterModule b = init_adapter(16, 4, 9);
    const AdapterModule c = init_adapter(16, 4, 10);
    Rng rng(1);
    const Tensor x = uniform_tensor({5, 16}, rng, false);
    EXPECT_TRUE(same_values(adapter_forward(a, x), x));
    EXPECT_TRUE(same_values(a.w_down, b.w_down));
    EXPECT_FALSE(same_values(a.w_down, c.w_down));
    for (const Tensor& t : {a.w_down, a.b_down, a.w_up, a.b_up}) EXPECT_TRUE(t.requires_grad());
    for (double v : a.w_up.data()) EXPECT_EQ(v, 0.0);
    for (double v : a.b_down.data()) EXPECT_EQ(v, 0.0);
}

TEST(InitAdapter, DownProjectionScale) {
    const AdapterModule a = init_adapter(200, 100, 3);
    double sq = 0.0;
    for (double v : a.w_down.data()) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(a.w_down.numel())), 0.01, 0.0005);
}

TEST(InitAdapter, BottleneckMustBeBelowDim) {
    EXPECT_THROW((void)init_adapter(8, 8, 1), ConfigError);
    EXPECT_THROW((void)init_adapter(8, 0, 1), ConfigError);
}

TEST(InitLora, FreshDeltaIsZeroAndSeeded) {
    const LoraModule a = init_lora(10, 6, 3, 8.0, 4);
    const LoraModule b = init_lora(10, 6, 3, 8.0, 4);
    Rng rng(2);
    const Tensor x = uniform_tensor({4, 10}, rng, false);
    const Tensor delta = lora_delta(a, x);
    for (double v : delta.data()) EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(same_values(a.a, b.a));
    EXPECT_EQ(a.a.shape(), (Shape{3, 10}));
    EXPECT_EQ(a.b.shape(), (Shape{6, 3}));
}

TEST(InitLora, RankTooLarge) {
    EXPECT_THROW((void)init_lora(10, 6, 7, 8.0, 1), ConfigError);
    EXPECT_NO_THROW((void)init_lora(10, 6, 6, 8.0, 1));
}

TEST(InitLora, AttentionMatricesParamCount) {
    std::size_t n = 0;
    for (int matrix = 0; matrix < 2; ++matrix) {
        const LoraModule m = init_lora(1024, 1024, 4, 8.0, static_cast<std::uint64_t>(matrix));
        n += m.a.numel() + m.b.numel();
    }
    EXPECT_EQ(n, 16384u);
    EXPECT_EQ(count_adaptation_params({1024, 1, 4, Variant::lora, 2, Sharing::none, 1, true}), 16384u);
}

TEST(InitLora, FreshModulesPreserveModelLogits) {
    BackboneConfig c{2, 16, 2, 32, 30, 8, 3};
    const BackboneModel model = build_backbone(c, 5);
    Rng rng(3);
    const TokenBatch tokens = adamix::testing::random_tokens(3, 8, 30, rng);
    for (Variant v : {Variant::adapter, Variant::lora}) {
        MixtureConfig mc;
        mc.variant = v;
        mc.modules = 1;
        mc.bottleneck = 4;
        mc.attention_sites = true;
        const auto mixture = MixtureAdaptation::create(c, mc, 8);
        EXPECT_LE(max_abs_diff(fixed_route_forward(model, mixture, tokens), encoder_forward(model, tokens)), 1e-12);
    }
}

TEST(OpCounter, CountsTwoProductsPerAdapterForward) {
    const AdapterModule m = init_adapter(8, 2, 1);
    OpCounter counter;
    (void)adapter_forward(m, Tensor({3, 5, 8}, 0.5), &counter);
    EXPECT_EQ(counter.matmuls, 2u);
    EXPECT_EQ(counter.multiply_adds, 2u * 15u * 8u * 2u);
}
