#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace adamix;
using adamix::testing::uniform_tensor;
using adamix::testing::weighted_sum;

namespace {

Tensor mat(Shape s, std::vector<double> v, bool rg = false) { return Tensor(std::move(s), std::move(v), rg); }

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.values(), std::vector<double>(6, 1.5));
    EXPECT_THROW(Tensor({2, 0}), DimensionError);
    EXPECT_THROW(mat({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Matmul, IdentityLeavesMatrix) {
    const Tensor out = matmul(mat({2, 2}, {1, 0, 0, 1}), mat({2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(out.values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
    const Tensor out = matmul(mat({1, 2}, {1, 2}), mat({2, 1}, {3, 4}));
    ASSERT_EQ(out.shape(), (Shape{1, 1}));
    EXPECT_EQ(out.item(), 11.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
    try {
        (void)matmul(Tensor({2, 3}), Tensor({4, 5}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
}

TEST(Matmul, SumGradientMatchesFiniteDifferences) {
    Rng rng(3);
    Tensor a = uniform_tensor({3, 3}, rng);
    Tensor b = uniform_tensor({3, 3}, rng, false);
    const auto report = finite_diff_check([&] { return sum(matmul(a, b)); }, {a}, {.tolerance = 1e-6});
    EXPECT_TRUE(report.passed) << report.max_rel_error;
    EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(Gelu, KnownValues) {
    EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
    EXPECT_NEAR(gelu(Tensor::scalar(1.0)).item(), 0.84134474606854295, 1e-15);
    EXPECT_NEAR(gelu(Tensor::scalar(1.0)).item(), 0.841345, 1e-5);
}

TEST(Gelu, GradientAtHalf) {
    Tensor x = Tensor::scalar(0.5, true);
    const auto report = finite_diff_check([&] { return gelu(x); }, {x}, {.tolerance = 1e-6});
    EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(Softmax, Uniform) {
    const Tensor s = softmax(mat({1, 2}, {0, 0}));
    EXPECT_EQ(s.values(), (std::vector<double>{0.5, 0.5}));
}

TEST(Softmax, OneTwoThree) {
    const Tensor s = softmax(mat({1, 3}, {1, 2, 3}));
    const double expected[] = {0.090030573170380458, 0.24472847105479765, 0.66524095577482189};
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(s.data()[i], expected[i], 1e-12);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    const Tensor s = softmax(mat({1, 2}, {1000, 1000}));
    EXPECT_EQ(s.values(), (std::vector<double>{0.5, 0.5}));
}

TEST(LayerNorm, ConstantRowIsZero) {
    const Tensor y = layer_norm(mat({1, 3}, {5, 5, 5}), Tensor({3}, 1.0), Tensor({3}, 0.0));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRow) {
    const Tensor y = layer_norm(mat({1, 2}, {1, 3}), Tensor({2}, 1.0), Tensor({2}, 0.0), 0.0);
    EXPECT_EQ(y.values(), (std::vector<double>{-1.0, 1.0}));
}

TEST(LayerNorm, GradientCheck) {
    Rng rng(5);
    Tensor x = uniform_tensor({3, 4}, rng);
    Tensor g = uniform_tensor({4}, rng);
    Tensor b = uniform_tensor({4}, rng);
    const Tensor w = uniform_tensor({3, 4}, rng, false);
    const auto report = finite_diff_check([&] { return weighted_sum(layer_norm(x, g, b), w); }, {x, g, b});
    EXPECT_LT(report.max_rel_error, 1e-5);
}

TEST(CrossEntropy, Examples) {
    const std::vector<int> zero{0}, two{2};
    EXPECT_NEAR(cross_entropy(mat({1, 2}, {40, -40}), zero).item(), 0.0, 1e-30);
    EXPECT_NEAR(cross_entropy(mat({1, 2}, {0, 0}), zero).item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(cross_entropy(mat({1, 3}, {1, 2, 3}), two).item(), 0.4076059644443803, 1e-12);
}

TEST(CrossEntropy, OutOfRangeLabel) {
    const std::vector<int> bad{2};
    EXPECT_THROW((void)cross_entropy(mat({1, 2}, {0, 0}), bad), IndexError);
    const std::vector<int> neg{-1};
    EXPECT_THROW((void)cross_entropy(mat({1, 2}, {0, 0}), neg), IndexError);
}

TEST(KlDivergence, Examples) {
    EXPECT_EQ(kl_divergence(mat({1, 3}, {0.3, -1, 2}), mat({1, 3}, {0.3, -1, 2})).item(), 0.0);
    EXPECT_NEAR(kl_divergence(mat({1, 2}, {40, -40}), mat({1, 2}, {0, 0})).item(), std::log(2.0), 1e-4);
    EXPECT_THROW((void)kl_divergence(Tensor({1, 2}), Tensor({1, 3})), DimensionError);
}

TEST(Backward, SumGivesOnes) {
    Tensor x({2, 3}, 0.7, true);
    backward(sum(x));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), std::vector<double>(6, 1.0));
}

TEST(Backward, FrozenTensorGetsNoGrad) {
    Rng rng(1);
    Tensor w = uniform_tensor({3, 3}, rng, false);
    Tensor x = uniform_tensor({2, 3}, rng, true);
    backward(sum(matmul(x, w)));
    EXPECT_TRUE(x.has_grad());
    EXPECT_FALSE(w.has_grad());
}

TEST(Backward, NonScalarLossIsContractViolation) {
    Tensor x({2}, 1.0, true);
    EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
    EXPECT_THROW(backward(Tensor::scalar(1.0)), ContractError);
}

TEST(Backward, TapeIsDiscardedAfterReplay) {
    Tensor x({2}, 1.0, true);
    Tensor loss = sum(mul(x, x));
    backward(loss);
    EXPECT_TRUE(loss.is_leaf());
    EXPECT_FALSE(loss.has_grad());
}

TEST(Backward, SharedInputAccumulatesOnce) {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor y = mul(x, x);
    backward(sum(add(y, y)));
    EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, CompositeAdapterGradient) {
    Rng rng(11);
    AdapterModule m{uniform_tensor({4, 2}, rng), uniform_tensor({2}, rng), uniform_tensor({2, 4}, rng), uniform_tensor({4}, rng)};
    Tensor x = uniform_tensor({2, 3, 4}, rng);
    const Tensor w = uniform_tensor({2, 3, 4}, rng, false);
    const auto report =
        finite_diff_check([&] { return weighted_sum(adapter_forward(m, x), w); }, {x, m.w_down, m.b_down, m.w_up, m.b_up});
    EXPECT_LT(report.max_rel_error, 1e-5);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    Tensor x({2}, 1.0, true);
    NoGradGuard guard;
    Tensor y = mul(x, x);
    EXPECT_TRUE(y.is_leaf());
    EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiff, QuadraticIsExact) {
    Tensor x({2}, std::vector<double>{1, 2}, true);
    backward(sum(mul(x, x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4}));
    x.clear_grad();
    const auto report = finite_diff_check([&] { return sum(mul(x, x)); }, {x});
    ASSERT_EQ(report.inputs.size(), 1u);
    EXPECT_LT(std::abs(report.inputs[0].analytic - report.inputs[0].numeric), 1e-8);
    EXPECT_LT(report.max_rel_error, 1e-8);
}

TEST(FiniteDiff, FrozenInputExcluded) {
    Rng rng(2);
    Tensor a = uniform_tensor({2, 2}, rng, true);
    Tensor b = uniform_tensor({2, 2}, rng, false);
    const auto report = finite_diff_check([&] { return sum(matmul(a, b)); }, {a, b});
    ASSERT_EQ(report.excluded, std::vector<std::size_t>{1});
    ASSERT_EQ(report.inputs.size(), 1u);
    EXPECT_EQ(report.inputs[0].input, 0u);
    EXPECT_TRUE(report.passed);
}

TEST(FiniteDiff, DetectsWrongGradient) {
    // A backward rule that is off by a factor of two must fail the check.
    Tensor x({3}, std::vector<double>{0.5, -1, 2}, true);
    auto broken = [&] {
        return detail::make_result({1}, {x.data()[0] * x.data()[0] + x.data()[1] + x.data()[2]}, {x}, "broken",
                                   [x](std::span<const double> g) {
                                       auto& gx = detail::grad_buffer(x);
                                       gx[0] += g[0] * 4.0 * x.data()[0];
                                       gx[1] += g[0];
                                       gx[2] += g[0];
                                   });
    };
    EXPECT_FALSE(finite_diff_check(broken, {x}).passed);
}

TEST(Embedding, OutOfRangeIdIsDataError) {
    const std::vector<int> ids{0, 5};
    EXPECT_THROW((void)embedding(Tensor({4, 2}), ids, {2}), DataError);
}

// Every differentiable op against central differences on inputs in [-2, 2],
// 20 seeds each.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, AllOpsMatchFiniteDifferences) {
    Rng rng(static_cast<std::uint64_t>(GetParam()));
    auto check = [&](const char* name, const std::function<Tensor()>& f, std::initializer_list<Tensor> inputs) {
        const auto report = finite_diff_check(f, inputs);
        EXPECT_TRUE(report.passed) << name << " seed " << GetParam() << " rel " << report.max_rel_error;
    };
    Tensor a = uniform_tensor({3, 4}, rng), b = uniform_tensor({4, 5}, rng), bt = uniform_tensor({5, 4}, rng);
    const Tensor w35 = uniform_tensor({3, 5}, rng, false);
    check("matmul", [&] { return weighted_sum(matmul(a, b), w35); }, {a, b});
    check("matmul_nt", [&] { return weighted_sum(matmul_nt(a, bt), w35); }, {a, bt});

    Tensor x3 = uniform_tensor({2, 3, 4}, rng), y3 = uniform_tensor({2, 4, 3}, rng), z3 = uniform_tensor({2, 5, 4}, rng);
    const Tensor w23 = uniform_tensor({2, 3, 3}, rng, false), w25 = uniform_tensor({2, 3, 5}, rng, false);
    check("bmm", [&] { return weighted_sum(bmm(x3, y3), w23); }, {x3, y3});
    check("bmm_t", [&] { return weighted_sum(bmm(x3, z3, true), w25); }, {x3, z3});

    Tensor p = uniform_tensor({2, 3, 4}, rng), q = uniform_tensor({2, 3, 4}, rng), bias = uniform_tensor({4}, rng);
    const Tensor w = uniform_tensor({2, 3, 4}, rng, false);
    check("add", [&] { return weighted_sum(add(p, q), w); }, {p, q});
    check("add_broadcast", [&] { return weighted_sum(add(p, bias), w); }, {p, bias});
    check("sub", [&] { return weighted_sum(sub(p, q), w); }, {p, q});
    check("mul", [&] { return weighted_sum(mul(p, q), w); }, {p, q});
    check("scale", [&] { return weighted_sum(scale(p, -1.7), w); }, {p});
    check("gelu", [&] { return weighted_sum(gelu(p), w); }, {p});
    check("softmax_last", [&] { return weighted_sum(softmax(p, -1), w); }, {p});
    check("softmax_first", [&] { return weighted_sum(softmax(p, 0), w); }, {p});
    Tensor gain = uniform_tensor({4}, rng);
    check("layer_norm", [&] { return weighted_sum(layer_norm(p, gain, bias), w); }, {p, gain, bias});
    const Tensor w_r = uniform_tensor({6, 4}, rng, false);
    check("reshape", [&] { return weighted_sum(reshape(p, {6, 4}), w_r); }, {p});
    const Tensor w_p = uniform_tensor({4, 2, 3}, rng, false);
    check("permute", [&] { return weighted_sum(permute(p, {2, 0, 1}), w_p); }, {p});
    const Tensor w_t = uniform_tensor({4, 3}, rng, false);
    check("transpose", [&] { return weighted_sum(transpose(a), w_t); }, {a});
    const Tensor w_s = uniform_tensor({2, 4}, rng, false);
    check("select", [&] { return weighted_sum(select(p, 1, 2), w_s); }, {p});
    Tensor table = uniform_tensor({6, 4}, rng);
    const std::vector<int> ids{1, 5, 1, 0, 3, 2};
    const Tensor w_e = uniform_tensor({2, 3, 4}, rng, false);
    check("embedding", [&] { return weighted_sum(embedding(table, ids, {2, 3}), w_e); }, {table});
    check("sum", [&] { return sum(mul(p, p)); }, {p});
    check("mean", [&] { return mean(mul(p, q)); }, {p, q});
    check("detach", [&] { return sum(mul(p, detach(q))); }, {p});

    Tensor la = uniform_tensor({4, 3}, rng), lb = uniform_tensor({4, 3}, rng);
    const std::vector<int> labels{0, 2, 1, 2};
    check("cross_entropy", [&] { return cross_entropy(la, labels); }, {la});
    check("kl_divergence", [&] { return kl_divergence(la, lb); }, {la, lb});
    check("consistency_loss", [&] { return consistency_loss(la, lb, labels, false).total; }, {la, lb});
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(1, 21));

TEST(Properties, SoftmaxRowsSumToOneAndShiftInvariant) {
    for (int seed = 1; seed <= 20; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        Tensor z = uniform_tensor({5, 7}, rng, false, -30, 30);
        const Tensor s = softmax(z);
        for (std::size_t r = 0; r < 5; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                EXPECT_GE(s.data()[r * 7 + c], 0.0);
                total += s.data()[r * 7 + c];
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
        Tensor shifted = z.detach();
        for (std::size_t r = 0; r < 5; ++r)
            for (std::size_t c = 0; c < 7; ++c) shifted.mutable_data()[r * 7 + c] += 3.25 * static_cast<double>(r + 1);
        EXPECT_LT(adamix::testing::max_abs_diff(softmax(shifted), s), 1e-12);
    }
}

TEST(Properties, KlIsNonNegativeAndZeroOnEqualRows) {
    for (int seed = 1; seed <= 50; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const Tensor p = uniform_tensor({4, 5}, rng, false, -5, 5);
        const Tensor q = uniform_tensor({4, 5}, rng, false, -5, 5);
        EXPECT_GE(kl_divergence(p, q).item(), 0.0);
        EXPECT_GT(kl_divergence(p, q).item(), 0.0);
        Tensor shifted = p.detach();
        for (double& v : shifted.mutable_data()) v += 2.0;
        EXPECT_NEAR(kl_divergence(p, shifted).item(), 0.0, 1e-14);
        EXPECT_EQ(kl_divergence(p, p).item(), 0.0);
    }
}

TEST(Properties, IndependentTapesGiveBitIdenticalGradients) {
    auto run = [] {
        Rng rng(99);
        Tensor a = uniform_tensor({4, 6}, rng), b = uniform_tensor({6, 3}, rng);
        const std::vector<int> labels{0, 1, 2, 0};
        backward(cross_entropy(gelu(matmul(a, b)), labels));
        return std::make_pair(a.values(), std::vector<double>(a.grad().begin(), a.grad().end()));
    };
    EXPECT_EQ(run(), run());
}

TEST(Properties, GradAbsentOnUntrackedTensorsAfterBackward) {
    Rng rng(4);
    Tensor a = uniform_tensor({2, 2}, rng, true), b = uniform_tensor({2, 2}, rng, false);
    backward(sum(mul(a, b)));
    EXPECT_FALSE(b.has_grad());
    ASSERT_TRUE(a.has_grad());
    EXPECT_EQ(a.grad().size(), a.numel());
}
