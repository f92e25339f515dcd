#include <gtest/gtest.h>

#include <array>
#include <limits>
#include <cmath>
#include <vector>

#include "fec/tape.hpp"
#include "fec/tensor.hpp"
#include "test_util.hpp"

using fec::GridShape;
using fec::Rng;
using fec::Tape;
using fec::Tensor;
using fec::testing::check_gradients;
using fec::testing::random_tensor;
using fec::testing::rel_err;

using T64 = Tensor<double>;
using Tp = Tape<double>;

namespace {
constexpr double kOpTol = 1e-5;
}

TEST(Tensor, ConstructValidatesCount) {
    EXPECT_NO_THROW(T64({2, 2}, {1, 2, 3, 4}));
    try {
        T64 t({2, 3}, {1, 2, 3, 4});
        FAIL() << "expected ShapeError";
    } catch (const fec::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    }
}

TEST(Tape, MatmulIdentity) {
    Tp tape;
    auto a = tape.leaf(T64({2, 2}, {1, 2, 3, 4}));
    auto eye = tape.leaf(T64({2, 2}, {1, 0, 0, 1}));
    auto c = tape.matmul(a, eye);
    EXPECT_EQ(tape.value(c).data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Tape, MatmulAgainstLoops) {
    Rng rng(7);
    auto a = random_tensor<double>({3, 4}, rng);
    auto b = random_tensor<double>({4, 5}, rng);
    Tp tape;
    auto c = tape.matmul(tape.leaf(a), tape.leaf(b));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) {
            double want = 0;
            for (int k = 0; k < 4; ++k) want += a.at(i, k) * b.at(k, j);
            EXPECT_NEAR(tape.value(c).at(i, j), want, 1e-12);
        }
}

TEST(Tape, MatmulShapeErrorNamesShapes) {
    Tp tape;
    auto a = tape.leaf(T64::zeros({2, 3}));
    auto b = tape.leaf(T64::zeros({4, 5}));
    try {
        tape.matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const fec::ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
}

TEST(Tape, MatmulGradient) {
    Rng rng(11);
    auto rep = check_gradients(
        {random_tensor<double>({3, 4}, rng), random_tensor<double>({4, 2}, rng)},
        [](Tp& t, const std::vector<Tp::Var>& in) {
            return t.sum_all(t.matmul(in[0], in[1]));
        });
    EXPECT_LT(rep.max_rel, kOpTol);
}

TEST(Tape, SigmoidAtZeroIsHalf) {
    Tp tape;
    auto y = tape.sigmoid(tape.leaf(T64::scalar(0.0)));
    EXPECT_DOUBLE_EQ(tape.value(y).scalar_value(), 0.5);
}

TEST(Tape, SigmoidExtremeInputsStayFinite) {
    Tp tape;
    auto y = tape.sigmoid(tape.leaf(T64({1, 2}, {1000.0, -1000.0})));
    EXPECT_DOUBLE_EQ(tape.value(y).data[0], 1.0);
    EXPECT_DOUBLE_EQ(tape.value(y).data[1], 0.0);
}

TEST(Tape, ElementwiseGradients) {
    Rng rng(13);
    auto x = random_tensor<double>({2, 3}, rng);
    for (int which = 0; which < 3; ++which) {
        auto rep = check_gradients({x}, [which](Tp& t, const std::vector<Tp::Var>& in) {
            Tp::Var y;
            if (which == 0) y = t.sigmoid(in[0]);
            if (which == 1) y = t.gelu(in[0]);
            if (which == 2) y = t.mul(in[0], in[0]);
            return t.sum_all(y);
        });
        EXPECT_LT(rep.max_rel, kOpTol) << "op " << which;
    }
}

TEST(Tape, AddBroadcastRow) {
    Tp tape;
    auto a = tape.leaf(T64({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto b = tape.leaf(T64({1, 3}, {10, 20, 30}));
    auto c = tape.add(a, b);
    EXPECT_EQ(tape.value(c).data, (std::vector<double>{11, 22, 33, 14, 25, 36}));
}

TEST(Tape, AddBroadcastGradientReduces) {
    Rng rng(17);
    auto rep = check_gradients(
        {random_tensor<double>({3, 4}, rng), random_tensor<double>({1, 4}, rng),
         random_tensor<double>({3, 1}, rng)},
        [](Tp& t, const std::vector<Tp::Var>& in) {
            return t.sum_all(t.mul(t.add(in[0], in[1]), in[2]));
        });
    EXPECT_LT(rep.max_rel, kOpTol);
}

TEST(Tape, AddShapeMismatchThrows) {
    Tp tape;
    auto a = tape.leaf(T64::zeros({2, 3}));
    auto b = tape.leaf(T64::zeros({2, 2}));
    EXPECT_THROW(tape.add(a, b), fec::ShapeError);
}

TEST(Tape, SumOfSquaresGradient) {
    Tp tape;
    fec::Param<double> x("x", T64({1, 3}, {1, 2, 3}));
    auto vx = tape.leaf(x);
    auto loss = tape.sum_all(tape.mul(vx, vx));
    tape.backward(loss);
    EXPECT_EQ(tape.grad(vx).data, (std::vector<double>{2, 4, 6}));
}

TEST(Tape, UntouchedLeafHasZeroGradient) {
    Tp tape;
    auto x = tape.leaf(T64({1, 2}, {1, 2}), true);
    auto y = tape.leaf(T64({1, 2}, {3, 4}), true);
    tape.backward(tape.sum_all(x));
    EXPECT_EQ(tape.grad(y).data, (std::vector<double>{0, 0}));
}

TEST(Tape, RepeatedBackwardAccumulatesLeafGradients) {
    Tp tape;
    auto x = tape.leaf(T64({1, 2}, {3, 5}), true);
    auto loss = tape.sum_all(tape.mul(x, x));
    tape.backward(loss);
    tape.backward(loss);
    EXPECT_EQ(tape.grad(x).data, (std::vector<double>{12, 20}));
}

TEST(Tape, NonScalarRootThrows) {
    Tp tape;
    auto x = tape.leaf(T64::zeros({2, 2}), true);
    EXPECT_THROW(tape.backward(x), fec::ContractError);
}

TEST(Tape, ScaleShiftGradient) {
    Rng rng(19);
    auto rep = check_gradients(
        {random_tensor<double>({2, 3}, rng), T64::scalar(1.3), T64::scalar(-0.2)},
        [](Tp& t, const std::vector<Tp::Var>& in) {
            return t.sum_all(t.scale_shift(in[0], in[1], in[2]));
        });
    EXPECT_LT(rep.max_rel, kOpTol);
}

TEST(Tape, MeanOfConstantIsConstant) {
    Tp tape;
    auto x = tape.leaf(T64::full({3, 4}, 2.5));
    EXPECT_DOUBLE_EQ(tape.value(tape.mean_all(x)).scalar_value(), 2.5);
    EXPECT_DOUBLE_EQ(tape.value(tape.mean(x, 0)).at(0, 1), 2.5);
    EXPECT_DOUBLE_EQ(tape.value(tape.mean(x, 1)).at(2, 0), 2.5);
}

TEST(Tape, SumAxisGradient) {
    Rng rng(23);
    auto x = random_tensor<double>({3, 4}, rng);
    for (int axis = 0; axis < 2; ++axis) {
        auto rep = check_gradients({x}, [axis](Tp& t, const std::vector<Tp::Var>& in) {
            auto s = t.sum(in[0], axis);
            return t.sum_all(t.mul(s, s));
        });
        EXPECT_LT(rep.max_rel, kOpTol) << "axis " << axis;
    }
}

TEST(Tape, EmptyAxisThrowsDomainError) {
    Tp tape;
    auto x = tape.leaf(T64::zeros({0, 3}));
    EXPECT_THROW(tape.sum(x, 0), fec::DomainError);
    EXPECT_THROW(tape.max_index(x, 0), fec::DomainError);
}

TEST(Tape, MaxIndexRowsAndTies) {
    Tp tape;
    auto x = tape.leaf(T64({2, 3}, {1, 5, 3, 9, 2, 9}));
    auto idx = tape.max_index(x, 1);
    EXPECT_EQ(tape.value(idx).data, (std::vector<double>{1, 0}));
    auto col = tape.max_index(x, 0);
    EXPECT_EQ(tape.value(col).data, (std::vector<double>{1, 0, 1}));
}

TEST(Tape, MaxIndexIsGradientBarrier) {
    Tp tape;
    auto x = tape.leaf(T64({1, 3}, {1, 5, 3}), true);
    auto idx = tape.max_index(x, 1);
    EXPECT_FALSE(tape.requires_grad(idx));
    // Route the index through arithmetic; x must still see zero gradient.
    auto loss = tape.sum_all(tape.scale_const(idx, 2.0));
    tape.backward(loss);
    EXPECT_EQ(tape.grad(x).data, (std::vector<double>{0, 0, 0}));
}

TEST(Tape, GatherRowsValuesAndGradient) {
    Tp tape;
    fec::Param<double> src("src", T64({3, 2}, {1, 2, 3, 4, 5, 6}));
    auto vs = tape.leaf(src);
    const std::array<int, 4> idx = {2, 0, 2, 1};
    auto g = tape.gather_rows(vs, idx);
    EXPECT_EQ(tape.value(g).data, (std::vector<double>{5, 6, 1, 2, 5, 6, 3, 4}));
    tape.backward(tape.sum_all(g));
    // Row 2 was gathered twice, so its gradient doubles.
    EXPECT_EQ(tape.grad(vs).data, (std::vector<double>{1, 1, 1, 1, 2, 2}));
}

TEST(Tape, SelectPerRowValuesAndGradient) {
    Tp tape;
    auto m = tape.leaf(T64({2, 3}, {1, 2, 3, 4, 5, 6}), true);
    const std::array<int, 2> idx = {2, 0};
    auto s = tape.select_per_row(m, idx);
    EXPECT_EQ(tape.value(s).data, (std::vector<double>{3, 4}));
    tape.backward(tape.sum_all(s));
    EXPECT_EQ(tape.grad(m).data, (std::vector<double>{0, 0, 1, 1, 0, 0}));
}

TEST(Tape, AdaptivePoolExactOnDivisibleGrid) {
    Tp tape;
    T64 x = T64::zeros({16, 1});
    for (int i = 0; i < 16; ++i) x.data[i] = i + 1;
    auto y = tape.adaptive_avg_pool(tape.leaf(x), {4, 4}, {2, 2});
    EXPECT_EQ(tape.value(y).data, (std::vector<double>{3.5, 5.5, 11.5, 13.5}));
}

TEST(Tape, AdaptivePoolIdentityWhenSameSize) {
    Rng rng(29);
    auto x = random_tensor<double>({6, 3}, rng);
    Tp tape;
    auto y = tape.adaptive_avg_pool(tape.leaf(x), {2, 3}, {2, 3});
    EXPECT_EQ(tape.value(y).data, x.data);
}

TEST(Tape, AdaptivePoolOverlappingWindowsGradient) {
    Rng rng(31);
    // 3x3 -> 2x2 makes windows overlap on the middle row/column.
    auto rep = check_gradients({random_tensor<double>({9, 2}, rng)},
                               [](Tp& t, const std::vector<Tp::Var>& in) {
                                   auto y = t.adaptive_avg_pool(in[0], {3, 3}, {2, 2});
                                   return t.sum_all(t.mul(y, y));
                               });
    EXPECT_LT(rep.max_rel, kOpTol);
}

TEST(Tape, AdaptivePoolRejectsUpsampling) {
    Tp tape;
    auto x = tape.leaf(T64::zeros({4, 1}));
    EXPECT_THROW(tape.adaptive_avg_pool(x, {2, 2}, {3, 3}), fec::ShapeError);
}

TEST(Tape, PatchifyOrderingAndGradient) {
    Tp tape;
    // [C=2,H=2,W=2], patch 2 -> one token laid out (c, di, dj).
    T64 img({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto y = tape.patchify(tape.leaf(img), 2);
    EXPECT_EQ(tape.value(y).shape, (std::vector<std::int64_t>{1, 8}));
    EXPECT_EQ(tape.value(y).data, (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8}));

    Rng rng(37);
    T64 big = T64::zeros({3, 4, 4});
    fec::fill_uniform(big, rng, -1.0, 1.0);
    auto rep = check_gradients({big}, [](Tp& t, const std::vector<Tp::Var>& in) {
        auto p = t.patchify(in[0], 2);
        return t.sum_all(t.mul(p, p));
    });
    EXPECT_LT(rep.max_rel, kOpTol);
}

TEST(Tape, PatchifyRejectsIndivisible) {
    Tp tape;
    auto img = tape.leaf(T64::zeros({1, 5, 4}));
    EXPECT_THROW(tape.patchify(img, 2), fec::ConfigError);
}

TEST(Tape, LayerNormConstantRowGivesBeta) {
    Tp tape;
    auto x = tape.leaf(T64::full({2, 4}, 3.0));
    auto gamma = tape.leaf(T64::full({1, 4}, 2.0));
    auto beta = tape.leaf(T64({1, 4}, {0.1, 0.2, 0.3, 0.4}));
    auto y = tape.layer_norm(x, gamma, beta);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(tape.value(y).at(i, j), 0.1 * (j + 1), 1e-12);
}

TEST(Tape, LayerNormGradient) {
    Rng rng(41);
    auto rep = check_gradients(
        {random_tensor<double>({3, 5}, rng), random_tensor<double>({1, 5}, rng, 0.5, 1.5),
         random_tensor<double>({1, 5}, rng)},
        [](Tp& t, const std::vector<Tp::Var>& in) {
            auto y = t.layer_norm(in[0], in[1], in[2]);
            return t.sum_all(t.mul(y, y));
        },
        1e-5);
    EXPECT_LT(rep.max_rel, 1e-4);
}

TEST(Tape, SoftmaxCrossEntropyUniformLogitsIsLogK) {
    Tp tape;
    auto z = tape.leaf(T64::zeros({2, 5}));
    const std::array<int, 2> labels = {0, 3};
    auto loss = tape.softmax_cross_entropy(z, labels);
    EXPECT_NEAR(tape.value(loss).scalar_value(), std::log(5.0), 1e-12);
}

TEST(Tape, SoftmaxCrossEntropyGradient) {
    Rng rng(43);
    auto z = random_tensor<double>({4, 6}, rng, -2.0, 2.0);
    const std::array<int, 4> labels = {1, 5, 0, 2};
    auto rep = check_gradients({z}, [&labels](Tp& t, const std::vector<Tp::Var>& in) {
        return t.softmax_cross_entropy(in[0], labels);
    });
    EXPECT_LT(rep.max_rel, kOpTol);
}

TEST(Tape, SoftmaxCrossEntropyExtremeLogitsStayFinite) {
    Tp tape;
    auto z = tape.leaf(T64({1, 3}, {1000.0, -1000.0, 0.0}));
    const std::array<int, 1> labels = {0};
    auto loss = tape.softmax_cross_entropy(z, labels);
    EXPECT_NEAR(tape.value(loss).scalar_value(), 0.0, 1e-12);
}

TEST(Tape, SoftmaxCrossEntropyRejectsBadLabel) {
    Tp tape;
    auto z = tape.leaf(T64::zeros({1, 3}));
    const std::array<int, 1> labels = {3};
    EXPECT_THROW(tape.softmax_cross_entropy(z, labels), fec::ArgumentError);
}

TEST(Tape, ForwardIsDeterministic) {
    auto run = [] {
        Rng rng(99);
        auto a = random_tensor<double>({8, 8}, rng);
        auto b = random_tensor<double>({8, 8}, rng);
        Tp tape;
        auto y = tape.sigmoid(tape.matmul(tape.leaf(a), tape.leaf(b)));
        return tape.value(tape.sum_all(y)).scalar_value();
    };
    const double first = run();
    for (int i = 0; i < 3; ++i) EXPECT_EQ(run(), first);
}

TEST(Tape, NanTraceNamesOffendingOp) {
    Tp tape;
    tape.set_nan_trace(true);
    // inf is fine at the leaf; inf * 0 first goes NaN inside scale_const.
    auto x = tape.leaf(T64::scalar(std::numeric_limits<double>::infinity()));
    try {
        tape.scale_const(x, 0.0);
        FAIL() << "expected NumericError";
    } catch (const fec::NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("scale_const"), std::string::npos);
    }
}

TEST(Tape, NanTraceCatchesNanAtLeaf) {
    Tp tape;
    tape.set_nan_trace(true);
    EXPECT_THROW(tape.leaf(T64::scalar(std::nan(""))), fec::NumericError);
}

TEST(Tape, ParamGradAccumulation) {
    fec::Param<double> w("w", T64({1, 2}, {2.0, 3.0}));
    Tp tape;
    auto vw = tape.leaf(w);
    tape.backward(tape.sum_all(tape.mul(vw, vw)));
    tape.accumulate_param_grads(0.5);
    EXPECT_EQ(w.grad.data, (std::vector<double>{2.0, 3.0}));
    w.zero_grad();
    EXPECT_EQ(w.grad.data, (std::vector<double>{0.0, 0.0}));
}
