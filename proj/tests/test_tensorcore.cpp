#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "tsfusion/checkpoint.hpp"
#include "tsfusion/gradcheck.hpp"
#include "tsfusion/ops.hpp"

using namespace tsfusion;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

// Values bounded away from zero, so ReLU kinks are never straddled by the
// finite-difference probe.
Tensor away_from_zero(Shape shape, Rng& rng) {
    Tensor t = random_tensor(shape, rng, 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (auto& x : t.mutable_data())
        if (flip(rng)) x = -x;
    return t;
}

// Contracting with fixed random weights gives every output coordinate a
// distinct gradient.
Tensor weighted_sum(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

constexpr double kPrimitiveTol = 1e-6;

} // namespace

TEST(Tape, SharedInputAccumulatesGradient) {
    Tensor x({3}, {1.0, -2.0, 0.5}, true);
    Tape tape;
    {
        TapeScope s(tape);
        tape.backward(sum(mul(x, x)));
    }
    ASSERT_TRUE(x.has_grad());
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
}

TEST(Tape, ConstantsReceiveNoGradient) {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor c({2}, {3.0, 4.0});
    Tape tape;
    {
        TapeScope s(tape);
        tape.backward(sum(mul(x, c)));
    }
    EXPECT_FALSE(c.has_grad());
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Tape, NonScalarLossIsRejected) {
    Tensor x({2}, {1.0, 2.0}, true);
    Tape tape;
    TapeScope s(tape);
    Tensor y = scale(x, 2.0);
    EXPECT_THROW(tape.backward(y), DimensionError);
}

TEST(Tape, LossFromAnotherTapeIsRejected) {
    Tensor x({2}, {1.0, 2.0}, true);
    Tape a, b;
    Tensor loss;
    {
        TapeScope s(a);
        loss = sum(x);
    }
    EXPECT_THROW(b.backward(loss), Error);
}

TEST(Tape, NoGradScopeRecordsNothing) {
    Tensor x({2}, {1.0, 2.0}, true);
    Tape tape;
    TapeScope s(tape);
    {
        NoGradScope ng;
        Tensor y = sum(mul(x, x));
        (void)y;
    }
    EXPECT_EQ(tape.size(), 0u);
}

TEST(Ops, MatmulMatchesLoopOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::size_t> dim(1, 6);
        const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
        Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        Tensor c = matmul(a, b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double ref = 0.0;
                for (std::size_t p = 0; p < k; ++p) ref += a.at(i, p) * b.at(p, j);
                EXPECT_NEAR(c.at(i, j), ref, 1e-12);
            }
    }
}

TEST(Ops, MatmulShapeMismatchThrows) {
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Ops, ReshapeRejectsDifferentCount) {
    EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4}), DimensionError);
}

TEST(Ops, SoftmaxMatchesDirectFormula) {
    Rng rng(2);
    Tensor x = random_tensor({4, 5}, rng, -3.0, 3.0);
    Tensor p = softmax_rows(x);
    for (std::size_t i = 0; i < 4; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 5; ++j) z += std::exp(x.at(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            EXPECT_NEAR(p.at(i, j), std::exp(x.at(i, j)) / z, 1e-14);
            total += p.at(i, j);
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
    Tensor x({1, 3}, {1000.0, 1001.0, 999.0});
    Tensor p = softmax_rows(x);
    for (double v : p.data()) EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
}

TEST(Ops, SoftmaxMaskZeroesEntriesAndRejectsFullMask) {
    Tensor x({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    Mask m{0, 1, 0, 0, 0, 0};
    Tensor p = softmax_rows(x, &m);
    EXPECT_EQ(p.at(0, 1), 0.0);
    EXPECT_NEAR(p.at(0, 0) + p.at(0, 2), 1.0, 1e-12);
    Mask full{1, 1, 1, 0, 0, 0};
    EXPECT_THROW(softmax_rows(x, &full), NumericError);
}

TEST(Ops, CausalConvMatchesLoopOracle) {
    Rng rng(3);
    Tensor x = random_tensor({2, 3, 7}, rng);
    Tensor k = random_tensor({4, 3, 3}, rng);
    Tensor y = causal_conv1d(x, k);
    ASSERT_EQ(y.shape(), (Shape{2, 4, 5}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
            for (std::size_t t = 0; t < 5; ++t) {
                double ref = 0.0;
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t w = 0; w < 3; ++w) ref += k.at(o, c, w) * x.at(n, c, t + w);
                EXPECT_NEAR(y.at(n, o, t), ref, 1e-12);
            }
}

TEST(Ops, CausalConvRejectsShortHistory) {
    EXPECT_THROW(causal_conv1d(Tensor::zeros({1, 1, 2}), Tensor::zeros({1, 1, 3})), InsufficientHistoryError);
}

TEST(Ops, BatchNormNormalizesColumnsAndUpdatesRunningStats) {
    Rng rng(4);
    Tensor x = random_tensor({6, 3}, rng, -2.0, 5.0);
    BatchNormState st(3);
    Tensor y = batch_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3}), st, NormMode::train, 1e-300);
    for (std::size_t j = 0; j < 3; ++j) {
        double mu = 0.0, var = 0.0, xm = 0.0, xv = 0.0;
        for (std::size_t i = 0; i < 6; ++i) xm += x.at(i, j) / 6.0;
        for (std::size_t i = 0; i < 6; ++i) xv += (x.at(i, j) - xm) * (x.at(i, j) - xm) / 6.0;
        for (std::size_t i = 0; i < 6; ++i) mu += y.at(i, j) / 6.0;
        for (std::size_t i = 0; i < 6; ++i) var += (y.at(i, j) - mu) * (y.at(i, j) - mu) / 6.0;
        EXPECT_NEAR(mu, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-12);
        EXPECT_NEAR(st.running_mean[j], 0.1 * xm, 1e-12);
        EXPECT_NEAR(st.running_var[j], 0.9 + 0.1 * xv, 1e-12);
    }
}

TEST(Ops, BatchNormFrozenAndEvalLeaveRunningStats) {
    Rng rng(5);
    Tensor x = random_tensor({5, 2}, rng);
    BatchNormState st(2);
    st.running_mean = {0.3, -0.2};
    st.running_var = {2.0, 0.5};
    batch_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), st, NormMode::train_frozen);
    Tensor e = batch_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), st, NormMode::eval, 0.0);
    EXPECT_EQ(st.running_mean, (std::vector<double>{0.3, -0.2}));
    EXPECT_EQ(st.running_var, (std::vector<double>{2.0, 0.5}));
    EXPECT_NEAR(e.at(0, 0), (x.at(0, 0) - 0.3) / std::sqrt(2.0), 1e-14);
    EXPECT_NEAR(e.at(4, 1), (x.at(4, 1) + 0.2) / std::sqrt(0.5), 1e-14);
}

TEST(Ops, LayerNormNormalizesRows) {
    Rng rng(6);
    Tensor x = random_tensor({4, 7}, rng, -3.0, 3.0);
    Tensor y = layer_norm(x, Tensor::full({7}, 1.0), Tensor::zeros({7}), 1e-300);
    for (std::size_t i = 0; i < 4; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 7; ++j) mu += y.at(i, j) / 7.0;
        for (std::size_t j = 0; j < 7; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu) / 7.0;
        EXPECT_NEAR(mu, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-12);
    }
}

TEST(Ops, DropoutIsIdentityWhenInactiveAndUnbiasedWhenActive) {
    Rng rng(7);
    Tensor x = Tensor::full({200, 100}, 2.0);
    EXPECT_TRUE(dropout(x, 0.7, rng, false).same_storage(x));
    EXPECT_TRUE(dropout(x, 1.0, rng, true).same_storage(x));
    Tensor y = dropout(x, 0.7, rng, true);
    double mean = 0.0;
    std::size_t zeros = 0;
    for (double v : y.data()) {
        mean += v / static_cast<double>(y.numel());
        zeros += v == 0.0;
        if (v != 0.0) EXPECT_NEAR(v, 2.0 / 0.7, 1e-12);
    }
    EXPECT_NEAR(mean, 2.0, 0.05);
    EXPECT_NEAR(static_cast<double>(zeros) / static_cast<double>(y.numel()), 0.3, 0.01);
    EXPECT_THROW(dropout(x, 0.0, rng, true), ConfigError);
    EXPECT_THROW(dropout(x, 1.5, rng, true), ConfigError);
}

TEST(Ops, GatherRowsCopiesSelectedRows) {
    Tensor table({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor g = gather_rows(table, {2, 0, 2});
    EXPECT_EQ(g.vec(), (std::vector<double>{5, 6, 1, 2, 5, 6}));
}

TEST(Ops, MseLossIsMeanOfSquares) {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {0, 0, 0, 0});
    EXPECT_DOUBLE_EQ(mse_loss(a, b).item(), 7.5);
}

// ---------------------------------------------------------------------------
// Gradient checks for every primitive

class PrimitiveGrad : public ::testing::Test {
protected:
    Rng rng{42};
};

TEST_F(PrimitiveGrad, Matmul) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng), w = random_tensor({3, 2}, rng);
    auto r = grad_check_many([&] { return weighted_sum(matmul(a, b), w); }, {a, b});
    EXPECT_LT(r.max_rel_error, kPrimitiveTol);
}

TEST_F(PrimitiveGrad, AddSubMul) {
    Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng), w = random_tensor({3, 3}, rng);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(add(a, b), w); }, {a, b}).max_rel_error, kPrimitiveTol);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(sub(a, b), w); }, {a, b}).max_rel_error, kPrimitiveTol);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(mul(a, b), w); }, {a, b}).max_rel_error, kPrimitiveTol);
}

TEST_F(PrimitiveGrad, AffineScaleOneMinus) {
    Tensor a = random_tensor({5}, rng), w = random_tensor({5}, rng);
    EXPECT_LT(grad_check([&](const Tensor& x) { return weighted_sum(affine(x, -1.7, 0.3), w); }, a), kPrimitiveTol);
    EXPECT_LT(grad_check([&](const Tensor& x) { return weighted_sum(one_minus(x), w); }, a), kPrimitiveTol);
}

TEST_F(PrimitiveGrad, AddBias) {
    Tensor x = random_tensor({4, 3}, rng), b = random_tensor({3}, rng), w = random_tensor({4, 3}, rng);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(add_bias(x, b), w); }, {x, b}).max_rel_error, kPrimitiveTol);
}

TEST_F(PrimitiveGrad, SigmoidRelu) {
    Tensor x = away_from_zero({4, 4}, rng), w = random_tensor({4, 4}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(sigmoid(t), w); }, x), kPrimitiveTol);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(relu(t), w); }, x), kPrimitiveTol);
}

TEST_F(PrimitiveGrad, SumMean) {
    Tensor x = random_tensor({3, 2}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return sum(t); }, x), kPrimitiveTol);
    EXPECT_LT(grad_check([&](const Tensor& t) { return mean(t); }, x), kPrimitiveTol);
}

TEST_F(PrimitiveGrad, SoftmaxPlainAndMasked) {
    Tensor x = random_tensor({3, 4}, rng, -2.0, 2.0), w = random_tensor({3, 4}, rng);
    Mask m{0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0};
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(softmax_rows(t), w); }, x), kPrimitiveTol);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(softmax_rows(t, &m), w); }, x), kPrimitiveTol);
}

TEST_F(PrimitiveGrad, TransposeReshapeConcatSlice) {
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng);
    Tensor w1 = random_tensor({3, 2}, rng), w2 = random_tensor({6}, rng), w3 = random_tensor({2, 5}, rng);
    Tensor w4 = random_tensor({2, 2}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(transpose(t), w1); }, a), kPrimitiveTol);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(reshape(t, {6}), w2); }, a), kPrimitiveTol);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(concat({a, b}, 1), w3); }, {a, b}).max_rel_error,
              kPrimitiveTol);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(slice(t, 1, 1, 3), w4); }, a), kPrimitiveTol);
}

TEST_F(PrimitiveGrad, CausalConvAndChannelMix) {
    Tensor x = random_tensor({2, 3, 6}, rng), k = random_tensor({2, 3, 3}, rng), w = random_tensor({2, 2, 4}, rng);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(causal_conv1d(x, k), w); }, {x, k}).max_rel_error,
              kPrimitiveTol);
    Tensor m = random_tensor({3, 4}, rng), w2 = random_tensor({2, 4, 6}, rng);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(mix_channels(x, m), w2); }, {x, m}).max_rel_error,
              kPrimitiveTol);
}

TEST_F(PrimitiveGrad, GatherRows) {
    Tensor table = random_tensor({4, 3}, rng), w = random_tensor({5, 3}, rng);
    std::vector<std::size_t> idx{3, 0, 3, 1, 1};
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(gather_rows(t, idx), w); }, table), kPrimitiveTol);
}

TEST_F(PrimitiveGrad, BatchNormAllModes) {
    Tensor x = random_tensor({5, 3}, rng, -1.0, 2.0), g = random_tensor({3}, rng, 0.5, 1.5),
           b = random_tensor({3}, rng), w = random_tensor({5, 3}, rng);
    for (NormMode mode : {NormMode::train, NormMode::train_frozen, NormMode::eval}) {
        BatchNormState st(3);
        st.running_mean = {0.1, 0.2, -0.3};
        st.running_var = {1.2, 0.8, 1.1};
        auto r = grad_check_many(
            [&] {
                BatchNormState local = st;
                return weighted_sum(batch_norm(x, g, b, local, mode), w);
            },
            {x, g, b});
        EXPECT_LT(r.max_rel_error, kPrimitiveTol) << "mode " << static_cast<int>(mode);
    }
}

TEST_F(PrimitiveGrad, LayerNorm) {
    Tensor x = random_tensor({3, 5}, rng, -2.0, 2.0), g = random_tensor({5}, rng, 0.5, 1.5), b = random_tensor({5}, rng),
           w = random_tensor({3, 5}, rng);
    EXPECT_LT(grad_check_many([&] { return weighted_sum(layer_norm(x, g, b), w); }, {x, g, b}).max_rel_error,
              kPrimitiveTol);
}

TEST_F(PrimitiveGrad, DropoutWithFixedMask) {
    Tensor x = random_tensor({4, 4}, rng), w = random_tensor({4, 4}, rng);
    EXPECT_LT(grad_check(
                  [&](const Tensor& t) {
                      Rng fixed(9);
                      return weighted_sum(dropout(t, 0.6, fixed, true), w);
                  },
                  x),
              kPrimitiveTol);
}

TEST_F(PrimitiveGrad, MseLoss) {
    Tensor a = random_tensor({3, 2}, rng), b = random_tensor({3, 2}, rng);
    EXPECT_LT(grad_check_many([&] { return mse_loss(a, b); }, {a, b}).max_rel_error, kPrimitiveTol);
}

TEST(GradCheck, ReportsNonFiniteLoss) {
    Tensor x({1}, {0.0});
    EXPECT_THROW(grad_check([](const Tensor& t) { return sum(scale(t, std::nan(""))); }, x), NumericError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsBitIdentical) {
    Rng rng(11);
    NamedTensors in{{"a", random_tensor({2, 3}, rng)}, {"layer.b", random_tensor({4}, rng)},
                    {"s", Tensor::scalar(-0.0)}};
    auto path = std::filesystem::temp_directory_path() / "tsfusion_ckpt_roundtrip.bin";
    save_checkpoint(path, in);
    auto out = load_checkpoint(path);
    ASSERT_EQ(out.size(), in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        EXPECT_EQ(out[i].first, in[i].first);
        EXPECT_EQ(out[i].second.shape(), in[i].second.shape());
        EXPECT_EQ(std::memcmp(out[i].second.data().data(), in[i].second.data().data(), in[i].second.numel() * 8), 0);
    }
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
    auto path = std::filesystem::temp_directory_path() / "tsfusion_ckpt_bad.bin";
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE1234";
    }
    EXPECT_THROW(load_checkpoint(path), DataError);
    save_checkpoint(path, {{"w", Tensor::full({8}, 1.0)}});
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
    EXPECT_THROW(load_checkpoint(path), DataError);
    std::filesystem::remove(path);
}
