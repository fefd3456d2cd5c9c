#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tsfusion/gradcheck.hpp"
#include "tsfusion/graph.hpp"
#include "tsfusion/tse.hpp"

using namespace tsfusion;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

double sigmoid_ref(double v) { return 1.0 / (1.0 + std::exp(-v)); }

std::vector<double> random_graph(std::size_t n, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (u(rng) < 0.4) a[i * n + j] = a[j * n + i] = 0.1 + 0.9 * u(rng);
    return a;
}

Tensor line_normalized(std::size_t n) {
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i + 1 < n; ++i) a[i * n + i + 1] = a[(i + 1) * n + i] = 1.0;
    return Tensor({n, n}, normalize_adjacency(a, n));
}

} // namespace

TEST(TemporalGate, MatchesLoopOracle) {
    Rng rng(200);
    std::uniform_int_distribution<std::size_t> nodes(1, 8), ch(1, 4), kw(1, 3);
    for (int trial = 0; trial < 120; ++trial) {
        const std::size_t n = nodes(rng), cin = ch(rng), cout = ch(rng), k = kw(rng), T = k + 4;
        Tensor x = random_tensor({n, cin, T}, rng), p = random_tensor({cout, cin, k}, rng), q = random_tensor({cout, cin, k}, rng);
        Tensor y = temporal_gate(x, p, q);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t t = 0; t + k <= T; ++t) {
                    double a = 0.0, b = 0.0;
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t w = 0; w < k; ++w) {
                            a += p.at(o, c, w) * x.at(i, c, t + w);
                            b += q.at(o, c, w) * x.at(i, c, t + w);
                        }
                    ASSERT_NEAR(y.at(i, o, t), a * sigmoid_ref(b), 1e-12);
                }
    }
}

TEST(TemporalGate, MismatchedKernelsThrow) {
    EXPECT_THROW(temporal_gate(Tensor::zeros({1, 2, 5}), Tensor::zeros({2, 2, 3}), Tensor::zeros({2, 2, 2})),
                 DimensionError);
}

TEST(TemporalGate, OutputDependsOnlyOnPastAndPresent) {
    Rng rng(201);
    Tensor x = random_tensor({2, 2, 10}, rng), p = random_tensor({3, 2, 3}, rng), q = random_tensor({3, 2, 3}, rng);
    Tensor base = temporal_gate(x, p, q);
    for (std::size_t s = 0; s < 10; ++s) {
        Tensor xp = x.detach();
        xp.mutable_data()[x.dim(2) * 1 + s] += 1.0;  // node 0, channel 1, time s
        Tensor y = temporal_gate(xp, p, q);
        // Output t covers input times t..t+2; it ends before s when t + 2 < s.
        for (std::size_t t = 0; t < base.dim(2); ++t) {
            const bool affected = t <= s && s <= t + 2;
            for (std::size_t o = 0; o < 3; ++o) {
                if (!affected) EXPECT_EQ(y.at(0, o, t), base.at(0, o, t));
            }
        }
    }
}

TEST(GraphConv, MatchesLoopOracle) {
    Rng rng(202);
    std::uniform_int_distribution<std::size_t> nodes(1, 8), ch(1, 4), steps(1, 5);
    for (int trial = 0; trial < 120; ++trial) {
        const std::size_t n = nodes(rng), cin = ch(rng), cout = ch(rng), T = steps(rng);
        auto a = random_graph(n, rng);
        auto nrm = normalize_adjacency(a, n);
        Tensor h = random_tensor({n, cin, T}, rng), w = random_tensor({cin, cout}, rng);
        Tensor y = graph_conv(h, Tensor({n, n}, nrm), w);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t t = 0; t < T; ++t) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        for (std::size_t c = 0; c < cin; ++c) acc += nrm[i * n + j] * h.at(j, c, t) * w.at(c, o);
                    ASSERT_NEAR(y.at(i, o, t), std::max(0.0, acc), 1e-12);
                }
    }
}

TEST(GraphConv, ChannelMismatchNamesBothShapes) {
    try {
        graph_conv(Tensor::zeros({2, 3, 4}), Tensor::eye(2), Tensor::zeros({5, 2}));
        FAIL();
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[5x2]"), std::string::npos);
    }
}

TEST(Encoder, OutputLengthShrinksPerBlock) {
    EXPECT_EQ(tse_output_steps(12, 2, 3), 8u);
    EXPECT_EQ(tse_output_steps(12, 1, 3), 10u);
    EXPECT_THROW(tse_output_steps(4, 2, 3), ConfigError);
    Rng rng(203);
    ParameterSet ps;
    TemporalSpatialEncoder enc({3, 4, 2, 3}, ps, rng);
    Tensor l = enc.forward(random_tensor({5, 3, 12}, rng), Tensor::eye(5));
    EXPECT_EQ(l.shape(), (Shape{5, 4, 8}));
    EXPECT_EQ(ps.size(), 8u);
    EXPECT_EQ(ps.count(), (3u * 4 + 2 * 4 * 4 * 3 + 4 * 4) + (4u * 4 + 2 * 4 * 4 * 3 + 4 * 4));
}

TEST(Encoder, ReceptiveFieldIsTwoHopsPerBlock) {
    const std::size_t n = 9;
    Tensor nrm = line_normalized(n);
    for (std::size_t blocks : {1u, 2u}) {
        Rng rng(204 + blocks);
        ParameterSet ps;
        TemporalSpatialEncoder enc({2, 3, blocks, 2}, ps, rng);
        Tensor x = random_tensor({n, 2, 6}, rng, 0.5, 1.5);
        Tensor base = enc.forward(x, nrm);
        Tensor xp = x.detach();
        for (std::size_t k = 0; k < 12; ++k) xp.mutable_data()[k] += 0.7;  // node 0, every channel and time
        Tensor y = enc.forward(xp, nrm);
        const std::size_t reach = 2 * blocks;
        for (std::size_t node = 0; node < n; ++node) {
            double diff = 0.0;
            for (std::size_t c = 0; c < y.dim(1); ++c)
                for (std::size_t t = 0; t < y.dim(2); ++t) diff = std::max(diff, std::abs(y.at(node, c, t) - base.at(node, c, t)));
            if (node > reach) EXPECT_EQ(diff, 0.0) << "node " << node << " blocks " << blocks;
        }
    }
}

TEST(Encoder, PermutationEquivariant) {
    Rng rng(205);
    const std::size_t n = 6;
    auto a = random_graph(n, rng);
    ParameterSet ps;
    TemporalSpatialEncoder enc({3, 4, 2, 3}, ps, rng);
    Tensor x = random_tensor({n, 3, 12}, rng);
    Tensor y = enc.forward(x, Tensor({n, n}, normalize_adjacency(a, n)));

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> ap(n * n), xp(x.numel());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) ap[i * n + j] = a[perm[i] * n + perm[j]];
    const std::size_t row = 3 * 12;
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(perm[i] * row), row,
                    xp.begin() + static_cast<std::ptrdiff_t>(i * row));
    Tensor yp = enc.forward(Tensor(x.shape(), xp), Tensor({n, n}, normalize_adjacency(ap, n)));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(yp.at(i, c, t), y.at(perm[i], c, t), 1e-12);
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
    Rng rng(206);
    const std::size_t n = 4;
    auto a = random_graph(n, rng);
    Tensor nrm({n, n}, normalize_adjacency(a, n));
    ParameterSet ps;
    TemporalSpatialEncoder enc({2, 3, 1, 3}, ps, rng);
    Tensor x = random_tensor({n, 2, 6}, rng);
    Tensor w = random_tensor({n, 3, 4}, rng);
    std::vector<Tensor> inputs{x};
    for (const auto& [_, t] : ps.items()) inputs.push_back(t);
    auto r = grad_check_many([&] { return sum(mul(enc.forward(x, nrm), w)); }, inputs);
    EXPECT_LT(r.max_rel_error, 1e-6);
}
