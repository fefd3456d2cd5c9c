#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>

#include "tsfusion/gradcheck.hpp"
#include "tsfusion/gtransformer.hpp"

using namespace tsfusion;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

std::vector<double> random_digraph(std::size_t n, Rng& rng, double density = 0.35) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && u(rng) < density) a[i * n + j] = 0.1 + 0.9 * u(rng);
    return a;
}

// Plain nested-loop attention used as the reference.
std::vector<double> reference_attention(const Tensor& x, const HeadParams& p, std::span<const double> bias,
                                        const Mask* mask, std::vector<double>& alpha_out) {
    const std::size_t n = x.dim(0), din = x.dim(1), d = p.wq.dim(1);
    auto project = [&](const Tensor& w) {
        std::vector<double> r(n * d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k)
                for (std::size_t c = 0; c < din; ++c) r[i * d + k] += x.at(i, c) * w.at(c, k);
        return r;
    };
    auto q = project(p.wq), k = project(p.wk), v = project(p.wv);
    alpha_out.assign(n * n, 0.0);
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logit(n);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
            double s = bias[i * n + j];
            for (std::size_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
            logit[j] = s / std::sqrt(static_cast<double>(d));
            if (!(mask && (*mask)[i * n + j])) mx = std::max(mx, logit[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = (mask && (*mask)[i * n + j]) ? 0.0 : std::exp(logit[j] - mx);
            alpha_out[i * n + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < n; ++j) {
            alpha_out[i * n + j] /= z;
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += alpha_out[i * n + j] * v[j * d + c];
        }
    }
    return out;
}

} // namespace

TEST(AttentionHead, MatchesLoopOracle) {
    Rng rng(300);
    std::uniform_int_distribution<std::size_t> nodes(1, 8), width(1, 6);
    for (int trial = 0; trial < 150; ++trial) {
        const std::size_t n = nodes(rng), din = width(rng), d = width(rng);
        Tensor x = random_tensor({n, din}, rng);
        HeadParams p{random_tensor({din, d}, rng), random_tensor({din, d}, rng), random_tensor({din, d}, rng)};
        Tensor bias = random_tensor({n, n}, rng, -2.0, 2.0);
        std::vector<double> alpha;
        auto ref = reference_attention(x, p, bias.data(), nullptr, alpha);
        auto got = attention_head(x, p, bias);
        ASSERT_EQ(got.output.shape(), (Shape{n, d}));
        for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(got.output.data()[i], ref[i], 1e-12);
        for (std::size_t i = 0; i < alpha.size(); ++i) ASSERT_NEAR(got.weights.data()[i], alpha[i], 1e-12);
    }
}

TEST(AttentionHead, MaskedEntriesAreExactlyZero) {
    Rng rng(301);
    const std::size_t n = 6;
    Tensor x = random_tensor({n, 3}, rng);
    HeadParams p{random_tensor({3, 2}, rng), random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)};
    Mask mask(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = (i + 2 * j) % 3 == 1 && i != j;
    std::vector<double> alpha;
    auto ref = reference_attention(x, p, std::vector<double>(n * n, 0.0), &mask, alpha);
    auto got = attention_head(x, p, Tensor::zeros({n, n}), &mask);
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask[i * n + j]) EXPECT_EQ(got.weights.at(i, j), 0.0);
            row += got.weights.at(i, j);
        }
        EXPECT_NEAR(row, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got.output.data()[i], ref[i], 1e-12);
}

TEST(Centrality, AddsDegreeRowsAndClamps) {
    Rng rng(302);
    CentralityTable t{random_tensor({3, 4}, rng), random_tensor({2, 4}, rng)};
    Tensor l = random_tensor({4, 4}, rng);
    std::vector<std::size_t> din{0, 1, 2, 5}, dout{0, 1, 3, 1}, clamped;
    Tensor y = centrality_encode(l, din, dout, t, &clamped);
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t ri = std::min<std::size_t>(din[i], 2), ro = std::min<std::size_t>(dout[i], 1);
        for (std::size_t c = 0; c < 4; ++c)
            EXPECT_NEAR(y.at(i, c), l.at(i, c) + t.z_minus.at(ri, c) + t.z_plus.at(ro, c), 1e-15);
    }
    std::sort(clamped.begin(), clamped.end());
    EXPECT_EQ(clamped, (std::vector<std::size_t>{2, 3}));
    EXPECT_THROW(centrality_encode(l, {0, 1}, dout, t), DimensionError);
}

TEST(PathBias, IsMeanWeightedEdgeFeatureAlongShortestPath) {
    // Directed chain 0 -> 1 -> 2 -> 3 plus a shortcut 0 -> 2.
    const std::size_t n = 4;
    std::vector<double> a(n * n, 0.0);
    a[0 * n + 1] = 0.2;
    a[1 * n + 2] = 0.4;
    a[2 * n + 3] = 0.9;
    a[0 * n + 2] = 0.5;
    TrafficGraph g = graph_from_adjacency(a, n);
    GraphContext ctx = GraphContext::from(g);
    Tensor we({1, 1}, {1.7});
    Tensor c = path_bias(ctx.path_features, we, n);
    EXPECT_NEAR(c.at(0, 1), 1.7 * 0.2, 1e-15);
    EXPECT_NEAR(c.at(0, 3), 1.7 * (0.5 + 0.9) / 2.0, 1e-15);
    EXPECT_NEAR(c.at(1, 3), 1.7 * (0.4 + 0.9) / 2.0, 1e-15);
    EXPECT_EQ(c.at(3, 0), 0.0);
    EXPECT_EQ(c.at(2, 2), 0.0);
    EXPECT_TRUE(ctx.unreachable[3 * n + 0]);
    EXPECT_FALSE(ctx.unreachable[0 * n + 3]);
}

TEST(MultiHead, ConcatenatesHeadsThenMixesAndNormalizes) {
    Rng rng(303);
    const std::size_t n = 5, din = 6, d = 2, heads = 3, cg = 4;
    Tensor x = random_tensor({n, din}, rng);
    TransformerLayerParams layer;
    for (std::size_t h = 0; h < heads; ++h)
        layer.heads.push_back({random_tensor({din, d}, rng), random_tensor({din, d}, rng), random_tensor({din, d}, rng)});
    layer.mixer = random_tensor({heads * d, cg}, rng);
    layer.ln_gamma = random_tensor({cg}, rng, 0.5, 1.5);
    layer.ln_beta = random_tensor({cg}, rng);
    Tensor bias = random_tensor({n, n}, rng);
    auto r = multi_head(x, layer, bias);
    ASSERT_EQ(r.concat.shape(), (Shape{n, heads * d}));
    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> alpha;
        auto ref = reference_attention(x, layer.heads[h], bias.data(), nullptr, alpha);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(r.concat.at(i, h * d + k), ref[i * d + k], 1e-12);
    }
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> z(cg, 0.0);
        for (std::size_t o = 0; o < cg; ++o)
            for (std::size_t k = 0; k < heads * d; ++k) z[o] += r.concat.at(i, k) * layer.mixer.at(k, o);
        const double mean = std::accumulate(z.begin(), z.end(), 0.0) / cg;
        double var = 0.0;
        for (double v : z) var += (v - mean) * (v - mean);
        var /= cg;
        for (std::size_t o = 0; o < cg; ++o)
            EXPECT_NEAR(r.output.at(i, o),
                        layer.ln_gamma.data()[o] * (z[o] - mean) / std::sqrt(var + 1e-5) + layer.ln_beta.data()[o], 1e-12);
    }
    layer.mixer = random_tensor({heads * d + 1, cg}, rng);
    EXPECT_THROW(multi_head(x, layer, bias), DimensionError);
}

TEST(GraphTransformer, WidthsDefaultFromInput) {
    Rng rng(304);
    ParameterSet ps;
    TransformerConfig cfg;
    cfg.input_width = 12;
    cfg.heads = 4;
    GraphTransformer gt(cfg, 3, 2, ps, rng);
    EXPECT_EQ(gt.config().model_width, 12u);
    EXPECT_EQ(gt.config().head_width, 3u);
    EXPECT_EQ(gt.centrality().z_minus.shape(), (Shape{4, 12}));
    EXPECT_EQ(gt.centrality().z_plus.shape(), (Shape{3, 12}));
    cfg.heads = 0;
    EXPECT_THROW(GraphTransformer(cfg, 1, 1, ps, rng), ConfigError);
    cfg.heads = 16;
    EXPECT_THROW(GraphTransformer(cfg, 1, 1, ps, rng), ConfigError);
}

TEST(GraphTransformer, PermutationEquivariantInEvalMode) {
    Rng rng(305);
    const std::size_t n = 7, din = 5;
    // Shortest paths must be unique, otherwise the label-based tie-break
    // picks different paths after relabeling. A tree guarantees that.
    std::vector<double> a(n * n, 0.0);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (std::size_t i = 1; i < n; ++i) {
        const std::size_t parent = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
        a[i * n + parent] = u(rng);
        a[parent * n + i] = u(rng);
    }
    TrafficGraph g = graph_from_adjacency(a, n);
    ParameterSet ps;
    TransformerConfig cfg;
    cfg.input_width = din;
    cfg.model_width = 4;
    cfg.heads = 2;
    cfg.layers = 2;
    GraphTransformer gt(cfg, n, n, ps, rng);
    auto& st = gt.feature_enhance_params().state;
    for (std::size_t c = 0; c < din; ++c) {
        st.running_mean[c] = 0.1 * static_cast<double>(c);
        st.running_var[c] = 1.0 + 0.2 * static_cast<double>(c);
    }
    Tensor x = random_tensor({n, din}, rng);
    Rng drop(1);
    auto y = gt.forward(x, GraphContext::from(g), NormMode::eval, false, true, drop);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> ap(n * n), xp(n * din);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) ap[i * n + j] = a[perm[i] * n + perm[j]];
        for (std::size_t c = 0; c < din; ++c) xp[i * din + c] = x.at(perm[i], c);
    }
    auto yp = gt.forward(Tensor({n, din}, xp), GraphContext::from(graph_from_adjacency(ap, n)), NormMode::eval, false,
                         true, drop);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(yp.output.at(i, c), y.output.at(perm[i], c), 1e-12);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            EXPECT_NEAR(yp.attention[1][0].at(i, j), y.attention[1][0].at(perm[i], perm[j]), 1e-12);
}

TEST(GraphTransformer, MaskingUnreachableRemovesThoseWeights) {
    Rng rng(306);
    const std::size_t n = 5;
    std::vector<double> a(n * n, 0.0);
    a[0 * n + 1] = 1.0;
    a[1 * n + 2] = 1.0;
    a[3 * n + 4] = 1.0;
    TrafficGraph g = graph_from_adjacency(a, n);
    ParameterSet ps;
    TransformerConfig cfg;
    cfg.input_width = 4;
    cfg.heads = 1;
    cfg.mask_unreachable = true;
    GraphTransformer gt(cfg, 2, 2, ps, rng);
    Rng drop(2);
    GraphContext ctx = GraphContext::from(g);
    auto out = gt.forward(random_tensor({n, 4}, rng), ctx, NormMode::train, false, true, drop);
    const Tensor& w = out.attention[0][0];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && ctx.unreachable[i * n + j]) EXPECT_EQ(w.at(i, j), 0.0) << i << "," << j;
}

TEST(GraphTransformer, FeatureEnhancementCanBeDisabled) {
    Rng rng(307);
    const std::size_t n = 4;
    TrafficGraph g = graph_from_adjacency(random_digraph(n, rng, 0.6), n);
    ParameterSet ps;
    TransformerConfig cfg;
    cfg.input_width = 3;
    cfg.heads = 1;
    GraphTransformer gt(cfg, n, n, ps, rng);
    Tensor x = random_tensor({n, 3}, rng, -5.0, 5.0);
    Rng drop(3);
    GraphContext ctx = GraphContext::from(g);
    auto with = gt.forward(x, ctx, NormMode::eval, false, true, drop);
    auto without = gt.forward(x, ctx, NormMode::eval, false, false, drop);
    // Default running stats are mean 0, var 1 with unit gamma, so the only
    // difference between the two is the 1/sqrt(1 + eps) scale.
    Tensor scaled = centrality_encode(x, ctx.in_degree, ctx.out_degree, gt.centrality());
    Tensor manual = multi_head(scale(scaled, 1.0 / std::sqrt(1.0 + 1e-5)), gt.layers()[0],
                               path_bias(ctx.path_features, gt.edge_weight(), n))
                        .output;
    for (std::size_t i = 0; i < manual.numel(); ++i) EXPECT_NEAR(with.output.data()[i], manual.data()[i], 1e-12);
    Tensor raw = multi_head(scaled, gt.layers()[0], path_bias(ctx.path_features, gt.edge_weight(), n)).output;
    for (std::size_t i = 0; i < raw.numel(); ++i) EXPECT_NEAR(without.output.data()[i], raw.data()[i], 1e-12);
}

TEST(GraphTransformer, GradientsMatchFiniteDifferences) {
    Rng rng(308);
    const std::size_t n = 5, din = 4;
    TrafficGraph g = graph_from_adjacency(random_digraph(n, rng, 0.5), n);
    GraphContext ctx = GraphContext::from(g);
    ParameterSet ps;
    TransformerConfig cfg;
    cfg.input_width = din;
    cfg.model_width = 3;
    cfg.heads = 2;
    cfg.head_width = 2;
    GraphTransformer gt(cfg, n, n, ps, rng);
    Tensor x = random_tensor({n, din}, rng);
    Tensor w = random_tensor({n, 3}, rng);
    std::vector<Tensor> inputs{x};
    for (const auto& [_, t] : ps.items()) inputs.push_back(t);
    Rng drop(4);
    auto r = grad_check_many(
        [&] { return sum(mul(gt.forward(x, ctx, NormMode::train_frozen, false, true, drop).output, w)); }, inputs);
    EXPECT_LT(r.max_rel_error, 1e-6) << "tensor " << r.worst_tensor << " index " << r.worst_index;
}
