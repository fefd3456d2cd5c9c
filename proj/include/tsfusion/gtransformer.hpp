#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tsfusion/graph.hpp"
#include "tsfusion/ops.hpp"
#include "tsfusion/params.hpp"

// Global temporal-spatial attention over node tokens: degree centrality
// encoding, feature enhancement (batch norm + dropout), and multi-head
// self-attention biased by mean edge features along shortest paths.

namespace tsfusion {

/// Learnable vectors indexed by in-degree (z_minus) and out-degree (z_plus).
struct CentralityTable {
    Tensor z_minus;  // [max_in + 1 × D]
    Tensor z_plus;   // [max_out + 1 × D]
};

/// Looks up table rows for each degree, clamping degrees beyond the last row
/// to that row. Clamped nodes are appended to `clamped` when given.
inline std::vector<std::size_t> degree_rows(const std::vector<std::size_t>& degree, std::size_t rows,
                                            std::vector<std::size_t>* clamped = nullptr) {
    std::vector<std::size_t> idx(degree.size());
    for (std::size_t i = 0; i < degree.size(); ++i) {
        idx[i] = std::min(degree[i], rows - 1);
        if (degree[i] >= rows && clamped) clamped->push_back(i);
    }
    return idx;
}

/// L̃_i = L_i + z⁻[deg⁻(i)] + z⁺[deg⁺(i)].
inline Tensor centrality_encode(const Tensor& local, const std::vector<std::size_t>& in_degree,
                                const std::vector<std::size_t>& out_degree, const CentralityTable& table,
                                std::vector<std::size_t>* clamped = nullptr) {
    detail::require_rank(local, 2, "centrality_encode");
    if (in_degree.size() != local.dim(0) || out_degree.size() != local.dim(0)) {
        throw DimensionError("centrality_encode: degree vectors do not match " + shape_str(local.shape()));
    }
    auto zi = gather_rows(table.z_minus, degree_rows(in_degree, table.z_minus.dim(0), clamped));
    auto zo = gather_rows(table.z_plus, degree_rows(out_degree, table.z_plus.dim(0), clamped));
    return add(add(local, zi), zo);
}

struct FeatureEnhanceParams {
    Tensor gamma;
    Tensor beta;
    BatchNormState state;
    double keep_prob = 0.9;
    double eps = 1e-5;
};

/// Batch normalization over the node axis followed by dropout. Dropout is
/// active only when `dropout_active`.
inline Tensor feature_enhance(const Tensor& x, FeatureEnhanceParams& p, NormMode mode, bool dropout_active, Rng& rng) {
    Tensor h = batch_norm(x, p.gamma, p.beta, p.state, mode, p.eps);
    return dropout(h, p.keep_prob, rng, dropout_active);
}

/// c_ij = mean over the shortest path's edges of E_e · W_eᵀ.
/// path_features: [N·N × d_e] path-averaged edge features (constant),
/// w_e: [1 × d_e]. Returns [N × N].
inline Tensor path_bias(const Tensor& path_features, const Tensor& w_e, std::size_t nodes) {
    return reshape(matmul(path_features, transpose(w_e)), {nodes, nodes});
}

struct HeadParams {
    Tensor wq, wk, wv;  // [D_in × d]
};

struct HeadOutput {
    Tensor output;   // [N × d]
    Tensor weights;  // [N × N], row-stochastic
};

/// Scaled dot-product attention with additive bias:
/// α = softmax((Q Kᵀ + c) / √d), output = α V.
inline HeadOutput attention_head(const Tensor& x, const HeadParams& p, const Tensor& bias, const Mask* mask = nullptr) {
    Tensor q = matmul(x, p.wq);
    Tensor k = matmul(x, p.wk);
    Tensor v = matmul(x, p.wv);
    const double d = static_cast<double>(p.wq.dim(1));
    Tensor logits = scale(add(matmul(q, transpose(k)), bias), 1.0 / std::sqrt(d));
    Tensor alpha = softmax_rows(logits, mask);
    return {matmul(alpha, v), alpha};
}

struct TransformerLayerParams {
    std::vector<HeadParams> heads;
    Tensor mixer;     // [h·d × C_G]
    Tensor ln_gamma;  // [C_G]
    Tensor ln_beta;   // [C_G]
};

struct MultiHeadOutput {
    Tensor output;              // [N × C_G], layer-normalized
    Tensor concat;              // [N × h·d], before the mixer
    std::vector<Tensor> weights;
};

inline MultiHeadOutput multi_head(const Tensor& x, const TransformerLayerParams& layer, const Tensor& bias,
                                  const Mask* mask = nullptr, double ln_eps = 1e-5) {
    std::vector<Tensor> outs;
    MultiHeadOutput r;
    for (const auto& head : layer.heads) {
        auto h = attention_head(x, head, bias, mask);
        outs.push_back(h.output);
        r.weights.push_back(h.weights);
    }
    r.concat = outs.size() == 1 ? outs.front() : concat(outs, 1);
    if (r.concat.dim(1) != layer.mixer.dim(0)) {
        throw DimensionError("multi_head: concatenated width " + std::to_string(r.concat.dim(1)) +
                             " does not match mixer " + shape_str(layer.mixer.shape()));
    }
    r.output = layer_norm(matmul(r.concat, layer.mixer), layer.ln_gamma, layer.ln_beta, ln_eps);
    return r;
}

struct TransformerConfig {
    std::size_t input_width = 0;  // D: width of each node token
    std::size_t model_width = 0;  // C_G
    std::size_t heads = 4;
    std::size_t head_width = 0;   // d; 0 means C_G / heads
    std::size_t layers = 1;
    std::size_t edge_feature_dim = 1;
    double keep_prob = 0.9;
    double bn_momentum = 0.9;
    double norm_eps = 1e-5;
    bool mask_unreachable = false;
};

/// Constant graph-derived inputs of the transformer.
struct GraphContext {
    std::size_t nodes = 0;
    std::vector<std::size_t> in_degree;
    std::vector<std::size_t> out_degree;
    Tensor path_features;  // [N·N × d_e]
    Mask unreachable;      // N·N, 1 where no path exists

    static GraphContext from(const TrafficGraph& g) {
        GraphContext c;
        c.nodes = g.num_nodes;
        c.in_degree = g.in_degree;
        c.out_degree = g.out_degree;
        c.path_features = Tensor({g.num_nodes * g.num_nodes, g.edge_feature_dim}, g.path_mean_features());
        c.unreachable.assign(g.num_nodes * g.num_nodes, 0);
        for (std::size_t i = 0; i < g.num_nodes * g.num_nodes; ++i) c.unreachable[i] = !g.hop_paths[i].reachable;
        return c;
    }
};

struct TransformerOutput {
    Tensor output;  // [N × C_G]
    std::vector<std::vector<Tensor>> attention;  // per layer, per head
};

class GraphTransformer {
public:
    GraphTransformer() = default;

    GraphTransformer(const TransformerConfig& config, std::size_t max_in_degree, std::size_t max_out_degree,
                     ParameterSet& ps, Rng& rng, const std::string& prefix = "gt")
        : config_(config) {
        if (config_.heads == 0 || config_.layers == 0) throw ConfigError("transformer: need at least one head and layer");
        if (config_.model_width == 0) config_.model_width = config_.input_width;
        if (config_.head_width == 0) config_.head_width = config_.model_width / config_.heads;
        if (config_.head_width == 0) throw ConfigError("transformer: per-head width is zero");
        const std::size_t din = config_.input_width, cg = config_.model_width, d = config_.head_width;
        std::normal_distribution<double> small(0.0, 0.02);
        auto table = [&](std::size_t rows, std::size_t width) {
            std::vector<double> v(rows * width);
            for (auto& e : v) e = small(rng);
            return Tensor({rows, width}, std::move(v));
        };
        centrality_.z_minus = ps.add(prefix + ".z_minus", table(max_in_degree + 1, din));
        centrality_.z_plus = ps.add(prefix + ".z_plus", table(max_out_degree + 1, din));
        fe_.gamma = ps.add(prefix + ".fe.gamma", Tensor::full({din}, 1.0));
        fe_.beta = ps.add(prefix + ".fe.beta", Tensor::zeros({din}));
        fe_.state = BatchNormState(din);
        fe_.state.momentum = config_.bn_momentum;
        fe_.keep_prob = config_.keep_prob;
        fe_.eps = config_.norm_eps;
        w_e_ = ps.add(prefix + ".w_e", glorot({1, config_.edge_feature_dim}, config_.edge_feature_dim, 1, rng));
        for (std::size_t l = 0; l < config_.layers; ++l) {
            const std::string name = prefix + ".layer" + std::to_string(l);
            const std::size_t in = l == 0 ? din : cg;
            TransformerLayerParams layer;
            for (std::size_t h = 0; h < config_.heads; ++h) {
                const std::string hn = name + ".head" + std::to_string(h);
                HeadParams hp;
                hp.wq = ps.add(hn + ".wq", glorot({in, d}, in, d, rng));
                hp.wk = ps.add(hn + ".wk", glorot({in, d}, in, d, rng));
                hp.wv = ps.add(hn + ".wv", glorot({in, d}, in, d, rng));
                layer.heads.push_back(hp);
            }
            layer.mixer = ps.add(name + ".mixer", glorot({config_.heads * d, cg}, config_.heads * d, cg, rng));
            layer.ln_gamma = ps.add(name + ".ln_gamma", Tensor::full({cg}, 1.0));
            layer.ln_beta = ps.add(name + ".ln_beta", Tensor::zeros({cg}));
            layers_.push_back(layer);
        }
    }

    const TransformerConfig& config() const { return config_; }
    const CentralityTable& centrality() const { return centrality_; }
    FeatureEnhanceParams& feature_enhance_params() { return fe_; }
    const FeatureEnhanceParams& feature_enhance_params() const { return fe_; }
    const Tensor& edge_weight() const { return w_e_; }
    const std::vector<TransformerLayerParams>& layers() const { return layers_; }

    /// tokens: [N × D]. `enhance` false replaces feature enhancement by the identity.
    TransformerOutput forward(const Tensor& tokens, const GraphContext& ctx, NormMode mode, bool dropout_active,
                              bool enhance, Rng& rng, std::vector<std::size_t>* clamped = nullptr) {
        Tensor x = centrality_encode(tokens, ctx.in_degree, ctx.out_degree, centrality_, clamped);
        if (enhance) x = feature_enhance(x, fe_, mode, dropout_active, rng);
        Tensor bias = path_bias(ctx.path_features, w_e_, ctx.nodes);
        const Mask* mask = config_.mask_unreachable ? &ctx.unreachable : nullptr;
        TransformerOutput out;
        for (const auto& layer : layers_) {
            auto r = multi_head(x, layer, bias, mask, config_.norm_eps);
            out.attention.push_back(r.weights);
            x = r.output;
        }
        out.output = x;
        return out;
    }

private:
    TransformerConfig config_;
    CentralityTable centrality_;
    FeatureEnhanceParams fe_;
    Tensor w_e_;
    std::vector<TransformerLayerParams> layers_;
};

} // namespace tsfusion
