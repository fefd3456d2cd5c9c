#pragma once

#include <string>
#include <vector>

#include "tsfusion/ops.hpp"
#include "tsfusion/params.hpp"

// Local temporal-spatial encoder: stacked [graph conv, gated temporal conv,
// graph conv] blocks over [nodes × channels × time] inputs.

namespace tsfusion {

/// Parameters of one block. Both temporal kernels are [C × C × K_t].
struct STBlockParams {
    Tensor spatial_in;   // [C_in × C]
    Tensor p_kernel;     // [C × C × K_t]
    Tensor q_kernel;     // [C × C × K_t]
    Tensor spatial_out;  // [C × C]
};

/// Gated linear unit over two parallel causal convolutions: P ⊙ σ(Q).
inline Tensor temporal_gate(const Tensor& x, const Tensor& p_kernel, const Tensor& q_kernel) {
    if (p_kernel.shape() != q_kernel.shape()) {
        throw DimensionError("temporal_gate: P kernel " + shape_str(p_kernel.shape()) + " and Q kernel " +
                             shape_str(q_kernel.shape()) + " differ");
    }
    return mul(causal_conv1d(x, p_kernel), sigmoid(causal_conv1d(x, q_kernel)));
}

/// Applies `normalized` [N×N] across the node axis of h [N × C × T].
inline Tensor node_mix(const Tensor& normalized, const Tensor& h) {
    detail::require_rank(h, 3, "node_mix");
    const std::size_t n = h.dim(0), c = h.dim(1), t = h.dim(2);
    if (normalized.rank() != 2 || normalized.dim(0) != n || normalized.dim(1) != n) {
        throw DimensionError("node_mix: adjacency " + shape_str(normalized.shape()) + " vs input " + shape_str(h.shape()));
    }
    return reshape(matmul(normalized, reshape(h, {n, c * t})), {n, c, t});
}

/// First-order graph convolution per time step: ReLU(Â · h_t · W).
inline Tensor graph_conv(const Tensor& h, const Tensor& normalized, const Tensor& w) {
    if (h.rank() == 3 && w.rank() == 2 && w.dim(0) != h.dim(1)) {
        throw DimensionError("graph_conv: weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(0)) +
                             " channels, input " + shape_str(h.shape()) + " has " + std::to_string(h.dim(1)));
    }
    return relu(node_mix(normalized, mix_channels(h, w)));
}

inline Tensor st_block(const Tensor& x, const Tensor& normalized, const STBlockParams& p) {
    Tensor h = graph_conv(x, normalized, p.spatial_in);
    h = temporal_gate(h, p.p_kernel, p.q_kernel);
    return graph_conv(h, normalized, p.spatial_out);
}

struct TseConfig {
    std::size_t in_channels = 3;
    std::size_t channels = 64;
    std::size_t blocks = 2;
    std::size_t kernel = 3;
};

/// Remaining time steps after the stack: each block's gate trims K_t - 1.
inline std::size_t tse_output_steps(std::size_t history, std::size_t blocks, std::size_t kernel) {
    const std::size_t trim = blocks * (kernel - 1);
    if (kernel == 0 || history <= trim) {
        throw ConfigError("history " + std::to_string(history) + " too short for " + std::to_string(blocks) +
                          " blocks with temporal kernel " + std::to_string(kernel));
    }
    return history - trim;
}

class TemporalSpatialEncoder {
public:
    TemporalSpatialEncoder() = default;

    TemporalSpatialEncoder(const TseConfig& config, ParameterSet& ps, Rng& rng, const std::string& prefix = "tse")
        : config_(config) {
        if (config.blocks == 0 || config.channels == 0) throw ConfigError("tse: need at least one block and channel");
        const std::size_t c = config.channels, k = config.kernel;
        for (std::size_t b = 0; b < config.blocks; ++b) {
            const std::string name = prefix + ".block" + std::to_string(b);
            const std::size_t cin = b == 0 ? config.in_channels : c;
            STBlockParams p;
            p.spatial_in = ps.add(name + ".spatial_in", glorot({cin, c}, cin, c, rng));
            p.p_kernel = ps.add(name + ".p_kernel", glorot({c, c, k}, c * k, c * k, rng));
            p.q_kernel = ps.add(name + ".q_kernel", glorot({c, c, k}, c * k, c * k, rng));
            p.spatial_out = ps.add(name + ".spatial_out", glorot({c, c}, c, c, rng));
            blocks_.push_back(p);
        }
    }

    const TseConfig& config() const { return config_; }
    const std::vector<STBlockParams>& blocks() const { return blocks_; }

    /// x: [N × C_in × M] -> L: [N × C × M'].
    Tensor forward(const Tensor& x, const Tensor& normalized) const {
        tse_output_steps(x.rank() == 3 ? x.dim(2) : 0, blocks_.size(), config_.kernel);
        Tensor h = x;
        for (const auto& b : blocks_) h = st_block(h, normalized, b);
        return h;
    }

private:
    TseConfig config_;
    std::vector<STBlockParams> blocks_;
};

} // namespace tsfusion
