#pragma once

#include <string>

#include "tsfusion/ops.hpp"
#include "tsfusion/params.hpp"

namespace tsfusion {

struct FusionParams {
    Mlp global_proj;  // C_G -> F
    Mlp local_proj;   // D_L -> F
    Tensor gate_w;    // [F × F]
    Tensor gate_b;    // [F]
    Mlp readout;      // F -> F_target · H
    Tensor skip_w;    // [D_L × F_target · H]
    Tensor skip_b;    // [F_target · H]
};

struct FusionOutput {
    Tensor fused;  // H
    Tensor gate;
};

inline Tensor fusion_gate(const Tensor& global_projected, const Tensor& gate_w, const Tensor& gate_b) {
    return sigmoid(add_bias(matmul(global_projected, transpose(gate_w)), gate_b));
}

/// Convex combination of projected global and local embeddings:
///   Gate = σ(G W_gᵀ + b_g),  H = Gate ⊙ G + (1 - Gate) ⊙ L'
/// with G = MLP(B̃) and L' = MLP(L). Passing `fixed_gate` replaces the
/// learned gate by that tensor.
inline FusionOutput gated_fuse(const Tensor& global_projected, const Tensor& local_projected, const Tensor& gate_w,
                               const Tensor& gate_b, const Tensor* fixed_gate = nullptr) {
    if (global_projected.shape() != local_projected.shape()) {
        throw DimensionError("gated_fuse: global projection " + shape_str(global_projected.shape()) +
                             " and local projection " + shape_str(local_projected.shape()) + " differ");
    }
    Tensor gate = fixed_gate ? *fixed_gate : fusion_gate(global_projected, gate_w, gate_b);
    Tensor fused = add(mul(gate, global_projected), mul(one_minus(gate), local_projected));
    return {fused, gate};
}

inline FusionOutput gated_fuse(const Tensor& global, const Tensor& local, const FusionParams& p,
                               const Tensor* fixed_gate = nullptr) {
    return gated_fuse(p.global_proj(global), p.local_proj(local), p.gate_w, p.gate_b, fixed_gate);
}

/// Two-layer readout of H to [N × F_target × steps], plus the optional linear
/// skip connection from the local embedding.
inline Tensor readout(const Tensor& fused, const Tensor* skip_source, const FusionParams& p, std::size_t target_features,
                      std::size_t steps) {
    Tensor out = p.readout(fused);
    if (skip_source) out = add(out, add_bias(matmul(*skip_source, p.skip_w), p.skip_b));
    return reshape(out, {fused.dim(0), target_features, steps});
}

} // namespace tsfusion
