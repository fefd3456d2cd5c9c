#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsfusion/checkpoint.hpp"
#include "tsfusion/dataset.hpp"
#include "tsfusion/fusion.hpp"
#include "tsfusion/graph.hpp"
#include "tsfusion/gtransformer.hpp"
#include "tsfusion/params.hpp"
#include "tsfusion/tse.hpp"

namespace tsfusion {

/// Component switches for the ablation variants.
struct AblationFlags {
    bool no_global = false;           // nG
    bool no_local = false;            // nL
    bool no_feature_enhance = false;  // nFE
    bool no_gate = false;             // nGate
    bool no_residual = false;         // nRes

    void validate() const {
        if (no_global && no_local) throw ConfigError("ablation flags no_global and no_local cannot both be set");
    }

    /// "full", "nG", "nL", "nFE", "nGate", "nRes".
    static AblationFlags from_variant(const std::string& v) {
        AblationFlags f;
        if (v == "full" || v == "TSFusion") return f;
        if (v == "nG") f.no_global = true;
        else if (v == "nL") f.no_local = true;
        else if (v == "nFE") f.no_feature_enhance = true;
        else if (v == "nGate") f.no_gate = true;
        else if (v == "nRes") f.no_residual = true;
        else throw ConfigError("unknown ablation variant '" + v + "' (expected full, nG, nL, nFE, nGate, nRes)");
        return f;
    }

    std::string name() const {
        std::string s;
        auto tag = [&](bool on, const char* t) {
            if (!on) return;
            if (!s.empty()) s += '+';
            s += t;
        };
        tag(no_global, "nG");
        tag(no_local, "nL");
        tag(no_feature_enhance, "nFE");
        tag(no_gate, "nGate");
        tag(no_residual, "nRes");
        return s.empty() ? "full" : s;
    }
};

struct ModelConfig {
    // windowing
    std::size_t M = 12;
    std::size_t H = 9;
    std::vector<std::size_t> horizon_steps{3, 6, 9};
    std::vector<std::size_t> target_features{0};
    // local encoder
    std::size_t K_t = 3;
    std::size_t block_count = 2;
    std::size_t channel_width = 64;
    // global encoder; zero widths are derived (C_G = token width, d = C_G / h)
    std::size_t head_count = 4;
    std::size_t head_width = 0;
    std::size_t transformer_width = 0;
    std::size_t transformer_layers = 1;
    bool attention_per_step = false;
    bool mask_unreachable = false;
    double keep_prob = 0.9;
    double bn_momentum = 0.9;
    double norm_eps = 1e-5;
    // fusion
    std::size_t fusion_width = 64;
    std::size_t readout_hidden = 64;
    // graph and preprocessing
    double sigma2 = 10.0;
    double eps = 0.5;
    double squared_distance_scale = 1e4;
    double train_fraction = 0.8;
    bool standardize = false;
    // optimization
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epoch_count = 50;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;
    double lr_decay = 1.0;
    std::size_t early_stopping_patience = 0;
    std::size_t repeats = 3;

    void validate() const {
        if (M == 0 || H == 0 || K_t == 0 || block_count == 0 || channel_width == 0 || head_count == 0 ||
            fusion_width == 0 || readout_hidden == 0 || batch_size == 0 || transformer_layers == 0) {
            throw ConfigError("model config: sizes must be positive");
        }
        if (!(learning_rate >= 0.0)) throw ConfigError("model config: learning_rate must be non-negative");
        if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ConfigError("model config: keep_prob must lie in (0, 1]");
        if (target_features.empty()) throw ConfigError("model config: no target features");
        for (auto s : horizon_steps)
            if (s == 0 || s > H) throw ConfigError("model config: horizon step " + std::to_string(s) + " outside 1..H");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
            throw ConfigError("model config: validation_fraction must lie in [0, 1)");
        }
        tse_output_steps(M, block_count, K_t);
    }

    DatasetConfig dataset_config() const {
        DatasetConfig d;
        d.sigma2 = sigma2;
        d.eps = eps;
        d.squared_distance_scale = squared_distance_scale;
        d.train_fraction = train_fraction;
        d.standardize = standardize;
        return d;
    }
};

inline void to_json(nlohmann::json& j, const AblationFlags& f) {
    j = {{"no_global", f.no_global},
         {"no_local", f.no_local},
         {"no_feature_enhance", f.no_feature_enhance},
         {"no_gate", f.no_gate},
         {"no_residual", f.no_residual}};
}

inline void from_json(const nlohmann::json& j, AblationFlags& f) {
    f.no_global = j.value("no_global", f.no_global);
    f.no_local = j.value("no_local", f.no_local);
    f.no_feature_enhance = j.value("no_feature_enhance", f.no_feature_enhance);
    f.no_gate = j.value("no_gate", f.no_gate);
    f.no_residual = j.value("no_residual", f.no_residual);
}

#define TSFUSION_CONFIG_FIELDS(X)                                                                           \
    X(M) X(H) X(horizon_steps) X(target_features) X(K_t) X(block_count) X(channel_width) X(head_count)      \
    X(head_width) X(transformer_width) X(transformer_layers) X(attention_per_step) X(mask_unreachable)      \
    X(keep_prob) X(bn_momentum) X(norm_eps) X(fusion_width) X(readout_hidden) X(sigma2) X(eps)             \
    X(squared_distance_scale) X(train_fraction) X(standardize) X(learning_rate) X(batch_size) X(epoch_count) \
    X(seed) X(validation_fraction) X(lr_decay) X(early_stopping_patience) X(repeats)

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json::object();
#define X(name) j[#name] = c.name;
    TSFUSION_CONFIG_FIELDS(X)
#undef X
}

/// Missing keys keep their current values; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    static const std::vector<std::string> known = {
#define X(name) #name,
        TSFUSION_CONFIG_FIELDS(X)
#undef X
        "no_global", "no_local", "no_feature_enhance", "no_gate", "no_residual"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw ConfigError("unknown config key '" + it.key() + "'");
        }
    }
    try {
#define X(name) \
    if (j.contains(#name)) j.at(#name).get_to(c.name);
        TSFUSION_CONFIG_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config type error: ") + e.what());
    }
}

enum class Mode {
    train,   // batch statistics (updated), dropout on
    attack,  // batch statistics (frozen), dropout off
    eval,    // running statistics, dropout off
};

struct ForwardResult {
    Tensor forecast;  // [N × F_target × H]
    Tensor gate;      // empty tensor (rank 0) when the variant has no gate
    Tensor local;     // flattened local embedding [N × D_L]
    Tensor global;    // [N × ·], rank 0 when absent
    std::vector<std::vector<Tensor>> attention;
    std::vector<std::size_t> clamped_degrees;
};

/// Full multi-grained forecaster: local encoder, graph transformer, gated
/// fusion and readout, with ablation switches.
class Model {
public:
    Model(const ModelConfig& config, const AblationFlags& flags, const TrafficGraph& graph, std::size_t num_features)
        : config_(config), flags_(flags), num_features_(num_features) {
        config_.validate();
        flags_.validate();
        nodes_ = graph.num_nodes;
        normalized_ = Tensor({nodes_, nodes_}, graph.normalized);
        ctx_ = GraphContext::from(graph);
        local_steps_ = tse_output_steps(config_.M, config_.block_count, config_.K_t);
        const std::size_t c = config_.channel_width;
        local_width_ = c * local_steps_;
        output_width_ = config_.target_features.size() * config_.H;

        Rng rng(config_.seed);
        TseConfig tc{num_features_, c, config_.block_count, config_.K_t};
        tse_ = TemporalSpatialEncoder(tc, params_, rng, "tse");
        raw_w_ = params_.add("raw.w", glorot({num_features_ * config_.M, local_width_}, num_features_ * config_.M,
                                              local_width_, rng));
        raw_b_ = params_.add("raw.b", Tensor::zeros({local_width_}));

        TransformerConfig gc;
        gc.input_width = config_.attention_per_step ? c : local_width_;
        gc.model_width = config_.transformer_width;
        gc.heads = config_.head_count;
        gc.head_width = config_.head_width;
        gc.layers = config_.transformer_layers;
        gc.edge_feature_dim = graph.edge_feature_dim;
        gc.keep_prob = config_.keep_prob;
        gc.bn_momentum = config_.bn_momentum;
        gc.norm_eps = config_.norm_eps;
        gc.mask_unreachable = config_.mask_unreachable;
        gt_ = GraphTransformer(gc, graph.max_in_degree(), graph.max_out_degree(), params_, rng, "gt");
        const std::size_t cg = gt_.config().model_width;
        global_width_ = config_.attention_per_step ? cg * local_steps_ : cg;

        const std::size_t f = config_.fusion_width;
        fusion_.global_proj = Mlp::create(params_, "fusion.global", global_width_, f, f, rng);
        fusion_.local_proj = Mlp::create(params_, "fusion.local", local_width_, f, f, rng);
        fusion_.gate_w = params_.add("fusion.gate_w", glorot({f, f}, f, f, rng));
        fusion_.gate_b = params_.add("fusion.gate_b", Tensor::zeros({f}));
        fusion_.readout = Mlp::create(params_, "fusion.readout", f, config_.readout_hidden, output_width_, rng);
        fusion_.skip_w = params_.add("fusion.skip_w", glorot({local_width_, output_width_}, local_width_, output_width_, rng));
        fusion_.skip_b = params_.add("fusion.skip_b", Tensor::zeros({output_width_}));
        dropout_rng_ = Rng(config_.seed ^ 0x9e3779b97f4a7c15ULL);
    }

    const ModelConfig& config() const { return config_; }
    const AblationFlags& flags() const { return flags_; }
    std::size_t nodes() const { return nodes_; }
    std::size_t num_features() const { return num_features_; }
    std::size_t local_steps() const { return local_steps_; }
    std::size_t local_width() const { return local_width_; }

    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }
    GraphTransformer& transformer() { return gt_; }
    const GraphTransformer& transformer() const { return gt_; }
    const TemporalSpatialEncoder& local_encoder() const { return tse_; }
    const FusionParams& fusion() const { return fusion_; }
    Rng& dropout_rng() { return dropout_rng_; }

    std::size_t parameter_count() const { return params_.count(); }
    std::size_t local_parameter_count() const { return params_.count("tse.") + params_.count("raw."); }
    std::size_t global_parameter_count() const { return params_.count("gt."); }
    std::size_t fusion_parameter_count() const { return params_.count("fusion."); }

    ForwardResult forward(const Tensor& history, Mode mode) { return forward(history, mode, dropout_rng_); }

    ForwardResult forward(const Tensor& history, Mode mode, Rng& rng) {
        if (history.rank() != 3 || history.dim(0) != nodes_ || history.dim(1) != num_features_ ||
            history.dim(2) != config_.M) {
            throw DimensionError("model input " + shape_str(history.shape()) + " does not match [" +
                                 std::to_string(nodes_) + "x" + std::to_string(num_features_) + "x" +
                                 std::to_string(config_.M) + "]");
        }
        const NormMode norm = mode == Mode::train ? NormMode::train
                              : mode == Mode::attack ? NormMode::train_frozen
                                                     : NormMode::eval;
        const bool drop = mode == Mode::train;
        const std::size_t c = config_.channel_width;
        ForwardResult r;

        Tensor local_seq;
        if (!flags_.no_local) {
            local_seq = tse_.forward(history, normalized_);
        } else {
            Tensor flat = reshape(history, {nodes_, num_features_ * config_.M});
            local_seq = reshape(add_bias(matmul(flat, raw_w_), raw_b_), {nodes_, c, local_steps_});
        }
        r.local = reshape(local_seq, {nodes_, local_width_});

        if (!flags_.no_global) {
            const bool enhance = !flags_.no_feature_enhance;
            if (config_.attention_per_step) {
                std::vector<Tensor> steps;
                for (std::size_t t = 0; t < local_steps_; ++t) {
                    Tensor tok = reshape(slice(local_seq, 2, t, t + 1), {nodes_, c});
                    auto out = gt_.forward(tok, ctx_, norm, drop, enhance, rng, &r.clamped_degrees);
                    steps.push_back(out.output);
                    for (auto& a : out.attention) r.attention.push_back(a);
                }
                r.global = steps.size() == 1 ? steps.front() : concat(steps, 1);
            } else {
                auto out = gt_.forward(r.local, ctx_, norm, drop, enhance, rng, &r.clamped_degrees);
                r.global = out.output;
                r.attention = std::move(out.attention);
            }
        }

        Tensor fused;
        if (flags_.no_global) {
            fused = fusion_.local_proj(r.local);
        } else if (flags_.no_local) {
            fused = fusion_.global_proj(r.global);
        } else if (flags_.no_gate) {
            Tensor half = Tensor::full({nodes_, config_.fusion_width}, 0.5);
            auto fo = gated_fuse(r.global, r.local, fusion_, &half);
            fused = fo.fused;
            r.gate = fo.gate;
        } else {
            auto fo = gated_fuse(r.global, r.local, fusion_);
            fused = fo.fused;
            r.gate = fo.gate;
        }
        const Tensor* skip = flags_.no_residual ? nullptr : &r.local;
        r.forecast = readout(fused, skip, fusion_, config_.target_features.size(), config_.H);
        return r;
    }

    /// Parameters plus batch-norm running statistics.
    NamedTensors state() const {
        NamedTensors s = params_.items();
        const auto& st = gt_.feature_enhance_params().state;
        s.emplace_back("gt.fe.running_mean", Tensor({st.running_mean.size()}, st.running_mean));
        s.emplace_back("gt.fe.running_var", Tensor({st.running_var.size()}, st.running_var));
        return s;
    }

    void load_state(const NamedTensors& s) {
        auto& st = gt_.feature_enhance_params().state;
        std::size_t matched = 0;
        for (const auto& [name, t] : s) {
            if (name == "gt.fe.running_mean" || name == "gt.fe.running_var") {
                auto& dst = name == "gt.fe.running_mean" ? st.running_mean : st.running_var;
                if (dst.size() != t.numel()) throw DataError("checkpoint: " + name + " has wrong size");
                dst.assign(t.data().begin(), t.data().end());
                ++matched;
                continue;
            }
            Tensor p = params_.find(name);
            if (p.shape() != t.shape()) {
                throw DataError("checkpoint: " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                                shape_str(p.shape()));
            }
            std::copy(t.data().begin(), t.data().end(), p.mutable_data().begin());
            ++matched;
        }
        if (matched != params_.size() + 2) {
            throw DataError("checkpoint: expected " + std::to_string(params_.size() + 2) + " tensors, matched " +
                            std::to_string(matched));
        }
    }

private:
    ModelConfig config_;
    AblationFlags flags_;
    std::size_t num_features_ = 0;
    std::size_t nodes_ = 0;
    std::size_t local_steps_ = 0;
    std::size_t local_width_ = 0;
    std::size_t global_width_ = 0;
    std::size_t output_width_ = 0;
    Tensor normalized_;
    GraphContext ctx_;
    ParameterSet params_;
    TemporalSpatialEncoder tse_;
    Tensor raw_w_, raw_b_;
    GraphTransformer gt_;
    FusionParams fusion_;
    Rng dropout_rng_;
};

} // namespace tsfusion
