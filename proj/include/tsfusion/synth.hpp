#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsfusion/dataset.hpp"
#include "tsfusion/graph.hpp"
#include "tsfusion/ops.hpp"

namespace tsfusion {

/// Parameters of the synthetic traffic generator. The generative equations
/// are returned verbatim in SynthResult::equations and in the manifest.
struct SynthConfig {
    std::size_t nodes = 24;
    std::size_t steps = 2016;
    std::size_t steps_per_day = 288;
    std::uint64_t seed = 7;

    // Explicit long-range pairs (leader, follower). When empty and
    // auto_pairs > 0, pairs at least min_pair_hops apart are drawn.
    std::vector<std::pair<std::size_t, std::size_t>> long_range_pairs;
    std::size_t auto_pairs = 0;
    std::size_t min_pair_hops = 4;

    double noise_scale = 0.1;
    double area_miles = 10.0;
    double connect_radius_miles = 3.0;

    // Level and amplitude vary smoothly over space (random Fourier fields with
    // this correlation length); all stations share one daily phase up to a
    // Gaussian jitter in radians.
    double level_min = 3.0, level_max = 7.0;
    double amplitude_min = 0.5, amplitude_max = 1.5;
    double spatial_scale_miles = 4.0;
    double phase_jitter = 0.3;
    double diffusion_decay = 0.8;
    double diffusion_ratio = 2.0;
    double latent_scale = 2.0;
    double latent_ar = 0.95;
    std::size_t latent_lag = 6;

    // Kernel used to turn the emitted distances into the graph; recorded in
    // the manifest so the files reload into the same graph.
    double graph_sigma2 = 4.5;
    double graph_eps = 0.1;
    double squared_distance_scale = 1.0;
    double train_fraction = 0.8;
};

struct SynthResult {
    TrafficDataset dataset;
    TrafficGraph graph;
    RawTable raw;
    std::vector<double> distances;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<std::string> warnings;
    std::string equations;
};

inline const char* synth_equations() {
    return "level_i = level_min + (level_max - level_min) * (1 + tanh(g_1(p_i))) / 2, "
           "amp_i = amp_min + (amp_max - amp_min) * (1 + tanh(g_2(p_i))) / 2, "
           "g_k(p) = sqrt(2/8) * sum_{r<8} cos(w_kr . p + b_kr), w_kr ~ N(0, I / spatial_scale^2), b_kr ~ U(0, 2 pi); "
           "phase_i = phase_0 + phase_jitter * N(0,1);  "
           "flow_i(t) = level_i + amp_i * sin(2*pi*(t mod P)/P + phase_i) + d_i(t)"
           " + latent_scale * sum_{pairs p: i=leader} z_p(t) + latent_scale * sum_{pairs p: i=follower} z_p(t - lag)"
           " + noise_scale * e_i(t);  "
           "d(t) = diffusion_decay * Anorm * d(t-1) + diffusion_ratio * noise_scale * u(t);  "
           "z_p(t) = latent_ar * z_p(t-1) + sqrt(1 - latent_ar^2) * w_p(t);  "
           "speed_i(t) = 65 - 4 * (flow_i(t) - level_i) + noise_scale * e'_i(t);  "
           "occupancy_i(t) = 0.08 + 0.01 * (flow_i(t) - level_i) + 0.01 * noise_scale * e''_i(t);  "
           "e, e', e'', u, w ~ iid N(0,1); followers copy their leader's phase; "
           "Anorm = D^-1/2 (A + I) D^-1/2 of the generated graph; P = steps_per_day";
}

/// Loader settings that rebuild the generated graph and split from the
/// emitted files.
inline DatasetConfig synth_dataset_config(const SynthConfig& s) {
    DatasetConfig c;
    c.sigma2 = s.graph_sigma2;
    c.eps = s.graph_eps;
    c.squared_distance_scale = s.squared_distance_scale;
    c.train_fraction = s.train_fraction;
    c.steps_per_day = s.steps_per_day;
    c.symmetric_distances = true;
    return c;
}

inline nlohmann::json synth_manifest(const SynthConfig& c, const SynthResult& r) {
    nlohmann::json pairs = nlohmann::json::array();
    for (auto [a, b] : r.pairs) pairs.push_back({a, b});
    return {
        {"generator", "tsfusion-synth"},
        {"seed", c.seed},
        {"nodes", c.nodes},
        {"steps", c.steps},
        {"steps_per_day", c.steps_per_day},
        {"long_range_pairs", pairs},
        {"min_pair_hops", c.min_pair_hops},
        {"noise_scale", c.noise_scale},
        {"area_miles", c.area_miles},
        {"connect_radius_miles", c.connect_radius_miles},
        {"level_range", {c.level_min, c.level_max}},
        {"amplitude_range", {c.amplitude_min, c.amplitude_max}},
        {"spatial_scale_miles", c.spatial_scale_miles},
        {"phase_jitter", c.phase_jitter},
        {"diffusion_decay", c.diffusion_decay},
        {"diffusion_ratio", c.diffusion_ratio},
        {"latent_scale", c.latent_scale},
        {"latent_ar", c.latent_ar},
        {"latent_lag", c.latent_lag},
        {"graph", {{"sigma2", c.graph_sigma2}, {"eps", c.graph_eps}, {"squared_distance_scale", c.squared_distance_scale}}},
        {"train_fraction", c.train_fraction},
        {"equations", r.equations},
        {"warnings", r.warnings},
    };
}

/// Random geometric road graph with daily periodic flows, diffusion along
/// edges, and lead-lag latent signals shared by graph-distant station pairs.
inline SynthResult synth_generate(const SynthConfig& c) {
    if (c.nodes < 2 || c.steps < 2 || c.steps_per_day < 1) throw ConfigError("synth: need at least 2 nodes and 2 steps");
    if (!(c.noise_scale >= 0.0)) throw ConfigError("synth: noise_scale must be non-negative");
    if (!(std::abs(c.latent_ar) < 1.0)) throw ConfigError("synth: latent_ar must lie in (-1, 1)");
    Rng rng(c.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t n = c.nodes, T = c.steps;

    SynthResult r;
    r.equations = synth_equations();

    // Geometry and road distances.
    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        xs[i] = unit(rng) * c.area_miles;
        ys[i] = unit(rng) * c.area_miles;
    }
    r.distances.assign(n * n, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) {
                r.distances[i * n + j] = 0.0;
                continue;
            }
            const double d = std::hypot(xs[i] - xs[j], ys[i] - ys[j]);
            if (d <= c.connect_radius_miles) r.distances[i * n + j] = d;
        }
    r.graph = build_adjacency(r.distances, n, c.graph_sigma2 * c.squared_distance_scale, c.graph_eps);
    const auto hops = hop_distances(r.graph.adjacency, n);

    // Long-range pairs.
    r.pairs = c.long_range_pairs;
    if (r.pairs.empty() && c.auto_pairs > 0) {
        std::vector<std::uint8_t> used(n, 0);
        std::vector<std::pair<std::size_t, std::size_t>> candidates;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b)
                if (a != b && hops[a * n + b] >= c.min_pair_hops && hops[b * n + a] >= c.min_pair_hops)
                    candidates.emplace_back(a, b);
        std::shuffle(candidates.begin(), candidates.end(), rng);
        for (auto [a, b] : candidates) {
            if (r.pairs.size() == c.auto_pairs) break;
            if (used[a] || used[b]) continue;
            used[a] = used[b] = 1;
            r.pairs.emplace_back(a, b);
        }
        if (r.pairs.size() < c.auto_pairs) {
            r.warnings.push_back("only " + std::to_string(r.pairs.size()) + " of " + std::to_string(c.auto_pairs) +
                                 " long-range pairs could be placed at >= " + std::to_string(c.min_pair_hops) + " hops");
        }
    }
    for (auto [a, b] : r.pairs) {
        if (a >= n || b >= n || a == b) throw ConfigError("synth: invalid long-range pair");
        if (r.graph.has_edge(a, b) || r.graph.has_edge(b, a)) {
            r.warnings.push_back("long-range pair (" + std::to_string(a) + "," + std::to_string(b) +
                                 ") is graph-adjacent; the pair no longer tests long-range attention");
        }
    }

    // Per-node daily profile from smooth spatial fields.
    if (!(c.spatial_scale_miles > 0.0)) throw ConfigError("synth: spatial_scale_miles must be positive");
    auto smooth_field = [&] {
        constexpr std::size_t kFeatures = 8;
        std::vector<double> wx(kFeatures), wy(kFeatures), b(kFeatures);
        for (std::size_t k = 0; k < kFeatures; ++k) {
            wx[k] = normal(rng) / c.spatial_scale_miles;
            wy[k] = normal(rng) / c.spatial_scale_miles;
            b[k] = 2.0 * std::numbers::pi * unit(rng);
        }
        std::vector<double> g(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < kFeatures; ++k) g[i] += std::cos(wx[k] * xs[i] + wy[k] * ys[i] + b[k]);
            g[i] *= std::sqrt(2.0 / static_cast<double>(kFeatures));
        }
        return g;
    };
    const auto level_field = smooth_field();
    const auto amp_field = smooth_field();
    const double phase0 = 2.0 * std::numbers::pi * unit(rng);
    std::vector<double> level(n), amp(n), phase(n);
    for (std::size_t i = 0; i < n; ++i) {
        level[i] = c.level_min + (c.level_max - c.level_min) * 0.5 * (1.0 + std::tanh(level_field[i]));
        amp[i] = c.amplitude_min + (c.amplitude_max - c.amplitude_min) * 0.5 * (1.0 + std::tanh(amp_field[i]));
        phase[i] = phase0 + c.phase_jitter * normal(rng);
    }
    for (auto [a, b] : r.pairs) phase[b] = phase[a];

    std::vector<double> flow(n * T, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < T; ++t) {
            const double slot = static_cast<double>(t % c.steps_per_day) / static_cast<double>(c.steps_per_day);
            flow[i * T + t] = level[i] + amp[i] * std::sin(2.0 * std::numbers::pi * slot + phase[i]);
        }

    // Diffusion along the normalized adjacency; burn-in of one day.
    if (c.noise_scale > 0.0) {
        const std::size_t burn = c.steps_per_day;
        std::vector<double> d(n, 0.0), next(n);
        for (std::size_t t = 0; t < T + burn; ++t) {
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += r.graph.normalized[i * n + j] * d[j];
                next[i] = c.diffusion_decay * acc + c.diffusion_ratio * c.noise_scale * normal(rng);
            }
            d.swap(next);
            if (t >= burn)
                for (std::size_t i = 0; i < n; ++i) flow[i * T + (t - burn)] += d[i];
        }
    }

    // Lead-lag latent signals.
    const double innovation = std::sqrt(1.0 - c.latent_ar * c.latent_ar);
    for (auto [a, b] : r.pairs) {
        const std::size_t len = T + c.latent_lag;
        std::vector<double> z(len);
        double state = normal(rng);
        for (std::size_t k = 0; k < 200; ++k) state = c.latent_ar * state + innovation * normal(rng);
        for (auto& v : z) {
            state = c.latent_ar * state + innovation * normal(rng);
            v = state;
        }
        // z[k] is latent time k - lag.
        for (std::size_t t = 0; t < T; ++t) {
            flow[a * T + t] += c.latent_scale * z[t + c.latent_lag];
            flow[b * T + t] += c.latent_scale * z[t];
        }
    }

    r.raw.nodes = n;
    r.raw.steps = T;
    r.raw.features = 3;
    r.raw.values.assign(n * 3 * T, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < T; ++t) {
            double f = flow[i * T + t];
            if (c.noise_scale > 0.0) f += c.noise_scale * normal(rng);
            const double dev = f - level[i];
            double speed = 65.0 - 4.0 * dev;
            double occ = 0.08 + 0.01 * dev;
            if (c.noise_scale > 0.0) {
                speed += c.noise_scale * normal(rng);
                occ += 0.01 * c.noise_scale * normal(rng);
            }
            r.raw.values[(i * 3 + 0) * T + t] = f;
            r.raw.values[(i * 3 + 1) * T + t] = speed;
            r.raw.values[(i * 3 + 2) * T + t] = occ;
        }

    DatasetConfig dc = synth_dataset_config(c);
    r.dataset = prepare_dataset(r.raw.values, n, 3, T, dc);
    return r;
}

} // namespace tsfusion
