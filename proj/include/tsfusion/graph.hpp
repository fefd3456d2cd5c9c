#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tsfusion/errors.hpp"

namespace tsfusion {

inline constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

/// Minimum-hop route between two stations. `nodes` runs from source to
/// destination inclusive; a route from a node to itself is just {i}.
struct HopPath {
    bool reachable = false;
    std::vector<std::size_t> nodes;

    std::size_t hops() const { return nodes.empty() ? 0 : nodes.size() - 1; }
};

/// Static sensor graph. Entry (i, j) of a matrix is row i, column j; a
/// nonzero adjacency weight (i, j) is the directed edge i -> j.
struct TrafficGraph {
    std::size_t num_nodes = 0;
    std::vector<double> adjacency;
    std::vector<double> normalized;
    std::vector<std::size_t> in_degree;
    std::vector<std::size_t> out_degree;
    std::vector<HopPath> hop_paths;
    std::size_t edge_feature_dim = 1;
    // [N × N × edge_feature_dim], zero where there is no edge.
    std::vector<double> edge_features;

    double weight(std::size_t i, std::size_t j) const { return adjacency[i * num_nodes + j]; }
    bool has_edge(std::size_t i, std::size_t j) const { return weight(i, j) > 0.0; }
    const HopPath& path(std::size_t i, std::size_t j) const { return hop_paths[i * num_nodes + j]; }

    std::size_t edge_count() const {
        std::size_t c = 0;
        for (double w : adjacency) c += w > 0.0;
        return c;
    }
    std::size_t max_in_degree() const {
        std::size_t m = 0;
        for (auto d : in_degree) m = std::max(m, d);
        return m;
    }
    std::size_t max_out_degree() const {
        std::size_t m = 0;
        for (auto d : out_degree) m = std::max(m, d);
        return m;
    }

    /// Mean edge feature along each shortest path: [N·N × edge_feature_dim].
    /// Rows for i == j and for unreachable pairs are zero.
    std::vector<double> path_mean_features() const {
        const std::size_t n = num_nodes, de = edge_feature_dim;
        std::vector<double> out(n * n * de, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const HopPath& p = path(i, j);
                if (!p.reachable || p.hops() == 0) continue;
                double* row = out.data() + (i * n + j) * de;
                for (std::size_t s = 0; s + 1 < p.nodes.size(); ++s) {
                    const double* e = edge_features.data() + (p.nodes[s] * n + p.nodes[s + 1]) * de;
                    for (std::size_t k = 0; k < de; ++k) row[k] += e[k];
                }
                for (std::size_t k = 0; k < de; ++k) row[k] /= static_cast<double>(p.hops());
            }
        return out;
    }
};

/// D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I (row sums).
inline std::vector<double> normalize_adjacency(std::span<const double> adjacency, std::size_t n) {
    if (adjacency.size() != n * n) throw DimensionError("normalize_adjacency: expected an N x N matrix");
    std::vector<double> deg(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        deg[i] = 1.0;
        for (std::size_t j = 0; j < n; ++j) deg[i] += adjacency[i * n + j];
    }
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double a = adjacency[i * n + j] + (i == j ? 1.0 : 0.0);
            out[i * n + j] = a / std::sqrt(deg[i] * deg[j]);
        }
    return out;
}

/// Hop counts from every source: result[s * n + t], kUnreachable if none.
inline std::vector<std::size_t> hop_distances(std::span<const double> adjacency, std::size_t n) {
    std::vector<std::size_t> dist(n * n, kUnreachable);
    std::deque<std::size_t> queue;
    for (std::size_t s = 0; s < n; ++s) {
        dist[s * n + s] = 0;
        queue.assign(1, s);
        while (!queue.empty()) {
            std::size_t u = queue.front();
            queue.pop_front();
            for (std::size_t v = 0; v < n; ++v) {
                if (adjacency[u * n + v] > 0.0 && dist[s * n + v] == kUnreachable) {
                    dist[s * n + v] = dist[s * n + u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    return dist;
}

/// Unweighted shortest paths for every ordered pair. Among minimum-hop routes
/// the lexicographically smallest node sequence is chosen: each step moves to
/// the lowest-index neighbor that is one hop closer to the destination.
inline std::vector<HopPath> shortest_paths(std::span<const double> adjacency, std::size_t n) {
    auto dist = hop_distances(adjacency, n);
    std::vector<HopPath> paths(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            HopPath& p = paths[i * n + j];
            if (dist[i * n + j] == kUnreachable) continue;
            p.reachable = true;
            p.nodes.push_back(i);
            std::size_t u = i;
            while (u != j) {
                const std::size_t remaining = dist[u * n + j];
                for (std::size_t v = 0; v < n; ++v) {
                    if (adjacency[u * n + v] > 0.0 && dist[v * n + j] == remaining - 1) {
                        u = v;
                        break;
                    }
                }
                p.nodes.push_back(u);
            }
        }
    return paths;
}

/// Fills every derived field from an adjacency matrix. Edge features default
/// to the scalar edge weight.
inline TrafficGraph graph_from_adjacency(std::vector<double> adjacency, std::size_t n) {
    if (adjacency.size() != n * n) throw DimensionError("graph_from_adjacency: expected an N x N matrix");
    TrafficGraph g;
    g.num_nodes = n;
    g.adjacency = std::move(adjacency);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double w = g.adjacency[i * n + j];
            if (!(w >= 0.0) || !std::isfinite(w)) {
                throw DataError("adjacency entry (" + std::to_string(i) + "," + std::to_string(j) +
                                ") must be finite and non-negative");
            }
        }
        if (g.adjacency[i * n + i] != 0.0) {
            throw DataError("adjacency diagonal entry " + std::to_string(i) + " must be zero");
        }
    }
    g.normalized = normalize_adjacency(g.adjacency, n);
    g.in_degree.assign(n, 0);
    g.out_degree.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (g.adjacency[i * n + j] > 0.0) {
                ++g.out_degree[i];
                ++g.in_degree[j];
            }
    g.hop_paths = shortest_paths(g.adjacency, n);
    g.edge_feature_dim = 1;
    g.edge_features = g.adjacency;
    return g;
}

/// Gaussian-kernel weights from road distances:
///   A_ij = exp(-d_ij^2 / sigma2)  if i != j and that value >= eps, else 0.
/// `distances` is N x N; +inf marks pairs with no road connection.
inline TrafficGraph build_adjacency(std::span<const double> distances, std::size_t n, double sigma2, double eps) {
    if (distances.size() != n * n) throw DimensionError("build_adjacency: expected an N x N distance matrix");
    if (!(sigma2 > 0.0)) throw ConfigError("build_adjacency: sigma2 must be positive");
    if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("build_adjacency: eps must lie in [0, 1)");
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double d = distances[i * n + j];
            if (std::isnan(d) || d < 0.0) {
                throw DataError("distance (" + std::to_string(i) + "," + std::to_string(j) +
                                ") is negative or NaN: " + std::to_string(d));
            }
            if (i == j) continue;
            const double w = std::exp(-(d * d) / sigma2);
            if (w >= eps) a[i * n + j] = w;
        }
    return graph_from_adjacency(std::move(a), n);
}

} // namespace tsfusion
