#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsfusion/graph.hpp"
#include "tsfusion/tensor.hpp"

namespace tsfusion {

inline const std::vector<std::string>& default_feature_names() {
    static const std::vector<std::string> names{"flow", "speed", "occupancy"};
    return names;
}

/// Values are stored normalized: x' = (x - mean) / scale, where scale is 1
/// (zero-mean normalization) unless standardization is requested.
struct TrafficDataset {
    std::size_t num_nodes = 0;
    std::size_t num_features = 0;
    std::size_t num_steps = 0;
    std::vector<double> values;  // [N × F × T]
    std::vector<std::string> feature_names;
    std::vector<std::string> feature_units;
    std::vector<double> feature_means;  // train split, raw units
    std::vector<double> feature_stds;   // train split, raw units
    std::vector<double> feature_scales; // divisor applied after centering
    double step_minutes = 5.0;
    std::size_t steps_per_day = 288;
    std::size_t split = 0;  // first test time index

    std::size_t index(std::size_t n, std::size_t f, std::size_t t) const { return (n * num_features + f) * num_steps + t; }
    double value(std::size_t n, std::size_t f, std::size_t t) const { return values[index(n, f, t)]; }
    double raw(std::size_t n, std::size_t f, std::size_t t) const { return denormalize(f, value(n, f, t)); }
    double denormalize(std::size_t f, double v) const { return v * feature_scales[f] + feature_means[f]; }
    double normalize(std::size_t f, double raw_value) const { return (raw_value - feature_means[f]) / feature_scales[f]; }
};

struct DatasetConfig {
    double sigma2 = 10.0;
    double eps = 0.5;
    // Squared distances are divided by this before the kernel is applied.
    double squared_distance_scale = 1e4;
    double train_fraction = 0.8;
    bool symmetric_distances = true;
    bool standardize = false;
    bool binary = false;
    double step_minutes = 5.0;
    std::size_t steps_per_day = 288;
};

/// In-place linear interpolation of NaN gaps; leading and trailing gaps take
/// the nearest observed value. Complete series are left untouched.
inline void interpolate_missing(std::span<double> series) {
    std::size_t first = series.size();
    for (std::size_t t = 0; t < series.size(); ++t)
        if (!std::isnan(series[t])) {
            first = t;
            break;
        }
    if (first == series.size()) throw DataError("series has no observed values");
    for (std::size_t t = 0; t < first; ++t) series[t] = series[first];
    std::size_t last = first;
    for (std::size_t t = first + 1; t < series.size(); ++t) {
        if (std::isnan(series[t])) continue;
        const std::size_t gap = t - last;
        for (std::size_t k = 1; k < gap; ++k) {
            const double w = static_cast<double>(k) / static_cast<double>(gap);
            series[last + k] = (1.0 - w) * series[last] + w * series[t];
        }
        last = t;
    }
    for (std::size_t t = last + 1; t < series.size(); ++t) series[t] = series[last];
}

/// Fills gaps and normalizes with train-split statistics only.
/// `raw` is [N × F × T] with NaN for missing entries.
inline TrafficDataset prepare_dataset(std::vector<double> raw, std::size_t nodes, std::size_t features,
                                      std::size_t steps, const DatasetConfig& config,
                                      std::vector<std::string> feature_names = {}) {
    if (raw.size() != nodes * features * steps) throw DimensionError("prepare_dataset: buffer size mismatch");
    if (!(config.train_fraction > 0.0 && config.train_fraction <= 1.0)) {
        throw ConfigError("train_fraction must lie in (0, 1]");
    }
    TrafficDataset ds;
    ds.num_nodes = nodes;
    ds.num_features = features;
    ds.num_steps = steps;
    ds.step_minutes = config.step_minutes;
    ds.steps_per_day = config.steps_per_day;
    ds.split = static_cast<std::size_t>(std::floor(config.train_fraction * static_cast<double>(steps)));
    if (ds.split == 0) throw ConfigError("train split is empty");
    if (feature_names.empty()) {
        for (std::size_t f = 0; f < features; ++f)
            feature_names.push_back(f < default_feature_names().size() ? default_feature_names()[f]
                                                                       : "feature" + std::to_string(f));
    }
    ds.feature_names = std::move(feature_names);
    for (const auto& name : ds.feature_names) {
        if (name == "flow") ds.feature_units.push_back("vehicles/5-min");
        else if (name == "speed") ds.feature_units.push_back("mph");
        else if (name == "occupancy") ds.feature_units.push_back("fraction");
        else ds.feature_units.push_back("");
    }
    for (std::size_t n = 0; n < nodes; ++n)
        for (std::size_t f = 0; f < features; ++f) {
            std::span<double> series(raw.data() + (n * features + f) * steps, steps);
            try {
                interpolate_missing(series);
            } catch (const DataError&) {
                throw DataError("unrecoverable series: node " + std::to_string(n) + " feature " +
                                ds.feature_names[f] + " has no observed values");
            }
        }
    ds.feature_means.assign(features, 0.0);
    ds.feature_stds.assign(features, 0.0);
    ds.feature_scales.assign(features, 1.0);
    const double count = static_cast<double>(nodes * ds.split);
    for (std::size_t f = 0; f < features; ++f) {
        double s = 0.0;
        for (std::size_t n = 0; n < nodes; ++n)
            for (std::size_t t = 0; t < ds.split; ++t) s += raw[(n * features + f) * steps + t];
        const double mu = s / count;
        double ss = 0.0;
        for (std::size_t n = 0; n < nodes; ++n)
            for (std::size_t t = 0; t < ds.split; ++t) {
                const double c = raw[(n * features + f) * steps + t] - mu;
                ss += c * c;
            }
        ds.feature_means[f] = mu;
        ds.feature_stds[f] = std::sqrt(ss / count);
        if (config.standardize && ds.feature_stds[f] > 0.0) ds.feature_scales[f] = ds.feature_stds[f];
    }
    ds.values = std::move(raw);
    for (std::size_t n = 0; n < nodes; ++n)
        for (std::size_t f = 0; f < features; ++f)
            for (std::size_t t = 0; t < steps; ++t) {
                double& v = ds.values[(n * features + f) * steps + t];
                v = (v - ds.feature_means[f]) / ds.feature_scales[f];
            }
    // Remove the residual rounding of the centering so the train-split mean is
    // zero to within accumulated round-off.
    for (std::size_t f = 0; f < features; ++f) {
        double s = 0.0;
        for (std::size_t n = 0; n < nodes; ++n)
            for (std::size_t t = 0; t < ds.split; ++t) s += ds.value(n, f, t);
        const double drift = s / count;
        if (drift == 0.0) continue;
        for (std::size_t n = 0; n < nodes; ++n)
            for (std::size_t t = 0; t < steps; ++t) ds.values[ds.index(n, f, t)] -= drift;
        ds.feature_means[f] += drift * ds.feature_scales[f];
    }
    return ds;
}

// ---------------------------------------------------------------------------
// File formats

struct RawTable {
    std::size_t nodes = 0;
    std::size_t steps = 0;
    std::size_t features = 3;
    std::vector<double> values;  // [N × F × T], NaN = missing
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    for (char c : line) {
        if (c == ',') {
            out.push_back(field);
            field.clear();
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    out.push_back(field);
    return out;
}

inline double parse_number(const std::string& s, const std::string& where) {
    if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw DataError(where + ": cannot parse '" + s + "'");
    }
    if (used != s.size()) throw DataError(where + ": cannot parse '" + s + "'");
    return v;
}

inline std::size_t parse_index(const std::string& s, const std::string& where) {
    double v = parse_number(s, where);
    if (std::isnan(v) || v < 0.0 || v != std::floor(v)) throw DataError(where + ": expected a non-negative integer, got '" + s + "'");
    return static_cast<std::size_t>(v);
}

struct Record {
    std::size_t time, node;
    double values[3];
};

inline RawTable assemble(const std::vector<Record>& records) {
    RawTable table;
    for (const auto& r : records) {
        table.nodes = std::max(table.nodes, r.node + 1);
        table.steps = std::max(table.steps, r.time + 1);
    }
    table.values.assign(table.nodes * table.features * table.steps, std::numeric_limits<double>::quiet_NaN());
    for (const auto& r : records)
        for (std::size_t f = 0; f < 3; ++f) table.values[(r.node * 3 + f) * table.steps + r.time] = r.values[f];
    return table;
}

} // namespace detail

/// CSV with header `time,node_id,flow,speed,occupancy`; empty fields are
/// missing values. Absent (time, node) records are missing as well.
inline RawTable read_data_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open data file " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw DataError(path.string() + ": empty file");
    auto header = detail::split_csv_line(line);
    const std::vector<std::string> expected{"time", "node_id", "flow", "speed", "occupancy"};
    if (header != expected) throw DataError(path.string() + ": header must be time,node_id,flow,speed,occupancy");
    std::vector<detail::Record> records;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = detail::split_csv_line(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (fields.size() != 5) throw DataError(where + ": expected 5 fields");
        detail::Record r{};
        r.time = detail::parse_index(fields[0], where);
        r.node = detail::parse_index(fields[1], where);
        for (std::size_t f = 0; f < 3; ++f) r.values[f] = detail::parse_number(fields[2 + f], where);
        records.push_back(r);
    }
    if (records.empty()) throw DataError(path.string() + ": no records");
    return detail::assemble(records);
}

/// Same record layout as the CSV, packed as five little-endian f64 per
/// record (time, node_id, flow, speed, occupancy); NaN marks missing.
inline RawTable read_data_binary(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open data file " + path.string());
    std::vector<detail::Record> records;
    double buf[5];
    while (is.read(reinterpret_cast<char*>(buf), sizeof(buf))) {
        detail::Record r{};
        if (!(buf[0] >= 0.0) || !(buf[1] >= 0.0)) throw DataError(path.string() + ": invalid time or node index");
        r.time = static_cast<std::size_t>(buf[0]);
        r.node = static_cast<std::size_t>(buf[1]);
        for (std::size_t f = 0; f < 3; ++f) r.values[f] = buf[2 + f];
        records.push_back(r);
    }
    if (is.gcount() != 0) throw DataError(path.string() + ": trailing partial record");
    if (records.empty()) throw DataError(path.string() + ": no records");
    return detail::assemble(records);
}

/// CSV with header `from,to,distance_miles`. Returns an N x N matrix with
/// +inf for unlisted pairs and 0 on the diagonal. With `symmetric`, a listed
/// pair also fills its unlisted reverse.
inline std::vector<double> read_distances_csv(const std::filesystem::path& path, std::size_t nodes, bool symmetric) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open distances file " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw DataError(path.string() + ": empty file");
    if (detail::split_csv_line(line) != std::vector<std::string>{"from", "to", "distance_miles"}) {
        throw DataError(path.string() + ": header must be from,to,distance_miles");
    }
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> d(nodes * nodes, inf);
    std::vector<std::uint8_t> listed(nodes * nodes, 0);
    for (std::size_t i = 0; i < nodes; ++i) d[i * nodes + i] = 0.0;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = detail::split_csv_line(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (fields.size() != 3) throw DataError(where + ": expected 3 fields");
        auto from = detail::parse_index(fields[0], where);
        auto to = detail::parse_index(fields[1], where);
        double dist = detail::parse_number(fields[2], where);
        if (from >= nodes || to >= nodes) {
            throw DataError(where + ": node id " + std::to_string(std::max(from, to)) +
                            " inconsistent with data file node count " + std::to_string(nodes));
        }
        if (std::isnan(dist) || dist < 0.0) {
            throw DataError(where + ": distance (" + std::to_string(from) + "," + std::to_string(to) + ") is negative or missing");
        }
        d[from * nodes + to] = dist;
        listed[from * nodes + to] = 1;
    }
    if (symmetric) {
        for (std::size_t i = 0; i < nodes; ++i)
            for (std::size_t j = 0; j < nodes; ++j)
                if (listed[i * nodes + j] && !listed[j * nodes + i]) d[j * nodes + i] = d[i * nodes + j];
    }
    return d;
}

inline TrafficGraph graph_from_distances(std::span<const double> distances, std::size_t nodes,
                                         const DatasetConfig& config) {
    // exp(-(d^2 / s) / sigma2) == exp(-d^2 / (sigma2 * s))
    return build_adjacency(distances, nodes, config.sigma2 * config.squared_distance_scale, config.eps);
}

/// Reads both files, fills gaps, normalizes, and builds the graph.
inline std::pair<TrafficDataset, TrafficGraph> load_dataset(const std::filesystem::path& data_path,
                                                            const std::filesystem::path& distances_path,
                                                            const DatasetConfig& config) {
    RawTable table = config.binary ? read_data_binary(data_path) : read_data_csv(data_path);
    auto distances = read_distances_csv(distances_path, table.nodes, config.symmetric_distances);
    auto ds = prepare_dataset(std::move(table.values), table.nodes, table.features, table.steps, config);
    auto graph = graph_from_distances(distances, table.nodes, config);
    return {std::move(ds), std::move(graph)};
}

inline void write_data_csv(const std::filesystem::path& path, const RawTable& table) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "time,node_id,flow,speed,occupancy\n";
    os << std::setprecision(17);
    for (std::size_t t = 0; t < table.steps; ++t)
        for (std::size_t n = 0; n < table.nodes; ++n) {
            os << t << ',' << n;
            for (std::size_t f = 0; f < 3; ++f) {
                os << ',';
                double v = f < table.features ? table.values[(n * table.features + f) * table.steps + t]
                                              : std::numeric_limits<double>::quiet_NaN();
                if (!std::isnan(v)) os << v;
            }
            os << '\n';
        }
}

inline void write_data_binary(const std::filesystem::path& path, const RawTable& table) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    for (std::size_t t = 0; t < table.steps; ++t)
        for (std::size_t n = 0; n < table.nodes; ++n) {
            double rec[5] = {static_cast<double>(t), static_cast<double>(n), 0, 0, 0};
            for (std::size_t f = 0; f < 3; ++f)
                rec[2 + f] = f < table.features ? table.values[(n * table.features + f) * table.steps + t]
                                                : std::numeric_limits<double>::quiet_NaN();
            os.write(reinterpret_cast<const char*>(rec), sizeof(rec));
        }
}

/// Lists every finite off-diagonal distance.
inline void write_distances_csv(const std::filesystem::path& path, std::span<const double> distances,
                                std::size_t nodes) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "from,to,distance_miles\n" << std::setprecision(17);
    for (std::size_t i = 0; i < nodes; ++i)
        for (std::size_t j = 0; j < nodes; ++j) {
            double d = distances[i * nodes + j];
            if (i != j && std::isfinite(d)) os << i << ',' << j << ',' << d << '\n';
        }
}

// ---------------------------------------------------------------------------
// Windowing

/// Forecast origins t0 (first target step) of stride-1 windows. A window
/// belongs to train when its whole target precedes the split, to test when
/// its first target step is at or after the split, and is excluded when the
/// target straddles the split.
struct WindowIndex {
    std::size_t history = 0;
    std::size_t horizon = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    std::vector<std::size_t> excluded;

    std::size_t total() const { return train.size() + test.size() + excluded.size(); }
};

struct WindowSample {
    Tensor history;  // [N × F × M]
    Tensor target;   // [N × F_target × H]
    std::size_t t0 = 0;
};

inline WindowIndex make_windows(const TrafficDataset& ds, std::size_t history, std::size_t horizon) {
    if (history < 1 || horizon < 1) throw ConfigError("window history and horizon must be at least 1");
    if (history + horizon > ds.num_steps) {
        throw InsufficientHistoryError("insufficient data: history " + std::to_string(history) + " + horizon " +
                                       std::to_string(horizon) + " exceeds " + std::to_string(ds.num_steps) +
                                       " time steps");
    }
    WindowIndex idx;
    idx.history = history;
    idx.horizon = horizon;
    for (std::size_t t0 = history; t0 + horizon <= ds.num_steps; ++t0) {
        if (t0 + horizon <= ds.split) idx.train.push_back(t0);
        else if (t0 >= ds.split) idx.test.push_back(t0);
        else idx.excluded.push_back(t0);
    }
    return idx;
}

/// History block [t0 - M, t0) over all features (normalized values).
inline Tensor history_block(const TrafficDataset& ds, std::size_t t0, std::size_t history) {
    std::vector<double> h(ds.num_nodes * ds.num_features * history);
    for (std::size_t n = 0; n < ds.num_nodes; ++n)
        for (std::size_t f = 0; f < ds.num_features; ++f)
            for (std::size_t k = 0; k < history; ++k)
                h[(n * ds.num_features + f) * history + k] = ds.value(n, f, t0 - history + k);
    return Tensor({ds.num_nodes, ds.num_features, history}, std::move(h));
}

/// Target block [t0, t0 + H) over the selected features (normalized values).
inline Tensor target_block(const TrafficDataset& ds, std::size_t t0, std::size_t horizon,
                           const std::vector<std::size_t>& target_features) {
    const std::size_t ft = target_features.size();
    std::vector<double> y(ds.num_nodes * ft * horizon);
    for (std::size_t n = 0; n < ds.num_nodes; ++n)
        for (std::size_t f = 0; f < ft; ++f)
            for (std::size_t k = 0; k < horizon; ++k)
                y[(n * ft + f) * horizon + k] = ds.value(n, target_features[f], t0 + k);
    return Tensor({ds.num_nodes, ft, horizon}, std::move(y));
}

inline WindowSample window_at(const TrafficDataset& ds, std::size_t t0, std::size_t history, std::size_t horizon,
                              const std::vector<std::size_t>& target_features) {
    if (t0 < history || t0 + horizon > ds.num_steps) throw DimensionError("window origin out of range");
    return {history_block(ds, t0, history), target_block(ds, t0, horizon, target_features), t0};
}

} // namespace tsfusion
