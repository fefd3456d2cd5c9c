#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tsfusion/dataset.hpp"
#include "tsfusion/errors.hpp"

namespace tsfusion {

struct ErrorMetrics {
    double mae = 0.0;
    double rmse = 0.0;
};

/// Accumulates absolute and squared errors across calls.
class MetricAccumulator {
public:
    void add(double prediction, double truth) {
        const double e = prediction - truth;
        abs_sum_ += std::abs(e);
        sq_sum_ += e * e;
        ++count_;
    }
    std::size_t count() const { return count_; }
    ErrorMetrics result() const {
        if (count_ == 0) throw DimensionError("metrics: no values to score");
        const double n = static_cast<double>(count_);
        return {abs_sum_ / n, std::sqrt(sq_sum_ / n)};
    }

private:
    double abs_sum_ = 0.0;
    double sq_sum_ = 0.0;
    std::size_t count_ = 0;
};

inline ErrorMetrics metrics(const std::vector<double>& prediction, const std::vector<double>& truth) {
    if (prediction.size() != truth.size()) {
        throw DimensionError("metrics: prediction has " + std::to_string(prediction.size()) + " values, truth has " +
                             std::to_string(truth.size()));
    }
    MetricAccumulator acc;
    for (std::size_t i = 0; i < truth.size(); ++i) acc.add(prediction[i], truth[i]);
    return acc.result();
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for fewer than two values.
inline double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw DimensionError("spearman: need two equal-length series of length >= 2");
    auto rx = ranks(x), ry = ranks(y);
    const double mx = mean_of(rx), my = mean_of(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Historical average

/// Per (node, feature, time-of-day slot) means of the training split, in raw units.
struct HistoricalAverage {
    std::size_t nodes = 0;
    std::size_t features = 0;
    std::size_t slots = 0;
    std::vector<double> slot_mean;  // [N × F × slots]
    std::vector<std::string> warnings;

    double predict(std::size_t node, std::size_t feature, std::size_t t) const {
        return slot_mean[(node * features + feature) * slots + t % slots];
    }
};

inline HistoricalAverage fit_historical_average(const TrafficDataset& ds) {
    HistoricalAverage ha;
    ha.nodes = ds.num_nodes;
    ha.features = ds.num_features;
    ha.slots = ds.steps_per_day;
    if (ha.slots == 0) throw ConfigError("historical average: steps_per_day must be positive");
    ha.slot_mean.assign(ha.nodes * ha.features * ha.slots, 0.0);
    std::vector<std::size_t> seen(ha.slot_mean.size(), 0);
    std::size_t empty_slots = 0;
    for (std::size_t n = 0; n < ds.num_nodes; ++n)
        for (std::size_t f = 0; f < ds.num_features; ++f) {
            double total = 0.0;
            for (std::size_t t = 0; t < ds.split; ++t) {
                const double x = ds.raw(n, f, t);
                const std::size_t cell = (n * ha.features + f) * ha.slots + t % ha.slots;
                ++seen[cell];
                ha.slot_mean[cell] += (x - ha.slot_mean[cell]) / static_cast<double>(seen[cell]);
                total += x;
            }
            const double fallback = total / static_cast<double>(ds.split);
            for (std::size_t s = 0; s < ha.slots; ++s) {
                const std::size_t cell = (n * ha.features + f) * ha.slots + s;
                if (seen[cell] == 0) {
                    ha.slot_mean[cell] = fallback;
                    ++empty_slots;
                }
            }
        }
    if (empty_slots > 0) {
        ha.warnings.push_back("historical average: " + std::to_string(empty_slots) +
                              " (node, feature, slot) cells have no training values; using the series mean");
    }
    return ha;
}

// ---------------------------------------------------------------------------
// Horizon bucketing

/// Forecast origins scored at horizon step `step` (1-based). Every bucket
/// scores the same absolute target times: those reachable from a test origin
/// at the largest requested step. Bucket for step s uses origins
/// t0 = target - (s - 1).
inline std::vector<std::size_t> aligned_origins(const std::vector<std::size_t>& test_origins,
                                                const std::vector<std::size_t>& steps, std::size_t step) {
    if (test_origins.empty()) throw InsufficientHistoryError("no test windows to evaluate");
    const std::size_t max_step = *std::max_element(steps.begin(), steps.end());
    const std::size_t min_step = *std::min_element(steps.begin(), steps.end());
    const std::size_t first_target = test_origins.front() + max_step - 1;
    const std::size_t last_target = test_origins.back() + min_step - 1;
    std::vector<std::size_t> out;
    for (std::size_t target = first_target; target <= last_target; ++target) out.push_back(target - (step - 1));
    return out;
}

} // namespace tsfusion
