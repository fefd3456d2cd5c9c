#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsfusion/attack.hpp"
#include "tsfusion/metrics.hpp"
#include "tsfusion/parallel.hpp"
#include "tsfusion/trainer.hpp"

namespace tsfusion {

// ---------------------------------------------------------------------------
// Input perturbations (normalized space, evaluation inputs only)

/// Per-feature training standard deviations expressed in normalized units.
inline std::vector<double> normalized_feature_stds(const TrafficDataset& ds) {
    std::vector<double> s(ds.num_features);
    for (std::size_t f = 0; f < ds.num_features; ++f) s[f] = ds.feature_stds[f] / ds.feature_scales[f];
    return s;
}

/// X + η·σ_f·ε with ε ~ N(0, 1) drawn from a generator seeded by `seed`.
/// x is [N × F × T]; `feature_std` has F entries.
inline Tensor gaussian_perturb(const Tensor& x, double eta, const std::vector<double>& feature_std, std::uint64_t seed) {
    if (eta < 0.0) throw ConfigError("gaussian noise level must be non-negative");
    detail::require_rank(x, 3, "gaussian_perturb");
    if (feature_std.size() != x.dim(1)) throw DimensionError("gaussian_perturb: feature std count mismatch");
    if (eta == 0.0) return x.detach();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> out(x.data().begin(), x.data().end());
    const std::size_t nodes = x.dim(0), feats = x.dim(1), steps = x.dim(2);
    for (std::size_t n = 0; n < nodes; ++n)
        for (std::size_t f = 0; f < feats; ++f)
            for (std::size_t t = 0; t < steps; ++t) out[(n * feats + f) * steps + t] += eta * feature_std[f] * normal(rng);
    return Tensor(x.shape(), std::move(out));
}

/// Zeroes exactly round(ratio · numel) entries chosen uniformly without
/// replacement.
inline Tensor mask_missing(const Tensor& x, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("missing ratio must lie in [0, 1)");
    if (ratio == 0.0) return x.detach();
    std::vector<std::size_t> idx(x.numel());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(x.numel())));
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < count; ++i) out[idx[i]] = 0.0;
    return Tensor(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Per-horizon evaluation

/// Returns the (possibly perturbed) model input for the window at t0.
using InputTransform = std::function<Tensor(const Tensor& history, const Tensor& target, std::size_t t0)>;

struct HorizonMetrics {
    std::size_t step = 0;
    double minutes = 0.0;
    ErrorMetrics metrics;
};

namespace detail {

inline std::vector<std::size_t> union_origins(const std::vector<std::size_t>& test, const std::vector<std::size_t>& steps) {
    std::vector<std::size_t> all;
    for (auto s : steps) {
        auto o = aligned_origins(test, steps, s);
        all.insert(all.end(), o.begin(), o.end());
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    return all;
}

template <class Predict>
std::vector<HorizonMetrics> bucket_metrics(const TrafficDataset& ds, const std::vector<std::size_t>& test,
                                           const std::vector<std::size_t>& steps,
                                           const std::vector<std::size_t>& target_features, Predict&& pred) {
    std::vector<HorizonMetrics> out;
    for (auto s : steps) {
        MetricAccumulator acc;
        for (std::size_t t0 : aligned_origins(test, steps, s)) {
            const std::size_t t = t0 + s - 1;
            for (std::size_t n = 0; n < ds.num_nodes; ++n)
                for (std::size_t f = 0; f < target_features.size(); ++f) {
                    const std::size_t feat = target_features[f];
                    acc.add(pred(t0, n, f, s - 1), ds.raw(n, feat, t));
                }
        }
        out.push_back({s, static_cast<double>(s) * ds.step_minutes, acc.result()});
    }
    return out;
}

} // namespace detail

/// Model metrics per horizon step, each bucket over the same target times.
/// `transform` perturbs each window's input; parallel workers are used only
/// when `parallel` is set (the transform must then be thread-safe).
inline std::vector<HorizonMetrics> evaluate_horizons(Model& model, const TrafficDataset& ds,
                                                     const InputTransform& transform = nullptr, bool parallel = false) {
    const auto& c = model.config();
    const WindowIndex w = make_windows(ds, c.M, c.H);
    const auto origins = detail::union_origins(w.test, c.horizon_steps);
    std::vector<Tensor> forecasts(origins.size());
    auto run = [&](std::size_t i) {
        const std::size_t t0 = origins[i];
        Tensor x = history_block(ds, t0, c.M);
        if (transform) x = transform(x, target_block(ds, t0, c.H, c.target_features), t0);
        NoGradScope no_grad;
        forecasts[i] = model.forward(x, Mode::eval).forecast;
    };
    if (parallel) parallel_for(origins.size(), run);
    else
        for (std::size_t i = 0; i < origins.size(); ++i) run(i);
    const std::size_t first = origins.front();
    std::vector<std::size_t> slot(origins.back() - first + 1, 0);
    for (std::size_t i = 0; i < origins.size(); ++i) slot[origins[i] - first] = i;
    return detail::bucket_metrics(ds, w.test, c.horizon_steps, c.target_features,
                                  [&](std::size_t t0, std::size_t n, std::size_t f, std::size_t k) {
                                      const std::size_t feat = c.target_features[f];
                                      return ds.denormalize(feat, forecasts[slot[t0 - first]].at(n, f, k));
                                  });
}

/// Historical-average metrics on the same buckets as evaluate_horizons.
inline std::vector<HorizonMetrics> evaluate_ha_horizons(const HistoricalAverage& ha, const TrafficDataset& ds,
                                                        std::size_t history, std::size_t horizon,
                                                        const std::vector<std::size_t>& steps,
                                                        const std::vector<std::size_t>& target_features) {
    const WindowIndex w = make_windows(ds, history, horizon);
    return detail::bucket_metrics(ds, w.test, steps, target_features,
                                  [&](std::size_t t0, std::size_t n, std::size_t f, std::size_t k) {
                                      return ha.predict(n, target_features[f], t0 + k);
                                  });
}

/// HA forecast for the window at t0 in raw units, [N × F_t × H].
inline Tensor ha_forecast(const HistoricalAverage& ha, std::size_t t0, std::size_t horizon,
                          const std::vector<std::size_t>& target_features) {
    const std::size_t ft = target_features.size();
    std::vector<double> y(ha.nodes * ft * horizon);
    for (std::size_t n = 0; n < ha.nodes; ++n)
        for (std::size_t f = 0; f < ft; ++f)
            for (std::size_t k = 0; k < horizon; ++k) y[(n * ft + f) * horizon + k] = ha.predict(n, target_features[f], t0 + k);
    return Tensor({ha.nodes, ft, horizon}, std::move(y));
}

// ---------------------------------------------------------------------------
// Reports

enum class Protocol { none, gaussian, missing, adversarial };

inline std::string protocol_name(Protocol p) {
    switch (p) {
        case Protocol::none: return "none";
        case Protocol::gaussian: return "gaussian";
        case Protocol::missing: return "missing";
        case Protocol::adversarial: return "adversarial";
    }
    return "none";
}

inline Protocol parse_protocol(const std::string& s) {
    if (s == "none" || s == "clean") return Protocol::none;
    if (s == "gaussian") return Protocol::gaussian;
    if (s == "missing") return Protocol::missing;
    if (s == "adversarial" || s == "fgsm") return Protocol::adversarial;
    throw ConfigError("unknown protocol '" + s + "' (expected none, gaussian, missing, adversarial)");
}

struct ReportRow {
    std::string protocol = "none";
    double level = 0.0;
    double horizon_min = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    double std_mae = 0.0;
    double std_rmse = 0.0;
    std::size_t repeats = 1;
};

/// Collapses repeated per-horizon evaluations into mean and sample-std rows.
inline std::vector<ReportRow> summarize(const std::string& protocol, double level,
                                        const std::vector<std::vector<HorizonMetrics>>& runs) {
    std::vector<ReportRow> rows;
    if (runs.empty()) return rows;
    for (std::size_t h = 0; h < runs.front().size(); ++h) {
        std::vector<double> maes, rmses;
        for (const auto& r : runs) {
            maes.push_back(r[h].metrics.mae);
            rmses.push_back(r[h].metrics.rmse);
        }
        rows.push_back({protocol, level, runs.front()[h].minutes, mean_of(maes), mean_of(rmses), stddev_of(maes),
                        stddev_of(rmses), runs.size()});
    }
    return rows;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Evaluates one protocol at each level with seeded repeats. Rows are ordered
/// by level, then horizon.
inline std::vector<ReportRow> robustness_sweep(Model& model, const TrafficDataset& ds, Protocol protocol,
                                               const std::vector<double>& levels, std::size_t repeats,
                                               std::uint64_t seed) {
    if (repeats == 0) throw ConfigError("robustness sweep needs at least one repeat");
    const auto stds = normalized_feature_stds(ds);
    std::vector<ReportRow> rows;
    for (std::size_t li = 0; li < levels.size(); ++li) {
        const double level = levels[li];
        std::vector<std::vector<HorizonMetrics>> runs;
        for (std::size_t r = 0; r < repeats; ++r) {
            const std::uint64_t base = mix_seed(mix_seed(seed, li), r);
            InputTransform tf;
            bool parallel = true;
            if (level != 0.0 && protocol == Protocol::gaussian) {
                tf = [&, base, level](const Tensor& x, const Tensor&, std::size_t t0) {
                    return gaussian_perturb(x, level, stds, mix_seed(base, t0));
                };
            } else if (level != 0.0 && protocol == Protocol::missing) {
                tf = [base, level](const Tensor& x, const Tensor&, std::size_t t0) {
                    return mask_missing(x, level, mix_seed(base, t0));
                };
            } else if (level != 0.0 && protocol == Protocol::adversarial) {
                parallel = false;
                tf = [&model, level](const Tensor& x, const Tensor& y, std::size_t) {
                    return adversarial_perturb(model, x, y, level, Mode::eval);
                };
            }
            runs.push_back(evaluate_horizons(model, ds, tf, parallel));
        }
        auto part = summarize(protocol_name(protocol), level, runs);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    return rows;
}

inline void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "protocol,level,horizon_min,mae,rmse,std_mae,std_rmse,repeats\n";
    for (const auto& r : rows) {
        out << r.protocol << ',' << format_double(r.level) << ',' << format_double(r.horizon_min) << ','
            << format_double(r.mae) << ',' << format_double(r.rmse) << ',' << format_double(r.std_mae) << ','
            << format_double(r.std_rmse) << ',' << r.repeats << '\n';
    }
}

inline nlohmann::json report_json(const std::vector<ReportRow>& rows, const nlohmann::json& provenance) {
    nlohmann::json j;
    j["columns"] = {"protocol", "level", "horizon_min", "mae", "rmse", "std_mae", "std_rmse", "repeats"};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"protocol", r.protocol},
                             {"level", r.level},
                             {"horizon_min", r.horizon_min},
                             {"mae", r.mae},
                             {"rmse", r.rmse},
                             {"std_mae", r.std_mae},
                             {"std_rmse", r.std_rmse},
                             {"repeats", r.repeats}});
    }
    j["provenance"] = provenance;
    return j;
}

} // namespace tsfusion
