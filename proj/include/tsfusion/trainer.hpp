#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include "tsfusion/attack.hpp"
#include "tsfusion/checkpoint.hpp"
#include "tsfusion/dataset.hpp"
#include "tsfusion/metrics.hpp"
#include "tsfusion/model.hpp"
#include "tsfusion/parallel.hpp"

namespace tsfusion {

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }
    std::size_t steps() const { return t_; }

    /// Updates every parameter from its accumulated gradient (missing
    /// gradients count as zero).
    void step(ParameterSet& ps) {
        const auto& items = ps.items();
        if (m_.empty()) {
            for (const auto& [_, p] : items) {
                m_.emplace_back(p.numel(), 0.0);
                v_.emplace_back(p.numel(), 0.0);
            }
        }
        if (m_.size() != items.size()) throw Error("adam: parameter set changed size");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < items.size(); ++k) {
            Tensor p = items[k].second;
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto data = p.mutable_data();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < data.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mh = m[i] / c1;
                const double vh = v[i] / c2;
                data[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_mae = std::numeric_limits<double>::quiet_NaN();
    double val_rmse = std::numeric_limits<double>::quiet_NaN();
};

struct TrainOptions {
    bool adversarial = false;
    double adversarial_alpha = 0.05;
    double adversarial_mix = 0.5;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::vector<std::size_t> train_origins;
    std::vector<std::size_t> validation_origins;
    std::size_t best_epoch = 0;
    bool stopped_early = false;
};

/// Splits training origins chronologically: the last `fraction` of them
/// (at least one when the fraction is positive) become validation origins.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(
    const std::vector<std::size_t>& train, double fraction) {
    std::size_t nval = 0;
    if (fraction > 0.0 && train.size() >= 2) {
        nval = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(train.size()))));
        nval = std::min(nval, train.size() - 1);
    }
    std::vector<std::size_t> fit(train.begin(), train.end() - static_cast<std::ptrdiff_t>(nval));
    std::vector<std::size_t> val(train.end() - static_cast<std::ptrdiff_t>(nval), train.end());
    return {fit, val};
}

/// Forecast for the window starting at `t0`, normalized units, [N × F_t × H].
inline Tensor predict(Model& model, const TrafficDataset& ds, std::size_t t0) {
    NoGradScope no_grad;
    const auto& c = model.config();
    return model.forward(history_block(ds, t0, c.M), Mode::eval).forecast;
}

/// MAE and RMSE in raw units over every node, target feature and step of the
/// given windows.
inline ErrorMetrics score_windows(Model& model, const TrafficDataset& ds, const std::vector<std::size_t>& origins) {
    const auto& c = model.config();
    MetricAccumulator acc;
    for (std::size_t t0 : origins) {
        Tensor y = predict(model, ds, t0);
        for (std::size_t n = 0; n < ds.num_nodes; ++n)
            for (std::size_t f = 0; f < c.target_features.size(); ++f)
                for (std::size_t k = 0; k < c.H; ++k) {
                    const std::size_t feat = c.target_features[f];
                    acc.add(ds.denormalize(feat, y.at(n, f, k)), ds.raw(n, feat, t0 + k));
                }
    }
    return acc.result();
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

/// Mini-batch Adam on the mean squared error of normalized targets.
inline TrainResult train(Model& model, const TrafficDataset& ds, const TrainOptions& options = {}) {
    const ModelConfig& c = model.config();
    if (options.adversarial && !(options.adversarial_mix >= 0.0 && options.adversarial_mix <= 1.0)) {
        throw ConfigError("adversarial mix must lie in [0, 1]");
    }
    const WindowIndex windows = make_windows(ds, c.M, c.H);
    TrainResult result;
    std::tie(result.train_origins, result.validation_origins) = split_validation(windows.train, c.validation_fraction);
    if (result.train_origins.empty()) throw InsufficientHistoryError("no training windows: the train split is too short");

    Adam adam(c.learning_rate);
    Rng shuffle_rng(c.seed + 0x5eedULL);
    std::vector<std::size_t> order = result.train_origins;
    double best_val = std::numeric_limits<double>::infinity();
    NamedTensors best_state;
    std::size_t since_best = 0;
    const bool with_adv = options.adversarial && options.adversarial_mix < 1.0;
    const double mix = options.adversarial ? options.adversarial_mix : 1.0;

    for (std::size_t epoch = 1; epoch <= c.epoch_count; ++epoch) {
        const double lr = c.learning_rate * std::pow(c.lr_decay, static_cast<double>(epoch - 1));
        adam.set_learning_rate(lr);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += c.batch_size) {
            const std::size_t e = std::min(order.size(), b + c.batch_size);
            const double inv = 1.0 / static_cast<double>(e - b);
            model.parameters().zero_grad();
            std::vector<Tensor> adv_inputs;
            if (with_adv) {
                for (std::size_t i = b; i < e; ++i) {
                    auto s = window_at(ds, order[i], c.M, c.H, c.target_features);
                    adv_inputs.push_back(
                        adversarial_perturb(model, s.history, s.target, options.adversarial_alpha, Mode::attack));
                }
            }
            Tape tape;
            Tensor loss;
            {
                TapeScope scope(tape);
                std::vector<Tensor> terms;
                for (std::size_t i = b; i < e; ++i) {
                    auto s = window_at(ds, order[i], c.M, c.H, c.target_features);
                    Tensor clean = mse_loss(model.forward(s.history, Mode::train).forecast, s.target);
                    if (with_adv) {
                        Tensor adv = mse_loss(model.forward(adv_inputs[i - b], Mode::train).forecast, s.target);
                        terms.push_back(add(scale(clean, mix), scale(adv, 1.0 - mix)));
                    } else {
                        terms.push_back(clean);
                    }
                }
                loss = terms.front();
                for (std::size_t i = 1; i < terms.size(); ++i) loss = add(loss, terms[i]);
                loss = scale(loss, inv);
            }
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                   " (learning rate " + format_double(lr) + ")");
            }
            tape.backward(loss);
            adam.step(model.parameters());
            loss_sum += value * static_cast<double>(e - b);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        if (!result.validation_origins.empty()) {
            auto m = score_windows(model, ds, result.validation_origins);
            rec.val_mae = m.mae;
            rec.val_rmse = m.rmse;
        }
        result.history.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);

        if (c.early_stopping_patience > 0 && !result.validation_origins.empty()) {
            if (rec.val_mae < best_val) {
                best_val = rec.val_mae;
                result.best_epoch = epoch;
                best_state.clear();
                for (const auto& [name, t] : model.state()) best_state.emplace_back(name, t.detach());
                since_best = 0;
            } else if (++since_best >= c.early_stopping_patience) {
                result.stopped_early = true;
                model.load_state(best_state);
                break;
            }
        } else {
            result.best_epoch = epoch;
        }
    }
    if (!result.stopped_early && !best_state.empty() && result.best_epoch != result.history.size()) {
        model.load_state(best_state);
    }
    return result;
}

inline void write_loss_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,train_loss,val_mae,val_rmse\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_mae) << ','
            << format_double(r.val_rmse) << '\n';
    }
}

inline void save_model(const Model& model, const std::filesystem::path& path) { save_checkpoint(path, model.state()); }

inline void load_model(Model& model, const std::filesystem::path& path) { model.load_state(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Grid search

struct GridTrial {
    std::size_t index = 0;
    ModelConfig config;
    double val_mae = 0.0;
    double val_rmse = 0.0;
    double final_train_loss = 0.0;
};

struct GridResult {
    ModelConfig best;
    std::size_t best_index = 0;
    std::vector<GridTrial> trials;
};

/// Cartesian product of overrides applied to `base`. `axes` maps config keys
/// to candidate JSON values; iteration order follows `axes` with the last
/// axis varying fastest.
inline std::vector<ModelConfig> expand_grid(const ModelConfig& base,
                                            const std::vector<std::pair<std::string, nlohmann::json>>& axes) {
    std::vector<ModelConfig> out;
    std::vector<std::size_t> pos(axes.size(), 0);
    for (const auto& [key, values] : axes) {
        if (!values.is_array() || values.empty()) throw ConfigError("grid axis '" + key + "' must be a non-empty list");
    }
    while (true) {
        nlohmann::json j = base;
        for (std::size_t a = 0; a < axes.size(); ++a) j[axes[a].first] = axes[a].second[pos[a]];
        ModelConfig c = base;
        from_json(j, c);
        c.validate();
        out.push_back(c);
        std::size_t a = axes.size();
        while (a > 0) {
            --a;
            if (++pos[a] < axes[a].second.size()) break;
            pos[a] = 0;
            if (a == 0) return out;
        }
        if (axes.empty()) return out;
    }
}

/// Trains each configuration and picks the lowest validation MAE; ties go to
/// the lower RMSE, then to the earlier grid entry.
inline GridResult grid_search(const std::vector<ModelConfig>& grid, const AblationFlags& flags,
                              const TrafficDataset& ds, const TrafficGraph& graph) {
    if (grid.empty()) throw ConfigError("grid search needs at least one configuration");
    GridResult r;
    r.trials.resize(grid.size());
    parallel_for(grid.size(), [&](std::size_t i) {
        ModelConfig c = grid[i];
        if (c.validation_fraction <= 0.0) c.validation_fraction = 0.1;
        Model model(c, flags, graph, ds.num_features);
        auto tr = train(model, ds);
        if (tr.validation_origins.empty()) throw InsufficientHistoryError("grid search: no validation windows");
        auto m = score_windows(model, ds, tr.validation_origins);
        r.trials[i] = {i, grid[i], m.mae, m.rmse, tr.history.empty() ? 0.0 : tr.history.back().train_loss};
    });
    for (std::size_t i = 1; i < r.trials.size(); ++i) {
        const auto& t = r.trials[i];
        const auto& b = r.trials[r.best_index];
        if (t.val_mae < b.val_mae || (t.val_mae == b.val_mae && t.val_rmse < b.val_rmse)) r.best_index = i;
    }
    r.best = grid[r.best_index];
    return r;
}

} // namespace tsfusion
