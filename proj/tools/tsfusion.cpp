// Command-line front end: synth, train, eval, ablate, robust, gridsearch and
// inspect-graph. Every run writes its outputs plus manifest.json into --out.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tsfusion/attack.hpp"
#include "tsfusion/evaluate.hpp"
#include "tsfusion/manifest.hpp"
#include "tsfusion/svg.hpp"
#include "tsfusion/synth.hpp"
#include "tsfusion/trainer.hpp"

namespace fs = std::filesystem;
using namespace tsfusion;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kData = 3, kDiverged = 4 };

int report_error(int code, const std::string& kind, const std::string& message) {
    json j = {{"error", {{"kind", kind}, {"exit_code", code}, {"message", message}}}};
    std::cerr << j.dump() << std::endl;
    return code;
}

struct Options {
    std::string data;
    std::string out;
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<double> learning_rate;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> repeats;
    std::optional<std::size_t> steps_per_day;
    std::vector<std::string> variants;
    bool binary = false;
    bool plot = false;

    // eval / robust
    std::string checkpoint;
    std::vector<std::string> protocols{"gaussian"};
    std::vector<double> levels{0.1, 0.2, 0.3, 0.4, 0.5};
    bool adversarial = false;
    double alpha = 0.05;
    double mix = 0.5;

    // gridsearch
    std::string grid;

    // synth
    SynthConfig synth;
    std::size_t synth_pairs = 3;
};

struct Resolved {
    ModelConfig model;
    AblationFlags flags;
    std::size_t steps_per_day = 288;
    json as_json() const {
        json j = model;
        json f = flags;
        for (auto it = f.begin(); it != f.end(); ++it) j[it.key()] = it.value();
        j["steps_per_day"] = steps_per_day;
        return j;
    }
};

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(p.string() + ": invalid JSON (" + e.what() + ")");
    }
}

json parse_override_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        return text;
    }
}

// Defaults, then the dataset manifest's graph settings, then the config file,
// then --set overrides, then dedicated flags.
Resolved resolve(const Options& o, const std::string& variant_override = "") {
    json merged = ModelConfig{};
    std::size_t spd = 288;
    if (!o.data.empty() && fs::exists(fs::path(o.data) / "manifest.json")) {
        json m = read_json_file(fs::path(o.data) / "manifest.json");
        if (m.contains("config") && m["config"].is_object()) m = m["config"];
        if (m.contains("graph")) {
            const auto& g = m["graph"];
            if (g.contains("sigma2")) merged["sigma2"] = g["sigma2"];
            if (g.contains("eps")) merged["eps"] = g["eps"];
            if (g.contains("squared_distance_scale")) merged["squared_distance_scale"] = g["squared_distance_scale"];
        }
        if (m.contains("train_fraction")) merged["train_fraction"] = m["train_fraction"];
        if (m.contains("steps_per_day")) spd = m["steps_per_day"].get<std::size_t>();
    }
    AblationFlags flags;
    auto apply = [&](const json& j) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "steps_per_day") spd = it.value().get<std::size_t>();
            else if (it.key() == "variant") flags = AblationFlags::from_variant(it.value().get<std::string>());
            else if (it.key().rfind("no_", 0) == 0) {
                json f = flags;
                f[it.key()] = it.value();
                flags = f.get<AblationFlags>();
            } else merged[it.key()] = it.value();
        }
    };
    if (!o.config.empty()) {
        json c = read_json_file(o.config);
        if (!c.is_object()) throw ConfigError(o.config + ": config must be a JSON object");
        apply(c);
    }
    for (const auto& s : o.sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        apply(json{{s.substr(0, eq), parse_override_value(s.substr(eq + 1))}});
    }
    Resolved r;
    try {
        r.model = merged.get<ModelConfig>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (o.seed) r.model.seed = *o.seed;
    if (o.epochs) r.model.epoch_count = *o.epochs;
    if (o.learning_rate) r.model.learning_rate = *o.learning_rate;
    if (o.batch_size) r.model.batch_size = *o.batch_size;
    if (o.repeats) r.model.repeats = *o.repeats;
    if (o.steps_per_day) spd = *o.steps_per_day;
    if (!variant_override.empty()) flags = AblationFlags::from_variant(variant_override);
    else if (o.variants.size() == 1) flags = AblationFlags::from_variant(o.variants.front());
    r.model.validate();
    flags.validate();
    r.flags = flags;
    r.steps_per_day = spd;
    return r;
}

struct LoadedData {
    TrafficDataset dataset;
    TrafficGraph graph;
    json digests;
};

LoadedData load_data(const Options& o, const Resolved& r) {
    if (o.data.empty()) throw ConfigError("--data is required");
    const fs::path dir(o.data);
    const fs::path data_file = dir / (o.binary ? "data.bin" : "data.csv");
    const fs::path dist_file = dir / "distances.csv";
    DatasetConfig dc = r.model.dataset_config();
    dc.binary = o.binary;
    dc.steps_per_day = r.steps_per_day;
    auto [ds, graph] = load_dataset(data_file, dist_file, dc);
    LoadedData out{std::move(ds), std::move(graph), json::object()};
    out.digests[data_file.filename().string()] = file_digest(data_file);
    out.digests[dist_file.filename().string()] = file_digest(dist_file);
    return out;
}

fs::path prepare_out(const Options& o) {
    if (o.out.empty()) throw ConfigError("--out is required");
    fs::create_directories(o.out);
    return fs::path(o.out);
}

RunManifest start_manifest(const std::vector<std::string>& argv) {
    RunManifest m;
    m.command_line = argv;
    m.started = utc_timestamp();
    return m;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) throw DataError("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

std::vector<ReportRow> clean_report(Model& model, const TrafficDataset& ds) {
    return summarize("none", 0.0, {evaluate_horizons(model, ds, nullptr, true)});
}

void plot_horizons(const fs::path& p, const std::string& title, const std::vector<std::pair<std::string, std::vector<ReportRow>>>& reports) {
    LineChart chart{title, "horizon (min)", "error (raw units)", {}};
    for (const auto& [name, rows] : reports) {
        ChartSeries mae{name + " MAE", {}, {}}, rmse{name + " RMSE", {}, {}};
        for (const auto& r : rows) {
            mae.x.push_back(r.horizon_min);
            mae.y.push_back(r.mae);
            rmse.x.push_back(r.horizon_min);
            rmse.y.push_back(r.rmse);
        }
        chart.series.push_back(mae);
        chart.series.push_back(rmse);
    }
    write_svg(p, chart);
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o, const std::vector<std::string>& argv) {
    const fs::path out = prepare_out(o);
    RunManifest man = start_manifest(argv);
    SynthConfig sc = o.synth;
    if (sc.long_range_pairs.empty()) sc.auto_pairs = o.synth_pairs;
    auto r = synth_generate(sc);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
    const std::string data_name = o.binary ? "data.bin" : "data.csv";
    if (o.binary) write_data_binary(out / data_name, r.raw);
    else write_data_csv(out / data_name, r.raw);
    write_distances_csv(out / "distances.csv", r.distances, sc.nodes);
    man.seed = sc.seed;
    man.config = synth_manifest(sc, r);
    man.outputs = {data_name, "distances.csv"};
    man.finish(out);
    std::cout << "wrote " << sc.nodes << " nodes x " << sc.steps << " steps to " << out.string() << '\n';
    return kOk;
}

int cmd_train(const Options& o, const std::vector<std::string>& argv) {
    RunManifest man = start_manifest(argv);
    Resolved r = resolve(o);
    LoadedData d = load_data(o, r);
    const fs::path out = prepare_out(o);
    Model model(r.model, r.flags, d.graph, d.dataset.num_features);
    TrainOptions topt;
    topt.adversarial = o.adversarial;
    topt.adversarial_alpha = o.alpha;
    topt.adversarial_mix = o.mix;
    topt.on_epoch = [](const EpochRecord& e) {
        std::cout << "epoch " << e.epoch << " train_loss " << format_double(e.train_loss) << " val_mae "
                  << format_double(e.val_mae) << '\n';
    };
    auto tr = train(model, d.dataset, topt);
    save_model(model, out / "model.ckpt");
    write_loss_history(out / "loss_history.csv", tr.history);
    json cfg = r.as_json();
    write_json(out / "config.json", cfg);
    auto rows = clean_report(model, d.dataset);
    write_report_csv(out / "report.csv", rows);
    write_json(out / "report.json", report_json(rows, cfg));
    man.outputs = {"model.ckpt", "loss_history.csv", "config.json", "report.csv", "report.json"};
    if (o.plot) {
        LineChart chart{"training history", "epoch", "value", {{"train loss", {}, {}}, {"validation MAE", {}, {}}}};
        for (const auto& e : tr.history) {
            chart.series[0].x.push_back(static_cast<double>(e.epoch));
            chart.series[0].y.push_back(e.train_loss);
            chart.series[1].x.push_back(static_cast<double>(e.epoch));
            chart.series[1].y.push_back(e.val_mae);
        }
        write_svg(out / "loss_history.svg", chart);
        plot_horizons(out / "report.svg", "test error by horizon", {{r.flags.name(), rows}});
        man.outputs.push_back("loss_history.svg");
        man.outputs.push_back("report.svg");
    }
    man.config = cfg;
    man.seed = r.model.seed;
    man.dataset_digests = d.digests;
    man.extra["parameter_count"] = model.parameter_count();
    man.extra["best_epoch"] = tr.best_epoch;
    man.extra["adversarial"] = {{"enabled", o.adversarial}, {"alpha", o.alpha}, {"mix", o.mix}};
    man.finish(out);
    return kOk;
}

// Loads a trained model: config from --config or the checkpoint's sibling
// config.json.
Model load_trained(Options o, Resolved& r, LoadedData& d) {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    if (o.config.empty()) o.config = (fs::path(o.checkpoint).parent_path() / "config.json").string();
    r = resolve(o);
    d = load_data(o, r);
    Model model(r.model, r.flags, d.graph, d.dataset.num_features);
    load_model(model, o.checkpoint);
    return model;
}

int cmd_eval(const Options& o, const std::vector<std::string>& argv) {
    RunManifest man = start_manifest(argv);
    Resolved r;
    LoadedData d;
    Model model = load_trained(o, r, d);
    const fs::path out = prepare_out(o);
    auto rows = clean_report(model, d.dataset);
    json cfg = r.as_json();
    write_report_csv(out / "report.csv", rows);
    write_json(out / "report.json", report_json(rows, cfg));
    auto ha = fit_historical_average(d.dataset);
    for (const auto& w : ha.warnings) std::cerr << "warning: " << w << '\n';
    auto ha_rows = summarize("none", 0.0,
                             {evaluate_ha_horizons(ha, d.dataset, r.model.M, r.model.H, r.model.horizon_steps,
                                                   r.model.target_features)});
    write_report_csv(out / "ha_report.csv", ha_rows);
    man.outputs = {"report.csv", "report.json", "ha_report.csv"};
    if (o.plot) {
        plot_horizons(out / "report.svg", "test error by horizon", {{r.flags.name(), rows}, {"HA", ha_rows}});
        man.outputs.push_back("report.svg");
    }
    for (const auto& row : rows)
        std::cout << row.horizon_min << " min: MAE " << format_double(row.mae) << " RMSE " << format_double(row.rmse)
                  << '\n';
    man.config = cfg;
    man.seed = r.model.seed;
    man.dataset_digests = d.digests;
    man.dataset_digests["checkpoint"] = file_digest(o.checkpoint);
    man.finish(out);
    return kOk;
}

int cmd_ablate(const Options& o, const std::vector<std::string>& argv) {
    RunManifest man = start_manifest(argv);
    std::vector<std::string> variants = o.variants;
    if (variants.empty()) variants = {"full", "nG", "nL", "nFE", "nGate", "nRes"};
    Resolved base = resolve(o, variants.front());
    LoadedData d = load_data(o, base);
    const fs::path out = prepare_out(o);
    const std::size_t repeats = base.model.repeats;
    if (repeats == 0) throw ConfigError("repeats must be at least 1");

    std::vector<std::vector<HorizonMetrics>> results(variants.size() * repeats);
    parallel_for(results.size(), [&](std::size_t k) {
        const std::size_t v = k / repeats, rep = k % repeats;
        ModelConfig c = base.model;
        c.seed = base.model.seed + rep;
        Model model(c, AblationFlags::from_variant(variants[v]), d.graph, d.dataset.num_features);
        train(model, d.dataset);
        results[k] = evaluate_horizons(model, d.dataset);
    });

    std::ofstream summary(out / "ablation_summary.csv");
    if (!summary) throw DataError("cannot write ablation_summary.csv");
    summary << "variant,horizon_min,mae,rmse,std_mae,std_rmse,repeats\n";
    std::vector<std::pair<std::string, std::vector<ReportRow>>> plotted;
    json cfg = base.as_json();
    for (std::size_t v = 0; v < variants.size(); ++v) {
        std::vector<std::vector<HorizonMetrics>> runs(results.begin() + static_cast<std::ptrdiff_t>(v * repeats),
                                                      results.begin() + static_cast<std::ptrdiff_t>((v + 1) * repeats));
        auto rows = summarize("none", 0.0, runs);
        const std::string name = AblationFlags::from_variant(variants[v]).name();
        write_report_csv(out / ("report_" + name + ".csv"), rows);
        json vc = cfg;
        json f = AblationFlags::from_variant(variants[v]);
        for (auto it = f.begin(); it != f.end(); ++it) vc[it.key()] = it.value();
        write_json(out / ("report_" + name + ".json"), report_json(rows, vc));
        man.outputs.push_back("report_" + name + ".csv");
        man.outputs.push_back("report_" + name + ".json");
        for (const auto& r : rows) {
            summary << name << ',' << format_double(r.horizon_min) << ',' << format_double(r.mae) << ','
                    << format_double(r.rmse) << ',' << format_double(r.std_mae) << ',' << format_double(r.std_rmse)
                    << ',' << r.repeats << '\n';
            std::cout << name << ' ' << r.horizon_min << " min: MAE " << format_double(r.mae) << '\n';
        }
        plotted.emplace_back(name, rows);
    }
    summary.close();
    man.outputs.push_back("ablation_summary.csv");
    if (o.plot) {
        plot_horizons(out / "ablation.svg", "ablation: test error by horizon", plotted);
        man.outputs.push_back("ablation.svg");
    }
    man.config = cfg;
    man.config["variants"] = variants;
    man.seed = base.model.seed;
    man.dataset_digests = d.digests;
    man.finish(out);
    return kOk;
}

int cmd_robust(const Options& o, const std::vector<std::string>& argv) {
    RunManifest man = start_manifest(argv);
    Resolved r;
    LoadedData d;
    std::optional<Model> model;
    if (!o.checkpoint.empty()) {
        model.emplace(load_trained(o, r, d));
    } else {
        r = resolve(o);
        d = load_data(o, r);
        model.emplace(r.model, r.flags, d.graph, d.dataset.num_features);
        train(*model, d.dataset, {.adversarial = o.adversarial, .adversarial_alpha = o.alpha, .adversarial_mix = o.mix});
    }
    const fs::path out = prepare_out(o);
    const std::size_t repeats = o.repeats ? *o.repeats : r.model.repeats;
    std::vector<ReportRow> rows;
    for (const auto& p : o.protocols) {
        auto part = robustness_sweep(*model, d.dataset, parse_protocol(p), o.levels, repeats, r.model.seed);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    json cfg = r.as_json();
    write_report_csv(out / "robust_report.csv", rows);
    write_json(out / "robust_report.json", report_json(rows, cfg));
    man.outputs = {"robust_report.csv", "robust_report.json"};
    if (o.plot) {
        for (const auto& p : o.protocols) {
            const std::string name = protocol_name(parse_protocol(p));
            LineChart chart{name + " robustness", "level", "MAE (raw units)", {}};
            std::map<double, ChartSeries> by_h;
            for (const auto& row : rows) {
                if (row.protocol != name) continue;
                auto& s = by_h[row.horizon_min];
                s.label = format_double(row.horizon_min) + " min";
                s.x.push_back(row.level);
                s.y.push_back(row.mae);
            }
            for (auto& [_, s] : by_h) chart.series.push_back(s);
            write_svg(out / ("robust_" + name + ".svg"), chart);
            man.outputs.push_back("robust_" + name + ".svg");
        }
    }
    for (const auto& row : rows)
        std::cout << row.protocol << " level " << row.level << ' ' << row.horizon_min << " min: MAE "
                  << format_double(row.mae) << " (sd " << format_double(row.std_mae) << ")\n";
    man.config = cfg;
    man.config["protocols"] = o.protocols;
    man.config["levels"] = o.levels;
    man.config["repeats"] = repeats;
    man.seed = r.model.seed;
    man.dataset_digests = d.digests;
    if (!o.checkpoint.empty()) man.dataset_digests["checkpoint"] = file_digest(o.checkpoint);
    man.finish(out);
    return kOk;
}

int cmd_gridsearch(const Options& o, const std::vector<std::string>& argv) {
    RunManifest man = start_manifest(argv);
    Resolved base = resolve(o);
    LoadedData d = load_data(o, base);
    if (o.grid.empty()) throw ConfigError("--grid is required");
    std::ifstream gin(o.grid);
    if (!gin) throw DataError("cannot open " + o.grid);
    nlohmann::ordered_json g;
    try {
        g = nlohmann::ordered_json::parse(gin);
    } catch (const std::exception& e) {
        throw ConfigError(o.grid + ": invalid JSON (" + e.what() + ")");
    }
    if (!g.is_object()) throw ConfigError(o.grid + ": grid must map config keys to lists");
    std::vector<std::pair<std::string, json>> axes;
    for (auto it = g.begin(); it != g.end(); ++it) axes.emplace_back(it.key(), json::parse(it.value().dump()));
    const auto grid = expand_grid(base.model, axes);
    const fs::path out = prepare_out(o);
    auto result = grid_search(grid, base.flags, d.dataset, d.graph);

    std::ofstream csv(out / "grid_trials.csv");
    if (!csv) throw DataError("cannot write grid_trials.csv");
    csv << "index";
    for (const auto& [k, _] : axes) csv << ',' << k;
    csv << ",val_mae,val_rmse,final_train_loss\n";
    for (const auto& t : result.trials) {
        csv << t.index;
        json tj = t.config;
        for (const auto& [k, _] : axes) {
            std::string v = tj[k].dump();
            if (v.find(',') != std::string::npos) v = "\"" + std::string(v.begin(), v.end()) + "\"";
            csv << ',' << v;
        }
        csv << ',' << format_double(t.val_mae) << ',' << format_double(t.val_rmse) << ','
            << format_double(t.final_train_loss) << '\n';
    }
    csv.close();
    Resolved best = base;
    best.model = result.best;
    write_json(out / "best_config.json", best.as_json());
    std::cout << "best trial " << result.best_index << " val_mae " << format_double(result.trials[result.best_index].val_mae)
              << '\n';
    man.outputs = {"grid_trials.csv", "best_config.json"};
    man.config = base.as_json();
    man.config["grid"] = json::parse(g.dump());
    man.seed = base.model.seed;
    man.dataset_digests = d.digests;
    man.finish(out);
    return kOk;
}

int cmd_inspect_graph(const Options& o, const std::vector<std::string>& argv) {
    RunManifest man = start_manifest(argv);
    Resolved r = resolve(o);
    LoadedData d = load_data(o, r);
    const fs::path out = prepare_out(o);
    const auto& g = d.graph;
    const std::size_t n = g.num_nodes;

    std::ofstream adj(out / "adjacency.csv");
    adj << "from,to,weight\n";
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (g.has_edge(i, j)) adj << i << ',' << j << ',' << format_double(g.weight(i, j)) << '\n';
    adj.close();
    std::ofstream deg(out / "degrees.csv");
    deg << "node,in_degree,out_degree\n";
    for (std::size_t i = 0; i < n; ++i) deg << i << ',' << g.in_degree[i] << ',' << g.out_degree[i] << '\n';
    deg.close();

    std::size_t reachable = 0, max_hops = 0;
    std::map<std::size_t, std::size_t> hop_histogram;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j || !g.path(i, j).reachable) continue;
            ++reachable;
            max_hops = std::max(max_hops, g.path(i, j).hops());
            ++hop_histogram[g.path(i, j).hops()];
        }
    // Weakly connected components by union-find.
    std::vector<std::size_t> parent(n);
    for (std::size_t i = 0; i < n; ++i) parent[i] = i;
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (g.has_edge(i, j)) parent[find(i)] = find(j);
    std::set<std::size_t> roots;
    for (std::size_t i = 0; i < n; ++i) roots.insert(find(i));
    json hist = json::object();
    for (auto [h, c] : hop_histogram) hist[std::to_string(h)] = c;
    json summary = {{"nodes", n},
                    {"edges", g.edge_count()},
                    {"max_in_degree", g.max_in_degree()},
                    {"max_out_degree", g.max_out_degree()},
                    {"weak_components", roots.size()},
                    {"reachable_pairs", reachable},
                    {"unreachable_pairs", n * (n - 1) - reachable},
                    {"max_hops", max_hops},
                    {"hop_histogram", hist},
                    {"edge_feature_dim", g.edge_feature_dim}};
    write_json(out / "graph_summary.json", summary);
    std::cout << summary.dump() << '\n';
    man.outputs = {"adjacency.csv", "degrees.csv", "graph_summary.json"};
    man.config = r.as_json();
    man.seed = r.model.seed;
    man.dataset_digests = d.digests;
    man.finish(out);
    return kOk;
}

void add_data_options(CLI::App* sub, Options& o) {
    sub->add_option("--data", o.data, "directory with data.csv (or data.bin) and distances.csv")->required();
    sub->add_option("--out", o.out, "output directory")->required();
    sub->add_option("--config", o.config, "JSON config with model and ablation fields");
    sub->add_option("--set", o.sets, "override one config field, key=value (repeatable)");
    sub->add_option("--seed", o.seed, "model seed")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    sub->add_option("--steps-per-day", o.steps_per_day, "time steps per day for the historical average");
    sub->add_flag("--binary", o.binary, "read data.bin instead of data.csv");
}

void add_training_options(CLI::App* sub, Options& o) {
    sub->add_option("--epochs", o.epochs, "training epochs")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    sub->add_option("--lr", o.learning_rate, "learning rate")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    sub->add_option("--batch-size", o.batch_size, "batch size")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

} // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"tsfusion: multi-grained temporal-spatial traffic forecasting"};
    app.require_subcommand(1);
    app.set_version_flag("--version", TSFUSION_VERSION);
    Options o;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with planted long-range pairs");
    synth->add_option("--out", o.out, "output directory")->required();
    synth->add_option("--nodes", o.synth.nodes, "station count")->capture_default_str();
    synth->add_option("--steps", o.synth.steps, "time steps")->capture_default_str();
    synth->add_option("--steps-per-day", o.synth.steps_per_day, "period of the daily cycle")->capture_default_str();
    synth->add_option("--seed", o.synth.seed, "generator seed")->capture_default_str();
    synth->add_option("--pairs", o.synth_pairs, "number of long-range pairs")->capture_default_str();
    synth->add_option("--min-hops", o.synth.min_pair_hops, "minimum hop distance of a pair")->capture_default_str();
    synth->add_option("--noise", o.synth.noise_scale, "observation noise scale")->capture_default_str();
    synth->add_option("--latent-scale", o.synth.latent_scale, "amplitude of the shared pair signal")->capture_default_str();
    synth->add_option("--latent-ar", o.synth.latent_ar, "AR(1) coefficient of the pair signal")->capture_default_str();
    synth->add_option("--lag", o.synth.latent_lag, "follower lag in steps")->capture_default_str();
    synth->add_option("--diffusion-decay", o.synth.diffusion_decay, "decay of the graph diffusion term")->capture_default_str();
    synth->add_option("--graph-sigma2", o.synth.graph_sigma2, "kernel width used for the emitted graph")->capture_default_str();
    synth->add_flag("--binary", o.binary, "write data.bin instead of data.csv");

    auto* train_cmd = app.add_subcommand("train", "train a model and save checkpoint, loss history and report");
    add_data_options(train_cmd, o);
    add_training_options(train_cmd, o);
    train_cmd->add_option("--variant", o.variants, "model variant: full, nG, nL, nFE, nGate, nRes")->expected(1);
    train_cmd->add_flag("--adversarial", o.adversarial, "adversarial training with FGSM inputs");
    train_cmd->add_option("--alpha", o.alpha, "FGSM strength in normalized units")->capture_default_str();
    train_cmd->add_option("--mix", o.mix, "weight of the clean loss in adversarial training")->capture_default_str();
    train_cmd->add_flag("--plot", o.plot, "also write SVG charts");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint per horizon, with the HA baseline");
    add_data_options(eval_cmd, o);
    eval_cmd->add_option("--checkpoint", o.checkpoint, "model.ckpt from a train run")->required();
    eval_cmd->add_flag("--plot", o.plot, "also write SVG charts");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants over repeats");
    add_data_options(ablate, o);
    add_training_options(ablate, o);
    ablate->add_option("--variant,--variants", o.variants, "variants (comma separated or repeated)")->delimiter(',');
    ablate->add_option("--repeats", o.repeats, "training repeats per variant");
    ablate->add_flag("--plot", o.plot, "also write SVG charts");

    auto* robust = app.add_subcommand("robust", "robustness sweep under noise, missing data or FGSM");
    add_data_options(robust, o);
    add_training_options(robust, o);
    robust->add_option("--checkpoint", o.checkpoint, "evaluate this checkpoint instead of training");
    robust->add_option("--protocol", o.protocols, "gaussian, missing, adversarial (comma separated)")->delimiter(',');
    robust->add_option("--levels", o.levels, "perturbation levels (comma separated)")->delimiter(',');
    robust->add_option("--repeats", o.repeats, "seeded repeats per level");
    robust->add_option("--variant", o.variants, "model variant when training")->expected(1);
    robust->add_flag("--adversarial", o.adversarial, "adversarial training when training");
    robust->add_option("--alpha", o.alpha, "FGSM strength used in adversarial training")->capture_default_str();
    robust->add_option("--mix", o.mix, "clean-loss weight in adversarial training")->capture_default_str();
    robust->add_flag("--plot", o.plot, "also write SVG charts");

    auto* grid = app.add_subcommand("gridsearch", "grid search over config fields by validation MAE");
    add_data_options(grid, o);
    add_training_options(grid, o);
    grid->add_option("--grid", o.grid, "JSON object mapping config keys to candidate lists")->required();
    grid->add_option("--variant", o.variants, "model variant")->expected(1);

    auto* inspect = app.add_subcommand("inspect-graph", "summarize the sensor graph built from the distances");
    add_data_options(inspect, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return report_error(kUsage, "usage", e.what());
    }

    try {
        if (*synth) return cmd_synth(o, args);
        if (*train_cmd) return cmd_train(o, args);
        if (*eval_cmd) return cmd_eval(o, args);
        if (*ablate) return cmd_ablate(o, args);
        if (*robust) return cmd_robust(o, args);
        if (*grid) return cmd_gridsearch(o, args);
        if (*inspect) return cmd_inspect_graph(o, args);
        return report_error(kUsage, "usage", "no subcommand");
    } catch (const ConfigError& e) {
        return report_error(kUsage, "config", e.what());
    } catch (const NumericError& e) {
        return report_error(kDiverged, "divergence", e.what());
    } catch (const DataError& e) {
        return report_error(kData, "data", e.what());
    } catch (const DimensionError& e) {
        return report_error(kData, "data", e.what());
    } catch (const fs::filesystem_error& e) {
        return report_error(kData, "data", e.what());
    } catch (const std::exception& e) {
        return report_error(kOther, "internal", e.what());
    }
}
