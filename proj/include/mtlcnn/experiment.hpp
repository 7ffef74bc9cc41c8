// Experiment plumbing shared by the CLI and the acceptance suite: layered
// JSON configs (defaults <- config file <- command-line flags) with the
// resolved document persisted next to every artifact, metric/distance
// writers, single-run pipelines, and the s/m/p comparison harness with a
// small worker pool for independent runs.

#pragma once

#include <atomic>
#include <thread>

#include "mtlcnn/analysis.hpp"
#include "mtlcnn/trainer.hpp"

namespace mtlcnn {

// ---------------------------------------------------------------------------
// Config document
// ---------------------------------------------------------------------------

inline nlohmann::json default_config() {
    nlohmann::json j;
    j["data"] = spec_to_json(FactorSpec{});
    j["data"]["train_frac"] = 0.8;
    j["train"] = {{"mode", "s"},
                  {"weighting", "dynamic"},
                  {"phi_s", 0.1},
                  {"fixed_alpha", std::array<double, 3>{0, 0, 0}},
                  {"epochs", 20},
                  {"batch_size", 8},
                  {"lr", 0.01},
                  {"lr_drops", std::vector<std::pair<int, double>>{{10, 0.1}, {15, 0.1}, {19, 0.1}}},
                  {"momentum", 0.9},
                  {"weight_decay", 0.0005},
                  {"seed", 0},
                  {"log_every", 0},
                  {"checkpoint_every", 0},
                  {"freeze_dynamic_heads", false},
                  {"detach_mu", false}};
    j["eval"] = {{"routing", "generic"}, {"mirror", false}};
    j["compare"] = {{"models", std::vector<std::string>{"s", "m-fixed", "m-dynamic", "p"}},
                    {"seeds", std::vector<std::uint64_t>{0, 1, 2}},
                    {"jobs", 0}};
    return j;
}

// Recursive overlay merge: objects merge key-wise, anything else replaces;
// a null overlay changes nothing.
inline nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overlay) {
    if (overlay.is_null()) return base;
    if (!base.is_object() || !overlay.is_object()) return overlay;
    for (auto it = overlay.begin(); it != overlay.end(); ++it)
        base[it.key()] = base.contains(it.key()) ? merge_config(base[it.key()], it.value()) : it.value();
    return base;
}

inline FactorSpec data_spec_from_config(const nlohmann::json& j) {
    return spec_from_json(j.at("data"));
}

inline TrainConfig train_config_from_config(const nlohmann::json& j) {
    const auto& t = j.at("train");
    TrainConfig cfg;
    cfg.mode = mode_from_name(t.at("mode").get<std::string>());
    cfg.weighting = weighting_from_name(t.at("weighting").get<std::string>());
    cfg.phi_s = t.at("phi_s").get<double>();
    cfg.fixed_alpha = t.at("fixed_alpha").get<std::array<double, 3>>();
    cfg.epochs = t.at("epochs").get<int>();
    cfg.batch_size = t.at("batch_size").get<int>();
    cfg.lr = t.at("lr").get<double>();
    cfg.lr_drops = t.at("lr_drops").get<std::vector<std::pair<int, double>>>();
    cfg.momentum = t.at("momentum").get<double>();
    cfg.weight_decay = t.at("weight_decay").get<double>();
    cfg.seed = t.at("seed").get<std::uint64_t>();
    cfg.log_every = t.at("log_every").get<int>();
    cfg.checkpoint_every = t.at("checkpoint_every").get<int>();
    cfg.freeze_dynamic_heads = t.at("freeze_dynamic_heads").get<bool>();
    cfg.detach_mu = t.at("detach_mu").get<bool>();
    return cfg;
}

inline void write_resolved_config(const nlohmann::json& j, const io::fs::path& dir) {
    io::ensure_dir(dir);
    io::write_text(dir / "config.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Metric artifacts
// ---------------------------------------------------------------------------

inline nlohmann::json metrics_to_json(const EvalReport& rep) {
    nlohmann::json j;
    j["routing"] = routing_name(rep.routing);
    j["mirror"] = rep.mirror;
    j["rank1"] = {{"all", rep.rank1.all},
                  {"left", rep.rank1.by_group[0]},
                  {"frontal", rep.rank1.by_group[1]},
                  {"right", rep.rank1.by_group[2]},
                  {"probes", rep.rank1.total},
                  {"correct", rep.rank1.correct},
                  {"group_totals", rep.rank1.group_total}};
    j["verification"] = {{"accuracy", rep.verification.accuracy},
                         {"threshold", rep.verification.threshold},
                         {"eer", rep.verification.eer},
                         {"auc", rep.verification.auc}};
    if (rep.has_side)
        j["side_accuracy"] = {{"pose", rep.side_accuracy[0]},
                              {"illum", rep.side_accuracy[1]},
                              {"expr", rep.side_accuracy[2]}};
    return j;
}

inline void write_metrics(const EvalReport& rep, const io::fs::path& path) {
    io::write_text(path, metrics_to_json(rep).dump(2) + "\n");
}

inline void write_distances_csv(const EvalReport& rep, const io::fs::path& path) {
    std::string csv = "probe_index,probe_id,probe_group,gallery_index,gallery_id,distance,same\n";
    const std::size_t ng = rep.gallery_ids.size();
    for (std::size_t i = 0; i < rep.probe_ids.size(); ++i)
        for (std::size_t g = 0; g < ng; ++g) {
            const int same = rep.probe_ids[i] == rep.gallery_ids[g] ? 1 : 0;
            csv += std::to_string(i) + "," + std::to_string(rep.probe_ids[i]) + "," +
                   std::to_string(rep.probe_groups[i]) + "," + std::to_string(g) + "," +
                   std::to_string(rep.gallery_ids[g]) + "," + io::fmt17(rep.distances[i * ng + g]) +
                   "," + std::to_string(same) + "\n";
        }
    io::write_text(path, csv);
}

// ---------------------------------------------------------------------------
// Single-run pipeline
// ---------------------------------------------------------------------------

struct RunOutcome {
    std::string model;
    std::uint64_t seed = 0;
    Routing routing = Routing::Generic;
    io::fs::path dir;
    EvalReport report;
};

// Model variants of the comparison table.
inline TrainConfig variant_config(const std::string& model, TrainConfig base) {
    if (model == "s") {
        base.mode = Mode::Single;
    } else if (model == "m-fixed") {
        base.mode = Mode::Multi;
        base.weighting = Weighting::Fixed;
        base.fixed_alpha = {base.phi_s / 3, base.phi_s / 3, base.phi_s / 3};
    } else if (model == "m-dynamic") {
        base.mode = Mode::Multi;
        base.weighting = Weighting::Dynamic;
    } else if (model == "p") {
        base.mode = Mode::PoseDirected;
        base.weighting = Weighting::Dynamic;
    } else {
        throw std::invalid_argument("unknown model variant '" + model +
                                    "' (expected s, m-fixed, m-dynamic or p)");
    }
    return base;
}

inline Routing variant_routing(const std::string& model) {
    return model == "p" ? Routing::Stochastic : Routing::Generic;
}

// Train, evaluate, and write the run directory (epochs.csv, checkpoints,
// metrics.json, distances.csv).
inline RunOutcome run_model(const Dataset& data, const std::string& model, TrainConfig cfg,
                            bool mirror, const io::fs::path& dir, bool quiet = true) {
    cfg = variant_config(model, cfg);
    RunOutcome out;
    out.model = model;
    out.seed = cfg.seed;
    out.routing = variant_routing(model);
    out.dir = dir;
    auto trained = train(data, cfg, dir, quiet);
    out.report = evaluate_net(trained.net, data, out.routing, mirror);
    write_metrics(out.report, dir / "metrics.json");
    write_distances_csv(out.report, dir / "distances.csv");
    return out;
}

// ---------------------------------------------------------------------------
// Comparison harness
// ---------------------------------------------------------------------------

struct CompareResult {
    std::vector<RunOutcome> runs;  // models x seeds, model-major
    std::vector<std::string> models;
    std::vector<std::uint64_t> seeds;

    const RunOutcome& run(const std::string& model, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.model == model && r.seed == seed) return r;
        throw std::invalid_argument("no run for " + model + " seed " + std::to_string(seed));
    }

    std::vector<double> collect(const std::string& model,
                                const std::function<double(const RunOutcome&)>& f) const {
        std::vector<double> v;
        for (const auto& r : runs)
            if (r.model == model) v.push_back(f(r));
        return v;
    }
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty list");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double spread(std::vector<double> v) {
    if (v.empty()) return 0;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo;
}

// Run every (model, seed) combination, each into its own subdirectory.
// Independent runs execute on a small worker pool; results are assembled in
// a fixed order so the outcome is identical regardless of scheduling.
inline CompareResult run_compare(const Dataset& data, const std::vector<std::string>& models,
                                 const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                                 bool mirror, const io::fs::path& out_dir, int jobs = 0,
                                 bool quiet = true) {
    if (models.empty() || seeds.empty())
        throw std::invalid_argument("compare: need at least one model and one seed");
    io::ensure_dir(out_dir);

    struct Task {
        std::string model;
        std::uint64_t seed;
        io::fs::path dir;
    };
    std::vector<Task> tasks;
    for (const auto& model : models)
        for (std::uint64_t seed : seeds)
            tasks.push_back({model, seed, out_dir / (model + "_seed" + std::to_string(seed))});

    CompareResult result;
    result.models = models;
    result.seeds = seeds;
    result.runs.resize(tasks.size());

    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(tasks.size());
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            const Task& t = tasks[i];
            try {
                TrainConfig cfg = base;
                cfg.seed = t.seed;
                // per-epoch checkpoints on the dynamic m-CNN feed the energy
                // trajectory analysis
                cfg.checkpoint_every = t.model == "m-dynamic" ? 1 : base.checkpoint_every;
                result.runs[i] = run_model(data, t.model, cfg, mirror, t.dir, quiet);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };

    int n_workers = jobs > 0 ? jobs : static_cast<int>(std::thread::hardware_concurrency());
    n_workers = std::max(1, std::min<int>(n_workers, static_cast<int>(tasks.size())));
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    for (std::size_t i = 0; i < tasks.size(); ++i)
        if (!errors[i].empty())
            throw std::runtime_error("compare run " + tasks[i].model + " seed " +
                                     std::to_string(tasks[i].seed) + " failed: " + errors[i]);
    return result;
}

// Table-2-shaped CSV: per-run rows plus median and spread rows per model when
// several seeds were run.
inline std::string compare_csv(const CompareResult& result) {
    std::string csv =
        "model,seed,routing,rank1_all,rank1_left,rank1_frontal,rank1_right,pose_acc,illum_acc,"
        "expr_acc\n";
    auto side = [](const RunOutcome& r, int i) {
        return r.report.has_side ? io::fmt17(r.report.side_accuracy[static_cast<std::size_t>(i)])
                                 : std::string();
    };
    for (const auto& r : result.runs) {
        csv += r.model + "," + std::to_string(r.seed) + "," + routing_name(r.routing) + "," +
               io::fmt17(r.report.rank1.all) + "," + io::fmt17(r.report.rank1.by_group[0]) + "," +
               io::fmt17(r.report.rank1.by_group[1]) + "," + io::fmt17(r.report.rank1.by_group[2]) +
               "," + side(r, 0) + "," + side(r, 1) + "," + side(r, 2) + "\n";
    }
    if (result.seeds.size() > 1) {
        for (const auto& model : result.models) {
            auto stat = [&](const std::string& tag, double (*agg)(std::vector<double>)) {
                std::string row = model + "," + tag + "," + routing_name(variant_routing(model));
                auto grab = [&](const std::function<double(const RunOutcome&)>& f) {
                    return agg(result.collect(model, f));
                };
                row += "," + io::fmt17(grab([](const RunOutcome& r) { return r.report.rank1.all; }));
                for (int g = 0; g < 3; ++g)
                    row += "," + io::fmt17(grab([g](const RunOutcome& r) {
                               return r.report.rank1.by_group[static_cast<std::size_t>(g)];
                           }));
                const bool has_side = !result.collect(model, [](const RunOutcome& r) {
                                           return r.report.has_side ? 1.0 : 0.0;
                                       }).empty() &&
                                      result.run(model, result.seeds[0]).report.has_side;
                for (int i = 0; i < 3; ++i)
                    row += "," + (has_side ? io::fmt17(grab([i](const RunOutcome& r) {
                                      return r.report.side_accuracy[static_cast<std::size_t>(i)];
                                  }))
                                           : std::string());
                return row + "\n";
            };
            csv += stat("median", median);
            csv += stat("spread", spread);
        }
    }
    return csv;
}

}  // namespace mtlcnn
