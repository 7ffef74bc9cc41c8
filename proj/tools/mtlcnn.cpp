// Command-line front end: dataset generation, training (with optional phi_s
// search), evaluation, pair matching, weight-energy analysis, and the
// s/m/p model comparison. Every subcommand persists its resolved config into
// the output directory, and re-running from that config reproduces the
// metric artifacts byte for byte.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>

#include "mtlcnn/experiment.hpp"

using namespace mtlcnn;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<double> split_doubles(const std::string& s) {
    std::vector<double> out;
    for (const auto& part : split_csv(s)) out.push_back(std::stod(part));
    return out;
}

std::vector<std::uint64_t> split_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& part : split_csv(s)) out.push_back(std::stoull(part));
    return out;
}

struct GlobalArgs {
    std::string config_path;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool quiet = false;
};

nlohmann::json resolve_base(const GlobalArgs& g) {
    nlohmann::json resolved = default_config();
    if (!g.config_path.empty())
        resolved = merge_config(resolved, nlohmann::json::parse(io::read_text(g.config_path)));
    if (g.seed_set) {
        resolved["data"]["seed"] = g.seed;
        resolved["train"]["seed"] = g.seed;
    }
    return resolved;
}

std::string need_path(const nlohmann::json& resolved, const std::string& flag_value,
                      const std::string& key, const std::string& flag_name) {
    if (!flag_value.empty()) return flag_value;
    if (resolved.contains("paths") && resolved["paths"].contains(key))
        return resolved["paths"][key].get<std::string>();
    throw std::invalid_argument("missing " + flag_name + " (or paths." + key + " in the config)");
}

std::string need_out(const nlohmann::json& resolved, const GlobalArgs& g) {
    return need_path(resolved, g.out, "out", "--out");
}

int cmd_generate(const GlobalArgs& g, const nlohmann::json& overlay) {
    nlohmann::json resolved = merge_config(resolve_base(g), overlay);
    const std::string out = need_out(resolved, g);
    resolved["paths"]["out"] = out;
    const FactorSpec spec = data_spec_from_config(resolved);
    const double frac = resolved["data"]["train_frac"].get<double>();
    Dataset ds = generate_splits(spec, frac);
    write_dataset(ds, out);
    write_resolved_config(resolved, out);
    if (!g.quiet)
        std::printf("wrote %zu train / %zu gallery / %zu probe samples (%d identities) to %s\n",
                    ds.train.size(), ds.gallery.size(), ds.probe.size(), spec.num_identities,
                    out.c_str());
    return 0;
}

int cmd_train(const GlobalArgs& g, nlohmann::json overlay, const std::string& data_dir,
              const std::string& phi_search, int search_epochs, double val_frac) {
    nlohmann::json resolved = merge_config(resolve_base(g), overlay);
    const std::string out = need_out(resolved, g);
    const std::string data_path = need_path(resolved, data_dir, "data", "--data");
    resolved["paths"]["out"] = out;
    resolved["paths"]["data"] = data_path;
    Dataset data = load_dataset(data_path);

    if (!phi_search.empty()) {
        const auto candidates = split_doubles(phi_search);
        TrainConfig base = train_config_from_config(resolved);
        auto search = weight_search(data, base, candidates, search_epochs, val_frac);
        resolved["train"]["phi_s"] = search.best_phi;
        nlohmann::json sj;
        sj["candidates"] = candidates;
        sj["epochs_used"] = search.epochs_used;
        sj["best_phi"] = search.best_phi;
        for (const auto& [phi, score] : search.scores)
            sj["scores"].push_back({{"phi_s", phi}, {"rank1", score}});
        io::ensure_dir(out);
        io::write_text(io::fs::path(out) / "phi_search.json", sj.dump(2) + "\n");
        if (!g.quiet)
            std::printf("phi_s search selected %s\n", io::fmt17(search.best_phi).c_str());
    }

    write_resolved_config(resolved, out);
    TrainConfig cfg = train_config_from_config(resolved);
    auto result = train(data, cfg, out, g.quiet);
    if (!g.quiet)
        std::printf("trained %s-mode model for %d epochs, final loss %s -> %s\n",
                    mode_name(cfg.mode).c_str(), cfg.epochs,
                    io::fmt17(result.logs.back().loss_total).c_str(), out.c_str());
    return 0;
}

int cmd_eval(const GlobalArgs& g, nlohmann::json overlay, const std::string& ckpt,
             const std::string& data_dir) {
    nlohmann::json resolved = merge_config(resolve_base(g), overlay);
    const std::string out = need_out(resolved, g);
    const std::string data_path = need_path(resolved, data_dir, "data", "--data");
    const std::string ckpt_path = need_path(resolved, ckpt, "checkpoint", "--checkpoint");
    resolved["paths"]["out"] = out;
    resolved["paths"]["data"] = data_path;
    resolved["paths"]["checkpoint"] = ckpt_path;

    MultiTaskNet net = load_checkpoint(ckpt_path);
    Dataset data = load_dataset(data_path);
    const Routing routing = routing_from_name(resolved["eval"]["routing"].get<std::string>());
    const bool mirror = resolved["eval"]["mirror"].get<bool>();
    EvalReport rep = evaluate_net(net, data, routing, mirror);

    io::ensure_dir(out);
    write_resolved_config(resolved, out);
    write_metrics(rep, io::fs::path(out) / "metrics.json");
    write_distances_csv(rep, io::fs::path(out) / "distances.csv");
    if (!g.quiet)
        std::printf("rank-1 %.4f (left %.4f frontal %.4f right %.4f) eer %.4f auc %.4f -> %s\n",
                    rep.rank1.all, rep.rank1.by_group[0], rep.rank1.by_group[1],
                    rep.rank1.by_group[2], rep.verification.eer, rep.verification.auc, out.c_str());
    return 0;
}

SyntheticSample load_image_bin(const std::string& path, int image_size) {
    SyntheticSample s;
    s.image = io::read_doubles(path);
    const std::size_t expected = static_cast<std::size_t>(image_size) * image_size;
    if (s.image.size() != expected)
        throw std::invalid_argument(path + " holds " + std::to_string(s.image.size()) +
                                    " values, expected " + std::to_string(expected));
    return s;
}

int cmd_match(const GlobalArgs& g, const std::string& ckpt, const std::string& image_a,
              const std::string& image_b, const std::string& routing_flag, double threshold,
              bool threshold_set, const std::string& metrics_path) {
    MultiTaskNet net = load_checkpoint(ckpt);
    const SyntheticSample a = load_image_bin(image_a, net.trunk.image_size);
    const SyntheticSample b = load_image_bin(image_b, net.trunk.image_size);
    Routing routing = routing_flag.empty()
                          ? (net.has_pose_branch() ? Routing::Stochastic : Routing::Generic)
                          : routing_from_name(routing_flag);

    auto ta = net.extract_template(a);
    auto tb = net.extract_template(b);
    double distance;
    if (routing == Routing::Generic) {
        distance = cosine_distance(ta.y_d, tb.y_d);
        std::printf("distance %s (generic features only)\n", io::fmt17(distance).c_str());
    } else {
        const MatchResult r = routing == Routing::Stochastic ? stochastic_routing_distance(ta, tb)
                                                             : hard_routing_distance(ta, tb);
        distance = r.distance;
        std::printf("distance %s\n", io::fmt17(r.distance).c_str());
        std::printf("  generic component %s\n", io::fmt17(r.generic).c_str());
        std::printf("  routed component  %s\n", io::fmt17(r.routed).c_str());
    }
    auto print_p = [](const char* tag, const FeatureTemplate& t) {
        if (!t.has_pose_branch) return;
        std::printf("  p%s = (%s, %s, %s)\n", tag, io::fmt17(t.p[0]).c_str(),
                    io::fmt17(t.p[1]).c_str(), io::fmt17(t.p[2]).c_str());
    };
    print_p("1", ta);
    print_p("2", tb);

    if (!metrics_path.empty()) {
        const auto metrics = nlohmann::json::parse(io::read_text(metrics_path));
        threshold = metrics.at("verification").at("threshold").get<double>();
        threshold_set = true;
    }
    if (threshold_set)
        std::printf("verdict: %s (threshold %s)\n", distance <= threshold ? "same" : "different",
                    io::fmt17(threshold).c_str());
    (void)g;
    return 0;
}

int cmd_analyze(const GlobalArgs& g, nlohmann::json overlay, const std::string& ckpt,
                const std::string& data_dir, const std::string& series_dir, double topk_frac,
                int sweep_points) {
    nlohmann::json resolved = merge_config(resolve_base(g), overlay);
    const std::string out = need_out(resolved, g);
    const std::string ckpt_path = need_path(resolved, ckpt, "checkpoint", "--checkpoint");
    resolved["paths"]["out"] = out;
    resolved["paths"]["checkpoint"] = ckpt_path;
    if (!data_dir.empty()) resolved["paths"]["data"] = data_dir;
    if (!series_dir.empty()) resolved["paths"]["series"] = series_dir;

    MultiTaskNet net = load_checkpoint(ckpt_path);
    auto rep = energy_report(net, topk_frac);
    io::ensure_dir(out);
    write_resolved_config(resolved, out);
    io::write_text(io::fs::path(out) / "energy_report.json",
                   energy_report_to_json(rep).dump(2) + "\n");
    write_energy_profiles_csv(rep, io::fs::path(out) / "energy_profiles.csv");
    write_wall_heatmap_csv(net, rep, io::fs::path(out) / "wall_heatmap.csv");

    if (resolved["paths"].contains("data")) {
        Dataset data = load_dataset(resolved["paths"]["data"].get<std::string>());
        auto sweep = feature_dim_sweep(net, data, default_sweep_grid(net.feature_dim(), sweep_points));
        write_dim_sweep_csv(sweep, io::fs::path(out) / "dim_sweep.csv");
    }
    if (resolved["paths"].contains("series")) {
        std::vector<io::fs::path> ckpts;
        for (const auto& entry :
             io::fs::directory_iterator(resolved["paths"]["series"].get<std::string>()))
            if (entry.is_directory() && io::fs::exists(entry.path() / "model.json"))
                ckpts.push_back(entry.path());
        std::sort(ckpts.begin(), ckpts.end());
        write_trajectory_csv(energy_trajectory(ckpts), io::fs::path(out) / "energy_trajectory.csv");
    }
    if (!g.quiet) std::printf("analysis artifacts written to %s\n", out.c_str());
    return 0;
}

int cmd_compare(const GlobalArgs& g, nlohmann::json overlay, const std::string& data_dir) {
    nlohmann::json resolved = merge_config(resolve_base(g), overlay);
    const std::string out = need_out(resolved, g);
    const std::string data_path = need_path(resolved, data_dir, "data", "--data");
    resolved["paths"]["out"] = out;
    resolved["paths"]["data"] = data_path;
    Dataset data = load_dataset(data_path);

    const auto models = resolved["compare"]["models"].get<std::vector<std::string>>();
    const auto seeds = resolved["compare"]["seeds"].get<std::vector<std::uint64_t>>();
    const int jobs = resolved["compare"]["jobs"].get<int>();
    const bool mirror = resolved["eval"]["mirror"].get<bool>();
    TrainConfig base = train_config_from_config(resolved);

    io::ensure_dir(out);
    write_resolved_config(resolved, out);
    auto result = run_compare(data, models, seeds, base, mirror, out, jobs, g.quiet);
    const std::string csv = compare_csv(result);
    io::write_text(io::fs::path(out) / "compare.csv", csv);
    if (!g.quiet) std::fputs(csv.c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-task CNN training engine with pose-directed routing and energy analysis"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON config file (defaults <- file <- flags)");
    app.add_option("--out", g.out, "output directory");
    auto* seed_opt = app.add_option("--seed", g.seed, "seed for data generation and training");
    app.add_flag("--quiet", g.quiet, "suppress progress output");

    // generate-data ---------------------------------------------------------
    auto* gen = app.add_subcommand("generate-data", "render the synthetic multi-factor dataset");
    gen->fallthrough();
    int identities = 0, illum = 0, expr = 0, size = 0;
    double noise = -1, train_frac = -1;
    std::string poses;
    gen->add_option("--identities", identities, "number of identities");
    gen->add_option("--poses", poses, "comma-separated yaw angles in degrees");
    gen->add_option("--illum", illum, "number of illumination bins");
    gen->add_option("--expr", expr, "number of expression bins");
    gen->add_option("--size", size, "square image size in pixels");
    gen->add_option("--noise", noise, "Gaussian pixel noise stddev");
    gen->add_option("--train-frac", train_frac, "fraction of identities used for training");

    // train ------------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "train one model on a generated dataset");
    tr->fallthrough();
    std::string data_dir, mode, weighting, alpha, phi_search;
    double phi_s = -1, lr = -1, momentum = -1, weight_decay = -1, val_frac = 0.25;
    int epochs = 0, batch_size = 0, log_every = -1, checkpoint_every = -1, search_epochs = 0;
    bool freeze_dyn = false, detach_mu = false;
    tr->add_option("--data", data_dir, "dataset directory from generate-data");
    tr->add_option("--mode", mode, "model variant: s, m or p");
    tr->add_option("--weighting", weighting, "side-task weighting: dynamic or fixed");
    tr->add_option("--phi-s", phi_s, "overall side-task loss weight");
    tr->add_option("--alpha", alpha, "fixed alphas 'p,l,e' (fixed weighting)");
    tr->add_option("--epochs", epochs, "training epochs");
    tr->add_option("--batch-size", batch_size, "mini-batch size");
    tr->add_option("--lr", lr, "initial learning rate");
    tr->add_option("--momentum", momentum, "SGD momentum");
    tr->add_option("--weight-decay", weight_decay, "weight decay");
    tr->add_option("--log-every", log_every, "log every n steps");
    tr->add_option("--checkpoint-every", checkpoint_every, "checkpoint every n epochs");
    tr->add_flag("--freeze-dynamic", freeze_dyn, "keep the dynamic-weight heads at zero");
    tr->add_flag("--detach-mu", detach_mu, "stop the dynamic-weight gradient into the trunk");
    tr->add_option("--phi-search", phi_search, "comma-separated phi_s candidates to search first");
    tr->add_option("--search-epochs", search_epochs,
                   "epoch budget per search candidate (default: half)");
    tr->add_option("--val-frac", val_frac, "fraction of training identities held out for search");

    // eval -------------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "match probes against the gallery and report metrics");
    ev->fallthrough();
    std::string ev_ckpt, ev_data, ev_routing;
    bool ev_mirror = false;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory");
    ev->add_option("--data", ev_data, "dataset directory");
    ev->add_option("--routing", ev_routing, "generic, stochastic or hard");
    ev->add_flag("--mirror", ev_mirror, "average distances over horizontal mirrors");

    // match ------------------------------------------------------------------
    auto* ma = app.add_subcommand("match", "compare two raw image files");
    ma->fallthrough();
    std::string ma_ckpt, ma_a, ma_b, ma_routing, ma_metrics;
    double ma_threshold = 0;
    ma->add_option("--checkpoint", ma_ckpt, "checkpoint directory")->required();
    ma->add_option("image_a", ma_a, "first image (raw little-endian float64)")->required();
    ma->add_option("image_b", ma_b, "second image")->required();
    ma->add_option("--routing", ma_routing, "generic, stochastic or hard");
    auto* thr_opt = ma->add_option("--threshold", ma_threshold, "same/different decision threshold");
    ma->add_option("--metrics", ma_metrics, "metrics.json to take the threshold from");

    // analyze ----------------------------------------------------------------
    auto* an = app.add_subcommand("analyze", "energy-based weight analysis of a checkpoint");
    an->fallthrough();
    std::string an_ckpt, an_data, an_series;
    double topk_frac = 0.2;
    int sweep_points = 10;
    an->add_option("--checkpoint", an_ckpt, "checkpoint directory");
    an->add_option("--data", an_data, "dataset directory (enables the dimension sweep)");
    an->add_option("--series", an_series, "directory of per-epoch checkpoints (enables trajectory)");
    an->add_option("--topk-frac", topk_frac, "top-k fraction for overlap analysis");
    an->add_option("--sweep-points", sweep_points, "number of sweep grid points");

    // compare ----------------------------------------------------------------
    auto* cp = app.add_subcommand("compare", "train and evaluate the s/m/p model family");
    cp->fallthrough();
    std::string cp_data, cp_models, cp_seeds;
    int cp_jobs = -1, cp_epochs = 0, cp_batch = 0;
    double cp_phi = -1;
    cp->add_option("--data", cp_data, "dataset directory");
    cp->add_option("--models", cp_models, "comma-separated subset of s,m-fixed,m-dynamic,p");
    cp->add_option("--seeds", cp_seeds, "comma-separated training seeds");
    cp->add_option("--jobs", cp_jobs, "parallel worker count (0 = hardware)");
    cp->add_option("--epochs", cp_epochs, "training epochs per run");
    cp->add_option("--batch-size", cp_batch, "mini-batch size");
    cp->add_option("--phi-s", cp_phi, "overall side-task loss weight");

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    try {
        if (gen->parsed()) {
            nlohmann::json overlay;
            if (gen->count("--identities")) overlay["data"]["num_identities"] = identities;
            if (gen->count("--poses")) overlay["data"]["pose_bins"] = split_doubles(poses);
            if (gen->count("--illum")) overlay["data"]["illum_bins"] = illum;
            if (gen->count("--expr")) overlay["data"]["expr_bins"] = expr;
            if (gen->count("--size")) overlay["data"]["image_size"] = size;
            if (gen->count("--noise")) overlay["data"]["noise_std"] = noise;
            if (gen->count("--train-frac")) overlay["data"]["train_frac"] = train_frac;
            return cmd_generate(g, overlay);
        }
        if (tr->parsed()) {
            nlohmann::json overlay;
            if (tr->count("--mode")) overlay["train"]["mode"] = mode;
            if (tr->count("--weighting")) overlay["train"]["weighting"] = weighting;
            if (tr->count("--phi-s")) overlay["train"]["phi_s"] = phi_s;
            if (tr->count("--alpha")) {
                const auto a = split_doubles(alpha);
                if (a.size() != 3) throw std::invalid_argument("--alpha needs 3 values 'p,l,e'");
                overlay["train"]["fixed_alpha"] = a;
            }
            if (tr->count("--epochs")) overlay["train"]["epochs"] = epochs;
            if (tr->count("--batch-size")) overlay["train"]["batch_size"] = batch_size;
            if (tr->count("--lr")) overlay["train"]["lr"] = lr;
            if (tr->count("--momentum")) overlay["train"]["momentum"] = momentum;
            if (tr->count("--weight-decay")) overlay["train"]["weight_decay"] = weight_decay;
            if (tr->count("--log-every")) overlay["train"]["log_every"] = log_every;
            if (tr->count("--checkpoint-every"))
                overlay["train"]["checkpoint_every"] = checkpoint_every;
            if (freeze_dyn) overlay["train"]["freeze_dynamic_heads"] = true;
            if (detach_mu) overlay["train"]["detach_mu"] = true;
            return cmd_train(g, overlay, data_dir, phi_search, search_epochs, val_frac);
        }
        if (ev->parsed()) {
            nlohmann::json overlay;
            if (ev->count("--routing")) overlay["eval"]["routing"] = ev_routing;
            if (ev_mirror) overlay["eval"]["mirror"] = true;
            return cmd_eval(g, overlay, ev_ckpt, ev_data);
        }
        if (ma->parsed())
            return cmd_match(g, ma_ckpt, ma_a, ma_b, ma_routing, ma_threshold,
                             thr_opt->count() > 0, ma_metrics);
        if (an->parsed()) {
            nlohmann::json overlay;
            return cmd_analyze(g, overlay, an_ckpt, an_data, an_series, topk_frac, sweep_points);
        }
        if (cp->parsed()) {
            nlohmann::json overlay;
            if (cp->count("--models")) overlay["compare"]["models"] = split_csv(cp_models);
            if (cp->count("--seeds")) overlay["compare"]["seeds"] = split_seeds(cp_seeds);
            if (cp->count("--jobs")) overlay["compare"]["jobs"] = cp_jobs;
            if (cp->count("--epochs")) overlay["train"]["epochs"] = cp_epochs;
            if (cp->count("--batch-size")) overlay["train"]["batch_size"] = cp_batch;
            if (cp->count("--phi-s")) overlay["train"]["phi_s"] = cp_phi;
            return cmd_compare(g, overlay, cp_data);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
