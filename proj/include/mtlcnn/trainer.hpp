// Mini-batch SGD training loop: momentum + weight decay (normalization and
// bias parameters exempt), step-decay learning rate schedule, per-epoch
// loss / dynamic-weight logging, checkpoints at the end, at LR drops, and
// optionally every k epochs. Also the brute-force search for the side-task
// weight budget phi_s on a held-out validation identity split.

#pragma once

#include <chrono>
#include <cmath>
#include <optional>

#include "mtlcnn/evaluation.hpp"
#include "mtlcnn/network.hpp"

namespace mtlcnn {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 8;
    double lr = 0.01;
    std::vector<std::pair<int, double>> lr_drops = {{10, 0.1}, {15, 0.1}, {19, 0.1}};
    double momentum = 0.9;
    double weight_decay = 0.0005;
    std::uint64_t seed = 0;
    Mode mode = Mode::Single;
    Weighting weighting = Weighting::Dynamic;
    double phi_s = 0.1;
    std::array<double, 3> fixed_alpha = {0, 0, 0};
    int log_every = 0;         // step-level stdout logging; 0 = off
    int checkpoint_every = 0;  // per-epoch checkpoints; 0 = only final + LR drops
    bool freeze_dynamic_heads = false;
    bool detach_mu = false;
    std::optional<TrunkConfig> trunk;  // defaults to the desk-scale trunk

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
        if (batch_size < 2) throw std::invalid_argument("train config: batch_size must be >= 2");
        if (lr <= 0) throw std::invalid_argument("train config: lr must be positive");
        if (momentum < 0 || momentum >= 1)
            throw std::invalid_argument("train config: momentum must be in [0,1)");
        if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
        for (const auto& [epoch, factor] : lr_drops)
            if (epoch < 1 || factor <= 0 || factor > 1)
                throw std::invalid_argument("train config: lr drop factors must be in (0,1]");
    }
};

// Rate in effect during a 1-based epoch: initial rate times every drop whose
// epoch has been reached.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    double lr = cfg.lr;
    for (const auto& [e, f] : cfg.lr_drops)
        if (epoch >= e) lr *= f;
    return lr;
}

struct EpochLog {
    int epoch = 0;
    double lr = 0;
    double loss_total = 0, loss_identity = 0;
    double loss_pose = 0, loss_illum = 0, loss_expr = 0, loss_group = 0;
    std::array<double, 3> mu_s = {0, 0, 0};
    std::array<double, 2> mu_m = {0, 0};
    bool has_side = false, has_group = false, has_mu_s = false, has_mu_m = false;
    double wall_seconds = 0;
};

inline std::string epoch_csv_header() {
    return "epoch,lr,loss_total,loss_identity,loss_pose,loss_illum,loss_expr,loss_group,"
           "mu_p,mu_l,mu_e,mu_d,mu_g,wall_seconds\n";
}

inline std::string epoch_csv_row(const EpochLog& e) {
    auto opt = [](bool present, double v) { return present ? io::fmt17(v) : std::string(); };
    std::string row = std::to_string(e.epoch) + "," + io::fmt17(e.lr) + "," + io::fmt17(e.loss_total) +
                      "," + io::fmt17(e.loss_identity) + "," + opt(e.has_side, e.loss_pose) + "," +
                      opt(e.has_side, e.loss_illum) + "," + opt(e.has_side, e.loss_expr) + "," +
                      opt(e.has_group, e.loss_group) + "," + opt(e.has_mu_s, e.mu_s[0]) + "," +
                      opt(e.has_mu_s, e.mu_s[1]) + "," + opt(e.has_mu_s, e.mu_s[2]) + "," +
                      opt(e.has_mu_m, e.mu_m[0]) + "," + opt(e.has_mu_m, e.mu_m[1]) + "," +
                      io::fmt17(e.wall_seconds) + "\n";
    return row;
}

class TrainingDiverged : public std::runtime_error {
public:
    LossBreakdown breakdown;
    TrainingDiverged(const std::string& msg, LossBreakdown b)
        : std::runtime_error(msg), breakdown(b) {}
};

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

struct SgdState {
    std::vector<std::vector<double>> velocity;

    static SgdState for_params(const std::vector<NamedParam>& params) {
        SgdState s;
        for (const auto& p : params)
            s.velocity.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
        return s;
    }
};

// v <- momentum * v - lr * (grad + weight_decay * param); param <- param + v.
// Decay-exempt parameters (biases, BN scale/shift, dynamic-head eps) skip the
// decay term; non-trainable entries are ignored.
inline void sgd_step(const std::vector<NamedParam>& params, SgdState& state, double lr,
                     double momentum, double weight_decay) {
    if (params.size() != state.velocity.size())
        throw std::invalid_argument("sgd_step: state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (!p.trainable) continue;
        const double wd = p.decay_exempt ? 0.0 : weight_decay;
        auto& value = p.tensor.node->value;
        const auto& grad = p.tensor.grad();
        auto& vel = state.velocity[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            vel[j] = momentum * vel[j] - lr * (grad[j] + wd * value[j]);
            value[j] += vel[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    MultiTaskNet net;
    std::vector<EpochLog> logs;
};

inline MultiTaskNet build_net_for(const Dataset& data, const TrainConfig& cfg) {
    NetSpec spec;
    spec.mode = cfg.mode;
    spec.weighting = cfg.mode == Mode::Multi ? cfg.weighting : Weighting::Dynamic;
    spec.trunk = cfg.trunk ? *cfg.trunk : TrunkConfig::for_image(data.spec.image_size);
    if (spec.trunk.image_size != data.spec.image_size)
        throw std::invalid_argument("trunk image size " + std::to_string(spec.trunk.image_size) +
                                    " does not match dataset " + std::to_string(data.spec.image_size));
    spec.dims.identity = data.num_train_classes();
    spec.dims.pose = static_cast<int>(data.spec.pose_bins.size());
    spec.dims.illum = data.spec.illum_bins;
    spec.dims.expr = data.spec.expr_bins;
    spec.yaw_bins = data.spec.pose_bins;
    spec.phi_s = cfg.phi_s;
    spec.fixed_alpha = cfg.fixed_alpha;
    spec.seed = cfg.seed;
    return MultiTaskNet::build(spec);
}

inline void check_dataset_mode(const Dataset& data, const TrainConfig& cfg) {
    if (data.train.empty()) throw std::invalid_argument("train: empty training split");
    if (static_cast<int>(data.train.size()) < cfg.batch_size)
        throw std::invalid_argument("train: training split smaller than one batch");
    if (cfg.mode != Mode::Single && data.spec.pose_bins.size() < 2)
        throw std::invalid_argument("train: mode " + mode_name(cfg.mode) +
                                    " needs at least 2 pose bins in the dataset");
}

inline TrainResult train(const Dataset& data, const TrainConfig& cfg,
                         const io::fs::path& out_dir = {}, bool quiet = true) {
    cfg.validate();
    check_dataset_mode(data, cfg);
    if (!out_dir.empty()) io::ensure_dir(out_dir);

    TrainResult result{build_net_for(data, cfg), {}};
    MultiTaskNet& net = result.net;
    net.detach_mu = cfg.detach_mu;

    // identity -> training class index
    std::vector<int> class_of(static_cast<std::size_t>(data.spec.num_identities), -1);
    for (std::size_t c = 0; c < data.train_identities.size(); ++c)
        class_of[static_cast<std::size_t>(data.train_identities[c])] = static_cast<int>(c);

    auto all_params = net.named_parameters();
    std::vector<NamedParam> update;
    for (const auto& p : all_params) {
        if (!p.trainable) continue;
        if (cfg.freeze_dynamic_heads && p.name.rfind("dyn.", 0) == 0) continue;
        update.push_back(p);
    }
    SgdState sgd = SgdState::for_params(update);
    std::vector<Tensor> update_tensors;
    for (const auto& p : update) update_tensors.push_back(p.tensor);

    std::mt19937_64 shuffle_rng(name_seed(cfg.seed, "shuffle"));
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const int steps = static_cast<int>(data.train.size()) / cfg.batch_size;  // drop last partial
    auto drop_epoch = [&](int e) {
        for (const auto& [epoch, _] : cfg.lr_drops)
            if (epoch == e) return true;
        return false;
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at_epoch(cfg, epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;
        for (int step = 0; step < steps; ++step) {
            Batch batch;
            std::vector<const SyntheticSample*> ptrs;
            for (int i = 0; i < cfg.batch_size; ++i) {
                const auto& s = data.train[order[static_cast<std::size_t>(step * cfg.batch_size + i)]];
                ptrs.push_back(&s);
                batch.y_d.push_back(class_of[static_cast<std::size_t>(s.y_d)]);
                batch.y_p.push_back(s.y_p);
                batch.y_l.push_back(s.y_l);
                batch.y_e.push_back(s.y_e);
            }
            batch.images = images_to_input(ptrs, data.spec.image_size);

            auto loss = net.compute_loss(batch, true);
            if (!std::isfinite(loss.breakdown.total)) {
                std::string msg = "training diverged at epoch " + std::to_string(epoch) + " step " +
                                  std::to_string(step) + ": total=" + io::fmt17(loss.breakdown.total) +
                                  " identity=" + io::fmt17(loss.breakdown.identity);
                if (loss.breakdown.has_side)
                    msg += " pose=" + io::fmt17(loss.breakdown.pose) +
                           " illum=" + io::fmt17(loss.breakdown.illum) +
                           " expr=" + io::fmt17(loss.breakdown.expr);
                if (loss.breakdown.has_group) msg += " group=" + io::fmt17(loss.breakdown.group);
                throw TrainingDiverged(msg, loss.breakdown);
            }
            zero_grads(update_tensors);
            backward(loss.total);
            sgd_step(update, sgd, lr, cfg.momentum, cfg.weight_decay);

            const auto& b = loss.breakdown;
            log.loss_total += b.total;
            log.loss_identity += b.identity;
            log.has_side = b.has_side;
            log.has_group = b.has_group;
            log.has_mu_s = b.has_mu_s;
            log.has_mu_m = b.has_mu_m;
            if (b.has_side) {
                log.loss_pose += b.pose;
                log.loss_illum += b.illum;
                log.loss_expr += b.expr;
            }
            if (b.has_group) log.loss_group += b.group;
            for (int i = 0; i < 3; ++i) log.mu_s[static_cast<std::size_t>(i)] += b.mu_s[static_cast<std::size_t>(i)];
            log.mu_m[0] += b.mu_m[0];
            log.mu_m[1] += b.mu_m[1];
            if (!quiet && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0)
                std::fprintf(stderr, "epoch %d step %d/%d loss %.6f\n", epoch, step + 1, steps,
                             b.total);
        }
        const double inv = steps > 0 ? 1.0 / steps : 0.0;
        log.loss_total *= inv;
        log.loss_identity *= inv;
        log.loss_pose *= inv;
        log.loss_illum *= inv;
        log.loss_expr *= inv;
        log.loss_group *= inv;
        for (double& v : log.mu_s) v *= inv;
        for (double& v : log.mu_m) v *= inv;
        log.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.logs.push_back(log);
        if (!quiet)
            std::fprintf(stderr, "epoch %d/%d lr %.5f loss %.6f (%.1fs)\n", epoch, cfg.epochs, lr,
                         log.loss_total, log.wall_seconds);

        net.epoch = epoch;
        if (!out_dir.empty()) {
            const bool periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if (periodic || drop_epoch(epoch)) {
                char name[32];
                std::snprintf(name, sizeof(name), "epoch_%03d", epoch);
                save_checkpoint(net, out_dir / "checkpoints" / name);
            }
        }
    }

    if (!out_dir.empty()) {
        std::string csv = epoch_csv_header();
        for (const auto& e : result.logs) csv += epoch_csv_row(e);
        io::write_text(out_dir / "epochs.csv", csv);
        save_checkpoint(net, out_dir / "checkpoint");
    }
    return result;
}

// ---------------------------------------------------------------------------
// Brute-force search for phi_s on a validation identity split
// ---------------------------------------------------------------------------

// Hold out a fraction of the training identities; their frontal/neutral
// images form the validation gallery and the rest of their images the
// validation probes.
inline Dataset validation_split(const Dataset& data, double val_identity_frac) {
    const int n_train = data.num_train_classes();
    int n_val = static_cast<int>(std::lround(val_identity_frac * n_train));
    n_val = std::max(1, std::min(n_val, n_train - 2));
    if (n_train - n_val < 2)
        throw std::invalid_argument("validation_split: too few training identities");

    Dataset out;
    out.spec = data.spec;
    out.train_frac = data.train_frac;
    out.train_identities.assign(data.train_identities.begin(),
                                data.train_identities.end() - n_val);
    out.test_identities.assign(data.train_identities.end() - n_val, data.train_identities.end());

    const int fb = data.spec.frontal_bin();
    for (const auto& s : data.train) {
        const bool held_out = std::find(out.test_identities.begin(), out.test_identities.end(),
                                        s.y_d) != out.test_identities.end();
        if (!held_out)
            out.train.push_back(s);
        else if (s.y_p == fb && s.y_l == 0 && s.y_e == 0)
            out.gallery.push_back(s);
        else
            out.probe.push_back(s);
    }
    return out;
}

struct WeightSearchResult {
    double best_phi = 0;
    std::vector<std::pair<double, double>> scores;  // (phi_s, validation rank-1)
    int epochs_used = 0;
};

// One reduced-budget m-CNN training run per candidate; the candidate with the
// best validation rank-1 wins (ties to the earlier candidate).
inline WeightSearchResult weight_search(const Dataset& data, const TrainConfig& base,
                                        const std::vector<double>& candidates,
                                        int search_epochs = 0, double val_identity_frac = 0.25) {
    if (candidates.empty()) throw std::invalid_argument("weight_search: no candidates");
    WeightSearchResult result;
    if (candidates.size() == 1) {
        result.best_phi = candidates[0];
        return result;
    }
    const Dataset val = validation_split(data, val_identity_frac);
    result.epochs_used = search_epochs > 0 ? search_epochs : std::max(1, base.epochs / 2);

    double best_score = -1;
    for (double phi : candidates) {
        TrainConfig cfg = base;
        cfg.mode = Mode::Multi;
        cfg.weighting = Weighting::Dynamic;
        cfg.phi_s = phi;
        cfg.epochs = result.epochs_used;
        cfg.checkpoint_every = 0;
        auto trained = train(val, cfg);
        auto rep = evaluate_net(trained.net, val, Routing::Generic, false);
        result.scores.emplace_back(phi, rep.rank1.all);
        if (rep.rank1.all > best_score) {
            best_score = rep.rank1.all;
            result.best_phi = phi;
        }
    }
    return result;
}

}  // namespace mtlcnn
