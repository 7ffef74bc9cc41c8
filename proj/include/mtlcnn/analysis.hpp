// Energy-based weight analysis: per-feature-dimension energy of each head
// matrix (row-wise absolute sums), sorted profiles, top-k dimension overlap
// between tasks, the accuracy-vs-feature-dimension sweep, and energy
// mean/std trajectories across a checkpoint series.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mtlcnn/evaluation.hpp"

namespace mtlcnn {

struct EnergyVector {
    std::string task;
    std::vector<double> values;  // one entry per feature dimension
    int rows = 0, cols = 0;      // source matrix dims

    double mean() const {
        double m = 0;
        for (double v : values) m += v;
        return values.empty() ? 0.0 : m / static_cast<double>(values.size());
    }

    double stddev() const {
        const double m = mean();
        double acc = 0;
        for (double v : values) acc += (v - m) * (v - m);
        return values.empty() ? 0.0 : std::sqrt(acc / static_cast<double>(values.size()));
    }
};

// Eq. 13: s_i = sum_j |W_ij| over the class columns of a (D x C) head matrix.
inline EnergyVector energy_vector(const Tensor& w, std::string task = {}) {
    if (!w.defined() || w.ndim() != 2 || w.size() == 0)
        throw std::invalid_argument("energy_vector: expected a non-empty matrix");
    EnergyVector e;
    e.task = std::move(task);
    e.rows = w.dim(0);
    e.cols = w.dim(1);
    e.values.assign(static_cast<std::size_t>(e.rows), 0.0);
    const auto& v = w.data();
    for (int i = 0; i < e.rows; ++i)
        for (int j = 0; j < e.cols; ++j)
            e.values[static_cast<std::size_t>(i)] += std::abs(v[static_cast<std::size_t>(i) * e.cols + j]);
    return e;
}

// Indices of the k largest energies, ties to the lower index.
inline std::vector<int> top_k_indices(const std::vector<double>& values, int k) {
    std::vector<int> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return values[static_cast<std::size_t>(a)] > values[static_cast<std::size_t>(b)];
    });
    idx.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(values.size()))));
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> inter, uni;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
    return uni.empty() ? 0.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

// Ratio-of-expectations Jaccard for two independent uniform k-subsets of D
// dimensions: E|A ^ B| = k^2/D over E|A u B| = 2k - k^2/D, i.e. k/(2D - k).
inline double expected_random_jaccard(int k, int d) {
    return static_cast<double>(k) / (2.0 * d - k);
}

struct EnergyReport {
    bool identity_only = false;
    double topk_frac = 0.2;
    int k = 0;
    std::vector<EnergyVector> tasks;           // identity (+ pose, illum, expr)
    EnergyVector all;                          // energy of the column-concatenated W_all
    std::vector<std::vector<int>> topk;        // per task
    std::vector<std::vector<double>> overlap;  // pairwise Jaccard between top-k sets
    std::vector<int> wall_row_order;           // rows of W_all sorted by energy, descending
};

inline EnergyReport energy_report(MultiTaskNet& net, double topk_frac = 0.2) {
    EnergyReport rep;
    rep.topk_frac = topk_frac;
    rep.tasks.push_back(energy_vector(net.identity_head.weight, "identity"));
    if (!net.has_side_heads()) {
        rep.identity_only = true;
        std::fprintf(stderr,
                     "energy_report: single-task checkpoint, emitting identity-only report\n");
    } else {
        rep.tasks.push_back(energy_vector(net.W_p, "pose"));
        rep.tasks.push_back(energy_vector(net.W_l, "illum"));
        rep.tasks.push_back(energy_vector(net.W_e, "expr"));
    }

    const int d = rep.tasks[0].rows;
    rep.all.task = "all";
    rep.all.rows = d;
    rep.all.values.assign(static_cast<std::size_t>(d), 0.0);
    for (const auto& t : rep.tasks) {
        rep.all.cols += t.cols;
        for (int i = 0; i < d; ++i)
            rep.all.values[static_cast<std::size_t>(i)] += t.values[static_cast<std::size_t>(i)];
    }

    rep.k = std::max(1, static_cast<int>(std::lround(topk_frac * d)));
    for (const auto& t : rep.tasks) rep.topk.push_back(top_k_indices(t.values, rep.k));
    rep.overlap.assign(rep.tasks.size(), std::vector<double>(rep.tasks.size(), 1.0));
    for (std::size_t i = 0; i < rep.topk.size(); ++i)
        for (std::size_t j = 0; j < rep.topk.size(); ++j)
            rep.overlap[i][j] = jaccard(rep.topk[i], rep.topk[j]);

    rep.wall_row_order.assign(static_cast<std::size_t>(d), 0);
    std::iota(rep.wall_row_order.begin(), rep.wall_row_order.end(), 0);
    std::stable_sort(rep.wall_row_order.begin(), rep.wall_row_order.end(), [&](int a, int b) {
        return rep.all.values[static_cast<std::size_t>(a)] > rep.all.values[static_cast<std::size_t>(b)];
    });
    return rep;
}

// ---------------------------------------------------------------------------
// Feature-dimension sweep (Fig. 6c procedure)
// ---------------------------------------------------------------------------

struct DimSweepPoint {
    int n = 0;
    double acc_raw = 0;   // rank-1 on x restricted to the top-n dims of s^d
    double acc_head = 0;  // rank-1 on y^d with W^d rows outside the top-n zeroed
};

inline std::vector<int> default_sweep_grid(int d, int points = 10) {
    std::vector<int> grid;
    for (int i = 1; i <= points; ++i) {
        const int n = std::max(1, static_cast<int>(std::lround(static_cast<double>(i) * d / points)));
        if (grid.empty() || grid.back() != n) grid.push_back(n);
    }
    return grid;
}

namespace detail {

inline std::vector<std::vector<double>> extract_features(MultiTaskNet& net,
                                                         const std::vector<const SyntheticSample*>& samples,
                                                         int chunk = 64) {
    NoGradGuard ng;
    const int d = net.feature_dim();
    std::vector<std::vector<double>> out;
    out.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(chunk)) {
        const std::size_t stop = std::min(samples.size(), start + static_cast<std::size_t>(chunk));
        std::vector<const SyntheticSample*> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                 samples.begin() + static_cast<std::ptrdiff_t>(stop));
        Tensor x = net.trunk_forward(images_to_input(part, net.trunk.image_size), false);
        for (std::size_t r = 0; r < part.size(); ++r)
            out.emplace_back(x.data().begin() + static_cast<std::ptrdiff_t>(r * d),
                             x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
    return out;
}

inline double rank1_cosine(const std::vector<std::vector<double>>& gallery,
                           const std::vector<int>& gallery_ids,
                           const std::vector<std::vector<double>>& probes,
                           const std::vector<int>& probe_ids) {
    std::vector<double> distances(gallery.size() * probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i)
        for (std::size_t g = 0; g < gallery.size(); ++g)
            distances[i * gallery.size() + g] = cosine_distance(probes[i], gallery[g]);
    return rank1_from_distances(distances, gallery_ids, probe_ids, {}).all;
}

}  // namespace detail

// Two accuracy curves over n: raw shared features restricted to the top-n
// identity-energy dimensions, and identity-head features computed with the
// complementary W^d rows zeroed.
inline std::vector<DimSweepPoint> feature_dim_sweep(MultiTaskNet& net, const Dataset& data,
                                                    const std::vector<int>& n_values) {
    const int d = net.feature_dim();
    for (int n : n_values)
        if (n <= 0 || n > d)
            throw std::invalid_argument("feature_dim_sweep: n = " + std::to_string(n) +
                                        " out of range for D = " + std::to_string(d));

    const auto s_d = energy_vector(net.identity_head.weight, "identity");
    auto gallery_x = detail::extract_features(net, detail::sample_ptrs(data.gallery));
    auto probe_x = detail::extract_features(net, detail::sample_ptrs(data.probe));
    std::vector<int> gallery_ids, probe_ids;
    for (const auto& s : data.gallery) gallery_ids.push_back(s.y_d);
    for (const auto& s : data.probe) probe_ids.push_back(s.y_d);

    const auto& w = net.identity_head.weight.data();
    const auto& b = net.identity_head.bias.data();
    const int classes = net.dims.identity;

    std::vector<DimSweepPoint> out;
    for (int n : n_values) {
        const auto dims = top_k_indices(s_d.values, n);
        DimSweepPoint point;
        point.n = n;

        auto restrict_x = [&](const std::vector<std::vector<double>>& xs) {
            std::vector<std::vector<double>> r;
            r.reserve(xs.size());
            for (const auto& x : xs) {
                std::vector<double> v;
                v.reserve(dims.size());
                for (int i : dims) v.push_back(x[static_cast<std::size_t>(i)]);
                r.push_back(std::move(v));
            }
            return r;
        };
        point.acc_raw = detail::rank1_cosine(restrict_x(gallery_x), gallery_ids,
                                             restrict_x(probe_x), probe_ids);

        auto head_features = [&](const std::vector<std::vector<double>>& xs) {
            std::vector<std::vector<double>> r;
            r.reserve(xs.size());
            for (const auto& x : xs) {
                std::vector<double> y(b);
                for (int i : dims)
                    for (int c = 0; c < classes; ++c)
                        y[static_cast<std::size_t>(c)] +=
                            x[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i) * classes + c];
                r.push_back(std::move(y));
            }
            return r;
        };
        point.acc_head = detail::rank1_cosine(head_features(gallery_x), gallery_ids,
                                              head_features(probe_x), probe_ids);
        out.push_back(point);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Energy trajectory over a checkpoint series (Fig. 7)
// ---------------------------------------------------------------------------

struct TrajectoryPoint {
    int epoch = 0;
    std::vector<std::string> task_names;
    std::vector<double> mean, stddev;  // parallel to task_names
};

inline std::vector<TrajectoryPoint> energy_trajectory(const std::vector<io::fs::path>& checkpoints) {
    if (checkpoints.size() < 2)
        throw std::invalid_argument("energy_trajectory: need at least 2 checkpoints");
    std::vector<TrajectoryPoint> out;
    int feature_dim = -1;
    std::string arch_tag;
    for (const auto& dir : checkpoints) {
        MultiTaskNet net = load_checkpoint(dir);
        std::string tag = mode_name(net.mode) + ":" + std::to_string(net.feature_dim()) + ":" +
                          std::to_string(net.dims.identity) + ":" + std::to_string(net.dims.pose);
        if (feature_dim < 0) {
            feature_dim = net.feature_dim();
            arch_tag = tag;
        } else if (tag != arch_tag) {
            throw std::invalid_argument("energy_trajectory: checkpoint " + dir.string() +
                                        " has a mismatched architecture");
        }
        auto rep = energy_report(net);
        TrajectoryPoint p;
        p.epoch = net.epoch;
        for (const auto& t : rep.tasks) {
            p.task_names.push_back(t.task);
            p.mean.push_back(t.mean());
            p.stddev.push_back(t.stddev());
        }
        out.push_back(std::move(p));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const TrajectoryPoint& a, const TrajectoryPoint& b) { return a.epoch < b.epoch; });
    return out;
}

// ---------------------------------------------------------------------------
// Report writers (plot data only; no rendering)
// ---------------------------------------------------------------------------

inline nlohmann::json energy_report_to_json(const EnergyReport& rep) {
    nlohmann::json j;
    j["identity_only"] = rep.identity_only;
    j["topk_frac"] = rep.topk_frac;
    j["k"] = rep.k;
    j["random_jaccard_baseline"] = expected_random_jaccard(rep.k, rep.tasks[0].rows);
    for (const auto& t : rep.tasks) {
        j["tasks"][t.task] = {{"rows", t.rows},
                              {"cols", t.cols},
                              {"mean", t.mean()},
                              {"stddev", t.stddev()},
                              {"values", t.values}};
    }
    j["all"] = {{"cols", rep.all.cols}, {"mean", rep.all.mean()}, {"values", rep.all.values}};
    for (std::size_t i = 0; i < rep.tasks.size(); ++i) {
        j["topk"][rep.tasks[i].task] = rep.topk[i];
        for (std::size_t k2 = 0; k2 < rep.tasks.size(); ++k2)
            j["overlap"][rep.tasks[i].task][rep.tasks[k2].task] = rep.overlap[i][k2];
    }
    return j;
}

inline void write_energy_profiles_csv(const EnergyReport& rep, const io::fs::path& path) {
    std::string csv = "rank";
    std::vector<std::vector<double>> sorted;
    for (const auto& t : rep.tasks) {
        csv += ",s_" + t.task;
        auto v = t.values;
        std::sort(v.begin(), v.end(), std::greater<>());
        sorted.push_back(std::move(v));
    }
    csv += ",s_all\n";
    auto all = rep.all.values;
    std::sort(all.begin(), all.end(), std::greater<>());
    for (std::size_t r = 0; r < all.size(); ++r) {
        csv += std::to_string(r);
        for (const auto& v : sorted) csv += "," + io::fmt17(v[r]);
        csv += "," + io::fmt17(all[r]) + "\n";
    }
    io::write_text(path, csv);
}

// |W_all| with rows permuted by descending total energy (Fig. 6b data).
inline void write_wall_heatmap_csv(MultiTaskNet& net, const EnergyReport& rep,
                                   const io::fs::path& path) {
    std::vector<const Tensor*> heads = {&net.identity_head.weight};
    if (net.has_side_heads()) {
        heads.push_back(&net.W_p);
        heads.push_back(&net.W_l);
        heads.push_back(&net.W_e);
    }
    std::string csv;
    for (int row : rep.wall_row_order) {
        std::string line;
        for (const Tensor* h : heads) {
            const int cols = h->dim(1);
            for (int c = 0; c < cols; ++c) {
                if (!line.empty()) line += ",";
                line += io::fmt17(std::abs(h->data()[static_cast<std::size_t>(row) * cols + c]));
            }
        }
        csv += line + "\n";
    }
    io::write_text(path, csv);
}

inline void write_dim_sweep_csv(const std::vector<DimSweepPoint>& points, const io::fs::path& path) {
    std::string csv = "n,rank1_raw_x,rank1_head\n";
    for (const auto& p : points)
        csv += std::to_string(p.n) + "," + io::fmt17(p.acc_raw) + "," + io::fmt17(p.acc_head) + "\n";
    io::write_text(path, csv);
}

inline void write_trajectory_csv(const std::vector<TrajectoryPoint>& points, const io::fs::path& path) {
    if (points.empty()) throw std::invalid_argument("write_trajectory_csv: empty series");
    std::string csv = "epoch";
    for (const auto& name : points[0].task_names) csv += ",mean_" + name + ",std_" + name;
    csv += "\n";
    for (const auto& p : points) {
        csv += std::to_string(p.epoch);
        for (std::size_t i = 0; i < p.task_names.size(); ++i)
            csv += "," + io::fmt17(p.mean[i]) + "," + io::fmt17(p.stddev[i]);
        csv += "\n";
    }
    io::write_text(path, csv);
}

}  // namespace mtlcnn
