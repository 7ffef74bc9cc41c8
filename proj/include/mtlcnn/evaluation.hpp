// Feature matching and recognition metrics: cosine distance, stochastic /
// hard routing over pose-group templates (Eq. 12), rank-1 identification
// with per-pose-group breakdown, verification accuracy / EER / AUC, and the
// optional mirror-augmented distance.

#pragma once

#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "mtlcnn/network.hpp"

namespace mtlcnn {

enum class Routing { Generic, Stochastic, Hard };

inline std::string routing_name(Routing r) {
    switch (r) {
        case Routing::Generic: return "generic";
        case Routing::Stochastic: return "stochastic";
        default: return "hard";
    }
}

inline Routing routing_from_name(const std::string& s) {
    if (s == "generic") return Routing::Generic;
    if (s == "stochastic") return Routing::Stochastic;
    if (s == "hard") return Routing::Hard;
    throw std::invalid_argument("unknown routing '" + s + "'");
}

// 1 - cosine similarity, clamped to the mathematical range [0, 2].
inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("cosine_distance: vectors of lengths " + std::to_string(a.size()) +
                                    " and " + std::to_string(b.size()));
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_distance: zero vector");
    const double d = 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
    return std::min(2.0, std::max(0.0, d));
}

struct MatchResult {
    double distance = 0;  // mean of the two components
    double generic = 0;
    double routed = 0;
};

namespace detail {
inline void check_probs(const FeatureTemplate& t) {
    if (!t.has_pose_branch)
        throw std::invalid_argument("routing requires a pose-directed template");
    double sum = 0;
    for (double p : t.p) {
        if (p < 0) throw std::invalid_argument("template group probability is negative");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-10)
        throw std::invalid_argument("template group probabilities sum to " + std::to_string(sum));
}
}  // namespace detail

// Eq. 12: generic distance and the 3x3 probability-weighted pose-specific
// distances, fused with equal weight.
inline MatchResult stochastic_routing_distance(const FeatureTemplate& a, const FeatureTemplate& b) {
    detail::check_probs(a);
    detail::check_probs(b);
    MatchResult r;
    r.generic = cosine_distance(a.y_d, b.y_d);
    r.routed = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double w = a.p[static_cast<std::size_t>(i)] * b.p[static_cast<std::size_t>(j)];
            if (w == 0.0) continue;
            r.routed += cosine_distance(a.y_g[static_cast<std::size_t>(i)],
                                        b.y_g[static_cast<std::size_t>(j)]) * w;
        }
    r.distance = 0.5 * r.generic + 0.5 * r.routed;
    return r;
}

// Select each template's most probable group (Fig. 4's red underline).
inline MatchResult hard_routing_distance(const FeatureTemplate& a, const FeatureTemplate& b) {
    detail::check_probs(a);
    detail::check_probs(b);
    MatchResult r;
    r.generic = cosine_distance(a.y_d, b.y_d);
    const int i = argmax_class(a.p);
    const int j = argmax_class(b.p);
    r.routed = cosine_distance(a.y_g[static_cast<std::size_t>(i)], b.y_g[static_cast<std::size_t>(j)]);
    r.distance = 0.5 * r.generic + 0.5 * r.routed;
    return r;
}

inline double template_distance(const FeatureTemplate& a, const FeatureTemplate& b, Routing routing) {
    switch (routing) {
        case Routing::Generic: return cosine_distance(a.y_d, b.y_d);
        case Routing::Stochastic: return stochastic_routing_distance(a, b).distance;
        default: return hard_routing_distance(a, b).distance;
    }
}

// ---------------------------------------------------------------------------
// Rank-1 identification
// ---------------------------------------------------------------------------

struct Rank1Result {
    double all = 0;
    std::array<double, 3> by_group = {0, 0, 0};  // left, frontal, right
    std::array<int, 3> group_total = {0, 0, 0};
    std::array<int, 3> group_correct = {0, 0, 0};
    int total = 0;
    int correct = 0;
};

// Rank-1 over a precomputed probe-major distance table; ties resolve to the
// lowest gallery index. probe_groups may be empty to skip the breakdown.
inline Rank1Result rank1_from_distances(const std::vector<double>& distances,
                                        const std::vector<int>& gallery_ids,
                                        const std::vector<int>& probe_ids,
                                        const std::vector<int>& probe_groups) {
    const std::size_t ng = gallery_ids.size(), np = probe_ids.size();
    if (ng == 0) throw std::invalid_argument("rank1: empty gallery");
    if (distances.size() != ng * np) throw std::invalid_argument("rank1: distance table size mismatch");
    if (std::set<int>(gallery_ids.begin(), gallery_ids.end()).size() != gallery_ids.size())
        throw std::invalid_argument("rank1: gallery labels must be unique");
    if (!probe_groups.empty() && probe_groups.size() != np)
        throw std::invalid_argument("rank1: probe group count mismatch");

    Rank1Result r;
    for (std::size_t i = 0; i < np; ++i) {
        double best = 0;
        std::size_t arg = 0;
        for (std::size_t g = 0; g < ng; ++g) {
            const double d = distances[i * ng + g];
            if (g == 0 || d < best) {
                best = d;
                arg = g;
            }
        }
        const bool ok = gallery_ids[arg] == probe_ids[i];
        ++r.total;
        r.correct += ok;
        if (!probe_groups.empty()) {
            const int grp = probe_groups[i];
            if (grp < 0 || grp > 2) throw std::invalid_argument("rank1: group index out of range");
            ++r.group_total[static_cast<std::size_t>(grp)];
            r.group_correct[static_cast<std::size_t>(grp)] += ok;
        }
    }
    r.all = r.total ? static_cast<double>(r.correct) / r.total : 0.0;
    for (int g = 0; g < 3; ++g)
        r.by_group[static_cast<std::size_t>(g)] =
            r.group_total[static_cast<std::size_t>(g)]
                ? static_cast<double>(r.group_correct[static_cast<std::size_t>(g)]) /
                      r.group_total[static_cast<std::size_t>(g)]
                : 0.0;
    return r;
}

inline Rank1Result rank1_identification(const std::vector<FeatureTemplate>& gallery,
                                        const std::vector<int>& gallery_ids,
                                        const std::vector<FeatureTemplate>& probes,
                                        const std::vector<int>& probe_ids,
                                        const std::vector<int>& probe_groups, Routing routing) {
    if (gallery.size() != gallery_ids.size() || probes.size() != probe_ids.size())
        throw std::invalid_argument("rank1: template/label count mismatch");
    std::vector<double> distances(gallery.size() * probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i)
        for (std::size_t g = 0; g < gallery.size(); ++g)
            distances[i * gallery.size() + g] = template_distance(probes[i], gallery[g], routing);
    return rank1_from_distances(distances, gallery_ids, probe_ids, probe_groups);
}

// ---------------------------------------------------------------------------
// Verification metrics
// ---------------------------------------------------------------------------

struct VerificationMetrics {
    double accuracy = 0;
    double threshold = 0;  // the accuracy-maximizing threshold (predict same iff d <= t)
    double eer = 0;
    double auc = 0;
};

// Thresholds are scanned at the midpoints of consecutive sorted distances
// (plus sentinels below/above the range); EER is found by linear
// interpolation where false-accept crosses false-reject; AUC integrates the
// ROC with the trapezoid rule.
inline VerificationMetrics verification_metrics(const std::vector<double>& distances,
                                                const std::vector<int>& same) {
    if (distances.size() != same.size() || distances.empty())
        throw std::invalid_argument("verification: need matching distance/label lists");
    std::size_t n_same = 0, n_diff = 0;
    for (int s : same) (s ? n_same : n_diff)++;
    if (n_same == 0 || n_diff == 0)
        throw std::invalid_argument("verification: need at least one pair of each class");

    std::vector<double> sorted(distances);
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> thresholds;
    thresholds.push_back(sorted.front() - 1.0);
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
        thresholds.push_back(0.5 * (sorted[i] + sorted[i + 1]));
    thresholds.push_back(sorted.back() + 1.0);

    VerificationMetrics m;
    m.accuracy = -1;
    std::vector<std::pair<double, double>> roc;  // (FAR, TPR) per threshold, ascending
    for (double t : thresholds) {
        std::size_t tp = 0, fp = 0;
        for (std::size_t i = 0; i < distances.size(); ++i) {
            if (distances[i] <= t) (same[i] ? tp : fp)++;
        }
        const double tpr = static_cast<double>(tp) / n_same;
        const double far = static_cast<double>(fp) / n_diff;
        const double acc =
            (static_cast<double>(tp) + (n_diff - fp)) / static_cast<double>(distances.size());
        if (acc > m.accuracy) {
            m.accuracy = acc;
            m.threshold = t;
        }
        roc.emplace_back(far, tpr);
    }

    // EER: FAR rises from 0 to 1 while FRR = 1 - TPR falls; interpolate the
    // crossing on the first segment where FAR >= FRR.
    m.eer = 0.5;
    for (std::size_t i = 0; i < roc.size(); ++i) {
        const double far = roc[i].first, frr = 1.0 - roc[i].second;
        if (far >= frr) {
            if (i == 0) {
                m.eer = far;
            } else {
                const double f1 = roc[i - 1].first, r1 = 1.0 - roc[i - 1].second;
                const double denom = (r1 - f1) + (far - frr);
                const double t = denom != 0.0 ? (r1 - f1) / denom : 0.0;
                m.eer = f1 + t * (far - f1);
            }
            break;
        }
    }

    double auc = 0;
    for (std::size_t i = 0; i + 1 < roc.size(); ++i)
        auc += 0.5 * (roc[i + 1].first - roc[i].first) * (roc[i + 1].second + roc[i].second);
    m.auc = auc;
    return m;
}

// ---------------------------------------------------------------------------
// Mirror-augmented distance
// ---------------------------------------------------------------------------

inline SyntheticSample hflip(const SyntheticSample& s, int image_size) {
    SyntheticSample out = s;
    for (int r = 0; r < image_size; ++r)
        for (int c = 0; c < image_size; ++c)
            out.image[static_cast<std::size_t>(r) * image_size + c] =
                s.image[static_cast<std::size_t>(r) * image_size + (image_size - 1 - c)];
    return out;
}

// Mean cosine distance of the four comparisons between an image pair and
// their horizontal mirrors.
inline double mirrored_distance(const SyntheticSample& a, const SyntheticSample& b, MultiTaskNet& net,
                                Routing routing) {
    const int s = net.trunk.image_size;
    const SyntheticSample am = hflip(a, s), bm = hflip(b, s);
    std::vector<const SyntheticSample*> all = {&a, &am, &b, &bm};
    auto t = net.extract_templates(all);
    return (template_distance(t[0], t[2], routing) + template_distance(t[0], t[3], routing) +
            template_distance(t[1], t[2], routing) + template_distance(t[1], t[3], routing)) /
           4.0;
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    Routing routing = Routing::Generic;
    bool mirror = false;
    Rank1Result rank1;
    VerificationMetrics verification;
    bool has_side = false;
    std::array<double, 3> side_accuracy = {0, 0, 0};  // pose, illum, expr (mean per-class)
    std::vector<int> gallery_ids, probe_ids, probe_groups;
    std::vector<double> distances;  // probe-major |probe| x |gallery| table
};

namespace detail {

inline std::vector<const SyntheticSample*> sample_ptrs(const std::vector<SyntheticSample>& v) {
    std::vector<const SyntheticSample*> out;
    out.reserve(v.size());
    for (const auto& s : v) out.push_back(&s);
    return out;
}

struct ClassTally {
    std::vector<int> correct, total;
    explicit ClassTally(int classes)
        : correct(static_cast<std::size_t>(classes), 0), total(static_cast<std::size_t>(classes), 0) {}

    void add(const Tensor& logits, const std::vector<int>& labels, std::size_t offset) {
        const int cols = logits.dim(1);
        for (int i = 0; i < logits.dim(0); ++i) {
            const auto begin = logits.data().begin() + static_cast<std::ptrdiff_t>(i) * cols;
            const int pred = argmax_class(std::vector<double>(begin, begin + cols));
            const int truth = labels[offset + static_cast<std::size_t>(i)];
            ++total[static_cast<std::size_t>(truth)];
            correct[static_cast<std::size_t>(truth)] += pred == truth;
        }
    }

    // mean per-class accuracy over the classes that appear
    double mean_accuracy() const {
        double acc = 0;
        int seen = 0;
        for (std::size_t c = 0; c < total.size(); ++c)
            if (total[c]) {
                acc += static_cast<double>(correct[c]) / total[c];
                ++seen;
            }
        return seen ? acc / seen : 0.0;
    }
};

}  // namespace detail

// Match every probe against the gallery under the chosen routing, and report
// rank-1 (overall and per pose group), verification metrics over all
// gallery-probe pairs, and mean per-class side-task accuracies on the probes.
inline EvalReport evaluate_net(MultiTaskNet& net, const Dataset& data, Routing routing, bool mirror) {
    if (routing != Routing::Generic && !net.has_pose_branch())
        throw std::invalid_argument(routing_name(routing) +
                                    " routing requires a pose-directed checkpoint");
    EvalReport rep;
    rep.routing = routing;
    rep.mirror = mirror;

    const auto gallery_ptrs = detail::sample_ptrs(data.gallery);
    const auto probe_ptrs = detail::sample_ptrs(data.probe);
    auto gallery_t = net.extract_templates(gallery_ptrs);
    auto probe_t = net.extract_templates(probe_ptrs);
    std::vector<FeatureTemplate> gallery_m, probe_m;
    if (mirror) {
        std::vector<SyntheticSample> gm, pm;
        for (const auto& s : data.gallery) gm.push_back(hflip(s, data.spec.image_size));
        for (const auto& s : data.probe) pm.push_back(hflip(s, data.spec.image_size));
        gallery_m = net.extract_templates(detail::sample_ptrs(gm));
        probe_m = net.extract_templates(detail::sample_ptrs(pm));
    }

    for (const auto& s : data.gallery) rep.gallery_ids.push_back(s.y_d);
    for (const auto& s : data.probe) {
        rep.probe_ids.push_back(s.y_d);
        rep.probe_groups.push_back(net.groups.group(s.y_p));
    }

    const std::size_t ng = gallery_t.size();
    rep.distances.resize(ng * probe_t.size());
    for (std::size_t i = 0; i < probe_t.size(); ++i)
        for (std::size_t g = 0; g < ng; ++g) {
            double d;
            if (!mirror) {
                d = template_distance(probe_t[i], gallery_t[g], routing);
            } else {
                d = (template_distance(probe_t[i], gallery_t[g], routing) +
                     template_distance(probe_t[i], gallery_m[g], routing) +
                     template_distance(probe_m[i], gallery_t[g], routing) +
                     template_distance(probe_m[i], gallery_m[g], routing)) /
                    4.0;
            }
            rep.distances[i * ng + g] = d;
        }

    rep.rank1 = rank1_from_distances(rep.distances, rep.gallery_ids, rep.probe_ids, rep.probe_groups);

    std::vector<int> same;
    same.reserve(rep.distances.size());
    for (std::size_t i = 0; i < probe_t.size(); ++i)
        for (std::size_t g = 0; g < ng; ++g)
            same.push_back(rep.probe_ids[i] == rep.gallery_ids[g] ? 1 : 0);
    rep.verification = verification_metrics(rep.distances, same);

    if (net.has_side_heads()) {
        rep.has_side = true;
        NoGradGuard ng_guard;
        std::vector<int> yp, yl, ye;
        for (const auto& s : data.probe) {
            yp.push_back(s.y_p);
            yl.push_back(s.y_l);
            ye.push_back(s.y_e);
        }
        detail::ClassTally pose_tally(net.dims.pose), illum_tally(net.dims.illum),
            expr_tally(net.dims.expr);
        const std::size_t chunk = 64;
        for (std::size_t start = 0; start < probe_ptrs.size(); start += chunk) {
            const std::size_t stop = std::min(probe_ptrs.size(), start + chunk);
            std::vector<const SyntheticSample*> part(probe_ptrs.begin() + static_cast<std::ptrdiff_t>(start),
                                                     probe_ptrs.begin() + static_cast<std::ptrdiff_t>(stop));
            Tensor x = net.trunk_forward(images_to_input(part, data.spec.image_size), false);
            pose_tally.add(matmul(x, net.W_p), yp, start);
            illum_tally.add(matmul(x, net.W_l), yl, start);
            expr_tally.add(matmul(x, net.W_e), ye, start);
        }
        rep.side_accuracy[0] = pose_tally.mean_accuracy();
        rep.side_accuracy[1] = illum_tally.mean_accuracy();
        rep.side_accuracy[2] = expr_tally.mean_accuracy();
    }
    return rep;
}

}  // namespace mtlcnn
