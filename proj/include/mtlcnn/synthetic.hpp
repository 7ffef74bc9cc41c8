// Procedural multi-factor image generator. Each identity is a fixed random
// blob pattern; pose applies an in-plane rotation plus horizontal shear
// driven by the yaw angle, illumination multiplies a planar brightness
// gradient, expression applies a localized smooth warp, and seeded Gaussian
// pixel noise is added last. Every sample is a pure function of
// (spec.seed, identity, pose, illum, expr), so datasets are reproducible
// bit for bit.

#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtlcnn/io.hpp"
#include "mtlcnn/layers.hpp"

namespace mtlcnn {

struct FactorSpec {
    int num_identities = 40;
    std::vector<double> pose_bins = {-60, -45, -30, -15, 0, 15, 30, 45, 60};  // yaw degrees
    int illum_bins = 4;
    int expr_bins = 2;
    int image_size = 32;
    double noise_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_identities < 2) throw std::invalid_argument("FactorSpec: need at least 2 identities");
        if (pose_bins.empty()) throw std::invalid_argument("FactorSpec: pose_bins must be non-empty");
        if (illum_bins < 1 || expr_bins < 1)
            throw std::invalid_argument("FactorSpec: illum/expr bin counts must be positive");
        if (image_size < 16) throw std::invalid_argument("FactorSpec: image_size must be >= 16");
        if (noise_std < 0) throw std::invalid_argument("FactorSpec: noise_std must be non-negative");
    }

    // Bin whose yaw is closest to 0 (ties to the lower index): the "frontal,
    // neutral" gallery pose.
    int frontal_bin() const {
        int best = 0;
        for (int i = 1; i < static_cast<int>(pose_bins.size()); ++i)
            if (std::abs(pose_bins[static_cast<std::size_t>(i)]) <
                std::abs(pose_bins[static_cast<std::size_t>(best)]))
                best = i;
        return best;
    }
};

struct SyntheticSample {
    std::vector<double> image;  // image_size^2 values in [0,1], row-major
    int y_d = 0;                // identity
    int y_p = 0;                // pose bin
    int y_l = 0;                // illumination bin
    int y_e = 0;                // expression bin
};

// Pose group rule: |yaw| >= 45 degrees is a profile group; positive yaw is
// the left profile, negative the right. 0 = left, 1 = frontal, 2 = right.
inline int pose_group_of_yaw(double yaw) {
    if (yaw >= 45.0) return 0;
    if (yaw <= -45.0) return 2;
    return 1;
}

namespace detail {

inline std::mt19937_64 keyed_rng(std::uint64_t seed, std::string_view stream, std::uint64_t a = 0,
                                 std::uint64_t b = 0, std::uint64_t c = 0, std::uint64_t d = 0) {
    std::uint64_t h = name_seed(seed, stream);
    for (std::uint64_t k : {a, b, c, d}) {
        h ^= k + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return std::mt19937_64(h);
}

struct Blob {
    double cx, cy, sigma, amp;
};

// All identities share one blob layout (like faces share their gross
// structure); an identity is a small keyed perturbation of that template, so
// telling identities apart requires fine-grained cues that pose /
// illumination / expression variation can easily swamp.
inline std::vector<Blob> identity_blobs(const FactorSpec& spec, int identity) {
    auto template_rng = keyed_rng(spec.seed, "blob-template");
    std::uniform_real_distribution<double> px(-0.38, 0.38);
    std::uniform_real_distribution<double> py(-0.48, 0.48);
    std::uniform_real_distribution<double> sig(0.10, 0.20);
    std::uniform_real_distribution<double> amp(0.5, 1.0);
    std::bernoulli_distribution positive(0.65);
    std::vector<Blob> blobs(5);
    for (auto& b : blobs) {
        b.cx = px(template_rng);
        b.cy = py(template_rng);
        b.sigma = sig(template_rng);
        b.amp = amp(template_rng) * (positive(template_rng) ? 1.0 : -1.0);
    }
    auto id_rng = keyed_rng(spec.seed, "identity", static_cast<std::uint64_t>(identity));
    std::uniform_real_distribution<double> jitter(-0.07, 0.07);
    std::uniform_real_distribution<double> amp_scale(0.8, 1.2);
    std::uniform_real_distribution<double> sig_scale(0.9, 1.1);
    for (auto& b : blobs) {
        b.cx += jitter(id_rng);
        b.cy += jitter(id_rng);
        b.amp *= amp_scale(id_rng);
        b.sigma *= sig_scale(id_rng);
    }
    return blobs;
}

// Oval base bump shared by all identities; it rides through the pose
// transform, which is what makes pose readable from raw pixels.
inline double base_oval(double qx, double qy) {
    const double r2 = (qx / 0.62) * (qx / 0.62) + (qy / 0.80) * (qy / 0.80);
    return 1.2 * std::exp(-2.2 * r2 * r2);
}

struct ExprWarp {
    double cx = 0, cy = 0, dx = 0, dy = 0, radius = 0.3, amp = 0;
};

inline ExprWarp expression_warp(const FactorSpec& spec, int identity, int expr) {
    ExprWarp e;
    if (expr == 0) return e;  // bin 0 is neutral
    (void)identity;
    auto rng = keyed_rng(spec.seed, "expr", static_cast<std::uint64_t>(expr));
    std::uniform_real_distribution<double> pos(-0.45, 0.45);
    std::uniform_real_distribution<double> ang(0.0, 2.0 * M_PI);
    e.cx = pos(rng);
    e.cy = pos(rng);
    const double a = ang(rng);
    e.radius = 0.32;
    e.amp = 0.65;
    e.dx = std::cos(a);
    e.dy = std::sin(a);
    return e;
}

}  // namespace detail

inline SyntheticSample render(int identity, int pose, int illum, int expr, const FactorSpec& spec) {
    spec.validate();
    if (identity < 0 || identity >= spec.num_identities || pose < 0 ||
        pose >= static_cast<int>(spec.pose_bins.size()) || illum < 0 || illum >= spec.illum_bins ||
        expr < 0 || expr >= spec.expr_bins)
        throw std::invalid_argument("render: factor index out of range");

    const auto blobs = detail::identity_blobs(spec, identity);
    const auto warp = detail::expression_warp(spec, identity, expr);
    const double yaw = spec.pose_bins[static_cast<std::size_t>(pose)];
    const double yaw_rad = yaw * M_PI / 180.0;
    // the warp strength is mildly identity-dependent (2-D stand-in for how
    // 3-D head shape modulates foreshortening), so cross-pose matching cannot
    // rely on one global inverse transform
    auto mod_rng = detail::keyed_rng(spec.seed, "pose-mod", static_cast<std::uint64_t>(identity));
    std::uniform_real_distribution<double> mod(-0.3, 0.3);
    const double rot = 0.8 * (1.0 + mod(mod_rng)) * yaw_rad;
    const double shear = 0.7 * std::sin(yaw_rad);
    const double cr = std::cos(rot), sr = std::sin(rot);

    // Illumination bin 0 is neutral; others are planar gradients at evenly
    // spaced directions.
    double ldx = 0, ldy = 0;
    if (illum > 0) {
        const double phi = 2.0 * M_PI * (illum - 1) / std::max(1, spec.illum_bins - 1);
        ldx = std::cos(phi);
        ldy = std::sin(phi);
    }

    const int s = spec.image_size;
    SyntheticSample out;
    out.image.resize(static_cast<std::size_t>(s) * s);
    out.y_d = identity;
    out.y_p = pose;
    out.y_l = illum;
    out.y_e = expr;

    auto rng = detail::keyed_rng(spec.seed, "noise", static_cast<std::uint64_t>(identity),
                                 static_cast<std::uint64_t>(pose), static_cast<std::uint64_t>(illum),
                                 static_cast<std::uint64_t>(expr));
    std::normal_distribution<double> noise(0.0, spec.noise_std);

    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
            const double u = (c + 0.5) * 2.0 / s - 1.0;
            const double v = (r + 0.5) * 2.0 / s - 1.0;
            // invert pose: p = R(rot) * Shear(shear) * q
            const double px = cr * u + sr * v;
            const double py = -sr * u + cr * v;
            double qx = px - shear * py;
            double qy = py;
            if (warp.amp != 0.0) {
                const double ddx = qx - warp.cx, ddy = qy - warp.cy;
                const double g = warp.amp *
                                 std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * warp.radius * warp.radius));
                qx += g * warp.dx;
                qy += g * warp.dy;
            }
            double f = detail::base_oval(qx, qy) - 0.4;
            for (const auto& b : blobs) {
                const double dx = qx - b.cx, dy = qy - b.cy;
                f += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
            }
            double val = 1.0 / (1.0 + std::exp(-2.2 * f));
            val *= 1.0 + 0.7 * (ldx * u + ldy * v);
            if (spec.noise_std > 0) val += noise(rng);
            out.image[static_cast<std::size_t>(r) * s + c] = std::clamp(val, 0.0, 1.0);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct Dataset {
    FactorSpec spec;
    double train_frac = 0.8;
    std::vector<int> train_identities;  // class index == position in this list
    std::vector<int> test_identities;
    std::vector<SyntheticSample> train, gallery, probe;

    int num_train_classes() const { return static_cast<int>(train_identities.size()); }
    int image_dim() const { return spec.image_size * spec.image_size; }

    int train_class_of(int identity) const {
        for (std::size_t i = 0; i < train_identities.size(); ++i)
            if (train_identities[i] == identity) return static_cast<int>(i);
        throw std::invalid_argument("identity " + std::to_string(identity) + " not in training split");
    }
};

// Train on the first floor(frac * n) identities; the held-out identities form
// the test set with one frontal/neutral gallery image each and every other
// factor combination as probes.
inline Dataset generate_splits(const FactorSpec& spec, double train_frac) {
    spec.validate();
    if (!(train_frac > 0.0 && train_frac < 1.0))
        throw std::invalid_argument("generate_splits: train_frac must be in (0,1)");
    const int n_train = static_cast<int>(std::floor(train_frac * spec.num_identities));
    if (n_train < 1 || n_train >= spec.num_identities)
        throw std::invalid_argument("generate_splits: too few identities to split at frac " +
                                    std::to_string(train_frac));
    Dataset ds;
    ds.spec = spec;
    ds.train_frac = train_frac;
    for (int i = 0; i < n_train; ++i) ds.train_identities.push_back(i);
    for (int i = n_train; i < spec.num_identities; ++i) ds.test_identities.push_back(i);

    const int fb = spec.frontal_bin();
    const int np = static_cast<int>(spec.pose_bins.size());
    for (int id = 0; id < spec.num_identities; ++id)
        for (int p = 0; p < np; ++p)
            for (int l = 0; l < spec.illum_bins; ++l)
                for (int e = 0; e < spec.expr_bins; ++e) {
                    SyntheticSample sample = render(id, p, l, e, spec);
                    if (id < n_train)
                        ds.train.push_back(std::move(sample));
                    else if (p == fb && l == 0 && e == 0)
                        ds.gallery.push_back(std::move(sample));
                    else
                        ds.probe.push_back(std::move(sample));
                }
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + per-split raw float64 images + label CSVs
// ---------------------------------------------------------------------------

namespace detail {

inline void write_split(const io::fs::path& dir, const std::string& name,
                        const std::vector<SyntheticSample>& samples, int image_dim,
                        nlohmann::json& manifest) {
    std::vector<double> flat;
    flat.reserve(samples.size() * static_cast<std::size_t>(image_dim));
    std::string csv = "index,y_d,y_p,y_l,y_e\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        flat.insert(flat.end(), s.image.begin(), s.image.end());
        csv += std::to_string(i) + "," + std::to_string(s.y_d) + "," + std::to_string(s.y_p) + "," +
               std::to_string(s.y_l) + "," + std::to_string(s.y_e) + "\n";
    }
    io::write_doubles(dir / (name + ".bin"), flat);
    io::write_text(dir / (name + "_labels.csv"), csv);
    manifest["splits"][name] = {{"images", name + ".bin"},
                                {"labels", name + "_labels.csv"},
                                {"count", samples.size()}};
}

inline std::vector<SyntheticSample> read_split(const io::fs::path& dir, const nlohmann::json& entry,
                                               int image_dim) {
    const auto flat = io::read_doubles(dir / entry.at("images").get<std::string>());
    const std::size_t count = entry.at("count").get<std::size_t>();
    if (flat.size() != count * static_cast<std::size_t>(image_dim))
        throw std::runtime_error("dataset image file has unexpected size");
    std::vector<SyntheticSample> samples(count);
    std::istringstream csv(io::read_text(dir / entry.at("labels").get<std::string>()));
    std::string line;
    std::getline(csv, line);  // header
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(csv, line)) throw std::runtime_error("dataset label file truncated");
        SyntheticSample& s = samples[i];
        std::size_t idx;
        if (std::sscanf(line.c_str(), "%zu,%d,%d,%d,%d", &idx, &s.y_d, &s.y_p, &s.y_l, &s.y_e) != 5)
            throw std::runtime_error("bad label row: " + line);
        s.image.assign(flat.begin() + static_cast<std::ptrdiff_t>(i * image_dim),
                       flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * image_dim));
    }
    return samples;
}

}  // namespace detail

inline nlohmann::json spec_to_json(const FactorSpec& spec) {
    return {{"num_identities", spec.num_identities}, {"pose_bins", spec.pose_bins},
            {"illum_bins", spec.illum_bins},         {"expr_bins", spec.expr_bins},
            {"image_size", spec.image_size},         {"noise_std", spec.noise_std},
            {"seed", spec.seed}};
}

inline FactorSpec spec_from_json(const nlohmann::json& j) {
    FactorSpec spec;
    spec.num_identities = j.at("num_identities").get<int>();
    spec.pose_bins = j.at("pose_bins").get<std::vector<double>>();
    spec.illum_bins = j.at("illum_bins").get<int>();
    spec.expr_bins = j.at("expr_bins").get<int>();
    spec.image_size = j.at("image_size").get<int>();
    spec.noise_std = j.at("noise_std").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    return spec;
}

inline void write_dataset(const Dataset& ds, const io::fs::path& dir) {
    io::ensure_dir(dir);
    nlohmann::json manifest;
    manifest["spec"] = spec_to_json(ds.spec);
    manifest["train_frac"] = ds.train_frac;
    manifest["frontal_bin"] = ds.spec.frontal_bin();
    manifest["train_identities"] = ds.train_identities;
    manifest["test_identities"] = ds.test_identities;
    detail::write_split(dir, "train", ds.train, ds.image_dim(), manifest);
    detail::write_split(dir, "gallery", ds.gallery, ds.image_dim(), manifest);
    detail::write_split(dir, "probe", ds.probe, ds.image_dim(), manifest);
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const io::fs::path& dir) {
    const auto manifest = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
    Dataset ds;
    ds.spec = spec_from_json(manifest.at("spec"));
    ds.train_frac = manifest.at("train_frac").get<double>();
    ds.train_identities = manifest.at("train_identities").get<std::vector<int>>();
    ds.test_identities = manifest.at("test_identities").get<std::vector<int>>();
    ds.train = detail::read_split(dir, manifest.at("splits").at("train"), ds.image_dim());
    ds.gallery = detail::read_split(dir, manifest.at("splits").at("gallery"), ds.image_dim());
    ds.probe = detail::read_split(dir, manifest.at("splits").at("probe"), ds.image_dim());
    return ds;
}

}  // namespace mtlcnn
