// The multi-task network: a shared convolutional trunk feeding an identity
// head, side-task heads (pose / illumination / expression), pose-group
// identity heads behind a batch-split router, and softmax heads that learn
// the dynamic loss weights. Covers the three model variants:
//   s: identity cross-entropy only
//   m: identity + weighted side tasks (fixed alphas or learnt dynamic weights)
//   p: m plus the pose-directed branch with dual main-task weights

#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtlcnn/io.hpp"
#include "mtlcnn/layers.hpp"
#include "mtlcnn/synthetic.hpp"

namespace mtlcnn {

enum class Mode { Single, Multi, PoseDirected };
enum class Weighting { Dynamic, Fixed };

inline std::string mode_name(Mode m) {
    switch (m) {
        case Mode::Single: return "s";
        case Mode::Multi: return "m";
        default: return "p";
    }
}

inline Mode mode_from_name(const std::string& s) {
    if (s == "s") return Mode::Single;
    if (s == "m") return Mode::Multi;
    if (s == "p") return Mode::PoseDirected;
    throw std::invalid_argument("unknown mode '" + s + "' (expected s, m or p)");
}

inline std::string weighting_name(Weighting w) { return w == Weighting::Dynamic ? "dynamic" : "fixed"; }

inline Weighting weighting_from_name(const std::string& s) {
    if (s == "dynamic") return Weighting::Dynamic;
    if (s == "fixed") return Weighting::Fixed;
    throw std::invalid_argument("unknown weighting '" + s + "'");
}

// ---------------------------------------------------------------------------
// Pose groups
// ---------------------------------------------------------------------------

struct PoseGroups {
    static constexpr int kGroups = 3;  // 0 = left profile, 1 = frontal, 2 = right profile
    std::vector<int> group_of_pose;

    static PoseGroups from_yaw_bins(const std::vector<double>& yaw_bins) {
        PoseGroups g;
        g.group_of_pose.reserve(yaw_bins.size());
        for (double yaw : yaw_bins) g.group_of_pose.push_back(pose_group_of_yaw(yaw));
        return g;
    }

    int group(int pose_label) const {
        if (pose_label < 0 || pose_label >= static_cast<int>(group_of_pose.size()))
            throw std::invalid_argument("pose label " + std::to_string(pose_label) + " out of range");
        return group_of_pose[static_cast<std::size_t>(pose_label)];
    }
};

// ---------------------------------------------------------------------------
// Trunk configuration
// ---------------------------------------------------------------------------

struct TrunkConfig {
    struct Block {
        int channels = 0;
        int convs = 2;
        Pool pool = Pool::Max;
        int pool_size = 2;
        int pool_stride = 2;
    };

    int image_size = 32;
    int in_channels = 1;
    int kernel = 3;
    double dropout_ratio = 0.4;
    std::vector<Block> blocks = {{16, 2, Pool::Max, 2, 2},
                                 {32, 2, Pool::Max, 2, 2},
                                 {64, 2, Pool::Max, 2, 2},
                                 {64, 2, Pool::Avg, 4, 4}};

    int final_spatial() const {
        int s = image_size;
        for (const auto& b : blocks) {
            if (b.pool_size > s)
                throw std::invalid_argument("trunk: pool window " + std::to_string(b.pool_size) +
                                            " larger than map " + std::to_string(s));
            s = (s - b.pool_size) / b.pool_stride + 1;
        }
        return s;
    }

    // Desk-scale trunk adapted to the input size: 2x2 max-pool blocks with
    // doubling channels (capped at 64) down to a 4x4 map, then a 64-channel
    // block with a global average pool. At 32x32 this is exactly the default.
    static TrunkConfig for_image(int image_size) {
        TrunkConfig t;
        t.image_size = image_size;
        t.blocks.clear();
        int map = image_size, ch = 16;
        while (map > 4) {
            t.blocks.push_back({std::min(ch, 64), 2, Pool::Max, 2, 2});
            map = (map - 2) / 2 + 1;
            ch *= 2;
        }
        t.blocks.push_back({64, 2, Pool::Avg, map, map});
        return t;
    }

    // Dimensionality of the shared feature x (flattened final pooled map).
    int feature_dim() const {
        const int s = final_spatial();
        return blocks.back().channels * s * s;
    }
};

struct HeadDims {
    int identity = 0;
    int pose = 0;
    int illum = 0;
    int expr = 0;
};

// ---------------------------------------------------------------------------
// Batch
// ---------------------------------------------------------------------------

struct Batch {
    Tensor images;  // (N, C, S, S), standardized
    std::vector<int> y_d, y_p, y_l, y_e;
    int size() const { return images.dim(0); }
};

// Stack samples and standardize pixels from [0,1] to [-1,1].
inline Tensor images_to_input(const std::vector<const SyntheticSample*>& samples, int image_size) {
    const int n = static_cast<int>(samples.size());
    const std::size_t dim = static_cast<std::size_t>(image_size) * image_size;
    std::vector<double> data(static_cast<std::size_t>(n) * dim);
    for (int i = 0; i < n; ++i) {
        if (samples[static_cast<std::size_t>(i)]->image.size() != dim)
            throw std::invalid_argument("images_to_input: sample does not match image size " +
                                        std::to_string(image_size));
        for (std::size_t j = 0; j < dim; ++j)
            data[static_cast<std::size_t>(i) * dim + j] =
                (samples[static_cast<std::size_t>(i)]->image[j] - 0.5) / 0.5;
    }
    return Tensor::of({n, 1, image_size, image_size}, std::move(data));
}

// ---------------------------------------------------------------------------
// Batch split (Fig. 3): route each row of X to its pose group's copy,
// zero-filling the other groups so downstream layers always see full-size
// inputs. Masked rows receive no gradient.
// ---------------------------------------------------------------------------

inline std::array<Tensor, 3> batch_split(const Tensor& x, const std::vector<int>& pose_labels,
                                         const PoseGroups& groups) {
    if (x.ndim() != 2) detail::op_error("batch_split", "expected (N x D) features, got " + shape_str(x.shape()));
    const int n = x.dim(0), d = x.dim(1);
    if (static_cast<int>(pose_labels.size()) != n)
        detail::op_error("batch_split", "pose label count does not match batch size");
    std::array<Tensor, 3> out;
    for (int g = 0; g < PoseGroups::kGroups; ++g) {
        std::vector<double> mask(static_cast<std::size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i)
            if (groups.group(pose_labels[static_cast<std::size_t>(i)]) == g)
                std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(i) * d, d, 1.0);
        out[static_cast<std::size_t>(g)] = mul(x, Tensor::of(x.shape(), std::move(mask)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

struct FeatureTemplate {
    std::vector<double> y_d;                   // generic identity features
    std::array<std::vector<double>, 3> y_g;    // pose-specific identity features (p mode)
    std::vector<double> p;                     // group probabilities (p mode), sums to 1
    bool has_pose_branch = false;
};

// ---------------------------------------------------------------------------
// Loss bookkeeping
// ---------------------------------------------------------------------------

struct LossBreakdown {
    Mode mode = Mode::Single;
    Weighting weighting = Weighting::Dynamic;
    double total = 0;
    double identity = 0;
    double pose = 0, illum = 0, expr = 0;
    double group = 0;
    std::array<double, 3> mu_s = {0, 0, 0};  // (mu_p, mu_l, mu_e)
    std::array<double, 2> mu_m = {0, 0};     // (mu_d, mu_g)
    std::array<double, 3> alpha = {0, 0, 0};
    double phi_s = 0, phi_m = 1;
    bool has_side = false, has_group = false, has_mu_s = false, has_mu_m = false;
};

// Recombine the reported breakdown into the total; the loss-decomposition
// invariant asserts this equals the reported total.
inline double recombine_total(const LossBreakdown& b) {
    switch (b.mode) {
        case Mode::Single: return b.identity;
        case Mode::Multi:
            if (b.weighting == Weighting::Fixed)
                return b.identity + b.alpha[0] * b.pose + b.alpha[1] * b.illum + b.alpha[2] * b.expr;
            return b.identity + b.phi_s * (b.mu_s[0] * b.pose + b.mu_s[1] * b.illum + b.mu_s[2] * b.expr);
        default:
            return b.phi_m * (b.mu_m[0] * b.identity + b.mu_m[1] * b.group) +
                   b.phi_s * (b.mu_s[0] * b.pose + b.mu_s[1] * b.illum + b.mu_s[2] * b.expr);
    }
}

struct LossResult {
    Tensor total;
    LossBreakdown breakdown;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay_exempt = false;  // biases, BN scale/shift, dynamic-head eps
    bool trainable = true;      // false for BN running statistics
};

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

struct NetSpec {
    Mode mode = Mode::Single;
    Weighting weighting = Weighting::Dynamic;
    TrunkConfig trunk;
    HeadDims dims;
    std::vector<double> yaw_bins;
    double phi_s = 0.1;
    double phi_m = 1.0;
    std::array<double, 3> fixed_alpha = {0, 0, 0};
    std::uint64_t seed = 0;
};

class MultiTaskNet {
public:
    Mode mode = Mode::Single;
    Weighting weighting = Weighting::Dynamic;
    double phi_s = 0.1;
    double phi_m = 1.0;  // kept at 1 (Sec. 3.3)
    std::array<double, 3> fixed_alpha = {0, 0, 0};
    TrunkConfig trunk;
    HeadDims dims;
    std::vector<double> yaw_bins;
    PoseGroups groups;
    std::uint64_t seed = 0;
    int epoch = 0;
    bool detach_mu = false;  // ablation: stop the mu heads' gradient into the trunk

    struct ConvUnit {
        ConvLayer conv;
        BatchNormLayer bn;
        bool relu_after = true;
    };
    std::vector<std::vector<ConvUnit>> conv_blocks;
    DropoutLayer dropout;
    FcLayer identity_head;             // keeps its bias (Eq. 2)
    Tensor W_p, W_l, W_e;              // side heads, bias-free
    std::array<Tensor, 3> W_group;     // pose-group heads, bias-free
    Tensor omega_s, eps_s;             // dynamic side-task weight head
    Tensor omega_m, eps_m;             // dynamic main-task weight head

    bool has_side_heads() const { return mode != Mode::Single; }
    bool has_pose_branch() const { return mode == Mode::PoseDirected; }
    int feature_dim() const { return trunk.feature_dim(); }

    static MultiTaskNet build(const NetSpec& spec) {
        if (spec.dims.identity < 2) throw std::invalid_argument("net: need at least 2 identity classes");
        if (spec.mode != Mode::Single &&
            (spec.dims.pose < 2 || spec.dims.illum < 1 || spec.dims.expr < 1))
            throw std::invalid_argument("net: side-task class counts required in mode m/p");
        if (spec.mode == Mode::PoseDirected && spec.weighting == Weighting::Fixed)
            throw std::invalid_argument("net: fixed weighting is only defined for mode m");
        MultiTaskNet net;
        net.mode = spec.mode;
        net.weighting = spec.weighting;
        net.phi_s = spec.phi_s;
        net.phi_m = spec.phi_m;
        net.fixed_alpha = spec.fixed_alpha;
        net.trunk = spec.trunk;
        net.dims = spec.dims;
        net.yaw_bins = spec.yaw_bins;
        net.groups = PoseGroups::from_yaw_bins(spec.yaw_bins);
        net.seed = spec.seed;

        auto gaussian_param = [&](const std::string& name, Shape shape, std::size_t fan_in) {
            auto rng = std::mt19937_64(name_seed(spec.seed, name));
            return Tensor::parameter(shape, he_normal(static_cast<std::size_t>(shape_numel(shape)),
                                                      fan_in, rng));
        };
        auto zero_param = [](Shape shape) {
            return Tensor::parameter(shape, std::vector<double>(
                                                static_cast<std::size_t>(shape_numel(shape)), 0.0));
        };

        int in_ch = spec.trunk.in_channels;
        const int k = spec.trunk.kernel;
        for (std::size_t bi = 0; bi < spec.trunk.blocks.size(); ++bi) {
            const auto& block = spec.trunk.blocks[bi];
            std::vector<ConvUnit> units;
            for (int ci = 0; ci < block.convs; ++ci) {
                ConvUnit u;
                const std::string base =
                    "trunk.b" + std::to_string(bi) + ".c" + std::to_string(ci);
                u.conv.filters = gaussian_param(base + ".filters", {block.channels, in_ch, k, k},
                                                static_cast<std::size_t>(in_ch) * k * k);
                u.conv.bias = zero_param({block.channels});
                u.conv.stride = 1;
                u.conv.pad = (k - 1) / 2;
                u.bn = make_batchnorm(block.channels);
                // no ReLU after the final trunk convolution
                u.relu_after = !(bi + 1 == spec.trunk.blocks.size() && ci + 1 == block.convs);
                units.push_back(std::move(u));
                in_ch = block.channels;
            }
            net.conv_blocks.push_back(std::move(units));
        }
        net.dropout = DropoutLayer(spec.trunk.dropout_ratio, name_seed(spec.seed, "dropout"));

        const int d = spec.trunk.feature_dim();
        net.identity_head.weight = gaussian_param("head.identity.W", {d, spec.dims.identity},
                                                  static_cast<std::size_t>(d));
        net.identity_head.bias = zero_param({spec.dims.identity});
        if (net.has_side_heads()) {
            net.W_p = gaussian_param("head.pose.W", {d, spec.dims.pose}, static_cast<std::size_t>(d));
            net.W_l = gaussian_param("head.illum.W", {d, spec.dims.illum}, static_cast<std::size_t>(d));
            net.W_e = gaussian_param("head.expr.W", {d, spec.dims.expr}, static_cast<std::size_t>(d));
            net.omega_s = zero_param({d, 3});
            net.eps_s = zero_param({3});
        }
        if (net.has_pose_branch()) {
            const char* names[3] = {"head.group_left.W", "head.group_frontal.W", "head.group_right.W"};
            for (int g = 0; g < 3; ++g)
                net.W_group[static_cast<std::size_t>(g)] =
                    gaussian_param(names[g], {d, spec.dims.identity}, static_cast<std::size_t>(d));
            net.omega_m = zero_param({d, 2});
            net.eps_m = zero_param({2});
        }
        return net;
    }

    std::vector<NamedParam> named_parameters() {
        std::vector<NamedParam> out;
        for (std::size_t bi = 0; bi < conv_blocks.size(); ++bi)
            for (std::size_t ci = 0; ci < conv_blocks[bi].size(); ++ci) {
                auto& u = conv_blocks[bi][ci];
                const std::string base = "trunk.b" + std::to_string(bi) + ".c" + std::to_string(ci);
                out.push_back({base + ".filters", u.conv.filters, false, true});
                out.push_back({base + ".bias", u.conv.bias, true, true});
                out.push_back({base + ".bn_gamma", u.bn.gamma, true, true});
                out.push_back({base + ".bn_beta", u.bn.beta, true, true});
                out.push_back({base + ".bn_running_mean", u.bn.running_mean, true, false});
                out.push_back({base + ".bn_running_var", u.bn.running_var, true, false});
            }
        out.push_back({"head.identity.W", identity_head.weight, false, true});
        out.push_back({"head.identity.b", identity_head.bias, true, true});
        if (has_side_heads()) {
            out.push_back({"head.pose.W", W_p, false, true});
            out.push_back({"head.illum.W", W_l, false, true});
            out.push_back({"head.expr.W", W_e, false, true});
            out.push_back({"dyn.side.W", omega_s, false, true});
            out.push_back({"dyn.side.b", eps_s, true, true});
        }
        if (has_pose_branch()) {
            out.push_back({"head.group_left.W", W_group[0], false, true});
            out.push_back({"head.group_frontal.W", W_group[1], false, true});
            out.push_back({"head.group_right.W", W_group[2], false, true});
            out.push_back({"dyn.main.W", omega_m, false, true});
            out.push_back({"dyn.main.b", eps_m, true, true});
        }
        return out;
    }

    std::vector<Tensor> trainable_tensors() {
        std::vector<Tensor> out;
        for (auto& p : named_parameters())
            if (p.trainable) out.push_back(p.tensor);
        return out;
    }

    // Shared feature extraction x = f(I; k, b, gamma, beta), Eq. 1.
    Tensor trunk_forward(const Tensor& images, bool training) {
        if (images.ndim() != 4 || images.dim(1) != trunk.in_channels ||
            images.dim(2) != trunk.image_size || images.dim(3) != trunk.image_size)
            detail::op_error("trunk_forward", "expected (N," + std::to_string(trunk.in_channels) + "," +
                                                  std::to_string(trunk.image_size) + "," +
                                                  std::to_string(trunk.image_size) + "), got " +
                                                  shape_str(images.shape()));
        Tensor h = images;
        for (std::size_t bi = 0; bi < conv_blocks.size(); ++bi) {
            for (auto& u : conv_blocks[bi]) {
                h = conv_forward(h, u.conv);
                h = batchnorm_forward(h, u.bn, training);
                if (u.relu_after) h = relu(h);
            }
            const auto& b = trunk.blocks[bi];
            h = pool_forward(h, b.pool, b.pool_size, b.pool_stride);
        }
        h = reshape(h, {h.dim(0), feature_dim()});
        return dropout_forward(h, dropout, training);
    }

    // mu_s = batch mean of softmax(omega_s^T x + eps_s), Eq. 7.
    Tensor dynamic_side_weights(const Tensor& x) {
        if (!has_side_heads())
            throw std::invalid_argument("dynamic_side_weights: requires mode m or p");
        const Tensor in = detach_mu ? Tensor::of(x.shape(), std::vector<double>(x.data())) : x;
        return mean_rows(softmax_rows(add_rowvec(matmul(in, omega_s), eps_s)));
    }

    // mu_m = batch mean of softmax(omega_m^T x + eps_m), Eq. 10.
    Tensor dynamic_main_weights(const Tensor& x) {
        if (!has_pose_branch())
            throw std::invalid_argument("dynamic_main_weights: requires mode p");
        const Tensor in = detach_mu ? Tensor::of(x.shape(), std::vector<double>(x.data())) : x;
        return mean_rows(softmax_rows(add_rowvec(matmul(in, omega_m), eps_m)));
    }

    // Combined loss of the active mode (Eqs. 6, 8, 11) with the per-task
    // breakdown and dynamic-weight snapshot.
    LossResult compute_loss(const Batch& batch, bool training) {
        const int n = batch.size();
        if (static_cast<int>(batch.y_d.size()) != n)
            throw std::invalid_argument("mtl_loss: identity labels missing");
        Tensor x = trunk_forward(batch.images, training);
        Tensor loss_d = cross_entropy_rows(fc_forward(x, identity_head), batch.y_d, {}, n);

        LossResult res;
        res.breakdown.mode = mode;
        res.breakdown.weighting = weighting;
        res.breakdown.identity = loss_d.item();
        res.breakdown.phi_s = phi_s;
        res.breakdown.phi_m = phi_m;
        res.breakdown.alpha = fixed_alpha;

        if (mode == Mode::Single) {
            res.total = loss_d;
            res.breakdown.total = res.total.item();
            return res;
        }

        if (static_cast<int>(batch.y_p.size()) != n || static_cast<int>(batch.y_l.size()) != n ||
            static_cast<int>(batch.y_e.size()) != n)
            throw std::invalid_argument("mtl_loss: side-task labels missing in mode " + mode_name(mode));

        Tensor loss_p = cross_entropy_rows(matmul(x, W_p), batch.y_p, {}, n);
        Tensor loss_l = cross_entropy_rows(matmul(x, W_l), batch.y_l, {}, n);
        Tensor loss_e = cross_entropy_rows(matmul(x, W_e), batch.y_e, {}, n);
        res.breakdown.has_side = true;
        res.breakdown.pose = loss_p.item();
        res.breakdown.illum = loss_l.item();
        res.breakdown.expr = loss_e.item();

        Tensor side_sum;
        if (weighting == Weighting::Fixed) {
            side_sum = add(add(scale(loss_p, fixed_alpha[0]), scale(loss_l, fixed_alpha[1])),
                           scale(loss_e, fixed_alpha[2]));
        } else {
            Tensor mu_s = dynamic_side_weights(x);
            res.breakdown.has_mu_s = true;
            for (int i = 0; i < 3; ++i)
                res.breakdown.mu_s[static_cast<std::size_t>(i)] = mu_s.data()[static_cast<std::size_t>(i)];
            side_sum = add(add(mul(slice(mu_s, 0, 0, 1), loss_p), mul(slice(mu_s, 0, 1, 1), loss_l)),
                           mul(slice(mu_s, 0, 2, 1), loss_e));
        }

        if (mode == Mode::Multi) {
            res.total = weighting == Weighting::Fixed ? add(loss_d, side_sum)
                                                      : add(loss_d, scale(side_sum, phi_s));
            res.breakdown.total = res.total.item();
            return res;
        }

        // p mode: batch split into pose groups; each group head sees only the
        // genuine members; normalization by the full batch size keeps L_d and
        // L_g on the same scale.
        auto split = batch_split(x, batch.y_p, groups);
        Tensor loss_g;
        for (int g = 0; g < PoseGroups::kGroups; ++g) {
            std::vector<double> member(static_cast<std::size_t>(n), 0.0);
            for (int i = 0; i < n; ++i)
                if (groups.group(batch.y_p[static_cast<std::size_t>(i)]) == g)
                    member[static_cast<std::size_t>(i)] = 1.0;
            Tensor lg = cross_entropy_rows(matmul(split[static_cast<std::size_t>(g)],
                                                  W_group[static_cast<std::size_t>(g)]),
                                           batch.y_d, member, n);
            loss_g = g == 0 ? lg : add(loss_g, lg);
        }
        res.breakdown.has_group = true;
        res.breakdown.group = loss_g.item();

        Tensor mu_m = dynamic_main_weights(x);
        res.breakdown.has_mu_m = true;
        res.breakdown.mu_m[0] = mu_m.data()[0];
        res.breakdown.mu_m[1] = mu_m.data()[1];
        Tensor main_sum = add(mul(slice(mu_m, 0, 0, 1), loss_d), mul(slice(mu_m, 0, 1, 1), loss_g));
        res.total = add(scale(main_sum, phi_m), scale(side_sum, phi_s));
        res.breakdown.total = res.total.item();
        return res;
    }

    // Features used for matching: pre-softmax head outputs on the shared x.
    FeatureTemplate extract_template(const SyntheticSample& sample) {
        std::vector<const SyntheticSample*> one = {&sample};
        return extract_templates(one)[0];
    }

    std::vector<FeatureTemplate> extract_templates(const std::vector<const SyntheticSample*>& samples,
                                                   int batch_size = 64) {
        NoGradGuard ng;
        std::vector<FeatureTemplate> out(samples.size());
        for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
            const std::size_t stop = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
            std::vector<const SyntheticSample*> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                      samples.begin() + static_cast<std::ptrdiff_t>(stop));
            Tensor x = trunk_forward(images_to_input(chunk, trunk.image_size), false);
            Tensor yd = fc_forward(x, identity_head);
            Tensor pose_probs, yg[3];
            if (has_pose_branch()) {
                pose_probs = softmax_rows(matmul(x, W_p));
                for (int g = 0; g < 3; ++g) yg[g] = matmul(x, W_group[static_cast<std::size_t>(g)]);
            }
            const int nd = dims.identity;
            for (std::size_t i = start; i < stop; ++i) {
                const std::size_t r = i - start;
                FeatureTemplate& t = out[i];
                t.y_d.assign(yd.data().begin() + static_cast<std::ptrdiff_t>(r * nd),
                             yd.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * nd));
                if (has_pose_branch()) {
                    t.has_pose_branch = true;
                    for (int g = 0; g < 3; ++g)
                        t.y_g[static_cast<std::size_t>(g)].assign(
                            yg[g].data().begin() + static_cast<std::ptrdiff_t>(r * nd),
                            yg[g].data().begin() + static_cast<std::ptrdiff_t>((r + 1) * nd));
                    t.p.assign(3, 0.0);
                    for (int c = 0; c < dims.pose; ++c)
                        t.p[static_cast<std::size_t>(groups.group(c))] +=
                            pose_probs.data()[r * static_cast<std::size_t>(dims.pose) +
                                              static_cast<std::size_t>(c)];
                }
            }
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Checkpoints: model.json manifest + weights.bin (little-endian float64 in
// manifest order)
// ---------------------------------------------------------------------------

inline nlohmann::json trunk_to_json(const TrunkConfig& t) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : t.blocks)
        blocks.push_back({{"channels", b.channels},
                          {"convs", b.convs},
                          {"pool", b.pool == Pool::Max ? "max" : "avg"},
                          {"pool_size", b.pool_size},
                          {"pool_stride", b.pool_stride}});
    return {{"image_size", t.image_size}, {"in_channels", t.in_channels},     {"kernel", t.kernel},
            {"dropout", t.dropout_ratio}, {"blocks", std::move(blocks)}};
}

inline TrunkConfig trunk_from_json(const nlohmann::json& j) {
    TrunkConfig t;
    t.image_size = j.at("image_size").get<int>();
    t.in_channels = j.at("in_channels").get<int>();
    t.kernel = j.at("kernel").get<int>();
    t.dropout_ratio = j.at("dropout").get<double>();
    t.blocks.clear();
    for (const auto& b : j.at("blocks")) {
        TrunkConfig::Block blk;
        blk.channels = b.at("channels").get<int>();
        blk.convs = b.at("convs").get<int>();
        blk.pool = b.at("pool").get<std::string>() == "max" ? Pool::Max : Pool::Avg;
        blk.pool_size = b.at("pool_size").get<int>();
        blk.pool_stride = b.at("pool_stride").get<int>();
        t.blocks.push_back(blk);
    }
    return t;
}

inline void save_checkpoint(MultiTaskNet& net, const io::fs::path& dir) {
    io::ensure_dir(dir);
    nlohmann::json manifest;
    manifest["format"] = "mtlcnn-checkpoint-v1";
    manifest["mode"] = mode_name(net.mode);
    manifest["weighting"] = weighting_name(net.weighting);
    manifest["phi_s"] = net.phi_s;
    manifest["phi_m"] = net.phi_m;
    manifest["fixed_alpha"] = net.fixed_alpha;
    manifest["seed"] = net.seed;
    manifest["epoch"] = net.epoch;
    manifest["trunk"] = trunk_to_json(net.trunk);
    manifest["heads"] = {{"identity", net.dims.identity},
                         {"pose", net.dims.pose},
                         {"illum", net.dims.illum},
                         {"expr", net.dims.expr}};
    manifest["yaw_bins"] = net.yaw_bins;

    std::vector<double> flat;
    nlohmann::json params = nlohmann::json::array();
    for (auto& p : net.named_parameters()) {
        params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"trainable", p.trainable}});
        flat.insert(flat.end(), p.tensor.data().begin(), p.tensor.data().end());
    }
    manifest["params"] = std::move(params);
    io::write_text(dir / "model.json", manifest.dump(2) + "\n");
    io::write_doubles(dir / "weights.bin", flat);
}

inline MultiTaskNet load_checkpoint(const io::fs::path& dir) {
    const auto manifest = nlohmann::json::parse(io::read_text(dir / "model.json"));
    NetSpec spec;
    spec.mode = mode_from_name(manifest.at("mode").get<std::string>());
    spec.weighting = weighting_from_name(manifest.at("weighting").get<std::string>());
    spec.phi_s = manifest.at("phi_s").get<double>();
    spec.phi_m = manifest.at("phi_m").get<double>();
    spec.fixed_alpha = manifest.at("fixed_alpha").get<std::array<double, 3>>();
    spec.seed = manifest.at("seed").get<std::uint64_t>();
    spec.trunk = trunk_from_json(manifest.at("trunk"));
    spec.dims.identity = manifest.at("heads").at("identity").get<int>();
    spec.dims.pose = manifest.at("heads").at("pose").get<int>();
    spec.dims.illum = manifest.at("heads").at("illum").get<int>();
    spec.dims.expr = manifest.at("heads").at("expr").get<int>();
    spec.yaw_bins = manifest.at("yaw_bins").get<std::vector<double>>();

    MultiTaskNet net = MultiTaskNet::build(spec);
    net.epoch = manifest.at("epoch").get<int>();

    const auto flat = io::read_doubles(dir / "weights.bin");
    auto params = net.named_parameters();
    const auto& entries = manifest.at("params");
    if (entries.size() != params.size())
        throw std::runtime_error("checkpoint parameter list does not match architecture");
    std::size_t off = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = entries[i];
        if (e.at("name").get<std::string>() != params[i].name ||
            e.at("shape").get<Shape>() != params[i].tensor.shape())
            throw std::runtime_error("checkpoint entry mismatch at " + params[i].name);
        const std::size_t n = static_cast<std::size_t>(params[i].tensor.size());
        if (off + n > flat.size()) throw std::runtime_error("weights.bin truncated");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), n,
                    params[i].tensor.mutable_data().begin());
        off += n;
    }
    if (off != flat.size()) throw std::runtime_error("weights.bin has trailing data");
    return net;
}

}  // namespace mtlcnn
