// Neural building blocks on top of the autograd tensor: convolution (as
// cross-correlation via im2col + GEMM), max/avg pooling, batch
// normalization, dropout, fully connected, softmax and fused cross-entropy.

#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string_view>

#include "mtlcnn/tensor.hpp"

namespace mtlcnn {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvLayer {
    Tensor filters;  // (out_channels, in_channels, kh, kw)
    Tensor bias;     // (out_channels)
    int stride = 1;
    int pad = 0;
};

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

inline Tensor conv2d(const Tensor& x, const Tensor& filters, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 4 || filters.ndim() != 4)
        detail::op_error("conv2d", "expected NCHW input and OIHW filters, got " + shape_str(x.shape()) +
                                       " and " + shape_str(filters.shape()));
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int co = filters.dim(0), kh = filters.dim(2), kw = filters.dim(3);
    if (filters.dim(1) != ci)
        detail::op_error("conv2d", "input has " + std::to_string(ci) + " channels but filters expect " +
                                       std::to_string(filters.dim(1)));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != co))
        detail::op_error("conv2d", "bias shape " + shape_str(bias.shape()) + " does not match " +
                                       std::to_string(co) + " output channels");
    const int ho = conv_out_extent(h, kh, stride, pad);
    const int wo = conv_out_extent(w, kw, stride, pad);
    if (ho <= 0 || wo <= 0)
        detail::op_error("conv2d", "kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                       " does not fit input " + shape_str(x.shape()));

    const std::int64_t rows = static_cast<std::int64_t>(n) * ho * wo;
    const std::int64_t cols = static_cast<std::int64_t>(ci) * kh * kw;
    auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows * cols), 0.0);
    const auto& xv = x.data();
    for (int b = 0; b < n; ++b)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double* dst = col->data() + ((static_cast<std::int64_t>(b) * ho + oy) * wo + ox) * cols;
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) {
                            dst += kw;
                            continue;
                        }
                        const double* src = xv.data() + ((static_cast<std::size_t>(b) * ci + ic) * h + iy) * w;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            *dst++ = (ix < 0 || ix >= w) ? 0.0 : src[ix];
                        }
                    }
            }

    // Filters rearranged to (ci*kh*kw) x co for the GEMM.
    std::vector<double> wmat(static_cast<std::size_t>(cols) * co);
    const auto& fv = filters.data();
    for (int oc = 0; oc < co; ++oc)
        for (std::int64_t q = 0; q < cols; ++q)
            wmat[static_cast<std::size_t>(q) * co + oc] = fv[static_cast<std::size_t>(oc) * cols + q];

    std::vector<double> out_mat(static_cast<std::size_t>(rows) * co);
    {
        detail::CMapMat A(col->data(), rows, cols), B(wmat.data(), cols, co);
        detail::MapMat C(out_mat.data(), rows, co);
        C.noalias() = A * B;
    }
    if (bias.defined()) {
        const auto& bv = bias.data();
        for (std::int64_t r = 0; r < rows; ++r)
            for (int oc = 0; oc < co; ++oc) out_mat[static_cast<std::size_t>(r) * co + oc] += bv[static_cast<std::size_t>(oc)];
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * co);
    for (int b = 0; b < n; ++b)
        for (int oc = 0; oc < co; ++oc)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox)
                    out[((static_cast<std::size_t>(b) * co + oc) * ho + oy) * wo + ox] =
                        out_mat[((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * co + oc];

    std::vector<Tensor> parents = bias.defined() ? std::vector<Tensor>{x, filters, bias}
                                                 : std::vector<Tensor>{x, filters};
    auto bw = [=](detail::Node& nd) {
        auto& px = nd.parents[0];
        auto& pf = nd.parents[1];
        std::vector<double> dout_mat(static_cast<std::size_t>(rows) * co);
        for (int b = 0; b < n; ++b)
            for (int oc = 0; oc < co; ++oc)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox)
                        dout_mat[((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * co + oc] =
                            nd.grad[((static_cast<std::size_t>(b) * co + oc) * ho + oy) * wo + ox];
        if (nd.parents.size() > 2 && nd.parents[2]->needs_grad) {
            auto& pb = nd.parents[2];
            pb->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (int oc = 0; oc < co; ++oc)
                    pb->grad[static_cast<std::size_t>(oc)] += dout_mat[static_cast<std::size_t>(r) * co + oc];
        }
        if (pf->needs_grad) {
            pf->ensure_grad();
            std::vector<double> dwmat(static_cast<std::size_t>(cols) * co);
            detail::CMapMat A(col->data(), rows, cols), G(dout_mat.data(), rows, co);
            detail::MapMat dW(dwmat.data(), cols, co);
            dW.noalias() = A.transpose() * G;
            for (int oc = 0; oc < co; ++oc)
                for (std::int64_t q = 0; q < cols; ++q)
                    pf->grad[static_cast<std::size_t>(oc) * cols + q] +=
                        dwmat[static_cast<std::size_t>(q) * co + oc];
        }
        if (px->needs_grad) {
            px->ensure_grad();
            std::vector<double> dcol(static_cast<std::size_t>(rows) * cols);
            detail::CMapMat G(dout_mat.data(), rows, co), B(wmat.data(), cols, co);
            detail::MapMat dC(dcol.data(), rows, cols);
            dC.noalias() = G * B.transpose();
            for (int b = 0; b < n; ++b)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        const double* src =
                            dcol.data() + ((static_cast<std::int64_t>(b) * ho + oy) * wo + ox) * cols;
                        for (int ic = 0; ic < ci; ++ic)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) {
                                    src += kw;
                                    continue;
                                }
                                double* dst =
                                    px->grad.data() + ((static_cast<std::size_t>(b) * ci + ic) * h + iy) * w;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix >= 0 && ix < w) dst[ix] += *src;
                                    ++src;
                                }
                            }
                    }
        }
    };
    return detail::make_op("conv2d", {n, co, ho, wo}, std::move(out), std::move(parents), std::move(bw));
}

inline Tensor conv_forward(const Tensor& x, const ConvLayer& layer) {
    return conv2d(x, layer.filters, layer.bias, layer.stride, layer.pad);
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class Pool { Max, Avg };

inline Tensor pool_forward(const Tensor& x, Pool method, int size, int stride) {
    if (x.ndim() != 4) detail::op_error("pool", "expected NCHW input, got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (size > h || size > w)
        detail::op_error("pool", "window " + std::to_string(size) + " larger than input " + shape_str(x.shape()));
    const int ho = (h - size) / stride + 1;
    const int wo = (w - size) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(n) * c * ho * wo);
    const auto& xv = x.data();
    if (method == Pool::Max) {
        auto args = std::make_shared<std::vector<std::size_t>>(out.size());
        std::size_t o = 0;
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox, ++o) {
                        std::size_t best = 0;
                        double bv = -std::numeric_limits<double>::infinity();
                        for (int ky = 0; ky < size; ++ky)
                            for (int kx = 0; kx < size; ++kx) {
                                const std::size_t idx =
                                    ((static_cast<std::size_t>(b) * c + ch) * h + oy * stride + ky) * w +
                                    ox * stride + kx;
                                if (xv[idx] > bv) {
                                    bv = xv[idx];
                                    best = idx;
                                }
                            }
                        out[o] = bv;
                        (*args)[o] = best;
                    }
        return detail::make_op("max_pool", {n, c, ho, wo}, std::move(out), {x}, [args](detail::Node& nd) {
            auto& p = nd.parents[0];
            if (!p->needs_grad) return;
            p->ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) p->grad[(*args)[i]] += nd.grad[i];
        });
    }
    const double inv = 1.0 / (size * size);
    std::size_t o = 0;
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox, ++o) {
                    double acc = 0.0;
                    for (int ky = 0; ky < size; ++ky)
                        for (int kx = 0; kx < size; ++kx)
                            acc += xv[((static_cast<std::size_t>(b) * c + ch) * h + oy * stride + ky) * w +
                                      ox * stride + kx];
                    out[o] = acc * inv;
                }
    return detail::make_op("avg_pool", {n, c, ho, wo}, std::move(out), {x},
                           [n, c, h, w, ho, wo, size, stride, inv](detail::Node& nd) {
                               auto& p = nd.parents[0];
                               if (!p->needs_grad) return;
                               p->ensure_grad();
                               std::size_t oi = 0;
                               for (int b = 0; b < n; ++b)
                                   for (int ch = 0; ch < c; ++ch)
                                       for (int oy = 0; oy < ho; ++oy)
                                           for (int ox = 0; ox < wo; ++ox, ++oi) {
                                               const double g = nd.grad[oi] * inv;
                                               for (int ky = 0; ky < size; ++ky)
                                                   for (int kx = 0; kx < size; ++kx)
                                                       p->grad[((static_cast<std::size_t>(b) * c + ch) * h +
                                                                oy * stride + ky) * w + ox * stride + kx] += g;
                                           }
                           });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNormLayer {
    Tensor gamma;         // (C)
    Tensor beta;          // (C)
    Tensor running_mean;  // (C), state, not trained
    Tensor running_var;   // (C), state, not trained
    double eps = 1e-5;
    double momentum = 0.9;
};

inline BatchNormLayer make_batchnorm(int channels, double eps = 1e-5, double momentum = 0.9) {
    BatchNormLayer l;
    l.gamma = Tensor::parameter({channels}, std::vector<double>(static_cast<std::size_t>(channels), 1.0));
    l.beta = Tensor::parameter({channels}, std::vector<double>(static_cast<std::size_t>(channels), 0.0));
    l.running_mean = Tensor::zeros({channels});
    l.running_var = Tensor::full({channels}, 1.0);
    l.eps = eps;
    l.momentum = momentum;
    return l;
}

// Per-channel normalization over (N) or (N, H, W). Training mode uses batch
// statistics and updates the running estimates; evaluation mode uses the
// running estimates and works for any batch size.
inline Tensor batchnorm_forward(const Tensor& x, BatchNormLayer& layer, bool training) {
    if (x.ndim() != 2 && x.ndim() != 4)
        detail::op_error("batchnorm", "expected (N,C) or (N,C,H,W), got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1);
    const std::int64_t spatial = x.ndim() == 4 ? static_cast<std::int64_t>(x.dim(2)) * x.dim(3) : 1;
    if (layer.gamma.dim(0) != c)
        detail::op_error("batchnorm", "layer has " + std::to_string(layer.gamma.dim(0)) +
                                          " channels, input " + shape_str(x.shape()));
    const std::int64_t m = n * spatial;
    const auto& xv = x.data();
    const auto& gv = layer.gamma.data();
    const auto& bv = layer.beta.data();
    const double eps = layer.eps;

    auto channel_index = [c, spatial](std::int64_t b, int ch, std::int64_t s) {
        return (static_cast<std::size_t>(b) * c + ch) * spatial + s;
    };

    if (!training) {
        const auto& rm = layer.running_mean.data();
        const auto& rv = layer.running_var.data();
        std::vector<double> out(xv.size());
        std::vector<double> inv_std(static_cast<std::size_t>(c));
        for (int ch = 0; ch < c; ++ch) inv_std[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(rv[static_cast<std::size_t>(ch)] + eps);
        for (std::int64_t b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch) {
                const double iv = inv_std[static_cast<std::size_t>(ch)];
                const double mu = rm[static_cast<std::size_t>(ch)];
                const double g = gv[static_cast<std::size_t>(ch)], be = bv[static_cast<std::size_t>(ch)];
                for (std::int64_t s = 0; s < spatial; ++s) {
                    const std::size_t i = channel_index(b, ch, s);
                    out[i] = g * (xv[i] - mu) * iv + be;
                }
            }
        auto rm_copy = std::make_shared<std::vector<double>>(layer.running_mean.data());
        auto inv_copy = std::make_shared<std::vector<double>>(std::move(inv_std));
        return detail::make_op(
            "batchnorm_eval", x.shape(), std::move(out), {x, layer.gamma, layer.beta},
            [n, c, spatial, channel_index, rm_copy, inv_copy](detail::Node& nd) {
                auto& px = nd.parents[0];
                auto& pg = nd.parents[1];
                auto& pb = nd.parents[2];
                if (px->needs_grad) px->ensure_grad();
                if (pg->needs_grad) pg->ensure_grad();
                if (pb->needs_grad) pb->ensure_grad();
                for (std::int64_t b = 0; b < n; ++b)
                    for (int ch = 0; ch < c; ++ch) {
                        const double iv = (*inv_copy)[static_cast<std::size_t>(ch)];
                        const double mu = (*rm_copy)[static_cast<std::size_t>(ch)];
                        const double g = pg->value[static_cast<std::size_t>(ch)];
                        for (std::int64_t s = 0; s < spatial; ++s) {
                            const std::size_t i = channel_index(b, ch, s);
                            const double dy = nd.grad[i];
                            if (px->needs_grad) px->grad[i] += dy * g * iv;
                            if (pg->needs_grad)
                                pg->grad[static_cast<std::size_t>(ch)] += dy * (px->value[i] - mu) * iv;
                            if (pb->needs_grad) pb->grad[static_cast<std::size_t>(ch)] += dy;
                        }
                    }
            });
    }

    if (n < 2)
        detail::op_error("batchnorm", "training mode requires batch size >= 2, got " + std::to_string(n));

    std::vector<double> mean(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (std::int64_t s = 0; s < spatial; ++s) mean[static_cast<std::size_t>(ch)] += xv[channel_index(b, ch, s)];
    for (int ch = 0; ch < c; ++ch) mean[static_cast<std::size_t>(ch)] /= static_cast<double>(m);
    for (std::int64_t b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (std::int64_t s = 0; s < spatial; ++s) {
                const double d = xv[channel_index(b, ch, s)] - mean[static_cast<std::size_t>(ch)];
                var[static_cast<std::size_t>(ch)] += d * d;
            }
    for (int ch = 0; ch < c; ++ch) var[static_cast<std::size_t>(ch)] /= static_cast<double>(m);

    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch)
        (*inv_std)[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(ch)] + eps);

    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    std::vector<double> out(xv.size());
    for (std::int64_t b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const double mu = mean[static_cast<std::size_t>(ch)];
            const double iv = (*inv_std)[static_cast<std::size_t>(ch)];
            const double g = gv[static_cast<std::size_t>(ch)], be = bv[static_cast<std::size_t>(ch)];
            for (std::int64_t s = 0; s < spatial; ++s) {
                const std::size_t i = channel_index(b, ch, s);
                const double h = (xv[i] - mu) * iv;
                (*xhat)[i] = h;
                out[i] = g * h + be;
            }
        }

    auto& rm = layer.running_mean.mutable_data();
    auto& rv = layer.running_var.mutable_data();
    for (int ch = 0; ch < c; ++ch) {
        rm[static_cast<std::size_t>(ch)] =
            layer.momentum * rm[static_cast<std::size_t>(ch)] + (1.0 - layer.momentum) * mean[static_cast<std::size_t>(ch)];
        rv[static_cast<std::size_t>(ch)] =
            layer.momentum * rv[static_cast<std::size_t>(ch)] + (1.0 - layer.momentum) * var[static_cast<std::size_t>(ch)];
    }

    return detail::make_op(
        "batchnorm", x.shape(), std::move(out), {x, layer.gamma, layer.beta},
        [n, c, spatial, m, channel_index, xhat, inv_std](detail::Node& nd) {
            auto& px = nd.parents[0];
            auto& pg = nd.parents[1];
            auto& pb = nd.parents[2];
            if (px->needs_grad) px->ensure_grad();
            if (pg->needs_grad) pg->ensure_grad();
            if (pb->needs_grad) pb->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                const double g = pg->value[static_cast<std::size_t>(ch)];
                const double iv = (*inv_std)[static_cast<std::size_t>(ch)];
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0, sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::int64_t b = 0; b < n; ++b)
                    for (std::int64_t s = 0; s < spatial; ++s) {
                        const std::size_t i = channel_index(b, ch, s);
                        const double dy = nd.grad[i];
                        const double dxh = dy * g;
                        sum_dy += dy;
                        sum_dy_xhat += dy * (*xhat)[i];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * (*xhat)[i];
                    }
                if (pg->needs_grad) pg->grad[static_cast<std::size_t>(ch)] += sum_dy_xhat;
                if (pb->needs_grad) pb->grad[static_cast<std::size_t>(ch)] += sum_dy;
                if (px->needs_grad) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (std::int64_t b = 0; b < n; ++b)
                        for (std::int64_t s = 0; s < spatial; ++s) {
                            const std::size_t i = channel_index(b, ch, s);
                            const double dxh = nd.grad[i] * g;
                            px->grad[i] += iv * inv_m *
                                           (static_cast<double>(m) * dxh - sum_dxhat -
                                            (*xhat)[i] * sum_dxhat_xhat);
                        }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

struct DropoutLayer {
    double ratio = 0.0;
    std::mt19937_64 rng;

    DropoutLayer() = default;
    DropoutLayer(double r, std::uint64_t seed) : ratio(r), rng(seed) {
        if (r < 0.0 || r >= 1.0)
            detail::op_error("dropout", "ratio must be in [0,1), got " + std::to_string(r));
    }
};

// Inverted dropout with an externally supplied 0/1 keep mask; pure and
// differentiable, used directly by gradient tests.
inline Tensor dropout_with_mask(const Tensor& x, const std::vector<double>& keep_mask, double ratio) {
    if (keep_mask.size() != static_cast<std::size_t>(x.size()))
        detail::op_error("dropout", "mask length " + std::to_string(keep_mask.size()) +
                                        " does not match input " + shape_str(x.shape()));
    const double boost = 1.0 / (1.0 - ratio);
    auto scaled = std::make_shared<std::vector<double>>(keep_mask);
    for (double& v : *scaled) v *= boost;
    std::vector<double> out(x.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*scaled)[i];
    return detail::make_op("dropout", x.shape(), std::move(out), {x}, [scaled](detail::Node& nd) {
        auto& p = nd.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) p->grad[i] += nd.grad[i] * (*scaled)[i];
    });
}

inline Tensor dropout_forward(const Tensor& x, DropoutLayer& layer, bool training) {
    if (!training || layer.ratio == 0.0) return x;  // evaluation is the identity map
    std::bernoulli_distribution keep(1.0 - layer.ratio);
    std::vector<double> mask(static_cast<std::size_t>(x.size()));
    for (double& v : mask) v = keep(layer.rng) ? 1.0 : 0.0;
    return dropout_with_mask(x, mask, layer.ratio);
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

struct FcLayer {
    Tensor weight;  // (D_in, D_out)
    Tensor bias;    // (D_out), optional: leave undefined to omit
};

inline Tensor fc_forward(const Tensor& x, const FcLayer& layer) {
    Tensor y = matmul(x, layer.weight);
    return layer.bias.defined() ? add_rowvec(y, layer.bias) : y;
}

// ---------------------------------------------------------------------------
// Softmax / cross-entropy / argmax
// ---------------------------------------------------------------------------

namespace detail {
inline void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) op_error(op, "non-finite input entry");
}
}  // namespace detail

// Row-wise stable softmax of an (n x C) matrix.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.ndim() != 2) detail::op_error("softmax", "expected matrix, got " + shape_str(x.shape()));
    detail::check_finite("softmax", x.data());
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.data());
    for (int r = 0; r < rows; ++r) {
        double* row = out.data() + static_cast<std::size_t>(r) * cols;
        const double mx = *std::max_element(row, row + cols);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (int c = 0; c < cols; ++c) row[c] /= sum;
    }
    return detail::make_op("softmax", x.shape(), std::move(out), {x}, [rows, cols](detail::Node& nd) {
        auto& p = nd.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const double* pr = nd.value.data() + static_cast<std::size_t>(r) * cols;
            const double* gr = nd.grad.data() + static_cast<std::size_t>(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += gr[c] * pr[c];
            double* dst = p->grad.data() + static_cast<std::size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) dst[c] += pr[c] * (gr[c] - dot);
        }
    });
}

inline Tensor softmax(const Tensor& y) {
    if (y.ndim() != 1) detail::op_error("softmax", "expected vector, got " + shape_str(y.shape()));
    return reshape(softmax_rows(reshape(y, {1, y.dim(0)})), {y.dim(0)});
}

// Fused log-sum-exp cross-entropy over rows:
//   sum_i w_i * (logsumexp(x_i) - x_i[label_i]) / normalizer.
// Empty weights mean all-ones. Rows with weight 0 contribute nothing.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels,
                                 const std::vector<double>& weights = {}, double normalizer = 0.0) {
    if (logits.ndim() != 2)
        detail::op_error("cross_entropy", "expected (n x C) logits, got " + shape_str(logits.shape()));
    const int rows = logits.dim(0), cols = logits.dim(1);
    if (static_cast<int>(labels.size()) != rows)
        detail::op_error("cross_entropy", std::to_string(labels.size()) + " labels for " +
                                              std::to_string(rows) + " rows");
    if (!weights.empty() && static_cast<int>(weights.size()) != rows)
        detail::op_error("cross_entropy", "weight list length mismatch");
    for (int r = 0; r < rows; ++r)
        if (labels[static_cast<std::size_t>(r)] < 0 || labels[static_cast<std::size_t>(r)] >= cols)
            detail::op_error("cross_entropy", "label " + std::to_string(labels[static_cast<std::size_t>(r)]) +
                                                  " out of range for " + std::to_string(cols) + " classes");
    const double norm = normalizer > 0.0 ? normalizer : static_cast<double>(rows);
    const auto& xv = logits.data();
    auto probs = std::make_shared<std::vector<double>>(xv.size());
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(r)];
        const double* row = xv.data() + static_cast<std::size_t>(r) * cols;
        const double mx = *std::max_element(row, row + cols);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
        const double lse = mx + std::log(sum);
        for (int c = 0; c < cols; ++c)
            (*probs)[static_cast<std::size_t>(r) * cols + c] = std::exp(row[c] - mx) / sum;
        total += w * (lse - row[labels[static_cast<std::size_t>(r)]]);
    }
    total /= norm;
    auto wcopy = std::make_shared<std::vector<double>>(weights);
    auto lcopy = std::make_shared<std::vector<int>>(labels);
    return detail::make_op("cross_entropy", {1}, {total}, {logits},
                           [rows, cols, norm, probs, wcopy, lcopy](detail::Node& nd) {
                               auto& p = nd.parents[0];
                               if (!p->needs_grad) return;
                               p->ensure_grad();
                               const double g = nd.grad[0] / norm;
                               for (int r = 0; r < rows; ++r) {
                                   const double w = wcopy->empty() ? 1.0 : (*wcopy)[static_cast<std::size_t>(r)];
                                   if (w == 0.0) continue;
                                   const double gw = g * w;
                                   double* dst = p->grad.data() + static_cast<std::size_t>(r) * cols;
                                   const double* pr = probs->data() + static_cast<std::size_t>(r) * cols;
                                   for (int c = 0; c < cols; ++c) dst[c] += gw * pr[c];
                                   dst[(*lcopy)[static_cast<std::size_t>(r)]] -= gw;
                               }
                           });
}

inline Tensor cross_entropy(const Tensor& logits, int label) {
    if (logits.ndim() != 1)
        detail::op_error("cross_entropy", "expected logit vector, got " + shape_str(logits.shape()));
    return cross_entropy_rows(reshape(logits, {1, logits.dim(0)}), {label}, {}, 1.0);
}

// Index of the maximum entry; ties resolve to the lowest index.
inline int argmax_class(const std::vector<double>& y) {
    if (y.empty()) detail::op_error("argmax", "empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < y.size(); ++i)
        if (y[i] > y[best]) best = i;
    return static_cast<int>(best);
}

inline int argmax_class(const Tensor& y) { return argmax_class(y.data()); }

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// Stream-per-parameter seeding: init draws are independent of the order in
// which other parameters are created, so shared layers initialize
// identically across network modes.
inline std::uint64_t name_seed(std::uint64_t base, std::string_view name) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h ^ (base * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
}

// Zero-mean Gaussian with variance 2 / fan_in.
inline std::vector<double> he_normal(std::size_t count, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> v(count);
    for (double& x : v) x = dist(rng);
    return v;
}

}  // namespace mtlcnn
