// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// Tensors are value-semantic handles to shared nodes. Every operation that
// produces a tensor records its inputs and a backward rule, so calling
// backward() on a scalar loss fills the .grad buffers of all parameter
// leaves reachable from it. The graph is rebuilt on every forward pass
// (define-by-run); nodes are freed when the last handle goes away.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mtlcnn {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ')';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;           // same length as value once touched
    bool is_param = false;              // requires_grad leaf
    bool needs_grad = false;            // true if any param is reachable
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline thread_local int no_grad_depth = 0;

[[noreturn]] inline void op_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

}  // namespace detail

// Disables graph recording for its lifetime (evaluation / template extraction).
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    std::shared_ptr<detail::Node> node;

    Tensor() = default;

    static Tensor of(Shape shape, std::vector<double> data) {
        check_shape(shape, data.size());
        Tensor t;
        t.node = std::make_shared<detail::Node>();
        t.node->shape = std::move(shape);
        t.node->value = std::move(data);
        return t;
    }

    static Tensor zeros(Shape shape) {
        auto n = shape_numel(shape);
        return of(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(Shape shape, double v) {
        auto n = shape_numel(shape);
        return of(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor scalar(double v) { return of({1}, {v}); }

    // Trainable leaf: participates in backward and keeps an always-present grad buffer.
    static Tensor parameter(Shape shape, std::vector<double> data) {
        Tensor t = of(std::move(shape), std::move(data));
        t.node->is_param = true;
        t.node->needs_grad = true;
        t.node->ensure_grad();
        return t;
    }

    bool defined() const { return node != nullptr; }
    const Shape& shape() const { return node->shape; }
    int ndim() const { return static_cast<int>(node->shape.size()); }
    int dim(int i) const { return node->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node->value.size()); }

    const std::vector<double>& data() const { return node->value; }
    std::vector<double>& mutable_data() { return node->value; }

    bool requires_grad() const { return node->is_param; }
    const std::vector<double>& grad() const {
        node->ensure_grad();
        return node->grad;
    }
    void zero_grad() { node->grad.assign(node->value.size(), 0.0); }

    double item() const {
        if (size() != 1) detail::op_error("item", "tensor " + shape_str(shape()) + " is not scalar");
        return node->value[0];
    }

private:
    static void check_shape(const Shape& shape, std::size_t n) {
        for (int d : shape)
            if (d <= 0) detail::op_error("tensor", "non-positive extent in shape " + shape_str(shape));
        if (shape_numel(shape) != static_cast<std::int64_t>(n))
            detail::op_error("tensor", "shape " + shape_str(shape) + " does not match data length " +
                                           std::to_string(n));
    }
};

namespace detail {

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents, std::function<void(Node&)> backprop) {
    Tensor t = Tensor::of(std::move(shape), std::move(value));
    bool track = no_grad_depth == 0;
    bool any = false;
    if (track)
        for (const Tensor& p : parents) any = any || p.node->needs_grad;
    if (any) {
        t.node->needs_grad = true;
        t.node->op = op;
        t.node->parents.reserve(parents.size());
        for (Tensor& p : parents) t.node->parents.push_back(p.node);
        t.node->backprop = std::move(backprop);
    }
    return t;
}

// Accumulate v into parent's grad if it participates in backward.
inline bool wants_grad(const std::shared_ptr<Node>& p) { return p->needs_grad; }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        detail::op_error("add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data());
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return detail::make_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = n.parents[static_cast<std::size_t>(k)];
            if (!p->needs_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        detail::op_error("sub", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data());
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return detail::make_op("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        detail::op_error("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data());
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return detail::make_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (double& v : out) v *= c;
    return detail::make_op("scale", a.shape(), std::move(out), {a}, [c](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += c * n.grad[i];
    });
}

// (r x c) matrix plus a length-c row vector broadcast over rows.
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.ndim() != 2 || v.ndim() != 1 || m.dim(1) != v.dim(0))
        detail::op_error("add_rowvec",
                         "expected (r x c) and (c), got " + shape_str(m.shape()) + " and " + shape_str(v.shape()));
    const int rows = m.dim(0), cols = m.dim(1);
    std::vector<double> out(m.data());
    const auto& vv = v.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += vv[static_cast<std::size_t>(c)];
    return detail::make_op("add_rowvec", m.shape(), std::move(out), {m, v}, [rows, cols](detail::Node& n) {
        auto& pm = n.parents[0];
        auto& pv = n.parents[1];
        if (pm->needs_grad) {
            pm->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pm->grad[i] += n.grad[i];
        }
        if (pv->needs_grad) {
            pv->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    pv->grad[static_cast<std::size_t>(c)] += n.grad[static_cast<std::size_t>(r) * cols + c];
        }
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        detail::op_error("matmul",
                         "incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(n) * m);
    {
        detail::CMapMat A(a.data().data(), n, k), B(b.data().data(), k, m);
        detail::MapMat C(out.data(), n, m);
        C.noalias() = A * B;
    }
    return detail::make_op("matmul", {n, m}, std::move(out), {a, b}, [n, k, m](detail::Node& nd) {
        detail::CMapMat G(nd.grad.data(), n, m);
        auto& pa = nd.parents[0];
        auto& pb = nd.parents[1];
        if (pa->needs_grad) {
            pa->ensure_grad();
            detail::CMapMat B(pb->value.data(), k, m);
            detail::MapMat dA(pa->grad.data(), n, k);
            dA.noalias() += G * B.transpose();
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            detail::CMapMat A(pa->value.data(), n, k);
            detail::MapMat dB(pb->grad.data(), k, m);
            dB.noalias() += A.transpose() * G;
        }
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        detail::op_error("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    return detail::make_op("reshape", std::move(shape), std::vector<double>(a.data()), {a},
                           [](detail::Node& n) {
                               auto& p = n.parents[0];
                               if (!p->needs_grad) return;
                               p->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
                           });
}

// Contiguous slice of `len` entries starting at `start` along `axis`.
inline Tensor slice(const Tensor& a, int axis, int start, int len) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= a.ndim() || start < 0 || len <= 0 || start + len > s[static_cast<std::size_t>(axis)])
        detail::op_error("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                      ") along axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    std::int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<std::size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    const std::int64_t axis_len = s[static_cast<std::size_t>(axis)];
    Shape out_shape = s;
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
    const auto& av = a.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < len; ++j)
            std::copy_n(av.data() + (o * axis_len + start + j) * inner, inner,
                        out.data() + (o * len + j) * inner);
    return detail::make_op("slice", std::move(out_shape), std::move(out), {a},
                           [outer, inner, axis_len, start, len](detail::Node& n) {
                               auto& p = n.parents[0];
                               if (!p->needs_grad) return;
                               p->ensure_grad();
                               for (std::int64_t o = 0; o < outer; ++o)
                                   for (std::int64_t j = 0; j < len; ++j) {
                                       const double* g = n.grad.data() + (o * len + j) * inner;
                                       double* dst = p->grad.data() + (o * axis_len + start + j) * inner;
                                       for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i];
                                   }
                           });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) detail::op_error("concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= parts[0].ndim()) detail::op_error("concat", "bad axis for " + shape_str(s0));
    int total_axis = 0;
    for (const Tensor& p : parts) {
        Shape s = p.shape();
        if (static_cast<int>(s.size()) != parts[0].ndim())
            detail::op_error("concat", "rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        for (int i = 0; i < static_cast<int>(s.size()); ++i)
            if (i != axis && s[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)])
                detail::op_error("concat", "shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
        total_axis += s[static_cast<std::size_t>(axis)];
    }
    std::int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < parts[0].ndim(); ++i) inner *= s0[static_cast<std::size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
    Shape out_shape = s0;
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    std::vector<double> out(static_cast<std::size_t>(outer * total_axis * inner));
    std::vector<std::int64_t> axis_lens;
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        const std::int64_t al = p.shape()[static_cast<std::size_t>(axis)];
        axis_lens.push_back(al);
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(p.data().data() + o * al * inner, al * inner,
                        out.data() + (o * total_axis + off) * inner);
        off += al;
    }
    return detail::make_op("concat", std::move(out_shape), std::move(out), parts,
                           [outer, inner, total_axis, axis_lens](detail::Node& n) {
                               std::int64_t off2 = 0;
                               for (std::size_t k = 0; k < n.parents.size(); ++k) {
                                   auto& p = n.parents[k];
                                   const std::int64_t al = axis_lens[k];
                                   if (p->needs_grad) {
                                       p->ensure_grad();
                                       for (std::int64_t o = 0; o < outer; ++o) {
                                           const double* g = n.grad.data() + (o * total_axis + off2) * inner;
                                           double* dst = p->grad.data() + o * al * inner;
                                           for (std::int64_t i = 0; i < al * inner; ++i) dst[i] += g[i];
                                       }
                                   }
                                   off2 += al;
                               }
                           });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = std::exp(v);
    return detail::make_op("exp", a.shape(), std::move(out), {a}, [](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * n.value[i];
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = std::log(v);
    return detail::make_op("log", a.shape(), std::move(out), {a}, [](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] / p->value[i];
    });
}

inline Tensor abs(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = std::abs(v);
    return detail::make_op("abs", a.shape(), std::move(out), {a}, [](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double x = p->value[i];
            p->grad[i] += n.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return detail::make_op("relu", a.shape(), std::move(out), {a}, [](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (p->value[i] > 0.0) p->grad[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::make_op("sum_all", {1}, {s}, {a}, [](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        const double g = n.grad[0];
        for (double& d : p->grad) d += g;
    });
}

// Column sums of an (r x c) matrix -> length-c vector.
inline Tensor sum_rows(const Tensor& a) {
    if (a.ndim() != 2) detail::op_error("sum_rows", "expected matrix, got " + shape_str(a.shape()));
    const int rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
    const auto& av = a.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(c)] += av[static_cast<std::size_t>(r) * cols + c];
    return detail::make_op("sum_rows", {cols}, std::move(out), {a}, [rows, cols](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                p->grad[static_cast<std::size_t>(r) * cols + c] += n.grad[static_cast<std::size_t>(c)];
    });
}

inline Tensor mean_rows(const Tensor& a) {
    return scale(sum_rows(a), 1.0 / a.dim(0));
}

// Global max; ties route the gradient to the lowest flat index.
inline Tensor max_all(const Tensor& a) {
    const auto& av = a.data();
    if (av.empty()) detail::op_error("max_all", "empty tensor");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < av.size(); ++i)
        if (av[i] > av[arg]) arg = i;
    return detail::make_op("max_all", {1}, {av[arg]}, {a}, [arg](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        p->grad[arg] += n.grad[0];
    });
}

// Per-row max of an (r x c) matrix -> length-r vector.
inline Tensor row_max(const Tensor& a) {
    if (a.ndim() != 2) detail::op_error("row_max", "expected matrix, got " + shape_str(a.shape()));
    const int rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(static_cast<std::size_t>(rows));
    std::vector<std::size_t> args(static_cast<std::size_t>(rows));
    const auto& av = a.data();
    for (int r = 0; r < rows; ++r) {
        std::size_t base = static_cast<std::size_t>(r) * cols, arg = 0;
        for (int c = 1; c < cols; ++c)
            if (av[base + c] > av[base + arg]) arg = static_cast<std::size_t>(c);
        args[static_cast<std::size_t>(r)] = base + arg;
        out[static_cast<std::size_t>(r)] = av[base + arg];
    }
    return detail::make_op("row_max", {rows}, std::move(out), {a}, [args](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->needs_grad) return;
        p->ensure_grad();
        for (std::size_t r = 0; r < args.size(); ++r) p->grad[args[r]] += n.grad[r];
    });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Interior gradients are recomputed
// from scratch on every call; parameter leaves accumulate across calls until
// zero_grads() is used.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar tensor, got " +
                                    (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    detail::Node* root = loss.node.get();
    if (!root->needs_grad) return;

    // Iterative post-order DFS: parents appear before their consumers.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            detail::Node* p = n->parents[idx++].get();
            if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (detail::Node* n : order) {
        if (n->is_param)
            n->ensure_grad();
        else
            n->grad.assign(n->value.size(), 0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

inline void zero_grads(const std::vector<Tensor>& params) {
    for (const Tensor& p : params)
        if (p.defined()) p.node->grad.assign(p.node->value.size(), 0.0);
}

}  // namespace mtlcnn
