#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "scoregrad/tensor.hpp"

// Reverse-mode autodiff over tensors. The backward rules are themselves
// written in terms of the public ops, so adjoints are ordinary graph nodes
// and every quantity here is differentiable to second (and higher) order.
// That is what makes d/dθ ||∇ₓf||² and Hessian-vector products possible.

namespace scoregrad {

class Var;

namespace detail {

inline thread_local bool grad_enabled = true;

inline std::atomic<std::uint64_t> node_counter{0};
inline std::atomic<std::uint64_t> backward_counter{0};

}  // namespace detail

// Disables graph recording in scope; ops compute plain values only.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Re-enables recording inside a NoGradGuard scope (nested differentiation).
class EnableGradGuard {
public:
    EnableGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = true; }
    ~EnableGradGuard() { detail::grad_enabled = prev_; }
    EnableGradGuard(const EnableGradGuard&) = delete;
    EnableGradGuard& operator=(const EnableGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_recording_enabled() { return detail::grad_enabled; }
inline std::uint64_t backward_pass_count() { return detail::backward_counter.load(); }

struct Node : std::enable_shared_from_this<Node> {
    Tensor value;
    bool requires_grad = false;
    bool is_leaf = false;
    std::uint64_t id = 0;
    std::string op;
    std::vector<std::shared_ptr<Node>> parents;
    // (self, adjoint) -> adjoint contribution per parent
    std::function<std::vector<Var>(const Var&, const Var&)> vjp;
};

// Value-semantics handle onto a graph node.
class Var {
public:
    Var() : node_(nullptr) {}
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var constant(Tensor v) { return make(std::move(v), false, true); }
    static Var leaf(Tensor v, bool requires_grad = true) { return make(std::move(v), requires_grad, true); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::int64_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const { return node_->value.item(); }

    std::shared_ptr<Node> node() const { return node_; }
    Node* raw() const { return node_.get(); }

    static Var make(Tensor v, bool requires_grad, bool leaf) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        n->is_leaf = leaf;
        n->id = detail::node_counter.fetch_add(1);
        return Var(std::move(n));
    }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

[[noreturn]] inline void op_shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
    fail_data("op '" + op + "': shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

[[noreturn]] inline void op_shape_error(const std::string& op, const Tensor& a, const std::string& what) {
    fail_data("op '" + op + "': " + what + " (got " + a.shape_string() + ")");
}

inline Var record(Tensor out, const std::string& op, std::vector<Var> inputs,
                  std::function<std::vector<Var>(const Var&, const Var&)> vjp) {
    bool track = grad_enabled;
    bool req = false;
    if (track)
        for (const auto& in : inputs)
            if (in.requires_grad()) req = true;
    Var result = Var::make(std::move(out), track && req, false);
    if (track && req) {
        Node* n = result.raw();
        n->op = op;
        n->parents.reserve(inputs.size());
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->vjp = std::move(vjp);
    }
    return result;
}

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// op set
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& x);
Var sum(const Var& x);
Var reshape(const Var& x, Shape s);
Var broadcast_scalar(const Var& x, Shape s);
Var mul_scalar(const Var& x, double c);
Var gather(const Var& x, detail::IndexMap idx, Shape out_shape);
Var scatter_add(const Var& x, detail::IndexMap idx, Shape out_shape);

namespace detail {

// reduce an adjoint back onto a scalar-broadcast operand
inline Var sum_to(const Var& adj, const Shape& target) {
    if (adj.shape() == target) return adj;
    return reshape(sum(adj), target);
}

inline bool binary_shapes_ok(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) || a.numel() == 1 || b.numel() == 1;
}

inline Shape binary_out_shape(const Tensor& a, const Tensor& b) {
    return a.numel() == 1 && b.numel() != 1 ? b.shape() : a.shape();
}

}  // namespace detail

// Elementwise binaries accept equal shapes, or a scalar (numel()==1) on
// either side which broadcasts against the other operand.
inline Var add(const Var& a, const Var& b) {
    const Tensor &ta = a.value(), &tb = b.value();
    if (!detail::binary_shapes_ok(ta, tb)) detail::op_shape_error("add", ta, tb);
    Tensor out = Tensor::zeros(detail::binary_out_shape(ta, tb));
    const bool sa = ta.numel() == 1, sb = tb.numel() == 1;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = ta[sa ? 0 : i] + tb[sb ? 0 : i];
    return detail::record(std::move(out), "add", {a, b}, [a, b](const Var&, const Var& adj) {
        return std::vector<Var>{detail::sum_to(adj, a.shape()), detail::sum_to(adj, b.shape())};
    });
}

inline Var sub(const Var& a, const Var& b) {
    const Tensor &ta = a.value(), &tb = b.value();
    if (!detail::binary_shapes_ok(ta, tb)) detail::op_shape_error("sub", ta, tb);
    Tensor out = Tensor::zeros(detail::binary_out_shape(ta, tb));
    const bool sa = ta.numel() == 1, sb = tb.numel() == 1;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = ta[sa ? 0 : i] - tb[sb ? 0 : i];
    return detail::record(std::move(out), "sub", {a, b}, [a, b](const Var&, const Var& adj) {
        return std::vector<Var>{detail::sum_to(adj, a.shape()), detail::sum_to(neg(adj), b.shape())};
    });
}

inline Var mul(const Var& a, const Var& b) {
    const Tensor &ta = a.value(), &tb = b.value();
    if (!detail::binary_shapes_ok(ta, tb)) detail::op_shape_error("mul", ta, tb);
    Tensor out = Tensor::zeros(detail::binary_out_shape(ta, tb));
    const bool sa = ta.numel() == 1, sb = tb.numel() == 1;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = ta[sa ? 0 : i] * tb[sb ? 0 : i];
    return detail::record(std::move(out), "mul", {a, b}, [a, b](const Var&, const Var& adj) {
        return std::vector<Var>{detail::sum_to(mul(adj, b), a.shape()), detail::sum_to(mul(adj, a), b.shape())};
    });
}

inline Var neg(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = -v;
    return detail::record(std::move(out), "neg", {x},
                          [](const Var&, const Var& adj) { return std::vector<Var>{neg(adj)}; });
}

inline Var add_scalar(const Var& x, double c) {
    Tensor out = x.value();
    for (auto& v : out.data()) v += c;
    return detail::record(std::move(out), "add_scalar", {x},
                          [](const Var&, const Var& adj) { return std::vector<Var>{adj}; });
}

inline Var mul_scalar(const Var& x, double c) {
    Tensor out = x.value();
    for (auto& v : out.data()) v *= c;
    return detail::record(std::move(out), "mul_scalar", {x},
                          [c](const Var&, const Var& adj) { return std::vector<Var>{mul_scalar(adj, c)}; });
}

inline Var square(const Var& x) { return mul(x, x); }

inline Var exp(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = std::exp(v);
    return detail::record(std::move(out), "exp", {x},
                          [](const Var& self, const Var& adj) { return std::vector<Var>{mul(adj, self)}; });
}

inline Var recip(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = 1.0 / v;
    return detail::record(std::move(out), "recip", {x}, [](const Var& self, const Var& adj) {
        return std::vector<Var>{neg(mul(adj, mul(self, self)))};
    });
}

inline Var log(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = std::log(v);
    return detail::record(std::move(out), "log", {x}, [x](const Var&, const Var& adj) {
        return std::vector<Var>{mul(adj, recip(x))};
    });
}

Var cos(const Var& x);

inline Var sin(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = std::sin(v);
    return detail::record(std::move(out), "sin", {x}, [x](const Var&, const Var& adj) {
        return std::vector<Var>{mul(adj, cos(x))};
    });
}

inline Var cos(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = std::cos(v);
    return detail::record(std::move(out), "cos", {x}, [x](const Var&, const Var& adj) {
        return std::vector<Var>{neg(mul(adj, sin(x)))};
    });
}

inline double sigmoid_value(double t) {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    double e = std::exp(t);
    return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = sigmoid_value(v);
    return detail::record(std::move(out), "sigmoid", {x}, [](const Var& self, const Var& adj) {
        return std::vector<Var>{mul(adj, mul(self, add_scalar(neg(self), 1.0)))};
    });
}

inline double softplus_value(double beta, double t) {
    // (1/beta) log(1 + exp(beta t)), branch-safe for large |beta t|
    double bt = beta * t;
    return (std::max(bt, 0.0) + std::log1p(std::exp(-std::abs(bt)))) / beta;
}

inline Var softplus(const Var& x, double beta) {
    if (beta <= 0.0) fail_data("op 'softplus': beta must be positive");
    Tensor out = x.value();
    for (auto& v : out.data()) v = softplus_value(beta, v);
    return detail::record(std::move(out), "softplus", {x}, [x, beta](const Var&, const Var& adj) {
        return std::vector<Var>{mul(adj, sigmoid(mul_scalar(x, beta)))};
    });
}

inline Var relu(const Var& x) {
    const Tensor& t = x.value();
    Tensor out = t;
    Tensor mask = Tensor::zeros(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if (t[i] > 0.0)
            mask[i] = 1.0;
        else
            out[i] = 0.0;
    }
    Var mask_c = Var::constant(std::move(mask));
    return detail::record(std::move(out), "relu", {x}, [mask_c](const Var&, const Var& adj) {
        return std::vector<Var>{mul(adj, mask_c)};
    });
}

// min(x, cap) elementwise; upstream gradient is zero wherever the cap is active
inline Var clamp_max(const Var& x, double cap) {
    const Tensor& t = x.value();
    Tensor out = t;
    Tensor mask = Tensor::zeros(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if (t[i] < cap)
            mask[i] = 1.0;
        else
            out[i] = cap;
    }
    Var mask_c = Var::constant(std::move(mask));
    return detail::record(std::move(out), "clamp_max", {x}, [mask_c](const Var&, const Var& adj) {
        return std::vector<Var>{mul(adj, mask_c)};
    });
}

inline Var sum(const Var& x) {
    Tensor out = Tensor::scalar(x.value().sum());
    Shape in_shape = x.shape();
    return detail::record(std::move(out), "sum", {x}, [in_shape](const Var&, const Var& adj) {
        return std::vector<Var>{broadcast_scalar(adj, in_shape)};
    });
}

inline Var broadcast_scalar(const Var& x, Shape s) {
    if (x.numel() != 1) detail::op_shape_error("broadcast_scalar", x.value(), "operand must be scalar");
    Tensor out = Tensor::full(s, x.value()[0]);
    Shape in_shape = x.shape();
    return detail::record(std::move(out), "broadcast_scalar", {x}, [in_shape](const Var&, const Var& adj) {
        return std::vector<Var>{reshape(sum(adj), in_shape)};
    });
}

inline Var mean(const Var& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

// whole-tensor max; ties break to the lowest flat (row-major) index
inline Var max(const Var& x) {
    const Tensor& t = x.value();
    std::int64_t arg = 0;
    for (std::int64_t i = 1; i < t.numel(); ++i)
        if (t[i] > t[arg]) arg = i;
    Tensor out = Tensor::scalar(t[arg]);
    auto idx = std::make_shared<const std::vector<std::int64_t>>(std::vector<std::int64_t>{arg});
    Shape in_shape = t.shape();
    return detail::record(std::move(out), "max", {x}, [idx, in_shape](const Var&, const Var& adj) {
        return std::vector<Var>{scatter_add(reshape(adj, {1}), idx, in_shape)};
    });
}

inline Var reshape(const Var& x, Shape s) {
    Tensor out = x.value().reshaped(s);
    Shape in_shape = x.shape();
    return detail::record(std::move(out), "reshape", {x}, [in_shape](const Var&, const Var& adj) {
        return std::vector<Var>{reshape(adj, in_shape)};
    });
}

inline Var transpose(const Var& x) {
    const Tensor& t = x.value();
    if (t.rank() != 2) detail::op_shape_error("transpose", t, "expects rank-2");
    std::int64_t m = t.extent(0), n = t.extent(1);
    Tensor out = Tensor::zeros({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = t[i * n + j];
    return detail::record(std::move(out), "transpose", {x},
                          [](const Var&, const Var& adj) { return std::vector<Var>{transpose(adj)}; });
}

namespace detail {

inline void matmul_raw(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                       std::int64_t n) {
    // ikj order: streams rows of b, vectorizes the j loop
    for (std::int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) ci[j] = 0.0;
        const double* ai = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            double av = ai[p];
            const double* bp = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    const Tensor &ta = a.value(), &tb = b.value();
    if (ta.rank() != 2 || tb.rank() != 2 || ta.extent(1) != tb.extent(0))
        detail::op_shape_error("matmul", ta, tb);
    std::int64_t m = ta.extent(0), k = ta.extent(1), n = tb.extent(1);
    Tensor out = Tensor::zeros({m, n});
    detail::matmul_raw(ta.data().data(), tb.data().data(), out.data().data(), m, k, n);
    return detail::record(std::move(out), "matmul", {a, b}, [a, b](const Var&, const Var& adj) {
        return std::vector<Var>{matmul(adj, transpose(b)), matmul(transpose(a), adj)};
    });
}

// out[j] = x[idx[j]], with idx[j] == -1 producing 0 (used for padding).
// gather and scatter_add are exact adjoints of one another, which is what
// lets data-movement-heavy ops (convolution, broadcasts, reductions over
// rows) stay differentiable to arbitrary order.
inline Var gather(const Var& x, detail::IndexMap idx, Shape out_shape) {
    const Tensor& t = x.value();
    if (static_cast<std::int64_t>(idx->size()) != shape_numel(out_shape))
        detail::op_shape_error("gather", t, "index map size does not match output shape " + shape_str(out_shape));
    Tensor out = Tensor::zeros(out_shape);
    const auto& map = *idx;
    for (std::size_t j = 0; j < map.size(); ++j) out[static_cast<std::int64_t>(j)] = map[j] < 0 ? 0.0 : t[map[j]];
    Shape in_shape = t.shape();
    return detail::record(std::move(out), "gather", {x}, [idx, in_shape](const Var&, const Var& adj) {
        return std::vector<Var>{scatter_add(adj, idx, in_shape)};
    });
}

// out[idx[j]] += x[j]; idx[j] == -1 drops the element.
inline Var scatter_add(const Var& x, detail::IndexMap idx, Shape out_shape) {
    const Tensor& t = x.value();
    if (static_cast<std::int64_t>(idx->size()) != t.numel())
        detail::op_shape_error("scatter_add", t, "index map size does not match input");
    Tensor out = Tensor::zeros(out_shape);
    const auto& map = *idx;
    for (std::size_t j = 0; j < map.size(); ++j)
        if (map[j] >= 0) out[map[j]] += t[static_cast<std::int64_t>(j)];
    Shape in_shape = t.shape();
    return detail::record(std::move(out), "scatter_add", {x}, [idx, in_shape](const Var&, const Var& adj) {
        return std::vector<Var>{gather(adj, idx, in_shape)};
    });
}

// ---------------------------------------------------------------------------
// derived row-wise helpers ([B, ...] tensors)
// ---------------------------------------------------------------------------

namespace detail {

inline IndexMap iota_map(std::int64_t n, const std::function<std::int64_t(std::int64_t)>& f) {
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = f(i);
    return std::make_shared<const std::vector<std::int64_t>>(std::move(v));
}

}  // namespace detail

// x[i, ...] as a rank-(r-1) tensor
inline Var take_row(const Var& x, std::int64_t i) {
    const Tensor& t = x.value();
    if (t.rank() == 0) detail::op_shape_error("take_row", t, "expects rank >= 1");
    if (i < 0 || i >= t.extent(0)) detail::op_shape_error("take_row", t, "row " + std::to_string(i) + " out of range");
    std::int64_t stride = t.numel() / t.extent(0);
    Shape out_shape(t.shape().begin() + 1, t.shape().end());
    auto idx = detail::iota_map(stride, [=](std::int64_t j) { return i * stride + j; });
    return gather(x, idx, out_shape);
}

// v[B] -> [B, row...] by repeating each entry across a row
inline Var repeat_per_row(const Var& v, const Shape& row_shape) {
    const Tensor& t = v.value();
    if (t.rank() != 1) detail::op_shape_error("repeat_per_row", t, "expects rank-1");
    std::int64_t b = t.extent(0), stride = shape_numel(row_shape);
    Shape out_shape{b};
    out_shape.insert(out_shape.end(), row_shape.begin(), row_shape.end());
    auto idx = detail::iota_map(b * stride, [=](std::int64_t j) { return j / stride; });
    return gather(v, idx, out_shape);
}

// [B, ...] -> [B], summing everything within each row
inline Var sum_per_row(const Var& x) {
    const Tensor& t = x.value();
    if (t.rank() < 1) detail::op_shape_error("sum_per_row", t, "expects rank >= 1");
    std::int64_t b = t.extent(0), stride = t.numel() / b;
    auto idx = detail::iota_map(t.numel(), [=](std::int64_t j) { return j / stride; });
    return scatter_add(x, idx, {b});
}

// x[B, C], cols[B] -> [B] with out[b] = x[b, cols[b]]
inline Var take_per_row(const Var& x, const std::vector<std::int64_t>& cols) {
    const Tensor& t = x.value();
    if (t.rank() != 2) detail::op_shape_error("take_per_row", t, "expects rank-2");
    std::int64_t b = t.extent(0), c = t.extent(1);
    if (static_cast<std::int64_t>(cols.size()) != b)
        detail::op_shape_error("take_per_row", t, "needs one column index per row");
    for (std::int64_t i = 0; i < b; ++i)
        if (cols[static_cast<std::size_t>(i)] < 0 || cols[static_cast<std::size_t>(i)] >= c)
            fail_data("take_per_row: class index " + std::to_string(cols[static_cast<std::size_t>(i)]) +
                      " out of range for " + t.shape_string());
    auto idx = detail::iota_map(b, [&, c](std::int64_t i) { return i * c + cols[static_cast<std::size_t>(i)]; });
    return gather(x, idx, {b});
}

// row-wise log-sum-exp with max-subtraction stabilization: [B, C] -> [B]
inline Var logsumexp_rows(const Var& x) {
    const Tensor& t = x.value();
    if (t.rank() != 2) detail::op_shape_error("logsumexp_rows", t, "expects rank-2");
    std::int64_t b = t.extent(0), c = t.extent(1);
    Tensor out = Tensor::zeros({b});
    for (std::int64_t i = 0; i < b; ++i) {
        double m = t[i * c];
        for (std::int64_t j = 1; j < c; ++j) m = std::max(m, t[i * c + j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < c; ++j) s += std::exp(t[i * c + j] - m);
        out[i] = m + std::log(s);
    }
    return detail::record(std::move(out), "logsumexp_rows", {x}, [x, c](const Var& self, const Var& adj) {
        // d/dx lse = softmax(x); expressed with graph ops so it stays differentiable
        Var probs = exp(sub(x, repeat_per_row(self, {c})));
        return std::vector<Var>{mul(repeat_per_row(adj, {c}), probs)};
    });
}

inline Var logsumexp(const Var& x) {
    const Tensor& t = x.value();
    if (t.rank() != 1) detail::op_shape_error("logsumexp", t, "expects rank-1");
    return reshape(logsumexp_rows(reshape(x, {1, t.extent(0)})), {});
}

// ---------------------------------------------------------------------------
// layers: affine and 2-d convolution
// ---------------------------------------------------------------------------

// x[B, Din] * W^T + b with W[Dout, Din], b[Dout]
inline Var affine(const Var& x, const Var& w, const Var& b) {
    const Tensor &tx = x.value(), &tw = w.value(), &tb = b.value();
    if (tx.rank() != 2 || tw.rank() != 2 || tx.extent(1) != tw.extent(1))
        detail::op_shape_error("affine", tx, tw);
    if (tb.rank() != 1 || tb.extent(0) != tw.extent(0)) detail::op_shape_error("affine", tw, tb);
    std::int64_t batch = tx.extent(0), dout = tw.extent(0);
    Var y = matmul(x, transpose(w));
    auto idx = detail::iota_map(batch * dout, [=](std::int64_t j) { return j % dout; });
    return add(y, gather(b, idx, {batch, dout}));
}

namespace detail {

struct ConvKey {
    std::int64_t b, cin, h, w, f, kh, kw, stride, pad;
    bool operator<(const ConvKey& o) const {
        return std::tie(b, cin, h, w, f, kh, kw, stride, pad) <
               std::tie(o.b, o.cin, o.h, o.w, o.f, o.kh, o.kw, o.stride, o.pad);
    }
};

struct ConvPlan {
    std::int64_t hout = 0, wout = 0;
    IndexMap im2col;   // [Cin*kh*kw, B*hout*wout] <- x[B,Cin,H,W], -1 = zero pad
    IndexMap to_nchw;  // [B,F,hout,wout] <- [F, B*hout*wout]
    IndexMap bias_map; // [B,F,hout,wout] <- bias[F]
};

inline const ConvPlan& conv_plan(const ConvKey& key) {
    static std::map<ConvKey, ConvPlan> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    ConvPlan plan;
    plan.hout = (key.h + 2 * key.pad - key.kh) / key.stride + 1;
    plan.wout = (key.w + 2 * key.pad - key.kw) / key.stride + 1;
    const std::int64_t columns = key.b * plan.hout * plan.wout;
    const std::int64_t ckk = key.cin * key.kh * key.kw;

    std::vector<std::int64_t> im2col(static_cast<std::size_t>(ckk * columns));
    for (std::int64_t ci = 0; ci < key.cin; ++ci)
        for (std::int64_t i = 0; i < key.kh; ++i)
            for (std::int64_t j = 0; j < key.kw; ++j) {
                std::int64_t r = (ci * key.kh + i) * key.kw + j;
                for (std::int64_t bi = 0; bi < key.b; ++bi)
                    for (std::int64_t oy = 0; oy < plan.hout; ++oy)
                        for (std::int64_t ox = 0; ox < plan.wout; ++ox) {
                            std::int64_t col = (bi * plan.hout + oy) * plan.wout + ox;
                            std::int64_t iy = oy * key.stride + i - key.pad;
                            std::int64_t ix = ox * key.stride + j - key.pad;
                            std::int64_t src = -1;
                            if (iy >= 0 && iy < key.h && ix >= 0 && ix < key.w)
                                src = ((bi * key.cin + ci) * key.h + iy) * key.w + ix;
                            im2col[static_cast<std::size_t>(r * columns + col)] = src;
                        }
            }
    plan.im2col = std::make_shared<const std::vector<std::int64_t>>(std::move(im2col));

    std::vector<std::int64_t> to_nchw(static_cast<std::size_t>(key.b * key.f * plan.hout * plan.wout));
    std::vector<std::int64_t> bias_map(to_nchw.size());
    std::size_t pos = 0;
    for (std::int64_t bi = 0; bi < key.b; ++bi)
        for (std::int64_t fi = 0; fi < key.f; ++fi)
            for (std::int64_t oy = 0; oy < plan.hout; ++oy)
                for (std::int64_t ox = 0; ox < plan.wout; ++ox, ++pos) {
                    to_nchw[pos] = fi * columns + (bi * plan.hout + oy) * plan.wout + ox;
                    bias_map[pos] = fi;
                }
    plan.to_nchw = std::make_shared<const std::vector<std::int64_t>>(std::move(to_nchw));
    plan.bias_map = std::make_shared<const std::vector<std::int64_t>>(std::move(bias_map));

    return cache.emplace(key, std::move(plan)).first->second;
}

}  // namespace detail

// 2-d convolution, x[B,Cin,H,W], kernel[F,Cin,kh,kw], bias[F]. Built from
// gather + matmul so the whole stack differentiates to second order.
inline Var conv2d(const Var& x, const Var& kernel, const Var& bias, std::int64_t stride, std::int64_t pad) {
    const Tensor &tx = x.value(), &tk = kernel.value(), &tb = bias.value();
    if (tx.rank() != 4 || tk.rank() != 4 || tx.extent(1) != tk.extent(1))
        detail::op_shape_error("conv2d", tx, tk);
    if (tb.rank() != 1 || tb.extent(0) != tk.extent(0)) detail::op_shape_error("conv2d", tk, tb);
    if (stride < 1) fail_data("op 'conv2d': stride must be >= 1");
    detail::ConvKey key{tx.extent(0), tx.extent(1), tx.extent(2), tx.extent(3),
                        tk.extent(0), tk.extent(2), tk.extent(3), stride, pad};
    if (key.h + 2 * pad < key.kh || key.w + 2 * pad < key.kw)
        detail::op_shape_error("conv2d", tx, "kernel larger than padded input");
    const detail::ConvPlan& plan = detail::conv_plan(key);

    std::int64_t columns = key.b * plan.hout * plan.wout;
    std::int64_t ckk = key.cin * key.kh * key.kw;
    Var cols = gather(x, plan.im2col, {ckk, columns});
    Var k2d = reshape(kernel, {key.f, ckk});
    Var out2d = matmul(k2d, cols);
    Shape out_shape{key.b, key.f, plan.hout, plan.wout};
    Var out = gather(out2d, plan.to_nchw, out_shape);
    return add(out, gather(bias, plan.bias_map, out_shape));
}

// ---------------------------------------------------------------------------
// backward / grad / hvp
// ---------------------------------------------------------------------------

namespace detail {

inline void topo_collect(Node* root, std::vector<Node*>& order) {
    // iterative DFS; parent order is fixed, so the ordering (and therefore
    // accumulation order) is deterministic across runs
    std::unordered_map<Node*, bool> done;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (done.count(node) && done[node]) {
            stack.pop_back();
            continue;
        }
        bool descended = false;
        while (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !done.count(p)) {
                done[p] = false;
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (!descended && next >= node->parents.size()) {
            done[node] = true;
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Adjoints of `output` w.r.t. each leaf. Results are graph nodes; with
// create_graph=true they record further ops and can be differentiated again.
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& leaves, bool create_graph = false) {
    if (output.numel() != 1) fail_data("grad: output must be scalar, got " + output.value().shape_string());
    detail::backward_counter.fetch_add(1);

    std::unordered_map<Node*, Var> adjoint;
    if (output.requires_grad()) {
        std::vector<Node*> order;
        detail::topo_collect(output.raw(), order);

        std::optional<NoGradGuard> guard;
        if (!create_graph) guard.emplace();

        adjoint.emplace(output.raw(), Var::constant(Tensor::ones(output.shape())));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            auto found = adjoint.find(n);
            if (found == adjoint.end() || !n->vjp) continue;
            Var self(n->shared_from_this());
            std::vector<Var> contribs = n->vjp(self, found->second);
            for (std::size_t i = 0; i < n->parents.size(); ++i) {
                Node* p = n->parents[i].get();
                if (!p->requires_grad) continue;
                auto at = adjoint.find(p);
                if (at == adjoint.end())
                    adjoint.emplace(p, contribs[i]);
                else
                    at->second = add(at->second, contribs[i]);
            }
        }
    }

    std::vector<Var> out;
    out.reserve(leaves.size());
    for (const auto& leaf : leaves) {
        auto it = adjoint.find(leaf.raw());
        if (it == adjoint.end())
            out.push_back(Var::constant(Tensor::zeros(leaf.shape())));
        else
            out.push_back(it->second);
    }
    return out;
}

inline Var grad1(const Var& output, const Var& leaf, bool create_graph = false) {
    return grad(output, {leaf}, create_graph)[0];
}

using ScalarFn = std::function<Var(const Var&)>;

// Pearlmutter-style Hessian-vector product: grad of (grad f . v); exactly two
// backward passes.
inline Tensor hvp(const ScalarFn& f, const Tensor& x, const Tensor& v) {
    if (!x.same_shape(v)) fail_data("hvp: v shape " + v.shape_string() + " != x shape " + x.shape_string());
    Var xv = Var::leaf(x);
    Var out = f(xv);
    Var g = grad1(out, xv, /*create_graph=*/true);
    Var gv = sum(mul(g, Var::constant(v)));
    return grad1(gv, xv, /*create_graph=*/false).value();
}

}  // namespace scoregrad
