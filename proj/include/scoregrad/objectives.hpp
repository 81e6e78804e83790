#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scoregrad/models.hpp"
#include "scoregrad/trace.hpp"

namespace scoregrad {

enum class RegMode { none, score_matching, anti_score_matching, grad_norm };

inline const char* reg_mode_name(RegMode m) {
    switch (m) {
        case RegMode::none: return "none";
        case RegMode::score_matching: return "score_matching";
        case RegMode::anti_score_matching: return "anti_score_matching";
        case RegMode::grad_norm: return "grad_norm";
    }
    return "?";
}

inline RegMode parse_reg_mode(const std::string& s) {
    if (s == "none") return RegMode::none;
    if (s == "score_matching") return RegMode::score_matching;
    if (s == "anti_score_matching") return RegMode::anti_score_matching;
    if (s == "grad_norm") return RegMode::grad_norm;
    fail_usage("unknown regularizer mode '" + s + "'");
}

struct RegularizerConfig {
    RegMode mode = RegMode::none;
    double lambda = 0.0;
    double mu = 0.0;   // stability weight (score matching)
    double tau = 0.0;  // clamp threshold (anti score matching)
    TraceEstimatorConfig trace;

    void validate() const {
        if (lambda < 0.0 || !std::isfinite(lambda)) fail_usage("regularizer: lambda must be >= 0");
        if (mode == RegMode::score_matching && (mu < 0.0 || !std::isfinite(mu)))
            fail_usage("regularizer: score matching needs mu >= 0");
        if (mode == RegMode::anti_score_matching && !(tau > 0.0 && std::isfinite(tau)))
            fail_usage("regularizer: anti score matching needs tau > 0");
        trace.validate();
    }
};

// Per-batch mean terms. `hessian_trace` is the term as it enters the loss
// (clamped in anti mode); `grad_norm` already carries the 1/2 factor;
// `stability` is mean h^2 without the mu weight.
struct LossBreakdown {
    double total = 0.0;
    double cross_entropy = 0.0;
    double hessian_trace = 0.0;
    double grad_norm = 0.0;
    double stability = 0.0;
};

inline double assemble_total(const RegularizerConfig& cfg, double ce, double h, double gn, double stab) {
    switch (cfg.mode) {
        case RegMode::none: return ce;
        case RegMode::score_matching: return ce + cfg.lambda * (h + gn + cfg.mu * stab);
        case RegMode::anti_score_matching: return ce - cfg.lambda * h;
        case RegMode::grad_norm: return ce + cfg.lambda * gn;
    }
    fail_usage("bad regularizer mode");
}

struct LossResult {
    Var total;  // rank-0, differentiable w.r.t. every parameter leaf in `fn`
    LossBreakdown breakdown;
    std::vector<double> per_example_h;
};

namespace detail {

// scalar view of one class logit: z [input...] -> f_cls(z)
inline ScalarFn per_example_logit_fn(const BatchLogitFn& fn, const Shape& example_shape, std::int64_t cls) {
    return [fn, example_shape, cls](const Var& z) {
        Shape batched{1};
        batched.insert(batched.end(), example_shape.begin(), example_shape.end());
        Var logits = fn(reshape(z, batched));
        return take_row(take_row(logits, 0), cls);
    };
}

inline Var stack_scalars(const std::vector<Var>& vals) {
    const std::int64_t n = static_cast<std::int64_t>(vals.size());
    Var acc = Var::constant(Tensor::zeros({n}));
    for (std::int64_t i = 0; i < n; ++i) {
        auto idx = std::make_shared<const std::vector<std::int64_t>>(std::vector<std::int64_t>{i});
        acc = add(acc, scatter_add(reshape(vals[static_cast<std::size_t>(i)], {1}), idx, {n}));
    }
    return acc;
}

// per-example Taylor trace term, one derived noise stream per example id so
// results do not depend on batch partitioning
inline Var taylor_h_rows(const BatchLogitFn& fn, const Tensor& x, const std::vector<std::int64_t>& labels,
                         const Var& sel_base, const TraceEstimatorConfig& cfg,
                         const std::vector<std::uint64_t>& example_ids, std::uint64_t round_seed) {
    const std::int64_t b = x.extent(0);
    const std::int64_t row = x.numel() / b;
    Var acc = Var::constant(Tensor::zeros({b}));
    for (std::int64_t n = 0; n < cfg.samples; ++n) {
        Tensor xp = x;
        for (std::int64_t i = 0; i < b; ++i) {
            Rng r = Rng(cfg.seed)
                        .derive("tte-round", round_seed)
                        .derive("example", example_ids[static_cast<std::size_t>(i)])
                        .derive("sample", static_cast<std::uint64_t>(n));
            for (std::int64_t k = 0; k < row; ++k) xp[i * row + k] += cfg.sigma * r.gaussian();
        }
        Var pert = fn(Var::constant(xp));
        acc = add(acc, sub(take_per_row(pert, labels), sel_base));
    }
    return mul_scalar(acc, 2.0 / (static_cast<double>(cfg.samples) * cfg.sigma * cfg.sigma));
}

// exact or Hutchinson per-example Hessian traces through the differentiable
// path; loops per example, intended for toy dimensions and tests
inline Var slow_h_rows(const BatchLogitFn& fn, const Tensor& x, const std::vector<std::int64_t>& labels,
                       const TraceEstimatorConfig& cfg, const std::vector<std::uint64_t>& example_ids) {
    const std::int64_t b = x.extent(0);
    Shape example_shape(x.shape().begin() + 1, x.shape().end());
    std::vector<Var> vals;
    vals.reserve(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
        ScalarFn f = per_example_logit_fn(fn, example_shape, labels[static_cast<std::size_t>(i)]);
        Var xi = Var::leaf(x.rows(i, 1).reshaped(example_shape));
        if (cfg.method == TraceMethod::exact) {
            vals.push_back(exact_trace_var(f, xi));
        } else {
            // Hutchinson with graph-building HVPs
            Var out = f(xi);
            Var g = grad1(out, xi, /*create_graph=*/true);
            Var acc = Var::constant(Tensor::scalar(0.0));
            for (std::int64_t n = 0; n < cfg.samples; ++n) {
                Rng r = Rng(cfg.seed)
                            .derive("example", example_ids[static_cast<std::size_t>(i)])
                            .derive("sample", static_cast<std::uint64_t>(n));
                Var v = Var::constant(r.gaussian_tensor(example_shape));
                Var gv = sum(mul(g, v));
                Var hv = grad1(gv, xi, /*create_graph=*/true);
                acc = add(acc, sum(mul(hv, v)));
            }
            vals.push_back(mul_scalar(acc, 1.0 / static_cast<double>(cfg.samples)));
        }
    }
    return stack_scalars(vals);
}

}  // namespace detail

// The regularized training loss. round_seed separates noise draws across
// optimization rounds (e.g. epochs); example_ids make per-example noise
// independent of batch composition.
inline LossResult regularized_loss(const BatchLogitFn& fn, const Tensor& x,
                                   const std::vector<std::int64_t>& labels, const RegularizerConfig& cfg,
                                   const std::vector<std::uint64_t>& example_ids, std::uint64_t round_seed = 0) {
    cfg.validate();
    const std::int64_t b = x.extent(0);
    if (static_cast<std::int64_t>(labels.size()) != b) fail_data("loss: label count does not match batch");
    if (static_cast<std::int64_t>(example_ids.size()) != b) fail_data("loss: example id count does not match batch");

    const bool want_h = cfg.lambda > 0.0 &&
                        (cfg.mode == RegMode::score_matching || cfg.mode == RegMode::anti_score_matching);
    const bool want_gn = cfg.lambda > 0.0 &&
                         (cfg.mode == RegMode::score_matching || cfg.mode == RegMode::grad_norm);

    Var xleaf = want_gn ? Var::leaf(x) : Var::constant(x);
    Var logits = fn(xleaf);
    Var ce_rows = cross_entropy_rows(logits, labels);
    Var sel = take_per_row(logits, labels);

    LossResult res;
    Var total = mean(ce_rows);
    res.breakdown.cross_entropy = total.item();

    Var h_rows, gn_rows;
    if (want_h) {
        if (cfg.trace.method == TraceMethod::taylor)
            h_rows = detail::taylor_h_rows(fn, x, labels, sel, cfg.trace, example_ids, round_seed);
        else
            h_rows = detail::slow_h_rows(fn, x, labels, cfg.trace, example_ids);
        res.per_example_h = h_rows.value().data();
        for (std::int64_t i = 0; i < b; ++i)
            if (!std::isfinite(res.per_example_h[static_cast<std::size_t>(i)]))
                fail_numeric("loss: non-finite Hessian-trace estimate at batch example " + std::to_string(i) +
                             " (dataset id " + std::to_string(example_ids[static_cast<std::size_t>(i)]) + ")");
    }
    if (want_gn) {
        Var g = grad1(sum(sel), xleaf, /*create_graph=*/true);
        gn_rows = mul_scalar(sum_per_row(square(g)), 0.5);
    }

    switch (cfg.mode) {
        case RegMode::none: break;
        case RegMode::score_matching: {
            if (cfg.lambda > 0.0) {
                Var h_mean = mean(h_rows);
                Var gn_mean = mean(gn_rows);
                Var stab_mean = mean(square(h_rows));
                res.breakdown.hessian_trace = h_mean.item();
                res.breakdown.grad_norm = gn_mean.item();
                res.breakdown.stability = stab_mean.item();
                Var reg = add(add(h_mean, gn_mean), mul_scalar(stab_mean, cfg.mu));
                total = add(total, mul_scalar(reg, cfg.lambda));
            }
            break;
        }
        case RegMode::anti_score_matching: {
            if (cfg.lambda > 0.0) {
                Var clamped = mean(clamp_max(h_rows, cfg.tau));
                res.breakdown.hessian_trace = clamped.item();
                total = sub(total, mul_scalar(clamped, cfg.lambda));
            }
            break;
        }
        case RegMode::grad_norm: {
            if (cfg.lambda > 0.0) {
                Var gn_mean = mean(gn_rows);
                res.breakdown.grad_norm = gn_mean.item();
                total = add(total, mul_scalar(gn_mean, cfg.lambda));
            }
            break;
        }
    }
    res.total = total;
    res.breakdown.total = total.item();
    return res;
}

// Finite-sample form of the integration-by-parts objective (without the
// data-entropy constant): mean_b [ trace(H f_i) + 1/2 ||grad f_i||^2 ].
// Exact traces, value only; guarded to small dimensions.
inline double score_matching_objective_exact(const BatchLogitFn& fn, const Tensor& x,
                                             const std::vector<std::int64_t>& labels) {
    const std::int64_t b = x.extent(0);
    if (static_cast<std::int64_t>(labels.size()) != b) fail_data("objective: label count does not match batch");
    Shape example_shape(x.shape().begin() + 1, x.shape().end());
    double acc = 0.0;
    for (std::int64_t i = 0; i < b; ++i) {
        ScalarFn f = detail::per_example_logit_fn(fn, example_shape, labels[static_cast<std::size_t>(i)]);
        Tensor xi = x.rows(i, 1).reshaped(example_shape);
        double tr = exact_trace(f, xi);
        Var xv = Var::leaf(xi);
        double gsq = grad1(f(xv), xv).value().squared_norm();
        acc += tr + 0.5 * gsq;
    }
    return acc / static_cast<double>(b);
}

}  // namespace scoregrad
