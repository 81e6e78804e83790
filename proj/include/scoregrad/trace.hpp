#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "scoregrad/autodiff.hpp"
#include "scoregrad/rng.hpp"

// Hessian-trace estimators. The forward-pass Taylor estimator
//   (2 / (N sigma^2)) sum_i (f(x + v_i) - f(x)),  v_i ~ N(0, sigma^2 I)
// needs no backward passes, is exact in expectation on quadratics, and its
// variance exceeds Hutchinson's by at most 4 sigma^-2 ||grad f||^2 / N.
// Hutchinson and Taylor draw the same underlying unit normals for a given
// seed (Taylor scales them by sigma), so the per-sample difference isolates
// the gradient term exactly.

namespace scoregrad {

enum class TraceMethod { exact, hutchinson, taylor };

inline const char* trace_method_name(TraceMethod m) {
    switch (m) {
        case TraceMethod::exact: return "exact";
        case TraceMethod::hutchinson: return "hutchinson";
        case TraceMethod::taylor: return "taylor";
    }
    return "?";
}

inline TraceMethod parse_trace_method(const std::string& s) {
    if (s == "exact") return TraceMethod::exact;
    if (s == "hutchinson") return TraceMethod::hutchinson;
    if (s == "taylor") return TraceMethod::taylor;
    fail_usage("unknown trace method '" + s + "' (expected exact|hutchinson|taylor)");
}

struct TraceEstimatorConfig {
    TraceMethod method = TraceMethod::taylor;
    std::int64_t samples = 1;  // N
    double sigma = 0.1;        // taylor noise scale, in normalized input units
    std::uint64_t seed = 0;

    void validate() const {
        if (samples < 1) fail_usage("trace config: N must be >= 1");
        if (method == TraceMethod::taylor && !(sigma > 0.0 && std::isfinite(sigma)))
            fail_usage("trace config: sigma must be finite and positive for the taylor method");
    }
};

struct TraceEstimate {
    double value = 0.0;
    std::vector<double> per_sample;
    TraceMethod method = TraceMethod::taylor;
    std::int64_t samples = 0;
    double sigma = 0.0;
};

constexpr std::int64_t kExactTraceMaxDim = 4096;

// ground truth: sum_d e_d^T H e_d via D Hessian-vector products
inline double exact_trace(const ScalarFn& f, const Tensor& x) {
    const std::int64_t d = x.numel();
    if (d > kExactTraceMaxDim)
        fail_usage("exact_trace: dimension " + std::to_string(d) + " exceeds guard " +
                   std::to_string(kExactTraceMaxDim) + "; use a stochastic estimator");
    double total = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        Tensor e = Tensor::zeros(x.shape());
        e[i] = 1.0;
        total += hvp(f, x, e)[i];
    }
    return total;
}

// differentiable variant for toy dimensions (graph stays live through both
// backward passes per direction)
inline Var exact_trace_var(const ScalarFn& f, const Var& x_leaf) {
    const std::int64_t d = x_leaf.numel();
    if (d > kExactTraceMaxDim) fail_usage("exact_trace: dimension exceeds guard");
    Var out = f(x_leaf);
    Var g = grad1(out, x_leaf, /*create_graph=*/true);
    Var total = Var::constant(Tensor::scalar(0.0));
    for (std::int64_t i = 0; i < d; ++i) {
        Tensor e = Tensor::zeros(x_leaf.shape());
        e[i] = 1.0;
        Var gi = sum(mul(g, Var::constant(e)));
        Var hcol = grad1(gi, x_leaf, /*create_graph=*/true);
        Var ei = Var::constant(std::move(e));
        total = add(total, sum(mul(hcol, ei)));
    }
    return total;
}

// One shared unit-normal draw stream per (seed, sample index). Hutchinson
// uses these directly; Taylor scales them by sigma. Sharing the stream is
// what makes the per-sample difference between the two estimators equal the
// pure gradient term.
inline Tensor trace_noise_unit(const Shape& shape, std::uint64_t seed, std::int64_t sample) {
    Rng r = Rng(seed).derive("trace-noise", static_cast<std::uint64_t>(sample));
    return r.gaussian_tensor(shape);
}

inline TraceEstimate hutchinson_trace(const ScalarFn& f, const Tensor& x, const TraceEstimatorConfig& cfg) {
    cfg.validate();
    TraceEstimate est;
    est.method = TraceMethod::hutchinson;
    est.samples = cfg.samples;
    est.sigma = 0.0;
    est.per_sample.reserve(static_cast<std::size_t>(cfg.samples));
    for (std::int64_t i = 0; i < cfg.samples; ++i) {
        Tensor v = trace_noise_unit(x.shape(), cfg.seed, i);
        est.per_sample.push_back(v.dot(hvp(f, x, v)));
    }
    double s = 0.0;
    for (double v : est.per_sample) s += v;
    est.value = s / static_cast<double>(cfg.samples);
    return est;
}

// injected directions instead of fresh noise (deterministic tests)
inline TraceEstimate hutchinson_trace_with(const ScalarFn& f, const Tensor& x, const std::vector<Tensor>& dirs) {
    TraceEstimate est;
    est.method = TraceMethod::hutchinson;
    est.samples = static_cast<std::int64_t>(dirs.size());
    for (const Tensor& v : dirs) est.per_sample.push_back(v.dot(hvp(f, x, v)));
    double s = 0.0;
    for (double v : est.per_sample) s += v;
    est.value = s / static_cast<double>(est.samples);
    return est;
}

inline TraceEstimate taylor_trace(const ScalarFn& f, const Tensor& x, const TraceEstimatorConfig& cfg) {
    TraceEstimatorConfig c = cfg;
    c.method = TraceMethod::taylor;
    c.validate();
    TraceEstimate est;
    est.method = TraceMethod::taylor;
    est.samples = c.samples;
    est.sigma = c.sigma;
    NoGradGuard guard;  // forward passes only
    const double f0 = f(Var::constant(x)).item();
    const double scale = 2.0 / (c.sigma * c.sigma);
    est.per_sample.reserve(static_cast<std::size_t>(c.samples));
    for (std::int64_t i = 0; i < c.samples; ++i) {
        Tensor v = trace_noise_unit(x.shape(), c.seed, i);
        Tensor xp = x;
        xp.add_(v, c.sigma);
        est.per_sample.push_back(scale * (f(Var::constant(xp)).item() - f0));
    }
    double s = 0.0;
    for (double v : est.per_sample) s += v;
    est.value = s / static_cast<double>(c.samples);
    return est;
}

inline TraceEstimate estimate_trace(const ScalarFn& f, const Tensor& x, const TraceEstimatorConfig& cfg) {
    switch (cfg.method) {
        case TraceMethod::exact: {
            TraceEstimate est;
            est.method = TraceMethod::exact;
            est.samples = 1;
            est.value = exact_trace(f, x);
            est.per_sample = {est.value};
            return est;
        }
        case TraceMethod::hutchinson: return hutchinson_trace(f, x, cfg);
        case TraceMethod::taylor: return taylor_trace(f, x, cfg);
    }
    fail_usage("bad trace method");
}

// ---------------------------------------------------------------------------
// bias/variance measurement harness
// ---------------------------------------------------------------------------

struct VarianceRow {
    double sigma = 0.0;
    double var_tte = 0.0;
    double var_hutchinson = 0.0;
    double bound = 0.0;  // 4 sigma^-2 ||grad f||^2 / N
    std::int64_t n_trials = 0;
    bool ci_warning = false;  // trials < 30
};

inline double sample_variance(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= n;
    double s = 0.0;
    for (double v : xs) s += (v - mean) * (v - mean);
    return s / (n - 1.0);
}

// Empirical Var(TTE) and Var(Hutchinson) per sigma, against the analytic
// excess bound. Each trial is one N-sample estimate with fresh noise.
inline std::vector<VarianceRow> estimator_variance_report(const ScalarFn& f, const Tensor& x,
                                                          const std::vector<double>& sigma_grid, std::int64_t n,
                                                          std::int64_t trials, std::uint64_t seed) {
    if (trials < 2) fail_usage("variance report: need at least 2 trials");
    Var xv = Var::leaf(x);
    double grad_sq = grad1(f(xv), xv).value().squared_norm();

    std::vector<VarianceRow> rows;
    Rng root(seed);
    for (std::size_t si = 0; si < sigma_grid.size(); ++si) {
        double sigma = sigma_grid[si];
        if (!(sigma > 0.0)) fail_usage("variance report: sigma grid entries must be positive");
        std::vector<double> tte(static_cast<std::size_t>(trials)), hutch(static_cast<std::size_t>(trials));
        for (std::int64_t t = 0; t < trials; ++t) {
            TraceEstimatorConfig cfg;
            cfg.samples = n;
            cfg.sigma = sigma;
            cfg.seed = root.derive("trial", static_cast<std::uint64_t>(si * 1000003 + t)).next_u64();
            cfg.method = TraceMethod::taylor;
            tte[static_cast<std::size_t>(t)] = taylor_trace(f, x, cfg).value;
            cfg.method = TraceMethod::hutchinson;
            hutch[static_cast<std::size_t>(t)] = hutchinson_trace(f, x, cfg).value;
        }
        VarianceRow row;
        row.sigma = sigma;
        row.var_tte = sample_variance(tte);
        row.var_hutchinson = sample_variance(hutch);
        row.bound = 4.0 / (sigma * sigma) * grad_sq / static_cast<double>(n);
        row.n_trials = trials;
        row.ci_warning = trials < 30;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace scoregrad
