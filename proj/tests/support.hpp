#pragma once

// Shared test utilities: independent numerical oracles (central differences,
// quadrature-free closed forms) and small helpers. Everything here must stay
// independent of the graph path it is used to check.

#include <cmath>
#include <functional>
#include <vector>

#include "scoregrad/autodiff.hpp"
#include "scoregrad/rng.hpp"
#include "scoregrad/tensor.hpp"

namespace testsupport {

using scoregrad::NoGradGuard;
using scoregrad::Rng;
using scoregrad::ScalarFn;
using scoregrad::Shape;
using scoregrad::Tensor;
using scoregrad::Var;

inline double eval_scalar(const ScalarFn& f, const Tensor& x) {
    NoGradGuard guard;
    return f(Var::constant(x)).item();
}

// central-difference gradient
inline Tensor numeric_grad(const ScalarFn& f, const Tensor& x, double eps = 1e-5) {
    Tensor g = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x, xm = x;
        xp[i] += eps;
        xm[i] -= eps;
        g[i] = (eval_scalar(f, xp) - eval_scalar(f, xm)) / (2.0 * eps);
    }
    return g;
}

// central-difference directional gradient difference: (grad f(x+eps v) - grad f(x-eps v)) / (2 eps)
inline Tensor numeric_hvp(const ScalarFn& f, const Tensor& x, const Tensor& v, double eps = 1e-4) {
    Tensor xp = x, xm = x;
    xp.add_(v, eps);
    xm.add_(v, -eps);
    Tensor gp = Tensor::zeros(x.shape()), gm = Tensor::zeros(x.shape());
    {
        Var lp = Var::leaf(xp);
        gp = scoregrad::grad1(f(lp), lp).value();
        Var lm = Var::leaf(xm);
        gm = scoregrad::grad1(f(lm), lm).value();
    }
    gp.add_(gm, -1.0);
    gp.scale_(1.0 / (2.0 * eps));
    return gp;
}

// second-difference Laplacian: sum_d (f(x+eps e_d) - 2 f(x) + f(x-eps e_d)) / eps^2
inline double numeric_laplacian(const ScalarFn& f, const Tensor& x, double eps = 1e-3) {
    double f0 = eval_scalar(f, x);
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x, xm = x;
        xp[i] += eps;
        xm[i] -= eps;
        acc += (eval_scalar(f, xp) - 2.0 * f0 + eval_scalar(f, xm)) / (eps * eps);
    }
    return acc;
}

inline bool close(double a, double b, double abs_tol, double rel_tol = 0.0) {
    double diff = std::abs(a - b);
    return diff <= abs_tol || diff <= rel_tol * std::max(std::abs(a), std::abs(b));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// max over elements of |a-b| / max(1, |a|, |b|)
inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
        m = std::max(m, std::abs(a[i] - b[i]) / scale);
    }
    return m;
}

// grad vs central differences within max(abs_tol absolute, rel_tol relative)
inline bool grad_matches_fd(const ScalarFn& f, const Tensor& x, double abs_tol = 1e-6, double rel_tol = 1e-4,
                            double eps = 1e-5) {
    Var leaf = Var::leaf(x);
    Tensor g = scoregrad::grad1(f(leaf), leaf).value();
    Tensor fd = numeric_grad(f, x, eps);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
        double diff = std::abs(g[i] - fd[i]);
        if (diff > abs_tol && diff > rel_tol * std::max(std::abs(g[i]), std::abs(fd[i]))) return false;
    }
    return true;
}

// small random softplus MLP as a generic smooth scalar function of x
struct ToyMlp {
    Tensor w1, b1, w2, b2;
    double beta;

    static ToyMlp make(std::int64_t din, std::int64_t hidden, double beta, Rng rng) {
        ToyMlp m;
        m.beta = beta;
        m.w1 = rng.derive("w1").gaussian_tensor({hidden, din}, std::sqrt(2.0 / din));
        m.b1 = rng.derive("b1").gaussian_tensor({hidden}, 0.2);
        m.w2 = rng.derive("w2").gaussian_tensor({1, hidden}, std::sqrt(2.0 / hidden));
        m.b2 = Tensor::zeros({1});
        return m;
    }

    ScalarFn fn() const {
        return [*this](const Var& x) {
            Var flat = scoregrad::reshape(x, {1, x.numel()});
            Var h = scoregrad::softplus(scoregrad::affine(flat, Var::constant(w1), Var::constant(b1)), beta);
            Var out = scoregrad::affine(h, Var::constant(w2), Var::constant(b2));
            return scoregrad::reshape(out, {});
        };
    }
};

}  // namespace testsupport
