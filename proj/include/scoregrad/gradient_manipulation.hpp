#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "scoregrad/models.hpp"

// Constructive demonstrations that input-gradients are not pinned down by
// the discriminative behaviour: adding one scalar function g(x) to every
// logit changes logit-gradients arbitrarily while softmax probabilities,
// losses and loss-gradients stay fixed; adding a high-frequency low-amplitude
// sine to the loss moves loss-gradients while barely moving loss values.

namespace scoregrad {

// additive scalar function g: [B, input...] -> [B]
struct ShimFunction {
    std::string kind;
    std::function<Var(const Var&)> g;

    static ShimFunction constant(double c) {
        ShimFunction s;
        s.kind = "constant";
        s.g = [c](const Var& x) { return Var::constant(Tensor::full({x.shape()[0]}, c)); };
        return s;
    }

    static ShimFunction linear(Tensor w) {
        ShimFunction s;
        s.kind = "linear";
        auto wp = std::make_shared<Tensor>(std::move(w));
        s.g = [wp](const Var& x) {
            std::int64_t b = x.shape()[0];
            std::int64_t d = x.numel() / b;
            if (wp->numel() != d) fail_data("linear shim: weight dimension mismatch");
            Var flat = reshape(x, {b, d});
            return reshape(matmul(flat, Var::constant(wp->reshaped({d, 1}))), {b});
        };
        return s;
    }

    // small random-init softplus MLP; out_scale controls how strongly its
    // gradient field competes with the base logit-gradients
    static ShimFunction random_mlp(const Shape& input_shape, double out_scale, const Rng& seed_rng,
                                   std::int64_t hidden = 64, double beta = 10.0) {
        ShimFunction s;
        s.kind = "mlp";
        std::int64_t d = shape_numel(input_shape);
        Rng rng = seed_rng.derive("shim-mlp");
        auto w1 = std::make_shared<Tensor>(rng.derive("w1").gaussian_tensor({hidden, d}, std::sqrt(2.0 / d)));
        auto b1 = std::make_shared<Tensor>(rng.derive("b1").gaussian_tensor({hidden}, 0.1));
        auto w2 = std::make_shared<Tensor>(
            rng.derive("w2").gaussian_tensor({1, hidden}, out_scale * std::sqrt(2.0 / hidden)));
        auto b2 = std::make_shared<Tensor>(Tensor::zeros({1}));
        s.g = [w1, b1, w2, b2, beta](const Var& x) {
            std::int64_t b = x.shape()[0];
            std::int64_t d_in = x.numel() / b;
            Var flat = reshape(x, {b, d_in});
            Var h = softplus(affine(flat, Var::constant(*w1), Var::constant(*b1)), beta);
            return reshape(affine(h, Var::constant(*w2), Var::constant(*b2)), {b});
        };
        return s;
    }
};

// view of the base model with f~_i(x) = f_i(x) + g(x) for every class i
inline LogitSource shim_logits(const LogitSource& base, const ShimFunction& shim) {
    LogitSource out;
    out.num_classes = base.num_classes;
    out.input_shape = base.input_shape;
    auto fn = base.fn;
    auto g = shim.g;
    std::int64_t classes = base.num_classes;
    out.fn = [fn, g, classes](const Var& x) {
        Var logits = fn(x);
        return add(logits, repeat_per_row(g(x), {classes}));
    };
    return out;
}

struct BatchGradients {
    std::vector<double> losses;  // per example
    Tensor loss_grads;           // [B, input...]
    Tensor logit_grads;          // [B, input...] for the labeled class
};

inline BatchGradients input_gradients(const LogitSource& src, const Tensor& x,
                                      const std::vector<std::int64_t>& labels) {
    BatchGradients out;
    Var xleaf = Var::leaf(x);
    Var logits = src.fn(xleaf);
    Var ce = cross_entropy_rows(logits, labels);
    out.losses = ce.value().data();
    out.loss_grads = grad1(sum(ce), xleaf).value();
    Var xleaf2 = Var::leaf(x);
    Var sel = take_per_row(src.fn(xleaf2), labels);
    out.logit_grads = grad1(sum(sel), xleaf2).value();
    return out;
}

struct Observation1Report {
    double max_loss_delta = 0.0;        // max |l~ - l|
    double max_loss_grad_inf = 0.0;     // max ||grad l~ - grad l||_inf
    double mean_logit_grad_cosine = 1.0;
    std::int64_t n_examples = 0;
    std::string shim_kind;

    bool invariances_hold(double eps = 1e-8) const { return max_loss_delta < eps && max_loss_grad_inf < eps; }
};

inline Observation1Report verify_observation1(const LogitSource& base, const ShimFunction& shim, const Tensor& x,
                                              const std::vector<std::int64_t>& labels) {
    LogitSource shimmed = shim_logits(base, shim);
    BatchGradients a = input_gradients(base, x, labels);
    BatchGradients b = input_gradients(shimmed, x, labels);

    Observation1Report rep;
    rep.shim_kind = shim.kind;
    const std::int64_t n = x.extent(0);
    rep.n_examples = n;
    const std::int64_t row = x.numel() / n;
    double cos_sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        rep.max_loss_delta = std::max(
            rep.max_loss_delta,
            std::abs(a.losses[static_cast<std::size_t>(i)] - b.losses[static_cast<std::size_t>(i)]));
        double ginf = 0.0, dot = 0.0, na = 0.0, nb = 0.0;
        for (std::int64_t k = 0; k < row; ++k) {
            double da = a.loss_grads[i * row + k] - b.loss_grads[i * row + k];
            ginf = std::max(ginf, std::abs(da));
            double ga = a.logit_grads[i * row + k], gb = b.logit_grads[i * row + k];
            dot += ga * gb;
            na += ga * ga;
            nb += gb * gb;
        }
        rep.max_loss_grad_inf = std::max(rep.max_loss_grad_inf, ginf);
        cos_sum += (na > 0 && nb > 0) ? dot / std::sqrt(na * nb) : 1.0;
    }
    rep.mean_logit_grad_cosine = cos_sum / static_cast<double>(n);
    return rep;
}

// ---------------------------------------------------------------------------
// sine loss perturbation
// ---------------------------------------------------------------------------

// g(x) = (eps / D) sum_d sin(m x_d), which keeps |g| <= eps pointwise while
// the loss-gradient can move by up to m*eps in L1 (within the m*eps*D bound).
struct SinePerturbation {
    double epsilon = 0.01;
    double frequency = 1000.0;

    void validate() const {
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail_usage("sine perturbation: epsilon must be positive");
        if (!(frequency > 0.0) || !std::isfinite(frequency)) fail_usage("sine perturbation: m must be positive");
    }

    Var apply(const Var& x) const {  // [B, input...] -> [B]
        std::int64_t b = x.shape()[0];
        std::int64_t d = x.numel() / b;
        Var flat = reshape(x, {b, d});
        return mul_scalar(sum_per_row(sin(mul_scalar(flat, frequency))), epsilon / static_cast<double>(d));
    }
};

struct SineReport {
    double epsilon = 0.0;
    double frequency = 0.0;
    std::int64_t dims = 0;
    double max_loss_delta = 0.0;
    double max_grad_l1 = 0.0;
    double loss_bound = 0.0;     // eps
    double grad_bound = 0.0;     // m * eps * D
    double attained_fraction = 0.0;
    std::int64_t n_examples = 0;

    bool within_bounds() const { return max_loss_delta <= loss_bound && max_grad_l1 <= grad_bound; }
};

inline SineReport sine_perturb_report(const LogitSource& src, const SinePerturbation& pert, const Tensor& x,
                                      const std::vector<std::int64_t>& labels) {
    pert.validate();
    const std::int64_t n = x.extent(0);
    const std::int64_t row = x.numel() / n;

    Var xleaf = Var::leaf(x);
    Var ce = cross_entropy_rows(src.fn(xleaf), labels);
    Tensor base_grads = grad1(sum(ce), xleaf).value();

    Var xleaf2 = Var::leaf(x);
    Var ce2 = add(cross_entropy_rows(src.fn(xleaf2), labels), pert.apply(xleaf2));
    Tensor pert_grads = grad1(sum(ce2), xleaf2).value();

    SineReport rep;
    rep.epsilon = pert.epsilon;
    rep.frequency = pert.frequency;
    rep.dims = row;
    rep.n_examples = n;
    rep.loss_bound = pert.epsilon;
    rep.grad_bound = pert.frequency * pert.epsilon * static_cast<double>(row);
    const auto& a = ce.value();
    const auto& b = ce2.value();
    for (std::int64_t i = 0; i < n; ++i) {
        rep.max_loss_delta = std::max(rep.max_loss_delta, std::abs(b[i] - a[i]));
        double l1 = 0.0;
        for (std::int64_t k = 0; k < row; ++k) l1 += std::abs(pert_grads[i * row + k] - base_grads[i * row + k]);
        rep.max_grad_l1 = std::max(rep.max_grad_l1, l1);
    }
    rep.attained_fraction = rep.max_grad_l1 / rep.grad_bound;
    return rep;
}

}  // namespace scoregrad
