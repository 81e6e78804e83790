#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "scoregrad/curve.hpp"
#include "scoregrad/objectives.hpp"
#include "support.hpp"

using namespace scoregrad;
using testsupport::max_abs_diff;

namespace {

// tiny classifier with explicit parameter tensors so tests can bind leaves
// and finite-difference over every scalar
struct ToyClassifier {
    Tensor w1, b1, w2, b2;
    double beta = 6.0;

    static ToyClassifier make(std::int64_t din, std::int64_t hidden, std::int64_t classes, Rng rng) {
        ToyClassifier m;
        m.w1 = rng.derive("w1").gaussian_tensor({hidden, din}, std::sqrt(2.0 / din));
        m.b1 = rng.derive("b1").gaussian_tensor({hidden}, 0.1);
        m.w2 = rng.derive("w2").gaussian_tensor({classes, hidden}, std::sqrt(2.0 / hidden));
        m.b2 = Tensor::zeros({classes});
        return m;
    }

    std::vector<Tensor*> params() { return {&w1, &b1, &w2, &b2}; }

    BatchLogitFn fn_with(const std::vector<Var>& leaves) const {
        double beta_ = beta;
        return [leaves, beta_](const Var& x) {
            std::int64_t b = x.shape()[0];
            Var flat = reshape(x, {b, x.numel() / b});
            Var h = softplus(affine(flat, leaves[0], leaves[1]), beta_);
            return affine(h, leaves[2], leaves[3]);
        };
    }

    std::vector<Var> bind(bool requires_grad) const {
        return {Var::leaf(w1, requires_grad), Var::leaf(b1, requires_grad), Var::leaf(w2, requires_grad),
                Var::leaf(b2, requires_grad)};
    }
};

RegularizerConfig make_cfg(RegMode mode, double lambda, double mu = 0.0, double tau = 1000.0) {
    RegularizerConfig cfg;
    cfg.mode = mode;
    cfg.lambda = lambda;
    cfg.mu = mu;
    cfg.tau = tau;
    cfg.trace.method = TraceMethod::taylor;
    cfg.trace.sigma = 0.1;
    cfg.trace.samples = 2;
    cfg.trace.seed = 99;
    return cfg;
}

std::vector<std::uint64_t> ids(std::int64_t n) {
    std::vector<std::uint64_t> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = static_cast<std::uint64_t>(i);
    return v;
}

}  // namespace

TEST_CASE("total assembly reproduces the regularized-loss arithmetic") {
    // injected parts: ce=0.5, h=2.0, 0.5*|grad|^2=0.5, h^2=4.0
    RegularizerConfig cfg = make_cfg(RegMode::score_matching, 1e-3, 1e-4);
    CHECK(assemble_total(cfg, 0.5, 2.0, 0.5, 4.0) == Catch::Approx(0.5025004).epsilon(1e-12));

    RegularizerConfig anti = make_cfg(RegMode::anti_score_matching, 1e-4);
    CHECK(assemble_total(anti, 1.0, 500.0, 0.0, 0.0) == Catch::Approx(0.95).epsilon(1e-12));
    // clamp applies before assembly; at h=1500 >= tau the term is tau
    CHECK(assemble_total(anti, 1.0, 1000.0, 0.0, 0.0) == Catch::Approx(0.9).epsilon(1e-12));

    RegularizerConfig gn = make_cfg(RegMode::grad_norm, 2.0);
    CHECK(assemble_total(gn, 0.25, 0.0, 12.5, 0.0) == Catch::Approx(25.25).epsilon(1e-12));
}

TEST_CASE("lambda = 0 reduces every mode to plain cross-entropy") {
    ToyClassifier m = ToyClassifier::make(3, 6, 3, Rng(1));
    Tensor x = Rng(2).gaussian_tensor({4, 3});
    std::vector<std::int64_t> y{0, 1, 2, 1};

    auto leaves = m.bind(true);
    LossResult plain = regularized_loss(m.fn_with(leaves), x, y, make_cfg(RegMode::none, 0.0), ids(4));
    for (RegMode mode : {RegMode::score_matching, RegMode::anti_score_matching, RegMode::grad_norm}) {
        auto lv = m.bind(true);
        LossResult r = regularized_loss(m.fn_with(lv), x, y, make_cfg(mode, 0.0, 1e-4), ids(4));
        CHECK(r.breakdown.total == plain.breakdown.total);
        CHECK(r.breakdown.hessian_trace == 0.0);
        CHECK(r.breakdown.grad_norm == 0.0);
        CHECK(r.breakdown.stability == 0.0);
    }
}

TEST_CASE("grad-norm penalty on a linear logit is exactly lambda * 12.5") {
    // f_0 = w.x with w=(3,4); 0.5 ||grad f_0||^2 = 12.5 at every x
    BatchLogitFn fn = [](const Var& x) {
        std::int64_t b = x.shape()[0];
        Var w = Var::constant(Tensor({2, 2}, {3, 4, 0, 0}));  // rows: class 0 = (3,4), class 1 = 0
        return matmul(reshape(x, {b, 2}), transpose(w));
    };
    Tensor x = Rng(3).gaussian_tensor({5, 2});
    std::vector<std::int64_t> y(5, 0);
    RegularizerConfig cfg = make_cfg(RegMode::grad_norm, 1e-3);
    LossResult r = regularized_loss(fn, x, y, cfg, ids(5));
    CHECK(r.breakdown.grad_norm == Catch::Approx(12.5).epsilon(1e-12));
    CHECK(r.breakdown.total ==
          Catch::Approx(r.breakdown.cross_entropy + 1e-3 * 12.5).epsilon(1e-12));
}

TEST_CASE("breakdown reconstructs the total within 1e-10 in every mode") {
    ToyClassifier m = ToyClassifier::make(2, 8, 2, Rng(7));
    Tensor x = Rng(8).gaussian_tensor({6, 2});
    std::vector<std::int64_t> y{0, 1, 0, 1, 1, 0};
    for (RegMode mode :
         {RegMode::none, RegMode::score_matching, RegMode::anti_score_matching, RegMode::grad_norm}) {
        auto lv = m.bind(true);
        RegularizerConfig cfg = make_cfg(mode, 3e-3, 1e-4);
        LossResult r = regularized_loss(m.fn_with(lv), x, y, cfg, ids(6));
        double rebuilt = assemble_total(cfg, r.breakdown.cross_entropy, r.breakdown.hessian_trace,
                                        r.breakdown.grad_norm, r.breakdown.stability);
        CHECK(std::abs(rebuilt - r.breakdown.total) < 1e-10);
        // inactive parts are exactly zero
        if (mode == RegMode::none) {
            CHECK(r.breakdown.hessian_trace == 0.0);
            CHECK(r.breakdown.grad_norm == 0.0);
            CHECK(r.breakdown.stability == 0.0);
        }
        if (mode == RegMode::grad_norm) {
            CHECK(r.breakdown.hessian_trace == 0.0);
            CHECK(r.breakdown.stability == 0.0);
        }
        if (mode == RegMode::anti_score_matching) {
            CHECK(r.breakdown.grad_norm == 0.0);
            CHECK(r.breakdown.stability == 0.0);
        }
    }
}

TEST_CASE("anti-score-matching clamp zeroes the gradient beyond tau") {
    // logits: f_0 = w (x1^2 + x2^2), f_1 = 0. Hessian trace of f_0 is 4w.
    auto fn_of = [](const Var& w) {
        return [w](const Var& x) {
            std::int64_t b = x.shape()[0];
            Var sq = sum_per_row(square(reshape(x, {b, 2})));
            Var f0 = mul(broadcast_scalar(w, {b}), sq);
            auto idx0 = scoregrad::detail::iota_map(b, [](std::int64_t i) { return 2 * i; });
            return scatter_add(f0, idx0, {b, 2});
        };
    };
    Tensor x = Rng(4).gaussian_tensor({3, 2});
    std::vector<std::int64_t> y(3, 0);

    RegularizerConfig cfg = make_cfg(RegMode::anti_score_matching, 1e-4);
    cfg.tau = 1000.0;
    cfg.trace.method = TraceMethod::exact;

    // w = 300: h = 1200 >= tau -> clamp active, dtotal/dw == d(ce)/dw
    {
        Var w = Var::leaf(Tensor::scalar(300.0));
        LossResult r = regularized_loss(fn_of(w), x, y, cfg, ids(3));
        CHECK(r.breakdown.hessian_trace == Catch::Approx(1000.0).epsilon(1e-9));
        double dtotal = grad1(r.total, w).value()[0];

        Var w2 = Var::leaf(Tensor::scalar(300.0));
        RegularizerConfig plain = make_cfg(RegMode::none, 0.0);
        LossResult ce_only = regularized_loss(fn_of(w2), x, y, plain, ids(3));
        double dce = grad1(ce_only.total, w2).value()[0];
        CHECK(dtotal == Catch::Approx(dce).margin(1e-9));
    }
    // w = 100: h = 400 < tau -> clamp inactive, gradient picks up -lambda dh/dw
    {
        Var w = Var::leaf(Tensor::scalar(100.0));
        LossResult r = regularized_loss(fn_of(w), x, y, cfg, ids(3));
        CHECK(r.breakdown.hessian_trace == Catch::Approx(400.0).epsilon(1e-9));
        double dtotal = grad1(r.total, w).value()[0];

        Var w2 = Var::leaf(Tensor::scalar(100.0));
        RegularizerConfig plain = make_cfg(RegMode::none, 0.0);
        LossResult ce_only = regularized_loss(fn_of(w2), x, y, plain, ids(3));
        double dce = grad1(ce_only.total, w2).value()[0];
        // dh/dw = 4, so the regularizer contributes -lambda * 4
        CHECK(dtotal - dce == Catch::Approx(-1e-4 * 4.0).margin(1e-9));
    }
}

TEST_CASE("single-Gaussian oracle: population objective is -D/2") {
    // model score matches a standard normal: f_0(x) = -0.5 ||x||^2 on data
    // from that normal gives E[trace + 0.5 |grad|^2] = -D + D/2 = -1 for D=2
    BatchLogitFn fn = [](const Var& x) {
        std::int64_t b = x.shape()[0];
        Var f0 = mul_scalar(sum_per_row(square(reshape(x, {b, 2}))), -0.5);
        auto idx0 = scoregrad::detail::iota_map(b, [](std::int64_t i) { return 2 * i; });
        return scatter_add(f0, idx0, {b, 2});
    };
    const std::int64_t n = 20000;
    Rng rng(2718);
    Tensor x = rng.gaussian_tensor({n, 2});
    std::vector<std::int64_t> y(static_cast<std::size_t>(n), 0);
    double value = score_matching_objective_exact(fn, x, y);
    // per-example variance is Var(0.5 chi^2_2) = 1, so SE = 1/sqrt(n)
    double se = 1.0 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(value - (-1.0)) < 4.0 * se);
}

TEST_CASE("constant logits give a zero exact objective") {
    BatchLogitFn fn = [](const Var& x) {
        std::int64_t b = x.shape()[0];
        Var zero = mul_scalar(sum_per_row(reshape(x, {b, x.numel() / b})), 0.0);
        auto idx0 = scoregrad::detail::iota_map(b, [](std::int64_t i) { return 2 * i; });
        return add_scalar(scatter_add(zero, idx0, {b, 2}), 3.0);
    };
    Tensor x = Rng(5).gaussian_tensor({8, 2});
    std::vector<std::int64_t> y(8, 0);
    CHECK(score_matching_objective_exact(fn, x, y) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("taylor and exact trace paths agree within Monte-Carlo error inside the loss") {
    ToyClassifier m = ToyClassifier::make(2, 10, 2, Rng(21));
    Tensor x = Rng(22).gaussian_tensor({64, 2});
    std::vector<std::int64_t> y(64);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::int64_t>(i % 2);

    RegularizerConfig taylor_cfg = make_cfg(RegMode::score_matching, 1e-3, 1e-4);
    taylor_cfg.trace.samples = 8;
    taylor_cfg.trace.sigma = 0.05;
    auto lv1 = m.bind(true);
    LossResult rt = regularized_loss(m.fn_with(lv1), x, y, taylor_cfg, ids(64));

    RegularizerConfig exact_cfg = taylor_cfg;
    exact_cfg.trace.method = TraceMethod::exact;
    auto lv2 = m.bind(true);
    LossResult re = regularized_loss(m.fn_with(lv2), x, y, exact_cfg, ids(64));

    // standard error of the batch-mean TTE from its per-example spread
    std::vector<double> diffs;
    for (std::size_t i = 0; i < rt.per_example_h.size(); ++i)
        diffs.push_back(rt.per_example_h[i] - re.per_example_h[i]);
    auto [mean_diff, se] = mean_and_se(diffs);
    CHECK(std::abs(mean_diff) <= 3.0 * se + 1e-12);
    CHECK(std::abs(rt.breakdown.hessian_trace - re.breakdown.hessian_trace) <= 3.0 * se + 1e-12);
}

TEST_CASE("stability term bounds lambda (h + mu h^2) below by -lambda/(4 mu)") {
    const double lambda = 1e-3, mu = 1e-4;
    const double floor = -lambda / (4.0 * mu);
    CHECK(floor == Catch::Approx(-2.5).epsilon(1e-12));
    // the minimizer h* = -1/(2 mu) attains the floor
    double h_star = -1.0 / (2.0 * mu);
    CHECK(lambda * (h_star + mu * h_star * h_star) == Catch::Approx(floor).epsilon(1e-12));
    Rng rng(31);
    for (int i = 0; i < 1000; ++i) {
        double h = rng.uniform(-2e4, 2e4);
        CHECK(lambda * (h + mu * h * h) >= floor - 1e-9);
    }
}

TEST_CASE("objective gradients match finite differences in all four modes") {
    ToyClassifier m = ToyClassifier::make(2, 4, 2, Rng(41));  // 8+4+8+2 = 22 params... widen below
    m = ToyClassifier::make(2, 8, 2, Rng(41));                // 16+8+16+2 = 42 parameters
    Tensor x = Rng(42).gaussian_tensor({4, 2});
    std::vector<std::int64_t> y{0, 1, 1, 0};

    for (RegMode mode :
         {RegMode::none, RegMode::score_matching, RegMode::anti_score_matching, RegMode::grad_norm}) {
        INFO("mode " << reg_mode_name(mode));
        RegularizerConfig cfg = make_cfg(mode, 0.05, 1e-3, 5.0);
        cfg.trace.samples = 2;
        cfg.trace.sigma = 0.1;

        auto value_at = [&](const ToyClassifier& model) {
            auto lv = model.bind(false);
            return regularized_loss(model.fn_with(lv), x, y, cfg, ids(4)).breakdown.total;
        };

        auto leaves = m.bind(true);
        LossResult r = regularized_loss(m.fn_with(leaves), x, y, cfg, ids(4));
        std::vector<Var> grads = grad(r.total, leaves);

        ToyClassifier probe = m;
        auto tensors = probe.params();
        const double eps = 1e-5;
        for (std::size_t p = 0; p < tensors.size(); ++p) {
            for (std::int64_t i = 0; i < tensors[p]->numel(); ++i) {
                double saved = (*tensors[p])[i];
                (*tensors[p])[i] = saved + eps;
                double plus = value_at(probe);
                (*tensors[p])[i] = saved - eps;
                double minus = value_at(probe);
                (*tensors[p])[i] = saved;
                double fd = (plus - minus) / (2 * eps);
                double an = grads[p].value()[i];
                INFO("param block " << p << " index " << i);
                REQUIRE(std::abs(an - fd) <= 1e-5 * std::max({1.0, std::abs(an), std::abs(fd)}));
            }
        }
    }
}

TEST_CASE("non-finite Hessian trace names the offending example") {
    // class-0 logit explodes for the second example once noise is added
    BatchLogitFn fn = [](const Var& x) {
        std::int64_t b = x.shape()[0];
        Var s = sum_per_row(square(reshape(x, {b, 1})));
        Var f0 = exp(mul_scalar(s, 400.0));
        auto idx0 = scoregrad::detail::iota_map(b, [](std::int64_t i) { return 2 * i; });
        return scatter_add(f0, idx0, {b, 2});
    };
    Tensor x = Tensor({2, 1}, {0.01, 1.5});
    std::vector<std::int64_t> y{0, 0};
    RegularizerConfig cfg = make_cfg(RegMode::score_matching, 1e-3, 1e-4);
    try {
        regularized_loss(fn, x, y, cfg, ids(2));
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
        CHECK(std::string(e.what()).find("example 1") != std::string::npos);
    }
}

TEST_CASE("regularizer config invariants") {
    RegularizerConfig cfg;
    cfg.mode = RegMode::anti_score_matching;
    cfg.lambda = 1e-4;
    cfg.tau = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.tau = 100.0;
    CHECK_NOTHROW(cfg.validate());

    cfg.mode = RegMode::score_matching;
    cfg.mu = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.mu = 0.0;
    CHECK_NOTHROW(cfg.validate());

    cfg.lambda = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}
