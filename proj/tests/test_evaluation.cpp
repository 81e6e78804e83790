#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "scoregrad/evaluation.hpp"
#include "scoregrad/gradient_manipulation.hpp"
#include "support.hpp"

using namespace scoregrad;

namespace {

// linear logit source: class 0 responds to w, other classes are flat
LogitSource linear_source(Tensor w, std::int64_t classes) {
    LogitSource src;
    src.num_classes = classes;
    src.input_shape = w.shape();
    auto wp = std::make_shared<Tensor>(std::move(w));
    src.fn = [wp, classes](const Var& x) {
        std::int64_t b = x.shape()[0];
        std::int64_t d = x.numel() / b;
        Var f0 = reshape(matmul(reshape(x, {b, d}), Var::constant(wp->reshaped({d, 1}))), {b});
        auto idx0 = scoregrad::detail::iota_map(b, [classes](std::int64_t i) { return classes * i; });
        return scatter_add(f0, idx0, {b, classes});
    };
    return src;
}

// quadratic bowl around mu for class 0
LogitSource bowl_source(Tensor mu) {
    LogitSource src;
    src.num_classes = 2;
    src.input_shape = mu.shape();
    auto mp = std::make_shared<Tensor>(std::move(mu));
    src.fn = [mp](const Var& x) {
        std::int64_t b = x.shape()[0];
        std::int64_t d = x.numel() / b;
        auto bcast = scoregrad::detail::iota_map(b * d, [d](std::int64_t j) { return j % d; });
        Var diff = sub(reshape(x, {b, d}), gather(Var::constant(*mp), bcast, {b, d}));
        Var f0 = mul_scalar(sum_per_row(square(diff)), -0.5);
        auto idx0 = scoregrad::detail::iota_map(b, [](std::int64_t i) { return 2 * i; });
        return scatter_add(f0, idx0, {b, 2});
    };
    return src;
}

}  // namespace

TEST_CASE("density profile: zero noise row is exactly zero and one") {
    LogitSource src = linear_source(Tensor::from({3, 4}), 2);
    Rng rng(5);
    Tensor x = rng.gaussian_tensor({20, 2});
    std::vector<std::int64_t> y(20, 0);
    DensityProfileConfig cfg;
    cfg.noise_grid = {0.0, 0.1};
    cfg.draws_per_sigma = 8;
    DensityProfile prof = density_ratio_profile(src, x, y, cfg);
    CHECK(prof.log_ratio.points[0].value == 0.0);
    CHECK(prof.log_ratio.points[0].spread == 0.0);
    CHECK(prof.ratio.points[0].value == 1.0);
}

TEST_CASE("density profile on a linear logit follows the Gaussian moment oracle") {
    // log-ratio = w . eta: mean 0; E[exp(w.eta)] = exp(sigma^2 |w|^2 / 2)
    LogitSource src = linear_source(Tensor::from({3, 4}), 2);
    Rng rng(6);
    Tensor x = rng.gaussian_tensor({50, 2});
    std::vector<std::int64_t> y(50, 0);
    DensityProfileConfig cfg;
    cfg.noise_grid = {0.0, 0.1};
    cfg.draws_per_sigma = 600;  // 30000 deltas
    cfg.seed = 17;
    DensityProfile prof = density_ratio_profile(src, x, y, cfg);

    const auto& row = prof.log_ratio.points[1];
    CHECK(std::abs(row.value) < 4.0 * row.spread);

    const auto& mr = prof.mean_ratio.points[1];
    double s = 0.1 * 5.0;  // sigma ||w||
    double expect = std::exp(0.5 * s * s);
    CHECK(std::abs(mr.value - expect) < 4.0 * mr.spread + 1e-12);
}

TEST_CASE("density profile is unchanged by a constant logit shim") {
    Dataset ds = make_blobs_dataset(30, 7);
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 20;
    tc.schedule = LrSchedule::parse("0:0.1");
    tc.seed = 8;
    ClassifierModel model;
    train(tc, ds, model);
    LogitSource base = model_source(model);
    LogitSource shimmed = shim_logits(base, ShimFunction::constant(11.0));

    DensityProfileConfig cfg;
    cfg.noise_grid = {0.0, 0.05, 0.2};
    cfg.draws_per_sigma = 16;
    cfg.seed = 3;
    DensityProfile a = density_ratio_profile(base, ds.test_x, ds.test_y, cfg);
    DensityProfile b = density_ratio_profile(shimmed, ds.test_x, ds.test_y, cfg);
    for (std::size_t i = 0; i < a.log_ratio.points.size(); ++i) {
        // the shift cancels inside the difference up to float rounding
        CHECK(std::abs(a.log_ratio.points[i].value - b.log_ratio.points[i].value) < 1e-12);
        CHECK(std::abs(a.log_ratio.points[i].spread - b.log_ratio.points[i].spread) < 1e-12);
    }
}

TEST_CASE("density profile validates its grid") {
    LogitSource src = linear_source(Tensor::from({1, 1}), 2);
    DensityProfileConfig cfg;
    cfg.noise_grid = {0.1, 0.2};
    CHECK_THROWS_AS(density_ratio_profile(src, Tensor::zeros({2, 2}), {0, 0}, cfg), Error);
    cfg.noise_grid = {0.0, 0.2, 0.1};
    CHECK_THROWS_AS(density_ratio_profile(src, Tensor::zeros({2, 2}), {0, 0}, cfg), Error);
}

TEST_CASE("gradient ascent recovers a quadratic mode to 1e-6") {
    LogitSource src = bowl_source(Tensor::from({1, 2}));
    SamplerConfig cfg;
    cfg.steps = 1000;
    cfg.step_size = 0.1;
    cfg.clip_to_range = false;
    Tensor inits = Rng(9).gaussian_tensor({6, 2}, 2.0);
    SampleRun run = sample_modes(src, cfg, std::vector<std::int64_t>(6, 0), inits);
    for (std::int64_t i = 0; i < 6; ++i) {
        CHECK_FALSE(run.aborted[static_cast<std::size_t>(i)]);
        CHECK(std::abs(run.samples[i * 2 + 0] - 1.0) < 1e-6);
        CHECK(std::abs(run.samples[i * 2 + 1] - 2.0) < 1e-6);
    }
}

TEST_CASE("pure-ascent trajectories never decrease") {
    Dataset ds = make_blobs_dataset(20, 31);
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 20;
    tc.schedule = LrSchedule::parse("0:0.1");
    tc.seed = 12;
    ClassifierModel model;
    train(tc, ds, model);
    LogitSource src = model_source(model);

    SamplerConfig cfg;
    cfg.steps = 60;
    cfg.step_size = 0.2;
    cfg.clip_to_range = true;
    cfg.clip_lo = {-4.0};
    cfg.clip_hi = {4.0};
    Tensor inits = Rng(13).gaussian_tensor({8, 2});
    SampleRun run = sample_modes(src, cfg, std::vector<std::int64_t>(8, 1), inits);
    for (const auto& traj : run.trajectories) {
        for (std::size_t t = 1; t < traj.size(); ++t) CHECK(traj[t] >= traj[t - 1] - 1e-12);
    }
}

TEST_CASE("unbounded linear ascent stays inside the clip range") {
    LogitSource src = linear_source(Tensor::from({1, 0}), 2);
    SamplerConfig cfg;
    cfg.steps = 200;
    cfg.step_size = 0.5;
    cfg.clip_to_range = true;
    cfg.clip_lo = {-1.0};
    cfg.clip_hi = {1.0};
    Tensor inits = Tensor({2, 2}, {0.0, 0.0, -0.5, 0.3});
    SampleRun run = sample_modes(src, cfg, {0, 0}, inits);
    for (std::int64_t i = 0; i < run.samples.numel(); ++i) {
        CHECK(run.samples[i] <= 1.0);
        CHECK(run.samples[i] >= -1.0);
    }
    // the driven coordinate saturates at the upper bound
    CHECK(run.samples[0] == 1.0);
    CHECK(run.samples[2] == 1.0);
}

TEST_CASE("langevin mode adds noise and keeps going") {
    LogitSource src = bowl_source(Tensor::from({0, 0}));
    SamplerConfig cfg;
    cfg.steps = 50;
    cfg.step_size = 0.05;
    cfg.langevin_scale = 0.5;
    cfg.clip_to_range = false;
    cfg.seed = 21;
    Tensor inits = Rng(22).gaussian_tensor({4, 2}, 2.0);
    SampleRun run = sample_modes(src, cfg, std::vector<std::int64_t>(4, 0), inits);
    for (const auto& traj : run.trajectories) CHECK(traj.size() == 51);
    // stationary spread keeps samples near but not exactly at the mode
    double spread = 0.0;
    for (std::int64_t i = 0; i < 8; ++i) spread += std::abs(run.samples[i]);
    CHECK(spread > 1e-4);
}

TEST_CASE("gan test equals evaluator accuracy on real data and chance on noise") {
    Dataset ds = make_synthetic_images_dataset(4, 10, 400, 160, 77, 0.08, 1);
    ds.normalize();
    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 50;
    tc.schedule = LrSchedule::parse("0:0.05");
    tc.arch = ArchPreset::conv_eval;
    tc.seed = 31;
    ClassifierModel evaluator;
    train(tc, ds, evaluator);

    double acc = evaluate_accuracy(evaluator, ds.test_x, ds.test_y);
    CHECK(gan_test(evaluator, ds.test_x, ds.test_y) == acc);

    // uniform noise in the normalized input range classifies at chance level
    const std::int64_t n = 400;
    Rng rng(32);
    Tensor noise = Tensor::zeros({n, 1, 10, 10});
    for (auto& v : noise.data()) v = rng.uniform(ds.normalized_lo(0), ds.normalized_hi(0));
    std::vector<std::int64_t> intended(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) intended[static_cast<std::size_t>(i)] = i % 4;
    double chance = gan_test(evaluator, noise, intended);
    double se = binomial_se(0.25, n);
    CHECK(std::abs(chance - 0.25) < 5.0 * se);
}

TEST_CASE("pixel perturbation: clean accuracy at fraction zero, row-major fallback on ties") {
    Dataset ds = make_informative_pixels_dataset(4, 4, 300, 120, 3, 41);
    ds.normalize();
    TrainConfig tc;
    tc.epochs = 20;
    tc.batch_size = 50;
    tc.schedule = LrSchedule::parse("0:0.1");
    tc.arch = ArchPreset::mlp_small;
    tc.seed = 42;
    ClassifierModel model;
    train(tc, ds, model);
    REQUIRE(evaluate_accuracy(model, ds.test_x, ds.test_y) >= 0.95);

    PerturbationConfig pc;
    pc.fractions = {0.0, 0.25, 0.5, 1.0};

    SECTION("fraction 0 equals clean accuracy exactly") {
        EvaluationCurve curve = pixel_perturbation(model, model_source(model), ds.test_x, ds.test_y, pc);
        CHECK(curve.points[0].value == evaluate_accuracy(model, ds.test_x, ds.test_y));
    }

    SECTION("an all-constant saliency map falls back to stable row-major order") {
        // zero-weight source has identically zero saliency everywhere
        ClassifierModel zero = ClassifierModel::create(ArchPreset::mlp_small, ds.input_shape, 3, 10.0, Rng(1));
        for (auto& [name, t] : zero.params())
            for (auto& v : t.data()) v = 0.0;
        EvaluationCurve fallback = pixel_perturbation(model, model_source(zero), ds.test_x, ds.test_y, pc);

        // explicit row-major deletion oracle
        const std::int64_t n = ds.test_size(), d = ds.example_dim();
        EvaluationCurve oracle;
        for (double fraction : pc.fractions) {
            Tensor modified = ds.test_x;
            std::int64_t n_del = std::llround(fraction * static_cast<double>(d));
            for (std::int64_t i = 0; i < n; ++i) {
                double m = 0;
                for (std::int64_t k = 0; k < d; ++k) m += ds.test_x[i * d + k];
                m /= static_cast<double>(d);
                for (std::int64_t k = 0; k < n_del; ++k) modified[i * d + k] = m;
            }
            double acc = fraction == 0.0 ? evaluate_accuracy(model, ds.test_x, ds.test_y)
                                         : evaluate_accuracy(model, modified, ds.test_y);
            oracle.points.push_back({fraction, acc, 0, n});
        }
        for (std::size_t i = 0; i < pc.fractions.size(); ++i)
            CHECK(fallback.points[i].value == oracle.points[i].value);
    }

    SECTION("the fraction-1.0 endpoint is saliency-independent") {
        EvaluationCurve own = pixel_perturbation(model, model_source(model), ds.test_x, ds.test_y, pc);
        ClassifierModel other = ClassifierModel::create(ArchPreset::mlp_small, ds.input_shape, 3, 10.0, Rng(7));
        EvaluationCurve alien = pixel_perturbation(model, model_source(other), ds.test_x, ds.test_y, pc);
        CHECK(own.points.back().value == alien.points.back().value);
    }
}

TEST_CASE("ideal saliency keeps accuracy until informative pixels vanish") {
    const std::int64_t side = 4, k = 4;
    Dataset ds = make_informative_pixels_dataset(side, k, 400, 200, 3, 51);
    ds.normalize();

    // linear readout over the informative pixels only: class c weight is +1
    // on pixels whose class bit is 1, -1 otherwise
    const std::int64_t d = side * side;
    Tensor w = Tensor::zeros({3, d});
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t b = 0; b < k; ++b) {
            double sgn = ((c >> b) & 1) ? 1.0 : -1.0;
            w[c * d + ds.informative_pixels[static_cast<std::size_t>(b)]] = sgn;
        }
    LogitSource ideal;
    ideal.num_classes = 3;
    ideal.input_shape = ds.input_shape;
    ideal.fn = [&](const Var& x) {
        std::int64_t b = x.shape()[0];
        return matmul(reshape(x, {b, d}), transpose(Var::constant(w)));
    };

    // the evaluated model is the same linear readout wrapped as a classifier
    // stand-in; accuracy is 1.0 on clean data by construction
    struct Wrap {
        LogitSource src;
    };
    // use the source directly through a tiny adapter model: train a mlp to
    // agree with the construction instead (keeps the ClassifierModel type)
    TrainConfig tc;
    tc.epochs = 25;
    tc.batch_size = 50;
    tc.schedule = LrSchedule::parse("0:0.1");
    tc.arch = ArchPreset::mlp_small;
    tc.seed = 52;
    ClassifierModel model;
    train(tc, ds, model);
    REQUIRE(evaluate_accuracy(model, ds.test_x, ds.test_y) >= 0.99);

    PerturbationConfig pc;
    const double boundary = static_cast<double>(d - k) / static_cast<double>(d);
    pc.fractions = {0.0, 0.25, 0.5, boundary, 1.0};
    EvaluationCurve curve = pixel_perturbation(model, ideal, ds.test_x, ds.test_y, pc);

    for (std::size_t i = 0; i + 1 < curve.points.size(); ++i) CHECK(curve.points[i].value >= 0.99);
    // all informative pixels replaced: the model sees one constant image
    double endpoint = curve.points.back().value;
    double chance_se = binomial_se(1.0 / 3.0, 200);
    CHECK(std::abs(endpoint - 1.0 / 3.0) < 3.0 * chance_se + 0.05);
}

TEST_CASE("saliency export: degenerate maps, linear weights, quantization round-trip") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "scoregrad_saliency";
    fs::remove_all(dir);

    SECTION("zero gradients export an all-zero image") {
        ClassifierModel zero = ClassifierModel::create(ArchPreset::mlp_small, {1, 4, 4}, 3, 10.0, Rng(1));
        for (auto& [name, t] : zero.params())
            for (auto& v : t.data()) v = 0.0;
        Tensor imgs = Rng(2).gaussian_tensor({1, 1, 4, 4});
        auto files = export_saliency(model_source(zero), imgs, {0}, dir.string(), "zero");
        PgmImage img = read_pgm((dir / files[0]).string());
        for (unsigned char px : img.pixels) CHECK(px == 0);
    }

    SECTION("linear model saliency is |w| for every image") {
        Tensor w = Rng(3).gaussian_tensor({1, 2, 2});
        LogitSource lin = linear_source(w, 2);
        lin.input_shape = {1, 2, 2};
        Tensor imgs = Rng(4).gaussian_tensor({3, 1, 2, 2});
        Tensor maps = saliency_maps(lin, imgs, {0, 0, 0});
        for (std::int64_t i = 0; i < 3; ++i)
            for (std::int64_t kpix = 0; kpix < 4; ++kpix)
                CHECK(maps[i * 4 + kpix] == Catch::Approx(std::abs(w[kpix])).margin(1e-12));
    }

    SECTION("pgm plus sidecar reconstructs the raw map within 1/255 of range") {
        ClassifierModel m = ClassifierModel::create(ArchPreset::conv_small, {1, 6, 6}, 3, 10.0, Rng(5));
        Tensor imgs = Rng(6).gaussian_tensor({2, 1, 6, 6});
        Tensor maps = saliency_maps(model_source(m), imgs, {0, 1});
        auto files = export_saliency(model_source(m), imgs, {0, 1}, dir.string(), "sal");

        std::ifstream sidecar(dir / "sal_range.csv");
        std::string header;
        std::getline(sidecar, header);
        CHECK(header == "file,raw_min,raw_max");
        for (std::int64_t i = 0; i < 2; ++i) {
            std::string line;
            REQUIRE(std::getline(sidecar, line));
            auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
            double lo = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
            double hi = std::stod(line.substr(c2 + 1));
            PgmImage img = read_pgm((dir / files[static_cast<std::size_t>(i)]).string());
            double range = hi - lo;
            for (std::int64_t p = 0; p < 36; ++p) {
                double rebuilt = lo + img.pixels[static_cast<std::size_t>(p)] / 255.0 * range;
                CHECK(std::abs(rebuilt - maps[i * 36 + p]) <= range / 255.0 + 1e-12);
            }
        }
    }

    fs::remove_all(dir);
}

TEST_CASE("curve auc integrates the trapezoid") {
    EvaluationCurve c;
    c.points = {{0.0, 1.0, 0, 1}, {0.5, 0.5, 0, 1}, {1.0, 0.0, 0, 1}};
    CHECK(curve_auc(c) == Catch::Approx(0.5));
}
