#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "scoregrad/curve.hpp"
#include "scoregrad/data.hpp"
#include "scoregrad/models.hpp"
#include "scoregrad/pgm.hpp"
#include "scoregrad/trainer.hpp"

namespace scoregrad {

// ---------------------------------------------------------------------------
// density-ratio profiles: mean of f_i(x + eta) - f_i(x) per noise scale
// ---------------------------------------------------------------------------

struct DensityProfileConfig {
    std::vector<double> noise_grid{0.0, 0.05, 0.1, 0.2};  // ascending, starts at 0
    std::int64_t draws_per_sigma = 8;
    std::uint64_t seed = 0;

    void validate() const {
        if (noise_grid.empty() || noise_grid.front() != 0.0)
            fail_usage("density profile: noise grid must start at 0");
        for (std::size_t i = 1; i < noise_grid.size(); ++i)
            if (noise_grid[i] <= noise_grid[i - 1]) fail_usage("density profile: noise grid must be ascending");
        if (draws_per_sigma < 1) fail_usage("density profile: need at least one draw");
    }
};

// Log-domain aggregation is the primary series (exp of per-draw ratios has
// heavy tails); the geometric ratio exp(mean) and the arithmetic mean ratio
// are both emitted alongside it.
struct DensityProfile {
    EvaluationCurve log_ratio;   // mean of f_i(x+eta) - f_i(x)
    EvaluationCurve ratio;       // exp of the mean, delta-method spread
    EvaluationCurve mean_ratio;  // mean of exp(log-ratio)
};

inline DensityProfile density_ratio_profile(const LogitSource& src, const Tensor& x,
                                            const std::vector<std::int64_t>& labels,
                                            const DensityProfileConfig& cfg) {
    cfg.validate();
    const std::int64_t n = x.extent(0);
    const std::int64_t row = x.numel() / n;

    Tensor base = src.logits_value(x);
    const std::int64_t classes = base.extent(1);
    auto select = [&](const Tensor& logits, std::int64_t i) {
        return logits[i * classes + labels[static_cast<std::size_t>(i)]];
    };

    DensityProfile out;
    out.log_ratio.abscissa = "sigma";
    out.ratio.abscissa = "sigma";
    out.mean_ratio.abscissa = "sigma";
    Rng root(cfg.seed);
    for (std::size_t si = 0; si < cfg.noise_grid.size(); ++si) {
        const double sigma = cfg.noise_grid[si];
        std::vector<double> deltas;
        deltas.reserve(static_cast<std::size_t>(n * cfg.draws_per_sigma));
        for (std::int64_t d = 0; d < cfg.draws_per_sigma; ++d) {
            Tensor xp = x;
            if (sigma > 0.0) {
                Rng r = root.derive("draw", static_cast<std::uint64_t>(si * 10007 + d));
                for (auto& v : xp.data()) v += sigma * r.gaussian();
            }
            Tensor pert = src.logits_value(xp);
            for (std::int64_t i = 0; i < n; ++i) deltas.push_back(select(pert, i) - select(base, i));
            if (sigma == 0.0) break;  // identical draws
        }
        auto [mean, se] = mean_and_se(deltas);
        const auto count = static_cast<std::int64_t>(deltas.size());
        out.log_ratio.points.push_back({sigma, mean, se, count});
        out.ratio.points.push_back({sigma, std::exp(mean), std::exp(mean) * se, count});
        std::vector<double> ratios(deltas.size());
        for (std::size_t i = 0; i < deltas.size(); ++i) ratios[i] = std::exp(deltas[i]);
        auto [rmean, rse] = mean_and_se(ratios);
        out.mean_ratio.points.push_back({sigma, rmean, rse, count});
    }
    (void)row;
    return out;
}

// ---------------------------------------------------------------------------
// mode seeking: gradient ascent on f_i (Langevin noise optional)
// ---------------------------------------------------------------------------

enum class SampleInit { uniform_noise, gaussian_noise, dataset };

struct SamplerConfig {
    std::int64_t steps = 500;
    double step_size = 0.05;
    SampleInit init = SampleInit::uniform_noise;
    double langevin_scale = 0.0;  // 0: pure ascent with backtracking
    bool clip_to_range = true;
    std::vector<double> clip_lo{0.0}, clip_hi{1.0};  // per channel
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 1) fail_usage("sampler: steps must be >= 1");
        if (!(step_size > 0.0)) fail_usage("sampler: step size must be positive");
        if (langevin_scale < 0.0) fail_usage("sampler: langevin scale must be >= 0");
    }
};

struct SampleRun {
    Tensor samples;                                // [n, input...], final iterates
    std::vector<std::int64_t> target_classes;      // per sample
    std::vector<std::vector<double>> trajectories; // f_i per step per sample
    std::vector<bool> aborted;                     // non-finite iterate encountered
};

inline SampleRun sample_modes(const LogitSource& src, const SamplerConfig& cfg,
                              const std::vector<std::int64_t>& target_classes, const Tensor& init_points) {
    cfg.validate();
    const std::int64_t n = init_points.extent(0);
    if (static_cast<std::int64_t>(target_classes.size()) != n) fail_data("sampler: class count mismatch");
    const std::int64_t row = init_points.numel() / n;
    const std::int64_t channels =
        src.input_shape.size() == 3 ? src.input_shape[0] : static_cast<std::int64_t>(1);
    const std::int64_t per_channel = row / channels;

    auto clip = [&](Tensor& x) {
        if (!cfg.clip_to_range) return;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ch = 0; ch < channels; ++ch) {
                double lo = cfg.clip_lo[static_cast<std::size_t>(ch % static_cast<std::int64_t>(cfg.clip_lo.size()))];
                double hi = cfg.clip_hi[static_cast<std::size_t>(ch % static_cast<std::int64_t>(cfg.clip_hi.size()))];
                for (std::int64_t k = 0; k < per_channel; ++k) {
                    auto& v = x[(i * channels + ch) * per_channel + k];
                    v = std::clamp(v, lo, hi);
                }
            }
    };

    auto values_of = [&](const Tensor& x) {
        Tensor logits = src.logits_value(x);
        std::vector<double> vals(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i)
            vals[static_cast<std::size_t>(i)] =
                logits[i * src.num_classes + target_classes[static_cast<std::size_t>(i)]];
        return vals;
    };

    SampleRun run;
    run.samples = init_points;
    run.target_classes = target_classes;
    run.aborted.assign(static_cast<std::size_t>(n), false);
    run.trajectories.assign(static_cast<std::size_t>(n), {});
    clip(run.samples);

    std::vector<bool> converged(static_cast<std::size_t>(n), false);
    std::vector<double> current = values_of(run.samples);
    for (std::int64_t i = 0; i < n; ++i) run.trajectories[static_cast<std::size_t>(i)].push_back(current[i]);

    Rng noise_rng = Rng(cfg.seed).derive("langevin");
    const double noise_coeff = std::sqrt(2.0 * cfg.step_size) * cfg.langevin_scale;

    for (std::int64_t t = 0; t < cfg.steps; ++t) {
        // batched ascent direction
        Var xleaf = Var::leaf(run.samples);
        Var sel = take_per_row(src.fn(xleaf), run.target_classes);
        Tensor g = grad1(sum(sel), xleaf).value();

        if (cfg.langevin_scale > 0.0) {
            Tensor next = run.samples;
            for (std::int64_t i = 0; i < n; ++i) {
                if (run.aborted[static_cast<std::size_t>(i)]) continue;
                for (std::int64_t k = 0; k < row; ++k)
                    next[i * row + k] += cfg.step_size * g[i * row + k] + noise_coeff * noise_rng.gaussian();
            }
            clip(next);
            run.samples = next;
            current = values_of(run.samples);
            for (std::int64_t i = 0; i < n; ++i) {
                if (!std::isfinite(current[static_cast<std::size_t>(i)]))
                    run.aborted[static_cast<std::size_t>(i)] = true;
                run.trajectories[static_cast<std::size_t>(i)].push_back(current[static_cast<std::size_t>(i)]);
            }
            continue;
        }

        // pure ascent with per-sample backtracking: each sample moves at most
        // once per outer step, and only to a point that does not decrease f_i
        std::vector<bool> moved(static_cast<std::size_t>(n), false);
        std::vector<double> trial(static_cast<std::size_t>(n), cfg.step_size);
        for (std::int64_t attempt = 0; attempt < 40; ++attempt) {
            Tensor cand = run.samples;
            bool any_pending = false;
            for (std::int64_t i = 0; i < n; ++i) {
                std::size_t si = static_cast<std::size_t>(i);
                if (run.aborted[si] || converged[si] || moved[si]) continue;
                any_pending = true;
                for (std::int64_t k = 0; k < row; ++k) cand[i * row + k] += trial[si] * g[i * row + k];
            }
            if (!any_pending) break;
            clip(cand);
            std::vector<double> cand_vals = values_of(cand);
            for (std::int64_t i = 0; i < n; ++i) {
                std::size_t si = static_cast<std::size_t>(i);
                if (run.aborted[si] || converged[si] || moved[si]) continue;
                if (!std::isfinite(cand_vals[si])) {
                    run.aborted[si] = true;
                    continue;
                }
                if (cand_vals[si] >= current[si]) {
                    for (std::int64_t k = 0; k < row; ++k) run.samples[i * row + k] = cand[i * row + k];
                    current[si] = cand_vals[si];
                    moved[si] = true;
                } else {
                    trial[si] *= 0.5;
                    if (trial[si] < 1e-12 * cfg.step_size) converged[si] = true;
                }
            }
        }
        for (std::int64_t i = 0; i < n; ++i)
            run.trajectories[static_cast<std::size_t>(i)].push_back(current[static_cast<std::size_t>(i)]);
        bool all_done = true;
        for (std::int64_t i = 0; i < n; ++i)
            if (!run.aborted[static_cast<std::size_t>(i)] && !converged[static_cast<std::size_t>(i)]) all_done = false;
        if (all_done) break;
    }
    return run;
}

inline Tensor make_sampler_inits(const SamplerConfig& cfg, const Shape& input_shape, std::int64_t n,
                                 const Dataset* data_for_init) {
    Shape s{n};
    s.insert(s.end(), input_shape.begin(), input_shape.end());
    Rng rng = Rng(cfg.seed).derive("init");
    Tensor out = Tensor::zeros(s);
    const std::int64_t row = shape_numel(input_shape);
    const std::int64_t channels = input_shape.size() == 3 ? input_shape[0] : 1;
    const std::int64_t per_channel = row / channels;
    switch (cfg.init) {
        case SampleInit::uniform_noise:
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t ch = 0; ch < channels; ++ch) {
                    double lo = cfg.clip_lo[static_cast<std::size_t>(ch % static_cast<std::int64_t>(cfg.clip_lo.size()))];
                    double hi = cfg.clip_hi[static_cast<std::size_t>(ch % static_cast<std::int64_t>(cfg.clip_hi.size()))];
                    for (std::int64_t k = 0; k < per_channel; ++k)
                        out[(i * channels + ch) * per_channel + k] = rng.uniform(lo, hi);
                }
            break;
        case SampleInit::gaussian_noise:
            for (auto& v : out.data()) v = rng.gaussian();
            break;
        case SampleInit::dataset: {
            if (!data_for_init || data_for_init->test_size() == 0)
                fail_usage("sampler: dataset init requires a dataset");
            for (std::int64_t i = 0; i < n; ++i) {
                std::int64_t src_idx = rng.uniform_int(data_for_init->test_size());
                for (std::int64_t k = 0; k < row; ++k) out[i * row + k] = data_for_init->test_x[src_idx * row + k];
            }
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// GAN-test: fraction of samples an independent evaluator assigns the
// intended class
// ---------------------------------------------------------------------------

inline double gan_test(const ClassifierModel& evaluator, const Tensor& samples,
                       const std::vector<std::int64_t>& intended) {
    return evaluate_accuracy(evaluator, samples, intended);
}

// ---------------------------------------------------------------------------
// saliency maps: per-pixel sum of |logit-gradient| across channels
// ---------------------------------------------------------------------------

inline Tensor saliency_maps(const LogitSource& src, const Tensor& images, const std::vector<std::int64_t>& classes) {
    const std::int64_t n = images.extent(0);
    Var xleaf = Var::leaf(images);
    Var sel = take_per_row(src.fn(xleaf), classes);
    Tensor g = grad1(sum(sel), xleaf).value();

    const std::int64_t channels = src.input_shape.size() == 3 ? src.input_shape[0] : 1;
    const std::int64_t per_channel = (images.numel() / n) / channels;
    Shape out_shape = src.input_shape.size() == 3 ? Shape{n, src.input_shape[1], src.input_shape[2]}
                                                  : Shape{n, per_channel};
    Tensor maps = Tensor::zeros(out_shape);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < channels; ++ch)
            for (std::int64_t k = 0; k < per_channel; ++k)
                maps[i * per_channel + k] += std::abs(g[(i * channels + ch) * per_channel + k]);
    return maps;
}

// ---------------------------------------------------------------------------
// discriminative pixel perturbation
// ---------------------------------------------------------------------------

enum class DeletionOrder { least_relevant_first, most_relevant_first };
enum class Replacement { image_mean, channel_mean, constant };

struct PerturbationConfig {
    std::vector<double> fractions{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    DeletionOrder order = DeletionOrder::least_relevant_first;
    Replacement replacement = Replacement::image_mean;
    double constant_value = 0.0;

    void validate() const {
        if (fractions.empty() || fractions.front() != 0.0)
            fail_usage("pixel perturbation: fractions must be sorted and include 0");
        for (std::size_t i = 1; i < fractions.size(); ++i) {
            if (fractions[i] <= fractions[i - 1]) fail_usage("pixel perturbation: fractions must increase");
            if (fractions[i] > 1.0) fail_usage("pixel perturbation: fractions must be <= 1");
        }
    }
};

// pixel ranking for one saliency map; ties (and the all-constant map) fall
// back to stable row-major order
inline std::vector<std::int64_t> pixel_ranking(const Tensor& map, std::int64_t offset, std::int64_t count,
                                               DeletionOrder order) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
        double va = map[offset + a], vb = map[offset + b];
        if (va != vb) return order == DeletionOrder::least_relevant_first ? va < vb : va > vb;
        return a < b;
    });
    return idx;
}

// Accuracy of `model` after deleting a growing fraction of pixels ranked by
// saliency from `saliency_source` (possibly a different model).
inline EvaluationCurve pixel_perturbation(const ClassifierModel& model, const LogitSource& saliency_source,
                                          const Tensor& x, const std::vector<std::int64_t>& y,
                                          const PerturbationConfig& cfg) {
    cfg.validate();
    const std::int64_t n = x.extent(0);
    const std::int64_t row = x.numel() / n;
    const std::int64_t channels = model.input_shape().size() == 3 ? model.input_shape()[0] : 1;
    const std::int64_t per_channel = row / channels;

    Tensor maps = saliency_maps(saliency_source, x, y);

    std::vector<std::vector<std::int64_t>> rankings(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
        rankings[static_cast<std::size_t>(i)] = pixel_ranking(maps, i * per_channel, per_channel, cfg.order);

    EvaluationCurve curve;
    curve.abscissa = "fraction";
    for (double fraction : cfg.fractions) {
        double acc;
        if (fraction == 0.0) {
            acc = evaluate_accuracy(model, x, y);
        } else {
            const std::int64_t n_del = std::llround(fraction * static_cast<double>(per_channel));
            Tensor modified = x;
            for (std::int64_t i = 0; i < n; ++i) {
                // replacement values per image
                std::vector<double> repl(static_cast<std::size_t>(channels), cfg.constant_value);
                if (cfg.replacement == Replacement::image_mean) {
                    double m = 0.0;
                    for (std::int64_t k = 0; k < row; ++k) m += x[i * row + k];
                    m /= static_cast<double>(row);
                    std::fill(repl.begin(), repl.end(), m);
                } else if (cfg.replacement == Replacement::channel_mean) {
                    for (std::int64_t ch = 0; ch < channels; ++ch) {
                        double m = 0.0;
                        for (std::int64_t k = 0; k < per_channel; ++k) m += x[(i * channels + ch) * per_channel + k];
                        repl[static_cast<std::size_t>(ch)] = m / static_cast<double>(per_channel);
                    }
                }
                const auto& rank = rankings[static_cast<std::size_t>(i)];
                for (std::int64_t d = 0; d < n_del && d < per_channel; ++d) {
                    std::int64_t pix = rank[static_cast<std::size_t>(d)];
                    for (std::int64_t ch = 0; ch < channels; ++ch)
                        modified[(i * channels + ch) * per_channel + pix] = repl[static_cast<std::size_t>(ch)];
                }
            }
            acc = evaluate_accuracy(model, modified, y);
        }
        curve.points.push_back({fraction, acc, binomial_se(acc, n), n});
    }
    return curve;
}

inline double curve_auc(const EvaluationCurve& c) {
    double auc = 0.0;
    for (std::size_t i = 1; i < c.points.size(); ++i)
        auc += 0.5 * (c.points[i].value + c.points[i - 1].value) * (c.points[i].x - c.points[i - 1].x);
    return auc;
}

// ---------------------------------------------------------------------------
// saliency export: PGM images + sidecar with raw min/max per map
// ---------------------------------------------------------------------------

inline std::vector<std::string> export_saliency(const LogitSource& src, const Tensor& images,
                                                const std::vector<std::int64_t>& classes,
                                                const std::string& out_dir, const std::string& prefix = "saliency") {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Tensor maps = saliency_maps(src, images, classes);
    const std::int64_t n = maps.extent(0);
    const std::int64_t h = maps.rank() == 3 ? maps.extent(1) : 1;
    const std::int64_t w = maps.rank() == 3 ? maps.extent(2) : maps.extent(1);
    const std::int64_t per = h * w;

    std::ofstream sidecar(fs::path(out_dir) / (prefix + "_range.csv"));
    sidecar << "file,raw_min,raw_max\n";
    std::vector<std::string> files;
    for (std::int64_t i = 0; i < n; ++i) {
        Tensor one = maps.rows(i, 1).reshaped({h, w});
        double lo, hi;
        auto px = quantize_minmax(one, lo, hi);
        std::string name = prefix + "_" + std::to_string(i) + ".pgm";
        write_pgm((fs::path(out_dir) / name).string(), h, w, px);
        char buf[96];
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g\n", name.c_str(), lo, hi);
        sidecar << buf;
        files.push_back(name);
    }
    (void)per;
    return files;
}

}  // namespace scoregrad
