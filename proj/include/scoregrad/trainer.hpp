#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "scoregrad/checkpoint.hpp"
#include "scoregrad/data.hpp"
#include "scoregrad/models.hpp"
#include "scoregrad/objectives.hpp"

namespace scoregrad {

// piecewise-constant learning rate: list of (start epoch, lr)
struct LrSchedule {
    std::vector<std::pair<std::int64_t, double>> points{{0, 0.05}};

    void validate() const {
        if (points.empty()) fail_usage("schedule: empty");
        if (points.front().first != 0) fail_usage("schedule: must start at epoch 0");
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (points[i].second <= 0.0) fail_usage("schedule: lr must be positive");
            if (i && points[i].first <= points[i - 1].first) fail_usage("schedule: epochs must increase");
        }
    }

    double at(std::int64_t epoch) const {
        double lr = points.front().second;
        for (const auto& [e, v] : points)
            if (epoch >= e) lr = v;
        return lr;
    }

    bool is_boundary(std::int64_t epoch) const {
        for (const auto& [e, _] : points)
            if (e == epoch && e != 0) return true;
        return false;
    }

    static LrSchedule parse(const std::string& text) {
        LrSchedule s;
        s.points.clear();
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t comma = text.find(',', pos);
            std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            std::size_t colon = item.find(':');
            if (colon == std::string::npos) fail_usage("schedule: expected epoch:lr, got '" + item + "'");
            try {
                s.points.emplace_back(std::stoll(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
            } catch (const std::exception&) {
                fail_usage("schedule: cannot parse '" + item + "'");
            }
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        s.validate();
        return s;
    }

    std::string to_string() const {
        std::string out;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (i) out += ',';
            out += std::to_string(points[i].first) + ":" + format_double(points[i].second);
        }
        return out;
    }

    static std::string format_double(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", v);
        return buf;
    }
};

struct TrainConfig {
    std::int64_t epochs = 60;
    std::int64_t batch_size = 128;
    LrSchedule schedule = LrSchedule{{{0, 0.05}, {40, 0.005}}};
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::uint64_t seed = 42;
    RegularizerConfig reg;
    ArchPreset arch = ArchPreset::mlp_small;
    double beta = 10.0;
    std::string out_dir;  // empty: no checkpoints or step logs

    void validate() const {
        if (epochs < 1) fail_usage("train: epochs must be >= 1");
        if (batch_size < 1) fail_usage("train: batch size must be >= 1");
        if (momentum < 0.0 || momentum >= 1.0) fail_usage("train: momentum must be in [0, 1)");
        if (weight_decay < 0.0) fail_usage("train: weight decay must be >= 0");
        schedule.validate();
        reg.validate();
        if (arch == ArchPreset::conv_eval &&
            (reg.mode == RegMode::score_matching || reg.mode == RegMode::anti_score_matching))
            fail_usage("train: conv-eval is the ReLU evaluator preset; its Hessian vanishes, so it cannot be "
                       "score-matched");
    }
};

struct EpochStats {
    std::int64_t epoch = 0;
    double lr = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    LossBreakdown mean_loss;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::string final_checkpoint;
    double wall_seconds = 0.0;
    bool diverged = false;
    std::string divergence_note;

    void write_csv(std::ostream& os) const {
        os << "epoch,lr,train_acc,test_acc,total,ce,h,grad_norm,stability\n";
        char buf[256];
        for (const auto& e : epochs) {
            std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                          static_cast<long long>(e.epoch), e.lr, e.train_acc, e.test_acc, e.mean_loss.total,
                          e.mean_loss.cross_entropy, e.mean_loss.hessian_trace, e.mean_loss.grad_norm,
                          e.mean_loss.stability);
            os << buf;
        }
    }
};

inline double evaluate_accuracy(const ClassifierModel& model, const Tensor& x, const std::vector<std::int64_t>& y,
                                std::int64_t chunk = 256) {
    const std::int64_t n = x.extent(0);
    if (static_cast<std::int64_t>(y.size()) != n) fail_data("accuracy: label count mismatch");
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < n; start += chunk) {
        std::int64_t count = std::min(chunk, n - start);
        auto pred = model.predict(x.rows(start, count));
        for (std::int64_t i = 0; i < count; ++i)
            if (pred[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(start + i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

// velocity <- momentum * velocity + grad;  theta <- theta - lr * (velocity + wd * theta)
inline void sgd_momentum_step(Tensor& theta, Tensor& velocity, const Tensor& gradient, double lr, double momentum,
                              double weight_decay) {
    auto& v = velocity.data();
    auto& t = theta.data();
    const auto& g = gradient.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
        v[i] = momentum * v[i] + g[i];
        t[i] -= lr * (v[i] + weight_decay * t[i]);
    }
}

using StepCallback = std::function<void(std::int64_t epoch, std::int64_t step, const LossBreakdown&)>;
using EpochCallback = std::function<void(std::int64_t epoch, const ClassifierModel&)>;

inline void accumulate(LossBreakdown& acc, const LossBreakdown& b) {
    acc.total += b.total;
    acc.cross_entropy += b.cross_entropy;
    acc.hessian_trace += b.hessian_trace;
    acc.grad_norm += b.grad_norm;
    acc.stability += b.stability;
}

inline void scale(LossBreakdown& acc, double s) {
    acc.total *= s;
    acc.cross_entropy *= s;
    acc.hessian_trace *= s;
    acc.grad_norm *= s;
    acc.stability *= s;
}

inline std::string describe_bad_term(const LossBreakdown& b) {
    if (!std::isfinite(b.cross_entropy)) return "cross-entropy term is non-finite";
    if (!std::isfinite(b.hessian_trace)) return "Hessian-trace term is non-finite";
    if (!std::isfinite(b.grad_norm)) return "gradient-norm term is non-finite";
    if (!std::isfinite(b.stability)) return "stability term is non-finite";
    return "total is non-finite";
}

inline TrainReport train(const TrainConfig& cfg, const Dataset& data, ClassifierModel& model,
                         const StepCallback& on_step = nullptr, const EpochCallback& on_epoch = nullptr) {
    cfg.validate();
    if (!data.normalized) fail_data("train: dataset must be normalized first");
    const auto t0 = std::chrono::steady_clock::now();

    Rng root(cfg.seed);
    model = ClassifierModel::create(cfg.arch, data.input_shape, data.num_classes, cfg.beta, root.derive("model"));

    namespace fs = std::filesystem;
    const bool log_files = !cfg.out_dir.empty();
    std::ofstream step_log;
    if (log_files) {
        fs::create_directories(cfg.out_dir);
        step_log.open(fs::path(cfg.out_dir) / "steps.csv");
        step_log << "step,total,ce,h,grad_norm,stability\n";
    }
    auto checkpoint_path = [&](const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); };
    auto save_last = [&]() {
        if (!log_files) return std::string();
        std::string p = checkpoint_path("last.ckpt");
        save_checkpoint(model, p);
        return p;
    };

    std::vector<Tensor> velocity;
    for (const auto& [_, t] : model.params()) velocity.push_back(Tensor::zeros(t.shape()));

    const std::int64_t n = data.train_size();
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    TrainReport report;
    std::int64_t global_step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.schedule.at(epoch);
        Rng shuffle_rng = root.derive("shuffle", static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order.begin(), order.end());

        LossBreakdown epoch_mean;
        std::int64_t steps_in_epoch = 0;
        for (std::int64_t start = 0; start < n; start += cfg.batch_size, ++global_step, ++steps_in_epoch) {
            const std::int64_t count = std::min(cfg.batch_size, n - start);
            Tensor batch_x = Tensor::zeros([&] {
                Shape s{count};
                s.insert(s.end(), data.input_shape.begin(), data.input_shape.end());
                return s;
            }());
            std::vector<std::int64_t> batch_y(static_cast<std::size_t>(count));
            std::vector<std::uint64_t> ids(static_cast<std::size_t>(count));
            const std::int64_t row = data.example_dim();
            for (std::int64_t i = 0; i < count; ++i) {
                std::int64_t src = order[static_cast<std::size_t>(start + i)];
                for (std::int64_t k = 0; k < row; ++k) batch_x[i * row + k] = data.train_x[src * row + k];
                batch_y[static_cast<std::size_t>(i)] = data.train_y[static_cast<std::size_t>(src)];
                ids[static_cast<std::size_t>(i)] = static_cast<std::uint64_t>(src);
            }

            BoundParams bound = model.bind(true);
            BatchLogitFn fn = [&](const Var& xb) { return model.logits(bound, xb); };
            LossResult loss;
            try {
                loss = regularized_loss(fn, batch_x, batch_y, cfg.reg, ids, static_cast<std::uint64_t>(epoch));
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::numeric) throw;
                report.diverged = true;
                report.divergence_note = e.what();
                report.final_checkpoint = save_last();
                report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                return report;
            }

            if (!std::isfinite(loss.breakdown.total)) {
                report.diverged = true;
                report.divergence_note = "non-finite loss at step " + std::to_string(global_step) + ": " +
                                         describe_bad_term(loss.breakdown);
                report.final_checkpoint = save_last();
                report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                return report;
            }

            std::vector<Var> grads = grad(loss.total, bound.all());
            std::size_t pi = 0;
            for (auto& [name, theta] : model.params()) {
                sgd_momentum_step(theta, velocity[pi], grads[pi].value(), lr, cfg.momentum, cfg.weight_decay);
                ++pi;
            }

            accumulate(epoch_mean, loss.breakdown);
            if (on_step) on_step(epoch, global_step, loss.breakdown);
            if (step_log.is_open()) {
                char buf[256];
                std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                              static_cast<long long>(global_step), loss.breakdown.total,
                              loss.breakdown.cross_entropy, loss.breakdown.hessian_trace, loss.breakdown.grad_norm,
                              loss.breakdown.stability);
                step_log << buf;
            }
        }
        scale(epoch_mean, 1.0 / static_cast<double>(steps_in_epoch));

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.mean_loss = epoch_mean;
        stats.train_acc = evaluate_accuracy(model, data.train_x, data.train_y);
        stats.test_acc = evaluate_accuracy(model, data.test_x, data.test_y);
        report.epochs.push_back(stats);
        if (on_epoch) on_epoch(epoch, model);

        if (log_files && cfg.schedule.is_boundary(epoch + 1))
            save_checkpoint(model, checkpoint_path("epoch_" + std::to_string(epoch + 1) + ".ckpt"));
        if (log_files) report.final_checkpoint = save_last();
    }

    if (log_files) {
        std::ofstream os(fs::path(cfg.out_dir) / "train_report.csv");
        report.write_csv(os);
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---------------------------------------------------------------------------
// hyper-parameter sweep over (lambda, mu)
// ---------------------------------------------------------------------------

struct SweepCell {
    double lambda = 0.0;
    double mu = 0.0;
    double accuracy = std::nan("");
    double gan_test = std::nan("");
    bool failed = false;
    std::string note;
};

using GanMetric = std::function<double(const ClassifierModel&)>;

inline std::vector<SweepCell> sweep(const TrainConfig& base, const Dataset& data,
                                    const std::vector<double>& lambda_grid, const std::vector<double>& mu_grid,
                                    const GanMetric& gan_metric = nullptr) {
    if (lambda_grid.empty() || mu_grid.empty()) fail_usage("sweep: grids must be non-empty");
    std::vector<SweepCell> cells;
    for (double lambda : lambda_grid)
        for (double mu : mu_grid) {
            SweepCell cell;
            cell.lambda = lambda;
            cell.mu = mu;
            TrainConfig cfg = base;
            cfg.reg.lambda = lambda;
            cfg.reg.mu = mu;
            if (!cfg.out_dir.empty())
                cfg.out_dir = (std::filesystem::path(base.out_dir) /
                               ("cell_l" + LrSchedule::format_double(lambda) + "_m" + LrSchedule::format_double(mu)))
                                  .string();
            try {
                ClassifierModel model;
                TrainReport rep = train(cfg, data, model);
                if (rep.diverged) {
                    cell.failed = true;
                    cell.note = rep.divergence_note;
                } else {
                    cell.accuracy = rep.epochs.back().test_acc;
                    if (gan_metric) cell.gan_test = gan_metric(model);
                }
            } catch (const Error& e) {
                cell.failed = true;
                cell.note = e.what();
            }
            cells.push_back(std::move(cell));
        }
    return cells;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepCell>& cells) {
    os << "lambda,mu,accuracy,gan_test,failed,note\n";
    char buf[128];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,", c.lambda, c.mu, c.accuracy, c.gan_test);
        os << buf << (c.failed ? 1 : 0) << ",\"" << c.note << "\"\n";
    }
}

// matrix layout; cells are "accuracy% / gan%"
inline void write_sweep_matrix(std::ostream& os, const std::vector<SweepCell>& cells,
                               const std::vector<double>& lambda_grid, const std::vector<double>& mu_grid) {
    os << "lambda \\ mu";
    for (double mu : mu_grid) os << "\t" << LrSchedule::format_double(mu);
    os << "\n";
    std::size_t i = 0;
    for (double lambda : lambda_grid) {
        os << LrSchedule::format_double(lambda);
        for (std::size_t j = 0; j < mu_grid.size(); ++j, ++i) {
            const auto& c = cells[i];
            char buf[64];
            if (c.failed)
                std::snprintf(buf, sizeof buf, "\tfailed");
            else if (std::isnan(c.gan_test))
                std::snprintf(buf, sizeof buf, "\t%.2f%% / -", 100.0 * c.accuracy);
            else
                std::snprintf(buf, sizeof buf, "\t%.2f%% / %.2f%%", 100.0 * c.accuracy, 100.0 * c.gan_test);
            os << buf;
        }
        os << "\n";
    }
}

}  // namespace scoregrad
