#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "scoregrad/autodiff.hpp"
#include "scoregrad/rng.hpp"
#include "scoregrad/tensor.hpp"

namespace scoregrad {

// Named parameter tensors with stable iteration order.
class ParamSet {
public:
    void add(const std::string& name, Tensor t) {
        if (index_.count(name)) fail_data("param set: duplicate name '" + name + "'");
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) fail_data("param set: unknown name '" + name + "'");
        return entries_[it->second].second;
    }
    const Tensor& at(const std::string& name) const { return const_cast<ParamSet*>(this)->at(name); }

    std::size_t size() const { return entries_.size(); }
    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Parameters bound as graph leaves for one forward/backward episode.
struct BoundParams {
    std::vector<std::pair<std::string, Var>> vars;

    const Var& at(const std::string& name) const {
        for (const auto& [n, v] : vars)
            if (n == name) return v;
        fail_data("bound params: unknown name '" + name + "'");
    }
    std::vector<Var> all() const {
        std::vector<Var> out;
        out.reserve(vars.size());
        for (const auto& [_, v] : vars) out.push_back(v);
        return out;
    }
};

enum class ArchPreset { mlp_small, conv_small, conv_eval };

inline const char* arch_name(ArchPreset p) {
    switch (p) {
        case ArchPreset::mlp_small: return "mlp-small";
        case ArchPreset::conv_small: return "conv-small";
        case ArchPreset::conv_eval: return "conv-eval";
    }
    return "?";
}

inline ArchPreset parse_arch(const std::string& s) {
    if (s == "mlp-small") return ArchPreset::mlp_small;
    if (s == "conv-small") return ArchPreset::conv_small;
    if (s == "conv-eval") return ArchPreset::conv_eval;
    fail_usage("unknown arch preset '" + s + "' (expected mlp-small|conv-small|conv-eval)");
}

// Fixed, versioned layer hyperparameters. conv-eval is the independently
// trained ReLU evaluator for the sample-quality test; everything that gets
// score-matched uses softplus so the Hessian is nonzero everywhere.
struct PresetLayout {
    std::vector<std::int64_t> mlp_hidden;
    struct ConvLayer {
        std::int64_t filters, ksize, stride, pad;
    };
    std::vector<ConvLayer> convs;
    std::int64_t fc_hidden = 0;
    bool use_relu = false;
};

inline PresetLayout preset_layout(ArchPreset p) {
    switch (p) {
        case ArchPreset::mlp_small: return {{256, 256}, {}, 0, false};
        case ArchPreset::conv_small: return {{}, {{16, 3, 2, 1}, {32, 3, 2, 1}}, 64, false};
        case ArchPreset::conv_eval: return {{}, {{16, 3, 2, 1}, {32, 3, 2, 1}}, 128, true};
    }
    fail_usage("bad arch preset");
}

// Classifier producing C pre-softmax logits from inputs of a fixed shape.
class ClassifierModel {
public:
    ClassifierModel() = default;

    static ClassifierModel create(ArchPreset preset, Shape input_shape, std::int64_t num_classes, double beta,
                                  const Rng& seed_rng) {
        if (num_classes < 2) fail_data("classifier: need at least 2 classes");
        if (beta <= 0.0) fail_data("classifier: beta must be positive");
        ClassifierModel m;
        m.preset_ = preset;
        m.input_shape_ = std::move(input_shape);
        m.num_classes_ = num_classes;
        m.beta_ = beta;
        m.build_params(seed_rng);
        return m;
    }

    ArchPreset preset() const { return preset_; }
    double beta() const { return beta_; }
    std::int64_t num_classes() const { return num_classes_; }
    const Shape& input_shape() const { return input_shape_; }
    std::int64_t input_dim() const { return shape_numel(input_shape_); }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    BoundParams bind(bool requires_grad) const {
        BoundParams b;
        b.vars.reserve(params_.size());
        for (const auto& [name, t] : params_) b.vars.emplace_back(name, Var::leaf(t, requires_grad));
        return b;
    }

    // Forward pass. Accepts a single example (shape == input_shape, returns
    // [C]), a batch [B, input_shape...], or a flattened batch [B, D]
    // (returns [B, C]).
    Var logits(const BoundParams& p, const Var& x) const {
        auto [batch, n, single] = to_batch(x);
        Var h = batch;
        const PresetLayout layout = preset_layout(preset_);
        if (!layout.convs.empty()) {
            for (std::size_t li = 0; li < layout.convs.size(); ++li) {
                const auto& c = layout.convs[li];
                std::string id = "conv" + std::to_string(li + 1);
                h = conv2d(h, p.at(id + ".w"), p.at(id + ".b"), c.stride, c.pad);
                h = activation(h, layout.use_relu);
            }
            h = reshape(h, {n, h.numel() / n});
        } else {
            h = reshape(h, {n, h.numel() / n});
            for (std::size_t li = 0; li < layout.mlp_hidden.size(); ++li) {
                std::string id = "fc" + std::to_string(li + 1);
                h = affine(h, p.at(id + ".w"), p.at(id + ".b"));
                h = activation(h, layout.use_relu);
            }
        }
        if (layout.fc_hidden > 0) {
            h = affine(h, p.at("fc1.w"), p.at("fc1.b"));
            h = activation(h, layout.use_relu);
        }
        Var out = affine(h, p.at("head.w"), p.at("head.b"));
        return single ? take_row(out, 0) : out;
    }

    Var logits(const Var& x) const { return logits(bind(false), x); }

    // Value-only forward, no graph construction.
    Tensor logits_value(const Tensor& x) const {
        NoGradGuard guard;
        return logits(bind(false), Var::constant(x)).value();
    }

    std::vector<std::int64_t> predict(const Tensor& x_batch) const {
        Tensor l = logits_value(x_batch);
        std::int64_t b = l.extent(0), c = l.extent(1);
        std::vector<std::int64_t> out(static_cast<std::size_t>(b));
        for (std::int64_t i = 0; i < b; ++i) {
            std::int64_t best = 0;  // ties go to the lowest class index
            for (std::int64_t j = 1; j < c; ++j)
                if (l[i * c + j] > l[i * c + best]) best = j;
            out[static_cast<std::size_t>(i)] = best;
        }
        return out;
    }

private:
    Var activation(const Var& h, bool use_relu) const { return use_relu ? relu(h) : softplus(h, beta_); }

    std::tuple<Var, std::int64_t, bool> to_batch(const Var& x) const {
        const Shape& s = x.shape();
        const std::int64_t d = input_dim();
        const PresetLayout layout = preset_layout(preset_);
        const bool conv = !layout.convs.empty();
        if (s == input_shape_) {
            Shape batched{1};
            batched.insert(batched.end(), input_shape_.begin(), input_shape_.end());
            return {reshape(x, conv ? batched : Shape{1, d}), 1, true};
        }
        if (s.size() == input_shape_.size() + 1 &&
            std::equal(input_shape_.begin(), input_shape_.end(), s.begin() + 1))
            return {x, s[0], false};
        if (s.size() == 2 && s[1] == d) {
            if (!conv) return {x, s[0], false};
            Shape batched{s[0]};
            batched.insert(batched.end(), input_shape_.begin(), input_shape_.end());
            return {reshape(x, batched), s[0], false};
        }
        fail_data("classifier: input shape " + shape_str(s) + " incompatible with model input " +
                  shape_str(input_shape_));
    }

    void build_params(const Rng& seed_rng) {
        const PresetLayout layout = preset_layout(preset_);
        Rng rng = seed_rng.derive("init");
        if (!layout.convs.empty()) {
            if (input_shape_.size() != 3) fail_data("conv presets need [C,H,W] inputs, got " + shape_str(input_shape_));
            std::int64_t cin = input_shape_[0], h = input_shape_[1], w = input_shape_[2];
            for (std::size_t li = 0; li < layout.convs.size(); ++li) {
                const auto& c = layout.convs[li];
                std::string id = "conv" + std::to_string(li + 1);
                double scale = he_scale(cin * c.ksize * c.ksize);
                params_.add(id + ".w", rng.derive(id).gaussian_tensor({c.filters, cin, c.ksize, c.ksize}, scale));
                params_.add(id + ".b", Tensor::zeros({c.filters}));
                h = (h + 2 * c.pad - c.ksize) / c.stride + 1;
                w = (w + 2 * c.pad - c.ksize) / c.stride + 1;
                cin = c.filters;
            }
            std::int64_t flat = cin * h * w;
            params_.add("fc1.w", rng.derive("fc1").gaussian_tensor({layout.fc_hidden, flat}, he_scale(flat)));
            params_.add("fc1.b", Tensor::zeros({layout.fc_hidden}));
            params_.add("head.w",
                        rng.derive("head").gaussian_tensor({num_classes_, layout.fc_hidden}, he_scale(layout.fc_hidden)));
            params_.add("head.b", Tensor::zeros({num_classes_}));
        } else {
            std::int64_t din = input_dim();
            for (std::size_t li = 0; li < layout.mlp_hidden.size(); ++li) {
                std::string id = "fc" + std::to_string(li + 1);
                std::int64_t dout = layout.mlp_hidden[li];
                params_.add(id + ".w", rng.derive(id).gaussian_tensor({dout, din}, he_scale(din)));
                params_.add(id + ".b", Tensor::zeros({dout}));
                din = dout;
            }
            params_.add("head.w", rng.derive("head").gaussian_tensor({num_classes_, din}, he_scale(din)));
            params_.add("head.b", Tensor::zeros({num_classes_}));
        }
    }

    static double he_scale(std::int64_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

    ArchPreset preset_ = ArchPreset::mlp_small;
    Shape input_shape_;
    std::int64_t num_classes_ = 0;
    double beta_ = 10.0;
    ParamSet params_;
};

// ---------------------------------------------------------------------------
// softmax cross-entropy in the exact form the gradient identities assume:
// l_i = -f_i + log sum_j exp(f_j)
// ---------------------------------------------------------------------------

inline Var cross_entropy(const Var& logits, std::int64_t cls) {
    const Tensor& t = logits.value();
    if (t.rank() != 1) fail_data("cross_entropy: expected rank-1 logits, got " + t.shape_string());
    if (t.extent(0) < 2) fail_data("cross_entropy: need at least 2 classes");
    if (cls < 0 || cls >= t.extent(0))
        fail_data("cross_entropy: class " + std::to_string(cls) + " out of range for " + t.shape_string());
    return sub(logsumexp(logits), take_row(logits, cls));
}

// per-example losses for a batch: [B, C] + labels -> [B]
inline Var cross_entropy_rows(const Var& logits, const std::vector<std::int64_t>& labels) {
    const Tensor& t = logits.value();
    if (t.rank() != 2) fail_data("cross_entropy_rows: expected rank-2 logits, got " + t.shape_string());
    if (t.extent(1) < 2) fail_data("cross_entropy_rows: need at least 2 classes");
    return sub(logsumexp_rows(logits), take_per_row(logits, labels));
}

inline Var softmax_probs(const Var& logits) {
    const Tensor& t = logits.value();
    if (t.rank() == 1) {
        return exp(sub(logits, broadcast_scalar(logsumexp(logits), t.shape())));
    }
    if (t.rank() == 2) {
        return exp(sub(logits, repeat_per_row(logsumexp_rows(logits), {t.extent(1)})));
    }
    fail_data("softmax_probs: expected rank-1 or rank-2 logits, got " + t.shape_string());
}

// ---------------------------------------------------------------------------
// generic logit producer: what the evaluation battery and the logit shims
// operate on, so a wrapped model is a drop-in for a real one
// ---------------------------------------------------------------------------

using BatchLogitFn = std::function<Var(const Var&)>;  // [B, input...] -> [B, C]

struct LogitSource {
    BatchLogitFn fn;
    std::int64_t num_classes = 0;
    Shape input_shape;

    Var logits(const Var& x) const { return fn(x); }

    Tensor logits_value(const Tensor& x) const {
        NoGradGuard guard;
        return fn(Var::constant(x)).value();
    }

    std::vector<std::int64_t> predict(const Tensor& x_batch) const {
        Tensor l = logits_value(x_batch);
        std::int64_t b = l.extent(0), c = l.extent(1);
        std::vector<std::int64_t> out(static_cast<std::size_t>(b));
        for (std::int64_t i = 0; i < b; ++i) {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < c; ++j)
                if (l[i * c + j] > l[i * c + best]) best = j;
            out[static_cast<std::size_t>(i)] = best;
        }
        return out;
    }
};

// The returned source references `model`; keep the model alive while using it.
inline LogitSource model_source(const ClassifierModel& model) {
    return {[&model](const Var& x) { return model.logits(x); }, model.num_classes(), model.input_shape()};
}

}  // namespace scoregrad
