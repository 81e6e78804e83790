#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "scoregrad/rng.hpp"
#include "scoregrad/tensor.hpp"

namespace scoregrad {

// Loaded dataset: images scaled to [0,1] doubles, labels as class indices.
// Normalization stats come from the train split only; sigma for the trace
// noise and all evaluation noise scales live in normalized units.
struct Dataset {
    std::string id;
    Shape input_shape;  // per-example, e.g. {1,28,28} or {2}
    std::int64_t num_classes = 0;
    Tensor train_x, test_x;  // [N, input_shape...]
    std::vector<std::int64_t> train_y, test_y;
    std::vector<double> channel_mean, channel_std;
    bool normalized = false;
    std::vector<std::int64_t> informative_pixels;  // only for the oracle dataset

    std::int64_t train_size() const { return train_x.numel() ? train_x.extent(0) : 0; }
    std::int64_t test_size() const { return test_x.numel() ? test_x.extent(0) : 0; }
    std::int64_t example_dim() const { return shape_numel(input_shape); }

    std::int64_t channels() const { return input_shape.size() == 3 ? input_shape[0] : 1; }

    void compute_stats() {
        const std::int64_t c = channels();
        const std::int64_t per_channel = example_dim() / c;
        channel_mean.assign(static_cast<std::size_t>(c), 0.0);
        channel_std.assign(static_cast<std::size_t>(c), 0.0);
        const auto& d = train_x.data();
        const std::int64_t n = train_size();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t k = 0; k < per_channel; ++k)
                    channel_mean[static_cast<std::size_t>(ch)] += d[static_cast<std::size_t>(
                        (i * c + ch) * per_channel + k)];
        for (auto& m : channel_mean) m /= static_cast<double>(n * per_channel);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t k = 0; k < per_channel; ++k) {
                    double v = d[static_cast<std::size_t>((i * c + ch) * per_channel + k)] -
                               channel_mean[static_cast<std::size_t>(ch)];
                    channel_std[static_cast<std::size_t>(ch)] += v * v;
                }
        for (auto& s : channel_std) s = std::sqrt(s / static_cast<double>(n * per_channel));
        for (auto& s : channel_std)
            if (s < 1e-12) s = 1.0;  // degenerate constant channel
    }

    void normalize() {
        if (normalized) return;
        if (channel_mean.empty()) compute_stats();
        apply_stats(train_x);
        apply_stats(test_x);
        normalized = true;
    }

    void apply_stats(Tensor& x) const {
        if (!x.numel()) return;
        const std::int64_t c = channels();
        const std::int64_t per_channel = example_dim() / c;
        const std::int64_t n = x.extent(0);
        auto& d = x.data();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t k = 0; k < per_channel; ++k) {
                    auto& v = d[static_cast<std::size_t>((i * c + ch) * per_channel + k)];
                    v = (v - channel_mean[static_cast<std::size_t>(ch)]) / channel_std[static_cast<std::size_t>(ch)];
                }
    }

    // input-range bounds after normalization (raw range [0,1])
    double normalized_lo(std::int64_t ch) const {
        return normalized ? (0.0 - channel_mean[static_cast<std::size_t>(ch)]) / channel_std[static_cast<std::size_t>(ch)]
                          : 0.0;
    }
    double normalized_hi(std::int64_t ch) const {
        return normalized ? (1.0 - channel_mean[static_cast<std::size_t>(ch)]) / channel_std[static_cast<std::size_t>(ch)]
                          : 1.0;
    }
};

// ---------------------------------------------------------------------------
// IDX (big-endian dims; dtype 0x08 = u8, 0x0D = f64)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::istream& is, std::size_t offset, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        fail_data("idx '" + path + "': truncated at byte " + std::to_string(offset));
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

inline std::uint64_t read_be64(std::istream& is, std::size_t offset, const std::string& path) {
    std::uint64_t hi = read_be32(is, offset, path);
    std::uint64_t lo = read_be32(is, offset + 4, path);
    return (hi << 32) | lo;
}

}  // namespace detail

struct IdxArray {
    Shape shape;
    std::vector<double> data;  // u8 payloads scaled to [0,1], f64 verbatim
};

inline IdxArray load_idx(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail_io("idx: cannot open '" + path + "'");
    std::size_t offset = 0;
    std::uint32_t magic = detail::read_be32(is, offset, path);
    offset += 4;
    if ((magic & 0xffff0000u) != 0)
        fail_data("idx '" + path + "': bad magic 0x" + [&] {
            std::ostringstream os;
            os << std::hex << magic;
            return os.str();
        }() + " at byte 0");
    std::uint32_t dtype = (magic >> 8) & 0xff;
    std::uint32_t ndim = magic & 0xff;
    if (dtype != 0x08 && dtype != 0x0D)
        fail_data("idx '" + path + "': unsupported dtype 0x" + std::to_string(dtype) + " at byte 2");
    if (ndim == 0 || ndim > 4) fail_data("idx '" + path + "': bad rank " + std::to_string(ndim) + " at byte 3");

    IdxArray out;
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        std::uint32_t e = detail::read_be32(is, offset, path);
        offset += 4;
        if (e == 0) fail_data("idx '" + path + "': zero extent at byte " + std::to_string(offset - 4));
        out.shape.push_back(static_cast<std::int64_t>(e));
        numel *= e;
    }
    out.data.resize(static_cast<std::size_t>(numel));
    if (dtype == 0x08) {
        std::vector<unsigned char> raw(static_cast<std::size_t>(numel));
        if (!is.read(reinterpret_cast<char*>(raw.data()), numel))
            fail_data("idx '" + path + "': truncated payload at byte " + std::to_string(offset));
        for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = raw[i] / 255.0;
    } else {
        for (std::int64_t i = 0; i < numel; ++i) {
            std::uint64_t bits = detail::read_be64(is, offset, path);
            offset += 8;
            double v;
            static_assert(sizeof(double) == 8);
            std::memcpy(&v, &bits, 8);
            out.data[static_cast<std::size_t>(i)] = v;
        }
    }
    char extra;
    if (is.read(&extra, 1))
        fail_data("idx '" + path + "': trailing bytes after payload at byte " + std::to_string(offset));
    return out;
}

inline void write_idx_u8(const std::string& path, const Shape& shape, const std::vector<unsigned char>& bytes) {
    if (shape_numel(shape) != static_cast<std::int64_t>(bytes.size())) fail_data("idx write: shape/data mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) fail_io("idx: cannot open '" + path + "' for writing");
    unsigned char magic[4] = {0, 0, 0x08, static_cast<unsigned char>(shape.size())};
    os.write(reinterpret_cast<char*>(magic), 4);
    for (auto e : shape) {
        unsigned char b[4] = {static_cast<unsigned char>((e >> 24) & 0xff), static_cast<unsigned char>((e >> 16) & 0xff),
                              static_cast<unsigned char>((e >> 8) & 0xff), static_cast<unsigned char>(e & 0xff)};
        os.write(reinterpret_cast<char*>(b), 4);
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) fail_io("idx: write failed for '" + path + "'");
}

inline void write_idx_f64(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail_io("idx: cannot open '" + path + "' for writing");
    unsigned char magic[4] = {0, 0, 0x0D, static_cast<unsigned char>(t.rank())};
    os.write(reinterpret_cast<char*>(magic), 4);
    for (auto e : t.shape()) {
        unsigned char b[4] = {static_cast<unsigned char>((e >> 24) & 0xff), static_cast<unsigned char>((e >> 16) & 0xff),
                              static_cast<unsigned char>((e >> 8) & 0xff), static_cast<unsigned char>(e & 0xff)};
        os.write(reinterpret_cast<char*>(b), 4);
    }
    for (double v : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * (7 - i))) & 0xff);
        os.write(reinterpret_cast<char*>(b), 8);
    }
    if (!os) fail_io("idx: write failed for '" + path + "'");
}

// MNIST-style pair: images (rank 3, u8 or f64) + labels (rank 1).
inline Dataset load_idx_dataset(const std::string& train_images, const std::string& train_labels,
                                const std::string& test_images, const std::string& test_labels) {
    Dataset ds;
    ds.id = "idx";
    auto load_split = [&](const std::string& img_path, const std::string& lbl_path, Tensor& x,
                          std::vector<std::int64_t>& y) {
        IdxArray img = load_idx(img_path);
        IdxArray lbl = load_idx(lbl_path);
        if (img.shape.size() < 2) fail_data("idx '" + img_path + "': expected image array of rank >= 2");
        if (lbl.shape.size() != 1) fail_data("idx '" + lbl_path + "': expected rank-1 label array");
        if (img.shape[0] != lbl.shape[0])
            fail_data("idx: image count " + std::to_string(img.shape[0]) + " != label count " +
                      std::to_string(lbl.shape[0]));
        Shape xs{img.shape[0], 1};
        std::int64_t d = 1;
        for (std::size_t i = 1; i < img.shape.size(); ++i) {
            xs.push_back(img.shape[i]);
            d *= img.shape[i];
        }
        (void)d;
        x = Tensor(xs, std::move(img.data));
        y.resize(static_cast<std::size_t>(lbl.shape[0]));
        for (std::size_t i = 0; i < y.size(); ++i) {
            // u8 labels arrive scaled by 1/255
            double raw = lbl.data[i] * 255.0;
            y[i] = static_cast<std::int64_t>(raw + 0.5);
        }
    };
    load_split(train_images, train_labels, ds.train_x, ds.train_y);
    load_split(test_images, test_labels, ds.test_x, ds.test_y);
    ds.input_shape = Shape(ds.train_x.shape().begin() + 1, ds.train_x.shape().end());
    std::int64_t max_label = 0;
    for (auto l : ds.train_y) max_label = std::max(max_label, l);
    for (auto l : ds.test_y) max_label = std::max(max_label, l);
    ds.num_classes = max_label + 1;
    return ds;
}

// ---------------------------------------------------------------------------
// CIFAR binary: CIFAR-10 records are 1+3072 bytes, CIFAR-100 are 2+3072
// ---------------------------------------------------------------------------

inline void load_cifar_split(const std::string& path, bool cifar100, Tensor& x, std::vector<std::int64_t>& y) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) fail_io("cifar: cannot open '" + path + "'");
    const std::int64_t record = cifar100 ? 3074 : 3073;
    std::int64_t size = static_cast<std::int64_t>(is.tellg());
    if (size == 0 || size % record != 0)
        fail_data("cifar '" + path + "': file size " + std::to_string(size) + " is not a multiple of record size " +
                  std::to_string(record));
    std::int64_t n = size / record;
    is.seekg(0);
    x = Tensor::zeros({n, 3, 32, 32});
    y.resize(static_cast<std::size_t>(n));
    std::vector<unsigned char> buf(static_cast<std::size_t>(record));
    for (std::int64_t i = 0; i < n; ++i) {
        if (!is.read(reinterpret_cast<char*>(buf.data()), record))
            fail_data("cifar '" + path + "': truncated at byte " + std::to_string(i * record));
        // CIFAR-100 stores (coarse, fine); we keep the fine label
        y[static_cast<std::size_t>(i)] = buf[cifar100 ? 1 : 0];
        for (std::int64_t k = 0; k < 3072; ++k)
            x[i * 3072 + k] = buf[static_cast<std::size_t>((cifar100 ? 2 : 1) + k)] / 255.0;
    }
}

inline Dataset load_cifar_dataset(const std::vector<std::string>& train_files, const std::string& test_file,
                                  bool cifar100) {
    Dataset ds;
    ds.id = cifar100 ? "cifar100" : "cifar10";
    ds.input_shape = {3, 32, 32};
    std::vector<Tensor> parts;
    std::int64_t total = 0;
    for (const auto& f : train_files) {
        Tensor x;
        std::vector<std::int64_t> y;
        load_cifar_split(f, cifar100, x, y);
        total += x.extent(0);
        parts.push_back(std::move(x));
        ds.train_y.insert(ds.train_y.end(), y.begin(), y.end());
    }
    std::vector<double> all;
    all.reserve(static_cast<std::size_t>(total * 3072));
    for (const auto& p : parts) all.insert(all.end(), p.data().begin(), p.data().end());
    ds.train_x = Tensor({total, 3, 32, 32}, std::move(all));
    load_cifar_split(test_file, cifar100, ds.test_x, ds.test_y);
    std::int64_t max_label = 0;
    for (auto l : ds.train_y) max_label = std::max(max_label, l);
    ds.num_classes = max_label + 1;
    return ds;
}

// ---------------------------------------------------------------------------
// analytic class-conditional mixtures (ground-truth scores for the tests)
// ---------------------------------------------------------------------------

struct MixtureComponent {
    Tensor mean;    // [D]
    double sigma;   // isotropic
    double weight;
};

struct GaussianMixtureSpec {
    std::int64_t dim = 0;
    std::vector<std::vector<MixtureComponent>> classes;

    std::int64_t num_classes() const { return static_cast<std::int64_t>(classes.size()); }

    void validate() const {
        if (dim <= 0) fail_data("mixture: dimension must be positive");
        if (classes.empty()) fail_data("mixture: no classes");
        for (const auto& cls : classes) {
            if (cls.empty()) fail_data("mixture: class without components");
            double w = 0;
            for (const auto& c : cls) {
                if (c.sigma <= 0) fail_data("mixture: component sigma must be positive");
                if (c.weight <= 0) fail_data("mixture: component weight must be positive");
                if (c.mean.numel() != dim) fail_data("mixture: component mean has wrong dimension");
                w += c.weight;
            }
            if (std::abs(w - 1.0) > 1e-9) fail_data("mixture: class weights must sum to 1");
        }
    }

    // fixed 2-d, 3-class layout used by the score-matching fidelity runs
    static GaussianMixtureSpec default_2d_3class() {
        GaussianMixtureSpec spec;
        spec.dim = 2;
        auto cls = [&](std::initializer_list<std::pair<std::pair<double, double>, double>> comps) {
            std::vector<MixtureComponent> out;
            double w = 1.0 / static_cast<double>(comps.size());
            for (const auto& [mu, sigma] : comps)
                out.push_back({Tensor::from({mu.first, mu.second}), sigma, w});
            return out;
        };
        spec.classes.push_back(cls({{{-2.0, -2.0}, 0.35}, {{-2.6, 0.4}, 0.3}, {{-1.0, -0.8}, 0.3}}));
        spec.classes.push_back(cls({{{2.2, -1.8}, 0.35}, {{1.4, 0.2}, 0.3}, {{2.8, 0.6}, 0.3}}));
        spec.classes.push_back(cls({{{0.0, 2.4}, 0.35}, {{-1.2, 1.6}, 0.3}, {{1.0, 1.8}, 0.3}}));
        spec.validate();
        return spec;
    }

    void serialize(std::ostream& os) const {
        os << "dim=" << dim << "\n";
        os << "classes=" << classes.size() << "\n";
        for (std::size_t c = 0; c < classes.size(); ++c) {
            os << "class." << c << ".components=" << classes[c].size() << "\n";
            for (std::size_t k = 0; k < classes[c].size(); ++k) {
                const auto& comp = classes[c][k];
                os << "class." << c << ".comp." << k << ".mean=";
                for (std::int64_t d = 0; d < comp.mean.numel(); ++d) {
                    if (d) os << ',';
                    os << comp.mean[d];
                }
                os << "\n";
                os << "class." << c << ".comp." << k << ".sigma=" << comp.sigma << "\n";
                os << "class." << c << ".comp." << k << ".weight=" << comp.weight << "\n";
            }
        }
    }
};

inline Tensor sample_mixture(const GaussianMixtureSpec& spec, std::int64_t cls, std::int64_t n, Rng rng) {
    if (cls < 0 || cls >= spec.num_classes()) fail_data("mixture: class index out of range");
    const auto& comps = spec.classes[static_cast<std::size_t>(cls)];
    Tensor out = Tensor::zeros({n, spec.dim});
    for (std::int64_t i = 0; i < n; ++i) {
        double u = rng.uniform();
        std::size_t k = 0;
        double acc = 0.0;
        for (; k < comps.size(); ++k) {
            acc += comps[k].weight;
            if (u < acc) break;
        }
        if (k == comps.size()) k = comps.size() - 1;
        for (std::int64_t d = 0; d < spec.dim; ++d)
            out[i * spec.dim + d] = comps[k].mean[d] + comps[k].sigma * rng.gaussian();
    }
    return out;
}

inline double mixture_log_density(const GaussianMixtureSpec& spec, std::int64_t cls, const Tensor& x) {
    const auto& comps = spec.classes[static_cast<std::size_t>(cls)];
    const double half_log_2pi = 0.91893853320467274178;
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> logs(comps.size());
    for (std::size_t k = 0; k < comps.size(); ++k) {
        double sq = 0.0;
        for (std::int64_t d = 0; d < spec.dim; ++d) {
            double z = (x[d] - comps[k].mean[d]) / comps[k].sigma;
            sq += z * z;
        }
        logs[k] = std::log(comps[k].weight) - 0.5 * sq -
                  static_cast<double>(spec.dim) * (half_log_2pi + std::log(comps[k].sigma));
        m = std::max(m, logs[k]);
    }
    double s = 0.0;
    for (double l : logs) s += std::exp(l - m);
    return m + std::log(s);
}

// score = sum_k gamma_k(x) (mu_k - x) / sigma_k^2 with responsibilities from
// a stabilized log-sum-exp
inline Tensor analytic_score(const GaussianMixtureSpec& spec, std::int64_t cls, const Tensor& x) {
    if (cls < 0 || cls >= spec.num_classes()) fail_data("mixture: class index out of range");
    if (x.numel() != spec.dim) fail_data("mixture: point has wrong dimension");
    const auto& comps = spec.classes[static_cast<std::size_t>(cls)];
    const double half_log_2pi = 0.91893853320467274178;
    std::vector<double> logs(comps.size());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < comps.size(); ++k) {
        double sq = 0.0;
        for (std::int64_t d = 0; d < spec.dim; ++d) {
            double z = (x[d] - comps[k].mean[d]) / comps[k].sigma;
            sq += z * z;
        }
        logs[k] = std::log(comps[k].weight) - 0.5 * sq -
                  static_cast<double>(spec.dim) * (half_log_2pi + std::log(comps[k].sigma));
        m = std::max(m, logs[k]);
    }
    double z = 0.0;
    for (double l : logs) z += std::exp(l - m);
    Tensor score = Tensor::zeros({spec.dim});
    for (std::size_t k = 0; k < comps.size(); ++k) {
        double gamma = std::exp(logs[k] - m) / z;
        double inv_var = 1.0 / (comps[k].sigma * comps[k].sigma);
        for (std::int64_t d = 0; d < spec.dim; ++d) score[d] += gamma * (comps[k].mean[d] - x[d]) * inv_var;
    }
    return score;
}

inline Dataset make_mixture_dataset(const GaussianMixtureSpec& spec, std::int64_t n_train_per_class,
                                    std::int64_t n_test_per_class, std::uint64_t seed) {
    spec.validate();
    Dataset ds;
    ds.id = "mixture";
    ds.input_shape = {spec.dim};
    ds.num_classes = spec.num_classes();
    Rng rng(seed);
    auto fill = [&](std::int64_t per_class, Tensor& x, std::vector<std::int64_t>& y, const char* split) {
        std::int64_t n = per_class * spec.num_classes();
        x = Tensor::zeros({n, spec.dim});
        y.resize(static_cast<std::size_t>(n));
        std::int64_t row = 0;
        for (std::int64_t c = 0; c < spec.num_classes(); ++c) {
            Tensor s = sample_mixture(spec, c, per_class, rng.derive(split, static_cast<std::uint64_t>(c)));
            for (std::int64_t i = 0; i < per_class; ++i, ++row) {
                y[static_cast<std::size_t>(row)] = c;
                for (std::int64_t d = 0; d < spec.dim; ++d) x[row * spec.dim + d] = s[i * spec.dim + d];
            }
        }
    };
    fill(n_train_per_class, ds.train_x, ds.train_y, "train");
    fill(n_test_per_class, ds.test_x, ds.test_y, "test");
    // mixture data is used in its own coordinates; mark stats as identity
    ds.channel_mean = {0.0};
    ds.channel_std = {1.0};
    ds.normalized = true;
    return ds;
}

// ---------------------------------------------------------------------------
// oracle dataset for pixel perturbation: labels depend on k known pixels
// ---------------------------------------------------------------------------

inline Dataset make_informative_pixels_dataset(std::int64_t side, std::int64_t k, std::int64_t n_train,
                                               std::int64_t n_test, std::int64_t num_classes, std::uint64_t seed) {
    const std::int64_t d = side * side;
    if (k >= d) fail_data("informative pixels: k must be smaller than D");
    if (num_classes < 2) fail_data("informative pixels: need >= 2 classes");
    Dataset ds;
    ds.id = "informative";
    ds.input_shape = {1, side, side};
    ds.num_classes = num_classes;
    Rng rng(seed);

    // fixed positions, spread deterministically
    Rng pos_rng = rng.derive("positions");
    std::vector<std::int64_t> all(static_cast<std::size_t>(d));
    for (std::int64_t i = 0; i < d; ++i) all[static_cast<std::size_t>(i)] = i;
    pos_rng.shuffle(all.begin(), all.end());
    ds.informative_pixels.assign(all.begin(), all.begin() + k);
    std::sort(ds.informative_pixels.begin(), ds.informative_pixels.end());

    // class patterns: distinct k-bit codes mapped to strong pixel values
    auto pattern_value = [&](std::int64_t cls, std::int64_t bit) {
        return ((cls >> bit) & 1) ? 0.95 : 0.05;
    };

    auto fill = [&](std::int64_t n, Tensor& x, std::vector<std::int64_t>& y, const char* split) {
        x = Tensor::zeros({n, 1, side, side});
        y.resize(static_cast<std::size_t>(n));
        Rng sr = rng.derive(split);
        for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t cls = sr.uniform_int(num_classes);
            y[static_cast<std::size_t>(i)] = cls;
            for (std::int64_t p = 0; p < d; ++p) x[i * d + p] = 0.4 + 0.2 * sr.uniform();
            for (std::int64_t b = 0; b < k; ++b) {
                double v = pattern_value(cls, b) + 0.02 * (sr.uniform() - 0.5);
                x[i * d + ds.informative_pixels[static_cast<std::size_t>(b)]] = v;
            }
        }
    };
    fill(n_train, ds.train_x, ds.train_y, "train");
    fill(n_test, ds.test_x, ds.test_y, "test");
    return ds;
}

// ---------------------------------------------------------------------------
// procedural image classes at MNIST scale (no external files needed)
// ---------------------------------------------------------------------------

// Each class is a fixed template of smooth bumps; samples apply a small
// integer shift plus pixel noise. Localized class structure is what makes
// saliency quality measurable on this data.
inline Dataset make_synthetic_images_dataset(std::int64_t num_classes, std::int64_t side, std::int64_t n_train,
                                             std::int64_t n_test, std::uint64_t seed, double noise_std = 0.12,
                                             std::int64_t max_shift = 2) {
    Dataset ds;
    ds.id = "synthetic";
    ds.input_shape = {1, side, side};
    ds.num_classes = num_classes;
    Rng rng(seed);

    std::vector<std::vector<double>> templates(static_cast<std::size_t>(num_classes));
    for (std::int64_t c = 0; c < num_classes; ++c) {
        Rng tr = rng.derive("template", static_cast<std::uint64_t>(c));
        std::int64_t bumps = 3 + tr.uniform_int(3);
        auto& t = templates[static_cast<std::size_t>(c)];
        t.assign(static_cast<std::size_t>(side * side), 0.0);
        for (std::int64_t m = 0; m < bumps; ++m) {
            double cx = tr.uniform(0.2, 0.8) * static_cast<double>(side);
            double cy = tr.uniform(0.2, 0.8) * static_cast<double>(side);
            double amp = tr.uniform(0.55, 1.0);
            double width = tr.uniform(0.06, 0.14) * static_cast<double>(side);
            for (std::int64_t yy = 0; yy < side; ++yy)
                for (std::int64_t xx = 0; xx < side; ++xx) {
                    double dx = (static_cast<double>(xx) - cx) / width;
                    double dy = (static_cast<double>(yy) - cy) / width;
                    t[static_cast<std::size_t>(yy * side + xx)] += amp * std::exp(-0.5 * (dx * dx + dy * dy));
                }
        }
        for (auto& v : t) v = std::min(v, 1.0);
    }

    auto fill = [&](std::int64_t n, Tensor& x, std::vector<std::int64_t>& y, const char* split) {
        x = Tensor::zeros({n, 1, side, side});
        y.resize(static_cast<std::size_t>(n));
        Rng sr = rng.derive(split);
        for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t cls = i % num_classes;  // balanced splits
            y[static_cast<std::size_t>(i)] = cls;
            std::int64_t dx = max_shift ? sr.uniform_int(2 * max_shift + 1) - max_shift : 0;
            std::int64_t dy = max_shift ? sr.uniform_int(2 * max_shift + 1) - max_shift : 0;
            const auto& t = templates[static_cast<std::size_t>(cls)];
            for (std::int64_t yy = 0; yy < side; ++yy)
                for (std::int64_t xx = 0; xx < side; ++xx) {
                    std::int64_t sy = yy - dy, sx = xx - dx;
                    double v = (sy >= 0 && sy < side && sx >= 0 && sx < side)
                                   ? t[static_cast<std::size_t>(sy * side + sx)]
                                   : 0.0;
                    v += noise_std * sr.gaussian();
                    x[i * side * side + yy * side + xx] = std::clamp(v, 0.0, 1.0);
                }
        }
    };
    fill(n_train, ds.train_x, ds.train_y, "train");
    fill(n_test, ds.test_x, ds.test_y, "test");
    return ds;
}

// separable 2-class blobs for the trainer smoke checks
inline Dataset make_blobs_dataset(std::int64_t n_per_class, std::uint64_t seed) {
    GaussianMixtureSpec spec;
    spec.dim = 2;
    spec.classes.push_back({{Tensor::from({-2.0, 0.0}), 0.4, 1.0}});
    spec.classes.push_back({{Tensor::from({2.0, 0.0}), 0.4, 1.0}});
    Dataset ds = make_mixture_dataset(spec, n_per_class, std::max<std::int64_t>(n_per_class / 4, 16), seed);
    ds.id = "blobs";
    return ds;
}

}  // namespace scoregrad
