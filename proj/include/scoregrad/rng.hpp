#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "scoregrad/tensor.hpp"

namespace scoregrad {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

// Counter-based splittable generator. Streams are identified by
// (seed, purpose string, index), so per-example noise is reproducible no
// matter how a batch is partitioned.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed), have_spare_(false), spare_(0.0) {
        // avoid the all-zero fixed point and decorrelate trivial seeds
        detail::splitmix64(state_);
    }

    Rng derive(std::string_view purpose, std::uint64_t index = 0) const {
        std::uint64_t s = state_ ^ detail::fnv1a64(purpose);
        detail::splitmix64(s);
        s ^= 0x9e3779b97f4a7c15ULL * (index + 1);
        return Rng(s);
    }

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::int64_t uniform_int(std::int64_t n) {
        // n is small everywhere we use this; modulo bias is negligible
        return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // standard normal via Box-Muller
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    Tensor gaussian_tensor(Shape shape, double stddev = 1.0, double mean = 0.0) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (auto& v : t.data()) v = gaussian(mean, stddev);
        return t;
    }

    Tensor uniform_tensor(Shape shape, double lo, double hi) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (auto& v : t.data()) v = uniform(lo, hi);
        return t;
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            auto j = uniform_int(i + 1);
            std::swap(first[i], first[j]);
        }
    }

private:
    std::uint64_t state_;
    bool have_spare_;
    double spare_;
};

}  // namespace scoregrad
