#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

namespace scoregrad {

// Labeled (abscissa, value +/- spread) series; the common output format of
// the evaluation operations. spread is a standard error.
struct CurvePoint {
    double x = 0.0;
    double value = 0.0;
    double spread = 0.0;
    std::int64_t count = 0;
};

struct EvaluationCurve {
    std::string abscissa = "x";  // "sigma", "fraction", "step", ...
    std::vector<CurvePoint> points;

    void write_csv(std::ostream& os) const {
        os << abscissa << ",value,spread,count\n";
        char buf[160];
        for (const auto& p : points) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%lld\n", p.x, p.value, p.spread,
                          static_cast<long long>(p.count));
            os << buf;
        }
    }
};

// mean and standard error of a sample
inline std::pair<double, double> mean_and_se(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= n;
    if (xs.size() < 2) return {mean, 0.0};
    double s = 0.0;
    for (double v : xs) s += (v - mean) * (v - mean);
    return {mean, std::sqrt(s / (n - 1.0) / n)};
}

inline double binomial_se(double p, std::int64_t n) {
    return std::sqrt(std::max(p * (1.0 - p), 0.0) / static_cast<double>(n));
}

}  // namespace scoregrad
