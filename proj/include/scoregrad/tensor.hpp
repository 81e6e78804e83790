#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scoregrad/error.hpp"

namespace scoregrad {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major n-d array of doubles. Rank-0 tensors hold a single scalar.
// Values are treated as immutable once they enter the autodiff graph.
class Tensor {
public:
    Tensor() : shape_{}, data_(1, 0.0) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape(shape_);
        if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
            fail_data("tensor: shape " + shape_str(shape_) + " does not match data length " +
                      std::to_string(data_.size()));
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor zeros(Shape shape) {
        validate_shape(shape);
        std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), 0.0);
        return Tensor(std::move(shape), std::move(d));
    }

    static Tensor full(Shape shape, double v) {
        validate_shape(shape);
        std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), v);
        return Tensor(std::move(shape), std::move(d));
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    static Tensor from(std::initializer_list<double> vals) {
        std::vector<double> d(vals);
        Shape s{static_cast<std::int64_t>(d.size())};
        return Tensor(std::move(s), std::move(d));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t extent(std::size_t axis) const { return shape_.at(axis); }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }

    double item() const {
        if (numel() != 1) fail_data("tensor: item() on non-scalar " + shape_str(shape_));
        return data_[0];
    }

    double at(std::initializer_list<std::int64_t> idx) const { return data_[flat_index(idx)]; }
    double& at(std::initializer_list<std::int64_t> idx) { return data_[flat_index(idx)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(Shape s) const {
        validate_shape(s);
        if (shape_numel(s) != numel())
            fail_data("reshape: " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
        return Tensor(std::move(s), data_);
    }

    // Contiguous block of rows along the first axis; plain data movement for
    // batching, not part of the differentiable op set.
    Tensor rows(std::int64_t start, std::int64_t count) const {
        if (rank() == 0) fail_data("rows: rank-0 tensor");
        if (start < 0 || count < 0 || start + count > shape_[0])
            fail_data("rows: range [" + std::to_string(start) + "," + std::to_string(start + count) +
                      ") out of bounds for " + shape_str(shape_));
        std::int64_t stride = numel() / shape_[0];
        Shape s = shape_;
        s[0] = count;
        std::vector<double> d(data_.begin() + start * stride, data_.begin() + (start + count) * stride);
        return Tensor(std::move(s), std::move(d));
    }

    // In-place helpers for plain (non-differentiated) numerics: optimizer
    // state, report statistics and the like.
    Tensor& add_(const Tensor& o, double scale = 1.0) {
        require_same_shape(o, "add_");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * o.data_[i];
        return *this;
    }
    Tensor& scale_(double a) {
        for (double& v : data_) v *= a;
        return *this;
    }

    double dot(const Tensor& o) const {
        require_same_shape(o, "dot");
        double s = 0.0;
        for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * o.data_[i];
        return s;
    }
    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
    double squared_norm() const { return dot(*this); }
    double norm() const { return std::sqrt(squared_norm()); }
    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    std::string shape_string() const { return shape_str(shape_); }

private:
    static void validate_shape(const Shape& s) {
        for (auto e : s)
            if (e <= 0) fail_data("tensor: non-positive extent in shape " + shape_str(s));
    }

    void require_same_shape(const Tensor& o, const char* op) const {
        if (!same_shape(o))
            fail_data(std::string(op) + ": shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    }

    std::size_t flat_index(std::initializer_list<std::int64_t> idx) const {
        if (idx.size() != shape_.size()) fail_data("tensor: index rank mismatch for " + shape_str(shape_));
        std::int64_t flat = 0;
        std::size_t axis = 0;
        for (auto i : idx) {
            if (i < 0 || i >= shape_[axis]) fail_data("tensor: index out of bounds for " + shape_str(shape_));
            flat = flat * shape_[axis] + i;
            ++axis;
        }
        return static_cast<std::size_t>(flat);
    }

    Shape shape_;
    std::vector<double> data_;
};

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

}  // namespace scoregrad
