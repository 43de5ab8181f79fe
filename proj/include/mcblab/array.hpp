#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcb {

// Dense row-major array of doubles. Rank 0 (scalar), 1 and 2 are used.
struct Array {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Array() = default;
    explicit Array(std::vector<std::size_t> s) : shape(std::move(s)), v(count_of(shape), 0.0) {}
    Array(std::vector<std::size_t> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != count_of(shape)) throw std::invalid_argument("Array: data/shape mismatch");
    }

    static std::size_t count_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Array scalar(double x) { return Array({}, {x}); }
    static Array vec(std::vector<double> data) {
        std::size_t n = data.size();
        return Array({n}, std::move(data));
    }
    static Array zeros(std::vector<std::size_t> s) { return Array(std::move(s)); }

    std::size_t size() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

    double& at(std::size_t i, std::size_t j) { return v[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * shape[1] + j]; }
    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    bool same_shape(const Array& o) const { return shape == o.shape; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

// C = op(A) * op(B), optionally accumulating into C.
void gemm(const Array& a, bool ta, const Array& b, bool tb, Array& c, bool accumulate);

}  // namespace mcb
