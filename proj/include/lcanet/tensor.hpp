#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lcanet/errors.hpp"
#include "lcanet/rng.hpp"

namespace lcanet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense N-dimensional array, row-major. Element (i0,..,ik) lives at
/// offset sum(i_j * stride_j) with stride_k = 1.
template <typename S>
struct Tensor {
    Shape shape;
    std::vector<S> data;

    Tensor() = default;

    explicit Tensor(Shape shp) : shape(std::move(shp)) {
        check_dims();
        data.assign(static_cast<std::size_t>(numel(shape)), S(0));
    }

    Tensor(Shape shp, std::vector<S> values) : shape(std::move(shp)), data(std::move(values)) {
        check_dims();
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    Tensor(Shape shp, std::initializer_list<S> values)
        : Tensor(std::move(shp), std::vector<S>(values)) {}

    static Tensor zeros(Shape shp) { return Tensor(std::move(shp)); }

    static Tensor full(Shape shp, S value) {
        Tensor t(std::move(shp));
        for (auto& v : t.data) v = value;
        return t;
    }

    static Tensor ones(Shape shp) { return full(std::move(shp), S(1)); }

    static Tensor uniform(Shape shp, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shp));
        for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor randn(Shape shp, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shp));
        for (auto& v : t.data) v = static_cast<S>(rng.normal() * stddev);
        return t;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t dim(std::size_t i) const { return shape[i]; }

    // 2-D helpers.
    std::int64_t rows() const { return shape.at(0); }
    std::int64_t cols() const { return shape.at(1); }

    S& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const S& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    S& at(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    const S& at(std::int64_t i, std::int64_t j) const {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }

    S& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    const S& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }

private:
    void check_dims() const {
        for (auto d : shape)
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
};

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

}  // namespace lcanet
