#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <new>
#include <string>
#include <vector>

#include "instid/errors.hpp"
#include "instid/rng.hpp"

namespace instid {

// All tensor buffers are 64-byte aligned so vectorized kernels take the same
// code path on every run; otherwise results would depend on heap addresses.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::size_t kAlign = 64;

    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}

    T* allocate(std::size_t n) {
        if (n == 0) return nullptr;
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
    }
    void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlign)); }

    template <typename U>
    bool operator==(const AlignedAlloc<U>&) const {
        return true;
    }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major n-d array. Plain value type: copy means deep copy.
template <typename T>
struct Tensor {
    Shape shape;
    AlignedVec<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, T fill)
        : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor from(Shape s, const std::vector<T>& values) {
        Tensor t;
        t.shape = std::move(s);
        if (static_cast<std::int64_t>(values.size()) != shape_numel(t.shape))
            throw ShapeError("Tensor::from: value count does not match shape " + shape_str(t.shape));
        t.data.assign(values.begin(), values.end());
        return t;
    }

    static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.gaussian()) * stddev;
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool empty() const { return data.empty(); }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    T& at(int i, int j, int k) {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    const T& at(int i, int j, int k) const {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<U>(data[i]);
        return t;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T abs_max() const {
        T m = T(0);
        for (T v : data) m = std::max(m, static_cast<T>(std::abs(static_cast<double>(v))));
        return m;
    }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!same_shape(a, b)) throw ShapeError("max_abs_diff: shape mismatch");
    T m = T(0);
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, static_cast<T>(std::abs(static_cast<double>(a[i] - b[i]))));
    return m;
}

template <typename T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!same_shape(a, b)) throw ShapeError("mean_abs_diff: shape mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += std::abs(static_cast<double>(a[i] - b[i]));
    return a.numel() ? acc / static_cast<double>(a.numel()) : 0.0;
}

}  // namespace instid
