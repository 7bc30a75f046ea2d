#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sarl {

// Dense row-major tensor. Shape is a small vector of extents; rank <= 4 in
// practice (N,C,H,W).
template <class T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(count(shape), T(0)) {}
    Tensor(std::vector<int> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != static_cast<size_t>(count(shape)))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, T value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int dim(int i) const { return shape.at(i); }
    int rank() const { return static_cast<int>(shape.size()); }

    T& operator[](int64_t i) { return v[i]; }
    const T& operator[](int64_t i) const { return v[i]; }

    T& at2(int i, int j) { return v[static_cast<int64_t>(i) * shape[1] + j]; }
    const T& at2(int i, int j) const { return v[static_cast<int64_t>(i) * shape[1] + j]; }

    T& at3(int c, int y, int x) {
        return v[(static_cast<int64_t>(c) * shape[1] + y) * shape[2] + x];
    }
    const T& at3(int c, int y, int x) const {
        return v[(static_cast<int64_t>(c) * shape[1] + y) * shape[2] + x];
    }

    T& at4(int n, int c, int y, int x) {
        return v[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    const T& at4(int n, int c, int y, int x) const {
        return v[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

template <class T>
std::string shape_str(const Tensor<T>& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

}  // namespace sarl
