#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "mimg/errors.hpp"
#include "mimg/rng.hpp"

namespace mimg {

// Dense row-major tensor. Shapes are small vectors of extents; most of the
// library works on 2D [rows, cols] views plus [C, H, W] image stacks.
template <class T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }
    TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw ShapeError("tensor data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) {
            if (e < 0) throw ShapeError("negative extent");
            n *= e;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }
    static TensorT full(std::vector<int> s, T v) {
        TensorT t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }
    static TensorT randn(std::vector<int> s, Rng& rng, T stddev = T(1)) {
        TensorT t(std::move(s));
        for (auto& x : t.data) x = static_cast<T>(rng.gaussian()) * stddev;
        return t;
    }

    int ndim() const { return static_cast<int>(shape.size()); }
    int extent(int i) const { return shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    // 2D accessors (valid when ndim() == 2).
    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }
    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    T at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;

// C += A * B with A [m,k], B [k,n], C [m,n]. Written in streaming form
// (rank-1 updates over rows of B) so the inner loop vectorizes without
// reassociating any reduction.
template <class T>
void matmul_accum(T* c, const T* a, const T* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<size_t>(i) * n;
        const T* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// out = transpose(in) with in [m,n].
template <class T>
void transpose_into(T* out, const T* in, int m, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = in[static_cast<size_t>(i) * n + j];
}

} // namespace mimg
