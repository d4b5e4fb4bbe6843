#pragma once

// Dense row-major float64 tensor. Rank is dynamic but in practice
// everything here is a vector or a matrix.

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskvar {

inline std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("tensor shape has negative dimension");
        n *= d;
    }
    return n;
}

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("tensor data size does not match shape");
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const {
        if (rank() == 1) return shape[0];
        if (rank() == 2) return shape[1];
        throw std::invalid_argument("cols() needs rank <= 2");
    }

    double& at(int i) { return data[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data[static_cast<std::size_t>(i)]; }
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        t.fill(v);
        return t;
    }

    static Tensor randn(std::vector<int> s, double stddev, std::mt19937_64& rng) {
        Tensor t(std::move(s));
        std::normal_distribution<double> nd(0.0, stddev);
        for (double& v : t.data) v = nd(rng);
        return t;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// C = alpha * op(A) * op(B) + beta * C, row-major. The one kernel hot
// enough to hand to BLAS; a_rows/a_cols are op(A)'s dimensions.
inline void matmul_kernel(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                          const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                alpha, a, lda, b, ldb, beta, c, ldc);
}

extern "C" void openblas_set_num_threads(int);

// Determinism requires a fixed reduction order inside dgemm, so pin the
// BLAS pool to one thread once per process.
inline void pin_blas_single_thread() {
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

inline double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace maskvar
