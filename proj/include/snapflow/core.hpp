#pragma once

// Core scalar/matrix utilities shared by every snapflow module: a dense
// row-major binary64 matrix, a counter-based deterministic RNG, and the
// GEMM kernel the tape and the nets run on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if !defined(SNAPFLOW_NO_CBLAS) && defined(__has_include)
#if __has_include(<cblas.h>)
#define SNAPFLOW_HAVE_CBLAS 1
#include <cblas.h>
#endif
#endif

namespace snapflow {

using std::size_t;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Contract violations (bad shapes, bad arguments, malformed files).
struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Numerical failures (non-finite state, solver blow-up, non-convergence).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail_arg(const std::string& msg) { throw InvalidArgument(msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw NumericError(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail_arg(msg);
}

// ---------------------------------------------------------------------------
// Matrix (row-major, binary64)
// ---------------------------------------------------------------------------

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(size_t(r) * size_t(c), fill) {
        if (r < 0 || c < 0) fail_arg("Matrix: negative dimensions");
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rws) {
        Matrix m(int(rws.size()), rws.size() ? int(rws.begin()->size()) : 0);
        int i = 0;
        for (const auto& row : rws) {
            if (int(row.size()) != m.cols) fail_arg("Matrix::from_rows: ragged rows");
            int j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    static Matrix column(std::span<const double> v) {
        Matrix m(int(v.size()), 1);
        std::copy(v.begin(), v.end(), m.data.begin());
        return m;
    }

    double& operator()(int i, int j) { return data[size_t(i) * cols + j]; }
    double operator()(int i, int j) const { return data[size_t(i) * cols + j]; }

    double* row_ptr(int i) { return data.data() + size_t(i) * cols; }
    const double* row_ptr(int i) const { return data.data() + size_t(i) * cols; }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    Matrix transposed() const {
        Matrix t(cols, rows);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    std::vector<double> col(int j) const {
        std::vector<double> v(rows);
        for (int i = 0; i < rows; ++i) v[i] = (*this)(i, j);
        return v;
    }

    void set_col(int j, std::span<const double> v) {
        for (int i = 0; i < rows; ++i) (*this)(i, j) = v[i];
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_str(int r, int c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

// C += A * B for raw row-major buffers. Single-threaded BLAS when available.
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n,
                     bool trans_a = false, bool trans_b = false) {
#ifdef SNAPFLOW_HAVE_CBLAS
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, a,
                trans_a ? m : k, b, trans_b ? k : n, 1.0, c, n);
#else
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = trans_a ? a[size_t(p) * m + i] : a[size_t(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = trans_b ? nullptr : b + size_t(p) * n;
            double* crow = c + size_t(i) * n;
            if (!trans_b) {
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += av * b[size_t(j) * k + p];
            }
        }
    }
#endif
}

// C = A * B convenience wrapper.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        fail_arg("matmul: inner dimensions differ " + shape_str(a.rows, a.cols) + " vs " +
                 shape_str(b.rows, b.cols));
    Matrix c(a.rows, b.cols);
    gemm_acc(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
    return c;
}

// ---------------------------------------------------------------------------
// RNG: splitmix64-seeded xoshiro256**, uniform and Gaussian variates.
// Hand-rolled so streams are bit-reproducible across platforms.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : s_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    size_t uniform_index(size_t n) { return size_t(uniform() * double(n)) % n; }

    // Box-Muller; the spare variate is cached so draw order is deterministic.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    Matrix normal_matrix(int rows, int cols) {
        Matrix m(rows, cols);
        for (auto& v : m.data) v = normal();
        return m;
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Derives an independent stream for a named sub-task; used so parallel
// evaluation cells and per-iteration draws stay decoupled.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace snapflow
