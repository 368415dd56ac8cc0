#pragma once

// The learned fields: DynamicsNet f(x,t) -> velocity and GrowthNet
// g(x,t) -> positive growth rate. Both are small dense MLPs with leaky-ReLU
// hidden activations; time enters as an extra input coordinate.
//
// Three evaluation paths share the same parameters:
//   * plain batched doubles (inference, GEMM-backed),
//   * dual numbers (exact directional derivatives, no tape),
//   * Tape recording (training; optionally with fused tangent passes that
//     yield the exact Jacobian trace and Frobenius norm).

#include <optional>

#include "snapflow/core.hpp"
#include "snapflow/dual.hpp"
#include "snapflow/tape.hpp"

namespace snapflow {

struct Mlp {
    std::vector<Matrix> weights;  // layer l: (out_l x in_l)
    std::vector<Matrix> biases;   // layer l: (out_l x 1)

    int in_dim() const { return weights.front().cols; }
    int out_dim() const { return weights.back().rows; }
    int layer_count() const { return int(weights.size()); }

    size_t param_count() const {
        size_t n = 0;
        for (size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }

    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(param_count());
        for (size_t l = 0; l < weights.size(); ++l) {
            flat.insert(flat.end(), weights[l].data.begin(), weights[l].data.end());
            flat.insert(flat.end(), biases[l].data.begin(), biases[l].data.end());
        }
        return flat;
    }

    void unflatten(std::span<const double> flat) {
        size_t off = 0;
        for (size_t l = 0; l < weights.size(); ++l) {
            std::copy_n(flat.begin() + off, weights[l].size(), weights[l].data.begin());
            off += weights[l].size();
            std::copy_n(flat.begin() + off, biases[l].size(), biases[l].data.begin());
            off += biases[l].size();
        }
    }
};

inline Mlp make_mlp(int in, std::span<const int> hidden, int out, Rng& rng) {
    Mlp mlp;
    int prev = in;
    std::vector<int> dims(hidden.begin(), hidden.end());
    dims.push_back(out);
    for (int d : dims) {
        const double bound = 1.0 / std::sqrt(double(prev));
        Matrix w(d, prev), b(d, 1);
        for (auto& v : w.data) v = rng.uniform(-bound, bound);
        for (auto& v : b.data) v = rng.uniform(-bound, bound);
        mlp.weights.push_back(std::move(w));
        mlp.biases.push_back(std::move(b));
        prev = d;
    }
    return mlp;
}

// ---------------------------------------------------------------------------
// DynamicsNet: (x, t) in R^{d+1} -> velocity in R^d.
// Three hidden layers of 64, leaky-ReLU(0.01), linear output head.
// ---------------------------------------------------------------------------

struct DynamicsNet {
    int dim = 0;
    double slope = 0.01;
    Mlp mlp;
};

constexpr int kHiddenWidth = 64;

inline DynamicsNet init_dynamics(int dim, uint64_t seed, int hidden_width = kHiddenWidth) {
    if (dim < 1) fail_arg("init_dynamics: dim must be >= 1, got " + std::to_string(dim));
    Rng rng(derive_seed(seed, 0x0d11));
    const int h[3] = {hidden_width, hidden_width, hidden_width};
    return DynamicsNet{dim, 0.01, make_mlp(dim + 1, h, dim, rng)};
}

// Batched plain evaluation: X is (d x n), returns (d x n).
inline Matrix evaluate_f_batch(const DynamicsNet& net, const Matrix& x, double t) {
    if (x.rows != net.dim)
        fail_arg("evaluate_f: state has dimension " + std::to_string(x.rows) + ", net expects " +
                 std::to_string(net.dim));
    if (!std::isfinite(t)) fail_arg("evaluate_f: non-finite time");
    Matrix h(net.dim + 1, x.cols);
    std::copy(x.data.begin(), x.data.end(), h.data.begin());
    for (int j = 0; j < x.cols; ++j) h(net.dim, j) = t;
    const int layers = net.mlp.layer_count();
    for (int l = 0; l < layers; ++l) {
        const Matrix& w = net.mlp.weights[l];
        Matrix next(w.rows, h.cols);
        const double* bias = net.mlp.biases[l].data.data();
        for (int i = 0; i < next.rows; ++i)
            for (int j = 0; j < next.cols; ++j) next(i, j) = bias[i];
        gemm_acc(w.data.data(), h.data.data(), next.data.data(), w.rows, w.cols, h.cols);
        if (l + 1 < layers)
            for (auto& v : next.data) v = v > 0 ? v : net.slope * v;
        h = std::move(next);
    }
    return h;
}

inline std::vector<double> evaluate_f(const DynamicsNet& net, std::span<const double> x, double t) {
    for (double v : x)
        if (!std::isfinite(v)) fail_arg("evaluate_f: non-finite state component");
    Matrix xm(net.dim, 1);
    if (int(x.size()) != net.dim)
        fail_arg("evaluate_f: state has dimension " + std::to_string(x.size()) + ", net expects " +
                 std::to_string(net.dim));
    std::copy(x.begin(), x.end(), xm.data.begin());
    return evaluate_f_batch(net, xm, t).col(0);
}

// Dual-number evaluation for jvp/trace; no tape involvement.
inline std::vector<Dual> evaluate_f_dual(const DynamicsNet& net, std::span<const Dual> x, double t) {
    std::vector<Dual> h(x.begin(), x.end());
    h.push_back(Dual(t, 0.0));
    const int layers = net.mlp.layer_count();
    for (int l = 0; l < layers; ++l) {
        const Matrix& w = net.mlp.weights[l];
        std::vector<Dual> next(w.rows);
        for (int i = 0; i < w.rows; ++i) {
            Dual acc(net.mlp.biases[l](i, 0), 0.0);
            for (int j = 0; j < w.cols; ++j) acc = acc + w(i, j) * h[j];
            next[i] = (l + 1 < layers) ? lrelu(acc, net.slope) : acc;
        }
        h = std::move(next);
    }
    return h;
}

// Full Jacobian df/dx at (x, t) assembled column-by-column from d jvp passes.
inline Matrix jacobian_f(const DynamicsNet& net, std::span<const double> x, double t) {
    const int d = net.dim;
    Matrix jac(d, d);
    std::vector<double> dir(d, 0.0);
    auto f = [&](std::span<const Dual> xd, double td) { return evaluate_f_dual(net, xd, td); };
    for (int k = 0; k < d; ++k) {
        dir.assign(d, 0.0);
        dir[k] = 1.0;
        auto col = jvp(f, x, t, dir);
        for (int i = 0; i < d; ++i) jac(i, k) = col[i];
    }
    return jac;
}

// ---------------------------------------------------------------------------
// GrowthNet: (x, t) -> softplus(mlp) in R+. Two hidden layers of 64.
// ---------------------------------------------------------------------------

struct GrowthNet {
    int dim = 0;
    double slope = 0.01;
    Mlp mlp;
};

inline GrowthNet init_growth(int dim, uint64_t seed, int hidden_width = kHiddenWidth) {
    if (dim < 1) fail_arg("init_growth: dim must be >= 1, got " + std::to_string(dim));
    Rng rng(derive_seed(seed, 0x9307));
    const int h[2] = {hidden_width, hidden_width};
    return GrowthNet{dim, 0.01, make_mlp(dim + 1, h, 1, rng)};
}

inline Matrix evaluate_g_batch(const GrowthNet& net, const Matrix& x, double t) {
    if (x.rows != net.dim)
        fail_arg("evaluate_g: state has dimension " + std::to_string(x.rows) + ", net expects " +
                 std::to_string(net.dim));
    if (!std::isfinite(t)) fail_arg("evaluate_g: non-finite time");
    Matrix h(net.dim + 1, x.cols);
    std::copy(x.data.begin(), x.data.end(), h.data.begin());
    for (int j = 0; j < x.cols; ++j) h(net.dim, j) = t;
    const int layers = net.mlp.layer_count();
    for (int l = 0; l < layers; ++l) {
        const Matrix& w = net.mlp.weights[l];
        Matrix next(w.rows, h.cols);
        const double* bias = net.mlp.biases[l].data.data();
        for (int i = 0; i < next.rows; ++i)
            for (int j = 0; j < next.cols; ++j) next(i, j) = bias[i];
        gemm_acc(w.data.data(), h.data.data(), next.data.data(), w.rows, w.cols, h.cols);
        if (l + 1 < layers)
            for (auto& v : next.data) v = v > 0 ? v : net.slope * v;
        else
            for (auto& v : next.data) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
        h = std::move(next);
    }
    return h;
}

inline double evaluate_g(const GrowthNet& net, std::span<const double> x, double t) {
    for (double v : x)
        if (!std::isfinite(v)) fail_arg("evaluate_g: non-finite state component");
    Matrix xm(net.dim, 1);
    std::copy(x.begin(), x.end(), xm.data.begin());
    return evaluate_g_batch(net, xm, t)(0, 0);
}

// ---------------------------------------------------------------------------
// Tape-side evaluation
// ---------------------------------------------------------------------------

struct MlpVars {
    std::vector<Var> weights;
    std::vector<Var> biases;
};

inline MlpVars make_param_vars(Tape& tape, const Mlp& mlp) {
    MlpVars vars;
    for (size_t l = 0; l < mlp.weights.size(); ++l) {
        vars.weights.push_back(tape.param(mlp.weights[l]));
        vars.biases.push_back(tape.param(mlp.biases[l]));
    }
    return vars;
}

inline MlpVars make_const_vars(Tape& tape, const Mlp& mlp) {
    MlpVars vars;
    for (size_t l = 0; l < mlp.weights.size(); ++l) {
        vars.weights.push_back(tape.constant(mlp.weights[l]));
        vars.biases.push_back(tape.constant(mlp.biases[l]));
    }
    return vars;
}

// Gradients of a scalar loss with respect to every MLP parameter, flattened
// in the same order as Mlp::flatten().
inline std::vector<double> collect_grads(const Tape& tape, const MlpVars& vars) {
    std::vector<double> flat;
    for (size_t l = 0; l < vars.weights.size(); ++l) {
        Matrix gw = tape.grad(vars.weights[l]);
        Matrix gb = tape.grad(vars.biases[l]);
        flat.insert(flat.end(), gw.data.begin(), gw.data.end());
        flat.insert(flat.end(), gb.data.begin(), gb.data.end());
    }
    return flat;
}

struct TapeFieldValue {
    Var f;       // (d x n) velocity
    Var trace;   // (1 x n) Jacobian trace, valid when requested
    Var jacsq;   // (1 x n) squared Frobenius norm, valid when requested
};

// Records f(X, t) on the tape. When trace/jacsq are requested the exact
// Jacobian is assembled by d tangent passes fused into one (d x n*d) block
// per layer, so the hidden-layer GEMMs run at width n*d.
inline TapeFieldValue eval_dynamics_tape(Tape& tape, const MlpVars& vars, double slope, int dim,
                                         Var x, double t, bool want_trace, bool want_jacsq) {
    const int n = x.cols;
    Matrix trow(1, n, t);
    Var xt = tape.row_cat(x, tape.constant(trow));

    Var h1 = tape.lrelu(tape.affine(vars.weights[0], xt, vars.biases[0]), slope);
    Var h2 = tape.lrelu(tape.affine(vars.weights[1], h1, vars.biases[1]), slope);
    Var h3 = tape.lrelu(tape.affine(vars.weights[2], h2, vars.biases[2]), slope);
    Var f = tape.affine(vars.weights[3], h3, vars.biases[3]);

    TapeFieldValue out{f, {}, {}};
    if (!want_trace && !want_jacsq) return out;

    // Tangent seed for direction k is W1[:, k] broadcast over the batch;
    // blocks are laid out [dir0 | dir1 | ...] along columns.
    Var u;
    for (int k = 0; k < dim; ++k) {
        Var wcol = tape.slice_cols(vars.weights[0], k, 1);
        Var blk = tape.col_broadcast(wcol, n);
        u = k == 0 ? blk : tape.col_cat(u, blk);
    }
    u = tape.lrelu_mask_mul(u, h1, slope, dim);
    u = tape.lrelu_mask_mul(tape.matmul(vars.weights[1], u), h2, slope, dim);
    u = tape.lrelu_mask_mul(tape.matmul(vars.weights[2], u), h3, slope, dim);
    Var jf = tape.matmul(vars.weights[3], u);  // (d x n*d): stacked Jacobian columns

    if (want_trace) out.trace = tape.trace_gather(jf, n, dim);
    if (want_jacsq) out.jacsq = tape.fold_blocks_sum(tape.col_sumsq(jf), dim);
    return out;
}

// Records g(X, t) = softplus(mlp) on the tape (frozen or trainable depends
// on how `vars` was created). Returns a (1 x n) Var of growth rates.
inline Var eval_growth_tape(Tape& tape, const MlpVars& vars, double slope, Var x, double t) {
    Matrix trow(1, x.cols, t);
    Var h = tape.row_cat(x, tape.constant(trow));
    const int layers = int(vars.weights.size());
    for (int l = 0; l < layers; ++l) {
        h = tape.affine(vars.weights[l], h, vars.biases[l]);
        h = (l + 1 < layers) ? tape.lrelu(h, slope) : tape.softplus(h);
    }
    return h;
}

}  // namespace snapflow
