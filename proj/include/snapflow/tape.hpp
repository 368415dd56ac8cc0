#pragma once

// Reverse-mode automatic differentiation over dense binary64 matrices.
//
// The Tape is define-by-run: recording an op computes its forward value
// immediately and appends one node, so the node list is always in topological
// order. Values and adjoints live in two flat arenas whose capacity survives
// reset(), which keeps a training loop allocation-free after the first
// iteration. A Tape is single-threaded; independent Tapes may run on
// independent threads.

#include <array>
#include <cstdint>

#include "snapflow/core.hpp"

namespace snapflow {

enum class Op : uint8_t {
    Const,
    Param,
    MatMul,        // a(m,k) * b(k,n)
    Affine,        // a(m,k) * b(k,n) + c(m,1) broadcast over columns
    Add,
    Sub,
    Mul,           // elementwise
    Div,           // elementwise
    Scale,         // aux * a
    AddC,          // a + aux
    Lrelu,         // x > 0 ? x : aux * x
    LreluMaskMul,  // lrelu'(b) tiled aux_i times, elementwise * a
    Square,
    Sqrt,
    Exp,
    Log,
    Softplus,
    Sum,           // -> 1x1
    Mean,          // -> 1x1
    ColSumSq,      // -> 1xn
    ColDot,        // -> 1xn
    CosineCols,    // columnwise cosine(a_j, b_j); degenerate columns -> 1
    RowCat,
    ColCat,
    SliceRows,     // aux_i = first row
    SliceCols,     // aux_i = first col
    ColBcast,      // a(m,1) -> (m, aux_i)
    TraceGather,   // a(d, n*d) -> 1xn, o_j = sum_k a(k, k*n+j)
    FoldBlocksSum, // a(1, n*d) -> 1xn, sum of the d column blocks
    KnnHinge,      // a(d,q), b(d,q*k) fixed neighbors -> 1xq hinge sums
};

struct Var {
    int id = -1;
    int rows = 0;
    int cols = 0;
    bool valid() const { return id >= 0; }
    bool is_scalar() const { return rows == 1 && cols == 1; }
};

class Tape {
  public:
    // ---- recording -------------------------------------------------------

    Var constant(const Matrix& m) { return leaf(Op::Const, m, false); }
    Var param(const Matrix& m) { return leaf(Op::Param, m, true); }

    Var matmul(Var a, Var b) {
        if (shape(a).second != shape(b).first)
            fail_arg("matmul: inner dimensions differ " + shape_str(a.rows, a.cols) + " vs " +
                     shape_str(b.rows, b.cols));
        Var out = push(Op::MatMul, a.rows, b.cols, a, b);
        gemm_acc(val(a), val(b), val(out), a.rows, a.cols, b.cols);
        return out;
    }

    // w*x + b with b broadcast over columns. One node per dense layer.
    Var affine(Var w, Var x, Var b) {
        if (w.cols != x.rows || b.rows != w.rows || b.cols != 1)
            fail_arg("affine: incompatible shapes " + shape_str(w.rows, w.cols) + " * " +
                     shape_str(x.rows, x.cols) + " + " + shape_str(b.rows, b.cols));
        Var out = push(Op::Affine, w.rows, x.cols, w, x, b);
        double* o = val(out);
        const double* bias = val(b);
        for (int i = 0; i < out.rows; ++i)
            for (int j = 0; j < out.cols; ++j) o[size_t(i) * out.cols + j] = bias[i];
        gemm_acc(val(w), val(x), o, w.rows, w.cols, x.cols);
        return out;
    }

    Var add(Var a, Var b) { return binary_same(Op::Add, a, b); }
    Var sub(Var a, Var b) { return binary_same(Op::Sub, a, b); }
    Var mul(Var a, Var b) { return binary_same(Op::Mul, a, b); }
    Var div(Var a, Var b) { return binary_same(Op::Div, a, b); }

    Var scale(Var a, double c) {
        Var out = push(Op::Scale, a.rows, a.cols, a);
        node_aux_.back() = c;
        map_unary(a, out, [c](double x) { return c * x; });
        return out;
    }

    Var add_const(Var a, double c) {
        Var out = push(Op::AddC, a.rows, a.cols, a);
        node_aux_.back() = c;
        map_unary(a, out, [c](double x) { return x + c; });
        return out;
    }

    Var lrelu(Var a, double slope) {
        Var out = push(Op::Lrelu, a.rows, a.cols, a);
        node_aux_.back() = slope;
        map_unary(a, out, [slope](double x) { return x > 0 ? x : slope * x; });
        return out;
    }

    // out = lrelu'(ref) (*) a, with ref's mask tiled `rep` times along columns.
    // No gradient flows into ref: leaky-ReLU's derivative is piecewise
    // constant, so that term is zero almost everywhere.
    Var lrelu_mask_mul(Var a, Var ref, double slope, int rep = 1) {
        if (a.rows != ref.rows || a.cols != ref.cols * rep)
            fail_arg("lrelu_mask_mul: mask " + shape_str(ref.rows, ref.cols) + " x" +
                     std::to_string(rep) + " does not tile " + shape_str(a.rows, a.cols));
        Var out = push(Op::LreluMaskMul, a.rows, a.cols, a, ref);
        node_aux_.back() = slope;
        node_auxi_.back() = rep;
        const double* av = val(a);
        const double* rv = val(ref);
        double* o = val(out);
        const int n = ref.cols;
        for (int i = 0; i < a.rows; ++i)
            for (int j = 0; j < a.cols; ++j) {
                const double m = rv[size_t(i) * n + (j % n)] > 0 ? 1.0 : slope;
                o[size_t(i) * a.cols + j] = m * av[size_t(i) * a.cols + j];
            }
        return out;
    }

    Var square(Var a) {
        Var out = push(Op::Square, a.rows, a.cols, a);
        map_unary(a, out, [](double x) { return x * x; });
        return out;
    }
    Var sqrt(Var a) {
        Var out = push(Op::Sqrt, a.rows, a.cols, a);
        map_unary(a, out, [](double x) { return std::sqrt(x); });
        return out;
    }
    Var exp(Var a) {
        Var out = push(Op::Exp, a.rows, a.cols, a);
        map_unary(a, out, [](double x) { return std::exp(x); });
        return out;
    }
    Var log(Var a) {
        Var out = push(Op::Log, a.rows, a.cols, a);
        map_unary(a, out, [](double x) { return std::log(x); });
        return out;
    }
    Var softplus(Var a) {
        Var out = push(Op::Softplus, a.rows, a.cols, a);
        // Overflow-safe: softplus(x) = max(x,0) + log1p(exp(-|x|)).
        map_unary(a, out, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
        return out;
    }

    Var sum(Var a) {
        Var out = push(Op::Sum, 1, 1, a);
        double s = 0;
        const double* av = val(a);
        for (size_t i = 0; i < count(a); ++i) s += av[i];
        *val(out) = s;
        return out;
    }
    Var mean(Var a) {
        if (count(a) == 0) fail_arg("mean: empty operand");
        Var out = push(Op::Mean, 1, 1, a);
        double s = 0;
        const double* av = val(a);
        for (size_t i = 0; i < count(a); ++i) s += av[i];
        *val(out) = s / double(count(a));
        return out;
    }

    Var col_sumsq(Var a) {
        Var out = push(Op::ColSumSq, 1, a.cols, a);
        const double* av = val(a);
        double* o = val(out);
        for (int j = 0; j < a.cols; ++j) o[j] = 0;
        for (int i = 0; i < a.rows; ++i)
            for (int j = 0; j < a.cols; ++j) o[j] += av[size_t(i) * a.cols + j] * av[size_t(i) * a.cols + j];
        return out;
    }

    Var col_dot(Var a, Var b) {
        if (a.rows != b.rows || a.cols != b.cols)
            fail_arg("col_dot: shape mismatch " + shape_str(a.rows, a.cols) + " vs " +
                     shape_str(b.rows, b.cols));
        Var out = push(Op::ColDot, 1, a.cols, a, b);
        const double* av = val(a);
        const double* bv = val(b);
        double* o = val(out);
        for (int j = 0; j < a.cols; ++j) o[j] = 0;
        for (int i = 0; i < a.rows; ++i)
            for (int j = 0; j < a.cols; ++j) o[j] += av[size_t(i) * a.cols + j] * bv[size_t(i) * a.cols + j];
        return out;
    }

    // Columnwise cosine similarity. Columns where either norm is ~0 emit 1
    // (a zero loss contribution under 1 - cos); the count is reported back.
    Var cosine_cols(Var a, Var b, int* degenerate_count = nullptr) {
        if (a.rows != b.rows || a.cols != b.cols)
            fail_arg("cosine_cols: shape mismatch " + shape_str(a.rows, a.cols) + " vs " +
                     shape_str(b.rows, b.cols));
        Var out = push(Op::CosineCols, 1, a.cols, a, b);
        int degen = 0;
        compute_cosine(a, b, out, &degen);
        if (degenerate_count) *degenerate_count = degen;
        return out;
    }

    Var row_cat(Var a, Var b) {
        if (a.cols != b.cols)
            fail_arg("row_cat: column counts differ " + shape_str(a.rows, a.cols) + " vs " +
                     shape_str(b.rows, b.cols));
        Var out = push(Op::RowCat, a.rows + b.rows, a.cols, a, b);
        std::memcpy(val(out), val(a), count(a) * sizeof(double));
        std::memcpy(val(out) + count(a), val(b), count(b) * sizeof(double));
        return out;
    }

    Var col_cat(Var a, Var b) {
        if (a.rows != b.rows)
            fail_arg("col_cat: row counts differ " + shape_str(a.rows, a.cols) + " vs " +
                     shape_str(b.rows, b.cols));
        Var out = push(Op::ColCat, a.rows, a.cols + b.cols, a, b);
        double* o = val(out);
        const double* av = val(a);
        const double* bv = val(b);
        for (int i = 0; i < a.rows; ++i) {
            std::memcpy(o + size_t(i) * out.cols, av + size_t(i) * a.cols, size_t(a.cols) * sizeof(double));
            std::memcpy(o + size_t(i) * out.cols + a.cols, bv + size_t(i) * b.cols,
                        size_t(b.cols) * sizeof(double));
        }
        return out;
    }

    Var slice_rows(Var a, int first, int n) {
        if (first < 0 || first + n > a.rows) fail_arg("slice_rows: range out of bounds");
        Var out = push(Op::SliceRows, n, a.cols, a);
        node_auxi_.back() = first;
        std::memcpy(val(out), val(a) + size_t(first) * a.cols, size_t(n) * a.cols * sizeof(double));
        return out;
    }

    Var slice_cols(Var a, int first, int n) {
        if (first < 0 || first + n > a.cols) fail_arg("slice_cols: range out of bounds");
        Var out = push(Op::SliceCols, a.rows, n, a);
        node_auxi_.back() = first;
        double* o = val(out);
        const double* av = val(a);
        for (int i = 0; i < a.rows; ++i)
            std::memcpy(o + size_t(i) * n, av + size_t(i) * a.cols + first, size_t(n) * sizeof(double));
        return out;
    }

    Var col_broadcast(Var a, int n) {
        if (a.cols != 1) fail_arg("col_broadcast: operand must be a column " + shape_str(a.rows, a.cols));
        Var out = push(Op::ColBcast, a.rows, n, a);
        node_auxi_.back() = n;
        const double* av = val(a);
        double* o = val(out);
        for (int i = 0; i < a.rows; ++i)
            for (int j = 0; j < n; ++j) o[size_t(i) * n + j] = av[i];
        return out;
    }

    // a holds d stacked directional-derivative blocks (d x n each); returns
    // the Jacobian trace per column: o_j = sum_k a(k, k*n + j).
    Var trace_gather(Var a, int n, int d) {
        if (a.rows != d || a.cols != n * d) fail_arg("trace_gather: expected (d, n*d) operand");
        Var out = push(Op::TraceGather, 1, n, a);
        node_auxi_.back() = d;
        const double* av = val(a);
        double* o = val(out);
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int k = 0; k < d; ++k) s += av[size_t(k) * a.cols + size_t(k) * n + j];
            o[j] = s;
        }
        return out;
    }

    Var fold_blocks_sum(Var a, int d) {
        if (a.rows != 1 || a.cols % d != 0) fail_arg("fold_blocks_sum: expected (1, n*d) operand");
        const int n = a.cols / d;
        Var out = push(Op::FoldBlocksSum, 1, n, a);
        node_auxi_.back() = d;
        const double* av = val(a);
        double* o = val(out);
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int k = 0; k < d; ++k) s += av[size_t(k) * n + j];
            o[j] = s;
        }
        return out;
    }

    // Sum over k fixed neighbors of max(0, |x_j - z| - h) per query column.
    // Neighbors (d x q*k) are a constant chosen before recording; gradients
    // flow through the query positions only.
    Var knn_hinge(Var x, Var neighbors, int k, double h) {
        if (neighbors.rows != x.rows || neighbors.cols != x.cols * k)
            fail_arg("knn_hinge: neighbor block " + shape_str(neighbors.rows, neighbors.cols) +
                     " does not match queries " + shape_str(x.rows, x.cols) + " with k=" +
                     std::to_string(k));
        Var out = push(Op::KnnHinge, 1, x.cols, x, neighbors);
        node_aux_.back() = h;
        node_auxi_.back() = k;
        const double* xv = val(x);
        const double* zv = val(neighbors);
        double* o = val(out);
        const int d = x.rows;
        const int q = x.cols;
        for (int j = 0; j < q; ++j) {
            double s = 0;
            for (int u = 0; u < k; ++u) {
                double dist2 = 0;
                for (int i = 0; i < d; ++i) {
                    const double diff = xv[size_t(i) * q + j] - zv[size_t(i) * q * k + size_t(j) * k + u];
                    dist2 += diff * diff;
                }
                const double dist = std::sqrt(dist2);
                if (dist > h) s += dist - h;
            }
            o[j] = s;
        }
        return out;
    }

    // ---- access ----------------------------------------------------------

    Matrix value(Var v) const {
        Matrix m(v.rows, v.cols);
        std::memcpy(m.data.data(), vals_.data() + node_off_[v.id], count(v) * sizeof(double));
        return m;
    }

    double scalar_value(Var v) const {
        if (!v.is_scalar()) fail_arg("scalar_value: Var is " + shape_str(v.rows, v.cols));
        return vals_[node_off_[v.id]];
    }

    Matrix grad(Var v) const {
        Matrix m(v.rows, v.cols);
        std::memcpy(m.data.data(), grads_.data() + node_off_[v.id], count(v) * sizeof(double));
        return m;
    }

    // In-place overwrite of a leaf's value (used by finite-difference checks
    // together with replay()). Shape must match.
    void set_value(Var v, const Matrix& m) {
        if (m.rows != v.rows || m.cols != v.cols)
            fail_arg("set_value: shape mismatch " + shape_str(v.rows, v.cols) + " vs " +
                     shape_str(m.rows, m.cols));
        std::memcpy(vals_.data() + node_off_[v.id], m.data.data(), count(v) * sizeof(double));
    }

    size_t node_count() const { return node_op_.size(); }
    const std::vector<double>& raw_values() const { return vals_; }

    // ---- execution -------------------------------------------------------

    // Recompute every node's forward value in recording order.
    void replay() {
        for (int id = 0; id < int(node_op_.size()); ++id) forward_node(id);
    }

    // Reverse pass from a scalar output; fills adjoints of every node that
    // requires grad. Deterministic: fixed reverse order, fixed kernels.
    void backward(Var output) {
        if (!output.is_scalar())
            fail_arg("backward: output must be scalar, got " + shape_str(output.rows, output.cols));
        grads_.assign(vals_.size(), 0.0);
        grads_[node_off_[output.id]] = 1.0;
        for (int id = output.id; id >= 0; --id) {
            if (!node_ng_[id]) continue;
            backward_node(id);
        }
    }

    // Drops all nodes but keeps arena capacity (a training step records a
    // fresh graph every iteration).
    void reset() {
        node_op_.clear();
        node_in_.clear();
        node_shape_.clear();
        node_off_.clear();
        node_aux_.clear();
        node_auxi_.clear();
        node_ng_.clear();
        used_ = 0;
    }

  private:
    std::vector<Op> node_op_;
    std::vector<std::array<int, 3>> node_in_;
    std::vector<std::pair<int, int>> node_shape_;
    std::vector<size_t> node_off_;
    std::vector<double> node_aux_;
    std::vector<int> node_auxi_;
    std::vector<char> node_ng_;
    std::vector<double> vals_;
    std::vector<double> grads_;
    size_t used_ = 0;

    std::pair<int, int> shape(Var v) const { return node_shape_[v.id]; }
    size_t count(Var v) const { return size_t(v.rows) * size_t(v.cols); }
    double* val(Var v) { return vals_.data() + node_off_[v.id]; }
    const double* val(Var v) const { return vals_.data() + node_off_[v.id]; }

    Var push(Op op, int rows, int cols, Var a = {}, Var b = {}, Var c = {}) {
        const size_t n = size_t(rows) * size_t(cols);
        if (used_ + n > vals_.size()) vals_.resize(std::max(used_ + n, vals_.size() * 2 + 64));
        node_op_.push_back(op);
        node_in_.push_back({a.id, b.id, c.id});
        node_shape_.push_back({rows, cols});
        node_off_.push_back(used_);
        node_aux_.push_back(0.0);
        node_auxi_.push_back(0);
        const bool ng = op == Op::Param ||
                        (a.valid() && node_ng_[a.id]) ||
                        (b.valid() && node_ng_[b.id]) ||
                        (c.valid() && node_ng_[c.id]);
        node_ng_.push_back(ng ? 1 : 0);
        used_ += n;
        return Var{int(node_op_.size()) - 1, rows, cols};
    }

    Var leaf(Op op, const Matrix& m, bool /*param*/) {
        Var v = push(op, m.rows, m.cols);
        std::memcpy(val(v), m.data.data(), m.size() * sizeof(double));
        return v;
    }

    Var binary_same(Op op, Var a, Var b) {
        if (a.rows != b.rows || a.cols != b.cols)
            fail_arg("elementwise op: shape mismatch " + shape_str(a.rows, a.cols) + " vs " +
                     shape_str(b.rows, b.cols));
        Var out = push(op, a.rows, a.cols, a, b);
        const double* av = val(a);
        const double* bv = val(b);
        double* o = val(out);
        const size_t n = count(out);
        switch (op) {
            case Op::Add: for (size_t i = 0; i < n; ++i) o[i] = av[i] + bv[i]; break;
            case Op::Sub: for (size_t i = 0; i < n; ++i) o[i] = av[i] - bv[i]; break;
            case Op::Mul: for (size_t i = 0; i < n; ++i) o[i] = av[i] * bv[i]; break;
            case Op::Div: for (size_t i = 0; i < n; ++i) o[i] = av[i] / bv[i]; break;
            default: fail_arg("binary_same: bad op");
        }
        return out;
    }

    template <class F>
    void map_unary(Var a, Var out, F f) {
        const double* av = val(a);
        double* o = val(out);
        const size_t n = count(out);
        for (size_t i = 0; i < n; ++i) o[i] = f(av[i]);
    }

    void compute_cosine(Var a, Var b, Var out, int* degen) {
        const double* av = val(a);
        const double* bv = val(b);
        double* o = val(out);
        const int rows = a.rows, cols = a.cols;
        for (int j = 0; j < cols; ++j) {
            double na = 0, nb = 0, dot = 0;
            for (int i = 0; i < rows; ++i) {
                const double x = av[size_t(i) * cols + j];
                const double y = bv[size_t(i) * cols + j];
                na += x * x;
                nb += y * y;
                dot += x * y;
            }
            if (na < 1e-24 || nb < 1e-24) {
                o[j] = 1.0;
                if (degen) ++*degen;
            } else {
                o[j] = dot / (std::sqrt(na) * std::sqrt(nb));
            }
        }
    }

    void forward_node(int id);
    void backward_node(int id);
};

// ---------------------------------------------------------------------------
// Replay: recompute a node's value from its inputs (same kernels as record).
// ---------------------------------------------------------------------------

inline void Tape::forward_node(int id) {
    const Op op = node_op_[id];
    if (op == Op::Const || op == Op::Param) return;
    const auto [rows, cols] = node_shape_[id];
    Var out{id, rows, cols};
    auto in = [&](int slot) {
        const int iid = node_in_[id][slot];
        return Var{iid, node_shape_[iid].first, node_shape_[iid].second};
    };
    const double aux = node_aux_[id];
    const int auxi = node_auxi_[id];
    double* o = val(out);
    switch (op) {
        case Op::MatMul: {
            Var a = in(0), b = in(1);
            std::fill(o, o + count(out), 0.0);
            gemm_acc(val(a), val(b), o, a.rows, a.cols, b.cols);
            break;
        }
        case Op::Affine: {
            Var w = in(0), x = in(1), b = in(2);
            const double* bias = val(b);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) o[size_t(i) * cols + j] = bias[i];
            gemm_acc(val(w), val(x), o, w.rows, w.cols, x.cols);
            break;
        }
        case Op::Add: case Op::Sub: case Op::Mul: case Op::Div: {
            Var a = in(0), b = in(1);
            const double* av = val(a);
            const double* bv = val(b);
            const size_t n = count(out);
            switch (op) {
                case Op::Add: for (size_t i = 0; i < n; ++i) o[i] = av[i] + bv[i]; break;
                case Op::Sub: for (size_t i = 0; i < n; ++i) o[i] = av[i] - bv[i]; break;
                case Op::Mul: for (size_t i = 0; i < n; ++i) o[i] = av[i] * bv[i]; break;
                default:      for (size_t i = 0; i < n; ++i) o[i] = av[i] / bv[i]; break;
            }
            break;
        }
        case Op::Scale: map_unary(in(0), out, [aux](double x) { return aux * x; }); break;
        case Op::AddC: map_unary(in(0), out, [aux](double x) { return x + aux; }); break;
        case Op::Lrelu: map_unary(in(0), out, [aux](double x) { return x > 0 ? x : aux * x; }); break;
        case Op::LreluMaskMul: {
            Var a = in(0), ref = in(1);
            const double* av = val(a);
            const double* rv = val(ref);
            const int n = ref.cols;
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    const double m = rv[size_t(i) * n + (j % n)] > 0 ? 1.0 : aux;
                    o[size_t(i) * cols + j] = m * av[size_t(i) * cols + j];
                }
            break;
        }
        case Op::Square: map_unary(in(0), out, [](double x) { return x * x; }); break;
        case Op::Sqrt: map_unary(in(0), out, [](double x) { return std::sqrt(x); }); break;
        case Op::Exp: map_unary(in(0), out, [](double x) { return std::exp(x); }); break;
        case Op::Log: map_unary(in(0), out, [](double x) { return std::log(x); }); break;
        case Op::Softplus:
            map_unary(in(0), out, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
            break;
        case Op::Sum: case Op::Mean: {
            Var a = in(0);
            double s = 0;
            const double* av = val(a);
            for (size_t i = 0; i < count(a); ++i) s += av[i];
            *o = op == Op::Sum ? s : s / double(count(a));
            break;
        }
        case Op::ColSumSq: {
            Var a = in(0);
            const double* av = val(a);
            for (int j = 0; j < cols; ++j) o[j] = 0;
            for (int i = 0; i < a.rows; ++i)
                for (int j = 0; j < cols; ++j) o[j] += av[size_t(i) * cols + j] * av[size_t(i) * cols + j];
            break;
        }
        case Op::ColDot: {
            Var a = in(0), b = in(1);
            const double* av = val(a);
            const double* bv = val(b);
            for (int j = 0; j < cols; ++j) o[j] = 0;
            for (int i = 0; i < a.rows; ++i)
                for (int j = 0; j < cols; ++j) o[j] += av[size_t(i) * cols + j] * bv[size_t(i) * cols + j];
            break;
        }
        case Op::CosineCols: compute_cosine(in(0), in(1), out, nullptr); break;
        case Op::RowCat: {
            Var a = in(0), b = in(1);
            std::memcpy(o, val(a), count(a) * sizeof(double));
            std::memcpy(o + count(a), val(b), count(b) * sizeof(double));
            break;
        }
        case Op::ColCat: {
            Var a = in(0), b = in(1);
            const double* av = val(a);
            const double* bv = val(b);
            for (int i = 0; i < rows; ++i) {
                std::memcpy(o + size_t(i) * cols, av + size_t(i) * a.cols, size_t(a.cols) * sizeof(double));
                std::memcpy(o + size_t(i) * cols + a.cols, bv + size_t(i) * b.cols,
                            size_t(b.cols) * sizeof(double));
            }
            break;
        }
        case Op::SliceRows: {
            Var a = in(0);
            std::memcpy(o, val(a) + size_t(auxi) * a.cols, count(out) * sizeof(double));
            break;
        }
        case Op::SliceCols: {
            Var a = in(0);
            const double* av = val(a);
            for (int i = 0; i < rows; ++i)
                std::memcpy(o + size_t(i) * cols, av + size_t(i) * a.cols + auxi, size_t(cols) * sizeof(double));
            break;
        }
        case Op::ColBcast: {
            Var a = in(0);
            const double* av = val(a);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) o[size_t(i) * cols + j] = av[i];
            break;
        }
        case Op::TraceGather: {
            Var a = in(0);
            const double* av = val(a);
            const int d = auxi, n = cols;
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int k = 0; k < d; ++k) s += av[size_t(k) * a.cols + size_t(k) * n + j];
                o[j] = s;
            }
            break;
        }
        case Op::FoldBlocksSum: {
            Var a = in(0);
            const double* av = val(a);
            const int d = auxi, n = cols;
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int k = 0; k < d; ++k) s += av[size_t(k) * n + j];
                o[j] = s;
            }
            break;
        }
        case Op::KnnHinge: {
            Var x = in(0), z = in(1);
            const double* xv = val(x);
            const double* zv = val(z);
            const int d = x.rows, q = x.cols, k = auxi;
            for (int j = 0; j < q; ++j) {
                double s = 0;
                for (int u = 0; u < k; ++u) {
                    double dist2 = 0;
                    for (int i = 0; i < d; ++i) {
                        const double diff = xv[size_t(i) * q + j] - zv[size_t(i) * q * k + size_t(j) * k + u];
                        dist2 += diff * diff;
                    }
                    const double dist = std::sqrt(dist2);
                    if (dist > aux) s += dist - aux;
                }
                o[j] = s;
            }
            break;
        }
        case Op::Const: case Op::Param: break;
    }
}

// ---------------------------------------------------------------------------
// Adjoints
// ---------------------------------------------------------------------------

inline void Tape::backward_node(int id) {
    const Op op = node_op_[id];
    if (op == Op::Const || op == Op::Param) return;
    const auto [rows, cols] = node_shape_[id];
    Var out{id, rows, cols};
    auto in = [&](int slot) {
        const int iid = node_in_[id][slot];
        return Var{iid, node_shape_[iid].first, node_shape_[iid].second};
    };
    auto g = [&](Var v) { return grads_.data() + node_off_[v.id]; };
    auto wants = [&](Var v) { return bool(node_ng_[v.id]); };
    const double* go = g(out);
    const double aux = node_aux_[id];
    const int auxi = node_auxi_[id];
    const size_t n = count(out);

    switch (op) {
        case Op::MatMul: {
            Var a = in(0), b = in(1);
            if (wants(a)) gemm_acc(go, val(b), g(a), a.rows, b.cols, a.cols, false, true);
            if (wants(b)) gemm_acc(val(a), go, g(b), b.rows, a.rows, b.cols, true, false);
            break;
        }
        case Op::Affine: {
            Var w = in(0), x = in(1), b = in(2);
            if (wants(w)) gemm_acc(go, val(x), g(w), w.rows, x.cols, w.cols, false, true);
            if (wants(x)) gemm_acc(val(w), go, g(x), x.rows, w.rows, x.cols, true, false);
            if (wants(b)) {
                double* gb = g(b);
                for (int i = 0; i < rows; ++i) {
                    double s = 0;
                    for (int j = 0; j < cols; ++j) s += go[size_t(i) * cols + j];
                    gb[i] += s;
                }
            }
            break;
        }
        case Op::Add: {
            Var a = in(0), b = in(1);
            if (wants(a)) { double* ga = g(a); for (size_t i = 0; i < n; ++i) ga[i] += go[i]; }
            if (wants(b)) { double* gb = g(b); for (size_t i = 0; i < n; ++i) gb[i] += go[i]; }
            break;
        }
        case Op::Sub: {
            Var a = in(0), b = in(1);
            if (wants(a)) { double* ga = g(a); for (size_t i = 0; i < n; ++i) ga[i] += go[i]; }
            if (wants(b)) { double* gb = g(b); for (size_t i = 0; i < n; ++i) gb[i] -= go[i]; }
            break;
        }
        case Op::Mul: {
            Var a = in(0), b = in(1);
            const double* av = val(a);
            const double* bv = val(b);
            if (wants(a)) { double* ga = g(a); for (size_t i = 0; i < n; ++i) ga[i] += go[i] * bv[i]; }
            if (wants(b)) { double* gb = g(b); for (size_t i = 0; i < n; ++i) gb[i] += go[i] * av[i]; }
            break;
        }
        case Op::Div: {
            Var a = in(0), b = in(1);
            const double* av = val(a);
            const double* bv = val(b);
            if (wants(a)) { double* ga = g(a); for (size_t i = 0; i < n; ++i) ga[i] += go[i] / bv[i]; }
            if (wants(b)) {
                double* gb = g(b);
                for (size_t i = 0; i < n; ++i) gb[i] -= go[i] * av[i] / (bv[i] * bv[i]);
            }
            break;
        }
        case Op::Scale: {
            Var a = in(0);
            if (wants(a)) { double* ga = g(a); for (size_t i = 0; i < n; ++i) ga[i] += aux * go[i]; }
            break;
        }
        case Op::AddC: {
            Var a = in(0);
            if (wants(a)) { double* ga = g(a); for (size_t i = 0; i < n; ++i) ga[i] += go[i]; }
            break;
        }
        case Op::Lrelu: {
            Var a = in(0);
            if (wants(a)) {
                const double* ov = val(out);
                double* ga = g(a);
                for (size_t i = 0; i < n; ++i) ga[i] += (ov[i] > 0 ? 1.0 : aux) * go[i];
            }
            break;
        }
        case Op::LreluMaskMul: {
            Var a = in(0), ref = in(1);
            if (wants(a)) {
                const double* rv = val(ref);
                double* ga = g(a);
                const int nref = ref.cols;
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) {
                        const double m = rv[size_t(i) * nref + (j % nref)] > 0 ? 1.0 : aux;
                        ga[size_t(i) * cols + j] += m * go[size_t(i) * cols + j];
                    }
            }
            break;
        }
        case Op::Square: {
            Var a = in(0);
            if (wants(a)) {
                const double* av = val(a);
                double* ga = g(a);
                for (size_t i = 0; i < n; ++i) ga[i] += 2.0 * av[i] * go[i];
            }
            break;
        }
        case Op::Sqrt: {
            Var a = in(0);
            if (wants(a)) {
                const double* ov = val(out);
                double* ga = g(a);
                for (size_t i = 0; i < n; ++i) ga[i] += go[i] / (2.0 * ov[i]);
            }
            break;
        }
        case Op::Exp: {
            Var a = in(0);
            if (wants(a)) {
                const double* ov = val(out);
                double* ga = g(a);
                for (size_t i = 0; i < n; ++i) ga[i] += ov[i] * go[i];
            }
            break;
        }
        case Op::Log: {
            Var a = in(0);
            if (wants(a)) {
                const double* av = val(a);
                double* ga = g(a);
                for (size_t i = 0; i < n; ++i) ga[i] += go[i] / av[i];
            }
            break;
        }
        case Op::Softplus: {
            Var a = in(0);
            if (wants(a)) {
                const double* av = val(a);
                double* ga = g(a);
                for (size_t i = 0; i < n; ++i) ga[i] += go[i] / (1.0 + std::exp(-av[i]));
            }
            break;
        }
        case Op::Sum: {
            Var a = in(0);
            if (wants(a)) {
                double* ga = g(a);
                const double s = *go;
                for (size_t i = 0; i < count(a); ++i) ga[i] += s;
            }
            break;
        }
        case Op::Mean: {
            Var a = in(0);
            if (wants(a)) {
                double* ga = g(a);
                const double s = *go / double(count(a));
                for (size_t i = 0; i < count(a); ++i) ga[i] += s;
            }
            break;
        }
        case Op::ColSumSq: {
            Var a = in(0);
            if (wants(a)) {
                const double* av = val(a);
                double* ga = g(a);
                for (int i = 0; i < a.rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        ga[size_t(i) * cols + j] += 2.0 * av[size_t(i) * cols + j] * go[j];
            }
            break;
        }
        case Op::ColDot: {
            Var a = in(0), b = in(1);
            const double* av = val(a);
            const double* bv = val(b);
            if (wants(a)) {
                double* ga = g(a);
                for (int i = 0; i < a.rows; ++i)
                    for (int j = 0; j < cols; ++j) ga[size_t(i) * cols + j] += bv[size_t(i) * cols + j] * go[j];
            }
            if (wants(b)) {
                double* gb = g(b);
                for (int i = 0; i < a.rows; ++i)
                    for (int j = 0; j < cols; ++j) gb[size_t(i) * cols + j] += av[size_t(i) * cols + j] * go[j];
            }
            break;
        }
        case Op::CosineCols: {
            Var a = in(0), b = in(1);
            const double* av = val(a);
            const double* bv = val(b);
            const double* ov = val(out);
            const int r = a.rows;
            for (int j = 0; j < cols; ++j) {
                double na = 0, nb = 0;
                for (int i = 0; i < r; ++i) {
                    na += av[size_t(i) * cols + j] * av[size_t(i) * cols + j];
                    nb += bv[size_t(i) * cols + j] * bv[size_t(i) * cols + j];
                }
                if (na < 1e-24 || nb < 1e-24) continue;  // degenerate column: zero gradient
                const double inva = 1.0 / std::sqrt(na);
                const double invb = 1.0 / std::sqrt(nb);
                const double cosv = ov[j];
                // d cos / da = b/(|a||b|) - cos * a/|a|^2
                if (wants(a)) {
                    double* ga = g(a);
                    for (int i = 0; i < r; ++i) {
                        const double x = av[size_t(i) * cols + j];
                        const double y = bv[size_t(i) * cols + j];
                        ga[size_t(i) * cols + j] += go[j] * (y * inva * invb - cosv * x * inva * inva);
                    }
                }
                if (wants(b)) {
                    double* gb = g(b);
                    for (int i = 0; i < r; ++i) {
                        const double x = av[size_t(i) * cols + j];
                        const double y = bv[size_t(i) * cols + j];
                        gb[size_t(i) * cols + j] += go[j] * (x * inva * invb - cosv * y * invb * invb);
                    }
                }
            }
            break;
        }
        case Op::RowCat: {
            Var a = in(0), b = in(1);
            if (wants(a)) {
                double* ga = g(a);
                for (size_t i = 0; i < count(a); ++i) ga[i] += go[i];
            }
            if (wants(b)) {
                double* gb = g(b);
                for (size_t i = 0; i < count(b); ++i) gb[i] += go[count(a) + i];
            }
            break;
        }
        case Op::ColCat: {
            Var a = in(0), b = in(1);
            if (wants(a)) {
                double* ga = g(a);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < a.cols; ++j) ga[size_t(i) * a.cols + j] += go[size_t(i) * cols + j];
            }
            if (wants(b)) {
                double* gb = g(b);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < b.cols; ++j)
                        gb[size_t(i) * b.cols + j] += go[size_t(i) * cols + a.cols + j];
            }
            break;
        }
        case Op::SliceRows: {
            Var a = in(0);
            if (wants(a)) {
                double* ga = g(a);
                for (size_t i = 0; i < n; ++i) ga[size_t(auxi) * a.cols + i] += go[i];
            }
            break;
        }
        case Op::SliceCols: {
            Var a = in(0);
            if (wants(a)) {
                double* ga = g(a);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) ga[size_t(i) * a.cols + auxi + j] += go[size_t(i) * cols + j];
            }
            break;
        }
        case Op::ColBcast: {
            Var a = in(0);
            if (wants(a)) {
                double* ga = g(a);
                for (int i = 0; i < rows; ++i) {
                    double s = 0;
                    for (int j = 0; j < cols; ++j) s += go[size_t(i) * cols + j];
                    ga[i] += s;
                }
            }
            break;
        }
        case Op::TraceGather: {
            Var a = in(0);
            if (wants(a)) {
                double* ga = g(a);
                const int d = auxi;
                for (int j = 0; j < cols; ++j)
                    for (int k = 0; k < d; ++k) ga[size_t(k) * a.cols + size_t(k) * cols + j] += go[j];
            }
            break;
        }
        case Op::FoldBlocksSum: {
            Var a = in(0);
            if (wants(a)) {
                double* ga = g(a);
                const int d = auxi;
                for (int k = 0; k < d; ++k)
                    for (int j = 0; j < cols; ++j) ga[size_t(k) * cols + j] += go[j];
            }
            break;
        }
        case Op::KnnHinge: {
            Var x = in(0), z = in(1);
            if (wants(x)) {
                const double* xv = val(x);
                const double* zv = val(z);
                double* gx = g(x);
                const int d = x.rows, q = x.cols, k = auxi;
                for (int j = 0; j < q; ++j) {
                    for (int u = 0; u < k; ++u) {
                        double dist2 = 0;
                        for (int i = 0; i < d; ++i) {
                            const double diff =
                                xv[size_t(i) * q + j] - zv[size_t(i) * q * k + size_t(j) * k + u];
                            dist2 += diff * diff;
                        }
                        const double dist = std::sqrt(dist2);
                        if (dist > aux && dist > 0) {
                            const double w = go[j] / dist;
                            for (int i = 0; i < d; ++i) {
                                const double diff =
                                    xv[size_t(i) * q + j] - zv[size_t(i) * q * k + size_t(j) * k + u];
                                gx[size_t(i) * q + j] += w * diff;
                            }
                        }
                    }
                }
            }
            break;
        }
        case Op::Const: case Op::Param: break;
    }
}

}  // namespace snapflow
