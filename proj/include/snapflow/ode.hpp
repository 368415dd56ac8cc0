#pragma once

// Augmented ODE integration: position plus log-density, kinetic-energy, and
// Jacobian-norm accumulators, forward or backward in time.
//
//   d x / dt      = f(x, t)
//   d logp / dt   = -tr(df/dx)          (signed; backward integration undoes it)
//   d energy / dt = |f|^2               (accumulated against |dt|: a path
//   d jacsq / dt  = |df/dx|_F^2          integral, direction-free)
//
// Two solvers: adaptive Dormand-Prince 5(4) with a PI step controller for
// inference/evaluation, and fixed-step RK4 for training. The training path
// records every solver stage on a Tape (discretize-then-optimize), so
// gradients are exact for the discretized objective; this differs from
// adjoint-state methods which differentiate the continuous flow.

#include <functional>

#include "snapflow/core.hpp"
#include "snapflow/dual.hpp"
#include "snapflow/nets.hpp"
#include "snapflow/tape.hpp"

namespace snapflow {

enum class SolverMethod { dopri5, rk4 };

struct SolverConfig {
    SolverMethod method = SolverMethod::dopri5;
    double rtol = 1e-5;
    double atol = 1e-5;
    double rk4_step = 0.05;  // fixed step size, rk4 only
    int max_steps = 100000;
    int exact_trace_limit = 10;

    void validate() const {
        if (rtol <= 0 || atol <= 0) fail_arg("SolverConfig: tolerances must be positive");
        if (rk4_step <= 0) fail_arg("SolverConfig: rk4_step must be positive");
        if (max_steps <= 0) fail_arg("SolverConfig: max_steps must be positive");
    }
};

struct TrackFlags {
    bool logp = false;
    bool energy = false;
    bool jacnorm = false;
    bool any() const { return logp || energy || jacnorm; }
    bool jacobian_needed() const { return logp || jacnorm; }
};

struct AugmentedState {
    std::vector<double> x;
    double logp = 0.0;
    double energy = 0.0;
    double jacnorm = 0.0;
};

// ---------------------------------------------------------------------------
// Field concept and analytic fields
// ---------------------------------------------------------------------------

template <class F>
concept FlowField = requires(const F& f, const Matrix& xb, std::span<const Dual> xd, double t) {
    { f.dim() } -> std::convertible_to<int>;
    { f.eval_batch(xb, t) } -> std::same_as<Matrix>;
    { f.eval_dual(xd, t) } -> std::same_as<std::vector<Dual>>;
};

// Adapter giving DynamicsNet the field interface.
struct NetField {
    const DynamicsNet* net;
    int dim() const { return net->dim; }
    Matrix eval_batch(const Matrix& x, double t) const { return evaluate_f_batch(*net, x, t); }
    std::vector<Dual> eval_dual(std::span<const Dual> x, double t) const {
        return evaluate_f_dual(*net, x, t);
    }
};

// f(x) = A x; trace is constant tr(A).
struct LinearField {
    Matrix a;
    int dim() const { return a.rows; }
    Matrix eval_batch(const Matrix& x, double t) const {
        (void)t;
        return snapflow::matmul(a, x);
    }
    std::vector<Dual> eval_dual(std::span<const Dual> x, double t) const {
        (void)t;
        std::vector<Dual> out(a.rows);
        for (int i = 0; i < a.rows; ++i) {
            Dual acc(0.0, 0.0);
            for (int j = 0; j < a.cols; ++j) acc = acc + a(i, j) * x[j];
            out[i] = acc;
        }
        return out;
    }
};

struct ConstantField {
    std::vector<double> c;
    int dim() const { return int(c.size()); }
    Matrix eval_batch(const Matrix& x, double t) const {
        (void)t;
        Matrix out(x.rows, x.cols);
        for (int i = 0; i < x.rows; ++i)
            for (int j = 0; j < x.cols; ++j) out(i, j) = c[i];
        return out;
    }
    std::vector<Dual> eval_dual(std::span<const Dual> x, double t) const {
        (void)x;
        (void)t;
        std::vector<Dual> out(c.size());
        for (size_t i = 0; i < c.size(); ++i) out[i] = Dual(c[i], 0.0);
        return out;
    }
};

// Counterclockwise rotation at angular speed omega (2-D).
inline LinearField rotation_field(double omega) {
    return LinearField{Matrix::from_rows({{0.0, -omega}, {omega, 0.0}})};
}

// ---------------------------------------------------------------------------
// Exact trace via d forward-mode passes
// ---------------------------------------------------------------------------

template <FlowField F>
double solve_trace(const F& field, std::span<const double> x, double t, int exact_trace_limit = 10) {
    const int d = field.dim();
    if (d > exact_trace_limit)
        fail_arg("solve_trace: dimension " + std::to_string(d) + " exceeds the exact-trace limit " +
                 std::to_string(exact_trace_limit) +
                 "; lower the state dimension or raise exact_trace_limit");
    double tr = 0.0;
    std::vector<Dual> xd(d);
    for (int k = 0; k < d; ++k) {
        for (int i = 0; i < d; ++i) xd[i] = Dual(x[i], i == k ? 1.0 : 0.0);
        tr += field.eval_dual(xd, t)[k].t;
    }
    return tr;
}

namespace detail {

// Derivative of the full augmented batch state. Rows 0..d-1 hold dx/dt; rows
// d, d+1, d+2 hold the logp/energy/jacsq rates (zero when untracked).
template <FlowField F>
Matrix augmented_rhs(const F& field, const Matrix& y, double t, TrackFlags track, double time_sign) {
    const int d = field.dim();
    const int n = y.cols;
    Matrix x(d, n);
    for (int i = 0; i < d; ++i)
        std::copy_n(y.row_ptr(i), n, x.row_ptr(i));
    Matrix f = field.eval_batch(x, t);
    Matrix rhs(d + 3, n);
    for (int i = 0; i < d; ++i)
        std::copy_n(f.row_ptr(i), n, rhs.row_ptr(i));
    if (track.energy)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int i = 0; i < d; ++i) s += f(i, j) * f(i, j);
            rhs(d + 1, j) = time_sign * s;
        }
    if (track.jacobian_needed()) {
        std::vector<Dual> xd(d);
        for (int j = 0; j < n; ++j) {
            double tr = 0, frob = 0;
            for (int k = 0; k < d; ++k) {
                for (int i = 0; i < d; ++i) xd[i] = Dual(x(i, j), i == k ? 1.0 : 0.0);
                auto col = field.eval_dual(xd, t);
                tr += col[k].t;
                for (int i = 0; i < d; ++i) frob += col[i].t * col[i].t;
            }
            if (track.logp) rhs(d, j) = -tr;
            if (track.jacnorm) rhs(d + 2, j) = time_sign * frob;
        }
    }
    return rhs;
}

inline void axpy_mat(Matrix& y, double a, const Matrix& x) {
    for (size_t i = 0; i < y.size(); ++i) y.data[i] += a * x.data[i];
}

inline Matrix lincomb(const Matrix& base, std::initializer_list<std::pair<double, const Matrix*>> terms) {
    Matrix out = base;
    for (auto& [c, m] : terms) axpy_mat(out, c, *m);
    return out;
}

template <FlowField F>
void check_finite(const Matrix& y, double t, const F&) {
    if (!y.all_finite())
        fail_numeric("integrate: non-finite state at t=" + std::to_string(t));
}

// Dormand-Prince 5(4) with FSAL and a PI controller (safety 0.9, step
// factors clamped to [0.2, 10]).
template <FlowField F>
void dopri5_run(const F& field, Matrix& y, double t0, double t1, const SolverConfig& cfg,
                TrackFlags track, double time_sign) {
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static constexpr double e1 = 35.0 / 384 - 5179.0 / 57600, e3 = 500.0 / 1113 - 7571.0 / 16695,
                            e4 = 125.0 / 192 - 393.0 / 640, e5 = -2187.0 / 6784 + 92097.0 / 339200,
                            e6 = 11.0 / 84 - 187.0 / 2100, e7 = -1.0 / 40;
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;

    const double span = t1 - t0;
    if (span == 0.0) return;
    const double dir = span > 0 ? 1.0 : -1.0;
    double t = t0;
    double h = dir * std::min(std::abs(span), std::abs(span) * 0.01 + 1e-4);
    double err_prev = 1.0;

    Matrix k1 = augmented_rhs(field, y, t, track, time_sign);
    int steps = 0;
    while (dir * (t1 - t) > 1e-14 * std::max(1.0, std::abs(t1))) {
        if (++steps > cfg.max_steps)
            fail_numeric("integrate: step count exceeded (max " + std::to_string(cfg.max_steps) +
                         ") at t=" + std::to_string(t));
        if (dir * (t + h) > dir * t1) h = t1 - t;

        Matrix y2 = lincomb(y, {{h * a21, &k1}});
        Matrix k2 = augmented_rhs(field, y2, t + c2 * h, track, time_sign);
        Matrix y3 = lincomb(y, {{h * a31, &k1}, {h * a32, &k2}});
        Matrix k3 = augmented_rhs(field, y3, t + c3 * h, track, time_sign);
        Matrix y4 = lincomb(y, {{h * a41, &k1}, {h * a42, &k2}, {h * a43, &k3}});
        Matrix k4 = augmented_rhs(field, y4, t + c4 * h, track, time_sign);
        Matrix y5 = lincomb(y, {{h * a51, &k1}, {h * a52, &k2}, {h * a53, &k3}, {h * a54, &k4}});
        Matrix k5 = augmented_rhs(field, y5, t + c5 * h, track, time_sign);
        Matrix y6 =
            lincomb(y, {{h * a61, &k1}, {h * a62, &k2}, {h * a63, &k3}, {h * a64, &k4}, {h * a65, &k5}});
        Matrix k6 = augmented_rhs(field, y6, t + h, track, time_sign);
        Matrix ynew =
            lincomb(y, {{h * b1, &k1}, {h * b3, &k3}, {h * b4, &k4}, {h * b5, &k5}, {h * b6, &k6}});
        Matrix k7 = augmented_rhs(field, ynew, t + h, track, time_sign);

        double err = 0.0;
        for (size_t i = 0; i < y.size(); ++i) {
            const double ei = h * (e1 * k1.data[i] + e3 * k3.data[i] + e4 * k4.data[i] +
                                   e5 * k5.data[i] + e6 * k6.data[i] + e7 * k7.data[i]);
            const double sc =
                cfg.atol + cfg.rtol * std::max(std::abs(y.data[i]), std::abs(ynew.data[i]));
            err += (ei / sc) * (ei / sc);
        }
        err = std::sqrt(err / double(y.size()));

        if (err <= 1.0 || std::abs(h) <= 1e-14) {
            t += h;
            y = std::move(ynew);
            k1 = std::move(k7);  // FSAL
            check_finite(y, t, field);
            const double e_clamped = std::max(err, 1e-10);
            double fac = 0.9 * std::pow(e_clamped, -0.14) * std::pow(err_prev, 0.08);
            fac = std::clamp(fac, 0.2, 10.0);
            h *= fac;
            err_prev = e_clamped;
        } else {
            double fac = std::clamp(0.9 * std::pow(err, -0.2), 0.2, 10.0);
            h *= fac;
        }
    }
}

template <FlowField F>
void rk4_run(const F& field, Matrix& y, double t0, double t1, const SolverConfig& cfg,
             TrackFlags track, double time_sign) {
    const double span = t1 - t0;
    if (span == 0.0) return;
    const int n_steps = std::max(1, int(std::ceil(std::abs(span) / cfg.rk4_step - 1e-12)));
    if (n_steps > cfg.max_steps)
        fail_numeric("integrate: rk4 would need " + std::to_string(n_steps) + " steps (max " +
                     std::to_string(cfg.max_steps) + ")");
    const double h = span / n_steps;
    double t = t0;
    for (int s = 0; s < n_steps; ++s) {
        Matrix k1 = augmented_rhs(field, y, t, track, time_sign);
        Matrix y2 = lincomb(y, {{h / 2, &k1}});
        Matrix k2 = augmented_rhs(field, y2, t + h / 2, track, time_sign);
        Matrix y3 = lincomb(y, {{h / 2, &k2}});
        Matrix k3 = augmented_rhs(field, y3, t + h / 2, track, time_sign);
        Matrix y4 = lincomb(y, {{h, &k3}});
        Matrix k4 = augmented_rhs(field, y4, t + h, track, time_sign);
        axpy_mat(y, h / 6, k1);
        axpy_mat(y, h / 3, k2);
        axpy_mat(y, h / 3, k3);
        axpy_mat(y, h / 6, k4);
        t = t0 + span * double(s + 1) / n_steps;
        check_finite(y, t, field);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Batched integration. One solver run on the stacked system, so every item
// shares the adaptive step sequence; permuting the batch permutes outputs.
// ---------------------------------------------------------------------------

template <FlowField F>
std::vector<AugmentedState> integrate_batch(const F& field, const std::vector<AugmentedState>& states,
                                            double t0, double t1, const SolverConfig& cfg,
                                            TrackFlags track = {}) {
    cfg.validate();
    const int d = field.dim();
    const int n = int(states.size());
    if (n == 0) return {};
    for (const auto& s : states)
        if (int(s.x.size()) != d)
            fail_arg("integrate_batch: state dimension " + std::to_string(s.x.size()) +
                     " does not match field dimension " + std::to_string(d));

    // Energy/jacnorm are path integrals: flip their rate when integrating
    // backward so accumulators never decrease.
    const double time_sign = t1 >= t0 ? 1.0 : -1.0;

    Matrix y(d + 3, n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < d; ++i) y(i, j) = states[j].x[i];
        y(d, j) = states[j].logp;
        y(d + 1, j) = states[j].energy;
        y(d + 2, j) = states[j].jacnorm;
    }
    if (cfg.method == SolverMethod::dopri5)
        detail::dopri5_run(field, y, t0, t1, cfg, track, time_sign);
    else
        detail::rk4_run(field, y, t0, t1, cfg, track, time_sign);

    std::vector<AugmentedState> out(n);
    for (int j = 0; j < n; ++j) {
        out[j].x.resize(d);
        for (int i = 0; i < d; ++i) out[j].x[i] = y(i, j);
        out[j].logp = y(d, j);
        out[j].energy = y(d + 1, j);
        out[j].jacnorm = y(d + 2, j);
    }
    return out;
}

template <FlowField F>
AugmentedState integrate(const F& field, const AugmentedState& s0, double t0, double t1,
                         const SolverConfig& cfg, TrackFlags track = {}) {
    return integrate_batch(field, std::vector<AugmentedState>{s0}, t0, t1, cfg, track)[0];
}

// Position-only transport of a (d x n) batch.
template <FlowField F>
Matrix advect(const F& field, const Matrix& points, double t0, double t1, const SolverConfig& cfg) {
    std::vector<AugmentedState> states(points.cols);
    for (int j = 0; j < points.cols; ++j) states[j].x = points.col(j);
    auto moved = integrate_batch(field, states, t0, t1, cfg, TrackFlags{});
    Matrix out(points.rows, points.cols);
    for (int j = 0; j < points.cols; ++j) out.set_col(j, moved[j].x);
    return out;
}

// ---------------------------------------------------------------------------
// Tape-recorded fixed-step RK4 (training path)
// ---------------------------------------------------------------------------

struct TapeAugmented {
    Var x;       // (d x n)
    Var logp;    // (1 x n)
    Var energy;  // (1 x n)
    Var jacsq;   // (1 x n)
};

inline TapeAugmented make_tape_state(Tape& tape, const Matrix& x0) {
    Matrix zeros(1, x0.cols, 0.0);
    Var z = tape.constant(zeros);
    return TapeAugmented{tape.constant(x0), z, z, z};
}

// Integrates the augmented system from t0 to t1 with steps of size
// <= rk4_step, recording everything. Accumulator semantics match the plain
// solver: logp signed, energy/jacsq against |dt|.
inline TapeAugmented integrate_tape(Tape& tape, const MlpVars& vars, double slope, int dim,
                                    TapeAugmented s, double t0, double t1, double rk4_step,
                                    TrackFlags track) {
    const double span = t1 - t0;
    if (span == 0.0) return s;
    const int n_steps = std::max(1, int(std::ceil(std::abs(span) / rk4_step - 1e-12)));
    const double h = span / n_steps;
    const double habs = std::abs(h);

    for (int step = 0; step < n_steps; ++step) {
        const double t = t0 + h * step;
        auto stage = [&](Var xs, double ts) {
            return eval_dynamics_tape(tape, vars, slope, dim, xs, ts, track.logp, track.jacnorm);
        };
        TapeFieldValue k1 = stage(s.x, t);
        TapeFieldValue k2 = stage(tape.add(s.x, tape.scale(k1.f, h / 2)), t + h / 2);
        TapeFieldValue k3 = stage(tape.add(s.x, tape.scale(k2.f, h / 2)), t + h / 2);
        TapeFieldValue k4 = stage(tape.add(s.x, tape.scale(k3.f, h)), t + h);

        auto combine = [&](Var a, Var b, Var c, Var d4, double w) {
            Var s12 = tape.add(a, tape.scale(b, 2.0));
            Var s34 = tape.add(tape.scale(c, 2.0), d4);
            return tape.scale(tape.add(s12, s34), w / 6.0);
        };
        s.x = tape.add(s.x, combine(k1.f, k2.f, k3.f, k4.f, h));
        if (track.logp)
            s.logp = tape.add(s.logp, combine(k1.trace, k2.trace, k3.trace, k4.trace, -h));
        if (track.energy) {
            Var e1 = tape.col_sumsq(k1.f);
            Var e2 = tape.col_sumsq(k2.f);
            Var e3 = tape.col_sumsq(k3.f);
            Var e4 = tape.col_sumsq(k4.f);
            s.energy = tape.add(s.energy, combine(e1, e2, e3, e4, habs));
        }
        if (track.jacnorm)
            s.jacsq = tape.add(s.jacsq, combine(k1.jacsq, k2.jacsq, k3.jacsq, k4.jacsq, habs));
    }
    return s;
}

}  // namespace snapflow
