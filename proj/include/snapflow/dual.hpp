#pragma once

// Forward-mode directional derivatives via dual numbers. Used for exact
// Jacobian traces and columns at inference time; never grows a Tape.

#include "snapflow/core.hpp"

namespace snapflow {

struct Dual {
    double v = 0.0;  // value
    double t = 0.0;  // tangent

    Dual() = default;
    Dual(double value) : v(value) {}
    Dual(double value, double tangent) : v(value), t(tangent) {}
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.t + b.t}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.t - b.t}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.t * b.v + a.v * b.t}; }
inline Dual operator*(double a, Dual b) { return {a * b.v, a * b.t}; }
inline Dual operator+(Dual a, double b) { return {a.v + b, a.t}; }

inline Dual lrelu(Dual x, double slope) {
    const double f = x.v > 0 ? 1.0 : slope;
    return {f * x.v, f * x.t};
}

inline Dual softplus(Dual x) {
    const double s = 1.0 / (1.0 + std::exp(-x.v));
    return {std::max(x.v, 0.0) + std::log1p(std::exp(-std::abs(x.v))), s * x.t};
}

// Directional derivative (df/dx) . dir of any callable f operating on dual
// vectors: f(duals, t, out). Returns the tangent of the output.
template <class F>
std::vector<double> jvp(F&& f, std::span<const double> x, double t, std::span<const double> dir) {
    if (x.size() != dir.size())
        fail_arg("jvp: direction has dimension " + std::to_string(dir.size()) + ", expected " +
                 std::to_string(x.size()));
    std::vector<Dual> xd(x.size());
    for (size_t i = 0; i < x.size(); ++i) xd[i] = Dual(x[i], dir[i]);
    std::vector<Dual> out = f(xd, t);
    std::vector<double> tangent(out.size());
    for (size_t i = 0; i < out.size(); ++i) tangent[i] = out[i].t;
    return tangent;
}

}  // namespace snapflow
