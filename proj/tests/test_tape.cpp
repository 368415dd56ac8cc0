#include <catch2/catch_amalgamated.hpp>

#include "snapflow/nets.hpp"
#include "snapflow/tape.hpp"
#include "test_util.hpp"

using namespace snapflow;
using Catch::Approx;

namespace {

// Gradient check harness: builds a scalar graph from a single leaf matrix,
// compares tape gradients against central finite differences.
double gradcheck_worst(const std::function<Var(Tape&, Var)>& build, const Matrix& x0,
                       double eps = 1e-5) {
    Tape tape;
    Var x = tape.param(x0);
    Var out = build(tape, x);
    tape.backward(out);
    Matrix analytic = tape.grad(x);

    auto eval = [&](const std::vector<double>& theta) {
        Tape t2;
        Matrix xm = x0;
        xm.data = theta;
        Var xv = t2.param(xm);
        return t2.scalar_value(build(t2, xv));
    };
    std::vector<double> fd = sftest::fd_gradient(eval, x0.data, eps);
    return sftest::max_rel_err(analytic.data, fd);
}

}  // namespace

TEST_CASE("primitive forward values", "[tape]") {
    Tape tape;
    SECTION("add") {
        Var a = tape.constant(Matrix::from_rows({{1, 2}}));
        Var b = tape.constant(Matrix::from_rows({{3, 4}}));
        Matrix out = tape.value(tape.add(a, b));
        CHECK(out(0, 0) == 4.0);
        CHECK(out(0, 1) == 6.0);
    }
    SECTION("leaky-relu slope 0.01") {
        Var a = tape.constant(Matrix::from_rows({{-1, 2}}));
        Matrix out = tape.value(tape.lrelu(a, 0.01));
        CHECK(out(0, 0) == Approx(-0.01));
        CHECK(out(0, 1) == 2.0);
    }
    SECTION("matmul identity") {
        Matrix eye(3, 3);
        for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
        Matrix x(3, 1);
        x(0, 0) = 0.5;
        x(1, 0) = -2.0;
        x(2, 0) = 7.0;
        Var out = tape.matmul(tape.constant(eye), tape.constant(x));
        CHECK(tape.value(out).data == x.data);
    }
    SECTION("softplus at zero") {
        Var a = tape.constant(Matrix(1, 1, 0.0));
        CHECK(tape.scalar_value(tape.softplus(a)) == Approx(std::log(2.0)));
    }
}

TEST_CASE("shape mismatches are reported with both shapes", "[tape]") {
    Tape tape;
    Var a = tape.constant(Matrix(2, 3));
    Var b = tape.constant(Matrix(2, 3));
    CHECK_THROWS_WITH(tape.matmul(a, b),
                      Catch::Matchers::ContainsSubstring("(2x3)") &&
                          Catch::Matchers::ContainsSubstring("(2x3)"));
    Var c = tape.constant(Matrix(3, 2));
    CHECK_THROWS_AS(tape.add(a, c), InvalidArgument);
    CHECK_THROWS_AS(tape.backward(a), InvalidArgument);  // non-scalar output
}

TEST_CASE("basic gradients", "[tape]") {
    SECTION("d/dx (x.x) = 2x") {
        Tape tape;
        Var x = tape.param(Matrix::from_rows({{1}, {2}}));
        Var out = tape.sum(tape.square(x));
        tape.backward(out);
        Matrix g = tape.grad(x);
        CHECK(g(0, 0) == Approx(2.0));
        CHECK(g(1, 0) == Approx(4.0));
    }
    SECTION("gradient of a constant expression is zero") {
        Tape tape;
        Var x = tape.param(Matrix::from_rows({{1, 2}}));
        Var c = tape.constant(Matrix::from_rows({{5, 5}}));
        Var out = tape.sum(c);
        tape.backward(out);
        Matrix g = tape.grad(x);
        CHECK(g(0, 0) == 0.0);
        CHECK(g(0, 1) == 0.0);
    }
}

TEST_CASE("per-primitive gradients match central finite differences", "[tape][gradcheck]") {
    Rng rng(1234);
    // 1000 random probe points spread across the primitive set.
    const int reps = 40;  // x 25 primitives ~ 1000 probes
    double worst = 0;
    for (int r = 0; r < reps; ++r) {
        Matrix x(3, 4);
        for (auto& v : x.data) v = rng.uniform(-2.0, 2.0);
        Matrix pos = x;
        for (auto& v : pos.data) v = std::abs(v) + 0.5;  // for sqrt/log domains
        Matrix w(2, 3), b(2, 1), other(3, 4);
        for (auto& v : w.data) v = rng.uniform(-1, 1);
        for (auto& v : b.data) v = rng.uniform(-1, 1);
        for (auto& v : other.data) v = rng.uniform(0.5, 2.0);

        auto probes = std::vector<std::pair<Matrix, std::function<Var(Tape&, Var)>>>{
            {x, [&](Tape& t, Var v) { return t.sum(t.add(v, t.constant(other))); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.sub(t.constant(other), v)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.mul(v, t.constant(other))); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.div(v, t.constant(other))); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.div(t.constant(other), v)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.matmul(t.constant(w), v)); }},
            {w, [&](Tape& t, Var v) { return t.sum(t.matmul(v, t.constant(x))); }},
            {w, [&](Tape& t, Var v) { return t.sum(t.affine(v, t.constant(x), t.constant(b))); }},
            {b, [&](Tape& t, Var v) { return t.sum(t.affine(t.constant(w), t.constant(x), v)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.scale(v, -1.7)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.add_const(v, 3.1)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.square(v)); }},
            {pos, [&](Tape& t, Var v) { return t.sum(t.sqrt(v)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.exp(v)); }},
            {pos, [&](Tape& t, Var v) { return t.sum(t.log(v)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.softplus(v)); }},
            {x, [&](Tape& t, Var v) { return t.mean(v); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.col_sumsq(v)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.col_dot(v, t.constant(other))); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.cosine_cols(v, t.constant(other))); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.row_cat(v, t.constant(other))); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.square(t.col_cat(v, t.constant(other)))); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.slice_rows(v, 1, 2)); }},
            {x, [&](Tape& t, Var v) { return t.sum(t.square(t.slice_cols(v, 1, 2))); }},
            {b, [&](Tape& t, Var v) { return t.sum(t.square(t.col_broadcast(v, 5))); }},
        };
        for (auto& [leaf, build] : probes) worst = std::max(worst, gradcheck_worst(build, leaf));
    }
    // leaky-relu probed away from its kink
    for (int r = 0; r < 40; ++r) {
        Matrix x(2, 3);
        for (auto& v : x.data) {
            v = rng.uniform(-2.0, 2.0);
            if (std::abs(v) < 0.05) v += 0.1;
        }
        worst = std::max(worst, gradcheck_worst(
                                    [](Tape& t, Var v) { return t.sum(t.lrelu(v, 0.01)); }, x));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("fused trace ops gradcheck", "[tape][gradcheck]") {
    Rng rng(77);
    const int n = 3, d = 2;
    Matrix a(d, n * d);
    for (auto& v : a.data) v = rng.uniform(-1, 1);
    double worst = gradcheck_worst(
        [&](Tape& t, Var v) { return t.sum(t.trace_gather(v, n, d)); }, a);
    Matrix flat(1, n * d);
    for (auto& v : flat.data) v = rng.uniform(-1, 1);
    worst = std::max(worst, gradcheck_worst(
                                [&](Tape& t, Var v) { return t.sum(t.fold_blocks_sum(v, d)); }, flat));

    // lrelu_mask_mul with a fixed reference
    Matrix ref(4, n);
    for (auto& v : ref.data) v = rng.uniform(-1, 1);
    Matrix u(4, n * d);
    for (auto& v : u.data) v = rng.uniform(-1, 1);
    worst = std::max(worst, gradcheck_worst(
                                [&](Tape& t, Var v) {
                                    return t.sum(t.lrelu_mask_mul(v, t.constant(ref), 0.01, d));
                                },
                                u));

    // knn hinge away from the kink
    Matrix q(2, 3);
    Matrix z(2, 3 * 2);
    for (auto& v : q.data) v = rng.uniform(-1, 1);
    for (auto& v : z.data) v = rng.uniform(2.0, 3.0);
    worst = std::max(worst, gradcheck_worst(
                                [&](Tape& t, Var v) {
                                    return t.sum(t.knn_hinge(v, t.constant(z), 2, 0.1));
                                },
                                q));
    CHECK(worst < 1e-5);
}

namespace {

// The FD oracle is only valid away from leaky-ReLU kinks: a parameter nudge
// of eps must not flip any hidden unit's sign.
double min_preact_margin(const DynamicsNet& net, const Matrix& x, double t) {
    Matrix h(net.dim + 1, x.cols);
    std::copy(x.data.begin(), x.data.end(), h.data.begin());
    for (int j = 0; j < x.cols; ++j) h(net.dim, j) = t;
    double margin = 1e300;
    for (int l = 0; l + 1 < net.mlp.layer_count(); ++l) {
        Matrix pre(net.mlp.weights[l].rows, h.cols);
        for (int i = 0; i < pre.rows; ++i)
            for (int j = 0; j < pre.cols; ++j) pre(i, j) = net.mlp.biases[l](i, 0);
        gemm_acc(net.mlp.weights[l].data.data(), h.data.data(), pre.data.data(),
                 net.mlp.weights[l].rows, net.mlp.weights[l].cols, h.cols);
        for (double v : pre.data) margin = std::min(margin, std::abs(v));
        h = pre;
        for (auto& v : h.data) v = v > 0 ? v : net.slope * v;
    }
    return margin;
}

}  // namespace

TEST_CASE("three-layer MLP gradient vs finite differences", "[tape][gradcheck]") {
    DynamicsNet net = init_dynamics(3, 42);
    Rng rng(5);
    Matrix x(3, 4), best(3, 4);
    double best_margin = -1;
    for (int attempt = 0; attempt < 400; ++attempt) {
        for (auto& v : x.data) v = rng.uniform(-1.5, 1.5);
        const double m = min_preact_margin(net, x, 0.3);
        if (m > best_margin) {
            best_margin = m;
            best = x;
        }
        if (best_margin > 1e-3) break;
    }
    x = best;
    REQUIRE(best_margin > 5e-4);

    auto loss_at = [&](const std::vector<double>& flat) {
        DynamicsNet n2 = net;
        n2.mlp.unflatten(flat);
        Tape tape;
        MlpVars vars = make_param_vars(tape, n2.mlp);
        TapeFieldValue fv =
            eval_dynamics_tape(tape, vars, n2.slope, n2.dim, tape.constant(x), 0.3, false, false);
        return tape.scalar_value(tape.sum(tape.square(fv.f)));
    };

    Tape tape;
    MlpVars vars = make_param_vars(tape, net.mlp);
    TapeFieldValue fv =
        eval_dynamics_tape(tape, vars, net.slope, net.dim, tape.constant(x), 0.3, false, false);
    Var loss = tape.sum(tape.square(fv.f));
    tape.backward(loss);
    std::vector<double> analytic = collect_grads(tape, vars);
    std::vector<double> fd = sftest::fd_gradient(loss_at, net.mlp.flatten(), 1e-5);
    CHECK(sftest::norm_rel_err(analytic, fd) < 1e-5);
}

TEST_CASE("tape replay is bit-identical", "[tape]") {
    Rng rng(9);
    Tape tape;
    Matrix x0(4, 5);
    for (auto& v : x0.data) v = rng.normal();
    Var x = tape.param(x0);
    Var y = tape.softplus(tape.matmul(tape.constant(rng.normal_matrix(4, 4)), tape.lrelu(x, 0.01)));
    Var out = tape.mean(tape.exp(tape.scale(y, 0.3)));
    (void)out;
    std::vector<double> before = tape.raw_values();
    tape.replay();
    CHECK(tape.raw_values() == before);
}

TEST_CASE("jvp forward-mode", "[dual]") {
    SECTION("linear map picks out Jacobian columns") {
        Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
        auto f = [&](std::span<const Dual> x, double) {
            std::vector<Dual> out(2);
            for (int i = 0; i < 2; ++i) out[i] = a(i, 0) * x[0] + a(i, 1) * x[1];
            return out;
        };
        std::vector<double> x{0.7, -0.3}, e1{1, 0};
        auto col = jvp(f, x, 0.0, e1);
        CHECK(col[0] == Approx(1.0));
        CHECK(col[1] == Approx(3.0));
    }
    SECTION("zero direction gives zero tangent") {
        DynamicsNet net = init_dynamics(3, 7);
        std::vector<double> x{0.2, -0.4, 1.0}, zero{0, 0, 0};
        auto f = [&](std::span<const Dual> xd, double t) { return evaluate_f_dual(net, xd, t); };
        auto tan = jvp(f, x, 0.5, zero);
        for (double v : tan) CHECK(v == 0.0);
    }
    SECTION("dimension mismatch throws") {
        DynamicsNet net = init_dynamics(2, 7);
        std::vector<double> x{0.2, -0.4}, dir{1.0};
        auto f = [&](std::span<const Dual> xd, double t) { return evaluate_f_dual(net, xd, t); };
        CHECK_THROWS_AS(jvp(f, x, 0.0, dir), InvalidArgument);
    }
}

TEST_CASE("jvp agrees with the reverse-built Jacobian", "[dual][gradcheck]") {
    // Full Jacobian via d vjp rows (reverse passes on the tape) against the
    // forward-mode columns, and the uJv == (J^T u).v consistency identity.
    DynamicsNet net = init_dynamics(4, 11);
    Rng rng(3);
    std::vector<double> x(4);
    for (auto& v : x) v = rng.uniform(-1, 1);
    const double t = 0.25;

    Matrix jac_fwd = jacobian_f(net, x, t);

    Matrix jac_rev(4, 4);
    for (int row = 0; row < 4; ++row) {
        Tape tape;
        MlpVars vars = make_const_vars(tape, net.mlp);
        Matrix xm = Matrix::column(x);
        Var xv = tape.param(xm);
        TapeFieldValue fv = eval_dynamics_tape(tape, vars, net.slope, net.dim, xv, t, false, false);
        tape.backward(tape.sum(tape.slice_rows(fv.f, row, 1)));
        Matrix g = tape.grad(xv);
        for (int c = 0; c < 4; ++c) jac_rev(row, c) = g(c, 0);
    }
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(jac_fwd(i, j) == Approx(jac_rev(i, j)).margin(1e-10));

    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> u(4), v(4);
        for (auto& w : u) w = rng.normal();
        for (auto& w : v) w = rng.normal();
        auto f = [&](std::span<const Dual> xd, double td) { return evaluate_f_dual(net, xd, td); };
        auto jv = jvp(f, x, t, v);
        double u_jv = 0;
        for (int i = 0; i < 4; ++i) u_jv += u[i] * jv[i];
        double jtu_v = 0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) jtu_v += u[i] * jac_rev(i, j) * v[j];
        CHECK(std::abs(u_jv - jtu_v) < 1e-10);
    }
}
