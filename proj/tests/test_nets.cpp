#include <catch2/catch_amalgamated.hpp>

#include <limits>

#include "snapflow/nets.hpp"
#include "test_util.hpp"

using namespace snapflow;
using Catch::Approx;

TEST_CASE("init_dynamics determinism and shapes", "[nets]") {
    DynamicsNet a = init_dynamics(2, 7);
    DynamicsNet b = init_dynamics(2, 7);
    CHECK(a.mlp.flatten() == b.mlp.flatten());

    DynamicsNet c = init_dynamics(2, 8);
    CHECK(a.mlp.flatten() != c.mlp.flatten());

    auto f = evaluate_f(a, std::vector<double>{0.1, 0.2}, 0.5);
    CHECK(f.size() == 2);

    CHECK_THROWS_AS(init_dynamics(0, 1), InvalidArgument);
}

TEST_CASE("evaluate_f basics", "[nets]") {
    SECTION("all-zero weights give the zero field") {
        DynamicsNet net = init_dynamics(3, 1);
        for (auto& m : net.mlp.weights)
            for (auto& v : m.data) v = 0;
        for (auto& m : net.mlp.biases)
            for (auto& v : m.data) v = 0;
        auto f = evaluate_f(net, std::vector<double>{1.0, -2.0, 0.5}, 0.7);
        for (double v : f) CHECK(v == 0.0);
    }
    SECTION("hand-set identity net returns x") {
        Matrix eye = Matrix::from_rows({{1, 0}, {0, 1}});
        DynamicsNet net = sftest::make_linear_net(eye);
        std::vector<double> x{0.37, -1.8};
        auto f = evaluate_f(net, x, 0.3);
        CHECK(f[0] == Approx(x[0]).margin(1e-14));
        CHECK(f[1] == Approx(x[1]).margin(1e-14));
    }
    SECTION("non-finite input rejected") {
        DynamicsNet net = init_dynamics(2, 1);
        std::vector<double> bad{std::nan(""), 0.0};
        CHECK_THROWS_AS(evaluate_f(net, bad, 0.0), InvalidArgument);
        std::vector<double> ok{0.0, 0.0};
        CHECK_THROWS_AS(evaluate_f(net, ok, std::numeric_limits<double>::infinity()),
                        InvalidArgument);
    }
    SECTION("df/dx matches finite differences") {
        DynamicsNet net = init_dynamics(3, 19);
        Rng rng(2);
        std::vector<double> x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        Matrix jac = jacobian_f(net, x, 0.2);
        Matrix fd = sftest::fd_jacobian(net, x, 0.2);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                CHECK(sftest::rel_err(jac(i, j), fd(i, j), 1e-6) < 1e-5);
    }
}

TEST_CASE("growth net positivity", "[nets]") {
    GrowthNet net = init_growth(2, 3);
    Rng rng(10);
    double lo = 1e300;
    for (int i = 0; i < 100000; ++i) {
        std::vector<double> x{rng.uniform(-50, 50), rng.uniform(-50, 50)};
        lo = std::min(lo, evaluate_g(net, x, rng.uniform(0, 3)));
    }
    CHECK(lo > 0.0);

    SECTION("zero final layer gives softplus(0) = ln 2") {
        GrowthNet z = init_growth(2, 4);
        for (auto& v : z.mlp.weights.back().data) v = 0;
        for (auto& v : z.mlp.biases.back().data) v = 0;
        CHECK(evaluate_g(z, std::vector<double>{3.0, -1.0}, 0.5) == Approx(std::log(2.0)));
    }
}
