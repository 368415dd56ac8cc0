#pragma once

// Discrete optimal transport: exact transportation (assignment fast path plus
// successive-shortest-path min-cost flow for general weights), log-domain
// Sinkhorn, unbalanced Sinkhorn with KL-relaxed marginals, per-source growth
// rates, and McCann displacement interpolation.
//
// Points are columns of (d x n) matrices. Probability weights default to 1/n.

#include <numeric>

#include "snapflow/core.hpp"

namespace snapflow {

struct Coupling {
    Matrix plan;               // gamma, n x m, nonnegative
    std::vector<double> mu;    // source weights
    std::vector<double> nu;    // target weights
    Matrix cost;               // ground cost, n x m
    double total_cost = 0.0;   // <gamma, cost>_F

    std::vector<double> row_sums() const {
        std::vector<double> r(plan.rows, 0.0);
        for (int i = 0; i < plan.rows; ++i)
            for (int j = 0; j < plan.cols; ++j) r[i] += plan(i, j);
        return r;
    }
    std::vector<double> col_sums() const {
        std::vector<double> c(plan.cols, 0.0);
        for (int i = 0; i < plan.rows; ++i)
            for (int j = 0; j < plan.cols; ++j) c[j] += plan(i, j);
        return c;
    }
};

inline double frobenius_dot(const Matrix& a, const Matrix& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

// Pairwise Euclidean distances raised to the p-th power.
inline Matrix pairwise_cost(const Matrix& x, const Matrix& y, int p) {
    if (x.rows != y.rows)
        fail_arg("pairwise_cost: point dimensions differ (" + std::to_string(x.rows) + " vs " +
                 std::to_string(y.rows) + ")");
    if (p != 1 && p != 2) fail_arg("pairwise_cost: order p must be 1 or 2");
    Matrix c(x.cols, y.cols);
    for (int i = 0; i < x.cols; ++i)
        for (int j = 0; j < y.cols; ++j) {
            double d2 = 0;
            for (int k = 0; k < x.rows; ++k) {
                const double diff = x(k, i) - y(k, j);
                d2 += diff * diff;
            }
            c(i, j) = p == 2 ? d2 : std::sqrt(d2);
        }
    return c;
}

inline std::vector<double> uniform_weights(int n) {
    return std::vector<double>(n, 1.0 / double(n));
}

namespace detail {

// Dense square assignment by shortest augmenting paths with potentials
// (Hungarian, O(n^3)). Returns the column matched to each row.
inline std::vector<int> solve_assignment(const Matrix& cost) {
    const int n = cost.rows;
    const double inf = 1e300;
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

// Transportation by successive shortest augmenting paths on the bipartite
// residual graph with Johnson potentials. Real-valued supplies; every
// augmentation exactly exhausts a source or a sink, so it terminates after
// at most n+m-1 rounds.
inline Matrix solve_transport_ssp(const Matrix& cost, std::vector<double> supply,
                                  std::vector<double> demand) {
    const int n = int(supply.size());
    const int m = int(demand.size());
    const int nodes = n + m;
    const double inf = 1e300;
    Matrix flow(n, m, 0.0);
    std::vector<double> pot(nodes, 0.0), dist(nodes);
    std::vector<int> parent(nodes);
    std::vector<char> done(nodes);

    // Initial potentials so reduced costs start nonnegative (costs >= 0 on
    // forward arcs already, but sinks need the row minimum).
    double remaining = std::accumulate(supply.begin(), supply.end(), 0.0);
    int guard = 0;
    while (remaining > 1e-15) {
        if (++guard > 4 * (n + m)) fail_numeric("solve_transport_ssp: failed to drain supplies");
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(parent.begin(), parent.end(), -1);
        std::fill(done.begin(), done.end(), 0);
        for (int i = 0; i < n; ++i)
            if (supply[i] > 0) dist[i] = 0;
        // dense Dijkstra
        for (int it = 0; it < nodes; ++it) {
            int best = -1;
            double bd = inf;
            for (int v2 = 0; v2 < nodes; ++v2)
                if (!done[v2] && dist[v2] < bd) {
                    bd = dist[v2];
                    best = v2;
                }
            if (best < 0) break;
            done[best] = 1;
            if (best < n) {
                const int i = best;
                for (int j = 0; j < m; ++j) {
                    const double rc = cost(i, j) + pot[i] - pot[n + j];
                    if (dist[i] + rc < dist[n + j] - 1e-18) {
                        dist[n + j] = dist[i] + rc;
                        parent[n + j] = i;
                    }
                }
            } else {
                const int j = best - n;
                for (int i = 0; i < n; ++i) {
                    if (flow(i, j) <= 0) continue;
                    const double rc = -cost(i, j) + pot[n + j] - pot[i];
                    if (dist[n + j] + rc < dist[i] - 1e-18) {
                        dist[i] = dist[n + j] + rc;
                        parent[i] = n + j;
                    }
                }
            }
        }
        // closest open sink
        int sink = -1;
        double bd = inf;
        for (int j = 0; j < m; ++j)
            if (demand[j] > 1e-15 && dist[n + j] < bd) {
                bd = dist[n + j];
                sink = j;
            }
        if (sink < 0) fail_numeric("solve_transport_ssp: no augmenting path (unbalanced totals?)");
        // bottleneck along the path
        double delta = demand[sink];
        int node = n + sink;
        while (parent[node] != -1) {
            const int par = parent[node];
            if (node >= n) {
                // forward arc par -> node (unbounded)
            } else {
                delta = std::min(delta, flow(node, par - n));
            }
            node = par;
        }
        delta = std::min(delta, supply[node]);
        // apply
        const int src = node;
        node = n + sink;
        while (parent[node] != -1) {
            const int par = parent[node];
            if (node >= n)
                flow(par, node - n) += delta;
            else
                flow(node, par - n) -= delta;
            node = par;
        }
        supply[src] -= delta;
        demand[sink] -= delta;
        if (supply[src] < 1e-15) supply[src] = 0;
        if (demand[sink] < 1e-15) demand[sink] = 0;
        remaining -= delta;
        for (int v2 = 0; v2 < nodes; ++v2)
            if (dist[v2] < inf) pot[v2] += dist[v2];
    }
    return flow;
}

}  // namespace detail

struct EmdResult {
    double distance = 0.0;
    Coupling coupling;
};

// Exact optimal transport between weighted point sets. Equal-size uniform
// instances reduce to an assignment problem; anything else goes through the
// min-cost-flow route.
inline EmdResult emd_exact(const Matrix& x, std::vector<double> wx, const Matrix& y,
                           std::vector<double> wy, int p = 1) {
    const int n = x.cols, m = y.cols;
    if (n == 0 || m == 0) fail_arg("emd_exact: empty point set");
    if (int(wx.size()) != n || int(wy.size()) != m)
        fail_arg("emd_exact: weight count does not match point count");
    const double totx = std::accumulate(wx.begin(), wx.end(), 0.0);
    const double toty = std::accumulate(wy.begin(), wy.end(), 0.0);
    if (totx <= 0 || toty <= 0) fail_arg("emd_exact: degenerate weights (zero total mass)");
    if (std::abs(totx - toty) > 1e-9)
        fail_arg("emd_exact: total masses differ (" + std::to_string(totx) + " vs " +
                 std::to_string(toty) + ")");

    Coupling c;
    c.mu = wx;
    c.nu = wy;
    c.cost = pairwise_cost(x, y, p);

    bool uniform_square = n == m;
    for (int i = 0; i < n && uniform_square; ++i)
        if (std::abs(wx[i] - totx / n) > 1e-12 || std::abs(wy[i] - toty / m) > 1e-12)
            uniform_square = false;

    if (uniform_square) {
        auto perm = detail::solve_assignment(c.cost);
        c.plan = Matrix(n, m, 0.0);
        for (int i = 0; i < n; ++i) c.plan(i, perm[i]) = wx[i];
    } else {
        c.plan = detail::solve_transport_ssp(c.cost, wx, wy);
    }
    c.total_cost = frobenius_dot(c.plan, c.cost);
    EmdResult res;
    res.distance = p == 2 ? std::sqrt(std::max(c.total_cost, 0.0)) : c.total_cost;
    res.coupling = std::move(c);
    return res;
}

inline EmdResult emd_exact_uniform(const Matrix& x, const Matrix& y, int p = 1) {
    return emd_exact(x, uniform_weights(x.cols), y, uniform_weights(y.cols), p);
}

// ---------------------------------------------------------------------------
// Entropic OT (log-domain Sinkhorn)
// ---------------------------------------------------------------------------

struct SinkhornResult {
    Coupling coupling;
    int iterations = 0;
    double marginal_residual = 0.0;
};

inline SinkhornResult sinkhorn(const Matrix& x, std::vector<double> wx, const Matrix& y,
                               std::vector<double> wy, double reg, int p = 2,
                               int max_iters = 200000, double tol = 1e-7) {
    if (reg <= 0) fail_arg("sinkhorn: entropic weight must be positive");
    const int n = x.cols, m = y.cols;
    Matrix cost = pairwise_cost(x, y, p);
    std::vector<double> f(n, 0.0), g(m, 0.0), log_wx(n), log_wy(m);
    for (int i = 0; i < n; ++i) log_wx[i] = std::log(wx[i]);
    for (int j = 0; j < m; ++j) log_wy[j] = std::log(wy[j]);

    auto lse_rows = [&](std::vector<double>& out) {
        for (int i = 0; i < n; ++i) {
            double mx = -1e300;
            for (int j = 0; j < m; ++j) mx = std::max(mx, (g[j] - cost(i, j)) / reg);
            double s = 0;
            for (int j = 0; j < m; ++j) s += std::exp((g[j] - cost(i, j)) / reg - mx);
            out[i] = mx + std::log(s);
        }
    };
    auto lse_cols = [&](std::vector<double>& out) {
        for (int j = 0; j < m; ++j) {
            double mx = -1e300;
            for (int i = 0; i < n; ++i) mx = std::max(mx, (f[i] - cost(i, j)) / reg);
            double s = 0;
            for (int i = 0; i < n; ++i) s += std::exp((f[i] - cost(i, j)) / reg - mx);
            out[j] = mx + std::log(s);
        }
    };

    SinkhornResult res;
    std::vector<double> tmp_n(n), tmp_m(m);

    // Epsilon scaling: anneal reg downward with warm-started potentials, then
    // polish at the target reg with over-relaxed updates (omega in (0,2)
    // preserves the fixed point). Both are classical Sinkhorn accelerations.
    std::vector<double> schedule;
    for (double r = std::max(0.5, reg); r > reg * 1.999; r *= 0.5) schedule.push_back(r);
    schedule.push_back(reg);
    const double omega = 1.5;

    for (size_t stage = 0; stage < schedule.size(); ++stage) {
        const double r = schedule[stage];
        const bool last = stage + 1 == schedule.size();
        const int iters = last ? max_iters : 60;
        for (int it = 1; it <= iters; ++it) {
            const double w = (last && it > 5) ? omega : 1.0;
            for (int i = 0; i < n; ++i) {
                double mx = -1e300;
                for (int j = 0; j < m; ++j) mx = std::max(mx, (g[j] - cost(i, j)) / r);
                double s = 0;
                for (int j = 0; j < m; ++j) s += std::exp((g[j] - cost(i, j)) / r - mx);
                f[i] = (1 - w) * f[i] + w * r * (log_wx[i] - (mx + std::log(s)));
            }
            for (int j = 0; j < m; ++j) {
                double mx = -1e300;
                for (int i = 0; i < n; ++i) mx = std::max(mx, (f[i] - cost(i, j)) / r);
                double s = 0;
                for (int i = 0; i < n; ++i) s += std::exp((f[i] - cost(i, j)) / r - mx);
                g[j] = (1 - w) * g[j] + w * r * (log_wy[j] - (mx + std::log(s)));
            }
            if (last) res.iterations = it;
            if (last && (it % 10 == 0 || it == iters)) {
                double resid = 0;
                for (int i = 0; i < n; ++i) {
                    double rsum = 0;
                    for (int j = 0; j < m; ++j) rsum += std::exp((f[i] + g[j] - cost(i, j)) / r);
                    resid = std::max(resid, std::abs(rsum - wx[i]));
                }
                res.marginal_residual = resid;
                if (resid < tol) break;
            }
        }
    }
    // One exact pair of updates so the reported plan's column marginals are
    // exact and the row residual reflects the final potentials.
    lse_rows(tmp_n);
    for (int i = 0; i < n; ++i) f[i] = reg * (log_wx[i] - tmp_n[i]);
    lse_cols(tmp_m);
    for (int j = 0; j < m; ++j) g[j] = reg * (log_wy[j] - tmp_m[j]);
    {
        double resid = 0;
        for (int i = 0; i < n; ++i) {
            double rsum = 0;
            for (int j = 0; j < m; ++j) rsum += std::exp((f[i] + g[j] - cost(i, j)) / reg);
            resid = std::max(resid, std::abs(rsum - wx[i]));
        }
        res.marginal_residual = resid;
    }
    if (res.marginal_residual >= tol)
        fail_numeric("sinkhorn: no convergence after " + std::to_string(max_iters) +
                     " iterations (marginal residual " + std::to_string(res.marginal_residual) + ")");

    Coupling c;
    c.mu = std::move(wx);
    c.nu = std::move(wy);
    c.plan = Matrix(n, m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) c.plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / reg);
    c.cost = std::move(cost);
    c.total_cost = frobenius_dot(c.plan, c.cost);
    res.coupling = std::move(c);
    return res;
}

// ---------------------------------------------------------------------------
// Unbalanced entropic OT
// ---------------------------------------------------------------------------
//
// Minimizes  <gamma, M>_F + lambda * sum gamma log gamma
//            + alpha * KL(gamma 1 | mu) + beta * KL(gamma^T 1 | nu)
// with generalized KL(a|b) = sum a log(a/b) - a + b, via alternating exact
// block minimization over row/column scalings of K = exp(-M/lambda - 1):
//   log a <- alpha/(alpha+lambda) * (log mu - log(K b))
//   log b <- beta /(beta +lambda) * (log nu - log(K^T a))
// Each half step solves its block exactly, so the objective never increases.

struct UnbalancedOTConfig {
    double entropic_weight = 0.1;  // lambda
    double alpha = 1.0;            // source-marginal KL weight
    double beta = 10000.0;         // target-marginal KL weight
    int max_iters = 5000;
    double tol = 1e-10;            // potential movement stopping criterion

    void validate() const {
        if (entropic_weight <= 0 || alpha <= 0 || beta <= 0 || max_iters <= 0 || tol <= 0)
            fail_arg("UnbalancedOTConfig: all parameters must be positive");
    }
};

inline double unbalanced_objective(const Coupling& c, const UnbalancedOTConfig& cfg) {
    double obj = frobenius_dot(c.plan, c.cost);
    for (double g : c.plan.data)
        if (g > 0) obj += cfg.entropic_weight * g * std::log(g);
    auto kl = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            if (a[i] > 0) s += a[i] * std::log(a[i] / b[i]);
            s += b[i] - a[i];
        }
        return s;
    };
    obj += cfg.alpha * kl(c.row_sums(), c.mu);
    obj += cfg.beta * kl(c.col_sums(), c.nu);
    return obj;
}

inline Coupling unbalanced_sinkhorn(const Matrix& x, std::vector<double> wx, const Matrix& y,
                                    std::vector<double> wy, const UnbalancedOTConfig& cfg,
                                    int p = 2, std::vector<double>* objective_trace = nullptr) {
    cfg.validate();
    const int n = x.cols, m = y.cols;
    const double lam = cfg.entropic_weight;
    Matrix cost = pairwise_cost(x, y, p);
    Matrix lk(n, m);
    for (size_t i = 0; i < lk.size(); ++i) lk.data[i] = -cost.data[i] / lam - 1.0;

    std::vector<double> la(n, 0.0), lb(m, 0.0), log_wx(n), log_wy(m);
    for (int i = 0; i < n; ++i) log_wx[i] = std::log(wx[i]);
    for (int j = 0; j < m; ++j) log_wy[j] = std::log(wy[j]);
    const double ra = cfg.alpha / (cfg.alpha + lam);
    const double rb = cfg.beta / (cfg.beta + lam);

    auto build_plan = [&]() {
        Coupling c;
        c.mu = wx;
        c.nu = wy;
        c.plan = Matrix(n, m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) c.plan(i, j) = std::exp(la[i] + lk(i, j) + lb[j]);
        c.cost = cost;
        c.total_cost = frobenius_dot(c.plan, c.cost);
        return c;
    };

    double move = 1e300;
    int it = 0;
    for (; it < cfg.max_iters && move > cfg.tol; ++it) {
        move = 0;
        for (int i = 0; i < n; ++i) {
            double mx = -1e300;
            for (int j = 0; j < m; ++j) mx = std::max(mx, lk(i, j) + lb[j]);
            double s = 0;
            for (int j = 0; j < m; ++j) s += std::exp(lk(i, j) + lb[j] - mx);
            const double la_new = ra * (log_wx[i] - (mx + std::log(s)));
            move = std::max(move, std::abs(la_new - la[i]));
            la[i] = la_new;
        }
        for (int j = 0; j < m; ++j) {
            double mx = -1e300;
            for (int i = 0; i < n; ++i) mx = std::max(mx, lk(i, j) + la[i]);
            double s = 0;
            for (int i = 0; i < n; ++i) s += std::exp(lk(i, j) + la[i] - mx);
            const double lb_new = rb * (log_wy[j] - (mx + std::log(s)));
            move = std::max(move, std::abs(lb_new - lb[j]));
            lb[j] = lb_new;
        }
        if (objective_trace) objective_trace->push_back(unbalanced_objective(build_plan(), cfg));
    }
    if (move > std::max(cfg.tol, 1e-7))
        fail_numeric("unbalanced_sinkhorn: no convergence after " + std::to_string(cfg.max_iters) +
                     " iterations (potential movement " + std::to_string(move) + ")");

    Coupling c = build_plan();
    return c;
}

// Per-source growth rates: row sums of the plan rescaled so that a
// mass-preserving point scores 1.
inline std::vector<double> growth_targets(const Coupling& coupling) {
    std::vector<double> rates = coupling.row_sums();
    for (size_t i = 0; i < rates.size(); ++i) {
        if (coupling.mu[i] <= 0)
            fail_arg("growth_targets: zero source weight at index " + std::to_string(i));
        rates[i] /= coupling.mu[i];
    }
    return rates;
}

// Displacement interpolation: sample pairs (i, j) with probability
// gamma_ij / |gamma| and emit (1-s) x_i + s y_j.
inline Matrix mccann_interpolate(const Coupling& coupling, const Matrix& x, const Matrix& y,
                                 double s, int n_samples, uint64_t seed) {
    if (s < 0.0 || s > 1.0) fail_arg("mccann_interpolate: fraction must lie in [0, 1]");
    const double total = std::accumulate(coupling.plan.data.begin(), coupling.plan.data.end(), 0.0);
    if (total <= 0) fail_arg("mccann_interpolate: empty plan");
    std::vector<double> cum(coupling.plan.size());
    double acc = 0;
    for (size_t i = 0; i < cum.size(); ++i) {
        acc += coupling.plan.data[i];
        cum[i] = acc;
    }
    Rng rng(seed);
    Matrix out(x.rows, n_samples);
    for (int k = 0; k < n_samples; ++k) {
        const double u = rng.uniform() * total;
        const size_t idx = std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
        const int i = int(idx / size_t(coupling.plan.cols));
        const int j = int(idx % size_t(coupling.plan.cols));
        for (int r = 0; r < x.rows; ++r) out(r, k) = (1 - s) * x(r, i) + s * y(r, j);
    }
    return out;
}

}  // namespace snapflow
