#include "pfda/transport_filters.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

namespace pfda {

double TransportPlan::marginal_error(const Vector& w) const {
    const double n = static_cast<double>(d.cols());
    const double col = (d.colwise().sum().array() - 1.0).abs().maxCoeff();
    const double row = (d.rowwise().sum() - n * w).cwiseAbs().maxCoeff();
    return std::max(col, row);
}

Matrix squared_distances(const Matrix& members) {
    const Index n = members.cols();
    Matrix c(n, n);
    for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < n; ++i) c(i, j) = (members.col(i) - members.col(j)).squaredNorm();
    return c;
}

namespace {

void check_weights(const Vector& w) {
    if (w.size() == 0) throw Error(ErrorCode::InfeasibleMarginals, "empty weight vector");
    if ((w.array() < 0.0).any() || !w.allFinite())
        throw Error(ErrorCode::InfeasibleMarginals, "weights must be finite and nonnegative");
    if (std::abs(w.sum() - 1.0) > 1e-10) throw Error(ErrorCode::InfeasibleMarginals, "weights must sum to one");
}

struct Cell {
    Index i;
    Index j;
    double x;
};

/// Flows on a spanning tree are fixed by the marginals; peel leaves.
void tree_flows(std::vector<Cell>& basis, Vector supply, Vector demand) {
    const Index m = supply.size();
    const Index n = demand.size();
    std::vector<std::vector<std::size_t>> adj(static_cast<std::size_t>(m + n));
    for (std::size_t k = 0; k < basis.size(); ++k) {
        adj[static_cast<std::size_t>(basis[k].i)].push_back(k);
        adj[static_cast<std::size_t>(m + basis[k].j)].push_back(k);
    }
    std::vector<int> degree(adj.size());
    for (std::size_t v = 0; v < adj.size(); ++v) degree[v] = static_cast<int>(adj[v].size());
    std::vector<char> done(basis.size(), 0);
    std::deque<std::size_t> leaves;
    for (std::size_t v = 0; v < adj.size(); ++v)
        if (degree[v] == 1) leaves.push_back(v);
    std::size_t assigned = 0;
    while (!leaves.empty() && assigned < basis.size()) {
        const std::size_t v = leaves.front();
        leaves.pop_front();
        if (degree[v] != 1) continue;
        std::size_t e = 0;
        for (std::size_t k : adj[v])
            if (!done[k]) e = k;
        Cell& c = basis[e];
        const bool is_row = static_cast<Index>(v) < m;
        const double flow = is_row ? supply[c.i] : demand[c.j];
        c.x = flow;
        supply[c.i] -= flow;
        demand[c.j] -= flow;
        done[e] = 1;
        ++assigned;
        const std::size_t other = is_row ? static_cast<std::size_t>(m + c.j) : static_cast<std::size_t>(c.i);
        --degree[v];
        if (--degree[other] == 1) leaves.push_back(other);
    }
    for (Cell& c : basis) c.x = std::max(0.0, c.x);
}

}  // namespace

TransportPlan solve_transport(const Vector& w, const Matrix& cost, int max_iterations) {
    check_weights(w);
    const Index m = w.size();
    const Index n = cost.cols();
    if (cost.rows() != m || n != m) throw Error(ErrorCode::DimensionMismatch, "cost matrix must be N×N");
    const double nd = static_cast<double>(n);

    // Perturbed supplies keep every basic flow positive during the pivots.
    const double delta = 1e-13 / static_cast<double>(m);
    Vector a = w.array() + delta;
    Vector b = Vector::Constant(n, 1.0 / nd);
    b[n - 1] += delta * static_cast<double>(m);

    // North-west corner start: a staircase spanning tree with m+n−1 cells.
    std::vector<Cell> basis;
    basis.reserve(static_cast<std::size_t>(m + n - 1));
    {
        Vector ra = a, rb = b;
        Index i = 0, j = 0;
        while (true) {
            const double x = std::max(0.0, std::min(ra[i], rb[j]));
            basis.push_back({i, j, x});
            ra[i] -= x;
            rb[j] -= x;
            if (i == m - 1 && j == n - 1) break;
            if (i == m - 1) ++j;
            else if (j == n - 1) ++i;
            else if (ra[i] <= rb[j]) ++i;
            else ++j;
        }
    }

    std::vector<int> in_basis(static_cast<std::size_t>(m * n), -1);
    for (std::size_t k = 0; k < basis.size(); ++k)
        in_basis[static_cast<std::size_t>(basis[k].i * n + basis[k].j)] = static_cast<int>(k);

    const double scale = std::max(1.0, cost.cwiseAbs().maxCoeff());
    const double tol = 1e-12 * scale;
    const std::size_t nodes = static_cast<std::size_t>(m + n);
    std::vector<std::vector<std::size_t>> adj(nodes);
    Vector u(m), v(n);
    std::vector<char> seen(nodes);
    std::vector<std::ptrdiff_t> parent_edge(nodes);
    std::vector<std::size_t> parent_node(nodes);

    int it = 0;
    for (;; ++it) {
        if (it > max_iterations) throw Error(ErrorCode::MaxIterations, "transport simplex iteration cap reached");
        for (auto& l : adj) l.clear();
        for (std::size_t k = 0; k < basis.size(); ++k) {
            adj[static_cast<std::size_t>(basis[k].i)].push_back(k);
            adj[static_cast<std::size_t>(m + basis[k].j)].push_back(k);
        }
        // Potentials u_i + v_j = c_ij on the tree
        std::fill(seen.begin(), seen.end(), 0);
        std::deque<std::size_t> queue{0};
        seen[0] = 1;
        u[0] = 0.0;
        while (!queue.empty()) {
            const std::size_t node = queue.front();
            queue.pop_front();
            for (std::size_t k : adj[node]) {
                const Cell& c = basis[k];
                const std::size_t r = static_cast<std::size_t>(c.i);
                const std::size_t s = static_cast<std::size_t>(m + c.j);
                if (!seen[r]) {
                    u[c.i] = cost(c.i, c.j) - v[c.j];
                    seen[r] = 1;
                    queue.push_back(r);
                }
                if (!seen[s]) {
                    v[c.j] = cost(c.i, c.j) - u[c.i];
                    seen[s] = 1;
                    queue.push_back(s);
                }
            }
        }
        // Dantzig pricing, first most negative reduced cost in row-major order
        double best = -tol;
        Index ei = -1, ej = -1;
        for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < n; ++j) {
                if (in_basis[static_cast<std::size_t>(i * n + j)] >= 0) continue;
                const double r = cost(i, j) - u[i] - v[j];
                if (r < best) {
                    best = r;
                    ei = i;
                    ej = j;
                }
            }
        if (ei < 0) break;

        // Tree path from row ei to column ej
        std::fill(seen.begin(), seen.end(), 0);
        const std::size_t src = static_cast<std::size_t>(ei);
        const std::size_t dst = static_cast<std::size_t>(m + ej);
        queue.assign(1, src);
        seen[src] = 1;
        parent_edge[src] = -1;
        while (!queue.empty() && !seen[dst]) {
            const std::size_t node = queue.front();
            queue.pop_front();
            for (std::size_t k : adj[node]) {
                const Cell& c = basis[k];
                const std::size_t other =
                    node == static_cast<std::size_t>(c.i) ? static_cast<std::size_t>(m + c.j) : static_cast<std::size_t>(c.i);
                if (seen[other]) continue;
                seen[other] = 1;
                parent_edge[other] = static_cast<std::ptrdiff_t>(k);
                parent_node[other] = node;
                queue.push_back(other);
            }
        }
        std::vector<std::size_t> path;  // edges from the row end to the column end
        for (std::size_t node = dst; node != src; node = parent_node[node])
            path.push_back(static_cast<std::size_t>(parent_edge[node]));
        std::reverse(path.begin(), path.end());

        double theta = std::numeric_limits<double>::infinity();
        std::size_t leave = path.front();
        for (std::size_t k = 0; k < path.size(); k += 2)
            if (basis[path[k]].x < theta) {
                theta = basis[path[k]].x;
                leave = path[k];
            }
        for (std::size_t k = 0; k < path.size(); ++k) basis[path[k]].x += (k % 2 == 0 ? -theta : theta);
        in_basis[static_cast<std::size_t>(basis[leave].i * n + basis[leave].j)] = -1;
        basis[leave] = {ei, ej, theta};
        in_basis[static_cast<std::size_t>(ei * n + ej)] = static_cast<int>(leave);
    }

    tree_flows(basis, w, Vector::Constant(n, 1.0 / nd));
    TransportPlan plan;
    plan.d = Matrix::Zero(m, n);
    for (const Cell& c : basis) {
        plan.d(c.i, c.j) = nd * c.x;
        plan.cost += c.x * cost(c.i, c.j);
    }
    plan.iterations = it;
    plan.exact = true;
    return plan;
}

TransportPlan solve_transport_1d(const Vector& x, const Vector& w) {
    check_weights(w);
    const Index n = x.size();
    if (w.size() != n) throw Error(ErrorCode::DimensionMismatch, "weights and states differ in size");
    const double nd = static_cast<double>(n);
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return x[a] < x[b]; });
    // Monotone coupling: north-west corner on the sorted order
    TransportPlan plan;
    plan.d = Matrix::Zero(n, n);
    Index i = 0, j = 0;
    double ra = w[order[0]];
    double rb = 1.0 / nd;
    while (i < n && j < n) {
        const double t = std::max(0.0, std::min(ra, rb));
        const Index src = order[static_cast<std::size_t>(i)];
        const Index dst = order[static_cast<std::size_t>(j)];
        plan.d(src, dst) += nd * t;
        plan.cost += t * (x[src] - x[dst]) * (x[src] - x[dst]);
        ra -= t;
        rb -= t;
        if (i == n - 1 && j == n - 1) break;
        if (i == n - 1) {
            ++j;
            rb = 1.0 / nd;
        } else if (j == n - 1 || ra <= rb) {
            ++i;
            ra = w[order[static_cast<std::size_t>(i)]];
        } else {
            ++j;
            rb = 1.0 / nd;
        }
    }
    // Last column absorbs the rounding of the running remainders
    const Index last = order.back();
    const double col_err = plan.d.col(last).sum() - 1.0;
    plan.d(last, last) -= col_err;
    plan.d(last, last) = std::max(0.0, plan.d(last, last));
    plan.exact = true;
    return plan;
}

TransportPlan solve_transport(const Matrix& members, const Vector& w) {
    if (members.rows() == 1) return solve_transport_1d(members.row(0).transpose(), w);
    return solve_transport(w, squared_distances(members));
}

TransportPlan sinkhorn_transport(const Vector& w, const Matrix& cost, const SinkhornConfig& cfg) {
    check_weights(w);
    if (!(cfg.lambda > 0.0)) throw Error(ErrorCode::ConfigInvalid, "sinkhorn regularization must be positive");
    const Index n = w.size();
    const double nd = static_cast<double>(n);
    const double lam = cfg.lambda;
    const double ninf = -std::numeric_limits<double>::infinity();
    Vector loga = w.array().log();
    const double logb = -std::log(nd);
    Vector f = Vector::Zero(n), g = Vector::Zero(n);
    auto lse = [](const auto& v) {
        const double m = v.maxCoeff();
        if (m == -std::numeric_limits<double>::infinity()) return m;
        return m + std::log((v.array() - m).exp().sum());
    };
    Vector tmp(n);
    int it = 0;
    double err = std::numeric_limits<double>::infinity();
    for (; it < cfg.max_iterations; ++it) {
        for (Index i = 0; i < n; ++i) {
            if (loga[i] == ninf) {
                f[i] = ninf;
                continue;
            }
            for (Index j = 0; j < n; ++j) tmp[j] = (g[j] - cost(i, j)) / lam;
            f[i] = lam * (loga[i] - lse(tmp));
        }
        for (Index j = 0; j < n; ++j) {
            for (Index i = 0; i < n; ++i) tmp[i] = f[i] == ninf ? ninf : (f[i] - cost(i, j)) / lam;
            g[j] = lam * (logb - lse(tmp));
        }
        // Columns are exact after the g update; check the rows
        err = 0.0;
        for (Index i = 0; i < n; ++i) {
            if (f[i] == ninf) continue;
            for (Index j = 0; j < n; ++j) tmp[j] = (f[i] + g[j] - cost(i, j)) / lam;
            err = std::max(err, std::abs(std::exp(lse(tmp)) - w[i]));
        }
        if (err < cfg.tolerance) break;
    }
    TransportPlan plan;
    plan.d.resize(n, n);
    for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < n; ++i)
            plan.d(i, j) = f[i] == ninf ? 0.0 : nd * std::exp((f[i] + g[j] - cost(i, j)) / lam);
    plan.cost = (plan.d.array() * cost.array()).sum() / nd;
    plan.iterations = it;
    plan.exact = false;
    if (err * nd > 1e-6) throw Error(ErrorCode::MaxIterations, "sinkhorn did not meet the marginal tolerance");
    return plan;
}

}  // namespace pfda
