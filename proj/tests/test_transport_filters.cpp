#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pfda/transport_filters.hpp"

#include <cmath>

using namespace pfda;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector x(static_cast<Index>(v.size()));
    Index k = 0;
    for (double d : v) x[k++] = d;
    return x;
}

Matrix random_members(Index nx, Index n, std::uint64_t seed) {
    Matrix m(nx, n);
    for (Index i = 0; i < n; ++i) {
        RngStream s(seed, 0, static_cast<std::uint64_t>(i), Purpose::Initial);
        m.col(i) = s.normal_vector(nx);
    }
    return m;
}

Vector random_weights(Index n, std::uint64_t seed) {
    RngStream s(seed, 0, 0, Purpose::Proposal);
    Vector lw = 1.5 * s.normal_vector(n);
    return log_weights_to_weights(lw);
}

ObservationBundle first_component(Index nx, double y, double r) {
    return ObservationBundle(vec({y}), GaussianCov::scalar(1, r), ObsOperator::selection(nx, {0}), {0});
}

Vector weighted_mean(const Matrix& x, const Vector& w) { return x * w; }

}  // namespace

TEST_CASE("two-member transport") {
    Matrix x(1, 2);
    x << 0.0, 1.0;
    Matrix expect(2, 2);
    expect << 1.0, 0.5, 0.0, 0.5;
    const TransportPlan p = solve_transport(x, vec({0.75, 0.25}));
    CHECK((p.d - expect).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(p.cost == doctest::Approx(0.25));
    const TransportPlan p1 = solve_transport_1d(x.row(0).transpose(), vec({0.75, 0.25}));
    CHECK((p1.d - expect).cwiseAbs().maxCoeff() < 1e-12);
    // Equal weights: identity is optimal and free
    const TransportPlan eq = solve_transport(x, vec({0.5, 0.5}));
    CHECK((eq.d - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(eq.cost == 0.0);
}

TEST_CASE("exact plan marginals and optimality against the 1-D monotone plan") {
    for (std::uint64_t s = 1; s <= 10; ++s) {
        const Matrix x = random_members(1, 7, s);
        const Vector w = random_weights(7, s);
        const TransportPlan lp = solve_transport(x, w);
        const TransportPlan mono = solve_transport_1d(x.row(0).transpose(), w);
        CHECK(lp.marginal_error(w) < 1e-12);
        CHECK(mono.marginal_error(w) < 1e-12);
        CHECK(lp.cost == doctest::Approx(mono.cost).epsilon(1e-10));
        CHECK(lp.d.minCoeff() >= -1e-14);
    }
}

TEST_CASE("Sinkhorn plan") {
    const Matrix x = random_members(2, 6, 3);
    const Vector w = random_weights(6, 3);
    const Matrix c = squared_distances(x);
    const TransportPlan exact = solve_transport(w, c);
    SinkhornConfig cfg{0.05, 200000, 1e-12};
    const TransportPlan sk = sinkhorn_transport(w, c, cfg);
    CHECK(sk.marginal_error(w) < 1e-9);
    CHECK(sk.cost >= exact.cost - 1e-12);
    cfg.lambda = 0.005;
    const TransportPlan sharp = sinkhorn_transport(w, c, cfg);
    CHECK(std::abs(sharp.cost - exact.cost) <= std::abs(sk.cost - exact.cost) + 1e-12);
}

TEST_CASE("ETPF preserves the weighted mean and collapses on a point mass") {
    const Matrix x = random_members(3, 8, 4);
    const Vector w = random_weights(8, 4);
    StepDiagnostics d;
    const Ensemble a = etpf_transform(x, w, EtpfConfig{}, d);
    CHECK((a.mean() - weighted_mean(x, w)).cwiseAbs().maxCoeff() < 1e-12);
    Vector point = Vector::Zero(8);
    point[5] = 1.0;
    StepDiagnostics d2;
    const Ensemble c = etpf_transform(x, point, EtpfConfig{}, d2);
    for (Index i = 0; i < 8; ++i) CHECK((c.members.col(i) - x.col(5)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("second-order correction") {
    for (std::uint64_t s = 1; s <= 5; ++s) {
        const Index n = 6;
        const Vector w = random_weights(n, 10 + s);
        const Matrix x = random_members(2, n, 10 + s);
        const TransportPlan p = solve_transport(x, w);
        RiccatiReport rep;
        const Matrix dt = etpf_second_order_correction(p.d, w, &rep);
        const Matrix delta = dt - p.d;
        CHECK((delta - delta.transpose()).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((delta * Vector::Ones(n)).cwiseAbs().maxCoeff() < 1e-10);
        // Independent check of the covariance identity
        const Matrix centred = dt - w * Vector::Ones(n).transpose();
        const Matrix target = Matrix(w.asDiagonal()) - w * w.transpose();
        CHECK((centred * centred.transpose() / static_cast<double>(n) - target).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(rep.residual < 1e-10);
    }
}

TEST_CASE("CARE solution") {
    Matrix a(2, 2), g(2, 2), q(2, 2);
    a << -1.0, 0.5, 0.0, -2.0;
    g << 1.0, 0.0, 0.0, 2.0;
    q << 2.0, 0.3, 0.3, 1.0;
    const Matrix x = solve_care(a, g, q);
    CHECK((a.transpose() * x + x * a - x * g * x + q).cwiseAbs().maxCoeff() < 1e-11);
    // Stabilizing: A − GX is Hurwitz
    const Eigen::VectorXcd ev = Matrix(a - g * x).eigenvalues();
    CHECK(ev.real().maxCoeff() < 0.0);
}

TEST_CASE("tempering schedules") {
    CHECK_THROWS(TemperSchedule{{0.5, 0.4}}.validate());
    CHECK_THROWS(TemperSchedule{{1.2, -0.2}}.validate());
    CHECK_THROWS(TemperSchedule::uniform(0));
    const TemperSchedule u = TemperSchedule::uniform(3);
    CHECK_NOTHROW(u.validate());
}

TEST_CASE("tempering: first-stage weights are the tempered likelihood and members are copies") {
    const Matrix x = random_members(2, 10, 5);
    const ObservationBundle obs = first_component(2, 0.4, 0.5);
    TemperConfig cfg;
    cfg.schedule = TemperSchedule::uniform(4);
    StepDiagnostics d;
    const Ensemble a = tempered_pf_step(Ensemble::uniform(x), obs, cfg, StepContext{RngFactory{1, 1}, 1}, d);
    Vector lw(10);
    for (Index i = 0; i < 10; ++i) lw[i] = -0.25 * 0.5 * (0.4 - x(0, i)) * (0.4 - x(0, i)) / 0.5;
    CHECK((d.analysis_weights - log_weights_to_weights(lw)).cwiseAbs().maxCoeff() < 1e-12);
    for (Index i = 0; i < 10; ++i) {
        double best = 1e300;
        for (Index j = 0; j < 10; ++j) best = std::min(best, (a.members.col(i) - x.col(j)).norm());
        CHECK(best == 0.0);
    }
}

TEST_CASE("Stein mapping: single particle climbs to the MAP") {
    Matrix x(2, 1);
    x << 1.0, -1.0;
    SteinConfig cfg;
    cfg.prior_cov = Matrix::Identity(2, 2);
    cfg.step = 0.2;
    cfg.tolerance = 1e-12;
    cfg.max_iterations = 20000;
    const ObservationBundle obs = first_component(2, 3.0, 1.0);
    StepDiagnostics d;
    SteinReport rep;
    const Ensemble a = mapping_pf_step(Ensemble::uniform(x), obs, cfg, StepContext{}, d, &rep);
    // Posterior mode: component 0 → (1 + 3)/2, component 1 stays at the prior mean
    CHECK(a.members(0, 0) == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(a.members(1, 0) == doctest::Approx(-1.0).epsilon(1e-8));
    for (std::size_t k = 1; k < rep.surrogate.size(); ++k) CHECK(rep.surrogate[k] >= rep.surrogate[k - 1]);
}

TEST_CASE("Stein mapping with infinite bandwidth translates the ensemble rigidly") {
    const Matrix x = random_members(2, 5, 6);
    SteinConfig cfg;
    cfg.bandwidth = std::numeric_limits<double>::infinity();
    cfg.max_iterations = 3;
    StepDiagnostics d;
    const Ensemble a = mapping_pf_step(Ensemble::uniform(x), first_component(2, 1.0, 0.5), cfg, StepContext{}, d);
    const Vector shift = a.members.col(0) - x.col(0);
    CHECK(shift.norm() > 1e-6);
    for (Index i = 1; i < 5; ++i) CHECK((a.members.col(i) - x.col(i) - shift).cwiseAbs().maxCoeff() < 1e-12);
}
