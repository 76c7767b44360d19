#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pfda/core.hpp"

#include <cmath>
#include <numbers>

using namespace pfda;

TEST_CASE("normalize_weights") {
    CHECK(normalize_weights(Vector::Constant(2, 2.0)).isApprox(Vector::Constant(2, 0.5)));
    Vector w(3);
    w << 1, 0, 0;
    CHECK(normalize_weights(w) == w);
    // Scaling by a positive constant changes nothing
    Vector r(4);
    r << 0.3, 1.7, 0.2, 2.9;
    CHECK((normalize_weights(r) - normalize_weights(1e-7 * r)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(normalize_weights(Vector::Zero(3)), Error);
}

TEST_CASE("log_weights_to_weights is shift invariant and underflow safe") {
    Vector l(2);
    l << 0, 0;
    CHECK(log_weights_to_weights(l).isApprox(Vector::Constant(2, 0.5)));
    for (double c : {-800.0, 0.0, 700.0}) {
        l << c, c + std::log(3.0);
        const Vector w = log_weights_to_weights(l);
        CHECK(w[0] == doctest::Approx(0.25).epsilon(1e-14));
        CHECK(w[1] == doctest::Approx(0.75).epsilon(1e-14));
    }
    l << -1000, 0;
    const Vector w = log_weights_to_weights(l);
    CHECK(w[1] == 1.0);
    CHECK(w[0] < 1e-300);
    // Denormal inputs that a direct sum would lose
    l << std::log(1e-320), std::log(1e-320);
    CHECK(log_weights_to_weights(l).isApprox(Vector::Constant(2, 0.5)));
}

TEST_CASE("gaussian_log_density against an explicit inverse and determinant") {
    const double c = -0.5 * std::log(2.0 * std::numbers::pi);
    CHECK(gaussian_log_density(Vector::Zero(1), Vector::Zero(1), GaussianCov::scalar(1, 1.0)) == doctest::Approx(c));
    CHECK(gaussian_log_density(Vector::Ones(1), Vector::Zero(1), GaussianCov::scalar(1, 1.0)) ==
          doctest::Approx(-0.5 + c));

    Matrix p(3, 3);
    p << 2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0;
    Vector x(3), m(3);
    x << 0.4, -1.1, 0.7;
    m << 0.1, 0.2, -0.3;
    // Cofactor determinant and adjugate inverse
    const double det = p(0, 0) * (p(1, 1) * p(2, 2) - p(1, 2) * p(2, 1)) -
                       p(0, 1) * (p(1, 0) * p(2, 2) - p(1, 2) * p(2, 0)) +
                       p(0, 2) * (p(1, 0) * p(2, 1) - p(1, 1) * p(2, 0));
    Matrix adj(3, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
            adj(i, j) = p(r0, c0) * p(r1, c1) - p(r0, c1) * p(r1, c0);
        }
    const Vector d = x - m;
    const double q = d.dot(adj / det * d);
    const double ref = -0.5 * q - 0.5 * std::log(det) + 3.0 * c;
    CHECK(gaussian_log_density(x, m, GaussianCov(p)) == doctest::Approx(ref).epsilon(1e-13));
}

TEST_CASE("GaussianCov factorizations") {
    Matrix p(2, 2);
    p << 4.0, 1.0, 1.0, 3.0;
    GaussianCov g(p);
    CHECK(g.positive_definite());
    CHECK((g.sqrt_factor() * g.sqrt_factor().transpose() - p).cwiseAbs().maxCoeff() < 1e-14);
    const Matrix s = g.symmetric_sqrt();
    CHECK((s * s - p).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(g.log_det() == doctest::Approx(std::log(11.0)));
    CHECK((g.inverse() * p - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(GaussianCov::scalar(3, 0.0).is_zero());
    CHECK(GaussianCov::diagonal(Vector::Constant(2, 2.0)).is_diagonal());
    // Semidefinite: still samples through the eigen root
    Matrix semi(2, 2);
    semi << 1.0, 1.0, 1.0, 1.0;
    GaussianCov gs(semi);
    CHECK_FALSE(gs.positive_definite());
    RngStream rng(1, 0, 0, Purpose::Initial);
    const Vector v = gs.sample(rng);
    CHECK(v[0] == doctest::Approx(v[1]).epsilon(1e-12));
}

TEST_CASE("RngStream is a function of its coordinates") {
    RngStream a(7, 3, 11, Purpose::Resample, 2), b(7, 3, 11, Purpose::Resample, 2);
    for (int k = 0; k < 100; ++k) CHECK(a() == b());
    RngStream c(7, 3, 12, Purpose::Resample, 2), d(7, 3, 11, Purpose::Proposal, 2), e(7, 4, 11, Purpose::Resample, 2);
    RngStream ref(7, 3, 11, Purpose::Resample, 2);
    const auto r = ref();
    CHECK(c() != r);
    CHECK(d() != r);
    CHECK(e() != r);
}

TEST_CASE("RngStream moments") {
    RngStream s(1, 0, 0, Purpose::Initial);
    const int n = 200000;
    double m = 0, v = 0, u = 0;
    for (int k = 0; k < n; ++k) {
        const double z = s.normal();
        m += z;
        v += z * z;
        u += s.uniform();
    }
    m /= n;
    v = v / n - m * m;
    u /= n;
    CHECK(std::abs(m) < 3.0 / std::sqrt(n) * 1.5);
    CHECK(std::abs(v - 1.0) < 3.0 * std::sqrt(2.0 / n) * 1.5);
    CHECK(std::abs(u - 0.5) < 3.0 * std::sqrt(1.0 / 12.0 / n) * 1.5);
}

TEST_CASE("parallel_for result does not depend on the thread count") {
    std::vector<double> one(1000), four(1000);
    auto body = [](std::vector<double>& out) {
        return [&out](Index i) {
            RngStream s(3, 0, static_cast<std::uint64_t>(i), Purpose::ModelNoise);
            out[static_cast<std::size_t>(i)] = s.normal();
        };
    };
    parallel_for(1000, 1, body(one));
    parallel_for(1000, 4, body(four));
    CHECK(one == four);
    // Lowest failing index wins
    try {
        parallel_for(100, 4, [](Index i) {
            if (i == 30 || i == 80) throw Error(ErrorCode::NonFiniteState, "at " + std::to_string(i));
        });
        FAIL("no exception");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("at 30") != std::string::npos);
    }
}

TEST_CASE("Ensemble moments") {
    Matrix m(1, 3);
    m << 0.0, 1.0, 3.0;
    Vector w(3);
    w << 0.5, 0.25, 0.25;
    Ensemble e(m, w);
    CHECK(e.mean()[0] == doctest::Approx(1.0));
    CHECK(e.covariance()(0, 0) == doctest::Approx(0.5 * 1 + 0.25 * 0 + 0.25 * 4));
    CHECK(sample_covariance(m)(0, 0) == doctest::Approx((16.0 / 9 + 1.0 / 9 + 25.0 / 9) / 2.0));
    CHECK(sample_covariance(Matrix::Ones(2, 1)).isZero());
    Matrix bad = m;
    bad(0, 1) = std::nan("");
    CHECK_THROWS_AS(Ensemble::uniform(bad).check_finite(), Error);
}

TEST_CASE("StepDiagnostics records weights") {
    StepDiagnostics d;
    Vector w(4);
    w << 0.995, 0.002, 0.002, 0.001;
    d.record_weights(w);
    CHECK(d.degenerate);
    CHECK(d.max_weight == doctest::Approx(0.995));
    CHECK(d.ess == doctest::Approx(1.0 / w.squaredNorm()));
    StepDiagnostics u;
    u.record_weights(Vector::Constant(4, 0.25));
    CHECK_FALSE(u.degenerate);
    CHECK(u.ess == doctest::Approx(4.0));
}
