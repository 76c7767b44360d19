#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pfda/models.hpp"

#include <cmath>

using namespace pfda;

namespace {
Vector vec(std::initializer_list<double> v) {
    Vector x(static_cast<Index>(v.size()));
    Index k = 0;
    for (double d : v) x[k++] = d;
    return x;
}

/// Classical RK4 on the Lorenz-63 tendency with many substeps.
Vector l63_reference(Vector x, double dt, int sub) {
    auto f = [](const Vector& s) {
        return vec({10.0 * (s[1] - s[0]), s[0] * (28.0 - s[2]) - s[1], s[0] * s[1] - 8.0 / 3.0 * s[2]});
    };
    const double h = dt / sub;
    for (int k = 0; k < sub; ++k) {
        const Vector k1 = f(x), k2 = f(x + 0.5 * h * k1), k3 = f(x + 0.5 * h * k2), k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return x;
}
}  // namespace

TEST_CASE("propagate examples") {
    LinearGaussianModel lin(Matrix::Constant(1, 1, 0.9), GaussianCov::scalar(1, 0.0));
    CHECK(propagate(lin, vec({1.0}), nullptr)[0] == doctest::Approx(0.9));
    Lorenz96Model l96(40, 8.0, 0.05, GaussianCov::scalar(40, 0.0));
    const Vector fixed = Vector::Constant(40, 8.0);
    CHECK((propagate(l96, fixed, nullptr) - fixed).cwiseAbs().maxCoeff() < 1e-14);
    Lorenz63Model l63(0.01, GaussianCov::scalar(3, 0.0));
    // One RK4 step carries O(dt^5) local error, about 2e-6 here
    const Vector x1 = vec({1, 1, 1});
    const double e1 = (l63.step(x1) - l63_reference(x1, 0.01, 1000)).cwiseAbs().maxCoeff();
    CHECK(e1 < 1e-5);
    Lorenz63Model half(0.005, GaussianCov::scalar(3, 0.0));
    const double e2 = (half.step(x1) - l63_reference(x1, 0.005, 1000)).cwiseAbs().maxCoeff();
    CHECK(e1 / e2 == doctest::Approx(32.0).epsilon(0.1));
}

TEST_CASE("L96 tendency commutes with cyclic rotation") {
    Lorenz96Model m(10, 8.0, 0.05, GaussianCov::scalar(10, 0.0));
    RngStream s(1, 0, 0, Purpose::Initial);
    const Vector x = 8.0 + s.normal_vector(10).array();
    Vector rx(10);
    for (Index i = 0; i < 10; ++i) rx[(i + 3) % 10] = x[i];
    const Vector t = m.tendency(x), rt = m.tendency(rx);
    for (Index i = 0; i < 10; ++i) CHECK(rt[(i + 3) % 10] == doctest::Approx(t[i]).epsilon(1e-14));
    // dx_i/dt = (x_{i+1} − x_{i−2}) x_{i−1} − x_i + F at one index by hand
    CHECK(t[4] == doctest::Approx((x[5] - x[2]) * x[3] - x[4] + 8.0));
}

TEST_CASE("model noise is added once per step with covariance Q") {
    LinearGaussianModel m(Matrix::Identity(2, 2), GaussianCov::scalar(2, 0.25), 3);
    const Vector x0 = vec({1.0, -1.0});
    const int n = 20000;
    Matrix d(2, n);
    for (int i = 0; i < n; ++i) d.col(i) = forecast_cycle(m, x0, RngFactory{5, 2}, static_cast<std::uint64_t>(i)) - x0;
    const Vector mean = d.rowwise().mean();
    const Matrix cov = sample_covariance(d);
    CHECK(mean.cwiseAbs().maxCoeff() < 3 * std::sqrt(0.75 / n) * 1.5);
    CHECK(std::abs(cov(0, 0) - 0.75) < 0.05);
    CHECK(std::abs(cov(0, 1)) < 0.05);
    CHECK((forecast_cycle(m, x0, RngFactory{5, 2}, 0, false) - x0).isZero());
}

TEST_CASE("observation operators") {
    CHECK(observe(*ObsOperator::selection(2, {0}), vec({3, 4}), GaussianCov::scalar(1, 0.0), nullptr)[0] == 3.0);
    Matrix h(1, 2);
    h << 1, 1;
    CHECK(observe(*ObsOperator::dense(h), vec({1, 2}), GaussianCov::scalar(1, 0.0), nullptr)[0] == 3.0);
    CHECK(ObsOperator::square(2, {0, 1})->apply(vec({2, -2})) == vec({4, 4}));
    CHECK(ObsOperator::absolute(2, {1})->apply(vec({2, -2}))[0] == 2.0);
    const auto sq = ObsOperator::square(2, {0, 1});
    CHECK_FALSE(sq->is_linear());
    CHECK_THROWS_AS(sq->matrix(), Error);
    Matrix jac = sq->jacobian(vec({1.5, -0.5}));
    CHECK(jac(0, 0) == doctest::Approx(3.0));
    CHECK(jac(1, 1) == doctest::Approx(-1.0));
    // Custom map without tangent: finite differences
    const auto cube = ObsOperator::custom(1, 1, [](const Vector& x) { return Vector(x.array().cube()); });
    CHECK(cube->jacobian(vec({2.0}))(0, 0) == doctest::Approx(12.0).epsilon(1e-5));
}

TEST_CASE("ObservationBundle likelihoods include normalization") {
    ObservationBundle b(vec({1.0}), GaussianCov::scalar(1, 2.0), ObsOperator::selection(1, {0}), {0});
    Matrix x(1, 2);
    x << 1.0, 3.0;
    const Vector l = b.log_likelihoods(x);
    CHECK(l[0] == doctest::Approx(-0.5 * std::log(2 * M_PI * 2.0)));
    CHECK(l[1] == doctest::Approx(-0.5 * std::log(2 * M_PI * 2.0) - 1.0));
    CHECK(b.with_scaled_noise(3.0).r.matrix()(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("twin experiment") {
    TwinExperiment exp;
    exp.model = std::make_shared<LinearGaussianModel>(Matrix::Identity(1, 1), GaussianCov::scalar(1, 0.0));
    exp.op = ObsOperator::selection(1, {0});
    exp.r = GaussianCov::scalar(1, 0.0);
    exp.initial_truth = vec({2.5});
    exp.initial_mean = vec({0.0});
    exp.initial_cov = GaussianCov::scalar(1, 1.0);
    exp.cycles = 0;
    TwinRun zero = run_truth_and_observations(exp);
    CHECK(zero.observations.empty());
    CHECK(zero.truth.size() == 1);
    exp.cycles = 5;
    TwinRun r = run_truth_and_observations(exp);
    for (const auto& y : r.observations) CHECK((*y)[0] == 2.5);
    // Noisy runs repeat bit for bit
    exp.model = std::make_shared<Lorenz96Model>(8, 8.0, 0.05, GaussianCov::scalar(8, 0.1));
    exp.op = ObsOperator::selection(8, {0, 2, 4, 6});
    exp.r = GaussianCov::scalar(4, 1.0);
    exp.initial_truth = Vector::Constant(8, 8.0);
    exp.initial_truth[0] += 0.01;
    exp.obs_every = 2;
    TwinRun a = run_truth_and_observations(exp), b = run_truth_and_observations(exp);
    for (int c = 0; c < exp.cycles; ++c) {
        CHECK(a.truth[static_cast<std::size_t>(c + 1)] == b.truth[static_cast<std::size_t>(c + 1)]);
        CHECK(a.observations[static_cast<std::size_t>(c)].has_value() == ((c + 1) % 2 == 0));
    }
    const Ensemble e = initial_ensemble(exp, 10, 3);
    CHECK(e.size() == 10);
    CHECK(e.members == initial_ensemble(exp, 10, 3).members);
}

TEST_CASE("spatial chain is a joint linear-Gaussian model") {
    SpatialChainModel chain(4, 0.5, 0.7, 0.8);
    const Matrix m = *chain.linear_map();
    // x_l = a x_{l−1}(new) + b x_l(old): the map is (I − aS)⁻¹ b
    Matrix s = Matrix::Zero(4, 4);
    for (Index l = 1; l < 4; ++l) s(l, l - 1) = 1.0;
    const Matrix ref = (Matrix::Identity(4, 4) - 0.5 * s).inverse() * 0.7;
    CHECK((m - ref).cwiseAbs().maxCoeff() < 1e-14);
    const Matrix q = (Matrix::Identity(4, 4) - 0.5 * s).inverse();
    CHECK((chain.noise().matrix() - 0.64 * q * q.transpose()).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(chain.conditional_mean(2, 1.0, 2.0) == doctest::Approx(0.5 + 1.4));
    CHECK(chain.conditional_mean(0, 1.0, 2.0) == doctest::Approx(1.4));
}
