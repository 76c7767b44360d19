#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pfda/local_filters.hpp"

#include <cmath>

using namespace pfda;

namespace {

Matrix random_members(Index nx, Index n, std::uint64_t seed) {
    Matrix m(nx, n);
    for (Index i = 0; i < n; ++i) {
        RngStream s(seed, 0, static_cast<std::uint64_t>(i), Purpose::Initial);
        m.col(i) = s.normal_vector(nx);
    }
    return m;
}

/// Every other grid point observed with variance r.
ObservationBundle strided_obs(Index nx, double r, std::uint64_t seed) {
    std::vector<Index> idx;
    for (Index k = 0; k < nx; k += 2) idx.push_back(k);
    RngStream s(seed, 0, 0, Purpose::Observation);
    const auto ny = static_cast<Index>(idx.size());
    return ObservationBundle(s.normal_vector(ny), GaussianCov::scalar(ny, r), ObsOperator::selection(nx, idx), idx);
}

Vector bootstrap_weights(const Matrix& x, const ObservationBundle& obs) {
    Vector lw = Vector::Zero(x.cols());
    for (Index i = 0; i < x.cols(); ++i)
        for (Index l = 0; l < obs.size(); ++l) {
            const double d = obs.y[l] - x(obs.locations[static_cast<std::size_t>(l)], i);
            lw[i] -= 0.5 * d * d / obs.r.matrix()(l, l);
        }
    return log_weights_to_weights(lw);
}

}  // namespace

TEST_CASE("tapers and cyclic distance") {
    CHECK(gaspari_cohn(0.0, 4.0) == 1.0);
    CHECK(gaspari_cohn(4.0, 4.0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(gaspari_cohn(5.0, 4.0) == 0.0);
    CHECK(gaspari_cohn(2.0, 4.0) == doctest::Approx(5.0 / 24.0).epsilon(1e-14));
    for (double d = 0.0; d < 4.0; d += 0.25) CHECK(gaspari_cohn(d, 4.0) >= gaspari_cohn(d + 0.25, 4.0));
    CHECK(cyclic_distance(0, 9, 10) == 1.0);
    CHECK(cyclic_distance(2, 7, 10) == 5.0);
}

TEST_CASE("local weights are normalized at every grid point") {
    const Matrix x = random_members(12, 15, 1);
    const ObservationBundle obs = strided_obs(12, 0.5, 1);
    for (Taper t : {Taper::GaspariCohn, Taper::Gaussian, Taper::TopHat})
        for (LocalWeightForm f : {LocalWeightForm::LogTaper, LocalWeightForm::SumTaper}) {
            LocalizationSpec loc;
            loc.taper = t;
            loc.form = f;
            const LocalWeightField field = local_weights(x, obs, loc);
            CHECK((field.w.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
            CHECK(field.w.minCoeff() >= 0.0);
        }
}

TEST_CASE("a top-hat radius covering the grid gives the global bootstrap weights everywhere") {
    const Matrix x = random_members(10, 12, 2);
    const ObservationBundle obs = strided_obs(10, 0.7, 2);
    LocalizationSpec loc;
    loc.taper = Taper::TopHat;
    loc.radius = 10.0;
    const LocalWeightField field = local_weights(x, obs, loc);
    const Vector w = bootstrap_weights(x, obs);
    for (Index k = 0; k < 10; ++k) CHECK((field.w.col(k) - w).cwiseAbs().maxCoeff() < 1e-12);
    for (int c : field.obs_count) CHECK(c == 5);
}

TEST_CASE("LETPF on a scalar state matches the ETPF") {
    const Matrix x = random_members(1, 9, 3);
    const ObservationBundle obs(Vector::Constant(1, 0.8), GaussianCov::scalar(1, 0.4), ObsOperator::selection(1, {0}), {0});
    LetpfConfig cfg;
    cfg.loc.taper = Taper::TopHat;
    StepDiagnostics d1, d2;
    const Ensemble l = letpf_step(Ensemble::uniform(x), obs, cfg, StepContext{}, d1);
    const Ensemble e = etpf_step(Ensemble::uniform(x), obs, EtpfConfig{}, d2);
    CHECK((l.members - e.members).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("LETPF preserves the local weighted mean") {
    const Matrix x = random_members(8, 10, 4);
    const ObservationBundle obs = strided_obs(8, 0.5, 4);
    LocalizationSpec loc;
    const LocalWeightField field = local_weights(x, obs, loc);
    const Matrix a = letpf_transform(x, field, false, StepContext{});
    for (Index k = 0; k < 8; ++k)
        CHECK(a.row(k).mean() == doctest::Approx(x.row(k).dot(field.w.col(k))).epsilon(1e-12));
}

TEST_CASE("location PF with one particle returns it") {
    const Matrix x = random_members(6, 1, 5);
    StepDiagnostics d;
    const Ensemble a = location_pf_step(Ensemble::uniform(x), strided_obs(6, 0.5, 5), LocationConfig{},
                                        StepContext{RngFactory{1, 1}, 1}, d);
    CHECK((a.members - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("space-time PF bookkeeping") {
    const Index nx = 5;
    SpatialChainModel chain(nx, 0.5, 0.3, 0.4);
    std::vector<Index> idx{0, 2, 4};
    RngStream ys(6, 0, 0, Purpose::Observation);
    const ObservationBundle obs(ys.normal_vector(3), GaussianCov::scalar(3, 0.5), ObsOperator::selection(nx, idx), idx);
    SpaceTimeConfig cfg;
    cfg.local_members = 6;
    StepDiagnostics d;
    SpaceTimeReport rep;
    const Ensemble a = space_time_pf_cycle(Ensemble::uniform(random_members(nx, 8, 6)), chain, obs, cfg,
                                           StepContext{RngFactory{1, 1}, 1}, d, &rep);
    CHECK(a.size() == 8);
    CHECK(rep.log_stage_means.cols() == nx);
    CHECK((rep.log_global_weights - rep.log_stage_means.rowwise().sum()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Poterjoy filter with alpha = 0 leaves the ensemble unchanged") {
    const Matrix x = random_members(8, 10, 7);
    PoterjoyConfig cfg;
    cfg.alpha = 0.0;
    StepDiagnostics d;
    const Ensemble a = poterjoy_lpf_step(Ensemble::uniform(x), strided_obs(8, 0.5, 7), cfg,
                                         StepContext{RngFactory{1, 1}, 1}, d);
    CHECK((a.members - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("localization spec validation") {
    LocalizationSpec loc;
    loc.radius = -1.0;
    CHECK_THROWS(loc.validate());
}
