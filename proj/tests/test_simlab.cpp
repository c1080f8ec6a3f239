#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

#include "car/diagnostics.hpp"
#include "car/redesign.hpp"
#include "car/simlab.hpp"

using namespace car;
using namespace car::sim;
using car::policy::PolicyKind;
using car::policy::PolicySpec;

namespace {

PolicySpec make(const std::string& name, PolicyKind kind) {
    PolicySpec p;
    p.name = name;
    p.kind = kind;
    if (kind == PolicyKind::rmm) p.warmup = 1;
    if (kind == PolicyKind::feasible) p.warmup = 10;
    if (kind == PolicyKind::oracle) p.epsilon = policy::EpsilonMode::fixed_zero;
    return p;
}

ExperimentSpec table1_spec(std::size_t reps) {
    ExperimentSpec s;
    s.name = "t1";
    s.rho = 2.0 / 3.0;
    s.policies = {make("CR", PolicyKind::cr), make("RMM", PolicyKind::rmm), make("FR", PolicyKind::feasible),
                  make("OR", PolicyKind::oracle)};
    s.sample_sizes = {50, 100};
    s.replications = reps;
    s.additional = {{"sqrt_sum_abs", AdditionalKind::sqrt_sum_abs}, {"sum_squares", AdditionalKind::sum_squares}};
    s.base_seed = 99;
    return s;
}

ExperimentSpec discrete_spec(std::size_t reps) {
    ExperimentSpec s;
    s.rho = 2.0 / 3.0;
    s.generator = CovariateGenerator::appendix_b();
    maps::DiscreteScheme sc;
    sc.levels = {2, 3};
    sc.weights_marginal = {1.0, 2.0};
    s.map = maps::FeatureMap::discrete(maps::MapKind::pocock_simon, sc);
    PolicySpec ps = make("PS", PolicyKind::ps_discrete);
    ps.rho1 = 0.99;
    s.policies = {ps};
    s.sample_sizes = {40, 120};
    s.replications = reps;
    s.strata = true;
    s.base_seed = 5;
    return s;
}

}  // namespace

TEST_CASE("continuous generator moments", "[simlab][generators]") {
    const auto g = CovariateGenerator::table1();
    REQUIRE(g.raw_dim() == 3);
    RngStream rng(1, 0);
    const int n = 200000;
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    Eigen::Matrix3d second = Eigen::Matrix3d::Zero();
    for (int i = 0; i < n; ++i) {
        const auto u = g.draw(rng, i);
        const Eigen::Vector3d x(u.raw[0], u.raw[1], u.raw[2]);
        mean += x;
        second += x * x.transpose();
        REQUIRE(x[2] >= 0.0);
    }
    mean /= n;
    second /= n;
    // X1 = A + B: var 2, cov(X1, X2) = 1; X3 exponential: mean 1, var 1
    REQUIRE(std::abs(mean[0]) < 0.015);
    REQUIRE(std::abs(mean[2] - 1.0) < 0.01);
    REQUIRE(std::abs(second(0, 0) - 2.0) < 0.03);
    REQUIRE(std::abs(second(0, 1) - 1.0) < 0.02);
    REQUIRE(std::abs(second(2, 2) - 2.0) < 0.05);
}

TEST_CASE("discrete generator frequencies follow 1,4,1,3,1,3", "[simlab][generators]") {
    const auto g = CovariateGenerator::appendix_b();
    RngStream rng(2, 0);
    std::vector<int> counts(6, 0);
    const int n = 130000;
    for (int i = 0; i < n; ++i) {
        const auto u = g.draw(rng, i);
        ++counts[static_cast<std::size_t>((u.raw[0] - 1) * 3 + (u.raw[1] - 1))];
    }
    const double w[] = {1, 4, 1, 3, 1, 3};
    for (int k = 0; k < 6; ++k) {
        const double p = w[k] / 13.0;
        REQUIRE(std::abs(counts[k] / double(n) - p) < 4.0 * std::sqrt(p * (1 - p) / n));
    }
}

TEST_CASE("additional covariate formulas", "[simlab]") {
    const Vec x = Eigen::Vector3d(4.0, -1.0, 0.0);
    AdditionalCovariateSpec a{"a", AdditionalKind::sqrt_sum_abs};
    REQUIRE(a.value(x, {}) == Catch::Approx(std::sqrt(5.0)));
    a.kind = AdditionalKind::sum_squares;
    REQUIRE(a.value(x, {}) == 17.0);
    a.kind = AdditionalKind::signed_sqrt_sum;
    REQUIRE(a.value(x, {}) == Catch::Approx(1.0));
    a.kind = AdditionalKind::indicator_norm_ge;
    a.threshold = 4.0;
    REQUIRE(a.value(x, {}) == 1.0);
    a.threshold = 4.2;
    REQUIRE(a.value(x, {}) == 0.0);
    a.kind = AdditionalKind::hamd17_square_like;
    a.column = 1;
    REQUIRE(a.value(x, {}) == 1.0);
    a.use_extra = true;
    a.column = 0;
    REQUIRE(a.value(x, {7.0}) == 49.0);
    a.column = 3;
    REQUIRE_THROWS_AS(a.value(x, {7.0}), InvalidInput);
    a = {"c", AdditionalKind::custom};
    a.coefficients = {1.0, 2.0, 3.0};
    a.power = 2.0;
    a.noise_sd = 0.5;
    REQUIRE(a.value(x, {}, 2.0) == Catch::Approx(16.0 + 2.0 + 1.0));
}

TEST_CASE("experiments are deterministic across runs and thread counts", "[simlab][determinism]") {
    const auto spec = table1_spec(24);
    const auto a = run_experiment(spec, 1);
    const auto b = run_experiment(spec, 4);
    const auto c = run_experiment(spec, 7);
    REQUIRE(to_csv(a) == to_csv(b));
    REQUIRE(to_csv(a) == to_csv(c));
    for (std::size_t p = 0; p < a.values.size(); ++p)
        for (std::size_t s = 0; s < a.values[p].size(); ++s) REQUIRE(a.values[p][s] == b.values[p][s]);
    REQUIRE(to_csv(a).rfind("policy,n,stat,mean,sd\n", 0) == 0);
}

TEST_CASE("replications share covariates across policies", "[simlab]") {
    // common random numbers: two copies of one policy see the same units and draws
    auto spec = table1_spec(10);
    spec.policies = {make("A", PolicyKind::cr), make("B", PolicyKind::cr)};
    const auto r = run_experiment(spec, 2);
    REQUIRE(r.values[0][1] == r.values[1][1]);
}

TEST_CASE("strata partition the total imbalance exactly", "[simlab][discrete]") {
    const auto r = run_discrete_shift_study(discrete_spec(50), 3);
    REQUIRE(r.stat_names.size() == 7);
    for (std::size_t s = 0; s < r.sample_sizes.size(); ++s) {
        const Mat& m = r.values[0][s];
        const auto total_col = std::find(r.stat_names.begin(), r.stat_names.end(), "total") - r.stat_names.begin();
        for (Eigen::Index row = 0; row < m.rows(); ++row) {
            double sum = 0.0;
            for (Eigen::Index k = 0; k < m.cols(); ++k)
                if (k != total_col) sum += m(row, k);
            REQUIRE(sum == Catch::Approx(m(row, total_col)).margin(1e-9));
        }
    }
    REQUIRE_NOTHROW(r.cell("PS", 120, "stratum_(1,2)"));
}

TEST_CASE("a constant additional covariate tracks the total", "[simlab]") {
    auto spec = table1_spec(400);
    spec.policies = {make("CR", PolicyKind::cr)};
    AdditionalCovariateSpec one{"one", AdditionalKind::indicator_norm_ge};
    one.threshold = 0.0;
    spec.additional = {one};
    const auto r = run_experiment(spec, 4);
    const Vec y = r.column("CR", 100, "one"), total = r.column("CR", 100, "total");
    REQUIRE((y - total).cwiseAbs().maxCoeff() < 1e-9);
    const auto st = shift_statistic(y);
    REQUIRE(std::abs(st.mean) < 4.0 * st.se);
    REQUIRE(st.se == Catch::Approx(st.sd / std::sqrt(400.0)));
}

TEST_CASE("normality check calibration", "[simlab][normality]") {
    RngStream rng(3, 0);
    Vec z(20000);
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    const auto ok = normality_check(z);
    REQUIRE(ok.pass);
    REQUIRE(std::abs(ok.skewness) < kSkewLimit);
    Vec e(20000);
    for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = rng.exponential();
    REQUIRE_FALSE(normality_check(e).pass);
}

TEST_CASE("shift statistic", "[simlab]") {
    Vec v(4);
    v << 1, 2, 3, 4;
    const auto s = shift_statistic(v);
    REQUIRE(s.mean == 2.5);
    REQUIRE(s.sd == Catch::Approx(std::sqrt(5.0 / 3.0)));
    REQUIRE(s.se == Catch::Approx(std::sqrt(5.0 / 3.0) / 2.0));
}

TEST_CASE("experiment validation", "[simlab]") {
    auto spec = table1_spec(1);
    REQUIRE_THROWS_AS(spec.validate(), InvalidInput);
    spec = table1_spec(5);
    spec.map = maps::FeatureMap::identity(2);
    REQUIRE_THROWS_AS(spec.validate(), InvalidInput);
    spec = table1_spec(5);
    spec.policies.push_back(make("CR", PolicyKind::cr));
    REQUIRE_THROWS_AS(spec.validate(), InvalidInput);
    spec = table1_spec(5);
    spec.strata = true;
    REQUIRE_THROWS_AS(spec.validate(), InvalidInput);
}

TEST_CASE("redesign on a CSV matches a hand-driven engine run", "[simlab][redesign]") {
    std::stringstream csv;
    csv << "id,a,b\n";
    RngStream gen(4, 0);
    std::vector<Vec> rows;
    for (int i = 0; i < 60; ++i) {
        const double a = std::round(gen.normal() * 100) / 10, b = std::round(gen.normal() * 100) / 10;
        csv << i << "," << a << "," << b << "\n";
        rows.push_back(Eigen::Vector2d(a, b));
    }
    const auto table = read_csv(csv);
    RedesignSpec spec;
    spec.columns = {"a", "b"};
    spec.scaling = Scaling::none;
    spec.experiment.rho = 0.5;
    spec.experiment.policies = {make("RMM", PolicyKind::rmm)};
    spec.experiment.sample_sizes = {30, 60};
    spec.experiment.replications = 3;
    spec.experiment.base_seed = 12;
    const auto r = redesign_from_table(table, spec, 2);
    for (std::uint64_t rep = 0; rep < 3; ++rep) {
        engine::TrialConfig cfg;
        cfg.rho = 0.5;
        cfg.policy = spec.experiment.policies[0];
        cfg.feature_map = maps::FeatureMap::identity(2);
        cfg.seed = 12;
        cfg.stream = rep;
        engine::TrialState st(cfg);
        for (int i = 0; i < 60; ++i) {
            engine::enroll(st, {rows[i][0], rows[i][1]});
            if (i + 1 == 30 || i + 1 == 60) {
                const Vec l1 = r.column("RMM", i + 1, "lambda_1"), l2 = r.column("RMM", i + 1, "lambda_2");
                REQUIRE(l1[rep] == st.imbalance().lambda[0]);
                REQUIRE(l2[rep] == st.imbalance().lambda[1]);
            }
        }
    }
    spec.experiment.sample_sizes = {61};
    REQUIRE_THROWS_AS(redesign_from_table(table, spec, 1), InvalidInput);
}

TEST_CASE("redesign scaling edge cases", "[simlab][redesign]") {
    std::stringstream one("a,b\n3,5\n");
    const auto t1 = read_csv(one);
    RedesignSpec spec;
    spec.columns = {"a", "b"};
    auto units = load_units(t1, spec);
    REQUIRE(units.size() == 1);
    REQUIRE(units[0].raw == std::vector<double>{3.0, 5.0});

    std::stringstream cst("a,b\n2,1\n2,3\n2,5\n");
    const auto t2 = read_csv(cst);
    units = load_units(t2, spec);
    REQUIRE(units[0].raw[0] == 2.0);  // constant column left as is
    REQUIRE(units[1].raw[1] == Catch::Approx(1.5));  // sd 2

    std::stringstream bad("a,b\n1,x\n");
    const auto t3 = read_csv(bad);
    try {
        load_units(t3, spec);
        FAIL("expected error");
    } catch (const InvalidInput& e) {
        REQUIRE(std::string(e.what()).find("row 2 column 'b'") != std::string::npos);
    }
    spec.columns = {"zz"};
    REQUIRE_THROWS_AS(load_units(t2, spec), InvalidInput);
}

TEST_CASE("drift under complete randomization is exactly zero", "[simlab][drift]") {
    const auto gen = CovariateGenerator::table1();
    FrozenPolicy cr(make("CR", PolicyKind::cr), 2.0 / 3.0, maps::FeatureMap::identity(3), gen);
    DriftOptions opt;
    opt.radii = {10.0, 50.0};
    opt.directions = 100;
    opt.draws = 200;
    const auto rep = drift_check(cr, gen, opt);
    REQUIRE(rep.span_dim == 3);
    for (const auto& p : rep.points) {
        REQUIRE(p.max_drift == 0.0);
        REQUIRE_FALSE(p.negative);
    }
}

TEST_CASE("drift under the oracle policy is negative far out", "[simlab][drift]") {
    const auto gen = CovariateGenerator::table1();
    FrozenPolicy orc(make("OR", PolicyKind::oracle), 2.0 / 3.0, maps::FeatureMap::identity(3), gen);
    DriftOptions opt;
    opt.radii = {50.0};
    opt.directions = 100;
    opt.draws = 1000;
    const auto rep = drift_check(orc, gen, opt);
    REQUIRE(rep.points[0].negative);
}

TEST_CASE("rho tilde at the zero probe is exactly rho", "[simlab][rhotilde]") {
    const auto gen = CovariateGenerator::table1();
    FrozenPolicy fr(make("FR", PolicyKind::feasible), 2.0 / 3.0, maps::FeatureMap::identity(3), gen);
    RhoTildeOptions opt;
    opt.chain_length = 20000;
    opt.burn_in = 1000;
    const auto probes = rho_tilde_estimate(fr, gen, {{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}}, opt);
    REQUIRE(probes[0].estimate == Catch::Approx(2.0 / 3.0).margin(1e-12));
    REQUIRE(probes[0].se < 1e-12);
    REQUIRE(probes[1].estimate > 2.0 / 3.0 - 0.2);
    REQUIRE(probes[1].estimate < 2.0 / 3.0 + 0.2);
}
