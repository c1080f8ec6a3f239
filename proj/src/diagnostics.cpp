#include "car/diagnostics.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Eigenvalues>

namespace car::sim {

FrozenPolicy::FrozenPolicy(policy::PolicySpec spec, double rho, maps::FeatureMap map, const CovariateGenerator& gen,
                           std::optional<policy::ParameterMatrix> theta, std::uint64_t oracle_seed)
    : spec_(std::move(spec)), rho_(rho), map_(std::move(map)) {
    map_.validate();
    if (spec_.kind == policy::PolicyKind::ps_discrete) {
        if (!map_.is_discrete() || map_.kind == maps::MapKind::stratified) {
            throw InvalidInput("ps_discrete diagnostics need a pocock_simon or hu_hu map");
        }
        if (spec_.margins == policy::MarginConvention::integer_unit) {
            throw InvalidInput("integer margin differences cannot be read back from the imbalance vector");
        }
        if (spec_.weights.empty()) spec_.weights = map_.scheme.weights_marginal;
    }
    if (spec_.uses_theta()) {
        if (theta) {
            theta_ = *theta;
        } else if (spec_.fixed_theta) {
            theta_ = *spec_.fixed_theta;
        } else {
            theta_ = oracle_parameter(gen, map_, spec_.alpha, spec_.oracle_mc, oracle_seed).theta;
        }
        const auto d = static_cast<Eigen::Index>(map_.output_dim());
        if (theta_.rows() != d || theta_.cols() != d) throw InvalidInput("theta must be d x d for the map");
        prepared_ = policy::prepare_theta(theta_, spec_.epsilon);
    }
    spec_.validate(rho_);
}

double FrozenPolicy::prob(const Vec& lambda, const maps::RawCovariates& raw, const Vec& x) const {
    std::vector<double> own;
    if (spec_.kind == policy::PolicyKind::ps_discrete) {
        const auto& scheme = map_.scheme;
        const auto lv = scheme.read_levels(raw);
        const std::size_t base = map_.kind == maps::MapKind::hu_hu ? 1 : 0;
        own.resize(lv.size());
        for (std::size_t t = 0; t < lv.size(); ++t) {
            const double s = std::sqrt(scheme.weights_marginal[t]);
            const auto cell = static_cast<Eigen::Index>(base + scheme.margin_offset(t) + static_cast<std::size_t>(lv[t] - 1));
            own[t] = s > 0.0 ? lambda[cell] / s : 0.0;
        }
    }
    policy::PolicyInputs in{lambda, x, std::numeric_limits<std::int64_t>::max(),
                            spec_.uses_theta() ? &prepared_ : nullptr, own};
    return policy::evaluate(spec_, rho_, in);
}

engine::TrialConfig FrozenPolicy::trial_config(std::uint64_t seed, std::uint64_t stream) const {
    engine::TrialConfig c;
    c.name = spec_.name;
    c.rho = rho_;
    c.policy = spec_;
    if (spec_.uses_theta()) {
        // oracle kind keeps theta fixed; the epsilon mode is carried over
        c.policy.kind = policy::PolicyKind::oracle;
        c.policy.fixed_theta = theta_;
    }
    c.feature_map = map_;
    c.seed = seed;
    c.stream = stream;
    c.finalize();
    return c;
}

DriftReport drift_check(const FrozenPolicy& policy, const CovariateGenerator& gen, const DriftOptions& opt) {
    if (opt.directions < 1 || opt.draws < 2) throw InvalidInput("drift_check: need directions >= 1 and draws >= 2");
    RngStream cov(opt.seed, 1);
    RngStream dir_rng(opt.seed, 2);
    std::vector<maps::RawCovariates> raws;
    std::vector<Vec> xs;
    raws.reserve(opt.draws);
    xs.reserve(opt.draws);
    const auto d = static_cast<Eigen::Index>(policy.map().output_dim());
    Mat second = Mat::Zero(d, d);
    for (std::size_t k = 0; k < opt.draws; ++k) {
        auto u = gen.draw(cov, static_cast<std::int64_t>(gen.rows() ? k % gen.rows() : k));
        xs.push_back(maps::apply_map(policy.map(), u.raw));
        raws.push_back(std::move(u.raw));
        second += xs.back() * xs.back().transpose();
    }
    // Directions are drawn inside the support span; outside it the imbalance
    // never moves, so drift there is meaningless.
    Eigen::SelfAdjointEigenSolver<Mat> eig(second / static_cast<double>(opt.draws));
    const double top = eig.eigenvalues().maxCoeff();
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < d; ++i) {
        if (eig.eigenvalues()[i] > 1e-9 * std::max(top, 1e-300)) keep.push_back(i);
    }
    Mat basis(d, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j) basis.col(static_cast<Eigen::Index>(j)) = eig.eigenvectors().col(keep[j]);

    std::vector<Vec> dirs;
    for (std::size_t k = 0; k < opt.directions; ++k) {
        Vec z(basis.cols());
        for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = dir_rng.normal();
        Vec u = basis * z;
        dirs.push_back(u / u.norm());
    }

    DriftReport report;
    report.span_dim = keep.size();
    const double n = static_cast<double>(opt.draws);
    for (double radius : opt.radii) {
        DriftPoint pt;
        pt.radius = radius;
        pt.max_drift = -std::numeric_limits<double>::infinity();
        for (const Vec& u : dirs) {
            const Vec lambda = radius * u;
            double sum = 0.0, sum_sq = 0.0;
            for (std::size_t k = 0; k < xs.size(); ++k) {
                const double term = (policy.prob(lambda, raws[k], xs[k]) - policy.rho()) * xs[k].dot(u);
                sum += term;
                sum_sq += term * term;
            }
            const double mean = sum / n;
            const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
            if (mean > pt.max_drift) {
                pt.max_drift = mean;
                pt.se = std::sqrt(var / n);
            }
        }
        pt.negative = pt.max_drift + 3.0 * pt.se < 0.0;
        report.points.push_back(pt);
    }
    return report;
}

std::vector<RhoTildeProbe> rho_tilde_estimate(const FrozenPolicy& policy, const CovariateGenerator& gen,
                                              const std::vector<maps::RawCovariates>& probes,
                                              const RhoTildeOptions& opt) {
    if (opt.burn_in < 0 || opt.chain_length - opt.burn_in < static_cast<std::int64_t>(opt.batches) || opt.batches < 2) {
        throw InvalidInput("rho_tilde: need chain_length - burn_in >= batches >= 2");
    }
    engine::TrialState state(policy.trial_config(opt.seed, 0));
    RngStream cov(opt.seed, 1);
    std::vector<Vec> probe_x;
    for (const auto& p : probes) probe_x.push_back(state.map(p));

    const std::int64_t kept = opt.chain_length - opt.burn_in;
    const std::int64_t per_batch = kept / static_cast<std::int64_t>(opt.batches);
    Mat batch_sum = Mat::Zero(static_cast<Eigen::Index>(probes.size()), static_cast<Eigen::Index>(opt.batches));
    for (std::int64_t t = 0; t < opt.chain_length; ++t) {
        const std::int64_t after = t - opt.burn_in;
        if (after >= 0 && after < per_batch * static_cast<std::int64_t>(opt.batches)) {
            const auto b = static_cast<Eigen::Index>(after / per_batch);
            for (std::size_t j = 0; j < probes.size(); ++j) {
                batch_sum(static_cast<Eigen::Index>(j), b) += state.probability(probes[j], probe_x[j]);
            }
        }
        Unit u = gen.draw(cov, gen.rows() ? t % static_cast<std::int64_t>(gen.rows()) : t);
        state.allocate(u.raw, state.map(u.raw));
    }
    std::vector<RhoTildeProbe> out;
    const double B = static_cast<double>(opt.batches);
    for (std::size_t j = 0; j < probes.size(); ++j) {
        const Vec means = batch_sum.row(static_cast<Eigen::Index>(j)).transpose() / static_cast<double>(per_batch);
        RhoTildeProbe p;
        p.x = probes[j];
        p.estimate = means.mean();
        const double var = (means.array() - p.estimate).square().sum() / (B - 1.0);
        p.se = std::sqrt(var / B);
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace car::sim
