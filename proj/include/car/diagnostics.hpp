// diagnostics.hpp
#pragma once
#include <optional>
#include <vector>

#include "car/engine.hpp"
#include "car/generators.hpp"

namespace car::sim {

// A policy with its parameter frozen, evaluable at any imbalance vector.
class FrozenPolicy {
public:
    // theta: used by feasible/oracle kinds; when absent, the PolicySpec fixed_theta
    // or the generator's oracle value is taken.
    FrozenPolicy(policy::PolicySpec spec, double rho, maps::FeatureMap map, const CovariateGenerator& gen,
                 std::optional<policy::ParameterMatrix> theta = std::nullopt, std::uint64_t oracle_seed = 1);

    const policy::PolicySpec& spec() const { return spec_; }
    const maps::FeatureMap& map() const { return map_; }
    double rho() const { return rho_; }
    const policy::ParameterMatrix& theta() const { return theta_; }

    // g(lambda, x). Discrete margins are read back from lambda (D = lambda / sqrt(w)).
    double prob(const Vec& lambda, const maps::RawCovariates& raw, const Vec& x) const;

    // Chain-ready trial config: theta frozen, no adaptation.
    engine::TrialConfig trial_config(std::uint64_t seed, std::uint64_t stream) const;

private:
    policy::PolicySpec spec_;
    double rho_;
    maps::FeatureMap map_;
    policy::ParameterMatrix theta_;
    policy::PreparedTheta prepared_;
};

struct DriftOptions {
    std::vector<double> radii{10.0, 20.0, 50.0};
    std::size_t directions = 200;
    std::size_t draws = 2000;
    std::uint64_t seed = 7;
};

struct DriftPoint {
    double radius = 0.0;
    double max_drift = 0.0;  // worst (largest) estimated drift over directions
    double se = 0.0;         // Monte Carlo SE at the worst direction
    bool negative = false;   // max_drift + 3 se < 0
};

struct DriftReport {
    std::vector<DriftPoint> points;
    std::size_t span_dim = 0;  // dimension of the covariate support span the directions live in
};

// E_X[(g(M u, X) - rho) X'u] over random unit directions u in the span of the
// generator's support.
DriftReport drift_check(const FrozenPolicy& policy, const CovariateGenerator& gen, const DriftOptions& opt = {});

struct RhoTildeOptions {
    std::int64_t chain_length = 200000;
    std::int64_t burn_in = 10000;
    std::size_t batches = 50;
    std::uint64_t seed = 11;
};

struct RhoTildeProbe {
    maps::RawCovariates x;
    double estimate = 0.0;
    double se = 0.0;  // batch means
};

std::vector<RhoTildeProbe> rho_tilde_estimate(const FrozenPolicy& policy, const CovariateGenerator& gen,
                                              const std::vector<maps::RawCovariates>& probes,
                                              const RhoTildeOptions& opt = {});

}  // namespace car::sim
