// engine.hpp
#pragma once
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "car/core.hpp"
#include "car/feature_maps.hpp"
#include "car/policies.hpp"

namespace car::engine {

class CorruptLog : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrialConfig {
    std::string name;
    double rho = 0.5;
    policy::PolicySpec policy;
    maps::FeatureMap feature_map = maps::FeatureMap::identity(1);
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;

    // Fills policy defaults that depend on the map and checks every constraint.
    void finalize();
};

struct AllocationEvent {
    std::int64_t unit_index = 0;
    maps::RawCovariates x_origin;
    Vec x;
    double prob = 0.0;
    double u = 0.0;
    Arm arm = Arm::control;
    Vec lambda;
    std::string ts;
};

struct WhatIf {
    double prob_treatment = 0.0;
    Vec lambda_if_treat;
    Vec lambda_if_control;
};

// Live state of one trial. Everything here is reproducible from the event log.
class TrialState {
public:
    explicit TrialState(TrialConfig config);

    const TrialConfig& config() const { return config_; }
    const ImbalanceState& imbalance() const { return imbalance_; }
    const policy::ParameterMatrix& theta() const { return theta_; }
    bool has_theta() const { return config_.policy.uses_theta(); }
    const maps::MarginTable& margins() const { return margins_; }
    const RngStream& rng() const { return rng_; }
    std::int64_t warmup_remaining() const;

    Vec map(const maps::RawCovariates& raw) const { return maps::apply_map(config_.feature_map, raw); }

    // Probability for the next unit from (theta_n, Lambda_n, X_{n+1}); no mutation.
    double probability(const maps::RawCovariates& raw, const Vec& x) const;

    // Hot path: allocate with an externally supplied uniform draw.
    Assignment allocate(const maps::RawCovariates& raw, const Vec& x, double u);
    // Allocate with the next draw from the trial's own stream.
    Assignment allocate(const maps::RawCovariates& raw, const Vec& x);

    void skip_draws(std::uint64_t k) { rng_.skip(k); }

    // Replace the adaptive parameter; used by chains that freeze theta.
    void set_theta(const policy::ParameterMatrix& theta);

private:
    void refresh_prepared();
    std::vector<double> own_margins(const maps::RawCovariates& raw) const;

    TrialConfig config_;
    ImbalanceState imbalance_;
    policy::ParameterMatrix theta_;
    policy::PreparedTheta prepared_;
    maps::MarginTable margins_;
    RngStream rng_;
};

struct Enrollment {
    Assignment assignment;
    AllocationEvent event;
};

// Maps, allocates and records one unit, mutating the state in place.
Enrollment enroll(TrialState& state, const maps::RawCovariates& x_origin);

WhatIf whatif(const TrialState& state, const maps::RawCovariates& x_origin);

TrialState replay(const std::vector<AllocationEvent>& events, const TrialConfig& config);

// Field-for-field equality of the replay-reproducible parts of two states.
bool same_state(const TrialState& a, const TrialState& b);

nlohmann::json event_to_json(const AllocationEvent& e);
AllocationEvent event_from_json(const nlohmann::json& j);
std::string event_to_jsonl(const AllocationEvent& e);
std::vector<AllocationEvent> read_jsonl(std::istream& in);

nlohmann::json snapshot_json(const TrialState& state);

std::string utc_timestamp();

}  // namespace car::engine
