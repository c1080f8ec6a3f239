// config.hpp
#pragma once
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "car/diagnostics.hpp"
#include "car/engine.hpp"
#include "car/redesign.hpp"
#include "car/simlab.hpp"

namespace car::config {

using nlohmann::json;

// Raised for any config problem; path is a JSON pointer-ish location such as
// "policies[2].p".
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, const std::string& reason)
        : std::runtime_error((path.empty() ? std::string("<root>") : path) + ": " + reason), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

double parse_rho(const json& j, const std::string& path);
policy::PolicySpec parse_policy(const json& j, const std::string& path);
maps::FeatureMap parse_feature_map(const json& j, const std::string& path, std::size_t default_dim);
sim::CovariateGenerator parse_generator(const json& j, const std::string& path);
sim::AdditionalCovariateSpec parse_additional(const json& j, const std::string& path);

struct DiagnosticsSpec {
    sim::DriftOptions drift;
    std::vector<std::string> drift_policies;  // empty = all
    sim::RhoTildeOptions rhotilde;
    std::vector<maps::RawCovariates> probes;
    std::vector<std::string> rhotilde_policies;
    std::string normality_policy;  // empty = every policy
    std::int64_t normality_n = 0;  // 0 = largest sample size
    std::string normality_stat;    // empty = every additional covariate
};

struct ExperimentConfig {
    sim::ExperimentSpec experiment;
    std::optional<sim::RedesignSpec> redesign;  // set when the config names a CSV
    DiagnosticsSpec diagnostics;
    std::string csv_out;
    std::string json_out;
};

ExperimentConfig parse_experiment(const json& j);
ExperimentConfig load_experiment(const std::string& path);

engine::TrialConfig parse_trial(const json& j);

json theta_to_json(const policy::ParameterMatrix& theta);

}  // namespace car::config
