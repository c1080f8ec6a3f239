// simlab.hpp
#pragma once
#include <optional>
#include <string>
#include <vector>

#include "car/core.hpp"
#include "car/engine.hpp"
#include "car/feature_maps.hpp"
#include "car/generators.hpp"
#include "car/policies.hpp"

namespace car::sim {

enum class AdditionalKind { sqrt_sum_abs, sum_squares, signed_sqrt_sum, indicator_norm_ge, hamd17_square_like, custom };

std::string to_string(AdditionalKind k);
AdditionalKind additional_kind_from_string(const std::string& s);

// Default M_L for the 1(||x|| >= M_L) covariate. Under the minimization policy
// and the continuous generator rho-tilde(x) crosses rho near ||x|| = 2.7 in every
// probed direction, so units past 3 are all over-allocated to treatment.
inline constexpr double kDefaultIndicatorThreshold = 3.0;

// Y computed from the mapped covariate X of a unit (and its extra columns).
struct AdditionalCovariateSpec {
    std::string name;
    AdditionalKind kind = AdditionalKind::sum_squares;
    double threshold = kDefaultIndicatorThreshold;  // indicator_norm_ge
    std::size_t column = 0;                          // hamd17_square_like: squared column
    bool use_extra = false;                          // column indexes Unit::extra instead of X
    std::vector<double> coefficients;                // custom: sum c_i X_i^power
    double power = 1.0;
    double noise_sd = 0.0;

    // noise_z is a standard normal draw, scaled by noise_sd.
    double value(const Vec& x, const std::vector<double>& extra, double noise_z = 0.0) const;
};

struct ExperimentSpec {
    std::string name = "experiment";
    double rho = 0.5;
    CovariateGenerator generator = CovariateGenerator::table1();
    maps::FeatureMap map = maps::FeatureMap::identity(3);
    std::vector<policy::PolicySpec> policies;
    std::vector<std::int64_t> sample_sizes;
    std::size_t replications = 2;
    std::vector<AdditionalCovariateSpec> additional;
    std::uint64_t base_seed = 1;
    bool strata = false;  // per-stratum imbalances (discrete maps only)

    void validate() const;
};

struct CellSummary {
    std::string policy;
    std::int64_t n = 0;
    std::string stat;
    double mean = 0.0;
    double sd = 0.0;
    double se = 0.0;
};

// Per-replication terminal statistics, kept so criteria can be computed on the
// raw values (shift tests, normality, ratios).
struct ExperimentResult {
    std::vector<std::string> policies;
    std::vector<std::int64_t> sample_sizes;
    std::vector<std::string> stat_names;
    // values[policy][size] is R x S, row = replication.
    std::vector<std::vector<Mat>> values;
    std::vector<CellSummary> cells;
    std::vector<policy::ParameterMatrix> oracle_theta;  // per policy; empty when unused

    const CellSummary& cell(const std::string& policy, std::int64_t n, const std::string& stat) const;
    Vec column(const std::string& policy, std::int64_t n, const std::string& stat) const;
};

// Worker count from CAR_THREADS, else hardware concurrency.
unsigned default_threads();

// Resolves each oracle policy's theta (closed form or Monte Carlo) once.
std::vector<policy::PolicySpec> resolve_policies(const ExperimentSpec& spec, std::vector<policy::ParameterMatrix>* oracle = nullptr);

ExperimentResult run_experiment(const ExperimentSpec& spec, unsigned threads = 0);

std::string to_csv(const ExperimentResult& result);

// Per-stratum table for the discrete generator: the experiment with strata on
// and only stratum statistics in the result.
ExperimentResult run_discrete_shift_study(ExperimentSpec spec, unsigned threads = 0);

struct ShiftStatistic {
    double mean = 0.0;
    double sd = 0.0;
    double se = 0.0;
};

ShiftStatistic shift_statistic(const Vec& values);

struct NormalityVerdict {
    double skewness = 0.0;
    double excess_kurtosis = 0.0;
    bool pass = false;
};

inline constexpr double kSkewLimit = 0.15;
inline constexpr double kKurtosisLimit = 0.3;

NormalityVerdict normality_check(const Vec& values);

}  // namespace car::sim
