// generators.hpp
#pragma once
#include <optional>
#include <string>
#include <vector>

#include "car/core.hpp"
#include "car/feature_maps.hpp"
#include "car/policies.hpp"

namespace car::sim {

enum class GeneratorKind { table1_continuous, appendixB_discrete, csv_resample, csv_sequence, custom_mixture };

std::string to_string(GeneratorKind k);

// One simulated unit: raw covariates for the feature map plus any extra
// columns an additional covariate may read.
struct Unit {
    maps::RawCovariates raw;
    std::vector<double> extra;
};

struct MixtureComponent {
    double weight = 1.0;
    std::vector<double> mean;
    std::vector<double> sd;  // independent normal coordinates; sd = 0 gives a point mass
};

class CovariateGenerator {
public:
    // X = (A + B, B, C), A, B standard normal, C standard exponential.
    static CovariateGenerator table1();
    // Level combinations drawn in lexicographic order with the given weights.
    static CovariateGenerator discrete(std::vector<int> levels, std::vector<double> stratum_weights);
    static CovariateGenerator appendix_b();
    static CovariateGenerator mixture(std::vector<MixtureComponent> components);
    // Rows drawn uniformly with replacement.
    static CovariateGenerator resample(std::vector<Unit> rows);
    // Row i for unit i; replications differ only in the allocation draws.
    static CovariateGenerator sequence(std::vector<Unit> rows);

    GeneratorKind kind() const { return kind_; }
    std::size_t raw_dim() const;
    std::size_t rows() const { return rows_.size(); }
    const std::vector<int>& levels() const { return levels_; }

    Unit draw(RngStream& rng, std::int64_t unit_index) const;

    // Exact theta* = (E[alpha_i(X) X])_i where a closed form exists for this
    // generator under the given map.
    std::optional<policy::ParameterMatrix> analytic_oracle(const maps::FeatureMap& map, policy::AlphaKind kind) const;

private:
    GeneratorKind kind_ = GeneratorKind::table1_continuous;
    std::vector<int> levels_;
    std::vector<double> cumulative_;
    std::vector<MixtureComponent> components_;
    std::vector<Unit> rows_;
};

policy::OracleEstimate oracle_parameter(const CovariateGenerator& gen, const maps::FeatureMap& map,
                                        policy::AlphaKind kind, std::size_t n_mc, std::uint64_t seed);

}  // namespace car::sim
