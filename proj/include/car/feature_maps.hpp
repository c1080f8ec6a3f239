// feature_maps.hpp
#pragma once
#include <optional>
#include <string>
#include <vector>

#include "car/core.hpp"

namespace car::maps {

// Raw covariate record of one unit. Discrete maps read the entries as
// 1-based integer levels; continuous maps read them as real values.
using RawCovariates = std::vector<double>;

struct DiscreteScheme {
    std::vector<int> levels;              // L_1..L_p, each >= 2
    std::vector<double> weights_marginal; // w_{m,t}, one per covariate
    double weight_overall = 0.0;          // w_o
    double weight_stratum = 0.0;          // w_s

    void validate() const;
    std::size_t num_covariates() const { return levels.size(); }
    std::size_t num_margin_cells() const;
    std::size_t num_strata() const;
    // Offset of covariate t's first margin cell in the concatenated margin block.
    std::size_t margin_offset(std::size_t t) const;
    // Lexicographic stratum index over (k_1, ..., k_p), levels 1-based.
    std::size_t stratum_index(const std::vector<int>& levels_of_unit) const;
    std::vector<int> stratum_levels(std::size_t index) const;
    std::string stratum_label(std::size_t index) const;
    // Validates range and integrality, returns 1-based levels.
    std::vector<int> read_levels(const RawCovariates& raw) const;
};

enum class MapKind { identity, scaled_identity, polynomial_moments, stratified, pocock_simon, hu_hu };

std::string to_string(MapKind kind);
MapKind map_kind_from_string(const std::string& name);

struct FeatureMap {
    MapKind kind = MapKind::identity;
    std::size_t input_dim = 0;     // continuous kinds
    int degree = 1;                // polynomial_moments
    std::vector<double> center;    // scaled_identity: (x - center) * scale
    std::vector<double> scale;
    DiscreteScheme scheme;         // discrete kinds

    static FeatureMap identity(std::size_t dim);
    static FeatureMap scaled(std::vector<double> center, std::vector<double> scale);
    static FeatureMap polynomial(std::size_t dim, int degree);
    static FeatureMap discrete(MapKind kind, DiscreteScheme scheme);

    bool is_discrete() const;
    std::size_t input_size() const;
    std::size_t output_dim() const;
    void validate() const;
};

Vec apply_map(const FeatureMap& map, const RawCovariates& x_origin);

inline bool operator==(const DiscreteScheme& a, const DiscreteScheme& b) {
    return a.levels == b.levels && a.weights_marginal == b.weights_marginal &&
           a.weight_overall == b.weight_overall && a.weight_stratum == b.weight_stratum;
}

// Incrementally maintained margin and stratum bookkeeping for discrete designs.
// D(t;k) is reported as sum (T_i - rho) 1(level match); the integer
// treatment-minus-control difference is kept alongside.
class MarginTable {
public:
    MarginTable() = default;
    explicit MarginTable(const DiscreteScheme& scheme);

    void record(const std::vector<int>& levels, Arm arm);

    bool empty() const { return count_.empty(); }
    std::size_t cells() const { return count_.size(); }
    // Weighted imbalance sum over cell c: n1 - rho * n.
    double imbalance(std::size_t cell, double rho) const;
    long long difference(std::size_t cell) const { return 2 * treat_[cell] - count_[cell]; }
    long long count(std::size_t cell) const { return count_[cell]; }
    long long treated(std::size_t cell) const { return treat_[cell]; }
    double stratum_imbalance(std::size_t stratum, double rho) const;
    long long stratum_count(std::size_t stratum) const { return stratum_count_[stratum]; }
    const DiscreteScheme& scheme() const { return scheme_; }

    bool operator==(const MarginTable&) const = default;

private:
    DiscreteScheme scheme_;
    std::vector<long long> count_, treat_;
    std::vector<long long> stratum_count_, stratum_treat_;
};

struct MarginReport {
    std::vector<std::string> labels;          // "t:k" per margin cell
    std::vector<double> weighted;             // sum (T - rho) 1(level)
    std::optional<std::vector<long long>> integer_difference;  // only when rho == 1/2
};

MarginReport margin_imbalances(const std::vector<std::pair<RawCovariates, Arm>>& history,
                               const DiscreteScheme& scheme, double rho);

}  // namespace car::maps
