#include "car/generators.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace car::sim {

std::string to_string(GeneratorKind k) {
    switch (k) {
        case GeneratorKind::table1_continuous: return "table1_continuous";
        case GeneratorKind::appendixB_discrete: return "appendixB_discrete";
        case GeneratorKind::csv_resample: return "csv_resample";
        case GeneratorKind::csv_sequence: return "csv_sequence";
        case GeneratorKind::custom_mixture: return "custom_mixture";
    }
    return "table1_continuous";
}

CovariateGenerator CovariateGenerator::table1() {
    CovariateGenerator g;
    g.kind_ = GeneratorKind::table1_continuous;
    return g;
}

CovariateGenerator CovariateGenerator::discrete(std::vector<int> levels, std::vector<double> weights) {
    maps::DiscreteScheme probe{levels, {}, 0.0, 0.0};
    probe.validate();
    if (weights.size() != probe.num_strata()) {
        throw InvalidInput("discrete generator needs one weight per stratum (" + std::to_string(probe.num_strata()) +
                           ")");
    }
    CovariateGenerator g;
    g.kind_ = GeneratorKind::appendixB_discrete;
    g.levels_ = std::move(levels);
    double acc = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw InvalidInput("stratum weights must be nonnegative");
        acc += w;
        g.cumulative_.push_back(acc);
    }
    if (!(acc > 0.0)) throw InvalidInput("stratum weights must not all be zero");
    return g;
}

CovariateGenerator CovariateGenerator::appendix_b() { return discrete({2, 3}, {1, 4, 1, 3, 1, 3}); }

CovariateGenerator CovariateGenerator::mixture(std::vector<MixtureComponent> components) {
    if (components.empty()) throw InvalidInput("mixture needs at least one component");
    CovariateGenerator g;
    g.kind_ = GeneratorKind::custom_mixture;
    const std::size_t dim = components.front().mean.size();
    double acc = 0.0;
    for (auto& c : components) {
        if (c.mean.size() != dim || dim == 0) throw InvalidInput("mixture components need equal nonzero dimension");
        if (c.sd.empty()) c.sd.assign(dim, 1.0);
        if (c.sd.size() != dim) throw InvalidInput("mixture sd must match mean dimension");
        if (!(c.weight >= 0.0)) throw InvalidInput("mixture weights must be nonnegative");
        acc += c.weight;
        g.cumulative_.push_back(acc);
    }
    if (!(acc > 0.0)) throw InvalidInput("mixture weights must not all be zero");
    g.components_ = std::move(components);
    return g;
}

CovariateGenerator CovariateGenerator::resample(std::vector<Unit> rows) {
    if (rows.empty()) throw InvalidInput("resampling needs at least one row");
    CovariateGenerator g;
    g.kind_ = GeneratorKind::csv_resample;
    g.rows_ = std::move(rows);
    return g;
}

CovariateGenerator CovariateGenerator::sequence(std::vector<Unit> rows) {
    if (rows.empty()) throw InvalidInput("sequence needs at least one row");
    CovariateGenerator g;
    g.kind_ = GeneratorKind::csv_sequence;
    g.rows_ = std::move(rows);
    return g;
}

std::size_t CovariateGenerator::raw_dim() const {
    switch (kind_) {
        case GeneratorKind::table1_continuous: return 3;
        case GeneratorKind::appendixB_discrete: return levels_.size();
        case GeneratorKind::custom_mixture: return components_.front().mean.size();
        case GeneratorKind::csv_resample:
        case GeneratorKind::csv_sequence: return rows_.front().raw.size();
    }
    return 0;
}

Unit CovariateGenerator::draw(RngStream& rng, std::int64_t unit_index) const {
    Unit u;
    switch (kind_) {
        case GeneratorKind::table1_continuous: {
            const double a = rng.normal();
            const double b = rng.normal();
            const double c = rng.exponential();
            u.raw = {a + b, b, c};
            break;
        }
        case GeneratorKind::appendixB_discrete: {
            const std::size_t s = rng.categorical(cumulative_);
            std::size_t rest = s;
            u.raw.assign(levels_.size(), 0.0);
            for (std::size_t t = levels_.size(); t-- > 0;) {
                u.raw[t] = static_cast<double>(rest % static_cast<std::size_t>(levels_[t]) + 1);
                rest /= static_cast<std::size_t>(levels_[t]);
            }
            break;
        }
        case GeneratorKind::custom_mixture: {
            const auto& c = components_[rng.categorical(cumulative_)];
            u.raw.resize(c.mean.size());
            for (std::size_t i = 0; i < c.mean.size(); ++i) {
                u.raw[i] = c.sd[i] == 0.0 ? c.mean[i] : c.mean[i] + c.sd[i] * rng.normal();
            }
            break;
        }
        case GeneratorKind::csv_resample: {
            const auto idx = static_cast<std::size_t>(rng.uniform() * static_cast<double>(rows_.size()));
            u = rows_[std::min(idx, rows_.size() - 1)];
            break;
        }
        case GeneratorKind::csv_sequence: {
            if (unit_index < 0 || static_cast<std::size_t>(unit_index) >= rows_.size()) {
                throw InvalidInput("sample size exceeds the number of CSV rows");
            }
            u = rows_[static_cast<std::size_t>(unit_index)];
            break;
        }
    }
    return u;
}

std::optional<policy::ParameterMatrix> CovariateGenerator::analytic_oracle(const maps::FeatureMap& map,
                                                                          policy::AlphaKind kind) const {
    if (map.kind != maps::MapKind::identity) return std::nullopt;
    if (kind_ == GeneratorKind::table1_continuous && kind == policy::AlphaKind::sign) {
        // sgn(A+B)(A+B) = |A+B|, E|N(0,2)| = 2/sqrt(pi); B = (S + (B-A))/2 with
        // B-A independent of S = A+B; C > 0 so alpha_3 = 1.
        const double inv_sqrt_pi = 1.0 / std::sqrt(std::numbers::pi);
        const double e_abs_std = std::sqrt(2.0 / std::numbers::pi);
        Mat theta(3, 3);
        theta.col(0) << 2.0 * inv_sqrt_pi, inv_sqrt_pi, 0.0;
        theta.col(1) << e_abs_std, e_abs_std, 0.0;
        theta.col(2) << 0.0, 0.0, 1.0;
        return theta;
    }
    if (kind_ == GeneratorKind::custom_mixture) {
        for (const auto& c : components_) {
            for (double s : c.sd) {
                if (s != 0.0) return std::nullopt;
            }
        }
        const auto d = static_cast<Eigen::Index>(raw_dim());
        Mat theta = Mat::Zero(d, d);
        const double total = cumulative_.back();
        for (const auto& c : components_) {
            Vec m = Eigen::Map<const Vec>(c.mean.data(), d);
            theta += (c.weight / total) * m * policy::alpha_vector(m, kind).transpose();
        }
        return theta;
    }
    return std::nullopt;
}

policy::OracleEstimate oracle_parameter(const CovariateGenerator& gen, const maps::FeatureMap& map,
                                        policy::AlphaKind kind, std::size_t n_mc, std::uint64_t seed) {
    if (auto exact = gen.analytic_oracle(map, kind)) {
        policy::OracleEstimate est;
        est.theta = *exact;
        est.standard_error = Mat::Zero(exact->rows(), exact->cols());
        return est;
    }
    std::int64_t index = 0;
    policy::Sampler sampler = [&](RngStream& rng) {
        // Sequences are walked cyclically so a finite data set still averages.
        std::int64_t i = index++;
        if (gen.kind() == GeneratorKind::csv_sequence) i %= static_cast<std::int64_t>(gen.rows());
        return maps::apply_map(map, gen.draw(rng, i).raw);
    };
    return policy::oracle_parameter_mc(sampler, kind, n_mc, RngStream(seed, 0x0AC1E));
}

}  // namespace car::sim
