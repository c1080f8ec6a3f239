#include "car/feature_maps.hpp"

#include <cmath>
#include <numeric>

namespace car::maps {

void DiscreteScheme::validate() const {
    if (levels.empty()) throw InvalidInput("discrete scheme needs at least one covariate");
    for (int l : levels) {
        if (l < 2) throw InvalidInput("every covariate needs at least 2 levels");
    }
    if (!weights_marginal.empty() && weights_marginal.size() != levels.size()) {
        throw InvalidInput("weights_marginal must have one weight per covariate");
    }
    for (double w : weights_marginal) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidInput("weights must be nonnegative");
    }
    if (!(weight_overall >= 0.0) || !(weight_stratum >= 0.0)) {
        throw InvalidInput("weights must be nonnegative");
    }
}

std::size_t DiscreteScheme::num_margin_cells() const {
    return std::accumulate(levels.begin(), levels.end(), std::size_t{0});
}

std::size_t DiscreteScheme::num_strata() const {
    std::size_t s = 1;
    for (int l : levels) s *= static_cast<std::size_t>(l);
    return s;
}

std::size_t DiscreteScheme::margin_offset(std::size_t t) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < t; ++i) off += static_cast<std::size_t>(levels[i]);
    return off;
}

std::size_t DiscreteScheme::stratum_index(const std::vector<int>& lv) const {
    std::size_t idx = 0;
    for (std::size_t t = 0; t < levels.size(); ++t) {
        idx = idx * static_cast<std::size_t>(levels[t]) + static_cast<std::size_t>(lv[t] - 1);
    }
    return idx;
}

std::vector<int> DiscreteScheme::stratum_levels(std::size_t index) const {
    std::vector<int> lv(levels.size());
    for (std::size_t t = levels.size(); t-- > 0;) {
        lv[t] = static_cast<int>(index % static_cast<std::size_t>(levels[t])) + 1;
        index /= static_cast<std::size_t>(levels[t]);
    }
    return lv;
}

std::string DiscreteScheme::stratum_label(std::size_t index) const {
    auto lv = stratum_levels(index);
    std::string s = "(";
    for (std::size_t t = 0; t < lv.size(); ++t) {
        if (t) s += ",";
        s += std::to_string(lv[t]);
    }
    return s + ")";
}

std::vector<int> DiscreteScheme::read_levels(const RawCovariates& raw) const {
    if (raw.size() != levels.size()) {
        throw InvalidInput("expected " + std::to_string(levels.size()) + " discrete levels, got " +
                           std::to_string(raw.size()));
    }
    std::vector<int> out(raw.size());
    for (std::size_t t = 0; t < raw.size(); ++t) {
        const double v = raw[t];
        if (!std::isfinite(v) || v != std::floor(v) || v < 1 || v > levels[t]) {
            throw InvalidInput("level of covariate " + std::to_string(t + 1) + " out of range 1.." +
                               std::to_string(levels[t]));
        }
        out[t] = static_cast<int>(v);
    }
    return out;
}

std::string to_string(MapKind kind) {
    switch (kind) {
        case MapKind::identity: return "identity";
        case MapKind::scaled_identity: return "scaled_identity";
        case MapKind::polynomial_moments: return "polynomial_moments";
        case MapKind::stratified: return "stratified";
        case MapKind::pocock_simon: return "pocock_simon";
        case MapKind::hu_hu: return "hu_hu";
    }
    return "identity";
}

MapKind map_kind_from_string(const std::string& name) {
    for (MapKind k : {MapKind::identity, MapKind::scaled_identity, MapKind::polynomial_moments,
                      MapKind::stratified, MapKind::pocock_simon, MapKind::hu_hu}) {
        if (to_string(k) == name) return k;
    }
    throw InvalidInput("unknown feature map kind '" + name + "'");
}

FeatureMap FeatureMap::identity(std::size_t dim) {
    FeatureMap m;
    m.kind = MapKind::identity;
    m.input_dim = dim;
    return m;
}

FeatureMap FeatureMap::scaled(std::vector<double> center, std::vector<double> scale) {
    FeatureMap m;
    m.kind = MapKind::scaled_identity;
    m.input_dim = scale.size();
    m.center = std::move(center);
    m.scale = std::move(scale);
    if (m.center.empty()) m.center.assign(m.input_dim, 0.0);
    return m;
}

FeatureMap FeatureMap::polynomial(std::size_t dim, int degree) {
    FeatureMap m;
    m.kind = MapKind::polynomial_moments;
    m.input_dim = dim;
    m.degree = degree;
    return m;
}

FeatureMap FeatureMap::discrete(MapKind kind, DiscreteScheme scheme) {
    FeatureMap m;
    m.kind = kind;
    m.scheme = std::move(scheme);
    if (m.scheme.weights_marginal.empty()) m.scheme.weights_marginal.assign(m.scheme.levels.size(), 1.0);
    return m;
}

bool FeatureMap::is_discrete() const {
    return kind == MapKind::stratified || kind == MapKind::pocock_simon || kind == MapKind::hu_hu;
}

std::size_t FeatureMap::input_size() const { return is_discrete() ? scheme.levels.size() : input_dim; }

std::size_t FeatureMap::output_dim() const {
    switch (kind) {
        case MapKind::identity:
        case MapKind::scaled_identity: return input_dim;
        case MapKind::polynomial_moments: return input_dim * static_cast<std::size_t>(degree);
        case MapKind::stratified: return scheme.num_strata();
        case MapKind::pocock_simon: return scheme.num_margin_cells();
        case MapKind::hu_hu: return 1 + scheme.num_margin_cells() + scheme.num_strata();
    }
    return 0;
}

void FeatureMap::validate() const {
    if (is_discrete()) {
        scheme.validate();
        if (scheme.weights_marginal.size() != scheme.levels.size()) {
            throw InvalidInput("weights_marginal must have one weight per covariate");
        }
        return;
    }
    if (input_dim == 0) throw InvalidInput("feature map input dimension must be at least 1");
    if (kind == MapKind::polynomial_moments && degree < 1) {
        throw InvalidInput("polynomial degree must be at least 1");
    }
    if (kind == MapKind::scaled_identity) {
        if (scale.size() != input_dim || center.size() != input_dim) {
            throw InvalidInput("scaled_identity needs one center and scale per coordinate");
        }
    }
}

namespace {

void write_margins(const DiscreteScheme& s, const std::vector<int>& lv, Vec& out, Eigen::Index base) {
    for (std::size_t t = 0; t < lv.size(); ++t) {
        const auto cell = static_cast<Eigen::Index>(s.margin_offset(t) + static_cast<std::size_t>(lv[t] - 1));
        out[base + cell] = std::sqrt(s.weights_marginal[t]);
    }
}

}  // namespace

Vec apply_map(const FeatureMap& map, const RawCovariates& x_origin) {
    if (map.is_discrete()) {
        const auto& s = map.scheme;
        const auto lv = s.read_levels(x_origin);
        Vec out = Vec::Zero(static_cast<Eigen::Index>(map.output_dim()));
        switch (map.kind) {
            case MapKind::stratified:
                out[static_cast<Eigen::Index>(s.stratum_index(lv))] = 1.0;
                break;
            case MapKind::pocock_simon:
                write_margins(s, lv, out, 0);
                break;
            case MapKind::hu_hu: {
                out[0] = std::sqrt(s.weight_overall);
                write_margins(s, lv, out, 1);
                const auto base = static_cast<Eigen::Index>(1 + s.num_margin_cells());
                out[base + static_cast<Eigen::Index>(s.stratum_index(lv))] = std::sqrt(s.weight_stratum);
                break;
            }
            default: break;
        }
        return out;
    }

    if (x_origin.size() != map.input_dim) {
        throw InvalidInput("expected " + std::to_string(map.input_dim) + " covariates, got " +
                           std::to_string(x_origin.size()));
    }
    const auto p = static_cast<Eigen::Index>(map.input_dim);
    Vec raw = Eigen::Map<const Vec>(x_origin.data(), p);
    require_finite(raw, "covariate record");
    switch (map.kind) {
        case MapKind::identity: return raw;
        case MapKind::scaled_identity: {
            Vec out(p);
            for (Eigen::Index i = 0; i < p; ++i) {
                const auto u = static_cast<std::size_t>(i);
                out[i] = (raw[i] - map.center[u]) * map.scale[u];
            }
            return out;
        }
        case MapKind::polynomial_moments: {
            Vec out(p * map.degree);
            Vec power = raw;
            for (int k = 0; k < map.degree; ++k) {
                out.segment(k * p, p) = power;
                power = power.cwiseProduct(raw);
            }
            return out;
        }
        default: break;
    }
    return raw;
}

MarginTable::MarginTable(const DiscreteScheme& scheme)
    : scheme_(scheme),
      count_(scheme.num_margin_cells(), 0),
      treat_(scheme.num_margin_cells(), 0),
      stratum_count_(scheme.num_strata(), 0),
      stratum_treat_(scheme.num_strata(), 0) {}

void MarginTable::record(const std::vector<int>& levels, Arm arm) {
    const int t1 = as_int(arm);
    for (std::size_t t = 0; t < levels.size(); ++t) {
        const std::size_t cell = scheme_.margin_offset(t) + static_cast<std::size_t>(levels[t] - 1);
        count_[cell] += 1;
        treat_[cell] += t1;
    }
    const std::size_t s = scheme_.stratum_index(levels);
    stratum_count_[s] += 1;
    stratum_treat_[s] += t1;
}

double MarginTable::imbalance(std::size_t cell, double rho) const {
    return static_cast<double>(treat_[cell]) - rho * static_cast<double>(count_[cell]);
}

double MarginTable::stratum_imbalance(std::size_t stratum, double rho) const {
    return static_cast<double>(stratum_treat_[stratum]) - rho * static_cast<double>(stratum_count_[stratum]);
}

MarginReport margin_imbalances(const std::vector<std::pair<RawCovariates, Arm>>& history,
                               const DiscreteScheme& scheme, double rho) {
    scheme.validate();
    MarginTable table(scheme);
    for (const auto& [raw, arm] : history) table.record(scheme.read_levels(raw), arm);

    MarginReport report;
    std::vector<long long> diff;
    for (std::size_t t = 0; t < scheme.levels.size(); ++t) {
        for (int k = 1; k <= scheme.levels[t]; ++k) {
            const std::size_t cell = scheme.margin_offset(t) + static_cast<std::size_t>(k - 1);
            report.labels.push_back(std::to_string(t + 1) + ":" + std::to_string(k));
            report.weighted.push_back(table.imbalance(cell, rho));
            diff.push_back(table.difference(cell));
        }
    }
    if (rho == 0.5) report.integer_difference = std::move(diff);
    return report;
}

}  // namespace car::maps
