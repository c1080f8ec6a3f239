#include "car/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace car::config {

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }
std::string index(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

// Typed, path-aware view of one JSON object; rejects unknown keys so typos
// surface as config errors instead of silent defaults.
class Obj {
public:
    Obj(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_, "expected an object");
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!ok.count(it.key())) throw ConfigError(join(path_, it.key()), "unknown key");
        }
    }

    bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }
    std::string path(const char* key) const { return join(path_, key); }

    const json& at(const char* key) const {
        if (!has(key)) throw ConfigError(path(key), "required key missing");
        return j_.at(key);
    }

    double number(const char* key) const {
        const json& v = at(key);
        if (!v.is_number()) throw ConfigError(path(key), "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) throw ConfigError(path(key), "expected a finite number");
        return d;
    }
    double number(const char* key, double def) const { return has(key) ? number(key) : def; }

    std::int64_t integer(const char* key) const {
        const json& v = at(key);
        if (!v.is_number_integer()) throw ConfigError(path(key), "expected an integer");
        return v.get<std::int64_t>();
    }
    std::int64_t integer(const char* key, std::int64_t def) const { return has(key) ? integer(key) : def; }

    std::uint64_t seed(const char* key, std::uint64_t def) const {
        if (!has(key)) return def;
        const json& v = at(key);
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
        throw ConfigError(path(key), "expected a nonnegative integer");
    }

    std::string string(const char* key) const {
        const json& v = at(key);
        if (!v.is_string()) throw ConfigError(path(key), "expected a string");
        return v.get<std::string>();
    }
    std::string string(const char* key, const std::string& def) const { return has(key) ? string(key) : def; }

    bool boolean(const char* key, bool def) const {
        if (!has(key)) return def;
        if (!at(key).is_boolean()) throw ConfigError(path(key), "expected true or false");
        return at(key).get<bool>();
    }

    std::vector<double> numbers(const char* key) const { return number_list(at(key), path(key)); }

    std::vector<std::string> strings(const char* key) const {
        const json& v = at(key);
        if (!v.is_array()) throw ConfigError(path(key), "expected an array of strings");
        std::vector<std::string> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_string()) throw ConfigError(index(path(key), i), "expected a string");
            out.push_back(v[i].get<std::string>());
        }
        return out;
    }

    static std::vector<double> number_list(const json& v, const std::string& p) {
        if (!v.is_array()) throw ConfigError(p, "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) throw ConfigError(index(p, i), "expected a number");
            out.push_back(v[i].get<double>());
        }
        return out;
    }

private:
    const json& j_;
    std::string path_;
};

template <class F>
auto wrap(const std::string& path, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const InvalidInput& e) {
        throw ConfigError(path, e.what());
    }
}

std::vector<int> int_levels(const std::vector<double>& v, const std::string& path) {
    std::vector<int> out;
    for (double d : v) {
        if (d != std::floor(d) || d < 2) throw ConfigError(path, "levels must be integers >= 2");
        out.push_back(static_cast<int>(d));
    }
    return out;
}

policy::ParameterMatrix parse_theta(const json& j, const std::string& path) {
    if (!j.is_array() || j.empty()) throw ConfigError(path, "theta must be a nonempty array of columns");
    const std::size_t d = j.size();
    policy::ParameterMatrix theta(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < d; ++i) {
        auto col = Obj::number_list(j[i], index(path, i));
        if (col.size() != d) throw ConfigError(index(path, i), "theta must be square: each column needs " + std::to_string(d) + " entries");
        for (std::size_t r = 0; r < d; ++r) theta(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = col[r];
    }
    if (!theta.allFinite()) throw ConfigError(path, "theta entries must be finite");
    return theta;
}

maps::RawCovariates parse_probe(const json& j, const std::string& path) { return Obj::number_list(j, path); }

}  // namespace

double parse_rho(const json& j, const std::string& path) {
    double rho = 0.0;
    if (j.is_number()) {
        rho = j.get<double>();
    } else if (j.is_string()) {
        rho = wrap(path, [&] { return parse_ratio(j.get<std::string>()); });
    } else {
        throw ConfigError(path, "expected a number or a fraction string like \"2/3\"");
    }
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError(path, "allocation ratio must satisfy 0 < rho < 1");
    return rho;
}

policy::PolicySpec parse_policy(const json& j, const std::string& path) {
    Obj o(j, path,
          {"name", "kind", "rho1", "imbalance", "weights", "margins", "p", "alpha", "epsilon", "warmup", "theta",
           "oracle_mc"});
    policy::PolicySpec p;
    p.kind = wrap(o.path("kind"), [&] { return policy::policy_kind_from_string(o.string("kind")); });
    p.name = o.string("name", policy::to_string(p.kind));
    p.rho1 = o.number("rho1", 0.9);
    if (o.has("imbalance")) {
        p.imbalance = wrap(o.path("imbalance"), [&] { return policy::imbalance_kind_from_string(o.string("imbalance")); });
    }
    if (o.has("margins")) {
        p.margins = wrap(o.path("margins"), [&] { return policy::margin_convention_from_string(o.string("margins")); });
    }
    if (o.has("weights")) p.weights = o.numbers("weights");
    p.p = o.number("p", 0.2);
    if (o.has("alpha")) p.alpha = wrap(o.path("alpha"), [&] { return policy::alpha_kind_from_string(o.string("alpha")); });
    if (o.has("epsilon")) {
        p.epsilon = wrap(o.path("epsilon"), [&] { return policy::epsilon_mode_from_string(o.string("epsilon")); });
    }
    const std::int64_t default_warmup = p.kind == policy::PolicyKind::feasible ? 10 : (p.kind == policy::PolicyKind::rmm ? 1 : 0);
    const std::int64_t warmup = o.integer("warmup", default_warmup);
    if (warmup < 0 || warmup > 1'000'000'000) throw ConfigError(o.path("warmup"), "warmup must be a nonnegative integer");
    p.warmup = static_cast<int>(warmup);
    if (o.has("theta")) p.fixed_theta = parse_theta(o.at("theta"), o.path("theta"));
    const std::int64_t mc = o.integer("oracle_mc", 1'000'000);
    if (mc < 10'000) throw ConfigError(o.path("oracle_mc"), "oracle_mc must be at least 10000");
    p.oracle_mc = static_cast<std::size_t>(mc);
    return p;
}

maps::FeatureMap parse_feature_map(const json& j, const std::string& path, std::size_t default_dim) {
    Obj o(j, path,
          {"kind", "dim", "degree", "center", "scale", "levels", "weights_marginal", "weight_overall", "weight_stratum"});
    const auto kind = wrap(o.path("kind"), [&] { return maps::map_kind_from_string(o.string("kind", "identity")); });
    maps::FeatureMap m;
    const auto dim_of = [&]() -> std::size_t {
        const std::int64_t d = o.integer("dim", static_cast<std::int64_t>(default_dim));
        if (d < 1) throw ConfigError(o.path("dim"), "dim must be at least 1");
        return static_cast<std::size_t>(d);
    };
    switch (kind) {
        case maps::MapKind::identity: m = maps::FeatureMap::identity(dim_of()); break;
        case maps::MapKind::scaled_identity: {
            auto scale = o.numbers("scale");
            auto center = o.has("center") ? o.numbers("center") : std::vector<double>(scale.size(), 0.0);
            m = maps::FeatureMap::scaled(center, scale);
            break;
        }
        case maps::MapKind::polynomial_moments: {
            const std::int64_t deg = o.integer("degree", 2);
            if (deg < 1 || deg > 16) throw ConfigError(o.path("degree"), "degree must be in 1..16");
            m = maps::FeatureMap::polynomial(dim_of(), static_cast<int>(deg));
            break;
        }
        default: {
            maps::DiscreteScheme s;
            s.levels = int_levels(o.numbers("levels"), o.path("levels"));
            if (o.has("weights_marginal")) s.weights_marginal = o.numbers("weights_marginal");
            s.weight_overall = o.number("weight_overall", 0.0);
            s.weight_stratum = o.number("weight_stratum", 0.0);
            m = wrap(path, [&] { return maps::FeatureMap::discrete(kind, s); });
        }
    }
    wrap(path, [&] { m.validate(); });
    return m;
}

sim::CovariateGenerator parse_generator(const json& j, const std::string& path) {
    Obj o(j, path, {"kind", "levels", "weights", "components"});
    const std::string kind = o.string("kind");
    if (kind == "table1_continuous") return sim::CovariateGenerator::table1();
    if (kind == "appendixB_discrete") {
        if (!o.has("levels") && !o.has("weights")) return sim::CovariateGenerator::appendix_b();
        auto levels = int_levels(o.numbers("levels"), o.path("levels"));
        auto weights = o.numbers("weights");
        return wrap(path, [&] { return sim::CovariateGenerator::discrete(levels, weights); });
    }
    if (kind == "custom_mixture") {
        const json& comps = o.at("components");
        if (!comps.is_array() || comps.empty()) throw ConfigError(o.path("components"), "expected a nonempty array");
        std::vector<sim::MixtureComponent> out;
        for (std::size_t i = 0; i < comps.size(); ++i) {
            Obj c(comps[i], index(o.path("components"), i), {"weight", "mean", "sd"});
            sim::MixtureComponent m;
            m.weight = c.number("weight", 1.0);
            m.mean = c.numbers("mean");
            if (c.has("sd")) m.sd = c.numbers("sd");
            out.push_back(std::move(m));
        }
        return wrap(o.path("components"), [&] { return sim::CovariateGenerator::mixture(out); });
    }
    if (kind == "csv_resample") {
        throw ConfigError(o.path("kind"), "csv_resample is configured through a top-level \"csv\" section");
    }
    throw ConfigError(o.path("kind"), "unknown generator kind '" + kind + "'");
}

sim::AdditionalCovariateSpec parse_additional(const json& j, const std::string& path) {
    Obj o(j, path, {"name", "kind", "threshold", "column", "use_extra", "coefficients", "power", "noise_sd"});
    sim::AdditionalCovariateSpec a;
    a.kind = wrap(o.path("kind"), [&] { return sim::additional_kind_from_string(o.string("kind")); });
    a.name = o.string("name", sim::to_string(a.kind));
    a.threshold = o.number("threshold", sim::kDefaultIndicatorThreshold);
    const std::int64_t col = o.integer("column", 0);
    if (col < 0) throw ConfigError(o.path("column"), "column must be nonnegative");
    a.column = static_cast<std::size_t>(col);
    a.use_extra = o.boolean("use_extra", false);
    if (o.has("coefficients")) a.coefficients = o.numbers("coefficients");
    if (a.kind == sim::AdditionalKind::custom && a.coefficients.empty()) {
        throw ConfigError(o.path("coefficients"), "custom covariate needs coefficients");
    }
    a.power = o.number("power", 1.0);
    a.noise_sd = o.number("noise_sd", 0.0);
    if (a.noise_sd < 0.0) throw ConfigError(o.path("noise_sd"), "noise_sd must be nonnegative");
    return a;
}

namespace {

DiagnosticsSpec parse_diagnostics(const json& j, const std::string& path) {
    Obj o(j, path, {"drift", "rhotilde", "normality"});
    DiagnosticsSpec d;
    if (o.has("drift")) {
        Obj dr(o.at("drift"), o.path("drift"), {"radii", "directions", "draws", "seed", "policies"});
        if (dr.has("radii")) d.drift.radii = dr.numbers("radii");
        const auto dirs = dr.integer("directions", 200), draws = dr.integer("draws", 2000);
        if (dirs < 100) throw ConfigError(dr.path("directions"), "directions must be at least 100");
        if (draws < 100) throw ConfigError(dr.path("draws"), "draws must be at least 100");
        d.drift.directions = static_cast<std::size_t>(dirs);
        d.drift.draws = static_cast<std::size_t>(draws);
        d.drift.seed = dr.seed("seed", d.drift.seed);
        if (dr.has("policies")) d.drift_policies = dr.strings("policies");
    }
    if (o.has("rhotilde")) {
        Obj rt(o.at("rhotilde"), o.path("rhotilde"), {"chain_length", "burn_in", "batches", "seed", "probes", "policies"});
        d.rhotilde.chain_length = rt.integer("chain_length", d.rhotilde.chain_length);
        d.rhotilde.burn_in = rt.integer("burn_in", d.rhotilde.burn_in);
        const auto batches = rt.integer("batches", 50);
        if (batches < 2) throw ConfigError(rt.path("batches"), "batches must be at least 2");
        d.rhotilde.batches = static_cast<std::size_t>(batches);
        if (d.rhotilde.burn_in < 0 || d.rhotilde.chain_length - d.rhotilde.burn_in < 10'000) {
            throw ConfigError(rt.path("chain_length"), "chain_length - burn_in must be at least 10000");
        }
        d.rhotilde.seed = rt.seed("seed", d.rhotilde.seed);
        if (rt.has("probes")) {
            const json& pr = rt.at("probes");
            if (!pr.is_array()) throw ConfigError(rt.path("probes"), "expected an array of covariate records");
            for (std::size_t i = 0; i < pr.size(); ++i) d.probes.push_back(parse_probe(pr[i], index(rt.path("probes"), i)));
        }
        if (rt.has("policies")) d.rhotilde_policies = rt.strings("policies");
    }
    if (o.has("normality")) {
        Obj nm(o.at("normality"), o.path("normality"), {"policy", "n", "stat"});
        d.normality_policy = nm.string("policy", "");
        d.normality_n = nm.integer("n", 0);
        d.normality_stat = nm.string("stat", "");
    }
    return d;
}

}  // namespace

ExperimentConfig parse_experiment(const json& j) {
    Obj o(j, "",
          {"name", "rho", "generator", "feature_map", "policies", "sample_sizes", "replications", "additional", "base_seed",
           "strata", "output", "diagnostics", "csv"});
    ExperimentConfig cfg;
    auto& e = cfg.experiment;
    e.name = o.string("name", "experiment");
    e.rho = parse_rho(o.at("rho"), "rho");

    std::size_t raw_dim = 0;
    if (o.has("csv")) {
        if (o.has("generator")) throw ConfigError("generator", "a csv section replaces the generator");
        Obj c(o.at("csv"), "csv", {"path", "columns", "extra_columns", "scaling", "resample"});
        sim::RedesignSpec r;
        r.csv_path = c.string("path");
        r.columns = c.strings("columns");
        if (r.columns.empty()) throw ConfigError(c.path("columns"), "at least one column required");
        if (c.has("extra_columns")) r.extra_columns = c.strings("extra_columns");
        r.scaling = wrap(c.path("scaling"), [&] { return sim::scaling_from_string(c.string("scaling", "unit_variance")); });
        r.resample = c.boolean("resample", false);
        cfg.redesign = std::move(r);
        raw_dim = cfg.redesign->columns.size();
    } else {
        e.generator = parse_generator(o.at("generator"), "generator");
        raw_dim = e.generator.raw_dim();
    }

    if (o.has("feature_map")) {
        e.map = parse_feature_map(o.at("feature_map"), "feature_map", raw_dim);
    } else if (e.generator.kind() == sim::GeneratorKind::appendixB_discrete && !cfg.redesign) {
        maps::DiscreteScheme s;
        s.levels = e.generator.levels();
        e.map = maps::FeatureMap::discrete(maps::MapKind::pocock_simon, s);
    } else {
        e.map = maps::FeatureMap::identity(raw_dim);
    }
    if (cfg.redesign && e.map.kind != maps::MapKind::identity) {
        throw ConfigError("feature_map", "csv redesign balances the scaled columns directly (identity map)");
    }
    if (e.map.input_size() != raw_dim) {
        throw ConfigError("feature_map", "map expects " + std::to_string(e.map.input_size()) +
                                             " raw covariates but the data provides " + std::to_string(raw_dim));
    }

    const json& pol = o.at("policies");
    if (!pol.is_array() || pol.empty()) throw ConfigError("policies", "expected a nonempty array");
    for (std::size_t i = 0; i < pol.size(); ++i) {
        const std::string p = index("policies", i);
        auto spec = parse_policy(pol[i], p);
        for (const auto& prev : e.policies) {
            if (prev.name == spec.name) throw ConfigError(p + ".name", "duplicate policy name '" + spec.name + "'");
        }
        wrap(p, [&] {
            spec.validate(e.rho);
            engine::TrialConfig probe;
            probe.rho = e.rho;
            probe.policy = spec;
            probe.feature_map = e.map;
            if (probe.policy.kind == policy::PolicyKind::oracle && !probe.policy.fixed_theta) {
                const auto d = static_cast<Eigen::Index>(e.map.output_dim());
                probe.policy.fixed_theta = Mat::Identity(d, d);  // real value resolved at run time
            }
            probe.finalize();
            spec.weights = probe.policy.weights;
        });
        e.policies.push_back(std::move(spec));
    }

    if (o.has("sample_sizes")) {
        const auto sizes = o.numbers("sample_sizes");
        if (sizes.empty()) throw ConfigError("sample_sizes", "at least one size required");
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            if (sizes[i] < 1 || sizes[i] != std::floor(sizes[i])) throw ConfigError(index("sample_sizes", i), "sizes must be positive integers");
            e.sample_sizes.push_back(static_cast<std::int64_t>(sizes[i]));
        }
    } else if (!cfg.redesign) {
        throw ConfigError("sample_sizes", "required key missing");
    }
    const std::int64_t reps = o.integer("replications", 1000);
    if (reps < 2) throw ConfigError("replications", "replications must be at least 2");
    e.replications = static_cast<std::size_t>(reps);
    if (o.has("additional")) {
        const json& add = o.at("additional");
        if (!add.is_array()) throw ConfigError("additional", "expected an array");
        for (std::size_t i = 0; i < add.size(); ++i) e.additional.push_back(parse_additional(add[i], index("additional", i)));
    }
    e.base_seed = o.seed("base_seed", 1);
    e.strata = o.boolean("strata", false);
    if (e.strata && !e.map.is_discrete()) throw ConfigError("strata", "per-stratum output needs a discrete feature map");
    if (o.has("output")) {
        Obj out(o.at("output"), "output", {"csv", "json"});
        cfg.csv_out = out.string("csv", "");
        cfg.json_out = out.string("json", "");
    }
    if (o.has("diagnostics")) cfg.diagnostics = parse_diagnostics(o.at("diagnostics"), "diagnostics");
    if (cfg.redesign) cfg.redesign->experiment = e;
    return cfg;
}

ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot read config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("", std::string("invalid JSON: ") + e.what());
    }
    return parse_experiment(j);
}

engine::TrialConfig parse_trial(const json& j) {
    Obj o(j, "", {"name", "rho", "policy", "feature_map", "seed", "stream"});
    engine::TrialConfig c;
    c.name = o.string("name");
    if (c.name.empty()) throw ConfigError("name", "name must not be empty");
    c.rho = parse_rho(o.at("rho"), "rho");
    c.policy = parse_policy(o.at("policy"), "policy");
    if (!o.has("feature_map")) throw ConfigError("feature_map", "required key missing");
    c.feature_map = parse_feature_map(o.at("feature_map"), "feature_map", 0);
    c.seed = o.seed("seed", 0);
    c.stream = o.seed("stream", 0);
    wrap("policy", [&] { c.finalize(); });
    return c;
}

json theta_to_json(const policy::ParameterMatrix& theta) {
    json cols = json::array();
    for (Eigen::Index i = 0; i < theta.cols(); ++i) {
        json col = json::array();
        for (Eigen::Index r = 0; r < theta.rows(); ++r) col.push_back(theta(r, i));
        cols.push_back(col);
    }
    return cols;
}

}  // namespace car::config
