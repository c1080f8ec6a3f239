#include "car/engine.hpp"

#include <chrono>
#include <ctime>
#include <istream>

namespace car::engine {

using nlohmann::json;

void TrialConfig::finalize() {
    AllocationRatio checked(rho);
    feature_map.validate();
    if (policy.kind == policy::PolicyKind::ps_discrete) {
        if (!feature_map.is_discrete()) {
            throw InvalidInput("policy '" + policy.name + "': ps_discrete needs a discrete feature map");
        }
        if (policy.weights.empty()) policy.weights = feature_map.scheme.weights_marginal;
        if (policy.weights.size() != feature_map.scheme.levels.size()) {
            throw InvalidInput("policy '" + policy.name + "': one weight per covariate required");
        }
    }
    if (policy.kind == policy::PolicyKind::oracle) {
        if (!policy.fixed_theta) throw InvalidInput("policy '" + policy.name + "': oracle policy needs theta");
        const auto d = static_cast<Eigen::Index>(feature_map.output_dim());
        if (policy.fixed_theta->rows() != d || policy.fixed_theta->cols() != d) {
            throw InvalidInput("policy '" + policy.name + "': theta must be " + std::to_string(d) + "x" +
                               std::to_string(d));
        }
    }
    policy.validate(rho);
}

TrialState::TrialState(TrialConfig config)
    : config_(std::move(config)), rng_(config_.seed, config_.stream) {
    config_.finalize();
    const auto d = static_cast<Eigen::Index>(config_.feature_map.output_dim());
    imbalance_ = ImbalanceState(d);
    if (config_.policy.kind == policy::PolicyKind::oracle) {
        theta_ = *config_.policy.fixed_theta;
    } else if (config_.policy.kind == policy::PolicyKind::feasible) {
        theta_ = Mat::Zero(d, d);
    }
    if (config_.feature_map.is_discrete()) margins_ = maps::MarginTable(config_.feature_map.scheme);
    refresh_prepared();
}

void TrialState::refresh_prepared() {
    if (config_.policy.uses_theta()) prepared_ = policy::prepare_theta(theta_, config_.policy.epsilon);
}

void TrialState::set_theta(const policy::ParameterMatrix& theta) {
    if (theta.rows() != imbalance_.dim() || theta.cols() != imbalance_.dim()) {
        throw InvalidInput("set_theta: dimension mismatch");
    }
    theta_ = theta;
    refresh_prepared();
}

std::int64_t TrialState::warmup_remaining() const {
    return std::max<std::int64_t>(0, config_.policy.warmup - imbalance_.n);
}

std::vector<double> TrialState::own_margins(const maps::RawCovariates& raw) const {
    const auto& scheme = config_.feature_map.scheme;
    const auto lv = scheme.read_levels(raw);
    std::vector<double> own(lv.size());
    for (std::size_t t = 0; t < lv.size(); ++t) {
        const std::size_t cell = scheme.margin_offset(t) + static_cast<std::size_t>(lv[t] - 1);
        own[t] = config_.policy.margins == policy::MarginConvention::integer_unit
                     ? static_cast<double>(margins_.difference(cell))
                     : margins_.imbalance(cell, config_.rho);
    }
    return own;
}

double TrialState::probability(const maps::RawCovariates& raw, const Vec& x) const {
    if (x.size() != imbalance_.dim()) throw InvalidInput("mapped covariate has wrong dimension");
    std::vector<double> own;
    if (config_.policy.kind == policy::PolicyKind::ps_discrete) own = own_margins(raw);
    policy::PolicyInputs in{imbalance_.lambda, x, imbalance_.n, config_.policy.uses_theta() ? &prepared_ : nullptr,
                            own};
    return policy::evaluate(config_.policy, config_.rho, in);
}

Assignment TrialState::allocate(const maps::RawCovariates& raw, const Vec& x, double u) {
    Assignment a;
    a.prob_used = probability(raw, x);
    a.uniform_draw = u;
    a.arm = decide_arm(a.prob_used, u);
    imbalance_update_inplace(imbalance_, x, a.arm, config_.rho);
    if (!margins_.empty()) margins_.record(config_.feature_map.scheme.read_levels(raw), a.arm);
    if (config_.policy.adaptive()) {
        // theta_{n+1} depends on X only; n here is the count before this unit.
        policy::update_parameter_inplace(theta_, x, imbalance_.n - 1, config_.policy.alpha);
        refresh_prepared();
    }
    return a;
}

Assignment TrialState::allocate(const maps::RawCovariates& raw, const Vec& x) {
    const double u = rng_.uniform();
    return allocate(raw, x, u);
}

Enrollment enroll(TrialState& state, const maps::RawCovariates& x_origin) {
    const Vec x = state.map(x_origin);
    Enrollment out;
    out.event.unit_index = state.imbalance().n;
    out.assignment = state.allocate(x_origin, x);
    out.event.x_origin = x_origin;
    out.event.x = x;
    out.event.prob = out.assignment.prob_used;
    out.event.u = out.assignment.uniform_draw;
    out.event.arm = out.assignment.arm;
    out.event.lambda = state.imbalance().lambda;
    out.event.ts = utc_timestamp();
    return out;
}

WhatIf whatif(const TrialState& state, const maps::RawCovariates& x_origin) {
    const Vec x = state.map(x_origin);
    const double rho = state.config().rho;
    WhatIf w;
    w.prob_treatment = state.probability(x_origin, x);
    w.lambda_if_treat = state.imbalance().lambda + (1.0 - rho) * x;
    w.lambda_if_control = state.imbalance().lambda - rho * x;
    return w;
}

TrialState replay(const std::vector<AllocationEvent>& events, const TrialConfig& config) {
    TrialState state(config);
    for (std::size_t k = 0; k < events.size(); ++k) {
        const auto& e = events[k];
        if (e.unit_index != static_cast<std::int64_t>(k)) {
            throw CorruptLog("event log gap: expected unit_index " + std::to_string(k) + ", found " +
                             std::to_string(e.unit_index));
        }
        const Vec x = state.map(e.x_origin);
        if (e.x.size() != x.size() || e.x != x) {
            throw IntegrityError("unit " + std::to_string(k) + ": logged x differs from the feature map output");
        }
        const double prob = state.probability(e.x_origin, x);
        if (prob != e.prob) {
            throw IntegrityError("unit " + std::to_string(k) + ": logged prob " + std::to_string(e.prob) +
                                 " differs from recomputed " + std::to_string(prob));
        }
        if (!(e.u >= 0.0 && e.u < 1.0) || decide_arm(prob, e.u) != e.arm) {
            throw IntegrityError("unit " + std::to_string(k) + ": logged arm inconsistent with u and prob");
        }
        state.allocate(e.x_origin, x, e.u);
        // Keep the stream position aligned with the live trial: one draw per unit.
        state.skip_draws(1);
    }
    return state;
}

bool same_state(const TrialState& a, const TrialState& b) {
    return a.imbalance().n == b.imbalance().n && a.imbalance().n_treat == b.imbalance().n_treat &&
           a.imbalance().lambda == b.imbalance().lambda && a.theta() == b.theta() && a.margins() == b.margins() &&
           a.rng().position() == b.rng().position();
}

namespace {

json vec_json(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Vec json_vec(const json& j) {
    auto v = j.get<std::vector<double>>();
    return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

json event_to_json(const AllocationEvent& e) {
    json j;
    j["unit_index"] = e.unit_index;
    j["x_origin"] = e.x_origin;
    j["x"] = vec_json(e.x);
    j["prob"] = e.prob;
    j["u"] = e.u;
    j["arm"] = as_int(e.arm);
    j["lambda"] = vec_json(e.lambda);
    j["ts"] = e.ts;
    return j;
}

AllocationEvent event_from_json(const json& j) {
    try {
        AllocationEvent e;
        e.unit_index = j.at("unit_index").get<std::int64_t>();
        e.x_origin = j.at("x_origin").get<std::vector<double>>();
        e.x = json_vec(j.at("x"));
        e.prob = j.at("prob").get<double>();
        e.u = j.at("u").get<double>();
        const int arm = j.at("arm").get<int>();
        if (arm != 0 && arm != 1) throw CorruptLog("arm must be 0 or 1");
        e.arm = static_cast<Arm>(arm);
        e.lambda = json_vec(j.at("lambda"));
        e.ts = j.value("ts", "");
        return e;
    } catch (const json::exception& ex) {
        throw CorruptLog(std::string("malformed event: ") + ex.what());
    }
}

std::string event_to_jsonl(const AllocationEvent& e) { return event_to_json(e).dump() + "\n"; }

std::vector<AllocationEvent> read_jsonl(std::istream& in) {
    std::vector<AllocationEvent> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& ex) {
            throw CorruptLog(std::string("unparseable event line: ") + ex.what());
        }
        out.push_back(event_from_json(j));
    }
    return out;
}

json snapshot_json(const TrialState& s) {
    const auto& imb = s.imbalance();
    json j;
    j["n"] = imb.n;
    j["n_treat"] = imb.n_treat;
    j["n_control"] = imb.n_control();
    j["lambda"] = vec_json(imb.lambda);
    j["warmup_remaining"] = s.warmup_remaining();
    j["rho"] = s.config().rho;
    j["policy"] = policy::to_string(s.config().policy.kind);
    if (s.has_theta()) {
        json cols = json::array();
        for (Eigen::Index i = 0; i < s.theta().cols(); ++i) cols.push_back(vec_json(s.theta().col(i)));
        j["theta"] = cols;
        j["epsilon"] = s.config().policy.epsilon == policy::EpsilonMode::fixed_zero
                           ? 0.0
                           : policy::epsilon_of_theta(s.theta());
    } else {
        j["theta"] = nullptr;
    }
    if (!s.margins().empty()) {
        const auto& scheme = s.config().feature_map.scheme;
        json margins = json::array();
        for (std::size_t t = 0; t < scheme.levels.size(); ++t) {
            for (int k = 1; k <= scheme.levels[t]; ++k) {
                const std::size_t cell = scheme.margin_offset(t) + static_cast<std::size_t>(k - 1);
                json m{{"covariate", t + 1},
                       {"level", k},
                       {"count", s.margins().count(cell)},
                       {"treated", s.margins().treated(cell)},
                       {"imbalance", s.margins().imbalance(cell, s.config().rho)}};
                if (s.config().rho == 0.5) m["difference"] = s.margins().difference(cell);
                margins.push_back(m);
            }
        }
        j["margins"] = margins;
        json strata = json::array();
        for (std::size_t c = 0; c < scheme.num_strata(); ++c) {
            strata.push_back({{"stratum", scheme.stratum_label(c)},
                              {"count", s.margins().stratum_count(c)},
                              {"imbalance", s.margins().stratum_imbalance(c, s.config().rho)}});
        }
        j["strata"] = strata;
    }
    return j;
}

std::string utc_timestamp() {
    using namespace std::chrono;
    const auto now = system_clock::now();
    const std::time_t t = system_clock::to_time_t(now);
    const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
    return out;
}

}  // namespace car::engine
