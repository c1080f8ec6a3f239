#include "car/policies.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/SVD>

namespace car::policy {

namespace {

template <class E>
E enum_from(const std::string& s, std::initializer_list<E> all, const char* what) {
    for (E e : all) {
        if (to_string(e) == s) return e;
    }
    throw InvalidInput(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

std::string to_string(AlphaKind k) { return k == AlphaKind::sign ? "sign" : "linf_normalized"; }
std::string to_string(EpsilonMode k) { return k == EpsilonMode::computed ? "computed" : "fixed_zero"; }
std::string to_string(ImbalanceKind k) { return k == ImbalanceKind::square ? "square" : "abs"; }
std::string to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::cr: return "cr";
        case PolicyKind::rmm: return "rmm";
        case PolicyKind::ps_discrete: return "ps_discrete";
        case PolicyKind::feasible: return "feasible";
        case PolicyKind::oracle: return "oracle";
    }
    return "cr";
}

std::string to_string(MarginConvention k) {
    return k == MarginConvention::rho_weighted ? "rho_weighted" : "integer_unit";
}
MarginConvention margin_convention_from_string(const std::string& s) {
    return enum_from(s, {MarginConvention::rho_weighted, MarginConvention::integer_unit}, "margin convention");
}

AlphaKind alpha_kind_from_string(const std::string& s) {
    return enum_from(s, {AlphaKind::sign, AlphaKind::linf_normalized}, "alpha kind");
}
EpsilonMode epsilon_mode_from_string(const std::string& s) {
    return enum_from(s, {EpsilonMode::computed, EpsilonMode::fixed_zero}, "epsilon mode");
}
ImbalanceKind imbalance_kind_from_string(const std::string& s) {
    return enum_from(s, {ImbalanceKind::square, ImbalanceKind::abs}, "imbalance kind");
}
PolicyKind policy_kind_from_string(const std::string& s) {
    return enum_from(s,
                     {PolicyKind::cr, PolicyKind::rmm, PolicyKind::ps_discrete, PolicyKind::feasible,
                      PolicyKind::oracle},
                     "policy kind");
}

double cr_prob(double rho) { return rho; }

double rmm_criterion(const Vec& lambda, const Vec& x, double rho) {
    return 2.0 * x.dot(lambda) + (1.0 - 2.0 * rho) * x.squaredNorm();
}

double rmm_prob(const Vec& lambda, const Vec& x, double rho, double rho1) {
    if (lambda.size() != x.size()) throw InvalidInput("rmm_prob: dimension mismatch");
    return biased_coin(rmm_criterion(lambda, x, rho), rho, rho1);
}

double ps_discrete_delta(std::span<const double> own, std::span<const double> weights, double rho,
                         ImbalanceKind kind, MarginConvention conv) {
    if (own.size() != weights.size()) throw InvalidInput("ps_discrete: one weight per covariate required");
    double delta = 0.0;
    for (std::size_t t = 0; t < own.size(); ++t) {
        if (conv == MarginConvention::integer_unit) {
            const double up = own[t] + 1.0, down = own[t] - 1.0;
            delta += weights[t] * (kind == ImbalanceKind::square ? up * up - down * down : std::abs(up) - std::abs(down));
            continue;
        }
        const double up = weights[t] * (own[t] + (1.0 - rho));
        const double down = weights[t] * (own[t] - rho);
        delta += kind == ImbalanceKind::square ? up * up - down * down : std::abs(up) - std::abs(down);
    }
    return delta;
}

double ps_discrete_prob(std::span<const double> own, std::span<const double> weights, double rho, double rho1,
                        ImbalanceKind kind, MarginConvention conv) {
    double delta = ps_discrete_delta(own, weights, rho, kind, conv);
    // Margins are exact multiples of rho; treat rounding residue as a tie.
    double scale = 1.0;
    for (std::size_t t = 0; t < own.size(); ++t) scale += weights[t] * (std::abs(own[t]) + 1.0);
    if (std::abs(delta) <= 1e-12 * scale * scale) delta = 0.0;
    return biased_coin(delta, rho, rho1);
}

double alpha(const Vec& x, Eigen::Index i, AlphaKind kind) {
    if (i < 0 || i >= x.size()) throw InvalidInput("alpha: coordinate index out of range");
    if (kind == AlphaKind::sign) return (x[i] > 0.0 ? 1.0 : 0.0) - (x[i] < 0.0 ? 1.0 : 0.0);
    const double m = x.lpNorm<Eigen::Infinity>();
    return m == 0.0 ? 0.0 : x[i] / m;
}

Vec alpha_vector(const Vec& x, AlphaKind kind) {
    Vec a(x.size());
    if (kind == AlphaKind::sign) {
        for (Eigen::Index i = 0; i < x.size(); ++i) a[i] = (x[i] > 0.0 ? 1.0 : 0.0) - (x[i] < 0.0 ? 1.0 : 0.0);
        return a;
    }
    const double m = x.lpNorm<Eigen::Infinity>();
    if (m == 0.0) return Vec::Zero(x.size());
    return x / m;
}

namespace {

double degeneracy_floor(const ParameterMatrix& theta) { return 1e-12 * (1.0 + theta.norm()); }

}  // namespace

PreparedTheta prepare_theta(const ParameterMatrix& theta, EpsilonMode mode) {
    const Eigen::Index d = theta.rows();
    if (theta.cols() != d) throw InvalidInput("parameter matrix must be square (d columns of length d)");
    PreparedTheta out;
    out.unit_xi = Mat::Zero(d, d);
    out.degenerate.assign(static_cast<std::size_t>(d), 0);
    const double floor = degeneracy_floor(theta);
    bool any_degenerate = false;
    for (Eigen::Index i = 0; i < d; ++i) {
        const double nrm = theta.col(i).norm();
        if (!(nrm >= floor) || !std::isfinite(nrm)) {
            out.degenerate[static_cast<std::size_t>(i)] = 1;
            any_degenerate = true;
        } else {
            out.unit_xi.col(i) = theta.col(i) / nrm;
        }
    }
    if (mode == EpsilonMode::fixed_zero || any_degenerate) {
        out.epsilon = 0.0;
        return out;
    }
    Eigen::JacobiSVD<Mat> svd(out.unit_xi);
    const double smin = svd.singularValues()[d - 1];
    out.epsilon = smin < kSingularTol ? 0.0 : smin / std::sqrt(static_cast<double>(d + 1));
    return out;
}

double epsilon_of_theta(const ParameterMatrix& theta) {
    return prepare_theta(theta, EpsilonMode::computed).epsilon;
}

double cutsin(double v) {
    constexpr double half_pi = std::numbers::pi / 2.0;
    if (v >= -half_pi && v <= half_pi) return -std::sin(v);
    return v > 0.0 ? -1.0 : 1.0;
}

namespace {

double tau_unit(const Vec& unit_xi, double eps, const Vec& lambda) {
    const double proj = unit_xi.dot(lambda);
    if (eps == 0.0) return proj;
    const double e2 = eps * eps;
    return std::sqrt(1.0 + e2) * proj / std::sqrt(1.0 + e2 * lambda.squaredNorm());
}

}  // namespace

std::optional<double> tau(const Vec& xi, double eps, const Vec& lambda) {
    if (xi.size() != lambda.size()) throw InvalidInput("tau: dimension mismatch");
    const double nrm = xi.norm();
    if (nrm == 0.0 || !std::isfinite(nrm)) return std::nullopt;
    return tau_unit(xi / nrm, eps, lambda);
}

double beta(const Vec& xi, double eps, const Vec& lambda) {
    auto t = tau(xi, eps, lambda);
    if (!t) return 0.0;
    return cutsin(std::numbers::pi / 2.0 * *t);
}

double feasible_prob(const PreparedTheta& prepared, const Vec& lambda, const Vec& x, double rho, double p,
                     AlphaKind kind) {
    const Eigen::Index d = x.size();
    if (lambda.size() != d || prepared.unit_xi.rows() != d) throw InvalidInput("feasible_prob: dimension mismatch");
    const Vec a = alpha_vector(x, kind);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
        if (a[i] == 0.0 || prepared.degenerate[static_cast<std::size_t>(i)]) continue;
        const double t = tau_unit(prepared.unit_xi.col(i), prepared.epsilon, lambda);
        acc += a[i] * cutsin(std::numbers::pi / 2.0 * t);
    }
    // |acc| <= d exactly, but the rounded sum can step an ulp past rho +- p
    return std::clamp(rho + p / static_cast<double>(d) * acc, rho - p, rho + p);
}

double feasible_prob(const ParameterMatrix& theta, const Vec& lambda, const Vec& x, double rho, double p,
                     AlphaKind kind, EpsilonMode mode) {
    return feasible_prob(prepare_theta(theta, mode), lambda, x, rho, p, kind);
}

void update_parameter_inplace(ParameterMatrix& theta, const Vec& x, std::int64_t n, AlphaKind kind) {
    const Eigen::Index d = x.size();
    if (theta.rows() != d || theta.cols() != d) throw InvalidInput("update_parameter: dimension mismatch");
    if (n < 0) throw InvalidInput("update_parameter: negative unit count");
    const Vec a = alpha_vector(x, kind);
    const double inv = 1.0 / static_cast<double>(n + 1);
    for (Eigen::Index i = 0; i < d; ++i) theta.col(i) += (a[i] * x - theta.col(i)) * inv;
}

ParameterMatrix update_parameter(const ParameterMatrix& theta, const Vec& x_next, std::int64_t n, AlphaKind kind) {
    ParameterMatrix next = theta;
    update_parameter_inplace(next, x_next, n, kind);
    return next;
}

OracleEstimate oracle_parameter_mc(const Sampler& sampler, AlphaKind kind, std::size_t n_mc, RngStream rng) {
    if (n_mc < 2) throw InvalidInput("oracle_parameter: need at least 2 Monte Carlo draws");
    Vec first = sampler(rng);
    const Eigen::Index d = first.size();
    Mat sum = Mat::Zero(d, d), sum_sq = Mat::Zero(d, d);
    auto accumulate = [&](const Vec& x) {
        const Vec a = alpha_vector(x, kind);
        Mat term = x * a.transpose();  // column i = alpha_i(x) x
        sum += term;
        sum_sq += term.cwiseProduct(term);
    };
    accumulate(first);
    for (std::size_t k = 1; k < n_mc; ++k) accumulate(sampler(rng));
    const double n = static_cast<double>(n_mc);
    OracleEstimate est;
    est.theta = sum / n;
    Mat var = (sum_sq / n - est.theta.cwiseProduct(est.theta)) * (n / (n - 1.0));
    est.standard_error = (var.cwiseMax(0.0) / n).cwiseSqrt();
    return est;
}

void PolicySpec::validate(double rho) const {
    AllocationRatio checked(rho);
    switch (kind) {
        case PolicyKind::cr: break;
        case PolicyKind::rmm:
        case PolicyKind::ps_discrete:
            if (!(rho1 > std::max(rho, 1.0 - rho) && rho1 < 1.0)) {
                throw InvalidInput("policy '" + name + "': rho1 violates max(ρ,1−ρ) < ρ1 < 1");
            }
            for (double w : weights) {
                if (!(w >= 0.0)) throw InvalidInput("policy '" + name + "': weights must be nonnegative");
            }
            break;
        case PolicyKind::feasible:
        case PolicyKind::oracle:
            if (!(p > 0.0 && p < std::min(rho, 1.0 - rho))) {
                throw InvalidInput("policy '" + name + "': p violates 0 < p < min(ρ,1−ρ)");
            }
            if (fixed_theta && fixed_theta->rows() != fixed_theta->cols()) {
                throw InvalidInput("policy '" + name + "': theta must be a square matrix");
            }
            break;
    }
    if (warmup < 0) throw InvalidInput("policy '" + name + "': warmup must be nonnegative");
}

double PolicySpec::iota(double rho) const {
    const double base = std::min(rho, 1.0 - rho);
    switch (kind) {
        case PolicyKind::cr: return base;
        case PolicyKind::rmm:
        case PolicyKind::ps_discrete: return std::min(base, 1.0 - rho1);
        case PolicyKind::feasible:
        case PolicyKind::oracle: return base - p;
    }
    return base;
}

double evaluate(const PolicySpec& spec, double rho, const PolicyInputs& in) {
    if (in.n < spec.warmup) return rho;
    switch (spec.kind) {
        case PolicyKind::cr: return cr_prob(rho);
        case PolicyKind::rmm: return rmm_prob(in.lambda, in.x, rho, spec.rho1);
        case PolicyKind::ps_discrete:
            return ps_discrete_prob(in.own_margins, spec.weights, rho, spec.rho1, spec.imbalance, spec.margins);
        case PolicyKind::feasible:
        case PolicyKind::oracle:
            if (in.theta == nullptr) throw InvalidInput("policy '" + spec.name + "' needs a parameter matrix");
            return feasible_prob(*in.theta, in.lambda, in.x, rho, spec.p, spec.alpha);
    }
    return rho;
}

}  // namespace car::policy
