#include "car/core.hpp"

#include <algorithm>
#include <cmath>

namespace car {

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

}  // namespace

AllocationRatio::AllocationRatio(double rho) : rho_(rho) {
    if (!(rho > 0.0 && rho < 1.0)) {
        throw InvalidInput("allocation ratio must satisfy 0 < rho < 1");
    }
}

double parse_ratio(const std::string& text) {
    auto slash = text.find('/');
    try {
        if (slash == std::string::npos) return std::stod(text);
        double num = std::stod(text.substr(0, slash));
        double den = std::stod(text.substr(slash + 1));
        if (den == 0.0) throw InvalidInput("zero denominator in ratio '" + text + "'");
        return num / den;
    } catch (const std::logic_error&) {
        throw InvalidInput("cannot parse ratio '" + text + "'");
    }
}

void require_finite(const Vec& x, const char* what) {
    if (!x.allFinite()) throw InvalidInput(std::string(what) + " contains NaN or Inf");
}

ImbalanceState imbalance_update(const ImbalanceState& state, const Vec& x, Arm arm,
                                const AllocationRatio& rho) {
    if (x.size() != state.dim()) {
        throw InvalidInput("covariate dimension " + std::to_string(x.size()) +
                           " does not match imbalance dimension " + std::to_string(state.dim()));
    }
    ImbalanceState next = state;
    imbalance_update_inplace(next, x, arm, rho.value());
    return next;
}

void imbalance_update_inplace(ImbalanceState& state, const Vec& x, Arm arm, double rho) {
    const double w = static_cast<double>(as_int(arm)) - rho;
    state.lambda += w * x;
    state.n += 1;
    state.n_treat += as_int(arm);
}

RngStream::RngStream(std::uint64_t base_seed, std::uint64_t stream_index)
    : base_seed_(base_seed), stream_index_(stream_index) {
    key_ = mix64(base_seed ^ mix64(stream_index * kGamma + 0x2545F4914F6CDD1DULL));
}

std::uint64_t RngStream::next_u64() {
    // SplitMix64 output function applied to key + counter * gamma.
    const std::uint64_t z = key_ + (counter_ + 1) * kGamma;
    ++counter_;
    return mix64(z);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
    // Marsaglia polar method; the second variate is discarded so that
    // the draw count stays a function of the accepted pair only.
    for (;;) {
        const double a = 2.0 * uniform() - 1.0;
        const double b = 2.0 * uniform() - 1.0;
        const double s = a * a + b * b;
        if (s > 0.0 && s < 1.0) return a * std::sqrt(-2.0 * std::log(s) / s);
    }
}

double RngStream::exponential() { return -std::log1p(-uniform()); }

std::size_t RngStream::categorical(const std::vector<double>& cumulative) {
    const double u = uniform() * cumulative.back();
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()),
                                 cumulative.size() - 1);
}

Assignment draw_assignment(double prob, RngStream& rng) {
    if (!(prob >= 0.0 && prob <= 1.0)) {
        throw InvalidInput("assignment probability must lie in [0,1]");
    }
    Assignment a;
    a.prob_used = prob;
    a.uniform_draw = rng.uniform();
    a.arm = decide_arm(prob, a.uniform_draw);
    return a;
}

}  // namespace car
