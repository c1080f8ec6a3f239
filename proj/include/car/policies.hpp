// policies.hpp
#pragma once
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "car/core.hpp"

namespace car::policy {

enum class AlphaKind { sign, linf_normalized };
enum class EpsilonMode { computed, fixed_zero };
enum class ImbalanceKind { square, abs };
enum class PolicyKind { cr, rmm, ps_discrete, feasible, oracle };
// Margin bookkeeping for ps_discrete. rho_weighted: D = sum (T - rho) 1(level),
// potential moves +(1 - rho) / -rho, weights applied to D before the measure.
// integer_unit: D = #treated - #control, moves +1 / -1, weights multiply the
// per-cell measure (sum w D^2, sum w |D|).
enum class MarginConvention { rho_weighted, integer_unit };

std::string to_string(AlphaKind k);
std::string to_string(EpsilonMode k);
std::string to_string(ImbalanceKind k);
std::string to_string(PolicyKind k);
std::string to_string(MarginConvention k);
AlphaKind alpha_kind_from_string(const std::string& s);
EpsilonMode epsilon_mode_from_string(const std::string& s);
ImbalanceKind imbalance_kind_from_string(const std::string& s);
PolicyKind policy_kind_from_string(const std::string& s);
MarginConvention margin_convention_from_string(const std::string& s);

// Parameter theta = (xi_1, ..., xi_d), stored column-wise in a d x d matrix.
using ParameterMatrix = Mat;

double cr_prob(double rho);

// Imb^(1) - Imb^(0) = 2 x'lambda + (1 - 2 rho) x'x for the squared-norm measure.
double rmm_criterion(const Vec& lambda, const Vec& x, double rho);
double rmm_prob(const Vec& lambda, const Vec& x, double rho, double rho1);

// Biased-coin rule shared by the minimization policies.
inline double biased_coin(double delta, double rho, double rho1) {
    if (delta < 0.0) return rho1;
    if (delta > 0.0) return 1.0 - rho1;
    return rho;
}

// Difference of potential imbalance measures for a unit whose own margin cells
// currently hold imbalances own_margins[t] = sum (T - rho) 1(level t match).
// Hypothetical treatment moves each own cell by +(1 - rho), control by -rho.
// Weights scale the margin vector before the measure is taken:
// square -> sum (w_t D_t)^2, abs -> sum w_t |D_t|.
double ps_discrete_delta(std::span<const double> own_margins, std::span<const double> weights, double rho,
                         ImbalanceKind kind, MarginConvention conv = MarginConvention::rho_weighted);
double ps_discrete_prob(std::span<const double> own_margins, std::span<const double> weights, double rho,
                        double rho1, ImbalanceKind kind, MarginConvention conv = MarginConvention::rho_weighted);

// alpha_i(x) for a 0-based coordinate index.
double alpha(const Vec& x, Eigen::Index i, AlphaKind kind);
Vec alpha_vector(const Vec& x, AlphaKind kind);

// Threshold below which a smallest singular value counts as singular.
inline constexpr double kSingularTol = 1e-10;

double epsilon_of_theta(const ParameterMatrix& theta);

double cutsin(double v);
// Returns nullopt when xi is the zero vector.
std::optional<double> tau(const Vec& xi, double eps, const Vec& lambda);
// Degenerate xi yields 0, the neutral contribution.
double beta(const Vec& xi, double eps, const Vec& lambda);

// theta reduced to what the allocation function needs: unit-normalized
// columns, per-column degeneracy flags and epsilon.
struct PreparedTheta {
    Mat unit_xi;
    std::vector<char> degenerate;
    double epsilon = 0.0;
};

PreparedTheta prepare_theta(const ParameterMatrix& theta, EpsilonMode mode);

double feasible_prob(const PreparedTheta& prepared, const Vec& lambda, const Vec& x, double rho, double p,
                     AlphaKind kind);
double feasible_prob(const ParameterMatrix& theta, const Vec& lambda, const Vec& x, double rho, double p,
                     AlphaKind kind, EpsilonMode mode);

// Running mean xi_{n+1,i} = xi_{n,i} + (alpha_i(x) x - xi_{n,i}) / (n + 1).
ParameterMatrix update_parameter(const ParameterMatrix& theta, const Vec& x_next, std::int64_t n, AlphaKind kind);
void update_parameter_inplace(ParameterMatrix& theta, const Vec& x_next, std::int64_t n, AlphaKind kind);

struct OracleEstimate {
    ParameterMatrix theta;
    Mat standard_error;  // entrywise Monte Carlo standard errors; zero for closed forms
};

using Sampler = std::function<Vec(RngStream&)>;

OracleEstimate oracle_parameter_mc(const Sampler& sampler, AlphaKind kind, std::size_t n_mc, RngStream rng);

struct PolicySpec {
    std::string name;
    PolicyKind kind = PolicyKind::cr;
    double rho1 = 0.9;
    ImbalanceKind imbalance = ImbalanceKind::square;
    MarginConvention margins = MarginConvention::rho_weighted;
    std::vector<double> weights;  // ps_discrete; defaults to the scheme's marginal weights
    double p = 0.2;
    AlphaKind alpha = AlphaKind::sign;
    EpsilonMode epsilon = EpsilonMode::computed;
    int warmup = 0;
    std::optional<ParameterMatrix> fixed_theta;  // oracle kind
    std::size_t oracle_mc = 1000000;             // used when no closed form exists

    bool adaptive() const { return kind == PolicyKind::feasible; }
    bool uses_theta() const { return kind == PolicyKind::feasible || kind == PolicyKind::oracle; }
    // Throws InvalidInput naming the violated constraint.
    void validate(double rho) const;
    // Smallest value any output of this policy can take on either side (iota).
    double iota(double rho) const;
};

// Everything a policy may read when allocating the next unit.
struct PolicyInputs {
    const Vec& lambda;
    const Vec& x;
    std::int64_t n = 0;                      // units already allocated
    const PreparedTheta* theta = nullptr;    // feasible and oracle
    std::span<const double> own_margins{};   // ps_discrete
};

double evaluate(const PolicySpec& spec, double rho, const PolicyInputs& in);

}  // namespace car::policy
