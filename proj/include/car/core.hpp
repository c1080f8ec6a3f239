// core.hpp
#pragma once
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace car {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Raised for any caller-supplied value that violates an operation's contract.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Targeted allocation ratio for the treatment arm, strictly inside (0,1).
class AllocationRatio {
public:
    explicit AllocationRatio(double rho);
    double value() const { return rho_; }
    operator double() const { return rho_; }

private:
    double rho_;
};

// Parses "2/3" style fractions or plain decimals.
double parse_ratio(const std::string& text);

enum class Arm : int { control = 0, treatment = 1 };

inline int as_int(Arm a) { return static_cast<int>(a); }

struct Assignment {
    Arm arm = Arm::control;
    double prob_used = 0.0;
    double uniform_draw = 0.0;
};

// Running imbalance Lambda_n = sum_i (T_i - rho) X_i with unit and arm counts.
struct ImbalanceState {
    Vec lambda;
    std::int64_t n = 0;
    std::int64_t n_treat = 0;

    ImbalanceState() = default;
    explicit ImbalanceState(Eigen::Index dim) : lambda(Vec::Zero(dim)) {}

    Eigen::Index dim() const { return lambda.size(); }
    std::int64_t n_control() const { return n - n_treat; }
};

ImbalanceState imbalance_update(const ImbalanceState& state, const Vec& x, Arm arm,
                                const AllocationRatio& rho);

// In-place variant used in hot simulation loops.
void imbalance_update_inplace(ImbalanceState& state, const Vec& x, Arm arm, double rho);

// Throws InvalidInput if any entry is NaN or infinite.
void require_finite(const Vec& x, const char* what);

// Counter-based stream: draw k of stream (seed, index) is a pure function of
// (seed, index, k), so streams can be skipped, replayed and run on any thread.
class RngStream {
public:
    RngStream() = default;
    RngStream(std::uint64_t base_seed, std::uint64_t stream_index);

    std::uint64_t base_seed() const { return base_seed_; }
    std::uint64_t stream_index() const { return stream_index_; }
    std::uint64_t position() const { return counter_; }
    void skip(std::uint64_t draws) { counter_ += draws; }

    std::uint64_t next_u64();
    // Uniform on [0,1) with 53 random bits.
    double uniform();
    double normal();
    double exponential();
    // Index drawn with probability proportional to weights.
    std::size_t categorical(const std::vector<double>& cumulative);

private:
    std::uint64_t base_seed_ = 0;
    std::uint64_t stream_index_ = 0;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

Assignment draw_assignment(double prob, RngStream& rng);

// Arm decision for an already drawn uniform; the single place the rule lives.
inline Arm decide_arm(double prob, double u) { return u < prob ? Arm::treatment : Arm::control; }

}  // namespace car
