#include "car/simlab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace car::sim {

namespace {

constexpr std::uint64_t kCovariateSalt = 0x6A09E667F3BCC909ULL;
constexpr std::uint64_t kNoiseSalt = 0xBB67AE8584CAA73BULL;

const char* const kAdditionalNames[] = {"sqrt_sum_abs",        "sum_squares",        "signed_sqrt_sum",
                                        "indicator_norm_ge",   "hamd17_square_like", "custom"};

}  // namespace

std::string to_string(AdditionalKind k) { return kAdditionalNames[static_cast<int>(k)]; }

AdditionalKind additional_kind_from_string(const std::string& s) {
    for (int i = 0; i < 6; ++i) {
        if (s == kAdditionalNames[i]) return static_cast<AdditionalKind>(i);
    }
    throw InvalidInput("unknown additional covariate '" + s + "'");
}

double AdditionalCovariateSpec::value(const Vec& x, const std::vector<double>& extra, double noise_z) const {
    double y = 0.0;
    switch (kind) {
        case AdditionalKind::sqrt_sum_abs: y = std::sqrt(x.cwiseAbs().sum()); break;
        case AdditionalKind::sum_squares: y = x.squaredNorm(); break;
        case AdditionalKind::signed_sqrt_sum:
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                y += (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0)) * std::sqrt(std::abs(x[i]));
            }
            break;
        case AdditionalKind::indicator_norm_ge: y = x.norm() >= threshold ? 1.0 : 0.0; break;
        case AdditionalKind::hamd17_square_like: {
            double v;
            if (use_extra) {
                if (column >= extra.size()) throw InvalidInput("additional covariate '" + name + "': no such column");
                v = extra[column];
            } else {
                if (static_cast<Eigen::Index>(column) >= x.size()) {
                    throw InvalidInput("additional covariate '" + name + "': no such coordinate");
                }
                v = x[static_cast<Eigen::Index>(column)];
            }
            y = v * v;
            break;
        }
        case AdditionalKind::custom:
            if (static_cast<Eigen::Index>(coefficients.size()) != x.size()) {
                throw InvalidInput("additional covariate '" + name + "': one coefficient per coordinate required");
            }
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                y += coefficients[static_cast<std::size_t>(i)] * std::pow(x[i], power);
            }
            break;
    }
    return y + noise_sd * noise_z;
}

void ExperimentSpec::validate() const {
    AllocationRatio checked(rho);
    map.validate();
    if (policies.empty()) throw InvalidInput("policies: at least one policy required");
    if (sample_sizes.empty()) throw InvalidInput("sample_sizes: at least one size required");
    for (auto n : sample_sizes) {
        if (n < 1) throw InvalidInput("sample_sizes: sizes must be positive");
    }
    if (replications < 2) throw InvalidInput("replications: R >= 2 required");
    if (map.input_size() != generator.raw_dim()) {
        throw InvalidInput("feature_map: input size " + std::to_string(map.input_size()) +
                           " does not match generator dimension " + std::to_string(generator.raw_dim()));
    }
    if (strata && !map.is_discrete()) throw InvalidInput("strata: per-stratum output needs a discrete feature map");
    for (std::size_t i = 0; i < policies.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (policies[i].name == policies[j].name) throw InvalidInput("policies: duplicate name '" + policies[i].name + "'");
        }
    }
    for (std::size_t i = 0; i < additional.size(); ++i) {
        if (additional[i].name.empty()) throw InvalidInput("additional: every covariate needs a name");
    }
}

const CellSummary& ExperimentResult::cell(const std::string& p, std::int64_t n, const std::string& stat) const {
    for (const auto& c : cells) {
        if (c.policy == p && c.n == n && c.stat == stat) return c;
    }
    throw InvalidInput("no cell (" + p + ", " + std::to_string(n) + ", " + stat + ")");
}

Vec ExperimentResult::column(const std::string& p, std::int64_t n, const std::string& stat) const {
    auto pi = std::find(policies.begin(), policies.end(), p);
    auto ni = std::find(sample_sizes.begin(), sample_sizes.end(), n);
    auto si = std::find(stat_names.begin(), stat_names.end(), stat);
    if (pi == policies.end() || ni == sample_sizes.end() || si == stat_names.end()) {
        throw InvalidInput("no column (" + p + ", " + std::to_string(n) + ", " + stat + ")");
    }
    return values[static_cast<std::size_t>(pi - policies.begin())][static_cast<std::size_t>(ni - sample_sizes.begin())]
        .col(si - stat_names.begin());
}

unsigned default_threads() {
    if (const char* env = std::getenv("CAR_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<policy::PolicySpec> resolve_policies(const ExperimentSpec& spec, std::vector<policy::ParameterMatrix>* oracle) {
    std::vector<policy::PolicySpec> out = spec.policies;
    if (oracle) oracle->assign(out.size(), policy::ParameterMatrix());
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto& p = out[i];
        if (p.kind == policy::PolicyKind::oracle && !p.fixed_theta) {
            p.fixed_theta = oracle_parameter(spec.generator, spec.map, p.alpha, p.oracle_mc, spec.base_seed).theta;
        }
        if (oracle && p.fixed_theta) (*oracle)[i] = *p.fixed_theta;
    }
    return out;
}

namespace {

struct Layout {
    Eigen::Index d = 0;
    Eigen::Index additional = 0;
    Eigen::Index strata = 0;
    Eigen::Index total() const { return d + additional + 1 + strata; }
};

void run_one(const ExperimentSpec& spec, const engine::TrialConfig& config, const Layout& layout,
             const std::vector<std::int64_t>& sizes_sorted, const std::vector<std::size_t>& size_slot,
             std::uint64_t r, std::vector<Mat>& out) {
    engine::TrialState state(config);
    RngStream cov(spec.base_seed ^ kCovariateSalt, r);
    RngStream noise(spec.base_seed ^ kNoiseSalt, r);
    Vec ysum = Vec::Zero(layout.additional);
    const std::int64_t n_max = sizes_sorted.back();
    std::size_t next = 0;
    const double rho = spec.rho;
    for (std::int64_t i = 0; i < n_max; ++i) {
        Unit unit = spec.generator.draw(cov, i);
        Vec x = maps::apply_map(spec.map, unit.raw);
        const Assignment a = state.allocate(unit.raw, x);
        const double w = static_cast<double>(as_int(a.arm)) - rho;
        for (Eigen::Index k = 0; k < layout.additional; ++k) {
            const auto& add = spec.additional[static_cast<std::size_t>(k)];
            const double z = add.noise_sd > 0.0 ? noise.normal() : 0.0;
            ysum[k] += w * add.value(x, unit.extra, z);
        }
        while (next < sizes_sorted.size() && sizes_sorted[next] == i + 1) {
            Mat& m = out[size_slot[next]];
            const auto row = static_cast<Eigen::Index>(r);
            const auto& imb = state.imbalance();
            m.row(row).head(layout.d) = imb.lambda.transpose();
            m.row(row).segment(layout.d, layout.additional) = ysum.transpose();
            m(row, layout.d + layout.additional) = static_cast<double>(imb.n_treat) - rho * static_cast<double>(imb.n);
            for (Eigen::Index s = 0; s < layout.strata; ++s) {
                m(row, layout.d + layout.additional + 1 + s) =
                    state.margins().stratum_imbalance(static_cast<std::size_t>(s), rho);
            }
            ++next;
        }
    }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, unsigned threads) {
    spec.validate();
    ExperimentResult result;
    const auto policies = resolve_policies(spec, &result.oracle_theta);
    Layout layout;
    layout.d = static_cast<Eigen::Index>(spec.map.output_dim());
    layout.additional = static_cast<Eigen::Index>(spec.additional.size());
    layout.strata = spec.strata ? static_cast<Eigen::Index>(spec.map.scheme.num_strata()) : 0;

    for (Eigen::Index i = 0; i < layout.d; ++i) result.stat_names.push_back("lambda_" + std::to_string(i + 1));
    for (const auto& a : spec.additional) result.stat_names.push_back(a.name);
    result.stat_names.push_back("total");
    for (Eigen::Index s = 0; s < layout.strata; ++s) {
        result.stat_names.push_back("stratum_" + spec.map.scheme.stratum_label(static_cast<std::size_t>(s)));
    }

    std::vector<engine::TrialConfig> configs;
    for (const auto& p : policies) {
        engine::TrialConfig c;
        c.name = p.name;
        c.rho = spec.rho;
        c.policy = p;
        c.feature_map = spec.map;
        c.seed = spec.base_seed;
        c.finalize();
        configs.push_back(std::move(c));
        result.policies.push_back(p.name);
    }

    result.sample_sizes = spec.sample_sizes;
    std::vector<std::size_t> order(spec.sample_sizes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return spec.sample_sizes[a] < spec.sample_sizes[b]; });
    std::vector<std::int64_t> sorted;
    for (auto i : order) sorted.push_back(spec.sample_sizes[i]);

    const auto R = static_cast<Eigen::Index>(spec.replications);
    result.values.assign(policies.size(), std::vector<Mat>(spec.sample_sizes.size(), Mat::Zero(R, layout.total())));

    if (threads == 0) threads = default_threads();
    threads = std::min<unsigned>(threads, static_cast<unsigned>(spec.replications));
    std::atomic<std::uint64_t> cursor{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    // stream differs per replication, so each worker owns a copy of the configs.
    std::vector<std::thread> pool;
    auto worker_with_copies = [&] {
        auto local = configs;
        for (;;) {
            const std::uint64_t r = cursor.fetch_add(1);
            if (r >= spec.replications || failed.load()) return;
            try {
                for (std::size_t p = 0; p < local.size(); ++p) {
                    local[p].stream = r;
                    run_one(spec, local[p], layout, sorted, order, r, result.values[p]);
                }
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                failed = true;
                return;
            }
        }
    };
    if (threads <= 1) {
        worker_with_copies();
    } else {
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker_with_copies);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);

    for (std::size_t p = 0; p < policies.size(); ++p) {
        for (std::size_t s = 0; s < spec.sample_sizes.size(); ++s) {
            const Mat& m = result.values[p][s];
            for (Eigen::Index k = 0; k < m.cols(); ++k) {
                const auto st = shift_statistic(m.col(k));
                result.cells.push_back({policies[p].name, spec.sample_sizes[s],
                                        result.stat_names[static_cast<std::size_t>(k)], st.mean, st.sd, st.se});
            }
        }
    }
    return result;
}

std::string to_csv(const ExperimentResult& result) {
    std::ostringstream out;
    out << "policy,n,stat,mean,sd\n";
    out << std::setprecision(10);
    for (const auto& c : result.cells) {
        out << c.policy << ',' << c.n << ',' << c.stat << ',' << c.mean << ',' << c.sd << '\n';
    }
    return out.str();
}

ExperimentResult run_discrete_shift_study(ExperimentSpec spec, unsigned threads) {
    if (spec.generator.kind() != GeneratorKind::appendixB_discrete) {
        throw InvalidInput("generator: discrete shift study needs the discrete generator");
    }
    spec.strata = true;
    ExperimentResult full = run_experiment(spec, threads);
    ExperimentResult out;
    out.policies = full.policies;
    out.sample_sizes = full.sample_sizes;
    out.oracle_theta = full.oracle_theta;
    std::vector<Eigen::Index> keep;
    for (std::size_t k = 0; k < full.stat_names.size(); ++k) {
        if (full.stat_names[k].rfind("stratum_", 0) == 0 || full.stat_names[k] == "total") {
            keep.push_back(static_cast<Eigen::Index>(k));
            out.stat_names.push_back(full.stat_names[k]);
        }
    }
    out.values.resize(full.values.size());
    for (std::size_t p = 0; p < full.values.size(); ++p) {
        for (const Mat& m : full.values[p]) {
            Mat sub(m.rows(), static_cast<Eigen::Index>(keep.size()));
            for (std::size_t j = 0; j < keep.size(); ++j) sub.col(static_cast<Eigen::Index>(j)) = m.col(keep[j]);
            out.values[p].push_back(std::move(sub));
        }
    }
    for (const auto& c : full.cells) {
        if (std::find(out.stat_names.begin(), out.stat_names.end(), c.stat) != out.stat_names.end()) {
            out.cells.push_back(c);
        }
    }
    return out;
}

ShiftStatistic shift_statistic(const Vec& v) {
    if (v.size() < 2) throw InvalidInput("shift_statistic: at least 2 replications required");
    ShiftStatistic s;
    const double n = static_cast<double>(v.size());
    s.mean = v.mean();
    s.sd = std::sqrt((v.array() - s.mean).square().sum() / (n - 1.0));
    s.se = s.sd / std::sqrt(n);
    return s;
}

NormalityVerdict normality_check(const Vec& v) {
    if (v.size() < 4) throw InvalidInput("normality_check: at least 4 values required");
    const double n = static_cast<double>(v.size());
    const double mean = v.mean();
    const Eigen::ArrayXd c = v.array() - mean;
    const double m2 = c.square().sum() / n;
    NormalityVerdict out;
    if (m2 == 0.0) return out;  // constant sample carries no shape information
    out.skewness = c.cube().sum() / n / std::pow(m2, 1.5);
    out.excess_kurtosis = c.square().square().sum() / n / (m2 * m2) - 3.0;
    out.pass = std::abs(out.skewness) < kSkewLimit && std::abs(out.excess_kurtosis) < kKurtosisLimit;
    return out;
}

}  // namespace car::sim
