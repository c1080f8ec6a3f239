// car: simulate, diagnose, redesign, allocate and serve.
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "car/config.hpp"
#include "car/diagnostics.hpp"
#include "car/redesign.hpp"
#include "car/service.hpp"
#include "car/simlab.hpp"

namespace {

using namespace car;
using nlohmann::json;

// Exit codes: 0 ok, 1 runtime failure, 2 config error.
struct Failure {
    int code;
    std::string reason;
};

std::string one_line(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

void write_output(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Failure{1, "cannot write '" + path + "'"};
    out << content;
}

config::ExperimentConfig load(const std::string& path, std::int64_t reps_override, std::optional<std::uint64_t> seed) {
    auto cfg = config::load_experiment(path);
    if (reps_override > 0) {
        if (reps_override < 2) throw config::ConfigError("replications", "replications must be at least 2");
        cfg.experiment.replications = static_cast<std::size_t>(reps_override);
    }
    if (seed) cfg.experiment.base_seed = *seed;
    if (cfg.redesign) {
        cfg.redesign->experiment = cfg.experiment;
        // relative CSV paths resolve against the config file's directory
        std::filesystem::path p(cfg.redesign->csv_path);
        if (p.is_relative() && !std::filesystem::exists(p)) {
            cfg.redesign->csv_path = (std::filesystem::path(path).parent_path() / p).string();
        }
    }
    return cfg;
}

sim::ExperimentResult run(const config::ExperimentConfig& cfg, unsigned threads) {
    if (cfg.redesign) return sim::redesign_from_csv(*cfg.redesign, threads);
    return sim::run_experiment(cfg.experiment, threads);
}

// Generator and map as the diagnostics see them; CSV data is resampled.
std::pair<sim::CovariateGenerator, maps::FeatureMap> diagnostic_model(const config::ExperimentConfig& cfg) {
    if (!cfg.redesign) return {cfg.experiment.generator, cfg.experiment.map};
    auto units = sim::load_units(sim::read_csv_file(cfg.redesign->csv_path), *cfg.redesign);
    return {sim::CovariateGenerator::resample(std::move(units)), maps::FeatureMap::identity(cfg.redesign->columns.size())};
}

json result_json(const sim::ExperimentResult& r) {
    json cells = json::array();
    for (const auto& c : r.cells) {
        cells.push_back({{"policy", c.policy}, {"n", c.n}, {"stat", c.stat}, {"mean", c.mean}, {"sd", c.sd}, {"se", c.se}});
    }
    json theta = json::object();
    for (std::size_t p = 0; p < r.policies.size(); ++p) {
        if (r.oracle_theta[p].size() > 0) theta[r.policies[p]] = config::theta_to_json(r.oracle_theta[p]);
    }
    return {{"cells", cells}, {"oracle_theta", theta}};
}

bool selected(const std::vector<std::string>& names, const std::string& name) {
    return names.empty() || std::find(names.begin(), names.end(), name) != names.end();
}

int cmd_simulate(const std::string& path, const std::string& out, std::int64_t reps, std::optional<std::uint64_t> seed,
                 unsigned threads, const std::string& json_out) {
    const auto cfg = load(path, reps, seed);
    const auto result = run(cfg, threads);
    write_output(out.empty() ? cfg.csv_out : out, sim::to_csv(result));
    const std::string jpath = json_out.empty() ? cfg.json_out : json_out;
    if (!jpath.empty()) write_output(jpath, result_json(result).dump(2) + "\n");
    return 0;
}

int cmd_diagnose(const std::string& path, const std::string& mode, const std::string& out, std::int64_t reps,
                 std::optional<std::uint64_t> seed, unsigned threads) {
    const auto cfg = load(path, reps, seed);
    const auto& e = cfg.experiment;
    const auto& d = cfg.diagnostics;
    json report{{"mode", mode}, {"config", e.name}, {"rho", e.rho}};
    json results = json::array();
    if (mode == "drift" || mode == "rhotilde") {
        const auto [gen, map] = diagnostic_model(cfg);
        for (const auto& p : e.policies) {
            if (!selected(mode == "drift" ? d.drift_policies : d.rhotilde_policies, p.name)) continue;
            sim::FrozenPolicy frozen(p, e.rho, map, gen, std::nullopt, e.base_seed);
            json entry{{"policy", p.name}, {"kind", policy::to_string(p.kind)}};
            if (mode == "drift") {
                const auto rep = sim::drift_check(frozen, gen, d.drift);
                json pts = json::array();
                for (const auto& pt : rep.points) {
                    pts.push_back({{"radius", pt.radius}, {"max_drift", pt.max_drift}, {"se", pt.se}, {"negative", pt.negative}});
                }
                entry["span_dim"] = rep.span_dim;
                entry["points"] = pts;
                entry["negative_at_max_radius"] = !rep.points.empty() && rep.points.back().negative;
            } else {
                auto probes = d.probes;
                if (probes.empty()) probes.push_back(maps::RawCovariates(gen.raw_dim(), 1.0));
                const auto est = sim::rho_tilde_estimate(frozen, gen, probes, d.rhotilde);
                json pr = json::array();
                for (const auto& q : est) {
                    pr.push_back({{"x", q.x}, {"rho_tilde", q.estimate}, {"se", q.se}, {"deviation", q.estimate - e.rho}});
                }
                entry["probes"] = pr;
            }
            results.push_back(entry);
        }
    } else if (mode == "normality") {
        const auto result = run(cfg, threads);
        const std::int64_t n = d.normality_n > 0 ? d.normality_n
                                                 : *std::max_element(result.sample_sizes.begin(), result.sample_sizes.end());
        std::vector<std::string> stats;
        if (!d.normality_stat.empty()) {
            stats.push_back(d.normality_stat);
        } else {
            for (const auto& a : e.additional) stats.push_back(a.name);
            if (stats.empty()) stats.push_back("lambda_1");
        }
        for (const auto& p : result.policies) {
            if (!d.normality_policy.empty() && d.normality_policy != p) continue;
            for (const auto& st : stats) {
                const auto v = sim::normality_check(result.column(p, n, st));
                results.push_back({{"policy", p},
                                   {"n", n},
                                   {"stat", st},
                                   {"skewness", v.skewness},
                                   {"excess_kurtosis", v.excess_kurtosis},
                                   {"pass", v.pass}});
            }
        }
    } else {
        throw Failure{2, "--mode must be drift, rhotilde or normality"};
    }
    report["results"] = results;
    write_output(out, report.dump(2) + "\n");
    return 0;
}

maps::RawCovariates record_of(const json& j, std::optional<double>& u) {
    const json* x = &j;
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() != "x" && it.key() != "u") throw InvalidInput("unknown key '" + it.key() + "'");
        }
        if (!j.contains("x")) throw InvalidInput("record needs an \"x\" array");
        if (j.contains("u")) {
            if (!j["u"].is_number()) throw InvalidInput("u must be a number");
            u = j["u"].get<double>();
            if (!(*u >= 0.0 && *u < 1.0)) throw InvalidInput("u must lie in [0,1)");
        }
        x = &j["x"];
    }
    if (!x->is_array() || x->empty()) throw InvalidInput("covariates must be a nonempty array of numbers");
    maps::RawCovariates raw;
    for (const auto& v : *x) {
        if (!v.is_number()) throw InvalidInput("covariates must be numbers");
        raw.push_back(v.get<double>());
    }
    return raw;
}

int cmd_allocate(const std::string& path, const std::string& log_path) {
    std::ifstream in(path);
    if (!in) throw config::ConfigError("", "cannot read trial config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw config::ConfigError("", std::string("invalid JSON: ") + e.what());
    }
    const auto trial = config::parse_trial(j);
    engine::TrialState state(trial);
    std::ofstream log;
    if (!log_path.empty()) {
        if (std::filesystem::exists(log_path)) {
            std::ifstream existing(log_path);
            state = engine::replay(engine::read_jsonl(existing), trial);
        }
        log.open(log_path, std::ios::app);
        if (!log) throw Failure{1, "cannot open log '" + log_path + "'"};
    }
    std::string line;
    while (std::getline(std::cin, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            std::optional<double> u;
            const auto raw = record_of(json::parse(line), u);
            engine::TrialState next = state;
            engine::Enrollment en;
            if (u) {
                const Vec x = next.map(raw);
                en.event.unit_index = next.imbalance().n;
                en.assignment = next.allocate(raw, x, *u);
                next.skip_draws(1);
                en.event.x_origin = raw;
                en.event.x = x;
                en.event.prob = en.assignment.prob_used;
                en.event.u = *u;
                en.event.arm = en.assignment.arm;
                en.event.lambda = next.imbalance().lambda;
                en.event.ts = engine::utc_timestamp();
            } else {
                en = engine::enroll(next, raw);
            }
            if (log.is_open()) {
                log << engine::event_to_jsonl(en.event);
                log.flush();
            }
            state = std::move(next);
            json o{{"unit_index", en.event.unit_index},
                   {"arm", as_int(en.event.arm)},
                   {"prob", en.event.prob},
                   {"u", en.event.u},
                   {"lambda", std::vector<double>(en.event.lambda.data(), en.event.lambda.data() + en.event.lambda.size())}};
            std::cout << o.dump() << std::endl;
        } catch (const std::exception& e) {
            std::cout << json{{"error", one_line(e.what())}}.dump() << std::endl;
        }
    }
    return 0;
}

service::Server* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

int cmd_serve(const std::string& host, int port, const std::string& data_dir) {
    service::ServiceOptions opt;
    opt.data_dir = data_dir;
    if (const char* tok = std::getenv("CAR_TOKEN")) opt.token = tok;
    service::Server server(opt);
    const int bound = server.bind(host, port);
    if (bound < 0) throw Failure{1, "cannot bind " + host + ":" + std::to_string(port)};
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << json{{"listening", host}, {"port", bound}, {"version", service::kVersion}}.dump() << std::endl;
    server.listen_after_bind();
    g_server = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"covariate-adaptive randomization engine"};
    app.require_subcommand(1);

    std::string cfg_path, out, json_out, mode, log_path, data_dir = "data", host = "127.0.0.1";
    std::int64_t reps = 0;
    std::uint64_t seed_value = 0;
    unsigned threads = 0;
    int port = 8080;

    auto* sim_cmd = app.add_subcommand("simulate", "run a Monte Carlo experiment and write the CSV table");
    sim_cmd->add_option("config", cfg_path, "experiment JSON")->required();
    sim_cmd->add_option("--out", out, "CSV output path (default: config output.csv or stdout)");
    sim_cmd->add_option("--json", json_out, "JSON output with standard errors and oracle theta");
    auto* sim_reps = sim_cmd->add_option("--reps-override", reps, "replication count override");
    auto* sim_seed = sim_cmd->add_option("--seed", seed_value, "base seed override");
    sim_cmd->add_option("--threads", threads, "worker threads (default CAR_THREADS or all cores)");

    auto* red_cmd = app.add_subcommand("redesign", "re-randomize units from a CSV-backed config");
    red_cmd->add_option("config", cfg_path, "experiment JSON with a csv section")->required();
    red_cmd->add_option("--out", out, "CSV output path");
    red_cmd->add_option("--json", json_out, "JSON output path");
    auto* red_reps = red_cmd->add_option("--reps-override", reps, "replication count override");
    auto* red_seed = red_cmd->add_option("--seed", seed_value, "base seed override");
    red_cmd->add_option("--threads", threads, "worker threads");

    auto* diag_cmd = app.add_subcommand("diagnose", "drift, rho-tilde or normality diagnostics as JSON");
    diag_cmd->add_option("config", cfg_path, "experiment JSON")->required();
    diag_cmd->add_option("--mode", mode, "drift | rhotilde | normality")->required();
    diag_cmd->add_option("--out", out, "report path (default stdout)");
    auto* diag_reps = diag_cmd->add_option("--reps-override", reps, "replication count override (normality)");
    auto* diag_seed = diag_cmd->add_option("--seed", seed_value, "base seed override");
    diag_cmd->add_option("--threads", threads, "worker threads");

    auto* alloc_cmd = app.add_subcommand("allocate", "allocate units read as JSON lines from stdin");
    alloc_cmd->add_option("trial_config", cfg_path, "trial JSON")->required();
    alloc_cmd->add_option("--log", log_path, "event log (JSONL); an existing log is replayed and extended");

    auto* serve_cmd = app.add_subcommand("serve", "run the HTTP service");
    serve_cmd->add_option("--port", port, "TCP port (0 picks a free one)");
    serve_cmd->add_option("--host", host, "bind address");
    serve_cmd->add_option("--data-dir", data_dir, "directory for trial logs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: usage: " << one_line(e.what()) << "\n";
        return 2;
    }

    auto seed_of = [&](CLI::Option* opt) -> std::optional<std::uint64_t> {
        if (opt->count() > 0) return seed_value;
        return std::nullopt;
    };
    try {
        if (*sim_cmd) return cmd_simulate(cfg_path, out, sim_reps->count() ? reps : 0, seed_of(sim_seed), threads, json_out);
        if (*red_cmd) {
            const auto cfg = load(cfg_path, 0, std::nullopt);
            if (!cfg.redesign) throw config::ConfigError("csv", "redesign needs a csv section");
            return cmd_simulate(cfg_path, out, red_reps->count() ? reps : 0, seed_of(red_seed), threads, json_out);
        }
        if (*diag_cmd) return cmd_diagnose(cfg_path, mode, out, diag_reps->count() ? reps : 0, seed_of(diag_seed), threads);
        if (*alloc_cmd) return cmd_allocate(cfg_path, log_path);
        if (*serve_cmd) return cmd_serve(host, port, data_dir);
    } catch (const config::ConfigError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const Failure& f) {
        std::cerr << "error: " << one_line(f.reason) << "\n";
        return f.code;
    } catch (const InvalidInput& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}
