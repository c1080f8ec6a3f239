#include "car/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "car/config.hpp"

namespace car::service {

namespace fs = std::filesystem;

namespace {

constexpr const char* kIndexFile = "trials.json";

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void fsync_path(const fs::path& p, int flags) {
    const int fd = ::open(p.c_str(), flags);
    if (fd < 0) return;
    ::fsync(fd);
    ::close(fd);
}

// tmp + fsync + rename so a crash leaves either the old or the new file.
void write_file_atomic(const fs::path& p, const std::string& content) {
    const fs::path tmp = p.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw std::runtime_error("cannot write " + tmp.string() + ": " + std::strerror(errno));
    std::size_t off = 0;
    while (off < content.size()) {
        const ssize_t w = ::write(fd, content.data() + off, content.size() - off);
        if (w < 0) {
            if (errno == EINTR) continue;
            ::close(fd);
            throw std::runtime_error("write failed for " + tmp.string());
        }
        off += static_cast<std::size_t>(w);
    }
    ::fsync(fd);
    ::close(fd);
    fs::rename(tmp, p);
    fsync_path(p.parent_path(), O_RDONLY | O_DIRECTORY);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

maps::RawCovariates parse_record(const json& body) {
    const json* x = &body;
    std::string path;
    if (body.is_object()) {
        if (!body.contains("x")) throw ApiError(400, "invalid_record", "covariate record needs an \"x\" array", "x");
        for (auto it = body.begin(); it != body.end(); ++it) {
            if (it.key() != "x") throw ApiError(400, "invalid_record", "unknown key", it.key());
        }
        x = &body["x"];
        path = "x";
    }
    if (!x->is_array() || x->empty()) throw ApiError(400, "invalid_record", "covariates must be a nonempty array of numbers", path);
    maps::RawCovariates raw;
    for (std::size_t i = 0; i < x->size(); ++i) {
        if (!(*x)[i].is_number()) {
            throw ApiError(400, "invalid_record", "covariates must be numbers", path + "[" + std::to_string(i) + "]");
        }
        raw.push_back((*x)[i].get<double>());
    }
    return raw;
}

json vec_json(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

}  // namespace

struct TrialStore::Trial {
    Trial(std::string id_, std::string name_, std::string created, json cfg, engine::TrialConfig tc)
        : id(std::move(id_)), name(std::move(name_)), created_at(std::move(created)), config(std::move(cfg)),
          state(std::move(tc)) {}
    ~Trial() {
        if (fd >= 0) ::close(fd);
    }

    std::string id, name, created_at;
    json config;
    engine::TrialState state;
    std::vector<std::string> lines;  // logged events, no trailing newline
    int fd = -1;
    mutable std::mutex mu;

    // Appends and fsyncs; only then may the caller publish the new state.
    void append(const std::string& line) {
        std::size_t off = 0;
        while (off < line.size()) {
            const ssize_t w = ::write(fd, line.data() + off, line.size() - off);
            if (w < 0) {
                if (errno == EINTR) continue;
                throw ApiError(500, "io_error", std::string("event log write failed: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(w);
        }
        if (::fsync(fd) != 0) throw ApiError(500, "io_error", "event log fsync failed");
    }

    json snapshot() const {
        json j = engine::snapshot_json(state);
        j["rng_position"] = state.rng().position();
        const std::string hash = hex64(fnv1a(j.dump()));
        j["trial_id"] = id;
        j["name"] = name;
        j["created_at"] = created_at;
        j["config"] = config;
        j["events"] = lines.size();
        j["state_hash"] = hash;
        return j;
    }
};

TrialStore::TrialStore(std::string data_dir) : dir_(std::move(data_dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) throw std::runtime_error("cannot create data directory '" + dir_ + "'");
    const fs::path probe = fs::path(dir_) / ".write_test";
    {
        std::ofstream out(probe);
        if (!out) throw std::runtime_error("data directory '" + dir_ + "' is not writable");
    }
    fs::remove(probe, ec);
    load();
}

TrialStore::~TrialStore() = default;

void TrialStore::load() {
    const fs::path index = fs::path(dir_) / kIndexFile;
    if (!fs::exists(index)) return;
    json idx = json::parse(read_file(index));
    next_id_ = idx.value("next_id", std::uint64_t{1});
    for (const auto& t : idx.at("trials")) {
        const std::string id = t.at("trial_id").get<std::string>();
        const fs::path cfg_path = fs::path(dir_) / (id + ".config.json");
        const fs::path log_path = fs::path(dir_) / (id + ".events.jsonl");
        json cfg = json::parse(read_file(cfg_path));
        auto trial = std::make_shared<Trial>(id, t.at("name").get<std::string>(), t.value("created_at", ""), cfg,
                                             config::parse_trial(cfg));
        std::string content = fs::exists(log_path) ? read_file(log_path) : std::string();
        // A crash mid-append leaves a partial last line; it was never acknowledged.
        const auto last_nl = content.rfind('\n');
        const std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
        if (keep != content.size()) {
            content.resize(keep);
            fs::resize_file(log_path, keep);
        }
        std::istringstream in(content);
        const auto events = engine::read_jsonl(in);
        trial->state = engine::replay(events, trial->state.config());
        std::istringstream lines(content);
        for (std::string line; std::getline(lines, line);) {
            if (!line.empty()) trial->lines.push_back(line);
        }
        trial->fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (trial->fd < 0) throw std::runtime_error("cannot open event log " + log_path.string());
        trials_.emplace(id, std::move(trial));
    }
}

void TrialStore::write_index() const {
    json idx;
    idx["next_id"] = next_id_;
    json list = json::array();
    for (const auto& [id, t] : trials_) list.push_back({{"trial_id", id}, {"name", t->name}, {"created_at", t->created_at}});
    idx["trials"] = list;
    write_file_atomic(fs::path(dir_) / kIndexFile, idx.dump(2) + "\n");
}

std::shared_ptr<TrialStore::Trial> TrialStore::find(const std::string& id) const {
    std::shared_lock lock(registry_mutex_);
    auto it = trials_.find(id);
    if (it == trials_.end()) throw ApiError(404, "not_found", "no trial '" + id + "'");
    return it->second;
}

json TrialStore::create(const json& body) {
    engine::TrialConfig cfg;
    try {
        cfg = config::parse_trial(body);
    } catch (const config::ConfigError& e) {
        throw ApiError(400, "invalid_config", e.what(), e.path());
    }
    std::unique_lock lock(registry_mutex_);
    for (const auto& [id, t] : trials_) {
        if (t->name == cfg.name) throw ApiError(409, "conflict", "a trial named '" + cfg.name + "' already exists", "name");
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "t%06llu", static_cast<unsigned long long>(next_id_));
    const std::string id = buf;
    auto trial = std::make_shared<Trial>(id, cfg.name, engine::utc_timestamp(), body, cfg);
    const fs::path log_path = fs::path(dir_) / (id + ".events.jsonl");
    write_file_atomic(fs::path(dir_) / (id + ".config.json"), body.dump(2) + "\n");
    trial->fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_APPEND, 0644);
    if (trial->fd < 0) throw ApiError(500, "io_error", "cannot create event log");
    ::fsync(trial->fd);
    ++next_id_;
    trials_.emplace(id, trial);
    write_index();
    return {{"trial_id", id}, {"name", cfg.name}};
}

json TrialStore::list() const {
    std::shared_lock lock(registry_mutex_);
    json out = json::array();
    for (const auto& [id, t] : trials_) {
        std::lock_guard tl(t->mu);
        out.push_back({{"trial_id", id},
                       {"name", t->name},
                       {"created_at", t->created_at},
                       {"n", t->state.imbalance().n},
                       {"policy", policy::to_string(t->state.config().policy.kind)}});
    }
    return {{"trials", out}};
}

json TrialStore::snapshot(const std::string& id) const {
    auto t = find(id);
    std::lock_guard lock(t->mu);
    return t->snapshot();
}

json TrialStore::enroll(const std::string& id, const json& body) {
    auto t = find(id);
    const auto raw = parse_record(body);
    std::lock_guard lock(t->mu);
    engine::TrialState next = t->state;
    engine::Enrollment en;
    try {
        en = engine::enroll(next, raw);
    } catch (const InvalidInput& e) {
        throw ApiError(400, "invalid_record", e.what(), body.is_object() ? "x" : "");
    }
    std::string line = engine::event_to_jsonl(en.event);
    t->append(line);
    line.pop_back();
    t->lines.push_back(std::move(line));
    t->state = std::move(next);

    json theta_summary = nullptr;
    if (t->state.has_theta()) {
        const auto& th = t->state.theta();
        json norms = json::array();
        for (Eigen::Index i = 0; i < th.cols(); ++i) norms.push_back(th.col(i).norm());
        theta_summary = {{"epsilon", t->state.config().policy.epsilon == policy::EpsilonMode::fixed_zero
                                         ? 0.0
                                         : policy::epsilon_of_theta(th)},
                         {"column_norms", norms}};
    }
    return {{"unit_index", en.event.unit_index},
            {"arm", as_int(en.event.arm)},
            {"prob", en.event.prob},
            {"u", en.event.u},
            {"lambda", vec_json(en.event.lambda)},
            {"theta_summary", theta_summary},
            {"ts", en.event.ts}};
}

json TrialStore::whatif(const std::string& id, const json& body) const {
    auto t = find(id);
    const auto raw = parse_record(body);
    std::lock_guard lock(t->mu);
    try {
        const auto w = engine::whatif(t->state, raw);
        return {{"prob_treatment", w.prob_treatment},
                {"lambda_if_treat", vec_json(w.lambda_if_treat)},
                {"lambda_if_control", vec_json(w.lambda_if_control)}};
    } catch (const InvalidInput& e) {
        throw ApiError(400, "invalid_record", e.what(), body.is_object() ? "x" : "");
    }
}

std::string TrialStore::events(const std::string& id, std::int64_t from, std::int64_t limit) const {
    if (from < 0) throw ApiError(400, "bad_request", "from must be nonnegative", "from");
    if (limit < 1) throw ApiError(400, "bad_request", "limit must be positive", "limit");
    auto t = find(id);
    std::lock_guard lock(t->mu);
    std::string out;
    const auto n = static_cast<std::int64_t>(t->lines.size());
    for (std::int64_t k = from; k < n && k - from < limit; ++k) {
        out += t->lines[static_cast<std::size_t>(k)];
        out += '\n';
    }
    return out;
}

Server::Server(ServiceOptions options)
    : options_(std::move(options)),
      store_(std::make_unique<TrialStore>(options_.data_dir)),
      http_(std::make_unique<httplib::Server>()) {
    routes();
}

Server::~Server() = default;

int Server::bind(const std::string& host, int port) {
    if (port == 0) return http_->bind_to_any_port(host);
    return http_->bind_to_port(host, port) ? port : -1;
}

bool Server::listen_after_bind() { return http_->listen_after_bind(); }

void Server::stop() { http_->stop(); }

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
    try {
        return json::parse(req.body);
    } catch (const json::parse_error& e) {
        throw ApiError(400, "invalid_json", std::string("request body is not valid JSON: ") + e.what());
    }
}

std::int64_t query_int(const httplib::Request& req, const char* key, std::int64_t def) {
    if (!req.has_param(key)) return def;
    const std::string v = req.get_param_value(key);
    try {
        std::size_t used = 0;
        const long long n = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ApiError(400, "bad_request", std::string(key) + " must be an integer", key);
    }
}

template <class F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const ApiError& e) {
            send_json(res, e.status(), e.body());
        } catch (const config::ConfigError& e) {
            send_json(res, 400, {{"code", "invalid_config"}, {"message", e.what()}, {"path", e.path()}});
        } catch (const std::exception& e) {
            send_json(res, 500, {{"code", "internal"}, {"message", e.what()}, {"path", ""}});
        }
    };
}

}  // namespace

void Server::routes() {
    auto& s = *http_;
    const std::string origin = options_.cors_origin;
    const std::string token = options_.token;
    s.set_pre_routing_handler([origin, token](const httplib::Request& req, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", origin);
        res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        if (req.method == "OPTIONS") {
            res.status = 204;
            return httplib::Server::HandlerResponse::Handled;
        }
        if (!token.empty() && req.path != "/health" && req.get_header_value("Authorization") != "Bearer " + token) {
            send_json(res, 401, {{"code", "unauthorized"}, {"message", "missing or invalid bearer token"}, {"path", ""}});
            return httplib::Server::HandlerResponse::Handled;
        }
        return httplib::Server::HandlerResponse::Unhandled;
    });

    s.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"status", "ok"}, {"version", kVersion}});
    }));
    s.Post("/trials", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send_json(res, 201, store_->create(parse_body(req)));
    }));
    s.Get("/trials", guarded([this](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, store_->list());
    }));
    s.Get(R"(/trials/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send_json(res, 200, store_->snapshot(req.matches[1]));
    }));
    s.Post(R"(/trials/([^/]+)/units)", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send_json(res, 200, store_->enroll(req.matches[1], parse_body(req)));
    }));
    s.Post(R"(/trials/([^/]+)/whatif)", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send_json(res, 200, store_->whatif(req.matches[1], parse_body(req)));
    }));
    s.Get(R"(/trials/([^/]+)/events)", guarded([this](const httplib::Request& req, httplib::Response& res) {
        const auto from = query_int(req, "from", 0);
        const auto limit = query_int(req, "limit", std::numeric_limits<std::int64_t>::max());
        res.status = 200;
        res.set_content(store_->events(req.matches[1], from, limit), "application/x-ndjson");
    }));
    s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.status == 404 && res.body.empty()) {
            send_json(res, 404, {{"code", "not_found"}, {"message", "no such endpoint"}, {"path", ""}});
        }
    });
}

}  // namespace car::service
