// service.hpp
#pragma once
#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "car/engine.hpp"

namespace httplib {
class Server;
}

namespace car::service {

using nlohmann::json;

inline constexpr const char* kVersion = "1.0.0";

// HTTP-mappable failure: status, machine code, human message, JSON path.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, std::string code, const std::string& message, std::string path = "")
        : std::runtime_error(message), status_(status), code_(std::move(code)), path_(std::move(path)) {}
    int status() const { return status_; }
    const std::string& code() const { return code_; }
    const std::string& path() const { return path_; }
    json body() const { return {{"code", code_}, {"message", what()}, {"path", path_}}; }

private:
    int status_;
    std::string code_;
    std::string path_;
};

// Trials, their state and their on-disk logs. Every public call is safe to
// invoke from concurrent request threads.
class TrialStore {
public:
    explicit TrialStore(std::string data_dir);
    ~TrialStore();
    TrialStore(const TrialStore&) = delete;
    TrialStore& operator=(const TrialStore&) = delete;

    json create(const json& body);
    json list() const;
    json snapshot(const std::string& id) const;
    json enroll(const std::string& id, const json& body);
    json whatif(const std::string& id, const json& body) const;
    // JSONL page of events with unit_index >= from, at most limit lines.
    std::string events(const std::string& id, std::int64_t from, std::int64_t limit) const;

private:
    struct Trial;
    std::shared_ptr<Trial> find(const std::string& id) const;
    void write_index() const;
    void load();

    std::string dir_;
    mutable std::shared_mutex registry_mutex_;
    std::map<std::string, std::shared_ptr<Trial>> trials_;
    std::uint64_t next_id_ = 1;
};

struct ServiceOptions {
    std::string data_dir = "data";
    std::string token;  // empty disables auth; defaults from CAR_TOKEN in the CLI
    std::string cors_origin = "*";
};

class Server {
public:
    explicit Server(ServiceOptions options);
    ~Server();

    // Binds; port 0 picks a free port. Returns the bound port or -1.
    int bind(const std::string& host, int port);
    // Blocks serving requests until stop().
    bool listen_after_bind();
    void stop();

private:
    void routes();

    ServiceOptions options_;
    std::unique_ptr<TrialStore> store_;
    std::unique_ptr<httplib::Server> http_;
};

}  // namespace car::service
