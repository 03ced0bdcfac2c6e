#pragma once

// HTTP/JSON measurement interface and deployment policy.

#include "saami/clock.hpp"
#include "saami/probeengine.hpp"
#include "saami/session.hpp"

#include <json.hpp>

#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

namespace saami::api {

using ordered_json = nlohmann::ordered_json;

enum class TaskKind { Ping, Traceroute, RouterIdQuery, RouterIdServe };

const char* task_kind_name(TaskKind k);
std::optional<TaskKind> parse_task_kind(const std::string& s);

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PolicyConfig {
    double max_probe_rate = 1000.0;  // probes per second
    double bucket_depth = 0.0;       // 0 means one second of max_probe_rate
    std::set<TaskKind> allowed_tasks{TaskKind::Ping, TaskKind::Traceroute, TaskKind::RouterIdQuery,
                                     TaskKind::RouterIdServe};
    std::optional<std::string> auth_token;

    double depth() const { return bucket_depth > 0 ? bucket_depth : max_probe_rate; }
    void validate() const;
};

class TokenBucket {
public:
    TokenBucket(double rate, double depth, const Clock& clock);

    bool try_take(double n);
    void refund(double n);
    double available();

private:
    void refill();

    double rate_;
    double depth_;
    double tokens_;
    TimePoint last_;
    const Clock& clock_;
};

enum class Decision { Admit, Forbidden, Unauthorized, RateLimited };

class PolicyEnforcer {
public:
    PolicyEnforcer(PolicyConfig config, const Clock& clock);

    bool authorized(const std::optional<std::string>& authorization_header) const;
    bool allows(TaskKind kind) const;
    // Kind and rate admission for `probes` packets; tokens are taken on Admit.
    Decision admit(TaskKind kind, double probes);
    void refund(double probes);

    const PolicyConfig& config() const { return config_; }

private:
    PolicyConfig config_;
    std::mutex mu_;
    TokenBucket bucket_;
};

struct Response {
    int status = 200;
    std::string body;
};

// JSON forms of the engine dumps, keyed by ICMP identifier.
ordered_json ping_dump_json(const probe::PingDump& d);
ordered_json traceroute_dump_json(const probe::TracerouteDump& d);
ordered_json router_id_dump_json(const probe::RouterIdDump& d);

class MeasurementApi {
public:
    MeasurementApi(probe::ProbeEngine& engine, PolicyEnforcer& policy);

    Response handle(const std::string& method, const std::string& path, const std::string& body,
                    const std::optional<std::string>& authorization = std::nullopt);

private:
    Response put_ping(const std::string& body);
    Response put_traceroute(const std::string& body);
    Response put_router_id_query(const std::string& body);
    Response get_router_id_config() const;
    Response put_router_id_config(const std::string& body);
    Response status() const;
    template <class Fn>
    Response run_task(TaskKind kind, double probes, Fn&& start);

    probe::ProbeEngine& engine_;
    PolicyEnforcer& policy_;
};

// ---------------------------------------------------------------- controller process

struct ControllerConfig {
    std::string openflow_address = "0.0.0.0";
    std::uint16_t openflow_port = 6633;
    std::string api_address = "0.0.0.0";
    std::uint16_t api_port = 8080;
    probe::EngineConfig engine;
    PolicyConfig policy;
    std::optional<pktlab::RouterIdentity> router_identity;
    std::optional<Ipv4Address> next_hop_ip;
};

// key = value lines, '#' comments. Throws ConfigError.
ControllerConfig load_controller_config(std::istream& in);
ControllerConfig load_controller_config_file(const std::string& path);

class HttpServer;

// Listener + engine + HTTP front end running in real time.
class Controller {
public:
    explicit Controller(ControllerConfig config);
    ~Controller();

    // Binds both listeners (port 0 picks a free port) and starts serving.
    void start();
    void stop();

    std::uint16_t openflow_port() const { return of_port_; }
    std::uint16_t api_port() const { return api_port_; }
    probe::ProbeEngine& engine() { return *engine_; }
    MeasurementApi& api() { return *api_; }
    // Blocks until a switch session is attached or the timeout expires.
    bool wait_for_switch(Duration timeout);

private:
    ControllerConfig config_;
    SteadyClock clock_;
    std::unique_ptr<probe::ProbeEngine> engine_;
    std::unique_ptr<PolicyEnforcer> policy_;
    std::unique_ptr<MeasurementApi> api_;
    std::unique_ptr<session::OpenFlowListener> listener_;
    std::unique_ptr<HttpServer> http_;
    std::uint16_t of_port_ = 0;
    std::uint16_t api_port_ = 0;
    std::mutex mu_;
    std::condition_variable cv_;
    bool attached_ = false;
};

} // namespace saami::api
