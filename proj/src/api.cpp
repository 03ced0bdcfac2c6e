#include "saami/api.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

namespace saami::api {

namespace {

using json = nlohmann::json;

ordered_json error_body(const std::string& message)
{
    ordered_json j;
    j["error"] = message;
    return j;
}

Response error(int status, const std::string& message) { return {status, error_body(message).dump()}; }

ordered_json opt_time(const std::optional<TimePoint>& t)
{
    return t ? ordered_json(to_us(*t)) : ordered_json(nullptr);
}

ordered_json opt_ip(const std::optional<Ipv4Address>& a)
{
    return a ? ordered_json(a->to_string()) : ordered_json(nullptr);
}

std::optional<std::uint32_t> port_field(const json& j)
{
    auto it = j.find("out_port");
    if (it == j.end() || it->is_null())
        return std::nullopt;
    if (!it->is_number_unsigned() || it->get<std::uint64_t>() > 0xffffff00ULL)
        throw probe::InvalidTask("out_port must be a port number");
    return static_cast<std::uint32_t>(it->get<std::uint64_t>());
}

Ipv4Address target_field(const json& j)
{
    auto it = j.find("tgt");
    if (it == j.end() || !it->is_string())
        throw probe::InvalidTask("tgt must be an IPv4 address string");
    auto ip = Ipv4Address::parse(it->get<std::string>());
    if (!ip)
        throw probe::InvalidTask("tgt is not a valid IPv4 address");
    return *ip;
}

std::uint64_t positive_field(const json& j, const char* key)
{
    auto it = j.find(key);
    if (it == j.end() || !it->is_number_integer() || it->get<std::int64_t>() < 1)
        throw probe::InvalidTask(std::string(key) + " must be a positive integer");
    return it->get<std::uint64_t>();
}

json parse_object(const std::string& body)
{
    auto j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw probe::InvalidTask("request body must be a JSON object");
    return j;
}

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool constant_time_equal(const std::string& a, const std::string& b)
{
    if (a.size() != b.size())
        return false;
    unsigned char diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        diff |= static_cast<unsigned char>(a[i] ^ b[i]);
    return diff == 0;
}

} // namespace

const char* task_kind_name(TaskKind k)
{
    switch (k) {
    case TaskKind::Ping: return "ping";
    case TaskKind::Traceroute: return "traceroute";
    case TaskKind::RouterIdQuery: return "router_id_query";
    case TaskKind::RouterIdServe: return "router_id_serve";
    }
    return "unknown";
}

std::optional<TaskKind> parse_task_kind(const std::string& s)
{
    for (auto k : {TaskKind::Ping, TaskKind::Traceroute, TaskKind::RouterIdQuery, TaskKind::RouterIdServe})
        if (s == task_kind_name(k))
            return k;
    return std::nullopt;
}

void PolicyConfig::validate() const
{
    if (!(max_probe_rate > 0))
        throw ConfigError("max_probe_rate must be positive");
    if (bucket_depth < 0)
        throw ConfigError("bucket_depth must not be negative");
}

// ---------------------------------------------------------------- token bucket

TokenBucket::TokenBucket(double rate, double depth, const Clock& clock)
    : rate_(rate), depth_(depth), tokens_(depth), last_(clock.now()), clock_(clock)
{ }

void TokenBucket::refill()
{
    const auto now = clock_.now();
    if (now > last_) {
        const double elapsed = static_cast<double>((now - last_).count()) / 1e6;
        tokens_ = std::min(depth_, tokens_ + elapsed * rate_);
        last_ = now;
    }
}

bool TokenBucket::try_take(double n)
{
    refill();
    if (n > tokens_)
        return false;
    tokens_ -= n;
    return true;
}

void TokenBucket::refund(double n) { tokens_ = std::min(depth_, tokens_ + n); }

double TokenBucket::available()
{
    refill();
    return tokens_;
}

PolicyEnforcer::PolicyEnforcer(PolicyConfig config, const Clock& clock)
    : config_(std::move(config)), bucket_(config_.max_probe_rate, config_.depth(), clock)
{
    config_.validate();
}

bool PolicyEnforcer::authorized(const std::optional<std::string>& header) const
{
    if (!config_.auth_token)
        return true;
    if (!header)
        return false;
    const std::string prefix = "Bearer ";
    if (header->rfind(prefix, 0) != 0)
        return false;
    return constant_time_equal(trim(header->substr(prefix.size())), *config_.auth_token);
}

bool PolicyEnforcer::allows(TaskKind kind) const { return config_.allowed_tasks.contains(kind); }

Decision PolicyEnforcer::admit(TaskKind kind, double probes)
{
    if (!allows(kind))
        return Decision::Forbidden;
    std::lock_guard lk(mu_);
    return bucket_.try_take(probes) ? Decision::Admit : Decision::RateLimited;
}

void PolicyEnforcer::refund(double probes)
{
    std::lock_guard lk(mu_);
    bucket_.refund(probes);
}

// ---------------------------------------------------------------- dumps

ordered_json ping_dump_json(const probe::PingDump& d)
{
    ordered_json out = ordered_json::object();
    for (const auto& t : d.tasks) {
        ordered_json probes = ordered_json::array();
        for (const auto& r : t.records)
            probes.push_back({to_us(r.t_out), opt_time(r.t_in), opt_ip(r.responder)});
        ordered_json e;
        e["target"] = t.target.to_string();
        e["num"] = t.num_probes;
        e["rtt_cs_us"] = to_us(t.rtt_cs_at_start);
        e["probes"] = std::move(probes);
        out[std::to_string(t.icmp_id)] = std::move(e);
    }
    return out;
}

ordered_json traceroute_dump_json(const probe::TracerouteDump& d)
{
    ordered_json out = ordered_json::object();
    for (const auto& t : d.tasks) {
        ordered_json hops = ordered_json::array();
        for (const auto& [ttl, row] : t.hops()) {
            ordered_json jrow = ordered_json::array();
            for (const auto& hp : row)
                jrow.push_back({opt_ip(hp.responder), hp.rtt ? ordered_json(to_us(*hp.rtt)) : ordered_json(nullptr)});
            hops.push_back(std::move(jrow));
        }
        ordered_json probes = ordered_json::array();
        for (const auto& r : t.records)
            probes.push_back({r.ttl_sent, to_us(r.t_out), opt_time(r.t_in), opt_ip(r.responder)});
        ordered_json e;
        e["target"] = t.target.to_string();
        e["probes_per_ttl"] = t.probes_per_ttl;
        e["rtt_cs_us"] = to_us(t.rtt_cs_at_start);
        e["terminated"] = probe::termination_name(t.terminated(d.taken, d.probe_timeout));
        e["hops"] = std::move(hops);
        e["probes"] = std::move(probes);
        out[std::to_string(t.icmp_id)] = std::move(e);
    }
    return out;
}

ordered_json router_id_dump_json(const probe::RouterIdDump& d)
{
    ordered_json out = ordered_json::object();
    for (const auto& t : d.tasks) {
        ordered_json e;
        e["target"] = t.target.to_string();
        e["rtt_cs_us"] = to_us(t.rtt_cs_at_start);
        e["t_out"] = to_us(t.record.t_out);
        e["t_in"] = opt_time(t.record.t_in);
        e["responder"] = opt_ip(t.record.responder);
        e["asn"] = t.identity ? ordered_json(t.identity->asn) : ordered_json(nullptr);
        e["ident"] = t.identity ? ordered_json(t.identity->ident) : ordered_json(nullptr);
        out[std::to_string(t.icmp_id)] = std::move(e);
    }
    return out;
}

// ---------------------------------------------------------------- routes

MeasurementApi::MeasurementApi(probe::ProbeEngine& engine, PolicyEnforcer& policy) : engine_(engine), policy_(policy)
{ }

template <class Fn>
Response MeasurementApi::run_task(TaskKind kind, double probes, Fn&& start)
{
    switch (policy_.admit(kind, probes)) {
    case Decision::Admit:
        break;
    case Decision::Forbidden:
    case Decision::Unauthorized:
        return error(403, std::string(task_kind_name(kind)) + " tasks are not permitted by policy");
    case Decision::RateLimited:
        return error(429, "probe rate limit exceeded");
    }
    try {
        const std::uint16_t id = start();
        ordered_json j;
        j["icmp_id"] = id;
        return {200, j.dump()};
    } catch (const probe::InvalidTask& e) {
        policy_.refund(probes);
        return error(400, e.what());
    } catch (const pktlab::PayloadTooLarge& e) {
        policy_.refund(probes);
        return error(400, e.what());
    } catch (const probe::StateFull& e) {
        policy_.refund(probes);
        auto j = error_body(e.what());
        j["hint"] = "GET /ping/dump and /traceroute/dump, then POST the matching /clear";
        return {503, j.dump()};
    } catch (const probe::NoSession& e) {
        policy_.refund(probes);
        return error(503, e.what());
    } catch (const session::EchoTimeout& e) {
        policy_.refund(probes);
        return error(504, e.what());
    } catch (const session::SessionError& e) {
        policy_.refund(probes);
        return error(503, e.what());
    } catch (const std::exception& e) {
        policy_.refund(probes);
        return error(500, e.what());
    }
}

Response MeasurementApi::put_ping(const std::string& body)
{
    Ipv4Address target;
    std::uint64_t num = 0;
    std::string payload;
    std::optional<std::uint32_t> port;
    try {
        const auto j = parse_object(body);
        target = target_field(j);
        num = positive_field(j, "num");
        if (num > engine_.config().max_probes_per_task)
            throw probe::InvalidTask("num exceeds the per-task maximum of " +
                                     std::to_string(engine_.config().max_probes_per_task));
        if (auto it = j.find("payload"); it != j.end() && !it->is_null()) {
            if (!it->is_string())
                throw probe::InvalidTask("payload must be a string");
            payload = it->get<std::string>();
        }
        port = port_field(j);
    } catch (const probe::InvalidTask& e) {
        return error(400, e.what());
    }
    return run_task(TaskKind::Ping, static_cast<double>(num), [&] {
        return engine_.start_ping(target, static_cast<std::uint32_t>(num), payload, port);
    });
}

Response MeasurementApi::put_traceroute(const std::string& body)
{
    Ipv4Address target;
    std::uint64_t ppt = 0;
    std::optional<std::uint32_t> port;
    try {
        const auto j = parse_object(body);
        target = target_field(j);
        ppt = positive_field(j, "probes_per_ttl");
        if (ppt > engine_.config().max_probes_per_ttl)
            throw probe::InvalidTask("probes_per_ttl exceeds the maximum of " +
                                     std::to_string(engine_.config().max_probes_per_ttl));
        port = port_field(j);
    } catch (const probe::InvalidTask& e) {
        return error(400, e.what());
    }
    return run_task(TaskKind::Traceroute, static_cast<double>(ppt * probe::kMaxTtl), [&] {
        return engine_.start_traceroute(target, static_cast<std::uint32_t>(ppt), port);
    });
}

Response MeasurementApi::put_router_id_query(const std::string& body)
{
    Ipv4Address target;
    std::optional<std::uint32_t> port;
    try {
        const auto j = parse_object(body);
        target = target_field(j);
        port = port_field(j);
    } catch (const probe::InvalidTask& e) {
        return error(400, e.what());
    }
    return run_task(TaskKind::RouterIdQuery, 1.0, [&] { return engine_.start_router_id_query(target, port); });
}

Response MeasurementApi::get_router_id_config() const
{
    ordered_json j;
    const auto id = engine_.router_identity();
    j["asn"] = id ? ordered_json(id->asn) : ordered_json(nullptr);
    j["ident"] = id ? ordered_json(id->ident) : ordered_json(nullptr);
    j["serving"] = engine_.serving() && policy_.allows(TaskKind::RouterIdServe) && id.has_value();
    return {200, j.dump()};
}

Response MeasurementApi::put_router_id_config(const std::string& body)
{
    std::optional<pktlab::RouterIdentity> identity = engine_.router_identity();
    std::optional<bool> serving;
    try {
        const auto j = parse_object(body);
        const bool has_asn = j.contains("asn");
        const bool has_ident = j.contains("ident");
        if (has_asn != has_ident)
            throw probe::InvalidTask("asn and ident must be given together");
        if (has_asn) {
            const auto& asn = j["asn"];
            const auto& ident = j["ident"];
            if (asn.is_null() && ident.is_null()) {
                identity.reset();
            } else {
                if (!asn.is_number_unsigned() || asn.get<std::uint64_t>() > 0xffffffffULL)
                    throw probe::InvalidTask("asn must be a 32-bit unsigned integer");
                if (!ident.is_string())
                    throw probe::InvalidTask("ident must be a string");
                pktlab::RouterIdentity id{static_cast<std::uint32_t>(asn.get<std::uint64_t>()),
                                          ident.get<std::string>()};
                if (!id.valid())
                    throw probe::InvalidTask("ident must be 1 to 64 bytes");
                identity = std::move(id);
            }
        }
        if (auto it = j.find("serving"); it != j.end()) {
            if (!it->is_boolean())
                throw probe::InvalidTask("serving must be a boolean");
            serving = it->get<bool>();
        }
    } catch (const probe::InvalidTask& e) {
        return error(400, e.what());
    }
    if (serving.value_or(false) && !policy_.allows(TaskKind::RouterIdServe))
        return error(403, "router_id_serve is not permitted by policy");
    engine_.set_router_identity(identity);
    if (serving)
        engine_.set_serving(*serving);
    return get_router_id_config();
}

Response MeasurementApi::status() const
{
    ordered_json j;
    const auto s = engine_.session();
    j["session"] = s ? session::state_name(s->state()) : "none";
    j["datapath_id"] = s ? ordered_json(s->datapath_id()) : ordered_json(nullptr);
    const auto est = engine_.estimator();
    j["rtt_cs_us"] = est.current_us ? ordered_json(to_us(est.value())) : ordered_json(nullptr);
    j["rtt_cs_samples"] = est.sample_count;
    j["ids_in_use"] = engine_.ids_in_use();
    const auto c = engine_.counters();
    j["replies"] = c.replies;
    j["duplicates"] = c.duplicates;
    j["unknown"] = c.unknown;
    j["late"] = c.late;
    j["ignored"] = c.ignored;
    j["router_id_served"] = c.router_id_served;
    return {200, j.dump()};
}

Response MeasurementApi::handle(const std::string& method, const std::string& raw_path, const std::string& body,
                                const std::optional<std::string>& authorization)
{
    if (!policy_.authorized(authorization))
        return error(403, "missing or invalid bearer token");

    std::string path = raw_path.substr(0, raw_path.find('?'));
    if (path.size() > 1 && path.back() == '/')
        path.pop_back();

    const auto is = [&](const char* m, const char* p) { return method == m && path == p; };

    if (is("PUT", "/ping"))
        return put_ping(body);
    if (is("GET", "/ping/dump"))
        return {200, ping_dump_json(engine_.dump_pings()).dump()};
    if (is("POST", "/ping/clear"))
        return {200, ping_dump_json(engine_.clear_pings()).dump()};
    if (is("PUT", "/traceroute"))
        return put_traceroute(body);
    if (is("GET", "/traceroute/dump"))
        return {200, traceroute_dump_json(engine_.dump_traceroutes()).dump()};
    if (is("POST", "/traceroute/clear"))
        return {200, traceroute_dump_json(engine_.clear_traceroutes()).dump()};
    if (is("GET", "/routerid/config"))
        return get_router_id_config();
    if (is("PUT", "/routerid/config"))
        return put_router_id_config(body);
    if (is("PUT", "/routerid/query"))
        return put_router_id_query(body);
    if (is("GET", "/routerid/dump"))
        return {200, router_id_dump_json(engine_.dump_router_ids()).dump()};
    if (is("POST", "/routerid/clear"))
        return {200, router_id_dump_json(engine_.clear_router_ids()).dump()};
    if (is("GET", "/status"))
        return status();

    static const char* known[] = {"/ping",          "/ping/dump",       "/ping/clear",
                                  "/traceroute",    "/traceroute/dump", "/traceroute/clear",
                                  "/routerid/config", "/routerid/query", "/routerid/dump",
                                  "/routerid/clear", "/status"};
    if (std::find(std::begin(known), std::end(known), path) != std::end(known))
        return error(405, "method not allowed");
    return error(404, "no such resource");
}

// ---------------------------------------------------------------- config file

namespace {

std::uint64_t config_uint(const std::string& key, const std::string& v, std::uint64_t max)
{
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size() || out > max)
        throw ConfigError(key + ": expected an integer up to " + std::to_string(max));
    return out;
}

double config_double(const std::string& key, const std::string& v)
{
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size())
            return d;
    } catch (const std::logic_error&) {
    }
    throw ConfigError(key + ": expected a number");
}

Ipv4Address config_ip(const std::string& key, const std::string& v)
{
    auto ip = Ipv4Address::parse(v);
    if (!ip)
        throw ConfigError(key + ": expected an IPv4 address");
    return *ip;
}

MacAddress config_mac(const std::string& key, const std::string& v)
{
    auto mac = MacAddress::parse(v);
    if (!mac)
        throw ConfigError(key + ": expected a MAC address");
    return *mac;
}

bool config_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "yes" || v == "1")
        return true;
    if (v == "false" || v == "no" || v == "0")
        return false;
    throw ConfigError(key + ": expected true or false");
}

} // namespace

ControllerConfig load_controller_config(std::istream& in)
{
    ControllerConfig c;
    std::optional<std::uint32_t> asn;
    std::optional<std::string> ident;
    bool serve = true;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const auto key = trim(line.substr(0, eq));
        const auto v = trim(line.substr(eq + 1));
        try {
            if (key == "openflow_address")
                c.openflow_address = v;
            else if (key == "openflow_port")
                c.openflow_port = static_cast<std::uint16_t>(config_uint(key, v, 65535));
            else if (key == "api_address")
                c.api_address = v;
            else if (key == "api_port")
                c.api_port = static_cast<std::uint16_t>(config_uint(key, v, 65535));
            else if (key == "probe_src_ip")
                c.engine.probe_src_ip = config_ip(key, v);
            else if (key == "probe_src_mac")
                c.engine.probe_src_mac = config_mac(key, v);
            else if (key == "next_hop_ip")
                c.next_hop_ip = config_ip(key, v);
            else if (key == "next_hop_mac")
                c.engine.next_hop_mac = config_mac(key, v);
            else if (key == "default_out_port")
                c.engine.default_out_port = static_cast<std::uint32_t>(config_uint(key, v, 0xffffff00));
            else if (key == "flow_priority")
                c.engine.flow_priority = static_cast<std::uint16_t>(config_uint(key, v, 65535));
            else if (key == "ewma_alpha") {
                c.engine.ewma_alpha = config_double(key, v);
                if (!(c.engine.ewma_alpha > 0 && c.engine.ewma_alpha <= 1))
                    throw ConfigError(key + ": must be in (0, 1]");
            } else if (key == "probe_timeout_ms")
                c.engine.probe_timeout = std::chrono::milliseconds(config_uint(key, v, 3600000));
            else if (key == "traceroute_gap_ms")
                c.engine.traceroute_gap = std::chrono::milliseconds(config_uint(key, v, 60000));
            else if (key == "max_probes_per_task")
                c.engine.max_probes_per_task = static_cast<std::uint32_t>(config_uint(key, v, 65536));
            else if (key == "max_probes_per_ttl")
                c.engine.max_probes_per_ttl = static_cast<std::uint32_t>(config_uint(key, v, 2184));
            else if (key == "max_probe_rate")
                c.policy.max_probe_rate = config_double(key, v);
            else if (key == "bucket_depth")
                c.policy.bucket_depth = config_double(key, v);
            else if (key == "allowed_tasks") {
                c.policy.allowed_tasks.clear();
                std::istringstream ss(v);
                for (std::string item; std::getline(ss, item, ',');) {
                    item = trim(item);
                    if (item.empty())
                        continue;
                    auto k = parse_task_kind(item);
                    if (!k)
                        throw ConfigError(key + ": unknown task kind '" + item + "'");
                    c.policy.allowed_tasks.insert(*k);
                }
            } else if (key == "auth_token") {
                if (v.empty())
                    c.policy.auth_token.reset();
                else
                    c.policy.auth_token = v;
            } else if (key == "router_id_asn")
                asn = static_cast<std::uint32_t>(config_uint(key, v, 0xffffffff));
            else if (key == "router_id_ident")
                ident = v;
            else if (key == "router_id_serve")
                serve = config_bool(key, v);
            else
                throw ConfigError("unknown key '" + key + "'");
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (asn.has_value() != ident.has_value())
        throw ConfigError("router_id_asn and router_id_ident must be set together");
    if (asn) {
        pktlab::RouterIdentity id{*asn, *ident};
        if (!id.valid())
            throw ConfigError("router_id_ident must be 1 to 64 bytes");
        c.router_identity = std::move(id);
    }
    if (!serve)
        c.policy.allowed_tasks.erase(TaskKind::RouterIdServe);
    c.policy.validate();
    return c;
}

ControllerConfig load_controller_config_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file " + path);
    return load_controller_config(in);
}

} // namespace saami::api
