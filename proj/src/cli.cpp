#include "saami/cli.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <variant>
#include <limits>

namespace saami::cli {

using namespace std::chrono_literals;

// ---------------------------------------------------------------- transport

ControllerUrl parse_controller_url(const std::string& url)
{
    std::string rest = url;
    if (rest.rfind("https://", 0) == 0)
        throw CliError(kExitUsage, "https controllers are not supported: " + url);
    if (rest.rfind("http://", 0) == 0)
        rest = rest.substr(7);
    rest = rest.substr(0, rest.find('/'));
    if (rest.empty())
        throw CliError(kExitUsage, "controller URL has no host: " + url);
    ControllerUrl out;
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) {
        out.host = rest;
        return out;
    }
    out.host = rest.substr(0, colon);
    const auto port = rest.substr(colon + 1);
    unsigned long p = 0;
    try {
        std::size_t used = 0;
        p = std::stoul(port, &used);
        if (used != port.size())
            throw std::invalid_argument(port);
    } catch (const std::logic_error&) {
        throw CliError(kExitUsage, "bad port in controller URL: " + url);
    }
    if (out.host.empty() || p == 0 || p > 65535)
        throw CliError(kExitUsage, "bad controller URL: " + url);
    out.port = static_cast<std::uint16_t>(p);
    return out;
}

HttpApiClient::HttpApiClient(ControllerUrl url, std::optional<std::string> bearer_token)
    : url_(std::move(url)), token_(std::move(bearer_token))
{ }

api::Response HttpApiClient::request(const std::string& method, const std::string& path, const std::string& body)
{
    httplib::Client client(url_.host, url_.port);
    client.set_connection_timeout(5, 0);
    client.set_read_timeout(30, 0);
    httplib::Headers headers;
    if (token_)
        headers.emplace("Authorization", "Bearer " + *token_);
    httplib::Result res;
    if (method == "GET")
        res = client.Get(path, headers);
    else if (method == "PUT")
        res = client.Put(path, headers, body, "application/json");
    else if (method == "POST")
        res = client.Post(path, headers, body, "application/json");
    else
        throw CliError(kExitUsage, "unsupported method " + method);
    if (!res)
        throw CliError(kExitUnreachable, "controller " + url_.host + ":" + std::to_string(url_.port) +
                                             " unreachable: " + httplib::to_string(res.error()));
    return {res->status, res->body};
}

api::Response InProcessClient::request(const std::string& method, const std::string& path, const std::string& body)
{
    std::optional<std::string> auth;
    if (token_)
        auth = "Bearer " + *token_;
    return api_.handle(method, path, body, auth);
}

Sleeper real_sleeper()
{
    return [](Duration d) { std::this_thread::sleep_for(d); };
}

Sleeper virtual_sleeper(netsim::EventLoop& loop)
{
    return [&loop](Duration d) { loop.run_for(d); };
}

namespace {

std::string error_message(const api::Response& r)
{
    auto j = json::parse(r.body, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.contains("error") && j["error"].is_string())
        return j["error"].get<std::string>();
    return r.body;
}

int report_http_error(const api::Response& r, std::ostream& err)
{
    err << "error: HTTP " << r.status << ": " << error_message(r) << '\n';
    auto j = json::parse(r.body, nullptr, false);
    if (r.status == 503 && !j.is_discarded() && j.is_object() && j.contains("hint")) {
        err << "hint: " << j["hint"].get<std::string>() << '\n';
        return kExitStateFull;
    }
    return kExitHttpError;
}

std::string format_ms(std::int64_t us)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f ms", static_cast<double>(us) / 1000.0);
    return buf;
}

// Submits a task and returns its id, or an exit code on failure.
std::variant<std::uint16_t, int> submit(ApiClient& client, const std::string& path, const json& body,
                                        std::ostream& err)
{
    const auto r = client.request("PUT", path, body.dump());
    if (r.status != 200)
        return report_http_error(r, err);
    auto j = json::parse(r.body, nullptr, false);
    if (j.is_discarded() || !j.contains("icmp_id"))
        return report_http_error({502, "malformed controller response"}, err);
    return j["icmp_id"].get<std::uint16_t>();
}

std::optional<json> fetch_entry(ApiClient& client, const std::string& path, std::uint16_t id, std::ostream& err,
                                int& code)
{
    const auto r = client.request("GET", path, "");
    if (r.status != 200) {
        code = report_http_error(r, err);
        return std::nullopt;
    }
    auto j = json::parse(r.body, nullptr, false);
    const auto key = std::to_string(id);
    if (j.is_discarded() || !j.is_object() || !j.contains(key)) {
        err << "error: task " << id << " is missing from " << path << " (cleared by someone else?)\n";
        code = kExitFailure;
        return std::nullopt;
    }
    return j[key];
}

} // namespace

int cmd_ping(ApiClient& client, const Sleeper& sleep, Ipv4Address target, std::uint32_t num,
             const std::string& payload, std::optional<std::uint32_t> out_port, std::ostream& out,
             std::ostream& err, PollOptions poll)
{
    try {
        json body{{"tgt", target.to_string()}, {"num", num}, {"payload", payload}};
        if (out_port)
            body["out_port"] = *out_port;
        auto submitted = submit(client, "/ping/", body, err);
        if (auto* code = std::get_if<int>(&submitted))
            return *code;
        const auto id = std::get<std::uint16_t>(submitted);

        json entry;
        Duration waited{0};
        for (;;) {
            int code = 0;
            auto e = fetch_entry(client, "/ping/dump", id, err, code);
            if (!e)
                return code;
            entry = std::move(*e);
            const auto& probes = entry["probes"];
            const bool done = probes.size() >= num &&
                              std::all_of(probes.begin(), probes.end(), [](const json& p) { return !p[1].is_null(); });
            if (done || waited >= poll.timeout)
                break;
            sleep(poll.interval);
            waited += poll.interval;
        }

        const auto rtt_cs = entry["rtt_cs_us"].get<std::int64_t>();
        const auto& probes = entry["probes"];
        std::size_t received = 0;
        out << "PING " << target.to_string() << " icmp_id=" << id << " rtt_cs=" << format_ms(rtt_cs) << '\n';
        for (std::size_t seq = 0; seq < num; ++seq) {
            if (seq >= probes.size() || probes[seq][1].is_null()) {
                out << "seq=" << seq << " lost\n";
                continue;
            }
            const auto t_out = probes[seq][0].get<std::int64_t>();
            const auto t_in = probes[seq][1].get<std::int64_t>();
            const auto rtt = std::max<std::int64_t>(0, t_in - t_out - rtt_cs);
            ++received;
            out << "seq=" << seq << " from " << probes[seq][2].get<std::string>() << " rtt=" << format_ms(rtt) << '\n';
        }
        out << num << " sent, " << received << " received\n";
        return kExitOk;
    } catch (const CliError& e) {
        err << "error: " << e.what() << '\n';
        return e.code();
    }
}

int cmd_traceroute(ApiClient& client, const Sleeper& sleep, Ipv4Address target, std::uint32_t probes_per_ttl,
                   std::optional<std::uint32_t> out_port, std::ostream& out, std::ostream& err, PollOptions poll)
{
    try {
        json body{{"tgt", target.to_string()}, {"probes_per_ttl", probes_per_ttl}};
        if (out_port)
            body["out_port"] = *out_port;
        auto submitted = submit(client, "/traceroute/", body, err);
        if (auto* code = std::get_if<int>(&submitted))
            return *code;
        const auto id = std::get<std::uint16_t>(submitted);

        json entry;
        Duration waited{0};
        for (;;) {
            int code = 0;
            auto e = fetch_entry(client, "/traceroute/dump", id, err, code);
            if (!e)
                return code;
            entry = std::move(*e);
            bool done = entry["terminated"] != "in_progress";
            if (done && entry["terminated"] == "destination_reached") {
                for (const auto& row : entry["hops"])
                    for (const auto& p : row)
                        done = done && !p[0].is_null();
            }
            if (done || waited >= poll.timeout)
                break;
            sleep(poll.interval);
            waited += poll.interval;
        }

        out << "traceroute to " << target.to_string() << ", " << probe::kMaxTtl << " hops max, " << probes_per_ttl
            << " probe" << (probes_per_ttl == 1 ? "" : "s") << " per hop\n";
        int ttl = 0;
        for (const auto& row : entry["hops"]) {
            ++ttl;
            std::vector<std::string> responders;
            std::string rtts;
            for (const auto& p : row) {
                if (!p[0].is_null()) {
                    const auto r = p[0].get<std::string>();
                    if (std::find(responders.begin(), responders.end(), r) == responders.end())
                        responders.push_back(r);
                }
                rtts += "  ";
                rtts += p[1].is_null() ? std::string("*") : format_ms(p[1].get<std::int64_t>());
            }
            std::string who;
            for (std::size_t i = 0; i < responders.size(); ++i)
                who += (i ? "," : "") + responders[i];
            out << std::setw(2) << ttl << "  " << (who.empty() ? "*" : who) << rtts << '\n';
        }
        const auto term = entry["terminated"].get<std::string>();
        if (term == "destination_reached")
            out << "reached " << target.to_string() << " in " << ttl << " hops\n";
        else if (term == "max_ttl")
            out << "target unreachable\n";
        else
            out << "incomplete: gave up waiting for replies\n";
        return kExitOk;
    } catch (const CliError& e) {
        err << "error: " << e.what() << '\n';
        return e.code();
    }
}

// ---------------------------------------------------------------- report

std::vector<DumpTask> parse_ping_dump(const json& dump)
{
    if (!dump.is_object())
        throw std::invalid_argument("ping dump must be a JSON object keyed by ICMP id");
    std::vector<DumpTask> out;
    for (const auto& [key, v] : dump.items()) {
        DumpTask t;
        try {
            const auto id = std::stoul(key);
            if (id > 0xffff)
                throw std::out_of_range(key);
            t.icmp_id = static_cast<std::uint16_t>(id);
            auto ip = Ipv4Address::parse(v.at("target").get<std::string>());
            if (!ip)
                throw std::invalid_argument("bad target");
            t.target = *ip;
            t.rtt_cs_us = v.at("rtt_cs_us").get<std::int64_t>();
            for (const auto& p : v.at("probes")) {
                ProbeSample s;
                s.t_out_us = p.at(0).get<std::int64_t>();
                if (!p.at(1).is_null())
                    s.t_in_us = p.at(1).get<std::int64_t>();
                if (!p.at(2).is_null())
                    s.responder = p.at(2).get<std::string>();
                t.probes.push_back(std::move(s));
            }
        } catch (const std::exception& e) {
            throw std::invalid_argument("malformed dump entry '" + key + "': " + e.what());
        }
        out.push_back(std::move(t));
    }
    std::sort(out.begin(), out.end(), [](const DumpTask& a, const DumpTask& b) { return a.icmp_id < b.icmp_id; });
    return out;
}

double nearest_rank(std::vector<double> values, double pct)
{
    if (values.empty())
        return 0.0;
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return values[rank - 1];
}

std::vector<CdfPoint> empirical_cdf(std::vector<double> values)
{
    std::sort(values.begin(), values.end());
    std::vector<CdfPoint> out;
    const auto n = static_cast<double>(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i + 1 < values.size() && values[i + 1] == values[i])
            continue;
        out.push_back({values[i], static_cast<double>(i + 1) / n});
    }
    return out;
}

namespace {

Percentiles percentiles_of(const std::vector<double>& v)
{
    return {nearest_rank(v, 50), nearest_rank(v, 90), nearest_rank(v, 95), nearest_rank(v, 99)};
}

void fill_percentiles(ErrorReport& r)
{
    std::vector<double> abs, rel, abs1, rel1;
    for (const auto& row : r.rows) {
        abs.push_back(row.abs_error_us);
        rel.push_back(row.rel_error);
        abs1.push_back(row.abs_error_1_us);
        rel1.push_back(row.rel_error_1);
    }
    r.abs_error_us = percentiles_of(abs);
    r.rel_error = percentiles_of(rel);
    r.abs_error_1_us = percentiles_of(abs1);
    r.rel_error_1 = percentiles_of(rel1);
}

double relative(double abs_error, std::int64_t truth)
{
    if (truth == 0)
        return abs_error == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return abs_error / static_cast<double>(truth);
}

std::string g17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::vector<CdfPoint> ErrorReport::abs_error_cdf() const
{
    std::vector<double> v;
    for (const auto& r : rows)
        v.push_back(r.abs_error_us);
    return empirical_cdf(std::move(v));
}

std::vector<CdfPoint> ErrorReport::rel_error_cdf() const
{
    std::vector<double> v;
    for (const auto& r : rows)
        v.push_back(r.rel_error);
    return empirical_cdf(std::move(v));
}

ErrorReport build_report(const std::vector<DumpTask>& dump, const netsim::SimTopology& truth, std::uint32_t k)
{
    if (k < 1)
        throw std::invalid_argument("k must be at least 1");
    struct Estimate {
        std::uint32_t considered = 0;
        std::vector<std::int64_t> answered;
    };
    std::map<Ipv4Address, Estimate> per_target;
    for (const auto& task : dump) {
        if (!truth.targets.contains(task.target))
            throw MismatchedTargets("dump target " + task.target.to_string() + " is not in the topology");
        auto& est = per_target[task.target];
        for (const auto& p : task.probes) {
            if (est.considered == k)
                break;
            ++est.considered;
            if (p.t_in_us)
                est.answered.push_back(std::max<std::int64_t>(0, *p.t_in_us - p.t_out_us - task.rtt_cs_us));
        }
    }

    ErrorReport r;
    r.k = k;
    for (const auto& [target, est] : per_target) {
        if (est.answered.empty()) {
            ++r.discarded;
            continue;
        }
        ReportRow row;
        row.target = target;
        row.truth_us = netsim::ground_truth_rtt(truth, target).count();
        row.est_rtt_us = est.answered.front();
        row.answered = static_cast<std::uint32_t>(est.answered.size());
        row.est_rtt_mean_us = static_cast<double>(std::accumulate(est.answered.begin(), est.answered.end(),
                                                                  std::int64_t{0})) /
                              static_cast<double>(est.answered.size());
        row.abs_error_us = std::abs(row.est_rtt_mean_us - static_cast<double>(row.truth_us));
        row.rel_error = relative(row.abs_error_us, row.truth_us);
        row.abs_error_1_us = static_cast<double>(std::llabs(row.est_rtt_us - row.truth_us));
        row.rel_error_1 = relative(row.abs_error_1_us, row.truth_us);
        r.rows.push_back(row);
    }
    fill_percentiles(r);
    return r;
}

void write_report_csv(std::ostream& out, const ErrorReport& r)
{
    out << "# k=" << r.k << " discarded=" << r.discarded << '\n';
    out << "target,truth_us,est_rtt_us,est_rtt_mean_us,abs_error_us,rel_error,abs_error_1_us,rel_error_1,answered\n";
    for (const auto& row : r.rows) {
        out << row.target.to_string() << ',' << row.truth_us << ',' << row.est_rtt_us << ','
            << g17(row.est_rtt_mean_us) << ',' << g17(row.abs_error_us) << ',' << g17(row.rel_error) << ','
            << g17(row.abs_error_1_us) << ',' << g17(row.rel_error_1) << ',' << row.answered << '\n';
    }
}

ErrorReport read_report_csv(std::istream& in)
{
    ErrorReport r;
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        if (line[0] == '#') {
            unsigned long k = 0, discarded = 0;
            if (std::sscanf(line.c_str(), "# k=%lu discarded=%lu", &k, &discarded) == 2) {
                r.k = static_cast<std::uint32_t>(k);
                r.discarded = discarded;
            }
            continue;
        }
        if (!header) {
            header = true;
            continue;
        }
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');)
            f.push_back(cell);
        if (f.size() != 9)
            throw std::invalid_argument("report CSV row has " + std::to_string(f.size()) + " fields");
        ReportRow row;
        auto ip = Ipv4Address::parse(f[0]);
        if (!ip)
            throw std::invalid_argument("bad target in report CSV: " + f[0]);
        row.target = *ip;
        row.truth_us = std::stoll(f[1]);
        row.est_rtt_us = std::stoll(f[2]);
        row.est_rtt_mean_us = std::strtod(f[3].c_str(), nullptr);
        row.abs_error_us = std::strtod(f[4].c_str(), nullptr);
        row.rel_error = std::strtod(f[5].c_str(), nullptr);
        row.abs_error_1_us = std::strtod(f[6].c_str(), nullptr);
        row.rel_error_1 = std::strtod(f[7].c_str(), nullptr);
        row.answered = static_cast<std::uint32_t>(std::stoul(f[8]));
        r.rows.push_back(row);
    }
    fill_percentiles(r);
    return r;
}

void write_cdf_csv(std::ostream& out, const std::vector<CdfPoint>& cdf)
{
    out << "value,fraction\n";
    for (const auto& p : cdf)
        out << g17(p.value) << ',' << g17(p.fraction) << '\n';
}

void print_report(std::ostream& out, const ErrorReport& r)
{
    out << std::fixed << std::setprecision(3);
    out << "targets: " << r.rows.size() << " (discarded without replies: " << r.discarded << "), k=" << r.k << '\n';
    out << std::left << std::setw(17) << "target" << std::right << std::setw(12) << "truth_ms" << std::setw(12)
        << "est1_ms" << std::setw(12) << "estk_ms" << std::setw(12) << "abs_err_ms" << std::setw(10) << "rel_err"
        << '\n';
    for (const auto& row : r.rows) {
        out << std::left << std::setw(17) << row.target.to_string() << std::right << std::setw(12)
            << row.truth_us / 1000.0 << std::setw(12) << row.est_rtt_us / 1000.0 << std::setw(12)
            << row.est_rtt_mean_us / 1000.0 << std::setw(12) << row.abs_error_us / 1000.0 << std::setw(10)
            << row.rel_error << '\n';
    }
    const auto line = [&](const char* name, const Percentiles& p, double scale) {
        out << std::left << std::setw(20) << name << std::right << std::setw(12) << p.p50 * scale << std::setw(12)
            << p.p90 * scale << std::setw(12) << p.p95 * scale << std::setw(12) << p.p99 * scale << '\n';
    };
    out << std::left << std::setw(20) << "percentile" << std::right << std::setw(12) << "p50" << std::setw(12)
        << "p90" << std::setw(12) << "p95" << std::setw(12) << "p99" << '\n';
    line("abs_error_ms (k)", r.abs_error_us, 1e-3);
    line("rel_error (k)", r.rel_error, 1.0);
    line("abs_error_ms (1)", r.abs_error_1_us, 1e-3);
    line("rel_error (1)", r.rel_error_1, 1.0);
    out.unsetf(std::ios::floatfield);
}

int cmd_report(const json& dump, const netsim::SimTopology& truth, std::uint32_t k, std::ostream& out,
               std::ostream& err, const std::optional<std::string>& csv_path,
               const std::optional<std::string>& cdf_path)
{
    try {
        const auto report = build_report(parse_ping_dump(dump), truth, k);
        print_report(out, report);
        if (csv_path) {
            std::ofstream f(*csv_path);
            if (!f)
                throw std::runtime_error("cannot write " + *csv_path);
            write_report_csv(f, report);
        }
        if (cdf_path) {
            std::ofstream f(*cdf_path);
            if (!f)
                throw std::runtime_error("cannot write " + *cdf_path);
            write_cdf_csv(f, report.abs_error_cdf());
        }
        return kExitOk;
    } catch (const MismatchedTargets& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

// ---------------------------------------------------------------- calibration

double fraction_within(const std::vector<Duration>& samples, Duration lo, Duration hi)
{
    if (samples.empty())
        return 0.0;
    const auto n = std::count_if(samples.begin(), samples.end(), [&](Duration d) { return d >= lo && d <= hi; });
    return static_cast<double>(n) / static_cast<double>(samples.size());
}

void write_event_log_header(std::ostream& out) { out << "kind,index,received_us,emitted_us,port,bundled\n"; }

void write_event(std::ostream& out, const netsim::PacketOutTrace& t)
{
    out << "pktout," << t.index << ',' << to_us(t.received) << ',' << to_us(t.emitted) << ',' << t.port << ','
        << (t.bundled ? 1 : 0) << '\n';
}

void write_event(std::ostream& out, const netsim::PacketInTrace& t)
{
    out << "pktin," << t.index << ',' << to_us(t.received) << ',' << to_us(t.emitted) << ',' << t.port << ",0\n";
}

namespace {

struct EmissionTracker {
    std::vector<Duration> delays;
    std::optional<std::uint64_t> last_index;
    std::size_t reordered = 0;

    void add(std::uint64_t index, TimePoint received, TimePoint emitted)
    {
        delays.push_back(emitted - received);
        if (last_index && index < *last_index)
            ++reordered;
        last_index = index;
    }
};

} // namespace

CalibrationResult calibration_from_event_log(std::istream& in)
{
    EmissionTracker out_t, in_t;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line.rfind("kind,", 0) == 0)
            continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');)
            f.push_back(cell);
        if (f.size() < 4)
            throw std::invalid_argument("bad event log line: " + line);
        const auto index = std::stoull(f[1]);
        const auto received = at_us(std::stoll(f[2]));
        const auto emitted = at_us(std::stoll(f[3]));
        if (f[0] == "pktout")
            out_t.add(index, received, emitted);
        else if (f[0] == "pktin")
            in_t.add(index, received, emitted);
        else
            throw std::invalid_argument("unknown event kind '" + f[0] + "'");
    }
    return {std::move(out_t.delays), std::move(in_t.delays), out_t.reordered, in_t.reordered};
}

CalibrationResult calibrate_virtual(netsim::SimTopology topology, std::size_t n, std::optional<Duration> interval)
{
    const probe::EngineConfig cfg;
    Ipv4Address target;
    Duration target_rtt{0};
    auto responsive = std::find_if(topology.targets.begin(), topology.targets.end(), [](const auto& kv) {
        return kv.second.responds && kv.second.loss_prob == 0.0;
    });
    if (responsive != topology.targets.end()) {
        target = responsive->first;
        target_rtt = responsive->second.base_rtt;
    } else {
        target = Ipv4Address(198, 51, 100, 1);
        target_rtt = 1ms;
        topology.targets[target] = netsim::TargetSpec{target_rtt, 0.0, {}, true};
    }
    const auto pace = interval.value_or(topology.pktout_delay.max() + topology.pktin_delay.max() + 1ms);

    EmissionTracker out_t, in_t;
    netsim::SimSwitchOptions opts;
    opts.on_pktout = [&](const netsim::PacketOutTrace& t) { out_t.add(t.index, t.received, t.emitted); };
    opts.on_pktin = [&](const netsim::PacketInTrace& t) { in_t.add(t.index, t.received, t.emitted); };
    const auto out_port = topology.ports.front();
    netsim::VirtualTestbed tb(std::move(topology), std::move(opts));
    tb.connect();
    tb.session()->install_reply_flows(cfg.probe_src_ip, cfg.flow_priority);

    pktlab::EchoProbe probe;
    probe.src_mac = cfg.probe_src_mac;
    probe.dst_mac = cfg.next_hop_mac;
    probe.src_ip = cfg.probe_src_ip;
    probe.dst_ip = target;
    probe.icmp_id = 0xca1b;
    for (std::size_t i = 0; i < n; ++i) {
        probe.icmp_seq = static_cast<std::uint16_t>(i);
        tb.session()->send_probe(out_port, pktlab::build_echo_request(probe));
        tb.loop().run_for(pace);
    }
    tb.loop().run_until_idle();
    return {std::move(out_t.delays), std::move(in_t.delays), out_t.reordered, in_t.reordered};
}

void print_calibration(std::ostream& out, const CalibrationResult& r)
{
    const auto summary = [&](const char* name, const std::vector<Duration>& d) {
        std::vector<double> ms;
        for (auto x : d)
            ms.push_back(static_cast<double>(x.count()) / 1000.0);
        out << name << ": n=" << d.size();
        if (!d.empty()) {
            const auto mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
            out << std::fixed << std::setprecision(3) << " min=" << *std::min_element(ms.begin(), ms.end())
                << " p50=" << nearest_rank(ms, 50) << " p95=" << nearest_rank(ms, 95)
                << " p99=" << nearest_rank(ms, 99) << " max=" << *std::max_element(ms.begin(), ms.end())
                << " mean=" << mean << " (ms)";
            out.unsetf(std::ios::floatfield);
        }
        out << '\n';
    };
    summary("pktout delay", r.pktout_delays);
    out << "  fraction in [1.5, 2.0] ms: " << fraction_within(r.pktout_delays, 1500us, 2000us) << '\n';
    out << "  reordered: " << r.pktout_reordered << '\n';
    summary("pktin delay", r.pktin_delays);
    out << "  fraction <= 1.0 ms: " << fraction_within(r.pktin_delays, 0us, 1000us) << '\n';
    out << "  reordered: " << r.pktin_reordered << '\n';
}

int cmd_calibrate(ApiClient& client, const Sleeper& sleep, Ipv4Address target, std::size_t n, Duration interval,
                  const std::string& event_log_path, std::ostream& out, std::ostream& err)
{
    try {
        for (std::size_t i = 0; i < n; ++i) {
            auto submitted = submit(client, "/ping/", json{{"tgt", target.to_string()}, {"num", 1}}, err);
            if (auto* code = std::get_if<int>(&submitted))
                return *code;
            sleep(interval);
        }
        sleep(probe::kProbeTimeout);
        std::ifstream log(event_log_path);
        if (!log) {
            err << "error: cannot read simulator event log " << event_log_path << '\n';
            return kExitFailure;
        }
        print_calibration(out, calibration_from_event_log(log));
        return kExitOk;
    } catch (const CliError& e) {
        err << "error: " << e.what() << '\n';
        return e.code();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

// ---------------------------------------------------------------- campaigns

json run_virtual_ping_campaign(const netsim::SimTopology& topology, const std::vector<Ipv4Address>& targets,
                               const CampaignOptions& options)
{
    netsim::VirtualTestbed tb(topology);
    tb.connect();
    probe::ProbeEngine engine(options.engine, tb.clock());
    engine.attach(tb.session());
    api::PolicyConfig policy;
    policy.max_probe_rate = 1e12;
    api::PolicyEnforcer enforcer(policy, tb.clock());
    api::MeasurementApi api(engine, enforcer);

    for (const auto& target : targets) {
        const json body{{"tgt", target.to_string()}, {"num", options.probes_per_target}};
        const auto r = api.handle("PUT", "/ping/", body.dump());
        if (r.status != 200)
            throw std::runtime_error("ping task for " + target.to_string() + " failed: HTTP " +
                                     std::to_string(r.status) + " " + r.body);
        const auto id = json::parse(r.body)["icmp_id"].get<std::uint16_t>();
        const auto deadline = tb.loop().now() + options.engine.probe_timeout + 1s;
        while (!engine.ping_complete(id) && tb.loop().now() < deadline)
            tb.loop().run_one(deadline);
    }
    return json::parse(api.handle("GET", "/ping/dump", "").body);
}

} // namespace saami::cli
