#pragma once

// Experimenter-side client: task submission over the HTTP API, error reports against
// simulator ground truth, and switch delay calibration.

#include "saami/api.hpp"
#include "saami/clock.hpp"
#include "saami/netsim.hpp"
#include "saami/probeengine.hpp"

#include <json.hpp>

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace saami::cli {

using json = nlohmann::json;

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitUsage = 2,
    kExitHttpError = 3,
    kExitStateFull = 4,
    kExitUnreachable = 5,
};

class CliError : public std::runtime_error {
public:
    CliError(int code, const std::string& what) : std::runtime_error(what), code_(code) { }
    int code() const { return code_; }

private:
    int code_;
};

class MismatchedTargets : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- transport

class ApiClient {
public:
    virtual ~ApiClient() = default;
    // Throws CliError(kExitUnreachable) when the controller cannot be reached.
    virtual api::Response request(const std::string& method, const std::string& path, const std::string& body) = 0;
};

struct ControllerUrl {
    std::string host;
    std::uint16_t port = 8080;
};

// "http://host:port" or "host:port". Throws CliError(kExitUsage).
ControllerUrl parse_controller_url(const std::string& url);

class HttpApiClient final : public ApiClient {
public:
    HttpApiClient(ControllerUrl url, std::optional<std::string> bearer_token);
    api::Response request(const std::string& method, const std::string& path, const std::string& body) override;

private:
    ControllerUrl url_;
    std::optional<std::string> token_;
};

class InProcessClient final : public ApiClient {
public:
    explicit InProcessClient(api::MeasurementApi& api, std::optional<std::string> bearer_token = std::nullopt)
        : api_(api), token_(std::move(bearer_token))
    { }
    api::Response request(const std::string& method, const std::string& path, const std::string& body) override;

private:
    api::MeasurementApi& api_;
    std::optional<std::string> token_;
};

// Waits between polls: a real sleep, or advancing a simulation.
using Sleeper = std::function<void(Duration)>;
Sleeper real_sleeper();
Sleeper virtual_sleeper(netsim::EventLoop& loop);

struct PollOptions {
    Duration interval = std::chrono::milliseconds(100);
    Duration timeout = probe::kProbeTimeout + std::chrono::seconds(2);
};

// ---------------------------------------------------------------- commands

// Each returns the process exit code and prints to `out`; diagnostics go to `err`.
int cmd_ping(ApiClient& client, const Sleeper& sleep, Ipv4Address target, std::uint32_t num,
             const std::string& payload, std::optional<std::uint32_t> out_port, std::ostream& out,
             std::ostream& err, PollOptions poll = {});

int cmd_traceroute(ApiClient& client, const Sleeper& sleep, Ipv4Address target, std::uint32_t probes_per_ttl,
                   std::optional<std::uint32_t> out_port, std::ostream& out, std::ostream& err,
                   PollOptions poll = {});

// ---------------------------------------------------------------- report

struct ProbeSample {
    std::int64_t t_out_us = 0;
    std::optional<std::int64_t> t_in_us;
    std::optional<std::string> responder;
};

struct DumpTask {
    std::uint16_t icmp_id = 0;
    Ipv4Address target;
    std::int64_t rtt_cs_us = 0;
    std::vector<ProbeSample> probes;
};

// Parses the JSON produced by GET /ping/dump. Throws std::invalid_argument.
std::vector<DumpTask> parse_ping_dump(const json& dump);

struct ReportRow {
    Ipv4Address target;
    std::int64_t truth_us = 0;
    std::int64_t est_rtt_us = 0;       // first answered probe
    double est_rtt_mean_us = 0;        // mean over answered probes among the first k
    double abs_error_us = 0;           // |est_rtt_mean - truth|
    double rel_error = 0;              // abs_error / truth
    double abs_error_1_us = 0;         // |est_rtt - truth|
    double rel_error_1 = 0;
    std::uint32_t answered = 0;

    friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct Percentiles {
    double p50 = 0, p90 = 0, p95 = 0, p99 = 0;
    friend bool operator==(const Percentiles&, const Percentiles&) = default;
};

struct CdfPoint {
    double value = 0;
    double fraction = 0;
};

struct ErrorReport {
    std::uint32_t k = 1;
    std::vector<ReportRow> rows; // ascending target
    std::size_t discarded = 0;   // targets without any answered probe
    Percentiles abs_error_us;
    Percentiles rel_error;
    Percentiles abs_error_1_us;
    Percentiles rel_error_1;

    std::vector<CdfPoint> abs_error_cdf() const;
    std::vector<CdfPoint> rel_error_cdf() const;
};

// Nearest-rank percentile of an unsorted sample; 0 for an empty one.
double nearest_rank(std::vector<double> values, double pct);
std::vector<CdfPoint> empirical_cdf(std::vector<double> values);

// Throws MismatchedTargets when the dump names a target the topology lacks.
ErrorReport build_report(const std::vector<DumpTask>& dump, const netsim::SimTopology& truth, std::uint32_t k);

void write_report_csv(std::ostream& out, const ErrorReport& r);
// Rebuilds the report (rows and percentiles) from write_report_csv output.
ErrorReport read_report_csv(std::istream& in);
void print_report(std::ostream& out, const ErrorReport& r);
void write_cdf_csv(std::ostream& out, const std::vector<CdfPoint>& cdf);

int cmd_report(const json& dump, const netsim::SimTopology& truth, std::uint32_t k, std::ostream& out,
               std::ostream& err, const std::optional<std::string>& csv_path = std::nullopt,
               const std::optional<std::string>& cdf_path = std::nullopt);

// ---------------------------------------------------------------- calibration

struct CalibrationResult {
    std::vector<Duration> pktout_delays; // T(probe) - R(pktout), in emission order
    std::vector<Duration> pktin_delays;  // T(pktin) - R(response), in emission order
    std::size_t pktout_reordered = 0;
    std::size_t pktin_reordered = 0;
};

double fraction_within(const std::vector<Duration>& samples, Duration lo, Duration hi);

// Event log line per emission: kind,index,received_us,emitted_us,port,bundled
void write_event_log_header(std::ostream& out);
void write_event(std::ostream& out, const netsim::PacketOutTrace& t);
void write_event(std::ostream& out, const netsim::PacketInTrace& t);
CalibrationResult calibration_from_event_log(std::istream& in);

// In-process calibration on the virtual clock: n paced probes through a simulated switch.
CalibrationResult calibrate_virtual(netsim::SimTopology topology, std::size_t n,
                                    std::optional<Duration> interval = std::nullopt);

void print_calibration(std::ostream& out, const CalibrationResult& r);

// Drives n single-probe ping tasks through the controller, then reads the simulator's event log.
int cmd_calibrate(ApiClient& client, const Sleeper& sleep, Ipv4Address target, std::size_t n, Duration interval,
                  const std::string& event_log_path, std::ostream& out, std::ostream& err);

// ---------------------------------------------------------------- virtual campaigns

struct CampaignOptions {
    std::uint32_t probes_per_target = 1;
    probe::EngineConfig engine;
};

// Pings each target in turn through an in-process controller attached to a simulated
// switch on the virtual clock. Returns the GET /ping/dump document.
json run_virtual_ping_campaign(const netsim::SimTopology& topology, const std::vector<Ipv4Address>& targets,
                               const CampaignOptions& options = {});

} // namespace saami::cli
