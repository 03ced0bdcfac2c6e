// saami: controller, simulated switch and measurement client in one binary.

#include "saami/api.hpp"
#include "saami/cli.hpp"
#include "saami/http_server.hpp"
#include "saami/netsim.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

using namespace saami;

namespace {

constexpr const char* kTokenVariable = "SAAMI_API_TOKEN";

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void wait_for_signal()
{
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop)
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

std::optional<std::string> token_from_env()
{
    const char* t = std::getenv(kTokenVariable);
    if (!t || !*t)
        return std::nullopt;
    return std::string(t);
}

Ipv4Address require_ip(const std::string& text)
{
    auto ip = Ipv4Address::parse(text);
    if (!ip)
        throw cli::CliError(cli::kExitUsage, "not an IPv4 address: " + text);
    return *ip;
}

std::pair<std::string, std::uint16_t> host_port(const std::string& text)
{
    const auto u = cli::parse_controller_url(text);
    return {u.host, u.port};
}

int run_serve(const std::string& config_path, int of_port, int api_port)
{
    api::ControllerConfig cfg;
    if (!config_path.empty())
        cfg = api::load_controller_config_file(config_path);
    if (of_port >= 0)
        cfg.openflow_port = static_cast<std::uint16_t>(of_port);
    if (api_port >= 0)
        cfg.api_port = static_cast<std::uint16_t>(api_port);
    if (auto t = token_from_env())
        cfg.policy.auth_token = t;
    api::Controller controller(cfg);
    controller.start();
    std::cout << "openflow listening on " << cfg.openflow_address << ':' << controller.openflow_port() << '\n'
              << "api listening on " << cfg.api_address << ':' << controller.api_port() << std::endl;
    wait_for_signal();
    controller.stop();
    return 0;
}

int run_sim(const std::string& topology_path, const std::string& controller, const std::string& event_log,
            std::optional<std::uint64_t> seed, bool silent)
{
    auto topo = netsim::load_topology_file(topology_path);
    if (auto env = netsim::seed_from_environment())
        topo.seed = *env;
    if (seed)
        topo.seed = *seed;

    std::ofstream log;
    std::mutex log_mu;
    netsim::SimSwitchOptions opts;
    opts.silent = silent;
    if (!event_log.empty()) {
        log.open(event_log);
        if (!log)
            throw std::runtime_error("cannot write event log " + event_log);
        cli::write_event_log_header(log);
        log.flush();
        opts.on_pktout = [&](const netsim::PacketOutTrace& t) {
            std::lock_guard lk(log_mu);
            cli::write_event(log, t);
            log.flush();
        };
        opts.on_pktin = [&](const netsim::PacketInTrace& t) {
            std::lock_guard lk(log_mu);
            cli::write_event(log, t);
            log.flush();
        };
    }
    const auto [host, port] = host_port(controller);
    auto sw = netsim::run_sim_switch(topo, host, port, opts);
    std::cout << "simulated switch dpid 0x" << std::hex << topo.switch_dpid << std::dec << " connected to " << host
              << ':' << port << std::endl;
    while (!g_stop && sw->connected()) {
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    sw->stop();
    return 0;
}

nlohmann::json load_dump(const std::string& source)
{
    if (source.rfind("http://", 0) == 0) {
        const auto url = cli::parse_controller_url(source);
        const auto slash = source.find('/', 7);
        const auto path = slash == std::string::npos ? std::string("/ping/dump") : source.substr(slash);
        cli::HttpApiClient client(url, token_from_env());
        const auto r = client.request("GET", path, "");
        if (r.status != 200)
            throw cli::CliError(cli::kExitHttpError, "HTTP " + std::to_string(r.status) + " fetching " + source);
        return nlohmann::json::parse(r.body);
    }
    std::ifstream in(source);
    if (!in)
        throw cli::CliError(cli::kExitFailure, "cannot read dump " + source);
    return nlohmann::json::parse(in);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Active measurement over an OpenFlow switch: controller, simulator and client"};
    app.require_subcommand(1);

    std::string config_path;
    int of_port = -1;
    int api_port = -1;
    auto* serve = app.add_subcommand("serve", "Run the controller (OpenFlow listener and HTTP API)");
    serve->add_option("--config", config_path, "Controller config file (key = value)")->check(CLI::ExistingFile);
    serve->add_option("--openflow-port", of_port, "Override the OpenFlow listen port");
    serve->add_option("--api-port", api_port, "Override the HTTP API port");

    std::string topology_path;
    std::string sim_controller = "127.0.0.1:6633";
    std::string event_log;
    std::optional<std::uint64_t> seed;
    bool silent = false;
    auto* sim = app.add_subcommand("sim", "Run a simulated switch that connects to a controller");
    sim->add_option("--topology", topology_path, "Topology file")->required()->check(CLI::ExistingFile);
    sim->add_option("--controller", sim_controller, "Controller OpenFlow address host:port");
    sim->add_option("--event-log", event_log, "Write PacketOut/PacketIn emission events as CSV");
    sim->add_option("--seed", seed, "Random seed (overrides the topology and SAAMI_SIM_SEED)");
    sim->add_flag("--silent", silent, "Never answer the controller");

    std::string controller_url = "http://127.0.0.1:8080";
    std::string target;
    std::uint32_t num = 1;
    std::string payload;
    std::optional<std::uint32_t> out_port;
    auto* ping = app.add_subcommand("ping", "Ping a target through the controller");
    ping->add_option("--controller", controller_url, "Controller API URL");
    ping->add_option("--target", target, "Target IPv4 address")->required();
    ping->add_option("--num", num, "Number of echo requests")->check(CLI::PositiveNumber);
    ping->add_option("--payload", payload, "ICMP payload text");
    ping->add_option("--out-port", out_port, "Switch output port");

    std::uint32_t probes_per_ttl = 1;
    auto* trace = app.add_subcommand("traceroute", "Traceroute a target through the controller");
    trace->add_option("--controller", controller_url, "Controller API URL");
    trace->add_option("--target", target, "Target IPv4 address")->required();
    trace->add_option("--probes-per-ttl", probes_per_ttl, "Probes per TTL")->check(CLI::PositiveNumber);
    trace->add_option("--out-port", out_port, "Switch output port");

    std::string dump_source;
    std::uint32_t k = 1;
    std::optional<std::string> csv_path;
    std::optional<std::string> cdf_path;
    auto* report = app.add_subcommand("report", "Error report of a ping dump against simulator ground truth");
    report->add_option("--dump", dump_source, "Ping dump file or http:// URL")->required();
    report->add_option("--topology", topology_path, "Topology file with ground truth")->required()->check(
        CLI::ExistingFile);
    report->add_option("--k", k, "Probes per target for the mean estimate")->check(CLI::PositiveNumber);
    report->add_option("--csv", csv_path, "Write the per-target report as CSV");
    report->add_option("--cdf", cdf_path, "Write the absolute error CDF as CSV");

    std::size_t samples = 1000;
    int interval_ms = 60;
    auto* calibrate = app.add_subcommand("calibrate", "Measure switch PacketOut/PacketIn processing delays");
    calibrate->add_option("--samples", samples, "Number of samples")->check(CLI::PositiveNumber);
    calibrate->add_option("--topology", topology_path, "Topology for the in-process run")->check(CLI::ExistingFile);
    auto* cal_controller = calibrate->add_option("--controller", controller_url,
                                                 "Drive a running controller instead of an in-process simulator");
    calibrate->add_option("--target", target, "Responsive target for the controller run");
    calibrate->add_option("--event-log", event_log, "Event log written by 'saami sim --event-log'");
    calibrate->add_option("--interval-ms", interval_ms, "Gap between probes for the controller run");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*serve)
            return run_serve(config_path, of_port, api_port);
        if (*sim)
            return run_sim(topology_path, sim_controller, event_log, seed, silent);
        if (*ping) {
            cli::HttpApiClient client(cli::parse_controller_url(controller_url), token_from_env());
            return cli::cmd_ping(client, cli::real_sleeper(), require_ip(target), num, payload, out_port, std::cout,
                                 std::cerr);
        }
        if (*trace) {
            cli::HttpApiClient client(cli::parse_controller_url(controller_url), token_from_env());
            return cli::cmd_traceroute(client, cli::real_sleeper(), require_ip(target), probes_per_ttl, out_port,
                                       std::cout, std::cerr);
        }
        if (*report) {
            const auto topo = netsim::load_topology_file(topology_path);
            return cli::cmd_report(load_dump(dump_source), topo, k, std::cout, std::cerr, csv_path, cdf_path);
        }
        if (*calibrate) {
            if (cal_controller->count() > 0) {
                if (target.empty() || event_log.empty())
                    throw cli::CliError(cli::kExitUsage, "--controller needs --target and --event-log");
                cli::HttpApiClient client(cli::parse_controller_url(controller_url), token_from_env());
                return cli::cmd_calibrate(client, cli::real_sleeper(), require_ip(target), samples,
                                          std::chrono::milliseconds(interval_ms), event_log, std::cout, std::cerr);
            }
            netsim::SimTopology topo;
            if (!topology_path.empty())
                topo = netsim::load_topology_file(topology_path);
            if (auto env = netsim::seed_from_environment())
                topo.seed = *env;
            cli::print_calibration(std::cout, cli::calibrate_virtual(topo, samples));
            return 0;
        }
    } catch (const cli::CliError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kExitFailure;
    }
    return 0;
}
