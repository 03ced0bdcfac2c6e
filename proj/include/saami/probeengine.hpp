#pragma once

// Ping, traceroute and router-ID measurement state keyed by ICMP identifier, plus the
// controller-to-switch RTT estimator used to correct every measurement.

#include "saami/clock.hpp"
#include "saami/net_types.hpp"
#include "saami/pktlab.hpp"
#include "saami/session.hpp"

#include <bitset>
#include <functional>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace saami::probe {

using namespace std::chrono_literals;

class NegativeSample : public std::invalid_argument {
public:
    NegativeSample() : std::invalid_argument("negative RTT sample") { }
};

class StateFull : public std::runtime_error {
public:
    StateFull() : std::runtime_error("ICMP identifier table is full; dump and clear the state to continue") { }
};

class NoSession : public std::runtime_error {
public:
    NoSession() : std::runtime_error("no active switch session") { }
};

class InvalidTask : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- estimator

struct RttEstimator {
    double alpha = 0.5;
    std::optional<double> current_us; // exact EWMA in microseconds
    std::uint64_t sample_count = 0;

    // Current estimate rounded to whole microseconds; zero before any sample.
    Duration value() const;
};

RttEstimator ewma_update(RttEstimator e, Duration sample);

// ---------------------------------------------------------------- records

struct ProbeRecord {
    std::uint16_t icmp_id = 0;
    std::uint16_t icmp_seq = 0;
    Ipv4Address target;
    std::uint8_t ttl_sent = pktlab::kDefaultPingTtl;
    TimePoint t_out{};
    std::optional<TimePoint> t_in;
    std::optional<Ipv4Address> responder;
    // Reply kind that completed the record (traceroute tells hops from the destination).
    pktlab::ReplyKind reply_kind = pktlab::ReplyKind::Other;
};

// max(0, (t_in - t_out) - rtt_cs); absent without a reply.
std::optional<Duration> estimate_rtt(const ProbeRecord& rec, Duration rtt_cs);

inline constexpr int kMaxTtl = 30;
inline constexpr Duration kProbeTimeout = 3s;

struct PingTask {
    std::uint16_t icmp_id = 0;
    Ipv4Address target;
    std::uint32_t num_probes = 1;
    std::string payload;
    std::uint32_t out_port = 0;
    Duration rtt_cs_at_start{0};
    std::vector<ProbeRecord> records; // indexed by seq, only probes already sent
};

enum class Termination { InProgress, DestinationReached, MaxTtl };

const char* termination_name(Termination t);

struct HopProbe {
    std::optional<Ipv4Address> responder;
    std::optional<Duration> rtt;
};

struct TracerouteTask {
    std::uint16_t icmp_id = 0;
    Ipv4Address target;
    std::uint32_t probes_per_ttl = 1;
    int max_ttl = kMaxTtl;
    std::uint32_t out_port = 0;
    Duration rtt_cs_at_start{0};
    std::vector<ProbeRecord> records; // indexed by seq
    bool issuing_done = false;

    std::uint16_t seq_for(int ttl, std::uint32_t index) const;
    std::pair<int, std::uint32_t> ttl_index(std::uint16_t seq) const;

    // First TTL answered by the target itself.
    std::optional<int> destination_ttl() const;
    Termination terminated(TimePoint now, Duration timeout = kProbeTimeout) const;
    // TTL -> per-probe results, up to the destination or the highest TTL issued.
    std::map<int, std::vector<HopProbe>> hops() const;
};

struct RouterIdTask {
    std::uint16_t icmp_id = 0;
    Ipv4Address target;
    std::uint32_t out_port = 0;
    Duration rtt_cs_at_start{0};
    ProbeRecord record;
    bool sent = false;
    std::optional<pktlab::RouterIdentity> identity;
};

// ---------------------------------------------------------------- id allocator

class IdAllocator {
public:
    static constexpr std::size_t kCapacity = 65536;

    // Next free id at or after the cursor, wrapping. Throws StateFull.
    std::uint16_t allocate();
    void release(std::uint16_t id);
    void clear();
    bool in_use(std::uint16_t id) const { return used_.test(id); }
    std::size_t size() const { return count_; }
    std::uint16_t next_id() const { return next_; }

private:
    std::bitset<kCapacity> used_;
    std::size_t count_ = 0;
    std::uint16_t next_ = 0;
};

// ---------------------------------------------------------------- engine

struct EngineConfig {
    Ipv4Address probe_src_ip = Ipv4Address(192, 0, 2, 100);
    MacAddress probe_src_mac{{0x02, 0x00, 0x00, 0x00, 0x00, 0x01}};
    MacAddress next_hop_mac{{0x02, 0x00, 0x00, 0x00, 0x00, 0xfe}};
    std::uint32_t default_out_port = 1;
    std::uint16_t flow_priority = 100;
    double ewma_alpha = 0.5;
    Duration probe_timeout = kProbeTimeout;
    Duration traceroute_gap{0};
    std::uint32_t max_probes_per_task = 1000;
    std::uint32_t max_probes_per_ttl = 16;
};

struct EngineCounters {
    std::uint64_t replies = 0;
    std::uint64_t duplicates = 0;
    std::uint64_t unknown = 0;
    std::uint64_t late = 0;
    std::uint64_t ignored = 0;
    std::uint64_t router_id_served = 0;
};

struct PingDump {
    TimePoint taken{};
    std::vector<PingTask> tasks; // ascending icmp_id
};

struct TracerouteDump {
    TimePoint taken{};
    Duration probe_timeout = kProbeTimeout;
    std::vector<TracerouteTask> tasks;
};

struct RouterIdDump {
    TimePoint taken{};
    std::vector<RouterIdTask> tasks;
};

class ProbeEngine {
public:
    ProbeEngine(EngineConfig config, const Clock& clock);

    // Registers the PacketIn handler and installs the reply flows. Replaces any earlier session.
    void attach(std::shared_ptr<session::SwitchSession> s);
    std::shared_ptr<session::SwitchSession> session() const;

    // Throws StateFull, NoSession, InvalidTask, session::SessionClosed, session::EchoTimeout.
    std::uint16_t start_ping(Ipv4Address target, std::uint32_t num, std::string payload,
                             std::optional<std::uint32_t> out_port = std::nullopt);
    std::uint16_t start_traceroute(Ipv4Address target, std::uint32_t probes_per_ttl,
                                   std::optional<std::uint32_t> out_port = std::nullopt);
    std::uint16_t start_router_id_query(Ipv4Address target, std::optional<std::uint32_t> out_port = std::nullopt);

    void handle_packet_in(const session::Timestamped& frame, std::uint32_t in_port);
    void handle_reply(const pktlab::ParsedReply& reply, TimePoint t_in);

    // Identity announced to router-ID queries; serving is off while unset or disabled.
    void set_router_identity(std::optional<pktlab::RouterIdentity> identity);
    std::optional<pktlab::RouterIdentity> router_identity() const;
    void set_serving(bool enabled);
    bool serving() const;

    // Refreshes the estimator from one echo round trip and returns the new estimate.
    Duration refresh_rtt_cs();

    PingDump dump_pings() const;
    TracerouteDump dump_traceroutes() const;
    RouterIdDump dump_router_ids() const;
    // Atomically snapshot and clear; the returned dump holds everything that was removed.
    PingDump clear_pings();
    TracerouteDump clear_traceroutes();
    RouterIdDump clear_router_ids();

    // True when every probe of the task is answered or past the probe timeout.
    bool ping_complete(std::uint16_t icmp_id) const;
    bool traceroute_complete(std::uint16_t icmp_id) const;
    bool router_id_complete(std::uint16_t icmp_id) const;

    RttEstimator estimator() const;
    EngineCounters counters() const;
    std::size_t ids_in_use() const;
    const EngineConfig& config() const { return config_; }
    const Clock& clock() const { return clock_; }

private:
    struct Started {
        std::shared_ptr<session::SwitchSession> session;
        std::uint16_t icmp_id;
        Duration rtt_cs;
    };
    enum class Kind { Ping, Traceroute, RouterId };

    std::shared_ptr<session::SwitchSession> require_session() const;
    // Allocates an id, announces the source address and refreshes RTT_C-S. Rolls back on error.
    Started begin_task(Kind kind, Ipv4Address target, std::uint32_t out_port,
                       const std::function<void(std::uint16_t)>& register_task);
    void abort_task(Kind kind, std::uint16_t id);
    bool record_reply(ProbeRecord& rec, const pktlab::ParsedReply& reply, TimePoint t_in);
    void serve_router_id(const session::Timestamped& frame, std::uint32_t in_port);
    bool record_settled(const ProbeRecord& rec, TimePoint now) const;

    EngineConfig config_;
    const Clock& clock_;

    mutable std::mutex mu_;
    std::shared_ptr<session::SwitchSession> session_;
    RttEstimator estimator_;
    IdAllocator ids_;
    std::map<std::uint16_t, PingTask> pings_;
    std::map<std::uint16_t, TracerouteTask> traces_;
    std::map<std::uint16_t, RouterIdTask> router_ids_;
    EngineCounters counters_;
    std::optional<pktlab::RouterIdentity> identity_;
    bool serving_ = true;
};

} // namespace saami::probe
