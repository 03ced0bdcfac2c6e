#pragma once

// Simulated OpenFlow switch and virtual IP dataplane used as ground truth.

#include "saami/clock.hpp"
#include "saami/net_types.hpp"
#include "saami/ofwire.hpp"
#include "saami/pktlab.hpp"
#include "saami/session.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace saami::netsim {

using Rng = std::mt19937_64;

class TopologyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnknownTarget : public std::out_of_range {
public:
    explicit UnknownTarget(Ipv4Address a) : std::out_of_range("unknown target " + a.to_string()) { }
};

class ConnectFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- delay models

class DelayModel {
public:
    enum class Kind { Constant, Uniform, Mixture };

    DelayModel() = default;

    static DelayModel constant(Duration d);
    // Integer microseconds drawn uniformly from [lo, hi].
    static DelayModel uniform(Duration lo, Duration hi);
    // Probabilities must sum to 1.
    static DelayModel mixture(std::vector<std::pair<double, DelayModel>> parts);

    // 97% in [1.5, 2.0] ms, 2% at 23 ms, 1% at 50 ms.
    static DelayModel default_pktout();
    // 95% in [0.3, 1.0] ms, 5% tail up to 3 ms.
    static DelayModel default_pktin();

    Duration sample(Rng& rng) const;
    // P(delay <= x) under the model.
    double cdf(Duration x) const;
    Duration min() const;
    Duration max() const;
    double mean_us() const;

    Kind kind() const { return kind_; }

    // Text form used by topology files, e.g. "constant 5ms", "uniform 1.5ms 2ms",
    // "mixture 0.97 uniform 1.5ms 2ms | 0.03 constant 23ms".
    std::string to_string() const;
    static DelayModel parse(const std::string& text);

    friend bool operator==(const DelayModel&, const DelayModel&) = default;

private:
    Kind kind_ = Kind::Constant;
    Duration lo_{0};
    Duration hi_{0};
    std::vector<std::pair<double, DelayModel>> parts_;
};

Duration parse_duration(const std::string& text);
std::string format_duration(Duration d);

// ---------------------------------------------------------------- topology

struct Hop {
    Ipv4Address router;
    Duration one_way{0};
    friend bool operator==(const Hop&, const Hop&) = default;
};

struct TargetSpec {
    Duration base_rtt{0};
    double loss_prob = 0.0;
    std::vector<Hop> hops;
    bool responds = true;
    friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

struct SimTopology {
    std::uint64_t switch_dpid = 1;
    std::vector<std::uint32_t> ports{1, 2};
    std::map<Ipv4Address, TargetSpec> targets;
    DelayModel control_link_delay = DelayModel::constant(Duration{0}); // one way
    DelayModel pktout_delay = DelayModel::default_pktout();
    DelayModel pktin_delay = DelayModel::default_pktin();
    DelayModel echo_delay = DelayModel::constant(Duration{0});
    std::optional<Duration> bundling_penalty; // disabled when empty
    std::map<Ipv4Address, pktlab::RouterIdentity> router_id_hosts;
    std::uint64_t seed = 1;

    // Throws TopologyError.
    void validate() const;
    friend bool operator==(const SimTopology&, const SimTopology&) = default;
};

inline constexpr Duration kDefaultBundlingPenalty{17};

SimTopology load_topology(std::istream& in);
SimTopology load_topology_file(const std::string& path);
void save_topology(std::ostream& out, const SimTopology& topo);

// Seed override read from SAAMI_SIM_SEED, if set.
std::optional<std::uint64_t> seed_from_environment();

Duration ground_truth_rtt(const SimTopology& topo, Ipv4Address target);

struct DataplaneReply {
    Bytes frame;
    TimePoint arrival;
};

// What the network sends back to the switch port for a frame emitted at `emit`.
std::vector<DataplaneReply> dataplane_process(const SimTopology& topo, std::span<const std::uint8_t> frame,
                                              TimePoint emit, Rng& rng);

// ---------------------------------------------------------------- scheduling

class Scheduler {
public:
    virtual ~Scheduler() = default;
    virtual TimePoint now() const = 0;
    virtual void schedule(TimePoint at, std::function<void()> fn) = 0;
};

// Single-threaded discrete-event loop on a virtual clock. Events at equal times run in
// scheduling order.
class EventLoop final : public Scheduler, public session::EventPump {
public:
    TimePoint now() const override { return clock_.now(); }
    void schedule(TimePoint at, std::function<void()> fn) override;
    bool run_one(TimePoint deadline) override;

    void run_until(TimePoint t);
    void run_for(Duration d) { run_until(now() + d); }
    // Runs until no events remain; returns the number processed.
    std::size_t run_until_idle();

    const VirtualClock& clock() const { return clock_; }
    std::size_t pending() const { return queue_.size(); }

private:
    struct Event {
        TimePoint at;
        std::uint64_t seq;
        std::function<void()> fn;
    };
    struct Later {
        bool operator()(const Event& a, const Event& b) const
        {
            return a.at != b.at ? a.at > b.at : a.seq > b.seq;
        }
    };

    VirtualClock clock_;
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    std::uint64_t seq_ = 0;
};

// ---------------------------------------------------------------- switch

// Switch-to-controller direction of the control channel.
class ControlLink {
public:
    virtual ~ControlLink() = default;
    virtual void transmit(Bytes segment) = 0;
};

struct PacketOutTrace {
    std::uint64_t index = 0;
    TimePoint received;  // R(pktout): PacketOut processed by the switch
    TimePoint emitted;   // T(probe): frame leaves the data port
    bool bundled = false;
    std::uint32_t port = 0;
    Bytes frame;
};

struct PacketInTrace {
    std::uint64_t index = 0;
    TimePoint received;  // R(response): frame arrives at the data port
    TimePoint emitted;   // T(pktin): PacketIn leaves the switch
    std::uint32_t port = 0;
    Bytes frame;
};

struct FlowRule {
    std::uint16_t priority = 0;
    std::uint64_t cookie = 0;
    ofwire::Match match;
    ofwire::OutputAction output;
    std::uint64_t installed = 0;
};

// Highest priority wins; among equal priorities the most recently installed rule.
const FlowRule* lookup_flow(const std::vector<FlowRule>& rules, std::uint32_t in_port,
                            std::span<const std::uint8_t> frame);

struct SimSwitchOptions {
    bool silent = false;                       // never answers anything
    std::uint8_t hello_version = ofwire::kVersion;
    std::function<void(const PacketOutTrace&)> on_pktout;
    std::function<void(const PacketInTrace&)> on_pktin;
};

class SimSwitch {
public:
    SimSwitch(SimTopology topology, Scheduler& scheduler, SimSwitchOptions options = {});

    void attach(ControlLink* link) { link_ = link; }
    // Connection established: the switch greets the controller.
    void connected();
    // Bytes the controller put on the wire now; processed after the control link delay.
    void on_segment(Bytes bytes);
    // External frame arriving at a data port now.
    void inject(std::uint32_t port, Bytes frame);

    const SimTopology& topology() const { return topo_; }
    const std::vector<PacketOutTrace>& pktout_log() const { return pktout_log_; }
    const std::vector<PacketInTrace>& pktin_log() const { return pktin_log_; }
    const std::vector<FlowRule>& flow_rules() const { return rules_; }
    std::uint64_t dropped_frames() const { return dropped_; }

private:
    void send(const ofwire::Message& msg);
    void send_raw(Bytes bytes);
    void process_segment(const Bytes& bytes);
    void handle(const ofwire::Message& msg, TimePoint received, bool bundled);
    void port_receive(std::uint32_t port, Bytes frame);
    bool has_port(std::uint32_t port) const;

    SimTopology topo_;
    Scheduler& sched_;
    SimSwitchOptions options_;
    ControlLink* link_ = nullptr;
    Rng rng_;
    ofwire::StreamFramer framer_;
    std::vector<FlowRule> rules_;
    std::uint64_t rule_seq_ = 0;
    TimePoint inbound_ready_{};
    TimePoint outbound_ready_{};
    TimePoint pktout_ready_{};
    TimePoint pktin_ready_{};
    std::uint32_t xid_ = 0x10000;
    std::vector<PacketOutTrace> pktout_log_;
    std::vector<PacketInTrace> pktin_log_;
    std::uint64_t dropped_ = 0;
};

// ---------------------------------------------------------------- in-process testbed

// Controller transport wired straight into a SimSwitch on the same event loop. Writes made
// at the same virtual instant travel as one segment.
class VirtualChannel final : public session::Transport, public ControlLink {
public:
    VirtualChannel(EventLoop& loop, SimSwitch& sw) : loop_(loop), sw_(sw) { }

    void bind(session::SwitchSession* s) { session_ = s; }

    void write(std::span<const std::uint8_t> bytes) override;
    void close() override;
    session::EventPump* pump() override { return &loop_; }
    void transmit(Bytes segment) override;

    std::uint64_t segments() const { return segments_; }

private:
    EventLoop& loop_;
    SimSwitch& sw_;
    session::SwitchSession* session_ = nullptr;
    Bytes pending_;
    bool flush_scheduled_ = false;
    bool closed_ = false;
    std::uint64_t segments_ = 0;
};

class VirtualTestbed {
public:
    explicit VirtualTestbed(SimTopology topology, SimSwitchOptions sw_options = {},
                            session::SessionOptions session_options = {});
    ~VirtualTestbed();

    // Handshake over the virtual channel. Throws what accept_handshake throws.
    void connect();

    EventLoop& loop() { return loop_; }
    const Clock& clock() const { return loop_.clock(); }
    SimSwitch& sim() { return *switch_; }
    const std::shared_ptr<session::SwitchSession>& session() { return session_; }
    VirtualChannel& channel() { return *channel_; }

private:
    EventLoop loop_;
    std::unique_ptr<SimSwitch> switch_;
    std::shared_ptr<VirtualChannel> channel_;
    std::shared_ptr<session::SwitchSession> session_;
};

// ---------------------------------------------------------------- realtime

// Wall-clock scheduler with its own thread; all switch logic runs on that thread.
class RealtimeLoop final : public Scheduler {
public:
    RealtimeLoop();
    ~RealtimeLoop();

    TimePoint now() const override { return clock_.now(); }
    void schedule(TimePoint at, std::function<void()> fn) override;
    void post(std::function<void()> fn) { schedule(now(), std::move(fn)); }
    // Runs `fn` on the loop thread and waits for it.
    void call(const std::function<void()>& fn);
    void stop();

private:
    void run();

    SteadyClock clock_;
    std::mutex mu_;
    std::condition_variable cv_;
    struct Event {
        TimePoint at;
        std::uint64_t seq;
        std::function<void()> fn;
    };
    struct Later {
        bool operator()(const Event& a, const Event& b) const
        {
            return a.at != b.at ? a.at > b.at : a.seq > b.seq;
        }
    };
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    std::uint64_t seq_ = 0;
    bool stopping_ = false;
    std::thread thread_;
};

class RunningSwitch {
public:
    ~RunningSwitch();
    void stop();
    bool connected() const;
    std::vector<PacketOutTrace> pktout_log();
    std::vector<PacketInTrace> pktin_log();
    void inject(std::uint32_t port, Bytes frame);

private:
    friend std::unique_ptr<RunningSwitch> run_sim_switch(SimTopology, const std::string&, std::uint16_t,
                                                          SimSwitchOptions);
    class Link;
    RunningSwitch() = default;

    std::unique_ptr<RealtimeLoop> loop_;
    std::unique_ptr<SimSwitch> switch_;
    std::unique_ptr<Link> link_;
    std::shared_ptr<tcp::Fd> fd_;
    std::thread reader_;
    std::shared_ptr<std::atomic<bool>> alive_;
};

// Connects to the controller over TCP and runs the switch in real time. Throws ConnectFailed.
std::unique_ptr<RunningSwitch> run_sim_switch(SimTopology topology, const std::string& controller_host,
                                              std::uint16_t controller_port, SimSwitchOptions options = {});

} // namespace saami::netsim
