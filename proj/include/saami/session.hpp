#pragma once

// Controller side of a controller<->switch OpenFlow session.

#include "saami/clock.hpp"
#include "saami/net_types.hpp"
#include "saami/ofwire.hpp"
#include "saami/tcp.hpp"

#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace saami::session {

using namespace std::chrono_literals;

class SessionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SessionClosed : public SessionError {
public:
    SessionClosed() : SessionError("switch session closed") { }
};

class HandshakeTimeout : public SessionError {
public:
    HandshakeTimeout() : SessionError("OpenFlow handshake timed out") { }
};

class EchoTimeout : public SessionError {
public:
    EchoTimeout() : SessionError("OpenFlow echo timed out") { }
};

// Discrete-event drivers implement this so blocking waits advance simulated time
// instead of sleeping.
class EventPump {
public:
    virtual ~EventPump() = default;
    // Runs the next event if it is due at or before `deadline`. Otherwise moves time to
    // `deadline` and returns false.
    virtual bool run_one(TimePoint deadline) = 0;
};

// Byte stream towards one switch.
class Transport {
public:
    virtual ~Transport() = default;
    // Blocks under backpressure; never drops. Throws on a dead connection.
    virtual void write(std::span<const std::uint8_t> bytes) = 0;
    virtual void close() = 0;
    virtual EventPump* pump() { return nullptr; }
};

struct Timestamped {
    Bytes frame;
    TimePoint at;
};

using PacketInHandler = std::function<void(const Timestamped&, std::uint32_t in_port)>;

enum class SessionState { HandshakePending, Active, Closed };

const char* state_name(SessionState s);

struct SessionOptions {
    Duration handshake_timeout = 5s;
    Duration echo_timeout = 2s;
};

class SwitchSession {
public:
    SwitchSession(std::shared_ptr<Transport> transport, const Clock& clock, SessionOptions options = {});
    ~SwitchSession();

    SwitchSession(const SwitchSession&) = delete;
    SwitchSession& operator=(const SwitchSession&) = delete;

    // Exchanges Hello and Features. Throws ofwire::BadVersion or HandshakeTimeout and
    // leaves the session Closed on failure.
    void accept_handshake();

    // FlowMods sending ICMP echo replies, time exceeded and router-ID messages addressed to
    // `probe_src_ip` to the controller.
    void install_reply_flows(Ipv4Address probe_src_ip, std::uint16_t priority);

    // Returns the send timestamp, taken immediately before the write. Strictly increasing per session.
    TimePoint send_probe(std::uint32_t out_port, Bytes frame);

    void on_packet_in(PacketInHandler handler);

    // One OFEchoRequest/Reply round trip. Throws EchoTimeout or SessionClosed.
    Duration sample_switch_rtt();

    void send(const ofwire::Message& msg);
    std::uint32_t next_xid();

    // Transport side: bytes read from the switch, and connection loss.
    void on_bytes(std::span<const std::uint8_t> bytes);
    void on_disconnect();

    // Waits until `pred` (evaluated under the session lock) holds or `deadline` passes.
    bool wait_until(const std::function<bool()>& pred, TimePoint deadline);

    void close();

    SessionState state() const;
    std::uint64_t datapath_id() const;
    std::uint64_t id() const { return id_; }
    const Clock& clock() const { return clock_; }
    std::uint64_t packet_ins() const;
    std::optional<std::string> close_reason() const;

private:
    void mark_closed(std::string reason);
    void write_message(const ofwire::Message& msg);

    std::uint64_t id_;
    std::shared_ptr<Transport> transport_;
    const Clock& clock_;
    SessionOptions options_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    SessionState state_ = SessionState::HandshakePending;
    std::optional<std::string> close_reason_;
    std::optional<std::uint8_t> bad_version_;
    bool peer_hello_ = false;
    std::optional<std::uint32_t> features_xid_;
    std::optional<ofwire::FeaturesReplyBody> features_;
    std::uint64_t datapath_id_ = 0;
    ofwire::StreamFramer framer_;
    std::uint32_t next_xid_ = 1;
    struct PendingEcho {
        TimePoint sent;
        std::optional<TimePoint> replied;
    };
    std::map<std::uint32_t, PendingEcho> pending_echoes_;
    PacketInHandler handler_;
    std::uint64_t packet_ins_ = 0;

    std::mutex write_mu_;
    std::optional<TimePoint> last_send_;
};

// Listens for switches, runs the handshake on each connection and hands Active sessions
// to `on_active`. Each connection gets its own reader thread.
class OpenFlowListener {
public:
    using ActiveHook = std::function<void(const std::shared_ptr<SwitchSession>&)>;

    OpenFlowListener(const SteadyClock& clock, SessionOptions options = {});
    ~OpenFlowListener();

    // Returns the bound port.
    std::uint16_t listen(const std::string& address, std::uint16_t port);
    void start(ActiveHook on_active);
    void stop();

    std::vector<std::shared_ptr<SwitchSession>> sessions() const;
    // First Active session, or null.
    std::shared_ptr<SwitchSession> primary() const;

private:
    void serve_connection(tcp::Fd fd);

    const SteadyClock& clock_;
    SessionOptions options_;
    tcp::Fd listener_;
    ActiveHook on_active_;
    std::thread accept_thread_;
    mutable std::mutex mu_;
    std::vector<std::shared_ptr<SwitchSession>> sessions_;
    std::vector<std::thread> workers_;
    bool stopping_ = false;
};

} // namespace saami::session
