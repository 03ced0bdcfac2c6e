#include "saami/session.hpp"

#include "saami/pktlab.hpp"

#include <algorithm>
#include <array>
#include <atomic>

namespace saami::session {

namespace {

std::atomic<std::uint64_t> g_session_ids{1};

class TcpTransport final : public Transport {
public:
    explicit TcpTransport(std::shared_ptr<tcp::Fd> fd) : fd_(std::move(fd)) { }

    void write(std::span<const std::uint8_t> bytes) override
    {
        try {
            tcp::write_all(*fd_, bytes);
        } catch (const tcp::SocketError&) {
            throw SessionClosed();
        }
    }

    void close() override { fd_->shutdown(); }

private:
    std::shared_ptr<tcp::Fd> fd_;
};

} // namespace

const char* state_name(SessionState s)
{
    switch (s) {
    case SessionState::HandshakePending: return "handshake_pending";
    case SessionState::Active: return "active";
    case SessionState::Closed: return "closed";
    }
    return "unknown";
}

SwitchSession::SwitchSession(std::shared_ptr<Transport> transport, const Clock& clock, SessionOptions options)
    : id_(g_session_ids++), transport_(std::move(transport)), clock_(clock), options_(options)
{ }

SwitchSession::~SwitchSession() = default;

std::uint32_t SwitchSession::next_xid()
{
    std::lock_guard lk(mu_);
    auto xid = next_xid_++;
    if (next_xid_ == 0)
        next_xid_ = 1;
    return xid;
}

void SwitchSession::write_message(const ofwire::Message& msg)
{
    const auto bytes = ofwire::encode_message(msg);
    std::lock_guard lk(write_mu_);
    try {
        transport_->write(bytes);
    } catch (const SessionClosed&) {
        mark_closed("write failed");
        throw;
    }
}

void SwitchSession::send(const ofwire::Message& msg)
{
    if (state() == SessionState::Closed)
        throw SessionClosed();
    write_message(msg);
}

void SwitchSession::accept_handshake()
{
    const auto deadline = clock_.now() + options_.handshake_timeout;
    const auto fail_if_closed = [this] {
        std::lock_guard lk(mu_);
        if (state_ != SessionState::Closed)
            return;
        if (bad_version_)
            throw ofwire::BadVersion(*bad_version_);
        throw SessionClosed();
    };

    write_message(ofwire::hello(next_xid()));
    if (!wait_until([this] { return peer_hello_ || state_ == SessionState::Closed; }, deadline)) {
        mark_closed("handshake timeout");
        throw HandshakeTimeout();
    }
    fail_if_closed();

    const auto xid = next_xid();
    {
        std::lock_guard lk(mu_);
        features_xid_ = xid;
    }
    write_message(ofwire::features_request(xid));
    if (!wait_until([this] { return features_.has_value() || state_ == SessionState::Closed; }, deadline)) {
        mark_closed("handshake timeout");
        throw HandshakeTimeout();
    }
    fail_if_closed();

    std::lock_guard lk(mu_);
    datapath_id_ = features_->datapath_id;
    state_ = SessionState::Active;
}

void SwitchSession::install_reply_flows(Ipv4Address probe_src_ip, std::uint16_t priority)
{
    if (state() != SessionState::Active)
        throw SessionClosed();
    for (std::uint8_t icmp_type : {pktlab::kIcmpEchoReply, pktlab::kIcmpTimeExceeded, pktlab::kIcmpRouterId}) {
        ofwire::FlowModBody fm;
        fm.priority = priority;
        fm.cookie = icmp_type;
        fm.match.eth_type(pktlab::kEthTypeIpv4).ip_proto(pktlab::kIpProtoIcmp).ipv4_dst(probe_src_ip).icmpv4_type(
            icmp_type);
        write_message(ofwire::flow_mod(next_xid(), std::move(fm)));
    }
}

TimePoint SwitchSession::send_probe(std::uint32_t out_port, Bytes frame)
{
    if (state() != SessionState::Active)
        throw SessionClosed();
    const auto bytes = ofwire::encode_message(ofwire::packet_out(next_xid(), out_port, std::move(frame)));
    std::lock_guard lk(write_mu_);
    auto t = clock_.now();
    // Two writes inside one clock tick still get distinct, ordered stamps.
    if (last_send_ && t <= *last_send_)
        t = *last_send_ + Duration{1};
    last_send_ = t;
    try {
        transport_->write(bytes);
    } catch (const SessionClosed&) {
        mark_closed("write failed");
        throw;
    }
    return t;
}

void SwitchSession::on_packet_in(PacketInHandler handler)
{
    std::lock_guard lk(mu_);
    handler_ = std::move(handler);
}

Duration SwitchSession::sample_switch_rtt()
{
    if (state() != SessionState::Active)
        throw SessionClosed();
    const auto xid = next_xid();
    const auto bytes = ofwire::encode_message(ofwire::echo_request(xid));
    {
        std::lock_guard wl(write_mu_);
        {
            std::lock_guard lk(mu_);
            pending_echoes_[xid] = PendingEcho{clock_.now(), std::nullopt};
        }
        try {
            transport_->write(bytes);
        } catch (const SessionClosed&) {
            std::lock_guard lk(mu_);
            pending_echoes_.erase(xid);
            throw;
        }
    }
    const auto deadline = clock_.now() + options_.echo_timeout;
    const bool done = wait_until(
        [&] {
            auto it = pending_echoes_.find(xid);
            return state_ == SessionState::Closed || (it != pending_echoes_.end() && it->second.replied);
        },
        deadline);

    std::lock_guard lk(mu_);
    auto node = pending_echoes_.extract(xid);
    if (!done || node.empty() || !node.mapped().replied) {
        if (state_ == SessionState::Closed)
            throw SessionClosed();
        throw EchoTimeout();
    }
    return *node.mapped().replied - node.mapped().sent;
}

void SwitchSession::on_bytes(std::span<const std::uint8_t> bytes)
{
    const auto now = clock_.now();
    std::vector<ofwire::Message> replies;
    std::vector<std::pair<Timestamped, std::uint32_t>> packet_ins;
    PacketInHandler handler;
    {
        std::lock_guard lk(mu_);
        if (state_ == SessionState::Closed)
            return;
        std::vector<ofwire::Message> msgs;
        try {
            msgs = framer_.feed(bytes);
        } catch (const ofwire::BadVersion& e) {
            bad_version_ = e.got();
            state_ = SessionState::Closed;
            close_reason_ = "protocol version mismatch";
        } catch (const ofwire::WireError& e) {
            state_ = SessionState::Closed;
            close_reason_ = e.what();
        }
        for (auto& m : msgs) {
            switch (m.type) {
            case ofwire::MsgType::Hello:
                peer_hello_ = true;
                break;
            case ofwire::MsgType::EchoRequest:
                replies.push_back(ofwire::echo_reply(m.xid, std::get<ofwire::EchoBody>(m.body).data));
                break;
            case ofwire::MsgType::EchoReply: {
                auto it = pending_echoes_.find(m.xid);
                if (it != pending_echoes_.end() && !it->second.replied)
                    it->second.replied = std::max(now, it->second.sent);
                break;
            }
            case ofwire::MsgType::FeaturesReply:
                if (features_xid_ && m.xid == *features_xid_)
                    features_ = std::get<ofwire::FeaturesReplyBody>(m.body);
                break;
            case ofwire::MsgType::PacketIn: {
                auto& body = std::get<ofwire::PacketInBody>(m.body);
                ++packet_ins_;
                packet_ins.push_back({Timestamped{std::move(body.frame), now}, body.in_port});
                break;
            }
            default:
                break;
            }
        }
        handler = handler_;
    }
    cv_.notify_all();
    if (state() == SessionState::Closed) {
        transport_->close();
        return;
    }
    for (const auto& r : replies) {
        try {
            write_message(r);
        } catch (const SessionClosed&) {
            return;
        }
    }
    if (handler) {
        for (const auto& [ts, port] : packet_ins)
            handler(ts, port);
    }
}

void SwitchSession::on_disconnect() { mark_closed("peer disconnected"); }

void SwitchSession::mark_closed(std::string reason)
{
    {
        std::lock_guard lk(mu_);
        if (state_ == SessionState::Closed)
            return;
        state_ = SessionState::Closed;
        close_reason_ = std::move(reason);
    }
    cv_.notify_all();
}

void SwitchSession::close()
{
    mark_closed("closed locally");
    transport_->close();
}

bool SwitchSession::wait_until(const std::function<bool()>& pred, TimePoint deadline)
{
    if (auto* pump = transport_->pump()) {
        for (;;) {
            {
                std::lock_guard lk(mu_);
                if (pred())
                    return true;
            }
            if (clock_.now() >= deadline)
                return false;
            pump->run_one(deadline);
        }
    }
    std::unique_lock lk(mu_);
    for (;;) {
        if (pred())
            return true;
        const auto remaining = deadline - clock_.now();
        if (remaining <= Duration::zero())
            return false;
        cv_.wait_for(lk, remaining);
    }
}

SessionState SwitchSession::state() const
{
    std::lock_guard lk(mu_);
    return state_;
}

std::uint64_t SwitchSession::datapath_id() const
{
    std::lock_guard lk(mu_);
    return datapath_id_;
}

std::uint64_t SwitchSession::packet_ins() const
{
    std::lock_guard lk(mu_);
    return packet_ins_;
}

std::optional<std::string> SwitchSession::close_reason() const
{
    std::lock_guard lk(mu_);
    return close_reason_;
}

// ---------------------------------------------------------------- listener

OpenFlowListener::OpenFlowListener(const SteadyClock& clock, SessionOptions options)
    : clock_(clock), options_(options)
{ }

OpenFlowListener::~OpenFlowListener() { stop(); }

std::uint16_t OpenFlowListener::listen(const std::string& address, std::uint16_t port)
{
    auto [fd, bound] = tcp::listen(address, port);
    listener_ = std::move(fd);
    return bound;
}

void OpenFlowListener::start(ActiveHook on_active)
{
    on_active_ = std::move(on_active);
    accept_thread_ = std::thread([this] {
        for (;;) {
            auto conn = tcp::accept(listener_);
            std::lock_guard lk(mu_);
            if (!conn || stopping_)
                return;
            workers_.emplace_back([this, c = std::move(conn)]() mutable { serve_connection(std::move(c)); });
        }
    });
}

void OpenFlowListener::serve_connection(tcp::Fd fd)
{
    auto shared_fd = std::make_shared<tcp::Fd>(std::move(fd));
    auto session = std::make_shared<SwitchSession>(std::make_shared<TcpTransport>(shared_fd), clock_, options_);
    {
        std::lock_guard lk(mu_);
        if (stopping_)
            return;
        sessions_.push_back(session);
    }
    std::thread reader([session, shared_fd] {
        std::array<std::uint8_t, 65536> buf{};
        for (;;) {
            const auto n = tcp::read_some(*shared_fd, buf);
            if (n <= 0)
                break;
            session->on_bytes(std::span<const std::uint8_t>(buf.data(), static_cast<std::size_t>(n)));
        }
        session->on_disconnect();
    });
    try {
        session->accept_handshake();
        if (on_active_)
            on_active_(session);
    } catch (const std::exception&) {
        session->close();
    }
    reader.join();
}

void OpenFlowListener::stop()
{
    std::vector<std::thread> workers;
    std::vector<std::shared_ptr<SwitchSession>> sessions;
    {
        std::lock_guard lk(mu_);
        if (stopping_)
            return;
        stopping_ = true;
        sessions = sessions_;
    }
    listener_.shutdown();
    if (accept_thread_.joinable())
        accept_thread_.join();
    for (auto& s : sessions)
        s->close();
    {
        std::lock_guard lk(mu_);
        workers.swap(workers_);
    }
    for (auto& w : workers)
        w.join();
    listener_.reset();
}

std::vector<std::shared_ptr<SwitchSession>> OpenFlowListener::sessions() const
{
    std::lock_guard lk(mu_);
    return sessions_;
}

std::shared_ptr<SwitchSession> OpenFlowListener::primary() const
{
    std::lock_guard lk(mu_);
    for (const auto& s : sessions_)
        if (s->state() == SessionState::Active)
            return s;
    return nullptr;
}

} // namespace saami::session
