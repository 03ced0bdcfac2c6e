#include "saami/probeengine.hpp"

#include <algorithm>
#include <cmath>

namespace saami::probe {

Duration RttEstimator::value() const
{
    if (!current_us)
        return Duration::zero();
    return Duration{static_cast<std::int64_t>(std::llround(*current_us))};
}

RttEstimator ewma_update(RttEstimator e, Duration sample)
{
    if (sample < Duration::zero())
        throw NegativeSample();
    if (!(e.alpha > 0.0 && e.alpha <= 1.0))
        throw std::invalid_argument("EWMA alpha must be in (0, 1]");
    const auto s = static_cast<double>(sample.count());
    if (!e.current_us)
        e.current_us = s;
    else
        e.current_us = e.alpha * s + (1.0 - e.alpha) * *e.current_us;
    ++e.sample_count;
    return e;
}

std::optional<Duration> estimate_rtt(const ProbeRecord& rec, Duration rtt_cs)
{
    if (!rec.t_in)
        return std::nullopt;
    return std::max(Duration::zero(), (*rec.t_in - rec.t_out) - rtt_cs);
}

const char* termination_name(Termination t)
{
    switch (t) {
    case Termination::InProgress: return "in_progress";
    case Termination::DestinationReached: return "destination_reached";
    case Termination::MaxTtl: return "max_ttl";
    }
    return "unknown";
}

// ---------------------------------------------------------------- traceroute task

std::uint16_t TracerouteTask::seq_for(int ttl, std::uint32_t index) const
{
    return static_cast<std::uint16_t>(static_cast<std::uint32_t>(ttl - 1) * probes_per_ttl + index);
}

std::pair<int, std::uint32_t> TracerouteTask::ttl_index(std::uint16_t seq) const
{
    return {static_cast<int>(seq / probes_per_ttl) + 1, seq % probes_per_ttl};
}

std::optional<int> TracerouteTask::destination_ttl() const
{
    std::optional<int> best;
    for (const auto& r : records) {
        if (r.t_in && r.reply_kind == pktlab::ReplyKind::EchoReply && r.responder == target) {
            const int ttl = ttl_index(r.icmp_seq).first;
            if (!best || ttl < *best)
                best = ttl;
        }
    }
    return best;
}

Termination TracerouteTask::terminated(TimePoint now, Duration timeout) const
{
    if (destination_ttl())
        return Termination::DestinationReached;
    if (!issuing_done || records.size() < static_cast<std::size_t>(max_ttl) * probes_per_ttl)
        return Termination::InProgress;
    for (const auto& r : records)
        if (!r.t_in && now - r.t_out < timeout)
            return Termination::InProgress;
    return Termination::MaxTtl;
}

std::map<int, std::vector<HopProbe>> TracerouteTask::hops() const
{
    std::map<int, std::vector<HopProbe>> out;
    if (records.empty())
        return out;
    const int issued = ttl_index(static_cast<std::uint16_t>(records.size() - 1)).first;
    const int last = destination_ttl().value_or(issued);
    for (int ttl = 1; ttl <= last; ++ttl) {
        auto& row = out[ttl];
        for (std::uint32_t i = 0; i < probes_per_ttl; ++i) {
            const auto seq = seq_for(ttl, i);
            HopProbe hp;
            if (seq < records.size()) {
                hp.responder = records[seq].responder;
                hp.rtt = estimate_rtt(records[seq], rtt_cs_at_start);
            }
            row.push_back(hp);
        }
    }
    return out;
}

// ---------------------------------------------------------------- id allocator

std::uint16_t IdAllocator::allocate()
{
    if (count_ == kCapacity)
        throw StateFull();
    while (used_.test(next_))
        ++next_;
    const auto id = next_++;
    used_.set(id);
    ++count_;
    return id;
}

void IdAllocator::release(std::uint16_t id)
{
    if (used_.test(id)) {
        used_.reset(id);
        --count_;
    }
}

void IdAllocator::clear()
{
    used_.reset();
    count_ = 0;
}

// ---------------------------------------------------------------- engine

ProbeEngine::ProbeEngine(EngineConfig config, const Clock& clock) : config_(std::move(config)), clock_(clock)
{
    if (!(config_.ewma_alpha > 0.0 && config_.ewma_alpha <= 1.0))
        throw std::invalid_argument("EWMA alpha must be in (0, 1]");
    estimator_.alpha = config_.ewma_alpha;
}

void ProbeEngine::attach(std::shared_ptr<session::SwitchSession> s)
{
    s->on_packet_in([this](const session::Timestamped& f, std::uint32_t port) { handle_packet_in(f, port); });
    s->install_reply_flows(config_.probe_src_ip, config_.flow_priority);
    std::lock_guard lk(mu_);
    session_ = std::move(s);
}

std::shared_ptr<session::SwitchSession> ProbeEngine::session() const
{
    std::lock_guard lk(mu_);
    return session_;
}

std::shared_ptr<session::SwitchSession> ProbeEngine::require_session() const
{
    auto s = session();
    if (!s || s->state() != session::SessionState::Active)
        throw NoSession();
    return s;
}

Duration ProbeEngine::refresh_rtt_cs()
{
    auto s = require_session();
    const auto sample = s->sample_switch_rtt();
    std::lock_guard lk(mu_);
    estimator_ = ewma_update(estimator_, sample);
    return estimator_.value();
}

ProbeEngine::Started ProbeEngine::begin_task(Kind kind, Ipv4Address, std::uint32_t out_port,
                                             const std::function<void(std::uint16_t)>& register_task)
{
    auto s = require_session();
    std::uint16_t id = 0;
    {
        std::lock_guard lk(mu_);
        id = ids_.allocate();
        register_task(id);
    }
    try {
        s->send_probe(out_port, pktlab::build_gratuitous_arp(config_.probe_src_ip, config_.probe_src_mac));
        const auto sample = s->sample_switch_rtt();
        std::lock_guard lk(mu_);
        estimator_ = ewma_update(estimator_, sample);
        return Started{s, id, estimator_.value()};
    } catch (...) {
        abort_task(kind, id);
        throw;
    }
}

void ProbeEngine::abort_task(Kind kind, std::uint16_t id)
{
    std::lock_guard lk(mu_);
    switch (kind) {
    case Kind::Ping: pings_.erase(id); break;
    case Kind::Traceroute: traces_.erase(id); break;
    case Kind::RouterId: router_ids_.erase(id); break;
    }
    ids_.release(id);
}

std::uint16_t ProbeEngine::start_ping(Ipv4Address target, std::uint32_t num, std::string payload,
                                      std::optional<std::uint32_t> out_port)
{
    if (num < 1 || num > config_.max_probes_per_task)
        throw InvalidTask("num must be between 1 and " + std::to_string(config_.max_probes_per_task));
    if (payload.size() > pktlab::kIpMtu - pktlab::kIpv4Header - pktlab::kIcmpHeader)
        throw InvalidTask("payload does not fit in one IPv4 packet");
    const auto port = out_port.value_or(config_.default_out_port);

    auto started = begin_task(Kind::Ping, target, port, [&](std::uint16_t id) {
        PingTask t;
        t.icmp_id = id;
        t.target = target;
        t.num_probes = num;
        t.payload = payload;
        t.out_port = port;
        pings_[id] = std::move(t);
    });
    const auto id = started.icmp_id;
    {
        std::lock_guard lk(mu_);
        pings_[id].rtt_cs_at_start = started.rtt_cs;
    }

    pktlab::EchoProbe probe;
    probe.src_mac = config_.probe_src_mac;
    probe.dst_mac = config_.next_hop_mac;
    probe.src_ip = config_.probe_src_ip;
    probe.dst_ip = target;
    probe.icmp_id = id;
    probe.payload.assign(payload.begin(), payload.end());
    try {
        for (std::uint32_t seq = 0; seq < num; ++seq) {
            probe.icmp_seq = static_cast<std::uint16_t>(seq);
            auto frame = pktlab::build_echo_request(probe);
            {
                std::lock_guard lk(mu_);
                ProbeRecord rec;
                rec.icmp_id = id;
                rec.icmp_seq = probe.icmp_seq;
                rec.target = target;
                rec.ttl_sent = probe.ttl;
                rec.t_out = clock_.now();
                pings_[id].records.push_back(rec);
            }
            const auto t_out = started.session->send_probe(port, std::move(frame));
            std::lock_guard lk(mu_);
            pings_[id].records[seq].t_out = t_out;
        }
    } catch (...) {
        abort_task(Kind::Ping, id);
        throw;
    }
    return id;
}

std::uint16_t ProbeEngine::start_traceroute(Ipv4Address target, std::uint32_t probes_per_ttl,
                                            std::optional<std::uint32_t> out_port)
{
    if (probes_per_ttl < 1 || probes_per_ttl > config_.max_probes_per_ttl)
        throw InvalidTask("probes_per_ttl must be between 1 and " + std::to_string(config_.max_probes_per_ttl));
    const auto port = out_port.value_or(config_.default_out_port);

    auto started = begin_task(Kind::Traceroute, target, port, [&](std::uint16_t id) {
        TracerouteTask t;
        t.icmp_id = id;
        t.target = target;
        t.probes_per_ttl = probes_per_ttl;
        t.out_port = port;
        traces_[id] = std::move(t);
    });
    const auto id = started.icmp_id;
    {
        std::lock_guard lk(mu_);
        traces_[id].rtt_cs_at_start = started.rtt_cs;
    }

    pktlab::EchoProbe probe;
    probe.src_mac = config_.probe_src_mac;
    probe.dst_mac = config_.next_hop_mac;
    probe.src_ip = config_.probe_src_ip;
    probe.dst_ip = target;
    probe.icmp_id = id;
    try {
        for (int ttl = 1; ttl <= kMaxTtl; ++ttl) {
            for (std::uint32_t i = 0; i < probes_per_ttl; ++i) {
                std::size_t seq = 0;
                {
                    std::lock_guard lk(mu_);
                    auto& task = traces_[id];
                    seq = task.records.size();
                    ProbeRecord rec;
                    rec.icmp_id = id;
                    rec.icmp_seq = task.seq_for(ttl, i);
                    rec.target = target;
                    rec.ttl_sent = static_cast<std::uint8_t>(ttl);
                    rec.t_out = clock_.now();
                    probe.icmp_seq = rec.icmp_seq;
                    task.records.push_back(rec);
                }
                probe.ttl = static_cast<std::uint8_t>(ttl);
                const auto t_out = started.session->send_probe(port, pktlab::build_echo_request(probe));
                std::lock_guard lk(mu_);
                traces_[id].records[seq].t_out = t_out;
            }
            if (config_.traceroute_gap > Duration::zero() && ttl < kMaxTtl) {
                started.session->wait_until([] { return false; }, clock_.now() + config_.traceroute_gap);
                std::lock_guard lk(mu_);
                if (traces_[id].destination_ttl())
                    break;
            }
        }
    } catch (...) {
        abort_task(Kind::Traceroute, id);
        throw;
    }
    std::lock_guard lk(mu_);
    traces_[id].issuing_done = true;
    return id;
}

std::uint16_t ProbeEngine::start_router_id_query(Ipv4Address target, std::optional<std::uint32_t> out_port)
{
    const auto port = out_port.value_or(config_.default_out_port);
    auto started = begin_task(Kind::RouterId, target, port, [&](std::uint16_t id) {
        RouterIdTask t;
        t.icmp_id = id;
        t.target = target;
        t.out_port = port;
        t.record.icmp_id = id;
        t.record.target = target;
        router_ids_[id] = std::move(t);
    });
    const auto id = started.icmp_id;

    pktlab::RouterIdQuery q;
    q.src_mac = config_.probe_src_mac;
    q.dst_mac = config_.next_hop_mac;
    q.src_ip = config_.probe_src_ip;
    q.dst_ip = target;
    q.icmp_id = id;
    q.icmp_seq = 0;
    try {
        {
            std::lock_guard lk(mu_);
            auto& t = router_ids_[id];
            t.rtt_cs_at_start = started.rtt_cs;
            t.record.t_out = clock_.now();
            t.sent = true;
        }
        const auto t_out = started.session->send_probe(port, pktlab::build_router_id_query(q));
        std::lock_guard lk(mu_);
        router_ids_[id].record.t_out = t_out;
    } catch (...) {
        abort_task(Kind::RouterId, id);
        throw;
    }
    return id;
}

bool ProbeEngine::record_reply(ProbeRecord& rec, const pktlab::ParsedReply& reply, TimePoint t_in)
{
    if (rec.t_in) {
        ++counters_.duplicates;
        return false;
    }
    if (t_in - rec.t_out > config_.probe_timeout) {
        ++counters_.late;
        return false;
    }
    rec.t_in = std::max(t_in, rec.t_out);
    rec.responder = reply.responder;
    rec.reply_kind = reply.kind;
    ++counters_.replies;
    return true;
}

void ProbeEngine::handle_reply(const pktlab::ParsedReply& reply, TimePoint t_in)
{
    std::lock_guard lk(mu_);
    const auto id = reply.icmp_id;
    const auto seq = reply.icmp_seq;
    switch (reply.kind) {
    case pktlab::ReplyKind::EchoReply: {
        if (auto it = pings_.find(id); it != pings_.end() && seq < it->second.records.size()) {
            record_reply(it->second.records[seq], reply, t_in);
            return;
        }
        if (auto it = traces_.find(id); it != traces_.end() && seq < it->second.records.size()) {
            record_reply(it->second.records[seq], reply, t_in);
            return;
        }
        ++counters_.unknown;
        return;
    }
    case pktlab::ReplyKind::TimeExceeded: {
        if (auto it = traces_.find(id); it != traces_.end() && seq < it->second.records.size()) {
            record_reply(it->second.records[seq], reply, t_in);
            return;
        }
        ++counters_.unknown;
        return;
    }
    case pktlab::ReplyKind::RouterIdReply: {
        auto it = router_ids_.find(id);
        if (it == router_ids_.end() || seq != 0 || !it->second.sent) {
            ++counters_.unknown;
            return;
        }
        if (record_reply(it->second.record, reply, t_in))
            it->second.identity = reply.identity;
        return;
    }
    case pktlab::ReplyKind::Other:
        ++counters_.ignored;
        return;
    }
}

void ProbeEngine::handle_packet_in(const session::Timestamped& frame, std::uint32_t in_port)
{
    if (pktlab::parse_router_id_query(frame.frame)) {
        serve_router_id(frame, in_port);
        return;
    }
    pktlab::ParsedReply reply;
    try {
        reply = pktlab::parse_reply(frame.frame);
    } catch (const pktlab::MalformedFrame&) {
        std::lock_guard lk(mu_);
        ++counters_.ignored;
        return;
    }
    handle_reply(reply, frame.at);
}

void ProbeEngine::serve_router_id(const session::Timestamped& frame, std::uint32_t in_port)
{
    std::shared_ptr<session::SwitchSession> s;
    pktlab::RouterIdentity identity;
    {
        std::lock_guard lk(mu_);
        if (!serving_ || !identity_ || !session_) {
            ++counters_.ignored;
            return;
        }
        identity = *identity_;
        s = session_;
    }
    try {
        s->send_probe(in_port, pktlab::build_router_id_reply(frame.frame, identity));
    } catch (const std::exception&) {
        std::lock_guard lk(mu_);
        ++counters_.ignored;
        return;
    }
    std::lock_guard lk(mu_);
    ++counters_.router_id_served;
}

void ProbeEngine::set_router_identity(std::optional<pktlab::RouterIdentity> identity)
{
    if (identity && !identity->valid())
        throw InvalidTask("router identity needs a 1 to 64 byte identifier");
    std::lock_guard lk(mu_);
    identity_ = std::move(identity);
}

std::optional<pktlab::RouterIdentity> ProbeEngine::router_identity() const
{
    std::lock_guard lk(mu_);
    return identity_;
}

void ProbeEngine::set_serving(bool enabled)
{
    std::lock_guard lk(mu_);
    serving_ = enabled;
}

bool ProbeEngine::serving() const
{
    std::lock_guard lk(mu_);
    return serving_;
}

namespace {

template <class Task>
std::vector<Task> values_of(const std::map<std::uint16_t, Task>& m)
{
    std::vector<Task> out;
    out.reserve(m.size());
    for (const auto& [id, t] : m)
        out.push_back(t);
    return out;
}

} // namespace

PingDump ProbeEngine::dump_pings() const
{
    std::lock_guard lk(mu_);
    return PingDump{clock_.now(), values_of(pings_)};
}

TracerouteDump ProbeEngine::dump_traceroutes() const
{
    std::lock_guard lk(mu_);
    return TracerouteDump{clock_.now(), config_.probe_timeout, values_of(traces_)};
}

RouterIdDump ProbeEngine::dump_router_ids() const
{
    std::lock_guard lk(mu_);
    return RouterIdDump{clock_.now(), values_of(router_ids_)};
}

PingDump ProbeEngine::clear_pings()
{
    std::lock_guard lk(mu_);
    PingDump d{clock_.now(), values_of(pings_)};
    for (const auto& [id, t] : pings_)
        ids_.release(id);
    pings_.clear();
    return d;
}

TracerouteDump ProbeEngine::clear_traceroutes()
{
    std::lock_guard lk(mu_);
    TracerouteDump d{clock_.now(), config_.probe_timeout, values_of(traces_)};
    for (const auto& [id, t] : traces_)
        ids_.release(id);
    traces_.clear();
    return d;
}

RouterIdDump ProbeEngine::clear_router_ids()
{
    std::lock_guard lk(mu_);
    RouterIdDump d{clock_.now(), values_of(router_ids_)};
    for (const auto& [id, t] : router_ids_)
        ids_.release(id);
    router_ids_.clear();
    return d;
}

bool ProbeEngine::record_settled(const ProbeRecord& rec, TimePoint now) const
{
    return rec.t_in.has_value() || now - rec.t_out >= config_.probe_timeout;
}

bool ProbeEngine::ping_complete(std::uint16_t icmp_id) const
{
    std::lock_guard lk(mu_);
    auto it = pings_.find(icmp_id);
    if (it == pings_.end())
        return true;
    const auto now = clock_.now();
    const auto& t = it->second;
    if (t.records.size() < t.num_probes)
        return false;
    return std::all_of(t.records.begin(), t.records.end(), [&](const auto& r) { return record_settled(r, now); });
}

bool ProbeEngine::traceroute_complete(std::uint16_t icmp_id) const
{
    std::lock_guard lk(mu_);
    auto it = traces_.find(icmp_id);
    if (it == traces_.end())
        return true;
    const auto now = clock_.now();
    const auto& t = it->second;
    if (!t.issuing_done)
        return false;
    switch (t.terminated(now, config_.probe_timeout)) {
    case Termination::InProgress:
        return false;
    case Termination::MaxTtl:
        return true;
    case Termination::DestinationReached: {
        const int dest = *t.destination_ttl();
        for (const auto& r : t.records)
            if (t.ttl_index(r.icmp_seq).first <= dest && !record_settled(r, now))
                return false;
        return true;
    }
    }
    return true;
}

bool ProbeEngine::router_id_complete(std::uint16_t icmp_id) const
{
    std::lock_guard lk(mu_);
    auto it = router_ids_.find(icmp_id);
    if (it == router_ids_.end())
        return true;
    return it->second.sent && record_settled(it->second.record, clock_.now());
}

RttEstimator ProbeEngine::estimator() const
{
    std::lock_guard lk(mu_);
    return estimator_;
}

EngineCounters ProbeEngine::counters() const
{
    std::lock_guard lk(mu_);
    return counters_;
}

std::size_t ProbeEngine::ids_in_use() const
{
    std::lock_guard lk(mu_);
    return ids_.size();
}

} // namespace saami::probe
