#include "saami/netsim.hpp"

#include "saami/tcp.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace saami::netsim {

using namespace std::chrono_literals;

// ---------------------------------------------------------------- durations

Duration parse_duration(const std::string& text)
{
    std::size_t split = 0;
    while (split < text.size() && (std::isdigit(static_cast<unsigned char>(text[split])) || text[split] == '.'))
        ++split;
    if (split == 0)
        throw TopologyError("bad duration '" + text + "'");
    double value = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + split, value);
    if (ec != std::errc{} || ptr != text.data() + split)
        throw TopologyError("bad duration '" + text + "'");
    const auto unit = text.substr(split);
    double scale = 0;
    if (unit == "us")
        scale = 1;
    else if (unit == "ms")
        scale = 1e3;
    else if (unit == "s")
        scale = 1e6;
    else
        throw TopologyError("bad duration unit in '" + text + "'");
    return Duration{static_cast<std::int64_t>(std::llround(value * scale))};
}

std::string format_duration(Duration d)
{
    const auto us = d.count();
    if (us != 0 && us % 1000 == 0)
        return std::to_string(us / 1000) + "ms";
    return std::to_string(us) + "us";
}

// ---------------------------------------------------------------- delay models

DelayModel DelayModel::constant(Duration d)
{
    if (d < Duration::zero())
        throw TopologyError("negative delay");
    DelayModel m;
    m.kind_ = Kind::Constant;
    m.lo_ = m.hi_ = d;
    return m;
}

DelayModel DelayModel::uniform(Duration lo, Duration hi)
{
    if (lo < Duration::zero() || hi < lo)
        throw TopologyError("invalid uniform delay range");
    DelayModel m;
    m.kind_ = Kind::Uniform;
    m.lo_ = lo;
    m.hi_ = hi;
    return m;
}

DelayModel DelayModel::mixture(std::vector<std::pair<double, DelayModel>> parts)
{
    if (parts.empty())
        throw TopologyError("empty mixture");
    double total = 0;
    for (const auto& [p, sub] : parts) {
        if (!(p >= 0.0 && p <= 1.0))
            throw TopologyError("mixture probability out of range");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw TopologyError("mixture probabilities must sum to 1");
    DelayModel m;
    m.kind_ = Kind::Mixture;
    m.parts_ = std::move(parts);
    m.lo_ = m.min();
    m.hi_ = m.max();
    return m;
}

DelayModel DelayModel::default_pktout()
{
    return mixture({
        {0.97, uniform(1500us, 2000us)},
        {0.02, constant(23ms)},
        {0.01, constant(50ms)},
    });
}

DelayModel DelayModel::default_pktin()
{
    return mixture({
        {0.95, uniform(300us, 1000us)},
        {0.05, uniform(1001us, 3000us)},
    });
}

Duration DelayModel::sample(Rng& rng) const
{
    switch (kind_) {
    case Kind::Constant:
        return lo_;
    case Kind::Uniform:
        return Duration{std::uniform_int_distribution<std::int64_t>(lo_.count(), hi_.count())(rng)};
    case Kind::Mixture: {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double acc = 0;
        for (const auto& [p, sub] : parts_) {
            acc += p;
            if (u < acc)
                return sub.sample(rng);
        }
        return parts_.back().second.sample(rng);
    }
    }
    return Duration::zero();
}

double DelayModel::cdf(Duration x) const
{
    switch (kind_) {
    case Kind::Constant:
        return x >= lo_ ? 1.0 : 0.0;
    case Kind::Uniform:
        if (x < lo_)
            return 0.0;
        if (x >= hi_)
            return 1.0;
        return static_cast<double>((x - lo_).count() + 1) / static_cast<double>((hi_ - lo_).count() + 1);
    case Kind::Mixture: {
        double acc = 0;
        for (const auto& [p, sub] : parts_)
            acc += p * sub.cdf(x);
        return acc;
    }
    }
    return 0.0;
}

Duration DelayModel::min() const
{
    if (kind_ != Kind::Mixture)
        return lo_;
    Duration m = Duration::max();
    for (const auto& [p, sub] : parts_)
        if (p > 0)
            m = std::min(m, sub.min());
    return m;
}

Duration DelayModel::max() const
{
    if (kind_ != Kind::Mixture)
        return hi_;
    Duration m = Duration::zero();
    for (const auto& [p, sub] : parts_)
        if (p > 0)
            m = std::max(m, sub.max());
    return m;
}

double DelayModel::mean_us() const
{
    switch (kind_) {
    case Kind::Constant:
        return static_cast<double>(lo_.count());
    case Kind::Uniform:
        return (static_cast<double>(lo_.count()) + static_cast<double>(hi_.count())) / 2.0;
    case Kind::Mixture: {
        double acc = 0;
        for (const auto& [p, sub] : parts_)
            acc += p * sub.mean_us();
        return acc;
    }
    }
    return 0.0;
}

namespace {

std::string format_probability(double p)
{
    std::ostringstream os;
    os.precision(17);
    os << p;
    return os.str();
}

std::string simple_to_string(const DelayModel& m)
{
    if (m.kind() == DelayModel::Kind::Constant)
        return "constant " + format_duration(m.min());
    return "uniform " + format_duration(m.min()) + " " + format_duration(m.max());
}

std::vector<std::string> split_words(const std::string& text)
{
    std::istringstream is(text);
    std::vector<std::string> out;
    for (std::string w; is >> w;)
        out.push_back(w);
    return out;
}

DelayModel parse_simple(const std::vector<std::string>& w, std::size_t& i)
{
    if (i >= w.size())
        throw TopologyError("missing delay model");
    if (w[i] == "constant") {
        if (i + 1 >= w.size())
            throw TopologyError("constant needs a value");
        auto m = DelayModel::constant(parse_duration(w[i + 1]));
        i += 2;
        return m;
    }
    if (w[i] == "uniform") {
        if (i + 2 >= w.size())
            throw TopologyError("uniform needs two values");
        auto m = DelayModel::uniform(parse_duration(w[i + 1]), parse_duration(w[i + 2]));
        i += 3;
        return m;
    }
    throw TopologyError("unknown delay model '" + w[i] + "'");
}

} // namespace

std::string DelayModel::to_string() const
{
    if (kind_ != Kind::Mixture)
        return simple_to_string(*this);
    std::string out = "mixture";
    for (std::size_t i = 0; i < parts_.size(); ++i) {
        if (parts_[i].second.kind() == Kind::Mixture)
            throw TopologyError("nested mixtures have no text form");
        out += (i ? " | " : " ") + format_probability(parts_[i].first) + " " + simple_to_string(parts_[i].second);
    }
    return out;
}

DelayModel DelayModel::parse(const std::string& text)
{
    const auto w = split_words(text);
    if (w.empty())
        throw TopologyError("empty delay model");
    std::size_t i = 0;
    if (w[0] != "mixture") {
        auto m = parse_simple(w, i);
        if (i != w.size())
            throw TopologyError("trailing text after delay model: " + text);
        return m;
    }
    i = 1;
    std::vector<std::pair<double, DelayModel>> parts;
    for (;;) {
        if (i >= w.size())
            throw TopologyError("incomplete mixture: " + text);
        double p = 0;
        const auto& ws = w[i];
        const auto [ptr, ec] = std::from_chars(ws.data(), ws.data() + ws.size(), p);
        if (ec != std::errc{} || ptr != ws.data() + ws.size())
            throw TopologyError("bad mixture probability '" + ws + "'");
        ++i;
        parts.emplace_back(p, parse_simple(w, i));
        if (i == w.size())
            break;
        if (w[i] != "|")
            throw TopologyError("expected '|' in mixture: " + text);
        ++i;
    }
    return mixture(std::move(parts));
}

// ---------------------------------------------------------------- topology

void SimTopology::validate() const
{
    if (ports.empty())
        throw TopologyError("switch needs at least one port");
    for (const auto& [ip, t] : targets) {
        if (!(t.loss_prob >= 0.0 && t.loss_prob <= 1.0))
            throw TopologyError("loss probability out of range for " + ip.to_string());
        if (t.base_rtt < Duration::zero())
            throw TopologyError("negative base RTT for " + ip.to_string());
        Duration sum{0};
        for (const auto& h : t.hops) {
            if (h.one_way < Duration::zero())
                throw TopologyError("negative hop delay for " + ip.to_string());
            sum += h.one_way;
        }
        if (2 * sum > t.base_rtt)
            throw TopologyError("hop delays exceed half the base RTT for " + ip.to_string());
    }
    if (bundling_penalty && *bundling_penalty < Duration::zero())
        throw TopologyError("negative bundling penalty");
    for (const auto& [ip, id] : router_id_hosts)
        if (!id.valid())
            throw TopologyError("invalid router identity for " + ip.to_string());
}

namespace {

constexpr const char* kTopologyMagic = "saami-topology";
constexpr int kTopologyVersion = 1;

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& s)
{
    std::uint64_t v = 0;
    int base = 10;
    std::string_view sv(s);
    if (sv.starts_with("0x") || sv.starts_with("0X")) {
        sv.remove_prefix(2);
        base = 16;
    }
    const auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v, base);
    if (ec != std::errc{} || ptr != sv.data() + sv.size() || sv.empty())
        throw TopologyError("bad number '" + s + "'");
    return v;
}

Ipv4Address parse_ip(const std::string& s)
{
    auto ip = Ipv4Address::parse(s);
    if (!ip)
        throw TopologyError("bad IPv4 address '" + s + "'");
    return *ip;
}

TargetSpec parse_target(const std::vector<std::string>& w, std::size_t start)
{
    TargetSpec t;
    bool have_rtt = false;
    for (std::size_t i = start; i < w.size(); i += 2) {
        if (i + 1 >= w.size())
            throw TopologyError("target attribute '" + w[i] + "' needs a value");
        const auto& key = w[i];
        const auto& val = w[i + 1];
        if (key == "rtt") {
            t.base_rtt = parse_duration(val);
            have_rtt = true;
        } else if (key == "loss") {
            try {
                std::size_t used = 0;
                t.loss_prob = std::stod(val, &used);
                if (used != val.size())
                    throw std::invalid_argument(val);
            } catch (const std::logic_error&) {
                throw TopologyError("bad loss probability '" + val + "'");
            }
        } else if (key == "responds") {
            if (val != "yes" && val != "no")
                throw TopologyError("responds must be yes or no");
            t.responds = val == "yes";
        } else if (key == "hops") {
            if (val == "-")
                continue;
            std::istringstream hs(val);
            for (std::string hop; std::getline(hs, hop, ',');) {
                const auto at = hop.find('@');
                if (at == std::string::npos)
                    throw TopologyError("hop '" + hop + "' must be ADDRESS@DELAY");
                t.hops.push_back(Hop{parse_ip(hop.substr(0, at)), parse_duration(hop.substr(at + 1))});
            }
        } else {
            throw TopologyError("unknown target attribute '" + key + "'");
        }
    }
    if (!have_rtt)
        throw TopologyError("target needs an rtt");
    return t;
}

} // namespace

SimTopology load_topology(std::istream& in)
{
    SimTopology topo;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty())
            continue;
        const auto w = split_words(line);
        try {
            if (!header) {
                if (w.size() != 2 || w[0] != kTopologyMagic)
                    throw TopologyError("missing '" + std::string(kTopologyMagic) + " <version>' header");
                if (w[1] != std::to_string(kTopologyVersion))
                    throw TopologyError("unsupported topology version " + w[1]);
                header = true;
                continue;
            }
            const auto& key = w[0];
            const auto rest = trim(line.substr(key.size()));
            if (key == "dpid") {
                topo.switch_dpid = parse_u64(rest);
            } else if (key == "ports") {
                topo.ports.clear();
                for (std::size_t i = 1; i < w.size(); ++i)
                    topo.ports.push_back(static_cast<std::uint32_t>(parse_u64(w[i])));
            } else if (key == "seed") {
                topo.seed = parse_u64(rest);
            } else if (key == "control_link_delay") {
                topo.control_link_delay = DelayModel::parse(rest);
            } else if (key == "pktout_delay") {
                topo.pktout_delay = DelayModel::parse(rest);
            } else if (key == "pktin_delay") {
                topo.pktin_delay = DelayModel::parse(rest);
            } else if (key == "echo_delay") {
                topo.echo_delay = DelayModel::parse(rest);
            } else if (key == "bundling_penalty") {
                if (rest == "off")
                    topo.bundling_penalty.reset();
                else if (rest == "on")
                    topo.bundling_penalty = kDefaultBundlingPenalty;
                else
                    topo.bundling_penalty = parse_duration(rest);
            } else if (key == "target") {
                if (w.size() < 2)
                    throw TopologyError("target needs an address");
                topo.targets[parse_ip(w[1])] = parse_target(w, 2);
            } else if (key == "router_id") {
                if (w.size() < 4)
                    throw TopologyError("router_id needs ADDRESS ASN IDENT");
                pktlab::RouterIdentity id;
                id.asn = static_cast<std::uint32_t>(parse_u64(w[2]));
                const auto pos = line.find(w[3], line.find(w[2], line.find(w[1]) + w[1].size()) + w[2].size());
                id.ident = trim(line.substr(pos));
                topo.router_id_hosts[parse_ip(w[1])] = std::move(id);
            } else {
                throw TopologyError("unknown key '" + key + "'");
            }
        } catch (const TopologyError& e) {
            throw TopologyError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!header)
        throw TopologyError("empty topology");
    topo.validate();
    return topo;
}

SimTopology load_topology_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw TopologyError("cannot open topology file " + path);
    return load_topology(in);
}

void save_topology(std::ostream& out, const SimTopology& topo)
{
    out << kTopologyMagic << ' ' << kTopologyVersion << '\n';
    std::ostringstream dpid;
    dpid << std::hex << topo.switch_dpid;
    out << "dpid 0x" << dpid.str() << '\n';
    out << "ports";
    for (auto p : topo.ports)
        out << ' ' << p;
    out << '\n';
    out << "seed " << topo.seed << '\n';
    out << "control_link_delay " << topo.control_link_delay.to_string() << '\n';
    out << "pktout_delay " << topo.pktout_delay.to_string() << '\n';
    out << "pktin_delay " << topo.pktin_delay.to_string() << '\n';
    out << "echo_delay " << topo.echo_delay.to_string() << '\n';
    out << "bundling_penalty " << (topo.bundling_penalty ? format_duration(*topo.bundling_penalty) : "off") << '\n';
    for (const auto& [ip, t] : topo.targets) {
        out << "target " << ip.to_string() << " rtt " << format_duration(t.base_rtt) << " loss "
            << format_probability(t.loss_prob) << " responds " << (t.responds ? "yes" : "no") << " hops ";
        if (t.hops.empty())
            out << '-';
        for (std::size_t i = 0; i < t.hops.size(); ++i)
            out << (i ? "," : "") << t.hops[i].router.to_string() << '@' << format_duration(t.hops[i].one_way);
        out << '\n';
    }
    for (const auto& [ip, id] : topo.router_id_hosts)
        out << "router_id " << ip.to_string() << ' ' << id.asn << ' ' << id.ident << '\n';
}

std::optional<std::uint64_t> seed_from_environment()
{
    const char* v = std::getenv("SAAMI_SIM_SEED");
    if (!v || !*v)
        return std::nullopt;
    return parse_u64(v);
}

Duration ground_truth_rtt(const SimTopology& topo, Ipv4Address target)
{
    auto it = topo.targets.find(target);
    if (it == topo.targets.end())
        throw UnknownTarget(target);
    return it->second.base_rtt;
}

// ---------------------------------------------------------------- dataplane

namespace {

// Round trip from the switch to a router on some configured path.
std::optional<Duration> router_round_trip(const SimTopology& topo, Ipv4Address router)
{
    if (auto it = topo.targets.find(router); it != topo.targets.end())
        return it->second.base_rtt;
    for (const auto& [ip, t] : topo.targets) {
        Duration sum{0};
        for (const auto& h : t.hops) {
            sum += h.one_way;
            if (h.router == router)
                return 2 * sum;
        }
    }
    return std::nullopt;
}

} // namespace

std::vector<DataplaneReply> dataplane_process(const SimTopology& topo, std::span<const std::uint8_t> frame,
                                              TimePoint emit, Rng& rng)
{
    std::vector<DataplaneReply> out;
    std::optional<pktlab::FrameFields> f;
    try {
        f = pktlab::extract_fields(frame);
    } catch (const std::exception&) {
        return out;
    }
    if (!f || f->eth_type != pktlab::kEthTypeIpv4 || f->ip_proto != pktlab::kIpProtoIcmp || !f->ipv4_dst ||
        !f->icmp_type)
        return out;
    const auto dst = *f->ipv4_dst;

    try {
        if (*f->icmp_type == pktlab::kIcmpEchoRequest) {
            auto it = topo.targets.find(dst);
            if (it == topo.targets.end())
                return out;
            const auto& t = it->second;
            if (t.loss_prob > 0.0 && std::bernoulli_distribution(t.loss_prob)(rng))
                return out;
            const std::size_t ttl = f->ttl.value_or(0);
            if (ttl == 0)
                return out;
            if (ttl <= t.hops.size()) {
                Duration sum{0};
                for (std::size_t i = 0; i < ttl; ++i)
                    sum += t.hops[i].one_way;
                out.push_back({pktlab::build_time_exceeded(t.hops[ttl - 1].router, frame), emit + 2 * sum});
            } else if (t.responds) {
                out.push_back({pktlab::build_echo_reply(frame), emit + t.base_rtt});
            }
        } else if (*f->icmp_type == pktlab::kIcmpRouterId && f->icmp_code == pktlab::kRouterIdQueryCode) {
            auto host = topo.router_id_hosts.find(dst);
            if (host == topo.router_id_hosts.end())
                return out;
            const auto rtt = router_round_trip(topo, dst).value_or(Duration::zero());
            out.push_back({pktlab::build_router_id_reply(frame, host->second), emit + rtt});
        }
    } catch (const pktlab::MalformedFrame&) {
        out.clear();
    }
    return out;
}

// ---------------------------------------------------------------- event loop

void EventLoop::schedule(TimePoint at, std::function<void()> fn)
{
    queue_.push(Event{std::max(at, now()), seq_++, std::move(fn)});
}

bool EventLoop::run_one(TimePoint deadline)
{
    if (queue_.empty() || queue_.top().at > deadline) {
        clock_.advance_to(deadline);
        return false;
    }
    auto ev = std::move(const_cast<Event&>(queue_.top()));
    queue_.pop();
    clock_.advance_to(ev.at);
    ev.fn();
    return true;
}

void EventLoop::run_until(TimePoint t)
{
    while (run_one(t)) { }
}

std::size_t EventLoop::run_until_idle()
{
    std::size_t n = 0;
    while (!queue_.empty()) {
        run_one(queue_.top().at);
        ++n;
    }
    return n;
}

// ---------------------------------------------------------------- flow table

const FlowRule* lookup_flow(const std::vector<FlowRule>& rules, std::uint32_t in_port,
                            std::span<const std::uint8_t> frame)
{
    std::optional<pktlab::FrameFields> f;
    try {
        f = pktlab::extract_fields(frame);
    } catch (const std::exception&) {
        return nullptr;
    }
    if (!f)
        return nullptr;

    const auto matches = [&](const FlowRule& r) {
        for (const auto& e : r.match.entries()) {
            std::optional<std::uint32_t> have;
            switch (e.field) {
            case ofwire::OxmField::InPort: have = in_port; break;
            case ofwire::OxmField::EthType: have = f->eth_type; break;
            case ofwire::OxmField::IpProto: have = f->ip_proto; break;
            case ofwire::OxmField::Ipv4Dst:
                if (f->ipv4_dst)
                    have = f->ipv4_dst->value();
                break;
            case ofwire::OxmField::Icmpv4Type: have = f->icmp_type; break;
            case ofwire::OxmField::Icmpv4Code: have = f->icmp_code; break;
            }
            if (!have || *have != e.value)
                return false;
        }
        return true;
    };

    const FlowRule* best = nullptr;
    for (const auto& r : rules) {
        if (!matches(r))
            continue;
        if (!best || r.priority > best->priority ||
            (r.priority == best->priority && r.installed > best->installed))
            best = &r;
    }
    return best;
}

// ---------------------------------------------------------------- switch

SimSwitch::SimSwitch(SimTopology topology, Scheduler& scheduler, SimSwitchOptions options)
    : topo_(std::move(topology)), sched_(scheduler), options_(std::move(options)), rng_(topo_.seed)
{
    topo_.validate();
}

bool SimSwitch::has_port(std::uint32_t port) const
{
    return std::find(topo_.ports.begin(), topo_.ports.end(), port) != topo_.ports.end();
}

void SimSwitch::connected()
{
    if (options_.silent)
        return;
    auto bytes = ofwire::encode_message(ofwire::hello(xid_++));
    bytes[0] = options_.hello_version;
    send_raw(std::move(bytes));
}

void SimSwitch::send(const ofwire::Message& msg) { send_raw(ofwire::encode_message(msg)); }

void SimSwitch::send_raw(Bytes bytes)
{
    const auto arrival = std::max(sched_.now() + topo_.control_link_delay.sample(rng_), outbound_ready_);
    outbound_ready_ = arrival;
    sched_.schedule(arrival, [this, b = std::move(bytes)]() mutable {
        if (link_)
            link_->transmit(std::move(b));
    });
}

void SimSwitch::on_segment(Bytes bytes)
{
    const auto arrival = std::max(sched_.now() + topo_.control_link_delay.sample(rng_), inbound_ready_);
    inbound_ready_ = arrival;
    sched_.schedule(arrival, [this, b = std::move(bytes)] { process_segment(b); });
}

void SimSwitch::process_segment(const Bytes& bytes)
{
    if (options_.silent)
        return;
    std::vector<ofwire::Message> msgs;
    try {
        msgs = framer_.feed(bytes);
    } catch (const ofwire::WireError&) {
        framer_ = ofwire::StreamFramer{};
        return;
    }
    const bool bundled = msgs.size() > 1;
    const auto now = sched_.now();
    for (const auto& m : msgs)
        handle(m, now, bundled);
}

void SimSwitch::handle(const ofwire::Message& msg, TimePoint received, bool bundled)
{
    switch (msg.type) {
    case ofwire::MsgType::EchoRequest: {
        auto reply = ofwire::echo_reply(msg.xid, std::get<ofwire::EchoBody>(msg.body).data);
        const auto delay = topo_.echo_delay.sample(rng_);
        if (delay == Duration::zero())
            send(reply);
        else
            sched_.schedule(received + delay, [this, reply] { send(reply); });
        break;
    }
    case ofwire::MsgType::FeaturesRequest: {
        ofwire::FeaturesReplyBody body;
        body.datapath_id = topo_.switch_dpid;
        body.n_tables = 1;
        send(ofwire::features_reply(msg.xid, body));
        break;
    }
    case ofwire::MsgType::FlowMod: {
        const auto& fm = std::get<ofwire::FlowModBody>(msg.body);
        rules_.push_back(FlowRule{fm.priority, fm.cookie, fm.match, fm.output, rule_seq_++});
        break;
    }
    case ofwire::MsgType::PacketOut: {
        const auto& po = std::get<ofwire::PacketOutBody>(msg.body);
        auto delay = topo_.pktout_delay.sample(rng_);
        if (bundled && topo_.bundling_penalty)
            delay += *topo_.bundling_penalty;
        const auto emission = std::max(received + delay, pktout_ready_);
        pktout_ready_ = emission;

        PacketOutTrace trace;
        trace.index = pktout_log_.size();
        trace.received = received;
        trace.emitted = emission;
        trace.bundled = bundled;
        trace.frame = po.frame;
        for (const auto& a : po.actions) {
            if (has_port(a.port)) {
                trace.port = a.port;
                break;
            }
        }
        // Reserve the slot now so the log stays in arrival order.
        pktout_log_.push_back(trace);
        sched_.schedule(emission, [this, idx = trace.index] {
            const auto& t = pktout_log_[idx];
            if (options_.on_pktout)
                options_.on_pktout(t);
            if (t.port == 0 && !has_port(0)) {
                ++dropped_;
                return;
            }
            for (auto& r : dataplane_process(topo_, t.frame, t.emitted, rng_)) {
                sched_.schedule(r.arrival, [this, port = t.port, f = std::move(r.frame)]() mutable {
                    port_receive(port, std::move(f));
                });
            }
        });
        break;
    }
    default:
        break;
    }
}

void SimSwitch::inject(std::uint32_t port, Bytes frame)
{
    if (!has_port(port)) {
        ++dropped_;
        return;
    }
    port_receive(port, std::move(frame));
}

void SimSwitch::port_receive(std::uint32_t port, Bytes frame)
{
    const auto* rule = lookup_flow(rules_, port, frame);
    if (!rule || rule->output.port != ofwire::kPortController) {
        ++dropped_;
        return;
    }
    const auto received = sched_.now();
    const auto emission = std::max(received + topo_.pktin_delay.sample(rng_), pktin_ready_);
    pktin_ready_ = emission;

    PacketInTrace trace;
    trace.index = pktin_log_.size();
    trace.received = received;
    trace.emitted = emission;
    trace.port = port;
    trace.frame = frame;
    pktin_log_.push_back(std::move(trace));

    ofwire::PacketInBody body;
    body.total_len = static_cast<std::uint16_t>(frame.size());
    body.reason = ofwire::PacketInReason::Action;
    body.cookie = rule->cookie;
    body.in_port = port;
    body.frame = std::move(frame);
    auto msg = ofwire::packet_in(xid_++, std::move(body));
    sched_.schedule(emission, [this, idx = pktin_log_.size() - 1, m = std::move(msg)] {
        if (options_.on_pktin)
            options_.on_pktin(pktin_log_[idx]);
        send(m);
    });
}

// ---------------------------------------------------------------- virtual testbed

void VirtualChannel::write(std::span<const std::uint8_t> bytes)
{
    if (closed_)
        throw session::SessionClosed();
    pending_.insert(pending_.end(), bytes.begin(), bytes.end());
    if (flush_scheduled_)
        return;
    flush_scheduled_ = true;
    loop_.schedule(loop_.now(), [this] {
        flush_scheduled_ = false;
        if (closed_ || pending_.empty())
            return;
        ++segments_;
        sw_.on_segment(std::exchange(pending_, {}));
    });
}

void VirtualChannel::close() { closed_ = true; }

void VirtualChannel::transmit(Bytes segment)
{
    if (!closed_ && session_)
        session_->on_bytes(segment);
}

VirtualTestbed::VirtualTestbed(SimTopology topology, SimSwitchOptions sw_options,
                               session::SessionOptions session_options)
{
    switch_ = std::make_unique<SimSwitch>(std::move(topology), loop_, std::move(sw_options));
    channel_ = std::make_shared<VirtualChannel>(loop_, *switch_);
    session_ = std::make_shared<session::SwitchSession>(channel_, loop_.clock(), session_options);
    channel_->bind(session_.get());
    switch_->attach(channel_.get());
}

VirtualTestbed::~VirtualTestbed()
{
    switch_->attach(nullptr);
    channel_->bind(nullptr);
}

void VirtualTestbed::connect()
{
    switch_->connected();
    session_->accept_handshake();
}

// ---------------------------------------------------------------- realtime

RealtimeLoop::RealtimeLoop() : thread_([this] { run(); }) { }

RealtimeLoop::~RealtimeLoop() { stop(); }

void RealtimeLoop::schedule(TimePoint at, std::function<void()> fn)
{
    {
        std::lock_guard lk(mu_);
        queue_.push(Event{at, seq_++, std::move(fn)});
    }
    cv_.notify_all();
}

void RealtimeLoop::call(const std::function<void()>& fn)
{
    bool stopped = false;
    {
        std::lock_guard lk(mu_);
        stopped = stopping_;
    }
    if (stopped) {
        if (thread_.joinable())
            thread_.join();
        fn();
        return;
    }
    std::promise<void> done;
    auto fut = done.get_future();
    post([&] {
        try {
            fn();
            done.set_value();
        } catch (...) {
            done.set_exception(std::current_exception());
        }
    });
    fut.get();
}

void RealtimeLoop::stop()
{
    {
        std::lock_guard lk(mu_);
        stopping_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable())
        thread_.join();
}

void RealtimeLoop::run()
{
    std::unique_lock lk(mu_);
    while (!stopping_) {
        if (queue_.empty()) {
            cv_.wait(lk);
            continue;
        }
        const auto at = queue_.top().at;
        if (at > clock_.now()) {
            cv_.wait_until(lk, clock_.to_steady(at));
            continue;
        }
        auto ev = std::move(const_cast<Event&>(queue_.top()));
        queue_.pop();
        lk.unlock();
        ev.fn();
        lk.lock();
    }
}

class RunningSwitch::Link final : public ControlLink {
public:
    Link(std::shared_ptr<tcp::Fd> fd, std::shared_ptr<std::atomic<bool>> alive)
        : fd_(std::move(fd)), alive_(std::move(alive))
    { }

    void transmit(Bytes segment) override
    {
        if (!*alive_)
            return;
        try {
            tcp::write_all(*fd_, segment);
        } catch (const tcp::SocketError&) {
            *alive_ = false;
        }
    }

private:
    std::shared_ptr<tcp::Fd> fd_;
    std::shared_ptr<std::atomic<bool>> alive_;
};

std::unique_ptr<RunningSwitch> run_sim_switch(SimTopology topology, const std::string& controller_host,
                                              std::uint16_t controller_port, SimSwitchOptions options)
{
    topology.validate();
    tcp::Fd fd;
    try {
        fd = tcp::connect(controller_host, controller_port);
    } catch (const tcp::SocketError& e) {
        throw ConnectFailed(e.what());
    }
    std::unique_ptr<RunningSwitch> rs(new RunningSwitch());
    rs->fd_ = std::make_shared<tcp::Fd>(std::move(fd));
    rs->alive_ = std::make_shared<std::atomic<bool>>(true);
    rs->loop_ = std::make_unique<RealtimeLoop>();
    rs->switch_ = std::make_unique<SimSwitch>(std::move(topology), *rs->loop_, std::move(options));
    rs->link_ = std::make_unique<RunningSwitch::Link>(rs->fd_, rs->alive_);
    rs->switch_->attach(rs->link_.get());
    rs->loop_->post([sw = rs->switch_.get()] { sw->connected(); });
    rs->reader_ = std::thread([fd = rs->fd_, alive = rs->alive_, loop = rs->loop_.get(), sw = rs->switch_.get()] {
        std::array<std::uint8_t, 65536> buf{};
        for (;;) {
            const auto n = tcp::read_some(*fd, buf);
            if (n <= 0)
                break;
            loop->post([sw, b = Bytes(buf.begin(), buf.begin() + n)]() mutable { sw->on_segment(std::move(b)); });
        }
        *alive = false;
    });
    return rs;
}

RunningSwitch::~RunningSwitch() { stop(); }

void RunningSwitch::stop()
{
    if (fd_)
        fd_->shutdown();
    if (reader_.joinable())
        reader_.join();
    if (loop_)
        loop_->stop();
}

bool RunningSwitch::connected() const { return alive_ && *alive_; }

std::vector<PacketOutTrace> RunningSwitch::pktout_log()
{
    std::vector<PacketOutTrace> out;
    loop_->call([&] { out = switch_->pktout_log(); });
    return out;
}

std::vector<PacketInTrace> RunningSwitch::pktin_log()
{
    std::vector<PacketInTrace> out;
    loop_->call([&] { out = switch_->pktin_log(); });
    return out;
}

void RunningSwitch::inject(std::uint32_t port, Bytes frame)
{
    loop_->post([sw = switch_.get(), port, f = std::move(frame)]() mutable { sw->inject(port, std::move(f)); });
}

} // namespace saami::netsim
