#include "saami/pktlab.hpp"

#include <algorithm>

namespace saami::pktlab {

namespace {

constexpr std::size_t kArpBody = 28;
constexpr std::uint8_t kDefaultReplyTtl = 64;

void put_mac(Bytes& out, const MacAddress& m) { out.insert(out.end(), m.octets().begin(), m.octets().end()); }

MacAddress get_mac(const std::uint8_t* p)
{
    std::array<std::uint8_t, 6> o{};
    std::copy(p, p + 6, o.begin());
    return MacAddress(o);
}

void put_eth(Bytes& out, const MacAddress& dst, const MacAddress& src, std::uint16_t type)
{
    put_mac(out, dst);
    put_mac(out, src);
    be::put16(out, type);
}

// Appends an option-less IPv4 header with a valid checksum.
void put_ipv4(Bytes& out, Ipv4Address src, Ipv4Address dst, std::uint8_t ttl, std::size_t payload_len)
{
    const auto start = out.size();
    out.push_back(0x45);
    out.push_back(0);
    be::put16(out, static_cast<std::uint16_t>(kIpv4Header + payload_len));
    be::put16(out, 0); // identification
    be::put16(out, 0); // flags/fragment offset
    out.push_back(ttl);
    out.push_back(kIpProtoIcmp);
    be::put16(out, 0);
    be::put32(out, src.value());
    be::put32(out, dst.value());
    const auto sum = internet_checksum(std::span<const std::uint8_t>(out).subspan(start, kIpv4Header));
    be::set16(out.data() + start + 10, sum);
}

// Appends an ICMP message; `rest` is the 4-byte rest-of-header (id/seq for echo).
void put_icmp(Bytes& out, std::uint8_t type, std::uint8_t code, std::uint32_t rest, std::span<const std::uint8_t> payload)
{
    const auto start = out.size();
    out.push_back(type);
    out.push_back(code);
    be::put16(out, 0);
    be::put32(out, rest);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto sum = internet_checksum(std::span<const std::uint8_t>(out).subspan(start));
    be::set16(out.data() + start + 2, sum);
}

Bytes icmp_frame(const MacAddress& dst_mac, const MacAddress& src_mac, Ipv4Address src, Ipv4Address dst,
                 std::uint8_t ttl, std::uint8_t type, std::uint8_t code, std::uint32_t rest,
                 std::span<const std::uint8_t> payload)
{
    const std::size_t icmp_len = kIcmpHeader + payload.size();
    if (kIpv4Header + icmp_len > kIpMtu)
        throw PayloadTooLarge("ICMP payload exceeds the IPv4 MTU");
    Bytes out;
    out.reserve(kEthHeader + kIpv4Header + icmp_len);
    put_eth(out, dst_mac, src_mac, kEthTypeIpv4);
    put_ipv4(out, src, dst, ttl, icmp_len);
    put_icmp(out, type, code, rest, payload);
    return out;
}

// Validated view of an option-less IPv4/ICMP frame.
struct IcmpView {
    std::span<const std::uint8_t> ip;   // IPv4 header + payload, trimmed to total length
    std::span<const std::uint8_t> icmp; // ICMP header + payload
    bool checksums_ok = false;
};

// nullopt when the frame is not option-less unfragmented IPv4/ICMP; throws MalformedFrame when
// the frame is too short for the headers it declares.
std::optional<IcmpView> icmp_view(std::span<const std::uint8_t> frame)
{
    if (frame.size() < kEthHeader)
        throw MalformedFrame("frame shorter than an Ethernet header");
    if (be::get16(frame.data() + 12) != kEthTypeIpv4)
        return std::nullopt;
    if (frame.size() < kEthHeader + kIpv4Header)
        throw MalformedFrame("frame shorter than an IPv4 header");
    auto ip = frame.subspan(kEthHeader);
    if ((ip[0] >> 4) != 4 || (ip[0] & 0x0f) != 5)
        return std::nullopt;
    const std::size_t total = be::get16(ip.data() + 2);
    if (total < kIpv4Header || total > ip.size())
        throw MalformedFrame("IPv4 total length exceeds frame");
    ip = ip.first(total);
    if ((be::get16(ip.data() + 6) & 0x3fff) != 0)
        return std::nullopt;
    if (ip[9] != kIpProtoIcmp)
        return std::nullopt;
    if (total < kIpv4Header + kIcmpHeader)
        throw MalformedFrame("IPv4 payload shorter than an ICMP header");
    IcmpView v;
    v.ip = ip;
    v.icmp = ip.subspan(kIpv4Header);
    v.checksums_ok = internet_checksum(ip.first(kIpv4Header)) == 0 && internet_checksum(v.icmp) == 0;
    return v;
}

Ipv4Address ip_src(std::span<const std::uint8_t> ip) { return Ipv4Address(be::get32(ip.data() + 12)); }
Ipv4Address ip_dst(std::span<const std::uint8_t> ip) { return Ipv4Address(be::get32(ip.data() + 16)); }

} // namespace

std::uint16_t internet_checksum(std::span<const std::uint8_t> data)
{
    std::uint32_t sum = 0;
    std::size_t i = 0;
    for (; i + 1 < data.size(); i += 2)
        sum += be::get16(data.data() + i);
    if (i < data.size())
        sum += std::uint32_t{data[i]} << 8;
    while (sum >> 16)
        sum = (sum & 0xffff) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

Bytes build_echo_request(const EchoProbe& p)
{
    if (p.ttl == 0)
        throw std::invalid_argument("probe TTL must be at least 1");
    const std::uint32_t rest = (std::uint32_t{p.icmp_id} << 16) | p.icmp_seq;
    return icmp_frame(p.dst_mac, p.src_mac, p.src_ip, p.dst_ip, p.ttl, kIcmpEchoRequest, 0, rest, p.payload);
}

Bytes build_echo_reply(std::span<const std::uint8_t> request)
{
    auto v = icmp_view(request);
    if (!v || v->icmp[0] != kIcmpEchoRequest)
        throw MalformedFrame("not an ICMP echo request");
    return icmp_frame(get_mac(request.data() + 6), get_mac(request.data()), ip_dst(v->ip), ip_src(v->ip),
                      kDefaultReplyTtl, kIcmpEchoReply, 0, be::get32(v->icmp.data() + 4), v->icmp.subspan(kIcmpHeader));
}

ParsedReply parse_reply(std::span<const std::uint8_t> frame)
{
    ParsedReply r;
    auto v = icmp_view(frame);
    if (!v)
        return r;
    r.responder = ip_src(v->ip);
    r.destination = ip_dst(v->ip);
    if (!v->checksums_ok)
        return r;
    const auto type = v->icmp[0];
    const auto code = v->icmp[1];
    const auto body = v->icmp.subspan(kIcmpHeader);

    if (type == kIcmpEchoReply && code == 0) {
        r.kind = ReplyKind::EchoReply;
        r.icmp_id = be::get16(v->icmp.data() + 4);
        r.icmp_seq = be::get16(v->icmp.data() + 6);
        r.payload.assign(body.begin(), body.end());
    } else if (type == kIcmpTimeExceeded && code == 0) {
        if (body.size() < kIpv4Header)
            throw MalformedFrame("time exceeded quote shorter than an IPv4 header");
        const std::size_t inner_ihl = std::size_t{body[0] & 0x0fu} * 4;
        if (inner_ihl < kIpv4Header || body.size() < inner_ihl + 8)
            throw MalformedFrame("time exceeded quote lacks 8 payload bytes");
        if (body[9] != kIpProtoIcmp || body[inner_ihl] != kIcmpEchoRequest)
            return r;
        r.kind = ReplyKind::TimeExceeded;
        r.quoted_destination = ip_dst(body);
        r.icmp_id = be::get16(body.data() + inner_ihl + 4);
        r.icmp_seq = be::get16(body.data() + inner_ihl + 6);
    } else if (type == kIcmpRouterId && code == kRouterIdReplyCode) {
        auto identity = decode_router_identity(body);
        if (!identity)
            return r;
        r.kind = ReplyKind::RouterIdReply;
        r.icmp_id = be::get16(v->icmp.data() + 4);
        r.icmp_seq = be::get16(v->icmp.data() + 6);
        r.payload.assign(body.begin(), body.end());
        r.identity = std::move(identity);
    }
    return r;
}

Bytes build_time_exceeded(Ipv4Address router_ip, std::span<const std::uint8_t> original_frame)
{
    if (original_frame.size() < kEthHeader + kIpv4Header || be::get16(original_frame.data() + 12) != kEthTypeIpv4)
        throw MalformedFrame("original frame lacks an IPv4 header");
    auto ip = original_frame.subspan(kEthHeader);
    const std::size_t ihl = std::size_t{ip[0] & 0x0fu} * 4;
    const std::size_t total = be::get16(ip.data() + 2);
    if (ihl < kIpv4Header || total < ihl || total > ip.size())
        throw MalformedFrame("original IPv4 header inconsistent");
    const std::size_t quote_len = ihl + std::min<std::size_t>(8, total - ihl);
    return icmp_frame(get_mac(original_frame.data() + 6), get_mac(original_frame.data()), router_ip, ip_src(ip),
                      kDefaultReplyTtl, kIcmpTimeExceeded, 0, 0, ip.first(quote_len));
}

Bytes build_gratuitous_arp(Ipv4Address ip, MacAddress mac)
{
    Bytes out;
    out.reserve(kEthHeader + kArpBody);
    put_eth(out, MacAddress::broadcast(), mac, kEthTypeArp);
    be::put16(out, 1);          // hardware: Ethernet
    be::put16(out, kEthTypeIpv4);
    out.push_back(6);
    out.push_back(4);
    be::put16(out, 2);          // reply
    put_mac(out, mac);
    be::put32(out, ip.value());
    put_mac(out, MacAddress::broadcast());
    be::put32(out, ip.value());
    return out;
}

std::optional<ArpInfo> parse_arp(std::span<const std::uint8_t> frame)
{
    if (frame.size() < kEthHeader + kArpBody || be::get16(frame.data() + 12) != kEthTypeArp)
        return std::nullopt;
    const auto* a = frame.data() + kEthHeader;
    if (be::get16(a) != 1 || be::get16(a + 2) != kEthTypeIpv4 || a[4] != 6 || a[5] != 4)
        return std::nullopt;
    ArpInfo info;
    info.opcode = be::get16(a + 6);
    info.sender_mac = get_mac(a + 8);
    info.sender_ip = Ipv4Address(be::get32(a + 14));
    info.target_mac = get_mac(a + 18);
    info.target_ip = Ipv4Address(be::get32(a + 24));
    return info;
}

Bytes build_router_id_query(const RouterIdQuery& q)
{
    const std::uint32_t rest = (std::uint32_t{q.icmp_id} << 16) | q.icmp_seq;
    return icmp_frame(q.dst_mac, q.src_mac, q.src_ip, q.dst_ip, kDefaultReplyTtl, kIcmpRouterId, kRouterIdQueryCode,
                      rest, {});
}

std::optional<RouterIdQuery> parse_router_id_query(std::span<const std::uint8_t> frame)
{
    std::optional<IcmpView> v;
    try {
        v = icmp_view(frame);
    } catch (const MalformedFrame&) {
        return std::nullopt;
    }
    if (!v || !v->checksums_ok || v->icmp[0] != kIcmpRouterId || v->icmp[1] != kRouterIdQueryCode)
        return std::nullopt;
    RouterIdQuery q;
    q.dst_mac = get_mac(frame.data());
    q.src_mac = get_mac(frame.data() + 6);
    q.src_ip = ip_src(v->ip);
    q.dst_ip = ip_dst(v->ip);
    q.icmp_id = be::get16(v->icmp.data() + 4);
    q.icmp_seq = be::get16(v->icmp.data() + 6);
    return q;
}

Bytes encode_router_identity(const RouterIdentity& identity)
{
    if (!identity.valid())
        throw std::invalid_argument("router identifier must be 1..64 bytes");
    Bytes out;
    be::put32(out, identity.asn);
    out.push_back(static_cast<std::uint8_t>(identity.ident.size()));
    out.insert(out.end(), identity.ident.begin(), identity.ident.end());
    return out;
}

std::optional<RouterIdentity> decode_router_identity(std::span<const std::uint8_t> payload)
{
    if (payload.size() < 5)
        return std::nullopt;
    const std::size_t len = payload[4];
    if (len == 0 || len > kMaxIdentLength || payload.size() < 5 + len)
        return std::nullopt;
    RouterIdentity id;
    id.asn = be::get32(payload.data());
    id.ident.assign(payload.begin() + 5, payload.begin() + 5 + static_cast<std::ptrdiff_t>(len));
    return id;
}

Bytes build_router_id_reply(std::span<const std::uint8_t> query_frame, const RouterIdentity& identity)
{
    auto q = parse_router_id_query(query_frame);
    if (!q)
        throw MalformedFrame("not a router-ID query");
    const auto payload = encode_router_identity(identity);
    const std::uint32_t rest = (std::uint32_t{q->icmp_id} << 16) | q->icmp_seq;
    return icmp_frame(q->src_mac, q->dst_mac, q->dst_ip, q->src_ip, kDefaultReplyTtl, kIcmpRouterId,
                      kRouterIdReplyCode, rest, payload);
}

std::optional<FrameFields> extract_fields(std::span<const std::uint8_t> frame)
{
    if (frame.size() < kEthHeader)
        return std::nullopt;
    FrameFields f;
    f.eth_dst = get_mac(frame.data());
    f.eth_src = get_mac(frame.data() + 6);
    f.eth_type = be::get16(frame.data() + 12);
    if (f.eth_type != kEthTypeIpv4 || frame.size() < kEthHeader + kIpv4Header)
        return f;
    auto ip = frame.subspan(kEthHeader);
    if ((ip[0] >> 4) != 4)
        return f;
    const std::size_t ihl = std::size_t{ip[0] & 0x0fu} * 4;
    f.ip_proto = ip[9];
    f.ttl = ip[8];
    f.ipv4_src = ip_src(ip);
    f.ipv4_dst = ip_dst(ip);
    if (ip[9] == kIpProtoIcmp && ip.size() >= ihl + 2) {
        f.icmp_type = ip[ihl];
        f.icmp_code = ip[ihl + 1];
    }
    return f;
}

} // namespace saami::pktlab
