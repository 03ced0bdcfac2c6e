#include "saami/pktlab.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace saami;
using namespace saami::pktlab;

namespace {

// Straightforward ones'-complement sum, kept separate from the library implementation.
std::uint16_t oracle_checksum(const Bytes& data, std::size_t off, std::size_t len)
{
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i < len; i += 2) {
        std::uint32_t word = std::uint32_t{data[off + i]} << 8;
        if (i + 1 < len)
            word |= data[off + i + 1];
        sum += word;
    }
    while (sum >> 16)
        sum = (sum & 0xffff) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

EchoProbe sample_probe()
{
    EchoProbe p;
    p.src_mac = MacAddress({0x02, 0, 0, 0, 0, 0x01});
    p.dst_mac = MacAddress({0x02, 0, 0, 0, 0, 0xfe});
    p.src_ip = Ipv4Address(192, 0, 2, 100);
    p.dst_ip = Ipv4Address(198, 51, 100, 1);
    p.ttl = 64;
    p.icmp_id = 0x1234;
    p.icmp_seq = 7;
    p.payload = {'a', 'b', 'c'};
    return p;
}

} // namespace

TEST(Checksum, Rfc1071Example)
{
    const Bytes b{0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7};
    EXPECT_EQ(internet_checksum(b), 0x220d);
}

TEST(Checksum, OddLengthPadsWithZero)
{
    const Bytes b{0x01, 0x02, 0x03};
    EXPECT_EQ(internet_checksum(b), oracle_checksum(b, 0, 3));
    EXPECT_EQ(internet_checksum(b), static_cast<std::uint16_t>(~(0x0102 + 0x0300)));
}

TEST(Checksum, MatchesOracleOnRandomData)
{
    std::mt19937_64 rng(3);
    for (int i = 0; i < 500; ++i) {
        Bytes b(rng() % 200);
        for (auto& x : b)
            x = static_cast<std::uint8_t>(rng());
        EXPECT_EQ(internet_checksum(b), oracle_checksum(b, 0, b.size()));
    }
}

TEST(EchoRequest, ByteLayout)
{
    const auto f = build_echo_request(sample_probe());
    ASSERT_EQ(f.size(), 14u + 20 + 8 + 3);
    EXPECT_EQ(Bytes(f.begin(), f.begin() + 14),
              (Bytes{0x02, 0, 0, 0, 0, 0xfe, 0x02, 0, 0, 0, 0, 0x01, 0x08, 0x00}));
    EXPECT_EQ(f[14], 0x45);
    EXPECT_EQ(be::get16(f.data() + 16), 31);
    EXPECT_EQ(f[22], 64);
    EXPECT_EQ(f[23], 1);
    EXPECT_EQ(be::get32(f.data() + 26), Ipv4Address(192, 0, 2, 100).value());
    EXPECT_EQ(be::get32(f.data() + 30), Ipv4Address(198, 51, 100, 1).value());
    EXPECT_EQ(oracle_checksum(f, 14, 20), 0);
    EXPECT_EQ(f[34], kIcmpEchoRequest);
    EXPECT_EQ(f[35], 0);
    EXPECT_EQ(be::get16(f.data() + 38), 0x1234);
    EXPECT_EQ(be::get16(f.data() + 40), 7);
    EXPECT_EQ(oracle_checksum(f, 34, 11), 0);
    EXPECT_EQ(Bytes(f.begin() + 42, f.end()), (Bytes{'a', 'b', 'c'}));
}

TEST(EchoRequest, PayloadLimit)
{
    auto p = sample_probe();
    p.payload.assign(kIpMtu - kIpv4Header - kIcmpHeader, 0);
    EXPECT_NO_THROW(build_echo_request(p));
    p.payload.push_back(0);
    EXPECT_THROW(build_echo_request(p), PayloadTooLarge);
}

TEST(EchoReply, RoundTripThroughParser)
{
    const auto req = build_echo_request(sample_probe());
    const auto rep = build_echo_reply(req);
    const auto r = parse_reply(rep);
    EXPECT_EQ(r.kind, ReplyKind::EchoReply);
    EXPECT_EQ(r.responder, Ipv4Address(198, 51, 100, 1));
    EXPECT_EQ(r.destination, Ipv4Address(192, 0, 2, 100));
    EXPECT_EQ(r.icmp_id, 0x1234);
    EXPECT_EQ(r.icmp_seq, 7);
    EXPECT_EQ(r.payload, (Bytes{'a', 'b', 'c'}));
}

TEST(TimeExceeded, QuoteCorrelatesToProbe)
{
    auto p = sample_probe();
    p.ttl = 3;
    const auto req = build_echo_request(p);
    const Ipv4Address router(198, 18, 0, 3);
    const auto te = build_time_exceeded(router, req);
    // Outer headers + ICMP header + quoted IPv4 header + 8 quoted bytes.
    EXPECT_EQ(te.size(), 14u + 20 + 8 + 20 + 8);
    const auto r = parse_reply(te);
    EXPECT_EQ(r.kind, ReplyKind::TimeExceeded);
    EXPECT_EQ(r.responder, router);
    EXPECT_EQ(r.destination, p.src_ip);
    EXPECT_EQ(r.quoted_destination, p.dst_ip);
    EXPECT_EQ(r.icmp_id, p.icmp_id);
    EXPECT_EQ(r.icmp_seq, p.icmp_seq);
}

TEST(TimeExceeded, ShortQuoteIsMalformed)
{
    auto te = build_time_exceeded(Ipv4Address(1, 1, 1, 1), build_echo_request(sample_probe()));
    te.resize(te.size() - 4);
    be::set16(te.data() + 16, static_cast<std::uint16_t>(te.size() - 14));
    be::set16(te.data() + 24, 0);
    be::set16(te.data() + 24, internet_checksum(std::span(te).subspan(14, 20)));
    be::set16(te.data() + 36, 0);
    be::set16(te.data() + 36, internet_checksum(std::span(te).subspan(34)));
    EXPECT_THROW(parse_reply(te), MalformedFrame);
}

TEST(ParseReply, TruncatedFrames)
{
    const auto req = build_echo_reply(build_echo_request(sample_probe()));
    EXPECT_THROW(parse_reply(std::span(req).first(10)), MalformedFrame);
    EXPECT_THROW(parse_reply(std::span(req).first(30)), MalformedFrame);
}

TEST(ParseReply, BadChecksumIsOther)
{
    auto rep = build_echo_reply(build_echo_request(sample_probe()));
    rep.back() ^= 0xff;
    EXPECT_EQ(parse_reply(rep).kind, ReplyKind::Other);
}

TEST(ParseReply, NonIcmpIsOther)
{
    const auto arp = build_gratuitous_arp(Ipv4Address(10, 0, 0, 1), MacAddress({2, 0, 0, 0, 0, 1}));
    EXPECT_EQ(parse_reply(arp).kind, ReplyKind::Other);
}

TEST(GratuitousArp, Fields)
{
    const MacAddress mac({0x02, 0, 0, 0, 0, 0x01});
    const Ipv4Address ip(192, 0, 2, 100);
    const auto f = build_gratuitous_arp(ip, mac);
    EXPECT_EQ(f.size(), 42u);
    EXPECT_EQ(be::get16(f.data() + 12), kEthTypeArp);
    const auto a = parse_arp(f);
    ASSERT_TRUE(a);
    EXPECT_EQ(a->opcode, 2);
    EXPECT_EQ(a->sender_mac, mac);
    EXPECT_EQ(a->sender_ip, ip);
    EXPECT_EQ(a->target_ip, ip);
}

TEST(RouterId, IdentityCodec)
{
    const RouterIdentity id{64512, "core-1"};
    const auto b = encode_router_identity(id);
    EXPECT_EQ(b, (Bytes{0x00, 0x00, 0xfc, 0x00, 6, 'c', 'o', 'r', 'e', '-', '1'}));
    EXPECT_EQ(decode_router_identity(b), id);
    EXPECT_THROW(encode_router_identity({1, ""}), std::invalid_argument);
    EXPECT_THROW(encode_router_identity({1, std::string(65, 'x')}), std::invalid_argument);
    EXPECT_NO_THROW(encode_router_identity({1, std::string(64, 'x')}));
    EXPECT_FALSE(decode_router_identity(Bytes{0, 0, 0, 1, 5, 'a'}));
}

TEST(RouterId, QueryReplyExchange)
{
    RouterIdQuery q;
    q.src_mac = MacAddress({2, 0, 0, 0, 0, 1});
    q.dst_mac = MacAddress({2, 0, 0, 0, 0, 2});
    q.src_ip = Ipv4Address(192, 0, 2, 100);
    q.dst_ip = Ipv4Address(198, 51, 100, 7);
    q.icmp_id = 42;
    const auto qf = build_router_id_query(q);
    const auto parsed = parse_router_id_query(qf);
    ASSERT_TRUE(parsed);
    EXPECT_EQ(parsed->icmp_id, 42);
    EXPECT_EQ(parsed->dst_ip, q.dst_ip);
    EXPECT_EQ(qf[34], 200);
    EXPECT_EQ(qf[35], 0);

    const RouterIdentity id{65001, "edge"};
    const auto reply = build_router_id_reply(qf, id);
    const auto r = parse_reply(reply);
    EXPECT_EQ(r.kind, ReplyKind::RouterIdReply);
    EXPECT_EQ(r.responder, q.dst_ip);
    EXPECT_EQ(r.destination, q.src_ip);
    EXPECT_EQ(r.icmp_id, 42);
    EXPECT_EQ(r.identity, id);
    EXPECT_FALSE(parse_router_id_query(reply));
}

TEST(ExtractFields, EchoRequest)
{
    const auto f = extract_fields(build_echo_request(sample_probe()));
    ASSERT_TRUE(f);
    EXPECT_EQ(f->eth_type, kEthTypeIpv4);
    EXPECT_EQ(f->ip_proto, kIpProtoIcmp);
    EXPECT_EQ(f->ipv4_dst, Ipv4Address(198, 51, 100, 1));
    EXPECT_EQ(f->ttl, 64);
    EXPECT_EQ(f->icmp_type, kIcmpEchoRequest);
    EXPECT_EQ(f->icmp_code, 0);
}

TEST(ExtractFields, ArpHasNoIpFields)
{
    const auto f = extract_fields(build_gratuitous_arp(Ipv4Address(10, 0, 0, 1), MacAddress({2, 0, 0, 0, 0, 1})));
    ASSERT_TRUE(f);
    EXPECT_EQ(f->eth_type, kEthTypeArp);
    EXPECT_FALSE(f->ip_proto);
    EXPECT_FALSE(f->icmp_type);
}

TEST(EchoRequest, RandomProbesParseBack)
{
    std::mt19937_64 rng(11);
    for (int i = 0; i < 300; ++i) {
        auto p = sample_probe();
        p.icmp_id = static_cast<std::uint16_t>(rng());
        p.icmp_seq = static_cast<std::uint16_t>(rng());
        p.ttl = static_cast<std::uint8_t>(1 + rng() % 255);
        p.payload.resize(rng() % 64);
        for (auto& b : p.payload)
            b = static_cast<std::uint8_t>(rng());
        const auto r = parse_reply(build_echo_reply(build_echo_request(p)));
        EXPECT_EQ(r.icmp_id, p.icmp_id);
        EXPECT_EQ(r.icmp_seq, p.icmp_seq);
        EXPECT_EQ(r.payload, p.payload);
    }
}
