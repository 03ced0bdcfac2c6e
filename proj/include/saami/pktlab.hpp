#pragma once

// Ethernet/ARP/IPv4/ICMP frame construction and reply parsing for the
// measurement probes. IPv4 options, fragments and IPv6 are not supported.

#include "saami/net_types.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

namespace saami::pktlab {

inline constexpr std::size_t kEthHeader = 14;
inline constexpr std::size_t kIpv4Header = 20;
inline constexpr std::size_t kIcmpHeader = 8;
inline constexpr std::size_t kIpMtu = 1500;
inline constexpr std::uint16_t kEthTypeIpv4 = 0x0800;
inline constexpr std::uint16_t kEthTypeArp = 0x0806;
inline constexpr std::uint8_t kIpProtoIcmp = 1;

inline constexpr std::uint8_t kIcmpEchoReply = 0;
inline constexpr std::uint8_t kIcmpEchoRequest = 8;
inline constexpr std::uint8_t kIcmpTimeExceeded = 11;
inline constexpr std::uint8_t kIcmpRouterId = 200;
inline constexpr std::uint8_t kRouterIdQueryCode = 0;
inline constexpr std::uint8_t kRouterIdReplyCode = 1;
inline constexpr std::uint8_t kDefaultPingTtl = 64;
inline constexpr std::size_t kMaxIdentLength = 64;

class MalformedFrame : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class PayloadTooLarge : public std::length_error {
public:
    using std::length_error::length_error;
};

struct EchoProbe {
    MacAddress src_mac;
    MacAddress dst_mac;
    Ipv4Address src_ip;
    Ipv4Address dst_ip;
    std::uint8_t ttl = kDefaultPingTtl;
    std::uint16_t icmp_id = 0;
    std::uint16_t icmp_seq = 0;
    Bytes payload;
};

struct RouterIdentity {
    std::uint32_t asn = 0;
    std::string ident;

    // ident non-empty and at most 64 bytes.
    bool valid() const { return !ident.empty() && ident.size() <= kMaxIdentLength; }
    friend bool operator==(const RouterIdentity&, const RouterIdentity&) = default;
};

enum class ReplyKind { EchoReply, TimeExceeded, RouterIdReply, Other };

struct ParsedReply {
    ReplyKind kind = ReplyKind::Other;
    Ipv4Address responder;          // outer IPv4 source
    Ipv4Address destination;        // outer IPv4 destination
    std::uint16_t icmp_id = 0;      // from the quote for TimeExceeded
    std::uint16_t icmp_seq = 0;
    Ipv4Address quoted_destination; // TimeExceeded only
    Bytes payload;                  // ICMP payload (EchoReply, RouterIdReply)
    std::optional<RouterIdentity> identity;
};

std::uint16_t internet_checksum(std::span<const std::uint8_t> data);

Bytes build_echo_request(const EchoProbe& p);

// Throws MalformedFrame when the frame is shorter than the headers it declares.
ParsedReply parse_reply(std::span<const std::uint8_t> frame);

Bytes build_time_exceeded(Ipv4Address router_ip, std::span<const std::uint8_t> original_frame);

// Echo reply a host would send back for `request` (addresses swapped, type 0).
Bytes build_echo_reply(std::span<const std::uint8_t> request);

Bytes build_gratuitous_arp(Ipv4Address ip, MacAddress mac);

struct ArpInfo {
    std::uint16_t opcode = 0;
    MacAddress sender_mac;
    Ipv4Address sender_ip;
    MacAddress target_mac;
    Ipv4Address target_ip;
};

std::optional<ArpInfo> parse_arp(std::span<const std::uint8_t> frame);

struct RouterIdQuery {
    MacAddress src_mac;
    MacAddress dst_mac;
    Ipv4Address src_ip;
    Ipv4Address dst_ip;
    std::uint16_t icmp_id = 0;
    std::uint16_t icmp_seq = 0;
};

Bytes build_router_id_query(const RouterIdQuery& q);

// Parses an ICMP type 200 code 0 query; nullopt for anything else.
std::optional<RouterIdQuery> parse_router_id_query(std::span<const std::uint8_t> frame);

// Reply payload: 4-byte big-endian ASN, 1-byte ident length, ident bytes.
Bytes build_router_id_reply(std::span<const std::uint8_t> query_frame, const RouterIdentity& identity);

Bytes encode_router_identity(const RouterIdentity& identity);
std::optional<RouterIdentity> decode_router_identity(std::span<const std::uint8_t> payload);

// Header fields the flow table and the simulator look at.
struct FrameFields {
    std::uint16_t eth_type = 0;
    MacAddress eth_src;
    MacAddress eth_dst;
    std::optional<std::uint8_t> ip_proto;
    std::optional<Ipv4Address> ipv4_src;
    std::optional<Ipv4Address> ipv4_dst;
    std::optional<std::uint8_t> ttl;
    std::optional<std::uint8_t> icmp_type;
    std::optional<std::uint8_t> icmp_code;
};

std::optional<FrameFields> extract_fields(std::span<const std::uint8_t> frame);

} // namespace saami::pktlab
