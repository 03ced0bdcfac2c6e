#pragma once

// OpenFlow 1.3 codec for the message subset the measurement platform uses.

#include "saami/net_types.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

namespace saami::ofwire {

inline constexpr std::uint8_t kVersion = 0x04;
inline constexpr std::size_t kHeaderSize = 8;

inline constexpr std::uint32_t kNoBuffer = 0xffffffff;
inline constexpr std::uint32_t kPortController = 0xfffffffd;
inline constexpr std::uint32_t kPortAny = 0xffffffff;
inline constexpr std::uint16_t kControllerMaxLenNoBuffer = 0xffff;

enum class MsgType : std::uint8_t {
    Hello = 0,
    EchoRequest = 2,
    EchoReply = 3,
    FeaturesRequest = 5,
    FeaturesReply = 6,
    PacketIn = 10,
    PacketOut = 13,
    FlowMod = 14,
};

// ---------------------------------------------------------------- errors

class WireError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnencodableMessage : public WireError {
public:
    using WireError::WireError;
};

class Truncated : public WireError {
public:
    explicit Truncated(std::size_t needed)
        : WireError("truncated OpenFlow message"), needed_(needed)
    { }
    // Total bytes required before the message can be decoded (8 when even the header is short).
    std::size_t needed() const { return needed_; }

private:
    std::size_t needed_;
};

class BadVersion : public WireError {
public:
    explicit BadVersion(std::uint8_t got)
        : WireError("unsupported OpenFlow version"), got_(got)
    { }
    std::uint8_t got() const { return got_; }

private:
    std::uint8_t got_;
};

class UnsupportedType : public WireError {
public:
    UnsupportedType(std::uint8_t type, std::size_t consumed)
        : WireError("unsupported OpenFlow message type"), type_(type), consumed_(consumed)
    { }
    std::uint8_t type() const { return type_; }
    // Length of the skipped message, so a stream can resynchronise past it.
    std::size_t consumed() const { return consumed_; }

private:
    std::uint8_t type_;
    std::size_t consumed_;
};

class MalformedBody : public WireError {
public:
    using WireError::WireError;
};

class InvalidMatch : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- match

enum class OxmField : std::uint8_t {
    InPort = 0,
    EthType = 5,
    IpProto = 10,
    Ipv4Dst = 12,
    Icmpv4Type = 19,
    Icmpv4Code = 20,
};

// Payload width in bytes of each supported OXM field.
std::size_t oxm_width(OxmField f);

struct MatchEntry {
    OxmField field;
    std::uint32_t value;
    friend bool operator==(const MatchEntry&, const MatchEntry&) = default;
};

// OXM match restricted to the fields this platform understands. Unknown fields,
// duplicate fields and values wider than the field are rejected on insertion.
class Match {
public:
    Match() = default;

    Match& add(OxmField field, std::uint32_t value);
    Match& eth_type(std::uint16_t v) { return add(OxmField::EthType, v); }
    Match& ip_proto(std::uint8_t v) { return add(OxmField::IpProto, v); }
    Match& ipv4_dst(Ipv4Address v) { return add(OxmField::Ipv4Dst, v.value()); }
    Match& icmpv4_type(std::uint8_t v) { return add(OxmField::Icmpv4Type, v); }
    Match& icmpv4_code(std::uint8_t v) { return add(OxmField::Icmpv4Code, v); }
    Match& in_port(std::uint32_t v) { return add(OxmField::InPort, v); }

    std::optional<std::uint32_t> get(OxmField field) const;
    const std::vector<MatchEntry>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }

    friend bool operator==(const Match&, const Match&) = default;

private:
    std::vector<MatchEntry> entries_;
};

// ---------------------------------------------------------------- bodies

struct OutputAction {
    std::uint32_t port = 0;
    std::uint16_t max_len = kControllerMaxLenNoBuffer;
    friend bool operator==(const OutputAction&, const OutputAction&) = default;
};

struct HelloBody {
    Bytes elements; // raw hello elements, normally empty
    friend bool operator==(const HelloBody&, const HelloBody&) = default;
};

struct EchoBody {
    Bytes data;
    friend bool operator==(const EchoBody&, const EchoBody&) = default;
};

struct FeaturesRequestBody {
    friend bool operator==(const FeaturesRequestBody&, const FeaturesRequestBody&) = default;
};

struct FeaturesReplyBody {
    std::uint64_t datapath_id = 0;
    std::uint32_t n_buffers = 0;
    std::uint8_t n_tables = 1;
    std::uint8_t auxiliary_id = 0;
    std::uint32_t capabilities = 0;
    friend bool operator==(const FeaturesReplyBody&, const FeaturesReplyBody&) = default;
};

struct PacketOutBody {
    std::uint32_t buffer_id = kNoBuffer;
    std::uint32_t in_port = kPortController;
    std::vector<OutputAction> actions;
    Bytes frame;
    friend bool operator==(const PacketOutBody&, const PacketOutBody&) = default;
};

enum class PacketInReason : std::uint8_t { NoMatch = 0, Action = 1 };

struct PacketInBody {
    std::uint32_t buffer_id = kNoBuffer;
    std::uint16_t total_len = 0;
    PacketInReason reason = PacketInReason::Action;
    std::uint8_t table_id = 0;
    std::uint64_t cookie = 0;
    std::uint32_t in_port = 0;
    Bytes frame;
    friend bool operator==(const PacketInBody&, const PacketInBody&) = default;
};

// FlowMod ADD into table 0 with a single apply-actions instruction holding one output action.
struct FlowModBody {
    std::uint64_t cookie = 0;
    std::uint16_t priority = 0;
    Match match;
    OutputAction output{kPortController, kControllerMaxLenNoBuffer};
    friend bool operator==(const FlowModBody&, const FlowModBody&) = default;
};

using Body = std::variant<HelloBody, EchoBody, FeaturesRequestBody, FeaturesReplyBody,
                          PacketOutBody, PacketInBody, FlowModBody>;

struct Message {
    MsgType type = MsgType::Hello;
    std::uint32_t xid = 0;
    Body body = HelloBody{};

    friend bool operator==(const Message&, const Message&) = default;
};

Message hello(std::uint32_t xid);
Message echo_request(std::uint32_t xid, Bytes data = {});
Message echo_reply(std::uint32_t xid, Bytes data = {});
Message features_request(std::uint32_t xid);
Message features_reply(std::uint32_t xid, FeaturesReplyBody body);
Message packet_out(std::uint32_t xid, std::uint32_t out_port, Bytes frame);
Message packet_in(std::uint32_t xid, PacketInBody body);
Message flow_mod(std::uint32_t xid, FlowModBody body);

// ---------------------------------------------------------------- codec

Bytes encode_message(const Message& msg);

struct Decoded {
    Message message;
    std::size_t consumed = 0;
};

// Decodes the first message in `bytes`. Throws Truncated, BadVersion, UnsupportedType
// or MalformedBody.
Decoded decode_message(std::span<const std::uint8_t> bytes);

// Stream reassembly: holds any trailing partial message between segments.
class StreamFramer {
public:
    // Returns every complete supported message now available, in arrival order.
    // Unsupported message types are skipped. Throws BadVersion on a desynchronised stream.
    std::vector<Message> feed(std::span<const std::uint8_t> incoming);

    std::size_t buffered() const { return accumulator_.size(); }
    std::size_t skipped() const { return skipped_; }

private:
    Bytes accumulator_;
    std::size_t skipped_ = 0;
};

// Free-function form: `accumulator` carries the partial tail between calls.
// Unsupported or malformed (but well-framed) messages are skipped and counted in `skipped`.
std::vector<Message> frame_stream(Bytes& accumulator, std::span<const std::uint8_t> incoming,
                                  std::size_t* skipped = nullptr);

const char* type_name(MsgType t);

} // namespace saami::ofwire
