#include "saami/ofwire.hpp"

#include <algorithm>
#include <limits>

namespace saami::ofwire {

namespace {

constexpr std::uint16_t kOxmClassBasic = 0x8000;
constexpr std::uint16_t kMatchTypeOxm = 1;
constexpr std::uint16_t kActionOutput = 0;
constexpr std::uint16_t kActionOutputLen = 16;
constexpr std::uint16_t kInstructionApplyActions = 4;
constexpr std::uint16_t kInstructionApplyLen = 8 + kActionOutputLen;
constexpr std::size_t kFeaturesReplyBody = 24;
constexpr std::size_t kPacketOutFixed = 16;
constexpr std::size_t kPacketInFixed = 16;
constexpr std::size_t kFlowModFixed = 40;

bool valid_field(OxmField f)
{
    switch (f) {
    case OxmField::InPort:
    case OxmField::EthType:
    case OxmField::IpProto:
    case OxmField::Ipv4Dst:
    case OxmField::Icmpv4Type:
    case OxmField::Icmpv4Code:
        return true;
    }
    return false;
}

std::size_t padded8(std::size_t n) { return (n + 7) / 8 * 8; }

void put_pad(Bytes& out, std::size_t n) { out.insert(out.end(), n, 0); }

void put_uint(Bytes& out, std::uint32_t v, std::size_t width)
{
    for (std::size_t i = width; i-- > 0;)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_uint(const std::uint8_t* p, std::size_t width)
{
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < width; ++i)
        v = (v << 8) | p[i];
    return v;
}

void encode_match(Bytes& out, const Match& m)
{
    std::size_t oxm_len = 0;
    for (const auto& e : m.entries())
        oxm_len += 4 + oxm_width(e.field);
    const std::size_t len = 4 + oxm_len;
    be::put16(out, kMatchTypeOxm);
    be::put16(out, static_cast<std::uint16_t>(len));
    for (const auto& e : m.entries()) {
        const auto width = oxm_width(e.field);
        be::put16(out, kOxmClassBasic);
        out.push_back(static_cast<std::uint8_t>(static_cast<std::uint8_t>(e.field) << 1));
        out.push_back(static_cast<std::uint8_t>(width));
        put_uint(out, e.value, width);
    }
    put_pad(out, padded8(len) - len);
}

struct MatchView {
    Match match;
    std::size_t encoded_size = 0; // including padding
};

// `lenient` skips fields outside the supported set (switches add extra PacketIn metadata).
MatchView decode_match(std::span<const std::uint8_t> b, bool lenient)
{
    if (b.size() < 4)
        throw MalformedBody("match header truncated");
    if (be::get16(b.data()) != kMatchTypeOxm)
        throw MalformedBody("match is not OXM");
    const std::size_t len = be::get16(b.data() + 2);
    if (len < 4 || padded8(len) > b.size())
        throw MalformedBody("match length out of range");
    MatchView view;
    view.encoded_size = padded8(len);
    std::size_t off = 4;
    while (off < len) {
        if (off + 4 > len)
            throw MalformedBody("oxm header truncated");
        const auto cls = be::get16(b.data() + off);
        const auto field_byte = b[off + 2];
        const std::size_t width = b[off + 3];
        if (off + 4 + width > len)
            throw MalformedBody("oxm value truncated");
        const auto field = static_cast<OxmField>(field_byte >> 1);
        const bool hasmask = (field_byte & 1) != 0;
        const bool known = cls == kOxmClassBasic && !hasmask && valid_field(field) && oxm_width(field) == width;
        if (known) {
            try {
                view.match.add(field, get_uint(b.data() + off + 4, width));
            } catch (const InvalidMatch& e) {
                throw MalformedBody(e.what());
            }
        } else if (!lenient) {
            throw MalformedBody("unsupported oxm field");
        }
        off += 4 + width;
    }
    return view;
}

void encode_output(Bytes& out, const OutputAction& a)
{
    be::put16(out, kActionOutput);
    be::put16(out, kActionOutputLen);
    be::put32(out, a.port);
    be::put16(out, a.max_len);
    put_pad(out, 6);
}

std::vector<OutputAction> decode_actions(std::span<const std::uint8_t> b)
{
    std::vector<OutputAction> actions;
    std::size_t off = 0;
    while (off < b.size()) {
        if (off + 4 > b.size())
            throw MalformedBody("action header truncated");
        const auto type = be::get16(b.data() + off);
        const auto len = be::get16(b.data() + off + 2);
        if (len < 8 || off + len > b.size())
            throw MalformedBody("action length out of range");
        if (type != kActionOutput || len != kActionOutputLen)
            throw MalformedBody("only output actions are supported");
        actions.push_back({be::get32(b.data() + off + 4), be::get16(b.data() + off + 8)});
        off += len;
    }
    return actions;
}

template <class T>
const T& body_as(const Message& msg)
{
    if (const auto* p = std::get_if<T>(&msg.body))
        return *p;
    throw UnencodableMessage(std::string("body does not match message type ") + type_name(msg.type));
}

void encode_body(Bytes& out, const Message& msg)
{
    switch (msg.type) {
    case MsgType::Hello: {
        const auto& b = body_as<HelloBody>(msg);
        out.insert(out.end(), b.elements.begin(), b.elements.end());
        break;
    }
    case MsgType::EchoRequest:
    case MsgType::EchoReply: {
        const auto& b = body_as<EchoBody>(msg);
        out.insert(out.end(), b.data.begin(), b.data.end());
        break;
    }
    case MsgType::FeaturesRequest:
        body_as<FeaturesRequestBody>(msg);
        break;
    case MsgType::FeaturesReply: {
        const auto& b = body_as<FeaturesReplyBody>(msg);
        be::put64(out, b.datapath_id);
        be::put32(out, b.n_buffers);
        out.push_back(b.n_tables);
        out.push_back(b.auxiliary_id);
        put_pad(out, 2);
        be::put32(out, b.capabilities);
        be::put32(out, 0); // reserved
        break;
    }
    case MsgType::PacketOut: {
        const auto& b = body_as<PacketOutBody>(msg);
        if (b.buffer_id == kNoBuffer && b.frame.empty())
            throw UnencodableMessage("PacketOut without buffer needs a frame");
        const std::size_t actions_len = b.actions.size() * kActionOutputLen;
        if (actions_len > std::numeric_limits<std::uint16_t>::max())
            throw UnencodableMessage("PacketOut action list too long");
        be::put32(out, b.buffer_id);
        be::put32(out, b.in_port);
        be::put16(out, static_cast<std::uint16_t>(actions_len));
        put_pad(out, 6);
        for (const auto& a : b.actions)
            encode_output(out, a);
        out.insert(out.end(), b.frame.begin(), b.frame.end());
        break;
    }
    case MsgType::PacketIn: {
        const auto& b = body_as<PacketInBody>(msg);
        if (b.frame.size() > b.total_len)
            throw UnencodableMessage("PacketIn frame longer than total_len");
        be::put32(out, b.buffer_id);
        be::put16(out, b.total_len);
        out.push_back(static_cast<std::uint8_t>(b.reason));
        out.push_back(b.table_id);
        be::put64(out, b.cookie);
        encode_match(out, Match{}.in_port(b.in_port));
        put_pad(out, 2);
        out.insert(out.end(), b.frame.begin(), b.frame.end());
        break;
    }
    case MsgType::FlowMod: {
        const auto& b = body_as<FlowModBody>(msg);
        be::put64(out, b.cookie);
        be::put64(out, 0);         // cookie_mask
        out.push_back(0);          // table_id
        out.push_back(0);          // command: ADD
        be::put16(out, 0);         // idle_timeout
        be::put16(out, 0);         // hard_timeout
        be::put16(out, b.priority);
        be::put32(out, kNoBuffer);
        be::put32(out, kPortAny);  // out_port
        be::put32(out, kPortAny);  // out_group
        be::put16(out, 0);         // flags
        put_pad(out, 2);
        encode_match(out, b.match);
        be::put16(out, kInstructionApplyActions);
        be::put16(out, kInstructionApplyLen);
        put_pad(out, 4);
        encode_output(out, b.output);
        break;
    }
    }
}

Body decode_body(MsgType type, std::span<const std::uint8_t> b)
{
    switch (type) {
    case MsgType::Hello:
        return HelloBody{Bytes(b.begin(), b.end())};
    case MsgType::EchoRequest:
    case MsgType::EchoReply:
        return EchoBody{Bytes(b.begin(), b.end())};
    case MsgType::FeaturesRequest:
        return FeaturesRequestBody{};
    case MsgType::FeaturesReply: {
        if (b.size() < kFeaturesReplyBody)
            throw MalformedBody("FeaturesReply too short");
        FeaturesReplyBody f;
        f.datapath_id = be::get64(b.data());
        f.n_buffers = be::get32(b.data() + 8);
        f.n_tables = b[12];
        f.auxiliary_id = b[13];
        f.capabilities = be::get32(b.data() + 16);
        return f;
    }
    case MsgType::PacketOut: {
        if (b.size() < kPacketOutFixed)
            throw MalformedBody("PacketOut too short");
        PacketOutBody p;
        p.buffer_id = be::get32(b.data());
        p.in_port = be::get32(b.data() + 4);
        const std::size_t actions_len = be::get16(b.data() + 8);
        if (kPacketOutFixed + actions_len > b.size())
            throw MalformedBody("PacketOut actions overrun");
        p.actions = decode_actions(b.subspan(kPacketOutFixed, actions_len));
        auto frame = b.subspan(kPacketOutFixed + actions_len);
        p.frame.assign(frame.begin(), frame.end());
        return p;
    }
    case MsgType::PacketIn: {
        if (b.size() < kPacketInFixed + 8 + 2)
            throw MalformedBody("PacketIn too short");
        PacketInBody p;
        p.buffer_id = be::get32(b.data());
        p.total_len = be::get16(b.data() + 4);
        const auto reason = b[6];
        if (reason > 1)
            throw MalformedBody("PacketIn reason outside subset");
        p.reason = static_cast<PacketInReason>(reason);
        p.table_id = b[7];
        p.cookie = be::get64(b.data() + 8);
        auto mv = decode_match(b.subspan(kPacketInFixed), true);
        p.in_port = mv.match.get(OxmField::InPort).value_or(0);
        const std::size_t frame_off = kPacketInFixed + mv.encoded_size + 2;
        if (frame_off > b.size())
            throw MalformedBody("PacketIn match overrun");
        auto frame = b.subspan(frame_off);
        if (frame.size() > p.total_len)
            throw MalformedBody("PacketIn frame longer than total_len");
        p.frame.assign(frame.begin(), frame.end());
        return p;
    }
    case MsgType::FlowMod: {
        if (b.size() < kFlowModFixed + 8)
            throw MalformedBody("FlowMod too short");
        FlowModBody f;
        f.cookie = be::get64(b.data());
        if (b[16] != 0 || b[17] != 0)
            throw MalformedBody("only FlowMod ADD into table 0 is supported");
        f.priority = be::get16(b.data() + 22);
        auto mv = decode_match(b.subspan(kFlowModFixed), false);
        f.match = std::move(mv.match);
        auto inst = b.subspan(kFlowModFixed + mv.encoded_size);
        if (inst.size() != kInstructionApplyLen || be::get16(inst.data()) != kInstructionApplyActions
            || be::get16(inst.data() + 2) != kInstructionApplyLen)
            throw MalformedBody("FlowMod must carry one apply-actions instruction");
        auto actions = decode_actions(inst.subspan(8));
        if (actions.size() != 1)
            throw MalformedBody("FlowMod must carry exactly one output action");
        f.output = actions.front();
        return f;
    }
    }
    throw MalformedBody("unreachable");
}

bool supported_type(std::uint8_t t)
{
    switch (static_cast<MsgType>(t)) {
    case MsgType::Hello:
    case MsgType::EchoRequest:
    case MsgType::EchoReply:
    case MsgType::FeaturesRequest:
    case MsgType::FeaturesReply:
    case MsgType::PacketIn:
    case MsgType::PacketOut:
    case MsgType::FlowMod:
        return true;
    }
    return false;
}

} // namespace

std::size_t oxm_width(OxmField f)
{
    switch (f) {
    case OxmField::InPort:
    case OxmField::Ipv4Dst:
        return 4;
    case OxmField::EthType:
        return 2;
    case OxmField::IpProto:
    case OxmField::Icmpv4Type:
    case OxmField::Icmpv4Code:
        return 1;
    }
    throw InvalidMatch("unsupported match field");
}

Match& Match::add(OxmField field, std::uint32_t value)
{
    if (!valid_field(field))
        throw InvalidMatch("unsupported match field");
    const auto width = oxm_width(field);
    if (width < 4 && value >= (1u << (8 * width)))
        throw InvalidMatch("match value wider than field");
    if (get(field))
        throw InvalidMatch("duplicate match field");
    entries_.push_back({field, value});
    return *this;
}

std::optional<std::uint32_t> Match::get(OxmField field) const
{
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const MatchEntry& e) { return e.field == field; });
    if (it == entries_.end())
        return std::nullopt;
    return it->value;
}

Message hello(std::uint32_t xid) { return {MsgType::Hello, xid, HelloBody{}}; }
Message echo_request(std::uint32_t xid, Bytes data) { return {MsgType::EchoRequest, xid, EchoBody{std::move(data)}}; }
Message echo_reply(std::uint32_t xid, Bytes data) { return {MsgType::EchoReply, xid, EchoBody{std::move(data)}}; }
Message features_request(std::uint32_t xid) { return {MsgType::FeaturesRequest, xid, FeaturesRequestBody{}}; }
Message features_reply(std::uint32_t xid, FeaturesReplyBody body) { return {MsgType::FeaturesReply, xid, body}; }

Message packet_out(std::uint32_t xid, std::uint32_t out_port, Bytes frame)
{
    PacketOutBody b;
    b.actions.push_back({out_port, 0});
    b.frame = std::move(frame);
    return {MsgType::PacketOut, xid, std::move(b)};
}

Message packet_in(std::uint32_t xid, PacketInBody body) { return {MsgType::PacketIn, xid, std::move(body)}; }
Message flow_mod(std::uint32_t xid, FlowModBody body) { return {MsgType::FlowMod, xid, std::move(body)}; }

Bytes encode_message(const Message& msg)
{
    Bytes out;
    out.reserve(64);
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(msg.type));
    be::put16(out, 0);
    be::put32(out, msg.xid);
    encode_body(out, msg);
    if (out.size() > std::numeric_limits<std::uint16_t>::max())
        throw UnencodableMessage("message exceeds 65535 bytes");
    be::set16(out.data() + 2, static_cast<std::uint16_t>(out.size()));
    return out;
}

Decoded decode_message(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < kHeaderSize)
        throw Truncated(kHeaderSize);
    if (bytes[0] != kVersion)
        throw BadVersion(bytes[0]);
    const std::size_t length = be::get16(bytes.data() + 2);
    if (length < kHeaderSize)
        throw MalformedBody("length field below header size");
    if (length > bytes.size())
        throw Truncated(length);
    const auto type = bytes[1];
    if (!supported_type(type))
        throw UnsupportedType(type, length);
    Decoded d;
    d.message.type = static_cast<MsgType>(type);
    d.message.xid = be::get32(bytes.data() + 4);
    d.message.body = decode_body(d.message.type, bytes.subspan(kHeaderSize, length - kHeaderSize));
    d.consumed = length;
    return d;
}

std::vector<Message> frame_stream(Bytes& accumulator, std::span<const std::uint8_t> incoming, std::size_t* skipped)
{
    accumulator.insert(accumulator.end(), incoming.begin(), incoming.end());
    std::vector<Message> out;
    std::size_t off = 0;
    while (accumulator.size() - off >= kHeaderSize) {
        auto rest = std::span<const std::uint8_t>(accumulator).subspan(off);
        if (rest[0] != kVersion)
            throw BadVersion(rest[0]);
        const std::size_t length = be::get16(rest.data() + 2);
        if (length < kHeaderSize)
            throw MalformedBody("length field below header size");
        if (length > rest.size())
            break;
        try {
            out.push_back(decode_message(rest).message);
        } catch (const UnsupportedType&) {
            if (skipped)
                ++*skipped;
        } catch (const MalformedBody&) {
            if (skipped)
                ++*skipped;
        }
        off += length;
    }
    accumulator.erase(accumulator.begin(), accumulator.begin() + static_cast<std::ptrdiff_t>(off));
    return out;
}

std::vector<Message> StreamFramer::feed(std::span<const std::uint8_t> incoming)
{
    return frame_stream(accumulator_, incoming, &skipped_);
}

const char* type_name(MsgType t)
{
    switch (t) {
    case MsgType::Hello: return "Hello";
    case MsgType::EchoRequest: return "EchoRequest";
    case MsgType::EchoReply: return "EchoReply";
    case MsgType::FeaturesRequest: return "FeaturesRequest";
    case MsgType::FeaturesReply: return "FeaturesReply";
    case MsgType::PacketIn: return "PacketIn";
    case MsgType::PacketOut: return "PacketOut";
    case MsgType::FlowMod: return "FlowMod";
    }
    return "Unknown";
}

} // namespace saami::ofwire
