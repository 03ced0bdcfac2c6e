#include "saami/net_types.hpp"

#include <charconv>
#include <cstdio>

namespace saami {

std::optional<Ipv4Address> Ipv4Address::parse(std::string_view text)
{
    std::uint32_t value = 0;
    const char* p = text.data();
    const char* end = text.data() + text.size();
    for (int octet = 0; octet < 4; ++octet) {
        if (octet > 0) {
            if (p == end || *p != '.')
                return std::nullopt;
            ++p;
        }
        if (p == end || *p < '0' || *p > '9')
            return std::nullopt;
        unsigned v = 0;
        auto [next, ec] = std::from_chars(p, end, v);
        if (ec != std::errc{} || v > 255 || next - p > 3)
            return std::nullopt;
        p = next;
        value = (value << 8) | v;
    }
    if (p != end)
        return std::nullopt;
    return Ipv4Address(value);
}

std::string Ipv4Address::to_string() const
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", value_ >> 24, (value_ >> 16) & 0xff, (value_ >> 8) & 0xff,
                  value_ & 0xff);
    return buf;
}

std::optional<MacAddress> MacAddress::parse(std::string_view text)
{
    if (text.size() != 17)
        return std::nullopt;
    std::array<std::uint8_t, 6> octets{};
    for (std::size_t i = 0; i < 6; ++i) {
        if (i > 0 && text[i * 3 - 1] != ':')
            return std::nullopt;
        unsigned v = 0;
        auto [next, ec] = std::from_chars(text.data() + i * 3, text.data() + i * 3 + 2, v, 16);
        if (ec != std::errc{} || next != text.data() + i * 3 + 2)
            return std::nullopt;
        octets[i] = static_cast<std::uint8_t>(v);
    }
    return MacAddress(octets);
}

std::string MacAddress::to_string() const
{
    char buf[18];
    std::snprintf(buf, sizeof buf, "%02x:%02x:%02x:%02x:%02x:%02x", octets_[0], octets_[1], octets_[2], octets_[3],
                  octets_[4], octets_[5]);
    return buf;
}

} // namespace saami
