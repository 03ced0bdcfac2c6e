#include "saami/clock.hpp"
#include "saami/net_types.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace saami;

TEST(Ipv4Address, ParsesDottedQuad)
{
    auto a = Ipv4Address::parse("192.0.2.100");
    ASSERT_TRUE(a);
    EXPECT_EQ(a->value(), 0xc0000264u);
    EXPECT_EQ(*a, Ipv4Address(192, 0, 2, 100));
    EXPECT_EQ(Ipv4Address::parse("0.0.0.0")->value(), 0u);
    EXPECT_EQ(Ipv4Address::parse("255.255.255.255")->value(), 0xffffffffu);
}

TEST(Ipv4Address, RejectsMalformedText)
{
    for (const char* bad : {"", "1.2.3", "1.2.3.4.5", "256.1.1.1", "1.2.3.-4", "+1.2.3.4", "1..2.3", "1.2.3.4 ",
                            " 1.2.3.4", "0x1.2.3.4", "1.2.3.0004", "a.b.c.d", "1.2.3.4."})
        EXPECT_FALSE(Ipv4Address::parse(bad)) << bad;
}

TEST(Ipv4Address, TextRoundTrip)
{
    std::mt19937_64 rng(1);
    for (int i = 0; i < 2000; ++i) {
        const Ipv4Address a(static_cast<std::uint32_t>(rng()));
        EXPECT_EQ(Ipv4Address::parse(a.to_string()), a);
    }
}

TEST(Ipv4Address, OrdersByNumericValue)
{
    EXPECT_LT(Ipv4Address(9, 255, 255, 255), Ipv4Address(10, 0, 0, 0));
    EXPECT_LT(Ipv4Address(10, 0, 0, 2), Ipv4Address(10, 0, 0, 10));
}

TEST(MacAddress, ParseAndFormat)
{
    auto m = MacAddress::parse("02:00:5E:10:00:ff");
    ASSERT_TRUE(m);
    EXPECT_EQ(m->octets(), (std::array<std::uint8_t, 6>{0x02, 0x00, 0x5e, 0x10, 0x00, 0xff}));
    EXPECT_EQ(m->to_string(), "02:00:5e:10:00:ff");
    EXPECT_EQ(MacAddress::broadcast().to_string(), "ff:ff:ff:ff:ff:ff");
}

TEST(MacAddress, RejectsMalformedText)
{
    for (const char* bad : {"", "02:00:5e:10:00", "02-00-5e-10-00-ff", "02:00:5e:10:00:fff", "0g:00:5e:10:00:ff",
                            "02:00:5e:10:00:f"})
        EXPECT_FALSE(MacAddress::parse(bad)) << bad;
}

TEST(BigEndian, PutAndGet)
{
    Bytes b;
    be::put16(b, 0x1234);
    be::put32(b, 0xdeadbeef);
    be::put64(b, 0x0102030405060708ull);
    EXPECT_EQ(b, (Bytes{0x12, 0x34, 0xde, 0xad, 0xbe, 0xef, 1, 2, 3, 4, 5, 6, 7, 8}));
    EXPECT_EQ(be::get16(b.data()), 0x1234);
    EXPECT_EQ(be::get32(b.data() + 2), 0xdeadbeefu);
    EXPECT_EQ(be::get64(b.data() + 6), 0x0102030405060708ull);
    be::set16(b.data(), 0xabcd);
    EXPECT_EQ(b[0], 0xab);
    EXPECT_EQ(b[1], 0xcd);
}

TEST(VirtualClock, NeverMovesBackwards)
{
    VirtualClock c;
    EXPECT_EQ(to_us(c.now()), 0);
    c.advance_to(at_us(500));
    c.advance_to(at_us(200));
    EXPECT_EQ(to_us(c.now()), 500);
}

TEST(SteadyClock, IsMonotonic)
{
    SteadyClock c;
    auto prev = c.now();
    for (int i = 0; i < 1000; ++i) {
        const auto t = c.now();
        EXPECT_GE(t, prev);
        prev = t;
    }
}
