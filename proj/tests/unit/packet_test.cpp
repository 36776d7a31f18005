#include <gtest/gtest.h>

#include "mbz/packet/flow_key.hpp"
#include "support/gen.hpp"

using namespace mbz;
using namespace mbz::testing;

namespace {

// Word-by-word one's-complement sum, written independently of ChecksumAccumulator.
std::uint16_t oracle_checksum(const Bytes& data) {
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i < data.size(); i += 2) {
        std::uint32_t hi = data[i];
        std::uint32_t lo = i + 1 < data.size() ? data[i + 1] : 0;
        sum += (hi << 8) + lo;
        if (sum > 0xFFFF) sum = (sum & 0xFFFF) + 1;
    }
    return static_cast<std::uint16_t>(~sum & 0xFFFF);
}

Bytes minimal_udp() {
    // 10.0.0.2:5353 -> 8.8.8.8:53, no payload, UDP checksum zero (absent).
    Bytes b{0x45, 0, 0, 28, 0, 1, 0x40, 0, 64, 17, 0, 0, 10, 0, 0, 2, 8, 8, 8, 8,
            0x14, 0xE9, 0, 53, 0, 8, 0, 0};
    std::uint16_t c = oracle_checksum(Bytes(b.begin(), b.begin() + 20));
    b[10] = static_cast<std::uint8_t>(c >> 8);
    b[11] = static_cast<std::uint8_t>(c);
    return b;
}

}  // namespace

TEST(Checksum, AllZeroIsFfff) { EXPECT_EQ(internet_checksum(Bytes(20, 0)), 0xFFFF); }

TEST(Checksum, AllOnesIsZero) { EXPECT_EQ(internet_checksum(Bytes{0xFF, 0xFF}), 0x0000); }

TEST(Checksum, SampleVectorMatchesHandComputation) {
    Bytes v{0x00, 0x01, 0xF2, 0x03, 0xF4, 0xF5, 0xF6, 0xF7};
    // 0x0001 + 0xF203 + 0xF4F5 + 0xF6F7 = 0x2DDF0 -> fold 0xDDF2 -> complement 0x220D
    EXPECT_EQ(oracle_checksum(v), 0x220D);
    EXPECT_EQ(internet_checksum(v), 0x220D);
}

TEST(Checksum, OddLengthAgreesWithOracle) {
    Gen g(11);
    for (int i = 0; i < 500; ++i) {
        auto b = g.bytes(g.range(0, 301));
        ASSERT_EQ(internet_checksum(b), oracle_checksum(b));
    }
}

TEST(Parse, NineteenBytesIsTruncated) {
    auto r = parse_packet(Bytes(19, 0x45));
    ASSERT_FALSE(r);
    EXPECT_EQ(r.error().code, PacketError::Truncated);
}

TEST(Parse, MinimalUdpDatagram) {
    auto r = parse_packet(minimal_udp());
    ASSERT_TRUE(r) << r.error().detail;
    ASSERT_NE(r->udp(), nullptr);
    EXPECT_EQ(r->udp()->length, 8);
    EXPECT_TRUE(r->payload.empty());
}

TEST(Parse, VersionSixRejected) {
    auto b = minimal_udp();
    b[0] = 0x65;
    auto r = parse_packet(b);
    ASSERT_FALSE(r);
    EXPECT_EQ(r.error().code, PacketError::UnsupportedVersion);
}

TEST(Parse, FragmentsRejected) {
    auto b = minimal_udp();
    b[6] = 0x20;  // more-fragments
    auto r = parse_packet(b);
    ASSERT_FALSE(r);
    EXPECT_EQ(r.error().code, PacketError::Fragmented);
}

TEST(Parse, BadChecksumCarriesPacket) {
    auto b = minimal_udp();
    b[10] ^= 0x55;
    auto r = parse_packet(b);
    ASSERT_FALSE(r);
    EXPECT_EQ(r.error().code, PacketError::BadChecksum);
    ASSERT_TRUE(r.error().packet.has_value());
    EXPECT_EQ(r.error().packet->udp()->dst_port, 53);
}

TEST(Parse, IcmpHasNoTransportKey) {
    Packet p;
    p.ip.protocol = 1;
    p.ip.src_addr = Ipv4Address{10, 0, 0, 2};
    p.ip.dst_addr = Ipv4Address{1, 1, 1, 1};
    p.transport = RawTransport{};
    p.payload = Bytes{8, 0, 0, 0, 0, 1, 0, 1};
    auto parsed = parse_packet(serialize_packet(p).value());
    ASSERT_TRUE(parsed);
    auto k = flow_key_of(*parsed);
    ASSERT_FALSE(k);
    EXPECT_EQ(k.error(), PacketError::NoTransport);
}

TEST(Serialize, HandBuiltSynRoundTrips) {
    auto p = make_tcp_packet(Endpoint::parse("10.0.0.2:40000").value(), Endpoint::parse("93.184.216.34:443").value(),
                             1000, 0, TcpFlags::kSyn, {}, 65535, 1460);
    auto again = parse_packet(serialize_packet(p).value());
    ASSERT_TRUE(again);
    EXPECT_EQ(*again, p);
    EXPECT_EQ(again->tcp()->mss(), 1460);
}

TEST(Serialize, StaleChecksumsAreRecomputed) {
    Gen g(5);
    for (int i = 0; i < 100; ++i) {
        auto p = g.packet();
        auto good = serialize_packet(p).value();
        auto stale = p;
        stale.ip.header_checksum ^= 0xBEEF;
        stale.ip.total_length = 7;
        if (auto* t = stale.tcp()) t->checksum ^= 0x1234;
        if (auto* u = stale.udp()) u->checksum ^= 0x1234;
        ASSERT_EQ(serialize_packet(stale).value(), good);
    }
}

TEST(Serialize, OversizedPayload) {
    Packet p = make_udp_packet(Endpoint::parse("10.0.0.2:1").value(), Endpoint::parse("10.0.0.3:2").value(), {});
    p.payload = Bytes(kDefaultMtu - kIpv4MinHeader - kUdpHeader, 0);
    EXPECT_TRUE(serialize_packet(p));
    p.payload.push_back(0);
    auto r = serialize_packet(p);
    ASSERT_FALSE(r);
    EXPECT_EQ(r.error(), PacketError::OversizedPacket);
}

TEST(PacketProperty, RoundTripOverRandomPackets) {
    Gen g(2024);
    for (int i = 0; i < 2000; ++i) {
        auto p = g.packet();
        auto bytes = serialize_packet(p).value();
        auto once = parse_packet(bytes);
        ASSERT_TRUE(once) << "case " << i << ": " << once.error().detail;
        auto twice = parse_packet(serialize_packet(*once).value());
        ASSERT_TRUE(twice);
        ASSERT_EQ(*once, *twice);
        ASSERT_EQ(*once, p);
    }
}

TEST(PacketProperty, EmittedChecksumsVerify) {
    Gen g(77);
    for (int i = 0; i < 1000; ++i) {
        auto p = g.packet();
        auto bytes = serialize_packet(p).value();
        std::size_t ihl = (bytes[0] & 0x0F) * 4u;
        ASSERT_EQ(oracle_checksum(Bytes(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(ihl))), 0);
        Bytes pseudo;
        pseudo.insert(pseudo.end(), bytes.begin() + 12, bytes.begin() + 20);
        pseudo.push_back(0);
        pseudo.push_back(bytes[9]);
        std::size_t seg = bytes.size() - ihl;
        pseudo.push_back(static_cast<std::uint8_t>(seg >> 8));
        pseudo.push_back(static_cast<std::uint8_t>(seg));
        pseudo.insert(pseudo.end(), bytes.begin() + static_cast<std::ptrdiff_t>(ihl), bytes.end());
        ASSERT_EQ(oracle_checksum(pseudo), 0) << "case " << i;
    }
}

TEST(FlowKey, ProjectionAndInvert) {
    auto p = make_udp_packet(Endpoint::parse("10.0.0.2:5353").value(), Endpoint::parse("8.8.8.8:53").value(), {});
    auto k = flow_key_of(p).value();
    EXPECT_EQ(k.protocol, Transport::Udp);
    EXPECT_EQ(k.src.to_string(), "10.0.0.2:5353");
    EXPECT_EQ(k.dst.to_string(), "8.8.8.8:53");
    auto inv = invert(k);
    EXPECT_EQ(inv.src.to_string(), "8.8.8.8:53");
    EXPECT_EQ(inv.dst.to_string(), "10.0.0.2:5353");
}

TEST(FlowKeyProperty, InvertIsInvolutionAndDeterministic) {
    Gen g(3);
    for (int i = 0; i < 1000; ++i) {
        auto p = g.packet(64);
        auto k = flow_key_of(p).value();
        ASSERT_EQ(invert(invert(k)), k);
        ASSERT_EQ(flow_key_of(p).value(), k);
        auto q = p;
        q.payload = g.bytes(10);
        ASSERT_EQ(flow_key_of(finalized(q)).value(), k);
    }
}
