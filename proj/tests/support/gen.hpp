#pragma once

#include <random>

#include "mbz/packet/packet.hpp"

// Hand-rolled generators for property tests. Everything draws from one seeded engine.
namespace mbz::testing {

class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    std::uint64_t u64() { return rng_(); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(rng_()); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(rng_()); }
    std::uint8_t u8() { return static_cast<std::uint8_t>(rng_()); }
    bool coin(double p = 0.5) { return std::uniform_real_distribution<double>(0, 1)(rng_) < p; }

    std::size_t range(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_); }

    Bytes bytes(std::size_t n) {
        Bytes b(n);
        for (auto& x : b) x = u8();
        return b;
    }

    Ipv4Address addr() { return Ipv4Address{u32()}; }
    Endpoint endpoint() { return Endpoint{addr(), static_cast<std::uint16_t>(range(1, 65535))}; }

    // TCP options: padded to a 4-octet multiple, NOP/MSS/opaque kinds.
    Bytes tcp_options() {
        Bytes o;
        std::size_t target = 4 * range(0, 10);
        while (o.size() + 4 <= target) {
            switch (range(0, 2)) {
                case 0: o.insert(o.end(), {1, 1, 1, 1}); break;
                case 1: o.insert(o.end(), {2, 4, u8(), u8()}); break;
                default: o.insert(o.end(), {8, 4, u8(), u8()}); break;
            }
        }
        return o;
    }

    // A well-formed IPv4 packet carrying TCP or UDP with consistent lengths and checksums.
    Packet packet(std::size_t max_payload = 1400) {
        Packet p;
        p.ip.src_addr = addr();
        p.ip.dst_addr = addr();
        p.ip.ttl = u8();
        p.ip.identification = u16();
        p.ip.dscp_ecn = u8();
        p.ip.flags_fragment = coin() ? 0x4000 : 0;
        if (coin(0.2)) p.ip.options = Bytes{1, 1, 1, 0};
        if (coin()) {
            TcpHeader t;
            t.src_port = u16();
            t.dst_port = u16();
            t.seq = u32();
            t.ack = u32();
            t.flags.bits = static_cast<std::uint8_t>(u8() & 0x3F);
            t.window = u16();
            t.urgent_ptr = t.flags.urg() ? u16() : 0;
            t.options = tcp_options();
            p.ip.protocol = kProtoTcp;
            p.transport = t;
        } else {
            UdpHeader u;
            u.src_port = u16();
            u.dst_port = u16();
            p.ip.protocol = kProtoUdp;
            p.transport = u;
        }
        p.payload = bytes(range(0, max_payload));
        return finalized(p);
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

}  // namespace mbz::testing
