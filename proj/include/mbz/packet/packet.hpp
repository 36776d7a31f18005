#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "mbz/core/bytes.hpp"
#include "mbz/core/clock.hpp"
#include "mbz/core/expected.hpp"
#include "mbz/packet/address.hpp"
#include "mbz/packet/checksum.hpp"

namespace mbz {

inline constexpr std::uint8_t kProtoTcp = 6;
inline constexpr std::uint8_t kProtoUdp = 17;
inline constexpr std::size_t kDefaultMtu = 1500;
inline constexpr std::size_t kIpv4MinHeader = 20;
inline constexpr std::size_t kTcpMinHeader = 20;
inline constexpr std::size_t kUdpHeader = 8;

struct TcpFlags {
    std::uint8_t bits = 0;

    static constexpr std::uint8_t kFin = 0x01;
    static constexpr std::uint8_t kSyn = 0x02;
    static constexpr std::uint8_t kRst = 0x04;
    static constexpr std::uint8_t kPsh = 0x08;
    static constexpr std::uint8_t kAck = 0x10;
    static constexpr std::uint8_t kUrg = 0x20;

    constexpr bool fin() const { return bits & kFin; }
    constexpr bool syn() const { return bits & kSyn; }
    constexpr bool rst() const { return bits & kRst; }
    constexpr bool psh() const { return bits & kPsh; }
    constexpr bool ack() const { return bits & kAck; }
    constexpr bool urg() const { return bits & kUrg; }

    bool operator==(const TcpFlags&) const = default;
};

struct Ipv4Header {
    std::uint8_t version = 4;
    std::uint8_t header_length = 20;
    std::uint8_t dscp_ecn = 0;
    std::uint16_t total_length = 0;
    std::uint16_t identification = 0;
    std::uint16_t flags_fragment = 0x4000;  // DF
    std::uint8_t ttl = 64;
    std::uint8_t protocol = 0;
    std::uint16_t header_checksum = 0;
    Ipv4Address src_addr;
    Ipv4Address dst_addr;
    Bytes options;

    bool operator==(const Ipv4Header&) const = default;
};

struct TcpHeader {
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::uint32_t seq = 0;
    std::uint32_t ack = 0;
    std::uint8_t data_offset = 20;
    TcpFlags flags;
    std::uint16_t window = 0;
    std::uint16_t checksum = 0;
    std::uint16_t urgent_ptr = 0;
    Bytes options;

    // The only option the engine interprets.
    std::optional<std::uint16_t> mss() const {
        std::size_t i = 0;
        while (i < options.size()) {
            std::uint8_t kind = options[i];
            if (kind == 0) break;
            if (kind == 1) {
                ++i;
                continue;
            }
            if (i + 1 >= options.size()) break;
            std::uint8_t len = options[i + 1];
            if (len < 2 || i + len > options.size()) break;
            if (kind == 2 && len == 4) return load_be16(options, i + 2);
            i += len;
        }
        return std::nullopt;
    }

    bool operator==(const TcpHeader&) const = default;
};

struct UdpHeader {
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::uint16_t length = 8;
    std::uint16_t checksum = 0;

    bool operator==(const UdpHeader&) const = default;
};

// Any protocol other than TCP/UDP; the bytes after the IP header live in Packet::payload.
struct RawTransport {
    bool operator==(const RawTransport&) const = default;
};

struct Packet {
    Ipv4Header ip;
    std::variant<TcpHeader, UdpHeader, RawTransport> transport;
    Bytes payload;
    Timestamp captured_at{0};

    const TcpHeader* tcp() const { return std::get_if<TcpHeader>(&transport); }
    const UdpHeader* udp() const { return std::get_if<UdpHeader>(&transport); }
    TcpHeader* tcp() { return std::get_if<TcpHeader>(&transport); }
    UdpHeader* udp() { return std::get_if<UdpHeader>(&transport); }

    bool operator==(const Packet&) const = default;
};

enum class PacketError {
    Truncated,
    UnsupportedVersion,
    BadChecksum,
    Fragmented,
    Malformed,
    OversizedPacket,
    NoTransport,
};

inline const char* to_string(PacketError e) {
    switch (e) {
        case PacketError::Truncated: return "Truncated";
        case PacketError::UnsupportedVersion: return "UnsupportedVersion";
        case PacketError::BadChecksum: return "BadChecksum";
        case PacketError::Fragmented: return "Fragmented";
        case PacketError::Malformed: return "Malformed";
        case PacketError::OversizedPacket: return "OversizedPacket";
        case PacketError::NoTransport: return "NoTransport";
    }
    return "Unknown";
}

struct ParseFailure {
    PacketError code;
    std::string detail;
    // Set for BadChecksum: the structurally valid packet, for diagnostics or lenient callers.
    std::optional<Packet> packet;
};

namespace detail {

inline Expected<Packet, ParseFailure> fail(PacketError code, std::string detail) {
    return unexpected(ParseFailure{code, std::move(detail), std::nullopt});
}

}  // namespace detail

inline Expected<Packet, ParseFailure> parse_packet(ByteView bytes, Timestamp captured_at = Timestamp{0}) {
    using detail::fail;
    if (bytes.size() < kIpv4MinHeader) return fail(PacketError::Truncated, "shorter than IPv4 header");

    Packet p;
    p.captured_at = captured_at;
    auto& ip = p.ip;
    ip.version = bytes[0] >> 4;
    if (ip.version != 4) return fail(PacketError::UnsupportedVersion, "IP version " + std::to_string(ip.version));
    ip.header_length = static_cast<std::uint8_t>((bytes[0] & 0x0F) * 4);
    if (ip.header_length < kIpv4MinHeader) return fail(PacketError::Malformed, "IHL below 5");
    if (bytes.size() < ip.header_length) return fail(PacketError::Truncated, "IP options cut short");
    ip.dscp_ecn = bytes[1];
    ip.total_length = load_be16(bytes, 2);
    if (ip.total_length < ip.header_length) return fail(PacketError::Malformed, "total length below header length");
    if (bytes.size() < ip.total_length) return fail(PacketError::Truncated, "shorter than total length");
    ip.identification = load_be16(bytes, 4);
    ip.flags_fragment = load_be16(bytes, 6);
    if ((ip.flags_fragment & 0x2000) || (ip.flags_fragment & 0x1FFF)) {
        return fail(PacketError::Fragmented, "IP fragments are not reassembled");
    }
    ip.ttl = bytes[8];
    ip.protocol = bytes[9];
    ip.header_checksum = load_be16(bytes, 10);
    ip.src_addr = Ipv4Address{load_be32(bytes, 12)};
    ip.dst_addr = Ipv4Address{load_be32(bytes, 16)};
    ip.options.assign(bytes.begin() + kIpv4MinHeader, bytes.begin() + ip.header_length);

    bool checksum_ok = internet_checksum(bytes.subspan(0, ip.header_length)) == 0;

    auto segment = bytes.subspan(ip.header_length, ip.total_length - ip.header_length);
    if (ip.protocol == kProtoTcp) {
        if (segment.size() < kTcpMinHeader) return fail(PacketError::Truncated, "TCP header cut short");
        TcpHeader tcp;
        tcp.src_port = load_be16(segment, 0);
        tcp.dst_port = load_be16(segment, 2);
        tcp.seq = load_be32(segment, 4);
        tcp.ack = load_be32(segment, 8);
        tcp.data_offset = static_cast<std::uint8_t>((segment[12] >> 4) * 4);
        if (tcp.data_offset < kTcpMinHeader) return fail(PacketError::Malformed, "TCP data offset below 5");
        if (segment.size() < tcp.data_offset) return fail(PacketError::Truncated, "TCP options cut short");
        tcp.flags.bits = segment[13] & 0x3F;
        tcp.window = load_be16(segment, 14);
        tcp.checksum = load_be16(segment, 16);
        tcp.urgent_ptr = load_be16(segment, 18);
        tcp.options.assign(segment.begin() + kTcpMinHeader, segment.begin() + tcp.data_offset);
        p.payload.assign(segment.begin() + tcp.data_offset, segment.end());
        checksum_ok = checksum_ok && transport_checksum(ip.src_addr, ip.dst_addr, kProtoTcp, segment) == 0;
        p.transport = std::move(tcp);
    } else if (ip.protocol == kProtoUdp) {
        if (segment.size() < kUdpHeader) return fail(PacketError::Truncated, "UDP header cut short");
        UdpHeader udp;
        udp.src_port = load_be16(segment, 0);
        udp.dst_port = load_be16(segment, 2);
        udp.length = load_be16(segment, 4);
        udp.checksum = load_be16(segment, 6);
        if (udp.length > segment.size()) return fail(PacketError::Truncated, "UDP length exceeds datagram");
        if (udp.length < kUdpHeader || udp.length != segment.size()) {
            return fail(PacketError::Malformed, "UDP length disagrees with IP total length");
        }
        p.payload.assign(segment.begin() + kUdpHeader, segment.end());
        if (udp.checksum != 0) {
            checksum_ok = checksum_ok && transport_checksum(ip.src_addr, ip.dst_addr, kProtoUdp, segment) == 0;
        }
        p.transport = udp;
    } else {
        p.transport = RawTransport{};
        p.payload.assign(segment.begin(), segment.end());
    }

    if (!checksum_ok) {
        return unexpected(ParseFailure{PacketError::BadChecksum, "checksum mismatch", std::move(p)});
    }
    return p;
}

// Emits wire bytes with lengths, data offset, and both checksums recomputed from scratch.
inline Expected<Bytes, PacketError> serialize_packet(const Packet& p, std::size_t mtu = kDefaultMtu) {
    const auto& ip = p.ip;
    if (ip.options.size() % 4 != 0 || ip.options.size() > 40) return unexpected(PacketError::Malformed);

    Bytes segment;
    std::uint8_t protocol = ip.protocol;
    if (const auto* tcp = p.tcp()) {
        if (tcp->options.size() % 4 != 0 || tcp->options.size() > 40) return unexpected(PacketError::Malformed);
        protocol = kProtoTcp;
        segment.reserve(kTcpMinHeader + tcp->options.size() + p.payload.size());
        store_be16(segment, tcp->src_port);
        store_be16(segment, tcp->dst_port);
        store_be32(segment, tcp->seq);
        store_be32(segment, tcp->ack);
        segment.push_back(static_cast<std::uint8_t>(((kTcpMinHeader + tcp->options.size()) / 4) << 4));
        segment.push_back(tcp->flags.bits & 0x3F);
        store_be16(segment, tcp->window);
        store_be16(segment, 0);
        store_be16(segment, tcp->urgent_ptr);
        segment.insert(segment.end(), tcp->options.begin(), tcp->options.end());
        segment.insert(segment.end(), p.payload.begin(), p.payload.end());
    } else if (const auto* udp = p.udp()) {
        protocol = kProtoUdp;
        std::size_t len = kUdpHeader + p.payload.size();
        if (len > 0xFFFF) return unexpected(PacketError::OversizedPacket);
        store_be16(segment, udp->src_port);
        store_be16(segment, udp->dst_port);
        store_be16(segment, static_cast<std::uint16_t>(len));
        store_be16(segment, 0);
        segment.insert(segment.end(), p.payload.begin(), p.payload.end());
    } else {
        segment = p.payload;
    }

    std::size_t header_len = kIpv4MinHeader + ip.options.size();
    std::size_t total = header_len + segment.size();
    if (total > mtu || total > 0xFFFF) return unexpected(PacketError::OversizedPacket);

    if (protocol == kProtoTcp) {
        patch_be16(segment, 16, transport_checksum(ip.src_addr, ip.dst_addr, kProtoTcp, segment));
    } else if (protocol == kProtoUdp) {
        std::uint16_t c = transport_checksum(ip.src_addr, ip.dst_addr, kProtoUdp, segment);
        patch_be16(segment, 6, c == 0 ? 0xFFFF : c);
    }

    Bytes out;
    out.reserve(total);
    out.push_back(static_cast<std::uint8_t>(0x40 | (header_len / 4)));
    out.push_back(ip.dscp_ecn);
    store_be16(out, static_cast<std::uint16_t>(total));
    store_be16(out, ip.identification);
    store_be16(out, ip.flags_fragment);
    out.push_back(ip.ttl);
    out.push_back(protocol);
    store_be16(out, 0);
    store_be32(out, ip.src_addr.value);
    store_be32(out, ip.dst_addr.value);
    out.insert(out.end(), ip.options.begin(), ip.options.end());
    patch_be16(out, 10, internet_checksum(out));
    out.insert(out.end(), segment.begin(), segment.end());
    return out;
}

// Returns p with every derived field (lengths, offsets, checksums) made consistent.
inline Packet finalized(const Packet& p, std::size_t mtu = 0xFFFF) {
    auto bytes = serialize_packet(p, mtu);
    if (!bytes) return p;
    auto parsed = parse_packet(*bytes, p.captured_at);
    return parsed ? std::move(parsed).value() : p;
}

inline Bytes mss_option(std::uint16_t mss) {
    return Bytes{2, 4, static_cast<std::uint8_t>(mss >> 8), static_cast<std::uint8_t>(mss)};
}

inline Packet make_tcp_packet(const Endpoint& src, const Endpoint& dst, std::uint32_t seq, std::uint32_t ack,
                              std::uint8_t flags, ByteView payload = {}, std::uint16_t window = 65535,
                              std::optional<std::uint16_t> mss = std::nullopt) {
    Packet p;
    p.ip.protocol = kProtoTcp;
    p.ip.src_addr = src.addr;
    p.ip.dst_addr = dst.addr;
    TcpHeader tcp;
    tcp.src_port = src.port;
    tcp.dst_port = dst.port;
    tcp.seq = seq;
    tcp.ack = ack;
    tcp.flags.bits = flags;
    tcp.window = window;
    if (mss) tcp.options = mss_option(*mss);
    p.transport = std::move(tcp);
    p.payload.assign(payload.begin(), payload.end());
    return finalized(p);
}

inline Packet make_udp_packet(const Endpoint& src, const Endpoint& dst, ByteView payload) {
    Packet p;
    p.ip.protocol = kProtoUdp;
    p.ip.src_addr = src.addr;
    p.ip.dst_addr = dst.addr;
    UdpHeader udp;
    udp.src_port = src.port;
    udp.dst_port = dst.port;
    p.transport = udp;
    p.payload.assign(payload.begin(), payload.end());
    return finalized(p);
}

}  // namespace mbz
