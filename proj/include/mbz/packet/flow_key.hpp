#pragma once

#include <compare>
#include <functional>
#include <string>

#include "mbz/packet/packet.hpp"

namespace mbz {

enum class Transport : std::uint8_t { Tcp, Udp };

inline const char* to_string(Transport t) { return t == Transport::Tcp ? "tcp" : "udp"; }

// Five-tuple oriented app -> network for packets read from the conduit.
struct FlowKey {
    Transport protocol = Transport::Tcp;
    Endpoint src;
    Endpoint dst;

    std::string to_string() const {
        return std::string(mbz::to_string(protocol)) + " " + src.to_string() + " -> " + dst.to_string();
    }

    auto operator<=>(const FlowKey&) const = default;
};

inline FlowKey invert(const FlowKey& k) { return FlowKey{k.protocol, k.dst, k.src}; }

inline Expected<FlowKey, PacketError> flow_key_of(const Packet& p) {
    if (const auto* tcp = p.tcp()) {
        return FlowKey{Transport::Tcp, {p.ip.src_addr, tcp->src_port}, {p.ip.dst_addr, tcp->dst_port}};
    }
    if (const auto* udp = p.udp()) {
        return FlowKey{Transport::Udp, {p.ip.src_addr, udp->src_port}, {p.ip.dst_addr, udp->dst_port}};
    }
    return unexpected(PacketError::NoTransport);
}

}  // namespace mbz

template <>
struct std::hash<mbz::FlowKey> {
    std::size_t operator()(const mbz::FlowKey& k) const noexcept {
        std::size_t h = std::hash<mbz::Endpoint>{}(k.src);
        h ^= std::hash<mbz::Endpoint>{}(k.dst) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        return h ^ static_cast<std::size_t>(k.protocol);
    }
};
