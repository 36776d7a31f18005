#pragma once

#include <arpa/inet.h>

#include <algorithm>
#include <charconv>
#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

namespace mbz {

// IPv4 address in host byte order.
struct Ipv4Address {
    std::uint32_t value = 0;

    constexpr Ipv4Address() = default;
    constexpr explicit Ipv4Address(std::uint32_t v) : value(v) {}
    constexpr Ipv4Address(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d)
        : value((std::uint32_t{a} << 24) | (std::uint32_t{b} << 16) | (std::uint32_t{c} << 8) | d) {}

    static std::optional<Ipv4Address> parse(std::string_view text) {
        std::string s(text);
        in_addr addr{};
        if (inet_pton(AF_INET, s.c_str(), &addr) != 1) return std::nullopt;
        return Ipv4Address{ntohl(addr.s_addr)};
    }

    std::string to_string() const {
        char buf[INET_ADDRSTRLEN];
        in_addr addr{htonl(value)};
        inet_ntop(AF_INET, &addr, buf, sizeof buf);
        return buf;
    }

    auto operator<=>(const Ipv4Address&) const = default;
};

struct Endpoint {
    Ipv4Address addr;
    std::uint16_t port = 0;

    // "a.b.c.d:port"
    static std::optional<Endpoint> parse(std::string_view text) {
        auto colon = text.rfind(':');
        if (colon == std::string_view::npos) return std::nullopt;
        auto addr = Ipv4Address::parse(text.substr(0, colon));
        if (!addr) return std::nullopt;
        auto port_text = text.substr(colon + 1);
        unsigned port = 0;
        auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
        if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port > 0xFFFF) {
            return std::nullopt;
        }
        return Endpoint{*addr, static_cast<std::uint16_t>(port)};
    }

    std::string to_string() const { return addr.to_string() + ":" + std::to_string(port); }

    auto operator<=>(const Endpoint&) const = default;
};

struct Cidr {
    Ipv4Address network;
    int prefix = 32;

    static std::optional<Cidr> parse(std::string_view text) {
        auto slash = text.find('/');
        auto addr = Ipv4Address::parse(text.substr(0, slash));
        if (!addr) return std::nullopt;
        int prefix = 32;
        if (slash != std::string_view::npos) {
            auto p = text.substr(slash + 1);
            auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), prefix);
            if (ec != std::errc{} || ptr != p.data() + p.size() || prefix < 0 || prefix > 32) {
                return std::nullopt;
            }
        }
        return Cidr{Ipv4Address{addr->value & mask_for(prefix)}, prefix};
    }

    static constexpr std::uint32_t mask_for(int prefix) {
        return prefix == 0 ? 0u : ~std::uint32_t{0} << (32 - prefix);
    }

    bool contains(Ipv4Address a) const { return (a.value & mask_for(prefix)) == network.value; }

    bool overlaps(const Cidr& other) const {
        int p = std::min(prefix, other.prefix);
        return (network.value & mask_for(p)) == (other.network.value & mask_for(p));
    }

    std::string to_string() const { return network.to_string() + "/" + std::to_string(prefix); }

    auto operator<=>(const Cidr&) const = default;
};

}  // namespace mbz

template <>
struct std::hash<mbz::Endpoint> {
    std::size_t operator()(const mbz::Endpoint& e) const noexcept {
        return std::hash<std::uint64_t>{}((std::uint64_t{e.addr.value} << 16) | e.port);
    }
};
