#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mbz/core/error.hpp"
#include "mbz/io/trace.hpp"

namespace mbz::pcap {

enum class LinkType : std::uint32_t {
    Ethernet = 1,
    Raw = 101,
    Ipv4 = 228,
};

inline constexpr std::uint32_t kMagicMicros = 0xa1b2c3d4;
inline constexpr std::uint32_t kMagicNanos = 0xa1b23c4d;

struct ReadResult {
    std::vector<TraceEvent> events;
    LinkType link = LinkType::Raw;
    // Set when the file ends inside a record; events hold everything before it.
    std::optional<Error> truncated;
    std::size_t skipped_non_ipv4 = 0;
};

namespace detail {

inline std::uint32_t bswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00) | ((v << 8) & 0xFF0000) | (v << 24);
}

inline std::uint32_t read_u32(const unsigned char* p, bool swapped) {
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    return swapped ? bswap32(v) : v;
}

inline void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::ofstream& out, std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); }

// Strips an Ethernet II header (with up to two VLAN tags); nullopt for non-IPv4 frames.
inline std::optional<Bytes> unwrap_ethernet(const Bytes& frame) {
    std::size_t off = 12;
    while (off + 2 <= frame.size()) {
        std::uint16_t ethertype = load_be16(frame, off);
        if (ethertype == 0x8100 || ethertype == 0x88a8) {
            off += 4;
            continue;
        }
        if (ethertype != 0x0800) return std::nullopt;
        return Bytes(frame.begin() + static_cast<std::ptrdiff_t>(off + 2), frame.end());
    }
    return std::nullopt;
}

}  // namespace detail

// Classic libpcap format; timestamps are returned as absolute microseconds.
inline ReadResult read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open capture " + path.string());
    unsigned char gh[24];
    if (!in.read(reinterpret_cast<char*>(gh), sizeof gh)) throw Error(ErrorCode::BadMagic, "file shorter than pcap header");

    std::uint32_t magic;
    std::memcpy(&magic, gh, 4);
    bool swapped = false;
    bool nanos = false;
    if (magic == kMagicMicros) {
    } else if (magic == detail::bswap32(kMagicMicros)) {
        swapped = true;
    } else if (magic == kMagicNanos) {
        nanos = true;
    } else if (magic == detail::bswap32(kMagicNanos)) {
        swapped = nanos = true;
    } else {
        throw Error(ErrorCode::BadMagic, "unrecognised magic in " + path.string());
    }

    ReadResult result;
    std::uint32_t network = detail::read_u32(gh + 20, swapped) & 0x0FFFFFFF;
    if (network != 1 && network != 101 && network != 228) {
        throw Error(ErrorCode::UnsupportedLinkType, "link type " + std::to_string(network));
    }
    result.link = static_cast<LinkType>(network);

    std::size_t index = 0;
    while (true) {
        unsigned char rh[16];
        in.read(reinterpret_cast<char*>(rh), sizeof rh);
        if (in.gcount() == 0) break;
        if (in.gcount() != sizeof rh) {
            result.truncated = Error(ErrorCode::TruncatedCapture, "record header " + std::to_string(index) + " cut short");
            break;
        }
        std::uint64_t sec = detail::read_u32(rh, swapped);
        std::uint64_t frac = detail::read_u32(rh + 4, swapped);
        std::uint32_t incl = detail::read_u32(rh + 8, swapped);
        Bytes data(incl);
        in.read(reinterpret_cast<char*>(data.data()), incl);
        if (static_cast<std::uint32_t>(in.gcount()) != incl) {
            result.truncated = Error(ErrorCode::TruncatedCapture, "record " + std::to_string(index) + " cut short");
            break;
        }
        ++index;
        TraceEvent ev;
        ev.ts = Timestamp{static_cast<std::int64_t>(sec * 1'000'000 + (nanos ? frac / 1000 : frac))};
        if (result.link == LinkType::Ethernet) {
            auto ip = detail::unwrap_ethernet(data);
            if (!ip) {
                ++result.skipped_non_ipv4;
                continue;
            }
            ev.packet = std::move(*ip);
        } else {
            ev.packet = std::move(data);
        }
        result.events.push_back(std::move(ev));
    }
    return result;
}

inline void write(const std::filesystem::path& path, const std::vector<TraceEvent>& events,
                  LinkType link = LinkType::Raw) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write capture " + path.string());
    detail::put_u32(out, kMagicMicros);
    detail::put_u16(out, 2);
    detail::put_u16(out, 4);
    detail::put_u32(out, 0);
    detail::put_u32(out, 0);
    detail::put_u32(out, 65535);
    detail::put_u32(out, static_cast<std::uint32_t>(link));
    for (const auto& ev : events) {
        Bytes frame;
        if (link == LinkType::Ethernet) {
            frame.assign(12, 0);
            store_be16(frame, 0x0800);
        }
        frame.insert(frame.end(), ev.packet.begin(), ev.packet.end());
        auto us = static_cast<std::uint64_t>(ev.ts.count());
        detail::put_u32(out, static_cast<std::uint32_t>(us / 1'000'000));
        detail::put_u32(out, static_cast<std::uint32_t>(us % 1'000'000));
        detail::put_u32(out, static_cast<std::uint32_t>(frame.size()));
        detail::put_u32(out, static_cast<std::uint32_t>(frame.size()));
        out.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
    }
    if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

}  // namespace mbz::pcap
