#pragma once

#include <cstdint>

#include "mbz/core/bytes.hpp"
#include "mbz/packet/address.hpp"

namespace mbz {

// Running one's-complement sum over big-endian 16-bit words. Feeding an odd-length chunk
// pads it with a zero octet, so only the final chunk may have odd length.
class ChecksumAccumulator {
public:
    void add(ByteView data) {
        std::size_t i = 0;
        for (; i + 1 < data.size(); i += 2) {
            sum_ += (std::uint32_t{data[i]} << 8) | data[i + 1];
        }
        if (i < data.size()) sum_ += std::uint32_t{data[i]} << 8;
    }

    void add_word(std::uint16_t w) { sum_ += w; }

    void add_u32(std::uint32_t v) {
        sum_ += v >> 16;
        sum_ += v & 0xFFFF;
    }

    std::uint16_t folded() const {
        std::uint64_t s = sum_;
        while (s >> 16) s = (s & 0xFFFF) + (s >> 16);
        return static_cast<std::uint16_t>(s);
    }

    std::uint16_t finish() const { return static_cast<std::uint16_t>(~folded()); }

private:
    std::uint64_t sum_ = 0;
};

inline std::uint16_t internet_checksum(ByteView data) {
    ChecksumAccumulator acc;
    acc.add(data);
    return acc.finish();
}

// Transport checksum over the IPv4 pseudo-header followed by the segment bytes.
inline std::uint16_t transport_checksum(Ipv4Address src, Ipv4Address dst, std::uint8_t protocol,
                                        ByteView segment) {
    ChecksumAccumulator acc;
    acc.add_u32(src.value);
    acc.add_u32(dst.value);
    acc.add_word(protocol);
    acc.add_word(static_cast<std::uint16_t>(segment.size()));
    acc.add(segment);
    return acc.finish();
}

}  // namespace mbz
