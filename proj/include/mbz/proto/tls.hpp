#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "mbz/core/bytes.hpp"
#include "mbz/proto/dns.hpp"

namespace mbz::tls {

inline bool looks_like_handshake(ByteView payload) {
    return payload.size() >= 6 && payload[0] == 0x16 && payload[1] == 0x03 && payload[5] == 0x01;
}

// Pulls the host_name entry of the server_name extension out of a ClientHello that
// starts at the beginning of the payload. Records split across segments are not stitched.
inline std::optional<std::string> extract_sni(ByteView payload) {
    if (!looks_like_handshake(payload)) return std::nullopt;
    std::size_t record_len = load_be16(payload, 3);
    std::size_t end = std::min(payload.size(), 5 + record_len);
    std::size_t pos = 5;
    if (pos + 4 > end) return std::nullopt;
    std::size_t hs_len = (std::size_t{payload[pos + 1]} << 16) | (std::size_t{payload[pos + 2]} << 8) | payload[pos + 3];
    end = std::min(end, pos + 4 + hs_len);
    pos += 4;
    pos += 2 + 32;  // client_version + random
    if (pos + 1 > end) return std::nullopt;
    pos += 1 + payload[pos];  // session id
    if (pos + 2 > end) return std::nullopt;
    pos += 2 + load_be16(payload, pos);  // cipher suites
    if (pos + 1 > end) return std::nullopt;
    pos += 1 + payload[pos];  // compression methods
    if (pos + 2 > end) return std::nullopt;
    std::size_t ext_end = std::min(end, pos + 2 + load_be16(payload, pos));
    pos += 2;
    while (pos + 4 <= ext_end) {
        std::uint16_t type = load_be16(payload, pos);
        std::size_t len = load_be16(payload, pos + 2);
        pos += 4;
        if (pos + len > ext_end) return std::nullopt;
        if (type == 0x0000) {
            std::size_t p = pos + 2;  // server_name_list length
            std::size_t list_end = pos + len;
            while (p + 3 <= list_end) {
                std::uint8_t name_type = payload[p];
                std::size_t name_len = load_be16(payload, p + 1);
                p += 3;
                if (p + name_len > list_end) return std::nullopt;
                if (name_type == 0) {
                    return dns::lowercase(
                        std::string_view(reinterpret_cast<const char*>(payload.data() + p), name_len));
                }
                p += name_len;
            }
            return std::nullopt;
        }
        pos += len;
    }
    return std::nullopt;
}

// Minimal well-formed ClientHello carrying only a server_name extension.
inline Bytes build_client_hello(std::string_view sni) {
    Bytes ext;
    store_be16(ext, 0x0000);
    store_be16(ext, static_cast<std::uint16_t>(sni.size() + 5));
    store_be16(ext, static_cast<std::uint16_t>(sni.size() + 3));
    ext.push_back(0);
    store_be16(ext, static_cast<std::uint16_t>(sni.size()));
    ext.insert(ext.end(), sni.begin(), sni.end());

    Bytes body;
    store_be16(body, 0x0303);
    for (int i = 0; i < 32; ++i) body.push_back(static_cast<std::uint8_t>(i));
    body.push_back(0);  // session id
    store_be16(body, 2);
    store_be16(body, 0x1301);
    body.push_back(1);
    body.push_back(0);
    store_be16(body, static_cast<std::uint16_t>(ext.size()));
    body.insert(body.end(), ext.begin(), ext.end());

    Bytes hs;
    hs.push_back(0x01);
    hs.push_back(static_cast<std::uint8_t>(body.size() >> 16));
    hs.push_back(static_cast<std::uint8_t>(body.size() >> 8));
    hs.push_back(static_cast<std::uint8_t>(body.size()));
    hs.insert(hs.end(), body.begin(), body.end());

    Bytes rec{0x16, 0x03, 0x01};
    store_be16(rec, static_cast<std::uint16_t>(hs.size()));
    rec.insert(rec.end(), hs.begin(), hs.end());
    return rec;
}

}  // namespace mbz::tls

namespace mbz::quic {

// Long-header form bit plus room for the 32-bit version that follows it.
inline bool is_long_header(ByteView payload) { return payload.size() >= 5 && (payload[0] & 0x80); }

inline Bytes build_long_header_initial(std::uint32_t version = 0x00000001, std::size_t padded_size = 1200) {
    Bytes out{0xC3};
    store_be32(out, version);
    out.push_back(8);  // DCID length
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(0xA0 + i));
    out.push_back(0);  // SCID length
    out.push_back(0);  // token length
    out.resize(padded_size, 0);
    return out;
}

}  // namespace mbz::quic
