#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mbz/core/bytes.hpp"
#include "mbz/packet/address.hpp"

namespace mbz::dns {

inline constexpr std::uint16_t kTypeA = 1;
inline constexpr std::uint16_t kTypeCname = 5;
inline constexpr std::uint16_t kClassIn = 1;
inline constexpr std::uint8_t kRcodeNoError = 0;
inline constexpr std::uint8_t kRcodeServFail = 2;
inline constexpr std::uint8_t kRcodeNxDomain = 3;
inline constexpr std::uint16_t kPort = 53;

struct Question {
    std::string name;
    std::uint16_t qtype = kTypeA;
    std::uint16_t qclass = kClassIn;

    bool operator==(const Question&) const = default;
};

struct Record {
    std::string name;
    std::uint16_t type = kTypeA;
    std::uint16_t rclass = kClassIn;
    std::uint32_t ttl = 60;
    Bytes rdata;

    std::optional<Ipv4Address> a() const {
        if (type != kTypeA || rdata.size() != 4) return std::nullopt;
        return Ipv4Address{load_be32(rdata, 0)};
    }

    bool operator==(const Record&) const = default;
};

struct Message {
    std::uint16_t id = 0;
    std::uint16_t flags = 0;
    std::vector<Question> questions;
    std::vector<Record> answers;

    bool is_response() const { return flags & 0x8000; }
    std::uint8_t rcode() const { return flags & 0x000F; }

    std::set<Ipv4Address> a_records() const {
        std::set<Ipv4Address> out;
        for (const auto& r : answers) {
            if (auto a = r.a()) out.insert(*a);
        }
        return out;
    }
};

inline std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

namespace detail {

inline std::optional<std::string> read_name(ByteView msg, std::size_t& pos) {
    std::string name;
    std::size_t cursor = pos;
    bool jumped = false;
    int hops = 0;
    while (true) {
        if (cursor >= msg.size()) return std::nullopt;
        std::uint8_t len = msg[cursor];
        if ((len & 0xC0) == 0xC0) {
            if (cursor + 1 >= msg.size() || ++hops > 16) return std::nullopt;
            std::size_t target = ((len & 0x3F) << 8) | msg[cursor + 1];
            if (!jumped) pos = cursor + 2;
            jumped = true;
            cursor = target;
            continue;
        }
        if (len & 0xC0) return std::nullopt;
        ++cursor;
        if (len == 0) break;
        if (cursor + len > msg.size()) return std::nullopt;
        if (!name.empty()) name.push_back('.');
        name.append(reinterpret_cast<const char*>(msg.data() + cursor), len);
        cursor += len;
        if (name.size() > 255) return std::nullopt;
    }
    if (!jumped) pos = cursor;
    return lowercase(name);
}

inline bool write_name(Bytes& out, std::string_view name) {
    while (!name.empty()) {
        auto dot = name.find('.');
        auto label = name.substr(0, dot);
        if (label.empty() || label.size() > 63) return false;
        out.push_back(static_cast<std::uint8_t>(label.size()));
        out.insert(out.end(), label.begin(), label.end());
        if (dot == std::string_view::npos) break;
        name.remove_prefix(dot + 1);
    }
    out.push_back(0);
    return true;
}

}  // namespace detail

inline std::optional<Message> parse(ByteView msg) {
    if (msg.size() < 12) return std::nullopt;
    Message m;
    m.id = load_be16(msg, 0);
    m.flags = load_be16(msg, 2);
    std::uint16_t qd = load_be16(msg, 4);
    std::uint16_t an = load_be16(msg, 6);
    std::size_t pos = 12;
    for (std::uint16_t i = 0; i < qd; ++i) {
        auto name = detail::read_name(msg, pos);
        if (!name || pos + 4 > msg.size()) return std::nullopt;
        m.questions.push_back({*name, load_be16(msg, pos), load_be16(msg, pos + 2)});
        pos += 4;
    }
    for (std::uint16_t i = 0; i < an; ++i) {
        auto name = detail::read_name(msg, pos);
        if (!name || pos + 10 > msg.size()) return std::nullopt;
        Record r;
        r.name = *name;
        r.type = load_be16(msg, pos);
        r.rclass = load_be16(msg, pos + 2);
        r.ttl = load_be32(msg, pos + 4);
        std::uint16_t rdlen = load_be16(msg, pos + 8);
        pos += 10;
        if (pos + rdlen > msg.size()) return std::nullopt;
        r.rdata.assign(msg.begin() + pos, msg.begin() + pos + rdlen);
        pos += rdlen;
        m.answers.push_back(std::move(r));
    }
    return m;
}

// Uncompressed encoding; authority and additional sections are never emitted.
inline Bytes serialize(const Message& m) {
    Bytes out;
    store_be16(out, m.id);
    store_be16(out, m.flags);
    store_be16(out, static_cast<std::uint16_t>(m.questions.size()));
    store_be16(out, static_cast<std::uint16_t>(m.answers.size()));
    store_be16(out, 0);
    store_be16(out, 0);
    for (const auto& q : m.questions) {
        detail::write_name(out, q.name);
        store_be16(out, q.qtype);
        store_be16(out, q.qclass);
    }
    for (const auto& r : m.answers) {
        detail::write_name(out, r.name);
        store_be16(out, r.type);
        store_be16(out, r.rclass);
        store_be32(out, r.ttl);
        store_be16(out, static_cast<std::uint16_t>(r.rdata.size()));
        out.insert(out.end(), r.rdata.begin(), r.rdata.end());
    }
    return out;
}

inline Bytes build_query(std::uint16_t id, std::string_view name, std::uint16_t qtype = kTypeA) {
    Message m;
    m.id = id;
    m.flags = 0x0100;  // RD
    m.questions.push_back({lowercase(name), qtype, kClassIn});
    return serialize(m);
}

inline Record a_record(std::string_view name, Ipv4Address addr, std::uint32_t ttl = 60) {
    Record r;
    r.name = lowercase(name);
    r.ttl = ttl;
    store_be32(r.rdata, addr.value);
    return r;
}

inline Message make_response(const Message& query, std::uint8_t rcode, const std::vector<Ipv4Address>& answers) {
    Message m;
    m.id = query.id;
    m.flags = static_cast<std::uint16_t>(0x8000 | (query.flags & 0x0100) | 0x0080 | rcode);
    m.questions = query.questions;
    if (!query.questions.empty()) {
        for (auto a : answers) m.answers.push_back(a_record(query.questions.front().name, a));
    }
    return m;
}

}  // namespace mbz::dns
