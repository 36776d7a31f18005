#pragma once

#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mbz/core/error.hpp"
#include "mbz/packet/address.hpp"
#include "mbz/proto/dns.hpp"

namespace mbz {

inline constexpr std::string_view kUnknownOrg = "unknown";

// Domain pattern: ".example.com" matches the name and every subdomain; a bare name matches exactly.
inline bool domain_matches(std::string_view pattern, std::string_view name) {
    if (pattern.empty() || name.empty()) return false;
    if (pattern.front() == '.') {
        auto base = pattern.substr(1);
        if (name == base) return true;
        return name.size() > pattern.size() && name.substr(name.size() - pattern.size()) == pattern;
    }
    return name == pattern;
}

// Host pattern as used by org maps and firewall rules: a CIDR or a domain pattern.
struct HostPattern {
    std::variant<std::string, Cidr> value;

    static std::optional<HostPattern> parse(std::string_view text) {
        if (text.empty()) return std::nullopt;
        if (text.find('/') != std::string_view::npos) {
            auto c = Cidr::parse(text);
            if (!c) return std::nullopt;
            return HostPattern{*c};
        }
        if (auto a = Ipv4Address::parse(text)) return HostPattern{Cidr{*a, 32}};
        return HostPattern{dns::lowercase(text)};
    }

    bool matches(std::string_view domain, Ipv4Address addr) const {
        if (const auto* c = std::get_if<Cidr>(&value)) return c->contains(addr);
        return domain_matches(std::get<std::string>(value), domain);
    }

    std::string to_string() const {
        if (const auto* c = std::get_if<Cidr>(&value)) return c->to_string();
        return std::get<std::string>(value);
    }
};

class OrgMap {
public:
    struct Rule {
        HostPattern pattern;
        std::string organization;
    };

    OrgMap() = default;
    explicit OrgMap(std::vector<Rule> rules) : rules_(std::move(rules)) {}

    // CSV "pattern,organization". Blank lines, '#' comments and a header row are skipped.
    static OrgMap parse(std::istream& in, std::string_view origin = "org map") {
        std::vector<Rule> rules;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            auto first = line.find_first_not_of(" \t");
            if (first == std::string::npos || line[first] == '#') continue;
            auto comma = line.find(',');
            auto fail = [&](const std::string& why) {
                return Error(ErrorCode::ParseError, std::string(origin) + ":" + std::to_string(lineno) + ": " + why);
            };
            if (comma == std::string::npos) throw fail("expected pattern,organization");
            auto pattern = trim(std::string_view(line).substr(0, comma));
            auto org = trim(std::string_view(line).substr(comma + 1));
            if (lineno == 1 && pattern == "pattern") continue;
            if (org.empty()) throw fail("empty organization");
            auto p = HostPattern::parse(pattern);
            if (!p) throw fail("bad pattern '" + std::string(pattern) + "'");
            rules.push_back({std::move(*p), std::string(org)});
        }
        return OrgMap(std::move(rules));
    }

    static OrgMap load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::MissingFile, path);
        return parse(in, path);
    }

    // First matching rule wins; domain rules need a known domain.
    std::string lookup(std::string_view domain, Ipv4Address addr) const {
        for (const auto& r : rules_) {
            if (r.pattern.matches(domain, addr)) return r.organization;
        }
        return std::string(kUnknownOrg);
    }

    std::size_t size() const { return rules_.size(); }
    const std::vector<Rule>& rules() const { return rules_; }

private:
    static std::string_view trim(std::string_view s) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
        return s;
    }

    std::vector<Rule> rules_;
};

// Address -> name knowledge gathered passively from DNS answers seen on the wire.
class DnsCache {
public:
    // Learns from a DNS response payload. Returns the number of addresses recorded.
    std::size_t learn(ByteView payload) {
        auto msg = dns::parse(payload);
        if (!msg || !msg->is_response() || msg->questions.empty()) return 0;
        const std::string& name = msg->questions.front().name;
        std::size_t n = 0;
        for (auto addr : msg->a_records()) {
            names_[addr] = name;
            ++n;
        }
        return n;
    }

    void remember(Ipv4Address addr, std::string name) { names_[addr] = std::move(name); }

    std::string_view lookup(Ipv4Address addr) const {
        auto it = names_.find(addr);
        return it == names_.end() ? std::string_view{} : std::string_view(it->second);
    }

    std::size_t size() const { return names_.size(); }

private:
    std::map<Ipv4Address, std::string> names_;
};

}  // namespace mbz
