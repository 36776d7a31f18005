#pragma once

#include <fnmatch.h>

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbz/core/error.hpp"
#include "mbz/plugin/types.hpp"
#include "mbz/plugins/org_map.hpp"
#include "mbz/proto/tls.hpp"

namespace mbz {

enum class DenyMode : std::uint8_t { Silent, Reset, InjectNotice };

struct AllowAction {};
struct DenyAction {
    DenyMode mode = DenyMode::Reset;
};
struct SwitchAction {
    Endpoint target;
};
struct RewriteAction {
    Bytes pattern;
    Bytes replacement;
};
using FirewallAction = std::variant<AllowAction, DenyAction, SwitchAction, RewriteAction>;

struct FirewallMatch {
    std::string app = "*";                     // glob over the app label
    std::vector<HostPattern> dst;              // empty: any destination
    std::vector<HostPattern> dst_except;
    std::vector<std::string> orgs;             // organizations (needs an org map)
    std::set<std::uint16_t> ports;             // empty: any port
    std::set<std::uint16_t> ports_except;
    std::optional<Transport> protocol;
};

struct FirewallRule {
    std::string name;
    FirewallMatch match;
    FirewallAction action;
};

struct FirewallPolicy {
    std::vector<FirewallRule> rules;
    FirewallAction default_action = AllowAction{};
};

inline Bytes default_block_notice(std::string_view rule) {
    std::string body = "Blocked by your firewall (rule: " + std::string(rule) + ").\n";
    std::string msg = "HTTP/1.1 403 Forbidden\r\nContent-Type: text/plain\r\nConnection: close\r\nContent-Length: " +
                      std::to_string(body.size()) + "\r\n\r\n" + body;
    return to_bytes(msg);
}

// Rules file grammar (JSON):
//   {"default": "allow" | "deny",
//    "rules": [{"name": "...",
//               "match": {"app": "mail*", "dst": [".example.com", "10.0.0.0/8"], "dst_except": [...],
//                         "orgs": ["Acme"], "ports": [80], "ports_except": [443], "protocol": "tcp"|"udp"},
//               "action": {"type": "allow"}
//                       | {"type": "deny", "mode": "silent"|"reset"|"inject_notice"}
//                       | {"type": "switch", "target": "a.b.c.d:port"}
//                       | {"type": "rewrite", "pattern": "...", "replacement": "..."}}]}
inline FirewallPolicy parse_firewall_policy(const nlohmann::json& doc, std::string_view origin = "rules") {
    auto fail = [&](const std::string& where, const std::string& why) {
        return Error(ErrorCode::ParseError, std::string(origin) + ": " + where + ": " + why);
    };
    auto check_keys = [&](const nlohmann::json& obj, std::initializer_list<std::string_view> allowed,
                          const std::string& where) {
        if (!obj.is_object()) throw fail(where, "expected an object");
        for (const auto& [k, _] : obj.items()) {
            if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) throw fail(where, "unknown key '" + k + "'");
        }
    };
    auto hosts = [&](const nlohmann::json& arr, const std::string& where) {
        std::vector<HostPattern> out;
        if (arr.is_string() && arr.get<std::string>() == "any") return out;
        if (!arr.is_array()) throw fail(where, "expected a list of hosts or \"any\"");
        for (const auto& h : arr) {
            auto p = h.is_string() ? HostPattern::parse(h.get<std::string>()) : std::nullopt;
            if (!p) throw fail(where, "bad host pattern " + h.dump());
            out.push_back(std::move(*p));
        }
        return out;
    };
    auto ports = [&](const nlohmann::json& arr, const std::string& where) {
        std::set<std::uint16_t> out;
        if (arr.is_string() && arr.get<std::string>() == "any") return out;
        if (!arr.is_array()) throw fail(where, "expected a list of ports or \"any\"");
        for (const auto& p : arr) {
            if (!p.is_number_integer() || p.get<int>() < 0 || p.get<int>() > 65535) throw fail(where, "bad port " + p.dump());
            out.insert(static_cast<std::uint16_t>(p.get<int>()));
        }
        return out;
    };
    auto action_of = [&](const nlohmann::json& a, const std::string& where) -> FirewallAction {
        if (a.is_string()) {
            auto s = a.get<std::string>();
            if (s == "allow") return AllowAction{};
            if (s == "deny") return DenyAction{};
            throw fail(where, "unknown action '" + s + "'");
        }
        check_keys(a, {"type", "mode", "target", "pattern", "replacement"}, where);
        auto type = a.value("type", std::string{});
        if (type == "allow") return AllowAction{};
        if (type == "deny") {
            auto mode = a.value("mode", std::string("reset"));
            if (mode == "silent") return DenyAction{DenyMode::Silent};
            if (mode == "reset") return DenyAction{DenyMode::Reset};
            if (mode == "inject_notice") return DenyAction{DenyMode::InjectNotice};
            throw fail(where + ".mode", "unknown deny mode '" + mode + "'");
        }
        if (type == "switch") {
            auto t = Endpoint::parse(a.value("target", std::string{}));
            if (!t) throw fail(where + ".target", "expected a.b.c.d:port");
            return SwitchAction{*t};
        }
        if (type == "rewrite") {
            auto pattern = to_bytes(a.value("pattern", std::string{}));
            auto replacement = to_bytes(a.value("replacement", std::string{}));
            if (pattern.empty()) throw fail(where + ".pattern", "must not be empty");
            if (pattern.size() != replacement.size()) throw fail(where, "rewrite must preserve length");
            return RewriteAction{std::move(pattern), std::move(replacement)};
        }
        throw fail(where + ".type", "unknown action type '" + type + "'");
    };

    check_keys(doc, {"default", "rules"}, "top level");
    FirewallPolicy policy;
    if (doc.contains("default")) policy.default_action = action_of(doc["default"], "default");
    if (!doc.contains("rules")) return policy;
    if (!doc["rules"].is_array()) throw fail("rules", "expected a list");
    std::size_t i = 0;
    for (const auto& r : doc["rules"]) {
        std::string where = "rules[" + std::to_string(i++) + "]";
        check_keys(r, {"name", "match", "action"}, where);
        FirewallRule rule;
        rule.name = r.value("name", where);
        if (r.contains("match")) {
            const auto& m = r["match"];
            check_keys(m, {"app", "dst", "dst_except", "orgs", "ports", "ports_except", "protocol"}, where + ".match");
            rule.match.app = m.value("app", std::string("*"));
            if (m.contains("dst")) rule.match.dst = hosts(m["dst"], where + ".match.dst");
            if (m.contains("dst_except")) rule.match.dst_except = hosts(m["dst_except"], where + ".match.dst_except");
            if (m.contains("orgs")) rule.match.orgs = m["orgs"].get<std::vector<std::string>>();
            if (m.contains("ports")) rule.match.ports = ports(m["ports"], where + ".match.ports");
            if (m.contains("ports_except")) rule.match.ports_except = ports(m["ports_except"], where + ".match.ports_except");
            if (m.contains("protocol")) {
                auto p = m["protocol"].get<std::string>();
                if (p == "tcp") {
                    rule.match.protocol = Transport::Tcp;
                } else if (p == "udp") {
                    rule.match.protocol = Transport::Udp;
                } else if (p != "any") {
                    throw fail(where + ".match.protocol", "expected tcp, udp or any");
                }
            }
        }
        if (!r.contains("action")) throw fail(where, "missing action");
        rule.action = action_of(r["action"], where + ".action");
        policy.rules.push_back(std::move(rule));
    }
    return policy;
}

inline FirewallPolicy load_firewall_policy(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingFile, path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::ParseError, path + ": " + e.what());
    }
    return parse_firewall_policy(doc, path);
}

// Occurrences replaced left to right, non-overlapping.
inline std::optional<Bytes> rewrite_payload(ByteView payload, const RewriteAction& rw) {
    if (payload.size() < rw.pattern.size()) return std::nullopt;
    Bytes out(payload.begin(), payload.end());
    bool changed = false;
    auto it = out.begin();
    while (true) {
        it = std::search(it, out.end(), rw.pattern.begin(), rw.pattern.end());
        if (it == out.end()) break;
        std::copy(rw.replacement.begin(), rw.replacement.end(), it);
        it += static_cast<std::ptrdiff_t>(rw.pattern.size());
        changed = true;
    }
    if (!changed) return std::nullopt;
    return out;
}

class Firewall final : public Plugin {
public:
    static constexpr std::string_view kId = "firewall";

    Firewall(FirewallPolicy policy, OrgMap orgs = {}) : policy_(std::move(policy)), orgs_(std::move(orgs)) {}

    // Exactly the powers the rule set can exercise.
    static PermissionSet permissions_for(const FirewallPolicy& policy) {
        PermissionSet set{Permission::Observe};
        auto add = [&](const FirewallAction& a) {
            if (const auto* d = std::get_if<DenyAction>(&a)) {
                set.add(Permission::BlockFlow);
                if (d->mode == DenyMode::InjectNotice) set.add(Permission::InjectPackets);
            } else if (std::holds_alternative<SwitchAction>(a)) {
                set.add(Permission::RedirectFlow);
            } else if (std::holds_alternative<RewriteAction>(a)) {
                set.add(Permission::ModifyPayload);
            }
        };
        for (const auto& r : policy.rules) add(r.action);
        add(policy.default_action);
        return set;
    }

    static PluginDescriptor descriptor(const FirewallPolicy& policy) {
        PluginDescriptor d;
        d.id = std::string(kId);
        d.name = "Firewall";
        d.requested = permissions_for(policy);
        return d;
    }

    // The first matching rule, or nullptr when the default applies.
    const FirewallRule* match(const PluginContext& ctx) const {
        std::string_view domain = cache_.lookup(ctx.key.dst.addr);
        for (const auto& r : policy_.rules) {
            if (matches(r.match, ctx, domain)) return &r;
        }
        return nullptr;
    }

    Verdict on_event(const PluginContext& ctx, ByteView payload, HostServices&) override {
        if (ctx.key.protocol == Transport::Udp && ctx.key.dst.port == dns::kPort && ctx.kind == EventKind::PacketIn) {
            cache_.learn(payload);
        }
        if (ctx.kind == EventKind::FlowClose) return pass();
        if (ctx.key.protocol == Transport::Tcp && ctx.kind == EventKind::PacketOut && tls::looks_like_handshake(payload)) {
            tls_flows_.insert(ctx.key);
        }

        const FirewallRule* rule = match(ctx);
        const FirewallAction& action = rule ? rule->action : policy_.default_action;
        std::string_view rule_name = rule ? std::string_view(rule->name) : std::string_view("default");

        Verdict v = pass();
        if (const auto* d = std::get_if<DenyAction>(&action)) {
            v = deny_verdict(*d, ctx, rule_name);
        } else if (const auto* s = std::get_if<SwitchAction>(&action)) {
            if (ctx.kind == EventKind::FlowOpen) v = redirect(s->target);
        } else if (const auto* rw = std::get_if<RewriteAction>(&action)) {
            if (app_originated(ctx.kind)) {
                if (auto out = rewrite_payload(payload, *rw)) {
                    ++rewrites_;
                    v = modify(std::move(*out));
                }
            }
        }
        if (!std::holds_alternative<PassVerdict>(v)) ++hits_[std::string(rule_name)];
        return v;
    }

    nlohmann::json report() const override {
        auto rules = nlohmann::json::object();
        for (const auto& [name, n] : hits_) rules[name] = n;
        return {{"rule_hits", std::move(rules)}, {"rewrites", rewrites_}};
    }

    const FirewallPolicy& policy() const { return policy_; }

private:
    bool matches(const FirewallMatch& m, const PluginContext& ctx, std::string_view domain) const {
        std::string app(ctx.app_label);
        if (fnmatch(m.app.c_str(), app.c_str(), 0) != 0) return false;
        if (m.protocol && *m.protocol != ctx.key.protocol) return false;
        auto port = ctx.key.dst.port;
        if (!m.ports.empty() && !m.ports.contains(port)) return false;
        if (m.ports_except.contains(port)) return false;
        auto addr = ctx.key.dst.addr;
        auto hit = [&](const std::vector<HostPattern>& list) {
            return std::any_of(list.begin(), list.end(), [&](const auto& p) { return p.matches(domain, addr); });
        };
        if (!m.dst.empty() && !hit(m.dst)) return false;
        if (hit(m.dst_except)) return false;
        if (!m.orgs.empty()) {
            auto org = orgs_.lookup(domain, addr);
            if (std::find(m.orgs.begin(), m.orgs.end(), org) == m.orgs.end()) return false;
        }
        return true;
    }

    Verdict deny_verdict(const DenyAction& d, const PluginContext& ctx, std::string_view rule_name) const {
        // Inbound traffic on a denied flow is simply dropped; the reset happens app-side.
        if (!app_originated(ctx.kind)) return block(BlockMode::DropSilent);
        switch (d.mode) {
            case DenyMode::Silent: return block(BlockMode::DropSilent);
            case DenyMode::Reset:
                return block(ctx.key.protocol == Transport::Tcp ? BlockMode::ResetApp : BlockMode::DropSilent);
            case DenyMode::InjectNotice: {
                if (ctx.key.protocol != Transport::Tcp) return block(BlockMode::DropSilent);
                bool encrypted = ctx.key.dst.port == 443 || tls_flows_.contains(ctx.key);
                if (encrypted) return block(BlockMode::ResetApp);
                return block(BlockMode::InjectResponse, default_block_notice(rule_name));
            }
        }
        return pass();
    }

    FirewallPolicy policy_;
    OrgMap orgs_;
    DnsCache cache_;
    std::set<FlowKey> tls_flows_;
    std::map<std::string, std::uint64_t> hits_;
    std::uint64_t rewrites_ = 0;
};

}  // namespace mbz
