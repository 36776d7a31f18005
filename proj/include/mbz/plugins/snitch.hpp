#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>

#include "mbz/plugin/types.hpp"
#include "mbz/plugins/org_map.hpp"
#include "mbz/proto/tls.hpp"

namespace mbz {

enum class FlowProtocol : std::uint8_t { Tcp, Udp, Quic };

inline const char* to_string(FlowProtocol p) {
    switch (p) {
        case FlowProtocol::Tcp: return "tcp";
        case FlowProtocol::Udp: return "udp";
        case FlowProtocol::Quic: return "quic";
    }
    return "?";
}

struct SnitchRecord {
    std::string app_label;
    FlowKey key;
    std::string dst_domain;
    FlowProtocol protocol = FlowProtocol::Tcp;
    std::uint64_t flows = 0;
    std::uint64_t request_count = 0;
    Timestamp first_seen{0};
    Timestamp last_seen{0};
};

struct SnitchSettings {
    OrgMap orgs;
    // Organizations that count as first party and stay out of the third-party tally.
    std::set<std::string> first_party;
    Duration udp_burst_gap = std::chrono::seconds(1);
};

// Passive accounting of who each app talks to. Never alters traffic.
class Snitch final : public Plugin {
public:
    static constexpr std::string_view kId = "snitch";

    explicit Snitch(SnitchSettings settings) : settings_(std::move(settings)) {}

    static PluginDescriptor descriptor() {
        PluginDescriptor d;
        d.id = std::string(kId);
        d.name = "Snitch";
        d.requested = {Permission::Observe};
        return d;
    }

    Verdict on_event(const PluginContext& ctx, ByteView payload, HostServices&) override {
        const auto& key = ctx.key;
        if (key.protocol == Transport::Udp && key.dst.port == dns::kPort && ctx.kind == EventKind::PacketIn) {
            cache_.learn(payload);
        }
        if (ctx.kind == EventKind::FlowClose) return pass();

        if (key.protocol == Transport::Tcp) {
            if (ctx.kind == EventKind::FlowOpen) {
                auto& r = record_for(ctx);
                ++r.flows;
                ++r.request_count;
                r.last_seen = ctx.clock;
                if (r.dst_domain.empty()) r.dst_domain = std::string(cache_.lookup(key.dst.addr));
                return pass();
            }
            auto it = records_.find(key);
            if (it == records_.end()) return pass();
            auto& r = it->second;
            r.last_seen = ctx.clock;
            if (r.dst_domain.empty() && ctx.kind == EventKind::PacketOut && tls::looks_like_handshake(payload)) {
                if (auto sni = tls::extract_sni(payload)) r.dst_domain = dns::lowercase(*sni);
            }
            return pass();
        }

        if (!app_originated(ctx.kind)) {
            if (auto it = records_.find(key); it != records_.end()) it->second.last_seen = ctx.clock;
            return pass();
        }
        bool fresh = records_.find(key) == records_.end();
        auto& r = record_for(ctx);
        if (fresh) {
            r.protocol = key.dst.port == 443 && quic::is_long_header(payload) ? FlowProtocol::Quic : FlowProtocol::Udp;
            r.dst_domain = std::string(cache_.lookup(key.dst.addr));
        }
        if (ctx.kind == EventKind::FlowOpen) ++r.flows;
        if (fresh || ctx.clock - r.last_seen > settings_.udp_burst_gap) ++r.request_count;
        r.last_seen = ctx.clock;
        return pass();
    }

    std::string organization_of(const SnitchRecord& r) const { return settings_.orgs.lookup(r.dst_domain, r.key.dst.addr); }

    bool third_party(const std::string& org) const {
        return org != kUnknownOrg && !settings_.first_party.contains(org);
    }

    const std::map<FlowKey, SnitchRecord>& records() const { return records_; }
    const DnsCache& dns_cache() const { return cache_; }

    nlohmann::json report() const override {
        struct OrgTally {
            std::uint64_t requests = 0, flows = 0, tcp = 0, udp = 0, quic = 0;
        };
        std::map<std::string, OrgTally> orgs;
        std::map<std::string, std::map<std::string, std::uint64_t>> per_app;
        std::uint64_t flows = 0, requests = 0;
        std::map<FlowProtocol, std::uint64_t> protocols{{FlowProtocol::Tcp, 0}, {FlowProtocol::Udp, 0}, {FlowProtocol::Quic, 0}};
        std::map<FlowProtocol, std::uint64_t> tp_protocols = protocols;
        std::uint64_t tp_flows = 0, tp_requests = 0, un_flows = 0, un_requests = 0;

        for (const auto& [_, r] : records_) {
            flows += r.flows;
            requests += r.request_count;
            protocols[r.protocol] += r.flows;
            auto org = organization_of(r);
            if (!third_party(org)) {
                un_flows += r.flows;
                un_requests += r.request_count;
                continue;
            }
            tp_flows += r.flows;
            tp_requests += r.request_count;
            tp_protocols[r.protocol] += r.flows;
            auto& t = orgs[org];
            t.requests += r.request_count;
            t.flows += r.flows;
            (r.protocol == FlowProtocol::Tcp ? t.tcp : r.protocol == FlowProtocol::Udp ? t.udp : t.quic) += r.flows;
            per_app[r.app_label][org] += r.request_count;
        }

        std::vector<std::pair<std::string, OrgTally>> ranked(orgs.begin(), orgs.end());
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) { return a.second.requests > b.second.requests; });

        auto org_rows = nlohmann::json::array();
        std::size_t over_ten = 0;
        std::map<std::uint64_t, std::uint64_t> flows_per_org;
        for (const auto& [name, t] : ranked) {
            if (t.requests > 10) ++over_ten;
            ++flows_per_org[t.flows];
            org_rows.push_back({{"organization", name}, {"requests", t.requests}, {"flows", t.flows},
                                {"tcp", t.tcp}, {"udp", t.udp}, {"quic", t.quic}});
        }
        auto dist = nlohmann::json::array();
        for (const auto& [k, m] : flows_per_org) dist.push_back({{"flows", k}, {"organizations", m}});

        auto apps = nlohmann::json::object();
        for (const auto& [app, counts] : per_app) {
            std::vector<std::pair<std::string, std::uint64_t>> rows(counts.begin(), counts.end());
            std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
            auto arr = nlohmann::json::array();
            for (const auto& [org, n] : rows) arr.push_back({{"organization", org}, {"requests", n}});
            apps[app.empty() ? "(unlabeled)" : app] = std::move(arr);
        }

        std::uint64_t tp_udp = tp_protocols[FlowProtocol::Udp] + tp_protocols[FlowProtocol::Quic];
        auto percent = [&](std::uint64_t n) {
            return tp_flows == 0 ? 0.0 : std::round(1000.0 * static_cast<double>(n) / static_cast<double>(tp_flows)) / 10.0;
        };
        return {
            {"flows", flows},
            {"requests", requests},
            {"protocols", {{"tcp", protocols[FlowProtocol::Tcp]}, {"udp", protocols[FlowProtocol::Udp]},
                           {"quic", protocols[FlowProtocol::Quic]}}},
            {"third_party",
             {{"flows", tp_flows},
              {"requests", tp_requests},
              {"tcp_flows", tp_protocols[FlowProtocol::Tcp]},
              {"udp_flows", tp_udp},
              {"quic_flows", tp_protocols[FlowProtocol::Quic]},
              {"tcp_percent", percent(tp_protocols[FlowProtocol::Tcp])},
              {"udp_percent", percent(tp_udp)},
              {"organizations", ranked.size()},
              {"organizations_over_10_requests", over_ten}}},
            {"unattributed", {{"flows", un_flows}, {"requests", un_requests}}},
            {"organizations", std::move(org_rows)},
            {"flows_per_org", std::move(dist)},
            {"per_app", std::move(apps)},
        };
    }

private:
    SnitchRecord& record_for(const PluginContext& ctx) {
        auto [it, inserted] = records_.try_emplace(ctx.key);
        if (inserted) {
            it->second.key = ctx.key;
            it->second.app_label = std::string(ctx.app_label);
            it->second.first_seen = ctx.clock;
            it->second.last_seen = ctx.clock;
            it->second.protocol = ctx.key.protocol == Transport::Tcp ? FlowProtocol::Tcp : FlowProtocol::Udp;
        }
        return it->second;
    }

    SnitchSettings settings_;
    DnsCache cache_;
    std::map<FlowKey, SnitchRecord> records_;
};

}  // namespace mbz
