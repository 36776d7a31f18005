#pragma once

#include <memory>
#include <utility>

#include "mbz/app/run_config.hpp"
#include "mbz/plugins/dns_whatif.hpp"
#include "mbz/plugins/firewall.hpp"
#include "mbz/plugins/protocol_advisor.hpp"
#include "mbz/plugins/snitch.hpp"

namespace mbz {

struct BuiltPlugin {
    PluginDescriptor descriptor;
    std::unique_ptr<Plugin> plugin;
};

inline Endpoint resolver_endpoint(const std::string& text) {
    if (auto e = Endpoint::parse(text)) return *e;
    return Endpoint{Ipv4Address::parse(text).value(), dns::kPort};
}

// Instantiates a builtin from its manifest entry. Settings were validated at load time.
inline BuiltPlugin build_plugin(const PluginSpec& spec, std::uint64_t run_seed) {
    const auto& s = spec.settings;
    BuiltPlugin out;
    if (spec.type == "snitch") {
        SnitchSettings settings;
        settings.orgs = OrgMap::load(s.at("org_map").get<std::string>());
        if (s.contains("first_party")) {
            for (const auto& o : s["first_party"]) settings.first_party.insert(o.get<std::string>());
        }
        if (s.contains("udp_burst_gap_ms")) {
            settings.udp_burst_gap = Duration{static_cast<std::int64_t>(s["udp_burst_gap_ms"].get<double>() * 1000)};
        }
        out.descriptor = Snitch::descriptor();
        out.plugin = std::make_unique<Snitch>(std::move(settings));
    } else if (spec.type == "firewall") {
        auto policy = load_firewall_policy(s.at("rules").get<std::string>());
        OrgMap orgs;
        if (s.contains("org_map")) orgs = OrgMap::load(s["org_map"].get<std::string>());
        out.descriptor = Firewall::descriptor(policy);
        out.plugin = std::make_unique<Firewall>(std::move(policy), std::move(orgs));
    } else if (spec.type == "dns-whatif") {
        WhatIfSettings settings;
        for (const auto& a : s.at("alternates")) settings.alternates.push_back(resolver_endpoint(a.get<std::string>()));
        if (s.contains("sample_probability")) settings.sample_probability = s["sample_probability"].get<double>();
        settings.seed = s.contains("seed") ? s["seed"].get<std::uint64_t>() : run_seed;
        if (s.contains("timeout_ms")) {
            settings.timeout = Duration{static_cast<std::int64_t>(s["timeout_ms"].get<double>() * 1000)};
        }
        out.descriptor = DnsWhatIf::descriptor();
        out.plugin = std::make_unique<DnsWhatIf>(std::move(settings));
    } else if (spec.type == "protocol-advisor") {
        AdvisorThresholds t;
        if (s.contains("loss_rate_threshold")) t.loss_rate_threshold = s["loss_rate_threshold"].get<double>();
        if (s.contains("min_samples")) t.min_samples = s["min_samples"].get<std::size_t>();
        out.descriptor = ProtocolAdvisor::descriptor();
        out.plugin = std::make_unique<ProtocolAdvisor>(t);
    } else {
        throw Error(ErrorCode::InvalidConfig, "unknown plugin type " + spec.type);
    }
    out.descriptor.id = spec.id;
    if (spec.permissions) out.descriptor.requested = *spec.permissions;
    out.descriptor.budget = spec.budget;
    out.descriptor.wifi_only_export = spec.wifi_only_export;
    return out;
}

// Registers every enabled plugin in manifest order.
inline void install_plugins(PluginHost& host, const RunConfig& cfg, std::uint64_t seed) {
    for (const auto& spec : cfg.plugins) {
        if (!spec.enabled) continue;
        auto built = build_plugin(spec, seed);
        auto r = host.register_plugin(std::move(built.descriptor), std::move(built.plugin));
        if (!r) {
            if (r.error() == RegisterError::DuplicateId) throw Error(ErrorCode::DuplicatePluginId, spec.id);
            throw Error(ErrorCode::InvalidConfig, spec.id + ": permissions must include observe");
        }
    }
}

}  // namespace mbz
