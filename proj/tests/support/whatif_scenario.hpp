#pragma once

#include "mbz/plugins/dns_whatif.hpp"
#include "support/rig.hpp"

// One DNS lookup through the engine with the what-if plugin probing a single alternate
// resolver that behaves in a chosen way.
namespace mbz::testing {

enum class AltBehavior { Match, Mismatch, NxRewrite, Timeout };

inline const char* to_string(AltBehavior b) {
    switch (b) {
        case AltBehavior::Match: return "match";
        case AltBehavior::Mismatch: return "mismatch";
        case AltBehavior::NxRewrite: return "nxdomain-rewrite";
        case AltBehavior::Timeout: return "timeout";
    }
    return "?";
}

inline Divergence expected_divergence(AltBehavior b) {
    switch (b) {
        case AltBehavior::Match: return Divergence::None;
        case AltBehavior::Mismatch: return Divergence::AnswerMismatch;
        case AltBehavior::NxRewrite: return Divergence::NxdomainRewrite;
        case AltBehavior::Timeout: return Divergence::Timeout;
    }
    return Divergence::None;
}

struct WhatIfOutcome {
    std::optional<Divergence> divergence;  // nullopt when no probe completed
    std::size_t probes = 0;
    Bytes app_visible;                      // every byte the engine wrote to the app, concatenated
    std::size_t app_packets = 0;
};

inline WhatIfOutcome run_whatif(AltBehavior behavior, bool probing, std::uint16_t query_id = 0x4242,
                                std::string name = "shop.example.test") {
    using namespace std::chrono_literals;
    const Ipv4Address real{93, 184, 216, 34};
    DnsResponderBehavior resolver;
    resolver.delay = 2ms;
    DnsResponderBehavior alternate = resolver;
    alternate.delay = 3ms;
    if (behavior == AltBehavior::NxRewrite) {
        alternate.tamper.nxdomain_redirect = Ipv4Address{198, 51, 100, 99};
    } else {
        resolver.answers[name] = {real};
        alternate.answers[name] = {behavior == AltBehavior::Mismatch ? Ipv4Address{198, 51, 100, 7} : real};
    }
    std::vector<SimEndpointScript> scripts{script("192.168.1.1/32", 53, resolver)};
    if (behavior == AltBehavior::Timeout) {
        scripts.push_back(script("8.8.8.8/32", 53, BlackholeBehavior{}));
    } else {
        scripts.push_back(script("8.8.8.8/32", 53, alternate));
    }
    Rig rig(std::move(scripts));
    DnsWhatIf* plugin = nullptr;
    if (probing) {
        WhatIfSettings s;
        s.alternates = {ep("8.8.8.8:53")};
        s.sample_probability = 1.0;
        s.seed = 3;
        auto p = std::make_unique<DnsWhatIf>(s);
        plugin = p.get();
        (void)rig.host.register_plugin(DnsWhatIf::descriptor(), std::move(p));
    }
    rig.send(make_udp_packet(ep("10.0.0.2:5353"), ep("192.168.1.1:53"), dns::build_query(query_id, name)));
    rig.settle(1s);
    rig.clock.advance(3s);
    rig.engine.sweep(rig.clock.now());
    rig.settle(1s);

    WhatIfOutcome out;
    for (auto& b : rig.app.take_written()) {
        out.app_visible.insert(out.app_visible.end(), b.begin(), b.end());
        ++out.app_packets;
    }
    if (plugin) {
        out.probes = plugin->probes().size();
        if (plugin->completed() == 1) out.divergence = plugin->probes().front().divergence;
    }
    return out;
}

}  // namespace mbz::testing
