#pragma once

#include <chrono>
#include <vector>

#include "mbz/engine/engine.hpp"
#include "mbz/io/sim_upstream.hpp"

namespace mbz::testing {

using namespace std::chrono_literals;

inline EngineConfig test_config() {
    EngineConfig c;
    c.fixed_isn = 5000;
    return c;
}

inline Endpoint ep(const char* s) { return Endpoint::parse(s).value(); }
inline Cidr cidr(const char* s) { return Cidr::parse(s).value(); }

inline SimEndpointScript script(const char* net, std::optional<std::uint16_t> port, EndpointBehavior behavior,
                                Duration connect_delay = 500us) {
    SimEndpointScript s;
    s.match = cidr(net);
    s.port = port;
    s.behavior = std::move(behavior);
    s.connect_delay = connect_delay;
    return s;
}

// Engine wired to a simulated upstream and an in-memory app side, all on a virtual clock.
struct Rig {
    VirtualClock clock;
    SimUpstream upstream;
    MemoryConduit app{clock};
    PluginHost host{clock};
    Engine engine;

    explicit Rig(std::vector<SimEndpointScript> scripts, EngineConfig cfg = test_config(), std::uint64_t seed = 1)
        : upstream(std::move(scripts), seed, clock), engine(cfg, upstream, app, clock, &host) {}

    void send(const Packet& p, std::string_view label = "app") {
        auto bytes = serialize_packet(p);
        engine.on_app_packet(bytes.value(), label);
    }

    // Delivers upstream events due within `horizon` of now, advancing virtual time.
    void settle(Duration horizon = 5s) {
        Timestamp limit = clock.now() + horizon;
        while (auto t = upstream.next_event_time()) {
            if (*t > limit) break;
            clock.sleep_until(*t);
            while (auto ev = upstream.poll_event(clock.now())) engine.on_upstream_event(*ev);
        }
    }

    std::vector<Packet> take() {
        std::vector<Packet> out;
        for (auto& b : app.take_written()) out.push_back(parse_packet(b).value());
        return out;
    }
};

}  // namespace mbz::testing
