#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>

#include "mbz/core/clock.hpp"
#include "mbz/core/error.hpp"
#include "mbz/packet/packet.hpp"

namespace mbz {

using namespace std::chrono_literals;

struct EngineConfig {
    std::size_t mtu = kDefaultMtu;
    std::size_t socket_budget = 512;
    Duration udp_timeout = 30s;
    Duration dns_timeout = 10s;
    Duration sweep_interval = 1s;
    // Upstream connects still pending after this long are refused toward the app.
    Duration connect_timeout = 10s;
    // Half-closed TCP flows idle this long are reset and dropped.
    Duration close_linger = 30s;
    // Set: every flow uses this local ISN (tests). Unset: drawn per flow from isn_seed.
    std::optional<std::uint32_t> fixed_isn;
    std::uint64_t isn_seed = 0;
    std::size_t buffer_capacity = 64 * 1024;
    double pressure_ratio = 0.9;
    std::uint16_t default_mss = 536;

    void validate() const {
        auto bad = [](const std::string& why) { return Error(ErrorCode::InvalidConfig, "engine: " + why); };
        if (mtu < 68 || mtu > 65535) throw bad("mtu must be within [68, 65535]");
        if (socket_budget == 0) throw bad("socket_budget must be positive");
        if (udp_timeout.count() <= 0 || dns_timeout.count() <= 0 || sweep_interval.count() <= 0 ||
            connect_timeout.count() <= 0 || close_linger.count() <= 0) {
            throw bad("timeouts must be positive");
        }
        if (dns_timeout > udp_timeout) throw bad("dns_timeout must not exceed udp_timeout");
        if (buffer_capacity == 0) throw bad("buffer_capacity must be positive");
        if (!(pressure_ratio > 0.0 && pressure_ratio <= 1.0)) throw bad("pressure_ratio must be in (0, 1]");
        if (default_mss == 0) throw bad("default_mss must be positive");
    }
};

}  // namespace mbz
