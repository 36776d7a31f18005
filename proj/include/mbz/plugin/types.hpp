#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbz/core/bytes.hpp"
#include "mbz/core/clock.hpp"
#include "mbz/io/trace.hpp"
#include "mbz/packet/flow_key.hpp"

namespace mbz {

enum class Permission : std::uint8_t {
    Observe = 1 << 0,
    ModifyPayload = 1 << 1,
    BlockFlow = 1 << 2,
    RedirectFlow = 1 << 3,
    InjectPackets = 1 << 4,
    ExportOffDevice = 1 << 5,
};

inline constexpr std::pair<Permission, std::string_view> kPermissionNames[] = {
    {Permission::Observe, "observe"},
    {Permission::ModifyPayload, "modify_payload"},
    {Permission::BlockFlow, "block_flow"},
    {Permission::RedirectFlow, "redirect_flow"},
    {Permission::InjectPackets, "inject_packets"},
    {Permission::ExportOffDevice, "export_off_device"},
};

class PermissionSet {
public:
    constexpr PermissionSet() = default;
    constexpr PermissionSet(std::initializer_list<Permission> perms) {
        for (auto p : perms) bits_ |= static_cast<std::uint8_t>(p);
    }

    static std::optional<Permission> parse(std::string_view name) {
        for (const auto& [p, n] : kPermissionNames) {
            if (n == name) return p;
        }
        return std::nullopt;
    }

    constexpr bool has(Permission p) const { return bits_ & static_cast<std::uint8_t>(p); }
    constexpr bool contains(PermissionSet other) const { return (bits_ & other.bits_) == other.bits_; }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr void add(Permission p) { bits_ |= static_cast<std::uint8_t>(p); }

    // Every power over traffic presupposes seeing it.
    constexpr bool well_formed() const { return bits_ == 0 || has(Permission::Observe); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [p, n] : kPermissionNames) {
            if (has(p)) out.emplace_back(n);
        }
        return out;
    }

    constexpr bool operator==(const PermissionSet&) const = default;

private:
    std::uint8_t bits_ = 0;
};

struct ResourceBudget {
    Duration max_cpu_per_packet{500};
    std::size_t max_mem_bytes = 64u << 20;
    std::size_t max_emitted_bytes_per_min = 1u << 20;
    unsigned violation_grace = 3;  // consecutive overruns tolerated
};

struct PluginDescriptor {
    std::string id;
    std::string name;
    PermissionSet requested;
    ResourceBudget budget;
    bool wifi_only_export = false;
    // Sampling-class plugins (reactive measurement) receive a throttle hint on low battery.
    bool sampling = false;
};

enum class BlockMode : std::uint8_t { DropSilent, ResetApp, InjectResponse };

inline const char* to_string(BlockMode m) {
    switch (m) {
        case BlockMode::DropSilent: return "drop_silent";
        case BlockMode::ResetApp: return "reset_app";
        case BlockMode::InjectResponse: return "inject_response";
    }
    return "?";
}

struct PassVerdict {
    bool operator==(const PassVerdict&) const = default;
};
struct ModifyVerdict {
    Bytes payload;
    bool operator==(const ModifyVerdict&) const = default;
};
struct BlockVerdict {
    BlockMode mode = BlockMode::DropSilent;
    Bytes response;  // InjectResponse only
    bool operator==(const BlockVerdict&) const = default;
};
struct RedirectVerdict {
    Endpoint target;
    bool operator==(const RedirectVerdict&) const = default;
};

using Verdict = std::variant<PassVerdict, ModifyVerdict, BlockVerdict, RedirectVerdict>;

inline Verdict pass() { return PassVerdict{}; }
inline Verdict modify(Bytes payload) { return ModifyVerdict{std::move(payload)}; }
inline Verdict block(BlockMode mode, Bytes response = {}) { return BlockVerdict{mode, std::move(response)}; }
inline Verdict redirect(Endpoint target) { return RedirectVerdict{target}; }

inline std::string verdict_name(const Verdict& v) {
    switch (v.index()) {
        case 0: return "pass";
        case 1: return "modify";
        case 2: return std::string("block:") + to_string(std::get<BlockVerdict>(v).mode);
        case 3: return "redirect";
    }
    return "?";
}

enum class EventKind : std::uint8_t { FlowOpen, PacketOut, PacketIn, FlowClose };

inline const char* to_string(EventKind k) {
    switch (k) {
        case EventKind::FlowOpen: return "flow_open";
        case EventKind::PacketOut: return "packet_out";
        case EventKind::PacketIn: return "packet_in";
        case EventKind::FlowClose: return "flow_close";
    }
    return "?";
}

inline bool app_originated(EventKind k) { return k == EventKind::FlowOpen || k == EventKind::PacketOut; }

enum class Connectivity : std::uint8_t { WiFi, Cellular, None };

inline const char* to_string(Connectivity c) {
    switch (c) {
        case Connectivity::WiFi: return "wifi";
        case Connectivity::Cellular: return "cellular";
        case Connectivity::None: return "none";
    }
    return "?";
}

struct DeviceContext {
    Connectivity connectivity = Connectivity::WiFi;
    int battery_percent = 100;

    bool operator==(const DeviceContext&) const = default;
};

// Snapshot handed to one plugin invocation.
struct PluginContext {
    FlowKey key;
    std::string_view app_label;
    Direction direction = Direction::AppToNet;
    EventKind kind = EventKind::PacketOut;
    DeviceContext device;
    Timestamp clock{0};
    TcpFlags tcp_flags;
    std::uint32_t seq = 0;
    bool throttle = false;
};

using ProbeId = std::uint64_t;

struct ProbeResult {
    ProbeId id = 0;
    Endpoint target;
    std::optional<Bytes> response;  // nullopt on timeout
    Duration rtt{0};
};

// Host-mediated capabilities. Every call is checked against the caller's permissions.
class HostServices {
public:
    virtual ~HostServices() = default;
    virtual Timestamp now() const = 0;
    // Sends one datagram on the plugin's behalf; the reply (or timeout) comes back through
    // Plugin::on_probe_result. Requires InjectPackets.
    virtual std::optional<ProbeId> send_probe(const Endpoint& target, ByteView payload, Duration timeout) = 0;
    // Ships data off the device. Requires ExportOffDevice; suspended on cellular for wifi-only plugins.
    virtual bool export_data(std::string_view channel, ByteView data) = 0;
    virtual void report_memory(std::size_t bytes) = 0;
};

class Plugin {
public:
    virtual ~Plugin() = default;
    virtual Verdict on_event(const PluginContext& ctx, ByteView payload, HostServices& host) = 0;
    virtual void on_probe_result(const ProbeResult&, HostServices&) {}
    virtual void on_tick(Timestamp, HostServices&) {}
    virtual void on_disable(std::string_view /*reason*/) {}
    // Contribution to the run report; null when the plugin has nothing to say.
    virtual nlohmann::json report() const { return nullptr; }
};

}  // namespace mbz
