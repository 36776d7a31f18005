#pragma once

#include <time.h>

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mbz/core/expected.hpp"
#include "mbz/plugin/types.hpp"

namespace mbz {

struct ViolationRecord {
    Timestamp ts{0};
    std::string plugin;
    std::string kind;  // PermissionDenied | InvalidVerdict | PluginFailure | ExportSuspended
    std::string detail;
};

enum class DisableReason : std::uint8_t { CpuOverrun, MemoryOverrun, EmittedBytesOverrun, CellularEmissionOverrun };

inline const char* to_string(DisableReason r) {
    switch (r) {
        case DisableReason::CpuOverrun: return "CpuOverrun";
        case DisableReason::MemoryOverrun: return "MemoryOverrun";
        case DisableReason::EmittedBytesOverrun: return "EmittedBytesOverrun";
        case DisableReason::CellularEmissionOverrun: return "CellularEmissionOverrun";
    }
    return "?";
}

struct DisableDecision {
    Timestamp ts{0};
    std::string plugin;
    DisableReason reason = DisableReason::CpuOverrun;
};

struct GovernorRecord {
    Timestamp ts{0};
    std::string plugin;
    std::string kind;  // Disabled | Enabled
    std::string detail;
};

struct UsageSample {
    std::optional<Duration> cpu;
    std::optional<std::size_t> mem_bytes;
    std::size_t emitted_bytes = 0;
};

struct EffectiveAction {
    Verdict verdict = PassVerdict{};
    std::string acting_plugin;  // empty for Pass
};

struct ChainResult {
    EffectiveAction action;
    std::vector<ViolationRecord> violations;
};

struct HostPolicy {
    // Battery level at or below which sampling-class plugins see ctx.throttle.
    std::optional<int> low_battery_throttle;
};

enum class RegisterError : std::uint8_t { DuplicateId, MalformedPermissions };

inline const char* to_string(RegisterError e) {
    return e == RegisterError::DuplicateId ? "DuplicateId" : "MalformedPermissions";
}

using PluginHandle = std::size_t;

// Implemented by the engine: carries plugin probes over upstream datagram handles.
class ProbeTransport {
public:
    virtual ~ProbeTransport() = default;
    virtual std::optional<ProbeId> open_probe(PluginHandle plugin, const Endpoint& target, ByteView payload,
                                              Duration timeout) = 0;
};

// Thread CPU time; swapped out in tests for a scripted meter.
using CpuMeter = std::function<Duration()>;

inline Duration thread_cpu_time() {
    timespec ts{};
    clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
    return Duration{static_cast<std::int64_t>(ts.tv_sec) * 1'000'000 + ts.tv_nsec / 1000};
}

class PluginHost {
public:
    explicit PluginHost(const Clock& clock, HostPolicy policy = {}) : clock_(clock), policy_(policy) {}

    PluginHost(const PluginHost&) = delete;
    PluginHost& operator=(const PluginHost&) = delete;

    Expected<PluginHandle, RegisterError> register_plugin(PluginDescriptor desc, std::unique_ptr<Plugin> plugin) {
        if (!desc.requested.well_formed()) return unexpected(RegisterError::MalformedPermissions);
        for (const auto& e : entries_) {
            if (e->desc.id == desc.id) return unexpected(RegisterError::DuplicateId);
        }
        auto entry = std::make_unique<Entry>();
        entry->desc = std::move(desc);
        entry->plugin = std::move(plugin);
        entry->services = std::make_unique<Services>(*this, entries_.size());
        entries_.push_back(std::move(entry));
        return entries_.size() - 1;
    }

    // Runs the chain in registration order. Modify verdicts compose; the first Block or
    // Redirect wins and later plugins are not invoked. Verdicts beyond a plugin's grant
    // are downgraded to Pass and logged.
    ChainResult chain_apply(const PluginContext& base, ByteView payload) {
        ChainResult result;
        std::optional<Bytes> rewritten;
        std::string modifier;
        for (PluginHandle h = 0; h < entries_.size(); ++h) {
            auto& e = *entries_[h];
            if (!e.enabled) continue;
            PluginContext ctx = base;
            ctx.device = device_;
            ctx.throttle = throttled(e.desc);
            ByteView current = rewritten ? ByteView(*rewritten) : payload;

            ++e.invocations;
            Duration start = cpu_meter_();
            Verdict v;
            try {
                v = e.plugin->on_event(ctx, current, *e.services);
            } catch (const std::exception& ex) {
                record(result, h, "PluginFailure", ex.what());
                v = PassVerdict{};
            } catch (...) {
                record(result, h, "PluginFailure", "unknown exception");
                v = PassVerdict{};
            }
            Duration spent = cpu_meter_() - start;
            account(h, UsageSample{spent, e.reported_mem, 0});

            if (!std::holds_alternative<PassVerdict>(v)) {
                if (auto* b = std::get_if<BlockVerdict>(&v); b && b->mode == BlockMode::InjectResponse &&
                                                               !app_originated(ctx.kind)) {
                    record(result, h, "InvalidVerdict", describe(v, ctx));
                    v = PassVerdict{};
                } else if (!e.desc.requested.contains(required_permissions(v))) {
                    record(result, h, "PermissionDenied", describe(v, ctx));
                    v = PassVerdict{};
                }
            }

            if (auto* m = std::get_if<ModifyVerdict>(&v)) {
                rewritten = std::move(m->payload);
                modifier = e.desc.id;
            } else if (!std::holds_alternative<PassVerdict>(v)) {
                result.action = EffectiveAction{std::move(v), e.desc.id};
                return result;
            }
        }
        if (rewritten) result.action = EffectiveAction{ModifyVerdict{std::move(*rewritten)}, modifier};
        return result;
    }

    static PermissionSet required_permissions(const Verdict& v) {
        switch (v.index()) {
            case 1: return {Permission::Observe, Permission::ModifyPayload};
            case 2:
                if (std::get<BlockVerdict>(v).mode == BlockMode::InjectResponse) {
                    return {Permission::Observe, Permission::BlockFlow, Permission::InjectPackets};
                }
                return {Permission::Observe, Permission::BlockFlow};
            case 3: return {Permission::Observe, Permission::RedirectFlow};
            default: return {};
        }
    }

    // Feeds one usage sample to the governor; a plugin that stays over any budget dimension
    // for more than violation_grace consecutive samples is disabled.
    std::optional<DisableDecision> account(PluginHandle h, const UsageSample& s) {
        auto& e = *entries_.at(h);
        if (!e.enabled) return std::nullopt;
        const auto& budget = e.desc.budget;
        if (s.cpu) {
            e.cpu_streak = *s.cpu > budget.max_cpu_per_packet ? e.cpu_streak + 1 : 0;
            if (e.cpu_streak > budget.violation_grace) return disable(h, DisableReason::CpuOverrun);
        }
        if (s.mem_bytes) {
            e.mem_streak = *s.mem_bytes > budget.max_mem_bytes ? e.mem_streak + 1 : 0;
            if (e.mem_streak > budget.violation_grace) return disable(h, DisableReason::MemoryOverrun);
        }
        if (s.emitted_bytes > 0) {
            Timestamp now = clock_.now();
            e.emissions.push_back({now, s.emitted_bytes});
            expire_emissions(e, now);
            if (window_bytes(e) > budget.max_emitted_bytes_per_min) {
                if (e.desc.wifi_only_export && device_.connectivity == Connectivity::Cellular) {
                    return disable(h, DisableReason::CellularEmissionOverrun);
                }
                if (++e.emit_streak > budget.violation_grace) return disable(h, DisableReason::EmittedBytesOverrun);
            } else {
                e.emit_streak = 0;
            }
        }
        return std::nullopt;
    }

    // Periodic pass: ages the emission window and lets plugins run their timers.
    std::vector<DisableDecision> governor_tick(Timestamp now) {
        std::size_t before = decisions_.size();
        for (PluginHandle h = 0; h < entries_.size(); ++h) {
            auto& e = *entries_[h];
            if (!e.enabled) continue;
            expire_emissions(e, now);
            try {
                e.plugin->on_tick(now, *e.services);
            } catch (const std::exception& ex) {
                violations_.push_back({clock_.now(), e.desc.id, "PluginFailure", ex.what()});
            }
        }
        return {decisions_.begin() + static_cast<std::ptrdiff_t>(before), decisions_.end()};
    }

    void update_context(const DeviceContext& device) { device_ = device; }
    const DeviceContext& device() const { return device_; }
    void set_policy(HostPolicy policy) { policy_ = policy; }

    bool enable(std::string_view id) {
        for (auto& e : entries_) {
            if (e->desc.id == id && !e->enabled) {
                e->enabled = true;
                e->cpu_streak = e->mem_streak = e->emit_streak = 0;
                e->finalized = false;
                governor_log_.push_back({clock_.now(), e->desc.id, "Enabled", "user request"});
                return true;
            }
        }
        return false;
    }

    void set_probe_transport(ProbeTransport* t) { probes_ = t; }
    void set_cpu_meter(CpuMeter meter) { cpu_meter_ = std::move(meter); }

    void deliver_probe_result(PluginHandle h, const ProbeResult& r) {
        auto& e = *entries_.at(h);
        if (!e.enabled) return;
        try {
            e.plugin->on_probe_result(r, *e.services);
        } catch (const std::exception& ex) {
            violations_.push_back({clock_.now(), e.desc.id, "PluginFailure", ex.what()});
        }
    }

    std::size_t size() const { return entries_.size(); }
    const PluginDescriptor& descriptor(PluginHandle h) const { return entries_.at(h)->desc; }
    Plugin& plugin(PluginHandle h) { return *entries_.at(h)->plugin; }
    const Plugin& plugin(PluginHandle h) const { return *entries_.at(h)->plugin; }
    bool enabled(PluginHandle h) const { return entries_.at(h)->enabled; }
    std::uint64_t invocations(PluginHandle h) const { return entries_.at(h)->invocations; }
    std::uint64_t violation_count(PluginHandle h) const { return entries_.at(h)->violation_count; }

    std::optional<PluginHandle> find(std::string_view id) const {
        for (PluginHandle h = 0; h < entries_.size(); ++h) {
            if (entries_[h]->desc.id == id) return h;
        }
        return std::nullopt;
    }

    const std::vector<ViolationRecord>& violations() const { return violations_; }
    const std::vector<GovernorRecord>& governor_log() const { return governor_log_; }
    const std::vector<DisableDecision>& decisions() const { return decisions_; }

    struct ExportRecord {
        Timestamp ts{0};
        std::string plugin;
        std::string channel;
        std::size_t bytes = 0;
    };
    const std::vector<ExportRecord>& exports() const { return exports_; }

private:
    class Services final : public HostServices {
    public:
        Services(PluginHost& host, PluginHandle h) : host_(host), handle_(h) {}

        Timestamp now() const override { return host_.clock_.now(); }

        std::optional<ProbeId> send_probe(const Endpoint& target, ByteView payload, Duration timeout) override {
            auto& e = *host_.entries_[handle_];
            if (!e.enabled) return std::nullopt;
            if (!e.desc.requested.has(Permission::InjectPackets)) {
                host_.violate(handle_, "PermissionDenied", "probe to " + target.to_string() + " needs inject_packets");
                return std::nullopt;
            }
            if (!host_.probes_) return std::nullopt;
            auto id = host_.probes_->open_probe(handle_, target, payload, timeout);
            if (id) host_.account(handle_, UsageSample{std::nullopt, std::nullopt, payload.size()});
            return id;
        }

        bool export_data(std::string_view channel, ByteView data) override {
            auto& e = *host_.entries_[handle_];
            if (!e.enabled) return false;
            if (!e.desc.requested.has(Permission::ExportOffDevice)) {
                host_.violate(handle_, "PermissionDenied", "export on '" + std::string(channel) + "' needs export_off_device");
                return false;
            }
            auto link = host_.device_.connectivity;
            if (link == Connectivity::Cellular && e.desc.wifi_only_export) {
                host_.violate(handle_, "ExportSuspended", "export on '" + std::string(channel) + "' while on cellular");
                return false;
            }
            if (link == Connectivity::None) return false;
            host_.exports_.push_back({now(), e.desc.id, std::string(channel), data.size()});
            host_.account(handle_, UsageSample{std::nullopt, std::nullopt, data.size()});
            return true;
        }

        void report_memory(std::size_t bytes) override { host_.entries_[handle_]->reported_mem = bytes; }

    private:
        PluginHost& host_;
        PluginHandle handle_;
    };

    struct Entry {
        PluginDescriptor desc;
        std::unique_ptr<Plugin> plugin;
        std::unique_ptr<Services> services;
        bool enabled = true;
        bool finalized = false;
        std::uint64_t invocations = 0;
        std::uint64_t violation_count = 0;
        unsigned cpu_streak = 0;
        unsigned mem_streak = 0;
        unsigned emit_streak = 0;
        std::optional<std::size_t> reported_mem;
        std::deque<std::pair<Timestamp, std::size_t>> emissions;
    };

    bool throttled(const PluginDescriptor& d) const {
        return d.sampling && policy_.low_battery_throttle && device_.battery_percent <= *policy_.low_battery_throttle;
    }

    static std::string describe(const Verdict& v, const PluginContext& ctx) {
        return "verdict=" + verdict_name(v) + " event=" + to_string(ctx.kind) + " flow=" + ctx.key.to_string();
    }

    void violate(PluginHandle h, std::string kind, std::string detail) {
        auto& e = *entries_[h];
        ++e.violation_count;
        violations_.push_back({clock_.now(), e.desc.id, std::move(kind), std::move(detail)});
    }

    void record(ChainResult& result, PluginHandle h, std::string kind, std::string detail) {
        violate(h, std::move(kind), std::move(detail));
        result.violations.push_back(violations_.back());
    }

    DisableDecision disable(PluginHandle h, DisableReason reason) {
        auto& e = *entries_[h];
        e.enabled = false;
        DisableDecision d{clock_.now(), e.desc.id, reason};
        decisions_.push_back(d);
        governor_log_.push_back({d.ts, e.desc.id, "Disabled", to_string(reason)});
        if (!e.finalized) {
            e.finalized = true;
            e.plugin->on_disable(to_string(reason));
        }
        return d;
    }

    static void expire_emissions(Entry& e, Timestamp now) {
        while (!e.emissions.empty() && now - e.emissions.front().first >= std::chrono::minutes(1)) {
            e.emissions.pop_front();
        }
    }

    static std::size_t window_bytes(const Entry& e) {
        std::size_t total = 0;
        for (const auto& [_, n] : e.emissions) total += n;
        return total;
    }

    const Clock& clock_;
    HostPolicy policy_;
    DeviceContext device_;
    std::vector<std::unique_ptr<Entry>> entries_;
    std::vector<ViolationRecord> violations_;
    std::vector<GovernorRecord> governor_log_;
    std::vector<DisableDecision> decisions_;
    std::vector<ExportRecord> exports_;
    ProbeTransport* probes_ = nullptr;
    CpuMeter cpu_meter_ = thread_cpu_time;
};

}  // namespace mbz
