#pragma once

#include <functional>
#include <memory>
#include <string>

#include "mbz/plugin/host.hpp"

// Plugins that misbehave on purpose, for governance tests.
namespace mbz::testing {

// Returns whatever the callback decides, and counts its own invocations.
class ScriptedPlugin final : public Plugin {
public:
    using Fn = std::function<Verdict(const PluginContext&, ByteView, HostServices&)>;
    explicit ScriptedPlugin(Fn fn) : fn_(std::move(fn)) {}

    Verdict on_event(const PluginContext& ctx, ByteView payload, HostServices& host) override {
        ++calls;
        last_ctx = ctx;
        return fn_(ctx, payload, host);
    }
    void on_disable(std::string_view reason) override { disabled_reason = std::string(reason); }

    std::uint64_t calls = 0;
    PluginContext last_ctx;
    std::string disabled_reason;

private:
    Fn fn_;
};

inline PluginDescriptor descriptor(std::string id, PermissionSet perms) {
    PluginDescriptor d;
    d.id = std::move(id);
    d.name = d.id;
    d.requested = perms;
    return d;
}

// Registers a scripted plugin and hands back a raw pointer for inspection.
inline ScriptedPlugin* add(PluginHost& host, PluginDescriptor d, ScriptedPlugin::Fn fn) {
    auto p = std::make_unique<ScriptedPlugin>(std::move(fn));
    auto* raw = p.get();
    if (!host.register_plugin(std::move(d), std::move(p))) return nullptr;
    return raw;
}

// CPU meter that charges a fixed cost to every invocation of chosen plugins.
class FakeCpu {
public:
    Duration now() const { return t_; }
    void charge(Duration d) { t_ += d; }

private:
    Duration t_{0};
};

inline PluginContext event(EventKind kind = EventKind::PacketOut, Direction dir = Direction::AppToNet) {
    PluginContext ctx;
    ctx.key = FlowKey{Transport::Tcp, Endpoint::parse("10.0.0.2:40000").value(), Endpoint::parse("93.184.216.34:80").value()};
    ctx.kind = kind;
    ctx.direction = dir;
    ctx.app_label = "com.example";
    return ctx;
}

}  // namespace mbz::testing
