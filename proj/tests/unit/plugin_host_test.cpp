#include <gtest/gtest.h>

#include "support/fault_plugins.hpp"
#include "support/gen.hpp"

using namespace mbz;
using namespace mbz::testing;
using namespace std::chrono_literals;

namespace {

const PermissionSet kAll{Permission::Observe, Permission::ModifyPayload, Permission::BlockFlow,
                         Permission::RedirectFlow, Permission::InjectPackets, Permission::ExportOffDevice};

ScriptedPlugin::Fn returns(Verdict v) {
    return [v](const PluginContext&, ByteView, HostServices&) { return v; };
}

}  // namespace

TEST(PluginHost, DuplicateIdRejected) {
    VirtualClock clock;
    PluginHost host(clock);
    ASSERT_NE(add(host, descriptor("a", {Permission::Observe}), returns(pass())), nullptr);
    auto r = host.register_plugin(descriptor("a", {Permission::Observe}), std::make_unique<ScriptedPlugin>(returns(pass())));
    ASSERT_FALSE(r);
    EXPECT_EQ(r.error(), RegisterError::DuplicateId);
}

TEST(PluginHost, PermissionsMustIncludeObserve) {
    VirtualClock clock;
    PluginHost host(clock);
    auto r = host.register_plugin(descriptor("a", {Permission::BlockFlow}), std::make_unique<ScriptedPlugin>(returns(pass())));
    ASSERT_FALSE(r);
    EXPECT_EQ(r.error(), RegisterError::MalformedPermissions);
}

TEST(PluginHost, ChainOrderIsRegistrationOrder) {
    VirtualClock clock;
    PluginHost host(clock);
    std::vector<std::string> seen;
    for (const char* id : {"first", "second", "third"}) {
        add(host, descriptor(id, {Permission::Observe}), [&seen, id](const PluginContext&, ByteView, HostServices&) {
            seen.emplace_back(id);
            return pass();
        });
    }
    host.chain_apply(event(), {});
    EXPECT_EQ(seen, (std::vector<std::string>{"first", "second", "third"}));
}

TEST(PluginHost, EmptyChainPasses) {
    VirtualClock clock;
    PluginHost host(clock);
    auto r = host.chain_apply(event(), {});
    EXPECT_TRUE(std::holds_alternative<PassVerdict>(r.action.verdict));
}

TEST(PluginHost, ObserveOnlyBlockIsDowngraded) {
    VirtualClock clock;
    PluginHost host(clock);
    add(host, descriptor("sneaky", {Permission::Observe}), returns(block(BlockMode::ResetApp)));
    auto r = host.chain_apply(event(), {});
    EXPECT_TRUE(std::holds_alternative<PassVerdict>(r.action.verdict));
    ASSERT_EQ(host.violations().size(), 1u);
    EXPECT_EQ(host.violations()[0].kind, "PermissionDenied");
    EXPECT_EQ(host.violations()[0].plugin, "sneaky");
    EXPECT_TRUE(host.enabled(0));
}

TEST(PluginHost, InjectOnInboundEventIsInvalid) {
    VirtualClock clock;
    PluginHost host(clock);
    add(host, descriptor("inj", kAll), returns(block(BlockMode::InjectResponse, to_bytes("x"))));
    auto r = host.chain_apply(event(EventKind::PacketIn, Direction::NetToApp), {});
    EXPECT_TRUE(std::holds_alternative<PassVerdict>(r.action.verdict));
    EXPECT_EQ(host.violations().at(0).kind, "InvalidVerdict");
}

TEST(PluginHost, ThrowingPluginIsContained) {
    VirtualClock clock;
    PluginHost host(clock);
    add(host, descriptor("boom", {Permission::Observe}),
        [](const PluginContext&, ByteView, HostServices&) -> Verdict { throw std::runtime_error("kaput"); });
    auto* after = add(host, descriptor("after", {Permission::Observe}), returns(pass()));
    auto r = host.chain_apply(event(), {});
    EXPECT_TRUE(std::holds_alternative<PassVerdict>(r.action.verdict));
    EXPECT_EQ(after->calls, 1u);
    EXPECT_EQ(host.violations().at(0).kind, "PluginFailure");
}

// Oracle: walk the verdict list by hand. Modify composes, the first Block or Redirect
// stops the chain; later plugins are not invoked.
TEST(PluginHost, ShortCircuitOverAllVerdictPermutations) {
    std::vector<std::pair<std::string, Verdict>> menu{
        {"pass", pass()},
        {"modify", modify(to_bytes("y"))},
        {"block", block(BlockMode::ResetApp)},
        {"redirect", redirect(Endpoint::parse("10.9.9.9:80").value())},
    };
    for (std::size_t a = 0; a < menu.size(); ++a) {
        for (std::size_t b = 0; b < menu.size(); ++b) {
            for (std::size_t c = 0; c < menu.size(); ++c) {
                VirtualClock clock;
                PluginHost host(clock);
                std::size_t picks[] = {a, b, c};
                std::vector<ScriptedPlugin*> ps;
                for (int i = 0; i < 3; ++i) {
                    ps.push_back(add(host, descriptor("p" + std::to_string(i), kAll), returns(menu[picks[i]].second)));
                }
                auto r = host.chain_apply(event(), to_bytes("x"));

                Verdict expected = pass();
                std::string actor;
                int stop = 3;
                for (int i = 0; i < 3; ++i) {
                    const auto& v = menu[picks[i]].second;
                    if (std::holds_alternative<ModifyVerdict>(v)) {
                        expected = v;
                        actor = "p" + std::to_string(i);
                    } else if (!std::holds_alternative<PassVerdict>(v)) {
                        expected = v;
                        actor = "p" + std::to_string(i);
                        stop = i + 1;
                        break;
                    }
                }
                SCOPED_TRACE(menu[a].first + "," + menu[b].first + "," + menu[c].first);
                EXPECT_EQ(r.action.verdict, expected);
                EXPECT_EQ(r.action.acting_plugin, actor);
                for (int i = 0; i < 3; ++i) EXPECT_EQ(ps[i]->calls, i < stop ? 1u : 0u) << "plugin " << i;
            }
        }
    }
}

TEST(PluginHost, ModifiesComposeInOrder) {
    VirtualClock clock;
    PluginHost host(clock);
    add(host, descriptor("up", kAll), [](const PluginContext&, ByteView p, HostServices&) {
        Bytes b(p.begin(), p.end());
        b.push_back('1');
        return modify(b);
    });
    add(host, descriptor("up2", kAll), [](const PluginContext&, ByteView p, HostServices&) {
        Bytes b(p.begin(), p.end());
        b.push_back('2');
        return modify(b);
    });
    auto r = host.chain_apply(event(), to_bytes("x"));
    EXPECT_EQ(std::get<ModifyVerdict>(r.action.verdict).payload, to_bytes("x12"));
}

TEST(Governor, SustainedCpuOverrunDisables) {
    VirtualClock clock;
    PluginHost host(clock);
    auto* p = add(host, descriptor("slow", {Permission::Observe}), returns(pass()));
    auto d = host.descriptor(0).budget;
    for (unsigned i = 0; i < d.violation_grace; ++i) {
        EXPECT_FALSE(host.account(0, UsageSample{2 * d.max_cpu_per_packet, std::nullopt, 0}));
    }
    auto decision = host.account(0, UsageSample{2 * d.max_cpu_per_packet, std::nullopt, 0});
    ASSERT_TRUE(decision);
    EXPECT_EQ(decision->reason, DisableReason::CpuOverrun);
    EXPECT_FALSE(host.enabled(0));
    EXPECT_EQ(p->disabled_reason, "CpuOverrun");
}

TEST(Governor, SingleSpikeTolerated) {
    VirtualClock clock;
    PluginHost host(clock);
    add(host, descriptor("spiky", {Permission::Observe}), returns(pass()));
    auto d = host.descriptor(0).budget;
    for (int i = 0; i < 20; ++i) {
        Duration cpu = i % 4 == 0 ? 10 * d.max_cpu_per_packet : Duration{1};
        EXPECT_FALSE(host.account(0, UsageSample{cpu, std::nullopt, 0}));
    }
    EXPECT_TRUE(host.enabled(0));
}

TEST(Governor, CellularEmissionOverrunDisablesImmediately) {
    VirtualClock clock;
    PluginHost host(clock);
    auto d = descriptor("exporter", kAll);
    d.wifi_only_export = true;
    add(host, d, returns(pass()));
    host.update_context(DeviceContext{Connectivity::Cellular, 80});
    auto cap = host.descriptor(0).budget.max_emitted_bytes_per_min;
    auto decision = host.account(0, UsageSample{std::nullopt, std::nullopt, cap + 1});
    ASSERT_TRUE(decision);
    EXPECT_EQ(decision->reason, DisableReason::CellularEmissionOverrun);
}

TEST(Governor, EmissionOverrunOnWifiUsesGrace) {
    VirtualClock clock;
    PluginHost host(clock);
    add(host, descriptor("exporter", kAll), returns(pass()));
    auto b = host.descriptor(0).budget;
    EXPECT_FALSE(host.account(0, UsageSample{std::nullopt, std::nullopt, b.max_emitted_bytes_per_min + 1}));
    EXPECT_TRUE(host.enabled(0));
}

TEST(Governor, DisabledPluginStaysQuiet) {
    VirtualClock clock;
    PluginHost host(clock);
    FakeCpu cpu;
    host.set_cpu_meter([&cpu] { return cpu.now(); });
    auto* hog = add(host, descriptor("hog", {Permission::Observe}), [&cpu](const PluginContext&, ByteView, HostServices&) {
        cpu.charge(5ms);
        return pass();
    });
    auto* ok = add(host, descriptor("ok", {Permission::Observe}), returns(pass()));
    for (int i = 0; i < 100; ++i) host.chain_apply(event(), {});
    EXPECT_FALSE(host.enabled(0));
    auto frozen = hog->calls;
    EXPECT_EQ(frozen, host.descriptor(0).budget.violation_grace + 1);
    for (int i = 0; i < 1000; ++i) {
        host.chain_apply(event(), {});
        host.governor_tick(clock.now());
    }
    EXPECT_EQ(hog->calls, frozen);
    EXPECT_EQ(host.invocations(0), frozen);
    EXPECT_EQ(ok->calls, 1100u);
}

TEST(Context, ConnectivitySwitchVisibleToNextEvent) {
    VirtualClock clock;
    PluginHost host(clock);
    auto* p = add(host, descriptor("o", {Permission::Observe}), returns(pass()));
    host.chain_apply(event(), {});
    EXPECT_EQ(p->last_ctx.device.connectivity, Connectivity::WiFi);
    host.update_context(DeviceContext{Connectivity::Cellular, 90});
    host.chain_apply(event(), {});
    EXPECT_EQ(p->last_ctx.device.connectivity, Connectivity::Cellular);
}

TEST(Context, WifiOnlyExportSuspendedOnCellular) {
    VirtualClock clock;
    PluginHost host(clock);
    auto d = descriptor("exp", kAll);
    d.wifi_only_export = true;
    bool accepted = true;
    add(host, d, [&accepted](const PluginContext&, ByteView, HostServices& s) {
        accepted = s.export_data("telemetry", to_bytes("data"));
        return pass();
    });
    host.update_context(DeviceContext{Connectivity::Cellular, 90});
    host.chain_apply(event(), {});
    EXPECT_FALSE(accepted);
    ASSERT_EQ(host.violations().size(), 1u);
    EXPECT_EQ(host.violations()[0].kind, "ExportSuspended");
    EXPECT_TRUE(host.exports().empty());
    host.update_context(DeviceContext{Connectivity::WiFi, 90});
    host.chain_apply(event(), {});
    EXPECT_TRUE(accepted);
    EXPECT_EQ(host.exports().size(), 1u);
}

// Policy table: throttle iff sampling-class and battery at or below the configured level.
TEST(Context, LowBatteryThrottleTable) {
    for (bool sampling : {false, true}) {
        for (std::optional<int> level : {std::optional<int>{}, std::optional<int>{20}}) {
            for (int battery : {5, 15, 20, 21, 90}) {
                VirtualClock clock;
                PluginHost host(clock, HostPolicy{level});
                auto d = descriptor("s", {Permission::Observe});
                d.sampling = sampling;
                auto* p = add(host, d, returns(pass()));
                host.update_context(DeviceContext{Connectivity::WiFi, battery});
                host.chain_apply(event(), {});
                bool expected = sampling && level && battery <= *level;
                EXPECT_EQ(p->last_ctx.throttle, expected) << sampling << " " << level.value_or(-1) << " " << battery;
            }
        }
    }
}

TEST(PluginHostProperty, EffectiveActionsNeverExceedGrants) {
    Gen g(31);
    std::vector<Verdict> menu{pass(), modify(to_bytes("m")), block(BlockMode::DropSilent), block(BlockMode::ResetApp),
                              block(BlockMode::InjectResponse, to_bytes("n")),
                              redirect(Endpoint::parse("10.1.1.1:1").value())};
    for (int round = 0; round < 200; ++round) {
        VirtualClock clock;
        PluginHost host(clock);
        std::map<std::string, PermissionSet> grants;
        std::size_t n = g.range(1, 4);
        for (std::size_t i = 0; i < n; ++i) {
            PermissionSet perms{Permission::Observe};
            for (auto p : {Permission::ModifyPayload, Permission::BlockFlow, Permission::RedirectFlow,
                           Permission::InjectPackets}) {
                if (g.coin()) perms.add(p);
            }
            std::string id = "p" + std::to_string(i);
            grants[id] = perms;
            add(host, descriptor(id, perms), [&g, &menu](const PluginContext&, ByteView, HostServices&) {
                return menu[g.range(0, menu.size() - 1)];
            });
        }
        std::uint64_t last_violations = 0;
        for (int i = 0; i < 50; ++i) {
            auto ctx = event(g.coin() ? EventKind::PacketOut : EventKind::PacketIn);
            auto r = host.chain_apply(ctx, to_bytes("x"));
            if (!std::holds_alternative<PassVerdict>(r.action.verdict)) {
                ASSERT_TRUE(grants[r.action.acting_plugin].contains(PluginHost::required_permissions(r.action.verdict)));
            }
            ASSERT_GE(host.violations().size(), last_violations);
            last_violations = host.violations().size();
        }
    }
}
