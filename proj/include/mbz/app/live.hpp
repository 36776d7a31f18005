#pragma once

#include <csignal>
#include <iostream>

#include "mbz/app/replay.hpp"
#include "mbz/io/socket_upstream.hpp"
#include "mbz/io/tun_conduit.hpp"

namespace mbz {

inline volatile std::sig_atomic_t g_live_stop = 0;

// Serves a real tun device against real sockets until SIGINT/SIGTERM.
inline int run_command(const fs::path& config, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        cfg = load_run_config(config);
    } catch (const Error& e) {
        err << "mbz run: " << e.what() << '\n';
        return e.code() == ErrorCode::MissingFile && !fs::exists(config) ? kExitIo : kExitConfig;
    }
    try {
        WallClock clock;
        TunConduit tun(cfg.io.tun_name, clock);
        SocketUpstream upstream(clock);
        upstream.watch_fd(tun.poll_fd());
        PluginHost host(clock, cfg.policy);
        host.update_context(cfg.device);
        install_plugins(host, cfg, cfg.seed);
        Engine engine(cfg.engine, upstream, tun, clock, &host);
        EventLoop loop(engine, upstream, tun, clock);
        std::signal(SIGINT, [](int) { g_live_stop = 1; });
        std::signal(SIGTERM, [](int) { g_live_stop = 1; });
        err << "mbz run: serving on " << tun.name() << '\n';
        while (!g_live_stop) loop.step(std::chrono::milliseconds(100));

        auto plugin_reports = nlohmann::json::object();
        for (PluginHandle h = 0; h < host.size(); ++h) {
            auto r = host.plugin(h).report();
            if (!r.is_null()) plugin_reports[host.descriptor(h).id] = std::move(r);
        }
        nlohmann::json report{{"kind", "live"}, {"engine", engine.counters().to_json()}, {"plugin_reports", plugin_reports}};
        if (cfg.report.path) {
            write_text(*cfg.report.path, report.dump(2) + "\n");
        } else {
            out << report.dump(2) << '\n';
        }
        if (cfg.report.violations) write_jsonl(*cfg.report.violations, host.violations());
        if (cfg.report.governor) write_jsonl(*cfg.report.governor, host.governor_log());
    } catch (const Error& e) {
        err << "mbz run: " << e.what() << '\n';
        return is_config_error(e.code()) ? kExitConfig : kExitIo;
    }
    return kExitOk;
}

}  // namespace mbz
