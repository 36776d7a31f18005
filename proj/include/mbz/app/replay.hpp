#pragma once

#include <fstream>
#include <iostream>
#include <optional>

#include <nlohmann/json.hpp>

#include "mbz/app/plugin_factory.hpp"
#include "mbz/app/run_config.hpp"
#include "mbz/engine/event_loop.hpp"
#include "mbz/io/pcap.hpp"
#include "mbz/io/trace.hpp"

namespace mbz {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitConfig = 2, kExitIo = 3 };

inline bool is_config_error(ErrorCode c) {
    switch (c) {
        case ErrorCode::ParseError:
        case ErrorCode::MissingFile:
        case ErrorCode::DuplicatePluginId:
        case ErrorCode::InvalidConfig:
        case ErrorCode::OverlappingScripts:
            return true;
        default:
            return false;
    }
}

template <typename Record>
nlohmann::json log_record(const Record& r) {
    return {{"ts_us", r.ts.count()}, {"plugin", r.plugin}, {"kind", r.kind}, {"detail", r.detail}};
}

template <typename Record>
void write_jsonl(const fs::path& path, const std::vector<Record>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    for (const auto& r : records) out << log_record(r).dump() << '\n';
    if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

struct InputTrace {
    std::string source = "none";
    std::vector<TraceEvent> events;
    std::size_t skipped = 0;
};

// Loads the configured input. pcap timestamps are rebased to the first record; with an
// app_cidr, packets not sourced from it are marked as network-originated and not replayed.
inline InputTrace load_input(const IoConfig& io) {
    InputTrace in;
    if (io.trace) {
        in.source = "trace";
        in.events = read_trace_file(*io.trace);
    } else if (io.pcap) {
        in.source = "pcap";
        auto r = pcap::read(*io.pcap);
        if (r.truncated) throw *r.truncated;
        in.skipped = r.skipped_non_ipv4;
        in.events = std::move(r.events);
        Timestamp base = in.events.empty() ? Timestamp{0} : in.events.front().ts;
        for (auto& ev : in.events) {
            ev.ts -= base;
            if (io.app_cidr && ev.packet.size() >= 20 && !io.app_cidr->contains(Ipv4Address{load_be32(ev.packet, 12)})) {
                ev.dir = Direction::NetToApp;
            }
        }
    }
    return in;
}

struct ReplayOutcome {
    nlohmann::json report;
    std::vector<TraceEvent> emitted;
    std::vector<ViolationRecord> violations;
    std::vector<GovernorRecord> governor;
    std::vector<StreamTranscript> streams;
    std::vector<DatagramRecord> datagrams;
};

inline ReplayOutcome run_replay(const RunConfig& cfg, std::uint64_t seed) {
    auto scripts = cfg.io.upstream ? load_upstream_scripts(*cfg.io.upstream) : std::vector<SimEndpointScript>{};
    auto input = load_input(cfg.io);

    VirtualClock clock;
    SimUpstream upstream(std::move(scripts), seed, clock);
    ReplayConduit conduit(input.events, cfg.io.speed, clock);
    PluginHost host(clock, cfg.policy);
    host.update_context(cfg.device);
    install_plugins(host, cfg, seed);
    EngineConfig ecfg = cfg.engine;
    ecfg.isn_seed = seed;
    Engine engine(ecfg, upstream, conduit, clock, &host);
    EventLoop loop(engine, upstream, conduit, clock);
    auto stats = loop.run();

    ReplayOutcome out;
    out.emitted = conduit.written();
    out.violations = host.violations();
    out.governor = host.governor_log();
    out.streams = upstream.transcripts();
    out.datagrams = upstream.datagram_log();

    auto plugins = nlohmann::json::array();
    auto plugin_reports = nlohmann::json::object();
    for (PluginHandle h = 0; h < host.size(); ++h) {
        const auto& d = host.descriptor(h);
        plugins.push_back({{"id", d.id},
                           {"enabled", host.enabled(h)},
                           {"invocations", host.invocations(h)},
                           {"violations", host.violation_count(h)},
                           {"permissions", d.requested.names()}});
        auto r = host.plugin(h).report();
        if (!r.is_null()) plugin_reports[d.id] = std::move(r);
    }
    auto violations = nlohmann::json::array();
    for (const auto& v : out.violations) violations.push_back(log_record(v));
    auto governor = nlohmann::json::array();
    for (const auto& g : out.governor) governor.push_back(log_record(g));

    out.report = {
        {"kind", "replay"},
        {"seed", seed},
        {"input", {{"source", input.source}, {"events", input.events.size()}, {"app_packets", conduit.delivered()},
                   {"skipped", input.skipped}}},
        {"engine", engine.counters().to_json()},
        {"emitted_packets", out.emitted.size()},
        {"upstream", {{"handles_opened", upstream.handles_opened()}, {"handles_closed", upstream.handles_closed()},
                      {"active", upstream.active_handle_count()}}},
        {"loop", {{"packets", stats.packets}, {"upstream_events", stats.upstream_events}, {"sweeps", stats.sweeps},
                  {"finished_us", stats.finished_at.count()}}},
        {"plugins", std::move(plugins)},
        {"plugin_reports", std::move(plugin_reports)},
        {"violations", std::move(violations)},
        {"governor", std::move(governor)},
    };
    return out;
}

struct ReplayOptions {
    fs::path config;
    std::optional<fs::path> out_pcap;
    std::optional<std::uint64_t> seed;
};

inline int replay_command(const ReplayOptions& opt, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        cfg = load_run_config(opt.config);
    } catch (const Error& e) {
        err << "mbz replay: " << e.what() << '\n';
        return e.code() == ErrorCode::MissingFile && !fs::exists(opt.config) ? kExitIo : kExitConfig;
    }
    std::uint64_t seed = opt.seed.value_or(cfg.seed);
    try {
        auto result = run_replay(cfg, seed);
        std::string text = result.report.dump(2) + "\n";
        if (cfg.report.path) {
            write_text(*cfg.report.path, text);
        } else {
            out << text;
        }
        if (cfg.report.violations) write_jsonl(*cfg.report.violations, result.violations);
        if (cfg.report.governor) write_jsonl(*cfg.report.governor, result.governor);
        auto pcap_path = opt.out_pcap ? opt.out_pcap : cfg.report.pcap;
        if (pcap_path) pcap::write(*pcap_path, result.emitted);
    } catch (const Error& e) {
        err << "mbz replay: " << e.what() << '\n';
        return is_config_error(e.code()) ? kExitConfig : kExitIo;
    } catch (const std::exception& e) {
        err << "mbz replay: " << e.what() << '\n';
        return kExitIo;
    }
    return kExitOk;
}

}  // namespace mbz
