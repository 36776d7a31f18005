#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>
#include <spdlog/sinks/stdout_color_sinks.h>

#include "mbz/app/bench.hpp"
#include "mbz/app/live.hpp"
#include "mbz/app/replay.hpp"
#include "mbz/app/report.hpp"

namespace {

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("mbz");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    spdlog::set_level(spdlog::level::warn);
    if (const char* env = std::getenv("MBZ_LOG")) {
        auto level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string_view(env) != "off") {
            spdlog::warn("MBZ_LOG={} not recognised; use trace, debug, info, warn, error or off", env);
        } else {
            spdlog::set_level(level);
        }
    }
}

int bench(const mbz::BenchOptions& opt, bool json_only) {
    try {
        spdlog::info("bench: {} connections, concurrency {}", opt.n, opt.concurrency);
        auto samples = mbz::run_bench(opt);
        auto report = mbz::bench_json(samples, opt.concurrency);
        if (!json_only) {
            auto s = mbz::summarize(samples);
            std::cerr << "connections  median_us  p90_us  p99_us\n"
                      << s.count << "  " << s.median << "  " << s.p90 << "  " << s.p99 << '\n';
        }
        std::cout << report.dump(2) << '\n';
        return mbz::kExitOk;
    } catch (const mbz::Error& e) {
        std::cerr << "mbz bench: " << e.what() << '\n';
        return e.code() == mbz::ErrorCode::InsufficientSamples || mbz::is_config_error(e.code())
                   ? mbz::kExitConfig
                   : mbz::kExitIo;
    }
}

int report(const std::string& path, const std::string& format) {
    auto fmt = mbz::parse_report_format(format);
    if (!fmt) {
        std::cerr << "mbz report: unknown format '" << format << "'\n";
        return mbz::kExitUsage;
    }
    try {
        std::cout << mbz::format_report(mbz::load_report(path), *fmt);
        return mbz::kExitOk;
    } catch (const mbz::Error& e) {
        std::cerr << "mbz report: " << e.what() << '\n';
        return mbz::kExitConfig;
    }
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"mbz: userspace middlebox engine"};
    app.require_subcommand(1);

    mbz::ReplayOptions replay_opt;
    std::string replay_config, replay_pcap;
    std::uint64_t replay_seed = 0;
    auto* replay = app.add_subcommand("replay", "drive a trace through the engine on a virtual clock");
    replay->add_option("--config", replay_config, "run config (JSON)")->required();
    auto* pcap_opt = replay->add_option("--out-pcap", replay_pcap, "write engine-emitted packets here");
    auto* seed_opt = replay->add_option("--seed", replay_seed, "override the config seed");

    std::size_t bench_n = 1000, bench_c = 1;
    bool bench_quiet = false;
    std::string bench_plugins;
    auto* bench_cmd = app.add_subcommand("bench", "connect-latency overhead over loopback");
    bench_cmd->add_option("--n", bench_n, "connections to measure")->required();
    bench_cmd->add_option("--concurrency", bench_c, "connections in flight at once");
    bench_cmd->add_flag("--json-only", bench_quiet, "skip the summary table");
    auto* plugins_opt = bench_cmd->add_option("--plugins", bench_plugins, "run config whose plugin chain the engine pass uses");

    std::string report_path, report_format = "json";
    auto* report_cmd = app.add_subcommand("report", "format a replay or bench report");
    report_cmd->add_option("path", report_path, "report file")->required();
    report_cmd->add_option("--format", report_format, "json | csv | plotdata");

    std::string run_config;
    auto* run_cmd = app.add_subcommand("run", "serve a tun device with real sockets");
    run_cmd->add_option("--config", run_config, "run config (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : mbz::kExitUsage;
    }

    if (*replay) {
        replay_opt.config = replay_config;
        if (*pcap_opt) replay_opt.out_pcap = replay_pcap;
        if (*seed_opt) replay_opt.seed = replay_seed;
        spdlog::info("replay: {}", replay_config);
        return mbz::replay_command(replay_opt, std::cout, std::cerr);
    }
    if (*bench_cmd) {
        mbz::BenchOptions opt;
        opt.n = bench_n;
        opt.concurrency = bench_c;
        if (*plugins_opt) opt.plugins_config = bench_plugins;
        return bench(opt, bench_quiet);
    }
    if (*report_cmd) return report(report_path, report_format);
    if (*run_cmd) return mbz::run_command(run_config, std::cout, std::cerr);
    return mbz::kExitUsage;
}
