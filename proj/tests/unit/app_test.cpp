#include <gtest/gtest.h>

#include <sstream>

#include "mbz/app/bench.hpp"
#include "mbz/app/replay.hpp"
#include "mbz/app/report.hpp"
#include "support/tmp.hpp"

using namespace mbz;
using namespace mbz::testing;

namespace {

ErrorCode config_error(const std::string& text, const fs::path& base = fs::temp_directory_path()) {
    try {
        parse_run_config(text, base, "test.json");
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::Io;  // sentinel: no error raised
}

std::string what_of(const std::string& text) {
    try {
        parse_run_config(text, fs::temp_directory_path(), "test.json");
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

BenchOptions bench_options(std::size_t n, std::size_t concurrency) {
    BenchOptions o;
    o.n = n;
    o.concurrency = concurrency;
    return o;
}

nlohmann::json replay_report(const char* config) {
    auto cfg = load_run_config(data_path(config));
    return run_replay(cfg, cfg.seed).report;
}

const nlohmann::json* org_row(const nlohmann::json& report, const std::string& org) {
    for (const auto& o : report["plugin_reports"]["snitch"]["organizations"]) {
        if (o["organization"] == org) return &o;
    }
    return nullptr;
}

}  // namespace

TEST(Config, MinimalConfigTakesDefaults) {
    auto cfg = parse_run_config("{}", fs::temp_directory_path(), "min.json");
    EXPECT_TRUE(cfg.plugins.empty());
    EXPECT_EQ(cfg.engine.socket_budget, 512u);
    EXPECT_EQ(cfg.engine.udp_timeout, std::chrono::seconds(30));
    EXPECT_EQ(cfg.engine.dns_timeout, std::chrono::seconds(10));
    EXPECT_FALSE(cfg.io.trace);
}

TEST(Config, AbsentRulesFileNamesThePath) {
    std::string text = R"({"plugins": [{"type": "firewall", "settings": {"rules": "nowhere/rules.json"}}]})";
    EXPECT_EQ(config_error(text), ErrorCode::MissingFile);
    EXPECT_NE(what_of(text).find("nowhere/rules.json"), std::string::npos);
}

TEST(Config, UnknownKeyIsParseErrorPointingAtIt) {
    std::string text = "{\n  \"io\": {\n    \"speeed\": 2\n  }\n}\n";
    EXPECT_EQ(config_error(text), ErrorCode::ParseError);
    auto msg = what_of(text);
    EXPECT_NE(msg.find("speeed"), std::string::npos);
    EXPECT_NE(msg.find(":3"), std::string::npos) << msg;
}

TEST(Config, DuplicatePluginIds) {
    TempDir dir;
    dir.write("orgs.csv", "a.test,A\n");
    std::string text = R"({"plugins": [{"type": "snitch", "settings": {"org_map": "orgs.csv"}},
                                        {"type": "snitch", "settings": {"org_map": "orgs.csv"}}]})";
    EXPECT_EQ(config_error(text, dir.path()), ErrorCode::DuplicatePluginId);
}

TEST(Config, RejectsBadValues) {
    EXPECT_EQ(config_error("{\"engine\": {\"socket_budget\": -1}}"), ErrorCode::ParseError);
    EXPECT_EQ(config_error("{\"engine\": {\"isn\": \"sometimes\"}}"), ErrorCode::ParseError);
    EXPECT_EQ(config_error("{\"device\": {\"battery_percent\": 101}}"), ErrorCode::ParseError);
    EXPECT_EQ(config_error("{\"plugins\": [{\"type\": \"teleporter\"}]}"), ErrorCode::ParseError);
    EXPECT_EQ(config_error("{not json"), ErrorCode::ParseError);
}

TEST(Config, PathsResolveAgainstConfigDirectory) {
    auto cfg = load_run_config(data_path("snitch/replay.json"));
    ASSERT_TRUE(cfg.io.trace);
    EXPECT_TRUE(fs::exists(*cfg.io.trace));
    EXPECT_EQ(cfg.plugins.size(), 1u);
}

TEST(Replay, MatchesGoldenReport) {
    auto cfg = load_run_config(data_path("snitch/replay.json"));
    auto out = run_replay(cfg, cfg.seed);
    EXPECT_EQ(out.report.dump(2) + "\n", slurp(data_path("snitch/golden_report.json")));
}

TEST(Replay, DenyRuleRemovesOrgAndCountsResets) {
    auto base = replay_report("snitch/replay.json");
    auto denied = replay_report("snitch/replay_deny.json");
    const auto* before = org_row(base, "Quantads");
    ASSERT_NE(before, nullptr);
    EXPECT_GT((*before)["requests"].get<int>(), 0);
    EXPECT_EQ(org_row(denied, "Quantads"), nullptr);
    EXPECT_GT(denied["engine"]["tcp"]["reset"].get<int>(), base["engine"]["tcp"]["reset"].get<int>());
    EXPECT_LT(denied["upstream"]["handles_opened"].get<int>(), base["upstream"]["handles_opened"].get<int>());
    EXPECT_EQ(denied["plugin_reports"]["snitch"]["third_party"]["organizations"].get<int>(),
              base["plugin_reports"]["snitch"]["third_party"]["organizations"].get<int>() - 1);
}

TEST(Replay, EmptyTraceGivesZeroCounters) {
    TempDir dir;
    dir.write("empty.jsonl", "");
    auto cfg_path = dir.write("cfg.json", R"({"io": {"trace": "empty.jsonl"}, "report": {"path": "out.json"}})");
    std::ostringstream out, err;
    EXPECT_EQ(replay_command({cfg_path, std::nullopt, std::nullopt}, out, err), kExitOk) << err.str();
    auto report = nlohmann::json::parse(slurp(dir / "out.json"));
    EXPECT_EQ(report["emitted_packets"], 0);
    for (const auto& [k, v] : report["engine"].items()) {
        if (v.is_number()) {
            EXPECT_EQ(v, 0) << k;
        }
    }
    EXPECT_EQ(report["upstream"]["handles_opened"], 0);
}

TEST(Replay, ExitCodeContract) {
    TempDir dir;
    std::ostringstream out, err;
    EXPECT_EQ(replay_command({dir / "missing.json", std::nullopt, std::nullopt}, out, err), kExitIo);
    auto bad = dir.write("bad.json", R"({"speeed": 1})");
    EXPECT_EQ(replay_command({bad, std::nullopt, std::nullopt}, out, err), kExitConfig);
    auto no_rules = dir.write("norules.json", R"({"plugins": [{"type": "firewall", "settings": {"rules": "x.json"}}]})");
    EXPECT_EQ(replay_command({no_rules, std::nullopt, std::nullopt}, out, err), kExitConfig);
    dir.write("empty.jsonl", "");
    auto unwritable = dir.write("unwritable.json", R"({"io": {"trace": "empty.jsonl"}})");
    EXPECT_EQ(replay_command({unwritable, dir / "no/such/dir/out.pcap", std::nullopt}, out, err), kExitIo);
}

TEST(Replay, SeedOverrideChangesOnlyTheSeedField) {
    auto cfg = load_run_config(data_path("snitch/replay.json"));
    auto a = run_replay(cfg, 1).report;
    auto b = run_replay(cfg, 1).report;
    EXPECT_EQ(a, b);
    EXPECT_EQ(a["seed"], 1);
}

TEST(Report, CsvRowPerOrganization) {
    auto report = validate_report(nlohmann::json::parse(slurp(data_path("snitch/golden_report.json"))));
    auto csv = format_report(report, ReportFormat::Csv);
    auto lines = std::count(csv.begin(), csv.end(), '\n');
    auto orgs = report["plugin_reports"]["snitch"]["organizations"].size();
    EXPECT_EQ(static_cast<std::size_t>(lines), orgs + 1);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "organization,requests,flows,tcp,udp,quic");
}

TEST(Report, PlotDataRanksOrganizations) {
    auto report = validate_report(nlohmann::json::parse(slurp(data_path("snitch/golden_report.json"))));
    std::istringstream in(format_report(report, ReportFormat::PlotData));
    std::string line;
    long prev = -1;
    std::size_t rows = 0;
    long last_requests = std::numeric_limits<long>::max();
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        long rank = 0, requests = 0;
        row >> rank >> requests;
        EXPECT_EQ(rank, prev < 0 ? 1 : prev + 1);
        EXPECT_LE(requests, last_requests);
        prev = rank;
        last_requests = requests;
        ++rows;
    }
    EXPECT_EQ(rows, 56u);
}

TEST(Report, MalformedFilesAreBadReport) {
    TempDir dir;
    auto expect_bad = [&](const std::string& text) {
        auto p = dir.write("r.json", text);
        try {
            load_report(p.string());
            ADD_FAILURE() << text;
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::BadReport) << text;
        }
    };
    expect_bad("{not json");
    expect_bad("[]");
    expect_bad(R"({"kind": "mystery"})");
    expect_bad(R"({"kind": "replay"})");
    expect_bad(R"({"kind": "bench", "samples": [{"direct_connect_us": 1}]})");
    expect_bad(R"({"kind": "bench", "samples": [{"direct_connect_us": 1, "engine_connect_us": 5, "delta_us": 3}],
                   "summary": {"count": 1, "median_us": 3, "p90_us": 3, "p99_us": 3}})");
    try {
        load_report((dir / "absent.json").string());
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BadReport);
    }
}

TEST(Bench, TooFewSamples) {
    try {
        run_bench(bench_options(10, 1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientSamples);
    }
}

TEST(Bench, PercentilesNearestRank) {
    std::vector<BenchSample> s;
    for (std::int64_t d = 100; d >= 1; --d) s.push_back({0, d, d});
    auto sum = summarize(s);
    EXPECT_EQ(sum.median, 50);
    EXPECT_EQ(sum.p90, 90);
    EXPECT_EQ(sum.p99, 99);
    EXPECT_EQ(sum.count, 100u);
}

TEST(Bench, SmallRunIsSelfConsistent) {
    auto samples = run_bench(bench_options(40, 4));
    ASSERT_EQ(samples.size(), 40u);
    auto report = bench_json(samples, 4);
    EXPECT_NO_THROW(validate_report(report));
    for (const auto& s : samples) {
        EXPECT_GE(s.direct_connect_us, 0);
        EXPECT_GE(s.engine_connect_us, 0);
        EXPECT_EQ(s.delta_us, s.engine_connect_us - s.direct_connect_us);
    }
    std::istringstream in(format_report(report, ReportFormat::PlotData));
    std::string line;
    double prev_x = -1e18, prev_y = 0;
    std::size_t points = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        double x = 0, y = 0;
        row >> x >> y;
        EXPECT_GT(x, prev_x);
        EXPECT_GE(y, prev_y);
        prev_x = x;
        prev_y = y;
        ++points;
    }
    EXPECT_GT(points, 0u);
    EXPECT_DOUBLE_EQ(prev_y, 1.0);
    auto csv = format_report(report, ReportFormat::Csv);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 41);
}
