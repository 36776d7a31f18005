#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mbz/app/bench.hpp"
#include "mbz/core/error.hpp"

namespace mbz {

enum class ReportFormat { Json, Csv, PlotData };

inline std::optional<ReportFormat> parse_report_format(std::string_view s) {
    if (s == "json") return ReportFormat::Json;
    if (s == "csv") return ReportFormat::Csv;
    if (s == "plotdata") return ReportFormat::PlotData;
    return std::nullopt;
}

namespace detail {

[[noreturn]] inline void bad_report(const std::string& why) { throw Error(ErrorCode::BadReport, why); }

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// The org table of the first plugin report that has one.
inline const nlohmann::json* find_org_table(const nlohmann::json& report) {
    if (!report.contains("plugin_reports") || !report["plugin_reports"].is_object()) return nullptr;
    for (const auto& [_, r] : report["plugin_reports"].items()) {
        if (r.is_object() && r.contains("organizations") && r["organizations"].is_array()) return &r["organizations"];
    }
    return nullptr;
}

inline std::vector<BenchSample> bench_samples(const nlohmann::json& report) {
    if (!report.contains("samples") || !report["samples"].is_array()) bad_report("bench report without samples");
    std::vector<BenchSample> out;
    for (const auto& s : report["samples"]) {
        if (!s.is_object()) bad_report("bench sample is not an object");
        try {
            BenchSample b{s.at("direct_connect_us").get<std::int64_t>(), s.at("engine_connect_us").get<std::int64_t>(),
                          s.at("delta_us").get<std::int64_t>()};
            if (b.delta_us != b.engine_connect_us - b.direct_connect_us) bad_report("sample delta does not match its taps");
            out.push_back(b);
        } catch (const nlohmann::json::exception& e) {
            bad_report(std::string("bench sample: ") + e.what());
        }
    }
    return out;
}

}  // namespace detail

// Parses and sanity-checks a report produced by replay or bench.
inline nlohmann::json validate_report(const nlohmann::json& report) {
    if (!report.is_object() || !report.contains("kind") || !report["kind"].is_string()) {
        detail::bad_report("not a report (missing kind)");
    }
    auto kind = report["kind"].get<std::string>();
    if (kind == "bench") {
        auto samples = detail::bench_samples(report);
        auto sum = summarize(samples);
        try {
            const auto& s = report.at("summary");
            if (s.at("count").get<std::size_t>() != sum.count || s.at("median_us").get<double>() != sum.median ||
                s.at("p90_us").get<double>() != sum.p90 || s.at("p99_us").get<double>() != sum.p99) {
                detail::bad_report("summary does not match the embedded samples");
            }
        } catch (const nlohmann::json::exception& e) {
            detail::bad_report(std::string("bench summary: ") + e.what());
        }
    } else if (kind == "replay") {
        for (const char* key : {"engine", "plugins", "plugin_reports"}) {
            if (!report.contains(key)) detail::bad_report(std::string("replay report without ") + key);
        }
    } else if (kind == "live") {
        for (const char* key : {"engine", "plugin_reports"}) {
            if (!report.contains(key)) detail::bad_report(std::string("live report without ") + key);
        }
    } else {
        detail::bad_report("unknown report kind '" + kind + "'");
    }
    return report;
}

inline nlohmann::json load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) detail::bad_report("cannot read " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        detail::bad_report(path + ": " + e.what());
    }
    return validate_report(doc);
}

inline std::string format_report(const nlohmann::json& report, ReportFormat fmt) {
    std::ostringstream out;
    bool bench = report["kind"] == "bench";
    switch (fmt) {
        case ReportFormat::Json:
            out << report.dump(2) << '\n';
            break;
        case ReportFormat::Csv:
            if (bench) {
                out << "index,direct_connect_us,engine_connect_us,delta_us\n";
                std::size_t i = 0;
                for (const auto& s : detail::bench_samples(report)) {
                    out << i++ << ',' << s.direct_connect_us << ',' << s.engine_connect_us << ',' << s.delta_us << '\n';
                }
            } else {
                out << "organization,requests,flows,tcp,udp,quic\n";
                if (const auto* orgs = detail::find_org_table(report)) {
                    for (const auto& o : *orgs) {
                        out << detail::csv_field(o.value("organization", std::string{})) << ',' << o.value("requests", 0)
                            << ',' << o.value("flows", 0) << ',' << o.value("tcp", 0) << ',' << o.value("udp", 0) << ','
                            << o.value("quic", 0) << '\n';
                    }
                }
            }
            break;
        case ReportFormat::PlotData:
            if (bench) {
                out << "# delta_cdf\n# delta_us cumulative_fraction\n";
                for (const auto& [v, f] : delta_cdf(detail::bench_samples(report))) out << v << ' ' << f << '\n';
            } else {
                out << "# requests_per_org\n# rank requests organization\n";
                if (const auto* orgs = detail::find_org_table(report)) {
                    std::size_t rank = 1;
                    for (const auto& o : *orgs) {
                        out << rank++ << ' ' << o.value("requests", 0) << ' '
                            << detail::csv_field(o.value("organization", std::string{})) << '\n';
                    }
                }
            }
            break;
    }
    return out.str();
}

}  // namespace mbz
