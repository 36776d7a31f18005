#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbz/core/bytes.hpp"
#include "mbz/core/clock.hpp"
#include "mbz/core/error.hpp"
#include "mbz/io/base64.hpp"

namespace mbz {

enum class Direction : std::uint8_t { AppToNet, NetToApp };

inline const char* to_string(Direction d) { return d == Direction::AppToNet ? "app_to_net" : "net_to_app"; }

struct TraceEvent {
    Timestamp ts{0};
    Direction dir = Direction::AppToNet;
    std::string app;
    Bytes packet;

    bool operator==(const TraceEvent&) const = default;
};

// JSON-lines: one {"ts_us", "dir", "app", "pkt_b64"} object per line.
inline std::vector<TraceEvent> read_trace(std::istream& in) {
    std::vector<TraceEvent> events;
    std::string line;
    std::size_t lineno = 0;
    auto bad = [&](const std::string& why) {
        return Error(ErrorCode::MalformedTrace, "line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw bad(e.what());
        }
        if (!j.is_object()) throw bad("expected an object");
        for (const auto& [key, _] : j.items()) {
            if (key != "ts_us" && key != "dir" && key != "app" && key != "pkt_b64") throw bad("unknown key '" + key + "'");
        }
        TraceEvent ev;
        if (!j.contains("ts_us") || !j["ts_us"].is_number_integer()) throw bad("ts_us must be an integer");
        ev.ts = Timestamp{j["ts_us"].get<std::int64_t>()};
        if (ev.ts.count() < 0) throw bad("negative timestamp");
        auto dir = j.value("dir", std::string("app_to_net"));
        if (dir == "app_to_net") {
            ev.dir = Direction::AppToNet;
        } else if (dir == "net_to_app") {
            ev.dir = Direction::NetToApp;
        } else {
            throw bad("dir must be app_to_net or net_to_app");
        }
        if (j.contains("app")) {
            if (!j["app"].is_string()) throw bad("app must be a string");
            ev.app = j["app"].get<std::string>();
        }
        if (!j.contains("pkt_b64") || !j["pkt_b64"].is_string()) throw bad("pkt_b64 missing");
        auto pkt = base64::decode(j["pkt_b64"].get<std::string>());
        if (!pkt) throw bad("pkt_b64 is not valid base64");
        ev.packet = std::move(*pkt);
        if (!events.empty() && ev.ts < events.back().ts) throw bad("timestamps decrease");
        events.push_back(std::move(ev));
    }
    return events;
}

inline std::vector<TraceEvent> read_trace_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open trace " + path.string());
    return read_trace(in);
}

inline void write_trace(std::ostream& out, const std::vector<TraceEvent>& events) {
    for (const auto& ev : events) {
        nlohmann::json j;
        j["ts_us"] = ev.ts.count();
        j["dir"] = to_string(ev.dir);
        j["app"] = ev.app;
        j["pkt_b64"] = base64::encode(ev.packet);
        out << j.dump() << '\n';
    }
}

inline void write_trace_file(const std::filesystem::path& path, const std::vector<TraceEvent>& events) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write trace " + path.string());
    write_trace(out, events);
}

}  // namespace mbz
