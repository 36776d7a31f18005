#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbz/core/error.hpp"
#include "mbz/engine/config.hpp"
#include "mbz/io/base64.hpp"
#include "mbz/io/sim_upstream.hpp"
#include "mbz/plugin/host.hpp"

namespace mbz {

namespace fs = std::filesystem;

struct PluginSpec {
    std::string id;
    std::string type;  // snitch | firewall | dns-whatif | protocol-advisor
    std::optional<PermissionSet> permissions;  // unset: the plugin's own default
    ResourceBudget budget;
    bool wifi_only_export = false;
    bool enabled = true;
    nlohmann::json settings = nlohmann::json::object();
};

struct IoConfig {
    std::optional<fs::path> trace;
    std::optional<fs::path> pcap;
    std::optional<Cidr> app_cidr;  // pcap only: which side is the app
    std::optional<fs::path> upstream;
    std::optional<double> speed = 1.0;  // unset: as fast as possible
    std::string tun_name = "mbz0";
};

struct ReportConfig {
    std::optional<fs::path> path;
    std::optional<fs::path> violations;
    std::optional<fs::path> governor;
    std::optional<fs::path> pcap;
};

struct RunConfig {
    fs::path base_dir;
    std::uint64_t seed = 0;
    EngineConfig engine;
    DeviceContext device;
    HostPolicy policy;
    std::vector<PluginSpec> plugins;
    IoConfig io;
    ReportConfig report;
};

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(offset, text.size())), '\n'));
}

// Best-effort source line for a key, for error messages.
inline std::size_t line_of_key(const std::string& text, const std::string& key) {
    auto pos = text.find("\"" + key + "\"");
    return pos == std::string::npos ? 0 : line_of_offset(text, pos);
}

class ConfigReader {
public:
    ConfigReader(std::string origin, std::string text) : origin_(std::move(origin)), text_(std::move(text)) {}

    nlohmann::json parse() const {
        try {
            return nlohmann::json::parse(text_);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorCode::ParseError,
                        origin_ + ":" + std::to_string(line_of_offset(text_, e.byte == 0 ? 0 : e.byte - 1)) + ": " + e.what());
        }
    }

    [[noreturn]] void fail(const std::string& field, const std::string& why) const {
        auto leaf = field.substr(field.find_last_of('.') + 1);
        auto bracket = leaf.find('[');
        if (bracket != std::string::npos) leaf = leaf.substr(0, bracket);
        std::size_t line = line_of_key(text_, leaf);
        std::string where = line ? origin_ + ":" + std::to_string(line) : origin_;
        throw Error(ErrorCode::ParseError, where + ": field '" + field + "': " + why);
    }

    void object(const nlohmann::json& j, const std::string& field, std::initializer_list<std::string_view> allowed) const {
        if (!j.is_object()) fail(field, "expected an object");
        for (const auto& [k, _] : j.items()) {
            if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
                fail(field.empty() ? k : field + "." + k, "unknown key '" + k + "'");
            }
        }
    }

    double number(const nlohmann::json& j, const std::string& field) const {
        if (!j.is_number()) fail(field, "expected a number");
        return j.get<double>();
    }

    std::uint64_t count(const nlohmann::json& j, const std::string& field) const {
        if (!j.is_number_integer() || j.get<std::int64_t>() < 0) fail(field, "expected a non-negative integer");
        return j.get<std::uint64_t>();
    }

    std::string string(const nlohmann::json& j, const std::string& field) const {
        if (!j.is_string()) fail(field, "expected a string");
        return j.get<std::string>();
    }

    bool boolean(const nlohmann::json& j, const std::string& field) const {
        if (!j.is_boolean()) fail(field, "expected true or false");
        return j.get<bool>();
    }

    Duration seconds(const nlohmann::json& j, const std::string& field) const {
        double s = number(j, field);
        if (!(s > 0)) fail(field, "must be positive");
        return Duration{static_cast<std::int64_t>(std::llround(s * 1e6))};
    }

    Duration millis(const nlohmann::json& j, const std::string& field) const {
        double ms = number(j, field);
        if (ms < 0) fail(field, "must not be negative");
        return Duration{static_cast<std::int64_t>(std::llround(ms * 1e3))};
    }

    const std::string& origin() const { return origin_; }

private:
    std::string origin_;
    std::string text_;
};

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

inline fs::path existing(const fs::path& base, const std::string& p) {
    auto path = resolve(base, p);
    if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    return path;
}

}  // namespace detail

inline const std::set<std::string>& builtin_plugin_types() {
    static const std::set<std::string> types{"snitch", "firewall", "dns-whatif", "protocol-advisor"};
    return types;
}

// Settings keys each builtin understands, and which of them name files.
inline void check_plugin_settings(const detail::ConfigReader& r, const fs::path& base, PluginSpec& spec,
                                  const std::string& field) {
    auto& s = spec.settings;
    if (spec.type == "snitch") {
        r.object(s, field, {"org_map", "first_party", "udp_burst_gap_ms"});
        if (!s.contains("org_map")) r.fail(field + ".org_map", "required");
        s["org_map"] = detail::existing(base, r.string(s["org_map"], field + ".org_map")).string();
        if (s.contains("udp_burst_gap_ms")) r.millis(s["udp_burst_gap_ms"], field + ".udp_burst_gap_ms");
        if (s.contains("first_party") && !s["first_party"].is_array()) r.fail(field + ".first_party", "expected a list");
    } else if (spec.type == "firewall") {
        r.object(s, field, {"rules", "org_map"});
        if (!s.contains("rules")) r.fail(field + ".rules", "required");
        s["rules"] = detail::existing(base, r.string(s["rules"], field + ".rules")).string();
        if (s.contains("org_map")) s["org_map"] = detail::existing(base, r.string(s["org_map"], field + ".org_map")).string();
    } else if (spec.type == "dns-whatif") {
        r.object(s, field, {"alternates", "sample_probability", "seed", "timeout_ms"});
        if (!s.contains("alternates") || !s["alternates"].is_array()) r.fail(field + ".alternates", "expected a list");
        for (const auto& a : s["alternates"]) {
            auto text = r.string(a, field + ".alternates");
            if (!Endpoint::parse(text) && !Ipv4Address::parse(text)) r.fail(field + ".alternates", "bad resolver '" + text + "'");
        }
        if (s.contains("sample_probability")) {
            double p = r.number(s["sample_probability"], field + ".sample_probability");
            if (p < 0 || p > 1) r.fail(field + ".sample_probability", "must be within [0, 1]");
        }
        if (s.contains("seed")) r.count(s["seed"], field + ".seed");
        if (s.contains("timeout_ms")) r.millis(s["timeout_ms"], field + ".timeout_ms");
    } else if (spec.type == "protocol-advisor") {
        r.object(s, field, {"loss_rate_threshold", "min_samples"});
        if (s.contains("loss_rate_threshold")) r.number(s["loss_rate_threshold"], field + ".loss_rate_threshold");
        if (s.contains("min_samples")) r.count(s["min_samples"], field + ".min_samples");
    }
}

inline RunConfig parse_run_config(const std::string& text, const fs::path& base_dir, const std::string& origin) {
    detail::ConfigReader r(origin, text);
    auto doc = r.parse();
    r.object(doc, "", {"seed", "engine", "device", "plugins", "io", "report"});

    RunConfig cfg;
    cfg.base_dir = base_dir;
    if (doc.contains("seed")) cfg.seed = r.count(doc["seed"], "seed");

    if (doc.contains("engine")) {
        const auto& e = doc["engine"];
        r.object(e, "engine", {"mtu", "socket_budget", "udp_timeout_s", "dns_timeout_s", "sweep_interval_s",
                               "connect_timeout_s", "close_linger_s", "isn", "buffer_capacity", "pressure_ratio",
                               "default_mss"});
        auto& c = cfg.engine;
        if (e.contains("mtu")) c.mtu = r.count(e["mtu"], "engine.mtu");
        if (e.contains("socket_budget")) c.socket_budget = r.count(e["socket_budget"], "engine.socket_budget");
        if (e.contains("udp_timeout_s")) c.udp_timeout = r.seconds(e["udp_timeout_s"], "engine.udp_timeout_s");
        if (e.contains("dns_timeout_s")) c.dns_timeout = r.seconds(e["dns_timeout_s"], "engine.dns_timeout_s");
        if (e.contains("sweep_interval_s")) c.sweep_interval = r.seconds(e["sweep_interval_s"], "engine.sweep_interval_s");
        if (e.contains("connect_timeout_s")) c.connect_timeout = r.seconds(e["connect_timeout_s"], "engine.connect_timeout_s");
        if (e.contains("close_linger_s")) c.close_linger = r.seconds(e["close_linger_s"], "engine.close_linger_s");
        if (e.contains("buffer_capacity")) c.buffer_capacity = r.count(e["buffer_capacity"], "engine.buffer_capacity");
        if (e.contains("pressure_ratio")) c.pressure_ratio = r.number(e["pressure_ratio"], "engine.pressure_ratio");
        if (e.contains("default_mss")) {
            auto mss = r.count(e["default_mss"], "engine.default_mss");
            if (mss == 0 || mss > 65535) r.fail("engine.default_mss", "must be within [1, 65535]");
            c.default_mss = static_cast<std::uint16_t>(mss);
        }
        if (e.contains("isn")) {
            const auto& isn = e["isn"];
            if (isn.is_string() && isn.get<std::string>() == "random") {
                c.fixed_isn.reset();
            } else if (isn.is_object()) {
                r.object(isn, "engine.isn", {"fixed"});
                auto v = r.count(isn.value("fixed", nlohmann::json()), "engine.isn.fixed");
                if (v > 0xFFFFFFFFull) r.fail("engine.isn.fixed", "must fit in 32 bits");
                c.fixed_isn = static_cast<std::uint32_t>(v);
            } else {
                r.fail("engine.isn", "expected \"random\" or {\"fixed\": N}");
            }
        }
        try {
            c.validate();
        } catch (const Error& err) {
            throw Error(ErrorCode::ParseError, origin + ": " + err.what());
        }
    }

    if (doc.contains("device")) {
        const auto& d = doc["device"];
        r.object(d, "device", {"connectivity", "battery_percent", "low_battery_throttle"});
        if (d.contains("connectivity")) {
            auto c = r.string(d["connectivity"], "device.connectivity");
            if (c == "wifi") {
                cfg.device.connectivity = Connectivity::WiFi;
            } else if (c == "cellular") {
                cfg.device.connectivity = Connectivity::Cellular;
            } else if (c == "none") {
                cfg.device.connectivity = Connectivity::None;
            } else {
                r.fail("device.connectivity", "expected wifi, cellular or none");
            }
        }
        if (d.contains("battery_percent")) {
            auto b = r.count(d["battery_percent"], "device.battery_percent");
            if (b > 100) r.fail("device.battery_percent", "must be within [0, 100]");
            cfg.device.battery_percent = static_cast<int>(b);
        }
        if (d.contains("low_battery_throttle")) {
            auto t = r.count(d["low_battery_throttle"], "device.low_battery_throttle");
            if (t > 100) r.fail("device.low_battery_throttle", "must be within [0, 100]");
            cfg.policy.low_battery_throttle = static_cast<int>(t);
        }
    }

    if (doc.contains("plugins")) {
        if (!doc["plugins"].is_array()) r.fail("plugins", "expected a list");
        std::set<std::string> ids;
        std::size_t i = 0;
        for (const auto& p : doc["plugins"]) {
            std::string field = "plugins[" + std::to_string(i++) + "]";
            r.object(p, field, {"id", "type", "permissions", "budget", "wifi_only_export", "enabled", "settings"});
            PluginSpec spec;
            if (p.contains("type")) spec.type = r.string(p["type"], field + ".type");
            if (p.contains("id")) spec.id = r.string(p["id"], field + ".id");
            if (spec.type.empty()) spec.type = spec.id;
            if (spec.id.empty()) spec.id = spec.type;
            if (!builtin_plugin_types().contains(spec.type)) r.fail(field + ".type", "unknown plugin type '" + spec.type + "'");
            if (!ids.insert(spec.id).second) throw Error(ErrorCode::DuplicatePluginId, origin + ": " + spec.id);
            if (p.contains("permissions")) {
                if (!p["permissions"].is_array()) r.fail(field + ".permissions", "expected a list");
                PermissionSet set;
                for (const auto& name : p["permissions"]) {
                    auto perm = PermissionSet::parse(r.string(name, field + ".permissions"));
                    if (!perm) r.fail(field + ".permissions", "unknown permission " + name.dump());
                    set.add(*perm);
                }
                if (!set.well_formed()) r.fail(field + ".permissions", "every permission requires observe");
                spec.permissions = set;
            }
            if (p.contains("budget")) {
                const auto& b = p["budget"];
                std::string bf = field + ".budget";
                r.object(b, bf, {"max_cpu_us_per_packet", "max_mem_bytes", "max_emitted_bytes_per_min", "violation_grace"});
                auto positive = [&](const char* key) {
                    auto v = r.count(b[key], bf + "." + key);
                    if (v == 0) r.fail(bf + "." + key, "must be positive");
                    return v;
                };
                if (b.contains("max_cpu_us_per_packet")) spec.budget.max_cpu_per_packet = Duration{positive("max_cpu_us_per_packet")};
                if (b.contains("max_mem_bytes")) spec.budget.max_mem_bytes = positive("max_mem_bytes");
                if (b.contains("max_emitted_bytes_per_min")) spec.budget.max_emitted_bytes_per_min = positive("max_emitted_bytes_per_min");
                if (b.contains("violation_grace")) spec.budget.violation_grace = static_cast<unsigned>(positive("violation_grace"));
            }
            if (p.contains("wifi_only_export")) spec.wifi_only_export = r.boolean(p["wifi_only_export"], field + ".wifi_only_export");
            if (p.contains("enabled")) spec.enabled = r.boolean(p["enabled"], field + ".enabled");
            if (p.contains("settings")) spec.settings = p["settings"];
            check_plugin_settings(r, base_dir, spec, field + ".settings");
            cfg.plugins.push_back(std::move(spec));
        }
    }

    if (doc.contains("io")) {
        const auto& io = doc["io"];
        r.object(io, "io", {"trace", "pcap", "app_cidr", "upstream", "speed", "tun"});
        if (io.contains("trace")) cfg.io.trace = detail::existing(base_dir, r.string(io["trace"], "io.trace"));
        if (io.contains("pcap")) cfg.io.pcap = detail::existing(base_dir, r.string(io["pcap"], "io.pcap"));
        if (cfg.io.trace && cfg.io.pcap) r.fail("io.pcap", "give either trace or pcap, not both");
        if (io.contains("app_cidr")) {
            auto c = Cidr::parse(r.string(io["app_cidr"], "io.app_cidr"));
            if (!c) r.fail("io.app_cidr", "expected a.b.c.d/n");
            cfg.io.app_cidr = *c;
        }
        if (io.contains("upstream")) cfg.io.upstream = detail::existing(base_dir, r.string(io["upstream"], "io.upstream"));
        if (io.contains("speed")) {
            if (io["speed"].is_null()) {
                cfg.io.speed.reset();
            } else {
                double s = r.number(io["speed"], "io.speed");
                if (!(s > 0)) r.fail("io.speed", "must be positive");
                cfg.io.speed = s;
            }
        }
        if (io.contains("tun")) cfg.io.tun_name = r.string(io["tun"], "io.tun");
    }

    if (doc.contains("report")) {
        const auto& rep = doc["report"];
        r.object(rep, "report", {"path", "violations", "governor", "pcap"});
        auto out = [&](const char* key) -> std::optional<fs::path> {
            if (!rep.contains(key)) return std::nullopt;
            return detail::resolve(base_dir, r.string(rep[key], std::string("report.") + key));
        };
        cfg.report.path = out("path");
        cfg.report.violations = out("violations");
        cfg.report.governor = out("governor");
        cfg.report.pcap = out("pcap");
    }
    return cfg;
}

inline RunConfig load_run_config(const fs::path& path) {
    auto text = detail::read_text(path);
    return parse_run_config(text, path.parent_path(), path.string());
}


inline std::vector<SimEndpointScript> parse_upstream_scripts(const std::string& text, const std::string& origin) {
    detail::ConfigReader r(origin, text);
    auto doc = r.parse();
    r.object(doc, "", {"endpoints"});
    std::vector<SimEndpointScript> scripts;
    if (!doc.contains("endpoints")) return scripts;
    if (!doc["endpoints"].is_array()) r.fail("endpoints", "expected a list");
    std::size_t i = 0;
    auto addr_list = [&](const nlohmann::json& j, const std::string& field) {
        std::vector<Ipv4Address> out;
        if (!j.is_array()) r.fail(field, "expected a list of addresses");
        for (const auto& a : j) {
            auto addr = Ipv4Address::parse(r.string(a, field));
            if (!addr) r.fail(field, "bad address " + a.dump());
            out.push_back(*addr);
        }
        return out;
    };
    for (const auto& e : doc["endpoints"]) {
        std::string field = "endpoints[" + std::to_string(i++) + "]";
        r.object(e, field, {"match", "port", "behavior", "delay_ms", "connect_delay_ms", "jitter_ms", "response",
                            "response_b64", "answers", "tamper"});
        SimEndpointScript s;
        auto match = Cidr::parse(r.string(e.value("match", nlohmann::json()), field + ".match"));
        if (!match) r.fail(field + ".match", "expected a.b.c.d/n");
        s.match = *match;
        if (e.contains("port")) {
            auto port = r.count(e["port"], field + ".port");
            if (port > 65535) r.fail(field + ".port", "out of range");
            s.port = static_cast<std::uint16_t>(port);
        }
        Duration delay{0};
        if (e.contains("delay_ms")) delay = r.millis(e["delay_ms"], field + ".delay_ms");
        if (e.contains("connect_delay_ms")) s.connect_delay = r.millis(e["connect_delay_ms"], field + ".connect_delay_ms");
        if (e.contains("jitter_ms")) s.jitter = r.millis(e["jitter_ms"], field + ".jitter_ms");
        auto behavior = r.string(e.value("behavior", nlohmann::json()), field + ".behavior");
        if (behavior == "echo") {
            s.behavior = EchoBehavior{delay};
        } else if (behavior == "static") {
            StaticResponseBehavior b;
            b.delay = delay;
            if (e.contains("response_b64")) {
                auto decoded = base64::decode(r.string(e["response_b64"], field + ".response_b64"));
                if (!decoded) r.fail(field + ".response_b64", "invalid base64");
                b.response = std::move(*decoded);
            } else {
                b.response = to_bytes(r.string(e.value("response", nlohmann::json("")), field + ".response"));
            }
            s.behavior = std::move(b);
        } else if (behavior == "dns") {
            DnsResponderBehavior b;
            b.delay = delay;
            if (e.contains("answers") && !e["answers"].is_object()) r.fail(field + ".answers", "expected an object");
            if (e.contains("answers")) {
                for (const auto& [name, addrs] : e["answers"].items()) {
                    b.answers[dns::lowercase(name)] = addr_list(addrs, field + ".answers");
                }
            }
            if (e.contains("tamper")) {
                const auto& t = e["tamper"];
                r.object(t, field + ".tamper", {"nxdomain_redirect", "overrides", "force_nxdomain"});
                if (t.contains("nxdomain_redirect")) {
                    auto a = Ipv4Address::parse(r.string(t["nxdomain_redirect"], field + ".tamper.nxdomain_redirect"));
                    if (!a) r.fail(field + ".tamper.nxdomain_redirect", "bad address");
                    b.tamper.nxdomain_redirect = *a;
                }
                if (t.contains("overrides")) {
                    for (const auto& [name, addrs] : t["overrides"].items()) {
                        b.tamper.overrides[dns::lowercase(name)] = addr_list(addrs, field + ".tamper.overrides");
                    }
                }
                if (t.contains("force_nxdomain")) {
                    for (const auto& n : t["force_nxdomain"]) {
                        b.tamper.force_nxdomain.insert(dns::lowercase(r.string(n, field + ".tamper.force_nxdomain")));
                    }
                }
            }
            s.behavior = std::move(b);
        } else if (behavior == "blackhole") {
            s.behavior = BlackholeBehavior{};
        } else if (behavior == "reset") {
            s.behavior = ResetOnConnectBehavior{};
        } else {
            r.fail(field + ".behavior", "unknown behavior '" + behavior + "'");
        }
        scripts.push_back(std::move(s));
    }
    return scripts;
}

inline std::vector<SimEndpointScript> load_upstream_scripts(const fs::path& path) {
    return parse_upstream_scripts(detail::read_text(path), path.string());
}

}  // namespace mbz
