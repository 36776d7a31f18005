#pragma once

#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbz/io/base64.hpp"
#include "mbz/io/trace.hpp"
#include "mbz/packet/packet.hpp"
#include "mbz/proto/dns.hpp"
#include "mbz/proto/tls.hpp"

// Synthetic app-traffic corpus: one device, two apps, 56 third-party organizations with a
// long-tail request distribution, plus first-party API traffic and an IMEI upload.
namespace mbz::synthetic {

inline constexpr std::string_view kImei = "356938035643809";
inline constexpr std::string_view kMainApp = "com.snapapp.android";
inline constexpr std::string_view kSideApp = "com.weather.lite";
inline constexpr std::string_view kFirstPartyOrg = "SnapApp";
inline constexpr std::uint32_t kEngineIsn = 7000;

inline const Ipv4Address kDevice{10, 0, 0, 2};
inline const Endpoint kResolver{Ipv4Address{192, 168, 1, 1}, 53};
inline const Ipv4Address kFirstPartyHost{203, 0, 113, 10};
inline const Ipv4Address kUploadHost{203, 0, 113, 20};

struct Org {
    std::string name;
    std::string zone;           // empty: reached by literal address only
    std::uint8_t index = 0;     // third octet of its 198.18.x.0/24
    std::size_t tcp_flows = 0;
    std::size_t udp_flows = 0;  // first quic_flows of these go to 443 as QUIC
    std::size_t quic_flows = 0;
};

struct Corpus {
    std::vector<Org> orgs;
    std::vector<TraceEvent> trace;
    std::string org_map_csv;
    nlohmann::json upstream;
    std::size_t first_party_flows = 0;
};

inline const Bytes& http_response() {
    static const Bytes r = to_bytes("HTTP/1.1 204 No Content\r\nContent-Length: 0\r\n\r\n");
    return r;
}

inline const Bytes& tls_response() {
    static const Bytes r = [] {
        Bytes b{0x16, 0x03, 0x03, 0x00, 0x30, 0x02};
        for (int i = 0; i < 47; ++i) b.push_back(static_cast<std::uint8_t>(0x40 + i));
        return b;
    }();
    return r;
}

inline std::vector<Org> organizations() {
    static const char* prefixes[] = {"Blue", "Quant", "Nova", "Hyper", "Data", "Cloud", "Ad", "Signal"};
    static const char* suffixes[] = {"mob", "sight", "metrics", "ads", "stack", "lytics", "push"};
    std::vector<Org> orgs;
    for (const char* p : prefixes) {
        for (const char* s : suffixes) {
            Org o;
            o.name = std::string(p) + s;
            o.index = static_cast<std::uint8_t>(orgs.size());
            o.zone = dns::lowercase(o.name) + ".test";
            orgs.push_back(std::move(o));
        }
    }
    // Five heavy hitters, nine with three flows, the rest with two. 341 TCP + 31 UDP = 372.
    const std::size_t heavy[] = {80, 60, 50, 40, 31};
    for (std::size_t i = 0; i < orgs.size(); ++i) {
        std::size_t flows = i < 5 ? heavy[i] : i < 14 ? 3 : 2;
        orgs[i].tcp_flows = flows;
    }
    // UDP flows taken out of the TCP budget: 3 per heavy hitter (2 QUIC), then one each for 16 small orgs.
    for (std::size_t i = 0; i < 5; ++i) {
        orgs[i].udp_flows = 3;
        orgs[i].quic_flows = 2;
        orgs[i].tcp_flows -= 3;
    }
    for (std::size_t i = 5; i < 21; ++i) {
        orgs[i].udp_flows = 1;
        orgs[i].quic_flows = i % 4 == 0 ? 1 : 0;
        orgs[i].tcp_flows -= 1;
    }
    // The last six are only ever reached by address.
    for (std::size_t i = orgs.size() - 6; i < orgs.size(); ++i) orgs[i].zone.clear();
    return orgs;
}

inline Ipv4Address org_host(const Org& o, std::uint8_t host) { return Ipv4Address{198, 18, o.index, host}; }

class TraceBuilder {
public:
    explicit TraceBuilder(std::uint64_t seed) : rng_(seed) {}

    std::vector<TraceEvent> events;

    void at(Timestamp ts, std::string_view app, const Packet& p) {
        events.push_back(TraceEvent{ts, Direction::AppToNet, std::string(app), serialize_packet(p).value()});
    }

    std::uint16_t port() { return next_port_++; }
    std::uint16_t dns_id() { return next_dns_id_++; }
    std::uint32_t isn() { return static_cast<std::uint32_t>(rng_()); }
    std::uint32_t draw(std::uint32_t n) { return static_cast<std::uint32_t>(rng_() % n); }

    // Handshake, one request, both sides close. The server's reply length is known in
    // advance so the app acknowledges it exactly.
    void tcp_exchange(Timestamp t, std::string_view app, const Endpoint& dst, const Bytes& request,
                      std::size_t reply_len) {
        Endpoint src{kDevice, port()};
        std::uint32_t s = isn();
        std::uint32_t peer = kEngineIsn + 1;
        at(t, app, make_tcp_packet(src, dst, s, 0, TcpFlags::kSyn, {}, 65535, 1460));
        at(t + std::chrono::milliseconds(5), app, make_tcp_packet(src, dst, s + 1, peer, TcpFlags::kAck));
        at(t + std::chrono::milliseconds(6), app,
           make_tcp_packet(src, dst, s + 1, peer, TcpFlags::kAck | TcpFlags::kPsh, request));
        std::uint32_t after = s + 1 + static_cast<std::uint32_t>(request.size());
        std::uint32_t peer_end = peer + static_cast<std::uint32_t>(reply_len) + 1;
        at(t + std::chrono::milliseconds(20), app,
           make_tcp_packet(src, dst, after, peer_end, TcpFlags::kFin | TcpFlags::kAck));
    }

    void dns_lookup(Timestamp t, std::string_view app, const std::string& name) {
        Endpoint src{kDevice, port()};
        at(t, app, make_udp_packet(src, kResolver, dns::build_query(dns_id(), name)));
    }

    void datagrams(Timestamp t, std::string_view app, const Endpoint& dst, const Bytes& payload, int count) {
        Endpoint src{kDevice, port()};
        for (int i = 0; i < count; ++i) at(t + std::chrono::milliseconds(3 * i), app, make_udp_packet(src, dst, payload));
    }

private:
    std::mt19937_64 rng_;
    std::uint16_t next_port_ = 40000;
    std::uint16_t next_dns_id_ = 0x1000;
};

struct PlannedFlow {
    enum class Kind : std::uint8_t { Tcp, Udp, Quic, FirstParty, Upload } kind;
    std::size_t org = 0;
};

// Deterministic for a given seed: only std::mt19937_64 output is consumed, never a
// library-defined distribution or shuffle.
inline Corpus make_corpus(std::uint64_t seed = 2024) {
    Corpus c;
    c.orgs = organizations();
    TraceBuilder b(seed);

    std::vector<PlannedFlow> plan;
    for (std::size_t i = 0; i < c.orgs.size(); ++i) {
        const auto& o = c.orgs[i];
        for (std::size_t k = 0; k < o.tcp_flows; ++k) plan.push_back({PlannedFlow::Kind::Tcp, i});
        for (std::size_t k = 0; k < o.udp_flows; ++k) {
            plan.push_back({k < o.quic_flows ? PlannedFlow::Kind::Quic : PlannedFlow::Kind::Udp, i});
        }
    }
    for (int k = 0; k < 24; ++k) plan.push_back({PlannedFlow::Kind::FirstParty, 0});
    plan.push_back({PlannedFlow::Kind::Upload, 0});
    c.first_party_flows = 25;
    for (std::size_t i = plan.size(); i > 1; --i) std::swap(plan[i - 1], plan[b.draw(static_cast<std::uint32_t>(i))]);

    std::set<std::string> resolved;
    auto resolve = [&](Timestamp t, std::string_view app, const std::string& name) {
        if (resolved.insert(name).second) b.dns_lookup(t, app, name);
    };
    const Bytes quic = quic::build_long_header_initial();
    const Bytes stun = to_bytes("\x00\x01\x00\x00!\x12\xa4" "B-synthetic-");

    Timestamp t{std::chrono::milliseconds(100)};
    for (const auto& f : plan) {
        std::string_view app = b.draw(5) == 0 ? kSideApp : kMainApp;
        Timestamp start = t + std::chrono::milliseconds(10);
        switch (f.kind) {
            case PlannedFlow::Kind::FirstParty: {
                resolve(t, kMainApp, "api.snapapp.test");
                b.tcp_exchange(start, kMainApp, Endpoint{kFirstPartyHost, 443}, tls::build_client_hello("api.snapapp.test"),
                               tls_response().size());
                break;
            }
            case PlannedFlow::Kind::Upload: {
                resolve(t, kMainApp, "upload.snapapp.test");
                std::string body = "imei=" + std::string(kImei) + "&os=android";
                Bytes req = to_bytes("POST /register HTTP/1.1\r\nHost: upload.snapapp.test\r\nContent-Length: " +
                                     std::to_string(body.size()) + "\r\n\r\n" + body);
                b.tcp_exchange(start, kMainApp, Endpoint{kUploadHost, 80}, req, req.size());
                break;
            }
            case PlannedFlow::Kind::Tcp: {
                const auto& o = c.orgs[f.org];
                bool https = b.draw(4) != 0;
                std::string host = o.zone.empty() ? "" : (https ? "t." : "cdn.") + o.zone;
                Ipv4Address addr = o.zone.empty() ? org_host(o, 20) : org_host(o, https ? 10 : 11);
                if (!host.empty()) resolve(t, app, host);
                if (https) {
                    b.tcp_exchange(start, app, Endpoint{addr, 443},
                                   tls::build_client_hello(host.empty() ? addr.to_string() : host), tls_response().size());
                } else {
                    Bytes req = to_bytes("GET /p.gif HTTP/1.1\r\nHost: " + (host.empty() ? addr.to_string() : host) +
                                         "\r\n\r\n");
                    b.tcp_exchange(start, app, Endpoint{addr, 80}, req, http_response().size());
                }
                break;
            }
            case PlannedFlow::Kind::Quic:
            case PlannedFlow::Kind::Udp: {
                const auto& o = c.orgs[f.org];
                bool is_quic = f.kind == PlannedFlow::Kind::Quic;
                std::string host = o.zone.empty() ? "" : "q." + o.zone;
                Ipv4Address addr = o.zone.empty() ? org_host(o, 20) : org_host(o, 12);
                if (!host.empty()) resolve(t, app, host);
                if (is_quic) {
                    b.datagrams(start, app, Endpoint{addr, 443}, quic, 2);
                } else {
                    b.datagrams(start, app, Endpoint{addr, 3478}, stun, 1);
                }
                break;
            }
        }
        t += std::chrono::milliseconds(30);
    }
    std::stable_sort(b.events.begin(), b.events.end(), [](const auto& x, const auto& y) { return x.ts < y.ts; });
    c.trace = std::move(b.events);

    std::ostringstream csv;
    csv << "pattern,organization\n";
    csv << "# first party\n";
    csv << ".snapapp.test," << kFirstPartyOrg << "\n";
    csv << "203.0.113.0/24," << kFirstPartyOrg << "\n";
    csv << "# third parties\n";
    for (const auto& o : c.orgs) {
        if (o.zone.empty()) {
            csv << "198.18." << int(o.index) << ".0/24," << o.name << "\n";
        } else {
            csv << "." << o.zone << "," << o.name << "\n";
        }
    }
    c.org_map_csv = csv.str();

    nlohmann::json answers = nlohmann::json::object();
    answers["api.snapapp.test"] = {kFirstPartyHost.to_string()};
    answers["upload.snapapp.test"] = {kUploadHost.to_string()};
    for (const auto& o : c.orgs) {
        if (o.zone.empty()) continue;
        answers["t." + o.zone] = {org_host(o, 10).to_string()};
        answers["cdn." + o.zone] = {org_host(o, 11).to_string()};
        answers["q." + o.zone] = {org_host(o, 12).to_string()};
    }
    c.upstream = {{"endpoints",
                   {{{"match", "192.168.1.1/32"}, {"port", 53}, {"behavior", "dns"}, {"delay_ms", 2}, {"answers", answers}},
                    {{"match", "203.0.113.10/32"}, {"port", 443}, {"behavior", "static"}, {"delay_ms", 2},
                     {"response_b64", base64::encode(tls_response())}},
                    {{"match", "203.0.113.20/32"}, {"port", 80}, {"behavior", "echo"}, {"delay_ms", 2}},
                    {{"match", "198.18.0.0/16"}, {"port", 443}, {"behavior", "static"}, {"delay_ms", 2},
                     {"response_b64", base64::encode(tls_response())}},
                    {{"match", "198.18.0.0/16"}, {"port", 80}, {"behavior", "static"}, {"delay_ms", 2},
                     {"response_b64", base64::encode(http_response())}},
                    {{"match", "198.18.0.0/16"}, {"port", 3478}, {"behavior", "static"}, {"delay_ms", 2},
                     {"response", "pong"}}}}};
    return c;
}

}  // namespace mbz::synthetic
