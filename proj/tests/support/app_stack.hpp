#pragma once

#include <sstream>
#include <string>

#include "support/gen.hpp"
#include "support/rig.hpp"

// A small reactive model of the app-side TCP stack, for byte-fidelity properties.
// Go-back-N sender with random segmentation and occasional reordering or duplication;
// in-order receiver with a fixed advertised window.
namespace mbz::testing {

enum class Ending { Fin, Rst };

struct TcpCase {
    Bytes upload;
    bool echo = true;    // false: the endpoint answers once with `response`, then closes
    Bytes response;
    Ending ending = Ending::Fin;
    std::uint16_t app_window = 65535;
    std::uint16_t app_mss = 1460;
    double reorder = 0.0;
    double duplicate = 0.0;
};

inline TcpCase random_case(Gen& g, std::size_t min_bytes = 10, std::size_t max_bytes = 10000) {
    TcpCase c;
    c.upload = g.bytes(g.range(min_bytes, max_bytes));
    c.echo = g.coin();
    if (!c.echo) c.response = g.bytes(g.range(min_bytes, max_bytes));
    c.ending = g.coin() ? Ending::Fin : Ending::Rst;
    c.app_window = static_cast<std::uint16_t>(g.range(536, 65535));
    c.app_mss = static_cast<std::uint16_t>(g.range(100, 1460));
    c.reorder = g.coin() ? 0.1 : 0.0;
    c.duplicate = g.coin() ? 0.05 : 0.0;
    return c;
}

struct CaseResult {
    bool ok = true;
    std::string why;
    Bytes delivered_upstream;
    Bytes delivered_to_app;
};

inline CaseResult run_tcp_case(const TcpCase& c, Gen& g) {
    using namespace std::chrono_literals;
    CaseResult res;
    auto fail = [&](const std::string& why) {
        res.ok = false;
        res.why = why;
        return res;
    };
    const Endpoint app{Ipv4Address{10, 0, 0, 2}, static_cast<std::uint16_t>(g.range(1024, 65535))};
    const Endpoint server{Ipv4Address{203, 0, 113, 10}, 80};
    EndpointBehavior behavior = EchoBehavior{};
    if (!c.echo) behavior = StaticResponseBehavior{c.response, 1ms};
    auto cfg = test_config();
    cfg.fixed_isn = g.u32();
    Rig rig({script("203.0.113.0/24", 80, behavior)}, cfg, g.u64());

    const std::uint32_t isn = g.u32();
    std::uint32_t snd_una = isn + 1;  // first unacknowledged upload byte
    const std::uint32_t snd_end = isn + 1 + static_cast<std::uint32_t>(c.upload.size());
    std::uint32_t peer_window = 0;
    std::uint32_t rcv_nxt = 0;
    bool established = false, peer_fin = false, fin_sent = false, reset_sent = false;
    const std::size_t expected_back = c.echo ? c.upload.size() : c.response.size();

    auto send = [&](std::uint32_t seq, std::uint8_t flags, ByteView payload = {}) {
        rig.send(make_tcp_packet(app, server, seq, established ? rcv_nxt : 0, flags, payload, c.app_window,
                                 flags & TcpFlags::kSyn ? std::optional<std::uint16_t>(c.app_mss) : std::nullopt));
    };

    // Returns false on a protocol violation by the engine.
    auto absorb = [&]() -> bool {
        for (auto& p : rig.take()) {
            const auto& t = *p.tcp();
            if (t.src_port != server.port || t.dst_port != app.port) return false;
            if (t.flags.rst()) {
                res.why = "unexpected reset";
                return false;
            }
            if (t.flags.syn()) {
                if (!t.flags.ack() || t.ack != isn + 1) return false;
                if (!established) rcv_nxt = t.seq + 1;
                established = true;
                peer_window = t.window;
                continue;
            }
            if (t.flags.ack()) {
                // ACK sanity: never beyond what was sent, counting the FIN.
                std::uint32_t limit = snd_end + (fin_sent ? 1 : 0);
                if (seq_lt(limit, t.ack)) {
                    res.why = "ack beyond sent data";
                    return false;
                }
                if (seq_lt(snd_una, t.ack)) snd_una = seq_lt(snd_end, t.ack) ? snd_end : t.ack;
                peer_window = t.window;
            }
            if (!p.payload.empty()) {
                if (t.seq != rcv_nxt) {
                    res.why = "engine sent out of order";
                    return false;
                }
                res.delivered_to_app.insert(res.delivered_to_app.end(), p.payload.begin(), p.payload.end());
                rcv_nxt += static_cast<std::uint32_t>(p.payload.size());
                if (p.payload.size() > c.app_mss) {
                    res.why = "segment above mss";
                    return false;
                }
            }
            if (t.flags.fin() && !peer_fin) {
                if (t.seq + p.payload.size() != rcv_nxt) {
                    res.why = "fin out of place";
                    return false;
                }
                rcv_nxt += 1;
                peer_fin = true;
            }
        }
        return true;
    };

    send(isn, TcpFlags::kSyn);
    rig.settle(10ms);
    if (!absorb() || !established) return fail("handshake: " + res.why);

    for (int round = 0; round < 20000; ++round) {
        // Upload from snd_una, go-back-N, within the engine's window.
        std::vector<std::pair<std::uint32_t, Bytes>> batch;
        std::uint32_t seq = snd_una;
        std::uint32_t window_end = snd_una + std::max<std::uint32_t>(peer_window, 1);
        while (seq_lt(seq, snd_end) && seq_lt(seq, window_end)) {
            std::size_t off = seq - (isn + 1);
            std::size_t n = std::min<std::size_t>({g.range(1, c.app_mss), c.upload.size() - off,
                                                   static_cast<std::size_t>(window_end - seq)});
            batch.emplace_back(seq, Bytes(c.upload.begin() + static_cast<std::ptrdiff_t>(off),
                                          c.upload.begin() + static_cast<std::ptrdiff_t>(off + n)));
            seq += static_cast<std::uint32_t>(n);
        }
        for (std::size_t i = 0; i + 1 < batch.size(); ++i) {
            if (g.coin(c.reorder)) std::swap(batch[i], batch[i + 1]);
        }
        for (const auto& [s, data] : batch) {
            send(s, TcpFlags::kAck | TcpFlags::kPsh, data);
            if (g.coin(c.duplicate)) send(s, TcpFlags::kAck | TcpFlags::kPsh, data);
        }
        if (batch.empty()) send(snd_una + (fin_sent ? 1 : 0), TcpFlags::kAck);

        rig.settle(std::chrono::milliseconds(g.range(0, 3)));
        if (!absorb()) return fail(res.why.empty() ? "engine protocol violation" : res.why);

        bool upload_done = snd_una == snd_end;
        bool download_done = res.delivered_to_app.size() >= expected_back;
        if (upload_done && download_done) {
            if (c.ending == Ending::Rst) {
                send(snd_end, TcpFlags::kRst);
                reset_sent = true;
                break;
            }
            if (!fin_sent) {
                send(snd_end, TcpFlags::kFin | TcpFlags::kAck);
                fin_sent = true;
            }
            rig.settle(10ms);
            if (!absorb()) return fail("teardown: " + res.why);
            if (peer_fin) {
                send(snd_end + 1, TcpFlags::kAck);
                break;
            }
        }
        if (round == 19999) return fail("no convergence");
    }
    (void)reset_sent;

    rig.settle(10ms);
    rig.engine.sweep(rig.clock.now());
    rig.settle(10ms);
    rig.engine.sweep(rig.clock.now());
    if (rig.engine.tcp_flow_count() != 0) return fail("flow survived teardown");
    if (rig.upstream.active_handle_count() != 0) return fail("upstream handle leaked");
    // No resurrection: a late segment for the closed key only ever draws a stateless reset.
    if (!rig.take().empty()) return fail("packet emitted after close");

    const auto& tr = rig.upstream.transcripts();
    if (tr.size() != 1) return fail("expected exactly one upstream stream");
    res.delivered_upstream = tr[0].from_engine;
    if (tr[0].from_engine != c.upload) return fail("upstream transcript differs from app payload");
    if (res.delivered_to_app != tr[0].endpoint_sent) return fail("app transcript differs from endpoint output");
    return res;
}

inline std::string describe(const TcpCase& c) {
    std::ostringstream os;
    os << "upload=" << c.upload.size() << " " << (c.echo ? "echo" : "static") << " response=" << c.response.size()
       << " end=" << (c.ending == Ending::Fin ? "fin" : "rst") << " wnd=" << c.app_window << " mss=" << c.app_mss
       << " reorder=" << c.reorder << " dup=" << c.duplicate;
    return os.str();
}

}  // namespace mbz::testing
