#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbz/engine/config.hpp"
#include "mbz/io/conduit.hpp"
#include "mbz/io/upstream.hpp"
#include "mbz/packet/flow_key.hpp"
#include "mbz/plugin/host.hpp"
#include "mbz/proto/dns.hpp"

namespace mbz {

// Sequence-space helpers (mod 2^32).
inline std::int32_t seq_diff(std::uint32_t a, std::uint32_t b) { return static_cast<std::int32_t>(a - b); }
inline bool seq_lt(std::uint32_t a, std::uint32_t b) { return seq_diff(a, b) < 0; }
inline bool seq_leq(std::uint32_t a, std::uint32_t b) { return seq_diff(a, b) <= 0; }

enum class TcpState : std::uint8_t {
    SynSeen,
    UpstreamConnecting,
    Established,
    AppFinWait,       // app finished sending; waiting on the upstream side
    UpstreamFinWait,  // upstream finished sending; waiting on the app side
    Resetting,
    Closed,
};

inline const char* to_string(TcpState s) {
    switch (s) {
        case TcpState::SynSeen: return "SynSeen";
        case TcpState::UpstreamConnecting: return "UpstreamConnecting";
        case TcpState::Established: return "Established";
        case TcpState::AppFinWait: return "AppFinWait";
        case TcpState::UpstreamFinWait: return "UpstreamFinWait";
        case TcpState::Resetting: return "Resetting";
        case TcpState::Closed: return "Closed";
    }
    return "?";
}

struct TcpFlow {
    FlowKey key;
    std::string app_label;
    TcpState state = TcpState::SynSeen;
    std::uint32_t app_isn = 0;
    std::uint32_t local_isn = 0;
    std::uint32_t next_seq_to_app = 0;
    std::uint32_t app_acked = 0;
    std::uint32_t next_expected_from_app = 0;
    std::uint32_t app_window = 0;
    std::uint16_t mss = 536;
    std::optional<HandleId> stream;
    Endpoint upstream_dst;
    Bytes to_app_buffer;
    Bytes pending_syn_payload;
    Timestamp created{0};
    Timestamp last_activity{0};
    bool app_fin = false;
    bool upstream_eof = false;
    bool fin_sent = false;
    bool fin_acked = false;
    std::uint32_t fin_seq = 0;
    // Answered by the engine itself (InjectResponse); never has an upstream stream.
    bool local_only = false;
    std::uint64_t bytes_to_net = 0;
    std::uint64_t bytes_to_app = 0;
};

struct UdpFlow {
    FlowKey key;
    std::string app_label;
    HandleId handle = 0;
    Endpoint upstream_dst;
    Timestamp created{0};
    Timestamp last_activity{0};
    bool is_dns = false;
};

struct ProtocolCounters {
    std::uint64_t created = 0;
    std::uint64_t evicted = 0;
    std::uint64_t reset = 0;
    std::uint64_t active = 0;
};

struct EngineCounters {
    ProtocolCounters tcp;
    ProtocolCounters udp;
    std::uint64_t packets_from_app = 0;
    std::uint64_t packets_to_app = 0;
    std::uint64_t bytes_to_net = 0;
    std::uint64_t bytes_to_app = 0;
    std::uint64_t malformed_dropped = 0;
    std::uint64_t bad_checksum = 0;
    std::uint64_t unsupported_dropped = 0;
    std::uint64_t out_of_order_dropped = 0;
    std::uint64_t backpressure_drops = 0;
    std::uint64_t budget_exhausted = 0;
    std::uint64_t pressure_evictions = 0;
    std::uint64_t budget_high_water = 0;
    std::uint64_t blocked = 0;
    std::uint64_t redirected = 0;
    std::uint64_t modified = 0;
    std::uint64_t injected = 0;
    std::uint64_t udp_unmatched_replies = 0;
    std::uint64_t oversize_dropped = 0;
    std::uint64_t probes_sent = 0;
    std::uint64_t probes_timed_out = 0;

    nlohmann::json to_json() const {
        auto proto = [](const ProtocolCounters& c) {
            return nlohmann::json{{"created", c.created}, {"evicted", c.evicted}, {"reset", c.reset}, {"active", c.active}};
        };
        return nlohmann::json{
            {"tcp", proto(tcp)},
            {"udp", proto(udp)},
            {"packets_from_app", packets_from_app},
            {"packets_to_app", packets_to_app},
            {"bytes_to_net", bytes_to_net},
            {"bytes_to_app", bytes_to_app},
            {"malformed_dropped", malformed_dropped},
            {"bad_checksum", bad_checksum},
            {"unsupported_dropped", unsupported_dropped},
            {"out_of_order_dropped", out_of_order_dropped},
            {"backpressure_drops", backpressure_drops},
            {"budget_exhausted", budget_exhausted},
            {"pressure_evictions", pressure_evictions},
            {"budget_high_water", budget_high_water},
            {"blocked", blocked},
            {"redirected", redirected},
            {"modified", modified},
            {"injected", injected},
            {"udp_unmatched_replies", udp_unmatched_replies},
            {"oversize_dropped", oversize_dropped},
            {"probes_sent", probes_sent},
            {"probes_timed_out", probes_timed_out},
        };
    }
};

struct SweepReport {
    std::vector<FlowKey> udp_evicted;
    std::vector<FlowKey> tcp_removed;
    std::vector<FlowKey> tcp_timed_out;
    std::size_t pressure_evicted = 0;
};

// Owns the flow table. Every entry point runs on one logical event context.
class Engine final : public ProbeTransport {
public:
    Engine(EngineConfig config, UpstreamNetwork& upstream, PacketConduit& app_side, const Clock& clock,
           PluginHost* host = nullptr)
        : cfg_(config), upstream_(upstream), app_(app_side), clock_(clock), host_(host), isn_rng_(config.isn_seed) {
        cfg_.validate();
        if (host_) host_->set_probe_transport(this);
    }

    ~Engine() override {
        if (host_) host_->set_probe_transport(nullptr);
    }

    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    void on_app_packet(ByteView bytes, std::string_view app_label = {}) {
        auto parsed = parse_packet(bytes, clock_.now());
        if (!parsed) {
            auto failure = std::move(parsed).error();
            if (failure.code != PacketError::BadChecksum || !failure.packet) {
                ++counters_.malformed_dropped;
                return;
            }
            // Offload-zeroed checksums are common in captures; carry on with the parsed packet.
            ++counters_.bad_checksum;
            on_app_packet(*failure.packet, app_label);
            return;
        }
        on_app_packet(parsed.value(), app_label);
    }

    void on_app_packet(const Packet& p, std::string_view app_label = {}) {
        auto key = flow_key_of(p);
        if (!key) {
            ++counters_.unsupported_dropped;
            return;
        }
        ++counters_.packets_from_app;
        if (p.tcp()) {
            handle_tcp(p, *key, app_label);
        } else {
            handle_udp(p, *key, app_label);
        }
    }

    void on_upstream_event(const UpstreamEvent& ev) {
        auto it = owners_.find(ev.handle);
        if (it == owners_.end()) return;
        Owner owner = it->second;
        std::visit(
            [&](const auto& o) {
                using O = std::decay_t<decltype(o)>;
                if constexpr (std::is_same_v<O, TcpOwner>) {
                    on_stream_event(o.key, ev);
                } else if constexpr (std::is_same_v<O, UdpOwner>) {
                    if (ev.kind == UpstreamEventKind::Datagram) deliver_datagram(o.key, ev.data);
                } else if constexpr (std::is_same_v<O, DnsOwner>) {
                    if (ev.kind == UpstreamEventKind::Datagram) on_dns_reply(o.group, ev.data);
                } else if constexpr (std::is_same_v<O, ProbeOwner>) {
                    if (ev.kind == UpstreamEventKind::Datagram) finish_probe(o.id, Bytes(ev.data));
                }
            },
            owner);
    }

    // Periodic housekeeping: idle UDP eviction, TCP clean-up, and budget pressure relief.
    SweepReport sweep(Timestamp now) {
        SweepReport report;
        for (auto it = udp_.begin(); it != udp_.end();) {
            const auto& f = it->second;
            Duration timeout = f.is_dns ? cfg_.dns_timeout : cfg_.udp_timeout;
            if (now - f.last_activity > timeout) {
                report.udp_evicted.push_back(f.key);
                it = evict_udp(it);
            } else {
                ++it;
            }
        }

        for (auto& [key, f] : tcp_) {
            if (f.state == TcpState::UpstreamConnecting && now - f.created > cfg_.connect_timeout) {
                emit_tcp(f.key, 0, f.app_isn + 1, TcpFlags::kRst | TcpFlags::kAck, {}, 0);
                ++counters_.tcp.reset;
                close_tcp(f);
                report.tcp_timed_out.push_back(key);
            } else if ((f.state == TcpState::AppFinWait || f.state == TcpState::UpstreamFinWait) &&
                       now - f.last_activity > cfg_.close_linger) {
                reset_flow(f);
                report.tcp_timed_out.push_back(key);
            }
        }
        remove_closed_tcp(report);

        auto threshold = static_cast<std::size_t>(cfg_.pressure_ratio * static_cast<double>(cfg_.socket_budget));
        while (upstream_.active_handle_count() > threshold && !udp_.empty()) {
            auto victim = std::min_element(udp_.begin(), udp_.end(), [](const auto& a, const auto& b) {
                return a.second.last_activity < b.second.last_activity;
            });
            report.udp_evicted.push_back(victim->first);
            evict_udp(victim);
            ++counters_.pressure_evictions;
            ++report.pressure_evicted;
        }
        // Then half-closed TCP flows with nothing left to deliver. Established flows are never evicted.
        while (upstream_.active_handle_count() > threshold) {
            TcpFlow* victim = nullptr;
            for (auto& [_, f] : tcp_) {
                bool idle_closing = (f.state == TcpState::AppFinWait || f.state == TcpState::UpstreamFinWait) &&
                                    f.stream && f.to_app_buffer.empty();
                if (idle_closing && (!victim || f.last_activity < victim->last_activity)) victim = &f;
            }
            if (!victim) break;
            reset_flow(*victim);
            ++counters_.pressure_evictions;
            ++report.pressure_evicted;
        }
        remove_closed_tcp(report);

        expire_probes(now);
        if (host_) host_->governor_tick(now);
        return report;
    }

    std::optional<Timestamp> next_deadline() const {
        std::optional<Timestamp> best;
        for (const auto& [_, p] : probes_) {
            if (!best || p.deadline < *best) best = p.deadline;
        }
        return best;
    }

    void on_deadline(Timestamp now) { expire_probes(now); }

    std::optional<ProbeId> open_probe(PluginHandle plugin, const Endpoint& target, ByteView payload,
                                      Duration timeout) override {
        if (upstream_.active_handle_count() >= cfg_.socket_budget) {
            ++counters_.budget_exhausted;
            return std::nullopt;
        }
        auto h = upstream_.open_datagram();
        if (!h) return std::nullopt;
        note_handle_opened();
        ProbeId id = next_probe_++;
        Timestamp now = clock_.now();
        probes_.emplace(id, Probe{plugin, *h, target, now, now + timeout});
        owners_[*h] = ProbeOwner{id};
        upstream_.send_to(*h, target, payload);
        ++counters_.probes_sent;
        return id;
    }

    EngineCounters counters() const {
        EngineCounters c = counters_;
        c.tcp.active = static_cast<std::uint64_t>(std::count_if(
            tcp_.begin(), tcp_.end(), [](const auto& kv) { return kv.second.state != TcpState::Closed; }));
        c.udp.active = udp_.size();
        return c;
    }

    const TcpFlow* tcp_flow(const FlowKey& k) const {
        auto it = tcp_.find(k);
        return it == tcp_.end() ? nullptr : &it->second;
    }
    const UdpFlow* udp_flow(const FlowKey& k) const {
        auto it = udp_.find(k);
        return it == udp_.end() ? nullptr : &it->second;
    }
    std::size_t tcp_flow_count() const { return tcp_.size(); }
    std::size_t udp_flow_count() const { return udp_.size(); }
    std::size_t pending_probes() const { return probes_.size(); }
    const EngineConfig& config() const { return cfg_; }

private:
    struct TcpOwner {
        FlowKey key;
    };
    struct UdpOwner {
        FlowKey key;
    };
    using DnsGroupKey = std::pair<Ipv4Address, Endpoint>;
    struct DnsOwner {
        DnsGroupKey group;
    };
    struct ProbeOwner {
        ProbeId id;
    };
    using Owner = std::variant<TcpOwner, UdpOwner, DnsOwner, ProbeOwner>;

    // One upstream datagram handle shared by every DNS flow from one app address to one resolver.
    struct DnsGroup {
        HandleId handle = 0;
        std::size_t refs = 0;
        std::map<std::uint16_t, FlowKey> pending;  // DNS transaction id -> app flow
    };

    struct Probe {
        PluginHandle plugin = 0;
        HandleId handle = 0;
        Endpoint target;
        Timestamp sent{0};
        Timestamp deadline{0};
    };

    // ---- plugin chain -------------------------------------------------------------------

    EffectiveAction consult(const FlowKey& key, std::string_view app, Direction dir, EventKind kind,
                            ByteView payload, TcpFlags flags = {}, std::uint32_t seq = 0) {
        if (!host_ || host_->size() == 0) return {};
        PluginContext ctx;
        ctx.key = key;
        ctx.app_label = app;
        ctx.direction = dir;
        ctx.kind = kind;
        ctx.clock = clock_.now();
        ctx.tcp_flags = flags;
        ctx.seq = seq;
        auto result = host_->chain_apply(ctx, payload);
        switch (result.action.verdict.index()) {
            case 1: ++counters_.modified; break;
            case 2: ++counters_.blocked; break;
            case 3: ++counters_.redirected; break;
            default: break;
        }
        return std::move(result.action);
    }

    void notify_close(const FlowKey& key, std::string_view app) {
        if (host_ && host_->size() > 0) consult(key, app, Direction::AppToNet, EventKind::FlowClose, {});
    }

    // ---- emission -----------------------------------------------------------------------

    void emit(const Packet& p) {
        auto bytes = serialize_packet(p, cfg_.mtu);
        if (!bytes) {
            ++counters_.oversize_dropped;
            return;
        }
        app_.write_packet(*bytes);
        ++counters_.packets_to_app;
    }

    // Segment toward the app for flow key k (which is oriented app -> network).
    void emit_tcp(const FlowKey& k, std::uint32_t seq, std::uint32_t ack, std::uint8_t flags, ByteView payload,
                  std::uint16_t window, std::optional<std::uint16_t> mss = std::nullopt) {
        Packet p;
        p.ip.identification = next_ip_id_++;
        p.ip.protocol = kProtoTcp;
        p.ip.src_addr = k.dst.addr;
        p.ip.dst_addr = k.src.addr;
        TcpHeader tcp;
        tcp.src_port = k.dst.port;
        tcp.dst_port = k.src.port;
        tcp.seq = seq;
        tcp.ack = ack;
        tcp.flags.bits = flags;
        tcp.window = window;
        if (mss) tcp.options = mss_option(*mss);
        p.transport = std::move(tcp);
        p.payload.assign(payload.begin(), payload.end());
        emit(p);
    }

    void emit_udp(const FlowKey& k, ByteView payload) {
        Packet p;
        p.ip.identification = next_ip_id_++;
        p.ip.protocol = kProtoUdp;
        p.ip.src_addr = k.dst.addr;
        p.ip.dst_addr = k.src.addr;
        p.transport = UdpHeader{k.dst.port, k.src.port, 0, 0};
        p.payload.assign(payload.begin(), payload.end());
        emit(p);
    }

    std::uint16_t advertised_window(const TcpFlow& f) const {
        std::size_t queued = f.stream ? upstream_.send_queue_size(*f.stream) : 0;
        std::size_t room = queued >= cfg_.buffer_capacity ? 0 : cfg_.buffer_capacity - queued;
        return static_cast<std::uint16_t>(std::min<std::size_t>(room, 0xFFFF));
    }

    void emit_ack(const TcpFlow& f) {
        emit_tcp(f.key, f.next_seq_to_app, f.next_expected_from_app, TcpFlags::kAck, {}, advertised_window(f));
    }

    // RST for a segment that matches no connection state.
    void emit_stateless_rst(const Packet& p, const FlowKey& key) {
        const auto& tcp = *p.tcp();
        if (tcp.flags.ack()) {
            emit_tcp(key, tcp.ack, 0, TcpFlags::kRst, {}, 0);
        } else {
            std::uint32_t len = static_cast<std::uint32_t>(p.payload.size()) + (tcp.flags.syn() ? 1 : 0) +
                                (tcp.flags.fin() ? 1 : 0);
            emit_tcp(key, 0, tcp.seq + len, TcpFlags::kRst | TcpFlags::kAck, {}, 0);
        }
        ++counters_.tcp.reset;
    }

    void note_handle_opened() {
        counters_.budget_high_water =
            std::max<std::uint64_t>(counters_.budget_high_water, upstream_.active_handle_count());
    }

    bool budget_available() {
        if (upstream_.active_handle_count() < cfg_.socket_budget) return true;
        ++counters_.budget_exhausted;
        return false;
    }

    std::uint32_t choose_isn() {
        if (cfg_.fixed_isn) return *cfg_.fixed_isn;
        return static_cast<std::uint32_t>(isn_rng_());
    }

    // ---- TCP ----------------------------------------------------------------------------

    void handle_tcp(const Packet& p, const FlowKey& key, std::string_view app) {
        const auto& tcp = *p.tcp();
        bool bare_syn = tcp.flags.syn() && !tcp.flags.ack();
        auto it = tcp_.find(key);
        if (it != tcp_.end() && it->second.state == TcpState::Closed) {
            if (!bare_syn) return;  // nothing is ever emitted for a closed flow
            notify_close(key, it->second.app_label);
            tcp_.erase(it);
            it = tcp_.end();
        }
        if (it == tcp_.end()) {
            if (tcp.flags.rst()) return;
            if (bare_syn) {
                handle_tcp_syn(p, key, app);
            } else {
                emit_stateless_rst(p, key);
            }
            return;
        }

        TcpFlow& f = it->second;
        f.last_activity = clock_.now();
        if (bare_syn) {
            // Retransmitted SYN: absorbed while connecting, answered again once established.
            if (tcp.seq == f.app_isn && f.state == TcpState::Established && f.next_seq_to_app == f.local_isn + 1) {
                emit_tcp(f.key, f.local_isn, f.app_isn + 1, TcpFlags::kSyn | TcpFlags::kAck, {},
                         advertised_window(f), f.mss);
            }
            return;
        }

        Bytes upstream_payload = p.payload;
        if (!tcp.flags.rst()) {
            auto action = consult(key, f.app_label, Direction::AppToNet, EventKind::PacketOut, p.payload, tcp.flags,
                                  tcp.seq);
            auto& v = action.verdict;
            if (auto* b = std::get_if<BlockVerdict>(&v)) {
                switch (b->mode) {
                    case BlockMode::DropSilent: return;
                    case BlockMode::ResetApp: reset_flow(f); return;
                    case BlockMode::InjectResponse: inject_on_established(f, p, std::move(b->response)); return;
                }
            }
            if (auto* m = std::get_if<ModifyVerdict>(&v)) upstream_payload = std::move(m->payload);
            // Redirect cannot move an established stream; it only applies at flow open.
        }
        handle_tcp_segment(f, p, upstream_payload);
    }

    void handle_tcp_syn(const Packet& p, const FlowKey& key, std::string_view app) {
        const auto& tcp = *p.tcp();
        Endpoint upstream_dst = key.dst;
        Bytes syn_payload = p.payload;

        auto action = consult(key, app, Direction::AppToNet, EventKind::FlowOpen, p.payload, tcp.flags, tcp.seq);
        auto& v = action.verdict;
        std::optional<Bytes> local_response;
        if (auto* b = std::get_if<BlockVerdict>(&v)) {
            if (b->mode == BlockMode::DropSilent) return;
            if (b->mode == BlockMode::ResetApp) {
                emit_tcp(key, 0, tcp.seq + 1 + static_cast<std::uint32_t>(p.payload.size()),
                         TcpFlags::kRst | TcpFlags::kAck, {}, 0);
                ++counters_.tcp.reset;
                return;
            }
            local_response = std::move(b->response);
        } else if (auto* r = std::get_if<RedirectVerdict>(&v)) {
            upstream_dst = r->target;
        } else if (auto* m = std::get_if<ModifyVerdict>(&v)) {
            syn_payload = std::move(m->payload);
        }

        TcpFlow f;
        f.key = key;
        f.app_label = std::string(app);
        f.app_isn = tcp.seq;
        f.local_isn = choose_isn();
        f.next_expected_from_app = tcp.seq + 1;
        f.next_seq_to_app = f.local_isn;
        f.app_acked = f.local_isn;
        f.app_window = tcp.window;
        std::uint16_t mtu_mss = static_cast<std::uint16_t>(cfg_.mtu - kIpv4MinHeader - kTcpMinHeader);
        f.mss = std::min<std::uint16_t>(tcp.mss().value_or(cfg_.default_mss), mtu_mss);
        f.upstream_dst = upstream_dst;
        f.created = f.last_activity = clock_.now();

        if (local_response) {
            // Answered locally: handshake, read the request, reply with the notice, close.
            f.local_only = true;
            f.to_app_buffer = std::move(*local_response);
            ++counters_.injected;
            ++counters_.tcp.created;
            auto& flow = tcp_.emplace(key, std::move(f)).first->second;
            establish(flow);
            if (!syn_payload.empty()) {
                flow.next_expected_from_app += static_cast<std::uint32_t>(syn_payload.size());
                emit_ack(flow);
            }
            flow.upstream_eof = !syn_payload.empty();
            flush_to_app(flow);
            return;
        }

        if (!budget_available()) {
            emit_tcp(key, 0, tcp.seq + 1, TcpFlags::kRst | TcpFlags::kAck, {}, 0);
            ++counters_.tcp.reset;
            return;
        }
        auto h = upstream_.open_stream(upstream_dst);
        if (!h) {
            ++counters_.budget_exhausted;
            emit_tcp(key, 0, tcp.seq + 1, TcpFlags::kRst | TcpFlags::kAck, {}, 0);
            ++counters_.tcp.reset;
            return;
        }
        note_handle_opened();
        f.stream = *h;
        f.pending_syn_payload = std::move(syn_payload);
        f.state = TcpState::UpstreamConnecting;
        owners_[*h] = TcpOwner{key};
        ++counters_.tcp.created;
        tcp_.emplace(key, std::move(f));
    }

    void establish(TcpFlow& f) {
        f.state = TcpState::Established;
        emit_tcp(f.key, f.local_isn, f.app_isn + 1, TcpFlags::kSyn | TcpFlags::kAck, {}, advertised_window(f), f.mss);
        f.next_seq_to_app = f.local_isn + 1;
        f.app_acked = f.local_isn + 1;
    }

    void handle_tcp_segment(TcpFlow& f, const Packet& p, ByteView upstream_payload) {
        const auto& tcp = *p.tcp();
        if (tcp.flags.rst()) {
            close_tcp(f);
            return;
        }
        if (tcp.flags.ack()) {
            f.app_window = tcp.window;
            if (seq_lt(f.app_acked, tcp.ack) && seq_leq(tcp.ack, f.next_seq_to_app)) f.app_acked = tcp.ack;
            if (f.fin_sent && seq_leq(f.fin_seq + 1, tcp.ack) && seq_leq(tcp.ack, f.next_seq_to_app)) f.fin_acked = true;
        }

        bool need_ack = false;
        auto seg_len = static_cast<std::uint32_t>(p.payload.size());
        bool receiving = f.state == TcpState::Established || f.state == TcpState::UpstreamFinWait;
        if (seg_len > 0) {
            if (receiving && !f.app_fin) {
                std::int32_t offset = seq_diff(f.next_expected_from_app, tcp.seq);
                if (offset >= 0 && static_cast<std::uint32_t>(offset) < seg_len) {
                    std::uint32_t fresh = seg_len - static_cast<std::uint32_t>(offset);
                    std::size_t queued = f.stream ? upstream_.send_queue_size(*f.stream) : 0;
                    if (queued + fresh > cfg_.buffer_capacity) {
                        ++counters_.backpressure_drops;
                    } else {
                        std::size_t skip = std::min<std::size_t>(static_cast<std::size_t>(offset), upstream_payload.size());
                        auto data = upstream_payload.subspan(skip);
                        if (f.stream && !data.empty()) {
                            upstream_.send(*f.stream, data);
                            f.bytes_to_net += data.size();
                            counters_.bytes_to_net += data.size();
                        }
                        f.next_expected_from_app += fresh;
                        if (f.local_only && !f.upstream_eof) f.upstream_eof = true;
                    }
                } else if (offset < 0) {
                    ++counters_.out_of_order_dropped;
                }
            }
            need_ack = f.state != TcpState::UpstreamConnecting && f.state != TcpState::SynSeen;
        }

        if (tcp.flags.fin() && f.state != TcpState::UpstreamConnecting) {
            std::uint32_t fin_pos = tcp.seq + seg_len;
            if (!f.app_fin && fin_pos == f.next_expected_from_app) {
                f.app_fin = true;
                f.next_expected_from_app += 1;
                if (f.stream) upstream_.shutdown_write(*f.stream);
                if (f.local_only) f.upstream_eof = true;
                need_ack = true;
            } else if (f.app_fin && fin_pos + 1 == f.next_expected_from_app) {
                need_ack = true;
            }
        }

        if (need_ack) emit_ack(f);
        flush_to_app(f);
    }

    void inject_on_established(TcpFlow& f, const Packet& p, Bytes response) {
        ++counters_.injected;
        f.next_expected_from_app = p.tcp()->seq + static_cast<std::uint32_t>(p.payload.size());
        if (f.stream) {
            upstream_.close(*f.stream);
            owners_.erase(*f.stream);
            f.stream.reset();
        }
        f.local_only = true;
        f.to_app_buffer = std::move(response);
        f.upstream_eof = true;
        if (f.state == TcpState::Established) emit_ack(f);
        flush_to_app(f);
    }

    void on_stream_event(const FlowKey& key, const UpstreamEvent& ev) {
        auto it = tcp_.find(key);
        if (it == tcp_.end()) return;
        TcpFlow& f = it->second;
        if (f.state == TcpState::Closed) return;
        switch (ev.kind) {
            case UpstreamEventKind::Connected: {
                if (f.state != TcpState::UpstreamConnecting) return;
                auto action = consult(key, f.app_label, Direction::NetToApp, EventKind::PacketIn, {},
                                      TcpFlags{TcpFlags::kSyn | TcpFlags::kAck}, f.local_isn);
                if (std::holds_alternative<BlockVerdict>(action.verdict)) {
                    emit_tcp(key, 0, f.app_isn + 1, TcpFlags::kRst | TcpFlags::kAck, {}, 0);
                    ++counters_.tcp.reset;
                    close_tcp(f);
                    return;
                }
                establish(f);
                f.last_activity = clock_.now();
                if (!f.pending_syn_payload.empty()) {
                    upstream_.send(*f.stream, f.pending_syn_payload);
                    f.bytes_to_net += f.pending_syn_payload.size();
                    counters_.bytes_to_net += f.pending_syn_payload.size();
                    f.next_expected_from_app += static_cast<std::uint32_t>(f.pending_syn_payload.size());
                    f.pending_syn_payload.clear();
                    emit_ack(f);
                }
                flush_to_app(f);
                break;
            }
            case UpstreamEventKind::ConnectRefused:
                emit_tcp(key, 0, f.app_isn + 1, TcpFlags::kRst | TcpFlags::kAck, {}, 0);
                ++counters_.tcp.reset;
                close_tcp(f);
                break;
            case UpstreamEventKind::Readable:
                f.last_activity = clock_.now();
                flush_to_app(f);
                break;
            case UpstreamEventKind::Reset:
                reset_flow(f);
                break;
            case UpstreamEventKind::Datagram:
                break;
        }
    }

    // Tops the to-app buffer up from the stream, running inbound data past the chain.
    // Returns false when the flow was torn down by a verdict.
    bool pull_upstream(TcpFlow& f) {
        if (!f.stream || f.upstream_eof || f.state == TcpState::UpstreamConnecting) return true;
        std::size_t room = cfg_.buffer_capacity > f.to_app_buffer.size() ? cfg_.buffer_capacity - f.to_app_buffer.size() : 0;
        if (room > 0) {
            auto r = upstream_.receive(*f.stream, room);
            if (!r.data.empty()) {
                auto action = consult(f.key, f.app_label, Direction::NetToApp, EventKind::PacketIn, r.data,
                                      TcpFlags{TcpFlags::kAck}, f.next_seq_to_app);
                if (auto* b = std::get_if<BlockVerdict>(&action.verdict)) {
                    if (b->mode != BlockMode::DropSilent) {
                        reset_flow(f);
                        return false;
                    }
                    r.data.clear();
                } else if (auto* m = std::get_if<ModifyVerdict>(&action.verdict)) {
                    r.data = std::move(m->payload);
                }
                f.to_app_buffer.insert(f.to_app_buffer.end(), r.data.begin(), r.data.end());
            }
            if (r.eof) f.upstream_eof = true;
        }
        upstream_.set_read_interest(*f.stream, f.to_app_buffer.size() < cfg_.buffer_capacity);
        return true;
    }

    void flush_to_app(TcpFlow& f) {
        if (f.state == TcpState::Closed || f.state == TcpState::UpstreamConnecting || f.state == TcpState::SynSeen) return;
        while (true) {
            if (f.to_app_buffer.empty() && !pull_upstream(f)) return;
            if (f.to_app_buffer.empty()) break;
            std::uint32_t in_flight = f.next_seq_to_app - f.app_acked;
            std::uint32_t room = f.app_window > in_flight ? f.app_window - in_flight : 0;
            std::size_t n = std::min<std::size_t>({f.mss, f.to_app_buffer.size(), room});
            if (n == 0) break;
            emit_tcp(f.key, f.next_seq_to_app, f.next_expected_from_app, TcpFlags::kPsh | TcpFlags::kAck,
                     ByteView(f.to_app_buffer.data(), n), advertised_window(f));
            f.next_seq_to_app += static_cast<std::uint32_t>(n);
            f.bytes_to_app += n;
            counters_.bytes_to_app += n;
            f.to_app_buffer.erase(f.to_app_buffer.begin(), f.to_app_buffer.begin() + static_cast<std::ptrdiff_t>(n));
            if (f.to_app_buffer.empty() && !pull_upstream(f)) return;
        }
        if (f.upstream_eof && f.to_app_buffer.empty() && !f.fin_sent) {
            f.fin_seq = f.next_seq_to_app;
            emit_tcp(f.key, f.fin_seq, f.next_expected_from_app, TcpFlags::kFin | TcpFlags::kAck, {},
                     advertised_window(f));
            f.next_seq_to_app += 1;
            f.fin_sent = true;
        }
        update_state(f);
    }

    void update_state(TcpFlow& f) {
        if (f.state == TcpState::Closed) return;
        if (f.app_fin && f.fin_sent && f.fin_acked) {
            close_tcp(f);
            return;
        }
        if (f.state == TcpState::Established) {
            if (f.app_fin) {
                f.state = TcpState::AppFinWait;
            } else if (f.upstream_eof) {
                f.state = TcpState::UpstreamFinWait;
            }
        }
    }

    void reset_flow(TcpFlow& f) {
        f.state = TcpState::Resetting;
        emit_tcp(f.key, f.next_seq_to_app, f.next_expected_from_app, TcpFlags::kRst | TcpFlags::kAck, {}, 0);
        ++counters_.tcp.reset;
        close_tcp(f);
    }

    void close_tcp(TcpFlow& f) {
        if (f.stream) {
            upstream_.close(*f.stream);
            owners_.erase(*f.stream);
            f.stream.reset();
        }
        f.to_app_buffer.clear();
        f.state = TcpState::Closed;
    }

    void remove_closed_tcp(SweepReport& report) {
        for (auto it = tcp_.begin(); it != tcp_.end();) {
            if (it->second.state == TcpState::Closed) {
                report.tcp_removed.push_back(it->first);
                notify_close(it->first, it->second.app_label);
                it = tcp_.erase(it);
            } else {
                ++it;
            }
        }
    }

    // ---- UDP ----------------------------------------------------------------------------

    void handle_udp(const Packet& p, const FlowKey& key, std::string_view app) {
        auto it = udp_.find(key);
        bool fresh = it == udp_.end();
        auto action = consult(key, fresh ? app : std::string_view(it->second.app_label), Direction::AppToNet,
                              fresh ? EventKind::FlowOpen : EventKind::PacketOut, p.payload);
        Bytes payload = p.payload;
        Endpoint target = fresh ? key.dst : it->second.upstream_dst;
        auto& v = action.verdict;
        if (auto* b = std::get_if<BlockVerdict>(&v)) {
            if (b->mode == BlockMode::InjectResponse) {
                ++counters_.injected;
                emit_udp(key, b->response);
            }
            return;
        }
        if (auto* r = std::get_if<RedirectVerdict>(&v)) target = r->target;
        if (auto* m = std::get_if<ModifyVerdict>(&v)) payload = std::move(m->payload);

        if (fresh) {
            UdpFlow f;
            f.key = key;
            f.app_label = std::string(app);
            f.upstream_dst = target;
            f.is_dns = key.dst.port == dns::kPort;
            f.created = clock_.now();
            if (f.is_dns) {
                DnsGroupKey gk{key.src.addr, target};
                auto g = dns_groups_.find(gk);
                if (g == dns_groups_.end()) {
                    if (!budget_available()) return;
                    auto h = upstream_.open_datagram();
                    if (!h) return;
                    note_handle_opened();
                    g = dns_groups_.emplace(gk, DnsGroup{*h, 0, {}}).first;
                    owners_[*h] = DnsOwner{gk};
                }
                ++g->second.refs;
                f.handle = g->second.handle;
            } else {
                if (!budget_available()) return;
                auto h = upstream_.open_datagram();
                if (!h) return;
                note_handle_opened();
                f.handle = *h;
                owners_[*h] = UdpOwner{key};
            }
            ++counters_.udp.created;
            it = udp_.emplace(key, std::move(f)).first;
        }

        UdpFlow& f = it->second;
        f.upstream_dst = target;
        f.last_activity = clock_.now();
        if (f.is_dns && payload.size() >= 2) {
            dns_groups_[{key.src.addr, f.upstream_dst}].pending[load_be16(payload, 0)] = key;
        }
        upstream_.send_to(f.handle, f.upstream_dst, payload);
        counters_.bytes_to_net += payload.size();
    }

    void on_dns_reply(const DnsGroupKey& gk, ByteView data) {
        auto g = dns_groups_.find(gk);
        if (g == dns_groups_.end() || data.size() < 2) return;
        auto p = g->second.pending.find(load_be16(data, 0));
        if (p == g->second.pending.end()) {
            ++counters_.udp_unmatched_replies;
            return;
        }
        FlowKey key = p->second;
        g->second.pending.erase(p);
        deliver_datagram(key, data);
    }

    void deliver_datagram(const FlowKey& key, ByteView data) {
        auto it = udp_.find(key);
        if (it == udp_.end()) return;
        UdpFlow& f = it->second;
        f.last_activity = clock_.now();
        Bytes payload(data.begin(), data.end());
        auto action = consult(key, f.app_label, Direction::NetToApp, EventKind::PacketIn, payload);
        if (std::holds_alternative<BlockVerdict>(action.verdict)) return;
        if (auto* m = std::get_if<ModifyVerdict>(&action.verdict)) payload = std::move(m->payload);
        counters_.bytes_to_app += payload.size();
        emit_udp(key, payload);
    }

    std::map<FlowKey, UdpFlow>::iterator evict_udp(std::map<FlowKey, UdpFlow>::iterator it) {
        UdpFlow& f = it->second;
        if (f.is_dns) {
            DnsGroupKey gk{f.key.src.addr, f.upstream_dst};
            auto g = dns_groups_.find(gk);
            if (g != dns_groups_.end()) {
                auto& pending = g->second.pending;
                for (auto p = pending.begin(); p != pending.end();) {
                    p = p->second == f.key ? pending.erase(p) : std::next(p);
                }
                if (--g->second.refs == 0) {
                    upstream_.close(g->second.handle);
                    owners_.erase(g->second.handle);
                    dns_groups_.erase(g);
                }
            }
        } else {
            upstream_.close(f.handle);
            owners_.erase(f.handle);
        }
        ++counters_.udp.evicted;
        FlowKey key = f.key;
        std::string app = f.app_label;
        auto next = udp_.erase(it);
        notify_close(key, app);
        return next;
    }

    // ---- probes -------------------------------------------------------------------------

    void finish_probe(ProbeId id, std::optional<Bytes> response) {
        auto it = probes_.find(id);
        if (it == probes_.end()) return;
        Probe probe = it->second;
        probes_.erase(it);
        upstream_.close(probe.handle);
        owners_.erase(probe.handle);
        if (!response) ++counters_.probes_timed_out;
        ProbeResult result{id, probe.target, std::move(response), clock_.now() - probe.sent};
        if (host_) host_->deliver_probe_result(probe.plugin, result);
    }

    void expire_probes(Timestamp now) {
        std::vector<ProbeId> due;
        for (const auto& [id, p] : probes_) {
            if (p.deadline <= now) due.push_back(id);
        }
        for (auto id : due) finish_probe(id, std::nullopt);
    }

    EngineConfig cfg_;
    UpstreamNetwork& upstream_;
    PacketConduit& app_;
    const Clock& clock_;
    PluginHost* host_;
    std::mt19937 isn_rng_;
    std::uint16_t next_ip_id_ = 1;
    ProbeId next_probe_ = 1;
    EngineCounters counters_;
    std::map<FlowKey, TcpFlow> tcp_;
    std::map<FlowKey, UdpFlow> udp_;
    std::map<DnsGroupKey, DnsGroup> dns_groups_;
    std::map<ProbeId, Probe> probes_;
    std::unordered_map<HandleId, Owner> owners_;
};

}  // namespace mbz
