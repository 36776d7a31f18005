#pragma once

#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "mbz/core/error.hpp"
#include "mbz/io/upstream.hpp"
#include "mbz/proto/dns.hpp"

namespace mbz {

struct DnsTamper {
    // Answer NXDOMAIN lookups with this address instead (ISP "search assist" style).
    std::optional<Ipv4Address> nxdomain_redirect;
    std::map<std::string, std::vector<Ipv4Address>> overrides;
    std::set<std::string> force_nxdomain;
};

struct EchoBehavior {
    Duration delay{0};
};

struct StaticResponseBehavior {
    Bytes response;
    Duration delay{0};
};

struct DnsResponderBehavior {
    std::map<std::string, std::vector<Ipv4Address>> answers;
    Duration delay{0};
    DnsTamper tamper;
};

struct BlackholeBehavior {};
struct ResetOnConnectBehavior {};

using EndpointBehavior = std::variant<EchoBehavior, StaticResponseBehavior, DnsResponderBehavior, BlackholeBehavior,
                                      ResetOnConnectBehavior>;

struct SimEndpointScript {
    Cidr match;
    std::optional<std::uint16_t> port;  // nullopt matches every port
    EndpointBehavior behavior = BlackholeBehavior{};
    Duration connect_delay{500};
    Duration jitter{0};  // uniform extra delay, drawn from the seeded generator

    bool matches(const Endpoint& e) const { return match.contains(e.addr) && (!port || *port == e.port); }
};

struct StreamTranscript {
    HandleId handle = 0;
    Endpoint dst;
    Bytes from_engine;    // everything the endpoint received
    Bytes endpoint_sent;  // everything the endpoint produced
    bool refused = false;
    bool engine_half_closed = false;
    bool closed = false;
};

struct DatagramRecord {
    Timestamp at{0};
    HandleId handle = 0;
    Endpoint dst;
    Bytes payload;
};

inline std::optional<Bytes> answer_dns_query(const DnsResponderBehavior& b, ByteView query) {
    auto q = dns::parse(query);
    if (!q || q->is_response() || q->questions.empty()) return std::nullopt;
    const auto& question = q->questions.front();
    const auto& name = question.name;
    std::uint8_t rcode = dns::kRcodeNoError;
    std::vector<Ipv4Address> addrs;
    if (b.tamper.force_nxdomain.count(name)) {
        rcode = dns::kRcodeNxDomain;
    } else if (auto o = b.tamper.overrides.find(name); o != b.tamper.overrides.end()) {
        addrs = o->second;
    } else if (auto a = b.answers.find(name); a != b.answers.end()) {
        if (question.qtype == dns::kTypeA) addrs = a->second;
    } else if (b.tamper.nxdomain_redirect) {
        addrs = {*b.tamper.nxdomain_redirect};
    } else {
        rcode = dns::kRcodeNxDomain;
    }
    return dns::serialize(dns::make_response(*q, rcode, addrs));
}

// Scripted remote endpoints driven by a (usually virtual) clock. Identical scripts, seed
// and call sequence yield identical event streams.
class SimUpstream final : public UpstreamNetwork {
public:
    SimUpstream(std::vector<SimEndpointScript> scripts, std::uint64_t seed, const Clock& clock)
        : scripts_(std::move(scripts)), rng_(seed), clock_(clock) {
        for (std::size_t i = 0; i < scripts_.size(); ++i) {
            for (std::size_t j = i + 1; j < scripts_.size(); ++j) {
                const auto& a = scripts_[i];
                const auto& b = scripts_[j];
                bool ports_overlap = !a.port || !b.port || *a.port == *b.port;
                if (ports_overlap && a.match.overlaps(b.match)) {
                    throw Error(ErrorCode::OverlappingScripts,
                                "script " + std::to_string(i) + " (" + a.match.to_string() + ") overlaps script " +
                                    std::to_string(j) + " (" + b.match.to_string() + ")");
                }
            }
        }
    }

    std::optional<HandleId> open_stream(const Endpoint& dst) override {
        HandleId h = next_handle_++;
        Stream s;
        s.dst = dst;
        s.script = find_script(dst);
        streams_.emplace(h, s);
        transcript_index_[h] = transcripts_.size();
        transcripts_.push_back(StreamTranscript{h, dst, {}, {}, false, false, false});
        if (s.script) {
            auto when = schedule_time(h, s.script->connect_delay, *s.script);
            if (std::holds_alternative<ResetOnConnectBehavior>(s.script->behavior)) {
                schedule(when, h, Kind::Refuse);
                transcripts_.back().refused = true;
            } else if (!std::holds_alternative<BlackholeBehavior>(s.script->behavior)) {
                schedule(when, h, Kind::Connect);
            }
        }
        return h;
    }

    void send(HandleId h, ByteView data) override {
        auto it = streams_.find(h);
        if (it == streams_.end() || data.empty()) return;
        auto& s = it->second;
        auto& t = transcripts_[transcript_index_[h]];
        t.from_engine.insert(t.from_engine.end(), data.begin(), data.end());
        if (!s.connected || !s.script) return;
        std::visit(
            [&](const auto& b) {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, EchoBehavior>) {
                    emit_stream(h, s, b.delay, Bytes(data.begin(), data.end()));
                } else if constexpr (std::is_same_v<B, StaticResponseBehavior>) {
                    if (!s.responded) {
                        s.responded = true;
                        emit_stream(h, s, b.delay, b.response);
                        schedule(schedule_time(h, b.delay, *s.script), h, Kind::Eof);
                    }
                } else if constexpr (std::is_same_v<B, DnsResponderBehavior>) {
                    // DNS over TCP: two-octet length prefix per message.
                    s.inbound.insert(s.inbound.end(), data.begin(), data.end());
                    while (s.inbound.size() >= 2) {
                        std::size_t len = load_be16(s.inbound, 0);
                        if (s.inbound.size() < 2 + len) break;
                        Bytes msg(s.inbound.begin() + 2, s.inbound.begin() + 2 + static_cast<std::ptrdiff_t>(len));
                        s.inbound.erase(s.inbound.begin(), s.inbound.begin() + 2 + static_cast<std::ptrdiff_t>(len));
                        if (auto answer = answer_dns_query(b, msg)) {
                            Bytes framed;
                            store_be16(framed, static_cast<std::uint16_t>(answer->size()));
                            framed.insert(framed.end(), answer->begin(), answer->end());
                            emit_stream(h, s, b.delay, std::move(framed));
                        }
                    }
                }
            },
            s.script->behavior);
    }

    ReceiveResult receive(HandleId h, std::size_t max_bytes) override {
        ReceiveResult r;
        auto it = streams_.find(h);
        if (it == streams_.end()) return r;
        auto& s = it->second;
        std::size_t n = std::min(max_bytes, s.readable.size());
        r.data.assign(s.readable.begin(), s.readable.begin() + static_cast<std::ptrdiff_t>(n));
        s.readable.erase(s.readable.begin(), s.readable.begin() + static_cast<std::ptrdiff_t>(n));
        r.eof = s.eof_arrived && s.readable.empty();
        return r;
    }

    void shutdown_write(HandleId h) override {
        auto it = streams_.find(h);
        if (it == streams_.end()) return;
        auto& s = it->second;
        if (s.engine_shutdown) return;
        s.engine_shutdown = true;
        transcripts_[transcript_index_[h]].engine_half_closed = true;
        if (!s.script || !s.connected) return;
        if (std::holds_alternative<EchoBehavior>(s.script->behavior) ||
            std::holds_alternative<DnsResponderBehavior>(s.script->behavior)) {
            schedule(schedule_time(h, delay_of(*s.script), *s.script), h, Kind::Eof);
        } else if (auto* st = std::get_if<StaticResponseBehavior>(&s.script->behavior); st && !s.responded) {
            s.responded = true;
            schedule(schedule_time(h, st->delay, *s.script), h, Kind::Eof);
        }
    }

    std::optional<HandleId> open_datagram() override {
        HandleId h = next_handle_++;
        datagrams_.emplace(h, DatagramSocket{static_cast<std::uint16_t>(std::uniform_int_distribution<int>(49152, 65535)(rng_))});
        return h;
    }

    void send_to(HandleId h, const Endpoint& dst, ByteView data) override {
        if (!datagrams_.count(h)) return;
        datagram_log_.push_back(DatagramRecord{clock_.now(), h, dst, Bytes(data.begin(), data.end())});
        const auto* script = find_script(dst);
        if (!script) return;
        std::optional<Bytes> reply;
        Duration delay{0};
        std::visit(
            [&](const auto& b) {
                using B = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<B, EchoBehavior>) {
                    reply = Bytes(data.begin(), data.end());
                    delay = b.delay;
                } else if constexpr (std::is_same_v<B, StaticResponseBehavior>) {
                    reply = b.response;
                    delay = b.delay;
                } else if constexpr (std::is_same_v<B, DnsResponderBehavior>) {
                    reply = answer_dns_query(b, data);
                    delay = b.delay;
                }
            },
            script->behavior);
        if (reply) schedule(schedule_time(h, delay, *script), h, Kind::Datagram, std::move(*reply), dst);
    }

    void close(HandleId h) override {
        if (streams_.erase(h)) {
            transcripts_[transcript_index_[h]].closed = true;
            ++closed_;
        } else if (datagrams_.erase(h)) {
            ++closed_;
        }
    }

    std::size_t active_handle_count() const override { return streams_.size() + datagrams_.size(); }

    std::optional<Timestamp> next_event_time() const override {
        prune();
        if (queue_.empty()) return std::nullopt;
        return queue_.top().at;
    }

    std::optional<UpstreamEvent> poll_event(Timestamp now) override {
        while (!queue_.empty() && queue_.top().at <= now) {
            Scheduled item = queue_.top();
            queue_.pop();
            UpstreamEvent ev{item.at, item.handle, UpstreamEventKind::Readable, {}, {}};
            if (item.kind == Kind::Datagram) {
                if (!datagrams_.count(item.handle)) continue;
                ev.kind = UpstreamEventKind::Datagram;
                ev.peer = item.peer;
                ev.data = std::move(item.data);
                return ev;
            }
            auto it = streams_.find(item.handle);
            if (it == streams_.end()) continue;
            auto& s = it->second;
            ev.peer = s.dst;
            switch (item.kind) {
                case Kind::Connect:
                    s.connected = true;
                    ev.kind = UpstreamEventKind::Connected;
                    return ev;
                case Kind::Refuse:
                    ev.kind = UpstreamEventKind::ConnectRefused;
                    return ev;
                case Kind::Data:
                    s.readable.insert(s.readable.end(), item.data.begin(), item.data.end());
                    return ev;
                case Kind::Eof:
                    s.eof_arrived = true;
                    return ev;
                case Kind::Reset:
                    ev.kind = UpstreamEventKind::Reset;
                    return ev;
                case Kind::Datagram:
                    break;
            }
        }
        return std::nullopt;
    }

    const std::vector<StreamTranscript>& transcripts() const { return transcripts_; }
    const std::vector<DatagramRecord>& datagram_log() const { return datagram_log_; }
    std::uint64_t handles_opened() const { return next_handle_ - 1; }
    std::uint64_t handles_closed() const { return closed_; }

    const StreamTranscript* transcript_for(HandleId h) const {
        auto it = transcript_index_.find(h);
        return it == transcript_index_.end() ? nullptr : &transcripts_[it->second];
    }

private:
    enum class Kind : std::uint8_t { Connect, Refuse, Data, Eof, Reset, Datagram };

    struct Scheduled {
        Timestamp at{0};
        std::uint64_t seq = 0;
        HandleId handle = 0;
        Kind kind = Kind::Data;
        Bytes data;
        Endpoint peer;
    };

    struct Later {
        bool operator()(const Scheduled& a, const Scheduled& b) const {
            return a.at != b.at ? a.at > b.at : a.seq > b.seq;
        }
    };

    struct Stream {
        Endpoint dst;
        const SimEndpointScript* script = nullptr;
        bool connected = false;
        bool responded = false;
        bool engine_shutdown = false;
        bool eof_arrived = false;
        Bytes readable;
        Bytes inbound;
    };

    struct DatagramSocket {
        std::uint16_t local_port = 0;
    };

    const SimEndpointScript* find_script(const Endpoint& e) const {
        for (const auto& s : scripts_) {
            if (s.matches(e)) return &s;
        }
        return nullptr;
    }

    static Duration delay_of(const SimEndpointScript& s) {
        return std::visit(
            [](const auto& b) -> Duration {
                if constexpr (requires { b.delay; }) {
                    return b.delay;
                } else {
                    return Duration{0};
                }
            },
            s.behavior);
    }

    // Per-handle ordering survives jitter: a later call never lands before an earlier one.
    Timestamp schedule_time(HandleId h, Duration delay, const SimEndpointScript& script) {
        Duration extra{0};
        if (script.jitter.count() > 0) {
            extra = Duration{std::uniform_int_distribution<std::int64_t>(0, script.jitter.count())(rng_)};
        }
        Timestamp t = clock_.now() + delay + extra;
        auto& last = last_scheduled_[h];
        t = std::max(t, last);
        last = t;
        return t;
    }

    void schedule(Timestamp at, HandleId h, Kind kind, Bytes data = {}, Endpoint peer = {}) {
        queue_.push(Scheduled{at, seq_++, h, kind, std::move(data), peer});
    }

    void emit_stream(HandleId h, Stream& s, Duration delay, Bytes data) {
        auto& t = transcripts_[transcript_index_[h]];
        t.endpoint_sent.insert(t.endpoint_sent.end(), data.begin(), data.end());
        schedule(schedule_time(h, delay, *s.script), h, Kind::Data, std::move(data));
    }

    // Drops queue heads that belong to closed handles so next_event_time() stays honest.
    void prune() const {
        while (!queue_.empty()) {
            const auto& top = queue_.top();
            bool live = top.kind == Kind::Datagram ? datagrams_.count(top.handle) > 0 : streams_.count(top.handle) > 0;
            if (live) break;
            queue_.pop();
        }
    }

    std::vector<SimEndpointScript> scripts_;
    std::mt19937_64 rng_;
    const Clock& clock_;
    HandleId next_handle_ = 1;
    std::uint64_t seq_ = 0;
    std::uint64_t closed_ = 0;
    mutable std::priority_queue<Scheduled, std::vector<Scheduled>, Later> queue_;
    std::map<HandleId, Stream> streams_;
    std::map<HandleId, DatagramSocket> datagrams_;
    std::unordered_map<HandleId, Timestamp> last_scheduled_;
    std::vector<StreamTranscript> transcripts_;
    std::unordered_map<HandleId, std::size_t> transcript_index_;
    std::vector<DatagramRecord> datagram_log_;
};

}  // namespace mbz
