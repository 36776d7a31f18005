#pragma once

#include <algorithm>
#include <optional>

#include "mbz/engine/engine.hpp"

namespace mbz {

struct LoopStats {
    std::uint64_t packets = 0;
    std::uint64_t upstream_events = 0;
    std::uint64_t sweeps = 0;
    Timestamp finished_at{0};
};

// Drives one engine from a conduit and an upstream network. With a VirtualClock the
// whole run is a deterministic function of its inputs.
class EventLoop {
public:
    EventLoop(Engine& engine, UpstreamNetwork& upstream, PacketConduit& conduit, Clock& clock)
        : engine_(engine), upstream_(upstream), conduit_(conduit), clock_(clock) {}

    // Processes every input and upstream event in time order. With drain set, keeps sweeping
    // afterwards until idle flows have aged out.
    LoopStats run(bool drain = true) {
        next_sweep_ = clock_.now() + engine_.config().sweep_interval;
        while (auto t = next_work_time()) {
            advance_sweeps(*t);
            dispatch_one();
        }
        if (drain) {
            const auto& c = engine_.config();
            Timestamp horizon = clock_.now() + std::max({c.udp_timeout, c.connect_timeout, c.close_linger}) +
                                2 * c.sweep_interval;
            while ((engine_.udp_flow_count() > 0 || engine_.tcp_flow_count() > 0) && next_sweep_ <= horizon) {
                // Late upstream activity (echo replies, refusals) still lands in order.
                if (auto t = next_work_time(); t && *t <= next_sweep_) {
                    dispatch_one();
                    continue;
                }
                clock_.sleep_until(next_sweep_);
                do_sweep();
            }
        }
        do_sweep();
        stats_.finished_at = clock_.now();
        return stats_;
    }

    // One bounded iteration for live operation. Returns false once the conduit has ended
    // and nothing else is pending.
    bool step(Duration max_wait) {
        if (next_sweep_ == Timestamp{0}) next_sweep_ = clock_.now() + engine_.config().sweep_interval;
        bool did = false;
        for (int i = 0; i < kMaxEventsPerStep; ++i) {
            auto ev = upstream_.poll_event(clock_.now());
            if (!ev) break;
            engine_.on_upstream_event(*ev);
            ++stats_.upstream_events;
            did = true;
        }
        if (auto d = engine_.next_deadline(); d && *d <= clock_.now()) {
            engine_.on_deadline(clock_.now());
            did = true;
        }
        while (auto ready = conduit_.next_ready_time()) {
            if (*ready > clock_.now()) break;
            auto pkt = conduit_.read_packet();
            if (!pkt) break;
            engine_.on_app_packet(pkt->bytes, pkt->app_label);
            ++stats_.packets;
            did = true;
        }
        if (clock_.now() >= next_sweep_) do_sweep();
        if (!did) {
            Duration wait = std::min(max_wait, std::max(Duration{0}, next_sweep_ - clock_.now()));
            upstream_.wait_for_events(wait);
        }
        return !(conduit_.end_of_stream() && !upstream_.next_event_time() && !engine_.next_deadline());
    }

    const LoopStats& stats() const { return stats_; }

private:
    static constexpr int kMaxEventsPerStep = 1024;

    std::optional<Timestamp> next_work_time() const {
        std::optional<Timestamp> t;
        auto take = [&](std::optional<Timestamp> c) {
            if (c && (!t || *c < *t)) t = c;
        };
        take(upstream_.next_event_time());
        take(engine_.next_deadline());
        if (!conduit_.end_of_stream()) take(conduit_.next_ready_time());
        return t;
    }

    void advance_sweeps(Timestamp until) {
        while (next_sweep_ < until) {
            clock_.sleep_until(next_sweep_);
            do_sweep();
        }
    }

    // Upstream events first, then timer deadlines, then app packets.
    void dispatch_one() {
        auto up = upstream_.next_event_time();
        auto dl = engine_.next_deadline();
        auto pk = conduit_.end_of_stream() ? std::nullopt : conduit_.next_ready_time();
        if (up && (!dl || *up <= *dl) && (!pk || *up <= *pk)) {
            clock_.sleep_until(*up);
            if (auto ev = upstream_.poll_event(clock_.now())) {
                engine_.on_upstream_event(*ev);
                ++stats_.upstream_events;
            }
        } else if (dl && (!pk || *dl <= *pk)) {
            clock_.sleep_until(*dl);
            engine_.on_deadline(clock_.now());
        } else if (pk) {
            if (auto pkt = conduit_.read_packet()) {
                engine_.on_app_packet(pkt->bytes, pkt->app_label);
                ++stats_.packets;
            }
        }
    }

    void do_sweep() {
        engine_.sweep(clock_.now());
        ++stats_.sweeps;
        next_sweep_ = std::max(next_sweep_, clock_.now()) + engine_.config().sweep_interval;
    }

    Engine& engine_;
    UpstreamNetwork& upstream_;
    PacketConduit& conduit_;
    Clock& clock_;
    Timestamp next_sweep_{0};
    LoopStats stats_;
};

}  // namespace mbz
