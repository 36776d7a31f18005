#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "mbz/core/bytes.hpp"
#include "mbz/core/clock.hpp"
#include "mbz/core/error.hpp"
#include "mbz/io/trace.hpp"

namespace mbz {

struct ConduitPacket {
    Bytes bytes;
    std::string app_label;
    Timestamp at{0};
};

// The app-side boundary. Packets are delivered whole and written back in call order.
class PacketConduit {
public:
    virtual ~PacketConduit() = default;

    // Next packet if one is ready; nullopt otherwise (see end_of_stream()).
    virtual std::optional<ConduitPacket> read_packet() = 0;
    // When the next packet becomes readable, if known.
    virtual std::optional<Timestamp> next_ready_time() const = 0;
    virtual bool end_of_stream() const = 0;
    virtual void write_packet(ByteView bytes) = 0;
    // A pollable descriptor for live conduits, -1 otherwise.
    virtual int poll_fd() const { return -1; }
};

// Surfaces the AppToNet events of a trace in timestamp order. With a speed multiplier the
// clock is slept until each event is due (ts / speed); without one packets are released
// as fast as they are read. Everything written back is recorded against the clock.
class ReplayConduit final : public PacketConduit {
public:
    ReplayConduit(const std::vector<TraceEvent>& trace, std::optional<double> speed, Clock& clock)
        : speed_(speed), clock_(clock) {
        if (speed_ && !(*speed_ > 0.0)) throw Error(ErrorCode::MalformedTrace, "speed must be positive");
        for (std::size_t i = 0; i < trace.size(); ++i) {
            if (i > 0 && trace[i].ts < trace[i - 1].ts) {
                throw Error(ErrorCode::MalformedTrace, "timestamps decrease at event " + std::to_string(i));
            }
            if (trace[i].dir == Direction::AppToNet) pending_.push_back(trace[i]);
        }
    }

    std::optional<ConduitPacket> read_packet() override {
        if (pending_.empty()) return std::nullopt;
        clock_.sleep_until(due(pending_.front()));
        auto ev = std::move(pending_.front());
        pending_.pop_front();
        ++delivered_;
        return ConduitPacket{std::move(ev.packet), std::move(ev.app), clock_.now()};
    }

    std::optional<Timestamp> next_ready_time() const override {
        if (pending_.empty()) return std::nullopt;
        return std::max(due(pending_.front()), clock_.now());
    }

    bool end_of_stream() const override { return pending_.empty(); }

    void write_packet(ByteView bytes) override {
        written_.push_back(TraceEvent{clock_.now(), Direction::NetToApp, {}, Bytes(bytes.begin(), bytes.end())});
    }

    const std::vector<TraceEvent>& written() const { return written_; }
    std::size_t delivered() const { return delivered_; }

private:
    Timestamp due(const TraceEvent& ev) const {
        if (!speed_) return clock_.now();
        return Timestamp{static_cast<std::int64_t>(static_cast<double>(ev.ts.count()) / *speed_)};
    }

    std::optional<double> speed_;
    Clock& clock_;
    std::deque<TraceEvent> pending_;
    std::vector<TraceEvent> written_;
    std::size_t delivered_ = 0;
};

// In-process conduit for harnesses that play the app side interactively.
class MemoryConduit final : public PacketConduit {
public:
    explicit MemoryConduit(const Clock& clock) : clock_(clock) {}

    void inject(ByteView bytes, std::string app_label = {}) {
        inbound_.push_back(ConduitPacket{Bytes(bytes.begin(), bytes.end()), std::move(app_label), clock_.now()});
    }
    void close() { closed_ = true; }

    std::optional<ConduitPacket> read_packet() override {
        if (inbound_.empty()) return std::nullopt;
        auto p = std::move(inbound_.front());
        inbound_.pop_front();
        return p;
    }
    std::optional<Timestamp> next_ready_time() const override {
        if (inbound_.empty()) return std::nullopt;
        return clock_.now();
    }
    bool end_of_stream() const override { return closed_ && inbound_.empty(); }

    void write_packet(ByteView bytes) override { outbound_.emplace_back(bytes.begin(), bytes.end()); }

    std::vector<Bytes> take_written() {
        std::vector<Bytes> out(std::make_move_iterator(outbound_.begin()), std::make_move_iterator(outbound_.end()));
        outbound_.clear();
        return out;
    }
    bool has_written() const { return !outbound_.empty(); }

private:
    const Clock& clock_;
    std::deque<ConduitPacket> inbound_;
    std::deque<Bytes> outbound_;
    bool closed_ = false;
};

}  // namespace mbz
