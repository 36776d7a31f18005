#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <thread>

namespace mbz {

// Microseconds since the start of a run (trace start under replay).
using Timestamp = std::chrono::microseconds;
using Duration = std::chrono::microseconds;

class Clock {
public:
    virtual ~Clock() = default;
    virtual Timestamp now() const = 0;
    virtual void sleep_until(Timestamp t) = 0;
};

// Time only moves when somebody asks it to. Drives replay and all simulated delays.
class VirtualClock final : public Clock {
public:
    explicit VirtualClock(Timestamp start = Timestamp{0}) : now_(start) {}

    Timestamp now() const override { return now_; }
    void sleep_until(Timestamp t) override { now_ = std::max(now_, t); }
    void advance(Duration d) { now_ += d; }

private:
    Timestamp now_;
};

class WallClock final : public Clock {
public:
    WallClock() : origin_(std::chrono::steady_clock::now()) {}

    Timestamp now() const override {
        return std::chrono::duration_cast<Timestamp>(std::chrono::steady_clock::now() - origin_);
    }
    void sleep_until(Timestamp t) override {
        std::this_thread::sleep_until(origin_ + t);
    }

private:
    std::chrono::steady_clock::time_point origin_;
};

}  // namespace mbz
