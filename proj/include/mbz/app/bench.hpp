#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbz/app/plugin_factory.hpp"
#include "mbz/engine/event_loop.hpp"
#include "mbz/io/socket_upstream.hpp"

namespace mbz {

inline constexpr std::size_t kMinBenchSamples = 30;

struct BenchSample {
    std::int64_t direct_connect_us = 0;
    std::int64_t engine_connect_us = 0;
    std::int64_t delta_us = 0;
};

struct BenchSummary {
    double median = 0;
    double p90 = 0;
    double p99 = 0;
    std::size_t count = 0;
};

// Nearest-rank percentile over an ascending sample.
inline double percentile(const std::vector<std::int64_t>& sorted, double p) {
    if (sorted.empty()) return 0;
    auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(sorted.size())));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return static_cast<double>(sorted[rank - 1]);
}

inline BenchSummary summarize(const std::vector<BenchSample>& samples) {
    std::vector<std::int64_t> d;
    d.reserve(samples.size());
    for (const auto& s : samples) d.push_back(s.delta_us);
    std::sort(d.begin(), d.end());
    return {percentile(d, 0.5), percentile(d, 0.9), percentile(d, 0.99), d.size()};
}

// Empirical CDF of the deltas: one (value, fraction <= value) point per distinct value.
inline std::vector<std::pair<std::int64_t, double>> delta_cdf(const std::vector<BenchSample>& samples) {
    std::vector<std::int64_t> d;
    for (const auto& s : samples) d.push_back(s.delta_us);
    std::sort(d.begin(), d.end());
    std::vector<std::pair<std::int64_t, double>> cdf;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (i + 1 < d.size() && d[i + 1] == d[i]) continue;
        cdf.emplace_back(d[i], static_cast<double>(i + 1) / static_cast<double>(d.size()));
    }
    return cdf;
}

inline nlohmann::json bench_json(const std::vector<BenchSample>& samples, std::size_t concurrency) {
    auto rows = nlohmann::json::array();
    for (const auto& s : samples) {
        rows.push_back({{"direct_connect_us", s.direct_connect_us},
                        {"engine_connect_us", s.engine_connect_us},
                        {"delta_us", s.delta_us}});
    }
    auto sum = summarize(samples);
    auto cdf = nlohmann::json::array();
    for (const auto& [v, f] : delta_cdf(samples)) cdf.push_back({v, f});
    return {{"kind", "bench"},
            {"concurrency", concurrency},
            {"samples", std::move(rows)},
            {"summary", {{"median_us", sum.median}, {"p90_us", sum.p90}, {"p99_us", sum.p99}, {"count", sum.count}}},
            {"delta_cdf", std::move(cdf)}};
}

// Loopback TCP listener that accepts and immediately closes connections.
class LoopbackListener {
public:
    LoopbackListener() {
        fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
        if (fd_ < 0) throw Error(ErrorCode::Io, "listener socket");
        int one = 1;
        ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        socklen_t len = sizeof sa;
        if (::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) < 0 || ::listen(fd_, 4096) < 0 ||
            ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len) < 0) {
            ::close(fd_);
            throw Error(ErrorCode::Io, "cannot listen on loopback");
        }
        endpoint_ = from_sockaddr(sa);
        thread_ = std::thread([this] { serve(); });
    }

    ~LoopbackListener() {
        stop_ = true;
        thread_.join();
        ::close(fd_);
    }

    LoopbackListener(const LoopbackListener&) = delete;
    LoopbackListener& operator=(const LoopbackListener&) = delete;

    const Endpoint& endpoint() const { return endpoint_; }

private:
    void serve() {
        while (!stop_) {
            pollfd p{fd_, POLLIN, 0};
            if (::poll(&p, 1, 20) <= 0) continue;
            int c = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
            if (c >= 0) ::close(c);
        }
    }

    int fd_ = -1;
    Endpoint endpoint_;
    std::atomic<bool> stop_{false};
    std::thread thread_;
};

struct BenchOptions {
    std::size_t n = 1000;
    std::size_t concurrency = 1;
    Duration connect_timeout = std::chrono::seconds(5);
    // Run the engine pass with this config's plugin chain instead of an empty one.
    std::optional<fs::path> plugins_config;
};

namespace detail {

using SteadyClock = std::chrono::steady_clock;

inline std::int64_t micros_between(SteadyClock::time_point a, SteadyClock::time_point b) {
    return std::chrono::duration_cast<std::chrono::microseconds>(b - a).count();
}

// Direct pass: plain non-blocking connects, timed until writable.
inline std::vector<std::int64_t> direct_pass(const Endpoint& target, const BenchOptions& opt) {
    std::vector<std::int64_t> out;
    auto sa = to_sockaddr(target);
    while (out.size() < opt.n) {
        std::size_t batch = std::min(opt.concurrency, opt.n - out.size());
        std::vector<int> fds;
        std::vector<SteadyClock::time_point> start;
        std::vector<std::int64_t> result(batch, -1);
        for (std::size_t i = 0; i < batch; ++i) {
            int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
            if (fd < 0) throw Error(ErrorCode::Io, "socket");
            start.push_back(SteadyClock::now());
            int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
            if (rc == 0) result[i] = micros_between(start[i], SteadyClock::now());
            fds.push_back(fd);
        }
        auto deadline = SteadyClock::now() + opt.connect_timeout;
        while (std::count(result.begin(), result.end(), -1) > 0) {
            if (SteadyClock::now() > deadline) throw Error(ErrorCode::Io, "direct connect timed out");
            std::vector<pollfd> p;
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < batch; ++i) {
                if (result[i] < 0) {
                    p.push_back(pollfd{fds[i], POLLOUT, 0});
                    idx.push_back(i);
                }
            }
            if (::poll(p.data(), p.size(), 100) <= 0) continue;
            auto now = SteadyClock::now();
            for (std::size_t k = 0; k < p.size(); ++k) {
                if (!p[k].revents) continue;
                int err = 0;
                socklen_t len = sizeof err;
                ::getsockopt(p[k].fd, SOL_SOCKET, SO_ERROR, &err, &len);
                if (err != 0) throw Error(ErrorCode::Io, "direct connect failed");
                result[idx[k]] = micros_between(start[idx[k]], now);
            }
        }
        for (int fd : fds) ::close(fd);
        out.insert(out.end(), result.begin(), result.end());
    }
    return out;
}

// Engine pass: SYN written into the in-memory conduit, timed until the SYN/ACK is read back.
inline std::vector<std::int64_t> engine_pass(const Endpoint& target, const BenchOptions& opt) {
    WallClock clock;
    SocketUpstream upstream(clock);
    MemoryConduit app(clock);
    PluginHost host(clock);
    if (opt.plugins_config) {
        auto rc = load_run_config(*opt.plugins_config);
        install_plugins(host, rc, rc.seed);
    }
    EngineConfig cfg;
    cfg.socket_budget = std::max<std::size_t>(512, 2 * opt.concurrency + 8);
    Engine engine(cfg, upstream, app, clock, &host);
    EventLoop loop(engine, upstream, app, clock);

    std::vector<std::int64_t> out;
    std::uint16_t next_port = 20000;
    Ipv4Address app_addr = Ipv4Address::parse("10.0.0.2").value();
    while (out.size() < opt.n) {
        std::size_t batch = std::min(opt.concurrency, opt.n - out.size());
        std::map<std::uint16_t, std::size_t> port_index;
        std::vector<SteadyClock::time_point> start(batch);
        std::vector<std::int64_t> result(batch, -1);
        std::vector<Packet> syns;
        for (std::size_t i = 0; i < batch; ++i) {
            std::uint16_t port = next_port++;
            if (next_port == 0) next_port = 20000;
            port_index[port] = i;
            syns.push_back(make_tcp_packet(Endpoint{app_addr, port}, target, 1000 + static_cast<std::uint32_t>(i), 0,
                                           TcpFlags::kSyn, {}, 65535, 1460));
        }
        for (std::size_t i = 0; i < batch; ++i) {
            auto bytes = serialize_packet(syns[i]).value();
            start[i] = SteadyClock::now();
            app.inject(bytes, "bench");
        }
        auto deadline = SteadyClock::now() + opt.connect_timeout;
        std::size_t done = 0;
        while (done < batch) {
            if (SteadyClock::now() > deadline) throw Error(ErrorCode::Io, "engine connect timed out");
            loop.step(std::chrono::milliseconds(50));
            for (auto& b : app.take_written()) {
                auto now = SteadyClock::now();
                auto p = parse_packet(b);
                if (!p || !p->tcp()) continue;
                const auto& t = *p->tcp();
                auto it = port_index.find(t.dst_port);
                if (it == port_index.end() || result[it->second] >= 0) continue;
                if (t.flags.rst()) throw Error(ErrorCode::Io, "engine connect refused");
                if (t.flags.syn() && t.flags.ack()) {
                    result[it->second] = micros_between(start[it->second], now);
                    ++done;
                }
            }
        }
        // Tear the batch down so handles are reclaimed.
        for (std::size_t i = 0; i < batch; ++i) {
            const auto& t = *syns[i].tcp();
            auto rst = make_tcp_packet(Endpoint{app_addr, t.src_port}, target, t.seq + 1, 0, TcpFlags::kRst);
            engine.on_app_packet(serialize_packet(rst).value(), "bench");
        }
        engine.sweep(clock.now());
        out.insert(out.end(), result.begin(), result.end());
    }
    return out;
}

}  // namespace detail

inline std::vector<BenchSample> run_bench(const BenchOptions& opt) {
    if (opt.n < kMinBenchSamples) {
        throw Error(ErrorCode::InsufficientSamples,
                    "need at least " + std::to_string(kMinBenchSamples) + " connections, got " + std::to_string(opt.n));
    }
    if (opt.concurrency == 0) throw Error(ErrorCode::InvalidConfig, "concurrency must be positive");
    LoopbackListener listener;
    // Warm-up round, discarded.
    BenchOptions warm = opt;
    warm.n = std::min<std::size_t>(opt.concurrency * 4, 64);
    detail::direct_pass(listener.endpoint(), warm);
    detail::engine_pass(listener.endpoint(), warm);

    auto direct = detail::direct_pass(listener.endpoint(), opt);
    auto engine = detail::engine_pass(listener.endpoint(), opt);
    std::vector<BenchSample> samples(opt.n);
    for (std::size_t i = 0; i < opt.n; ++i) {
        samples[i] = {direct[i], engine[i], engine[i] - direct[i]};
    }
    return samples;
}

}  // namespace mbz
