#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <deque>
#include <map>
#include <vector>

#include "mbz/io/upstream.hpp"

namespace mbz {

inline sockaddr_in to_sockaddr(const Endpoint& e) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(e.port);
    sa.sin_addr.s_addr = htonl(e.addr.value);
    return sa;
}

inline Endpoint from_sockaddr(const sockaddr_in& sa) { return Endpoint{Ipv4Address{ntohl(sa.sin_addr.s_addr)}, ntohs(sa.sin_port)}; }

// Non-blocking POSIX sockets multiplexed with poll(2).
class SocketUpstream final : public UpstreamNetwork {
public:
    explicit SocketUpstream(const Clock& clock) : clock_(clock) {}

    ~SocketUpstream() override {
        for (auto& [_, s] : sockets_) ::close(s.fd);
    }

    SocketUpstream(const SocketUpstream&) = delete;
    SocketUpstream& operator=(const SocketUpstream&) = delete;

    std::optional<HandleId> open_stream(const Endpoint& dst) override {
        int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
        if (fd < 0) return std::nullopt;
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        auto sa = to_sockaddr(dst);
        HandleId h = next_++;
        Sock s;
        s.fd = fd;
        s.connecting = true;
        s.peer = dst;
        int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
        if (rc == 0) {
            s.connecting = false;
            queue_.push_back(UpstreamEvent{clock_.now(), h, UpstreamEventKind::Connected, dst, {}});
        } else if (errno != EINPROGRESS) {
            queue_.push_back(UpstreamEvent{clock_.now(), h, UpstreamEventKind::ConnectRefused, dst, {}});
            s.dead = true;
        }
        sockets_.emplace(h, std::move(s));
        return h;
    }

    void send(HandleId h, ByteView data) override {
        auto it = sockets_.find(h);
        if (it == sockets_.end() || it->second.dead) return;
        auto& s = it->second;
        s.outbox.insert(s.outbox.end(), data.begin(), data.end());
        flush(h, s);
    }

    std::size_t send_queue_size(HandleId h) const override {
        auto it = sockets_.find(h);
        return it == sockets_.end() ? 0 : it->second.outbox.size();
    }

    ReceiveResult receive(HandleId h, std::size_t max_bytes) override {
        ReceiveResult r;
        auto it = sockets_.find(h);
        if (it == sockets_.end() || it->second.eof || max_bytes == 0) {
            r.eof = it != sockets_.end() && it->second.eof;
            return r;
        }
        auto& s = it->second;
        r.data.resize(max_bytes);
        ssize_t n = ::recv(s.fd, r.data.data(), max_bytes, 0);
        if (n > 0) {
            r.data.resize(static_cast<std::size_t>(n));
        } else {
            r.data.clear();
            if (n == 0) {
                s.eof = true;
                r.eof = true;
            } else if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
                s.dead = true;
                queue_.push_back(UpstreamEvent{clock_.now(), h, UpstreamEventKind::Reset, s.peer, {}});
            }
        }
        return r;
    }

    void shutdown_write(HandleId h) override {
        auto it = sockets_.find(h);
        if (it == sockets_.end()) return;
        it->second.shutdown_pending = true;
        flush(h, it->second);
    }

    void set_read_interest(HandleId h, bool on) override {
        if (auto it = sockets_.find(h); it != sockets_.end()) it->second.read_interest = on;
    }

    std::optional<HandleId> open_datagram() override {
        int fd = ::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
        if (fd < 0) return std::nullopt;
        HandleId h = next_++;
        Sock s;
        s.fd = fd;
        s.stream = false;
        sockets_.emplace(h, std::move(s));
        return h;
    }

    void send_to(HandleId h, const Endpoint& dst, ByteView data) override {
        auto it = sockets_.find(h);
        if (it == sockets_.end()) return;
        auto sa = to_sockaddr(dst);
        ::sendto(it->second.fd, data.data(), data.size(), 0, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
    }

    void close(HandleId h) override {
        auto it = sockets_.find(h);
        if (it == sockets_.end()) return;
        ::close(it->second.fd);
        sockets_.erase(it);
        std::erase_if(queue_, [h](const UpstreamEvent& e) { return e.handle == h; });
    }

    std::size_t active_handle_count() const override { return sockets_.size(); }

    std::optional<Timestamp> next_event_time() const override {
        if (queue_.empty()) return std::nullopt;
        return queue_.front().at;
    }

    std::optional<UpstreamEvent> poll_event(Timestamp) override {
        if (queue_.empty()) gather(0);
        if (queue_.empty()) return std::nullopt;
        auto ev = std::move(queue_.front());
        queue_.pop_front();
        return ev;
    }

    void wait_for_events(Duration timeout) override {
        if (!queue_.empty()) return;
        auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(timeout).count();
        gather(static_cast<int>(std::max<std::int64_t>(0, ms)));
    }

    // Extra descriptors (a tun device) that should wake wait_for_events.
    void watch_fd(int fd) { extra_fd_ = fd; }

private:
    struct Sock {
        int fd = -1;
        bool connecting = false;
        bool dead = false;
        bool stream = true;
        bool eof = false;
        bool read_interest = true;
        bool shutdown_pending = false;
        bool shutdown_done = false;
        Endpoint peer;
        Bytes outbox;
    };

    void flush(HandleId h, Sock& s) {
        if (s.connecting || s.dead) return;
        while (!s.outbox.empty()) {
            ssize_t n = ::send(s.fd, s.outbox.data(), s.outbox.size(), MSG_NOSIGNAL);
            if (n > 0) {
                s.outbox.erase(s.outbox.begin(), s.outbox.begin() + n);
                continue;
            }
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) break;
            s.dead = true;
            queue_.push_back(UpstreamEvent{clock_.now(), h, UpstreamEventKind::Reset, s.peer, {}});
            return;
        }
        if (s.outbox.empty() && s.shutdown_pending && !s.shutdown_done) {
            ::shutdown(s.fd, SHUT_WR);
            s.shutdown_done = true;
        }
    }

    void gather(int timeout_ms) {
        std::vector<pollfd> fds;
        std::vector<HandleId> owners;
        for (auto& [h, s] : sockets_) {
            if (s.dead) continue;
            short events = 0;
            if (s.connecting || !s.outbox.empty()) events |= POLLOUT;
            if (!s.connecting && s.read_interest && !s.eof) events |= POLLIN;
            if (events == 0) continue;
            fds.push_back(pollfd{s.fd, events, 0});
            owners.push_back(h);
        }
        if (extra_fd_ >= 0) fds.push_back(pollfd{extra_fd_, POLLIN, 0});
        if (fds.empty()) return;
        int rc = ::poll(fds.data(), fds.size(), timeout_ms);
        if (rc <= 0) return;
        Timestamp now = clock_.now();
        for (std::size_t i = 0; i < owners.size(); ++i) {
            if (fds[i].revents == 0) continue;
            HandleId h = owners[i];
            auto& s = sockets_.at(h);
            if (s.connecting) {
                int err = 0;
                socklen_t len = sizeof err;
                ::getsockopt(s.fd, SOL_SOCKET, SO_ERROR, &err, &len);
                if (err == 0 && (fds[i].revents & POLLOUT)) {
                    s.connecting = false;
                    queue_.push_back(UpstreamEvent{now, h, UpstreamEventKind::Connected, s.peer, {}});
                    flush(h, s);
                } else if (err != 0 || (fds[i].revents & (POLLERR | POLLHUP))) {
                    s.dead = true;
                    queue_.push_back(UpstreamEvent{now, h, UpstreamEventKind::ConnectRefused, s.peer, {}});
                }
                continue;
            }
            if (fds[i].revents & POLLOUT) flush(h, s);
            if (!(fds[i].revents & (POLLIN | POLLERR | POLLHUP))) continue;
            if (s.stream) {
                queue_.push_back(UpstreamEvent{now, h, UpstreamEventKind::Readable, s.peer, {}});
            } else {
                while (true) {
                    Bytes buf(65536);
                    sockaddr_in from{};
                    socklen_t len = sizeof from;
                    ssize_t n = ::recvfrom(s.fd, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&from), &len);
                    if (n < 0) break;
                    buf.resize(static_cast<std::size_t>(n));
                    queue_.push_back(UpstreamEvent{now, h, UpstreamEventKind::Datagram, from_sockaddr(from), std::move(buf)});
                }
            }
        }
    }

    const Clock& clock_;
    std::map<HandleId, Sock> sockets_;
    std::deque<UpstreamEvent> queue_;
    HandleId next_ = 1;
    int extra_fd_ = -1;
};

}  // namespace mbz
