#pragma once

#include <fcntl.h>
#include <linux/if.h>
#include <linux/if_tun.h>
#include <poll.h>
#include <sys/ioctl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <string>

#include "mbz/core/error.hpp"
#include "mbz/io/conduit.hpp"

namespace mbz {

// App side backed by a Linux tun device (IFF_TUN, no packet info). Needs CAP_NET_ADMIN.
class TunConduit final : public PacketConduit {
public:
    TunConduit(const std::string& name, const Clock& clock) : clock_(clock) {
        fd_ = ::open("/dev/net/tun", O_RDWR | O_NONBLOCK | O_CLOEXEC);
        if (fd_ < 0) throw Error(ErrorCode::Io, std::string("/dev/net/tun: ") + std::strerror(errno));
        ifreq ifr{};
        ifr.ifr_flags = IFF_TUN | IFF_NO_PI;
        std::strncpy(ifr.ifr_name, name.c_str(), IFNAMSIZ - 1);
        if (::ioctl(fd_, TUNSETIFF, &ifr) < 0) {
            int err = errno;
            ::close(fd_);
            throw Error(ErrorCode::Io, "TUNSETIFF " + name + ": " + std::strerror(err));
        }
        name_ = ifr.ifr_name;
    }

    ~TunConduit() override {
        if (fd_ >= 0) ::close(fd_);
    }

    TunConduit(const TunConduit&) = delete;
    TunConduit& operator=(const TunConduit&) = delete;

    std::optional<ConduitPacket> read_packet() override {
        Bytes buf(65535);
        ssize_t n = ::read(fd_, buf.data(), buf.size());
        if (n <= 0) return std::nullopt;
        buf.resize(static_cast<std::size_t>(n));
        return ConduitPacket{std::move(buf), {}, clock_.now()};
    }

    std::optional<Timestamp> next_ready_time() const override {
        pollfd p{fd_, POLLIN, 0};
        if (::poll(&p, 1, 0) > 0 && (p.revents & POLLIN)) return clock_.now();
        return std::nullopt;
    }

    bool end_of_stream() const override { return false; }

    void write_packet(ByteView bytes) override { [[maybe_unused]] auto n = ::write(fd_, bytes.data(), bytes.size()); }

    int poll_fd() const override { return fd_; }
    const std::string& name() const { return name_; }

private:
    const Clock& clock_;
    int fd_ = -1;
    std::string name_;
};

}  // namespace mbz
