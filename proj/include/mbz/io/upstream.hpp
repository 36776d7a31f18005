#pragma once

#include <cstdint>
#include <optional>

#include "mbz/core/bytes.hpp"
#include "mbz/core/clock.hpp"
#include "mbz/packet/address.hpp"

namespace mbz {

using HandleId = std::uint64_t;

enum class UpstreamEventKind : std::uint8_t {
    Connected,       // stream connect completed
    ConnectRefused,  // stream connect failed
    Readable,        // stream has bytes or end-of-stream to receive()
    Reset,           // stream aborted by the remote side
    Datagram,        // datagram arrived on a datagram handle
};

struct UpstreamEvent {
    Timestamp at{0};
    HandleId handle = 0;
    UpstreamEventKind kind = UpstreamEventKind::Readable;
    Endpoint peer;
    Bytes data;  // Datagram payload only
};

struct ReceiveResult {
    Bytes data;
    bool eof = false;  // remote finished sending and everything has been received
};

// The network-side boundary. Events are delivered one at a time through poll_event();
// events for handles that were closed are never delivered.
class UpstreamNetwork {
public:
    virtual ~UpstreamNetwork() = default;

    virtual std::optional<HandleId> open_stream(const Endpoint& dst) = 0;
    virtual void send(HandleId h, ByteView data) = 0;
    // Bytes accepted by send() but not yet handed to the network.
    virtual std::size_t send_queue_size(HandleId) const { return 0; }
    virtual ReceiveResult receive(HandleId h, std::size_t max_bytes) = 0;
    virtual void shutdown_write(HandleId h) = 0;
    virtual void set_read_interest(HandleId, bool) {}

    virtual std::optional<HandleId> open_datagram() = 0;
    virtual void send_to(HandleId h, const Endpoint& dst, ByteView data) = 0;

    virtual void close(HandleId h) = 0;
    virtual std::size_t active_handle_count() const = 0;

    // Earliest time a pending event becomes due; nullopt when nothing is scheduled or
    // the implementation cannot know in advance (real sockets).
    virtual std::optional<Timestamp> next_event_time() const = 0;
    virtual std::optional<UpstreamEvent> poll_event(Timestamp now) = 0;
    // Blocks up to timeout for I/O readiness; a no-op for simulated networks.
    virtual void wait_for_events(Duration) {}
};

}  // namespace mbz
