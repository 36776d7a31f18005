#include <gtest/gtest.h>

#include <sstream>

#include "mbz/io/conduit.hpp"
#include "mbz/io/pcap.hpp"
#include "mbz/io/sim_upstream.hpp"
#include "mbz/io/trace.hpp"
#include "support/gen.hpp"
#include "support/rig.hpp"
#include "support/tmp.hpp"

using namespace mbz;
using namespace mbz::testing;

namespace {

std::string to_hex(const Bytes& b) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (auto x : b) {
        s.push_back(digits[x >> 4]);
        s.push_back(digits[x & 15]);
    }
    return s;
}

std::vector<TraceEvent> random_trace(Gen& g, std::size_t n) {
    std::vector<TraceEvent> ev;
    Timestamp t{0};
    for (std::size_t i = 0; i < n; ++i) {
        t += Duration{static_cast<std::int64_t>(g.range(0, 5000))};
        ev.push_back(TraceEvent{t, g.coin(0.8) ? Direction::AppToNet : Direction::NetToApp,
                                g.coin() ? "com.example.app" : "", serialize_packet(g.packet(200)).value()});
    }
    return ev;
}

std::vector<UpstreamEvent> drain(SimUpstream& up, VirtualClock& clock) {
    std::vector<UpstreamEvent> out;
    while (auto t = up.next_event_time()) {
        clock.sleep_until(*t);
        while (auto ev = up.poll_event(clock.now())) out.push_back(std::move(*ev));
    }
    return out;
}

}  // namespace

TEST(Trace, WriteReadRoundTrip) {
    Gen g(1);
    auto events = random_trace(g, 200);
    std::stringstream ss;
    write_trace(ss, events);
    auto back = read_trace(ss);
    EXPECT_EQ(back, events);
}

TEST(Trace, DecreasingTimestampsRejected) {
    std::stringstream ss(R"({"ts_us": 10, "pkt_b64": "AAAA"}
{"ts_us": 5, "pkt_b64": "AAAA"}
)");
    try {
        read_trace(ss);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MalformedTrace);
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(Trace, UnknownKeyRejected) {
    std::stringstream ss(R"({"ts_us": 1, "pkt_b64": "AAAA", "dirr": "app_to_net"})");
    EXPECT_THROW(read_trace(ss), Error);
}

TEST(ReplayConduit, EmptyTraceIsImmediatelyDone) {
    VirtualClock clock;
    ReplayConduit c({}, 1.0, clock);
    EXPECT_TRUE(c.end_of_stream());
    EXPECT_FALSE(c.read_packet());
}

TEST(ReplayConduit, PacesAtSpeedOne) {
    VirtualClock clock;
    Bytes pkt = serialize_packet(make_udp_packet(ep("10.0.0.2:1"), ep("10.0.0.3:2"), {})).value();
    std::vector<TraceEvent> trace{{Timestamp{1000}, Direction::AppToNet, "a", pkt},
                                  {Timestamp{2000}, Direction::AppToNet, "a", pkt}};
    ReplayConduit c(trace, 1.0, clock);
    auto a = c.read_packet();
    auto b = c.read_packet();
    ASSERT_TRUE(a && b);
    EXPECT_GE(b->at - a->at, Duration{1000});
    EXPECT_TRUE(c.end_of_stream());
}

TEST(ReplayConduit, DoubleSpeedHalvesGaps) {
    VirtualClock clock;
    Bytes pkt = serialize_packet(make_udp_packet(ep("10.0.0.2:1"), ep("10.0.0.3:2"), {})).value();
    std::vector<TraceEvent> trace{{Timestamp{0}, Direction::AppToNet, "a", pkt},
                                  {Timestamp{4000}, Direction::AppToNet, "a", pkt}};
    ReplayConduit c(trace, 2.0, clock);
    auto a = c.read_packet();
    auto b = c.read_packet();
    EXPECT_EQ(b->at - a->at, Duration{2000});
}

TEST(ReplayConduit, DecreasingTimestampsRejected) {
    VirtualClock clock;
    std::vector<TraceEvent> trace{{Timestamp{5}, Direction::AppToNet, "", {}}, {Timestamp{4}, Direction::AppToNet, "", {}}};
    EXPECT_THROW(ReplayConduit(trace, 1.0, clock), Error);
}

TEST(ReplayConduitProperty, NeverReorders) {
    Gen g(8);
    for (int round = 0; round < 20; ++round) {
        auto trace = random_trace(g, 100);
        VirtualClock clock;
        ReplayConduit c(trace, g.coin() ? std::optional<double>(1.0) : std::nullopt, clock);
        std::vector<Bytes> expected;
        for (const auto& ev : trace) {
            if (ev.dir == Direction::AppToNet) expected.push_back(ev.packet);
        }
        std::vector<Bytes> got;
        while (auto p = c.read_packet()) got.push_back(p->bytes);
        ASSERT_EQ(got, expected);
    }
}

TEST(Pcap, WriteReadRoundTrip) {
    TempDir dir;
    Gen g(4);
    auto events = random_trace(g, 50);
    for (auto& e : events) e.ts += Duration{1'700'000'000'000'000};
    pcap::write(dir / "rt.pcap", events);
    auto r = pcap::read(dir / "rt.pcap");
    EXPECT_FALSE(r.truncated);
    ASSERT_EQ(r.events.size(), events.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
        EXPECT_EQ(r.events[i].packet, events[i].packet);
        EXPECT_EQ(r.events[i].ts, events[i].ts);
    }
}

TEST(Pcap, EthernetFramesMatchReferenceDump) {
    auto r = pcap::read(data_path("pcap/ethernet.pcap"));
    EXPECT_EQ(r.link, pcap::LinkType::Ethernet);
    std::istringstream dump(slurp(data_path("pcap/ethernet.dump")));
    std::string line;
    std::size_t i = 0, skipped = 0;
    while (std::getline(dump, line)) {
        if (line.rfind("# skipped", 0) == 0) {
            ++skipped;
            continue;
        }
        auto space = line.find(' ');
        ASSERT_LT(i, r.events.size());
        EXPECT_EQ(r.events[i].ts.count(), std::stoll(line.substr(0, space)));
        EXPECT_EQ(to_hex(r.events[i].packet), line.substr(space + 1));
        EXPECT_TRUE(parse_packet(r.events[i].packet)) << "frame " << i;
        ++i;
    }
    EXPECT_EQ(i, r.events.size());
    EXPECT_EQ(r.skipped_non_ipv4, skipped);
}

TEST(Pcap, TruncatedLastRecord) {
    TempDir dir;
    Gen g(9);
    auto events = random_trace(g, 5);
    pcap::write(dir / "t.pcap", events);
    auto bytes = slurp(dir / "t.pcap");
    dir.write("cut.pcap", bytes.substr(0, bytes.size() - 3));
    auto r = pcap::read(dir / "cut.pcap");
    ASSERT_TRUE(r.truncated);
    EXPECT_EQ(r.truncated->code(), ErrorCode::TruncatedCapture);
    EXPECT_EQ(r.events.size(), 4u);
}

TEST(Pcap, BadMagic) {
    TempDir dir;
    dir.write("x.pcap", std::string(24, 'x'));
    try {
        pcap::read(dir / "x.pcap");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BadMagic);
    }
}

TEST(SimUpstream, ResetOnConnectRefuses) {
    VirtualClock clock;
    SimUpstream up({script("10.1.0.0/16", 80, ResetOnConnectBehavior{})}, 1, clock);
    auto h = up.open_stream(ep("10.1.2.3:80")).value();
    auto evs = drain(up, clock);
    ASSERT_EQ(evs.size(), 1u);
    EXPECT_EQ(evs[0].handle, h);
    EXPECT_EQ(evs[0].kind, UpstreamEventKind::ConnectRefused);
}

TEST(SimUpstream, EchoReturnsBytes) {
    VirtualClock clock;
    SimUpstream up({script("10.1.0.0/16", 80, EchoBehavior{})}, 1, clock);
    auto h = up.open_stream(ep("10.1.2.3:80")).value();
    auto evs = drain(up, clock);
    ASSERT_EQ(evs.size(), 1u);
    EXPECT_EQ(evs[0].kind, UpstreamEventKind::Connected);
    up.send(h, to_bytes("abc"));
    drain(up, clock);
    auto r = up.receive(h, 100);
    EXPECT_EQ(r.data, to_bytes("abc"));
}

TEST(SimUpstream, DnsAnswerHonoursDelay) {
    VirtualClock clock;
    DnsResponderBehavior dnsb;
    dnsb.answers["example.com"] = {Ipv4Address{93, 184, 216, 34}};
    dnsb.delay = std::chrono::milliseconds(20);
    SimUpstream up({script("8.8.8.8/32", 53, dnsb)}, 1, clock);
    auto h = up.open_datagram().value();
    Timestamp sent = clock.now();
    up.send_to(h, ep("8.8.8.8:53"), dns::build_query(0x1234, "example.com"));
    auto evs = drain(up, clock);
    ASSERT_EQ(evs.size(), 1u);
    EXPECT_GE(evs[0].at - sent, std::chrono::milliseconds(20));
    auto msg = dns::parse(evs[0].data).value();
    EXPECT_EQ(msg.id, 0x1234);
    EXPECT_EQ(msg.a_records(), (std::set<Ipv4Address>{Ipv4Address{93, 184, 216, 34}}));
}

TEST(SimUpstream, UnmatchedIsBlackhole) {
    VirtualClock clock;
    SimUpstream up({}, 1, clock);
    up.open_stream(ep("10.9.9.9:80"));
    EXPECT_FALSE(up.next_event_time());
    EXPECT_EQ(up.active_handle_count(), 1u);
}

TEST(SimUpstream, OverlappingScriptsRejected) {
    VirtualClock clock;
    EXPECT_THROW(SimUpstream({script("10.0.0.0/8", 80, EchoBehavior{}), script("10.1.0.0/16", std::nullopt, EchoBehavior{})},
                             1, clock),
                 Error);
    EXPECT_NO_THROW(SimUpstream({script("10.0.0.0/8", 80, EchoBehavior{}), script("10.1.0.0/16", 443, EchoBehavior{})},
                                1, clock));
}

TEST(SimUpstreamProperty, HandleAccountingAndDeterminism) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto run = [&] {
            VirtualClock clock;
            auto s = script("10.0.0.0/8", std::nullopt, EchoBehavior{std::chrono::milliseconds(1)});
            s.jitter = std::chrono::milliseconds(3);
            SimUpstream up({s}, seed, clock);
            Gen g(seed);
            std::vector<HandleId> open;
            std::size_t opened = 0, closed = 0;
            std::vector<std::pair<std::int64_t, HandleId>> log;
            for (int i = 0; i < 200; ++i) {
                if (open.empty() || g.coin(0.6)) {
                    open.push_back(up.open_stream(Endpoint{Ipv4Address{10, 0, 0, g.u8()}, 80}).value());
                    ++opened;
                } else {
                    auto k = g.range(0, open.size() - 1);
                    up.close(open[k]);
                    open.erase(open.begin() + static_cast<std::ptrdiff_t>(k));
                    ++closed;
                }
                EXPECT_EQ(up.active_handle_count(), opened - closed);
                clock.advance(std::chrono::microseconds(g.range(0, 2000)));
                while (auto ev = up.poll_event(clock.now())) log.emplace_back(ev->at.count(), ev->handle);
            }
            for (const auto& ev : drain(up, clock)) log.emplace_back(ev.at.count(), ev.handle);
            return log;
        };
        auto a = run();
        EXPECT_EQ(a, run());
        std::set<HandleId> connected;
        for (const auto& [_, h] : a) EXPECT_TRUE(connected.insert(h).second) << "connect fired twice";
    }
}
