#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mbz/plugin/types.hpp"
#include "mbz/proto/dns.hpp"

namespace mbz {

enum class Divergence : std::uint8_t { None, Timeout, AnswerMismatch, NxdomainRewrite };

inline const char* to_string(Divergence d) {
    switch (d) {
        case Divergence::None: return "None";
        case Divergence::Timeout: return "Timeout";
        case Divergence::AnswerMismatch: return "AnswerMismatch";
        case Divergence::NxdomainRewrite: return "NxdomainRewrite";
    }
    return "?";
}

// What one resolver said about one query. Unset rcode means no answer arrived in time.
struct ResolverAnswer {
    Endpoint resolver;
    std::optional<std::uint8_t> rcode;
    std::vector<Ipv4Address> answers;  // sorted A records
    Duration rtt{0};

    bool answered() const { return rcode.has_value(); }
};

// Pairwise classification of an alternate against the original answer.
inline Divergence classify(const ResolverAnswer& original, const ResolverAnswer& alternate) {
    if (!original.answered() || !alternate.answered()) return Divergence::Timeout;
    bool orig_nx = *original.rcode == dns::kRcodeNxDomain;
    bool alt_nx = *alternate.rcode == dns::kRcodeNxDomain;
    if (orig_nx != alt_nx) {
        // One side says the name does not exist while the other hands out an address.
        if ((orig_nx && !alternate.answers.empty()) || (alt_nx && !original.answers.empty())) {
            return Divergence::NxdomainRewrite;
        }
        return Divergence::AnswerMismatch;
    }
    if (*original.rcode != *alternate.rcode || original.answers != alternate.answers) return Divergence::AnswerMismatch;
    return Divergence::None;
}

// Most severe pairwise result wins.
inline Divergence combine(Divergence a, Divergence b) { return static_cast<int>(a) >= static_cast<int>(b) ? a : b; }

struct WhatIfProbe {
    std::string name;
    std::uint16_t qtype = dns::kTypeA;
    std::string app_label;
    Timestamp started{0};
    ResolverAnswer original;
    std::vector<ResolverAnswer> alternates;
    Divergence divergence = Divergence::None;
};

struct WhatIfSettings {
    std::vector<Endpoint> alternates;
    double sample_probability = 0.05;
    std::uint64_t seed = 0;
    Duration timeout = std::chrono::seconds(2);
};

// Re-asks sampled DNS queries at alternate resolvers and records how the answers differ.
class DnsWhatIf final : public Plugin {
public:
    static constexpr std::string_view kId = "dns-whatif";

    explicit DnsWhatIf(WhatIfSettings settings) : settings_(std::move(settings)), rng_(settings_.seed) {}

    static PluginDescriptor descriptor() {
        PluginDescriptor d;
        d.id = std::string(kId);
        d.name = "DNS what-if";
        d.requested = {Permission::Observe, Permission::InjectPackets};
        d.sampling = true;
        return d;
    }

    Verdict on_event(const PluginContext& ctx, ByteView payload, HostServices& host) override {
        if (ctx.key.protocol != Transport::Udp || ctx.key.dst.port != dns::kPort) return pass();
        if (ctx.kind == EventKind::PacketIn) {
            on_answer(ctx, payload, host.now());
            return pass();
        }
        if (!app_originated(ctx.kind)) return pass();
        auto msg = dns::parse(payload);
        if (!msg || msg->is_response() || msg->questions.empty()) return pass();
        ++queries_seen_;
        // One draw per query regardless of throttling keeps the sample stream stable.
        bool sampled = settings_.sample_probability > 0.0 &&
                       std::bernoulli_distribution(std::min(1.0, settings_.sample_probability))(rng_);
        if (!sampled) return pass();
        if (ctx.throttle) {
            ++throttled_skips_;
            return pass();
        }

        WhatIfProbe probe;
        probe.name = msg->questions.front().name;
        probe.qtype = msg->questions.front().qtype;
        probe.app_label = std::string(ctx.app_label);
        probe.started = host.now();
        probe.original.resolver = ctx.key.dst;
        std::size_t index = probes_.size();
        for (const auto& alt : settings_.alternates) {
            ResolverAnswer a;
            a.resolver = alt;
            probe.alternates.push_back(a);
        }
        probes_.push_back(std::move(probe));
        pending_originals_[{ctx.key, msg->id}] = index;
        open_[index] = settings_.alternates.size() + 1;
        for (std::size_t i = 0; i < settings_.alternates.size(); ++i) {
            auto id = host.send_probe(settings_.alternates[i], payload, settings_.timeout);
            if (id) {
                in_flight_[*id] = {index, i};
            } else {
                finish_part(index);  // refused by the host: counts as no answer
            }
        }
        return pass();
    }

    void on_probe_result(const ProbeResult& r, HostServices&) override {
        auto it = in_flight_.find(r.id);
        if (it == in_flight_.end()) return;
        auto [index, alt] = it->second;
        in_flight_.erase(it);
        auto& answer = probes_[index].alternates[alt];
        answer.rtt = r.rtt;
        if (r.response) fill(answer, *r.response);
        finish_part(index);
    }

    void on_tick(Timestamp now, HostServices&) override {
        for (auto it = pending_originals_.begin(); it != pending_originals_.end();) {
            auto index = it->second;
            if (now - probes_[index].started >= settings_.timeout) {
                it = pending_originals_.erase(it);
                finish_part(index);
            } else {
                ++it;
            }
        }
    }

    const std::vector<WhatIfProbe>& probes() const { return probes_; }
    std::size_t completed() const { return probes_.size() - open_.size(); }

    nlohmann::json report() const override {
        auto answer_json = [](const ResolverAnswer& a) {
            nlohmann::json j{{"resolver", a.resolver.to_string()}};
            if (a.answered()) {
                j["rcode"] = *a.rcode;
                auto addrs = nlohmann::json::array();
                for (auto addr : a.answers) addrs.push_back(addr.to_string());
                j["answers"] = std::move(addrs);
                j["rtt_us"] = a.rtt.count();
            } else {
                j["timeout"] = true;
            }
            return j;
        };
        auto rows = nlohmann::json::array();
        std::map<std::string, std::uint64_t> tally;
        for (std::size_t i = 0; i < probes_.size(); ++i) {
            const auto& p = probes_[i];
            bool done = !open_.contains(i);
            auto alts = nlohmann::json::array();
            for (const auto& a : p.alternates) alts.push_back(answer_json(a));
            rows.push_back({{"name", p.name},
                            {"qtype", p.qtype},
                            {"app", p.app_label},
                            {"started_us", p.started.count()},
                            {"original", answer_json(p.original)},
                            {"alternates", std::move(alts)},
                            {"divergence", done ? to_string(p.divergence) : "Pending"}});
            if (done) ++tally[to_string(p.divergence)];
        }
        return {{"queries_seen", queries_seen_},
                {"throttled_skips", throttled_skips_},
                {"divergence_counts", tally},
                {"probes", std::move(rows)}};
    }

private:
    static void fill(ResolverAnswer& a, ByteView response) {
        auto msg = dns::parse(response);
        if (!msg || !msg->is_response()) return;
        a.rcode = msg->rcode();
        auto addrs = msg->a_records();
        a.answers.assign(addrs.begin(), addrs.end());
    }

    void on_answer(const PluginContext& ctx, ByteView payload, Timestamp now) {
        if (payload.size() < 2) return;
        auto it = pending_originals_.find({ctx.key, load_be16(payload, 0)});
        if (it == pending_originals_.end()) return;
        auto index = it->second;
        pending_originals_.erase(it);
        auto& original = probes_[index].original;
        original.rtt = now - probes_[index].started;
        fill(original, payload);
        finish_part(index);
    }

    void finish_part(std::size_t index) {
        auto it = open_.find(index);
        if (it == open_.end() || --it->second > 0) return;
        open_.erase(it);
        auto& p = probes_[index];
        p.divergence = Divergence::None;
        for (const auto& alt : p.alternates) p.divergence = combine(p.divergence, classify(p.original, alt));
        if (p.alternates.empty() && !p.original.answered()) p.divergence = Divergence::Timeout;
    }

    WhatIfSettings settings_;
    std::mt19937_64 rng_;
    std::vector<WhatIfProbe> probes_;
    std::map<std::pair<FlowKey, std::uint16_t>, std::size_t> pending_originals_;
    std::map<ProbeId, std::pair<std::size_t, std::size_t>> in_flight_;
    std::map<std::size_t, std::size_t> open_;  // probe index -> outstanding parts
    std::uint64_t queries_seen_ = 0;
    std::uint64_t throttled_skips_ = 0;
};

}  // namespace mbz
