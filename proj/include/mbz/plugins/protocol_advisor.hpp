#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "mbz/plugin/types.hpp"

namespace mbz {

enum class Recommendation : std::uint8_t { KeepTcp, WrapLossTolerant };

inline const char* to_string(Recommendation r) {
    return r == Recommendation::KeepTcp ? "KeepTcp" : "WrapLossTolerant";
}

struct AdvisorThresholds {
    double loss_rate_threshold = 0.02;
    std::size_t min_samples = 20;
};

struct PathStats {
    std::vector<Duration> syn_rtt;
    std::uint64_t data_segments = 0;
    std::uint64_t retransmissions = 0;

    std::size_t samples() const { return syn_rtt.size(); }
    double loss_estimate() const {
        return data_segments == 0 ? 0.0 : static_cast<double>(retransmissions) / static_cast<double>(data_segments);
    }
};

inline Recommendation recommend(const PathStats& s, const AdvisorThresholds& t) {
    if (s.samples() >= t.min_samples && s.loss_estimate() > t.loss_rate_threshold) return Recommendation::WrapLossTolerant;
    return Recommendation::KeepTcp;
}

// Per-destination TCP health. The recommendation is advisory only; traffic is never altered.
class ProtocolAdvisor final : public Plugin {
public:
    static constexpr std::string_view kId = "protocol-advisor";

    explicit ProtocolAdvisor(AdvisorThresholds thresholds = {}) : thresholds_(thresholds) {}

    static PluginDescriptor descriptor() {
        PluginDescriptor d;
        d.id = std::string(kId);
        d.name = "Protocol advisor";
        d.requested = {Permission::Observe};
        return d;
    }

    Verdict on_event(const PluginContext& ctx, ByteView payload, HostServices&) override {
        if (ctx.key.protocol != Transport::Tcp) return pass();
        const auto& key = ctx.key;
        switch (ctx.kind) {
            case EventKind::FlowOpen:
                syn_sent_[key] = ctx.clock;
                seen_[key].clear();
                break;
            case EventKind::PacketIn:
                if (ctx.tcp_flags.syn() && ctx.tcp_flags.ack()) {
                    if (auto it = syn_sent_.find(key); it != syn_sent_.end()) {
                        paths_[key.dst].syn_rtt.push_back(ctx.clock - it->second);
                        syn_sent_.erase(it);
                    }
                }
                break;
            case EventKind::PacketOut:
                if (!payload.empty()) {
                    auto& stats = paths_[key.dst];
                    ++stats.data_segments;
                    if (!seen_[key].insert({ctx.seq, payload.size()}).second) ++stats.retransmissions;
                }
                break;
            case EventKind::FlowClose:
                syn_sent_.erase(key);
                seen_.erase(key);
                break;
        }
        return pass();
    }

    const std::map<Endpoint, PathStats>& paths() const { return paths_; }
    Recommendation recommendation(const Endpoint& dst) const {
        auto it = paths_.find(dst);
        return it == paths_.end() ? Recommendation::KeepTcp : recommend(it->second, thresholds_);
    }

    nlohmann::json report() const override {
        auto rows = nlohmann::json::array();
        for (const auto& [dst, s] : paths_) {
            std::vector<Duration> rtts = s.syn_rtt;
            std::sort(rtts.begin(), rtts.end());
            nlohmann::json row{{"destination", dst.to_string()},
                               {"samples", s.samples()},
                               {"data_segments", s.data_segments},
                               {"retransmissions", s.retransmissions},
                               {"loss_estimate", s.loss_estimate()},
                               {"recommendation", to_string(recommend(s, thresholds_))}};
            if (!rtts.empty()) {
                row["syn_rtt_min_us"] = rtts.front().count();
                row["syn_rtt_median_us"] = rtts[(rtts.size() - 1) / 2].count();
                row["syn_rtt_max_us"] = rtts.back().count();
            }
            rows.push_back(std::move(row));
        }
        return {{"loss_rate_threshold", thresholds_.loss_rate_threshold},
                {"min_samples", thresholds_.min_samples},
                {"paths", std::move(rows)}};
    }

private:
    AdvisorThresholds thresholds_;
    std::map<Endpoint, PathStats> paths_;
    std::map<FlowKey, Timestamp> syn_sent_;
    std::map<FlowKey, std::set<std::pair<std::uint32_t, std::size_t>>> seen_;
};

}  // namespace mbz
