#pragma once

#include "odmr/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace odmr {

enum class Channel { Laser = 0, Microwave = 1, Trigger = 2 };
enum class Level { Low, High };
enum class ProtocolKind { Rabi, Ramsey, T1, Echo, Repolarization };
enum class ReferenceStrategy { MaxPolarized, PartialDepolarized };

inline constexpr std::array<Channel, 3> all_channels{Channel::Laser, Channel::Microwave,
                                                     Channel::Trigger};

inline std::string_view to_string(Channel c) {
    switch (c) {
        case Channel::Laser: return "laser";
        case Channel::Microwave: return "microwave";
        case Channel::Trigger: return "trigger";
    }
    return "?";
}

inline std::string_view to_string(ProtocolKind k) {
    switch (k) {
        case ProtocolKind::Rabi: return "Rabi";
        case ProtocolKind::Ramsey: return "Ramsey";
        case ProtocolKind::T1: return "T1";
        case ProtocolKind::Echo: return "Echo";
        case ProtocolKind::Repolarization: return "Repolarization";
    }
    return "?";
}

inline std::string_view to_string(ReferenceStrategy s) {
    return s == ReferenceStrategy::MaxPolarized ? "MaxPolarized" : "PartialDepolarized";
}

inline std::optional<ReferenceStrategy> parse_strategy(std::string_view s) {
    if (s == "MaxPolarized") return ReferenceStrategy::MaxPolarized;
    if (s == "PartialDepolarized") return ReferenceStrategy::PartialDepolarized;
    return std::nullopt;
}

struct TimingConfig {
    double laser_init_duration = 1.5e-3;
    double readout_duration = 200e-6;
    double buffer_after_laser = 1e-6;
    double compile_resolution = 2e-9;
    /// Width of the scope trigger pulse; its falling edge marks the reference instant.
    double trigger_width = 1e-6;

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v))
                throw ConfigError(std::string("timing.") + name + " must be > 0");
        };
        positive(laser_init_duration, "laser_init_duration");
        positive(readout_duration, "readout_duration");
        positive(buffer_after_laser, "buffer_after_laser");
        positive(compile_resolution, "compile_resolution");
        positive(trigger_width, "trigger_width");
        if (readout_duration >= laser_init_duration)
            throw ConfigError("timing.readout_duration must be shorter than laser_init_duration");
        if (trigger_width > laser_init_duration - readout_duration)
            throw ConfigError("timing.trigger_width must fit inside the init part of the laser pulse");
    }
};

struct Segment {
    Channel channel = Channel::Laser;
    double start = 0.0;
    double duration = 0.0;
    double mw_phase = 0.0;

    double end() const { return start + duration; }
};

struct PulseSequence {
    ProtocolKind protocol_kind = ProtocolKind::Rabi;
    std::vector<Segment> segments;
    ReferenceStrategy reference_strategy = ReferenceStrategy::MaxPolarized;
    std::string swept_symbol;
    bool export_readout_trace = false;
    std::vector<std::string> warnings;

    /// Cycle (or cycle-pair) period: the end of the last laser segment.
    double period() const {
        double p = 0.0;
        for (const auto& s : segments) p = std::max(p, s.end());
        return p;
    }
};

struct Violation {
    Channel channel;
    double time;
    std::string message;
};

namespace detail {

struct MwPulse {
    double offset;
    double duration;
};

inline void check_nonnegative(double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v))
        throw SequenceError(std::string(name) + " must be >= 0 (got " + std::to_string(v) + ")");
}

// Cycle layout: [init a = L - r][dark D][readout r], so the readout of one cycle and the
// init of the next form one physical laser pulse of length L across the cycle boundary.
// PartialDepolarized repeats the cycle without MW: [a][D+MW][L][D][r].
inline PulseSequence assemble(ProtocolKind kind, std::string swept, const std::vector<MwPulse>& mw,
                              double mw_span, double pre_gap, double post_gap,
                              const TimingConfig& timing, ReferenceStrategy strategy) {
    timing.validate();
    const double L = timing.laser_init_duration;
    const double r = timing.readout_duration;
    const double a = L - r;
    const double dark = pre_gap + mw_span + post_gap;

    PulseSequence seq;
    seq.protocol_kind = kind;
    seq.reference_strategy = strategy;
    seq.swept_symbol = std::move(swept);

    seq.segments.push_back({Channel::Laser, 0.0, a, 0.0});
    for (const auto& p : mw)
        if (p.duration > 0.0)
            seq.segments.push_back({Channel::Microwave, a + pre_gap + p.offset, p.duration, 0.0});

    if (strategy == ReferenceStrategy::MaxPolarized) {
        seq.segments.push_back({Channel::Laser, a + dark, r, 0.0});
    } else {
        seq.segments.push_back({Channel::Laser, a + dark, L, 0.0});
        seq.segments.push_back({Channel::Laser, a + dark + L + dark, r, 0.0});
    }

    if (kind == ProtocolKind::Repolarization) {
        // Trigger marks the readout rising edge so the scope records the repolarization trace.
        seq.export_readout_trace = true;
        seq.segments.push_back({Channel::Trigger, a + dark, timing.trigger_width, 0.0});
    } else {
        seq.segments.push_back({Channel::Trigger, a - timing.trigger_width, timing.trigger_width, 0.0});
    }

    std::stable_sort(seq.segments.begin(), seq.segments.end(),
                     [](const Segment& x, const Segment& y) { return x.start < y.start; });
    return seq;
}

}  // namespace detail

inline PulseSequence build_rabi(double tau_mw, const TimingConfig& timing,
                                ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized) {
    detail::check_nonnegative(tau_mw, "tau_mw");
    const double b = timing.buffer_after_laser;
    return detail::assemble(ProtocolKind::Rabi, "tau_mw", {{0.0, tau_mw}}, tau_mw, b, b, timing,
                            strategy);
}

inline PulseSequence build_ramsey(double t_free, double t_pi2, const TimingConfig& timing,
                                  ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized) {
    detail::check_nonnegative(t_free, "t_free");
    if (!(t_pi2 > 0.0)) throw SequenceError("t_pi2 must be > 0");
    const double b = timing.buffer_after_laser;
    return detail::assemble(ProtocolKind::Ramsey, "t_free",
                            {{0.0, t_pi2}, {t_pi2 + t_free, t_pi2}}, 2.0 * t_pi2 + t_free, b, b,
                            timing, strategy);
}

inline PulseSequence build_t1(double t_dark, const TimingConfig& timing,
                              ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized) {
    detail::check_nonnegative(t_dark, "t_dark");
    return detail::assemble(ProtocolKind::T1, "t_dark", {}, t_dark, 0.0, 0.0, timing, strategy);
}

inline PulseSequence build_echo(double t_deph, double t_reph, double t_pi2, double t_pi,
                                const TimingConfig& timing,
                                ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized,
                                std::string swept_symbol = "t_free") {
    detail::check_nonnegative(t_deph, "t_deph");
    detail::check_nonnegative(t_reph, "t_reph");
    detail::check_nonnegative(t_pi2, "t_pi2");
    detail::check_nonnegative(t_pi, "t_pi");
    const double b = timing.buffer_after_laser;
    const double span = t_pi2 + t_deph + t_pi + t_reph + t_pi2;
    auto seq = detail::assemble(ProtocolKind::Echo, std::move(swept_symbol),
                                {{0.0, t_pi2}, {t_pi2 + t_deph, t_pi}, {span - t_pi2, t_pi2}},
                                span, b, b, timing, strategy);
    if (std::abs(t_pi - 2.0 * t_pi2) > 1e-15)
        seq.warnings.push_back("t_pi differs from 2*t_pi2");
    return seq;
}

inline PulseSequence build_repolarization(double t_dark, const TimingConfig& timing) {
    detail::check_nonnegative(t_dark, "t_dark");
    return detail::assemble(ProtocolKind::Repolarization, "t_dark", {}, t_dark, 0.0, 0.0, timing,
                            ReferenceStrategy::MaxPolarized);
}

namespace detail {

struct Interval {
    double start, end;
};

inline std::vector<Interval> merged(const PulseSequence& seq, Channel ch) {
    std::vector<Interval> v;
    for (const auto& s : seq.segments)
        if (s.channel == ch && s.duration > 0.0) v.push_back({s.start, s.end()});
    std::sort(v.begin(), v.end(), [](auto& x, auto& y) { return x.start < y.start; });
    std::vector<Interval> out;
    for (const auto& i : v) {
        if (!out.empty() && i.start <= out.back().end)
            out.back().end = std::max(out.back().end, i.end);
        else
            out.push_back(i);
    }
    return out;
}

}  // namespace detail

/// Structural checks; an empty result means the sequence can be compiled.
inline std::vector<Violation> validate(const PulseSequence& seq) {
    std::vector<Violation> out;
    for (const auto& s : seq.segments) {
        if (!(s.duration > 0.0) || !std::isfinite(s.duration))
            out.push_back({s.channel, s.start, "segment duration must be > 0"});
        if (!(s.start >= 0.0) || !std::isfinite(s.start))
            out.push_back({s.channel, s.start, "segment starts before the cycle"});
    }

    for (Channel ch : all_channels) {
        std::vector<Segment> same;
        for (const auto& s : seq.segments)
            if (s.channel == ch) same.push_back(s);
        std::sort(same.begin(), same.end(), [](auto& x, auto& y) { return x.start < y.start; });
        for (std::size_t i = 1; i < same.size(); ++i)
            if (same[i].start < same[i - 1].end())
                out.push_back({ch, same[i].start, "overlaps previous segment on same channel"});
    }

    const auto laser = detail::merged(seq, Channel::Laser);
    if (laser.empty()) out.push_back({Channel::Laser, 0.0, "no laser segment"});

    for (const auto& s : seq.segments) {
        if (s.channel != Channel::Microwave) continue;
        bool inside_dark = true;
        for (const auto& l : laser)
            if (s.start <= l.end && s.end() >= l.start) inside_dark = false;
        if (laser.empty() || s.start <= laser.front().end || s.end() >= laser.back().start)
            inside_dark = false;
        if (!inside_dark)
            out.push_back({Channel::Microwave, s.start,
                           "microwave segment not strictly inside a laser-off interval"});
    }

    int triggers = 0;
    for (const auto& s : seq.segments)
        if (s.channel == Channel::Trigger) ++triggers;
    if (triggers != 1)
        out.push_back({Channel::Trigger, 0.0,
                       "expected exactly one trigger segment per period, found " +
                           std::to_string(triggers)});

    if (seq.reference_strategy == ReferenceStrategy::PartialDepolarized) {
        std::vector<Segment> pulses;
        for (const auto& s : seq.segments)
            if (s.channel == Channel::Laser) pulses.push_back(s);
        std::sort(pulses.begin(), pulses.end(), [](auto& x, auto& y) { return x.start < y.start; });
        if (pulses.size() != 3) {
            out.push_back({Channel::Laser, 0.0,
                           "partially depolarized sequence needs two init/readout cycles "
                           "(3 laser segments), found " +
                               std::to_string(pulses.size())});
        } else {
            for (const auto& s : seq.segments)
                if (s.channel == Channel::Microwave && s.start >= pulses[1].start)
                    out.push_back({Channel::Microwave, s.start,
                                   "microwave segment inside the reference cycle"});
        }
    }
    return out;
}

struct Edge {
    std::int64_t tick;
    Level level;

    bool operator==(const Edge&) const = default;
};

struct ChannelTimeline {
    double resolution = 2e-9;
    std::int64_t total_ticks = 0;
    std::array<std::vector<Edge>, 3> edges;
    /// Phase of each microwave high interval, in edge order.
    std::vector<double> mw_phases;
    ProtocolKind protocol_kind = ProtocolKind::Rabi;
    ReferenceStrategy reference_strategy = ReferenceStrategy::MaxPolarized;
    bool export_readout_trace = false;

    const std::vector<Edge>& channel(Channel c) const { return edges[static_cast<int>(c)]; }
    double total_period() const { return static_cast<double>(total_ticks) * resolution; }
    double time_of(std::int64_t tick) const { return static_cast<double>(tick) * resolution; }

    /// High intervals [start, end) in ticks over one period; a pulse wrapping the
    /// cycle boundary is reported as two intervals.
    std::vector<std::pair<std::int64_t, std::int64_t>> high_intervals(Channel c) const {
        std::vector<std::pair<std::int64_t, std::int64_t>> out;
        const auto& e = channel(c);
        Level lvl = e.empty() ? Level::Low : (e.front().tick == 0 ? Level::Low : e.back().level);
        std::int64_t since = 0;
        for (const auto& ed : e) {
            if (ed.level == Level::Low && lvl == Level::High && ed.tick > since)
                out.emplace_back(since, ed.tick);
            if (ed.level == Level::High) since = ed.tick;
            lvl = ed.level;
        }
        if (lvl == Level::High && since < total_ticks) out.emplace_back(since, total_ticks);
        return out;
    }

    bool operator==(const ChannelTimeline&) const = default;
};

/// Quantizes a validated sequence to the resolution grid.
inline ChannelTimeline compile(const PulseSequence& seq, const TimingConfig& timing) {
    timing.validate();
    const auto violations = validate(seq);
    if (!violations.empty()) {
        std::ostringstream os;
        os << "invalid pulse sequence:";
        for (const auto& v : violations)
            os << " [" << to_string(v.channel) << " @ " << v.time << " s: " << v.message << "]";
        throw SequenceError(os.str());
    }
    const double res = timing.compile_resolution;
    const double res_ns = res * 1e9;
    if (std::abs(res_ns - std::round(res_ns)) > 1e-9)
        throw SequenceError("compile_resolution must be a whole number of nanoseconds");

    ChannelTimeline tl;
    tl.resolution = res;
    tl.protocol_kind = seq.protocol_kind;
    tl.reference_strategy = seq.reference_strategy;
    tl.export_readout_trace = seq.export_readout_trace;
    tl.total_ticks = std::llround(seq.period() / res);

    auto to_tick = [res](double t) { return static_cast<std::int64_t>(std::llround(t / res)); };

    for (Channel ch : all_channels) {
        struct TickSeg {
            std::int64_t start, end;
            double phase;
        };
        std::vector<TickSeg> ts;
        for (const auto& s : seq.segments) {
            if (s.channel != ch) continue;
            const auto b = to_tick(s.start), e = to_tick(s.end());
            if (e <= b)
                throw SequenceError(std::string(to_string(ch)) + " segment at " +
                                    std::to_string(s.start) + " s rounds to zero ticks");
            ts.push_back({b, e, s.mw_phase});
        }
        std::sort(ts.begin(), ts.end(), [](auto& x, auto& y) { return x.start < y.start; });
        std::vector<TickSeg> merged;
        for (const auto& t : ts) {
            if (!merged.empty() && t.start <= merged.back().end &&
                (ch != Channel::Microwave || t.phase == merged.back().phase))
                merged.back().end = std::max(merged.back().end, t.end);
            else if (!merged.empty() && t.start < merged.back().end)
                throw SequenceError("overlapping segments after quantization");
            else
                merged.push_back(t);
        }
        auto& edges = tl.edges[static_cast<int>(ch)];
        const bool wraps = !merged.empty() && merged.front().start == 0;
        for (const auto& m : merged) {
            edges.push_back({m.start, Level::High});
            if (!(wraps && m.end == tl.total_ticks)) edges.push_back({m.end, Level::Low});
            if (ch == Channel::Microwave) tl.mw_phases.push_back(m.phase);
        }
        if (!edges.empty() && edges.back().tick > tl.total_ticks)
            throw SequenceError("segment extends past the period");
    }
    return tl;
}

/// Plain-text edge list: header `total_period_ns N`, then `<channel> <time_ns> <level>`.
inline std::string export_timeline(const ChannelTimeline& tl) {
    const auto ns_per_tick = static_cast<std::int64_t>(std::llround(tl.resolution * 1e9));
    struct Line {
        std::int64_t tick;
        Channel ch;
        Level lvl;
    };
    std::vector<Line> lines;
    for (Channel ch : all_channels)
        for (const auto& e : tl.channel(ch)) lines.push_back({e.tick, ch, e.level});
    std::stable_sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) {
        return a.tick != b.tick ? a.tick < b.tick : static_cast<int>(a.ch) < static_cast<int>(b.ch);
    });
    std::ostringstream os;
    os << "total_period_ns " << tl.total_ticks * ns_per_tick << '\n';
    for (const auto& l : lines)
        os << to_string(l.ch) << ' ' << l.tick * ns_per_tick << ' '
           << (l.lvl == Level::High ? "high" : "low") << '\n';
    return os.str();
}

/// Parses an exported edge list at 1 ns resolution.
inline ChannelTimeline import_timeline(std::string_view text) {
    std::istringstream is{std::string(text)};
    std::string key;
    std::int64_t period_ns = 0;
    if (!(is >> key >> period_ns) || key != "total_period_ns" || period_ns <= 0)
        throw SequenceError("timeline file: missing total_period_ns header");
    ChannelTimeline tl;
    tl.resolution = 1e-9;
    tl.total_ticks = period_ns;
    std::string ch, lvl;
    std::int64_t t = 0;
    while (is >> ch >> t >> lvl) {
        int idx = ch == "laser" ? 0 : ch == "microwave" ? 1 : ch == "trigger" ? 2 : -1;
        if (idx < 0) throw SequenceError("timeline file: unknown channel '" + ch + "'");
        if (lvl != "high" && lvl != "low")
            throw SequenceError("timeline file: bad level '" + lvl + "'");
        if (t < 0 || t > period_ns) throw SequenceError("timeline file: edge outside period");
        tl.edges[idx].push_back({t, lvl == "high" ? Level::High : Level::Low});
        if (idx == 1 && lvl == "high") tl.mw_phases.push_back(0.0);
    }
    for (auto& e : tl.edges) {
        for (std::size_t i = 1; i < e.size(); ++i)
            if (e[i].tick < e[i - 1].tick || e[i].level == e[i - 1].level)
                throw SequenceError("timeline file: edges must be sorted and alternate");
    }
    return tl;
}

}  // namespace odmr
