#pragma once

#include "odmr/common.hpp"
#include "odmr/nv_physics.hpp"
#include "odmr/pulse_seq.hpp"

#include <boost/random/normal_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace odmr {

struct ApdConfig {
    double responsivity = 0.5;
    /// Single-pole bandwidth; infinity disables filtering.
    double bandwidth = 10e6;
    double noise_sigma = 0.01;
    double sample_rate = 50e6;

    void validate() const {
        if (!(responsivity > 0.0) || !std::isfinite(responsivity))
            throw ConfigError("apd.responsivity must be > 0");
        if (!(bandwidth > 0.0)) throw ConfigError("apd.bandwidth must be > 0");
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
            throw ConfigError("apd.noise_sigma must be >= 0");
        if (!(sample_rate > 0.0) || !std::isfinite(sample_rate))
            throw ConfigError("apd.sample_rate must be > 0");
    }
};

enum class DriftMode { Additive, Multiplicative };

/// Baseline wander. Additive mode adds `offset` volts; multiplicative mode scales by 1 + offset.
struct DriftState {
    double offset = 0.0;
    /// Random-walk intensity, volts per sqrt(second) of wall time.
    double step_sigma = 0.0;
    double clamp = 0.1;
    DriftMode mode = DriftMode::Additive;
    /// Wall-clock time attributed to one acquisition cycle (20 s per 200 cycles).
    double cycle_interval = 0.1;

    void validate() const {
        if (!(step_sigma >= 0.0) || !std::isfinite(step_sigma))
            throw ConfigError("drift.step_sigma must be >= 0");
        if (!(clamp >= 0.0) || !std::isfinite(clamp)) throw ConfigError("drift.clamp must be >= 0");
        if (!(std::abs(offset) <= clamp)) throw ConfigError("drift.offset must lie within +-clamp");
        if (!(cycle_interval > 0.0)) throw ConfigError("drift.cycle_interval must be > 0");
    }

    double apply(double v) const {
        return mode == DriftMode::Additive ? v + offset : v * (1.0 + offset);
    }
};

inline DriftState drift_step(DriftState drift, double dt, std::uint64_t seed) {
    if (!(dt > 0.0)) throw ConfigError("drift step dt must be > 0");
    if (drift.step_sigma == 0.0) return drift;
    Rng rng(seed);
    boost::random::normal_distribution<double> n01;
    drift.offset = std::clamp(drift.offset + drift.step_sigma * std::sqrt(dt) * n01(rng),
                              -drift.clamp, drift.clamp);
    return drift;
}

/// Low-pass filter then additive Gaussian noise, in place on PL samples. The filter starts
/// settled on the first sample.
inline void apd_transduce_inplace(std::vector<double>& samples, double dt, const ApdConfig& apd,
                                  std::uint64_t seed) {
    if (samples.empty()) return;
    const double alpha = std::isinf(apd.bandwidth) ? 1.0 : -std::expm1(-two_pi * apd.bandwidth * dt);
    double y = apd.responsivity * samples.front();
    for (auto& v : samples) {
        y += alpha * (apd.responsivity * v - y);
        v = y;
    }
    if (apd.noise_sigma > 0.0) {
        Rng rng(seed);
        boost::random::normal_distribution<double> noise(0.0, apd.noise_sigma);
        for (auto& v : samples) v += noise(rng);
    }
}

inline std::vector<double> apd_transduce(const PLTrace& trace, const ApdConfig& apd, std::uint64_t seed) {
    std::vector<double> out = trace.samples;
    apd_transduce_inplace(out, trace.dt, apd, seed);
    return out;
}

inline constexpr double ttl_high_volts = 5.0;

struct CycleOutput {
    std::vector<double> volts;
    std::vector<double> trigger;
    EnsembleState ensemble;
    DriftState drift;
};

namespace detail {

struct Piece {
    std::int64_t begin, end;  // ticks
    enum Kind { Dark, Laser, Mw } kind;
    double phase = 0.0;
    bool echo = false;
    bool last_echo_gap = false;
};

inline std::vector<Piece> cycle_pieces(const ChannelTimeline& tl) {
    const auto laser = tl.high_intervals(Channel::Laser);
    const auto mw = tl.high_intervals(Channel::Microwave);
    std::vector<std::int64_t> cuts{0, tl.total_ticks};
    for (auto& [b, e] : laser) cuts.insert(cuts.end(), {b, e});
    for (auto& [b, e] : mw) cuts.insert(cuts.end(), {b, e});
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    auto inside = [](const auto& ivs, std::int64_t t, std::size_t* which = nullptr) {
        for (std::size_t i = 0; i < ivs.size(); ++i)
            if (ivs[i].first <= t && t < ivs[i].second) {
                if (which) *which = i;
                return true;
            }
        return false;
    };

    std::vector<Piece> out;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        Piece p{cuts[i], cuts[i + 1], Piece::Dark};
        std::size_t w = 0;
        if (inside(laser, p.begin)) {
            p.kind = Piece::Laser;
        } else if (inside(mw, p.begin, &w)) {
            p.kind = Piece::Mw;
            p.phase = w < tl.mw_phases.size() ? tl.mw_phases[w] : 0.0;
        }
        out.push_back(p);
    }

    // Dark gaps between MW pulses of a window holding >= 3 pulses are echo arms.
    std::size_t i = 0;
    while (i < out.size()) {
        if (out[i].kind == Piece::Laser) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < out.size() && out[j].kind != Piece::Laser) ++j;
        std::vector<std::size_t> mw_idx;
        for (std::size_t k = i; k < j; ++k)
            if (out[k].kind == Piece::Mw) mw_idx.push_back(k);
        const bool echo_window = mw_idx.size() >= 3 || (tl.protocol_kind == ProtocolKind::Echo &&
                                                        mw_idx.size() >= 2);
        if (echo_window) {
            std::size_t last_gap = 0;
            for (std::size_t k = mw_idx.front() + 1; k < mw_idx.back(); ++k)
                if (out[k].kind == Piece::Dark) {
                    out[k].echo = true;
                    last_gap = k;
                }
            if (last_gap) out[last_gap].last_echo_gap = true;
        }
        i = j;
    }
    return out;
}

}  // namespace detail

/// Simulates one period of the timeline. Sample k lies at first_sample_offset + k / sample_rate.
inline CycleOutput run_cycle(const ChannelTimeline& tl, EnsembleState ensemble,
                             const EnsembleConfig& ens_cfg, double f_rabi, const ApdConfig& apd,
                             DriftState drift, std::uint64_t seed, double first_sample_offset = 0.0) {
    if (tl.channel(Channel::Laser).empty())
        throw SimulationError("timeline has no laser channel edges");
    if (tl.channel(Channel::Trigger).empty())
        throw SimulationError("timeline has no trigger channel edges");
    if (tl.total_ticks <= 0) throw SimulationError("timeline has zero period");

    const double fs = apd.sample_rate;
    const double dt = 1.0 / fs;
    const double period = tl.total_period();
    auto sample_index = [&](double t) {
        return static_cast<std::int64_t>(std::ceil((t - first_sample_offset) * fs - 1e-7));
    };
    const std::int64_t n = std::max<std::int64_t>(0, sample_index(period));

    CycleOutput out;
    PLTrace pl;
    pl.t0 = first_sample_offset;
    pl.dt = dt;
    pl.samples.assign(static_cast<std::size_t>(n), 0.0);

    for (const auto& p : detail::cycle_pieces(tl)) {
        const double t0 = tl.time_of(p.begin);
        const double dur = tl.time_of(p.end) - t0;
        switch (p.kind) {
            case detail::Piece::Laser: {
                const auto k0 = std::max<std::int64_t>(0, sample_index(t0));
                const auto k1 = std::min(n, sample_index(tl.time_of(p.end)));
                const double off = first_sample_offset + static_cast<double>(k0) * dt - t0;
                auto [st, tr] = laser_evolve(std::move(ensemble), dur, dt, ens_cfg, off,
                                             std::max<std::int64_t>(0, k1 - k0));
                ensemble = std::move(st);
                std::copy(tr.samples.begin(), tr.samples.end(),
                          pl.samples.begin() + static_cast<std::ptrdiff_t>(k0));
                break;
            }
            case detail::Piece::Mw:
                ensemble = apply_mw_pulse(std::move(ensemble), dur, f_rabi, p.phase, ens_cfg);
                break;
            case detail::Piece::Dark:
                ensemble = free_evolve(std::move(ensemble), dur, p.echo, ens_cfg);
                if (p.last_echo_gap) ensemble = refocus_decoherence(std::move(ensemble), ens_cfg);
                break;
        }
    }

    out.volts = std::move(pl.samples);
    apd_transduce_inplace(out.volts, dt, apd, derive_seed(seed, 1));
    if (drift.offset != 0.0)
        for (auto& v : out.volts) v = drift.apply(v);

    out.trigger.assign(static_cast<std::size_t>(n), 0.0);
    for (auto [b, e] : tl.high_intervals(Channel::Trigger)) {
        const auto k0 = std::clamp<std::int64_t>(sample_index(tl.time_of(b)), 0, n);
        const auto k1 = std::clamp<std::int64_t>(sample_index(tl.time_of(e)), 0, n);
        std::fill(out.trigger.begin() + k0, out.trigger.begin() + k1, ttl_high_volts);
    }

    out.ensemble = std::move(ensemble);
    out.drift = drift_step(drift, drift.cycle_interval, derive_seed(seed, 2));
    return out;
}

enum class TriggerEdge { Rising, Falling };

struct ScopeConfig {
    Channel trigger_channel = Channel::Trigger;
    TriggerEdge trigger_edge = TriggerEdge::Falling;
    double trigger_level = 2.5;
    double holdoff = 1e-3;
    double pretrigger_fraction = 0.0;
    std::size_t record_length = 1000;
    double sample_rate = 50e6;
    int n_averages = 1;

    double record_duration() const { return static_cast<double>(record_length) / sample_rate; }
    std::size_t pretrigger_samples() const {
        return static_cast<std::size_t>(std::llround(pretrigger_fraction * static_cast<double>(record_length)));
    }

    void validate() const {
        if (trigger_channel != Channel::Trigger)
            throw ConfigError("scope.trigger_channel: only the TTL trigger channel is simulated");
        if (record_length == 0) throw ConfigError("scope.record_length must be > 0");
        if (n_averages < 1) throw ConfigError("scope.n_averages must be >= 1");
        if (!(sample_rate > 0.0)) throw ConfigError("scope.sample_rate must be > 0");
        if (!(pretrigger_fraction >= 0.0 && pretrigger_fraction < 1.0))
            throw ConfigError("scope.pretrigger_fraction must be in [0, 1)");
        if (!(holdoff >= record_duration()))
            throw ConfigError("scope.holdoff must be >= record duration");
    }
};

struct AveragedWaveform {
    double t_rel_trigger = 0.0;
    double dt = 1.0;
    std::vector<double> samples;
    int n_averaged = 0;
    ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized;

    double time(std::size_t i) const { return t_rel_trigger + static_cast<double>(i) * dt; }
};

/// Edge detector with holdoff; `previous` is the sample preceding samples[0], if any.
class TriggerDetector {
public:
    explicit TriggerDetector(const ScopeConfig& cfg)
        : edge_(cfg.trigger_edge),
          level_(cfg.trigger_level),
          holdoff_samples_(static_cast<std::int64_t>(std::ceil(cfg.holdoff * cfg.sample_rate - 1e-9))) {}

    /// Feeds samples whose first element has absolute index `base`; returns accepted indices.
    std::vector<std::int64_t> feed(std::span<const double> samples, std::int64_t base) {
        std::vector<std::int64_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const double v = samples[i];
            if (has_prev_) {
                const bool crossed = edge_ == TriggerEdge::Falling ? (prev_ > level_ && v <= level_)
                                                                   : (prev_ < level_ && v >= level_);
                const std::int64_t idx = base + static_cast<std::int64_t>(i);
                if (crossed && (last_ < 0 || idx - last_ >= holdoff_samples_)) {
                    out.push_back(idx);
                    last_ = idx;
                }
            }
            prev_ = v;
            has_prev_ = true;
        }
        return out;
    }

private:
    TriggerEdge edge_;
    double level_;
    std::int64_t holdoff_samples_;
    double prev_ = 0.0;
    bool has_prev_ = false;
    std::int64_t last_ = -1;
};

inline std::vector<std::size_t> detect_trigger(std::span<const double> samples, const ScopeConfig& cfg) {
    TriggerDetector det(cfg);
    std::vector<std::size_t> out;
    for (auto i : det.feed(samples, 0)) out.push_back(static_cast<std::size_t>(i));
    return out;
}

struct CycleChunk {
    std::vector<double> volts;
    std::vector<double> trigger;
};

/// Sequential stream of simulated cycles sharing one global sample clock.
class SimulatedCycleSource {
public:
    SimulatedCycleSource(ChannelTimeline timeline, EnsembleConfig ensemble_cfg, double f_rabi,
                         ApdConfig apd, DriftState drift, std::uint64_t seed,
                         std::optional<std::size_t> max_cycles = std::nullopt)
        : tl_(std::move(timeline)),
          cfg_(std::move(ensemble_cfg)),
          f_rabi_(f_rabi),
          apd_(apd),
          drift_(drift),
          seed_(seed),
          max_cycles_(max_cycles),
          state_(init_ensemble(cfg_)) {
        apd_.validate();
        drift_.validate();
    }

    std::optional<CycleChunk> next() {
        if (max_cycles_ && cycle_ >= *max_cycles_) return std::nullopt;
        const double period = tl_.total_period();
        const double fs = apd_.sample_rate;
        const double start = static_cast<double>(cycle_) * period;
        const double first = std::ceil(start * fs - 1e-7) / fs - start;
        drift_history_.push_back(drift_.offset);
        auto out = run_cycle(tl_, std::move(state_), cfg_, f_rabi_, apd_, drift_,
                             derive_seed(seed_, cycle_), std::max(0.0, first));
        state_ = std::move(out.ensemble);
        drift_ = out.drift;
        ++cycle_;
        return CycleChunk{std::move(out.volts), std::move(out.trigger)};
    }

    double sample_rate() const { return apd_.sample_rate; }
    std::size_t cycles_run() const { return cycle_; }
    const DriftState& drift() const { return drift_; }
    /// Drift offset applied during each cycle so far.
    const std::vector<double>& drift_history() const { return drift_history_; }

private:
    ChannelTimeline tl_;
    EnsembleConfig cfg_;
    double f_rabi_;
    ApdConfig apd_;
    DriftState drift_;
    std::uint64_t seed_;
    std::optional<std::size_t> max_cycles_;
    EnsembleState state_;
    std::size_t cycle_ = 0;
    std::vector<double> drift_history_;
};

/// Streams cycles from `source` (anything with `std::optional<CycleChunk> next()` and
/// `sample_rate()`) until n_averages trigger-aligned records are summed.
template <class Source>
AveragedWaveform scope_acquire(Source& source, const ScopeConfig& cfg,
                               ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized) {
    cfg.validate();
    if (std::abs(source.sample_rate() - cfg.sample_rate) > 1e-9 * cfg.sample_rate)
        throw ConfigError("scope.sample_rate differs from the detector sample rate");

    const auto len = static_cast<std::int64_t>(cfg.record_length);
    const auto pre = static_cast<std::int64_t>(cfg.pretrigger_samples());
    TriggerDetector det(cfg);
    std::vector<double> sum(cfg.record_length, 0.0);
    std::vector<double> buffer;  // samples from absolute index buf_base
    std::int64_t buf_base = 0, produced = 0;
    std::deque<std::int64_t> pending;  // record start indices awaiting data
    int done = 0;

    while (done < cfg.n_averages) {
        auto chunk = source.next();
        if (!chunk)
            throw SimulationError("trigger starvation: captured " + std::to_string(done) + " of " +
                                  std::to_string(cfg.n_averages) + " records");
        for (auto t : det.feed(chunk->trigger, produced))
            if (t - pre >= 0) pending.push_back(t - pre);
        buffer.insert(buffer.end(), chunk->volts.begin(), chunk->volts.end());
        produced += static_cast<std::int64_t>(chunk->volts.size());

        while (!pending.empty() && done < cfg.n_averages && pending.front() + len <= produced) {
            const auto start = pending.front() - buf_base;
            for (std::int64_t i = 0; i < len; ++i)
                sum[static_cast<std::size_t>(i)] += buffer[static_cast<std::size_t>(start + i)];
            pending.pop_front();
            ++done;
        }
        const std::int64_t keep_from =
            pending.empty() ? std::max<std::int64_t>(buf_base, produced - pre - 1) : pending.front();
        if (keep_from > buf_base) {
            buffer.erase(buffer.begin(), buffer.begin() + (keep_from - buf_base));
            buf_base = keep_from;
        }
    }

    AveragedWaveform w;
    w.dt = 1.0 / cfg.sample_rate;
    w.t_rel_trigger = -static_cast<double>(pre) * w.dt;
    w.samples.resize(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) w.samples[i] = sum[i] / cfg.n_averages;
    w.n_averaged = cfg.n_averages;
    w.strategy = strategy;
    return w;
}

/// Hardware-facing boundary. A real backend would wrap a scope and TTL generator behind the
/// same three calls; only SimulatedScope ships.
class InstrumentDriver {
public:
    virtual ~InstrumentDriver() = default;
    virtual void configure(const ScopeConfig& cfg) = 0;
    virtual void arm() = 0;
    virtual AveragedWaveform fetch_averaged_waveform() = 0;
};

class SimulatedScope final : public InstrumentDriver {
public:
    SimulatedScope(SimulatedCycleSource source, ReferenceStrategy strategy)
        : source_(std::move(source)), strategy_(strategy) {}

    void configure(const ScopeConfig& cfg) override {
        cfg.validate();
        cfg_ = cfg;
    }
    void arm() override {
        if (!cfg_) throw SimulationError("scope armed before configure");
        armed_ = true;
    }
    AveragedWaveform fetch_averaged_waveform() override {
        if (!armed_) throw SimulationError("scope fetched before arm");
        armed_ = false;
        return scope_acquire(source_, *cfg_, strategy_);
    }
    SimulatedCycleSource& source() { return source_; }

private:
    SimulatedCycleSource source_;
    ReferenceStrategy strategy_;
    std::optional<ScopeConfig> cfg_;
    bool armed_ = false;
};

}  // namespace odmr
