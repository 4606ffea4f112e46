#pragma once

#include "odmr/analysis.hpp"
#include "odmr/common.hpp"
#include "odmr/instruments.hpp"
#include "odmr/nv_physics.hpp"
#include "odmr/pulse_seq.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace odmr {

struct WindowSpec {
    double ref_start = 0.0, ref_end = 0.0, sig_start = 0.0, sig_end = 0.0;

    void validate() const {
        if (!(ref_end > ref_start) || !(sig_end > sig_start))
            throw ConfigError("window: each window needs positive length");
        if (ref_start < sig_end && sig_start < ref_end)
            throw ConfigError("window: reference and signal windows overlap");
    }
};

inline double contrast(double i_sig, double i_ref) {
    if (i_ref == 0.0) throw AnalysisError("contrast: reference intensity is zero");
    return (i_sig / i_ref - 1.0) * 100.0;
}

inline double window_mean(const AveragedWaveform& w, double start, double end) {
    const double eps = 1e-6 * w.dt;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const double t = w.time(i);
        if (t >= start - eps && t < end - eps) {
            sum += w.samples[i];
            ++n;
        }
    }
    if (n == 0)
        throw SimulationError("window [" + std::to_string(start) + ", " + std::to_string(end) +
                              ") holds no samples");
    return sum / static_cast<double>(n);
}

/// Returns (i_ref, i_sig).
inline std::pair<double, double> extract_windows(const AveragedWaveform& w, const WindowSpec& spec) {
    spec.validate();
    return {window_mean(w, spec.ref_start, spec.ref_end), window_mean(w, spec.sig_start, spec.sig_end)};
}

struct SweepRow {
    double value = 0.0;
    double i_sig = 0.0;
    double i_ref = 0.0;
    double contrast_pct = 0.0;
};

struct SweepResult {
    ProtocolKind protocol_kind = ProtocolKind::Rabi;
    std::string swept_symbol;
    ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized;
    bool serial_reference = false;
    int n_averages = 0;
    std::uint64_t seed = 0;
    std::vector<SweepRow> rows;
    std::vector<AveragedWaveform> waveforms;

    std::vector<double> values() const {
        std::vector<double> v;
        for (const auto& r : rows) v.push_back(r.value);
        return v;
    }
    std::vector<double> contrasts() const {
        std::vector<double> v;
        for (const auto& r : rows) v.push_back(r.contrast_pct);
        return v;
    }
};

using ProtocolBuilder = std::function<PulseSequence(double, const TimingConfig&, ReferenceStrategy)>;

/// Everything the simulated rig needs besides the protocol.
struct AcquisitionConfig {
    TimingConfig timing;
    EnsembleConfig ensemble;
    ApdConfig apd;
    DriftState drift;
    double mw_power = 14.74;
    int n_averages = 200;
    double sample_rate_maxpol = 50e6;
    double sample_rate_partial = 5e6;
    double trigger_level = 2.5;
    /// Delay between a laser rising edge and the start of its readout window.
    double window_guard = 0.5e-6;
    /// 0 picks the hardware concurrency.
    int threads = 0;
    bool shuffle = false;
    bool keep_waveforms = false;

    void validate() const {
        timing.validate();
        ensemble.validate();
        apd.validate();
        drift.validate();
        if (!(mw_power >= 0.0)) throw ConfigError("protocol.mw_power must be >= 0");
        if (n_averages < 1) throw ConfigError("protocol.n_averages must be >= 1");
        if (!(sample_rate_maxpol > 0.0)) throw ConfigError("scope.sample_rate_maxpol must be > 0");
        if (!(sample_rate_partial > 0.0)) throw ConfigError("scope.sample_rate_partial must be > 0");
        if (!(window_guard >= 0.0 && window_guard < timing.readout_duration))
            throw ConfigError("scope.window_guard must be in [0, readout_duration)");
        if (threads < 0) throw ConfigError("protocol.threads must be >= 0");
    }
};

struct PointPlan {
    ChannelTimeline timeline;
    ScopeConfig scope;
    WindowSpec windows;
    ApdConfig apd;
};

namespace detail {

inline std::vector<Segment> laser_segments(const PulseSequence& seq) {
    std::vector<Segment> v;
    for (const auto& s : seq.segments)
        if (s.channel == Channel::Laser) v.push_back(s);
    std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.start < b.start; });
    return v;
}

inline const Segment& trigger_segment(const PulseSequence& seq) {
    for (const auto& s : seq.segments)
        if (s.channel == Channel::Trigger) return s;
    throw SequenceError("sequence has no trigger segment");
}

}  // namespace detail

/// Window geometry relative to the trigger instant (the falling trigger edge, aligned with
/// the init laser falling edge). Readout windows start `guard` after a laser rising edge.
inline WindowSpec default_windows(const PulseSequence& seq, const TimingConfig& timing, double guard) {
    const auto laser = detail::laser_segments(seq);
    const double trig = detail::trigger_segment(seq).end();
    const double r = timing.readout_duration;
    WindowSpec w;
    if (seq.reference_strategy == ReferenceStrategy::MaxPolarized) {
        if (laser.size() < 2) throw SequenceError("max-polarized sequence needs a readout pulse");
        const double e1 = laser[1].start - trig;
        w = {-r, 0.0, e1 + guard, e1 + r};
    } else {
        if (laser.size() < 3) throw SequenceError("partially depolarized sequence needs 3 laser pulses");
        const double e1 = laser[1].start - trig;
        const double e2 = laser[2].start - trig;
        w = {e2 + guard, e2 + r, e1 + guard, e1 + r};
    }
    w.validate();
    return w;
}

inline PointPlan plan_point(const PulseSequence& seq, const AcquisitionConfig& cfg) {
    PointPlan p;
    p.timeline = compile(seq, cfg.timing);
    p.windows = default_windows(seq, cfg.timing, cfg.window_guard);
    p.apd = cfg.apd;
    const bool maxpol = seq.reference_strategy == ReferenceStrategy::MaxPolarized;
    p.apd.sample_rate = maxpol ? cfg.sample_rate_maxpol : cfg.sample_rate_partial;
    const double fs = p.apd.sample_rate;
    const double rec_start = std::min({0.0, p.windows.ref_start, p.windows.sig_start});
    const double rec_end = std::max(p.windows.ref_end, p.windows.sig_end);
    const auto pre = static_cast<std::size_t>(std::llround(-rec_start * fs));
    const auto len = static_cast<std::size_t>(std::ceil((rec_end - rec_start) * fs - 1e-9));
    p.scope.trigger_channel = Channel::Trigger;
    p.scope.trigger_edge = TriggerEdge::Falling;
    p.scope.trigger_level = cfg.trigger_level;
    p.scope.sample_rate = fs;
    p.scope.record_length = len;
    p.scope.pretrigger_fraction = static_cast<double>(pre) / static_cast<double>(len);
    p.scope.holdoff = static_cast<double>(len) / fs;
    p.scope.n_averages = cfg.n_averages;
    return p;
}

namespace detail {

/// Runs f(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& f) {
    std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                      : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard lock(err_mutex);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

/// Drift offset at the start of each acquisition slot, walked serially in acquisition order.
inline std::vector<double> drift_starts(const DriftState& drift, std::size_t points,
                                        std::size_t slots_per_point, int n_averages,
                                        std::uint64_t seed, bool shuffle) {
    std::vector<std::size_t> order(points);
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) {
        Rng rng(derive_seed(seed, 0x5AFF1E));
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<double> starts(points);
    DriftState d = drift;
    const double block = drift.cycle_interval * n_averages * static_cast<double>(slots_per_point);
    for (std::size_t k = 0; k < points; ++k) {
        starts[order[k]] = d.offset;
        d = drift_step(d, block, derive_seed(seed, 0xD71F7, k));
    }
    return starts;
}

template <class Fn>
decltype(auto) annotate(double value, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(e.what()) + " (swept value " + std::to_string(value) + ")");
    } catch (const SequenceError& e) {
        throw SequenceError(std::string(e.what()) + " (swept value " + std::to_string(value) + ")");
    } catch (const SimulationError& e) {
        throw SimulationError(std::string(e.what()) + " (swept value " + std::to_string(value) + ")");
    }
}

}  // namespace detail

inline SweepResult run_sweep(const ProtocolBuilder& builder, const std::vector<double>& values,
                             ReferenceStrategy strategy, const AcquisitionConfig& cfg,
                             std::uint64_t seed) {
    cfg.validate();
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    const double f_rabi = rabi_frequency_from_power(cfg.mw_power, cfg.ensemble);
    const auto starts = detail::drift_starts(cfg.drift, values.size(), 1, cfg.n_averages, seed, cfg.shuffle);

    SweepResult res;
    res.strategy = strategy;
    res.n_averages = cfg.n_averages;
    res.seed = seed;
    res.rows.resize(values.size());
    if (cfg.keep_waveforms) res.waveforms.resize(values.size());
    {
        const auto probe = builder(values.front(), cfg.timing, strategy);
        res.protocol_kind = probe.protocol_kind;
        res.swept_symbol = probe.swept_symbol;
    }

    detail::parallel_for(values.size(), cfg.threads, [&](std::size_t i) {
        detail::annotate(values[i], [&] {
            const auto seq = builder(values[i], cfg.timing, strategy);
            const auto plan = plan_point(seq, cfg);
            DriftState drift = cfg.drift;
            drift.offset = starts[i];
            SimulatedCycleSource src(plan.timeline, cfg.ensemble, f_rabi, plan.apd, drift,
                                     derive_seed(seed, 0x5EED, i));
            auto wf = scope_acquire(src, plan.scope, strategy);
            const auto [i_ref, i_sig] = extract_windows(wf, plan.windows);
            res.rows[i] = {values[i], i_sig, i_ref, contrast(i_sig, i_ref)};
            if (cfg.keep_waveforms) res.waveforms[i] = std::move(wf);
            return 0;
        });
    });
    return res;
}

/// Signal and reference from two consecutive averaged acquisitions (MW on, then MW removed),
/// both read from the readout window of a max-polarized record.
inline SweepResult serial_reference_sweep(const ProtocolBuilder& builder,
                                          const std::vector<double>& values,
                                          const AcquisitionConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    const double f_rabi = rabi_frequency_from_power(cfg.mw_power, cfg.ensemble);
    const auto starts = detail::drift_starts(cfg.drift, values.size(), 2, cfg.n_averages, seed, cfg.shuffle);

    SweepResult res;
    res.strategy = ReferenceStrategy::MaxPolarized;
    res.serial_reference = true;
    res.n_averages = cfg.n_averages;
    res.seed = seed;
    res.rows.resize(values.size());
    {
        const auto probe = builder(values.front(), cfg.timing, ReferenceStrategy::MaxPolarized);
        res.protocol_kind = probe.protocol_kind;
        res.swept_symbol = probe.swept_symbol;
    }

    detail::parallel_for(values.size(), cfg.threads, [&](std::size_t i) {
        detail::annotate(values[i], [&] {
            const auto with_mw = builder(values[i], cfg.timing, ReferenceStrategy::MaxPolarized);
            auto without_mw = with_mw;
            std::erase_if(without_mw.segments,
                          [](const Segment& s) { return s.channel == Channel::Microwave; });
            const auto plan_sig = plan_point(with_mw, cfg);
            const auto plan_ref = plan_point(without_mw, cfg);

            DriftState drift = cfg.drift;
            drift.offset = starts[i];
            SimulatedCycleSource sig_src(plan_sig.timeline, cfg.ensemble, f_rabi, plan_sig.apd, drift,
                                         derive_seed(seed, 0x5EED, i, 1));
            const auto wf_sig = scope_acquire(sig_src, plan_sig.scope);
            SimulatedCycleSource ref_src(plan_ref.timeline, cfg.ensemble, f_rabi, plan_ref.apd,
                                         sig_src.drift(), derive_seed(seed, 0x5EED, i, 2));
            const auto wf_ref = scope_acquire(ref_src, plan_ref.scope);
            const double i_sig = window_mean(wf_sig, plan_sig.windows.sig_start, plan_sig.windows.sig_end);
            const double i_ref = window_mean(wf_ref, plan_ref.windows.sig_start, plan_ref.windows.sig_end);
            res.rows[i] = {values[i], i_sig, i_ref, contrast(i_sig, i_ref)};
            return 0;
        });
    });
    return res;
}

struct RepolarizationResult {
    PLTrace trace;  // PL units, t0 relative to laser turn-on
    FitReport fit;
};

/// Records the PL trace of a readout pulse after a long dark time and fits its recovery.
inline RepolarizationResult measure_repolarization(const AcquisitionConfig& cfg, std::uint64_t seed,
                                                   double t_dark, double trace_length = 1.4e-3) {
    cfg.validate();
    TimingConfig timing = cfg.timing;
    // Long readout so that the whole recovery lies inside one cycle.
    timing.readout_duration = std::max(timing.readout_duration, trace_length + 10e-6);
    timing.laser_init_duration = std::max(timing.laser_init_duration,
                                          timing.readout_duration + timing.trigger_width + 50e-6);
    const auto seq = build_repolarization(t_dark, timing);
    const auto tl = compile(seq, timing);

    ApdConfig apd = cfg.apd;
    apd.sample_rate = cfg.sample_rate_partial;
    const double fs = apd.sample_rate;
    const double pre_time = 10e-6;
    ScopeConfig scope;
    scope.trigger_edge = TriggerEdge::Rising;
    scope.trigger_level = cfg.trigger_level;
    scope.sample_rate = fs;
    const auto pre = static_cast<std::size_t>(std::llround(pre_time * fs));
    scope.record_length = pre + static_cast<std::size_t>(std::ceil(trace_length * fs));
    scope.pretrigger_fraction = static_cast<double>(pre) / static_cast<double>(scope.record_length);
    scope.holdoff = scope.record_duration();
    scope.n_averages = cfg.n_averages;

    SimulatedCycleSource src(tl, cfg.ensemble, rabi_frequency_from_power(cfg.mw_power, cfg.ensemble),
                             apd, cfg.drift, derive_seed(seed, 0x7E90));
    const auto wf = scope_acquire(src, scope);

    RepolarizationResult out;
    out.trace.dt = wf.dt;
    const double edge_delay = cfg.window_guard;
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < wf.samples.size(); ++i) {
        const double t = wf.time(i);
        if (t < -1e-6 * wf.dt) continue;
        if (out.trace.samples.empty()) out.trace.t0 = t;
        const double pl = std::max(0.0, wf.samples[i] / apd.responsivity);
        out.trace.samples.push_back(pl);
        if (t >= edge_delay) {
            xs.push_back(t);
            ys.push_back(pl);
        }
    }
    out.fit = fit_repolarization(xs, ys);
    // A flat trace can also stall the fit, so the amplitude check comes first.
    const double amp = out.fit.value("A");
    if (!(std::abs(amp) > 3.0 * out.fit.sigma("A")) || amp == 0.0)
        throw AnalysisError("repolarization trace shows no decay");
    if (!out.fit.converged) throw AnalysisError("repolarization fit did not converge: " + out.fit.message);
    return out;
}

}  // namespace odmr
