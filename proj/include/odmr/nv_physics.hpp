#pragma once

#include "odmr/common.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace odmr {

enum class Lineshape { Gaussian, Lorentzian };

struct HyperfineLine {
    double offset_hz = 0.0;
    double weight = 1.0;
};

/// Proportionality between Rabi frequency and sqrt(MW power) at 2.5 MHz for 14.74 W.
inline const double default_rabi_coefficient = 2.5e6 / std::sqrt(14.74);
/// 13C gyromagnetic ratio, Hz/G.
inline constexpr double gamma_c13_hz_per_gauss = 1070.5;

struct EnsembleConfig {
    double b0_field = 43.62;
    double center_frequency = 2.74864e9;
    double gamma_e = 2.8025e6;
    double rabi_coefficient = default_rabi_coefficient;
    std::vector<HyperfineLine> hyperfine_lines{
        {-2.0e6, 1.0 / 3.0}, {0.0, 1.0 / 3.0}, {2.0e6, 1.0 / 3.0}};
    Lineshape lineshape = Lineshape::Gaussian;
    /// Gaussian sigma (or Lorentzian half width) of each line, Hz.
    double detuning_spread_sigma = 601.4e3;
    double t1 = 6.274e-3;
    double t2_alpha = 3.438e-6;
    double stretch_n = 1.5;
    double t2_beta = 68.12e-6;
    double t_rev = 1.0 / (gamma_c13_hz_per_gauss * 43.62);
    double t_dec = 3.438e-6;
    double tau_repol = 138.07e-6;
    /// Drive-on damping 1/T = 1/rabi_t20 + rabi_loss_per_cycle * f_rabi.
    double rabi_t20 = 3.3e-6;
    double rabi_loss_per_cycle = 0.1;
    double resonant_fraction = 0.25;
    double contrast_scale = 0.05;
    double base_pl = 1.0;
    int n_subensembles = 999;

    void validate() const {
        auto time = [](double v, const char* name) {
            if (!(v > 0.0)) throw ConfigError(std::string("ensemble.") + name + " must be > 0");
        };
        time(t1, "t1");
        time(t2_alpha, "t2_alpha");
        time(t2_beta, "t2_beta");
        time(t_rev, "t_rev");
        time(t_dec, "t_dec");
        time(tau_repol, "tau_repol");
        time(rabi_t20, "rabi_t20");
        if (!(stretch_n > 0.0) || !std::isfinite(stretch_n))
            throw ConfigError("ensemble.stretch_n must be > 0");
        if (!(rabi_loss_per_cycle >= 0.0) || !std::isfinite(rabi_loss_per_cycle))
            throw ConfigError("ensemble.rabi_loss_per_cycle must be >= 0");
        if (!(rabi_coefficient >= 0.0) || !std::isfinite(rabi_coefficient))
            throw ConfigError("ensemble.rabi_coefficient must be >= 0");
        if (!(detuning_spread_sigma >= 0.0) || !std::isfinite(detuning_spread_sigma))
            throw ConfigError("ensemble.detuning_spread_sigma must be >= 0");
        if (!(resonant_fraction > 0.0 && resonant_fraction <= 1.0))
            throw ConfigError("ensemble.resonant_fraction must be in (0, 1]");
        if (!(contrast_scale >= 0.0 && contrast_scale <= 1.0))
            throw ConfigError("ensemble.contrast_scale must be in [0, 1]");
        if (!(base_pl > 0.0) || !std::isfinite(base_pl))
            throw ConfigError("ensemble.base_pl must be > 0");
        if (n_subensembles < 3) throw ConfigError("ensemble.n_subensembles must be >= 3");
        if (hyperfine_lines.empty()) throw ConfigError("ensemble.hyperfine_lines must be nonempty");
        if (static_cast<int>(hyperfine_lines.size()) > n_subensembles)
            throw ConfigError("ensemble.n_subensembles must be >= number of hyperfine lines");
        double sum = 0.0;
        for (const auto& l : hyperfine_lines) {
            if (!(l.weight > 0.0) || !std::isfinite(l.offset_hz))
                throw ConfigError("ensemble.hyperfine_lines weights must be > 0");
            sum += l.weight;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ConfigError("ensemble.hyperfine_lines weights must sum to 1");
    }

    /// Same ensemble with every decoherence and relaxation channel switched off.
    EnsembleConfig undamped() const {
        constexpr double inf = std::numeric_limits<double>::infinity();
        EnsembleConfig c = *this;
        c.t1 = c.t2_alpha = c.t2_beta = c.rabi_t20 = c.tau_repol = inf;
        c.t_dec = inf;
        c.rabi_loss_per_cycle = 0.0;
        return c;
    }
};

struct Member {
    Eigen::Vector3d bloch{0.0, 0.0, 1.0};
    double detuning = 0.0;
    double weight = 0.0;
};

struct EnsembleState {
    std::vector<Member> members;
    double nonresonant_p0 = 1.0;
    /// Free-precession time accumulated inside the current echo window.
    double elapsed_free_precession = 0.0;
};

struct PLTrace {
    double t0 = 0.0;
    double dt = 1.0;
    std::vector<double> samples;
};

/// Inverse standard normal CDF.
inline double normal_quantile(double p) {
    return std::sqrt(2.0) * boost::math::erf_inv(2.0 * p - 1.0);
}

/// Stratified, deterministic sampling: members split evenly across hyperfine lines,
/// detunings at the mid-quantiles of each line's lineshape.
inline EnsembleState init_ensemble(const EnsembleConfig& cfg) {
    cfg.validate();
    EnsembleState st;
    const int lines = static_cast<int>(cfg.hyperfine_lines.size());
    const int base = cfg.n_subensembles / lines;
    const int extra = cfg.n_subensembles % lines;
    st.members.reserve(static_cast<std::size_t>(cfg.n_subensembles));
    for (int li = 0; li < lines; ++li) {
        const auto& line = cfg.hyperfine_lines[static_cast<std::size_t>(li)];
        const int m = base + (li < extra ? 1 : 0);
        for (int k = 0; k < m; ++k) {
            const double q = (k + 0.5) / m;
            double d = 0.0;
            if (cfg.detuning_spread_sigma > 0.0) {
                d = cfg.lineshape == Lineshape::Gaussian
                        ? cfg.detuning_spread_sigma * normal_quantile(q)
                        : cfg.detuning_spread_sigma * std::tan(std::numbers::pi * (q - 0.5));
            }
            st.members.push_back({Eigen::Vector3d(0.0, 0.0, 1.0), line.offset_hz + d, line.weight / m});
        }
    }
    return st;
}

inline double rabi_frequency_from_power(double power_w, const EnsembleConfig& cfg) {
    if (!(power_w >= 0.0)) throw ConfigError("microwave power must be >= 0");
    return cfg.rabi_coefficient * std::sqrt(power_w);
}

/// Drive-on envelope time constant at a given Rabi frequency.
inline double rabi_damping_time(double f_rabi, const EnsembleConfig& cfg) {
    const double rate = 1.0 / cfg.rabi_t20 + cfg.rabi_loss_per_cycle * f_rabi;
    return rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity();
}

/// Effective dephasing time of a single Gaussian line.
inline double t2_star_of_spread(double sigma_hz) {
    return 1.0 / (std::sqrt(2.0) * std::numbers::pi * sigma_hz);
}

inline double spread_for_t2_star(double t2_star) {
    return 1.0 / (std::sqrt(2.0) * std::numbers::pi * t2_star);
}

inline EnsembleState free_evolve(EnsembleState state, double duration, bool echo_context,
                                 const EnsembleConfig& cfg);

/// Rotation about the rotating-frame field (-f sin(phase), f cos(phase), detuning); phase 0
/// drives about +y.
inline EnsembleState apply_mw_pulse(EnsembleState state, double duration, double f_rabi,
                                    double phase, const EnsembleConfig& cfg) {
    if (!(duration >= 0.0)) throw ConfigError("pulse duration must be >= 0");
    if (duration == 0.0) return state;
    if (f_rabi == 0.0) return free_evolve(std::move(state), duration, false, cfg);
    const double damp = std::exp(-duration / rabi_damping_time(f_rabi, cfg));
    const double fx = -f_rabi * std::sin(phase), fy = f_rabi * std::cos(phase);
    for (auto& m : state.members) {
        const Eigen::Vector3d omega(fx, fy, m.detuning);
        const double mag = omega.norm();
        const Eigen::Vector3d k = omega / mag;
        const double theta = two_pi * mag * duration;
        const double c = std::cos(theta), s = std::sin(theta);
        const Eigen::Vector3d& v = m.bloch;
        const double kv = k.dot(v);
        Eigen::Vector3d r = v * c + k.cross(v) * s + k * (kv * (1.0 - c));
        const Eigen::Vector3d par = k * k.dot(r);
        m.bloch = par + (r - par) * damp;
    }
    return state;
}

/// Free precession about z. Outside echo windows the transverse part decays with t2_alpha;
/// inside, decoherence is deferred to refocus_decoherence.
inline EnsembleState free_evolve(EnsembleState state, double duration, bool echo_context,
                                 const EnsembleConfig& cfg) {
    if (!(duration >= 0.0)) throw ConfigError("free evolution duration must be >= 0");
    if (duration == 0.0) return state;
    const double t2 = echo_context ? 1.0 : std::exp(-duration / cfg.t2_alpha);
    const double t1 = std::exp(-duration / cfg.t1);
    for (auto& m : state.members) {
        const double ang = two_pi * m.detuning * duration;
        const double c = std::cos(ang), s = std::sin(ang);
        const double x = m.bloch.x(), y = m.bloch.y();
        m.bloch.x() = (x * c - y * s) * t2;
        m.bloch.y() = (x * s + y * c) * t2;
        m.bloch.z() *= t1;
    }
    state.nonresonant_p0 = 0.5 + (state.nonresonant_p0 - 0.5) * t1;
    if (echo_context) state.elapsed_free_precession += duration;
    return state;
}

/// Coherence factor for an echo with per-arm free time tau; 1 at tau = 0.
inline double echo_envelope(double tau, const EnsembleConfig& cfg) {
    if (!(tau >= 0.0)) throw ConfigError("echo time must be >= 0");
    auto train = [&](double t) {
        double s = 0.0;
        for (int j = 0; j <= 10; ++j) {
            if (std::isinf(cfg.t_dec)) {
                s += 1.0;
                continue;
            }
            const double u = (t - j * cfg.t_rev) / cfg.t_dec;
            s += std::exp(-u * u);
        }
        return s;
    };
    const double decay = std::exp(-std::pow(tau / cfg.t2_beta, cfg.stretch_n));
    return std::clamp(decay * train(tau) / train(0.0), 0.0, 1.0);
}

/// Applies the echo envelope for the free time accumulated in the current echo window.
inline EnsembleState refocus_decoherence(EnsembleState state, const EnsembleConfig& cfg) {
    const double f = echo_envelope(0.5 * state.elapsed_free_precession, cfg);
    for (auto& m : state.members) {
        m.bloch.x() *= f;
        m.bloch.y() *= f;
    }
    state.elapsed_free_precession = 0.0;
    return state;
}

inline double resonant_p0(const EnsembleState& state) {
    double s = 0.0;
    for (const auto& m : state.members) s += m.weight * 0.5 * (1.0 + m.bloch.z());
    return s;
}

inline double pl_from_populations(double res_p0, double nonres_p0, const EnsembleConfig& cfg) {
    const double rf = cfg.resonant_fraction;
    return cfg.base_pl * (1.0 + cfg.contrast_scale * (rf * res_p0 + (1.0 - rf) * nonres_p0 - 1.0));
}

inline double pl_level(const EnsembleState& state, const EnsembleConfig& cfg) {
    return pl_from_populations(resonant_p0(state), state.nonresonant_p0, cfg);
}

/// Magnitude of the weighted mean transverse Bloch component.
inline double transverse_magnitude(const EnsembleState& state) {
    double x = 0.0, y = 0.0;
    for (const auto& m : state.members) {
        x += m.weight * m.bloch.x();
        y += m.weight * m.bloch.y();
    }
    return std::hypot(x, y);
}

/// Optical repolarization for `duration`. The trace is sampled at first_offset + k*dt for all
/// sample times strictly before `duration`.
/// `n_samples` overrides the sample count when the caller partitions a shared sample clock.
inline std::pair<EnsembleState, PLTrace> laser_evolve(EnsembleState state, double duration,
                                                      double dt, const EnsembleConfig& cfg,
                                                      double first_offset = 0.0,
                                                      std::ptrdiff_t n_samples = -1) {
    if (!(duration > 0.0)) throw ConfigError("laser duration must be > 0");
    if (!(dt > 0.0)) throw ConfigError("laser trace dt must be > 0");
    PLTrace trace;
    trace.t0 = first_offset;
    trace.dt = dt;

    const double s0 = resonant_p0(state);
    const double n0 = state.nonresonant_p0;
    const double rf = cfg.resonant_fraction;
    // All populations share tau_repol, so PL deficit decays as one exponential.
    const double deficit0 = cfg.base_pl * cfg.contrast_scale * (rf * (1.0 - s0) + (1.0 - rf) * (1.0 - n0));
    if (n_samples < 0)
        n_samples = first_offset < duration
                        ? static_cast<std::ptrdiff_t>(std::ceil((duration - first_offset) / dt - 1e-9))
                        : 0;
    {
        const auto n = static_cast<std::size_t>(n_samples);
        trace.samples.resize(n);
        const double q = std::exp(-dt / cfg.tau_repol);
        double deficit = deficit0 * std::exp(-first_offset / cfg.tau_repol);
        for (std::size_t k = 0; k < n; ++k) {
            trace.samples[k] = std::max(0.0, cfg.base_pl - deficit);
            deficit *= q;
        }
    }

    const double e = std::exp(-duration / cfg.tau_repol);
    for (auto& m : state.members) {
        m.bloch.x() *= e;
        m.bloch.y() *= e;
        m.bloch.z() = 1.0 - (1.0 - m.bloch.z()) * e;
    }
    state.nonresonant_p0 = 1.0 - (1.0 - n0) * e;
    state.elapsed_free_precession = 0.0;
    return {std::move(state), std::move(trace)};
}

}  // namespace odmr
