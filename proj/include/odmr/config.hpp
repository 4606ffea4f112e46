#pragma once

#include "odmr/acquisition.hpp"
#include "odmr/analysis.hpp"
#include "odmr/format.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace odmr {

enum class ProtocolId { Rabi, Ramsey, T1, EchoRephase, EchoT2, EchoRevivals, Repolarization };

struct ProtocolInfo {
    ProtocolId id;
    std::string name;
    std::string swept_symbol;
    ReferenceStrategy default_strategy;
    double sweep_start, sweep_stop;
    int sweep_points;
    std::string fit;
    std::string summary;
};

inline const std::vector<ProtocolInfo>& protocol_registry() {
    static const std::vector<ProtocolInfo> reg{
        {ProtocolId::Rabi, "rabi", "tau_mw", ReferenceStrategy::MaxPolarized, 0.0, 2e-6, 50,
         "rabi2tone", "single MW pulse of swept length"},
        {ProtocolId::Ramsey, "ramsey", "t_free", ReferenceStrategy::MaxPolarized, 0.0, 2e-6, 60, "ramsey",
         "pi/2 - free precession - pi/2"},
        {ProtocolId::T1, "t1", "t_dark", ReferenceStrategy::MaxPolarized, 0.0, 30e-3, 31, "exp_decay",
         "two laser pulses separated by a swept dark time"},
        {ProtocolId::EchoRephase, "echo-rephase", "t_reph", ReferenceStrategy::MaxPolarized, 0.0, 2e-6, 41,
         "extremum", "Hahn echo with fixed dephasing time and swept rephasing time"},
        {ProtocolId::EchoT2, "echo-t2", "t_free", ReferenceStrategy::MaxPolarized, 0.0, 10e-6, 51,
         "stretched_exp", "Hahn echo with equal swept arms up to 10 us"},
        {ProtocolId::EchoRevivals, "echo-revivals", "t_free", ReferenceStrategy::PartialDepolarized, 0.0,
         200e-6, 201, "revival_train", "Hahn echo with equal swept arms up to 200 us"},
        {ProtocolId::Repolarization, "repolarization", "t", ReferenceStrategy::MaxPolarized, 0.0, 1.4e-3, 2,
         "single_exp_repol", "readout PL trace after a long dark time"},
    };
    return reg;
}

inline const ProtocolInfo& protocol_info(ProtocolId id) {
    for (const auto& p : protocol_registry())
        if (p.id == id) return p;
    throw ConfigError("unknown protocol id");
}

inline std::optional<ProtocolId> parse_protocol(std::string_view name) {
    for (const auto& p : protocol_registry())
        if (p.name == name) return p.id;
    return std::nullopt;
}

struct ScopeSection {
    double trigger_level = 2.5;
    double sample_rate_maxpol = 50e6;
    double sample_rate_partial = 5e6;
    double window_guard = 0.5e-6;
};

struct ProtocolSection {
    ProtocolId kind = ProtocolId::Rabi;
    double sweep_start = 0.0;
    double sweep_stop = 2e-6;
    int sweep_points = 50;
    ReferenceStrategy strategy = ReferenceStrategy::MaxPolarized;
    int n_averages = 200;
    std::uint64_t seed = 0;
    double mw_power = 14.74;
    double t_pi2 = 100e-9;
    double t_pi = 200e-9;
    double t_dephasing = 1e-6;
    double repol_dark_time = 10 * 6.274e-3;
    int threads = 0;
    bool shuffle = false;
};

struct OutputSection {
    std::string directory = "odmr-out";
    bool emit_waveforms = false;
};

struct RunConfig {
    EnsembleConfig ensemble;
    ApdConfig apd;
    DriftState drift;
    ScopeSection scope;
    TimingConfig timing;
    ProtocolSection protocol;
    OutputSection output;
};

inline std::vector<double> sweep_values(const ProtocolSection& p) {
    std::vector<double> v(static_cast<std::size_t>(p.sweep_points));
    for (int i = 0; i < p.sweep_points; ++i)
        v[static_cast<std::size_t>(i)] =
            p.sweep_start + (p.sweep_stop - p.sweep_start) * i / (p.sweep_points - 1);
    return v;
}

inline AcquisitionConfig to_acquisition(const RunConfig& c) {
    AcquisitionConfig a;
    a.timing = c.timing;
    a.ensemble = c.ensemble;
    a.apd = c.apd;
    a.drift = c.drift;
    a.mw_power = c.protocol.mw_power;
    a.n_averages = c.protocol.n_averages;
    a.sample_rate_maxpol = c.scope.sample_rate_maxpol;
    a.sample_rate_partial = c.scope.sample_rate_partial;
    a.trigger_level = c.scope.trigger_level;
    a.window_guard = c.scope.window_guard;
    a.threads = c.protocol.threads;
    a.shuffle = c.protocol.shuffle;
    a.keep_waveforms = c.output.emit_waveforms;
    return a;
}

inline ProtocolBuilder make_builder(const ProtocolSection& p) {
    const double t_pi2 = p.t_pi2, t_pi = p.t_pi, t_deph = p.t_dephasing;
    switch (p.kind) {
        case ProtocolId::Rabi:
            return [](double v, const TimingConfig& t, ReferenceStrategy s) { return build_rabi(v, t, s); };
        case ProtocolId::Ramsey:
            return [t_pi2](double v, const TimingConfig& t, ReferenceStrategy s) {
                return build_ramsey(v, t_pi2, t, s);
            };
        case ProtocolId::T1:
            return [](double v, const TimingConfig& t, ReferenceStrategy s) { return build_t1(v, t, s); };
        case ProtocolId::EchoRephase:
            return [=](double v, const TimingConfig& t, ReferenceStrategy s) {
                return build_echo(t_deph, v, t_pi2, t_pi, t, s, "t_reph");
            };
        case ProtocolId::EchoT2:
        case ProtocolId::EchoRevivals:
            return [=](double v, const TimingConfig& t, ReferenceStrategy s) {
                return build_echo(v, v, t_pi2, t_pi, t, s, "t_free");
            };
        case ProtocolId::Repolarization:
            return [](double v, const TimingConfig& t, ReferenceStrategy) { return build_repolarization(v, t); };
    }
    throw ConfigError("unknown protocol");
}

namespace detail {

inline std::string join(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
    return s;
}

/// Field table shared by the parser and the serializer, so both always agree.
struct Field {
    std::string section, key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline double to_double(const std::string& name, const std::string& v) {
    double d = 0.0;
    if (!parse_double(v, d) || std::isnan(d)) throw ConfigError(name + ": not a number: '" + v + "'");
    return d;
}

inline long long to_int(const std::string& name, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError(name + ": not an integer: '" + v + "'");
    }
}

inline bool to_bool(const std::string& name, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(name + ": expected true or false, got '" + v + "'");
}

inline std::vector<double> to_list(const std::string& name, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_double(name, item));
    if (out.empty()) throw ConfigError(name + ": empty list");
    return out;
}

#define ODMR_DOUBLE(SEC, KEY, MEMBER)                                                    \
    Field {                                                                              \
        SEC, KEY, [](const RunConfig& c) { return fmt_double(c.MEMBER); },               \
            [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(SEC "." KEY, v); } \
    }

inline const std::vector<Field>& fields() {
    static const std::vector<Field> f{
        ODMR_DOUBLE("ensemble", "b0_field", ensemble.b0_field),
        ODMR_DOUBLE("ensemble", "center_frequency", ensemble.center_frequency),
        ODMR_DOUBLE("ensemble", "gamma_e", ensemble.gamma_e),
        ODMR_DOUBLE("ensemble", "rabi_coefficient", ensemble.rabi_coefficient),
        Field{"ensemble", "hyperfine_offsets",
              [](const RunConfig& c) {
                  std::vector<double> v;
                  for (auto& l : c.ensemble.hyperfine_lines) v.push_back(l.offset_hz);
                  return join(v);
              },
              [](RunConfig& c, const std::string& v) {
                  const auto off = to_list("ensemble.hyperfine_offsets", v);
                  c.ensemble.hyperfine_lines.resize(off.size());
                  for (std::size_t i = 0; i < off.size(); ++i) c.ensemble.hyperfine_lines[i].offset_hz = off[i];
              }},
        Field{"ensemble", "hyperfine_weights",
              [](const RunConfig& c) {
                  std::vector<double> v;
                  for (auto& l : c.ensemble.hyperfine_lines) v.push_back(l.weight);
                  return join(v);
              },
              [](RunConfig& c, const std::string& v) {
                  const auto w = to_list("ensemble.hyperfine_weights", v);
                  if (w.size() != c.ensemble.hyperfine_lines.size())
                      throw ConfigError("ensemble.hyperfine_weights: length differs from hyperfine_offsets");
                  for (std::size_t i = 0; i < w.size(); ++i) c.ensemble.hyperfine_lines[i].weight = w[i];
              }},
        Field{"ensemble", "lineshape",
              [](const RunConfig& c) {
                  return std::string(c.ensemble.lineshape == Lineshape::Gaussian ? "gaussian" : "lorentzian");
              },
              [](RunConfig& c, const std::string& v) {
                  if (v == "gaussian")
                      c.ensemble.lineshape = Lineshape::Gaussian;
                  else if (v == "lorentzian")
                      c.ensemble.lineshape = Lineshape::Lorentzian;
                  else
                      throw ConfigError("ensemble.lineshape: expected gaussian or lorentzian");
              }},
        ODMR_DOUBLE("ensemble", "detuning_spread_sigma", ensemble.detuning_spread_sigma),
        ODMR_DOUBLE("ensemble", "t1", ensemble.t1),
        ODMR_DOUBLE("ensemble", "t2_alpha", ensemble.t2_alpha),
        ODMR_DOUBLE("ensemble", "stretch_n", ensemble.stretch_n),
        ODMR_DOUBLE("ensemble", "t2_beta", ensemble.t2_beta),
        ODMR_DOUBLE("ensemble", "t_rev", ensemble.t_rev),
        ODMR_DOUBLE("ensemble", "t_dec", ensemble.t_dec),
        ODMR_DOUBLE("ensemble", "tau_repol", ensemble.tau_repol),
        ODMR_DOUBLE("ensemble", "rabi_t20", ensemble.rabi_t20),
        ODMR_DOUBLE("ensemble", "rabi_loss_per_cycle", ensemble.rabi_loss_per_cycle),
        ODMR_DOUBLE("ensemble", "resonant_fraction", ensemble.resonant_fraction),
        ODMR_DOUBLE("ensemble", "contrast_scale", ensemble.contrast_scale),
        ODMR_DOUBLE("ensemble", "base_pl", ensemble.base_pl),
        Field{"ensemble", "n_subensembles",
              [](const RunConfig& c) { return std::to_string(c.ensemble.n_subensembles); },
              [](RunConfig& c, const std::string& v) {
                  c.ensemble.n_subensembles = static_cast<int>(to_int("ensemble.n_subensembles", v));
              }},
        ODMR_DOUBLE("apd", "responsivity", apd.responsivity),
        ODMR_DOUBLE("apd", "bandwidth", apd.bandwidth),
        ODMR_DOUBLE("apd", "noise_sigma", apd.noise_sigma),
        Field{"drift", "mode",
              [](const RunConfig& c) {
                  return std::string(c.drift.mode == DriftMode::Additive ? "additive" : "multiplicative");
              },
              [](RunConfig& c, const std::string& v) {
                  if (v == "additive")
                      c.drift.mode = DriftMode::Additive;
                  else if (v == "multiplicative")
                      c.drift.mode = DriftMode::Multiplicative;
                  else
                      throw ConfigError("drift.mode: expected additive or multiplicative");
              }},
        ODMR_DOUBLE("drift", "step_sigma", drift.step_sigma),
        ODMR_DOUBLE("drift", "clamp", drift.clamp),
        ODMR_DOUBLE("drift", "initial_offset", drift.offset),
        ODMR_DOUBLE("drift", "cycle_interval", drift.cycle_interval),
        ODMR_DOUBLE("scope", "trigger_level", scope.trigger_level),
        ODMR_DOUBLE("scope", "sample_rate_maxpol", scope.sample_rate_maxpol),
        ODMR_DOUBLE("scope", "sample_rate_partial", scope.sample_rate_partial),
        ODMR_DOUBLE("scope", "window_guard", scope.window_guard),
        ODMR_DOUBLE("timing", "laser_init_duration", timing.laser_init_duration),
        ODMR_DOUBLE("timing", "readout_duration", timing.readout_duration),
        ODMR_DOUBLE("timing", "buffer_after_laser", timing.buffer_after_laser),
        ODMR_DOUBLE("timing", "compile_resolution", timing.compile_resolution),
        ODMR_DOUBLE("timing", "trigger_width", timing.trigger_width),
        Field{"protocol", "kind", [](const RunConfig& c) { return protocol_info(c.protocol.kind).name; },
              [](RunConfig& c, const std::string& v) {
                  const auto id = parse_protocol(v);
                  if (!id) throw ConfigError("protocol.kind: unknown protocol '" + v + "'");
                  c.protocol.kind = *id;
              }},
        ODMR_DOUBLE("protocol", "sweep_start", protocol.sweep_start),
        ODMR_DOUBLE("protocol", "sweep_stop", protocol.sweep_stop),
        Field{"protocol", "sweep_points", [](const RunConfig& c) { return std::to_string(c.protocol.sweep_points); },
              [](RunConfig& c, const std::string& v) {
                  c.protocol.sweep_points = static_cast<int>(to_int("protocol.sweep_points", v));
              }},
        Field{"protocol", "strategy", [](const RunConfig& c) { return std::string(to_string(c.protocol.strategy)); },
              [](RunConfig& c, const std::string& v) {
                  const auto s = parse_strategy(v);
                  if (!s) throw ConfigError("protocol.strategy: expected MaxPolarized or PartialDepolarized");
                  c.protocol.strategy = *s;
              }},
        Field{"protocol", "n_averages", [](const RunConfig& c) { return std::to_string(c.protocol.n_averages); },
              [](RunConfig& c, const std::string& v) {
                  c.protocol.n_averages = static_cast<int>(to_int("protocol.n_averages", v));
              }},
        Field{"protocol", "seed", [](const RunConfig& c) { return std::to_string(c.protocol.seed); },
              [](RunConfig& c, const std::string& v) {
                  const auto s = to_int("protocol.seed", v);
                  if (s < 0) throw ConfigError("protocol.seed must be >= 0");
                  c.protocol.seed = static_cast<std::uint64_t>(s);
              }},
        ODMR_DOUBLE("protocol", "mw_power", protocol.mw_power),
        ODMR_DOUBLE("protocol", "t_pi2", protocol.t_pi2),
        ODMR_DOUBLE("protocol", "t_pi", protocol.t_pi),
        ODMR_DOUBLE("protocol", "t_dephasing", protocol.t_dephasing),
        ODMR_DOUBLE("protocol", "repol_dark_time", protocol.repol_dark_time),
        Field{"protocol", "threads", [](const RunConfig& c) { return std::to_string(c.protocol.threads); },
              [](RunConfig& c, const std::string& v) {
                  c.protocol.threads = static_cast<int>(to_int("protocol.threads", v));
              }},
        Field{"protocol", "shuffle", [](const RunConfig& c) { return std::string(c.protocol.shuffle ? "true" : "false"); },
              [](RunConfig& c, const std::string& v) { c.protocol.shuffle = to_bool("protocol.shuffle", v); }},
        Field{"output", "directory", [](const RunConfig& c) { return c.output.directory; },
              [](RunConfig& c, const std::string& v) {
                  if (v.empty()) throw ConfigError("output.directory must not be empty");
                  c.output.directory = v;
              }},
        Field{"output", "emit_waveforms",
              [](const RunConfig& c) { return std::string(c.output.emit_waveforms ? "true" : "false"); },
              [](RunConfig& c, const std::string& v) { c.output.emit_waveforms = to_bool("output.emit_waveforms", v); }},
    };
    return f;
}

#undef ODMR_DOUBLE

}  // namespace detail

/// Checks cross-field invariants beyond the per-module validators.
inline void validate(const RunConfig& c) {
    to_acquisition(c).validate();
    if (c.protocol.sweep_points < 2) throw ConfigError("protocol.sweep_points must be >= 2");
    if (!(c.protocol.sweep_start >= 0.0)) throw ConfigError("protocol.sweep_start must be >= 0");
    if (!(c.protocol.sweep_stop > c.protocol.sweep_start))
        throw ConfigError("protocol.sweep_stop must exceed protocol.sweep_start");
    if (!(c.protocol.t_pi2 > 0.0)) throw ConfigError("protocol.t_pi2 must be > 0");
    if (!(c.protocol.t_pi > 0.0)) throw ConfigError("protocol.t_pi must be > 0");
    if (!(c.protocol.t_dephasing >= 0.0)) throw ConfigError("protocol.t_dephasing must be >= 0");
    if (!(c.protocol.repol_dark_time >= 0.0)) throw ConfigError("protocol.repol_dark_time must be >= 0");
    if (!(c.scope.trigger_level > 0.0 && c.scope.trigger_level < ttl_high_volts))
        throw ConfigError("scope.trigger_level must lie between the TTL levels");
}

/// Parses INI text. Unknown sections or keys are errors; [protocol] kind and seed are required.
inline RunConfig parse_config(std::string_view text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is{std::string(text)};
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }
    RunConfig c;
    std::map<std::string, const detail::Field*> by_name;
    for (const auto& f : detail::fields()) by_name[f.section + "." + f.key] = &f;

    bool has_kind = false, has_seed = false;
    for (const auto& [section, keys] : tree) {
        if (keys.empty() && !keys.data().empty())
            throw ConfigError("config: key '" + section + "' outside of any section");
        bool known_section = false;
        for (const auto& f : detail::fields()) known_section |= f.section == section;
        if (!known_section) throw ConfigError("config: unknown section [" + section + "]");
        // Lists must be read before the fields that depend on their length.
        std::vector<std::pair<std::string, std::string>> ordered;
        for (const auto& [key, node] : keys) ordered.emplace_back(key, node.data());
        std::stable_partition(ordered.begin(), ordered.end(),
                              [](auto& kv) { return kv.first == "hyperfine_offsets"; });
        for (const auto& [key, value] : ordered) {
            const auto it = by_name.find(section + "." + key);
            if (it == by_name.end()) throw ConfigError("config: unknown key " + section + "." + key);
            it->second->set(c, value);
            has_kind |= section == "protocol" && key == "kind";
            has_seed |= section == "protocol" && key == "seed";
        }
    }
    if (!has_kind) throw ConfigError("config: protocol.kind is required");
    if (!has_seed) throw ConfigError("config: protocol.seed is required (no wall-clock seeding)");
    validate(c);
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Canonical INI text with every field; parse_config(serialize_config(c)) reproduces c.
inline std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    std::string section;
    for (const auto& f : detail::fields()) {
        if (f.section != section) {
            os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
            section = f.section;
        }
        os << f.key << " = " << f.get(c) << '\n';
    }
    return os.str();
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of everything that determines the results; the output location is excluded.
inline std::string config_hash(RunConfig c) {
    c.output.directory = ".";
    return hex64(fnv1a(serialize_config(c)));
}

inline RunConfig template_config(ProtocolId id) {
    const auto& info = protocol_info(id);
    RunConfig c;
    c.protocol.kind = id;
    c.protocol.strategy = info.default_strategy;
    c.protocol.sweep_start = info.sweep_start;
    c.protocol.sweep_stop = info.sweep_stop;
    c.protocol.sweep_points = info.sweep_points;
    c.protocol.seed = 1;
    if (id == ProtocolId::T1) c.scope.sample_rate_maxpol = 1e6;
    if (id == ProtocolId::Repolarization) c.protocol.n_averages = 32;
    if (id == ProtocolId::EchoRevivals) c.protocol.n_averages = 50;
    return c;
}

}  // namespace odmr
