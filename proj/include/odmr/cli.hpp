#pragma once

#include "odmr/config.hpp"
#include "odmr/csv_io.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace odmr::cli {

/// Process exit codes.
enum ExitCode : int { ok = 0, usage_error = 1, config_error = 2, simulation_error = 3, fit_not_converged = 4 };

inline constexpr const char* output_dir_env = "ODMR_RIG_OUTPUT_DIR";

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
};

/// Applies overrides with precedence flag > environment > config file.
inline RunConfig apply_overrides(RunConfig cfg, const Overrides& o) {
    if (const char* env = std::getenv(output_dir_env); env && *env) cfg.output.directory = env;
    if (o.output_dir) cfg.output.directory = *o.output_dir;
    if (o.seed) cfg.protocol.seed = *o.seed;
    return cfg;
}

inline std::filesystem::path artifact_dir(const RunConfig& cfg) {
    return std::filesystem::path(cfg.output.directory) /
           (protocol_info(cfg.protocol.kind).name + "-" + config_hash(cfg));
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw SimulationError("cannot write " + p.string());
}

/// Location of the largest deviation from the median contrast.
inline FitReport extremum_report(const SweepResult& r) {
    auto c = r.contrasts();
    auto sorted = c;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
    const double median = sorted[sorted.size() / 2];
    std::size_t best = 0;
    for (std::size_t i = 1; i < c.size(); ++i)
        if (std::abs(c[i] - median) > std::abs(c[best] - median)) best = i;
    FitReport f;
    f.names = {"t_peak", "contrast_peak"};
    f.values = {r.rows[best].value, c[best]};
    const double step = r.rows.size() > 1 ? r.rows[1].value - r.rows[0].value : 0.0;
    f.uncertainties = {step, 0.0};
    f.initial_guess = f.values;
    f.converged = true;
    f.message = "extremum of contrast relative to its median";
    return f;
}

inline FitReport fit_for(ProtocolId id, const SweepResult& r) {
    const auto xs = r.values();
    const auto ys = r.contrasts();
    switch (id) {
        case ProtocolId::Rabi: return fit_rabi(xs, ys);
        case ProtocolId::Ramsey: return fit_ramsey(xs, ys);
        case ProtocolId::T1: return fit_t1(xs, ys);
        case ProtocolId::EchoRephase: return extremum_report(r);
        case ProtocolId::EchoT2: return fit_echo_decay(xs, ys);
        case ProtocolId::EchoRevivals: return fit_revival_train(xs, ys);
        case ProtocolId::Repolarization: break;
    }
    throw ConfigError("protocol has no sweep fit");
}

inline std::string report_text(const RunConfig& cfg, const std::string& hash, const FitReport& fit) {
    std::ostringstream os;
    os << "protocol: " << protocol_info(cfg.protocol.kind).name << '\n';
    os << "config_hash: " << hash << '\n';
    os << "seed: " << cfg.protocol.seed << '\n';
    if (fit.model == ModelId::Linear && !fit.names.empty() && fit.names[0] == "t_peak")
        os << "analysis: extremum\n";
    os << format_fit_report(fit);
    return os.str();
}

/// Runs one configured protocol and writes its artifacts; returns the exit code.
inline int cmd_run(const RunConfig& cfg, std::ostream& out) {
    const auto hash = config_hash(cfg);
    const auto dir = artifact_dir(cfg);
    std::filesystem::create_directories(dir);
    write_file(dir / "config.ini", serialize_config(cfg));
    const auto acq = to_acquisition(cfg);
    FitReport fit;
    if (cfg.protocol.kind == ProtocolId::Repolarization) {
        const auto res = measure_repolarization(acq, cfg.protocol.seed, cfg.protocol.repol_dark_time,
                                                cfg.protocol.sweep_stop);
        fit = res.fit;
        write_file(dir / "trace.csv", format_trace_csv(res.trace));
    } else {
        const auto result =
            run_sweep(make_builder(cfg.protocol), sweep_values(cfg.protocol), cfg.protocol.strategy, acq,
                      cfg.protocol.seed);
        fit = fit_for(cfg.protocol.kind, result);
        write_file(dir / "sweep.csv",
                   format_sweep_csv({protocol_info(cfg.protocol.kind).name, hash, result, fit}));
        if (cfg.output.emit_waveforms)
            for (std::size_t i = 0; i < result.waveforms.size(); ++i)
                write_file(dir / ("waveform_" + std::to_string(i) + ".csv"),
                           format_waveform_csv(result.waveforms[i]));
    }
    write_file(dir / "fit_report.txt", report_text(cfg, hash, fit));
    out << dir.string() << '\n';
    for (std::size_t i = 0; i < fit.names.size(); ++i)
        out << fit.names[i] << " = " << fmt_double(fit.values[i]) << " +/- " << fmt_double(fit.uncertainties[i])
            << '\n';
    if (!fit.converged) {
        out << "fit did not converge: " << fit.message << '\n';
        return fit_not_converged;
    }
    return ok;
}

struct DriftSummary {
    double std_same_waveform = 0.0;
    double std_partial = 0.0;
    double std_serial = 0.0;
    double corr_sig_ref = 0.0;
};

inline double stddev(const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double correlation(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0.0 && sbb > 0.0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

/// Contrast residuals against the noise-free, drift-free run of the same acquisition.
inline std::vector<double> contrast_residuals(const SweepResult& noisy, const SweepResult& ideal) {
    std::vector<double> d(noisy.rows.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = noisy.rows[i].contrast_pct - ideal.rows[i].contrast_pct;
    return d;
}

/// Same sweep acquired with same-waveform, partially depolarized and serial references.
inline int cmd_demo_drift(const RunConfig& cfg, std::ostream& out, DriftSummary* summary_out = nullptr) {
    if (cfg.protocol.kind == ProtocolId::Repolarization)
        throw ConfigError("protocol.kind: demo-drift needs a swept protocol");
    const auto hash = config_hash(cfg);
    const auto dir = std::filesystem::path(cfg.output.directory) / ("demo-drift-" + hash);
    std::filesystem::create_directories(dir);
    write_file(dir / "config.ini", serialize_config(cfg));

    const auto builder = make_builder(cfg.protocol);
    const auto values = sweep_values(cfg.protocol);
    const auto seed = cfg.protocol.seed;
    const auto acq = to_acquisition(cfg);
    auto clean = acq;
    clean.apd.noise_sigma = 0.0;
    clean.drift.step_sigma = 0.0;
    clean.drift.offset = 0.0;
    clean.n_averages = 1;
    clean.keep_waveforms = false;

    const auto same = run_sweep(builder, values, ReferenceStrategy::MaxPolarized, acq, seed);
    const auto partial = run_sweep(builder, values, ReferenceStrategy::PartialDepolarized, acq, seed);
    const auto serial = serial_reference_sweep(builder, values, acq, seed);
    const auto same0 = run_sweep(builder, values, ReferenceStrategy::MaxPolarized, clean, seed);
    const auto partial0 = run_sweep(builder, values, ReferenceStrategy::PartialDepolarized, clean, seed);
    const auto serial0 = serial_reference_sweep(builder, values, clean, seed);

    DriftSummary s;
    s.std_same_waveform = stddev(contrast_residuals(same, same0));
    s.std_partial = stddev(contrast_residuals(partial, partial0));
    s.std_serial = stddev(contrast_residuals(serial, serial0));
    std::vector<double> sig, ref;
    for (const auto& r : same.rows) {
        sig.push_back(r.i_sig);
        ref.push_back(r.i_ref);
    }
    s.corr_sig_ref = correlation(sig, ref);

    std::ostringstream csv;
    csv << "# config_hash: " << hash << '\n';
    csv << "# seed: " << seed << '\n';
    csv << "swept_value_s,contrast_same_waveform_pct,contrast_partial_pct,contrast_serial_pct,"
           "ideal_same_waveform_pct,ideal_partial_pct,ideal_serial_pct,i_sig_v,i_ref_v\n";
    for (std::size_t i = 0; i < values.size(); ++i)
        csv << fmt_double(values[i]) << ',' << fmt_double(same.rows[i].contrast_pct) << ','
            << fmt_double(partial.rows[i].contrast_pct) << ',' << fmt_double(serial.rows[i].contrast_pct) << ','
            << fmt_double(same0.rows[i].contrast_pct) << ',' << fmt_double(partial0.rows[i].contrast_pct) << ','
            << fmt_double(serial0.rows[i].contrast_pct) << ',' << fmt_double(same.rows[i].i_sig) << ','
            << fmt_double(same.rows[i].i_ref) << '\n';
    write_file(dir / "drift_comparison.csv", csv.str());

    std::ostringstream sum;
    sum << "config_hash: " << hash << '\n';
    sum << "seed: " << seed << '\n';
    sum << "std_same_waveform_pct: " << fmt_double(s.std_same_waveform) << '\n';
    sum << "std_partial_pct: " << fmt_double(s.std_partial) << '\n';
    sum << "std_serial_pct: " << fmt_double(s.std_serial) << '\n';
    sum << "ratio_serial_over_same: " << fmt_double(s.std_serial / s.std_same_waveform) << '\n';
    sum << "ratio_partial_over_same: " << fmt_double(s.std_partial / s.std_same_waveform) << '\n';
    sum << "corr_sig_ref: " << fmt_double(s.corr_sig_ref) << '\n';
    write_file(dir / "drift_summary.txt", sum.str());
    out << dir.string() << '\n' << sum.str();
    if (summary_out) *summary_out = s;
    return ok;
}

inline void cmd_protocols(std::ostream& out) {
    out << "name            swept     strategy            fit\n";
    for (const auto& p : protocol_registry()) {
        std::string line = p.name;
        line.resize(16, ' ');
        std::string sym = p.swept_symbol;
        sym.resize(10, ' ');
        std::string strat(to_string(p.default_strategy));
        strat.resize(20, ' ');
        out << line << sym << strat << p.fit << "  ; " << p.summary << '\n';
    }
}

/// Entry point shared by the executable and the tests.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Simulated ODMR pulse rig"};
    app.require_subcommand(1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
    std::string template_name;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("config", config_path, "INI config file")->required();
        sub->add_option("--seed", seed, "override protocol.seed");
        sub->add_option("--output-dir", output_dir, "override output.directory");
    };
    auto* run = app.add_subcommand("run", "run one protocol and fit it");
    add_common(run);
    auto* demo = app.add_subcommand("demo-drift", "compare reference strategies under drift");
    add_common(demo);
    auto* protocols = app.add_subcommand("protocols", "list protocols or print a config template");
    protocols->add_option("--template", template_name, "print the config template of a protocol");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage_error;
    }

    try {
        if (protocols->parsed()) {
            if (template_name.empty()) {
                cmd_protocols(out);
            } else {
                const auto id = parse_protocol(template_name);
                if (!id) {
                    err << "unknown protocol '" << template_name << "'\n";
                    return usage_error;
                }
                out << serialize_config(template_config(*id));
            }
            return ok;
        }
        const auto cfg = apply_overrides(load_config(config_path), Overrides{seed, output_dir});
        validate(cfg);
        return run->parsed() ? cmd_run(cfg, out) : cmd_demo_drift(cfg, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const SequenceError& e) {
        err << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const AnalysisError& e) {
        err << "fit error: " << e.what() << '\n';
        return fit_not_converged;
    } catch (const std::exception& e) {
        err << "simulation error: " << e.what() << '\n';
        return simulation_error;
    }
}

}  // namespace odmr::cli
