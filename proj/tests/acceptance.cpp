/// Acceptance gate: closed-loop recovery of the published parameters plus property checks.
/// Usage: odmr_acceptance <path to odmr-rig>

#include "fit_cases.hpp"
#include "odmr/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

using namespace odmr;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& detail, std::chrono::steady_clock::time_point start) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %2d: %s (%.1f s)\n", pass ? "PASS" : "FAIL", id, detail.c_str(), secs);
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

bool within(double v, double target, double rel) { return std::abs(v - target) <= rel * std::abs(target); }

SweepResult sweep(const RunConfig& c) {
    return run_sweep(make_builder(c.protocol), sweep_values(c.protocol), c.protocol.strategy, to_acquisition(c),
                     c.protocol.seed);
}

RunConfig noise_free(RunConfig c) {
    c.apd.noise_sigma = 0.0;
    c.drift.step_sigma = 0.0;
    c.drift.offset = 0.0;
    c.protocol.n_averages = 1;
    return c;
}

double contrast_range(const SweepResult& r) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& row : r.rows) lo = std::min(lo, row.contrast_pct), hi = std::max(hi, row.contrast_pct);
    return hi - lo;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// Criteria 1, 2 and 5 share the Rabi sweep.
SweepResult rabi_sweep;

void criterion_rabi() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::Rabi);
    c.protocol.n_averages = 50;
    rabi_sweep = sweep(c);
    const auto fit = fit_rabi(rabi_sweep.values(), rabi_sweep.contrasts());
    const double f1 = fit.value("f1"), t1r = fit.value("T1R");
    const auto s = psd(rabi_sweep.values(), rabi_sweep.contrasts());
    const auto peaks = spectral_peaks(s);
    // The satellite tone sits at the generalized Rabi frequency of the hyperfine-detuned lines.
    double offset = 0.0;
    for (const auto& l : c.ensemble.hyperfine_lines) offset = std::max(offset, std::abs(l.offset_hz));
    const double f2_expected = std::hypot(2.5e6, offset);
    const bool second = peaks.size() >= 2 && s.frequencies[peaks[1]] > s.frequencies[peaks[0]] &&
                        std::abs(s.frequencies[peaks[1]] - f2_expected) <= s.bin_width();
    const bool pass = fit.converged && within(f1, 2.5e6, 0.02) && within(t1r, 1.175e-6, 0.10) && second;
    std::string detail = "Rabi f1 = " + num(f1) + " Hz, T1R = " + num(t1r) + " s";
    detail += peaks.empty() ? ", no PSD peak"
                            : ", PSD peaks at " + num(s.frequencies[peaks[0]]) +
                                  (peaks.size() > 1 ? " and " + num(s.frequencies[peaks[1]]) : std::string()) + " Hz";
    detail += ", expected satellite " + num(f2_expected) + " Hz, bin " + num(s.bin_width()) + " Hz";
    report(1, pass, detail, t0);

    const auto t2 = std::chrono::steady_clock::now();
    const double t_pi = 1.0 / (2.0 * f1);
    report(2, t_pi >= 196e-9 && t_pi <= 204e-9, "pi duration 1/(2 f1) = " + num(t_pi * 1e9) + " ns", t2);
}

void criterion_sqrt_power() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> xs, ys;
    bool converged = true;
    for (double p : {1.0, 4.0, 9.0, 14.74, 25.0}) {
        auto c = noise_free(template_config(ProtocolId::Rabi));
        c.protocol.mw_power = p;
        c.protocol.sweep_points = 100;
        c.protocol.sweep_stop = 4e-6;
        const auto r = sweep(c);
        const auto fit = fit_rabi(r.values(), r.contrasts());
        converged = converged && fit.converged;
        xs.push_back(std::sqrt(p));
        ys.push_back(fit.value("f1"));
    }
    const auto lf = linear_fit(xs, ys);
    const double pred = lf.slope * std::sqrt(14.74) + lf.intercept;
    report(3, converged && lf.r2 >= 0.999 && within(pred, 2.5e6, 0.01),
           "r2 = " + num(lf.r2) + ", predicted f_R(14.74 W) = " + num(pred) + " Hz", t0);
}

void criterion_ramsey() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::Ramsey);
    c.protocol.n_averages = 50;
    const auto r = sweep(c);
    const auto fit = fit_ramsey(r.values(), r.contrasts());
    const double t = fit.value("T_ramsey"), f = fit.value("f_ramsey");
    report(4, fit.converged && within(t, 232.03e-9, 0.10) && within(f, 2.38e6, 0.05),
           "T2* = " + num(t) + " s, f_ramsey = " + num(f) + " Hz", t0);
}

void criterion_t1() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::T1);
    c.protocol.n_averages = 50;
    const auto r = sweep(c);
    const auto fit = fit_t1(r.values(), r.contrasts());
    const double t1 = fit.value("T1");
    const double ratio = contrast_range(r) / contrast_range(rabi_sweep);
    report(5, fit.converged && within(t1, 6.274e-3, 0.05) && ratio > 2.0,
           "T1 = " + num(t1) + " s, contrast range ratio T1/Rabi = " + num(ratio), t0);
}

void criterion_repolarization() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto c = template_config(ProtocolId::Repolarization);
    const auto noisy = measure_repolarization(to_acquisition(c), c.protocol.seed, c.protocol.repol_dark_time,
                                              c.protocol.sweep_stop);
    const auto quiet = noise_free(c);
    const auto clean = measure_repolarization(to_acquisition(quiet), quiet.protocol.seed,
                                              quiet.protocol.repol_dark_time, quiet.protocol.sweep_stop);
    const double a = noisy.fit.value("tau_repol"), b = clean.fit.value("tau_repol");
    report(6, within(a, 138.07e-6, 0.03) && within(b, 138.07e-6, 0.001),
           "tau_repol = " + num(a) + " s with noise, " + num(b) + " s without", t0);
}

void criterion_echo_rephase() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::EchoRephase);
    c.protocol.n_averages = 50;
    const auto r = sweep(c);
    const auto rep = cli::extremum_report(r);
    const double peak = rep.value("t_peak");
    const double step = (c.protocol.sweep_stop - c.protocol.sweep_start) / (c.protocol.sweep_points - 1);
    report(7, std::abs(peak - c.protocol.t_dephasing) <= step * (1 + 1e-9),
           "extremum at " + num(peak) + " s, T_dephasing = " + num(c.protocol.t_dephasing) + " s, step " +
               num(step) + " s",
           t0);
}

void criterion_echo_decay() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::EchoT2);
    c.protocol.n_averages = 50;
    const auto r = sweep(c);
    const auto fit = fit_echo_decay(r.values(), r.contrasts());
    const double t2 = fit.value("T2_alpha");
    report(8, fit.converged && within(t2, 3.438e-6, 0.10),
           "T2_alpha = " + num(t2) + " s (n = " + num(fit.value("n")) + ")", t0);
}

void criterion_revivals() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::EchoRevivals);
    const auto partial = sweep(c);
    const auto fp = fit_revival_train(partial.values(), partial.contrasts());
    c.protocol.strategy = ReferenceStrategy::MaxPolarized;
    const auto maxpol = sweep(c);
    const auto fm = fit_revival_train(maxpol.values(), maxpol.contrasts());
    const double trev = fp.value("T_rev"), t2b = fp.value("T2_beta");
    const bool pass = fp.converged && within(trev, c.ensemble.t_rev, 0.02) && within(t2b, 68.12e-6, 0.15) &&
                      fm.value("B") < 0.0 && fp.value("B") > 0.0;
    report(9, pass,
           "T_rev = " + num(trev) + " s (configured " + num(c.ensemble.t_rev) + "), T2_beta = " + num(t2b) +
               " s, slope MaxPol " + num(fm.value("B")) + ", Partial " + num(fp.value("B")) + " %/s",
           t0);
}

void criterion_drift() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::Rabi);
    c.protocol.n_averages = 50;
    c.drift.step_sigma = 0.002;
    c.output.directory = (fs::temp_directory_path() / "odmr_acceptance_drift").string();

    // Drift-only and noise-only serial runs size the two contributions separately.
    const auto builder = make_builder(c.protocol);
    const auto values = sweep_values(c.protocol);
    const auto ideal = serial_reference_sweep(builder, values, to_acquisition(noise_free(c)), c.protocol.seed);
    auto drift_only = c;
    drift_only.apd.noise_sigma = 0.0;
    auto noise_only = c;
    noise_only.drift.step_sigma = 0.0;
    const double s_drift = cli::stddev(cli::contrast_residuals(
        serial_reference_sweep(builder, values, to_acquisition(drift_only), c.protocol.seed), ideal));
    const double s_noise = cli::stddev(cli::contrast_residuals(
        serial_reference_sweep(builder, values, to_acquisition(noise_only), c.protocol.seed), ideal));

    std::ostringstream sink;
    cli::DriftSummary s;
    cli::cmd_demo_drift(c, sink, &s);
    const double ratio = s.std_serial / s.std_same_waveform;
    const bool pass = s_drift >= 5.0 * s_noise && ratio >= 10.0 && s.corr_sig_ref > 0.9;
    report(10, pass,
           "drift/shot = " + num(s_drift / s_noise) + ", serial/same-waveform std = " + num(ratio) +
               ", corr(sig, ref) = " + num(s.corr_sig_ref),
           t0);
}

void criterion_averaging() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = template_config(ProtocolId::Rabi);
    c.drift.step_sigma = 0.0;
    c.protocol.sweep_points = 150;
    const auto ideal = sweep(noise_free(c));
    std::vector<double> scaled;
    for (int n : {16, 64, 256}) {
        c.protocol.n_averages = n;
        const double s = cli::stddev(cli::contrast_residuals(sweep(c), ideal));
        scaled.push_back(s * std::sqrt(static_cast<double>(n)));
    }
    bool pass = true;
    for (double v : scaled) pass = pass && within(v, scaled.front(), 0.20);
    report(11, pass,
           "std * sqrt(N) = " + num(scaled[0]) + ", " + num(scaled[1]) + ", " + num(scaled[2]) + " for N = 16, 64, 256",
           t0);
}

void criterion_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_fit = 0.0, worst_grad = 0.0;
    auto all = fit_cases::cases();
    auto repol = all[2];
    repol.name = "single_exp_repol";
    repol.id = ModelId::SingleExpRepol;
    all.push_back(repol);
    std::string worst_name;
    for (const auto& cs : all) {
        const auto ys = fit_cases::synth(cs, cs.truth);
        const auto fit = detail::fit_model(cs.id, cs.xs, ys);
        const auto ref = oracle::fit(cs.model, cs.xs, ys);
        const double e = fit.converged ? fit_cases::worst_relative(cs, fit.values, ref) : INFINITY;
        if (e > worst_fit) worst_fit = e, worst_name = cs.name;
        worst_grad = std::max(worst_grad, fit_cases::gradient_check(cs, 100, 99));
    }
    report(12, worst_fit <= 1e-4 && worst_grad <= 1e-6,
           "worst fit/oracle disagreement " + num(worst_fit) + " (" + worst_name + "), worst gradient error " +
               num(worst_grad),
           t0);
}

void criterion_determinism(const std::string& rig) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto root = fs::temp_directory_path() / "odmr_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    auto c = template_config(ProtocolId::Ramsey);
    c.protocol.n_averages = 8;
    c.protocol.sweep_points = 30;
    c.output.emit_waveforms = true;
    const auto cfg_path = root / "ramsey.ini";
    std::ofstream(cfg_path) << serialize_config(c);

    bool pass = true;
    std::size_t compared = 0;
    for (const std::string cmd : {"run", "demo-drift"}) {
        for (const char* tag : {"a", "b"}) {
            const std::string line = "\"" + rig + "\" " + cmd + " \"" + cfg_path.string() + "\" --output-dir \"" +
                                     (root / (cmd + "_" + tag)).string() + "\" > /dev/null";
            const int rc = std::system(line.c_str());
            if (rc == -1 || (WEXITSTATUS(rc) != 0 && WEXITSTATUS(rc) != 4)) pass = false;
        }
        for (const auto& e : fs::recursive_directory_iterator(root / (cmd + "_a"))) {
            if (e.path().extension() != ".csv") continue;
            const auto other = root / (cmd + "_b") / fs::relative(e.path(), root / (cmd + "_a"));
            pass = pass && fs::exists(other) && slurp(e.path()) == slurp(other);
            ++compared;
        }
    }
    pass = pass && compared >= 3;
    report(13, pass, std::to_string(compared) + " CSV artifacts compared across two runs of run and demo-drift", t0);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: odmr_acceptance <path to odmr-rig>\n";
        return 2;
    }
    const auto start = std::chrono::steady_clock::now();
    criterion_rabi();
    criterion_sqrt_power();
    criterion_ramsey();
    criterion_t1();
    criterion_repolarization();
    criterion_echo_rephase();
    criterion_echo_decay();
    criterion_revivals();
    criterion_drift();
    criterion_averaging();
    criterion_oracle();
    criterion_determinism(argv[1]);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%d of 13 criteria failed, total %.1f s\n", failures, secs);
    return failures == 0 ? 0 : 1;
}
