#include "fit_cases.hpp"
#include "odmr/analysis.hpp"
#include "oracle.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace odmr;

namespace {

const fit_cases::Case& find_case(std::string_view name) {
    static const auto all = fit_cases::cases();
    for (const auto& c : all)
        if (c.name == name) return c;
    throw std::runtime_error("no case");
}

std::vector<double> white(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    std::vector<double> v(n);
    for (auto& x : v) x = n01(rng);
    return v;
}

}  // namespace

class ModelCase : public ::testing::TestWithParam<std::string> {};

TEST_P(ModelCase, AnalyticGradientMatchesFiniteDifference) {
    const auto& c = find_case(GetParam());
    EXPECT_LT(fit_cases::gradient_check(c, 100, 7), 1e-6);
}

TEST_P(ModelCase, LibraryModelMatchesIndependentForm) {
    const auto& c = find_case(GetParam());
    for (double x : c.xs) {
        const double ref = oracle::eval(c.model, x, c.truth);
        EXPECT_NEAR(model_eval(c.id, x, c.truth), ref, 1e-12 * (1.0 + std::abs(ref)));
    }
}

TEST_P(ModelCase, NoiseFreeFitRecoversTruthAndAgreesWithOracle) {
    const auto& c = find_case(GetParam());
    const auto ys = fit_cases::synth(c, c.truth);
    const auto fit = detail::fit_model(c.id, c.xs, ys);
    EXPECT_TRUE(fit.converged) << fit.message;
    EXPECT_LT(fit_cases::worst_relative(c, fit.values, c.truth), 1e-4);
    const auto ref = oracle::fit(c.model, c.xs, ys);
    EXPECT_LT(fit_cases::worst_relative(c, fit.values, ref), 1e-4);
}

TEST_P(ModelCase, ResidualHistoryIsMonotone) {
    const auto& c = find_case(GetParam());
    const auto ys = fit_cases::synth(c, c.truth, 0.02, 3);
    const auto fit = detail::fit_model(c.id, c.xs, ys);
    ASSERT_FALSE(fit.rss_history.empty());
    for (std::size_t i = 1; i < fit.rss_history.size(); ++i)
        EXPECT_LE(fit.rss_history[i], fit.rss_history[i - 1] * (1 + 1e-12));
    EXPECT_NEAR(fit.rss_history.back(), fit.rss, 1e-12 * (1 + fit.rss));
}

TEST_P(ModelCase, ReportInvariants) {
    const auto& c = find_case(GetParam());
    const auto ys = fit_cases::synth(c, c.truth, 0.02, 5);
    const auto fit = detail::fit_model(c.id, c.xs, ys);
    for (std::size_t j = 0; j < fit.values.size(); ++j) {
        EXPECT_TRUE(std::isfinite(fit.values[j]));
        EXPECT_GE(fit.uncertainties[j], 0.0);
    }
    if (fit.converged) {
        EXPECT_LT(fit.gradient_norm, FitOptions{}.gtol);
    }
    if (c.id == ModelId::Rabi2Tone) {
        EXPECT_LE(fit.value("f1"), fit.value("f2"));
        EXPECT_LE(std::abs(fit.value("phi1")), std::numbers::pi);
    }
}

TEST_P(ModelCase, ScaleEquivariance) {
    const auto& c = find_case(GetParam());
    const auto ys = fit_cases::synth(c, c.truth);
    std::vector<double> scaled(ys);
    for (auto& y : scaled) y *= 7.0;
    const auto a = detail::fit_model(c.id, c.xs, ys);
    const auto b = detail::fit_model(c.id, c.xs, scaled);
    const auto m = make_model(c.id, c.xs, ys);
    for (std::size_t j = 0; j < a.values.size(); ++j) {
        const bool amplitude = m.params[j].unit == "%" || m.params[j].unit == "%/s" || c.id == ModelId::Linear;
        const double expect = amplitude ? 7.0 * a.values[j] : a.values[j];
        double d = b.values[j] - expect;
        if (m.params[j].periodic) d = std::remainder(d, 2 * std::numbers::pi);
        EXPECT_LE(std::abs(d), 1e-5 * std::max({std::abs(expect), c.scale[j] * (amplitude ? 7.0 : 1.0)}))
            << m.params[j].name;
    }
}

INSTANTIATE_TEST_SUITE_P(Models, ModelCase,
                         ::testing::Values("rabi2tone", "ramsey", "exp_decay", "stretched_exp", "revival_train",
                                           "linear"),
                         [](const auto& info) { return info.param; });

TEST(Fit, ExactExponentialDecay) {
    const auto xs = oracle::linspace(0.0, 30e-3, 31);
    std::vector<double> ys;
    for (double x : xs) ys.push_back(std::exp(-x / 6.274e-3));
    const auto fit = fit_t1(xs, ys);
    EXPECT_TRUE(fit.converged);
    EXPECT_NEAR(fit.value("T1"), 6.274e-3, 6.274e-9);
    EXPECT_NEAR(fit.value("A"), 1.0, 1e-6);
    EXPECT_NEAR(fit.value("B"), 0.0, 1e-6);
}

TEST(Fit, CollinearPointsConvergeInOneStep) {
    const std::vector<double> xs{0.0, 1.0, 2.0};
    const std::vector<double> ys{1.0, 3.0, 5.0};
    const auto m = make_model(ModelId::Linear, xs, ys);
    const auto fit = nlls_fit(m, xs, ys, std::vector<double>{0.0, 0.0});
    EXPECT_TRUE(fit.converged);
    EXPECT_LE(fit.rss_history.size(), 3u);
    EXPECT_NEAR(fit.values[0], 2.0, 1e-9);
    EXPECT_NEAR(fit.values[1], 1.0, 1e-9);
}

TEST(Fit, TwoPointLineIsExact) {
    const auto f = linear_fit(std::vector<double>{1.0, 3.0}, std::vector<double>{2.0, 8.0});
    EXPECT_DOUBLE_EQ(f.slope, 3.0);
    EXPECT_DOUBLE_EQ(f.intercept, -1.0);
    EXPECT_DOUBLE_EQ(f.r2, 1.0);
    EXPECT_THROW(linear_fit(std::vector<double>{1.0, 1.0}, std::vector<double>{0.0, 1.0}), AnalysisError);
}

TEST(Fit, RabiWithOnePercentNoise) {
    const auto& c = find_case("rabi2tone");
    auto truth = c.truth;
    const auto ys = fit_cases::synth(c, truth, 0.01, 11);
    const auto fit = fit_rabi(c.xs, ys);
    EXPECT_TRUE(fit.converged);
    EXPECT_NEAR(fit.value("f1"), 2.5e6, 0.005 * 2.5e6);
    const auto ref = oracle::fit(c.model, c.xs, ys);
    EXPECT_LT(fit_cases::worst_relative(c, fit.values, ref), 1e-4);
}

TEST(Fit, IterationCapReportsNonConvergence) {
    const auto& c = find_case("ramsey");
    const auto ys = fit_cases::synth(c, c.truth, 0.01, 2);
    const auto m = make_model(c.id, c.xs, ys);
    auto guess = c.truth;
    guess[1] *= 1.1;
    guess[3] *= 2.0;
    FitOptions opt;
    opt.max_iterations = 1;
    const auto fit = nlls_fit(m, c.xs, ys, guess, opt);
    EXPECT_FALSE(fit.converged);
    EXPECT_FALSE(fit.message.empty());
    for (double v : fit.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(Fit, DegenerateParametersAreFlagged) {
    // For x <= 0 the stretched factor is 1, so A and B are collinear and T, n are unconstrained.
    const auto xs = oracle::linspace(-10.0, -1.0, 10);
    const std::vector<double> ys(10, 2.0);
    const auto m = make_model(ModelId::StretchedExp, xs, std::vector<double>(10, 2.0));
    const auto fit = nlls_fit(m, xs, ys, std::vector<double>{1.0, 5.0, 1.0, 0.5});
    EXPECT_TRUE(fit.rank_deficient);
    for (double v : fit.values) EXPECT_TRUE(std::isfinite(v));
    for (double u : fit.uncertainties) EXPECT_GE(u, 0.0);
}

TEST(Fit, ConstantDataGivesFlatFit) {
    const auto xs = oracle::linspace(0.0, 30e-3, 31);
    const std::vector<double> ys(31, 0.7);
    const auto m = make_model(ModelId::ExpDecay, xs, ys);
    EXPECT_DOUBLE_EQ(initial_guess(m, xs, ys)[0], 0.0);
    const auto fit = fit_t1(xs, ys);
    for (double x : xs) EXPECT_NEAR(model_eval(ModelId::ExpDecay, x, fit.values), 0.7, 1e-9);
}

TEST(Fit, DecayGuessWithinFactorThree) {
    const auto xs = oracle::linspace(0.0, 30e-3, 31);
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> ut(1e-3, 20e-3);
    std::normal_distribution<double> n01;
    const auto m0 = make_model(ModelId::ExpDecay, xs, std::vector<double>(31, 1.0));
    for (int s = 0; s < 50; ++s) {
        const double t = ut(rng);
        std::vector<double> ys;
        for (double x : xs) ys.push_back(-3.0 * std::exp(-x / t) + 0.05 * n01(rng));
        const auto g = initial_guess(make_model(ModelId::ExpDecay, xs, ys), xs, ys);
        EXPECT_GT(g[1], t / 3) << "seed " << s;
        EXPECT_LT(g[1], t * 3) << "seed " << s;
    }
    (void)m0;
}

TEST(Fit, RabiFrequencyGuessFollowsSpectrum) {
    const auto& c = find_case("rabi2tone");
    auto truth = c.truth;
    truth[4] = 0.0;
    const auto ys = fit_cases::synth(c, truth, 0.01, 4);
    const auto g = initial_guess(make_model(c.id, c.xs, ys), c.xs, ys);
    const auto s = psd(c.xs, ys);
    const auto peaks = spectral_peaks(s);
    ASSERT_FALSE(peaks.empty());
    const double f_peak = s.frequencies[peaks.front()];
    const double f_guess = std::abs(g[1] - f_peak) < std::abs(g[5] - f_peak) ? g[1] : g[5];
    EXPECT_LE(std::abs(f_guess - f_peak), s.bin_width());
}

TEST(Fit, ReportRoundTrip) {
    const auto& c = find_case("ramsey");
    const auto fit = fit_ramsey(c.xs, fit_cases::synth(c, c.truth, 0.01, 9));
    const auto back = parse_fit_report(format_fit_report(fit));
    EXPECT_EQ(back.model, fit.model);
    EXPECT_EQ(back.names, fit.names);
    EXPECT_EQ(back.values, fit.values);
    EXPECT_EQ(back.uncertainties, fit.uncertainties);
    EXPECT_EQ(back.converged, fit.converged);
    EXPECT_EQ(format_fit_report(back), format_fit_report(fit));
}

TEST(Fit, LinearityOfRabiFrequencyInSqrtPower) {
    const std::vector<double> powers{2.0, 5.0, 8.0, 11.0, 14.74};
    std::vector<double> xs, ys;
    for (double p : powers) {
        xs.push_back(std::sqrt(p));
        ys.push_back(2.5e6 / std::sqrt(14.74) * std::sqrt(p));
    }
    const auto f = linear_fit(xs, ys);
    EXPECT_GT(f.r2, 1 - 1e-12);
    EXPECT_NEAR(f.slope * std::sqrt(14.74) + f.intercept, 2.5e6, 1e-3);
}

TEST(Spectrum, SinusoidPeak) {
    const double dx = 20e-9, f0 = 2.5e6;
    std::vector<double> ys;
    for (int i = 0; i < 200; ++i) ys.push_back(std::sin(2 * std::numbers::pi * f0 * i * dx));
    const auto s = psd(ys, dx);
    const auto peaks = spectral_peaks(s);
    ASSERT_FALSE(peaks.empty());
    EXPECT_LE(std::abs(s.frequencies[peaks.front()] - f0), s.bin_width());
}

TEST(Spectrum, Parseval) {
    for (std::size_t n : {64u, 65u, 200u}) {
        const auto ys = white(n, n);
        const double mean = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(n);
        double ms = 0.0;
        for (double y : ys) ms += (y - mean) * (y - mean);
        ms /= static_cast<double>(n);
        const auto s = psd(ys, 1e-6);
        const double total = std::accumulate(s.power.begin(), s.power.end(), 0.0) * s.bin_width();
        EXPECT_NEAR(total, ms, 1e-9 * ms) << n;
    }
}

TEST(Spectrum, TwoTonesGiveTwoPeaks) {
    const auto& c = find_case("rabi2tone");
    auto truth = c.truth;
    truth[3] = truth[7] = 1e-3;  // long damping keeps the lines narrow
    truth[8] = 0.0;
    const auto xs = oracle::linspace(0.0, 4e-6, 200);
    fit_cases::Case wide = c;
    wide.xs = xs;
    const auto s = psd(xs, fit_cases::synth(wide, truth));
    const auto peaks = spectral_peaks(s);
    ASSERT_GE(peaks.size(), 2u);
    EXPECT_LE(std::abs(s.frequencies[peaks[0]] - 2.5e6), s.bin_width());
    EXPECT_LE(std::abs(s.frequencies[peaks[1]] - 3.3e6), s.bin_width());
}

TEST(Spectrum, RejectsBadInput) {
    std::vector<double> xs = oracle::linspace(0.0, 1.0, 10);
    xs[4] += 0.01;
    EXPECT_THROW(psd(xs, std::vector<double>(10, 0.0)), AnalysisError);
    EXPECT_THROW(psd(std::vector<double>(5, 0.0), 1.0), AnalysisError);
}

TEST(Spectrum, WhiteNoiseMaximumBinStatistics) {
    // Periodogram bins of white noise are exponential, so one bin exceeds 5x the median
    // with probability 2^-5 and the chance that any of M bins does is 1 - (31/32)^M.
    const std::size_t n = 50;
    const int seeds = 200;
    int above5 = 0, above9 = 0;
    std::size_t m = 0;
    for (int s = 0; s < seeds; ++s) {
        const auto sp = psd(white(n, 1000 + s), 1.0);
        std::vector<double> p(sp.power.begin() + 1, sp.power.end() - 1);
        m = p.size();
        auto sorted = p;
        std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
        const double med = sorted[sorted.size() / 2];
        const double mx = *std::max_element(p.begin(), p.end());
        above5 += mx > 5 * med;
        above9 += mx > 9 * med;
    }
    const double expect5 = 1 - std::pow(31.0 / 32.0, static_cast<double>(m));
    EXPECT_NEAR(static_cast<double>(above5) / seeds, expect5, 0.15);
    EXPECT_LE(static_cast<double>(above9) / seeds, 0.10);
}
