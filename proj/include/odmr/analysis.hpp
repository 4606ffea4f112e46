#pragma once

#include "odmr/common.hpp"
#include "odmr/format.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace odmr {

enum class ModelId { Rabi2Tone, Ramsey, ExpDecay, StretchedExp, RevivalTrain, SingleExpRepol, Linear };

inline std::string_view to_string(ModelId id) {
    switch (id) {
        case ModelId::Rabi2Tone: return "rabi2tone";
        case ModelId::Ramsey: return "ramsey";
        case ModelId::ExpDecay: return "exp_decay";
        case ModelId::StretchedExp: return "stretched_exp";
        case ModelId::RevivalTrain: return "revival_train";
        case ModelId::SingleExpRepol: return "single_exp_repol";
        case ModelId::Linear: return "linear";
    }
    return "?";
}

inline constexpr int revival_terms = 11;  // j = 0..10

struct ParamInfo {
    std::string name;
    std::string unit;
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();
    bool periodic = false;
};

struct ModelSpec {
    ModelId id = ModelId::Linear;
    std::vector<ParamInfo> params;

    std::size_t size() const { return params.size(); }
    std::size_t index(std::string_view name) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name == name) return i;
        throw AnalysisError("model " + std::string(to_string(id)) + " has no parameter " + std::string(name));
    }
    double clamp(std::size_t i, double v) const {
        const auto& p = params[i];
        if (p.periodic) return std::remainder(v, two_pi);
        return std::clamp(v, p.lower, p.upper);
    }
};

namespace models {

inline double rabi2tone(double x, std::span<const double> p, double* g) {
    double y = p[8] * x + p[9];
    for (int k = 0; k < 2; ++k) {
        const double a = p[4 * k], f = p[4 * k + 1], ph = p[4 * k + 2], t = p[4 * k + 3];
        const double arg = two_pi * f * x + ph;
        const double s = std::sin(arg), c = std::cos(arg), e = std::exp(-x / t);
        y += a * s * e;
        if (g) {
            g[4 * k] = s * e;
            g[4 * k + 1] = a * c * e * two_pi * x;
            g[4 * k + 2] = a * c * e;
            g[4 * k + 3] = a * s * e * x / (t * t);
        }
    }
    if (g) {
        g[8] = x;
        g[9] = 1.0;
    }
    return y;
}

inline double ramsey(double x, std::span<const double> p, double* g) {
    const double a = p[0], f = p[1], ph = p[2], t = p[3];
    const double arg = two_pi * f * x + ph;
    const double s = std::sin(arg), c = std::cos(arg), e = std::exp(-x / t);
    if (g) {
        g[0] = s * e;
        g[1] = a * c * e * two_pi * x;
        g[2] = a * c * e;
        g[3] = a * s * e * x / (t * t);
        g[4] = x;
        g[5] = 1.0;
    }
    return a * s * e + p[4] * x + p[5];
}

inline double exp_decay(double x, std::span<const double> p, double* g) {
    const double e = std::exp(-x / p[1]);
    if (g) {
        g[0] = e;
        g[1] = p[0] * e * x / (p[1] * p[1]);
        g[2] = 1.0;
    }
    return p[0] * e + p[2];
}

/// exp(-(x/t)^n) with derivatives with respect to t and n.
inline double stretched(double x, double t, double n, double* d_t, double* d_n) {
    if (x <= 0.0) {
        if (d_t) *d_t = 0.0;
        if (d_n) *d_n = 0.0;
        return 1.0;
    }
    const double u = x / t;
    const double un = std::pow(u, n);
    const double e = std::exp(-un);
    if (d_t) *d_t = e * n * un / t;
    if (d_n) *d_n = -e * un * std::log(u);
    return e;
}

inline double stretched_exp(double x, std::span<const double> p, double* g) {
    double dt = 0.0, dn = 0.0;
    const double e = stretched(x, p[1], p[2], &dt, &dn);
    if (g) {
        g[0] = e;
        g[1] = p[0] * dt;
        g[2] = p[0] * dn;
        g[3] = 1.0;
    }
    return p[0] * e + p[3];
}

struct TrainTerms {
    double s = 0.0, ds_trev = 0.0, ds_tdec = 0.0;
};

/// Sum over j of exp(-((x - j*trev)/tdec)^2) and its derivatives.
inline TrainTerms train(double x, double trev, double tdec) {
    TrainTerms out;
    for (int j = 0; j < revival_terms; ++j) {
        const double u = (x - j * trev) / tdec;
        const double e = std::exp(-u * u);
        out.s += e;
        out.ds_trev += e * 2.0 * u * j / tdec;
        out.ds_tdec += e * 2.0 * u * u / tdec;
    }
    return out;
}

// p = A, B, D, T2b, n, Trev, Tdec. The train is normalized to 1 at x = 0.
inline double revival_train(double x, std::span<const double> p, double* g) {
    const double a = p[0], b = p[1], d = p[2], t2 = p[3], n = p[4], trev = p[5], tdec = p[6];
    double de_t = 0.0, de_n = 0.0;
    const double e = stretched(x, t2, n, &de_t, &de_n);
    const auto s = train(x, trev, tdec);
    const auto z = train(0.0, trev, tdec);
    const double r = s.s / z.s;
    if (g) {
        g[0] = 1.0;
        g[1] = x;
        g[2] = e * r;
        g[3] = d * de_t * r;
        g[4] = d * de_n * r;
        g[5] = d * e * (s.ds_trev * z.s - s.s * z.ds_trev) / (z.s * z.s);
        g[6] = d * e * (s.ds_tdec * z.s - s.s * z.ds_tdec) / (z.s * z.s);
    }
    return a + b * x + d * e * r;
}

inline double linear(double x, std::span<const double> p, double* g) {
    if (g) {
        g[0] = x;
        g[1] = 1.0;
    }
    return p[0] * x + p[1];
}

}  // namespace models

/// Model value; writes the analytic gradient into `grad` when it is nonempty.
inline double model_eval(ModelId id, double x, std::span<const double> p, std::span<double> grad = {}) {
    double* g = grad.empty() ? nullptr : grad.data();
    switch (id) {
        case ModelId::Rabi2Tone: return models::rabi2tone(x, p, g);
        case ModelId::Ramsey: return models::ramsey(x, p, g);
        case ModelId::ExpDecay:
        case ModelId::SingleExpRepol: return models::exp_decay(x, p, g);
        case ModelId::StretchedExp: return models::stretched_exp(x, p, g);
        case ModelId::RevivalTrain: return models::revival_train(x, p, g);
        case ModelId::Linear: return models::linear(x, p, g);
    }
    return 0.0;
}

namespace detail {

struct DataScale {
    double x_min, x_max, x_span, dx_min, y_scale;
};

inline DataScale data_scale(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw AnalysisError("need >= 2 (x, y) pairs of equal length");
    DataScale d{};
    d.x_min = *std::min_element(xs.begin(), xs.end());
    d.x_max = *std::max_element(xs.begin(), xs.end());
    d.x_span = d.x_max - d.x_min;
    if (!(d.x_span > 0.0)) throw AnalysisError("all x values are identical");
    std::vector<double> sx(xs.begin(), xs.end());
    std::sort(sx.begin(), sx.end());
    d.dx_min = d.x_span;
    for (std::size_t i = 1; i < sx.size(); ++i)
        if (sx[i] > sx[i - 1]) d.dx_min = std::min(d.dx_min, sx[i] - sx[i - 1]);
    double ymax = 0.0, lo = ys[0], hi = ys[0];
    for (double y : ys) {
        if (!std::isfinite(y)) throw AnalysisError("non-finite y value");
        ymax = std::max(ymax, std::abs(y));
        lo = std::min(lo, y);
        hi = std::max(hi, y);
    }
    d.y_scale = std::max({ymax, hi - lo, 1e-300});
    return d;
}

}  // namespace detail

/// Parameter names and data-derived bounds for a model.
inline ModelSpec make_model(ModelId id, std::span<const double> xs, std::span<const double> ys) {
    const auto d = detail::data_scale(xs, ys);
    const double amp = 1e3 * d.y_scale;
    const double slope = amp / d.x_span;
    const double nyq = 0.5 / d.dx_min;
    const double tmin = 1e-2 * d.dx_min, tmax = 1e3 * d.x_span;
    const ParamInfo phase{"", "rad", -std::numbers::pi, std::numbers::pi, true};
    auto P = [](ParamInfo p, std::string name) {
        p.name = std::move(name);
        return p;
    };
    const ParamInfo a{"", "%", -amp, amp}, b{"", "%/s", -slope, slope}, f{"", "Hz", 0.0, nyq},
        t{"", "s", tmin, tmax}, n{"", "", 0.5, 3.0};
    ModelSpec m;
    m.id = id;
    switch (id) {
        case ModelId::Rabi2Tone:
            m.params = {P(a, "A1"), P(f, "f1"), P(phase, "phi1"), P(t, "T1R"),
                        P(a, "A2"), P(f, "f2"), P(phase, "phi2"), P(t, "T2R"),
                        P(b, "B"),  P(a, "D")};
            break;
        case ModelId::Ramsey:
            m.params = {P(a, "A"), P(f, "f_ramsey"), P(phase, "phi"), P(t, "T_ramsey"), P(b, "B"), P(a, "D")};
            break;
        case ModelId::ExpDecay: m.params = {P(a, "A"), P(t, "T1"), P(a, "B")}; break;
        case ModelId::SingleExpRepol: m.params = {P(a, "A"), P(t, "tau_repol"), P(a, "B")}; break;
        case ModelId::StretchedExp: m.params = {P(a, "A"), P(t, "T2_alpha"), P(n, "n"), P(a, "B")}; break;
        case ModelId::RevivalTrain:
            m.params = {P(a, "A"),
                        P(b, "B"),
                        P(a, "D"),
                        P(t, "T2_beta"),
                        P(n, "n"),
                        ParamInfo{"T_rev", "s", 2.0 * d.dx_min, d.x_span},
                        ParamInfo{"T_dec", "s", 0.1 * d.dx_min, d.x_span}};
            break;
        case ModelId::Linear:
            m.params = {P(b, "slope"), P(a, "intercept")};
            m.params[0].unit = m.params[1].unit = "";
            break;
    }
    return m;
}

struct FitOptions {
    int max_iterations = 400;
    /// Relative RSS change treated as stagnation.
    double rtol = 1e-14;
    /// Bound on the scaled gradient, max_j |J_j . r| / (|J_j| |y|).
    double gtol = 1e-9;
    bool analytic_gradient = true;
};

struct FitReport {
    ModelId model = ModelId::Linear;
    std::vector<std::string> names;
    std::vector<double> values;
    std::vector<double> uncertainties;
    std::vector<double> initial_guess;
    double rss = 0.0;
    int iterations = 0;
    bool converged = false;
    bool rank_deficient = false;
    double gradient_norm = 0.0;
    std::string message;
    /// RSS after each accepted step, starting with the initial guess.
    std::vector<double> rss_history;

    double value(std::string_view name) const { return values.at(find(name)); }
    double sigma(std::string_view name) const { return uncertainties.at(find(name)); }
    std::size_t find(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw AnalysisError("fit report has no parameter " + std::string(name));
    }
};

namespace detail {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline double residuals(const ModelSpec& m, std::span<const double> xs, std::span<const double> ys,
                        std::span<const double> p, Vec& r) {
    r.resize(static_cast<Eigen::Index>(xs.size()));
    double rss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double v = ys[i] - model_eval(m.id, xs[i], p);
        r[static_cast<Eigen::Index>(i)] = v;
        rss += v * v;
    }
    return std::isfinite(rss) ? rss : std::numeric_limits<double>::infinity();
}

/// Jacobian of the model (not the residual) with respect to the parameters.
inline void jacobian(const ModelSpec& m, std::span<const double> xs, std::span<const double> p,
                     bool analytic, Mat& J) {
    const auto n = static_cast<Eigen::Index>(xs.size());
    const auto k = static_cast<Eigen::Index>(p.size());
    J.resize(n, k);
    std::vector<double> g(p.size()), q(p.begin(), p.end());
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = xs[static_cast<std::size_t>(i)];
        if (analytic) {
            model_eval(m.id, x, p, g);
            for (Eigen::Index j = 0; j < k; ++j) J(i, j) = g[static_cast<std::size_t>(j)];
        } else {
            for (Eigen::Index j = 0; j < k; ++j) {
                const auto u = static_cast<std::size_t>(j);
                const double h = 1e-6 * std::max(std::abs(p[u]), 1e-8);
                q[u] = p[u] + h;
                const double fp = model_eval(m.id, x, q);
                q[u] = p[u] - h;
                const double fm = model_eval(m.id, x, q);
                q[u] = p[u];
                J(i, j) = (fp - fm) / (2.0 * h);
            }
        }
    }
}

inline bool at_lower(const ParamInfo& pi, double v) { return !pi.periodic && v <= pi.lower; }
inline bool at_upper(const ParamInfo& pi, double v) { return !pi.periodic && v >= pi.upper; }

/// Scaled gradient with bound-blocked components removed.
inline double projected_gradient_norm(const ModelSpec& m, const std::vector<double>& p, const Mat& J,
                                      const Vec& r, double y_norm) {
    const Vec g = J.transpose() * r;  // descent direction for RSS
    double worst = 0.0;
    for (Eigen::Index j = 0; j < g.size(); ++j) {
        const auto& pi = m.params[static_cast<std::size_t>(j)];
        const double v = p[static_cast<std::size_t>(j)];
        if ((at_lower(pi, v) && g[j] < 0) || (at_upper(pi, v) && g[j] > 0)) continue;
        const double cn = J.col(j).norm();
        if (cn == 0.0) continue;
        worst = std::max(worst, std::abs(g[j]) / (cn * y_norm));
    }
    return worst;
}

}  // namespace detail

/// Bound-projected Levenberg-Marquardt with Marquardt diagonal scaling.
inline FitReport nlls_fit(const ModelSpec& model, std::span<const double> xs, std::span<const double> ys,
                          std::span<const double> guess, const FitOptions& opt = {}) {
    using detail::Mat;
    using detail::Vec;
    const std::size_t m = model.size();
    if (guess.size() != m) throw AnalysisError("initial guess has wrong length");
    if (xs.size() != ys.size()) throw AnalysisError("xs and ys differ in length");
    if (xs.size() < m + 1) throw AnalysisError("need at least n_params + 1 data points");

    FitReport rep;
    rep.model = model.id;
    for (const auto& p : model.params) rep.names.push_back(p.name);
    std::vector<double> p(guess.begin(), guess.end());
    for (std::size_t j = 0; j < m; ++j) {
        if (!std::isfinite(p[j])) throw AnalysisError("initial guess is not finite");
        p[j] = model.clamp(j, p[j]);
    }
    rep.initial_guess = p;

    double y_norm = 0.0;
    for (double y : ys) y_norm += y * y;
    y_norm = std::sqrt(y_norm);
    if (y_norm == 0.0) y_norm = 1.0;

    Vec r;
    Mat J;
    double rss = detail::residuals(model, xs, ys, p, r);
    if (!std::isfinite(rss)) throw AnalysisError("model is not finite at the initial guess");
    rep.rss_history.push_back(rss);
    double lambda = 1e-3, nu = 2.0;
    // An undamped step is tried first when the local quadratic model has been reliable.
    bool try_gauss_newton = true;
    const double rss_floor = 1e-28 * y_norm * y_norm;
    bool stalled = false;

    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        detail::jacobian(model, xs, p, opt.analytic_gradient, J);
        rep.gradient_norm = detail::projected_gradient_norm(model, p, J, r, y_norm);
        if (rep.gradient_norm < opt.gtol || rss <= rss_floor) break;

        const Vec g = J.transpose() * r;
        const Mat JtJ = J.transpose() * J;
        // Parameters pinned at a bound with an outward gradient are frozen this iteration.
        std::vector<Eigen::Index> free;
        for (std::size_t j = 0; j < m; ++j) {
            const auto& pi = model.params[j];
            const auto jj = static_cast<Eigen::Index>(j);
            if ((detail::at_lower(pi, p[j]) && g[jj] < 0) || (detail::at_upper(pi, p[j]) && g[jj] > 0))
                continue;
            free.push_back(jj);
        }
        if (free.empty()) break;
        const auto k = static_cast<Eigen::Index>(free.size());
        Mat A(k, k);
        Vec b(k), diag(k);
        double dmax = 0.0;
        for (Eigen::Index a = 0; a < k; ++a) {
            b[a] = g[free[static_cast<std::size_t>(a)]];
            for (Eigen::Index c = 0; c < k; ++c)
                A(a, c) = JtJ(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(c)]);
            diag[a] = A(a, a);
            dmax = std::max(dmax, diag[a]);
        }
        for (Eigen::Index a = 0; a < k; ++a) diag[a] = std::max(diag[a], 1e-30 * std::max(dmax, 1e-300));

        bool accepted = false;
        while (!accepted) {
            const double damping = try_gauss_newton ? 0.0 : lambda;
            Mat Ad = A;
            for (Eigen::Index a = 0; a < k; ++a) Ad(a, a) += damping * diag[a];
            const Vec step = Ad.ldlt().solve(b);
            std::vector<double> trial = p;
            bool finite = step.allFinite();
            for (Eigen::Index a = 0; a < k && finite; ++a) {
                const auto j = static_cast<std::size_t>(free[static_cast<std::size_t>(a)]);
                trial[j] = model.clamp(j, p[j] + step[a]);
            }
            Vec r_trial;
            const double rss_trial = finite ? detail::residuals(model, xs, ys, trial, r_trial)
                                            : std::numeric_limits<double>::infinity();
            if (rss_trial < rss) {
                const double predicted = step.dot(damping * diag.cwiseProduct(step) + b);
                const double rho = predicted > 0 ? (rss - rss_trial) / predicted : 0.0;
                const double change = (rss - rss_trial) / rss;
                p = std::move(trial);
                r = std::move(r_trial);
                rss = rss_trial;
                rep.rss_history.push_back(rss);
                if (!try_gauss_newton) {
                    lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
                    lambda = std::max(lambda, 1e-15);
                }
                try_gauss_newton = rho > 0.9;
                nu = 2.0;
                accepted = true;
                if (change < opt.rtol) stalled = true;
            } else if (try_gauss_newton) {
                try_gauss_newton = false;
            } else {
                lambda *= nu;
                nu *= 2.0;
                if (lambda > 1e16) {
                    stalled = true;
                    break;
                }
            }
        }
        if (stalled) {
            ++it;
            detail::jacobian(model, xs, p, opt.analytic_gradient, J);
            rep.gradient_norm = detail::projected_gradient_norm(model, p, J, r, y_norm);
            break;
        }
    }
    if (it == opt.max_iterations) {
        detail::jacobian(model, xs, p, opt.analytic_gradient, J);
        rep.gradient_norm = detail::projected_gradient_norm(model, p, J, r, y_norm);
    }

    rep.iterations = it;
    rep.values = p;
    rep.rss = rss;
    rep.converged = rep.gradient_norm < opt.gtol;
    rep.message = rep.converged ? "converged"
                  : stalled     ? "stalled above gradient tolerance"
                                : "iteration limit reached";

    // Covariance from the scaled pseudo-inverse of J^T J.
    detail::jacobian(model, xs, p, opt.analytic_gradient, J);
    Vec scale(static_cast<Eigen::Index>(m));
    for (Eigen::Index j = 0; j < scale.size(); ++j) {
        const double c = J.col(j).norm();
        scale[j] = c > 0 ? 1.0 / c : 0.0;
    }
    const Mat Js = J * scale.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Mat> es(Js.transpose() * Js);
    const Vec ev = es.eigenvalues();
    const double evmax = ev.size() ? ev.maxCoeff() : 0.0;
    Vec inv(ev.size());
    for (Eigen::Index j = 0; j < ev.size(); ++j) {
        if (ev[j] > 1e-13 * evmax && evmax > 0) {
            inv[j] = 1.0 / ev[j];
        } else {
            inv[j] = 0.0;
            rep.rank_deficient = true;
        }
    }
    for (Eigen::Index j = 0; j < scale.size(); ++j)
        if (scale[j] == 0.0) rep.rank_deficient = true;
    const Mat cov_s = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    const double dof = static_cast<double>(xs.size() - m);
    rep.uncertainties.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        const double var = cov_s(jj, jj) * scale[jj] * scale[jj] * rss / dof;
        rep.uncertainties[j] = std::sqrt(std::max(0.0, var));
    }
    return rep;
}

struct Spectrum {
    std::vector<double> frequencies;
    std::vector<double> power;

    double bin_width() const { return frequencies.size() > 1 ? frequencies[1] - frequencies[0] : 0.0; }
};

/// One-sided periodogram of the mean-subtracted series, normalized so that
/// sum(power) * bin_width equals the mean square of the series.
inline Spectrum psd(std::span<const double> ys, double dx) {
    const std::size_t n = ys.size();
    if (n < 8) throw AnalysisError("psd needs at least 8 samples");
    if (!(dx > 0.0)) throw AnalysisError("psd needs a positive sample spacing");
    const double mean = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(n);
    Spectrum s;
    const std::size_t half = n / 2;
    for (std::size_t k = 0; k <= half; ++k) {
        std::complex<double> acc{0.0, 0.0};
        for (std::size_t i = 0; i < n; ++i) {
            const double ang = -two_pi * static_cast<double>((k * i) % n) / static_cast<double>(n);
            acc += (ys[i] - mean) * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        const bool edge = (k == 0) || (n % 2 == 0 && k == half);
        s.frequencies.push_back(static_cast<double>(k) / (static_cast<double>(n) * dx));
        s.power.push_back((edge ? 1.0 : 2.0) * std::norm(acc) * dx / static_cast<double>(n));
    }
    return s;
}

/// PSD of a series sampled at `xs`, which must be uniformly spaced.
inline Spectrum psd(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw AnalysisError("psd: xs and ys differ in length");
    if (xs.size() < 8) throw AnalysisError("psd needs at least 8 samples");
    const double dx = (xs.back() - xs.front()) / static_cast<double>(xs.size() - 1);
    for (std::size_t i = 1; i < xs.size(); ++i)
        if (std::abs((xs[i] - xs[i - 1]) - dx) > 1e-6 * std::abs(dx))
            throw AnalysisError("psd: non-uniform sample spacing");
    return psd(ys, dx);
}

/// Local maxima of the spectrum above DC, strongest first.
inline std::vector<std::size_t> spectral_peaks(const Spectrum& s) {
    std::vector<std::size_t> idx;
    const auto& p = s.power;
    for (std::size_t k = 1; k < p.size(); ++k) {
        const bool left = p[k] > p[k - 1];
        const bool right = k + 1 >= p.size() || p[k] >= p[k + 1];
        if (left && right && p[k] > 0.0) idx.push_back(k);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
    return idx;
}

namespace detail {

/// Least-squares coefficients for ys ~ sum_k c_k basis_k(x); returns RSS.
inline double linear_solve(const Mat& basis, std::span<const double> ys, Vec& coef) {
    Vec y(static_cast<Eigen::Index>(ys.size()));
    for (std::size_t i = 0; i < ys.size(); ++i) y[static_cast<Eigen::Index>(i)] = ys[i];
    coef = basis.colPivHouseholderQr().solve(y);
    if (!coef.allFinite()) coef.setZero();
    return (basis * coef - y).squaredNorm();
}

inline Spectrum guess_spectrum(std::span<const double> xs, std::span<const double> ys) {
    // Resample onto a uniform grid by linear interpolation when the sweep is irregular.
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
    const std::size_t n = std::max<std::size_t>(xs.size(), 8);
    const double x0 = xs[order.front()], x1 = xs[order.back()];
    const double dx = (x1 - x0) / static_cast<double>(n - 1);
    std::vector<double> u(n);
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = x0 + dx * static_cast<double>(i);
        while (j + 2 < order.size() && xs[order[j + 1]] < x) ++j;
        const double xa = xs[order[j]], xb = xs[order[std::min(j + 1, order.size() - 1)]];
        const double ya = ys[order[j]], yb = ys[order[std::min(j + 1, order.size() - 1)]];
        u[i] = xb > xa ? ya + (yb - ya) * (x - xa) / (xb - xa) : ya;
    }
    return psd(u, dx);
}

inline std::vector<double> clamp_all(const ModelSpec& m, std::vector<double> p) {
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = m.clamp(j, std::isfinite(p[j]) ? p[j] : 0.0);
    return p;
}

/// Amplitude/phase pair from coefficients of sin and cos.
inline std::pair<double, double> amp_phase(double c_sin, double c_cos) {
    return {std::hypot(c_sin, c_cos), std::atan2(c_cos, c_sin)};
}

/// Damped-sinusoid components, optionally followed by slope and offset columns.
inline Mat damped_basis(std::span<const double> xs, std::span<const std::pair<double, double>> tones,
                        bool with_slope) {
    const auto n = static_cast<Eigen::Index>(xs.size());
    const auto k = static_cast<Eigen::Index>(2 * tones.size() + (with_slope ? 2 : 1));
    Mat B(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = xs[static_cast<std::size_t>(i)];
        Eigen::Index c = 0;
        for (auto [f, t] : tones) {
            const double e = std::exp(-x / t);
            B(i, c++) = std::sin(two_pi * f * x) * e;
            B(i, c++) = std::cos(two_pi * f * x) * e;
        }
        if (with_slope) B(i, c++) = x;
        B(i, c) = 1.0;
    }
    return B;
}

struct ExpGuess {
    double a, t, b;
};

/// Offset from the tail mean, decay constant from a log-envelope regression.
inline ExpGuess exp_guess(std::span<const double> xs, std::span<const double> ys) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
    const std::size_t n = order.size();
    const std::size_t tail = std::max<std::size_t>(1, n / 10);
    double b = 0.0;
    for (std::size_t i = n - tail; i < n; ++i) b += ys[order[i]];
    b /= static_cast<double>(tail);
    const double x0 = xs[order.front()];
    const double a0 = ys[order.front()] - b;
    const double span = xs[order.back()] - x0;
    ExpGuess g{a0, span / 3.0, b};
    if (a0 == 0.0) return g;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (ys[order[i]] - b) / a0;
        if (d <= 0.1) break;
        const double x = xs[order[i]] - x0, y = std::log(d);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++m;
    }
    if (m >= 2) {
        const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        if (slope < 0 && std::isfinite(slope)) g.t = -1.0 / slope;
    }
    // Amplitude referred to x = 0.
    g.a = a0 * std::exp(x0 / g.t);
    if (!std::isfinite(g.a)) g.a = a0;
    return g;
}

inline double revival_shape(double x, double t2, double n, double trev, double tdec) {
    return models::stretched(x, t2, n, nullptr, nullptr) * models::train(x, trev, tdec).s /
           models::train(0.0, trev, tdec).s;
}

}  // namespace detail

/// Candidate starting points, best first. The first entry is the primary guess.
inline std::vector<std::vector<double>> initial_guesses(const ModelSpec& m, std::span<const double> xs,
                                                        std::span<const double> ys) {
    using detail::Mat;
    using detail::Vec;
    const auto d = detail::data_scale(xs, ys);
    std::vector<std::vector<double>> out;
    const bool flat = std::all_of(ys.begin(), ys.end(), [&](double y) { return y == ys[0]; });

    switch (m.id) {
        case ModelId::Linear: {
            double sx = 0, sy = 0, sxx = 0, sxy = 0;
            const double n = static_cast<double>(xs.size());
            for (std::size_t i = 0; i < xs.size(); ++i) {
                sx += xs[i];
                sy += ys[i];
                sxx += xs[i] * xs[i];
                sxy += xs[i] * ys[i];
            }
            const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            out.push_back({slope, (sy - slope * sx) / n});
            break;
        }
        case ModelId::ExpDecay:
        case ModelId::SingleExpRepol: {
            if (flat) {
                out.push_back({0.0, d.x_span / 3.0, ys[0]});
                break;
            }
            const auto g = detail::exp_guess(xs, ys);
            out.push_back({g.a, g.t, g.b});
            break;
        }
        case ModelId::StretchedExp: {
            if (flat) {
                out.push_back({0.0, d.x_span / 3.0, 1.0, ys[0]});
                break;
            }
            const auto g = detail::exp_guess(xs, ys);
            struct Cand {
                double rss;
                std::vector<double> p;
            };
            std::vector<Cand> cands;
            for (double n : {1.0, 1.5, 2.0, 2.5})
                for (double ts : {0.5, 0.75, 1.0, 1.5, 2.0}) {
                    const double t = g.t * ts;
                    Mat B(static_cast<Eigen::Index>(xs.size()), 2);
                    for (std::size_t i = 0; i < xs.size(); ++i) {
                        B(static_cast<Eigen::Index>(i), 0) = models::stretched(xs[i], t, n, nullptr, nullptr);
                        B(static_cast<Eigen::Index>(i), 1) = 1.0;
                    }
                    Vec c;
                    const double rss = detail::linear_solve(B, ys, c);
                    cands.push_back({rss, {c[0], t, n, c[1]}});
                }
            std::stable_sort(cands.begin(), cands.end(), [](auto& a, auto& b) { return a.rss < b.rss; });
            for (std::size_t i = 0; i < std::min<std::size_t>(3, cands.size()); ++i) out.push_back(cands[i].p);
            break;
        }
        case ModelId::Ramsey:
        case ModelId::Rabi2Tone: {
            const bool two = m.id == ModelId::Rabi2Tone;
            if (flat) {
                out.push_back(two ? std::vector<double>{0, 0, 0, d.x_span, 0, 0, 0, d.x_span, 0, ys[0]}
                                  : std::vector<double>{0, 0, 0, d.x_span, 0, ys[0]});
                break;
            }
            const auto spec = detail::guess_spectrum(xs, ys);
            const auto peaks = spectral_peaks(spec);
            const double fallback = 2.0 / d.x_span;
            std::vector<double> fcand;
            for (std::size_t i = 0; i < std::min<std::size_t>(3, peaks.size()); ++i)
                fcand.push_back(spec.frequencies[peaks[i]]);
            if (fcand.empty()) fcand.push_back(fallback);
            const std::vector<double> tgrid{d.x_span / 20, d.x_span / 10, d.x_span / 5, d.x_span / 2, d.x_span};
            struct Cand {
                double rss;
                std::vector<double> p;
            };
            std::vector<Cand> cands;
            if (!two) {
                for (double f : fcand)
                    for (double t : tgrid) {
                        const std::pair<double, double> tone{f, t};
                        Vec c;
                        const double rss = detail::linear_solve(detail::damped_basis(xs, {&tone, 1}, true), ys, c);
                        const auto [a, ph] = detail::amp_phase(c[0], c[1]);
                        cands.push_back({rss, {a, f, ph, t, c[2], c[3]}});
                    }
            } else {
                // f1 is the strongest bin; f2 the strongest peak above it.
                const double f1 = fcand.front();
                std::vector<double> f2s;
                for (auto k : peaks)
                    if (spec.frequencies[k] > f1 && f2s.size() < 3) f2s.push_back(spec.frequencies[k]);
                f2s.push_back(std::min(1.3 * f1, 0.5 / d.dx_min));
                for (double f2 : f2s)
                    for (double t1 : tgrid)
                        for (double t2 : tgrid) {
                            const std::pair<double, double> tones[2]{{f1, t1}, {f2, t2}};
                            Vec c;
                            const double rss = detail::linear_solve(detail::damped_basis(xs, tones, true), ys, c);
                            const auto [a1, p1] = detail::amp_phase(c[0], c[1]);
                            const auto [a2, p2] = detail::amp_phase(c[2], c[3]);
                            cands.push_back({rss, {a1, f1, p1, t1, a2, f2, p2, t2, c[4], c[5]}});
                        }
            }
            std::stable_sort(cands.begin(), cands.end(), [](auto& a, auto& b) { return a.rss < b.rss; });
            for (std::size_t i = 0; i < std::min<std::size_t>(4, cands.size()); ++i) out.push_back(cands[i].p);
            break;
        }
        case ModelId::RevivalTrain: {
            if (flat) {
                out.push_back({ys[0], 0.0, 0.0, d.x_span / 2, 1.5, d.x_span / 4, d.x_span / 24});
                break;
            }
            struct Cand {
                double rss;
                std::vector<double> p;
            };
            std::vector<Cand> cands;
            auto solve = [&](double t2, double n, double trev, double tdec) {
                Mat B(static_cast<Eigen::Index>(xs.size()), 3);
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    const auto ii = static_cast<Eigen::Index>(i);
                    B(ii, 0) = 1.0;
                    B(ii, 1) = xs[i];
                    B(ii, 2) = detail::revival_shape(xs[i], t2, n, trev, tdec);
                }
                Vec c;
                const double rss = detail::linear_solve(B, ys, c);
                return Cand{rss, {c[0], c[1], c[2], t2, n, trev, tdec}};
            };
            const double lo = std::max(4.0 * d.dx_min, d.x_span / 60.0), hi = d.x_span / 1.5;
            Cand best{std::numeric_limits<double>::infinity(), {}};
            const int steps = 400;
            for (int i = 0; i <= steps; ++i) {
                const double trev = lo * std::pow(hi / lo, static_cast<double>(i) / steps);
                auto c = solve(d.x_span / 2, 1.5, trev, trev / 6.0);
                if (c.rss < best.rss) best = c;
            }
            const double trev = best.p[5];
            for (double t2s : {0.25, 0.5, 1.0, 2.0})
                for (double ds : {0.5, 0.75, 1.0, 1.5})
                    for (double n : {1.0, 1.5, 2.0})
                        cands.push_back(solve(d.x_span * t2s, n, trev, trev / 6.0 * ds));
            std::stable_sort(cands.begin(), cands.end(), [](auto& a, auto& b) { return a.rss < b.rss; });
            for (std::size_t i = 0; i < std::min<std::size_t>(3, cands.size()); ++i) out.push_back(cands[i].p);
            break;
        }
    }
    for (auto& p : out) p = detail::clamp_all(m, std::move(p));
    return out;
}

inline std::vector<double> initial_guess(const ModelSpec& m, std::span<const double> xs,
                                         std::span<const double> ys) {
    return initial_guesses(m, xs, ys).front();
}

namespace detail {

inline void order_rabi_tones(FitReport& r) {
    if (r.values[1] <= r.values[5]) return;
    for (int k = 0; k < 4; ++k) {
        std::swap(r.values[k], r.values[4 + k]);
        std::swap(r.uncertainties[k], r.uncertainties[4 + k]);
        std::swap(r.initial_guess[k], r.initial_guess[4 + k]);
    }
}

/// Fits from every candidate start and keeps the lowest RSS, preferring converged fits.
inline FitReport fit_model(ModelId id, std::span<const double> xs, std::span<const double> ys,
                           const FitOptions& opt = {}) {
    const auto m = make_model(id, xs, ys);
    std::optional<FitReport> best;
    for (const auto& g : initial_guesses(m, xs, ys)) {
        auto r = nlls_fit(m, xs, ys, g, opt);
        const bool better = !best || (r.converged && !best->converged) ||
                            (r.converged == best->converged && r.rss < best->rss);
        if (better) best = std::move(r);
    }
    if (id == ModelId::Rabi2Tone) order_rabi_tones(*best);
    return *best;
}

}  // namespace detail

inline FitReport fit_rabi(std::span<const double> xs, std::span<const double> ys) {
    return detail::fit_model(ModelId::Rabi2Tone, xs, ys);
}
inline FitReport fit_ramsey(std::span<const double> xs, std::span<const double> ys) {
    return detail::fit_model(ModelId::Ramsey, xs, ys);
}
inline FitReport fit_t1(std::span<const double> xs, std::span<const double> ys) {
    return detail::fit_model(ModelId::ExpDecay, xs, ys);
}
inline FitReport fit_echo_decay(std::span<const double> xs, std::span<const double> ys) {
    return detail::fit_model(ModelId::StretchedExp, xs, ys);
}
inline FitReport fit_revival_train(std::span<const double> xs, std::span<const double> ys) {
    return detail::fit_model(ModelId::RevivalTrain, xs, ys);
}
inline FitReport fit_repolarization(std::span<const double> xs, std::span<const double> ys) {
    return detail::fit_model(ModelId::SingleExpRepol, xs, ys);
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

inline LinearFit linear_fit(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw AnalysisError("linear_fit needs >= 2 points");
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx == 0.0) throw AnalysisError("linear_fit: all x values are identical");
    LinearFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double ss_res = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double e = ys[i] - (f.slope * xs[i] + f.intercept);
        ss_res += e * e;
    }
    f.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
    return f;
}

/// `key: value` text form of a fit report.
inline std::string format_fit_report(const FitReport& r) {
    std::ostringstream os;
    os << "model: " << to_string(r.model) << '\n';
    os << "converged: " << (r.converged ? "true" : "false") << '\n';
    os << "message: " << r.message << '\n';
    os << "iterations: " << r.iterations << '\n';
    os << "rss: " << fmt_double(r.rss) << '\n';
    os << "gradient_norm: " << fmt_double(r.gradient_norm) << '\n';
    os << "rank_deficient: " << (r.rank_deficient ? "true" : "false") << '\n';
    for (std::size_t i = 0; i < r.names.size(); ++i) {
        os << "param." << r.names[i] << ": " << fmt_double(r.values[i]) << '\n';
        os << "sigma." << r.names[i] << ": " << fmt_double(r.uncertainties[i]) << '\n';
        os << "guess." << r.names[i] << ": " << fmt_double(r.initial_guess[i]) << '\n';
    }
    return os.str();
}

inline FitReport parse_fit_report(std::string_view text) {
    FitReport r;
    std::istringstream is{std::string(text)};
    std::string line;
    auto index_of = [&](const std::string& name) {
        for (std::size_t i = 0; i < r.names.size(); ++i)
            if (r.names[i] == name) return i;
        r.names.push_back(name);
        r.values.push_back(0.0);
        r.uncertainties.push_back(0.0);
        r.initial_guess.push_back(0.0);
        return r.names.size() - 1;
    };
    while (std::getline(is, line)) {
        const auto colon = line.find(": ");
        if (colon == std::string::npos) continue;
        const std::string key = line.substr(0, colon), val = line.substr(colon + 2);
        double v = 0.0;
        if (key == "model") {
            for (auto id : {ModelId::Rabi2Tone, ModelId::Ramsey, ModelId::ExpDecay, ModelId::StretchedExp,
                            ModelId::RevivalTrain, ModelId::SingleExpRepol, ModelId::Linear})
                if (to_string(id) == val) r.model = id;
        } else if (key == "converged") {
            r.converged = val == "true";
        } else if (key == "message") {
            r.message = val;
        } else if (key == "iterations") {
            r.iterations = std::stoi(val);
        } else if (key == "rss" && parse_double(val, v)) {
            r.rss = v;
        } else if (key == "gradient_norm" && parse_double(val, v)) {
            r.gradient_norm = v;
        } else if (key == "rank_deficient") {
            r.rank_deficient = val == "true";
        } else if (key.rfind("param.", 0) == 0 && parse_double(val, v)) {
            r.values[index_of(key.substr(6))] = v;
        } else if (key.rfind("sigma.", 0) == 0 && parse_double(val, v)) {
            r.uncertainties[index_of(key.substr(6))] = v;
        } else if (key.rfind("guess.", 0) == 0 && parse_double(val, v)) {
            r.initial_guess[index_of(key.substr(6))] = v;
        }
    }
    return r;
}

}  // namespace odmr
