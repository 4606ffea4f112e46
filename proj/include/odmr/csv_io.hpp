#pragma once

#include "odmr/acquisition.hpp"
#include "odmr/analysis.hpp"
#include "odmr/format.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace odmr {

inline constexpr std::string_view sweep_header = "swept_value_s,i_ref_v,i_sig_v,contrast_pct";
inline constexpr std::string_view waveform_header = "t_rel_trigger_s,volts";
inline constexpr std::string_view trace_header = "t_s,pl";

/// Everything a sweep CSV carries: rows, run metadata and an optional fit block.
struct SweepArtifact {
    std::string protocol;
    std::string config_hash;
    SweepResult result;
    std::optional<FitReport> fit;
};

namespace detail {

inline std::optional<ProtocolKind> parse_kind(std::string_view s) {
    for (auto k : {ProtocolKind::Rabi, ProtocolKind::Ramsey, ProtocolKind::T1, ProtocolKind::Echo,
                   ProtocolKind::Repolarization})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

inline std::vector<double> split_row(const std::string& line, std::size_t expected, std::size_t line_no) {
    std::vector<double> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        double v = 0.0;
        if (!parse_double(cell, v))
            throw ConfigError("csv line " + std::to_string(line_no) + ": bad number '" + cell + "'");
        out.push_back(v);
    }
    if (out.size() != expected)
        throw ConfigError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(expected) +
                          " columns");
    return out;
}

/// Splits CSV text into `# key: value` metadata, the header line and numeric rows.
struct CsvParts {
    std::map<std::string, std::string> meta;
    std::vector<std::string> fit_lines;
    std::vector<std::vector<double>> rows;
};

inline CsvParts split_csv(std::string_view text, std::string_view header) {
    CsvParts parts;
    std::istringstream is{std::string(text)};
    std::string line;
    bool seen_header = false;
    std::size_t line_no = 0;
    const auto columns = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',') + 1);
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.rfind("# ", 0) == 0) {
            const std::string body = line.substr(2);
            const auto colon = body.find(": ");
            if (colon == std::string::npos) continue;
            const std::string key = body.substr(0, colon);
            if (key.rfind("fit.", 0) == 0)
                parts.fit_lines.push_back(key.substr(4) + body.substr(colon));
            else
                parts.meta[key] = body.substr(colon + 2);
            continue;
        }
        if (!seen_header) {
            if (line != header) throw ConfigError("csv: expected header '" + std::string(header) + "'");
            seen_header = true;
            continue;
        }
        parts.rows.push_back(split_row(line, columns, line_no));
    }
    if (!seen_header) throw ConfigError("csv: missing header");
    return parts;
}

}  // namespace detail

inline std::string format_sweep_csv(const SweepArtifact& a) {
    const auto& r = a.result;
    std::ostringstream os;
    os << "# protocol: " << a.protocol << '\n';
    os << "# protocol_kind: " << to_string(r.protocol_kind) << '\n';
    os << "# swept_symbol: " << r.swept_symbol << '\n';
    os << "# strategy: " << to_string(r.strategy) << '\n';
    os << "# serial_reference: " << (r.serial_reference ? "true" : "false") << '\n';
    os << "# n_averages: " << r.n_averages << '\n';
    os << "# seed: " << r.seed << '\n';
    os << "# config_hash: " << a.config_hash << '\n';
    if (a.fit) {
        std::istringstream fit(format_fit_report(*a.fit));
        std::string line;
        while (std::getline(fit, line)) os << "# fit." << line << '\n';
    }
    os << sweep_header << '\n';
    for (const auto& row : r.rows)
        os << fmt_double(row.value) << ',' << fmt_double(row.i_ref) << ',' << fmt_double(row.i_sig) << ','
           << fmt_double(row.contrast_pct) << '\n';
    return os.str();
}

inline SweepArtifact parse_sweep_csv(std::string_view text) {
    auto parts = detail::split_csv(text, sweep_header);
    auto get = [&](const std::string& key) -> const std::string& {
        const auto it = parts.meta.find(key);
        if (it == parts.meta.end()) throw ConfigError("sweep csv: missing metadata '" + key + "'");
        return it->second;
    };
    SweepArtifact a;
    a.protocol = get("protocol");
    a.config_hash = get("config_hash");
    auto& r = a.result;
    const auto kind = detail::parse_kind(get("protocol_kind"));
    if (!kind) throw ConfigError("sweep csv: bad protocol_kind");
    r.protocol_kind = *kind;
    r.swept_symbol = get("swept_symbol");
    const auto strategy = parse_strategy(get("strategy"));
    if (!strategy) throw ConfigError("sweep csv: bad strategy");
    r.strategy = *strategy;
    r.serial_reference = get("serial_reference") == "true";
    r.n_averages = std::stoi(get("n_averages"));
    r.seed = std::stoull(get("seed"));
    for (const auto& v : parts.rows) r.rows.push_back({v[0], v[2], v[1], v[3]});
    if (!parts.fit_lines.empty()) {
        std::string fit;
        for (const auto& l : parts.fit_lines) fit += l + '\n';
        a.fit = parse_fit_report(fit);
    }
    return a;
}

inline std::string format_waveform_csv(const AveragedWaveform& w) {
    std::ostringstream os;
    os << "# n_averaged: " << w.n_averaged << '\n';
    os << "# strategy: " << to_string(w.strategy) << '\n';
    os << "# t_rel_trigger: " << fmt_double(w.t_rel_trigger) << '\n';
    os << "# dt: " << fmt_double(w.dt) << '\n';
    os << waveform_header << '\n';
    for (std::size_t i = 0; i < w.samples.size(); ++i)
        os << fmt_double(w.time(i)) << ',' << fmt_double(w.samples[i]) << '\n';
    return os.str();
}

inline AveragedWaveform parse_waveform_csv(std::string_view text) {
    const auto parts = detail::split_csv(text, waveform_header);
    AveragedWaveform w;
    const auto meta = [&](const std::string& key) {
        const auto it = parts.meta.find(key);
        if (it == parts.meta.end()) throw ConfigError("waveform csv: missing metadata '" + key + "'");
        return it->second;
    };
    w.n_averaged = std::stoi(meta("n_averaged"));
    const auto s = parse_strategy(meta("strategy"));
    if (!s) throw ConfigError("waveform csv: bad strategy");
    w.strategy = *s;
    if (!parse_double(meta("t_rel_trigger"), w.t_rel_trigger) || !parse_double(meta("dt"), w.dt))
        throw ConfigError("waveform csv: bad time base");
    for (const auto& row : parts.rows) w.samples.push_back(row[1]);
    return w;
}

inline std::string format_trace_csv(const PLTrace& t) {
    std::ostringstream os;
    os << "# t0: " << fmt_double(t.t0) << '\n';
    os << "# dt: " << fmt_double(t.dt) << '\n';
    os << trace_header << '\n';
    for (std::size_t i = 0; i < t.samples.size(); ++i)
        os << fmt_double(t.t0 + static_cast<double>(i) * t.dt) << ',' << fmt_double(t.samples[i]) << '\n';
    return os.str();
}

inline PLTrace parse_trace_csv(std::string_view text) {
    const auto parts = detail::split_csv(text, trace_header);
    PLTrace t;
    const auto t0 = parts.meta.find("t0");
    const auto dt = parts.meta.find("dt");
    if (t0 == parts.meta.end() || dt == parts.meta.end() || !parse_double(t0->second, t.t0) ||
        !parse_double(dt->second, t.dt))
        throw ConfigError("trace csv: missing time base");
    for (const auto& row : parts.rows) t.samples.push_back(row[1]);
    return t;
}

}  // namespace odmr
