#include "odmr/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace odmr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("odmr_cli_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    args.insert(args.begin(), "odmr-rig");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

/// A small Rabi run that finishes in well under a second.
RunConfig small_rabi(const fs::path& dir) {
    auto c = template_config(ProtocolId::Rabi);
    c.protocol.sweep_points = 16;
    c.protocol.n_averages = 2;
    c.protocol.threads = 1;
    c.output.directory = dir.string();
    return c;
}

fs::path write_config(const fs::path& dir, const RunConfig& c, const std::string& name = "cfg.ini") {
    const auto p = dir / name;
    std::ofstream(p) << serialize_config(c);
    return p;
}

}  // namespace

TEST(Config, MinimalFileUsesDefaults) {
    const auto c = parse_config("[protocol]\nkind = ramsey\nseed = 5\n");
    EXPECT_EQ(c.protocol.kind, ProtocolId::Ramsey);
    EXPECT_EQ(c.protocol.seed, 5u);
    EXPECT_DOUBLE_EQ(c.ensemble.t1, RunConfig{}.ensemble.t1);
}

TEST(Config, UnknownKeyNamesTheField) {
    try {
        parse_config("[protocol]\nkind = rabi\nseed = 1\n[ensemble]\nt_one = 3\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("ensemble.t_one"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_config("[protocol]\nkind = rabi\nseed = 1\n[nonsense]\nx = 1\n"), ConfigError);
}

TEST(Config, MissingSeedOrKindRejected) {
    EXPECT_THROW(parse_config("[protocol]\nkind = rabi\n"), ConfigError);
    EXPECT_THROW(parse_config("[protocol]\nseed = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[protocol]\nkind = nutation\nseed = 1\n"), ConfigError);
}

TEST(Config, NegativeT1IsAConfigError) {
    const auto dir = scratch("neg_t1");
    const auto path = dir / "bad.ini";
    std::ofstream(path) << "[protocol]\nkind = t1\nseed = 1\n[ensemble]\nt1 = -1e-3\n";
    std::string err;
    EXPECT_EQ(run_cli({"run", path.string()}, nullptr, &err), cli::config_error);
    EXPECT_NE(err.find("t1"), std::string::npos) << err;
}

TEST(Config, SerializationRoundTripsEveryTemplate) {
    for (const auto& info : protocol_registry()) {
        const auto c = template_config(info.id);
        const auto text = serialize_config(c);
        const auto back = parse_config(text);
        EXPECT_EQ(serialize_config(back), text) << info.name;
        EXPECT_EQ(config_hash(back), config_hash(c));
    }
}

TEST(Config, HashSeparatesConfigs) {
    auto a = template_config(ProtocolId::Rabi);
    auto b = a;
    b.protocol.seed = 2;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_NE(cli::artifact_dir(a), cli::artifact_dir(b));
    EXPECT_EQ(config_hash(a), config_hash(template_config(ProtocolId::Rabi)));
}

TEST(Protocols, RegistryListsExactlySeven) {
    const auto& r = protocol_registry();
    ASSERT_EQ(r.size(), 7u);
    std::set<std::string> names;
    for (const auto& p : r) names.insert(p.name);
    EXPECT_EQ(names, (std::set<std::string>{"rabi", "ramsey", "t1", "echo-rephase", "echo-t2", "echo-revivals",
                                            "repolarization"}));
    EXPECT_EQ(protocol_info(ProtocolId::EchoRevivals).default_strategy, ReferenceStrategy::PartialDepolarized);
    EXPECT_EQ(protocol_info(ProtocolId::Rabi).default_strategy, ReferenceStrategy::MaxPolarized);
    std::string out;
    EXPECT_EQ(run_cli({"protocols"}, &out), cli::ok);
    for (const auto& n : names) EXPECT_NE(out.find(n), std::string::npos);
}

TEST(Protocols, TemplateParsesBack) {
    std::string out;
    ASSERT_EQ(run_cli({"protocols", "--template", "echo-revivals"}, &out), cli::ok);
    const auto c = parse_config(out);
    EXPECT_EQ(c.protocol.kind, ProtocolId::EchoRevivals);
    EXPECT_EQ(c.protocol.strategy, ReferenceStrategy::PartialDepolarized);
    EXPECT_EQ(run_cli({"protocols", "--template", "nutation"}), cli::usage_error);
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(run_cli({}), cli::usage_error);
    EXPECT_EQ(run_cli({"frobnicate"}), cli::usage_error);
    EXPECT_EQ(run_cli({"run"}), cli::usage_error);
    EXPECT_EQ(run_cli({"run", "/nonexistent/odmr.ini"}), cli::config_error);
}

TEST(Cli, OverridePrecedence) {
    auto c = template_config(ProtocolId::Rabi);
    c.output.directory = "from-config";
    ::unsetenv(cli::output_dir_env);
    EXPECT_EQ(cli::apply_overrides(c, {}).output.directory, "from-config");
    ::setenv(cli::output_dir_env, "from-env", 1);
    EXPECT_EQ(cli::apply_overrides(c, {}).output.directory, "from-env");
    EXPECT_EQ(cli::apply_overrides(c, {std::nullopt, "from-flag"}).output.directory, "from-flag");
    ::unsetenv(cli::output_dir_env);
    EXPECT_EQ(cli::apply_overrides(c, {9u, std::nullopt}).protocol.seed, 9u);
}

TEST(Cli, RunWritesArtifactsDeterministically) {
    const auto dir = scratch("run");
    const auto cfg = small_rabi(dir / "out");
    const auto path = write_config(dir, cfg);
    std::string out;
    const int code = run_cli({"run", path.string()}, &out);
    EXPECT_TRUE(code == cli::ok || code == cli::fit_not_converged) << code;
    const auto art = cli::artifact_dir(cfg);
    ASSERT_TRUE(fs::exists(art / "sweep.csv"));
    ASSERT_TRUE(fs::exists(art / "fit_report.txt"));
    ASSERT_TRUE(fs::exists(art / "config.ini"));
    EXPECT_NE(out.find(art.string()), std::string::npos);
    const auto first = slurp(art / "sweep.csv");
    EXPECT_NE(first.find(config_hash(cfg)), std::string::npos);
    EXPECT_EQ(parse_config(slurp(art / "config.ini")).protocol.seed, cfg.protocol.seed);

    fs::remove_all(art);
    run_cli({"run", path.string()});
    EXPECT_EQ(slurp(art / "sweep.csv"), first);
    EXPECT_EQ(slurp(art / "fit_report.txt").find("config_hash: " + config_hash(cfg)) != std::string::npos, true);
}

TEST(Cli, SeedFlagChangesTheArtifact) {
    const auto dir = scratch("seed");
    const auto cfg = small_rabi(dir / "out");
    const auto path = write_config(dir, cfg);
    run_cli({"run", path.string()});
    run_cli({"run", path.string(), "--seed", "77"});
    auto other = cfg;
    other.protocol.seed = 77;
    ASSERT_TRUE(fs::exists(cli::artifact_dir(other) / "sweep.csv"));
    EXPECT_NE(slurp(cli::artifact_dir(cfg) / "sweep.csv"), slurp(cli::artifact_dir(other) / "sweep.csv"));
}

TEST(Csv, SweepRoundTrip) {
    SweepArtifact a;
    a.protocol = "ramsey";
    a.config_hash = "0123456789abcdef";
    a.result.protocol_kind = ProtocolKind::Ramsey;
    a.result.swept_symbol = "t_free";
    a.result.strategy = ReferenceStrategy::PartialDepolarized;
    a.result.n_averages = 7;
    a.result.seed = 42;
    for (int i = 0; i < 5; ++i)
        a.result.rows.push_back({i * 1e-7, 1.0 + i * 1e-3, 0.98 - i * 1e-3 / 3.0, -2.0 + i / 7.0});
    FitReport f;
    f.model = ModelId::Ramsey;
    f.names = {"A", "f_ramsey"};
    f.values = {1.0 / 3.0, 2.38e6};
    f.uncertainties = {1e-3, 1e3};
    f.initial_guess = {0.3, 2.4e6};
    f.converged = true;
    f.message = "converged";
    a.fit = f;
    const auto text = format_sweep_csv(a);
    const auto b = parse_sweep_csv(text);
    EXPECT_EQ(format_sweep_csv(b), text);
    ASSERT_EQ(b.result.rows.size(), 5u);
    EXPECT_EQ(b.result.rows[3].i_sig, a.result.rows[3].i_sig);
    EXPECT_EQ(b.result.strategy, ReferenceStrategy::PartialDepolarized);
    ASSERT_TRUE(b.fit);
    EXPECT_EQ(b.fit->values, f.values);
    EXPECT_EQ(b.config_hash, a.config_hash);
}

TEST(Csv, WaveformAndTraceRoundTrip) {
    AveragedWaveform w;
    w.t_rel_trigger = -2e-6;
    w.dt = 2e-8;
    w.n_averaged = 16;
    for (int i = 0; i < 20; ++i) w.samples.push_back(0.1 * i + 1.0 / 3.0);
    const auto wt = format_waveform_csv(w);
    const auto w2 = parse_waveform_csv(wt);
    EXPECT_EQ(w2.samples, w.samples);
    EXPECT_EQ(w2.n_averaged, 16);
    EXPECT_EQ(format_waveform_csv(w2), wt);

    PLTrace t;
    t.t0 = 0.0;
    t.dt = 1e-6;
    for (int i = 0; i < 20; ++i) t.samples.push_back(std::exp(-i / 7.0));
    const auto tt = format_trace_csv(t);
    EXPECT_EQ(parse_trace_csv(tt).samples, t.samples);
    EXPECT_EQ(format_trace_csv(parse_trace_csv(tt)), tt);
}

TEST(Csv, MalformedInputRejected) {
    EXPECT_THROW(parse_sweep_csv("wrong,header\n1,2\n"), ConfigError);
    EXPECT_THROW(parse_trace_csv(std::string(trace_header) + "\n1,2,3\n"), ConfigError);
    EXPECT_THROW(parse_waveform_csv(std::string(waveform_header) + "\n1,abc\n"), ConfigError);
}

TEST(DemoDrift, NoDriftGivesComparableStrategies) {
    const auto dir = scratch("demo");
    auto c = template_config(ProtocolId::Rabi);
    c.protocol.sweep_points = 100;
    c.protocol.n_averages = 8;
    c.protocol.threads = 1;
    c.drift.step_sigma = 0.0;
    c.scope.sample_rate_partial = c.scope.sample_rate_maxpol;
    c.output.directory = (dir / "out").string();
    std::ostringstream out;
    cli::DriftSummary s;
    ASSERT_EQ(cli::cmd_demo_drift(c, out, &s), cli::ok);
    EXPECT_NEAR(s.std_serial / s.std_same_waveform, 1.0, 0.3);
    EXPECT_NEAR(s.std_partial / s.std_same_waveform, 1.0, 0.3);
    EXPECT_TRUE(fs::exists(fs::path(c.output.directory) / ("demo-drift-" + config_hash(c)) / "drift_summary.txt"));

    c.protocol.kind = ProtocolId::Repolarization;
    EXPECT_THROW(cli::cmd_demo_drift(c, out), ConfigError);
}

TEST(Config, HashIgnoresOutputLocation) {
    auto a = template_config(ProtocolId::Rabi);
    auto b = a;
    b.output.directory = "elsewhere";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.output.emit_waveforms = !a.output.emit_waveforms;
    EXPECT_NE(config_hash(a), config_hash(b));
}
