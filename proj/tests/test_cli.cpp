#include "psmf/run.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace psmf {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "psmf_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json summary_of(const fs::path& dir) { return json::parse(slurp(dir / "summary.json")); }

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::string config_error_field(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<accepted>";
}

const char* kSmallImpute = R"({
  "command": "impute",
  "seed": 5,
  "synthetic": {"d": 6, "n": 150, "model": {"kind": "random_walk", "dim": 2},
                "noise_scale": 0.3, "process_noise": 0.05, "p0": 1.0},
  "missing": {"segment_len": 10, "target_fraction": 0.3},
  "model": {"kind": "random_walk", "dim": 2},
  "noise": {"q": 0.05, "r": 1.0, "p0": 1.0, "v0": 1.0},
  "optimizer": {"gamma": 0.0, "outer_iterations": 2}
})";

// --- configuration ----------------------------------------------------------

TEST(Config, ErrorsNameTheOffendingField) {
  const std::string synth = R"("synthetic": {"d": 3, "n": 10, "model": {"kind": "random_walk"}})";
  const std::string model = R"("model": {"kind": "random_walk"})";
  EXPECT_EQ(config_error_field("{"), "<document>");
  EXPECT_EQ(config_error_field("[1, 2]"), "<root>");
  EXPECT_EQ(config_error_field("{}"), "command");
  EXPECT_EQ(config_error_field(R"({"command": "dance"})"), "command");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "colour": 1})"), "colour");
  EXPECT_EQ(config_error_field(R"({"command": "fit", )" + model + "}"), "data_path");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", )" + synth + ", " + model + "}"),
            "data_path");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "robust": true, )" + model + "}"),
            "lambda0");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "model": {"kind": "spline"}})"),
            "model.kind");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "model": {"kind": "cosine_periodic"}})"),
            "model.theta");
  EXPECT_EQ(config_error_field(
                R"({"command": "fit", "data_path": "x.csv", "model": {"kind": "sin_cos_periodic", "theta": [1, 2]}})"),
            "model.theta");
  EXPECT_EQ(config_error_field(
                R"({"command": "synth", "synthetic": {"model": {"kind": "cosine_periodic", "theta": [-1]}}})"),
            "synthetic.model.theta");
  EXPECT_EQ(config_error_field(R"({"command": "synth", "synthetic": {"d": 0, "model": {"kind": "random_walk"}}})"),
            "synthetic.d");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "noise": {"p0": -1}, )" + model + "}"),
            "noise.p0");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "noise": {"R": [[1, 2], [3]]}, )" + model +
                               "}"),
            "noise.R");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "optimizer": {"mode": "batch"}, )" +
                               model + "}"),
            "optimizer.mode");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "optimizer": {"beta1": 1.0}, )" + model +
                               "}"),
            "optimizer.beta1");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", "optimizer": {"outer_iterations": 1.5}, )" +
                               model + "}"),
            "optimizer.outer_iterations");
  EXPECT_EQ(config_error_field(R"({"command": "impute", "data_path": "x.csv", "missing": {"target_fraction": 1.5}, )" +
                               model + "}"),
            "missing.target_fraction");
  EXPECT_EQ(config_error_field(R"({"command": "gp-features", "data_path": "x.csv", )" + model + "}"), "model.kind");
  EXPECT_EQ(config_error_field(R"({"command": "forecast", "data_path": "x.csv", )" + model + "}"), "horizon");
  EXPECT_EQ(config_error_field(R"({"command": "converge", "seed": -3})"), "seed");
  EXPECT_EQ(config_error_field(R"({"command": "converge", "convergence": {"passes": 0}})"), "convergence.passes");
  EXPECT_EQ(config_error_field(R"({"command": "fit", "data_path": "x.csv", )" + model + "}"), "<accepted>");
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(PSMF_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
  }
}

TEST(Config, FieldsAreRead) {
  const RunConfig cfg = parse_config_text(R"({
    "command": "forecast", "seed": 12, "output_dir": "elsewhere", "robust": true, "lambda0": 1.8,
    "data_path": "y.csv", "horizon": 40,
    "model": {"kind": "sin_cos_periodic", "dim": 3, "theta_init": {"low": 0.1, "high": 0.2}},
    "noise": {"q": 0.5, "r": 2, "p0": 0, "v0": 0.1, "mu0": [1, 2, 3]},
    "optimizer": {"gamma": 0.01, "mode": "recursive", "reinit_noise_each_outer": true}
  })");
  EXPECT_EQ(cfg.command, Command::forecast);
  EXPECT_EQ(cfg.seed, 12u);
  EXPECT_EQ(cfg.output_dir, "elsewhere");
  EXPECT_TRUE(cfg.robust);
  EXPECT_EQ(*cfg.lambda0, 1.8);
  EXPECT_EQ(*cfg.horizon, 40);
  EXPECT_EQ(cfg.model.kind, ModelKind::sin_cos_periodic);
  EXPECT_EQ(cfg.model.dim, 3);
  EXPECT_EQ(cfg.model.theta_init->high, 0.2);
  EXPECT_EQ(cfg.noise.q, 0.5);
  EXPECT_EQ(cfg.noise.mu0->size(), 3);
  EXPECT_EQ(cfg.optimizer.mode, FitMode::recursive);
  EXPECT_TRUE(cfg.optimizer.reinit_noise_each_outer);

  const SubspaceModel m = build_model(cfg.model, cfg.seed);
  ASSERT_EQ(m.theta().size(), 6);
  EXPECT_TRUE((m.theta().array() >= 0.1).all() && (m.theta().array() <= 0.2).all());
  EXPECT_EQ(build_model(cfg.model, cfg.seed).theta(), m.theta());
}

TEST(Config, BuildNoiseChecksShapes) {
  NoiseSpec spec;
  spec.R = Matrix::Identity(3, 3);
  const auto model = SubspaceModel::random_walk(2);
  try {
    build_noise(spec, model, 4, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "noise.R");
  }
  spec.R.reset();
  const NoiseConfig n = build_noise(spec, model, 4, 1);
  EXPECT_EQ(n.C0.rows(), 4);
  EXPECT_EQ(n.C0.cols(), 2);
  EXPECT_EQ(n.C0, build_noise(spec, model, 4, 1).C0);
  EXPECT_NE(n.C0, build_noise(spec, model, 4, 2).C0);

  // GP models default to the discretized process noise
  const auto gp = SubspaceModel::gp_matern32(GPMaternParams{0.1, 0.1, 0.001, 2});
  EXPECT_EQ(build_noise(NoiseSpec{}, gp, 3, 1).Q, *gp.process_noise());
}

// --- in-process experiments -------------------------------------------------

TEST(RunExperiment, SynthWritesBenchmarkShapes) {
  RunConfig cfg = load_config(fs::path(PSMF_CONFIG_DIR) / "synth_periodic.json");
  cfg.output_dir = scratch("synth");
  ASSERT_EQ(run_experiment(cfg), exit_ok);
  const DataMatrix train = load_matrix(cfg.output_dir / "train.csv");
  const DataMatrix test = load_matrix(cfg.output_dir / "test.csv");
  EXPECT_EQ(line_count(cfg.output_dir / "train.csv"), 500u);
  EXPECT_EQ(line_count(cfg.output_dir / "test.csv"), 250u);
  EXPECT_EQ(train.dims(), 20);
  EXPECT_EQ(test.dims(), 20);
  const json s = summary_of(cfg.output_dir);
  EXPECT_EQ(s["status"], "ok");
  EXPECT_EQ(s["train_shape"], json({500, 20}));
  EXPECT_EQ(s["test_shape"], json({250, 20}));
}

TEST(RunExperiment, ConvergeWritesOneRowPerStep) {
  RunConfig cfg = load_config(fs::path(PSMF_CONFIG_DIR) / "converge.json");
  cfg.output_dir = scratch("converge");
  ASSERT_EQ(run_experiment(cfg), exit_ok);
  EXPECT_EQ(line_count(cfg.output_dir / "wasserstein.csv"), 1001u);
  const json s = summary_of(cfg.output_dir);
  EXPECT_LT(s["final_dictionary_error"].get<double>(), s["initial_dictionary_error"].get<double>());
}

TEST(RunExperiment, ImputeIsDeterministic) {
  RunConfig cfg = parse_config_text(kSmallImpute);
  const fs::path a = scratch("impute_a"), b = scratch("impute_b");
  cfg.output_dir = a;
  ASSERT_EQ(run_experiment(cfg), exit_ok);
  cfg.output_dir = b;
  ASSERT_EQ(run_experiment(cfg), exit_ok);
  for (const char* f : {"imputed.csv", "trace.csv", "fit_report.csv", "reconstruction.csv"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  json sa = summary_of(a), sb = summary_of(b);
  ASSERT_TRUE(sa.contains("runtime_seconds"));
  sa.erase("runtime_seconds");
  sb.erase("runtime_seconds");
  EXPECT_EQ(sa.dump(), sb.dump());
  EXPECT_EQ(sa["status"], "ok");
  EXPECT_EQ(sa["seed"], 5);
  EXPECT_TRUE(sa.contains("rmse"));
  EXPECT_TRUE(sa.contains("coverage"));
  EXPECT_EQ(sa["theta"], json::array());

  // no missing cells remain in the imputed output
  const DataMatrix imputed = load_matrix(a / "imputed.csv");
  EXPECT_EQ(imputed.observed_count(), 6 * 150);
  const DataMatrix trace = load_matrix(a / "trace.csv");
  EXPECT_EQ(trace.steps(), 150);
  EXPECT_EQ(trace.dims(), 5);
}

TEST(RunExperiment, FitFromCsvWithRobustTrace) {
  const fs::path dir = scratch("fit_csv");
  {
    std::ofstream out(dir / "data.csv");
    out << "a,b,c\n";
    for (int t = 0; t < 60; ++t) out << std::sin(0.1 * t) << "," << (t % 7 == 0 ? "" : "0.5") << "," << 0.01 * t << "\n";
  }
  RunConfig cfg = parse_config_text(R"({
    "command": "fit", "robust": true, "lambda0": 2.0, "data_path": "placeholder.csv",
    "model": {"kind": "cosine_periodic", "theta": [0.01, 0.02]},
    "noise": {"r": 0.5},
    "optimizer": {"outer_iterations": 3}
  })");
  cfg.data_path = dir / "data.csv";
  cfg.output_dir = dir / "out";
  ASSERT_EQ(run_experiment(cfg), exit_ok);
  EXPECT_TRUE(slurp(cfg.output_dir / "trace.csv").starts_with(
      "k,eta,innovation_norm,nll_increment,observed_count,omega,phi,lambda\n"));
  EXPECT_EQ(line_count(cfg.output_dir / "fit_report.csv"), 4u);
  const json s = summary_of(cfg.output_dir);
  EXPECT_EQ(s["iterations"], 3);
  EXPECT_EQ(s["theta"].size(), 2u);
  for (const char* key : {"rmse", "coverage", "runtime_seconds", "total_nll", "frobenius_error"})
    EXPECT_TRUE(s.contains(key)) << key;
}

TEST(RunExperiment, ForecastAndGpFeatures) {
  RunConfig cfg = parse_config_text(R"({
    "command": "forecast", "seed": 2,
    "synthetic": {"d": 5, "n": 80, "n_forecast": 20, "model": {"kind": "cosine_periodic", "theta": [0.01, 0.02]}},
    "model": {"kind": "cosine_periodic", "theta_init": {"low": 0.0, "high": 0.05}, "dim": 2},
    "noise": {"r": 0.1, "p0": 0.0, "v0": 0.1},
    "optimizer": {"outer_iterations": 2}
  })");
  cfg.output_dir = scratch("forecast");
  ASSERT_EQ(run_experiment(cfg), exit_ok);
  EXPECT_EQ(line_count(cfg.output_dir / "forecast.csv"), 20u);
  EXPECT_TRUE(summary_of(cfg.output_dir).contains("rmse"));

  RunConfig gp = parse_config_text(R"({
    "command": "gp-features",
    "synthetic": {"d": 4, "n": 50, "model": {"kind": "random_walk", "dim": 3}},
    "model": {"kind": "gp_matern32", "sigma2": 0.1, "ell": 0.1, "gamma": 0.001, "r": 3},
    "noise": {"r": 0.1}
  })");
  gp.output_dir = scratch("gp");
  ASSERT_EQ(run_experiment(gp), exit_ok);
  const DataMatrix feats = load_matrix(gp.output_dir / "features.csv");
  EXPECT_EQ(feats.dims(), 3);
  EXPECT_EQ(feats.steps(), 50);
}

TEST(RunExperiment, ModuleErrorsGoToSummary) {
  RunConfig cfg = parse_config_text(R"({"command": "fit", "data_path": "/nonexistent/y.csv",
                                        "model": {"kind": "random_walk"}})");
  cfg.output_dir = scratch("missing_data");
  EXPECT_EQ(run_experiment(cfg), exit_failure);
  json s = summary_of(cfg.output_dir);
  EXPECT_EQ(s["status"], "error");
  EXPECT_EQ(s["error"]["kind"], "contract");

  const fs::path dir = scratch("ragged");
  {
    std::ofstream out(dir / "bad.csv");
    out << "1,2\n3,4\n5\n";
  }
  cfg.data_path = dir / "bad.csv";
  cfg.output_dir = dir / "out";
  EXPECT_EQ(run_experiment(cfg), exit_failure);
  s = summary_of(cfg.output_dir);
  EXPECT_EQ(s["error"]["kind"], "parse");
  EXPECT_EQ(s["error"]["line"], 3);

  cfg.data_path.reset();
  cfg.synthetic = parse_config_text(kSmallImpute).synthetic;
  cfg.noise.R = Matrix::Identity(2, 2);
  cfg.output_dir = dir / "shape";
  EXPECT_EQ(run_experiment(cfg), exit_config);
  s = summary_of(cfg.output_dir);
  EXPECT_EQ(s["error"]["field"], "noise.R");
}

// --- the binary -------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PSMF_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Binary, RunsConfigWithOverrides) {
  const fs::path dir = scratch("bin_run");
  {
    std::ofstream out(dir / "cfg.json");
    out << kSmallImpute;
  }
  ASSERT_EQ(run_cli("--config " + (dir / "cfg.json").string() + " --seed 9 --output " + (dir / "out").string()), 0);
  const json s = summary_of(dir / "out");
  EXPECT_EQ(s["seed"], 9);
  EXPECT_EQ(s["status"], "ok");
}

TEST(Binary, SweepWritesOneDirectoryPerSeed) {
  const fs::path dir = scratch("bin_sweep");
  {
    std::ofstream out(dir / "cfg.json");
    out << kSmallImpute;
  }
  ASSERT_EQ(run_cli("--config " + (dir / "cfg.json").string() + " --output " + (dir / "out").string() + " --sweep 3"),
            0);
  for (int seed : {5, 6, 7}) {
    const fs::path sub = dir / "out" / ("seed_" + std::to_string(seed));
    ASSERT_TRUE(fs::exists(sub / "summary.json")) << sub;
    EXPECT_EQ(summary_of(sub)["seed"], seed);
  }
  // a sweep member matches the equivalent single run
  ASSERT_EQ(run_cli("--config " + (dir / "cfg.json").string() + " --seed 6 --output " + (dir / "single").string()), 0);
  EXPECT_EQ(slurp(dir / "single" / "imputed.csv"), slurp(dir / "out" / "seed_6" / "imputed.csv"));
}

TEST(Binary, BadConfigExitsWithFieldDiagnostic) {
  const fs::path dir = scratch("bin_bad");
  {
    std::ofstream out(dir / "cfg.json");
    out << R"({"command": "fit", "data_path": "x.csv", "model": {"kind": "random_walk", "dim": 0}})";
  }
  EXPECT_EQ(run_cli("--config " + (dir / "cfg.json").string() + " --output " + (dir / "out").string()), 2);
  const json s = summary_of(dir / "out");
  EXPECT_EQ(s["status"], "error");
  EXPECT_EQ(s["error"]["field"], "model.dim");
  EXPECT_NE(run_cli("--output " + (dir / "x").string()), 0);
  EXPECT_EQ(run_cli("--config " + (dir / "absent.json").string() + " --output " + (dir / "out2").string()), 2);
}

}  // namespace
}  // namespace psmf
