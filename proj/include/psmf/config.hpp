#pragma once

#include "psmf/estimation.hpp"
#include "psmf/evaluation.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

namespace psmf {

using json = nlohmann::json;

enum class Command { synth, fit, impute, forecast, converge, gp_features };

inline const char* to_string(Command c) {
  switch (c) {
    case Command::synth: return "synth";
    case Command::fit: return "fit";
    case Command::impute: return "impute";
    case Command::forecast: return "forecast";
    case Command::converge: return "converge";
    case Command::gp_features: return "gp-features";
  }
  return "unknown";
}

struct MissingSpec {
  Index segment_len = 20;
  double target_fraction = 0.3;
};

/// Uniform draw range for initial theta when the config gives no explicit values.
struct ThetaInit {
  double low = 0.0;
  double high = 1.0;
};

/// Noise settings as written in the config; matrices are materialized once dimensions are known.
struct NoiseSpec {
  std::optional<Matrix> Q;
  double q = 0.0;
  std::optional<Matrix> R;
  double r = 1.0;
  double p0 = 1.0;
  double v0 = 1.0;
  std::optional<Vector> mu0;
  double mu0_value = 0.0;
  std::optional<Matrix> C0;  // otherwise N(0, c0_scale^2) from the filter-init stream
  double c0_scale = 1.0;
};

struct ModelSpec {
  ModelKind kind = ModelKind::random_walk;
  Index dim = 1;
  std::optional<Vector> theta;
  std::optional<ThetaInit> theta_init;
  std::optional<Matrix> A;
  GPMaternParams gp;
};

struct SyntheticConfig {
  Index d = 20;
  Index n = 500;
  Index n_forecast = 0;
  ModelSpec model;
  NoiseKind noise = NoiseKind::gaussian;
  double dof = 3.0;
  double noise_scale = 0.1;
  double process_noise = 0.0;
  double mu0 = 0.0;
  double p0 = 0.0;
};

struct RunConfig {
  Command command = Command::fit;
  std::optional<std::filesystem::path> data_path;
  std::optional<SyntheticConfig> synthetic;
  ModelSpec model;
  NoiseSpec noise;
  OptimizerConfig optimizer;
  bool robust = false;
  std::optional<double> lambda0;
  std::optional<MissingSpec> missing;
  std::optional<Index> horizon;
  ConvergenceSetup convergence;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
};

namespace detail {

class FieldReader {
 public:
  FieldReader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return node_.contains(key) && !node_.at(key).is_null(); }
  const json& raw(const std::string& key) const { return node_.at(key); }

  FieldReader object(const std::string& key) const {
    if (!has(key)) throw ConfigError(field(key), "missing required object");
    return FieldReader(node_.at(key), field(key));
  }

  double number(const std::string& key) const {
    require_present(key);
    const json& v = node_.at(key);
    if (!v.is_number()) throw ConfigError(field(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(field(key), "must be finite");
    return x;
  }
  double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }

  double positive(const std::string& key, double fallback) const {
    const double x = number(key, fallback);
    if (!(x > 0.0)) throw ConfigError(field(key), "must be positive");
    return x;
  }
  double non_negative(const std::string& key, double fallback) const {
    const double x = number(key, fallback);
    if (!(x >= 0.0)) throw ConfigError(field(key), "must be non-negative");
    return x;
  }

  long long integer(const std::string& key) const {
    require_present(key);
    const json& v = node_.at(key);
    if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
    return v.get<long long>();
  }
  long long integer(const std::string& key, long long fallback) const { return has(key) ? integer(key) : fallback; }
  Index count(const std::string& key, Index fallback, Index min = 1) const {
    const long long v = integer(key, fallback);
    if (v < min) throw ConfigError(field(key), "must be at least " + std::to_string(min));
    return static_cast<Index>(v);
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    if (!node_.at(key).is_boolean()) throw ConfigError(field(key), "expected true or false");
    return node_.at(key).get<bool>();
  }

  std::string string(const std::string& key) const {
    require_present(key);
    if (!node_.at(key).is_string()) throw ConfigError(field(key), "expected a string");
    return node_.at(key).get<std::string>();
  }

  Vector vector(const std::string& key) const {
    require_present(key);
    const json& v = node_.at(key);
    if (!v.is_array() || v.empty()) throw ConfigError(field(key), "expected a non-empty array of numbers");
    Vector out(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError(field(key), "element " + std::to_string(i) + " is not a number");
      out(static_cast<Index>(i)) = v[i].get<double>();
      if (!std::isfinite(out(static_cast<Index>(i)))) throw ConfigError(field(key), "elements must be finite");
    }
    return out;
  }

  /// Row-major nested array.
  Matrix matrix(const std::string& key) const {
    require_present(key);
    const json& v = node_.at(key);
    if (!v.is_array() || v.empty() || !v[0].is_array() || v[0].empty())
      throw ConfigError(field(key), "expected a non-empty array of rows");
    const std::size_t cols = v[0].size();
    Matrix out(static_cast<Index>(v.size()), static_cast<Index>(cols));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_array() || v[i].size() != cols) throw ConfigError(field(key), "rows must have equal length");
      for (std::size_t j = 0; j < cols; ++j) {
        if (!v[i][j].is_number()) throw ConfigError(field(key), "entries must be numbers");
        out(static_cast<Index>(i), static_cast<Index>(j)) = v[i][j].get<double>();
      }
    }
    if (!out.allFinite()) throw ConfigError(field(key), "entries must be finite");
    return out;
  }

  void reject_unknown(std::initializer_list<const char*> known) const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      bool ok = false;
      for (const char* k : known) ok = ok || it.key() == k;
      if (!ok) throw ConfigError(field(it.key()), "unknown field");
    }
  }

 private:
  void require_present(const std::string& key) const {
    if (!has(key)) throw ConfigError(field(key), "missing required field");
  }

  const json& node_;
  std::string path_;
};

inline ModelKind parse_model_kind(const FieldReader& in) {
  const std::string s = in.string("kind");
  if (s == "random_walk") return ModelKind::random_walk;
  if (s == "linear") return ModelKind::linear;
  if (s == "cosine_periodic") return ModelKind::cosine_periodic;
  if (s == "sin_cos_periodic") return ModelKind::sin_cos_periodic;
  if (s == "gp_matern32") return ModelKind::gp_matern32;
  throw ConfigError(in.field("kind"), "unknown model kind '" + s + "'");
}

inline ModelSpec parse_model(const FieldReader& in) {
  in.reject_unknown({"kind", "dim", "theta", "theta_init", "A", "sigma2", "ell", "gamma", "r"});
  ModelSpec m;
  m.kind = parse_model_kind(in);
  switch (m.kind) {
    case ModelKind::random_walk: m.dim = in.count("dim", 1); break;
    case ModelKind::linear:
      m.A = in.matrix("A");
      if (m.A->rows() != m.A->cols()) throw ConfigError(in.field("A"), "must be square");
      m.dim = m.A->rows();
      break;
    case ModelKind::cosine_periodic:
    case ModelKind::sin_cos_periodic:
      if (in.has("theta")) {
        m.theta = in.vector("theta");
        if ((m.theta->array() < 0.0).any()) throw ConfigError(in.field("theta"), "entries must be non-negative");
      } else if (in.has("theta_init")) {
        const FieldReader ti = in.object("theta_init");
        ti.reject_unknown({"low", "high"});
        m.theta_init = ThetaInit{ti.non_negative("low", 0.0), ti.non_negative("high", 1.0)};
        if (!(m.theta_init->high >= m.theta_init->low))
          throw ConfigError(ti.field("high"), "must not be below low");
      } else {
        throw ConfigError(in.field("theta"), "periodic models need theta or theta_init");
      }
      if (m.kind == ModelKind::cosine_periodic) {
        m.dim = m.theta ? m.theta->size() : in.count("dim", 1);
        if (m.theta && in.has("dim") && in.count("dim", 1) != m.dim)
          throw ConfigError(in.field("dim"), "must equal the length of theta");
      } else {
        m.dim = in.count("dim", 1);
        if (m.theta && m.theta->size() != 6) throw ConfigError(in.field("theta"), "must have exactly 6 entries");
      }
      break;
    case ModelKind::gp_matern32:
      m.gp.sigma2 = in.positive("sigma2", 1.0);
      m.gp.ell = in.positive("ell", 1.0);
      m.gp.gamma = in.positive("gamma", 1.0);
      m.gp.r = in.count("r", 1);
      m.dim = 2 * m.gp.r;
      break;
    case ModelKind::custom: break;
  }
  return m;
}

inline NoiseSpec parse_noise(const FieldReader& in) {
  in.reject_unknown({"Q", "q", "R", "r", "p0", "v0", "mu0", "C0", "c0_scale"});
  NoiseSpec n;
  if (in.has("Q")) n.Q = in.matrix("Q");
  n.q = in.non_negative("q", 0.0);
  if (in.has("R")) n.R = in.matrix("R");
  n.r = in.positive("r", 1.0);
  n.p0 = in.non_negative("p0", 1.0);
  n.v0 = in.non_negative("v0", 1.0);
  if (in.has("mu0")) {
    if (in.raw("mu0").is_array()) n.mu0 = in.vector("mu0");
    else n.mu0_value = in.number("mu0");
  }
  if (in.has("C0")) n.C0 = in.matrix("C0");
  n.c0_scale = in.non_negative("c0_scale", 1.0);
  return n;
}

inline OptimizerConfig parse_optimizer(const FieldReader& in) {
  in.reject_unknown({"gamma", "beta1", "beta2", "epsilon", "mode", "outer_iterations", "reinit_noise_each_outer"});
  OptimizerConfig o;
  o.gamma = in.non_negative("gamma", o.gamma);
  o.beta1 = in.non_negative("beta1", o.beta1);
  if (o.beta1 >= 1.0) throw ConfigError(in.field("beta1"), "must be below 1");
  o.beta2 = in.non_negative("beta2", o.beta2);
  if (o.beta2 >= 1.0) throw ConfigError(in.field("beta2"), "must be below 1");
  o.epsilon = in.positive("epsilon", o.epsilon);
  if (in.has("mode")) {
    const std::string mode = in.string("mode");
    if (mode == "iterative") o.mode = FitMode::iterative;
    else if (mode == "recursive") o.mode = FitMode::recursive;
    else throw ConfigError(in.field("mode"), "expected 'iterative' or 'recursive'");
  }
  o.outer_iterations = static_cast<int>(in.count("outer_iterations", o.outer_iterations));
  o.reinit_noise_each_outer = in.boolean("reinit_noise_each_outer", o.reinit_noise_each_outer);
  return o;
}

inline SyntheticConfig parse_synthetic(const FieldReader& in) {
  in.reject_unknown({"d", "n", "n_forecast", "model", "noise", "dof", "noise_scale", "process_noise", "mu0", "p0"});
  SyntheticConfig s;
  s.d = in.count("d", s.d);
  s.n = in.count("n", s.n);
  s.n_forecast = in.count("n_forecast", 0, 0);
  s.model = parse_model(in.object("model"));
  if (!s.model.theta && s.model.theta_init)
    throw ConfigError(in.field("model.theta"), "the true synthetic model needs explicit theta");
  if (in.has("noise")) {
    const std::string kind = in.string("noise");
    if (kind == "gaussian") s.noise = NoiseKind::gaussian;
    else if (kind == "student_t") s.noise = NoiseKind::student_t;
    else throw ConfigError(in.field("noise"), "expected 'gaussian' or 'student_t'");
  }
  s.dof = in.positive("dof", s.dof);
  s.noise_scale = in.non_negative("noise_scale", s.noise_scale);
  s.process_noise = in.non_negative("process_noise", s.process_noise);
  s.mu0 = in.number("mu0", s.mu0);
  s.p0 = in.non_negative("p0", s.p0);
  return s;
}

inline Command parse_command(const FieldReader& in) {
  const std::string c = in.string("command");
  if (c == "synth") return Command::synth;
  if (c == "fit") return Command::fit;
  if (c == "impute") return Command::impute;
  if (c == "forecast") return Command::forecast;
  if (c == "converge") return Command::converge;
  if (c == "gp-features") return Command::gp_features;
  throw ConfigError(in.field("command"), "unknown command '" + c + "'");
}

}  // namespace detail

inline RunConfig parse_config(const json& doc) {
  detail::FieldReader in(doc, "");
  in.reject_unknown({"command", "data_path", "synthetic", "model", "noise", "optimizer", "robust", "lambda0",
                     "missing", "horizon", "convergence", "seed", "output_dir"});
  RunConfig cfg;
  cfg.command = detail::parse_command(in);
  if (in.has("seed")) {
    const long long s = in.integer("seed");
    if (s < 0) throw ConfigError("seed", "must be non-negative");
    cfg.seed = static_cast<std::uint64_t>(s);
  }
  if (in.has("output_dir")) cfg.output_dir = in.string("output_dir");

  if (cfg.command == Command::converge) {
    if (in.has("convergence")) {
      const auto c = in.object("convergence");
      c.reject_unknown({"d", "n", "q", "obs_noise", "mu0", "p0", "v0", "passes"});
      auto& s = cfg.convergence;
      s.d = c.count("d", s.d);
      s.n = c.count("n", s.n);
      s.q = c.positive("q", s.q);
      s.obs_noise = c.positive("obs_noise", s.obs_noise);
      s.mu0 = c.number("mu0", s.mu0);
      s.p0 = c.non_negative("p0", s.p0);
      s.v0 = c.non_negative("v0", s.v0);
      s.passes = static_cast<int>(c.count("passes", s.passes));
    }
    return cfg;
  }

  const bool has_data = in.has("data_path");
  const bool has_synth = in.has("synthetic");
  if (has_data == has_synth) throw ConfigError("data_path", "exactly one of data_path and synthetic must be given");
  if (has_data) cfg.data_path = in.string("data_path");
  if (has_synth) cfg.synthetic = detail::parse_synthetic(in.object("synthetic"));
  if (cfg.command == Command::synth) {
    if (!has_synth) throw ConfigError("synthetic", "synth command needs a synthetic section");
  } else {
    cfg.model = detail::parse_model(in.object("model"));
  }
  if (in.has("noise")) cfg.noise = detail::parse_noise(in.object("noise"));
  if (in.has("optimizer")) cfg.optimizer = detail::parse_optimizer(in.object("optimizer"));
  cfg.robust = in.boolean("robust", false);
  if (in.has("lambda0")) cfg.lambda0 = in.positive("lambda0", 1.0);
  if (cfg.robust && !cfg.lambda0) throw ConfigError("lambda0", "required when robust is true");
  if (in.has("missing")) {
    const auto m = in.object("missing");
    m.reject_unknown({"segment_len", "target_fraction"});
    MissingSpec ms;
    ms.segment_len = m.count("segment_len", ms.segment_len);
    ms.target_fraction = m.number("target_fraction", ms.target_fraction);
    if (!(ms.target_fraction > 0.0 && ms.target_fraction < 1.0))
      throw ConfigError(m.field("target_fraction"), "must lie strictly between 0 and 1");
    cfg.missing = ms;
  }
  if (in.has("horizon")) cfg.horizon = in.count("horizon", 1);
  if (cfg.command == Command::gp_features && cfg.model.kind != ModelKind::gp_matern32)
    throw ConfigError("model.kind", "gp-features requires the gp_matern32 model");
  if (cfg.command == Command::forecast && !cfg.horizon && !(cfg.synthetic && cfg.synthetic->n_forecast > 0))
    throw ConfigError("horizon", "forecast needs a horizon or synthetic n_forecast");
  return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(doc);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<document>", "cannot open config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

}  // namespace psmf
