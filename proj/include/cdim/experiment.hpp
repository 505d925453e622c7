#pragma once

// Experiment harness: JSON configs, task construction, per-cell solves and
// result rows. Shared by the command-line tool and the test suite.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cdim/calibration.hpp"
#include "cdim/constraint.hpp"
#include "cdim/measurement.hpp"
#include "cdim/model_io.hpp"
#include "cdim/oracle.hpp"
#include "cdim/schedule.hpp"
#include "cdim/solver.hpp"

namespace cdim {

struct ConfigError : Error {
  using Error::Error;
};

// ---- config ---------------------------------------------------------------------

struct PriorSpec {
  std::string kind = "random_gmm";  // random_gmm | gmm | file
  std::size_t n = 16, components = 3;
  std::uint64_t seed = 31;
  double spread = 1.0, var_lo = 0.05, var_hi = 0.3;
  GmmPrior inline_gmm;
  std::string path;
};

struct TaskSpec {
  std::string op = "half_mask";  // identity | half_mask | mask | random_mask | box_mask | downsample | blur
  std::vector<std::size_t> kept;
  double mask_prob = 0.5;
  std::size_t group_size = 1;
  std::uint64_t op_seed = 0;
  std::size_t start = 0, length = 1;
  std::size_t factor = 2;
  double blur_sigma = 1.0;
  Vec kernel;
};

struct OracleSpec {
  std::size_t samples = 500;
  int permutations = 200;
  std::uint64_t truth_seed = 4, observation_seed = 5, oracle_seed = 6, null_seed = 7;
  std::uint64_t solver_seed = 1000;
};

struct CalibrationSpec {
  std::size_t samples = 10;
  std::uint64_t set_seed = 70;
  std::uint64_t seed = 9;
};

struct ExperimentConfig {
  std::string name = "task";
  int T = 1000;
  double beta_min = 1e-4, beta_max = 0.02;
  PriorSpec prior;
  std::optional<PriorSpec> truth;  // where ground-truth signals come from; default: the prior
  TaskSpec task;
  NoiseModel noise = NoiseModel::gaussian(0.05);
  ConstraintSpec constraint;
  SolverConfig solver;
  std::string profile_path;
  CalibrationSpec calibration;
  std::vector<int> sweep_t_prime;
  long sweep_total_evals = 0;
  bool baseline = false;
  std::vector<std::uint64_t> seeds{0};
  OracleSpec oracle;
  std::string out_dir = "results";
  std::string format = "csv";
  bool trajectories = true;
  std::filesystem::path base_dir;  // relative paths resolve against the config file
};

namespace detail {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError((path_.empty() ? std::string("config") : path_) + ": " + what);
  }

  bool has(const char* key) {
    seen_.push_back(key);
    return j_.contains(key);
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      Reader(json::object(), sub(key)).fail("wrong type (got " + std::string(j_.at(key).type_name()) + ")");
    }
  }

  Reader child(const char* key) {
    seen_.push_back(key);
    return Reader(j_.at(key), sub(key));
  }

  std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  // Anything not looked at is a typo or an unsupported option.
  void done() const {
    for (const auto& [k, v] : j_.items())
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) fail("unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline PriorSpec read_prior(Reader r) {
  PriorSpec p;
  r.get("kind", p.kind);
  if (p.kind == "random_gmm") {
    r.get("n", p.n);
    r.get("components", p.components);
    r.get("seed", p.seed);
    r.get("spread", p.spread);
    r.get("var_lo", p.var_lo);
    r.get("var_hi", p.var_hi);
  } else if (p.kind == "gmm") {
    r.get("weights", p.inline_gmm.weights);
    r.get("means", p.inline_gmm.means);
    r.get("variances", p.inline_gmm.variances);
    try {
      p.inline_gmm.validate();
    } catch (const ParameterError& e) {
      r.fail(e.what());
    }
  } else if (p.kind == "file") {
    r.get("path", p.path);
    if (p.path.empty()) r.fail("'path' is required for kind=file");
  } else {
    r.fail("unknown prior kind '" + p.kind + "' (random_gmm, gmm, file)");
  }
  r.done();
  return p;
}

inline TaskSpec read_task(Reader r) {
  TaskSpec t;
  r.get("operator", t.op);
  r.get("kept", t.kept);
  r.get("mask_prob", t.mask_prob);
  r.get("group_size", t.group_size);
  r.get("seed", t.op_seed);
  r.get("start", t.start);
  r.get("length", t.length);
  r.get("factor", t.factor);
  r.get("sigma", t.blur_sigma);
  r.get("kernel", t.kernel);
  static const char* ops[] = {"identity", "half_mask", "mask", "random_mask", "box_mask", "downsample", "blur"};
  if (std::find_if(std::begin(ops), std::end(ops), [&](const char* o) { return t.op == o; }) == std::end(ops))
    r.fail("unknown operator '" + t.op + "'");
  r.done();
  return t;
}

inline NoiseModel read_noise(Reader r) {
  std::string kind = "gaussian";
  r.get("kind", kind);
  NoiseModel m;
  if (kind == "none") {
    m = NoiseModel::none();
  } else if (kind == "gaussian") {
    double s = 0.05;
    r.get("sigma", s);
    m = NoiseModel::gaussian(s);
  } else if (kind == "bimodal") {
    double a = 0.5, p = 0.5;
    r.get("amplitude", a);
    r.get("prob", p);
    m = NoiseModel::bimodal(a, p);
  } else if (kind == "poisson") {
    double s = 1.0;
    r.get("scale", s);
    m = NoiseModel::poisson(s);
  } else {
    r.fail("unknown noise kind '" + kind + "' (none, gaussian, bimodal, poisson)");
  }
  r.done();
  return m;
}

inline ConstraintSpec read_constraint(Reader r, const NoiseModel& noise) {
  ConstraintSpec c;
  std::string obj = "l2";
  r.get("objective", obj);
  try {
    c.objective = objective_from_string(obj);
  } catch (const ParameterError& e) {
    r.fail(e.what());
  }
  c.sigma2 = noise.kind == NoiseModel::Kind::gaussian ? noise.variance() : 1.0;
  c.poisson_scale = noise.kind == NoiseModel::Kind::poisson ? noise.scale : 1.0;
  r.get("sigma2", c.sigma2);
  r.get("paper_variant", c.paper_variant_kl);
  r.get("scale", c.poisson_scale);
  r.get("floor", c.pearson_floor);
  r.get("bin_width", c.bin_width);
  r.get("smoothing_eps", c.smoothing_eps);
  if (r.has("buckets")) {
    Reader b = r.child("buckets");
    std::string target = "gaussian";
    Vec edges, probs;
    double lo = -1.0, hi = 1.0;
    std::size_t count = 0;
    b.get("target", target);
    b.get("edges", edges);
    b.get("lo", lo);
    b.get("hi", hi);
    b.get("count", count);
    b.get("probs", probs);
    b.done();
    if (edges.empty()) {
      if (count < 2) b.fail("give either 'edges' or 'lo', 'hi' and 'count' >= 2");
      edges = uniform_edges(lo, hi, count);
    }
    try {
      if (target == "gaussian") {
        const double sigma = noise.kind == NoiseModel::Kind::gaussian ? noise.sigma : std::sqrt(c.sigma2);
        c.histogram = gaussian_buckets(sigma, edges);
      } else if (target == "bimodal") {
        if (noise.kind != NoiseModel::Kind::bimodal) b.fail("target=bimodal needs bimodal noise");
        c.histogram = bimodal_buckets(noise.amplitude, noise.prob, edges);
      } else if (target == "explicit") {
        c.histogram = BucketHistogram{edges, probs};
      } else {
        b.fail("unknown bucket target '" + target + "' (gaussian, bimodal, explicit)");
      }
    } catch (const ParameterError& e) {
      b.fail(e.what());
    }
  } else if (c.objective == Objective::kl_discrete) {
    r.fail("objective kl_discrete needs a 'buckets' section");
  }
  try {
    c.validate();
  } catch (const ParameterError& e) {
    r.fail(e.what());
  }
  r.done();
  return c;
}

inline void read_solver(Reader r, SolverConfig& s, std::string& profile) {
  std::string mode = to_string(s.step_mode);
  r.get("delta", s.delta);
  r.get("K", s.K);
  r.get("step_mode", mode);
  r.get("eta_scale", s.eta_scale);
  r.get("eta_max", s.eta_max);
  r.get("noiseless", s.noiseless);
  r.get("noiseless_tol", s.noiseless_tol);
  r.get("K_max_final", s.K_max_final);
  r.get("var_r", s.var_r);
  r.get("profile", profile);
  try {
    s.step_mode = step_mode_from_string(mode);
    s.validate();
  } catch (const ParameterError& e) {
    r.fail(e.what());
  }
  r.done();
}

// Line and column for a byte offset, plus the offending line.
inline std::string line_context(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  std::size_t line = 1, line_start = 0;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') {
      ++line;
      line_start = i + 1;
    }
  const std::size_t line_end = std::min(text.find('\n', line_start), text.size());
  std::ostringstream os;
  os << "line " << line << ", column " << (byte - line_start + 1) << ":\n  "
     << text.substr(line_start, line_end - line_start);
  return os.str();
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {}) {
  using detail::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON at " + detail::line_context(text, e.byte == 0 ? 0 : e.byte - 1) +
                      "\n(" + e.what() + ")");
  }
  ExperimentConfig c;
  c.base_dir = base_dir;
  detail::Reader r(j, "");
  r.get("name", c.name);
  if (r.has("schedule")) {
    auto s = r.child("schedule");
    s.get("T", c.T);
    s.get("beta_min", c.beta_min);
    s.get("beta_max", c.beta_max);
    s.done();
  }
  if (r.has("prior")) c.prior = detail::read_prior(r.child("prior"));
  if (r.has("truth")) c.truth = detail::read_prior(r.child("truth"));
  if (r.has("task")) c.task = detail::read_task(r.child("task"));
  if (r.has("noise")) c.noise = detail::read_noise(r.child("noise"));
  if (r.has("constraint")) {
    c.constraint = detail::read_constraint(r.child("constraint"), c.noise);
  } else {
    c.constraint = detail::read_constraint(detail::Reader(json::object(), "constraint"), c.noise);
  }
  if (r.has("solver")) detail::read_solver(r.child("solver"), c.solver, c.profile_path);
  if (r.has("calibration")) {
    auto s = r.child("calibration");
    s.get("samples", c.calibration.samples);
    s.get("set_seed", c.calibration.set_seed);
    s.get("seed", c.calibration.seed);
    s.done();
    if (c.calibration.samples == 0) s.fail("samples must be >= 1");
  }
  if (r.has("sweep")) {
    auto s = r.child("sweep");
    s.get("t_prime", c.sweep_t_prime);
    s.get("total_evals", c.sweep_total_evals);
    s.done();
    if (c.sweep_t_prime.empty() || c.sweep_total_evals <= 0) s.fail("needs a non-empty 't_prime' list and 'total_evals' > 0");
  }
  r.get("baseline", c.baseline);
  r.get("seeds", c.seeds);
  if (r.has("oracle")) {
    auto s = r.child("oracle");
    s.get("samples", c.oracle.samples);
    s.get("permutations", c.oracle.permutations);
    s.get("truth_seed", c.oracle.truth_seed);
    s.get("observation_seed", c.oracle.observation_seed);
    s.get("oracle_seed", c.oracle.oracle_seed);
    s.get("null_seed", c.oracle.null_seed);
    s.get("solver_seed", c.oracle.solver_seed);
    s.done();
    if (c.oracle.samples < 2 || c.oracle.permutations < 1) s.fail("need samples >= 2 and permutations >= 1");
  }
  if (r.has("output")) {
    auto s = r.child("output");
    s.get("dir", c.out_dir);
    s.get("format", c.format);
    s.get("trajectories", c.trajectories);
    s.done();
  }
  r.done();

  if (c.seeds.empty()) throw ConfigError("seeds: list must be non-empty");
  if (c.format != "csv" && c.format != "jsonl") throw ConfigError("output.format: must be csv or jsonl");
  try {
    make_linear_schedule(c.T, c.beta_min, c.beta_max);
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  auto must_exist = [&](const std::string& key, const std::string& p) {
    if (!p.empty() && !std::filesystem::exists(c.base_dir / p))
      throw ConfigError(key + ": file not found: " + (c.base_dir / p).string());
  };
  if (c.prior.kind == "file") must_exist("prior.path", c.prior.path);
  if (c.truth && c.truth->kind == "file") must_exist("truth.path", c.truth->path);
  must_exist("solver.profile", c.profile_path);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::filesystem::path(path).parent_path());
}

// ---- task construction ------------------------------------------------------------

inline NoiseSchedule build_schedule(const ExperimentConfig& c) { return make_linear_schedule(c.T, c.beta_min, c.beta_max); }

inline LoadedModel build_prior(const PriorSpec& p, const std::filesystem::path& base) {
  if (p.kind == "random_gmm") return random_gmm(p.n, p.components, p.seed, p.spread, p.var_lo, p.var_hi);
  if (p.kind == "gmm") return p.inline_gmm;
  return load_model((base / p.path).string());
}

inline LinearOperator build_operator(const TaskSpec& t, std::size_t n) {
  if (t.op == "identity") return identity_operator(n);
  if (t.op == "half_mask") return half_mask_operator(n);
  if (t.op == "mask") return mask_operator(n, t.kept);
  if (t.op == "random_mask") return random_mask_operator(n, t.mask_prob, t.op_seed, t.group_size);
  if (t.op == "box_mask") return box_mask_operator(n, t.start, t.length);
  if (t.op == "downsample") return downsample_operator(n, t.factor);
  return blur_operator(n, t.kernel.empty() ? gaussian_kernel(t.blur_sigma) : t.kernel);
}

/// Everything a cell needs, built once per run.
struct Problem {
  NoiseSchedule schedule;
  std::shared_ptr<const ScoreModel> model;
  std::optional<GmmPrior> prior_gmm;  // when the prior is analytic
  GmmPrior truth;
  LinearOperator op;

  std::uint64_t truth_seed(std::uint64_t seed) const { return splitmix64(seed ^ 0x7275747275ULL); }
  std::uint64_t noise_seed(std::uint64_t seed) const { return splitmix64(seed ^ 0x6e6f697365ULL); }
  Vec ground_truth(std::uint64_t seed) const { return sample_gmm(truth, 1, truth_seed(seed))[0]; }
};

inline Problem build_problem(const ExperimentConfig& c) {
  try {
    LoadedModel prior = build_prior(c.prior, c.base_dir);
    std::optional<GmmPrior> gmm;
    if (auto* g = std::get_if<GmmPrior>(&prior)) gmm = *g;
    GmmPrior truth;
    if (c.truth) {
      auto t = build_prior(*c.truth, c.base_dir);
      if (!std::holds_alternative<GmmPrior>(t)) throw ConfigError("truth: must be a Gaussian mixture");
      truth = std::get<GmmPrior>(t);
    } else if (gmm) {
      truth = *gmm;
    } else {
      throw ConfigError("truth: required when the prior is a trained network");
    }
    auto model = as_score_model(std::move(prior));
    if (truth.dim() != model->dim()) throw ConfigError("truth: dimension differs from the prior");
    return Problem{build_schedule(c), model, gmm, truth, build_operator(c.task, model->dim())};
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("task: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(std::string("prior: ") + e.what());
  }
}

// ---- metrics and rows ---------------------------------------------------------------

/// 10·log10(peak²/MSE) with peak = max|x_true|.
inline double psnr(ConstSpan x, ConstSpan truth, double& peak) {
  peak = norm_inf(truth);
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - truth[i]) * (x[i] - truth[i]);
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

struct ResultRow {
  std::uint64_t seed = 0;
  std::string task;
  std::string algorithm;
  int t_prime = 0;
  int K = 0;
  long model_evals = 0;
  double wall_time_s = 0.0;
  double objective = 0.0;
  double resid_mean = 0.0;
  double resid_var = 0.0;
  double discrete_kl = std::numeric_limits<double>::quiet_NaN();
  double resid_inf = 0.0;
  double psnr = 0.0;
  double psnr_peak = 0.0;
  double energy_distance = std::numeric_limits<double>::quiet_NaN();
  int early_stops = 0;
  std::string status = "ok";
};

inline const std::vector<std::string>& result_columns() {
  static const std::vector<std::string> cols{
      "seed",      "task",      "algorithm",  "t_prime",   "K",    "model_evals",     "wall_time_s", "objective",
      "resid_mean", "resid_var", "discrete_kl", "resid_inf", "psnr", "psnr_peak", "energy_distance", "early_stops",
      "status"};
  return cols;
}

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  // strtod rather than stod: subnormals must parse back too.
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw FormatError("bad number '" + s + "'");
  return v;
}

inline std::vector<std::string> row_fields(const ResultRow& r) {
  return {std::to_string(r.seed),       r.task,
          r.algorithm,                  std::to_string(r.t_prime),
          std::to_string(r.K),          std::to_string(r.model_evals),
          fmt_double(r.wall_time_s),    fmt_double(r.objective),
          fmt_double(r.resid_mean),     fmt_double(r.resid_var),
          fmt_double(r.discrete_kl),    fmt_double(r.resid_inf),
          fmt_double(r.psnr),           fmt_double(r.psnr_peak),
          fmt_double(r.energy_distance), std::to_string(r.early_stops),
          r.status};
}

// Text fields may hold commas or quotes (error messages).
inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

inline std::string csv_header() {
  std::string h;
  for (const auto& c : result_columns()) h += (h.empty() ? "" : ",") + c;
  return h;
}

inline std::string to_csv(const ResultRow& r) {
  std::string line;
  bool first = true;
  for (const auto& f : detail::row_fields(r)) {
    if (!first) line += ',';
    line += detail::csv_quote(f);
    first = false;
  }
  return line;
}

inline ResultRow row_from_fields(const std::vector<std::string>& f) {
  if (f.size() != result_columns().size())
    throw FormatError("result row has " + std::to_string(f.size()) + " fields, expected " +
                      std::to_string(result_columns().size()));
  ResultRow r;
  try {
    r.seed = std::stoull(f[0]);
    r.task = f[1];
    r.algorithm = f[2];
    r.t_prime = std::stoi(f[3]);
    r.K = std::stoi(f[4]);
    r.model_evals = std::stol(f[5]);
    r.wall_time_s = detail::parse_double(f[6]);
    r.objective = detail::parse_double(f[7]);
    r.resid_mean = detail::parse_double(f[8]);
    r.resid_var = detail::parse_double(f[9]);
    r.discrete_kl = detail::parse_double(f[10]);
    r.resid_inf = detail::parse_double(f[11]);
    r.psnr = detail::parse_double(f[12]);
    r.psnr_peak = detail::parse_double(f[13]);
    r.energy_distance = detail::parse_double(f[14]);
    r.early_stops = std::stoi(f[15]);
    r.status = f[16];
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed result row: ") + e.what());
  }
  return r;
}

inline ResultRow from_csv(const std::string& line) { return row_from_fields(detail::csv_split(line)); }

inline std::string to_jsonl(const ResultRow& r) {
  nlohmann::ordered_json j;
  const auto fields = detail::row_fields(r);
  const auto& cols = result_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) j[cols[i]] = fields[i];
  return j.dump();
}

inline ResultRow from_jsonl(const std::string& line) {
  const auto j = nlohmann::ordered_json::parse(line);
  std::vector<std::string> f;
  for (const auto& c : result_columns()) f.push_back(j.at(c).get<std::string>());
  return row_from_fields(f);
}

// ---- signal files ----------------------------------------------------------------

/// ".csv": one value per line; anything else: raw little-endian f64.
inline void save_signal(ConstSpan x, const std::string& path) {
  if (std::filesystem::path(path).extension() == ".csv") {
    std::ofstream os(path);
    for (double v : x) os << detail::fmt_double(v) << "\n";
    if (!os) throw FormatError("write failed: " + path);
    return;
  }
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(x.data()), static_cast<std::streamsize>(x.size() * sizeof(double)));
  if (!os) throw FormatError("write failed: " + path);
}

inline Vec load_signal(const std::string& path) {
  Vec v;
  if (std::filesystem::path(path).extension() == ".csv") {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open signal: " + path);
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) v.push_back(detail::parse_double(line));
    return v;
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open signal: " + path);
  const auto bytes = std::filesystem::file_size(path);
  if (bytes % sizeof(double) != 0) throw FormatError("signal file size is not a multiple of 8: " + path);
  v.resize(bytes / sizeof(double));
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw FormatError("short read: " + path);
  return v;
}

// ---- cells -------------------------------------------------------------------------

struct Cell {
  std::uint64_t seed = 0;
  std::string algorithm;  // cdim_l2 | cdim_kl | ddim
  SolverConfig solver;
  int t_prime = 0;

  std::string id(const std::string& task) const {
    return task + "_" + algorithm + "_tp" + std::to_string(t_prime) + "_K" + std::to_string(solver.K) + "_s" +
           std::to_string(seed);
  }
};

/// Seeds × (sweep entries or the single configured solver), plus optional
/// unconditional baseline rows.
inline std::vector<Cell> plan_cells(const ExperimentConfig& c) {
  const NoiseSchedule sched = build_schedule(c);
  std::vector<SolverConfig> configs;
  if (c.sweep_t_prime.empty()) {
    configs.push_back(c.solver);
  } else {
    for (int tp : c.sweep_t_prime) {
      if (tp < 1 || c.sweep_total_evals % tp != 0)
        throw ConfigError("sweep: total_evals " + std::to_string(c.sweep_total_evals) + " is not a multiple of T'=" +
                          std::to_string(tp));
      SolverConfig s = c.solver;
      s.delta = c.T / tp;
      s.K = static_cast<int>(c.sweep_total_evals / tp) - 1;
      if (s.delta < 1 || make_time_grid(sched, s.delta).t_prime() != tp)
        throw ConfigError("sweep: T'=" + std::to_string(tp) + " is not reachable with T=" + std::to_string(c.T));
      configs.push_back(s);
    }
  }
  const std::string alg = c.constraint.objective == Objective::l2 ? "cdim_l2" : "cdim_kl";
  std::vector<Cell> cells;
  for (auto seed : c.seeds) {
    for (const auto& s : configs) {
      const int tp = make_time_grid(sched, s.delta).t_prime();
      cells.push_back({seed, alg, s, tp});
      if (c.baseline) {
        SolverConfig b = s;
        b.K = 0;
        cells.push_back({seed, "ddim", b, tp});
      }
    }
  }
  return cells;
}

/// Residual summary of a final sample against y.
inline void fill_metrics(ResultRow& row, const ConstraintSpec& spec, const LinearOperator& op, ConstSpan y,
                         ConstSpan x0, ConstSpan truth) {
  const Vec ax = op.apply(x0);
  row.objective = objective_value_and_grad_axhat(spec, y, ax).value;
  const Vec add = residual_additive(y, ax);
  const Vec r = spec.objective == Objective::pearson_gaussian
                    ? residual_pearson(y, ax, spec.poisson_scale, spec.pearson_floor)
                    : add;
  const Moments m = empirical_moments(r);
  row.resid_mean = m.mean;
  row.resid_var = m.variance;
  if (spec.objective == Objective::kl_discrete) row.discrete_kl = discrete_kl(add, spec);
  row.resid_inf = norm_inf(add);
  row.psnr = psnr(x0, truth, row.psnr_peak);
}

inline void write_trajectory(const SolveResult& res, const std::string& path) {
  std::ofstream os(path);
  os << "t,t_next,objective_before,objective_after,residual_inf_after,inner_steps,early_stopped,mean_grad_norm,"
        "mean_eta\n";
  for (const auto& s : res.trajectory) {
    double g = 0.0, e = 0.0;
    for (std::size_t k = 0; k < s.grad_norms.size(); ++k) {
      g += s.grad_norms[k];
      e += s.etas[k];
    }
    const double n = static_cast<double>(s.grad_norms.size());
    os << s.t << "," << s.t_next << "," << detail::fmt_double(s.objective_before) << ","
       << detail::fmt_double(s.objective_after) << "," << detail::fmt_double(s.residual_inf_after) << ","
       << s.inner_steps << "," << (s.early_stopped ? 1 : 0) << "," << detail::fmt_double(n > 0 ? g / n : NAN) << ","
       << detail::fmt_double(n > 0 ? e / n : NAN) << "\n";
  }
  if (!os) throw FormatError("write failed: " + path);
}

/// Profile for a calibrated cell: loaded from the configured file, or
/// calibrated on draws from the truth prior.
inline Vec profile_for(const ExperimentConfig& c, const Problem& p, const SolverConfig& s) {
  const auto fp = fingerprint_for(p.op, c.constraint, p.schedule, s);
  if (!c.profile_path.empty()) return load_profile_for((c.base_dir / c.profile_path).string(), fp).mean_grad_norm;
  return calibrate(*p.model, p.schedule, p.op, c.constraint, c.noise, s,
                   sample_gmm(p.truth, c.calibration.samples, c.calibration.set_seed), c.calibration.seed)
      .mean_grad_norm;
}

inline ResultRow run_cell(const ExperimentConfig& c, const Problem& p, const Cell& cell,
                          const std::string& trajectory_path = "") {
  ResultRow row;
  row.seed = cell.seed;
  row.task = c.name;
  row.algorithm = cell.algorithm;
  row.t_prime = cell.t_prime;
  row.K = cell.solver.K;
  const Vec truth = p.ground_truth(cell.seed);
  try {
    const Vec y = observe(p.op, truth, c.noise, p.noise_seed(cell.seed));
    SolveResult res;
    if (cell.algorithm == "ddim") {
      const auto t0 = std::chrono::steady_clock::now();
      res.x0 = ddim_sample(*p.model, p.schedule, cell.solver.delta, cell.seed);
      res.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.model_evals = cell.t_prime;
    } else {
      SolverConfig s = cell.solver;
      if (s.step_mode == StepSizeMode::calibrated_expectation && s.K > 0) s.grad_profile = profile_for(c, p, s);
      res = cdim_solve(*p.model, p.schedule, p.op, y, c.constraint, s, cell.seed);
      for (const auto& st : res.trajectory) row.early_stops += st.early_stopped ? 1 : 0;
      if (!trajectory_path.empty()) write_trajectory(res, trajectory_path);
    }
    row.model_evals = res.model_evals;
    row.wall_time_s = res.wall_time;
    fill_metrics(row, c.constraint, p.op, y, res.x0, truth);
    // Single draw against exact posterior draws; comparable across rows of the same observation.
    if (p.prior_gmm && c.noise.kind == NoiseModel::Kind::gaussian) {
      const auto post = exact_posterior(*p.prior_gmm, p.op, c.noise.variance(), y);
      row.energy_distance = energy_distance({res.x0}, sample_gmm(post, c.oracle.samples, c.oracle.oracle_seed ^ cell.seed));
    }
  } catch (const Error& e) {
    row.status = std::string("failed: ") + e.what();
    row.objective = row.resid_mean = row.resid_var = row.resid_inf = row.psnr = row.psnr_peak =
        std::numeric_limits<double>::quiet_NaN();
  }
  return row;
}

struct RunSummary {
  std::vector<ResultRow> rows;
  std::size_t skipped = 0;  // reused from a previous run
  std::size_t failed = 0;
  std::string results_path;
};

/// Runs every cell with `jobs` workers. Each finished cell is written to
/// out/cells/<id>.<fmt> before the combined results file is assembled in
/// plan order, so a batch can be resumed after an interruption.
inline RunSummary run_experiment(const ExperimentConfig& c, int jobs = 1, bool resume = false) {
  namespace fs = std::filesystem;
  const Problem p = build_problem(c);
  const auto cells = plan_cells(c);
  const fs::path out = c.out_dir;
  fs::create_directories(out / "cells");
  if (c.trajectories) fs::create_directories(out / "trajectories");
  const std::string ext = c.format == "csv" ? ".csv" : ".jsonl";

  RunSummary sum;
  sum.rows.resize(cells.size());
  std::vector<char> have(cells.size(), 0);
  if (resume) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const fs::path f = out / "cells" / (cells[i].id(c.name) + ext);
      if (!fs::exists(f)) continue;
      std::ifstream is(f);
      std::string line;
      if (c.format == "csv") std::getline(is, line);  // header
      if (!std::getline(is, line)) continue;
      try {
        sum.rows[i] = c.format == "csv" ? from_csv(line) : from_jsonl(line);
        have[i] = 1;
        ++sum.skipped;
      } catch (const std::exception&) {
        // unreadable leftovers are recomputed
      }
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex io;
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      if (have[i]) continue;
      const std::string id = cells[i].id(c.name);
      const std::string traj = c.trajectories ? (out / "trajectories" / (id + ".csv")).string() : "";
      ResultRow row = run_cell(c, p, cells[i], traj);
      std::lock_guard<std::mutex> lock(io);
      const fs::path tmp = out / "cells" / (id + ext + ".tmp");
      {
        std::ofstream os(tmp);
        if (c.format == "csv") os << csv_header() << "\n" << to_csv(row) << "\n";
        else os << to_jsonl(row) << "\n";
      }
      fs::rename(tmp, out / "cells" / (id + ext));
      sum.rows[i] = std::move(row);
    }
  };
  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  sum.results_path = (out / ("results" + ext)).string();
  std::ofstream os(sum.results_path);
  if (c.format == "csv") os << csv_header() << "\n";
  for (const auto& r : sum.rows) {
    os << (c.format == "csv" ? to_csv(r) : to_jsonl(r)) << "\n";
    if (r.status != "ok") ++sum.failed;
  }
  if (!os) throw FormatError("write failed: " + sum.results_path);
  return sum;
}

// ---- posterior consistency ---------------------------------------------------------------

struct ConsistencyReport {
  double energy = 0.0;
  double threshold = 0.0;  // 99th percentile of the oracle-vs-oracle null
  std::size_t samples = 0;
  bool pass = false;
};

/// Energy distance between solver samples and exact-posterior draws, judged
/// against a permutation null built from two independent oracle halves.
inline ConsistencyReport posterior_consistency(const std::vector<Vec>& solver_samples, const PosteriorGmm& post,
                                               int permutations, std::uint64_t oracle_seed,
                                               std::uint64_t null_seed) {
  const std::size_t n = solver_samples.size();
  const auto oracle = sample_gmm(post, 2 * n, oracle_seed);
  const std::vector<Vec> first(oracle.begin(), oracle.begin() + static_cast<std::ptrdiff_t>(n));
  const std::vector<Vec> second(oracle.begin() + static_cast<std::ptrdiff_t>(n), oracle.end());
  ConsistencyReport rep;
  rep.samples = n;
  rep.threshold = quantile_sorted(energy_permutation_null(first, second, permutations, null_seed), 0.99);
  rep.energy = energy_distance(solver_samples, first);
  rep.pass = rep.energy < rep.threshold;
  return rep;
}

/// Solves oracle.samples independent seeds against one observation and
/// compares the cloud to the exact posterior. Gaussian noise only.
inline ConsistencyReport oracle_compare(const ExperimentConfig& c, int jobs = 1) {
  if (c.noise.kind != NoiseModel::Kind::gaussian)
    throw ConfigError(std::string("oracle-compare: the exact posterior exists only for Gaussian noise; this config uses ") +
                      to_string(c.noise.kind) + " noise");
  const Problem p = build_problem(c);
  if (!p.prior_gmm) throw ConfigError("oracle-compare: the prior must be a Gaussian mixture");
  const Vec truth = sample_gmm(p.truth, 1, c.oracle.truth_seed)[0];
  const Vec y = observe(p.op, truth, c.noise, c.oracle.observation_seed);
  const PosteriorGmm post = exact_posterior(*p.prior_gmm, p.op, c.noise.variance(), y);

  SolverConfig s = c.solver;
  if (s.step_mode == StepSizeMode::calibrated_expectation && s.K > 0) s.grad_profile = profile_for(c, p, s);
  std::vector<Vec> cloud(c.oracle.samples);
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(cloud.size());
  auto worker = [&]() {
    for (std::size_t i = next++; i < cloud.size(); i = next++) {
      try {
        cloud[i] = cdim_solve(*p.model, p.schedule, p.op, y, c.constraint, s, c.oracle.solver_seed + i).x0;
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < std::max(1, jobs); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) throw DivergenceError("oracle-compare: seed " + std::to_string(c.oracle.solver_seed + i) + ": " + errors[i]);
  return posterior_consistency(cloud, post, c.oracle.permutations, c.oracle.oracle_seed, c.oracle.null_seed);
}

}  // namespace cdim
