#pragma once

// Config-driven experiments: INI configuration, the end-to-end pipeline
// (flow, gauge, entropy audit, spectrum, projection, interval tests, rate),
// JSONL persistence and plot tables.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rflow/entropy.hpp"
#include "rflow/flows.hpp"
#include "rflow/frame.hpp"
#include "rflow/gauge.hpp"
#include "rflow/stability.hpp"

namespace rflow {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  std::string kind = "grid";  // grid | frame
  int n = 16;                 // grid points per axis (grid models are 2D)
  double period = 2.0 * std::numbers::pi;
  std::string recipe = "flat";  // grid: flat ripple conformal random; frame: round berger random
  double amplitude = 0.0;
  std::uint64_t seed = 0;
  int modes = 2;       // random recipe: max wavenumber per axis
  double a = 4.0;      // frame: coefficient of the round metric
  double squash = 1.0; // frame berger: fibre factor
  bool operator==(const ModelConfig&) const = default;
};

struct FlowConfig {
  FlowVariant variant = FlowVariant::tau_flow;
  double tau = kInfiniteTau;
  TauConvention convention = TauConvention::fixed;
  double dt = 1e-3;
  double t_end = 1.0;
  double sample_interval = 0.1;
  bool coupled_f = false;
  bool step_bound = true;
  bool operator==(const FlowConfig&) const = default;
};

struct GaugeConfig {
  std::string background = "flat";  // flat | none
  bool harmonic = false;
  bool fix_divergence = false;
  bool operator==(const GaugeConfig&) const = default;
};

struct StabilityConfig {
  bool analyze = true;
  double eps_neutral = 0.0;  // 0: gap estimate / 10
  double interval_length = 1.0;
  double beta = 0.0;  // 0: exp(L delta / 4)
  bool operator==(const StabilityConfig&) const = default;
};

struct OutputConfig {
  std::string root = "runs";
  std::string name = "run";
  bool operator==(const OutputConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  FlowConfig flow;
  GaugeConfig gauge;
  StabilityConfig stability;
  OutputConfig output;
  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

/// 1-based line of `key` inside `[section]`, 0 if not found.
inline int line_of(const std::string& text, const std::string& section, const std::string& key) {
  std::istringstream in(text);
  std::string line, current;
  for (int no = 1; std::getline(in, line); ++no) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == ';' || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      current = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos && current == section && trim(t.substr(0, eq)) == key) return no;
    if (key.empty() && current == section) return no;
  }
  return 0;
}

inline std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

class ConfigReader {
 public:
  ConfigReader(const std::string& text, const boost::property_tree::ptree& pt) : text_(text), pt_(pt) {}

  void section(const std::string& name, const std::set<std::string>& keys) {
    seen_.insert(name);
    const auto child = pt_.get_child_optional(name);
    if (!child) return;
    for (const auto& [k, v] : *child) {
      if (!keys.count(k)) fail(name, k, "unknown key");
      if (!v.empty()) fail(name, k, "nested values are not supported");
    }
  }

  void finish() const {
    for (const auto& [k, v] : pt_) {
      if (v.empty() && !v.data().empty()) fail("", k, "keys must appear inside a section");
      if (!seen_.count(k)) fail(k, "", "unknown section");
    }
  }

  std::optional<std::string> raw(const std::string& s, const std::string& k) const {
    if (auto v = pt_.get_optional<std::string>(boost::property_tree::ptree::path_type(s + "/" + k, '/')))
      return trim(*v);
    return std::nullopt;
  }

  void get(const std::string& s, const std::string& k, std::string& out) const {
    if (auto v = raw(s, k)) {
      if (v->empty()) fail(s, k, "empty value");
      out = *v;
    }
  }

  void get(const std::string& s, const std::string& k, double& out) const {
    auto v = raw(s, k);
    if (!v) return;
    std::string lower = *v;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "inf" || lower == "infinity") {
      out = kInfiniteTau;
      return;
    }
    try {
      std::size_t used = 0;
      const double d = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      out = d;
    } catch (const std::exception&) {
      fail(s, k, "expected a number, got '" + *v + "'");
    }
  }

  void get(const std::string& s, const std::string& k, int& out) const {
    double d = out;
    get(s, k, d);
    if (d != std::floor(d) || std::abs(d) > 1e9) fail(s, k, "expected an integer");
    out = static_cast<int>(d);
  }

  void get(const std::string& s, const std::string& k, std::uint64_t& out) const {
    auto v = raw(s, k);
    if (!v) return;
    if (v->empty() || v->find_first_not_of("0123456789") != std::string::npos)
      fail(s, k, "expected a non-negative integer, got '" + *v + "'");
    try {
      out = std::stoull(*v);
    } catch (const std::exception&) {
      fail(s, k, "integer out of range");
    }
  }

  void get(const std::string& s, const std::string& k, bool& out) const {
    auto v = raw(s, k);
    if (!v) return;
    if (*v == "true" || *v == "yes" || *v == "on" || *v == "1") out = true;
    else if (*v == "false" || *v == "no" || *v == "off" || *v == "0") out = false;
    else fail(s, k, "expected true or false, got '" + *v + "'");
  }

  [[noreturn]] void fail(const std::string& s, const std::string& k, const std::string& what) const {
    const int line = line_of(text_, s, k);
    const std::string field = k.empty() ? s : (s.empty() ? k : s + "." + k);
    throw ConfigError(field, (line > 0 ? "line " + std::to_string(line) + ": " : std::string()) + what);
  }

 private:
  const std::string& text_;
  const boost::property_tree::ptree& pt_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Range and consistency checks. Throws ConfigError naming the field.
inline void validate(const RunConfig& c, const std::string& text = {}) {
  auto bad = [&](const std::string& section, const std::string& key, const std::string& what) {
    const int line = text.empty() ? 0 : detail::line_of(text, section, key);
    throw ConfigError(section + "." + key, (line > 0 ? "line " + std::to_string(line) + ": " : std::string()) + what);
  };
  const auto& m = c.model;
  if (m.kind != "grid" && m.kind != "frame") bad("model", "kind", "must be grid or frame");
  if (m.kind == "grid") {
    if (m.n < 8 || m.n > 64) bad("model", "n", "must be in [8, 64]");
    if (!(m.period > 0.0) || !std::isfinite(m.period)) bad("model", "period", "must be positive");
    if (m.recipe != "flat" && m.recipe != "ripple" && m.recipe != "conformal" && m.recipe != "random")
      bad("model", "recipe", "grid recipes are flat, ripple, conformal, random");
    if (m.modes < 0 || m.modes > m.n / 2 - 1) bad("model", "modes", "must be in [0, n/2 - 1]");
  } else {
    if (m.recipe != "round" && m.recipe != "berger" && m.recipe != "random")
      bad("model", "recipe", "frame recipes are round, berger, random");
    if (!(m.a > 0.0) || !std::isfinite(m.a)) bad("model", "a", "must be positive");
    if (!(m.squash > 0.0) || !std::isfinite(m.squash)) bad("model", "squash", "must be positive");
  }
  if (!(m.amplitude >= 0.0 && m.amplitude < 0.9)) bad("model", "amplitude", "must be in [0, 0.9)");

  const auto& f = c.flow;
  if (!(f.tau > 0.0)) bad("flow", "tau", "must be positive or inf");
  if (!(f.dt > 0.0) || !std::isfinite(f.dt)) bad("flow", "dt", "must be positive");
  if (!(f.t_end >= 0.0) || !std::isfinite(f.t_end)) bad("flow", "t_end", "must be non-negative");
  if (!(f.sample_interval > 0.0) || !std::isfinite(f.sample_interval)) bad("flow", "sample_interval", "must be positive");
  if (f.variant == FlowVariant::tau_flow && f.convention == TauConvention::backward)
    bad("flow", "convention", "the tau-flow keeps tau fixed");
  if (f.convention == TauConvention::backward && !(f.t_end < f.tau))
    bad("flow", "t_end", "must stay below tau under the backward convention");
  if (f.coupled_f && !std::isfinite(f.tau)) bad("flow", "coupled_f", "the potential needs a finite tau");
  if (f.variant == FlowVariant::deturck && m.kind == "frame") bad("flow", "variant", "the DeTurck flow needs a grid model");
  if (f.variant == FlowVariant::deturck && c.gauge.background != "flat")
    bad("gauge", "background", "the DeTurck flow needs background = flat");

  const auto& g = c.gauge;
  if (g.background != "flat" && g.background != "none") bad("gauge", "background", "must be flat or none");
  if ((g.harmonic || g.fix_divergence) && m.kind == "frame")
    bad("gauge", "harmonic", "gauge reconstruction is trivial on homogeneous frame models");
  if ((g.harmonic || g.fix_divergence) && g.background != "flat") bad("gauge", "background", "gauge needs background = flat");
  if (g.fix_divergence && !g.harmonic) bad("gauge", "fix_divergence", "requires harmonic = true");

  const auto& s = c.stability;
  if (!(s.eps_neutral >= 0.0) || !std::isfinite(s.eps_neutral)) bad("stability", "eps_neutral", "must be non-negative");
  if (!(s.interval_length > 0.0) || !std::isfinite(s.interval_length)) bad("stability", "interval_length", "must be positive");
  if (!(s.beta == 0.0 || s.beta > 1.0) || !std::isfinite(s.beta)) bad("stability", "beta", "must be 0 (auto) or exceed 1");
  if (s.analyze && m.kind == "grid" && m.n > 32) bad("stability", "analyze", "dense spectra are limited to n <= 32");

  if (c.output.root.empty()) bad("output", "root", "must not be empty");
  if (c.output.name.empty() || c.output.name.find('/') != std::string::npos)
    bad("output", "name", "must be a non-empty plain name");
}

inline RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()), e.message());
  }
  detail::ConfigReader r(text, pt);
  r.section("model", {"kind", "n", "period", "recipe", "amplitude", "seed", "modes", "a", "squash"});
  r.section("flow", {"variant", "tau", "convention", "dt", "t_end", "sample_interval", "coupled_f", "step_bound"});
  r.section("gauge", {"background", "harmonic", "fix_divergence"});
  r.section("stability", {"analyze", "eps_neutral", "interval_length", "beta"});
  r.section("output", {"root", "name"});
  r.finish();

  RunConfig c;
  r.get("model", "kind", c.model.kind);
  r.get("model", "n", c.model.n);
  r.get("model", "period", c.model.period);
  r.get("model", "recipe", c.model.recipe);
  r.get("model", "amplitude", c.model.amplitude);
  r.get("model", "seed", c.model.seed);
  r.get("model", "modes", c.model.modes);
  r.get("model", "a", c.model.a);
  r.get("model", "squash", c.model.squash);
  if (c.model.kind == "frame" && !r.raw("model", "recipe")) c.model.recipe = "round";

  if (auto v = r.raw("flow", "variant")) {
    if (*v == "tau_flow") c.flow.variant = FlowVariant::tau_flow;
    else if (*v == "unnormalized") c.flow.variant = FlowVariant::unnormalized;
    else if (*v == "deturck") c.flow.variant = FlowVariant::deturck;
    else r.fail("flow", "variant", "expected tau_flow, unnormalized or deturck, got '" + *v + "'");
  }
  r.get("flow", "tau", c.flow.tau);
  if (auto v = r.raw("flow", "convention")) {
    if (*v == "fixed") c.flow.convention = TauConvention::fixed;
    else if (*v == "backward") c.flow.convention = TauConvention::backward;
    else r.fail("flow", "convention", "expected fixed or backward, got '" + *v + "'");
  }
  r.get("flow", "dt", c.flow.dt);
  r.get("flow", "t_end", c.flow.t_end);
  r.get("flow", "sample_interval", c.flow.sample_interval);
  r.get("flow", "coupled_f", c.flow.coupled_f);
  r.get("flow", "step_bound", c.flow.step_bound);

  r.get("gauge", "background", c.gauge.background);
  r.get("gauge", "harmonic", c.gauge.harmonic);
  r.get("gauge", "fix_divergence", c.gauge.fix_divergence);

  r.get("stability", "analyze", c.stability.analyze);
  r.get("stability", "eps_neutral", c.stability.eps_neutral);
  r.get("stability", "interval_length", c.stability.interval_length);
  r.get("stability", "beta", c.stability.beta);

  r.get("output", "root", c.output.root);
  r.get("output", "name", c.output.name);
  validate(c, text);
  return c;
}

/// Canonical text form; parse_config(serialize(c)) == c.
inline std::string serialize(const RunConfig& c) {
  using detail::fmt;
  auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream o;
  o << "[model]\n"
    << "kind = " << c.model.kind << "\n"
    << "n = " << c.model.n << "\n"
    << "period = " << fmt(c.model.period) << "\n"
    << "recipe = " << c.model.recipe << "\n"
    << "amplitude = " << fmt(c.model.amplitude) << "\n"
    << "seed = " << c.model.seed << "\n"
    << "modes = " << c.model.modes << "\n"
    << "a = " << fmt(c.model.a) << "\n"
    << "squash = " << fmt(c.model.squash) << "\n\n"
    << "[flow]\n"
    << "variant = " << to_string(c.flow.variant) << "\n"
    << "tau = " << fmt(c.flow.tau) << "\n"
    << "convention = " << to_string(c.flow.convention) << "\n"
    << "dt = " << fmt(c.flow.dt) << "\n"
    << "t_end = " << fmt(c.flow.t_end) << "\n"
    << "sample_interval = " << fmt(c.flow.sample_interval) << "\n"
    << "coupled_f = " << b(c.flow.coupled_f) << "\n"
    << "step_bound = " << b(c.flow.step_bound) << "\n\n"
    << "[gauge]\n"
    << "background = " << c.gauge.background << "\n"
    << "harmonic = " << b(c.gauge.harmonic) << "\n"
    << "fix_divergence = " << b(c.gauge.fix_divergence) << "\n\n"
    << "[stability]\n"
    << "analyze = " << b(c.stability.analyze) << "\n"
    << "eps_neutral = " << fmt(c.stability.eps_neutral) << "\n"
    << "interval_length = " << fmt(c.stability.interval_length) << "\n"
    << "beta = " << fmt(c.stability.beta) << "\n\n"
    << "[output]\n"
    << "root = " << c.output.root << "\n"
    << "name = " << c.output.name << "\n";
  return o.str();
}

/// FNV-1a of the canonical text, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : serialize(c)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

/// RFLOW_OUTPUT_ROOT, when set and non-empty, replaces output.root.
inline fs::path output_root(const RunConfig& c) {
  if (const char* env = std::getenv("RFLOW_OUTPUT_ROOT"); env && *env) return fs::path(env);
  return fs::path(c.output.root);
}

inline fs::path run_directory(const RunConfig& c) {
  return output_root(c) / (c.output.name + "-" + config_hash(c).substr(0, 12));
}

// ---------------------------------------------------------------------------
// Initial data

inline GridModel<2> initial_grid_metric(const ModelConfig& m) {
  auto g = GridModel<2>::flat(Grid<2>::cube(m.n, m.period));
  const double w = 2.0 * std::numbers::pi / m.period;
  const double eps = m.amplitude;
  if (m.recipe == "ripple") {
    for (std::size_t x = 0; x < g.size(); ++x) {
      const auto p = g.grid.position(x);
      const double X = w * p[0], Y = w * p[1];
      g.g[x] << 1 + eps * std::sin(Y), 0.5 * eps * std::sin(X + Y), 0.5 * eps * std::sin(X + Y), 1 + eps * std::cos(X);
    }
  } else if (m.recipe == "conformal") {
    for (std::size_t x = 0; x < g.size(); ++x) {
      const auto p = g.grid.position(x);
      g.g[x] *= std::exp(2.0 * eps * std::sin(w * p[0]) * std::cos(w * p[1]));
    }
  } else if (m.recipe == "random") {
    // Fourier modes |k_a| <= modes (constants included), rescaled so the
    // perturbation has sup magnitude `amplitude`.
    std::mt19937_64 rng(m.seed);
    std::normal_distribution<double> nd;
    SymTensorField<2> d(g.size(), Mat<2>::Zero());
    for (int kx = -m.modes; kx <= m.modes; ++kx)
      for (int ky = 0; ky <= m.modes; ++ky) {
        if (ky == 0 && kx < 0) continue;
        Mat<2> cc, ss;
        const double c01 = nd(rng), s01 = nd(rng);
        cc << nd(rng), c01, c01, nd(rng);
        ss << nd(rng), s01, s01, nd(rng);
        if (kx == 0 && ky == 0) ss.setZero();
        for (std::size_t x = 0; x < g.size(); ++x) {
          const auto p = g.grid.position(x);
          const double ph = w * (kx * p[0] + ky * p[1]);
          d[x] += std::cos(ph) * cc + std::sin(ph) * ss;
        }
      }
    const double s = max_abs(d);
    if (s > 0.0)
      for (std::size_t x = 0; x < g.size(); ++x) g.g[x] += (eps / s) * d[x];
  }
  validate(g, "harness");
  return g;
}

inline FrameModel initial_frame_metric(const ModelConfig& m) {
  if (m.recipe == "berger") return FrameModel::berger(m.a, m.squash);
  auto f = FrameModel::round_sphere(m.a);
  if (m.recipe == "random") {
    std::mt19937_64 rng(m.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 3; ++i) f.a(i) *= 1.0 + m.amplitude * u(rng);
  }
  validate(f, "harness");
  return f;
}

// ---------------------------------------------------------------------------
// Persistence

inline json to_json(const SpectralReport& r) {
  json j;
  std::vector<double> re, im;
  for (Eigen::Index i = 0; i < r.eigenvalues.size(); ++i) {
    re.push_back(r.eigenvalues(i).real());
    im.push_back(r.eigenvalues(i).imag());
  }
  j["eigenvalues_re"] = re;
  j["eigenvalues_im"] = im;
  j["dimension"] = r.eigenvalues.size();
  j["n_grow"] = r.n_grow;
  j["n_neutral"] = r.n_neutral;
  j["n_decay"] = r.n_decay;
  j["gap"] = std::isfinite(r.gap) ? json(r.gap) : json(nullptr);
  j["eps_neutral"] = r.neutral_tolerance;
  j["self_adjoint"] = r.self_adjoint;
  j["convention"] = r.convention;
  return j;
}

inline json tau_json(double tau) { return std::isfinite(tau) ? json(tau) : json(nullptr); }
inline double tau_from(const json& j) { return j.is_null() ? kInfiniteTau : j.get<double>(); }

inline json state_json(const FlowState<GridModel<2>>& s) {
  json j{{"type", "state"}, {"t", s.t}, {"tau", tau_json(s.tau)}};
  const Eigen::VectorXd v = flatten(s.metric.g);
  j["metric"] = std::vector<double>(v.data(), v.data() + v.size());
  if (s.f) j["f"] = *s.f;
  return j;
}

inline json state_json(const FlowState<FrameModel>& s) {
  json j{{"type", "state"}, {"t", s.t}, {"tau", tau_json(s.tau)}};
  j["metric"] = std::vector<double>(s.metric.a.data(), s.metric.a.data() + s.metric.a.size());
  if (s.f) j["f"] = *s.f;
  return j;
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& p) : out_(p) {
    if (!out_) throw Error("harness", "cannot open " + p.string());
  }
  void write(const json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

/// Trajectory file contents: header, states of one model kind, and the
/// analysis records ("distance", "entropy", "gauge", "rate") in file order.
struct LoadedTrajectory {
  json header;
  RunConfig config;
  std::optional<Trajectory<GridModel<2>>> grid;
  std::optional<Trajectory<FrameModel>> frame;
  std::vector<json> records;
};

inline LoadedTrajectory load_trajectory(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RejectedInput("harness", "cannot open " + path.string());
  LoadedTrajectory L;
  std::string line;
  int no = 0;
  std::optional<GridModel<2>> grid_base;
  std::optional<FrameModel> frame_base;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw RejectedInput("harness", path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
    const std::string type = j.value("type", "");
    if (type == "header") {
      L.header = j;
      L.config = parse_config(j.at("config").get<std::string>());
      if (L.config.model.kind == "grid") {
        grid_base = GridModel<2>::flat(Grid<2>::cube(L.config.model.n, L.config.model.period));
        L.grid.emplace();
        L.grid->variant = L.config.flow.variant;
        L.grid->convention = L.config.flow.convention;
      } else {
        frame_base = initial_frame_metric(L.config.model);
        L.frame.emplace();
        L.frame->variant = L.config.flow.variant;
        L.frame->convention = L.config.flow.convention;
      }
    } else if (type == "state") {
      if (L.header.is_null()) throw RejectedInput("harness", "state record before header");
      const auto v = j.at("metric").get<std::vector<double>>();
      const Eigen::VectorXd vec = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
      if (L.grid) {
        FlowState<GridModel<2>> s{j.at("t").get<double>(), *grid_base};
        s.metric.g = unflatten(s.metric.grid, vec);
        s.tau = tau_from(j.at("tau"));
        if (j.contains("f")) s.f = j.at("f").get<std::vector<double>>();
        L.grid->push(std::move(s));
      } else {
        FlowState<FrameModel> s{j.at("t").get<double>(), *frame_base};
        s.metric.a = vec;
        s.tau = tau_from(j.at("tau"));
        if (j.contains("f")) s.f = j.at("f").get<double>();
        L.frame->push(std::move(s));
      }
    } else {
      L.records.push_back(std::move(j));
    }
  }
  if (L.header.is_null()) throw RejectedInput("harness", "trajectory has no header");
  return L;
}

// ---------------------------------------------------------------------------
// Pipeline

struct Stages {
  bool flow = true;
  bool entropy = true;
  bool gauge = true;
  bool spectrum = true;
  bool analysis = true;
};

struct RunRecord {
  std::string config_hash;
  fs::path directory;
  fs::path trajectory;
  fs::path spectrum;
  fs::path record;
  std::map<std::string, std::string> verdicts;
  std::map<std::string, double> metrics;
  double wall_clock = 0.0;
  std::string failed_stage;  // empty on success
  std::string error;
  std::string error_kind;  // "validation" or "numerical"

  bool ok() const { return failed_stage.empty(); }
};

inline json to_json(const RunRecord& r) {
  json j{{"config_hash", r.config_hash},
         {"directory", r.directory.string()},
         {"trajectory", r.trajectory.string()},
         {"spectrum", r.spectrum.string()},
         {"verdicts", r.verdicts},
         {"wall_clock_s", r.wall_clock},
         {"ok", r.ok()}};
  json m = json::object();
  for (const auto& [k, v] : r.metrics) m[k] = std::isfinite(v) ? json(v) : json(nullptr);
  j["metrics"] = m;
  if (!r.ok()) j["failure"] = {{"stage", r.failed_stage}, {"message", r.error}, {"kind", r.error_kind}};
  return j;
}

inline RunRecord load_record(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RejectedInput("harness", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw RejectedInput("harness", path.string() + ": " + e.what());
  }
  RunRecord r;
  r.config_hash = j.value("config_hash", "");
  r.directory = j.value("directory", "");
  r.trajectory = j.value("trajectory", "");
  r.spectrum = j.value("spectrum", "");
  r.record = path;
  r.verdicts = j.value("verdicts", std::map<std::string, std::string>{});
  const json metrics = j.value("metrics", json::object());
  for (const auto& [k, v] : metrics.items())
    r.metrics[k] = v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  r.wall_clock = j.value("wall_clock_s", 0.0);
  if (j.contains("failure")) {
    r.failed_stage = j["failure"].value("stage", "");
    r.error = j["failure"].value("message", "");
    r.error_kind = j["failure"].value("kind", "");
  }
  return r;
}

/// Verdicts and metrics derived from persisted data, plus the records the
/// analysis appends to the trajectory stream.
struct Analysis {
  std::map<std::string, std::string> verdicts;
  std::map<std::string, double> metrics;
  std::vector<json> records;
};

inline constexpr double kStationaryTolerance = 1e-8;
inline constexpr double kFamilyTolerance = 1e-6;
inline constexpr double kExactTolerance = 1e-9;

namespace detail {

inline GridModel<2> flat_background(const RunConfig& c) { return GridModel<2>::flat(Grid<2>::cube(c.model.n, c.model.period)); }

inline double metric_sup(const GridModel<2>& a, const GridModel<2>& b) { return max_abs(lincomb(1.0, a.g, -1.0, b.g)); }
inline double metric_sup(const FrameModel& a, const FrameModel& b) { return (a.a - b.a).cwiseAbs().maxCoeff(); }
inline double metric_scale(const GridModel<2>& a) { return max_abs(a.g); }
inline double metric_scale(const FrameModel& a) { return a.a.cwiseAbs().maxCoeff(); }

template <class Model>
FlowSpec<Model> flow_spec(const RunConfig& c) {
  FlowSpec<Model> s{c.flow.variant, c.flow.tau, c.flow.convention};
  if constexpr (std::is_same_v<Model, GridModel<2>>)
    if (c.gauge.background == "flat") s.background = flat_background(c);
  return s;
}

inline RunControl run_control(const RunConfig& c) {
  return RunControl{c.flow.dt, c.flow.t_end, c.flow.sample_interval, c.flow.step_bound};
}

/// Spectrum of the linearization: at the flat background for grids, at the
/// initial metric for frame models.
template <class Model>
std::optional<SpectralReport> spectral_report(const RunConfig& c) {
  if (!c.stability.analyze) return std::nullopt;
  if constexpr (std::is_same_v<Model, GridModel<2>>) {
    if (c.gauge.background != "flat") return std::nullopt;
    const auto h = flat_background(c);
    const double eps = c.stability.eps_neutral > 0.0 ? c.stability.eps_neutral
                                                     : default_neutral_tolerance(fourier_spectral_gap(h.grid, c.flow.tau));
    return spectrum(assemble_linearized_pde(h, c.flow.tau), eps);
  } else {
    const auto L = jacobian_ode(flow_spec<FrameModel>(c), initial_frame_metric(c.model));
    const double eps = c.stability.eps_neutral > 0.0 ? c.stability.eps_neutral
                                                     : 1e-6 * std::max(1.0, L.A.cwiseAbs().maxCoeff());
    return spectrum(L, eps);
  }
}

inline std::string combine_interval_verdicts(const std::vector<IntervalVerdict>& v) {
  if (v.empty()) return "insufficient-data";
  bool grow = false, decay = false;
  for (auto x : v) {
    if (x == IntervalVerdict::violation) return "violation";
    (x == IntervalVerdict::growth_propagates ? grow : decay) = true;
  }
  return grow && decay ? "mixed" : (grow ? "growth-propagates" : "decay-propagates");
}

}  // namespace detail

/// Stability analysis of a trajectory: exact-solution check (flat recipe),
/// drift / stationarity, nearest flat metric (grid, tau = inf), distance
/// series, interval classification and rate fit. The rate is compared with
/// the gap only where the flat family is the limit set.
template <class Model>
Analysis analyze_trajectory(const Trajectory<Model>& traj, const RunConfig& c, const SpectralReport* rep) {
  Analysis A;
  if (traj.empty()) throw InsufficientData("harness", "empty trajectory");
  const auto& S = traj.states;
  const Model& g0 = S.front().metric;

  if constexpr (std::is_same_v<Model, GridModel<2>>) {
    if (c.model.recipe == "flat" || c.model.amplitude == 0.0) {
      if (c.flow.variant != FlowVariant::unnormalized && std::isfinite(c.flow.tau) &&
          c.flow.convention == TauConvention::fixed) {
        double err = 0.0;
        for (const auto& s : S) {
          const double e = std::exp(s.t / c.flow.tau);
          err = std::max(err, max_abs(lincomb(1.0, s.metric.g, -e, g0.g)) / (e * max_abs(g0.g)));
        }
        A.metrics["exact_rel_error"] = err;
        A.verdicts["exact_solution"] = err < kExactTolerance ? "reproduced" : "deviates";
      }
    }
  }

  double drift = 0.0;
  for (const auto& s : S) drift = std::max(drift, detail::metric_sup(s.metric, g0));
  drift /= detail::metric_scale(g0);
  A.metrics["drift_rel"] = drift;
  A.metrics["drift_per_unit_time"] = S.size() > 1 ? drift / (S.back().t - S.front().t) : 0.0;

  Model ginf = S.back().metric;
  if constexpr (std::is_same_v<Model, GridModel<2>>) {
    // Flat metrics are stationary only without the g / tau term.
    if (c.gauge.background == "flat" && !std::isfinite(c.flow.tau)) {
      const auto h = detail::flat_background(c);
      const auto ns = nearest_soliton_in_family(S.back().metric, h, rep);
      ginf = ns.g1;
      A.metrics["integrability_ratio"] = ns.ratio;
      A.metrics["family_distance_sup"] = detail::metric_sup(S.back().metric, ns.g1);
      A.verdicts["integrability"] = ns.factor_two_holds ? "holds" : "fails";
      A.verdicts["limit_in_family"] = A.metrics["family_distance_sup"] < kFamilyTolerance ? "yes" : "no";
    }
  }

  std::vector<double> t, d;
  for (const auto& s : S) {
    t.push_back(s.t);
    d.push_back(detail::metric_sup(s.metric, ginf));
    A.records.push_back({{"type", "distance"}, {"t", s.t}, {"sup", d.back()}});
  }

  const double delta = rep && std::isfinite(rep->gap) ? rep->gap : std::numeric_limits<double>::quiet_NaN();
  if (rep) {
    A.metrics["spectral_gap"] = delta;
    A.metrics["n_grow"] = static_cast<double>(rep->n_grow);
    A.metrics["n_neutral"] = static_cast<double>(rep->n_neutral);
    A.metrics["n_decay"] = static_cast<double>(rep->n_decay);
  }

  // Three consecutive length-L windows, sliding by L.
  const double L = c.stability.interval_length;
  const double beta = c.stability.beta > 0.0 ? c.stability.beta : std::exp(L * delta / 4.0);
  std::vector<IntervalVerdict> iv;
  if (std::isfinite(beta) && beta > 1.0) {
    auto window = [&](double a, double b) {
      std::vector<double> w;
      for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] >= a - 1e-12 && t[i] <= b + 1e-12) w.push_back(d[i]);
      return w;
    };
    for (double a = t.front(); a + 3 * L <= t.back() + 1e-12; a += L) {
      const auto w0 = window(a, a + L), w1 = window(a + L, a + 2 * L), w2 = window(a + 2 * L, a + 3 * L);
      if (w0.size() < 2 || w1.size() < 2 || w2.size() < 2) continue;
      if (*std::max_element(w2.begin(), w2.end()) <= 1e-12) break;  // converged to round-off
      iv.push_back(three_interval_test(w0, w1, w2, beta, true).verdict);
    }
    A.metrics["beta"] = beta;
  }
  A.metrics["interval_triples"] = static_cast<double>(iv.size());
  A.verdicts["trichotomy"] = detail::combine_interval_verdicts(iv);

  json rate{{"type", "rate"}};
  if (drift < kStationaryTolerance) {
    A.verdicts["rate"] = "stationary";
  } else {
    try {
      const auto fit = fit_exponential_rate(t, d);
      A.metrics["rate_c"] = fit.c;
      A.metrics["rate_C"] = fit.C;
      A.metrics["rate_residual"] = fit.residual;
      if (std::isfinite(delta) && A.verdicts.count("integrability"))
        A.metrics["rate_vs_gap_rel"] = std::abs(fit.c - delta) / delta;
      A.verdicts["rate"] = fit.c > 0.0 ? "decay" : "growth";
      rate["c"] = fit.c;
      rate["C"] = fit.C;
      rate["residual"] = fit.residual;
      rate["used"] = fit.used;
    } catch (const InsufficientData&) {
      A.verdicts["rate"] = "insufficient-data";
    }
  }
  rate["verdict"] = A.verdicts["rate"];
  if (std::isfinite(delta)) rate["delta"] = delta;
  A.records.push_back(rate);
  return A;
}

/// Entropy audit: W, the defect and both sides of the monotonicity
/// identity at every sample.
template <class Model>
Analysis entropy_audit(const Trajectory<Model>& traj) {
  Analysis A;
  const auto rep = monotonicity_report(traj);
  for (const auto& r : rep.records)
    A.records.push_back({{"type", "entropy"},
                         {"t", r.t},
                         {"W", r.W},
                         {"defect_l2", r.defect_l2},
                         {"dWdt_numeric", r.dWdt_numeric},
                         {"dWdt_formula", r.dWdt_formula},
                         {"flagged", r.flagged}});
  A.verdicts["monotonicity"] = rep.nondecreasing ? "nondecreasing" : "violated";
  A.metrics["entropy_violations"] = static_cast<double>(rep.violations);
  A.metrics["entropy_max_rel_mismatch"] = rep.max_rel_mismatch;
  A.metrics["entropy_W_initial"] = rep.records.front().W;
  A.metrics["entropy_W_final"] = rep.records.back().W;
  return A;
}

/// Gauge verdict from persisted "gauge" records.
inline Analysis gauge_verdict(const std::vector<json>& records) {
  Analysis A;
  double emax = 0.0, e0 = std::numeric_limits<double>::quiet_NaN();
  bool injective = true, any = false;
  for (const auto& r : records) {
    if (r.value("type", "") != "gauge") continue;
    const double e = r.at("error_sup").get<double>();
    if (!any) e0 = e;
    any = true;
    emax = std::max(emax, e);
    injective = injective && r.at("injective").get<bool>();
  }
  if (!any) return A;
  A.metrics["gauge_error_max"] = emax;
  A.metrics["gauge_error_initial"] = e0;
  A.verdicts["gauge"] = injective ? "injective" : "breakdown";
  return A;
}

namespace detail {

inline void merge(RunRecord& r, const Analysis& a, JsonlWriter* w) {
  for (const auto& [k, v] : a.verdicts) r.verdicts[k] = v;
  for (const auto& [k, v] : a.metrics) r.metrics[k] = v;
  if (w)
    for (const auto& j : a.records) w->write(j);
}

/// Harmonic-map gauge along a Ricci-type flow and the audit against the
/// directly integrated DeTurck flow from matching initial data.
inline std::vector<json> gauge_stage(const Trajectory<GridModel<2>>& main, const RunConfig& c, RunRecord& rec) {
  const auto h = flat_background(c);
  const auto& g0 = main.states.front().metric;
  VectorField<2> F0(g0.size(), Vec<2>::Zero());
  DiffeoField<2> phi0 = DiffeoField<2>::identity(g0.grid);
  if (c.gauge.fix_divergence) {
    const auto fix = divergence_gauge_fix(g0, h);
    phi0 = fix.phi;
    F0 = fix.phi.F;
    rec.metrics["divergence_residual"] = fix.residual;
    rec.metrics["divergence_iterations"] = fix.iterations;
  }
  const auto ctl = run_control(c);
  const FlowVariant ricci_variant = std::isfinite(c.flow.tau) && c.flow.convention == TauConvention::fixed
                                        ? FlowVariant::tau_flow
                                        : FlowVariant::unnormalized;
  Trajectory<GridModel<2>> ricci, deturck;
  if (main.variant == FlowVariant::deturck) {
    deturck = main;
    FlowSpec<GridModel<2>> spec{ricci_variant, c.flow.tau, TauConvention::fixed};
    ricci = run_flow(FlowState<GridModel<2>>{0.0, c.gauge.fix_divergence ? pullback_metric(phi0, g0) : g0}, spec, ctl);
  } else {
    ricci = main;
    FlowSpec<GridModel<2>> spec{FlowVariant::deturck, main.variant == FlowVariant::unnormalized ? kInfiniteTau : c.flow.tau};
    spec.background = h;
    const auto start = c.gauge.fix_divergence ? pullback_metric(inverse_diffeo(phi0), g0) : g0;
    deturck = run_flow(FlowState<GridModel<2>>{0.0, start}, spec, ctl);
  }
  const auto gauge = run_harmonic_gauge(ricci, h, F0);
  const auto audit = gauge_equivalence_check(ricci, deturck, gauge);
  std::vector<json> out;
  for (std::size_t i = 0; i < gauge.t.size(); ++i)
    out.push_back({{"type", "gauge"},
                   {"t", gauge.t[i]},
                   {"e_sup", gauge.energy[i].e_sup},
                   {"E", gauge.energy[i].E},
                   {"error_sup", audit[i].error_sup},
                   {"min_det", gauge.injectivity[i].min_det},
                   {"injective", gauge.injectivity[i].ok}});
  return out;
}

template <class Model>
FlowState<Model> initial_state(const RunConfig& c) {
  FlowState<Model> s;
  if constexpr (std::is_same_v<Model, GridModel<2>>) {
    s.metric = initial_grid_metric(c.model);
    if (c.flow.coupled_f) s.f = minimize_mu(s.metric, c.flow.tau).f;
  } else {
    s.metric = initial_frame_metric(c.model);
    if (c.flow.coupled_f) s.f = 0.0;
  }
  s.tau = c.flow.tau;
  return s;
}

template <class Model>
void run_pipeline(const RunConfig& c, const Stages& st, RunRecord& rec, std::string& stage) {
  std::optional<JsonlWriter> w;
  Trajectory<Model> traj;
  if (st.flow) {
    stage = "setup";
    w.emplace(rec.trajectory);
    w->write({{"type", "header"},
              {"config", serialize(c)},
              {"config_hash", rec.config_hash},
              {"model", c.model.kind},
              {"variant", to_string(c.flow.variant)},
              {"tau", tau_json(c.flow.tau)}});
    auto init = initial_state<Model>(c);
    stage = "flow";
    traj = run_flow<Model>(std::move(init), flow_spec<Model>(c), run_control(c),
                    [&](const FlowState<Model>& s, Diagnostics&) { w->write(state_json(s)); });
    rec.metrics["samples"] = static_cast<double>(traj.size());
  }
  if (st.flow && st.entropy && c.flow.coupled_f) {
    stage = "entropy";
    merge(rec, entropy_audit(traj), &*w);
  }
  if constexpr (std::is_same_v<Model, GridModel<2>>) {
    if (st.flow && st.gauge && c.gauge.harmonic) {
      stage = "gauge";
      const auto records = gauge_stage(traj, c, rec);
      for (const auto& j : records) w->write(j);
      merge(rec, gauge_verdict(records), nullptr);
    }
  }
  std::optional<SpectralReport> rep;
  if (st.spectrum || (st.flow && st.analysis)) {
    stage = "spectrum";
    rep = spectral_report<Model>(c);
    if (rep) {
      json j = to_json(*rep);
      j["background"] = c.model.kind == "grid" ? "flat torus" : "frame initial metric";
      j["tau"] = tau_json(c.flow.tau);
      j["config_hash"] = rec.config_hash;
      std::ofstream(rec.spectrum) << j.dump(1) << '\n';
      rec.verdicts["spectrum"] = rep->n_grow > 0 ? "unstable" : (rep->n_neutral > 0 ? "neutral" : "stable");
      rec.metrics["spectral_gap"] = rep->gap;
    } else {
      rec.spectrum.clear();
    }
  } else {
    rec.spectrum.clear();
  }
  if (st.flow && st.analysis) {
    stage = "analysis";
    merge(rec, analyze_trajectory(traj, c, rep ? &*rep : nullptr), &*w);
  }
}

inline bool is_validation_error(const Error& e) {
  return dynamic_cast<const RejectedInput*>(&e) || dynamic_cast<const ConfigError*>(&e);
}

}  // namespace detail

/// Run the configured pipeline. Files go to run_directory(c); run.json is
/// written on success and on failure (with the failing stage), and the
/// trajectory stream keeps everything recorded before a failure.
inline RunRecord run_experiment(const RunConfig& c, const Stages& st = {}) {
  validate(c);
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config_hash = config_hash(c);
  rec.directory = run_directory(c);
  fs::create_directories(rec.directory);
  rec.trajectory = st.flow ? rec.directory / "trajectory.jsonl" : fs::path();
  rec.spectrum = rec.directory / "spectrum.json";
  rec.record = rec.directory / "run.json";
  std::string stage = "setup";
  try {
    if (c.model.kind == "grid") detail::run_pipeline<GridModel<2>>(c, st, rec, stage);
    else detail::run_pipeline<FrameModel>(c, st, rec, stage);
  } catch (const Error& e) {
    rec.failed_stage = stage;
    rec.error = std::string(e.stage()) + ": " + e.what();
    rec.error_kind = detail::is_validation_error(e) ? "validation" : "numerical";
  } catch (const std::exception& e) {
    rec.failed_stage = stage;
    rec.error = e.what();
    rec.error_kind = "numerical";
  }
  rec.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream(rec.record) << to_json(rec).dump(1) << '\n';
  return rec;
}

/// Verdicts recomputed from a persisted trajectory file alone.
inline std::map<std::string, std::string> recompute_verdicts(const fs::path& trajectory) {
  const auto L = load_trajectory(trajectory);
  RunRecord r;
  auto run = [&](const auto& traj, auto tag) {
    using Model = decltype(tag);
    if (L.config.flow.coupled_f && traj.size() >= 3) detail::merge(r, entropy_audit(traj), nullptr);
    detail::merge(r, gauge_verdict(L.records), nullptr);
    const auto rep = detail::spectral_report<Model>(L.config);
    if (rep) r.verdicts["spectrum"] = rep->n_grow > 0 ? "unstable" : (rep->n_neutral > 0 ? "neutral" : "stable");
    detail::merge(r, analyze_trajectory(traj, L.config, rep ? &*rep : nullptr), nullptr);
  };
  if (L.grid) run(*L.grid, GridModel<2>{});
  else run(*L.frame, FrameModel{});
  return r.verdicts;
}

/// Two-column (t, value) table for norm, W, defect or energy. Written next
/// to the record as plot_<quantity>.dat.
inline fs::path emit_plotdata(const RunRecord& rec, const std::string& quantity) {
  std::string type, field;
  if (quantity == "norm") type = "distance", field = "sup";
  else if (quantity == "W") type = "entropy", field = "W";
  else if (quantity == "defect") type = "entropy", field = "defect_l2";
  else if (quantity == "energy") type = "gauge", field = "E";
  else throw RejectedInput("harness", "unknown plot quantity '" + quantity + "' (norm, W, defect, energy)");
  const fs::path out = rec.directory / ("plot_" + quantity + ".dat");
  std::ofstream o(out);
  if (!o) throw Error("harness", "cannot write " + out.string());
  o << "# t " << quantity << '\n' << std::setprecision(17);
  if (!rec.trajectory.empty() && fs::exists(rec.trajectory)) {
    std::ifstream in(rec.trajectory);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      if (j.value("type", "") == type) o << j.at("t").get<double>() << ' ' << j.at(field).get<double>() << '\n';
    }
  }
  return out;
}

}  // namespace rflow
