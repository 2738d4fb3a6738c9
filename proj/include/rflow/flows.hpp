#pragma once

// Right-hand sides and the explicit RK4 integrator for the tau-flow,
// unnormalized Ricci flow, Ricci-DeTurck flow and the coupled potential.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "rflow/constraint.hpp"
#include "rflow/deturck.hpp"
#include "rflow/frame.hpp"
#include "rflow/geometry.hpp"

namespace rflow {

inline constexpr double kInfiniteTau = std::numeric_limits<double>::infinity();

enum class FlowVariant { tau_flow, unnormalized, deturck };

/// How tau evolves along a trajectory: constant, or decreasing at unit rate
/// (the coupled system accompanying the unnormalized flow).
enum class TauConvention { fixed, backward };

inline const char* to_string(FlowVariant v) {
  switch (v) {
    case FlowVariant::tau_flow: return "tau_flow";
    case FlowVariant::unnormalized: return "unnormalized";
    case FlowVariant::deturck: return "deturck";
  }
  return "?";
}
inline const char* to_string(TauConvention c) { return c == TauConvention::fixed ? "fixed" : "backward"; }

// ---------------------------------------------------------------------------
// Right-hand sides, grid model

template <int Dim>
SymTensorField<Dim> rhs_unnormalized(const MetricData<Dim>& md) {
  return scaled(-2.0, ricci(md));
}

template <int Dim>
SymTensorField<Dim> rhs_unnormalized(const GridModel<Dim>& m) {
  return rhs_unnormalized(MetricData<Dim>(m));
}

/// -2 Ric(g) + g / tau.
template <int Dim>
SymTensorField<Dim> rhs_tau_flow(const MetricData<Dim>& md, double tau) {
  auto r = rhs_unnormalized(md);
  if (std::isfinite(tau)) {
    for (std::size_t x = 0; x < r.size(); ++x) r[x] += md.model->g[x] / tau;
  }
  return r;
}

template <int Dim>
SymTensorField<Dim> rhs_tau_flow(const GridModel<Dim>& m, double tau) {
  return rhs_tau_flow(MetricData<Dim>(m), tau);
}

/// -2 Ric(g) + g / tau + L_V g, V the DeTurck field relative to h. tau may
/// be infinite, which drops the g / tau term.
template <int Dim>
SymTensorField<Dim> rhs_deturck(const MetricData<Dim>& md, const MetricData<Dim>& h, double tau) {
  auto r = rhs_tau_flow(md, tau);
  const auto P = p_operator(md, h);
  for (std::size_t x = 0; x < r.size(); ++x) r[x] += P[x];
  return r;
}

template <int Dim>
SymTensorField<Dim> rhs_deturck(const GridModel<Dim>& g, const GridModel<Dim>& h, double tau) {
  return rhs_deturck(MetricData<Dim>(g), MetricData<Dim>(h), tau);
}

/// df/dt = -Delta f + |grad f|^2 - R + n / (2 tau).
template <int Dim>
ScalarField<Dim> rhs_potential(const ScalarField<Dim>& f, const MetricData<Dim>& md, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw RejectedInput("flows", "potential flow needs finite tau > 0");
  const auto lap = laplacian_scalar(md, f);
  const auto grad2 = gradient_norm_sq(md, f);
  const auto R = scalar_curvature(md);
  ScalarField<Dim> r(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) r[x] = -lap[x] + grad2[x] - R[x] + Dim / (2.0 * tau);
  return r;
}

template <int Dim>
ScalarField<Dim> rhs_potential(const ScalarField<Dim>& f, const GridModel<Dim>& m, double tau) {
  return rhs_potential(f, MetricData<Dim>(m), tau);
}

// ---------------------------------------------------------------------------
// Right-hand sides, frame model (velocities of the coefficients a_i)

inline Eigen::VectorXd rhs_unnormalized(const FrameModel& m) { return -2.0 * ricci_diagonal(m); }

inline Eigen::VectorXd rhs_tau_flow(const FrameModel& m, double tau) {
  Eigen::VectorXd r = rhs_unnormalized(m);
  if (std::isfinite(tau)) r += m.a / tau;
  return r;
}

inline double rhs_potential(double, const FrameModel& m, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw RejectedInput("flows", "potential flow needs finite tau > 0");
  return -scalar_curvature(m) + m.n / (2.0 * tau);
}

// ---------------------------------------------------------------------------
// State packing

template <class Model>
struct ModelTraits;

template <int Dim>
struct ModelTraits<GridModel<Dim>> {
  using Potential = ScalarField<Dim>;
  using Displacement = VectorField<Dim>;
  static constexpr int dim = Dim;
  static constexpr int components = Dim * (Dim + 1) / 2;

  static std::size_t metric_size(const GridModel<Dim>& m) { return m.size() * components; }
  static std::size_t potential_size(const GridModel<Dim>& m) { return m.size(); }

  static void pack_metric(const GridModel<Dim>& m, Eigen::Ref<Eigen::VectorXd> y) { pack_velocity(m.g, y); }
  static void pack_velocity(const SymTensorField<Dim>& v, Eigen::Ref<Eigen::VectorXd> y) {
    std::size_t p = 0;
    for (const auto& g : v)
      for (int i = 0; i < Dim; ++i)
        for (int j = i; j < Dim; ++j) y(p++) = g(i, j);
  }
  static void unpack_metric(const Eigen::Ref<const Eigen::VectorXd>& y, GridModel<Dim>& m) {
    std::size_t p = 0;
    for (auto& g : m.g)
      for (int i = 0; i < Dim; ++i)
        for (int j = i; j < Dim; ++j) {
          g(i, j) = y(p++);
          g(j, i) = g(i, j);
        }
  }
  static void pack_potential(const Potential& f, Eigen::Ref<Eigen::VectorXd> y) {
    for (std::size_t x = 0; x < f.size(); ++x) y(x) = f[x];
  }
  static void unpack_potential(const Eigen::Ref<const Eigen::VectorXd>& y, Potential& f) {
    f.resize(y.size());
    for (std::size_t x = 0; x < f.size(); ++x) f[x] = y(x);
  }
  static int dimension(const GridModel<Dim>&) { return Dim; }
};

template <>
struct ModelTraits<FrameModel> {
  using Potential = double;
  using Displacement = std::monostate;

  static std::size_t metric_size(const FrameModel& m) { return static_cast<std::size_t>(m.n); }
  static std::size_t potential_size(const FrameModel&) { return 1; }
  static void pack_metric(const FrameModel& m, Eigen::Ref<Eigen::VectorXd> y) { y = m.a; }
  static void pack_velocity(const Eigen::VectorXd& v, Eigen::Ref<Eigen::VectorXd> y) { y = v; }
  static void unpack_metric(const Eigen::Ref<const Eigen::VectorXd>& y, FrameModel& m) { m.a = y; }
  static void pack_potential(double f, Eigen::Ref<Eigen::VectorXd> y) { y(0) = f; }
  static void unpack_potential(const Eigen::Ref<const Eigen::VectorXd>& y, double& f) { f = y(0); }
  static int dimension(const FrameModel& m) { return m.n; }
};

template <class Model>
void validate_metric(const Model& m, const char* stage) {
  validate(m, stage);
}

// ---------------------------------------------------------------------------
// States and trajectories

template <class Model>
struct FlowState {
  double t = 0.0;
  Model metric;
  std::optional<typename ModelTraits<Model>::Potential> f;
  std::optional<typename ModelTraits<Model>::Displacement> F;
  double tau = kInfiniteTau;
};

using Diagnostics = std::map<std::string, double>;

template <class Model>
struct Trajectory {
  FlowVariant variant = FlowVariant::tau_flow;
  TauConvention convention = TauConvention::fixed;
  std::vector<FlowState<Model>> states;
  std::vector<Diagnostics> diagnostics;

  std::size_t size() const { return states.size(); }
  bool empty() const { return states.empty(); }
  void push(FlowState<Model> s, Diagnostics d = {}) {
    if (!states.empty() && !(s.t > states.back().t))
      throw RejectedInput("flows", "trajectory times must increase strictly");
    states.push_back(std::move(s));
    diagnostics.push_back(std::move(d));
  }
};

/// Flow selector. `background` is the reference metric h of the DeTurck
/// flow (grid model only).
template <class Model>
struct FlowSpec {
  FlowVariant variant = FlowVariant::tau_flow;
  double tau = kInfiniteTau;  // used by the metric equation of the tau and DeTurck flows
  TauConvention convention = TauConvention::fixed;
  std::optional<Model> background;
};

namespace detail {

template <class Model>
auto metric_velocity(const Model& m, const FlowSpec<Model>& spec) {
  if constexpr (std::is_same_v<Model, FrameModel>) {
    switch (spec.variant) {
      case FlowVariant::tau_flow: return rhs_tau_flow(m, spec.tau);
      case FlowVariant::unnormalized: return rhs_unnormalized(m);
      case FlowVariant::deturck:
        throw RejectedInput("flows", "the DeTurck variant needs a grid model");
    }
    throw RejectedInput("flows", "unknown flow variant");
  } else {
    constexpr int Dim = Model::dim;
    const MetricData<Dim> md(m);
    switch (spec.variant) {
      case FlowVariant::tau_flow: return rhs_tau_flow(md, spec.tau);
      case FlowVariant::unnormalized: return rhs_unnormalized(md);
      case FlowVariant::deturck: {
        if (!spec.background) throw RejectedInput("flows", "DeTurck flow needs a background metric");
        return rhs_deturck(md, MetricData<Dim>(*spec.background), spec.tau);
      }
    }
    throw RejectedInput("flows", "unknown flow variant");
  }
}

template <class Model>
auto potential_velocity(const typename ModelTraits<Model>::Potential& f, const Model& m, double tau) {
  return rhs_potential(f, m, tau);
}

}  // namespace detail

/// Classical fourth-order Runge-Kutta step of y' = rhs(t, y).
template <class Rhs>
Eigen::VectorXd rk4_step(const Rhs& rhs, double t, const Eigen::VectorXd& y, double dt) {
  const Eigen::VectorXd k1 = rhs(t, y);
  const Eigen::VectorXd k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1);
  const Eigen::VectorXd k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2);
  const Eigen::VectorXd k4 = rhs(t + dt, y + dt * k3);
  return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Stable step bound; unbounded for the frame model (plain ODE).
template <class Model>
double step_bound(const Model& m) {
  if constexpr (std::is_same_v<Model, FrameModel>) {
    return std::numeric_limits<double>::infinity();
  } else {
    return cfl_bound(m);
  }
}

/// Advance one RK4 step. The metric (and f, when present) are integrated
/// together; f is re-normalized to the constraint afterwards.
template <class Model>
FlowState<Model> step(const FlowState<Model>& state, const FlowSpec<Model>& spec, double dt) {
  using Traits = ModelTraits<Model>;
  if (!(dt > 0.0)) throw RejectedInput("flows", "dt must be positive");
  if (spec.variant == FlowVariant::tau_flow && spec.convention != TauConvention::fixed)
    throw RejectedInput("flows", "the tau-flow keeps tau fixed");
  const std::size_t nm = Traits::metric_size(state.metric);
  const bool with_f = state.f.has_value();
  const std::size_t nf = with_f ? Traits::potential_size(state.metric) : 0;
  if (with_f && !(state.tau > 0.0 && std::isfinite(state.tau)))
    throw RejectedInput("flows", "coupled potential needs finite tau > 0");

  Eigen::VectorXd y(nm + nf);
  Traits::pack_metric(state.metric, y.head(nm));
  if (with_f) Traits::pack_potential(*state.f, y.tail(nf));

  Model scratch = state.metric;
  typename Traits::Potential fs{};
  auto tau_at = [&](double s) {
    return spec.convention == TauConvention::backward ? state.tau - (s - state.t) : state.tau;
  };
  auto rhs = [&](double s, const Eigen::VectorXd& v) {
    Traits::unpack_metric(v.head(nm), scratch);
    Eigen::VectorXd out(nm + nf);
    try {
      Traits::pack_velocity(detail::metric_velocity(scratch, spec), out.head(nm));
      if (with_f) {
        Traits::unpack_potential(v.tail(nf), fs);
        Traits::pack_potential(detail::potential_velocity<Model>(fs, scratch, tau_at(s)), out.tail(nf));
      }
    } catch (const RejectedInput& e) {
      throw StepRejected(std::string("stage evaluation failed: ") + e.what(), state.t, dt);
    }
    return out;
  };
  const Eigen::VectorXd next = rk4_step(rhs, state.t, y, dt);
  if (!next.allFinite()) throw StepRejected("non-finite state after step", state.t, dt);

  FlowState<Model> out;
  out.t = state.t + dt;
  out.tau = tau_at(out.t);
  out.metric = state.metric;
  out.F = state.F;
  Traits::unpack_metric(next.head(nm), out.metric);
  try {
    validate_metric(out.metric, "flows");
  } catch (const RejectedInput& e) {
    throw StepRejected(std::string("metric left the SPD cone: ") + e.what(), state.t, dt);
  }
  if (with_f) {
    typename Traits::Potential f{};
    Traits::unpack_potential(next.tail(nf), f);
    out.f = normalize_f(out.metric, std::move(f), out.tau);
  }
  return out;
}

struct RunControl {
  double dt = 1e-3;
  double t_end = 1.0;
  double sample_interval = 0.1;
  bool enforce_step_bound = true;  // clamp dt to the explicit stability bound
  int max_halvings = 6;
};

/// Integrate from `initial` to ctl.t_end, recording a sample every
/// ctl.sample_interval (and at t_end). Rejected steps are retried with
/// halved dt up to ctl.max_halvings times before the rejection surfaces.
template <class Model>
Trajectory<Model> run_flow(FlowState<Model> initial, const FlowSpec<Model>& spec, const RunControl& ctl,
                           const std::function<void(const FlowState<Model>&, Diagnostics&)>& observe = {}) {
  if (!(ctl.dt > 0.0)) throw RejectedInput("flows", "dt must be positive");
  if (!(ctl.sample_interval > 0.0)) throw RejectedInput("flows", "sample interval must be positive");
  if (!(ctl.t_end >= initial.t)) throw RejectedInput("flows", "t_end precedes the initial time");
  validate_metric(initial.metric, "flows");
  if (initial.f) initial.f = normalize_f(initial.metric, *initial.f, initial.tau);

  Trajectory<Model> traj;
  traj.variant = spec.variant;
  traj.convention = spec.convention;
  auto record = [&](const FlowState<Model>& s, double dt_used) {
    Diagnostics d;
    d["dt"] = dt_used;
    if constexpr (std::is_same_v<Model, FrameModel>) {
      d["volume"] = volume(s.metric);
    } else {
      d["volume"] = volume(s.metric);
      if (spec.background) d["dist_background_sup"] = max_abs(lincomb(1.0, s.metric.g, -1.0, spec.background->g));
    }
    if (observe) observe(s, d);
    traj.push(s, std::move(d));
  };

  FlowState<Model> state = std::move(initial);
  record(state, 0.0);
  const double t0 = state.t;
  const int nsamples = static_cast<int>(std::ceil((ctl.t_end - t0) / ctl.sample_interval - 1e-9));
  for (int k = 1; k <= nsamples; ++k) {
    const double target = std::min(t0 + k * ctl.sample_interval, ctl.t_end);
    const double span = target - state.t;
    double dt = ctl.dt;
    if (ctl.enforce_step_bound) dt = std::min(dt, step_bound(state.metric));
    const int nsub = std::max(1, static_cast<int>(std::ceil(span / dt - 1e-9)));
    dt = span / nsub;
    std::function<FlowState<Model>(const FlowState<Model>&, double, int)> advance =
        [&](const FlowState<Model>& s, double h, int depth) -> FlowState<Model> {
      try {
        return step(s, spec, h);
      } catch (const StepRejected&) {
        if (depth >= ctl.max_halvings) throw;
        return advance(advance(s, 0.5 * h, depth + 1), 0.5 * h, depth + 1);
      }
    };
    for (int i = 0; i < nsub; ++i) {
      state = advance(state, dt, 0);
      if (i + 1 == nsub) state.t = target;  // absorb rounding
    }
    record(state, dt);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Time interpolation and reparametrization

namespace detail {

template <class Model>
Model scaled_metric(Model m, double c) {
  if constexpr (std::is_same_v<Model, FrameModel>) {
    m.a *= c;
  } else {
    for (auto& g : m.g) g *= c;
  }
  return m;
}

}  // namespace detail

/// Metric (and potential) at time t by cubic Lagrange interpolation through
/// the four samples nearest to t.
template <class Model>
FlowState<Model> state_at(const Trajectory<Model>& traj, double t) {
  using Traits = ModelTraits<Model>;
  const auto& S = traj.states;
  if (S.empty()) throw RejectedInput("flows", "empty trajectory");
  if (t < S.front().t - 1e-12 || t > S.back().t + 1e-12) throw RejectedInput("flows", "time outside trajectory");
  if (S.size() == 1) return S.front();
  std::size_t hi = 1;
  while (hi + 1 < S.size() && S[hi].t < t) ++hi;
  const int width = static_cast<int>(std::min<std::size_t>(4, S.size()));
  long first = static_cast<long>(hi) - 2;
  first = std::clamp<long>(first, 0, static_cast<long>(S.size()) - width);
  const std::size_t nm = Traits::metric_size(S.front().metric);
  const bool with_f = S.front().f.has_value();
  const std::size_t nf = with_f ? Traits::potential_size(S.front().metric) : 0;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(nm + nf);
  double tau_acc = 0.0;
  for (int i = 0; i < width; ++i) {
    double w = 1.0;
    const auto& si = S[first + i];
    for (int j = 0; j < width; ++j)
      if (j != i) w *= (t - S[first + j].t) / (si.t - S[first + j].t);
    Eigen::VectorXd y(nm + nf);
    Traits::pack_metric(si.metric, y.head(nm));
    if (with_f) Traits::pack_potential(*si.f, y.tail(nf));
    acc += w * y;
    tau_acc += w * si.tau;
  }
  FlowState<Model> out = S[first];
  out.t = t;
  Traits::unpack_metric(acc.head(nm), out.metric);
  if (with_f) {
    typename Traits::Potential f{};
    Traits::unpack_potential(acc.tail(nf), f);
    out.f = std::move(f);
  }
  out.tau = std::isfinite(tau_acc) ? tau_acc : S.front().tau;
  return out;
}

/// Map a tau-flow trajectory g(t) to the unnormalized flow
/// g~(s) = c(s) g(t(s)), c(s) = 1 - s/tau, t(s) = -tau ln(1 - s/tau), with
/// tau~(s) = tau - s. Without explicit s samples the images of the stored
/// times are used; otherwise states are interpolated cubically in t.
template <class Model>
Trajectory<Model> reparametrize(const Trajectory<Model>& traj, double tau,
                                std::optional<std::vector<double>> s_samples = std::nullopt) {
  if (traj.variant != FlowVariant::tau_flow) throw RejectedInput("flows", "reparametrize expects a tau-flow trajectory");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw RejectedInput("flows", "tau must be positive and finite");
  Trajectory<Model> out;
  out.variant = FlowVariant::unnormalized;
  out.convention = TauConvention::backward;
  std::vector<double> s;
  if (s_samples) {
    s = *s_samples;
  } else {
    for (const auto& st : traj.states) s.push_back(tau * (1.0 - std::exp(-st.t / tau)));
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(s[i] < tau)) throw RejectedInput("flows", "reparametrization needs s < tau");
    const double c = 1.0 - s[i] / tau;
    const double t = -tau * std::log(c);
    FlowState<Model> src = s_samples ? state_at(traj, t) : traj.states[i];
    FlowState<Model> dst;
    dst.t = s[i];
    dst.metric = detail::scaled_metric(src.metric, c);
    dst.f = src.f;
    dst.tau = tau - s[i];
    out.push(std::move(dst), traj.diagnostics.empty() || s_samples ? Diagnostics{} : traj.diagnostics[i]);
  }
  return out;
}

/// Inverse map: unnormalized trajectory (s, g~) to the tau-flow g(t) = g~(s(t)) / c(s(t)).
template <class Model>
Trajectory<Model> to_tau_flow(const Trajectory<Model>& traj, double tau,
                              std::optional<std::vector<double>> t_samples = std::nullopt) {
  if (traj.variant != FlowVariant::unnormalized) throw RejectedInput("flows", "to_tau_flow expects an unnormalized trajectory");
  Trajectory<Model> out;
  out.variant = FlowVariant::tau_flow;
  out.convention = TauConvention::fixed;
  std::vector<double> t;
  if (t_samples) {
    t = *t_samples;
  } else {
    for (const auto& st : traj.states) {
      if (!(st.t < tau)) throw RejectedInput("flows", "reparametrization needs s < tau");
      t.push_back(-tau * std::log(1.0 - st.t / tau));
    }
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double s = tau * (1.0 - std::exp(-t[i] / tau));
    FlowState<Model> src = t_samples ? state_at(traj, s) : traj.states[i];
    FlowState<Model> dst;
    dst.t = t[i];
    dst.metric = detail::scaled_metric(src.metric, 1.0 / (1.0 - s / tau));
    dst.f = src.f;
    dst.tau = tau;
    out.push(std::move(dst));
  }
  return out;
}

}  // namespace rflow
