#pragma once

// Linearized operator, spectra, the growing/decaying/neutral split, the
// integrability projection onto the flat family, interval tests and
// exponential-rate fits.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "rflow/flows.hpp"
#include "rflow/frame.hpp"
#include "rflow/geometry.hpp"

namespace rflow {

/// Dense matrix of a linear operator on a flattened perturbation space.
/// `weights` define the inner product <u, v> = sum w_i u_i v_i; for grid
/// tensors it is the L^2 pairing (off-diagonal components count twice).
struct LinearOperator {
  Eigen::MatrixXd A;
  Eigen::VectorXd weights;
  std::string background;
  double tau = kInfiniteTau;

  Eigen::Index dimension() const { return A.rows(); }
};

// ---------------------------------------------------------------------------
// Flattening of symmetric tensor fields: node-major, upper triangle per node.

template <int Dim>
Eigen::VectorXd flatten(const SymTensorField<Dim>& T) {
  constexpr int c = Dim * (Dim + 1) / 2;
  Eigen::VectorXd v(static_cast<Eigen::Index>(T.size()) * c);
  Eigen::Index p = 0;
  for (const auto& M : T)
    for (int i = 0; i < Dim; ++i)
      for (int j = i; j < Dim; ++j) v(p++) = M(i, j);
  return v;
}

template <int Dim>
SymTensorField<Dim> unflatten(const Grid<Dim>& grid, const Eigen::VectorXd& v) {
  constexpr int c = Dim * (Dim + 1) / 2;
  if (v.size() != static_cast<Eigen::Index>(grid.size()) * c) throw RejectedInput("stability", "vector size does not match grid");
  SymTensorField<Dim> T(grid.size());
  Eigen::Index p = 0;
  for (auto& M : T)
    for (int i = 0; i < Dim; ++i)
      for (int j = i; j < Dim; ++j) {
        M(i, j) = v(p++);
        M(j, i) = M(i, j);
      }
  return T;
}

template <int Dim>
Eigen::VectorXd tensor_weights(const Grid<Dim>& grid) {
  constexpr int c = Dim * (Dim + 1) / 2;
  Eigen::VectorXd w(static_cast<Eigen::Index>(grid.size()) * c);
  Eigen::Index p = 0;
  for (std::size_t x = 0; x < grid.size(); ++x)
    for (int i = 0; i < Dim; ++i)
      for (int j = i; j < Dim; ++j) w(p++) = (i == j ? 1.0 : 2.0) * grid.cell_volume();
  return w;
}

/// Linearization of the tau-flow in DeTurck gauge at background h:
/// L k = Delta_L k + k / tau, assembled column by column.
template <int Dim>
LinearOperator assemble_linearized_pde(const GridModel<Dim>& h, double tau) {
  if (!(tau > 0.0)) throw RejectedInput("stability", "tau must be positive (or infinite)");
  const MetricData<Dim> md(h);
  constexpr int c = Dim * (Dim + 1) / 2;
  const Eigen::Index n = static_cast<Eigen::Index>(h.size()) * c;
  LinearOperator L;
  L.A.resize(n, n);
  L.weights = tensor_weights(h.grid);
  L.tau = tau;
  L.background = is_constant_coefficient(h) ? "flat torus" : "torus";
  SymTensorField<Dim> e(h.size(), Mat<Dim>::Zero());
  for (Eigen::Index col = 0; col < n; ++col) {
    const std::size_t x = static_cast<std::size_t>(col / c);
    int r = static_cast<int>(col % c), i = 0;
    while (r >= Dim - i) r -= Dim - i++;
    const int j = i + r;
    e[x](i, j) = e[x](j, i) = 1.0;
    L.A.col(col) = flatten(lichnerowicz(md, e));
    e[x](i, j) = e[x](j, i) = 0.0;
  }
  if (std::isfinite(tau)) L.A.diagonal().array() += 1.0 / tau;
  return L;
}

/// Exact eigenvalues of the assembled operator on a constant-coefficient
/// background with the identity metric: -sum_a 4 sin^2(pi m_a / N_a) / h_a^2
/// + 1/tau, each with multiplicity Dim (Dim + 1) / 2. Sorted ascending.
template <int Dim>
std::vector<double> fourier_oracle(const Grid<Dim>& grid, double tau) {
  constexpr int c = Dim * (Dim + 1) / 2;
  std::vector<double> ev;
  ev.reserve(grid.size() * c);
  for (std::size_t x = 0; x < grid.size(); ++x) {
    double lam = std::isfinite(tau) ? 1.0 / tau : 0.0;
    for (int a = 0; a < Dim; ++a) {
      const double s = std::sin(std::numbers::pi * grid.coord(x, a) / grid.dims()[a]);
      lam -= 4.0 * s * s / (grid.spacing(a) * grid.spacing(a));
    }
    for (int k = 0; k < c; ++k) ev.push_back(lam);
  }
  std::sort(ev.begin(), ev.end());
  return ev;
}

/// Smallest nonzero |lambda| of the oracle spectrum.
template <int Dim>
double fourier_spectral_gap(const Grid<Dim>& grid, double tau, double zero_tol = 1e-12) {
  double gap = std::numeric_limits<double>::infinity();
  for (double v : fourier_oracle(grid, tau))
    if (std::abs(v) > zero_tol) gap = std::min(gap, std::abs(v));
  return gap;
}

inline double default_neutral_tolerance(double gap_estimate) { return gap_estimate / 10.0; }

/// Central finite-difference Jacobian of the frame-model flow at `bg`,
/// step 1e-6 times the coefficient scale.
inline LinearOperator jacobian_ode(const FlowSpec<FrameModel>& spec, const FrameModel& bg) {
  validate(bg, "stability");
  auto rhs = [&](const FrameModel& m) -> Eigen::VectorXd {
    switch (spec.variant) {
      case FlowVariant::tau_flow: return rhs_tau_flow(m, spec.tau);
      case FlowVariant::unnormalized: return rhs_unnormalized(m);
      case FlowVariant::deturck: break;
    }
    throw RejectedInput("stability", "frame Jacobian supports the tau-flow and the unnormalized flow");
  };
  const int n = bg.n;
  LinearOperator L;
  L.A.resize(n, n);
  L.weights = Eigen::VectorXd::Ones(n);
  L.tau = spec.tau;
  L.background = "frame";
  for (int k = 0; k < n; ++k) {
    const double step = 1e-6 * std::max(1.0, std::abs(bg.a(k)));
    FrameModel p = bg, m = bg;
    p.a(k) += step;
    m.a(k) -= step;
    L.A.col(k) = (rhs(p) - rhs(m)) / (2.0 * step);
  }
  return L;
}

// ---------------------------------------------------------------------------
// Spectra

enum class ModeClass { grow, neutral, decay };

/// Classification is by forward-time behaviour of exp(L t): Re lambda > 0
/// grows. Written as a sum of a_k e^{-lambda_k t}, a growing mode has
/// lambda_k < 0, i.e. lambda_k = -Re lambda here.
struct SpectralReport {
  Eigen::VectorXcd eigenvalues;  // ascending real part
  Eigen::MatrixXcd modes;        // columns, matching eigenvalues
  Eigen::VectorXd weights;
  std::vector<ModeClass> classes;
  double neutral_tolerance = 0.0;
  long n_grow = 0, n_neutral = 0, n_decay = 0;
  double gap = 0.0;
  bool self_adjoint = false;
  std::string convention = "forward-time: Re(lambda) > 0 grows; expansion a_k e^{-lambda_k t} has lambda_k = -Re(lambda)";
};

inline SpectralReport spectrum(const LinearOperator& L, double neutral_tolerance) {
  const Eigen::Index n = L.dimension();
  if (n == 0 || L.A.cols() != n) throw RejectedInput("stability", "operator must be square and nonempty");
  if (!L.A.allFinite()) throw RejectedInput("stability", "operator has non-finite entries");
  if (!(neutral_tolerance > 0.0)) throw RejectedInput("stability", "neutral tolerance must be positive");
  const Eigen::VectorXd w = L.weights.size() == n ? L.weights : Eigen::VectorXd::Ones(n);
  const Eigen::VectorXd sw = w.cwiseSqrt();
  // B = W^{1/2} A W^{-1/2} is symmetric iff A is self-adjoint for <.,.>_W.
  const Eigen::MatrixXd B = sw.asDiagonal() * L.A * sw.cwiseInverse().asDiagonal();
  const double scale = std::max(1.0, B.cwiseAbs().maxCoeff());
  SpectralReport rep;
  rep.weights = w;
  rep.neutral_tolerance = neutral_tolerance;
  rep.self_adjoint = (B - B.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale;
  if (rep.self_adjoint) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (B + B.transpose()));
    if (es.info() != Eigen::Success) throw SolverFailure("stability", "symmetric eigensolver failed");
    rep.eigenvalues = es.eigenvalues().cast<std::complex<double>>();
    rep.modes = (sw.cwiseInverse().asDiagonal() * es.eigenvectors()).cast<std::complex<double>>();
  } else {
    Eigen::EigenSolver<Eigen::MatrixXd> es(L.A);
    if (es.info() != Eigen::Success) throw SolverFailure("stability", "general eigensolver failed");
    std::vector<Eigen::Index> order(n);
    for (Eigen::Index i = 0; i < n; ++i) order[i] = i;
    const Eigen::VectorXcd ev = es.eigenvalues();
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ev(a).real() < ev(b).real(); });
    rep.eigenvalues.resize(n);
    rep.modes.resize(n, n);
    const Eigen::MatrixXcd V = es.eigenvectors();
    for (Eigen::Index i = 0; i < n; ++i) {
      rep.eigenvalues(i) = ev(order[i]);
      rep.modes.col(i) = V.col(order[i]);
    }
  }
  rep.gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double re = rep.eigenvalues(i).real();
    ModeClass c = ModeClass::neutral;
    if (re > neutral_tolerance) c = ModeClass::grow;
    else if (re < -neutral_tolerance) c = ModeClass::decay;
    rep.classes.push_back(c);
    if (c == ModeClass::grow) ++rep.n_grow;
    else if (c == ModeClass::decay) ++rep.n_decay;
    else ++rep.n_neutral;
    if (c != ModeClass::neutral) rep.gap = std::min(rep.gap, std::abs(re));
  }
  return rep;
}

struct TrichotomySplit {
  Eigen::VectorXd up, down, neutral;
};

/// Expansion of F in the eigenbasis, grouped by class.
inline TrichotomySplit trichotomy_split(const Eigen::VectorXd& F, const SpectralReport& rep) {
  const Eigen::Index n = rep.modes.rows();
  if (F.size() != n) throw RejectedInput("stability", "perturbation size does not match the operator");
  Eigen::VectorXcd coef;
  if (rep.self_adjoint) {
    coef = rep.modes.adjoint() * (rep.weights.cast<std::complex<double>>().asDiagonal() * F.cast<std::complex<double>>());
  } else {
    Eigen::PartialPivLU<Eigen::MatrixXcd> lu(rep.modes);
    coef = lu.solve(F.cast<std::complex<double>>());
  }
  Eigen::VectorXcd up = Eigen::VectorXcd::Zero(n), down = up, neutral = up;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXcd part = coef(i) * rep.modes.col(i);
    switch (rep.classes[static_cast<std::size_t>(i)]) {
      case ModeClass::grow: up += part; break;
      case ModeClass::decay: down += part; break;
      case ModeClass::neutral: neutral += part; break;
    }
  }
  return {up.real(), down.real(), neutral.real()};
}

/// W-orthogonal projection onto the neutral eigenspace.
inline Eigen::VectorXd project_neutral(const Eigen::VectorXd& k, const SpectralReport& rep) {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < rep.classes.size(); ++i)
    if (rep.classes[i] == ModeClass::neutral) idx.push_back(static_cast<Eigen::Index>(i));
  if (idx.empty()) return Eigen::VectorXd::Zero(k.size());
  Eigen::MatrixXd N(k.size(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) N.col(static_cast<Eigen::Index>(c)) = rep.modes.col(idx[c]).real();
  const Eigen::MatrixXd WN = rep.weights.asDiagonal() * N;
  const Eigen::MatrixXd G = N.transpose() * WN;
  return N * G.ldlt().solve(WN.transpose() * k);
}

/// Time-averaged neutral projection of a sampled series (trapezoid weights).
inline Eigen::VectorXd project_neutral(const std::vector<double>& t, const std::vector<Eigen::VectorXd>& series,
                                       const SpectralReport& rep) {
  if (t.size() != series.size() || t.empty()) throw RejectedInput("stability", "series and times differ in length");
  if (t.size() == 1) return project_neutral(series.front(), rep);
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(series.front().size());
  for (std::size_t i = 1; i < t.size(); ++i) avg += 0.5 * (t[i] - t[i - 1]) * (series[i] + series[i - 1]);
  return project_neutral(Eigen::VectorXd(avg / (t.back() - t.front())), rep);
}

inline double weighted_norm(const Eigen::VectorXd& v, const Eigen::VectorXd& w) {
  return std::sqrt(v.dot(w.asDiagonal() * v));
}

// ---------------------------------------------------------------------------
// Integrability: the flat family

template <int Dim>
struct NearestSoliton {
  GridModel<Dim> g1;
  double distance = 0.0;         // ||g1 - h0||_{L^2}
  double projection_norm = 0.0;  // ||pi (g - h0)||_{L^2}
  double ratio = 0.0;            // distance / projection_norm
  bool factor_two_holds = false;
};

/// g1 = h0 + mean(g - h0): the constant-coefficient metric whose difference
/// from g has no neutral part. With a report the projection pi is the
/// spectral one, otherwise it is the spatial average.
template <int Dim>
NearestSoliton<Dim> nearest_soliton_in_family(const GridModel<Dim>& g, const GridModel<Dim>& h0,
                                              const SpectralReport* rep = nullptr) {
  if (!(g.grid == h0.grid)) throw RejectedInput("stability", "grid mismatch");
  if (!is_constant_coefficient(h0)) throw RejectedInput("stability", "h0 must be a flat (constant) metric");
  const auto diff = lincomb(1.0, g.g, -1.0, h0.g);
  const Mat<Dim> mean = grid_mean(diff);
  NearestSoliton<Dim> out{GridModel<Dim>::constant(g.grid, h0.g.front() + mean)};
  validate(out.g1, "stability");
  const Eigen::VectorXd w = tensor_weights(g.grid);
  out.distance = weighted_norm(flatten(lincomb(1.0, out.g1.g, -1.0, h0.g)), w);
  if (rep) {
    out.projection_norm = weighted_norm(project_neutral(flatten(diff), *rep), rep->weights);
  } else {
    out.projection_norm = weighted_norm(flatten(SymTensorField<Dim>(g.size(), mean)), w);
  }
  out.ratio = out.projection_norm > 0.0 ? out.distance / out.projection_norm : (out.distance == 0.0 ? 0.0 : kInfiniteTau);
  out.factor_two_holds = out.distance <= 2.0 * out.projection_norm * (1.0 + 1e-12) + 1e-300;
  return out;
}

/// g1 re-chosen at the start of every length-L cylinder of the trajectory.
template <int Dim>
std::vector<GridModel<Dim>> g1_per_cylinder(const Trajectory<GridModel<Dim>>& traj, const GridModel<Dim>& h0, double L) {
  if (!(L > 0.0) || traj.empty()) throw RejectedInput("stability", "need a trajectory and L > 0");
  std::vector<GridModel<Dim>> out;
  for (double t0 = traj.states.front().t; t0 < traj.states.back().t - 1e-12; t0 += L)
    out.push_back(nearest_soliton_in_family(state_at(traj, t0).metric, h0).g1);
  return out;
}

// ---------------------------------------------------------------------------
// Interval tests

struct GrowthDecayVerdict {
  double sup0 = 0.0, sup1 = 0.0;
  double alpha = 0.0;
  bool growth_holds = false;     // sup1 >= alpha sup0
  bool decay_holds = false;      // sup1 <= sup0 / alpha
  double growth_defect = 0.0;    // sup1 / (alpha sup0) - 1
  double decay_defect = 0.0;     // alpha sup1 / sup0 - 1
};

inline double series_sup(const std::vector<double>& s) {
  if (s.empty()) throw InsufficientData("stability", "empty norm series");
  return *std::max_element(s.begin(), s.end());
}

/// Both growth/decay inequalities on sup-norm series sampled
/// over [0, L] and [L, 2L]. `tol` is the relative slack of the comparisons.
inline GrowthDecayVerdict growth_decay_check(const std::vector<double>& first, const std::vector<double>& second,
                                             double alpha, double tol = 1e-12) {
  if (!(alpha > 1.0)) throw RejectedInput("stability", "alpha must exceed 1");
  GrowthDecayVerdict v;
  v.alpha = alpha;
  v.sup0 = series_sup(first);
  v.sup1 = series_sup(second);
  v.growth_defect = v.sup1 / (alpha * v.sup0) - 1.0;
  v.decay_defect = alpha * v.sup1 / v.sup0 - 1.0;
  v.growth_holds = v.growth_defect >= -tol;
  v.decay_holds = v.decay_defect <= tol;
  return v;
}

enum class IntervalVerdict { growth_propagates, decay_propagates, violation };

inline const char* to_string(IntervalVerdict v) {
  switch (v) {
    case IntervalVerdict::growth_propagates: return "growth-propagates";
    case IntervalVerdict::decay_propagates: return "decay-propagates";
    case IntervalVerdict::violation: return "violation";
  }
  return "?";
}

struct ThreeIntervalResult {
  double sup0 = 0.0, sup1 = 0.0, sup2 = 0.0;
  bool growth_premise = false, growth_conclusion = false;  // sup1 >= b sup0 ; sup2 >= b sup1
  bool decay_premise = false, decay_conclusion = false;    // sup2 <= sup1 / b ; sup1 <= sup0 / b
  IntervalVerdict verdict = IntervalVerdict::violation;
};

/// Three consecutive length-L intervals. A violation is a failed
/// implication, or, when `neutral_free` (F_0 = 0), neither conclusion.
inline ThreeIntervalResult three_interval_test(const std::vector<double>& s0, const std::vector<double>& s1,
                                               const std::vector<double>& s2, double beta, bool neutral_free = true,
                                               double tol = 1e-12) {
  if (!(beta > 1.0)) throw RejectedInput("stability", "beta must exceed 1");
  ThreeIntervalResult r;
  r.sup0 = series_sup(s0);
  r.sup1 = series_sup(s1);
  r.sup2 = series_sup(s2);
  const double up = 1.0 + tol, lo = 1.0 - tol;
  r.growth_premise = r.sup1 >= beta * r.sup0 * lo;
  r.growth_conclusion = r.sup2 >= beta * r.sup1 * lo;
  r.decay_premise = r.sup2 * beta <= r.sup1 * up;
  r.decay_conclusion = r.sup1 * beta <= r.sup0 * up;
  const bool implications = (!r.growth_premise || r.growth_conclusion) && (!r.decay_premise || r.decay_conclusion);
  const bool one_of = r.growth_conclusion || r.decay_conclusion;
  if (!implications || (neutral_free && !one_of)) r.verdict = IntervalVerdict::violation;
  else if (r.growth_conclusion && (r.growth_premise || !r.decay_conclusion)) r.verdict = IntervalVerdict::growth_propagates;
  else if (r.decay_conclusion) r.verdict = IntervalVerdict::decay_propagates;
  else r.verdict = IntervalVerdict::growth_propagates;  // only reachable with neutral parts allowed
  return r;
}

// ---------------------------------------------------------------------------
// Nonlinear remainder and rate fits

struct ResidualSample {
  double t = 0.0;
  double k_sup = 0.0;
  double remainder_sup = 0.0;  // |dk/dt - L k|
  double proxy = 0.0;          // (|g1 - h0| + |k|) |D^2 k| + (|D(g1 - h0)| + |D k|) |D k|
};

struct ResidualMonitor {
  std::vector<ResidualSample> samples;
  double fitted_C = 0.0;  // max remainder / proxy over samples with proxy > 0
  bool bounded = false;   // every sample satisfies remainder <= fitted_C proxy
};

namespace detail {

template <int Dim>
std::array<double, 3> derivative_sups(const Grid<Dim>& grid, const SymTensorField<Dim>& k) {
  std::array<double, 3> s{max_abs(k), 0.0, 0.0};
  for (int a = 0; a < Dim; ++a) {
    s[1] = std::max(s[1], max_abs(diff(grid, k, a)));
    for (int b = a; b < Dim; ++b) s[2] = std::max(s[2], max_abs(diff2(grid, k, a, b)));
  }
  return s;
}

}  // namespace detail

/// Along a DeTurck trajectory with background h0, k = g - g1: the remainder
/// rhs(g) - rhs(g1) - (Delta_L(h0) k + k / tau), and the quadratic proxy of
/// its bound. rhs(g1) is the drift of the family itself (g1 / tau).
template <int Dim>
ResidualMonitor residual_evolution_monitor(const Trajectory<GridModel<Dim>>& traj, const GridModel<Dim>& g1,
                                           const GridModel<Dim>& h0, double tau) {
  const MetricData<Dim> hd(h0);
  const auto base = detail::derivative_sups(h0.grid, lincomb(1.0, g1.g, -1.0, h0.g));
  const auto rhs1 = rhs_deturck(MetricData<Dim>(g1), hd, tau);
  ResidualMonitor mon;
  for (const auto& s : traj.states) {
    const auto k = lincomb(1.0, s.metric.g, -1.0, g1.g);
    const auto rhs = lincomb(1.0, rhs_deturck(MetricData<Dim>(s.metric), hd, tau), -1.0, rhs1);
    auto lin = lichnerowicz(hd, k);
    if (std::isfinite(tau))
      for (std::size_t x = 0; x < k.size(); ++x) lin[x] += k[x] / tau;
    const auto d = detail::derivative_sups(h0.grid, k);
    ResidualSample r;
    r.t = s.t;
    r.k_sup = d[0];
    r.remainder_sup = max_abs(lincomb(1.0, rhs, -1.0, lin));
    r.proxy = (base[0] + d[0]) * d[2] + (base[1] + d[1]) * d[1];
    mon.samples.push_back(r);
    if (r.proxy > 0.0) mon.fitted_C = std::max(mon.fitted_C, r.remainder_sup / r.proxy);
  }
  mon.bounded = true;
  for (const auto& r : mon.samples)
    if (r.remainder_sup > mon.fitted_C * r.proxy * (1.0 + 1e-12) + 1e-300) mon.bounded = false;
  return mon;
}

struct RateFit {
  double C = 0.0;
  double c = 0.0;
  double residual = 0.0;  // RMS of the log-linear fit
  std::size_t used = 0;
};

/// Least-squares fit log y = log C - c t on the last half of the samples
/// above `floor`.
inline RateFit fit_exponential_rate(const std::vector<double>& t, const std::vector<double>& y, double floor = 1e-12) {
  if (t.size() != y.size()) throw RejectedInput("stability", "times and values differ in length");
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] > floor && std::isfinite(y[i])) ok.push_back(i);
  const std::size_t start = ok.size() / 2;
  if (ok.size() - start < 5) throw InsufficientData("stability", "fewer than 5 usable samples for the rate fit");
  const std::size_t n = ok.size() - start;
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = ok[start + i];
    A(i, 0) = 1.0;
    A(i, 1) = -t[j];
    b(i) = std::log(y[j]);
  }
  const Eigen::Vector2d p = A.colPivHouseholderQr().solve(b);
  RateFit f;
  f.C = std::exp(p(0));
  f.c = p(1);
  f.residual = std::sqrt((A * p - b).squaredNorm() / static_cast<double>(n));
  f.used = n;
  return f;
}

}  // namespace rflow
