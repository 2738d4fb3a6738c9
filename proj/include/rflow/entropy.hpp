#pragma once

// W-functional, mu-invariant, soliton defect and the monotonicity audit.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <vector>

#include "rflow/constraint.hpp"
#include "rflow/flows.hpp"
#include "rflow/frame.hpp"
#include "rflow/geometry.hpp"

namespace rflow {

/// Constraint tolerance required on entry to w_functional.
inline constexpr double kConstraintTolerance = 1e-8;

namespace detail {

inline void require_constraint(double residual) {
  if (!(residual <= kConstraintTolerance))
    throw RejectedInput("entropy", "potential violates the constraint (residual " + std::to_string(residual) + ")");
}

/// Per-axis forward and backward differences of f; used by the quadrature of
/// |grad f|^2 so that checkerboard modes are seen by W.
template <int Dim>
struct OneSided {
  std::array<ScalarField<Dim>, Dim> fwd, bwd;
};

template <int Dim>
OneSided<Dim> one_sided(const Grid<Dim>& grid, const ScalarField<Dim>& f) {
  OneSided<Dim> d;
  for (int a = 0; a < Dim; ++a) {
    const double s = 1.0 / grid.spacing(a);
    d.fwd[a].resize(f.size());
    d.bwd[a].resize(f.size());
    for (std::size_t x = 0; x < f.size(); ++x) {
      d.fwd[a][x] = s * (f[grid.shift(x, a, 1)] - f[x]);
      d.bwd[a][x] = s * (f[x] - f[grid.shift(x, a, -1)]);
    }
  }
  return d;
}

}  // namespace detail

/// 1/2 sum over forward and backward differences of g^ij d_i f d_j f.
template <int Dim>
ScalarField<Dim> gradient_norm_sq_one_sided(const MetricData<Dim>& md, const ScalarField<Dim>& f) {
  const auto d = detail::one_sided(md.grid(), f);
  ScalarField<Dim> r(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) {
    Vec<Dim> p, m;
    for (int a = 0; a < Dim; ++a) {
      p(a) = d.fwd[a][x];
      m(a) = d.bwd[a][x];
    }
    r[x] = 0.5 * (p.dot(md.ginv[x] * p) + m.dot(md.ginv[x] * m));
  }
  return r;
}

// ---------------------------------------------------------------------------
// W-functional

template <int Dim>
double w_functional(const MetricData<Dim>& md, const ScalarField<Dim>& f, double tau,
                    const ScalarField<Dim>* R_cached = nullptr) {
  const GridModel<Dim>& m = *md.model;
  detail::require_constraint(constraint_residual(m, f, tau));
  const ScalarField<Dim> R = R_cached ? *R_cached : scalar_curvature(md);
  const auto grad2 = gradient_norm_sq_one_sided(md, f);
  const auto dens = volume_density(m);
  double s = 0.0;
  for (std::size_t x = 0; x < f.size(); ++x)
    s += std::exp(-f[x]) * (tau * (grad2[x] + R[x]) + f[x] - Dim) * dens[x];
  return gaussian_prefactor(Dim, tau) * s * m.grid.cell_volume();
}

template <int Dim>
double w_functional(const GridModel<Dim>& m, const ScalarField<Dim>& f, double tau) {
  return w_functional(MetricData<Dim>(m), f, tau);
}

/// Homogeneous model with constant f: W = tau R + f - n.
inline double w_functional(const FrameModel& m, double f, double tau) {
  detail::require_constraint(constraint_residual(m, f, tau));
  return tau * scalar_curvature(m) + f - m.n;
}

/// Gradient of the discrete W with respect to f, taken in L^2 of the
/// probability measure dm = (4 pi tau)^{-n/2} e^{-f} dV and projected onto
/// the constraint tangent (weighted mean removed). In the continuum limit
/// it is tau (|grad f|^2 - 2 Delta f - R) - f + n + 1 minus its mean.
template <int Dim>
ScalarField<Dim> w_gradient(const MetricData<Dim>& md, const ScalarField<Dim>& f, double tau,
                            const ScalarField<Dim>& R) {
  const GridModel<Dim>& m = *md.model;
  const Grid<Dim>& grid = m.grid;
  const auto dens = volume_density(m);
  const auto d = detail::one_sided(grid, f);
  const auto grad2 = gradient_norm_sq_one_sided(md, f);
  std::vector<double> w(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) w[x] = std::exp(-f[x]) * dens[x];

  // Pointwise part, already divided by the weight.
  ScalarField<Dim> G(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) G[x] = 1.0 - (tau * (grad2[x] + R[x]) + f[x] - Dim);
  // Flux part: -tau sum_sigma D^{-sigma}_i (w g^ij D^sigma_j f), divided by w.
  for (int sigma = 0; sigma < 2; ++sigma) {
    const auto& Ds = sigma == 0 ? d.fwd : d.bwd;
    std::array<std::vector<double>, Dim> flux;
    for (int i = 0; i < Dim; ++i) flux[i].resize(f.size());
    for (std::size_t x = 0; x < f.size(); ++x)
      for (int i = 0; i < Dim; ++i) {
        double s = 0.0;
        for (int j = 0; j < Dim; ++j) s += md.ginv[x](i, j) * Ds[j][x];
        flux[i][x] = w[x] * s;
      }
    for (int i = 0; i < Dim; ++i) {
      const double inv = 1.0 / grid.spacing(i);
      for (std::size_t x = 0; x < f.size(); ++x) {
        // Backward difference for the forward flux and vice versa.
        const double div = sigma == 0 ? inv * (flux[i][x] - flux[i][grid.shift(x, i, -1)])
                                      : inv * (flux[i][grid.shift(x, i, 1)] - flux[i][x]);
        G[x] -= tau * div / w[x];
      }
    }
  }
  double num = 0.0, den = 0.0;
  for (std::size_t x = 0; x < f.size(); ++x) {
    num += G[x] * w[x];
    den += w[x];
  }
  for (auto& v : G) v -= num / den;
  return G;
}

/// L^2(dm) norm of a scalar field.
template <int Dim>
double weighted_l2(const GridModel<Dim>& m, const ScalarField<Dim>& f, double tau, const ScalarField<Dim>& u) {
  const auto dens = volume_density(m);
  double s = 0.0;
  for (std::size_t x = 0; x < u.size(); ++x) s += u[x] * u[x] * std::exp(-f[x]) * dens[x];
  return std::sqrt(gaussian_prefactor(Dim, tau) * s * m.grid.cell_volume());
}

// ---------------------------------------------------------------------------
// mu-invariant

struct MuOptions {
  double tol = 1e-8;
  long max_iterations = 100000;
};

template <class Potential>
struct MuResult {
  Potential f;
  double mu = 0.0;
  long iterations = 0;
  double gradient_norm = 0.0;
};

/// Projected gradient descent of W over constrained f, started from f0
/// (constant when omitted), with backtracking on the step. The step is
/// capped by the explicit stability limit of the f-Laplacian.
template <int Dim>
MuResult<ScalarField<Dim>> minimize_mu(const GridModel<Dim>& m, double tau,
                                        std::optional<ScalarField<Dim>> f0 = std::nullopt,
                                        const MuOptions& opt = {}) {
  gaussian_prefactor(Dim, tau);
  const MetricData<Dim> md(m);
  const ScalarField<Dim> R = scalar_curvature(md);
  ScalarField<Dim> f = normalize_f(m, f0 ? *f0 : ScalarField<Dim>(m.size(), 0.0), tau);
  double W = w_functional(md, f, tau, &R);

  double lam = 0.0;
  for (const auto& gi : md.ginv) lam = std::max(lam, Eigen::SelfAdjointEigenSolver<Mat<Dim>>(gi).eigenvalues().maxCoeff());
  double K = 0.0;
  for (int a = 0; a < Dim; ++a) K += 4.0 / (m.grid.spacing(a) * m.grid.spacing(a));
  const double alpha_max = 1.0 / (2.0 * tau * lam * K + 1.0);
  double alpha = alpha_max;

  MuResult<ScalarField<Dim>> res;
  for (long it = 0; it < opt.max_iterations; ++it) {
    const auto G = w_gradient(md, f, tau, R);
    const double gn = weighted_l2(m, f, tau, G);
    res.iterations = it;
    res.gradient_norm = gn;
    if (gn < opt.tol) {
      res.f = std::move(f);
      res.mu = W;
      return res;
    }
    if (alpha_max * gn * gn < 1e-10 * (1.0 + std::abs(W))) {
      // Decreases are now at round-off level, so W cannot steer the step;
      // the capped step is a contraction near a nondegenerate minimum.
      f = normalize_f(m, lincomb(1.0, f, -alpha_max, G), tau);
      W = w_functional(md, f, tau, &R);
      continue;
    }
    while (true) {
      auto trial = normalize_f(m, lincomb(1.0, f, -alpha, G), tau);
      const double Wt = w_functional(md, trial, tau, &R);
      // Round-off slack keeps the fixed-step regime alive once decreases
      // fall below machine resolution.
      if (Wt <= W - 1e-4 * alpha * gn * gn + 4e-16 * (1.0 + std::abs(W))) {
        f = std::move(trial);
        W = Wt;
        alpha = std::min(alpha_max, 1.5 * alpha);
        break;
      }
      alpha *= 0.5;
      if (alpha < 1e-14 * alpha_max)
        throw NonConvergence("entropy", "line search stalled in minimize_mu", gn, f);
    }
  }
  throw NonConvergence("entropy", "minimize_mu hit the iteration limit", res.gradient_norm, f);
}

/// Homogeneous model: the constrained gradient at constant f is spatially
/// constant and is removed by the projection, so the constant potential is
/// already critical.
inline MuResult<double> minimize_mu(const FrameModel& m, double tau, std::optional<double> f0 = std::nullopt,
                                    const MuOptions& = {}) {
  MuResult<double> res;
  res.f = normalize_f(m, f0.value_or(0.0), tau);
  res.mu = w_functional(m, res.f, tau);
  return res;
}

// ---------------------------------------------------------------------------
// Soliton defect

/// D = Ric + nabla nabla f - g / (2 tau).
template <int Dim>
SymTensorField<Dim> soliton_defect(const MetricData<Dim>& md, const ScalarField<Dim>& f, double tau) {
  auto D = ricci(md);
  const auto H = hessian(md, f);
  for (std::size_t x = 0; x < D.size(); ++x) {
    D[x] += H[x];
    if (std::isfinite(tau)) D[x] -= md.model->g[x] / (2.0 * tau);
  }
  return D;
}

template <int Dim>
SymTensorField<Dim> soliton_defect(const GridModel<Dim>& m, const ScalarField<Dim>& f, double tau) {
  return soliton_defect(MetricData<Dim>(m), f, tau);
}

inline Eigen::MatrixXd soliton_defect(const FrameModel& m, double, double tau) {
  Eigen::MatrixXd D = ricci(m);
  if (std::isfinite(tau)) D.diagonal() -= m.a / (2.0 * tau);
  return D;
}

/// int |D|^2_g dm.
template <int Dim>
double defect_weighted_sq(const GridModel<Dim>& m, const ScalarField<Dim>& f, double tau) {
  const MetricData<Dim> md(m);
  const auto D = soliton_defect(md, f, tau);
  const auto dens = volume_density(m);
  double s = 0.0;
  for (std::size_t x = 0; x < f.size(); ++x)
    s += pointwise_inner(D[x], D[x], m.g[x], md.ginv[x]) * std::exp(-f[x]) * dens[x];
  return gaussian_prefactor(Dim, tau) * s * m.grid.cell_volume();
}

inline double defect_weighted_sq(const FrameModel& m, double f, double tau) {
  const Eigen::MatrixXd D = soliton_defect(m, f, tau);
  double s = 0.0;
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < m.n; ++j) s += D(i, j) * D(i, j) / (m.a(i) * m.a(j));
  return s * constraint_integral(m, f, tau);
}

// ---------------------------------------------------------------------------
// Monotonicity audit

struct EntropyRecord {
  double t = 0.0;
  double W = 0.0;
  std::optional<double> mu;
  double defect_l2 = 0.0;
  double dWdt_numeric = 0.0;
  double dWdt_formula = 0.0;
  bool flagged = false;  // numeric dW/dt below -tol
};

struct MonotonicityReport {
  std::vector<EntropyRecord> records;
  bool nondecreasing = true;
  long violations = 0;
  double min_formula = 0.0;
  double max_abs_mismatch = 0.0;
  double max_rel_mismatch = 0.0;  // |num - formula| / max(|formula|, floor)
};

/// Per-sample W, three-point difference quotient of W in t, and the
/// right-hand side 2 tau int |D|^2 dm. Requires the potential on every state.
template <class Model>
MonotonicityReport monotonicity_report(const Trajectory<Model>& traj, double tol = 1e-10, double floor = 1e-12) {
  const auto& S = traj.states;
  if (S.size() < 3) throw InsufficientData("entropy", "monotonicity audit needs at least three samples");
  MonotonicityReport rep;
  rep.records.resize(S.size());
  for (std::size_t i = 0; i < S.size(); ++i) {
    if (!S[i].f) throw RejectedInput("entropy", "trajectory carries no potential");
    auto& r = rep.records[i];
    r.t = S[i].t;
    r.W = w_functional(S[i].metric, *S[i].f, S[i].tau);
    const double d2 = defect_weighted_sq(S[i].metric, *S[i].f, S[i].tau);
    r.defect_l2 = std::sqrt(d2);
    r.dWdt_formula = 2.0 * S[i].tau * d2;
  }
  // Second-order difference weights on three (possibly uneven) nodes.
  auto deriv = [&](std::size_t a, std::size_t b, std::size_t c, std::size_t at) {
    const double ta = S[a].t, tb = S[b].t, tc = S[c].t, t = S[at].t;
    const double wa = ((t - tb) + (t - tc)) / ((ta - tb) * (ta - tc));
    const double wb = ((t - ta) + (t - tc)) / ((tb - ta) * (tb - tc));
    const double wc = ((t - ta) + (t - tb)) / ((tc - ta) * (tc - tb));
    return wa * rep.records[a].W + wb * rep.records[b].W + wc * rep.records[c].W;
  };
  const std::size_t n = S.size();
  rep.min_formula = rep.records[0].dWdt_formula;
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = rep.records[i];
    if (i == 0) r.dWdt_numeric = deriv(0, 1, 2, 0);
    else if (i + 1 == n) r.dWdt_numeric = deriv(n - 3, n - 2, n - 1, n - 1);
    else r.dWdt_numeric = deriv(i - 1, i, i + 1, i);
    r.flagged = r.dWdt_numeric < -tol;
    if (r.flagged) ++rep.violations;
    if (i > 0 && r.W < rep.records[i - 1].W - tol) rep.nondecreasing = false;
    rep.min_formula = std::min(rep.min_formula, r.dWdt_formula);
    const double mis = std::abs(r.dWdt_numeric - r.dWdt_formula);
    rep.max_abs_mismatch = std::max(rep.max_abs_mismatch, mis);
    rep.max_rel_mismatch = std::max(rep.max_rel_mismatch, mis / std::max(std::abs(r.dWdt_formula), floor));
  }
  return rep;
}

}  // namespace rflow
