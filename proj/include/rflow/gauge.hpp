#pragma once

// Harmonic-map gauge for the torus testbed: the heat flow of F = phi - Id
// against a flat background, the diffeomorphism ODE, energy densities, the
// divergence-gauge construction and the gauge-equivalence audit.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <vector>

#include "rflow/deturck.hpp"
#include "rflow/flows.hpp"
#include "rflow/geometry.hpp"
#include "rflow/interpolate.hpp"

namespace rflow {

/// phi(x) = x + F(x), read periodically.
template <int Dim>
struct DiffeoField {
  Grid<Dim> grid;
  VectorField<Dim> F;

  static DiffeoField identity(const Grid<Dim>& grid) { return {grid, VectorField<Dim>(grid.size(), Vec<Dim>::Zero())}; }
  Point<Dim> image(std::size_t x) const {
    Point<Dim> p = grid.position(x);
    for (int a = 0; a < Dim; ++a) p[a] += F[x](a);
    return p;
  }
};

struct EnergyRecord {
  double t = 0.0;
  double e_sup = 0.0;
  double E = 0.0;
};

namespace detail {

template <int Dim>
void require_flat_background(const GridModel<Dim>& h) {
  validate(h, "gauge");
  if (!is_constant_coefficient(h)) throw RejectedInput("gauge", "background must have constant coefficients");
}

template <int Dim>
ScalarField<Dim> component(const VectorField<Dim>& F, int k) {
  ScalarField<Dim> c(F.size());
  for (std::size_t x = 0; x < F.size(); ++x) c[x] = F[x](k);
  return c;
}

/// DF[x](k, i) = D_i F^k.
template <int Dim>
std::vector<Mat<Dim>> displacement_gradient(const Grid<Dim>& grid, const VectorField<Dim>& F) {
  std::vector<Mat<Dim>> J(F.size());
  for (int i = 0; i < Dim; ++i) {
    const auto d = diff(grid, F, i);
    for (std::size_t x = 0; x < F.size(); ++x) J[x].col(i) = d[x];
  }
  return J;
}

// Four-point Lagrange stencil in time.
struct TimeStencil {
  std::size_t first = 0;
  std::array<double, 4> w{};
  int width = 0;
};

inline TimeStencil time_stencil(const std::vector<double>& times, double t) {
  if (times.empty()) throw RejectedInput("gauge", "empty time series");
  if (t < times.front() - 1e-12 || t > times.back() + 1e-12) throw RejectedInput("gauge", "time outside series");
  TimeStencil s;
  s.width = static_cast<int>(std::min<std::size_t>(4, times.size()));
  std::size_t hi = 1;
  while (hi + 1 < times.size() && times[hi] < t) ++hi;
  long first = static_cast<long>(hi) - 2;
  s.first = static_cast<std::size_t>(std::clamp<long>(first, 0, static_cast<long>(times.size()) - s.width));
  for (int i = 0; i < s.width; ++i) {
    double w = 1.0;
    for (int j = 0; j < s.width; ++j)
      if (j != i) w *= (t - times[s.first + j]) / (times[s.first + i] - times[s.first + j]);
    s.w[i] = w;
  }
  return s;
}

}  // namespace detail

/// I + DF, the Jacobian of phi, per node.
template <int Dim>
std::vector<Mat<Dim>> jacobian(const DiffeoField<Dim>& phi) {
  auto J = detail::displacement_gradient(phi.grid, phi.F);
  for (auto& m : J) m += Mat<Dim>::Identity();
  return J;
}

struct InjectivityReport {
  double min_det = 0.0;
  double max_displacement = 0.0;
  bool ok = false;
};

/// Grid proxy: det(d phi) > 0 at every node and |F| below half the smallest period.
template <int Dim>
InjectivityReport injectivity(const DiffeoField<Dim>& phi) {
  InjectivityReport r;
  r.min_det = std::numeric_limits<double>::infinity();
  for (const auto& J : jacobian(phi)) r.min_det = std::min(r.min_det, J.determinant());
  for (const auto& v : phi.F) r.max_displacement = std::max(r.max_displacement, v.cwiseAbs().maxCoeff());
  double half = std::numeric_limits<double>::infinity();
  for (int a = 0; a < Dim; ++a) half = std::min(half, 0.5 * phi.grid.period()[a]);
  r.ok = r.min_det > 0.0 && r.max_displacement < half && std::isfinite(r.max_displacement);
  return r;
}

// ---------------------------------------------------------------------------
// Harmonic map heat flow

/// dF/dt = Delta_g F^k - V^k(g, h), V the DeTurck field. For flat h this is
/// g^ij (d_ij F^k - Gamma^l_ij d_l F^k) - g^ij Gamma^k_ij.
template <int Dim>
VectorField<Dim> harmonic_map_rhs(const VectorField<Dim>& F, const MetricData<Dim>& g, const MetricData<Dim>& h) {
  const auto V = deturck_vector(g, h);
  VectorField<Dim> r(F.size());
  for (int k = 0; k < Dim; ++k) {
    const auto lap = laplacian_scalar(g, detail::component(F, k));
    for (std::size_t x = 0; x < F.size(); ++x) r[x](k) = lap[x] - V[x](k);
  }
  return r;
}

template <int Dim>
VectorField<Dim> harmonic_map_rhs(const VectorField<Dim>& F, const GridModel<Dim>& g, const GridModel<Dim>& h) {
  detail::require_flat_background(h);
  return harmonic_map_rhs(F, MetricData<Dim>(g), MetricData<Dim>(h));
}

/// e = g^ij h_kl D_i F^k D_j F^l.
template <int Dim>
ScalarField<Dim> energy_density(const VectorField<Dim>& F, const GridModel<Dim>& g, const GridModel<Dim>& h) {
  const auto DF = detail::displacement_gradient(g.grid, F);
  const auto gi = inverse_metric(g);
  ScalarField<Dim> e(F.size());
  for (std::size_t x = 0; x < F.size(); ++x) e[x] = (gi[x] * DF[x].transpose() * h.g[x] * DF[x]).trace();
  return e;
}

template <int Dim>
double total_energy(const VectorField<Dim>& F, const GridModel<Dim>& g, const GridModel<Dim>& h) {
  return integrate(g, energy_density(F, g, h));
}

template <int Dim>
EnergyRecord energy_record(double t, const VectorField<Dim>& F, const GridModel<Dim>& g, const GridModel<Dim>& h) {
  const auto e = energy_density(F, g, h);
  EnergyRecord r{t, 0.0, integrate(g, e)};
  for (double v : e) r.e_sup = std::max(r.e_sup, v);
  return r;
}

/// Both sides of the evolution identity of e along the gauge flow, for a
/// metric velocity gdot:
///   de/dt = Delta e - 2 |D^2 F|^2 + 2 <D F, D B> + (dg^ij/dt - 2 R^ij) <D_i F, D_j F>
/// with B = -V the forcing of the map flow. The left side is the chain rule
/// applied to the discrete fields; the difference is discretization error.
template <int Dim>
struct EnergyEvolution {
  ScalarField<Dim> lhs, rhs;
  ScalarField<Dim> hessian_sq;  // |D^2 F|^2, dropped in the inequality form
  double residual_sup = 0.0;
  double inequality_violation = 0.0;  // sup of lhs - (rhs + 2 |D^2 F|^2), positive part
};

template <int Dim>
EnergyEvolution<Dim> energy_evolution(const VectorField<Dim>& F, const GridModel<Dim>& gm, const SymTensorField<Dim>& gdot,
                                      const GridModel<Dim>& h) {
  detail::require_flat_background(h);
  const MetricData<Dim> g(gm);
  const MetricData<Dim> hd(h);
  const Grid<Dim>& grid = gm.grid;
  const Mat<Dim> H = h.g.front();
  const auto Fdot = harmonic_map_rhs(F, g, hd);
  const auto DF = detail::displacement_gradient(grid, F);
  const auto DFdot = detail::displacement_gradient(grid, Fdot);
  const auto V = deturck_vector(g, hd);
  const auto DB = detail::displacement_gradient(grid, scaled(-1.0, V));
  const auto ric = ricci(g);
  const auto e = energy_density(F, gm, h);
  const auto lap_e = laplacian_scalar(g, e);
  std::array<SymTensorField<Dim>, Dim> hess;
  for (int k = 0; k < Dim; ++k) hess[k] = hessian(g, detail::component(F, k));

  EnergyEvolution<Dim> out;
  out.lhs.resize(F.size());
  out.rhs.resize(F.size());
  out.hessian_sq.resize(F.size());
  for (std::size_t x = 0; x < F.size(); ++x) {
    const Mat<Dim>& gi = g.ginv[x];
    const Mat<Dim> gidot = -gi * gdot[x] * gi;
    const Mat<Dim> Q = DF[x].transpose() * H * DF[x];  // <D_i F, D_j F>
    out.lhs[x] = (gidot * Q).trace() + 2.0 * (gi * DF[x].transpose() * H * DFdot[x]).trace();
    double h2 = 0.0;
    for (int p = 0; p < Dim; ++p)
      for (int q = 0; q < Dim; ++q) h2 += H(p, q) * (gi * hess[p][x] * gi * hess[q][x]).trace();
    out.hessian_sq[x] = h2;
    const Mat<Dim> ric_up = gi * ric[x] * gi;
    out.rhs[x] = lap_e[x] - 2.0 * h2 + 2.0 * (gi * DF[x].transpose() * H * DB[x]).trace() +
                 ((gidot - 2.0 * ric_up) * Q).trace();
    out.residual_sup = std::max(out.residual_sup, std::abs(out.lhs[x] - out.rhs[x]));
    out.inequality_violation = std::max(out.inequality_violation, out.lhs[x] - (out.rhs[x] + 2.0 * h2));
  }
  return out;
}

template <int Dim>
struct GaugeTrajectory {
  std::vector<double> t;
  std::vector<DiffeoField<Dim>> phi;
  std::vector<EnergyRecord> energy;
  std::vector<InjectivityReport> injectivity;
};

struct GaugeControl {
  double dt = 0.0;  // 0: use the explicit step bound of g(t)
  int substeps_min = 1;
};

/// Integrate the map flow along the metric trajectory g(t) (cubic in time
/// between samples), from F0 at the first sample. Output at every sample.
template <int Dim>
GaugeTrajectory<Dim> run_harmonic_gauge(const Trajectory<GridModel<Dim>>& traj, const GridModel<Dim>& h,
                                        VectorField<Dim> F0, const GaugeControl& ctl = {}) {
  detail::require_flat_background(h);
  if (traj.empty()) throw RejectedInput("gauge", "empty metric trajectory");
  const Grid<Dim>& grid = traj.states.front().metric.grid;
  if (!(grid == h.grid) || F0.size() != grid.size()) throw RejectedInput("gauge", "grid mismatch");
  const MetricData<Dim> hd(h);

  GaugeTrajectory<Dim> out;
  auto record = [&](double t, const VectorField<Dim>& F, const GridModel<Dim>& g) {
    DiffeoField<Dim> phi{grid, F};
    const auto inj = injectivity(phi);
    if (!inj.ok) throw GaugeBreakdown("map lost injectivity (min det " + std::to_string(inj.min_det) + ")", t);
    out.t.push_back(t);
    out.phi.push_back(std::move(phi));
    out.energy.push_back(energy_record(t, F, g, h));
    out.injectivity.push_back(inj);
  };
  auto rhs = [&](double t, const VectorField<Dim>& F) {
    const auto s = state_at(traj, t);
    return harmonic_map_rhs(F, MetricData<Dim>(s.metric), hd);
  };

  VectorField<Dim> F = std::move(F0);
  record(traj.states.front().t, F, traj.states.front().metric);
  for (std::size_t i = 1; i < traj.size(); ++i) {
    const double t0 = traj.states[i - 1].t, t1 = traj.states[i].t;
    double dt = ctl.dt > 0.0 ? ctl.dt : std::min(cfl_bound(traj.states[i - 1].metric), cfl_bound(traj.states[i].metric));
    const int n = std::max(ctl.substeps_min, static_cast<int>(std::ceil((t1 - t0) / dt - 1e-9)));
    dt = (t1 - t0) / n;
    for (int k = 0; k < n; ++k) {
      const double t = t0 + k * dt;
      const auto k1 = rhs(t, F);
      const auto k2 = rhs(t + 0.5 * dt, lincomb(1.0, F, 0.5 * dt, k1));
      const auto k3 = rhs(t + 0.5 * dt, lincomb(1.0, F, 0.5 * dt, k2));
      const auto k4 = rhs(t + dt, lincomb(1.0, F, dt, k3));
      for (std::size_t x = 0; x < F.size(); ++x) F[x] += (dt / 6.0) * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]);
      if (!injectivity(DiffeoField<Dim>{grid, F}).ok) throw GaugeBreakdown("map lost injectivity", t + dt);
    }
    record(t1, F, traj.states[i].metric);
  }
  return out;
}

/// Particles psi(t)(x) started at phi_{t0}(x), advanced by psi' = -V(t, psi)
/// with RK4; V is interpolated cubically in time over the samples and with
/// `kind` in space. Returns psi at every sample time.
template <int Dim>
GaugeTrajectory<Dim> integrate_diffeo_ode(const std::vector<double>& times, const std::vector<VectorField<Dim>>& V,
                                          const DiffeoField<Dim>& phi0, int substeps = 1,
                                          Interpolation kind = Interpolation::multilinear) {
  if (times.size() != V.size() || times.empty()) throw RejectedInput("gauge", "V series and times differ in length");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1])) throw RejectedInput("gauge", "times must increase strictly");
  if (substeps < 1) throw RejectedInput("gauge", "substeps must be positive");
  const Grid<Dim>& grid = phi0.grid;
  auto velocity = [&](double t, const Vec<Dim>& p) {
    const auto st = detail::time_stencil(times, t);
    Point<Dim> q;
    for (int a = 0; a < Dim; ++a) q[a] = p(a);
    Vec<Dim> v = Vec<Dim>::Zero();
    for (int i = 0; i < st.width; ++i) v += st.w[i] * interpolate(grid, V[st.first + i], q, kind);
    return Vec<Dim>(-v);
  };
  std::vector<Vec<Dim>> P(grid.size());
  for (std::size_t x = 0; x < grid.size(); ++x) {
    const auto p = phi0.image(x);
    for (int a = 0; a < Dim; ++a) P[x](a) = p[a];
  }
  GaugeTrajectory<Dim> out;
  auto record = [&](double t) {
    DiffeoField<Dim> phi{grid, VectorField<Dim>(grid.size())};
    for (std::size_t x = 0; x < grid.size(); ++x) {
      const auto base = grid.position(x);
      for (int a = 0; a < Dim; ++a) phi.F[x](a) = P[x](a) - base[a];
    }
    out.t.push_back(t);
    out.injectivity.push_back(injectivity(phi));
    out.phi.push_back(std::move(phi));
  };
  record(times.front());
  for (std::size_t i = 1; i < times.size(); ++i) {
    const double dt = (times[i] - times[i - 1]) / substeps;
    for (int k = 0; k < substeps; ++k) {
      const double t = times[i - 1] + k * dt;
      for (auto& p : P) {
        const Vec<Dim> k1 = velocity(t, p);
        const Vec<Dim> k2 = velocity(t + 0.5 * dt, p + 0.5 * dt * k1);
        const Vec<Dim> k3 = velocity(t + 0.5 * dt, p + 0.5 * dt * k2);
        const Vec<Dim> k4 = velocity(t + dt, p + dt * k3);
        p += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
    }
    record(times[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pullbacks and inverses

/// (phi^* g)_ij(x) = d_i phi^k d_j phi^l g_kl(phi(x)).
template <int Dim>
GridModel<Dim> pullback_metric(const DiffeoField<Dim>& phi, const GridModel<Dim>& g,
                               Interpolation kind = Interpolation::cubic) {
  if (!(phi.grid == g.grid)) throw RejectedInput("gauge", "grid mismatch");
  const auto J = jacobian(phi);
  GridModel<Dim> out{g.grid, SymTensorField<Dim>(g.size())};
  const bool constant = is_constant_coefficient(g, 0.0);
  for (std::size_t x = 0; x < g.size(); ++x) {
    const Mat<Dim> gx = constant ? g.g.front() : interpolate(g.grid, g.g, phi.image(x), kind);
    Mat<Dim> p = J[x].transpose() * gx * J[x];
    out.g[x] = 0.5 * (p + p.transpose());
  }
  return out;
}

/// phi^{-1} by per-node Newton iteration on y + F(y) = x, with F and DF
/// interpolated with `kind`.
template <int Dim>
DiffeoField<Dim> inverse_diffeo(const DiffeoField<Dim>& phi, Interpolation kind = Interpolation::cubic,
                                double tol = 1e-13, int max_iter = 50) {
  const Grid<Dim>& grid = phi.grid;
  const auto DF = detail::displacement_gradient(grid, phi.F);
  DiffeoField<Dim> inv{grid, VectorField<Dim>(grid.size())};
  for (std::size_t x = 0; x < grid.size(); ++x) {
    const auto base = grid.position(x);
    Vec<Dim> xb, y;
    for (int a = 0; a < Dim; ++a) xb(a) = base[a];
    y = xb - phi.F[x];
    bool done = false;
    for (int it = 0; it < max_iter; ++it) {
      Point<Dim> q;
      for (int a = 0; a < Dim; ++a) q[a] = y(a);
      const Vec<Dim> r = y + interpolate(grid, phi.F, q, kind) - xb;
      if (r.cwiseAbs().maxCoeff() < tol) {
        done = true;
        break;
      }
      const Mat<Dim> J = Mat<Dim>::Identity() + interpolate(grid, DF, q, kind);
      y -= J.lu().solve(r);
    }
    if (!done) throw NonConvergence("gauge", "Newton inversion of phi failed", 0.0);
    inv.F[x] = y - xb;
  }
  return inv;
}

// ---------------------------------------------------------------------------
// Divergence gauge

namespace detail {

template <int Dim>
void fft_nd(const Grid<Dim>& grid, std::vector<std::complex<double>>& a, bool inverse) {
  Eigen::FFT<double> fft;
  const auto dims = grid.dims();
  for (int ax = 0; ax < Dim; ++ax) {
    const int n = dims[ax];
    std::vector<std::complex<double>> in(n), out(n);
    for (std::size_t x = 0; x < a.size(); ++x) {
      if (grid.coord(x, ax) != 0) continue;
      for (int k = 0; k < n; ++k) in[k] = a[grid.shift(x, ax, k)];
      if (inverse) fft.inv(out, in);
      else fft.fwd(out, in);
      for (int k = 0; k < n; ++k) a[grid.shift(x, ax, k)] = out[k];
    }
  }
}

}  // namespace detail

/// Solve delta_h (L_Y h) = r for Y on the periodic grid with constant h,
/// using the exact symbol of the central-difference operators. Modes the
/// operator annihilates (zero symbol) are set to zero.
template <int Dim>
VectorField<Dim> solve_vector_laplacian(const GridModel<Dim>& h, const VectorField<Dim>& r) {
  detail::require_flat_background(h);
  const Grid<Dim>& grid = h.grid;
  const Mat<Dim> H = h.g.front();
  const Mat<Dim> Hi = H.inverse();
  std::array<std::vector<std::complex<double>>, Dim> c;
  for (int k = 0; k < Dim; ++k) {
    c[k].resize(grid.size());
    for (std::size_t x = 0; x < grid.size(); ++x) c[k][x] = r[x](k);
    detail::fft_nd(grid, c[k], false);
  }
  const auto dims = grid.dims();
  for (std::size_t x = 0; x < grid.size(); ++x) {
    Vec<Dim> s;
    for (int a = 0; a < Dim; ++a) s(a) = std::sin(2.0 * std::numbers::pi * grid.coord(x, a) / dims[a]) / grid.spacing(a);
    Eigen::Matrix<std::complex<double>, Dim, 1> rc, y;
    for (int k = 0; k < Dim; ++k) rc(k) = c[k][x];
    if (s.cwiseAbs().maxCoeff() < 1e-12) {
      y.setZero();
    } else {
      // D -> i s and delta = -div, so delta_h L_Y h -> ((s^T h^-1 s) h + s s^T) Y.
      const Mat<Dim> M = s.dot(Hi * s) * H + s * s.transpose();
      y = M.template cast<std::complex<double>>().inverse() * rc;
    }
    for (int k = 0; k < Dim; ++k) c[k][x] = y(k);
  }
  VectorField<Dim> Y(grid.size());
  for (int k = 0; k < Dim; ++k) {
    detail::fft_nd(grid, c[k], true);
    for (std::size_t x = 0; x < grid.size(); ++x) Y[x](k) = c[k][x].real();
  }
  return Y;
}

template <int Dim>
double coordinate_l2(const Grid<Dim>& grid, const VectorField<Dim>& v) {
  double s = 0.0;
  for (const auto& x : v) s += x.squaredNorm();
  return std::sqrt(s * grid.cell_volume());
}

template <int Dim>
struct DivergenceGauge {
  DiffeoField<Dim> phi;
  double residual = 0.0;  // coordinate L^2 norm of delta_{phi^* h} g
  int iterations = 0;
};

struct DivergenceGaugeOptions {
  double tol = 1e-8;
  int max_iterations = 50;
};

/// phi with delta_{phi^* h} g = 0, by chord iteration F <- F + Y where Y
/// solves delta_h (L_Y h) = delta_{phi^* h} g. The exponential map of flat
/// h is x + X, so phi = Id + F. The mean of F stays zero.
template <int Dim>
DivergenceGauge<Dim> divergence_gauge_fix(const GridModel<Dim>& g, const GridModel<Dim>& h,
                                          const DivergenceGaugeOptions& opt = {}) {
  detail::require_flat_background(h);
  validate(g, "gauge");
  if (!(g.grid == h.grid)) throw RejectedInput("gauge", "grid mismatch");
  DivergenceGauge<Dim> out{DiffeoField<Dim>::identity(g.grid)};
  for (int it = 0; it <= opt.max_iterations; ++it) {
    const auto hp = pullback_metric(out.phi, h);
    const auto r = divergence(MetricData<Dim>(hp), g.g);
    out.residual = coordinate_l2(g.grid, r);
    out.iterations = it;
    if (out.residual < opt.tol) return out;
    if (!std::isfinite(out.residual)) break;
    const auto Y = solve_vector_laplacian(h, r);
    for (std::size_t x = 0; x < Y.size(); ++x) out.phi.F[x] += Y[x];
    if (!injectivity(out.phi).ok) break;
  }
  throw NonConvergence("gauge", "divergence gauge iteration did not converge", out.residual);
}

// ---------------------------------------------------------------------------
// Gauge-equivalence audit

struct GaugeAuditRecord {
  double t = 0.0;
  double error_sup = 0.0;
};

/// Per gauge sample: sup |(phi(t)^{-1})^* g_ricci(t) - g_deturck(t)|.
template <int Dim>
std::vector<GaugeAuditRecord> gauge_equivalence_check(const Trajectory<GridModel<Dim>>& ricci_traj,
                                                      const Trajectory<GridModel<Dim>>& deturck_traj,
                                                      const GaugeTrajectory<Dim>& gauge,
                                                      Interpolation kind = Interpolation::cubic) {
  std::vector<GaugeAuditRecord> out;
  for (std::size_t i = 0; i < gauge.t.size(); ++i) {
    const double t = gauge.t[i];
    const auto gr = state_at(ricci_traj, t).metric;
    const auto gd = state_at(deturck_traj, t).metric;
    const auto moved = pullback_metric(inverse_diffeo(gauge.phi[i], kind), gr, kind);
    out.push_back({t, max_abs(lincomb(1.0, moved.g, -1.0, gd.g))});
  }
  return out;
}

}  // namespace rflow
