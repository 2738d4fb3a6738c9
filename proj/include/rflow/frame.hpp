#pragma once

// Left-invariant metrics on Lie groups, diagonal in a fixed frame e_i.
// All fields are spatially constant, so curvature reduces to algebra on
// the structure constants.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

#include "rflow/errors.hpp"

namespace rflow {

struct FrameModel {
  int n = 3;
  /// c[(i*n + j)*n + k] = c_ij^k with [e_i, e_j] = c_ij^k e_k.
  std::vector<double> c;
  /// g(e_i, e_i) = a_i; off-diagonal entries vanish.
  Eigen::VectorXd a;
  /// Volume of the group for the metric with a = (1, ..., 1).
  double reference_volume = 1.0;

  static constexpr int dim = 0;  // runtime dimension

  double structure(int i, int j, int k) const { return c[(i * n + j) * n + k]; }
  double& structure(int i, int j, int k) { return c[(i * n + j) * n + k]; }

  /// SU(2) = S^3 with [e_i, e_j] = 2 eps_ijk e_k; a = (1,1,1) is the unit sphere.
  static FrameModel sphere3(const Eigen::Vector3d& a) {
    FrameModel m;
    m.n = 3;
    m.c.assign(27, 0.0);
    const int cyc[3][3] = {{0, 1, 2}, {1, 2, 0}, {2, 0, 1}};
    for (const auto& p : cyc) {
      m.structure(p[0], p[1], p[2]) = 2.0;
      m.structure(p[1], p[0], p[2]) = -2.0;
    }
    m.a = a;
    m.reference_volume = 2.0 * std::numbers::pi * std::numbers::pi;
    return m;
  }
  static FrameModel round_sphere(double a) { return sphere3(Eigen::Vector3d::Constant(a)); }
  /// Berger sphere: round in the e_1, e_2 directions, fibre squashed by eps.
  static FrameModel berger(double a, double eps) { return sphere3(Eigen::Vector3d(a, a, eps * a)); }
  static FrameModel flat(const Eigen::VectorXd& a, double reference_volume = 1.0) {
    FrameModel m;
    m.n = static_cast<int>(a.size());
    m.c.assign(static_cast<std::size_t>(m.n * m.n * m.n), 0.0);
    m.a = a;
    m.reference_volume = reference_volume;
    return m;
  }
};

inline void validate(const FrameModel& m, const char* stage = "geometry") {
  if (m.n != 2 && m.n != 3) throw RejectedInput(stage, "frame dimension must be 2 or 3");
  if (m.a.size() != m.n || m.c.size() != static_cast<std::size_t>(m.n * m.n * m.n))
    throw RejectedInput(stage, "frame model arrays have the wrong size");
  for (int i = 0; i < m.n; ++i) {
    if (!(m.a(i) > 0.0) || !std::isfinite(m.a(i)))
      throw RejectedInput(stage, "metric coefficient a[" + std::to_string(i) + "] must be positive");
    for (int j = 0; j < m.n; ++j)
      for (int k = 0; k < m.n; ++k)
        if (std::abs(m.structure(i, j, k) + m.structure(j, i, k)) > 1e-12)
          throw RejectedInput(stage, "structure constants not antisymmetric");
  }
  if (!(m.reference_volume > 0.0)) throw RejectedInput(stage, "reference volume must be positive");
}

/// Ricci tensor in frame components Ric(e_p, e_q), from the left-invariant
/// formula in an orthonormal frame E_i = e_i / sqrt(a_i):
///   Ric(X,Y) = -1/2 sum_i <[X,E_i],[Y,E_i]> - 1/2 B(X,Y)
///              + 1/4 sum_ij <[E_i,E_j],X><[E_i,E_j],Y> - sym <[Z,X],Y>
/// where B is the Killing form and <Z,X> = tr ad_X.
inline Eigen::MatrixXd ricci(const FrameModel& m) {
  validate(m);
  const int n = m.n;
  Eigen::VectorXd s = m.a.cwiseSqrt();
  auto C = [&](int i, int j, int k) { return m.structure(i, j, k) * s(k) / (s(i) * s(j)); };
  Eigen::VectorXd z(n);
  for (int p = 0; p < n; ++p) {
    double t = 0.0;
    for (int k = 0; k < n; ++k) t += C(p, k, k);
    z(p) = t;
  }
  Eigen::MatrixXd ric = Eigen::MatrixXd::Zero(n, n);
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q) {
      double r = 0.0;
      for (int i = 0; i < n; ++i)
        for (int l = 0; l < n; ++l) r -= 0.5 * C(p, i, l) * C(q, i, l);
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l) r -= 0.5 * C(p, k, l) * C(q, l, k);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) r += 0.25 * C(i, j, p) * C(i, j, q);
      for (int w = 0; w < n; ++w) r -= 0.5 * z(w) * (C(w, p, q) + C(w, q, p));
      ric(p, q) = r * s(p) * s(q);
    }
  return ric;
}

/// Milnor's closed form for a unimodular 3-dimensional frame with
/// [e_2,e_3] = l1 e_1, [e_3,e_1] = l2 e_2, [e_1,e_2] = l3 e_3.
inline Eigen::Vector3d milnor_ricci_diagonal(const Eigen::Vector3d& lambda, const Eigen::Vector3d& a) {
  const double x = lambda(0) * a(0), y = lambda(1) * a(1), z = lambda(2) * a(2);
  return {(x * x - (y - z) * (y - z)) / (2.0 * a(1) * a(2)),
          (y * y - (x - z) * (x - z)) / (2.0 * a(0) * a(2)),
          (z * z - (x - y) * (x - y)) / (2.0 * a(0) * a(1))};
}

inline double scalar_curvature(const FrameModel& m) {
  const Eigen::MatrixXd ric = ricci(m);
  return (ric.diagonal().array() / m.a.array()).sum();
}

inline double volume(const FrameModel& m) {
  validate(m);
  return m.reference_volume * std::sqrt(m.a.prod());
}

/// Diagonal of Ricci; rejects metrics whose Ricci tensor leaves the
/// diagonal ansatz.
inline Eigen::VectorXd ricci_diagonal(const FrameModel& m) {
  const Eigen::MatrixXd ric = ricci(m);
  Eigen::MatrixXd off = ric;
  off.diagonal().setZero();
  if (off.cwiseAbs().maxCoeff() > 1e-10 * (1.0 + ric.cwiseAbs().maxCoeff()))
    throw RejectedInput("geometry", "Ricci tensor is not diagonal in this frame");
  return ric.diagonal();
}

}  // namespace rflow

namespace rflow {

/// (L_X g)(e_i, e_j) for a left-invariant field X = X^k e_k:
/// -g([X, e_i], e_j) - g(e_i, [X, e_j]).
inline Eigen::MatrixXd lie_derivative_metric(const FrameModel& m, const Eigen::VectorXd& X) {
  validate(m);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(m.n, m.n);
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < m.n; ++j) {
      double s = 0.0;
      for (int k = 0; k < m.n; ++k) s -= X(k) * (m.structure(k, i, j) * m.a(j) + m.structure(k, j, i) * m.a(i));
      L(i, j) = s;
    }
  return L;
}

}  // namespace rflow
