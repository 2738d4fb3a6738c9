#pragma once

// Normalization (4 pi tau)^{-n/2} int e^{-f} dV = 1 of the potential f.

#include <cmath>
#include <numbers>

#include "rflow/frame.hpp"
#include "rflow/geometry.hpp"

namespace rflow {

inline double gaussian_prefactor(int n, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw RejectedInput("entropy", "tau must be positive and finite");
  return std::pow(4.0 * std::numbers::pi * tau, -0.5 * n);
}

template <int Dim>
double constraint_integral(const GridModel<Dim>& m, const ScalarField<Dim>& f, double tau) {
  ScalarField<Dim> w(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) w[x] = std::exp(-f[x]);
  return gaussian_prefactor(Dim, tau) * integrate(m, w);
}

inline double constraint_integral(const FrameModel& m, double f, double tau) {
  return gaussian_prefactor(m.n, tau) * std::exp(-f) * volume(m);
}

template <class Model, class Potential>
double constraint_residual(const Model& m, const Potential& f, double tau) {
  return std::abs(constraint_integral(m, f, tau) - 1.0);
}

/// Shift of f by the unique constant that zeroes the constraint residual.
template <int Dim>
ScalarField<Dim> normalize_f(const GridModel<Dim>& m, ScalarField<Dim> f, double tau) {
  // Factor out the minimum for overflow safety.
  double fmin = f.front();
  for (double v : f) fmin = std::min(fmin, v);
  ScalarField<Dim> shifted(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) shifted[x] = f[x] - fmin;
  const double c = std::log(constraint_integral(m, shifted, tau)) - fmin;
  for (auto& v : f) v += c;
  return f;
}

inline double normalize_f(const FrameModel& m, double, double tau) {
  return std::log(gaussian_prefactor(m.n, tau) * volume(m));
}

}  // namespace rflow
