#pragma once

// Periodic off-grid evaluation of grid fields.

#include <cmath>
#include <type_traits>
#include <vector>

#include "rflow/grid.hpp"

namespace rflow {

enum class Interpolation { multilinear, cubic };

namespace detail {

// Lagrange weights for nodes -1, 0, 1, 2 at fractional offset s in [0, 1).
inline std::array<double, 4> cubic_weights(double s) {
  return {-s * (s - 1.0) * (s - 2.0) / 6.0, (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
          -(s + 1.0) * s * (s - 2.0) / 2.0, (s + 1.0) * s * (s - 1.0) / 6.0};
}

}  // namespace detail

/// Value of f at physical point x (wrapped periodically).
template <int Dim, class T>
T interpolate(const Grid<Dim>& grid, const std::vector<T>& f, const std::type_identity_t<Point<Dim>>& x,
              Interpolation kind = Interpolation::multilinear) {
  std::array<int, Dim> base;
  std::array<double, Dim> frac;
  for (int a = 0; a < Dim; ++a) {
    const double u = x[a] / grid.spacing(a);
    const double fl = std::floor(u);
    base[a] = static_cast<int>(fl);
    frac[a] = u - fl;
  }
  const int width = kind == Interpolation::cubic ? 4 : 2;
  const int first = kind == Interpolation::cubic ? -1 : 0;
  std::array<std::array<double, 4>, Dim> w;
  for (int a = 0; a < Dim; ++a) {
    if (kind == Interpolation::cubic) {
      w[a] = detail::cubic_weights(frac[a]);
    } else {
      w[a] = {1.0 - frac[a], frac[a], 0.0, 0.0};
    }
  }
  T acc = zero_like(f.front());
  std::array<int, Dim> o;
  o.fill(0);
  int total = 1;
  for (int a = 0; a < Dim; ++a) total *= width;
  for (int k = 0; k < total; ++k) {
    int r = k;
    double weight = 1.0;
    std::array<int, Dim> c;
    for (int a = Dim - 1; a >= 0; --a) {
      o[a] = r % width;
      r /= width;
      weight *= w[a][o[a]];
      c[a] = base[a] + first + o[a];
    }
    acc += weight * f[grid.index(c)];
  }
  return acc;
}

}  // namespace rflow
