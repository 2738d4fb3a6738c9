#pragma once

// Second-order periodic finite-difference stencils.

#include <vector>

#include "rflow/grid.hpp"

namespace rflow {

/// Central first difference along axis a.
template <int Dim, class T>
std::vector<T> diff(const Grid<Dim>& grid, const std::vector<T>& f, int a) {
  const double s = 0.5 / grid.spacing(a);
  std::vector<T> r(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) r[x] = s * (f[grid.shift(x, a, 1)] - f[grid.shift(x, a, -1)]);
  return r;
}

/// Compact second difference: three-point stencil for a == b, four-point
/// cross stencil for a != b.
template <int Dim, class T>
std::vector<T> diff2(const Grid<Dim>& grid, const std::vector<T>& f, int a, int b) {
  std::vector<T> r(f.size());
  if (a == b) {
    const double s = 1.0 / (grid.spacing(a) * grid.spacing(a));
    for (std::size_t x = 0; x < f.size(); ++x)
      r[x] = s * (f[grid.shift(x, a, 1)] - 2.0 * f[x] + f[grid.shift(x, a, -1)]);
    return r;
  }
  const double s = 0.25 / (grid.spacing(a) * grid.spacing(b));
  for (std::size_t x = 0; x < f.size(); ++x) {
    const std::size_t p = grid.shift(x, a, 1), m = grid.shift(x, a, -1);
    r[x] = s * (f[grid.shift(p, b, 1)] - f[grid.shift(p, b, -1)] - f[grid.shift(m, b, 1)] +
                f[grid.shift(m, b, -1)]);
  }
  return r;
}

/// Composition of two central differences D_a D_b. Equals diff2 for a != b;
/// for a == b it is the wide five-point stencil.
template <int Dim, class T>
std::vector<T> diff2_wide(const Grid<Dim>& grid, const std::vector<T>& f, int a, int b) {
  if (a != b) return diff2(grid, f, a, b);
  const double s = 0.25 / (grid.spacing(a) * grid.spacing(a));
  std::vector<T> r(f.size());
  for (std::size_t x = 0; x < f.size(); ++x)
    r[x] = s * (f[grid.shift(x, a, 2)] - 2.0 * f[x] + f[grid.shift(x, a, -2)]);
  return r;
}

/// Gradient of every axis at once: result[a] = D_a f.
template <int Dim, class T>
std::array<std::vector<T>, Dim> gradient_fields(const Grid<Dim>& grid, const std::vector<T>& f) {
  std::array<std::vector<T>, Dim> d;
  for (int a = 0; a < Dim; ++a) d[a] = diff(grid, f, a);
  return d;
}

}  // namespace rflow
