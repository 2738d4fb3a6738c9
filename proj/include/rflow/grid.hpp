#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include "rflow/errors.hpp"

namespace rflow {

template <int Dim>
using Vec = Eigen::Matrix<double, Dim, 1>;
template <int Dim>
using Mat = Eigen::Matrix<double, Dim, Dim>;

template <int Dim>
using Point = std::array<double, Dim>;

/// Uniform periodic grid on the flat torus prod_a [0, period[a]).
/// Nodes are stored row-major: the last axis varies fastest.
template <int Dim>
class Grid {
  static_assert(Dim == 2 || Dim == 3, "grids are 2- or 3-dimensional");

 public:
  static constexpr int dim = Dim;

  Grid() = default;
  Grid(std::array<int, Dim> dims, std::array<double, Dim> period)
      : dims_(dims), period_(period) {
    std::size_t stride = 1;
    for (int a = Dim - 1; a >= 0; --a) {
      if (dims_[a] < 8) throw RejectedInput("grid", "need at least 8 points per axis");
      if (!(period_[a] > 0.0)) throw RejectedInput("grid", "period must be positive");
      stride_[a] = stride;
      stride *= static_cast<std::size_t>(dims_[a]);
    }
    size_ = stride;
  }

  static Grid cube(int n, double period = 2.0 * std::numbers::pi) {
    std::array<int, Dim> d;
    std::array<double, Dim> p;
    d.fill(n);
    p.fill(period);
    return Grid(d, p);
  }

  std::size_t size() const { return size_; }
  const std::array<int, Dim>& dims() const { return dims_; }
  const std::array<double, Dim>& period() const { return period_; }
  double spacing(int a) const { return period_[a] / dims_[a]; }
  double min_spacing() const {
    double h = spacing(0);
    for (int a = 1; a < Dim; ++a) h = std::min(h, spacing(a));
    return h;
  }
  double cell_volume() const {
    double v = 1.0;
    for (int a = 0; a < Dim; ++a) v *= spacing(a);
    return v;
  }
  double total_volume() const {
    double v = 1.0;
    for (int a = 0; a < Dim; ++a) v *= period_[a];
    return v;
  }

  int coord(std::size_t idx, int a) const {
    return static_cast<int>((idx / stride_[a]) % static_cast<std::size_t>(dims_[a]));
  }
  std::array<int, Dim> coords(std::size_t idx) const {
    std::array<int, Dim> c;
    for (int a = 0; a < Dim; ++a) c[a] = coord(idx, a);
    return c;
  }
  std::size_t index(const std::array<int, Dim>& c) const {
    std::size_t idx = 0;
    for (int a = 0; a < Dim; ++a) idx += static_cast<std::size_t>(wrap(c[a], a)) * stride_[a];
    return idx;
  }
  /// Neighbour of `idx` displaced by `offset` nodes along axis `a`, wrapping.
  std::size_t shift(std::size_t idx, int a, int offset) const {
    const int c = coord(idx, a);
    const int n = wrap(c + offset, a);
    return idx + static_cast<std::size_t>(n) * stride_[a] - static_cast<std::size_t>(c) * stride_[a];
  }
  Point<Dim> position(std::size_t idx) const {
    Point<Dim> x;
    for (int a = 0; a < Dim; ++a) x[a] = coord(idx, a) * spacing(a);
    return x;
  }

  bool operator==(const Grid& o) const { return dims_ == o.dims_ && period_ == o.period_; }

 private:
  int wrap(int i, int a) const {
    const int n = dims_[a];
    i %= n;
    return i < 0 ? i + n : i;
  }

  std::array<int, Dim> dims_{};
  std::array<double, Dim> period_{};
  std::array<std::size_t, Dim> stride_{};
  std::size_t size_ = 0;
};

template <int Dim>
using ScalarField = std::vector<double>;
/// One upper index per node.
template <int Dim>
using VectorField = std::vector<Vec<Dim>>;
/// Two lower indices per node, symmetric.
template <int Dim>
using SymTensorField = std::vector<Mat<Dim>>;
/// Gamma[x][k](i, j) = Christoffel symbol Gamma^k_{ij} at node x.
template <int Dim>
using ConnectionField = std::vector<std::array<Mat<Dim>, Dim>>;

/// Metric on a periodic grid.
template <int Dim>
struct GridModel {
  Grid<Dim> grid;
  SymTensorField<Dim> g;

  static constexpr int dim = Dim;

  std::size_t size() const { return grid.size(); }

  static GridModel constant(const Grid<Dim>& grid, const Mat<Dim>& value) {
    return GridModel{grid, SymTensorField<Dim>(grid.size(), value)};
  }
  static GridModel flat(const Grid<Dim>& grid) { return constant(grid, Mat<Dim>::Identity()); }
};

/// Smallest admissible det g at any node.
inline constexpr double kMinDeterminant = 1e-12;

/// Throws RejectedInput unless every node carries a symmetric positive
/// definite matrix with det g >= kMinDeterminant.
template <int Dim>
void validate(const GridModel<Dim>& m, const char* stage = "geometry") {
  if (m.g.size() != m.grid.size()) throw RejectedInput(stage, "metric size does not match grid");
  for (std::size_t x = 0; x < m.g.size(); ++x) {
    const Mat<Dim>& g = m.g[x];
    if (!g.allFinite()) throw RejectedInput(stage, "non-finite metric at node " + std::to_string(x));
    if ((g - g.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + g.cwiseAbs().maxCoeff()))
      throw RejectedInput(stage, "metric not symmetric at node " + std::to_string(x));
    if (g.determinant() < kMinDeterminant || g.llt().info() != Eigen::Success)
      throw RejectedInput(stage, "metric not positive definite at node " + std::to_string(x));
  }
}

template <int Dim>
SymTensorField<Dim> inverse_metric(const GridModel<Dim>& m) {
  SymTensorField<Dim> inv(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) inv[x] = m.g[x].inverse();
  return inv;
}

// Field arithmetic. Works for any element type with vector-space operators.
template <class T>
std::vector<T> lincomb(double a, const std::vector<T>& x, double b, const std::vector<T>& y) {
  std::vector<T> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] = a * x[i] + b * y[i];
  return r;
}

template <class T>
std::vector<T> scaled(double a, std::vector<T> x) {
  for (auto& v : x) v = a * v;
  return x;
}

template <class T>
T zero_like(const T& v) {
  if constexpr (std::is_arithmetic_v<T>) {
    return T{0};
  } else {
    return T::Zero(v.rows(), v.cols());
  }
}

inline double abs_value(double v) { return std::abs(v); }
template <class Derived>
double abs_value(const Eigen::MatrixBase<Derived>& v) {
  return v.norm();
}

/// max over nodes of the coordinate (Frobenius) magnitude.
template <class T>
double max_abs(const std::vector<T>& f) {
  double m = 0.0;
  for (const auto& v : f) m = std::max(m, abs_value(v));
  return m;
}

/// Spatial mean (unweighted; flat grid measure).
template <class T>
T grid_mean(const std::vector<T>& f) {
  T s = zero_like(f.front());
  for (const auto& v : f) s += v;
  return s / static_cast<double>(f.size());
}

template <int Dim>
bool is_constant_coefficient(const GridModel<Dim>& h, double tol = 1e-14) {
  for (const auto& g : h.g)
    if ((g - h.g.front()).cwiseAbs().maxCoeff() > tol) return false;
  return true;
}

}  // namespace rflow
