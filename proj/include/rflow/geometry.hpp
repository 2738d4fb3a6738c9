#pragma once

// Connections, curvature, covariant operators and norms on a periodic grid.
// Every operator is second-order accurate in the grid spacing.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "rflow/grid.hpp"
#include "rflow/stencil.hpp"

namespace rflow {

/// Precomputed first derivatives, inverse, and connection of a grid metric.
template <int Dim>
struct MetricData {
  const GridModel<Dim>* model;
  SymTensorField<Dim> ginv;
  std::array<SymTensorField<Dim>, Dim> dg;  // dg[a][x] = D_a g at x
  ConnectionField<Dim> gamma;               // gamma[x][k](i,j) = Gamma^k_ij

  explicit MetricData(const GridModel<Dim>& m) : model(&m) {
    validate(m);
    ginv = inverse_metric(m);
    for (int a = 0; a < Dim; ++a) dg[a] = diff(m.grid, m.g, a);
    gamma.resize(m.size());
    for (std::size_t x = 0; x < m.size(); ++x) {
      for (int k = 0; k < Dim; ++k) {
        Mat<Dim> G = Mat<Dim>::Zero();
        for (int i = 0; i < Dim; ++i)
          for (int j = 0; j < Dim; ++j) {
            double s = 0.0;
            for (int l = 0; l < Dim; ++l)
              s += ginv[x](k, l) * (dg[i][x](j, l) + dg[j][x](i, l) - dg[l][x](i, j));
            G(i, j) = 0.5 * s;
          }
        gamma[x][k] = G;
      }
    }
  }
  const Grid<Dim>& grid() const { return model->grid; }
  std::size_t size() const { return model->size(); }
};

/// Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij), central differences.
template <int Dim>
ConnectionField<Dim> christoffel(const GridModel<Dim>& m) {
  return MetricData<Dim>(m).gamma;
}

/// Ricci tensor. The second-derivative part is split so that the rough
/// Laplacian term g^kl d_k d_l g_ij uses the compact stencil while the
/// gauge terms use composed central differences; the latter cancel exactly
/// against the Lie-derivative term of the DeTurck flow when linearized at a
/// constant metric.
template <int Dim>
SymTensorField<Dim> ricci(const MetricData<Dim>& md) {
  const GridModel<Dim>& m = *md.model;
  const Grid<Dim>& grid = m.grid;
  const std::size_t N = m.size();
  std::array<std::array<SymTensorField<Dim>, Dim>, Dim> wide, compact;
  for (int a = 0; a < Dim; ++a)
    for (int b = a; b < Dim; ++b) {
      wide[a][b] = diff2_wide(grid, m.g, a, b);
      compact[a][b] = a == b ? diff2(grid, m.g, a, b) : wide[a][b];
      if (b != a) {
        wide[b][a] = wide[a][b];
        compact[b][a] = compact[a][b];
      }
    }
  SymTensorField<Dim> ric(N);
  for (std::size_t x = 0; x < N; ++x) {
    const Mat<Dim>& gi = md.ginv[x];
    const auto& G = md.gamma[x];
    // d_a g^{kl} = -g^{kp} (d_a g_pq) g^{ql}
    std::array<Mat<Dim>, Dim> dginv;
    for (int a = 0; a < Dim; ++a) dginv[a] = -gi * md.dg[a][x] * gi;
    // lower connection Gamma_{l,ij}
    std::array<Mat<Dim>, Dim> Gl;
    for (int l = 0; l < Dim; ++l) {
      Mat<Dim> L;
      for (int i = 0; i < Dim; ++i)
        for (int j = 0; j < Dim; ++j)
          L(i, j) = 0.5 * (md.dg[i][x](j, l) + md.dg[j][x](i, l) - md.dg[l][x](i, j));
      Gl[l] = L;
    }
    Mat<Dim> R = Mat<Dim>::Zero();
    for (int i = 0; i < Dim; ++i)
      for (int j = i; j < Dim; ++j) {
        double s = 0.0;
        for (int k = 0; k < Dim; ++k)
          for (int l = 0; l < Dim; ++l) {
            const double gkl = gi(k, l);
            s += 0.5 * gkl *
                 (wide[k][j][x](i, l) + wide[i][l][x](k, j) - wide[i][j][x](k, l) -
                  compact[k][l][x](i, j));
            s += dginv[k](k, l) * Gl[l](i, j) - dginv[i](k, l) * Gl[l](k, j);
            s += G[k](k, l) * G[l](i, j) - G[k](i, l) * G[l](k, j);
          }
        R(i, j) = s;
        R(j, i) = s;
      }
    ric[x] = R;
  }
  return ric;
}

template <int Dim>
SymTensorField<Dim> ricci(const GridModel<Dim>& m) {
  return ricci(MetricData<Dim>(m));
}

template <int Dim>
ScalarField<Dim> trace(const SymTensorField<Dim>& ginv, const SymTensorField<Dim>& T) {
  ScalarField<Dim> r(T.size());
  for (std::size_t x = 0; x < T.size(); ++x) r[x] = (ginv[x] * T[x]).trace();
  return r;
}

template <int Dim>
ScalarField<Dim> scalar_curvature(const MetricData<Dim>& md) {
  return trace<Dim>(md.ginv, ricci(md));
}

template <int Dim>
ScalarField<Dim> scalar_curvature(const GridModel<Dim>& m) {
  return scalar_curvature(MetricData<Dim>(m));
}

/// Index-lowered covariant derivative: result[x](i, j) = nabla_i V_j with V_j = g_jk V^k.
template <int Dim>
SymTensorField<Dim> covariant_derivative_lowered(const MetricData<Dim>& md, const VectorField<Dim>& V) {
  const GridModel<Dim>& m = *md.model;
  VectorField<Dim> low(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) low[x] = m.g[x] * V[x];
  const auto d = gradient_fields(m.grid, low);
  SymTensorField<Dim> r(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) {
    Mat<Dim> D;
    for (int i = 0; i < Dim; ++i)
      for (int j = 0; j < Dim; ++j) {
        double s = d[i][x](j);
        for (int k = 0; k < Dim; ++k) s -= md.gamma[x][k](i, j) * low[x](k);
        D(i, j) = s;
      }
    r[x] = D;
  }
  return r;
}

/// (L_V g)_ij = nabla_i V_j + nabla_j V_i.
template <int Dim>
SymTensorField<Dim> lie_derivative_metric(const MetricData<Dim>& md, const VectorField<Dim>& V) {
  auto D = covariant_derivative_lowered(md, V);
  for (auto& v : D) v = v + v.transpose().eval();
  return D;
}

template <int Dim>
SymTensorField<Dim> lie_derivative_metric(const GridModel<Dim>& m, const VectorField<Dim>& V) {
  return lie_derivative_metric(MetricData<Dim>(m), V);
}

/// (delta T)_j = -g^ik nabla_i T_kj. The result carries a lower index.
template <int Dim>
VectorField<Dim> divergence(const MetricData<Dim>& md, const SymTensorField<Dim>& T) {
  const GridModel<Dim>& m = *md.model;
  const auto d = gradient_fields(m.grid, T);
  VectorField<Dim> r(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) {
    const auto& G = md.gamma[x];
    Vec<Dim> v = Vec<Dim>::Zero();
    for (int j = 0; j < Dim; ++j) {
      double s = 0.0;
      for (int i = 0; i < Dim; ++i)
        for (int k = 0; k < Dim; ++k) {
          double nab = d[i][x](k, j);
          for (int l = 0; l < Dim; ++l) nab -= G[l](i, k) * T[x](l, j) + G[l](i, j) * T[x](k, l);
          s += md.ginv[x](i, k) * nab;
        }
      v(j) = -s;
    }
    r[x] = v;
  }
  return r;
}

template <int Dim>
VectorField<Dim> divergence(const GridModel<Dim>& m, const SymTensorField<Dim>& T) {
  return divergence(MetricData<Dim>(m), T);
}

/// nabla_i nabla_j f with the compact second-difference stencil.
template <int Dim>
SymTensorField<Dim> hessian(const MetricData<Dim>& md, const ScalarField<Dim>& f) {
  const Grid<Dim>& grid = md.grid();
  const auto d = gradient_fields(grid, f);
  std::array<std::array<ScalarField<Dim>, Dim>, Dim> d2;
  for (int a = 0; a < Dim; ++a)
    for (int b = a; b < Dim; ++b) d2[a][b] = diff2(grid, f, a, b);
  SymTensorField<Dim> H(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) {
    Mat<Dim> M;
    for (int i = 0; i < Dim; ++i)
      for (int j = i; j < Dim; ++j) {
        double s = d2[i][j][x];
        for (int k = 0; k < Dim; ++k) s -= md.gamma[x][k](i, j) * d[k][x];
        M(i, j) = s;
        M(j, i) = s;
      }
    H[x] = M;
  }
  return H;
}

/// |grad f|^2_g.
template <int Dim>
ScalarField<Dim> gradient_norm_sq(const MetricData<Dim>& md, const ScalarField<Dim>& f) {
  const auto d = gradient_fields(md.grid(), f);
  ScalarField<Dim> r(f.size());
  for (std::size_t x = 0; x < f.size(); ++x) {
    Vec<Dim> v;
    for (int a = 0; a < Dim; ++a) v(a) = d[a][x];
    r[x] = v.dot(md.ginv[x] * v);
  }
  return r;
}

template <int Dim>
ScalarField<Dim> laplacian_scalar(const MetricData<Dim>& md, const ScalarField<Dim>& f) {
  return trace<Dim>(md.ginv, hessian(md, f));
}

template <int Dim>
ScalarField<Dim> laplacian_scalar(const GridModel<Dim>& m, const ScalarField<Dim>& f) {
  return laplacian_scalar(MetricData<Dim>(m), f);
}

/// Rough Laplacian g^ab nabla_a nabla_b T of a symmetric 2-tensor. The
/// principal part uses the compact stencil so that on a constant metric it
/// is exactly the componentwise discrete Laplacian.
template <int Dim>
SymTensorField<Dim> laplacian_tensor(const MetricData<Dim>& md, const SymTensorField<Dim>& T) {
  const Grid<Dim>& grid = md.grid();
  const std::size_t N = T.size();
  const auto dT = gradient_fields(grid, T);
  std::array<std::array<SymTensorField<Dim>, Dim>, Dim> d2T;
  for (int a = 0; a < Dim; ++a)
    for (int b = a; b < Dim; ++b) d2T[a][b] = diff2(grid, T, a, b);
  // dGamma[a][x][c] = D_a Gamma^c
  std::array<ConnectionField<Dim>, Dim> dG;
  for (int a = 0; a < Dim; ++a) {
    dG[a].resize(N);
    for (int c = 0; c < Dim; ++c) {
      SymTensorField<Dim> comp(N);
      for (std::size_t x = 0; x < N; ++x) comp[x] = md.gamma[x][c];
      const auto dc = diff(grid, comp, a);
      for (std::size_t x = 0; x < N; ++x) dG[a][x][c] = dc[x];
    }
  }
  SymTensorField<Dim> r(N);
  for (std::size_t x = 0; x < N; ++x) {
    const auto& G = md.gamma[x];
    // nabla_b T_ij
    std::array<Mat<Dim>, Dim> nT;
    for (int b = 0; b < Dim; ++b) {
      Mat<Dim> M = dT[b][x];
      for (int i = 0; i < Dim; ++i)
        for (int j = 0; j < Dim; ++j)
          for (int c = 0; c < Dim; ++c) M(i, j) -= G[c](b, i) * T[x](c, j) + G[c](b, j) * T[x](i, c);
      nT[b] = M;
    }
    Mat<Dim> L = Mat<Dim>::Zero();
    for (int a = 0; a < Dim; ++a)
      for (int b = 0; b < Dim; ++b) {
        const double gab = md.ginv[x](a, b);
        if (gab == 0.0) continue;
        const Mat<Dim>& second = a <= b ? d2T[a][b][x] : d2T[b][a][x];
        for (int i = 0; i < Dim; ++i)
          for (int j = 0; j < Dim; ++j) {
            double s = second(i, j);
            for (int c = 0; c < Dim; ++c) {
              s -= dG[a][x][c](b, i) * T[x](c, j) + G[c](b, i) * dT[a][x](c, j);
              s -= dG[a][x][c](b, j) * T[x](i, c) + G[c](b, j) * dT[a][x](i, c);
              s -= G[c](a, b) * nT[c](i, j) + G[c](a, i) * nT[b](c, j) + G[c](a, j) * nT[b](i, c);
            }
            L(i, j) += gab * s;
          }
      }
    r[x] = 0.5 * (L + L.transpose());
  }
  return r;
}

template <int Dim>
SymTensorField<Dim> laplacian_tensor(const GridModel<Dim>& m, const SymTensorField<Dim>& T) {
  return laplacian_tensor(MetricData<Dim>(m), T);
}

/// Full curvature tensor R_ijkl (R_ik = g^jl R_ijkl) rebuilt from Ricci;
/// exact in dimensions 2 and 3 where the Weyl tensor vanishes.
template <int Dim>
std::array<double, Dim * Dim * Dim * Dim> riemann_from_ricci(const Mat<Dim>& g, const Mat<Dim>& ric,
                                                             double R) {
  std::array<double, Dim * Dim * Dim * Dim> rm{};
  auto at = [](int i, int j, int k, int l) { return ((i * Dim + j) * Dim + k) * Dim + l; };
  for (int i = 0; i < Dim; ++i)
    for (int j = 0; j < Dim; ++j)
      for (int k = 0; k < Dim; ++k)
        for (int l = 0; l < Dim; ++l) {
          const double gg = g(i, k) * g(j, l) - g(i, l) * g(j, k);
          if constexpr (Dim == 2) {
            rm[at(i, j, k, l)] = 0.5 * R * gg;
          } else {
            rm[at(i, j, k, l)] = g(i, k) * ric(j, l) + g(j, l) * ric(i, k) - g(i, l) * ric(j, k) -
                                 g(j, k) * ric(i, l) - 0.5 * R * gg;
          }
        }
  return rm;
}

/// Lichnerowicz Laplacian: Delta T + 2 R_ikjl T^kl - R_ik T^k_j - R_jk T^k_i.
template <int Dim>
SymTensorField<Dim> lichnerowicz(const MetricData<Dim>& md, const SymTensorField<Dim>& T) {
  auto L = laplacian_tensor(md, T);
  const auto ric = ricci(md);
  for (std::size_t x = 0; x < T.size(); ++x) {
    const Mat<Dim>& g = md.model->g[x];
    const Mat<Dim>& gi = md.ginv[x];
    const double R = (gi * ric[x]).trace();
    if (ric[x].cwiseAbs().maxCoeff() == 0.0) continue;
    const auto rm = riemann_from_ricci<Dim>(g, ric[x], R);
    const Mat<Dim> Tup = gi * T[x] * gi;
    const Mat<Dim> mixed = gi * T[x];  // T^k_j
    Mat<Dim> extra = Mat<Dim>::Zero();
    for (int i = 0; i < Dim; ++i)
      for (int j = 0; j < Dim; ++j) {
        double s = 0.0;
        for (int k = 0; k < Dim; ++k)
          for (int l = 0; l < Dim; ++l) s += 2.0 * rm[((i * Dim + k) * Dim + j) * Dim + l] * Tup(k, l);
        for (int k = 0; k < Dim; ++k) s -= ric[x](i, k) * mixed(k, j) + ric[x](j, k) * mixed(k, i);
        extra(i, j) = s;
      }
    L[x] += 0.5 * (extra + extra.transpose());
  }
  return L;
}

template <int Dim>
SymTensorField<Dim> lichnerowicz(const GridModel<Dim>& m, const SymTensorField<Dim>& T) {
  return lichnerowicz(MetricData<Dim>(m), T);
}

/// Riemannian volume element sqrt(det g) per node.
template <int Dim>
ScalarField<Dim> volume_density(const GridModel<Dim>& m) {
  ScalarField<Dim> r(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) r[x] = std::sqrt(m.g[x].determinant());
  return r;
}

/// Midpoint-rule integral of f against dV_g.
template <int Dim>
double integrate(const GridModel<Dim>& m, const ScalarField<Dim>& f) {
  double s = 0.0;
  for (std::size_t x = 0; x < m.size(); ++x) s += f[x] * std::sqrt(m.g[x].determinant());
  return s * m.grid.cell_volume();
}

template <int Dim>
double volume(const GridModel<Dim>& m) {
  return integrate(m, ScalarField<Dim>(m.size(), 1.0));
}

// Pointwise inner products, indices raised with g^{-1}.
inline double pointwise_inner(double a, double b, const auto&, const auto&) { return a * b; }
template <int Dim>
double pointwise_inner(const Vec<Dim>& a, const Vec<Dim>& b, const Mat<Dim>& g, const Mat<Dim>&) {
  return a.dot(g * b);
}
template <int Dim>
double pointwise_inner(const Mat<Dim>& a, const Mat<Dim>& b, const Mat<Dim>&, const Mat<Dim>& gi) {
  return (gi * a * gi * b).trace();
}

struct NormReport {
  double l2 = 0.0;       // (int |f|^2 dV)^{1/2}
  double sup = 0.0;      // max_x |f|
  double sobolev = 0.0;  // W^{k,2}
  double ck = 0.0;       // max over orders <= k of sup |D^m f|, a C^k proxy
};

/// Discrete L^2, sup, W^{k,2} and C^k-proxy norms for k <= 2. Derivatives
/// are coordinate finite differences; all indices are measured with g.
template <int Dim, class T>
NormReport norms(const GridModel<Dim>& m, const std::vector<T>& f, int k) {
  if (k < 0 || k > 2) throw RejectedInput("norms", "derivative order must be 0, 1 or 2");
  const auto ginv = inverse_metric(m);
  const auto dens = volume_density(m);
  const double cell = m.grid.cell_volume();
  NormReport rep;
  double w2 = 0.0;
  auto accumulate = [&](const std::vector<double>& pointwise_sq) {
    double s = 0.0, sup = 0.0;
    for (std::size_t x = 0; x < m.size(); ++x) {
      s += pointwise_sq[x] * dens[x] * cell;
      sup = std::max(sup, std::sqrt(std::max(0.0, pointwise_sq[x])));
    }
    w2 += s;
    rep.ck = std::max(rep.ck, sup);
    return std::pair{s, sup};
  };
  std::vector<double> sq(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) sq[x] = pointwise_inner(f[x], f[x], m.g[x], ginv[x]);
  auto [l2sq, sup] = accumulate(sq);
  rep.l2 = std::sqrt(l2sq);
  rep.sup = sup;
  if (k >= 1) {
    const auto d = gradient_fields(m.grid, f);
    for (std::size_t x = 0; x < m.size(); ++x) {
      double s = 0.0;
      for (int a = 0; a < Dim; ++a)
        for (int b = 0; b < Dim; ++b) s += ginv[x](a, b) * pointwise_inner(d[a][x], d[b][x], m.g[x], ginv[x]);
      sq[x] = s;
    }
    accumulate(sq);
  }
  if (k >= 2) {
    std::array<std::array<std::vector<T>, Dim>, Dim> d2;
    for (int a = 0; a < Dim; ++a)
      for (int b = a; b < Dim; ++b) {
        d2[a][b] = diff2(m.grid, f, a, b);
        if (a != b) d2[b][a] = d2[a][b];
      }
    for (std::size_t x = 0; x < m.size(); ++x) {
      double s = 0.0;
      for (int a = 0; a < Dim; ++a)
        for (int b = 0; b < Dim; ++b)
          for (int c = 0; c < Dim; ++c)
            for (int e = 0; e < Dim; ++e)
              s += ginv[x](a, c) * ginv[x](b, e) * pointwise_inner(d2[a][b][x], d2[c][e][x], m.g[x], ginv[x]);
      sq[x] = s;
    }
    accumulate(sq);
  }
  rep.sobolev = std::sqrt(w2);
  return rep;
}

/// Largest stable explicit step for the parabolic flows on this grid:
/// 0.2 h^2 / max_x lambda_max(g^{-1}).
template <int Dim>
double cfl_bound(const GridModel<Dim>& m) {
  double lam = 0.0;
  for (const auto& g : m.g) {
    Eigen::SelfAdjointEigenSolver<Mat<Dim>> es(g);
    lam = std::max(lam, 1.0 / es.eigenvalues().minCoeff());
  }
  const double h = m.grid.min_spacing();
  return 0.2 * h * h / lam;
}

}  // namespace rflow
