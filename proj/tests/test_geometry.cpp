#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>

#include "rflow/frame.hpp"
#include "rflow/geometry.hpp"
#include "rflow/serialize.hpp"

using namespace rflow;
using std::numbers::pi;

namespace {

using Fn2 = std::function<double(double, double)>;

GridModel<2> conformal(int n, const Fn2& u, double period = 2 * pi) {
  auto m = GridModel<2>::flat(Grid<2>::cube(n, period));
  for (std::size_t x = 0; x < m.size(); ++x) {
    const auto p = m.grid.position(x);
    m.g[x] = std::exp(2 * u(p[0], p[1])) * Mat<2>::Identity();
  }
  return m;
}

double conformal_christoffel_error(int n) {
  // u = sin x: Gamma^x_xx = u_x = cos x.
  const auto m = conformal(n, [](double x, double) { return std::sin(x); });
  const auto G = christoffel(m);
  double err = 0;
  for (std::size_t x = 0; x < m.size(); ++x) {
    const auto p = m.grid.position(x);
    err = std::max(err, std::abs(G[x][0](0, 0) - std::cos(p[0])));
  }
  return err;
}

// u = 0.2 sin x cos y, Delta_0 u = -2u; Ric = -Delta_0 u * delta, R = -2 e^{-2u} Delta_0 u.
const Fn2 kBump = [](double x, double y) { return 0.2 * std::sin(x) * std::cos(y); };

std::pair<double, double> conformal_curvature_errors(int n) {
  const auto m = conformal(n, kBump);
  const auto ric = ricci(m);
  const auto R = scalar_curvature(m);
  double e_ric = 0, e_r = 0;
  for (std::size_t x = 0; x < m.size(); ++x) {
    const auto p = m.grid.position(x);
    const double u = kBump(p[0], p[1]);
    const double lap = -2 * u;
    e_ric = std::max(e_ric, (ric[x] - (-lap) * Mat<2>::Identity()).cwiseAbs().maxCoeff());
    e_r = std::max(e_r, std::abs(R[x] - (-2 * std::exp(-2 * u) * lap)));
  }
  return {e_ric, e_r};
}

// Ricci of an analytic coordinate metric at a point by nested central
// differences; independent of the grid code.
Eigen::Matrix3d coordinate_ricci(const std::function<Eigen::Matrix3d(const Eigen::Vector3d&)>& g,
                                 const Eigen::Vector3d& p) {
  const double h = 1e-4;
  auto gamma = [&](const Eigen::Vector3d& q) {
    std::array<Eigen::Matrix3d, 3> dg;
    for (int a = 0; a < 3; ++a) {
      Eigen::Vector3d e = Eigen::Vector3d::Zero();
      e(a) = h;
      dg[a] = (g(q + e) - g(q - e)) / (2 * h);
    }
    const Eigen::Matrix3d gi = g(q).inverse();
    std::array<Eigen::Matrix3d, 3> G;
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double s = 0;
          for (int l = 0; l < 3; ++l) s += gi(k, l) * (dg[i](j, l) + dg[j](i, l) - dg[l](i, j));
          G[k](i, j) = 0.5 * s;
        }
    return G;
  };
  const double h2 = 1e-3;
  std::array<std::array<Eigen::Matrix3d, 3>, 3> dG;  // dG[a][k] = d_a Gamma^k
  for (int a = 0; a < 3; ++a) {
    Eigen::Vector3d e = Eigen::Vector3d::Zero();
    e(a) = h2;
    const auto Gp = gamma(p + e), Gm = gamma(p - e);
    for (int k = 0; k < 3; ++k) dG[a][k] = (Gp[k] - Gm[k]) / (2 * h2);
  }
  const auto G = gamma(p);
  Eigen::Matrix3d R = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) {
        R(i, j) += dG[k][k](i, j) - dG[i][k](k, j);
        for (int l = 0; l < 3; ++l) R(i, j) += G[k](k, l) * G[l](i, j) - G[k](i, l) * G[l](k, j);
      }
  return R;
}

// Left-invariant coframe of SU(2) in Euler angles (theta, phi, psi), scaled
// so that sum a_i theta_i^2 with a = 1 is the unit round metric.
Eigen::Matrix3d euler_coframe(const Eigen::Vector3d& q) {
  const double th = q(0), ps = q(2);
  Eigen::Matrix3d S;
  S << std::sin(ps), -std::sin(th) * std::cos(ps), 0, std::cos(ps), std::sin(th) * std::sin(ps), 0, 0,
      std::cos(th), 1;
  return 0.5 * S;
}

}  // namespace

TEST(Christoffel, FlatMetricHasZeroConnection) {
  const auto m = GridModel<2>::constant(Grid<2>::cube(8), (Mat<2>() << 2, 0.3, 0.3, 1).finished());
  for (const auto& G : christoffel(m))
    for (const auto& c : G) EXPECT_EQ(c.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Christoffel, ConformalMetricSecondOrder) {
  const double e16 = conformal_christoffel_error(16), e32 = conformal_christoffel_error(32);
  EXPECT_LT(e32, 0.05);
  EXPECT_GT(e16 / e32, 3.5);
}

TEST(Ricci, FlatTorusIsRicciFlat) {
  const auto m = GridModel<3>::constant(Grid<3>::cube(8), Mat<3>::Identity() * 3.0);
  for (const auto& r : ricci(m)) EXPECT_EQ(r.cwiseAbs().maxCoeff(), 0.0);
  for (double R : scalar_curvature(m)) EXPECT_EQ(R, 0.0);
}

TEST(Ricci, ConformalTorusMatchesOracleAtSecondOrder) {
  const auto [ric16, r16] = conformal_curvature_errors(16);
  const auto [ric32, r32] = conformal_curvature_errors(32);
  EXPECT_LT(ric32, 5e-3);
  EXPECT_GT(ric16 / ric32, 3.5);
  EXPECT_GT(r16 / r32, 3.5);
}

TEST(Ricci, SmallConformalPerturbation) {
  // u = 0.1 sin x: Ric = 0.1 sin x * delta up to O(h^2)
  const auto m = conformal(32, [](double x, double) { return 0.1 * std::sin(x); });
  const auto ric = ricci(m);
  double err = 0;
  for (std::size_t x = 0; x < m.size(); ++x) {
    const auto p = m.grid.position(x);
    err = std::max(err, (ric[x] - 0.1 * std::sin(p[0]) * Mat<2>::Identity()).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(err, 2e-3);
}

TEST(ScalarCurvature, EqualsTraceOfRicci) {
  auto m = conformal(16, kBump);
  m.g[5](0, 1) = m.g[5](1, 0) = 0.1;
  const auto ric = ricci(m);
  const auto R = scalar_curvature(m);
  for (std::size_t x = 0; x < m.size(); ++x) EXPECT_NEAR(R[x], (m.g[x].inverse() * ric[x]).trace(), 1e-12);
}

TEST(ScalarCurvature, ThreeDimensionalConformalTorus) {
  // g = e^{2u} delta in 3D: R = -e^{-2u}(4 Delta u + 2 |du|^2)
  auto err = [](int n) {
    auto m = GridModel<3>::flat(Grid<3>::cube(n));
    auto u = [](double x, double y, double z) { return 0.1 * std::sin(x) + 0.05 * std::cos(y + z); };
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto p = m.grid.position(i);
      m.g[i] = std::exp(2 * u(p[0], p[1], p[2])) * Mat<3>::Identity();
    }
    const auto R = scalar_curvature(m);
    double e = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto p = m.grid.position(i);
      const double x = p[0], y = p[1], z = p[2];
      const double lap = -0.1 * std::sin(x) - 2 * 0.05 * std::cos(y + z);
      const double du2 = std::pow(0.1 * std::cos(x), 2) + 2 * std::pow(0.05 * std::sin(y + z), 2);
      e = std::max(e, std::abs(R[i] + std::exp(-2 * u(x, y, z)) * (4 * lap + 2 * du2)));
    }
    return e;
  };
  const double e8 = err(8), e16 = err(16);
  EXPECT_GT(e8 / e16, 3.5);
}

TEST(Geometry, DegenerateMetricRejected) {
  auto m = GridModel<2>::flat(Grid<2>::cube(8));
  m.g[3] = Mat<2>::Zero();
  EXPECT_THROW(ricci(m), RejectedInput);
  m.g[3] = (Mat<2>() << 1, 2, 2, 1).finished();  // indefinite
  EXPECT_THROW(christoffel(m), RejectedInput);
}

TEST(FrameRicci, UnitRoundSphere) {
  const auto m = FrameModel::round_sphere(1.0);
  EXPECT_TRUE(ricci(m).isApprox(2.0 * Eigen::Matrix3d::Identity(), 1e-14));
  EXPECT_NEAR(scalar_curvature(m), 6.0, 1e-13);
  EXPECT_NEAR(volume(m), 2 * pi * pi, 1e-12);
}

TEST(FrameRicci, GeneralFormulaMatchesMilnor) {
  for (const Eigen::Vector3d& a : {Eigen::Vector3d(1, 1, 0.3), Eigen::Vector3d(0.5, 2, 3), Eigen::Vector3d(4, 4, 4)}) {
    const auto m = FrameModel::sphere3(a);
    const Eigen::Vector3d milnor = milnor_ricci_diagonal(Eigen::Vector3d::Constant(2.0), a);
    const Eigen::MatrixXd ric = ricci(m);
    EXPECT_LT((ric.diagonal() - milnor).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((ric - Eigen::MatrixXd(ric.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FrameRicci, MatchesCoordinateOracleOnBergerSphere) {
  const Eigen::Vector3d a(1.0, 1.3, 0.4);
  auto g = [&](const Eigen::Vector3d& q) {
    const Eigen::Matrix3d T = euler_coframe(q);
    return Eigen::Matrix3d(T.transpose() * a.asDiagonal() * T);
  };
  const Eigen::Vector3d p(1.0, 0.3, 0.7);
  const Eigen::Matrix3d Rc = coordinate_ricci(g, p);
  const Eigen::Matrix3d E = euler_coframe(p).inverse();  // columns: frame vectors
  const Eigen::Matrix3d Rf = E.transpose() * Rc * E;
  const Eigen::MatrixXd ric = ricci(FrameModel::sphere3(a));
  EXPECT_LT((Rf - ric).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(FrameRicci, PermutationNatural) {
  const Eigen::Vector3d a(0.7, 1.9, 3.1);
  const Eigen::VectorXd r = ricci(FrameModel::sphere3(a)).diagonal();
  const Eigen::VectorXd rp = ricci(FrameModel::sphere3(Eigen::Vector3d(a(2), a(0), a(1)))).diagonal();
  EXPECT_NEAR(rp(0), r(2), 1e-12);
  EXPECT_NEAR(rp(1), r(0), 1e-12);
  EXPECT_NEAR(rp(2), r(1), 1e-12);
}

TEST(FrameRicci, RejectsBadModels) {
  auto m = FrameModel::round_sphere(1.0);
  m.a(1) = -1.0;
  EXPECT_THROW(ricci(m), RejectedInput);
  m = FrameModel::round_sphere(1.0);
  m.structure(0, 1, 2) = 1.0;  // breaks antisymmetry
  EXPECT_THROW(ricci(m), RejectedInput);
}

TEST(FrameLie, KillingFields) {
  const auto round = FrameModel::round_sphere(2.0);
  for (int k = 0; k < 3; ++k)
    EXPECT_LT(lie_derivative_metric(round, Eigen::Vector3d::Unit(k)).cwiseAbs().maxCoeff(), 1e-14);
  const auto berger = FrameModel::berger(1.0, 0.5);
  EXPECT_LT(lie_derivative_metric(berger, Eigen::Vector3d::Unit(2)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_GT(lie_derivative_metric(berger, Eigen::Vector3d::Unit(0)).cwiseAbs().maxCoeff(), 0.5);
}

TEST(Divergence, ConstantTensorOnFlatIsZero) {
  const auto m = GridModel<2>::flat(Grid<2>::cube(8));
  const SymTensorField<2> T(m.size(), (Mat<2>() << 1, 2, 2, 3).finished());
  EXPECT_EQ(max_abs(divergence(m, T)), 0.0);
}

TEST(Divergence, OfLieDerivativeMatchesSymbolic) {
  // V = (sin y, 0): T = L_V g has T_xy = cos y; delta T = (sin y, 0).
  auto err = [](int n) {
    const auto m = GridModel<2>::flat(Grid<2>::cube(n));
    VectorField<2> V(m.size());
    for (std::size_t x = 0; x < m.size(); ++x) V[x] = Vec<2>(std::sin(m.grid.position(x)[1]), 0.0);
    const auto d = divergence(m, lie_derivative_metric(m, V));
    double e = 0;
    for (std::size_t x = 0; x < m.size(); ++x)
      e = std::max(e, (d[x] - Vec<2>(std::sin(m.grid.position(x)[1]), 0.0)).cwiseAbs().maxCoeff());
    return e;
  };
  EXPECT_LT(err(32), 0.015);
  EXPECT_GT(err(16) / err(32), 3.5);
}

TEST(Divergence, AdjointToLieDerivative) {
  auto gap = [](int n, bool curved) {
    auto m = curved ? conformal(n, kBump) : GridModel<2>::flat(Grid<2>::cube(n));
    const MetricData<2> md(m);
    SymTensorField<2> T(m.size());
    VectorField<2> V(m.size());
    for (std::size_t x = 0; x < m.size(); ++x) {
      const auto p = m.grid.position(x);
      T[x] << std::cos(p[0] + p[1]), 0.3 * std::sin(p[1]), 0.3 * std::sin(p[1]), std::cos(2 * p[0]);
      V[x] << std::sin(p[1]), std::cos(p[0]) * std::sin(p[1]);
    }
    const auto dT = divergence(md, T);
    const auto LV = lie_derivative_metric(md, V);
    ScalarField<2> lhs(m.size()), rhs(m.size());
    for (std::size_t x = 0; x < m.size(); ++x) {
      lhs[x] = dT[x].dot(V[x]);
      rhs[x] = 0.5 * pointwise_inner(T[x], LV[x], m.g[x], md.ginv[x]);
    }
    return std::abs(integrate(m, lhs) - integrate(m, rhs));
  };
  // Summation by parts holds exactly for the central stencils, with or
  // without curvature.
  EXPECT_LT(gap(16, false), 1e-12);
  EXPECT_LT(gap(16, true), 1e-12);
  EXPECT_LT(gap(32, true), 1e-12);
}

TEST(LieDerivative, ZeroFieldAndFlatExample) {
  const auto m = GridModel<2>::flat(Grid<2>::cube(64));
  EXPECT_EQ(max_abs(lie_derivative_metric(m, VectorField<2>(m.size(), Vec<2>::Zero()))), 0.0);
  VectorField<2> V(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) V[x] = Vec<2>(std::sin(m.grid.position(x)[0]), 0.0);
  const auto L = lie_derivative_metric(m, V);
  double e = 0;
  for (std::size_t x = 0; x < m.size(); ++x) {
    const Mat<2> want = (Mat<2>() << 2 * std::cos(m.grid.position(x)[0]), 0, 0, 0).finished();
    e = std::max(e, (L[x] - want).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(e, 4e-3);
}

TEST(Laplacian, ScalarFourierEigenfunction) {
  const auto m = GridModel<2>::flat(Grid<2>::cube(32));
  const double h = m.grid.spacing(0);
  for (int k : {1, 3}) {
    ScalarField<2> f(m.size());
    for (std::size_t x = 0; x < m.size(); ++x) f[x] = std::sin(k * m.grid.position(x)[0]);
    const auto L = laplacian_scalar(m, f);
    const double symbol = 2 * (1 - std::cos(k * h)) / (h * h);
    for (std::size_t x = 0; x < m.size(); ++x) {
      EXPECT_NEAR(L[x], -symbol * f[x], 1e-12);
      EXPECT_NEAR(L[x], -k * k * f[x], 0.01 * k * k * k * k);
    }
  }
  for (double v : laplacian_scalar(m, ScalarField<2>(m.size(), 4.0))) EXPECT_EQ(v, 0.0);
}

TEST(Laplacian, LichnerowiczOnFlatIsComponentwise) {
  const auto m = GridModel<2>::flat(Grid<2>::cube(16));
  SymTensorField<2> T(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) {
    const auto p = m.grid.position(x);
    T[x] << std::sin(p[0]), std::cos(p[0] + 2 * p[1]), std::cos(p[0] + 2 * p[1]), std::sin(p[1]) * std::sin(p[0]);
  }
  const auto want = lincomb(1.0, diff2(m.grid, T, 0, 0), 1.0, diff2(m.grid, T, 1, 1));
  EXPECT_LT(max_abs(lincomb(1.0, lichnerowicz(m, T), -1.0, want)), 1e-12);
  EXPECT_LT(max_abs(lincomb(1.0, laplacian_tensor(m, T), -1.0, want)), 1e-12);
}

TEST(Laplacian, LichnerowiczAnnihilatesMetricOnCurvedBackground) {
  // Delta_L g = 0 in the continuum; discretely O(h^2).
  auto err = [](int n) {
    const auto m = conformal(n, kBump);
    return max_abs(lichnerowicz(m, m.g));
  };
  EXPECT_LT(err(32), 0.02);
  EXPECT_GT(err(16) / err(32), 3.0);
}

TEST(Norms, ZeroAndFlatSine) {
  const auto m = GridModel<2>::flat(Grid<2>::cube(16));
  const auto z = norms(m, ScalarField<2>(m.size(), 0.0), 2);
  EXPECT_EQ(z.l2, 0.0);
  EXPECT_EQ(z.sup, 0.0);
  EXPECT_EQ(z.sobolev, 0.0);
  ScalarField<2> f(m.size());
  for (std::size_t x = 0; x < m.size(); ++x) f[x] = std::sin(m.grid.position(x)[0]);
  const auto n0 = norms(m, f, 0), n1 = norms(m, f, 1), n2 = norms(m, f, 2);
  EXPECT_NEAR(n0.l2 * n0.l2, 2 * pi * pi, 1e-10);
  EXPECT_NEAR(n0.sup, 1.0, 1e-12);
  EXPECT_LE(n0.sobolev, n1.sobolev);
  EXPECT_LE(n1.sobolev, n2.sobolev);
  EXPECT_GE(n2.ck, n0.ck);
  EXPECT_THROW(norms(m, f, 3), RejectedInput);
}

TEST(Volume, FlatScaledAndScaling) {
  const Grid<2> unit = Grid<2>::cube(8, 1.0);
  EXPECT_NEAR(volume(GridModel<2>::flat(unit)), 1.0, 1e-14);
  EXPECT_NEAR(volume(GridModel<2>::constant(unit, 4 * Mat<2>::Identity())), 4.0, 1e-14);
  auto m = conformal(16, kBump);
  const double v = volume(m);
  for (auto& g : m.g) g *= 3.0;
  EXPECT_NEAR(volume(m), 3.0 * v, 1e-12 * v);
  auto m3 = GridModel<3>::constant(Grid<3>::cube(8, 1.0), Mat<3>::Identity());
  for (auto& g : m3.g) g *= 4.0;
  EXPECT_NEAR(volume(m3), 8.0, 1e-13);
}

TEST(Serialize, MetricRoundTripsBitExact) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  auto m = GridModel<2>::flat(Grid<2>({8, 10}, {1.0, 2.5}));
  for (auto& g : m.g) {
    g(0, 0) += u(rng);
    g(1, 1) += u(rng);
    g(0, 1) = g(1, 0) = u(rng);
  }
  for (auto fmt : {FieldFormat::binary, FieldFormat::text}) {
    std::stringstream ss;
    write_metric(ss, m, fmt);
    const auto back = read_metric<2>(ss, fmt);
    EXPECT_TRUE(back.grid == m.grid);
    for (std::size_t x = 0; x < m.size(); ++x) EXPECT_EQ(back.g[x], m.g[x]);
  }
  std::stringstream bin;
  write_metric(bin, m, FieldFormat::binary);
  EXPECT_EQ(bin.str().size(), 4u + 2 * 4 + 2 * 8 + m.size() * 3 * 8);
}

TEST(Serialize, TruncatedFileRejected) {
  std::stringstream ss;
  write_metric(ss, GridModel<2>::flat(Grid<2>::cube(8)), FieldFormat::binary);
  std::string s = ss.str();
  s.resize(s.size() - 8);
  std::stringstream cut(s);
  EXPECT_THROW(read_metric<2>(cut, FieldFormat::binary), RejectedInput);
}
