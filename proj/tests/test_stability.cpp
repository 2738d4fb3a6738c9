#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "rflow/stability.hpp"

using namespace rflow;
using std::numbers::pi;

namespace {

GridModel<2> perturbed(const GridModel<2>& h, double eps, const Mat<2>& shift = Mat<2>::Zero()) {
  auto m = h;
  for (std::size_t x = 0; x < m.size(); ++x) {
    const auto p = m.grid.position(x);
    Mat<2> d;
    d << std::sin(p[1]), 0.5 * std::sin(p[0] + p[1]), 0.5 * std::sin(p[0] + p[1]), std::cos(p[0]);
    m.g[x] += eps * d + shift;
  }
  return m;
}

std::vector<double> real_parts(const SpectralReport& r) {
  std::vector<double> v;
  for (Eigen::Index i = 0; i < r.eigenvalues.size(); ++i) v.push_back(r.eigenvalues(i).real());
  return v;
}

}  // namespace

TEST(LinearizedOperator, MatchesFourierOracleOnFlatTorus) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto L = assemble_linearized_pde(h, kInfiniteTau);
  const auto rep = spectrum(L, 1e-8);
  EXPECT_TRUE(rep.self_adjoint);
  const auto oracle = fourier_oracle(h.grid, kInfiniteTau);
  const auto got = real_parts(rep);
  ASSERT_EQ(got.size(), oracle.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], oracle[i], 1e-8);
  EXPECT_EQ(rep.n_neutral, 3);
  EXPECT_EQ(rep.n_grow, 0);
  EXPECT_NEAR(rep.gap, fourier_spectral_gap(h.grid, kInfiniteTau), 1e-8);
  EXPECT_NEAR(rep.gap, (2 - 2 * std::cos(2 * pi / 8)) / std::pow(2 * pi / 8, 2), 1e-10);
}

TEST(LinearizedOperator, FiniteTauShiftsTheSpectrum) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto a = real_parts(spectrum(assemble_linearized_pde(h, kInfiniteTau), 1e-8));
  const auto rep = spectrum(assemble_linearized_pde(h, 1.0), 1e-8);
  const auto b = real_parts(rep);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i] + 1.0, 1e-9);
  EXPECT_EQ(rep.n_neutral, 0);
  EXPECT_GE(rep.n_grow, 3);
}

TEST(LinearizedOperator, EqualsJacobianOfDeturckRhs) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto L = assemble_linearized_pde(h, 2.0);
  const double eps = 1e-6;
  const Eigen::Index n = L.dimension();
  for (Eigen::Index col = 0; col < n; col += 7) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
    e(col) = eps;
    GridModel<2> p{h.grid, lincomb(1.0, h.g, 1.0, unflatten(h.grid, e))};
    GridModel<2> m{h.grid, lincomb(1.0, h.g, -1.0, unflatten(h.grid, e))};
    const Eigen::VectorXd fd = (flatten(rhs_deturck(p, h, 2.0)) - flatten(rhs_deturck(m, h, 2.0))) / (2 * eps);
    EXPECT_LT((fd - L.A.col(col)).cwiseAbs().maxCoeff(), 1e-6) << "column " << col;
  }
}

TEST(FrameJacobian, RoundFixedPointSpectrum) {
  const FlowSpec<FrameModel> spec{FlowVariant::tau_flow, 1.0};
  const auto L = jacobian_ode(spec, FrameModel::round_sphere(4.0));
  Eigen::Matrix3d expected;
  expected << -1, 1, 1, 1, -1, 1, 1, 1, -1;
  EXPECT_LT((L.A - expected).cwiseAbs().maxCoeff(), 1e-6);
  const auto rep = spectrum(L, 1e-3);
  EXPECT_EQ(rep.n_grow, 1);
  EXPECT_EQ(rep.n_decay, 2);
  EXPECT_NEAR(rep.eigenvalues(0).real(), -2.0, 1e-6);
  EXPECT_NEAR(rep.eigenvalues(1).real(), -2.0, 1e-6);
  EXPECT_NEAR(rep.eigenvalues(2).real(), 1.0, 1e-6);
}

TEST(Spectrum, NonSymmetricOperator) {
  LinearOperator L;
  L.A.resize(2, 2);
  L.A << 1, 3, 0, -2;
  const auto rep = spectrum(L, 0.1);
  EXPECT_FALSE(rep.self_adjoint);
  EXPECT_NEAR(rep.eigenvalues(0).real(), -2, 1e-12);
  EXPECT_NEAR(rep.eigenvalues(1).real(), 1, 1e-12);
  const Eigen::Vector2d F(0.3, -0.7);
  const auto s = trichotomy_split(F, rep);
  EXPECT_LT((s.up + s.down + s.neutral - F).norm(), 1e-12);
  EXPECT_LT((L.A * s.up - s.up).norm(), 1e-12);
  EXPECT_LT((L.A * s.down + 2 * s.down).norm(), 1e-12);
}

TEST(Spectrum, RejectsBadInput) {
  LinearOperator L;
  EXPECT_THROW(spectrum(L, 0.1), RejectedInput);
  L.A = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_THROW(spectrum(L, 0.0), RejectedInput);
  L.A(0, 1) = std::nan("");
  EXPECT_THROW(spectrum(L, 0.1), RejectedInput);
  EXPECT_THROW(assemble_linearized_pde(GridModel<2>::flat(Grid<2>::cube(4)), -1.0), RejectedInput);
}

TEST(Trichotomy, SplitReassemblesAndIsOrthogonal) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto rep = spectrum(assemble_linearized_pde(h, 1.5), 1e-6);
  std::mt19937 rng(3);
  std::normal_distribution<double> nd;
  Eigen::VectorXd F(rep.modes.rows());
  for (auto& v : F) v = nd(rng);
  const auto s = trichotomy_split(F, rep);
  EXPECT_LT((s.up + s.down + s.neutral - F).cwiseAbs().maxCoeff(), 1e-10);
  const auto& w = rep.weights;
  const double total = weighted_norm(F, w);
  const double parts = std::hypot(weighted_norm(s.up, w), weighted_norm(s.down, w), weighted_norm(s.neutral, w));
  EXPECT_NEAR(total, parts, 1e-10 * total);
  EXPECT_NEAR(s.up.dot(w.asDiagonal() * s.down), 0.0, 1e-9);
}

TEST(Trichotomy, NeutralProjectionIsTheSpatialMean) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto rep = spectrum(assemble_linearized_pde(h, kInfiniteTau), 1e-8);
  Mat<2> c;
  c << 0.1, -0.02, -0.02, 0.05;
  const auto g = perturbed(h, 0.01, c);
  const auto k = flatten(lincomb(1.0, g.g, -1.0, h.g));
  const auto pk = project_neutral(k, rep);
  const auto expected = flatten(SymTensorField<2>(h.size(), c));
  EXPECT_LT((pk - expected).cwiseAbs().maxCoeff(), 1e-10);

  const std::vector<double> t{0.0, 1.0, 2.0};
  const std::vector<Eigen::VectorXd> series{k, k, k};
  EXPECT_LT((project_neutral(t, series, rep) - expected).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Integrability, NearestFlatMetricWithinFactorTwo) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto rep = spectrum(assemble_linearized_pde(h, kInfiniteTau), 1e-8);
  Mat<2> c;
  c << 0.03, 0.01, 0.01, -0.02;
  const auto g = perturbed(h, 0.05, c);
  const auto spatial = nearest_soliton_in_family(g, h);
  const auto spectral = nearest_soliton_in_family(g, h, &rep);
  EXPECT_LT((spatial.g1.g.front() - (Mat<2>::Identity() + c)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(spatial.ratio, 1.0, 1e-10);
  EXPECT_NEAR(spectral.ratio, 1.0, 1e-10);
  EXPECT_TRUE(spatial.factor_two_holds);
  EXPECT_TRUE(is_constant_coefficient(spatial.g1));
  EXPECT_THROW(nearest_soliton_in_family(g, g), RejectedInput);
}

TEST(Intervals, GrowthEqualityForSingleMode) {
  const double lam = 0.7, L = 2.0;
  auto series = [&](double t0) {
    std::vector<double> s;
    for (int i = 0; i <= 200; ++i) s.push_back(std::exp(lam * (t0 + L * i / 200.0)));
    return s;
  };
  auto v = growth_decay_check(series(0), series(L), std::exp(lam * L), 1e-9);
  EXPECT_TRUE(v.growth_holds);
  EXPECT_NEAR(v.growth_defect, 0.0, 1e-6);
  EXPECT_FALSE(v.decay_holds);

  auto decaying = [&](double t0) {
    std::vector<double> s;
    for (int i = 0; i <= 200; ++i) s.push_back(std::exp(-lam * (t0 + L * i / 200.0)));
    return s;
  };
  v = growth_decay_check(decaying(0), decaying(L), std::exp(lam * L), 1e-9);
  EXPECT_TRUE(v.decay_holds);
  EXPECT_NEAR(v.decay_defect, 0.0, 1e-6);
  EXPECT_THROW(growth_decay_check({1}, {1}, 1.0), RejectedInput);
  EXPECT_THROW(growth_decay_check({}, {1}, 2.0), InsufficientData);
}

TEST(Intervals, ThreeIntervalMonteCarloHasNoViolations) {
  std::mt19937 rng(20261014);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int violations = 0, growth = 0, decay = 0;
  const int draws = 2000, samples = 60;
  for (int d = 0; d < draws; ++d) {
    const double L = 1.0;
    const double delta = 1.0 + 2.0 * unit(rng);  // delta L in [1, 3]
    const int modes = 1 + static_cast<int>(unit(rng) * 6);
    std::vector<double> a(modes), lam(modes);
    for (int k = 0; k < modes; ++k) {
      a[k] = std::exp(-6.0 + 12.0 * unit(rng));
      const double mag = delta * (1.0 + 3.0 * unit(rng));
      lam[k] = unit(rng) < 0.5 ? mag : -mag;
    }
    auto interval = [&](int j) {
      std::vector<double> s;
      for (int i = 0; i <= samples; ++i) {
        const double t = L * (j + static_cast<double>(i) / samples);
        double q = 0;
        for (int k = 0; k < modes; ++k) q += a[k] * a[k] * std::exp(2 * lam[k] * t);
        s.push_back(std::sqrt(q));
      }
      return s;
    };
    const auto r = three_interval_test(interval(0), interval(1), interval(2), std::exp(L * delta / 4), true, 1e-12);
    if (r.verdict == IntervalVerdict::violation) ++violations;
    if (r.verdict == IntervalVerdict::growth_propagates) ++growth;
    if (r.verdict == IntervalVerdict::decay_propagates) ++decay;
  }
  EXPECT_EQ(violations, 0);
  EXPECT_GT(growth, 0);
  EXPECT_GT(decay, 0);
}

TEST(Intervals, NeutralPartBreaksTheDichotomy) {
  const std::vector<double> flat(10, 1.0);
  const auto r = three_interval_test(flat, flat, flat, 1.5, true);
  EXPECT_EQ(r.verdict, IntervalVerdict::violation);
  const auto relaxed = three_interval_test(flat, flat, flat, 1.5, false);
  EXPECT_NE(relaxed.verdict, IntervalVerdict::violation);
}

TEST(RateFit, RecoversExponent) {
  std::vector<double> t, y, y2;
  for (int i = 0; i <= 40; ++i) {
    t.push_back(0.1 * i);
    y.push_back(3.0 * std::exp(-2.0 * t.back()));
    y2.push_back(std::exp(-1.0 * t.back()) + std::exp(-5.0 * t.back()));
  }
  const auto f = fit_exponential_rate(t, y);
  EXPECT_NEAR(f.c, 2.0, 1e-6);
  EXPECT_NEAR(f.C, 3.0, 1e-6);
  EXPECT_LT(f.residual, 1e-10);
  EXPECT_NEAR(fit_exponential_rate(t, y2).c, 1.0, 0.02);
  EXPECT_THROW(fit_exponential_rate({0, 1, 2}, {1, 1, 1}), InsufficientData);
}

TEST(ResidualMonitor, RemainderIsQuadratic) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(16));
  auto remainder = [&](double eps) {
    Trajectory<GridModel<2>> traj;
    traj.push({0.0, perturbed(h, eps)});
    return residual_evolution_monitor(traj, h, h, 3.0);
  };
  const auto a = remainder(1e-2), b = remainder(5e-3);
  EXPECT_NEAR(a.samples[0].remainder_sup / b.samples[0].remainder_sup, 4.0, 0.1);
  EXPECT_TRUE(a.bounded);
  EXPECT_GT(a.fitted_C, 0.0);
  EXPECT_LT(std::abs(a.fitted_C - b.fitted_C), 0.05 * a.fitted_C);
}

TEST(ResidualMonitor, ZeroPerturbationHasZeroRemainder) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  Trajectory<GridModel<2>> traj;
  traj.push({0.0, h});
  traj.push({1.0, h});
  const auto mon = residual_evolution_monitor(traj, h, h, kInfiniteTau);
  for (const auto& s : mon.samples) EXPECT_EQ(s.remainder_sup, 0.0);
  EXPECT_TRUE(mon.bounded);
}

TEST(ResidualMonitor, LinearRegimeTracksMatrixExponential) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto rep = spectrum(assemble_linearized_pde(h, kInfiniteTau), 1e-8);
  FlowSpec<GridModel<2>> spec{FlowVariant::deturck};
  spec.background = h;
  auto deviation = [&](double eps) {
    const auto g0 = perturbed(h, eps);
    const auto traj = run_flow(FlowState<GridModel<2>>{0.0, g0}, spec, RunControl{0.01, 1.0, 0.25});
    const Eigen::VectorXd k0 = flatten(lincomb(1.0, g0.g, -1.0, h.g));
    // e^{Lt} k0 through the W-orthonormal eigenbasis.
    const Eigen::MatrixXd V = rep.modes.real();
    const Eigen::VectorXd c = V.transpose() * (rep.weights.asDiagonal() * k0);
    double worst = 0.0;
    for (const auto& s : traj.states) {
      const Eigen::VectorXd e = (rep.eigenvalues.real() * s.t).array().exp();
      const Eigen::VectorXd lin = V * (e.asDiagonal() * c);
      const Eigen::VectorXd k = flatten(lincomb(1.0, s.metric.g, -1.0, h.g));
      worst = std::max(worst, (k - lin).cwiseAbs().maxCoeff());
    }
    return worst;
  };
  const double a = deviation(1e-2), b = deviation(5e-3);
  EXPECT_LT(a, 1e-3);
  EXPECT_NEAR(a / b, 4.0, 0.4);
}

TEST(Trichotomy, SingleDecayingModeAndConstants) {
  const auto h = GridModel<2>::flat(Grid<2>::cube(8));
  const auto rep = spectrum(assemble_linearized_pde(h, kInfiniteTau), 1e-8);
  const Eigen::VectorXd mode = rep.modes.col(0).real();
  auto s = trichotomy_split(mode, rep);
  EXPECT_LT((s.down - mode).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(s.up.cwiseAbs().maxCoeff() + s.neutral.cwiseAbs().maxCoeff(), 1e-10);
  Mat<2> c;
  c << 0.4, 0.1, 0.1, -0.3;
  const Eigen::VectorXd k = flatten(SymTensorField<2>(h.size(), c));
  s = trichotomy_split(k, rep);
  EXPECT_LT((s.neutral - k).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(project_neutral(mode, rep).cwiseAbs().maxCoeff(), 1e-10);
}
