#include "decme/line_search.hpp"
#include "decme/linalg_spectral.hpp"
#include "decme/models.hpp"
#include "decme/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace decme;

namespace {

ConstraintSpec spec_of(ConstraintItem item) {
  ConstraintSpec s;
  s.items.push_back(std::move(item));
  return s;
}

} // namespace

TEST(FeasibleInterval, PositiveItem) {
  const auto iv = feasible_interval(spec_of(Positive{{0}}), Eigen::Vector2d(2, 7), Eigen::Vector2d(-1, 3));
  EXPECT_EQ(iv.lo, -kInf);
  EXPECT_DOUBLE_EQ(iv.hi, 2.0);
  const auto c = clipped(iv, 1e6);
  EXPECT_EQ(c.lo, -1e6);
  EXPECT_DOUBLE_EQ(c.hi, 2.0);
}

TEST(FeasibleInterval, SimplexItem) {
  const auto iv = feasible_interval(spec_of(Simplex{{0}}), ParamVec::Constant(1, 0.5), ParamVec::Constant(1, 0.2));
  EXPECT_DOUBLE_EQ(iv.lo, -2.5);
  EXPECT_DOUBLE_EQ(iv.hi, 2.5);
}

TEST(FeasibleInterval, SimplexSumBindsForSeveralWeights) {
  // π = (0.2, 0.3), d = (1, 1): sum 0.5 + 2α < 1 binds at α = 0.25.
  const auto iv = feasible_interval(spec_of(Simplex{{0, 1}}), Eigen::Vector2d(0.2, 0.3), Eigen::Vector2d(1, 1));
  EXPECT_DOUBLE_EQ(iv.lo, -0.2);
  EXPECT_DOUBLE_EQ(iv.hi, 0.25);
}

TEST(FeasibleInterval, PosDef2x2Item) {
  const auto iv = feasible_interval(spec_of(PosDef2x2{0, 1, 2}), Eigen::Vector3d(1, 0, 1), Eigen::Vector3d(1, 0, -1));
  EXPECT_NEAR(iv.lo, -1.0, 1e-15);
  EXPECT_NEAR(iv.hi, 1.0, 1e-15);
}

TEST(FeasibleInterval, PosDefOffDiagonalOnly) {
  // Ψ = I, D = offdiag 1: det = 1 − α² > 0.
  const auto iv = feasible_interval(spec_of(PosDef2x2{0, 1, 2}), Eigen::Vector3d(1, 0, 1), Eigen::Vector3d(0, 1, 0));
  EXPECT_NEAR(iv.lo, -1.0, 1e-15);
  EXPECT_NEAR(iv.hi, 1.0, 1e-15);
}

TEST(FeasibleInterval, FreeIsUnbounded) {
  const auto iv = feasible_interval(spec_of(Free{}), Eigen::Vector2d(1, 2), Eigen::Vector2d(3, 4));
  EXPECT_EQ(iv.lo, -kInf);
  EXPECT_EQ(iv.hi, kInf);
}

TEST(FeasibleInterval, RejectsInfeasiblePoint) {
  EXPECT_THROW(feasible_interval(spec_of(Positive{{0}}), Eigen::Vector2d(-1, 0), Eigen::Vector2d(1, 0)),
               InfeasiblePoint);
  EXPECT_THROW(feasible_interval(spec_of(Simplex{{0, 1}}), Eigen::Vector2d(0.6, 0.5), Eigen::Vector2d(1, 0)),
               InfeasiblePoint);
}

TEST(ConstraintSpec, ValidateRejectsOverlapAndRange) {
  ConstraintSpec s;
  s.items = {Positive{{0, 1}}, Simplex{{1}}};
  EXPECT_THROW(s.validate(3), Error);
  s.items = {PosDef2x2{0, 1, 5}};
  EXPECT_THROW(s.validate(3), Error);
  s.items = {Positive{{2}}, Simplex{{0, 1}}};
  EXPECT_NO_THROW(s.validate(3));
}

// Endpoints are tight: inside is feasible, just outside is not.
TEST(FeasibleInterval, EndpointsAreTightOnRandomModels) {
  Rng rng(21);
  ConstraintSpec spec;
  spec.items = {Simplex{{0, 1}}, Positive{{5, 6, 7}}, PosDef2x2{2, 3, 4}};
  spec.validate(8);
  for (int k = 0; k < 500; ++k) {
    ParamVec th(8), d(8);
    th[0] = rng.uniform(0.05, 0.45);
    th[1] = rng.uniform(0.05, 0.45);
    th[2] = rng.uniform(0.5, 2.0);
    th[4] = rng.uniform(0.5, 2.0);
    th[3] = rng.uniform(-0.9, 0.9) * std::sqrt(th[2] * th[4]);
    for (int i = 5; i < 8; ++i) th[i] = rng.uniform(0.1, 3.0);
    for (int i = 0; i < 8; ++i) d[i] = rng.normal();
    ASSERT_TRUE(is_feasible(spec, th));
    const Interval iv = feasible_interval(spec, th, d);
    ASSERT_TRUE(iv.contains(0.0));
    const double mid = 0.5 * (std::max(iv.lo, -10.0) + std::min(iv.hi, 10.0));
    EXPECT_TRUE(is_feasible(spec, th + mid * d));
    if (std::isfinite(iv.lo)) {
      EXPECT_FALSE(is_feasible(spec, th + (iv.lo - 1e-6 * std::fabs(iv.lo)) * d));
      EXPECT_TRUE(is_feasible(spec, th + (iv.lo + 1e-9 * std::fabs(iv.lo)) * d));
    }
    if (std::isfinite(iv.hi)) {
      EXPECT_FALSE(is_feasible(spec, th + (iv.hi + 1e-6 * std::fabs(iv.hi)) * d));
      EXPECT_TRUE(is_feasible(spec, th + (iv.hi - 1e-9 * std::fabs(iv.hi)) * d));
    }
  }
}

TEST(MaximizeOnInterval, QuadraticVertex) {
  LineSearchSettings s;
  s.tol = 1e-4;
  const auto r = maximize_on_interval([](double a) { return -(a - 0.3) * (a - 0.3); }, Interval{-1, 1}, s);
  EXPECT_GE(r.alpha, 0.2999);
  EXPECT_LE(r.alpha, 0.3001);
  EXPECT_DOUBLE_EQ(r.value, -(r.alpha - 0.3) * (r.alpha - 0.3));
  EXPECT_GT(r.evals, 0);
}

TEST(MaximizeOnInterval, ConstantFunction) {
  const auto r = maximize_on_interval([](double) { return 4.5; }, Interval{-2, 3}, LineSearchSettings{});
  EXPECT_GT(r.alpha, -2.0);
  EXPECT_LT(r.alpha, 3.0);
  EXPECT_EQ(r.value, 4.5);
}

TEST(MaximizeOnInterval, RandomConcaveQuadraticsWithinTolerance) {
  Rng rng(22);
  for (int k = 0; k < 1000; ++k) {
    const double lo = rng.uniform(-100, 0), hi = rng.uniform(0.1, 100);
    const double v = rng.uniform(lo + 1e-3 * (hi - lo), hi - 1e-3 * (hi - lo));
    const double c = std::pow(10.0, rng.uniform(-3, 3));
    LineSearchSettings s;
    s.tol = std::pow(10.0, rng.uniform(-8, -2));
    const auto r = maximize_on_interval([&](double a) { return -c * (a - v) * (a - v) + 1.0; }, Interval{lo, hi}, s);
    // Brent's own stopping width, plus the flatness limit where rounding in f
    // hides the curvature.
    const double eps = std::numeric_limits<double>::epsilon();
    const double bound = 2.0 * (s.tol + std::sqrt(eps) * std::fabs(v)) + std::sqrt(8.0 * eps / c);
    EXPECT_NEAR(r.alpha, v, bound) << "case " << k;
  }
}

TEST(MaximizeOnInterval, Deterministic) {
  auto f = [](double a) { return std::sin(a) - 0.1 * a * a; };
  const auto a = maximize_on_interval(f, Interval{-5, 5}, LineSearchSettings{});
  const auto b = maximize_on_interval(f, Interval{-5, 5}, LineSearchSettings{});
  EXPECT_EQ(a.alpha, b.alpha);
  EXPECT_EQ(a.evals, b.evals);
}

TEST(MaximizeOnInterval, SurrogateLineAgreesWithClosedForm) {
  Matrix i_obs = Eigen::Vector2d(0.0316, 0.3768).asDiagonal();
  const auto sur = make_surrogate(ParamVec::Zero(2), i_obs, Matrix::Identity(2, 2));
  const auto d = spectral(sur);
  const ParamVec th = Eigen::Vector2d(1.0, -2.0);
  const ParamVec em = em_map(sur, th);
  LineSearchSettings s;
  s.tol = 1e-6;
  const auto r = maximize_on_interval([&](double a) { return surrogate_loglik(sur, em + a * (em - th)); },
                                      Interval{-kInf, kInf}, s);
  EXPECT_NEAR(r.alpha, sor_alpha_closed_form(d, eta_coords(d, sur.theta_hat(), th)), 1e-3);
}

TEST(MaximizeOnInterval, ExactModeResolvesFlatMaximum) {
  // A maximum too flat for a bracketing search alone: value scale ~1e-12.
  const double v = 0.812345678901;
  auto f = [&](double a) { return -1e-12 * (a - v) * (a - v) - 1e-9; };
  const auto r = maximize_on_interval(f, Interval{-kInf, kInf}, LineSearchSettings::exact());
  EXPECT_NEAR(r.alpha, v, 1e-9);
}

TEST(MaximizeOnInterval, BoundaryMaximumStaysInside) {
  const auto r = maximize_on_interval([](double a) { return a; }, Interval{-1, 2}, LineSearchSettings{});
  EXPECT_LT(r.alpha, 2.0);
  EXPECT_GT(r.alpha, 2.0 - 0.05);
}

TEST(MaximizeOnInterval, NonFiniteRegionTriggersOneRetry) {
  // The first probe (≈3.2) is non-finite; halving the upper end toward 0 gives
  // (−1, 1.6), where f is finite everywhere.
  auto f = [](double a) { return a > 3.0 ? std::nan("") : -(a - 0.2) * (a - 0.2); };
  LineSearchSettings s;
  s.tol = 1e-6;
  const auto r = maximize_on_interval(f, Interval{-1, 10}, s);
  EXPECT_NEAR(r.alpha, 0.2, 1e-5);
  auto always_bad = [](double a) { return a > -0.9 ? -kInf : 0.0; };
  EXPECT_THROW(maximize_on_interval(always_bad, Interval{-1, 1}, s), NonFiniteValue);
}

TEST(MaximizeOnInterval, BudgetExceededReturnsBestSoFar) {
  LineSearchSettings s;
  s.tol = 1e-10;
  s.max_evals = 3;
  const auto r = maximize_on_interval([](double a) { return -std::fabs(a - 0.37); }, Interval{-10, 10}, s);
  EXPECT_TRUE(r.budget_exceeded);
  EXPECT_LE(r.evals, 4);
  EXPECT_TRUE(std::isfinite(r.value));
}

TEST(MaximizeOnInterval, RejectsBadSettings) {
  LineSearchSettings s;
  s.tol = 0.0;
  EXPECT_THROW(maximize_on_interval([](double) { return 0.0; }, Interval{-1, 1}, s), Error);
}

TEST(GuardedLineStep, FallsBackWhenNoImprovement) {
  // Kinked maximum exactly at the origin: the tolerance-limited search lands
  // slightly off it and the guard must reject that point.
  auto loglik = [](const ParamVec& th) { return -th.cwiseAbs().sum(); };
  const ParamVec from = ParamVec::Zero(2);
  const ParamVec d = Eigen::Vector2d(1.0, 0.5);
  const auto g = guarded_line_step(loglik, from, d, spec_of(Free{}), LineSearchSettings{});
  EXPECT_TRUE(g.guard_fired);
  EXPECT_EQ(g.alpha, 0.0);
  EXPECT_EQ(g.theta, from);
  EXPECT_EQ(g.loglik, 0.0);
}

TEST(GuardedLineStep, SurrogateEmDirectionImprovesOnBothPoints) {
  Rng rng(23);
  for (int k = 0; k < 100; ++k) {
    const auto s = random_surrogate(rng, 2 + k % 6);
    ParamVec th = s.theta_hat();
    for (Eigen::Index i = 0; i < th.size(); ++i) th[i] += rng.normal();
    const ParamVec em = em_map(s, th);
    auto loglik = [&](const ParamVec& x) { return surrogate_loglik(s, x); };
    const auto g = guarded_line_step(loglik, em, em - th, spec_of(Free{}), LineSearchSettings{});
    EXPECT_GT(g.loglik, surrogate_loglik(s, em));
    EXPECT_GT(g.loglik, surrogate_loglik(s, th));
    EXPECT_GT(g.alpha, 0.0);
    EXPECT_FALSE(g.guard_fired);
  }
}

TEST(GuardedLineStep, ZeroDirectionShortCircuits) {
  auto loglik = [](const ParamVec& th) { return -th.squaredNorm(); };
  int calls = 0;
  auto counted = [&](const ParamVec& th) {
    ++calls;
    return loglik(th);
  };
  const auto g = guarded_line_step(counted, Eigen::Vector2d(1, 1), ParamVec::Zero(2), spec_of(Free{}),
                                   LineSearchSettings{}, -2.0);
  EXPECT_EQ(calls, 0);
  EXPECT_EQ(g.alpha, 0.0);
  EXPECT_EQ(g.loglik, -2.0);
}

TEST(GuardedLineStep, GmmRandomDirectionsNeverDecrease) {
  Rng rng(24);
  const Dataset ds = gmm_simulate(99, 300, Eigen::Vector2d(0.4, 0.6), Eigen::Vector2d(1.0, -1.0),
                                  Eigen::Vector2d(1.0, 1.5));
  const EmModel m = make_gmm_model(ds, 2);
  for (int k = 0; k < 100; ++k) {
    GmmParams p;
    p.weights = Eigen::Vector2d::Zero();
    p.weights[0] = rng.uniform(0.1, 0.9);
    p.weights[1] = 1.0 - p.weights[0];
    p.means = Eigen::Vector2d(rng.normal(), rng.normal());
    p.variances = Eigen::Vector2d(rng.uniform(0.3, 3), rng.uniform(0.3, 3));
    const ParamVec th = p.pack();
    ParamVec d(th.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = rng.normal();
    const double before = m.loglik(th);
    const auto g = guarded_line_step(m.loglik, th, d, m.constraints, LineSearchSettings{});
    EXPECT_GE(g.loglik, before);
    EXPECT_TRUE(is_feasible(m.constraints, g.theta));
    EXPECT_EQ(g.loglik, m.loglik(g.theta));
  }
}
