#include "decme/models.hpp"
#include "decme/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace decme;

namespace {

Dataset column(std::initializer_list<double> xs) {
  Dataset ds;
  ds.obs.resize(static_cast<Eigen::Index>(xs.size()), 1);
  Eigen::Index i = 0;
  for (double x : xs) ds.obs(i++, 0) = x;
  return ds;
}

GmmParams two_comp(double pi1, double m1, double m2, double v1, double v2) {
  GmmParams p;
  p.weights = Eigen::Vector2d(pi1, 1.0 - pi1);
  p.means = Eigen::Vector2d(m1, m2);
  p.variances = Eigen::Vector2d(v1, v2);
  return p;
}

} // namespace

TEST(LogGamma, MatchesStdLgamma) {
  for (double x : {1e-3, 0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 10.0, 57.25, 500.0})
    EXPECT_NEAR(log_gamma(x), std::lgamma(x), 1e-12 * (1.0 + std::fabs(std::lgamma(x)))) << x;
}

TEST(Gmm, StandardNormalAtZero) {
  GmmParams p;
  p.weights = Eigen::VectorXd::Ones(1);
  p.means = Eigen::VectorXd::Zero(1);
  p.variances = Eigen::VectorXd::Ones(1);
  EXPECT_NEAR(gmm_loglik(p, column({0.0})), -0.9189385332046727, 1e-14);
}

TEST(Gmm, SingleComponentEmIsClosedForm) {
  const Dataset ds = column({1.0, 2.0, 4.0, 7.0});
  GmmParams p;
  p.weights = Eigen::VectorXd::Ones(1);
  p.means = Eigen::VectorXd::Constant(1, -3.0);
  p.variances = Eigen::VectorXd::Constant(1, 9.0);
  const GmmParams q = gmm_em_step(p, ds);
  EXPECT_NEAR(q.means[0], 3.5, 1e-14);
  EXPECT_NEAR(q.variances[0], (6.25 + 2.25 + 0.25 + 12.25) / 4.0, 1e-13);
}

TEST(Gmm, LabelSwapSymmetry) {
  const Dataset ds = gmm_simulate(3, 200, Eigen::Vector2d(0.3, 0.7), Eigen::Vector2d(2, -1), Eigen::Vector2d(1, 2));
  const GmmParams a = two_comp(0.3, 2, -1, 1, 2);
  const GmmParams b = two_comp(0.7, -1, 2, 2, 1);
  EXPECT_NEAR(gmm_loglik(a, ds), gmm_loglik(b, ds), 1e-10);
  const GmmParams ea = gmm_em_step(a, ds), eb = gmm_em_step(b, ds);
  EXPECT_NEAR(ea.means[0], eb.means[1], 1e-12);
  EXPECT_NEAR(ea.variances[1], eb.variances[0], 1e-12);
}

TEST(Gmm, DensityIntegratesToOne) {
  const GmmParams p = two_comp(0.3, 1.5, -2.0, 0.7, 1.3);
  double total = 0.0;
  const double h = 1e-3;
  for (double x = -15.0; x <= 15.0; x += h) total += std::exp(gmm_loglik(p, column({x}))) * h;
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(Gmm, EmStepNeverDecreasesLoglik) {
  Rng rng(51);
  const Dataset ds = gmm_simulate(4, 300, Eigen::Vector2d(0.4, 0.6), Eigen::Vector2d(1, -1), Eigen::Vector2d(1, 1));
  for (int k = 0; k < 200; ++k) {
    const GmmParams p = two_comp(rng.uniform(0.05, 0.95), 3 * rng.normal(), 3 * rng.normal(), rng.uniform(0.1, 5),
                                 rng.uniform(0.1, 5));
    const GmmParams q = gmm_em_step(p, ds);
    EXPECT_GE(gmm_loglik(q, ds), gmm_loglik(p, ds) - 1e-10 * std::fabs(gmm_loglik(p, ds)));
    EXPECT_NEAR(q.weights.sum(), 1.0, 1e-15);
  }
}

TEST(Gmm, PackUnpackRoundTrip) {
  GmmParams p;
  p.weights = Eigen::Vector3d(0.2, 0.5, 0.3);
  p.means = Eigen::Vector3d(-1, 0, 4);
  p.variances = Eigen::Vector3d(1, 2, 3);
  const ParamVec th = p.pack();
  ASSERT_EQ(th.size(), 8);
  const GmmParams q = GmmParams::unpack(th, 3);
  EXPECT_NEAR((q.weights - p.weights).norm(), 0.0, 1e-15);
  EXPECT_EQ(q.means, p.means);
  EXPECT_EQ(q.variances, p.variances);
  EXPECT_THROW(GmmParams::unpack(th, 2), DimensionMismatch);
}

TEST(Gmm, InvalidParametersGiveMinusInfinity) {
  const Dataset ds = column({0.0, 1.0});
  EXPECT_EQ(gmm_loglik(two_comp(1.2, 0, 1, 1, 1), ds), -kInf);
  EXPECT_EQ(gmm_loglik(two_comp(0.5, 0, 1, -1, 1), ds), -kInf);
}

TEST(Gmm, ModelAdapterAndConstraints) {
  const EmModel m = make_gmm_model(column({0.0, 1.0, 2.0}), 2);
  EXPECT_EQ(m.dim, 5);
  m.constraints.validate(5);
  ParamVec ok(5), bad(5);
  ok << 0.4, 0, 1, 1, 1;
  bad << 0.4, 0, 1, 0, 1;
  EXPECT_TRUE(is_feasible(m.constraints, ok));
  EXPECT_FALSE(is_feasible(m.constraints, bad));
  EXPECT_THROW(make_gmm_model(Dataset{Matrix::Zero(3, 2)}, 2), Error);
}

TEST(DatasetCsv, HeaderAndRoundTrip) {
  std::istringstream in("x,y\n1,2\n3.5,-4\n\n5e-1,6\n");
  const Dataset ds = read_dataset_csv(in);
  ASSERT_EQ(ds.n(), 3);
  ASSERT_EQ(ds.d(), 2);
  EXPECT_EQ(ds.obs(2, 0), 0.5);
  std::ostringstream out;
  write_dataset_csv(out, ds);
  std::istringstream back(out.str());
  EXPECT_EQ(read_dataset_csv(back).obs, ds.obs);
}

TEST(DatasetCsv, RejectsMalformedInput) {
  std::istringstream ragged("1,2\n3\n");
  EXPECT_THROW(read_dataset_csv(ragged), Error);
  std::istringstream text("1\nabc\n");
  EXPECT_THROW(read_dataset_csv(text), Error);
  std::istringstream nonfinite("1\ninf\n");
  EXPECT_THROW(read_dataset_csv(nonfinite), Error);
}

TEST(Mvt, CauchyAtOrigin) {
  MvtParams p;
  p.nu = 1.0;
  Dataset ds{Matrix::Zero(1, 2)};
  EXPECT_NEAR(mvt_loglik(p, ds), std::log(1.0 / (2.0 * std::numbers::pi)), 1e-12);
}

TEST(Mvt, LargeNuApproachesGaussian) {
  Dataset ds{Matrix(2, 2)};
  ds.obs << 0.3, -0.4, 1.0, 0.5;
  MvtParams p;
  p.nu = 1e7;
  double gauss = 0.0;
  for (int j = 0; j < 2; ++j) gauss += -std::log(2.0 * std::numbers::pi) - 0.5 * ds.obs.row(j).squaredNorm();
  EXPECT_NEAR(mvt_loglik(p, ds), gauss, 1e-5);
}

TEST(Mvt, TranslationInvariance) {
  MvtParams p;
  p.mu << 1.0, -2.0;
  p.psi << 2.0, 0.3, 0.3, 1.0;
  p.nu = 4.0;
  const Dataset ds = mvt_simulate(7, 50, p);
  Dataset shifted = ds;
  shifted.obs.rowwise() += Eigen::RowVector2d(5.0, 5.0);
  MvtParams q = p;
  q.mu += Eigen::Vector2d(5.0, 5.0);
  EXPECT_NEAR(mvt_loglik(p, ds), mvt_loglik(q, shifted), 1e-9);
  const MvtParams a = mvt_em_step(p, ds), b = mvt_em_step(q, shifted);
  EXPECT_NEAR((a.mu + Eigen::Vector2d(5, 5) - b.mu).norm(), 0.0, 1e-9);
  EXPECT_NEAR((a.psi - b.psi).norm(), 0.0, 1e-9);
  EXPECT_NEAR(a.nu, b.nu, 1e-6);
}

TEST(Mvt, OutlierIsDownweighted) {
  // With one gross outlier the t location stays near the bulk, unlike the mean.
  Rng rng(52);
  Dataset ds{Matrix(41, 2)};
  for (int j = 0; j < 40; ++j) ds.obs.row(j) << 0.1 * rng.normal(), 0.1 * rng.normal();
  ds.obs.row(40) << 100.0, 100.0;
  MvtParams p;
  p.nu = 1.0;
  for (int i = 0; i < 50; ++i) p = mvt_em_step(p, ds);
  EXPECT_LT(p.mu.norm(), 0.2);
  EXPECT_GT(ds.obs.colwise().mean().norm(), 3.0);
}

TEST(Mvt, EmStepAscendsAndKeepsPsiPositiveDefinite) {
  Rng rng(53);
  MvtParams truth;
  truth.nu = 3.0;
  const Dataset ds = mvt_simulate(8, 75, truth);
  for (int k = 0; k < 50; ++k) {
    MvtParams p;
    p.mu << rng.normal(), rng.normal();
    const double a = rng.uniform(0.3, 3), c = rng.uniform(0.3, 3);
    p.psi << a, 0.5 * std::sqrt(a * c) * rng.uniform(-1, 1), 0, c;
    p.psi(1, 0) = p.psi(0, 1);
    p.nu = rng.uniform(0.5, 20);
    const MvtParams q = mvt_em_step(p, ds);
    EXPECT_TRUE(q.valid());
    EXPECT_GE(mvt_loglik(q, ds), mvt_loglik(p, ds) - 1e-9);
  }
}

TEST(Mvt, PackUnpackAndConstraints) {
  MvtParams p;
  p.mu << 1, 2;
  p.psi << 3, 0.5, 0.5, 4;
  p.nu = 5;
  const MvtParams q = MvtParams::unpack(p.pack());
  EXPECT_EQ(q.mu, p.mu);
  EXPECT_EQ(q.psi, p.psi);
  EXPECT_EQ(q.nu, p.nu);
  const ConstraintSpec spec = constraints_for(ModelKind::mvt, 2);
  EXPECT_TRUE(is_feasible(spec, p.pack()));
  ParamVec bad = p.pack();
  bad[3] = 4.0; // det < 0
  EXPECT_FALSE(is_feasible(spec, bad));
  EXPECT_THROW(constraints_for(ModelKind::mvt, 3), Error);
  EXPECT_THROW(make_mvt_model(Dataset{Matrix::Zero(4, 3)}), Error);
}

TEST(SurrogateModel, MlStepMaximisesOverSubspace) {
  Rng rng(54);
  for (int k = 0; k < 50; ++k) {
    const auto s = random_surrogate(rng, 5);
    const EmModel m = surrogate_model(s, {1, 3});
    ASSERT_TRUE(m.has_ml_step());
    ParamVec th = s.theta_hat();
    for (Eigen::Index i = 0; i < 5; ++i) th[i] += rng.normal();
    const ParamVec out = m.ml_step(th);
    EXPECT_EQ(out[0], th[0]);
    EXPECT_EQ(out[2], th[2]);
    EXPECT_EQ(out[4], th[4]);
    // The gradient of L in the freed coordinates vanishes.
    const ParamVec grad = -(s.i_obs() * (out - s.theta_hat()));
    EXPECT_NEAR(grad[1], 0.0, 1e-10);
    EXPECT_NEAR(grad[3], 0.0, 1e-10);
    EXPECT_GE(m.loglik(out), m.loglik(th));
  }
  EXPECT_FALSE(surrogate_model(random_surrogate(rng, 3)).has_ml_step());
}
