#pragma once

// Concrete EM models: a K-component univariate Gaussian mixture, a bivariate
// t location/scatter/dof model, and an adapter presenting a quadratic
// surrogate as an EmModel.

#include "decme/common.hpp"
#include "decme/em_core.hpp"
#include "decme/line_search.hpp"
#include "decme/linalg_spectral.hpp"
#include "decme/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <memory>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace decme {

// ---------------------------------------------------------------------------
// Datasets

/// n observations of d reals, one per row.
struct Dataset {
  Matrix obs;

  Eigen::Index n() const noexcept { return obs.rows(); }
  Eigen::Index d() const noexcept { return obs.cols(); }
};

/// CSV with one observation per row. A non-numeric first line is treated as a header.
inline Dataset read_dataset_csv(std::istream& is) {
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (cell.find_first_not_of(" \t", used) != std::string::npos) numeric = false;
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
      }
      if (!numeric) break;
    }
    if (!numeric) {
      if (first) {
        first = false;
        continue;
      }
      throw Error("dataset csv: non-numeric value on line " + std::to_string(line_no));
    }
    first = false;
    for (double v : row)
      if (!std::isfinite(v)) throw Error("dataset csv: non-finite value on line " + std::to_string(line_no));
    if (!rows.empty() && row.size() != rows.front().size())
      throw Error("dataset csv: ragged row on line " + std::to_string(line_no));
    rows.push_back(std::move(row));
  }
  Dataset ds;
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = rows.empty() ? Eigen::Index{1} : static_cast<Eigen::Index>(rows.front().size());
  ds.obs.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) ds.obs(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return ds;
}

inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
  const auto old_prec = os.precision(17);
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    for (Eigen::Index j = 0; j < ds.d(); ++j) os << (j ? "," : "") << ds.obs(i, j);
    os << '\n';
  }
  os.precision(old_prec);
}

// ---------------------------------------------------------------------------
// Special functions

/// log Γ(x) for x > 0 via the Lanczos approximation (g = 7, 9 terms), with
/// reflection below 1/2.
inline double log_gamma(double x) {
  static constexpr std::array<double, 9> c = {
      0.99999999999980993,     676.5203681218851,     -1259.1392167224028,
      771.32342877765313,      -176.61502916214059,   12.507343278686905,
      -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};
  if (x < 0.5) {
    return std::log(std::numbers::pi / std::fabs(std::sin(std::numbers::pi * x))) - log_gamma(1.0 - x);
  }
  x -= 1.0;
  double a = c[0];
  const double t = x + 7.5;
  for (int i = 1; i < 9; ++i) a += c[static_cast<std::size_t>(i)] / (x + i);
  return 0.5 * std::log(2.0 * std::numbers::pi) + (x + 0.5) * std::log(t) - t + std::log(a);
}

inline double log_normal_pdf(double x, double mu, double var) {
  const double z = x - mu;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + z * z / var);
}

// ---------------------------------------------------------------------------
// Univariate Gaussian mixture

struct GmmParams {
  Eigen::VectorXd weights;   // π_1..π_K, summing to 1
  Eigen::VectorXd means;     // μ_1..μ_K
  Eigen::VectorXd variances; // σ²_1..σ²_K

  Eigen::Index k() const noexcept { return means.size(); }

  bool valid() const {
    return weights.size() == k() && variances.size() == k() && k() >= 1 && (weights.array() > 0.0).all() &&
           (variances.array() > 0.0).all() && weights.allFinite() && means.allFinite() && variances.allFinite();
  }

  /// (π_1..π_{K−1}, μ_1..μ_K, σ²_1..σ²_K).
  ParamVec pack() const {
    const Eigen::Index K = k();
    ParamVec th(3 * K - 1);
    th.head(K - 1) = weights.head(K - 1);
    th.segment(K - 1, K) = means;
    th.tail(K) = variances;
    return th;
  }

  static GmmParams unpack(const ParamVec& th, Eigen::Index K) {
    require_dim("gmm parameter vector", 3 * K - 1, th.size());
    GmmParams p;
    p.weights.resize(K);
    p.weights.head(K - 1) = th.head(K - 1);
    p.weights[K - 1] = 1.0 - th.head(K - 1).sum();
    p.means = th.segment(K - 1, K);
    p.variances = th.tail(K);
    return p;
  }
};

namespace detail {

inline double log_sum_exp(const double* v, Eigen::Index n) {
  double hi = -kInf;
  for (Eigen::Index i = 0; i < n; ++i) hi = std::max(hi, v[i]);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) s += std::exp(v[i] - hi);
  return hi + std::log(s);
}

} // namespace detail

/// Σ_j log Σ_i π_i N(x_j; μ_i, σ²_i); −∞ for invalid parameters.
inline double gmm_loglik(const GmmParams& p, const Dataset& data) {
  if (!p.valid()) return -kInf;
  const Eigen::Index K = p.k();
  Eigen::VectorXd logw(K), lognorm(K);
  for (Eigen::Index i = 0; i < K; ++i) {
    logw[i] = std::log(p.weights[i]);
    lognorm[i] = -0.5 * std::log(2.0 * std::numbers::pi * p.variances[i]);
  }
  std::vector<double> terms(static_cast<std::size_t>(K));
  double total = 0.0;
  for (Eigen::Index j = 0; j < data.n(); ++j) {
    const double x = data.obs(j, 0);
    for (Eigen::Index i = 0; i < K; ++i) {
      const double z = x - p.means[i];
      terms[static_cast<std::size_t>(i)] = logw[i] + lognorm[i] - 0.5 * z * z / p.variances[i];
    }
    total += detail::log_sum_exp(terms.data(), K);
  }
  return total;
}

inline constexpr double kGmmVarianceFloor = 1e-10;

/// One EM step: responsibilities, then weighted proportions, means and (biased) variances.
inline GmmParams gmm_em_step(const GmmParams& p, const Dataset& data) {
  const Eigen::Index K = p.k();
  const Eigen::Index n = data.n();
  Eigen::VectorXd logw(K), lognorm(K);
  for (Eigen::Index i = 0; i < K; ++i) {
    logw[i] = std::log(p.weights[i]);
    lognorm[i] = -0.5 * std::log(2.0 * std::numbers::pi * p.variances[i]);
  }
  Matrix resp(n, K);
  std::vector<double> terms(static_cast<std::size_t>(K));
  for (Eigen::Index j = 0; j < n; ++j) {
    const double x = data.obs(j, 0);
    for (Eigen::Index i = 0; i < K; ++i) {
      const double z = x - p.means[i];
      terms[static_cast<std::size_t>(i)] = logw[i] + lognorm[i] - 0.5 * z * z / p.variances[i];
    }
    const double lse = detail::log_sum_exp(terms.data(), K);
    for (Eigen::Index i = 0; i < K; ++i) resp(j, i) = std::exp(terms[static_cast<std::size_t>(i)] - lse);
  }

  GmmParams out;
  out.weights.resize(K);
  out.means.resize(K);
  out.variances.resize(K);
  const Eigen::VectorXd x = data.obs.col(0);
  for (Eigen::Index i = 0; i < K; ++i) {
    const double mass = resp.col(i).sum();
    if (!(mass > std::numeric_limits<double>::min())) {
      log(LogLevel::warn, "gmm component " + std::to_string(i) + " lost all responsibility");
      out.weights[i] = std::numeric_limits<double>::min();
      out.means[i] = p.means[i];
      out.variances[i] = p.variances[i];
      continue;
    }
    out.weights[i] = mass / static_cast<double>(n);
    out.means[i] = resp.col(i).dot(x) / mass;
    const double var = (resp.col(i).array() * (x.array() - out.means[i]).square()).sum() / mass;
    if (var < kGmmVarianceFloor) log(LogLevel::warn, "gmm variance collapsed; floored");
    out.variances[i] = std::max(var, kGmmVarianceFloor);
  }
  // Keep Σπ = 1 exactly in the packed representation.
  out.weights[K - 1] = 1.0 - out.weights.head(K - 1).sum();
  return out;
}

/// n i.i.d. draws: component by inverse CDF on a uniform, then a normal draw.
inline Dataset gmm_simulate(std::uint64_t seed, Eigen::Index n, const Eigen::VectorXd& pi,
                            const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma2) {
  if (pi.size() != mu.size() || pi.size() != sigma2.size() || pi.size() == 0)
    throw Error("gmm_simulate: inconsistent component counts");
  Rng rng(seed);
  Dataset ds;
  ds.obs.resize(n, 1);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double u = rng.uniform();
    Eigen::Index comp = pi.size() - 1;
    double cum = 0.0;
    for (Eigen::Index i = 0; i < pi.size(); ++i) {
      cum += pi[i];
      if (u < cum) {
        comp = i;
        break;
      }
    }
    ds.obs(j, 0) = mu[comp] + std::sqrt(sigma2[comp]) * rng.normal();
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Bivariate t

struct MvtParams {
  Eigen::Vector2d mu = Eigen::Vector2d::Zero();
  Eigen::Matrix2d psi = Eigen::Matrix2d::Identity();
  double nu = 1.0;

  bool valid() const {
    return mu.allFinite() && psi.allFinite() && std::isfinite(nu) && nu > 0.0 && psi(0, 0) > 0.0 &&
           psi.determinant() > 0.0;
  }

  /// (μ1, μ2, Ψ11, Ψ12, Ψ22, ν).
  ParamVec pack() const {
    ParamVec th(6);
    th << mu[0], mu[1], psi(0, 0), psi(0, 1), psi(1, 1), nu;
    return th;
  }

  static MvtParams unpack(const ParamVec& th) {
    require_dim("mvt parameter vector", 6, th.size());
    MvtParams p;
    p.mu << th[0], th[1];
    p.psi << th[2], th[3], th[3], th[4];
    p.nu = th[5];
    return p;
  }
};

namespace detail {

inline void require_bivariate(const Dataset& data) {
  if (data.d() != 2) throw Error("bivariate t model needs 2 columns, got " + std::to_string(data.d()));
}

inline Eigen::VectorXd mahalanobis(const MvtParams& p, const Dataset& data) {
  const Eigen::Matrix2d inv = p.psi.inverse();
  Eigen::VectorXd delta(data.n());
  for (Eigen::Index j = 0; j < data.n(); ++j) {
    const Eigen::Vector2d z = data.obs.row(j).transpose() - p.mu;
    delta[j] = z.dot(inv * z);
  }
  return delta;
}

inline double mvt_loglik_from(const Eigen::VectorXd& delta, double log_det_psi, double nu) {
  constexpr double d = 2.0;
  const double n = static_cast<double>(delta.size());
  const double constant = log_gamma(0.5 * (nu + d)) - log_gamma(0.5 * nu) - 0.5 * d * std::log(nu * std::numbers::pi) -
                          0.5 * log_det_psi;
  double sum = 0.0;
  for (Eigen::Index j = 0; j < delta.size(); ++j) sum += std::log1p(delta[j] / nu);
  return n * constant - 0.5 * (nu + d) * sum;
}

} // namespace detail

/// Sum of bivariate t log-densities; −∞ for invalid parameters.
inline double mvt_loglik(const MvtParams& p, const Dataset& data) {
  detail::require_bivariate(data);
  if (!p.valid()) return -kInf;
  return detail::mvt_loglik_from(detail::mahalanobis(p, data), std::log(p.psi.determinant()), p.nu);
}

/// ν search range and accuracy for the ML-step inside mvt_em_step.
struct MvtNuSearch {
  double lo = 1e-2;
  double hi = 1e3;
  double tol = 1e-8;
};

/// Weights w_j = (ν+2)/(ν+δ_j); weighted moments for μ and Ψ; then ν maximises the
/// observed log-likelihood given the new (μ, Ψ). The old ν is kept if the search
/// does not improve on it.
inline MvtParams mvt_em_step(const MvtParams& p, const Dataset& data, const MvtNuSearch& nu_search = {}) {
  detail::require_bivariate(data);
  const Eigen::Index n = data.n();
  const Eigen::VectorXd delta = detail::mahalanobis(p, data);
  const Eigen::VectorXd w = (p.nu + 2.0) / (p.nu + delta.array());

  MvtParams out;
  out.mu = (data.obs.transpose() * w) / w.sum();
  Eigen::Matrix2d s = Eigen::Matrix2d::Zero();
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Vector2d z = data.obs.row(j).transpose() - out.mu;
    s += w[j] * z * z.transpose();
  }
  out.psi = s / static_cast<double>(n);
  out.psi(0, 1) = out.psi(1, 0) = 0.5 * (out.psi(0, 1) + out.psi(1, 0));

  const Eigen::VectorXd new_delta = detail::mahalanobis(out, data);
  const double log_det = std::log(out.psi.determinant());
  auto objective = [&](double nu) { return detail::mvt_loglik_from(new_delta, log_det, nu); };
  LineSearchSettings ls;
  ls.tol = nu_search.tol;
  ls.max_evals = 200;
  const LineMax best = maximize_on_interval(objective, Interval{nu_search.lo, nu_search.hi}, ls);
  out.nu = (best.value >= objective(p.nu)) ? best.alpha : p.nu;
  return out;
}

inline Dataset mvt_simulate(std::uint64_t seed, Eigen::Index n, const MvtParams& p) {
  Rng rng(seed);
  const Eigen::Matrix2d chol = p.psi.llt().matrixL();
  Dataset ds;
  ds.obs.resize(n, 2);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Vector2d z;
    z[0] = rng.normal();
    z[1] = rng.normal();
    const double scale = std::sqrt(rng.chi_squared(p.nu) / p.nu);
    ds.obs.row(j) = (p.mu + chol * z / scale).transpose();
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Constraints and EmModel adapters

enum class ModelKind { gmm, mvt, surrogate };

/// GMM: K−1 free weights form a simplex, variances positive. MVT: Ψ positive definite, ν positive.
inline ConstraintSpec constraints_for(ModelKind kind, Eigen::Index k_or_d) {
  ConstraintSpec spec;
  switch (kind) {
  case ModelKind::gmm: {
    const auto K = static_cast<std::size_t>(k_or_d);
    if (K < 1) throw Error("mixture needs at least one component");
    Simplex simplex;
    for (std::size_t i = 0; i + 1 < K; ++i) simplex.indices.push_back(i);
    Positive vars;
    for (std::size_t i = 0; i < K; ++i) vars.indices.push_back(2 * K - 1 + i);
    if (!simplex.indices.empty()) spec.items.emplace_back(simplex);
    spec.items.emplace_back(vars);
    break;
  }
  case ModelKind::mvt:
    if (k_or_d != 2) throw Error("only the bivariate t model is supported");
    spec.items.emplace_back(PosDef2x2{2, 3, 4});
    spec.items.emplace_back(Positive{{5}});
    break;
  case ModelKind::surrogate: spec.items.emplace_back(Free{}); break;
  }
  return spec;
}

inline EmModel make_gmm_model(Dataset data, Eigen::Index K) {
  if (data.d() != 1) throw Error("gmm model needs a single column of data");
  auto shared = std::make_shared<const Dataset>(std::move(data));
  EmModel m;
  m.dim = 3 * K - 1;
  m.name = "gmm" + std::to_string(K);
  m.constraints = constraints_for(ModelKind::gmm, K);
  m.em_step = [shared, K](const ParamVec& th) { return gmm_em_step(GmmParams::unpack(th, K), *shared).pack(); };
  m.loglik = [shared, K](const ParamVec& th) { return gmm_loglik(GmmParams::unpack(th, K), *shared); };
  return m;
}

inline EmModel make_mvt_model(Dataset data, MvtNuSearch nu_search = {}) {
  detail::require_bivariate(data);
  auto shared = std::make_shared<const Dataset>(std::move(data));
  EmModel m;
  m.dim = 6;
  m.name = "mvt2";
  m.constraints = constraints_for(ModelKind::mvt, 2);
  m.em_step = [shared, nu_search](const ParamVec& th) {
    return mvt_em_step(MvtParams::unpack(th), *shared, nu_search).pack();
  };
  m.loglik = [shared](const ParamVec& th) { return mvt_loglik(MvtParams::unpack(th), *shared); };
  return m;
}

/**
 * Quadratic surrogate as an EmModel. When `ml_coords` is non-empty the model
 * also carries an ML-step that maximises L exactly over those coordinates with
 * the rest held fixed.
 */
inline EmModel surrogate_model(const QuadSurrogate& s, const std::vector<Eigen::Index>& ml_coords = {}) {
  auto shared = std::make_shared<const QuadSurrogate>(s);
  EmModel m;
  m.dim = s.dim();
  m.name = "surrogate" + std::to_string(s.dim());
  m.constraints = constraints_for(ModelKind::surrogate, s.dim());
  m.em_step = [shared](const ParamVec& th) { return em_map(*shared, th); };
  m.loglik = [shared](const ParamVec& th) { return surrogate_loglik(*shared, th); };
  if (!ml_coords.empty()) {
    const Eigen::Index p = s.dim();
    std::vector<Eigen::Index> rest;
    for (Eigen::Index i = 0; i < p; ++i)
      if (std::find(ml_coords.begin(), ml_coords.end(), i) == ml_coords.end()) rest.push_back(i);
    const auto k = static_cast<Eigen::Index>(ml_coords.size());
    Matrix i_ss(k, k), i_sr(k, static_cast<Eigen::Index>(rest.size()));
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) i_ss(a, b) = s.i_obs()(ml_coords[a], ml_coords[b]);
      for (std::size_t b = 0; b < rest.size(); ++b) i_sr(a, static_cast<Eigen::Index>(b)) = s.i_obs()(ml_coords[a], rest[b]);
    }
    // θ_S = θ̂_S − I_SS⁻¹ I_SR (θ_R − θ̂_R)
    const Matrix gain = i_ss.ldlt().solve(i_sr);
    m.ml_step = [shared, ml_coords, rest, gain](const ParamVec& th) {
      Eigen::VectorXd off(static_cast<Eigen::Index>(rest.size()));
      for (std::size_t b = 0; b < rest.size(); ++b)
        off[static_cast<Eigen::Index>(b)] = th[rest[b]] - shared->theta_hat()[rest[b]];
      const Eigen::VectorXd shift = gain * off;
      ParamVec out = th;
      for (std::size_t a = 0; a < ml_coords.size(); ++a)
        out[ml_coords[a]] = shared->theta_hat()[ml_coords[a]] - shift[static_cast<Eigen::Index>(a)];
      return out;
    };
  }
  return m;
}

} // namespace decme
