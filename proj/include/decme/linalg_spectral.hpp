#pragma once

// Quadratic near-MLE surrogates and the spectral quantities that govern EM,
// SOR and SORF on them. Everything here is exact linear algebra and serves as
// the oracle side of the theorem checks.

#include "decme/common.hpp"
#include "decme/rng.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace decme {

enum class InfoMatrix { i_obs, i_com, i_mis };

inline const char* to_string(InfoMatrix which) {
  switch (which) {
  case InfoMatrix::i_obs: return "i_obs";
  case InfoMatrix::i_com: return "i_com";
  case InfoMatrix::i_mis: return "i_mis";
  }
  return "?";
}

class NotPositiveDefinite : public Error {
public:
  explicit NotPositiveDefinite(InfoMatrix which)
      : Error(std::string("matrix is not positive definite: ") + to_string(which)), which_(which) {}
  InfoMatrix which() const noexcept { return which_; }

private:
  InfoMatrix which_;
};

class ZeroEta : public Error {
public:
  ZeroEta() : Error("eta is the zero vector; relaxation factor undefined") {}
};

class NotTwoDimensional : public Error {
public:
  NotTwoDimensional() : Error("operation requires a two-dimensional problem") {}
};

class NonpositiveRatio : public Error {
public:
  NonpositiveRatio() : Error("eta ratio squared must be positive") {}
};

namespace detail {

inline bool is_symmetric(const Matrix& a, double rel_tol = 1e-12) {
  if (a.rows() != a.cols()) return false;
  const double scale = a.cwiseAbs().maxCoeff();
  if (scale == 0.0) return true;
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

inline Eigen::SelfAdjointEigenSolver<Matrix> sym_eigen(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  if (es.info() != Eigen::Success) throw EigenFailure("symmetric eigensolver did not converge");
  return es;
}

/// Smallest eigenvalue above 1e-12 of the largest.
inline bool is_positive_definite(const Matrix& a) {
  if (a.rows() == 0) return false;
  const auto es = sym_eigen(a);
  const double hi = es.eigenvalues().maxCoeff();
  const double lo = es.eigenvalues().minCoeff();
  return hi > 0.0 && lo > 1e-12 * hi;
}

/// Symmetric square root and its inverse via eigendecomposition.
inline std::pair<Matrix, Matrix> sym_sqrt_pair(const Matrix& a) {
  const auto es = sym_eigen(a);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Matrix& v = es.eigenvectors();
  Matrix sq = v * root.asDiagonal() * v.transpose();
  Matrix isq = v * root.cwiseInverse().asDiagonal() * v.transpose();
  return {std::move(sq), std::move(isq)};
}

/// Flip column signs so the largest-magnitude entry of each column is positive.
inline void canonical_signs(Matrix& cols) {
  for (Eigen::Index j = 0; j < cols.cols(); ++j) {
    Eigen::Index arg = 0;
    cols.col(j).cwiseAbs().maxCoeff(&arg);
    if (cols(arg, j) < 0.0) cols.col(j) *= -1.0;
  }
}

} // namespace detail

/// Quadratic log-likelihood surrogate L(θ) = -½(θ-θ̂)'I_obs(θ-θ̂) together with the
/// complete-data information I_com that defines its EM map.
class QuadSurrogate {
public:
  /// Validated construction. Rejects asymmetric, mismatched or non-PD inputs.
  static QuadSurrogate make(ParamVec theta_hat, const Matrix& i_obs, const Matrix& i_com) {
    return QuadSurrogate(std::move(theta_hat), i_obs, i_com, true);
  }

  /// Skips the I_mis > 0 requirement. Used to probe degenerate EM maps.
  static QuadSurrogate unchecked(ParamVec theta_hat, const Matrix& i_obs, const Matrix& i_com) {
    return QuadSurrogate(std::move(theta_hat), i_obs, i_com, false);
  }

  const ParamVec& theta_hat() const noexcept { return theta_hat_; }
  const Matrix& i_obs() const noexcept { return i_obs_; }
  const Matrix& i_com() const noexcept { return i_com_; }
  Matrix i_mis() const { return i_com_ - i_obs_; }
  /// I_com⁻¹ I_obs.
  const Matrix& rate_matrix() const noexcept { return rate_; }
  Eigen::Index dim() const noexcept { return theta_hat_.size(); }

private:
  QuadSurrogate(ParamVec theta_hat, const Matrix& i_obs, const Matrix& i_com, bool check_mis)
      : theta_hat_(std::move(theta_hat)) {
    const Eigen::Index p = theta_hat_.size();
    if (p == 0) throw Error("surrogate dimension must be positive");
    require_dim("i_obs rows", p, i_obs.rows());
    require_dim("i_obs cols", p, i_obs.cols());
    require_dim("i_com rows", p, i_com.rows());
    require_dim("i_com cols", p, i_com.cols());
    if (!detail::is_symmetric(i_obs)) throw Error("i_obs is not symmetric");
    if (!detail::is_symmetric(i_com)) throw Error("i_com is not symmetric");
    i_obs_ = 0.5 * (i_obs + i_obs.transpose());
    i_com_ = 0.5 * (i_com + i_com.transpose());
    if (!detail::is_positive_definite(i_obs_)) throw NotPositiveDefinite(InfoMatrix::i_obs);
    if (!detail::is_positive_definite(i_com_)) throw NotPositiveDefinite(InfoMatrix::i_com);
    if (check_mis && !detail::is_positive_definite(i_com_ - i_obs_))
      throw NotPositiveDefinite(InfoMatrix::i_mis);
    rate_ = i_com_.ldlt().solve(i_obs_);
  }

  ParamVec theta_hat_;
  Matrix i_obs_;
  Matrix i_com_;
  Matrix rate_;
};

inline QuadSurrogate make_surrogate(ParamVec theta_hat, const Matrix& i_obs, const Matrix& i_com) {
  return QuadSurrogate::make(std::move(theta_hat), i_obs, i_com);
}

inline double surrogate_loglik(const QuadSurrogate& s, const ParamVec& theta) {
  require_dim("surrogate_loglik theta", s.dim(), theta.size());
  const ParamVec e = theta - s.theta_hat();
  return -0.5 * e.dot(s.i_obs() * e);
}

/// One EM step on the surrogate: θ + I_com⁻¹I_obs(θ̂ − θ).
inline ParamVec em_map(const QuadSurrogate& s, const ParamVec& theta) {
  require_dim("em_map theta", s.dim(), theta.size());
  return theta + s.rate_matrix() * (s.theta_hat() - theta);
}

/// Missing-information fraction I − I_com⁻¹I_obs.
inline Matrix dm_matrix(const QuadSurrogate& s) {
  return Matrix::Identity(s.dim(), s.dim()) - s.rate_matrix();
}

/**
 * Eigen-structure of I_com⁻¹I_obs = P Λ P⁻¹ with P = I_com^{-1/2} T.
 *
 * lambdas are sorted descending, so the matching DM eigenvalues 1 − λ ascend.
 */
struct SpectralDecomp {
  Eigen::VectorXd lambdas;
  Matrix p_mat;
  Matrix p_inv;
  Matrix t_mat;

  Eigen::Index dim() const noexcept { return lambdas.size(); }
};

inline SpectralDecomp spectral(const QuadSurrogate& s) {
  const auto [sq, isq] = detail::sym_sqrt_pair(s.i_com());
  Matrix sym = isq * s.i_obs() * isq;
  sym = 0.5 * (sym + sym.transpose());
  const auto es = detail::sym_eigen(sym);

  SpectralDecomp d;
  d.lambdas = es.eigenvalues().reverse();
  d.t_mat = es.eigenvectors().rowwise().reverse();
  detail::canonical_signs(d.t_mat);
  d.p_mat = isq * d.t_mat;
  d.p_inv = d.t_mat.transpose() * sq;
  return d;
}

/// η = P⁻¹(θ̂ − θ).
inline ParamVec eta_coords(const SpectralDecomp& d, const ParamVec& theta_hat, const ParamVec& theta) {
  require_dim("eta_coords theta_hat", d.dim(), theta_hat.size());
  require_dim("eta_coords theta", d.dim(), theta.size());
  return d.p_inv * (theta_hat - theta);
}

/// Exact-line-search SOR relaxation factor (η'Λ²η)/(η'Λ³η) − 1 from the
/// η-coordinates of the point the EM step starts from.
inline double sor_alpha_closed_form(const SpectralDecomp& d, const ParamVec& eta) {
  require_dim("sor_alpha_closed_form eta", d.dim(), eta.size());
  if (eta.cwiseAbs().maxCoeff() == 0.0) throw ZeroEta();
  const Eigen::ArrayXd l = d.lambdas.array();
  const Eigen::ArrayXd e2 = eta.array().square();
  const double num = (l.square() * e2).sum();
  const double den = (l.cube() * e2).sum();
  return num / den - 1.0;
}

/// Two-step SOR contraction on a p = 2 problem, as a function of r = (η₁/η₂)².
inline double sor2_contraction(const SpectralDecomp& d, double eta_ratio_sq) {
  if (d.dim() != 2) throw NotTwoDimensional();
  if (!(eta_ratio_sq > 0.0)) throw NonpositiveRatio();
  const double l1 = d.lambdas[0];
  const double l2 = d.lambdas[1];
  const double r = eta_ratio_sq;
  const double cross = (l1 * l1) / (l2 * l2) * r + (l2 * l2) / (l1 * l1) / r;
  return (l2 - l1) * (l2 - l1) / (l1 * l1 + l2 * l2 + l1 * l2 * cross);
}

struct SorfOptimum {
  double alpha;
  double rate;
};

/// Best fixed relaxation factor and the convergence rate it achieves.
inline SorfOptimum optimal_sorf_factor(const SpectralDecomp& d) {
  const double l1 = d.lambdas.maxCoeff();
  const double lp = d.lambdas.minCoeff();
  return {2.0 / (l1 + lp) - 1.0, (l1 - lp) / (l1 + lp)};
}

// ---------------------------------------------------------------------------
// Random surrogates

/// p values in (lo, hi), sorted descending, adjacent gaps at least `gap`.
inline Eigen::VectorXd sample_spaced_lambdas(Rng& rng, Eigen::Index p, double gap = 0.05,
                                             double lo = 0.02, double hi = 0.98) {
  const double slack = (hi - lo) - gap * static_cast<double>(p - 1);
  if (slack <= 0.0) throw Error("cannot fit requested eigenvalue gaps in range");
  std::vector<double> u(static_cast<std::size_t>(p));
  for (auto& x : u) x = rng.uniform() * slack;
  std::sort(u.begin(), u.end());
  Eigen::VectorXd out(p);
  for (Eigen::Index i = 0; i < p; ++i)
    out[p - 1 - i] = lo + u[static_cast<std::size_t>(i)] + gap * static_cast<double>(i);
  return out;
}

inline Matrix random_orthogonal(Rng& rng, Eigen::Index p) {
  Matrix g(p, p);
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = 0; i < p; ++i) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(p, p);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < p; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

/**
 * Random surrogate with a controlled spectrum: I_com = A'A + pI for standard
 * normal A, and I_obs = I_com^{1/2} T diag(λ) T' I_com^{1/2} for a random
 * orthogonal T. θ̂ is standard normal.
 */
inline QuadSurrogate random_surrogate(Rng& rng, const Eigen::VectorXd& lambdas) {
  const Eigen::Index p = lambdas.size();
  Matrix a(p, p);
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = 0; i < p; ++i) a(i, j) = rng.normal();
  Matrix i_com = a.transpose() * a + static_cast<double>(p) * Matrix::Identity(p, p);
  i_com = 0.5 * (i_com + i_com.transpose());
  const Matrix t = random_orthogonal(rng, p);
  const Matrix sq = detail::sym_sqrt_pair(i_com).first;
  Matrix i_obs = sq * t * lambdas.asDiagonal() * t.transpose() * sq;
  i_obs = 0.5 * (i_obs + i_obs.transpose());
  ParamVec theta_hat(p);
  for (Eigen::Index i = 0; i < p; ++i) theta_hat[i] = rng.normal();
  return QuadSurrogate::make(std::move(theta_hat), i_obs, i_com);
}

inline QuadSurrogate random_surrogate(Rng& rng, Eigen::Index p, double gap = 0.05) {
  const Eigen::VectorXd lambdas = sample_spaced_lambdas(rng, p, gap);
  return random_surrogate(rng, lambdas);
}

// ---------------------------------------------------------------------------
// Plain-text format: p, then θ̂, then p rows of I_obs, then p rows of I_com.

inline void write_surrogate(std::ostream& os, const QuadSurrogate& s) {
  const Eigen::Index p = s.dim();
  const auto old_prec = os.precision(17);
  os << p << '\n';
  for (Eigen::Index i = 0; i < p; ++i) os << (i ? " " : "") << s.theta_hat()[i];
  os << '\n';
  for (const Matrix* m : {&s.i_obs(), &s.i_com()}) {
    for (Eigen::Index i = 0; i < p; ++i) {
      for (Eigen::Index j = 0; j < p; ++j) os << (j ? " " : "") << (*m)(i, j);
      os << '\n';
    }
  }
  os.precision(old_prec);
}

inline QuadSurrogate read_surrogate(std::istream& is) {
  long long p = 0;
  if (!(is >> p) || p <= 0) throw Error("surrogate file: bad dimension line");
  auto read_value = [&is]() {
    double v = 0.0;
    if (!(is >> v)) throw Error("surrogate file: truncated or non-numeric data");
    return v;
  };
  ParamVec theta_hat(p);
  for (long long i = 0; i < p; ++i) theta_hat[i] = read_value();
  Matrix i_obs(p, p), i_com(p, p);
  for (Matrix* m : {&i_obs, &i_com})
    for (long long i = 0; i < p; ++i)
      for (long long j = 0; j < p; ++j) (*m)(i, j) = read_value();
  return QuadSurrogate::make(std::move(theta_hat), i_obs, i_com);
}

} // namespace decme
