#pragma once

// Finite-difference estimate of the EM map's Jacobian DM at a fixed point and
// its eigen-report. The eigenvalues are the per-direction EM contraction rates.

#include "decme/common.hpp"
#include "decme/em_core.hpp"
#include "decme/line_search.hpp"
#include "decme/linalg_spectral.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace decme {

class NotAFixedPoint : public Error {
public:
  explicit NotAFixedPoint(double residual)
      : Error("point is not a fixed point of the EM map (residual " + std::to_string(residual) + ")") {}
};

class InfeasiblePerturbation : public Error {
public:
  explicit InfeasiblePerturbation(Eigen::Index coord)
      : Error("cannot perturb coordinate " + std::to_string(coord) + " inside the feasible region") {}
};

struct DmEstimate {
  Matrix dm;
  Eigen::VectorXd steps;                 // step actually used per coordinate
  std::vector<Eigen::Index> one_sided;   // coordinates differenced one-sidedly
};

inline double default_dm_step(double theta_i) { return 1e-5 * (1.0 + std::fabs(theta_i)); }

/**
 * Central-difference Jacobian of the EM map at θ*. Column i is
 * [M(θ*+h_i e_i) − M(θ*−h_i e_i)] / (2h_i). A uniform `h` overrides the default
 * relative step 1e-5·(1+|θ*_i|). Perturbations leaving the feasible region fall
 * back to one-sided differences; if neither side is feasible h_i shrinks by 10
 * once before giving up.
 */
inline DmEstimate estimate_dm_detailed(const EmModel& m, const ParamVec& theta_star,
                                       std::optional<double> h = std::nullopt) {
  require_dim("estimate_dm theta", m.dim, theta_star.size());
  if (h && !(*h > 0.0)) throw Error("finite-difference step must be positive");
  const Eigen::Index p = m.dim;
  const ParamVec center = m.em_step(theta_star);
  const double residual = (center - theta_star).cwiseAbs().maxCoeff();
  if (!(residual < 10.0 * h.value_or(1e-5))) throw NotAFixedPoint(residual);

  DmEstimate out;
  out.dm.resize(p, p);
  out.steps.resize(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    double step = h ? *h : default_dm_step(theta_star[i]);
    bool done = false;
    for (int attempt = 0; attempt < 2 && !done; ++attempt, step *= 0.1) {
      ParamVec plus = theta_star, minus = theta_star;
      plus[i] += step;
      minus[i] -= step;
      const bool ok_plus = is_feasible(m.constraints, plus);
      const bool ok_minus = is_feasible(m.constraints, minus);
      if (ok_plus && ok_minus) {
        out.dm.col(i) = (m.em_step(plus) - m.em_step(minus)) / (2.0 * step);
      } else if (ok_plus) {
        out.dm.col(i) = (m.em_step(plus) - center) / step;
      } else if (ok_minus) {
        out.dm.col(i) = (center - m.em_step(minus)) / step;
      } else {
        continue;
      }
      if (!(ok_plus && ok_minus)) {
        out.one_sided.push_back(i);
        log(LogLevel::info, "dm probe: one-sided difference for coordinate " + std::to_string(i));
      }
      out.steps[i] = step;
      done = true;
    }
    if (!done) throw InfeasiblePerturbation(i);
  }
  return out;
}

inline Matrix estimate_dm(const EmModel& m, const ParamVec& theta_star, std::optional<double> h = std::nullopt) {
  return estimate_dm_detailed(m, theta_star, h).dm;
}

struct DmEigenReport {
  Eigen::VectorXd eigenvalues; // real parts, descending
  Eigen::VectorXd imag_parts;  // zero where truncated
  Matrix eigenvectors;         // unit columns, matching order
  bool complex_flagged = false;

  double spectral_radius() const {
    double r = 0.0;
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i)
      r = std::max(r, std::hypot(eigenvalues[i], imag_parts[i]));
    return r;
  }
};

inline constexpr double kComplexTruncation = 1e-8;

/**
 * Eigenpairs of a DM estimate. With I_com available the symmetric similarity
 * I_com^{1/2} DM I_com^{-1/2} is diagonalised instead of the raw matrix.
 */
inline DmEigenReport dm_eigen_report(const Matrix& dm, const std::optional<Matrix>& i_com = std::nullopt) {
  if (dm.rows() != dm.cols()) throw Error("dm_eigen_report: matrix must be square");
  const Eigen::Index p = dm.rows();
  DmEigenReport rep;
  rep.imag_parts = Eigen::VectorXd::Zero(p);

  if (i_com) {
    require_dim("dm_eigen_report i_com", p, i_com->rows());
    const auto [sq, isq] = detail::sym_sqrt_pair(*i_com);
    Matrix sym = sq * dm * isq;
    sym = 0.5 * (sym + sym.transpose());
    const auto es = detail::sym_eigen(sym);
    rep.eigenvalues = es.eigenvalues().reverse();
    rep.eigenvectors = isq * es.eigenvectors().rowwise().reverse();
  } else {
    Eigen::EigenSolver<Matrix> es(dm);
    if (es.info() != Eigen::Success) throw EigenFailure("general eigensolver did not converge");
    const Eigen::VectorXcd vals = es.eigenvalues();
    const Eigen::MatrixXcd vecs = es.eigenvectors();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return vals[a].real() > vals[b].real(); });
    rep.eigenvalues.resize(p);
    rep.eigenvectors.resize(p, p);
    for (Eigen::Index k = 0; k < p; ++k) {
      const Eigen::Index src = order[static_cast<std::size_t>(k)];
      rep.eigenvalues[k] = vals[src].real();
      if (std::fabs(vals[src].imag()) >= kComplexTruncation) {
        rep.imag_parts[k] = vals[src].imag();
        rep.complex_flagged = true;
      }
      rep.eigenvectors.col(k) = vecs.col(src).real();
    }
    if (rep.complex_flagged) log(LogLevel::warn, "dm probe: complex eigenvalues above truncation threshold");
  }
  for (Eigen::Index k = 0; k < p; ++k) {
    const double nrm = rep.eigenvectors.col(k).norm();
    if (nrm > 0.0) rep.eigenvectors.col(k) /= nrm;
  }
  detail::canonical_signs(rep.eigenvectors);
  return rep;
}

/// CSV: index, eigenvalue, imag.
inline void write_eigenvalues_csv(std::ostream& os, const DmEigenReport& rep) {
  const auto old_prec = os.precision(12);
  os << "index,eigenvalue,imag\n";
  for (Eigen::Index k = 0; k < rep.eigenvalues.size(); ++k)
    os << k + 1 << ',' << rep.eigenvalues[k] << ',' << rep.imag_parts[k] << '\n';
  os.precision(old_prec);
}

/// One line per eigenpair: the eigenvalue, then its eigenvector.
inline void write_eigenvectors_text(std::ostream& os, const DmEigenReport& rep) {
  const auto old_prec = os.precision(6);
  const auto old_flags = os.setf(std::ios::fixed, std::ios::floatfield);
  for (Eigen::Index k = 0; k < rep.eigenvalues.size(); ++k) {
    os << rep.eigenvalues[k];
    for (Eigen::Index i = 0; i < rep.eigenvectors.rows(); ++i) os << ' ' << rep.eigenvectors(i, k);
    os << '\n';
  }
  os.flags(old_flags);
  os.precision(old_prec);
}

} // namespace decme
