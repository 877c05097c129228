#pragma once

// Numerical checks of the SOR and DECME_v1 convergence results on random
// quadratic surrogates. Each check returns a CheckResult carrying the measured
// worst case next to its threshold.

#include "decme/common.hpp"
#include "decme/em_core.hpp"
#include "decme/linalg_spectral.hpp"
#include "decme/models.hpp"
#include "decme/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace decme {

struct CheckResult {
  std::string name;
  bool passed = true;
  /// false for report-only checks, which never fail the suite.
  bool asserted = true;
  double measured = 0.0;
  double threshold = 0.0;
  int trials = 0;
  double seconds = 0.0;
  std::string detail;
};

/// Collects the largest log-likelihood decrease seen across runs.
struct MonotonicityAudit {
  double worst_drop = 0.0;
  long runs = 0;

  void observe(const RunTrace& t) {
    worst_drop = std::max(worst_drop, t.max_loglik_drop());
    ++runs;
  }
};

/// Iterates closer to θ̂ than this fraction of max(‖θ₀−θ̂‖, ‖θ̂‖) are excluded
/// from the exact-arithmetic checks: their own rounding, about eps·‖θ̂‖, then
/// dominates the quantities being compared.
inline constexpr double kNumericalFloor = 1e-5;

namespace detail {

inline ParamVec random_start(Rng& rng, const QuadSurrogate& s) {
  ParamVec th = s.theta_hat();
  for (Eigen::Index i = 0; i < th.size(); ++i) th[i] += rng.normal();
  return th;
}

inline RunTrace exact_run(const QuadSurrogate& s, const ParamVec& start, Variant v, long iters,
                          std::optional<int> period, MonotonicityAudit* audit) {
  AcceleratorConfig cfg;
  cfg.variant = v;
  cfg.settings = LineSearchSettings::exact();
  cfg.stop = StopRule::iterations(iters);
  cfg.restart_period = period;
  RunTrace t = run(surrogate_model(s), start, cfg);
  if (audit) audit->observe(t);
  return t;
}

/// θ̃_0 = start, θ̃_t = record t−1.
inline std::vector<ParamVec> iterates(const RunTrace& t) {
  std::vector<ParamVec> out{t.start};
  for (const auto& r : t.records) out.push_back(r.theta);
  return out;
}

/// Number of leading iterates not yet below the numerical floor.
inline std::size_t resolved_prefix(const std::vector<ParamVec>& it, const ParamVec& theta_hat) {
  const double scale = std::max((it.front() - theta_hat).norm(), theta_hat.norm());
  std::size_t n = 0;
  while (n < it.size() && (it[n] - theta_hat).norm() >= kNumericalFloor * scale) ++n;
  return n;
}

/// sin of the angle between two nonzero vectors, computed without cancellation.
inline double sin_angle(const ParamVec& a, const ParamVec& b) {
  const ParamVec ua = a.normalized(), ub = b.normalized();
  const double s = (ua - ua.dot(ub) * ub).norm();
  return std::min(s, 1.0);
}

/// Total-least-squares line through 2-D points: (centroid, unit direction).
inline std::pair<Eigen::Vector2d, Eigen::Vector2d> fit_line(const std::vector<ParamVec>& pts) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  Eigen::Matrix2d scatter = Eigen::Matrix2d::Zero();
  for (const auto& p : pts) scatter += (p - c) * (p - c).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(scatter);
  return {c, es.eigenvectors().col(1)};
}

struct Stopwatch {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

} // namespace detail

/// SOR relaxation factors from an exact line search are positive and equal
/// the closed form in η-coordinates.
inline CheckResult check_sor_alpha(Rng rng, int trials, int p_lo, int p_hi, MonotonicityAudit* audit = nullptr,
                                   long iters = 10) {
  detail::Stopwatch sw;
  CheckResult r{"sor_alpha_closed_form", true, true, 0.0, 1e-6, trials, 0.0, ""};
  double min_alpha = kInf;
  for (int k = 0; k < trials; ++k) {
    const int p = p_lo + k % (p_hi - p_lo + 1);
    const QuadSurrogate s = random_surrogate(rng, p);
    const SpectralDecomp d = spectral(s);
    const RunTrace t = detail::exact_run(s, detail::random_start(rng, s), Variant::sor, iters, std::nullopt, audit);
    const auto it = detail::iterates(t);
    const std::size_t n = detail::resolved_prefix(it, s.theta_hat());
    for (std::size_t i = 1; i < n; ++i) {
      const double cf = sor_alpha_closed_form(d, eta_coords(d, s.theta_hat(), it[i - 1]));
      const double a = t.records[i - 1].alphas.at(0);
      min_alpha = std::min(min_alpha, a);
      r.measured = std::max(r.measured, std::fabs(a - cf) / std::fabs(cf));
    }
  }
  r.passed = min_alpha > 0.0 && r.measured < r.threshold;
  r.detail = "min_alpha=" + detail::fmt(min_alpha);
  r.seconds = sw.seconds();
  return r;
}

/// p = 2: the SOR relaxation factor has period two, |α_t − α_{t−2}| small.
inline CheckResult check_alpha_period_two(Rng rng, int trials, MonotonicityAudit* audit = nullptr, long iters = 20) {
  detail::Stopwatch sw;
  CheckResult r{"sor_alpha_period_two", true, true, 0.0, 1e-7, trials, 0.0, ""};
  for (int k = 0; k < trials; ++k) {
    const QuadSurrogate s = random_surrogate(rng, 2);
    const RunTrace t = detail::exact_run(s, detail::random_start(rng, s), Variant::sor, iters, std::nullopt, audit);
    const std::size_t n = detail::resolved_prefix(detail::iterates(t), s.theta_hat());
    // α_t is computed from θ̃_{t−1}; usable while θ̃_{t−1} is resolved.
    for (std::size_t i = 3; i <= std::min(n, t.records.size()); ++i)
      r.measured = std::max(r.measured, std::fabs(t.records[i - 1].alphas[0] - t.records[i - 3].alphas[0]));
  }
  r.passed = r.measured < r.threshold;
  r.seconds = sw.seconds();
  return r;
}

/// p = 2: two SOR steps contract the error by at most ((λ₁−λ₂)/(λ₁+λ₂))²,
/// which beats EM's two-step factor (1−λ₂)².
inline CheckResult check_sor_rate(Rng rng, int trials, MonotonicityAudit* audit = nullptr, long iters = 20) {
  detail::Stopwatch sw;
  CheckResult r{"sor_two_step_rate", true, true, -kInf, 1e-9, trials, 0.0, ""};
  int ordering_failures = 0;
  for (int k = 0; k < trials; ++k) {
    const QuadSurrogate s = random_surrogate(rng, 2);
    const SpectralDecomp d = spectral(s);
    const double l1 = d.lambdas[0], l2 = d.lambdas[1];
    const double bound = std::pow((l1 - l2) / (l1 + l2), 2);
    if (l1 != l2 && !(bound < std::pow(1.0 - l2, 2))) ++ordering_failures;
    const RunTrace t = detail::exact_run(s, detail::random_start(rng, s), Variant::sor, iters, std::nullopt, audit);
    const auto it = detail::iterates(t);
    const std::size_t n = detail::resolved_prefix(it, s.theta_hat());
    for (std::size_t i = 0; i + 2 < n; ++i) {
      const double c = (it[i + 2] - s.theta_hat()).norm() / (it[i] - s.theta_hat()).norm();
      r.measured = std::max(r.measured, c - bound);
    }
  }
  r.passed = r.measured <= r.threshold && ordering_failures == 0;
  r.detail = "excess_over_bound; ordering_failures=" + std::to_string(ordering_failures);
  r.seconds = sw.seconds();
  return r;
}

/// p = 2: odd and even SOR iterates each lie on a line through θ̂; η₁ flips
/// sign every step while η₂ keeps its sign.
inline CheckResult check_sor_zigzag(Rng rng, int trials, MonotonicityAudit* audit = nullptr, long iters = 20) {
  detail::Stopwatch sw;
  CheckResult r{"sor_zigzag_geometry", true, true, 0.0, 1e-6, trials, 0.0, ""};
  double worst_angle = 0.0, worst_cross = 0.0;
  int sign_violations = 0;
  for (int k = 0; k < trials; ++k) {
    const QuadSurrogate s = random_surrogate(rng, 2);
    const SpectralDecomp d = spectral(s);
    const ParamVec& th = s.theta_hat();
    const RunTrace t = detail::exact_run(s, detail::random_start(rng, s), Variant::sor, iters, std::nullopt, audit);
    const auto it = detail::iterates(t);
    const std::size_t n = detail::resolved_prefix(it, th);
    const double d0 = (it[0] - th).norm();

    std::optional<std::pair<Eigen::Vector2d, Eigen::Vector2d>> lines[2];
    for (std::size_t parity = 0; parity < 2; ++parity) {
      std::vector<ParamVec> pts;
      for (std::size_t i = parity; i < n; i += 2) pts.push_back(it[i]);
      for (std::size_t j = 2; j < pts.size(); ++j)
        worst_angle = std::max(worst_angle, detail::sin_angle(pts[j - 1] - pts[j - 2], pts[j] - pts[j - 1]));
      if (pts.size() >= 2) lines[parity] = detail::fit_line(pts);
    }
    if (lines[0] && lines[1]) {
      Eigen::Matrix2d a;
      a << lines[0]->second, -lines[1]->second;
      const Eigen::Vector2d st = a.colPivHouseholderQr().solve(lines[1]->first - lines[0]->first);
      const Eigen::Vector2d x = lines[0]->first + st[0] * lines[0]->second;
      worst_cross = std::max(worst_cross, (x - th).norm() / d0);
    }

    for (std::size_t i = 1; i < n; ++i) {
      const ParamVec e0 = eta_coords(d, th, it[i - 1]), e1 = eta_coords(d, th, it[i]);
      if (!(e0[0] * e1[0] < 0.0) || !(e0[1] * e1[1] > 0.0)) ++sign_violations;
    }
  }
  r.measured = std::max(worst_angle, worst_cross);
  r.passed = worst_angle < r.threshold && worst_cross < r.threshold && sign_violations == 0;
  r.detail = "max_sin_angle=" + detail::fmt(worst_angle) + " max_rel_intersection=" + detail::fmt(worst_cross) +
             " eta_sign_violations=" + std::to_string(sign_violations);
  r.seconds = sw.seconds();
  return r;
}

struct ConjugacyResults {
  CheckResult termination;
  CheckResult conjugacy;
};

/// DECME_v1 on a p-dimensional quadratic reaches θ̂ within p+1 iterations and
/// its steps θ̃_t − θ̃_{t−1} within a cycle are I_obs-conjugate.
inline ConjugacyResults check_decme_v1_conjugacy(Rng rng, int trials_per_p, int p_lo, int p_hi,
                                                 MonotonicityAudit* audit = nullptr) {
  detail::Stopwatch sw;
  ConjugacyResults out;
  const int total = trials_per_p * (p_hi - p_lo + 1);
  out.termination = {"decme_v1_finite_termination", true, true, 0.0, 1e-7, total, 0.0, ""};
  out.conjugacy = {"decme_v1_conjugacy", true, true, 0.0, 1e-6, total, 0.0, ""};
  int late = 0;
  for (int p = p_lo; p <= p_hi; ++p) {
    for (int k = 0; k < trials_per_p; ++k) {
      const QuadSurrogate s = random_surrogate(rng, p);
      const ParamVec& th = s.theta_hat();
      const RunTrace t = detail::exact_run(s, detail::random_start(rng, s), Variant::decme_v1, p + 1, p, audit);
      const auto it = detail::iterates(t);

      double best = kInf;
      for (std::size_t i = 1; i < it.size(); ++i) best = std::min(best, (it[i] - th).cwiseAbs().maxCoeff());
      out.termination.measured = std::max(out.termination.measured, best);
      if (!(best < out.termination.threshold)) ++late;

      const double d0 = (it[0] - th).norm();
      const double scale = detail::sym_eigen(s.i_obs()).eigenvalues().maxCoeff();
      std::vector<ParamVec> steps;
      for (std::size_t i = 1; i <= static_cast<std::size_t>(p); ++i) {
        const ParamVec step = it[i] - it[i - 1];
        if (step.norm() >= kNumericalFloor * d0) steps.push_back(step);
      }
      for (std::size_t i = 0; i < steps.size(); ++i)
        for (std::size_t j = 0; j < i; ++j) {
          const double res = std::fabs(steps[i].dot(s.i_obs() * steps[j])) / (steps[i].norm() * steps[j].norm() * scale);
          out.conjugacy.measured = std::max(out.conjugacy.measured, res);
        }
    }
  }
  out.termination.passed = late == 0;
  out.termination.detail = "max over runs of min_t |theta_t - theta_hat|_inf, t <= p+1; late_runs=" + std::to_string(late);
  out.conjugacy.passed = out.conjugacy.measured < out.conjugacy.threshold;
  out.conjugacy.detail = "max |d_i' I_obs d_j| / (|d_i| |d_j| |I_obs|)";
  out.termination.seconds = out.conjugacy.seconds = sw.seconds();
  return out;
}

/// p > 2: whether SOR's α_t splits into two interleaved, nearly constant
/// subsequences. Reported only. The measured value is the median over trials
/// of (within-subsequence variance) / (between-subsequence gap)².
inline CheckResult report_alpha_oscillation(Rng rng, int trials, int p_lo, int p_hi,
                                            MonotonicityAudit* audit = nullptr, long iters = 30) {
  detail::Stopwatch sw;
  CheckResult r{"sor_alpha_oscillation_report", true, false, 0.0, 0.0, trials, 0.0, ""};
  std::vector<double> ratios;
  for (int k = 0; k < trials; ++k) {
    const int p = p_lo + k % (p_hi - p_lo + 1);
    const QuadSurrogate s = random_surrogate(rng, p);
    const RunTrace t = detail::exact_run(s, detail::random_start(rng, s), Variant::sor, iters, std::nullopt, audit);
    const std::size_t n = std::min(detail::resolved_prefix(detail::iterates(t), s.theta_hat()), t.records.size());
    // Skip the transient third of the sequence.
    std::vector<double> sub[2];
    for (std::size_t i = n / 3; i < n; ++i) sub[i % 2].push_back(t.records[i].alphas[0]);
    if (sub[0].size() < 2 || sub[1].size() < 2) continue;
    double mean[2], var = 0.0;
    for (int j = 0; j < 2; ++j) {
      mean[j] = 0.0;
      for (double a : sub[j]) mean[j] += a;
      mean[j] /= static_cast<double>(sub[j].size());
      for (double a : sub[j]) var += (a - mean[j]) * (a - mean[j]);
    }
    var /= static_cast<double>(sub[0].size() + sub[1].size());
    const double gap = mean[0] - mean[1];
    ratios.push_back(gap != 0.0 ? var / (gap * gap) : kInf);
  }
  if (!ratios.empty()) {
    std::nth_element(ratios.begin(), ratios.begin() + static_cast<long>(ratios.size() / 2), ratios.end());
    r.measured = ratios[ratios.size() / 2];
  }
  r.detail = "median within-variance / gap^2 over " + std::to_string(ratios.size()) + " usable runs";
  r.seconds = sw.seconds();
  return r;
}

struct VerifyOptions {
  std::uint64_t seed = 20100301;
  /// Restrict to one dimension: p = 2 runs the two-dimensional SOR checks
  /// only; any other p runs the general checks at that p.
  std::optional<int> p;
  /// Overrides every check's default trial count.
  std::optional<int> trials;
};

inline std::vector<CheckResult> run_theorem_suite(const VerifyOptions& o, MonotonicityAudit* audit = nullptr) {
  std::vector<CheckResult> out;
  auto trials = [&](int dflt) { return o.trials.value_or(dflt); };
  const bool all = !o.p.has_value();
  const bool two_d = all || *o.p == 2;
  const bool general = all || *o.p != 2;
  if (o.p && *o.p < 1) throw Error("verify: p must be positive");
  const int lo = all ? 2 : *o.p;

  if (general) out.push_back(check_sor_alpha(Rng(o.seed, 1), trials(500), lo, all ? 8 : *o.p, audit));
  if (two_d) {
    out.push_back(check_alpha_period_two(Rng(o.seed, 2), trials(100), audit));
    out.push_back(check_sor_rate(Rng(o.seed, 3), trials(100), audit));
    out.push_back(check_sor_zigzag(Rng(o.seed, 4), trials(100), audit));
  }
  if (general) {
    auto c = check_decme_v1_conjugacy(Rng(o.seed, 5), trials(50), lo, all ? 10 : *o.p, audit);
    out.push_back(std::move(c.termination));
    out.push_back(std::move(c.conjugacy));
    const int olo = all ? 3 : std::max(3, *o.p);
    const int ohi = all ? 8 : std::max(3, *o.p);
    out.push_back(report_alpha_oscillation(Rng(o.seed, 6), trials(50), olo, ohi, audit));
  }
  return out;
}

inline bool suite_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& c) { return !c.asserted || c.passed; });
}

inline void write_report(std::ostream& os, const std::vector<CheckResult>& results) {
  for (const auto& c : results) {
    os << (c.asserted ? (c.passed ? "PASS " : "FAIL ") : "INFO ") << c.name << " measured=" << detail::fmt(c.measured);
    if (c.asserted) os << " threshold=" << detail::fmt(c.threshold);
    os << " trials=" << c.trials << " seconds=" << detail::fmt(c.seconds);
    if (!c.detail.empty()) os << " (" << c.detail << ')';
    os << '\n';
  }
}

} // namespace decme
