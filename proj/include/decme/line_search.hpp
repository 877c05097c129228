#pragma once

// Derivative-free maximisation along a line, restricted to the feasible
// stretch of that line for the parameter constraints a model declares.

#include "decme/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

namespace decme {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Open interval of step lengths. Either end may be infinite.
struct Interval {
  double lo = -kInf;
  double hi = kInf;

  bool contains(double a) const noexcept { return lo < a && a < hi; }
  bool empty() const noexcept { return !(lo < hi); }
};

inline Interval intersect(const Interval& a, const Interval& b) noexcept {
  return {std::max(a.lo, b.lo), std::min(a.hi, b.hi)};
}

/// Replace infinite (or very distant) ends by ±clip.
inline Interval clipped(const Interval& iv, double clip) noexcept {
  return {std::max(iv.lo, -clip), std::min(iv.hi, clip)};
}

// Constraint catalog -------------------------------------------------------

/// Each listed parameter must stay > 0 (variances, degrees of freedom).
struct Positive {
  std::vector<std::size_t> indices;
};
/// Free mixture weights π_1..π_{K-1}: each > 0 and their sum < 1.
struct Simplex {
  std::vector<std::size_t> indices;
};
/// Packed 2×2 symmetric matrix (Ψ11, Ψ12, Ψ22) must stay positive definite.
struct PosDef2x2 {
  std::size_t i11 = 0, i12 = 1, i22 = 2;
};
struct Free {};

using ConstraintItem = std::variant<Free, Positive, Simplex, PosDef2x2>;

class InfeasiblePoint : public Error {
public:
  using Error::Error;
};

struct ConstraintSpec {
  std::vector<ConstraintItem> items;

  /// Index sets must be disjoint and inside [0, dim).
  void validate(Eigen::Index dim) const {
    std::set<std::size_t> seen;
    auto claim = [&](std::size_t i) {
      if (i >= static_cast<std::size_t>(dim))
        throw Error("constraint index " + std::to_string(i) + " outside dimension " + std::to_string(dim));
      if (!seen.insert(i).second) throw Error("constraint index " + std::to_string(i) + " used twice");
    };
    for (const auto& item : items) {
      std::visit(
          [&](const auto& c) {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, Positive> || std::is_same_v<T, Simplex>) {
              for (auto i : c.indices) claim(i);
            } else if constexpr (std::is_same_v<T, PosDef2x2>) {
              claim(c.i11);
              claim(c.i12);
              claim(c.i22);
            }
          },
          item);
    }
  }
};

namespace detail {

// Feasible α for v + α·dv > 0, as an open interval.
inline Interval positive_part(double v, double dv) noexcept {
  if (dv > 0.0) return {-v / dv, kInf};
  if (dv < 0.0) return {-kInf, -v / dv};
  return {};
}

// Connected component around 0 of {α : a α² + b α + c > 0}, given c > 0.
inline Interval quadratic_positive_part(double a, double b, double c) noexcept {
  if (a == 0.0) return positive_part(c, b);
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return {}; // a > 0 necessarily; positive everywhere
  const double q = -0.5 * (b + std::copysign(std::sqrt(disc), b));
  double r1 = q / a;
  double r2 = (q != 0.0) ? c / q : r1;
  if (r1 > r2) std::swap(r1, r2);
  Interval out;
  // With c > 0 the roots are on opposite sides of 0 when a < 0, same side when a > 0.
  if (r1 < 0.0 && r2 > 0.0) return {r1, r2};
  if (r2 <= 0.0) out.lo = r2;
  if (r1 >= 0.0) out.hi = r1;
  return out;
}

inline double simplex_sum(const std::vector<std::size_t>& idx, const ParamVec& v) {
  double s = 0.0;
  for (auto i : idx) s += v[static_cast<Eigen::Index>(i)];
  return s;
}

inline bool item_feasible(const ConstraintItem& item, const ParamVec& theta) {
  return std::visit(
      [&](const auto& c) -> bool {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Free>) {
          return true;
        } else if constexpr (std::is_same_v<T, Positive>) {
          for (auto i : c.indices)
            if (!(theta[static_cast<Eigen::Index>(i)] > 0.0)) return false;
          return true;
        } else if constexpr (std::is_same_v<T, Simplex>) {
          for (auto i : c.indices)
            if (!(theta[static_cast<Eigen::Index>(i)] > 0.0)) return false;
          return simplex_sum(c.indices, theta) < 1.0;
        } else {
          const double a = theta[static_cast<Eigen::Index>(c.i11)];
          const double b = theta[static_cast<Eigen::Index>(c.i12)];
          const double d = theta[static_cast<Eigen::Index>(c.i22)];
          return a > 0.0 && a * d - b * b > 0.0;
        }
      },
      item);
}

inline Interval item_interval(const ConstraintItem& item, const ParamVec& theta, const ParamVec& dir) {
  return std::visit(
      [&](const auto& c) -> Interval {
        using T = std::decay_t<decltype(c)>;
        Interval iv;
        if constexpr (std::is_same_v<T, Positive>) {
          for (auto i : c.indices) {
            const auto k = static_cast<Eigen::Index>(i);
            iv = intersect(iv, positive_part(theta[k], dir[k]));
          }
        } else if constexpr (std::is_same_v<T, Simplex>) {
          for (auto i : c.indices) {
            const auto k = static_cast<Eigen::Index>(i);
            iv = intersect(iv, positive_part(theta[k], dir[k]));
          }
          // 1 - Σπ - α Σd > 0
          iv = intersect(iv, positive_part(1.0 - simplex_sum(c.indices, theta), -simplex_sum(c.indices, dir)));
        } else if constexpr (std::is_same_v<T, PosDef2x2>) {
          const auto a = theta[static_cast<Eigen::Index>(c.i11)];
          const auto b = theta[static_cast<Eigen::Index>(c.i12)];
          const auto d = theta[static_cast<Eigen::Index>(c.i22)];
          const auto da = dir[static_cast<Eigen::Index>(c.i11)];
          const auto db = dir[static_cast<Eigen::Index>(c.i12)];
          const auto dd = dir[static_cast<Eigen::Index>(c.i22)];
          iv = positive_part(a, da);
          iv = intersect(iv, quadratic_positive_part(da * dd - db * db, a * dd + d * da - 2.0 * b * db,
                                                     a * d - b * b));
        }
        return iv;
      },
      item);
}

} // namespace detail

inline bool is_feasible(const ConstraintSpec& spec, const ParamVec& theta) {
  for (const auto& item : spec.items)
    if (!detail::item_feasible(item, theta)) return false;
  return theta.allFinite();
}

/// Open interval of α for which θ + α·d satisfies every constraint item.
/// Infinite ends are returned unclipped; callers clip when they need a finite bracket.
inline Interval feasible_interval(const ConstraintSpec& spec, const ParamVec& theta, const ParamVec& d) {
  require_dim("feasible_interval direction", theta.size(), d.size());
  if (!is_feasible(spec, theta)) throw InfeasiblePoint("starting point violates the constraint set");
  Interval iv;
  for (const auto& item : spec.items) iv = intersect(iv, detail::item_interval(item, theta, d));
  if (!iv.contains(0.0)) throw Error("internal error: feasible interval excludes 0 at a feasible point");
  return iv;
}

// Scalar maximiser ---------------------------------------------------------

struct LineSearchSettings {
  double tol = 0.01;
  int max_evals = 100;
  double interval_clip = 1e6;
  /// Optional narrowing: search only α >= hint (e.g. α > 0 for SOR). Off by default.
  std::optional<double> lower_bound_hint;
  /// Refine Brent's answer with a wide-stencil parabolic step. Brent cannot
  /// resolve a flat maximum below ~sqrt(eps) relative; the parabola can.
  bool polish = false;

  /// Settings approximating an exact line search.
  static LineSearchSettings exact() {
    LineSearchSettings s;
    s.tol = 1e-8;
    s.max_evals = 500;
    s.polish = true;
    return s;
  }
};

class NonFiniteValue : public Error {
public:
  using Error::Error;
};

struct LineMax {
  double alpha = 0.0;
  double value = -kInf;
  int evals = 0;
  bool budget_exceeded = false;
};

namespace detail {

struct NonFiniteAt {
  double alpha;
};

/**
 * Brent's golden-section / parabolic-interpolation minimiser on [ax, bx],
 * applied to -f. Same control flow and tolerances as the classic fmin routine:
 * tol1 = sqrt(eps)|x| + tol/3.
 */
template <class F>
LineMax brent_maximize(F&& f, double ax, double bx, double tol, int max_evals, int& evals) {
  const double golden = 0.5 * (3.0 - std::sqrt(5.0));
  const double eps = std::sqrt(std::numeric_limits<double>::epsilon());
  LineMax out;
  const int budget_end = evals + max_evals;

  auto g = [&](double a) {
    const double v = f(a);
    ++evals;
    if (!std::isfinite(v)) throw NonFiniteAt{a};
    return -v;
  };

  double a = ax, b = bx;
  double v = a + golden * (b - a);
  double w = v, x = v;
  double d = 0.0, e = 0.0;
  double fx = g(x);
  double fv = fx, fw = fx;
  const double tol3 = tol / 3.0;

  for (;;) {
    const double xm = 0.5 * (a + b);
    const double tol1 = eps * std::fabs(x) + tol3;
    const double t2 = 2.0 * tol1;
    if (std::fabs(x - xm) <= t2 - 0.5 * (b - a)) break;
    if (evals >= budget_end) {
      out.budget_exceeded = true;
      break;
    }

    double p = 0.0, q = 0.0, r = 0.0;
    if (std::fabs(e) > tol1) {
      r = (x - w) * (fx - fv);
      q = (x - v) * (fx - fw);
      p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      else q = -q;
      r = e;
      e = d;
    }

    double u = 0.0;
    if (std::fabs(p) >= std::fabs(0.5 * q * r) || p <= q * (a - x) || p >= q * (b - x)) {
      e = (x < xm) ? b - x : a - x;
      d = golden * e;
    } else {
      d = p / q;
      u = x + d;
      if (u - a < t2 || b - u < t2) d = (x < xm) ? tol1 : -tol1;
    }

    if (std::fabs(d) >= tol1) u = x + d;
    else u = (d > 0.0) ? x + tol1 : x - tol1;

    const double fu = g(u);
    if (fu <= fx) {
      if (u < x) b = x;
      else a = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      if (u < x) a = u;
      else b = u;
      if (fu <= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
  }
  out.alpha = x;
  out.value = -fx;
  out.evals = evals;
  return out;
}

/// One parabolic step through α−h, α, α+h with h ~ 0.1(1+|α|). The vertex is
/// kept if f improves, or if the parabola predicts f at the vertex to 1e-6 of
/// the stencil drop: then f is locally quadratic and any apparent loss is
/// rounding noise in a flat objective.
template <class F>
void parabolic_polish(F&& f, const Interval& box, LineMax& res, int& evals) {
  double h = 0.1 * (1.0 + std::fabs(res.alpha));
  h = std::min({h, 0.5 * (res.alpha - box.lo), 0.5 * (box.hi - res.alpha)});
  if (!(h > 0.0)) return;
  const double fm = f(res.alpha - h);
  const double fp = f(res.alpha + h);
  evals += 2;
  const double curv = fp - 2.0 * res.value + fm;
  if (!std::isfinite(fm) || !std::isfinite(fp) || !(curv < 0.0)) return;
  const double shift = -0.5 * h * (fp - fm) / curv;
  if (!(std::fabs(shift) < h) || shift == 0.0) return;
  const double a = res.alpha + shift;
  const double fa = f(a);
  ++evals;
  const double predicted = res.value - 0.25 * (fp - fm) * (fp - fm) / (2.0 * curv);
  const double drop = res.value - std::max(fm, fp);
  if (std::isfinite(fa) && (fa >= res.value || std::fabs(fa - predicted) <= 1e-6 * drop)) {
    res.alpha = a;
    res.value = fa;
  }
}

} // namespace detail

/**
 * Maximise f over the (clipped) interval iv.
 *
 * A non-finite value of f triggers one retry on an interval shrunk toward 0
 * (the offending end moves halfway toward the point closest to 0); a second
 * non-finite value throws NonFiniteValue. If the evaluation budget runs out
 * the best point so far is returned with budget_exceeded set.
 */
template <class F>
LineMax maximize_on_interval(F&& f, const Interval& iv, const LineSearchSettings& s) {
  if (!(s.tol > 0.0)) throw Error("line search tolerance must be positive");
  Interval box = clipped(iv, s.interval_clip);
  if (box.empty()) throw Error("line search interval is empty");

  int evals = 0;
  for (int attempt = 0;; ++attempt) {
    try {
      LineMax res = detail::brent_maximize(f, box.lo, box.hi, s.tol, std::max(1, s.max_evals - evals), evals);
      const double margin = 1e-12 * (box.hi - box.lo);
      const double inner = std::clamp(res.alpha, box.lo + margin, box.hi - margin);
      if (inner != res.alpha) {
        res.alpha = inner;
        res.value = f(inner);
        ++evals;
      }
      if (s.polish) detail::parabolic_polish(f, box, res, evals);
      res.evals = evals;
      return res;
    } catch (const detail::NonFiniteAt& bad) {
      if (attempt >= 1) throw NonFiniteValue("objective is non-finite at alpha=" + std::to_string(bad.alpha));
      const double anchor = std::clamp(0.0, box.lo, box.hi);
      const double mid = 0.5 * (bad.alpha + anchor);
      if (bad.alpha > anchor) box.hi = mid;
      else box.lo = mid;
      if (box.empty()) throw NonFiniteValue("objective is non-finite at alpha=" + std::to_string(bad.alpha));
    }
  }
}

/// True when a search direction is too small to search along.
inline bool negligible_direction(const ParamVec& d, const ParamVec& theta) {
  return d.norm() < 1e-14 * (1.0 + theta.norm());
}

struct GuardedStep {
  ParamVec theta;
  double alpha = 0.0;
  double loglik = -kInf;
  int evals = 0;
  /// The search point was worse than the origin and was rejected.
  bool guard_fired = false;
  bool budget_exceeded = false;
};

/**
 * Line search of loglik along θ_from + α·d inside the feasible interval, with a
 * monotonicity guard: if the best point found is below loglik(θ_from) the step
 * is rejected and α = 0 is returned.
 *
 * `f_from` may supply a known loglik(θ_from) so it is not re-evaluated.
 */
template <class LogLik>
GuardedStep guarded_line_step(LogLik&& loglik, const ParamVec& theta_from, const ParamVec& d,
                              const ConstraintSpec& spec, const LineSearchSettings& s,
                              std::optional<double> f_from = std::nullopt) {
  require_dim("guarded_line_step direction", theta_from.size(), d.size());
  GuardedStep out;
  out.theta = theta_from;
  if (!f_from) {
    f_from = loglik(theta_from);
    ++out.evals;
  }
  out.loglik = *f_from;
  if (negligible_direction(d, theta_from)) return out;

  Interval iv = feasible_interval(spec, theta_from, d);
  if (s.lower_bound_hint && *s.lower_bound_hint < iv.hi && *s.lower_bound_hint > iv.lo)
    iv.lo = *s.lower_bound_hint;

  ParamVec trial(theta_from.size());
  auto along = [&](double a) {
    trial = theta_from + a * d;
    return loglik(trial);
  };
  const LineMax m = maximize_on_interval(along, iv, s);
  out.evals += m.evals;
  out.budget_exceeded = m.budget_exceeded;
  if (m.value >= *f_from) {
    out.theta = theta_from + m.alpha * d;
    out.alpha = m.alpha;
    out.loglik = m.value;
  } else {
    out.guard_fired = true;
  }
  return out;
}

} // namespace decme
