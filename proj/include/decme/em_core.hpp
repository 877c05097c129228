#pragma once

// EM model plug-in surface and the accelerator engine. Every variant is one
// instance of the same iteration: an EM (or ECME) step producing θ_t, then a
// maximisation of the observed log-likelihood over a low-dimensional affine
// set through θ_t built from past iterates.

#include "decme/common.hpp"
#include "decme/line_search.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace decme {

/// What an EM implementation must provide to be accelerated.
struct EmModel {
  Eigen::Index dim = 0;
  /// One full E-step plus M-step (or CM-steps).
  std::function<ParamVec(const ParamVec&)> em_step;
  /// Observed-data log-likelihood L(θ | Y_obs).
  std::function<double(const ParamVec&)> loglik;
  ConstraintSpec constraints;
  /// Optional ML-step maximising L over a fixed subspace; enables ECME variants.
  std::function<ParamVec(const ParamVec&)> ml_step;
  std::string name;

  bool has_ml_step() const noexcept { return static_cast<bool>(ml_step); }
};

/// The ECME map (MQ-steps then the ML-step) presented as a plain EM model.
inline EmModel ecme_model(const EmModel& m) {
  if (!m.has_ml_step()) throw Error("model '" + m.name + "' has no ML-step");
  EmModel out = m;
  out.em_step = [em = m.em_step, ml = m.ml_step](const ParamVec& th) { return ml(em(th)); };
  out.ml_step = nullptr;
  out.name = m.name + "+ecme";
  return out;
}

enum class Variant { em, sor, sorf, decme_v1, decme_v2, decme_v3, ecme, ecme_decme_v1 };

inline std::string_view to_string(Variant v) {
  switch (v) {
  case Variant::em: return "EM";
  case Variant::sor: return "SOR";
  case Variant::sorf: return "SORF";
  case Variant::decme_v1: return "DECME_V1";
  case Variant::decme_v2: return "DECME_V2";
  case Variant::decme_v3: return "DECME_V3";
  case Variant::ecme: return "ECME";
  case Variant::ecme_decme_v1: return "ECME_DECME_V1";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (auto v : {Variant::em, Variant::sor, Variant::sorf, Variant::decme_v1, Variant::decme_v2,
                 Variant::decme_v3, Variant::ecme, Variant::ecme_decme_v1}) {
    if (s == to_string(v)) return v;
  }
  if (s == "V1") return Variant::decme_v1;
  if (s == "V2") return Variant::decme_v2;
  if (s == "V3") return Variant::decme_v3;
  return std::nullopt;
}

struct StopRule {
  enum class Kind { loglik_target, param_l1, max_iter };
  Kind kind = Kind::param_l1;
  double value = 1e-5;
  long max_iter = 0;

  /// Stop once L(θ) >= target.
  static StopRule loglik_target(double target) { return {Kind::loglik_target, target, 0}; }
  /// Stop once ‖θ_t − θ_{t−1}‖₁ < eps.
  static StopRule param_l1(double eps) {
    if (!(eps > 0.0)) throw Error("l1 stopping threshold must be positive");
    return {Kind::param_l1, eps, 0};
  }
  static StopRule iterations(long n) { return {Kind::max_iter, 0.0, n}; }
};

struct AcceleratorConfig {
  Variant variant = Variant::em;
  /// SORF only.
  std::optional<double> fixed_alpha;
  /// DECME_V1 cycle length; defaults to the model dimension.
  std::optional<int> restart_period;
  LineSearchSettings settings;
  StopRule stop = StopRule::param_l1(1e-5);
  long safety_cap = 200000;
};

enum class Termination { loglik_target, param_l1, max_iter, safety_cap };

inline std::string_view to_string(Termination t) {
  switch (t) {
  case Termination::loglik_target: return "loglik_target";
  case Termination::param_l1: return "param_l1";
  case Termination::max_iter: return "max_iter";
  case Termination::safety_cap: return "safety_cap";
  }
  return "?";
}

struct IterationRecord {
  long iter = 0;
  ParamVec theta;
  double loglik = 0.0;
  /// α_t for SOR/SORF/v2/v3; α_t^{(1)}, α_t^{(2)} for DECME_V1.
  std::vector<double> alphas;
  long em_calls = 0;     // cumulative
  long loglik_calls = 0; // cumulative
  int ls_evals = 0;      // line-search evaluations this iteration
  int monitor_evals = 0; // monitoring evaluations this iteration
  double wall_ms = 0.0;  // cumulative
  bool restart = false;
  bool guard_fired = false;
  bool clipped = false;
};

struct RunTrace {
  std::string model_name;
  Variant variant = Variant::em;
  ParamVec start;
  double start_loglik = 0.0;
  std::vector<IterationRecord> records;
  long em_calls = 0;
  long loglik_calls = 0;
  double wall_seconds = 0.0;
  Termination terminated_by = Termination::safety_cap;

  std::size_t iterations() const noexcept { return records.size(); }
  const ParamVec& final_theta() const { return records.empty() ? start : records.back().theta; }
  double final_loglik() const { return records.empty() ? start_loglik : records.back().loglik; }

  /// Largest decrease between consecutive recorded log-likelihoods (0 if monotone).
  double max_loglik_drop() const {
    double prev = start_loglik, worst = 0.0;
    for (const auto& r : records) {
      worst = std::max(worst, prev - r.loglik);
      prev = r.loglik;
    }
    return worst;
  }
};

class InfeasibleStart : public Error {
public:
  InfeasibleStart() : Error("starting point is not strictly feasible") {}
};

class MissingMlStep : public Error {
public:
  MissingMlStep() : Error("variant requires a model ML-step but none was supplied") {}
};

/// A line search failed mid-run. Carries the trace up to the failure.
class LineSearchFailure : public Error {
public:
  LineSearchFailure(const std::string& what, RunTrace partial)
      : Error("line search failed: " + what), trace_(std::make_shared<RunTrace>(std::move(partial))) {}
  const RunTrace& trace() const noexcept { return *trace_; }

private:
  std::shared_ptr<RunTrace> trace_;
};

// ---------------------------------------------------------------------------
// Single steps

struct StepOutcome {
  ParamVec theta;
  double loglik = 0.0;
  std::vector<double> alphas;
  int ls_evals = 0;
  int monitor_evals = 0;
  bool guard_fired = false;
  bool clipped = false;
};

inline StepOutcome step_em(const EmModel& m, const ParamVec& prev) {
  StepOutcome out;
  out.theta = m.em_step(prev);
  out.loglik = m.loglik(out.theta);
  out.monitor_evals = 1;
  return out;
}

namespace detail {

/// Guarded search from `origin` along `dir`; `origin_loglik` is evaluated if unknown.
inline void search_from(const EmModel& m, const ParamVec& origin, const ParamVec& dir,
                        const LineSearchSettings& s, std::optional<double> origin_loglik, StepOutcome& out) {
  if (negligible_direction(dir, origin)) {
    out.theta = origin;
    if (origin_loglik) {
      out.loglik = *origin_loglik;
    } else {
      out.loglik = m.loglik(origin);
      ++out.monitor_evals;
    }
    out.alphas.push_back(0.0);
    return;
  }
  const GuardedStep g = guarded_line_step(m.loglik, origin, dir, m.constraints, s, origin_loglik);
  out.theta = g.theta;
  out.loglik = g.loglik;
  out.alphas.push_back(g.alpha);
  out.ls_evals += g.evals;
  out.guard_fired = out.guard_fired || g.guard_fired;
}

} // namespace detail

/// SOR: θ_t = M(θ̃_{t−1}), then search along d_t = θ_t − θ̃_{t−1} from θ_t.
inline StepOutcome step_sor(const EmModel& m, const ParamVec& prev, const LineSearchSettings& s) {
  StepOutcome out;
  const ParamVec em_point = m.em_step(prev);
  detail::search_from(m, em_point, em_point - prev, s, std::nullopt, out);
  return out;
}

/// SORF: θ_t + α(θ_t − θ̃_{t−1}) with a fixed α, pulled back inside the feasible region if needed.
inline StepOutcome step_sorf(const EmModel& m, const ParamVec& prev, double alpha) {
  StepOutcome out;
  const ParamVec em_point = m.em_step(prev);
  const ParamVec d = em_point - prev;
  double a = alpha;
  if (a != 0.0 && !negligible_direction(d, em_point)) {
    const Interval iv = feasible_interval(m.constraints, em_point, d);
    if (a >= iv.hi) {
      a = 0.999 * iv.hi;
      out.clipped = true;
    } else if (a <= iv.lo) {
      a = 0.999 * iv.lo;
      out.clipped = true;
    }
    if (out.clipped) log(LogLevel::warn, "SORF step clipped to the feasible region");
  }
  out.theta = em_point + a * d;
  out.loglik = m.loglik(out.theta);
  out.monitor_evals = 1;
  out.alphas.push_back(a);
  return out;
}

/// DECME_V1 non-restart iteration: a SOR substep, then a search from the SOR point
/// toward/away from θ̃_{t−2}.
inline StepOutcome step_decme_v1(const EmModel& m, const ParamVec& prev, const ParamVec& prev2,
                                 const LineSearchSettings& s) {
  StepOutcome out = step_sor(m, prev, s);
  const ParamVec sor_point = out.theta;
  detail::search_from(m, sor_point, sor_point - prev2, s, out.loglik, out);
  return out;
}

/// DECME_V2: single search from θ_t along θ_t − θ̃_{t−2}.
inline StepOutcome step_decme_v2(const EmModel& m, const ParamVec& prev, const ParamVec& prev2,
                                 const LineSearchSettings& s) {
  StepOutcome out;
  const ParamVec em_point = m.em_step(prev);
  detail::search_from(m, em_point, em_point - prev2, s, std::nullopt, out);
  return out;
}

/// DECME_V3: single search from θ_t along θ̃_{t−1} − θ̃_{t−2}.
inline StepOutcome step_decme_v3(const EmModel& m, const ParamVec& prev, const ParamVec& prev2,
                                 const LineSearchSettings& s) {
  StepOutcome out;
  const ParamVec em_point = m.em_step(prev);
  detail::search_from(m, em_point, prev - prev2, s, std::nullopt, out);
  return out;
}

/// ECME: the model's MQ-steps followed by its ML-step.
inline StepOutcome step_ecme(const EmModel& m, const ParamVec& prev) {
  if (!m.has_ml_step()) throw MissingMlStep();
  StepOutcome out;
  out.theta = m.ml_step(m.em_step(prev));
  out.loglik = m.loglik(out.theta);
  out.monitor_evals = 1;
  return out;
}

// ---------------------------------------------------------------------------
// Driver

namespace detail {

struct CallCounters {
  long em = 0;
  long loglik = 0;
};

inline EmModel counted(const EmModel& m, const std::shared_ptr<CallCounters>& c) {
  EmModel out = m;
  out.em_step = [f = m.em_step, c](const ParamVec& th) {
    ++c->em;
    return f(th);
  };
  out.loglik = [f = m.loglik, c](const ParamVec& th) {
    ++c->loglik;
    return f(th);
  };
  return out;
}

} // namespace detail

/**
 * Run one accelerator from `start` until the stop rule (or the safety cap) fires.
 *
 * Iteration 1 of every line-search variant is a SOR step. DECME_V1 restarts with
 * a SOR step every `restart_period` iterations; v2 and v3 are never restarted.
 */
inline RunTrace run(const EmModel& model, const ParamVec& start, const AcceleratorConfig& cfg) {
  require_dim("run start", model.dim, start.size());
  if (!model.em_step || !model.loglik) throw Error("model must provide em_step and loglik");
  model.constraints.validate(model.dim);
  if (!is_feasible(model.constraints, start)) throw InfeasibleStart();
  const bool needs_ml = cfg.variant == Variant::ecme || cfg.variant == Variant::ecme_decme_v1;
  if (needs_ml && !model.has_ml_step()) throw MissingMlStep();
  if (cfg.variant == Variant::sorf) {
    if (!cfg.fixed_alpha) throw Error("SORF requires fixed_alpha");
    if (!(*cfg.fixed_alpha > -1.0)) throw Error("SORF fixed_alpha must exceed -1");
  }
  const int period = cfg.restart_period.value_or(static_cast<int>(model.dim));
  if (period < 1) throw Error("restart_period must be at least 1");

  auto counters = std::make_shared<detail::CallCounters>();
  const EmModel base = detail::counted(model, counters);
  const EmModel accel_base = cfg.variant == Variant::ecme_decme_v1 ? ecme_model(base) : base;

  RunTrace trace;
  trace.model_name = model.name;
  trace.variant = cfg.variant;
  trace.start = start;
  trace.start_loglik = base.loglik(start);

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto elapsed_ms = [&] { return std::chrono::duration<double, std::milli>(clock::now() - t0).count(); };

  ParamVec prev = start;
  ParamVec prev2 = start;
  const long cap = cfg.stop.kind == StopRule::Kind::max_iter ? std::min(cfg.safety_cap, cfg.stop.max_iter)
                                                            : cfg.safety_cap;

  for (long t = 1;; ++t) {
    StepOutcome step;
    bool restart = false;
    try {
      switch (cfg.variant) {
      case Variant::em: step = step_em(base, prev); break;
      case Variant::ecme: step = step_ecme(base, prev); break;
      case Variant::sor: step = step_sor(base, prev, cfg.settings); break;
      case Variant::sorf: step = step_sorf(base, prev, *cfg.fixed_alpha); break;
      case Variant::decme_v1:
      case Variant::ecme_decme_v1:
        restart = (t - 1) % period == 0;
        step = restart ? step_sor(accel_base, prev, cfg.settings)
                       : step_decme_v1(accel_base, prev, prev2, cfg.settings);
        break;
      case Variant::decme_v2:
        restart = t == 1;
        step = restart ? step_sor(base, prev, cfg.settings) : step_decme_v2(base, prev, prev2, cfg.settings);
        break;
      case Variant::decme_v3:
        restart = t == 1;
        step = restart ? step_sor(base, prev, cfg.settings) : step_decme_v3(base, prev, prev2, cfg.settings);
        break;
      }
    } catch (const Error& e) {
      trace.em_calls = counters->em;
      trace.loglik_calls = counters->loglik;
      trace.wall_seconds = elapsed_ms() / 1000.0;
      throw LineSearchFailure(e.what(), std::move(trace));
    }

    IterationRecord rec;
    rec.iter = t;
    rec.theta = std::move(step.theta);
    rec.loglik = step.loglik;
    rec.alphas = std::move(step.alphas);
    rec.em_calls = counters->em;
    rec.loglik_calls = counters->loglik;
    rec.ls_evals = step.ls_evals;
    rec.monitor_evals = step.monitor_evals;
    rec.wall_ms = elapsed_ms();
    rec.restart = restart;
    rec.guard_fired = step.guard_fired;
    rec.clipped = step.clipped;

    std::optional<Termination> done;
    switch (cfg.stop.kind) {
    case StopRule::Kind::loglik_target:
      if (rec.loglik >= cfg.stop.value) done = Termination::loglik_target;
      break;
    case StopRule::Kind::param_l1:
      if ((rec.theta - prev).lpNorm<1>() < cfg.stop.value) done = Termination::param_l1;
      break;
    case StopRule::Kind::max_iter: break;
    }
    if (!done && t >= cap)
      done = (cfg.stop.kind == StopRule::Kind::max_iter && t >= cfg.stop.max_iter) ? Termination::max_iter
                                                                                   : Termination::safety_cap;

    prev2 = std::move(prev);
    prev = rec.theta;
    trace.records.push_back(std::move(rec));
    if (done) {
      trace.terminated_by = *done;
      break;
    }
  }
  trace.em_calls = counters->em;
  trace.loglik_calls = counters->loglik;
  trace.wall_seconds = elapsed_ms() / 1000.0;
  return trace;
}

// ---------------------------------------------------------------------------
// CSV: iter, loglik, alpha1, alpha2, em_calls, loglik_calls, wall_ms, theta_0..theta_{p-1}

inline void write_trace_csv(std::ostream& os, const RunTrace& trace) {
  const Eigen::Index p = trace.start.size();
  os << "iter,loglik,alpha1,alpha2,em_calls,loglik_calls,wall_ms";
  for (Eigen::Index i = 0; i < p; ++i) os << ",theta_" << i;
  os << '\n';
  const auto old_prec = os.precision(17);
  for (const auto& r : trace.records) {
    os << r.iter << ',' << r.loglik << ',';
    if (!r.alphas.empty()) os << r.alphas[0];
    os << ',';
    if (r.alphas.size() > 1) os << r.alphas[1];
    os << ',' << r.em_calls << ',' << r.loglik_calls << ',' << r.wall_ms;
    for (Eigen::Index i = 0; i < p; ++i) os << ',' << r.theta[i];
    os << '\n';
  }
  os.precision(old_prec);
}

} // namespace decme
