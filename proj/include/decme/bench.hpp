#pragma once

// Benchmark protocol pieces shared by the command-line tool and the tests:
// simulation designs, the l_max pre-run, races of several accelerators from a
// common start, and their CSV/SVG outputs.

#include "decme/common.hpp"
#include "decme/em_core.hpp"
#include "decme/models.hpp"
#include "decme/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace decme {

// ---------------------------------------------------------------------------
// Manifests

/// Ordered key=value record written next to every output.
class Manifest {
public:
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = value;
        return;
      }
    entries_.emplace_back(key, value);
  }

  void set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }

  std::optional<std::string> get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    return std::nullopt;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }

  void write(std::ostream& os) const {
    for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
  }

  /// Blank lines and lines starting with '#' are ignored.
  static Manifest read(std::istream& is) {
    Manifest m;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error("manifest: expected key=value, got '" + line + "'");
      m.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return m;
  }

private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// ---------------------------------------------------------------------------
// Two-component mixture design: π = (0.3, 0.7), unit variances, μ₁ = −μ₂ = sep/2.

inline GmmParams gmm_design_truth(double sep) {
  GmmParams p;
  p.weights = Eigen::Vector2d(0.3, 0.7);
  p.means = Eigen::Vector2d(0.5 * sep, -0.5 * sep);
  p.variances = Eigen::Vector2d(1.0, 1.0);
  return p;
}

/// Common start: equal weights, variances 0.5, means 1.5 times the truth.
inline ParamVec gmm_design_start(double sep) {
  GmmParams p = gmm_design_truth(sep);
  p.weights = Eigen::Vector2d(0.5, 0.5);
  p.means *= 1.5;
  p.variances = Eigen::Vector2d(0.5, 0.5);
  return p.pack();
}

/// Replicate k of a design uses its own stream of the master seed.
inline std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t k) { return Rng(master, k)(); }

inline Dataset gmm_design_sample(std::uint64_t seed, double sep, Eigen::Index n) {
  const GmmParams t = gmm_design_truth(sep);
  return gmm_simulate(seed, n, t.weights, t.means, t.variances);
}

/// Sample mean, sample covariance and ν = 1.
inline ParamVec mvt_moment_start(const Dataset& data) {
  if (data.d() != 2 || data.n() < 2) throw Error("mvt start needs at least two bivariate observations");
  MvtParams p;
  p.mu = data.obs.colwise().mean().transpose();
  const Matrix c = data.obs.rowwise() - p.mu.transpose();
  p.psi = (c.transpose() * c) / static_cast<double>(data.n());
  p.nu = 1.0;
  return p.pack();
}

// ---------------------------------------------------------------------------
// l_max

struct LmaxResult {
  double value = -kInf;
  ParamVec theta;
  long iterations = 0;
  bool converged = false;
};

/// Plain EM with a stringent l1 rule; `converged` is false if the cap was hit.
inline LmaxResult compute_lmax(const EmModel& m, const ParamVec& start, double eps = 1e-10, long cap = 1000000) {
  AcceleratorConfig cfg;
  cfg.variant = Variant::em;
  cfg.stop = StopRule::param_l1(eps);
  cfg.safety_cap = cap;
  const RunTrace t = run(m, start, cfg);
  LmaxResult r;
  r.value = t.final_loglik();
  r.theta = t.final_theta();
  r.iterations = static_cast<long>(t.iterations());
  r.converged = t.terminated_by == Termination::param_l1;
  return r;
}

// ---------------------------------------------------------------------------
// Races

struct RaceEntry {
  Variant variant = Variant::em;
  bool ok = false;
  std::string error;
  /// Trace of the first repeat (or the partial trace on failure).
  RunTrace trace;
  double wall_median = 0.0;
  double wall_min = 0.0;
};

/// EM, SOR and DECME_v1/v2/v3, plus the ECME pair when the model has an ML-step.
inline std::vector<Variant> default_variants(const EmModel& m) {
  std::vector<Variant> v{Variant::em, Variant::sor, Variant::decme_v1, Variant::decme_v2, Variant::decme_v3};
  if (m.has_ml_step()) {
    v.push_back(Variant::ecme);
    v.push_back(Variant::ecme_decme_v1);
  }
  return v;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/**
 * Run each variant from the same start under a shared configuration. A failing
 * variant is recorded and does not stop the others. Each variant runs `repeat`
 * times; iteration counts come from the first run, wall time is the median.
 */
inline std::vector<RaceEntry> race(const EmModel& m, const ParamVec& start, const std::vector<Variant>& variants,
                                   const AcceleratorConfig& base, int repeat = 1) {
  if (repeat < 1) throw Error("repeat must be at least 1");
  std::vector<RaceEntry> out;
  for (Variant v : variants) {
    RaceEntry e;
    e.variant = v;
    AcceleratorConfig cfg = base;
    cfg.variant = v;
    std::vector<double> walls;
    try {
      for (int r = 0; r < repeat; ++r) {
        RunTrace t = run(m, start, cfg);
        walls.push_back(t.wall_seconds);
        if (r == 0) e.trace = std::move(t);
      }
      e.ok = true;
    } catch (const LineSearchFailure& err) {
      e.error = err.what();
      if (walls.empty()) e.trace = err.trace();
    } catch (const Error& err) {
      e.error = err.what();
    }
    if (!walls.empty()) {
      e.wall_median = median(walls);
      e.wall_min = *std::min_element(walls.begin(), walls.end());
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_race_summary_csv(std::ostream& os, const std::vector<RaceEntry>& entries) {
  os << "variant,status,iterations,wall_seconds_median,wall_seconds_min,final_loglik,em_calls,loglik_calls,"
        "terminated_by\n";
  const auto old_prec = os.precision(12);
  for (const auto& e : entries) {
    os << to_string(e.variant) << ',' << (e.ok ? "ok" : "failed") << ',' << e.trace.iterations() << ','
       << e.wall_median << ',' << e.wall_min << ',' << e.trace.final_loglik() << ',' << e.trace.em_calls << ','
       << e.trace.loglik_calls << ',' << (e.ok ? std::string(to_string(e.trace.terminated_by)) : "error") << '\n';
  }
  os.precision(old_prec);
}

// ---------------------------------------------------------------------------
// SVG

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
    case '&': out += "&amp;"; break;
    case '<': out += "&lt;"; break;
    case '>': out += "&gt;"; break;
    case '"': out += "&quot;"; break;
    default: out += c;
    }
  }
  return out;
}

} // namespace detail

/// Increase in log-likelihood over the start, l_t − l_0, for t = 0..T.
inline std::vector<double> loglik_increase(const RunTrace& t) {
  std::vector<double> y{0.0};
  for (const auto& r : t.records) y.push_back(r.loglik - t.start_loglik);
  return y;
}

/// Line chart of loglik_increase against iteration, one polyline per run.
inline void write_convergence_svg(std::ostream& os, const std::vector<RaceEntry>& entries, const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  constexpr double w = 720, h = 440, ml = 80, mr = 150, mt = 40, mb = 50;
  const double pw = w - ml - mr, ph = h - mt - mb;

  std::size_t max_t = 1;
  double ymin = 0.0, ymax = 0.0;
  std::vector<std::vector<double>> series;
  for (const auto& e : entries) {
    series.push_back(loglik_increase(e.trace));
    max_t = std::max(max_t, series.back().size() - 1);
    for (double y : series.back())
      if (std::isfinite(y)) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
  }
  if (ymax <= ymin) ymax = ymin + 1.0;
  auto sx = [&](double t) { return ml + pw * t / static_cast<double>(max_t); };
  auto sy = [&](double y) { return mt + ph * (1.0 - (y - ymin) / (ymax - ymin)); };

  const auto old_prec = os.precision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
     << ' ' << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << detail::xml_escape(title)
     << "</text>\n"
     << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double t = static_cast<double>(max_t) * k / 4.0, y = ymin + (ymax - ymin) * k / 4.0;
    os << "<text x=\"" << sx(t) << "\" y=\"" << h - mb + 18 << "\" font-family=\"sans-serif\" font-size=\"11\" "
       << "text-anchor=\"middle\">" << std::lround(t) << "</text>\n"
       << "<text x=\"" << ml - 6 << "\" y=\"" << sy(y) + 4 << "\" font-family=\"sans-serif\" font-size=\"11\" "
       << "text-anchor=\"end\">" << y << "</text>\n";
  }
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 10
     << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">iteration</text>\n"
     << "<text x=\"16\" y=\"" << mt + ph / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" "
     << "text-anchor=\"middle\" transform=\"rotate(-90 16 " << mt + ph / 2 << ")\">increase in log-likelihood</text>\n";

  for (std::size_t i = 0; i < entries.size(); ++i) {
    const char* c = colors[i % (sizeof(colors) / sizeof(colors[0]))];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t t = 0; t < series[i].size(); ++t)
      if (std::isfinite(series[i][t])) os << (t ? " " : "") << sx(static_cast<double>(t)) << ',' << sy(series[i][t]);
    os << "\"/>\n";
    const double ly = mt + 16.0 * static_cast<double>(i + 1);
    os << "<line x1=\"" << w - mr + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << w - mr + 32 << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n"
       << "<text x=\"" << w - mr + 38 << "\" y=\"" << ly << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << to_string(entries[i].variant) << "</text>\n";
  }
  os << "</svg>\n";
  os.precision(old_prec);
}

} // namespace decme
