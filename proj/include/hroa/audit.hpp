#pragma once

// Sampling audits of a certificate against the true hybrid dynamics, plus
// geometry of the certified tube and its boundary export.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hroa/certificate.hpp"
#include "hroa/hybrid_system.hpp"
#include "hroa/orbit.hpp"
#include "hroa/parallel.hpp"
#include "hroa/periodic_lqr.hpp"
#include "hroa/transverse.hpp"

namespace hroa {

/// Full-state closed loop used by every simulation audit (empty = passive).
inline Controller closed_loop(const TransversalFamily& fam, const PeriodicOrbit& orbit, const HybridSystem& sys,
                              const TransverseController* controller) {
  if (!controller || sys.input_dim == 0) return nullptr;
  return StateFeedback(*controller, fam, orbit);
}

inline Vec random_direction(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec y(d);
  do {
    for (int i = 0; i < d; ++i) y[i] = n(rng);
  } while (y.norm() < 1e-12);
  return y / y.norm();
}

struct SetSample {
  double tau;
  Vec x_perp;
};

/// Uniform phase and uniform point of the certified ellipsoid at that phase.
inline SetSample sample_in_set(const Certificate& cert, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double tau = cert.period() * u(rng);
  const int d = cert.dim();
  const Vec y = random_direction(d, rng) * std::pow(u(rng), 1.0 / d);
  return {tau, cert.from_unit(y, tau)};
}

/// d/dt V from transverse rates.
inline double vdot(const Certificate& cert, const Vec& x, double tau, const Vec& xdot, double taudot) {
  const Mat p = cert.p(tau), dp = cert.p.derivative(tau);
  const double rho = cert.rho(tau), drho = cert.rho.derivative(tau);
  const double v0 = x.dot(p * x);
  return (2.0 * x.dot(p * xdot) + x.dot(dp * x) * taudot) / rho - v0 * drho * taudot / (rho * rho);
}

// ---------------------------------------------------------------------------
// Boundary audit: true versus Taylor d/dt V on {V = 1}

struct BoundaryAuditOptions {
  int samples_per_phase = 10000;
  std::uint64_t seed = 1;
  int jobs = 1;
  std::ostream* csv = nullptr;
};

struct BoundaryAuditReport {
  long samples = 0;
  long violations = 0;     // true d/dt V >= 0 (or a singular coordinate change)
  long singular = 0;
  double max_vdot = -INFINITY;       // largest true d/dt V
  double max_taylor_error = 0.0;
  double fraction_negative = 0.0;

  nlohmann::json to_json() const {
    return {{"samples", samples},         {"violations", violations},
            {"singular", singular},       {"max_vdot", max_vdot},
            {"max_violation", std::max(0.0, max_vdot)},
            {"max_taylor_error", max_taylor_error}, {"fraction_negative", fraction_negative}};
  }
};

inline BoundaryAuditReport boundary_audit(const Certificate& cert, const TransversalFamily& fam,
                                          const PeriodicOrbit& orbit, const HybridSystem& sys,
                                          const TransverseController* controller,
                                          const BoundaryAuditOptions& opts = {}) {
  if (opts.samples_per_phase < 1) throw InvalidArgument("boundary audit needs at least one sample per phase");
  const auto dyn = polynomial_transverse_dynamics(fam, orbit, sys, cert.taylor_order, controller, cert.phases);
  const int d = cert.dim();
  struct Row {
    Vec x;
    double vt = NAN, va = NAN;
    bool singular = false;
  };
  std::vector<std::vector<Row>> rows(dyn.samples.size());
  detail::parallel_for(dyn.samples.size(), opts.jobs, [&](std::size_t k) {
    const auto& s = dyn.samples[k];
    std::mt19937_64 rng(opts.seed * 1000003ULL + k);
    auto& out = rows[k];
    out.resize(static_cast<std::size_t>(opts.samples_per_phase));
    for (auto& r : out) {
      r.x = cert.from_unit(random_direction(d, rng), s.tau);
      const auto [xd_a, td_a] = s.rates(r.x);
      r.va = vdot(cert, r.x, s.tau, xd_a, td_a);
      Vec u = orbit.nominal_input(s.tau);
      if (s.gain.size() > 0) u -= s.gain * r.x;
      try {
        const auto tr = transverse_flow(fam, orbit, sys, r.x, s.tau, u);
        r.vt = vdot(cert, r.x, s.tau, tr.x_perp_dot, tr.tau_dot);
      } catch (const SingularityError&) {
        r.singular = true;
      }
    }
  });
  BoundaryAuditReport rep;
  if (opts.csv) {
    auto& os = *opts.csv;
    os << "sample,tau";
    for (int i = 0; i < d; ++i) os << ",x" << (i + 1);
    os << ",vdot_true,vdot_taylor,error\n";
    os.precision(10);
  }
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (const auto& r : rows[k]) {
      ++rep.samples;
      if (r.singular) {
        ++rep.singular;
        ++rep.violations;
      } else {
        if (r.vt >= 0) ++rep.violations;
        rep.max_vdot = std::max(rep.max_vdot, r.vt);
        rep.max_taylor_error = std::max(rep.max_taylor_error, std::abs(r.va - r.vt));
      }
      if (opts.csv) {
        auto& os = *opts.csv;
        os << k << ',' << dyn.samples[k].tau;
        for (int i = 0; i < d; ++i) os << ',' << r.x[i];
        if (r.singular) os << ",nan," << r.va << ",nan\n";
        else os << ',' << r.vt << ',' << r.va << ',' << (r.va - r.vt) << '\n';
      }
    }
  rep.fraction_negative = rep.samples ? 1.0 - static_cast<double>(rep.violations) / static_cast<double>(rep.samples) : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Soundness: in-set states converge to the orbit

struct SoundnessOptions {
  int samples = 1000;
  double periods = 50.0;
  double tolerance = 1e-3;
  std::uint64_t seed = 1;
  int jobs = 1;
};

struct SoundnessReport {
  int samples = 0;
  int converged = 0;
  double worst_distance = 0.0;  // final distance of the worst non-converged run
  double max_time = 0.0;        // longest time to reach the tolerance
  nlohmann::json failures = nlohmann::json::array();

  int escapes() const { return samples - converged; }
  nlohmann::json to_json() const {
    return {{"samples", samples}, {"converged", converged}, {"escapes", escapes()},
            {"worst_distance", worst_distance}, {"max_time", max_time}, {"failures", failures}};
  }
};

inline SoundnessReport soundness_check(const Certificate& cert, const TransversalFamily& fam, const PeriodicOrbit& orbit,
                                       const HybridSystem& sys, const TransverseController* controller,
                                       const SoundnessOptions& opts = {}) {
  std::mt19937_64 rng(opts.seed);
  std::vector<SetSample> starts;
  for (int i = 0; i < opts.samples; ++i) starts.push_back(sample_in_set(cert, rng));
  const Controller u = closed_loop(fam, orbit, sys, controller);
  struct Outcome {
    bool ok = false;
    double distance = 0.0, time = 0.0;
    std::string error;
  };
  std::vector<Outcome> res(starts.size());
  detail::parallel_for(starts.size(), opts.jobs, [&](std::size_t i) {
    auto& o = res[i];
    try {
      const Vec x0 = from_transverse(fam, orbit, starts[i].x_perp, starts[i].tau);
      SimulationOptions so;
      so.record = false;
      so.stop_when = [&](double, const Vec& x, bool) { return distance_to_orbit(orbit, x).distance < opts.tolerance; };
      if (distance_to_orbit(orbit, x0).distance < opts.tolerance) {
        o.ok = true;
        return;
      }
      const auto tr = simulate(sys, x0, u, opts.periods * orbit.period, so);
      o.ok = tr.stopped_early;
      o.time = tr.final_time;
      o.distance = distance_to_orbit(orbit, tr.final_state).distance;
    } catch (const Error& e) {
      o.error = e.what();
    }
  });
  SoundnessReport rep;
  rep.samples = static_cast<int>(starts.size());
  for (std::size_t i = 0; i < res.size(); ++i) {
    if (res[i].ok) {
      ++rep.converged;
      rep.max_time = std::max(rep.max_time, res[i].time);
      continue;
    }
    rep.worst_distance = std::max(rep.worst_distance, res[i].distance);
    if (rep.failures.size() < 10) {
      std::vector<double> xp(starts[i].x_perp.data(), starts[i].x_perp.data() + starts[i].x_perp.size());
      rep.failures.push_back({{"tau", starts[i].tau}, {"x_perp", xp}, {"final_distance", res[i].distance},
                              {"error", res[i].error}});
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Early-impact audit: in-set states must reach S- only at tau = T

struct EarlyImpactOptions {
  int samples = 200;
  std::uint64_t seed = 1;
  int jobs = 1;
  double tolerance = 1e-6;  // allowed T - tau at the impact, relative to T
};

struct EarlyImpactReport {
  int samples = 0;
  int impacts = 0;
  int early = 0;       // impact while the tracked phase was short of T
  int untracked = 0;   // left the tube before the impact (phase lost)
  double worst_gap = 0.0;

  bool passed() const { return early == 0; }
  nlohmann::json to_json() const {
    return {{"samples", samples}, {"impacts", impacts}, {"early", early}, {"untracked", untracked},
            {"worst_gap", worst_gap}, {"passed", passed()}};
  }
};

/// Follows each sampled state to its first impact while tracking the phase
/// by continuation; the certificate assumed flow up to tau = T.
inline EarlyImpactReport early_impact_audit(const Certificate& cert, const TransversalFamily& fam,
                                            const PeriodicOrbit& orbit, const HybridSystem& sys,
                                            const TransverseController* controller,
                                            const EarlyImpactOptions& opts = {}) {
  EarlyImpactReport rep;
  if (!orbit.hybrid || !sys.impact) return rep;
  std::mt19937_64 rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<SetSample> starts;
  for (int i = 0; i < opts.samples; ++i) starts.push_back(sample_in_set(cert, rng));
  const Controller u = closed_loop(fam, orbit, sys, controller);
  const double T = orbit.period;
  struct Outcome {
    bool impact = false, tracked = true;
    double gap = 0.0;
  };
  std::vector<Outcome> res(starts.size());
  detail::parallel_for(starts.size(), opts.jobs, [&](std::size_t i) {
    auto& o = res[i];
    try {
      const Vec x0 = from_transverse(fam, orbit, starts[i].x_perp, starts[i].tau);
      SimulationOptions so;
      so.stop_when = [](double, const Vec&, bool impacted) { return impacted; };
      const auto tr = simulate(sys, x0, u, 2.0 * T, so);
      if (tr.impacts.empty()) return;
      o.impact = true;
      double tau = starts[i].tau;
      for (std::size_t j = 0; j < tr.states.size(); ++j) {
        if (tr.impact_flags[j] == 1) {
          tau = to_transverse(fam, orbit, tr.states[j], tau).tau;
          break;
        }
        tau = to_transverse(fam, orbit, tr.states[j], tau).tau;
      }
      o.gap = T - tau;
    } catch (const Error&) {
      o.tracked = false;
    }
  });
  rep.samples = static_cast<int>(starts.size());
  for (const auto& o : res) {
    if (!o.tracked) {
      ++rep.untracked;
      continue;
    }
    if (!o.impact) continue;
    ++rep.impacts;
    rep.worst_gap = std::max(rep.worst_gap, o.gap);
    if (o.gap > opts.tolerance * T) ++rep.early;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Tube geometry

inline std::vector<double> uniform_phases(double period, int grid) {
  std::vector<double> t(static_cast<std::size_t>(grid + 1));
  for (int i = 0; i <= grid; ++i) t[static_cast<std::size_t>(i)] = period * i / grid;
  return t;
}

/// Volume of the certified tube in state space. The coordinate change has
/// Jacobian determinant den(x_perp), affine in x_perp, so each ellipsoid
/// contributes vol(ellipsoid) * den(0).
inline double certified_volume(const Certificate& cert, const TransversalFamily& fam, const PeriodicOrbit& orbit,
                               int grid = 2000) {
  const int d = cert.dim();
  const double unit_ball = std::pow(std::numbers::pi, d / 2.0) / std::tgamma(d / 2.0 + 1.0);
  const auto ts = uniform_phases(orbit.period, grid);
  std::vector<double> f(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto fr = fam.frame(orbit, ts[i]);
    const double den0 = fr.z.dot(fr.dxs);
    f[i] = unit_ball * std::sqrt(std::pow(cert.rho(ts[i]), d) / cert.p(ts[i]).determinant()) * den0;
  }
  double v = 0.0;
  for (std::size_t i = 1; i < ts.size(); ++i) v += 0.5 * (f[i] + f[i - 1]) * (ts[i] - ts[i - 1]);
  return v;
}

/// Smallest and largest semi-axis of the certified ellipsoid over a phase grid.
inline std::pair<double, double> half_width_range(const Certificate& cert, int grid = 2000) {
  double lo = INFINITY, hi = 0.0;
  for (double t : uniform_phases(cert.period(), grid)) {
    const Vec a = cert.semi_axes(t);
    lo = std::min(lo, a.minCoeff());
    hi = std::max(hi, a.maxCoeff());
  }
  return {lo, hi};
}

/// Boundary points of the certified set at phase tau mapped to state space.
inline std::vector<Vec> boundary_points(const Certificate& cert, const TransversalFamily& fam,
                                        const PeriodicOrbit& orbit, double tau, int count) {
  const int d = cert.dim();
  std::vector<Vec> dirs;
  if (d == 1) {
    dirs = {Vec::Constant(1, 1.0), Vec::Constant(1, -1.0)};
  } else if (d == 2) {
    for (int i = 0; i < count; ++i) {
      const double a = 2.0 * std::numbers::pi * i / count;
      dirs.push_back((Vec(2) << std::cos(a), std::sin(a)).finished());
    }
  } else {
    // Fibonacci points on the sphere, padded with zeros beyond three dimensions
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < count; ++i) {
      const double zc = 1.0 - 2.0 * (i + 0.5) / count, r = std::sqrt(1.0 - zc * zc);
      Vec y = Vec::Zero(d);
      y[0] = r * std::cos(golden * i);
      y[1] = r * std::sin(golden * i);
      y[2] = zc;
      dirs.push_back(y);
    }
  }
  std::vector<Vec> out;
  for (const auto& y : dirs) out.push_back(from_transverse(fam, orbit, cert.from_unit(y, tau), tau));
  return out;
}

/// Minimum distance from `point` to the boundary of the certified tube.
inline double boundary_distance(const Certificate& cert, const TransversalFamily& fam, const PeriodicOrbit& orbit,
                                const Vec& point, int grid = 2000, int count = 64) {
  double best = INFINITY;
  for (double t : uniform_phases(orbit.period, grid))
    for (const auto& x : boundary_points(cert, fam, orbit, t, count)) best = std::min(best, (x - point).norm());
  return best;
}

/// Region boundary as CSV: one row per boundary point, full state.
inline void write_region_csv(std::ostream& os, const Certificate& cert, const TransversalFamily& fam,
                             const PeriodicOrbit& orbit, int grid = 200, int count = 64) {
  const int n = fam.state_dim;
  os.precision(12);
  os << "phase_index,tau,point";
  for (int i = 0; i < n; ++i) os << ",x" << (i + 1);
  os << '\n';
  const auto ts = uniform_phases(orbit.period, grid);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const auto pts = boundary_points(cert, fam, orbit, ts[k], count);
    for (std::size_t j = 0; j < pts.size(); ++j) {
      os << k << ',' << ts[k] << ',' << j;
      for (int i = 0; i < n; ++i) os << ',' << pts[j][i];
      os << '\n';
    }
  }
}

}  // namespace hroa
