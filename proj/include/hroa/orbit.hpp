#pragma once

// Periodic orbits of hybrid systems, parameterized by time along the orbit.
// Hybrid orbits start right after the impact (tau = 0) and end on S- at
// tau = T; smooth orbits start on a Poincare section through the fixed point.

#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hroa/hermite.hpp"
#include "hroa/hybrid_system.hpp"

namespace hroa {

struct LimitCycleOptions {
  int samples = 40;              // K verification phases
  int knots = 2000;              // dense interpolation knots over one period
  int max_returns = 500;         // plain iteration of the return map
  double return_tol = 1e-9;      // successive-return agreement
  int max_newton = 30;
  double newton_tol = 1e-12;
  double fd_step = 1e-6;         // finite-difference step for the return-map Jacobian
  double max_return_time = 100.0;
  OdeOptions ode{};
};

class PeriodicOrbit {
 public:
  std::string system_name;
  int state_dim = 0;
  int input_dim = 0;
  double period = 0.0;
  bool hybrid = false;
  /// Impact phases in [0, T); hybrid orbits impact once, at tau = 0 (== T).
  std::vector<double> impact_phases;
  int num_samples = 40;
  double closure_residual = 0.0;
  std::optional<double> energy;  // rimless wheel: theta_dot^2/2 + cos(theta) along the orbit
  HermiteSpline spline;

  /// Phases tau_k = k T / K, k = 0..K-1.
  std::vector<double> sample_phases() const {
    std::vector<double> t(static_cast<std::size_t>(num_samples));
    for (int k = 0; k < num_samples; ++k) t[static_cast<std::size_t>(k)] = period * k / num_samples;
    return t;
  }

  double wrap(double tau) const {
    double r = std::fmod(tau, period);
    if (r < 0) r += period;
    if (r >= period) r = 0.0;
    return r;
  }

  /// x*(tau) with tau taken modulo T; at an impact phase this is the post-impact state.
  Vec state(double tau) const { return spline.value(wrap(tau)); }

  /// Left limit of x* at tau in (0, T]; at T this is the pre-impact state.
  Vec state_left(double tau) const { return spline.value(std::clamp(tau, 0.0, period)); }

  Vec derivative(double tau) const { return spline.derivative(wrap(tau)); }
  Vec derivative_left(double tau) const { return spline.derivative(std::clamp(tau, 0.0, period)); }
  Vec second_derivative(double tau) const { return spline.second_derivative(wrap(tau)); }

  Vec pre_impact_state() const { return spline.values().col(spline.values().cols() - 1); }
  Vec post_impact_state() const { return spline.values().col(0); }

  Vec nominal_input(double) const { return Vec::Zero(input_dim); }

  /// CSV: tau, state components, input components, impact flag (1 on the
  /// pre-impact row). Rows are the dense interpolation knots.
  void write_csv(std::ostream& os) const {
    os.precision(17);
    os << "tau";
    for (int i = 0; i < state_dim; ++i) os << ",x" << (i + 1);
    for (int i = 0; i < input_dim; ++i) os << ",u" << (i + 1);
    os << ",impact\n";
    const auto& kn = spline.knots();
    for (std::size_t k = 0; k < kn.size(); ++k) {
      os << kn[k];
      for (int i = 0; i < state_dim; ++i) os << ',' << spline.values()(i, static_cast<Eigen::Index>(k));
      for (int i = 0; i < input_dim; ++i) os << ',' << 0.0;
      os << ',' << ((hybrid && k + 1 == kn.size()) ? 1 : 0) << '\n';
    }
  }

  /// Reads the CSV written by write_csv; slopes are recomputed from the system.
  static PeriodicOrbit read_csv(std::istream& is, const HybridSystem& sys, int num_samples = 40) {
    std::string line;
    if (!std::getline(is, line)) throw IoError("orbit file is empty");
    const int n = sys.state_dim, m = sys.input_dim;
    std::vector<double> knots;
    std::vector<Vec> states;
    bool impact_flag = false;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string cell;
      std::vector<double> row;
      while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
      if (static_cast<int>(row.size()) != 1 + n + m + 1)
        throw IoError("orbit file row has " + std::to_string(row.size()) + " columns, expected " +
                      std::to_string(n + m + 2));
      knots.push_back(row[0]);
      states.push_back(Eigen::Map<const Vec>(row.data() + 1, n));
      impact_flag = row.back() != 0.0;
    }
    if (knots.size() < 2) throw IoError("orbit file has too few rows");
    PeriodicOrbit o;
    o.system_name = sys.name;
    o.state_dim = n;
    o.input_dim = m;
    o.period = knots.back();
    o.hybrid = impact_flag;
    if (o.hybrid) o.impact_phases = {0.0};
    o.num_samples = num_samples;
    o.set_knots(sys, knots, states);
    return o;
  }

  void set_knots(const HybridSystem& sys, const std::vector<double>& knots, const std::vector<Vec>& states) {
    Mat vals(state_dim, static_cast<Eigen::Index>(knots.size()));
    Mat slopes(state_dim, static_cast<Eigen::Index>(knots.size()));
    for (std::size_t k = 0; k < knots.size(); ++k) {
      vals.col(static_cast<Eigen::Index>(k)) = states[k];
      slopes.col(static_cast<Eigen::Index>(k)) = sys.vector_field(states[k], nominal_input(knots[k]));
    }
    spline = HermiteSpline(knots, std::move(vals), std::move(slopes));
    if (hybrid) {
      closure_residual = (sys.impact->map(pre_impact_state()) - post_impact_state()).norm();
    } else {
      closure_residual = (spline.values().col(spline.values().cols() - 1) - post_impact_state()).norm();
    }
    if (sys.name == "rimless-wheel") {
      const Vec x = post_impact_state();
      energy = 0.5 * x[1] * x[1] + std::cos(x[0]);
    }
  }
};

namespace detail {

/// Orthonormal basis of the hyperplane {v : c'v = 0}.
inline Mat hyperplane_basis(const Vec& c) {
  const long n = c.size();
  Eigen::HouseholderQR<Mat> qr(c / c.norm());
  const Mat q = qr.householderQ() * Mat::Identity(n, n);
  return q.rightCols(n - 1);
}

struct ReturnResult {
  Vec state;
  double time;
};

}  // namespace detail

/// Finds an attracting periodic orbit by iterating the return map from x0 and
/// refining the fixed point with Newton's method.
inline PeriodicOrbit find_limit_cycle(const HybridSystem& sys, const Vec& x0, const LimitCycleOptions& opts = {}) {
  if (x0.size() != sys.state_dim) throw DimensionError("find_limit_cycle: initial state dimension mismatch");
  if (opts.samples < 2 || opts.knots < opts.samples) throw InvalidArgument("find_limit_cycle: bad sample counts");
  const int n = sys.state_dim;

  SwitchingSurface section;
  Vec start = x0;
  if (sys.is_hybrid()) {
    section = sys.impact->arrival;
    // Run to the first impact so iteration starts on S+.
    SimulationOptions so;
    so.ode = opts.ode;
    so.record = false;
    so.stop_when = [](double, const Vec&, bool impacted) { return impacted; };
    auto tr = simulate(sys, x0, nullptr, opts.max_return_time, so);
    if (tr.impacts.empty()) throw ConvergenceError("no impact reached from the initial state", INFINITY);
    start = tr.final_state;
  } else {
    // Let transients decay for a while, then put a section through the current point.
    start = integrate([&](double, const Vec& x, Vec& dx) { dx = sys.field(x, Vec::Zero(sys.input_dim)); }, 0.0,
                      x0, 20.0, opts.ode);
    const Vec f = sys.vector_field(start);
    section = {f / f.norm(), f.dot(start) / f.norm()};
  }

  auto return_map = [&](const Vec& x) -> detail::ReturnResult {
    SimulationOptions so;
    so.ode = opts.ode;
    so.record = false;
    if (sys.is_hybrid()) {
      so.stop_when = [](double, const Vec&, bool impacted) { return impacted; };
    } else {
      so.section = section;
      so.section_direction = 1;
      so.stop_after_section_crossings = 1;
    }
    auto tr = simulate(sys, x, nullptr, opts.max_return_time, so);
    if (!tr.stopped_early) throw ConvergenceError("trajectory did not return to the section", INFINITY);
    return {tr.final_state, tr.final_time};
  };

  // Plain iteration.
  Vec x = start;
  double residual = INFINITY;
  for (int it = 0; it < opts.max_returns; ++it) {
    const Vec next = return_map(x).state;
    residual = (next - x).norm();
    x = next;
    if (residual <= opts.return_tol) break;
  }
  if (!std::isfinite(residual) || residual > 1e-3)
    throw ConvergenceError("return map iteration did not settle", residual);

  // Newton on the section coordinates.
  const Mat e = detail::hyperplane_basis(section.normal);
  const Vec base = x;
  auto to_x = [&](const Vec& y) { return Vec(base + e * y); };
  auto residual_fn = [&](const Vec& y) { return Vec(e.transpose() * (return_map(to_x(y)).state - base) - y); };
  Vec y = Vec::Zero(n - 1);
  Vec r = residual_fn(y);
  for (int it = 0; it < opts.max_newton && r.norm() > opts.newton_tol; ++it) {
    Mat jac(n - 1, n - 1);
    for (int j = 0; j < n - 1; ++j) {
      Vec yp = y, ym = y;
      yp[j] += opts.fd_step;
      ym[j] -= opts.fd_step;
      jac.col(j) = (residual_fn(yp) - residual_fn(ym)) / (2 * opts.fd_step);
    }
    const Vec step = jac.fullPivLu().solve(-r);
    // Backtrack if the step makes things worse.
    double lam = 1.0;
    Vec y_new = y + step, r_new = residual_fn(y_new);
    while (r_new.norm() > r.norm() && lam > 1e-3) {
      lam *= 0.5;
      y_new = y + lam * step;
      r_new = residual_fn(y_new);
    }
    if (r_new.norm() >= r.norm()) break;
    y = y_new;
    r = r_new;
  }
  residual = r.norm();
  if (residual > 1e-8) throw ConvergenceError("return-map Newton refinement failed", residual);
  Vec fixed = to_x(y);
  if (!sys.is_hybrid()) fixed += section.normal * (section.offset - section.normal.dot(fixed));
  const double period = return_map(fixed).time;

  // Dense knots: integrate knot to knot along the continuous flow.
  PeriodicOrbit orbit;
  orbit.system_name = sys.name;
  orbit.state_dim = n;
  orbit.input_dim = sys.input_dim;
  orbit.hybrid = sys.is_hybrid();
  if (orbit.hybrid) orbit.impact_phases = {0.0};
  orbit.num_samples = opts.samples;
  const int m_knots = opts.knots;
  std::vector<double> knots(static_cast<std::size_t>(m_knots + 1));
  std::vector<Vec> states(knots.size());
  const Vec zero_u = Vec::Zero(sys.input_dim);
  Dopri5 ode([&](double, const Vec& xx, Vec& dx) { dx = sys.field(xx, zero_u); }, opts.ode);
  ode.reset(0.0, fixed);
  states[0] = fixed;
  knots[0] = 0.0;
  for (int k = 1; k <= m_knots; ++k) {
    const double tk = k == m_knots ? period : period * k / m_knots;
    while (ode.time() < tk) ode.step(tk);
    knots[static_cast<std::size_t>(k)] = tk;
    states[static_cast<std::size_t>(k)] = ode.state();
  }
  if (orbit.hybrid) {
    const auto& s = sys.impact->departure;
    Vec& xe = states.back();
    const double res = s.residual(xe);
    if (std::abs(res) > 1e-6 * (1 + std::abs(s.offset)))
      throw ConvergenceError("orbit end point misses the impact surface", res);
    xe += s.normal * ((s.offset - s.normal.dot(xe)) / s.normal.squaredNorm());
    const double flow = s.normal.dot(sys.field(xe, zero_u));
    if (std::abs(flow) < 1e-9) throw ConvergenceError("grazing impact on the orbit", flow);
  } else {
    states.back() = states.front();
  }
  orbit.period = period;
  orbit.set_knots(sys, knots, states);
  const double closure = orbit.hybrid ? orbit.closure_residual
                                      : (ode.state() - fixed).norm();
  orbit.closure_residual = closure;
  if (closure > 1e-7) throw ConvergenceError("periodic orbit closure residual too large", closure);
  return orbit;
}

/// Euclidean distance from x to the orbit's point set, with the closest phase.
struct OrbitDistance {
  double distance;
  double phase;
};

inline OrbitDistance distance_to_orbit(const PeriodicOrbit& orbit, const Vec& x) {
  const auto& kn = orbit.spline.knots();
  const Mat& v = orbit.spline.values();
  Eigen::Index best = 0;
  (v.colwise() - x).colwise().squaredNorm().minCoeff(&best);
  const auto nk = static_cast<Eigen::Index>(kn.size());
  double a = kn[static_cast<std::size_t>(std::max<Eigen::Index>(best - 1, 0))];
  double b = kn[static_cast<std::size_t>(std::min<Eigen::Index>(best + 1, nk - 1))];
  auto d2 = [&](double t) { return (orbit.state_left(t) - x).squaredNorm(); };
  // Golden-section search on the bracketing knot interval.
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = d2(c), fd = d2(d);
  for (int it = 0; it < 80 && b - a > 1e-14 * (1 + orbit.period); ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = d2(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = d2(d);
    }
  }
  const double t = 0.5 * (a + b);
  const double knot_d2 = (v.col(best) - x).squaredNorm();
  if (knot_d2 < d2(t)) return {std::sqrt(knot_d2), orbit.wrap(kn[static_cast<std::size_t>(best)])};
  return {std::sqrt(d2(t)), orbit.wrap(t)};
}

/// Default starting points that lie in the basin of each built-in cycle.
inline Vec default_initial_state(const HybridSystem& sys) {
  if (sys.name == "van-der-pol") return (Vec(2) << 2.0, 0.0).finished();
  if (sys.name == "rimless-wheel") {
    const auto& p = sys.params.rimless_wheel;
    return (Vec(2) << p.gamma - p.alpha, 0.5).finished();
  }
  if (sys.name == "compass-gait") {
    const double g = sys.params.compass_gait.gamma;
    return (Vec(4) << -g - 0.2, -g + 0.2, 0.5, -1.0).finished();
  }
  throw InvalidArgument("no default initial state for " + sys.name);
}

}  // namespace hroa
