#pragma once

// Hybrid systems with planar switching surfaces:
//   xdot = f(x, u)  away from S-,   x+ = Delta(x)  on S- = {c-'x = d-},
// with Delta(S-) contained in S+ = {c+'x = d+}.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hroa/error.hpp"
#include "hroa/ode.hpp"
#include "hroa/polynomial.hpp"

namespace hroa {

struct SwitchingSurface {
  Vec normal;
  double offset = 0.0;

  double residual(const Vec& x) const { return normal.dot(x) - offset; }
  /// Membership tolerance used throughout: 1e-9 (1 + |d|).
  double tolerance() const { return 1e-9 * (1.0 + std::abs(offset)); }
};

struct VanDerPolParams {
  double mu = 1.0;
};

struct RimlessWheelParams {
  double alpha = std::numbers::pi / 8.0;  // half the inter-spoke angle (rad)
  double gamma = 0.08;                     // slope (rad)
};

struct CompassGaitParams {
  double m = 5.0;    // leg mass (kg)
  double mh = 10.0;  // hip mass (kg)
  double a = 0.5;    // foot to leg mass (m)
  double b = 0.5;    // leg mass to hip (m)
  double g = 9.8;
  double gamma = 3.0 * std::numbers::pi / 180.0;
  double l() const { return a + b; }
};

struct SystemParams {
  VanDerPolParams van_der_pol;
  RimlessWheelParams rimless_wheel;
  CompassGaitParams compass_gait;

  /// Parses "key = value" lines grouped under [van-der-pol], [rimless-wheel]
  /// and [compass-gait] sections. '#' starts a comment.
  static SystemParams parse(const std::string& text) {
    SystemParams p;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw IoError("malformed section header on line " + std::to_string(lineno));
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw IoError("expected 'key = value' on line " + std::to_string(lineno));
      const std::string key = trim(line.substr(0, eq));
      double value = 0.0;
      try {
        value = std::stod(trim(line.substr(eq + 1)));
      } catch (const std::exception&) {
        throw IoError("bad numeric value on line " + std::to_string(lineno));
      }
      p.set(section, key, value);
    }
    p.validate();
    return p;
  }

  static SystemParams load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open parameter file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "[van-der-pol]\nmu = " << van_der_pol.mu << "\n\n";
    os << "[rimless-wheel]\nalpha = " << rimless_wheel.alpha << "\ngamma = " << rimless_wheel.gamma
       << "\n\n";
    const auto& c = compass_gait;
    os << "[compass-gait]\nm = " << c.m << "\nmh = " << c.mh << "\na = " << c.a << "\nb = " << c.b
       << "\ng = " << c.g << "\ngamma = " << c.gamma << "\n";
    return os.str();
  }

  void validate() const {
    const auto& c = compass_gait;
    if (!(c.m > 0 && c.mh > 0 && c.a > 0 && c.b > 0 && c.g > 0))
      throw InvalidArgument("compass-gait masses, lengths and gravity must be positive");
    if (!(rimless_wheel.alpha > 0 && rimless_wheel.alpha < std::numbers::pi / 2))
      throw InvalidArgument("rimless-wheel alpha must lie in (0, pi/2)");
  }

 private:
  void set(const std::string& section, const std::string& key, double v) {
    auto bad = [&] { throw IoError("unknown parameter '" + key + "' in section [" + section + "]"); };
    if (section == "van-der-pol") {
      if (key == "mu") van_der_pol.mu = v;
      else bad();
    } else if (section == "rimless-wheel") {
      if (key == "alpha") rimless_wheel.alpha = v;
      else if (key == "gamma") rimless_wheel.gamma = v;
      else bad();
    } else if (section == "compass-gait") {
      auto& c = compass_gait;
      if (key == "m") c.m = v;
      else if (key == "mh") c.mh = v;
      else if (key == "a") c.a = v;
      else if (key == "b") c.b = v;
      else if (key == "g") c.g = v;
      else if (key == "gamma") c.gamma = v;
      else if (key == "l") {
        // l is derived; accept it only when it agrees with a + b.
        if (v != c.a + c.b) throw InvalidArgument("compass-gait l must equal a + b");
      } else bad();
    } else {
      throw IoError("parameter '" + key + "' outside a known section");
    }
  }
};

using VectorField = std::function<Vec(const Vec& x, const Vec& u)>;
using JetVectorField = std::function<std::vector<Jet>(std::span<const Jet> x, std::span<const Jet> u)>;
using ImpactFunction = std::function<Vec(const Vec& x)>;
using JetImpactFunction = std::function<std::vector<Jet>(std::span<const Jet> x)>;

struct ImpactLaw {
  SwitchingSurface departure;  // S-
  SwitchingSurface arrival;    // S+
  int direction = 1;           // sign of c-'f at a genuine impact
  ImpactFunction map;
  JetImpactFunction map_jet;
};

class HybridSystem {
 public:
  std::string name;
  int state_dim = 0;
  int input_dim = 0;
  VectorField field;
  JetVectorField field_jet;
  std::optional<ImpactLaw> impact;
  SystemParams params;

  bool is_hybrid() const { return impact.has_value(); }

  Vec vector_field(const Vec& x, const Vec& u) const {
    if (x.size() != state_dim || u.size() != input_dim)
      throw DimensionError("vector_field: state/input dimension mismatch for " + name);
    return field(x, u);
  }

  Vec vector_field(const Vec& x) const { return vector_field(x, Vec::Zero(input_dim)); }

  Vec impact_map(const Vec& x) const {
    if (!impact) throw InvalidArgument(name + " has no impact map");
    if (x.size() != state_dim) throw DimensionError("impact_map: state dimension mismatch");
    const auto& s = impact->departure;
    if (std::abs(s.residual(x)) > 1e-6 * (1.0 + std::abs(s.offset)))
      throw InvalidArgument("impact_map: state is not on the departure surface");
    return impact->map(x);
  }
};

namespace detail {

template <class S>
std::vector<S> van_der_pol_field(std::span<const S> x, double mu) {
  return {x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0]};
}

template <class S>
std::vector<S> rimless_field(std::span<const S> x) {
  using std::sin;
  return {x[1], sin(x[0])};
}

/// Manipulator-form matrices of the compass gait, q = (theta_sw, theta_st).
template <class S>
struct CompassGaitTerms {
  S h11, h12, h22;  // H
  S c12, c21;       // C (zero diagonal)
  S g1, g2;         // G
};

template <class S>
CompassGaitTerms<S> compass_terms(const S& th_sw, const S& th_st, const S& dth_sw, const S& dth_st,
                                  const CompassGaitParams& p) {
  using std::cos;
  using std::sin;
  const double l = p.l();
  const S dth = th_st - th_sw;
  const S cd = cos(dth), sd = sin(dth);
  CompassGaitTerms<S> t;
  t.h11 = cd * 0.0 + p.m * p.b * p.b;
  t.h12 = cd * (-p.m * l * p.b);
  t.h22 = cd * 0.0 + ((p.mh + p.m) * l * l + p.m * p.a * p.a);
  t.c12 = sd * dth_st * (p.m * l * p.b);
  t.c21 = sd * dth_sw * (-p.m * l * p.b);
  t.g1 = sin(th_sw) * (p.m * p.b * p.g);
  t.g2 = sin(th_st) * (-(p.mh * l + p.m * p.a + p.m * l) * p.g);
  return t;
}

template <class S>
std::vector<S> compass_field(std::span<const S> x, std::span<const S> u, const CompassGaitParams& p) {
  const auto t = compass_terms(x[0], x[1], x[2], x[3], p);
  // rhs = B u - C qdot - G with B = (1, -1)
  const S r1 = u[0] - t.c12 * x[3] - t.g1;
  const S r2 = -u[0] - t.c21 * x[2] - t.g2;
  const S det = t.h11 * t.h22 - t.h12 * t.h12;
  const S inv_det = 1.0 / det;
  return {x[2], x[3], (t.h22 * r1 - t.h12 * r2) * inv_det, (t.h11 * r2 - t.h12 * r1) * inv_det};
}

/// Heel-strike map: legs relabelled, velocities from Q+ qdot+ = Q- qdot-.
template <class S>
std::vector<S> compass_impact(std::span<const S> x, const CompassGaitParams& p) {
  using std::cos;
  const double m = p.m, mh = p.mh, a = p.a, b = p.b, l = p.l();
  const S alpha = (x[0] - x[1]) * 0.5;
  const S c2a = cos(alpha * 2.0);
  // Q- (upper triangular)
  const S qm11 = c2a * 0.0 - m * a * b;
  const S qm12 = c2a * (mh * l * l + 2.0 * m * a * l) - m * a * b;
  const S qm22 = c2a * 0.0 - m * a * b;
  // Q+
  const S qp11 = c2a * (-m * b * l) + m * b * b;
  const S qp12 = c2a * (-m * l * b) + (m * l * l + m * a * a + mh * l * l);
  const S qp21 = c2a * 0.0 + m * b * b;
  const S qp22 = c2a * (-m * b * l);
  const S r1 = qm11 * x[2] + qm12 * x[3];
  const S r2 = qm22 * x[3];
  const S det = qp11 * qp22 - qp12 * qp21;
  const S inv_det = 1.0 / det;
  return {x[1], x[0], (qp22 * r1 - qp12 * r2) * inv_det, (qp11 * r2 - qp21 * r1) * inv_det};
}

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }
inline Vec to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

/// Compass-gait H(q) for tests and diagnostics.
inline Mat compass_gait_mass_matrix(const CompassGaitParams& p, double th_sw, double th_st) {
  const auto t = detail::compass_terms<double>(th_sw, th_st, 0.0, 0.0, p);
  Mat h(2, 2);
  h << t.h11, t.h12, t.h12, t.h22;
  return h;
}

inline Mat compass_gait_coriolis_matrix(const CompassGaitParams& p, const Vec& x) {
  const auto t = detail::compass_terms<double>(x[0], x[1], x[2], x[3], p);
  Mat c(2, 2);
  c << 0.0, t.c12, t.c21, 0.0;
  return c;
}

/// Builds one of the library's systems: van-der-pol, rimless-wheel, compass-gait.
inline HybridSystem builtin(const std::string& name, const SystemParams& params = {}) {
  params.validate();
  HybridSystem sys;
  sys.name = name;
  sys.params = params;
  if (name == "van-der-pol") {
    const double mu = params.van_der_pol.mu;
    sys.state_dim = 2;
    sys.input_dim = 0;
    sys.field = [mu](const Vec& x, const Vec&) {
      auto v = detail::van_der_pol_field<double>(std::span<const double>(x.data(), 2), mu);
      return detail::to_eigen(v);
    };
    sys.field_jet = [mu](std::span<const Jet> x, std::span<const Jet>) {
      return detail::van_der_pol_field<Jet>(x, mu);
    };
  } else if (name == "rimless-wheel") {
    const auto rw = params.rimless_wheel;
    sys.state_dim = 2;
    sys.input_dim = 0;
    sys.field = [](const Vec& x, const Vec&) {
      Vec d(2);
      d << x[1], std::sin(x[0]);
      return d;
    };
    sys.field_jet = [](std::span<const Jet> x, std::span<const Jet>) {
      return detail::rimless_field<Jet>(x);
    };
    ImpactLaw law;
    law.departure = {Vec::Unit(2, 0), rw.gamma + rw.alpha};
    law.arrival = {Vec::Unit(2, 0), rw.gamma - rw.alpha};
    law.direction = 1;
    const double two_alpha = 2.0 * rw.alpha;
    law.map = [two_alpha](const Vec& x) {
      Vec y(2);
      y << x[0] - two_alpha, std::cos(two_alpha) * x[1];
      return y;
    };
    law.map_jet = [two_alpha](std::span<const Jet> x) {
      return std::vector<Jet>{x[0] - two_alpha, x[1] * std::cos(two_alpha)};
    };
    sys.impact = law;
  } else if (name == "compass-gait") {
    const auto cg = params.compass_gait;
    sys.state_dim = 4;
    sys.input_dim = 1;
    sys.field = [cg](const Vec& x, const Vec& u) {
      auto t = detail::compass_terms<double>(x[0], x[1], x[2], x[3], cg);
      const double det = t.h11 * t.h22 - t.h12 * t.h12;
      if (std::abs(det) < 1e-12 * std::abs(t.h11 * t.h22))
        throw SingularityError("compass-gait mass matrix is numerically singular");
      auto v = detail::compass_field<double>(std::span<const double>(x.data(), 4),
                                             std::span<const double>(u.data(), 1), cg);
      return detail::to_eigen(v);
    };
    sys.field_jet = [cg](std::span<const Jet> x, std::span<const Jet> u) {
      return detail::compass_field<Jet>(x, u, cg);
    };
    ImpactLaw law;
    Vec c(4);
    c << 1.0, 1.0, 0.0, 0.0;
    law.departure = {c, -2.0 * cg.gamma};
    law.arrival = {c, -2.0 * cg.gamma};
    // The swing foot is above the slope while the sum of leg angles exceeds
    // -2 gamma with the swing leg in front, so heel strike has c'f < 0.
    law.direction = -1;
    law.map = [cg](const Vec& x) {
      const double alpha = 0.5 * (x[0] - x[1]);
      const double c2a = std::cos(2.0 * alpha);
      const double det = (cg.m * cg.b * (cg.b - cg.l() * c2a)) * (-cg.m * cg.b * cg.l() * c2a) -
                         (cg.m * cg.l() * (cg.l() - cg.b * c2a) + cg.m * cg.a * cg.a +
                          cg.mh * cg.l() * cg.l()) *
                             (cg.m * cg.b * cg.b);
      if (std::abs(det) < 1e-12)
        throw SingularityError("impact matrix Q+ singular at alpha = " + std::to_string(alpha));
      auto v = detail::compass_impact<double>(std::span<const double>(x.data(), 4), cg);
      return detail::to_eigen(v);
    };
    law.map_jet = [cg](std::span<const Jet> x) { return detail::compass_impact<Jet>(x, cg); };
    sys.impact = law;
  } else {
    throw InvalidArgument("unknown system '" + name + "' (expected van-der-pol, rimless-wheel, compass-gait)");
  }
  return sys;
}

/// Taylor polynomials of f(x, u) about (x0, u0); variables are (dx, du).
inline std::vector<Polynomial> taylor_field(const HybridSystem& sys, const Vec& x0, const Vec& u0,
                                            unsigned order) {
  const int n = sys.state_dim, m = sys.input_dim;
  std::vector<double> center(static_cast<std::size_t>(n + m));
  for (int i = 0; i < n; ++i) center[static_cast<std::size_t>(i)] = x0[i];
  for (int i = 0; i < m; ++i) center[static_cast<std::size_t>(n + i)] = u0[i];
  JetFunction f = [&](std::span<const Jet> v) {
    return sys.field_jet(v.subspan(0, static_cast<std::size_t>(n)),
                         v.subspan(static_cast<std::size_t>(n), static_cast<std::size_t>(m)));
  };
  return taylor(f, center, order);
}

struct FieldJacobian {
  Mat dx;  // n x n
  Mat du;  // n x m
};

/// Exact first derivatives of f via order-1 jets.
inline FieldJacobian field_jacobian(const HybridSystem& sys, const Vec& x, const Vec& u) {
  const int n = sys.state_dim, m = sys.input_dim;
  const auto lin = taylor_field(sys, x, u, 1);
  FieldJacobian j{Mat::Zero(n, n), Mat::Zero(n, m)};
  for (int i = 0; i < n; ++i)
    for (const auto& [mono, c] : lin[static_cast<std::size_t>(i)].terms()) {
      if (mono.degree() != 1) continue;
      const auto& e = mono.exponents();
      const auto k = static_cast<int>(std::find(e.begin(), e.end(), 1u) - e.begin());
      if (k < n) j.dx(i, k) = c;
      else j.du(i, k - n) = c;
    }
  return j;
}

/// Exact Jacobian of the impact map via order-1 jets.
inline Mat impact_jacobian(const HybridSystem& sys, const Vec& x) {
  if (!sys.impact) throw InvalidArgument(sys.name + " has no impact map");
  const int n = sys.state_dim;
  std::vector<double> center(x.data(), x.data() + n);
  JetFunction f = [&](std::span<const Jet> v) { return sys.impact->map_jet(v); };
  const auto lin = taylor(f, center, 1);
  Mat j = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (const auto& [mono, c] : lin[static_cast<std::size_t>(i)].terms()) {
      if (mono.degree() != 1) continue;
      const auto& e = mono.exponents();
      j(i, static_cast<int>(std::find(e.begin(), e.end(), 1u) - e.begin())) = c;
    }
  return j;
}

// ---------------------------------------------------------------------------
// Simulation

using Controller = std::function<Vec(double t, const Vec& x)>;

struct ImpactEvent {
  double time = 0.0;
  Vec pre;   // on S-
  Vec post;  // Delta(pre)
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> states;
  std::vector<int> impact_flags;  // 1 on the pre-impact row
  std::vector<ImpactEvent> impacts;
  double final_time = 0.0;
  Vec final_state;
  bool stopped_early = false;

  void write_csv(std::ostream& os) const {
    os.precision(17);
    const long n = final_state.size();
    os << "t";
    for (long i = 0; i < n; ++i) os << ",x" << (i + 1);
    os << ",impact\n";
    for (std::size_t k = 0; k < times.size(); ++k) {
      os << times[k];
      for (long i = 0; i < n; ++i) os << ',' << states[k][i];
      os << ',' << impact_flags[k] << '\n';
    }
  }
};

struct SimulationOptions {
  OdeOptions ode{};
  bool record = true;
  /// Called after every accepted step and impact; return true to stop.
  std::function<bool(double t, const Vec& x, bool just_impacted)> stop_when;
  /// Optional extra event: crossing of a section in a fixed direction.
  std::optional<SwitchingSurface> section;
  int section_direction = 1;
  int stop_after_section_crossings = 0;  // 0: do not stop on section crossings
  std::vector<ImpactEvent>* section_hits = nullptr;
};

namespace detail {

/// Root of r(t) = c'x(t) - d on [step.t0, step.t1] via Illinois false position.
inline double locate_crossing(const DenseStep& step, const SwitchingSurface& s, double r0, double r1) {
  double ta = step.t0, tb = step.t1, ra = r0, rb = r1;
  int side = 0;
  double tc = tb;
  for (int it = 0; it < 200; ++it) {
    tc = (ta * rb - tb * ra) / (rb - ra);
    if (!(tc > std::min(ta, tb) && tc < std::max(ta, tb))) tc = 0.5 * (ta + tb);
    const double rc = s.residual(step(tc));
    if (std::abs(rc) <= 1e-14 * (1.0 + std::abs(s.offset)) || std::abs(tb - ta) <= 1e-15 * (1.0 + std::abs(tc)))
      return tc;
    if ((rc > 0) == (rb > 0)) {
      tb = tc;
      rb = rc;
      if (side == -1) ra *= 0.5;
      side = -1;
    } else {
      ta = tc;
      ra = rc;
      if (side == 1) rb *= 0.5;
      side = 1;
    }
  }
  return tc;
}

}  // namespace detail

/// Simulates the hybrid system with impact detection. Impacts fire when the
/// S- residual changes sign and c-'f has the nominal impact direction; the
/// recorded pre-impact state is projected onto S-.
inline Trajectory simulate(const HybridSystem& sys, const Vec& x0, const Controller& controller,
                           double horizon, const SimulationOptions& opts = {}) {
  if (!(horizon > 0)) throw InvalidArgument("simulate: horizon must be positive");
  if (x0.size() != sys.state_dim) throw DimensionError("simulate: initial state dimension mismatch");
  const Vec zero_u = Vec::Zero(sys.input_dim);
  auto input = [&](double t, const Vec& x) -> Vec { return controller ? controller(t, x) : zero_u; };
  OdeRhs rhs = [&](double t, const Vec& x, Vec& dx) { dx = sys.field(x, input(t, x)); };

  Trajectory traj;
  auto record = [&](double t, const Vec& x, int flag) {
    if (!opts.record) return;
    traj.times.push_back(t);
    traj.states.push_back(x);
    traj.impact_flags.push_back(flag);
  };

  Dopri5 ode(rhs, opts.ode);
  double t = 0.0;
  Vec x = x0;
  ode.reset(t, x);
  record(t, x, 0);
  int section_count = 0;

  while (t < horizon) {
    const DenseStep step = ode.step(horizon);
    // Candidate events within this step.
    double t_event = std::numeric_limits<double>::infinity();
    int kind = 0;  // 1 impact, 2 section
    auto check = [&](const SwitchingSurface& s, int dir, int k) {
      const double r0 = s.residual(step.x0), r1 = s.residual(step.x1);
      const double tol = 1e-12 * (1.0 + std::abs(s.offset));
      if (std::abs(r0) <= tol) return;  // leaving the surface
      if (!((r0 > 0) != (r1 > 0) || r1 == 0.0)) return;
      // The crossing direction must match the requested one.
      if ((r1 - r0) * dir <= 0) return;
      const double tc = detail::locate_crossing(step, s, r0, r1);
      const Vec xc = step(tc);
      const double flow = s.normal.dot(sys.field(xc, input(tc, xc)));
      if (flow * dir <= 0) return;
      if (tc < t_event) {
        t_event = tc;
        kind = k;
      }
    };
    if (sys.impact) check(sys.impact->departure, sys.impact->direction, 1);
    if (opts.section) check(*opts.section, opts.section_direction, 2);

    if (kind == 0) {
      t = step.t1;
      x = step.x1;
      record(t, x, 0);
      if (opts.stop_when && opts.stop_when(t, x, false)) {
        traj.stopped_early = true;
        break;
      }
      continue;
    }

    t = t_event;
    Vec xe = step(t_event);
    if (kind == 1) {
      const auto& s = sys.impact->departure;
      xe += s.normal * ((s.offset - s.normal.dot(xe)) / s.normal.squaredNorm());
      record(t, xe, 1);
      Vec xp = sys.impact->map(xe);
      traj.impacts.push_back({t, xe, xp});
      x = xp;
      record(t, x, 0);
      ode.reset(t, x);
      if (opts.stop_when && opts.stop_when(t, x, true)) {
        traj.stopped_early = true;
        break;
      }
    } else {
      const auto& s = *opts.section;
      xe += s.normal * ((s.offset - s.normal.dot(xe)) / s.normal.squaredNorm());
      x = xe;
      record(t, x, 0);
      if (opts.section_hits) opts.section_hits->push_back({t, xe, xe});
      ++section_count;
      ode.reset(t, x);
      if (opts.stop_after_section_crossings > 0 && section_count >= opts.stop_after_section_crossings) {
        traj.stopped_early = true;
        break;
      }
      if (opts.stop_when && opts.stop_when(t, x, false)) {
        traj.stopped_early = true;
        break;
      }
    }
  }
  traj.final_time = t;
  traj.final_state = x;
  return traj;
}

}  // namespace hroa
