#pragma once

// Polynomial transverse dynamics at the verification phases and the
// certificate data V(x_perp, tau) = x_perp' P(tau) x_perp / rho(tau).

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hroa/error.hpp"
#include "hroa/hybrid_system.hpp"
#include "hroa/orbit.hpp"
#include "hroa/periodic_lqr.hpp"
#include "hroa/polynomial.hpp"
#include "hroa/transverse.hpp"

namespace hroa {

// ---------------------------------------------------------------------------
// Scaling rho(tau) in the Bernstein basis on [0, T]

inline double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

/// B_{i,n}(s) for i = 0..n.
inline std::vector<double> bernstein(int n, double s) {
  std::vector<double> b(static_cast<std::size_t>(n + 1));
  for (int i = 0; i <= n; ++i) b[static_cast<std::size_t>(i)] = binomial(n, i) * std::pow(s, i) * std::pow(1.0 - s, n - i);
  return b;
}

class ScalingPolynomial {
 public:
  double period = 1.0;
  bool hybrid = false;
  std::vector<double> coefficients;  // c_0..c_N with c_N == c_0

  ScalingPolynomial() = default;
  ScalingPolynomial(double period_, bool hybrid_, std::vector<double> c)
      : period(period_), hybrid(hybrid_), coefficients(std::move(c)) {
    if (coefficients.empty()) throw InvalidArgument("scaling polynomial needs coefficients");
    if (!(period > 0)) throw InvalidArgument("scaling polynomial needs a positive period");
  }

  static ScalingPolynomial constant(double period, bool hybrid, int degree, double value) {
    return ScalingPolynomial(period, hybrid, std::vector<double>(static_cast<std::size_t>(degree + 1), value));
  }

  int degree() const { return static_cast<int>(coefficients.size()) - 1; }

  double param(double tau) const {
    if (hybrid) return std::clamp(tau / period, 0.0, 1.0);
    double s = std::fmod(tau / period, 1.0);
    if (s < 0) s += 1.0;
    return s;
  }

  double operator()(double tau) const {
    const int n = degree();
    if (n == 0) return coefficients[0];
    const auto b = bernstein(n, param(tau));
    double v = 0.0;
    for (int i = 0; i <= n; ++i) v += coefficients[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(i)];
    return v;
  }

  double derivative(double tau) const {
    const int n = degree();
    if (n == 0) return 0.0;
    const auto b = bernstein(n - 1, param(tau));
    double v = 0.0;
    for (int i = 0; i < n; ++i)
      v += (coefficients[static_cast<std::size_t>(i + 1)] - coefficients[static_cast<std::size_t>(i)]) * b[static_cast<std::size_t>(i)];
    return v * n / period;
  }

  /// Integral over one period.
  double integral() const {
    double s = 0.0;
    for (double c : coefficients) s += c;
    return period * s / static_cast<double>(coefficients.size());
  }

  double min_coefficient() const { return *std::min_element(coefficients.begin(), coefficients.end()); }

  /// Values and tau-derivatives of the reduced basis in which c_N is tied to
  /// c_0: free coefficient j multiplies beta_j; size max(N, 1).
  std::pair<std::vector<double>, std::vector<double>> reduced_basis(double tau) const {
    const int n = degree();
    if (n == 0) return {{1.0}, {0.0}};
    const double s = param(tau);
    const auto b = bernstein(n, s);
    const auto db = bernstein(n - 1, s);
    std::vector<double> v(static_cast<std::size_t>(n)), dv(static_cast<std::size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(j)] = b[static_cast<std::size_t>(j)];
    v[0] += b[static_cast<std::size_t>(n)];
    // d/ds B_{i,n} = n (B_{i-1,n-1} - B_{i,n-1})
    auto dfull = [&](int i) {
      double r = 0.0;
      if (i >= 1) r += db[static_cast<std::size_t>(i - 1)];
      if (i <= n - 1) r -= db[static_cast<std::size_t>(i)];
      return r * n / period;
    };
    for (int j = 0; j < n; ++j) dv[static_cast<std::size_t>(j)] = dfull(j);
    dv[0] += dfull(n);
    return {v, dv};
  }

  nlohmann::json to_json() const {
    return {{"basis", "bernstein"}, {"degree", degree()}, {"period", period}, {"hybrid", hybrid}, {"coefficients", coefficients}};
  }
  static ScalingPolynomial from_json(const nlohmann::json& j) {
    if (j.value("basis", std::string("bernstein")) != "bernstein") throw IoError("unsupported scaling basis");
    return ScalingPolynomial(j.at("period").get<double>(), j.at("hybrid").get<bool>(),
                             j.at("coefficients").get<std::vector<double>>());
  }
};

// ---------------------------------------------------------------------------
// Polynomial transverse dynamics

/// At phase tau with den(x) = z'x*' - dz'Pi'x and num(x) = z'f:
///   tau_dot = num / den,  x_perp_dot = g / den,
///   g = num (dPi Pi' x - Pi x*') + den Pi f.
struct SampleDynamics {
  int index = 0;
  double tau = 0.0;
  Polynomial num, den;
  std::vector<Polynomial> g;
  Mat gain;               // m x d feedback gain at tau (empty without a controller)
  double dropped = 0.0;   // size of the discarded constant of g (orbit interpolation residual)

  std::pair<Vec, double> rates(const Vec& x) const {
    const double dn = den.evaluate(x);
    Vec xd(static_cast<Eigen::Index>(g.size()));
    for (std::size_t a = 0; a < g.size(); ++a) xd[static_cast<Eigen::Index>(a)] = g[a].evaluate(x) / dn;
    return {xd, num.evaluate(x) / dn};
  }
};

struct ImpactDynamics {
  std::vector<Polynomial> map;  // x_perp+ as a polynomial in the pre-impact x_perp
  double dropped = 0.0;         // discarded constant (orbit closure residual)

  Vec operator()(const Vec& x) const {
    Vec r(static_cast<Eigen::Index>(map.size()));
    for (std::size_t a = 0; a < map.size(); ++a) r[static_cast<Eigen::Index>(a)] = map[a].evaluate(x);
    return r;
  }
};

struct TransverseDynamics {
  int dim = 0;
  unsigned order = 3;
  double period = 0.0;
  bool hybrid = false;
  std::vector<SampleDynamics> samples;
  std::optional<ImpactDynamics> impact;

  std::size_t num_subproblems() const { return samples.size() + (impact ? 1 : 0); }
};

namespace detail {

inline std::vector<Polynomial> linear_map(const Mat& m) {
  const auto d = static_cast<std::size_t>(m.cols());
  std::vector<Polynomial> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Polynomial p(d);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (m(i, j) != 0.0) p.add_term(Monomial::variable(d, static_cast<std::size_t>(j)), m(i, j));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace detail

inline SampleDynamics sample_dynamics(const TransversalFamily& fam, const PeriodicOrbit& orbit, const HybridSystem& sys,
                                      double tau, unsigned order, const TransverseController* controller = nullptr) {
  const auto fr = fam.frame(orbit, tau);
  const int n = sys.state_dim, m = sys.input_dim, d = n - 1;
  const auto dd = static_cast<std::size_t>(d);
  SampleDynamics s;
  s.tau = tau;
  const auto f = taylor_field(sys, fr.xs, orbit.nominal_input(tau), order);

  std::vector<Polynomial> subs = detail::linear_map(fr.pi.transpose());
  if (controller && m > 0) {
    s.gain = controller->gain(tau);
    for (auto& p : detail::linear_map(-s.gain)) subs.push_back(std::move(p));
  } else {
    for (int j = 0; j < m; ++j) subs.emplace_back(dd);
  }
  std::vector<Polynomial> fx;
  for (const auto& fi : f) fx.push_back(fi.compose(subs, static_cast<int>(order)));

  s.num = Polynomial(dd);
  for (int i = 0; i < n; ++i) s.num += fx[static_cast<std::size_t>(i)] * fr.z[i];
  const Vec w = fr.pi * fr.dz;
  s.den = Polynomial::constant(dd, fr.z.dot(fr.dxs));
  for (int j = 0; j < d; ++j) s.den.add_term(Monomial::variable(dd, static_cast<std::size_t>(j)), -w[j]);

  const Mat rot = fr.dpi * fr.pi.transpose();
  const Vec drift = fr.pi * fr.dxs;
  const auto rot_x = detail::linear_map(rot);
  for (int a = 0; a < d; ++a) {
    Polynomial pf(dd);
    for (int i = 0; i < n; ++i) pf += fx[static_cast<std::size_t>(i)] * fr.pi(a, i);
    Polynomial ga = s.num * (rot_x[static_cast<std::size_t>(a)] - drift[a]) + s.den * pf;
    const double c0 = ga.constant_term();
    s.dropped = std::max(s.dropped, std::abs(c0));
    ga.add_term(Monomial(dd), -c0);
    s.g.push_back(std::move(ga));
  }
  return s;
}

inline ImpactDynamics impact_dynamics(const TransversalFamily& fam, const PeriodicOrbit& orbit, const HybridSystem& sys,
                                      unsigned order) {
  if (!fam.hybrid || !sys.impact) throw InvalidArgument("impact dynamics need a hybrid orbit");
  const auto pre = fam.frame(orbit, orbit.period);
  const auto post = fam.frame(orbit, 0.0);
  const int n = sys.state_dim;
  const auto dd = static_cast<std::size_t>(n - 1);
  std::vector<double> center(pre.xs.data(), pre.xs.data() + n);
  JetFunction fn = [&](std::span<const Jet> v) { return sys.impact->map_jet(v); };
  const auto delta = taylor(fn, center, order);
  const auto subs = detail::linear_map(pre.pi.transpose());
  std::vector<Polynomial> dx;
  for (int i = 0; i < n; ++i)
    dx.push_back(delta[static_cast<std::size_t>(i)].compose(subs, static_cast<int>(order)) - post.xs[i]);
  ImpactDynamics out;
  for (int a = 0; a < n - 1; ++a) {
    Polynomial p(dd);
    for (int i = 0; i < n; ++i) p += dx[static_cast<std::size_t>(i)] * post.pi(a, i);
    const double c0 = p.constant_term();
    out.dropped = std::max(out.dropped, std::abs(c0));
    p.add_term(Monomial(dd), -c0);
    out.map.push_back(std::move(p));
  }
  return out;
}

/// Taylor-expanded transverse dynamics at the orbit's sample phases (or the
/// given ones), closed with u = u*(tau) - K(tau) x_perp when a controller is
/// supplied, plus the impact map for hybrid orbits.
inline TransverseDynamics polynomial_transverse_dynamics(const TransversalFamily& fam, const PeriodicOrbit& orbit,
                                                         const HybridSystem& sys, unsigned order,
                                                         const TransverseController* controller = nullptr,
                                                         std::vector<double> phases = {}) {
  if (order < 2) throw InvalidArgument("Taylor order of the verified dynamics must be at least 2");
  if (sys.state_dim < 2) throw InvalidArgument("transverse dynamics need state dimension >= 2");
  if (fam.state_dim != sys.state_dim) throw DimensionError("family and system dimensions disagree");
  if (phases.empty()) phases = orbit.sample_phases();
  TransverseDynamics out;
  out.dim = sys.state_dim - 1;
  out.order = order;
  out.period = orbit.period;
  out.hybrid = orbit.hybrid;
  for (std::size_t k = 0; k < phases.size(); ++k) {
    try {
      out.samples.push_back(sample_dynamics(fam, orbit, sys, phases[k], order, controller));
    } catch (const Error& e) {
      throw Error("Taylor expansion failed at phase " + std::to_string(phases[k]) + ": " + e.what());
    }
    out.samples.back().index = static_cast<int>(k);
  }
  if (orbit.hybrid) out.impact = impact_dynamics(fam, orbit, sys, order);
  return out;
}

// ---------------------------------------------------------------------------
// Certificate

struct Certificate {
  std::string system;
  std::string surfaces;
  PeriodicMatrixFunction p;
  ScalingPolynomial rho;
  double sigma0 = 0.0;    // 1 / rho of the constant seed
  double delta0 = 0.0;    // margin of the cleared decrease condition
  double q_trace = 0.0;
  double epsilon = 0.01;  // denominator margin relative to den(0)
  unsigned taylor_order = 3;
  int multiplier_degree = 0;
  std::vector<double> phases;
  nlohmann::json metrics = nlohmann::json::array();
  nlohmann::json audit = nlohmann::json::object();

  int dim() const { return p.dim; }
  double period() const { return rho.period; }

  double value(const Vec& x_perp, double tau) const { return x_perp.dot(p(tau) * x_perp) / rho(tau); }

  /// Semi-axes of the certified ellipsoid in S(tau), ascending.
  Vec semi_axes(double tau) const {
    const Vec ev = Eigen::SelfAdjointEigenSolver<Mat>(p(tau), Eigen::EigenvaluesOnly).eigenvalues();
    Vec a(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) a[ev.size() - 1 - i] = std::sqrt(rho(tau) / ev[i]);
    return a;
  }

  /// Point with V = |y|^2 for y in the unit ball: x = sqrt(rho) L^-T y, P = L L'.
  Vec from_unit(const Vec& y, double tau) const {
    const Eigen::LLT<Mat> llt(p(tau));
    return std::sqrt(rho(tau)) * llt.matrixU().solve(y);
  }

  /// Wall-clock fields ("seconds") are left out unless asked for, so equal
  /// runs serialize to identical bytes.
  nlohmann::json to_json(bool with_timings = false) const {
    auto strip = [&](nlohmann::json v) {
      if (with_timings) return v;
      if (v.is_object()) v.erase("seconds");
      if (v.is_array())
        for (auto& e : v)
          if (e.is_object()) e.erase("seconds");
      return v;
    };
    nlohmann::json j;
    j["schema"] = "hroa.certificate/1";
    j["system"] = system;
    j["surfaces"] = surfaces;
    j["P"] = p.to_json();
    j["rho"] = rho.to_json();
    j["sigma0"] = sigma0;
    j["delta0"] = delta0;
    j["q_trace"] = q_trace;
    j["epsilon"] = epsilon;
    j["taylor_order"] = taylor_order;
    j["multiplier_degree"] = multiplier_degree;
    j["phases"] = phases;
    j["metrics"] = strip(metrics);
    j["audit"] = strip(audit);
    return j;
  }

  static Certificate from_json(const nlohmann::json& j) {
    if (j.value("schema", std::string()) != "hroa.certificate/1") throw IoError("not a certificate file (schema hroa.certificate/1)");
    Certificate c;
    try {
      c.system = j.at("system").get<std::string>();
      c.surfaces = j.value("surfaces", std::string());
      c.p = PeriodicMatrixFunction::from_json(j.at("P"));
      c.rho = ScalingPolynomial::from_json(j.at("rho"));
      c.sigma0 = j.at("sigma0").get<double>();
      c.delta0 = j.at("delta0").get<double>();
      c.q_trace = j.value("q_trace", 0.0);
      c.epsilon = j.value("epsilon", 0.01);
      c.taylor_order = j.at("taylor_order").get<unsigned>();
      c.multiplier_degree = j.value("multiplier_degree", 0);
      c.phases = j.at("phases").get<std::vector<double>>();
      c.metrics = j.value("metrics", nlohmann::json::array());
      c.audit = j.value("audit", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("malformed certificate: ") + e.what());
    }
    return c;
  }
};

}  // namespace hroa
