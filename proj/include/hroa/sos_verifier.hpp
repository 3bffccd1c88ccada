#pragma once

// Region-of-attraction certificates by sampled-phase SoS programs.
//
// At each phase sample, with V0 = x'P x, D = 2x'P g + num x'dP x (so that
// den * d/dt V0 = D) and V = V0 / rho, the decrease condition cleared of
// rho^2 and the denominator reads
//
//   -(rho D - rho' num V0) - lambda (rho - V0) - delta |x|^2   is SoS,
//
// which is linear in (rho, rho') for fixed lambda and linear in lambda for
// fixed rho. The denominator condition is den - eps - mu (rho - V0) SoS with
// mu >= 0, and the impact condition is V0_T - D'P_0 D - lambda_i (rho_e - V0_T)
// SoS with rho_e = rho(0) = rho(T).

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hroa/audit.hpp"
#include "hroa/certificate.hpp"
#include "hroa/error.hpp"
#include "hroa/parallel.hpp"
#include "hroa/polynomial.hpp"
#include "hroa/sdp.hpp"
#include "hroa/sos_program.hpp"

namespace hroa {

struct VerifierOptions {
  unsigned taylor_order = 3;
  int rho_degree = 0;          // Bernstein degree of rho; 0 keeps the bisection level
  int multiplier_degree = 0;   // 0 picks the smallest even degree the constraint degrees allow
  int max_iterations = 10;
  double improvement_tol = 5e-3;
  double backoff = 0.02;       // V-step moves (1 - backoff) of the way to its optimum
  int max_retreats = 6;
  double max_growth = 4.0;     // per V-step bound on each rho coefficient ratio
  double delta_scale = 1e-6;   // delta = delta_scale * trace(Q) * rho
  double epsilon = 0.01;       // den >= epsilon * den(0) on the set
  double bisection_tol = 1e-3;
  double seed_fraction = 0.98;
  double q_trace = 0.0;        // trace of the running weight; 0 means trace(I)
  int jobs = 1;
  bool early_impact_audit = true;
  int early_impact_samples = 200;
  std::uint64_t seed = 1;
  sdp::SdpOptions sdp{};
  std::function<void(const nlohmann::json&)> on_iteration;
};

/// Result of one per-sample program. `sample` is -1 for the impact condition.
struct SampleCheck {
  int sample = 0;
  double tau = 0.0;
  bool feasible = false;
  std::string status;
  double slack = 0.0;              // t in G = G~ + t I (normalised units)
  double residual = INFINITY;      // Gram reconstruction residual after correction
  double min_eigenvalue = -INFINITY;
  Polynomial lambda;               // S-procedure multiplier in x_perp
  double den_lambda = 0.0;         // multiplier of the denominator condition
  double den_bound = INFINITY;     // largest rho keeping den >= eps on the set
};

struct MultiplierSet {
  int degree = 0;
  std::vector<SampleCheck> samples;
  std::optional<SampleCheck> impact;

  std::size_t size() const { return samples.size() + (impact ? 1 : 0); }
  const SampleCheck& at(std::size_t i) const { return i < samples.size() ? samples[i] : *impact; }
};

struct LevelReport {
  bool feasible = false;
  int failing_sample = -2;  // -1 = impact condition
  std::string message;
  MultiplierSet multipliers;
};

namespace detail {

inline int even_at_least(int v) { return v <= 0 ? 0 : v + (v % 2); }

inline int decrease_multiplier_degree(unsigned order, int requested) {
  return requested > 0 ? requested : std::max(2, even_at_least(static_cast<int>(order)));
}
inline int impact_multiplier_degree(unsigned order, int requested) {
  return requested > 0 ? requested : std::max(2, even_at_least(2 * static_cast<int>(order) - 2));
}

inline Polynomial sum_of_squares_of_vars(std::size_t d) {
  Polynomial p(d);
  for (std::size_t i = 0; i < d; ++i) p.add_term(Monomial::variable(d, i) * Monomial::variable(d, i), 1.0);
  return p;
}

/// 2 x'P g + num x'dP x.
inline Polynomial lyapunov_numerator(const SampleDynamics& s, const Mat& p, const Mat& dp) {
  const std::size_t d = s.g.size();
  const auto px = linear_map(p);
  Polynomial r = s.num * Polynomial::quadratic_form(dp);
  for (std::size_t a = 0; a < d; ++a) r += px[a] * s.g[a] * 2.0;
  return r;
}

/// Drops terms of degree below 2. They vanish on the orbit up to rounding;
/// anything larger than `tol` relative is reported as an error.
inline Polynomial drop_low_order(const Polynomial& p, double tol, const char* what) {
  Polynomial r(p.num_vars());
  const double scale = std::max(1e-300, p.max_abs_coefficient());
  for (const auto& [m, c] : p.terms()) {
    if (m.degree() >= 2) {
      r.add_term(m, c);
    } else if (std::abs(c) > tol * scale) {
      throw CertificateError(std::string(what) + ": term of degree " + std::to_string(m.degree()) +
                             " does not vanish on the orbit (" + std::to_string(c) + ")");
    }
  }
  return r;
}

// x = sqrt(rho) L^-T y with P = L L', so x'Px / rho = |y|^2. Programs are
// posed in y; a uniform rescaling is badly conditioned when P is.
inline Mat whitening_matrix(const Mat& p, double rho) {
  const Eigen::LLT<Mat> llt(p);
  if (llt.info() != Eigen::Success) throw CertificateError("P is not positive definite");
  const Mat lt = llt.matrixU();
  return std::sqrt(rho) * lt.triangularView<Eigen::Upper>().solve(Mat::Identity(p.rows(), p.cols()));
}

inline std::vector<Polynomial> whitening(const Mat& p, double rho) { return linear_map(whitening_matrix(p, rho)); }

inline std::vector<Polynomial> unwhitening(const Mat& p, double rho) {
  return linear_map(Mat(Eigen::LLT<Mat>(p).matrixU()) / std::sqrt(rho));
}

/// S-lemma bound: den(x) = den0 - w'x >= eps den0 on {x'Px <= rho} iff
/// rho <= ((1 - eps) den0)^2 / (w'P^-1 w).
inline double denominator_bound(const SampleDynamics& s, const Mat& p, double eps) {
  const double den0 = s.den.constant_term();
  if (!(den0 > 0)) return 0.0;
  const auto d = static_cast<Eigen::Index>(s.g.size());
  Vec w(d);
  for (Eigen::Index j = 0; j < d; ++j)
    w[j] = -s.den.coefficient(Monomial::variable(static_cast<std::size_t>(d), static_cast<std::size_t>(j)));
  const double q = w.dot(p.ldlt().solve(w));
  if (q <= 0) return INFINITY;
  const double m = (1.0 - eps) * den0;
  return m * m / q;
}

inline std::string describe(const SosProgram::Solution& sol) {
  if (sol.structurally_infeasible) return "infeasible (structural)";
  std::string s = sdp::to_string(sol.raw.status);
  if (sol.raw.status == sdp::SdpStatus::optimal && !sol.certified) s += " but not certified";
  return s;
}

/// Decrease and denominator conditions at one sample with fixed rho.
inline SampleCheck check_sample(const SampleDynamics& s, const Mat& p, const Mat& dp, double rho, double drho,
                                double delta, double eps, int mdeg, const sdp::SdpOptions& sopts) {
  SampleCheck out;
  out.sample = s.index;
  out.tau = s.tau;
  const std::size_t d = s.g.size();
  out.den_bound = denominator_bound(s, p, eps);
  const auto to_x = whitening(p, rho);
  const Polynomial v0 = Polynomial::quadratic_form(p);
  const Polynomial dv = lyapunov_numerator(s, p, dp);
  Polynomial target = -rho * dv + drho * (s.num * v0) - delta * sum_of_squares_of_vars(d);
  target = target.compose(to_x);
  const double tscale = std::max(1e-300, target.max_abs_coefficient());
  target = drop_low_order(target * (1.0 / tscale), 1e-7, "decrease condition");
  const Polynomial w = Polynomial::constant(d, 1.0) - v0.compose(to_x) * (1.0 / rho);

  const int tdeg = std::max(target.degree(), mdeg + 2);
  const auto h = static_cast<unsigned>((tdeg + 1) / 2);
  SosProgram prog(d);
  const int g = prog.add_gram(monomial_basis(d, h, 1));
  const int lam = prog.add_gram(monomial_basis(d, static_cast<unsigned>(mdeg / 2), 1));
  const int t = prog.add_scalar(-1.0);
  SosProgram::Identity dec;
  dec.tag = "decrease@" + std::to_string(s.index);
  dec.target = target;
  dec.grams = {{g, Polynomial::constant(d, 1.0)}, {lam, w}};
  dec.sos_block = g;
  dec.slack = t;
  prog.add_identity(std::move(dec));

  const double den0 = s.den.constant_term();
  const int hd = prog.add_gram(monomial_basis(d, 1, 0));
  const int mu = prog.add_scalar();
  SosProgram::Identity den;
  den.tag = "denominator@" + std::to_string(s.index);
  den.target = s.den.compose(to_x) * (1.0 / den0) - eps;
  den.grams = {{hd, Polynomial::constant(d, 1.0)}};
  den.scalars = {{mu, w}};
  den.sos_block = hd;
  prog.add_identity(std::move(den));

  if (!(den0 > 0)) {
    out.status = "denominator not positive on the orbit";
    return out;
  }
  const auto sol = prog.solve(sopts);
  out.status = describe(sol);
  out.feasible = sol.certified;
  out.residual = sol.max_residual;
  out.min_eigenvalue = sol.min_sos_eigenvalue;
  if (sol.raw.status == sdp::SdpStatus::optimal) {
    out.slack = sol.scalars[static_cast<std::size_t>(t)];
    const Polynomial lam_y = gram_polynomial(prog.basis(lam), sol.grams[static_cast<std::size_t>(lam)]);
    out.lambda = lam_y.compose(unwhitening(p, rho)) * (tscale / rho);
    out.den_lambda = sol.scalars[static_cast<std::size_t>(mu)] * den0 / rho;
  }
  return out;
}

inline SampleCheck check_impact(const ImpactDynamics& imp, const Mat& p_pre, const Mat& p_post, double rho_e, int mdeg,
                                const sdp::SdpOptions& sopts) {
  SampleCheck out;
  out.sample = -1;
  const std::size_t d = imp.map.size();
  const auto to_x = whitening(p_pre, rho_e);
  const Polynomial vt = Polynomial::quadratic_form(p_pre);
  Polynomial vplus(d);
  const auto pm = linear_map(p_post);
  for (std::size_t a = 0; a < d; ++a) vplus += pm[a].compose(imp.map) * imp.map[a];
  Polynomial target = (vt - vplus).compose(to_x);
  const double tscale = std::max(1e-300, target.max_abs_coefficient());
  target = drop_low_order(target * (1.0 / tscale), 1e-7, "impact condition");
  const Polynomial w = Polynomial::constant(d, 1.0) - vt.compose(to_x) * (1.0 / rho_e);

  const int tdeg = std::max(target.degree(), mdeg + 2);
  const auto h = static_cast<unsigned>((tdeg + 1) / 2);
  SosProgram prog(d);
  const int g = prog.add_gram(monomial_basis(d, h, 1));
  const int lam = prog.add_gram(monomial_basis(d, static_cast<unsigned>(mdeg / 2), 1));
  const int t = prog.add_scalar(-1.0);
  SosProgram::Identity id;
  id.tag = "impact";
  id.target = target;
  id.grams = {{g, Polynomial::constant(d, 1.0)}, {lam, w}};
  id.sos_block = g;
  id.slack = t;
  prog.add_identity(std::move(id));
  const auto sol = prog.solve(sopts);
  out.status = describe(sol);
  out.feasible = sol.certified;
  out.residual = sol.max_residual;
  out.min_eigenvalue = sol.min_sos_eigenvalue;
  if (sol.raw.status == sdp::SdpStatus::optimal) {
    out.slack = sol.scalars[static_cast<std::size_t>(t)];
    const Polynomial lam_y = gram_polynomial(prog.basis(lam), sol.grams[static_cast<std::size_t>(lam)]);
    out.lambda = lam_y.compose(unwhitening(p_pre, rho_e)) * (tscale / rho_e);
  }
  return out;
}

inline double trace_q(const Certificate& c) { return c.q_trace > 0 ? c.q_trace : static_cast<double>(c.dim()); }

}  // namespace detail

/// Solves every per-sample program for the certificate's current rho.
/// With `stop_early`, work stops at the first infeasible sample (bisection).
inline LevelReport verify_level(const Certificate& cert, const TransverseDynamics& dyn, int jobs = 1,
                                const sdp::SdpOptions& sopts = {}, bool stop_early = false, double delta = -1.0) {
  if (dyn.dim != cert.dim()) throw DimensionError("verify_level: certificate and dynamics dimensions disagree");
  if (delta < 0) delta = cert.delta0;
  const int mdeg = detail::decrease_multiplier_degree(cert.taylor_order, cert.multiplier_degree);
  const int ideg = detail::impact_multiplier_degree(cert.taylor_order, cert.multiplier_degree);
  LevelReport rep;
  rep.multipliers.degree = mdeg;
  const std::size_t ns = dyn.samples.size();
  const std::size_t total = dyn.num_subproblems();
  std::vector<SampleCheck> results(total);
  std::vector<char> done(total, 0);
  std::atomic<bool> failed{false};
  detail::parallel_for(total, jobs, [&](std::size_t i) {
    if (stop_early && failed.load()) return;
    SampleCheck c;
    try {
      if (i < ns) {
        const auto& s = dyn.samples[i];
        c = detail::check_sample(s, cert.p(s.tau), cert.p.derivative(s.tau), cert.rho(s.tau), cert.rho.derivative(s.tau),
                                 delta, cert.epsilon, mdeg, sopts);
      } else {
        c = detail::check_impact(*dyn.impact, cert.p(dyn.period), cert.p(0.0), cert.rho(0.0), ideg, sopts);
      }
    } catch (const CertificateError& e) {
      c.sample = i < ns ? dyn.samples[i].index : -1;
      c.status = e.what();
    } catch (const Error& e) {
      c.sample = i < ns ? dyn.samples[i].index : -1;
      c.status = std::string("numerical failure: ") + e.what();
    }
    if (!c.feasible) failed = true;
    results[i] = std::move(c);
    done[i] = 1;
  });
  rep.feasible = true;
  for (std::size_t i = 0; i < total; ++i) {
    if (!done[i]) {
      rep.feasible = false;
      continue;
    }
    if (!results[i].feasible && rep.failing_sample == -2) {
      rep.feasible = false;
      rep.failing_sample = results[i].sample;
      rep.message = (results[i].sample < 0 ? std::string("impact condition")
                                           : "sample " + std::to_string(results[i].sample) + " (tau = " +
                                                 std::to_string(results[i].tau) + ")") +
                    ": " + results[i].status;
    }
  }
  if (failed.load()) rep.feasible = false;
  for (std::size_t i = 0; i < ns; ++i) rep.multipliers.samples.push_back(std::move(results[i]));
  if (dyn.impact) rep.multipliers.impact = std::move(results[ns]);
  return rep;
}

/// L-step: multipliers maximising the slack of every per-sample program.
inline MultiplierSet l_step(const Certificate& cert, const TransverseDynamics& dyn, int jobs = 1,
                            const sdp::SdpOptions& sopts = {}) {
  auto rep = verify_level(cert, dyn, jobs, sopts, false);
  if (!rep.feasible) throw CertificateError("L-step infeasible at " + rep.message);
  return std::move(rep.multipliers);
}

struct VStepResult {
  bool ok = false;
  std::vector<double> coefficients;  // c_0..c_N
  double integral = 0.0;
  std::string message;
};

/// V-step: one SDP over the Bernstein coefficients of rho with the
/// multipliers fixed, maximising the integral of rho.
inline VStepResult v_step(const Certificate& cert, const TransverseDynamics& dyn, const MultiplierSet& mult,
                          const sdp::SdpOptions& sopts = {}, double max_growth = INFINITY) {
  VStepResult out;
  if (mult.samples.size() != dyn.samples.size() || (dyn.impact.has_value() != mult.impact.has_value()))
    throw DimensionError("v_step: multipliers do not match the dynamics");
  const std::size_t d = static_cast<std::size_t>(dyn.dim);
  const int n = cert.rho.degree();
  const int nfree = std::max(n, 1);
  const double rho_ref = cert.rho.integral() / cert.rho.period;
  const double rho_min = 1e-2 * cert.rho.min_coefficient();
  const double delta = cert.delta0;
  const int mdeg = detail::decrease_multiplier_degree(cert.taylor_order, cert.multiplier_degree);

  SosProgram prog(d);
  std::vector<int> theta;
  for (int j = 0; j < nfree; ++j) theta.push_back(prog.add_scalar(-((n >= 1 && j == 0) ? 2.0 : 1.0)));
  const Polynomial one = Polynomial::constant(d, 1.0);

  for (std::size_t k = 0; k < dyn.samples.size(); ++k) {
    const auto& s = dyn.samples[k];
    const auto& lam = mult.samples[k].lambda;
    if (lam.num_vars() != d) throw InvalidArgument("v_step: missing multiplier at sample " + std::to_string(s.index));
    const Mat p = cert.p(s.tau), dp = cert.p.derivative(s.tau);
    const auto to_x = detail::whitening(p, cert.rho(s.tau));
    const Polynomial v0 = Polynomial::quadratic_form(p);
    const Polynomial a = (-detail::lyapunov_numerator(s, p, dp) - lam).compose(to_x);
    const Polynomial b = (s.num * v0).compose(to_x);
    const Polynomial c = (lam * v0 - delta * detail::sum_of_squares_of_vars(d)).compose(to_x);
    const double scale = std::max(1e-300, (a * cert.rho(s.tau)).max_abs_coefficient());
    const auto [beta, dbeta] = cert.rho.reduced_basis(s.tau);

    const int h = static_cast<int>((std::max(a.degree(), std::max(b.degree(), mdeg + 2)) + 1) / 2);
    const int g = prog.add_gram(monomial_basis(d, static_cast<unsigned>(h), 1));
    SosProgram::Identity id;
    id.tag = "decrease@" + std::to_string(s.index);
    id.target = detail::drop_low_order((a * rho_min + c) * (1.0 / scale), 1e-7, "V-step decrease");
    id.grams = {{g, one}};
    id.sos_block = g;
    for (int j = 0; j < nfree; ++j) {
      Polynomial wj = (a * beta[static_cast<std::size_t>(j)] + b * dbeta[static_cast<std::size_t>(j)]) * (-rho_ref / scale);
      wj = detail::drop_low_order(wj, 1e-7, "V-step weight");
      if (!wj.is_zero()) id.scalars.push_back({theta[static_cast<std::size_t>(j)], wj});
    }
    prog.add_identity(std::move(id));

    // rho(tau_k) <= denominator bound, with a slack
    const double bound = detail::denominator_bound(s, p, cert.epsilon);
    if (std::isfinite(bound)) {
      const int sl = prog.add_scalar();
      SosProgram::Identity den;
      den.tag = "denominator@" + std::to_string(s.index);
      // row divided by its right side: bounds can exceed the level by 1e7
      const double rhs = (bound - rho_min) / rho_ref;
      const double rs = std::max(1.0, rhs);
      den.target = Polynomial::constant(d, rhs / rs);
      den.scalars.push_back({sl, one});
      for (int j = 0; j < nfree; ++j)
        if (beta[static_cast<std::size_t>(j)] != 0.0)
          den.scalars.push_back({theta[static_cast<std::size_t>(j)], one * (beta[static_cast<std::size_t>(j)] / rs)});
      prog.add_identity(std::move(den));
    }
  }

  if (dyn.impact) {
    const auto& lam = mult.impact->lambda;
    const Mat pt = cert.p(dyn.period), p0 = cert.p(0.0);
    const auto to_x = detail::whitening(pt, cert.rho(0.0));
    const Polynomial vt = Polynomial::quadratic_form(pt);
    Polynomial vplus(d);
    const auto pm = detail::linear_map(p0);
    for (std::size_t a = 0; a < d; ++a) vplus += pm[a].compose(dyn.impact->map) * dyn.impact->map[a];
    const Polynomial base = (vt - vplus + lam * vt - lam * rho_min).compose(to_x);
    const Polynomial lw = lam.compose(to_x);
    const double scale = std::max(1e-300, base.max_abs_coefficient());
    const int ideg = detail::impact_multiplier_degree(cert.taylor_order, cert.multiplier_degree);
    const int h = (std::max(base.degree(), ideg + 2) + 1) / 2;
    const int g = prog.add_gram(monomial_basis(d, static_cast<unsigned>(h), 1));
    SosProgram::Identity id;
    id.tag = "impact";
    id.target = detail::drop_low_order(base * (1.0 / scale), 1e-7, "V-step impact");
    id.grams = {{g, one}};
    id.sos_block = g;
    if (!lw.is_zero()) id.scalars.push_back({theta[0], lw * (rho_ref / scale)});
    prog.add_identity(std::move(id));
  }

  // trust region: the multipliers were fitted at the current rho
  if (std::isfinite(max_growth)) {
    for (int j = 0; j < nfree; ++j) {
      const double cap = (max_growth * cert.rho.coefficients[static_cast<std::size_t>(j)] - rho_min) / rho_ref;
      const double rs = std::max(1.0, cap);
      SosProgram::Identity tr;
      tr.tag = "growth@" + std::to_string(j);
      tr.target = Polynomial::constant(d, cap / rs);
      tr.scalars = {{theta[static_cast<std::size_t>(j)], one * (1.0 / rs)}, {prog.add_scalar(), one}};
      prog.add_identity(std::move(tr));
    }
  }

  // smooth orbits: rho' continuous across the wrap
  if (!dyn.hybrid && n >= 2) {
    SosProgram::Identity c1;
    c1.tag = "closure";
    c1.target = Polynomial(d);
    c1.scalars = {{theta[1], one}, {theta[static_cast<std::size_t>(n - 1)], one}, {theta[0], one * -2.0}};
    if (n == 2) c1.scalars = {{theta[1], one * 2.0}, {theta[0], one * -2.0}};
    prog.add_identity(std::move(c1));
  }

  // The V-step only proposes rho; verify_level re-certifies it, so a stalled
  // solve near the optimum is good enough here.
  sdp::SdpOptions vopts = sopts;
  vopts.accept_tol = std::max(vopts.accept_tol, 1e-5);
  SosProgram::Solution sol;
  try {
    sol = prog.solve(vopts);
  } catch (const Error& e) {
    out.message = e.what();
    return out;
  }
  if (sol.raw.status != sdp::SdpStatus::optimal) {
    out.message = "V-step SDP " + detail::describe(sol) + (sol.raw.message.empty() ? "" : ": " + sol.raw.message);
    return out;
  }
  out.coefficients.resize(static_cast<std::size_t>(n + 1));
  for (int j = 0; j < nfree; ++j)
    out.coefficients[static_cast<std::size_t>(j)] = rho_min + rho_ref * sol.scalars[static_cast<std::size_t>(theta[static_cast<std::size_t>(j)])];
  if (n >= 1) out.coefficients[static_cast<std::size_t>(n)] = out.coefficients[0];
  out.integral = ScalingPolynomial(cert.rho.period, cert.rho.hybrid, out.coefficients).integral();
  out.ok = true;
  return out;
}

struct BisectionResult {
  double rho = 0.0;
  double upper = 0.0;  // smallest level found infeasible (or the denominator bound)
  int evaluations = 0;
  nlohmann::json trace = nlohmann::json::array();
};

/// Largest constant level feasible at every sample, geometric bisection to
/// relative tolerance `tol`. The certificate's rho is ignored; the margin is
/// delta_scale * trace(Q) * level.
inline BisectionResult bisect_level(const Certificate& base, const TransverseDynamics& dyn,
                                    const VerifierOptions& opts = {}) {
  Certificate c = base;
  const double tq = detail::trace_q(base);
  auto feasible = [&](double level, bool early) {
    c.rho = ScalingPolynomial::constant(dyn.period, dyn.hybrid, 0, level);
    return verify_level(c, dyn, opts.jobs, opts.sdp, early, opts.delta_scale * tq * level);
  };
  double guess = INFINITY;
  for (const auto& s : dyn.samples) guess = std::min(guess, detail::denominator_bound(s, base.p(s.tau), base.epsilon));
  const bool bounded = std::isfinite(guess);
  if (!bounded) {
    // no denominator limit (vertical surfaces): start from unit-size states
    guess = 0.0;
    for (const auto& s : dyn.samples) guess = std::max(guess, base.p(s.tau).trace());
  }
  BisectionResult out;
  auto record = [&](double level, bool ok) {
    ++out.evaluations;
    out.trace.push_back({{"level", level}, {"feasible", ok}});
  };
  double hi = guess, lo = 0.0;
  bool ok = feasible(hi, true).feasible;
  record(hi, ok);
  if (ok && bounded) {
    out.rho = out.upper = hi;
    return out;
  }
  if (ok) {
    for (int grow = 0; ok; ++grow) {
      if (grow == 40) throw CertificateError("level search did not find an infeasible level");
      lo = hi;
      hi *= 4.0;
      ok = feasible(hi, true).feasible;
      record(hi, ok);
    }
  } else {
    lo = hi * 1e-8;
    const auto rep = feasible(lo, false);
    record(lo, rep.feasible);
    if (!rep.feasible)
      throw CertificateError("no feasible level even at " + std::to_string(lo) + "; failing " + rep.message);
  }
  while (hi / lo > 1.0 + opts.bisection_tol) {
    const double mid = std::sqrt(lo * hi);
    const bool f = feasible(mid, true).feasible;
    record(mid, f);
    if (f) lo = mid;
    else hi = mid;
  }
  out.rho = lo;
  out.upper = hi;
  return out;
}

struct RefinementAuditReport {
  int phases = 0;
  int feasible = 0;
  std::vector<double> failing;  // midpoint phases whose program failed
  bool passed() const { return feasible == phases; }
  nlohmann::json to_json() const {
    return {{"phases", phases}, {"feasible", feasible}, {"failing", failing}, {"passed", passed()}};
  }
};

/// Re-verifies the certificate at the midpoints of its phase grid (the grid
/// doubled), a sampling check of the conditions between samples.
inline RefinementAuditReport refinement_audit(const Certificate& cert, const TransversalFamily& fam,
                                              const PeriodicOrbit& orbit, const HybridSystem& sys,
                                              const TransverseController* controller, int jobs = 1,
                                              const sdp::SdpOptions& sopts = {}) {
  std::vector<double> mids;
  for (std::size_t k = 0; k + 1 < cert.phases.size(); ++k) mids.push_back(0.5 * (cert.phases[k] + cert.phases[k + 1]));
  auto dyn = polynomial_transverse_dynamics(fam, orbit, sys, cert.taylor_order, controller, mids);
  dyn.impact.reset();
  const auto rep = verify_level(cert, dyn, jobs, sopts, false);
  RefinementAuditReport out;
  for (const auto& c : rep.multipliers.samples) {
    ++out.phases;
    if (c.feasible) ++out.feasible;
    else out.failing.push_back(c.tau);
  }
  return out;
}

/// Steps 1-4 of the procedure: seed from bisection, then alternate L- and
/// V-steps on a Bernstein rho until the integral stops improving.
inline Certificate verify_roa(const TransversalFamily& fam, const PeriodicOrbit& orbit, const HybridSystem& sys,
                              const PeriodicMatrixFunction& p, const TransverseController* controller,
                              const VerifierOptions& opts = {}) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };
  if (opts.rho_degree < 0) throw InvalidArgument("rho degree must be non-negative");
  if (p.dim != sys.state_dim - 1) throw DimensionError("verify_roa: P has the wrong dimension");

  Certificate cert;
  cert.system = sys.name;
  cert.surfaces = to_string(fam.strategy);
  cert.p = p;
  cert.taylor_order = opts.taylor_order;
  cert.multiplier_degree = detail::decrease_multiplier_degree(opts.taylor_order, opts.multiplier_degree);
  cert.epsilon = opts.epsilon;
  cert.q_trace = opts.q_trace > 0 ? opts.q_trace : static_cast<double>(p.dim);
  cert.phases = orbit.sample_phases();
  cert.rho = ScalingPolynomial::constant(orbit.period, orbit.hybrid, 0, 1.0);

  const auto dyn = polynomial_transverse_dynamics(fam, orbit, sys, opts.taylor_order, controller);
  const auto bis = bisect_level(cert, dyn, opts);
  const double seed = opts.seed_fraction * bis.rho;
  cert.sigma0 = 1.0 / seed;
  cert.delta0 = opts.delta_scale * cert.q_trace * seed;
  cert.rho = ScalingPolynomial::constant(orbit.period, orbit.hybrid, opts.rho_degree, seed);
  cert.metrics = nlohmann::json::array();
  auto emit = [&](nlohmann::json m) {
    m["seconds"] = seconds();
    if (opts.on_iteration) opts.on_iteration(m);
    cert.metrics.push_back(std::move(m));
  };
  emit({{"iteration", 0}, {"step", "bisection"}, {"level", bis.rho}, {"evaluations", bis.evaluations},
        {"integral", cert.rho.integral()}});

  auto mult = l_step(cert, dyn, opts.jobs, opts.sdp);
  bool converged = false;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    const double before = cert.rho.integral();
    const auto vs = v_step(cert, dyn, mult, opts.sdp, opts.max_growth);
    if (!vs.ok) {
      emit({{"iteration", it}, {"step", "v"}, {"accepted", false}, {"message", vs.message}, {"integral", before}});
      break;
    }
    std::vector<double> trial(vs.coefficients.size());
    const auto& cur = cert.rho.coefficients;
    for (std::size_t i = 0; i < trial.size(); ++i) trial[i] = cur[i] + (1.0 - opts.backoff) * (vs.coefficients[i] - cur[i]);
    if (ScalingPolynomial(cert.rho.period, cert.rho.hybrid, trial).integral() <= before) {
      emit({{"iteration", it}, {"step", "v"}, {"accepted", false}, {"message", "no improvement"}, {"integral", before}});
      converged = true;
      break;
    }
    Certificate next = cert;
    bool accepted = false;
    int retreats = 0;
    LevelReport rep;
    for (; retreats <= opts.max_retreats; ++retreats) {
      next.rho = ScalingPolynomial(cert.rho.period, cert.rho.hybrid, trial);
      rep = verify_level(next, dyn, opts.jobs, opts.sdp);
      if (rep.feasible) {
        accepted = true;
        break;
      }
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] = 0.5 * (trial[i] + cur[i]);
    }
    if (!accepted) {
      emit({{"iteration", it}, {"step", "l"}, {"accepted", false}, {"message", rep.message}, {"integral", before}});
      break;
    }
    cert = std::move(next);
    mult = std::move(rep.multipliers);
    const double after = cert.rho.integral();
    const double improvement = (after - before) / before;
    emit({{"iteration", it}, {"step", "vl"}, {"accepted", true}, {"integral", after}, {"improvement", improvement},
          {"v_optimum", vs.integral}, {"retreats", retreats}});
    if (improvement < opts.improvement_tol) {
      converged = true;
      break;
    }
  }

  // level nesting: half the certified rho must verify as well
  Certificate half = cert;
  for (auto& c : half.rho.coefficients) c *= 0.5;
  const auto hrep = verify_level(half, dyn, opts.jobs, opts.sdp);
  cert.audit["monotonicity_half_level"] = hrep.feasible;
  cert.audit["converged"] = converged;
  double worst_residual = 0.0;
  for (std::size_t i = 0; i < mult.size(); ++i) worst_residual = std::max(worst_residual, mult.at(i).residual);
  cert.audit["gram_residual"] = worst_residual;
  cert.audit["subproblems"] = dyn.num_subproblems();
  if (opts.early_impact_audit && orbit.hybrid) {
    EarlyImpactOptions eo;
    eo.samples = opts.early_impact_samples;
    eo.seed = opts.seed;
    eo.jobs = opts.jobs;
    cert.audit["early_impact"] = early_impact_audit(cert, fam, orbit, sys, controller, eo).to_json();
  }
  cert.audit["seconds"] = seconds();
  return cert;
}

}  // namespace hroa
