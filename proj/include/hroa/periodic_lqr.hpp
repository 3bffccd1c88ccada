#pragma once

// Periodic Lyapunov and jump-Riccati solutions for the transverse
// linearization, and the resulting transverse LQR feedback.

#include <atomic>
#include <memory>

#include <Eigen/Eigenvalues>

#include "hroa/transverse.hpp"

namespace hroa {

struct LqrWeights {
  Mat q;   // running state weight
  Mat r;   // input weight
  Mat qi;  // impact (jump) weight

  static LqrWeights defaults(int dim, int inputs) {
    return {Mat::Identity(dim, dim), Mat::Identity(inputs, inputs), 0.1 * Mat::Identity(dim, dim)};
  }
};

struct LqrOptions {
  OdeOptions ode{1e-11, 1e-13};
  int samples = 0;  // output grid intervals; 0 reuses the linearization grid
  int max_sweeps = 2000;
  double sweep_tol = 1e-11;
  double divergence_bound = 1e12;
  double refine_tol = 1e-8;  // bound on |P' - rate(P)| / term scale at interval midpoints
  int max_refine_depth = 12;
};

/// Symmetric matrix function of phase stored on a grid with exact slopes.
/// For hybrid orbits the value at 0 is post-impact and the value at T pre-impact.
class PeriodicMatrixFunction {
 public:
  int dim = 0;
  double period = 0.0;
  bool hybrid = false;
  std::vector<double> phases;
  std::vector<Mat> values, slopes;
  double closure_residual = 0.0;

  Mat operator()(double tau) const {
    const Mat p = TransverseLTV::unflatten(spline_.value(clamp(tau)), dim, dim);
    return 0.5 * (p + p.transpose());
  }
  Mat derivative(double tau) const {
    const Mat p = TransverseLTV::unflatten(spline_.derivative(clamp(tau)), dim, dim);
    return 0.5 * (p + p.transpose());
  }
  double min_eigenvalue() const {
    double m = INFINITY;
    for (const Mat& p : values) m = std::min(m, Eigen::SelfAdjointEigenSolver<Mat>(p).eigenvalues().minCoeff());
    return m;
  }

  void build_spline() {
    const auto np = static_cast<Eigen::Index>(phases.size());
    Mat v(dim * dim, np), s(dim * dim, np);
    for (Eigen::Index k = 0; k < np; ++k) {
      v.col(k) = TransverseLTV::flatten(values[static_cast<std::size_t>(k)]);
      s.col(k) = TransverseLTV::flatten(slopes[static_cast<std::size_t>(k)]);
    }
    spline_ = HermiteSpline(phases, std::move(v), std::move(s));
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = "hroa.pmf/1";
    j["dim"] = dim;
    j["period"] = period;
    j["hybrid"] = hybrid;
    j["phases"] = phases;
    auto rows = [](const std::vector<Mat>& ms) {
      std::vector<std::vector<double>> out;
      for (const Mat& m : ms) {
        const Vec f = TransverseLTV::flatten(m);
        out.emplace_back(f.data(), f.data() + f.size());
      }
      return out;
    };
    j["values"] = rows(values);
    j["slopes"] = rows(slopes);
    j["closure_residual"] = closure_residual;
    return j;
  }

  static PeriodicMatrixFunction from_json(const nlohmann::json& j) {
    if (j.value("schema", "") != "hroa.pmf/1") throw IoError("not a periodic matrix function");
    PeriodicMatrixFunction p;
    p.dim = j.at("dim").get<int>();
    p.period = j.at("period").get<double>();
    p.hybrid = j.at("hybrid").get<bool>();
    p.phases = j.at("phases").get<std::vector<double>>();
    p.closure_residual = j.value("closure_residual", 0.0);
    auto mats = [&](const char* key) {
      std::vector<Mat> out;
      for (const auto& r : j.at(key).get<std::vector<std::vector<double>>>()) {
        if (static_cast<int>(r.size()) != p.dim * p.dim) throw IoError("matrix sample has the wrong size");
        out.push_back(TransverseLTV::unflatten(Eigen::Map<const Vec>(r.data(), p.dim * p.dim), p.dim, p.dim));
      }
      return out;
    };
    p.values = mats("values");
    p.slopes = mats("slopes");
    if (p.values.size() != p.phases.size() || p.slopes.size() != p.phases.size())
      throw IoError("matrix sample count does not match the phase grid");
    p.build_spline();
    return p;
  }

 private:
  double clamp(double tau) const {
    if (hybrid) return std::clamp(tau, 0.0, period);
    const double r = std::fmod(tau, period);
    return r < 0 ? r + period : r;
  }

  HermiteSpline spline_;
};

namespace detail {

inline Vec vec(const Mat& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }
inline Mat unvec(const Vec& v, int d) { return Eigen::Map<const Mat>(v.data(), d, d); }

inline std::vector<double> output_grid(const TransverseLTV& ltv, int samples) {
  if (samples <= 0) return ltv.phases;
  std::vector<double> g;
  for (int k = 0; k <= samples; ++k) g.push_back(k == samples ? ltv.period : ltv.period * k / samples);
  return g;
}

/// Integrates a matrix ODE backward from (T, p_end) to 0 and records values on `grid`.
inline std::vector<Mat> backward_sweep(const OdeRhs& rhs, int d, double period, const Mat& p_end,
                                       const std::vector<double>& grid, const std::vector<double>& breaks,
                                       const OdeOptions& ode) {
  std::vector<Mat> out(grid.size());
  auto k = static_cast<std::ptrdiff_t>(grid.size()) - 1;
  out[static_cast<std::size_t>(k)] = p_end;
  --k;
  const Vec p0 = integrate_piecewise(
      rhs, period, vec(p_end), 0.0, breaks,
      [&](const DenseStep& s) {
        while (k >= 0 && grid[static_cast<std::size_t>(k)] >= s.t1) {
          out[static_cast<std::size_t>(k)] = unvec(s(grid[static_cast<std::size_t>(k)]), d);
          --k;
        }
      },
      ode);
  out.front() = unvec(p0, d);
  for (Mat& m : out) m = 0.5 * (m + m.transpose());
  return out;
}

inline void require_psd(const Mat& m, int d, const char* what, bool strict) {
  if (m.rows() != d || m.cols() != d) throw DimensionError(std::string(what) + " has the wrong size");
  if ((m - m.transpose()).norm() > 1e-12 * (1 + m.norm())) throw InvalidArgument(std::string(what) + " must be symmetric");
  if (d == 0) return;
  const double lo = Eigen::SelfAdjointEigenSolver<Mat>(m).eigenvalues().minCoeff();
  if (strict ? !(lo > 0) : lo < -1e-14) throw InvalidArgument(std::string(what) + (strict ? " must be positive definite" : " must be positive semidefinite"));
}

inline double spectral_radius(const Mat& m) {
  if (m.size() == 0) return 0.0;
  return Eigen::EigenSolver<Mat>(m, false).eigenvalues().cwiseAbs().maxCoeff();
}

/// Bisects grid intervals until the interpolant satisfies the matrix ODE at
/// every interval midpoint. Exact values at inserted phases come from
/// integrating backward from the right end of the interval.
inline void refine_grid(PeriodicMatrixFunction& out, const std::function<Mat(double, const Mat&)>& rate,
                        const std::function<double(double, const Mat&)>& scale, const OdeRhs& rhs,
                        const std::vector<double>& breaks, const LqrOptions& opts) {
  const int d = out.dim;
  auto hermite = [](double ta, const Mat& pa, const Mat& sa, double tb, const Mat& pb, const Mat& sb, double t) {
    const double h = tb - ta, s = (t - ta) / h, s2 = s * s, s3 = s2 * s;
    const Mat v = (2 * s3 - 3 * s2 + 1) * pa + (s3 - 2 * s2 + s) * h * sa + (-2 * s3 + 3 * s2) * pb + (s3 - s2) * h * sb;
    const Mat dv = ((6 * s2 - 6 * s) * pa + (-6 * s2 + 6 * s) * pb) / h + (3 * s2 - 4 * s + 1) * sa + (3 * s2 - 2 * s) * sb;
    return std::make_pair(v, dv);
  };
  std::vector<double> phases{out.phases.front()};
  std::vector<Mat> values{out.values.front()}, slopes{out.slopes.front()};
  std::function<void(double, const Mat&, const Mat&, double, const Mat&, const Mat&, int)> split =
      [&](double ta, const Mat& pa, const Mat& sa, double tb, const Mat& pb, const Mat& sb, int depth) {
        const double tm = 0.5 * (ta + tb);
        const auto [v, dv] = hermite(ta, pa, sa, tb, pb, sb, tm);
        const Mat vs = 0.5 * (v + v.transpose());
        if (depth < opts.max_refine_depth && (dv - rate(tm, vs)).norm() > opts.refine_tol * scale(tm, vs)) {
          Mat pm = unvec(integrate_piecewise(rhs, tb, vec(pb), tm, breaks, nullptr, opts.ode), d);
          pm = 0.5 * (pm + pm.transpose());
          const Mat sm = rate(tm, pm);
          split(ta, pa, sa, tm, pm, sm, depth + 1);
          split(tm, pm, sm, tb, pb, sb, depth + 1);
          return;
        }
        phases.push_back(tb);
        values.push_back(pb);
        slopes.push_back(sb);
      };
  for (std::size_t k = 0; k + 1 < out.phases.size(); ++k)
    split(out.phases[k], out.values[k], out.slopes[k], out.phases[k + 1], out.values[k + 1], out.slopes[k + 1], 0);
  out.phases = std::move(phases);
  out.values = std::move(values);
  out.slopes = std::move(slopes);
}

}  // namespace detail

/// Magnitude of the terms of the Lyapunov/Riccati right-hand side; residuals are
/// measured relative to it because |A| gets large where surfaces turn quickly.
inline double lyapunov_term_scale(const Mat& a, const Mat& p, const Mat& q) {
  return 1.0 + 2.0 * a.norm() * p.norm() + q.norm();
}
inline double riccati_term_scale(const Mat& a, const Mat& b, const Mat& rinv, const Mat& p, const Mat& q) {
  double s = lyapunov_term_scale(a, p, q);
  if (b.cols() > 0) s += (p * b).squaredNorm() * rinv.norm();
  return s;
}

/// State transition of the transverse linearization over one period, including the jump.
inline Mat transverse_monodromy(const TransverseLTV& ltv, const std::function<Mat(double)>& closed_loop_a = nullptr,
                                const OdeOptions& ode = {1e-11, 1e-13}) {
  const int d = ltv.dim;
  OdeRhs rhs = [&](double t, const Vec& x, Vec& dx) {
    const Mat a = closed_loop_a ? closed_loop_a(t) : ltv.A(t);
    dx = detail::vec(a * detail::unvec(x, d));
  };
  Mat phi = detail::unvec(integrate_piecewise(rhs, 0.0, detail::vec(Mat::Identity(d, d)), ltv.period, ltv.phases, nullptr, ode), d);
  if (ltv.a_jump) phi = *ltv.a_jump * phi;
  return phi;
}

/// Periodic solution of  dP/dtau + A'P + PA + Q = 0  with  P(T-) = Ad'P(0+)Ad + Qi  at the impact.
inline PeriodicMatrixFunction periodic_lyapunov(const TransverseLTV& ltv, const Mat& q, const Mat& qi,
                                                const LqrOptions& opts = {}) {
  const int d = ltv.dim;
  detail::require_psd(q, d, "Q", true);
  if (ltv.hybrid) detail::require_psd(qi, d, "Qi", false);

  // Forward pass: Phi(t) and W(t) = int_0^t Phi'Q Phi.
  OdeRhs fwd = [&](double t, const Vec& x, Vec& dx) {
    const Mat phi = Eigen::Map<const Mat>(x.data(), d, d);
    const Mat a = ltv.A(t);
    dx.resize(2 * d * d);
    Eigen::Map<Mat>(dx.data(), d, d) = a * phi;
    Eigen::Map<Mat>(dx.data() + d * d, d, d) = phi.transpose() * q * phi;
  };
  Vec x0 = Vec::Zero(2 * d * d);
  Eigen::Map<Mat>(x0.data(), d, d).setIdentity();
  const Vec x1 = integrate_piecewise(fwd, 0.0, x0, ltv.period, ltv.phases, nullptr, opts.ode);
  const Mat phi = Eigen::Map<const Mat>(x1.data(), d, d);
  const Mat w = Eigen::Map<const Mat>(x1.data() + d * d, d, d);

  const Mat ad = ltv.a_jump ? *ltv.a_jump : Mat::Identity(d, d);
  const Mat jq = ltv.a_jump ? qi : Mat::Zero(d, d);
  const Mat mono = ad * phi;
  const double rho = detail::spectral_radius(mono);
  if (!(rho < 1.0))
    throw InstabilityError("transverse monodromy spectral radius " + std::to_string(rho) + " is not below one");

  // Stein equation P0 = M'P0 M + Phi'Qi Phi + W.
  const Mat c = phi.transpose() * jq * phi + w;
  Mat kron(d * d, d * d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) kron.block(i * d, j * d, d, d) = mono(j, i) * mono.transpose();
  const Vec p0v = (Mat::Identity(d * d, d * d) - kron).fullPivLu().solve(detail::vec(c));
  Mat p0 = detail::unvec(p0v, d);
  p0 = 0.5 * (p0 + p0.transpose());
  const Mat p_end = ad.transpose() * p0 * ad + jq;

  OdeRhs back = [&](double t, const Vec& x, Vec& dx) {
    const Mat p = detail::unvec(x, d);
    const Mat a = ltv.A(t);
    dx = detail::vec(-(a.transpose() * p + p * a + q));
  };
  PeriodicMatrixFunction out;
  out.dim = d;
  out.period = ltv.period;
  out.hybrid = ltv.hybrid;
  out.phases = detail::output_grid(ltv, opts.samples);
  out.values = detail::backward_sweep(back, d, ltv.period, p_end, out.phases, ltv.phases, opts.ode);
  auto rate = [&](double t, const Mat& p) -> Mat {
    const Mat a = ltv.A(t);
    return -(a.transpose() * p + p * a + q);
  };
  for (std::size_t k = 0; k < out.phases.size(); ++k) out.slopes.push_back(rate(out.phases[k], out.values[k]));
  detail::refine_grid(out, rate, [&](double t, const Mat& p) { return lyapunov_term_scale(ltv.A(t), p, q); }, back,
                      ltv.phases, opts);
  out.closure_residual = (out.values.front() - p0).norm();
  out.build_spline();
  return out;
}

/// Periodic positive-definite solution of  -dP/dtau = A'P + PA - PBR^-1B'P + Q
/// with  P(T-) = Ad'P(0+)Ad + Qi, by repeated backward sweeps over the period.
inline PeriodicMatrixFunction jump_riccati(const TransverseLTV& ltv, const Mat& q, const Mat& r, const Mat& qi,
                                           const LqrOptions& opts = {}) {
  const int d = ltv.dim, m = ltv.inputs;
  detail::require_psd(q, d, "Q", false);
  detail::require_psd(r, m, "R", true);
  if (ltv.hybrid) detail::require_psd(qi, d, "Qi", false);
  const Mat rinv = m > 0 ? Mat(r.inverse()) : Mat(0, 0);
  const Mat ad = ltv.a_jump ? *ltv.a_jump : Mat::Identity(d, d);
  const Mat jq = ltv.a_jump ? qi : Mat::Zero(d, d);

  auto riccati_rate = [&](double t, const Mat& p) -> Mat {
    const Mat a = ltv.A(t);
    Mat rate = -(a.transpose() * p + p * a + q);
    if (m > 0) {
      const Mat pb = p * ltv.B(t);
      rate += pb * rinv * pb.transpose();
    }
    return rate;
  };
  OdeRhs back = [&](double t, const Vec& x, Vec& dx) { dx = detail::vec(riccati_rate(t, detail::unvec(x, d))); };

  Mat p_end = Mat::Identity(d, d);
  Mat p0_prev = Mat::Constant(d, d, INFINITY);
  bool converged = false;
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    Mat p0 = detail::unvec(integrate_piecewise(back, ltv.period, detail::vec(p_end), 0.0, ltv.phases, nullptr, opts.ode), d);
    p0 = 0.5 * (p0 + p0.transpose());
    if (!p0.allFinite() || p0.norm() > opts.divergence_bound)
      throw InstabilityError("jump Riccati sweep diverged; the periodic pair is not stabilizable");
    p_end = ad.transpose() * p0 * ad + jq;
    const double change = (p0 - p0_prev).norm();
    p0_prev = p0;
    if (change <= opts.sweep_tol * (1.0 + p0.norm())) {
      converged = true;
      break;
    }
  }
  if (!converged) throw InstabilityError("jump Riccati sweeps did not converge; the periodic pair is not stabilizable");

  PeriodicMatrixFunction out;
  out.dim = d;
  out.period = ltv.period;
  out.hybrid = ltv.hybrid;
  out.phases = detail::output_grid(ltv, opts.samples);
  out.values = detail::backward_sweep(back, d, ltv.period, p_end, out.phases, ltv.phases, opts.ode);
  for (std::size_t k = 0; k < out.phases.size(); ++k) out.slopes.push_back(riccati_rate(out.phases[k], out.values[k]));
  detail::refine_grid(
      out, riccati_rate,
      [&](double t, const Mat& p) { return riccati_term_scale(ltv.A(t), m > 0 ? Mat(ltv.B(t)) : Mat(d, 0), rinv, p, q); },
      back, ltv.phases, opts);
  out.closure_residual = (ad.transpose() * out.values.front() * ad + jq - out.values.back()).norm();
  out.build_spline();
  if (!(out.min_eigenvalue() > 0)) throw InstabilityError("jump Riccati solution is not positive definite");
  return out;
}

/// Transverse LQR law u = -K(tau) x_perp with K = R^-1 B'P.
class TransverseController {
 public:
  LqrWeights weights;
  PeriodicMatrixFunction p;
  double period = 0.0;
  bool hybrid = false;
  int dim = 0, inputs = 0;

  TransverseController() = default;
  TransverseController(const PeriodicMatrixFunction& pmf, const TransverseLTV& ltv, LqrWeights w)
      : weights(std::move(w)), p(pmf), period(ltv.period), hybrid(ltv.hybrid), dim(ltv.dim), inputs(ltv.inputs) {
    if (pmf.dim != ltv.dim) throw DimensionError("feedback: P and the linearization disagree in dimension");
    if (weights.r.rows() != inputs || weights.r.cols() != inputs) throw DimensionError("feedback: R has the wrong size");
    const auto np = static_cast<Eigen::Index>(pmf.phases.size());
    Mat v(std::max(inputs * dim, 1), np), s(std::max(inputs * dim, 1), np);
    v.setZero();
    s.setZero();
    const Mat rinv = inputs > 0 ? Mat(weights.r.inverse()) : Mat(0, 0);
    const double h = 1e-6 * period;
    for (Eigen::Index k = 0; k < np; ++k) {
      const double t = pmf.phases[static_cast<std::size_t>(k)];
      if (inputs == 0) continue;
      const Mat b = ltv.B(t);
      const Mat db = (ltv.B(std::min(t + h, period)) - ltv.B(std::max(t - h, 0.0))) /
                     (std::min(t + h, period) - std::max(t - h, 0.0));
      v.col(k) = TransverseLTV::flatten(rinv * b.transpose() * pmf.values[static_cast<std::size_t>(k)]);
      s.col(k) = TransverseLTV::flatten(
          rinv * (db.transpose() * pmf.values[static_cast<std::size_t>(k)] + b.transpose() * pmf.slopes[static_cast<std::size_t>(k)]));
    }
    gains_ = HermiteSpline(pmf.phases, std::move(v), std::move(s));
  }

  Mat gain(double tau) const {
    if (inputs == 0) return Mat(0, dim);
    if (hybrid) tau = std::clamp(tau, 0.0, period);
    else {
      tau = std::fmod(tau, period);
      if (tau < 0) tau += period;
    }
    return TransverseLTV::unflatten(gains_.value(tau), inputs, dim);
  }

  Vec u(double tau, const Vec& x_perp) const { return -gain(tau) * x_perp; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = "hroa.lqr/1";
    auto mat = [](const Mat& m) {
      const Vec f = TransverseLTV::flatten(m);
      return std::vector<double>(f.data(), f.data() + f.size());
    };
    j["Q"] = mat(weights.q);
    j["R"] = mat(weights.r);
    j["Qi"] = mat(weights.qi);
    j["P"] = p.to_json();
    return j;
  }

 private:
  HermiteSpline gains_;
};

inline TransverseController feedback(const PeriodicMatrixFunction& p, const TransverseLTV& ltv, const LqrWeights& w) {
  return TransverseController(p, ltv, w);
}

/// Full-state law u(x) = -K(tau(x)) x_perp(x) added to the nominal input.
/// States outside the tube get zero torque and are counted.
class StateFeedback {
 public:
  StateFeedback(TransverseController c, TransversalFamily fam, PeriodicOrbit orbit)
      : c_(std::make_shared<const TransverseController>(std::move(c))),
        fam_(std::make_shared<const TransversalFamily>(std::move(fam))),
        orbit_(std::make_shared<const PeriodicOrbit>(std::move(orbit))),
        fallbacks_(std::make_shared<std::atomic<long>>(0)),
        clamped_(std::make_shared<std::atomic<long>>(0)) {}

  Vec operator()(double, const Vec& x) const {
    try {
      const auto tv = to_transverse(*fam_, *orbit_, x);
      return orbit_->nominal_input(tv.tau) + c_->u(tv.tau, tv.x_perp);
    } catch (const OutOfTubeError&) {
      // Hybrid orbits: a state just behind the first surface (after a perturbed
      // impact) or past the last one (integrator stages beyond the switching
      // surface) uses the end-point gain while it is on the regular side of the
      // coordinate singularity there.
      if (orbit_->hybrid) {
        for (double tau : {0.0, orbit_->period}) {
          const auto fr = fam_->frame(*orbit_, tau);
          const Vec d = x - fr.xs;
          const double g = fr.z.dot(d);
          const Vec xp = fr.pi * d;
          if ((tau == 0.0 ? g < 0 : g > 0) && fr.z.dot(fr.dxs) - fr.dz.dot(fr.pi.transpose() * xp) > 0) {
            ++*clamped_;
            return orbit_->nominal_input(tau) + c_->u(tau, xp);
          }
        }
      }
      ++*fallbacks_;
      return Vec::Zero(c_->inputs);
    }
  }

  long fallbacks() const { return fallbacks_->load(); }
  long clamped() const { return clamped_->load(); }

 private:
  std::shared_ptr<const TransverseController> c_;
  std::shared_ptr<const TransversalFamily> fam_;
  std::shared_ptr<const PeriodicOrbit> orbit_;
  std::shared_ptr<std::atomic<long>> fallbacks_, clamped_;
};

}  // namespace hroa
