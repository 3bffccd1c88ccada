#pragma once

// Dormand-Prince 5(4) integrator with continuous (dense) output. Event
// handling lives with the caller; this file only produces accepted steps.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "hroa/error.hpp"

namespace hroa {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct OdeOptions {
  double rtol = 1e-9;
  double atol = 1e-11;
  double initial_step = 0.0;  // 0: automatic
  double max_step = std::numeric_limits<double>::infinity();
  long max_steps = 20'000'000;
};

using OdeRhs = std::function<void(double t, const Vec& x, Vec& dx)>;

/// One accepted step with its 4th-order continuous extension.
struct DenseStep {
  double t0 = 0.0, t1 = 0.0;
  Vec x0, x1;
  Vec r2, r3, r4, r5;

  Vec operator()(double t) const {
    const double h = t1 - t0;
    if (h == 0.0) return x0;
    const double th = (t - t0) / h, th1 = 1.0 - th;
    return x0 + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)));
  }
};

class Dopri5 {
 public:
  Dopri5(OdeRhs rhs, OdeOptions opts) : rhs_(std::move(rhs)), opts_(opts) {}

  const OdeOptions& options() const { return opts_; }

  void reset(double t, const Vec& x) {
    t_ = t;
    x_ = x;
    k1_.resize(x.size());
    rhs_(t_, x_, k1_);
    h_ = 0.0;
    fresh_ = true;
  }

  double time() const { return t_; }
  const Vec& state() const { return x_; }
  const Vec& derivative() const { return k1_; }

  /// Advances by one accepted step, never past t_end. Returns the step.
  DenseStep step(double t_end) {
    const double dir = t_end >= t_ ? 1.0 : -1.0;
    if (fresh_) {
      h_ = opts_.initial_step > 0.0 ? opts_.initial_step : initial_step(dir);
      fresh_ = false;
    }
    const long n = x_.size();
    Vec k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), y(n), x1(n), err(n);
    for (int attempt = 0;; ++attempt) {
      double h = std::min(std::abs(h_), opts_.max_step);
      const double remaining = std::abs(t_end - t_);
      bool last = false;
      if (h >= remaining) {
        h = remaining;
        last = true;
      }
      const double hmin = 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t_));
      if (h < hmin) throw IntegrationError("step size collapsed", t_);
      const double hs = dir * h;

      y = x_ + hs * (a21 * k1_);
      rhs_(t_ + c2 * hs, y, k2);
      y = x_ + hs * (a31 * k1_ + a32 * k2);
      rhs_(t_ + c3 * hs, y, k3);
      y = x_ + hs * (a41 * k1_ + a42 * k2 + a43 * k3);
      rhs_(t_ + c4 * hs, y, k4);
      y = x_ + hs * (a51 * k1_ + a52 * k2 + a53 * k3 + a54 * k4);
      rhs_(t_ + c5 * hs, y, k5);
      y = x_ + hs * (a61 * k1_ + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
      const double t_new = last ? t_end : t_ + hs;
      rhs_(t_new, y, k6);
      x1 = x_ + hs * (a71 * k1_ + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
      rhs_(t_new, x1, k7);
      err = hs * (e1 * k1_ + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

      double e2 = 0.0;
      for (long i = 0; i < n; ++i) {
        const double sc = opts_.atol + opts_.rtol * std::max(std::abs(x_[i]), std::abs(x1[i]));
        const double r = err[i] / sc;
        e2 += r * r;
      }
      const double enorm = n > 0 ? std::sqrt(e2 / static_cast<double>(n)) : 0.0;
      if (!std::isfinite(enorm)) {
        h_ = 0.2 * h;
        if (attempt > 60) throw IntegrationError("non-finite state during integration", t_);
        continue;
      }
      if (enorm <= 1.0) {
        DenseStep d;
        d.t0 = t_;
        d.t1 = t_new;
        d.x0 = x_;
        d.x1 = x1;
        d.r2 = x1 - x_;
        d.r3 = hs * k1_ - d.r2;
        d.r4 = d.r2 - hs * k7 - d.r3;
        d.r5 = hs * (d1 * k1_ + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
        const double fac = enorm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(enorm, -0.2), 0.2, 5.0);
        if (!last || h_ == 0.0) h_ = h * fac;
        t_ = t_new;
        x_ = x1;
        k1_ = k7;
        ++steps_;
        if (steps_ > opts_.max_steps) throw IntegrationError("step budget exhausted", t_);
        return d;
      }
      h_ = h * std::max(0.2, 0.9 * std::pow(enorm, -0.2));
      if (attempt > 200) throw IntegrationError("step rejected repeatedly", t_);
    }
  }

 private:
  double initial_step(double dir) {
    const long n = x_.size();
    auto norm = [&](const Vec& v) {
      double s = 0.0;
      for (long i = 0; i < n; ++i) {
        const double sc = opts_.atol + opts_.rtol * std::abs(x_[i]);
        s += (v[i] / sc) * (v[i] / sc);
      }
      return n > 0 ? std::sqrt(s / static_cast<double>(n)) : 0.0;
    };
    const double d0 = norm(x_), d1n = norm(k1_);
    double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
    h0 = std::min(h0, opts_.max_step);
    Vec y = x_ + dir * h0 * k1_;
    Vec f1(n);
    rhs_(t_ + dir * h0, y, f1);
    const double d2 = norm(f1 - k1_) / h0;
    const double dm = std::max(d1n, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    return std::min({100.0 * h0, h1, opts_.max_step});
  }

  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192,
                          a75 = -2187.0 / 6784, a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                          d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                          d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

  OdeRhs rhs_;
  OdeOptions opts_;
  double t_ = 0.0, h_ = 0.0;
  Vec x_, k1_;
  bool fresh_ = true;
  long steps_ = 0;
};

/// Integrates from (t0, x0) to t1 and returns x(t1).
inline Vec integrate(const OdeRhs& rhs, double t0, const Vec& x0, double t1,
                     const OdeOptions& opts = {}) {
  Dopri5 ode(rhs, opts);
  ode.reset(t0, x0);
  while (ode.time() != t1) ode.step(t1);
  return ode.state();
}

/// Integrates and hands every accepted dense step to `on_step`.
inline Vec integrate_dense(const OdeRhs& rhs, double t0, const Vec& x0, double t1,
                           const std::function<void(const DenseStep&)>& on_step,
                           const OdeOptions& opts = {}) {
  Dopri5 ode(rhs, opts);
  ode.reset(t0, x0);
  while (ode.time() != t1) on_step(ode.step(t1));
  return ode.state();
}

/// Like integrate_dense, but restarts the integrator at every breakpoint between
/// t0 and t1 (sorted ascending). Used when the right-hand side is only piecewise smooth.
inline Vec integrate_piecewise(const OdeRhs& rhs, double t0, const Vec& x0, double t1,
                               const std::vector<double>& breaks,
                               const std::function<void(const DenseStep&)>& on_step = nullptr,
                               const OdeOptions& opts = {}) {
  std::vector<double> stops;
  const double lo = std::min(t0, t1), hi = std::max(t0, t1);
  const double gap = 1e-12 * (1.0 + std::abs(lo) + std::abs(hi));
  for (double b : breaks)
    if (b > lo + gap && b < hi - gap) stops.push_back(b);
  if (t1 < t0) std::reverse(stops.begin(), stops.end());
  stops.push_back(t1);
  Dopri5 ode(rhs, opts);
  double t = t0;
  Vec x = x0;
  for (double s : stops) {
    ode.reset(t, x);
    while (ode.time() != s) {
      const DenseStep st = ode.step(s);
      if (on_step) on_step(st);
    }
    t = s;
    x = ode.state();
  }
  return x;
}

}  // namespace hroa
