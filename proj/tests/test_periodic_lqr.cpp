#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "hroa/periodic_lqr.hpp"

using hroa::Mat;
using hroa::SurfaceStrategy;
using hroa::Vec;

namespace {

hroa::TransverseLTV constant_ltv(const Mat& a, const Mat& b, double period, int grid = 50) {
  hroa::TransverseLTV l;
  l.dim = static_cast<int>(a.rows());
  l.inputs = static_cast<int>(b.cols());
  l.period = period;
  for (int k = 0; k <= grid; ++k) {
    l.phases.push_back(period * k / grid);
    l.a.push_back(a);
    l.b.push_back(b);
  }
  l.build_splines();
  return l;
}

struct Setup {
  hroa::HybridSystem sys;
  hroa::PeriodicOrbit orbit;
  hroa::TransversalFamily fam;
  hroa::TransverseLTV ltv;
  hroa::LqrWeights w;
  hroa::PeriodicMatrixFunction lyap, ric;
};

const Setup& setup(const std::string& name) {
  static std::map<std::string, Setup> cache;
  auto it = cache.find(name);
  if (it == cache.end()) {
    Setup s;
    s.sys = hroa::builtin(name);
    s.orbit = hroa::find_limit_cycle(s.sys, hroa::default_initial_state(s.sys));
    hroa::SurfaceOptions o;
    o.strategy = name == "rimless-wheel" ? SurfaceStrategy::vertical
                 : name == "compass-gait" ? SurfaceStrategy::optimized
                                          : SurfaceStrategy::orthogonal;
    s.fam = hroa::make_surfaces(s.orbit, s.sys, o);
    s.ltv = hroa::linearize(s.fam, s.orbit, s.sys);
    s.w = hroa::LqrWeights::defaults(s.ltv.dim, s.ltv.inputs);
    s.lyap = hroa::periodic_lyapunov(s.ltv, s.w.q, s.w.qi);
    s.ric = hroa::jump_riccati(s.ltv, s.w.q, s.w.r, s.w.qi);
    it = cache.emplace(name, std::move(s)).first;
  }
  return it->second;
}

const char* kSystems[] = {"van-der-pol", "rimless-wheel", "compass-gait"};

Mat riccati_residual(const Setup& s, const hroa::PeriodicMatrixFunction& p, double t, bool with_input) {
  const Mat a = s.ltv.A(t), pt = p(t);
  Mat r = p.derivative(t) + a.transpose() * pt + pt * a + s.w.q;
  if (with_input && s.ltv.inputs > 0) {
    const Mat pb = pt * s.ltv.B(t);
    r -= pb * s.w.r.inverse() * pb.transpose();
  }
  return r;
}

// Independent fixed-step RK4 monodromy of x' = M(t) x over [0, T].
Mat rk4_monodromy(const std::function<Mat(double)>& m, double period, int d, int steps) {
  Mat x = Mat::Identity(d, d);
  const double h = period / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = i * h;
    const Mat k1 = m(t) * x, k2 = m(t + h / 2) * (x + h / 2 * k1), k3 = m(t + h / 2) * (x + h / 2 * k2),
              k4 = m(t + h) * (x + h * k3);
    x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  return x;
}

}  // namespace

TEST(PeriodicLyapunov, ScalarConstantSystem) {
  const auto ltv = constant_ltv(Mat::Constant(1, 1, -1.0), Mat(1, 0), 2.0);
  const auto p = hroa::periodic_lyapunov(ltv, Mat::Constant(1, 1, 2.0), Mat::Zero(1, 1));
  for (double t : {0.0, 0.3, 1.0, 1.77, 2.0}) EXPECT_NEAR(p(t)(0, 0), 1.0, 1e-10);
  EXPECT_LE(p.closure_residual, 1e-10);
}

TEST(PeriodicLyapunov, ResidualAtMidSamples) {
  for (const char* name : kSystems) {
    const auto& s = setup(name);
    const auto& p = s.lyap;
    EXPECT_LE(p.closure_residual, 1e-8) << name;
    EXPECT_GT(p.min_eigenvalue(), 0.0) << name;
    for (std::size_t k = 0; k + 1 < p.phases.size(); k += 13) {
      const double t = 0.5 * (p.phases[k] + p.phases[k + 1]);
      EXPECT_LE(riccati_residual(s, p, t, false).norm(), 1e-6 * hroa::lyapunov_term_scale(s.ltv.A(t), p(t), s.w.q))
          << name << " tau " << t;
      EXPECT_LE((p(t) - p(t).transpose()).norm(), 0.0);
    }
    if (!s.orbit.hybrid) {
      EXPECT_LE((p(0.0) - p(s.orbit.period)).norm(), 1e-8) << name;
    }
  }
}

TEST(PeriodicLyapunov, RimlessWheelDirectSubstitution) {
  // Scalar oracle: with vertical surfaces A(tau) = -sin(theta*)/theta_dot*, so
  // P' = 2 sin(theta*)/theta_dot* P - 1 and P(T-) = cos^2(2 alpha) P(0+) + 0.1.
  const auto& s = setup("rimless-wheel");
  const auto& p = s.lyap;
  const double c = std::cos(2 * s.sys.params.rimless_wheel.alpha);
  EXPECT_NEAR(p(s.orbit.period)(0, 0), c * c * p(0.0)(0, 0) + 0.1, 1e-8);
  auto rate = [&](double t, double v) {
    const Vec x = s.orbit.state_left(t);
    return 2 * std::sin(x[0]) / x[1] * v - 1.0;
  };
  double v = p(s.orbit.period)(0, 0);
  const int steps = 20000;
  const double h = -s.orbit.period / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = s.orbit.period + i * h;
    const double k1 = rate(t, v), k2 = rate(t + h / 2, v + h / 2 * k1), k3 = rate(t + h / 2, v + h / 2 * k2),
                 k4 = rate(t + h, v + h * k3);
    v += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    if ((i + 1) % 1000 == 0) {
      EXPECT_NEAR(p(t + h)(0, 0), v, 1e-6);
    }
  }
  EXPECT_NEAR(v, p(0.0)(0, 0), 1e-6);
}

TEST(PeriodicLyapunov, DecreaseAndJumpProperties) {
  std::mt19937 rng(41);
  std::normal_distribution<double> nd;
  for (const char* name : kSystems) {
    const auto& s = setup(name);
    const int d = s.ltv.dim;
    std::uniform_real_distribution<double> u(0.0, s.orbit.period);
    for (int i = 0; i < 100; ++i) {
      Vec x(d);
      for (int j = 0; j < d; ++j) x[j] = nd(rng);
      const double t = u(rng);
      const Vec xd = s.ltv.A(t) * x;
      const double vdot = x.dot(s.lyap.derivative(t) * x) + 2 * xd.dot(s.lyap(t) * x);
      EXPECT_NEAR(vdot, -x.dot(s.w.q * x), 1e-6 * hroa::lyapunov_term_scale(s.ltv.A(t), s.lyap(t), s.w.q) * x.squaredNorm())
          << name;
      if (s.orbit.hybrid) {
        const double before = x.dot(s.lyap(s.orbit.period) * x);
        const Vec xp = *s.ltv.a_jump * x;
        const double after = xp.dot(s.lyap(0.0) * xp);
        EXPECT_NEAR(after - before, -x.dot(s.w.qi * x), 1e-8 * (1 + before)) << name;
      }
    }
  }
}

TEST(PeriodicLyapunov, UnstableMonodromyIsRejected) {
  const auto ltv = constant_ltv(Mat::Constant(1, 1, 0.5), Mat(1, 0), 1.0);
  EXPECT_THROW(hroa::periodic_lyapunov(ltv, Mat::Identity(1, 1), Mat::Zero(1, 1)), hroa::InstabilityError);
  const auto stable = constant_ltv(Mat::Constant(1, 1, -0.5), Mat(1, 0), 1.0);
  EXPECT_THROW(hroa::periodic_lyapunov(stable, Mat::Zero(1, 1), Mat::Zero(1, 1)), hroa::InvalidArgument);
  EXPECT_THROW(hroa::periodic_lyapunov(stable, Mat::Identity(2, 2), Mat::Zero(1, 1)), hroa::DimensionError);
}

TEST(JumpRiccati, ScalarAlgebraicCase) {
  const auto ltv = constant_ltv(Mat::Zero(1, 1), Mat::Ones(1, 1), 1.5);
  const hroa::LqrWeights w{Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Zero(1, 1)};
  const auto p = hroa::jump_riccati(ltv, w.q, w.r, w.qi);
  for (double t : {0.0, 0.4, 1.5}) EXPECT_NEAR(p(t)(0, 0), 1.0, 1e-9);
  const auto c = hroa::feedback(p, ltv, w);
  EXPECT_NEAR(c.gain(0.7)(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(c.u(0.7, Vec::Constant(1, 0.3))[0], -0.3, 1e-9);
  EXPECT_EQ(c.u(0.2, Vec::Zero(1)), Vec::Zero(1));
}

TEST(JumpRiccati, ResidualAndClosure) {
  for (const char* name : kSystems) {
    const auto& s = setup(name);
    const auto& p = s.ric;
    EXPECT_LE(p.closure_residual, 1e-8) << name;
    EXPECT_GT(p.min_eigenvalue(), 0.0) << name;
    for (std::size_t k = 0; k + 1 < p.phases.size(); k += 13) {
      const double t = 0.5 * (p.phases[k] + p.phases[k + 1]);
      const Mat b = s.ltv.inputs > 0 ? Mat(s.ltv.B(t)) : Mat(s.ltv.dim, 0);
      EXPECT_LE(riccati_residual(s, p, t, true).norm(),
                1e-6 * hroa::riccati_term_scale(s.ltv.A(t), b, s.w.r.inverse(), p(t), s.w.q))
          << name << " tau " << t;
    }
    if (s.orbit.hybrid) {
      const Mat& ad = *s.ltv.a_jump;
      EXPECT_LE((p(s.orbit.period) - ad.transpose() * p(0.0) * ad - s.w.qi).norm(), 1e-8) << name;
    }
  }
}

TEST(JumpRiccati, WithoutInputsMatchesLyapunov) {
  for (const char* name : {"van-der-pol", "rimless-wheel"}) {
    const auto& s = setup(name);
    for (std::size_t k = 0; k < s.ric.phases.size(); k += 50)
      EXPECT_NEAR(s.ric.values[k](0, 0), s.lyap.values[k](0, 0), 1e-8 * s.lyap.values[k](0, 0)) << name;
  }
}

TEST(JumpRiccati, CompassGaitClosedLoopMonodromyIsContracting) {
  const auto& s = setup("compass-gait");
  const auto c = hroa::feedback(s.ric, s.ltv, s.w);
  auto closed = [&](double t) { return Mat(s.ltv.A(t) - s.ltv.B(t) * c.gain(t)); };
  const Mat m = *s.ltv.a_jump * rk4_monodromy(closed, s.orbit.period, s.ltv.dim, 40000);
  const double rho = hroa::detail::spectral_radius(m);
  EXPECT_LT(rho, 1.0);
  EXPECT_NEAR(rho, hroa::detail::spectral_radius(hroa::transverse_monodromy(s.ltv, closed)), 1e-6);

  // Closed-loop value decrease: d/dt x'Px = -x'(Q + K'RK)x.
  std::mt19937 rng(42);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 50; ++i) {
    const Vec x = Vec::NullaryExpr(3, [&](Eigen::Index) { return nd(rng); });
    const double t = s.orbit.period * (i + 0.5) / 50;
    const Mat k = c.gain(t);
    const Vec xd = closed(t) * x;
    const double vdot = x.dot(s.ric.derivative(t) * x) + 2 * xd.dot(s.ric(t) * x);
    EXPECT_NEAR(vdot, -x.dot((s.w.q + k.transpose() * s.w.r * k) * x), 1e-6 * (1 + s.ric(t).norm()) * x.squaredNorm());
  }
}

TEST(JumpRiccati, NonStabilizablePairIsRejected) {
  const auto ltv = constant_ltv(Mat::Constant(1, 1, 1.0), Mat::Zero(1, 1), 1.0);
  EXPECT_THROW(hroa::jump_riccati(ltv, Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Zero(1, 1)), hroa::InstabilityError);
  const auto ok = constant_ltv(Mat::Zero(1, 1), Mat::Ones(1, 1), 1.0);
  EXPECT_THROW(hroa::jump_riccati(ok, Mat::Ones(1, 1), Mat::Zero(1, 1), Mat::Zero(1, 1)), hroa::InvalidArgument);
}

TEST(Solvers, OutputGridRefinementIsHarmless) {
  for (const char* name : kSystems) {
    const auto& s = setup(name);
    hroa::LqrOptions coarse;
    coarse.samples = 500;
    const auto a = hroa::jump_riccati(s.ltv, s.w.q, s.w.r, s.w.qi, coarse);
    coarse.samples = 1000;
    const auto b = hroa::jump_riccati(s.ltv, s.w.q, s.w.r, s.w.qi, coarse);
    for (std::size_t k = 0; k < a.phases.size(); k += 10) {
      EXPECT_LE((a.values[k] - b(a.phases[k])).norm(), 1e-6) << name;
      EXPECT_LE((a.values[k] - s.ric(a.phases[k])).norm(), 1e-6 * std::max(1.0, a.values[k].norm())) << name;
    }
    const auto la = hroa::periodic_lyapunov(s.ltv, s.w.q, s.w.qi, coarse);
    for (std::size_t k = 0; k < la.phases.size(); k += 10)
      EXPECT_LE((la.values[k] - s.lyap(la.phases[k])).norm(), 1e-6 * std::max(1.0, la.values[k].norm())) << name;
  }
}

TEST(Solvers, LinearizationGridRefinementIsSmall) {
  const auto& s = setup("van-der-pol");
  const auto fine = hroa::linearize(s.fam, s.orbit, s.sys, 4000);
  const auto p = hroa::periodic_lyapunov(fine, s.w.q, s.w.qi);
  for (double t : s.orbit.sample_phases()) EXPECT_LE((p(t) - s.lyap(t)).norm(), 1e-6) << t;
}

TEST(PeriodicMatrixFunction, JsonRoundTrip) {
  const auto& s = setup("compass-gait");
  const auto back = hroa::PeriodicMatrixFunction::from_json(nlohmann::json::parse(s.ric.to_json().dump()));
  for (std::size_t k = 0; k < s.ric.phases.size(); ++k) EXPECT_EQ(back.values[k], s.ric.values[k]);
  EXPECT_EQ(back(0.123), s.ric(0.123));
  EXPECT_THROW(hroa::PeriodicMatrixFunction::from_json(nlohmann::json{{"schema", "x"}}), hroa::IoError);
}

TEST(StateFeedback, CompassGaitConvergesFromPerturbation) {
  const auto& s = setup("compass-gait");
  const auto c = hroa::feedback(s.ric, s.ltv, s.w);
  const hroa::StateFeedback law(c, s.fam, s.orbit);
  // On the orbit the law commands the nominal (zero) torque.
  EXPECT_LE(law(0.0, s.orbit.state(0.3)).norm(), 1e-9);

  const Vec x0 = s.orbit.state(0.1) + Vec((Vec(4) << 0.01, -0.01, 0.03, -0.02).finished());
  hroa::SimulationOptions opts;
  opts.stop_when = [n = 0](double, const Vec&, bool impacted) mutable { return impacted && ++n >= 10; };
  const auto traj = hroa::simulate(s.sys, x0, law, 20 * s.orbit.period, opts);
  ASSERT_EQ(traj.impacts.size(), 10u);
  const auto tv = hroa::to_transverse(s.fam, s.orbit, traj.impacts.back().post, 0.0);
  EXPECT_LT(tv.x_perp.norm(), 1e-3);
  EXPECT_EQ(law.fallbacks(), 0);
  EXPECT_GT(law.clamped(), 0);

  // Behind the first surface and beyond its singular point: zero torque, counted.
  const auto f0 = s.fam.frame(s.orbit, 0.0);
  const Vec piz = f0.pi * f0.dz;
  const Vec far = f0.xs - 0.5 * f0.z + f0.pi.transpose() * (2.0 * f0.z.dot(f0.dxs) / piz.squaredNorm() * piz);
  const Vec u = law(0.0, far);
  EXPECT_EQ(u, Vec::Zero(1));
  EXPECT_EQ(law.fallbacks(), 1);
}
