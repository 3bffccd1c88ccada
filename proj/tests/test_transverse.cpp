#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "hroa/transverse.hpp"

using hroa::Mat;
using hroa::SurfaceStrategy;
using hroa::Vec;

namespace {

struct Setup {
  hroa::HybridSystem sys;
  hroa::PeriodicOrbit orbit;
  hroa::TransversalFamily fam;
};

const Setup& setup(const std::string& name, SurfaceStrategy st) {
  static std::map<std::pair<std::string, SurfaceStrategy>, Setup> cache;
  const auto key = std::make_pair(name, st);
  auto it = cache.find(key);
  if (it == cache.end()) {
    Setup s;
    s.sys = hroa::builtin(name);
    s.orbit = hroa::find_limit_cycle(s.sys, hroa::default_initial_state(s.sys));
    hroa::SurfaceOptions opts;
    opts.strategy = st;
    s.fam = hroa::make_surfaces(s.orbit, s.sys, opts);
    it = cache.emplace(key, std::move(s)).first;
  }
  return it->second;
}

const std::vector<std::pair<std::string, SurfaceStrategy>> kAllFamilies = {
    {"van-der-pol", SurfaceStrategy::orthogonal}, {"van-der-pol", SurfaceStrategy::radial},
    {"van-der-pol", SurfaceStrategy::optimized},  {"rimless-wheel", SurfaceStrategy::vertical},
    {"rimless-wheel", SurfaceStrategy::orthogonal}, {"compass-gait", SurfaceStrategy::orthogonal},
    {"compass-gait", SurfaceStrategy::optimized}};

Vec random_unit(std::mt19937& rng, int n) {
  std::normal_distribution<double> d;
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v / v.norm();
}

}  // namespace

TEST(Projection, VerticalNormalGivesSecondCoordinate) {
  const auto& s = setup("rimless-wheel", SurfaceStrategy::vertical);
  const auto p = hroa::projection(s.fam, 0.3);
  EXPECT_EQ(p.pi(0, 0), 0.0);
  EXPECT_EQ(p.pi(0, 1), 1.0);
  EXPECT_EQ(p.dpi.norm(), 0.0);
}

TEST(Projection, OrthonormalComplementAtRandomPhases) {
  std::mt19937 rng(31);
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    std::uniform_real_distribution<double> u(0.0, s.orbit.period);
    const int n = s.sys.state_dim;
    for (int i = 0; i < 1000; ++i) {
      const double t = u(rng);
      const auto p = hroa::projection(s.fam, t);
      const Vec z = s.fam.normal(t).first;
      EXPECT_LE((p.pi * p.pi.transpose() - Mat::Identity(n - 1, n - 1)).norm(), 1e-12) << name;
      EXPECT_LE((p.pi * z).norm(), 1e-12) << name;
    }
  }
}

TEST(Projection, DerivativeMatchesFiniteDifference) {
  std::mt19937 rng(32);
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    std::uniform_real_distribution<double> u(0.01 * s.orbit.period, 0.99 * s.orbit.period);
    const double h = 1e-6 * s.orbit.period;
    for (int i = 0; i < 50; ++i) {
      const double t = u(rng);
      const Mat fd = (hroa::projection(s.fam, t + h).pi - hroa::projection(s.fam, t - h).pi) / (2 * h);
      const Mat dpi = hroa::projection(s.fam, t).dpi;
      EXPECT_LE((fd - dpi).norm(), 1e-4 * std::max(1.0, dpi.norm())) << name << " " << hroa::to_string(st);
      const auto [z, dz] = s.fam.normal(t);
      const Vec fdz = (s.fam.normal(t + h).first - s.fam.normal(t - h).first) / (2 * h);
      EXPECT_LE((fdz - dz).norm(), 1e-4 * std::max(1.0, dz.norm()));
    }
  }
}

TEST(Projection, CompassGaitFrameIsSmoothAndPeriodic) {
  for (auto st : {SurfaceStrategy::orthogonal, SurfaceStrategy::optimized}) {
    const auto& s = setup("compass-gait", st);
    const int m = 400;
    const double dt = s.orbit.period / m;
    double c = 0.0;
    for (int k = 0; k < m; ++k) {
      const Mat a = hroa::projection(s.fam, k * dt).pi, b = hroa::projection(s.fam, (k + 1) * dt).pi;
      c = std::max(c, (b - a).norm() / dt);
    }
    EXPECT_TRUE(std::isfinite(c));
    EXPECT_LT(c, 100.0);
    EXPECT_LE((hroa::projection(s.fam, 0.0).pi - hroa::projection(s.fam, s.orbit.period).pi).norm(), 1e-8);
  }
}

TEST(MakeSurfaces, OrthogonalNormalsFollowTheFlow) {
  const auto& s = setup("van-der-pol", SurfaceStrategy::orthogonal);
  for (double t : s.orbit.sample_phases()) {
    const Vec f = s.sys.vector_field(s.orbit.state(t));
    EXPECT_NEAR(s.fam.normal(t).first.dot(f), f.norm(), 1e-12 * f.norm());
  }
}

TEST(MakeSurfaces, RadialNormalsAreOrthogonalToPosition) {
  const auto& s = setup("van-der-pol", SurfaceStrategy::radial);
  for (double t : s.orbit.sample_phases()) {
    EXPECT_NEAR(s.fam.normal(t).first.dot(s.orbit.state(t)), 0.0, 1e-12);
    // The only singular point of a radial family is its center.
    EXPECT_NEAR(s.fam.singularity_distance(s.orbit, t), s.orbit.state(t).norm(), 1e-6);
  }
}

TEST(MakeSurfaces, OrthogonalVanDerPolHasFiniteSingularities) {
  const auto& s = setup("van-der-pol", SurfaceStrategy::orthogonal);
  double dmin = INFINITY, dmax = 0.0;
  for (double t : s.orbit.sample_phases()) {
    const double d = s.fam.singularity_distance(s.orbit, t);
    EXPECT_GT(d, 0.0);
    dmin = std::min(dmin, d);
    dmax = std::max(dmax, d);
  }
  EXPECT_LT(dmin, 1.0);
  EXPECT_GT(dmax, 5.0 * dmin);
}

TEST(MakeSurfaces, OptimizedImprovesSingularityDistance) {
  for (const char* name : {"van-der-pol", "compass-gait"}) {
    const auto& o = setup(name, SurfaceStrategy::orthogonal);
    const auto& p = setup(name, SurfaceStrategy::optimized);
    double dmin_o = INFINITY, dmin_p = INFINITY;
    for (double t : o.orbit.sample_phases()) {
      dmin_o = std::min(dmin_o, o.fam.singularity_distance(o.orbit, t));
      dmin_p = std::min(dmin_p, p.fam.singularity_distance(p.orbit, t));
    }
    EXPECT_GT(dmin_p, dmin_o) << name;
  }
}

TEST(MakeSurfaces, HybridFamiliesAlignWithSwitchingSurfaces) {
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    if (!s.orbit.hybrid) continue;
    const Vec c0 = s.sys.impact->arrival.normal.normalized() * s.sys.impact->direction;
    const Vec c1 = s.sys.impact->departure.normal.normalized() * s.sys.impact->direction;
    EXPECT_LE((s.fam.normal(0.0).first - c0).norm(), 1e-12);
    EXPECT_LE((s.fam.normal(s.orbit.period).first - c1).norm(), 1e-12);
  }
}

TEST(MakeSurfaces, Errors) {
  const auto& s = setup("van-der-pol", SurfaceStrategy::orthogonal);
  hroa::SurfaceOptions vertical;
  vertical.strategy = SurfaceStrategy::vertical;
  try {
    hroa::make_surfaces(s.orbit, s.sys, vertical);
    FAIL() << "vertical surfaces cannot be transversal to a closed planar orbit";
  } catch (const hroa::Error& e) {
    EXPECT_NE(std::string(e.what()).find("phase"), std::string::npos);
  }
  const auto& r = setup("rimless-wheel", SurfaceStrategy::vertical);
  hroa::SurfaceOptions radial;
  radial.strategy = SurfaceStrategy::radial;
  EXPECT_THROW(hroa::make_surfaces(r.orbit, r.sys, radial), hroa::InvalidArgument);
}

TEST(TransverseCoordinates, OnOrbitAndConstructionInverse) {
  std::mt19937 rng(33);
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    const int n = s.sys.state_dim;
    for (double t0 : s.orbit.sample_phases()) {
      if (t0 == 0.0 && s.orbit.hybrid) continue;
      const auto on = hroa::to_transverse(s.fam, s.orbit, s.orbit.state(t0));
      EXPECT_NEAR(on.tau, t0, 1e-9 * s.orbit.period) << name;
      EXPECT_LE(on.x_perp.norm(), 1e-10);
      const Vec v = 1e-3 * random_unit(rng, n - 1);
      const Vec x = s.orbit.state(t0) + hroa::projection(s.fam, t0).pi.transpose() * v;
      const auto tv = hroa::to_transverse(s.fam, s.orbit, x);
      EXPECT_NEAR(tv.tau, t0, 1e-9 * s.orbit.period) << name << " " << hroa::to_string(st);
      EXPECT_LE((tv.x_perp - v).norm(), 1e-10);
    }
  }
}

TEST(TransverseCoordinates, RoundTripWithinTube) {
  std::mt19937 rng(34);
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    const int n = s.sys.state_dim;
    std::uniform_real_distribution<double> u(0.0, s.orbit.period), frac(0.0, 0.5);
    for (int i = 0; i < 300; ++i) {
      const double tau = u(rng);
      const double r = std::min(frac(rng) * s.fam.singularity_distance(s.orbit, tau), 0.3);
      const Vec v = r * random_unit(rng, n - 1);
      const Vec x = hroa::from_transverse(s.fam, s.orbit, v, tau);
      const auto back = hroa::to_transverse(s.fam, s.orbit, x, tau);
      EXPECT_LE((hroa::from_transverse(s.fam, s.orbit, back.x_perp, back.tau) - x).norm(), 1e-10) << name;
      EXPECT_NEAR(back.tau, tau, 1e-9);
    }
  }
}

TEST(FromTransverse, AffineAndOnSurface) {
  std::mt19937 rng(35);
  const auto& s = setup("compass-gait", SurfaceStrategy::optimized);
  for (int i = 0; i < 100; ++i) {
    const double tau = s.orbit.period * (i + 0.5) / 100.0;
    const Vec v = random_unit(rng, 3);
    const Vec xs = s.orbit.state(tau);
    EXPECT_LE((hroa::from_transverse(s.fam, s.orbit, Vec::Zero(3), tau) - xs).norm(), 0.0);
    const Vec a = hroa::from_transverse(s.fam, s.orbit, 2.5 * v, tau) - xs;
    const Vec b = hroa::from_transverse(s.fam, s.orbit, v, tau) - xs;
    EXPECT_LE((a - 2.5 * b).norm(), 1e-14);
    EXPECT_LE(std::abs(s.fam.normal(tau).first.dot(b)), 1e-14);
  }
}

TEST(TransverseCoordinates, SingularPointIsOutOfTube) {
  const auto& s = setup("van-der-pol", SurfaceStrategy::radial);
  EXPECT_THROW(hroa::to_transverse(s.fam, s.orbit, Vec::Zero(2)), hroa::OutOfTubeError);
}

TEST(TransverseFlow, OnOrbit) {
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    for (double t : s.orbit.sample_phases()) {
      const auto r = hroa::transverse_flow(s.fam, s.orbit, s.sys, Vec::Zero(s.sys.state_dim - 1), t,
                                           s.orbit.nominal_input(t));
      EXPECT_NEAR(r.tau_dot, 1.0, 1e-12) << name;
      EXPECT_LE(r.x_perp_dot.norm(), 1e-12) << name;
    }
  }
}

TEST(TransverseFlow, RimlessWheelVerticalSurfacesAreLinear) {
  const auto& s = setup("rimless-wheel", SurfaceStrategy::vertical);
  const double e = *s.orbit.energy;
  std::mt19937 rng(36);
  std::uniform_real_distribution<double> u(0.0, 1.0), d(-0.3, 0.3);
  for (int i = 0; i < 200; ++i) {
    const double tau = u(rng) * s.orbit.period;
    const double theta = s.orbit.state(tau)[0];
    const double vstar = std::sqrt(2 * e - 2 * std::cos(theta));
    const Vec xp = (Vec(1) << d(rng)).finished();
    const auto r = hroa::transverse_flow(s.fam, s.orbit, s.sys, xp, tau, Vec(0));
    EXPECT_NEAR(r.x_perp_dot[0], -std::sin(theta) / vstar * xp[0], 1e-7);
    const double thetadot = s.orbit.state(tau)[1] + xp[0];
    EXPECT_NEAR(r.tau_dot, thetadot / vstar, 1e-7);
  }
  // Backward motion through the surfaces: tau_dot < 0 and finite.
  const double tau = 0.4 * s.orbit.period;
  const Vec xp = (Vec(1) << -(s.orbit.state(tau)[1] + 0.2)).finished();
  const auto r = hroa::transverse_flow(s.fam, s.orbit, s.sys, xp, tau, Vec(0));
  EXPECT_LT(r.tau_dot, 0.0);
  EXPECT_TRUE(std::isfinite(r.x_perp_dot[0]));
}

TEST(TransverseFlow, MatchesChainRuleAlongSimulation) {
  // Differentiate (x_perp, tau) of a simulated van der Pol trajectory numerically.
  for (auto st : {SurfaceStrategy::orthogonal, SurfaceStrategy::radial}) {
    const auto& s = setup("van-der-pol", st);
    hroa::OdeRhs rhs = [&](double, const Vec& x, Vec& dx) { dx = s.sys.vector_field(x); };
    for (double tau : {0.5, 2.0, 4.4}) {
      const Vec v = (Vec(1) << 0.15).finished();
      const Vec x0 = hroa::from_transverse(s.fam, s.orbit, v, tau);
      const double h = 1e-4;
      const Vec xp = hroa::integrate(rhs, 0.0, x0, h), xm = hroa::integrate(rhs, 0.0, x0, -h);
      const auto cp = hroa::to_transverse(s.fam, s.orbit, xp, tau), cm = hroa::to_transverse(s.fam, s.orbit, xm, tau);
      const auto r = hroa::transverse_flow(s.fam, s.orbit, s.sys, v, tau, Vec(0));
      EXPECT_NEAR((cp.tau - cm.tau) / (2 * h), r.tau_dot, 1e-5);
      EXPECT_NEAR((cp.x_perp[0] - cm.x_perp[0]) / (2 * h), r.x_perp_dot[0], 1e-5);
    }
  }
}

TEST(TransverseFlow, SingularDenominatorIsRejected) {
  const auto& s = setup("van-der-pol", SurfaceStrategy::radial);
  const double tau = 1.0;
  const double r = s.orbit.state(tau).norm();
  // Moving to the center along S(tau) hits the singular point.
  const Vec toward = hroa::projection(s.fam, tau).pi * (-s.orbit.state(tau));
  EXPECT_THROW(hroa::transverse_flow(s.fam, s.orbit, s.sys, toward / toward.norm() * r, tau, Vec(0)),
               hroa::SingularityError);
}

TEST(TransverseImpact, OrbitMapsToOrbit) {
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    if (!s.orbit.hybrid) continue;
    EXPECT_LE(hroa::transverse_impact(s.fam, s.orbit, s.sys, Vec::Zero(s.sys.state_dim - 1)).norm(), 1e-7);
  }
}

TEST(TransverseImpact, RimlessWheelScalesByCosTwoAlpha) {
  const auto& s = setup("rimless-wheel", SurfaceStrategy::vertical);
  const double c = std::cos(2 * s.sys.params.rimless_wheel.alpha);
  for (double v : {-0.3, -0.05, 0.01, 0.2, 0.7}) {
    const Vec out = hroa::transverse_impact(s.fam, s.orbit, s.sys, (Vec(1) << v).finished());
    EXPECT_NEAR(out[0], c * v, 1e-9);
  }
}

TEST(TransverseImpact, CompassGaitMatchesComposition) {
  std::mt19937 rng(37);
  for (auto st : {SurfaceStrategy::orthogonal, SurfaceStrategy::optimized}) {
    const auto& s = setup("compass-gait", st);
    for (int i = 0; i < 50; ++i) {
      const Vec v = 0.02 * random_unit(rng, 3);
      const Vec pre = hroa::from_transverse(s.fam, s.orbit, v, s.orbit.period);
      const auto post = hroa::to_transverse(s.fam, s.orbit, s.sys.impact_map(pre), 0.0);
      EXPECT_NEAR(post.tau, 0.0, 1e-12);
      EXPECT_LE((hroa::transverse_impact(s.fam, s.orbit, s.sys, v) - post.x_perp).norm(), 1e-9);
    }
  }
}

TEST(Linearize, MatchesFiniteDifferencesOfTheFlow) {
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    const int d = s.sys.state_dim - 1, m = s.sys.input_dim;
    const auto ltv = hroa::linearize(s.fam, s.orbit, s.sys, 200);
    const double h = 1e-6;
    for (int k = 0; k < 200; k += 7) {
      const double tau = ltv.phases[static_cast<std::size_t>(k)];
      const Vec u0 = s.orbit.nominal_input(tau);
      Mat fd(d, d), fdb(d, m);
      for (int j = 0; j < d; ++j) {
        const Vec e = Vec::Unit(d, j) * h;
        fd.col(j) = (hroa::transverse_flow(s.fam, s.orbit, s.sys, e, tau, u0).x_perp_dot -
                     hroa::transverse_flow(s.fam, s.orbit, s.sys, -e, tau, u0).x_perp_dot) /
                    (2 * h);
      }
      for (int j = 0; j < m; ++j) {
        const Vec e = Vec::Unit(m, j) * h;
        fdb.col(j) = (hroa::transverse_flow(s.fam, s.orbit, s.sys, Vec::Zero(d), tau, u0 + e).x_perp_dot -
                      hroa::transverse_flow(s.fam, s.orbit, s.sys, Vec::Zero(d), tau, u0 - e).x_perp_dot) /
                     (2 * h);
      }
      const Mat a = ltv.a[static_cast<std::size_t>(k)];
      EXPECT_LE((a - fd).norm(), 1e-4 * std::max(1.0, a.norm())) << name << " " << hroa::to_string(st) << " " << tau;
      if (m > 0) {
        const Mat b = ltv.b[static_cast<std::size_t>(k)];
        EXPECT_LE((b - fdb).norm(), 1e-4 * std::max(1.0, b.norm())) << name;
      }
    }
    if (s.orbit.hybrid) {
      Mat fd(d, d);
      for (int j = 0; j < d; ++j) {
        const Vec e = Vec::Unit(d, j) * h;
        fd.col(j) = (hroa::transverse_impact(s.fam, s.orbit, s.sys, e) -
                     hroa::transverse_impact(s.fam, s.orbit, s.sys, -e)) /
                    (2 * h);
      }
      EXPECT_LE((*ltv.a_jump - fd).norm(), 1e-4 * std::max(1.0, fd.norm())) << name;
    }
  }
}

TEST(Linearize, RimlessWheelAnalyticIdentities) {
  const auto& s = setup("rimless-wheel", SurfaceStrategy::vertical);
  const auto ltv = hroa::linearize(s.fam, s.orbit, s.sys);
  for (std::size_t k = 0; k < ltv.phases.size(); k += 10) {
    const Vec x = s.orbit.state_left(ltv.phases[k]);
    EXPECT_NEAR(ltv.a[k](0, 0), -std::sin(x[0]) / x[1], 1e-8);
  }
  EXPECT_NEAR((*ltv.a_jump)(0, 0), std::cos(2 * s.sys.params.rimless_wheel.alpha), 1e-8);
  EXPECT_EQ(ltv.b[0].cols(), 0);
}

TEST(Serialization, FamilyAndLtvRoundTrip) {
  for (const auto& [name, st] : kAllFamilies) {
    const auto& s = setup(name, st);
    const auto back = hroa::TransversalFamily::from_json(nlohmann::json::parse(s.fam.to_json().dump()));
    for (double t : s.orbit.sample_phases()) {
      EXPECT_EQ(back.normal(t).first, s.fam.normal(t).first);
      EXPECT_LE((hroa::projection(back, t).pi - hroa::projection(s.fam, t).pi).norm(), 1e-15);
    }
    const auto ltv = hroa::linearize(s.fam, s.orbit, s.sys, 100);
    const auto lb = hroa::TransverseLTV::from_json(nlohmann::json::parse(ltv.to_json().dump()));
    for (std::size_t k = 0; k < ltv.phases.size(); ++k) {
      EXPECT_EQ(lb.a[k], ltv.a[k]);
      EXPECT_EQ(lb.b[k], ltv.b[k]);
    }
    EXPECT_EQ(lb.a_jump.has_value(), ltv.a_jump.has_value());
  }
}
