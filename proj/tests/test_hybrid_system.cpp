#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "hroa/hybrid_system.hpp"

using hroa::Mat;
using hroa::Vec;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x[i++] = d;
  return x;
}

double cross(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); }

// Point-mass kinematics of the compass gait with the stance foot at the origin.
struct Walker {
  Eigen::Vector2d hip, stance_mass, swing_mass, swing_foot;
  Eigen::Vector2d v_hip, v_stance_mass, v_swing_mass;
};

Walker kinematics(const hroa::CompassGaitParams& p, const Vec& x) {
  const double l = p.l();
  const double sw = x[0], st = x[1], dsw = x[2], dst = x[3];
  const Eigen::Vector2d est(std::sin(st), std::cos(st)), dest(std::cos(st), -std::sin(st));
  const Eigen::Vector2d esw(std::sin(sw), std::cos(sw)), desw(std::cos(sw), -std::sin(sw));
  Walker w;
  w.hip = l * est;
  w.stance_mass = p.a * est;
  w.swing_mass = w.hip - p.b * esw;
  w.swing_foot = w.hip - l * esw;
  w.v_hip = l * dst * dest;
  w.v_stance_mass = p.a * dst * dest;
  w.v_swing_mass = w.v_hip - p.b * dsw * desw;
  return w;
}

// Post-impact velocities from conservation of (i) total angular momentum about
// the new contact point and (ii) the trailing leg's angular momentum about the hip.
Vec momentum_oracle(const hroa::CompassGaitParams& p, const Vec& pre) {
  const Walker w = kinematics(p, pre);
  const Eigen::Vector2d c = w.swing_foot;
  const double total = p.m * cross(w.stance_mass - c, w.v_stance_mass) +
                       p.mh * cross(w.hip - c, w.v_hip) + p.m * cross(w.swing_mass - c, w.v_swing_mass);
  const double trailing = p.m * cross(w.stance_mass - w.hip, w.v_stance_mass);
  // Both momenta are linear in the post-impact rates; build the 2x2 map column by column.
  Mat a(2, 2);
  for (int j = 0; j < 2; ++j) {
    Vec post = vec({pre[1], pre[0], 0.0, 0.0});
    post[2 + j] = 1.0;
    const Walker v = kinematics(p, post);
    a(0, j) = p.m * cross(v.stance_mass, v.v_stance_mass) + p.mh * cross(v.hip, v.v_hip) +
              p.m * cross(v.swing_mass, v.v_swing_mass);
    a(1, j) = p.m * cross(v.swing_mass - v.hip, v.v_swing_mass);
  }
  const Eigen::Vector2d rates = a.lu().solve(Eigen::Vector2d(total, trailing));
  return vec({pre[1], pre[0], rates[0], rates[1]});
}

}  // namespace

TEST(VectorField, Examples) {
  const auto vdp = hroa::builtin("van-der-pol");
  EXPECT_TRUE(vdp.vector_field(vec({0, 1})).isApprox(vec({1, 1})));
  EXPECT_FALSE(vdp.is_hybrid());
  EXPECT_EQ(vdp.state_dim, 2);

  const auto rw = hroa::builtin("rimless-wheel");
  const Vec f = rw.vector_field(vec({std::numbers::pi / 2, 0}));
  EXPECT_NEAR(f[0], 0.0, 1e-15);
  EXPECT_NEAR(f[1], 1.0, 1e-15);
  EXPECT_TRUE(rw.impact->departure.normal.isApprox(vec({1, 0})));
  EXPECT_TRUE(rw.impact->arrival.normal.isApprox(vec({1, 0})));

  const hroa::CompassGaitParams cp;
  const Mat h = hroa::compass_gait_mass_matrix(cp, 0.3, 0.3);
  EXPECT_EQ(h(0, 1), -cp.m * cp.l() * cp.b);
  EXPECT_EQ(h(1, 0), -cp.m * cp.l() * cp.b);
  const auto cg = hroa::builtin("compass-gait");
  EXPECT_TRUE(cg.impact->departure.normal.isApprox(vec({1, 1, 0, 0})));
  EXPECT_DOUBLE_EQ(cg.impact->departure.offset, -2.0 * cp.gamma);
  EXPECT_THROW(cg.vector_field(vec({0, 0})), hroa::DimensionError);
}

TEST(ImpactMap, Examples) {
  const auto rw = hroa::builtin("rimless-wheel");
  const double a = std::numbers::pi / 8, g = 0.08;
  const Vec post = rw.impact_map(vec({g + a, 1.0}));
  EXPECT_NEAR(post[1], std::cos(std::numbers::pi / 4), 1e-15);
  EXPECT_NEAR(post[0], g - a, 1e-15);
  EXPECT_THROW(rw.impact_map(vec({0.0, 1.0})), hroa::InvalidArgument);

  const auto cg = hroa::builtin("compass-gait");
  const double gam = cg.params.compass_gait.gamma;
  const Vec x = vec({0.2, -0.2 - 2 * gam, -0.9, -1.2});
  const Vec y = cg.impact_map(x);
  EXPECT_EQ(y[0], x[1]);
  EXPECT_EQ(y[1], x[0]);
}

TEST(ImpactMap, RelabelingExample) {
  const hroa::CompassGaitParams p;
  const auto v = hroa::detail::compass_impact<double>(std::vector<double>{0.2, -0.3, 0.0, 0.0}, p);
  EXPECT_EQ(v[0], -0.3);
  EXPECT_EQ(v[1], 0.2);
}

TEST(ImpactMap, CompassGaitMatchesAngularMomentumOracle) {
  const auto cg = hroa::builtin("compass-gait");
  const auto& p = cg.params.compass_gait;
  std::mt19937 rng(21);
  std::uniform_real_distribution<double> half_split(0.05, 0.5), rate(-2.0, 2.0);
  for (int i = 0; i < 200; ++i) {
    const double s = half_split(rng);
    const Vec x = vec({-p.gamma + s, -p.gamma - s, rate(rng), rate(rng)});
    const Vec y = cg.impact_map(x);
    const Vec oracle = momentum_oracle(p, x);
    EXPECT_LE((y - oracle).norm(), 1e-8 * (1 + oracle.norm()));
  }
}

TEST(ImpactMap, LandsOnArrivalSurface) {
  std::mt19937 rng(22);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (const char* name : {"rimless-wheel", "compass-gait"}) {
    const auto sys = hroa::builtin(name);
    const auto& law = *sys.impact;
    for (int i = 0; i < 1000; ++i) {
      Vec x(sys.state_dim);
      for (int k = 0; k < sys.state_dim; ++k) x[k] = 0.5 * u(rng);
      x += law.departure.normal * (law.departure.offset - law.departure.normal.dot(x)) /
           law.departure.normal.squaredNorm();
      const Vec y = sys.impact_map(x);
      EXPECT_LE(std::abs(law.arrival.residual(y)), 1e-9) << name;
    }
  }
}

TEST(CompassGait, MassMatrixIsSymmetricPositiveDefinite) {
  const hroa::CompassGaitParams p;
  std::mt19937 rng(23);
  std::uniform_real_distribution<double> ang(-1.5, 1.5), rel(-1.5, 1.5);
  for (int i = 0; i < 1000; ++i) {
    const double st = ang(rng), sw = st + rel(rng);
    const Mat h = hroa::compass_gait_mass_matrix(p, sw, st);
    EXPECT_EQ(h(0, 1), h(1, 0));
    Eigen::SelfAdjointEigenSolver<Mat> es(h);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(CompassGait, HdotMinusTwoCIsSkew) {
  const hroa::CompassGaitParams p;
  std::mt19937 rng(24);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  const double h = 1e-6;
  for (int i = 0; i < 200; ++i) {
    const Vec x = vec({u(rng), u(rng), 2 * u(rng), 2 * u(rng)});
    const Mat hdot = (hroa::compass_gait_mass_matrix(p, x[0] + h * x[2], x[1] + h * x[3]) -
                      hroa::compass_gait_mass_matrix(p, x[0] - h * x[2], x[1] - h * x[3])) /
                     (2 * h);
    const Mat n = hdot - 2.0 * hroa::compass_gait_coriolis_matrix(p, x);
    EXPECT_LE((n + n.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Builtin, Errors) {
  EXPECT_THROW(hroa::builtin("double-pendulum"), hroa::InvalidArgument);
  hroa::SystemParams bad;
  bad.compass_gait.m = -1.0;
  EXPECT_THROW(hroa::builtin("compass-gait", bad), hroa::InvalidArgument);
}

TEST(SystemParams, ParseAndRoundTrip) {
  const auto p = hroa::SystemParams::parse(
      "# comment\n[compass-gait]\nm = 4.5\nmh = 12 # inline\n[rimless-wheel]\ngamma = 0.1\n");
  EXPECT_EQ(p.compass_gait.m, 4.5);
  EXPECT_EQ(p.compass_gait.mh, 12.0);
  EXPECT_EQ(p.rimless_wheel.gamma, 0.1);
  const auto q = hroa::SystemParams::parse(p.to_text());
  EXPECT_EQ(q.to_text(), p.to_text());
  EXPECT_THROW(hroa::SystemParams::parse("[compass-gait]\nfoo = 1\n"), hroa::IoError);
  EXPECT_THROW(hroa::SystemParams::parse("[compass-gait]\nm = abc\n"), hroa::IoError);
  EXPECT_THROW(hroa::SystemParams::parse("[compass-gait]\nl = 2\n"), hroa::InvalidArgument);
}

TEST(Simulate, RimlessWheelSwingConservesEnergy) {
  // Rolling uphill without enough energy to pass the upright position: the
  // wheel falls back, no impact occurs and E = v^2/2 + cos(theta) is conserved.
  const auto rw = hroa::builtin("rimless-wheel");
  const Vec x0 = vec({-0.3, 0.1});
  const auto traj = hroa::simulate(rw, x0, nullptr, 2.0);
  EXPECT_TRUE(traj.impacts.empty());
  const double e0 = 0.5 * x0[1] * x0[1] + std::cos(x0[0]);
  for (const auto& x : traj.states) EXPECT_NEAR(0.5 * x[1] * x[1] + std::cos(x[0]), e0, 1e-6);
}

TEST(Simulate, ImpactResidualsAndDeterminism) {
  for (const char* name : {"rimless-wheel", "compass-gait"}) {
    const auto sys = hroa::builtin(name);
    const Vec x0 = sys.state_dim == 2 ? vec({0.0, 0.4}) : vec({0.25, -0.2, -0.4, -1.0});
    const auto a = hroa::simulate(sys, x0, nullptr, 6.0);
    const auto b = hroa::simulate(sys, x0, nullptr, 6.0);
    ASSERT_FALSE(a.impacts.empty()) << name;
    for (const auto& ev : a.impacts) {
      const auto& s = sys.impact->departure;
      EXPECT_LE(std::abs(s.residual(ev.pre)), 1e-9 * (1 + std::abs(s.offset)));
      EXPECT_LE(std::abs(sys.impact->arrival.residual(ev.post)), 1e-9);
    }
    ASSERT_EQ(a.states.size(), b.states.size());
    for (std::size_t k = 0; k < a.states.size(); ++k) EXPECT_EQ(a.states[k], b.states[k]);
  }
}

TEST(Simulate, ImpactFiresOncePerCrossing) {
  // The post-impact state of the rimless wheel lies strictly behind S-, and the
  // compass gait's lands on S- itself; neither may re-fire at the same instant.
  const auto cg = hroa::builtin("compass-gait");
  const auto traj = hroa::simulate(cg, vec({0.25, -0.2, -0.4, -1.0}), nullptr, 4.0);
  for (std::size_t k = 1; k < traj.impacts.size(); ++k)
    EXPECT_GT(traj.impacts[k].time - traj.impacts[k - 1].time, 0.1);
}

TEST(Simulate, CsvExport) {
  const auto rw = hroa::builtin("rimless-wheel");
  const auto traj = hroa::simulate(rw, vec({0.0, 0.4}), nullptr, 2.0);
  std::ostringstream os;
  traj.write_csv(os);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "t,x1,x2,impact");
  int rows = 0, flagged = 0;
  for (std::string line; std::getline(in, line); ++rows)
    if (line.back() == '1') ++flagged;
  EXPECT_EQ(rows, static_cast<int>(traj.times.size()));
  EXPECT_EQ(flagged, static_cast<int>(traj.impacts.size()));
}

TEST(Simulate, RejectsBadHorizon) {
  const auto vdp = hroa::builtin("van-der-pol");
  EXPECT_THROW(hroa::simulate(vdp, vec({1, 0}), nullptr, 0.0), hroa::InvalidArgument);
}
