// Acceptance checks. Prints one PASS/FAIL line per criterion; detail lines
// are indented. Exit status is nonzero if a criterion fails, unless it was
// listed with --allow-fail (the verdict line still says FAIL).

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "hroa/audit.hpp"
#include "hroa/sos_verifier.hpp"

using hroa::Mat;
using hroa::SurfaceStrategy;
using hroa::Vec;
using clk = std::chrono::steady_clock;

namespace {

int g_jobs = 1;

double since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

void detail(const std::string& s) { std::cout << "    " << s << std::endl; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Pipeline {
  hroa::HybridSystem sys;
  hroa::PeriodicOrbit orbit;
  hroa::TransversalFamily fam;
  hroa::TransverseLTV ltv;
  hroa::LqrWeights w;
  hroa::PeriodicMatrixFunction p;
  std::optional<hroa::TransverseController> ctrl;

  Pipeline(const std::string& name, SurfaceStrategy st) {
    sys = hroa::builtin(name);
    orbit = hroa::find_limit_cycle(sys, hroa::default_initial_state(sys));
    hroa::SurfaceOptions so;
    so.strategy = st;
    fam = hroa::make_surfaces(orbit, sys, so);
    ltv = hroa::linearize(fam, orbit, sys);
    w = hroa::LqrWeights::defaults(ltv.dim, ltv.inputs);
    if (ltv.inputs > 0) {
      p = hroa::jump_riccati(ltv, w.q, w.r, w.qi);
      ctrl = hroa::feedback(p, ltv, w);
    } else {
      p = hroa::periodic_lyapunov(ltv, w.q, w.qi);
    }
  }

  const hroa::TransverseController* controller() const { return ctrl ? &*ctrl : nullptr; }

  hroa::Certificate verify(int degree, bool early_impact = true) const {
    hroa::VerifierOptions o;
    o.rho_degree = degree;
    o.jobs = g_jobs;
    o.early_impact_audit = early_impact;
    return hroa::verify_roa(fam, orbit, sys, p, controller(), o);
  }

  hroa::SoundnessReport soundness(const hroa::Certificate& cert, int samples) const {
    hroa::SoundnessOptions o;
    o.samples = samples;
    o.jobs = g_jobs;
    return hroa::soundness_check(cert, fam, orbit, sys, controller(), o);
  }

  double volume(const hroa::Certificate& cert) const { return hroa::certified_volume(cert, fam, orbit); }
};

int iterations(const hroa::Certificate& cert) { return static_cast<int>(cert.metrics.size()) - 1; }

std::string describe(const hroa::Certificate& cert) {
  std::ostringstream os;
  os << "rho degree " << cert.rho.degree() << ": " << iterations(cert) << " iterations, integral "
     << fmt("%.6g", cert.rho.integral()) << ", converged " << cert.audit.value("converged", false);
  return os.str();
}

std::string soundness_line(const hroa::SoundnessReport& r) {
  std::ostringstream os;
  os << r.samples << " in-set states simulated, " << r.converged << " converged, " << r.escapes() << " escapes";
  return os.str();
}

// ---------------------------------------------------------------------------

bool ac1() {
  const Pipeline s("van-der-pol", SurfaceStrategy::orthogonal);
  const auto cert = s.verify(0);
  detail(describe(cert));
  const auto [lo, hi] = hroa::half_width_range(cert);
  const double ratio = lo / hi;
  detail("tube half-width min " + fmt("%.4g", lo) + ", max " + fmt("%.4g", hi) + ", ratio " + fmt("%.4f", ratio) +
         " (need < 0.2)");
  const auto snd = s.soundness(cert, 1000);
  detail(soundness_line(snd));
  return ratio < 0.2 && snd.escapes() == 0;
}

bool ac2() {
  const Pipeline s("van-der-pol", SurfaceStrategy::radial);
  const auto c0 = s.verify(0);
  detail(describe(c0));
  const auto c20 = s.verify(20);
  detail(describe(c20));
  const double a0 = s.volume(c0), a20 = s.volume(c20);
  detail("area constant " + fmt("%.4f", a0) + ", degree 20 " + fmt("%.4f", a20) + ", ratio " + fmt("%.3f", a20 / a0) +
         " (need >= 1.5)");
  const double inner = hroa::boundary_distance(c20, s.fam, s.orbit, Vec::Zero(2));
  detail("inner boundary distance to origin " + fmt("%.4f", inner) + " (need < 0.3)");
  const auto snd = s.soundness(c20, 1000);
  detail(soundness_line(snd));
  return a20 >= 1.5 * a0 && inner < 0.3 && snd.escapes() == 0;
}

bool ac3() {
  const Pipeline s("rimless-wheel", SurfaceStrategy::vertical);
  bool ok = true;
  double vol[2] = {0, 0};
  int i = 0;
  for (int degree : {0, 10}) {
    const auto cert = s.verify(degree);
    detail(describe(cert));
    vol[i++] = s.volume(cert);
    const auto snd = s.soundness(cert, 10000);
    detail(soundness_line(snd));
    ok = ok && snd.escapes() == 0;
  }
  detail("area constant " + fmt("%.5f", vol[0]) + ", degree 10 " + fmt("%.5f", vol[1]));
  return ok && vol[1] > vol[0];
}

bool ac4() {
  const Pipeline s("compass-gait", SurfaceStrategy::optimized);
  const double closure = s.orbit.closure_residual;
  detail("closure residual " + fmt("%.3g", closure) + " (need <= 1e-7)");
  const auto& l = s.ltv;
  const double radius = hroa::detail::spectral_radius(
      hroa::transverse_monodromy(l, [&](double t) -> Mat { return l.A(t) - l.B(t) * s.ctrl->gain(t); }));
  detail("closed-loop transverse monodromy spectral radius " + fmt("%.4f", radius));
  const auto t0 = clk::now();
  const auto cert = s.verify(6);
  detail(describe(cert) + ", " + fmt("%.1f", since(t0)) + " s");
  const bool converged = cert.audit.value("converged", false) && iterations(cert) <= 10;
  hroa::BoundaryAuditOptions bo;
  bo.samples_per_phase = 10000;
  bo.jobs = g_jobs;
  const auto rep = hroa::boundary_audit(cert, s.fam, s.orbit, s.sys, s.controller(), bo);
  const double maxv = std::max(0.0, rep.max_vdot);
  detail("boundary audit: " + std::to_string(rep.samples) + " samples over " + std::to_string(cert.phases.size()) +
         " phases, negative dV/dt fraction " + fmt("%.5f", rep.fraction_negative) + ", max violation " +
         fmt("%.3g", maxv) + " (band <= 0.026), max Taylor error " + fmt("%.3g", rep.max_taylor_error));
  return closure <= 1e-7 && radius < 1.0 && converged && rep.fraction_negative >= 0.99 && maxv <= 0.026;
}

bool ac5() {
  std::stringstream list(HROA_UNIT_SUITES);
  std::string exe;
  bool ok = true;
  const auto t0 = clk::now();
  while (std::getline(list, exe, ':')) {
    const auto t = clk::now();
    const int rc = std::system((exe + " > /dev/null 2>&1").c_str());
    const bool pass = rc == 0;
    detail(exe.substr(exe.find_last_of('/') + 1) + (pass ? " passed" : " FAILED") + " in " + fmt("%.1f", since(t)) + " s");
    ok = ok && pass;
  }
  const double total = since(t0);
  detail("total " + fmt("%.1f", total) + " s (need < 60)");
  return ok && total < 60.0;
}

bool ac6() {
  const unsigned hw = std::thread::hardware_concurrency();
  detail("hardware threads available: " + std::to_string(hw));
  const Pipeline s("compass-gait", SurfaceStrategy::optimized);
  const auto cert = s.verify(0, false);
  const auto dyn = hroa::polynomial_transverse_dynamics(s.fam, s.orbit, s.sys, cert.taylor_order, s.controller());
  auto timed = [&](int jobs) {
    double best = INFINITY;
    for (int r = 0; r < 2; ++r) {
      const auto t = clk::now();
      const auto m = hroa::l_step(cert, dyn, jobs);
      best = std::min(best, since(t));
    }
    return best;
  };
  const double t1 = timed(1), t4 = timed(4);
  detail("L-step wall time: 1 solver " + fmt("%.2f", t1) + " s, 4 solvers " + fmt("%.2f", t4) + " s, ratio " +
         fmt("%.3f", t4 / t1) + " (need <= 0.5)");
  return t4 <= 0.5 * t1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<std::string> which;
  std::vector<std::string> allow;
  g_jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("criteria", which, "AC1 .. AC6 (default: all)");
  app.add_option("--allow-fail", allow, "criteria whose FAIL does not change the exit status")->delimiter(',');
  app.add_option("--jobs", g_jobs, "parallel solves and simulations")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, bool (*)()>> all = {{"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3},
                                                              {"AC4", ac4}, {"AC5", ac5}, {"AC6", ac6}};
  const std::set<std::string> allowed(allow.begin(), allow.end());
  if (which.empty())
    for (const auto& [name, fn] : all) which.push_back(name);

  int status = 0;
  for (const auto& name : which) {
    const auto it = std::find_if(all.begin(), all.end(), [&](const auto& e) { return e.first == name; });
    if (it == all.end()) {
      std::cerr << "unknown criterion " << name << "\n";
      return 2;
    }
    const auto t0 = clk::now();
    bool pass = false;
    std::string error;
    try {
      pass = it->second();
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::cout << (pass ? "PASS " : "FAIL ") << name << " (" << fmt("%.1f", since(t0)) << " s)";
    if (!error.empty()) std::cout << ": " << error;
    std::cout << std::endl;
    if (!pass && !allowed.count(name)) status = 1;
  }
  return status;
}
