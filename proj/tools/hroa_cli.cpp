// hroa: pipeline driver. Each subcommand reads its predecessors' artifacts from
// the output directory and writes its own; manifest.json records the settings.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "hroa/audit.hpp"
#include "hroa/sos_verifier.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Settings {
  std::string system;
  std::string params_text;  // empty: built-in defaults
  std::string surfaces;
  int samples = 40;
  unsigned taylor_order = 3;
  int rho_degree = 0;
  int iterations = 10;
  std::uint64_t seed = 1;
  int samples_per_phase = 10000;
  int soundness = 0;
  std::optional<hroa::LqrWeights> weights;

  hroa::SystemParams params() const {
    return params_text.empty() ? hroa::SystemParams{} : hroa::SystemParams::parse(params_text);
  }
};

std::vector<double> flat(const hroa::Mat& m) { return {m.data(), m.data() + m.size()}; }

hroa::Mat square(const json& j) {
  const auto v = j.get<std::vector<double>>();
  const auto d = static_cast<int>(std::lround(std::sqrt(static_cast<double>(v.size()))));
  if (d * d != static_cast<int>(v.size())) throw hroa::IoError("weight matrix is not square");
  return Eigen::Map<const hroa::Mat>(v.data(), d, d);
}

json manifest_json(const Settings& s) {
  json j;
  j["schema"] = "hroa.manifest/1";
  j["system"] = s.system;
  j["params"] = s.params_text.empty() ? hroa::SystemParams{}.to_text() : s.params_text;
  j["surfaces"] = s.surfaces;
  j["samples"] = s.samples;
  j["taylor_order"] = s.taylor_order;
  j["rho_degree"] = s.rho_degree;
  j["iterations"] = s.iterations;
  j["seed"] = s.seed;
  j["samples_per_phase"] = s.samples_per_phase;
  j["soundness_samples"] = s.soundness;
  if (s.weights) j["weights"] = {{"Q", flat(s.weights->q)}, {"R", flat(s.weights->r)}, {"Qi", flat(s.weights->qi)}};
  return j;
}

void apply_manifest(Settings& s, const json& j) {
  if (j.value("schema", "") != "hroa.manifest/1") throw hroa::IoError("manifest has an unknown schema");
  s.system = j.value("system", s.system);
  s.params_text = j.value("params", s.params_text);
  s.surfaces = j.value("surfaces", s.surfaces);
  s.samples = j.value("samples", s.samples);
  s.taylor_order = j.value("taylor_order", s.taylor_order);
  s.rho_degree = j.value("rho_degree", s.rho_degree);
  s.iterations = j.value("iterations", s.iterations);
  s.seed = j.value("seed", s.seed);
  s.samples_per_phase = j.value("samples_per_phase", s.samples_per_phase);
  s.soundness = j.value("soundness_samples", s.soundness);
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    s.weights = hroa::LqrWeights{square(w.at("Q")), square(w.at("R")), square(w.at("Qi"))};
  }
}

std::string default_surfaces(const std::string& system) {
  if (system == "rimless-wheel") return "vertical";
  if (system == "compass-gait") return "optimized";
  return "orthogonal";
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw hroa::IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw hroa::IoError("cannot write " + p.string());
  f << text;
}

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

class Pipeline {
 public:
  Pipeline(fs::path out, Settings s, int jobs) : out_(std::move(out)), s_(std::move(s)), jobs_(jobs) {}

  const Settings& settings() const { return s_; }

  fs::path path(const char* name) const { return out_ / name; }

  fs::path require(const char* name, const char* producer) const {
    const auto p = path(name);
    if (!fs::exists(p))
      throw DependencyError("missing prerequisite " + p.string() + "; run the '" + producer + "' subcommand first");
    return p;
  }

  const hroa::HybridSystem& system() {
    if (!sys_) {
      if (s_.system.empty()) throw hroa::InvalidArgument("no system given; pass --system or run 'find-cycle' first");
      sys_ = hroa::builtin(s_.system, s_.params());
    }
    return *sys_;
  }

  // --- stages -------------------------------------------------------------

  void find_cycle() {
    hroa::LimitCycleOptions o;
    o.samples = s_.samples;
    const auto orbit = hroa::find_limit_cycle(system(), hroa::default_initial_state(system()), o);
    std::ostringstream csv;
    orbit.write_csv(csv);
    write_file(path("orbit.csv"), csv.str());
    json j;
    j["schema"] = "hroa.orbit/1";
    j["system"] = s_.system;
    j["period"] = orbit.period;
    j["hybrid"] = orbit.hybrid;
    j["impact_phases"] = orbit.impact_phases;
    j["samples"] = orbit.num_samples;
    j["knots"] = orbit.spline.knots().size();
    j["closure_residual"] = orbit.closure_residual;
    if (orbit.energy) j["energy"] = *orbit.energy;
    j["data"] = "orbit.csv";
    write_json(path("orbit.json"), j);
    orbit_ = orbit;
    std::cout << "orbit: period " << orbit.period << ", closure residual " << orbit.closure_residual << "\n";
  }

  void surfaces() {
    if (!orbit_) require("orbit.csv", "find-cycle");
    hroa::SurfaceOptions o;
    o.strategy = hroa::surface_strategy_from_string(s_.surfaces);
    const auto fam = hroa::make_surfaces(orbit(), system(), o);
    write_json(path("family.json"), fam.to_json());
    fam_ = fam;
    std::cout << "surfaces: " << s_.surfaces << "\n";
  }

  void linearize() {
    if (!fam_) require("family.json", "surfaces");
    const auto ltv = hroa::linearize(family(), orbit(), system());
    json j = ltv.to_json();
    j["open_loop_spectral_radius"] = hroa::detail::spectral_radius(hroa::transverse_monodromy(ltv));
    write_json(path("ltv.json"), j);
    ltv_ = ltv;
    std::cout << "linearization: open-loop monodromy spectral radius "
              << j["open_loop_spectral_radius"].get<double>() << "\n";
  }

  void design_lqr() {
    if (!ltv_) require("ltv.json", "linearize");
    const auto& l = ltv();
    if (!s_.weights) s_.weights = hroa::LqrWeights::defaults(l.dim, l.inputs);
    const auto& w = *s_.weights;
    if (w.q.rows() != l.dim || w.qi.rows() != l.dim || w.r.rows() != l.inputs)
      throw hroa::DimensionError("manifest weight matrices do not match the transverse dimension");
    json j;
    j["schema"] = "hroa.lqr/1";
    j["Q"] = flat(w.q);
    j["R"] = flat(w.r);
    j["Qi"] = flat(w.qi);
    double radius = 0.0;
    if (l.inputs > 0) {
      const auto p = hroa::jump_riccati(l, w.q, w.r, w.qi);
      const auto c = hroa::feedback(p, l, w);
      radius = hroa::detail::spectral_radius(
          hroa::transverse_monodromy(l, [&](double t) -> hroa::Mat { return l.A(t) - l.B(t) * c.gain(t); }));
      j["P"] = p.to_json();
      p_ = p;
      ctrl_ = c;
    } else {
      const auto p = hroa::periodic_lyapunov(l, w.q, w.qi);
      radius = hroa::detail::spectral_radius(hroa::transverse_monodromy(l));
      j["P"] = p.to_json();
      p_ = p;
    }
    j["closed_loop_spectral_radius"] = radius;
    write_json(path("lqr.json"), j);
    std::cout << "lqr: closed-loop monodromy spectral radius " << radius << "\n";
  }

  void verify() {
    if (!p_) require("lqr.json", "design-lqr");
    hroa::VerifierOptions o;
    o.taylor_order = s_.taylor_order;
    o.rho_degree = s_.rho_degree;
    o.max_iterations = s_.iterations;
    o.jobs = jobs_;
    o.seed = s_.seed;
    const auto& p = lyapunov();
    o.q_trace = s_.weights ? s_.weights->q.trace() : 0.0;
    o.on_iteration = [](const json& m) {
      std::cout << "  iteration " << m.value("iteration", 0) << " (" << m.value("step", "") << "): integral "
                << m.value("integral", 0.0) << "\n";
    };
    const auto cert = hroa::verify_roa(family(), orbit(), system(), p, controller(), o);
    write_json(path("certificate.json"), cert.to_json());
    record_timing("verify", cert.to_json(true).at("audit"));
    std::cout << "certificate: integral of rho " << cert.rho.integral() << ", volume "
              << hroa::certified_volume(cert, family(), orbit()) << "\n";
  }

  void audit() {
    const auto cert = certificate();
    std::ofstream csv(path("audit.csv"), std::ios::binary);
    if (!csv) throw hroa::IoError("cannot write " + path("audit.csv").string());
    hroa::BoundaryAuditOptions bo;
    bo.samples_per_phase = s_.samples_per_phase;
    bo.seed = s_.seed;
    bo.jobs = jobs_;
    bo.csv = &csv;
    const auto rep = hroa::boundary_audit(cert, family(), orbit(), system(), controller(), bo);
    json j;
    j["schema"] = "hroa.audit/1";
    j["boundary"] = rep.to_json();
    j["data"] = "audit.csv";
    if (s_.soundness > 0) {
      hroa::SoundnessOptions so;
      so.samples = s_.soundness;
      so.seed = s_.seed;
      so.jobs = jobs_;
      j["soundness"] = hroa::soundness_check(cert, family(), orbit(), system(), controller(), so).to_json();
    }
    write_json(path("audit.json"), j);
    std::cout << "audit: " << rep.samples << " boundary samples, fraction with negative dV/dt "
              << rep.fraction_negative << ", max violation " << std::max(0.0, rep.max_vdot) << "\n";
  }

  void export_plot() {
    const auto cert = certificate();
    const auto& o = orbit();
    const auto& f = family();
    {
      std::ostringstream os;
      hroa::write_region_csv(os, cert, f, o);
      write_file(path("region.csv"), os.str());
    }
    json j;
    j["schema"] = "hroa.plot/1";
    j["region"] = "region.csv";
    j["orbit"] = "orbit.csv";
    j["volume"] = hroa::certified_volume(cert, f, o);
    const auto [lo, hi] = hroa::half_width_range(cert);
    j["half_width"] = {{"min", lo}, {"max", hi}};
    if (f.state_dim == 4) {
      // two planar projections of the boundary: (theta1, theta1_dot), (theta2, theta2_dot)
      j["projections"] = json::array();
      for (const auto& [name, a, b] : {std::tuple{"projection_theta1.csv", 0, 2}, std::tuple{"projection_theta2.csv", 1, 3}}) {
        std::ostringstream os;
        os.precision(12);
        os << "tau,theta,theta_dot\n";
        for (double t : hroa::uniform_phases(o.period, 200))
          for (const auto& x : hroa::boundary_points(cert, f, o, t, 64)) os << t << ',' << x[a] << ',' << x[b] << '\n';
        write_file(path(name), os.str());
        j["projections"].push_back({{"file", name}, {"axes", {a, b}}});
      }
    }
    write_json(path("plot.json"), j);
    std::cout << "plot data written to " << out_.string() << "\n";
  }

  bool has(const char* name) const { return fs::exists(path(name)); }

 private:
  const hroa::PeriodicOrbit& orbit() {
    if (!orbit_) {
      std::istringstream is(read_file(require("orbit.csv", "find-cycle")));
      orbit_ = hroa::PeriodicOrbit::read_csv(is, system(), s_.samples);
    }
    return *orbit_;
  }

  const hroa::TransversalFamily& family() {
    if (!fam_) fam_ = hroa::TransversalFamily::from_json(json::parse(read_file(require("family.json", "surfaces"))));
    return *fam_;
  }

  const hroa::TransverseLTV& ltv() {
    if (!ltv_) ltv_ = hroa::TransverseLTV::from_json(json::parse(read_file(require("ltv.json", "linearize"))));
    return *ltv_;
  }

  const hroa::PeriodicMatrixFunction& lyapunov() {
    if (!p_) {
      const auto j = json::parse(read_file(require("lqr.json", "design-lqr")));
      p_ = hroa::PeriodicMatrixFunction::from_json(j.at("P"));
      s_.weights = hroa::LqrWeights{square(j.at("Q")), square(j.at("R")), square(j.at("Qi"))};
      if (ltv().inputs > 0) ctrl_ = hroa::feedback(*p_, ltv(), *s_.weights);
    }
    return *p_;
  }

  const hroa::TransverseController* controller() {
    lyapunov();
    return ctrl_ ? &*ctrl_ : nullptr;
  }

  hroa::Certificate certificate() {
    const auto cert = hroa::Certificate::from_json(json::parse(read_file(require("certificate.json", "verify"))));
    lyapunov();
    return cert;
  }

  void record_timing(const std::string& key, const json& value) {
    json t = has("timings.json") ? json::parse(read_file(path("timings.json"))) : json{{"schema", "hroa.timings/1"}};
    t[key] = value;
    write_json(path("timings.json"), t);
  }

  fs::path out_;
  Settings s_;
  int jobs_;
  std::optional<hroa::HybridSystem> sys_;
  std::optional<hroa::PeriodicOrbit> orbit_;
  std::optional<hroa::TransversalFamily> fam_;
  std::optional<hroa::TransverseLTV> ltv_;
  std::optional<hroa::PeriodicMatrixFunction> p_;
  std::optional<hroa::TransverseController> ctrl_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-of-attraction verification for periodic orbits of hybrid systems"};
  app.require_subcommand(1);

  std::string out = "out", system, params, surfaces, manifest;
  int samples = 40, rho_degree = 0, iters = 10, jobs = 1, spp = 10000, soundness = 0;
  unsigned taylor = 3;
  std::uint64_t seed = 1;
  auto* o_system = app.add_option("--system", system, "van-der-pol | rimless-wheel | compass-gait")
                       ->check(CLI::IsMember({"van-der-pol", "rimless-wheel", "compass-gait"}));
  auto* o_params = app.add_option("--params", params, "parameter file ([section] key = value)")->check(CLI::ExistingFile);
  auto* o_surf = app.add_option("--surfaces", surfaces, "orthogonal | radial | vertical | optimized")
                     ->check(CLI::IsMember({"orthogonal", "radial", "vertical", "optimized"}));
  auto* o_samples = app.add_option("--samples", samples, "number of verification phases K")->check(CLI::PositiveNumber);
  auto* o_taylor = app.add_option("--taylor-order", taylor, "Taylor order of the verified dynamics")->check(CLI::Range(2u, 6u));
  auto* o_rho = app.add_option("--rho-degree", rho_degree, "Bernstein degree of rho (0: constant)")->check(CLI::NonNegativeNumber);
  auto* o_iters = app.add_option("--iters", iters, "iteration cap of the V/L alternation")->check(CLI::PositiveNumber);
  auto* o_seed = app.add_option("--seed", seed, "seed for audits");
  auto* o_spp = app.add_option("--samples-per-phase", spp, "boundary audit samples per phase")->check(CLI::PositiveNumber);
  auto* o_sound = app.add_option("--soundness", soundness, "in-set states simulated by 'audit' (0: skip)")->check(CLI::NonNegativeNumber);
  app.add_option("--out", out, "output directory")->capture_default_str();
  app.add_option("--manifest", manifest, "read settings from this manifest instead of <out>/manifest.json")
      ->check(CLI::ExistingFile);
  app.add_option("--jobs", jobs, "parallel solves")->check(CLI::PositiveNumber);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"find-cycle", "locate the periodic orbit"},
      {"surfaces", "build the transversal surface family"},
      {"linearize", "transverse linearization"},
      {"design-lqr", "periodic Lyapunov / jump Riccati design"},
      {"verify", "certify a region of attraction (runs earlier stages if needed)"},
      {"audit", "boundary audit of the certificate"},
      {"export-plot", "region boundary data for plotting"}};
  for (const auto& [name, desc] : commands) app.add_subcommand(name, desc)->fallthrough();

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    fs::create_directories(out);
    Settings s;
    const fs::path mpath = manifest.empty() ? fs::path(out) / "manifest.json" : fs::path(manifest);
    if (fs::exists(mpath)) apply_manifest(s, json::parse(read_file(mpath)));
    if (o_system->count()) {
      if (!s.system.empty() && s.system != system && cmd != "find-cycle" && cmd != "verify")
        throw hroa::InvalidArgument("--system " + system + " conflicts with the manifest's " + s.system +
                                    "; start from 'find-cycle' or use a fresh --out");
      s.system = system;
    }
    if (o_params->count()) s.params_text = read_file(params);
    if (o_surf->count()) s.surfaces = surfaces;
    if (s.surfaces.empty() && !s.system.empty()) s.surfaces = default_surfaces(s.system);
    if (o_samples->count()) s.samples = samples;
    if (o_taylor->count()) s.taylor_order = taylor;
    if (o_rho->count()) s.rho_degree = rho_degree;
    if (o_iters->count()) s.iterations = iters;
    if (o_seed->count()) s.seed = seed;
    if (o_spp->count()) s.samples_per_phase = spp;
    if (o_sound->count()) s.soundness = soundness;
    if (!s.params_text.empty()) s.params();  // validate early

    Pipeline p(out, s, jobs);
    const auto start = std::chrono::steady_clock::now();
    if (cmd == "find-cycle") {
      p.find_cycle();
    } else if (cmd == "surfaces") {
      p.surfaces();
    } else if (cmd == "linearize") {
      p.linearize();
    } else if (cmd == "design-lqr") {
      p.design_lqr();
    } else if (cmd == "verify") {
      // with a system and no earlier artifacts, run the whole procedure
      const bool full = o_system->count() > 0 || !p.has("lqr.json");
      if (full) {
        p.find_cycle();
        p.surfaces();
        p.linearize();
        p.design_lqr();
      }
      p.verify();
    } else if (cmd == "audit") {
      p.audit();
    } else {
      p.export_plot();
    }
    write_json(fs::path(out) / "manifest.json", manifest_json(p.settings()));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const fs::path tp = fs::path(out) / "timings.json";
    json t = fs::exists(tp) ? json::parse(read_file(tp)) : json{{"schema", "hroa.timings/1"}};
    t["seconds"][cmd] = secs;
    write_json(tp, t);
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const hroa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
