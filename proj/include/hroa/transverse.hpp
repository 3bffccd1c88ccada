#pragma once

// Transversal surface families S(tau) = {y : z(tau)'(y - x*(tau)) = 0}, the
// coordinates (x_perp, tau) they induce, the exact transverse dynamics and the
// transverse linearization.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <json.hpp>

#include "hroa/hermite.hpp"
#include "hroa/orbit.hpp"

namespace hroa {

enum class SurfaceStrategy { orthogonal, radial, vertical, optimized };

inline std::string to_string(SurfaceStrategy s) {
  switch (s) {
    case SurfaceStrategy::orthogonal: return "orthogonal";
    case SurfaceStrategy::radial: return "radial";
    case SurfaceStrategy::vertical: return "vertical";
    case SurfaceStrategy::optimized: return "optimized";
  }
  return "?";
}

inline SurfaceStrategy surface_strategy_from_string(const std::string& s) {
  if (s == "orthogonal") return SurfaceStrategy::orthogonal;
  if (s == "radial") return SurfaceStrategy::radial;
  if (s == "vertical") return SurfaceStrategy::vertical;
  if (s == "optimized") return SurfaceStrategy::optimized;
  throw InvalidArgument("unknown surface strategy '" + s + "'");
}

struct SurfaceOptions {
  SurfaceStrategy strategy = SurfaceStrategy::orthogonal;
  Vec center;                    // radial surfaces; defaults to the origin
  int optimize_iterations = 150;
  double softmin_sharpness = 20.0;
  int transport_steps = 4000;    // parallel-transport grid for n > 2
};

/// Everything about S(tau) needed to evaluate the transverse dynamics at one phase.
struct TransverseFrame {
  double tau = 0.0;
  Vec xs;    // x*(tau)
  Vec dxs;   // dx*/dtau
  Vec z, dz;
  Mat pi, dpi;  // (n-1) x n
};

struct Projection {
  Mat pi, dpi;
};

struct TransverseState {
  Vec x_perp;
  double tau = 0.0;
};

struct TransverseRates {
  Vec x_perp_dot;
  double tau_dot = 0.0;
};

class TransversalFamily {
 public:
  SurfaceStrategy strategy = SurfaceStrategy::orthogonal;
  int state_dim = 0;
  double period = 0.0;
  bool hybrid = false;
  Vec center;
  HermiteSpline z_spline;       // un-normalized z; normalized on evaluation
  HermiteSpline pi_spline;      // n > 2 only: row-major Pi after closure correction
  Mat closing_log;              // L with Pi(T) = exp(L) Pi(0) before correction
  double surrogate_value = 0.0; // min of z'f/|dz| over the control points (reporting)

  /// Unit normal and its phase derivative at tau in [0, T] (no wrapping).
  std::pair<Vec, Vec> normal(double tau) const {
    const Vec raw = z_spline.value(tau);
    const Vec draw = z_spline.derivative(tau);
    const double r = raw.norm();
    const Vec z = raw / r;
    const Vec dz = (draw - z * z.dot(draw)) / r;
    return {z, dz};
  }

  Projection projection_at(double tau) const {
    const auto [z, dz] = normal(tau);
    const int n = state_dim;
    Projection p;
    if (n == 2) {
      p.pi = Mat(1, 2);
      p.pi << -z[1], z[0];
      p.dpi = Mat(1, 2);
      p.dpi << -dz[1], dz[0];
      return p;
    }
    const Vec flat = pi_spline.value(tau);
    Mat pi = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        flat.data(), n - 1, n);
    pi = pi - (pi * z) * z.transpose();
    // Symmetric orthonormalization keeps the rows closest to the interpolant.
    Eigen::SelfAdjointEigenSolver<Mat> es(pi * pi.transpose());
    const Mat inv_sqrt = es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                         es.eigenvectors().transpose();
    p.pi = inv_sqrt * pi;
    p.dpi = -(closing_log / period) * p.pi - (p.pi * dz) * z.transpose();
    return p;
  }

  /// Frame at phase tau. For hybrid orbits tau = T gives the pre-impact frame;
  /// otherwise tau is wrapped into [0, T).
  TransverseFrame frame(const PeriodicOrbit& orbit, double tau) const {
    TransverseFrame f;
    double t = tau;
    if (hybrid) {
      t = (tau >= period && tau <= period * (1 + 1e-14)) ? period : orbit.wrap(tau);
    } else {
      t = orbit.wrap(tau);
    }
    f.tau = t;
    f.xs = orbit.state_left(t);
    f.dxs = orbit.derivative_left(t);
    std::tie(f.z, f.dz) = normal(t);
    auto p = projection_at(t);
    f.pi = std::move(p.pi);
    f.dpi = std::move(p.dpi);
    return f;
  }

  /// Radius of the largest ball in S(tau) on which the coordinate change is
  /// well posed: z'x*' / |dz|.
  double singularity_distance(const PeriodicOrbit& orbit, double tau) const {
    const auto f = frame(orbit, tau);
    const double nz = (f.pi * f.dz).norm();
    return nz == 0.0 ? INFINITY : f.z.dot(f.dxs) / nz;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = "hroa.family/1";
    j["strategy"] = to_string(strategy);
    j["state_dim"] = state_dim;
    j["period"] = period;
    j["hybrid"] = hybrid;
    j["center"] = std::vector<double>(center.data(), center.data() + center.size());
    j["phases"] = z_spline.knots();
    std::vector<std::vector<double>> zs, dzs;
    for (Eigen::Index k = 0; k < z_spline.values().cols(); ++k) {
      zs.emplace_back(z_spline.values().col(k).data(), z_spline.values().col(k).data() + state_dim);
      dzs.emplace_back(z_spline.slopes().col(k).data(), z_spline.slopes().col(k).data() + state_dim);
    }
    j["z"] = zs;
    j["dz"] = dzs;
    // JSON has no infinity; an unbounded tube is written as null.
    if (std::isfinite(surrogate_value)) j["surrogate_value"] = surrogate_value;
    else j["surrogate_value"] = nullptr;
    return j;
  }

  static TransversalFamily from_json(const nlohmann::json& j, int transport_steps = 4000);

  void build_projection(int transport_steps);
};

namespace detail {

inline double smoothstep5(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
}

inline double smoothstep5_deriv(double s) {
  if (s <= 0.0 || s >= 1.0) return 0.0;
  return 30.0 * s * s * (1.0 - s) * (1.0 - s);
}

}  // namespace detail

inline void TransversalFamily::build_projection(int transport_steps) {
  const int n = state_dim;
  closing_log = Mat::Zero(std::max(n - 1, 1), std::max(n - 1, 1));
  if (n <= 2) return;
  // Parallel transport dPi/dtau = -Pi dz z' keeps Pi z = 0 and Pi Pi' = I.
  const int steps = transport_steps;
  const double h = period / steps;
  auto rhs = [&](double t, const Mat& pi) {
    const auto [z, dz] = normal(t);
    return Mat(-(pi * dz) * z.transpose());
  };
  std::vector<Mat> pis(static_cast<std::size_t>(steps + 1));
  pis[0] = detail::hyperplane_basis(normal(0.0).first).transpose();
  for (int k = 0; k < steps; ++k) {
    const double t = k * h;
    const Mat& p = pis[static_cast<std::size_t>(k)];
    const Mat k1 = rhs(t, p);
    const Mat k2 = rhs(t + 0.5 * h, p + 0.5 * h * k1);
    const Mat k3 = rhs(t + 0.5 * h, p + 0.5 * h * k2);
    const Mat k4 = rhs(t + h, p + h * k3);
    pis[static_cast<std::size_t>(k + 1)] = p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  // Distribute the closing rotation when the end normals coincide.
  const Vec z0 = normal(0.0).first, zT = normal(period).first;
  if ((z0 - zT).norm() < 1e-9) {
    const Mat r = pis.back() * pis.front().transpose();
    if (r.determinant() < 0)
      throw Error("parallel transport closes with a reflection; no periodic frame of this orientation");
    Mat l = r.log();
    l = 0.5 * (l - l.transpose());
    closing_log = l;
  }
  std::vector<double> knots(static_cast<std::size_t>(steps + 1));
  Mat vals(n * (n - 1), steps + 1), slopes(n * (n - 1), steps + 1);
  for (int k = 0; k <= steps; ++k) {
    const double t = k == steps ? period : k * h;
    knots[static_cast<std::size_t>(k)] = t;
    const Mat corr = (-(t / period) * closing_log).exp();
    const Mat p = corr * pis[static_cast<std::size_t>(k)];
    const auto [z, dz] = normal(t);
    const Mat dp = -(closing_log / period) * p - (p * dz) * z.transpose();
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pr = p, dpr = dp;
    vals.col(k) = Eigen::Map<const Vec>(pr.data(), pr.size());
    slopes.col(k) = Eigen::Map<const Vec>(dpr.data(), dpr.size());
  }
  pi_spline = HermiteSpline(std::move(knots), std::move(vals), std::move(slopes));
}

inline TransversalFamily TransversalFamily::from_json(const nlohmann::json& j, int transport_steps) {
  if (j.value("schema", "") != "hroa.family/1") throw IoError("not a surface family file");
  TransversalFamily f;
  f.strategy = surface_strategy_from_string(j.at("strategy").get<std::string>());
  f.state_dim = j.at("state_dim").get<int>();
  f.period = j.at("period").get<double>();
  f.hybrid = j.at("hybrid").get<bool>();
  const auto c = j.at("center").get<std::vector<double>>();
  f.center = Eigen::Map<const Vec>(c.data(), static_cast<Eigen::Index>(c.size()));
  auto knots = j.at("phases").get<std::vector<double>>();
  const auto zs = j.at("z").get<std::vector<std::vector<double>>>();
  const auto dzs = j.at("dz").get<std::vector<std::vector<double>>>();
  Mat vals(f.state_dim, static_cast<Eigen::Index>(zs.size())), slopes(vals.rows(), vals.cols());
  for (std::size_t k = 0; k < zs.size(); ++k) {
    vals.col(static_cast<Eigen::Index>(k)) = Eigen::Map<const Vec>(zs[k].data(), f.state_dim);
    slopes.col(static_cast<Eigen::Index>(k)) = Eigen::Map<const Vec>(dzs[k].data(), f.state_dim);
  }
  f.z_spline = HermiteSpline(std::move(knots), std::move(vals), std::move(slopes));
  const auto sv = j.find("surrogate_value");
  f.surrogate_value = (sv == j.end() || sv->is_null()) ? INFINITY : sv->get<double>();
  f.build_projection(transport_steps);
  return f;
}

namespace detail {

/// Sign-corrected unit normal of an impact surface so that it points along the flow.
inline Vec aligned_normal(const SwitchingSurface& s, int direction) {
  return s.normal / s.normal.norm() * static_cast<double>(direction);
}

/// Orthogonal surfaces, blended toward the switching-surface normals near the
/// ends of a hybrid orbit. Returns raw z and dz/dtau at the orbit knots.
inline std::pair<Mat, Mat> orthogonal_normals(const PeriodicOrbit& orbit, const HybridSystem& sys) {
  const auto& kn = orbit.spline.knots();
  const int n = orbit.state_dim;
  const auto nk = static_cast<Eigen::Index>(kn.size());
  Mat z(n, nk), dz(n, nk);
  std::vector<Vec> fhat(kn.size()), dfhat(kn.size());
  for (Eigen::Index k = 0; k < nk; ++k) {
    const Vec x = orbit.spline.values().col(k);
    const Vec u = orbit.nominal_input(kn[static_cast<std::size_t>(k)]);
    const Vec f = sys.vector_field(x, u);
    const Vec jf = field_jacobian(sys, x, u).dx * f;
    const Vec fh = f / f.norm();
    fhat[static_cast<std::size_t>(k)] = fh;
    dfhat[static_cast<std::size_t>(k)] = (jf - fh * fh.dot(jf)) / f.norm();
  }
  if (!orbit.hybrid) {
    for (Eigen::Index k = 0; k < nk; ++k) {
      z.col(k) = fhat[static_cast<std::size_t>(k)];
      dz.col(k) = dfhat[static_cast<std::size_t>(k)];
    }
    return {z, dz};
  }
  const Vec c_post = aligned_normal(sys.impact->arrival, sys.impact->direction);
  const Vec c_pre = aligned_normal(sys.impact->departure, sys.impact->direction);
  // Blend windows: as long as the surface normal keeps at least half of its
  // end-point alignment with the flow, capped at a quarter period.
  auto window = [&](const Vec& c, bool from_start) {
    const double a0 = c.dot(from_start ? fhat.front() : fhat.back());
    if (a0 <= 0) throw Error("switching surface is not crossed along the flow (grazing orbit)");
    double width = 0.0;
    for (std::size_t i = 0; i < kn.size(); ++i) {
      const std::size_t k = from_start ? i : kn.size() - 1 - i;
      if (c.dot(fhat[k]) < 0.5 * a0) break;
      width = from_start ? kn[k] : orbit.period - kn[k];
    }
    return std::clamp(width, orbit.period / 200.0, orbit.period / 4.0);
  };
  const double w0 = window(c_post, true), w1 = window(c_pre, false);
  for (Eigen::Index k = 0; k < nk; ++k) {
    const double t = kn[static_cast<std::size_t>(k)];
    const double b0 = 1.0 - smoothstep5(t / w0), db0 = -smoothstep5_deriv(t / w0) / w0;
    const double b1 = 1.0 - smoothstep5((orbit.period - t) / w1),
                 db1 = smoothstep5_deriv((orbit.period - t) / w1) / w1;
    const Vec& fh = fhat[static_cast<std::size_t>(k)];
    const Vec& dfh = dfhat[static_cast<std::size_t>(k)];
    const double wf = 1.0 - b0 - b1;
    z.col(k) = wf * fh + b0 * c_post + b1 * c_pre;
    dz.col(k) = wf * dfh - (db0 + db1) * fh + db0 * c_post + db1 * c_pre;
  }
  return {z, dz};
}

/// Soft-min of log(z'f / |dz|) over control points and midpoints of a
/// Hermite curve through the control normals.
struct SurfaceSurrogate {
  const PeriodicOrbit* orbit;
  std::vector<double> phases;    // control phases (K + 1)
  std::vector<double> eval_phases;
  std::vector<Vec> eval_f;
  bool periodic;
  double sharpness;

  HermiteSpline curve(const Mat& zc) const {
    return HermiteSpline::from_values(phases, zc, periodic);
  }

  /// Returns (soft objective, hard min of z'f/|dz|, min transversality z'f/|f|).
  std::tuple<double, double, double> evaluate(const Mat& zc) const {
    const auto sp = curve(zc);
    double acc = 0.0, hard = INFINITY, trans = INFINITY;
    std::vector<double> vals(eval_phases.size());
    double vmin = INFINITY;
    for (std::size_t i = 0; i < eval_phases.size(); ++i) {
      const Vec raw = sp.value(eval_phases[i]);
      const Vec draw = sp.derivative(eval_phases[i]);
      const double r = raw.norm();
      const Vec z = raw / r;
      const Vec dz = (draw - z * z.dot(draw)) / r;
      const double zf = z.dot(eval_f[i]);
      trans = std::min(trans, zf / eval_f[i].norm());
      if (zf <= 0) return {-INFINITY, 0.0, trans};
      const double v = std::log(zf) - std::log(std::max(dz.norm(), 1e-12));
      vals[i] = v;
      vmin = std::min(vmin, v);
      hard = std::min(hard, zf / std::max(dz.norm(), 1e-12));
    }
    for (double v : vals) acc += std::exp(-sharpness * (v - vmin));
    return {vmin - std::log(acc) / sharpness, hard, trans};
  }
};

}  // namespace detail

inline TransversalFamily make_surfaces(const PeriodicOrbit& orbit, const HybridSystem& sys,
                                       const SurfaceOptions& opts = {}) {
  const int n = orbit.state_dim;
  if (n != sys.state_dim) throw DimensionError("make_surfaces: orbit and system disagree on dimension");
  TransversalFamily fam;
  fam.strategy = opts.strategy;
  fam.state_dim = n;
  fam.period = orbit.period;
  fam.hybrid = orbit.hybrid;
  fam.center = opts.center.size() == n ? opts.center : Vec::Zero(n);
  const auto& kn = orbit.spline.knots();
  const auto nk = static_cast<Eigen::Index>(kn.size());

  switch (opts.strategy) {
    case SurfaceStrategy::orthogonal: {
      auto [z, dz] = detail::orthogonal_normals(orbit, sys);
      fam.z_spline = HermiteSpline(kn, std::move(z), std::move(dz));
      break;
    }
    case SurfaceStrategy::radial: {
      if (n != 2) throw InvalidArgument("radial surfaces are defined for planar systems");
      if (orbit.hybrid) throw InvalidArgument("radial surfaces cannot be aligned with switching surfaces");
      Mat z(2, nk), dz(2, nk);
      double sign = 0.0;
      for (Eigen::Index k = 0; k < nk; ++k) {
        const Vec r = orbit.spline.values().col(k) - fam.center;
        const Vec f = orbit.spline.slopes().col(k);
        const double rn = r.norm();
        if (rn < 1e-9) throw Error("radial center lies on the orbit");
        Vec jr(2), jf(2);
        jr << -r[1], r[0];
        jf << -f[1], f[0];
        if (sign == 0.0) sign = jr.dot(f) >= 0 ? 1.0 : -1.0;
        const Vec zk = sign * jr / rn;
        z.col(k) = zk;
        dz.col(k) = (sign * jf - zk * zk.dot(sign * jf)) / rn;
      }
      fam.z_spline = HermiteSpline(kn, std::move(z), std::move(dz));
      break;
    }
    case SurfaceStrategy::vertical: {
      Mat z = Mat::Zero(n, nk), dz = Mat::Zero(n, nk);
      z.row(0).setOnes();
      fam.z_spline = HermiteSpline(kn, std::move(z), std::move(dz));
      break;
    }
    case SurfaceStrategy::optimized: {
      const int kc = orbit.num_samples;
      detail::SurfaceSurrogate sur;
      sur.orbit = &orbit;
      sur.periodic = !orbit.hybrid;
      sur.sharpness = opts.softmin_sharpness;
      for (int j = 0; j <= kc; ++j) sur.phases.push_back(j == kc ? orbit.period : orbit.period * j / kc);
      for (int j = 0; j < 2 * kc; ++j) sur.eval_phases.push_back(orbit.period * j / (2 * kc));
      if (orbit.hybrid) sur.eval_phases.push_back(orbit.period);
      for (double t : sur.eval_phases) sur.eval_f.push_back(orbit.derivative_left(t));
      // Start from the (aligned) orthogonal family sampled at the control phases.
      auto [z0, dz0] = detail::orthogonal_normals(orbit, sys);
      const HermiteSpline init(kn, z0, dz0);
      Mat zc(n, kc + 1);
      for (int j = 0; j <= kc; ++j) {
        const Vec v = init.value(sur.phases[static_cast<std::size_t>(j)]);
        zc.col(j) = v / v.norm();
      }
      if (!orbit.hybrid) zc.col(kc) = zc.col(0);
      auto free_cols = [&](int j) { return orbit.hybrid ? (j > 0 && j < kc) : (j < kc); };
      auto sync = [&](Mat& m) {
        for (int j = 0; j <= kc; ++j) m.col(j) /= m.col(j).norm();
        if (!orbit.hybrid) m.col(kc) = m.col(0);
      };
      auto [obj, hard, trans] = sur.evaluate(zc);
      double step = 0.05;
      const double fd = 1e-6;
      for (int it = 0; it < opts.optimize_iterations && step > 1e-6; ++it) {
        Mat grad = Mat::Zero(n, kc + 1);
        for (int j = 0; j <= kc; ++j) {
          if (!free_cols(j)) continue;
          for (int i = 0; i < n; ++i) {
            Mat zp = zc, zm = zc;
            zp(i, j) += fd;
            zm(i, j) -= fd;
            if (!orbit.hybrid && j == 0) {
              zp(i, kc) += fd;
              zm(i, kc) -= fd;
            }
            grad(i, j) = (std::get<0>(sur.evaluate(zp)) - std::get<0>(sur.evaluate(zm))) / (2 * fd);
          }
          // Tangential part only (unit-norm constraint).
          grad.col(j) -= zc.col(j) * zc.col(j).dot(grad.col(j));
        }
        const double gn = grad.norm();
        if (!(gn > 0) || !std::isfinite(gn)) break;
        bool accepted = false;
        while (step > 1e-6) {
          Mat trial = zc + (step / gn) * grad;
          sync(trial);
          const auto [o2, h2, t2] = sur.evaluate(trial);
          if (o2 > obj) {
            zc = trial;
            obj = o2;
            hard = h2;
            trans = t2;
            step *= 1.5;
            accepted = true;
            break;
          }
          step *= 0.5;
        }
        if (!accepted) break;
      }
      fam.surrogate_value = hard;
      // Slopes consistent with the surrogate's curve.
      const auto sp = sur.curve(zc);
      fam.z_spline = sp;
      break;
    }
  }

  fam.build_projection(opts.transport_steps);

  // Transversality and impact alignment checks on the dense knots.
  for (Eigen::Index k = 0; k < nk; ++k) {
    const double t = kn[static_cast<std::size_t>(k)];
    const Vec z = fam.normal(t).first;
    const Vec f = orbit.spline.slopes().col(k);
    if (!(z.dot(f) > 1e-9 * f.norm())) {
      // Backward motion is admissible only for vertical surfaces on the
      // rimless wheel, whose orbit always moves forward.
      throw Error("transversality violated at phase " + std::to_string(t));
    }
  }
  if (orbit.hybrid) {
    const Vec c_post = detail::aligned_normal(sys.impact->arrival, sys.impact->direction);
    const Vec c_pre = detail::aligned_normal(sys.impact->departure, sys.impact->direction);
    if ((fam.normal(0.0).first - c_post).norm() > 1e-9 || (fam.normal(orbit.period).first - c_pre).norm() > 1e-9)
      throw Error("surface family is not aligned with the switching surfaces");
  }
  double smin = INFINITY;
  for (double t : orbit.sample_phases()) smin = std::min(smin, fam.singularity_distance(orbit, t));
  if (fam.strategy != SurfaceStrategy::optimized) fam.surrogate_value = smin;
  return fam;
}

inline Projection projection(const TransversalFamily& fam, double tau) { return fam.projection_at(tau); }

/// Reconstruction x = x*(tau) + Pi(tau)' x_perp.
inline Vec from_transverse(const TransversalFamily& fam, const PeriodicOrbit& orbit, const Vec& x_perp, double tau) {
  const auto f = fam.frame(orbit, tau);
  if (x_perp.size() != f.pi.rows()) throw DimensionError("from_transverse: x_perp dimension mismatch");
  return f.xs + f.pi.transpose() * x_perp;
}

/// Solves z(tau)'(x - x*(tau)) = 0 for the phase nearest to the hint (or the
/// nearest orbit sample) on which the coordinate change is well posed.
inline TransverseState to_transverse(const TransversalFamily& fam, const PeriodicOrbit& orbit, const Vec& x,
                                     std::optional<double> hint = std::nullopt) {
  if (x.size() != fam.state_dim) throw DimensionError("to_transverse: state dimension mismatch");
  const double T = orbit.period;
  auto g = [&](double t) {
    const auto [z, dz] = fam.normal(t);
    return z.dot(x - orbit.state_left(t));
  };
  auto clamp_phase = [&](double t) { return fam.hybrid ? std::clamp(t, 0.0, T) : t; };
  double t0;
  if (hint) {
    t0 = fam.hybrid ? std::clamp(*hint, 0.0, T) : *hint;
  } else {
    const Mat& v = orbit.spline.values();
    Eigen::Index best = 0;
    (v.colwise() - x).colwise().squaredNorm().minCoeff(&best);
    t0 = orbit.spline.knots()[static_cast<std::size_t>(best)];
  }
  // Bracket a root with g decreasing in tau (g' = -denominator < 0).
  const double h = T / 400.0;
  double a = t0, b = t0;
  double ga = g(t0), gb = ga;
  const double tol = 1e-12 * (1.0 + x.norm());
  if (std::abs(ga) <= tol * 1e-3) {
    a = b = t0;
  } else {
    bool found = false;
    const int max_steps = fam.hybrid ? 401 : 200;
    if (ga > 0) {
      for (int i = 0; i < max_steps; ++i) {
        const double nb = clamp_phase(b + h);
        if (nb == b) break;
        const double gn = g(nb);
        a = b;
        ga = gb;
        b = nb;
        gb = gn;
        if (gb <= 0) {
          found = true;
          break;
        }
      }
      if (!found && fam.hybrid && b == T && std::abs(gb) <= tol) found = true, a = b, ga = gb;
    } else {
      for (int i = 0; i < max_steps; ++i) {
        const double na = clamp_phase(a - h);
        if (na == a) break;
        const double gn = g(na);
        b = a;
        gb = ga;
        a = na;
        ga = gn;
        if (ga >= 0) {
          found = true;
          break;
        }
      }
      if (!found && fam.hybrid && a == 0.0 && std::abs(ga) <= tol) found = true, b = a, gb = ga;
    }
    if (!found) throw OutOfTubeError("no transversal surface through the state");
  }
  // Safeguarded Newton inside [a, b].
  double t = (a == b) ? a : (ga == gb ? 0.5 * (a + b) : a + (b - a) * ga / (ga - gb));
  for (int it = 0; it < 100 && b - a > 0; ++it) {
    const auto f = fam.frame(orbit, t);
    const Vec d = x - f.xs;
    const double gt = f.z.dot(d);
    const double dg = f.dz.dot(d) - f.z.dot(f.dxs);
    if (gt == 0.0) break;
    if (gt > 0) a = t;
    else b = t;
    double tn = t - gt / dg;
    if (!(tn > a && tn < b) || !std::isfinite(tn)) tn = 0.5 * (a + b);
    if (std::abs(tn - t) <= 1e-15 * (1.0 + std::abs(t))) {
      t = tn;
      break;
    }
    t = tn;
  }
  const auto f = fam.frame(orbit, t);
  const Vec d = x - f.xs;
  const double den = f.z.dot(f.dxs) - f.dz.dot(d);
  if (!(den > 0)) throw OutOfTubeError("state lies beyond the coordinate singularity");
  double tau = t;
  if (!fam.hybrid) tau = orbit.wrap(t);
  return {f.pi * d, tau};
}

/// Exact transverse dynamics:
///   tau_dot = z'f(x) / (z'f* - dz'Pi'x_perp)
///   x_perp_dot = tau_dot dPi Pi' x_perp + Pi f(x) - Pi f* tau_dot.
inline TransverseRates transverse_flow(const TransversalFamily& fam, const PeriodicOrbit& orbit,
                                       const HybridSystem& sys, const Vec& x_perp, double tau, const Vec& u) {
  const auto fr = fam.frame(orbit, tau);
  if (x_perp.size() != fr.pi.rows()) throw DimensionError("transverse_flow: x_perp dimension mismatch");
  const Vec x = fr.xs + fr.pi.transpose() * x_perp;
  const Vec f = sys.vector_field(x, u);
  const double den = fr.z.dot(fr.dxs) - fr.dz.dot(fr.pi.transpose() * x_perp);
  if (den < 1e-9) throw SingularityError("transverse coordinate change is singular (denominator " + std::to_string(den) + ")");
  const double tau_dot = fr.z.dot(f) / den;
  TransverseRates r;
  r.tau_dot = tau_dot;
  r.x_perp_dot = tau_dot * (fr.dpi * fr.pi.transpose() * x_perp) + fr.pi * f - fr.pi * fr.dxs * tau_dot;
  return r;
}

/// Impact update x_perp+ = Pi(0)[Delta(x*(T-) + Pi(T)'x_perp-) - x*(0)].
inline Vec transverse_impact(const TransversalFamily& fam, const PeriodicOrbit& orbit, const HybridSystem& sys,
                             const Vec& x_perp) {
  if (!fam.hybrid || !sys.impact) throw InvalidArgument("transverse_impact needs a hybrid orbit");
  const auto pre = fam.frame(orbit, orbit.period);
  const auto post = fam.frame(orbit, 0.0);
  const Vec x = pre.xs + pre.pi.transpose() * x_perp;
  return post.pi * (sys.impact->map(x) - post.xs);
}

class TransverseLTV {
 public:
  int dim = 0;     // n - 1
  int inputs = 0;  // m
  double period = 0.0;
  bool hybrid = false;
  std::vector<double> phases;
  std::vector<Mat> a, b;
  std::optional<Mat> a_jump;  // A_d at the impact
  HermiteSpline a_spline, b_spline;

  Mat A(double tau) const { return unflatten(a_spline.value(clamp(tau)), dim, dim); }
  Mat B(double tau) const { return unflatten(b_spline.value(clamp(tau)), dim, inputs); }

  void build_splines() {
    const auto np = static_cast<Eigen::Index>(phases.size());
    Mat av(dim * dim, np), bv(std::max(dim * inputs, 1), np);
    bv.setZero();
    for (Eigen::Index k = 0; k < np; ++k) {
      av.col(k) = flatten(a[static_cast<std::size_t>(k)]);
      if (inputs > 0) bv.col(k) = flatten(b[static_cast<std::size_t>(k)]);
    }
    a_spline = HermiteSpline::from_values(phases, av, !hybrid);
    b_spline = HermiteSpline::from_values(phases, bv, !hybrid);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = "hroa.ltv/1";
    j["dim"] = dim;
    j["inputs"] = inputs;
    j["period"] = period;
    j["hybrid"] = hybrid;
    j["phases"] = phases;
    std::vector<std::vector<double>> as, bs;
    for (std::size_t k = 0; k < phases.size(); ++k) {
      const Vec fa = flatten(a[k]);
      as.emplace_back(fa.data(), fa.data() + fa.size());
      const Vec fb = inputs > 0 ? flatten(b[k]) : Vec(0);
      bs.emplace_back(fb.data(), fb.data() + fb.size());
    }
    j["A"] = as;
    j["B"] = bs;
    if (a_jump) {
      const Vec fj = flatten(*a_jump);
      j["Ad"] = std::vector<double>(fj.data(), fj.data() + fj.size());
    } else {
      j["Ad"] = nullptr;
    }
    return j;
  }

  static TransverseLTV from_json(const nlohmann::json& j) {
    if (j.value("schema", "") != "hroa.ltv/1") throw IoError("not a transverse linearization file");
    TransverseLTV l;
    l.dim = j.at("dim").get<int>();
    l.inputs = j.at("inputs").get<int>();
    l.period = j.at("period").get<double>();
    l.hybrid = j.at("hybrid").get<bool>();
    l.phases = j.at("phases").get<std::vector<double>>();
    const auto as = j.at("A").get<std::vector<std::vector<double>>>();
    const auto bs = j.at("B").get<std::vector<std::vector<double>>>();
    for (std::size_t k = 0; k < l.phases.size(); ++k) {
      l.a.push_back(unflatten(Eigen::Map<const Vec>(as[k].data(), static_cast<Eigen::Index>(as[k].size())), l.dim, l.dim));
      l.b.push_back(l.inputs > 0 ? unflatten(Eigen::Map<const Vec>(bs[k].data(), static_cast<Eigen::Index>(bs[k].size())),
                                             l.dim, l.inputs)
                                 : Mat(l.dim, 0));
    }
    if (!j.at("Ad").is_null()) {
      const auto ad = j.at("Ad").get<std::vector<double>>();
      l.a_jump = unflatten(Eigen::Map<const Vec>(ad.data(), static_cast<Eigen::Index>(ad.size())), l.dim, l.dim);
    }
    l.build_splines();
    return l;
  }

  static Vec flatten(const Mat& m) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m;
    return Eigen::Map<const Vec>(r.data(), r.size());
  }
  static Mat unflatten(const Vec& v, int rows, int cols) {
    if (rows * cols == 0) return Mat(rows, cols);
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), rows,
                                                                                                      cols);
  }

 private:
  double clamp(double tau) const {
    if (hybrid) return std::clamp(tau, 0.0, period);
    double r = std::fmod(tau, period);
    return r < 0 ? r + period : r;
  }
};

/// Linear part of the transverse dynamics at x_perp = 0 (tau_dot dependence included).
inline std::pair<Mat, Mat> transverse_jacobians(const TransversalFamily& fam, const PeriodicOrbit& orbit,
                                                const HybridSystem& sys, double tau) {
  const auto fr = fam.frame(orbit, tau);
  const Vec u = orbit.nominal_input(tau);
  const auto jac = field_jacobian(sys, fr.xs, u);
  const double den0 = fr.z.dot(fr.dxs);
  const Vec f = sys.vector_field(fr.xs, u);
  const double num0 = fr.z.dot(f);
  // d tau_dot / d x_perp and d tau_dot / d u at x_perp = 0.
  const Eigen::RowVectorXd dtau_dx = (fr.z.transpose() * jac.dx * fr.pi.transpose()) / den0 +
                                     num0 * (fr.dz.transpose() * fr.pi.transpose()) / (den0 * den0);
  const Eigen::RowVectorXd dtau_du = (fr.z.transpose() * jac.du) / den0;
  const double tau_dot0 = num0 / den0;
  Mat a = tau_dot0 * fr.dpi * fr.pi.transpose() + fr.pi * jac.dx * fr.pi.transpose() - fr.pi * fr.dxs * dtau_dx;
  Mat b = fr.pi * jac.du - fr.pi * fr.dxs * dtau_du;
  return {a, b};
}

inline Mat transverse_jump_matrix(const TransversalFamily& fam, const PeriodicOrbit& orbit, const HybridSystem& sys) {
  const auto pre = fam.frame(orbit, orbit.period);
  const auto post = fam.frame(orbit, 0.0);
  return post.pi * impact_jacobian(sys, pre.xs) * pre.pi.transpose();
}

/// Transverse linearization on a uniform grid of `grid` intervals (defaults to the orbit knots).
inline TransverseLTV linearize(const TransversalFamily& fam, const PeriodicOrbit& orbit, const HybridSystem& sys,
                               int grid = 0) {
  TransverseLTV l;
  l.dim = fam.state_dim - 1;
  l.inputs = sys.input_dim;
  l.period = orbit.period;
  l.hybrid = orbit.hybrid;
  const int m = grid > 0 ? grid : static_cast<int>(orbit.spline.knots().size()) - 1;
  for (int k = 0; k <= m; ++k) {
    const double t = k == m ? orbit.period : orbit.period * k / m;
    l.phases.push_back(t);
    auto [a, b] = transverse_jacobians(fam, orbit, sys, t);
    l.a.push_back(std::move(a));
    l.b.push_back(std::move(b));
  }
  if (orbit.hybrid) l.a_jump = transverse_jump_matrix(fam, orbit, sys);
  l.build_splines();
  return l;
}

}  // namespace hroa
