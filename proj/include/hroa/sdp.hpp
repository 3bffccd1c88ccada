#pragma once

// Primal-dual interior-point solver for block-diagonal semidefinite programs
//
//   minimize    sum_j <C_j, X_j> + c's
//   subject to  sum_j <A_ij, X_j> + a_i's = b_i,   X_j psd,  s >= 0
//
// using the homogeneous self-dual embedding, Nesterov-Todd scaling and a
// Mehrotra predictor-corrector. Infeasible problems are detected from the
// embedding and come with a Farkas witness.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "hroa/error.hpp"

namespace hroa::sdp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct Term {
  int block;  // index into blocks, or blocks.size() + k for scalar k
  int row, col;
  double value;
};

class SdpProblem {
 public:
  std::vector<int> blocks;  // psd block sizes
  int scalars = 0;          // nonnegative scalar variables

  SdpProblem() = default;
  SdpProblem(std::vector<int> block_sizes, int num_scalars) : blocks(std::move(block_sizes)), scalars(num_scalars) {
    for (int n : blocks)
      if (n <= 0) throw InvalidArgument("sdp: block sizes must be positive");
    if (scalars < 0) throw InvalidArgument("sdp: negative scalar count");
  }

  int num_constraints() const { return static_cast<int>(rhs_.size()); }
  const std::vector<double>& rhs() const { return rhs_; }
  const std::vector<std::vector<Term>>& rows() const { return rows_; }
  const std::vector<Term>& objective() const { return objective_; }

  int add_constraint(double rhs) {
    rhs_.push_back(rhs);
    rows_.emplace_back();
    return num_constraints() - 1;
  }
  void set_rhs(int i, double v) { rhs_.at(static_cast<std::size_t>(i)) = v; }

  /// Adds v to entries (r, c) and (c, r) of A_i in a psd block.
  void add_entry(int i, int block, int r, int c, double v) {
    check_entry(block, r, c);
    if (r > c) std::swap(r, c);
    rows_.at(static_cast<std::size_t>(i)).push_back({block, r, c, v});
  }
  void add_scalar(int i, int k, double v) {
    if (k < 0 || k >= scalars) throw DimensionError("sdp: scalar index out of range");
    rows_.at(static_cast<std::size_t>(i)).push_back({static_cast<int>(blocks.size()) + k, 0, 0, v});
  }
  void add_objective_entry(int block, int r, int c, double v) {
    check_entry(block, r, c);
    if (r > c) std::swap(r, c);
    objective_.push_back({block, r, c, v});
  }
  void add_objective_scalar(int k, double v) {
    if (k < 0 || k >= scalars) throw DimensionError("sdp: scalar index out of range");
    objective_.push_back({static_cast<int>(blocks.size()) + k, 0, 0, v});
  }

  /// Sparse text form in the SDPA layout. The SDPA "dual" is this problem:
  /// the c-vector line holds b, and F0 = -C. Scalars form one diagonal block.
  void write_sdpa(std::ostream& os) const {
    os.precision(17);
    os << "* block-diagonal SDP\n" << num_constraints() << "\n" << (blocks.size() + (scalars > 0 ? 1 : 0)) << "\n";
    for (int n : blocks) os << n << " ";
    if (scalars > 0) os << -scalars;
    os << "\n";
    for (double v : rhs_) os << v << " ";
    os << "\n";
    auto put = [&](int mat, const Term& t, double sign) {
      const int nb = static_cast<int>(blocks.size());
      if (t.block < nb)
        os << mat << " " << t.block + 1 << " " << t.row + 1 << " " << t.col + 1 << " " << sign * t.value << "\n";
      else
        os << mat << " " << nb + 1 << " " << t.block - nb + 1 << " " << t.block - nb + 1 << " " << sign * t.value << "\n";
    };
    for (const Term& t : objective_) put(0, t, -1.0);
    for (int i = 0; i < num_constraints(); ++i)
      for (const Term& t : rows_[static_cast<std::size_t>(i)]) put(i + 1, t, 1.0);
  }

  static SdpProblem read_sdpa(std::istream& is) {
    std::string line;
    std::stringstream body;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '*' || line[0] == '"') continue;
      for (char& ch : line)
        if (ch == ',' || ch == '{' || ch == '}' || ch == '(' || ch == ')') ch = ' ';
      body << line << "\n";
    }
    int m = 0, nb = 0;
    if (!(body >> m >> nb) || m < 0 || nb <= 0) throw IoError("sdpa: bad header");
    std::vector<int> sizes(static_cast<std::size_t>(nb));
    for (int& s : sizes)
      if (!(body >> s) || s == 0) throw IoError("sdpa: bad block structure");
    std::vector<int> psd;
    std::vector<int> map_block(static_cast<std::size_t>(nb), -1), scalar_offset(static_cast<std::size_t>(nb), -1);
    int scalars = 0;
    for (int j = 0; j < nb; ++j) {
      const int s = sizes[static_cast<std::size_t>(j)];
      if (s > 0) {
        map_block[static_cast<std::size_t>(j)] = static_cast<int>(psd.size());
        psd.push_back(s);
      } else {
        scalar_offset[static_cast<std::size_t>(j)] = scalars;
        scalars += -s;
      }
    }
    SdpProblem p(psd, scalars);
    for (int i = 0; i < m; ++i) {
      double v;
      if (!(body >> v)) throw IoError("sdpa: missing right-hand side");
      p.add_constraint(v);
    }
    int mat, blk, r, c;
    double v;
    while (body >> mat >> blk >> r >> c >> v) {
      if (mat < 0 || mat > m || blk < 1 || blk > nb) throw IoError("sdpa: entry index out of range");
      const auto j = static_cast<std::size_t>(blk - 1);
      if (map_block[j] >= 0) {
        if (mat == 0) p.add_objective_entry(map_block[j], r - 1, c - 1, -v);
        else p.add_entry(mat - 1, map_block[j], r - 1, c - 1, v);
      } else {
        if (r != c) throw IoError("sdpa: off-diagonal entry in a diagonal block");
        if (mat == 0) p.add_objective_scalar(scalar_offset[j] + r - 1, -v);
        else p.add_scalar(mat - 1, scalar_offset[j] + r - 1, v);
      }
    }
    if (!body.eof()) throw IoError("sdpa: malformed entry line");
    return p;
  }

 private:
  void check_entry(int block, int r, int c) const {
    if (block < 0 || block >= static_cast<int>(blocks.size())) throw DimensionError("sdp: block index out of range");
    const int n = blocks[static_cast<std::size_t>(block)];
    if (r < 0 || c < 0 || r >= n || c >= n) throw DimensionError("sdp: entry outside its block");
  }

  std::vector<double> rhs_;
  std::vector<std::vector<Term>> rows_;
  std::vector<Term> objective_;
};

enum class SdpStatus { optimal, infeasible, unbounded, numerical_failure };

inline std::string to_string(SdpStatus s) {
  switch (s) {
    case SdpStatus::optimal: return "optimal";
    case SdpStatus::infeasible: return "infeasible";
    case SdpStatus::unbounded: return "unbounded";
    case SdpStatus::numerical_failure: return "numerical-failure";
  }
  return "?";
}

struct SdpSolution {
  SdpStatus status = SdpStatus::numerical_failure;
  std::vector<Mat> x, z;  // primal blocks and dual slack blocks
  Vec x_scalars, z_scalars;
  Vec y;
  double primal_objective = 0.0, dual_objective = 0.0;
  double primal_residual = 0.0, dual_residual = 0.0, gap = 0.0;  // relative
  int iterations = 0;
  std::string message;
  Vec farkas;  // infeasible: y with b'y = 1 and -A'y psd (approximately)
};

struct SdpOptions {
  double tol = 1e-9;
  double accept_tol = 1e-7;  // stalled solves still count as optimal below this
  int max_iterations = 120;
  int dense_limit = 600;  // above this many constraints use sparse + low-rank
  double step_fraction = 0.98;
  bool verbose = false;  // one line per iteration on stderr
};

namespace detail {

inline std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Block {
  int n = 0;
  bool scalar = false;
  // constraint incidence: per touching constraint, its entries in this block
  std::vector<int> cons;
  std::vector<std::vector<Term>> entries;
};

class Solver {
 public:
  Solver(const SdpProblem& p, const SdpOptions& o) : p_(p), o_(o) {
    m_ = p.num_constraints();
    const int nb = static_cast<int>(p.blocks.size());
    for (int n : p.blocks) blocks_.push_back(Block{n, false, {}, {}});
    for (int k = 0; k < p.scalars; ++k) blocks_.push_back(Block{1, true, {}, {}});
    // row equilibration
    row_scale_ = Vec::Ones(m_);
    for (int i = 0; i < m_; ++i) {
      double mx = 0.0;
      for (const Term& t : p.rows()[static_cast<std::size_t>(i)]) mx = std::max(mx, std::abs(t.value));
      if (mx > 0) row_scale_[i] = 1.0 / mx;
    }
    std::vector<std::map<int, std::size_t>> where(blocks_.size());
    for (int i = 0; i < m_; ++i) {
      for (const Term& t : p.rows()[static_cast<std::size_t>(i)]) {
        auto& blk = blocks_[static_cast<std::size_t>(t.block)];
        auto& w = where[static_cast<std::size_t>(t.block)];
        auto it = w.find(i);
        if (it == w.end()) {
          it = w.emplace(i, blk.cons.size()).first;
          blk.cons.push_back(i);
          blk.entries.emplace_back();
        }
        Term s = t;
        s.value *= row_scale_[i];
        blk.entries[it->second].push_back(s);
      }
    }
    b_ = Eigen::Map<const Vec>(p.rhs().data(), m_).cwiseProduct(row_scale_);
    c_.resize(blocks_.size());
    for (std::size_t j = 0; j < blocks_.size(); ++j) c_[j] = Mat::Zero(blocks_[j].n, blocks_[j].n);
    for (const Term& t : p.objective()) {
      Mat& cm = c_[static_cast<std::size_t>(t.block)];
      cm(t.row, t.col) += t.value;
      if (t.row != t.col) cm(t.col, t.row) += t.value;
    }
    (void)nb;
    nu_ = 0;
    for (const auto& blk : blocks_) nu_ += blk.n;
  }

  SdpSolution run() {
    const std::size_t nbk = blocks_.size();
    std::vector<Mat> x(nbk), s(nbk);
    for (std::size_t j = 0; j < nbk; ++j) {
      x[j] = Mat::Identity(blocks_[j].n, blocks_[j].n);
      s[j] = x[j];
    }
    Vec y = Vec::Zero(m_);
    double tau = 1.0, kappa = 1.0;
    SdpSolution sol;
    const double bnorm = orig_b_norm(), cnorm = orig_c_norm();
    double best_score = INFINITY;

    for (int it = 0; it <= o_.max_iterations; ++it) {
      sol.iterations = it;
      const Vec rp = apply_a(x) - b_ * tau;
      std::vector<Mat> rd = apply_at(y);
      for (std::size_t j = 0; j < nbk; ++j) rd[j] += s[j] - c_[j] * tau;
      const double cx = inner(c_, x), by = b_.dot(y);
      const double rg = cx - by + kappa;
      const double mu = (inner(x, s) + tau * kappa) / (nu_ + 1);

      // Convergence tests on the original (unequilibrated) data.
      const auto acc = assess(x, s, y, tau, bnorm, cnorm);
      const double score = std::max({acc.pres, acc.dres, acc.gap});
      if (o_.verbose)
        std::cerr << "sdp " << it << " pres " << acc.pres << " dres " << acc.dres << " gap " << acc.gap << " mu " << mu
                  << " tau " << tau << " kappa " << kappa << "\n";
      if (score <= o_.tol) return finish(sol, SdpStatus::optimal, x, s, y, tau, acc, "converged");
      if (score < best_score) {
        best_score = score;
        keep(x, s, y, tau, acc);
      }
      // Infeasibility from the embedding.
      if (tau < 1e-3 * kappa || tau < 1e-10) {
        const double bty = by;
        if (bty > 0) {
          Vec yy = y / bty;
          std::vector<Mat> ats = apply_at(yy);
          double viol = 0.0;
          for (std::size_t j = 0; j < nbk; ++j) {
            const Mat sj = -ats[j];
            viol = std::max(viol, std::max(0.0, -Eigen::SelfAdjointEigenSolver<Mat>(sj).eigenvalues().minCoeff()));
          }
          if (viol <= 1e-7) {
            sol.farkas = yy.cwiseProduct(row_scale_);
            return finish(sol, SdpStatus::infeasible, x, s, y, tau, acc, "primal infeasible (Farkas witness)");
          }
        }
        if (-cx > 0) {
          const double ax = (apply_a(x)).norm() / -cx;
          if (ax <= 1e-7) return finish(sol, SdpStatus::unbounded, x, s, y, tau, acc, "dual infeasible (improving ray)");
        }
      }
      if (it == o_.max_iterations) break;

      // NT scaling per block.
      std::vector<Mat> g(nbk), ginv(nbk), w(nbk);
      std::vector<Vec> lam(nbk);
      bool ok = true;
      for (std::size_t j = 0; j < nbk && ok; ++j) ok = nt_scaling(x[j], s[j], g[j], ginv[j], w[j], lam[j]);
      if (!ok) break;

      Schur schur;
      if (!schur.factor(*this, w)) break;

      // H c and the two fixed solves.
      std::vector<Mat> hc = apply_h(w, c_);
      const Vec ahc = apply_a(hc);
      const double chc = inner(c_, hc);
      const Vec u = schur.solve(ahc + b_);
      const Vec q = ahc - b_;

      auto direction = [&](double sigma, const std::vector<Mat>* corr, double corr_tau, std::vector<Mat>& dx,
                           std::vector<Mat>& ds, Vec& dy, double& dtau, double& dkappa) {
        const double gam = 1.0 - sigma;
        std::vector<Mat> rs(nbk), tmp(nbk);
        for (std::size_t j = 0; j < nbk; ++j) {
          const Vec& l = lam[j];
          const int n = blocks_[j].n;
          Mat rhs = -Mat(l.cwiseProduct(l).asDiagonal());
          rhs.diagonal().array() += sigma * mu;
          if (corr) rhs -= (*corr)[j];
          Mat zz(n, n);
          for (int a = 0; a < n; ++a)
            for (int b2 = 0; b2 < n; ++b2) zz(a, b2) = 2.0 * rhs(a, b2) / (l[a] + l[b2]);
          rs[j] = ginv[j].transpose() * zz * ginv[j];
          tmp[j] = rs[j] + gam * rd[j];
        }
        const std::vector<Mat> htmp = apply_h(w, tmp);
        const Vec v = schur.solve(-gam * rp - apply_a(htmp));
        const double comp = sigma * mu - tau * kappa - corr_tau;
        const double rhs3 = -gam * rg - inner(c_, htmp) - comp / tau;
        const double den = q.dot(u) - chc - kappa / tau;
        dtau = (rhs3 - q.dot(v)) / den;
        dy = v + u * dtau;
        std::vector<Mat> aty = apply_at(dy);
        for (std::size_t j = 0; j < nbk; ++j) aty[j] += -c_[j] * dtau + tmp[j];
        dx = apply_h(w, aty);
        // Iterative refinement against the unreduced primal and gap equations.
        for (int pass = 0; pass < 2; ++pass) {
          const Vec e1 = -gam * rp - (apply_a(dx) - b_ * dtau);
          const double e3 = -gam * rg - (inner(c_, dx) - b_.dot(dy) + (comp - kappa * dtau) / tau);
          const Vec v1 = schur.solve(e1);
          const double t1 = (e3 - q.dot(v1)) / den;
          const Vec y1 = v1 + u * t1;
          std::vector<Mat> a1 = apply_at(y1);
          for (std::size_t j = 0; j < nbk; ++j) a1[j] -= c_[j] * t1;
          const std::vector<Mat> x1 = apply_h(w, a1);
          dy += y1;
          dtau += t1;
          for (std::size_t j = 0; j < nbk; ++j) dx[j] += x1[j];
        }
        // ds from the dual equation directly; going through H^-1 loses
        // accuracy once W is badly conditioned near the optimum.
        ds = apply_at(dy);
        for (std::size_t j = 0; j < nbk; ++j) {
          ds[j] = -gam * rd[j] - ds[j] + c_[j] * dtau;
          ds[j] = (0.5 * (ds[j] + ds[j].transpose())).eval();
          dx[j] = (0.5 * (dx[j] + dx[j].transpose())).eval();
        }
        dkappa = (comp - kappa * dtau) / tau;
      };

      auto max_step = [&](const std::vector<Mat>& dx, const std::vector<Mat>& ds, double dtau, double dkappa) {
        double a = 1.0 / o_.step_fraction;
        for (std::size_t j = 0; j < nbk; ++j) {
          const Vec isq = lam[j].cwiseSqrt().cwiseInverse();
          const Mat sx = isq.asDiagonal() * (ginv[j] * dx[j] * ginv[j].transpose()) * isq.asDiagonal();
          const Mat ss = isq.asDiagonal() * (g[j].transpose() * ds[j] * g[j]) * isq.asDiagonal();
          const double ex = min_eig(sx), es = min_eig(ss);
          if (ex < 0) a = std::min(a, -1.0 / ex);
          if (es < 0) a = std::min(a, -1.0 / es);
        }
        if (dtau < 0) a = std::min(a, -tau / dtau);
        if (dkappa < 0) a = std::min(a, -kappa / dkappa);
        return a;
      };

      std::vector<Mat> dx, ds;
      Vec dy;
      double dtau, dkappa;
      direction(0.0, nullptr, 0.0, dx, ds, dy, dtau, dkappa);
      const double a_aff = std::min(1.0, max_step(dx, ds, dtau, dkappa));
      double mu_aff = (tau + a_aff * dtau) * (kappa + a_aff * dkappa);
      for (std::size_t j = 0; j < nbk; ++j) mu_aff += inner1(x[j] + a_aff * dx[j], s[j] + a_aff * ds[j]);
      mu_aff /= (nu_ + 1);
      const double sigma = std::clamp(std::pow(mu_aff / mu, 3.0), 0.0, 1.0);
      std::vector<Mat> corr(nbk);
      for (std::size_t j = 0; j < nbk; ++j) {
        const Mat ax = ginv[j] * dx[j] * ginv[j].transpose();
        const Mat as = g[j].transpose() * ds[j] * g[j];
        corr[j] = 0.5 * (ax * as + as * ax);
      }
      const double corr_tau = dtau * dkappa;
      direction(sigma, &corr, corr_tau, dx, ds, dy, dtau, dkappa);
      const double alpha = std::min(1.0, o_.step_fraction * max_step(dx, ds, dtau, dkappa));
      if (!(alpha > 1e-12) || !dy.allFinite()) break;
      for (std::size_t j = 0; j < nbk; ++j) {
        x[j] += alpha * dx[j];
        s[j] += alpha * ds[j];
      }
      y += alpha * dy;
      tau += alpha * dtau;
      kappa += alpha * dkappa;
    }
    // Stalled or out of iterations: accept the best iterate if it meets the contract.
    if (best_score <= o_.accept_tol)
      return finish(sol, SdpStatus::optimal, best_.x, best_.s, best_.y, best_.tau, best_.acc, "converged to acceptance tolerance");
    return finish(sol, SdpStatus::numerical_failure, best_.x, best_.s, best_.y, best_.tau, best_.acc,
                  "no convergence (best relative residual " + format_score(best_score) + ")");
  }

 private:
  struct Accuracy {
    double pres, dres, gap, pobj, dobj;
  };
  struct Snapshot {
    std::vector<Mat> x, s;
    Vec y;
    double tau = 1.0;
    Accuracy acc{};
  };

  // Schur complement M = A H A' with dense Cholesky, or, for large problems,
  // M = M0 + U D U' with M0 the sparse psd-block part and U the scalar
  // columns. Near the optimum M0 loses rank where the scalars carry the
  // solution, and Woodbury on M0 itself is unstable, so M0 + gamma I is
  // factored instead and used to precondition conjugate gradients on M.
  // Rows that only scalars touch have no M0 part; they are split off and
  // handled by a small dense Schur complement inside the preconditioner.
  class Schur {
   public:
    bool factor(const Solver& sv, const std::vector<Mat>& w) {
      m_ = sv.m_;
      sparse_ = m_ > sv.o_.dense_limit;
      if (!sparse_) {
        Mat mm = Mat::Zero(m_, m_);
        for (std::size_t j = 0; j < sv.blocks_.size(); ++j) sv.add_block_schur(j, w[j], [&](int i, int k, double v) { mm(i, k) += v; });
        return dense_factor(mm);
      }
      std::vector<std::size_t> scal;
      std::vector<char> gram_row(static_cast<std::size_t>(m_), 0);
      for (std::size_t j = 0; j < sv.blocks_.size(); ++j) {
        if (sv.blocks_[j].scalar) scal.push_back(j);
        else
          for (int r : sv.blocks_[j].cons) gram_row[static_cast<std::size_t>(r)] = 1;
      }
      local_.assign(static_cast<std::size_t>(m_), -1);
      grows_.clear();
      srows_.clear();
      for (int i = 0; i < m_; ++i) {
        auto& list = gram_row[static_cast<std::size_t>(i)] ? grows_ : srows_;
        local_[static_cast<std::size_t>(i)] = static_cast<int>(list.size());
        list.push_back(i);
      }
      const int ng = static_cast<int>(grows_.size()), ns = static_cast<int>(srows_.size());

      std::vector<Eigen::Triplet<double>> trip;
      for (std::size_t j = 0; j < sv.blocks_.size(); ++j)
        if (!sv.blocks_[j].scalar)
          sv.add_block_schur(j, w[j], [&](int i, int k, double v) {
            trip.emplace_back(local_[static_cast<std::size_t>(i)], local_[static_cast<std::size_t>(k)], v);
          });
      Eigen::SparseMatrix<double> m0(ng, ng);
      m0.setFromTriplets(trip.begin(), trip.end());
      double dmax = 0.0;
      for (int i = 0; i < ng; ++i) dmax = std::max(dmax, m0.coeff(i, i));
      m0_ = m0;
      bool ok = false;
      for (double gamma : {1e-10, 1e-8, 1e-6}) {
        Eigen::SparseMatrix<double> a = m0;
        for (int i = 0; i < ng; ++i) a.coeffRef(i, i) += gamma * std::max(dmax, 1e-300);
        llt_.compute(a);
        if ((ok = llt_.info() == Eigen::Success)) break;
      }
      if (!ok) return false;

      const int k = static_cast<int>(scal.size());
      ug_ = Mat::Zero(ng, k);
      Mat us = Mat::Zero(ns, k);
      Vec d(k);
      for (int c = 0; c < k; ++c) {
        const auto& blk = sv.blocks_[scal[static_cast<std::size_t>(c)]];
        for (std::size_t e = 0; e < blk.cons.size(); ++e) {
          const int r = blk.cons[e];
          double v = 0.0;
          for (const Term& t : blk.entries[e]) v += t.value;
          if (gram_row[static_cast<std::size_t>(r)]) ug_(local_[static_cast<std::size_t>(r)], c) += v;
          else us(local_[static_cast<std::size_t>(r)], c) += v;
        }
        const double wj = w[scal[static_cast<std::size_t>(c)]](0, 0);
        d[c] = wj * wj;
      }
      us_ = us;
      d_ = d;
      m0u_ = llt_.solve(ug_);
      Mat cap = ug_.transpose() * m0u_;
      cap.diagonal() += d.cwiseInverse();
      cap_ = cap.ldlt();
      if (cap_.info() != Eigen::Success || !m0u_.allFinite()) return false;
      if (ns == 0) return true;

      // M = [A B; B' C] with A = M0 + Ug D Ug', B = Ug D Us', C = Us D Us'.
      b_ = ug_ * d.asDiagonal() * us.transpose();
      ainv_b_ = Mat(ng, ns);
      for (int c = 0; c < ns; ++c) ainv_b_.col(c) = solve_a(b_.col(c));
      Mat sc = us * d.asDiagonal() * us.transpose() - b_.transpose() * ainv_b_;
      sc = (0.5 * (sc + sc.transpose())).eval();
      sfac_ = sc.ldlt();
      return sfac_.info() == Eigen::Success && ainv_b_.allFinite();
    }

    Vec solve(const Vec& r) const {
      if (!sparse_) {
        Vec x = chol_.solve(r);
        // one step of refinement against the stored matrix
        x += chol_.solve(r - mat_ * x);
        return x;
      }
      // preconditioned conjugate gradients, keeping the best iterate
      const double rn = r.norm();
      Vec x = precondition(r);
      Vec res = r - multiply(x);
      Vec best = x;
      double best_norm = res.norm();
      if (!(rn > 0) || best_norm <= 1e-15 * rn) return x;
      Vec z = precondition(res), p = z;
      double rz = res.dot(z);
      for (int it = 0; it < 200 && rz > 0; ++it) {
        const Vec q = multiply(p);
        const double pq = p.dot(q);
        if (!(pq > 0)) break;
        const double a = rz / pq;
        x += a * p;
        res -= a * q;
        const double n = res.norm();
        if (n < best_norm) {
          best = x;
          best_norm = n;
        }
        if (n <= 1e-15 * rn) break;
        z = precondition(res);
        const double rz2 = res.dot(z);
        p = z + (rz2 / rz) * p;
        rz = rz2;
      }
      return best;
    }

   private:
    Vec multiply(const Vec& x) const {
      Vec xg(static_cast<Eigen::Index>(grows_.size())), xs(static_cast<Eigen::Index>(srows_.size()));
      for (std::size_t i = 0; i < grows_.size(); ++i) xg[static_cast<Eigen::Index>(i)] = x[grows_[i]];
      for (std::size_t i = 0; i < srows_.size(); ++i) xs[static_cast<Eigen::Index>(i)] = x[srows_[i]];
      Vec z = ug_.transpose() * xg;
      if (us_.rows() > 0) z += us_.transpose() * xs;
      z = d_.cwiseProduct(z);
      const Vec yg = m0_ * xg + ug_ * z;
      Vec out(m_);
      for (std::size_t i = 0; i < grows_.size(); ++i) out[grows_[i]] = yg[static_cast<Eigen::Index>(i)];
      if (!srows_.empty()) {
        const Vec ys = us_ * z;
        for (std::size_t i = 0; i < srows_.size(); ++i) out[srows_[i]] = ys[static_cast<Eigen::Index>(i)];
      }
      return out;
    }

    Vec precondition(const Vec& r) const {
      Vec rg(static_cast<Eigen::Index>(grows_.size())), rs(static_cast<Eigen::Index>(srows_.size()));
      for (std::size_t i = 0; i < grows_.size(); ++i) rg[static_cast<Eigen::Index>(i)] = r[grows_[i]];
      for (std::size_t i = 0; i < srows_.size(); ++i) rs[static_cast<Eigen::Index>(i)] = r[srows_[i]];
      Vec xg = solve_a(rg);
      Vec out(m_);
      if (!srows_.empty()) {
        const Vec xs = sfac_.solve(rs - b_.transpose() * xg);
        xg -= ainv_b_ * xs;
        for (std::size_t i = 0; i < srows_.size(); ++i) out[srows_[i]] = xs[static_cast<Eigen::Index>(i)];
      }
      for (std::size_t i = 0; i < grows_.size(); ++i) out[grows_[i]] = xg[static_cast<Eigen::Index>(i)];
      return out;
    }

    Vec solve_a(const Vec& r) const {
      const Vec t = llt_.solve(r);
      if (ug_.cols() == 0) return t;
      return t - m0u_ * cap_.solve(ug_.transpose() * t);
    }

    bool dense_factor(Mat& mm) {
      mat_ = mm;
      const double dmax = std::max(mm.diagonal().maxCoeff(), 1e-300);
      for (double jitter : {0.0, 1e-14, 1e-12, 1e-10}) {
        Mat a = mm;
        a.diagonal().array() += jitter * dmax;
        chol_.compute(a);
        if (chol_.info() == Eigen::Success) return true;
      }
      return false;
    }

    int m_ = 0;
    bool sparse_ = false;
    Mat mat_;
    Eigen::LLT<Mat> chol_;
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt_;
    std::vector<int> local_, grows_, srows_;
    Eigen::SparseMatrix<double> m0_;
    Mat ug_, us_, m0u_, b_, ainv_b_;
    Vec d_;
    Eigen::LDLT<Mat> cap_, sfac_;
  };

  template <class Add>
  void add_block_schur(std::size_t j, const Mat& w, Add&& add) const {
    const Block& blk = blocks_[j];
    const std::size_t nc = blk.cons.size();
    if (blk.scalar) {
      const double w2 = w(0, 0) * w(0, 0);
      std::vector<double> a(nc);
      for (std::size_t e = 0; e < nc; ++e) {
        a[e] = 0.0;
        for (const Term& t : blk.entries[e]) a[e] += t.value;
      }
      for (std::size_t e = 0; e < nc; ++e)
        for (std::size_t f = 0; f < nc; ++f) add(blk.cons[e], blk.cons[f], w2 * a[e] * a[f]);
      return;
    }
    const int n = blk.n;
    for (std::size_t e = 0; e < nc; ++e) {
      // B = W A_e W
      Mat bm = Mat::Zero(n, n);
      for (const Term& t : blk.entries[e]) {
        if (t.row == t.col) bm.noalias() += t.value * w.col(t.row) * w.col(t.row).transpose();
        else {
          bm.noalias() += t.value * w.col(t.row) * w.col(t.col).transpose();
          bm.noalias() += t.value * w.col(t.col) * w.col(t.row).transpose();
        }
      }
      for (std::size_t f = e; f < nc; ++f) {
        double v = 0.0;
        for (const Term& t : blk.entries[f]) v += t.value * (t.row == t.col ? bm(t.row, t.col) : 2.0 * bm(t.row, t.col));
        add(blk.cons[e], blk.cons[f], v);
        if (f != e) add(blk.cons[f], blk.cons[e], v);
      }
    }
  }

  static bool nt_scaling(const Mat& x, const Mat& s, Mat& g, Mat& ginv, Mat& w, Vec& lam) {
    Eigen::LLT<Mat> lx(x), ls(s);
    if (lx.info() != Eigen::Success || ls.info() != Eigen::Success) return false;
    const Mat l = lx.matrixL(), r = ls.matrixL();
    Eigen::JacobiSVD<Mat> svd(l.transpose() * r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    lam = svd.singularValues();
    if (!(lam.minCoeff() > 0)) return false;
    const Mat u = svd.matrixU();
    const Vec isq = lam.cwiseSqrt().cwiseInverse();
    g = l * u * isq.asDiagonal();
    // G^-1 = D^{1/2} U' L^-1
    ginv = lam.cwiseSqrt().asDiagonal() * u.transpose() * l.triangularView<Eigen::Lower>().solve(Mat::Identity(x.rows(), x.rows()));
    w = g * g.transpose();
    return g.allFinite() && ginv.allFinite();
  }

  static double min_eig(const Mat& a) {
    if (a.rows() == 1) return a(0, 0);
    return Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (a + a.transpose()), Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
  }
  static double inner1(const Mat& a, const Mat& b) { return a.cwiseProduct(b).sum(); }
  static double inner(const std::vector<Mat>& a, const std::vector<Mat>& b) {
    double v = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) v += inner1(a[j], b[j]);
    return v;
  }

  Vec apply_a(const std::vector<Mat>& x) const {
    Vec r = Vec::Zero(m_);
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      const Block& blk = blocks_[j];
      for (std::size_t e = 0; e < blk.cons.size(); ++e)
        for (const Term& t : blk.entries[e])
          r[blk.cons[e]] += t.value * (t.row == t.col ? x[j](t.row, t.col) : 2.0 * x[j](t.row, t.col));
    }
    return r;
  }
  std::vector<Mat> apply_at(const Vec& y) const {
    std::vector<Mat> out(blocks_.size());
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      const Block& blk = blocks_[j];
      out[j] = Mat::Zero(blk.n, blk.n);
      for (std::size_t e = 0; e < blk.cons.size(); ++e)
        for (const Term& t : blk.entries[e]) {
          out[j](t.row, t.col) += y[blk.cons[e]] * t.value;
          if (t.row != t.col) out[j](t.col, t.row) += y[blk.cons[e]] * t.value;
        }
    }
    return out;
  }
  static std::vector<Mat> apply_h(const std::vector<Mat>& w, const std::vector<Mat>& a) {
    std::vector<Mat> out(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = w[j] * a[j] * w[j];
    return out;
  }

  double orig_b_norm() const { return Eigen::Map<const Vec>(p_.rhs().data(), m_).norm(); }
  double orig_c_norm() const {
    double v = 0.0;
    for (const Mat& c : c_) v += c.squaredNorm();
    return std::sqrt(v);
  }

  Accuracy assess(const std::vector<Mat>& x, const std::vector<Mat>& s, const Vec& y, double tau, double bnorm,
                  double cnorm) const {
    Accuracy a{};
    std::vector<Mat> xh(x.size()), sh(s.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
      xh[j] = x[j] / tau;
      sh[j] = s[j] / tau;
    }
    const Vec yh = y / tau;
    const Vec pr = (apply_a(xh) - b_).cwiseQuotient(row_scale_);
    std::vector<Mat> dr = apply_at(yh);
    double dn = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) dn += (dr[j] + sh[j] - c_[j]).squaredNorm();
    a.pobj = inner(c_, xh);
    a.dobj = b_.dot(yh);
    a.pres = pr.norm() / (1.0 + bnorm);
    a.dres = std::sqrt(dn) / (1.0 + cnorm);
    a.gap = std::abs(a.pobj - a.dobj) / (1.0 + std::abs(a.pobj) + std::abs(a.dobj));
    return a;
  }

  void keep(const std::vector<Mat>& x, const std::vector<Mat>& s, const Vec& y, double tau, const Accuracy& acc) {
    best_ = Snapshot{x, s, y, tau, acc};
  }

  SdpSolution finish(SdpSolution& sol, SdpStatus st, const std::vector<Mat>& x, const std::vector<Mat>& s, const Vec& y,
                     double tau, const Accuracy& acc, const std::string& msg) const {
    sol.status = st;
    sol.message = msg;
    const std::size_t npsd = p_.blocks.size();
    sol.x.clear();
    sol.z.clear();
    sol.x_scalars = Vec(p_.scalars);
    sol.z_scalars = Vec(p_.scalars);
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      if (j < npsd) {
        sol.x.push_back(x[j] / tau);
        sol.z.push_back(s[j] / tau);
      } else {
        sol.x_scalars[static_cast<Eigen::Index>(j - npsd)] = x[j](0, 0) / tau;
        sol.z_scalars[static_cast<Eigen::Index>(j - npsd)] = s[j](0, 0) / tau;
      }
    }
    sol.y = (y / tau).cwiseProduct(row_scale_);
    sol.primal_objective = acc.pobj;
    sol.dual_objective = acc.dobj;
    sol.primal_residual = acc.pres;
    sol.dual_residual = acc.dres;
    sol.gap = acc.gap;
    return sol;
  }

  const SdpProblem& p_;
  SdpOptions o_;
  int m_ = 0;
  int nu_ = 0;
  std::vector<Block> blocks_;
  Vec row_scale_, b_;
  std::vector<Mat> c_;
  Snapshot best_;
};

}  // namespace detail

/// Solves the problem. Never throws for numerical reasons; the status says what happened.
inline SdpSolution solve(const SdpProblem& problem, const SdpOptions& opts = {}) {
  if (problem.num_constraints() == 0) throw InvalidArgument("sdp: problem has no constraints");
  detail::Solver s(problem, opts);
  return s.run();
}

/// Largest violation of the equality constraints by a primal point, unscaled.
inline double primal_violation(const SdpProblem& p, const std::vector<Mat>& x, const Vec& xs) {
  double worst = 0.0;
  for (int i = 0; i < p.num_constraints(); ++i) {
    double v = -p.rhs()[static_cast<std::size_t>(i)];
    for (const Term& t : p.rows()[static_cast<std::size_t>(i)]) {
      if (t.block < static_cast<int>(p.blocks.size())) {
        const Mat& xb = x[static_cast<std::size_t>(t.block)];
        v += t.value * (t.row == t.col ? xb(t.row, t.col) : 2.0 * xb(t.row, t.col));
      } else {
        v += t.value * xs[t.block - static_cast<int>(p.blocks.size())];
      }
    }
    worst = std::max(worst, std::abs(v));
  }
  return worst;
}

}  // namespace hroa::sdp
