#pragma once

// Sum-of-squares programs over polynomial identities
//
//   sum_j  b_j' G_j b_j * w_j(x)  +  sum_s theta_s r_s(x)  ==  target(x)
//
// with Gram matrices G_j psd and scalars theta_s >= 0, compiled to an
// SdpProblem by coefficient matching.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hroa/polynomial.hpp"
#include "hroa/sdp.hpp"

namespace hroa {

/// b' G b for a monomial basis b.
inline Polynomial gram_polynomial(const std::vector<Monomial>& basis, const Eigen::MatrixXd& g) {
  if (basis.empty()) return Polynomial();
  Polynomial p(basis.front().num_vars());
  for (std::size_t a = 0; a < basis.size(); ++a)
    for (std::size_t b = a; b < basis.size(); ++b) {
      const double v = g(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      p.add_term(basis[a] * basis[b], a == b ? v : 2.0 * v);
    }
  return p;
}

inline double min_eigenvalue(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return INFINITY;
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
}

class SosProgram {
 public:
  struct GramTerm {
    int block;
    Polynomial weight;
  };
  struct ScalarTerm {
    int scalar;
    Polynomial weight;
  };
  struct Identity {
    std::string tag;
    Polynomial target;
    std::vector<GramTerm> grams;
    std::vector<ScalarTerm> scalars;
    int sos_block = -1;  // Gram with weight 1 that absorbs rounding residuals
    int slack = -1;      // scalar t adding t*I to sos_block (maximised by the caller's objective)
  };

  struct Solution {
    sdp::SdpSolution raw;
    std::vector<Eigen::MatrixXd> grams;
    std::vector<double> scalars;
    double max_residual = INFINITY;     // after correction, relative to the target scale
    double min_sos_eigenvalue = -INFINITY;
    bool structurally_infeasible = false;
    bool certified = false;  // psd Grams and exact identities
  };

  explicit SosProgram(std::size_t num_vars) : nv_(num_vars) {}

  std::size_t num_vars() const { return nv_; }

  int add_gram(std::vector<Monomial> basis) {
    if (basis.empty()) throw InvalidArgument("sos: empty Gram basis");
    for (const auto& m : basis)
      if (m.num_vars() != nv_) throw DimensionError("sos: basis monomial has the wrong variable count");
    bases_.push_back(std::move(basis));
    return static_cast<int>(bases_.size()) - 1;
  }

  int add_scalar(double objective = 0.0) {
    scalar_objective_.push_back(objective);
    return static_cast<int>(scalar_objective_.size()) - 1;
  }

  void add_identity(Identity id) {
    if (id.target.num_vars() != nv_) throw DimensionError("sos: target has the wrong variable count");
    for (const auto& g : id.grams)
      if (g.block < 0 || g.block >= num_grams()) throw DimensionError("sos: Gram index out of range");
    for (const auto& s : id.scalars)
      if (s.scalar < 0 || s.scalar >= num_scalars()) throw DimensionError("sos: scalar index out of range");
    if (id.sos_block >= num_grams() || id.slack >= num_scalars() || (id.slack >= 0 && id.sos_block < 0))
      throw DimensionError("sos: bad absorbing block or slack index");
    identities_.push_back(std::move(id));
  }

  int num_grams() const { return static_cast<int>(bases_.size()); }
  int num_scalars() const { return static_cast<int>(scalar_objective_.size()); }
  const std::vector<Monomial>& basis(int block) const { return bases_.at(static_cast<std::size_t>(block)); }
  const std::vector<Identity>& identities() const { return identities_; }

  /// Coefficient-matching SDP. Rows whose monomial no variable can produce
  /// are dropped when the target coefficient is negligible; otherwise the
  /// program is structurally infeasible and `infeasible` is set.
  sdp::SdpProblem to_sdp(bool* infeasible = nullptr, std::vector<std::string>* row_tags = nullptr) const {
    std::vector<int> sizes;
    for (const auto& b : bases_) sizes.push_back(static_cast<int>(b.size()));
    sdp::SdpProblem p(sizes, num_scalars());
    for (int s = 0; s < num_scalars(); ++s)
      if (scalar_objective_[static_cast<std::size_t>(s)] != 0.0) p.add_objective_scalar(s, scalar_objective_[static_cast<std::size_t>(s)]);
    if (infeasible) *infeasible = false;
    for (const auto& id : identities_) {
      struct Row {
        std::vector<sdp::Term> terms;
        double rhs = 0.0;
      };
      std::map<Monomial, Row> rows;
      for (const auto& g : id.grams) {
        const auto& b = bases_[static_cast<std::size_t>(g.block)];
        for (std::size_t i = 0; i < b.size(); ++i)
          for (std::size_t j = i; j < b.size(); ++j) {
            const Monomial mm = b[i] * b[j];
            for (const auto& [m, c] : g.weight.terms())
              rows[mm * m].terms.push_back({g.block, static_cast<int>(i), static_cast<int>(j), c});
          }
      }
      for (const auto& s : id.scalars)
        for (const auto& [m, c] : s.weight.terms())
          rows[m].terms.push_back({static_cast<int>(bases_.size()) + s.scalar, 0, 0, c});
      if (id.slack >= 0)
        for (const auto& m : bases_[static_cast<std::size_t>(id.sos_block)])
          rows[m * m].terms.push_back({static_cast<int>(bases_.size()) + id.slack, 0, 0, 1.0});
      for (const auto& [m, c] : id.target.terms()) rows[m].rhs += c;
      const double scale = 1.0 + id.target.max_abs_coefficient();
      for (const auto& [m, row] : rows) {
        if (row.terms.empty()) {
          if (std::abs(row.rhs) > 1e-12 * scale && infeasible) *infeasible = true;
          continue;
        }
        const int r = p.add_constraint(row.rhs);
        if (row_tags) row_tags->push_back(id.tag);
        for (const auto& t : row.terms) {
          if (t.block < static_cast<int>(bases_.size())) p.add_entry(r, t.block, t.row, t.col, t.value);
          else p.add_scalar(r, t.block - static_cast<int>(bases_.size()), t.value);
        }
      }
    }
    return p;
  }

  /// Left side minus target for given variable values.
  Polynomial residual(const Identity& id, const std::vector<Eigen::MatrixXd>& grams,
                      const std::vector<double>& scalars, bool include_slack = true) const {
    Polynomial r = -id.target;
    if (include_slack && id.slack >= 0)
      for (const auto& m : bases_[static_cast<std::size_t>(id.sos_block)])
        r.add_term(m * m, scalars[static_cast<std::size_t>(id.slack)]);
    for (const auto& g : id.grams)
      r += gram_polynomial(bases_[static_cast<std::size_t>(g.block)], grams[static_cast<std::size_t>(g.block)]) * g.weight;
    for (const auto& s : id.scalars) r += s.weight * scalars[static_cast<std::size_t>(s.scalar)];
    return r;
  }

  Solution solve(const sdp::SdpOptions& opts = {}) const {
    Solution out;
    bool infeasible = false;
    const sdp::SdpProblem prob = to_sdp(&infeasible);
    out.structurally_infeasible = infeasible;
    if (infeasible) {
      out.raw.status = sdp::SdpStatus::infeasible;
      out.raw.message = "target has terms no variable can produce";
      return out;
    }
    if (prob.num_constraints() == 0) {
      out.raw.status = sdp::SdpStatus::optimal;
    } else {
      out.raw = sdp::solve(prob, opts);
      if (out.raw.status != sdp::SdpStatus::optimal) return out;
    }
    out.grams.resize(bases_.size());
    for (std::size_t j = 0; j < bases_.size(); ++j)
      out.grams[j] = out.raw.x.empty() ? Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bases_[j].size()),
                                                              static_cast<Eigen::Index>(bases_[j].size()))
                                       : out.raw.x[j];
    out.scalars.assign(static_cast<std::size_t>(num_scalars()), 0.0);
    for (int s = 0; s < num_scalars() && out.raw.x_scalars.size() > 0; ++s)
      out.scalars[static_cast<std::size_t>(s)] = std::max(0.0, out.raw.x_scalars[s]);
    polish(out);
    return out;
  }

  /// Clips non-absorbing Grams to the psd cone, folds slacks into their
  /// Gram, then moves each identity's
  /// remaining coefficient residual into its absorbing Gram by the
  /// least-norm correction. Certified when every Gram is psd afterwards.
  void polish(Solution& out) const {
    std::vector<bool> absorbing(bases_.size(), false);
    for (const auto& id : identities_)
      if (id.sos_block >= 0) absorbing[static_cast<std::size_t>(id.sos_block)] = true;
    for (std::size_t j = 0; j < bases_.size(); ++j) {
      if (absorbing[j]) continue;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.grams[j]);
      const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
      out.grams[j] = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }
    for (const auto& id : identities_)
      if (id.slack >= 0)
        out.grams[static_cast<std::size_t>(id.sos_block)].diagonal().array() += out.scalars[static_cast<std::size_t>(id.slack)];
    out.max_residual = 0.0;
    for (const auto& id : identities_) {
      Polynomial r = residual(id, out.grams, out.scalars, false);
      if (id.sos_block >= 0) {
        const auto& b = bases_[static_cast<std::size_t>(id.sos_block)];
        std::map<Monomial, std::vector<std::pair<int, int>>> producers;
        for (std::size_t i = 0; i < b.size(); ++i)
          for (std::size_t j = i; j < b.size(); ++j)
            producers[b[i] * b[j]].emplace_back(static_cast<int>(i), static_cast<int>(j));
        Eigen::MatrixXd& g = out.grams[static_cast<std::size_t>(id.sos_block)];
        for (const auto& [m, c] : r.terms()) {
          auto it = producers.find(m);
          if (it == producers.end()) continue;
          // minimise |dG|_F subject to the coefficient of m changing by -c
          double denom = 0.0;
          for (const auto& [i, j] : it->second) denom += (i == j) ? 1.0 : 2.0;
          const double step = -c / denom;
          for (const auto& [i, j] : it->second) {
            g(i, j) += step;
            if (i != j) g(j, i) += step;
          }
        }
        r = residual(id, out.grams, out.scalars, false);
      }
      out.max_residual = std::max(out.max_residual, r.max_abs_coefficient() / (1.0 + id.target.max_abs_coefficient()));
    }
    out.min_sos_eigenvalue = INFINITY;
    for (std::size_t j = 0; j < bases_.size(); ++j)
      if (absorbing[j]) out.min_sos_eigenvalue = std::min(out.min_sos_eigenvalue, min_eigenvalue(out.grams[j]));
    out.certified = out.max_residual <= 1e-9 && out.min_sos_eigenvalue >= 0.0;
  }

 private:
  std::size_t nv_;
  std::vector<std::vector<Monomial>> bases_;
  std::vector<double> scalar_objective_;
  std::vector<Identity> identities_;
};

}  // namespace hroa
