#pragma once

// Vector-valued cubic Hermite interpolation on strictly increasing knots.

#include <algorithm>
#include <vector>

#include <Eigen/Dense>

#include "hroa/error.hpp"

namespace hroa {

class HermiteSpline {
 public:
  HermiteSpline() = default;

  /// values and slopes hold one column per knot.
  HermiteSpline(std::vector<double> knots, Eigen::MatrixXd values, Eigen::MatrixXd slopes)
      : knots_(std::move(knots)), values_(std::move(values)), slopes_(std::move(slopes)) {
    const auto n = static_cast<Eigen::Index>(knots_.size());
    if (n < 2) throw InvalidArgument("Hermite spline needs at least two knots");
    if (values_.cols() != n || slopes_.cols() != n || slopes_.rows() != values_.rows())
      throw DimensionError("Hermite spline data does not match the knot count");
    for (std::size_t i = 1; i < knots_.size(); ++i)
      if (!(knots_[i] > knots_[i - 1])) throw InvalidArgument("Hermite knots must increase strictly");
    const double h = (knots_.back() - knots_.front()) / static_cast<double>(n - 1);
    uniform_ = true;
    for (std::size_t i = 0; i < knots_.size(); ++i)
      if (std::abs(knots_[i] - (knots_.front() + h * static_cast<double>(i))) > 1e-12 * (1 + std::abs(knots_.back())))
        uniform_ = false;
  }

  /// Slopes by centered finite differences of the values (one-sided at the ends,
  /// or wrapped when `periodic` and the first/last values coincide).
  static HermiteSpline from_values(std::vector<double> knots, Eigen::MatrixXd values, bool periodic) {
    const auto n = static_cast<Eigen::Index>(knots.size());
    Eigen::MatrixXd slopes(values.rows(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index a = i - 1, b = i + 1;
      double ta, tb;
      Eigen::VectorXd va, vb;
      if (i == 0) {
        if (periodic) {
          va = values.col(n - 2);
          ta = knots[0] - (knots[static_cast<std::size_t>(n - 1)] - knots[static_cast<std::size_t>(n - 2)]);
        } else {
          va = values.col(0);
          ta = knots[0];
        }
        vb = values.col(1);
        tb = knots[1];
      } else if (i == n - 1) {
        va = values.col(a);
        ta = knots[static_cast<std::size_t>(a)];
        if (periodic) {
          vb = values.col(1);
          tb = knots.back() + (knots[1] - knots[0]);
        } else {
          vb = values.col(i);
          tb = knots.back();
        }
      } else {
        va = values.col(a);
        vb = values.col(b);
        ta = knots[static_cast<std::size_t>(a)];
        tb = knots[static_cast<std::size_t>(b)];
      }
      slopes.col(i) = (vb - va) / (tb - ta);
    }
    return HermiteSpline(std::move(knots), std::move(values), std::move(slopes));
  }

  Eigen::Index dim() const { return values_.rows(); }
  double front() const { return knots_.front(); }
  double back() const { return knots_.back(); }
  const std::vector<double>& knots() const { return knots_; }
  const Eigen::MatrixXd& values() const { return values_; }
  const Eigen::MatrixXd& slopes() const { return slopes_; }

  Eigen::VectorXd value(double t) const {
    const auto [i, s, h] = locate(t);
    const double s2 = s * s, s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * values_.col(i) + (s3 - 2 * s2 + s) * h * slopes_.col(i) +
           (-2 * s3 + 3 * s2) * values_.col(i + 1) + (s3 - s2) * h * slopes_.col(i + 1);
  }

  Eigen::VectorXd derivative(double t) const {
    const auto [i, s, h] = locate(t);
    const double s2 = s * s;
    return ((6 * s2 - 6 * s) * values_.col(i) + (-6 * s2 + 6 * s) * values_.col(i + 1)) / h +
           (3 * s2 - 4 * s + 1) * slopes_.col(i) + (3 * s2 - 2 * s) * slopes_.col(i + 1);
  }

  Eigen::VectorXd second_derivative(double t) const {
    const auto [i, s, h] = locate(t);
    return ((12 * s - 6) * values_.col(i) + (-12 * s + 6) * values_.col(i + 1)) / (h * h) +
           ((6 * s - 4) * slopes_.col(i) + (6 * s - 2) * slopes_.col(i + 1)) / h;
  }

 private:
  struct Where {
    Eigen::Index i;
    double s, h;
  };

  Where locate(double t) const {
    const auto n = static_cast<Eigen::Index>(knots_.size());
    t = std::clamp(t, knots_.front(), knots_.back());
    Eigen::Index i;
    if (uniform_) {
      const double h = (knots_.back() - knots_.front()) / static_cast<double>(n - 1);
      i = static_cast<Eigen::Index>((t - knots_.front()) / h);
      i = std::clamp<Eigen::Index>(i, 0, n - 2);
      // guard against rounding at knot boundaries
      if (t < knots_[static_cast<std::size_t>(i)] && i > 0) --i;
      if (t > knots_[static_cast<std::size_t>(i + 1)] && i < n - 2) ++i;
    } else {
      auto it = std::upper_bound(knots_.begin(), knots_.end(), t);
      i = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(it - knots_.begin()) - 1, 0, n - 2);
    }
    const double t0 = knots_[static_cast<std::size_t>(i)];
    const double h = knots_[static_cast<std::size_t>(i + 1)] - t0;
    return {i, (t - t0) / h, h};
  }

  std::vector<double> knots_;
  Eigen::MatrixXd values_, slopes_;
  bool uniform_ = false;
};

}  // namespace hroa
