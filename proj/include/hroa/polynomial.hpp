#pragma once

// Sparse multivariate polynomials over double coefficients, truncated Taylor
// arithmetic (Jet) used for automatic Taylor expansion, and graded-lex
// monomial bases for Gram parameterisations.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <cmath>
#include <compare>
#include <cstddef>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hroa/error.hpp"

namespace hroa {

class Monomial {
 public:
  Monomial() = default;
  explicit Monomial(std::size_t num_vars) : exponents_(num_vars, 0u) {}
  explicit Monomial(std::vector<unsigned> exponents)
      : exponents_(std::move(exponents)) {}

  static Monomial variable(std::size_t num_vars, std::size_t index,
                           unsigned power = 1) {
    if (index >= num_vars) throw DimensionError("monomial variable index out of range");
    Monomial m(num_vars);
    m.exponents_[index] = power;
    return m;
  }

  std::size_t num_vars() const { return exponents_.size(); }
  const std::vector<unsigned>& exponents() const { return exponents_; }
  unsigned operator[](std::size_t i) const { return exponents_[i]; }

  unsigned degree() const {
    return std::accumulate(exponents_.begin(), exponents_.end(), 0u);
  }

  Monomial operator*(const Monomial& other) const {
    if (other.num_vars() != num_vars()) throw DimensionError("monomial variable count mismatch");
    Monomial r(*this);
    for (std::size_t i = 0; i < exponents_.size(); ++i) r.exponents_[i] += other.exponents_[i];
    return r;
  }

  double evaluate(std::span<const double> x) const {
    double v = 1.0;
    for (std::size_t i = 0; i < exponents_.size(); ++i)
      for (unsigned k = 0; k < exponents_[i]; ++k) v *= x[i];
    return v;
  }

  friend bool operator==(const Monomial&, const Monomial&) = default;

  // Graded lexicographic: lower total degree first; within a degree the
  // exponent vector compares in descending lexicographic order, giving
  // 1, x1, x2, x1^2, x1 x2, x2^2, ...
  friend std::strong_ordering operator<=>(const Monomial& a, const Monomial& b) {
    const unsigned da = a.degree(), db = b.degree();
    if (da != db) return da <=> db;
    for (std::size_t i = 0; i < std::min(a.num_vars(), b.num_vars()); ++i) {
      if (a.exponents_[i] != b.exponents_[i]) return b.exponents_[i] <=> a.exponents_[i];
    }
    return a.num_vars() <=> b.num_vars();
  }

 private:
  std::vector<unsigned> exponents_;
};

/// All monomials in `num_vars` variables with total degree in
/// [min_degree, max_degree], graded lexicographic order.
inline std::vector<Monomial> monomial_basis(std::size_t num_vars, unsigned max_degree,
                                            unsigned min_degree = 0) {
  std::vector<Monomial> out;
  std::vector<unsigned> e(num_vars, 0u);
  for (unsigned d = min_degree; d <= max_degree; ++d) {
    if (num_vars == 0) {
      if (d == 0) out.emplace_back(std::vector<unsigned>{});
      continue;
    }
    // Enumerate compositions of d into num_vars parts, first exponent largest first.
    std::function<void(std::size_t, unsigned)> rec = [&](std::size_t i, unsigned left) {
      if (i + 1 == num_vars) {
        e[i] = left;
        out.emplace_back(e);
        return;
      }
      for (unsigned k = left + 1; k-- > 0;) {
        e[i] = k;
        rec(i + 1, left - k);
      }
    };
    rec(0, d);
  }
  return out;
}

class Polynomial {
 public:
  using TermMap = std::map<Monomial, double>;

  explicit Polynomial(std::size_t num_vars = 0) : num_vars_(num_vars) {}

  Polynomial(std::size_t num_vars,
             std::initializer_list<std::pair<std::vector<unsigned>, double>> terms)
      : num_vars_(num_vars) {
    for (const auto& [e, c] : terms) add_term(Monomial(e), c);
  }

  static Polynomial constant(std::size_t num_vars, double c) {
    Polynomial p(num_vars);
    p.add_term(Monomial(num_vars), c);
    return p;
  }

  static Polynomial variable(std::size_t num_vars, std::size_t index) {
    Polynomial p(num_vars);
    p.add_term(Monomial::variable(num_vars, index), 1.0);
    return p;
  }

  static Polynomial monomial(const Monomial& m, double c = 1.0) {
    Polynomial p(m.num_vars());
    p.add_term(m, c);
    return p;
  }

  /// Linear form sum_i w_i x_i.
  static Polynomial linear(std::span<const double> w) {
    Polynomial p(w.size());
    for (std::size_t i = 0; i < w.size(); ++i)
      p.add_term(Monomial::variable(w.size(), i), w[i]);
    return p;
  }

  /// Quadratic form x' M x.
  static Polynomial quadratic_form(const Eigen::MatrixXd& m) {
    const std::size_t n = static_cast<std::size_t>(m.rows());
    Polynomial p(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        Monomial mono = Monomial::variable(n, i) * Monomial::variable(n, j);
        p.add_term(mono, m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      }
    return p;
  }

  std::size_t num_vars() const { return num_vars_; }
  const TermMap& terms() const { return terms_; }
  bool is_zero() const { return terms_.empty(); }
  std::size_t size() const { return terms_.size(); }

  int degree() const {
    int d = -1;
    for (const auto& [m, c] : terms_) d = std::max(d, static_cast<int>(m.degree()));
    return d;
  }

  int min_degree() const {
    int d = -1;
    for (const auto& [m, c] : terms_)
      d = d < 0 ? static_cast<int>(m.degree()) : std::min(d, static_cast<int>(m.degree()));
    return d;
  }

  double coefficient(const Monomial& m) const {
    auto it = terms_.find(m);
    return it == terms_.end() ? 0.0 : it->second;
  }

  double constant_term() const { return coefficient(Monomial(num_vars_)); }

  void add_term(const Monomial& m, double c) {
    if (m.num_vars() != num_vars_) throw DimensionError("term variable count mismatch");
    if (c == 0.0) return;
    auto [it, inserted] = terms_.emplace(m, c);
    if (!inserted) {
      it->second += c;
      if (it->second == 0.0) terms_.erase(it);
    }
  }

  double max_abs_coefficient() const {
    double r = 0.0;
    for (const auto& [m, c] : terms_) r = std::max(r, std::abs(c));
    return r;
  }

  double evaluate(std::span<const double> x) const {
    if (x.size() != num_vars_) throw DimensionError("evaluation point has wrong dimension");
    if (terms_.empty()) return 0.0;
    const unsigned max_deg = static_cast<unsigned>(std::max(degree(), 0));
    // Power table: pw[i*(max_deg+1)+k] = x_i^k
    std::vector<double> pw(num_vars_ * (max_deg + 1));
    for (std::size_t i = 0; i < num_vars_; ++i) {
      double v = 1.0;
      for (unsigned k = 0; k <= max_deg; ++k) {
        pw[i * (max_deg + 1) + k] = v;
        v *= x[i];
      }
    }
    double sum = 0.0;
    for (const auto& [m, c] : terms_) {
      double t = c;
      for (std::size_t i = 0; i < num_vars_; ++i) t *= pw[i * (max_deg + 1) + m[i]];
      sum += t;
    }
    return sum;
  }

  double evaluate(const Eigen::VectorXd& x) const {
    return evaluate(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
  }

  Polynomial differentiate(std::size_t index) const {
    if (index >= num_vars_) throw DimensionError("differentiation index out of range");
    Polynomial r(num_vars_);
    for (const auto& [m, c] : terms_) {
      if (m[index] == 0) continue;
      std::vector<unsigned> e = m.exponents();
      const double k = e[index];
      e[index] -= 1;
      r.add_term(Monomial(std::move(e)), c * k);
    }
    return r;
  }

  /// Drops all terms of total degree above `order`.
  Polynomial truncated(unsigned order) const {
    Polynomial r(num_vars_);
    for (const auto& [m, c] : terms_)
      if (m.degree() <= order) r.terms_.emplace_hint(r.terms_.end(), m, c);
    return r;
  }

  /// Terms of exactly the given total degree.
  Polynomial homogeneous_part(unsigned deg) const {
    Polynomial r(num_vars_);
    for (const auto& [m, c] : terms_)
      if (m.degree() == deg) r.terms_.emplace_hint(r.terms_.end(), m, c);
    return r;
  }

  /// p(scale_1 y_1, ..., scale_n y_n) as a polynomial in y.
  Polynomial scale_variables(std::span<const double> scale) const {
    if (scale.size() != num_vars_) throw DimensionError("scale vector has wrong dimension");
    Polynomial r(num_vars_);
    for (const auto& [m, c] : terms_) {
      double f = c;
      for (std::size_t i = 0; i < num_vars_; ++i) f *= std::pow(scale[i], static_cast<int>(m[i]));
      r.add_term(m, f);
    }
    return r;
  }

  /// Substitutes polynomial expressions (all in a common variable set) for
  /// each variable; truncates to `max_order` when given.
  Polynomial compose(const std::vector<Polynomial>& subs,
                     int max_order = std::numeric_limits<int>::max()) const;

  Polynomial& operator+=(const Polynomial& o) {
    check_same(o);
    for (const auto& [m, c] : o.terms_) add_term(m, c);
    return *this;
  }
  Polynomial& operator-=(const Polynomial& o) {
    check_same(o);
    for (const auto& [m, c] : o.terms_) add_term(m, -c);
    return *this;
  }
  Polynomial& operator*=(double s) {
    if (s == 0.0) {
      terms_.clear();
      return *this;
    }
    for (auto& [m, c] : terms_) c *= s;
    return *this;
  }

  friend Polynomial operator+(Polynomial a, const Polynomial& b) { return a += b; }
  friend Polynomial operator-(Polynomial a, const Polynomial& b) { return a -= b; }
  friend Polynomial operator-(Polynomial a) { return a *= -1.0; }
  friend Polynomial operator*(Polynomial a, double s) { return a *= s; }
  friend Polynomial operator*(double s, Polynomial a) { return a *= s; }
  friend Polynomial operator+(Polynomial a, double s) {
    a.add_term(Monomial(a.num_vars_), s);
    return a;
  }
  friend Polynomial operator-(Polynomial a, double s) { return a + (-s); }

  friend Polynomial operator*(const Polynomial& a, const Polynomial& b) {
    return multiply(a, b, std::numeric_limits<unsigned>::max());
  }

  /// Product keeping only terms of total degree <= order.
  static Polynomial multiply(const Polynomial& a, const Polynomial& b, unsigned order) {
    a.check_same(b);
    Polynomial r(a.num_vars_);
    for (const auto& [ma, ca] : a.terms_) {
      const unsigned da = ma.degree();
      if (da > order) continue;
      for (const auto& [mb, cb] : b.terms_) {
        if (da + mb.degree() > order) continue;
        r.add_term(ma * mb, ca * cb);
      }
    }
    return r;
  }

  friend bool operator==(const Polynomial&, const Polynomial&) = default;

  /// Text form "c * x1^a x2^b + ...", coefficients at 17 significant digits.
  std::string to_string() const {
    if (terms_.empty()) return "0";
    std::ostringstream os;
    os << std::setprecision(17);
    bool first = true;
    for (const auto& [m, c] : terms_) {
      double a = c;
      if (first) {
        first = false;
      } else {
        os << (c < 0 ? " - " : " + ");
        a = std::abs(c);
      }
      os << a;
      bool star = false;
      for (std::size_t i = 0; i < num_vars_; ++i) {
        if (m[i] == 0) continue;
        os << (star ? " " : " * ") << 'x' << (i + 1);
        if (m[i] > 1) os << '^' << m[i];
        star = true;
      }
    }
    return os.str();
  }

  static Polynomial from_string(std::size_t num_vars, const std::string& text);

  nlohmann::json to_json() const {
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& [m, c] : terms_) terms.push_back({m.exponents(), c});
    return {{"num_vars", num_vars_}, {"terms", terms}};
  }

  static Polynomial from_json(const nlohmann::json& j) {
    Polynomial p(j.at("num_vars").get<std::size_t>());
    for (const auto& t : j.at("terms"))
      p.add_term(Monomial(t.at(0).get<std::vector<unsigned>>()), t.at(1).get<double>());
    return p;
  }

 private:
  void check_same(const Polynomial& o) const {
    if (o.num_vars_ != num_vars_) throw DimensionError("polynomial variable count mismatch");
  }

  std::size_t num_vars_;
  TermMap terms_;
};

inline Polynomial Polynomial::compose(const std::vector<Polynomial>& subs, int max_order) const {
  if (subs.size() != num_vars_) throw DimensionError("composition needs one polynomial per variable");
  const std::size_t nv = subs.empty() ? 0 : subs.front().num_vars();
  const unsigned order = max_order < 0 ? 0u : static_cast<unsigned>(max_order);
  Polynomial r(nv);
  // Cache powers of each substituted polynomial.
  std::vector<std::vector<Polynomial>> powers(num_vars_);
  for (const auto& [m, c] : terms_) {
    Polynomial term = Polynomial::constant(nv, c);
    for (std::size_t i = 0; i < num_vars_; ++i) {
      auto& pw = powers[i];
      if (pw.empty()) pw.push_back(Polynomial::constant(nv, 1.0));
      while (pw.size() <= m[i]) pw.push_back(multiply(pw.back(), subs[i], order));
      if (m[i] > 0) term = multiply(term, pw[m[i]], order);
    }
    r += term;
  }
  return r;
}

inline Polynomial Polynomial::from_string(std::size_t num_vars, const std::string& text) {
  Polynomial p(num_vars);
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  };
  auto fail = [&](const std::string& why) {
    throw InvalidArgument("cannot parse polynomial '" + text + "': " + why);
  };
  skip_ws();
  if (text.compare(pos, std::string::npos, "0") == 0) return p;
  double sign = 1.0;
  bool first = true;
  while (true) {
    skip_ws();
    if (pos >= text.size()) break;
    if (!first) {
      if (text[pos] == '+') sign = 1.0;
      else if (text[pos] == '-') sign = -1.0;
      else fail("expected '+' or '-'");
      ++pos;
      skip_ws();
    }
    first = false;
    const char* begin = text.c_str() + pos;
    char* end = nullptr;
    const double c = std::strtod(begin, &end);
    if (end == begin) fail("expected coefficient");
    pos += static_cast<std::size_t>(end - begin);
    std::vector<unsigned> e(num_vars, 0u);
    skip_ws();
    if (pos < text.size() && text[pos] == '*') {
      ++pos;
      while (true) {
        skip_ws();
        if (pos >= text.size() || text[pos] != 'x') break;
        ++pos;
        std::size_t used = 0;
        const unsigned long idx = std::stoul(text.substr(pos), &used);
        pos += used;
        unsigned pw = 1;
        if (pos < text.size() && text[pos] == '^') {
          ++pos;
          pw = static_cast<unsigned>(std::stoul(text.substr(pos), &used));
          pos += used;
        }
        if (idx == 0 || idx > num_vars) fail("variable index out of range");
        e[idx - 1] += pw;
      }
    }
    p.add_term(Monomial(std::move(e)), sign * c);
  }
  return p;
}

/// Truncated multivariate Taylor series: a polynomial in displacement
/// variables carrying all terms up to a fixed total order. Arithmetic on Jets
/// is exact automatic differentiation of that order.
class Jet {
 public:
  Jet() = default;
  Jet(Polynomial p, unsigned order) : poly_(std::move(p).truncated(order)), order_(order) {}

  static Jet constant(std::size_t num_vars, unsigned order, double c) {
    return Jet(Polynomial::constant(num_vars, c), order);
  }

  /// The independent variable `value + d_index`.
  static Jet variable(std::size_t num_vars, unsigned order, std::size_t index, double value) {
    Polynomial p = Polynomial::variable(num_vars, index);
    p.add_term(Monomial(num_vars), value);
    return Jet(std::move(p), order);
  }

  const Polynomial& polynomial() const { return poly_; }
  unsigned order() const { return order_; }
  std::size_t num_vars() const { return poly_.num_vars(); }
  double value() const { return poly_.constant_term(); }

  Jet& operator+=(const Jet& o) {
    poly_ += o.poly_;
    return *this;
  }
  Jet& operator-=(const Jet& o) {
    poly_ -= o.poly_;
    return *this;
  }
  Jet& operator*=(const Jet& o) {
    poly_ = Polynomial::multiply(poly_, o.poly_, order_);
    return *this;
  }
  Jet& operator/=(const Jet& o) { return *this *= inverse(o); }

  friend Jet operator+(Jet a, const Jet& b) { return a += b; }
  friend Jet operator-(Jet a, const Jet& b) { return a -= b; }
  friend Jet operator*(Jet a, const Jet& b) { return a *= b; }
  friend Jet operator/(Jet a, const Jet& b) { return a /= b; }
  friend Jet operator-(Jet a) {
    a.poly_ *= -1.0;
    return a;
  }
  friend Jet operator+(Jet a, double s) {
    a.poly_ = a.poly_ + s;
    return a;
  }
  friend Jet operator+(double s, Jet a) { return std::move(a) + s; }
  friend Jet operator-(Jet a, double s) { return std::move(a) + (-s); }
  friend Jet operator-(double s, Jet a) { return (-std::move(a)) + s; }
  friend Jet operator*(Jet a, double s) {
    a.poly_ *= s;
    return a;
  }
  friend Jet operator*(double s, Jet a) { return std::move(a) * s; }
  friend Jet operator/(Jet a, double s) { return std::move(a) * (1.0 / s); }
  friend Jet operator/(double s, const Jet& a) { return inverse(a) * s; }

  /// g(c + q) = sum_k coeffs[k] q^k with q the nilpotent part.
  static Jet series(const Jet& x, const std::vector<double>& coeffs) {
    const double c = x.value();
    Polynomial q = x.poly_;
    q.add_term(Monomial(x.num_vars()), -c);
    Polynomial result = Polynomial::constant(x.num_vars(), coeffs[0]);
    Polynomial qk = Polynomial::constant(x.num_vars(), 1.0);
    for (unsigned k = 1; k <= x.order_ && k < coeffs.size(); ++k) {
      qk = Polynomial::multiply(qk, q, x.order_);
      if (qk.is_zero()) break;
      result += qk * coeffs[k];
    }
    return Jet(std::move(result), x.order_);
  }

  friend Jet inverse(const Jet& x) {
    const double c = x.value();
    if (c == 0.0) throw SingularityError("division by a jet with zero constant part");
    std::vector<double> k(x.order_ + 1);
    double t = 1.0 / c;
    for (unsigned i = 0; i <= x.order_; ++i) {
      k[i] = t;
      t *= -1.0 / c;
    }
    return series(x, k);
  }

  friend Jet sin(const Jet& x) {
    const double s = std::sin(x.value()), co = std::cos(x.value());
    std::vector<double> k(x.order_ + 1);
    const double cyc[4] = {s, co, -s, -co};
    double fact = 1.0;
    for (unsigned i = 0; i <= x.order_; ++i) {
      if (i > 0) fact *= i;
      k[i] = cyc[i % 4] / fact;
    }
    return series(x, k);
  }

  friend Jet cos(const Jet& x) {
    const double s = std::sin(x.value()), co = std::cos(x.value());
    std::vector<double> k(x.order_ + 1);
    const double cyc[4] = {co, -s, -co, s};
    double fact = 1.0;
    for (unsigned i = 0; i <= x.order_; ++i) {
      if (i > 0) fact *= i;
      k[i] = cyc[i % 4] / fact;
    }
    return series(x, k);
  }

  friend Jet exp(const Jet& x) {
    const double e = std::exp(x.value());
    std::vector<double> k(x.order_ + 1);
    double fact = 1.0;
    for (unsigned i = 0; i <= x.order_; ++i) {
      if (i > 0) fact *= i;
      k[i] = e / fact;
    }
    return series(x, k);
  }

  friend Jet sqrt(const Jet& x) {
    const double c = x.value();
    if (c <= 0.0) throw SingularityError("sqrt of a jet with non-positive constant part");
    // (c+q)^(1/2) = sqrt(c) * sum binom(1/2, k) (q/c)^k
    std::vector<double> k(x.order_ + 1);
    double binom = 1.0;
    for (unsigned i = 0; i <= x.order_; ++i) {
      k[i] = std::sqrt(c) * binom / std::pow(c, static_cast<int>(i));
      binom *= (0.5 - i) / (i + 1.0);
    }
    return series(x, k);
  }

 private:
  Polynomial poly_;
  unsigned order_ = 0;
};

/// Vector function on jets; the Taylor expansion entry point.
using JetFunction = std::function<std::vector<Jet>(std::span<const Jet>)>;

/// Per-component Taylor polynomials of f about `center`, in the displacement
/// variables d = x - center, truncated at total degree `order`.
inline std::vector<Polynomial> taylor(const JetFunction& f, std::span<const double> center,
                                      unsigned order) {
  if (order < 1) throw InvalidArgument("taylor order must be at least 1");
  const std::size_t n = center.size();
  std::vector<Jet> vars;
  vars.reserve(n);
  for (std::size_t i = 0; i < n; ++i) vars.push_back(Jet::variable(n, order, i, center[i]));
  std::vector<Jet> out;
  try {
    out = f(vars);
  } catch (const Error& e) {
    throw Error(std::string("taylor expansion failed: ") + e.what());
  }
  std::vector<Polynomial> polys;
  polys.reserve(out.size());
  for (auto& j : out) polys.push_back(j.polynomial());
  return polys;
}

}  // namespace hroa
