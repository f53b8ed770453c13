#pragma once

// Reverse-mode automatic differentiation on a Wengert tape.
//
// Local partial derivatives are computed eagerly as operations execute, so a
// node only stores parent indices and weights.  Most operations have at most
// two parents and live inline in the node array; operations with many parents
// (fused kernel evaluations) spill their parent lists into a side array.
// Expressions built purely from constants never touch the tape.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "reflgrad/errors.hpp"
#include "reflgrad/scalar.hpp"

namespace reflgrad::ad {

class tape {
 public:
  struct node {
    double w0, w1;
    std::int32_t p0, p1;
  };

  static constexpr std::int32_t no_parent = -1;
  static constexpr std::int32_t kary_tag = -2;

  std::int32_t leaf() {
    nodes_.push_back({0.0, 0.0, no_parent, no_parent});
    return last_index();
  }
  std::int32_t unary(std::int32_t p, double w) {
    nodes_.push_back({w, 0.0, p, no_parent});
    return last_index();
  }
  std::int32_t binary(std::int32_t pa, double wa, std::int32_t pb, double wb) {
    nodes_.push_back({wa, wb, pa, pb});
    return last_index();
  }
  std::int32_t kary(std::span<const std::int32_t> parents, std::span<const double> weights) {
    kspan ks{static_cast<std::uint32_t>(spill_.size()),
             static_cast<std::uint32_t>(parents.size())};
    for (std::size_t i = 0; i < parents.size(); ++i) spill_.push_back({parents[i], weights[i]});
    nodes_.push_back({0.0, 0.0, kary_tag, static_cast<std::int32_t>(kspans_.size())});
    kspans_.push_back(ks);
    return last_index();
  }

  void clear() {
    nodes_.clear();
    spill_.clear();
    kspans_.clear();
  }
  std::size_t size() const { return nodes_.size(); }

  // Accumulates d(node `out`)/d(node i) into adj[i] for every node.
  void backward(std::int32_t out, std::vector<double>& adj) const {
    adj.assign(nodes_.size(), 0.0);
    adj[static_cast<std::size_t>(out)] = 1.0;
    for (std::int32_t i = out; i >= 0; --i) {
      double a = adj[static_cast<std::size_t>(i)];
      if (a == 0.0) continue;
      const node& nd = nodes_[static_cast<std::size_t>(i)];
      if (nd.p0 == kary_tag) {
        const kspan& ks = kspans_[static_cast<std::size_t>(nd.p1)];
        for (std::uint32_t k = 0; k < ks.len; ++k) {
          const entry& e = spill_[ks.off + k];
          adj[static_cast<std::size_t>(e.p)] += e.w * a;
        }
      } else {
        if (nd.p0 >= 0) adj[static_cast<std::size_t>(nd.p0)] += nd.w0 * a;
        if (nd.p1 >= 0) adj[static_cast<std::size_t>(nd.p1)] += nd.w1 * a;
      }
    }
  }

 private:
  struct entry {
    std::int32_t p;
    double w;
  };
  struct kspan {
    std::uint32_t off, len;
  };

  std::int32_t last_index() const { return static_cast<std::int32_t>(nodes_.size()) - 1; }

  std::vector<node> nodes_;
  std::vector<entry> spill_;
  std::vector<kspan> kspans_;
};

inline tape*& active_tape() {
  thread_local tape* t = nullptr;
  return t;
}

// Scoped activation of a tape; evaluation functions nest safely.
class tape_scope {
 public:
  explicit tape_scope(tape& t) : prev_(active_tape()) { active_tape() = &t; }
  ~tape_scope() { active_tape() = prev_; }
  tape_scope(const tape_scope&) = delete;
  tape_scope& operator=(const tape_scope&) = delete;

 private:
  tape* prev_;
};

class var {
 public:
  var() : v_(0.0), i_(tape::no_parent) {}
  var(double v) : v_(v), i_(tape::no_parent) {}
  var(double v, std::int32_t i) : v_(v), i_(i) {}

  static var leaf(double v) { return var(v, active_tape()->leaf()); }

  double val() const { return v_; }
  std::int32_t index() const { return i_; }
  bool is_const() const { return i_ < 0; }

  var& operator+=(const var& o);
  var& operator-=(const var& o);
  var& operator*=(const var& o);
  var& operator/=(const var& o);

 private:
  double v_;
  std::int32_t i_;
};

namespace detail {
inline var unary(const var& x, double val, double dx) {
  if (x.is_const()) return var(val);
  return var(val, active_tape()->unary(x.index(), dx));
}
inline var binary(const var& a, const var& b, double val, double da, double db) {
  bool ca = a.is_const(), cb = b.is_const();
  if (ca && cb) return var(val);
  if (cb) return var(val, active_tape()->unary(a.index(), da));
  if (ca) return var(val, active_tape()->unary(b.index(), db));
  return var(val, active_tape()->binary(a.index(), da, b.index(), db));
}
}  // namespace detail

inline var operator+(const var& a, const var& b) {
  return detail::binary(a, b, a.val() + b.val(), 1.0, 1.0);
}
inline var operator-(const var& a, const var& b) {
  return detail::binary(a, b, a.val() - b.val(), 1.0, -1.0);
}
inline var operator*(const var& a, const var& b) {
  return detail::binary(a, b, a.val() * b.val(), b.val(), a.val());
}
inline var operator/(const var& a, const var& b) {
  double inv = 1.0 / b.val();
  return detail::binary(a, b, a.val() * inv, inv, -a.val() * inv * inv);
}
inline var operator-(const var& a) { return detail::unary(a, -a.val(), -1.0); }

inline var operator+(const var& a, double b) { return detail::unary(a, a.val() + b, 1.0); }
inline var operator+(double a, const var& b) { return detail::unary(b, a + b.val(), 1.0); }
inline var operator-(const var& a, double b) { return detail::unary(a, a.val() - b, 1.0); }
inline var operator-(double a, const var& b) { return detail::unary(b, a - b.val(), -1.0); }
inline var operator*(const var& a, double b) { return detail::unary(a, a.val() * b, b); }
inline var operator*(double a, const var& b) { return detail::unary(b, a * b.val(), a); }
inline var operator/(const var& a, double b) { return detail::unary(a, a.val() / b, 1.0 / b); }
inline var operator/(double a, const var& b) {
  double inv = 1.0 / b.val();
  return detail::unary(b, a * inv, -a * inv * inv);
}

inline var& var::operator+=(const var& o) { return *this = *this + o; }
inline var& var::operator-=(const var& o) { return *this = *this - o; }
inline var& var::operator*=(const var& o) { return *this = *this * o; }
inline var& var::operator/=(const var& o) { return *this = *this / o; }

inline bool operator<(const var& a, const var& b) { return a.val() < b.val(); }
inline bool operator>(const var& a, const var& b) { return a.val() > b.val(); }
inline bool operator<=(const var& a, const var& b) { return a.val() <= b.val(); }
inline bool operator>=(const var& a, const var& b) { return a.val() >= b.val(); }
inline bool operator==(const var& a, const var& b) { return a.val() == b.val(); }
inline bool operator!=(const var& a, const var& b) { return a.val() != b.val(); }

inline var exp(const var& x) {
  double e = std::exp(x.val());
  return detail::unary(x, e, e);
}
inline var log(const var& x) { return detail::unary(x, std::log(x.val()), 1.0 / x.val()); }
inline var log1p(const var& x) {
  return detail::unary(x, std::log1p(x.val()), 1.0 / (1.0 + x.val()));
}
inline var sqrt(const var& x) {
  double s = std::sqrt(x.val());
  return detail::unary(x, s, 0.5 / s);
}
inline var sin(const var& x) { return detail::unary(x, std::sin(x.val()), std::cos(x.val())); }
inline var cos(const var& x) { return detail::unary(x, std::cos(x.val()), -std::sin(x.val())); }
inline var erf(const var& x) {
  // d erf/dx = 2/sqrt(pi) * exp(-x^2)
  return detail::unary(x, std::erf(x.val()),
                       1.1283791670955126 * std::exp(-x.val() * x.val()));
}
inline var fabs(const var& x) {
  double s = x.val() > 0.0 ? 1.0 : (x.val() < 0.0 ? -1.0 : 0.0);
  return detail::unary(x, std::fabs(x.val()), s);
}
inline var pow(const var& x, double p) {
  return detail::unary(x, std::pow(x.val(), p), p * std::pow(x.val(), p - 1.0));
}
inline var fmax(const var& a, const var& b) { return a.val() >= b.val() ? a : b; }
inline var fmin(const var& a, const var& b) { return a.val() <= b.val() ? a : b; }

inline bool isfinite(const var& v) { return std::isfinite(v.val()); }

// Multi-parent node with precomputed partials; used by fused evaluations that
// differentiate a whole sub-graph by hand.  Parent indices must refer to live
// tape nodes.
inline var kary_var(double value, std::span<const std::int32_t> parents,
                    std::span<const double> weights) {
  if (parents.empty()) return var(value);
  return var(value, active_tape()->kary(parents, weights));
}

// ---------------------------------------------------------------------------
// Checked evaluation: mirrors var but verifies every result is finite and
// names the operation that produced the first non-finite value.

struct checked {
  var v;
  checked() = default;
  checked(double d) : v(d) {}
  checked(const var& x) : v(x) {}
  double val() const { return v.val(); }
};

namespace detail {
inline checked guard(const var& r, const char* op) {
  if (!std::isfinite(r.val()))
    throw numeric_error(std::string("non-finite value produced by operation '") + op + "'");
  return checked(r);
}
}  // namespace detail

inline checked operator+(const checked& a, const checked& b) { return detail::guard(a.v + b.v, "add"); }
inline checked operator-(const checked& a, const checked& b) { return detail::guard(a.v - b.v, "sub"); }
inline checked operator*(const checked& a, const checked& b) { return detail::guard(a.v * b.v, "mul"); }
inline checked operator/(const checked& a, const checked& b) { return detail::guard(a.v / b.v, "div"); }
inline checked operator-(const checked& a) { return checked(-a.v); }
inline checked operator+(const checked& a, double b) { return detail::guard(a.v + b, "add"); }
inline checked operator+(double a, const checked& b) { return detail::guard(a + b.v, "add"); }
inline checked operator-(const checked& a, double b) { return detail::guard(a.v - b, "sub"); }
inline checked operator-(double a, const checked& b) { return detail::guard(a - b.v, "sub"); }
inline checked operator*(const checked& a, double b) { return detail::guard(a.v * b, "mul"); }
inline checked operator*(double a, const checked& b) { return detail::guard(a * b.v, "mul"); }
inline checked operator/(const checked& a, double b) { return detail::guard(a.v / b, "div"); }
inline checked operator/(double a, const checked& b) { return detail::guard(a / b.v, "div"); }
inline checked& operator+=(checked& a, const checked& b) { return a = a + b; }
inline checked& operator-=(checked& a, const checked& b) { return a = a - b; }
inline checked& operator*=(checked& a, const checked& b) { return a = a * b; }
inline checked& operator/=(checked& a, const checked& b) { return a = a / b; }

inline bool operator<(const checked& a, const checked& b) { return a.val() < b.val(); }
inline bool operator>(const checked& a, const checked& b) { return a.val() > b.val(); }
inline bool operator<=(const checked& a, const checked& b) { return a.val() <= b.val(); }
inline bool operator>=(const checked& a, const checked& b) { return a.val() >= b.val(); }
inline bool operator==(const checked& a, const checked& b) { return a.val() == b.val(); }
inline bool operator!=(const checked& a, const checked& b) { return a.val() != b.val(); }

inline checked exp(const checked& x) { return detail::guard(exp(x.v), "exp"); }
inline checked log(const checked& x) { return detail::guard(log(x.v), "log"); }
inline checked log1p(const checked& x) { return detail::guard(log1p(x.v), "log1p"); }
inline checked sqrt(const checked& x) { return detail::guard(sqrt(x.v), "sqrt"); }
inline checked sin(const checked& x) { return detail::guard(sin(x.v), "sin"); }
inline checked cos(const checked& x) { return detail::guard(cos(x.v), "cos"); }
inline checked erf(const checked& x) { return detail::guard(erf(x.v), "erf"); }
inline checked fabs(const checked& x) { return detail::guard(fabs(x.v), "fabs"); }
inline checked pow(const checked& x, double p) { return detail::guard(pow(x.v, p), "pow"); }
inline checked fmax(const checked& a, const checked& b) { return a.val() >= b.val() ? a : b; }
inline checked fmin(const checked& a, const checked& b) { return a.val() <= b.val() ? a : b; }

// ---------------------------------------------------------------------------

struct value_grad {
  double value = 0.0;
  std::vector<double> grad;
};

namespace detail {

template <class F>
[[noreturn]] void diagnose_nonfinite(F&& f, std::span<const double> x, const char* what) {
  if constexpr (requires(F& fn, std::span<const checked> c) { fn(c); }) {
    tape t;
    tape_scope scope(t);
    std::vector<checked> cx;
    cx.reserve(x.size());
    for (double xi : x) cx.emplace_back(var::leaf(xi));
    checked out = f(std::span<const checked>(cx));  // expected to throw with the op name
    (void)out;
  }
  throw numeric_error(std::string("non-finite ") + what + " in differentiable evaluation");
}

}  // namespace detail

// Evaluates f at x and returns both the value and the full gradient.
// Non-finite results are re-evaluated in checked mode so the error names the
// first offending operation.
template <class F>
value_grad value_and_grad(F&& f, std::span<const double> x) {
  thread_local tape t;
  thread_local std::vector<double> adj;
  t.clear();
  tape_scope scope(t);

  std::vector<var> vx;
  vx.reserve(x.size());
  for (double xi : x) vx.push_back(var::leaf(xi));

  var out = f(std::span<const var>(vx));
  if (!std::isfinite(out.val())) detail::diagnose_nonfinite(f, x, "value");

  value_grad res;
  res.value = out.val();
  res.grad.assign(x.size(), 0.0);
  if (!out.is_const()) {
    t.backward(out.index(), adj);
    for (std::size_t i = 0; i < x.size(); ++i) res.grad[i] = adj[i];
  }
  for (double g : res.grad)
    if (!std::isfinite(g)) detail::diagnose_nonfinite(f, x, "gradient");
  return res;
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check.

struct grad_check_entry {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
  bool near_bound = false;  // step would cross a bound; comparison skipped
  bool ok = true;
};

struct grad_check_report {
  std::vector<grad_check_entry> entries;
  bool all_ok = true;
  std::size_t flagged_boundary = 0;
};

// h is a relative step: each coordinate is perturbed by h * max(1, |x_i|),
// which keeps central differences near their accuracy optimum across widely
// different parameter scales (angstroms to backgrounds).
template <class F>
grad_check_report check_grad(F&& f, std::span<const double> x, double h = 3e-6,
                             double tol = 1e-5,
                             std::span<const std::pair<double, double>> bounds = {},
                             double abs_floor = 1e-8) {
  grad_check_report rep;
  value_grad vg = value_and_grad(f, x);
  std::vector<double> xp(x.begin(), x.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad_check_entry e;
    e.index = i;
    e.analytic = vg.grad[i];
    double hi = h * std::max(1.0, std::fabs(x[i]));
    if (!bounds.empty() &&
        (x[i] - hi <= bounds[i].first || x[i] + hi >= bounds[i].second)) {
      e.near_bound = true;
      rep.flagged_boundary++;
      rep.entries.push_back(e);
      continue;
    }
    double x0 = x[i];
    xp[i] = x0 + hi;
    double fp = f(std::span<const double>(xp));
    xp[i] = x0 - hi;
    double fm = f(std::span<const double>(xp));
    xp[i] = x0;
    e.numeric = (fp - fm) / (2.0 * hi);
    double denom = std::max({std::fabs(e.analytic), std::fabs(e.numeric), abs_floor});
    e.rel_err = std::fabs(e.analytic - e.numeric) / denom;
    e.ok = std::fabs(e.analytic - e.numeric) <= abs_floor || e.rel_err <= tol;
    if (!e.ok) rep.all_ok = false;
    rep.entries.push_back(e);
  }
  return rep;
}

}  // namespace reflgrad::ad
