#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "reflgrad/errors.hpp"

namespace reflgrad {

struct adam_options {
  double lr = 0.05;
  std::size_t iterations = 2000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct adam_result {
  std::vector<double> best_x;
  double best_value = 0.0;
  std::size_t best_iteration = 0;  // index into trace
  std::vector<double> final_x;
  double final_value = 0.0;
  std::vector<double> trace;  // trace[t] is the loss at iterate t; trace[0] at x0
};

// Minimizes f with bias-corrected Adam.  f(x, grad) returns the loss at x and
// writes the gradient into grad.  Returns the best iterate seen, which for an
// oscillating trajectory can beat the final one.
template <class F>
adam_result adam_minimize(F&& f, std::span<const double> x0,
                          const adam_options& opt = {}) {
  if (opt.iterations < 1) throw config_error("optimizer needs at least one iteration");
  if (!(opt.lr > 0.0)) throw config_error("learning rate must be positive");
  const std::size_t n = x0.size();
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> g(n, 0.0), m(n, 0.0), v(n, 0.0);

  adam_result res;
  res.trace.reserve(opt.iterations + 1);

  double fx = f(std::span<const double>(x), std::span<double>(g));
  if (!std::isfinite(fx)) throw numeric_error("non-finite loss at the starting point");
  res.trace.push_back(fx);
  res.best_x = x;
  res.best_value = fx;
  res.best_iteration = 0;

  double b1t = 1.0, b2t = 1.0;
  for (std::size_t t = 1; t <= opt.iterations; ++t) {
    b1t *= opt.beta1;
    b2t *= opt.beta2;
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      double mhat = m[i] / (1.0 - b1t);
      double vhat = v[i] / (1.0 - b2t);
      x[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    fx = f(std::span<const double>(x), std::span<double>(g));
    if (!std::isfinite(fx))
      throw numeric_error("non-finite loss at iteration " + std::to_string(t));
    res.trace.push_back(fx);
    if (fx < res.best_value) {
      res.best_value = fx;
      res.best_x = x;
      res.best_iteration = t;
    }
  }
  res.final_x = std::move(x);
  res.final_value = fx;
  return res;
}

}  // namespace reflgrad
