#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "reflgrad/ad.hpp"
#include "reflgrad/errors.hpp"
#include "reflgrad/model.hpp"
#include "reflgrad/parallel.hpp"
#include "reflgrad/rng.hpp"
#include "reflgrad/slab.hpp"

namespace reflgrad {

// Gaussian surrogate q(u) = N(mu, C C^T) over the unconstrained parameters,
// with C lower triangular and a positive diagonal.
struct variational_posterior {
  std::vector<double> mu;
  std::vector<double> chol;  // packed row-major lower triangle, d(d+1)/2 entries

  std::size_t dim() const { return mu.size(); }
  static std::size_t packed_size(std::size_t d) { return d * (d + 1) / 2; }
  static std::size_t tri_index(std::size_t i, std::size_t j) {
    return i * (i + 1) / 2 + j;
  }

  void validate() const {
    if (mu.empty()) throw config_error("surrogate needs at least one parameter");
    if (chol.size() != packed_size(mu.size()))
      throw config_error("covariance factor size does not match the mean");
    for (std::size_t i = 0; i < mu.size(); ++i)
      if (!(chol[tri_index(i, i)] > 0.0))
        throw config_error("covariance factor needs a positive diagonal");
  }

  static variational_posterior isotropic(std::span<const double> mean, double sigma0) {
    variational_posterior q;
    q.mu.assign(mean.begin(), mean.end());
    q.chol.assign(packed_size(mean.size()), 0.0);
    for (std::size_t i = 0; i < mean.size(); ++i) q.chol[tri_index(i, i)] = sigma0;
    return q;
  }

  // optimization vector: [mu; log diag; strict lower rows]
  std::vector<double> pack() const {
    validate();
    const std::size_t d = dim();
    std::vector<double> phi(d * (d + 3) / 2);
    for (std::size_t i = 0; i < d; ++i) {
      phi[i] = mu[i];
      phi[d + i] = std::log(chol[tri_index(i, i)]);
      for (std::size_t j = 0; j < i; ++j)
        phi[2 * d + i * (i - 1) / 2 + j] = chol[tri_index(i, j)];
    }
    return phi;
  }

  static variational_posterior unpack(std::span<const double> phi, std::size_t d) {
    if (phi.size() != d * (d + 3) / 2)
      throw config_error("surrogate parameter vector has the wrong length");
    variational_posterior q;
    q.mu.assign(phi.begin(), phi.begin() + static_cast<std::ptrdiff_t>(d));
    q.chol.assign(packed_size(d), 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      q.chol[tri_index(i, i)] = std::exp(phi[d + i]);
      for (std::size_t j = 0; j < i; ++j)
        q.chol[tri_index(i, j)] = phi[2 * d + i * (i - 1) / 2 + j];
    }
    return q;
  }

  std::vector<double> cov() const {
    const std::size_t d = dim();
    std::vector<double> s(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k <= std::min(i, j); ++k)
          acc += chol[tri_index(i, k)] * chol[tri_index(j, k)];
        s[i * d + j] = acc;
        s[j * d + i] = acc;
      }
    return s;
  }

  double log_q(std::span<const double> u) const {
    const std::size_t d = dim();
    std::vector<double> y(d);
    double log_diag = 0.0, quad = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double r = u[i] - mu[i];
      for (std::size_t j = 0; j < i; ++j) r -= chol[tri_index(i, j)] * y[j];
      y[i] = r / chol[tri_index(i, i)];
      log_diag += std::log(chol[tri_index(i, i)]);
      quad += y[i] * y[i];
    }
    return -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
           log_diag - 0.5 * quad;
  }
};

inline std::vector<double> sample_u(const variational_posterior& q, rng& r) {
  const std::size_t d = q.dim();
  std::vector<double> eps(d), u(q.mu);
  for (auto& e : eps) e = r.normal();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      u[i] += q.chol[variational_posterior::tri_index(i, j)] * eps[j];
  return u;
}

inline std::vector<std::vector<double>> posterior_sample(const variational_posterior& q,
                                                         const model_spec& spec,
                                                         std::size_t n, rng& r) {
  if (n < 1) throw config_error("sample count must be at least one");
  q.validate();
  std::vector<std::vector<double>> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    auto u = sample_u(q, r);
    out.push_back(spec.from_unconstrained<double>(u).x);
  }
  return out;
}

// Reparameterized single-trajectory ELBO term at fixed noise draws: eps holds
// k concatenated standard-normal vectors and the k terms are averaged.  The
// same expression runs on doubles and on tape variables, so gradients come
// from the tape while estimates stay allocation-light.
template <class T, class Target>
T elbo_at(const Target& target, std::span<const T> phi, std::span<const double> eps,
          std::size_t d) {
  using std::exp;
  const std::size_t k = eps.size() / d;
  std::vector<T> u(d);
  const double log2pi = std::log(2.0 * std::numbers::pi);

  T total = phi[0] - phi[0];  // typed zero anchored on the tape when T is a var
  for (std::size_t s = 0; s < k; ++s) {
    std::span<const double> e = eps.subspan(s * d, d);
    for (std::size_t i = 0; i < d; ++i) {
      T acc = phi[i];
      for (std::size_t j = 0; j < i; ++j)
        acc = acc + phi[2 * d + i * (i - 1) / 2 + j] * e[j];
      acc = acc + exp(phi[d + i]) * e[i];
      u[i] = acc;
    }
    T term = target(std::span<const T>(u));
    double kin = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      term = term + phi[d + i];
      kin += e[i] * e[i];
    }
    total = total + term + (0.5 * kin + 0.5 * static_cast<double>(d) * log2pi);
  }
  return total / static_cast<double>(k);
}

namespace vi_detail {

// Frozen snapshot of a surrogate, used as a quadratic control variate inside
// the training loss.  Subtracting log qbar(u) along the sampling path and
// adding back its closed-form Gaussian expectation keeps the estimator
// unbiased for every phi, while the pathwise noise shrinks to the residual
// between the target and the quadratic snapshot.
struct frozen_gauss {
  std::size_t d = 0;
  std::vector<double> mu;
  std::vector<double> chol;  // packed lower triangle, positive diagonal
  double log_diag = 0.0;

  static frozen_gauss from_packed(std::span<const double> phi, std::size_t d) {
    frozen_gauss f;
    f.d = d;
    f.mu.assign(phi.begin(), phi.begin() + static_cast<std::ptrdiff_t>(d));
    f.chol.assign(variational_posterior::packed_size(d), 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      f.chol[variational_posterior::tri_index(i, i)] = std::exp(phi[d + i]);
      f.log_diag += phi[d + i];
      for (std::size_t j = 0; j < i; ++j)
        f.chol[variational_posterior::tri_index(i, j)] =
            phi[2 * d + i * (i - 1) / 2 + j];
    }
    return f;
  }

  template <class T>
  T log_density(std::span<const T> u) const {
    std::vector<T> z(d);
    T quad = u[0] - u[0];
    for (std::size_t i = 0; i < d; ++i) {
      T r = u[i] - mu[i];
      for (std::size_t j = 0; j < i; ++j)
        r = r - chol[variational_posterior::tri_index(i, j)] * z[j];
      z[i] = r / chol[variational_posterior::tri_index(i, i)];
      quad = quad + z[i] * z[i];
    }
    return -0.5 * quad -
           (log_diag +
            0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi));
  }

  // E[log qbar(u)] for u ~ N(mu(phi), C(phi) C(phi)^T), in closed form:
  // -(|Cbar^{-1} dmu|^2 + |Cbar^{-1} C(phi)|_F^2)/2 - log det Cbar - d/2 log 2pi
  template <class T>
  T expected_log_density(std::span<const T> phi) const {
    using std::exp;
    std::vector<T> w(d);
    T quad = phi[0] - phi[0];
    for (std::size_t i = 0; i < d; ++i) {
      T r = phi[i] - mu[i];
      for (std::size_t j = 0; j < i; ++j)
        r = r - chol[variational_posterior::tri_index(i, j)] * w[j];
      w[i] = r / chol[variational_posterior::tri_index(i, i)];
      quad = quad + w[i] * w[i];
    }
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t i = c; i < d; ++i) {
        T r = (i == c) ? exp(phi[d + i]) : phi[2 * d + i * (i - 1) / 2 + c];
        for (std::size_t j = c; j < i; ++j)
          r = r - chol[variational_posterior::tri_index(i, j)] * w[j];
        w[i] = r / chol[variational_posterior::tri_index(i, i)];
        quad = quad + w[i] * w[i];
      }
    }
    return -0.5 * quad -
           (log_diag +
            0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi));
  }
};

}  // namespace vi_detail

// Training-time ELBO estimate: the plain estimator plus a mean-zero control
// variate built from a frozen copy of the surrogate.  Evaluated at the
// snapshot point the value coincides with elbo_at to rounding, so smoothed
// traces and restart selection are untouched; the gradient however swaps the
// pathwise entropy noise for the target-minus-snapshot residual, which dies
// out as the surrogate approaches a locally Gaussian posterior instead of
// staying O(1) forever.
template <class T, class Target>
T elbo_cv_at(const Target& target, std::span<const T> phi, std::span<const double> eps,
             std::size_t d, const vi_detail::frozen_gauss& ref) {
  using std::exp;
  const std::size_t k = eps.size() / d;
  std::vector<T> u(d);

  T total = phi[0] - phi[0];
  for (std::size_t s = 0; s < k; ++s) {
    std::span<const double> e = eps.subspan(s * d, d);
    for (std::size_t i = 0; i < d; ++i) {
      T acc = phi[i];
      for (std::size_t j = 0; j < i; ++j)
        acc = acc + phi[2 * d + i * (i - 1) / 2 + j] * e[j];
      acc = acc + exp(phi[d + i]) * e[i];
      u[i] = acc;
    }
    std::span<const T> uu(u);
    total = total + (target(uu) - ref.log_density(uu));
  }
  total = total / static_cast<double>(k) + ref.expected_log_density(phi);
  for (std::size_t i = 0; i < d; ++i) total = total + phi[d + i];
  return total + 0.5 * static_cast<double>(d) *
                     (1.0 + std::log(2.0 * std::numbers::pi));
}

// Monte-Carlo ELBO estimate with n independent draws.
template <class Target>
double elbo_estimate(const Target& target, const variational_posterior& q,
                     std::size_t n, rng& r) {
  if (n < 1) throw config_error("estimator needs at least one sample");
  q.validate();
  const std::size_t d = q.dim();
  auto phi = q.pack();
  std::vector<double> eps(d);
  double acc = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (auto& e : eps) e = r.normal();
    acc += elbo_at<double>(target, phi, eps, d);
  }
  return acc / static_cast<double>(n);
}

struct vi_options {
  double lr = 0.05;
  std::size_t iterations = 2000;
  std::size_t restarts = 100;
  std::size_t samples = 1;  // noise draws per gradient step
  double sigma0 = 0.1;
  double ema_decay = 0.99;
  double tail_average = 0.5;  // fraction of final iterates averaged into the result
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // worker threads across restarts
};

struct vi_result {
  variational_posterior q;
  double smoothed_elbo = -std::numeric_limits<double>::infinity();
  std::size_t best_restart = 0;
  std::vector<double> restart_elbo;    // final smoothed ELBO per restart
  std::vector<double> smoothed_trace;  // EMA trace of the winning restart
};

// Maximizes the ELBO over (mu, C) by stochastic gradient ascent.  Restarts
// share the starting point and differ only by noise stream; the restart with
// the highest exponentially smoothed final ELBO wins.  The returned surrogate
// averages the trailing iterates to damp single-sample gradient noise.
template <class Target>
vi_result vi_fit(const Target& target, std::span<const double> mu0,
                 const vi_options& opt = {}) {
  if (opt.restarts < 1) throw config_error("need at least one restart");
  if (opt.samples < 1) throw config_error("need at least one noise draw per step");
  if (!(opt.sigma0 > 0.0)) throw config_error("initial scale must be positive");
  if (!(opt.ema_decay >= 0.0 && opt.ema_decay < 1.0))
    throw config_error("smoothing decay must lie in [0, 1)");
  if (!(opt.tail_average >= 0.0 && opt.tail_average <= 1.0))
    throw config_error("tail averaging fraction must lie in [0, 1]");

  const std::size_t d = mu0.size();
  const auto phi0 = variational_posterior::isotropic(mu0, opt.sigma0).pack();
  const std::size_t total_calls = opt.iterations + 1;
  const auto tail_len = std::max<std::size_t>(
      1, static_cast<std::size_t>(opt.tail_average * static_cast<double>(total_calls)));
  const std::size_t tail_start = total_calls - tail_len;

  struct restart_outcome {
    double elbo = -std::numeric_limits<double>::infinity();
    std::vector<double> trace;
    std::vector<double> phi;
    std::string error;
  };
  std::vector<restart_outcome> runs(opt.restarts);

  // Restarts draw from disjoint seed streams; running them on a pool leaves
  // every number identical to the sequential order.
  parallel_for(opt.restarts, opt.threads, [&](std::size_t restart) {
    rng r = rng::stream(opt.seed, restart);
    // antithetic pairs: the mirrored draws cancel the odd part of the
    // gradient noise, which on locally quadratic targets removes the mean
    // noise entirely
    std::vector<double> eps(2 * opt.samples * d);
    std::vector<double> tail_sum(phi0.size(), 0.0);
    std::size_t calls = 0, tail_count = 0;

    auto loss = [&](std::span<const double> phi, std::span<double> grad) {
      for (std::size_t i = 0; i < opt.samples * d; ++i) {
        eps[i] = r.normal();
        eps[opt.samples * d + i] = -eps[i];
      }
      const auto ref = vi_detail::frozen_gauss::from_packed(phi, d);
      auto vg = ad::value_and_grad(
          [&](std::span<const ad::var> p) {
            return elbo_cv_at<ad::var>(target, p, eps, d, ref);
          },
          phi);
      if (calls >= tail_start) {
        for (std::size_t i = 0; i < phi.size(); ++i) tail_sum[i] += phi[i];
        ++tail_count;
      }
      ++calls;
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = -vg.grad[i];
      return -vg.value;
    };

    // Adam ascent with a slow square-root step decay: under persistent
    // single-sample gradient noise the normalized updates keep a wander
    // proportional to the step, so the decay plus tail averaging is what
    // pins the returned surrogate onto the optimum.
    const std::size_t n = phi0.size();
    const double t0 = std::max(1.0, static_cast<double>(opt.iterations) / 10.0);
    std::vector<double> x = phi0, g(n, 0.0), mom(n, 0.0), sec(n, 0.0), ema;
    ema.reserve(total_calls);
    try {
      double fx = loss(x, g);
      if (!std::isfinite(fx))
        throw numeric_error("non-finite loss at the starting point");
      ema.push_back(-fx);
      double b1t = 1.0, b2t = 1.0;
      const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
      for (std::size_t t = 1; t <= opt.iterations; ++t) {
        b1t *= beta1;
        b2t *= beta2;
        const double lr_t = opt.lr / std::sqrt(1.0 + static_cast<double>(t) / t0);
        for (std::size_t i = 0; i < n; ++i) {
          mom[i] = beta1 * mom[i] + (1.0 - beta1) * g[i];
          sec[i] = beta2 * sec[i] + (1.0 - beta2) * g[i] * g[i];
          double mhat = mom[i] / (1.0 - b1t);
          double vhat = sec[i] / (1.0 - b2t);
          x[i] -= lr_t * mhat / (std::sqrt(vhat) + adam_eps);
        }
        fx = loss(x, g);
        if (!std::isfinite(fx))
          throw numeric_error("non-finite loss at iteration " + std::to_string(t));
        ema.push_back(opt.ema_decay * ema.back() + (1.0 - opt.ema_decay) * -fx);
      }
    } catch (const numeric_error& e) {
      runs[restart].error = e.what();
      return;
    }

    restart_outcome& run = runs[restart];
    run.elbo = ema.back();
    run.trace = std::move(ema);
    run.phi = std::move(x);
    if (tail_count > 0)
      for (std::size_t i = 0; i < run.phi.size(); ++i)
        run.phi[i] = tail_sum[i] / static_cast<double>(tail_count);
  });

  vi_result out;
  out.restart_elbo.assign(opt.restarts, -std::numeric_limits<double>::infinity());
  std::string first_error;
  for (std::size_t restart = 0; restart < opt.restarts; ++restart) {
    restart_outcome& run = runs[restart];
    if (!run.error.empty()) {
      if (first_error.empty()) first_error = run.error;
      continue;
    }
    out.restart_elbo[restart] = run.elbo;
    if (run.elbo > out.smoothed_elbo) {
      out.smoothed_elbo = run.elbo;
      out.best_restart = restart;
      out.smoothed_trace = std::move(run.trace);
      out.q = variational_posterior::unpack(run.phi, d);
    }
  }

  if (!std::isfinite(out.smoothed_elbo)) {
    if (first_error.empty()) first_error = "all restarts failed";
    throw numeric_error(first_error);
  }
  return out;
}

inline vi_result vi_fit(const fit_problem& prob, const vi_options& opt = {}) {
  posterior_density target(prob);
  auto mu0 = prob.spec().to_unconstrained(prob.spec().initial());
  return vi_fit(target, mu0, opt);
}

}  // namespace reflgrad
