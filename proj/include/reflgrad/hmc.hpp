#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "reflgrad/errors.hpp"
#include "reflgrad/ess.hpp"
#include "reflgrad/parallel.hpp"
#include "reflgrad/rng.hpp"

namespace reflgrad {

// Samplers are generic over a target with
//   double value(span<const double> u)
//   double value_grad(span<const double> u, span<double> grad)
// returning the log density.  Throwing numeric_error or returning a
// non-finite value marks the point as unreachable.

struct hmc_options {
  std::size_t chains = 4;
  std::size_t draws = 2000;    // recorded after burn-in
  std::size_t burn_in = 1000;
  int max_tree_depth = 10;
  std::size_t path_length = 0;  // > 0 selects fixed-length transitions
  double target_accept = 0.8;
  double init_step = 0.0;  // 0 = search for a reasonable value
  double init_jitter = 0.0;  // stdev of per-chain start perturbation
  bool adapt_mass = true;
  std::uint64_t seed = 0;
  double divergence_threshold = 1000.0;  // energy error treated as divergent
  std::size_t threads = 1;               // worker threads across chains
};

struct chain_result {
  std::vector<std::vector<double>> draws;  // draws x dim, unconstrained space
  std::vector<double> logp;                // log density per draw
  double accept_rate = 0.0;                // mean acceptance statistic after burn-in
  std::size_t divergences = 0;
  std::size_t max_depth_hits = 0;
  double step_size = 0.0;
  std::vector<double> mass_diag;  // estimated posterior variances
  std::vector<double> ess;        // per parameter
};

namespace detail {

struct phase_point {
  std::vector<double> u, p, grad;
  double logp = 0.0;
};

template <class Target>
bool refresh(Target& target, phase_point& z) {
  try {
    z.logp = target.value_grad(std::span<const double>(z.u), std::span<double>(z.grad));
  } catch (const numeric_error&) {
    z.logp = -std::numeric_limits<double>::infinity();
    return false;
  }
  return std::isfinite(z.logp);
}

inline double kinetic(std::span<const double> p, std::span<const double> inv_mass) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += inv_mass[i] * p[i] * p[i];
  return 0.5 * acc;
}

// One signed leapfrog step; false when the density or gradient fails.
template <class Target>
bool leapfrog_once(Target& target, phase_point& z, double signed_eps,
                   std::span<const double> inv_mass) {
  const std::size_t n = z.u.size();
  for (std::size_t i = 0; i < n; ++i) z.p[i] += 0.5 * signed_eps * z.grad[i];
  for (std::size_t i = 0; i < n; ++i) z.u[i] += signed_eps * inv_mass[i] * z.p[i];
  if (!refresh(target, z)) return false;
  for (std::size_t i = 0; i < n; ++i) z.p[i] += 0.5 * signed_eps * z.grad[i];
  return true;
}

inline double log_add_exp(double a, double b) {
  double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline bool u_turned(const phase_point& lo, const phase_point& hi,
                     std::span<const double> inv_mass) {
  double fwd = 0.0, bwd = 0.0;
  for (std::size_t i = 0; i < lo.u.size(); ++i) {
    double du = hi.u[i] - lo.u[i];
    bwd += du * inv_mass[i] * lo.p[i];
    fwd += du * inv_mass[i] * hi.p[i];
  }
  return bwd < 0.0 || fwd < 0.0;
}

struct nuts_tree {
  phase_point lo, hi, prop;
  double log_w = 0.0;
  double sum_alpha = 0.0;
  std::size_t n_alpha = 0;
  bool turned = false;
  bool divergent = false;
};

template <class Target>
nuts_tree build_tree(Target& target, const phase_point& edge, int dir, int depth,
                     double eps, double h0, std::span<const double> inv_mass,
                     double dv_threshold, rng& r) {
  nuts_tree t;
  if (depth == 0) {
    phase_point z = edge;
    bool ok = leapfrog_once(target, z, dir * eps, inv_mass);
    double dh = ok ? (-z.logp + kinetic(z.p, inv_mass)) - h0
                   : std::numeric_limits<double>::infinity();
    t.divergent = !std::isfinite(dh) || dh > dv_threshold;
    t.log_w = t.divergent ? -std::numeric_limits<double>::infinity() : -dh;
    t.sum_alpha = t.divergent ? 0.0 : std::min(1.0, std::exp(-dh));
    t.n_alpha = 1;
    t.lo = z;
    t.hi = std::move(z);
    t.prop = t.lo;
    return t;
  }

  nuts_tree first =
      build_tree(target, edge, dir, depth - 1, eps, h0, inv_mass, dv_threshold, r);
  if (first.divergent || first.turned) return first;

  const phase_point& next_edge = dir > 0 ? first.hi : first.lo;
  nuts_tree second =
      build_tree(target, next_edge, dir, depth - 1, eps, h0, inv_mass, dv_threshold, r);

  t.sum_alpha = first.sum_alpha + second.sum_alpha;
  t.n_alpha = first.n_alpha + second.n_alpha;
  t.divergent = second.divergent;
  t.turned = second.turned;
  t.log_w = log_add_exp(first.log_w, second.log_w);
  if (t.divergent || t.turned) {
    t.prop = std::move(first.prop);  // never used; keeps the struct complete
    t.lo = std::move(first.lo);
    t.hi = std::move(first.hi);
    return t;
  }
  // multinomial choice between the two halves
  t.prop = std::log(r.uniform()) < second.log_w - t.log_w ? std::move(second.prop)
                                                          : std::move(first.prop);
  t.lo = dir > 0 ? std::move(first.lo) : std::move(second.lo);
  t.hi = dir > 0 ? std::move(second.hi) : std::move(first.hi);
  t.turned = u_turned(t.lo, t.hi, inv_mass);
  return t;
}

struct transition_stats {
  double alpha = 0.0;  // mean Metropolis statistic over the trajectory
  bool divergent = false;
  bool max_depth = false;
};

// One dynamic trajectory with multiplicative doubling, multinomial selection
// within subtrees and biased progressive selection across doublings.
template <class Target>
phase_point nuts_transition(Target& target, phase_point z, double eps, int max_depth,
                            std::span<const double> inv_mass, double dv_threshold,
                            rng& r, transition_stats& stats) {
  const std::size_t n = z.u.size();
  for (std::size_t i = 0; i < n; ++i) z.p[i] = r.normal() / std::sqrt(inv_mass[i]);
  const double h0 = -z.logp + kinetic(z.p, inv_mass);

  nuts_tree tree;
  tree.lo = z;
  tree.hi = z;
  tree.prop = std::move(z);
  tree.log_w = 0.0;

  double sum_alpha = 0.0;
  std::size_t n_alpha = 0;
  int depth = 0;
  for (; depth < max_depth; ++depth) {
    int dir = r.uniform() < 0.5 ? -1 : 1;
    const phase_point& edge = dir > 0 ? tree.hi : tree.lo;
    nuts_tree sub = build_tree(target, edge, dir, depth, eps, h0, inv_mass,
                               dv_threshold, r);
    sum_alpha += sub.sum_alpha;
    n_alpha += sub.n_alpha;
    if (sub.divergent) {
      stats.divergent = true;
      break;
    }
    if (sub.turned) break;
    // biased progressive selection favours the fresh half
    if (std::log(r.uniform()) < sub.log_w - tree.log_w) tree.prop = std::move(sub.prop);
    tree.log_w = log_add_exp(tree.log_w, sub.log_w);
    if (dir > 0)
      tree.hi = std::move(sub.hi);
    else
      tree.lo = std::move(sub.lo);
    if (u_turned(tree.lo, tree.hi, inv_mass)) {
      ++depth;
      break;
    }
  }
  stats.max_depth = depth == max_depth;
  stats.alpha = n_alpha ? sum_alpha / static_cast<double>(n_alpha) : 0.0;
  return std::move(tree.prop);
}

// Fixed path length transition with a standard Metropolis correction.
template <class Target>
phase_point hmc_transition(Target& target, phase_point z, double eps, std::size_t steps,
                           std::span<const double> inv_mass, double dv_threshold,
                           rng& r, transition_stats& stats) {
  const std::size_t n = z.u.size();
  phase_point cur = z;
  for (std::size_t i = 0; i < n; ++i) cur.p[i] = r.normal() / std::sqrt(inv_mass[i]);
  const double h0 = -cur.logp + kinetic(cur.p, inv_mass);

  phase_point trial = cur;
  bool ok = true;
  for (std::size_t s = 0; s < steps && ok; ++s)
    ok = leapfrog_once(target, trial, eps, inv_mass);
  double dh = ok ? (-trial.logp + kinetic(trial.p, inv_mass)) - h0
                 : std::numeric_limits<double>::infinity();
  if (!std::isfinite(dh) || dh > dv_threshold) {
    stats.divergent = true;
    stats.alpha = 0.0;
    return z;
  }
  stats.alpha = std::min(1.0, std::exp(-dh));
  if (std::log(r.uniform()) < -dh) return trial;
  return z;
}

// Step-size search: double or halve until the one-step acceptance crosses 1/2.
template <class Target>
double find_reasonable_epsilon(Target& target, const phase_point& z0,
                               std::span<const double> inv_mass, rng& r) {
  const std::size_t n = z0.u.size();
  double eps = 1.0;
  phase_point start = z0;
  for (std::size_t i = 0; i < n; ++i) start.p[i] = r.normal() / std::sqrt(inv_mass[i]);
  const double h0 = -start.logp + kinetic(start.p, inv_mass);

  auto step_dh = [&](double e) {
    phase_point z = start;
    if (!leapfrog_once(target, z, e, inv_mass))
      return std::numeric_limits<double>::infinity();
    return (-z.logp + kinetic(z.p, inv_mass)) - h0;
  };

  double dh = step_dh(eps);
  while (!std::isfinite(dh) && eps > 1e-10) {
    eps *= 0.5;
    dh = step_dh(eps);
  }
  const double a = -dh > std::log(0.5) ? 1.0 : -1.0;
  for (int it = 0; it < 100; ++it) {
    if (!(a * -dh > a * std::log(0.5))) break;
    eps *= std::pow(2.0, a);
    if (eps < 1e-10 || eps > 1e10) break;
    dh = step_dh(eps);
  }
  return std::clamp(eps, 1e-10, 1e10);
}

// Nesterov dual averaging of log step size toward a target acceptance.
struct dual_averaging {
  double target = 0.8;
  double mu = 0.0, log_eps = 0.0, log_eps_avg = 0.0, hbar = 0.0;
  double gamma = 0.05, t0 = 10.0, kappa = 0.75;
  std::size_t m = 0;

  void restart(double eps0) {
    mu = std::log(10.0 * eps0);
    log_eps = std::log(eps0);
    log_eps_avg = std::log(eps0);
    hbar = 0.0;
    m = 0;
  }
  double update(double alpha) {
    ++m;
    const double md = static_cast<double>(m);
    hbar += (target - alpha - hbar) / (md + t0);
    log_eps = mu - std::sqrt(md) / gamma * hbar;
    const double eta = std::pow(md, -kappa);
    log_eps_avg = eta * log_eps + (1.0 - eta) * log_eps_avg;
    return std::exp(log_eps);
  }
  double averaged() const { return std::exp(log_eps_avg); }
};

struct running_variance {
  std::vector<double> mean, m2;
  std::size_t n = 0;

  void reset(std::size_t dim) {
    mean.assign(dim, 0.0);
    m2.assign(dim, 0.0);
    n = 0;
  }
  void add(std::span<const double> x) {
    ++n;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double d = x[i] - mean[i];
      mean[i] += d / static_cast<double>(n);
      m2[i] += d * (x[i] - mean[i]);
    }
  }
  // shrunk variance estimate, the usual n/(n+5) regularization toward 1e-3
  std::vector<double> shrunk() const {
    std::vector<double> v(mean.size(), 1.0);
    if (n < 2) return v;
    const double nd = static_cast<double>(n);
    for (std::size_t i = 0; i < v.size(); ++i) {
      double var = m2[i] / (nd - 1.0);
      v[i] = nd / (nd + 5.0) * var + 1e-3 * 5.0 / (nd + 5.0);
      v[i] = std::max(v[i], 1e-10);
    }
    return v;
  }
};

}  // namespace detail

// Exposed for direct use in tests: L leapfrog steps in place.  Returns false
// if the trajectory left the supported region.
template <class Target>
bool leapfrog(Target& target, std::vector<double>& u, std::vector<double>& p,
              double eps, std::size_t steps, std::span<const double> inv_mass) {
  if (!(eps > 0.0)) throw config_error("leapfrog step size must be positive");
  if (steps < 1) throw config_error("leapfrog needs at least one step");
  detail::phase_point z;
  z.u = u;
  z.p = p;
  z.grad.assign(u.size(), 0.0);
  if (!detail::refresh(target, z)) return false;
  for (std::size_t s = 0; s < steps; ++s)
    if (!detail::leapfrog_once(target, z, eps, inv_mass)) return false;
  u = z.u;
  p = z.p;
  return true;
}

// One chain of the U-turn sampler (or fixed-length transitions when
// opt.path_length > 0) with dual-averaging step size and windowed diagonal
// mass adaptation during burn-in.
template <class Target>
chain_result hmc_chain(Target& target, std::span<const double> u0,
                       const hmc_options& opt, std::size_t chain_index) {
  if (u0.empty()) throw config_error("sampler needs at least one parameter");
  if (opt.path_length == 0 && opt.max_tree_depth < 1)
    throw config_error("max tree depth must be at least 1");
  if (opt.init_step < 0.0) throw config_error("step size must be positive");
  if (!(opt.target_accept > 0.0 && opt.target_accept < 1.0))
    throw config_error("target acceptance must lie in (0, 1)");
  if (opt.burn_in > 0 && opt.burn_in < 100)
    throw config_error("burn-in must be 0 or at least 100 iterations");
  const std::size_t dim = u0.size();
  rng r = rng::stream(opt.seed, chain_index);

  detail::phase_point z;
  z.u.assign(u0.begin(), u0.end());
  for (std::size_t i = 0; i < dim; ++i) z.u[i] += opt.init_jitter * r.normal();
  z.p.assign(dim, 0.0);
  z.grad.assign(dim, 0.0);
  if (!detail::refresh(target, z))
    throw numeric_error("non-finite log density at the chain starting point");

  std::vector<double> inv_mass(dim, 1.0);
  double eps = opt.init_step;
  if (!(eps > 0.0)) eps = detail::find_reasonable_epsilon(target, z, inv_mass, r);
  detail::dual_averaging da;
  da.target = opt.target_accept;
  da.restart(eps);

  // burn-in schedule: two variance windows inside [15%, 90%], step size only
  // elsewhere
  const std::size_t b = opt.burn_in;
  const bool windowed = opt.adapt_mass && b >= 200;
  const std::size_t w1_start = windowed ? static_cast<std::size_t>(0.15 * b) : b;
  const std::size_t w1_end = windowed ? static_cast<std::size_t>(0.5 * b) : b;
  const std::size_t w2_end = windowed ? static_cast<std::size_t>(0.9 * b) : b;
  detail::running_variance rv;
  rv.reset(dim);

  auto transition = [&](detail::transition_stats& stats) {
    if (opt.path_length > 0)
      z = detail::hmc_transition(target, std::move(z), eps, opt.path_length, inv_mass,
                                 opt.divergence_threshold, r, stats);
    else
      z = detail::nuts_transition(target, std::move(z), eps, opt.max_tree_depth,
                                  inv_mass, opt.divergence_threshold, r, stats);
  };

  for (std::size_t it = 0; it < b; ++it) {
    detail::transition_stats stats;
    transition(stats);
    eps = da.update(stats.alpha);
    if (windowed && it >= w1_start && it < w2_end) {
      rv.add(z.u);
      if (it + 1 == w1_end || it + 1 == w2_end) {
        inv_mass = rv.shrunk();
        rv.reset(dim);
        eps = detail::find_reasonable_epsilon(target, z, inv_mass, r);
        da.restart(eps);
      }
    }
  }
  if (b > 0) eps = da.averaged();

  chain_result out;
  out.step_size = eps;
  out.mass_diag = inv_mass;
  out.draws.reserve(opt.draws);
  out.logp.reserve(opt.draws);
  double alpha_sum = 0.0;
  for (std::size_t it = 0; it < opt.draws; ++it) {
    detail::transition_stats stats;
    transition(stats);
    alpha_sum += stats.alpha;
    out.divergences += stats.divergent ? 1 : 0;
    out.max_depth_hits += stats.max_depth ? 1 : 0;
    out.draws.push_back(z.u);
    out.logp.push_back(z.logp);
  }
  out.accept_rate = opt.draws ? alpha_sum / static_cast<double>(opt.draws) : 0.0;

  if (opt.draws >= 10) {
    out.ess.resize(dim);
    std::vector<double> col(opt.draws);
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t t = 0; t < opt.draws; ++t) col[t] = out.draws[t][i];
      out.ess[i] = effective_sample_size(col);
    }
  }
  return out;
}

// Chains draw from disjoint seed streams, so the result does not depend on
// how they are scheduled across threads.
template <class Target>
std::vector<chain_result> hmc_sample(Target& target, std::span<const double> u0,
                                     const hmc_options& opt) {
  std::vector<chain_result> out(opt.chains);
  parallel_for(opt.chains, opt.threads,
               [&](std::size_t c) { out[c] = hmc_chain(target, u0, opt, c); });
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive random-walk Metropolis baseline.

struct rwm_options {
  std::size_t chains = 4;
  std::size_t draws = 2000;
  std::size_t burn_in = 1000;
  double target_accept = 0.234;
  double init_scale = 0.0;  // 0 = 2.38 / sqrt(dim)
  double init_jitter = 0.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

template <class Target>
chain_result rwm_chain(Target& target, std::span<const double> u0,
                       const rwm_options& opt, std::size_t chain_index) {
  if (u0.empty()) throw config_error("sampler needs at least one parameter");
  if (opt.init_scale < 0.0) throw config_error("proposal scale must be positive");
  if (!(opt.target_accept > 0.0 && opt.target_accept < 1.0))
    throw config_error("target acceptance must lie in (0, 1)");
  const std::size_t dim = u0.size();
  rng r = rng::stream(opt.seed, chain_index);

  std::vector<double> u(u0.begin(), u0.end());
  for (std::size_t i = 0; i < dim; ++i) u[i] += opt.init_jitter * r.normal();

  auto logp_at = [&](std::span<const double> x) {
    try {
      double v = target.value(x);
      return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
    } catch (const numeric_error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  double logp = logp_at(u);
  if (!std::isfinite(logp))
    throw numeric_error("non-finite log density at the chain starting point");

  double scale =
      opt.init_scale > 0.0 ? opt.init_scale : 2.38 / std::sqrt(static_cast<double>(dim));
  std::vector<double> sigma(dim, 1.0);
  detail::running_variance rv;
  rv.reset(dim);

  std::vector<double> trial(dim);
  auto step = [&](bool adapting, std::size_t m) {
    for (std::size_t i = 0; i < dim; ++i) trial[i] = u[i] + scale * sigma[i] * r.normal();
    double lp = logp_at(trial);
    double alpha = std::min(1.0, std::exp(lp - logp));
    if (std::log(r.uniform()) < lp - logp) {
      u = trial;
      logp = lp;
    }
    if (adapting) {
      rv.add(u);
      if (rv.n >= 50 && rv.n % 25 == 0) {
        auto v = rv.shrunk();
        for (std::size_t i = 0; i < dim; ++i) sigma[i] = std::sqrt(v[i]);
      }
      scale *= std::exp((alpha - opt.target_accept) /
                        std::pow(static_cast<double>(m + 1), 2.0 / 3.0));
    }
    return alpha;
  };

  for (std::size_t it = 0; it < opt.burn_in; ++it) step(true, it);

  chain_result out;
  out.step_size = scale;
  out.mass_diag.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) out.mass_diag[i] = sigma[i] * sigma[i];
  out.draws.reserve(opt.draws);
  out.logp.reserve(opt.draws);
  double alpha_sum = 0.0;
  for (std::size_t it = 0; it < opt.draws; ++it) {
    alpha_sum += step(false, 0);
    out.draws.push_back(u);
    out.logp.push_back(logp);
  }
  out.accept_rate = opt.draws ? alpha_sum / static_cast<double>(opt.draws) : 0.0;

  if (opt.draws >= 10) {
    out.ess.resize(dim);
    std::vector<double> col(opt.draws);
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t t = 0; t < opt.draws; ++t) col[t] = out.draws[t][i];
      out.ess[i] = effective_sample_size(col);
    }
  }
  return out;
}

template <class Target>
std::vector<chain_result> rwm_sample(Target& target, std::span<const double> u0,
                                     const rwm_options& opt) {
  std::vector<chain_result> out(opt.chains);
  parallel_for(opt.chains, opt.threads,
               [&](std::size_t c) { out[c] = rwm_chain(target, u0, opt, c); });
  return out;
}

}  // namespace reflgrad
