#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "fixtures.hpp"
#include "reflgrad/errors.hpp"
#include "reflgrad/hmc.hpp"
#include "reflgrad/model.hpp"
#include "reflgrad/rng.hpp"
#include "reflgrad/slab.hpp"

using namespace reflgrad;
using namespace fixtures;

namespace {

struct std_normal {
  double value(std::span<const double> u) const {
    double s = 0.0;
    for (double x : u) s += x * x;
    return -0.5 * s;
  }
  double value_grad(std::span<const double> u, std::span<double> g) const {
    for (std::size_t i = 0; i < u.size(); ++i) g[i] = -u[i];
    return value(u);
  }
};

struct diag_normal {
  std::vector<double> var;
  double value(std::span<const double> u) const {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * u[i] / var[i];
    return -0.5 * s;
  }
  double value_grad(std::span<const double> u, std::span<double> g) const {
    for (std::size_t i = 0; i < u.size(); ++i) g[i] = -u[i] / var[i];
    return value(u);
  }
};

// zero-mean bivariate Gaussian with unit variances and correlation rho
struct corr_normal {
  double rho = 0.8;
  double value(std::span<const double> u) const {
    double c = 1.0 / (1.0 - rho * rho);
    return -0.5 * c * (u[0] * u[0] - 2.0 * rho * u[0] * u[1] + u[1] * u[1]);
  }
  double value_grad(std::span<const double> u, std::span<double> g) const {
    double c = 1.0 / (1.0 - rho * rho);
    g[0] = -c * (u[0] - rho * u[1]);
    g[1] = -c * (u[1] - rho * u[0]);
    return value(u);
  }
};

struct flat_density {
  double value(std::span<const double>) const { return 0.0; }
  double value_grad(std::span<const double>, std::span<double> g) const {
    std::fill(g.begin(), g.end(), 0.0);
    return 0.0;
  }
};

// flat inside the unit ball, unreachable outside
struct capped_flat {
  double value(std::span<const double> u) const {
    double s = 0.0;
    for (double x : u) s += x * x;
    if (s > 1.0) throw numeric_error("outside the supported region");
    return 0.0;
  }
  double value_grad(std::span<const double> u, std::span<double> g) const {
    std::fill(g.begin(), g.end(), 0.0);
    return value(u);
  }
};

struct pooled_moments {
  std::vector<double> mean, var;
  double total_ess = 0.0;
  std::size_t n = 0;
};

pooled_moments pool(const std::vector<chain_result>& chains) {
  pooled_moments m;
  const std::size_t dim = chains[0].draws[0].size();
  m.mean.assign(dim, 0.0);
  m.var.assign(dim, 0.0);
  for (const auto& c : chains) {
    m.n += c.draws.size();
    m.total_ess += std::accumulate(c.ess.begin(), c.ess.end(), 0.0) /
                   static_cast<double>(c.ess.size());
    for (const auto& d : c.draws)
      for (std::size_t i = 0; i < dim; ++i) m.mean[i] += d[i];
  }
  for (std::size_t i = 0; i < dim; ++i) m.mean[i] /= static_cast<double>(m.n);
  for (const auto& c : chains)
    for (const auto& d : c.draws)
      for (std::size_t i = 0; i < dim; ++i) {
        double r = d[i] - m.mean[i];
        m.var[i] += r * r;
      }
  for (std::size_t i = 0; i < dim; ++i) m.var[i] /= static_cast<double>(m.n - 1);
  return m;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("leapfrog reverses exactly when momentum is negated", "[hmc]") {
  std_normal target;
  rng r(91);
  std::vector<double> u0(3), p0(3), inv_mass{1.0, 0.5, 2.0};
  for (auto& x : u0) x = r.normal();
  for (auto& x : p0) x = r.normal();

  auto u = u0;
  auto p = p0;
  REQUIRE(leapfrog(target, u, p, 0.1, 25, inv_mass));
  for (auto& x : p) x = -x;
  REQUIRE(leapfrog(target, u, p, 0.1, 25, inv_mass));
  for (std::size_t i = 0; i < u.size(); ++i) {
    REQUIRE(std::abs(u[i] - u0[i]) < 1e-10);
    REQUIRE(std::abs(p[i] + p0[i]) < 1e-10);
  }
}

TEST_CASE("leapfrog energy error shrinks as step size squared", "[hmc]") {
  std_normal target;
  std::vector<double> inv_mass{1.0, 1.0};
  const std::vector<double> u0{1.3, -0.7}, p0{0.5, 1.1};
  auto hamiltonian = [&](const std::vector<double>& u, const std::vector<double>& p) {
    return -target.value(u) + 0.5 * (p[0] * p[0] + p[1] * p[1]);
  };
  const double h0 = hamiltonian(u0, p0);
  const double total_time = 0.7;

  std::vector<double> dts{0.1, 0.05, 0.025}, errs;
  for (double dt : dts) {
    auto u = u0;
    auto p = p0;
    auto steps = static_cast<std::size_t>(std::lround(total_time / dt));
    double worst = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      REQUIRE(leapfrog(target, u, p, dt, 1, inv_mass));
      worst = std::max(worst, std::abs(hamiltonian(u, p) - h0));
    }
    errs.push_back(worst);
  }
  double slope = std::log(errs[0] / errs[2]) / std::log(dts[0] / dts[2]);
  REQUIRE(slope > 1.7);
  REQUIRE(slope < 2.3);
}

TEST_CASE("leapfrog on a flat potential is pure drift", "[hmc]") {
  flat_density target;
  std::vector<double> inv_mass{0.5, 2.0};
  std::vector<double> u{0.3, -1.2}, p{1.7, 0.4};
  const auto p0 = p;
  const double eps = 0.37;
  const std::size_t steps = 11;
  REQUIRE(leapfrog(target, u, p, eps, steps, inv_mass));
  REQUIRE(p == p0);
  for (std::size_t i = 0; i < u.size(); ++i) {
    double expected = (i == 0 ? 0.3 : -1.2) +
                      eps * static_cast<double>(steps) * inv_mass[i] * p0[i];
    REQUIRE(u[i] == Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("leapfrog rejects bad configuration", "[hmc]") {
  std_normal target;
  std::vector<double> u{0.0}, p{1.0}, m{1.0};
  REQUIRE_THROWS_AS(leapfrog(target, u, p, 0.0, 5, m), config_error);
  REQUIRE_THROWS_AS(leapfrog(target, u, p, 0.1, 0, m), config_error);
}

TEST_CASE("flat potential transitions always accept", "[hmc]") {
  flat_density target;
  hmc_options opt;
  opt.path_length = 5;
  opt.init_step = 0.5;
  opt.burn_in = 0;
  opt.draws = 200;
  opt.seed = 7;
  std::vector<double> u0{0.0, 0.0};
  auto res = hmc_chain(target, u0, opt, 0);
  REQUIRE(res.accept_rate == 1.0);
  REQUIRE(res.divergences == 0);
  for (std::size_t t = 1; t < res.draws.size(); ++t)
    REQUIRE(res.draws[t] != res.draws[t - 1]);
}

TEST_CASE("fixed-length transitions recover a correlated Gaussian", "[hmc]") {
  corr_normal target;
  hmc_options opt;
  opt.path_length = 8;
  opt.init_step = 0.35;
  opt.burn_in = 0;
  opt.draws = 10000;
  opt.seed = 11;
  std::vector<double> u0{0.0, 0.0};
  auto res = hmc_chain(target, u0, opt, 0);

  auto m = pool({res});
  for (std::size_t i = 0; i < 2; ++i) {
    double se = std::sqrt(1.0 / res.ess[i]);
    REQUIRE(std::abs(m.mean[i]) < 4.0 * se);
    REQUIRE(m.var[i] == Catch::Approx(1.0).epsilon(0.10));
  }
  double cov = 0.0;
  for (const auto& d : res.draws) cov += (d[0] - m.mean[0]) * (d[1] - m.mean[1]);
  cov /= static_cast<double>(res.draws.size() - 1);
  REQUIRE(cov == Catch::Approx(0.8).epsilon(0.10));
}

TEST_CASE("acceptance rises monotonically as the step size shrinks", "[hmc]") {
  corr_normal target;
  std::vector<double> u0{0.0, 0.0};
  std::vector<double> rates;
  // halve the step while doubling the count so the trajectory length is fixed
  for (std::size_t halvings = 0; halvings < 3; ++halvings) {
    hmc_options opt;
    opt.path_length = 3 << halvings;
    opt.init_step = 0.6 / static_cast<double>(1 << halvings);
    opt.burn_in = 0;
    opt.draws = 2000;
    opt.seed = 13;
    rates.push_back(hmc_chain(target, u0, opt, 0).accept_rate);
  }
  REQUIRE(rates[0] < rates[1]);
  REQUIRE(rates[1] < rates[2]);
  REQUIRE(rates[2] > 0.95);
}

TEST_CASE("oversized steps reject without crashing", "[hmc]") {
  std_normal target;
  hmc_options opt;
  opt.path_length = 10;
  opt.init_step = 10.0;
  opt.burn_in = 0;
  opt.draws = 500;
  opt.seed = 3;
  std::vector<double> u0{0.1, -0.2};
  auto res = hmc_chain(target, u0, opt, 0);
  REQUIRE(res.accept_rate < 0.1);
  REQUIRE(res.draws.size() == 500);
}

TEST_CASE("rejected transitions repeat the state bitwise", "[hmc]") {
  std_normal target;
  hmc_options opt;
  opt.path_length = 1;
  opt.init_step = 4.0;
  opt.burn_in = 0;
  opt.draws = 300;
  opt.seed = 5;
  std::vector<double> u0{0.3, 0.8};
  auto res = hmc_chain(target, u0, opt, 0);

  std::size_t repeats = 0;
  for (std::size_t t = 1; t < res.draws.size(); ++t) {
    if (res.draws[t][0] == res.draws[t - 1][0]) {
      ++repeats;
      REQUIRE(res.draws[t] == res.draws[t - 1]);
      REQUIRE(res.logp[t] == res.logp[t - 1]);
    }
  }
  REQUIRE(repeats > res.draws.size() / 2);
}

TEST_CASE("dynamic sampler matches unit Gaussian moments", "[hmc]") {
  std_normal target;
  hmc_options opt;
  opt.chains = 10;
  opt.draws = 2000;
  opt.burn_in = 500;
  opt.seed = 42;
  opt.init_jitter = 1.0;
  std::vector<double> u0(5, 0.0);
  auto chains = hmc_sample(target, u0, opt);
  REQUIRE(chains.size() == 10);

  auto m = pool(chains);
  double se = std::sqrt(1.0 / m.total_ess);
  for (std::size_t i = 0; i < u0.size(); ++i) {
    REQUIRE(std::abs(m.mean[i]) < 4.0 * se);
    REQUIRE(m.var[i] == Catch::Approx(1.0).epsilon(0.10));
  }
  for (const auto& c : chains) {
    REQUIRE(c.accept_rate > 0.6);
    REQUIRE(c.accept_rate < 0.95);
    REQUIRE(c.divergences == 0);
    REQUIRE(median_of(c.ess) > 200.0);
    for (double e : c.ess) {
      REQUIRE(e > 0.0);
      REQUIRE(e <= static_cast<double>(opt.draws));
    }
  }
}

TEST_CASE("depth-one trees still sample correctly", "[hmc]") {
  std_normal target;
  hmc_options opt;
  opt.max_tree_depth = 1;
  opt.draws = 4000;
  opt.burn_in = 500;
  opt.seed = 17;
  std::vector<double> u0{0.0, 0.0};
  auto res = hmc_chain(target, u0, opt, 0);
  auto m = pool({res});
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(std::abs(m.mean[i]) < 0.2);
    REQUIRE(m.var[i] == Catch::Approx(1.0).epsilon(0.3));
  }
}

TEST_CASE("hitting the depth limit is counted, not fatal", "[hmc]") {
  std_normal target;
  hmc_options opt;
  opt.max_tree_depth = 2;
  opt.init_step = 0.001;
  opt.burn_in = 0;
  opt.draws = 50;
  opt.seed = 23;
  std::vector<double> u0{0.0, 0.0};
  auto res = hmc_chain(target, u0, opt, 0);
  REQUIRE(res.max_depth_hits == 50);
}

TEST_CASE("unreachable regions divert to rejections", "[hmc]") {
  capped_flat target;
  hmc_options opt;
  opt.init_step = 0.8;
  opt.burn_in = 0;
  opt.draws = 500;
  opt.seed = 29;
  std::vector<double> u0{0.0};
  auto res = hmc_chain(target, u0, opt, 0);
  REQUIRE(res.divergences > 0);
  for (const auto& d : res.draws) REQUIRE(std::abs(d[0]) <= 1.0);
}

TEST_CASE("mass adaptation recovers the target scales", "[hmc]") {
  SECTION("unit Gaussian within 25 percent") {
    std_normal target;
    hmc_options opt;
    opt.burn_in = 1000;
    opt.draws = 100;
    opt.seed = 31;
    std::vector<double> u0(4, 0.0);
    auto res = hmc_chain(target, u0, opt, 0);
    for (double v : res.mass_diag) REQUIRE(v == Catch::Approx(1.0).epsilon(0.25));
  }
  SECTION("anisotropic variances within a factor of two") {
    diag_normal target{{std::vector<double>{1.0, 100.0}}};
    hmc_options opt;
    opt.burn_in = 1000;
    opt.draws = 100;
    opt.seed = 37;
    std::vector<double> u0{0.0, 0.0};
    auto res = hmc_chain(target, u0, opt, 0);
    REQUIRE(res.mass_diag[0] > 0.5);
    REQUIRE(res.mass_diag[0] < 2.0);
    REQUIRE(res.mass_diag[1] > 50.0);
    REQUIRE(res.mass_diag[1] < 200.0);
  }
}

TEST_CASE("sampler rejects bad configuration", "[hmc]") {
  std_normal target;
  std::vector<double> u0{0.0};
  hmc_options opt;
  opt.burn_in = 50;
  REQUIRE_THROWS_AS(hmc_chain(target, u0, opt, 0), config_error);
  opt = {};
  opt.max_tree_depth = 0;
  REQUIRE_THROWS_AS(hmc_chain(target, u0, opt, 0), config_error);
  opt = {};
  opt.init_step = -1.0;
  REQUIRE_THROWS_AS(hmc_chain(target, u0, opt, 0), config_error);
  opt = {};
  REQUIRE_THROWS_AS(hmc_chain(target, std::vector<double>{}, opt, 0), config_error);

  rwm_options ropt;
  ropt.target_accept = 1.5;
  REQUIRE_THROWS_AS(rwm_chain(target, u0, ropt, 0), config_error);
}

TEST_CASE("chains are reproducible by seed and chain index", "[hmc]") {
  std_normal target;
  hmc_options opt;
  opt.burn_in = 200;
  opt.draws = 100;
  opt.seed = 99;
  opt.init_jitter = 0.5;
  std::vector<double> u0{0.0, 0.0, 0.0};

  auto a = hmc_chain(target, u0, opt, 2);
  auto b = hmc_chain(target, u0, opt, 2);
  REQUIRE(a.draws == b.draws);
  REQUIRE(a.logp == b.logp);
  REQUIRE(a.step_size == b.step_size);

  auto c = hmc_chain(target, u0, opt, 3);
  REQUIRE(a.draws != c.draws);

  rwm_options ropt;
  ropt.burn_in = 200;
  ropt.draws = 100;
  ropt.seed = 99;
  auto ra = rwm_chain(target, u0, ropt, 1);
  auto rb = rwm_chain(target, u0, ropt, 1);
  REQUIRE(ra.draws == rb.draws);
  auto rc = rwm_chain(target, u0, ropt, 0);
  REQUIRE(ra.draws != rc.draws);
}

TEST_CASE("random walk accepts every proposal on a flat target", "[rwm]") {
  flat_density target;
  rwm_options opt;
  opt.burn_in = 200;
  opt.draws = 500;
  opt.seed = 41;
  std::vector<double> u0{0.0, 0.0};
  auto res = rwm_chain(target, u0, opt, 0);
  REQUIRE(res.accept_rate == 1.0);
  for (std::size_t t = 1; t < res.draws.size(); ++t)
    REQUIRE(res.draws[t] != res.draws[t - 1]);
}

TEST_CASE("random walk matches unit Gaussian moments", "[rwm]") {
  std_normal target;
  rwm_options opt;
  opt.chains = 4;
  opt.burn_in = 2000;
  opt.draws = 20000;
  opt.seed = 43;
  std::vector<double> u0(3, 0.0);
  auto chains = rwm_sample(target, u0, opt);

  auto m = pool(chains);
  double ess_total = 0.0;
  for (const auto& c : chains)
    ess_total += std::accumulate(c.ess.begin(), c.ess.end(), 0.0) / 3.0;
  double se = std::sqrt(1.0 / ess_total);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(std::abs(m.mean[i]) < 4.0 * se);
    REQUIRE(m.var[i] == Catch::Approx(1.0).epsilon(0.2));
  }
  for (const auto& c : chains) {
    REQUIRE(c.accept_rate > 0.1);
    REQUIRE(c.accept_rate < 0.4);
  }
}

TEST_CASE("dynamic chains mix faster than the random walk", "[hmc][rwm]") {
  std_normal target;
  std::vector<double> u0(10, 0.0);

  hmc_options hopt;
  hopt.chains = 2;
  hopt.draws = 2000;
  hopt.burn_in = 500;
  hopt.seed = 47;
  auto hchains = hmc_sample(target, u0, hopt);

  rwm_options ropt;
  ropt.chains = 2;
  ropt.draws = 2000;
  ropt.burn_in = 2000;
  ropt.seed = 47;
  auto rchains = rwm_sample(target, u0, ropt);

  std::vector<double> h_ess, r_ess;
  for (const auto& c : hchains)
    for (double e : c.ess) h_ess.push_back(e);
  for (const auto& c : rchains)
    for (double e : c.ess) r_ess.push_back(e);
  REQUIRE(median_of(h_ess) > median_of(r_ess));
}

TEST_CASE("posterior draws stay strictly inside the bounds", "[hmc]") {
  auto spec = quartz_spec();
  auto truth = quartz_truth(spec);
  rng noise(2024);
  auto data = synth_data(spec, truth, {linspace(0.012, 0.2, 120)}, noise);
  fit_problem prob(spec, data);
  posterior_density post(prob);

  auto u0 = spec.to_unconstrained(spec.initial());
  hmc_options opt;
  opt.burn_in = 300;
  opt.draws = 300;
  opt.seed = 53;
  auto res = hmc_chain(post, u0, opt, 0);

  const auto& b = spec.bounds();
  for (std::size_t t = 0; t < res.draws.size(); ++t) {
    REQUIRE(std::isfinite(res.logp[t]));
    auto x = spec.from_unconstrained(std::span<const double>(res.draws[t])).x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      REQUIRE(x[i] > b[i].first);
      REQUIRE(x[i] < b[i].second);
    }
  }
}
