#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "reflgrad/ess.hpp"
#include "reflgrad/rng.hpp"

using reflgrad::effective_sample_size;

TEST_CASE("an independent chain has effective size close to its length") {
  reflgrad::rng r(61);
  std::vector<double> chain(10000);
  for (double& v : chain) v = r.normal();
  double ess = effective_sample_size(chain);
  REQUIRE(ess >= 8500.0);
  REQUIRE(ess <= 11500.0);
}

TEST_CASE("an AR(1) chain matches its analytic effective size") {
  const double rho = 0.9;
  const std::size_t n = 100000;
  reflgrad::rng r(62);
  std::vector<double> chain(n);
  double x = 0.0;
  // innovations scaled so the stationary variance is one
  const double s = std::sqrt(1.0 - rho * rho);
  for (std::size_t i = 0; i < 2000; ++i) x = rho * x + s * r.normal();  // warm up
  for (std::size_t i = 0; i < n; ++i) {
    x = rho * x + s * r.normal();
    chain[i] = x;
  }
  double expect = static_cast<double>(n) * (1.0 - rho) / (1.0 + rho);
  double ess = effective_sample_size(chain);
  REQUIRE(std::fabs(ess - expect) / expect < 0.15);
}

TEST_CASE("a constant chain carries one effective sample") {
  std::vector<double> chain(500, 3.7);
  REQUIRE(effective_sample_size(chain) == 1.0);
}

TEST_CASE("estimates are clamped to the chain length") {
  // strongly antithetic chain: raw estimate would exceed N
  reflgrad::rng r(63);
  std::vector<double> chain(5000);
  double x = 0.0;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    x = -0.9 * x + 0.435889894354 * r.normal();
    chain[i] = x;
  }
  double ess = effective_sample_size(chain);
  REQUIRE(ess <= 5000.0);
  REQUIRE(ess >= 1.0);
}

TEST_CASE("short chains are rejected") {
  std::vector<double> chain(9, 1.0);
  REQUIRE_THROWS_AS(effective_sample_size(chain), reflgrad::config_error);
}

TEST_CASE("a slowly mixing chain reports far fewer effective samples") {
  reflgrad::rng r(64);
  const double rho = 0.995;
  std::vector<double> chain(50000);
  double x = 0.0;
  const double s = std::sqrt(1.0 - rho * rho);
  for (std::size_t i = 0; i < 5000; ++i) x = rho * x + s * r.normal();
  for (std::size_t i = 0; i < chain.size(); ++i) {
    x = rho * x + s * r.normal();
    chain[i] = x;
  }
  double ess = effective_sample_size(chain);
  REQUIRE(ess < 1000.0);  // true value is about 125
}
