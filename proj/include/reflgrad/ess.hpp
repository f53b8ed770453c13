#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <string>

#include "reflgrad/errors.hpp"

namespace reflgrad {

// Effective sample size N / (1 + 2 sum rho_k) with the autocorrelation sum
// truncated by Geyer's initial monotone positive-sequence rule: consecutive
// lag pairs are summed, kept while positive, and forced non-increasing.
// A zero-variance chain is defined to carry one effective sample.  The
// estimate is clamped to [1, N].
inline double effective_sample_size(std::span<const double> chain) {
  const std::size_t n = chain.size();
  if (n < 10)
    throw config_error("effective sample size needs at least 10 samples, got " +
                       std::to_string(n));

  double mean = 0.0;
  for (double v : chain) mean += v;
  mean /= static_cast<double>(n);

  auto gamma = [&](std::size_t lag) {
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i)
      acc += (chain[i] - mean) * (chain[i + lag] - mean);
    return acc / static_cast<double>(n);
  };

  const double g0 = gamma(0);
  if (g0 <= 0.0) return 1.0;

  // tau = 2 * sum_m (gamma_{2m} + gamma_{2m+1}) / gamma_0 - 1
  double sum = 0.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; 2 * m + 1 < n; ++m) {
    double pair = gamma(2 * m) + gamma(2 * m + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);  // enforce monotone decrease
    prev_pair = pair;
    sum += pair;
  }
  double tau = 2.0 * sum / g0 - 1.0;

  double ess = static_cast<double>(n) / std::max(tau, 1e-12);
  return std::clamp(ess, 1.0, static_cast<double>(n));
}

}  // namespace reflgrad
