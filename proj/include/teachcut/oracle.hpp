#pragma once

// Brute-force reference for downward change-point selection. Recomputes means
// and residual sums from scratch for every split; shares no code with
// changepoint.hpp so the two can be checked against each other.

#include <cmath>
#include <cstddef>
#include <span>

namespace teachcut::oracle {

struct OracleDecision {
  std::size_t release_segment = 0;
  bool accepted = false;
  double bic_gain = 0.0;
};

namespace detail {

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double rss(std::span<const double> v) {
  const double mu = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return s;
}

inline double bic(double n, double rss, double k) { return n * std::log((rss + 1e-12) / n) + k * std::log(n); }

}  // namespace detail

inline OracleDecision oracle_change_point(std::span<const double> scores) {
  const std::size_t n = scores.size();
  if (n < 2) return {n, false, 0.0};
  const double nd = static_cast<double>(n);
  const double bic0 = detail::bic(nd, detail::rss(scores), 1.0);
  double best = bic0;
  std::size_t best_tau = n;
  for (std::size_t tau = 1; tau < n; ++tau) {
    const auto left = scores.first(tau);
    const auto right = scores.subspan(tau);
    if (!(detail::mean(right) < detail::mean(left))) continue;
    const double b = detail::bic(nd, detail::rss(left) + detail::rss(right), 3.0);
    if (b < best) {
      best = b;
      best_tau = tau;
    }
  }
  const double gain = bic0 - best;
  return {best_tau, best_tau < n, gain > 0.0 ? gain : 0.0};
}

}  // namespace teachcut::oracle
