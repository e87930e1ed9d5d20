#pragma once

// Single downward change point selection on segment scores via a profiled
// RSS-BIC comparison of a one-mean model against a two-mean one-drop model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "teachcut/errors.hpp"
#include "teachcut/segmentation.hpp"

namespace teachcut {

inline constexpr double kBicEps = 1e-12;
inline constexpr int kNoChangeParams = 1;  // one mean
inline constexpr int kOneDropParams = 3;   // two means + change location

struct ChangeDecision {
  std::size_t num_segments = 0;
  std::size_t release_segment = 0;  // leading segments retained: tau* if accepted, n otherwise
  bool accepted = false;
  double bic_gain = 0.0;            // max(0, BIC_0 - BIC_1(tau*))
  double bic_null = 0.0;            // BIC_0 (0 when n < 2)
  double bic_best = 0.0;            // BIC_1(tau*) if accepted, BIC_0 otherwise
  double mu_pre = 0.0;              // mean left of tau*, or the overall mean when not accepted
  std::optional<double> mu_post;    // mean right of tau*, only when accepted
};

/// n ln((rss + eps) / n) + k ln n.
inline double profiled_bic(std::size_t n, double rss, int num_params, double eps = kBicEps) {
  if (n == 0) throw ConfigError("BIC requires at least one value");
  const double nd = static_cast<double>(n);
  return nd * std::log((rss + eps) / nd) + num_params * std::log(nd);
}

inline double profiled_bic(std::span<const double> values, double rss, int num_params, double eps = kBicEps) {
  return profiled_bic(values.size(), rss, num_params, eps);
}

namespace detail {

// Running mean and sum of squared deviations (Welford).
struct RunningMoments {
  double count = 0.0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    count += 1.0;
    const double delta = x - mean;
    mean += delta / count;
    m2 += delta * (x - mean);
  }
};

}  // namespace detail

/// Scans every split tau in [1, n-1] whose right mean is strictly below its
/// left mean and keeps the split with the smallest one-drop BIC; earlier splits
/// win ties. Accepted iff that BIC is strictly below the no-change BIC.
inline ChangeDecision detect_downward_change(std::span<const double> scores, double eps = kBicEps) {
  const std::size_t n = scores.size();
  ChangeDecision d;
  d.num_segments = n;
  d.release_segment = n;

  // prefix[k] summarizes scores[0, k); suffix[k] summarizes scores[k, n).
  std::vector<detail::RunningMoments> prefix(n + 1);
  std::vector<detail::RunningMoments> suffix(n + 1);
  for (std::size_t k = 0; k < n; ++k) {
    prefix[k + 1] = prefix[k];
    prefix[k + 1].add(scores[k]);
  }
  for (std::size_t k = n; k-- > 0;) {
    suffix[k] = suffix[k + 1];
    suffix[k].add(scores[k]);
  }
  d.mu_pre = prefix[n].mean;
  if (n < 2) return d;

  const double bic0 = profiled_bic(n, prefix[n].m2, kNoChangeParams, eps);
  const double nd = static_cast<double>(n);
  const double penalty = kOneDropParams * std::log(nd);
  double best = bic0;
  std::size_t best_tau = n;
  for (std::size_t tau = 1; tau < n; ++tau) {
    const auto& left = prefix[tau];
    const auto& right = suffix[tau];
    if (right.mean >= left.mean) continue;
    const double bic1 = nd * std::log((left.m2 + right.m2 + eps) / nd) + penalty;
    if (bic1 < best) {
      best = bic1;
      best_tau = tau;
    }
  }

  d.bic_null = bic0;
  d.bic_best = best;
  d.accepted = best_tau < n;
  d.release_segment = best_tau;
  d.bic_gain = std::max(0.0, bic0 - best);
  if (d.accepted) {
    d.mu_pre = prefix[best_tau].mean;
    d.mu_post = suffix[best_tau].mean;
  }
  return d;
}

inline ChangeDecision detect_downward_change(const SegmentScores& scores, double eps = kBicEps) {
  return detect_downward_change(std::span<const double>(scores.scores), eps);
}

}  // namespace teachcut
