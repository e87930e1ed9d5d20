#pragma once

// Synthetic rollouts with a planted one-drop teachability profile.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "teachcut/errors.hpp"
#include "teachcut/random.hpp"
#include "teachcut/rollout.hpp"

namespace teachcut {

struct SyntheticConfig {
  std::size_t num_segments = 6;
  std::size_t tokens_per_segment = 10;
  std::optional<std::size_t> true_tau;  // absent: constant mean `pre_margin_mean` throughout
  double pre_margin_mean = 2.0;
  double post_margin_mean = 0.0;
  double noise_std = 0.0;
  std::size_t support_size = 4;
  std::uint64_t seed = 0;
  std::vector<double> segment_means;  // optional per-segment profile; overrides the two-level means
};

struct GroundTruth {
  std::string rollout_id;
  std::optional<std::size_t> true_tau;
  std::vector<double> planted_margins;  // per token
};

struct SyntheticRollout {
  RolloutRecord record;
  GroundTruth truth;
};

inline constexpr double kSyntheticTopTeacherLogp = -0.1;
inline constexpr double kSyntheticTailStep = 1.0;

inline void validate(const SyntheticConfig& c) {
  if (c.num_segments < 1) throw ConfigError("num_segments must be >= 1");
  if (c.tokens_per_segment < 1) throw ConfigError("tokens_per_segment must be >= 1");
  if (c.support_size < 2) throw ConfigError("support_size must be >= 2");
  if (!(c.noise_std >= 0.0) || !std::isfinite(c.noise_std)) throw ConfigError("noise_std must be finite and >= 0");
  if (!(c.pre_margin_mean >= 0.0) || !(c.post_margin_mean >= 0.0)) throw ConfigError("margin means must be >= 0");
  if (!c.segment_means.empty()) {
    if (c.segment_means.size() != c.num_segments) throw ConfigError("segment_means must have num_segments entries");
    for (double m : c.segment_means) {
      if (!(m >= 0.0) || !std::isfinite(m)) throw ConfigError("segment_means must be finite and >= 0");
    }
    if (c.true_tau) throw ConfigError("true_tau cannot be combined with segment_means");
  }
  if (c.true_tau) {
    if (*c.true_tau < 1 || *c.true_tau >= c.num_segments) throw ConfigError("true_tau must lie in [1, n-1]");
    if (!(c.pre_margin_mean > c.post_margin_mean)) throw ConfigError("pre_margin_mean must exceed post_margin_mean");
  }
}

/// Mean margin of segment `i` under the planted profile.
inline double planted_segment_mean(const SyntheticConfig& c, std::size_t i) {
  if (!c.segment_means.empty()) return c.segment_means[i];
  return (c.true_tau && i >= *c.true_tau) ? c.post_margin_mean : c.pre_margin_mean;
}

/// Generates rollout `index` of a batch. Token margins are the segment mean plus
/// Gaussian noise floored at 0; the teacher's top two candidates sit at -0.1 and
/// -0.1 - m, other candidates descend in unit steps below the runner-up.
/// Segment boundaries are emitted in the record and also match the built-in
/// segmenter (each segment ends with a "." token).
inline SyntheticRollout generate_piecewise_rollout(const SyntheticConfig& config, std::uint64_t index = 0) {
  validate(config);
  Rng rng(derive_seed(config.seed, index));
  const std::size_t n = config.num_segments;
  const std::size_t per = config.tokens_per_segment;
  const std::size_t K = config.support_size;
  const std::size_t T = n * per;

  SyntheticRollout out;
  RolloutRecord& r = out.record;
  r.rollout_id = "sim-" + std::to_string(index);
  r.token_surfaces.reserve(T);
  r.sampled_teacher_logp.reserve(T);
  r.sampled_student_logp.reserve(T);
  r.loss_mask.assign(T, 1.0);
  r.candidates.reserve(T, T * K);
  out.truth.rollout_id = r.rollout_id;
  out.truth.true_tau = config.true_tau;
  out.truth.planted_margins.reserve(T);

  std::vector<std::int64_t> ids(K);
  std::vector<double> student(K);
  std::vector<double> teacher(K);
  std::vector<std::size_t> teacher_rank(K);
  for (std::size_t j = 0; j < K; ++j) student[j] = -0.25 - 0.5 * static_cast<double>(j);

  std::vector<SegmentIndex::Segment> segments(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = planted_segment_mean(config, i);
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t t = i * per + k;
      const double noise = config.noise_std > 0.0 ? config.noise_std * rng.normal() : 0.0;
      const double m = std::max(0.0, mean + noise);

      const auto base = static_cast<std::int64_t>(rng.below(50000));
      for (std::size_t j = 0; j < K; ++j) ids[j] = base + static_cast<std::int64_t>(j);
      // Random teacher ranking of the student's candidates (Fisher-Yates).
      std::iota(teacher_rank.begin(), teacher_rank.end(), std::size_t{0});
      for (std::size_t j = K; j > 1; --j) std::swap(teacher_rank[j - 1], teacher_rank[rng.below(j)]);
      for (std::size_t j = 0; j < K; ++j) {
        const std::size_t rank = teacher_rank[j];
        teacher[j] = rank == 0 ? kSyntheticTopTeacherLogp
                               : kSyntheticTopTeacherLogp - m - kSyntheticTailStep * static_cast<double>(rank - 1);
      }
      r.candidates.push_back(ids, student, teacher);
      r.sampled_student_logp.push_back(student[0]);
      r.sampled_teacher_logp.push_back(teacher[0]);
      r.token_surfaces.emplace_back(k + 1 == per ? "." : " w");
      segments[i].push_back(t);
      out.truth.planted_margins.push_back(m);
    }
  }
  r.segments = SegmentIndex::from_lists(std::move(segments));
  return out;
}

}  // namespace teachcut
