#pragma once

// Prefix masks and loss-mass-preserving advantage rescaling, plus the
// fixed-prefix and random-release masking baselines.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "teachcut/changepoint.hpp"
#include "teachcut/errors.hpp"
#include "teachcut/random.hpp"
#include "teachcut/rollout.hpp"

namespace teachcut {

inline constexpr double kRescaleEps = 1e-8;

/// Token mask q_t with values in {0, 1}.
using Mask = std::vector<double>;

struct ReleaseResult {
  Mask prefix_mask;
  double scale = 1.0;
  std::vector<double> rescaled_advantages;
  ChangeDecision decision;
  std::size_t retained_tokens = 0;  // number of positions with q_t = 1
};

/// 1 on the union of the first `count` segments, 0 elsewhere.
inline Mask segment_prefix_mask(const SegmentIndex& segments, std::size_t count, std::size_t response_len) {
  Mask mask(response_len, 0.0);
  for (std::size_t i = 0; i < count && i < segments.size(); ++i) {
    for (std::size_t t : segments[i]) {
      if (t >= response_len) throw ValidationError("segments", i, "token index out of range for response length");
      mask[t] = 1.0;
    }
  }
  return mask;
}

/// Accepted: keep the first tau* segments. Otherwise keep every position.
inline Mask build_prefix_mask(const SegmentIndex& segments, const ChangeDecision& decision, std::size_t response_len) {
  if (!decision.accepted) {
    for (std::size_t i = 0; i < segments.size(); ++i) {
      if (segments[i].back() >= response_len) {
        throw ValidationError("segments", i, "token index out of range for response length");
      }
    }
    return Mask(response_len, 1.0);
  }
  return segment_prefix_mask(segments, decision.release_segment, response_len);
}

struct RescaledAdvantages {
  double scale = 1.0;
  std::vector<double> values;
};

/// scale = sum(l) / max(sum(l * q), eps); A'_t = A_t * q_t * scale.
inline RescaledAdvantages rescale_advantages(std::span<const double> advantages, std::span<const double> loss_mask,
                                             std::span<const double> prefix_mask, double eps = kRescaleEps) {
  if (advantages.size() != loss_mask.size() || advantages.size() != prefix_mask.size()) {
    throw ConfigError("advantages, loss_mask and prefix_mask must have the same length");
  }
  double total = 0.0;
  double kept = 0.0;
  for (std::size_t t = 0; t < loss_mask.size(); ++t) {
    total += loss_mask[t];
    kept += loss_mask[t] * prefix_mask[t];
  }
  RescaledAdvantages out;
  out.scale = total / std::max(kept, eps);
  out.values.resize(advantages.size());
  for (std::size_t t = 0; t < advantages.size(); ++t) {
    out.values[t] = advantages[t] * prefix_mask[t] * out.scale;
  }
  return out;
}

/// Keeps the first `prefix_tokens` positions regardless of content.
inline Mask fixed_prefix_mask(std::size_t response_len, std::size_t prefix_tokens) {
  if (prefix_tokens < 1) throw ConfigError("fixed prefix must keep at least one token");
  Mask mask(response_len, 0.0);
  std::fill_n(mask.begin(), std::min(prefix_tokens, response_len), 1.0);
  return mask;
}

inline std::size_t count_retained(std::span<const double> mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](double q) { return q != 0.0; }));
}

/// What a rollout's own release decision looked like, in length-free terms.
struct ReleasePoint {
  std::size_t response_length = 0;
  std::size_t retained_tokens = 0;         // == response_length when not accepted
  bool accepted = false;
  std::vector<std::size_t> segment_ends;   // tokens covered by the first j+1 segments

  double relative_position() const {
    return static_cast<double>(retained_tokens) / static_cast<double>(response_length);
  }
};

inline ReleasePoint make_release_point(const SegmentIndex& segments, std::size_t response_len, bool accepted,
                                       std::size_t retained_tokens) {
  ReleasePoint p;
  p.response_length = response_len;
  p.accepted = accepted;
  p.retained_tokens = accepted ? retained_tokens : response_len;
  p.segment_ends.reserve(segments.size());
  std::size_t covered = 0;
  for (const auto& seg : segments.segments()) {
    covered += seg.size();
    p.segment_ends.push_back(covered);
  }
  return p;
}

/// A release point transplanted onto another rollout.
struct ReleaseAssignment {
  std::size_t source = 0;           // batch index whose release point was taken
  double relative_position = 1.0;   // the source's relative position, unchanged
  bool accepted = false;            // the source's acceptance flag, unchanged
  std::size_t release_segment = 0;  // segments kept on the target after snapping
};

/// Smallest segment count on `target` whose token coverage reaches
/// `retained / length` of the target's length; at least one segment.
inline std::size_t snap_to_segment(const ReleasePoint& target, std::size_t retained, std::size_t length) {
  const std::size_t n = target.segment_ends.size();
  // ends[j] / T_target >= retained / length, compared exactly in integers.
  const auto need = static_cast<unsigned __int128>(retained) * target.response_length;
  for (std::size_t j = 0; j < n; ++j) {
    if (static_cast<unsigned __int128>(target.segment_ends[j]) * length >= need) return j + 1;
  }
  return n;
}

/// Randomly permutes release points across the batch. The multiset of
/// (relative position, accepted) pairs is preserved; each target keeps the
/// segments reaching the transplanted relative cutoff.
inline std::vector<ReleaseAssignment> permute_release_points(std::span<const ReleasePoint> points, std::uint64_t seed) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<ReleaseAssignment> out(points.size());
  for (std::size_t target = 0; target < points.size(); ++target) {
    const ReleasePoint& src = points[order[target]];
    ReleaseAssignment& a = out[target];
    a.source = order[target];
    a.relative_position = src.relative_position();
    a.accepted = src.accepted;
    a.release_segment = src.accepted ? snap_to_segment(points[target], src.retained_tokens, src.response_length)
                                     : points[target].segment_ends.size();
  }
  return out;
}

/// Mask a target rollout receives from its assignment.
inline Mask assignment_mask(const ReleaseAssignment& a, const SegmentIndex& segments, std::size_t response_len) {
  if (!a.accepted || a.release_segment == 0) return Mask(response_len, 1.0);
  return segment_prefix_mask(segments, a.release_segment, response_len);
}

}  // namespace teachcut
