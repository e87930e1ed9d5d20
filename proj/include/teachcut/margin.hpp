#pragma once

// Teacher nearest-competitor margin over the student's top-K candidate set.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "teachcut/errors.hpp"
#include "teachcut/rollout.hpp"

namespace teachcut {

inline constexpr std::size_t kDefaultSupportSize = 4;

struct MarginSeries {
  std::vector<double> values;                  // M_t >= 0
  std::vector<std::uint32_t> top1_index;       // teacher's first choice, index into the candidate list
  std::vector<std::uint32_t> top2_index;       // teacher's runner-up
  std::size_t support_size_used = 0;           // smallest effective K over all positions
  bool clamped = false;                        // requested K exceeded the exported K somewhere

  std::size_t size() const noexcept { return values.size(); }
};

struct TopTwo {
  std::size_t first;
  std::size_t second;
  double margin;
};

/// Ranks the first `support_size` candidates by teacher log-prob (ties by
/// ascending candidate id) and returns the top two with their gap.
inline TopTwo teacher_top_two(const TokenCandidates& c, std::size_t support_size) {
  const std::size_t k = std::min(support_size, c.size());
  auto better = [&c](std::size_t a, std::size_t b) {
    if (c.teacher_logp[a] != c.teacher_logp[b]) return c.teacher_logp[a] > c.teacher_logp[b];
    return c.ids[a] < c.ids[b];
  };
  std::size_t first = 0;
  std::size_t second = 1;
  if (better(second, first)) std::swap(first, second);
  for (std::size_t j = 2; j < k; ++j) {
    if (better(j, first)) {
      second = first;
      first = j;
    } else if (better(j, second)) {
      second = j;
    }
  }
  return {first, second, c.teacher_logp[first] - c.teacher_logp[second]};
}

/// M_t = log p_T(a^(1)) - log p_T(a^(2)) inside the first `support_size`
/// student candidates. Supports larger than the exported K are clamped.
inline MarginSeries teacher_top2_margin(const RolloutRecord& record, std::size_t support_size = kDefaultSupportSize) {
  if (support_size < 2) throw ConfigError("support size must be at least 2");
  if (!record.has_candidates()) {
    throw ValidationError("topk", 0, "record has no candidates; margins need the student top-K set");
  }
  const std::size_t T = record.candidates.size();
  MarginSeries m;
  m.values.resize(T);
  m.top1_index.resize(T);
  m.top2_index.resize(T);
  m.support_size_used = support_size;
  for (std::size_t t = 0; t < T; ++t) {
    const TokenCandidates c = record.candidates[t];
    if (c.size() < 2) {
      throw ValidationError("topk", t, "student_topk must expose at least two teacher probabilities");
    }
    if (c.size() < support_size) {
      m.clamped = true;
      m.support_size_used = std::min(m.support_size_used, c.size());
    }
    const TopTwo top = teacher_top_two(c, support_size);
    m.values[t] = top.margin;
    m.top1_index[t] = static_cast<std::uint32_t>(top.first);
    m.top2_index[t] = static_cast<std::uint32_t>(top.second);
  }
  return m;
}

}  // namespace teachcut
