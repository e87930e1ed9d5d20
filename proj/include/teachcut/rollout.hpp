#pragma once

// Rollout data model: one student rollout with teacher/student log-probs for the
// sampled tokens and for the student's top-K candidate set at every position.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "teachcut/errors.hpp"

namespace teachcut {

/// Read-only view of the candidate set at one position. Candidates are ordered
/// by descending student log-prob, ties by ascending id.
struct TokenCandidates {
  std::span<const std::int64_t> ids;
  std::span<const double> student_logp;
  std::span<const double> teacher_logp;

  std::size_t size() const noexcept { return ids.size(); }
};

/// Ragged T x K storage for per-position candidate sets, flattened row-major.
class CandidateTable {
 public:
  CandidateTable() = default;

  void reserve(std::size_t positions, std::size_t total_candidates) {
    offsets_.reserve(positions + 1);
    ids_.reserve(total_candidates);
    student_.reserve(total_candidates);
    teacher_.reserve(total_candidates);
  }

  void push_back(std::span<const std::int64_t> ids, std::span<const double> student_logp,
                 std::span<const double> teacher_logp) {
    if (student_logp.size() != ids.size() || teacher_logp.size() != ids.size()) {
      throw ValidationError("topk", size(), "length mismatch between ids, student_logp and teacher_logp");
    }
    ids_.insert(ids_.end(), ids.begin(), ids.end());
    student_.insert(student_.end(), student_logp.begin(), student_logp.end());
    teacher_.insert(teacher_.end(), teacher_logp.begin(), teacher_logp.end());
    offsets_.push_back(ids_.size());
  }

  std::size_t size() const noexcept { return offsets_.size() - 1; }
  bool empty() const noexcept { return size() == 0; }

  TokenCandidates operator[](std::size_t t) const {
    const std::size_t begin = offsets_[t];
    const std::size_t count = offsets_[t + 1] - begin;
    return {std::span(ids_).subspan(begin, count), std::span(student_).subspan(begin, count),
            std::span(teacher_).subspan(begin, count)};
  }

  friend bool operator==(const CandidateTable&, const CandidateTable&) = default;

 private:
  std::vector<std::size_t> offsets_{0};
  std::vector<std::int64_t> ids_;
  std::vector<double> student_;
  std::vector<double> teacher_;
};

/// Ordered, disjoint, non-empty token-index lists B_i. Empty input lists are
/// dropped at construction.
class SegmentIndex {
 public:
  using Segment = std::vector<std::size_t>;

  SegmentIndex() = default;

  static SegmentIndex from_lists(std::vector<Segment> lists) {
    SegmentIndex index;
    index.segments_.reserve(lists.size());
    bool have_prev = false;
    std::size_t prev_max = 0;
    for (std::size_t i = 0; i < lists.size(); ++i) {
      Segment& seg = lists[i];
      if (seg.empty()) continue;
      for (std::size_t j = 1; j < seg.size(); ++j) {
        if (seg[j] <= seg[j - 1]) throw ValidationError("segments", i, "token indices must be strictly ascending");
      }
      if (have_prev && seg.front() <= prev_max) {
        throw ValidationError("segments", i, "segments must be disjoint and in response order");
      }
      prev_max = seg.back();
      have_prev = true;
      index.segments_.push_back(std::move(seg));
    }
    return index;
  }

  std::size_t size() const noexcept { return segments_.size(); }
  bool empty() const noexcept { return segments_.empty(); }
  const Segment& operator[](std::size_t i) const { return segments_[i]; }
  const std::vector<Segment>& segments() const noexcept { return segments_; }

  /// Number of tokens in the first `count` segments.
  std::size_t tokens_in_prefix(std::size_t count) const {
    std::size_t total = 0;
    for (std::size_t i = 0; i < count && i < segments_.size(); ++i) total += segments_[i].size();
    return total;
  }

  friend bool operator==(const SegmentIndex&, const SegmentIndex&) = default;

 private:
  std::vector<Segment> segments_;
};

struct RolloutRecord {
  std::string rollout_id;
  std::vector<std::string> token_surfaces;
  std::vector<double> sampled_teacher_logp;
  std::vector<double> sampled_student_logp;
  CandidateTable candidates;  // empty when the producer omitted `topk`
  std::vector<double> loss_mask;
  std::optional<SegmentIndex> segments;

  std::size_t response_length() const noexcept { return token_surfaces.size(); }
  bool has_candidates() const noexcept { return !candidates.empty(); }

  friend bool operator==(const RolloutRecord&, const RolloutRecord&) = default;
};

/// Per-token teacher-student advantage A_t.
struct AdvantageSeries {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
};

namespace detail {

inline void check_logp(const char* field, std::size_t position, double v) {
  if (!std::isfinite(v)) throw ValidationError(field, position, "log-probability is not finite");
  if (v > 0.0) throw ValidationError(field, position, "log-probability > 0");
}

}  // namespace detail

/// Throws ValidationError naming the first offending field and position.
inline void validate(const RolloutRecord& r) {
  const std::size_t T = r.token_surfaces.size();
  if (T == 0) throw ValidationError("tokens", 0, "response must contain at least one token");
  auto check_len = [T](const char* field, std::size_t n) {
    if (n != T) throw ValidationError(field, std::min(n, T), "length mismatch");
  };
  check_len("teacher_logp", r.sampled_teacher_logp.size());
  check_len("student_logp", r.sampled_student_logp.size());
  check_len("loss_mask", r.loss_mask.size());
  if (r.has_candidates()) check_len("topk", r.candidates.size());

  for (std::size_t t = 0; t < T; ++t) {
    detail::check_logp("teacher_logp", t, r.sampled_teacher_logp[t]);
    detail::check_logp("student_logp", t, r.sampled_student_logp[t]);
  }

  bool any_mass = false;
  for (std::size_t t = 0; t < T; ++t) {
    const double l = r.loss_mask[t];
    if (!(l >= 0.0 && l <= 1.0)) throw ValidationError("loss_mask", t, "value outside [0, 1]");
    any_mass = any_mass || l > 0.0;
  }
  if (!any_mass) throw ValidationError("loss_mask", 0, "at least one entry must be > 0");

  for (std::size_t t = 0; r.has_candidates() && t < T; ++t) {
    const TokenCandidates c = r.candidates[t];
    if (c.size() < 2) throw ValidationError("topk", t, "K < 2");
    for (std::size_t j = 0; j < c.size(); ++j) {
      detail::check_logp("topk.student_logp", t, c.student_logp[j]);
      detail::check_logp("topk.teacher_logp", t, c.teacher_logp[j]);
      if (j > 0) {
        const bool ordered = c.student_logp[j] < c.student_logp[j - 1] ||
                             (c.student_logp[j] == c.student_logp[j - 1] && c.ids[j] > c.ids[j - 1]);
        if (!ordered) {
          throw ValidationError("topk.student_logp", t,
                                "candidates not in descending student order (ties by ascending id)");
        }
      }
    }
  }

  if (r.segments) {
    for (std::size_t i = 0; i < r.segments->size(); ++i) {
      if ((*r.segments)[i].back() >= T) throw ValidationError("segments", i, "token index out of range");
    }
  }
}

/// A_t = log p_T(y_t) - log p_S(y_t).
inline AdvantageSeries sampled_advantage(const RolloutRecord& r) {
  const std::size_t T = r.sampled_teacher_logp.size();
  if (r.sampled_student_logp.size() != T) {
    throw ValidationError("student_logp", std::min(T, r.sampled_student_logp.size()), "length mismatch");
  }
  AdvantageSeries a;
  a.values.resize(T);
  for (std::size_t t = 0; t < T; ++t) a.values[t] = r.sampled_teacher_logp[t] - r.sampled_student_logp[t];
  return a;
}

}  // namespace teachcut
