#pragma once

// Sentence-level segmentation of a response and aggregation of token margins
// into segment teachability scores S_i = log1p(mean M_t over B_i).

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "teachcut/errors.hpp"
#include "teachcut/margin.hpp"
#include "teachcut/rollout.hpp"

namespace teachcut {

struct SegmentScores {
  std::vector<double> scores;
  SegmentIndex segment_index;

  std::size_t size() const noexcept { return scores.size(); }
};

/// True when a segment closes after a token with this surface: the surface,
/// with trailing closing quotes/brackets removed, ends in . ! ? ; or :, or the
/// surface contains a blank line ("\n\n").
inline bool closes_segment(std::string_view surface) {
  if (surface.find("\n\n") != std::string_view::npos) return true;
  while (!surface.empty()) {
    const char back = surface.back();
    if (back == '"' || back == '\'' || back == ')' || back == ']' || back == '}') {
      surface.remove_suffix(1);
    } else {
      break;
    }
  }
  if (surface.empty()) return false;
  switch (surface.back()) {
    case '.':
    case '!':
    case '?':
    case ';':
    case ':':
      return true;
    default:
      return false;
  }
}

/// Rule-based, token-aligned sentence segmenter. Every token lands in exactly
/// one segment; the last segment always closes at T-1.
inline SegmentIndex segment_tokens(std::span<const std::string> token_surfaces) {
  if (token_surfaces.empty()) throw ConfigError("cannot segment an empty response");
  std::vector<SegmentIndex::Segment> lists;
  SegmentIndex::Segment current;
  for (std::size_t t = 0; t < token_surfaces.size(); ++t) {
    current.push_back(t);
    if (closes_segment(token_surfaces[t])) {
      lists.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) lists.push_back(std::move(current));
  return SegmentIndex::from_lists(std::move(lists));
}

/// Record-supplied segments take precedence over the built-in segmenter unless
/// `force_builtin` is set.
inline SegmentIndex segments_for(const RolloutRecord& record, bool force_builtin = false) {
  if (record.segments && !force_builtin) return *record.segments;
  return segment_tokens(record.token_surfaces);
}

inline SegmentScores aggregate_segment_scores(std::span<const double> margins, SegmentIndex segments) {
  SegmentScores out;
  out.scores.reserve(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& seg = segments[i];
    double sum = 0.0;
    for (std::size_t t : seg) {
      if (t >= margins.size()) {
        throw ValidationError("segments", i,
                              "token index " + std::to_string(t) + " out of range for " +
                                  std::to_string(margins.size()) + " margins");
      }
      sum += margins[t];
    }
    out.scores.push_back(std::log1p(sum / static_cast<double>(seg.size())));
  }
  out.segment_index = std::move(segments);
  return out;
}

inline SegmentScores aggregate_segment_scores(const MarginSeries& margins, SegmentIndex segments) {
  return aggregate_segment_scores(std::span<const double>(margins.values), std::move(segments));
}

}  // namespace teachcut
