#pragma once

// Batch-level rollout diagnostics: position-binned advantage and margin
// statistics, release-point summaries, and the directional-SNR release check.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "teachcut/changepoint.hpp"
#include "teachcut/errors.hpp"
#include "teachcut/margin.hpp"
#include "teachcut/rollout.hpp"
#include "teachcut/segmentation.hpp"

namespace teachcut {

inline constexpr std::size_t kDefaultNumBins = 20;
inline constexpr double kDefaultGainThreshold = 6.0;

/// Count, mean and sum of squared deviations; merges are order-independent up
/// to rounding (Chan et al. pairwise update).
struct Moments {
  std::size_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++count;
    const double delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean);
  }

  void merge(const Moments& other) {
    if (other.count == 0) return;
    if (count == 0) {
      *this = other;
      return;
    }
    const double na = static_cast<double>(count);
    const double nb = static_cast<double>(other.count);
    const double n = na + nb;
    const double delta = other.mean - mean;
    mean += delta * nb / n;
    m2 += other.m2 + delta * delta * na * nb / n;
    count += other.count;
  }

  /// Population standard deviation.
  double stddev() const { return count == 0 ? 0.0 : std::sqrt(std::max(0.0, m2 / static_cast<double>(count))); }
};

/// Per-bin statistics; empty bins carry std::nullopt instead of a number.
struct BinnedStats {
  std::size_t num_bins = 0;
  std::vector<std::optional<double>> bin_mean;
  std::vector<std::optional<double>> bin_std;
  std::vector<std::size_t> bin_count;
  std::vector<std::optional<double>> normalized_std;  // bin_std / std of the first non-empty bin
  bool means_normalized = false;
  bool normalization_failed = false;  // requested mean normalization hit a zero baseline
};

/// Token t of a length-T series goes to bin floor(num_bins * t / T).
inline std::size_t bin_of(std::size_t t, std::size_t length, std::size_t num_bins) {
  return std::min(num_bins * t / length, num_bins - 1);
}

/// Mergeable per-bin partials for position-binned statistics.
class BinnedAccumulator {
 public:
  explicit BinnedAccumulator(std::size_t num_bins) : bins_(num_bins) {
    if (num_bins < 1) throw ConfigError("number of bins must be at least 1");
  }

  void add_series(std::span<const double> values) {
    const std::size_t T = values.size();
    if (T == 0) throw ConfigError("cannot bin an empty series");
    for (std::size_t t = 0; t < T; ++t) bins_[bin_of(t, T, bins_.size())].add(values[t]);
  }

  void merge(const BinnedAccumulator& other) {
    if (other.bins_.size() != bins_.size()) throw ConfigError("cannot merge accumulators with different bin counts");
    for (std::size_t b = 0; b < bins_.size(); ++b) bins_[b].merge(other.bins_[b]);
  }

  const std::vector<Moments>& bins() const noexcept { return bins_; }

  BinnedStats finish(bool normalize_means = false) const {
    const std::size_t B = bins_.size();
    BinnedStats s;
    s.num_bins = B;
    s.bin_mean.resize(B);
    s.bin_std.resize(B);
    s.bin_count.resize(B);
    s.normalized_std.resize(B);
    std::optional<std::size_t> first;
    for (std::size_t b = 0; b < B; ++b) {
      s.bin_count[b] = bins_[b].count;
      if (bins_[b].count == 0) continue;
      if (!first) first = b;
      s.bin_mean[b] = bins_[b].mean;
      s.bin_std[b] = bins_[b].stddev();
    }
    if (!first) return s;
    const double std0 = *s.bin_std[*first];
    if (std0 > 0.0) {
      for (std::size_t b = 0; b < B; ++b) {
        if (s.bin_std[b]) s.normalized_std[b] = *s.bin_std[b] / std0;
      }
    }
    if (normalize_means) {
      const double mean0 = *s.bin_mean[*first];
      if (mean0 == 0.0) {
        s.normalization_failed = true;
        std::fill(s.bin_mean.begin(), s.bin_mean.end(), std::nullopt);
      } else {
        s.means_normalized = true;
        for (auto& m : s.bin_mean) {
          if (m) *m /= mean0;
        }
      }
    }
    return s;
  }

 private:
  std::vector<Moments> bins_;
};

inline BinnedStats binned_advantage_stats(std::span<const AdvantageSeries> batch, std::size_t num_bins = kDefaultNumBins) {
  BinnedAccumulator acc(num_bins);
  if (batch.empty()) throw ConfigError("empty batch");
  for (const auto& series : batch) acc.add_series(series.values);
  return acc.finish();
}

/// Binned teacher-margin curve. With `normalize`, bin means are divided by the
/// first non-empty bin's mean; a zero baseline yields absent means and sets
/// `normalization_failed`.
inline BinnedStats binned_margin_curve(std::span<const MarginSeries> batch, std::size_t num_bins = kDefaultNumBins,
                                       bool normalize = true) {
  BinnedAccumulator acc(num_bins);
  if (batch.empty()) throw ConfigError("empty batch");
  for (const auto& series : batch) acc.add_series(series.values);
  return acc.finish(normalize);
}

/// One rollout's release outcome, as consumed by `release_summary`.
struct ReleaseObservation {
  ChangeDecision decision;
  std::size_t retained_tokens = 0;
  std::size_t response_length = 0;
};

inline ReleaseObservation observe_release(const ChangeDecision& decision, const SegmentScores& scores,
                                          std::size_t response_length) {
  const std::size_t retained =
      decision.accepted ? scores.segment_index.tokens_in_prefix(decision.release_segment) : response_length;
  return {decision, retained, response_length};
}

struct ReleaseSummary {
  std::size_t num_rollouts = 0;
  std::size_t num_accepted = 0;
  double acceptance_rate = 0.0;
  double mean_bic_gain = 0.0;
  double gain_threshold = kDefaultGainThreshold;
  double fraction_gain_above_threshold = 0.0;
  // Over accepted rollouts only; absent when none were accepted.
  std::optional<double> mean_relative_release_position;
  std::optional<double> median_relative_release_position;
  std::optional<double> mean_pre_margin;
  std::optional<double> mean_post_margin;
};

inline ReleaseSummary release_summary(std::span<const ReleaseObservation> batch,
                                      double gain_threshold = kDefaultGainThreshold) {
  if (batch.empty()) throw ConfigError("empty batch");
  ReleaseSummary s;
  s.num_rollouts = batch.size();
  s.gain_threshold = gain_threshold;
  std::vector<double> positions;
  double gain_sum = 0.0;
  double pre_sum = 0.0;
  double post_sum = 0.0;
  std::size_t above = 0;
  for (const auto& obs : batch) {
    const ChangeDecision& d = obs.decision;
    const double gain = d.accepted ? d.bic_gain : 0.0;
    gain_sum += gain;
    if (gain > gain_threshold) ++above;
    if (!d.accepted) continue;
    ++s.num_accepted;
    positions.push_back(static_cast<double>(obs.retained_tokens) / static_cast<double>(obs.response_length));
    pre_sum += d.mu_pre;
    post_sum += d.mu_post.value_or(0.0);
  }
  const double n = static_cast<double>(s.num_rollouts);
  s.acceptance_rate = static_cast<double>(s.num_accepted) / n;
  s.mean_bic_gain = gain_sum / n;
  s.fraction_gain_above_threshold = static_cast<double>(above) / n;
  if (!positions.empty()) {
    const double k = static_cast<double>(positions.size());
    double pos_sum = 0.0;
    for (double p : positions) pos_sum += p;
    s.mean_relative_release_position = pos_sum / k;
    // lower midpoint on even counts
    const std::size_t mid = (positions.size() - 1) / 2;
    std::nth_element(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(mid), positions.end());
    s.median_relative_release_position = positions[mid];
    s.mean_pre_margin = pre_sum / k;
    s.mean_post_margin = post_sum / k;
  }
  return s;
}

struct SnrReport {
  double m_prefix = 0.0;
  double v_prefix = 0.0;
  double m_suffix = 0.0;
  double v_suffix = 0.0;
  double snr_full = 0.0;
  double snr_release = 0.0;
  bool release_improves = false;
  // v_R/v_P >= 2 r + r^2 with r = m_R/m_P; absent when m_P == 0.
  std::optional<bool> ratio_form_improves;
  std::optional<bool> forms_agree;
};

/// Compares the directional SNR of the retained prefix, m_P^2 / v_P, against
/// the full update's (m_P + m_R)^2 / (v_P + v_R).
inline SnrReport snr_release_check(double m_prefix, double v_prefix, double m_suffix, double v_suffix) {
  if (!(v_prefix > 0.0)) throw ConfigError("prefix variance v_P must be > 0");
  if (!(v_suffix >= 0.0)) throw ConfigError("suffix variance v_R must be >= 0");
  SnrReport r;
  r.m_prefix = m_prefix;
  r.v_prefix = v_prefix;
  r.m_suffix = m_suffix;
  r.v_suffix = v_suffix;
  const double total = m_prefix + m_suffix;
  r.snr_release = m_prefix * m_prefix / v_prefix;
  r.snr_full = total * total / (v_prefix + v_suffix);
  r.release_improves = r.snr_release >= r.snr_full;
  if (m_prefix != 0.0) {
    const double ratio = m_suffix / m_prefix;
    r.ratio_form_improves = v_suffix / v_prefix >= 2.0 * ratio + ratio * ratio;
    r.forms_agree = *r.ratio_form_improves == r.release_improves;
  }
  return r;
}

// CSV output. Absent values are written as empty fields.

inline std::string format_number(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string format_number(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline void write_bins_csv(std::ostream& out, const BinnedStats& s) {
  out << "bin,count,mean,std,normalized_std\n";
  for (std::size_t b = 0; b < s.num_bins; ++b) {
    out << b << ',' << s.bin_count[b] << ',' << format_number(s.bin_mean[b]) << ',' << format_number(s.bin_std[b])
        << ',' << format_number(s.normalized_std[b]) << '\n';
  }
}

inline void write_summary_csv(std::ostream& out, const ReleaseSummary& s) {
  out << "num_rollouts,num_accepted,acceptance_rate,mean_bic_gain,gain_threshold,fraction_gain_above_threshold,"
         "mean_relative_release_position,median_relative_release_position,mean_pre_margin,mean_post_margin\n";
  out << s.num_rollouts << ',' << s.num_accepted << ',' << format_number(s.acceptance_rate) << ','
      << format_number(s.mean_bic_gain) << ',' << format_number(s.gain_threshold) << ','
      << format_number(s.fraction_gain_above_threshold) << ',' << format_number(s.mean_relative_release_position)
      << ',' << format_number(s.median_relative_release_position) << ',' << format_number(s.mean_pre_margin) << ','
      << format_number(s.mean_post_margin) << '\n';
}

inline void write_snr_csv(std::ostream& out, const SnrReport& r) {
  auto flag = [](std::optional<bool> b) { return b ? std::string(*b ? "true" : "false") : std::string(); };
  out << "m_prefix,v_prefix,m_suffix,v_suffix,snr_full,snr_release,release_improves,ratio_form_improves,forms_agree\n";
  out << format_number(r.m_prefix) << ',' << format_number(r.v_prefix) << ',' << format_number(r.m_suffix) << ','
      << format_number(r.v_suffix) << ',' << format_number(r.snr_full) << ',' << format_number(r.snr_release) << ','
      << (r.release_improves ? "true" : "false") << ',' << flag(r.ratio_form_improves) << ','
      << flag(r.forms_agree) << '\n';
}

}  // namespace teachcut
