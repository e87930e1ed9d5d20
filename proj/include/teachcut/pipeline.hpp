#pragma once

// End-to-end release computation for single rollouts and JSONL batches.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "teachcut/changepoint.hpp"
#include "teachcut/diagnostics.hpp"
#include "teachcut/errors.hpp"
#include "teachcut/json_io.hpp"
#include "teachcut/margin.hpp"
#include "teachcut/parallel.hpp"
#include "teachcut/reweight.hpp"
#include "teachcut/rollout.hpp"
#include "teachcut/segmentation.hpp"

namespace teachcut {

/// Trajectory-specific release at the best downward BIC change point.
struct BicRelease {};
/// Dense supervision on every token.
struct FullSupervision {};
/// Keep a global number of leading tokens.
struct FixedPrefix {
  std::size_t tokens = 1024;
};
/// BIC release points randomly permuted across the batch.
struct RandomRelease {
  std::uint64_t seed = 0;
};

using Strategy = std::variant<BicRelease, FullSupervision, FixedPrefix, RandomRelease>;

enum class SegmentsSource { record, builtin };

struct PipelineConfig {
  std::size_t support_size = kDefaultSupportSize;
  double bic_eps = kBicEps;
  double rescale_eps = kRescaleEps;
  std::size_t num_bins = kDefaultNumBins;
  double gain_threshold = kDefaultGainThreshold;
  Strategy strategy = BicRelease{};
  SegmentsSource segments_source = SegmentsSource::record;
};

inline std::string strategy_name(const Strategy& s) {
  struct {
    std::string operator()(const BicRelease&) const { return "bic"; }
    std::string operator()(const FullSupervision&) const { return "full"; }
    std::string operator()(const FixedPrefix& f) const { return "fixed:" + std::to_string(f.tokens); }
    std::string operator()(const RandomRelease&) const { return "random"; }
  } visitor;
  return std::visit(visitor, s);
}

inline void validate(const PipelineConfig& c) {
  if (c.support_size < 2) throw ConfigError("support size must be at least 2");
  if (c.num_bins < 1) throw ConfigError("number of bins must be at least 1");
  if (!(c.bic_eps > 0.0) || !(c.rescale_eps > 0.0)) throw ConfigError("eps values must be > 0");
  if (const auto* f = std::get_if<FixedPrefix>(&c.strategy); f && f->tokens < 1) {
    throw ConfigError("fixed prefix must keep at least one token");
  }
}

inline bool uses_change_points(const Strategy& s) {
  return std::holds_alternative<BicRelease>(s) || std::holds_alternative<RandomRelease>(s);
}

/// Everything computed for one rollout on the way to its release result.
struct RolloutRelease {
  ReleaseResult result;
  SegmentIndex segments;
  AdvantageSeries advantages;
  std::optional<MarginSeries> margins;
  std::optional<ReleaseAssignment> assignment;  // set by the random-release pass
};

inline RolloutRelease analyze_rollout(const RolloutRecord& record, const PipelineConfig& config) {
  const std::size_t T = record.response_length();
  RolloutRelease out;
  out.advantages = sampled_advantage(record);
  const bool builtin = config.segments_source == SegmentsSource::builtin;
  ReleaseResult& res = out.result;

  if (uses_change_points(config.strategy)) {
    if (!record.has_candidates()) {
      throw ConfigError("strategy " + strategy_name(config.strategy) + " needs top-K candidates but record '" +
                        record.rollout_id + "' has none");
    }
    out.margins = teacher_top2_margin(record, config.support_size);
    SegmentScores scores = aggregate_segment_scores(*out.margins, segments_for(record, builtin));
    res.decision = detect_downward_change(scores, config.bic_eps);
    out.segments = std::move(scores.segment_index);
    res.prefix_mask = build_prefix_mask(out.segments, res.decision, T);
  } else {
    out.segments = segments_for(record, builtin);
    res.decision.num_segments = out.segments.size();
    res.decision.release_segment = out.segments.size();
    if (const auto* f = std::get_if<FixedPrefix>(&config.strategy)) {
      res.prefix_mask = fixed_prefix_mask(T, f->tokens);
    } else {
      res.prefix_mask = Mask(T, 1.0);
    }
  }
  RescaledAdvantages r = rescale_advantages(out.advantages.values, record.loss_mask, res.prefix_mask, config.rescale_eps);
  res.scale = r.scale;
  res.rescaled_advantages = std::move(r.values);
  res.retained_tokens = count_retained(res.prefix_mask);
  return out;
}

/// margin -> segments -> segment scores -> change point -> prefix mask ->
/// mass-preserving rescale. `full` and `fixed_prefix` skip the margin and BIC
/// stages. `random_release` needs a batch; for one record it equals `bic`.
inline ReleaseResult dynamic_prefix_reweight(const RolloutRecord& record, const PipelineConfig& config = {}) {
  validate(config);
  return analyze_rollout(record, config).result;
}

/// Applies permuted release points to already-analyzed rollouts, in place.
inline void apply_random_release(std::vector<RolloutRelease>& batch, std::span<const std::span<const double>> loss_masks,
                                 std::uint64_t seed, double rescale_eps = kRescaleEps) {
  std::vector<ReleasePoint> points;
  points.reserve(batch.size());
  for (const auto& r : batch) {
    points.push_back(make_release_point(r.segments, r.result.prefix_mask.size(), r.result.decision.accepted,
                                        r.result.retained_tokens));
  }
  const std::vector<ReleaseAssignment> assigned = permute_release_points(points, seed);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    RolloutRelease& r = batch[i];
    const std::size_t T = r.result.prefix_mask.size();
    r.assignment = assigned[i];
    r.result.prefix_mask = assignment_mask(assigned[i], r.segments, T);
    RescaledAdvantages resc = rescale_advantages(r.advantages.values, loss_masks[i], r.result.prefix_mask, rescale_eps);
    r.result.scale = resc.scale;
    r.result.rescaled_advantages = std::move(resc.values);
    r.result.retained_tokens = count_retained(r.result.prefix_mask);
  }
}

/// Writes the `release` object attached to each output record.
inline void write_release_json(json::Writer& w, const RolloutRelease& r, const Strategy& strategy) {
  const ReleaseResult& res = r.result;
  w.StartObject();
  w.Key("strategy");
  const std::string name = strategy_name(strategy);
  w.String(name.data(), static_cast<rapidjson::SizeType>(name.size()));
  w.Key("accepted");
  w.Bool(res.decision.accepted);
  w.Key("release_segment");
  w.Uint64(res.decision.release_segment);
  w.Key("num_segments");
  w.Uint64(res.decision.num_segments);
  w.Key("bic_gain");
  w.Double(res.decision.bic_gain);
  if (res.decision.accepted) {
    w.Key("mu_pre");
    w.Double(res.decision.mu_pre);
    w.Key("mu_post");
    w.Double(res.decision.mu_post.value_or(0.0));
  }
  if (r.assignment) {
    w.Key("source");
    w.Uint64(r.assignment->source);
    w.Key("assigned_accepted");
    w.Bool(r.assignment->accepted);
    w.Key("assigned_relative_position");
    w.Double(r.assignment->relative_position);
    w.Key("assigned_release_segment");
    w.Uint64(r.assignment->release_segment);
  }
  w.Key("retained_tokens");
  w.Uint64(res.retained_tokens);
  w.Key("scale");
  w.Double(res.scale);
  w.Key("segment_ends");
  w.StartArray();
  std::size_t covered = 0;
  for (const auto& seg : r.segments.segments()) {
    covered += seg.size();
    w.Uint64(covered);
  }
  w.EndArray();
  w.Key("prefix_mask");
  w.StartArray();
  for (double q : res.prefix_mask) w.Int(q != 0.0 ? 1 : 0);
  w.EndArray();
  w.Key("rescaled_advantages");
  json::write_doubles(w, res.rescaled_advantages);
  w.EndObject();
}

namespace detail {

inline std::string_view trim_right(std::string_view s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

inline bool is_blank(std::string_view s) { return s.find_first_not_of(" \t\r\n") == std::string_view::npos; }

inline std::string render_release(const RolloutRelease& r, const Strategy& strategy) {
  rapidjson::StringBuffer buffer;
  json::Writer w(buffer);
  write_release_json(w, r, strategy);
  return {buffer.GetString(), buffer.GetSize()};
}

/// The input object minus its closing brace, re-serialized without any
/// existing `release` member. Empty when the input text can be reused as is.
inline std::string body_without_release(json::Element root) {
  json::Object obj = root.get_object().value_unsafe();
  if (!json::find(obj, "release")) return {};
  std::string body = "{";
  bool first = true;
  for (auto field : obj) {
    if (field.key == "release") continue;
    if (!first) body.push_back(',');
    first = false;
    rapidjson::StringBuffer key;
    json::Writer w(key);
    w.String(field.key.data(), static_cast<rapidjson::SizeType>(field.key.size()));
    body.append(key.GetString(), key.GetSize());
    body.push_back(':');
    body.append(simdjson::minify(field.value));
  }
  return body;
}

/// Writes the input object with a `release` member appended.
inline void write_with_release(std::ostream& out, std::string_view line, const std::string& rebuilt_body,
                               const std::string& release_json) {
  std::string_view body = rebuilt_body;
  if (body.empty()) {
    body = trim_right(line);
    body.remove_suffix(1);  // closing brace
  }
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (body.find_last_not_of(" \t\r\n") != 0) out.put(',');  // "{" alone has no members
  out.write("\"release\":", 10);
  out.write(release_json.data(), static_cast<std::streamsize>(release_json.size()));
  out.write("}\n", 2);
}

inline std::string rollout_id_of(json::Element root) {
  json::Object obj;
  std::string_view id;
  if (root.get_object().get(obj) || !json::find(obj, "rollout_id") || json::member(obj, "rollout_id").get_string().get(id)) {
    return {};
  }
  return std::string(id);
}

}  // namespace detail

struct RecordError {
  std::size_t line = 0;  // 1-based input line
  std::string rollout_id;
  std::string message;
};

/// Raised in strict mode on the first bad record.
class BatchAborted : public Error {
 public:
  explicit BatchAborted(RecordError e)
      : Error("line " + std::to_string(e.line) + (e.rollout_id.empty() ? "" : " (" + e.rollout_id + ")") + ": " +
              e.message),
        error(std::move(e)) {}

  RecordError error;
};

struct BatchOptions {
  bool strict = false;
  std::size_t jobs = 0;  // 0: hardware concurrency
  ParseOptions parse;
  std::size_t chunk_lines = 2048;
  std::function<void(const RecordError&)> on_error;
};

struct BatchReport {
  std::size_t records = 0;  // non-blank input lines
  std::size_t ok = 0;
  std::size_t errors = 0;
  std::size_t accepted = 0;
  std::size_t clamped = 0;  // records whose exported K was below the requested support size
  std::vector<RecordError> error_log;
  BinnedAccumulator advantage_bins;
  BinnedAccumulator margin_bins;
  std::vector<ReleaseObservation> observations;  // only for change-point strategies

  explicit BatchReport(std::size_t num_bins) : advantage_bins(num_bins), margin_bins(num_bins) {}

  double acceptance_rate() const { return ok == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(ok); }
};

namespace detail {

/// Reads newline-delimited text in large blocks. Returned lines point into
/// the block, stay valid until the next call, and are followed by at least
/// SIMDJSON_PADDING readable bytes.
class LineBlockReader {
 public:
  explicit LineBlockReader(std::istream& in, std::size_t block_bytes = std::size_t{32} << 20)
      : in_(in), block_bytes_(block_bytes) {}

  /// Appends up to `max_lines` non-blank lines; false once input is exhausted.
  bool next(std::size_t max_lines, std::vector<std::string_view>& lines, std::vector<std::size_t>& line_numbers) {
    lines.clear();
    line_numbers.clear();
    // Unconsumed bytes move to the front; earlier views are dead by now.
    std::copy(buf_.begin() + static_cast<std::ptrdiff_t>(begin_), buf_.begin() + static_cast<std::ptrdiff_t>(end_),
              buf_.begin());
    end_ -= begin_;
    begin_ = 0;
    while (lines.size() < max_lines) {
      const char* first = buf_.data() + begin_;
      const void* nl = std::memchr(first, '\n', end_ - begin_);
      if (nl == nullptr) {
        if (!lines.empty()) break;  // refilling would move bytes under live views
        if (eof_) {
          if (end_ > begin_) take(end_, end_, lines, line_numbers);
          return !lines.empty();
        }
        fill();
        continue;
      }
      const std::size_t stop = static_cast<std::size_t>(static_cast<const char*>(nl) - buf_.data());
      take(stop, stop + 1, lines, line_numbers);
    }
    return true;
  }

 private:
  void take(std::size_t stop, std::size_t next, std::vector<std::string_view>& lines,
            std::vector<std::size_t>& line_numbers) {
    ++line_no_;
    const std::string_view line(buf_.data() + begin_, stop - begin_);
    begin_ = next;
    if (is_blank(line)) return;
    lines.push_back(line);
    line_numbers.push_back(line_no_);
  }

  void fill() {
    if (begin_ > 0) {
      std::copy(buf_.begin() + static_cast<std::ptrdiff_t>(begin_), buf_.begin() + static_cast<std::ptrdiff_t>(end_),
                buf_.begin());
      end_ -= begin_;
      begin_ = 0;
    }
    const std::size_t want = std::max(block_bytes_, 2 * end_);
    if (buf_.size() < want + simdjson::SIMDJSON_PADDING) buf_.resize(want + simdjson::SIMDJSON_PADDING);
    in_.read(buf_.data() + end_, static_cast<std::streamsize>(want - end_));
    const auto got = static_cast<std::size_t>(in_.gcount());
    end_ += got;
    if (got == 0 || !in_) eof_ = true;
  }

  std::istream& in_;
  std::size_t block_bytes_;
  std::vector<char> buf_ = std::vector<char>(simdjson::SIMDJSON_PADDING);
  std::size_t begin_ = 0;
  std::size_t end_ = 0;
  std::size_t line_no_ = 0;
  bool eof_ = false;
};

struct LineOutcome {
  std::optional<RolloutRecord> record;  // kept only for the random-release pass
  std::optional<RolloutRelease> release;
  std::string rebuilt_body;
  std::string release_json;
  std::optional<RecordError> error;
  std::optional<BinnedAccumulator> advantage_bins;
  std::optional<BinnedAccumulator> margin_bins;
};

inline LineOutcome process_line(std::string_view line, std::size_t line_no, const PipelineConfig& config,
                                const BatchOptions& options, bool keep_for_batch_pass) {
  LineOutcome out;
  std::optional<json::Element> root;
  try {
    root = json::thread_reader().parse_padded(line);
    RolloutRecord record = json::record_from_element(*root, options.parse);
    RolloutRelease rel = analyze_rollout(record, config);
    out.advantage_bins.emplace(config.num_bins);
    out.advantage_bins->add_series(rel.advantages.values);
    if (rel.margins) {
      out.margin_bins.emplace(config.num_bins);
      out.margin_bins->add_series(rel.margins->values);
    }
    out.rebuilt_body = body_without_release(*root);
    if (keep_for_batch_pass) {
      out.record = std::move(record);
    } else {
      out.release_json = render_release(rel, config.strategy);
    }
    out.release = std::move(rel);
  } catch (const Error& e) {
    out.error = RecordError{line_no, root ? rollout_id_of(*root) : std::string(), e.what()};
  }
  return out;
}

}  // namespace detail

/// Reads rollout JSONL from `in` and writes one output line per healthy
/// record, in input order. Bad records are reported and skipped unless
/// `options.strict`, which throws BatchAborted on the first one.
inline BatchReport process_batch(std::istream& in, std::ostream& out, const PipelineConfig& config,
                                 const BatchOptions& options = {}) {
  validate(config);
  const std::size_t jobs = options.jobs == 0 ? default_jobs() : options.jobs;
  const auto* random = std::get_if<RandomRelease>(&config.strategy);
  const bool batch_pass = random != nullptr;
  const bool track_decisions = uses_change_points(config.strategy);

  BatchReport report(config.num_bins);
  std::vector<RolloutRelease> held;
  std::vector<RolloutRecord> held_records;
  std::vector<std::string> held_lines;
  std::vector<std::string> held_bodies;

  std::vector<std::string_view> lines;
  std::vector<std::size_t> line_numbers;
  std::vector<detail::LineOutcome> outcomes;
  detail::LineBlockReader reader(in);
  while (reader.next(options.chunk_lines, lines, line_numbers)) {
    outcomes.clear();
    outcomes.resize(lines.size());
    parallel_for(lines.size(), jobs, [&](std::size_t i) {
      outcomes[i] = detail::process_line(lines[i], line_numbers[i], config, options, batch_pass);
    });
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      detail::LineOutcome& o = outcomes[i];
      ++report.records;
      if (o.error) {
        ++report.errors;
        if (options.on_error) options.on_error(*o.error);
        if (options.strict) throw BatchAborted(*o.error);
        report.error_log.push_back(std::move(*o.error));
        continue;
      }
      ++report.ok;
      if (o.release->margins && o.release->margins->clamped) ++report.clamped;
      report.advantage_bins.merge(*o.advantage_bins);
      if (o.margin_bins) report.margin_bins.merge(*o.margin_bins);
      const ReleaseResult& res = o.release->result;
      if (track_decisions) {
        if (res.decision.accepted) ++report.accepted;
        report.observations.push_back({res.decision, res.retained_tokens, res.prefix_mask.size()});
      }
      if (batch_pass) {
        held.push_back(std::move(*o.release));
        held_records.push_back(std::move(*o.record));
        held_lines.emplace_back(lines[i]);
        held_bodies.push_back(std::move(o.rebuilt_body));
      } else {
        detail::write_with_release(out, lines[i], o.rebuilt_body, o.release_json);
      }
    }
  }

  if (batch_pass && !held.empty()) {
    std::vector<std::span<const double>> masks;
    masks.reserve(held_records.size());
    for (const auto& r : held_records) masks.emplace_back(r.loss_mask);
    apply_random_release(held, masks, random->seed, config.rescale_eps);
    std::vector<std::string> rendered(held.size());
    parallel_for(held.size(), jobs, [&](std::size_t i) { rendered[i] = detail::render_release(held[i], config.strategy); });
    for (std::size_t i = 0; i < held.size(); ++i) {
      detail::write_with_release(out, held_lines[i], held_bodies[i], rendered[i]);
    }
  }
  out.flush();
  return report;
}

namespace detail {

inline RolloutRelease release_from_output(json::Element root, const RolloutRecord& record, bool builtin_segments) {
  json::Object rel;
  if (auto v = json::find(root.get_object().value_unsafe(), "release"); !v || v->get_object().get(rel)) {
    throw ValidationError("release", 0, "missing release object; run `release` first");
  }
  auto get_bool = [&rel](const char* name) {
    bool b;
    if (json::member(rel, name).get_bool().get(b)) throw ValidationError(std::string("release.") + name, 0, "expected a boolean");
    return b;
  };
  auto get_uint = [&rel](const char* name) {
    std::uint64_t u;
    if (json::member(rel, name).get_uint64().get(u)) {
      throw ValidationError(std::string("release.") + name, 0, "expected a non-negative integer");
    }
    return static_cast<std::size_t>(u);
  };
  auto get_double = [&rel](const char* name) { return json::as_number(json::member(rel, name), name, 0); };

  RolloutRelease r;
  r.advantages = sampled_advantage(record);
  r.segments = segments_for(record, builtin_segments);
  ChangeDecision& d = r.result.decision;
  d.accepted = get_bool("accepted");
  d.release_segment = get_uint("release_segment");
  d.num_segments = get_uint("num_segments");
  d.bic_gain = get_double("bic_gain");
  if (d.accepted) {
    d.mu_pre = get_double("mu_pre");
    d.mu_post = get_double("mu_post");
  }

  const json::Array ends = json::array_member(rel, "segment_ends");
  if (ends.size() != r.segments.size()) {
    throw ValidationError("release.segment_ends", 0, "does not match the record's segments");
  }
  std::size_t covered = 0;
  std::size_t i = 0;
  for (json::Element v : ends) {
    covered += r.segments[i].size();
    std::uint64_t end;
    if (v.get_uint64().get(end) || end != covered) {
      throw ValidationError("release.segment_ends", i, "does not match the record's segments");
    }
    ++i;
  }
  if (d.accepted && (d.release_segment < 1 || d.release_segment >= r.segments.size())) {
    throw ValidationError("release.release_segment", d.release_segment, "out of range for the record's segments");
  }

  const json::Array mask = json::array_member(rel, "prefix_mask");
  if (mask.size() != record.response_length()) {
    throw ValidationError("release.prefix_mask", mask.size(), "length mismatch");
  }
  r.result.prefix_mask.reserve(mask.size());
  for (json::Element v : mask) {
    const double q = json::as_number(v, "release.prefix_mask", r.result.prefix_mask.size());
    r.result.prefix_mask.push_back(q != 0.0 ? 1.0 : 0.0);
  }
  r.result.retained_tokens = count_retained(r.result.prefix_mask);
  return r;
}

}  // namespace detail

/// Random-release control over an existing `release` output: every record's
/// release point is replaced by a permuted one and its advantages rescaled.
/// Only `segments_source`, `rescale_eps` and the seed matter here.
inline BatchReport permute_release_output(std::istream& in, std::ostream& out, std::uint64_t seed,
                                          const PipelineConfig& config, const BatchOptions& options = {}) {
  validate(config);
  const std::size_t jobs = options.jobs == 0 ? default_jobs() : options.jobs;
  const bool builtin = config.segments_source == SegmentsSource::builtin;

  std::vector<std::string> lines;
  std::vector<std::size_t> line_numbers;
  std::string buffer;
  for (std::size_t line_no = 1; std::getline(in, buffer); ++line_no) {
    if (detail::is_blank(buffer)) continue;
    lines.push_back(std::move(buffer));
    line_numbers.push_back(line_no);
  }

  struct Loaded {
    std::optional<RolloutRelease> release;
    std::vector<double> loss_mask;
    std::string rebuilt_body;
    std::optional<RecordError> error;
  };
  std::vector<Loaded> loaded(lines.size());
  parallel_for(lines.size(), jobs, [&](std::size_t i) {
    std::optional<json::Element> root;
    try {
      root = json::thread_reader().parse(lines[i]);
      RolloutRecord record = json::record_from_element(*root, options.parse);
      loaded[i].release = detail::release_from_output(*root, record, builtin);
      loaded[i].loss_mask = std::move(record.loss_mask);
      loaded[i].rebuilt_body = detail::body_without_release(*root);
    } catch (const Error& e) {
      loaded[i].error = RecordError{line_numbers[i], root ? detail::rollout_id_of(*root) : std::string(), e.what()};
    }
  });

  BatchReport report(config.num_bins);
  std::vector<RolloutRelease> batch;
  std::vector<std::vector<double>> loss_masks;
  std::vector<std::size_t> source_line;
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    ++report.records;
    if (loaded[i].error) {
      ++report.errors;
      if (options.on_error) options.on_error(*loaded[i].error);
      if (options.strict) throw BatchAborted(*loaded[i].error);
      report.error_log.push_back(std::move(*loaded[i].error));
      continue;
    }
    ++report.ok;
    if (loaded[i].release->result.decision.accepted) ++report.accepted;
    batch.push_back(std::move(*loaded[i].release));
    loss_masks.push_back(std::move(loaded[i].loss_mask));
    source_line.push_back(i);
  }
  if (batch.empty()) return report;

  std::vector<std::span<const double>> mask_views(loss_masks.begin(), loss_masks.end());
  apply_random_release(batch, mask_views, seed, config.rescale_eps);
  std::vector<std::string> rendered(batch.size());
  const Strategy strategy = RandomRelease{seed};
  parallel_for(batch.size(), jobs, [&](std::size_t i) { rendered[i] = detail::render_release(batch[i], strategy); });
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t src = source_line[i];
    detail::write_with_release(out, lines[src], loaded[src].rebuilt_body, rendered[i]);
  }
  out.flush();
  return report;
}

}  // namespace teachcut
