#pragma once

// JSONL (de)serialization of rollout records.
//
//   {"rollout_id": str, "tokens": [str], "teacher_logp": [f64], "student_logp": [f64],
//    "loss_mask": [f64], "topk": {"ids": [[int]], "student_logp": [[f64]],
//    "teacher_logp": [[f64]]}, "segments": [[int]]?}
//
// `topk` and `segments` are optional. Unknown members are ignored.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wclass-memaccess"
#endif
#include <rapidjson/document.h>
#include <rapidjson/stringbuffer.h>
#include <rapidjson/writer.h>
#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic pop
#endif

#include <simdjson.h>

#include "teachcut/errors.hpp"
#include "teachcut/rollout.hpp"

namespace teachcut {

/// Floor applied to probabilities before taking logs when ingesting `--probs` input.
inline constexpr double kProbabilityFloor = 1e-12;

struct ParseOptions {
  /// Interpret `topk.student_logp` / `topk.teacher_logp` as probabilities.
  bool topk_as_probabilities = false;
};

namespace json {

using Element = simdjson::dom::element;
using Object = simdjson::dom::object;
using Array = simdjson::dom::array;

/// Byte offset of the first syntax error in `text`, as located by rapidjson.
inline std::size_t locate_syntax_error(std::string_view text) {
  rapidjson::Document doc;
  doc.Parse(text.data(), text.size());
  return doc.HasParseError() ? doc.GetErrorOffset() : 0;
}

/// Reusable JSON reader. The returned root stays valid until the next parse
/// on the same reader. Not thread-safe; use one per thread.
class LineReader {
 public:
  Element parse(std::string_view text) {
    buffer_.resize(text.size() + simdjson::SIMDJSON_PADDING);
    std::copy(text.begin(), text.end(), buffer_.begin());
    return parse_padded({buffer_.data(), text.size()});
  }

  /// Parses without copying; `text` must be followed by SIMDJSON_PADDING
  /// readable bytes.
  Element parse_padded(std::string_view text) {
    Element root;
    if (auto err = parser_.parse(text.data(), text.size(), false).get(root)) {
      throw ParseError(simdjson::error_message(err), locate_syntax_error(text));
    }
    if (!root.is_object()) throw ParseError("rollout record must be a JSON object", 0);
    return root;
  }

 private:
  simdjson::dom::parser parser_;
  std::vector<char> buffer_;
};

inline LineReader& thread_reader() {
  thread_local LineReader reader;
  return reader;
}

inline std::optional<Element> find(Object obj, const char* name) {
  Element v;
  if (obj.at_key(name).get(v)) return std::nullopt;
  return v;
}

inline Element member(Object obj, const char* name) {
  auto v = find(obj, name);
  if (!v) throw ValidationError(name, 0, "missing required field");
  return *v;
}

inline Array as_array(Element v, const char* field, std::size_t position) {
  Array arr;
  if (v.get_array().get(arr)) throw ValidationError(field, position, "expected an array");
  return arr;
}

inline Array array_member(Object obj, const char* name) { return as_array(member(obj, name), name, 0); }

inline double as_number(Element v, const char* field, std::size_t position) {
  double d;
  if (v.get_double().get(d)) throw ValidationError(field, position, "expected a number");
  return d;
}

inline void read_numbers(Array arr, const char* field, std::vector<double>& out) {
  out.clear();
  out.reserve(arr.size());
  for (Element v : arr) out.push_back(as_number(v, field, out.size()));
}

inline double prob_to_logp(double p, const char* field, std::size_t position) {
  if (!std::isfinite(p) || p < 0.0) throw ValidationError(field, position, "probability outside [0, 1]");
  return std::log(std::max(p, kProbabilityFloor));
}

inline void read_topk(Element topk_value, std::size_t expected_rows, bool probabilities, CandidateTable& table) {
  Object topk;
  if (topk_value.get_object().get(topk)) throw ValidationError("topk", 0, "expected an object");
  const Array ids = as_array(member(topk, "ids"), "topk.ids", 0);
  const Array student = as_array(member(topk, "student_logp"), "topk.student_logp", 0);
  const Array teacher = as_array(member(topk, "teacher_logp"), "topk.teacher_logp", 0);
  if (ids.size() != expected_rows) throw ValidationError("topk.ids", std::min(ids.size(), expected_rows), "length mismatch");
  if (student.size() != expected_rows) throw ValidationError("topk.student_logp", std::min(student.size(), expected_rows), "length mismatch");
  if (teacher.size() != expected_rows) throw ValidationError("topk.teacher_logp", std::min(teacher.size(), expected_rows), "length mismatch");

  table.reserve(expected_rows, expected_rows * 8);
  std::vector<std::int64_t> row_ids;
  std::vector<double> row_student;
  std::vector<double> row_teacher;
  auto id_it = ids.begin();
  auto s_it = student.begin();
  auto t_it = teacher.begin();
  for (std::size_t t = 0; t < expected_rows; ++t, ++id_it, ++s_it, ++t_it) {
    row_ids.clear();
    for (Element v : as_array(*id_it, "topk.ids", t)) {
      std::int64_t id;
      if (v.get_int64().get(id)) throw ValidationError("topk.ids", t, "expected an integer token id");
      row_ids.push_back(id);
    }
    read_numbers(as_array(*s_it, "topk.student_logp", t), "topk.student_logp", row_student);
    read_numbers(as_array(*t_it, "topk.teacher_logp", t), "topk.teacher_logp", row_teacher);
    if (probabilities) {
      for (double& p : row_student) p = prob_to_logp(p, "topk.student_logp", t);
      for (double& p : row_teacher) p = prob_to_logp(p, "topk.teacher_logp", t);
    }
    table.push_back(row_ids, row_student, row_teacher);
  }
}

inline SegmentIndex read_segments(Element value) {
  const Array segs = as_array(value, "segments", 0);
  std::vector<SegmentIndex::Segment> lists;
  lists.reserve(segs.size());
  for (Element seg_value : segs) {
    const std::size_t i = lists.size();
    SegmentIndex::Segment& seg = lists.emplace_back();
    for (Element v : as_array(seg_value, "segments", i)) {
      std::uint64_t idx;
      if (v.get_uint64().get(idx)) throw ValidationError("segments", i, "expected a non-negative token index");
      seg.push_back(static_cast<std::size_t>(idx));
    }
  }
  return SegmentIndex::from_lists(std::move(lists));
}

inline RolloutRecord record_from_element(Element root, const ParseOptions& options) {
  Object obj;
  if (root.get_object().get(obj)) throw ParseError("rollout record must be a JSON object", 0);
  RolloutRecord r;
  std::string_view id;
  if (member(obj, "rollout_id").get_string().get(id)) throw ValidationError("rollout_id", 0, "expected a string");
  r.rollout_id = id;

  const Array tokens = array_member(obj, "tokens");
  r.token_surfaces.reserve(tokens.size());
  for (Element v : tokens) {
    std::string_view s;
    if (v.get_string().get(s)) throw ValidationError("tokens", r.token_surfaces.size(), "expected a string");
    r.token_surfaces.emplace_back(s);
  }
  read_numbers(array_member(obj, "teacher_logp"), "teacher_logp", r.sampled_teacher_logp);
  read_numbers(array_member(obj, "student_logp"), "student_logp", r.sampled_student_logp);
  read_numbers(array_member(obj, "loss_mask"), "loss_mask", r.loss_mask);

  if (auto topk = find(obj, "topk"); topk && !topk->is_null()) {
    read_topk(*topk, r.token_surfaces.size(), options.topk_as_probabilities, r.candidates);
  }
  if (auto segs = find(obj, "segments"); segs && !segs->is_null()) r.segments = read_segments(*segs);
  validate(r);
  return r;
}

using Writer = rapidjson::Writer<rapidjson::StringBuffer>;

inline void write_doubles(Writer& w, std::span<const double> values) {
  w.StartArray();
  for (double v : values) w.Double(v);
  w.EndArray();
}

}  // namespace json

/// Parses one JSONL line. Throws ParseError (malformed text, with byte offset)
/// or ValidationError (invariant violation, with field and position).
inline RolloutRecord parse_rollout_record(std::string_view line, const ParseOptions& options = {}) {
  return json::record_from_element(json::thread_reader().parse(line), options);
}

/// Writes the record as a JSON object (no trailing newline). Doubles are written
/// with enough digits to round-trip exactly.
inline void write_rollout_record(json::Writer& w, const RolloutRecord& r) {
  w.StartObject();
  w.Key("rollout_id");
  w.String(r.rollout_id.data(), static_cast<rapidjson::SizeType>(r.rollout_id.size()));
  w.Key("tokens");
  w.StartArray();
  for (const std::string& s : r.token_surfaces) w.String(s.data(), static_cast<rapidjson::SizeType>(s.size()));
  w.EndArray();
  w.Key("teacher_logp");
  json::write_doubles(w, r.sampled_teacher_logp);
  w.Key("student_logp");
  json::write_doubles(w, r.sampled_student_logp);
  w.Key("loss_mask");
  json::write_doubles(w, r.loss_mask);
  if (r.has_candidates()) {
    w.Key("topk");
    w.StartObject();
    w.Key("ids");
    w.StartArray();
    for (std::size_t t = 0; t < r.candidates.size(); ++t) {
      w.StartArray();
      for (std::int64_t id : r.candidates[t].ids) w.Int64(id);
      w.EndArray();
    }
    w.EndArray();
    w.Key("student_logp");
    w.StartArray();
    for (std::size_t t = 0; t < r.candidates.size(); ++t) json::write_doubles(w, r.candidates[t].student_logp);
    w.EndArray();
    w.Key("teacher_logp");
    w.StartArray();
    for (std::size_t t = 0; t < r.candidates.size(); ++t) json::write_doubles(w, r.candidates[t].teacher_logp);
    w.EndArray();
    w.EndObject();
  }
  if (r.segments) {
    w.Key("segments");
    w.StartArray();
    for (const auto& seg : r.segments->segments()) {
      w.StartArray();
      for (std::size_t t : seg) w.Uint64(t);
      w.EndArray();
    }
    w.EndArray();
  }
  w.EndObject();
}

inline std::string serialize_rollout_record(const RolloutRecord& r) {
  rapidjson::StringBuffer buffer;
  json::Writer w(buffer);
  write_rollout_record(w, r);
  return {buffer.GetString(), buffer.GetSize()};
}

}  // namespace teachcut
