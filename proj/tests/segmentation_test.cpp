#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "teachcut/segmentation.hpp"

namespace teachcut {
namespace {

std::vector<SegmentIndex::Segment> lists(const SegmentIndex& s) { return s.segments(); }

TEST(SegmentTokens, SingleToken) {
  const std::vector<std::string> t{"Hello"};
  EXPECT_EQ(lists(segment_tokens(t)), (std::vector<SegmentIndex::Segment>{{0}}));
}

TEST(SegmentTokens, TwoSentences) {
  const std::vector<std::string> t{"Let", " x", ".", " Then", " y", "!"};
  EXPECT_EQ(lists(segment_tokens(t)), (std::vector<SegmentIndex::Segment>{{0, 1, 2}, {3, 4, 5}}));
}

TEST(SegmentTokens, ClosingBracketStrippedBeforeCheck) {
  const std::vector<std::string> t{"a.)", " b"};
  EXPECT_EQ(lists(segment_tokens(t)), (std::vector<SegmentIndex::Segment>{{0}, {1}}));
}

TEST(SegmentTokens, BoundaryRules) {
  EXPECT_TRUE(closes_segment("end.\"')]}"));
  EXPECT_TRUE(closes_segment("why?"));
  EXPECT_TRUE(closes_segment(";"));
  EXPECT_TRUE(closes_segment("so:"));
  EXPECT_TRUE(closes_segment("a\n\nb"));
  EXPECT_FALSE(closes_segment("a\nb"));
  EXPECT_FALSE(closes_segment(". "));  // trailing whitespace is not stripped
  EXPECT_FALSE(closes_segment(")"));
  EXPECT_FALSE(closes_segment(""));
  EXPECT_FALSE(closes_segment("3,"));
}

TEST(SegmentTokens, EmptyInputRejected) {
  const std::vector<std::string> none;
  EXPECT_THROW(segment_tokens(none), ConfigError);
}

TEST(SegmentTokens, CoversEveryTokenOnceInOrder) {
  std::mt19937_64 rng(3);
  const std::vector<std::string> vocab{" a", ".", "!\"", " b)", "\n\n", "?", ":", " c", "", "x;"};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::string> tokens(1 + rng() % 60);
    for (auto& s : tokens) s = vocab[rng() % vocab.size()];
    const SegmentIndex seg = segment_tokens(tokens);
    std::size_t next = 0;
    for (const auto& b : seg.segments()) {
      ASSERT_FALSE(b.empty());
      for (std::size_t t : b) ASSERT_EQ(t, next++);
      // Only the last token of a segment may close it (except the final segment).
      for (std::size_t j = 0; j + 1 < b.size(); ++j) ASSERT_FALSE(closes_segment(tokens[b[j]]));
    }
    ASSERT_EQ(next, tokens.size());
    EXPECT_EQ(seg, segment_tokens(tokens));
  }
}

TEST(AggregateSegmentScores, HandExamples) {
  const std::vector<double> zeros{0, 0, 0};
  EXPECT_EQ(aggregate_segment_scores(zeros, SegmentIndex::from_lists({{0, 1, 2}})).scores,
            (std::vector<double>{0.0}));

  const std::vector<double> m{1.0, 1.0, 2.0};
  const SegmentScores s = aggregate_segment_scores(m, SegmentIndex::from_lists({{0, 1, 2}}));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s.scores[0], std::log(7.0 / 3.0), 1e-15);
  EXPECT_NEAR(s.scores[0], 0.8473, 1e-4);

  const std::vector<double> m2{2.0, 0.0};
  const SegmentScores s2 = aggregate_segment_scores(m2, SegmentIndex::from_lists({{0}, {1}}));
  EXPECT_NEAR(s2.scores[0], 1.0986, 1e-4);
  EXPECT_EQ(s2.scores[1], 0.0);
}

TEST(AggregateSegmentScores, EmptySegmentsSkipped) {
  const std::vector<double> m{1.0, 3.0};
  const SegmentScores s = aggregate_segment_scores(m, SegmentIndex::from_lists({{}, {0}, {}, {1}}));
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.segment_index.size(), 2u);
}

TEST(AggregateSegmentScores, OutOfRangeIndexNamesSegment) {
  const std::vector<double> m{1.0, 3.0};
  try {
    aggregate_segment_scores(m, SegmentIndex::from_lists({{0}, {1, 5}}));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.position(), 1u);
    EXPECT_NE(std::string(e.what()).find("token index 5"), std::string::npos);
  }
}

TEST(AggregateSegmentScores, ConstantSegmentEqualsLog1p) {
  for (double v : {0.0, 0.5, 1.0, 2.0, 8.0, 1e-9}) {
    const std::vector<double> m(4, v);
    EXPECT_EQ(aggregate_segment_scores(m, SegmentIndex::from_lists({{0, 1, 2, 3}})).scores[0], std::log1p(v));
  }
}

TEST(AggregateSegmentScores, StrictlyIncreasingInMargins) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> m(1 + rng() % 10);
    for (double& v : m) v = u(rng);
    SegmentIndex::Segment all(m.size());
    for (std::size_t t = 0; t < m.size(); ++t) all[t] = t;
    const double before = aggregate_segment_scores(m, SegmentIndex::from_lists({all})).scores[0];
    const double bump = 0.01 + u(rng);
    for (double& v : m) v += bump;
    const double after = aggregate_segment_scores(m, SegmentIndex::from_lists({all})).scores[0];
    EXPECT_GT(after, before);
    EXPECT_GE(before, 0.0);
  }
}

}  // namespace
}  // namespace teachcut
