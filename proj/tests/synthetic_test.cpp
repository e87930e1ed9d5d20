#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "teachcut/changepoint.hpp"
#include "teachcut/json_io.hpp"
#include "teachcut/margin.hpp"
#include "teachcut/oracle.hpp"
#include "teachcut/segmentation.hpp"
#include "teachcut/synthetic.hpp"

namespace teachcut {
namespace {

SyntheticConfig planted(std::size_t n, std::size_t tau, double pre, double post, double noise, std::uint64_t seed = 0) {
  SyntheticConfig c;
  c.num_segments = n;
  c.true_tau = tau;
  c.pre_margin_mean = pre;
  c.post_margin_mean = post;
  c.noise_std = noise;
  c.seed = seed;
  return c;
}

TEST(GeneratePiecewiseRollout, ZeroNoiseSegmentMarginsAreExact) {
  const SyntheticRollout sim = generate_piecewise_rollout(planted(6, 3, 2.0, 0.0, 0.0));
  const MarginSeries m = teacher_top2_margin(sim.record, 4);
  const SegmentIndex segs = segments_for(sim.record);
  ASSERT_EQ(segs.size(), 6u);
  const std::vector<double> expected{2, 2, 2, 0, 0, 0};
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (std::size_t t : segs[i]) sum += m.values[t];
    EXPECT_NEAR(sum / static_cast<double>(segs[i].size()), expected[i], 1e-12);
  }
  EXPECT_EQ(sim.truth.true_tau, 3u);
  EXPECT_EQ(sim.record.rollout_id, "sim-0");
}

TEST(GeneratePiecewiseRollout, RecordIsValidAndMatchesBuiltinSegmenter) {
  for (std::uint64_t i = 0; i < 20; ++i) {
    const SyntheticRollout sim = generate_piecewise_rollout(planted(5, 2, 1.0, 0.2, 0.3, 9), i);
    EXPECT_NO_THROW(validate(sim.record));
    EXPECT_EQ(segments_for(sim.record, true), segments_for(sim.record, false));
    EXPECT_EQ(parse_rollout_record(serialize_rollout_record(sim.record)), sim.record);
  }
}

TEST(GeneratePiecewiseRollout, Deterministic) {
  const SyntheticConfig c = planted(8, 4, 1.0, 0.2, 0.1, 17);
  EXPECT_EQ(generate_piecewise_rollout(c, 3).record, generate_piecewise_rollout(c, 3).record);
  EXPECT_NE(generate_piecewise_rollout(c, 3).record.loss_mask.size(), 0u);
  EXPECT_NE(generate_piecewise_rollout(c, 3).record.candidates, generate_piecewise_rollout(c, 4).record.candidates);
}

TEST(GeneratePiecewiseRollout, MarginsReconstructPlantedValues) {
  const SyntheticRollout sim = generate_piecewise_rollout(planted(10, 5, 1.0, 0.2, 0.5, 4), 2);
  const MarginSeries m = teacher_top2_margin(sim.record, 4);
  ASSERT_EQ(m.size(), sim.truth.planted_margins.size());
  for (std::size_t t = 0; t < m.size(); ++t) EXPECT_NEAR(m.values[t], sim.truth.planted_margins[t], 1e-9);
}

TEST(GeneratePiecewiseRollout, NoChangeMeansMatchConfiguredMean) {
  SyntheticConfig c;
  c.num_segments = 4;
  c.tokens_per_segment = 50;
  c.pre_margin_mean = 1.0;
  c.noise_std = 0.2;
  c.seed = 5;
  const std::size_t rollouts = 200;
  std::vector<double> sums(c.num_segments, 0.0);
  for (std::size_t r = 0; r < rollouts; ++r) {
    const SyntheticRollout sim = generate_piecewise_rollout(c, r);
    EXPECT_FALSE(sim.truth.true_tau);
    const MarginSeries m = teacher_top2_margin(sim.record, 4);
    for (std::size_t t = 0; t < m.size(); ++t) sums[t / c.tokens_per_segment] += m.values[t];
  }
  const double count = static_cast<double>(rollouts * c.tokens_per_segment);
  for (double s : sums) EXPECT_NEAR(s / count, 1.0, 3.0 * c.noise_std / std::sqrt(count));
}

TEST(GeneratePiecewiseRollout, InvalidConfig) {
  SyntheticConfig c;
  c.num_segments = 0;
  EXPECT_THROW(generate_piecewise_rollout(c), ConfigError);
  c = planted(6, 6, 2, 0, 0);
  EXPECT_THROW(generate_piecewise_rollout(c), ConfigError);
  c = planted(6, 0, 2, 0, 0);
  EXPECT_THROW(generate_piecewise_rollout(c), ConfigError);
  c = planted(6, 3, 2, 0, -1);
  EXPECT_THROW(generate_piecewise_rollout(c), ConfigError);
  c = planted(6, 3, 2, 0, 0);
  c.support_size = 1;
  EXPECT_THROW(generate_piecewise_rollout(c), ConfigError);
}

TEST(GeneratePiecewiseRollout, SegmentMeanProfile) {
  SyntheticConfig c;
  c.num_segments = 3;
  c.tokens_per_segment = 2;
  c.segment_means = {1.0, 0.5, 0.25};
  const SyntheticRollout sim = generate_piecewise_rollout(c);
  EXPECT_EQ(sim.truth.planted_margins, (std::vector<double>{1.0, 1.0, 0.5, 0.5, 0.25, 0.25}));
  c.segment_means = {1.0};
  EXPECT_THROW(generate_piecewise_rollout(c), ConfigError);
  c.segment_means = {1.0, 0.5, 0.25};
  c.true_tau = 1;
  EXPECT_THROW(generate_piecewise_rollout(c), ConfigError);
}

TEST(OracleChangePoint, Examples) {
  const std::vector<double> step{2, 2, 2, 0, 0, 0};
  const oracle::OracleDecision d = oracle::oracle_change_point(step);
  EXPECT_EQ(d.release_segment, 3u);
  EXPECT_TRUE(d.accepted);
  EXPECT_NEAR(d.bic_gain, 172.95, 1e-2);

  const std::vector<double> constant(5, 0.4);
  const oracle::OracleDecision c = oracle::oracle_change_point(constant);
  EXPECT_EQ(c.release_segment, 5u);
  EXPECT_FALSE(c.accepted);
  EXPECT_EQ(c.bic_gain, 0.0);

  const std::vector<double> one{1.0};
  const oracle::OracleDecision o = oracle::oracle_change_point(one);
  EXPECT_EQ(o.release_segment, 1u);
  EXPECT_FALSE(o.accepted);
}

TEST(EndToEnd, ZeroNoiseRecoversPlantedSplit) {
  for (std::size_t n = 2; n <= 12; ++n) {
    for (std::size_t tau = 1; tau < n; ++tau) {
      const SyntheticRollout sim = generate_piecewise_rollout(planted(n, tau, 1.3, 0.4, 0.0, n * 31 + tau));
      const SegmentScores s = aggregate_segment_scores(teacher_top2_margin(sim.record, 4), segments_for(sim.record));
      const ChangeDecision d = detect_downward_change(s);
      EXPECT_TRUE(d.accepted);
      EXPECT_EQ(d.release_segment, tau) << "n=" << n;
    }
  }
}

}  // namespace
}  // namespace teachcut
