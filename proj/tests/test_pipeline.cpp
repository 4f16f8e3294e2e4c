#include <gtest/gtest.h>

#include "covidfact/pipeline.hpp"

using namespace covidfact;

namespace {

// Stub scorers read markers planted in the first pixels of each slice:
//   pixel 0 > 0.5  -> stage one says infected (0.9, 0.1), else (0.1, 0.9)
//   pixel 1 = p    -> stage two says (p, 1 - p)
Tensor stub_stage1(const Tensor& batch) {
  const std::size_t N = batch.dim(0), hw = batch.dim(2) * batch.dim(3);
  Tensor out({N, 2});
  for (std::size_t n = 0; n < N; ++n) {
    const bool inf = batch[n * hw] > 0.5;
    out[n * 2 + kPositiveClass] = inf ? 0.9 : 0.1;
    out[n * 2 + kNegativeClass] = inf ? 0.1 : 0.9;
  }
  return out;
}

Tensor stub_stage2(const Tensor& batch) {
  const std::size_t N = batch.dim(0), hw = batch.dim(2) * batch.dim(3);
  Tensor out({N, 2});
  for (std::size_t n = 0; n < N; ++n) {
    out[n * 2 + kPositiveClass] = batch[n * hw + 1];
    out[n * 2 + kNegativeClass] = 1.0 - batch[n * hw + 1];
  }
  return out;
}

SliceRecord marked_slice(bool infected, double p_covid, std::size_t index) {
  SliceRecord s;
  s.pixels = Tensor({4, 4}, 0.25);
  s.pixels[0] = infected ? 1.0 : 0.0;
  s.pixels[1] = p_covid;
  s.source_index = index;
  return s;
}

Volume marked_volume(const std::vector<std::pair<bool, double>>& slices) {
  Volume v;
  v.patient_id = "P";
  for (std::size_t k = 0; k < slices.size(); ++k) v.slices.push_back(marked_slice(slices[k].first, slices[k].second, k));
  v.original_slice_count = slices.size();
  return v;
}

Volume with_selected(std::size_t total, std::size_t selected, double p = 0.9) {
  std::vector<std::pair<bool, double>> s(total, {false, 0.0});
  for (std::size_t k = 0; k < selected; ++k) s[k] = {true, p};
  return marked_volume(s);
}

PipelineConfig small_cfg() {
  PipelineConfig c;
  c.input_h = c.input_w = 4;
  return c;
}

}  // namespace

TEST(Preprocess, ConstantSliceBecomesZeros) {
  Volume raw;
  raw.patient_id = "C";
  SliceRecord s;
  s.pixels = Tensor({8, 8}, 0.7);
  s.lung_mask = Tensor({8, 8}, 1.0);
  raw.slices.push_back(s);
  const Volume v = preprocess(raw, 4, 4);
  ASSERT_EQ(v.slices.size(), 1u);
  EXPECT_EQ(v.slices[0].pixels, Tensor({4, 4}, 0.0));
}

TEST(Preprocess, EmptyMaskSlicesAreDropped) {
  Volume raw;
  raw.patient_id = "D";
  for (std::size_t k = 0; k < 3; ++k) {
    SliceRecord s;
    s.pixels = Tensor({4, 4}, static_cast<double>(k));
    s.pixels[5] = 9.0;
    s.lung_mask = Tensor({4, 4}, k == 1 ? 0.0 : 1.0);
    s.source_index = 10 + k;
    raw.slices.push_back(s);
  }
  const Volume v = preprocess(raw, 4, 4);
  ASSERT_EQ(v.slices.size(), 2u);
  EXPECT_EQ(v.slices[0].source_index, 10u);
  EXPECT_EQ(v.slices[1].source_index, 12u);
  EXPECT_EQ(v.original_slice_count, 3u);

  for (auto& s : raw.slices) s.lung_mask = Tensor({4, 4}, 0.0);
  EXPECT_THROW(preprocess(raw, 4, 4), DataError);
}

TEST(Preprocess, BackgroundIsZeroedBeforeNormalising) {
  Volume raw;
  SliceRecord s;
  s.pixels = Tensor({2, 2}, {100, 2, 4, 6});
  s.lung_mask = Tensor({2, 2}, {0, 1, 1, 1});
  raw.slices.push_back(s);
  const Volume v = preprocess(raw, 2, 2);
  // masked [0,2,4,6] -> /6
  const Tensor expect({2, 2}, {0, 2.0 / 6, 4.0 / 6, 1});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(v.slices[0].pixels[i], expect[i], 1e-15);
}

TEST(Preprocess, CheckerboardHalvesToGrey) {
  Tensor board({512, 512});
  for (std::size_t y = 0; y < 512; ++y)
    for (std::size_t x = 0; x < 512; ++x) board[y * 512 + x] = (x + y) % 2 ? 1.0 : 0.0;
  const Tensor out = area_resample(board, 256, 256);
  for (double v : out.data()) ASSERT_NEAR(v, 0.5, 1e-12);
}

TEST(Preprocess, AreaResampleFractionalOverlap) {
  const Tensor row({1, 3}, {3, 6, 9});
  const Tensor out = area_resample(row, 1, 2);
  // each output covers 1.5 input pixels
  EXPECT_NEAR(out[0], (3 + 0.5 * 6) / 1.5, 1e-12);
  EXPECT_NEAR(out[1], (0.5 * 6 + 9) / 1.5, 1e-12);
  const Tensor img = Rng(3).uniform_tensor({6, 10}, 0, 1);
  EXPECT_EQ(area_resample(img, 6, 10), img);
  double a = 0, b = 0;
  const Tensor down = area_resample(img, 3, 4);
  for (double v : img.data()) a += v;
  for (double v : down.data()) b += v;
  EXPECT_NEAR(a / 60, b / 12, 1e-12);
}

TEST(Preprocess, FallbackMaskKeepsEnclosedDarkRegion) {
  // bright ring on a dark border, dark hole inside the ring
  Tensor img({7, 7}, 0.0);
  for (std::size_t y = 1; y < 6; ++y)
    for (std::size_t x = 1; x < 6; ++x) img[y * 7 + x] = 1.0;
  img[3 * 7 + 3] = 0.1;
  const Tensor m = fallback_lung_mask(img);
  double total = 0;
  for (double v : m.data()) total += v;
  EXPECT_EQ(total, 1.0);
  EXPECT_EQ(m[3 * 7 + 3], 1.0);
}

TEST(Rules, ThreePercentRule) {
  EXPECT_TRUE(three_percent_rule(0.02));
  EXPECT_FALSE(three_percent_rule(0.03));
  EXPECT_FALSE(three_percent_rule(0.07));
  EXPECT_TRUE(three_percent_rule(0.0));
}

TEST(Rules, VoteIsMean) {
  const std::vector<double> p{0.6, 0.8, 1.0};
  EXPECT_NEAR(vote(p), 0.8, 1e-15);
  const std::vector<double> same(7, 0.3);
  EXPECT_EQ(vote(same), 0.3);
  EXPECT_THROW(vote(std::vector<double>{}), Error);
}

TEST(Rules, CutoffIsStrict) {
  EXPECT_EQ(apply_cutoff(0.51), Decision::covid);
  EXPECT_EQ(apply_cutoff(0.5), Decision::non_covid);
  EXPECT_EQ(apply_cutoff(0.75, 0.75), Decision::non_covid);
  EXPECT_EQ(apply_cutoff(0.7500001, 0.75), Decision::covid);
}

TEST(Rules, ClassProbability) {
  EXPECT_EQ(class_probability(0.6, 0.2, ProbabilityMode::raw), 0.6);
  EXPECT_NEAR(class_probability(0.6, 0.2, ProbabilityMode::normalized), 0.75, 1e-15);
  EXPECT_EQ(class_probability(0.0, 0.0, ProbabilityMode::normalized), 0.5);
}

TEST(Stage1, SelectsByArgmax) {
  const Volume v = marked_volume({{true, 0}, {false, 0}, {true, 0}, {false, 0}});
  const auto r = stage1_filter(v, stub_stage1, small_cfg());
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(r.p_infected, (std::vector<double>{0.9, 0.1, 0.9, 0.1}));
  EXPECT_EQ(r.infected_fraction, 0.5);
}

TEST(Stage1, ThresholdSelection) {
  PipelineConfig c = small_cfg();
  c.selection = SelectionMode::threshold;
  c.selection_threshold = 0.95;
  const Volume v = marked_volume({{true, 0}, {false, 0}});
  EXPECT_TRUE(stage1_filter(v, stub_stage1, c).selected.empty());
  c.selection_threshold = 0.05;
  EXPECT_EQ(stage1_filter(v, stub_stage1, c).selected.size(), 2u);
}

TEST(Stage1, BatchingDoesNotChangeScores) {
  const Volume v = with_selected(7, 3);
  const Tensor a = score_volume(v, stub_stage1, 64), b = score_volume(v, stub_stage1, 3);
  EXPECT_EQ(a, b);
  EXPECT_THROW(score_volume(Volume{}, stub_stage1), DataError);
}

TEST(Patient, RuleAtTwoThreeSevenPercent) {
  const auto cfg = small_cfg();
  const auto two = classify_volume(with_selected(100, 2), stub_stage1, stub_stage2, cfg);
  EXPECT_EQ(two.decision, Decision::non_covid);
  EXPECT_EQ(two.decision_rule, DecisionRule::three_percent_rule);
  EXPECT_EQ(two.patient_prob, 0.0);
  for (const auto& s : two.slice_probs) EXPECT_FALSE(s.p_covid.has_value());

  const auto three = classify_volume(with_selected(100, 3), stub_stage1, stub_stage2, cfg);
  EXPECT_EQ(three.decision_rule, DecisionRule::vote);
  EXPECT_EQ(three.decision, Decision::covid);
  EXPECT_NEAR(three.patient_prob, 0.9, 1e-15);

  const auto seven = classify_volume(with_selected(100, 7, 0.4), stub_stage1, stub_stage2, cfg);
  EXPECT_EQ(seven.decision_rule, DecisionRule::vote);
  EXPECT_EQ(seven.decision, Decision::non_covid);
  EXPECT_EQ(seven.slices_selected, 7u);
  EXPECT_EQ(seven.slices_examined, 100u);
}

TEST(Patient, VoteOverSelectedSlicesOnly) {
  // unselected slices carry stage-two markers that must be ignored
  const Volume v = marked_volume({{true, 0.6}, {false, 0.0}, {true, 0.8}, {false, 1.0}, {true, 1.0}});
  const auto r = classify_volume(v, stub_stage1, stub_stage2, small_cfg());
  EXPECT_NEAR(r.patient_prob, 0.8, 1e-15);
  EXPECT_EQ(r.decision, Decision::covid);
  EXPECT_FALSE(r.slice_probs[1].p_covid.has_value());
  EXPECT_EQ(*r.slice_probs[2].p_covid, 0.8);
  EXPECT_TRUE(r.consistent());
}

TEST(Patient, CutoffBoundary) {
  PipelineConfig c = small_cfg();
  const Volume v = marked_volume({{true, 0.5}, {true, 0.5}});
  EXPECT_EQ(classify_volume(v, stub_stage1, stub_stage2, c).decision, Decision::non_covid);
  const Volume w = marked_volume({{true, 0.51}, {true, 0.51}});
  EXPECT_EQ(classify_volume(w, stub_stage1, stub_stage2, c).decision, Decision::covid);
  c.cutoff = 0.75;
  const auto r = classify_volume(w, stub_stage1, stub_stage2, c);
  EXPECT_EQ(r.decision, Decision::non_covid);
  EXPECT_EQ(r.cutoff_used, 0.75);
}

TEST(Patient, RemovingUnselectedSliceKeepsVote) {
  Volume v = marked_volume({{true, 0.3}, {false, 0.9}, {true, 0.7}, {false, 0.2}, {true, 0.95}});
  const auto before = classify_volume(v, stub_stage1, stub_stage2, small_cfg());
  v.slices.erase(v.slices.begin() + 3);
  const auto after = classify_volume(v, stub_stage1, stub_stage2, small_cfg());
  EXPECT_EQ(before.patient_prob, after.patient_prob);
  EXPECT_EQ(before.decision, after.decision);
}

TEST(Patient, FractionDenominator) {
  PipelineConfig c = small_cfg();
  Volume v = with_selected(100, 4);
  v.original_slice_count = 200;
  c.fraction_denominator = FractionDenominator::surviving;
  const auto s = classify_volume(v, stub_stage1, stub_stage2, c);
  EXPECT_EQ(s.infected_fraction, 0.04);
  EXPECT_EQ(s.decision_rule, DecisionRule::vote);
  c.fraction_denominator = FractionDenominator::all;
  const auto a = classify_volume(v, stub_stage1, stub_stage2, c);
  EXPECT_EQ(a.infected_fraction, 0.02);
  EXPECT_EQ(a.decision_rule, DecisionRule::three_percent_rule);
}

TEST(Patient, NormalizedProbabilities) {
  PipelineConfig c = small_cfg();
  c.probability_mode = ProbabilityMode::normalized;
  auto s1 = [](const Tensor& b) {
    Tensor t = stub_stage1(b);
    for (auto& x : t.data()) x *= 0.5;  // (0.45, 0.05) -> 0.9
    return t;
  };
  const auto r = classify_volume(marked_volume({{true, 0.3}, {false, 0}}), s1, stub_stage2, c);
  EXPECT_NEAR(r.slice_probs[0].p_infected, 0.9, 1e-15);
  EXPECT_NEAR(r.slice_probs[1].p_infected, 0.1, 1e-15);
  EXPECT_NEAR(r.patient_prob, 0.3, 1e-15);
}

TEST(Patient, ConsistencyFuzz) {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<std::pair<bool, double>> s(n);
    const double rate = rng.uniform() * 0.2;
    for (auto& e : s) e = {rng.uniform() < rate, rng.uniform()};
    PipelineConfig c = small_cfg();
    c.cutoff = rng.uniform(0.3, 0.8);
    const auto r = classify_volume(marked_volume(s), stub_stage1, stub_stage2, c);
    ASSERT_TRUE(r.consistent()) << "trial " << trial;
    ASSERT_EQ(r.decision_rule == DecisionRule::three_percent_rule, r.infected_fraction < 0.03);
  }
}

TEST(Patient, ZeroThresholdWithNothingSelected) {
  PipelineConfig c = small_cfg();
  c.threshold = 0.0;
  const auto r = classify_volume(with_selected(10, 0), stub_stage1, stub_stage2, c);
  EXPECT_EQ(r.decision, Decision::non_covid);
  EXPECT_EQ(r.decision_rule, DecisionRule::three_percent_rule);
  EXPECT_TRUE(r.consistent());
  const auto one = classify_volume(with_selected(1000, 1), stub_stage1, stub_stage2, c);
  EXPECT_EQ(one.decision_rule, DecisionRule::vote);
}

TEST(Patient, ConsistentRejectsBrokenVerdicts) {
  PatientVerdict v;
  v.decision_rule = DecisionRule::vote;
  v.infected_fraction = 0.5;
  v.patient_prob = 0.9;
  v.decision = Decision::non_covid;
  EXPECT_FALSE(v.consistent());
  v.decision = Decision::covid;
  EXPECT_TRUE(v.consistent());
  v.decision_rule = DecisionRule::three_percent_rule;
  EXPECT_FALSE(v.consistent());
}

TEST(Patient, PredictFromRawVolume) {
  Volume raw;
  raw.patient_id = "R";
  raw.label = Label::covid;
  for (std::size_t k = 0; k < 4; ++k) {
    SliceRecord s;
    s.pixels = Tensor({8, 8}, 0.0);
    // top-left 2x2 block of 1s survives the 8->4 resample as a 1 at pixel 0
    if (k % 2 == 0) s.pixels[0] = s.pixels[1] = s.pixels[8] = s.pixels[9] = 1.0;
    s.pixels[63] = 0.5;
    s.lung_mask = Tensor({8, 8}, 1.0);
    s.source_index = k;
    raw.slices.push_back(s);
  }
  const auto r = predict_patient(raw, stub_stage1, stub_stage2, small_cfg());
  EXPECT_EQ(r.slices_selected, 2u);
  EXPECT_EQ(r.slices_examined, 4u);
  // pixel 1 of the resampled slice is 0 -> p_covid 0
  EXPECT_EQ(r.patient_prob, 0.0);
  EXPECT_EQ(r.decision, Decision::non_covid);
}

TEST(Patient, JsonRecord) {
  const auto r = classify_volume(marked_volume({{true, 0.7}, {false, 0}}), stub_stage1, stub_stage2, small_cfg());
  const auto j = to_json(r);
  EXPECT_EQ(j["patient_id"], "P");
  EXPECT_EQ(j["decision"], "COVID");
  EXPECT_EQ(j["decision_rule"], "vote");
  EXPECT_TRUE(j["slice_probs"][1]["p_covid"].is_null());
  EXPECT_EQ(j["slice_probs"][0]["p_covid"], 0.7);
  EXPECT_EQ(j["slices_selected"], 1);
}

TEST(Patient, RealModelsEndToEnd) {
  NetworkSpec s;
  s.input_h = s.input_w = 8;
  s.conv_channels = {2, 2, 2, 2};
  s.primary_caps = {1, 2};
  s.hidden_caps = {{2, 2}, {2, 2}};
  s.class_caps = {2, 2};
  ModelBundle m1 = build_stage1(s);
  s.hidden_caps.clear();
  ModelBundle m2 = build_stage2(s);
  PipelineConfig c;
  c.input_h = c.input_w = 8;
  c.threshold = 0.0;  // never short-circuit
  Volume raw;
  raw.patient_id = "M";
  Rng rng(12);
  for (std::size_t k = 0; k < 5; ++k) raw.slices.push_back({rng.uniform_tensor({16, 16}, 0, 1), Tensor({16, 16}, 1.0), {}, k});
  const auto a = predict_patient(raw, m1, m2, c);
  const auto b = predict_patient(raw, m1, m2, c);
  EXPECT_TRUE(a.consistent());
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}
