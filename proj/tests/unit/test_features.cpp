#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "common.hpp"
#include "feature_oracle.hpp"
#include "hypnodx/features.hpp"

using namespace testing_support;
namespace ft = hypnodx::features;
using namespace feature_oracle;

namespace {

Hypnodensity constant_hd(const StageProbs& p, std::size_t rows, double res = 15.0) {
  Hypnodensity hd;
  hd.resolution_s = res;
  hd.recording_id = "const";
  hd.probs.assign(rows, p);
  return hd;
}

}  // namespace

// ---------------------------------------------------------------------------
// Combinations and proto series

TEST(Combos, ThirtyOneDistinctInFixedOrder) {
  const auto& c = ft::all_combos();
  ASSERT_EQ(c.size(), 31u);
  std::set<ft::StageCombo> uniq(c.begin(), c.end());
  EXPECT_EQ(uniq.size(), 31u);
  EXPECT_EQ(ft::combo_name(c.front()), "W");
  EXPECT_EQ(ft::combo_name(c[5]), "W*N1");
  EXPECT_EQ(ft::combo_name(c.back()), "W*N1*N2*N3*REM");
  for (std::size_t i = 1; i < c.size(); ++i) EXPECT_LE(c[i - 1].size(), c[i].size());
}

TEST(ProtoSeries, UniformPairIsPointZeroFour) {
  const auto hd = constant_hd({0.2, 0.2, 0.2, 0.2, 0.2}, 50);
  for (double v : ft::proto_series(hd, {1, 3})) EXPECT_NEAR(v, 0.04, 1e-15);
}

TEST(ProtoSeries, SingletonIsTheStageSeries) {
  const auto hd = random_hypnodensity(300, 15.0, 3);
  const auto rem = ft::proto_series(hd, {4});
  for (std::size_t t = 0; t < hd.size(); ++t) EXPECT_EQ(rem[t], hd.probs[t][4]);
}

TEST(ProtoSeries, ZeroStageAnnihilates) {
  auto hd = random_hypnodensity(40, 15.0, 4);
  hd.probs[7] = {0.5, 0.0, 0.3, 0.2, 0.0};
  EXPECT_EQ(ft::proto_series(hd, {1, 2})[7], 0.0);
  EXPECT_EQ(ft::proto_series(hd, {0, 2, 4})[7], 0.0);
  EXPECT_GT(ft::proto_series(hd, {0, 2})[7], 0.0);
}

TEST(ProtoSeries, PermutationInvariantAndMonotone) {
  const auto hd = random_hypnodensity(200, 15.0, 5);
  const auto a = ft::proto_series(hd, {0, 2, 4});
  const auto b = ft::proto_series(hd, {4, 0, 2});
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_DOUBLE_EQ(a[t], b[t]);
  for (const auto& c : ft::all_combos()) {
    const auto base = ft::proto_series(hd, c);
    for (std::size_t extra = 0; extra < kNumStages; ++extra) {
      if (std::find(c.begin(), c.end(), extra) != c.end()) continue;
      auto bigger = c;
      bigger.push_back(extra);
      const auto more = ft::proto_series(hd, bigger);
      for (std::size_t t = 0; t < base.size(); ++t) EXPECT_LE(more[t], base[t]);
    }
  }
}

// ---------------------------------------------------------------------------
// Descriptors

TEST(Descriptors, ConstantSeriesClosedForms) {
  const double c = 0.3, res = 15.0;
  const std::size_t n = 200;  // 50 minutes
  const std::vector<double> x(n, c);
  const auto d = ft::combo_descriptors(x, res);
  const double T = n * res / 60.0, total = c * n;
  EXPECT_NEAR(d[0], c, 1e-14);
  EXPECT_EQ(d[1], c);
  EXPECT_NEAR(d[2], 0.0, 1e-12);
  EXPECT_EQ(d[3], 0.0);
  EXPECT_EQ(d[4], 0.0);
  EXPECT_NEAR(d[5], std::log(static_cast<double>(n)), 1e-12);
  const std::array<double, 6> ps = {0.05, 0.10, 0.30, 0.50, 0.70, 0.90};
  for (std::size_t p = 0; p < ps.size(); ++p) EXPECT_NEAR(d[6 + p], ps[p] * T * total, 1e-9) << ps[p];
  EXPECT_NEAR(d[12], total, 1e-12);
  EXPECT_EQ(d[13], 1.0);
  EXPECT_EQ(d[14], 0.0);
}

TEST(Descriptors, ImpulseSeries) {
  const double res = 30.0;
  std::vector<double> x(120, 0.0);
  x[40] = 1.0;
  const auto d = ft::combo_descriptors(x, res);
  // the crossing is counted to the end of the impulse segment
  const double t_imp = 41 * res / 60.0;
  for (std::size_t p = 6; p < 12; ++p) EXPECT_DOUBLE_EQ(d[p], t_imp);
  EXPECT_EQ(d[5], 0.0);
  EXPECT_EQ(d[12], 1.0);
  EXPECT_NEAR(d[13], 1.0 / 120.0, 1e-15);
  EXPECT_EQ(d[4], 1.0);
}

TEST(Descriptors, AllZeroSeriesIsFinite) {
  const std::vector<double> x(30, 0.0);
  for (double v : ft::combo_descriptors(x, 15.0)) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(v, 0.0);
  }
}

TEST(Descriptors, EmptySeriesRejected) {
  EXPECT_THROW(ft::combo_descriptors(std::vector<double>{}, 15.0), Error);
}

TEST(Descriptors, RandomSeriesMatchesOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(50 + trial * 13);
    for (auto& v : x) v = std::pow(u(rng), 3.0);
    const double res = trial % 2 ? 15.0 : 5.0;
    const auto d = ft::combo_descriptors(x, res);
    const auto o = oracle_descriptors(x, res);
    for (std::size_t k = 0; k < d.size(); ++k)
      EXPECT_NEAR(d[k], o[k], 1e-9 * std::max(1.0, std::abs(o[k]))) << ft::kDescriptorNames[k];
  }
}

// ---------------------------------------------------------------------------
// Pairwise W/N2/REM accumulation

TEST(Eq4, ConstantPiIsFivePercentOfDuration) {
  const auto hd = constant_hd({0.3, 0.1, 0.3, 0.0, 0.3}, 240, 15.0);
  const double pi = 3 * 0.09, total = pi * 240, T = 240 * 15.0 / 60.0;
  EXPECT_NEAR(ft::eq4_feature(hd), 0.05 * T * total, 1e-9);
}

TEST(Eq4, MassInFirstSegment) {
  auto hd = constant_hd({0.0, 0.0, 0.0, 1.0, 0.0}, 500, 15.0);
  hd.probs[0] = {1.0 / 3, 0.0, 1.0 / 3, 0.0, 1.0 / 3};
  const double total = 3.0 / 9.0;
  // only the first 15 s segment carries mass
  EXPECT_NEAR(ft::eq4_feature(hd) / total, 0.25, 1e-12);
}

TEST(Eq4, MatchesBruteForceAndStaysInRange) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto hd = random_hypnodensity(400 + seed * 7, 15.0, seed);
    std::vector<double> pi;
    for (const auto& p : hd.probs) pi.push_back(p[0] * p[2] + p[0] * p[4] + p[2] * p[4]);
    const double total = std::accumulate(pi.begin(), pi.end(), 0.0);
    const double t = oracle_time_to(pi, hd.resolution_s, 0.05);
    EXPECT_NEAR(ft::eq4_feature(hd), t * total, 1e-9 * std::max(1.0, t * total));
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, hd.duration_s() / 60.0);
  }
}

// ---------------------------------------------------------------------------
// Sequencing

TEST(Sorem, WakeThenN1ThenRem) {
  const auto h = labels({{Stage::W, 10}, {Stage::N1, 5}, {Stage::REM, 10}});
  const auto r = ft::sorem_analysis(h);
  EXPECT_DOUBLE_EQ(r.sleep_latency_min, 5.0);
  EXPECT_EQ(r.count, 1u);
  EXPECT_DOUBLE_EQ(r.total_duration_min, 5.0);
  EXPECT_DOUBLE_EQ(r.rem_latency_min, 2.5);
  EXPECT_TRUE(r.has_rem);
}

TEST(Sorem, ClassicProgressionHasNone) {
  const auto h = labels({{Stage::W, 20}, {Stage::N1, 10}, {Stage::N2, 60}, {Stage::N3, 90}, {Stage::REM, 20}});
  const auto r = ft::sorem_analysis(h);
  EXPECT_EQ(r.count, 0u);
  EXPECT_EQ(r.total_duration_min, 0.0);
  EXPECT_DOUBLE_EQ(r.sleep_latency_min + r.rem_latency_min, 90.0);
}

TEST(Sorem, AllWake) {
  const auto h = labels({{Stage::W, 120}});
  const auto r = ft::sorem_analysis(h);
  EXPECT_EQ(r.count, 0u);
  EXPECT_FALSE(r.has_sleep);
  EXPECT_DOUBLE_EQ(r.sleep_latency_min, 60.0);
  EXPECT_DOUBLE_EQ(r.rem_latency_min, 60.0);
}

TEST(Sorem, ShortWakeDoesNotQualify) {
  // 4 epochs = 2 min of W/N1 before REM
  const auto h = labels({{Stage::N2, 20}, {Stage::W, 2}, {Stage::N1, 2}, {Stage::REM, 6}});
  EXPECT_EQ(ft::sorem_analysis(h).count, 0u);
  const auto h2 = labels({{Stage::N2, 20}, {Stage::W, 3}, {Stage::N1, 2}, {Stage::REM, 6}});
  EXPECT_EQ(ft::sorem_analysis(h2).count, 1u);
}

TEST(Fragmentation, AlternatingBlocksCountEachBreak) {
  for (std::size_t k : {1u, 3u, 7u}) {
    HypnogramLabels h;
    h.epoch_s = 30.0;
    for (std::size_t i = 0; i < k; ++i) {
      h.stages.insert(h.stages.end(), 4, Stage::N2);
      h.stages.insert(h.stages.end(), 2, Stage::W);
    }
    const auto f = ft::fragmentation_features(h);
    EXPECT_EQ(f.nrem_fragmentations, static_cast<double>(k));
    EXPECT_EQ(f.long_wake_bouts, 0.0);
    EXPECT_DOUBLE_EQ(f.short_wake_min, static_cast<double>(k));
  }
}

TEST(Fragmentation, ContinuousN2IsAllZero) {
  const auto f = ft::fragmentation_features(labels({{Stage::N2, 900}}));
  EXPECT_EQ(f.nrem_fragmentations, 0.0);
  EXPECT_EQ(f.long_wake_bouts, 0.0);
  EXPECT_EQ(f.short_wake_min, 0.0);
  EXPECT_EQ(f.rem_after_wake_min, 0.0);
  EXPECT_EQ(f.rem_latency_indicator, 0.0);
}

TEST(Fragmentation, EarlyRemSetsIndicator) {
  const auto f = ft::fragmentation_features(labels({{Stage::W, 6}, {Stage::N2, 20}, {Stage::REM, 10}}));
  EXPECT_EQ(f.rem_latency_indicator, 1.0);
  const auto g = ft::fragmentation_features(labels({{Stage::W, 6}, {Stage::N2, 40}, {Stage::REM, 10}}));
  EXPECT_EQ(g.rem_latency_indicator, 0.0);
}

TEST(Fragmentation, LongBoutsAndRemAfterWake) {
  const auto h = labels({{Stage::N2, 10}, {Stage::W, 6}, {Stage::REM, 4}, {Stage::N3, 10}, {Stage::W, 40}, {Stage::N2, 5}});
  const auto f = ft::fragmentation_features(h);
  EXPECT_EQ(f.long_wake_bouts, 2.0);
  EXPECT_DOUBLE_EQ(f.short_wake_min, 3.0);  // the 20 min bout is excluded
  EXPECT_DOUBLE_EQ(f.rem_after_wake_min, 2.0);
  EXPECT_EQ(f.nrem_fragmentations, 2.0);
}

TEST(Fragmentation, RejectsCoarseEpochs) {
  EXPECT_THROW(ft::fragmentation_features(labels({{Stage::N2, 5}}, 120.0)), Error);
}

TEST(Sequencing, InvariantToResolutionRefinement) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> st(0, 4), len(1, 12);
  for (int trial = 0; trial < 30; ++trial) {
    HypnogramLabels coarse, fine;
    coarse.epoch_s = 30.0;
    fine.epoch_s = 5.0;
    for (int r = 0; r < 60; ++r) {
      const auto s = kStages[static_cast<std::size_t>(st(rng))];
      const auto n = static_cast<std::size_t>(len(rng));
      coarse.stages.insert(coarse.stages.end(), n, s);
      fine.stages.insert(fine.stages.end(), 6 * n, s);
    }
    const auto a = ft::sorem_analysis(coarse), b = ft::sorem_analysis(fine);
    EXPECT_EQ(a.count, b.count);
    EXPECT_NEAR(a.total_duration_min, b.total_duration_min, 1e-9);
    EXPECT_NEAR(a.rem_latency_min, b.rem_latency_min, 1e-9);
    EXPECT_NEAR(a.sleep_latency_min, b.sleep_latency_min, 1e-9);
    const auto f = ft::fragmentation_features(coarse), g = ft::fragmentation_features(fine);
    EXPECT_EQ(f.nrem_fragmentations, g.nrem_fragmentations);
    EXPECT_EQ(f.long_wake_bouts, g.long_wake_bouts);
    EXPECT_NEAR(f.short_wake_min, g.short_wake_min, 1e-9);
    EXPECT_NEAR(f.rem_after_wake_min, g.rem_after_wake_min, 1e-9);
    EXPECT_EQ(f.rem_latency_indicator, g.rem_latency_indicator);
  }
}

// ---------------------------------------------------------------------------
// Peak transitions

TEST(Transitions, SingleDominantStageHasNone) {
  const auto hd = constant_hd({0.1, 0.05, 0.7, 0.1, 0.05}, 2000, 15.0);
  for (double v : ft::transition_features(hd)) EXPECT_EQ(v, 0.0);
}

TEST(Transitions, GeometricMeanOfSuccessivePeaks) {
  const auto t = ft::transition_scores({{ft::PeakType::WN1, 16.0}, {ft::PeakType::N2, 25.0}});
  EXPECT_DOUBLE_EQ(t[0], 20.0);
  for (std::size_t k = 1; k < t.size(); ++k) EXPECT_EQ(t[k], 0.0);
}

TEST(Transitions, SmallPeaksDroppedAndNeighboursMerged) {
  // the mass-9 REM peak is dropped, so the two N2 peaks merge into 36
  const auto t = ft::transition_scores(
      {{ft::PeakType::WN1, 16.0}, {ft::PeakType::N2, 16.0}, {ft::PeakType::REM, 9.0}, {ft::PeakType::N2, 20.0}});
  EXPECT_DOUBLE_EQ(t[0], 24.0);
  EXPECT_EQ(t[4], 0.0);
  EXPECT_EQ(t[8], 0.0);
  const auto u = ft::transition_scores({{ft::PeakType::N2, 16.0}, {ft::PeakType::REM, 10.0}});
  EXPECT_DOUBLE_EQ(u[4], std::sqrt(160.0));
}

TEST(Transitions, ExcludedPairsScoreNothing) {
  const auto t = ft::transition_scores({{ft::PeakType::WN1, 20.0}, {ft::PeakType::N3, 20.0}, {ft::PeakType::REM, 20.0},
                                        {ft::PeakType::N3, 20.0}});
  for (double v : t) EXPECT_EQ(v, 0.0);
}

TEST(Transitions, HomogeneousUnderMassScaling) {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> type(0, 3);
  std::uniform_real_distribution<double> mass(10.0, 80.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ft::Peak> peaks;
    for (int i = 0; i < 40; ++i) peaks.push_back({static_cast<ft::PeakType>(type(rng)), mass(rng)});
    for (double s : {1.5, 3.0}) {
      auto scaled = peaks;
      for (auto& p : scaled) p.mass *= s * s;
      const auto a = ft::transition_scores(peaks), b = ft::transition_scores(scaled);
      // sqrt(s^2 m1 * s^2 m2) = s^2 sqrt(m1 m2): degree-one homogeneous in the masses
      for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(b[k], s * s * a[k], 1e-9 * std::max(1.0, b[k]));
    }
  }
}

TEST(Transitions, PeakMassInEpochUnits) {
  // 40 rows at 15 s fully dominated by N2 = 20 epoch-units
  auto hd = constant_hd({0.0, 0.0, 1.0, 0.0, 0.0}, 40, 15.0);
  const auto peaks = ft::extract_peaks(hd);
  ASSERT_EQ(peaks.size(), 1u);
  EXPECT_EQ(peaks[0].type, ft::PeakType::N2);
  EXPECT_DOUBLE_EQ(peaks[0].mass, 20.0);
}

TEST(Transitions, WakeAndN1AreMerged) {
  auto hd = constant_hd({0.3, 0.3, 0.4, 0.0, 0.0}, 10, 30.0);
  const auto peaks = ft::extract_peaks(hd);
  ASSERT_EQ(peaks.size(), 1u);
  EXPECT_EQ(peaks[0].type, ft::PeakType::WN1);
  EXPECT_NEAR(peaks[0].mass, 6.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Assembly and serialisation

TEST(Assemble, FourHundredEightyOneFiniteNamedValues) {
  const auto hd = random_hypnodensity(960, 15.0, 31);
  const auto fv = ft::assemble(hd, to_hypnogram(hd), true);
  ASSERT_EQ(fv.values.size(), 481u);
  for (double v : fv.values) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(fv.recording_id, hd.recording_id);
  EXPECT_EQ(fv.hla_positive, std::optional<bool>(true));
  const auto& names = ft::feature_names();
  ASSERT_EQ(names.size(), 481u);
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), 481u);
  EXPECT_EQ(names[0], "W.mean");
  EXPECT_EQ(names[465], "seq.rem_latency_min");
  EXPECT_EQ(names[472], "trans.WN1_N2");
  EXPECT_EQ(names[480], "trans.REM_N2");
  EXPECT_EQ(&ft::feature_names(), &names);
}

TEST(Assemble, UniformHypnodensityClosedForms) {
  const std::size_t n = 240;
  const auto hd = constant_hd({0.2, 0.2, 0.2, 0.2, 0.2}, n, 15.0);
  const auto fv = ft::assemble(hd, to_hypnogram(hd));
  const auto& combos = ft::all_combos();
  for (std::size_t c = 0; c < combos.size(); ++c) {
    const double phi = std::pow(0.2, static_cast<double>(combos[c].size()));
    EXPECT_NEAR(fv.values[c * 15 + 0], phi, 1e-15);
    EXPECT_NEAR(fv.values[c * 15 + 12], phi * n, 1e-12);
    EXPECT_NEAR(fv.values[c * 15 + 5], std::log(static_cast<double>(n)), 1e-9);
  }
}

TEST(Assemble, MatchesIndependentRecomputation) {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const double res = seed % 2 ? 15.0 : 30.0;
    const auto hd = random_hypnodensity(600 + seed * 3, res, seed, 2.0 + static_cast<double>(seed % 3));
    const auto hyp = to_hypnogram(hd);
    const auto fv = ft::assemble(hd, hyp);
    const auto o = oracle_vector(hd, hyp);
    ASSERT_EQ(o.size(), 481u);
    for (std::size_t k = 0; k < 481; ++k)
      EXPECT_NEAR(fv.values[k], o[k], 1e-9 * std::max(1.0, std::abs(o[k]))) << ft::feature_names()[k];
  }
}

TEST(Assemble, EmptyRejected) {
  Hypnodensity hd;
  EXPECT_THROW(ft::assemble(hd, HypnogramLabels{}), Error);
}

TEST(Serialisation, CsvRoundTrip) {
  std::vector<ft::FeatureVector> rows;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto hd = random_hypnodensity(500, 15.0, 40 + s);
    std::optional<bool> hla;
    if (s == 1) hla = false;
    if (s == 2) hla = true;
    rows.push_back(ft::assemble(hd, to_hypnogram(hd), hla));
  }
  std::stringstream ss;
  ft::write_csv(ss, rows);
  const auto back = ft::read_csv(ss);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].recording_id, rows[i].recording_id);
    EXPECT_EQ(back[i].hla_positive, rows[i].hla_positive);
    EXPECT_EQ(back[i].values, rows[i].values);
  }
}

TEST(Serialisation, CsvRejectsBadInput) {
  std::stringstream empty;
  EXPECT_THROW(ft::read_csv(empty), Error);
  std::stringstream wrong("recording_id,hla,foo\nx,,1\n");
  EXPECT_THROW(ft::read_csv(wrong), Error);
  std::stringstream good;
  ft::write_csv(good, {});
  std::string text = good.str() + "r1,2,1\n";
  std::stringstream bad_hla(text);
  EXPECT_THROW(ft::read_csv(bad_hla), Error);
  std::stringstream short_row(good.str() + "r1,1,1,2,3\n");
  EXPECT_THROW(ft::read_csv(short_row), Error);
}

TEST(Serialisation, JsonRoundTrip) {
  const auto hd = random_hypnodensity(300, 15.0, 77);
  const auto fv = ft::assemble(hd, to_hypnogram(hd), false);
  const auto j = nlohmann::json::parse(ft::to_json(fv).dump());
  const auto back = ft::feature_vector_from_json(j);
  EXPECT_EQ(back.values, fv.values);
  EXPECT_EQ(back.hla_positive, fv.hla_positive);
  EXPECT_EQ(back.recording_id, fv.recording_id);
  EXPECT_THROW(ft::feature_vector_from_json(nlohmann::json::object()), Error);
}
