// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "feature_oracle.hpp"
#include "hypnodx/diagnosis.hpp"
#include "hypnodx/dsp.hpp"
#include "hypnodx/features.hpp"
#include "hypnodx/pipeline.hpp"
#include "hypnodx/preprocess.hpp"

using namespace testing_support;
namespace ft = hypnodx::features;
namespace dx = hypnodx::dx;
namespace fs = std::filesystem;

namespace {

/// Collects failed expectations for one criterion.
struct Check {
  std::vector<std::string> failures;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    if (!(std::abs(got - want) <= tol)) {
      std::ostringstream s;
      s.precision(17);
      s << what << ": got " << got << ", want " << want << " +/- " << tol;
      failures.push_back(s.str());
    }
  }
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<void(Check&)> body;
};

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. constant fidelity

void constants_fidelity(Check& c) {
  namespace k = hypnodx::constants;
  namespace nk = hypnodx::nn::constants;
  namespace fk = hypnodx::features::constants;
  namespace dk = hypnodx::dx::constants;

  c.expect(k::kHighpassHz == 0.2 && k::kLowpassHz == 49.0, "band edges 0.2 / 49 Hz");
  c.expect(k::kFilterOrder == 5, "filter order 5");
  const auto hp = highpass_spec(), lp = lowpass_spec();
  c.expect(hp.bidirectional && lp.bidirectional, "filters run forward and backward");
  c.expect(hp.order == 5 && lp.order == 5 && hp.cutoff_hz == 0.2 && lp.cutoff_hz == 49.0, "filter specs");
  c.expect(k::kTargetFs == 100.0, "resample target 100 Hz");
  c.expect(k::kOctaveCutoffsHz == std::array<double, 5>{49.0, 25.0, 12.5, 6.25, 3.125}, "octave cutoffs");
  c.expect(k::kEogCC.segment_s == 4.0 && k::kEogCC.segment_s - k::kEogCC.hop_s == 3.75, "EOG CC 4 s / 3.75 s");
  c.near(k::kEmgCC.segment_s, 0.4, 1e-15, "EMG CC segment");
  c.near(k::kEmgCC.segment_s - k::kEmgCC.hop_s, 0.25, 1e-15, "EMG CC overlap");
  c.expect(nk::kWeightDecay == 1e-5, "lambda 1e-5");
  c.expect(nk::kMomentum == 0.9, "momentum 0.9");
  c.expect(nk::kInitialLearningRate == 0.005, "eta0 0.005");
  c.expect(nk::kDecayTimeConstant == 12000.0, "tau 12000");
  c.expect(nk::kDropoutKeep == 0.5, "dropout 0.5");
  c.expect(nk::kInitStd == 0.01, "init N(0, 0.01)");
  const hypnodx::nn::NetworkConfig cfg;
  c.expect(cfg.lambda == 1e-5 && cfg.momentum == 0.9 && cfg.eta0 == 0.005 && cfg.tau == 12000.0 &&
               cfg.dropout_keep == 0.5 && cfg.init_std == 0.01,
           "default network config carries the training constants");
  c.expect(nk::kEnsembleSize == 16, "ensemble n = 16");
  c.expect(nk::kEnsembleScaleLo == 0.5 && nk::kEnsembleScaleHi == 1.5, "ensemble scaling U(0.5, 1.5)");
  c.expect(dk::kSelectionCutoff == 0.40, "RFE cutoff 0.40");
  c.expect(dk::kTargetFeatures == 38, "RFE default count 38");
  c.expect(dk::kThreshold == -0.03, "threshold -0.03");
  c.expect(dk::kHlaThreshold == -0.53, "HLA threshold -0.53");
  c.expect(fk::kSorempWakeS == 150.0, "SOREMP 2.5 min");
  c.expect(fk::kFragmentSleepS == 90.0 && fk::kFragmentWakeS == 60.0, "fragmentation 90 s / 1 min");
  c.expect(fk::kLongBoutS == 180.0, "long bout 3 min");
  c.expect(fk::kPeakFloor == 10.0, "peak floor 10");
}

// ---------------------------------------------------------------------------
// 2. DSP suite

void dsp_suite(Check& c) {
  {
    const std::vector<double> x(200 * 120, 100.0);
    const auto y = bandlimit(x, 200.0);
    double peak = 0.0;
    for (std::size_t i = 6000; i < y.size() - 6000; ++i) peak = std::max(peak, std::abs(y[i]));
    c.expect(peak < 1e-3, "DC residual " + fmt(peak) + " uV >= 1e-3");
  }
  {
    const auto x = sine(70.0, 1.0, 200.0, 200 * 120);
    const auto y = bandlimit(x, 200.0);
    const double db = 20.0 * std::log10(rms(y, 6000, y.size() - 6000) / rms(x, 6000, x.size() - 6000));
    c.expect(db < -30.0, "70 Hz attenuation only " + fmt(db) + " dB");
  }
  {
    // zero phase: the output of a passband tone has no phase shift
    const double fs = 100.0, f = 7.0;
    const auto x = sine(f, 1.0, fs, 100 * 60);
    const auto y = bandlimit(x, fs);
    double si = 0.0, co = 0.0;
    for (std::size_t i = 1000; i < y.size() - 1000; ++i) {
      const double t = 2.0 * std::numbers::pi * f * static_cast<double>(i) / fs;
      si += y[i] * std::sin(t);
      co += y[i] * std::cos(t);
    }
    const double phase = std::atan2(co, si);
    c.expect(std::abs(phase) < 1e-3, "7 Hz phase shift " + fmt(phase) + " rad");
  }
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto b = octave_bands(white_noise(4000, 5.0, seed));
    for (std::size_t i = 0; i + 1 < b.size(); ++i) {
      const double e0 = std::inner_product(b[i].begin(), b[i].end(), b[i].begin(), 0.0);
      const double e1 = std::inner_product(b[i + 1].begin(), b[i + 1].end(), b[i + 1].begin(), 0.0);
      c.expect(e1 <= e0 * (1.0 + 1e-12), "octave energy not nested at band " + std::to_string(i));
    }
  }
  {
    const auto x = sine(1.0, 1.0, 100.0, 2000);
    const auto m = cc_segment(x, 100.0, constants::kEogCC);
    double worst = 0.0;
    for (std::size_t r = 0; r < m.rows; ++r) worst = std::max(worst, std::abs(m.row(r)[m.zero_lag()] - 0.5) / 0.5);
    c.expect(worst < 1e-6, "CC lag-0 relative error " + fmt(worst));
  }
}

// ---------------------------------------------------------------------------
// 3. gradient check

nn::NetworkConfig small_config(nn::NetMode mode) {
  nn::NetworkConfig cfg;
  cfg.mode = mode;
  cfg.conv_features = {3, 3, 2};
  cfg.hidden = 6;
  cfg.kernel = 3;
  cfg.lambda = 1e-3;
  return cfg;
}

nn::Model random_model(const nn::NetworkConfig& cfg, const nn::Window& w, std::uint64_t seed) {
  auto m = nn::make_model(cfg, nn::input_channels(w));
  m.config.init_std = 0.3;
  nn::init_params(m, seed);
  m.config.init_std = cfg.init_std;
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (std::size_t i = 0; i < m.norm.mean.size(); ++i) {
    m.norm.mean[i] = u(rng) - 1.0;
    m.norm.var[i] = u(rng);
  }
  m.norm.initialised = true;
  return m;
}

void gradient_check(Check& c) {
  std::mt19937_64 rng(8);
  std::vector<nn::Window> ws;
  for (int i = 0; i < 4; ++i) ws.push_back(toy_window(rng, i % 2));
  nn::LabeledSequence seq;
  for (const auto& w : ws) seq.windows.push_back(&w);
  seq.labels = {0, 2, 4, 1};
  for (auto mode : {nn::NetMode::FF, nn::NetMode::LSTM}) {
    const auto m = random_model(small_config(mode), ws[0], mode == nn::NetMode::FF ? 9 : 11);
    const double err = nn::grad_check(m, seq, 64);
    c.expect(err < 1e-3, std::string(mode == nn::NetMode::FF ? "FF" : "LSTM") + " max relative error " + fmt(err));
  }
}

// ---------------------------------------------------------------------------
// 4. toy training

void toy_training(Check& c) {
  std::vector<nn::RecordingData> data;
  for (std::uint64_t k = 0; k < 3; ++k) data.push_back(make_mixed_recording(10 + 2 * k, 600.0, EncodingMode::cc, 5));
  nn::NetworkConfig cfg;
  cfg.seed = 2;
  cfg.patience = 10;
  const auto a = nn::train(data, cfg);
  const auto b = nn::train(data, cfg);
  c.expect(a.train_accuracy >= 0.95, "train accuracy " + fmt(a.train_accuracy));
  c.expect(a.stopped_early, "early stopping did not trigger within " + std::to_string(cfg.max_epochs) + " epochs");
  c.expect(a.model.params.values == b.model.params.values, "same-seed runs differ in parameters");
  c.expect(a.model.norm.mean == b.model.norm.mean && a.model.norm.var == b.model.norm.var,
           "same-seed runs differ in normaliser state");
  std::cout << "  criterion 4: train accuracy " << fmt(a.train_accuracy) << ", " << a.steps << " steps, "
            << a.validation_accuracy.size() << " validations\n";
}

// ---------------------------------------------------------------------------
// 5. consensus math

HypnogramLabels from_indices(const std::vector<int>& idx) {
  HypnogramLabels h;
  for (int i : idx) h.stages.push_back(kStages[static_cast<std::size_t>(i)]);
  return h;
}

std::vector<int> random_indices(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> d(0, 4);
  std::vector<int> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void consensus_math(Check& c) {
  std::mt19937_64 rng(7);
  const auto a = from_indices(random_indices(rng, 100000));
  const auto b = from_indices(random_indices(rng, 100000));
  c.expect(cohen_kappa(a, a) == 1.0, "kappa(a, a) != 1");
  c.near(cohen_kappa(a, b), 0.0, 0.01, "kappa of independent labels");

  // equal kappas: each scorer deviates on its own disjoint sixth of the epochs
  const auto base = random_indices(rng, 600);
  ScorerSet s;
  for (int i = 0; i < 6; ++i) {
    auto v = base;
    for (std::size_t n = static_cast<std::size_t>(i); n < v.size(); n += 6) v[n] = (v[n] + 1) % 5;
    s.push_back(from_indices(v));
  }
  for (double w : {0.3, 1.0, 7.5})
    c.expect(detail::weighted_vote(s, std::vector<double>(s.size(), w)).stages == majority_vote(s).stages,
             "equal-weight vote differs from majority vote at w = " + fmt(w));
  const auto r = consensus(s);
  for (double k : r.kappas) c.near(k, r.kappas[0], 1e-3, "leave-one-out kappas equal");
  c.expect(r.labels.stages == majority_vote(s).stages, "consensus differs from majority vote");

  c.expect(epoch_weight({1, 0, 0, 0, 0}) == 1.0, "unanimous epoch weight != 1");
  c.expect(epoch_weight({0.5, 0, 0.5, 0, 0}) == 0.0, "3-3 split epoch weight != 0");

  const auto truth = from_indices(random_indices(rng, 300));
  const auto model = from_indices(random_indices(rng, 300));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < 300; ++i) hit += model.stages[i] == truth.stages[i];
  c.expect(weighted_accuracy(model, ScorerSet(6, truth)) == static_cast<double>(hit) / 300.0,
           "unit-weight accuracy differs from plain accuracy");
}

// ---------------------------------------------------------------------------
// 6. resolution property

void resolution_property(Check& c) {
  std::size_t mismatches = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto hd = random_hypnodensity(360, 5.0, seed, 0.5);
    const auto direct = to_hypnogram(hd, 30.0);
    const auto agg = aggregate_resolution(hd, 30.0);
    if (agg.size() != direct.stages.size()) {
      ++mismatches;
      continue;
    }
    for (std::size_t e = 0; e < agg.size(); ++e) mismatches += kStages[argmax_stage(agg.probs[e])] != direct.stages[e];
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " epochs disagree");
}

// ---------------------------------------------------------------------------
// 7. feature oracle

void feature_oracle_check(Check& c) {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const double res = seed % 2 ? 15.0 : 30.0;
    const auto hd = random_hypnodensity(600 + seed * 3, res, seed, 2.0 + static_cast<double>(seed % 3));
    const auto hyp = to_hypnogram(hd);
    const auto fv = ft::assemble(hd, hyp);
    const auto o = feature_oracle::oracle_vector(hd, hyp);
    c.expect(fv.values.size() == 481 && o.size() == 481, "vector length is not 481");
    if (fv.values.size() != o.size()) continue;
    for (std::size_t k = 0; k < o.size(); ++k)
      c.near(fv.values[k], o[k], 1e-9 * std::max(1.0, std::abs(o[k])),
             "seed " + std::to_string(seed) + " " + ft::feature_names()[k]);
  }
  const std::size_t n = 240;
  Hypnodensity uni;
  uni.resolution_s = 15.0;
  uni.probs.assign(n, StageProbs{0.2, 0.2, 0.2, 0.2, 0.2});
  const auto fv = ft::assemble(uni, to_hypnogram(uni));
  const auto& combos = ft::all_combos();
  for (std::size_t k = 0; k < combos.size(); ++k) {
    const double phi = std::pow(0.2, static_cast<double>(combos[k].size()));
    const auto name = ft::combo_name(combos[k]);
    c.near(fv.values[k * 15 + 0], phi, 1e-15, name + " mean");
    c.near(fv.values[k * 15 + 1], phi, 1e-15, name + " max");
    c.near(fv.values[k * 15 + 5], std::log(static_cast<double>(n)), 1e-9, name + " entropy");
    c.near(fv.values[k * 15 + 12], phi * n, 1e-12, name + " total");
  }
}

// ---------------------------------------------------------------------------
// 8. sequencing fixtures

void sequencing_fixtures(Check& c) {
  {
    const auto r = ft::sorem_analysis(labels({{Stage::W, 10}, {Stage::N1, 5}, {Stage::REM, 10}}));
    c.expect(r.sleep_latency_min == 5.0, "W10 N1x5 REM10: sleep latency " + fmt(r.sleep_latency_min));
    c.expect(r.count == 1, "W10 N1x5 REM10: SOREMP count " + std::to_string(r.count));
    c.expect(r.total_duration_min == 5.0, "W10 N1x5 REM10: SOREMP duration " + fmt(r.total_duration_min));
    c.expect(r.rem_latency_min == 2.5, "W10 N1x5 REM10: REM latency " + fmt(r.rem_latency_min));
  }
  {
    // REM at minute 90 after N3
    const auto h = labels({{Stage::W, 20}, {Stage::N1, 10}, {Stage::N2, 60}, {Stage::N3, 90}, {Stage::REM, 20}});
    const auto r = ft::sorem_analysis(h);
    c.expect(r.count == 0, "classic progression: SOREMP count " + std::to_string(r.count));
    c.expect(r.total_duration_min == 0.0, "classic progression: SOREMP duration");
    c.expect(r.sleep_latency_min + r.rem_latency_min == 90.0, "classic progression: REM at 90 min");
  }
  {
    const auto r = ft::sorem_analysis(labels({{Stage::W, 120}}));
    c.expect(r.count == 0, "all wake: SOREMP count");
    c.expect(r.sleep_latency_min == 60.0 && r.rem_latency_min == 60.0, "all wake: latencies equal the duration");
  }
  for (std::size_t k : {1u, 3u, 7u}) {
    HypnogramLabels h;
    for (std::size_t i = 0; i < k; ++i) {
      h.stages.insert(h.stages.end(), 4, Stage::N2);
      h.stages.insert(h.stages.end(), 2, Stage::W);
    }
    const auto f = ft::fragmentation_features(h);
    c.expect(f.nrem_fragmentations == static_cast<double>(k),
             std::to_string(k) + " x (2 min N2, 1 min W): fragmentations " + fmt(f.nrem_fragmentations));
  }
  {
    const auto f = ft::fragmentation_features(labels({{Stage::N2, 900}}));
    c.expect(f.nrem_fragmentations == 0 && f.long_wake_bouts == 0 && f.short_wake_min == 0 &&
                 f.rem_after_wake_min == 0 && f.rem_latency_indicator == 0,
             "continuous N2: all fragmentation features 0");
  }
  {
    // sleep onset at 3 min, REM 10 min later
    const auto f = ft::fragmentation_features(labels({{Stage::W, 6}, {Stage::N2, 20}, {Stage::REM, 10}}));
    c.expect(f.rem_latency_indicator == 1.0, "REM 10 min after onset: indicator");
  }
}

// ---------------------------------------------------------------------------
// 9. GP suite

struct Blobs {
  dx::Matrix X;
  std::vector<int> y;
};

Blobs blobs(std::size_t n, std::size_t d, double sep, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Blobs out{dx::Matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i % 2 ? 1 : -1;
    out.y.push_back(label);
    for (std::size_t k = 0; k < d; ++k)
      out.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = label * sep / 2 + g(rng);
  }
  return out;
}

void gp_suite(Check& c) {
  {
    const auto train = blobs(100, 2, 5.0, 1), test = blobs(200, 2, 5.0, 2);
    const auto m = dx::gp_fit(train.X, train.y);
    std::vector<double> scores;
    std::vector<char> truth;
    for (Eigen::Index i = 0; i < test.X.rows(); ++i) {
      scores.push_back(dx::gp_predict(m, test.X.row(i).transpose()).score);
      truth.push_back(test.y[static_cast<std::size_t>(i)] == 1);
    }
    std::unique_ptr<bool[]> t(new bool[truth.size()]);
    for (std::size_t i = 0; i < truth.size(); ++i) t[i] = truth[i];
    const auto e = dx::evaluate(scores, std::span<const bool>(t.get(), truth.size()));
    c.expect(e.auc >= 0.98, "blob AUC " + fmt(e.auc));
  }
  {
    const auto d = blobs(60, 3, 2.0, 3);
    std::vector<int> flipped;
    for (int v : d.y) flipped.push_back(-v);
    const auto a = dx::gp_fit(d.X, d.y), b = dx::gp_fit(d.X, flipped);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0.0, 2.0);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      dx::Vector x(3);
      x << g(rng), g(rng), g(rng);
      worst = std::max(worst, std::abs(dx::gp_predict(a, x).score + dx::gp_predict(b, x).score));
    }
    c.expect(worst <= 1e-6, "label-flip antisymmetry error " + fmt(worst));
  }
  {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::size_t leaks = 0;
    for (int i = 0; i < 1000; ++i) {
      const double s = u(rng);
      auto r = dx::ensemble_diagnose(std::vector<double>{s});
      leaks += dx::apply_hla(r, false).label;
      leaks += dx::apply_hla(r, true).label != (s >= -0.53);
    }
    c.expect(leaks == 0, std::to_string(leaks) + " HLA decisions wrong");
  }
  {
    // 4 positives (3 called), 6 negatives (2 called; -0.03 sits on the threshold)
    const std::vector<double> s = {0.5, 0.1, -0.02, -0.3, 0.2, -0.1, -0.4, -0.6, -0.8, -0.03};
    const bool t[] = {true, true, true, true, false, false, false, false, false, false};
    const auto e = dx::evaluate(s, t);
    c.expect(e.tp == 3 && e.fn == 1 && e.fp == 2 && e.tn == 4, "2x2 counts");
    c.expect(e.sensitivity == 0.75, "sensitivity " + fmt(e.sensitivity));
    c.expect(e.specificity == 4.0 / 6.0, "specificity " + fmt(e.specificity));
    c.near(e.auc, 19.0 / 24.0, 1e-15, "AUC");
  }
}

// ---------------------------------------------------------------------------
// 10. end-to-end determinism

void build_toy_models(const fs::path& dir) {
  std::vector<nn::RecordingData> data;
  for (std::uint64_t k = 0; k < 2; ++k) data.push_back(make_mixed_recording(40 + 2 * k, 600.0, EncodingMode::cc, 5));
  nn::NetworkConfig tmpl;
  tmpl.max_epochs = 3;
  pipeline::Ensemble ens;
  for (const auto& cfg : nn::make_ensemble(tmpl, 3, 5)) ens.members.push_back(nn::train(data, cfg).model);
  pipeline::save_ensemble(ens, dir / "models");

  // classifier on features of synthetic hypnodensities: fragmented nights are
  // the positive class
  std::vector<ft::FeatureVector> rows;
  std::vector<int> y;
  for (std::uint64_t s = 0; s < 24; ++s) {
    const bool pos = s % 2 == 1;
    const auto hd = random_hypnodensity(120, 5.0, 500 + s, pos ? 0.5 : 6.0);
    rows.push_back(ft::assemble(hd, to_hypnogram(hd)));
    y.push_back(pos ? 1 : -1);
  }
  dx::Matrix X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ft::constants::kNumFeatures));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].values.size(); ++k)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i].values[k];
  dx::ClassifierOptions opt;
  opt.rfe.target = 10;
  pipeline::ClassifierBundle bundle;
  bundle.classifiers.push_back(dx::train_classifier(X, y, opt));
  pipeline::save_bundle(bundle, dir / "gp");
}

void end_to_end(Check& c) {
  const auto dir = temp_dir("acceptance_e2e");
  build_toy_models(dir);
  const std::string cli = HYPNODX_CLI;
  const int synth = run(cli + " -q synth --out " + (dir / "raw").string() + " --id night --seed 3 --duration 600 --fs 200 > /dev/null");
  c.expect(synth == 0, "synth exit " + std::to_string(synth));
  const std::vector<std::string> artifacts = {"hypnodensity.csv", "hypnodensity.svg", "features.csv", "report.json"};
  std::vector<std::string> outputs[2];
  for (int k = 0; k < 2; ++k) {
    const auto out = dir / ("run" + std::to_string(k));
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = run(cli + " -q -j " + std::to_string(k + 1) + " run-all --recording " +
                       (dir / "raw" / "night.psgmeta.json").string() + " --models " +
                       (dir / "models" / "ensemble.json").string() + " --classifier " +
                       (dir / "gp" / "gp_bundle.json").string() + " --hla positive --out " + out.string() +
                       " > /dev/null");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(rc == 0, "run-all exit " + std::to_string(rc));
    c.expect(secs < 120.0, "run-all took " + fmt(secs) + " s");
    for (const auto& a : artifacts) {
      outputs[k].push_back(slurp(out / a));
      c.expect(!outputs[k].back().empty(), "run " + std::to_string(k) + " missing " + a);
    }
  }
  for (std::size_t i = 0; i < artifacts.size(); ++i)
    c.expect(outputs[0][i] == outputs[1][i], artifacts[i] + " differs between runs");
  fs::remove_all(dir);
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "constant fidelity", 1.0, constants_fidelity},
      {2, "DSP suite", 30.0, dsp_suite},
      {3, "gradient check", 60.0, gradient_check},
      {4, "toy training", 300.0, toy_training},
      {5, "consensus math", 30.0, consensus_math},
      {6, "resolution property", 10.0, resolution_property},
      {7, "feature oracle", 60.0, feature_oracle_check},
      {8, "sequencing fixtures", 5.0, sequencing_fixtures},
      {9, "GP suite", 60.0, gp_suite},
      {10, "end-to-end determinism", 600.0, end_to_end},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.body(c);
    } catch (const std::exception& e) {
      c.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > cr.budget_s) c.failures.push_back("took " + fmt(secs) + " s, budget " + fmt(cr.budget_s) + " s");
    const bool ok = c.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << cr.id << " " << cr.name << " (" << fmt(secs) << " s)\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(c.failures.size(), 10); ++i)
      std::cout << "  " << c.failures[i] << "\n";
    if (c.failures.size() > 10) std::cout << "  ... " << c.failures.size() - 10 << " more\n";
    std::cout.flush();
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - static_cast<std::size_t>(failed) << "/"
            << criteria.size() << "\n";
  return failed ? 1 : 0;
}
