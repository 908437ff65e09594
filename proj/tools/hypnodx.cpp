// hypnodx: command-line front end for the sleep staging and narcolepsy
// pipeline. Results go to files or stdout; logs go to stderr as
// `level=.. stage=.. msg=".."` lines.
//
// Exit codes: 0 success, 2 I/O, 3 validation, 4 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypnodx/diagnosis.hpp"
#include "hypnodx/encoding.hpp"
#include "hypnodx/error.hpp"
#include "hypnodx/features.hpp"
#include "hypnodx/hypnodensity.hpp"
#include "hypnodx/neuralnet.hpp"
#include "hypnodx/pipeline.hpp"
#include "hypnodx/plot.hpp"
#include "hypnodx/preprocess.hpp"
#include "hypnodx/signal_io.hpp"

namespace fs = std::filesystem;
using namespace hypnodx;

namespace {

bool g_quiet = false;

void log(const char* level, const std::string& stage, const std::string& msg) {
  if (g_quiet && std::string(level) == "info") return;
  std::string quoted;
  for (char c : msg) {
    if (c == '"' || c == '\\') quoted += '\\';
    quoted += c == '\n' ? ' ' : c;
  }
  std::cerr << "level=" << level << " stage=" << stage << " msg=\"" << quoted << "\"\n";
}

void info(const std::string& stage, const std::string& msg) { log("info", stage, msg); }

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + p.string() + " for writing");
  return out;
}

std::ifstream open_in(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + p.string());
  return in;
}

nlohmann::json read_json(const fs::path& p) {
  auto in = open_in(p);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::CorruptHeader, p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  auto out = open_out(p);
  out << s;
}

std::optional<bool> parse_hla(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (s == "positive" || s == "1" || s == "true") return true;
  if (s == "negative" || s == "0" || s == "false") return false;
  throw Error(ErrorKind::InvalidArgument, "--hla must be positive or negative");
}

// ---------------------------------------------------------------------------
// synth

/// Five-channel montage with wake-like (alpha EEG, fast eye movements, high
/// chin tone) or sleep-like (slow EEG, slow eyes, low tone) content.
SynthSpec montage(bool wake_like, double fs) {
  SynthSpec s;
  const double eeg_f = wake_like ? 10.0 : 2.0;
  s[ChannelRole::EEG_C_LEFT] = {fs, {{eeg_f, 30.0, 0.0}, {6.0, 8.0, 0.3}}, 5.0};
  s[ChannelRole::EEG_O_LEFT] = {fs, {{eeg_f, 25.0, 0.7}, {5.0, 6.0, 0.1}}, 5.0};
  s[ChannelRole::EOG_L] = {fs, {{wake_like ? 0.8 : 0.3, 40.0, 0.0}}, 4.0};
  s[ChannelRole::EOG_R] = {fs, {{wake_like ? 0.8 : 0.3, 40.0, std::numbers::pi}}, 4.0};
  s[ChannelRole::EMG_CHIN] = {fs, {{wake_like ? 30.0 : 20.0, wake_like ? 20.0 : 4.0, 0.0}}, wake_like ? 8.0 : 2.0};
  return s;
}

struct SynthArgs {
  fs::path out = ".";
  std::string id = "synthetic";
  std::uint64_t seed = 1;
  double duration_s = 600.0;
  double fs = 100.0;
  std::string stage = "mixed";
  double block_s = 300.0;
  fs::path hypnogram;
};

int cmd_synth(const SynthArgs& a) {
  if (a.stage != "wake" && a.stage != "sleep" && a.stage != "mixed")
    throw Error(ErrorKind::InvalidArgument, "--stage must be wake, sleep or mixed");
  if (!(a.block_s >= 30.0) || std::fmod(a.block_s, 30.0) != 0.0)
    throw Error(ErrorKind::InvalidArgument, "--block must be a positive multiple of 30 s");
  const auto wake = synth_recording(montage(true, a.fs), a.seed, a.duration_s, a.id);
  const auto sleep = synth_recording(montage(false, a.fs), a.seed, a.duration_s, a.id);
  auto is_wake_at = [&](double t) {
    if (a.stage != "mixed") return a.stage == "wake";
    return static_cast<long>(std::floor(t / a.block_s)) % 2 == 0;
  };
  PolySignalSet psg = wake;
  for (auto& [role, ch] : psg.channels) {
    const auto& other = sleep.at(role).samples;
    for (std::size_t i = 0; i < ch.samples.size(); ++i)
      if (!is_wake_at(static_cast<double>(i) / ch.fs)) ch.samples[i] = other[i];
  }
  const auto meta = save_recording(psg, a.out);
  info("synth", "wrote " + meta.string());
  std::cout << meta.string() << '\n';
  if (!a.hypnogram.empty()) {
    HypnogramLabels h;
    h.epoch_s = 30.0;
    const auto epochs = static_cast<std::size_t>(std::floor(a.duration_s / 30.0));
    for (std::size_t e = 0; e < epochs; ++e) h.stages.push_back(is_wake_at(e * 30.0) ? Stage::W : Stage::N2);
    if (a.hypnogram.has_parent_path()) fs::create_directories(a.hypnogram.parent_path());
    save_hypnogram(h, a.hypnogram);
    info("synth", "wrote " + a.hypnogram.string());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// fit-reference, preprocess, encode

struct FitReferenceArgs {
  std::vector<fs::path> recordings;
  std::string site = "central";
  fs::path out;
};

int cmd_fit_reference(const FitReferenceArgs& a) {
  if (a.site != "central" && a.site != "occipital")
    throw Error(ErrorKind::InvalidArgument, "--site must be central or occipital");
  std::vector<PolySignalSet> training;
  for (const auto& p : a.recordings) training.push_back(load_recording(p, false));
  const auto ref = fit_reference(training, a.site == "central" ? EegSite::central : EegSite::occipital);
  save_reference(ref, a.out);
  info("fit-reference", "fitted " + a.site + " reference on " + std::to_string(training.size()) + " recordings");
  return 0;
}

std::optional<ReferenceDistribution> maybe_reference(const std::optional<fs::path>& p) {
  if (!p) return std::nullopt;
  return load_reference(*p);
}

nlohmann::ordered_json selection_json(const std::optional<SelectionReport>& r) {
  if (!r) return nullptr;
  nlohmann::ordered_json j;
  j["selected"] = to_string(r->selected);
  j["distances"] = nlohmann::ordered_json::object();
  for (const auto& [role, d] : r->distances) j["distances"][to_string(role)] = std::isfinite(d) ? nlohmann::ordered_json(d) : nlohmann::ordered_json("inf");
  return j;
}

PreprocessResult run_preprocess(const fs::path& recording, const std::optional<fs::path>& central,
                                const std::optional<fs::path>& occipital) {
  const auto psg = load_recording(recording);
  info("preprocess", "loaded " + psg.recording_id + " (" + std::to_string(psg.channels.size()) + " channels, " +
                         format_number(psg.duration_s) + " s)");
  auto res = preprocess_recording(psg, maybe_reference(central), maybe_reference(occipital));
  if (res.central) info("preprocess", "central EEG: " + to_string(res.central->selected));
  if (res.occipital) info("preprocess", "occipital EEG: " + to_string(res.occipital->selected));
  return res;
}

struct PreprocessArgs {
  fs::path in, out;
  std::optional<fs::path> central_ref, occipital_ref;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const auto res = run_preprocess(a.in, a.central_ref, a.occipital_ref);
  const auto meta = save_recording(res.recording, a.out);
  nlohmann::ordered_json rep;
  rep["recording_id"] = res.recording.recording_id;
  rep["central"] = selection_json(res.central);
  rep["occipital"] = selection_json(res.occipital);
  write_text(a.out / (res.recording.recording_id + ".selection.json"), rep.dump(2) + "\n");
  std::cout << meta.string() << '\n';
  return 0;
}

struct EncodeArgs {
  fs::path in, out;
  std::string mode = "cc";
};

int cmd_encode(const EncodeArgs& a) {
  const auto psg = load_recording(a.in);
  const auto enc = encode_recording(psg, parse_encoding_mode(a.mode));
  const auto path = save_encoded(enc, a.out);
  info("encode", "wrote " + path.string());
  std::cout << path.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::vector<fs::path> encoded, hypnograms;
  fs::path out;
  std::optional<fs::path> network_config;
  std::optional<std::string> mode;
  std::optional<int> segment_s, max_epochs, patience;
  int ensemble = 1;
  std::uint64_t seed = 1;
  int jobs = 1;
};

int cmd_train(const TrainArgs& a) {
  if (a.encoded.size() != a.hypnograms.size())
    throw Error(ErrorKind::InvalidArgument, "--encoded and --hypnogram must be given the same number of times");
  if (a.encoded.empty()) throw Error(ErrorKind::InvalidArgument, "no training recordings");
  nn::NetworkConfig tmpl = a.network_config ? nn::network_config_from_json(read_json(*a.network_config))
                                            : nn::NetworkConfig{};
  if (a.mode) {
    if (*a.mode != "FF" && *a.mode != "LSTM") throw Error(ErrorKind::InvalidArgument, "--mode must be FF or LSTM");
    tmpl.mode = *a.mode == "FF" ? nn::NetMode::FF : nn::NetMode::LSTM;
  }
  if (a.segment_s) tmpl.segment_s = *a.segment_s;
  if (a.max_epochs) tmpl.max_epochs = *a.max_epochs;
  if (a.patience) tmpl.patience = *a.patience;
  tmpl.seed = a.seed;
  tmpl.validate();

  std::vector<EncodedRecording> encs;
  for (const auto& p : a.encoded) encs.push_back(load_encoded(p));
  for (const auto& e : encs)
    if (e.mode != encs.front().mode) throw Error(ErrorKind::ShapeMismatch, "training recordings mix encodings");
  tmpl.encoding = encs.front().mode;

  std::vector<nn::RecordingData> data;
  for (std::size_t i = 0; i < encs.size(); ++i) {
    nn::RecordingData r;
    r.windows = nn::make_windows(encs[i], tmpl.segment_s);
    r.labels = nn::window_labels(load_hypnogram(a.hypnograms[i]), tmpl.segment_s, r.windows.size());
    data.push_back(std::move(r));
  }
  const auto configs = a.ensemble == 1 ? std::vector<nn::NetworkConfig>{tmpl}
                                       : nn::make_ensemble(tmpl, a.ensemble, a.seed);
  pipeline::Ensemble ens;
  ens.members.resize(configs.size());
  std::vector<nn::TrainResult> results(configs.size());
  pipeline::parallel_for(configs.size(), a.jobs, [&](std::size_t k) { results[k] = nn::train(data, configs[k]); });
  for (std::size_t k = 0; k < configs.size(); ++k) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "member %zu: train accuracy %.4f, %llu steps, early stop %s", k,
                  results[k].train_accuracy, static_cast<unsigned long long>(results[k].steps),
                  results[k].stopped_early ? "yes" : "no");
    info("train", buf);
    ens.members[k] = std::move(results[k].model);
  }
  pipeline::save_ensemble(ens, a.out);
  std::cout << (a.out / "ensemble.json").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// score

pipeline::ScoredRecording rescale(pipeline::ScoredRecording s, double resolution_s) {
  if (resolution_s <= 0.0 || resolution_s == s.ensemble.mean.resolution_s) return s;
  for (auto& hd : s.per_model) hd = aggregate_resolution(hd, resolution_s);
  s.ensemble = ensemble_hypnodensity(s.per_model);
  return s;
}

struct ScoreArgs {
  fs::path encoded, models, out;
  std::optional<fs::path> per_model_dir;
  double resolution_s = 0.0;
  int jobs = 1;
};

int cmd_score(const ScoreArgs& a) {
  const auto enc = load_encoded(a.encoded);
  const auto ens = pipeline::load_ensemble(a.models);
  const auto scored = rescale(pipeline::score(enc, ens, a.jobs), a.resolution_s);
  {
    auto out = open_out(a.out);
    write_hypnodensity_csv(out, scored.ensemble.mean, &scored.ensemble.variance);
  }
  if (a.per_model_dir) {
    fs::create_directories(*a.per_model_dir);
    for (std::size_t k = 0; k < scored.per_model.size(); ++k) {
      char name[48];
      std::snprintf(name, sizeof name, "model_%02zu.csv", k);
      auto out = open_out(*a.per_model_dir / name);
      write_hypnodensity_csv(out, scored.per_model[k]);
    }
  }
  info("score", "scored " + enc.recording_id + " with " + std::to_string(ens.members.size()) + " models");
  return 0;
}

// ---------------------------------------------------------------------------
// features, fit-gp, diagnose, evaluate

Hypnodensity read_hd(const fs::path& p, const std::string& id) {
  auto in = open_in(p);
  auto tab = read_hypnodensity_csv(in);
  tab.hd.recording_id = id.empty() ? p.stem().string() : id;
  return tab.hd;
}

struct FeaturesArgs {
  std::vector<fs::path> hypnodensities;
  std::string id, hla;
  fs::path out;
};

int cmd_features(const FeaturesArgs& a) {
  std::vector<features::FeatureVector> rows;
  const auto hla = parse_hla(a.hla);
  for (const auto& p : a.hypnodensities) {
    const auto hd = read_hd(p, a.id);
    rows.push_back(features::assemble(hd, to_hypnogram(hd), hla));
  }
  auto out = open_out(a.out);
  features::write_csv(out, rows);
  info("features", "wrote " + std::to_string(rows.size()) + " feature vectors");
  return 0;
}

std::vector<features::FeatureVector> read_features(const fs::path& p) {
  auto in = open_in(p);
  return features::read_csv(in);
}

/// recording_id,label with label 1 (narcolepsy) or 0.
std::map<std::string, bool> read_truth(const fs::path& p) {
  auto in = open_in(p);
  std::map<std::string, bool> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("recording_id", 0) == 0)) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw Error(ErrorKind::InvalidArgument, p.string() + ": expected id,label");
    const auto v = line.substr(comma + 1);
    if (v != "0" && v != "1")
      throw Error(ErrorKind::InvalidArgument, p.string() + ":" + std::to_string(lineno) + ": label must be 0 or 1");
    out[line.substr(0, comma)] = v == "1";
  }
  if (out.empty()) throw Error(ErrorKind::EmptyFile, p.string() + " has no labels");
  return out;
}

struct FitGpArgs {
  std::vector<fs::path> features;
  fs::path labels, out;
  std::size_t target = dx::constants::kTargetFeatures;
  int folds = dx::constants::kFolds;
  double cutoff = dx::constants::kSelectionCutoff;
  bool no_rfe = false;
  std::uint64_t seed = 1;
  int jobs = 1;
};

/// One classifier per feature CSV (one CSV per sleep model).
int cmd_fit_gp(const FitGpArgs& a) {
  const auto truth = read_truth(a.labels);
  pipeline::ClassifierBundle bundle;
  bundle.classifiers.resize(a.features.size());
  pipeline::parallel_for(a.features.size(), a.jobs, [&](std::size_t k) {
    const auto rows = read_features(a.features[k]);
    dx::Matrix X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(features::constants::kNumFeatures));
    std::vector<int> y;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto it = truth.find(rows[i].recording_id);
      if (it == truth.end()) throw Error(ErrorKind::InvalidArgument, "no label for " + rows[i].recording_id);
      y.push_back(it->second ? 1 : -1);
      for (std::size_t j = 0; j < rows[i].values.size(); ++j)
        X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i].values[j];
    }
    dx::ClassifierOptions opt;
    opt.use_rfe = !a.no_rfe;
    opt.rfe.target = a.target;
    opt.rfe.folds = a.folds;
    opt.rfe.cutoff = a.cutoff;
    opt.rfe.seed = a.seed + k;
    bundle.classifiers[k] = dx::train_classifier(X, y, opt);
  });
  for (std::size_t k = 0; k < bundle.classifiers.size(); ++k)
    info("fit-gp", "classifier " + std::to_string(k) + ": " + std::to_string(bundle.classifiers[k].features.size()) +
                       " features selected");
  pipeline::save_bundle(bundle, a.out);
  std::cout << (a.out / "gp_bundle.json").string() << '\n';
  return 0;
}

struct DiagnoseArgs {
  fs::path features, bundle, out;
  std::string hla;
  double threshold = dx::constants::kThreshold;
  double hla_threshold = dx::constants::kHlaThreshold;
};

/// Rows sharing a recording id are that recording's per-model vectors and
/// are scored by the matching bundle entries.
int cmd_diagnose(const DiagnoseArgs& a) {
  const auto rows = read_features(a.features);
  const auto bundle = pipeline::load_bundle(a.bundle);
  const auto hla_flag = parse_hla(a.hla);
  std::vector<std::string> order;
  std::map<std::string, std::vector<const features::FeatureVector*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.recording_id)) order.push_back(r.recording_id);
    groups[r.recording_id].push_back(&r);
  }
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& id : order) {
    const auto& g = groups[id];
    std::vector<double> scores;
    for (std::size_t k = 0; k < g.size(); ++k)
      scores.push_back(dx::predict(bundle.classifiers[k % bundle.classifiers.size()], g[k]->values).score);
    auto rep = dx::ensemble_diagnose(scores, a.threshold);
    rep.recording_id = id;
    const auto hla = hla_flag ? hla_flag : g.front()->hla_positive;
    if (hla) rep = dx::apply_hla(rep, *hla, a.hla_threshold);
    out.push_back(dx::to_json(rep));
    info("diagnose", id + ": score " + std::to_string(rep.score) + (rep.label ? " positive" : " negative"));
  }
  write_text(a.out, out.dump(2) + "\n");
  return 0;
}

struct EvaluateArgs {
  fs::path reports, labels, out;
  std::optional<fs::path> roc;
  double threshold = dx::constants::kThreshold;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const auto truth = read_truth(a.labels);
  const auto j = read_json(a.reports);
  std::vector<double> scores;
  std::vector<char> t;
  try {
    for (const auto& r : j.is_array() ? j : nlohmann::json::array({j})) {
      const auto id = r.at("recording_id").get<std::string>();
      const auto it = truth.find(id);
      if (it == truth.end()) throw Error(ErrorKind::InvalidArgument, "no label for " + id);
      scores.push_back(r.at("score").get<double>());
      t.push_back(it->second);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, a.reports.string() + ": " + e.what());
  }
  std::unique_ptr<bool[]> truth_flags(new bool[t.size()]);
  for (std::size_t i = 0; i < t.size(); ++i) truth_flags[i] = t[i];
  const auto e = dx::evaluate(scores, std::span<const bool>(truth_flags.get(), t.size()), a.threshold);
  write_text(a.out, dx::to_json(e).dump(2) + "\n");
  if (a.roc) {
    auto out = open_out(*a.roc);
    dx::write_roc_csv(out, e);
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "AUC %.4f, sensitivity %.4f, specificity %.4f", e.auc, e.sensitivity, e.specificity);
  info("evaluate", buf);
  return 0;
}

// ---------------------------------------------------------------------------
// plot

int cmd_plot(const fs::path& in_path, const fs::path& out_path) {
  const auto hd = read_hd(in_path, "");
  write_text(out_path, plot::hypnodensity_svg(hd));
  return 0;
}

// ---------------------------------------------------------------------------
// run-all

struct RunAllFlags {
  std::optional<fs::path> config;
  std::optional<std::string> recording, out_dir, models, classifier, central_ref, occipital_ref, encoding, hla;
  std::optional<double> threshold, hla_threshold, resolution_s;
  std::optional<std::uint64_t> seed;
};

int cmd_run_all(const RunAllFlags& f, std::optional<int> jobs) {
  pipeline::PipelineConfig c;
  if (f.config) c = pipeline::pipeline_config_from_json(read_json(*f.config), f.config->parent_path());
  if (f.recording) c.recording = *f.recording;
  if (f.out_dir) c.out_dir = *f.out_dir;
  if (f.models) c.models = *f.models;
  if (f.classifier) c.classifier = *f.classifier;
  if (f.central_ref) c.central_reference = fs::path(*f.central_ref);
  if (f.occipital_ref) c.occipital_reference = fs::path(*f.occipital_ref);
  if (f.encoding) c.encoding = parse_encoding_mode(*f.encoding);
  if (f.hla) c.hla = parse_hla(*f.hla);
  if (f.threshold) c.threshold = *f.threshold;
  if (f.hla_threshold) c.hla_threshold = *f.hla_threshold;
  if (f.resolution_s) c.resolution_s = *f.resolution_s;
  if (f.seed) c.seed = *f.seed;
  if (jobs) c.jobs = *jobs;
  c.validate();

  // load every input before doing any work so bad paths fail fast
  const auto ensemble = pipeline::load_ensemble(c.models);
  const auto bundle = pipeline::load_bundle(c.classifier);
  const auto pre = run_preprocess(c.recording, c.central_reference, c.occipital_reference);
  const auto enc = encode_recording(pre.recording, c.encoding);
  info("encode", "encoded " + enc.recording_id + " (" + to_string(enc.mode) + ")");
  const auto native = pipeline::score(enc, ensemble, c.jobs);
  info("score", "scored with " + std::to_string(ensemble.members.size()) + " models");
  const auto shown = rescale(native, c.resolution_s);

  fs::create_directories(c.out_dir);
  {
    auto out = open_out(c.out_dir / "hypnodensity.csv");
    write_hypnodensity_csv(out, shown.ensemble.mean, &shown.ensemble.variance);
  }
  write_text(c.out_dir / "hypnodensity.svg", plot::hypnodensity_svg(shown.ensemble.mean));

  std::vector<features::FeatureVector> rows;
  for (const auto& hd : native.per_model) rows.push_back(features::assemble(hd, to_hypnogram(hd), c.hla));
  {
    auto out = open_out(c.out_dir / "features.csv");
    features::write_csv(out, rows);
  }
  info("features", "assembled " + std::to_string(rows.size()) + " feature vectors");

  const auto rep = pipeline::diagnose(native.per_model, bundle, c.hla, c.threshold, c.hla_threshold);
  write_text(c.out_dir / "report.json", dx::to_json(rep).dump(2) + "\n");
  info("diagnose", "score " + std::to_string(rep.score) + (rep.label ? " positive" : " negative"));
  std::cout << (c.out_dir / "report.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hypnodensity sleep staging and narcolepsy diagnosis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "hypnodx 1.0.0");
  int jobs = 1;
  app.add_option("--jobs,-j", jobs, "Worker threads for per-model and per-recording work")
      ->check(CLI::PositiveNumber);
  app.add_flag("--quiet,-q", g_quiet, "Only log warnings and errors");

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Write a synthetic recording (and optionally its hypnogram)");
  s_synth->add_option("--out,-o", synth.out, "Output directory")->required();
  s_synth->add_option("--id", synth.id, "Recording id");
  s_synth->add_option("--seed", synth.seed, "Noise seed");
  s_synth->add_option("--duration", synth.duration_s, "Duration in seconds")->check(CLI::PositiveNumber);
  s_synth->add_option("--fs", synth.fs, "Sampling rate in Hz")->check(CLI::PositiveNumber);
  s_synth->add_option("--stage", synth.stage, "wake, sleep or mixed (alternating blocks)");
  s_synth->add_option("--block", synth.block_s, "Block length in seconds for --stage mixed");
  s_synth->add_option("--hypnogram", synth.hypnogram, "Also write the matching hypnogram (W/N2 epochs)");

  FitReferenceArgs fitref;
  auto* s_fitref = app.add_subcommand("fit-reference", "Fit an EEG reference distribution from preprocessed recordings");
  s_fitref->add_option("--recording,-r", fitref.recordings, "Preprocessed recording manifest(s)")->required();
  s_fitref->add_option("--site", fitref.site, "central or occipital");
  s_fitref->add_option("--out,-o", fitref.out, "Output JSON")->required();

  PreprocessArgs prep;
  auto* s_prep = app.add_subcommand("preprocess", "Band-limit, resample to 100 Hz and select EEG channels");
  s_prep->add_option("--in,-i", prep.in, "Recording manifest")->required();
  s_prep->add_option("--out,-o", prep.out, "Output directory")->required();
  s_prep->add_option("--central-ref", prep.central_ref, "Central reference distribution JSON");
  s_prep->add_option("--occipital-ref", prep.occipital_ref, "Occipital reference distribution JSON");

  EncodeArgs encode;
  auto* s_enc = app.add_subcommand("encode", "Encode a preprocessed recording (cc or octave)");
  s_enc->add_option("--in,-i", encode.in, "Preprocessed recording manifest")->required();
  s_enc->add_option("--out,-o", encode.out, "Output directory")->required();
  s_enc->add_option("--mode", encode.mode, "cc or octave");

  TrainArgs train;
  auto* s_train = app.add_subcommand("train", "Train a network ensemble on encoded recordings");
  s_train->add_option("--encoded,-e", train.encoded, "Encoded recording manifest (repeat)")->required();
  s_train->add_option("--hypnogram,-y", train.hypnograms, "Matching hypnogram (repeat, same order)")->required();
  s_train->add_option("--out,-o", train.out, "Output directory for ensemble.json")->required();
  s_train->add_option("--network-config", train.network_config, "Network config JSON");
  s_train->add_option("--mode", train.mode, "FF or LSTM");
  s_train->add_option("--segment", train.segment_s, "Network segment length in seconds (5 or 15)");
  s_train->add_option("--max-epochs", train.max_epochs, "Epoch cap");
  s_train->add_option("--patience", train.patience, "Early stopping patience (validations)");
  s_train->add_option("--ensemble,-n", train.ensemble, "Ensemble size")->check(CLI::PositiveNumber);
  s_train->add_option("--seed", train.seed, "Seed");

  ScoreArgs score;
  auto* s_score = app.add_subcommand("score", "Score an encoded recording into an ensemble hypnodensity CSV");
  s_score->add_option("--encoded,-e", score.encoded, "Encoded recording manifest")->required();
  s_score->add_option("--models,-m", score.models, "ensemble.json")->required();
  s_score->add_option("--out,-o", score.out, "Output CSV")->required();
  s_score->add_option("--per-model-dir", score.per_model_dir, "Also write one CSV per model here");
  s_score->add_option("--resolution", score.resolution_s, "Aggregate to this resolution in seconds");

  FeaturesArgs feats;
  auto* s_feat = app.add_subcommand("features", "Build 481-value feature vectors from hypnodensity CSVs");
  s_feat->add_option("--hypnodensity,-d", feats.hypnodensities, "Hypnodensity CSV (repeat)")->required();
  s_feat->add_option("--id", feats.id, "Recording id (default: file stem)");
  s_feat->add_option("--hla", feats.hla, "positive or negative");
  s_feat->add_option("--out,-o", feats.out, "Output CSV")->required();

  FitGpArgs fitgp;
  auto* s_fitgp = app.add_subcommand("fit-gp", "Train the narcolepsy classifier bundle");
  s_fitgp->add_option("--features,-f", fitgp.features, "Feature CSV, one per sleep model (repeat)")->required();
  s_fitgp->add_option("--labels,-l", fitgp.labels, "CSV of recording_id,label (1 = narcolepsy)")->required();
  s_fitgp->add_option("--out,-o", fitgp.out, "Output directory for gp_bundle.json")->required();
  s_fitgp->add_option("--target", fitgp.target, "Features kept per RFE fold");
  s_fitgp->add_option("--folds", fitgp.folds, "RFE folds");
  s_fitgp->add_option("--cutoff", fitgp.cutoff, "Selection frequency cutoff");
  s_fitgp->add_flag("--no-rfe", fitgp.no_rfe, "Use every feature");
  s_fitgp->add_option("--seed", fitgp.seed, "Seed");

  DiagnoseArgs diag;
  auto* s_diag = app.add_subcommand("diagnose", "Score feature vectors with a classifier bundle");
  s_diag->add_option("--features,-f", diag.features, "Feature CSV")->required();
  s_diag->add_option("--bundle,-b", diag.bundle, "gp_bundle.json")->required();
  s_diag->add_option("--hla", diag.hla, "positive or negative (overrides the CSV column)");
  s_diag->add_option("--threshold", diag.threshold, "Decision threshold without HLA");
  s_diag->add_option("--hla-threshold", diag.hla_threshold, "Decision threshold for HLA-positive subjects");
  s_diag->add_option("--out,-o", diag.out, "Output JSON")->required();

  EvaluateArgs eval;
  auto* s_eval = app.add_subcommand("evaluate", "ROC statistics for diagnosis reports");
  s_eval->add_option("--reports,-r", eval.reports, "Diagnosis report JSON")->required();
  s_eval->add_option("--labels,-l", eval.labels, "CSV of recording_id,label")->required();
  s_eval->add_option("--threshold", eval.threshold, "Operating threshold");
  s_eval->add_option("--roc", eval.roc, "Also write the ROC curve CSV");
  s_eval->add_option("--out,-o", eval.out, "Output JSON")->required();

  fs::path plot_in, plot_out;
  auto* s_plot = app.add_subcommand("plot", "Render a hypnodensity CSV as a stacked-area SVG");
  s_plot->add_option("--in,-i", plot_in, "Hypnodensity CSV")->required();
  s_plot->add_option("--out,-o", plot_out, "Output SVG")->required();

  RunAllFlags run;
  auto* s_run = app.add_subcommand("run-all", "preprocess, encode, score, features and diagnose in one go");
  s_run->add_option("--config,-c", run.config, "Pipeline config JSON (flags override it)");
  s_run->add_option("--recording", run.recording, "Recording manifest");
  s_run->add_option("--out,-o", run.out_dir, "Output directory");
  s_run->add_option("--models,-m", run.models, "ensemble.json");
  s_run->add_option("--classifier,-b", run.classifier, "gp_bundle.json");
  s_run->add_option("--central-ref", run.central_ref, "Central reference distribution JSON");
  s_run->add_option("--occipital-ref", run.occipital_ref, "Occipital reference distribution JSON");
  s_run->add_option("--encoding", run.encoding, "cc or octave");
  s_run->add_option("--hla", run.hla, "positive or negative");
  s_run->add_option("--threshold", run.threshold, "Decision threshold without HLA");
  s_run->add_option("--hla-threshold", run.hla_threshold, "Decision threshold for HLA-positive subjects");
  s_run->add_option("--resolution", run.resolution_s, "Output hypnodensity resolution in seconds");
  s_run->add_option("--seed", run.seed, "Seed recorded with the run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 3;
  }

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (s_synth->parsed()) return cmd_synth(synth);
    if (s_fitref->parsed()) return cmd_fit_reference(fitref);
    if (s_prep->parsed()) return cmd_preprocess(prep);
    if (s_enc->parsed()) return cmd_encode(encode);
    if (s_train->parsed()) {
      train.jobs = jobs;
      return cmd_train(train);
    }
    if (s_score->parsed()) {
      score.jobs = jobs;
      return cmd_score(score);
    }
    if (s_feat->parsed()) return cmd_features(feats);
    if (s_fitgp->parsed()) {
      fitgp.jobs = jobs;
      return cmd_fit_gp(fitgp);
    }
    if (s_diag->parsed()) return cmd_diagnose(diag);
    if (s_eval->parsed()) return cmd_evaluate(eval);
    if (s_plot->parsed()) return cmd_plot(plot_in, plot_out);
    if (s_run->parsed()) {
      std::optional<int> j;
      if (app.count("--jobs")) j = jobs;
      return cmd_run_all(run, j);
    }
  } catch (const Error& e) {
    log("error", stage, e.what());
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    log("error", stage, e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    log("error", stage, e.what());
    return 3;
  } catch (const std::exception& e) {
    log("error", stage, std::string("internal: ") + e.what());
    return 4;
  }
  return 0;
}
