#pragma once

// End-to-end glue: network ensembles, ensemble scoring of an encoded
// recording, per-model diagnosis, and the run configuration.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hypnodx/diagnosis.hpp"
#include "hypnodx/encoding.hpp"
#include "hypnodx/error.hpp"
#include "hypnodx/features.hpp"
#include "hypnodx/hypnodensity.hpp"
#include "hypnodx/neuralnet.hpp"

namespace hypnodx::pipeline {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// (by index) is rethrown after all workers finish.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Network ensembles: ensemble.json lists member manifests

struct Ensemble {
  std::vector<nn::Model> members;
};

inline void save_ensemble(const Ensemble& e, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["members"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < e.members.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "member_%02zu", k);
    nn::save_model(e.members[k], dir, name);
    j["members"].push_back(std::string(name) + ".json");
  }
  std::ofstream out(dir / "ensemble.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write ensemble manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

inline Ensemble load_ensemble(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + manifest.string());
  Ensemble e;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& m : j.at("members")) e.members.push_back(nn::load_model(manifest.parent_path() / m.get<std::string>()));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::CorruptHeader, manifest.string() + ": " + ex.what());
  }
  if (e.members.empty()) throw Error(ErrorKind::InvalidArgument, "ensemble has no members");
  return e;
}

struct ScoredRecording {
  std::vector<Hypnodensity> per_model;
  EnsembleHypnodensity ensemble;
};

/// Hypnodensity from every member (at its segment length) and their
/// mean/variance. Members must share the segment length.
inline ScoredRecording score(const EncodedRecording& enc, const Ensemble& e, int jobs = 1) {
  if (e.members.empty()) throw Error(ErrorKind::InvalidArgument, "ensemble has no members");
  const int seg = e.members.front().config.segment_s;
  for (const auto& m : e.members) {
    if (m.config.segment_s != seg) throw Error(ErrorKind::ShapeMismatch, "ensemble members differ in segment length");
    if (m.config.encoding != enc.mode)
      throw Error(ErrorKind::ShapeMismatch, "model expects " + to_string(m.config.encoding) + " encoding, got " +
                                                to_string(enc.mode));
  }
  const auto windows = nn::make_windows(enc, seg);
  if (windows.empty()) throw Error(ErrorKind::SignalTooShort, "recording shorter than one network window");
  ScoredRecording out;
  out.per_model.resize(e.members.size());
  parallel_for(e.members.size(), jobs, [&](std::size_t k) {
    Hypnodensity hd;
    hd.recording_id = enc.recording_id;
    hd.resolution_s = seg;
    for (const auto& p : nn::forward(e.members[k], windows)) hd.probs.push_back(p);
    out.per_model[k] = std::move(hd);
  });
  out.ensemble = ensemble_hypnodensity(out.per_model);
  return out;
}

// ---------------------------------------------------------------------------
// Classifier bundles: gp_bundle.json lists one classifier per sleep model

struct ClassifierBundle {
  std::vector<dx::Classifier> classifiers;
};

inline void save_bundle(const ClassifierBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["classifiers"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < b.classifiers.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "gp_%02zu", k);
    dx::save_classifier(b.classifiers[k], dir, name);
    j["classifiers"].push_back(std::string(name) + ".json");
  }
  std::ofstream out(dir / "gp_bundle.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write classifier bundle in " + dir.string());
  out << j.dump(2) << '\n';
}

inline ClassifierBundle load_bundle(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + manifest.string());
  ClassifierBundle b;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& m : j.at("classifiers"))
      b.classifiers.push_back(dx::load_classifier(manifest.parent_path() / m.get<std::string>()));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::CorruptHeader, manifest.string() + ": " + ex.what());
  }
  if (b.classifiers.empty()) throw Error(ErrorKind::InvalidArgument, "classifier bundle is empty");
  return b;
}

/// Features of each model's hypnodensity scored by the matching classifier
/// (bundle entries are reused cyclically when there are fewer of them).
inline dx::DiagnosisReport diagnose(const std::vector<Hypnodensity>& per_model, const ClassifierBundle& bundle,
                                    std::optional<bool> hla, double threshold = dx::constants::kThreshold,
                                    double hla_threshold = dx::constants::kHlaThreshold) {
  if (per_model.empty()) throw Error(ErrorKind::InvalidArgument, "no hypnodensities to diagnose");
  std::vector<double> scores;
  for (std::size_t k = 0; k < per_model.size(); ++k) {
    const auto fv = features::assemble(per_model[k], to_hypnogram(per_model[k]), hla);
    scores.push_back(dx::predict(bundle.classifiers[k % bundle.classifiers.size()], fv.values).score);
  }
  auto r = dx::ensemble_diagnose(scores, threshold);
  r.recording_id = per_model.front().recording_id;
  if (hla) r = dx::apply_hla(r, *hla, hla_threshold);
  return r;
}

// ---------------------------------------------------------------------------
// Run configuration (JSON, unknown keys rejected)

struct PipelineConfig {
  std::filesystem::path recording;
  std::filesystem::path out_dir;
  std::filesystem::path models;      // ensemble.json
  std::filesystem::path classifier;  // gp_bundle.json
  std::optional<std::filesystem::path> central_reference;
  std::optional<std::filesystem::path> occipital_reference;
  EncodingMode encoding = EncodingMode::cc;
  std::optional<bool> hla;
  double threshold = dx::constants::kThreshold;
  double hla_threshold = dx::constants::kHlaThreshold;
  double resolution_s = 0.0;  // 0 = native model resolution
  std::uint64_t seed = 1;
  int jobs = 1;

  void validate() const {
    if (recording.empty()) throw Error(ErrorKind::InvalidArgument, "config: recording is required");
    if (out_dir.empty()) throw Error(ErrorKind::InvalidArgument, "config: out_dir is required");
    if (models.empty()) throw Error(ErrorKind::InvalidArgument, "config: models is required");
    if (classifier.empty()) throw Error(ErrorKind::InvalidArgument, "config: classifier is required");
    if (resolution_s < 0.0) throw Error(ErrorKind::InvalidArgument, "config: resolution_s must be >= 0");
    if (jobs < 1) throw Error(ErrorKind::InvalidArgument, "config: jobs must be >= 1");
    if (!(threshold >= -1.0 && threshold <= 1.0 && hla_threshold >= -1.0 && hla_threshold <= 1.0))
      throw Error(ErrorKind::InvalidArgument, "config: thresholds must lie in [-1, 1]");
  }
};

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  static const std::vector<std::string> known = {"recording",          "out_dir",   "models",       "classifier",
                                                 "central_reference",  "occipital_reference", "encoding", "hla",
                                                 "threshold",          "hla_threshold", "resolution_s", "seed",
                                                 "jobs"};
  if (!j.is_object()) throw Error(ErrorKind::InvalidArgument, "config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw Error(ErrorKind::InvalidArgument, "unknown config key '" + k + "'");
  auto path = [&](const char* key) {
    std::filesystem::path p = j.at(key).get<std::string>();
    return p.is_relative() && !base.empty() ? base / p : p;
  };
  PipelineConfig c;
  try {
    if (j.contains("recording")) c.recording = path("recording");
    if (j.contains("out_dir")) c.out_dir = path("out_dir");
    if (j.contains("models")) c.models = path("models");
    if (j.contains("classifier")) c.classifier = path("classifier");
    if (j.contains("central_reference")) c.central_reference = path("central_reference");
    if (j.contains("occipital_reference")) c.occipital_reference = path("occipital_reference");
    if (j.contains("encoding")) c.encoding = parse_encoding_mode(j["encoding"].get<std::string>());
    if (j.contains("hla") && !j["hla"].is_null()) c.hla = j["hla"].get<bool>();
    if (j.contains("threshold")) c.threshold = j["threshold"].get<double>();
    if (j.contains("hla_threshold")) c.hla_threshold = j["hla_threshold"].get<double>();
    if (j.contains("resolution_s")) c.resolution_s = j["resolution_s"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("jobs")) c.jobs = j["jobs"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace hypnodx::pipeline
