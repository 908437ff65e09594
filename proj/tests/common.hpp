#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "hypnodx/encoding.hpp"
#include "hypnodx/hypnodensity.hpp"
#include "hypnodx/neuralnet.hpp"
#include "hypnodx/signal_io.hpp"

namespace testing_support {

using namespace hypnodx;

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto p = std::filesystem::temp_directory_path() / ("hypnodx_" + tag + "_" + std::to_string(rng() % 1000000000));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::vector<double> sine(double freq, double amp, double fs, std::size_t n, double phase = 0.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i)
    x[i] = amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / fs + phase);
  return x;
}

inline std::vector<double> white_noise(std::size_t n, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, sigma);
  std::vector<double> x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

/// RMS over [from, to).
inline double rms(const std::vector<double>& x, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(to - from));
}

/// Five-channel montage with EEG-, EOG- and EMG-like tones. `wake_like`
/// selects a wake-like (10 Hz dominant) or sleep-like (2 Hz dominant) EEG.
inline SynthSpec montage_spec(bool wake_like, double fs = 100.0) {
  SynthSpec s;
  const double eeg_f = wake_like ? 10.0 : 2.0;
  s[ChannelRole::EEG_C_LEFT] = {fs, {{eeg_f, 30.0, 0.0}, {6.0, 8.0, 0.3}}, 5.0};
  s[ChannelRole::EEG_O_LEFT] = {fs, {{eeg_f, 25.0, 0.7}, {5.0, 6.0, 0.1}}, 5.0};
  s[ChannelRole::EOG_L] = {fs, {{wake_like ? 0.8 : 0.3, 40.0, 0.0}}, 4.0};
  s[ChannelRole::EOG_R] = {fs, {{wake_like ? 0.8 : 0.3, 40.0, std::numbers::pi}}, 4.0};
  s[ChannelRole::EMG_CHIN] = {fs, {{wake_like ? 30.0 : 20.0, wake_like ? 20.0 : 4.0, 0.0}}, wake_like ? 8.0 : 2.0};
  return s;
}

/// Random row-stochastic hypnodensity (Dirichlet-like rows via exponentials),
/// with slowly drifting dominance so that runs and peaks exist.
inline Hypnodensity random_hypnodensity(std::size_t rows, double resolution_s, std::uint64_t seed,
                                        double concentration = 4.0) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> ex(1.0);
  std::uniform_int_distribution<int> stage(0, 4);
  std::uniform_int_distribution<int> dwell(10, 120);
  Hypnodensity hd;
  hd.resolution_s = resolution_s;
  hd.recording_id = "rand" + std::to_string(seed);
  int current = stage(rng), left = dwell(rng);
  for (std::size_t t = 0; t < rows; ++t) {
    if (--left <= 0) {
      current = stage(rng);
      left = dwell(rng);
    }
    StageProbs p{};
    double s = 0.0;
    for (std::size_t k = 0; k < kNumStages; ++k) {
      p[k] = ex(rng) + (static_cast<int>(k) == current ? concentration : 0.0);
      s += p[k];
    }
    for (auto& v : p) v /= s;
    hd.probs.push_back(p);
  }
  return hd;
}

inline HypnogramLabels labels(std::initializer_list<std::pair<Stage, std::size_t>> runs, double epoch_s = 30.0) {
  HypnogramLabels h;
  h.epoch_s = epoch_s;
  for (const auto& [s, n] : runs) h.stages.insert(h.stages.end(), n, s);
  return h;
}

/// Synthetic encodable dataset for the stage network: each recording holds a
/// single class (W-like or N2-like signals) so classes are separable.
inline nn::RecordingData make_class_recording(bool wake_like, std::uint64_t seed, double duration_s,
                                              EncodingMode mode, int segment_s) {
  auto psg = synth_recording(montage_spec(wake_like), seed, duration_s, wake_like ? "wake" : "sleep");
  const auto enc = encode_recording(psg, mode);
  nn::RecordingData r;
  r.windows = nn::make_windows(enc, segment_s);
  r.labels.assign(r.windows.size(), wake_like ? 0 : 2);
  return r;
}

/// Both classes inside one recording: windows from a wake-like and a
/// sleep-like recording interleaved in 30 s runs, so every 5-minute training
/// block (and therefore the validation split) holds both classes.
inline nn::RecordingData make_mixed_recording(std::uint64_t seed, double duration_s, EncodingMode mode,
                                              int segment_s) {
  const auto a = make_class_recording(true, seed, duration_s, mode, segment_s);
  const auto b = make_class_recording(false, seed + 1, duration_s, mode, segment_s);
  const auto run = static_cast<std::size_t>(30 / segment_s);
  nn::RecordingData r;
  for (std::size_t t = 0; t < std::min(a.windows.size(), b.windows.size()); ++t) {
    const auto& src = (t / run) % 2 == 0 ? a : b;
    r.windows.push_back(src.windows[t]);
    r.labels.push_back(src.labels[t]);
  }
  return r;
}

/// Small hand-built window: every modality holds `rows` rows of noise with a
/// class-dependent offset (+0.5 for class 0, -0.5 otherwise).
inline nn::Window toy_window(std::mt19937_64& rng, int cls, std::size_t rows = 2, std::size_t len = 24,
                             double noise = 0.5) {
  std::normal_distribution<double> d(0.0, noise);
  const double offset = cls == 0 ? 0.5 : -0.5;
  nn::Window w;
  const std::array<std::size_t, 3> channels = {2, 3, 1};
  for (std::size_t m = 0; m < 3; ++m) {
    auto& in = w.inputs[m];
    in.rows = rows;
    in.channels = channels[m];
    in.length = len;
    in.data.resize(rows * channels[m] * len);
    for (auto& v : in.data) v = static_cast<float>(offset + d(rng));
  }
  return w;
}

/// Two-class toy dataset of `recordings` recordings; recording k holds class k % 2.
inline std::vector<nn::RecordingData> toy_dataset(std::uint64_t seed, int recordings, std::size_t windows_each,
                                                  std::size_t rows = 2, std::size_t len = 24) {
  std::mt19937_64 rng(seed);
  std::vector<nn::RecordingData> out(static_cast<std::size_t>(recordings));
  for (int k = 0; k < recordings; ++k)
    for (std::size_t t = 0; t < windows_each; ++t) {
      out[static_cast<std::size_t>(k)].windows.push_back(toy_window(rng, k % 2, rows, len));
      out[static_cast<std::size_t>(k)].labels.push_back(k % 2 == 0 ? 0 : 2);
    }
  return out;
}

/// Runs a shell command, returning its exit status.
inline int run(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace testing_support
