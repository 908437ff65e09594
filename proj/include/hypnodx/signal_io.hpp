#pragma once

// Recording and hypnogram containers, their on-disk formats, and the
// deterministic synthetic-recording generator used throughout the tests.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hypnodx/error.hpp"

namespace hypnodx {

static_assert(std::endian::native == std::endian::little,
              "f32le blobs are read and written with native byte order");

// ---------------------------------------------------------------------------
// Sleep stages

enum class Stage : std::uint8_t { W = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4, UNSCORED = 5 };

inline constexpr std::size_t kNumStages = 5;
inline constexpr std::array<Stage, kNumStages> kStages = {Stage::W, Stage::N1, Stage::N2,
                                                          Stage::N3, Stage::REM};
inline constexpr std::array<const char*, kNumStages> kStageNames = {"W", "N1", "N2", "N3", "REM"};

inline std::size_t index(Stage s) { return static_cast<std::size_t>(s); }
inline bool is_scored(Stage s) { return s != Stage::UNSCORED; }

inline std::string to_string(Stage s) {
  return is_scored(s) ? kStageNames[index(s)] : "UNSCORED";
}

/// Unknown tokens map to UNSCORED.
inline Stage parse_stage(std::string_view token) {
  for (std::size_t i = 0; i < kNumStages; ++i)
    if (token == kStageNames[i]) return kStages[i];
  return Stage::UNSCORED;
}

struct HypnogramLabels {
  std::vector<Stage> stages;
  double epoch_s = 30.0;

  std::size_t size() const { return stages.size(); }
  double duration_min() const { return static_cast<double>(stages.size()) * epoch_s / 60.0; }
};

inline bool valid_epoch_length(double epoch_s) {
  return epoch_s == 5.0 || epoch_s == 10.0 || epoch_s == 15.0 || epoch_s == 30.0;
}

// ---------------------------------------------------------------------------
// Channels and recordings

enum class ChannelRole : std::uint8_t {
  EEG_C_LEFT,
  EEG_C_RIGHT,
  EEG_O_LEFT,
  EEG_O_RIGHT,
  EOG_L,
  EOG_R,
  EMG_CHIN,
};

inline constexpr std::array<ChannelRole, 7> kAllRoles = {
    ChannelRole::EEG_C_LEFT, ChannelRole::EEG_C_RIGHT, ChannelRole::EEG_O_LEFT,
    ChannelRole::EEG_O_RIGHT, ChannelRole::EOG_L,      ChannelRole::EOG_R,
    ChannelRole::EMG_CHIN};

inline std::string to_string(ChannelRole r) {
  switch (r) {
    case ChannelRole::EEG_C_LEFT: return "EEG_C_LEFT";
    case ChannelRole::EEG_C_RIGHT: return "EEG_C_RIGHT";
    case ChannelRole::EEG_O_LEFT: return "EEG_O_LEFT";
    case ChannelRole::EEG_O_RIGHT: return "EEG_O_RIGHT";
    case ChannelRole::EOG_L: return "EOG_L";
    case ChannelRole::EOG_R: return "EOG_R";
    case ChannelRole::EMG_CHIN: return "EMG_CHIN";
  }
  return "?";
}

inline std::optional<ChannelRole> parse_role(std::string_view s) {
  for (auto r : kAllRoles)
    if (s == to_string(r)) return r;
  return std::nullopt;
}

inline bool is_central_eeg(ChannelRole r) {
  return r == ChannelRole::EEG_C_LEFT || r == ChannelRole::EEG_C_RIGHT;
}
inline bool is_occipital_eeg(ChannelRole r) {
  return r == ChannelRole::EEG_O_LEFT || r == ChannelRole::EEG_O_RIGHT;
}

/// Samples are kept in single precision, the storage precision of the
/// recording format, so save/load is lossless.
struct Channel {
  std::vector<float> samples;  // microvolts
  double fs = 0.0;             // Hz
};

struct PolySignalSet {
  std::map<ChannelRole, Channel> channels;
  double duration_s = 0.0;
  std::string recording_id;

  bool has(ChannelRole r) const { return channels.count(r) != 0; }

  const Channel& at(ChannelRole r) const {
    auto it = channels.find(r);
    if (it == channels.end()) throw Error(ErrorKind::MissingChannel, to_string(r));
    return it->second;
  }
};

inline std::size_t expected_length(double fs, double duration_s) {
  return static_cast<std::size_t>(std::llround(fs * duration_s));
}

/// Checks the per-channel invariants (fs > 0, length within one sample of
/// fs * duration).
inline void validate(const PolySignalSet& psg) {
  if (!(psg.duration_s > 0.0))
    throw Error(ErrorKind::InvalidArgument, "duration_s must be positive");
  for (const auto& [role, ch] : psg.channels) {
    if (!(ch.fs > 0.0)) throw Error(ErrorKind::InvalidArgument, to_string(role) + ": fs must be > 0");
    const auto want = static_cast<long long>(expected_length(ch.fs, psg.duration_s));
    const auto have = static_cast<long long>(ch.samples.size());
    if (std::llabs(want - have) > 1)
      throw Error(ErrorKind::LengthMismatch, to_string(role) + ": expected " + std::to_string(want) +
                                                 " samples, found " + std::to_string(have));
  }
}

/// Full-pipeline montage: one central EEG candidate, both EOGs and chin EMG.
inline void require_full_montage(const PolySignalSet& psg) {
  if (!psg.has(ChannelRole::EEG_C_LEFT) && !psg.has(ChannelRole::EEG_C_RIGHT))
    throw Error(ErrorKind::MissingChannel, "EEG_C_LEFT|EEG_C_RIGHT");
  for (auto r : {ChannelRole::EOG_L, ChannelRole::EOG_R, ChannelRole::EMG_CHIN})
    if (!psg.has(r)) throw Error(ErrorKind::MissingChannel, to_string(r));
}

// ---------------------------------------------------------------------------
// f32le blobs

inline void write_f32le(const std::filesystem::path& path, const std::vector<float>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

inline std::vector<float> read_f32le(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(float) != 0)
    throw Error(ErrorKind::LengthMismatch, path.string() + ": size is not a multiple of 4 bytes");
  std::vector<float> data(bytes / sizeof(float));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw Error(ErrorKind::Io, "read failed: " + path.string());
  return data;
}

inline std::vector<float> to_float(const std::vector<double>& x) {
  return {x.begin(), x.end()};
}
inline std::vector<double> to_double(const std::vector<float>& x) {
  return {x.begin(), x.end()};
}

// ---------------------------------------------------------------------------
// Recording format: <id>.psgmeta.json + <id>.<ROLE>.f32le

inline std::filesystem::path meta_path(const std::filesystem::path& dir, const std::string& id) {
  return dir / (id + ".psgmeta.json");
}

/// Writes the header and one blob per channel into `dir`; returns the header path.
inline std::filesystem::path save_recording(const PolySignalSet& psg, const std::filesystem::path& dir) {
  validate(psg);
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["recording_id"] = psg.recording_id;
  meta["duration_s"] = psg.duration_s;
  meta["channels"] = nlohmann::ordered_json::array();
  for (const auto& [role, ch] : psg.channels) {
    const std::string file = psg.recording_id + "." + to_string(role) + ".f32le";
    write_f32le(dir / file, ch.samples);
    nlohmann::ordered_json c;
    c["role"] = to_string(role);
    c["fs"] = ch.fs;
    c["n_samples"] = ch.samples.size();
    c["file"] = file;
    meta["channels"].push_back(c);
  }
  const auto path = meta_path(dir, psg.recording_id);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << meta.dump(2) << '\n';
  return path;
}

/// Loads a recording header and its blobs. With `require_full` the montage
/// needed by the full pipeline must be present.
inline PolySignalSet load_recording(const std::filesystem::path& path, bool require_full = true) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, path.string() + ": " + e.what());
  }

  PolySignalSet psg;
  try {
    psg.recording_id = meta.at("recording_id").get<std::string>();
    psg.duration_s = meta.at("duration_s").get<double>();
    for (const auto& c : meta.at("channels")) {
      const auto role_name = c.at("role").get<std::string>();
      const auto role = parse_role(role_name);
      if (!role) throw Error(ErrorKind::CorruptHeader, "unknown channel role " + role_name);
      if (psg.has(*role)) throw Error(ErrorKind::CorruptHeader, "duplicate channel " + role_name);
      Channel ch;
      ch.fs = c.at("fs").get<double>();
      const auto n = c.at("n_samples").get<std::size_t>();
      ch.samples = read_f32le(path.parent_path() / c.at("file").get<std::string>());
      if (ch.samples.size() != n)
        throw Error(ErrorKind::LengthMismatch, role_name + ": header declares " + std::to_string(n) +
                                                   " samples, blob holds " +
                                                   std::to_string(ch.samples.size()));
      psg.channels.emplace(*role, std::move(ch));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, path.string() + ": " + e.what());
  }
  validate(psg);
  if (require_full) require_full_montage(psg);
  return psg;
}

// ---------------------------------------------------------------------------
// Hypnogram text format: "epoch_s=<int>" then one stage token per line.

inline HypnogramLabels parse_hypnogram(std::istream& in) {
  HypnogramLabels h;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
      line.pop_back();
    if (line.empty()) continue;
    if (first && line.rfind("epoch_s=", 0) == 0) {
      try {
        h.epoch_s = std::stod(line.substr(8));
      } catch (const std::exception&) {
        throw Error(ErrorKind::CorruptHeader, "bad epoch_s line: " + line);
      }
      if (!valid_epoch_length(h.epoch_s))
        throw Error(ErrorKind::CorruptHeader, "epoch_s must be one of 5, 10, 15, 30");
      first = false;
      continue;
    }
    first = false;
    h.stages.push_back(parse_stage(line));
  }
  if (h.stages.empty()) throw Error(ErrorKind::EmptyFile, "hypnogram has no epochs");
  return h;
}

inline HypnogramLabels load_hypnogram(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return parse_hypnogram(in);
}

inline void save_hypnogram(const HypnogramLabels& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "epoch_s=" << static_cast<int>(h.epoch_s) << '\n';
  for (auto s : h.stages) out << to_string(s) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic recordings

struct Tone {
  double freq_hz = 0.0;
  double amplitude_uv = 0.0;
  double phase_rad = 0.0;
};

struct ChannelSynth {
  double fs = 100.0;
  std::vector<Tone> tones;
  double noise_sigma = 0.0;
};

using SynthSpec = std::map<ChannelRole, ChannelSynth>;

/// Sum of sinusoids plus white Gaussian noise per channel. A pure function of
/// (spec, seed, duration): each channel draws from its own engine seeded by
/// (seed, role).
inline PolySignalSet synth_recording(const SynthSpec& spec, std::uint64_t seed, double duration_s,
                                     std::string recording_id = "synthetic") {
  if (!(duration_s > 0.0)) throw Error(ErrorKind::InvalidSpec, "duration_s must be positive");
  PolySignalSet psg;
  psg.duration_s = duration_s;
  psg.recording_id = std::move(recording_id);
  for (const auto& [role, cs] : spec) {
    if (!(cs.fs > 0.0)) throw Error(ErrorKind::InvalidSpec, to_string(role) + ": fs must be > 0");
    if (cs.noise_sigma < 0.0) throw Error(ErrorKind::InvalidSpec, to_string(role) + ": negative sigma");
    for (const auto& t : cs.tones)
      if (t.amplitude_uv < 0.0)
        throw Error(ErrorKind::InvalidSpec, to_string(role) + ": negative amplitude");

    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(role)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> noise(0.0, 1.0);

    const std::size_t n = expected_length(cs.fs, duration_s);
    Channel ch;
    ch.fs = cs.fs;
    ch.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / cs.fs;
      double v = 0.0;
      for (const auto& tone : cs.tones)
        v += tone.amplitude_uv * std::sin(2.0 * std::numbers::pi * tone.freq_hz * t + tone.phase_rad);
      if (cs.noise_sigma > 0.0) v += cs.noise_sigma * noise(rng);
      ch.samples[i] = static_cast<float>(v);
    }
    psg.channels.emplace(role, std::move(ch));
  }
  return psg;
}

}  // namespace hypnodx
