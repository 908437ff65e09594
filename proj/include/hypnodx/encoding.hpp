#pragma once

// Octave and cross-correlation encodings of preprocessed (100 Hz) channels.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypnodx/dsp.hpp"
#include "hypnodx/error.hpp"
#include "hypnodx/preprocess.hpp"
#include "hypnodx/signal_io.hpp"

namespace hypnodx {

namespace constants {
inline constexpr std::array<double, 5> kOctaveCutoffsHz = {49.0, 25.0, 12.5, 6.25, 3.125};
inline constexpr double kScalingSegmentMin = 90.0;
inline constexpr double kPercentile = 95.0;
inline constexpr int kModeBins = 64;
inline constexpr double kGridHopS = 0.25;
}  // namespace constants

// ---------------------------------------------------------------------------
// Scaling

/// Linear-interpolated percentile (q in [0, 100]) of |x|.
inline double abs_percentile(std::span<const double> x, double q) {
  if (x.empty()) throw Error(ErrorKind::EmptySignal, "percentile of empty signal");
  std::vector<double> a(x.size());
  std::transform(x.begin(), x.end(), a.begin(), [](double v) { return std::abs(v); });
  const double pos = q / 100.0 * static_cast<double>(a.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(lo), a.end());
  const double v_lo = a[lo];
  if (frac == 0.0 || lo + 1 >= a.size()) return v_lo;
  const double v_hi = *std::min_element(a.begin() + static_cast<std::ptrdiff_t>(lo) + 1, a.end());
  return v_lo + frac * (v_hi - v_lo);
}

/// Histogram mode of a set of values: 64 bins over [min, max], ties to the
/// lower bin, result is the mean of the members of the winning bin.
inline double histogram_mode(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorKind::EmptySignal, "mode of empty set");
  const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mx == mn) return mn;
  const int bins = constants::kModeBins;
  auto bin_of = [&](double v) {
    return std::min(bins - 1, static_cast<int>(std::floor((v - mn) / (mx - mn) * bins)));
  };
  std::vector<int> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) ++counts[static_cast<std::size_t>(bin_of(v))];
  const int best = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  double sum = 0.0;
  int n = 0;
  for (double v : values)
    if (bin_of(v) == best) {
      sum += v;
      ++n;
    }
  return sum / n;
}

/// Scaling reference: mode of the 95th percentiles of |x| over 50%-overlapping
/// 90-minute segments. Shorter recordings fall back to the global percentile.
inline double robust_p95(std::span<const double> x, double fs) {
  if (x.empty()) throw Error(ErrorKind::EmptySignal, "robust_p95 of empty signal");
  const auto seg = static_cast<std::size_t>(std::llround(constants::kScalingSegmentMin * 60.0 * fs));
  if (x.size() < seg) return abs_percentile(x, constants::kPercentile);
  const std::size_t hop = seg / 2;
  std::vector<double> p;
  for (std::size_t start = 0; start + seg <= x.size(); start += hop)
    p.push_back(abs_percentile(x.subspan(start, seg), constants::kPercentile));
  return histogram_mode(p);
}

/// sign(x) * log(|x|/p95 + 1)
inline std::vector<double> log_modulus_scale(std::span<const double> x, double p95) {
  if (!(p95 > 0.0)) throw Error(ErrorKind::NonpositiveP95, "p95 must be positive");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = std::log(std::abs(x[i]) / p95 + 1.0);
    out[i] = x[i] < 0.0 ? -m : m;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Octave encoding

/// Unscaled octave bands: a cascade of zero-phase lowpass filters, each
/// applied to the previous band. No highpass is involved.
inline std::vector<std::vector<double>> octave_bands(std::span<const double> x,
                                                     double fs = constants::kTargetFs) {
  std::vector<std::vector<double>> bands;
  std::vector<double> cur(x.begin(), x.end());
  for (double fc : constants::kOctaveCutoffsHz) {
    const dsp::FilterSpec spec{dsp::FilterKind::lowpass, constants::kFilterOrder, fc, true};
    cur = dsp::apply(spec, cur, fs);
    bands.push_back(cur);
  }
  return bands;
}

/// Five scaled channels per input channel. An all-zero band stays zero.
inline std::vector<std::vector<double>> octave_encode(std::span<const double> x,
                                                      double fs = constants::kTargetFs) {
  auto bands = octave_bands(x, fs);
  for (auto& b : bands) {
    const double p95 = robust_p95(b, fs);
    if (p95 > 0.0) b = log_modulus_scale(b, p95);
    else std::fill(b.begin(), b.end(), 0.0);
  }
  return bands;
}

// ---------------------------------------------------------------------------
// Cross-correlation encoding

struct CCParams {
  double segment_s = 4.0;
  double hop_s = 0.25;
  double extension_s = 8.0;

  double overlap_s() const { return segment_s - hop_s; }

  void validate() const {
    if (!(hop_s > 0.0 && hop_s <= segment_s && segment_s < extension_s))
      throw Error(ErrorKind::InvalidArgument, "CC params need 0 < hop <= segment < extension");
  }
};

namespace constants {
inline constexpr CCParams kEogCC{4.0, 0.25, 8.0};   // 3.75 s overlap
inline constexpr CCParams kEmgCC{0.4, 0.15, 0.8};   // 0.25 s overlap
inline constexpr CCParams kEegCC{2.0, 0.25, 4.0};
}  // namespace constants

/// Row-major (rows x lags) correlation matrix. Column `zero_lag()` aligns
/// the segment with itself inside its extension.
struct CCMatrix {
  std::size_t rows = 0;
  std::size_t lags = 0;
  std::vector<double> data;

  std::size_t zero_lag() const { return (lags - 1) / 2; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * lags, lags}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * lags, lags}; }
};

struct CCGeometry {
  std::size_t segment = 0;
  std::size_t extension = 0;
  std::size_t hop = 0;
};

inline CCGeometry geometry(const CCParams& p, double fs) {
  p.validate();
  CCGeometry g;
  g.segment = static_cast<std::size_t>(std::llround(p.segment_s * fs));
  g.extension = static_cast<std::size_t>(std::llround(p.extension_s * fs));
  g.hop = static_cast<std::size_t>(std::llround(p.hop_s * fs));
  if (g.segment == 0 || g.hop == 0 || g.extension <= g.segment)
    throw Error(ErrorKind::InvalidArgument, "CC params round to an empty geometry at this rate");
  return g;
}

/// gamma[k] = sum_n s[n] e[n+k] / L over all full-overlap lags, where s is the
/// segment starting at `start` and e the centred extension window taken from
/// `ext_source` (zero outside the recording).
inline void cc_at(std::span<const double> seg_source, std::span<const double> ext_source,
                  std::ptrdiff_t start, const CCGeometry& g, std::span<double> gamma) {
  const std::size_t lags = g.extension - g.segment + 1;
  const std::ptrdiff_t ext_start = start - static_cast<std::ptrdiff_t>((g.extension - g.segment) / 2);
  const auto n_src = static_cast<std::ptrdiff_t>(ext_source.size());
  const auto n_seg = static_cast<std::ptrdiff_t>(seg_source.size());

  thread_local std::vector<double> s, e;
  s.assign(g.segment, 0.0);
  e.assign(g.extension, 0.0);
  for (std::size_t i = 0; i < g.segment; ++i) {
    const auto j = start + static_cast<std::ptrdiff_t>(i);
    if (j >= 0 && j < n_seg) s[i] = seg_source[static_cast<std::size_t>(j)];
  }
  for (std::size_t i = 0; i < g.extension; ++i) {
    const auto j = ext_start + static_cast<std::ptrdiff_t>(i);
    if (j >= 0 && j < n_src) e[i] = ext_source[static_cast<std::size_t>(j)];
  }
  const double inv_l = 1.0 / static_cast<double>(g.segment);
  for (std::size_t k = 0; k < lags; ++k) {
    const double* ek = e.data() + k;
    double acc = 0.0;
    for (std::size_t n = 0; n < g.segment; ++n) acc += s[n] * ek[n];
    gamma[k] = acc * inv_l;
  }
}

/// Unscaled correlation for every hop-aligned segment. With `opposite`, the
/// extension window is taken from the other channel (EOG cross mode).
inline CCMatrix cc_segment(std::span<const double> x, double fs, const CCParams& params,
                           std::optional<std::span<const double>> opposite = std::nullopt) {
  const auto g = geometry(params, fs);
  if (x.size() < g.extension)
    throw Error(ErrorKind::SignalTooShort, "signal shorter than the CC extension window");
  if (opposite && opposite->size() != x.size())
    throw Error(ErrorKind::ShapeMismatch, "opposite channel length differs");
  CCMatrix m;
  m.rows = (x.size() - g.segment) / g.hop + 1;
  m.lags = g.extension - g.segment + 1;
  m.data.resize(m.rows * m.lags);
  const auto ext = opposite ? *opposite : x;
  for (std::size_t r = 0; r < m.rows; ++r)
    cc_at(x, ext, static_cast<std::ptrdiff_t>(r * g.hop), g, m.row(r));
  return m;
}

/// D = gamma * log(1 + max|gamma|) / max|gamma|; all-zero input stays zero.
inline std::vector<double> cc_scale(std::span<const double> gamma) {
  if (gamma.empty()) throw Error(ErrorKind::InvalidArgument, "empty correlation");
  double m = 0.0;
  for (double v : gamma) m = std::max(m, std::abs(v));
  std::vector<double> out(gamma.size(), 0.0);
  if (m == 0.0) return out;
  const double f = std::log1p(m) / m;
  for (std::size_t i = 0; i < gamma.size(); ++i) out[i] = gamma[i] * f;
  return out;
}

inline void cc_scale_rows(CCMatrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const auto scaled = cc_scale(m.row(r));
    std::copy(scaled.begin(), scaled.end(), m.row(r).begin());
  }
}

// ---------------------------------------------------------------------------
// Whole-recording encoding

enum class EncodingMode { octave, cc };

inline std::string to_string(EncodingMode m) { return m == EncodingMode::octave ? "octave" : "cc"; }

inline EncodingMode parse_encoding_mode(std::string_view s) {
  if (s == "octave") return EncodingMode::octave;
  if (s == "cc") return EncodingMode::cc;
  throw Error(ErrorKind::InvalidArgument, "unknown encoding mode " + std::string(s));
}

/// Dense float tensor, row-major.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

inline constexpr std::array<const char*, 3> kModalities = {"EEG", "EOG", "EMG"};

/// Each modality tensor has shape (rows, channels, length).
///   octave: rows = 1, length = samples at 100 Hz (5 channels per source).
///   cc:     rows = 0.25 s grid steps, channels = correlation sources, length = lags.
struct EncodedRecording {
  std::string recording_id;
  EncodingMode mode = EncodingMode::cc;
  double duration_s = 0.0;
  double fs = constants::kTargetFs;
  double grid_hop_s = constants::kGridHopS;
  std::map<std::string, Tensor> modalities;
};

namespace detail {

inline std::vector<double> channel(const PolySignalSet& psg, ChannelRole r) {
  const auto& ch = psg.at(r);
  if (ch.fs != constants::kTargetFs)
    throw Error(ErrorKind::InvalidArgument, to_string(r) + " is not at 100 Hz; preprocess first");
  return to_double(ch.samples);
}

inline std::vector<ChannelRole> eeg_roles(const PolySignalSet& psg) {
  std::vector<ChannelRole> out;
  for (auto r : {ChannelRole::EEG_C_LEFT, ChannelRole::EEG_C_RIGHT})
    if (psg.has(r)) {
      out.push_back(r);
      break;
    }
  for (auto r : {ChannelRole::EEG_O_LEFT, ChannelRole::EEG_O_RIGHT})
    if (psg.has(r)) {
      out.push_back(r);
      break;
    }
  return out;
}

}  // namespace detail

/// Encodes a preprocessed recording. CC modalities are centre-aligned on a
/// common 0.25 s grid whose row count is set by the (longest) EOG segment;
/// EMG rows take the nearest 0.15 s-hop segment.
inline EncodedRecording encode_recording(const PolySignalSet& psg, EncodingMode mode) {
  require_full_montage(psg);
  EncodedRecording enc;
  enc.recording_id = psg.recording_id;
  enc.mode = mode;
  enc.duration_s = psg.duration_s;
  const double fs = constants::kTargetFs;

  const auto eeg = detail::eeg_roles(psg);
  const std::vector<ChannelRole> eog = {ChannelRole::EOG_L, ChannelRole::EOG_R};
  const std::vector<ChannelRole> emg = {ChannelRole::EMG_CHIN};

  if (mode == EncodingMode::octave) {
    enc.grid_hop_s = 1.0 / fs;
    auto encode_group = [&](const std::vector<ChannelRole>& roles) {
      Tensor t;
      std::size_t len = 0;
      std::vector<std::vector<double>> chans;
      for (auto r : roles) {
        auto bands = octave_encode(detail::channel(psg, r), fs);
        len = bands.front().size();
        for (auto& b : bands) chans.push_back(std::move(b));
      }
      t.shape = {1, chans.size(), len};
      t.data.reserve(chans.size() * len);
      for (const auto& c : chans) {
        if (c.size() != len) throw Error(ErrorKind::ShapeMismatch, "channel lengths differ");
        t.data.insert(t.data.end(), c.begin(), c.end());
      }
      return t;
    };
    enc.modalities["EEG"] = encode_group(eeg);
    enc.modalities["EOG"] = encode_group(eog);
    enc.modalities["EMG"] = encode_group(emg);
    return enc;
  }

  const auto g_eog = geometry(constants::kEogCC, fs);
  const auto g_eeg = geometry(constants::kEegCC, fs);
  const auto g_emg = geometry(constants::kEmgCC, fs);
  const auto grid_hop = static_cast<std::size_t>(std::llround(constants::kGridHopS * fs));

  const auto eog_l = detail::channel(psg, ChannelRole::EOG_L);
  const auto eog_r = detail::channel(psg, ChannelRole::EOG_R);
  const auto emg_x = detail::channel(psg, ChannelRole::EMG_CHIN);
  if (eog_l.size() < g_eog.extension)
    throw Error(ErrorKind::SignalTooShort, "recording shorter than the EOG extension window");
  const std::size_t rows = (eog_l.size() - g_eog.segment) / grid_hop + 1;
  const std::size_t emg_segments = (emg_x.size() - g_emg.segment) / g_emg.hop + 1;

  // start of a modality's segment whose centre matches grid row r
  auto centred_start = [&](std::size_t r, const CCGeometry& g) {
    return static_cast<std::ptrdiff_t>(r * grid_hop) +
           (static_cast<std::ptrdiff_t>(g_eog.segment) - static_cast<std::ptrdiff_t>(g.segment)) / 2;
  };

  auto fill = [&](Tensor& t, std::size_t row, std::size_t chan, std::span<const double> seg_src,
                  std::span<const double> ext_src, std::ptrdiff_t start, const CCGeometry& g) {
    const std::size_t lags = g.extension - g.segment + 1;
    std::vector<double> gamma(lags);
    cc_at(seg_src, ext_src, start, g, gamma);
    const auto d = cc_scale(gamma);
    float* dst = t.data.data() + (row * t.shape[1] + chan) * lags;
    for (std::size_t k = 0; k < lags; ++k) dst[k] = static_cast<float>(d[k]);
  };

  Tensor t_eeg{{rows, eeg.size(), g_eeg.extension - g_eeg.segment + 1}, {}};
  Tensor t_eog{{rows, 3, g_eog.extension - g_eog.segment + 1}, {}};
  Tensor t_emg{{rows, 1, g_emg.extension - g_emg.segment + 1}, {}};
  t_eeg.data.resize(t_eeg.numel());
  t_eog.data.resize(t_eog.numel());
  t_emg.data.resize(t_emg.numel());

  std::vector<std::vector<double>> eeg_x;
  for (auto r : eeg) eeg_x.push_back(detail::channel(psg, r));

  for (std::size_t r = 0; r < rows; ++r) {
    const auto s_eog = centred_start(r, g_eog);
    fill(t_eog, r, 0, eog_l, eog_l, s_eog, g_eog);
    fill(t_eog, r, 1, eog_r, eog_r, s_eog, g_eog);
    fill(t_eog, r, 2, eog_l, eog_r, s_eog, g_eog);
    const auto s_eeg = centred_start(r, g_eeg);
    for (std::size_t c = 0; c < eeg_x.size(); ++c) fill(t_eeg, r, c, eeg_x[c], eeg_x[c], s_eeg, g_eeg);
    const auto want = static_cast<double>(centred_start(r, g_emg)) / static_cast<double>(g_emg.hop);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(std::llround(std::max(0.0, want))),
                                         emg_segments - 1);
    fill(t_emg, r, 0, emg_x, emg_x, static_cast<std::ptrdiff_t>(k * g_emg.hop), g_emg);
  }
  enc.modalities["EEG"] = std::move(t_eeg);
  enc.modalities["EOG"] = std::move(t_eog);
  enc.modalities["EMG"] = std::move(t_emg);
  return enc;
}

// ---------------------------------------------------------------------------
// Serialization: <id>.encoded.json manifest + <id>.<MODALITY>.f32le

inline std::filesystem::path save_encoded(const EncodedRecording& enc, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["recording_id"] = enc.recording_id;
  j["mode"] = to_string(enc.mode);
  j["duration_s"] = enc.duration_s;
  j["fs"] = enc.fs;
  j["grid_hop_s"] = enc.grid_hop_s;
  j["modalities"] = nlohmann::ordered_json::object();
  for (const auto& [name, t] : enc.modalities) {
    const std::string file = enc.recording_id + "." + name + ".f32le";
    write_f32le(dir / file, t.data);
    j["modalities"][name] = {{"shape", t.shape}, {"file", file}};
  }
  const auto path = dir / (enc.recording_id + ".encoded.json");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  return path;
}

inline EncodedRecording load_encoded(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  EncodedRecording enc;
  try {
    const auto j = nlohmann::json::parse(in);
    enc.recording_id = j.at("recording_id").get<std::string>();
    enc.mode = parse_encoding_mode(j.at("mode").get<std::string>());
    enc.duration_s = j.at("duration_s").get<double>();
    enc.fs = j.at("fs").get<double>();
    enc.grid_hop_s = j.at("grid_hop_s").get<double>();
    for (const auto& [name, m] : j.at("modalities").items()) {
      Tensor t;
      t.shape = m.at("shape").get<std::vector<std::size_t>>();
      t.data = read_f32le(path.parent_path() / m.at("file").get<std::string>());
      if (t.data.size() != t.numel())
        throw Error(ErrorKind::LengthMismatch, name + ": tensor size does not match its shape");
      enc.modalities[name] = std::move(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, path.string() + ": " + e.what());
  }
  for (const char* m : kModalities)
    if (!enc.modalities.count(m)) throw Error(ErrorKind::CorruptHeader, std::string("missing modality ") + m);
  return enc;
}

}  // namespace hypnodx
