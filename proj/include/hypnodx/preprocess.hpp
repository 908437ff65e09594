#pragma once

// Band-limiting, resampling and Hjorth/Mahalanobis EEG channel selection.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hypnodx/dsp.hpp"
#include "hypnodx/error.hpp"
#include "hypnodx/signal_io.hpp"

namespace hypnodx {

namespace constants {
inline constexpr int kFilterOrder = 5;
inline constexpr double kHighpassHz = 0.2;
inline constexpr double kLowpassHz = 49.0;
inline constexpr double kTargetFs = 100.0;
inline constexpr double kSelectionSegmentS = 300.0;
}  // namespace constants

inline dsp::FilterSpec highpass_spec() {
  return {dsp::FilterKind::highpass, constants::kFilterOrder, constants::kHighpassHz, true};
}
inline dsp::FilterSpec lowpass_spec() {
  return {dsp::FilterKind::lowpass, constants::kFilterOrder, constants::kLowpassHz, true};
}

/// Zero-phase 0.2 Hz highpass followed by zero-phase 49 Hz lowpass, both
/// 5th-order Butterworth.
inline std::vector<double> bandlimit(std::span<const double> x, double fs) {
  if (fs < 100.0) throw Error(ErrorKind::UnsupportedRate, "bandlimit needs fs >= 100 Hz");
  auto hp = dsp::apply(highpass_spec(), x, fs);
  return dsp::apply(lowpass_spec(), hp, fs);
}

inline std::vector<double> resample(std::span<const double> x, double fs_in,
                                    double fs_out = constants::kTargetFs) {
  return dsp::resample(x, fs_in, fs_out);
}

// ---------------------------------------------------------------------------
// Hjorth parameters

struct HjorthTriple {
  double activity = 0;    // signal variance, uV^2
  double mobility = 0;    // per-sample rate
  double complexity = 0;  // dimensionless
};

namespace detail {

inline double population_variance(std::span<const double> x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x) acc += (v - mean) * (v - mean);
  return acc / static_cast<double>(x.size());
}

inline std::vector<double> diff(std::span<const double> x) {
  std::vector<double> d(x.size() - 1);
  for (std::size_t i = 1; i < x.size(); ++i) d[i - 1] = x[i] - x[i - 1];
  return d;
}

}  // namespace detail

inline HjorthTriple hjorth(std::span<const double> x) {
  if (x.size() < 3) throw Error(ErrorKind::DegenerateSegment, "need at least 3 samples");
  const auto d1 = detail::diff(x);
  const auto d2 = detail::diff(d1);
  const double v0 = detail::population_variance(x);
  const double v1 = detail::population_variance(d1);
  const double v2 = detail::population_variance(d2);
  if (v0 <= 0.0 || v1 <= 0.0) throw Error(ErrorKind::DegenerateSegment, "constant segment");
  HjorthTriple h;
  h.activity = v0;
  h.mobility = std::sqrt(v1 / v0);
  h.complexity = std::sqrt(v2 / v1) / h.mobility;
  return h;
}

// ---------------------------------------------------------------------------
// Reference distribution of averaged log-Hjorth vectors

using LogHjorth = std::array<double, 3>;

struct ReferenceDistribution {
  LogHjorth mean{};
  std::array<double, 9> covariance{};  // row-major 3x3

  Eigen::Matrix3d cov_matrix() const {
    Eigen::Matrix3d c;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) c(i, j) = covariance[static_cast<std::size_t>(3 * i + j)];
    return c;
  }

  double mahalanobis(const LogHjorth& x) const {
    Eigen::LLT<Eigen::Matrix3d> llt(cov_matrix());
    if (llt.info() != Eigen::Success)
      throw Error(ErrorKind::SingularCovariance, "reference covariance is not positive definite");
    Eigen::Vector3d d(x[0] - mean[0], x[1] - mean[1], x[2] - mean[2]);
    if (!d.allFinite()) return std::numeric_limits<double>::infinity();
    return std::sqrt(d.dot(llt.solve(d)));
  }
};

inline nlohmann::ordered_json to_json(const ReferenceDistribution& r) {
  nlohmann::ordered_json j;
  j["mean"] = r.mean;
  j["covariance"] = r.covariance;
  return j;
}

inline ReferenceDistribution reference_from_json(const nlohmann::json& j) {
  ReferenceDistribution r;
  try {
    r.mean = j.at("mean").get<LogHjorth>();
    r.covariance = j.at("covariance").get<std::array<double, 9>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, std::string("reference distribution: ") + e.what());
  }
  Eigen::LLT<Eigen::Matrix3d> llt(r.cov_matrix());
  if (llt.info() != Eigen::Success)
    throw Error(ErrorKind::SingularCovariance, "reference covariance is not positive definite");
  return r;
}

inline void save_reference(const ReferenceDistribution& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << to_json(r).dump(2) << '\n';
}

inline ReferenceDistribution load_reference(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return reference_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::CorruptHeader, path.string() + ": " + e.what());
  }
}

// Flat segments have no defined Hjorth values; they are pinned to this floor
// before the log so that a disconnect lands far outside any EEG population.
inline constexpr double kHjorthFloor = 1e-12;

struct LogHjorthProfile {
  LogHjorth mean{};
  std::size_t segments = 0;
  std::size_t degenerate_segments = 0;
};

/// Averaged log-Hjorth vector over complete 5-minute segments. Trailing
/// partial segments are dropped.
inline LogHjorthProfile log_hjorth_profile(std::span<const double> x, double fs) {
  const auto seg = static_cast<std::size_t>(std::llround(constants::kSelectionSegmentS * fs));
  if (seg < 3 || x.size() < seg)
    throw Error(ErrorKind::SignalTooShort, "channel selection needs at least 5 minutes of signal");
  LogHjorthProfile p;
  for (std::size_t start = 0; start + seg <= x.size(); start += seg) {
    HjorthTriple h{kHjorthFloor, kHjorthFloor, kHjorthFloor};
    try {
      h = hjorth(x.subspan(start, seg));
    } catch (const Error&) {
      ++p.degenerate_segments;
    }
    p.mean[0] += std::log(std::max(h.activity, kHjorthFloor));
    p.mean[1] += std::log(std::max(h.mobility, kHjorthFloor));
    p.mean[2] += std::log(std::max(h.complexity, kHjorthFloor));
    ++p.segments;
  }
  for (auto& v : p.mean) v /= static_cast<double>(p.segments);
  return p;
}

/// Mean and regularised covariance of per-recording profiles. The ridge is
/// 1e-6 * trace/3 (or 1e-6 when the trace vanishes).
inline ReferenceDistribution fit_reference(const std::vector<LogHjorth>& profiles) {
  if (profiles.size() < 4)
    throw Error(ErrorKind::TooFewSamples, "reference fit needs at least 4 recordings");
  const auto n = static_cast<double>(profiles.size());
  ReferenceDistribution r;
  for (const auto& p : profiles)
    for (std::size_t i = 0; i < 3; ++i) r.mean[i] += p[i];
  for (auto& m : r.mean) m /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : profiles) {
    Eigen::Vector3d d(p[0] - r.mean[0], p[1] - r.mean[1], p[2] - r.mean[2]);
    cov += d * d.transpose();
  }
  cov /= (n - 1.0);
  // spread at round-off level counts as none
  const double scale = 1.0 + r.mean[0] * r.mean[0] + r.mean[1] * r.mean[1] + r.mean[2] * r.mean[2];
  const double trace = cov.trace();
  const double eps = trace > 1e-24 * scale ? 1e-6 * trace / 3.0 : 1e-6;
  cov += eps * Eigen::Matrix3d::Identity();
  Eigen::LLT<Eigen::Matrix3d> llt(cov);
  if (llt.info() != Eigen::Success || !cov.allFinite())
    throw Error(ErrorKind::SingularCovariance, "covariance not positive definite after regularisation");
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.covariance[static_cast<std::size_t>(3 * i + j)] = cov(i, j);
  return r;
}

enum class EegSite { central, occipital };

inline bool on_site(ChannelRole r, EegSite site) {
  return site == EegSite::central ? is_central_eeg(r) : is_occipital_eeg(r);
}

/// One profile per recording: the average over that recording's present
/// candidates of the given site. Channels are used at their stored rate, so
/// callers pass preprocessed recordings.
inline ReferenceDistribution fit_reference(const std::vector<PolySignalSet>& training,
                                           EegSite site = EegSite::central) {
  std::vector<LogHjorth> profiles;
  for (const auto& psg : training) {
    LogHjorth acc{};
    int count = 0;
    for (const auto& [role, ch] : psg.channels) {
      if (!on_site(role, site)) continue;
      const auto x = to_double(ch.samples);
      const auto p = log_hjorth_profile(x, ch.fs);
      for (std::size_t i = 0; i < 3; ++i) acc[i] += p.mean[i];
      ++count;
    }
    if (count == 0) continue;
    for (auto& v : acc) v /= count;
    profiles.push_back(acc);
  }
  return fit_reference(profiles);
}

struct EegCandidate {
  ChannelRole role;
  std::span<const double> samples;
  double fs = constants::kTargetFs;
};

struct SelectionReport {
  ChannelRole selected;
  std::vector<std::pair<ChannelRole, double>> distances;
};

/// Picks the candidate whose averaged log-Hjorth vector has the smallest
/// Mahalanobis distance to `ref`. Ties go to the earlier candidate.
inline SelectionReport select_eeg_channel(const std::vector<EegCandidate>& candidates,
                                          const ReferenceDistribution& ref) {
  if (candidates.empty()) throw Error(ErrorKind::InvalidArgument, "no EEG candidates");
  SelectionReport rep{candidates.front().role, {}};
  if (candidates.size() == 1) {
    const auto p = log_hjorth_profile(candidates.front().samples, candidates.front().fs);
    if (p.degenerate_segments == p.segments)
      throw Error(ErrorKind::AllDegenerate, "the only EEG candidate is flat");
    rep.distances.emplace_back(candidates.front().role, ref.mahalanobis(p.mean));
    return rep;
  }
  double best = std::numeric_limits<double>::infinity();
  bool any_live = false;
  for (const auto& c : candidates) {
    const auto p = log_hjorth_profile(c.samples, c.fs);
    const double d = ref.mahalanobis(p.mean);
    rep.distances.emplace_back(c.role, d);
    if (p.degenerate_segments < p.segments) any_live = true;
    if (d < best) {
      best = d;
      rep.selected = c.role;
    }
  }
  if (!any_live) throw Error(ErrorKind::AllDegenerate, "every EEG candidate is flat");
  return rep;
}

// ---------------------------------------------------------------------------
// Whole-recording preprocessing

struct PreprocessResult {
  PolySignalSet recording;  // 100 Hz, one EEG per site
  std::optional<SelectionReport> central;
  std::optional<SelectionReport> occipital;
};

/// Band-limits and resamples every channel, then keeps one EEG channel per
/// site. A site with several candidates needs a reference distribution.
inline PreprocessResult preprocess_recording(const PolySignalSet& in,
                                             const std::optional<ReferenceDistribution>& central_ref,
                                             const std::optional<ReferenceDistribution>& occipital_ref) {
  validate(in);
  PreprocessResult out;
  std::map<ChannelRole, std::vector<double>> processed;
  for (const auto& [role, ch] : in.channels) {
    const auto x = to_double(ch.samples);
    processed[role] = resample(bandlimit(x, ch.fs), ch.fs, constants::kTargetFs);
  }

  auto pick = [&](EegSite site, const std::optional<ReferenceDistribution>& ref)
      -> std::optional<SelectionReport> {
    std::vector<EegCandidate> cands;
    for (const auto& [role, x] : processed)
      if (on_site(role, site)) cands.push_back({role, x, constants::kTargetFs});
    if (cands.empty()) return std::nullopt;
    if (cands.size() == 1) return SelectionReport{cands.front().role, {}};
    if (!ref)
      throw Error(ErrorKind::InvalidArgument,
                  std::string("several ") + (site == EegSite::central ? "central" : "occipital") +
                      " EEG candidates but no reference distribution");
    return select_eeg_channel(cands, *ref);
  };
  out.central = pick(EegSite::central, central_ref);
  out.occipital = pick(EegSite::occipital, occipital_ref);

  out.recording.recording_id = in.recording_id;
  out.recording.duration_s = in.duration_s;
  for (auto& [role, x] : processed) {
    if (is_central_eeg(role) && (!out.central || out.central->selected != role)) continue;
    if (is_occipital_eeg(role) && (!out.occipital || out.occipital->selected != role)) continue;
    out.recording.channels[role] = Channel{to_float(x), constants::kTargetFs};
  }
  return out;
}

}  // namespace hypnodx
