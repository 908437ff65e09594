#pragma once

// Narcolepsy feature bank: 31 stage combinations x 15 descriptors of the
// combination's probability product series, 7 sleep-sequencing scalars and 9
// peak-transition scores. 481 values in a fixed, named order.

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypnodx/error.hpp"
#include "hypnodx/hypnodensity.hpp"
#include "hypnodx/signal_io.hpp"

namespace hypnodx::features {

namespace constants {
inline constexpr double kSorempWakeS = 150.0;          // W/N1 run before a SOREMP
inline constexpr double kFragmentSleepS = 90.0;        // sustained N2/N3
inline constexpr double kFragmentWakeS = 60.0;         // interrupting W/N1
inline constexpr double kLongBoutS = 180.0;            // long W/N1 bout
inline constexpr double kShortWakeS = 900.0;           // W/N1 periods counted as short
inline constexpr double kRemLatencyIndicatorMin = 15.0;
inline constexpr double kPeakFloor = 10.0;             // epoch-units of probability mass
inline constexpr double kEpochUnitS = 30.0;
inline constexpr double kEq4Fraction = 0.05;
inline constexpr std::array<double, 6> kCumulativeFractions = {0.05, 0.10, 0.30, 0.50, 0.70, 0.90};
inline constexpr std::size_t kNumCombos = 31;
inline constexpr std::size_t kNumDescriptors = 15;
inline constexpr std::size_t kNumSequencing = 7;
inline constexpr std::size_t kNumTransitions = 9;
inline constexpr std::size_t kNumFeatures = kNumCombos * kNumDescriptors + kNumSequencing + kNumTransitions;
static_assert(kNumFeatures == 481);
}  // namespace constants

// ---------------------------------------------------------------------------
// Stage combinations

using StageCombo = std::vector<std::size_t>;  // sorted stage indices

/// All nonempty subsets, by size, lexicographic within a size.
inline const std::vector<StageCombo>& all_combos() {
  static const std::vector<StageCombo> combos = [] {
    std::vector<StageCombo> out;
    for (std::size_t k = 1; k <= kNumStages; ++k) {
      std::vector<bool> pick(kNumStages, false);
      std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), true);
      do {
        StageCombo c;
        for (std::size_t i = 0; i < kNumStages; ++i)
          if (pick[i]) c.push_back(i);
        out.push_back(c);
      } while (std::prev_permutation(pick.begin(), pick.end()));
    }
    return out;
  }();
  return combos;
}

inline std::string combo_name(const StageCombo& c) {
  std::string s;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (i) s += '*';
    s += kStageNames[c[i]];
  }
  return s;
}

/// Per-segment product of the combination's stage probabilities.
inline std::vector<double> proto_series(const Hypnodensity& hd, const StageCombo& combo) {
  std::vector<double> out(hd.size(), 1.0);
  for (std::size_t t = 0; t < hd.size(); ++t)
    for (auto k : combo) out[t] *= hd.probs[t][k];
  return out;
}

// ---------------------------------------------------------------------------
// Descriptors

inline constexpr std::array<const char*, constants::kNumDescriptors> kDescriptorNames = {
    "mean",          "max",          "std",          "mean_abs_diff", "max_abs_diff",
    "entropy",       "t05_weighted", "t10_weighted", "t30_weighted",  "t50_weighted",
    "t70_weighted",  "t90_weighted", "total",        "frac_above_half_max", "upcrossings_per_hour"};

/// Minutes until the running sum first reaches `fraction` of the total,
/// counted to the end of the segment that crosses it. 0 for an all-zero series.
inline double time_to_fraction_min(std::span<const double> x, double resolution_s, double fraction) {
  double total = 0.0;
  for (double v : x) total += v;
  if (total <= 0.0) return 0.0;
  const double target = fraction * total * (1.0 - 1e-12);
  double run = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    run += x[i];
    if (run >= target) return static_cast<double>(i + 1) * resolution_s / 60.0;
  }
  return static_cast<double>(x.size()) * resolution_s / 60.0;
}

inline std::array<double, constants::kNumDescriptors> combo_descriptors(std::span<const double> x,
                                                                        double resolution_s) {
  if (x.empty()) throw Error(ErrorKind::InvalidArgument, "descriptor series is empty");
  const double n = static_cast<double>(x.size());
  std::array<double, constants::kNumDescriptors> d{};
  double total = 0.0, mx = x[0];
  for (double v : x) {
    total += v;
    mx = std::max(mx, v);
  }
  const double mean = total / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  double sum_abs = 0.0, max_abs = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    const double a = std::abs(x[i] - x[i - 1]);
    sum_abs += a;
    max_abs = std::max(max_abs, a);
  }
  double entropy = 0.0;
  if (total > 0.0)
    for (double v : x)
      if (v > 0.0) {
        const double q = v / total;
        entropy -= q * std::log(q);
      }
  std::size_t above = 0;
  if (mx > 0.0)
    for (double v : x) above += v > 0.5 * mx;
  std::size_t ups = 0;
  for (std::size_t i = 1; i < x.size(); ++i) ups += (x[i - 1] - mean) < 0.0 && (x[i] - mean) >= 0.0;

  d[0] = mean;
  d[1] = mx;
  d[2] = std::sqrt(var / n);
  d[3] = x.size() > 1 ? sum_abs / (n - 1.0) : 0.0;
  d[4] = max_abs;
  d[5] = entropy;
  for (std::size_t p = 0; p < constants::kCumulativeFractions.size(); ++p)
    d[6 + p] = time_to_fraction_min(x, resolution_s, constants::kCumulativeFractions[p]) * total;
  d[12] = total;
  d[13] = static_cast<double>(above) / n;
  d[14] = static_cast<double>(ups) / (n * resolution_s / 3600.0);
  return d;
}

/// Pairwise W/N2/REM product sum per segment; minutes to 5% of its running
/// total, multiplied by the total.
inline double eq4_feature(const Hypnodensity& hd) {
  std::vector<double> pi(hd.size());
  for (std::size_t t = 0; t < hd.size(); ++t) {
    const auto& p = hd.probs[t];
    pi[t] = p[0] * p[2] + p[0] * p[4] + p[2] * p[4];
  }
  double total = 0.0;
  for (double v : pi) total += v;
  return time_to_fraction_min(pi, hd.resolution_s, constants::kEq4Fraction) * total;
}

// ---------------------------------------------------------------------------
// Sequencing (from the discrete hypnogram)

struct Run {
  Stage stage;
  std::size_t start = 0, length = 0;
};

inline std::vector<Run> runs(const HypnogramLabels& h) {
  std::vector<Run> out;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (!out.empty() && out.back().stage == h.stages[i])
      ++out.back().length;
    else
      out.push_back({h.stages[i], i, 1});
  }
  return out;
}

namespace detail {

inline bool wake_like(Stage s) { return s == Stage::W || s == Stage::N1; }
inline bool deep_like(Stage s) { return s == Stage::N2 || s == Stage::N3; }

/// Maximal runs of epochs satisfying `pred` (stage changes inside do not split).
template <typename Pred>
std::vector<Run> merged_runs(const HypnogramLabels& h, Pred pred) {
  std::vector<Run> out;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (!pred(h.stages[i])) continue;
    if (!out.empty() && out.back().start + out.back().length == i)
      ++out.back().length;
    else
      out.push_back({h.stages[i], i, 1});
  }
  return out;
}

/// Length in epochs of the W/N1 stretch ending right before epoch `i`.
inline std::size_t wake_before(const HypnogramLabels& h, std::size_t i) {
  std::size_t n = 0;
  while (i > 0 && wake_like(h.stages[i - 1])) {
    --i;
    ++n;
  }
  return n;
}

}  // namespace detail

struct SoremReport {
  std::size_t count = 0;
  double total_duration_min = 0.0;
  double rem_latency_min = 0.0;
  double sleep_latency_min = 0.0;
  bool has_sleep = false;
  bool has_rem = false;
};

/// Sleep onset is the first scored non-wake epoch. REM latency runs from
/// onset to the first REM epoch (to the end of the recording when there is
/// no REM). A SOREMP is a REM run right after >= 2.5 min of contiguous W/N1.
inline SoremReport sorem_analysis(const HypnogramLabels& h) {
  SoremReport r;
  const double e_min = h.epoch_s / 60.0;
  const double total_min = static_cast<double>(h.size()) * e_min;
  std::optional<std::size_t> onset, first_rem;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (!onset && is_scored(h.stages[i]) && h.stages[i] != Stage::W) onset = i;
    if (!first_rem && h.stages[i] == Stage::REM) first_rem = i;
  }
  if (!onset) {
    r.sleep_latency_min = total_min;
    r.rem_latency_min = total_min;
    return r;
  }
  r.has_sleep = true;
  r.sleep_latency_min = static_cast<double>(*onset) * e_min;
  r.has_rem = first_rem.has_value();
  r.rem_latency_min = first_rem ? static_cast<double>(*first_rem - *onset) * e_min
                                : total_min - r.sleep_latency_min;
  for (const auto& run : runs(h)) {
    if (run.stage != Stage::REM) continue;
    const double wake_s = static_cast<double>(detail::wake_before(h, run.start)) * h.epoch_s;
    if (wake_s >= constants::kSorempWakeS) {
      ++r.count;
      r.total_duration_min += static_cast<double>(run.length) * e_min;
    }
  }
  return r;
}

struct Fragmentation {
  double nrem_fragmentations = 0;    // >= 90 s N2/N3 followed by >= 1 min W/N1
  double long_wake_bouts = 0;        // W/N1 bouts >= 3 min
  double short_wake_min = 0;         // minutes of W/N1 in bouts < 15 min
  double rem_after_wake_min = 0;     // REM minutes after > 2.5 min W/N1
  double rem_latency_indicator = 0;  // REM latency <= 15 min
};

inline Fragmentation fragmentation_features(const HypnogramLabels& h) {
  if (h.epoch_s > constants::kFragmentSleepS)
    throw Error(ErrorKind::InvalidArgument, "epoch length must be <= 90 s");
  Fragmentation f;
  const double e = h.epoch_s;
  const auto wake = detail::merged_runs(h, detail::wake_like);
  const auto deep = detail::merged_runs(h, detail::deep_like);
  for (const auto& d : deep) {
    if (static_cast<double>(d.length) * e < constants::kFragmentSleepS) continue;
    const std::size_t next = d.start + d.length;
    for (const auto& w : wake)
      if (w.start == next && static_cast<double>(w.length) * e >= constants::kFragmentWakeS) {
        f.nrem_fragmentations += 1;
        break;
      }
  }
  for (const auto& w : wake) {
    const double s = static_cast<double>(w.length) * e;
    if (s >= constants::kLongBoutS) f.long_wake_bouts += 1;
    if (s < constants::kShortWakeS) f.short_wake_min += s / 60.0;
  }
  for (const auto& run : runs(h)) {
    if (run.stage != Stage::REM) continue;
    if (static_cast<double>(detail::wake_before(h, run.start)) * e > constants::kSorempWakeS)
      f.rem_after_wake_min += static_cast<double>(run.length) * e / 60.0;
  }
  const auto s = sorem_analysis(h);
  f.rem_latency_indicator = s.has_rem && s.rem_latency_min <= constants::kRemLatencyIndicatorMin ? 1.0 : 0.0;
  return f;
}

// ---------------------------------------------------------------------------
// Peak transitions

enum class PeakType : std::uint8_t { WN1 = 0, N2 = 1, N3 = 2, REM = 3 };
inline constexpr std::array<const char*, 4> kPeakTypeNames = {"WN1", "N2", "N3", "REM"};

struct Peak {
  PeakType type;
  double mass = 0.0;  // epoch-units of probability
};

inline constexpr std::array<std::pair<PeakType, PeakType>, constants::kNumTransitions> kTransitions = {{
    {PeakType::WN1, PeakType::N2},
    {PeakType::WN1, PeakType::REM},
    {PeakType::N2, PeakType::WN1},
    {PeakType::N2, PeakType::N3},
    {PeakType::N2, PeakType::REM},
    {PeakType::N3, PeakType::WN1},
    {PeakType::N3, PeakType::N2},
    {PeakType::REM, PeakType::WN1},
    {PeakType::REM, PeakType::N2},
}};

inline std::array<double, 4> merged_probs(const StageProbs& p) { return {p[0] + p[1], p[2], p[3], p[4]}; }

/// Runs where one merged type holds the argmax; mass is the summed dominant
/// probability expressed in 30 s epoch-units.
inline std::vector<Peak> extract_peaks(const Hypnodensity& hd) {
  std::vector<Peak> out;
  const double unit = hd.resolution_s / constants::kEpochUnitS;
  for (const auto& row : hd.probs) {
    const auto m = merged_probs(row);
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (m[k] > m[best]) best = k;
    const auto type = static_cast<PeakType>(best);
    if (out.empty() || out.back().type != type) out.push_back({type, 0.0});
    out.back().mass += m[best] * unit;
  }
  return out;
}

/// Drops peaks under the floor, merges neighbours of the same type, then sums
/// sqrt(m_n * m_{n+1}) per listed transition.
inline std::array<double, constants::kNumTransitions> transition_scores(const std::vector<Peak>& raw) {
  std::vector<Peak> kept;
  for (const auto& p : raw) {
    if (p.mass < constants::kPeakFloor) continue;
    if (!kept.empty() && kept.back().type == p.type)
      kept.back().mass += p.mass;
    else
      kept.push_back(p);
  }
  std::array<double, constants::kNumTransitions> out{};
  for (std::size_t i = 1; i < kept.size(); ++i)
    for (std::size_t k = 0; k < kTransitions.size(); ++k)
      if (kTransitions[k].first == kept[i - 1].type && kTransitions[k].second == kept[i].type)
        out[k] += std::sqrt(kept[i - 1].mass * kept[i].mass);
  return out;
}

inline std::array<double, constants::kNumTransitions> transition_features(const Hypnodensity& hd) {
  return transition_scores(extract_peaks(hd));
}

// ---------------------------------------------------------------------------
// Assembly

inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& c : all_combos())
      for (auto d : kDescriptorNames) n.push_back(combo_name(c) + "." + d);
    for (auto s : {"rem_latency_min", "sleep_latency_min", "soremp_count", "soremp_duration_min",
                   "nrem_fragmentations", "long_wake_bouts", "short_wake_min"})
      n.push_back(std::string("seq.") + s);
    for (const auto& [a, b] : kTransitions)
      n.push_back(std::string("trans.") + kPeakTypeNames[static_cast<std::size_t>(a)] + "_" +
                  kPeakTypeNames[static_cast<std::size_t>(b)]);
    return n;
  }();
  return names;
}

struct FeatureVector {
  std::string recording_id;
  std::vector<double> values;
  std::optional<bool> hla_positive;
};

inline FeatureVector assemble(const Hypnodensity& hd, const HypnogramLabels& hyp, std::optional<bool> hla = {}) {
  if (hd.size() == 0) throw Error(ErrorKind::InvalidArgument, "hypnodensity is empty");
  FeatureVector fv;
  fv.recording_id = hd.recording_id;
  fv.hla_positive = hla;
  fv.values.reserve(constants::kNumFeatures);
  for (const auto& c : all_combos()) {
    const auto d = combo_descriptors(proto_series(hd, c), hd.resolution_s);
    fv.values.insert(fv.values.end(), d.begin(), d.end());
  }
  const auto s = sorem_analysis(hyp);
  const auto f = fragmentation_features(hyp);
  for (double v : {s.rem_latency_min, s.sleep_latency_min, static_cast<double>(s.count), s.total_duration_min,
                   f.nrem_fragmentations, f.long_wake_bouts, f.short_wake_min})
    fv.values.push_back(v);
  const auto t = transition_features(hd);
  fv.values.insert(fv.values.end(), t.begin(), t.end());
  for (std::size_t i = 0; i < fv.values.size(); ++i)
    if (!std::isfinite(fv.values[i]))
      throw Error(ErrorKind::NumericFailure, "feature " + feature_names()[i] + " is not finite");
  return fv;
}

// ---------------------------------------------------------------------------
// Serialisation. CSV: recording_id,hla,<481 names>; one row per recording.
// hla is 1, 0 or empty.

inline void write_csv(std::ostream& out, const std::vector<FeatureVector>& rows) {
  out << "recording_id,hla";
  for (const auto& n : feature_names()) out << ',' << n;
  out << '\n';
  char buf[40];
  for (const auto& r : rows) {
    out << r.recording_id << ',';
    if (r.hla_positive) out << (*r.hla_positive ? '1' : '0');
    for (double v : r.values) {
      std::snprintf(buf, sizeof buf, "%.17g", v == 0.0 ? 0.0 : v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline std::vector<FeatureVector> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::EmptyFile, "feature CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::string expected = "recording_id,hla";
  for (const auto& n : feature_names()) expected += "," + n;
  if (line != expected) throw Error(ErrorKind::CorruptHeader, "feature CSV header does not match the feature names");
  std::vector<FeatureVector> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    FeatureVector fv;
    std::getline(ss, fv.recording_id, ',');
    std::getline(ss, cell, ',');
    if (cell == "1")
      fv.hla_positive = true;
    else if (cell == "0")
      fv.hla_positive = false;
    else if (!cell.empty())
      throw Error(ErrorKind::InvalidArgument, "line " + std::to_string(lineno) + ": hla must be 1, 0 or empty");
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        fv.values.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(ErrorKind::InvalidArgument, "line " + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (fv.values.size() != constants::kNumFeatures)
      throw Error(ErrorKind::ShapeMismatch, "line " + std::to_string(lineno) + ": expected 481 values");
    rows.push_back(std::move(fv));
  }
  return rows;
}

inline nlohmann::ordered_json to_json(const FeatureVector& fv) {
  nlohmann::ordered_json j;
  j["recording_id"] = fv.recording_id;
  j["hla_positive"] = fv.hla_positive ? nlohmann::ordered_json(*fv.hla_positive) : nlohmann::ordered_json();
  nlohmann::ordered_json vals;
  for (std::size_t i = 0; i < fv.values.size(); ++i) vals[feature_names()[i]] = fv.values[i];
  j["features"] = vals;
  return j;
}

inline FeatureVector feature_vector_from_json(const nlohmann::json& j) {
  try {
    FeatureVector fv;
    fv.recording_id = j.at("recording_id").get<std::string>();
    if (!j.at("hla_positive").is_null()) fv.hla_positive = j.at("hla_positive").get<bool>();
    const auto& vals = j.at("features");
    for (const auto& n : feature_names()) fv.values.push_back(vals.at(n).get<double>());
    return fv;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, std::string("feature JSON: ") + e.what());
  }
}

}  // namespace hypnodx::features
