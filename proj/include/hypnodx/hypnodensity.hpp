#pragma once

// Hypnodensity matrices (per-segment stage probabilities), their collapse to
// hypnograms, and agreement statistics between scorers and models.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hypnodx/error.hpp"
#include "hypnodx/signal_io.hpp"

namespace hypnodx {

using StageProbs = std::array<double, kNumStages>;

struct Hypnodensity {
  std::vector<StageProbs> probs;
  double resolution_s = 5.0;
  std::string recording_id;

  std::size_t size() const { return probs.size(); }
  double duration_s() const { return static_cast<double>(probs.size()) * resolution_s; }
};

inline void validate(const Hypnodensity& hd, double tol = 1e-6) {
  if (!(hd.resolution_s > 0.0)) throw Error(ErrorKind::InvalidArgument, "resolution must be > 0");
  for (std::size_t t = 0; t < hd.probs.size(); ++t) {
    double s = 0.0;
    for (double p : hd.probs[t]) {
      if (!(p >= -tol && p <= 1.0 + tol))
        throw Error(ErrorKind::InvalidArgument, "probability outside [0,1] in row " + std::to_string(t));
      s += p;
    }
    if (std::abs(s - 1.0) > tol)
      throw Error(ErrorKind::InvalidArgument, "row " + std::to_string(t) + " does not sum to 1");
  }
}

/// First index of the maximum; equal values resolve to the earlier stage.
inline std::size_t argmax_stage(const StageProbs& p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < kNumStages; ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

namespace detail {

inline std::size_t block_size(double from_s, double to_s) {
  const double ratio = to_s / from_s;
  const double r = std::round(ratio);
  if (r < 1.0 || std::abs(ratio - r) > 1e-9)
    throw Error(ErrorKind::IncompatibleResolution,
                "target " + std::to_string(to_s) + " s is not a multiple of " + std::to_string(from_s) + " s");
  return static_cast<std::size_t>(r);
}

}  // namespace detail

/// Label per epoch = argmax of the summed segment probabilities inside it.
/// A trailing partial epoch is labelled from the segments it has.
inline HypnogramLabels to_hypnogram(const Hypnodensity& hd, double epoch_s = 30.0) {
  const std::size_t n = detail::block_size(hd.resolution_s, epoch_s);
  HypnogramLabels out;
  out.epoch_s = epoch_s;
  for (std::size_t s = 0; s < hd.size(); s += n) {
    StageProbs sum{};
    for (std::size_t t = s; t < std::min(hd.size(), s + n); ++t)
      for (std::size_t k = 0; k < kNumStages; ++k) sum[k] += hd.probs[t][k];
    out.stages.push_back(kStages[argmax_stage(sum)]);
  }
  return out;
}

/// Block means of consecutive rows, renormalised.
inline Hypnodensity aggregate_resolution(const Hypnodensity& hd, double target_s) {
  const std::size_t n = detail::block_size(hd.resolution_s, target_s);
  Hypnodensity out;
  out.resolution_s = target_s;
  out.recording_id = hd.recording_id;
  for (std::size_t s = 0; s < hd.size(); s += n) {
    const std::size_t e = std::min(hd.size(), s + n);
    StageProbs m{};
    for (std::size_t t = s; t < e; ++t)
      for (std::size_t k = 0; k < kNumStages; ++k) m[k] += hd.probs[t][k];
    double total = 0.0;
    for (auto& v : m) total += (v /= static_cast<double>(e - s));
    if (total > 0.0)
      for (auto& v : m) v /= total;
    out.probs.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Agreement

/// Cohen's kappa over epochs scored by both raters. When chance agreement is
/// 1 (both raters constant) kappa is 1 for identical labels, else 0.
inline double cohen_kappa(std::span<const Stage> a, std::span<const Stage> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::ShapeMismatch, "label sequences differ in length");
  std::array<double, kNumStages> ma{}, mb{};
  double agree = 0.0, n = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!is_scored(a[i]) || !is_scored(b[i])) continue;
    ma[index(a[i])] += 1.0;
    mb[index(b[i])] += 1.0;
    agree += a[i] == b[i];
    n += 1.0;
  }
  if (n == 0.0) throw Error(ErrorKind::InvalidArgument, "no epochs scored by both raters");
  const double po = agree / n;
  double pe = 0.0;
  for (std::size_t k = 0; k < kNumStages; ++k) pe += (ma[k] / n) * (mb[k] / n);
  if (pe >= 1.0) return po == 1.0 ? 1.0 : 0.0;
  return 1.0 - (1.0 - po) / (1.0 - pe);
}

inline double cohen_kappa(const HypnogramLabels& a, const HypnogramLabels& b) {
  return cohen_kappa(std::span<const Stage>(a.stages), std::span<const Stage>(b.stages));
}

using ScorerSet = std::vector<HypnogramLabels>;

inline void validate(const ScorerSet& s) {
  if (s.empty()) throw Error(ErrorKind::InvalidArgument, "scorer set is empty");
  for (const auto& h : s)
    if (h.size() != s.front().size() || h.epoch_s != s.front().epoch_s)
      throw Error(ErrorKind::ShapeMismatch, "scorers must share epoch count and epoch length");
}

/// Vote fractions per stage at epoch n over scorers that scored it.
inline StageProbs vote_distribution(const ScorerSet& s, std::size_t n) {
  StageProbs v{};
  double count = 0.0;
  for (const auto& h : s)
    if (is_scored(h.stages[n])) {
      v[index(h.stages[n])] += 1.0;
      count += 1.0;
    }
  if (count > 0.0)
    for (auto& x : v) x /= count;
  return v;
}

namespace detail {

inline HypnogramLabels weighted_vote(const ScorerSet& s, const std::vector<double>& w) {
  HypnogramLabels out;
  out.epoch_s = s.front().epoch_s;
  out.stages.resize(s.front().size());
  for (std::size_t n = 0; n < out.stages.size(); ++n) {
    StageProbs v{};
    bool any = false;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (is_scored(s[i].stages[n])) {
        v[index(s[i].stages[n])] += w[i];
        any = true;
      }
    out.stages[n] = any ? kStages[argmax_stage(v)] : Stage::UNSCORED;
  }
  return out;
}

}  // namespace detail

inline HypnogramLabels majority_vote(const ScorerSet& s) {
  validate(s);
  return detail::weighted_vote(s, std::vector<double>(s.size(), 1.0));
}

struct ConsensusResult {
  HypnogramLabels labels;
  std::vector<double> kappas;  // leave-one-out, negative values clamped to 0
  bool fell_back_to_majority = false;
};

/// Kappa-weighted vote. Each scorer's weight is its kappa against the
/// unweighted majority of the other scorers.
inline ConsensusResult consensus(const ScorerSet& s) {
  validate(s);
  if (s.size() < 2) throw Error(ErrorKind::InvalidArgument, "consensus needs at least 2 scorers");
  ConsensusResult r;
  for (std::size_t i = 0; i < s.size(); ++i) {
    ScorerSet others;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (j != i) others.push_back(s[j]);
    const auto ref = majority_vote(others);
    r.kappas.push_back(std::max(0.0, cohen_kappa(s[i], ref)));
  }
  double total = 0.0;
  for (double k : r.kappas) total += k;
  if (total <= 0.0) {
    r.fell_back_to_majority = true;
    r.labels = majority_vote(s);
  } else {
    r.labels = detail::weighted_vote(s, r.kappas);
  }
  return r;
}

inline HypnogramLabels consensus_hypnogram(const ScorerSet& s) { return consensus(s).labels; }

/// Gap between the most and second most voted stage.
inline double epoch_weight(const StageProbs& fractions) {
  double first = -1.0, second = -1.0;
  for (double v : fractions) {
    if (v > first) {
      second = first;
      first = v;
    } else if (v > second) {
      second = v;
    }
  }
  return first - second;
}

/// Accuracy against the scorers' majority label, each epoch weighted by
/// epoch_weight of the vote distribution.
inline double weighted_accuracy(const HypnogramLabels& model, const ScorerSet& s) {
  validate(s);
  if (model.size() != s.front().size()) throw Error(ErrorKind::ShapeMismatch, "model and scorers differ in length");
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < model.size(); ++n) {
    const auto v = vote_distribution(s, n);
    double total = 0.0;
    for (double x : v) total += x;
    if (total == 0.0 || !is_scored(model.stages[n])) continue;
    const double w = epoch_weight(v);
    num += w * (index(model.stages[n]) == argmax_stage(v));
    den += w;
  }
  if (den == 0.0) throw Error(ErrorKind::ZeroTotalWeight, "all epoch weights are zero");
  return num / den;
}

struct Confusion {
  std::array<std::array<double, kNumStages>, kNumStages> fraction{};  // [model][reference]
  std::array<std::array<std::size_t, kNumStages>, kNumStages> count{};
  std::size_t total = 0;
  double accuracy = 0.0;
  double kappa = 0.0;
};

inline Confusion confusion(const HypnogramLabels& model, const HypnogramLabels& reference) {
  if (model.size() != reference.size()) throw Error(ErrorKind::ShapeMismatch, "hypnograms differ in length");
  Confusion c;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (!is_scored(model.stages[i]) || !is_scored(reference.stages[i])) continue;
    ++c.count[index(model.stages[i])][index(reference.stages[i])];
    ++c.total;
    hits += model.stages[i] == reference.stages[i];
  }
  if (c.total == 0) throw Error(ErrorKind::InvalidArgument, "no epochs scored in both hypnograms");
  for (std::size_t a = 0; a < kNumStages; ++a)
    for (std::size_t b = 0; b < kNumStages; ++b)
      c.fraction[a][b] = static_cast<double>(c.count[a][b]) / static_cast<double>(c.total);
  c.accuracy = static_cast<double>(hits) / static_cast<double>(c.total);
  c.kappa = cohen_kappa(model, reference);
  return c;
}

// ---------------------------------------------------------------------------
// Ensembles

struct EnsembleHypnodensity {
  Hypnodensity mean;
  std::vector<StageProbs> variance;  // population variance across models
  std::size_t n_models = 0;
};

inline EnsembleHypnodensity ensemble_hypnodensity(const std::vector<Hypnodensity>& models) {
  if (models.empty()) throw Error(ErrorKind::InvalidArgument, "no models to combine");
  const auto& first = models.front();
  for (const auto& m : models)
    if (m.size() != first.size() || m.resolution_s != first.resolution_s)
      throw Error(ErrorKind::ShapeMismatch, "hypnodensities differ in length or resolution");
  EnsembleHypnodensity e;
  e.n_models = models.size();
  e.mean.resolution_s = first.resolution_s;
  e.mean.recording_id = first.recording_id;
  e.mean.probs.assign(first.size(), StageProbs{});
  e.variance.assign(first.size(), StageProbs{});
  const double n = static_cast<double>(models.size());
  for (std::size_t t = 0; t < first.size(); ++t)
    for (std::size_t k = 0; k < kNumStages; ++k) {
      double s = 0.0;
      for (const auto& m : models) s += m.probs[t][k];
      const double mu = s / n;
      double v = 0.0;
      for (const auto& m : models) v += (m.probs[t][k] - mu) * (m.probs[t][k] - mu);
      e.mean.probs[t][k] = mu;
      e.variance[t][k] = v / n;
    }
  return e;
}

struct VarianceReport {
  std::array<double, kNumStages> mean_variance{};  // over correctly predicted segments, per stage
  std::array<std::size_t, kNumStages> correct{};
  std::optional<std::array<double, kNumStages>> relative;  // divided by the wake value
};

/// Mean ensemble variance of the predicted stage over segments where the
/// ensemble argmax matches the reference label, reported relative to wake.
inline VarianceReport relative_variance(const EnsembleHypnodensity& e, const HypnogramLabels& labels) {
  VarianceReport r;
  std::array<double, kNumStages> sum{};
  for (std::size_t t = 0; t < e.mean.size(); ++t) {
    const auto epoch = static_cast<std::size_t>(std::floor(static_cast<double>(t) * e.mean.resolution_s / labels.epoch_s + 1e-9));
    if (epoch >= labels.size() || !is_scored(labels.stages[epoch])) continue;
    const std::size_t k = argmax_stage(e.mean.probs[t]);
    if (k != index(labels.stages[epoch])) continue;
    sum[k] += e.variance[t][k];
    ++r.correct[k];
  }
  for (std::size_t k = 0; k < kNumStages; ++k)
    r.mean_variance[k] = r.correct[k] ? sum[k] / static_cast<double>(r.correct[k]) : 0.0;
  if (r.correct[0] > 0 && r.mean_variance[0] > 0.0) {
    std::array<double, kNumStages> rel{};
    for (std::size_t k = 0; k < kNumStages; ++k) rel[k] = r.mean_variance[k] / r.mean_variance[0];
    r.relative = rel;
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV: t_start_s,W,N1,N2,N3,REM[,varW,varN1,varN2,varN3,varREM]

inline std::string format_number(double v) {
  if (v == 0.0) v = 0.0;  // drop negative zero
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_hypnodensity_csv(std::ostream& out, const Hypnodensity& hd,
                                   const std::vector<StageProbs>* variance = nullptr) {
  out << "t_start_s";
  for (auto n : kStageNames) out << ',' << n;
  if (variance)
    for (auto n : kStageNames) out << ",var" << n;
  out << '\n';
  for (std::size_t t = 0; t < hd.size(); ++t) {
    out << format_number(static_cast<double>(t) * hd.resolution_s);
    for (double p : hd.probs[t]) out << ',' << format_number(p);
    if (variance)
      for (double v : (*variance)[t]) out << ',' << format_number(v);
    out << '\n';
  }
}

struct HypnodensityTable {
  Hypnodensity hd;
  std::optional<std::vector<StageProbs>> variance;
};

/// Parses the CSV written above. Resolution comes from the first two start
/// times (`default_resolution_s` for a single row).
inline HypnodensityTable read_hypnodensity_csv(std::istream& in, double default_resolution_s = 5.0) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::EmptyFile, "hypnodensity CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::string base = "t_start_s,W,N1,N2,N3,REM";
  const std::string with_var = base + ",varW,varN1,varN2,varN3,varREM";
  bool has_var = false;
  if (line == with_var)
    has_var = true;
  else if (line != base)
    throw Error(ErrorKind::CorruptHeader, "unexpected hypnodensity header: " + line);
  HypnodensityTable tab;
  if (has_var) tab.variance.emplace();
  std::vector<double> starts;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        cells.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(ErrorKind::InvalidArgument, "line " + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    const std::size_t want = has_var ? 11 : 6;
    if (cells.size() != want)
      throw Error(ErrorKind::InvalidArgument, "line " + std::to_string(lineno) + ": expected " +
                                                  std::to_string(want) + " columns");
    starts.push_back(cells[0]);
    StageProbs p{};
    std::copy_n(cells.begin() + 1, kNumStages, p.begin());
    tab.hd.probs.push_back(p);
    if (has_var) {
      StageProbs v{};
      std::copy_n(cells.begin() + 6, kNumStages, v.begin());
      tab.variance->push_back(v);
    }
  }
  if (tab.hd.probs.empty()) throw Error(ErrorKind::EmptyFile, "hypnodensity CSV has no rows");
  tab.hd.resolution_s = starts.size() > 1 ? starts[1] - starts[0] : default_resolution_s;
  for (std::size_t i = 0; i < starts.size(); ++i)
    if (std::abs(starts[i] - static_cast<double>(i) * tab.hd.resolution_s) > 1e-6)
      throw Error(ErrorKind::InvalidArgument, "t_start_s values are not evenly spaced from 0");
  validate(tab.hd);
  return tab;
}

}  // namespace hypnodx
