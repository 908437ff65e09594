#pragma once

// Narcolepsy classifier: feature standardisation, recursive feature
// elimination, a binary Gaussian-process classifier (probit link, Laplace
// approximation), ensemble/HLA decision rules and ROC evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hypnodx/error.hpp"
#include "hypnodx/signal_io.hpp"

namespace hypnodx::dx {

namespace constants {
inline constexpr double kThreshold = -0.03;
inline constexpr double kHlaThreshold = -0.53;
inline constexpr double kSelectionCutoff = 0.40;
inline constexpr std::size_t kTargetFeatures = 38;
inline constexpr int kFolds = 5;
inline constexpr double kRidgeAlpha = 1.0;
inline constexpr std::array<double, 5> kLengthScaleFactors = {0.5, 1.0, 2.0, 4.0, 8.0};
inline constexpr std::array<double, 3> kSignalStd = {0.5, 1.0, 2.0};
inline constexpr std::array<double, 3> kNoiseStd = {1e-4, 1e-2, 1e-1};
inline constexpr std::array<double, 5> kMeanGrid = {0.0, 0.5, -0.5, 1.0, -1.0};
inline constexpr double kWilsonZ = 1.959963984540054;
}  // namespace constants

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Standardisation

/// Z-scores columns with training statistics. Constant columns are dropped.
struct Standardizer {
  std::vector<std::size_t> kept;  // input column indices that survive
  std::vector<double> mean, scale;
  std::vector<std::size_t> dropped;

  Matrix transform(const Matrix& X) const {
    Matrix Z(X.rows(), static_cast<Eigen::Index>(kept.size()));
    for (std::size_t j = 0; j < kept.size(); ++j)
      Z.col(static_cast<Eigen::Index>(j)) =
          (X.col(static_cast<Eigen::Index>(kept[j])).array() - mean[j]) / scale[j];
    return Z;
  }
  Vector transform(const Vector& x) const {
    Vector z(static_cast<Eigen::Index>(kept.size()));
    for (std::size_t j = 0; j < kept.size(); ++j)
      z(static_cast<Eigen::Index>(j)) = (x(static_cast<Eigen::Index>(kept[j])) - mean[j]) / scale[j];
    return z;
  }
};

inline Standardizer fit_standardizer(const Matrix& X) {
  Standardizer s;
  const double n = static_cast<double>(X.rows());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double mu = X.col(j).mean();
    const double sd = std::sqrt((X.col(j).array() - mu).square().sum() / n);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mu)))) {
      s.dropped.push_back(static_cast<std::size_t>(j));
      continue;
    }
    s.kept.push_back(static_cast<std::size_t>(j));
    s.mean.push_back(mu);
    s.scale.push_back(sd);
  }
  return s;
}

inline Matrix select_columns(const Matrix& X, const std::vector<std::size_t>& cols) {
  Matrix out(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = X.col(static_cast<Eigen::Index>(cols[j]));
  return out;
}

inline void check_labels(std::span<const int> y) {
  bool pos = false, neg = false;
  for (int v : y) {
    if (v != 1 && v != -1) throw Error(ErrorKind::InvalidArgument, "labels must be +1 or -1");
    pos |= v == 1;
    neg |= v == -1;
  }
  if (!pos || !neg) throw Error(ErrorKind::SingleClass, "both classes must be present");
}

// ---------------------------------------------------------------------------
// Recursive feature elimination

/// Weights of a ridge classifier on +/-1 targets (columns assumed centred).
/// Uses the dual form when there are more features than samples.
inline Vector ridge_weights(const Matrix& X, const Vector& y, double alpha) {
  const Vector yc = y.array() - y.mean();
  if (X.cols() <= X.rows()) {
    Matrix A = X.transpose() * X;
    A.diagonal().array() += alpha;
    return A.llt().solve(X.transpose() * yc);
  }
  Matrix K = X * X.transpose();
  K.diagonal().array() += alpha;
  return X.transpose() * K.llt().solve(yc);
}

struct SelectionResult {
  std::vector<double> frequency;  // per input feature
  std::vector<std::size_t> selected;
  std::size_t target = constants::kTargetFeatures;
  double cutoff = constants::kSelectionCutoff;
};

struct RfeOptions {
  std::size_t target = constants::kTargetFeatures;
  int folds = constants::kFolds;
  double cutoff = constants::kSelectionCutoff;
  double alpha = constants::kRidgeAlpha;
  std::uint64_t seed = 1;
};

/// Per fold: standardise the training part, then repeatedly refit the ridge
/// classifier and drop the feature with the smallest |weight| until
/// `target` remain. Frequency = share of folds keeping a feature.
inline SelectionResult rfe(const Matrix& X, std::span<const int> y, const RfeOptions& opt = {}) {
  const auto n = static_cast<std::size_t>(X.rows());
  if (n != y.size()) throw Error(ErrorKind::DimensionMismatch, "X rows and labels differ");
  if (n < 20) throw Error(ErrorKind::TooFewSamples, "RFE needs at least 20 samples");
  check_labels(y);
  if (opt.folds < 2) throw Error(ErrorKind::InvalidArgument, "RFE needs at least 2 folds");
  const auto d = static_cast<std::size_t>(X.cols());

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(opt.seed);
  std::shuffle(order.begin(), order.end(), rng);

  SelectionResult r;
  r.target = opt.target;
  r.cutoff = opt.cutoff;
  std::vector<int> kept_count(d, 0);
  for (int f = 0; f < opt.folds; ++f) {
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < n; ++i)
      if (static_cast<int>(i % static_cast<std::size_t>(opt.folds)) != f) train.push_back(order[i]);
    Matrix Xt(static_cast<Eigen::Index>(train.size()), X.cols());
    Vector yt(static_cast<Eigen::Index>(train.size()));
    std::vector<int> ylab;
    for (std::size_t i = 0; i < train.size(); ++i) {
      Xt.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(train[i]));
      yt(static_cast<Eigen::Index>(i)) = y[train[i]];
      ylab.push_back(y[train[i]]);
    }
    check_labels(ylab);
    const auto st = fit_standardizer(Xt);
    Matrix Z = st.transform(Xt);
    std::vector<std::size_t> alive = st.kept;  // original indices, aligned with Z columns
    const Vector yc = yt.array() - yt.mean();
    std::optional<Matrix> gram;  // Z Z^T, downdated as columns go
    while (alive.size() > opt.target) {
      Vector w;
      if (Z.cols() > Z.rows()) {
        if (!gram) gram = Z * Z.transpose();
        Matrix A = *gram;
        A.diagonal().array() += opt.alpha;
        w = Z.transpose() * A.llt().solve(yc);
      } else {
        w = ridge_weights(Z, yt, opt.alpha);
      }
      Eigen::Index worst = 0;
      for (Eigen::Index j = 1; j < w.size(); ++j)
        if (std::abs(w(j)) < std::abs(w(worst))) worst = j;
      if (gram) *gram -= Z.col(worst) * Z.col(worst).transpose();
      alive.erase(alive.begin() + worst);
      const Eigen::Index last = Z.cols() - 1;
      if (worst < last) Z.block(0, worst, Z.rows(), last - worst) = Z.block(0, worst + 1, Z.rows(), last - worst).eval();
      Z.conservativeResize(Eigen::NoChange, last);
    }
    for (auto j : alive) ++kept_count[j];
  }
  r.frequency.resize(d);
  for (std::size_t j = 0; j < d; ++j) r.frequency[j] = static_cast<double>(kept_count[j]) / opt.folds;
  for (std::size_t j = 0; j < d; ++j)
    if (r.frequency[j] >= opt.cutoff - 1e-12) r.selected.push_back(j);
  return r;
}

// ---------------------------------------------------------------------------
// Gaussian-process classifier

namespace detail {

inline double norm_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
inline double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// log Phi(z) and the ratio N(z)/Phi(z), stable for very negative z.
inline std::pair<double, double> log_cdf_and_ratio(double z) {
  if (z < -30.0) {
    const double ratio = -z - 1.0 / z + 2.0 / (z * z * z);
    return {-0.5 * z * z - std::log(-z) - 0.5 * std::log(2.0 * std::numbers::pi), ratio};
  }
  const double c = norm_cdf(z);
  return {std::log(c), norm_pdf(z) / c};
}

}  // namespace detail

struct GPHyper {
  double length_scale = 1.0;
  double signal_std = 1.0;
  double noise_std = 1e-2;
  double mean = 0.0;
};

inline Matrix se_kernel(const Matrix& A, const Matrix& B, const GPHyper& h) {
  const Vector a2 = A.rowwise().squaredNorm();
  const Vector b2 = B.rowwise().squaredNorm();
  Matrix D = (-2.0 * A * B.transpose()).colwise() + a2;
  D.rowwise() += b2.transpose();
  const double s2 = h.signal_std * h.signal_std;
  const double inv = 1.0 / (2.0 * h.length_scale * h.length_scale);
  return (s2 * (-(D.array().max(0.0)) * inv).exp()).matrix();
}

struct GPModel {
  GPHyper hyper;
  Matrix X;   // standardised training inputs
  Vector y;   // +/-1
  // posterior cache
  Vector grad_loglik;  // d log p(y|f)/df at the mode
  Vector sqrt_w;
  Eigen::LLT<Matrix> llt_b;
  double log_marginal = 0.0;
  int newton_iterations = 0;
};

struct GPPrediction {
  double score = 0.0;     // 2 Phi(mean / sqrt(1 + var)) - 1
  double variance = 0.0;  // latent posterior variance
};

namespace detail {

/// Laplace mode finding for a fixed kernel. Returns false if it fails to
/// factorise.
inline bool laplace_fit(GPModel& m, double jitter) {
  const auto n = m.X.rows();
  Matrix K = se_kernel(m.X, m.X, m.hyper);
  K.diagonal().array() += m.hyper.noise_std * m.hyper.noise_std + jitter;
  Vector g = Vector::Zero(n);  // latent minus constant mean
  Vector a = Vector::Zero(n);
  Vector grad(n), w(n);
  double objective = -std::numeric_limits<double>::infinity();
  double loglik = 0.0;
  int it = 0;
  for (; it < 100; ++it) {
    loglik = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double f = g(i) + m.hyper.mean;
      const double yi = m.y(i);
      const auto [lc, r] = log_cdf_and_ratio(yi * f);
      loglik += lc;
      grad(i) = yi * r;
      w(i) = r * r + yi * f * r;
    }
    const Vector sw = w.array().max(0.0).sqrt();
    Matrix B = sw.asDiagonal() * K * sw.asDiagonal();
    B.diagonal().array() += 1.0;
    Eigen::LLT<Matrix> llt(B);
    if (llt.info() != Eigen::Success) return false;
    const Vector b = w.cwiseProduct(g) + grad;
    const Vector c = llt.solve(sw.cwiseProduct(K * b));
    Vector a_new = b - sw.cwiseProduct(c);
    Vector g_new = K * a_new;
    // step halving keeps the objective non-decreasing
    auto objective_at = [&](const Vector& gg, const Vector& aa) {
      double ll = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) ll += log_cdf_and_ratio(m.y(i) * (gg(i) + m.hyper.mean)).first;
      return -0.5 * aa.dot(gg) + ll;
    };
    double obj_new = objective_at(g_new, a_new);
    for (int h = 0; h < 20 && obj_new < objective - 1e-12; ++h) {
      a_new = 0.5 * (a + a_new);
      g_new = K * a_new;
      obj_new = objective_at(g_new, a_new);
    }
    const double change = obj_new - objective;
    a = a_new;
    g = g_new;
    objective = obj_new;
    if (std::abs(change) < 1e-10) break;
  }
  // final posterior quantities at the mode
  loglik = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double f = g(i) + m.hyper.mean;
    const double yi = m.y(i);
    const auto [lc, r] = log_cdf_and_ratio(yi * f);
    loglik += lc;
    grad(i) = yi * r;
    w(i) = r * r + yi * f * r;
  }
  m.sqrt_w = w.array().max(0.0).sqrt();
  Matrix B = m.sqrt_w.asDiagonal() * K * m.sqrt_w.asDiagonal();
  B.diagonal().array() += 1.0;
  m.llt_b.compute(B);
  if (m.llt_b.info() != Eigen::Success) return false;
  const Matrix L = m.llt_b.matrixL();
  m.grad_loglik = grad;
  m.log_marginal = -0.5 * a.dot(g) + loglik - L.diagonal().array().log().sum();
  m.newton_iterations = it + 1;
  return std::isfinite(m.log_marginal);
}

inline void fit_fixed(GPModel& m) {
  double jitter = 0.0;
  for (int attempt = 0; attempt < 6; ++attempt) {
    if (laplace_fit(m, jitter)) return;
    jitter = jitter == 0.0 ? 1e-8 : jitter * 100.0;
  }
  throw Error(ErrorKind::CholeskyFailure, "GP factorisation failed even with added jitter");
}

}  // namespace detail

/// Median pairwise Euclidean distance between rows (1 if all coincide).
inline double median_distance(const Matrix& X) {
  std::vector<double> d;
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = i + 1; j < X.rows(); ++j) d.push_back((X.row(i) - X.row(j)).norm());
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 0.0 ? *mid : 1.0;
}

/// Fits with fixed hyperparameters.
inline GPModel gp_fit_fixed(const Matrix& X, std::span<const int> y, const GPHyper& h) {
  if (X.rows() != static_cast<Eigen::Index>(y.size()))
    throw Error(ErrorKind::DimensionMismatch, "X rows and labels differ");
  GPModel m;
  m.hyper = h;
  m.X = X;
  m.y.resize(X.rows());
  for (std::size_t i = 0; i < y.size(); ++i) m.y(static_cast<Eigen::Index>(i)) = y[i];
  detail::fit_fixed(m);
  return m;
}

/// Grid search over (length scale, signal std, noise std, constant mean)
/// maximising the Laplace approximate marginal likelihood.
inline GPModel gp_fit(const Matrix& X, std::span<const int> y) {
  if (X.cols() < 1) throw Error(ErrorKind::DimensionMismatch, "GP needs at least one feature");
  if (X.rows() < 10) throw Error(ErrorKind::TooFewSamples, "GP needs at least 10 samples");
  check_labels(y);
  const double med = median_distance(X);
  std::optional<GPModel> best;
  for (double lf : constants::kLengthScaleFactors)
    for (double sf : constants::kSignalStd)
      for (double sn : constants::kNoiseStd)
        for (double c : constants::kMeanGrid) {
          GPModel m = gp_fit_fixed(X, y, GPHyper{lf * med, sf, sn, c});
          if (!best || m.log_marginal > best->log_marginal) best = std::move(m);
        }
  return std::move(*best);
}

inline GPPrediction gp_predict(const GPModel& m, const Vector& x) {
  if (x.size() != m.X.cols())
    throw Error(ErrorKind::DimensionMismatch, "expected " + std::to_string(m.X.cols()) + " features, got " +
                                                  std::to_string(x.size()));
  const Matrix ks = se_kernel(m.X, x.transpose(), m.hyper);
  const Vector k = ks.col(0);
  const double mean = m.hyper.mean + k.dot(m.grad_loglik);
  const Vector v = m.llt_b.matrixL().solve(m.sqrt_w.cwiseProduct(k));
  const double prior = m.hyper.signal_std * m.hyper.signal_std;
  const double var = std::max(0.0, prior - v.squaredNorm());
  GPPrediction p;
  p.variance = var;
  p.score = 2.0 * detail::norm_cdf(mean / std::sqrt(1.0 + var)) - 1.0;
  return p;
}

// ---------------------------------------------------------------------------
// Trained classifier = standardiser + selection + GP

struct Classifier {
  std::vector<std::size_t> features;  // indices into the full feature vector
  Standardizer standardizer;          // over the selected features
  GPModel gp;
  std::vector<double> selection_frequency;
};

struct ClassifierOptions {
  RfeOptions rfe;
  bool use_rfe = true;
};

inline Classifier train_classifier(const Matrix& X, std::span<const int> y, const ClassifierOptions& opt = {}) {
  Classifier c;
  if (opt.use_rfe && static_cast<std::size_t>(X.cols()) > opt.rfe.target) {
    const auto sel = rfe(X, y, opt.rfe);
    c.features = sel.selected;
    c.selection_frequency = sel.frequency;
  } else {
    c.features.resize(static_cast<std::size_t>(X.cols()));
    std::iota(c.features.begin(), c.features.end(), 0);
  }
  if (c.features.empty()) throw Error(ErrorKind::InvalidArgument, "no feature reached the selection cutoff");
  const Matrix Xs = select_columns(X, c.features);
  c.standardizer = fit_standardizer(Xs);
  if (c.standardizer.kept.empty()) throw Error(ErrorKind::InvalidArgument, "all selected features are constant");
  c.gp = gp_fit(c.standardizer.transform(Xs), y);
  return c;
}

inline GPPrediction predict(const Classifier& c, std::span<const double> full) {
  Vector xs(static_cast<Eigen::Index>(c.features.size()));
  for (std::size_t j = 0; j < c.features.size(); ++j) {
    if (c.features[j] >= full.size()) throw Error(ErrorKind::DimensionMismatch, "feature vector too short");
    xs(static_cast<Eigen::Index>(j)) = full[c.features[j]];
  }
  return gp_predict(c.gp, c.standardizer.transform(xs));
}

// ---------------------------------------------------------------------------
// Decisions

struct DiagnosisReport {
  std::string recording_id;
  double score = 0.0;
  double variance = 0.0;
  bool label = false;
  double threshold = constants::kThreshold;
  bool hla_used = false;
  std::optional<bool> hla_positive;
  std::vector<double> member_scores;
};

/// Mean and population variance of per-model scores; positive at >= -0.03.
inline DiagnosisReport ensemble_diagnose(std::span<const double> scores, double threshold = constants::kThreshold) {
  if (scores.empty()) throw Error(ErrorKind::InvalidArgument, "no scores to combine");
  DiagnosisReport r;
  double s = 0.0;
  for (double v : scores) s += v;
  r.score = s / static_cast<double>(scores.size());
  double var = 0.0;
  for (double v : scores) var += (v - r.score) * (v - r.score);
  r.variance = var / static_cast<double>(scores.size());
  r.threshold = threshold;
  r.label = r.score >= r.threshold;
  r.member_scores.assign(scores.begin(), scores.end());
  return r;
}

/// HLA-negative forces a negative call; HLA-positive uses the -0.53 cut-off.
inline DiagnosisReport apply_hla(DiagnosisReport r, bool hla_positive,
                                 double threshold = constants::kHlaThreshold) {
  r.hla_used = true;
  r.hla_positive = hla_positive;
  r.threshold = threshold;
  r.label = hla_positive && r.score >= r.threshold;
  return r;
}

inline nlohmann::ordered_json to_json(const DiagnosisReport& r) {
  nlohmann::ordered_json j;
  j["recording_id"] = r.recording_id;
  j["score"] = r.score;
  j["variance"] = r.variance;
  j["label"] = r.label;
  j["threshold"] = r.threshold;
  j["hla_used"] = r.hla_used;
  j["hla_positive"] = r.hla_positive ? nlohmann::ordered_json(*r.hla_positive) : nlohmann::ordered_json();
  j["member_scores"] = r.member_scores;
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation

struct RocPoint {
  double threshold;
  double sensitivity;
  double specificity;
};

struct Interval {
  double lo = 0.0, hi = 0.0;
};

/// Wilson score interval for k successes out of n.
inline Interval wilson(std::size_t k, std::size_t n, double z = constants::kWilsonZ) {
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double centre = (p + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn)) / (1 + z2 / nn);
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

struct Evaluation {
  double threshold = constants::kThreshold;
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  double sensitivity = 0.0, specificity = 0.0;
  Interval sensitivity_ci, specificity_ci;
  double auc = 0.0;
  std::vector<RocPoint> roc;
};

/// Positive call when score >= threshold. ROC sweeps every distinct score
/// (plus +inf); AUC counts tied positive/negative pairs as one half.
inline Evaluation evaluate(std::span<const double> scores, std::span<const bool> truth,
                           double threshold = constants::kThreshold) {
  if (scores.size() != truth.size()) throw Error(ErrorKind::DimensionMismatch, "scores and truth differ in length");
  std::size_t P = 0, N = 0;
  for (bool t : truth) (t ? P : N) += 1;
  if (P == 0 || N == 0) throw Error(ErrorKind::SingleClass, "evaluation needs both classes");
  Evaluation e;
  e.threshold = threshold;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool call = scores[i] >= threshold;
    if (truth[i]) (call ? e.tp : e.fn) += 1;
    else (call ? e.fp : e.tn) += 1;
  }
  e.sensitivity = static_cast<double>(e.tp) / static_cast<double>(P);
  e.specificity = static_cast<double>(e.tn) / static_cast<double>(N);
  e.sensitivity_ci = wilson(e.tp, P);
  e.specificity_ci = wilson(e.tn, N);

  std::vector<double> cuts(scores.begin(), scores.end());
  std::sort(cuts.begin(), cuts.end(), std::greater<>());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  e.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  for (double c : cuts) {
    std::size_t tp = 0, tn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool call = scores[i] >= c;
      tp += truth[i] && call;
      tn += !truth[i] && !call;
    }
    e.roc.push_back({c, static_cast<double>(tp) / static_cast<double>(P), static_cast<double>(tn) / static_cast<double>(N)});
  }
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!truth[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (truth[j]) continue;
      pairs += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  e.auc = pairs / (static_cast<double>(P) * static_cast<double>(N));
  return e;
}

inline nlohmann::ordered_json to_json(const Evaluation& e) {
  nlohmann::ordered_json j;
  j["threshold"] = e.threshold;
  j["tp"] = e.tp;
  j["fn"] = e.fn;
  j["tn"] = e.tn;
  j["fp"] = e.fp;
  j["sensitivity"] = e.sensitivity;
  j["sensitivity_ci95"] = {e.sensitivity_ci.lo, e.sensitivity_ci.hi};
  j["specificity"] = e.specificity;
  j["specificity_ci95"] = {e.specificity_ci.lo, e.specificity_ci.hi};
  j["auc"] = e.auc;
  return j;
}

inline void write_roc_csv(std::ostream& out, const Evaluation& e) {
  out << "threshold,sensitivity,specificity\n";
  char buf[96];
  for (const auto& p : e.roc) {
    if (std::isinf(p.threshold))
      std::snprintf(buf, sizeof buf, "inf,%.10g,%.10g\n", p.sensitivity, p.specificity);
    else
      std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.10g\n", p.threshold, p.sensitivity, p.specificity);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Archive: <name>.json (hyperparameters, selection, standardiser) plus
// <name>.X.f32le (row-major training inputs). Loading refits the posterior
// at the stored hyperparameters from the float inputs.

inline void save_classifier(const Classifier& c, const std::filesystem::path& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["features"] = c.features;
  j["selection_frequency"] = c.selection_frequency;
  j["standardizer"] = {{"kept", c.standardizer.kept},
                       {"mean", c.standardizer.mean},
                       {"scale", c.standardizer.scale},
                       {"dropped", c.standardizer.dropped}};
  j["hyper"] = {{"length_scale", c.gp.hyper.length_scale},
                {"signal_std", c.gp.hyper.signal_std},
                {"noise_std", c.gp.hyper.noise_std},
                {"mean", c.gp.hyper.mean}};
  j["log_marginal"] = c.gp.log_marginal;
  j["rows"] = c.gp.X.rows();
  j["cols"] = c.gp.X.cols();
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < c.gp.y.size(); ++i) labels.push_back(static_cast<int>(c.gp.y(i)));
  j["labels"] = labels;
  j["X"] = name + ".X.f32le";
  std::vector<float> blob;
  blob.reserve(static_cast<std::size_t>(c.gp.X.size()));
  for (Eigen::Index i = 0; i < c.gp.X.rows(); ++i)
    for (Eigen::Index k = 0; k < c.gp.X.cols(); ++k) blob.push_back(static_cast<float>(c.gp.X(i, k)));
  write_f32le(dir / (name + ".X.f32le"), blob);
  std::ofstream out(dir / (name + ".json"), std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write classifier in " + dir.string());
  out << j.dump(2) << '\n';
}

inline Classifier load_classifier(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + manifest.string());
  try {
    const auto j = nlohmann::json::parse(in);
    Classifier c;
    c.features = j.at("features").get<std::vector<std::size_t>>();
    c.selection_frequency = j.at("selection_frequency").get<std::vector<double>>();
    const auto& s = j.at("standardizer");
    c.standardizer.kept = s.at("kept").get<std::vector<std::size_t>>();
    c.standardizer.mean = s.at("mean").get<std::vector<double>>();
    c.standardizer.scale = s.at("scale").get<std::vector<double>>();
    c.standardizer.dropped = s.at("dropped").get<std::vector<std::size_t>>();
    GPHyper h;
    h.length_scale = j.at("hyper").at("length_scale").get<double>();
    h.signal_std = j.at("hyper").at("signal_std").get<double>();
    h.noise_std = j.at("hyper").at("noise_std").get<double>();
    h.mean = j.at("hyper").at("mean").get<double>();
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto labels = j.at("labels").get<std::vector<int>>();
    const auto blob = read_f32le(manifest.parent_path() / j.at("X").get<std::string>());
    if (static_cast<Eigen::Index>(blob.size()) != rows * cols || static_cast<Eigen::Index>(labels.size()) != rows)
      throw Error(ErrorKind::LengthMismatch, "classifier training matrix size mismatch");
    if (static_cast<std::size_t>(cols) != c.standardizer.kept.size())
      throw Error(ErrorKind::CorruptHeader, "standardiser and training matrix disagree");
    Matrix X(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index k = 0; k < cols; ++k) X(i, k) = blob[static_cast<std::size_t>(i * cols + k)];
    c.gp = gp_fit_fixed(X, labels, h);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, manifest.string() + ": " + e.what());
  }
}

}  // namespace hypnodx::dx
