#pragma once

// Toy-scale sleep stage classifier. Three modality sub-networks (EEG, EOG,
// EMG) of strided 1-D convolutions with global average pooling feed a merged
// feature vector, which is standardised and passed to either a fully
// connected hidden layer (FF) or an LSTM layer (memory), then a 5-way softmax.
// Gradients are computed analytically; grad_check() compares them against
// central finite differences.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypnodx/encoding.hpp"
#include "hypnodx/error.hpp"
#include "hypnodx/signal_io.hpp"

namespace hypnodx::nn {

namespace constants {
inline constexpr double kWeightDecay = 0.00001;
inline constexpr double kMomentum = 0.9;
inline constexpr double kInitialLearningRate = 0.005;
inline constexpr double kDecayTimeConstant = 12000.0;
inline constexpr double kDropoutKeep = 0.5;
inline constexpr double kInitStd = 0.01;
inline constexpr double kBlockS = 300.0;
inline constexpr double kValidationFraction = 0.10;
inline constexpr int kValidateEveryBatches = 50;
inline constexpr int kPatience = 3;
inline constexpr int kBatchSize = 64;
inline constexpr int kEnsembleSize = 16;
inline constexpr double kEnsembleScaleLo = 0.5;
inline constexpr double kEnsembleScaleHi = 1.5;
inline constexpr double kLogClamp = 1e-12;
inline constexpr double kNormEps = 1e-8;
inline constexpr double kNormMomentum = 0.1;
}  // namespace constants

using Prob5 = std::array<double, kNumStages>;

enum class NetMode { FF, LSTM };
enum class Complexity { low, high };
enum class LossKind { eq8, categorical };

struct NetworkConfig {
  NetMode mode = NetMode::FF;
  Complexity complexity = Complexity::low;
  EncodingMode encoding = EncodingMode::cc;
  int segment_s = 5;
  std::array<int, 3> conv_features = {4, 4, 4};  // EEG, EOG, EMG at low complexity
  int hidden = 16;
  int kernel = 5;
  int stride = 2;
  double dropout_keep = constants::kDropoutKeep;
  LossKind loss = LossKind::eq8;
  std::uint64_t seed = 1;

  // training recipe
  double lambda = constants::kWeightDecay;
  double momentum = constants::kMomentum;
  double eta0 = constants::kInitialLearningRate;
  double tau = constants::kDecayTimeConstant;
  double init_std = constants::kInitStd;
  int batch_size = constants::kBatchSize;
  int validate_every = constants::kValidateEveryBatches;
  int patience = constants::kPatience;
  int max_epochs = 200;

  int conv_layers() const { return encoding == EncodingMode::cc ? 2 : 3; }
  int features(std::size_t m) const {
    return conv_features[m] * (complexity == Complexity::high ? 2 : 1);
  }
  int hidden_units() const { return hidden * (complexity == Complexity::high ? 2 : 1); }

  void validate() const {
    if (segment_s <= 0 || 30 % segment_s != 0)
      throw Error(ErrorKind::InvalidArgument, "segment_s must divide 30");
    for (int f : conv_features)
      if (f <= 0) throw Error(ErrorKind::InvalidArgument, "conv feature counts must be > 0");
    if (hidden <= 0 || kernel <= 0 || stride <= 0 || batch_size <= 0 || validate_every <= 0 ||
        patience <= 0 || max_epochs <= 0)
      throw Error(ErrorKind::InvalidArgument, "network sizes must be > 0");
    if (!(dropout_keep > 0.0 && dropout_keep <= 1.0))
      throw Error(ErrorKind::InvalidArgument, "dropout_keep must lie in (0, 1]");
  }
};

inline nlohmann::ordered_json to_json(const NetworkConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = c.mode == NetMode::FF ? "FF" : "LSTM";
  j["complexity"] = c.complexity == Complexity::low ? "low" : "high";
  j["encoding"] = to_string(c.encoding);
  j["segment_s"] = c.segment_s;
  j["conv_features"] = c.conv_features;
  j["hidden"] = c.hidden;
  j["kernel"] = c.kernel;
  j["stride"] = c.stride;
  j["dropout_keep"] = c.dropout_keep;
  j["loss"] = c.loss == LossKind::eq8 ? "eq8" : "categorical";
  j["seed"] = c.seed;
  j["lambda"] = c.lambda;
  j["momentum"] = c.momentum;
  j["eta0"] = c.eta0;
  j["tau"] = c.tau;
  j["init_std"] = c.init_std;
  j["batch_size"] = c.batch_size;
  j["validate_every"] = c.validate_every;
  j["patience"] = c.patience;
  j["max_epochs"] = c.max_epochs;
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "mode",   "complexity", "encoding", "segment_s", "conv_features", "hidden",   "kernel",
      "stride", "dropout_keep", "loss",   "seed",      "lambda",        "momentum", "eta0",
      "tau",    "init_std",   "batch_size", "validate_every", "patience", "max_epochs"};
  if (!j.is_object()) throw Error(ErrorKind::InvalidArgument, "network config must be an object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw Error(ErrorKind::InvalidArgument, "unknown network config key '" + k + "'");
  NetworkConfig c;
  try {
    if (j.contains("mode")) {
      const auto m = j["mode"].get<std::string>();
      if (m != "FF" && m != "LSTM") throw Error(ErrorKind::InvalidArgument, "mode must be FF or LSTM");
      c.mode = m == "FF" ? NetMode::FF : NetMode::LSTM;
    }
    if (j.contains("complexity")) {
      const auto m = j["complexity"].get<std::string>();
      if (m != "low" && m != "high") throw Error(ErrorKind::InvalidArgument, "complexity must be low or high");
      c.complexity = m == "low" ? Complexity::low : Complexity::high;
    }
    if (j.contains("encoding")) c.encoding = parse_encoding_mode(j["encoding"].get<std::string>());
    if (j.contains("loss")) {
      const auto m = j["loss"].get<std::string>();
      if (m != "eq8" && m != "categorical") throw Error(ErrorKind::InvalidArgument, "loss must be eq8 or categorical");
      c.loss = m == "eq8" ? LossKind::eq8 : LossKind::categorical;
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    get("segment_s", c.segment_s);
    get("conv_features", c.conv_features);
    get("hidden", c.hidden);
    get("kernel", c.kernel);
    get("stride", c.stride);
    get("dropout_keep", c.dropout_keep);
    get("seed", c.seed);
    get("lambda", c.lambda);
    get("momentum", c.momentum);
    get("eta0", c.eta0);
    get("tau", c.tau);
    get("init_std", c.init_std);
    get("batch_size", c.batch_size);
    get("validate_every", c.validate_every);
    get("patience", c.patience);
    get("max_epochs", c.max_epochs);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Inputs

/// One modality's input for one window: rows of (channels x length).
struct ModalityInput {
  std::size_t rows = 0, channels = 0, length = 0;
  std::vector<float> data;

  const float* row(std::size_t r) const { return data.data() + r * channels * length; }
};

struct Window {
  std::array<ModalityInput, 3> inputs;  // EEG, EOG, EMG
};

/// Cuts an encoded recording into consecutive network windows of
/// `segment_s`. CC rows past the end of the grid repeat the last row.
inline std::vector<Window> make_windows(const EncodedRecording& enc, int segment_s) {
  const auto n_windows = static_cast<std::size_t>(std::floor(enc.duration_s / segment_s + 1e-9));
  std::vector<Window> out(n_windows);
  for (std::size_t m = 0; m < 3; ++m) {
    const auto& t = enc.modalities.at(kModalities[m]);
    if (t.shape.size() != 3) throw Error(ErrorKind::ShapeMismatch, "modality tensors must be rank 3");
    const std::size_t rows = t.shape[0], ch = t.shape[1], len = t.shape[2];
    for (std::size_t w = 0; w < n_windows; ++w) {
      ModalityInput in;
      in.channels = ch;
      if (enc.mode == EncodingMode::octave) {
        const auto per = static_cast<std::size_t>(std::llround(segment_s * enc.fs));
        in.rows = 1;
        in.length = per;
        in.data.resize(ch * per);
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t i = 0; i < per; ++i) {
            const std::size_t src = std::min(w * per + i, len - 1);
            in.data[c * per + i] = t.data[c * len + src];
          }
      } else {
        const auto per = static_cast<std::size_t>(std::llround(segment_s / enc.grid_hop_s));
        in.rows = per;
        in.length = len;
        in.data.resize(per * ch * len);
        for (std::size_t r = 0; r < per; ++r) {
          const std::size_t src = std::min(w * per + r, rows - 1);
          std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(src * ch * len), ch * len,
                      in.data.begin() + static_cast<std::ptrdiff_t>(r * ch * len));
        }
      }
      out[w].inputs[m] = std::move(in);
    }
  }
  return out;
}

/// Label of the scoring epoch containing each window's start; -1 when unscored.
inline std::vector<int> window_labels(const HypnogramLabels& hyp, int segment_s, std::size_t n_windows) {
  std::vector<int> labels(n_windows, -1);
  for (std::size_t w = 0; w < n_windows; ++w) {
    const auto e = static_cast<std::size_t>(std::floor(static_cast<double>(w) * segment_s / hyp.epoch_s + 1e-9));
    if (e < hyp.stages.size() && is_scored(hyp.stages[e])) labels[w] = static_cast<int>(index(hyp.stages[e]));
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Parameters

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;
  std::size_t size = 0;
};

struct ModelParams {
  std::vector<double> values;
  std::vector<ParamBlock> blocks;

  std::size_t count() const { return values.size(); }
  const ParamBlock& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    throw Error(ErrorKind::InvalidArgument, "no parameter block " + name);
  }
  std::span<double> view(const std::string& name) {
    const auto& b = block(name);
    return {values.data() + b.offset, b.size};
  }
};

struct ConvIdx {
  std::size_t w = 0, b = 0;
  std::size_t fout = 0, cin = 0;
};

/// Offsets of every layer inside the flat parameter vector.
struct Layout {
  std::array<std::vector<ConvIdx>, 3> conv;
  std::size_t merged = 0;  // sum of final feature maps
  std::size_t hidden = 0;
  // FF head
  std::size_t wh = 0, bh = 0;
  // LSTM head (gate order i, f, g, o)
  std::size_t wx = 0, whh = 0, bl = 0;
  // output
  std::size_t wo = 0, bo = 0;
  std::size_t total = 0;
};

inline std::pair<Layout, std::vector<ParamBlock>> make_layout(const NetworkConfig& cfg,
                                                              const std::array<std::size_t, 3>& in_channels) {
  Layout L;
  std::vector<ParamBlock> blocks;
  std::size_t off = 0;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    blocks.push_back({std::move(name), off, std::move(shape), n});
    const auto at = off;
    off += n;
    return at;
  };
  const auto K = static_cast<std::size_t>(cfg.kernel);
  for (std::size_t m = 0; m < 3; ++m) {
    std::size_t cin = in_channels[m];
    const auto f = static_cast<std::size_t>(cfg.features(m));
    for (int l = 0; l < cfg.conv_layers(); ++l) {
      const std::string base = std::string(kModalities[m]) + ".conv" + std::to_string(l);
      ConvIdx c;
      c.fout = f;
      c.cin = cin;
      c.w = add(base + ".w", {f, cin, K});
      c.b = add(base + ".b", {f});
      L.conv[m].push_back(c);
      cin = f;
    }
    L.merged += f;
  }
  L.hidden = static_cast<std::size_t>(cfg.hidden_units());
  if (cfg.mode == NetMode::FF) {
    L.wh = add("head.w", {L.hidden, L.merged});
    L.bh = add("head.b", {L.hidden});
  } else {
    L.wx = add("lstm.wx", {4 * L.hidden, L.merged});
    L.whh = add("lstm.wh", {4 * L.hidden, L.hidden});
    L.bl = add("lstm.b", {4 * L.hidden});
  }
  L.wo = add("out.w", {kNumStages, L.hidden});
  L.bo = add("out.b", {kNumStages});
  L.total = off;
  return {L, blocks};
}

/// Per-feature standardisation of the merged sub-network output, using
/// running training statistics (stands in for batch normalisation).
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> var;
  bool initialised = false;
};

struct Model {
  NetworkConfig config;
  std::array<std::size_t, 3> in_channels{};
  ModelParams params;
  Normalizer norm;
  Layout layout;
};

inline Model make_model(const NetworkConfig& cfg, const std::array<std::size_t, 3>& in_channels) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.in_channels = in_channels;
  auto [layout, blocks] = make_layout(cfg, in_channels);
  m.layout = layout;
  m.params.blocks = std::move(blocks);
  m.params.values.assign(layout.total, 0.0);
  m.norm.mean.assign(layout.merged, 0.0);
  m.norm.var.assign(layout.merged, 1.0);
  return m;
}

/// All parameters drawn from N(0, init_std^2).
inline void init_params(Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, m.config.init_std);
  for (auto& v : m.params.values) v = d(rng);
}

inline std::array<std::size_t, 3> input_channels(const Window& w) {
  return {w.inputs[0].channels, w.inputs[1].channels, w.inputs[2].channels};
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad_from_output(double y) { return y > 0.0 ? 1.0 : y + 1.0; }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Prob5 softmax(const std::array<double, kNumStages>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  Prob5 p{};
  double s = 0.0;
  for (std::size_t i = 0; i < kNumStages; ++i) s += (p[i] = std::exp(z[i] - mx));
  for (auto& v : p) v /= s;
  return p;
}

struct ConvCache {
  // per row, per layer: outputs (F x Lout); input of layer 0 is the window data
  std::vector<std::vector<std::vector<double>>> out;
  std::vector<std::size_t> len;  // length after each layer
};

struct WindowCache {
  std::array<ConvCache, 3> conv;
  std::vector<double> z;     // merged features
  std::vector<double> zhat;  // standardised
};

inline std::size_t conv_out_len(std::size_t len, std::size_t k, std::size_t s) {
  if (len < k) throw Error(ErrorKind::ShapeMismatch, "input shorter than the convolution kernel");
  return (len - k) / s + 1;
}

template <typename T>
void conv_forward(const double* w, const double* b, std::size_t fout, std::size_t cin, std::size_t k,
                  std::size_t stride, const T* x, std::size_t len, std::vector<double>& y, std::size_t lout) {
  y.assign(fout * lout, 0.0);
  for (std::size_t f = 0; f < fout; ++f) {
    double* yf = y.data() + f * lout;
    for (std::size_t p = 0; p < lout; ++p) yf[p] = b[f];
    for (std::size_t c = 0; c < cin; ++c) {
      const T* xc = x + c * len;
      const double* wfc = w + (f * cin + c) * k;
      for (std::size_t p = 0; p < lout; ++p) {
        const T* xp = xc + p * stride;
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += wfc[j] * static_cast<double>(xp[j]);
        yf[p] += acc;
      }
    }
    for (std::size_t p = 0; p < lout; ++p) yf[p] = elu(yf[p]);
  }
}

/// dy holds dL/d(output) on entry and is overwritten with dL/d(pre-activation).
template <typename T>
void conv_backward(const double* w, double* gw, double* gb, std::size_t fout, std::size_t cin, std::size_t k,
                   std::size_t stride, const T* x, std::size_t len, const std::vector<double>& y,
                   std::vector<double>& dy, std::size_t lout, std::vector<double>* dx) {
  for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= elu_grad_from_output(y[i]);
  if (dx) dx->assign(cin * len, 0.0);
  for (std::size_t f = 0; f < fout; ++f) {
    const double* df = dy.data() + f * lout;
    double sb = 0.0;
    for (std::size_t p = 0; p < lout; ++p) sb += df[p];
    gb[f] += sb;
    for (std::size_t c = 0; c < cin; ++c) {
      const T* xc = x + c * len;
      double* gwfc = gw + (f * cin + c) * k;
      const double* wfc = w + (f * cin + c) * k;
      for (std::size_t p = 0; p < lout; ++p) {
        const double d = df[p];
        if (d == 0.0) continue;
        const T* xp = xc + p * stride;
        for (std::size_t j = 0; j < k; ++j) gwfc[j] += d * static_cast<double>(xp[j]);
        if (dx) {
          double* dxp = dx->data() + c * len + p * stride;
          for (std::size_t j = 0; j < k; ++j) dxp[j] += d * wfc[j];
        }
      }
    }
  }
}

/// Sub-networks + merge + standardisation for one window.
inline void features_forward(const Model& m, const Window& win, WindowCache& cache) {
  const auto& L = m.layout;
  const auto K = static_cast<std::size_t>(m.config.kernel);
  const auto S = static_cast<std::size_t>(m.config.stride);
  const double* P = m.params.values.data();
  cache.z.assign(L.merged, 0.0);
  std::size_t zoff = 0;
  for (std::size_t mod = 0; mod < 3; ++mod) {
    const auto& in = win.inputs[mod];
    if (in.channels != m.in_channels[mod])
      throw Error(ErrorKind::ShapeMismatch, std::string(kModalities[mod]) + ": channel count differs from model");
    auto& cc = cache.conv[mod];
    const auto& layers = L.conv[mod];
    cc.len.assign(layers.size(), 0);
    std::size_t len = in.length;
    for (std::size_t l = 0; l < layers.size(); ++l) cc.len[l] = len = conv_out_len(len, K, S);
    cc.out.assign(in.rows, std::vector<std::vector<double>>(layers.size()));
    const std::size_t fl = layers.back().fout;
    for (std::size_t r = 0; r < in.rows; ++r) {
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& ci = layers[l];
        if (l == 0)
          conv_forward(P + ci.w, P + ci.b, ci.fout, ci.cin, K, S, in.row(r), in.length, cc.out[r][0], cc.len[0]);
        else
          conv_forward(P + ci.w, P + ci.b, ci.fout, ci.cin, K, S, cc.out[r][l - 1].data(), cc.len[l - 1],
                       cc.out[r][l], cc.len[l]);
      }
      const auto& last = cc.out[r].back();
      const std::size_t lout = cc.len.back();
      for (std::size_t f = 0; f < fl; ++f) {
        double s = 0.0;
        for (std::size_t p = 0; p < lout; ++p) s += last[f * lout + p];
        cache.z[zoff + f] += s;
      }
    }
    const double denom = static_cast<double>(in.rows * cc.len.back());
    for (std::size_t f = 0; f < fl; ++f) cache.z[zoff + f] /= denom;
    zoff += fl;
  }
  cache.zhat.resize(L.merged);
  for (std::size_t i = 0; i < L.merged; ++i)
    cache.zhat[i] = (cache.z[i] - m.norm.mean[i]) / std::sqrt(m.norm.var[i] + constants::kNormEps);
}

inline void features_backward(const Model& m, const Window& win, const WindowCache& cache,
                              const std::vector<double>& dzhat, std::vector<double>& grad) {
  const auto& L = m.layout;
  const auto K = static_cast<std::size_t>(m.config.kernel);
  const auto S = static_cast<std::size_t>(m.config.stride);
  const double* P = m.params.values.data();
  double* G = grad.data();
  std::size_t zoff = 0;
  std::vector<double> dy, dx;
  for (std::size_t mod = 0; mod < 3; ++mod) {
    const auto& in = win.inputs[mod];
    const auto& cc = cache.conv[mod];
    const auto& layers = L.conv[mod];
    const std::size_t fl = layers.back().fout;
    const std::size_t lout = cc.len.back();
    const double denom = static_cast<double>(in.rows * lout);
    for (std::size_t r = 0; r < in.rows; ++r) {
      dy.assign(fl * lout, 0.0);
      for (std::size_t f = 0; f < fl; ++f) {
        const double g = dzhat[zoff + f] / std::sqrt(m.norm.var[zoff + f] + constants::kNormEps) / denom;
        for (std::size_t p = 0; p < lout; ++p) dy[f * lout + p] = g;
      }
      for (std::size_t l = layers.size(); l-- > 0;) {
        const auto& ci = layers[l];
        if (l == 0) {
          conv_backward(P + ci.w, G + ci.w, G + ci.b, ci.fout, ci.cin, K, S, in.row(r), in.length,
                        cc.out[r][0], dy, cc.len[0], nullptr);
        } else {
          conv_backward(P + ci.w, G + ci.w, G + ci.b, ci.fout, ci.cin, K, S, cc.out[r][l - 1].data(),
                        cc.len[l - 1], cc.out[r][l], dy, cc.len[l], &dx);
          dy.swap(dx);
        }
      }
    }
    zoff += fl;
  }
}

/// d(per-window loss)/d(logits) and the loss value.
inline double output_loss_grad(const Prob5& p, int label, LossKind kind, std::array<double, kNumStages>& dlogit) {
  std::array<double, kNumStages> g{};
  double loss = 0.0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    const double y = static_cast<int>(c) == label ? 1.0 : 0.0;
    const double pc = std::max(p[c], constants::kLogClamp);
    const double qc = std::max(1.0 - p[c], constants::kLogClamp);
    if (kind == LossKind::eq8) {
      loss -= y * std::log(pc) + (1.0 - y) * std::log(qc);
      g[c] = -y / pc + (1.0 - y) / qc;
    } else {
      loss -= y * std::log(pc);
      g[c] = -y / pc;
    }
  }
  double s = 0.0;
  for (std::size_t c = 0; c < kNumStages; ++c) s += g[c] * p[c];
  for (std::size_t j = 0; j < kNumStages; ++j) dlogit[j] = p[j] * (g[j] - s);
  return loss;
}

}  // namespace detail

/// A run of consecutive windows (a recording or a 5-minute block) with labels.
struct LabeledSequence {
  std::vector<const Window*> windows;
  std::vector<int> labels;  // -1 = ignored
};

struct ForwardOptions {
  bool train_mode = false;
  std::mt19937_64* dropout_rng = nullptr;
  // fixed dropout masks, one per window (tests); overrides dropout_rng
  const std::vector<std::vector<double>>* fixed_masks = nullptr;
};

struct SequenceResult {
  std::vector<Prob5> probs;
  std::vector<std::vector<double>> features;  // raw merged features per window
};

namespace detail {

struct LstmStep {
  std::vector<double> x, h_prev, c_prev, i, f, g, o, c, tc, h, mask;
};

inline std::vector<double> dropout_mask(std::size_t n, double keep, const ForwardOptions& opt, std::size_t t) {
  std::vector<double> mask(n, 1.0);
  if (!opt.train_mode || keep >= 1.0) return mask;
  if (opt.fixed_masks) return (*opt.fixed_masks)[t];
  if (!opt.dropout_rng) return mask;
  std::bernoulli_distribution keep_d(keep);
  for (auto& v : mask) v = keep_d(*opt.dropout_rng) ? 1.0 / keep : 0.0;
  return mask;
}

/// Forward over a sequence. When `grad` is non-null, also accumulates the
/// gradient of sum(window losses) * scale and returns the summed loss.
inline double run_sequence(const Model& m, const LabeledSequence& seq, const ForwardOptions& opt,
                           SequenceResult* result, std::vector<double>* grad, double scale) {
  const auto& L = m.layout;
  const auto& cfg = m.config;
  const double* P = m.params.values.data();
  const std::size_t T = seq.windows.size();
  const std::size_t H = L.hidden, D = L.merged;

  std::vector<WindowCache> caches(T);
  for (std::size_t t = 0; t < T; ++t) features_forward(m, *seq.windows[t], caches[t]);

  std::vector<std::vector<double>> head(T);  // hidden activations fed to the output layer
  std::vector<LstmStep> steps;
  if (cfg.mode == NetMode::FF) {
    for (std::size_t t = 0; t < T; ++t) {
      head[t].assign(H, 0.0);
      for (std::size_t u = 0; u < H; ++u) {
        double a = P[L.bh + u];
        const double* w = P + L.wh + u * D;
        for (std::size_t d = 0; d < D; ++d) a += w[d] * caches[t].zhat[d];
        head[t][u] = elu(a);
      }
    }
  } else {
    steps.resize(T);
    std::vector<double> h(H, 0.0), c(H, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      auto& st = steps[t];
      st.x = caches[t].zhat;
      st.h_prev = h;
      st.c_prev = c;
      st.i.resize(H);
      st.f.resize(H);
      st.g.resize(H);
      st.o.resize(H);
      st.c.resize(H);
      st.tc.resize(H);
      st.h.resize(H);
      for (std::size_t gate = 0; gate < 4; ++gate) {
        for (std::size_t u = 0; u < H; ++u) {
          const std::size_t row = gate * H + u;
          double a = P[L.bl + row];
          const double* wx = P + L.wx + row * D;
          for (std::size_t d = 0; d < D; ++d) a += wx[d] * st.x[d];
          const double* wh = P + L.whh + row * H;
          for (std::size_t k = 0; k < H; ++k) a += wh[k] * st.h_prev[k];
          switch (gate) {
            case 0: st.i[u] = sigmoid(a); break;
            case 1: st.f[u] = sigmoid(a); break;
            case 2: st.g[u] = std::tanh(a); break;
            default: st.o[u] = sigmoid(a); break;
          }
        }
      }
      for (std::size_t u = 0; u < H; ++u) {
        st.c[u] = st.f[u] * st.c_prev[u] + st.i[u] * st.g[u];
        st.tc[u] = std::tanh(st.c[u]);
        st.h[u] = st.o[u] * st.tc[u];
      }
      st.mask = dropout_mask(H, cfg.dropout_keep, opt, t);
      head[t].resize(H);
      for (std::size_t u = 0; u < H; ++u) head[t][u] = st.h[u] * st.mask[u];
      h = st.h;
      c = st.c;
    }
  }

  std::vector<Prob5> probs(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::array<double, kNumStages> logit{};
    for (std::size_t k = 0; k < kNumStages; ++k) {
      double a = P[L.bo + k];
      const double* w = P + L.wo + k * H;
      for (std::size_t u = 0; u < H; ++u) a += w[u] * head[t][u];
      logit[k] = a;
    }
    probs[t] = softmax(logit);
  }
  if (result) {
    result->probs = probs;
    result->features.resize(T);
    for (std::size_t t = 0; t < T; ++t) result->features[t] = caches[t].z;
  }

  double total = 0.0;
  std::vector<std::array<double, kNumStages>> dlogits(T);
  for (std::size_t t = 0; t < T; ++t) {
    dlogits[t].fill(0.0);
    if (seq.labels.empty() || seq.labels[t] < 0) continue;
    total += output_loss_grad(probs[t], seq.labels[t], cfg.loss, dlogits[t]);
  }
  if (!grad) return total;
  double* G = grad->data();

  // output layer
  std::vector<std::vector<double>> dhead(T, std::vector<double>(H, 0.0));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < kNumStages; ++k) {
      const double d = dlogits[t][k] * scale;
      if (d == 0.0) continue;
      G[L.bo + k] += d;
      const double* w = P + L.wo + k * H;
      double* gw = G + L.wo + k * H;
      for (std::size_t u = 0; u < H; ++u) {
        gw[u] += d * head[t][u];
        dhead[t][u] += d * w[u];
      }
    }

  std::vector<std::vector<double>> dzhat(T, std::vector<double>(D, 0.0));
  if (cfg.mode == NetMode::FF) {
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t u = 0; u < H; ++u) {
        const double da = dhead[t][u] * elu_grad_from_output(head[t][u]);
        if (da == 0.0) continue;
        G[L.bh + u] += da;
        const double* w = P + L.wh + u * D;
        double* gw = G + L.wh + u * D;
        for (std::size_t d = 0; d < D; ++d) {
          gw[d] += da * caches[t].zhat[d];
          dzhat[t][d] += da * w[d];
        }
      }
  } else {
    std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0), da(4 * H);
    for (std::size_t t = T; t-- > 0;) {
      const auto& st = steps[t];
      for (std::size_t u = 0; u < H; ++u) {
        const double dh = dhead[t][u] * st.mask[u] + dh_next[u];
        const double d_o = dh * st.tc[u];
        const double dc = dh * st.o[u] * (1.0 - st.tc[u] * st.tc[u]) + dc_next[u];
        const double di = dc * st.g[u];
        const double dg = dc * st.i[u];
        const double df = dc * st.c_prev[u];
        dc_next[u] = dc * st.f[u];
        da[u] = di * st.i[u] * (1.0 - st.i[u]);
        da[H + u] = df * st.f[u] * (1.0 - st.f[u]);
        da[2 * H + u] = dg * (1.0 - st.g[u] * st.g[u]);
        da[3 * H + u] = d_o * st.o[u] * (1.0 - st.o[u]);
      }
      std::fill(dh_next.begin(), dh_next.end(), 0.0);
      for (std::size_t row = 0; row < 4 * H; ++row) {
        const double d = da[row];
        if (d == 0.0) continue;
        G[L.bl + row] += d;
        const double* wx = P + L.wx + row * D;
        double* gwx = G + L.wx + row * D;
        for (std::size_t k = 0; k < D; ++k) {
          gwx[k] += d * st.x[k];
          dzhat[t][k] += d * wx[k];
        }
        const double* wh = P + L.whh + row * H;
        double* gwh = G + L.whh + row * H;
        for (std::size_t k = 0; k < H; ++k) {
          gwh[k] += d * st.h_prev[k];
          dh_next[k] += d * wh[k];
        }
      }
    }
  }
  for (std::size_t t = 0; t < T; ++t) features_backward(m, *seq.windows[t], caches[t], dzhat[t], *grad);
  return total;
}

}  // namespace detail

/// Stage probabilities for a run of consecutive windows. FF treats windows
/// independently; LSTM carries its state across them in order.
inline std::vector<Prob5> forward(const Model& m, std::span<const Window> windows, bool train_mode = false,
                                  std::mt19937_64* dropout_rng = nullptr) {
  LabeledSequence seq;
  for (const auto& w : windows) seq.windows.push_back(&w);
  ForwardOptions opt{train_mode, dropout_rng, nullptr};
  SequenceResult res;
  detail::run_sequence(m, seq, opt, &res, nullptr, 1.0);
  return res.probs;
}

inline double l2_norm_squared(std::span<const double> w) {
  double s = 0.0;
  for (double v : w) s += v * v;
  return s;
}

/// Mean over windows of the negated Eq.-8-style cross-entropy
/// -[y log p + (1-y) log(1-p)] summed over stages, plus lambda * ||w||^2.
inline double loss(std::span<const Prob5> preds, std::span<const int> labels, std::span<const double> params,
                   double lambda, LossKind kind = LossKind::eq8) {
  if (preds.size() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "preds/labels length differ");
  double total = 0.0;
  std::size_t n = 0;
  std::array<double, kNumStages> unused{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0) continue;
    total += detail::output_loss_grad(preds[i], labels[i], kind, unused);
    ++n;
  }
  return (n ? total / static_cast<double>(n) : 0.0) + lambda * l2_norm_squared(params);
}

/// Loss (mean over labelled windows + lambda ||w||^2) and its gradient for a batch.
inline double loss_and_grad(const Model& m, const std::vector<LabeledSequence>& batch, const ForwardOptions& opt,
                            std::vector<double>& grad, std::vector<std::vector<double>>* features = nullptr) {
  std::size_t n = 0;
  for (const auto& s : batch)
    for (int l : s.labels) n += l >= 0;
  const double scale = n ? 1.0 / static_cast<double>(n) : 0.0;
  grad.assign(m.params.count(), 0.0);
  double total = 0.0;
  SequenceResult res;
  for (const auto& s : batch) {
    total += detail::run_sequence(m, s, opt, features ? &res : nullptr, &grad, scale);
    if (features)
      for (auto& f : res.features) features->push_back(std::move(f));
  }
  const double lam = m.config.lambda;
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += 2.0 * lam * m.params.values[i];
  return total * scale + lam * l2_norm_squared(m.params.values);
}

// ---------------------------------------------------------------------------
// Optimiser

struct TrainState {
  std::vector<double> velocity;
  std::uint64_t t = 0;
  double eta0 = constants::kInitialLearningRate;
  double tau = constants::kDecayTimeConstant;
  double alpha = constants::kMomentum;
  double lambda = constants::kWeightDecay;

  double learning_rate() const { return eta0 * std::exp(-static_cast<double>(t) / tau); }
};

inline TrainState make_train_state(const NetworkConfig& cfg, std::size_t n_params) {
  TrainState s;
  s.velocity.assign(n_params, 0.0);
  s.eta0 = cfg.eta0;
  s.tau = cfg.tau;
  s.alpha = cfg.momentum;
  s.lambda = cfg.lambda;
  return s;
}

/// v <- alpha v - g;  w <- w + eta_t v;  eta_t = eta0 exp(-t/tau);  t <- t+1.
inline void sgd_momentum_step(std::span<double> params, std::span<const double> grads, TrainState& state,
                              const std::vector<ParamBlock>* blocks = nullptr) {
  if (params.size() != grads.size() || state.velocity.size() != params.size())
    throw Error(ErrorKind::ShapeMismatch, "params, grads and velocity must have equal length");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      std::string where = "index " + std::to_string(i);
      if (blocks)
        for (const auto& b : *blocks)
          if (i >= b.offset && i < b.offset + b.size)
            where = b.name + "[" + std::to_string(i - b.offset) + "]";
      throw Error(ErrorKind::NumericFailure,
                  "non-finite gradient at " + where + " (step " + std::to_string(state.t) + ")");
    }
  }
  const double eta = state.learning_rate();
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.velocity[i] = state.alpha * state.velocity[i] - grads[i];
    params[i] += eta * state.velocity[i];
  }
  ++state.t;
}

// ---------------------------------------------------------------------------
// Training

struct RecordingData {
  std::vector<Window> windows;
  std::vector<int> labels;
};

struct TrainResult {
  Model model;  // best validation checkpoint
  std::vector<double> validation_accuracy;
  std::size_t best_validation = 0;
  bool stopped_early = false;
  std::uint64_t steps = 0;
  double train_accuracy = 0.0;
};

inline double accuracy(const Model& m, const std::vector<LabeledSequence>& seqs) {
  std::size_t hit = 0, n = 0;
  SequenceResult res;
  for (const auto& s : seqs) {
    detail::run_sequence(m, s, ForwardOptions{}, &res, nullptr, 1.0);
    for (std::size_t t = 0; t < s.windows.size(); ++t) {
      if (s.labels[t] < 0) continue;
      const auto& p = res.probs[t];
      const auto arg = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      hit += arg == s.labels[t];
      ++n;
    }
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

inline void update_normalizer(Normalizer& norm, const std::vector<std::vector<double>>& feats) {
  if (feats.empty()) return;
  const std::size_t D = norm.mean.size();
  std::vector<double> mu(D, 0.0), var(D, 0.0);
  for (const auto& f : feats)
    for (std::size_t d = 0; d < D; ++d) mu[d] += f[d];
  for (auto& v : mu) v /= static_cast<double>(feats.size());
  for (const auto& f : feats)
    for (std::size_t d = 0; d < D; ++d) var[d] += (f[d] - mu[d]) * (f[d] - mu[d]);
  for (auto& v : var) v /= static_cast<double>(feats.size());
  const double a = norm.initialised ? constants::kNormMomentum : 1.0;
  for (std::size_t d = 0; d < D; ++d) {
    norm.mean[d] = (1.0 - a) * norm.mean[d] + a * mu[d];
    norm.var[d] = (1.0 - a) * norm.var[d] + a * var[d];
  }
  norm.initialised = true;
}

/// Splits recordings into 5-minute blocks, shuffles them, holds out 10% for
/// validation, trains with SGD + momentum and validates every
/// `validate_every` batches. Stops after `patience` validations without
/// improvement and returns the best checkpoint.
inline TrainResult train(const std::vector<RecordingData>& dataset, const NetworkConfig& cfg) {
  cfg.validate();
  if (dataset.size() < 2) throw Error(ErrorKind::DatasetTooSmall, "training needs at least 2 recordings");
  for (const auto& r : dataset)
    if (r.windows.empty() || r.windows.size() != r.labels.size())
      throw Error(ErrorKind::ShapeMismatch, "each recording needs windows with one label each");

  std::mt19937_64 rng(cfg.seed);
  const auto per_block = static_cast<std::size_t>(std::llround(constants::kBlockS / cfg.segment_s));
  std::vector<LabeledSequence> blocks;
  for (const auto& r : dataset)
    for (std::size_t s = 0; s < r.windows.size(); s += per_block) {
      LabeledSequence b;
      for (std::size_t t = s; t < std::min(s + per_block, r.windows.size()); ++t) {
        b.windows.push_back(&r.windows[t]);
        b.labels.push_back(r.labels[t]);
      }
      blocks.push_back(std::move(b));
    }
  if (blocks.size() < 2) throw Error(ErrorKind::DatasetTooSmall, "need at least two 5-minute blocks");
  std::shuffle(blocks.begin(), blocks.end(), rng);
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(constants::kValidationFraction * static_cast<double>(blocks.size()))));
  std::vector<LabeledSequence> val(blocks.begin(), blocks.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<LabeledSequence> trn(blocks.begin() + static_cast<std::ptrdiff_t>(n_val), blocks.end());

  TrainResult out;
  Model model = make_model(cfg, input_channels(dataset.front().windows.front()));
  init_params(model, cfg.seed);
  TrainState state = make_train_state(cfg, model.params.count());
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  ForwardOptions opt{true, &dropout_rng, nullptr};

  // FF: individual windows shuffled across blocks; LSTM: whole blocks
  struct Item {
    const Window* w;
    int label;
  };
  std::vector<Item> items;
  if (cfg.mode == NetMode::FF)
    for (const auto& b : trn)
      for (std::size_t t = 0; t < b.windows.size(); ++t) items.push_back({b.windows[t], b.labels[t]});

  double best = -1.0;
  int strikes = 0;
  Model best_model = model;
  std::uint64_t batches = 0;
  std::vector<double> grad;
  bool stop = false;

  auto run_batch = [&](const std::vector<LabeledSequence>& batch) {
    std::vector<std::vector<double>> feats;
    loss_and_grad(model, batch, opt, grad, &feats);
    sgd_momentum_step(model.params.values, grad, state, &model.params.blocks);
    update_normalizer(model.norm, feats);
    ++batches;
    if (batches % static_cast<std::uint64_t>(cfg.validate_every) == 0) {
      const double acc = accuracy(model, val);
      out.validation_accuracy.push_back(acc);
      if (acc > best) {
        best = acc;
        best_model = model;
        out.best_validation = out.validation_accuracy.size() - 1;
        strikes = 0;
      } else if (++strikes >= cfg.patience) {
        out.stopped_early = true;
        stop = true;
      }
    }
  };

  for (int epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    if (cfg.mode == NetMode::FF) {
      std::shuffle(items.begin(), items.end(), rng);
      for (std::size_t s = 0; s < items.size() && !stop; s += static_cast<std::size_t>(cfg.batch_size)) {
        LabeledSequence seq;
        for (std::size_t i = s; i < std::min(items.size(), s + static_cast<std::size_t>(cfg.batch_size)); ++i) {
          seq.windows.push_back(items[i].w);
          seq.labels.push_back(items[i].label);
        }
        run_batch({seq});
      }
    } else {
      std::shuffle(trn.begin(), trn.end(), rng);
      std::vector<LabeledSequence> batch;
      std::size_t count = 0;
      for (std::size_t i = 0; i < trn.size() && !stop; ++i) {
        batch.push_back(trn[i]);
        count += trn[i].windows.size();
        if (count >= static_cast<std::size_t>(cfg.batch_size) || i + 1 == trn.size()) {
          run_batch(batch);
          batch.clear();
          count = 0;
        }
      }
    }
  }
  if (out.validation_accuracy.empty()) {
    // too few batches to reach a validation point: validate once at the end
    out.validation_accuracy.push_back(accuracy(model, val));
    best_model = model;
  }
  out.model = std::move(best_model);
  out.steps = state.t;
  out.train_accuracy = accuracy(out.model, trn);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

/// Max relative error between analytic and central-difference gradients over
/// `samples` randomly chosen parameters. Dropout is off (train_mode false).
inline double grad_check(const Model& model, const LabeledSequence& seq, std::size_t samples = 64,
                         double h = 1e-4, std::uint64_t seed = 7) {
  Model m = model;
  std::vector<double> grad;
  loss_and_grad(m, {seq}, ForwardOptions{}, grad);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, m.params.count() - 1);
  std::vector<double> unused;
  double worst = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t i = pick(rng);
    const double orig = m.params.values[i];
    m.params.values[i] = orig + h;
    const double lp = loss_and_grad(m, {seq}, ForwardOptions{}, unused);
    m.params.values[i] = orig - h;
    const double lm = loss_and_grad(m, {seq}, ForwardOptions{}, unused);
    m.params.values[i] = orig;
    const double numeric = (lp - lm) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-8});
    worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Ensembles

/// n variants of `tmpl` with every hidden size scaled by U(0.5, 1.5),
/// rounded, floored at 1. Member seeds are derived from `seed`.
inline std::vector<NetworkConfig> make_ensemble(const NetworkConfig& tmpl, int n, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorKind::InvalidArgument, "ensemble size must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(constants::kEnsembleScaleLo, constants::kEnsembleScaleHi);
  auto scale = [&](int s) { return std::max(1, static_cast<int>(std::lround(u(rng) * s))); };
  std::vector<NetworkConfig> out;
  for (int k = 0; k < n; ++k) {
    NetworkConfig c = tmpl;
    for (auto& f : c.conv_features) f = scale(f);
    c.hidden = scale(c.hidden);
    c.seed = rng();
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Archive: <name>.json manifest + <name>.f32le parameter blob

inline void save_model(const Model& m, const std::filesystem::path& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["config"] = to_json(m.config);
  j["in_channels"] = m.in_channels;
  j["tensors"] = nlohmann::ordered_json::array();
  for (const auto& b : m.params.blocks)
    j["tensors"].push_back({{"name", b.name}, {"shape", b.shape}, {"offset", b.offset}});
  j["norm_mean"] = m.norm.mean;
  j["norm_var"] = m.norm.var;
  j["blob"] = name + ".f32le";
  std::vector<float> blob(m.params.values.begin(), m.params.values.end());
  write_f32le(dir / (name + ".f32le"), blob);
  std::ofstream out(dir / (name + ".json"), std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write model manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

inline Model load_model(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + manifest.string());
  try {
    const auto j = nlohmann::json::parse(in);
    Model m = make_model(network_config_from_json(j.at("config")),
                         j.at("in_channels").get<std::array<std::size_t, 3>>());
    const auto blob = read_f32le(manifest.parent_path() / j.at("blob").get<std::string>());
    if (blob.size() != m.params.count())
      throw Error(ErrorKind::LengthMismatch, "parameter blob size does not match the configuration");
    for (const auto& t : j.at("tensors")) {
      const auto& b = m.params.block(t.at("name").get<std::string>());
      if (b.offset != t.at("offset").get<std::size_t>())
        throw Error(ErrorKind::CorruptHeader, "tensor offset mismatch for " + b.name);
    }
    std::copy(blob.begin(), blob.end(), m.params.values.begin());
    m.norm.mean = j.at("norm_mean").get<std::vector<double>>();
    m.norm.var = j.at("norm_var").get<std::vector<double>>();
    m.norm.initialised = true;
    if (m.norm.mean.size() != m.layout.merged || m.norm.var.size() != m.layout.merged)
      throw Error(ErrorKind::CorruptHeader, "normaliser size mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, manifest.string() + ": " + e.what());
  }
}

}  // namespace hypnodx::nn
