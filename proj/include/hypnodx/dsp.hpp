#pragma once

// IIR design and zero-phase filtering (second-order sections), plus
// polyphase rational resampling.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "hypnodx/error.hpp"

namespace hypnodx::dsp {

/// Transposed direct-form II biquad; a0 is normalised to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;

  std::complex<double> response(double omega) const {
    const std::complex<double> z1 = std::polar(1.0, -omega);
    const std::complex<double> z2 = z1 * z1;
    return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
  }
};

enum class FilterKind { highpass, lowpass };

struct FilterSpec {
  FilterKind kind = FilterKind::lowpass;
  int order = 5;
  double cutoff_hz = 0.0;
  bool bidirectional = true;
};

struct SosFilter {
  std::vector<Biquad> sections;

  /// Complex response of one pass at `freq_hz`.
  std::complex<double> response(double freq_hz, double fs) const {
    const double w = 2.0 * std::numbers::pi * freq_hz / fs;
    std::complex<double> h = 1.0;
    for (const auto& s : sections) h *= s.response(w);
    return h;
  }
};

/// Digital Butterworth filter via the bilinear transform with pre-warping.
/// Sections are normalised to unit gain in the passband (DC for lowpass,
/// Nyquist for highpass).
inline SosFilter butterworth(FilterKind kind, int order, double cutoff_hz, double fs) {
  if (order < 1) throw Error(ErrorKind::InvalidArgument, "filter order must be >= 1");
  if (!(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0))
    throw Error(ErrorKind::InvalidArgument, "cutoff must lie in (0, fs/2)");

  const double k = 2.0 * fs;
  const double warped = k * std::tan(std::numbers::pi * cutoff_hz / fs);
  const double zero = kind == FilterKind::lowpass ? -1.0 : 1.0;

  auto digital_pole = [&](int i) {
    const std::complex<double> proto =
        std::polar(1.0, std::numbers::pi * (2.0 * i + order + 1.0) / (2.0 * order));
    const std::complex<double> s = kind == FilterKind::lowpass ? warped * proto : warped / proto;
    return (k + s) / (k - s);
  };

  SosFilter f;
  // conjugate pairs: indices i and order-1-i share a pair; take the upper one
  for (int i = 0; i < order / 2; ++i) {
    const auto p = digital_pole(i);
    Biquad s;
    s.b0 = 1.0;
    s.b1 = -2.0 * zero;
    s.b2 = 1.0;
    s.a1 = -2.0 * p.real();
    s.a2 = std::norm(p);
    f.sections.push_back(s);
  }
  if (order % 2 == 1) {
    const auto p = digital_pole(order / 2);
    Biquad s;
    s.b0 = 1.0;
    s.b1 = -zero;
    s.a1 = -p.real();
    f.sections.push_back(s);
  }
  const double w_ref = kind == FilterKind::lowpass ? 0.0 : std::numbers::pi;
  for (auto& s : f.sections) {
    const double g = std::abs(s.response(w_ref));
    s.b0 /= g;
    s.b1 /= g;
    s.b2 /= g;
  }
  return f;
}

inline SosFilter design(const FilterSpec& spec, double fs) {
  return butterworth(spec.kind, spec.order, spec.cutoff_hz, fs);
}

namespace detail {

struct SectionState {
  double z1 = 0, z2 = 0;
};

/// Steady-state section states for a unit step at the cascade input.
inline std::vector<SectionState> step_states(const SosFilter& f) {
  std::vector<SectionState> zi(f.sections.size());
  double gain_in = 1.0;
  for (std::size_t i = 0; i < f.sections.size(); ++i) {
    const auto& s = f.sections[i];
    const double g = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    const double z2 = s.b2 - s.a2 * g;
    const double z1 = s.b1 - s.a1 * g + z2;
    zi[i] = {z1 * gain_in, z2 * gain_in};
    gain_in *= g;
  }
  return zi;
}

inline void run(const SosFilter& f, std::vector<double>& x, std::vector<SectionState> state) {
  for (std::size_t si = 0; si < f.sections.size(); ++si) {
    const auto& s = f.sections[si];
    auto& st = state[si];
    for (double& v : x) {
      const double in = v;
      const double y = s.b0 * in + st.z1;
      st.z1 = s.b1 * in - s.a1 * y + st.z2;
      st.z2 = s.b2 * in - s.a2 * y;
      v = y;
    }
  }
}

inline std::vector<SectionState> scaled(std::vector<SectionState> zi, double x0) {
  for (auto& z : zi) {
    z.z1 *= x0;
    z.z2 *= x0;
  }
  return zi;
}

}  // namespace detail

/// Single forward pass started from rest.
inline std::vector<double> filter(const SosFilter& f, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  detail::run(f, y, std::vector<detail::SectionState>(f.sections.size()));
  return y;
}

/// Forward-backward filtering with odd-reflection padding and steady-state
/// initial conditions. Output has zero phase and squared magnitude response.
inline std::vector<double> filtfilt(const SosFilter& f, std::span<const double> x) {
  const std::size_t n = x.size();
  std::size_t trivial = 0;
  for (const auto& s : f.sections)
    if (s.b2 == 0.0 && s.a2 == 0.0) ++trivial;
  const std::size_t pad = std::min<std::size_t>(3 * (2 * f.sections.size() + 1 - trivial), n - 1);

  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  const auto zi = detail::step_states(f);
  detail::run(f, ext, detail::scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  detail::run(f, ext, detail::scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad),
          ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

/// Applies the filter per spec (bidirectional or single pass).
inline std::vector<double> apply(const FilterSpec& spec, std::span<const double> x, double fs) {
  if (x.size() < static_cast<std::size_t>(6 * spec.order))
    throw Error(ErrorKind::SignalTooShort,
                "need at least " + std::to_string(6 * spec.order) + " samples, have " +
                    std::to_string(x.size()));
  const auto f = design(spec, fs);
  return spec.bidirectional ? filtfilt(f, x) : filter(f, x);
}

// ---------------------------------------------------------------------------
// Resampling

struct Ratio {
  std::int64_t up = 1, down = 1;
};

/// Reduced up/down factors for fs_out/fs_in; rates must be rational with a
/// denominator of at most 1000.
inline Ratio rational_ratio(double fs_in, double fs_out) {
  for (std::int64_t scale = 1; scale <= 1000; scale *= 10) {
    const double a = fs_out * static_cast<double>(scale);
    const double b = fs_in * static_cast<double>(scale);
    if (std::abs(a - std::round(a)) < 1e-9 && std::abs(b - std::round(b)) < 1e-9) {
      auto up = static_cast<std::int64_t>(std::llround(a));
      auto down = static_cast<std::int64_t>(std::llround(b));
      const auto g = std::gcd(up, down);
      return {up / g, down / g};
    }
  }
  throw Error(ErrorKind::UnsupportedRate, "sample rates are not a simple rational ratio");
}

inline double kaiser(double n, double length, double beta) {
  const double r = 2.0 * n / (length - 1.0) - 1.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) /
         std::cyl_bessel_i(0.0, beta);
}

/// Windowed-sinc lowpass (Kaiser, beta 5) used as the polyphase prototype.
/// DC gain equals `up` to compensate for zero stuffing.
inline std::vector<double> resample_prototype(const Ratio& r) {
  const std::int64_t max_rate = std::max(r.up, r.down);
  const std::int64_t half = 10 * max_rate;
  const std::size_t taps = static_cast<std::size_t>(2 * half + 1);
  const double cutoff = 1.0 / static_cast<double>(max_rate);
  std::vector<double> h(taps);
  double sum = 0.0;
  for (std::size_t k = 0; k < taps; ++k) {
    const double m = static_cast<double>(k) - static_cast<double>(half);
    const double arg = std::numbers::pi * cutoff * m;
    const double sinc = m == 0.0 ? 1.0 : std::sin(arg) / arg;
    h[k] = cutoff * sinc * kaiser(static_cast<double>(k), static_cast<double>(taps), 5.0);
    sum += h[k];
  }
  for (auto& v : h) v *= static_cast<double>(r.up) / sum;
  return h;
}

/// Polyphase rational downsampling. Output length is
/// round(len * fs_out / fs_in); samples outside the input are treated as zero.
inline std::vector<double> resample(std::span<const double> x, double fs_in, double fs_out = 100.0) {
  if (fs_out > fs_in)
    throw Error(ErrorKind::UnsupportedRate, "upsampling is not supported");
  if (fs_out == fs_in) return {x.begin(), x.end()};
  const Ratio r = rational_ratio(fs_in, fs_out);
  const auto h = resample_prototype(r);
  const auto half = static_cast<std::int64_t>(h.size() / 2);
  const auto taps = static_cast<std::int64_t>(h.size());
  const auto n_in = static_cast<std::int64_t>(x.size());
  const auto n_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(x.size()) * fs_out / fs_in));

  std::vector<double> y(n_out, 0.0);
  for (std::size_t m = 0; m < n_out; ++m) {
    // y[m] = sum_n x[n] h[m*down + half - n*up]
    const std::int64_t t = static_cast<std::int64_t>(m) * r.down + half;
    std::int64_t n_hi = t / r.up;
    std::int64_t n_lo = (t - (taps - 1) + r.up - 1) / r.up;
    if (t - (taps - 1) < 0) n_lo = 0;
    n_lo = std::max<std::int64_t>(n_lo, 0);
    n_hi = std::min<std::int64_t>(n_hi, n_in - 1);
    double acc = 0.0;
    for (std::int64_t n = n_lo; n <= n_hi; ++n) acc += x[static_cast<std::size_t>(n)] * h[t - n * r.up];
    y[m] = acc;
  }
  return y;
}

}  // namespace hypnodx::dsp
