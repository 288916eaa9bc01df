#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taploss/common.hpp"
#include "taploss/fft.hpp"
#include "taploss/signal.hpp"

namespace taploss {

/// Frame-level acoustic parameters, in file-format order.
inline const std::array<std::string, kNumParams>& param_names() {
  static const std::array<std::string, kNumParams> names = {
      "loudness",         "alphaRatio",          "hammarbergIndex",   "spectralSlope0_500",
      "spectralSlope500_1500", "spectralFlux",   "mfcc1",             "mfcc2",
      "mfcc3",            "mfcc4",               "F0semitone",        "jitterLocal",
      "shimmerLocaldB",   "HNRdBACF",            "logRelF0_H1_H2",    "logRelF0_H1_A3",
      "F1frequency",      "F1bandwidth",         "F1amplitudeLogRelF0", "F2frequency",
      "F2bandwidth",      "F2amplitudeLogRelF0", "F3frequency",       "F3bandwidth",
      "F3amplitudeLogRelF0"};
  return names;
}

namespace param {
enum Index : std::size_t {
  kLoudness = 0, kAlphaRatio, kHammarberg, kSlope0_500, kSlope500_1500, kFlux,
  kMfcc1, kMfcc2, kMfcc3, kMfcc4, kF0Semitone, kJitter, kShimmer, kHnr,
  kH1H2, kH1A3, kF1Freq, kF1Bw, kF1Amp, kF2Freq, kF2Bw, kF2Amp, kF3Freq, kF3Bw, kF3Amp
};
}  // namespace param

/// T x 25 matrix of temporal acoustic parameters.
struct AcousticMatrix {
  Matrix data;

  std::size_t frames() const { return static_cast<std::size_t>(data.rows()); }
  static constexpr std::size_t params() { return kNumParams; }
};

inline constexpr double kEps = 1e-10;
inline constexpr double kHnrFloorDb = -20.0;
inline constexpr double kHnrCeilDb = 40.0;
inline constexpr double kLoudnessFloor = -10.0;  // log10(kEps)
inline constexpr double kMinF0Hz = 60.0;
inline constexpr double kMaxF0Hz = 500.0;
inline constexpr double kVoicingThreshold = 0.45;
inline constexpr std::size_t kMelBands = 26;
inline constexpr int kLpcOrder = 12;

// ---------------------------------------------------------------------------
// Pitch
// ---------------------------------------------------------------------------

struct PitchEstimate {
  double f0_hz = 0.0;
  bool voiced = false;
  double peak = 0.0;  // normalized correlation at the selected lag
  double lag = 0.0;   // fractional lag in samples
};

/// Normalized cross-correlation pitch search over 60-500 Hz on one analysis
/// frame. Voiced iff the selected peak exceeds 0.45.
inline PitchEstimate f0_autocorr(std::span<const double> frame, int sample_rate_hz = kSampleRate) {
  const std::size_t n = frame.size();
  if (n != kFftSize) throw Error("shape_mismatch", "pitch frame must hold 512 samples");
  const auto min_lag = static_cast<std::size_t>(std::ceil(sample_rate_hz / kMaxF0Hz));
  const auto max_lag = std::min(n - 2, static_cast<std::size_t>(std::floor(sample_rate_hz / kMinF0Hz)));

  // Lagged products via a zero-padded FFT: r[k] = sum_{i<n-k} x[i] x[i+k].
  std::vector<Complex> buf(2 * kFftSize, Complex{});
  for (std::size_t i = 0; i < n; ++i) buf[i] = Complex(frame[i], 0.0);
  const auto& fft = dsp::fft_of_size(2 * kFftSize);
  fft.forward(buf);
  for (auto& v : buf) v = Complex(std::norm(v), 0.0);
  fft.inverse_unscaled(buf);
  const double scale = 1.0 / static_cast<double>(2 * kFftSize);

  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + frame[i] * frame[i];
  if (prefix[n] <= 0.0) return {};

  std::vector<double> rho(max_lag + 2, 0.0);
  for (std::size_t k = min_lag - 1; k <= max_lag + 1 && k < n; ++k) {
    const double head = prefix[n - k];              // sum x[0..n-k)
    const double tail = prefix[n] - prefix[k];      // sum x[k..n)
    const double denom = std::sqrt(head * tail);
    rho[k] = denom > 0.0 ? buf[k].real() * scale / denom : 0.0;
  }

  double best = -1.0;
  for (std::size_t k = min_lag; k <= max_lag; ++k) best = std::max(best, rho[k]);
  if (best <= 0.0) return {};
  // Smallest-lag local maximum close to the global best guards against
  // picking a subharmonic.
  std::size_t pick = 0;
  for (std::size_t k = min_lag; k <= max_lag; ++k) {
    const bool local_max = rho[k] >= rho[k - 1] && rho[k] >= rho[k + 1];
    if (local_max && rho[k] >= 0.9 * best) {
      pick = k;
      break;
    }
  }
  if (pick == 0) return {};

  double lag = static_cast<double>(pick);
  double peak = rho[pick];
  const double a = rho[pick - 1], b = rho[pick], c = rho[pick + 1];
  const double denom = a - 2.0 * b + c;
  if (denom < 0.0) {
    const double delta = std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
    lag += delta;
    peak = b - 0.25 * (a - c) * delta;
  }
  PitchEstimate est;
  est.peak = std::min(peak, 1.0);
  est.lag = lag;
  est.voiced = est.peak > kVoicingThreshold;
  est.f0_hz = est.voiced ? static_cast<double>(sample_rate_hz) / lag : 0.0;
  return est;
}

/// HNR from the correlation at the detected pitch lag, clamped to [-20, 40] dB.
inline double hnr_from_pitch(const PitchEstimate& p) {
  if (!p.voiced) return kHnrFloorDb;
  const double r = p.peak;
  if (r >= 1.0) return kHnrCeilDb;
  return std::clamp(10.0 * std::log10(r / (1.0 - r)), kHnrFloorDb, kHnrCeilDb);
}

inline double hnr_acf(std::span<const double> frame, int sample_rate_hz = kSampleRate) {
  return hnr_from_pitch(f0_autocorr(frame, sample_rate_hz));
}

inline double f0_to_semitone(double f0_hz) { return f0_hz > 0.0 ? 12.0 * std::log2(f0_hz / 27.5) : 0.0; }

// ---------------------------------------------------------------------------
// Formants
// ---------------------------------------------------------------------------

struct Formant {
  double freq_hz = 0.0;
  double bandwidth_hz = 0.0;
};

/// Levinson-Durbin on autocorrelation r[0..order]. Returns a[0..order]
/// with a[0] = 1, or an empty vector when the system is not invertible.
inline std::vector<double> levinson_durbin(std::span<const double> r, int order) {
  if (r.size() < static_cast<std::size_t>(order + 1) || !(r[0] > 0.0)) return {};
  std::vector<double> a(static_cast<std::size_t>(order + 1), 0.0), prev;
  a[0] = 1.0;
  double err = r[0];
  for (int i = 1; i <= order; ++i) {
    double acc = r[static_cast<std::size_t>(i)];
    for (int j = 1; j < i; ++j) acc += a[static_cast<std::size_t>(j)] * r[static_cast<std::size_t>(i - j)];
    const double k = -acc / err;
    prev = a;
    for (int j = 1; j < i; ++j)
      a[static_cast<std::size_t>(j)] = prev[static_cast<std::size_t>(j)] + k * prev[static_cast<std::size_t>(i - j)];
    a[static_cast<std::size_t>(i)] = k;
    err *= (1.0 - k * k);
    if (!(err > 0.0)) return {};
  }
  return a;
}

/// Order-12 LPC formant estimate on a pre-emphasized, Hann-windowed frame.
inline std::array<Formant, 3> formants_lpc(std::span<const double> frame, int sample_rate_hz = kSampleRate) {
  if (frame.size() != kFftSize) throw Error("shape_mismatch", "formant frame must hold 512 samples");
  std::array<Formant, 3> out{};
  const auto& win = hann_window();
  std::vector<double> x(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const double pre = frame[i] - (i > 0 ? 0.97 * frame[i - 1] : 0.0);
    x[i] = pre * win[i];
  }
  std::vector<double> r(kLpcOrder + 1, 0.0);
  for (int lag = 0; lag <= kLpcOrder; ++lag)
    for (std::size_t i = static_cast<std::size_t>(lag); i < x.size(); ++i)
      r[static_cast<std::size_t>(lag)] += x[i] * x[i - static_cast<std::size_t>(lag)];
  const auto a = levinson_durbin(r, kLpcOrder);
  if (a.empty()) return out;

  // Roots of z^p + a1 z^{p-1} + ... + ap via companion-matrix eigenvalues.
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(kLpcOrder, kLpcOrder);
  for (int j = 0; j < kLpcOrder; ++j) companion(0, j) = -a[static_cast<std::size_t>(j + 1)];
  for (int i = 1; i < kLpcOrder; ++i) companion(i, i - 1) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> solver(companion, false);
  if (solver.info() != Eigen::Success) return out;

  const double fs = sample_rate_hz;
  std::vector<Formant> found;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    const Complex root = solver.eigenvalues()[i];
    if (root.imag() <= 0.0) continue;
    const double freq = std::arg(root) * fs / (2.0 * kPi);
    const double bw = -(fs / kPi) * std::log(std::abs(root));
    if (freq < 90.0 || bw > 600.0 || !std::isfinite(bw)) continue;
    found.push_back({freq, bw});
  }
  std::sort(found.begin(), found.end(), [](const Formant& l, const Formant& r) { return l.freq_hz < r.freq_hz; });
  for (std::size_t i = 0; i < std::min<std::size_t>(3, found.size()); ++i) out[i] = found[i];
  return out;
}

// ---------------------------------------------------------------------------
// Spectral parameters
// ---------------------------------------------------------------------------

namespace detail {

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }
inline double bin_hz(std::size_t k) { return static_cast<double>(k) * kSampleRate / static_cast<double>(kFftSize); }

struct MelBank {
  std::array<std::vector<double>, kMelBands> weights;  // per band, one weight per bin
  std::array<double, kMelBands> center_hz{};
};

inline const MelBank& mel_bank() {
  static const MelBank bank = [] {
    MelBank b;
    const double lo = hz_to_mel(0.0), hi = hz_to_mel(kSampleRate / 2.0);
    std::array<double, kMelBands + 2> edges{};
    for (std::size_t i = 0; i < edges.size(); ++i)
      edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kMelBands + 1));
    for (std::size_t m = 0; m < kMelBands; ++m) {
      b.center_hz[m] = edges[m + 1];
      b.weights[m].assign(kBins, 0.0);
      for (std::size_t k = 0; k < kBins; ++k) {
        const double f = bin_hz(k);
        double w = 0.0;
        if (f > edges[m] && f <= edges[m + 1]) w = (f - edges[m]) / (edges[m + 1] - edges[m]);
        else if (f > edges[m + 1] && f < edges[m + 2]) w = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
        b.weights[m][k] = w;
      }
    }
    return b;
  }();
  return bank;
}

// A-weighting as a power gain; perceptual weight for the loudness proxy.
inline double a_weight_power(double f) {
  const double f2 = f * f;
  const double ra = (12194.0 * 12194.0 * f2 * f2) /
                    ((f2 + 20.6 * 20.6) * std::sqrt((f2 + 107.7 * 107.7) * (f2 + 737.9 * 737.9)) * (f2 + 12194.0 * 12194.0));
  const double amp = ra * std::pow(10.0, 2.0 / 20.0);
  return amp * amp;
}

inline double band_sum(std::span<const double> power, double lo_hz, double hi_hz) {
  double acc = 0.0;
  for (std::size_t k = 0; k < power.size(); ++k) {
    const double f = bin_hz(k);
    if (f >= lo_hz && f < hi_hz) acc += power[k];
  }
  return acc;
}

inline double band_max(std::span<const double> power, double lo_hz, double hi_hz) {
  double m = 0.0;
  for (std::size_t k = 0; k < power.size(); ++k) {
    const double f = bin_hz(k);
    if (f >= lo_hz && f < hi_hz) m = std::max(m, power[k]);
  }
  return m;
}

// Least-squares slope of the dB spectrum against frequency (dB per kHz).
inline double spectral_slope(std::span<const double> power, double lo_hz, double hi_hz) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < power.size(); ++k) {
    const double f = bin_hz(k);
    if (f < lo_hz || f > hi_hz) continue;
    const double x = f / 1000.0, y = 10.0 * std::log10(kEps + power[k]);
    n += 1;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double d = n * sxx - sx * sx;
  return d > 0.0 ? (n * sxy - sx * sy) / d : 0.0;
}

inline double db_power(double p) { return 10.0 * std::log10(kEps + p); }
inline double db_amp(double a) { return 20.0 * std::log10(kEps + a); }

// Level difference in dB; a plain power ratio whenever both sides carry energy.
inline double ratio_db(double num, double den) {
  if (num > 0.0 && den > 0.0) return 10.0 * std::log10(num / den);
  return db_power(num) - db_power(den);
}

}  // namespace detail

struct SpectralParams {
  double loudness = kLoudnessFloor;
  double alpha_ratio = 0.0;
  double hammarberg = 0.0;
  double slope_0_500 = 0.0;
  double slope_500_1500 = 0.0;
  double flux = 0.0;
  std::array<double, 4> mfcc{};
};

/// Magnitude-spectrum descriptors for one frame. `prev_magnitude` is the
/// previous frame's magnitude (empty for the first frame; flux is then 0).
inline SpectralParams spectral_params(std::span<const double> magnitude, std::span<const double> prev_magnitude = {}) {
  if (magnitude.size() != kBins) throw Error("shape_mismatch", "magnitude spectrum must hold 257 bins");
  std::vector<double> power(kBins);
  for (std::size_t k = 0; k < kBins; ++k) power[k] = magnitude[k] * magnitude[k];

  SpectralParams sp;
  const auto& bank = detail::mel_bank();
  std::array<double, kMelBands> mel{};
  double weighted = 0.0;
  for (std::size_t m = 0; m < kMelBands; ++m) {
    double e = 0.0;
    for (std::size_t k = 0; k < kBins; ++k) e += bank.weights[m][k] * power[k];
    mel[m] = e;
    weighted += detail::a_weight_power(bank.center_hz[m]) * e;
  }
  sp.loudness = std::log10(kEps + weighted);
  sp.alpha_ratio = detail::ratio_db(detail::band_sum(power, 50.0, 1000.0), detail::band_sum(power, 1000.0, 5000.0));
  sp.hammarberg = detail::ratio_db(detail::band_max(power, 0.0, 2000.0), detail::band_max(power, 2000.0, 5000.0));
  sp.slope_0_500 = detail::spectral_slope(power, 0.0, 500.0);
  sp.slope_500_1500 = detail::spectral_slope(power, 500.0, 1500.0);

  for (std::size_t c = 1; c <= 4; ++c) {
    double acc = 0.0;
    for (std::size_t m = 0; m < kMelBands; ++m)
      acc += std::log(kEps + mel[m]) *
             std::cos(kPi * static_cast<double>(c) * (static_cast<double>(m) + 0.5) / static_cast<double>(kMelBands));
    sp.mfcc[c - 1] = std::sqrt(2.0 / static_cast<double>(kMelBands)) * acc;
  }

  if (prev_magnitude.size() == kBins) {
    const auto norm = [](std::span<const double> v) {
      double s = 0.0;
      for (double x : v) s += x * x;
      return std::sqrt(s);
    };
    const double n_cur = norm(magnitude), n_prev = norm(prev_magnitude);
    double acc = 0.0;
    for (std::size_t k = 0; k < kBins; ++k) {
      const double a = n_cur > 0.0 ? magnitude[k] / n_cur : 0.0;
      const double b = n_prev > 0.0 ? prev_magnitude[k] / n_prev : 0.0;
      acc += (a - b) * (a - b);
    }
    sp.flux = std::sqrt(acc);
  }
  return sp;
}

/// Peak magnitude within half a harmonic spacing of `freq_hz`.
inline double harmonic_amplitude(std::span<const double> magnitude, double freq_hz, double f0_hz) {
  const double bin_width = static_cast<double>(kSampleRate) / static_cast<double>(kFftSize);
  const double center = freq_hz / bin_width;
  const double half = std::max(1.0, std::floor(0.5 * f0_hz / bin_width));
  const auto lo = static_cast<std::ptrdiff_t>(std::max(0.0, std::round(center - half)));
  const auto hi = static_cast<std::ptrdiff_t>(std::min<double>(kBins - 1, std::round(center + half)));
  double m = 0.0;
  for (std::ptrdiff_t k = lo; k <= hi; ++k) m = std::max(m, magnitude[static_cast<std::size_t>(k)]);
  return m;
}

// ---------------------------------------------------------------------------
// Full extractor
// ---------------------------------------------------------------------------

inline AcousticMatrix extract_taps(const Waveform& w) {
  require_processable(w);
  if (w.sample_rate_hz != kSampleRate) throw Error("rate_mismatch", "extract_taps expects 16 kHz input");
  const ComplexSpectrogram spec = stft(w);  // throws when too short
  const std::size_t frames = spec.frames();

  AcousticMatrix out;
  out.data = Matrix::Zero(static_cast<Eigen::Index>(frames), kNumParams);
  std::vector<double> mag(kBins), prev_mag;
  double prev_period = 0.0, prev_amp = 0.0;
  bool prev_voiced = false;

  for (std::size_t t = 0; t < frames; ++t) {
    const auto row = static_cast<Eigen::Index>(t);
    auto A = [&](std::size_t p) -> double& { return out.data(row, static_cast<Eigen::Index>(p)); };
    const std::span<const double> frame(w.samples.data() + t * kHop, kFftSize);
    for (std::size_t k = 0; k < kBins; ++k) mag[k] = std::abs(spec.data(row, static_cast<Eigen::Index>(k)));

    const SpectralParams sp = spectral_params(mag, prev_mag);
    A(param::kLoudness) = sp.loudness;
    A(param::kAlphaRatio) = sp.alpha_ratio;
    A(param::kHammarberg) = sp.hammarberg;
    A(param::kSlope0_500) = sp.slope_0_500;
    A(param::kSlope500_1500) = sp.slope_500_1500;
    A(param::kFlux) = sp.flux;
    for (std::size_t c = 0; c < 4; ++c) A(param::kMfcc1 + c) = sp.mfcc[c];

    const PitchEstimate pitch = f0_autocorr(frame);
    A(param::kHnr) = hnr_from_pitch(pitch);
    const auto formants = formants_lpc(frame);
    for (std::size_t i = 0; i < 3; ++i) {
      A(param::kF1Freq + 3 * i) = formants[i].freq_hz;
      A(param::kF1Bw + 3 * i) = formants[i].bandwidth_hz;
    }

    double amp = 0.0;
    for (double s : frame) amp = std::max(amp, std::abs(s));
    if (pitch.voiced) {
      const double f0 = pitch.f0_hz;
      const double period = 1.0 / f0;
      A(param::kF0Semitone) = f0_to_semitone(f0);
      if (prev_voiced) {
        A(param::kJitter) = std::abs(period - prev_period) / (0.5 * (period + prev_period));
        A(param::kShimmer) = (amp > 0.0 && prev_amp > 0.0) ? std::abs(20.0 * std::log10(amp / prev_amp)) : 0.0;
      }
      const double h1 = detail::db_amp(harmonic_amplitude(mag, f0, f0));
      const double h2 = detail::db_amp(harmonic_amplitude(mag, 2.0 * f0, f0));
      A(param::kH1H2) = h1 - h2;
      if (formants[2].freq_hz > 0.0) {
        const double h3 = std::max(1.0, std::round(formants[2].freq_hz / f0));
        A(param::kH1A3) = h1 - detail::db_amp(harmonic_amplitude(mag, h3 * f0, f0));
      }
      for (std::size_t i = 0; i < 3; ++i) {
        if (formants[i].freq_hz <= 0.0) continue;
        const double h = std::max(1.0, std::round(formants[i].freq_hz / f0));
        A(param::kF1Amp + 3 * i) = detail::db_amp(harmonic_amplitude(mag, h * f0, f0)) - h1;
      }
      prev_period = period;
    }
    prev_voiced = pitch.voiced;
    prev_amp = amp;
    prev_mag = mag;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus statistics and standardization
// ---------------------------------------------------------------------------

/// Per-parameter mean / population standard deviation over a corpus.
struct TapStats {
  Vector mean = Vector::Zero(kNumParams);
  Vector std = Vector::Ones(kNumParams);
};

/// Commutative (count, mean, M2) accumulator with Chan's merge rule.
class TapAccumulator {
 public:
  TapAccumulator() : mean_(Vector::Zero(kNumParams)), m2_(Vector::Zero(kNumParams)) {}

  void add(const AcousticMatrix& a) {
    if (a.data.cols() != static_cast<Eigen::Index>(kNumParams)) throw Error("shape_mismatch", "expected 25 parameters");
    for (Eigen::Index t = 0; t < a.data.rows(); ++t) {
      count_ += 1.0;
      const Vector x = a.data.row(t).transpose();
      const Vector delta = x - mean_;
      mean_ += delta / count_;
      m2_ += delta.cwiseProduct(x - mean_);
    }
  }

  void merge(const TapAccumulator& o) {
    if (o.count_ == 0.0) return;
    if (count_ == 0.0) {
      *this = o;
      return;
    }
    const double n = count_ + o.count_;
    const Vector delta = o.mean_ - mean_;
    mean_ += delta * (o.count_ / n);
    m2_ += o.m2_ + delta.cwiseProduct(delta) * (count_ * o.count_ / n);
    count_ = n;
  }

  double count() const { return count_; }

  TapStats finish() const {
    if (count_ < 1.0) throw Error("empty_corpus", "no frames accumulated");
    TapStats s;
    s.mean = mean_;
    s.std = (m2_ / count_).cwiseMax(0.0).cwiseSqrt();
    for (std::size_t p = 0; p < kNumParams; ++p) {
      const auto i = static_cast<Eigen::Index>(p);
      if (!(s.std[i] > 1e-12 * (1.0 + std::abs(s.mean[i]))))
        throw Error("degenerate_parameter", "degenerate parameter " + param_names()[p]);
    }
    return s;
  }

 private:
  double count_ = 0.0;
  Vector mean_, m2_;
};

inline TapStats compute_stats(std::span<const AcousticMatrix> corpus) {
  if (corpus.size() < 2) throw Error("insufficient_corpus", "at least two matrices are required");
  TapAccumulator acc;
  for (const auto& a : corpus) acc.add(a);
  return acc.finish();
}

inline AcousticMatrix standardize(const AcousticMatrix& a, const TapStats& s) {
  AcousticMatrix out;
  out.data = (a.data.rowwise() - s.mean.transpose()).array().rowwise() / s.std.transpose().array();
  return out;
}

inline AcousticMatrix destandardize(const AcousticMatrix& a, const TapStats& s) {
  AcousticMatrix out;
  out.data = (a.data.array().rowwise() * s.std.transpose().array()).matrix().rowwise() + s.mean.transpose();
  return out;
}

inline void to_json(nlohmann::json& j, const TapStats& s) {
  j = nlohmann::json{{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
                     {"std", std::vector<double>(s.std.data(), s.std.data() + s.std.size())}};
}

inline void from_json(const nlohmann::json& j, TapStats& s) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("std").get<std::vector<double>>();
  if (mean.size() != kNumParams || sd.size() != kNumParams) throw Error("shape_mismatch", "stats must hold 25 entries");
  s.mean = Eigen::Map<const Vector>(mean.data(), kNumParams);
  s.std = Eigen::Map<const Vector>(sd.data(), kNumParams);
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// CSV: header of parameter names, then one row per frame, 9 significant digits.
inline std::string to_csv(const AcousticMatrix& a) {
  std::string out;
  for (std::size_t p = 0; p < kNumParams; ++p) {
    if (p) out += ',';
    out += param_names()[p];
  }
  out += '\n';
  char buf[32];
  for (Eigen::Index t = 0; t < a.data.rows(); ++t) {
    for (Eigen::Index p = 0; p < a.data.cols(); ++p) {
      if (p) out += ',';
      std::snprintf(buf, sizeof buf, "%.9g", a.data(t, p));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline AcousticMatrix from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error("malformed_file", "empty parameter CSV");
  {
    std::istringstream hdr(line);
    std::string name;
    std::size_t p = 0;
    while (std::getline(hdr, name, ',')) {
      if (p >= kNumParams || name != param_names()[p]) throw Error("malformed_file", "unexpected CSV header");
      ++p;
    }
    if (p != kNumParams) throw Error("malformed_file", "unexpected CSV header");
  }
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(row, cell, ',')) {
      values.push_back(std::stod(cell));
      ++cols;
    }
    if (cols != kNumParams) throw Error("malformed_file", "CSV row must hold 25 values");
    ++rows;
  }
  AcousticMatrix a;
  a.data = Eigen::Map<const Matrix>(values.data(), static_cast<Eigen::Index>(rows), kNumParams);
  return a;
}

/// Compact binary: one-line JSON header, then little-endian float32 payload.
inline std::vector<unsigned char> to_binary(const AcousticMatrix& a) {
  nlohmann::json hdr = {{"format", "taps-f32le"},
                        {"frames", a.frames()},
                        {"params", kNumParams},
                        {"param_names", param_names()}};
  const std::string h = hdr.dump() + "\n";
  std::vector<unsigned char> out(h.begin(), h.end());
  out.reserve(out.size() + a.frames() * kNumParams * 4);
  for (Eigen::Index t = 0; t < a.data.rows(); ++t)
    for (Eigen::Index p = 0; p < a.data.cols(); ++p) {
      const auto f = static_cast<float>(a.data(t, p));
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
    }
  return out;
}

inline AcousticMatrix from_binary(std::span<const unsigned char> bytes) {
  const auto nl = std::find(bytes.begin(), bytes.end(), static_cast<unsigned char>('\n'));
  if (nl == bytes.end()) throw Error("malformed_file", "missing binary header");
  const auto hdr = nlohmann::json::parse(std::string(bytes.begin(), nl), nullptr, false);
  if (hdr.is_discarded() || hdr.value("format", "") != "taps-f32le") throw Error("malformed_file", "bad binary header");
  const auto frames = hdr.at("frames").get<std::size_t>();
  const auto payload = bytes.subspan(static_cast<std::size_t>(nl - bytes.begin()) + 1);
  if (payload.size() != frames * kNumParams * 4) throw Error("malformed_file", "binary payload size mismatch");
  AcousticMatrix a;
  a.data.resize(static_cast<Eigen::Index>(frames), kNumParams);
  for (std::size_t i = 0; i < frames * kNumParams; ++i) {
    std::uint32_t bits = detail::read_u32(payload.data() + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    a.data(static_cast<Eigen::Index>(i / kNumParams), static_cast<Eigen::Index>(i % kNumParams)) = f;
  }
  return a;
}

}  // namespace taploss
