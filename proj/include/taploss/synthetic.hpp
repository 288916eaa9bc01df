#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "taploss/common.hpp"
#include "taploss/signal.hpp"

// Deterministic speech-like and noise sources for desk-scale corpora and
// tests: pulse-train vowels through formant resonators, fricative bursts,
// and pauses.
namespace taploss::synth {

struct Vowel {
  std::array<double, 3> formants_hz;
  std::array<double, 3> bandwidths_hz;
};

inline const std::array<Vowel, 5>& vowels() {
  static const std::array<Vowel, 5> v = {{{{700, 1220, 2600}, {110, 100, 120}},
                                          {{270, 2290, 3010}, {60, 100, 120}},
                                          {{300, 870, 2240}, {70, 90, 110}},
                                          {{530, 1840, 2480}, {90, 100, 120}},
                                          {{570, 840, 2410}, {90, 90, 120}}}};
  return v;
}

/// Two-pole resonator y[n] = g x[n] + 2 r cos(w) y[n-1] - r^2 y[n-2] with
/// roughly unit peak gain.
class Resonator {
 public:
  Resonator(double freq_hz, double bandwidth_hz, double fs) {
    const double r = std::exp(-kPi * bandwidth_hz / fs);
    a1_ = 2.0 * r * std::cos(2.0 * kPi * freq_hz / fs);
    a2_ = -r * r;
    gain_ = 1.0 - r;
  }
  double step(double x) {
    const double y = gain_ * x + a1_ * y1_ + a2_ * y2_;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double a1_ = 0, a2_ = 0, gain_ = 1, y1_ = 0, y2_ = 0;
};

/// Pulse train at `f0_hz` (optional drift) through the vowel's resonators.
inline std::vector<double> voiced_segment(std::size_t len, double f0_start, double f0_end, const Vowel& v, double fs,
                                          Rng& rng, double jitter = 0.0) {
  std::vector<Resonator> res;
  for (std::size_t i = 0; i < 3; ++i) res.emplace_back(v.formants_hz[i], v.bandwidths_hz[i], fs);
  std::vector<double> out(len);
  double phase = 0.0, tilt = 0.0;
  double period_scale = 1.0;
  for (std::size_t n = 0; n < len; ++n) {
    const double frac = len > 1 ? static_cast<double>(n) / static_cast<double>(len - 1) : 0.0;
    const double f0 = f0_start + (f0_end - f0_start) * frac;
    phase += f0 * period_scale / fs;
    double e = 0.0;
    if (phase >= 1.0) {
      phase -= 1.0;
      e = 1.0;
      if (jitter > 0.0) period_scale = 1.0 + jitter * gaussian(rng);
    }
    tilt = 0.9 * tilt + e;  // glottal spectral tilt
    double y = 0.0;
    for (auto& r : res) y += r.step(tilt);
    out[n] = y;
  }
  return out;
}

inline void normalize_peak(std::vector<double>& x, double peak) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m > 0.0)
    for (double& v : x) v *= peak / m;
}

/// Speech-like clip: vowels with gliding pitch, fricatives and pauses.
inline Waveform speech_like(double duration_s, std::uint64_t seed, int fs = kSampleRate) {
  Rng rng(seed);
  const auto total = static_cast<std::size_t>(std::lround(duration_s * fs));
  std::vector<double> out(total, 0.0);
  const double base_f0 = uniform(rng, 95.0, 230.0);
  std::size_t pos = 0;
  while (pos < total) {
    const auto len = std::min(total - pos, static_cast<std::size_t>(uniform(rng, 0.12, 0.35) * fs));
    const double kind = uniform01(rng);
    std::vector<double> seg(len, 0.0);
    if (kind < 0.6) {
      const auto& v = vowels()[uniform_index(rng, vowels().size())];
      const double f0a = base_f0 * uniform(rng, 0.85, 1.2);
      const double f0b = f0a * uniform(rng, 0.85, 1.15);
      seg = voiced_segment(len, f0a, f0b, v, fs, rng, 0.004);
      normalize_peak(seg, uniform(rng, 0.15, 0.6));
    } else if (kind < 0.8) {
      double prev = 0.0;
      for (double& s : seg) {
        const double w = gaussian(rng);
        s = w - 0.95 * prev;  // high-frequency emphasis
        prev = w;
      }
      normalize_peak(seg, uniform(rng, 0.03, 0.12));
    }
    // Raised-cosine envelope so segments start and end at zero.
    const std::size_t ramp = std::min<std::size_t>(len / 4, static_cast<std::size_t>(0.02 * fs));
    for (std::size_t i = 0; i < len; ++i) {
      double g = 1.0;
      if (ramp > 0 && i < ramp) g = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(i) / static_cast<double>(ramp));
      if (ramp > 0 && len - 1 - i < ramp)
        g *= 0.5 - 0.5 * std::cos(kPi * static_cast<double>(len - 1 - i) / static_cast<double>(ramp));
      out[pos + i] = seg[i] * g;
    }
    pos += len;
  }
  return Waveform{std::move(out), fs};
}

enum class NoiseKind { kWhite, kPink, kBabble, kHum };

inline const std::array<NoiseKind, 4>& noise_kinds() {
  static const std::array<NoiseKind, 4> k = {NoiseKind::kWhite, NoiseKind::kPink, NoiseKind::kBabble, NoiseKind::kHum};
  return k;
}

inline std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::kWhite: return "white";
    case NoiseKind::kPink: return "pink";
    case NoiseKind::kBabble: return "babble";
    case NoiseKind::kHum: return "hum";
  }
  return "white";
}

inline Waveform noise(NoiseKind kind, double duration_s, std::uint64_t seed, int fs = kSampleRate) {
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(std::lround(duration_s * fs));
  std::vector<double> x(n, 0.0);
  switch (kind) {
    case NoiseKind::kWhite:
      for (double& v : x) v = gaussian(rng);
      break;
    case NoiseKind::kPink: {
      // Paul Kellet's economy pinking filter.
      double b0 = 0, b1 = 0, b2 = 0;
      for (double& v : x) {
        const double w = gaussian(rng);
        b0 = 0.99765 * b0 + w * 0.0990460;
        b1 = 0.96300 * b1 + w * 0.2965164;
        b2 = 0.57000 * b2 + w * 1.0526913;
        v = b0 + b1 + b2 + w * 0.1848;
      }
      break;
    }
    case NoiseKind::kBabble:
      for (int talker = 0; talker < 4; ++talker) {
        const Waveform s = speech_like(duration_s, derive_seed(seed, static_cast<std::uint64_t>(talker)), fs);
        for (std::size_t i = 0; i < n; ++i) x[i] += s.samples[i];
      }
      for (double& v : x) v += 0.02 * gaussian(rng);
      break;
    case NoiseKind::kHum: {
      const double f = uniform(rng, 48.0, 62.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / fs;
        for (int h = 1; h <= 6; ++h) x[i] += std::sin(2.0 * kPi * f * h * t + h) / h;
        x[i] += 0.3 * gaussian(rng);
      }
      break;
    }
  }
  normalize_peak(x, 0.5);
  return Waveform{std::move(x), fs};
}

inline Waveform sine(double freq_hz, double amplitude, double duration_s, int fs = kSampleRate, double phase = 0.0) {
  const auto n = static_cast<std::size_t>(std::lround(duration_s * fs));
  Waveform w{std::vector<double>(n), fs};
  for (std::size_t i = 0; i < n; ++i)
    w.samples[i] = amplitude * std::sin(2.0 * kPi * freq_hz * static_cast<double>(i) / fs + phase);
  return w;
}

}  // namespace taploss::synth
