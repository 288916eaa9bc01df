#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taploss/common.hpp"
#include "taploss/fft.hpp"

namespace taploss {

/// Mono audio with an explicit sample rate. Samples are held in double
/// precision in memory; files are 16-bit PCM.
struct Waveform {
  std::vector<double> samples;
  int sample_rate_hz = kSampleRate;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate_hz);
  }
};

inline void require_processable(const Waveform& w) {
  if (w.samples.empty()) throw Error("empty_signal", "waveform has no samples");
  if (w.sample_rate_hz <= 0) throw Error("invalid_argument", "sample rate must be positive");
  for (double s : w.samples)
    if (!std::isfinite(s)) throw Error("non_finite", "waveform contains non-finite samples");
}

inline double mean_power(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
}
inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing_input", "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

struct WavReadOptions {
  bool downmix = false;  // average stereo channels instead of rejecting them
};

inline Waveform decode_wav(std::span<const unsigned char> bytes, WavReadOptions opts = {}) {
  const auto malformed = [] { return Error("malformed_container", "malformed container"); };
  if (bytes.size() < 12) throw malformed();
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw malformed();

  std::optional<std::uint16_t> format, channels, bits;
  std::uint32_t rate = 0;
  std::span<const unsigned char> data;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t chunk_size = detail::read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (chunk_size > bytes.size() - body) throw malformed();
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw malformed();
      const unsigned char* f = bytes.data() + body;
      format = detail::read_u16(f);
      channels = detail::read_u16(f + 2);
      rate = detail::read_u32(f + 4);
      bits = detail::read_u16(f + 14);
      if (*format == 0xFFFE && chunk_size >= 26) format = detail::read_u16(f + 24);
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = bytes.subspan(body, chunk_size);
      have_data = true;
    }
    pos = body + chunk_size + (chunk_size & 1U);
  }
  if (!format || !have_data) throw malformed();
  if (*format != 1 || *bits != 16)
    throw Error("unsupported_codec", "unsupported codec or bit depth (16-bit PCM required)");
  if (rate == 0 || *channels == 0) throw malformed();
  if (*channels > 1 && !opts.downmix)
    throw Error("unsupported_channels", "multi-channel file requires downmix");
  const std::size_t frame_bytes = 2U * *channels;
  if (data.size() < frame_bytes) throw Error("empty_data", "zero-length data chunk");
  if (data.size() % frame_bytes != 0) throw malformed();

  Waveform w;
  w.sample_rate_hz = static_cast<int>(rate);
  const std::size_t n = data.size() / frame_bytes;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < *channels; ++c) {
      const auto raw = static_cast<std::int16_t>(detail::read_u16(data.data() + i * frame_bytes + 2 * c));
      acc += static_cast<double>(raw) / 32768.0;
    }
    w.samples[i] = acc / static_cast<double>(*channels);
  }
  return w;
}

inline Waveform load_wav(const std::filesystem::path& path, WavReadOptions opts = {}) {
  const auto bytes = detail::read_file_bytes(path);
  return decode_wav(bytes, opts);
}

/// PCM quantization used by save_wav: symmetric rounding, hard clip to the
/// 16-bit range. Returns true when the input sat outside [-1, 1].
inline std::int16_t quantize_pcm16(double x, bool& clipped) {
  clipped = x > 1.0 || x < -1.0;
  const double scaled = std::round(std::clamp(x, -1.0, 1.0) * 32768.0);
  return static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
}

inline std::vector<unsigned char> encode_wav(const Waveform& w, std::size_t* clip_count = nullptr) {
  for (double s : w.samples)
    if (!std::isfinite(s)) throw Error("non_finite", "cannot write non-finite samples");
  std::vector<unsigned char> out;
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  detail::put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate_hz));
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate_hz) * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  detail::put_u32(out, data_bytes);
  std::size_t clips = 0;
  for (double s : w.samples) {
    bool clipped = false;
    const std::int16_t v = quantize_pcm16(s, clipped);
    clips += clipped ? 1 : 0;
    detail::put_u16(out, static_cast<std::uint16_t>(v));
  }
  if (clip_count) *clip_count = clips;
  return out;
}

/// Writes 16-bit mono PCM; returns the number of hard-clipped samples.
inline std::size_t save_wav(const Waveform& w, const std::filesystem::path& path) {
  std::size_t clips = 0;
  const auto bytes = encode_wav(w, &clips);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("unwritable_path", "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("unwritable_path", "cannot write " + path.string());
  return clips;
}

// ---------------------------------------------------------------------------
// Resampling: polyphase windowed sinc, Kaiser window, 32 taps per phase.
// ---------------------------------------------------------------------------

namespace detail {

inline double bessel_i0(double x) {
  double sum = 1.0, term = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 64; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

}  // namespace detail

inline constexpr int kResampleTapsPerPhase = 32;
inline constexpr double kResampleKaiserBeta = 6.0;

inline Waveform resample(const Waveform& w, int target_hz) {
  if (target_hz <= 0) throw Error("invalid_argument", "target rate must be positive");
  if (target_hz == w.sample_rate_hz) return w;
  const long long g = std::gcd(static_cast<long long>(w.sample_rate_hz), static_cast<long long>(target_hz));
  const long long up = target_hz / g;
  const long long down = w.sample_rate_hz / g;
  const long long half = kResampleTapsPerPhase * up / 2;  // prototype half-length (upsampled grid)
  const double cutoff = 1.0 / static_cast<double>(std::max(up, down));
  const double i0_beta = detail::bessel_i0(kResampleKaiserBeta);

  std::vector<double> proto(static_cast<std::size_t>(2 * half + 1));
  for (long long m = -half; m <= half; ++m) {
    const double x = cutoff * static_cast<double>(m);
    const double sinc = m == 0 ? 1.0 : std::sin(kPi * x) / (kPi * x);
    const double r = static_cast<double>(m) / static_cast<double>(half);
    const double kaiser = detail::bessel_i0(kResampleKaiserBeta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
    proto[static_cast<std::size_t>(m + half)] = static_cast<double>(up) * cutoff * sinc * kaiser;
  }

  const auto in_len = static_cast<long long>(w.samples.size());
  const auto out_len = static_cast<long long>(std::llround(static_cast<double>(in_len) * static_cast<double>(target_hz) /
                                                           static_cast<double>(w.sample_rate_hz)));
  Waveform out;
  out.sample_rate_hz = target_hz;
  out.samples.resize(static_cast<std::size_t>(std::max(0LL, out_len)));
  for (long long n = 0; n < out_len; ++n) {
    const long long pos = n * down;  // position on the upsampled grid
    long long j_lo = (pos - half + up - 1) / up;
    if (pos - half < 0) j_lo = -((half - pos) / up);
    const long long j_hi = (pos + half) / up;
    double acc = 0.0;
    for (long long j = std::max(j_lo, 0LL); j <= std::min(j_hi, in_len - 1); ++j)
      acc += w.samples[static_cast<std::size_t>(j)] * proto[static_cast<std::size_t>(pos - j * up + half)];
    out.samples[static_cast<std::size_t>(n)] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// STFT grid: n_fft 512, hop 256, periodic Hann, no centering.
// ---------------------------------------------------------------------------

inline const std::vector<double>& hann_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kFftSize);
    for (std::size_t n = 0; n < kFftSize; ++n)
      v[n] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(n) / static_cast<double>(kFftSize));
    return v;
  }();
  return w;
}

inline std::size_t frame_count(std::size_t num_samples) {
  return num_samples < kFftSize ? 0 : (num_samples - kFftSize) / kHop + 1;
}

/// Samples [begin, end) where two analysis frames overlap and the
/// overlap-add reconstruction is exact.
inline std::pair<std::size_t, std::size_t> cola_interior(std::size_t frames) {
  if (frames == 0) return {0, 0};
  return {kHop, frames * kHop};
}

/// T x 257 one-sided spectrogram on the shared frame grid.
struct ComplexSpectrogram {
  ComplexMatrix data;

  std::size_t frames() const { return static_cast<std::size_t>(data.rows()); }
  static constexpr std::size_t bins() { return kBins; }
};

inline ComplexSpectrogram zero_spectrogram(std::size_t frames) {
  ComplexSpectrogram s;
  s.data = ComplexMatrix::Zero(static_cast<Eigen::Index>(frames), kBins);
  return s;
}

inline ComplexSpectrogram stft(std::span<const double> x) {
  const std::size_t frames = frame_count(x.size());
  if (frames == 0) throw Error("signal_too_short", "signal shorter than one frame");
  const auto& win = hann_window();
  const auto& fft = dsp::fft_of_size(kFftSize);
  ComplexSpectrogram s = zero_spectrogram(frames);
  std::vector<Complex> buf(kFftSize);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t off = t * kHop;
    for (std::size_t n = 0; n < kFftSize; ++n) buf[n] = Complex(x[off + n] * win[n], 0.0);
    fft.forward(buf);
    for (std::size_t k = 0; k < kBins; ++k) s.data(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = buf[k];
    // Real input: the Nyquist and DC bins are real by construction.
    s.data(static_cast<Eigen::Index>(t), 0).imag(0.0);
    s.data(static_cast<Eigen::Index>(t), kBins - 1).imag(0.0);
  }
  return s;
}

inline ComplexSpectrogram stft(const Waveform& w) { return stft(std::span<const double>(w.samples)); }

namespace detail {

inline constexpr double kOlaFloor = 0.5;  // minimum of sum(w^2) inside the COLA interior

inline std::vector<double> ola_normalizer(std::size_t frames, std::size_t len) {
  const auto& win = hann_window();
  std::vector<double> d(len, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t n = 0; n < kFftSize && t * kHop + n < len; ++n) d[t * kHop + n] += win[n] * win[n];
  for (double& v : d) v = std::max(v, kOlaFloor);
  return d;
}

// Real inverse of one one-sided spectrum row: (1/N) Re(sum_k c_k X_k e^{+i..}),
// c_0 = c_{N/2} = 1, else 2.
inline void irfft_row(const ComplexMatrix& m, Eigen::Index row, std::vector<Complex>& buf) {
  std::fill(buf.begin(), buf.end(), Complex{});
  for (std::size_t k = 0; k < kBins; ++k) {
    const double c = (k == 0 || k == kBins - 1) ? 1.0 : 2.0;
    buf[k] = c * m(row, static_cast<Eigen::Index>(k));
  }
  dsp::fft_of_size(kFftSize).inverse_unscaled(buf);
}

inline void check_out_len(std::size_t out_len) {
  if (out_len > (std::size_t{1} << 40)) throw Error("invalid_argument", "out_len exceeds representable length");
}

}  // namespace detail

/// Overlap-add inverse with synthesis-window normalization. Samples past the
/// last frame are zero; the normalizer is floored at its interior minimum so
/// the half-covered edges taper instead of being amplified.
inline std::vector<double> istft_samples(const ComplexSpectrogram& s, std::size_t out_len) {
  detail::check_out_len(out_len);
  if (s.data.cols() != static_cast<Eigen::Index>(kBins)) throw Error("shape_mismatch", "spectrogram must have 257 bins");
  const auto& win = hann_window();
  const std::size_t frames = s.frames();
  std::vector<double> y(out_len, 0.0);
  std::vector<Complex> buf(kFftSize);
  const double inv_n = 1.0 / static_cast<double>(kFftSize);
  for (std::size_t t = 0; t < frames; ++t) {
    if (t * kHop >= out_len) break;
    detail::irfft_row(s.data, static_cast<Eigen::Index>(t), buf);
    for (std::size_t n = 0; n < kFftSize && t * kHop + n < out_len; ++n)
      y[t * kHop + n] += win[n] * buf[n].real() * inv_n;
  }
  const auto d = detail::ola_normalizer(frames, out_len);
  for (std::size_t i = 0; i < out_len; ++i) y[i] /= d[i];
  return y;
}

inline Waveform istft(const ComplexSpectrogram& s, std::size_t out_len) {
  return Waveform{istft_samples(s, out_len), kSampleRate};
}

/// Exact adjoint of stft under the real inner product
/// <A, B> = sum Re(A)Re(B) + Im(A)Im(B).
inline std::vector<double> stft_adjoint(const ComplexSpectrogram& g, std::size_t out_len) {
  detail::check_out_len(out_len);
  if (g.data.cols() != static_cast<Eigen::Index>(kBins)) throw Error("shape_mismatch", "gradient must have 257 bins");
  if (frame_count(out_len) != g.frames()) throw Error("shape_mismatch", "gradient frame count does not match out_len");
  const auto& win = hann_window();
  std::vector<double> x(out_len, 0.0);
  std::vector<Complex> buf(kFftSize);
  for (std::size_t t = 0; t < g.frames(); ++t) {
    std::fill(buf.begin(), buf.end(), Complex{});
    for (std::size_t k = 0; k < kBins; ++k) buf[k] = g.data(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k));
    dsp::fft_of_size(kFftSize).inverse_unscaled(buf);
    for (std::size_t n = 0; n < kFftSize; ++n) x[t * kHop + n] += win[n] * buf[n].real();
  }
  return x;
}

/// Adjoint of istft_samples: maps a waveform gradient back to a
/// spectrogram gradient (real/imag parts as independent coordinates).
inline ComplexSpectrogram istft_adjoint(std::span<const double> grad, std::size_t frames) {
  const auto& win = hann_window();
  const std::size_t len = grad.size();
  const auto d = detail::ola_normalizer(frames, len);
  ComplexSpectrogram out = zero_spectrogram(frames);
  std::vector<Complex> buf(kFftSize);
  const double inv_n = 1.0 / static_cast<double>(kFftSize);
  for (std::size_t t = 0; t < frames; ++t) {
    if (t * kHop >= len) break;
    std::fill(buf.begin(), buf.end(), Complex{});
    for (std::size_t n = 0; n < kFftSize && t * kHop + n < len; ++n)
      buf[n] = Complex(grad[t * kHop + n] * win[n] / d[t * kHop + n], 0.0);
    dsp::fft_of_size(kFftSize).forward(buf);
    for (std::size_t k = 0; k < kBins; ++k) {
      const double c = (k == 0 || k == kBins - 1) ? 1.0 : 2.0;
      // d/dRe: c/N * Re(U_k);  d/dIm: -c/N * Im(sum u e^{+i}) = c/N * Im(U_k)
      Complex v = c * inv_n * buf[k];
      if (k == 0 || k == kBins - 1) v.imag(0.0);
      out.data(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SNR-controlled mixing
// ---------------------------------------------------------------------------

struct Mixture {
  Waveform noisy;
  Waveform clean;      // reference, rescaled together with the mixture
  Waveform noise;      // scaled noise component actually added
  double noise_gain = 1.0;
  double rescale = 1.0;  // joint anti-clipping factor (1 when not needed)
};

/// Noise of the clean's length: cropped from a seeded offset when longer,
/// tiled from a seeded offset when shorter.
inline std::vector<double> fit_noise(std::span<const double> noise, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out(len);
  if (noise.size() >= len) {
    const std::size_t offset = noise.size() == len ? 0 : uniform_index(rng, noise.size() - len + 1);
    std::copy_n(noise.begin() + static_cast<std::ptrdiff_t>(offset), len, out.begin());
  } else {
    const std::size_t offset = uniform_index(rng, noise.size());
    for (std::size_t i = 0; i < len; ++i) out[i] = noise[(offset + i) % noise.size()];
  }
  return out;
}

inline Mixture mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db, std::uint64_t seed = 0) {
  require_processable(clean);
  require_processable(noise);
  if (clean.sample_rate_hz != noise.sample_rate_hz) throw Error("rate_mismatch", "clean and noise sample rates differ");
  if (!std::isfinite(snr_db)) throw Error("invalid_argument", "snr_db must be finite");
  const double p_clean = mean_power(clean.samples);
  if (p_clean <= 0.0) throw Error("zero_power_clean", "zero-power clean");
  if (mean_power(noise.samples) <= 0.0) throw Error("zero_power_noise", "zero-power noise");

  auto fitted = fit_noise(noise.samples, clean.size(), seed);
  const double p_noise = mean_power(fitted);
  if (p_noise <= 0.0) throw Error("zero_power_noise", "zero-power noise");
  const double gain = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));

  Mixture m;
  m.noise_gain = gain;
  m.clean = clean;
  m.noise = Waveform{std::move(fitted), clean.sample_rate_hz};
  m.noisy.sample_rate_hz = clean.sample_rate_hz;
  m.noisy.samples.resize(clean.size());
  double peak = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    m.noise.samples[i] *= gain;
    m.noisy.samples[i] = clean.samples[i] + m.noise.samples[i];
    peak = std::max(peak, std::abs(m.noisy.samples[i]));
  }
  if (peak > 1.0) {
    m.rescale = 1.0 / peak;
    for (auto* w : {&m.noisy, &m.clean, &m.noise})
      for (double& v : w->samples) v *= m.rescale;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Channel degrader (software proxy for a VoIP transmission chain)
// ---------------------------------------------------------------------------

struct ChannelProfile {
  double band_low_hz = 0.0;
  double band_high_hz = kSampleRate / 2.0;
  std::optional<int> mu_law_bits;
  double frame_drop_prob = 0.0;
  std::uint64_t seed = 0;

  static ChannelProfile phone() { return {300.0, 3400.0, 8, 0.01, 0}; }
  static ChannelProfile cloud() { return {50.0, 8000.0, 16, 0.0, 0}; }

  static ChannelProfile preset(const std::string& name) {
    if (name == "phone") return phone();
    if (name == "cloud") return cloud();
    throw Error("invalid_argument", "unknown channel preset '" + name + "'");
  }

  void validate(int sample_rate_hz) const {
    if (!(band_low_hz >= 0.0 && band_low_hz < band_high_hz && band_high_hz <= sample_rate_hz / 2.0))
      throw Error("invalid_profile", "channel band edges must satisfy 0 <= low < high <= nyquist");
    if (!(frame_drop_prob >= 0.0 && frame_drop_prob <= 1.0))
      throw Error("invalid_profile", "frame_drop_prob must lie in [0, 1]");
    if (mu_law_bits && (*mu_law_bits < 2 || *mu_law_bits > 16))
      throw Error("invalid_profile", "mu_law_bits must lie in [2, 16]");
  }
};

inline void to_json(nlohmann::json& j, const ChannelProfile& p) {
  j = nlohmann::json{{"band_low_hz", p.band_low_hz},
                     {"band_high_hz", p.band_high_hz},
                     {"mu_law_bits", p.mu_law_bits ? nlohmann::json(*p.mu_law_bits) : nlohmann::json(nullptr)},
                     {"frame_drop_prob", p.frame_drop_prob},
                     {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, ChannelProfile& p) {
  p.band_low_hz = j.at("band_low_hz").get<double>();
  p.band_high_hz = j.at("band_high_hz").get<double>();
  const auto& bits = j.at("mu_law_bits");
  p.mu_law_bits = bits.is_null() ? std::nullopt : std::optional<int>(bits.get<int>());
  p.frame_drop_prob = j.at("frame_drop_prob").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
}

namespace detail {

struct Biquad {
  double b0, b1, b2, a1, a2;

  void run(std::vector<double>& x) const {
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (double& v : x) {
      const double y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
      x2 = x1;
      x1 = v;
      y2 = y1;
      y1 = y;
      v = y;
    }
  }
};

// Bilinear-transform sections (prewarped) of a 4th-order Butterworth.
inline std::array<Biquad, 2> butterworth4(double cutoff_hz, double fs, bool highpass) {
  static constexpr std::array<double, 2> kQ = {0.54119610014619701, 1.3065629648763764};
  std::array<Biquad, 2> out{};
  const double w0 = 2.0 * kPi * cutoff_hz / fs;
  const double cw = std::cos(w0), sw = std::sin(w0);
  for (std::size_t i = 0; i < 2; ++i) {
    const double alpha = sw / (2.0 * kQ[i]);
    const double a0 = 1.0 + alpha;
    double b0, b1, b2;
    if (highpass) {
      b0 = (1.0 + cw) / 2.0;
      b1 = -(1.0 + cw);
      b2 = b0;
    } else {
      b0 = (1.0 - cw) / 2.0;
      b1 = 1.0 - cw;
      b2 = b0;
    }
    out[i] = Biquad{b0 / a0, b1 / a0, b2 / a0, -2.0 * cw / a0, (1.0 - alpha) / a0};
  }
  return out;
}

inline void filtfilt(std::vector<double>& x, const std::array<Biquad, 2>& sections) {
  for (const auto& s : sections) s.run(x);
  std::reverse(x.begin(), x.end());
  for (const auto& s : sections) s.run(x);
  std::reverse(x.begin(), x.end());
}

}  // namespace detail

inline double mu_law_roundtrip(double x, int bits) {
  const double mu = std::ldexp(1.0, bits) - 1.0;
  const double levels = std::ldexp(1.0, bits - 1) - 1.0;
  const double c = std::clamp(x, -1.0, 1.0);
  const double f = std::copysign(std::log1p(mu * std::abs(c)) / std::log1p(mu), c);
  const double q = std::round(f * levels) / levels;
  return std::copysign(std::expm1(std::abs(q) * std::log1p(mu)) / mu, q);
}

/// band-pass (zero-phase) -> mu-law -> seeded 20 ms frame zeroing.
inline Waveform apply_channel(const Waveform& w, const ChannelProfile& p) {
  p.validate(w.sample_rate_hz);
  Waveform out = w;
  const double fs = w.sample_rate_hz;
  if (p.band_low_hz > 0.0) detail::filtfilt(out.samples, detail::butterworth4(p.band_low_hz, fs, true));
  if (p.band_high_hz < fs / 2.0) detail::filtfilt(out.samples, detail::butterworth4(p.band_high_hz, fs, false));
  if (p.mu_law_bits)
    for (double& v : out.samples) v = mu_law_roundtrip(v, *p.mu_law_bits);
  if (p.frame_drop_prob > 0.0) {
    Rng rng(p.seed);
    const auto frame = static_cast<std::size_t>(std::lround(0.02 * fs));
    for (std::size_t start = 0; start < out.size(); start += frame) {
      if (uniform01(rng) < p.frame_drop_prob)
        std::fill(out.samples.begin() + static_cast<std::ptrdiff_t>(start),
                  out.samples.begin() + static_cast<std::ptrdiff_t>(std::min(start + frame, out.size())), 0.0);
    }
  }
  return out;
}

}  // namespace taploss
