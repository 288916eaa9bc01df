#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "taploss/signal.hpp"
#include "taploss/synthetic.hpp"
#include "test_support.hpp"

using namespace taploss;
using namespace taploss::testing;
using Catch::Approx;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "taploss_test_signal";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> pcm16_file(const std::vector<std::int16_t>& values, int rate = 16000, int channels = 1) {
  Waveform w;
  w.sample_rate_hz = rate;
  auto bytes = encode_wav(Waveform{std::vector<double>(values.size() / channels, 0.0), rate});
  // Rewrite header fields and payload directly to control raw PCM values.
  bytes.resize(44);
  const auto put32 = [&](std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  };
  bytes[22] = static_cast<unsigned char>(channels);
  put32(28, static_cast<std::uint32_t>(rate * 2 * channels));
  bytes[32] = static_cast<unsigned char>(2 * channels);
  put32(40, static_cast<std::uint32_t>(values.size() * 2));
  put32(4, static_cast<std::uint32_t>(36 + values.size() * 2));
  for (auto v : values) {
    const auto u = static_cast<std::uint16_t>(v);
    bytes.push_back(static_cast<unsigned char>(u & 0xFF));
    bytes.push_back(static_cast<unsigned char>(u >> 8));
  }
  return bytes;
}

}  // namespace

TEST_CASE("load_wav scales PCM by 1/32768", "[wav]") {
  const auto w = decode_wav(pcm16_file({16384}));
  REQUIRE(w.sample_rate_hz == 16000);
  REQUIRE(w.samples.size() == 1);
  CHECK(w.samples[0] == 0.5);
}

TEST_CASE("wav errors", "[wav]") {
  auto bytes = pcm16_file({1, 2, 3, 4});
  SECTION("truncated data chunk") {
    bytes.resize(bytes.size() - 3);
    try {
      decode_wav(bytes);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()) == "malformed container");
    }
  }
  SECTION("zero-length data") {
    CHECK_THROWS_AS(decode_wav(pcm16_file({})), Error);
  }
  SECTION("unsupported bit depth") {
    bytes[34] = 24;
    CHECK_THROWS_WITH(decode_wav(bytes), Catch::Matchers::ContainsSubstring("bit depth"));
  }
  SECTION("stereo needs downmix") {
    const auto stereo = pcm16_file({16384, 0, -16384, 0}, 16000, 2);
    CHECK_THROWS_AS(decode_wav(stereo), Error);
    const auto w = decode_wav(stereo, {.downmix = true});
    REQUIRE(w.samples.size() == 2);
    CHECK(w.samples[0] == 0.25);
    CHECK(w.samples[1] == -0.25);
  }
  SECTION("missing file") { CHECK_THROWS_AS(load_wav(temp_path("does_not_exist.wav")), Error); }
}

TEST_CASE("save_wav quantization and clipping", "[wav]") {
  std::size_t clips = 99;
  auto bytes = encode_wav(Waveform{{0.0}, 16000}, &clips);
  CHECK(clips == 0);
  CHECK(bytes[44] == 0);
  CHECK(bytes[45] == 0);

  bytes = encode_wav(Waveform{{2.0}, 16000}, &clips);
  CHECK(clips == 1);
  CHECK(static_cast<std::int16_t>(bytes[44] | (bytes[45] << 8)) == 32767);

  bytes = encode_wav(Waveform{{-0.5 - 0.5 / 32768.0}, 16000}, &clips);  // ties round away from zero
  CHECK(static_cast<std::int16_t>(bytes[44] | (bytes[45] << 8)) == -16385);

  CHECK_THROWS_AS(save_wav(Waveform{{0.0}, 16000}, "/nonexistent_dir/x.wav"), Error);
}

TEST_CASE("save/load round trip within one quantization step", "[wav]") {
  const auto w = random_waveform(4000, 3, 0.99);
  const auto path = temp_path("roundtrip.wav");
  CHECK(save_wav(w, path) == 0);
  const auto back = load_wav(path);
  REQUIRE(back.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(back.samples[i] - w.samples[i]) <= 1.0 / 32768.0);
}

TEST_CASE("440 Hz tone survives a WAV round trip at its bin", "[wav]") {
  const auto tone = synth::sine(440.0, 0.5, 1.0);
  const auto path = temp_path("tone.wav");
  save_wav(tone, path);
  const auto back = load_wav(path);
  CHECK(dominant_frequency(back.samples, 16000, 50, 8000) == 440.0);
}

TEST_CASE("resample", "[resample]") {
  SECTION("identity when rates match") {
    const auto w = random_waveform(1000, 1);
    CHECK(resample(w, 16000).samples == w.samples);
  }
  SECTION("48k -> 16k keeps a 440 Hz tone") {
    const auto tone = synth::sine(440.0, 0.5, 1.0, 48000);
    const auto out = resample(tone, 16000);
    CHECK(out.sample_rate_hz == 16000);
    CHECK(std::abs(static_cast<long>(out.size()) - 16000) <= 1);
    CHECK(std::abs(dominant_frequency(out.samples, 16000, 50, 8000) - 440.0) <= 1.0);
  }
  SECTION("length rule for assorted rates") {
    for (int src : {8000, 11025, 22050, 44100, 48000}) {
      const auto w = random_waveform(static_cast<std::size_t>(src), 9);
      Waveform in{w.samples, src};
      for (int dst : {10000, 16000, 44100})
        CHECK(std::abs(static_cast<long>(resample(in, dst).size()) - dst) <= 1);
    }
  }
  SECTION("passband amplitude preserved, image rejected") {
    const auto tone = synth::sine(1000.0, 0.5, 1.0, 16000);
    const auto up = resample(tone, 48000);
    const std::vector<double> interior(up.samples.begin() + 1000, up.samples.end() - 1000);
    CHECK(rms(interior) == Approx(0.5 / std::sqrt(2.0)).epsilon(0.01));
    const auto hi = synth::sine(7000.0, 0.5, 1.0, 48000);  // above the 5 kHz Nyquist of 10 kHz
    const auto down = resample(hi, 10000);
    CHECK(rms(down.samples) < 0.05 * rms(hi.samples));
  }
  SECTION("invalid target") { CHECK_THROWS_AS(resample(random_waveform(10, 1), 0), Error); }
}

TEST_CASE("stft basics", "[stft]") {
  SECTION("DC frame concentrates in bin 0") {
    const std::vector<double> ones(512, 1.0);
    const auto s = stft(ones);
    REQUIRE(s.frames() == 1);
    double wsum = 0.0;
    for (double v : hann_window()) wsum += v;
    CHECK(s.data(0, 0).real() == Approx(wsum).epsilon(1e-12));
    for (std::size_t k = 0; k < kBins; ++k) CHECK(std::abs(s.data(0, static_cast<Eigen::Index>(k)).imag()) < 1e-9);
    for (std::size_t k = 2; k < kBins; ++k) CHECK(std::abs(s.data(0, static_cast<Eigen::Index>(k))) < 1e-9);
  }
  SECTION("1 kHz tone peaks at bin 32") {
    const auto tone = synth::sine(1000.0, 0.5, 0.5);
    const auto s = stft(tone);
    for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(s.frames()); ++t) {
      Eigen::Index best = 0;
      s.data.row(t).cwiseAbs().maxCoeff(&best);
      CHECK(best == 32);
    }
  }
  SECTION("frame count rule") {
    CHECK(frame_count(511) == 0);
    CHECK(frame_count(512) == 1);
    CHECK(frame_count(767) == 1);
    CHECK(frame_count(768) == 2);
    CHECK(stft(random_waveform(16000, 2)).frames() == (16000 - 512) / 256 + 1);
  }
  SECTION("too short") { CHECK_THROWS_AS(stft(random_waveform(100, 1)), Error); }
}

TEST_CASE("istft reconstructs on the COLA interior", "[stft]") {
  SECTION("random 1 s signal") {
    const auto x = random_waveform(16000, 42);
    const auto s = stft(x);
    const auto y = istft(s, x.size());
    const auto [lo, hi] = cola_interior(s.frames());
    const std::span<const double> ys(y.samples.data() + lo, hi - lo), xs(x.samples.data() + lo, hi - lo);
    CHECK(relative_l2(ys, xs) < 1e-6);
  }
  SECTION("impulse") {
    std::vector<double> x(4096, 0.0);
    x[1500] = 1.0;
    const auto y = istft(stft(x), x.size());
    for (std::size_t i = 256; i < 3840; ++i) CHECK(std::abs(y.samples[i] - x[i]) < 1e-6);
  }
  SECTION("zero spectrogram") {
    const auto y = istft(zero_spectrogram(10), 3000);
    CHECK(std::all_of(y.samples.begin(), y.samples.end(), [](double v) { return v == 0.0; }));
  }
  SECTION("edge samples are tapered, not amplified") {
    const auto x = random_waveform(3000, 5);
    const auto y = istft(stft(x), x.size());
    for (std::size_t i = 0; i < 256; ++i) CHECK(std::abs(y.samples[i]) <= std::abs(x.samples[i]) + 1e-12);
  }
}

TEST_CASE("stft_adjoint satisfies the dot-product identity", "[stft][adjoint]") {
  Rng rng(123);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 512 + uniform_index(rng, 3000);
    const auto x = random_waveform(n, derive_seed(7, static_cast<std::uint64_t>(trial)));
    const auto sx = stft(x);
    ComplexSpectrogram g = zero_spectrogram(sx.frames());
    for (Eigen::Index i = 0; i < g.data.size(); ++i) g.data.data()[i] = Complex(gaussian(rng), gaussian(rng));
    double lhs = 0.0;
    for (Eigen::Index i = 0; i < g.data.size(); ++i)
      lhs += sx.data.data()[i].real() * g.data.data()[i].real() + sx.data.data()[i].imag() * g.data.data()[i].imag();
    const auto ax = stft_adjoint(g, n);
    double rhs = 0.0;
    for (std::size_t i = 0; i < n; ++i) rhs += x.samples[i] * ax[i];
    double nx = 0.0, ng = 0.0;
    for (double v : x.samples) nx += v * v;
    for (Eigen::Index i = 0; i < g.data.size(); ++i) ng += std::norm(g.data.data()[i]);
    CHECK(std::abs(lhs - rhs) / (std::sqrt(nx) * std::sqrt(ng)) < 1e-8);
  }
}

TEST_CASE("stft_adjoint zero and support", "[stft][adjoint]") {
  const auto zero = stft_adjoint(zero_spectrogram(5), 512 + 4 * 256);
  CHECK(std::all_of(zero.begin(), zero.end(), [](double v) { return v == 0.0; }));

  ComplexSpectrogram g = zero_spectrogram(5);
  g.data(2, 10) = Complex(1.0, 0.0);
  const auto a = stft_adjoint(g, 512 + 4 * 256);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i < 512 || i >= 1024) {
      CHECK(a[i] == 0.0);
    } else {
      const std::size_t n = i - 512;
      const double expect = hann_window()[n] * std::cos(2.0 * kPi * 10.0 * static_cast<double>(n) / 512.0);
      CHECK(a[i] == Approx(expect).margin(1e-12));
    }
  }
  CHECK_THROWS_AS(stft_adjoint(zero_spectrogram(5), 400), Error);
}

TEST_CASE("istft_adjoint matches istft under the dot product", "[stft][adjoint]") {
  Rng rng(5);
  const std::size_t frames = 9, len = 512 + 8 * 256 + 77;
  ComplexSpectrogram s = zero_spectrogram(frames);
  for (Eigen::Index i = 0; i < s.data.size(); ++i) s.data.data()[i] = Complex(gaussian(rng), gaussian(rng));
  for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(frames); ++t) {
    s.data(t, 0).imag(0.0);
    s.data(t, kBins - 1).imag(0.0);
  }
  std::vector<double> g(len);
  for (double& v : g) v = gaussian(rng);
  const auto y = istft_samples(s, len);
  double lhs = 0.0;
  for (std::size_t i = 0; i < len; ++i) lhs += y[i] * g[i];
  const auto gs = istft_adjoint(g, frames);
  double rhs = 0.0;
  for (Eigen::Index i = 0; i < s.data.size(); ++i)
    rhs += s.data.data()[i].real() * gs.data.data()[i].real() + s.data.data()[i].imag() * gs.data.data()[i].imag();
  CHECK(std::abs(lhs - rhs) <= 1e-9 * std::abs(lhs));
}

TEST_CASE("mix_at_snr", "[mix]") {
  const auto clean = synth::speech_like(2.0, 11);
  SECTION("equal power at 0 dB gives unit gain") {
    const auto a = random_waveform(8000, 1, 0.3);
    auto b = random_waveform(8000, 2, 0.3);
    const double scale = std::sqrt(mean_power(a.samples) / mean_power(b.samples));
    for (double& v : b.samples) v *= scale;
    const auto m = mix_at_snr(a, b, 0.0, 0);
    CHECK(std::abs(m.noise_gain - 1.0) < 1e-9);
  }
  SECTION("recomputed SNR matches the request") {
    const auto noise = synth::noise(synth::NoiseKind::kPink, 3.0, 4);
    for (double snr : {-5.0, 0.0, 5.0, 10.0, 20.0}) {
      const auto m = mix_at_snr(clean, noise, snr, 17);
      const double measured = 10.0 * std::log10(mean_power(m.clean.samples) / mean_power(m.noise.samples));
      CHECK(std::abs(measured - snr) < 0.01);
      for (std::size_t i = 0; i < m.noisy.size(); i += 97)
        CHECK(m.noisy.samples[i] == Approx(m.clean.samples[i] + m.noise.samples[i]).margin(1e-15));
    }
  }
  SECTION("short noise is tiled, long noise cropped, both seeded") {
    const auto short_noise = synth::noise(synth::NoiseKind::kWhite, 0.3, 5);
    const auto m1 = mix_at_snr(clean, short_noise, 5.0, 3);
    const auto m2 = mix_at_snr(clean, short_noise, 5.0, 3);
    CHECK(m1.noisy.samples == m2.noisy.samples);
    CHECK(m1.noisy.size() == clean.size());
    const auto fitted = fit_noise(short_noise.samples, clean.size(), 3);
    CHECK(fitted[0] == fitted[short_noise.size()]);
  }
  SECTION("clipping rescales mixture and reference jointly") {
    const auto loud = synth::sine(300.0, 0.95, 1.0);
    const auto noise = synth::noise(synth::NoiseKind::kWhite, 1.0, 8);
    const auto m = mix_at_snr(loud, noise, 0.0, 1);
    CHECK(m.rescale < 1.0);
    double peak = 0.0;
    for (double v : m.noisy.samples) peak = std::max(peak, std::abs(v));
    CHECK(peak <= 1.0 + 1e-12);
    for (std::size_t i = 0; i < loud.size(); i += 101) CHECK(m.clean.samples[i] == Approx(loud.samples[i] * m.rescale));
  }
  SECTION("errors") {
    const Waveform silent{std::vector<double>(1000, 0.0), 16000};
    try {
      mix_at_snr(clean, silent, 0.0);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()) == "zero-power noise");
    }
    CHECK_THROWS_AS(mix_at_snr(silent, clean, 0.0), Error);
    CHECK_THROWS_AS(mix_at_snr(clean, Waveform{clean.samples, 8000}, 0.0), Error);
  }
}

TEST_CASE("apply_channel", "[channel]") {
  const auto x = synth::speech_like(1.0, 21);
  SECTION("identity profile") {
    const ChannelProfile p{0.0, 8000.0, std::nullopt, 0.0, 0};
    const auto y = apply_channel(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.samples[i] - x.samples[i]) <= 1e-6);
  }
  SECTION("phone band rejects 5 kHz") {
    const auto tone = synth::sine(5000.0, 0.5, 1.0);
    auto p = ChannelProfile::phone();
    p.frame_drop_prob = 0.0;
    const auto y = apply_channel(tone, p);
    CHECK(rms(y.samples) < 0.05 * rms(tone.samples));
  }
  SECTION("phone band passes 1 kHz") {
    const auto tone = synth::sine(1000.0, 0.5, 1.0);
    auto p = ChannelProfile::phone();
    p.frame_drop_prob = 0.0;
    CHECK(rms(apply_channel(tone, p).samples) == Approx(rms(tone.samples)).epsilon(0.05));
  }
  SECTION("drop probability one zeroes everything") {
    const ChannelProfile p{0.0, 8000.0, std::nullopt, 1.0, 3};
    const auto y = apply_channel(x, p);
    CHECK(std::all_of(y.samples.begin(), y.samples.end(), [](double v) { return v == 0.0; }));
  }
  SECTION("deterministic under a seed") {
    auto p = ChannelProfile::phone();
    p.frame_drop_prob = 0.3;
    p.seed = 99;
    CHECK(apply_channel(x, p).samples == apply_channel(x, p).samples);
  }
  SECTION("mu-law quantizer error bounded") {
    for (double v : {-0.9, -0.1, -0.001, 0.0, 0.002, 0.3, 0.99}) CHECK(std::abs(mu_law_roundtrip(v, 8) - v) < 0.02);
  }
  SECTION("invalid profile") {
    CHECK_THROWS_AS(apply_channel(x, ChannelProfile{3000.0, 300.0, std::nullopt, 0.0, 0}), Error);
    CHECK_THROWS_AS(apply_channel(x, ChannelProfile{0.0, 9000.0, std::nullopt, 0.0, 0}), Error);
  }
  SECTION("json round trip keeps field names") {
    const nlohmann::json j = ChannelProfile::phone();
    for (const char* key : {"band_low_hz", "band_high_hz", "mu_law_bits", "frame_drop_prob", "seed"})
      CHECK(j.contains(key));
    const auto back = j.get<ChannelProfile>();
    CHECK(back.mu_law_bits == 8);
    CHECK(back.band_high_hz == 3400.0);
  }
}
