#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "taploss/acoustic.hpp"
#include "taploss/synthetic.hpp"
#include "test_support.hpp"

using namespace taploss;
using namespace taploss::testing;
using Catch::Approx;

namespace {

std::vector<double> frame_of(const Waveform& w, std::size_t start = 0) {
  return {w.samples.begin() + static_cast<std::ptrdiff_t>(start),
          w.samples.begin() + static_cast<std::ptrdiff_t>(start + kFftSize)};
}

double semitone_to_hz(double st) { return 27.5 * std::pow(2.0, st / 12.0); }

// All-pole synthesis with known pole positions: the oracle for formant recovery.
// Excitation is a 100 Hz pulse train so a harmonic sits on each test formant.
Waveform all_pole(const std::vector<std::pair<double, double>>& formants, bool pulse_train, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 4096;
  std::vector<double> x(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) x[i] = pulse_train ? (i % 160 == 0 ? 1.0 : 0.0) : gaussian(rng);
  for (const auto& [f, bw] : formants) {
    const double r = std::exp(-kPi * bw / kSampleRate);
    const double a1 = 2.0 * r * std::cos(2.0 * kPi * f / kSampleRate), a2 = -r * r;
    double y1 = 0.0, y2 = 0.0;
    for (double& v : x) {
      const double y = v + a1 * y1 + a2 * y2;
      y2 = y1;
      y1 = y;
      v = y;
    }
  }
  synth::normalize_peak(x, 0.5);
  return Waveform{std::move(x), kSampleRate};
}

}  // namespace

TEST_CASE("parameter list is fixed", "[taps]") {
  REQUIRE(param_names().size() == 25);
  CHECK(param_names()[0] == "loudness");
  CHECK(param_names()[10] == "F0semitone");
  CHECK(param_names()[13] == "HNRdBACF");
  CHECK(param_names()[24] == "F3amplitudeLogRelF0");
}

TEST_CASE("f0_autocorr", "[pitch]") {
  SECTION("220 Hz sine") {
    const auto tone = synth::sine(220.0, 0.5, 0.2);
    const auto p = f0_autocorr(frame_of(tone, 700));
    CHECK(p.voiced);
    CHECK(std::abs(p.f0_hz - 220.0) <= 2.0);
  }
  SECTION("pitch sweep across the search range") {
    for (double f : {65.0, 100.0, 150.0, 310.0, 480.0}) {
      const auto tone = synth::sine(f, 0.3, 0.2);
      const auto p = f0_autocorr(frame_of(tone, 300));
      CHECK(p.voiced);
      CHECK(std::abs(p.f0_hz - f) <= 0.01 * f);
    }
  }
  SECTION("white noise is unvoiced") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto n = random_waveform(kFftSize, seed);
      CHECK_FALSE(f0_autocorr(n.samples).voiced);
    }
  }
  SECTION("zero frame") {
    const auto p = f0_autocorr(std::vector<double>(kFftSize, 0.0));
    CHECK(p.f0_hz == 0.0);
    CHECK_FALSE(p.voiced);
  }
  SECTION("wrong frame size") { CHECK_THROWS_AS(f0_autocorr(std::vector<double>(100, 0.0)), Error); }
}

TEST_CASE("hnr_acf", "[hnr]") {
  SECTION("perfectly periodic frame hits the ceiling") {
    const auto tone = synth::sine(200.0, 0.5, 0.2);
    CHECK(hnr_acf(frame_of(tone, 1000)) == Approx(40.0).margin(1e-6));
  }
  SECTION("unvoiced frame is the floor") {
    CHECK(hnr_acf(std::vector<double>(kFftSize, 0.0)) == -20.0);
    CHECK(hnr_acf(random_waveform(kFftSize, 4).samples) == -20.0);
  }
  SECTION("sine plus equal-power white noise sits near 0 dB") {
    // Monte Carlo: r -> P_s / (P_s + P_n) = 1/2, i.e. 0 dB.
    double sum = 0.0;
    int voiced = 0;
    const int trials = 200;
    for (int trial = 0; trial < trials; ++trial) {
      Rng rng(derive_seed(31, static_cast<std::uint64_t>(trial)));
      const double phase = uniform(rng, 0.0, 2.0 * kPi);
      const auto tone = synth::sine(220.0, 1.0, static_cast<double>(kFftSize) / kSampleRate, kSampleRate, phase);
      std::vector<double> x = tone.samples;
      const double sigma = std::sqrt(0.5);  // equal power to a unit sine
      for (double& v : x) v += sigma * gaussian(rng);
      const auto p = f0_autocorr(x);
      if (!p.voiced) continue;
      ++voiced;
      sum += hnr_from_pitch(p);
    }
    CHECK(voiced >= trials * 3 / 4);
    CHECK(std::abs(sum / voiced) <= 2.0);
  }
}

TEST_CASE("formants_lpc", "[formants]") {
  SECTION("single resonator at 700 Hz / 110 Hz") {
    const auto w = all_pole({{700.0, 110.0}}, true, 5);
    const auto f = formants_lpc(frame_of(w, 2048));
    CHECK(std::abs(f[0].freq_hz - 700.0) <= 25.0);
  }
  SECTION("three-resonator vowel") {
    {
      const auto w = all_pole({{700.0, 80.0}, {1220.0, 90.0}, {2600.0, 120.0}}, true, 6);
      const auto f = formants_lpc(frame_of(w, 2048));
      CHECK(std::abs(f[0].freq_hz - 700.0) <= 50.0);
      CHECK(std::abs(f[1].freq_hz - 1220.0) <= 50.0);
      CHECK(std::abs(f[2].freq_hz - 2600.0) <= 50.0);
      for (const auto& fm : f) {
        CHECK(fm.bandwidth_hz > 0.0);
        CHECK(fm.bandwidth_hz <= 600.0);
      }
    }
  }
  SECTION("zero frame gives zeros") {
    const auto f = formants_lpc(std::vector<double>(kFftSize, 0.0));
    for (const auto& fm : f) {
      CHECK(fm.freq_hz == 0.0);
      CHECK(fm.bandwidth_hz == 0.0);
    }
  }
  SECTION("levinson on a singular system") { CHECK(levinson_durbin(std::vector<double>(13, 0.0), 12).empty()); }
}

TEST_CASE("spectral_params", "[spectral]") {
  const auto speech = synth::speech_like(1.0, 8);
  SECTION("doubling the waveform adds log10(4) to loudness") {
    Waveform louder = speech;
    for (double& v : louder.samples) v *= 2.0;
    const auto a = extract_taps(speech), b = extract_taps(louder);
    for (Eigen::Index t = 0; t < a.data.rows(); ++t) {
      if (a.data(t, param::kLoudness) <= kLoudnessFloor + 1.0) continue;
      CHECK(b.data(t, param::kLoudness) - a.data(t, param::kLoudness) == Approx(std::log10(4.0)).margin(1e-6));
    }
  }
  SECTION("energy below 1 kHz gives positive alpha ratio") {
    const auto tone = synth::sine(400.0, 0.5, 0.1);
    const auto s = stft(tone);
    std::vector<double> mag(kBins);
    for (std::size_t k = 0; k < kBins; ++k) mag[k] = std::abs(s.data(0, static_cast<Eigen::Index>(k)));
    CHECK(spectral_params(mag).alpha_ratio > 0.0);
  }
  SECTION("stationary tone has near-zero flux on interior frames") {
    const auto a = extract_taps(synth::sine(440.0, 0.5, 1.0));
    CHECK(a.data(0, param::kFlux) == 0.0);
    for (Eigen::Index t = 1; t < a.data.rows(); ++t) CHECK(a.data(t, param::kFlux) < 1e-3);
  }
  SECTION("mfcc of a flat spectrum are zero") {
    // A white spectrum gives band energies proportional to band width only,
    // so compare against the DCT of those log widths computed directly.
    std::vector<double> flat(kBins, 1.0);
    const auto sp = spectral_params(flat);
    const auto& bank = detail::mel_bank();
    for (std::size_t c = 1; c <= 4; ++c) {
      double acc = 0.0;
      for (std::size_t m = 0; m < kMelBands; ++m) {
        double e = 0.0;
        for (double w : bank.weights[m]) e += w;
        acc += std::log(kEps + e) * std::cos(kPi * c * (m + 0.5) / kMelBands);
      }
      CHECK(sp.mfcc[c - 1] == Approx(std::sqrt(2.0 / kMelBands) * acc).margin(1e-12));
    }
  }
}

TEST_CASE("extract_taps known signals", "[taps]") {
  SECTION("220 Hz tone") {
    const auto a = extract_taps(synth::sine(220.0, 0.5, 1.0));
    int voiced = 0;
    for (Eigen::Index t = 0; t < a.data.rows(); ++t) {
      const double st = a.data(t, param::kF0Semitone);
      if (st == 0.0) continue;
      ++voiced;
      CHECK(std::abs(semitone_to_hz(st) - 220.0) <= 2.0);
    }
    CHECK(voiced == a.data.rows());
  }
  SECTION("digital silence uses the unvoiced conventions") {
    const auto a = extract_taps(Waveform{std::vector<double>(8000, 0.0), kSampleRate});
    for (Eigen::Index t = 0; t < a.data.rows(); ++t) {
      CHECK(a.data(t, param::kF0Semitone) == 0.0);
      CHECK(a.data(t, param::kHnr) == kHnrFloorDb);
      CHECK(a.data(t, param::kLoudness) == Approx(kLoudnessFloor));
    }
  }
  SECTION("tone is more harmonic than noise by at least 10 dB") {
    const auto tone = extract_taps(synth::sine(220.0, 0.5, 1.0));
    const auto noise = extract_taps(random_waveform(16000, 77));
    CHECK(tone.data.col(param::kHnr).mean() - noise.data.col(param::kHnr).mean() >= 10.0);
  }
  SECTION("too short") { CHECK_THROWS_AS(extract_taps(random_waveform(300, 1)), Error); }
}

TEST_CASE("extract_taps invariants on speech-like input", "[taps][property]") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto w = synth::speech_like(1.5, 100 + seed);
    const auto a = extract_taps(w);
    // Shape lock with the spectrogram grid.
    CHECK(a.frames() == stft(w).frames());
    CHECK(a.data.allFinite());
    // Determinism.
    CHECK(extract_taps(w).data == a.data);
    // Voicing consistency.
    for (Eigen::Index t = 0; t < a.data.rows(); ++t) {
      if (a.data(t, param::kF0Semitone) != 0.0) continue;
      for (auto p : {param::kJitter, param::kShimmer, param::kH1H2, param::kH1A3, param::kF1Amp, param::kF2Amp,
                     param::kF3Amp})
        CHECK(a.data(t, p) == 0.0);
    }
    // Gain covariance.
    for (double gain : {0.25, 0.5, 2.0}) {
      Waveform g = w;
      for (double& v : g.samples) v *= gain;
      const auto b = extract_taps(g);
      for (Eigen::Index t = 0; t < a.data.rows(); ++t) {
        if (a.data(t, param::kLoudness) <= kLoudnessFloor + 1.0) continue;
        if (gain > 1.0) CHECK(b.data(t, param::kLoudness) > a.data(t, param::kLoudness));
        if (gain < 1.0) CHECK(b.data(t, param::kLoudness) < a.data(t, param::kLoudness));
        for (auto p : {param::kF0Semitone, param::kAlphaRatio, param::kHammarberg})
          CHECK(b.data(t, p) == Approx(a.data(t, p)).margin(1e-6));
        for (auto p : {param::kF1Freq, param::kF2Freq, param::kF3Freq})
          CHECK(b.data(t, p) == Approx(a.data(t, p)).margin(1e-4));
      }
    }
  }
}

TEST_CASE("compute_stats", "[stats]") {
  SECTION("degenerate parameter") {
    AcousticMatrix a{Matrix::Random(10, 25)}, b{Matrix::Random(10, 25)};
    a.data.col(4).setConstant(3.0);
    b.data.col(4).setConstant(3.0);
    const std::vector<AcousticMatrix> corpus{a, b};
    CHECK_THROWS_WITH(compute_stats(corpus), Catch::Matchers::ContainsSubstring("degenerate parameter"));
  }
  SECTION("population convention") {
    AcousticMatrix a{Matrix::Zero(1, 25)}, b{Matrix::Constant(1, 25, 2.0)};
    const std::vector<AcousticMatrix> corpus{a, b};
    const auto s = compute_stats(corpus);
    for (Eigen::Index p = 0; p < 25; ++p) {
      CHECK(s.mean[p] == Approx(1.0));
      CHECK(s.std[p] == Approx(1.0));
    }
  }
  SECTION("matches a brute-force two-pass computation") {
    Rng rng(4);
    std::vector<AcousticMatrix> corpus;
    for (int i = 0; i < 5; ++i) {
      AcousticMatrix m{Matrix(20 + i * 7, 25)};
      for (Eigen::Index k = 0; k < m.data.size(); ++k) m.data.data()[k] = 300.0 * gaussian(rng) + 1500.0;
      corpus.push_back(m);
    }
    const auto s = compute_stats(corpus);
    for (Eigen::Index p = 0; p < 25; ++p) {
      double sum = 0.0, n = 0.0;
      for (const auto& m : corpus)
        for (Eigen::Index t = 0; t < m.data.rows(); ++t) sum += m.data(t, p), n += 1.0;
      const double mean = sum / n;
      double ss = 0.0;
      for (const auto& m : corpus)
        for (Eigen::Index t = 0; t < m.data.rows(); ++t) ss += (m.data(t, p) - mean) * (m.data(t, p) - mean);
      CHECK(std::abs(s.mean[p] - mean) < 1e-10 * std::abs(mean));
      CHECK(std::abs(s.std[p] - std::sqrt(ss / n)) < 1e-10 * std::sqrt(ss / n));
    }
    // Merging per-matrix accumulators in any order agrees with one pass.
    TapAccumulator fwd, rev;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      TapAccumulator one, other;
      one.add(corpus[i]);
      other.add(corpus[corpus.size() - 1 - i]);
      fwd.merge(one);
      rev.merge(other);
    }
    CHECK((fwd.finish().mean - s.mean).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((rev.finish().std - s.std).cwiseAbs().maxCoeff() < 1e-9);
  }
  SECTION("needs two matrices") {
    const std::vector<AcousticMatrix> one{AcousticMatrix{Matrix::Random(5, 25)}};
    CHECK_THROWS_AS(compute_stats(one), Error);
  }
}

TEST_CASE("standardize", "[stats]") {
  const AcousticMatrix a{Matrix::Random(30, 25) * 50.0};
  TapStats s;
  for (Eigen::Index p = 0; p < 25; ++p) {
    s.mean[p] = 3.0 * p - 10.0;
    s.std[p] = 0.5 + p;
  }
  const auto z = standardize(a, s);
  for (Eigen::Index t = 0; t < 30; ++t)
    for (Eigen::Index p = 0; p < 25; ++p) CHECK(z.data(t, p) == Approx((a.data(t, p) - s.mean[p]) / s.std[p]).margin(1e-12));
  CHECK((destandardize(z, s).data - a.data).cwiseAbs().maxCoeff() < 1e-12);

  const std::vector<AcousticMatrix> corpus{AcousticMatrix{a.data.topRows(15)}, AcousticMatrix{a.data.bottomRows(15)}};
  const auto own = compute_stats(corpus);
  const auto zs = standardize(a, own);
  for (Eigen::Index p = 0; p < 25; ++p) {
    CHECK(std::abs(zs.data.col(p).mean()) < 1e-12);
    const double var = (zs.data.col(p).array() - zs.data.col(p).mean()).square().mean();
    CHECK(std::sqrt(var) == Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("matrix file formats", "[io]") {
  const auto a = extract_taps(synth::speech_like(0.5, 3));
  const auto csv = to_csv(a);
  CHECK(csv.rfind("loudness,alphaRatio,", 0) == 0);
  const auto back = from_csv(csv);
  REQUIRE(back.frames() == a.frames());
  for (Eigen::Index i = 0; i < a.data.size(); ++i)
    CHECK(back.data.data()[i] == Approx(a.data.data()[i]).epsilon(1e-8).margin(1e-30));

  const auto bin = to_binary(a);
  const auto fb = from_binary(bin);
  for (Eigen::Index i = 0; i < a.data.size(); ++i)
    CHECK(fb.data.data()[i] == static_cast<double>(static_cast<float>(a.data.data()[i])));
  CHECK_THROWS_AS(from_csv("nope\n1,2\n"), Error);
}
