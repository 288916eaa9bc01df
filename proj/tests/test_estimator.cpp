#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "taploss/estimator.hpp"
#include "taploss/synthetic.hpp"
#include "test_support.hpp"

using namespace taploss;
using namespace taploss::testing;
using Catch::Approx;

namespace {

std::vector<Waveform> small_corpus(std::size_t n, double dur, std::uint64_t seed) {
  std::vector<Waveform> out;
  for (std::size_t i = 0; i < n; ++i) {
    Waveform w = synth::speech_like(dur, derive_seed(seed, i));
    const auto nz = synth::noise(synth::NoiseKind::kWhite, dur, derive_seed(seed, 100 + i));
    for (std::size_t k = 0; k < w.size(); ++k) w.samples[k] += 0.02 * nz.samples[k];
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

TEST_CASE("featurize", "[features]") {
  SECTION("zero signal") { CHECK(featurize(Waveform{std::vector<double>(4000, 0.0), kSampleRate}).isZero(0.0)); }
  SECTION("frame count and width") {
    const auto w = random_waveform(5000, 3);
    const Matrix f = featurize(w);
    CHECK(f.rows() == static_cast<Eigen::Index>(stft(w).frames()));
    CHECK(f.cols() == 514);
  }
  SECTION("DC input has a vanishing imaginary half") {
    const Matrix f = featurize(Waveform{std::vector<double>(3000, 0.4), kSampleRate});
    CHECK(f.rightCols(257).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(f(0, 0) == Approx(std::log1p(0.4 * 256.0)).epsilon(1e-12));
  }
  SECTION("entries are signed log1p of the spectrogram") {
    const auto w = random_waveform(2000, 5);
    const auto s = stft(w);
    const Matrix f = featurize(w);
    for (Eigen::Index t = 0; t < f.rows(); ++t)
      for (Eigen::Index k = 0; k < 257; ++k) {
        const Complex c = s.data(t, k);
        CHECK(f(t, k) == Approx((c.real() < 0 ? -1.0 : 1.0) * std::log1p(std::abs(c.real()))).margin(1e-14));
        CHECK(f(t, 257 + k) == Approx((c.imag() < 0 ? -1.0 : 1.0) * std::log1p(std::abs(c.imag()))).margin(1e-14));
      }
  }
  SECTION("backward matches central differences on the spectrogram") {
    auto s = stft(random_waveform(1024, 8));
    Rng rng(9);
    Matrix c(static_cast<Eigen::Index>(s.frames()), 514);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = gaussian(rng);
    const auto g = featurize_backward(s, c);
    const double h = 1e-6;
    double worst = 0.0;
    for (Eigen::Index t = 0; t < s.data.rows(); ++t)
      for (Eigen::Index k = 0; k < 257; k += 7)
        for (int part = 0; part < 2; ++part) {
          auto bump = [&](double d) {
            auto p = s;
            p.data(t, k) += part == 0 ? Complex(d, 0.0) : Complex(0.0, d);
            return (featurize(p).array() * c.array()).sum();
          };
          const double num = (bump(h) - bump(-h)) / (2.0 * h);
          const double an = part == 0 ? g.data(t, k).real() : g.data(t, k).imag();
          worst = std::max(worst, std::abs(num - an) / std::max({std::abs(num), std::abs(an), 1e-8}));
        }
    CHECK(worst < 1e-5);
  }
  SECTION("too short") { CHECK_THROWS_AS(featurize(random_waveform(100, 1)), Error); }
}

TEST_CASE("predict", "[estimator]") {
  const auto m = make_estimator(16, 2, 4);
  const auto w = synth::speech_like(0.5, 2);
  const auto a = predict(w, m);
  CHECK(a.data.rows() == static_cast<Eigen::Index>(stft(w).frames()));
  CHECK(a.data.cols() == 25);
  CHECK(a.data.allFinite());
  CHECK(predict(w, m).data == a.data);

  auto bad = m;
  bad.grid.hop = 128;
  CHECK_THROWS_WITH(predict(w, bad), Catch::Matchers::ContainsSubstring("grid"));
}

TEST_CASE("train config and split", "[estimator]") {
  TrainConfig cfg;
  cfg.lr = -1e-3;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.validation_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  const auto s = split_indices(10, 0.2, 3);
  CHECK(s.validation.size() == 2);
  CHECK(s.train.size() == 8);
  CHECK(split_indices(10, 0.2, 3).validation == s.validation);

  const std::vector<Waveform> one{synth::speech_like(0.5, 1)};
  TrainConfig c1;
  c1.validation_fraction = 0.5;
  CHECK_THROWS_WITH(train_estimator(one, c1, {8, 1}), Catch::Matchers::ContainsSubstring("insufficient split"));
  CHECK_THROWS_AS(train_estimator(std::vector<Waveform>{}, TrainConfig{}, {8, 1}), Error);
}

TEST_CASE("train_estimator", "[estimator][training]") {
  const auto corpus = small_corpus(6, 0.6, 17);
  SECTION("lr = 0 leaves the history flat") {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.validation_fraction = 0.34;
    cfg.lr = 0.0;
    const auto r = train_estimator(corpus, cfg, {8, 1});
    REQUIRE(r.history.size() == 4);
    for (const auto& row : r.history) {
      CHECK(std::abs(row.train_mae - r.history[0].train_mae) < 1e-12);
      CHECK(std::abs(row.val_mae - r.history[0].val_mae) < 1e-12);
    }
  }
  SECTION("training lowers validation MAE and reports the best epoch") {
    TrainConfig cfg;
    cfg.epochs = 12;
    cfg.lr = 5e-3;
    cfg.validation_fraction = 0.34;
    const auto r = train_estimator(corpus, cfg, {16, 1});
    REQUIRE(r.history.size() == 13);
    CHECK(r.history[0].epoch == 0);
    double best = r.history[0].val_mae;
    for (const auto& row : r.history) best = std::min(best, row.val_mae);
    CHECK(best < r.history[0].val_mae);
    CHECK(r.history[static_cast<std::size_t>(r.best_epoch)].val_mae == best);

    // Returned parameters reproduce the best epoch's recorded train MAE.
    double train = 0.0;
    for (std::size_t i : r.split.train) {
      const auto target = standardize(extract_taps(corpus[i]), r.model.stats);
      train += nn::mae_loss(predict(corpus[i], r.model).data, target.data).loss;
    }
    train /= static_cast<double>(r.split.train.size());
    CHECK(train <= 1.1 * r.history[static_cast<std::size_t>(r.best_epoch)].train_mae);

    // Stats come from the training split only.
    std::vector<AcousticMatrix> tr;
    for (std::size_t i : r.split.train) tr.push_back(extract_taps(corpus[i]));
    const auto own = compute_stats(tr);
    CHECK((own.mean - r.model.stats.mean).cwiseAbs().maxCoeff() < 1e-9 * (1.0 + own.mean.cwiseAbs().maxCoeff()));

    const auto csv = history_csv(r.history);
    CHECK(csv.rfind("epoch,train_mae,val_mae\n0,", 0) == 0);
  }
  SECTION("same seed, same result") {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.validation_fraction = 0.34;
    const auto a = train_estimator(corpus, cfg, {8, 1});
    const auto b = train_estimator(corpus, cfg, {8, 1});
    CHECK(a.model.net.params() == b.model.net.params());
  }
}

TEST_CASE("standardization consistency", "[estimator]") {
  TapStats s;
  for (Eigen::Index p = 0; p < 25; ++p) {
    s.mean[p] = 100.0 * std::sin(static_cast<double>(p));
    s.std[p] = 1.0 + p * 37.0;
  }
  auto m = make_estimator(8, 1, 3);
  m.stats = s;
  const auto a = predict(synth::speech_like(0.4, 3), m);
  CHECK((standardize(destandardize(a, s), s).data - a.data).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("estimator checkpoints", "[estimator][checkpoint]") {
  auto m = make_estimator(32, 2, 5);
  m.stats.mean.setConstant(0.5);
  m.stats.std.setConstant(2.0);
  const auto w = synth::speech_like(0.4, 6);
  const auto dir = std::filesystem::temp_directory_path() / "taploss_test_estimator";
  std::filesystem::create_directories(dir);
  const auto path = dir / "est.ckpt";
  save_estimator(m, path, {{"lr", 1e-3}}, 5);

  SECTION("round trip predicts bit-identically") {
    const auto loaded = load_estimator(path);
    CHECK(loaded.warnings.empty());
    CHECK(predict(w, loaded.model).data == predict(w, m).data);
    CHECK(loaded.model.stats.mean == m.stats.mean);
    CHECK(loaded.model.stats.std == m.stats.std);
  }
  SECTION("embedded metadata") {
    const auto ck = nn::decode_checkpoint(nn::read_bytes(path));
    CHECK(ck.header.at("model_kind") == "tap_estimator");
    CHECK(ck.header.at("param_names").size() == 25);
    CHECK(ck.header.at("frame_grid").at("n_fft") == 512);
  }
  SECTION("requested architecture differs: loads with a warning") {
    const auto loaded = load_estimator(path, EstimatorArchitecture{128, 2});
    REQUIRE(loaded.warnings.size() == 1);
    CHECK(loaded.model.net.config().hidden == std::vector<Eigen::Index>{32, 32});
  }
  SECTION("flipped byte") {
    auto bytes = nn::read_bytes(path);
    bytes[bytes.size() / 2] ^= 0x40;
    CHECK_THROWS_WITH(decode_estimator(bytes), Catch::Matchers::ContainsSubstring("CRC"));
  }
  SECTION("incompatible grid") {
    auto other = m;
    other.grid.hop = 128;
    CHECK_THROWS_WITH(decode_estimator(encode_estimator(other)), Catch::Matchers::ContainsSubstring("grid"));
  }
  SECTION("wrong kind") {
    const auto bytes = nn::encode_checkpoint("enhancer", m.net.params(), {}, 0);
    CHECK_THROWS_AS(decode_estimator(bytes), Error);
  }
  std::filesystem::remove_all(dir);
}
