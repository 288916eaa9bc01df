#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taploss/acoustic.hpp"
#include "taploss/common.hpp"
#include "taploss/neural.hpp"
#include "taploss/signal.hpp"

namespace taploss {

inline constexpr Eigen::Index kFeatureDim = 2 * static_cast<Eigen::Index>(kBins);  // 514

// ---------------------------------------------------------------------------
// Featurization: [Re_0..Re_256, Im_0..Im_256] with signed log compression.
// ---------------------------------------------------------------------------

inline double signed_log(double x) { return std::copysign(std::log1p(std::abs(x)), x); }
inline double signed_log_derivative(double x) { return 1.0 / (1.0 + std::abs(x)); }

inline Matrix featurize(const ComplexSpectrogram& s) {
  Matrix f(static_cast<Eigen::Index>(s.frames()), kFeatureDim);
  for (Eigen::Index t = 0; t < f.rows(); ++t)
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(kBins); ++k) {
      f(t, k) = signed_log(s.data(t, k).real());
      f(t, k + static_cast<Eigen::Index>(kBins)) = signed_log(s.data(t, k).imag());
    }
  return f;
}

inline Matrix featurize(const Waveform& y) {
  require_processable(y);
  if (y.sample_rate_hz != kSampleRate) throw Error("rate_mismatch", "featurize expects 16 kHz input");
  return featurize(stft(y));
}

/// Pulls a feature-space gradient back to a spectrogram gradient.
inline ComplexSpectrogram featurize_backward(const ComplexSpectrogram& s, const Matrix& grad_features) {
  ComplexSpectrogram g = zero_spectrogram(s.frames());
  for (Eigen::Index t = 0; t < grad_features.rows(); ++t)
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(kBins); ++k) {
      const Complex v = s.data(t, k);
      g.data(t, k) = Complex(grad_features(t, k) * signed_log_derivative(v.real()),
                             grad_features(t, k + static_cast<Eigen::Index>(kBins)) * signed_log_derivative(v.imag()));
    }
  return g;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct FrameGrid {
  std::size_t n_fft = kFftSize;
  std::size_t hop = kHop;
  std::string window = "hann";
  int sample_rate_hz = kSampleRate;

  bool operator==(const FrameGrid&) const = default;
};

inline void to_json(nlohmann::json& j, const FrameGrid& g) {
  j = nlohmann::json{{"n_fft", g.n_fft}, {"hop", g.hop}, {"window", g.window}, {"sample_rate_hz", g.sample_rate_hz}};
}

inline void from_json(const nlohmann::json& j, FrameGrid& g) {
  g.n_fft = j.at("n_fft").get<std::size_t>();
  g.hop = j.at("hop").get<std::size_t>();
  g.window = j.at("window").get<std::string>();
  g.sample_rate_hz = j.at("sample_rate_hz").get<int>();
}

/// Recurrent TAP estimator: spectrogram features -> standardized T x 25.
struct EstimatorModel {
  nn::SequenceModel net;
  TapStats stats;
  FrameGrid grid;
};

inline EstimatorModel make_estimator(Eigen::Index hidden, std::size_t layers, std::uint64_t seed) {
  nn::SequenceConfig cfg{kFeatureDim, std::vector<Eigen::Index>(layers, hidden), static_cast<Eigen::Index>(kNumParams)};
  return EstimatorModel{nn::SequenceModel::create(cfg, seed), TapStats{}, FrameGrid{}};
}

inline void require_grid(const EstimatorModel& m) {
  if (!(m.grid == FrameGrid{})) throw Error("grid_mismatch", "estimator frame grid does not match the analysis grid");
}

/// Standardized parameter prediction for a waveform.
inline AcousticMatrix predict(const Waveform& y, const EstimatorModel& m) {
  require_grid(m);
  return AcousticMatrix{m.net.forward(featurize(y))};
}

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 30;
  int batch = 1;           // clips per optimizer step
  int bptt_chunk = 128;    // frames
  std::uint64_t seed = 0;
  double validation_fraction = 0.2;
  double clip_norm = 5.0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("invalid_config", "lr must be a finite non-negative number");
    if (epochs < 1) throw Error("invalid_config", "epochs must be >= 1");
    if (batch < 1) throw Error("invalid_config", "batch must be >= 1");
    if (bptt_chunk < 1) throw Error("invalid_config", "bptt_chunk must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw Error("invalid_config", "validation fraction must lie in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},       {"epochs", c.epochs}, {"batch", c.batch}, {"bptt_chunk", c.bptt_chunk},
                     {"seed", c.seed},   {"validation_fraction", c.validation_fraction}, {"clip_norm", c.clip_norm}};
}

/// Seeded train/validation partition: floor(n * fraction) validation items,
/// at least one on each side.
struct Split {
  std::vector<std::size_t> train, validation;
};

inline Split split_indices(std::size_t n, double fraction, std::uint64_t seed) {
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction));
  if (n_val == 0 || n_val >= n) throw Error("insufficient_split", "insufficient split");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  Split s;
  s.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

struct EstimatorHistoryRow {
  int epoch = 0;
  double train_mae = 0.0;
  double val_mae = 0.0;
};

struct EstimatorTraining {
  EstimatorModel model;  // best-validation parameters
  std::vector<EstimatorHistoryRow> history;
  int best_epoch = 0;
  Split split;
};

inline std::string history_csv(std::span<const EstimatorHistoryRow> rows) {
  std::string out = "epoch,train_mae,val_mae\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.epoch, r.train_mae, r.val_mae);
    out += buf;
  }
  return out;
}

struct EstimatorArchitecture {
  Eigen::Index hidden = 128;
  std::size_t layers = 2;
};

using ProgressFn = std::function<void(const std::string&)>;

inline EstimatorTraining train_estimator(std::span<const Waveform> corpus, const TrainConfig& cfg,
                                         EstimatorArchitecture arch = {}, const ProgressFn& progress = {}) {
  cfg.validate();
  if (corpus.empty()) throw Error("empty_corpus", "empty corpus");
  EstimatorTraining out;
  out.split = split_indices(corpus.size(), cfg.validation_fraction, derive_seed(cfg.seed, 1));

  std::vector<AcousticMatrix> raw(corpus.size());
  std::vector<Matrix> features(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    raw[i] = extract_taps(corpus[i]);
    features[i] = featurize(corpus[i]);
  }
  TapAccumulator acc;
  for (std::size_t i : out.split.train) acc.add(raw[i]);
  EstimatorModel model = make_estimator(arch.hidden, arch.layers, derive_seed(cfg.seed, 2));
  model.stats = acc.finish();
  std::vector<Matrix> targets(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) targets[i] = standardize(raw[i], model.stats).data;

  const auto evaluate = [&](const std::vector<std::size_t>& idx) {
    double total = 0.0;
    for (std::size_t i : idx) total += nn::mae_loss(model.net.forward(features[i]), targets[i]).loss;
    const double v = total / static_cast<double>(idx.size());
    if (!std::isfinite(v)) throw Error("non_finite_loss", "non-finite loss during estimator training");
    return v;
  };

  out.history.push_back({0, evaluate(out.split.train), evaluate(out.split.validation)});
  nn::ParamStore best = model.net.params();
  double best_val = out.history.back().val_mae;

  nn::AdamState adam = nn::AdamState::for_params(model.net.params(), cfg.lr);
  nn::ParamStore grads = model.net.params().zeros_like();
  Rng order_rng(derive_seed(cfg.seed, 3));
  std::vector<std::size_t> order = out.split.train;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[uniform_index(order_rng, i + 1)]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      grads.set_zero();
      for (std::size_t b = start; b < stop; ++b) {
        const Matrix& x = features[order[b]];
        const Matrix& y = targets[order[b]];
        const Eigen::Index steps = x.rows();
        nn::HiddenState state = model.net.zero_state();
        for (Eigen::Index c0 = 0; c0 < steps; c0 += cfg.bptt_chunk) {
          const Eigen::Index len = std::min<Eigen::Index>(cfg.bptt_chunk, steps - c0);
          nn::SequenceModel::Cache cache;
          nn::HiddenState next;
          const Matrix pred = model.net.forward(x.middleRows(c0, len), &cache, &state, &next);
          auto loss = nn::mae_loss(pred, y.middleRows(c0, len));
          if (!std::isfinite(loss.loss)) throw Error("non_finite_loss", "non-finite loss during estimator training");
          loss.grad *= static_cast<double>(len) / static_cast<double>(steps) / static_cast<double>(stop - start);
          model.net.backward(cache, loss.grad, grads);
          state = std::move(next);
        }
      }
      nn::clip_global_norm(grads, cfg.clip_norm);
      nn::adam_step(model.net.params(), grads, adam);
    }
    out.history.push_back({epoch, evaluate(out.split.train), evaluate(out.split.validation)});
    if (out.history.back().val_mae < best_val) {
      best_val = out.history.back().val_mae;
      best = model.net.params();
      out.best_epoch = epoch;
    }
    if (progress) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "epoch %d train_mae %.6f val_mae %.6f", epoch, out.history.back().train_mae,
                    out.history.back().val_mae);
      progress(buf);
    }
  }
  model.net.params() = best;
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

inline std::vector<unsigned char> encode_estimator(const EstimatorModel& m, nlohmann::json hyper = nlohmann::json::object(),
                                                   std::uint64_t seed = 0) {
  hyper["architecture"] = m.net.config();
  nlohmann::json extra = {{"tap_stats", m.stats}, {"param_names", param_names()}, {"frame_grid", m.grid}};
  return nn::encode_checkpoint("tap_estimator", m.net.params(), hyper, seed, extra);
}

inline void save_estimator(const EstimatorModel& m, const std::filesystem::path& path,
                           nlohmann::json hyper = nlohmann::json::object(), std::uint64_t seed = 0) {
  nn::write_bytes(path, encode_estimator(m, std::move(hyper), seed));
}

struct LoadedEstimator {
  EstimatorModel model;
  std::vector<std::string> warnings;
};

/// Shapes come from the file. When `requested` is given, a differing
/// architecture produces a warning rather than an error.
inline LoadedEstimator decode_estimator(std::span<const unsigned char> bytes,
                                        std::optional<EstimatorArchitecture> requested = std::nullopt) {
  auto ck = nn::decode_checkpoint(bytes);
  if (ck.header.value("model_kind", "") != "tap_estimator") throw Error("wrong_model_kind", "not a TAP estimator checkpoint");
  LoadedEstimator out;
  out.model.grid = ck.header.at("frame_grid").get<FrameGrid>();
  if (!(out.model.grid == FrameGrid{})) throw Error("grid_mismatch", "checkpoint frame grid does not match the analysis grid");
  if (ck.header.at("param_names").get<std::vector<std::string>>() !=
      std::vector<std::string>(param_names().begin(), param_names().end()))
    throw Error("grid_mismatch", "checkpoint parameter list does not match");
  const auto cfg = ck.header.at("hyperparameters").at("architecture").get<nn::SequenceConfig>();
  if (cfg.input_dim != kFeatureDim || cfg.output_dim != static_cast<Eigen::Index>(kNumParams))
    throw Error("grid_mismatch", "checkpoint input/output dimensions do not match");
  out.model.net = nn::SequenceModel(cfg);
  nn::load_params_into(out.model.net.params(), ck.params);
  out.model.stats = ck.header.at("tap_stats").get<TapStats>();
  if (requested) {
    const bool same = cfg.hidden.size() == requested->layers &&
                      std::all_of(cfg.hidden.begin(), cfg.hidden.end(), [&](Eigen::Index h) { return h == requested->hidden; });
    if (!same) {
      std::string shape;
      for (auto h : cfg.hidden) shape += (shape.empty() ? "" : "x") + std::to_string(h);
      out.warnings.push_back("checkpoint architecture (hidden " + shape + ") differs from requested hidden " +
                             std::to_string(requested->hidden) + " x " + std::to_string(requested->layers) +
                             "; using the checkpoint's shapes");
    }
  }
  return out;
}

inline LoadedEstimator load_estimator(const std::filesystem::path& path,
                                      std::optional<EstimatorArchitecture> requested = std::nullopt) {
  return decode_estimator(nn::read_bytes(path), requested);
}

}  // namespace taploss
