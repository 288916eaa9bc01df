#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "taploss/acoustic.hpp"
#include "taploss/common.hpp"
#include "taploss/estimator.hpp"
#include "taploss/neural.hpp"
#include "taploss/signal.hpp"

namespace taploss {

// ---------------------------------------------------------------------------
// TAPLoss and its waveform gradient
// ---------------------------------------------------------------------------

/// MAE between the estimator's prediction for `y_enh` and a standardized
/// reference matrix.
inline double tap_loss(const Waveform& y_enh, const AcousticMatrix& a_clean, const EstimatorModel& est) {
  const AcousticMatrix pred = predict(y_enh, est);
  if (pred.frames() != a_clean.frames()) throw Error("frame_mismatch", "clean and enhanced frame counts differ");
  return nn::mae_loss(pred.data, a_clean.data).loss;
}

struct WaveformGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// d tap_loss / d y_enh through MAE -> recurrent estimator -> signed-log
/// featurization -> STFT adjoint. Estimator parameters stay fixed.
inline WaveformGrad tap_loss_grad(const Waveform& y_enh, const AcousticMatrix& a_clean, const EstimatorModel& est) {
  require_grid(est);
  require_processable(y_enh);
  const ComplexSpectrogram spec = stft(y_enh);
  if (spec.frames() != a_clean.frames()) throw Error("frame_mismatch", "clean and enhanced frame counts differ");
  nn::SequenceModel::Cache cache;
  const Matrix pred = est.net.forward(featurize(spec), &cache);
  const auto mae = nn::mae_loss(pred, a_clean.data);
  nn::ParamStore scratch = est.net.params().zeros_like();
  const Matrix grad_features = est.net.backward(cache, mae.grad, scratch);
  WaveformGrad out;
  out.loss = mae.loss;
  out.grad = stft_adjoint(featurize_backward(spec, grad_features), y_enh.size());
  return out;
}

// ---------------------------------------------------------------------------
// Toy spectral-mask enhancer: GRU over log(1 + |S|) -> sigmoid mask,
// applied to the noisy STFT and resynthesized with the noisy phase.
// ---------------------------------------------------------------------------

struct EnhancerModel {
  nn::SequenceModel net;
};

inline EnhancerModel make_enhancer(std::vector<Eigen::Index> hidden, std::uint64_t seed) {
  const auto bins = static_cast<Eigen::Index>(kBins);
  return EnhancerModel{nn::SequenceModel::create(nn::SequenceConfig{bins, std::move(hidden), bins}, seed)};
}

struct EnhanceCache {
  ComplexSpectrogram noisy;
  nn::SequenceModel::Cache net;
  Matrix mask;
  std::size_t length = 0;
};

inline Matrix log_magnitude(const ComplexSpectrogram& s) {
  Matrix f(static_cast<Eigen::Index>(s.frames()), static_cast<Eigen::Index>(kBins));
  for (Eigen::Index t = 0; t < f.rows(); ++t)
    for (Eigen::Index k = 0; k < f.cols(); ++k) f(t, k) = std::log1p(std::abs(s.data(t, k)));
  return f;
}

inline Waveform enhance(const Waveform& y_noisy, const EnhancerModel& m, EnhanceCache* cache = nullptr) {
  require_processable(y_noisy);
  if (y_noisy.sample_rate_hz != kSampleRate) throw Error("rate_mismatch", "enhance expects 16 kHz input");
  EnhanceCache local;
  EnhanceCache& c = cache ? *cache : local;
  c.noisy = stft(y_noisy);
  c.length = y_noisy.size();
  const Matrix logits = m.net.forward(log_magnitude(c.noisy), cache ? &c.net : nullptr);
  c.mask = logits.unaryExpr([](double v) { return nn::sigmoid(v); });
  ComplexSpectrogram masked = c.noisy;
  masked.data.array() *= c.mask.array().cast<Complex>();
  return istft(masked, y_noisy.size());
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output waveform).
inline void enhance_backward(const EnhanceCache& c, const EnhancerModel& m, std::span<const double> grad_out,
                             nn::ParamStore& grads) {
  if (grad_out.size() != c.length) throw Error("shape_mismatch", "waveform gradient length mismatch");
  const ComplexSpectrogram g = istft_adjoint(grad_out, c.noisy.frames());
  Matrix grad_logits(c.mask.rows(), c.mask.cols());
  for (Eigen::Index t = 0; t < grad_logits.rows(); ++t)
    for (Eigen::Index k = 0; k < grad_logits.cols(); ++k) {
      const Complex s = c.noisy.data(t, k), gs = g.data(t, k);
      const double grad_mask = gs.real() * s.real() + gs.imag() * s.imag();
      const double mk = c.mask(t, k);
      grad_logits(t, k) = grad_mask * mk * (1.0 - mk);
    }
  m.net.backward(c.net, grad_logits, grads);
}

// ---------------------------------------------------------------------------
// Joint objective
// ---------------------------------------------------------------------------

enum class BaseLoss { kL1Waveform, kL2SpectralMagnitude };
enum class TapTarget { kEstimatorClean, kExtractorClean };

inline std::string to_string(BaseLoss b) {
  return b == BaseLoss::kL1Waveform ? "l1_waveform" : "l2_spectral_magnitude";
}

inline BaseLoss parse_base_loss(const std::string& s) {
  if (s == "l1_waveform") return BaseLoss::kL1Waveform;
  if (s == "l2_spectral_magnitude") return BaseLoss::kL2SpectralMagnitude;
  throw Error("invalid_config", "unknown base loss '" + s + "'");
}

inline std::string to_string(TapTarget t) { return t == TapTarget::kEstimatorClean ? "estimator" : "extractor"; }

inline TapTarget parse_tap_target(const std::string& s) {
  if (s == "estimator") return TapTarget::kEstimatorClean;
  if (s == "extractor") return TapTarget::kExtractorClean;
  throw Error("invalid_config", "unknown tap target '" + s + "'");
}

struct JointLossConfig {
  BaseLoss base_loss = BaseLoss::kL1Waveform;
  double lambda_tap = 1.0;
  std::string estimator_path;
  TapTarget tap_target = TapTarget::kEstimatorClean;

  void validate() const {
    if (!std::isfinite(lambda_tap) || lambda_tap < 0.0) throw Error("invalid_config", "lambda_tap must be finite and >= 0");
  }
};

/// Standardized TAP reference for a clean signal under the chosen target rule.
inline AcousticMatrix tap_reference(const Waveform& clean, const EstimatorModel& est, TapTarget target) {
  if (target == TapTarget::kEstimatorClean) return predict(clean, est);
  return standardize(extract_taps(clean), est.stats);
}

struct BaseLossResult {
  double loss = 0.0;
  std::vector<double> grad;
};

inline BaseLossResult base_loss(const Waveform& y_enh, const Waveform& y_clean, BaseLoss kind, bool want_grad = true) {
  if (y_enh.size() != y_clean.size()) throw Error("length_mismatch", "enhanced and clean lengths differ");
  if (y_enh.empty()) throw Error("empty_signal", "empty signal");
  BaseLossResult r;
  if (kind == BaseLoss::kL1Waveform) {
    const double inv = 1.0 / static_cast<double>(y_enh.size());
    if (want_grad) r.grad.resize(y_enh.size());
    for (std::size_t i = 0; i < y_enh.size(); ++i) {
      const double d = y_enh.samples[i] - y_clean.samples[i];
      r.loss += std::abs(d);
      if (want_grad) r.grad[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
    }
    r.loss *= inv;
    return r;
  }
  const ComplexSpectrogram se = stft(y_enh), sc = stft(y_clean);
  const double inv = 1.0 / static_cast<double>(se.data.size());
  ComplexSpectrogram g = zero_spectrogram(se.frames());
  for (Eigen::Index i = 0; i < se.data.size(); ++i) {
    const double me = std::abs(se.data.data()[i]);
    const double d = me - std::abs(sc.data.data()[i]);
    r.loss += d * d;
    if (want_grad && me > 0.0) g.data.data()[i] = (2.0 * d * inv / me) * se.data.data()[i];
  }
  r.loss *= inv;
  if (want_grad) r.grad = stft_adjoint(g, y_enh.size());
  return r;
}

struct JointLoss {
  double total = 0.0;
  double base = 0.0;
  double tap = 0.0;
  std::vector<double> grad;  // d total / d y_enh, when requested
};

/// L = L_base + lambda * L_tap.
inline JointLoss joint_loss(const Waveform& y_enh, const Waveform& y_clean, const AcousticMatrix& a_clean,
                            const JointLossConfig& cfg, const EstimatorModel& est, bool want_grad = false) {
  cfg.validate();
  if (y_enh.size() != y_clean.size()) throw Error("length_mismatch", "enhanced and clean lengths differ");
  JointLoss out;
  auto b = base_loss(y_enh, y_clean, cfg.base_loss, want_grad);
  out.base = b.loss;
  if (want_grad && cfg.lambda_tap > 0.0) {
    auto t = tap_loss_grad(y_enh, a_clean, est);
    out.tap = t.loss;
    for (std::size_t i = 0; i < b.grad.size(); ++i) b.grad[i] += cfg.lambda_tap * t.grad[i];
  } else {
    out.tap = tap_loss(y_enh, a_clean, est);
  }
  out.total = out.base + cfg.lambda_tap * out.tap;
  if (want_grad) out.grad = std::move(b.grad);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct NoisyCleanPair {
  Waveform noisy;
  Waveform clean;
};

struct EnhancerHistoryRow {
  int epoch = 0;
  std::string split;  // "train" or "validation"
  double l_base = 0.0;
  double l_tap = 0.0;
  double l_total = 0.0;
};

inline std::string history_csv(std::span<const EnhancerHistoryRow> rows) {
  std::string out = "epoch,split,l_base,l_tap,l_total\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g\n", r.epoch, r.split.c_str(), r.l_base, r.l_tap, r.l_total);
    out += buf;
  }
  return out;
}

struct EnhancerTraining {
  EnhancerModel model;  // final-epoch parameters
  std::vector<EnhancerHistoryRow> history;
  Split split;
};

/// Parameter gradient of the joint loss for one pair; returns the loss terms.
inline JointLoss enhancer_pair_gradient(const EnhancerModel& m, const NoisyCleanPair& pair, const AcousticMatrix& a_clean,
                                        const JointLossConfig& cfg, const EstimatorModel& est, nn::ParamStore& grads,
                                        double weight = 1.0) {
  EnhanceCache cache;
  const Waveform y = enhance(pair.noisy, m, &cache);
  JointLoss jl = joint_loss(y, pair.clean, a_clean, cfg, est, true);
  for (double& g : jl.grad) g *= weight;
  enhance_backward(cache, m, jl.grad, grads);
  return jl;
}

inline EnhancerTraining train_enhancer(std::span<const NoisyCleanPair> pairs, const JointLossConfig& jcfg,
                                       const TrainConfig& cfg, const EstimatorModel& est,
                                       std::vector<Eigen::Index> hidden = {64}, const ProgressFn& progress = {}) {
  cfg.validate();
  jcfg.validate();
  if (pairs.empty()) throw Error("empty_corpus", "empty pairs");
  for (const auto& p : pairs)
    if (p.noisy.size() != p.clean.size()) throw Error("length_mismatch", "pairs must be aligned sample-for-sample");

  EnhancerTraining out;
  out.split = split_indices(pairs.size(), cfg.validation_fraction, derive_seed(cfg.seed, 11));
  out.model = make_enhancer(std::move(hidden), derive_seed(cfg.seed, 12));
  std::vector<AcousticMatrix> refs(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) refs[i] = tap_reference(pairs[i].clean, est, jcfg.tap_target);

  const auto evaluate = [&](const std::vector<std::size_t>& idx, int epoch, const char* split) {
    EnhancerHistoryRow row{epoch, split, 0.0, 0.0, 0.0};
    for (std::size_t i : idx) {
      const Waveform y = enhance(pairs[i].noisy, out.model);
      const JointLoss jl = joint_loss(y, pairs[i].clean, refs[i], jcfg, est, false);
      row.l_base += jl.base;
      row.l_tap += jl.tap;
      row.l_total += jl.total;
    }
    const double n = static_cast<double>(idx.size());
    row.l_base /= n;
    row.l_tap /= n;
    row.l_total /= n;
    if (!std::isfinite(row.l_total)) throw Error("non_finite_loss", "non-finite loss during enhancer training");
    out.history.push_back(row);
  };

  evaluate(out.split.train, 0, "train");
  evaluate(out.split.validation, 0, "validation");

  nn::AdamState adam = nn::AdamState::for_params(out.model.net.params(), cfg.lr);
  nn::ParamStore grads = out.model.net.params().zeros_like();
  Rng order_rng(derive_seed(cfg.seed, 13));
  std::vector<std::size_t> order = out.split.train;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[uniform_index(order_rng, i + 1)]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      grads.set_zero();
      for (std::size_t b = start; b < stop; ++b) {
        const JointLoss jl = enhancer_pair_gradient(out.model, pairs[order[b]], refs[order[b]], jcfg, est, grads,
                                                    1.0 / static_cast<double>(stop - start));
        if (!std::isfinite(jl.total)) throw Error("non_finite_loss", "non-finite loss during enhancer training");
      }
      nn::clip_global_norm(grads, cfg.clip_norm);
      nn::adam_step(out.model.net.params(), grads, adam);
    }
    evaluate(out.split.train, epoch, "train");
    evaluate(out.split.validation, epoch, "validation");
    if (progress) {
      const auto& v = out.history.back();
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %d val l_base %.6f l_tap %.6f l_total %.6f", epoch, v.l_base, v.l_tap,
                    v.l_total);
      progress(buf);
    }
  }
  return out;
}

inline std::vector<unsigned char> encode_enhancer(const EnhancerModel& m, nlohmann::json hyper = nlohmann::json::object(),
                                                  std::uint64_t seed = 0) {
  hyper["architecture"] = m.net.config();
  return nn::encode_checkpoint("enhancer", m.net.params(), hyper, seed, {{"frame_grid", FrameGrid{}}});
}

inline void save_enhancer(const EnhancerModel& m, const std::filesystem::path& path,
                          nlohmann::json hyper = nlohmann::json::object(), std::uint64_t seed = 0) {
  nn::write_bytes(path, encode_enhancer(m, std::move(hyper), seed));
}

inline EnhancerModel decode_enhancer(std::span<const unsigned char> bytes) {
  auto ck = nn::decode_checkpoint(bytes);
  if (ck.header.value("model_kind", "") != "enhancer") throw Error("wrong_model_kind", "not an enhancer checkpoint");
  if (!(ck.header.at("frame_grid").get<FrameGrid>() == FrameGrid{}))
    throw Error("grid_mismatch", "checkpoint frame grid does not match the analysis grid");
  const auto cfg = ck.header.at("hyperparameters").at("architecture").get<nn::SequenceConfig>();
  if (cfg.input_dim != static_cast<Eigen::Index>(kBins) || cfg.output_dim != static_cast<Eigen::Index>(kBins))
    throw Error("grid_mismatch", "enhancer dimensions do not match the analysis grid");
  EnhancerModel m{nn::SequenceModel(cfg)};
  nn::load_params_into(m.net.params(), ck.params);
  return m;
}

inline EnhancerModel load_enhancer(const std::filesystem::path& path) { return decode_enhancer(nn::read_bytes(path)); }

}  // namespace taploss
