#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "taploss/enhancer.hpp"
#include "taploss/neural.hpp"
#include "taploss/synthetic.hpp"

namespace taploss {

// Finite-difference checks of every hand-written backward pass on small
// fixture models. Module-level checks use tolerance 1e-4; the two chains that
// pass through the STFT and the estimator use 1e-3.

inline constexpr double kModuleTolerance = 1e-4;
inline constexpr double kChainTolerance = 1e-3;

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> s = {"dense", "gru", "sequence", "mae", "taploss", "enhancer"};
  return s;
}

namespace detail {

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * gaussian(rng);
  return m;
}

inline std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<const double> cspan_of(const Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> cspan_of(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// L = sum(C .* y) + 0.5 |y|^2, so dL/dy = C + y.
inline double quad_loss(const Vector& y, const Vector& c) { return c.dot(y) + 0.5 * y.squaredNorm(); }

inline GradCheckResult finish(std::string name, const nn::GradCheckReport& r, double tol) {
  return {std::move(name), r.max_rel_err, tol, r.checked, r.passed};
}

inline GradCheckResult check_dense(std::uint64_t seed) {
  Rng rng(seed);
  Matrix w = random_matrix(4, 6, rng), b = random_matrix(4, 1, rng);
  Vector x = random_matrix(6, 1, rng).col(0), c = random_matrix(4, 1, rng).col(0);
  const Vector y = nn::dense_forward(x, w, b);
  auto g = nn::dense_backward(c + y, x, w);
  const auto loss = [&] { return quad_loss(nn::dense_forward(x, w, b), c); };
  const double h = 1e-6;
  auto r = nn::check_gradient(span_of(w), cspan_of(g.grad_w), loss, h, kModuleTolerance);
  r = nn::merge_reports(r, nn::check_gradient(span_of(b), cspan_of(g.grad_b), loss, h, kModuleTolerance));
  r = nn::merge_reports(r, nn::check_gradient(span_of(x), cspan_of(g.grad_x), loss, h, kModuleTolerance));
  return finish("dense", r, kModuleTolerance);
}

inline GradCheckResult check_gru(std::uint64_t seed) {
  Rng rng(seed);
  const Eigen::Index d = 5, hd = 4;
  Matrix wx = random_matrix(3 * hd, d, rng, 0.5), wh = random_matrix(3 * hd, hd, rng, 0.5);
  Matrix bx = random_matrix(3 * hd, 1, rng, 0.5), bh = random_matrix(3 * hd, 1, rng, 0.5);
  Vector x = random_matrix(d, 1, rng).col(0), hp = random_matrix(hd, 1, rng, 0.5).col(0);
  const Vector c = random_matrix(hd, 1, rng).col(0);
  nn::GruCellCache cache;
  const Vector out = nn::gru_cell_forward(x, hp, nn::GruWeights{wx, wh, bx, bh}, &cache);
  const auto g = nn::gru_cell_backward(c + out, cache, nn::GruWeights{wx, wh, bx, bh});
  const auto loss = [&] { return quad_loss(nn::gru_cell_forward(x, hp, nn::GruWeights{wx, wh, bx, bh}), c); };
  const double h = 1e-6;
  auto r = nn::check_gradient(span_of(wx), cspan_of(g.grad_w_x), loss, h, kModuleTolerance);
  r = nn::merge_reports(r, nn::check_gradient(span_of(wh), cspan_of(g.grad_w_h), loss, h, kModuleTolerance));
  r = nn::merge_reports(r, nn::check_gradient(span_of(bx), cspan_of(g.grad_b_x), loss, h, kModuleTolerance));
  r = nn::merge_reports(r, nn::check_gradient(span_of(bh), cspan_of(g.grad_b_h), loss, h, kModuleTolerance));
  r = nn::merge_reports(r, nn::check_gradient(span_of(x), cspan_of(g.grad_x), loss, h, kModuleTolerance));
  r = nn::merge_reports(r, nn::check_gradient(span_of(hp), cspan_of(g.grad_h_prev), loss, h, kModuleTolerance));
  return finish("gru", r, kModuleTolerance);
}

inline GradCheckResult check_sequence(std::uint64_t seed) {
  Rng rng(seed);
  auto model = nn::SequenceModel::create({6, {5, 4}, 3}, derive_seed(seed, 1));
  const Matrix x = random_matrix(8, 6, rng);
  const Matrix c = random_matrix(8, 3, rng);
  const nn::SequenceLoss loss = [&](const Matrix& y) {
    return nn::LossAndGrad{(c.array() * y.array()).sum() + 0.5 * y.squaredNorm(), c + y};
  };
  const auto rep = nn::grad_check(model, x, loss, 1e-6, kModuleTolerance);
  return finish("sequence", nn::merge_reports(rep.params, rep.input), kModuleTolerance);
}

inline GradCheckResult check_mae(std::uint64_t seed) {
  Rng rng(seed);
  Matrix pred = random_matrix(7, static_cast<Eigen::Index>(kNumParams), rng);
  Matrix target = pred;
  // Keep every residual at least 0.1 away from the kink at zero.
  for (Eigen::Index i = 0; i < target.size(); ++i)
    target.data()[i] += (uniform01(rng) < 0.5 ? -1.0 : 1.0) * (0.1 + uniform01(rng));
  const auto g = nn::mae_loss(pred, target);
  const auto rep = nn::check_gradient(span_of(pred), cspan_of(g.grad), [&] { return nn::mae_loss(pred, target).loss; },
                                      1e-6, kModuleTolerance);
  return finish("mae", rep, kModuleTolerance);
}

inline EstimatorModel fixture_estimator(std::uint64_t seed) {
  auto m = make_estimator(8, 1, seed);
  for (Eigen::Index p = 0; p < static_cast<Eigen::Index>(kNumParams); ++p) {
    m.stats.mean[p] = 0.1 * static_cast<double>(p);
    m.stats.std[p] = 1.0 + 0.5 * static_cast<double>(p);
  }
  return m;
}

// d TAPLoss / d waveform through estimator, featurization and STFT.
inline GradCheckResult check_taploss(std::uint64_t seed) {
  const auto est = fixture_estimator(derive_seed(seed, 1));
  Waveform y = synth::speech_like(0.25, derive_seed(seed, 2));
  Rng rng(derive_seed(seed, 3));
  AcousticMatrix target = predict(y, est);
  for (Eigen::Index i = 0; i < target.data.size(); ++i) target.data.data()[i] += 0.5 * gaussian(rng);
  const auto g = tap_loss_grad(y, target, est);
  const auto rep = nn::check_gradient(y.samples, g.grad, [&] { return tap_loss(y, target, est); }, 1e-6, kChainTolerance);
  return finish("taploss", rep, kChainTolerance);
}

// Enhancer parameters through mask, ISTFT, base loss and TAPLoss.
inline GradCheckResult check_enhancer(std::uint64_t seed) {
  const auto est = fixture_estimator(derive_seed(seed, 4));
  const auto clean = synth::sine(330.0, 0.3, 0.25);
  const auto noisy = mix_at_snr(clean, synth::noise(synth::NoiseKind::kWhite, 0.25, derive_seed(seed, 5)), 5.0,
                                derive_seed(seed, 5))
                         .noisy;
  const NoisyCleanPair pair{noisy, clean};
  nn::GradCheckReport all;
  bool first = true;
  for (auto kind : {BaseLoss::kL2SpectralMagnitude, BaseLoss::kL1Waveform}) {
    auto m = make_enhancer({4}, derive_seed(seed, 6));
    JointLossConfig cfg;
    cfg.base_loss = kind;
    cfg.lambda_tap = 1.0;
    const auto a_clean = tap_reference(clean, est, TapTarget::kExtractorClean);
    nn::ParamStore grads = m.net.params().zeros_like();
    enhancer_pair_gradient(m, pair, a_clean, cfg, est, grads);
    const auto eval = [&] { return joint_loss(enhance(noisy, m), clean, a_clean, cfg, est).total; };
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const auto rep = nn::check_gradient(span_of(m.net.params()[i]), cspan_of(grads[i]), eval, 1e-4, kChainTolerance);
      all = first ? rep : nn::merge_reports(all, rep);
      first = false;
    }
  }
  return finish("enhancer", all, kChainTolerance);
}

}  // namespace detail

/// scope: one of gradcheck_scopes() or "all".
inline std::vector<GradCheckResult> run_gradcheck(const std::string& scope, std::uint64_t seed = 0) {
  static const std::map<std::string, std::function<GradCheckResult(std::uint64_t)>> checks = {
      {"dense", detail::check_dense},       {"gru", detail::check_gru},
      {"sequence", detail::check_sequence}, {"mae", detail::check_mae},
      {"taploss", detail::check_taploss},   {"enhancer", detail::check_enhancer}};
  std::vector<GradCheckResult> out;
  if (scope == "all") {
    for (const auto& name : gradcheck_scopes()) out.push_back(checks.at(name)(seed));
    return out;
  }
  const auto it = checks.find(scope);
  if (it == checks.end()) throw Error("invalid_argument", "unknown gradcheck scope '" + scope + "'");
  out.push_back(it->second(seed));
  return out;
}

}  // namespace taploss
