#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>
#include <nlohmann/json.hpp>

#include "taploss/common.hpp"

namespace taploss::nn {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Named matrices in insertion order. Shapes are fixed when added.
class ParamStore {
 public:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (find(name)) throw Error("duplicate_param", "parameter '" + name + "' already exists");
    names_.push_back(std::move(name));
    values_.push_back(Matrix::Zero(rows, cols));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  Matrix& operator[](std::size_t i) { return values_[i]; }
  const Matrix& operator[](std::size_t i) const { return values_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    return std::nullopt;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  ParamStore zeros_like() const {
    ParamStore z;
    z.names_ = names_;
    for (const auto& v : values_) z.values_.push_back(Matrix::Zero(v.rows(), v.cols()));
    return z;
  }

  void set_zero() {
    for (auto& v : values_) v.setZero();
  }

  bool same_shapes(const ParamStore& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (o[i].rows() != values_[i].rows() || o[i].cols() != values_[i].cols()) return false;
    return true;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](const Matrix& m) { return m.allFinite(); });
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& v : values_) s += v.squaredNorm();
    return s;
  }

  void add_scaled(const ParamStore& o, double scale) {
    for (std::size_t i = 0; i < size(); ++i) values_[i] += scale * o[i];
  }

  bool operator==(const ParamStore& o) const {
    if (names_ != o.names_ || !same_shapes(o)) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (values_[i] != o[i]) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

inline void init_uniform(Matrix& m, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -bound, bound);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vector sigmoid(const Vector& x) {
  return x.unaryExpr([](double v) { return sigmoid(v); });
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

inline Vector dense_forward(const Vector& x, const Matrix& w, const Matrix& b) {
  if (w.cols() != x.size() || b.rows() != w.rows() || b.cols() != 1)
    throw Error("shape_mismatch", "dense: shape mismatch");
  return w * x + b.col(0);
}

struct DenseGrads {
  Vector grad_x;
  Matrix grad_w;
  Matrix grad_b;
};

inline DenseGrads dense_backward(const Vector& grad_out, const Vector& x, const Matrix& w) {
  if (grad_out.size() != w.rows() || x.size() != w.cols()) throw Error("shape_mismatch", "dense: shape mismatch");
  DenseGrads g;
  g.grad_x = w.transpose() * grad_out;
  g.grad_w = grad_out * x.transpose();
  g.grad_b = grad_out;
  return g;
}

// ---------------------------------------------------------------------------
// GRU cell. Gate rows are stacked [reset; update; candidate]:
//   r = s(Wx_r x + bx_r + Wh_r h + bh_r)
//   z = s(Wx_z x + bx_z + Wh_z h + bh_z)
//   n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))
//   h' = (1 - z) * n + z * h
// ---------------------------------------------------------------------------

struct GruWeights {
  const Matrix& w_x;  // 3H x D
  const Matrix& w_h;  // 3H x H
  const Matrix& b_x;  // 3H x 1
  const Matrix& b_h;  // 3H x 1

  Eigen::Index hidden() const { return w_h.cols(); }

  void check(Eigen::Index in_dim) const {
    const Eigen::Index h = hidden();
    if (w_h.rows() != 3 * h || w_x.rows() != 3 * h || w_x.cols() != in_dim || b_x.rows() != 3 * h ||
        b_h.rows() != 3 * h || b_x.cols() != 1 || b_h.cols() != 1)
      throw Error("shape_mismatch", "gru: shape mismatch");
  }
};

struct GruCellCache {
  Vector x, h_prev, r, z, n, hn;
};

inline Vector gru_cell_forward(const Vector& x, const Vector& h_prev, const GruWeights& p, GruCellCache* cache = nullptr) {
  p.check(x.size());
  const Eigen::Index h = p.hidden();
  if (h_prev.size() != h) throw Error("shape_mismatch", "gru: hidden state size mismatch");
  const Vector xp = p.w_x * x + p.b_x.col(0);
  const Vector hp = p.w_h * h_prev + p.b_h.col(0);
  const Vector r = sigmoid(Vector(xp.segment(0, h) + hp.segment(0, h)));
  const Vector z = sigmoid(Vector(xp.segment(h, h) + hp.segment(h, h)));
  const Vector hn = hp.segment(2 * h, h);
  const Vector n = (xp.segment(2 * h, h) + r.cwiseProduct(hn)).array().tanh().matrix();
  Vector out = (Vector::Ones(h) - z).cwiseProduct(n) + z.cwiseProduct(h_prev);
  if (cache) *cache = GruCellCache{x, h_prev, r, z, n, hn};
  return out;
}

struct GruCellGrads {
  Vector grad_x, grad_h_prev;
  Matrix grad_w_x, grad_w_h, grad_b_x, grad_b_h;
};

inline GruCellGrads gru_cell_backward(const Vector& grad_h, const GruCellCache& c, const GruWeights& p) {
  const Eigen::Index h = p.hidden();
  if (grad_h.size() != h) throw Error("shape_mismatch", "gru: gradient size mismatch");
  const Vector dn = grad_h.cwiseProduct(Vector::Ones(h) - c.z);
  const Vector dz = grad_h.cwiseProduct(c.h_prev - c.n);
  const Vector dn_pre = dn.cwiseProduct(Vector::Ones(h) - c.n.cwiseAbs2());
  const Vector dr = dn_pre.cwiseProduct(c.hn);
  const Vector dz_pre = dz.cwiseProduct(c.z.cwiseProduct(Vector::Ones(h) - c.z));
  const Vector dr_pre = dr.cwiseProduct(c.r.cwiseProduct(Vector::Ones(h) - c.r));

  Vector dxp(3 * h), dhp(3 * h);
  dxp << dr_pre, dz_pre, dn_pre;
  dhp << dr_pre, dz_pre, dn_pre.cwiseProduct(c.r);

  GruCellGrads g;
  g.grad_x = p.w_x.transpose() * dxp;
  g.grad_h_prev = grad_h.cwiseProduct(c.z) + p.w_h.transpose() * dhp;
  g.grad_w_x = dxp * c.x.transpose();
  g.grad_w_h = dhp * c.h_prev.transpose();
  g.grad_b_x = dxp;
  g.grad_b_h = dhp;
  return g;
}

// ---------------------------------------------------------------------------
// Sequence model: stacked GRU layers + per-frame dense head.
// ---------------------------------------------------------------------------

struct SequenceConfig {
  Eigen::Index input_dim = 0;
  std::vector<Eigen::Index> hidden;
  Eigen::Index output_dim = 0;

  bool operator==(const SequenceConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const SequenceConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim}, {"hidden", c.hidden}, {"output_dim", c.output_dim}};
}

inline void from_json(const nlohmann::json& j, SequenceConfig& c) {
  c.input_dim = j.at("input_dim").get<Eigen::Index>();
  c.hidden = j.at("hidden").get<std::vector<Eigen::Index>>();
  c.output_dim = j.at("output_dim").get<Eigen::Index>();
}

using HiddenState = std::vector<Vector>;  // one vector per GRU layer

class SequenceModel {
 public:
  struct LayerCache {
    Matrix input;    // T x D_in
    Matrix h;        // T x H (outputs)
    Matrix r, z, n, hn;
    Vector h0;
  };
  struct Cache {
    std::vector<LayerCache> layers;
    Matrix top;  // T x H_last (head input)
  };

  SequenceModel() = default;

  explicit SequenceModel(SequenceConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.input_dim <= 0 || cfg_.output_dim <= 0) throw Error("invalid_argument", "model dims must be positive");
    Eigen::Index in = cfg_.input_dim;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      const Eigen::Index h = cfg_.hidden[l];
      if (h <= 0) throw Error("invalid_argument", "hidden sizes must be positive");
      const std::string pre = "gru" + std::to_string(l) + ".";
      LayerIdx idx{params_.add(pre + "w_x", 3 * h, in), params_.add(pre + "w_h", 3 * h, h),
                   params_.add(pre + "b_x", 3 * h, 1), params_.add(pre + "b_h", 3 * h, 1)};
      layers_.push_back(idx);
      in = h;
    }
    head_w_ = params_.add("head.w", cfg_.output_dim, in);
    head_b_ = params_.add("head.b", cfg_.output_dim, 1);
  }

  /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases use their layer's fan-in.
  static SequenceModel create(const SequenceConfig& cfg, std::uint64_t seed) {
    SequenceModel m(cfg);
    Rng rng(seed);
    Eigen::Index in = cfg.input_dim;
    for (std::size_t l = 0; l < m.layers_.size(); ++l) {
      const Eigen::Index h = cfg.hidden[l];
      init_uniform(m.params_[m.layers_[l].w_x], 1.0 / std::sqrt(static_cast<double>(in)), rng);
      init_uniform(m.params_[m.layers_[l].w_h], 1.0 / std::sqrt(static_cast<double>(h)), rng);
      init_uniform(m.params_[m.layers_[l].b_x], 1.0 / std::sqrt(static_cast<double>(in)), rng);
      init_uniform(m.params_[m.layers_[l].b_h], 1.0 / std::sqrt(static_cast<double>(h)), rng);
      in = h;
    }
    init_uniform(m.params_[m.head_w_], 1.0 / std::sqrt(static_cast<double>(in)), rng);
    init_uniform(m.params_[m.head_b_], 1.0 / std::sqrt(static_cast<double>(in)), rng);
    return m;
  }

  const SequenceConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  GruWeights layer(std::size_t l) const {
    const auto& i = layers_.at(l);
    return GruWeights{params_[i.w_x], params_[i.w_h], params_[i.b_x], params_[i.b_h]};
  }
  std::size_t num_layers() const { return layers_.size(); }
  const Matrix& head_w() const { return params_[head_w_]; }
  const Matrix& head_b() const { return params_[head_b_]; }
  std::size_t head_w_index() const { return head_w_; }
  std::size_t head_b_index() const { return head_b_; }

  HiddenState zero_state() const {
    HiddenState s;
    for (auto h : cfg_.hidden) s.push_back(Vector::Zero(h));
    return s;
  }

  /// T x D -> T x P. `h0` (optional) seeds each layer; `h_last` receives the
  /// final hidden states for truncated BPTT carry-over.
  Matrix forward(const Matrix& x, Cache* cache = nullptr, const HiddenState* h0 = nullptr,
                 HiddenState* h_last = nullptr) const {
    if (x.cols() != cfg_.input_dim) throw Error("shape_mismatch", "sequence input width mismatch");
    if (x.rows() < 1) throw Error("shape_mismatch", "sequence must have at least one frame");
    const Eigen::Index steps = x.rows();
    if (cache) cache->layers.assign(layers_.size(), {});
    if (h_last) h_last->clear();
    Matrix cur = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const GruWeights p = layer(l);
      const Eigen::Index h = p.hidden();
      const Matrix xp = (cur * p.w_x.transpose()).rowwise() + p.b_x.col(0).transpose();
      Vector state = h0 ? h0->at(l) : Vector::Zero(h);
      if (state.size() != h) throw Error("shape_mismatch", "initial state size mismatch");
      Matrix out(steps, h);
      LayerCache* lc = cache ? &cache->layers[l] : nullptr;
      if (lc) {
        lc->h0 = state;
        lc->r.resize(steps, h);
        lc->z.resize(steps, h);
        lc->n.resize(steps, h);
        lc->hn.resize(steps, h);
      }
      for (Eigen::Index t = 0; t < steps; ++t) {
        const Vector hp = p.w_h * state + p.b_h.col(0);
        const auto xr = xp.row(t);
        Vector r(h), z(h), n(h);
        for (Eigen::Index i = 0; i < h; ++i) {
          r[i] = sigmoid(xr[i] + hp[i]);
          z[i] = sigmoid(xr[h + i] + hp[h + i]);
          n[i] = std::tanh(xr[2 * h + i] + r[i] * hp[2 * h + i]);
        }
        state = (Vector::Ones(h) - z).cwiseProduct(n) + z.cwiseProduct(state);
        out.row(t) = state.transpose();
        if (lc) {
          lc->r.row(t) = r.transpose();
          lc->z.row(t) = z.transpose();
          lc->n.row(t) = n.transpose();
          lc->hn.row(t) = hp.segment(2 * h, h).transpose();
        }
      }
      if (lc) {
        lc->input = std::move(cur);
        lc->h = out;
      }
      if (h_last) h_last->push_back(state);
      cur = std::move(out);
    }
    Matrix y = (cur * head_w().transpose()).rowwise() + head_b().col(0).transpose();
    if (cache) cache->top = std::move(cur);
    return y;
  }

  /// Accumulates parameter gradients into `grads` (shaped like params())
  /// and returns the gradient with respect to the input sequence.
  Matrix backward(const Cache& cache, const Matrix& grad_y, ParamStore& grads) const {
    if (!grads.same_shapes(params_)) throw Error("shape_mismatch", "gradient store shape mismatch");
    if (grad_y.cols() != cfg_.output_dim || grad_y.rows() != cache.top.rows())
      throw Error("shape_mismatch", "output gradient shape mismatch");
    const Eigen::Index steps = grad_y.rows();
    grads[head_w_] += grad_y.transpose() * cache.top;
    grads[head_b_] += grad_y.colwise().sum().transpose();
    Matrix grad_h = grad_y * head_w();

    for (std::size_t li = layers_.size(); li-- > 0;) {
      const GruWeights p = layer(li);
      const LayerCache& lc = cache.layers[li];
      const Eigen::Index h = p.hidden();
      Matrix dxp(steps, 3 * h);
      Vector carry = Vector::Zero(h);
      Matrix& gwh = grads[layers_[li].w_h];
      Matrix& gbh = grads[layers_[li].b_h];
      Vector dhp(3 * h);
      for (Eigen::Index t = steps; t-- > 0;) {
        const Vector dh = grad_h.row(t).transpose() + carry;
        const Vector h_prev = t > 0 ? Vector(lc.h.row(t - 1).transpose()) : lc.h0;
        for (Eigen::Index i = 0; i < h; ++i) {
          const double z = lc.z(t, i), r = lc.r(t, i), n = lc.n(t, i);
          const double dn_pre = dh[i] * (1.0 - z) * (1.0 - n * n);
          const double dz_pre = dh[i] * (h_prev[i] - n) * z * (1.0 - z);
          const double dr_pre = dn_pre * lc.hn(t, i) * r * (1.0 - r);
          dxp(t, i) = dr_pre;
          dxp(t, h + i) = dz_pre;
          dxp(t, 2 * h + i) = dn_pre;
          dhp[i] = dr_pre;
          dhp[h + i] = dz_pre;
          dhp[2 * h + i] = dn_pre * r;
        }
        carry = dh.cwiseProduct(lc.z.row(t).transpose()) + p.w_h.transpose() * dhp;
        gwh.noalias() += dhp * h_prev.transpose();
        gbh.col(0) += dhp;
      }
      grads[layers_[li].w_x].noalias() += dxp.transpose() * lc.input;
      grads[layers_[li].b_x] += dxp.colwise().sum().transpose();
      grad_h = dxp * p.w_x;
    }
    return grad_h;
  }

 private:
  struct LayerIdx {
    std::size_t w_x, w_h, b_x, b_h;
  };
  SequenceConfig cfg_;
  ParamStore params_;
  std::vector<LayerIdx> layers_;
  std::size_t head_w_ = 0, head_b_ = 0;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

/// (1/TP) sum |pred - target|; gradient entries sign(diff)/(TP), sign(0) = 0.
inline LossAndGrad mae_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw Error("shape_mismatch", "mae: shape mismatch");
  if (pred.size() == 0) throw Error("shape_mismatch", "mae: empty operands");
  const double inv = 1.0 / static_cast<double>(pred.size());
  LossAndGrad out;
  out.grad.resize(pred.rows(), pred.cols());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    acc += std::abs(d);
    out.grad.data()[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  out.loss = acc * inv;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  ParamStore m, v;

  static AdamState for_params(const ParamStore& p, double lr) {
    AdamState s;
    s.lr = lr;
    s.m = p.zeros_like();
    s.v = p.zeros_like();
    return s;
  }
};

inline void adam_step(ParamStore& params, const ParamStore& grads, AdamState& s) {
  if (!params.same_shapes(grads) || !params.same_shapes(s.m) || !params.same_shapes(s.v))
    throw Error("shape_mismatch", "adam: shape mismatch");
  if (!grads.all_finite()) throw Error("non_finite_gradient", "adam: non-finite gradient");
  s.t += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i].cwiseAbs2();
    if (s.lr == 0.0) continue;
    const auto m_hat = s.m[i].array() / c1;
    const auto v_hat = s.v[i].array() / c2;
    params[i].array() -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
  }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(ParamStore& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

/// Relative error with an absolute floor so entries whose true gradient is
/// zero are compared absolutely.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline constexpr double kGradCheckFloor = 1e-6;

/// Central differences over every element of `values`. `loss` must read the
/// current contents of `values`; they are restored afterwards.
inline GradCheckReport check_gradient(std::span<double> values, std::span<const double> analytic,
                                      const std::function<double()>& loss, double h, double tol,
                                      double floor = kGradCheckFloor) {
  if (values.size() != analytic.size()) throw Error("shape_mismatch", "grad check: size mismatch");
  GradCheckReport rep;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = loss();
    values[i] = orig - h;
    const double down = loss();
    values[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double err = relative_error(analytic[i], numeric, floor);
    ++rep.checked;
    if (err > rep.max_rel_err || !std::isfinite(err)) {
      rep.max_rel_err = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
      rep.worst_index = i;
      rep.worst_analytic = analytic[i];
      rep.worst_numeric = numeric;
    }
  }
  rep.passed = rep.max_rel_err < tol;
  return rep;
}

inline GradCheckReport merge_reports(const GradCheckReport& a, const GradCheckReport& b) {
  GradCheckReport r = a.max_rel_err >= b.max_rel_err ? a : b;
  r.checked = a.checked + b.checked;
  r.passed = a.passed && b.passed;
  return r;
}

/// Loss on a sequence output: returns the scalar and dL/dY.
using SequenceLoss = std::function<LossAndGrad(const Matrix&)>;

struct SequenceGradCheck {
  GradCheckReport params;
  GradCheckReport input;
  bool passed() const { return params.passed && input.passed; }
};

/// Checks every parameter and every input element of `model` under `loss`.
inline SequenceGradCheck grad_check(SequenceModel& model, Matrix input, const SequenceLoss& loss, double h, double tol) {
  SequenceModel::Cache cache;
  const Matrix y = model.forward(input, &cache);
  ParamStore grads = model.params().zeros_like();
  const Matrix grad_x = model.backward(cache, loss(y).grad, grads);
  const auto eval = [&] { return loss(model.forward(input)).loss; };

  SequenceGradCheck out;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Matrix& p = model.params()[i];
    const auto rep = check_gradient({p.data(), static_cast<std::size_t>(p.size())},
                                    {grads[i].data(), static_cast<std::size_t>(grads[i].size())}, eval, h, tol);
    out.params = i == 0 ? rep : merge_reports(out.params, rep);
  }
  out.input = check_gradient({input.data(), static_cast<std::size_t>(input.size())},
                             {grad_x.data(), static_cast<std::size_t>(grad_x.size())}, eval, h, tol);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: one-line JSON header, little-endian float64 arrays in header
// order, CRC32 trailer over everything before it.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header;
  ParamStore params;
};

inline std::vector<unsigned char> encode_checkpoint(const std::string& model_kind, const ParamStore& params,
                                                    nlohmann::json hyperparameters, std::uint64_t rng_seed,
                                                    nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json hdr = extra;
  hdr["format_version"] = kCheckpointVersion;
  hdr["model_kind"] = model_kind;
  hdr["hyperparameters"] = std::move(hyperparameters);
  hdr["rng_seed"] = rng_seed;
  hdr["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i)
    hdr["params"].push_back({{"name", params.name(i)}, {"shape", {params[i].rows(), params[i].cols()}}});
  const std::string line = hdr.dump() + "\n";
  std::vector<unsigned char> out(line.begin(), line.end());
  out.reserve(out.size() + params.total_size() * 8 + 4);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (Eigen::Index k = 0; k < params[i].size(); ++k) {
      std::uint64_t bits;
      const double v = params[i].data()[k];
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFF));
    }
  const auto crc = static_cast<std::uint32_t>(::crc32(0L, out.data(), static_cast<uInt>(out.size())));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((crc >> (8 * b)) & 0xFF));
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 5) throw Error("corrupt_checkpoint", "checkpoint too short");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int b = 0; b < 4; ++b) stored |= static_cast<std::uint32_t>(bytes[body + static_cast<std::size_t>(b)]) << (8 * b);
  const auto crc = static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(body)));
  if (crc != stored) throw Error("crc_mismatch", "checkpoint CRC mismatch");
  const auto nl = std::find(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body), '\n');
  if (nl == bytes.begin() + static_cast<std::ptrdiff_t>(body)) throw Error("corrupt_checkpoint", "missing checkpoint header");
  Checkpoint ck;
  ck.header = nlohmann::json::parse(std::string(bytes.begin(), nl), nullptr, false);
  if (ck.header.is_discarded()) throw Error("corrupt_checkpoint", "unparseable checkpoint header");
  if (ck.header.value("format_version", -1) != kCheckpointVersion)
    throw Error("version_mismatch", "unsupported checkpoint format_version");
  std::size_t pos = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  for (const auto& p : ck.header.at("params")) {
    const auto shape = p.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2) throw Error("corrupt_checkpoint", "parameter shape must be 2-D");
    const std::size_t i = ck.params.add(p.at("name").get<std::string>(), shape[0], shape[1]);
    Matrix& m = ck.params[i];
    if (pos + static_cast<std::size_t>(m.size()) * 8 > body) throw Error("corrupt_checkpoint", "truncated payload");
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(b)]) << (8 * b);
      std::memcpy(&m.data()[k], &bits, 8);
      pos += 8;
    }
  }
  if (pos != body) throw Error("corrupt_checkpoint", "trailing bytes in payload");
  return ck;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("unwritable_path", "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("unwritable_path", "cannot write " + path.string());
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing_input", "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

/// Copies checkpoint values into a model with matching names and shapes.
inline void load_params_into(ParamStore& dst, const ParamStore& src) {
  if (dst.size() != src.size()) throw Error("shape_mismatch", "checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst.name(i) != src.name(i) || dst[i].rows() != src[i].rows() || dst[i].cols() != src[i].cols())
      throw Error("shape_mismatch", "checkpoint parameter '" + src.name(i) + "' does not match model");
    dst[i] = src[i];
  }
}

}  // namespace taploss::nn
