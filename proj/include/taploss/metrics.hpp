#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "taploss/acoustic.hpp"
#include "taploss/common.hpp"
#include "taploss/fft.hpp"
#include "taploss/signal.hpp"

namespace taploss {

// ---------------------------------------------------------------------------
// STOI (short-time objective intelligibility)
// ---------------------------------------------------------------------------

namespace stoi_detail {

inline constexpr int kFs = 10000;
inline constexpr std::size_t kFrame = 256;
inline constexpr std::size_t kHop = 128;
inline constexpr std::size_t kNfft = 512;
inline constexpr std::size_t kBands = 15;
inline constexpr double kMinFreq = 150.0;
inline constexpr std::size_t kSegment = 30;
inline constexpr double kBeta = -15.0;
inline constexpr double kDynRange = 40.0;
inline constexpr double kMachineEps = std::numeric_limits<double>::epsilon();

// Symmetric Hann of length N+2 with the zero endpoints dropped.
inline const std::vector<double>& window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kFrame);
    const double m = static_cast<double>(kFrame + 1);
    for (std::size_t i = 0; i < kFrame; ++i) v[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i + 1) / m);
    return v;
  }();
  return w;
}

// One-third-octave band edges as rfft bin ranges [lo, hi).
inline const std::array<std::pair<std::size_t, std::size_t>, kBands>& third_octave_bins() {
  static const auto bins = [] {
    std::array<std::pair<std::size_t, std::size_t>, kBands> out{};
    const std::size_t n_bins = kNfft / 2 + 1;
    const auto nearest = [&](double f) {
      std::size_t best = 0;
      double err = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n_bins; ++k) {
        const double fk = static_cast<double>(k) * kFs / static_cast<double>(kNfft);
        const double e = (fk - f) * (fk - f);
        if (e < err) err = e, best = k;
      }
      return best;
    };
    for (std::size_t b = 0; b < kBands; ++b) {
      const double k = static_cast<double>(b);
      out[b] = {nearest(kMinFreq * std::pow(2.0, (2.0 * k - 1.0) / 6.0)),
                nearest(kMinFreq * std::pow(2.0, (2.0 * k + 1.0) / 6.0))};
    }
    return out;
  }();
  return bins;
}

// Drops frames of both signals whose clean energy is more than 40 dB below
// the loudest clean frame, then overlap-adds the survivors.
inline std::pair<std::vector<double>, std::vector<double>> remove_silent_frames(std::span<const double> x,
                                                                                std::span<const double> y) {
  const auto& w = window();
  std::vector<std::size_t> starts;
  std::vector<double> energy;
  for (std::size_t i = 0; i + kFrame < x.size(); i += kHop) {
    double e = 0.0;
    for (std::size_t n = 0; n < kFrame; ++n) e += (w[n] * x[i + n]) * (w[n] * x[i + n]);
    starts.push_back(i);
    energy.push_back(20.0 * std::log10(std::sqrt(e) + kMachineEps));
  }
  if (starts.empty()) return {};
  const double top = *std::max_element(energy.begin(), energy.end());
  std::vector<std::size_t> keep;
  for (std::size_t f = 0; f < starts.size(); ++f)
    if (top - kDynRange - energy[f] < 0.0) keep.push_back(starts[f]);
  const std::size_t len = (keep.size() - 1) * kHop + kFrame;
  std::vector<double> xs(len, 0.0), ys(len, 0.0);
  for (std::size_t f = 0; f < keep.size(); ++f)
    for (std::size_t n = 0; n < kFrame; ++n) {
      xs[f * kHop + n] += w[n] * x[keep[f] + n];
      ys[f * kHop + n] += w[n] * y[keep[f] + n];
    }
  return {std::move(xs), std::move(ys)};
}

// Third-octave band envelopes, bands x frames.
inline Matrix band_envelopes(std::span<const double> x) {
  const auto& w = window();
  const auto& fft = dsp::fft_of_size(kNfft);
  const auto& bins = third_octave_bins();
  std::size_t frames = 0;
  for (std::size_t i = 0; i + kFrame < x.size(); i += kHop) ++frames;
  Matrix env(static_cast<Eigen::Index>(kBands), static_cast<Eigen::Index>(frames));
  std::vector<Complex> buf(kNfft);
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), Complex{});
    for (std::size_t n = 0; n < kFrame; ++n) buf[n] = w[n] * x[f * kHop + n];
    fft.forward(buf);
    for (std::size_t b = 0; b < kBands; ++b) {
      double e = 0.0;
      for (std::size_t k = bins[b].first; k < bins[b].second; ++k) e += std::norm(buf[k]);
      env(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(f)) = std::sqrt(e);
    }
  }
  return env;
}

}  // namespace stoi_detail

/// Classic STOI of `processed` against `clean`, in [0, 1].
inline double stoi(const Waveform& clean, const Waveform& processed) {
  using namespace stoi_detail;
  if (clean.size() != processed.size()) throw Error("length_mismatch", "stoi: clean and processed lengths differ");
  if (clean.sample_rate_hz != processed.sample_rate_hz) throw Error("rate_mismatch", "stoi: sample rates differ");
  if (clean.empty()) throw Error("empty_signal", "stoi: empty input");
  const Waveform x10 = resample(clean, kFs), y10 = resample(processed, kFs);
  if (std::all_of(x10.samples.begin(), x10.samples.end(), [](double v) { return v == 0.0; }))
    throw Error("silent_reference", "stoi: clean signal is entirely silent");

  const auto [xs, ys] = remove_silent_frames(x10.samples, y10.samples);
  const Matrix xe = band_envelopes(xs), ye = band_envelopes(ys);
  const auto frames = static_cast<std::size_t>(xe.cols());
  if (frames < kSegment) throw Error("signal_too_short", "stoi: fewer than 30 non-silent frames");

  const double clip = std::pow(10.0, -kBeta / 20.0);
  const auto seg = static_cast<Eigen::Index>(kSegment);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t m = kSegment; m <= frames; ++m) {
    const auto start = static_cast<Eigen::Index>(m - kSegment);
    for (Eigen::Index b = 0; b < xe.rows(); ++b) {
      Vector xv = xe.row(b).segment(start, seg).transpose();
      Vector yv = ye.row(b).segment(start, seg).transpose();
      const double scale = xv.norm() / (yv.norm() + kMachineEps);
      yv = (yv * scale).cwiseMin(xv * (1.0 + clip));
      xv.array() -= xv.mean();
      yv.array() -= yv.mean();
      xv /= xv.norm() + kMachineEps;
      yv /= yv.norm() + kMachineEps;
      total += xv.dot(yv);
      ++count;
    }
  }
  return std::clamp(total / static_cast<double>(count), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Acoustic MAE and improvement tables
// ---------------------------------------------------------------------------

/// Per-parameter mean absolute error over frames. Standardized by `stats`
/// unless `raw` is set.
inline Vector acoustic_mae(const AcousticMatrix& ref, const AcousticMatrix& sys, const TapStats& stats, bool raw = false) {
  if (ref.data.rows() != sys.data.rows() || ref.data.cols() != sys.data.cols() ||
      ref.data.cols() != static_cast<Eigen::Index>(kNumParams))
    throw Error("shape_mismatch", "acoustic_mae: shape mismatch");
  if (ref.data.rows() == 0) throw Error("shape_mismatch", "acoustic_mae: no frames");
  Vector out = (ref.data - sys.data).cwiseAbs().colwise().mean().transpose();
  if (!raw) out = out.cwiseQuotient(stats.std);
  return out;
}

struct ImprovementRow {
  std::string parameter;
  double mae_baseline = 0.0;
  double mae_system = 0.0;
  std::optional<double> improvement_pct;  // empty when the baseline is zero
};

inline std::vector<ImprovementRow> improvement_table(const Vector& baseline, const Vector& system) {
  if (baseline.size() != static_cast<Eigen::Index>(kNumParams) || system.size() != baseline.size())
    throw Error("shape_mismatch", "improvement_table expects 25-entry vectors");
  std::vector<ImprovementRow> rows;
  for (std::size_t p = 0; p < kNumParams; ++p) {
    const auto i = static_cast<Eigen::Index>(p);
    ImprovementRow r{param_names()[p], baseline[i], system[i], std::nullopt};
    if (baseline[i] > 0.0) r.improvement_pct = 100.0 * (baseline[i] - system[i]) / baseline[i];
    rows.push_back(r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ImprovementRow& a, const ImprovementRow& b) {
    if (a.improvement_pct.has_value() != b.improvement_pct.has_value()) return a.improvement_pct.has_value();
    return a.improvement_pct.value_or(0.0) > b.improvement_pct.value_or(0.0);
  });
  return rows;
}

inline std::string improvement_csv(std::span<const ImprovementRow> rows) {
  std::string out = "parameter,mae_baseline,mae_system,improvement_pct\n";
  char buf[160];
  for (const auto& r : rows) {
    if (r.improvement_pct)
      std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.6f\n", r.parameter.c_str(), r.mae_baseline, r.mae_system,
                    *r.improvement_pct);
    else
      std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,undefined\n", r.parameter.c_str(), r.mae_baseline, r.mae_system);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation records
// ---------------------------------------------------------------------------

struct Condition {
  std::string platform;
  std::string receiver;
  std::string denoise_mode;  // "low" or "auto"
  std::string system;        // "source", or an enhancer label

  auto key() const { return std::tie(platform, receiver, denoise_mode, system); }
  bool operator==(const Condition& o) const { return key() == o.key(); }
  bool operator<(const Condition& o) const { return key() < o.key(); }
};

struct EvalRecord {
  std::string clip_id;
  Condition condition;
  std::optional<double> stoi;
  std::optional<double> pesq_external;
  std::optional<std::vector<double>> mae;  // 25 entries when present

  void validate() const {
    if (clip_id.empty()) throw Error("invalid_record", "record without clip_id");
    if (condition.denoise_mode != "low" && condition.denoise_mode != "auto")
      throw Error("invalid_record", "denoise_mode must be 'low' or 'auto'");
    if (condition.system.empty() || condition.platform.empty() || condition.receiver.empty())
      throw Error("invalid_record", "condition labels must be non-empty");
    if (stoi && !(*stoi >= 0.0 && *stoi <= 1.0)) throw Error("invalid_record", "stoi outside [0, 1]");
    if (pesq_external && !std::isfinite(*pesq_external)) throw Error("invalid_record", "pesq_external not finite");
    if (mae) {
      if (mae->size() != kNumParams) throw Error("invalid_record", "mae must hold 25 entries");
      for (double v : *mae)
        if (!(v >= 0.0) || !std::isfinite(v)) throw Error("invalid_record", "mae entries must be finite and >= 0");
    }
  }
};

inline void to_json(nlohmann::json& j, const EvalRecord& r) {
  j = nlohmann::json{{"clip_id", r.clip_id},
                     {"condition",
                      {{"platform", r.condition.platform},
                       {"receiver", r.condition.receiver},
                       {"denoise_mode", r.condition.denoise_mode},
                       {"system", r.condition.system}}},
                     {"stoi", r.stoi ? nlohmann::json(*r.stoi) : nlohmann::json(nullptr)},
                     {"pesq_external", r.pesq_external ? nlohmann::json(*r.pesq_external) : nlohmann::json(nullptr)},
                     {"mae", r.mae ? nlohmann::json(*r.mae) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, EvalRecord& r) {
  r.clip_id = j.at("clip_id").get<std::string>();
  const auto& c = j.at("condition");
  r.condition = {c.at("platform").get<std::string>(), c.at("receiver").get<std::string>(),
                 c.at("denoise_mode").get<std::string>(), c.at("system").get<std::string>()};
  const auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  r.stoi = opt("stoi");
  r.pesq_external = opt("pesq_external");
  r.mae.reset();
  if (j.contains("mae") && !j.at("mae").is_null()) r.mae = j.at("mae").get<std::vector<double>>();
}

inline std::vector<EvalRecord> parse_records(const std::string& jsonl) {
  std::vector<EvalRecord> out;
  std::istringstream in(jsonl);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      EvalRecord r = nlohmann::json::parse(line).get<EvalRecord>();
      r.validate();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error("invalid_record", "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string records_jsonl(std::span<const EvalRecord> records) {
  std::string out;
  for (const auto& r : records) out += nlohmann::json(r).dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct ReportLayout {
  std::vector<std::string> metrics = {"pesq", "stoi"};  // any of pesq, stoi, mae
};

struct ReportDocument {
  std::string text;
  nlohmann::json json;
};

namespace report_detail {

inline std::optional<double> metric_value(const EvalRecord& r, const std::string& metric) {
  if (metric == "pesq") return r.pesq_external;
  if (metric == "stoi") return r.stoi;
  if (metric == "mae") {
    if (!r.mae) return std::nullopt;
    double s = 0.0;
    for (double v : *r.mae) s += v;
    return s / static_cast<double>(r.mae->size());
  }
  throw Error("invalid_config", "unknown report metric '" + metric + "'");
}

inline std::string metric_label(const std::string& m) {
  if (m == "pesq") return "PESQ";
  if (m == "stoi") return "STOI";
  return "MAE";
}

// Display width of a UTF-8 string (code points).
inline std::size_t width(const std::string& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

inline std::string pad(const std::string& s, std::size_t w, bool right) {
  const std::string fill(w > width(s) ? w - width(s) : 0, ' ');
  return right ? fill + s : s + fill;
}

template <typename T>
void push_unique(std::vector<T>& v, const T& x) {
  if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

}  // namespace report_detail

inline constexpr const char* kMissingCell = "\xE2\x80\x94";  // U+2014

/// Groups records into a Platform x Receiver by Metric x System x Mode grid of
/// cell means. Row and column order follow first appearance.
inline ReportDocument assemble_report(std::span<const EvalRecord> records, const ReportLayout& layout = {}) {
  using namespace report_detail;
  if (records.empty()) throw Error("no_records", "no records");
  for (const auto& m : layout.metrics) (void)metric_value(records.front(), m);

  std::set<std::pair<std::string, Condition>> seen;
  std::vector<std::pair<std::string, std::string>> rows;
  std::vector<std::string> systems, modes;
  for (const auto& r : records) {
    r.validate();
    if (!seen.insert({r.clip_id, r.condition}).second)
      throw Error("duplicate_record", "duplicate record for clip '" + r.clip_id + "' system '" + r.condition.system + "'");
    push_unique(rows, std::make_pair(r.condition.platform, r.condition.receiver));
    push_unique(systems, r.condition.system);
    push_unique(modes, r.condition.denoise_mode);
  }

  // cell key: metric, platform, receiver, system, mode -> (sum, count)
  std::map<std::tuple<std::string, std::string, std::string, std::string, std::string>, std::pair<double, int>> cells;
  for (const auto& r : records)
    for (const auto& m : layout.metrics)
      if (const auto v = metric_value(r, m)) {
        auto& c = cells[{m, r.condition.platform, r.condition.receiver, r.condition.system, r.condition.denoise_mode}];
        c.first += *v;
        c.second += 1;
      }
  const auto cell = [&](const std::string& m, const std::pair<std::string, std::string>& row, const std::string& sys,
                        const std::string& mode) -> std::optional<double> {
    const auto it = cells.find({m, row.first, row.second, sys, mode});
    if (it == cells.end()) return std::nullopt;
    return it->second.first / it->second.second;
  };
  const auto fmt = [](std::optional<double> v) -> std::string {
    if (!v) return kMissingCell;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", *v);
    return buf;
  };

  // Text grid: three header rows, then one row per platform/receiver.
  std::vector<std::vector<std::string>> grid(3 + rows.size());
  grid[0] = {"", "", "|"};
  grid[1] = {"", "", "|"};
  grid[2] = {"Platform", "Receiver", "|"};
  for (std::size_t i = 0; i < rows.size(); ++i) grid[3 + i] = {rows[i].first, rows[i].second, "|"};
  for (std::size_t mi = 0; mi < layout.metrics.size(); ++mi) {
    const auto& m = layout.metrics[mi];
    if (mi > 0)
      for (auto& g : grid) g.push_back("|");
    bool first_metric_col = true;
    for (const auto& sys : systems) {
      bool first_sys_col = true;
      for (const auto& mode : modes) {
        grid[0].push_back(first_metric_col ? metric_label(m) : "");
        grid[1].push_back(first_sys_col ? sys : "");
        grid[2].push_back(mode);
        for (std::size_t i = 0; i < rows.size(); ++i) grid[3 + i].push_back(fmt(cell(m, rows[i], sys, mode)));
        first_metric_col = first_sys_col = false;
      }
    }
  }
  std::vector<std::size_t> widths(grid[0].size(), 0);
  for (const auto& g : grid)
    for (std::size_t c = 0; c < g.size(); ++c) widths[c] = std::max(widths[c], width(g[c]));
  std::string text;
  for (const auto& g : grid) {
    std::string line;
    for (std::size_t c = 0; c < g.size(); ++c) {
      if (c > 0) line += "  ";
      line += pad(g[c], widths[c], c >= 3 && g[c] != "|");
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    text += line + "\n";
  }

  nlohmann::json j;
  j["metrics"] = layout.metrics;
  j["systems"] = systems;
  j["denoise_modes"] = modes;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json jr{{"platform", row.first}, {"receiver", row.second}, {"cells", nlohmann::json::object()}};
    for (const auto& m : layout.metrics)
      for (const auto& sys : systems)
        for (const auto& mode : modes) {
          const auto v = cell(m, row, sys, mode);
          jr["cells"][m][sys][mode] = v ? nlohmann::json(std::round(*v * 1000.0) / 1000.0) : nlohmann::json(nullptr);
        }
    j["rows"].push_back(jr);
  }
  j["record_count"] = records.size();
  return {text, j};
}

}  // namespace taploss
