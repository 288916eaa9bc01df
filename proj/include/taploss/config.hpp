#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "taploss/common.hpp"
#include "taploss/corpus.hpp"
#include "taploss/enhancer.hpp"
#include "taploss/estimator.hpp"

namespace taploss {

// Run configuration text format, one setting per line:
//
//   # comment
//   key = value
//
// Keys are dotted names from config_schema(); anything else is rejected.
// Surrounding whitespace is trimmed; values run to the end of the line.

struct ConfigKey {
  std::string default_value;
  std::set<std::string> commands;  // subcommands that read this key
  std::string doc;
};

inline const std::vector<std::string>& config_commands() {
  static const std::vector<std::string> c = {"synth", "extract", "train-tap", "train-enhancer",
                                             "enhance", "eval", "report", "gradcheck"};
  return c;
}

inline const std::map<std::string, ConfigKey>& config_schema() {
  static const std::map<std::string, ConfigKey> s = [] {
    const std::set<std::string> all(config_commands().begin(), config_commands().end());
    std::map<std::string, ConfigKey> m;
    m["seed"] = {"0", all, "base seed for every stochastic step"};

    m["synth.count"] = {"50", {"synth"}, "number of mixtures"};
    m["synth.duration_s"] = {"4", {"synth"}, "mixture length in seconds"};
    m["synth.snr_lo_db"] = {"0", {"synth"}, "lower end of the uniform SNR range"};
    m["synth.snr_hi_db"] = {"20", {"synth"}, "upper end of the uniform SNR range"};
    m["synth.channel"] = {"none", {"synth"}, "channel preset applied to the noisy side: none|phone|cloud"};
    m["synth.test_fraction"] = {"0.2", {"synth"}, "fraction of entries labelled test"};
    m["synth.clean_dir"] = {"", {"synth"}, "clean WAV directory; empty generates speech-like sources"};
    m["synth.noise_dir"] = {"", {"synth"}, "noise WAV directory; empty generates noise sources"};
    m["synth.source_clips"] = {"12", {"synth"}, "generated clean sources when no clean_dir is given"};
    m["synth.source_duration_s"] = {"12", {"synth"}, "length of generated sources"};

    m["input.manifest"] = {"", {"extract", "train-tap", "train-enhancer", "enhance", "eval"}, "corpus manifest"};
    m["input.estimator"] = {"", {"train-enhancer", "eval"}, "TAP estimator checkpoint"};
    m["input.enhancer"] = {"", {"enhance"}, "enhancer checkpoint"};
    m["input.enhanced"] = {"", {"eval"}, "directory of enhanced WAVs named <id>.wav; empty evaluates the noisy input"};
    m["input.records"] = {"", {"report"}, "comma-separated eval JSONL files"};

    m["extract.audio"] = {"clean", {"extract"}, "which side of each pair: clean|noisy"};
    m["extract.split"] = {"all", {"extract"}, "train|test|all"};

    m["tap.lr"] = {"0.001", {"train-tap"}, "Adam learning rate"};
    m["tap.epochs"] = {"30", {"train-tap"}, "training epochs"};
    m["tap.batch"] = {"1", {"train-tap"}, "clips per optimizer step"};
    m["tap.bptt_chunk"] = {"128", {"train-tap"}, "truncated BPTT length in frames"};
    m["tap.validation_fraction"] = {"0.2", {"train-tap"}, "held-out share of the training clips"};
    m["tap.clip_norm"] = {"5", {"train-tap"}, "global gradient-norm clip"};
    m["tap.hidden"] = {"128", {"train-tap"}, "GRU width"};
    m["tap.layers"] = {"2", {"train-tap"}, "GRU layers"};
    m["tap.audio"] = {"both", {"train-tap"}, "training clips: clean|noisy|both"};

    m["enh.lr"] = {"0.001", {"train-enhancer"}, "learning rate; a comma list runs a sweep"};
    m["enh.lambda_tap"] = {"1", {"train-enhancer"}, "TAP loss weight; a comma list runs a sweep"};
    m["enh.epochs"] = {"30", {"train-enhancer"}, "training epochs"};
    m["enh.batch"] = {"1", {"train-enhancer"}, "pairs per optimizer step"};
    m["enh.validation_fraction"] = {"0.2", {"train-enhancer"}, "held-out share of the training pairs"};
    m["enh.clip_norm"] = {"5", {"train-enhancer"}, "global gradient-norm clip"};
    m["enh.hidden"] = {"64", {"train-enhancer"}, "mask GRU width"};
    m["enh.base_loss"] = {"l1_waveform", {"train-enhancer"}, "l1_waveform|l2_spectral_magnitude"};
    m["enh.tap_target"] = {"estimator", {"train-enhancer"}, "reference TAPs: estimator|extractor"};

    m["enhance.split"] = {"test", {"enhance"}, "train|test|all"};

    m["eval.split"] = {"test", {"eval"}, "train|test|all"};
    m["eval.platform"] = {"synthetic", {"eval"}, "condition label"};
    m["eval.receiver"] = {"none", {"eval"}, "condition label"};
    m["eval.denoise_mode"] = {"low", {"eval"}, "condition label"};
    m["eval.system"] = {"noisy", {"eval"}, "condition label"};

    m["report.metrics"] = {"pesq,stoi", {"report"}, "comma list of pesq|stoi|mae"};

    m["gradcheck.scope"] = {"all", {"gradcheck"}, "dense|gru|sequence|mae|taploss|all"};
    return m;
  }();
  return s;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ','))
    if (auto t = detail::trim(item); !t.empty()) out.push_back(t);
  return out;
}

class RunConfig {
 public:
  explicit RunConfig(std::string command) : command_(std::move(command)) {
    if (std::find(config_commands().begin(), config_commands().end(), command_) == config_commands().end())
      throw Error("invalid_argument", "unknown command '" + command_ + "'");
    for (const auto& [k, spec] : config_schema())
      if (spec.commands.count(command_)) values_[k] = spec.default_value;
  }

  const std::string& command() const { return command_; }

  /// Known keys for other commands are accepted and ignored, so one file can
  /// describe a whole experiment.
  void set(const std::string& key, const std::string& value) {
    const auto it = config_schema().find(key);
    if (it == config_schema().end()) throw Error("unknown_key", "unknown config key '" + key + "'");
    if (it->second.commands.count(command_)) values_[key] = value;
  }

  /// Parses the text format. A `command` line (as written by lock_text) must
  /// name this command.
  void merge_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw Error("invalid_config", "line " + std::to_string(lineno) + ": expected 'key = value'");
      const std::string key = detail::trim(t.substr(0, eq)), value = detail::trim(t.substr(eq + 1));
      if (key == "command") {
        if (value != command_)
          throw Error("invalid_config", "config was written for '" + value + "', not '" + command_ + "'");
        continue;
      }
      set(key, value);
    }
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw Error("unknown_key", "key '" + key + "' does not apply to " + command_);
    return it->second;
  }

  double num(const std::string& key) const { return parse_double(key, str(key)); }

  long long integer(const std::string& key) const {
    const std::string& v = str(key);
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw Error("invalid_config", key + ": expected an integer, got '" + v + "'");
    return out;
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& v = str(key);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw Error("invalid_config", key + ": expected a non-negative integer, got '" + v + "'");
    return out;
  }

  std::vector<double> num_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(str(key))) out.push_back(parse_double(key, item));
    if (out.empty()) throw Error("invalid_config", key + ": empty list");
    return out;
  }

  std::size_t positive(const std::string& key) const {
    const long long v = integer(key);
    if (v < 1) throw Error("invalid_config", key + " must be >= 1");
    return static_cast<std::size_t>(v);
  }

  const std::string& required_path(const std::string& key) const {
    const std::string& v = str(key);
    if (v.empty()) throw Error("missing_input", key + " is required for " + command_);
    return v;
  }

  /// Resolved settings for this command, sorted by key.
  std::string lock_text() const {
    std::string out = "command = " + command_ + "\n";
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
      throw Error("invalid_config", key + ": expected a finite number, got '" + v + "'");
    return out;
  }

  std::string command_;
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Mapping onto module configurations
// ---------------------------------------------------------------------------

inline std::optional<ChannelProfile> channel_from_name(const std::string& name) {
  if (name == "none" || name.empty()) return std::nullopt;
  return ChannelProfile::preset(name);
}

inline SynthSpec synth_spec(const RunConfig& c) {
  SynthSpec s;
  s.count = c.positive("synth.count");
  s.duration_s = c.num("synth.duration_s");
  s.snr_lo_db = c.num("synth.snr_lo_db");
  s.snr_hi_db = c.num("synth.snr_hi_db");
  s.seed = c.u64("seed");
  s.channel = channel_from_name(c.str("synth.channel"));
  s.validate();
  return s;
}

inline TrainConfig estimator_train_config(const RunConfig& c) {
  TrainConfig t;
  t.lr = c.num("tap.lr");
  t.epochs = static_cast<int>(c.integer("tap.epochs"));
  t.batch = static_cast<int>(c.integer("tap.batch"));
  t.bptt_chunk = static_cast<int>(c.integer("tap.bptt_chunk"));
  t.validation_fraction = c.num("tap.validation_fraction");
  t.clip_norm = c.num("tap.clip_norm");
  t.seed = c.u64("seed");
  t.validate();
  return t;
}

inline EstimatorArchitecture estimator_architecture(const RunConfig& c) {
  return {static_cast<Eigen::Index>(c.positive("tap.hidden")), c.positive("tap.layers")};
}

/// Training settings shared by every point of an enhancer sweep (lr is set per point).
inline TrainConfig enhancer_train_config(const RunConfig& c, double lr) {
  TrainConfig t;
  t.lr = lr;
  t.epochs = static_cast<int>(c.integer("enh.epochs"));
  t.batch = static_cast<int>(c.integer("enh.batch"));
  t.validation_fraction = c.num("enh.validation_fraction");
  t.clip_norm = c.num("enh.clip_norm");
  t.seed = c.u64("seed");
  t.validate();
  return t;
}

inline JointLossConfig joint_loss_config(const RunConfig& c, double lambda_tap) {
  JointLossConfig j;
  j.base_loss = parse_base_loss(c.str("enh.base_loss"));
  j.lambda_tap = lambda_tap;
  j.estimator_path = c.str("input.estimator");
  j.tap_target = parse_tap_target(c.str("enh.tap_target"));
  j.validate();
  return j;
}

inline void require_split_name(const std::string& key, const std::string& v) {
  if (v != "train" && v != "test" && v != "all") throw Error("invalid_config", key + " must be train|test|all");
}

}  // namespace taploss
