#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taploss/common.hpp"
#include "taploss/parallel.hpp"
#include "taploss/signal.hpp"
#include "taploss/synthetic.hpp"

namespace taploss {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string id;
  std::string clean_path;  // source files, relative to the corpus root
  std::string noise_path;
  double snr_db = 0.0;
  std::uint64_t noise_offset_seed = 0;
  std::optional<ChannelProfile> channel_profile;
  std::string out_noisy_path;
  std::string out_clean_path;
  std::string split = "train";
};

struct MixtureManifest {
  std::string corpus_root = ".";
  int format_version = 1;
  double duration_s = 4.0;
  std::vector<ManifestEntry> entries;

  void validate() const;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = nlohmann::json{{"id", e.id},
                     {"clean_path", e.clean_path},
                     {"noise_path", e.noise_path},
                     {"snr_db", e.snr_db},
                     {"noise_offset_seed", e.noise_offset_seed},
                     {"channel_profile", e.channel_profile ? nlohmann::json(*e.channel_profile) : nlohmann::json(nullptr)},
                     {"out_noisy_path", e.out_noisy_path},
                     {"out_clean_path", e.out_clean_path},
                     {"split", e.split}};
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  e.id = j.at("id").get<std::string>();
  e.clean_path = j.at("clean_path").get<std::string>();
  e.noise_path = j.at("noise_path").get<std::string>();
  e.snr_db = j.at("snr_db").get<double>();
  e.noise_offset_seed = j.at("noise_offset_seed").get<std::uint64_t>();
  if (j.contains("channel_profile") && !j.at("channel_profile").is_null())
    e.channel_profile = j.at("channel_profile").get<ChannelProfile>();
  else
    e.channel_profile.reset();
  e.out_noisy_path = j.at("out_noisy_path").get<std::string>();
  e.out_clean_path = j.at("out_clean_path").get<std::string>();
  e.split = j.at("split").get<std::string>();
}

inline void MixtureManifest::validate() const {
  if (format_version != 1) throw Error("version_mismatch", "unsupported manifest format_version " + std::to_string(format_version));
  if (!(duration_s >= 1.0)) throw Error("invalid_manifest", "duration_s must be >= 1");
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (!ids.insert(e.id).second) throw Error("invalid_manifest", "duplicate id '" + e.id + "'");
    if (!std::isfinite(e.snr_db)) throw Error("invalid_manifest", "non-finite snr_db in '" + e.id + "'");
    if (e.split != "train" && e.split != "test") throw Error("invalid_manifest", "bad split '" + e.split + "' in '" + e.id + "'");
    for (const auto* p : {&e.clean_path, &e.noise_path, &e.out_noisy_path, &e.out_clean_path})
      if (p->empty() || fs::path(*p).is_absolute())
        throw Error("invalid_manifest", "paths must be relative to the corpus root ('" + e.id + "')");
  }
}

inline std::string manifest_jsonl(const MixtureManifest& m) {
  m.validate();
  std::string out = nlohmann::json{{"corpus_root", m.corpus_root},
                                   {"format_version", m.format_version},
                                   {"duration_s", m.duration_s}}
                        .dump() +
                    "\n";
  for (const auto& e : m.entries) out += nlohmann::json(e).dump() + "\n";
  return out;
}

inline MixtureManifest parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  MixtureManifest m;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!header) {
        m.corpus_root = j.at("corpus_root").get<std::string>();
        m.format_version = j.at("format_version").get<int>();
        m.duration_s = j.value("duration_s", m.duration_s);
        header = true;
      } else {
        m.entries.push_back(j.get<ManifestEntry>());
      }
    } catch (const nlohmann::json::exception& ex) {
      throw Error("invalid_manifest", "line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  if (!header) throw Error("invalid_manifest", "missing header line");
  m.validate();
  return m;
}

inline void save_manifest(const MixtureManifest& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("unwritable_path", "cannot write " + path.string());
  out << manifest_jsonl(m);
}

inline MixtureManifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing_input", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

/// Absolute corpus root: an explicit override wins, a relative root is taken
/// relative to the manifest's directory.
inline fs::path resolve_root(const MixtureManifest& m, const fs::path& manifest_path,
                             const std::optional<fs::path>& override_root = std::nullopt) {
  if (override_root) return fs::absolute(*override_root);
  const fs::path root(m.corpus_root);
  return root.is_absolute() ? root : fs::absolute(manifest_path).parent_path() / root;
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

struct SynthSpec {
  std::size_t count = 50;
  double duration_s = 4.0;
  double snr_lo_db = 0.0;
  double snr_hi_db = 20.0;
  std::uint64_t seed = 0;
  std::optional<ChannelProfile> channel;

  void validate() const {
    if (count == 0) throw Error("invalid_argument", "count must be >= 1");
    if (!(duration_s >= 1.0)) throw Error("invalid_argument", "duration_s must be >= 1");
    if (!(std::isfinite(snr_lo_db) && std::isfinite(snr_hi_db) && snr_lo_db <= snr_hi_db))
      throw Error("invalid_argument", "snr range must be finite with lo <= hi");
    if (channel) channel->validate(kSampleRate);
  }
};

/// Sorted list of *.wav files (case-insensitive extension) in a directory.
inline std::vector<fs::path> list_wavs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("missing_input", "not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".wav") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error("empty_source_dir", "no WAV files in " + dir.string());
  return out;
}

inline Waveform load_source(const fs::path& path) {
  auto w = load_wav(path);
  return w.sample_rate_hz == kSampleRate ? w : resample(w, kSampleRate);
}

inline std::size_t clip_samples(double duration_s) {
  return static_cast<std::size_t>(std::lround(duration_s * kSampleRate));
}

struct SynthesizedPair {
  Waveform clean;
  Waveform noisy;
  Waveform mix;  // before the channel
};

/// Deterministic audio for one entry given its loaded sources. The clean
/// segment offset and the noise offset both derive from noise_offset_seed.
inline SynthesizedPair synthesize_entry(const ManifestEntry& e, const Waveform& clean_src, const Waveform& noise_src,
                                        double duration_s) {
  const std::size_t n = clip_samples(duration_s);
  if (clean_src.size() < n) throw Error("clip_too_short", "clean source shorter than duration for '" + e.id + "'");
  Rng rng(derive_seed(e.noise_offset_seed, 0));
  const std::size_t offset = clean_src.size() == n ? 0 : uniform_index(rng, clean_src.size() - n + 1);
  Waveform seg{std::vector<double>(clean_src.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                                   clean_src.samples.begin() + static_cast<std::ptrdiff_t>(offset + n)),
               kSampleRate};
  auto mix = mix_at_snr(seg, noise_src, e.snr_db, e.noise_offset_seed);
  SynthesizedPair out{mix.clean, mix.noisy, mix.noisy};
  if (e.channel_profile) out.noisy = apply_channel(out.noisy, *e.channel_profile);
  return out;
}

inline SynthesizedPair reproduce_entry(const ManifestEntry& e, const MixtureManifest& m, const fs::path& root) {
  return synthesize_entry(e, load_source(root / e.clean_path), load_source(root / e.noise_path), m.duration_s);
}

/// Samples sources, offsets and SNRs from spec.seed, writes out_dir/clean and
/// out_dir/noisy WAVs plus out_dir/manifest.jsonl. Entry synthesis runs on
/// `jobs` threads; the manifest is written once at the end.
inline MixtureManifest synth_corpus(const fs::path& clean_dir, const fs::path& noise_dir, const SynthSpec& spec,
                                    const fs::path& out_dir, std::size_t jobs = 1) {
  spec.validate();
  const auto clean_files = list_wavs(clean_dir);
  const auto noise_files = list_wavs(noise_dir);
  std::vector<Waveform> cleans, noises;
  for (const auto& p : clean_files) cleans.push_back(load_source(p));
  for (const auto& p : noise_files) noises.push_back(load_source(p));

  const std::size_t n = clip_samples(spec.duration_s);
  const fs::path root = fs::absolute(out_dir);
  fs::create_directories(root / "clean");
  fs::create_directories(root / "noisy");

  MixtureManifest m;
  m.duration_s = spec.duration_s;
  std::vector<std::size_t> clean_idx, noise_idx;
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t first = uniform_index(rng, cleans.size());
    std::optional<std::size_t> chosen;
    for (std::size_t k = 0; k < cleans.size() && !chosen; ++k)
      if (cleans[(first + k) % cleans.size()].size() >= n) chosen = (first + k) % cleans.size();
    if (!chosen) throw Error("clip_too_short", "no clean source is at least " + std::to_string(spec.duration_s) + " s long");
    const std::size_t ni = uniform_index(rng, noises.size());
    const double snr = spec.snr_lo_db == spec.snr_hi_db ? spec.snr_lo_db : uniform(rng, spec.snr_lo_db, spec.snr_hi_db);

    char id[32];
    std::snprintf(id, sizeof id, "mix_%05zu", i);
    ManifestEntry e;
    e.id = id;
    e.clean_path = fs::absolute(clean_files[*chosen]).lexically_normal().lexically_relative(root).generic_string();
    e.noise_path = fs::absolute(noise_files[ni]).lexically_normal().lexically_relative(root).generic_string();
    e.snr_db = snr;
    e.noise_offset_seed = derive_seed(spec.seed, i);
    if (spec.channel) {
      e.channel_profile = *spec.channel;
      e.channel_profile->seed = derive_seed(spec.seed ^ 0x6368616eULL, i);
    }
    e.out_noisy_path = "noisy/" + e.id + ".wav";
    e.out_clean_path = "clean/" + e.id + ".wav";
    m.entries.push_back(std::move(e));
    clean_idx.push_back(*chosen);
    noise_idx.push_back(ni);
  }

  parallel_for(m.entries.size(), jobs, [&](std::size_t i) {
    const auto& e = m.entries[i];
    const auto pair = synthesize_entry(e, cleans[clean_idx[i]], noises[noise_idx[i]], spec.duration_s);
    save_wav(pair.clean, root / e.out_clean_path);
    save_wav(pair.noisy, root / e.out_noisy_path);
  });
  save_manifest(m, root / "manifest.jsonl");
  return m;
}

/// Seeded shuffle, then the first floor(n * f) entries become the test split.
inline MixtureManifest split_manifest(MixtureManifest m, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw Error("invalid_argument", "test_fraction must lie in (0, 1)");
  const std::size_t n = m.entries.size();
  if (n < 2) throw Error("insufficient_entries", "splitting needs at least 2 entries");
  // The small offset keeps products like 0.3 * 10 = 2.9999... from losing an entry.
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction + 1e-9));
  if (n_test < 1) throw Error("empty_split", "test split would be empty");
  if (n_test >= n) throw Error("empty_split", "train split would be empty");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  for (std::size_t k = 0; k < n; ++k) m.entries[order[k]].split = k < n_test ? "test" : "train";
  return m;
}

/// Every entry's outputs exist, load, and have equal clean/noisy lengths.
inline void verify_manifest(const MixtureManifest& m, const fs::path& root) {
  m.validate();
  for (const auto& e : m.entries) {
    const auto c = load_wav(root / e.out_clean_path);
    const auto y = load_wav(root / e.out_noisy_path);
    if (c.size() != y.size()) throw Error("length_mismatch", "clean/noisy length differ for '" + e.id + "'");
  }
}

/// Generated source material for runs without a recorded corpus: speech-like
/// clean clips and one file per noise kind.
inline void write_synthetic_sources(const fs::path& dir, std::size_t clean_count, double duration_s, std::uint64_t seed) {
  fs::create_directories(dir / "clean");
  fs::create_directories(dir / "noise");
  for (std::size_t i = 0; i < clean_count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "speech_%03zu.wav", i);
    save_wav(synth::speech_like(duration_s, derive_seed(seed, i)), dir / "clean" / name);
  }
  std::uint64_t k = 0;
  for (auto kind : synth::noise_kinds()) {
    const auto w = synth::noise(kind, duration_s, derive_seed(seed ^ 0x6e6f6973ULL, k++));
    save_wav(w, dir / "noise" / (synth::to_string(kind) + ".wav"));
  }
}

}  // namespace taploss
