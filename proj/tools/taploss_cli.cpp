// taploss: command-line driver for the TAP pipeline.
//
//   taploss synth | extract | train-tap | train-enhancer | enhance | eval | report | gradcheck
//
// Every subcommand writes into its run directory (--out) and echoes the fully
// resolved settings there as config.lock; `taploss <cmd> --config <lock>`
// repeats the run. Failures print one line `error: <code>: <message>` on
// stderr and exit nonzero.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "taploss/config.hpp"
#include "taploss/corpus.hpp"
#include "taploss/enhancer.hpp"
#include "taploss/estimator.hpp"
#include "taploss/gradcheck.hpp"
#include "taploss/metrics.hpp"
#include "taploss/parallel.hpp"

using namespace taploss;
using nlohmann::json;

namespace {

struct Invocation {
  std::string command;
  std::string out;
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // config key -> value from named flags
  bool json_output = false;
  std::size_t jobs = 1;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("missing_input", "cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("unwritable_path", "cannot write " + p.string());
  out << text;
}

void log_line(const Invocation& inv, const std::string& msg) { std::cerr << "[" << inv.command << "] " << msg << "\n"; }

RunConfig resolve_config(const Invocation& inv) {
  RunConfig cfg(inv.command);
  if (!inv.config_path.empty()) cfg.merge_text(read_text(inv.config_path));
  for (const auto& kv : inv.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("invalid_flags", "--set expects key=value, got '" + kv + "'");
    cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  for (const auto& [k, v] : inv.flags) cfg.set(k, v);
  return cfg;
}

struct Corpus {
  MixtureManifest manifest;
  fs::path root;
};

Corpus open_corpus(const std::string& manifest_path) {
  Corpus c;
  c.manifest = load_manifest(manifest_path);
  std::optional<fs::path> override_root;
  if (const char* env = std::getenv("TAPLOSS_CORPUS_ROOT"); env && *env) override_root = fs::path(env);
  c.root = resolve_root(c.manifest, manifest_path, override_root);
  return c;
}

std::vector<const ManifestEntry*> select(const MixtureManifest& m, const std::string& split) {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : m.entries)
    if (split == "all" || e.split == split) out.push_back(&e);
  if (out.empty()) throw Error("empty_selection", "no manifest entries in split '" + split + "'");
  return out;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------

json cmd_synth(const Invocation& inv, const RunConfig& cfg, const fs::path& out) {
  const auto spec = synth_spec(cfg);
  const double test_fraction = cfg.num("synth.test_fraction");
  fs::path clean_dir = cfg.str("synth.clean_dir"), noise_dir = cfg.str("synth.noise_dir");
  if (clean_dir.empty() || noise_dir.empty()) {
    const double src_dur = cfg.num("synth.source_duration_s");
    if (src_dur < spec.duration_s) throw Error("invalid_config", "synth.source_duration_s must be >= synth.duration_s");
    write_synthetic_sources(out / "sources", cfg.positive("synth.source_clips"), src_dur, derive_seed(spec.seed, 0x5eed));
    if (clean_dir.empty()) clean_dir = out / "sources" / "clean";
    if (noise_dir.empty()) noise_dir = out / "sources" / "noise";
  }
  auto m = synth_corpus(clean_dir, noise_dir, spec, out, inv.jobs);
  m = split_manifest(std::move(m), test_fraction, derive_seed(spec.seed, 0x5b17));
  save_manifest(m, out / "manifest.jsonl");
  std::size_t test = 0;
  for (const auto& e : m.entries) test += e.split == "test" ? 1 : 0;
  return {{"manifest", (out / "manifest.jsonl").string()}, {"entries", m.entries.size()}, {"train", m.entries.size() - test},
          {"test", test}};
}

json cmd_extract(const Invocation& inv, const RunConfig& cfg, const fs::path& out) {
  const auto corpus = open_corpus(cfg.required_path("input.manifest"));
  const std::string audio = cfg.str("extract.audio");
  if (audio != "clean" && audio != "noisy") throw Error("invalid_config", "extract.audio must be clean|noisy");
  require_split_name("extract.split", cfg.str("extract.split"));
  const auto entries = select(corpus.manifest, cfg.str("extract.split"));
  fs::create_directories(out / "taps");
  std::vector<AcousticMatrix> taps(entries.size());
  parallel_for(entries.size(), inv.jobs, [&](std::size_t i) {
    const auto& e = *entries[i];
    taps[i] = extract_taps(load_wav(corpus.root / (audio == "clean" ? e.out_clean_path : e.out_noisy_path)));
    write_text(out / "taps" / (e.id + ".csv"), to_csv(taps[i]));
  });
  const TapStats stats = compute_stats(taps);
  write_text(out / "tap_stats.json", json(stats).dump(2) + "\n");
  return {{"clips", entries.size()}, {"taps_dir", (out / "taps").string()}, {"stats", (out / "tap_stats.json").string()}};
}

json cmd_train_tap(const Invocation& inv, const RunConfig& cfg, const fs::path& out) {
  const auto tc = estimator_train_config(cfg);
  const auto arch = estimator_architecture(cfg);
  const std::string audio = cfg.str("tap.audio");
  if (audio != "clean" && audio != "noisy" && audio != "both") throw Error("invalid_config", "tap.audio must be clean|noisy|both");
  const auto corpus = open_corpus(cfg.required_path("input.manifest"));
  const auto entries = select(corpus.manifest, "train");
  const bool use_clean = audio != "noisy", use_noisy = audio != "clean";
  const std::size_t per = (use_clean ? 1 : 0) + (use_noisy ? 1 : 0);
  std::vector<Waveform> clips(entries.size() * per);
  parallel_for(entries.size(), inv.jobs, [&](std::size_t i) {
    std::size_t k = i * per;
    if (use_clean) clips[k++] = load_wav(corpus.root / entries[i]->out_clean_path);
    if (use_noisy) clips[k] = load_wav(corpus.root / entries[i]->out_noisy_path);
  });
  const auto result = train_estimator(clips, tc, arch, [&](const std::string& s) { log_line(inv, s); });
  json hyper = tc;
  save_estimator(result.model, out / "estimator.ckpt", hyper, tc.seed);
  write_text(out / "history.csv", history_csv(result.history));
  const auto& first = result.history.front();
  const auto& best = result.history[static_cast<std::size_t>(result.best_epoch)];
  return {{"checkpoint", (out / "estimator.ckpt").string()},
          {"clips", clips.size()},
          {"best_epoch", result.best_epoch},
          {"initial_val_mae", first.val_mae},
          {"best_val_mae", best.val_mae},
          {"final_train_mae", result.history.back().train_mae}};
}

json cmd_train_enhancer(const Invocation& inv, const RunConfig& cfg, const fs::path& out) {
  const auto lrs = cfg.num_list("enh.lr");
  const auto lambdas = cfg.num_list("enh.lambda_tap");
  struct Point {
    double lr, lambda;
    TrainConfig tc;
    JointLossConfig jc;
    std::string name;
  };
  std::vector<Point> points;
  for (double lr : lrs)
    for (double lambda : lambdas)
      points.push_back({lr, lambda, enhancer_train_config(cfg, lr), joint_loss_config(cfg, lambda),
                        "lr_" + format_number(lr) + "_lambda_" + format_number(lambda)});
  const Eigen::Index hidden = static_cast<Eigen::Index>(cfg.positive("enh.hidden"));
  const auto est = load_estimator(cfg.required_path("input.estimator"));
  for (const auto& w : est.warnings) log_line(inv, "warning: " + w);
  const auto corpus = open_corpus(cfg.required_path("input.manifest"));
  const auto entries = select(corpus.manifest, "train");
  std::vector<NoisyCleanPair> pairs(entries.size());
  parallel_for(entries.size(), inv.jobs, [&](std::size_t i) {
    pairs[i] = {load_wav(corpus.root / entries[i]->out_noisy_path), load_wav(corpus.root / entries[i]->out_clean_path)};
  });

  std::vector<EnhancerHistoryRow> finals(points.size());
  parallel_for(points.size(), inv.jobs, [&](std::size_t i) {
    const auto& p = points[i];
    const auto r = train_enhancer(pairs, p.jc, p.tc, est.model, {hidden},
                                  [&](const std::string& s) { log_line(inv, p.name + " " + s); });
    fs::create_directories(out / p.name);
    json hyper = p.tc;
    hyper["lambda_tap"] = p.lambda;
    hyper["base_loss"] = to_string(p.jc.base_loss);
    hyper["tap_target"] = to_string(p.jc.tap_target);
    save_enhancer(r.model, out / p.name / "enhancer.ckpt", hyper, p.tc.seed);
    write_text(out / p.name / "history.csv", history_csv(r.history));
    finals[i] = r.history.back();
  });

  std::string sweep = "run,lr,lambda_tap,val_l_base,val_l_tap,val_l_total\n";
  json runs = json::array();
  for (std::size_t i = 0; i < points.size(); ++i) {
    sweep += points[i].name + "," + format_number(points[i].lr) + "," + format_number(points[i].lambda) + "," +
             format_number(finals[i].l_base) + "," + format_number(finals[i].l_tap) + "," +
             format_number(finals[i].l_total) + "\n";
    runs.push_back({{"run", points[i].name},
                    {"checkpoint", (out / points[i].name / "enhancer.ckpt").string()},
                    {"val_l_total", finals[i].l_total}});
  }
  write_text(out / "sweep.csv", sweep);
  return {{"pairs", pairs.size()}, {"runs", runs}};
}

json cmd_enhance(const Invocation& inv, const RunConfig& cfg, const fs::path& out) {
  const auto model = load_enhancer(cfg.required_path("input.enhancer"));
  require_split_name("enhance.split", cfg.str("enhance.split"));
  const auto corpus = open_corpus(cfg.required_path("input.manifest"));
  const auto entries = select(corpus.manifest, cfg.str("enhance.split"));
  fs::create_directories(out / "enhanced");
  std::vector<std::size_t> clips(entries.size());
  parallel_for(entries.size(), inv.jobs, [&](std::size_t i) {
    const auto y = enhance(load_wav(corpus.root / entries[i]->out_noisy_path), model);
    clips[i] = save_wav(y, out / "enhanced" / (entries[i]->id + ".wav"));
  });
  std::size_t clipped = 0;
  for (auto c : clips) clipped += c;
  if (clipped) log_line(inv, "warning: " + std::to_string(clipped) + " samples clipped on write");
  return {{"clips", entries.size()}, {"enhanced_dir", (out / "enhanced").string()}, {"clipped_samples", clipped}};
}

json cmd_eval(const Invocation& inv, const RunConfig& cfg, const fs::path& out) {
  require_split_name("eval.split", cfg.str("eval.split"));
  const Condition cond{cfg.str("eval.platform"), cfg.str("eval.receiver"), cfg.str("eval.denoise_mode"),
                       cfg.str("eval.system")};
  const auto corpus = open_corpus(cfg.required_path("input.manifest"));
  const auto entries = select(corpus.manifest, cfg.str("eval.split"));
  const std::string enhanced = cfg.str("input.enhanced");

  struct ClipResult {
    AcousticMatrix ref, sys;
    std::optional<double> stoi;
  };
  std::vector<ClipResult> res(entries.size());
  parallel_for(entries.size(), inv.jobs, [&](std::size_t i) {
    const auto& e = *entries[i];
    const auto clean = load_wav(corpus.root / e.out_clean_path);
    const auto proc = enhanced.empty() ? load_wav(corpus.root / e.out_noisy_path) : load_wav(fs::path(enhanced) / (e.id + ".wav"));
    try {
      res[i].stoi = stoi(clean, proc);
    } catch (const Error& err) {
      if (err.code() != "signal_too_short") throw;
    }
    res[i].ref = extract_taps(clean);
    res[i].sys = extract_taps(proc);
  });

  TapStats stats;
  if (const std::string est = cfg.str("input.estimator"); !est.empty()) {
    stats = load_estimator(est).model.stats;
  } else {
    std::vector<AcousticMatrix> refs;
    for (const auto& r : res) refs.push_back(r.ref);
    stats = compute_stats(refs);
  }

  std::vector<EvalRecord> records;
  Vector mean_mae = Vector::Zero(static_cast<Eigen::Index>(kNumParams));
  double stoi_sum = 0.0;
  std::size_t stoi_n = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Vector m = acoustic_mae(res[i].ref, res[i].sys, stats);
    mean_mae += m / static_cast<double>(entries.size());
    EvalRecord r{entries[i]->id, cond, res[i].stoi, std::nullopt, std::vector<double>(m.data(), m.data() + m.size())};
    r.validate();
    records.push_back(std::move(r));
    if (res[i].stoi) {
      stoi_sum += *res[i].stoi;
      ++stoi_n;
    }
  }
  write_text(out / "eval.jsonl", records_jsonl(records));
  std::string csv = "parameter,mae\n";
  for (std::size_t p = 0; p < kNumParams; ++p) csv += param_names()[p] + "," + format_number(mean_mae[static_cast<Eigen::Index>(p)]) + "\n";
  write_text(out / "mae_per_param.csv", csv);
  write_text(out / "stats_used.json", json(stats).dump(2) + "\n");
  json result = {{"clips", entries.size()},
                 {"records", (out / "eval.jsonl").string()},
                 {"mean_stoi", stoi_n ? json(stoi_sum / static_cast<double>(stoi_n)) : json(nullptr)},
                 {"mean_acoustic_mae", mean_mae.mean()}};
  if (stoi_n < entries.size()) log_line(inv, "warning: " + std::to_string(entries.size() - stoi_n) + " clips too short for STOI");
  return result;
}

json cmd_report(const Invocation&, const RunConfig& cfg, const fs::path& out) {
  const auto files = split_list(cfg.required_path("input.records"));
  std::vector<EvalRecord> records;
  for (const auto& f : files) {
    auto part = parse_records(read_text(f));
    records.insert(records.end(), part.begin(), part.end());
  }
  ReportLayout layout;
  layout.metrics = split_list(cfg.str("report.metrics"));
  const auto doc = assemble_report(records, layout);
  write_text(out / "report.txt", doc.text);
  write_text(out / "report.json", doc.json.dump(2) + "\n");
  return {{"records", records.size()}, {"report", (out / "report.txt").string()}, {"table", doc.text}, {"json", doc.json}};
}

json cmd_gradcheck(const Invocation&, const RunConfig& cfg, const fs::path& out) {
  const auto results = run_gradcheck(cfg.str("gradcheck.scope"), cfg.u64("seed"));
  json checks = json::array();
  bool ok = true;
  for (const auto& r : results) {
    checks.push_back({{"name", r.name}, {"max_rel_err", r.max_rel_err}, {"tolerance", r.tolerance}, {"checked", r.checked},
                      {"passed", r.passed}});
    ok = ok && r.passed;
  }
  write_text(out / "gradcheck.json", checks.dump(2) + "\n");
  return {{"checks", checks}, {"passed", ok}};
}

void print_text(const json& result) {
  for (const auto& [k, v] : result.items()) {
    if (k == "table") {
      std::cout << v.get<std::string>();
    } else if (k == "json") {
      continue;
    } else if (k == "checks") {
      for (const auto& c : v) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-10s max_rel_err %.3e  tol %.0e  %s\n", c["name"].get<std::string>().c_str(),
                      c["max_rel_err"].get<double>(), c["tolerance"].get<double>(), c["passed"].get<bool>() ? "PASS" : "FAIL");
        std::cout << buf;
      }
    } else if (k == "runs") {
      for (const auto& r : v) std::cout << "run: " << r["run"].get<std::string>() << " val_l_total " << r["val_l_total"] << "\n";
    } else {
      std::cout << k << ": " << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
    }
  }
}

using Handler = json (*)(const Invocation&, const RunConfig&, const fs::path&);

// Checks every setting the command reads before anything is written.
void precheck(const RunConfig& cfg) {
  const std::string& c = cfg.command();
  cfg.u64("seed");
  if (c == "synth") {
    synth_spec(cfg);
    if (const double f = cfg.num("synth.test_fraction"); !(f > 0.0 && f < 1.0))
      throw Error("invalid_config", "synth.test_fraction must lie in (0, 1)");
    cfg.positive("synth.source_clips");
    cfg.num("synth.source_duration_s");
  } else if (c == "extract") {
    cfg.required_path("input.manifest");
    require_split_name("extract.split", cfg.str("extract.split"));
  } else if (c == "train-tap") {
    cfg.required_path("input.manifest");
    estimator_train_config(cfg);
    estimator_architecture(cfg);
  } else if (c == "train-enhancer") {
    cfg.required_path("input.manifest");
    cfg.required_path("input.estimator");
    for (double lr : cfg.num_list("enh.lr")) enhancer_train_config(cfg, lr);
    for (double l : cfg.num_list("enh.lambda_tap")) joint_loss_config(cfg, l);
    cfg.positive("enh.hidden");
  } else if (c == "enhance") {
    cfg.required_path("input.manifest");
    cfg.required_path("input.enhancer");
    require_split_name("enhance.split", cfg.str("enhance.split"));
  } else if (c == "eval") {
    cfg.required_path("input.manifest");
    require_split_name("eval.split", cfg.str("eval.split"));
  } else if (c == "report") {
    cfg.required_path("input.records");
  }
}

int run(const Invocation& inv, Handler handler) {
  const RunConfig cfg = resolve_config(inv);
  precheck(cfg);
  const fs::path out = inv.out.empty() ? fs::path("runs") / inv.command : fs::path(inv.out);
  fs::create_directories(out);
  write_text(out / "config.lock", cfg.lock_text());
  json result = handler(inv, cfg, out);
  json head = {{"command", inv.command}, {"seed", cfg.u64("seed")}, {"out", out.string()}};
  head.update(result);
  if (inv.json_output) {
    head.erase("table");
    std::cout << head.dump() << "\n";
  } else {
    print_text(head);
  }
  if (result.contains("passed") && !result["passed"].get<bool>())
    throw Error("gradcheck_failed", "one or more gradient checks exceeded tolerance");
  return 0;
}

// Binds a named flag to a config key; the value is applied after --config and --set.
void bind(CLI::App* app, Invocation& inv, const std::string& flag, const std::string& key) {
  app->add_option_function<std::string>(flag, [&inv, key](const std::string& v) { inv.flags[key] = v; },
                                        config_schema().at(key).doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal acoustic parameter pipeline: corpus synthesis, TAP estimation, TAPLoss enhancement, evaluation"};
  app.require_subcommand(1);
  Invocation inv;

  const std::map<std::string, std::pair<Handler, std::vector<std::pair<std::string, std::string>>>> commands = {
      {"synth",
       {cmd_synth,
        {{"--count", "synth.count"}, {"--duration", "synth.duration_s"}, {"--snr-lo", "synth.snr_lo_db"},
         {"--snr-hi", "synth.snr_hi_db"}, {"--channel", "synth.channel"}, {"--test-fraction", "synth.test_fraction"},
         {"--clean-dir", "synth.clean_dir"}, {"--noise-dir", "synth.noise_dir"}, {"--source-clips", "synth.source_clips"},
         {"--source-duration", "synth.source_duration_s"}}}},
      {"extract",
       {cmd_extract, {{"--manifest", "input.manifest"}, {"--audio", "extract.audio"}, {"--split", "extract.split"}}}},
      {"train-tap",
       {cmd_train_tap,
        {{"--manifest", "input.manifest"}, {"--lr", "tap.lr"}, {"--epochs", "tap.epochs"}, {"--batch", "tap.batch"},
         {"--bptt-chunk", "tap.bptt_chunk"}, {"--validation-fraction", "tap.validation_fraction"},
         {"--clip-norm", "tap.clip_norm"}, {"--hidden", "tap.hidden"}, {"--layers", "tap.layers"}, {"--audio", "tap.audio"}}}},
      {"train-enhancer",
       {cmd_train_enhancer,
        {{"--manifest", "input.manifest"}, {"--estimator", "input.estimator"}, {"--lr", "enh.lr"},
         {"--lambda-tap", "enh.lambda_tap"}, {"--epochs", "enh.epochs"}, {"--batch", "enh.batch"},
         {"--validation-fraction", "enh.validation_fraction"}, {"--clip-norm", "enh.clip_norm"},
         {"--hidden", "enh.hidden"}, {"--base-loss", "enh.base_loss"}, {"--tap-target", "enh.tap_target"}}}},
      {"enhance",
       {cmd_enhance, {{"--manifest", "input.manifest"}, {"--enhancer", "input.enhancer"}, {"--split", "enhance.split"}}}},
      {"eval",
       {cmd_eval,
        {{"--manifest", "input.manifest"}, {"--enhanced", "input.enhanced"}, {"--estimator", "input.estimator"},
         {"--split", "eval.split"}, {"--platform", "eval.platform"}, {"--receiver", "eval.receiver"},
         {"--denoise-mode", "eval.denoise_mode"}, {"--system", "eval.system"}}}},
      {"report", {cmd_report, {{"--records", "input.records"}, {"--metrics", "report.metrics"}}}},
      {"gradcheck", {cmd_gradcheck, {{"--scope", "gradcheck.scope"}}}},
  };
  const std::map<std::string, std::string> help = {
      {"synth", "synthesize an SNR-controlled noisy/clean corpus and manifest"},
      {"extract", "extract frame-level acoustic parameters for manifest audio"},
      {"train-tap", "train the recurrent TAP estimator"},
      {"train-enhancer", "train the mask enhancer with the joint loss (lr / lambda sweeps)"},
      {"enhance", "run a trained enhancer over manifest audio"},
      {"eval", "STOI and per-parameter acoustic MAE for a system"},
      {"report", "render a condition table from eval records"},
      {"gradcheck", "finite-difference checks of every backward pass"},
  };

  Handler chosen = nullptr;
  for (const auto& name : config_commands()) {
    const auto& [handler, flags] = commands.at(name);
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--out", inv.out, "run directory (default runs/<command>)");
    sub->add_option("--config", inv.config_path, "key = value config file, e.g. a previous config.lock")->check(CLI::ExistingFile);
    sub->add_option("--set", inv.sets, "override any config key: --set key=value");
    sub->add_flag("--json", inv.json_output, "print a JSON summary on stdout");
    sub->add_option("--jobs", inv.jobs, "worker threads for per-file stages")->check(CLI::PositiveNumber);
    bind(sub, inv, "--seed", "seed");
    for (const auto& [flag, key] : flags) bind(sub, inv, flag, key);
    sub->callback([&inv, &chosen, name, h = handler] {
      inv.command = name;
      chosen = h;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: invalid_flags: " << msg << "\n";
    return 2;
  }

  try {
    return run(inv, chosen);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << e.code() << ": " << msg << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: internal: " << msg << "\n";
    return 1;
  }
}
