// Command-line front end: dataset synthesis, feature caching, training,
// scoring, and the two experiment drivers (strategy ablation and warp
// magnitude sweep). Every command writes a run.json manifest describing its
// configuration, inputs, and outputs.

#include <CLI11.hpp>
#include <json.hpp>

#include <rct/augment.hpp>
#include <rct/core.hpp>
#include <rct/eval.hpp>
#include <rct/features.hpp>
#include <rct/model.hpp>
#include <rct/rng.hpp>
#include <rct/synthdata.hpp>
#include <rct/train.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace fs = std::filesystem;
namespace feat = rct::features;
namespace synth = rct::synth;
namespace train = rct::train;
namespace ev = rct::eval;
using nlohmann::json;
using rct::Mat;
using rct::Vec;

namespace {

// ---------------------------------------------------------------------------
// Small utilities

constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

void fnv_mix(std::uint64_t& h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

std::uint64_t hash_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw rct::IoError("cannot open " + path.string() + " for hashing");
  std::uint64_t h = kFnvBasis;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    fnv_mix(h, buf, static_cast<std::size_t>(in.gcount()));
  }
  return h;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Write via a sibling temp file and rename so failures leave no partial file.
void atomic_write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  try {
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw rct::IoError("cannot open " + tmp.string());
      out << text;
      if (!out) throw rct::IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

int env_thread_cap() {
  const char* env = std::getenv("RCT_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (!end || *end != '\0' || v < 1) {
    throw rct::ConfigError("RCT_THREADS must be a positive integer, got '" + std::string(env) +
                           "'");
  }
  return static_cast<int>(v);
}

// Run fn(0..n-1) on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const int use = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (use == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < use; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Run manifests

class RunTimer {
 public:
  RunTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Content hash over the given files: order-independent, covers names and bytes.
std::string inputs_hash(std::vector<fs::path> inputs) {
  std::sort(inputs.begin(), inputs.end());
  inputs.erase(std::unique(inputs.begin(), inputs.end()), inputs.end());
  std::uint64_t h = kFnvBasis;
  for (const fs::path& p : inputs) {
    const std::string name = p.filename().string();
    fnv_mix(h, name.data(), name.size());
    const std::uint64_t fh = hash_file(p);
    fnv_mix(h, &fh, sizeof(fh));
  }
  return hex64(h);
}

void write_run_manifest(const fs::path& out_dir, const std::string& command, json config,
                        std::uint64_t seed, const std::vector<fs::path>& inputs,
                        const std::vector<std::string>& outputs, const RunTimer& timer) {
  json j;
  j["command"] = command;
  j["config"] = std::move(config);
  j["seed"] = seed;
  j["inputs_hash"] = inputs_hash(inputs);
  j["outputs"] = outputs;
  j["duration_seconds"] = timer.seconds();
  atomic_write_text(out_dir / "run.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Dataset directory layout
//
//   <data>/strong.jsonl weak.jsonl unlabeled.jsonl val.jsonl
//   <data>/dataset.json            class count and generation parameters
//   <data>/wav/<clip_id>.wav
//   <data>/cache/<clip_id>.rctf    feature cache plus index.json of WAV hashes

const char* kSplits[] = {"strong", "weak", "unlabeled", "val"};

fs::path manifest_path(const fs::path& data, const std::string& split) {
  return data / (split + ".jsonl");
}

fs::path wav_path(const fs::path& data, const std::string& clip_id) {
  return data / "wav" / (clip_id + ".wav");
}

fs::path cache_path(const fs::path& data, const std::string& clip_id) {
  return data / "cache" / (clip_id + ".rctf");
}

int read_class_count(const fs::path& data) {
  const fs::path meta = data / "dataset.json";
  if (fs::exists(meta)) {
    std::ifstream in(meta);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.contains("classes")) {
      throw rct::ParseError("bad dataset.json at " + meta.string());
    }
    return j.at("classes").get<int>();
  }
  // fall back to the largest class id mentioned by any manifest
  int max_class = -1;
  for (const char* split : kSplits) {
    const fs::path m = manifest_path(data, split);
    if (!fs::exists(m)) continue;
    for (const auto& ann : synth::read_manifest(m)) {
      for (const auto& e : ann.events) max_class = std::max(max_class, e.class_id);
    }
  }
  if (max_class < 0) {
    throw rct::ConfigError("cannot infer the class count from " + data.string() +
                           "; write dataset.json with a \"classes\" field");
  }
  return max_class + 1;
}

// ---------------------------------------------------------------------------
// Feature cache maintenance

struct CacheReport {
  int extracted = 0;
  int skipped = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // clip_id, message
};

json read_cache_index(const fs::path& data) {
  const fs::path index = data / "cache" / "index.json";
  if (!fs::exists(index)) return json::object();
  std::ifstream in(index);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return json::object();
  return j;
}

// Extract features for every manifest clip whose WAV content hash is not in
// the cache index; with strict=true the first failure aborts.
CacheReport ensure_features(const fs::path& data, bool strict, bool force = false) {
  CacheReport report;
  fs::create_directories(data / "cache");
  json index = read_cache_index(data);
  json fresh = json::object();
  const Mat fb = feat::mel_filterbank();

  for (const char* split : kSplits) {
    const fs::path m = manifest_path(data, split);
    if (!fs::exists(m)) continue;
    for (const auto& ann : synth::read_manifest(m)) {
      const fs::path wav = wav_path(data, ann.clip_id);
      const fs::path rctf = cache_path(data, ann.clip_id);
      try {
        if (!fs::exists(wav)) {
          throw rct::IoError("missing WAV for clip " + ann.clip_id + ": " + wav.string());
        }
        const std::string wav_hash = hex64(hash_file(wav));
        if (!force && fs::exists(rctf) && index.contains(ann.clip_id) &&
            index.at(ann.clip_id).get<std::string>() == wav_hash) {
          ++report.skipped;
          fresh[ann.clip_id] = wav_hash;
          continue;
        }
        const feat::MelClip clip = feat::extract_melclip(feat::load_wav(wav), fb);
        const fs::path tmp = rctf.string() + ".tmp";
        feat::write_melclip(tmp, clip);
        fs::rename(tmp, rctf);
        fresh[ann.clip_id] = wav_hash;
        ++report.extracted;
      } catch (const rct::Error& e) {
        if (strict) {
          throw rct::IoError("features: clip " + ann.clip_id + ": " + e.what());
        }
        report.failures.emplace_back(ann.clip_id, e.what());
        std::cerr << "features: clip " << ann.clip_id << ": " << e.what() << "\n";
      }
    }
  }
  atomic_write_text(data / "cache" / "index.json", fresh.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// Loading cached features into training structures

feat::MelClip load_cached_clip(const fs::path& data, const std::string& clip_id) {
  const fs::path rctf = cache_path(data, clip_id);
  if (!fs::exists(rctf)) {
    throw rct::IoError("no cached features for clip " + clip_id +
                       "; run the features command first");
  }
  return feat::read_melclip(rctf);
}

struct LoadedData {
  train::TrainData data;
  std::vector<synth::ClipAnnotation> val_gt;  // aligned with data.val
  std::vector<std::string> val_ids;
  int t_out = 0;
};

LoadedData load_train_data(const fs::path& data_dir) {
  LoadedData out;
  out.data.n_classes = read_class_count(data_dir);
  const int C = out.data.n_classes;

  auto load_split = [&](const std::string& split, train::SampleKind kind,
                        std::vector<train::TrainSample>& sink,
                        std::vector<synth::ClipAnnotation>* gt_sink) {
    const fs::path m = manifest_path(data_dir, split);
    if (!fs::exists(m)) return;
    for (const auto& ann : synth::read_manifest(m)) {
      train::TrainSample s;
      s.kind = kind;
      s.clip = load_cached_clip(data_dir, ann.clip_id);
      if (out.t_out == 0) {
        out.t_out = static_cast<int>(s.clip.values.rows()) / rct::model::kTotalTimePool;
      }
      if (kind == train::SampleKind::kStrong) {
        auto labels = synth::labels_from_annotation(ann, out.t_out, C);
        s.weak = std::move(labels.first);
        s.strong = std::move(labels.second);
      } else if (kind == train::SampleKind::kWeak) {
        s.weak = synth::weak_label_of(ann, C);
      }
      sink.push_back(std::move(s));
      if (gt_sink) {
        gt_sink->push_back(ann);
        out.val_ids.push_back(ann.clip_id);
      }
    }
  };

  load_split("strong", train::SampleKind::kStrong, out.data.strong, nullptr);
  load_split("weak", train::SampleKind::kWeak, out.data.weak, nullptr);
  load_split("unlabeled", train::SampleKind::kUnlabeled, out.data.unlabeled, nullptr);
  load_split("val", train::SampleKind::kStrong, out.data.val, &out.val_gt);
  return out;
}

std::vector<fs::path> dataset_input_files(const fs::path& data, bool include_cache) {
  std::vector<fs::path> files;
  for (const char* split : kSplits) {
    const fs::path m = manifest_path(data, split);
    if (fs::exists(m)) files.push_back(m);
  }
  if (fs::exists(data / "dataset.json")) files.push_back(data / "dataset.json");
  if (include_cache && fs::exists(data / "cache")) {
    for (const auto& entry : fs::directory_iterator(data / "cache")) {
      if (entry.path().extension() == ".rctf") files.push_back(entry.path());
    }
  }
  return files;
}

// ---------------------------------------------------------------------------
// Scoring helpers

constexpr double kDefaultTemperature = 2.1;
constexpr double kEventThreshold = 0.5;

rct::model::Predictions<float> scaled_forward(const rct::model::ModelConfig& net,
                                              const rct::model::Tensors<float>& params,
                                              const feat::MelClip& clip, double tau) {
  const rct::MatT<float> mel = clip.values.cast<float>();
  auto preds = rct::model::forward<float>(net, params, mel, nullptr);
  return ev::temperature_scale(preds, static_cast<float>(tau));
}

ev::ScoreSummary score_probs(const std::vector<std::pair<std::string, Mat>>& probs,
                             const std::vector<synth::ClipAnnotation>& gt, int C) {
  const std::vector<int> lengths = ev::median_lengths_from_gt(gt, C);
  ev::ScoreSummary s;
  s.psds1 = ev::psds_score(probs, gt, C, lengths, ev::psds_scenario1());
  s.psds2 = ev::psds_score(probs, gt, C, lengths, ev::psds_scenario2());
  const auto detections =
      ev::decode_dataset(probs, kEventThreshold, rct::aug::kOutFrameSeconds, lengths);
  const ev::F1Report f1 = ev::event_f1(detections, gt, C);
  s.macro_f1 = f1.macro;
  s.f1_per_class = f1.per_class;
  return s;
}

ev::ScoreSummary score_model(const rct::model::ModelConfig& net,
                             const rct::model::Tensors<float>& params, const LoadedData& loaded,
                             double tau) {
  std::vector<std::pair<std::string, Mat>> probs;
  probs.reserve(loaded.data.val.size());
  for (std::size_t i = 0; i < loaded.data.val.size(); ++i) {
    const auto preds = scaled_forward(net, params, loaded.data.val[i].clip, tau);
    probs.emplace_back(loaded.val_ids[i], preds.strong.cast<double>());
  }
  return score_probs(probs, loaded.val_gt, loaded.data.n_classes);
}

void write_cell_scores(const fs::path& dir, const ev::ScoreSummary& s) {
  ev::write_scores_csv(dir / "scores.csv", s);
  ev::write_scores_json(dir / "scores.json", s);
}

// ---------------------------------------------------------------------------
// Reconstructing a model configuration for a checkpoint

struct NetSource {
  train::TrainConfig cfg;
  int n_classes = 0;
};

NetSource net_source_from_run_json(const fs::path& run_json) {
  std::ifstream in(run_json);
  if (!in) throw rct::IoError("cannot open " + run_json.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("config") || !j.at("config").contains("train_config") ||
      !j.at("config").contains("n_classes")) {
    throw rct::ParseError("no training configuration in " + run_json.string());
  }
  NetSource src;
  src.cfg = train::parse_train_config(j.at("config").at("train_config").get<std::string>());
  src.n_classes = j.at("config").at("n_classes").get<int>();
  return src;
}

NetSource resolve_net_source(const fs::path& checkpoint, const std::string& config_file,
                             int classes_flag) {
  if (!config_file.empty()) {
    if (classes_flag < 1) {
      throw rct::ConfigError("--config also needs --classes to rebuild the model");
    }
    NetSource src;
    src.cfg = train::load_train_config(config_file);
    src.n_classes = classes_flag;
    return src;
  }
  const fs::path sibling = checkpoint.parent_path() / "run.json";
  if (fs::exists(sibling)) return net_source_from_run_json(sibling);
  throw rct::ConfigError("no run.json next to " + checkpoint.string() +
                         "; pass --config and --classes instead");
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
  std::string out;
  int classes = 4;
  int n_strong = 60;
  int n_weak = 60;
  int n_unlabeled = 240;
  int n_val = 20;
  int clips = -1;  // when set, default for any split not given explicitly
  int events_min = 1;
  int events_max = 3;
  double snr_db = 6.0;
  double freq_jitter = 0.0;
  std::uint64_t seed = 1;
};

int cmd_gen_data(const GenArgs& args, const std::vector<bool>& split_given) {
  RunTimer timer;
  synth::GenConfig cfg;
  cfg.C = args.classes;
  cfg.n_strong = (args.clips >= 0 && !split_given[0]) ? args.clips : args.n_strong;
  cfg.n_weak = (args.clips >= 0 && !split_given[1]) ? args.clips : args.n_weak;
  cfg.n_unlabeled = (args.clips >= 0 && !split_given[2]) ? args.clips : args.n_unlabeled;
  cfg.n_val = (args.clips >= 0 && !split_given[3]) ? args.clips : args.n_val;
  cfg.events_min = args.events_min;
  cfg.events_max = args.events_max;
  cfg.snr_db = args.snr_db;
  cfg.freq_jitter_semitones = args.freq_jitter;
  cfg.seed = args.seed;

  const fs::path out(args.out);
  fs::create_directories(out / "wav");
  const synth::Dataset ds = synth::gen_dataset(cfg);

  for (std::size_t i = 0; i < ds.annotations.size(); ++i) {
    feat::write_wav(wav_path(out, ds.annotations[i].clip_id), ds.waves[i]);
  }
  for (std::size_t i = 0; i < ds.val_annotations.size(); ++i) {
    feat::write_wav(wav_path(out, ds.val_annotations[i].clip_id),
                    ds.waves[ds.annotations.size() + i]);
  }

  std::vector<std::string> outputs;
  for (const char* split : kSplits) {
    std::vector<synth::ClipAnnotation> subset;
    if (std::string(split) == "val") {
      subset = ds.val_annotations;
    } else {
      for (const auto& ann : ds.annotations) {
        if (ann.split == split) subset.push_back(ann);
      }
    }
    synth::write_manifest(subset, manifest_path(out, split));
    outputs.push_back(std::string(split) + ".jsonl");
  }

  json meta = {{"classes", cfg.C},         {"strong", cfg.n_strong},
               {"weak", cfg.n_weak},       {"unlabeled", cfg.n_unlabeled},
               {"val", cfg.n_val},         {"events_min", cfg.events_min},
               {"events_max", cfg.events_max}, {"snr_db", cfg.snr_db},
               {"freq_jitter_semitones", cfg.freq_jitter_semitones}, {"seed", cfg.seed}};
  atomic_write_text(out / "dataset.json", meta.dump(2) + "\n");
  outputs.push_back("dataset.json");

  write_run_manifest(out, "gen-data", meta, cfg.seed, {}, outputs, timer);
  std::cout << "gen-data: strong " << cfg.n_strong << ", weak " << cfg.n_weak << ", unlabeled "
            << cfg.n_unlabeled << ", val " << cfg.n_val << " -> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// features

int cmd_features(const std::string& data, bool force) {
  RunTimer timer;
  const fs::path dir(data);
  const CacheReport report = ensure_features(dir, /*strict=*/false, force);
  json config = {{"data", data}, {"force", force}};
  std::vector<fs::path> inputs = dataset_input_files(dir, /*include_cache=*/false);
  write_run_manifest(dir / "cache", "features", config, 0, inputs, {"index.json"}, timer);
  std::cout << "features: extracted " << report.extracted << ", skipped " << report.skipped
            << " (cached), failed " << report.failures.size() << "\n";
  return report.failures.empty() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config_file;
  std::string strategy;
  bool desk = false;
  bool no_augmentation = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, warmup_epochs, d_max;
  std::optional<double> lr_max, consistency_max, ema_decay;
};

train::TrainConfig resolve_train_config(const TrainArgs& args) {
  train::TrainConfig cfg = args.desk ? train::desk_config() : train::TrainConfig{};
  if (!args.config_file.empty()) {
    cfg = train::load_train_config(args.config_file);
    if (args.desk) {
      throw rct::ConfigError("--desk and --config are mutually exclusive");
    }
  }
  if (!args.strategy.empty()) cfg.strategy = train::strategy_from_name(args.strategy);
  if (args.seed) cfg.seed = *args.seed;
  if (args.epochs) cfg.epochs = *args.epochs;
  if (args.warmup_epochs) cfg.warmup_epochs = *args.warmup_epochs;
  if (args.d_max) cfg.d_max = *args.d_max;
  if (args.lr_max) cfg.lr_max = *args.lr_max;
  if (args.consistency_max) cfg.consistency_max = *args.consistency_max;
  if (args.ema_decay) cfg.ema_decay = *args.ema_decay;
  if (args.no_augmentation) cfg.augmentation = false;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& args) {
  RunTimer timer;
  const train::TrainConfig cfg = resolve_train_config(args);
  const fs::path data(args.data);
  const fs::path out(args.out);
  fs::create_directories(out);

  const CacheReport cache = ensure_features(data, /*strict=*/true);
  if (cache.extracted > 0) {
    std::cout << "features: extracted " << cache.extracted << " missing cache entries\n";
  }
  const LoadedData loaded = load_train_data(data);

  const int batch = cfg.batch_weak + cfg.batch_strong + cfg.batch_unlabeled;
  const int branches = train::branch_count(cfg);
  std::cout << "data: strong " << loaded.data.strong.size() << ", weak "
            << loaded.data.weak.size() << ", unlabeled " << loaded.data.unlabeled.size()
            << ", val " << loaded.data.val.size() << ", classes " << loaded.data.n_classes
            << "\n";
  std::cout << "strategy " << train::strategy_name(cfg.strategy) << ": " << branches
            << (branches == 1 ? " branch" : " branches") << " per step (batch " << batch
            << " -> " << batch * branches << " forward passes)\n";

  auto epoch_start = std::chrono::steady_clock::now();
  train::EpochHook hook = [&](int epoch, const train::LossReport& last, double val) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    epoch_start = std::chrono::steady_clock::now();
    std::printf("epoch %3d/%d  supervised %.4f  meanteacher %.4f  self_consistency %.4f",
                epoch + 1, cfg.epochs, last.supervised, last.meanteacher,
                last.self_consistency);
    if (std::isfinite(val)) std::printf("  val %.4f", val);
    std::printf("  (%.1fs)\n", secs);
    std::fflush(stdout);
  };

  const train::TrainResult result = train::train(cfg, loaded.data, out, hook);
  if (result.best_epoch >= 0) {
    std::cout << "best validation epoch " << result.best_epoch + 1 << " (bce "
              << fmt_double(*std::min_element(result.val_curve.begin(), result.val_curve.end()))
              << ")\n";
  }

  json config = {{"train_config", train::format_train_config(cfg)},
                 {"n_classes", loaded.data.n_classes},
                 {"data", args.data}};
  write_run_manifest(out, "train", config, cfg.seed, dataset_input_files(data, true),
                     {"metrics.csv", "checkpoint_best.bin", "checkpoint_final.bin"}, timer);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string data;
  std::string manifest;
  std::string out;
  std::string config_file;
  int classes = 0;
  double temperature = kDefaultTemperature;
  bool teacher = false;
};

int cmd_eval(const EvalArgs& args) {
  RunTimer timer;
  if (args.checkpoints.empty()) throw rct::ConfigError("eval: need at least one --checkpoint");
  fs::path data(args.data);
  fs::path manifest = args.manifest.empty() ? fs::path() : fs::path(args.manifest);
  if (manifest.empty()) {
    if (data.empty()) throw rct::ConfigError("eval: pass --data or --manifest");
    manifest = manifest_path(data, "val");
  }
  if (data.empty()) data = manifest.parent_path();
  const fs::path out(args.out);
  fs::create_directories(out);

  // model configuration: every checkpoint must agree
  const NetSource src =
      resolve_net_source(args.checkpoints.front(), args.config_file, args.classes);
  const rct::model::ModelConfig net = train::model_config_for(src.cfg, src.n_classes);
  std::vector<rct::model::Tensors<float>> models;
  for (const std::string& path : args.checkpoints) {
    const NetSource own = resolve_net_source(path, args.config_file, args.classes);
    const rct::model::ModelConfig own_net = train::model_config_for(own.cfg, own.n_classes);
    if (own_net.hash() != net.hash()) {
      throw rct::StateError("eval: checkpoint " + path +
                            " was trained with a different model configuration");
    }
    auto ckpt = rct::model::load_checkpoint<float>(path);
    if (ckpt.config_hash != net.hash()) {
      throw rct::StateError("eval: checkpoint " + path + ": config hash mismatch (expected " +
                            hex64(net.hash()) + ", found " + hex64(ckpt.config_hash) + ")");
    }
    models.push_back(args.teacher ? std::move(ckpt.teacher) : std::move(ckpt.student));
  }

  // ground truth and features
  ensure_features(data, /*strict=*/true);
  const auto gt = synth::read_manifest(manifest);
  if (gt.empty()) throw rct::ConfigError("eval: empty manifest " + manifest.string());
  std::vector<std::pair<std::string, Mat>> probs;
  for (const auto& ann : gt) {
    const feat::MelClip clip = load_cached_clip(data, ann.clip_id);
    std::vector<rct::model::Predictions<float>> preds;
    preds.reserve(models.size());
    for (const auto& params : models) {
      preds.push_back(scaled_forward(net, params, clip, args.temperature));
    }
    const auto combined = ev::ensemble<float>(preds);
    probs.emplace_back(ann.clip_id, combined.strong.cast<double>());
  }

  const ev::ScoreSummary scores = score_probs(probs, gt, src.n_classes);
  write_cell_scores(out, scores);

  std::vector<fs::path> inputs = {manifest};
  for (const auto& c : args.checkpoints) inputs.emplace_back(c);
  json config = {{"checkpoints", args.checkpoints},
                 {"manifest", manifest.string()},
                 {"temperature", args.temperature},
                 {"teacher", args.teacher}};
  write_run_manifest(out, "eval", config, 0, inputs, {"scores.csv", "scores.json"}, timer);
  std::cout << "eval: psds1 " << fmt_double(scores.psds1) << ", psds2 "
            << fmt_double(scores.psds2) << ", macro_f1 " << fmt_double(scores.macro_f1) << " ("
            << gt.size() << " clips, " << models.size()
            << (models.size() == 1 ? " model)" : " models)") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Experiment drivers (ablate, sweep-dmax)

struct CellOutcome {
  ev::ScoreSummary scores;
  double val_bce_final = std::numeric_limits<double>::quiet_NaN();
};

CellOutcome run_cell(const train::TrainConfig& cfg, const LoadedData& loaded,
                     const fs::path& out_dir, double tau) {
  fs::create_directories(out_dir);
  const train::TrainResult result = train::train(cfg, loaded.data, out_dir);
  CellOutcome outcome;
  outcome.scores = score_model(result.net, result.best_student, loaded, tau);
  if (!result.val_curve.empty()) outcome.val_bce_final = result.val_curve.back();
  write_cell_scores(out_dir, outcome.scores);
  return outcome;
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std_dev = std::numeric_limits<double>::quiet_NaN();
};

MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

// Generate a default dataset in place when the caller did not supply one.
fs::path ensure_dataset(const std::string& data_flag, const fs::path& out,
                        std::uint64_t seed) {
  if (!data_flag.empty()) return fs::path(data_flag);
  const fs::path data = out / "data";
  if (!fs::exists(data / "dataset.json")) {
    std::cout << "no --data given; generating a synthetic dataset under " << data.string()
              << "\n";
    GenArgs gen;
    gen.out = data.string();
    gen.seed = seed;
    cmd_gen_data(gen, std::vector<bool>(4, false));
  }
  return data;
}

struct SweepBaseArgs {
  std::string data;
  std::string out;
  std::string config_file;
  bool desk = false;
  int seeds = 3;
  std::uint64_t seed = 1;
  double temperature = kDefaultTemperature;
};

train::TrainConfig resolve_base_config(const SweepBaseArgs& args) {
  if (!args.config_file.empty()) {
    if (args.desk) throw rct::ConfigError("--desk and --config are mutually exclusive");
    return train::load_train_config(args.config_file);
  }
  return args.desk ? train::desk_config() : train::TrainConfig{};
}

int cmd_ablate(const SweepBaseArgs& args) {
  RunTimer timer;
  if (args.seeds < 1) throw rct::ConfigError("ablate: --seeds must be positive");
  const fs::path out(args.out);
  fs::create_directories(out);
  const fs::path data = ensure_dataset(args.data, out, args.seed);
  const train::TrainConfig base = resolve_base_config(args);

  ensure_features(data, /*strict=*/true);
  const LoadedData loaded = load_train_data(data);

  const auto strategies = train::all_strategies();
  struct Cell {
    train::Strategy strategy;
    std::uint64_t seed;
    fs::path dir;
  };
  std::vector<Cell> cells;
  for (train::Strategy s : strategies) {
    for (int k = 0; k < args.seeds; ++k) {
      const std::uint64_t seed = args.seed + static_cast<std::uint64_t>(k);
      cells.push_back({s, seed,
                       out / train::strategy_name(s) / ("seed" + std::to_string(seed))});
    }
  }

  std::vector<CellOutcome> outcomes(cells.size());
  std::mutex print_mutex;
  parallel_for(cells.size(), env_thread_cap(), [&](std::size_t i) {
    train::TrainConfig cfg = base;
    cfg.strategy = cells[i].strategy;
    cfg.seed = cells[i].seed;
    const RunTimer cell_timer;
    outcomes[i] = run_cell(cfg, loaded, cells[i].dir, args.temperature);
    std::lock_guard<std::mutex> lock(print_mutex);
    std::cout << "[ablate] " << train::strategy_name(cells[i].strategy) << " seed "
              << cells[i].seed << ": psds1 " << fmt_double(outcomes[i].scores.psds1)
              << ", event_f1 " << fmt_double(outcomes[i].scores.macro_f1) << " ("
              << static_cast<int>(cell_timer.seconds()) << "s)\n";
  });

  std::ostringstream table;
  table << "strategy,psds1_mean,psds1_std,psds2_mean,psds2_std,event_f1_mean,event_f1_std,"
           "val_bce_mean,val_bce_std\n";
  std::size_t idx = 0;
  for (train::Strategy s : strategies) {
    std::vector<double> psds1, psds2, f1, val;
    for (int k = 0; k < args.seeds; ++k, ++idx) {
      psds1.push_back(outcomes[idx].scores.psds1);
      psds2.push_back(outcomes[idx].scores.psds2);
      f1.push_back(outcomes[idx].scores.macro_f1);
      val.push_back(outcomes[idx].val_bce_final);
    }
    const MeanStd m1 = mean_std(psds1), m2 = mean_std(psds2), mf = mean_std(f1),
                  mv = mean_std(val);
    table << train::strategy_name(s) << ',' << fmt_double(m1.mean) << ','
          << fmt_double(m1.std_dev) << ',' << fmt_double(m2.mean) << ','
          << fmt_double(m2.std_dev) << ',' << fmt_double(mf.mean) << ','
          << fmt_double(mf.std_dev) << ',' << fmt_double(mv.mean) << ','
          << fmt_double(mv.std_dev) << '\n';
  }
  atomic_write_text(out / "table.csv", table.str());

  json config = {{"train_config", train::format_train_config(base)},
                 {"n_classes", loaded.data.n_classes},
                 {"data", data.string()},
                 {"seeds", args.seeds},
                 {"temperature", args.temperature}};
  write_run_manifest(out, "ablate", config, args.seed, dataset_input_files(data, true),
                     {"table.csv"}, timer);
  std::cout << "ablate: wrote " << (out / "table.csv").string() << "\n";
  return 0;
}

std::vector<int> parse_dmax_values(const std::string& text) {
  std::vector<int> values;
  const auto parse_int = [&](const std::string& tok) {
    try {
      std::size_t pos = 0;
      const int v = std::stoi(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw rct::ConfigError("sweep-dmax: bad --values element '" + tok + "'");
    }
  };
  const auto range = text.find("..");
  if (range != std::string::npos) {
    const int lo = parse_int(text.substr(0, range));
    const int hi = parse_int(text.substr(range + 2));
    if (hi < lo) throw rct::ConfigError("sweep-dmax: empty range " + text);
    for (int v = lo; v <= hi; ++v) values.push_back(v);
  } else {
    std::istringstream in(text);
    std::string tok;
    while (std::getline(in, tok, ',')) values.push_back(parse_int(tok));
  }
  if (values.empty()) throw rct::ConfigError("sweep-dmax: no --values given");
  std::set<int> seen;
  for (int v : values) {
    if (v < 1 || v > 9) {
      throw rct::ConfigError("sweep-dmax: values must lie in [1,9], got " + std::to_string(v));
    }
    if (!seen.insert(v).second) {
      throw rct::ConfigError("sweep-dmax: duplicate value " + std::to_string(v));
    }
  }
  return values;
}

int cmd_sweep_dmax(const SweepBaseArgs& args, const std::string& values_text) {
  RunTimer timer;
  if (args.seeds < 1) throw rct::ConfigError("sweep-dmax: --seeds must be positive");
  const std::vector<int> values = parse_dmax_values(values_text);
  const fs::path out(args.out);
  fs::create_directories(out);
  const fs::path data = ensure_dataset(args.data, out, args.seed);
  const train::TrainConfig base = resolve_base_config(args);

  ensure_features(data, /*strict=*/true);
  const LoadedData loaded = load_train_data(data);

  // cell 0..seeds-1: baseline; then seeds cells per swept value
  struct Cell {
    int d_max;  // 0 encodes the baseline strategy
    std::uint64_t seed;
    fs::path dir;
  };
  std::vector<Cell> cells;
  for (int k = 0; k < args.seeds; ++k) {
    const std::uint64_t seed = args.seed + static_cast<std::uint64_t>(k);
    cells.push_back({0, seed, out / "baseline" / ("seed" + std::to_string(seed))});
  }
  for (int v : values) {
    for (int k = 0; k < args.seeds; ++k) {
      const std::uint64_t seed = args.seed + static_cast<std::uint64_t>(k);
      cells.push_back(
          {v, seed, out / ("d" + std::to_string(v)) / ("seed" + std::to_string(seed))});
    }
  }

  std::vector<CellOutcome> outcomes(cells.size());
  std::mutex print_mutex;
  parallel_for(cells.size(), env_thread_cap(), [&](std::size_t i) {
    train::TrainConfig cfg = base;
    if (cells[i].d_max == 0) {
      cfg.strategy = train::Strategy::kBaseline;
    } else {
      cfg.strategy = train::Strategy::kRandWarp;
      cfg.d_max = cells[i].d_max;
    }
    cfg.seed = cells[i].seed;
    const RunTimer cell_timer;
    outcomes[i] = run_cell(cfg, loaded, cells[i].dir, args.temperature);
    std::lock_guard<std::mutex> lock(print_mutex);
    std::cout << "[sweep-dmax] "
              << (cells[i].d_max == 0 ? std::string("baseline")
                                      : "d_max " + std::to_string(cells[i].d_max))
              << " seed " << cells[i].seed << ": psds1 "
              << fmt_double(outcomes[i].scores.psds1) << " ("
              << static_cast<int>(cell_timer.seconds()) << "s)\n";
  });

  std::vector<double> baseline(static_cast<std::size_t>(args.seeds));
  for (int k = 0; k < args.seeds; ++k) baseline[static_cast<std::size_t>(k)] =
      outcomes[static_cast<std::size_t>(k)].scores.psds1;

  // per-seed relative gain against the same-seed baseline; equal scores gain 0
  const auto gain_of = [](double score, double base) {
    if (score == base) return 0.0;
    return (score - base) / base;
  };
  bool warned_zero_base = false;

  std::ostringstream sweep;
  sweep << "d_max,psds1_mean,psds1_std,gain_mean,gain_std\n";
  const auto emit_row = [&](int d, std::size_t first_cell) {
    std::vector<double> scores, gains;
    for (int k = 0; k < args.seeds; ++k) {
      const double s = outcomes[first_cell + static_cast<std::size_t>(k)].scores.psds1;
      const double b = baseline[static_cast<std::size_t>(k)];
      scores.push_back(s);
      if (b == 0.0 && s != b && !warned_zero_base) {
        std::cerr << "warning: baseline psds1 is zero; relative gains are undefined\n";
        warned_zero_base = true;
      }
      gains.push_back(gain_of(s, b));
    }
    const MeanStd ms = mean_std(scores), mg = mean_std(gains);
    sweep << d << ',' << fmt_double(ms.mean) << ',' << fmt_double(ms.std_dev) << ','
          << fmt_double(mg.mean) << ',' << fmt_double(mg.std_dev) << '\n';
  };
  emit_row(0, 0);
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    emit_row(values[vi], (vi + 1) * static_cast<std::size_t>(args.seeds));
  }
  atomic_write_text(out / "sweep.csv", sweep.str());

  json config = {{"train_config", train::format_train_config(base)},
                 {"n_classes", loaded.data.n_classes},
                 {"data", data.string()},
                 {"seeds", args.seeds},
                 {"values", values},
                 {"temperature", args.temperature}};
  write_run_manifest(out, "sweep-dmax", config, args.seed, dataset_input_files(data, true),
                     {"sweep.csv"}, timer);
  std::cout << "sweep-dmax: wrote " << (out / "sweep.csv").string() << "\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"semi-supervised sound event detection toolkit"};
  app.require_subcommand(1);

  // gen-data
  GenArgs gen;
  auto* sub_gen = app.add_subcommand("gen-data", "synthesize a labelled clip dataset");
  sub_gen->add_option("--out", gen.out, "output dataset directory")->required();
  sub_gen->add_option("--classes", gen.classes, "number of event classes");
  auto* opt_strong = sub_gen->add_option("--strong", gen.n_strong, "strongly labelled clips");
  auto* opt_weak = sub_gen->add_option("--weak", gen.n_weak, "weakly labelled clips");
  auto* opt_unlab = sub_gen->add_option("--unlabeled", gen.n_unlabeled, "unlabeled clips");
  auto* opt_val = sub_gen->add_option("--val", gen.n_val, "validation clips");
  sub_gen->add_option("--clips", gen.clips,
                      "clip count applied to every split not set explicitly");
  sub_gen->add_option("--events-min", gen.events_min, "minimum events per clip");
  sub_gen->add_option("--events-max", gen.events_max, "maximum events per clip");
  sub_gen->add_option("--snr-db", gen.snr_db, "event level over background, dB");
  sub_gen->add_option("--freq-jitter", gen.freq_jitter,
                      "per-event pitch spread within a class, semitones");
  sub_gen->add_option("--seed", gen.seed, "generation seed");

  // features
  std::string feat_data;
  bool feat_force = false;
  auto* sub_feat = app.add_subcommand("features", "extract or refresh the feature cache");
  sub_feat->add_option("--data", feat_data, "dataset directory")->required();
  sub_feat->add_flag("--force", feat_force, "re-extract even when cached");

  // train
  TrainArgs tr;
  auto* sub_train = app.add_subcommand("train", "train one model");
  sub_train->add_option("--data", tr.data, "dataset directory")->required();
  sub_train->add_option("--out", tr.out, "run output directory")->required();
  sub_train->add_option("--config", tr.config_file, "key=value training configuration file");
  sub_train->add_option("--strategy", tr.strategy,
                        "baseline, vanilla-mixup, hard-mixup, randwarp, rct, ict, sct, ict-sct");
  sub_train->add_flag("--desk", tr.desk, "start from the small-machine configuration");
  sub_train->add_flag("--no-augmentation", tr.no_augmentation, "train on the plain branch only");
  std::uint64_t tr_seed = 0;
  auto* opt_tr_seed = sub_train->add_option("--seed", tr_seed, "training seed");
  int tr_epochs = 0, tr_warmup = 0, tr_dmax = 0;
  double tr_lr = 0, tr_cons = 0, tr_ema = 0;
  auto* opt_tr_epochs = sub_train->add_option("--epochs", tr_epochs, "training epochs");
  auto* opt_tr_warmup = sub_train->add_option("--warmup-epochs", tr_warmup, "warmup epochs");
  auto* opt_tr_dmax = sub_train->add_option("--d-max", tr_dmax, "maximum warp magnitude");
  auto* opt_tr_lr = sub_train->add_option("--lr-max", tr_lr, "peak learning rate");
  auto* opt_tr_cons =
      sub_train->add_option("--consistency-max", tr_cons, "peak consistency weight");
  auto* opt_tr_ema = sub_train->add_option("--ema-decay", tr_ema, "teacher EMA decay");

  // eval
  EvalArgs evl;
  auto* sub_eval = app.add_subcommand("eval", "score checkpoints on annotated clips");
  sub_eval->add_option("--checkpoint", evl.checkpoints, "checkpoint file (repeat to ensemble)")
      ->required();
  sub_eval->add_option("--ensemble", evl.checkpoints,
                       "additional checkpoints averaged into the ensemble");
  sub_eval->add_option("--data", evl.data, "dataset directory");
  sub_eval->add_option("--manifest", evl.manifest,
                       "annotated manifest (default <data>/val.jsonl)");
  sub_eval->add_option("--out", evl.out, "output directory")->required();
  sub_eval->add_option("--temperature", evl.temperature, "logit temperature");
  sub_eval->add_flag("--teacher", evl.teacher, "score the teacher weights");
  sub_eval->add_option("--config", evl.config_file,
                       "training configuration when no run.json sits next to a checkpoint");
  sub_eval->add_option("--classes", evl.classes, "class count, required with --config");

  // ablate
  SweepBaseArgs abl;
  auto* sub_abl = app.add_subcommand("ablate", "train every strategy over several seeds");
  sub_abl->add_option("--data", abl.data, "dataset directory (generated when omitted)");
  sub_abl->add_option("--out", abl.out, "output directory")->required();
  sub_abl->add_option("--config", abl.config_file, "key=value training configuration file");
  sub_abl->add_flag("--desk", abl.desk, "use the small-machine configuration");
  sub_abl->add_option("--seeds", abl.seeds, "seeds per strategy");
  sub_abl->add_option("--seed", abl.seed, "first seed");
  sub_abl->add_option("--temperature", abl.temperature, "scoring temperature");

  // sweep-dmax
  SweepBaseArgs swp;
  std::string swp_values = "1..9";
  auto* sub_swp =
      app.add_subcommand("sweep-dmax", "sweep the warp magnitude for the randwarp strategy");
  sub_swp->add_option("--data", swp.data, "dataset directory (generated when omitted)");
  sub_swp->add_option("--out", swp.out, "output directory")->required();
  sub_swp->add_option("--config", swp.config_file, "key=value training configuration file");
  sub_swp->add_flag("--desk", swp.desk, "use the small-machine configuration");
  sub_swp->add_option("--seeds", swp.seeds, "seeds per value");
  sub_swp->add_option("--seed", swp.seed, "first seed");
  sub_swp->add_option("--values", swp_values, "magnitudes, e.g. 1..9 or 1,3,5");
  sub_swp->add_option("--temperature", swp.temperature, "scoring temperature");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sub_gen) {
      const std::vector<bool> split_given = {opt_strong->count() > 0, opt_weak->count() > 0,
                                             opt_unlab->count() > 0, opt_val->count() > 0};
      return cmd_gen_data(gen, split_given);
    }
    if (*sub_feat) return cmd_features(feat_data, feat_force);
    if (*sub_train) {
      if (opt_tr_seed->count()) tr.seed = tr_seed;
      if (opt_tr_epochs->count()) tr.epochs = tr_epochs;
      if (opt_tr_warmup->count()) tr.warmup_epochs = tr_warmup;
      if (opt_tr_dmax->count()) tr.d_max = tr_dmax;
      if (opt_tr_lr->count()) tr.lr_max = tr_lr;
      if (opt_tr_cons->count()) tr.consistency_max = tr_cons;
      if (opt_tr_ema->count()) tr.ema_decay = tr_ema;
      return cmd_train(tr);
    }
    if (*sub_eval) return cmd_eval(evl);
    if (*sub_abl) return cmd_ablate(abl);
    if (*sub_swp) return cmd_sweep_dmax(swp, swp_values);
  } catch (const rct::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
