// Reproducible synthetic polyphonic sound-event data: five event archetypes
// with well-separated spectral signatures, rendered over white background
// noise, with exact annotations and JSONL manifests.
#pragma once

#include <rct/core.hpp>
#include <rct/features.hpp>
#include <rct/rng.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace rct::synth {

enum class Archetype { kTone, kHarmonicTone, kNoiseBand, kChirp, kAmNoise };

inline const char* archetype_name(Archetype a) {
  switch (a) {
    case Archetype::kTone: return "tone";
    case Archetype::kHarmonicTone: return "harmonic-tone";
    case Archetype::kNoiseBand: return "noise-band";
    case Archetype::kChirp: return "chirp";
    case Archetype::kAmNoise: return "am-noise";
  }
  throw DomainError("archetype_name: bad enum");
}

struct EventClass {
  int id = 0;
  Archetype archetype = Archetype::kTone;
  double freq_lo = 0.0;   // spectral support in Hz, within (0, 8000)
  double freq_hi = 0.0;
  double am_rate = 6.0;   // Hz, am-noise only
  double dur_min = 0.5;   // seconds; events never shorter than 0.5 s
  double dur_max = 2.5;
};

struct Event {
  int class_id = 0;
  double onset = 0.0;   // seconds
  double offset = 0.0;  // seconds, onset < offset <= 10
};

struct ClipAnnotation {
  std::string clip_id;
  std::string split;  // "weak" | "strong" | "unlabeled"
  std::vector<Event> events;

  std::set<int> classes() const {
    std::set<int> s;
    for (const auto& e : events) s.insert(e.class_id);
    return s;
  }
};

// C classes over log-spaced disjoint frequency regions in [200, 7800] Hz,
// cycling through the archetypes.
inline std::vector<EventClass> make_default_classes(int C) {
  if (C < 2) throw ConfigError("make_default_classes: need C >= 2");
  std::vector<EventClass> classes(C);
  const double lo = 200.0, hi = 7800.0;
  const double ratio = std::pow(hi / lo, 1.0 / C);
  const double margin = std::pow(ratio, 0.12);  // gap between adjacent regions
  static constexpr double kDur[5][2] = {
      {0.5, 2.5}, {0.8, 3.0}, {0.6, 2.0}, {1.0, 3.0}, {0.5, 1.5}};
  for (int c = 0; c < C; ++c) {
    EventClass ec;
    ec.id = c;
    ec.archetype = static_cast<Archetype>(c % 5);
    ec.freq_lo = lo * std::pow(ratio, c) * margin;
    ec.freq_hi = lo * std::pow(ratio, c + 1) / margin;
    ec.am_rate = 4.0 + 2.0 * (c % 3);
    ec.dur_min = kDur[c % 5][0];
    ec.dur_max = kDur[c % 5][1];
    classes[c] = ec;
  }
  return classes;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline constexpr double kEventPeak = 0.3;
inline constexpr double kRampSeconds = 0.010;
inline constexpr int kNoiseComponents = 40;

// cosine on/off ramps to avoid clicks
inline double envelope(int i, int n, int ramp) {
  if (i < ramp) return 0.5 - 0.5 * std::cos(M_PI * static_cast<double>(i) / ramp);
  if (i >= n - ramp) return 0.5 - 0.5 * std::cos(M_PI * static_cast<double>(n - 1 - i) / ramp);
  return 1.0;
}

inline void render_event(std::vector<double>& clip, const EventClass& ec, const Event& ev,
                         Rng& rng, double jitter_semitones) {
  const int sr = features::kSampleRate;
  const int start = static_cast<int>(std::lround(ev.onset * sr));
  const int n = static_cast<int>(std::lround((ev.offset - ev.onset) * sr));
  const int ramp = std::min(static_cast<int>(kRampSeconds * sr), n / 2);
  // Per-event pitch variability: scale the class's spectral support by a random
  // factor. Zero jitter leaves the random stream untouched.
  const double jf = jitter_semitones > 0.0
                        ? std::pow(2.0, rng.uniform(-jitter_semitones, jitter_semitones) / 12.0)
                        : 1.0;
  const double f_lo = std::min(ec.freq_lo * jf, 7900.0);
  const double f_hi = std::min(ec.freq_hi * jf, 7900.0);
  const double fc = std::sqrt(f_lo * f_hi);

  std::vector<double> freqs, phases, amps;
  switch (ec.archetype) {
    case Archetype::kTone:
      freqs = {fc};
      amps = {kEventPeak};
      break;
    case Archetype::kHarmonicTone: {
      const double f0 = f_lo * 1.05;
      freqs = {f0, std::min(2.0 * f0, f_hi)};
      amps = {kEventPeak * 0.8, kEventPeak * 0.4};
      break;
    }
    case Archetype::kNoiseBand:
    case Archetype::kAmNoise: {
      const double a = kEventPeak / std::sqrt(static_cast<double>(kNoiseComponents));
      for (int k = 0; k < kNoiseComponents; ++k) {
        freqs.push_back(rng.uniform(f_lo, f_hi));
        amps.push_back(a);
      }
      break;
    }
    case Archetype::kChirp:
      break;  // handled below, phase is nonlinear in t
  }
  phases.resize(freqs.size());
  for (auto& p : phases) p = rng.uniform(0.0, 2.0 * M_PI);

  for (int i = 0; i < n; ++i) {
    const int idx = start + i;
    if (idx < 0 || idx >= static_cast<int>(clip.size())) continue;
    const double t = static_cast<double>(i) / sr;
    double s = 0.0;
    if (ec.archetype == Archetype::kChirp) {
      const double dur = static_cast<double>(n) / sr;
      const double phase = 2.0 * M_PI * (f_lo * t + (f_hi - f_lo) / (2.0 * dur) * t * t);
      s = kEventPeak * std::sin(phase);
    } else {
      for (size_t k = 0; k < freqs.size(); ++k) {
        s += amps[k] * std::sin(2.0 * M_PI * freqs[k] * t + phases[k]);
      }
      if (ec.archetype == Archetype::kAmNoise) {
        s *= 0.55 + 0.45 * std::sin(2.0 * M_PI * ec.am_rate * t);
      }
    }
    clip[idx] += s * envelope(i, n, ramp);
  }
}

}  // namespace detail

struct GenConfig {
  int C = 4;
  int n_strong = 0;
  int n_weak = 0;
  int n_unlabeled = 0;
  int n_val = 0;  // extra strongly-annotated clips for validation
  int events_min = 1;
  int events_max = 3;
  double snr_db = 6.0;             // event RMS over background RMS
  double freq_jitter_semitones = 0.0;  // per-event pitch spread within a class
  uint64_t seed = 0;
};

struct Dataset {
  std::vector<EventClass> classes;
  std::vector<features::Waveform> waves;        // aligned with annotations
  std::vector<ClipAnnotation> annotations;
  std::vector<ClipAnnotation> val_annotations;  // tail of waves, after the others
};

// Pure function of cfg: clip i is rendered from sub-seed seed ^ hash(clip_id),
// so the result does not depend on generation order.
inline Dataset gen_dataset(const GenConfig& cfg) {
  if (cfg.C < 2) throw ConfigError("gen_dataset: need C >= 2");
  if (cfg.n_strong < 0 || cfg.n_weak < 0 || cfg.n_unlabeled < 0 || cfg.n_val < 0) {
    throw ConfigError("gen_dataset: negative split count");
  }
  if (cfg.events_min < 0 || cfg.events_max < cfg.events_min) {
    throw ConfigError("gen_dataset: bad events-per-clip range");
  }
  if (cfg.freq_jitter_semitones < 0.0 || cfg.freq_jitter_semitones > 12.0) {
    throw ConfigError("gen_dataset: freq jitter must be in [0, 12] semitones");
  }
  Dataset ds;
  ds.classes = make_default_classes(cfg.C);
  for (const auto& ec : ds.classes) {
    if (ec.dur_min > 10.0) throw ConfigError("gen_dataset: event min duration exceeds clip");
  }

  const double event_rms = detail::kEventPeak / std::sqrt(2.0);
  const double noise_std = event_rms * std::pow(10.0, -cfg.snr_db / 20.0);

  auto add_clip = [&](const std::string& split, int index, std::vector<ClipAnnotation>& sink) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%04d", split == "val" ? "val" : split.c_str(), index);
    ClipAnnotation ann;
    ann.clip_id = buf;
    ann.split = split == "val" ? "strong" : split;
    Rng rng(cfg.seed ^ fnv1a64(ann.clip_id));

    std::vector<double> clip(features::kClipSamples, 0.0);
    for (auto& s : clip) s = noise_std * rng.normal();

    // Annotations are drawn before any rendering, so rendering knobs (jitter)
    // never disturb the event layout a seed produces.
    const int n_events = static_cast<int>(rng.uniform_int(cfg.events_min, cfg.events_max));
    for (int e = 0; e < n_events; ++e) {
      const auto& ec = ds.classes[static_cast<size_t>(rng.uniform_int(0, cfg.C - 1))];
      const double dur = rng.uniform(ec.dur_min, std::min(ec.dur_max, 10.0));
      const double onset = rng.uniform(0.0, 10.0 - dur);
      ann.events.push_back(Event{ec.id, onset, onset + dur});
    }
    for (const Event& ev : ann.events) {
      detail::render_event(clip, ds.classes[static_cast<size_t>(ev.class_id)], ev, rng,
                           cfg.freq_jitter_semitones);
    }
    std::sort(ann.events.begin(), ann.events.end(), [](const Event& a, const Event& b) {
      return a.onset != b.onset ? a.onset < b.onset
                                : (a.class_id != b.class_id ? a.class_id < b.class_id
                                                            : a.offset < b.offset);
    });

    features::Waveform w;
    w.samples.resize(clip.size());
    for (size_t i = 0; i < clip.size(); ++i) w.samples[i] = std::clamp(clip[i], -1.0, 1.0);
    ds.waves.push_back(std::move(w));
    sink.push_back(std::move(ann));
  };

  for (int i = 0; i < cfg.n_weak; ++i) add_clip("weak", i, ds.annotations);
  for (int i = 0; i < cfg.n_strong; ++i) add_clip("strong", i, ds.annotations);
  for (int i = 0; i < cfg.n_unlabeled; ++i) add_clip("unlabeled", i, ds.annotations);
  for (int i = 0; i < cfg.n_val; ++i) add_clip("val", i, ds.val_annotations);
  return ds;
}

// ---------------------------------------------------------------------------
// Manifests: JSON lines, one clip per line. Strong records carry timed
// events; weak records only the deduplicated class set; unlabeled records
// neither.

inline void write_manifest(const std::vector<ClipAnnotation>& annotations,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_manifest: cannot open " + path.string());
  for (const auto& ann : annotations) {
    nlohmann::json j;
    j["clip_id"] = ann.clip_id;
    j["split"] = ann.split;
    if (ann.split == "strong") {
      nlohmann::json events = nlohmann::json::array();
      for (const auto& e : ann.events) {
        events.push_back({{"class", e.class_id}, {"onset", e.onset}, {"offset", e.offset}});
      }
      j["events"] = events;
    } else if (ann.split == "weak") {
      j["classes"] = ann.classes();
    } else if (ann.split != "unlabeled") {
      throw DomainError("write_manifest: unknown split " + ann.split);
    }
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write_manifest: write failed for " + path.string());
}

inline std::vector<ClipAnnotation> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_manifest: cannot open " + path.string());
  std::vector<ClipAnnotation> annotations;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError("read_manifest: bad JSON at " + where);
    ClipAnnotation ann;
    try {
      ann.clip_id = j.at("clip_id").get<std::string>();
      ann.split = j.at("split").get<std::string>();
      if (ann.split == "strong") {
        for (const auto& e : j.at("events")) {
          ann.events.push_back({e.at("class").get<int>(), e.at("onset").get<double>(),
                                e.at("offset").get<double>()});
        }
      } else if (ann.split == "weak") {
        for (int c : j.at("classes")) ann.events.push_back({c, 0.0, 0.0});
      } else if (ann.split != "unlabeled") {
        throw ParseError("read_manifest: unknown split at " + where);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("read_manifest: " + std::string(e.what()) + " at " + where);
    }
    annotations.push_back(std::move(ann));
  }
  return annotations;
}

// ---------------------------------------------------------------------------
// Frame labels

// A prediction frame covers out_frame_seconds of audio; frame t is active
// for class c if some class-c event covers at least half the frame.
inline constexpr double kOutFrameSeconds = 0.064;

inline std::pair<Vec, Mat> labels_from_annotation(const ClipAnnotation& ann, int t_out, int C,
                                                  double out_frame_seconds = kOutFrameSeconds) {
  Mat strong = Mat::Zero(t_out, C);
  for (const auto& e : ann.events) {
    if (e.class_id < 0 || e.class_id >= C) throw DomainError("labels_from_annotation: class id");
    for (int t = 0; t < t_out; ++t) {
      const double f0 = t * out_frame_seconds;
      const double f1 = f0 + out_frame_seconds;
      const double overlap = std::min(e.offset, f1) - std::max(e.onset, f0);
      if (overlap >= 0.5 * out_frame_seconds) strong(t, e.class_id) = 1.0;
    }
  }
  Vec weak = strong.colwise().maxCoeff().transpose();
  return {weak, strong};
}

// Weak presence vector straight from the annotation (no frame grid).
inline Vec weak_label_of(const ClipAnnotation& ann, int C) {
  Vec weak = Vec::Zero(C);
  for (const auto& e : ann.events) {
    if (e.class_id < 0 || e.class_id >= C) throw DomainError("weak_label_of: class id");
    weak[e.class_id] = 1.0;
  }
  return weak;
}

// Circularly shifts events by shift_seconds modulo the labeled period
// (t_out frames of out_frame_seconds), splitting events that wrap. Events
// are first clipped to the labeled period; frame overlaps beyond it never
// influence labels, so labels commute exactly with whole-frame shifts.
inline std::vector<Event> shift_events(const std::vector<Event>& events, double shift_seconds,
                                       double period) {
  std::vector<Event> out;
  for (const auto& e : events) {
    const double onset = std::max(0.0, e.onset);
    const double offset = std::min(period, e.offset);
    if (offset <= onset) continue;
    double a = std::fmod(onset + shift_seconds, period);
    if (a < 0) a += period;
    const double len = offset - onset;
    if (a + len <= period) {
      out.push_back({e.class_id, a, a + len});
    } else {
      out.push_back({e.class_id, a, period});
      out.push_back({e.class_id, 0.0, a + len - period});
    }
  }
  return out;
}

}  // namespace rct::synth
