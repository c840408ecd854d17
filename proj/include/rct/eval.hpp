#pragma once
// Inference post-processing and scoring: temperature scaling of retained
// logits, per-class median smoothing, event decoding, intersection-based
// PSDS-style scoring, collar-based event F1, and model ensembling.

#include <rct/augment.hpp>
#include <rct/core.hpp>
#include <rct/features.hpp>
#include <rct/model.hpp>
#include <rct/synthdata.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace rct::eval {

using synth::ClipAnnotation;
using synth::Event;

inline constexpr double kClipSeconds =
    static_cast<double>(features::kClipSamples) / features::kSampleRate;

// ---------------------------------------------------------------------------
// Temperature scaling and ensembling

// Recomputes probabilities from logits divided by tau: sigmoid for the
// strong head, per-class softmax over time for attention, and the
// attention-pooled weak head from the rescaled pieces. Logit fields are
// passed through unscaled so repeated calls stay relative to the raw heads.
template <typename R>
model::Predictions<R> temperature_scale(const model::Predictions<R>& p, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature_scale: tau must be positive");
  if (p.strong_logits.size() == 0 || p.att_logits.size() == 0) {
    throw StateError("temperature_scale: predictions carry no logits");
  }
  model::Predictions<R> out;
  out.strong_logits = p.strong_logits;
  out.att_logits = p.att_logits;
  const R inv = static_cast<R>(1.0 / tau);
  out.strong = ((-(p.strong_logits.array() * inv)).exp() + R(1)).inverse().matrix();
  out.att.resize(p.att_logits.rows(), p.att_logits.cols());
  for (Eigen::Index c = 0; c < p.att_logits.cols(); ++c) {
    const VecT<R> scaled = p.att_logits.col(c) * inv;
    const R mx = scaled.maxCoeff();
    VecT<R> e = (scaled.array() - mx).exp();
    out.att.col(c) = e / e.sum();
  }
  out.weak = (out.att.cwiseProduct(out.strong)).colwise().sum().transpose();
  return out;
}

// Element-wise arithmetic mean over models, field by field.
template <typename R>
model::Predictions<R> ensemble(const std::vector<model::Predictions<R>>& preds) {
  if (preds.empty()) throw ConfigError("ensemble: no predictions");
  model::Predictions<R> out = preds[0];
  for (std::size_t i = 1; i < preds.size(); ++i) {
    const auto& p = preds[i];
    if (p.weak.size() != out.weak.size() || p.strong.rows() != out.strong.rows() ||
        p.strong.cols() != out.strong.cols() || p.att.rows() != out.att.rows() ||
        p.strong_logits.rows() != out.strong_logits.rows()) {
      throw ShapeError("ensemble: prediction shape mismatch");
    }
    out.strong += p.strong;
    out.strong_logits += p.strong_logits;
    out.att += p.att;
    out.att_logits += p.att_logits;
    out.weak += p.weak;
  }
  const R inv = static_cast<R>(1.0 / static_cast<double>(preds.size()));
  out.strong *= inv;
  out.strong_logits *= inv;
  out.att *= inv;
  out.att_logits *= inv;
  out.weak *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Median smoothing

// Filter length from the mean class event duration: round(0.55 * avg/frame),
// bumped to the next odd integer, at least 1.
inline int median_length(double avg_duration_s, double frame_s) {
  if (avg_duration_s < 0.0 || !(frame_s > 0.0)) {
    throw DomainError("median_length: durations must be positive");
  }
  long len = std::lround(0.55 * avg_duration_s / frame_s);
  if (len < 1) len = 1;
  if (len % 2 == 0) len += 1;
  return static_cast<int>(len);
}

// Per-class filter lengths derived from ground-truth mean durations; classes
// without events fall back to length 1 (no smoothing).
inline std::vector<int> median_lengths_from_gt(const std::vector<ClipAnnotation>& gt, int C,
                                               double frame_s = aug::kOutFrameSeconds) {
  if (C < 1) throw ConfigError("median_lengths_from_gt: C must be positive");
  std::vector<double> total(static_cast<std::size_t>(C), 0.0);
  std::vector<int> count(static_cast<std::size_t>(C), 0);
  for (const auto& ann : gt) {
    for (const auto& e : ann.events) {
      if (e.class_id < 0 || e.class_id >= C) throw DomainError("median_lengths_from_gt: class id");
      total[static_cast<std::size_t>(e.class_id)] += e.offset - e.onset;
      count[static_cast<std::size_t>(e.class_id)] += 1;
    }
  }
  std::vector<int> lengths(static_cast<std::size_t>(C), 1);
  for (int c = 0; c < C; ++c) {
    if (count[static_cast<std::size_t>(c)] > 0) {
      lengths[static_cast<std::size_t>(c)] =
          median_length(total[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)],
                        frame_s);
    }
  }
  return lengths;
}

// Per-class 1-D median over a binary decision matrix with edge replication.
// Lengths must be odd so the center is well defined; explicit length
// overrides are taken verbatim, so an even override fails here.
inline Mat median_filter(const Mat& binary, const std::vector<int>& lengths) {
  const Eigen::Index T = binary.rows(), C = binary.cols();
  if (lengths.size() != static_cast<std::size_t>(C)) {
    throw ShapeError("median_filter: one length per class required");
  }
  for (int len : lengths) {
    if (len < 1) throw ConfigError("median_filter: length must be positive");
    if (len % 2 == 0) throw ConfigError("median_filter: length must be odd");
  }
  for (Eigen::Index i = 0; i < binary.size(); ++i) {
    const double v = binary.data()[i];
    if (v != 0.0 && v != 1.0) throw DomainError("median_filter: input must be binary");
  }
  Mat out(T, C);
  for (Eigen::Index c = 0; c < C; ++c) {
    const int len = lengths[static_cast<std::size_t>(c)];
    const int half = len / 2;
    for (Eigen::Index t = 0; t < T; ++t) {
      int ones = 0;
      for (int k = -half; k <= half; ++k) {
        const Eigen::Index idx = std::clamp<Eigen::Index>(t + k, 0, T - 1);
        ones += binary(idx, c) != 0.0 ? 1 : 0;
      }
      out(t, c) = 2 * ones > len ? 1.0 : 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Event decoding

// Binarize at the threshold, smooth per class, then emit each maximal run of
// ones as one event: onset = start*frame, offset = (end+1)*frame. Events are
// ordered by (class, onset).
inline std::vector<Event> decode_events(const Mat& strong_probs, double threshold, double frame_s,
                                        const std::vector<int>& lengths) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("decode_events: threshold must be in (0,1)");
  }
  if (!(frame_s > 0.0)) throw ConfigError("decode_events: frame duration must be positive");
  const Mat binary =
      median_filter((strong_probs.array() > threshold).cast<double>().matrix(), lengths);
  std::vector<Event> events;
  for (Eigen::Index c = 0; c < binary.cols(); ++c) {
    Eigen::Index t = 0;
    while (t < binary.rows()) {
      if (binary(t, c) == 0.0) {
        ++t;
        continue;
      }
      Eigen::Index end = t;
      while (end + 1 < binary.rows() && binary(end + 1, c) != 0.0) ++end;
      events.push_back({static_cast<int>(c), static_cast<double>(t) * frame_s,
                        static_cast<double>(end + 1) * frame_s});
      t = end + 1;
    }
  }
  return events;
}

inline std::vector<ClipAnnotation> decode_dataset(
    const std::vector<std::pair<std::string, Mat>>& probs, double threshold, double frame_s,
    const std::vector<int>& lengths) {
  std::vector<ClipAnnotation> out;
  out.reserve(probs.size());
  for (const auto& [clip_id, strong] : probs) {
    ClipAnnotation ann;
    ann.clip_id = clip_id;
    ann.split = "strong";
    ann.events = decode_events(strong, threshold, frame_s, lengths);
    out.push_back(std::move(ann));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Intersection matching

// Aggregated detection outcomes at one operating point.
struct MatchCounts {
  std::vector<int> tp;    // ground-truth events detected, per class
  std::vector<int> fp;    // detections that support no detected event
  std::vector<int> ct;    // cross-triggers: FP detections riding other-class events
  std::vector<int> n_gt;  // ground-truth event count per class
};

namespace detail {

inline double overlap(const Event& a, const Event& b) {
  return std::max(0.0, std::min(a.offset, b.offset) - std::max(a.onset, b.onset));
}

inline void validate_events(const std::vector<ClipAnnotation>& clips, int C, const char* what) {
  for (const auto& ann : clips) {
    for (const auto& e : ann.events) {
      if (e.class_id < 0 || e.class_id >= C) {
        throw DomainError(std::string(what) + ": class id out of range in " + ann.clip_id);
      }
      if (!(e.onset < e.offset) || e.onset < 0.0 || e.offset > kClipSeconds + 1e-9) {
        throw DomainError(std::string(what) + ": bad event interval in " + ann.clip_id);
      }
    }
  }
}

inline std::map<std::string, const ClipAnnotation*> index_clips(
    const std::vector<ClipAnnotation>& clips, const char* what) {
  std::map<std::string, const ClipAnnotation*> by_id;
  for (const auto& ann : clips) {
    if (!by_id.emplace(ann.clip_id, &ann).second) {
      throw StateError(std::string(what) + ": duplicate clip_id " + ann.clip_id);
    }
  }
  return by_id;
}

}  // namespace detail

// Counts detection outcomes under intersection criteria. A detection
// satisfies the detection-tolerance test when its class-matched overlap
// covers at least dtc of its own duration; a ground-truth event is detected
// (one TP) when such detections jointly cover at least gtc of it. Detections
// that pass neither test, or support only undetected events, are FPs; an FP
// whose overlap with another class's events reaches cttc of its duration
// also counts one cross-trigger per such class.
inline MatchCounts intersection_match(const std::vector<ClipAnnotation>& detections,
                                      const std::vector<ClipAnnotation>& ground_truth, int C,
                                      double dtc, double gtc, double cttc = 1.0) {
  if (C < 1) throw ConfigError("intersection_match: C must be positive");
  for (double ratio : {dtc, gtc, cttc}) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
      throw ConfigError("intersection_match: ratios must be in (0,1]");
    }
  }
  detail::validate_events(detections, C, "intersection_match detections");
  detail::validate_events(ground_truth, C, "intersection_match ground truth");
  auto det_by_id = detail::index_clips(detections, "intersection_match detections");
  auto gt_by_id = detail::index_clips(ground_truth, "intersection_match ground truth");

  MatchCounts counts;
  counts.tp.assign(static_cast<std::size_t>(C), 0);
  counts.fp.assign(static_cast<std::size_t>(C), 0);
  counts.ct.assign(static_cast<std::size_t>(C), 0);
  counts.n_gt.assign(static_cast<std::size_t>(C), 0);
  for (const auto& ann : ground_truth) {
    for (const auto& e : ann.events) counts.n_gt[static_cast<std::size_t>(e.class_id)] += 1;
  }

  std::set<std::string> clip_ids;
  for (const auto& [id, ann] : det_by_id) clip_ids.insert(id);
  for (const auto& [id, ann] : gt_by_id) clip_ids.insert(id);
  static const std::vector<Event> kNoEvents;

  for (const std::string& clip_id : clip_ids) {
    const auto dit = det_by_id.find(clip_id);
    const auto git = gt_by_id.find(clip_id);
    const std::vector<Event>& dets = dit == det_by_id.end() ? kNoEvents : dit->second->events;
    const std::vector<Event>& gts = git == gt_by_id.end() ? kNoEvents : git->second->events;

    // detection-tolerance test per detection, against same-class events
    std::vector<bool> dtc_pass(dets.size(), false);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      double inter = 0.0;
      for (const Event& g : gts) {
        if (g.class_id == dets[i].class_id) inter += detail::overlap(dets[i], g);
      }
      dtc_pass[i] = inter >= dtc * (dets[i].offset - dets[i].onset);
    }
    // ground-truth coverage from passing detections
    std::vector<bool> detected(gts.size(), false);
    for (std::size_t j = 0; j < gts.size(); ++j) {
      double cover = 0.0;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dtc_pass[i] && dets[i].class_id == gts[j].class_id) {
          cover += detail::overlap(dets[i], gts[j]);
        }
      }
      detected[j] = cover >= gtc * (gts[j].offset - gts[j].onset);
      if (detected[j]) counts.tp[static_cast<std::size_t>(gts[j].class_id)] += 1;
    }
    // detections that back no detected event are false positives; those
    // riding another class's events are additionally cross-triggers
    for (std::size_t i = 0; i < dets.size(); ++i) {
      bool supports = false;
      if (dtc_pass[i]) {
        for (std::size_t j = 0; j < gts.size() && !supports; ++j) {
          supports = detected[j] && gts[j].class_id == dets[i].class_id &&
                     detail::overlap(dets[i], gts[j]) > 0.0;
        }
      }
      if (supports) continue;
      counts.fp[static_cast<std::size_t>(dets[i].class_id)] += 1;
      const double dur = dets[i].offset - dets[i].onset;
      for (int other = 0; other < C; ++other) {
        if (other == dets[i].class_id) continue;
        double inter = 0.0;
        for (const Event& g : gts) {
          if (g.class_id == other) inter += detail::overlap(dets[i], g);
        }
        if (inter >= cttc * dur) counts.ct[static_cast<std::size_t>(dets[i].class_id)] += 1;
      }
    }
  }
  return counts;
}

// ---------------------------------------------------------------------------
// PSDS

struct PsdsParams {
  double dtc = 0.7;
  double gtc = 0.7;
  double cttc = 0.3;
  double alpha_ct = 0.0;  // cross-trigger weight in the effective FP rate
  double alpha_st = 1.0;  // across-class instability penalty
  double e_max = 100.0;   // FP/hour axis limit

  void validate() const {
    for (double ratio : {dtc, gtc, cttc}) {
      if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("PsdsParams: ratios must be in (0,1]");
    }
    if (alpha_ct < 0.0 || alpha_st < 0.0) throw ConfigError("PsdsParams: alphas must be >= 0");
    if (!(e_max > 0.0)) throw ConfigError("PsdsParams: e_max must be positive");
  }
};

// Response-speed scenario: strict overlap, no cross-trigger penalty.
inline PsdsParams psds_scenario1() {
  PsdsParams p;
  p.dtc = 0.7;
  p.gtc = 0.7;
  p.cttc = 0.3;
  p.alpha_ct = 0.0;
  p.alpha_st = 1.0;
  return p;
}

// Cross-trigger scenario: loose overlap, confusion penalized.
inline PsdsParams psds_scenario2() {
  PsdsParams p;
  p.dtc = 0.1;
  p.gtc = 0.1;
  p.cttc = 0.3;
  p.alpha_ct = 0.5;
  p.alpha_st = 1.0;
  return p;
}

// Operating points for the score curve: 50 thresholds 0.01, 0.03, ..., 0.99.
inline std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  grid.reserve(50);
  for (int i = 0; i < 50; ++i) grid.push_back(0.01 + 0.02 * i);
  return grid;
}

// Area under the effective-TPR vs effective-FPR curve, normalized to [0,1].
// Per class the operating points form a best-achievable staircase (max TPR
// among points with eFPR <= e); the effective TPR at e is the class mean
// minus alpha_st times the class standard deviation, floored at 0, and the
// staircase is integrated exactly over [0, e_max]. Classes without ground
// truth are excluded with a warning.
inline double psds(const std::vector<MatchCounts>& per_threshold, const PsdsParams& params,
                   double dataset_hours) {
  params.validate();
  if (per_threshold.empty()) throw ConfigError("psds: no operating points");
  if (!(dataset_hours > 0.0)) throw ConfigError("psds: dataset duration must be positive");
  const std::size_t C = per_threshold[0].n_gt.size();
  for (const auto& counts : per_threshold) {
    if (counts.tp.size() != C || counts.fp.size() != C || counts.ct.size() != C ||
        counts.n_gt.size() != C) {
      throw ShapeError("psds: inconsistent class counts across operating points");
    }
  }
  std::vector<std::size_t> classes;
  for (std::size_t c = 0; c < C; ++c) {
    if (per_threshold[0].n_gt[c] > 0) {
      classes.push_back(c);
    } else {
      std::cerr << "warning: class " << c << " has no ground truth; excluded from psds\n";
    }
  }
  if (classes.empty()) return 0.0;

  // per-class operating points (eFPR, TPR), then breakpoints on the FP axis
  std::vector<std::vector<std::pair<double, double>>> points(classes.size());
  std::vector<double> breaks = {0.0, params.e_max};
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const std::size_t c = classes[k];
    for (const auto& counts : per_threshold) {
      const double tpr = static_cast<double>(counts.tp[c]) / counts.n_gt[c];
      const double efpr =
          (counts.fp[c] + params.alpha_ct * counts.ct[c]) / dataset_hours;
      points[k].push_back({efpr, tpr});
      if (efpr < params.e_max) breaks.push_back(efpr);
    }
    std::sort(points[k].begin(), points[k].end());
  }
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

  auto tpr_at = [&](std::size_t k, double e) {
    double best = 0.0;
    for (const auto& [efpr, tpr] : points[k]) {
      if (efpr > e) break;
      best = std::max(best, tpr);
    }
    return best;
  };

  double area = 0.0;
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    if (breaks[i] >= params.e_max) break;
    double mean = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < classes.size(); ++k) {
      const double t = tpr_at(k, breaks[i]);
      mean += t;
      sq += t * t;
    }
    mean /= static_cast<double>(classes.size());
    sq /= static_cast<double>(classes.size());
    const double sd = std::sqrt(std::max(0.0, sq - mean * mean));
    const double etpr = std::max(0.0, mean - params.alpha_st * sd);
    area += etpr * (std::min(breaks[i + 1], params.e_max) - breaks[i]);
  }
  return area / params.e_max;
}

// Full curve evaluation: decode at each threshold, match, and score.
inline double psds_score(const std::vector<std::pair<std::string, Mat>>& probs,
                         const std::vector<ClipAnnotation>& ground_truth, int C,
                         const std::vector<int>& lengths, const PsdsParams& params,
                         double frame_s = aug::kOutFrameSeconds,
                         const std::vector<double>& thresholds = default_threshold_grid()) {
  if (thresholds.empty()) throw ConfigError("psds_score: empty threshold grid");
  std::vector<MatchCounts> per_threshold;
  per_threshold.reserve(thresholds.size());
  for (double threshold : thresholds) {
    const std::vector<ClipAnnotation> det = decode_dataset(probs, threshold, frame_s, lengths);
    per_threshold.push_back(
        intersection_match(det, ground_truth, C, params.dtc, params.gtc, params.cttc));
  }
  const double hours = static_cast<double>(ground_truth.size()) * kClipSeconds / 3600.0;
  return psds(per_threshold, params, hours);
}

// ---------------------------------------------------------------------------
// Collar-based event F1

struct F1Report {
  std::vector<int> tp, fp, fn;
  std::vector<double> per_class;  // 0 where undefined
  std::vector<int> excluded;      // classes without ground truth
  double macro = 0.0;
};

// Onset within the collar, offset within max(collar, 20% of the event
// length); detections and events pair greedily in onset order, one to one.
inline F1Report event_f1(const std::vector<ClipAnnotation>& detections,
                         const std::vector<ClipAnnotation>& ground_truth, int C,
                         double collar = 0.2) {
  if (C < 1) throw ConfigError("event_f1: C must be positive");
  if (!(collar > 0.0)) throw ConfigError("event_f1: collar must be positive");
  detail::validate_events(detections, C, "event_f1 detections");
  detail::validate_events(ground_truth, C, "event_f1 ground truth");
  auto det_by_id = detail::index_clips(detections, "event_f1 detections");
  auto gt_by_id = detail::index_clips(ground_truth, "event_f1 ground truth");

  F1Report rep;
  rep.tp.assign(static_cast<std::size_t>(C), 0);
  rep.fp.assign(static_cast<std::size_t>(C), 0);
  rep.fn.assign(static_cast<std::size_t>(C), 0);
  rep.per_class.assign(static_cast<std::size_t>(C), 0.0);

  std::set<std::string> clip_ids;
  for (const auto& [id, ann] : det_by_id) clip_ids.insert(id);
  for (const auto& [id, ann] : gt_by_id) clip_ids.insert(id);
  static const std::vector<Event> kNoEvents;

  for (const std::string& clip_id : clip_ids) {
    const auto dit = det_by_id.find(clip_id);
    const auto git = gt_by_id.find(clip_id);
    const std::vector<Event>& dets = dit == det_by_id.end() ? kNoEvents : dit->second->events;
    const std::vector<Event>& gts = git == gt_by_id.end() ? kNoEvents : git->second->events;
    for (int c = 0; c < C; ++c) {
      std::vector<Event> dc, gc;
      for (const Event& e : dets) {
        if (e.class_id == c) dc.push_back(e);
      }
      for (const Event& e : gts) {
        if (e.class_id == c) gc.push_back(e);
      }
      auto by_onset = [](const Event& a, const Event& b) { return a.onset < b.onset; };
      std::sort(dc.begin(), dc.end(), by_onset);
      std::sort(gc.begin(), gc.end(), by_onset);
      std::vector<bool> used(gc.size(), false);
      for (const Event& d : dc) {
        bool matched = false;
        for (std::size_t j = 0; j < gc.size() && !matched; ++j) {
          if (used[j]) continue;
          // tiny slack keeps errors of exactly one collar inside the bound
          // despite binary rounding of the timestamps
          constexpr double kTimeEps = 1e-9;
          const double off_tol = std::max(collar, 0.2 * (gc[j].offset - gc[j].onset));
          if (std::abs(d.onset - gc[j].onset) <= collar + kTimeEps &&
              std::abs(d.offset - gc[j].offset) <= off_tol + kTimeEps) {
            used[j] = true;
            matched = true;
          }
        }
        auto& cell = matched ? rep.tp : rep.fp;
        cell[static_cast<std::size_t>(c)] += 1;
      }
      for (bool u : used) {
        if (!u) rep.fn[static_cast<std::size_t>(c)] += 1;
      }
    }
  }

  double macro_sum = 0.0;
  int macro_n = 0;
  for (int c = 0; c < C; ++c) {
    const std::size_t k = static_cast<std::size_t>(c);
    if (rep.tp[k] + rep.fn[k] == 0) {
      rep.excluded.push_back(c);
      std::cerr << "warning: class " << c << " has no ground truth; excluded from event F1\n";
      continue;
    }
    const int denom = 2 * rep.tp[k] + rep.fp[k] + rep.fn[k];
    rep.per_class[k] = denom > 0 ? 2.0 * rep.tp[k] / denom : 0.0;
    macro_sum += rep.per_class[k];
    macro_n += 1;
  }
  rep.macro = macro_n > 0 ? macro_sum / macro_n : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Score output

struct ScoreSummary {
  double psds1 = 0.0;
  double psds2 = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> f1_per_class;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// CSV rows are `metric,class,value`; dataset-level rows leave class empty.
inline void write_scores_csv(const std::filesystem::path& path, const ScoreSummary& s) {
  std::ofstream out(path);
  if (!out) throw IoError("write_scores_csv: cannot open " + path.string());
  out << "metric,class,value\n";
  out << "psds1,," << detail::fmt_double(s.psds1) << '\n';
  out << "psds2,," << detail::fmt_double(s.psds2) << '\n';
  out << "event_f1,macro," << detail::fmt_double(s.macro_f1) << '\n';
  for (std::size_t c = 0; c < s.f1_per_class.size(); ++c) {
    out << "event_f1," << c << ',' << detail::fmt_double(s.f1_per_class[c]) << '\n';
  }
  if (!out) throw IoError("write_scores_csv: write failed for " + path.string());
}

inline void write_scores_json(const std::filesystem::path& path, const ScoreSummary& s) {
  std::ofstream out(path);
  if (!out) throw IoError("write_scores_json: cannot open " + path.string());
  out << "{\"psds1\": " << detail::fmt_double(s.psds1)
      << ", \"psds2\": " << detail::fmt_double(s.psds2)
      << ", \"macro_f1\": " << detail::fmt_double(s.macro_f1) << "}\n";
  if (!out) throw IoError("write_scores_json: write failed for " + path.string());
}

}  // namespace rct::eval
