// Batch augmentations on normalized log-mel clips, and the matching label
// transforms: hard/vanilla mixup, circular time shift, time masking,
// mel-axis pitch shift, plus the harden/OR pseudo-label algebra.
#pragma once

#include <rct/core.hpp>
#include <rct/features.hpp>
#include <rct/rng.hpp>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace rct::aug {

using features::MelClip;

// Input frames per prediction frame (the CNN's total time pooling), and the
// resulting prediction-frame duration in seconds (0.064 at 16 ms hop).
inline constexpr int kPoolFactor = 4;
inline constexpr double kOutFrameSeconds =
    static_cast<double>(kPoolFactor) * features::kHop / features::kSampleRate;

struct WarpChoice {
  enum class Method { kTimeShift, kTimeMask, kPitchShift };
  Method method = Method::kTimeShift;
  int d = 1;          // magnitude in [1, d_max]
  int direction = 1;  // +-1, pitch shift only
};

inline const char* method_name(WarpChoice::Method m) {
  switch (m) {
    case WarpChoice::Method::kTimeShift: return "time_shift";
    case WarpChoice::Method::kTimeMask: return "time_mask";
    case WarpChoice::Method::kPitchShift: return "pitch_shift";
  }
  throw DomainError("method_name: bad enum");
}

// ---------------------------------------------------------------------------
// Hard and vanilla mixup

namespace detail {

// log(exp(a) + exp(b)), overflow-safe
inline double logaddexp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

struct MixedSample {
  MelClip clip;
  Vec weak;
  Mat strong;             // empty when the inputs carry no strong labels
  bool has_strong = false;
};

// Adds 2-3 clips in the linear power domain (energies sum, so the mix keeps
// the constituents' total energy) and ORs their binary labels. Pass strongs
// empty for weak-only inputs.
inline MixedSample hard_mixup(const std::vector<MelClip>& clips, const std::vector<Vec>& weaks,
                              const std::vector<Mat>& strongs) {
  if (clips.size() < 2 || clips.size() > 3) throw DomainError("hard_mixup: need 2 or 3 clips");
  if (weaks.size() != clips.size()) throw ShapeError("hard_mixup: weak label count mismatch");
  if (!strongs.empty() && strongs.size() != clips.size()) {
    throw ShapeError("hard_mixup: strong label count mismatch");
  }
  const Eigen::Index rows = clips[0].values.rows(), cols = clips[0].values.cols();
  for (const auto& c : clips) {
    if (c.values.rows() != rows || c.values.cols() != cols) {
      throw ShapeError("hard_mixup: clip shape mismatch");
    }
  }

  Mat raw = features::denormalize_logmel(clips[0]);
  for (size_t i = 1; i < clips.size(); ++i) {
    const Mat other = features::denormalize_logmel(clips[i]);
    for (Eigen::Index j = 0; j < raw.size(); ++j) {
      raw.data()[j] = detail::logaddexp(raw.data()[j], other.data()[j]);
    }
  }

  MixedSample out;
  out.clip = features::normalize_logmel(raw);
  out.weak = weaks[0];
  for (size_t i = 1; i < weaks.size(); ++i) {
    if (weaks[i].size() != out.weak.size()) throw ShapeError("hard_mixup: weak shape mismatch");
    out.weak = out.weak.cwiseMax(weaks[i]);
  }
  if (!strongs.empty()) {
    out.strong = strongs[0];
    for (size_t i = 1; i < strongs.size(); ++i) {
      if (strongs[i].rows() != out.strong.rows() || strongs[i].cols() != out.strong.cols()) {
        throw ShapeError("hard_mixup: strong shape mismatch");
      }
      out.strong = out.strong.cwiseMax(strongs[i]);
    }
    out.has_strong = true;
  }
  return out;
}

// Interpolates two samples on normalized values with soft labels
// lambda*a + (1-lambda)*b.
inline MixedSample vanilla_mixup(const MelClip& a, const MelClip& b, const Vec& weak_a,
                                 const Vec& weak_b, const Mat& strong_a, const Mat& strong_b,
                                 double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("vanilla_mixup: lambda not in [0,1]");
  if (a.values.rows() != b.values.rows() || a.values.cols() != b.values.cols()) {
    throw ShapeError("vanilla_mixup: clip shape mismatch");
  }
  MixedSample out;
  out.clip.values = lambda * a.values + (1.0 - lambda) * b.values;
  out.clip.norm_lo = lambda * a.norm_lo + (1.0 - lambda) * b.norm_lo;
  out.clip.norm_hi = lambda * a.norm_hi + (1.0 - lambda) * b.norm_hi;
  out.weak = lambda * weak_a + (1.0 - lambda) * weak_b;
  if (strong_a.size() > 0 && strong_b.size() > 0) {
    if (strong_a.rows() != strong_b.rows() || strong_a.cols() != strong_b.cols()) {
      throw ShapeError("vanilla_mixup: strong shape mismatch");
    }
    out.strong = lambda * strong_a + (1.0 - lambda) * strong_b;
    out.has_strong = true;
  }
  return out;
}

// Beta(alpha, alpha) sample via two gamma draws (Johnk's method is needless
// here; alpha is small so use the standard Gamma(alpha) rejection-free
// transform for alpha < 1: Gamma(alpha) = Gamma(alpha+1) * U^(1/alpha)).
inline double sample_beta(double alpha, Rng& rng) {
  auto gamma = [&rng](double shape) {
    // Marsaglia-Tsang for shape >= 1, boosted below 1
    const double boost = shape < 1.0 ? std::pow(rng.uniform_pos(), 1.0 / shape) : 1.0;
    const double d = (shape < 1.0 ? shape + 1.0 : shape) - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = rng.normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = rng.uniform_pos();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return boost * d * v;
    }
  };
  const double x = gamma(alpha);
  const double y = gamma(alpha);
  return x / (x + y);
}

// ---------------------------------------------------------------------------
// RandomWarping transforms

// d seconds expressed in whole prediction frames: round(d / 0.064).
inline int shift_frames_for(int d) {
  return static_cast<int>(std::lround(static_cast<double>(d) / kOutFrameSeconds));
}

// Circular row rotation by n rows within the first `period` rows; rows past
// the rotation period (input rows the CNN crops away) stay put so that
// shifts compose as a cyclic group aligned with the label grid.
template <typename M>
M rotate_rows(const M& x, int n, Eigen::Index period) {
  if (period <= 0 || period > x.rows()) throw ShapeError("rotate_rows: bad period");
  M out = x;
  const int p = static_cast<int>(period);
  const int s = ((n % p) + p) % p;
  for (int t = 0; t < p; ++t) out.row((t + s) % p) = x.row(t);
  return out;
}

// Shifts clip content n_out prediction frames later in time (circularly),
// together with its strong label.
inline std::pair<MelClip, Mat> shift_by_frames(const MelClip& clip, const Mat& strong, int n_out) {
  const Eigen::Index t_out = strong.rows();
  if (t_out <= 0) throw ShapeError("shift_by_frames: empty strong label");
  if (clip.values.rows() < t_out * kPoolFactor) {
    throw ShapeError("shift_by_frames: clip shorter than label grid");
  }
  MelClip shifted = clip;
  shifted.values = rotate_rows(clip.values, n_out * kPoolFactor, t_out * kPoolFactor);
  Mat strong_shifted = rotate_rows(strong, n_out, t_out);
  return {std::move(shifted), std::move(strong_shifted)};
}

// Feature-only variant for clips without strong labels.
inline MelClip shift_clip_by_frames(const MelClip& clip, int n_out, Eigen::Index t_out) {
  MelClip shifted = clip;
  shifted.values = rotate_rows(clip.values, n_out * kPoolFactor, t_out * kPoolFactor);
  return shifted;
}

inline std::pair<MelClip, Mat> time_shift(const MelClip& clip, const Mat& strong, int d) {
  if (d < 1) throw DomainError("time_shift: d must be >= 1");
  return shift_by_frames(clip, strong, shift_frames_for(d));
}

// Masks 5*d intervals of 6 input frames (0.1 s) to normalized value 0.
// Intervals are drawn independently and may overlap. Labels are unaffected.
inline constexpr int kMaskFrames = 6;
inline constexpr int kMasksPerUnit = 5;

inline MelClip time_mask(const MelClip& clip, int d, Rng& rng) {
  if (d < 1) throw DomainError("time_mask: d must be >= 1");
  const int rows = static_cast<int>(clip.values.rows());
  if (rows < kMaskFrames) throw ShapeError("time_mask: clip shorter than one mask");
  MelClip out = clip;
  for (int i = 0; i < kMasksPerUnit * d; ++i) {
    const int start = static_cast<int>(rng.uniform_int(0, rows - kMaskFrames));
    out.values.middleRows(start, kMaskFrames).setZero();
  }
  return out;
}

// Remaps the mel axis by a frequency ratio: content at frequency f moves to
// f*ratio. Each target band reads the source position f_target/ratio by
// linear interpolation over band center frequencies; targets falling outside
// the source range take the clip's minimum value. A spectrogram-domain stand
// -in for waveform pitch shifting.
inline MelClip pitch_remap(const MelClip& clip, double ratio) {
  if (ratio <= 0.0) throw DomainError("pitch_remap: ratio must be positive");
  const int K = static_cast<int>(clip.values.cols());
  const Vec centers = features::mel_center_frequencies(K);
  const double fill = clip.values.minCoeff();
  MelClip out = clip;
  for (int m = 0; m < K; ++m) {
    const double f_src = centers[m] / ratio;
    if (f_src < centers[0] || f_src > centers[K - 1]) {
      out.values.col(m).setConstant(fill);
      continue;
    }
    int j = static_cast<int>(std::upper_bound(centers.data(), centers.data() + K, f_src) -
                             centers.data()) - 1;
    j = std::clamp(j, 0, K - 2);
    const double frac = (f_src - centers[j]) / (centers[j + 1] - centers[j]);
    out.values.col(m) = (1.0 - frac) * clip.values.col(j) + frac * clip.values.col(j + 1);
  }
  return out;
}

// d half-semitones up (direction +1) or down (-1): ratio 2^(+-d/24).
inline MelClip pitch_shift(const MelClip& clip, int d, int direction) {
  if (d < 1) throw DomainError("pitch_shift: d must be >= 1");
  if (direction != 1 && direction != -1) throw DomainError("pitch_shift: direction must be +-1");
  return pitch_remap(clip, std::pow(2.0, direction * static_cast<double>(d) / 24.0));
}

// ---------------------------------------------------------------------------
// Per-batch warp selection

// Draws ONE method and magnitude d ~ U{1..d_max} (plus a direction for pitch
// shift) and applies it to every clip in the batch. Mask positions are drawn
// per clip, in batch order. t_out is the label-grid length (rotation period
// = t_out * kPoolFactor rows).
inline std::pair<std::vector<MelClip>, WarpChoice> random_warp(const std::vector<MelClip>& batch,
                                                               int d_max, Eigen::Index t_out,
                                                               Rng& rng) {
  if (d_max < 1 || d_max > 9) throw ConfigError("random_warp: d_max must be in [1,9]");
  WarpChoice choice;
  choice.method = static_cast<WarpChoice::Method>(rng.uniform_int(0, 2));
  choice.d = static_cast<int>(rng.uniform_int(1, d_max));
  choice.direction = rng.uniform() < 0.5 ? 1 : -1;

  std::vector<MelClip> out;
  out.reserve(batch.size());
  for (const auto& clip : batch) {
    switch (choice.method) {
      case WarpChoice::Method::kTimeShift:
        out.push_back(shift_clip_by_frames(clip, shift_frames_for(choice.d), t_out));
        break;
      case WarpChoice::Method::kTimeMask:
        out.push_back(time_mask(clip, choice.d, rng));
        break;
      case WarpChoice::Method::kPitchShift:
        out.push_back(pitch_shift(clip, choice.d, choice.direction));
        break;
    }
  }
  return {std::move(out), choice};
}

// ---------------------------------------------------------------------------
// Pseudo-label algebra

// Saturates confident probabilities: x > 0.95 -> 1, x < 0.05 -> 0, the rest
// pass through unchanged.
template <typename M>
M harden(const M& pred) {
  M out = pred;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    double& v = out.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("harden: entry outside [0,1]");
    if (v > 0.95) {
      v = 1.0;
    } else if (v < 0.05) {
      v = 0.0;
    }
  }
  return out;
}

// Element-wise max of hardened predictions over a mix set; exact OR on
// binary inputs, max on residual soft values.
template <typename M>
M mixup_label_transform(const std::vector<M>& preds) {
  if (preds.size() < 2 || preds.size() > 3) {
    throw DomainError("mixup_label_transform: need 2 or 3 predictions");
  }
  M out = harden(preds[0]);
  for (size_t i = 1; i < preds.size(); ++i) {
    if (preds[i].rows() != out.rows() || preds[i].cols() != out.cols()) {
      throw ShapeError("mixup_label_transform: shape mismatch");
    }
    out = out.cwiseMax(harden(preds[i]));
  }
  return out;
}

// How a given augmentation acts on (pseudo-)labels: time shift rotates
// strong-label rows, mask and pitch shift leave labels alone, mixup combines
// the mix set via harden/OR (applied through mixup_label_transform).
struct LabelTransform {
  enum class Kind { kIdentity, kShift, kMix };
  Kind kind = Kind::kIdentity;
  int n_out = 0;

  Vec apply_weak(const Vec& weak) const {
    if (kind == Kind::kMix) throw StateError("LabelTransform: mix needs mixup_label_transform");
    return weak;
  }
  Mat apply_strong(const Mat& strong) const {
    switch (kind) {
      case Kind::kIdentity: return strong;
      case Kind::kShift: return rotate_rows(strong, n_out, strong.rows());
      case Kind::kMix: throw StateError("LabelTransform: mix needs mixup_label_transform");
    }
    throw DomainError("LabelTransform: bad kind");
  }
};

inline LabelTransform label_transform_for(const WarpChoice& choice) {
  LabelTransform t;
  if (choice.method == WarpChoice::Method::kTimeShift) {
    t.kind = LabelTransform::Kind::kShift;
    t.n_out = shift_frames_for(choice.d);
  }
  return t;
}

inline LabelTransform label_transform_for_mix() {
  LabelTransform t;
  t.kind = LabelTransform::Kind::kMix;
  return t;
}

}  // namespace rct::aug
