#pragma once
// Training: supervised/consistency losses, linear warmup schedules, Adam,
// and the EMA-teacher loop with its augmentation-branch strategies (hard and
// vanilla mixup, random warping, time-shift, self- and teacher-consistency).

#include <rct/augment.hpp>
#include <rct/core.hpp>
#include <rct/features.hpp>
#include <rct/model.hpp>
#include <rct/rng.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace rct::train {

using model::ModelConfig;
using model::Predictions;
using model::Tensors;

// ---------------------------------------------------------------------------
// Schedules

// Linear ramp 0 -> max_w over warmup_steps, then constant.
inline double ramp(std::int64_t step, std::int64_t warmup_steps, double max_w) {
  if (step < 0) throw DomainError("ramp: negative step");
  if (warmup_steps <= 0 || step >= warmup_steps) return max_w;
  return max_w * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

inline double lr_schedule(std::int64_t step, std::int64_t warmup_steps, double lr_max) {
  return ramp(step, warmup_steps, lr_max);
}

// ---------------------------------------------------------------------------
// Adam

template <typename R>
struct AdamState {
  Tensors<R> m, v;  // first / second moment estimates
  std::int64_t t = 0;
};

template <typename R>
AdamState<R> make_adam_state(const Tensors<R>& params) {
  AdamState<R> st;
  st.m = params;
  st.v = params;
  st.m.set_zero();
  st.v.set_zero();
  return st;
}

template <typename R>
void adam_step(Tensors<R>& params, const Tensors<R>& grads, AdamState<R>& st, double lr,
               double beta1, double beta2, double eps) {
  if (!params.same_shape(grads) || !params.same_shape(st.m) || !params.same_shape(st.v)) {
    throw ShapeError("adam_step: parameter/gradient shape mismatch");
  }
  for (const auto& [name, g] : grads) {
    if (!g.allFinite()) throw NumericalError("adam_step: non-finite gradient in " + name);
  }
  st.t += 1;
  const R c1 = static_cast<R>(1.0 - std::pow(beta1, static_cast<double>(st.t)));
  const R c2 = static_cast<R>(1.0 - std::pow(beta2, static_cast<double>(st.t)));
  auto ip = params.begin();
  auto ig = grads.begin();
  auto im = st.m.begin();
  auto iv = st.v.begin();
  for (; ip != params.end(); ++ip, ++ig, ++im, ++iv) {
    auto& p = ip->second;
    const auto& g = ig->second;
    auto& m = im->second;
    auto& v = iv->second;
    m = static_cast<R>(beta1) * m + static_cast<R>(1.0 - beta1) * g;
    v.array() = static_cast<R>(beta2) * v.array() + static_cast<R>(1.0 - beta2) * g.array().square();
    p.array() -= static_cast<R>(lr) * (m.array() / c1) /
                 ((v.array() / c2).sqrt() + static_cast<R>(eps));
  }
}

// ---------------------------------------------------------------------------
// Strategies

enum class Strategy {
  kBaseline,      // supervised + teacher MSE on the plain batch
  kVanillaMixup,  // + interpolated-mixup branch
  kHardMixup,     // + energy-sum mixup branch with OR labels
  kRandWarp,      // + hard mixup + random warping branches
  kRct,           // randwarp + student-student self-consistency
  kIct,           // randwarp branches, teacher-to-student consistency instead
  kSct,           // hard mixup + time-shift branch, teacher-to-student form
  kIctSct,        // union of the ict and sct branch sets
};

inline const std::array<Strategy, 8>& all_strategies() {
  static const std::array<Strategy, 8> order = {
      Strategy::kBaseline, Strategy::kVanillaMixup, Strategy::kHardMixup, Strategy::kRandWarp,
      Strategy::kRct,      Strategy::kIct,          Strategy::kSct,       Strategy::kIctSct,
  };
  return order;
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kBaseline: return "baseline";
    case Strategy::kVanillaMixup: return "vanilla-mixup";
    case Strategy::kHardMixup: return "hard-mixup";
    case Strategy::kRandWarp: return "randwarp";
    case Strategy::kRct: return "rct";
    case Strategy::kIct: return "ict";
    case Strategy::kSct: return "sct";
    case Strategy::kIctSct: return "ict-sct";
  }
  throw DomainError("strategy_name: bad strategy");
}

inline Strategy strategy_from_name(const std::string& name) {
  for (Strategy s : all_strategies()) {
    if (name == strategy_name(s)) return s;
  }
  std::string valid;
  for (Strategy s : all_strategies()) {
    valid += valid.empty() ? "" : ", ";
    valid += strategy_name(s);
  }
  throw ConfigError("unknown strategy '" + name + "' (valid: " + valid + ")");
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int batch_weak = 12;
  int batch_strong = 12;
  int batch_unlabeled = 24;
  int epochs = 200;
  int warmup_epochs = 50;
  double lr_max = 1e-3;
  double consistency_max = 2.0;
  double ema_decay = 0.999;
  int d_max = 5;
  Strategy strategy = Strategy::kRct;
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::array<int, 3> channels = {16, 32, 64};
  int gru_hidden = 32;
  int gru_layers = 2;
  double mixup_alpha = 0.2;   // Beta(alpha, alpha) for vanilla mixup
  bool augmentation = true;   // false: train on the plain branch only

  void validate() const {
    auto positive = [](double v, const char* what) {
      if (!(v > 0)) throw ConfigError(std::string("TrainConfig: ") + what + " must be positive");
    };
    positive(batch_weak, "batch_weak");
    positive(batch_strong, "batch_strong");
    positive(batch_unlabeled, "batch_unlabeled");
    positive(epochs, "epochs");
    positive(warmup_epochs, "warmup_epochs");
    positive(lr_max, "lr_max");
    positive(consistency_max, "consistency_max");
    positive(mixup_alpha, "mixup_alpha");
    positive(adam_eps, "adam_eps");
    if (warmup_epochs > epochs) throw ConfigError("TrainConfig: warmup_epochs > epochs");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("TrainConfig: ema_decay not in [0,1)");
    if (d_max < 1 || d_max > 9) throw ConfigError("TrainConfig: d_max not in [1,9]");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
      throw ConfigError("TrainConfig: adam betas not in (0,1)");
    }
    for (int c : channels) {
      if (c < 1) throw ConfigError("TrainConfig: channels must be positive");
    }
    if (gru_hidden < 1) throw ConfigError("TrainConfig: gru_hidden must be positive");
    if (gru_layers != 1 && gru_layers != 2) throw ConfigError("TrainConfig: gru_layers not 1|2");
  }
};

// Small-machine defaults: shorter run, smaller batch and network.
inline TrainConfig desk_config() {
  TrainConfig c;
  c.batch_weak = 6;
  c.batch_strong = 6;
  c.batch_unlabeled = 12;
  c.epochs = 40;
  c.warmup_epochs = 10;
  c.ema_decay = 0.99;
  c.channels = {4, 8, 16};
  c.gru_hidden = 16;
  return c;
}

inline ModelConfig model_config_for(const TrainConfig& cfg, int n_classes) {
  ModelConfig net;
  net.n_mels = features::kNumMels;
  net.n_classes = n_classes;
  net.channels = cfg.channels;
  net.gru_hidden = cfg.gru_hidden;
  net.gru_layers = cfg.gru_layers;
  return net;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long long parse_int_value(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for key '" + key + "': " + value);
  }
}

inline double parse_double_value(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad number for key '" + key + "': " + value);
  }
}

inline bool parse_bool_value(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad boolean for key '" + key + "': " + value);
}

}  // namespace detail

// Flat key=value lines; '#' starts a comment, blank lines are skipped.
// Unknown keys are rejected.
inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string stripped = detail::trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + stripped);
    const std::string key = detail::trim(stripped.substr(0, eq));
    const std::string value = detail::trim(stripped.substr(eq + 1));
    if (key == "batch_weak") {
      cfg.batch_weak = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "batch_strong") {
      cfg.batch_strong = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "batch_unlabeled") {
      cfg.batch_unlabeled = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "epochs") {
      cfg.epochs = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "warmup_epochs") {
      cfg.warmup_epochs = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "lr_max") {
      cfg.lr_max = detail::parse_double_value(key, value);
    } else if (key == "consistency_max") {
      cfg.consistency_max = detail::parse_double_value(key, value);
    } else if (key == "ema_decay") {
      cfg.ema_decay = detail::parse_double_value(key, value);
    } else if (key == "d_max") {
      cfg.d_max = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "strategy") {
      cfg.strategy = strategy_from_name(value);
    } else if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(detail::parse_int_value(key, value));
    } else if (key == "adam_beta1") {
      cfg.adam_beta1 = detail::parse_double_value(key, value);
    } else if (key == "adam_beta2") {
      cfg.adam_beta2 = detail::parse_double_value(key, value);
    } else if (key == "adam_eps") {
      cfg.adam_eps = detail::parse_double_value(key, value);
    } else if (key == "channels") {
      std::array<int, 3> ch{};
      size_t start = 0;
      for (int i = 0; i < 3; ++i) {
        const auto comma = value.find(',', start);
        if ((i < 2) == (comma == std::string::npos)) {
          throw ConfigError("key 'channels' needs three comma-separated values: " + value);
        }
        const std::string part =
            detail::trim(value.substr(start, comma == std::string::npos ? comma : comma - start));
        ch[static_cast<size_t>(i)] = static_cast<int>(detail::parse_int_value(key, part));
        start = comma + 1;
      }
      cfg.channels = ch;
    } else if (key == "gru_hidden") {
      cfg.gru_hidden = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "gru_layers") {
      cfg.gru_layers = static_cast<int>(detail::parse_int_value(key, value));
    } else if (key == "mixup_alpha") {
      cfg.mixup_alpha = detail::parse_double_value(key, value);
    } else if (key == "augmentation") {
      cfg.augmentation = detail::parse_bool_value(key, value);
    } else {
      throw ConfigError("unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_train_config: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_train_config(buf.str());
}

// Inverse of parse_train_config: flat key=value lines that parse back to an
// equal configuration.
inline std::string format_train_config(const TrainConfig& cfg) {
  std::ostringstream out;
  char buf[64];
  const auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "batch_weak=" << cfg.batch_weak << '\n'
      << "batch_strong=" << cfg.batch_strong << '\n'
      << "batch_unlabeled=" << cfg.batch_unlabeled << '\n'
      << "epochs=" << cfg.epochs << '\n'
      << "warmup_epochs=" << cfg.warmup_epochs << '\n'
      << "lr_max=" << num(cfg.lr_max) << '\n'
      << "consistency_max=" << num(cfg.consistency_max) << '\n'
      << "ema_decay=" << num(cfg.ema_decay) << '\n'
      << "d_max=" << cfg.d_max << '\n'
      << "strategy=" << strategy_name(cfg.strategy) << '\n'
      << "seed=" << cfg.seed << '\n'
      << "adam_beta1=" << num(cfg.adam_beta1) << '\n'
      << "adam_beta2=" << num(cfg.adam_beta2) << '\n'
      << "adam_eps=" << num(cfg.adam_eps) << '\n'
      << "channels=" << cfg.channels[0] << ',' << cfg.channels[1] << ',' << cfg.channels[2]
      << '\n'
      << "gru_hidden=" << cfg.gru_hidden << '\n'
      << "gru_layers=" << cfg.gru_layers << '\n'
      << "mixup_alpha=" << num(cfg.mixup_alpha) << '\n'
      << "augmentation=" << (cfg.augmentation ? "true" : "false") << '\n';
  return out.str();
}

// Number of forward passes per optimization step (the plain branch plus any
// augmented companions the strategy adds).
inline int branch_count(const TrainConfig& cfg) {
  if (!cfg.augmentation) return 1;
  switch (cfg.strategy) {
    case Strategy::kBaseline:
      return 1;
    case Strategy::kVanillaMixup:
    case Strategy::kHardMixup:
      return 2;
    case Strategy::kRandWarp:
    case Strategy::kRct:
    case Strategy::kIct:
    case Strategy::kSct:
      return 3;
    case Strategy::kIctSct:
      return 4;
  }
  throw StateError("branch_count: unhandled strategy");
}

// ---------------------------------------------------------------------------
// Training data

enum class SampleKind { kStrong, kWeak, kUnlabeled };

struct TrainSample {
  features::MelClip clip;
  Vec weak;    // C, set for weak- and strong-annotated samples
  Mat strong;  // t_out x C, set for strong-annotated samples
  SampleKind kind = SampleKind::kUnlabeled;
};

struct TrainData {
  int n_classes = 0;
  std::vector<TrainSample> strong, weak, unlabeled;
  std::vector<TrainSample> val;  // strongly annotated
};

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kProbEps = 1e-7;  // BCE probability clamp

template <typename R>
struct SampleLabels {
  bool has_weak = false;
  bool has_strong = false;
  VecT<R> weak;    // C
  MatT<R> strong;  // t_out x C
};

// Accumulated loss gradient w.r.t. one sample's predictions.
template <typename R>
struct PredGrad {
  VecT<R> d_weak;
  MatT<R> d_strong;
  void init(Eigen::Index t, Eigen::Index c) {
    d_weak = VecT<R>::Zero(c);
    d_strong = MatT<R>::Zero(t, c);
  }
};

namespace detail {

template <typename R>
double bce_element(R pred, R label, double inv_count, R* grad) {
  const double y = static_cast<double>(label);
  if (!(y >= 0.0 && y <= 1.0)) throw DomainError("supervised_loss: label outside [0,1]");
  const double p = std::clamp(static_cast<double>(pred), kProbEps, 1.0 - kProbEps);
  if (grad && pred > kProbEps && pred < 1.0 - kProbEps) {
    *grad += static_cast<R>((p - y) / (p * (1.0 - p)) * inv_count);
  }
  return -(y * std::log(p) + (1.0 - y) * std::log1p(-p));
}

}  // namespace detail

// Mean binary cross-entropy per contributing element over every labelled
// output in the call: a weak vector contributes C elements, a strong matrix
// t*C. Unlabelled-only input yields 0. Probabilities are clamped to
// [kProbEps, 1-kProbEps]; clamped entries carry zero gradient.
template <typename R>
double supervised_loss(const std::vector<const Predictions<R>*>& preds,
                       const std::vector<const SampleLabels<R>*>& labels,
                       const std::vector<PredGrad<R>*>& grads = {}) {
  if (preds.size() != labels.size()) throw ShapeError("supervised_loss: size mismatch");
  if (!grads.empty() && grads.size() != preds.size()) {
    throw ShapeError("supervised_loss: gradient slot mismatch");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& lab = *labels[i];
    const auto& pr = *preds[i];
    if (lab.has_weak) {
      if (lab.weak.size() != pr.weak.size()) throw ShapeError("supervised_loss: weak shape");
      count += static_cast<std::size_t>(lab.weak.size());
    }
    if (lab.has_strong) {
      if (lab.strong.rows() != pr.strong.rows() || lab.strong.cols() != pr.strong.cols()) {
        throw ShapeError("supervised_loss: strong shape");
      }
      count += static_cast<std::size_t>(lab.strong.size());
    }
  }
  if (count == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& lab = *labels[i];
    const auto& pr = *preds[i];
    PredGrad<R>* g = grads.empty() ? nullptr : grads[i];
    if (lab.has_weak) {
      for (Eigen::Index k = 0; k < lab.weak.size(); ++k) {
        sum += detail::bce_element(pr.weak[k], lab.weak[k], inv, g ? &g->d_weak[k] : nullptr);
      }
    }
    if (lab.has_strong) {
      for (Eigen::Index k = 0; k < lab.strong.size(); ++k) {
        sum += detail::bce_element(pr.strong.data()[k], lab.strong.data()[k], inv,
                                   g ? g->d_strong.data() + k : nullptr);
      }
    }
  }
  return sum * inv;
}

// r-weighted mean over branches of per-element MSE between student and
// teacher predictions on unlabelled samples, at both output levels. The
// teacher side is a constant for gradients. Teacher slots may be null at
// labelled positions.
template <typename R>
double meanteacher_loss(const std::vector<std::vector<const Predictions<R>*>>& student,
                        const std::vector<std::vector<const Predictions<R>*>>& teacher,
                        const std::vector<bool>& unlabeled, double r,
                        const std::vector<std::vector<PredGrad<R>*>>& grads = {}) {
  const std::size_t n_branches = student.size();
  if (teacher.size() != n_branches) throw ShapeError("meanteacher_loss: branch count mismatch");
  if (!grads.empty() && grads.size() != n_branches) {
    throw ShapeError("meanteacher_loss: gradient branch mismatch");
  }
  if (n_branches == 0 || r == 0.0) return 0.0;
  std::size_t n_unlabeled = 0;
  for (bool u : unlabeled) n_unlabeled += u ? 1u : 0u;
  if (n_unlabeled == 0) return 0.0;

  double wsum = 0.0, ssum = 0.0;
  Eigen::Index C = 0, t_out = 0;
  for (std::size_t b = 0; b < n_branches; ++b) {
    if (student[b].size() != unlabeled.size() || teacher[b].size() != unlabeled.size()) {
      throw ShapeError("meanteacher_loss: branch shape mismatch");
    }
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
      if (!unlabeled[i]) continue;
      const Predictions<R>* s = student[b][i];
      const Predictions<R>* t = teacher[b][i];
      if (!s || !t) throw StateError("meanteacher_loss: missing prediction for unlabelled sample");
      if (s->weak.size() != t->weak.size() || s->strong.rows() != t->strong.rows() ||
          s->strong.cols() != t->strong.cols()) {
        throw ShapeError("meanteacher_loss: branch shape mismatch");
      }
      C = s->weak.size();
      t_out = s->strong.rows();
      wsum += (s->weak - t->weak).squaredNorm();
      ssum += (s->strong - t->strong).squaredNorm();
    }
  }
  const double nb = static_cast<double>(n_branches);
  const double aw = r / (nb * static_cast<double>(n_unlabeled) * static_cast<double>(C));
  const double as = aw / static_cast<double>(t_out);
  if (!grads.empty()) {
    for (std::size_t b = 0; b < n_branches; ++b) {
      for (std::size_t i = 0; i < unlabeled.size(); ++i) {
        if (!unlabeled[i] || !grads[b][i]) continue;
        const Predictions<R>* s = student[b][i];
        const Predictions<R>* t = teacher[b][i];
        grads[b][i]->d_weak += static_cast<R>(2.0 * aw) * (s->weak - t->weak);
        grads[b][i]->d_strong += static_cast<R>(2.0 * as) * (s->strong - t->strong);
      }
    }
  }
  return aw * wsum + as * ssum;
}

// Relates an augmented branch's predictions to the original branch: either a
// per-sample warp transform (identity, or cyclic strong-label shift) or mix
// sets of 2-3 original indices combined by harden + element-wise max.
struct AugDescriptor {
  aug::LabelTransform transform;
  std::vector<std::vector<int>> mix_sets;
  bool is_mix() const { return !mix_sets.empty(); }
};

namespace detail {

// out(e) = max_j harden(src_j(e)). route(e) holds the winning source index
// when its entry passed through harden unchanged (the gradient carrier) and
// -1 when the winner saturated to 0/1.
template <typename M>
void mix_transform(const std::vector<const M*>& src, M& out, Eigen::MatrixXi& route) {
  out = *src[0];
  route.resize(src[0]->rows(), src[0]->cols());
  for (Eigen::Index e = 0; e < out.size(); ++e) {
    double best = -1.0;
    int best_j = -1;
    bool best_pass = false;
    for (std::size_t j = 0; j < src.size(); ++j) {
      const double v = static_cast<double>(src[j]->data()[e]);
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("mix transform: prediction outside [0,1]");
      const bool pass = !(v > 0.95 || v < 0.05);
      const double h = v > 0.95 ? 1.0 : (v < 0.05 ? 0.0 : v);
      if (h > best) {
        best = h;
        best_j = static_cast<int>(j);
        best_pass = pass;
      }
    }
    out.data()[e] = static_cast<typename M::Scalar>(best);
    route.data()[e] = best_pass ? best_j : -1;
  }
}

template <typename R>
void check_pred_shape(const Predictions<R>& p, Eigen::Index t_out, Eigen::Index C,
                      const char* where) {
  if (p.weak.size() != C || p.strong.rows() != t_out || p.strong.cols() != C) {
    throw ShapeError(std::string(where) + ": prediction shape mismatch");
  }
}

}  // namespace detail

// Symmetric MSE between the transformed original-branch predictions and the
// augmented branch's predictions over all samples, normalized per element at
// each output level and weighted by r. Gradients flow into both branches;
// the original side receives them through the transform adjoint (inverse
// rotation for shifts, winner routing for mix sets, zero where harden
// saturated).
template <typename R>
double self_consistency_loss(const std::vector<const Predictions<R>*>& orig,
                             const std::vector<const Predictions<R>*>& aug,
                             const AugDescriptor& desc, double r,
                             const std::vector<PredGrad<R>*>& d_orig = {},
                             const std::vector<PredGrad<R>*>& d_aug = {}) {
  const std::size_t n = aug.size();
  if (desc.is_mix() ? desc.mix_sets.size() != n : orig.size() != n) {
    throw ShapeError("self_consistency_loss: branch size mismatch");
  }
  if ((!d_orig.empty() && d_orig.size() != orig.size()) ||
      (!d_aug.empty() && d_aug.size() != n)) {
    throw ShapeError("self_consistency_loss: gradient slot mismatch");
  }
  if (n == 0 || r == 0.0) return 0.0;
  const Eigen::Index C = aug[0]->weak.size();
  const Eigen::Index t_out = aug[0]->strong.rows();
  const double aw = r / (static_cast<double>(n) * static_cast<double>(C));
  const double as = aw / static_cast<double>(t_out);

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    detail::check_pred_shape(*aug[i], t_out, C, "self_consistency_loss");
    VecT<R> dw;       // transformed weak minus augmented weak
    MatT<R> ds;       // transformed strong minus augmented strong
    Eigen::MatrixXi route_w, route_s;
    const std::vector<int>* mix_set = nullptr;
    if (desc.is_mix()) {
      mix_set = &desc.mix_sets[i];
      std::vector<const VecT<R>*> weak_src;
      std::vector<const MatT<R>*> strong_src;
      for (int j : *mix_set) {
        if (j < 0 || static_cast<std::size_t>(j) >= orig.size()) {
          throw ShapeError("self_consistency_loss: mix set index out of range");
        }
        detail::check_pred_shape(*orig[static_cast<std::size_t>(j)], t_out, C,
                                 "self_consistency_loss");
        weak_src.push_back(&orig[static_cast<std::size_t>(j)]->weak);
        strong_src.push_back(&orig[static_cast<std::size_t>(j)]->strong);
      }
      detail::mix_transform(weak_src, dw, route_w);
      detail::mix_transform(strong_src, ds, route_s);
    } else {
      detail::check_pred_shape(*orig[i], t_out, C, "self_consistency_loss");
      dw = orig[i]->weak;
      ds = desc.transform.kind == aug::LabelTransform::Kind::kShift
               ? aug::rotate_rows(orig[i]->strong, desc.transform.n_out, t_out)
               : orig[i]->strong;
    }
    dw -= aug[i]->weak;
    ds -= aug[i]->strong;
    total += aw * dw.squaredNorm() + as * ds.squaredNorm();

    if (!d_aug.empty() && d_aug[i]) {
      d_aug[i]->d_weak -= static_cast<R>(2.0 * aw) * dw;
      d_aug[i]->d_strong -= static_cast<R>(2.0 * as) * ds;
    }
    if (d_orig.empty()) continue;
    if (desc.is_mix()) {
      for (Eigen::Index e = 0; e < dw.size(); ++e) {
        const int j = route_w(e, 0);
        if (j < 0) continue;
        PredGrad<R>* g = d_orig[static_cast<std::size_t>((*mix_set)[static_cast<std::size_t>(j)])];
        if (g) g->d_weak[e] += static_cast<R>(2.0 * aw) * dw[e];
      }
      for (Eigen::Index e = 0; e < ds.size(); ++e) {
        const int j = route_s.data()[e];
        if (j < 0) continue;
        PredGrad<R>* g = d_orig[static_cast<std::size_t>((*mix_set)[static_cast<std::size_t>(j)])];
        if (g) g->d_strong.data()[e] += static_cast<R>(2.0 * as) * ds.data()[e];
      }
    } else if (d_orig[i]) {
      d_orig[i]->d_weak += static_cast<R>(2.0 * aw) * dw;
      d_orig[i]->d_strong +=
          static_cast<R>(2.0 * as) *
          (desc.transform.kind == aug::LabelTransform::Kind::kShift
               ? aug::rotate_rows(ds, -desc.transform.n_out, t_out)
               : ds);
    }
  }
  return total;
}

// Teacher-to-student consistency: MSE between the transformed teacher
// predictions on original samples (constants) and the student predictions on
// augmented samples. `include` limits which augmented samples contribute
// (empty = all). Replaces both the teacher MSE and the self-consistency term
// for the teacher-consistency strategies.
template <typename R>
double ict_consistency_loss(const std::vector<const Predictions<R>*>& teacher_orig,
                            const std::vector<const Predictions<R>*>& student_aug,
                            const AugDescriptor& desc, double r,
                            const std::vector<bool>& include = {},
                            const std::vector<PredGrad<R>*>& d_aug = {}) {
  const std::size_t n = student_aug.size();
  if (desc.is_mix() ? desc.mix_sets.size() != n : teacher_orig.size() != n) {
    throw ShapeError("ict_consistency_loss: branch size mismatch");
  }
  if (!include.empty() && include.size() != n) {
    throw ShapeError("ict_consistency_loss: include mask size mismatch");
  }
  if (!d_aug.empty() && d_aug.size() != n) {
    throw ShapeError("ict_consistency_loss: gradient slot mismatch");
  }
  std::size_t n_used = 0;
  for (std::size_t i = 0; i < n; ++i) n_used += (include.empty() || include[i]) ? 1u : 0u;
  if (n_used == 0 || r == 0.0) return 0.0;
  const Eigen::Index C = student_aug[0]->weak.size();
  const Eigen::Index t_out = student_aug[0]->strong.rows();
  const double aw = r / (static_cast<double>(n_used) * static_cast<double>(C));
  const double as = aw / static_cast<double>(t_out);

  auto teacher_at = [&](std::size_t j) -> const Predictions<R>& {
    const Predictions<R>* t = teacher_orig[j];
    if (!t) throw StateError("ict_consistency_loss: missing teacher prediction");
    detail::check_pred_shape(*t, t_out, C, "ict_consistency_loss");
    return *t;
  };

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!include.empty() && !include[i]) continue;
    detail::check_pred_shape(*student_aug[i], t_out, C, "ict_consistency_loss");
    VecT<R> dw;
    MatT<R> ds;
    if (desc.is_mix()) {
      Eigen::MatrixXi route_w, route_s;
      std::vector<const VecT<R>*> weak_src;
      std::vector<const MatT<R>*> strong_src;
      for (int j : desc.mix_sets[i]) {
        if (j < 0 || static_cast<std::size_t>(j) >= teacher_orig.size()) {
          throw ShapeError("ict_consistency_loss: mix set index out of range");
        }
        const Predictions<R>& t = teacher_at(static_cast<std::size_t>(j));
        weak_src.push_back(&t.weak);
        strong_src.push_back(&t.strong);
      }
      detail::mix_transform(weak_src, dw, route_w);
      detail::mix_transform(strong_src, ds, route_s);
    } else {
      const Predictions<R>& t = teacher_at(i);
      dw = t.weak;
      ds = desc.transform.kind == aug::LabelTransform::Kind::kShift
               ? aug::rotate_rows(t.strong, desc.transform.n_out, t_out)
               : t.strong;
    }
    dw -= student_aug[i]->weak;
    ds -= student_aug[i]->strong;
    total += aw * dw.squaredNorm() + as * ds.squaredNorm();
    if (!d_aug.empty() && d_aug[i]) {
      d_aug[i]->d_weak -= static_cast<R>(2.0 * aw) * dw;
      d_aug[i]->d_strong -= static_cast<R>(2.0 * as) * ds;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Branch construction

// One view of a step batch: the clips the student sees, the supervision
// targets valid for that view, and how predictions map back to the plain
// batch. Sample i in every branch derives from batch sample i (mix branches
// pair it with a same-kind partner).
struct Branch {
  std::vector<features::MelClip> storage;       // owns augmented clips
  std::vector<const features::MelClip*> clips;  // size N
  std::vector<SampleLabels<float>> labels;
  AugDescriptor aug;
  bool consistency = false;  // compared against the plain branch by SC/ICT
};

namespace detail {

inline SampleLabels<float> labels_for(const TrainSample& s) {
  SampleLabels<float> out;
  if (s.kind == SampleKind::kStrong) {
    out.has_strong = true;
    out.strong = s.strong.cast<float>();
    out.has_weak = true;  // the clip-level max of the frame labels
    out.weak = out.strong.colwise().maxCoeff().transpose();
  } else if (s.kind == SampleKind::kWeak) {
    out.has_weak = true;
    out.weak = s.weak.cast<float>();
  }
  return out;
}

inline Branch make_orig_branch(const std::vector<const TrainSample*>& batch) {
  Branch b;
  b.clips.reserve(batch.size());
  b.labels.reserve(batch.size());
  for (const TrainSample* s : batch) {
    b.clips.push_back(&s->clip);
    b.labels.push_back(labels_for(*s));
  }
  return b;
}

inline int class_count(const std::vector<const TrainSample*>& batch) {
  for (const TrainSample* s : batch) {
    if (s->weak.size()) return static_cast<int>(s->weak.size());
    if (s->strong.size()) return static_cast<int>(s->strong.cols());
  }
  return 0;
}

// Same-kind partner for each batch index: one draw from the other members of
// its annotation kind (the sample itself when it is alone in its kind).
inline std::vector<int> draw_partners(const std::vector<const TrainSample*>& batch, Rng& rng) {
  std::vector<std::vector<int>> by_kind(3);
  std::vector<int> pos(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto& list = by_kind[static_cast<std::size_t>(batch[i]->kind)];
    pos[i] = static_cast<int>(list.size());
    list.push_back(static_cast<int>(i));
  }
  std::vector<int> partner(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& list = by_kind[static_cast<std::size_t>(batch[i]->kind)];
    if (list.size() < 2) {
      partner[i] = static_cast<int>(i);
      continue;
    }
    const int k = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(list.size()) - 2));
    partner[i] = list[static_cast<std::size_t>(k >= pos[i] ? k + 1 : k)];
  }
  return partner;
}

inline Branch make_hard_mix_branch(const std::vector<const TrainSample*>& batch, Rng& rng) {
  Branch b;
  b.consistency = true;
  b.aug.transform = aug::label_transform_for_mix();
  const int C = class_count(batch);
  const std::vector<int> partner = draw_partners(batch, rng);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainSample& a = *batch[i];
    const TrainSample& p = *batch[static_cast<std::size_t>(partner[i])];
    const bool strong = a.kind == SampleKind::kStrong;
    const Vec weak_a = a.weak.size() ? a.weak : Vec::Zero(C);
    const Vec weak_p = p.weak.size() ? p.weak : Vec::Zero(C);
    aug::MixedSample mixed = aug::hard_mixup(
        {a.clip, p.clip}, {weak_a, weak_p},
        strong ? std::vector<Mat>{a.strong, p.strong} : std::vector<Mat>{});
    b.storage.push_back(std::move(mixed.clip));
    SampleLabels<float> lab;
    if (strong) {
      lab.has_strong = true;
      lab.strong = mixed.strong.cast<float>();
      lab.has_weak = true;
      lab.weak = lab.strong.colwise().maxCoeff().transpose();
    } else if (a.kind == SampleKind::kWeak) {
      lab.has_weak = true;
      lab.weak = mixed.weak.cast<float>();
    }
    b.labels.push_back(std::move(lab));
    b.aug.mix_sets.push_back({static_cast<int>(i), partner[i]});
  }
  for (const auto& clip : b.storage) b.clips.push_back(&clip);
  return b;
}

inline Branch make_vanilla_mix_branch(const std::vector<const TrainSample*>& batch, double alpha,
                                      Rng& rng) {
  Branch b;
  const int C = class_count(batch);
  const std::vector<int> partner = draw_partners(batch, rng);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainSample& a = *batch[i];
    const TrainSample& p = *batch[static_cast<std::size_t>(partner[i])];
    const double lambda = aug::sample_beta(alpha, rng);
    const bool strong = a.kind == SampleKind::kStrong;
    const Vec weak_a = a.weak.size() ? a.weak : Vec::Zero(C);
    const Vec weak_p = p.weak.size() ? p.weak : Vec::Zero(C);
    aug::MixedSample mixed =
        aug::vanilla_mixup(a.clip, p.clip, weak_a, weak_p, strong ? a.strong : Mat(),
                               strong ? p.strong : Mat(), lambda);
    b.storage.push_back(std::move(mixed.clip));
    SampleLabels<float> lab;
    if (strong) {
      lab.has_strong = true;
      lab.strong = mixed.strong.cast<float>();
      lab.has_weak = true;
      lab.weak = mixed.weak.cast<float>();
    } else if (a.kind == SampleKind::kWeak) {
      lab.has_weak = true;
      lab.weak = mixed.weak.cast<float>();
    }
    b.labels.push_back(std::move(lab));
  }
  for (const auto& clip : b.storage) b.clips.push_back(&clip);
  return b;
}

inline Branch warp_labels(const std::vector<const TrainSample*>& batch,
                          const aug::LabelTransform& t) {
  Branch b;
  b.consistency = true;
  b.aug.transform = t;
  for (const TrainSample* s : batch) {
    SampleLabels<float> lab = labels_for(*s);
    if (lab.has_strong && t.kind == aug::LabelTransform::Kind::kShift) {
      lab.strong = aug::rotate_rows(lab.strong, t.n_out, lab.strong.rows());
      lab.weak = lab.strong.colwise().maxCoeff().transpose();
    }
    b.labels.push_back(std::move(lab));
  }
  return b;
}

inline Branch make_warp_branch(const std::vector<const TrainSample*>& batch, int d_max,
                               Eigen::Index t_out, Rng& rng) {
  std::vector<features::MelClip> clips;
  clips.reserve(batch.size());
  for (const TrainSample* s : batch) clips.push_back(s->clip);
  auto [warped, choice] = aug::random_warp(clips, d_max, t_out, rng);
  Branch b = warp_labels(batch, aug::label_transform_for(choice));
  b.storage = std::move(warped);
  for (const auto& clip : b.storage) b.clips.push_back(&clip);
  return b;
}

inline Branch make_shift_branch(const std::vector<const TrainSample*>& batch, int d_max,
                                Eigen::Index t_out, Rng& rng) {
  aug::WarpChoice choice;
  choice.method = aug::WarpChoice::Method::kTimeShift;
  choice.d = static_cast<int>(rng.uniform_int(1, d_max));
  choice.direction = 1;
  const int n_out = aug::shift_frames_for(choice.d);
  Branch b = warp_labels(batch, aug::label_transform_for(choice));
  b.storage.reserve(batch.size());
  for (const TrainSample* s : batch) {
    b.storage.push_back(aug::shift_clip_by_frames(s->clip, n_out, t_out));
  }
  for (const auto& clip : b.storage) b.clips.push_back(&clip);
  return b;
}

// Branch sets per strategy, in construction (and rng draw) order. The plain
// branch is always index 0.
inline std::vector<Branch> build_branches(const TrainConfig& cfg,
                                          const std::vector<const TrainSample*>& batch,
                                          Eigen::Index t_out, Rng& rng) {
  std::vector<Branch> branches;
  branches.push_back(make_orig_branch(batch));
  if (!cfg.augmentation) return branches;
  switch (cfg.strategy) {
    case Strategy::kBaseline:
      break;
    case Strategy::kVanillaMixup:
      branches.push_back(make_vanilla_mix_branch(batch, cfg.mixup_alpha, rng));
      break;
    case Strategy::kHardMixup:
      branches.push_back(make_hard_mix_branch(batch, rng));
      break;
    case Strategy::kRandWarp:
    case Strategy::kRct:
    case Strategy::kIct:
      branches.push_back(make_hard_mix_branch(batch, rng));
      branches.push_back(make_warp_branch(batch, cfg.d_max, t_out, rng));
      break;
    case Strategy::kSct:
      branches.push_back(make_hard_mix_branch(batch, rng));
      branches.push_back(make_shift_branch(batch, cfg.d_max, t_out, rng));
      break;
    case Strategy::kIctSct:
      branches.push_back(make_hard_mix_branch(batch, rng));
      branches.push_back(make_warp_branch(batch, cfg.d_max, t_out, rng));
      branches.push_back(make_shift_branch(batch, cfg.d_max, t_out, rng));
      break;
  }
  return branches;
}

inline bool uses_teacher_consistency(Strategy s) {
  return s == Strategy::kIct || s == Strategy::kSct || s == Strategy::kIctSct;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loop

struct LossReport {
  std::int64_t step = 0;
  double supervised = 0.0;
  double meanteacher = 0.0;       // teacher-consistency value for ict/sct modes
  double self_consistency = 0.0;
  double total = 0.0;
};

struct TrainResult {
  std::vector<LossReport> reports;  // one per step
  std::vector<double> val_curve;    // per-epoch validation BCE
  int best_epoch = -1;
  Tensors<float> student, teacher;            // final
  Tensors<float> best_student, best_teacher;  // at the best validation epoch
  ModelConfig net;
};

// Mean per-element BCE of the model on strongly-annotated clips.
inline double validation_bce(const ModelConfig& net, const Tensors<float>& params,
                             const std::vector<TrainSample>& val) {
  std::vector<Predictions<float>> preds;
  std::vector<SampleLabels<float>> labels;
  preds.reserve(val.size());
  labels.reserve(val.size());
  for (const TrainSample& s : val) {
    const MatT<float> mel = s.clip.values.cast<float>();
    preds.push_back(model::forward<float>(net, params, mel, nullptr));
    labels.push_back(detail::labels_for(s));
  }
  std::vector<const Predictions<float>*> pp;
  std::vector<const SampleLabels<float>*> lp;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    pp.push_back(&preds[i]);
    lp.push_back(&labels[i]);
  }
  return supervised_loss<float>(pp, lp);
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct MetricsWriter {
  std::ofstream out;
  explicit MetricsWriter(const std::filesystem::path& dir) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    out.open(dir / "metrics.csv");
    if (!out) throw IoError("train: cannot open metrics.csv under " + dir.string());
    out << "epoch,step,supervised,meanteacher,self_consistency,total,val_bce,lr,r\n";
  }
  void row(int epoch, const LossReport& rep, double lr, double r, const std::string& val) {
    if (!out.is_open()) return;
    out << epoch << ',' << rep.step << ',' << fmt_double(rep.supervised) << ','
        << fmt_double(rep.meanteacher) << ',' << fmt_double(rep.self_consistency) << ','
        << fmt_double(rep.total) << ',' << val << ',' << fmt_double(lr) << ',' << fmt_double(r)
        << '\n';
  }
  void flush() {
    if (out.is_open()) out.flush();
  }
};

struct SplitSampler {
  const std::vector<TrainSample>* samples = nullptr;
  std::vector<int> order;

  explicit SplitSampler(const std::vector<TrainSample>& s) : samples(&s) {
    order.resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) order[i] = static_cast<int>(i);
  }
  void shuffle(Rng& rng) {
    if (!order.empty()) rng.shuffle(order);
  }
  void take(int step, int count, std::vector<const TrainSample*>& sink) const {
    if (order.empty() || count <= 0) return;
    const std::size_t n = order.size();
    for (int k = 0; k < count; ++k) {
      const std::size_t idx =
          (static_cast<std::size_t>(step) * static_cast<std::size_t>(count) +
           static_cast<std::size_t>(k)) %
          n;
      sink.push_back(&(*samples)[static_cast<std::size_t>(order[idx])]);
    }
  }
};

}  // namespace detail

// Invoked after each epoch with the epoch's last step report and its
// validation BCE (NaN when no validation split is present).
using EpochHook = std::function<void(int epoch, const LossReport& last_step, double val_bce)>;

inline TrainResult train(const TrainConfig& cfg, const TrainData& data,
                         const std::filesystem::path& out_dir = {},
                         const EpochHook& on_epoch = {}) {
  cfg.validate();
  if (data.n_classes < 1) throw ConfigError("train: n_classes < 1");
  if (data.strong.empty() && data.weak.empty() && data.unlabeled.empty()) {
    throw ConfigError("train: empty dataset");
  }
  const ModelConfig net = model_config_for(cfg, data.n_classes);
  const std::vector<TrainSample>& any_split =
      !data.strong.empty() ? data.strong : (!data.weak.empty() ? data.weak : data.unlabeled);
  const Eigen::Index t_in = any_split.front().clip.values.rows();
  const Eigen::Index t_out = t_in / model::kTotalTimePool;
  auto check_split = [&](const std::vector<TrainSample>& split, const char* name) {
    for (const TrainSample& s : split) {
      if (s.clip.values.rows() != t_in || s.clip.values.cols() != net.n_mels) {
        throw ShapeError(std::string("train: clip shape mismatch in ") + name);
      }
      if (s.kind == SampleKind::kStrong &&
          (s.strong.rows() != t_out || s.strong.cols() != net.n_classes)) {
        throw ShapeError(std::string("train: strong label shape mismatch in ") + name);
      }
    }
  };
  check_split(data.strong, "strong");
  check_split(data.weak, "weak");
  check_split(data.unlabeled, "unlabeled");
  check_split(data.val, "val");

  Tensors<float> params = model::init_params<float>(net, cfg.seed);
  Tensors<float> teacher = params;
  AdamState<float> adam = make_adam_state(params);
  Tensors<float> grads = params;

  detail::SplitSampler strong_split(data.strong), weak_split(data.weak),
      unlabeled_split(data.unlabeled);
  const int steps_per_epoch = std::max<int>(
      1, !data.strong.empty()
             ? static_cast<int>((data.strong.size() + cfg.batch_strong - 1) / cfg.batch_strong)
             : (!data.weak.empty()
                    ? static_cast<int>((data.weak.size() + cfg.batch_weak - 1) / cfg.batch_weak)
                    : static_cast<int>((data.unlabeled.size() + cfg.batch_unlabeled - 1) /
                                       cfg.batch_unlabeled)));
  const std::int64_t warmup_steps =
      static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;

  Rng batch_rng = Rng::substream(cfg.seed, "batch-order");
  Rng aug_rng = Rng::substream(cfg.seed, "augment");
  detail::MetricsWriter metrics(out_dir);
  const bool teacher_consistency = detail::uses_teacher_consistency(cfg.strategy);

  TrainResult res;
  res.net = net;
  double best_val = std::numeric_limits<double>::infinity();
  std::int64_t step = 0;

  auto write_final_checkpoint = [&]() {
    if (out_dir.empty()) return;
    model::save_checkpoint(out_dir / "checkpoint_final.bin", net, params, teacher);
    if (res.best_epoch >= 0) {
      model::save_checkpoint(out_dir / "checkpoint_best.bin", net, res.best_student,
                             res.best_teacher);
    } else {
      model::save_checkpoint(out_dir / "checkpoint_best.bin", net, params, teacher);
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    strong_split.shuffle(batch_rng);
    weak_split.shuffle(batch_rng);
    unlabeled_split.shuffle(batch_rng);
    struct PendingRow {
      LossReport rep;
      double lr, r;
    };
    std::vector<PendingRow> epoch_rows;

    auto flush_epoch_rows = [&](const std::string& val_cell) {
      for (std::size_t i = 0; i < epoch_rows.size(); ++i) {
        const bool last = i + 1 == epoch_rows.size();
        metrics.row(epoch, epoch_rows[i].rep, epoch_rows[i].lr, epoch_rows[i].r,
                    last ? val_cell : "");
      }
      metrics.flush();
      epoch_rows.clear();
    };

    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<const TrainSample*> batch;
      strong_split.take(s, cfg.batch_strong, batch);
      weak_split.take(s, cfg.batch_weak, batch);
      unlabeled_split.take(s, cfg.batch_unlabeled, batch);
      const std::size_t n = batch.size();
      std::vector<bool> unlabeled_mask(n);
      for (std::size_t i = 0; i < n; ++i) {
        unlabeled_mask[i] = batch[i]->kind == SampleKind::kUnlabeled;
      }

      const double lr = lr_schedule(step, warmup_steps, cfg.lr_max);
      const double r = ramp(step, warmup_steps, cfg.consistency_max);

      std::vector<Branch> branches = detail::build_branches(cfg, batch, t_out, aug_rng);
      const std::size_t nb = branches.size();

      LossReport rep;
      rep.step = step;
      try {
        // student forward on every branch sample
        std::vector<std::vector<Predictions<float>>> preds(nb);
        std::vector<std::vector<model::ActivationCache<float>>> caches(nb);
        std::vector<std::vector<PredGrad<float>>> pg(nb);
        for (std::size_t b = 0; b < nb; ++b) {
          preds[b].resize(n);
          caches[b].resize(n);
          pg[b].resize(n);
          for (std::size_t i = 0; i < n; ++i) {
            const MatT<float> mel = branches[b].clips[i]->values.cast<float>();
            preds[b][i] = model::forward<float>(net, params, mel, &caches[b][i]);
            pg[b][i].init(t_out, net.n_classes);
          }
        }

        // teacher forward where a consistency term will read it
        std::vector<std::vector<std::optional<Predictions<float>>>> tpreds(nb);
        if (!teacher_consistency) {
          for (std::size_t b = 0; b < nb; ++b) {
            tpreds[b].resize(n);
            if (r == 0.0) continue;
            for (std::size_t i = 0; i < n; ++i) {
              if (!unlabeled_mask[i]) continue;
              const MatT<float> mel = branches[b].clips[i]->values.cast<float>();
              tpreds[b][i] = model::forward<float>(net, teacher, mel, nullptr);
            }
          }
        } else {
          tpreds[0].resize(n);
          if (r > 0.0) {
            for (std::size_t i = 0; i < n; ++i) {
              if (!unlabeled_mask[i]) continue;
              const MatT<float> mel = branches[0].clips[i]->values.cast<float>();
              tpreds[0][i] = model::forward<float>(net, teacher, mel, nullptr);
            }
          }
        }

        // supervised: every labelled sample of every branch, one pooled mean
        {
          std::vector<const Predictions<float>*> sp;
          std::vector<const SampleLabels<float>*> sl;
          std::vector<PredGrad<float>*> sg;
          for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
              const SampleLabels<float>& lab = branches[b].labels[i];
              if (!lab.has_weak && !lab.has_strong) continue;
              sp.push_back(&preds[b][i]);
              sl.push_back(&lab);
              sg.push_back(&pg[b][i]);
            }
          }
          rep.supervised = supervised_loss<float>(sp, sl, sg);
        }

        // consistency terms
        std::vector<std::size_t> cons;  // branches compared against branch 0
        for (std::size_t b = 1; b < nb; ++b) {
          if (branches[b].consistency) cons.push_back(b);
        }
        std::vector<const Predictions<float>*> orig_ptr(n);
        for (std::size_t i = 0; i < n; ++i) orig_ptr[i] = &preds[0][i];
        std::vector<PredGrad<float>*> orig_grad(n);
        for (std::size_t i = 0; i < n; ++i) orig_grad[i] = &pg[0][i];

        if (!teacher_consistency) {
          std::vector<std::vector<const Predictions<float>*>> st(nb), te(nb);
          std::vector<std::vector<PredGrad<float>*>> mg(nb);
          for (std::size_t b = 0; b < nb; ++b) {
            st[b].resize(n);
            te[b].resize(n);
            mg[b].resize(n);
            for (std::size_t i = 0; i < n; ++i) {
              st[b][i] = &preds[b][i];
              te[b][i] = tpreds[b][i] ? &*tpreds[b][i] : nullptr;
              mg[b][i] = &pg[b][i];
            }
          }
          rep.meanteacher = meanteacher_loss<float>(st, te, unlabeled_mask, r, mg);

          if (cfg.strategy == Strategy::kRct && !cons.empty()) {
            const double r_each = r / static_cast<double>(cons.size());
            for (std::size_t b : cons) {
              std::vector<const Predictions<float>*> aug_ptr(n);
              std::vector<PredGrad<float>*> aug_grad(n);
              for (std::size_t i = 0; i < n; ++i) {
                aug_ptr[i] = &preds[b][i];
                aug_grad[i] = &pg[b][i];
              }
              rep.self_consistency += self_consistency_loss<float>(
                  orig_ptr, aug_ptr, branches[b].aug, r_each, orig_grad, aug_grad);
            }
          }
        } else if (!cons.empty()) {
          std::vector<const Predictions<float>*> teach(n);
          for (std::size_t i = 0; i < n; ++i) {
            teach[i] = tpreds[0][i] ? &*tpreds[0][i] : nullptr;
          }
          const double r_each = r / static_cast<double>(cons.size());
          for (std::size_t b : cons) {
            std::vector<const Predictions<float>*> aug_ptr(n);
            std::vector<PredGrad<float>*> aug_grad(n);
            for (std::size_t i = 0; i < n; ++i) {
              aug_ptr[i] = &preds[b][i];
              aug_grad[i] = &pg[b][i];
            }
            rep.meanteacher += ict_consistency_loss<float>(teach, aug_ptr, branches[b].aug,
                                                           r_each, unlabeled_mask, aug_grad);
          }
        }

        rep.total = rep.supervised + rep.meanteacher + rep.self_consistency;
        if (!std::isfinite(rep.total)) {
          throw NumericalError("train: non-finite loss at step " + std::to_string(step));
        }

        grads.set_zero();
        for (std::size_t b = 0; b < nb; ++b) {
          for (std::size_t i = 0; i < n; ++i) {
            model::backward<float>(net, params, caches[b][i], pg[b][i].d_strong, pg[b][i].d_weak,
                                   grads);
          }
        }
        adam_step(params, grads, adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        model::ema_update(teacher, params, cfg.ema_decay);
      } catch (const NumericalError&) {
        flush_epoch_rows("");
        write_final_checkpoint();
        throw;
      }

      res.reports.push_back(rep);
      epoch_rows.push_back({rep, lr, r});
      ++step;
    }

    std::string val_cell;
    double epoch_val = std::numeric_limits<double>::quiet_NaN();
    if (!data.val.empty()) {
      const double val = validation_bce(net, params, data.val);
      res.val_curve.push_back(val);
      val_cell = detail::fmt_double(val);
      epoch_val = val;
      if (val < best_val) {
        best_val = val;
        res.best_epoch = epoch;
        res.best_student = params;
        res.best_teacher = teacher;
      }
    }
    flush_epoch_rows(val_cell);
    if (on_epoch) on_epoch(epoch, res.reports.back(), epoch_val);
  }

  res.student = params;
  res.teacher = teacher;
  if (res.best_epoch < 0) {
    res.best_student = res.student;
    res.best_teacher = res.teacher;
  }
  write_final_checkpoint();
  return res;
}

}  // namespace rct::train
