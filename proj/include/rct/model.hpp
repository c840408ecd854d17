// CRNN for frame-level sound event detection: conv blocks with context
// gating and average pooling, a bidirectional GRU, and sigmoid strong /
// attention-pooled weak heads. Forward and reverse-mode backward are written
// out explicitly over a flat named-tensor registry, which also serves the
// EMA teacher, Adam, and checkpoint io.
#pragma once

#include <rct/core.hpp>
#include <rct/rng.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace rct::model {

struct ModelConfig {
  int n_mels = 128;   // K, must be divisible by 64 (three 4x frequency pools)
  int n_classes = 4;  // C
  std::array<int, 3> channels = {16, 32, 64};
  int gru_hidden = 32;
  int gru_layers = 1;  // 1 or 2

  void validate() const {
    if (n_mels < 64 || n_mels % 64 != 0) throw ConfigError("ModelConfig: n_mels % 64 != 0");
    if (n_classes < 1) throw ConfigError("ModelConfig: n_classes < 1");
    for (int c : channels) {
      if (c < 1) throw ConfigError("ModelConfig: conv channels < 1");
    }
    if (gru_hidden < 1) throw ConfigError("ModelConfig: gru_hidden < 1");
    if (gru_layers != 1 && gru_layers != 2) throw ConfigError("ModelConfig: gru_layers not 1|2");
  }

  std::string describe() const {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "K=%d;C=%d;ch=%d,%d,%d;h=%d;layers=%d", n_mels, n_classes,
                  channels[0], channels[1], channels[2], gru_hidden, gru_layers);
    return buf;
  }

  uint64_t hash() const {
    const std::string s = describe();
    return fnv1a64(s);
  }
};

// time pooling 2,2,1 and frequency pooling 4,4,4 across the three blocks
inline constexpr int kTimePool[3] = {2, 2, 1};
inline constexpr int kFreqPool[3] = {4, 4, 4};
inline constexpr int kTotalTimePool = 4;

// ---------------------------------------------------------------------------
// Named tensor registry (insertion-ordered; all iteration is deterministic)

template <typename R>
class Tensors {
 public:
  using Matrix = MatT<R>;

  Matrix& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw StateError("Tensors: duplicate name " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, Matrix::Zero(rows, cols));
    return items_.back().second;
  }

  Matrix& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("Tensors: missing " + name);
    return items_[it->second].second;
  }
  const Matrix& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("Tensors: missing " + name);
    return items_[it->second].second;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  bool same_shape(const Tensors& other) const {
    if (items_.size() != other.items_.size()) return false;
    for (size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].first != other.items_[i].first ||
          items_[i].second.rows() != other.items_[i].second.rows() ||
          items_[i].second.cols() != other.items_[i].second.cols()) {
        return false;
      }
    }
    return true;
  }

  void set_zero() {
    for (auto& [name, m] : items_) m.setZero();
  }

  Eigen::Index total_coeffs() const {
    Eigen::Index n = 0;
    for (const auto& [name, m] : items_) n += m.size();
    return n;
  }

  template <typename R2>
  Tensors<R2> cast() const {
    Tensors<R2> out;
    for (const auto& [name, m] : items_) {
      out.add(name, m.rows(), m.cols()) = m.template cast<R2>();
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, Matrix>> items_;
  std::unordered_map<std::string, size_t> index_;
};

namespace detail {

inline std::string block_name(const char* kind, int i) {
  return std::string(kind) + std::to_string(i + 1);
}

inline const char* kGruGate[3] = {"z", "r", "n"};

}  // namespace detail

// Declares every parameter tensor (zero-filled) in canonical order.
template <typename R>
Tensors<R> make_param_shapes(const ModelConfig& cfg) {
  cfg.validate();
  Tensors<R> p;
  int in_ch = 1;
  for (int i = 0; i < 3; ++i) {
    const int out_ch = cfg.channels[static_cast<size_t>(i)];
    p.add(detail::block_name("conv", i) + ".w", 9 * in_ch, out_ch);
    p.add(detail::block_name("conv", i) + ".b", 1, out_ch);
    p.add(detail::block_name("gate", i) + ".w", out_ch, out_ch);
    p.add(detail::block_name("gate", i) + ".b", 1, out_ch);
    in_ch = out_ch;
  }
  int gru_in = cfg.channels[2];
  for (int l = 0; l < cfg.gru_layers; ++l) {
    for (const char* dir : {"fwd", "bwd"}) {
      const std::string base = detail::block_name("gru", l) + "." + dir + ".";
      for (const char* g : detail::kGruGate) {
        p.add(base + "w" + g, gru_in, cfg.gru_hidden);
        p.add(base + "u" + g, cfg.gru_hidden, cfg.gru_hidden);
        p.add(base + "b" + g, 1, cfg.gru_hidden);
      }
    }
    gru_in = 2 * cfg.gru_hidden;
  }
  p.add("head.strong.w", 2 * cfg.gru_hidden, cfg.n_classes);
  p.add("head.strong.b", 1, cfg.n_classes);
  p.add("head.att.w", 2 * cfg.gru_hidden, cfg.n_classes);
  p.add("head.att.b", 1, cfg.n_classes);
  return p;
}

// Glorot-uniform weights (limit sqrt(6/(rows+cols))), zero biases.
template <typename R>
Tensors<R> init_params(const ModelConfig& cfg, uint64_t seed) {
  Tensors<R> p = make_param_shapes<R>(cfg);
  Rng rng = Rng::substream(seed, "init");
  for (auto& [name, m] : p) {
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<R>(rng.uniform(-limit, limit));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Primitives

template <typename R>
using RowT = Eigen::Matrix<R, 1, Eigen::Dynamic>;

// y = x .* sigmoid(x W + b): each location's channel vector is scaled by a
// learned gate computed from the same channel vector. Optionally returns the
// gate activations for backward.
template <typename R>
MatT<R> context_gate(const MatT<R>& x, const MatT<R>& w, const MatT<R>& b,
                     MatT<R>* sig_out = nullptr) {
  if (w.rows() != x.cols() || w.cols() != x.cols() || b.cols() != x.cols()) {
    throw ShapeError("context_gate: weight shape mismatch");
  }
  MatT<R> g = x * w;
  g.rowwise() += b.row(0);
  MatT<R> s = ((-g.array()).exp() + R(1)).inverse().matrix();
  if (sig_out) *sig_out = s;
  return x.cwiseProduct(s);
}

template <typename R>
struct GruStep {
  RowT<R> z, r, n, h;
};

// One GRU step: z = sig(xWz + hUz + bz), r = sig(xWr + hUr + br),
// n = tanh(xWn + (r.*h)Un + bn), h' = (1-z).*n + z.*h.
template <typename R>
GruStep<R> gru_cell(const RowT<R>& x, const RowT<R>& h_prev, const MatT<R>& wz,
                    const MatT<R>& uz, const MatT<R>& bz, const MatT<R>& wr, const MatT<R>& ur,
                    const MatT<R>& br, const MatT<R>& wn, const MatT<R>& un, const MatT<R>& bn) {
  const auto sig = [](R v) { return R(1) / (R(1) + std::exp(-v)); };
  GruStep<R> step;
  step.z = (x * wz + h_prev * uz + bz.row(0)).unaryExpr(sig);
  step.r = (x * wr + h_prev * ur + br.row(0)).unaryExpr(sig);
  step.n = (x * wn + h_prev.cwiseProduct(step.r) * un + bn.row(0)).array().tanh().matrix();
  step.h = (RowT<R>::Ones(step.z.cols()) - step.z).cwiseProduct(step.n) +
           step.z.cwiseProduct(h_prev);
  return step;
}

// ---------------------------------------------------------------------------
// Forward

template <typename R>
struct Predictions {
  MatT<R> strong;         // T' x C probabilities
  MatT<R> strong_logits;  // T' x C
  MatT<R> att;            // T' x C, columns sum to 1
  MatT<R> att_logits;     // T' x C
  VecT<R> weak;           // C
};

// Everything backward() needs, per clip. Activations are stored as
// (locations x channels) matrices with location index t * F + f.
template <typename R>
struct ActivationCache {
  uint64_t config_hash = 0;
  int t_in = 0;  // cropped input frames
  std::array<int, 3> conv_t{}, conv_f{};        // location grid per conv input
  std::array<MatT<R>, 3> conv_in;               // input to conv i (im2col source)
  std::array<MatT<R>, 3> conv_out;              // Z = conv(x)
  std::array<MatT<R>, 3> gate_sig;              // S = sigmoid(Z Wg + bg)
  std::array<MatT<R>, 3> gated;                 // Y = Z .* S
  MatT<R> rnn_in;                               // T' x channels[2] after freq mean
  int freq_residual = 0;
  // per layer, per direction: stacked step rows (in forward-time order)
  std::vector<std::array<MatT<R>, 2>> gru_x, gru_z, gru_r, gru_n, gru_hprev;
  std::vector<MatT<R>> gru_out;                 // T' x 2H per layer
  Predictions<R> preds;
};

namespace detail {

// Columns are laid out tap-major (tap * C + c) and the matrix is column-major,
// so each (tap, channel) plane is one contiguous span of T*F values.
template <typename R>
using TapMatT = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename R>
TapMatT<R> im2col(const MatT<R>& x, int T, int F) {
  const int C = static_cast<int>(x.cols());
  const size_t n = static_cast<size_t>(T) * F;
  TapMatT<R> col = TapMatT<R>::Zero(static_cast<Eigen::Index>(n), 9 * C);
  for (int dt = -1; dt <= 1; ++dt) {
    for (int df = -1; df <= 1; ++df) {
      const int tap = (dt + 1) * 3 + (df + 1);
      const int t0 = std::max(0, -dt), t1 = T - std::max(0, dt);
      const int f_lo = std::max(0, -df);
      const int len = F - std::max(0, df) - f_lo;
      if (len <= 0 || t1 <= t0) continue;
      for (int c = 0; c < C; ++c) {
        R* plane = col.data() + static_cast<size_t>(tap * C + c) * n;
        const R* src = x.data() + c;
        if (C == 1 && df == 0) {  // whole rows: one contiguous copy across t
          std::memcpy(plane + static_cast<size_t>(t0) * F, src + static_cast<size_t>(t0 + dt) * F,
                      static_cast<size_t>(t1 - t0) * F * sizeof(R));
          continue;
        }
        for (int t = t0; t < t1; ++t) {
          R* d = plane + static_cast<size_t>(t) * F + f_lo;
          const R* s = src + (static_cast<size_t>(t + dt) * F + f_lo + df) * C;
          if (C == 1) {
            std::memcpy(d, s, static_cast<size_t>(len) * sizeof(R));
          } else {
            for (int f = 0; f < len; ++f) d[f] = s[static_cast<size_t>(f) * C];
          }
        }
      }
    }
  }
  return col;
}

// adjoint of im2col: scatter-add column gradients back onto the input grid
template <typename R>
void im2col_backward(const TapMatT<R>& dcol, int T, int F, MatT<R>& dx) {
  const int C = static_cast<int>(dx.cols());
  const size_t n = static_cast<size_t>(T) * F;
  for (int dt = -1; dt <= 1; ++dt) {
    for (int df = -1; df <= 1; ++df) {
      const int tap = (dt + 1) * 3 + (df + 1);
      const int t0 = std::max(0, -dt), t1 = T - std::max(0, dt);
      const int f_lo = std::max(0, -df);
      const int len = F - std::max(0, df) - f_lo;
      if (len <= 0 || t1 <= t0) continue;
      for (int c = 0; c < C; ++c) {
        const R* plane = dcol.data() + static_cast<size_t>(tap * C + c) * n;
        R* dst = dx.data() + c;
        for (int t = t0; t < t1; ++t) {
          const R* s = plane + static_cast<size_t>(t) * F + f_lo;
          R* d = dst + (static_cast<size_t>(t + dt) * F + f_lo + df) * C;
          for (int f = 0; f < len; ++f) d[static_cast<size_t>(f) * C] += s[f];
        }
      }
    }
  }
}

template <typename R>
MatT<R> avg_pool(const MatT<R>& x, int T, int F, int pt, int pf) {
  const int To = T / pt, Fo = F / pf;
  const int C = static_cast<int>(x.cols());
  MatT<R> out = MatT<R>::Zero(static_cast<Eigen::Index>(To) * Fo, C);
  for (int t = 0; t < To * pt; ++t) {
    const R* xr = x.data() + static_cast<size_t>(t) * F * C;
    R* orow = out.data() + static_cast<size_t>(t / pt) * Fo * C;
    for (int fo = 0; fo < Fo; ++fo) {
      R* o = orow + static_cast<size_t>(fo) * C;
      const R* s = xr + static_cast<size_t>(fo) * pf * C;
      for (int df = 0; df < pf; ++df)
        for (int c = 0; c < C; ++c) o[c] += s[static_cast<size_t>(df) * C + c];
    }
  }
  out *= static_cast<R>(1.0 / (pt * pf));
  return out;
}

template <typename R>
MatT<R> avg_pool_backward(const MatT<R>& dout, int T, int F, int pt, int pf) {
  const int Fo = F / pf;
  const int C = static_cast<int>(dout.cols());
  MatT<R> dx = MatT<R>::Zero(static_cast<Eigen::Index>(T) * F, C);
  const R scale = static_cast<R>(1.0 / (pt * pf));
  for (int t = 0; t < (T / pt) * pt; ++t) {
    const R* drow = dout.data() + static_cast<size_t>(t / pt) * Fo * C;
    R* xr = dx.data() + static_cast<size_t>(t) * F * C;
    for (int fo = 0; fo < Fo; ++fo) {
      const R* s = drow + static_cast<size_t>(fo) * C;
      R* d = xr + static_cast<size_t>(fo) * pf * C;
      for (int df = 0; df < pf; ++df)
        for (int c = 0; c < C; ++c) d[static_cast<size_t>(df) * C + c] = s[c] * scale;
    }
  }
  return dx;
}

template <typename M>
void check_finite(const M& m, const std::string& where) {
  if (!m.allFinite()) throw NumericalError("forward: non-finite activation at " + where);
}

template <typename R>
MatT<R> sigmoid(const MatT<R>& x) {
  return ((-x.array()).exp() + R(1)).inverse().matrix();
}

}  // namespace detail

// Runs the network on one clip (T x K normalized log-mel, T cropped down to
// a multiple of 4). Pass a cache to enable backward().
template <typename R>
Predictions<R> forward(const ModelConfig& cfg, const Tensors<R>& params, const MatT<R>& mel,
                       ActivationCache<R>* cache) {
  cfg.validate();
  if (mel.cols() != cfg.n_mels) throw ShapeError("forward: mel band count mismatch");
  const int t_in = static_cast<int>(mel.rows()) / kTotalTimePool * kTotalTimePool;
  if (t_in < kTotalTimePool) throw ShapeError("forward: clip too short");

  ActivationCache<R> local;
  ActivationCache<R>& c = cache ? *cache : local;
  c.config_hash = cfg.hash();
  c.t_in = t_in;

  // conv stack
  MatT<R> x = mel.topRows(t_in);  // T x K, one channel: locations (t*K+f) x 1
  x.resize(static_cast<Eigen::Index>(t_in) * cfg.n_mels, 1);
  int T = t_in, F = cfg.n_mels;
  for (int i = 0; i < 3; ++i) {
    const std::string conv = detail::block_name("conv", i);
    const std::string gate = detail::block_name("gate", i);
    c.conv_in[static_cast<size_t>(i)] = x;
    c.conv_t[static_cast<size_t>(i)] = T;
    c.conv_f[static_cast<size_t>(i)] = F;
    detail::TapMatT<R> col = detail::im2col(x, T, F);
    MatT<R> z = col * params.at(conv + ".w");
    z.rowwise() += params.at(conv + ".b").row(0);
    detail::check_finite(z, conv);
    MatT<R> s;
    MatT<R> y = context_gate(z, params.at(gate + ".w"), params.at(gate + ".b"), &s);
    detail::check_finite(y, gate);
    c.conv_out[static_cast<size_t>(i)] = z;
    c.gate_sig[static_cast<size_t>(i)] = s;
    c.gated[static_cast<size_t>(i)] = y;
    x = detail::avg_pool(y, T, F, kTimePool[i], kFreqPool[i]);
    T /= kTimePool[i];
    F /= kFreqPool[i];
  }

  // collapse the residual frequency axis by averaging
  c.freq_residual = F;
  const int t_out = T;
  MatT<R> rnn_in = MatT<R>::Zero(t_out, cfg.channels[2]);
  for (int t = 0; t < t_out; ++t) {
    for (int f = 0; f < F; ++f) rnn_in.row(t) += x.row(static_cast<Eigen::Index>(t) * F + f);
  }
  rnn_in *= static_cast<R>(1.0 / F);
  c.rnn_in = rnn_in;

  // bidirectional GRU stack
  const int H = cfg.gru_hidden;
  c.gru_x.resize(static_cast<size_t>(cfg.gru_layers));
  c.gru_z.resize(static_cast<size_t>(cfg.gru_layers));
  c.gru_r.resize(static_cast<size_t>(cfg.gru_layers));
  c.gru_n.resize(static_cast<size_t>(cfg.gru_layers));
  c.gru_hprev.resize(static_cast<size_t>(cfg.gru_layers));
  c.gru_out.resize(static_cast<size_t>(cfg.gru_layers));
  MatT<R> layer_in = rnn_in;
  for (int l = 0; l < cfg.gru_layers; ++l) {
    MatT<R> out = MatT<R>::Zero(t_out, 2 * H);
    for (int dir = 0; dir < 2; ++dir) {
      const std::string base =
          detail::block_name("gru", l) + "." + (dir == 0 ? "fwd" : "bwd") + ".";
      const auto& wz = params.at(base + "wz");
      const auto& uz = params.at(base + "uz");
      const auto& bz = params.at(base + "bz");
      const auto& wr = params.at(base + "wr");
      const auto& ur = params.at(base + "ur");
      const auto& br = params.at(base + "br");
      const auto& wn = params.at(base + "wn");
      const auto& un = params.at(base + "un");
      const auto& bn = params.at(base + "bn");
      auto& cx = c.gru_x[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      auto& cz = c.gru_z[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      auto& cr = c.gru_r[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      auto& cn = c.gru_n[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      auto& ch = c.gru_hprev[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      cx = layer_in;
      cz.resize(t_out, H);
      cr.resize(t_out, H);
      cn.resize(t_out, H);
      ch.resize(t_out, H);
      RowT<R> h = RowT<R>::Zero(H);
      for (int step = 0; step < t_out; ++step) {
        const int t = dir == 0 ? step : t_out - 1 - step;
        ch.row(t) = h;
        GruStep<R> g = gru_cell<R>(layer_in.row(t), h, wz, uz, bz, wr, ur, br, wn, un, bn);
        h = g.h;
        cz.row(t) = g.z;
        cr.row(t) = g.r;
        cn.row(t) = g.n;
        out.block(t, dir * H, 1, H) = h;
      }
      detail::check_finite(out.middleCols(dir * H, H), base + "h");
    }
    c.gru_out[static_cast<size_t>(l)] = out;
    layer_in = out;
  }

  // heads
  Predictions<R>& p = c.preds;
  p.strong_logits = layer_in * params.at("head.strong.w");
  p.strong_logits.rowwise() += params.at("head.strong.b").row(0);
  p.strong = detail::sigmoid(p.strong_logits);
  p.att_logits = layer_in * params.at("head.att.w");
  p.att_logits.rowwise() += params.at("head.att.b").row(0);
  detail::check_finite(p.strong, "head.strong");
  detail::check_finite(p.att_logits, "head.att");

  // per-class softmax over time
  p.att.resize(t_out, cfg.n_classes);
  for (int cl = 0; cl < cfg.n_classes; ++cl) {
    const R mx = p.att_logits.col(cl).maxCoeff();
    VecT<R> e = (p.att_logits.col(cl).array() - mx).exp();
    p.att.col(cl) = e / e.sum();
  }
  p.weak = (p.att.cwiseProduct(p.strong)).colwise().sum().transpose();
  return p;
}

// Accumulates (adds) gradients of a scalar loss into `grads`, given the loss
// gradient w.r.t. the strong probability matrix and the weak probability
// vector of one clip.
template <typename R>
void backward(const ModelConfig& cfg, const Tensors<R>& params, const ActivationCache<R>& cache,
              const MatT<R>& d_strong, const VecT<R>& d_weak, Tensors<R>& grads) {
  cfg.validate();
  if (cache.config_hash != cfg.hash()) throw StateError("backward: cache/config mismatch");
  const Predictions<R>& p = cache.preds;
  const int t_out = static_cast<int>(p.strong.rows());
  const int C = cfg.n_classes;
  const int H = cfg.gru_hidden;
  if (d_strong.rows() != t_out || d_strong.cols() != C || d_weak.size() != C) {
    throw ShapeError("backward: output gradient shape mismatch");
  }

  // weak[c] = sum_t att[t,c] * strong[t,c]
  MatT<R> ds = d_strong;
  MatT<R> da = MatT<R>::Zero(t_out, C);
  for (int cl = 0; cl < C; ++cl) {
    ds.col(cl) += d_weak[cl] * p.att.col(cl);
    da.col(cl) = d_weak[cl] * p.strong.col(cl);
  }
  // softmax over time, per class: datt_logit = a .* (da - sum(a .* da))
  MatT<R> datt_logits(t_out, C);
  for (int cl = 0; cl < C; ++cl) {
    const R inner = p.att.col(cl).dot(da.col(cl));
    datt_logits.col(cl) =
        p.att.col(cl).cwiseProduct(da.col(cl) - VecT<R>::Constant(t_out, inner));
  }
  // strong sigmoid
  MatT<R> dstrong_logits =
      ds.cwiseProduct(p.strong.cwiseProduct(MatT<R>::Constant(t_out, C, R(1)) - p.strong));

  const MatT<R>& h_top = cfg.gru_layers == 1 ? cache.gru_out[0] : cache.gru_out[1];
  grads.at("head.strong.w") += h_top.transpose() * dstrong_logits;
  grads.at("head.strong.b").row(0) += dstrong_logits.colwise().sum();
  grads.at("head.att.w") += h_top.transpose() * datt_logits;
  grads.at("head.att.b").row(0) += datt_logits.colwise().sum();
  MatT<R> dlayer = dstrong_logits * params.at("head.strong.w").transpose() +
                   datt_logits * params.at("head.att.w").transpose();

  // GRU stack, top down
  for (int l = cfg.gru_layers - 1; l >= 0; --l) {
    const auto& cx = cache.gru_x[static_cast<size_t>(l)];
    MatT<R> dlayer_in = MatT<R>::Zero(cx[0].rows(), cx[0].cols());
    for (int dir = 0; dir < 2; ++dir) {
      const std::string base =
          detail::block_name("gru", l) + "." + (dir == 0 ? "fwd" : "bwd") + ".";
      const auto& wz = params.at(base + "wz");
      const auto& uz = params.at(base + "uz");
      const auto& wr = params.at(base + "wr");
      const auto& ur = params.at(base + "ur");
      const auto& wn = params.at(base + "wn");
      const auto& un = params.at(base + "un");
      const auto& xin = cx[static_cast<size_t>(dir)];
      const auto& cz = cache.gru_z[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      const auto& cr = cache.gru_r[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      const auto& cn = cache.gru_n[static_cast<size_t>(l)][static_cast<size_t>(dir)];
      const auto& chp = cache.gru_hprev[static_cast<size_t>(l)][static_cast<size_t>(dir)];

      Eigen::Matrix<R, 1, Eigen::Dynamic> dh = Eigen::Matrix<R, 1, Eigen::Dynamic>::Zero(H);
      for (int step = t_out - 1; step >= 0; --step) {
        const int t = dir == 0 ? step : t_out - 1 - step;
        dh += dlayer.block(t, dir * H, 1, H);
        const auto z = cz.row(t);
        const auto r = cr.row(t);
        const auto n = cn.row(t);
        const auto hp = chp.row(t);

        Eigen::Matrix<R, 1, Eigen::Dynamic> dz_pre =
            dh.cwiseProduct(hp - n).cwiseProduct(z).cwiseProduct(
                Eigen::Matrix<R, 1, Eigen::Dynamic>::Ones(H) - z);
        Eigen::Matrix<R, 1, Eigen::Dynamic> dn_pre =
            dh.cwiseProduct(Eigen::Matrix<R, 1, Eigen::Dynamic>::Ones(H) - z)
                .cwiseProduct(Eigen::Matrix<R, 1, Eigen::Dynamic>::Ones(H) - n.cwiseProduct(n));
        Eigen::Matrix<R, 1, Eigen::Dynamic> drh = dn_pre * un.transpose();
        Eigen::Matrix<R, 1, Eigen::Dynamic> dr_pre =
            drh.cwiseProduct(hp).cwiseProduct(r).cwiseProduct(
                Eigen::Matrix<R, 1, Eigen::Dynamic>::Ones(H) - r);

        grads.at(base + "wz") += xin.row(t).transpose() * dz_pre;
        grads.at(base + "uz") += hp.transpose() * dz_pre;
        grads.at(base + "bz").row(0) += dz_pre;
        grads.at(base + "wr") += xin.row(t).transpose() * dr_pre;
        grads.at(base + "ur") += hp.transpose() * dr_pre;
        grads.at(base + "br").row(0) += dr_pre;
        grads.at(base + "wn") += xin.row(t).transpose() * dn_pre;
        grads.at(base + "un") += (hp.cwiseProduct(r)).transpose() * dn_pre;
        grads.at(base + "bn").row(0) += dn_pre;

        dlayer_in.row(t) +=
            dz_pre * wz.transpose() + dr_pre * wr.transpose() + dn_pre * wn.transpose();
        dh = dh.cwiseProduct(z) + drh.cwiseProduct(r) + dz_pre * uz.transpose() +
             dr_pre * ur.transpose();
      }
    }
    dlayer = dlayer_in;
  }

  // undo the residual-frequency average
  const int F3 = cache.freq_residual;
  const int c3 = cfg.channels[2];
  MatT<R> dx = MatT<R>::Zero(static_cast<Eigen::Index>(t_out) * F3, c3);
  for (int t = 0; t < t_out; ++t) {
    for (int f = 0; f < F3; ++f) {
      dx.row(static_cast<Eigen::Index>(t) * F3 + f) = dlayer.row(t) * static_cast<R>(1.0 / F3);
    }
  }

  // conv blocks, top down
  for (int i = 2; i >= 0; --i) {
    const std::string conv = detail::block_name("conv", i);
    const std::string gate = detail::block_name("gate", i);
    const int T = cache.conv_t[static_cast<size_t>(i)];
    const int F = cache.conv_f[static_cast<size_t>(i)];
    MatT<R> dy = detail::avg_pool_backward(dx, T, F, kTimePool[i], kFreqPool[i]);

    const auto& z = cache.conv_out[static_cast<size_t>(i)];
    const auto& s = cache.gate_sig[static_cast<size_t>(i)];
    MatT<R> dg = dy.cwiseProduct(z).cwiseProduct(s).cwiseProduct(
        MatT<R>::Constant(s.rows(), s.cols(), R(1)) - s);
    MatT<R> dz = dy.cwiseProduct(s) + dg * params.at(gate + ".w").transpose();
    grads.at(gate + ".w") += z.transpose() * dg;
    grads.at(gate + ".b").row(0) += dg.colwise().sum();

    detail::TapMatT<R> col = detail::im2col(cache.conv_in[static_cast<size_t>(i)], T, F);
    grads.at(conv + ".w") += col.transpose() * dz;
    grads.at(conv + ".b").row(0) += dz.colwise().sum();

    if (i > 0) {
      detail::TapMatT<R> dcol = dz * params.at(conv + ".w").transpose();
      dx = MatT<R>::Zero(cache.conv_in[static_cast<size_t>(i)].rows(),
                         cache.conv_in[static_cast<size_t>(i)].cols());
      detail::im2col_backward(dcol, T, F, dx);
    }
  }
}

// ---------------------------------------------------------------------------
// EMA teacher

// teacher <- decay * teacher + (1 - decay) * student, element-wise.
template <typename R>
void ema_update(Tensors<R>& teacher, const Tensors<R>& student, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema_update: decay must be in [0,1)");
  if (!teacher.same_shape(student)) throw ShapeError("ema_update: parameter shape mismatch");
  auto it = teacher.begin();
  auto is = student.begin();
  for (; it != teacher.end(); ++it, ++is) {
    it->second = static_cast<R>(decay) * it->second + static_cast<R>(1.0 - decay) * is->second;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: "RCTC" | version u32 | config hash u64 | tensor count u32 |
// per tensor: name len u32 + bytes, rows u32, cols u32, f32 data LE.
// Student tensors are prefixed "student.", teacher tensors "teacher.".

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint32_t read_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline uint64_t read_u64(std::istream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

template <typename R>
void write_tensor_table(std::ostream& out, const std::string& prefix, const Tensors<R>& t) {
  for (const auto& [name, m] : t) {
    const std::string full = prefix + name;
    write_u32(out, static_cast<uint32_t>(full.size()));
    out.write(full.data(), static_cast<std::streamsize>(full.size()));
    write_u32(out, static_cast<uint32_t>(m.rows()));
    write_u32(out, static_cast<uint32_t>(m.cols()));
    std::vector<float> data(static_cast<size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) data[static_cast<size_t>(i)] = static_cast<float>(m.data()[i]);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
  }
}

}  // namespace detail

template <typename R>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const Tensors<R>& student, const Tensors<R>& teacher) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
  out.write("RCTC", 4);
  detail::write_u32(out, kCheckpointVersion);
  detail::write_u64(out, cfg.hash());
  detail::write_u32(out, static_cast<uint32_t>(student.size() + teacher.size()));
  detail::write_tensor_table(out, "student.", student);
  detail::write_tensor_table(out, "teacher.", teacher);
  if (!out) throw IoError("save_checkpoint: write failed for " + path.string());
}

template <typename R>
struct Checkpoint {
  uint64_t config_hash = 0;
  Tensors<R> student;
  Tensors<R> teacher;
};

template <typename R>
Checkpoint<R> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RCTC", 4) != 0) {
    throw FormatError("load_checkpoint: bad magic in " + path.string());
  }
  if (detail::read_u32(in) != kCheckpointVersion) {
    throw FormatError("load_checkpoint: unsupported version");
  }
  Checkpoint<R> ckpt;
  ckpt.config_hash = detail::read_u64(in);
  const uint32_t count = detail::read_u32(in);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = detail::read_u32(in);
    if (!in || name_len > 4096) throw FormatError("load_checkpoint: bad tensor name length");
    std::string full(name_len, '\0');
    in.read(full.data(), name_len);
    const uint32_t rows = detail::read_u32(in);
    const uint32_t cols = detail::read_u32(in);
    std::vector<float> data(static_cast<size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw FormatError("load_checkpoint: truncated tensor " + full);
    Tensors<R>* target = nullptr;
    std::string name;
    if (full.rfind("student.", 0) == 0) {
      target = &ckpt.student;
      name = full.substr(8);
    } else if (full.rfind("teacher.", 0) == 0) {
      target = &ckpt.teacher;
      name = full.substr(8);
    } else {
      throw FormatError("load_checkpoint: unknown tensor prefix in " + full);
    }
    auto& m = target->add(name, rows, cols);
    for (size_t j = 0; j < data.size(); ++j) m.data()[static_cast<Eigen::Index>(j)] = static_cast<R>(data[j]);
  }
  return ckpt;
}

}  // namespace rct::model
