// Audio front end: WAV ingest and normalized log-mel spectrograms.
//
// Pipeline constants follow the usual SED recipe: 10 s clips at 16 kHz,
// 2048-point FFT with hop 256 (626 frames), 128 HTK mel bands, log
// compression, per-clip min-max normalization to [-1, 1].
#pragma once

#include <rct/core.hpp>
#include <rct/fft.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace rct::features {

inline constexpr int kSampleRate = 16000;
inline constexpr int kClipSeconds = 10;
inline constexpr int kClipSamples = kSampleRate * kClipSeconds;  // 160000
inline constexpr int kNfft = 2048;
inline constexpr int kHop = 256;
inline constexpr int kNumBins = kNfft / 2 + 1;  // 1025
inline constexpr int kNumMels = 128;
inline constexpr int kNumFrames = kClipSamples / kHop + 1;  // 626
inline constexpr double kLogEps = 1e-10;

struct Waveform {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = kSampleRate;
};

// Per-clip feature matrix (time x mel) with the affine normalization
// recorded so energy-domain operations can invert it.
struct MelClip {
  Mat values;  // T x K, entries in [-1, 1]
  double norm_lo = 0.0;
  double norm_hi = 0.0;
};

// ---------------------------------------------------------------------------
// WAV io (RIFF/WAVE, 16-bit PCM, mono or stereo)

namespace detail {

inline uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

inline void write_u32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u16(std::ostream& out, uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace detail

// Linear-interpolation resampler. Not band-limited; adequate for the
// synthetic tones this project trains on.
inline std::vector<double> resample_linear(const std::vector<double>& in, int sr_in, int sr_out) {
  if (sr_in <= 0 || sr_out <= 0) throw ConfigError("resample: sample rates must be positive");
  if (sr_in == sr_out || in.empty()) return in;
  const double ratio = static_cast<double>(sr_in) / static_cast<double>(sr_out);
  const size_t n_out = static_cast<size_t>(std::floor(static_cast<double>(in.size() - 1) / ratio)) + 1;
  std::vector<double> out(n_out);
  for (size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * ratio;
    const size_t i0 = static_cast<size_t>(pos);
    const size_t i1 = std::min(i0 + 1, in.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    out[i] = in[i0] * (1.0 - frac) + in[i1] * frac;
  }
  return out;
}

// Reads a PCM16 RIFF/WAVE file, mixes to mono, resamples to 16 kHz and
// pads/truncates to exactly 10 s.
inline Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_wav: cannot open " + path.string());

  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw FormatError("load_wav: missing RIFF header");
  detail::read_u32(in);  // riff size
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw FormatError("load_wav: not a WAVE file");

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  bool have_fmt = false;
  std::vector<int16_t> pcm;
  bool have_data = false;

  while (in.read(tag, 4)) {
    const uint32_t chunk_size = detail::read_u32(in);
    if (!in) throw FormatError("load_wav: truncated chunk header");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw FormatError("load_wav: fmt chunk too small");
      format = detail::read_u16(in);
      channels = detail::read_u16(in);
      sample_rate = detail::read_u32(in);
      detail::read_u32(in);  // byte rate
      detail::read_u16(in);  // block align
      bits = detail::read_u16(in);
      in.ignore(chunk_size - 16 + (chunk_size & 1));
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("load_wav: data chunk before fmt");
      pcm.resize(chunk_size / 2);
      in.read(reinterpret_cast<char*>(pcm.data()), static_cast<std::streamsize>(pcm.size() * 2));
      if (!in) throw FormatError("load_wav: truncated data chunk");
      if (chunk_size & 1) in.ignore(1);
      have_data = true;
    } else {
      in.ignore(chunk_size + (chunk_size & 1));
    }
  }
  if (!have_fmt || !have_data) throw FormatError("load_wav: missing fmt or data chunk");
  if (format != 1 || bits != 16) throw FormatError("load_wav: only 16-bit PCM is supported");
  if (channels != 1 && channels != 2) throw FormatError("load_wav: only mono or stereo supported");
  if (sample_rate == 0) throw FormatError("load_wav: zero sample rate");

  std::vector<double> mono;
  mono.reserve(pcm.size() / channels);
  if (channels == 1) {
    for (int16_t s : pcm) mono.push_back(static_cast<double>(s) / 32768.0);
  } else {
    for (size_t i = 0; i + 1 < pcm.size(); i += 2) {
      mono.push_back((static_cast<double>(pcm[i]) + static_cast<double>(pcm[i + 1])) / 2.0 / 32768.0);
    }
  }

  if (static_cast<int>(sample_rate) != kSampleRate) {
    mono = resample_linear(mono, static_cast<int>(sample_rate), kSampleRate);
  }
  mono.resize(kClipSamples, 0.0);  // zero-pad short clips, truncate long ones

  Waveform w;
  w.samples = std::move(mono);
  w.sample_rate = kSampleRate;
  return w;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_wav: cannot open " + path.string());
  const uint32_t n = static_cast<uint32_t>(wave.samples.size());
  const uint32_t data_bytes = n * 2;
  out.write("RIFF", 4);
  detail::write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  detail::write_u32(out, 16);
  detail::write_u16(out, 1);  // PCM
  detail::write_u16(out, 1);  // mono
  detail::write_u32(out, static_cast<uint32_t>(wave.sample_rate));
  detail::write_u32(out, static_cast<uint32_t>(wave.sample_rate) * 2);
  detail::write_u16(out, 2);
  detail::write_u16(out, 16);
  out.write("data", 4);
  detail::write_u32(out, data_bytes);
  for (double s : wave.samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const int16_t q = static_cast<int16_t>(std::lrint(clamped * 32767.0));
    detail::write_u16(out, static_cast<uint16_t>(q));
  }
  if (!out) throw IoError("write_wav: write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Spectrogram

inline Vec hann_window(int n) {
  Vec w(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

// Power spectrogram with centered frames and reflection padding of
// n_fft/2 at each edge; T = floor(len/hop) + 1.
inline Mat stft_power(const Waveform& wave, int n_fft = kNfft, int hop = kHop) {
  const auto& x = wave.samples;
  const int64_t n = static_cast<int64_t>(x.size());
  if (n < 2) throw ConfigError("stft_power: waveform too short");
  const int num_frames = static_cast<int>(n / hop) + 1;
  const int num_bins = n_fft / 2 + 1;
  const Vec window = hann_window(n_fft);
  RealFft fft(static_cast<size_t>(n_fft));

  // reflect(k) maps a possibly out-of-range index into [0, n)
  const auto reflect = [n](int64_t idx) {
    while (idx < 0 || idx >= n) {
      if (idx < 0) idx = -idx;
      if (idx >= n) idx = 2 * n - 2 - idx;
    }
    return idx;
  };

  Mat spec(num_frames, num_bins);
  std::vector<double> frame(n_fft);
  for (int t = 0; t < num_frames; ++t) {
    const int64_t start = static_cast<int64_t>(t) * hop - n_fft / 2;
    for (int j = 0; j < n_fft; ++j) {
      frame[j] = x[reflect(start + j)] * window[j];
    }
    fft.power_spectrum(frame.data(), spec.row(t).data());
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Mel filterbank (HTK scale, triangular filters with peak 1)

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

inline Mat mel_filterbank(int n_mels = kNumMels, int sr = kSampleRate, int n_fft = kNfft) {
  const int num_bins = n_fft / 2 + 1;
  const double mel_hi = hz_to_mel(static_cast<double>(sr) / 2.0);
  // n_mels + 2 edge frequencies from 0 Hz to sr/2, equally spaced in mel
  std::vector<double> edges(n_mels + 2);
  for (int m = 0; m < n_mels + 2; ++m) {
    edges[m] = mel_to_hz(mel_hi * static_cast<double>(m) / static_cast<double>(n_mels + 1));
  }
  Mat fb = Mat::Zero(n_mels, num_bins);
  for (int m = 0; m < n_mels; ++m) {
    const double f_lo = edges[m], f_c = edges[m + 1], f_hi = edges[m + 2];
    for (int k = 0; k < num_bins; ++k) {
      const double f = static_cast<double>(k) * sr / n_fft;
      double w = 0.0;
      if (f > f_lo && f < f_c) {
        w = (f - f_lo) / (f_c - f_lo);
      } else if (f == f_c) {
        w = 1.0;
      } else if (f > f_c && f < f_hi) {
        w = (f_hi - f) / (f_hi - f_c);
      }
      fb(m, k) = w;
    }
  }
  return fb;
}

// Center frequency of each mel band (the triangle peaks), ascending.
inline Vec mel_center_frequencies(int n_mels = kNumMels, int sr = kSampleRate) {
  const double mel_hi = hz_to_mel(static_cast<double>(sr) / 2.0);
  Vec centers(n_mels);
  for (int m = 0; m < n_mels; ++m) {
    centers[m] = mel_to_hz(mel_hi * static_cast<double>(m + 1) / static_cast<double>(n_mels + 1));
  }
  return centers;
}

// ---------------------------------------------------------------------------
// Log compression and normalization

// Maps a raw log-mel matrix affinely onto [-1, 1] using its min/max.
// A constant matrix maps to all zeros with norm_lo == norm_hi.
inline MelClip normalize_logmel(const Mat& logmel) {
  if (!logmel.allFinite()) throw NumericalError("normalize_logmel: non-finite input");
  MelClip clip;
  clip.norm_lo = logmel.minCoeff();
  clip.norm_hi = logmel.maxCoeff();
  if (clip.norm_hi > clip.norm_lo) {
    // divide by the span rather than multiply by its precomputed inverse:
    // monotone rounding then keeps every value inside [-1, 1] with the
    // extremes landing exactly on the endpoints
    const double span = clip.norm_hi - clip.norm_lo;
    clip.values = (logmel.array() - clip.norm_lo) / span * 2.0 - 1.0;
  } else {
    clip.values = Mat::Zero(logmel.rows(), logmel.cols());
  }
  return clip;
}

// Inverse of normalize_logmel (raw log-mel values).
inline Mat denormalize_logmel(const MelClip& clip) {
  if (clip.norm_hi > clip.norm_lo) {
    const double half_span = (clip.norm_hi - clip.norm_lo) / 2.0;
    return ((clip.values.array() + 1.0) * half_span + clip.norm_lo).matrix();
  }
  return Mat::Constant(clip.values.rows(), clip.values.cols(), clip.norm_lo);
}

// log(mel energies + eps) of a power spectrogram, given a filterbank.
inline Mat logmel_from_power(const Mat& power_spec, const Mat& filterbank) {
  if (power_spec.cols() != filterbank.cols()) {
    throw ShapeError("logmel_from_power: bin count mismatch");
  }
  if (!power_spec.allFinite()) throw NumericalError("logmel_from_power: non-finite input");
  Mat mel = power_spec * filterbank.transpose();  // T x n_mels
  return (mel.array() + kLogEps).log().matrix();
}

// Full front end: waveform -> normalized MelClip (T=626, K=128).
inline MelClip extract_melclip(const Waveform& wave, const Mat& filterbank) {
  return normalize_logmel(logmel_from_power(stft_power(wave), filterbank));
}

inline MelClip extract_melclip(const Waveform& wave) {
  static const Mat fb = mel_filterbank();
  return extract_melclip(wave, fb);
}

// ---------------------------------------------------------------------------
// Feature cache record: "RCTF" | version u32 | T u32 | K u32 | norm_lo f64 |
// norm_hi f64 | T*K f32, row-major (time-major), all little-endian.

inline constexpr uint32_t kCacheVersion = 1;

inline void write_melclip(const std::filesystem::path& path, const MelClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_melclip: cannot open " + path.string());
  out.write("RCTF", 4);
  detail::write_u32(out, kCacheVersion);
  detail::write_u32(out, static_cast<uint32_t>(clip.values.rows()));
  detail::write_u32(out, static_cast<uint32_t>(clip.values.cols()));
  out.write(reinterpret_cast<const char*>(&clip.norm_lo), 8);
  out.write(reinterpret_cast<const char*>(&clip.norm_hi), 8);
  std::vector<float> data(static_cast<size_t>(clip.values.size()));
  for (Eigen::Index i = 0; i < clip.values.size(); ++i) {
    data[static_cast<size_t>(i)] = static_cast<float>(clip.values.data()[i]);
  }
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw IoError("write_melclip: write failed for " + path.string());
}

inline MelClip read_melclip(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_melclip: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RCTF", 4) != 0) {
    throw FormatError("read_melclip: bad magic in " + path.string());
  }
  const uint32_t version = detail::read_u32(in);
  if (version != kCacheVersion) throw FormatError("read_melclip: unsupported version");
  const uint32_t rows = detail::read_u32(in);
  const uint32_t cols = detail::read_u32(in);
  MelClip clip;
  in.read(reinterpret_cast<char*>(&clip.norm_lo), 8);
  in.read(reinterpret_cast<char*>(&clip.norm_hi), 8);
  std::vector<float> data(static_cast<size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw FormatError("read_melclip: truncated record in " + path.string());
  clip.values.resize(rows, cols);
  for (size_t i = 0; i < data.size(); ++i) {
    clip.values.data()[static_cast<Eigen::Index>(i)] = static_cast<double>(data[i]);
  }
  return clip;
}

}  // namespace rct::features
