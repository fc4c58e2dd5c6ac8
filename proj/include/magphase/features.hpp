// Copyright 2026 The magphase Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Network inputs: 192-dim log-mel filterbanks with deltas and utterance CMVN,
// and 201-dim standardized modified group delay (MODGD).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "magphase/audio_io.hpp"
#include "magphase/dsp.hpp"

namespace magphase {

enum class FeatureKind : std::uint8_t { kFbank192 = 1, kModgd201 = 2 };

inline constexpr std::size_t kNumMelFilters = 64;
inline constexpr std::size_t kFbankDim = 3 * kNumMelFilters;
inline constexpr std::size_t kModgdDim = 201;

inline std::size_t feature_dim(FeatureKind kind) {
  return kind == FeatureKind::kFbank192 ? kFbankDim : kModgdDim;
}

inline const char* feature_name(FeatureKind kind) {
  return kind == FeatureKind::kFbank192 ? "fbank" : "modgd";
}

// Row-major T x F matrix of frame features.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  FeatureKind kind = FeatureKind::kFbank192;
  FrameSpec frame_spec;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

// ---------------------------------------------------------------------------
// Mel scale and filterbank

inline double hz_to_mel(double hz) {
  if (hz < 0.0) throw std::domain_error("hz_to_mel: negative frequency " + std::to_string(hz));
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelTriangle {
  std::size_t start_bin = 0;  // first bin with nonzero weight
  std::size_t peak_bin = 0;   // bin nearest the center frequency
  std::size_t end_bin = 0;    // one past the last nonzero bin
  double center_hz = 0.0;
  std::vector<double> weights;  // weights for bins [start_bin, end_bin)
};

class MelFilterbank {
 public:
  MelFilterbank(std::size_t n_filters = kNumMelFilters, std::size_t fft_len = 512,
                int sample_rate = kSampleRate, double f_low = 0.0, double f_high = 8000.0)
      : num_bins_(fft_len / 2 + 1) {
    if (n_filters == 0 || f_high <= f_low || f_high > sample_rate / 2.0) {
      throw std::invalid_argument("MelFilterbank: bad configuration");
    }
    const double mlo = hz_to_mel(f_low), mhi = hz_to_mel(f_high);
    const double step = (mhi - mlo) / static_cast<double>(n_filters + 1);
    const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(fft_len);
    for (std::size_t j = 0; j < n_filters; ++j) {
      const double left = mlo + step * static_cast<double>(j);
      const double center = left + step;
      const double right = center + step;
      MelTriangle tri;
      tri.center_hz = mel_to_hz(center);
      tri.peak_bin = static_cast<std::size_t>(std::lround(tri.center_hz / bin_hz));
      std::vector<std::pair<std::size_t, double>> taps;
      for (std::size_t k = 0; k < num_bins_; ++k) {
        const double m = hz_to_mel(static_cast<double>(k) * bin_hz);
        double wgt = 0.0;
        if (m > left && m <= center) wgt = (m - left) / (center - left);
        else if (m > center && m < right) wgt = (right - m) / (right - center);
        if (wgt > 0.0) taps.emplace_back(k, wgt);
      }
      if (taps.empty()) {
        tri.start_bin = tri.end_bin = tri.peak_bin;
      } else {
        tri.start_bin = taps.front().first;
        tri.end_bin = taps.back().first + 1;
        tri.weights.assign(tri.end_bin - tri.start_bin, 0.0);
        for (auto [k, wgt] : taps) tri.weights[k - tri.start_bin] = wgt;
      }
      filters_.push_back(std::move(tri));
    }
  }

  std::size_t size() const { return filters_.size(); }
  std::size_t num_bins() const { return num_bins_; }
  const MelTriangle& filter(std::size_t j) const { return filters_.at(j); }

  double weight(std::size_t j, std::size_t bin) const {
    const auto& f = filters_.at(j);
    if (bin < f.start_bin || bin >= f.end_bin) return 0.0;
    return f.weights[bin - f.start_bin];
  }

  std::vector<double> apply(std::span<const double> power) const {
    if (power.size() != num_bins_) throw std::invalid_argument("MelFilterbank: wrong spectrum length");
    std::vector<double> out(filters_.size(), 0.0);
    for (std::size_t j = 0; j < filters_.size(); ++j) {
      const auto& f = filters_[j];
      double acc = 0.0;
      for (std::size_t k = f.start_bin; k < f.end_bin; ++k) acc += f.weights[k - f.start_bin] * power[k];
      out[j] = acc;
    }
    return out;
  }

 private:
  std::size_t num_bins_;
  std::vector<MelTriangle> filters_;
};

// ---------------------------------------------------------------------------
// Deltas and normalization

// d_t = sum_{n=1..W} n (c_{t+n} - c_{t-n}) / (2 sum n^2), edges replicated.
inline FeatureMatrix delta(const FeatureMatrix& m, std::size_t window = 2) {
  if (m.rows == 0) throw std::invalid_argument("delta: empty matrix");
  FeatureMatrix out = m;
  double denom = 0.0;
  for (std::size_t n = 1; n <= window; ++n) denom += static_cast<double>(n * n);
  denom *= 2.0;
  const auto last = static_cast<long>(m.rows) - 1;
  for (std::size_t t = 0; t < m.rows; ++t) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      double acc = 0.0;
      for (std::size_t n = 1; n <= window; ++n) {
        const auto fwd = static_cast<std::size_t>(std::min<long>(static_cast<long>(t + n), last));
        const auto bwd = static_cast<std::size_t>(std::max<long>(static_cast<long>(t) - static_cast<long>(n), 0));
        acc += static_cast<double>(n) * (m.at(fwd, c) - m.at(bwd, c));
      }
      out.at(t, c) = acc / denom;
    }
  }
  return out;
}

// Per-column mean and variance normalization over the utterance; a constant
// column maps to zero.
inline FeatureMatrix cmvn(const FeatureMatrix& m, double var_floor = 1e-8) {
  if (m.rows == 0) throw std::invalid_argument("cmvn: empty matrix");
  FeatureMatrix out = m;
  const double inv_t = 1.0 / static_cast<double>(m.rows);
  for (std::size_t c = 0; c < m.cols; ++c) {
    // Accumulate around the first row so a constant column has mean equal
    // to its value exactly.
    const double ref = m.at(0, c);
    double shift = 0.0;
    for (std::size_t t = 0; t < m.rows; ++t) shift += m.at(t, c) - ref;
    const double mu = ref + shift * inv_t;
    double var = 0.0;
    for (std::size_t t = 0; t < m.rows; ++t) {
      const double d = m.at(t, c) - mu;
      var += d * d;
    }
    var *= inv_t;
    const double inv_sd = 1.0 / std::sqrt(var + var_floor);
    for (std::size_t t = 0; t < m.rows; ++t) out.at(t, c) = (m.at(t, c) - mu) * inv_sd;
  }
  return out;
}

// ---------------------------------------------------------------------------
// FBank

struct FbankOptions {
  FrameSpec frame{400, 160, WindowType::kHamming, 0.97};
  std::size_t fft_len = 512;
  double log_floor = 1e-10;
  std::size_t delta_window = 2;
};

// T x 64 log mel energies (no deltas, no normalization).
inline FeatureMatrix fbank_static(std::span<const double> samples, const FbankOptions& opt = {}) {
  const auto frames = frame_signal(samples, opt.frame);
  static thread_local std::unique_ptr<MelFilterbank> bank;
  if (!bank || bank->num_bins() != opt.fft_len / 2 + 1) {
    bank = std::make_unique<MelFilterbank>(kNumMelFilters, opt.fft_len);
  }
  FeatureMatrix out(frames.size(), kNumMelFilters);
  std::vector<double> power(opt.fft_len / 2 + 1);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto spec = rfft_padded(frames[t], opt.fft_len);
    for (std::size_t k = 0; k < spec.size(); ++k) power[k] = std::norm(spec[k]);
    const auto mel = bank->apply(power);
    for (std::size_t j = 0; j < mel.size(); ++j) out.at(t, j) = std::log(mel[j] + opt.log_floor);
  }
  out.frame_spec = opt.frame;
  return out;
}

// Static log mel energies, then deltas and double deltas, then CMVN: T x 192.
inline FeatureMatrix compute_fbank(std::span<const double> samples, const FbankOptions& opt = {}) {
  const auto stat = fbank_static(samples, opt);
  const auto d1 = delta(stat, opt.delta_window);
  const auto d2 = delta(d1, opt.delta_window);
  FeatureMatrix full(stat.rows, kFbankDim);
  for (std::size_t t = 0; t < stat.rows; ++t) {
    for (std::size_t j = 0; j < kNumMelFilters; ++j) {
      full.at(t, j) = stat.at(t, j);
      full.at(t, kNumMelFilters + j) = d1.at(t, j);
      full.at(t, 2 * kNumMelFilters + j) = d2.at(t, j);
    }
  }
  auto out = cmvn(full);
  out.kind = FeatureKind::kFbank192;
  out.frame_spec = opt.frame;
  return out;
}

// ---------------------------------------------------------------------------
// Modified group delay

struct ModgdParams {
  double alpha = 0.4;
  double gamma = 0.9;
  std::size_t lifter_len = 30;
  double denom_floor = 1e-8;  // relative to the frame's largest denominator
  FrameSpec frame{400, 160, WindowType::kHamming, 0.0};

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("ModgdParams: alpha must lie in (0, 1]");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("ModgdParams: gamma must lie in (0, 1]");
    if (!(denom_floor > 0.0)) throw std::invalid_argument("ModgdParams: denom_floor must be positive");
    frame.validate();
  }
};

// tau(w) = (X_R Y_R + X_I Y_I) / |S(w)|^(2 gamma), where |S| is the cepstrally
// smoothed magnitude of X and the denominator is floored at denom_floor times
// its largest value in the frame.
inline std::vector<double> compute_group_delay(const ComplexSpectrum& x, const ComplexSpectrum& y,
                                               const ModgdParams& params) {
  if (x.size() != y.size()) throw std::invalid_argument("compute_group_delay: spectra differ in length");
  const auto env = cepstral_envelope(x, params.lifter_len);
  std::vector<double> denom(env.size());
  double peak = 0.0;
  for (std::size_t k = 0; k < env.size(); ++k) {
    denom[k] = std::pow(env[k], 2.0 * params.gamma);
    peak = std::max(peak, denom[k]);
  }
  const double floor = params.denom_floor * peak;
  std::vector<double> tau(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double num = x[k].real() * y[k].real() + x[k].imag() * y[k].imag();
    tau[k] = num / std::max(denom[k], floor);
  }
  return tau;
}

// tau |tau|^(alpha-1), written as sign(tau) |tau|^alpha so that tau = 0 maps to 0.
inline double modify_group_delay(double tau, double alpha) {
  if (tau == 0.0) return 0.0;
  return std::copysign(std::pow(std::abs(tau), alpha), tau);
}

// Per-frame modified group delay before utterance standardization: T x 201
// at the default 400-sample frame.
inline FeatureMatrix modgd_raw(std::span<const double> samples, const ModgdParams& params = {}) {
  params.validate();
  const auto frames = frame_signal(samples, params.frame);
  const std::size_t bins = params.frame.frame_len / 2 + 1;
  FeatureMatrix out(frames.size(), bins);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto [x, y] = stft_pair(frames[t]);
    const auto tau = compute_group_delay(x, y, params);
    for (std::size_t k = 0; k < bins; ++k) out.at(t, k) = modify_group_delay(tau[k], params.alpha);
  }
  out.kind = FeatureKind::kModgd201;
  out.frame_spec = params.frame;
  return out;
}

inline FeatureMatrix compute_modgd(std::span<const double> samples, const ModgdParams& params = {}) {
  auto out = cmvn(modgd_raw(samples, params));
  out.kind = FeatureKind::kModgd201;
  out.frame_spec = params.frame;
  return out;
}

// ---------------------------------------------------------------------------
// "MPF1" feature files: magic, u32 rows, u32 cols, u8 kind, then float32
// row-major values, all little-endian. Values are stored at float precision.

inline void write_features(const std::string& path, const FeatureMatrix& m) {
  if (m.cols != feature_dim(m.kind)) {
    throw std::invalid_argument("write_features: " + std::to_string(m.cols) + " columns for kind " +
                                feature_name(m.kind));
  }
  std::string buf = "MPF1";
  detail::append_le(buf, static_cast<std::uint32_t>(m.rows), 4);
  detail::append_le(buf, static_cast<std::uint32_t>(m.cols), 4);
  buf.push_back(static_cast<char>(m.kind));
  for (double v : m.values) {
    const auto f = static_cast<float>(v);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    detail::append_le(buf, u, 4);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline FeatureMatrix read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (b.size() < 13 || std::string(b.begin(), b.begin() + 4) != "MPF1") {
    throw std::runtime_error(path + ": not an MPF1 feature file");
  }
  const std::size_t rows = detail::le32(&b[4]);
  const std::size_t cols = detail::le32(&b[8]);
  const auto kind = static_cast<FeatureKind>(b[12]);
  if (b[12] != 1 && b[12] != 2) throw std::runtime_error(path + ": unknown feature kind tag");
  if (cols != feature_dim(kind)) throw std::runtime_error(path + ": column count does not match kind");
  if (b.size() != 13 + rows * cols * 4) throw std::runtime_error(path + ": truncated or oversized payload");
  FeatureMatrix m(rows, cols);
  m.kind = kind;
  for (std::size_t i = 0; i < rows * cols; ++i) {
    const std::uint32_t u = detail::le32(&b[13 + 4 * i]);
    float f;
    std::memcpy(&f, &u, 4);
    m.values[i] = f;
  }
  return m;
}

}  // namespace magphase
