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

// Framing, windowing, FFTs (backed by FFTW) and cepstral smoothing.

#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <mutex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <fftw3.h>

namespace magphase {

using Complex = std::complex<double>;

// Bins 0..L/2 of the DFT of a real frame of even length L.
using ComplexSpectrum = std::vector<Complex>;

enum class WindowType { kHamming, kHann, kRectangular };

struct FrameSpec {
  std::size_t frame_len = 400;  // 25 ms at 16 kHz
  std::size_t hop = 160;        // 10 ms at 16 kHz
  WindowType window = WindowType::kHamming;
  double preemphasis = 0.0;

  void validate() const {
    if (frame_len == 0 || frame_len % 2 != 0) {
      throw std::invalid_argument("FrameSpec: frame_len must be even and positive, got " +
                                  std::to_string(frame_len));
    }
    if (hop == 0 || hop > frame_len) {
      throw std::invalid_argument("FrameSpec: need 0 < hop <= frame_len, got hop " +
                                  std::to_string(hop));
    }
    if (!(preemphasis >= 0.0 && preemphasis < 1.0)) {
      throw std::invalid_argument("FrameSpec: preemphasis must lie in [0, 1)");
    }
  }
};

inline std::vector<double> make_window(WindowType type, std::size_t len) {
  std::vector<double> w(len, 1.0);
  if (len < 2 || type == WindowType::kRectangular) return w;
  const double a = type == WindowType::kHamming ? 0.54 : 0.5;
  const double denom = static_cast<double>(len - 1);
  for (std::size_t n = 0; n < len; ++n) {
    w[n] = a - (1.0 - a) * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / denom);
  }
  return w;
}

inline std::size_t num_frames(std::size_t num_samples, const FrameSpec& spec) {
  if (num_samples < spec.frame_len) return 0;
  return (num_samples - spec.frame_len) / spec.hop + 1;
}

// Frame t covers samples [t*hop, t*hop + frame_len). Pre-emphasis uses the
// sample preceding each frame (zero at signal start) and precedes windowing.
inline std::vector<std::vector<double>> frame_signal(std::span<const double> x,
                                                     const FrameSpec& spec) {
  spec.validate();
  if (x.size() < spec.frame_len) {
    throw std::invalid_argument("frame_signal: " + std::to_string(x.size()) +
                                " samples is shorter than one frame of " +
                                std::to_string(spec.frame_len));
  }
  const std::size_t count = num_frames(x.size(), spec);
  const auto win = make_window(spec.window, spec.frame_len);
  std::vector<std::vector<double>> frames(count, std::vector<double>(spec.frame_len));
  for (std::size_t t = 0; t < count; ++t) {
    const std::size_t start = t * spec.hop;
    auto& f = frames[t];
    double prev = start > 0 ? x[start - 1] : 0.0;
    for (std::size_t n = 0; n < spec.frame_len; ++n) {
      const double cur = x[start + n];
      f[n] = (cur - spec.preemphasis * prev) * win[n];
      prev = cur;
    }
  }
  return frames;
}

namespace detail {

enum class FftKind { kForward, kBackward, kRealToComplex, kComplexToReal };

// FFTW plans are created once per (kind, length) and shared. Creation goes
// through a mutex because the FFTW planner is not thread-safe; execution
// uses the new-array interface, which is.
inline fftw_plan fftw_plan_for(FftKind kind, std::size_t n) {
  static std::mutex mu;
  static std::map<std::pair<FftKind, std::size_t>, fftw_plan> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& plan = cache[{kind, n}];
  if (plan) return plan;
  const int len = static_cast<int>(n);
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  double* r = fftw_alloc_real(n);
  fftw_complex* a = fftw_alloc_complex(n);
  fftw_complex* b = fftw_alloc_complex(n);
  switch (kind) {
    case FftKind::kForward: plan = fftw_plan_dft_1d(len, a, b, FFTW_FORWARD, flags); break;
    case FftKind::kBackward: plan = fftw_plan_dft_1d(len, a, b, FFTW_BACKWARD, flags); break;
    case FftKind::kRealToComplex: plan = fftw_plan_dft_r2c_1d(len, r, a, flags); break;
    case FftKind::kComplexToReal: plan = fftw_plan_dft_c2r_1d(len, a, r, flags); break;
  }
  fftw_free(r);
  fftw_free(a);
  fftw_free(b);
  if (!plan) throw std::runtime_error("FFTW could not plan a length-" + std::to_string(n) + " transform");
  return plan;
}

inline fftw_complex* as_fftw(Complex* p) { return reinterpret_cast<fftw_complex*>(p); }

}  // namespace detail

// Complex DFT with e^{-i 2 pi k n / N}; the inverse is unscaled.
inline std::vector<Complex> fft(std::span<const Complex> x, bool inverse = false) {
  std::vector<Complex> in(x.begin(), x.end()), out(x.size());
  if (x.empty()) return out;
  fftw_execute_dft(detail::fftw_plan_for(inverse ? detail::FftKind::kBackward : detail::FftKind::kForward, x.size()),
                   detail::as_fftw(in.data()), detail::as_fftw(out.data()));
  return out;
}

// Bins 0..L/2 of the DFT of an even-length real sequence.
inline ComplexSpectrum rfft(std::span<const double> x) {
  const std::size_t len = x.size();
  if (len < 2 || len % 2 != 0) {
    throw std::invalid_argument("rfft: length must be even and >= 2, got " + std::to_string(len));
  }
  std::vector<double> in(x.begin(), x.end());
  ComplexSpectrum out(len / 2 + 1);
  fftw_execute_dft_r2c(detail::fftw_plan_for(detail::FftKind::kRealToComplex, len), in.data(),
                       detail::as_fftw(out.data()));
  return out;
}

// Real FFT after zero-padding to `fft_len`.
inline ComplexSpectrum rfft_padded(std::span<const double> x, std::size_t fft_len) {
  if (fft_len < x.size()) throw std::invalid_argument("rfft_padded: fft_len shorter than input");
  std::vector<double> buf(fft_len, 0.0);
  std::copy(x.begin(), x.end(), buf.begin());
  return rfft(buf);
}

// Inverse of rfft: bins 0..L/2 of a Hermitian spectrum back to L real
// samples. Imaginary parts of the DC and Nyquist bins are ignored.
inline std::vector<double> irfft(const ComplexSpectrum& bins) {
  if (bins.size() < 2) throw std::invalid_argument("irfft: need at least 2 bins");
  const std::size_t len = 2 * (bins.size() - 1);
  ComplexSpectrum in(bins);  // c2r overwrites its input
  std::vector<double> out(len);
  fftw_execute_dft_c2r(detail::fftw_plan_for(detail::FftKind::kComplexToReal, len), detail::as_fftw(in.data()),
                       out.data());
  for (double& v : out) v /= static_cast<double>(len);
  return out;
}

// Spectra of x[n] and n*x[n] for one (already windowed) frame.
struct StftPair {
  ComplexSpectrum x;
  ComplexSpectrum y;
};

inline StftPair stft_pair(std::span<const double> frame) {
  std::vector<double> ramp(frame.size());
  for (std::size_t n = 0; n < frame.size(); ++n) ramp[n] = static_cast<double>(n) * frame[n];
  return {rfft(frame), rfft(ramp)};
}

// Real cepstrum of log(|X| + floor_eps) over the full length L = 2*(bins-1).
inline std::vector<double> real_cepstrum(const ComplexSpectrum& spec, double floor_eps = 1e-10) {
  ComplexSpectrum logmag(spec.size());
  for (std::size_t k = 0; k < spec.size(); ++k) logmag[k] = std::log(std::abs(spec[k]) + floor_eps);
  return irfft(logmag);
}

// Smoothed magnitude envelope |S| on the bins of `spec`. The cepstrum keeps
// quefrencies |q| <= lifter_len; lifter_len == L/2 - 1 is the full-band
// setting and also keeps the Nyquist quefrency, so it reproduces
// |X| + floor_eps exactly.
inline std::vector<double> cepstral_envelope(const ComplexSpectrum& spec, std::size_t lifter_len = 30,
                                             double floor_eps = 1e-10) {
  if (spec.size() < 2) throw std::invalid_argument("cepstral_envelope: need at least 2 bins");
  const std::size_t len = 2 * (spec.size() - 1);
  if (lifter_len >= len / 2) {
    throw std::invalid_argument("cepstral_envelope: lifter_len " + std::to_string(lifter_len) +
                                " must be < " + std::to_string(len / 2));
  }
  auto cep = real_cepstrum(spec, floor_eps);
  if (lifter_len + 1 < len / 2) {
    for (std::size_t q = lifter_len + 1; q < len - lifter_len; ++q) cep[q] = 0.0;
  }
  const auto smooth = rfft(cep);
  std::vector<double> env(spec.size());
  for (std::size_t k = 0; k < env.size(); ++k) env[k] = std::exp(smooth[k].real());
  return env;
}

}  // namespace magphase
