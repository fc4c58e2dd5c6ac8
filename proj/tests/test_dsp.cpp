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


#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "magphase/dsp.hpp"
#include "magphase/rng.hpp"
#include "oracles.hpp"

namespace mp = magphase;

namespace {

std::vector<double> random_frame(mp::Rng& rng, std::size_t len) {
  std::vector<double> x(len);
  for (double& v : x) v = rng.normal();
  return x;
}

double max_abs_diff(const mp::ComplexSpectrum& a, const std::vector<std::complex<double>>& b) {
  double e = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) e = std::max(e, std::abs(a[k] - b[k]));
  return e;
}

// Spectrum with the given magnitudes and zero phase.
mp::ComplexSpectrum from_magnitude(const std::vector<double>& mag) {
  mp::ComplexSpectrum s(mag.size());
  for (std::size_t k = 0; k < mag.size(); ++k) s[k] = mag[k];
  return s;
}

}  // namespace

TEST(FrameSignal, FrameCountFollowsFloorRule) {
  const mp::FrameSpec spec{400, 160, mp::WindowType::kHamming, 0.0};
  EXPECT_EQ(mp::frame_signal(std::vector<double>(1200, 0.1), spec).size(), 6u);
  EXPECT_EQ(mp::frame_signal(std::vector<double>(400, 0.1), spec).size(), 1u);
  EXPECT_THROW(mp::frame_signal(std::vector<double>(399, 0.1), spec), std::invalid_argument);
  EXPECT_EQ(mp::num_frames(16000, spec), 98u);
}

TEST(FrameSignal, FramesStartAtMultiplesOfHop) {
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  const mp::FrameSpec spec{10, 4, mp::WindowType::kRectangular, 0.0};
  const auto frames = mp::frame_signal(x, spec);
  ASSERT_EQ(frames.size(), 248u);
  for (std::size_t t = 0; t < frames.size(); ++t) EXPECT_EQ(frames[t][0], static_cast<double>(4 * t));
}

TEST(FrameSignal, PreemphasisUsesPrecedingSampleThenWindow) {
  std::vector<double> x{1.0, 2.0, 4.0, 8.0, 16.0, 32.0};
  const mp::FrameSpec spec{4, 2, mp::WindowType::kHann, 0.5};
  const auto frames = mp::frame_signal(x, spec);
  const auto win = mp::make_window(mp::WindowType::kHann, 4);
  ASSERT_EQ(frames.size(), 2u);
  EXPECT_DOUBLE_EQ(frames[0][1], (2.0 - 0.5 * 1.0) * win[1]);
  EXPECT_DOUBLE_EQ(frames[0][0], 1.0 * win[0]);  // zero before the signal start
  EXPECT_DOUBLE_EQ(frames[1][1], (8.0 - 0.5 * 4.0) * win[1]);
  EXPECT_DOUBLE_EQ(frames[1][2], (16.0 - 0.5 * 8.0) * win[2]);
}

TEST(FrameSignal, RejectsBadSpecs) {
  std::vector<double> x(1000, 0.0);
  EXPECT_THROW(mp::frame_signal(x, {401, 160}), std::invalid_argument);
  EXPECT_THROW(mp::frame_signal(x, {400, 0}), std::invalid_argument);
  EXPECT_THROW(mp::frame_signal(x, {400, 401}), std::invalid_argument);
  EXPECT_THROW(mp::frame_signal(x, {400, 160, mp::WindowType::kHamming, 1.0}), std::invalid_argument);
}

TEST(MakeWindow, HammingEndpointsAndSymmetry) {
  const auto w = mp::make_window(mp::WindowType::kHamming, 400);
  EXPECT_NEAR(w.front(), 0.08, 1e-12);
  EXPECT_NEAR(w.back(), 0.08, 1e-12);
  for (std::size_t n = 0; n < 200; ++n) EXPECT_NEAR(w[n], w[399 - n], 1e-12);
}

TEST(Rfft, ImpulseGivesFlatSpectrum) {
  std::vector<double> x(400, 0.0);
  x[0] = 1.0;
  const auto s = mp::rfft(x);
  ASSERT_EQ(s.size(), 201u);
  for (const auto& b : s) {
    EXPECT_NEAR(b.real(), 1.0, 1e-12);
    EXPECT_NEAR(b.imag(), 0.0, 1e-12);
  }
}

TEST(Rfft, ConstantPutsEverythingInBinZero) {
  const auto s = mp::rfft(std::vector<double>(400, 1.0));
  EXPECT_NEAR(s[0].real(), 400.0, 1e-9);
  EXPECT_NEAR(s[0].imag(), 0.0, 1e-9);
  for (std::size_t k = 1; k < s.size(); ++k) EXPECT_NEAR(std::abs(s[k]), 0.0, 1e-9);
}

TEST(Rfft, MatchesDirectDftOnSixtyFourFrames) {
  mp::Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 64; ++i) {
    const auto x = random_frame(rng, 400);
    worst = std::max(worst, max_abs_diff(mp::rfft(x), mp::oracle::dft(x, 201)));
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Rfft, MatchesDirectDftOnSmallAndOddHalfLengths) {
  mp::Rng rng(12);
  for (std::size_t len : {2u, 4u, 10u, 400u, 512u}) {
    const auto x = random_frame(rng, len);
    EXPECT_LT(max_abs_diff(mp::rfft(x), mp::oracle::dft(x, len / 2 + 1)), 1e-9) << "L=" << len;
  }
}

TEST(Rfft, RejectsOddOrTinyLengths) {
  EXPECT_THROW(mp::rfft(std::vector<double>(3, 1.0)), std::invalid_argument);
  EXPECT_THROW(mp::rfft(std::vector<double>(0)), std::invalid_argument);
}

TEST(Rfft, ParsevalHolds) {
  mp::Rng rng(13);
  for (int i = 0; i < 16; ++i) {
    const auto x = random_frame(rng, 400);
    const auto s = mp::rfft(x);
    double time = 0.0;
    for (double v : x) time += v * v;
    double freq = std::norm(s.front()) + std::norm(s.back());
    for (std::size_t k = 1; k + 1 < s.size(); ++k) freq += 2.0 * std::norm(s[k]);
    EXPECT_NEAR(time, freq / 400.0, 1e-9 * std::max(1.0, time));
  }
}

TEST(Irfft, InvertsRfft) {
  mp::Rng rng(14);
  const auto x = random_frame(rng, 400);
  const auto back = mp::irfft(mp::rfft(x));
  ASSERT_EQ(back.size(), x.size());
  for (std::size_t n = 0; n < x.size(); ++n) EXPECT_NEAR(back[n], x[n], 1e-12);
}

TEST(Fft, ComplexTransformMatchesDefinitionAndInverts) {
  mp::Rng rng(15);
  std::vector<std::complex<double>> x(12);
  for (auto& v : x) v = {rng.normal(), rng.normal()};
  const auto s = mp::fft(x);
  for (std::size_t k = 0; k < x.size(); ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n) {
      acc += x[n] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * n % 12) / 12.0);
    }
    EXPECT_LT(std::abs(s[k] - acc), 1e-12);
  }
  const auto back = mp::fft(s, true);
  for (std::size_t n = 0; n < x.size(); ++n) EXPECT_LT(std::abs(back[n] / 12.0 - x[n]), 1e-12);
}

TEST(StftPair, ShiftedImpulseGivesLinearPhaseAndScaledCopy) {
  const std::size_t len = 400, k = 37;
  std::vector<double> x(len, 0.0);
  x[k] = 1.0;
  const auto [sx, sy] = mp::stft_pair(x);
  for (std::size_t j = 0; j < sx.size(); ++j) {
    const auto e = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(j * k % len) / static_cast<double>(len));
    EXPECT_LT(std::abs(sx[j] - e), 1e-12);
    EXPECT_LT(std::abs(sy[j] - static_cast<double>(k) * e), 1e-10);
  }
}

TEST(StftPair, ZeroFrameGivesZeroSpectra) {
  const auto [sx, sy] = mp::stft_pair(std::vector<double>(400, 0.0));
  for (std::size_t j = 0; j < sx.size(); ++j) {
    EXPECT_EQ(std::abs(sx[j]), 0.0);
    EXPECT_EQ(std::abs(sy[j]), 0.0);
  }
}

TEST(StftPair, YIsIDerivativeOfXAgainstZeroPaddedDifferences) {
  mp::Rng rng(16);
  const std::size_t len = 400;
  auto x = random_frame(rng, len);
  const auto win = mp::make_window(mp::WindowType::kHamming, len);
  for (std::size_t n = 0; n < len; ++n) x[n] *= win[n];
  const auto [sx, sy] = mp::stft_pair(x);
  // Five-point stencil truncation bound on the 8x grid: h^4/30 max|X^(5)|,
  // and |X^(5)| <= sum n^5 |x[n]|.
  const double h = 2.0 * std::numbers::pi / (8.0 * static_cast<double>(len));
  double d5 = 0.0;
  for (std::size_t n = 0; n < len; ++n) d5 += std::pow(static_cast<double>(n), 5) * std::abs(x[n]);
  const double bound = std::pow(h, 4) / 30.0 * d5;
  for (std::size_t k = 0; k < sx.size(); k += 5) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(len);
    const auto d = std::complex<double>(0.0, 1.0) * mp::oracle::dtft_derivative(x, w);
    EXPECT_LT(std::abs(sy[k] - d), bound) << "bin " << k;
  }
}

TEST(CepstralEnvelope, FlatSpectrumIsItsOwnEnvelope) {
  const auto env = mp::cepstral_envelope(from_magnitude(std::vector<double>(201, 2.5)), 30);
  for (double v : env) EXPECT_NEAR(v, 2.5 + 1e-10, 1e-9);
}

TEST(CepstralEnvelope, FullBandLifterIsIdentity) {
  mp::Rng rng(17);
  auto x = random_frame(rng, 400);
  const auto spec = mp::rfft(x);
  const auto env = mp::cepstral_envelope(spec, 199);
  for (std::size_t k = 0; k < spec.size(); ++k) EXPECT_NEAR(env[k], std::abs(spec[k]) + 1e-10, 1e-6);
  EXPECT_THROW(mp::cepstral_envelope(spec, 200), std::invalid_argument);
}

TEST(CepstralEnvelope, RecoversEnvelopeUnderFastRipple) {
  const std::size_t len = 400, bins = 201;
  std::vector<double> envelope(bins), mag(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(len);
    envelope[k] = std::exp(1.0 + 0.8 * std::cos(3.0 * w) - 0.5 * std::cos(7.0 * w) + 0.3 * std::cos(12.0 * w));
    mag[k] = envelope[k] * std::exp(0.4 * std::cos(60.0 * w));  // ripple quefrency 60 > lifter 30
  }
  const auto env = mp::cepstral_envelope(from_magnitude(mag), 30);
  double worst = 0.0;
  for (std::size_t k = 0; k < bins; ++k) worst = std::max(worst, std::abs(env[k] - envelope[k]) / envelope[k]);
  EXPECT_LT(worst, 0.05);
}

TEST(CepstralEnvelope, StrictlyPositiveEvenForSilence) {
  mp::Rng rng(18);
  for (const auto& x : {std::vector<double>(400, 0.0), random_frame(rng, 400)}) {
    for (double v : mp::cepstral_envelope(mp::rfft(x), 30)) EXPECT_GT(v, 0.0);
  }
}
