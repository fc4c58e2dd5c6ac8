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
#include <filesystem>
#include <numbers>
#include <vector>

#include "magphase/features.hpp"
#include "magphase/rng.hpp"
#include "magphase/synth.hpp"
#include "oracles.hpp"

namespace mp = magphase;

namespace {

std::vector<double> tone(double hz, std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = 0.5 * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0);
  return x;
}

mp::FeatureMatrix random_matrix(mp::Rng& rng, std::size_t rows, std::size_t cols) {
  mp::FeatureMatrix m(rows, cols);
  for (double& v : m.values) v = 3.0 + 2.0 * rng.normal();
  return m;
}

mp::ModgdParams identity_params() {
  mp::ModgdParams p;
  p.gamma = 1.0;
  p.lifter_len = 199;
  p.denom_floor = 1e-300;  // keep the floor out of the exact comparisons
  return p;
}

std::vector<double> voiced(std::uint64_t seed, double seconds) {
  return mp::synth_utterance(mp::make_speaker(seed, 1, 4), 0, seconds).samples;
}

}  // namespace

TEST(MelScale, KnownValuesAndInverse) {
  EXPECT_EQ(mp::hz_to_mel(0.0), 0.0);
  EXPECT_NEAR(mp::hz_to_mel(1000.0), 999.99, 0.1);
  EXPECT_NEAR(mp::mel_to_hz(mp::hz_to_mel(4321.0)), 4321.0, 1e-6);
  EXPECT_THROW(mp::hz_to_mel(-1.0), std::domain_error);
}

TEST(MelFilterbank, SixtyFourTrianglesWithIncreasingCenters) {
  const mp::MelFilterbank bank;
  ASSERT_EQ(bank.size(), 64u);
  EXPECT_EQ(bank.num_bins(), 257u);
  for (std::size_t j = 0; j < bank.size(); ++j) {
    const auto& f = bank.filter(j);
    if (j > 0) {
      EXPECT_GT(f.center_hz, bank.filter(j - 1).center_hz);
    }
    ASSERT_FALSE(f.weights.empty()) << "filter " << j;
    double peak = 0.0;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < 257; ++k) {
      const double w = bank.weight(j, k);
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0);
      if (k < f.start_bin || k >= f.end_bin) {
        EXPECT_EQ(w, 0.0);
      }
      if (w > peak) {
        peak = w;
        arg = k;
      }
    }
    // The largest tap sits on a bin adjacent to the center frequency.
    EXPECT_LE(std::abs(static_cast<double>(arg) - f.center_hz / 31.25), 1.0) << "filter " << j;
  }
}

TEST(MelFilterbank, PeakBinWeightFollowsTheTriangle) {
  // Neighbouring centers are the triangle edges, so the weight at a bin is
  // 1 minus its mel distance from the center over the half width.
  const mp::MelFilterbank bank;
  for (std::size_t j = 1; j < 64; ++j) {
    const auto& f = bank.filter(j);
    const double half = mp::hz_to_mel(f.center_hz) - mp::hz_to_mel(bank.filter(j - 1).center_hz);
    const double off = std::abs(mp::hz_to_mel(static_cast<double>(f.peak_bin) * 31.25) - mp::hz_to_mel(f.center_hz));
    EXPECT_NEAR(bank.weight(j, f.peak_bin), 1.0 - off / half, 1e-9) << "filter " << j;
  }
}

TEST(ComputeFbank, ToneEnergyPeaksInNearestFilter) {
  const auto stat = mp::fbank_static(tone(1000.0, 16000));
  const mp::MelFilterbank bank;
  std::size_t nearest = 0;
  for (std::size_t j = 1; j < 64; ++j) {
    if (std::abs(bank.filter(j).center_hz - 1000.0) < std::abs(bank.filter(nearest).center_hz - 1000.0)) nearest = j;
  }
  std::vector<double> mean(64, 0.0);
  for (std::size_t t = 0; t < stat.rows; ++t)
    for (std::size_t j = 0; j < 64; ++j) mean[j] += stat.at(t, j);
  const auto arg = static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());
  EXPECT_EQ(arg, nearest);
}

TEST(ComputeFbank, SilenceGivesAllZeros) {
  const auto m = mp::compute_fbank(std::vector<double>(16000, 0.0));
  EXPECT_EQ(m.cols, 192u);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(ComputeFbank, ShapeAndNormalization) {
  const auto x = voiced(5, 1.0);
  const auto m = mp::compute_fbank(x);
  EXPECT_EQ(m.rows, 98u);
  EXPECT_EQ(m.cols, 192u);
  EXPECT_EQ(m.kind, mp::FeatureKind::kFbank192);
  // Rebuild the pre-normalization matrix to know each column's variance.
  const auto stat = mp::fbank_static(x);
  const auto d1 = mp::delta(stat);
  const auto d2 = mp::delta(d1);
  auto column_stats = [](const mp::FeatureMatrix& a, std::size_t c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t t = 0; t < a.rows; ++t) mu += a.at(t, c);
    mu /= static_cast<double>(a.rows);
    for (std::size_t t = 0; t < a.rows; ++t) var += (a.at(t, c) - mu) * (a.at(t, c) - mu);
    return std::pair{mu, var / static_cast<double>(a.rows)};
  };
  for (std::size_t c = 0; c < m.cols; ++c) {
    const auto& src = c < 64 ? stat : c < 128 ? d1 : d2;
    const double raw_var = column_stats(src, c % 64).second;
    const auto [mu, var] = column_stats(m, c);
    EXPECT_LT(std::abs(mu), 1e-9);
    // The 1e-8 floor inside the square root leaves var / (var + 1e-8).
    EXPECT_NEAR(var, raw_var / (raw_var + 1e-8), 1e-9);
    if (raw_var >= 1e-2) {
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(Delta, ConstantRowsGiveZeros) {
  mp::FeatureMatrix m(6, 3);
  for (double& v : m.values) v = 4.0;
  for (double v : mp::delta(m).values) EXPECT_EQ(v, 0.0);
}

TEST(Delta, RampHasUnitSlopeInTheInterior) {
  mp::FeatureMatrix m(10, 1);
  for (std::size_t t = 0; t < 10; ++t) m.at(t, 0) = static_cast<double>(t);
  const auto d = mp::delta(m);
  for (std::size_t t = 2; t < 8; ++t) EXPECT_DOUBLE_EQ(d.at(t, 0), 1.0);
  EXPECT_DOUBLE_EQ(d.at(0, 0), (1.0 * 1 + 2.0 * 2) / 10.0);  // replicate padding at the start
}

TEST(Delta, SingleRowGivesZeros) {
  mp::FeatureMatrix m(1, 4);
  m.values = {1, 2, 3, 4};
  for (double v : mp::delta(m).values) EXPECT_EQ(v, 0.0);
}

TEST(Cmvn, ZeroMeanUnitVarianceAndConstantColumns) {
  mp::Rng rng(21);
  auto m = random_matrix(rng, 50, 4);
  for (std::size_t t = 0; t < m.rows; ++t) m.at(t, 2) = 7.0;
  const auto n = mp::cmvn(m);
  for (std::size_t c = 0; c < 4; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t t = 0; t < n.rows; ++t) mu += n.at(t, c);
    mu /= 50.0;
    for (std::size_t t = 0; t < n.rows; ++t) var += (n.at(t, c) - mu) * (n.at(t, c) - mu);
    var /= 50.0;
    EXPECT_LT(std::abs(mu), 1e-9);
    if (c == 2) {
      for (std::size_t t = 0; t < n.rows; ++t) EXPECT_EQ(n.at(t, c), 0.0);
    } else {
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(Cmvn, Idempotent) {
  mp::Rng rng(22);
  const auto once = mp::cmvn(random_matrix(rng, 40, 5));
  const auto twice = mp::cmvn(once);
  for (std::size_t i = 0; i < once.values.size(); ++i) EXPECT_NEAR(twice.values[i], once.values[i], 1e-6);
}

TEST(GroupDelay, ShiftedImpulseHasConstantDelay) {
  for (std::size_t k : {0u, 5u, 120u}) {
    std::vector<double> x(400, 0.0);
    x[k] = 1.0;
    const auto [sx, sy] = mp::stft_pair(x);
    const auto tau = mp::compute_group_delay(sx, sy, identity_params());
    ASSERT_EQ(tau.size(), 201u);
    for (double v : tau) EXPECT_NEAR(v, static_cast<double>(k), 1e-6);
  }
}

TEST(GroupDelay, ZeroFrameGivesZeros) {
  const auto [sx, sy] = mp::stft_pair(std::vector<double>(400, 0.0));
  for (double v : mp::compute_group_delay(sx, sy, mp::ModgdParams{})) EXPECT_EQ(v, 0.0);
}

TEST(GroupDelay, MinimumPhaseFrameMatchesUnwrappedPhaseSlope) {
  mp::Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x(400, 0.0);
    const auto h = mp::oracle::min_phase_fir(rng, 24);
    std::copy(h.begin(), h.end(), x.begin());
    const auto [sx, sy] = mp::stft_pair(x);
    const auto tau = mp::compute_group_delay(sx, sy, identity_params());
    const auto ref = mp::oracle::unwrapped_group_delay(x);
    double worst = 0.0;
    for (std::size_t k = 0; k < tau.size(); ++k) worst = std::max(worst, std::abs(tau[k] - ref[k]));
    EXPECT_LT(worst, 0.5) << "trial " << trial;
  }
}

TEST(GroupDelay, MatchesDirectDftExpression) {
  mp::Rng rng(24);
  std::vector<double> x(400, 0.0);
  const auto h = mp::oracle::min_phase_fir(rng, 30);
  std::copy(h.begin(), h.end(), x.begin());
  std::vector<double> nx(400);
  for (std::size_t n = 0; n < 400; ++n) nx[n] = static_cast<double>(n) * x[n];
  const auto dx = mp::oracle::dft(x, 201), dy = mp::oracle::dft(nx, 201);
  const auto [sx, sy] = mp::stft_pair(x);
  const auto tau = mp::compute_group_delay(sx, sy, identity_params());
  for (std::size_t k = 0; k < 201; ++k) {
    const double mag = std::abs(dx[k]) + 1e-10;
    const double ref = (dx[k].real() * dy[k].real() + dx[k].imag() * dy[k].imag()) / (mag * mag);
    EXPECT_NEAR(tau[k], ref, 1e-9 * std::max(1.0, std::abs(ref)));
  }
}

TEST(ModifyGroupDelay, UnitValuesAndOddness) {
  EXPECT_EQ(mp::modify_group_delay(1.0, 0.4), 1.0);
  EXPECT_EQ(mp::modify_group_delay(-1.0, 0.4), -1.0);
  EXPECT_EQ(mp::modify_group_delay(0.0, 0.4), 0.0);
  for (double t : {0.01, 0.5, 3.0, 250.0}) {
    EXPECT_EQ(mp::modify_group_delay(-t, 0.4), -mp::modify_group_delay(t, 0.4));
    EXPECT_LE(std::abs(mp::modify_group_delay(t, 0.4)), std::max(1.0, t));
  }
}

TEST(ComputeModgd, SignMatchesRawGroupDelay) {
  mp::Rng rng(25);
  std::vector<double> x(400);
  for (double& v : x) v = rng.normal();
  const mp::ModgdParams p;
  const auto [sx, sy] = mp::stft_pair(x);
  const auto tau = mp::compute_group_delay(sx, sy, p);
  const auto raw = mp::modgd_raw(x, mp::ModgdParams{0.4, 0.9, 30, 1e-8, {400, 160, mp::WindowType::kRectangular, 0.0}});
  for (std::size_t k = 0; k < tau.size(); ++k) {
    EXPECT_EQ(std::signbit(raw.at(0, k)), std::signbit(tau[k])) << k;
  }
}

TEST(ComputeModgd, OneSecondGives98By201) {
  const auto m = mp::compute_modgd(voiced(6, 1.0));
  EXPECT_EQ(m.rows, 98u);
  EXPECT_EQ(m.cols, 201u);
  EXPECT_EQ(m.kind, mp::FeatureKind::kModgd201);
  for (double v : m.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(ComputeModgd, InvariantToGlobalGain) {
  const auto x = voiced(7, 0.5);
  const auto ref = mp::compute_modgd(x);
  // The 1e-10 log floor is absolute, so the residue grows as 1/c for tiny
  // gains; over 0.1..100 it stays below 1e-6.
  for (double c : {0.1, 0.5, 3.0, 100.0}) {
    std::vector<double> y(x);
    for (double& v : y) v *= c;
    const auto m = mp::compute_modgd(y);
    double worst = 0.0;
    for (std::size_t i = 0; i < m.values.size(); ++i) worst = std::max(worst, std::abs(m.values[i] - ref.values[i]));
    EXPECT_LT(worst, 1e-6) << "gain " << c;
  }
}

TEST(ComputeModgd, RejectsBadParams) {
  const auto x = voiced(8, 0.1);
  EXPECT_THROW(mp::compute_modgd(x, mp::ModgdParams{0.0}), std::invalid_argument);
  EXPECT_THROW(mp::compute_modgd(x, mp::ModgdParams{0.4, 1.5}), std::invalid_argument);
}

TEST(FeatureFile, RoundTripAtFloatPrecision) {
  mp::Rng rng(26);
  auto m = random_matrix(rng, 7, 201);
  m.kind = mp::FeatureKind::kModgd201;
  const auto path = std::filesystem::temp_directory_path() / "magphase_test.mpf";
  mp::write_features(path.string(), m);
  const auto r = mp::read_features(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(r.rows, 7u);
  EXPECT_EQ(r.cols, 201u);
  EXPECT_EQ(r.kind, mp::FeatureKind::kModgd201);
  for (std::size_t i = 0; i < m.values.size(); ++i) EXPECT_EQ(r.values[i], static_cast<double>(static_cast<float>(m.values[i])));
}

TEST(FeatureFile, RejectsWidthThatDisagreesWithKind) {
  mp::FeatureMatrix m(2, 5);
  EXPECT_THROW(mp::write_features((std::filesystem::temp_directory_path() / "bad.mpf").string(), m), std::invalid_argument);
}
