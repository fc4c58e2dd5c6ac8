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

// Seeded source-filter speakers. A speaker is a fixed f0 and a set of
// formant resonances; every glottal pulse excites one damped sinusoid per
// formant, so the pulse train puts energy at the f0 harmonics under the
// formant envelope.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "magphase/audio_io.hpp"
#include "magphase/rng.hpp"

namespace magphase {

struct Formant {
  double center_hz;
  double bandwidth_hz;
};

struct SynthSpeakerSpec {
  double f0 = 120.0;
  std::vector<Formant> formants;
  double jitter = 0.01;  // relative std of each pitch period
  std::uint64_t seed = 0;

  void validate() const {
    if (!(f0 >= 80.0 && f0 <= 300.0)) throw std::invalid_argument("SynthSpeakerSpec: f0 outside [80, 300] Hz");
    if (formants.empty()) throw std::invalid_argument("SynthSpeakerSpec: no formants");
    for (const auto& f : formants) {
      if (!(f.center_hz > 0.0 && f.center_hz < 8000.0) || !(f.bandwidth_hz > 0.0)) {
        throw std::invalid_argument("SynthSpeakerSpec: formant centers must lie in (0, 8000) Hz");
      }
    }
    if (!(jitter >= 0.0 && jitter < 0.5)) throw std::invalid_argument("SynthSpeakerSpec: jitter outside [0, 0.5)");
  }
};

// Speaker `index` of `count`. f0 values are spread evenly over [90, 270] Hz;
// each formant range is cut into `count` slots and every formant takes a
// slot from its own seeded permutation, so speakers with neighbouring f0 do
// not also share an envelope.
inline SynthSpeakerSpec make_speaker(std::uint64_t seed, std::size_t index, std::size_t count) {
  if (index >= count) throw std::invalid_argument("make_speaker: index out of range");
  Rng shared(seed);
  auto slot_of = [&]() {
    std::vector<std::size_t> perm(count);
    for (std::size_t i = 0; i < count; ++i) perm[i] = i;
    for (std::size_t i = count; i > 1; --i) std::swap(perm[i - 1], perm[shared.below(i)]);
    return perm[index];
  };
  const std::size_t s1 = slot_of(), s2 = slot_of(), s3 = slot_of();
  Rng rng(seed * 1000003ULL + index);
  auto pick = [&](double lo, double hi, std::size_t slot) {
    const double w = (hi - lo) / static_cast<double>(count);
    return lo + w * (static_cast<double>(slot) + rng.uniform(0.25, 0.75));
  };
  SynthSpeakerSpec s;
  s.f0 = pick(90.0, 270.0, index);
  s.formants = {{pick(300.0, 900.0, s1), rng.uniform(60.0, 120.0)},
                {pick(900.0, 2500.0, s2), rng.uniform(80.0, 150.0)},
                {pick(2200.0, 3500.0, s3), rng.uniform(100.0, 200.0)}};
  s.jitter = 0.01;
  s.seed = rng.next();
  s.validate();
  return s;
}

// One utterance. Per utterance the f0 drifts by up to 1.5% and each formant
// amplitude varies by up to 20%; per pulse the period is jittered.
inline Waveform synth_utterance(const SynthSpeakerSpec& spk, std::size_t utt_index, double duration_s) {
  spk.validate();
  if (!(duration_s > 0.0)) throw std::invalid_argument("synth_utterance: duration must be positive");
  Rng rng(spk.seed ^ (0x9E3779B97F4A7C15ULL * (utt_index + 1)));
  const double fs = kSampleRate;
  const auto n = static_cast<std::size_t>(std::llround(duration_s * fs));
  Waveform w;
  w.samples.assign(n, 0.0);

  const double f0 = spk.f0 * (1.0 + rng.uniform(-0.015, 0.015));
  std::vector<double> amp(spk.formants.size());
  for (std::size_t k = 0; k < amp.size(); ++k) amp[k] = (1.0 / static_cast<double>(k + 1)) * rng.uniform(0.8, 1.2);
  // Slow vibrato so the pitch is not perfectly stationary.
  const double vib_rate = rng.uniform(3.0, 6.0), vib_depth = 0.01, vib_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const auto ring = static_cast<std::size_t>(0.03 * fs);  // 30 ms of resonance per pulse
  double t = rng.uniform(0.0, 1.0 / f0);
  while (t * fs < static_cast<double>(n)) {
    const auto start = static_cast<std::size_t>(t * fs);
    const double frac = t * fs - static_cast<double>(start);
    const std::size_t stop = std::min(n, start + ring);
    for (std::size_t k = 0; k < spk.formants.size(); ++k) {
      const auto& fm = spk.formants[k];
      const double decay = std::numbers::pi * fm.bandwidth_hz / fs;
      const double omega = 2.0 * std::numbers::pi * fm.center_hz / fs;
      for (std::size_t i = start; i < stop; ++i) {
        const double tau = static_cast<double>(i - start) - frac;
        if (tau < 0.0) continue;
        w.samples[i] += amp[k] * std::exp(-decay * tau) * std::sin(omega * tau);
      }
    }
    const double inst_f0 = f0 * (1.0 + vib_depth * std::sin(2.0 * std::numbers::pi * vib_rate * t + vib_phase));
    t += (1.0 / inst_f0) * (1.0 + spk.jitter * rng.normal());
  }

  double peak = 0.0;
  for (double x : w.samples) peak = std::max(peak, std::abs(x));
  const double gain = peak > 0.0 ? 0.5 / peak : 1.0;
  for (double& x : w.samples) x = x * gain + 0.002 * rng.normal();
  return w;
}

}  // namespace magphase
