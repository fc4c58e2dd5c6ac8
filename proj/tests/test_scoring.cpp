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
#include <limits>
#include <vector>

#include "magphase/rng.hpp"
#include "magphase/scoring.hpp"
#include "oracles.hpp"

namespace mp = magphase;

namespace {

mp::TrialList make_trials(const std::vector<bool>& is_target) {
  mp::TrialList t;
  for (std::size_t i = 0; i < is_target.size(); ++i) {
    t.trials.push_back({is_target[i], "e" + std::to_string(i), "t" + std::to_string(i)});
  }
  return t;
}

struct ScoreSet {
  std::vector<double> scores;
  std::vector<bool> is_target;
};

ScoreSet gaussian_set(mp::Rng& rng, std::size_t n_tgt, std::size_t n_non, double gap) {
  ScoreSet s;
  for (std::size_t i = 0; i < n_tgt; ++i) s.scores.push_back(gap + rng.normal()), s.is_target.push_back(true);
  for (std::size_t i = 0; i < n_non; ++i) s.scores.push_back(rng.normal()), s.is_target.push_back(false);
  return s;
}

}  // namespace

TEST(Cosine, BasicValues) {
  const std::vector<double> a{1.0, 2.0, -0.5}, b{0.3, -1.0, 4.0};
  EXPECT_DOUBLE_EQ(mp::cosine(a, a), 1.0);
  EXPECT_EQ(mp::cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  const std::vector<double> a3{3.0, 6.0, -1.5};
  EXPECT_NEAR(mp::cosine(a3, b), mp::cosine(a, b), 1e-12);
  EXPECT_THROW(mp::cosine(a, std::vector<double>{0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(mp::cosine(a, std::vector<double>{1, 0}), std::invalid_argument);
}

TEST(ScoreIdentification, AveragesCosinesOverUtterances) {
  mp::EnrollDB db;
  db.add("s0", {1.0, 0.0});
  db.add("s1", {0.0, 2.0});
  db.add("s2", {1.0, 1.0});
  const std::vector<mp::Embedding> two{{1.0, 0.0}, {0.0, 1.0}};
  const auto s = mp::score_identification(two, db);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  const std::vector<mp::Embedding> one{{0.3, 0.7}};
  const auto single = mp::score_identification(one, db);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_DOUBLE_EQ(single[n], mp::cosine(one[0], db.rows[n]));
  EXPECT_THROW(mp::score_identification(std::vector<mp::Embedding>{}, db), std::invalid_argument);
  EXPECT_THROW(db.add("s0", {1.0, 1.0}), std::invalid_argument);
}

TEST(DecisionFuse, EndpointsAndMean) {
  const std::vector<double> g{0.2, -0.1, 0.7}, f{0.6, 0.3, 0.1};
  EXPECT_EQ(mp::decision_fuse(g, f, 1.0), g);
  EXPECT_EQ(mp::decision_fuse(g, f, 0.0), f);
  EXPECT_NEAR(mp::decision_fuse(g, f, 0.5)[0], 0.4, 1e-15);
  EXPECT_THROW(mp::decision_fuse(g, f, 1.5), std::invalid_argument);
  EXPECT_THROW(mp::decision_fuse(g, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(DecisionFuse, EndpointArgmaxMatchesSingleSystem) {
  mp::Rng rng(61);
  std::vector<double> g(20), f(20);
  for (auto& v : g) v = rng.normal();
  for (auto& v : f) v = rng.normal();
  auto argmax = [](const std::vector<double>& v) { return std::max_element(v.begin(), v.end()) - v.begin(); };
  EXPECT_EQ(argmax(mp::decision_fuse(g, f, 1.0)), argmax(g));
  EXPECT_EQ(argmax(mp::decision_fuse(g, f, 0.0)), argmax(f));
}

TEST(Top1, IdentityTiesAndHalf) {
  const std::vector<std::vector<double>> eye{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const std::vector<std::size_t> truth{0, 1, 2};
  EXPECT_EQ(mp::top1_accuracy(eye, truth), 100.0);
  const std::vector<std::vector<double>> flat(3, std::vector<double>(3, 0.5));
  const std::vector<std::size_t> not_zero{1, 2, 1};
  EXPECT_EQ(mp::top1_accuracy(flat, not_zero), 0.0);
  const std::vector<std::vector<double>> four{{1, 0}, {0, 1}, {1, 0}, {0, 1}};
  const std::vector<std::size_t> half{0, 1, 1, 0};
  EXPECT_EQ(mp::top1_accuracy(four, half), 50.0);
  EXPECT_THROW(mp::top1_accuracy({}, std::vector<std::size_t>{}), std::invalid_argument);
}

TEST(Eer, SeparableIsZero) {
  const std::vector<double> s{0.9, 0.8, 0.1, 0.2};
  EXPECT_EQ(mp::eer(s, make_trials({true, true, false, false})), 0.0);
}

TEST(Eer, InterleavedIsHalf) {
  const std::vector<double> s{0.8, 0.2, 0.7, 0.1};
  EXPECT_DOUBLE_EQ(mp::eer(s, make_trials({true, true, false, false})), 0.5);
}

TEST(Eer, MissingClassThrows) {
  const std::vector<double> s{0.8, 0.2};
  EXPECT_THROW(mp::eer(s, make_trials({true, true})), std::invalid_argument);
  EXPECT_THROW(mp::min_dcf(s, make_trials({false, false})), std::invalid_argument);
  EXPECT_THROW(mp::eer(std::vector<double>{}, make_trials({})), std::invalid_argument);
}

TEST(Eer, MatchesDenseThresholdSweep) {
  mp::Rng rng(62);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t nt = 20 + rng.below(60), nn = 50 + rng.below(200);
    const auto s = gaussian_set(rng, nt, nn, rng.uniform(0.5, 3.0));
    const double tol = 1.0 / (2.0 * static_cast<double>(std::min(nt, nn)));
    EXPECT_NEAR(mp::eer(s.scores, make_trials(s.is_target)), mp::oracle::dense_eer(s.scores, s.is_target), tol);
  }
}

TEST(Eer, InvariantUnderMonotoneTransform) {
  mp::Rng rng(63);
  const auto s = gaussian_set(rng, 40, 120, 1.5);
  const auto trials = make_trials(s.is_target);
  std::vector<double> t(s.scores);
  for (double& v : t) v = std::exp(2.0 * v) + 3.0;
  EXPECT_DOUBLE_EQ(mp::eer(t, trials), mp::eer(s.scores, trials));
  EXPECT_DOUBLE_EQ(mp::min_dcf(t, trials), mp::min_dcf(s.scores, trials));
}

TEST(Eer, NegatedScoresWithFlippedLabelsAgree) {
  mp::Rng rng(64);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = gaussian_set(rng, 37, 91, 1.0);
    std::vector<double> neg(s.scores);
    for (double& v : neg) v = -v;
    std::vector<bool> flipped(s.is_target.size());
    for (std::size_t i = 0; i < flipped.size(); ++i) flipped[i] = !s.is_target[i];
    EXPECT_NEAR(mp::eer(neg, make_trials(flipped)), mp::eer(s.scores, make_trials(s.is_target)), 1e-12);
  }
}

TEST(Eer, BoundedForOrientedScores) {
  mp::Rng rng(65);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = gaussian_set(rng, 30, 30, rng.uniform(0.0, 2.0));
    // Orient the scores: of s and -s, keep the better one.
    std::vector<double> neg(s.scores);
    for (double& v : neg) v = -v;
    const auto trials = make_trials(s.is_target);
    const double e = std::min(mp::eer(s.scores, trials), mp::eer(neg, trials));
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 0.5);
  }
}

TEST(MinDcf, SeparableIsZeroAndReversedIsOne) {
  const auto trials = make_trials({true, true, false, false});
  EXPECT_EQ(mp::min_dcf(std::vector<double>{0.9, 0.8, 0.1, 0.2}, trials), 0.0);
  EXPECT_DOUBLE_EQ(mp::min_dcf(std::vector<double>{0.1, 0.2, 0.9, 0.8}, trials), 1.0);
}

TEST(MinDcf, MatchesExhaustiveThresholdSearch) {
  mp::Rng rng(66);
  for (int trial = 0; trial < 10; ++trial) {
    auto s = gaussian_set(rng, 10 + rng.below(40), 40 + rng.below(150), rng.uniform(0.5, 3.0));
    // Quantize so that ties across classes occur.
    for (double& v : s.scores) v = std::round(v * 8.0) / 8.0;
    EXPECT_NEAR(mp::min_dcf(s.scores, make_trials(s.is_target)), mp::oracle::exhaustive_min_dcf(s.scores, s.is_target),
                1e-9);
  }
}

TEST(MinDcf, NeverExceedsOne) {
  mp::Rng rng(67);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = gaussian_set(rng, 25, 80, rng.uniform(-2.0, 2.0));
    EXPECT_LE(mp::min_dcf(s.scores, make_trials(s.is_target)), 1.0);
  }
}

TEST(MinDcf, CustomCostsUseTheirOwnNormalizer) {
  mp::Rng rng(68);
  const auto s = gaussian_set(rng, 30, 100, 1.2);
  const mp::DcfParams p{0.01, 10.0, 1.0};
  EXPECT_NEAR(mp::min_dcf(s.scores, make_trials(s.is_target), p),
              mp::oracle::exhaustive_min_dcf(s.scores, s.is_target, 0.01, 10.0, 1.0), 1e-9);
}

TEST(ScoreFiles, RoundTripAtFullPrecision) {
  mp::Rng rng(69);
  std::vector<double> s(50);
  for (double& v : s) v = rng.normal();
  const auto path = std::filesystem::temp_directory_path() / "magphase_scores.txt";
  mp::write_scores(path.string(), s);
  EXPECT_EQ(mp::read_scores(path.string()), s);
  std::ofstream(path) << "0.5\nabc\n";
  try {
    mp::read_scores(path.string());
    FAIL();
  } catch (const mp::ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::filesystem::remove(path);
}
