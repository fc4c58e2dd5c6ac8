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

// Cosine scoring, decision-level score fusion, and the identification and
// verification metrics (Top-1, EER, minDCF).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "magphase/audio_io.hpp"

namespace magphase {

using Embedding = std::vector<double>;

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine: length " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw std::invalid_argument("cosine: zero vector");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

struct EnrollDB {
  std::vector<std::string> ids;
  std::vector<Embedding> rows;  // N x D

  void add(std::string id, Embedding e) {
    if (std::find(ids.begin(), ids.end(), id) != ids.end()) {
      throw std::invalid_argument("EnrollDB: duplicate id " + id);
    }
    if (!rows.empty() && e.size() != rows.front().size()) {
      throw std::invalid_argument("EnrollDB: embedding dimension mismatch for " + id);
    }
    ids.push_back(std::move(id));
    rows.push_back(std::move(e));
  }
  std::size_t size() const { return rows.size(); }
};

// Mean over the test speaker's utterances of the cosine against every
// enrolled row; one score per enrolled speaker.
inline std::vector<double> score_identification(std::span<const Embedding> test_utts, const EnrollDB& db) {
  if (test_utts.empty()) throw std::invalid_argument("score_identification: no test utterances");
  std::vector<double> s(db.size(), 0.0);
  for (const auto& e : test_utts)
    for (std::size_t n = 0; n < db.size(); ++n) s[n] += cosine(e, db.rows[n]);
  for (double& v : s) v /= static_cast<double>(test_utts.size());
  return s;
}

// r * s_g + (1 - r) * s_f, elementwise.
inline std::vector<double> decision_fuse(std::span<const double> s_g, std::span<const double> s_f,
                                         double ratio = 0.5) {
  if (s_g.size() != s_f.size()) {
    throw std::invalid_argument("decision_fuse: " + std::to_string(s_g.size()) + " vs " +
                                std::to_string(s_f.size()) + " scores");
  }
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("decision_fuse: ratio outside [0, 1]");
  std::vector<double> out(s_g.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Endpoints return the selected system verbatim.
    if (ratio == 1.0) out[i] = s_g[i];
    else if (ratio == 0.0) out[i] = s_f[i];
    else out[i] = ratio * s_g[i] + (1.0 - ratio) * s_f[i];
  }
  return out;
}

// Percentage of rows whose argmax (first index on ties) is the true id.
inline double top1_accuracy(const std::vector<std::vector<double>>& scores, std::span<const std::size_t> truth) {
  if (scores.empty() || scores.size() != truth.size()) {
    throw std::invalid_argument("top1_accuracy: need one true id per nonempty score row");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& row = scores[i];
    if (row.empty()) throw std::invalid_argument("top1_accuracy: empty score row");
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hit += best == truth[i];
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(scores.size());
}

// One (FAR, FRR) operating point per distinct score used as threshold, plus
// the accept-nothing point at +inf. A trial is accepted when score >= t.
struct RocPoint {
  double threshold;
  double far;
  double frr;
};

inline std::vector<RocPoint> roc_sweep(std::span<const double> scores, const std::vector<bool>& is_target) {
  if (scores.size() != is_target.size()) {
    throw std::invalid_argument("roc_sweep: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(is_target.size()) + " trials");
  }
  std::vector<double> tgt, non;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw std::invalid_argument("roc_sweep: non-finite score");
    (is_target[i] ? tgt : non).push_back(scores[i]);
  }
  if (tgt.empty() || non.empty()) {
    throw std::invalid_argument("need at least one target and one nontarget trial");
  }
  std::sort(tgt.begin(), tgt.end());
  std::sort(non.begin(), non.end());
  std::vector<double> thr(scores.begin(), scores.end());
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  const double nt = static_cast<double>(tgt.size()), nn = static_cast<double>(non.size());
  std::vector<RocPoint> pts;
  pts.reserve(thr.size() + 1);
  std::size_t it = 0, in = 0;  // counts of targets / nontargets strictly below t
  for (double t : thr) {
    while (it < tgt.size() && tgt[it] < t) ++it;
    while (in < non.size() && non[in] < t) ++in;
    pts.push_back({t, static_cast<double>(non.size() - in) / nn, static_cast<double>(it) / nt});
  }
  pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  return pts;
}

inline std::vector<bool> target_mask(const TrialList& trials) {
  std::vector<bool> m;
  m.reserve(trials.trials.size());
  for (const auto& t : trials.trials) m.push_back(t.is_target);
  return m;
}


// Equal error rate, linearly interpolated between the adjacent sweep points
// where FAR - FRR changes sign.
inline double eer(std::span<const double> scores, const TrialList& trials) {
  const auto pts = roc_sweep(scores, target_mask(trials));
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const double d0 = pts[i].far - pts[i].frr;
    const double d1 = pts[i + 1].far - pts[i + 1].frr;
    if (d0 == 0.0) return pts[i].far;
    if (d0 > 0.0 && d1 <= 0.0) {
      const double lambda = d0 / (d0 - d1);
      return pts[i].far + lambda * (pts[i + 1].far - pts[i].far);
    }
  }
  return pts.back().far;  // unreachable: the +inf point always has FAR < FRR
}

struct DcfParams {
  double p_target = 0.05;
  double c_miss = 1.0;
  double c_fa = 1.0;
};

// Minimum detection cost over the sweep, normalized by the cost of the best
// trivial (accept-all or reject-all) system.
inline double min_dcf(std::span<const double> scores, const TrialList& trials, DcfParams p = {}) {
  const auto pts = roc_sweep(scores, target_mask(trials));
  double best = std::numeric_limits<double>::infinity();
  for (const auto& pt : pts) {
    best = std::min(best, p.c_miss * p.p_target * pt.frr + p.c_fa * (1.0 - p.p_target) * pt.far);
  }
  return best / std::min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target));
}

// ---------------------------------------------------------------------------
// Text formats

inline std::vector<double> read_scores(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<double> out;
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    std::istringstream ls(line);
    double v;
    if (!(ls >> v)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw ParseError(path, no, "expected a real score");
    }
    std::string extra;
    if (ls >> extra) throw ParseError(path, no, "expected a single real per line");
    out.push_back(v);
  }
  return out;
}

inline void write_scores(const std::string& path, std::span<const double> scores) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << std::setprecision(17);
  for (double v : scores) os << v << '\n';
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace magphase
