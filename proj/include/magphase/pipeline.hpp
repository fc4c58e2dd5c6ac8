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

// End-to-end commands: synthesize, extract, train, embed, score, evaluate.
// Each is a plain function so the command-line tool and the tests share one
// code path.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "magphase/audio_io.hpp"
#include "magphase/features.hpp"
#include "magphase/model.hpp"
#include "magphase/rng.hpp"
#include "magphase/scoring.hpp"
#include "magphase/synth.hpp"

namespace magphase {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

// `key = value` lines, '#' starts a comment. Keys:
//   preset      full | tiny             branch widths and depths
//   channels    comma list, 5 entries   overrides the preset widths
//   blocks      comma list, 4 entries   overrides the preset depths
//   fusion      coattention | concat | fbank | modgd
//   loss        aam | softmax
//   scale, margin                       AAM s and m
//   optimizer   sgd | adam
//   lr, momentum, lr_decay              lr_decay is applied once per epoch
//   batch_size, steps
//   segment_s, hop_s                    training crop length and crop hop
//   seed
struct TrainConfig {
  ModelConfig model;
  std::string optimizer = "sgd";
  double lr = 1e-4;
  double momentum = 0.9;
  double lr_decay = 0.0;
  std::size_t batch_size = 8;
  std::size_t steps = 300;
  double segment_s = 3.0;
  double hop_s = 1.0;

  void validate() const {
    model.branch.validate();
    if (optimizer != "sgd" && optimizer != "adam") throw std::invalid_argument("config: optimizer must be sgd or adam");
    if (!(lr >= 0.0)) throw std::invalid_argument("config: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("config: momentum must lie in [0, 1)");
    if (!(lr_decay >= 0.0 && lr_decay < 1.0)) throw std::invalid_argument("config: lr_decay must lie in [0, 1)");
    if (batch_size == 0 || steps == 0) throw std::invalid_argument("config: batch_size and steps must be positive");
    if (!(segment_s > 0.0 && hop_s > 0.0)) throw std::invalid_argument("config: segment_s and hop_s must be positive");
    if (!(model.scale > 0.0) || !(model.margin >= 0.0 && model.margin < 1.5707963267948966)) {
      throw std::invalid_argument("config: need scale > 0 and 0 <= margin < pi/2");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::size_t> parse_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string tok; std::getline(ss, tok, ',');) out.push_back(std::stoul(trim(tok)));
  return out;
}

}  // namespace detail

inline TrainConfig parse_config(std::istream& is, const std::string& name = "<config>") {
  TrainConfig cfg;
  std::vector<std::size_t> channels, blocks;
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    line = detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(name, no, "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    try {
      if (key == "preset") {
        if (val == "full") cfg.model.branch = BranchConfig::full();
        else if (val == "tiny") cfg.model.branch = BranchConfig::tiny();
        else throw ParseError(name, no, "preset must be full or tiny");
      } else if (key == "channels") {
        channels = detail::parse_size_list(val);
      } else if (key == "blocks") {
        blocks = detail::parse_size_list(val);
      } else if (key == "fusion") {
        if (val == "coattention") cfg.model.fusion = FusionMode::kCoAttention;
        else if (val == "concat") cfg.model.fusion = FusionMode::kConcat;
        else if (val == "fbank") cfg.model.fusion = FusionMode::kFbankOnly;
        else if (val == "modgd") cfg.model.fusion = FusionMode::kModgdOnly;
        else throw ParseError(name, no, "fusion must be coattention, concat, fbank or modgd");
      } else if (key == "loss") {
        if (val == "aam") cfg.model.loss = LossKind::kAam;
        else if (val == "softmax") cfg.model.loss = LossKind::kSoftmax;
        else throw ParseError(name, no, "loss must be aam or softmax");
      } else if (key == "scale") {
        cfg.model.scale = std::stod(val);
      } else if (key == "margin") {
        cfg.model.margin = std::stod(val);
      } else if (key == "optimizer") {
        cfg.optimizer = val;
      } else if (key == "lr") {
        cfg.lr = std::stod(val);
      } else if (key == "momentum") {
        cfg.momentum = std::stod(val);
      } else if (key == "lr_decay") {
        cfg.lr_decay = std::stod(val);
      } else if (key == "batch_size") {
        cfg.batch_size = std::stoul(val);
      } else if (key == "steps") {
        cfg.steps = std::stoul(val);
      } else if (key == "segment_s") {
        cfg.segment_s = std::stod(val);
      } else if (key == "hop_s") {
        cfg.hop_s = std::stod(val);
      } else if (key == "seed") {
        cfg.model.seed = std::stoull(val);
      } else {
        throw ParseError(name, no, "unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw ParseError(name, no, "bad value for '" + key + "': " + val);
    }
  }
  if (!channels.empty()) cfg.model.branch.channels = channels;
  if (!blocks.empty()) cfg.model.branch.blocks = blocks;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(name + ": " + e.what());
  }
  return cfg;
}

inline TrainConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return parse_config(is, path);
}

// ---------------------------------------------------------------------------
// Paths

// Manifest and trial entries are relative to the manifest's directory unless
// absolute.
inline fs::path resolve_entry(const fs::path& manifest_path, const std::string& entry) {
  const fs::path p(entry);
  return p.is_absolute() ? p : manifest_path.parent_path() / p;
}

inline fs::path feature_path(const fs::path& features_dir, const std::string& entry, FeatureKind kind) {
  fs::path rel(entry);
  if (rel.is_absolute()) rel = rel.relative_path();
  rel.replace_extension(std::string(".") + feature_name(kind) + ".mpf");
  return features_dir / rel;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOutput {
  fs::path manifest_path;
  fs::path trials_path;
  Manifest manifest;
  TrialList trials;
};

// Writes <out>/spkNN/uttMM.wav, <out>/manifest.txt and <out>/trials.txt. The
// trials enroll each speaker's first utterance against up to four of its own
// utterances and one utterance of every other speaker.
inline SynthOutput cmd_synth_dataset(std::size_t n_speakers, std::size_t utts_per_speaker, double duration_s,
                                     std::uint64_t seed, const fs::path& out_dir) {
  if (n_speakers < 2) throw std::invalid_argument("synth: need at least 2 speakers");
  if (utts_per_speaker < 2) throw std::invalid_argument("synth: need at least 2 utterances per speaker");
  fs::create_directories(out_dir);
  SynthOutput out;
  auto name = [](const char* prefix, std::size_t i) {
    std::ostringstream os;
    os << prefix << std::setw(2) << std::setfill('0') << i;
    return os.str();
  };
  for (std::size_t s = 0; s < n_speakers; ++s) {
    const auto spk = make_speaker(seed, s, n_speakers);
    const std::string id = name("spk", s);
    fs::create_directories(out_dir / id);
    for (std::size_t u = 0; u < utts_per_speaker; ++u) {
      const std::string rel = id + "/" + name("utt", u) + ".wav";
      write_wav((out_dir / rel).string(), synth_utterance(spk, u, duration_s));
      out.manifest.entries.push_back({id, rel});
    }
  }
  const std::size_t per = utts_per_speaker;
  auto entry = [&](std::size_t s, std::size_t u) { return out.manifest.entries[s * per + u].path; };
  for (std::size_t s = 0; s < n_speakers; ++s) {
    for (std::size_t u = 1; u < std::min<std::size_t>(per, 5); ++u) out.trials.trials.push_back({true, entry(s, 0), entry(s, u)});
    for (std::size_t t = 0; t < n_speakers; ++t) {
      if (t != s) out.trials.trials.push_back({false, entry(s, 0), entry(t, 1 + (s % (per - 1)))});
    }
  }
  out.manifest_path = out_dir / "manifest.txt";
  out.trials_path = out_dir / "trials.txt";
  std::ofstream mf(out.manifest_path);
  for (const auto& e : out.manifest.entries) mf << e.speaker_id << ' ' << e.path << '\n';
  std::ofstream tf(out.trials_path);
  for (const auto& t : out.trials.trials) tf << (t.is_target ? 1 : 0) << ' ' << t.enroll << ' ' << t.test << '\n';
  if (!mf || !tf) throw std::runtime_error("synth: write failed under " + out_dir.string());
  return out;
}

// ---------------------------------------------------------------------------
// extract

inline FeatureMatrix compute_features(FeatureKind kind, const Waveform& w, const ModgdParams& modgd = {}) {
  return kind == FeatureKind::kFbank192 ? compute_fbank(w.samples) : compute_modgd(w.samples, modgd);
}

// Writes one MPF1 file per manifest entry (see feature_path); returns the
// number written.
inline std::size_t cmd_extract(FeatureKind kind, const fs::path& manifest_path, const fs::path& out_dir,
                               const ModgdParams& modgd = {}) {
  modgd.validate();
  const Manifest m = parse_manifest(manifest_path.string());
  for (const auto& e : m.entries) {
    const auto feats = compute_features(kind, read_wav(resolve_entry(manifest_path, e.path).string()), modgd);
    const fs::path dst = feature_path(out_dir, e.path, kind);
    fs::create_directories(dst.parent_path());
    write_features(dst.string(), feats);
  }
  return m.entries.size();
}

// Features for one entry: read from `features_dir` when given, else computed
// from the audio.
inline FeatureMatrix load_features(FeatureKind kind, const fs::path& manifest_path, const std::string& entry,
                                   const fs::path& features_dir, const ModgdParams& modgd = {}) {
  if (!features_dir.empty()) return read_features(feature_path(features_dir, entry, kind).string());
  return compute_features(kind, read_wav(resolve_entry(manifest_path, entry).string()), modgd);
}

// Rows [start, start + len) of m, wrapping around cyclically.
inline FeatureMatrix crop_frames(const FeatureMatrix& m, std::size_t start, std::size_t len) {
  if (m.rows == 0) throw std::invalid_argument("crop_frames: empty feature matrix");
  FeatureMatrix out(len, m.cols);
  out.kind = m.kind;
  out.frame_spec = m.frame_spec;
  for (std::size_t r = 0; r < len; ++r) {
    const auto src = m.row((start + r) % m.rows);
    std::copy(src.begin(), src.end(), out.values.begin() + static_cast<long>(r * m.cols));
  }
  return out;
}

// ---------------------------------------------------------------------------
// train

struct UtteranceFeatures {
  std::string path;
  std::size_t label = 0;
  FeatureMatrix fbank, modgd;  // empty when the model does not use them
};

struct TrainingSet {
  std::vector<std::string> speakers;  // label -> speaker id
  std::vector<UtteranceFeatures> utts;
};

inline TrainingSet load_training_set(const fs::path& manifest_path, const fs::path& features_dir, FusionMode mode,
                                     const ModgdParams& modgd = {}) {
  const Manifest m = parse_manifest(manifest_path.string());
  if (m.entries.empty()) throw std::invalid_argument(manifest_path.string() + ": empty manifest");
  TrainingSet ts;
  for (const auto& e : m.entries) ts.speakers.push_back(e.speaker_id);
  std::sort(ts.speakers.begin(), ts.speakers.end());
  ts.speakers.erase(std::unique(ts.speakers.begin(), ts.speakers.end()), ts.speakers.end());
  for (const auto& e : m.entries) {
    UtteranceFeatures u;
    u.path = e.path;
    u.label = static_cast<std::size_t>(std::lower_bound(ts.speakers.begin(), ts.speakers.end(), e.speaker_id) -
                                       ts.speakers.begin());
    if (uses_fbank(mode)) u.fbank = load_features(FeatureKind::kFbank192, manifest_path, e.path, features_dir, modgd);
    if (uses_modgd(mode)) u.modgd = load_features(FeatureKind::kModgd201, manifest_path, e.path, features_dir, modgd);
    ts.utts.push_back(std::move(u));
  }
  return ts;
}

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double batch_top1 = 0.0;  // training-mode argmax hits over the epoch, percent
};

struct TrainResult {
  std::vector<double> losses;            // one per step, before the update
  std::vector<double> attention_errors;  // one per step
  std::vector<EpochSummary> epochs;
  double train_top1 = 0.0;  // eval mode, full utterances
  std::vector<std::string> speakers;
};

// Frame count and frame hop of a training crop.
inline std::pair<std::size_t, std::size_t> crop_geometry(const TrainConfig& cfg) {
  const FrameSpec spec;
  const auto seg = static_cast<std::size_t>(std::llround(cfg.segment_s * kSampleRate));
  const auto hop = static_cast<std::size_t>(std::llround(cfg.hop_s * kSampleRate));
  return {num_frames(seg, spec), std::max<std::size_t>(1, hop / spec.hop)};
}

// Eval-mode Top-1 over full utterances, margin-free logits.
inline double training_top1(SpeakerModel& model, const TrainingSet& ts) {
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> truth;
  for (const auto& u : ts.utts) {
    const auto e = extract_embedding(model, u.fbank.rows ? &u.fbank : nullptr, u.modgd.rows ? &u.modgd : nullptr);
    const Tensor logits = model.classifier().logits(Tensor({1, e.size()}, e));
    rows.emplace_back(logits.data().begin(), logits.data().end());
    truth.push_back(u.label);
  }
  return top1_accuracy(rows, truth);
}

// Speaker-balanced epoch order: each round takes one not yet used utterance
// from every speaker that has one left, in a shuffled speaker order, so small
// batches mix speakers evenly.
inline void balanced_order(const TrainingSet& ts, Rng& rng, std::vector<std::size_t>& order) {
  auto shuffle = [&rng](std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  };
  std::vector<std::vector<std::size_t>> by_speaker(ts.speakers.size());
  for (std::size_t i = 0; i < ts.utts.size(); ++i) by_speaker[ts.utts[i].label].push_back(i);
  for (auto& v : by_speaker) shuffle(v);
  std::vector<std::size_t> spk(by_speaker.size());
  order.clear();
  for (std::size_t round = 0; order.size() < ts.utts.size(); ++round) {
    std::iota(spk.begin(), spk.end(), std::size_t{0});
    shuffle(spk);
    for (std::size_t k : spk)
      if (round < by_speaker[k].size()) order.push_back(by_speaker[k][round]);
  }
}

// Every epoch visits each utterance once in a speaker-balanced order, using
// one fixed-length crop whose offset cycles through the utterance's sliding
// windows. Writes "step" and "epoch" lines to `log` when given.
inline TrainResult train_model(SpeakerModel& model, const TrainingSet& ts, const TrainConfig& cfg,
                               std::ostream* log = nullptr) {
  cfg.validate();
  if (model.classifier().num_classes() != ts.speakers.size()) {
    throw std::invalid_argument("train: model has " + std::to_string(model.classifier().num_classes()) +
                                " classes, data has " + std::to_string(ts.speakers.size()) + " speakers");
  }
  const auto [crop_len, crop_hop] = crop_geometry(cfg);
  std::unique_ptr<Optimizer> opt;
  if (cfg.optimizer == "adam") opt = std::make_unique<Adam>(model.parameters(), cfg.lr);
  else opt = std::make_unique<Sgd>(model.parameters(), cfg.lr, cfg.momentum);

  const FusionMode mode = cfg.model.fusion;
  Rng rng(cfg.model.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(ts.utts.size());
  TrainResult res;
  res.speakers = ts.speakers;
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < cfg.steps; ++epoch) {
    opt->set_lr(cfg.lr * std::pow(1.0 - cfg.lr_decay, static_cast<double>(epoch)));
    balanced_order(ts, rng, order);
    EpochSummary summary;
    summary.epoch = epoch;
    std::size_t seen = 0, hits = 0, nsteps = 0;
    for (std::size_t b0 = 0; b0 < order.size() && step < cfg.steps; b0 += cfg.batch_size, ++step) {
      std::vector<FeatureMatrix> crops_f, crops_g;
      Batch batch;
      for (std::size_t k = b0; k < std::min(order.size(), b0 + cfg.batch_size); ++k) {
        const auto& u = ts.utts[order[k]];
        const std::size_t total = uses_fbank(mode) ? u.fbank.rows : u.modgd.rows;
        const std::size_t windows = total >= crop_len ? (total - crop_len) / crop_hop + 1 : 1;
        const std::size_t start = (epoch % windows) * crop_hop;
        if (uses_fbank(mode)) crops_f.push_back(crop_frames(u.fbank, start, crop_len));
        if (uses_modgd(mode)) crops_g.push_back(crop_frames(u.modgd, start, crop_len));
        batch.labels.push_back(u.label);
      }
      auto stack = [](const std::vector<FeatureMatrix>& v) {
        std::vector<const FeatureMatrix*> ptrs;
        for (const auto& m : v) ptrs.push_back(&m);
        return stack_inputs(ptrs);
      };
      if (!crops_f.empty()) batch.fbank = stack(crops_f);
      if (!crops_g.empty()) batch.modgd = stack(crops_g);
      const StepStats st = train_step(model, batch, *opt);
      res.losses.push_back(st.loss);
      res.attention_errors.push_back(st.attention_error);
      summary.mean_loss += st.loss;
      hits += st.correct;
      seen += batch.labels.size();
      ++nsteps;
      if (log) {
        *log << "step " << step << " loss " << std::setprecision(6) << st.loss << " attn_err " << st.attention_error
             << '\n';
      }
    }
    summary.mean_loss /= static_cast<double>(std::max<std::size_t>(nsteps, 1));
    summary.batch_top1 = seen ? 100.0 * static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
    res.epochs.push_back(summary);
    if (log) {
      *log << "epoch " << epoch << " mean_loss " << summary.mean_loss << " batch_top1 " << summary.batch_top1
           << '\n';
    }
  }
  res.train_top1 = training_top1(model, ts);
  if (log) *log << "train_top1 " << res.train_top1 << '\n';
  return res;
}

inline TrainResult cmd_train_toy(const TrainConfig& cfg, const fs::path& manifest_path, const fs::path& features_dir,
                                 const fs::path& checkpoint, std::ostream* log = nullptr) {
  const TrainingSet ts = load_training_set(manifest_path, features_dir, cfg.model.fusion);
  ModelConfig mc = cfg.model;
  mc.num_classes = ts.speakers.size();
  SpeakerModel model(mc);
  TrainResult res = train_model(model, ts, cfg, log);
  if (!checkpoint.empty()) save_checkpoint(checkpoint.string(), model.state());
  return res;
}

// ---------------------------------------------------------------------------
// embed

struct EmbeddingTable {
  std::vector<std::string> paths;
  std::vector<Embedding> vectors;

  const Embedding& at(const std::string& path) const {
    const auto it = std::find(paths.begin(), paths.end(), path);
    if (it == paths.end()) throw std::out_of_range("no embedding for " + path);
    return vectors[static_cast<std::size_t>(it - paths.begin())];
  }
};

// One line per utterance: `<path> v_1 ... v_D`.
inline void write_embeddings(const std::string& path, const EmbeddingTable& t) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << std::setprecision(17);
  for (std::size_t i = 0; i < t.paths.size(); ++i) {
    os << t.paths[i];
    for (double v : t.vectors[i]) os << ' ' << v;
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline EmbeddingTable read_embeddings(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  EmbeddingTable t;
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name)) continue;
    Embedding e;
    for (double v; ls >> v;) e.push_back(v);
    if (!ls.eof()) throw ParseError(path, no, "expected '<path> <reals...>'");
    if (e.empty() || (!t.vectors.empty() && e.size() != t.vectors.front().size())) {
      throw ParseError(path, no, "embedding dimension mismatch");
    }
    t.paths.push_back(name);
    t.vectors.push_back(std::move(e));
  }
  return t;
}

// `branch` selects a single-branch ablation of a fused model.
inline EmbeddingTable cmd_embed(const TrainConfig& cfg, const fs::path& checkpoint, const fs::path& manifest_path,
                                const fs::path& features_dir, std::optional<FusionMode> branch = std::nullopt) {
  const Manifest m = parse_manifest(manifest_path.string());
  const auto saved = load_checkpoint(checkpoint.string());
  ModelConfig mc = cfg.model;
  for (const auto& nt : saved)
    if (nt.name == "classifier.weight") mc.num_classes = nt.tensor.dim(1);
  SpeakerModel model(mc);
  model.load_state(saved);
  const FusionMode mode = branch.value_or(mc.fusion);
  EmbeddingTable t;
  for (const auto& e : m.entries) {
    FeatureMatrix f, g;
    if (uses_fbank(mode)) f = load_features(FeatureKind::kFbank192, manifest_path, e.path, features_dir);
    if (uses_modgd(mode)) g = load_features(FeatureKind::kModgd201, manifest_path, e.path, features_dir);
    t.paths.push_back(e.path);
    t.vectors.push_back(extract_embedding(model, uses_fbank(mode) ? &f : nullptr, uses_modgd(mode) ? &g : nullptr,
                                          branch));
  }
  return t;
}

// ---------------------------------------------------------------------------
// score

// Cosine score per trial.
inline std::vector<double> score_trials(const EmbeddingTable& emb, const TrialList& trials) {
  std::vector<double> s;
  s.reserve(trials.trials.size());
  for (const auto& t : trials.trials) s.push_back(cosine(emb.at(t.enroll), emb.at(t.test)));
  return s;
}

struct ScoreMatrix {
  std::vector<std::string> enrolled;  // column ids
  std::vector<std::string> truth;     // row ids
  std::vector<std::vector<double>> rows;
};

// Identification: enrolled rows are per-speaker mean embeddings of the enroll
// manifest; every test utterance is scored against all of them.
inline ScoreMatrix score_identify(const EmbeddingTable& emb, const Manifest& enroll, const Manifest& test) {
  std::map<std::string, std::pair<Embedding, std::size_t>> acc;
  for (const auto& e : enroll.entries) {
    const auto& v = emb.at(e.path);
    auto& [sum, n] = acc[e.speaker_id];
    if (sum.empty()) sum.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) sum[i] += v[i];
    ++n;
  }
  EnrollDB db;
  for (auto& [id, sn] : acc) {
    for (double& x : sn.first) x /= static_cast<double>(sn.second);
    db.add(id, sn.first);
  }
  ScoreMatrix sm;
  sm.enrolled = db.ids;
  for (const auto& e : test.entries) {
    const Embedding one[] = {emb.at(e.path)};
    sm.rows.push_back(score_identification(one, db));
    sm.truth.push_back(e.speaker_id);
  }
  return sm;
}

// First line `ids <id_1> ... <id_N>`, then `<true_id> s_1 ... s_N` per test.
inline void write_score_matrix(const std::string& path, const ScoreMatrix& sm) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << std::setprecision(17) << "ids";
  for (const auto& id : sm.enrolled) os << ' ' << id;
  os << '\n';
  for (std::size_t r = 0; r < sm.rows.size(); ++r) {
    os << sm.truth[r];
    for (double v : sm.rows[r]) os << ' ' << v;
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline ScoreMatrix read_score_matrix(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  ScoreMatrix sm;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;
    if (sm.enrolled.empty()) {
      if (head != "ids") throw ParseError(path, no, "expected 'ids <id...>' header");
      for (std::string id; ls >> id;) sm.enrolled.push_back(id);
      if (sm.enrolled.empty()) throw ParseError(path, no, "no enrolled ids");
      continue;
    }
    std::vector<double> row;
    for (double v; ls >> v;) row.push_back(v);
    if (!ls.eof() || row.size() != sm.enrolled.size()) {
      throw ParseError(path, no, "expected " + std::to_string(sm.enrolled.size()) + " scores");
    }
    sm.truth.push_back(head);
    sm.rows.push_back(std::move(row));
  }
  if (sm.enrolled.empty()) throw ParseError(path, no, "empty score matrix");
  return sm;
}

// ---------------------------------------------------------------------------
// evaluate

struct Report {
  std::optional<double> eer, min_dcf, top1;
};

inline Report evaluate_trials(std::span<const double> scores, const TrialList& trials, DcfParams p = {}) {
  Report r;
  r.eer = eer(scores, trials);
  r.min_dcf = min_dcf(scores, trials, p);
  return r;
}

inline Report evaluate_matrix(const ScoreMatrix& sm) {
  std::vector<std::size_t> truth;
  for (const auto& id : sm.truth) {
    const auto it = std::find(sm.enrolled.begin(), sm.enrolled.end(), id);
    if (it == sm.enrolled.end()) throw std::invalid_argument("evaluate: test speaker " + id + " is not enrolled");
    truth.push_back(static_cast<std::size_t>(it - sm.enrolled.begin()));
  }
  Report r;
  r.top1 = top1_accuracy(sm.rows, truth);
  return r;
}

inline void write_report(std::ostream& os, const Report& r) {
  os << std::setprecision(6);
  if (r.eer) os << "eer " << *r.eer << '\n';
  if (r.min_dcf) os << "min_dcf " << *r.min_dcf << '\n';
  if (r.top1) os << "top1 " << *r.top1 << '\n';
}

}  // namespace magphase
