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

// magphase: synth | extract | train | embed | score | evaluate

#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "magphase/magphase.hpp"

namespace mp = magphase;

namespace {

std::optional<mp::FusionMode> parse_branch(const std::string& b) {
  if (b == "fused") return std::nullopt;
  if (b == "fbank") return mp::FusionMode::kFbankOnly;
  if (b == "modgd") return mp::FusionMode::kModgdOnly;
  throw std::invalid_argument("--branch must be fused, fbank or modgd");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Magnitude and phase speaker embeddings with co-attention fusion"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic speaker dataset");
  std::size_t n_speakers = 8, n_utts = 10;
  double duration = 4.0;
  std::uint64_t seed = 7;
  std::string out;
  synth->add_option("--speakers", n_speakers, "Number of speakers")->capture_default_str();
  synth->add_option("--utts", n_utts, "Utterances per speaker")->capture_default_str();
  synth->add_option("--duration", duration, "Utterance length in seconds")->capture_default_str();
  synth->add_option("--seed", seed, "Random seed")->capture_default_str();
  synth->add_option("--out", out, "Output directory")->required();

  // extract
  auto* extract = app.add_subcommand("extract", "Compute FBank or MODGD features for a manifest");
  std::string kind = "fbank", manifest;
  mp::ModgdParams modgd;
  extract->add_option("--kind", kind, "fbank or modgd")->check(CLI::IsMember({"fbank", "modgd"}))->capture_default_str();
  extract->add_option("--manifest", manifest, "Manifest of WAV files")->required();
  extract->add_option("--out", out, "Output directory")->required();
  extract->add_option("--alpha", modgd.alpha, "MODGD compression exponent")->capture_default_str();
  extract->add_option("--gamma", modgd.gamma, "MODGD envelope exponent")->capture_default_str();
  extract->add_option("--lifter-len", modgd.lifter_len, "Cepstral lifter length")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a model on a manifest");
  std::string config, features, log_path;
  std::optional<std::uint64_t> train_seed;
  train->add_option("--config", config, "Key-value config file")->required();
  train->add_option("--manifest", manifest, "Training manifest")->required();
  train->add_option("--features", features, "Directory written by extract (default: compute from audio)");
  train->add_option("--out", out, "Output checkpoint")->required();
  train->add_option("--log", log_path, "Training log file (default: stdout)");
  train->add_option("--seed", train_seed, "Override the config seed");

  // embed
  auto* embed = app.add_subcommand("embed", "Extract one embedding per manifest entry");
  std::string checkpoint, branch = "fused";
  embed->add_option("--config", config, "Config used for training")->required();
  embed->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  embed->add_option("--manifest", manifest, "Manifest to embed")->required();
  embed->add_option("--features", features, "Directory written by extract (default: compute from audio)");
  embed->add_option("--branch", branch, "fused, or a single branch of a fused model")->capture_default_str();
  embed->add_option("--out", out, "Output embeddings file")->required();

  // score
  auto* score = app.add_subcommand("score", "Score trials or build an identification score matrix");
  std::string mode = "single", embeddings, trials, modgd_scores, fbank_scores, enroll;
  double ratio = 0.5;
  score->add_option("--mode", mode, "single, feature-fuse, decision-fuse or identify")
      ->check(CLI::IsMember({"single", "feature-fuse", "decision-fuse", "identify"}))
      ->capture_default_str();
  score->add_option("--embeddings", embeddings, "Embeddings file (single, feature-fuse, identify)");
  score->add_option("--trials", trials, "Trial list (single, feature-fuse)");
  score->add_option("--modgd-scores", modgd_scores, "MODGD system scores (decision-fuse)");
  score->add_option("--fbank-scores", fbank_scores, "FBank system scores (decision-fuse)");
  score->add_option("--ratio", ratio, "Weight of the MODGD scores (decision-fuse)")->capture_default_str();
  score->add_option("--enroll", enroll, "Enrollment manifest (identify)");
  score->add_option("--manifest", manifest, "Test manifest (identify)");
  score->add_option("--out", out, "Output scores file")->required();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Report EER and minDCF, or Top-1 for a score matrix");
  std::string scores_path, matrix;
  evaluate->add_option("--scores", scores_path, "Scores aligned with --trials");
  evaluate->add_option("--trials", trials, "Trial list");
  evaluate->add_option("--matrix", matrix, "Score matrix written by score --mode identify");
  evaluate->add_option("--out", out, "Report file (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const auto r = mp::cmd_synth_dataset(n_speakers, n_utts, duration, seed, out);
      std::cout << "wrote " << r.manifest.entries.size() << " utterances, " << r.trials.trials.size()
                << " trials to " << out << '\n';
    } else if (extract->parsed()) {
      const auto k = kind == "fbank" ? mp::FeatureKind::kFbank192 : mp::FeatureKind::kModgd201;
      const auto n = mp::cmd_extract(k, manifest, out, modgd);
      std::cout << "wrote " << n << ' ' << kind << " feature files to " << out << '\n';
    } else if (train->parsed()) {
      auto cfg = mp::parse_config_file(config);
      if (train_seed) cfg.model.seed = *train_seed;
      std::ofstream log_file;
      if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) throw std::runtime_error("cannot open " + log_path);
      }
      std::ostream& log = log_path.empty() ? std::cout : log_file;
      mp::cmd_train_toy(cfg, manifest, features, out, &log);
    } else if (embed->parsed()) {
      const auto cfg = mp::parse_config_file(config);
      mp::write_embeddings(out, mp::cmd_embed(cfg, checkpoint, manifest, features, parse_branch(branch)));
    } else if (score->parsed()) {
      auto need = [&](const std::string& v, const char* flag) {
        if (v.empty()) throw std::invalid_argument(std::string("--mode ") + mode + " needs " + flag);
      };
      if (mode == "decision-fuse") {
        need(modgd_scores, "--modgd-scores");
        need(fbank_scores, "--fbank-scores");
        mp::write_scores(out, mp::decision_fuse(mp::read_scores(modgd_scores), mp::read_scores(fbank_scores), ratio));
      } else if (mode == "identify") {
        need(embeddings, "--embeddings");
        need(enroll, "--enroll");
        need(manifest, "--manifest");
        mp::write_score_matrix(out, mp::score_identify(mp::read_embeddings(embeddings), mp::parse_manifest(enroll),
                                                       mp::parse_manifest(manifest)));
      } else {
        need(embeddings, "--embeddings");
        need(trials, "--trials");
        mp::write_scores(out, mp::score_trials(mp::read_embeddings(embeddings), mp::parse_trials(trials)));
      }
    } else if (evaluate->parsed()) {
      mp::Report report;
      if (!matrix.empty()) {
        report = mp::evaluate_matrix(mp::read_score_matrix(matrix));
      } else {
        if (scores_path.empty() || trials.empty()) throw std::invalid_argument("evaluate needs --matrix, or --scores and --trials");
        const auto s = mp::read_scores(scores_path);
        const auto t = mp::parse_trials(trials);
        if (s.size() != t.trials.size()) {
          throw std::invalid_argument(scores_path + " has " + std::to_string(s.size()) + " scores for " +
                                      std::to_string(t.trials.size()) + " trials");
        }
        report = mp::evaluate_trials(s, t);
      }
      if (out.empty()) {
        mp::write_report(std::cout, report);
      } else {
        std::ofstream os(out);
        if (!os) throw std::runtime_error("cannot open " + out);
        mp::write_report(os, report);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "magphase: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
