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

// 16 kHz mono 16-bit PCM WAV ingestion, sliding-window segmentation, and the
// plain-text manifest and trial-list formats.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace magphase {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

struct Segment {
  std::vector<double> samples;
  std::size_t source_offset = 0;
};

enum class WavErrorCode {
  kIo,
  kNotRiff,
  kMissingChunk,
  kUnsupportedEncoding,
  kChannelCount,
  kSampleRate,
  kTruncated,
};

class WavError : public std::runtime_error {
 public:
  WavError(WavErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  WavErrorCode code() const { return code_; }

 private:
  WavErrorCode code_;
};

namespace detail {

inline std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void append_le(std::string& s, std::uint32_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

// Parses a RIFF/WAVE byte buffer. Only PCM (format tag 1), 16-bit, mono,
// 16000 Hz is accepted; samples are scaled by 1/32768.
inline Waveform parse_wav(const std::vector<unsigned char>& bytes, const std::string& name = "<buffer>") {
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "RIFF" ||
      std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE") {
    throw WavError(WavErrorCode::kNotRiff, name + ": not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + 4));
    const std::uint32_t size = detail::le32(&bytes[pos + 4]);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (size < 16 || body + 16 > bytes.size()) {
        throw WavError(WavErrorCode::kTruncated, name + ": truncated fmt chunk");
      }
      format = detail::le16(&bytes[body]);
      channels = detail::le16(&bytes[body + 2]);
      rate = detail::le32(&bytes[body + 4]);
      bits = detail::le16(&bytes[body + 14]);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw WavError(WavErrorCode::kMissingChunk, name + ": data chunk before fmt chunk");
      if (format != 1 || bits != 16) {
        throw WavError(WavErrorCode::kUnsupportedEncoding,
                       name + ": unsupported encoding (format tag " + std::to_string(format) + ", " +
                           std::to_string(bits) + " bits); need 16-bit PCM");
      }
      if (channels != 1) {
        throw WavError(WavErrorCode::kChannelCount,
                       name + ": expected mono, got " + std::to_string(channels) + " channels");
      }
      if (rate != static_cast<std::uint32_t>(kSampleRate)) {
        throw WavError(WavErrorCode::kSampleRate,
                       name + ": expected 16000 Hz, got " + std::to_string(rate));
      }
      if (size % 2 != 0 || body + size > bytes.size()) {
        throw WavError(WavErrorCode::kTruncated, name + ": truncated data chunk");
      }
      Waveform w;
      w.sample_rate = kSampleRate;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(detail::le16(&bytes[body + 2 * i]));
        w.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return w;
    }
    pos = body + size + (size & 1u);
  }
  throw WavError(WavErrorCode::kMissingChunk,
                 name + (have_fmt ? ": no data chunk" : ": no fmt chunk"));
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw WavError(WavErrorCode::kIo, "cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_wav(bytes, path);
}

inline std::int16_t quantize_sample(double x) {
  const double q = std::round(x * 32768.0);
  return static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
}

inline std::string encode_wav(const Waveform& w) {
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  std::string s;
  s.reserve(44 + data_bytes);
  s += "RIFF";
  detail::append_le(s, 36 + data_bytes, 4);
  s += "WAVEfmt ";
  detail::append_le(s, 16, 4);
  detail::append_le(s, 1, 2);  // PCM
  detail::append_le(s, 1, 2);  // mono
  detail::append_le(s, static_cast<std::uint32_t>(w.sample_rate), 4);
  detail::append_le(s, static_cast<std::uint32_t>(w.sample_rate) * 2, 4);
  detail::append_le(s, 2, 2);
  detail::append_le(s, 16, 2);
  s += "data";
  detail::append_le(s, data_bytes, 4);
  for (double x : w.samples) {
    detail::append_le(s, static_cast<std::uint16_t>(quantize_sample(x)), 2);
  }
  return s;
}

inline void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw WavError(WavErrorCode::kIo, "cannot open " + path + " for writing");
  const auto bytes = encode_wav(w);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw WavError(WavErrorCode::kIo, "write failed: " + path);
}

// Windows of round(win_s*rate) samples every round(hop_s*rate) samples.
// Inputs shorter than one window yield a single cyclically padded segment.
inline std::vector<Segment> segment_sliding(const Waveform& w, double win_s = 3.0, double hop_s = 1.0) {
  if (w.samples.empty()) throw std::invalid_argument("segment_sliding: empty waveform");
  const auto win = static_cast<std::size_t>(std::llround(win_s * w.sample_rate));
  const auto hop = static_cast<std::size_t>(std::llround(hop_s * w.sample_rate));
  if (win == 0 || hop == 0) throw std::invalid_argument("segment_sliding: window and hop must be positive");
  const std::size_t n = w.samples.size();
  std::vector<Segment> out;
  if (n < win) {
    Segment s;
    s.samples.resize(win);
    for (std::size_t i = 0; i < win; ++i) s.samples[i] = w.samples[i % n];
    out.push_back(std::move(s));
    return out;
  }
  for (std::size_t off = 0; off + win <= n; off += hop) {
    Segment s;
    s.source_offset = off;
    s.samples.assign(w.samples.begin() + static_cast<long>(off),
                     w.samples.begin() + static_cast<long>(off + win));
    out.push_back(std::move(s));
  }
  return out;
}

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct ManifestEntry {
  std::string speaker_id;
  std::string path;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
};

struct Trial {
  bool is_target = false;
  std::string enroll;
  std::string test;
};

struct TrialList {
  std::vector<Trial> trials;
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> toks;
  for (std::string t; is >> t;) toks.push_back(std::move(t));
  return toks;
}

}  // namespace detail

// `<speaker_id> <path>` per line; blank lines are skipped.
inline Manifest parse_manifest(std::istream& is, const std::string& name = "<manifest>") {
  Manifest m;
  std::set<std::string> seen;
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    const auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 2) throw ParseError(name, no, "expected '<speaker_id> <path>'");
    if (!seen.insert(toks[1]).second) throw ParseError(name, no, "duplicate path " + toks[1]);
    m.entries.push_back({toks[0], toks[1]});
  }
  return m;
}

inline Manifest parse_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return parse_manifest(is, path);
}

// `<0|1> <enroll> <test>` per line, 1 marking a target trial.
inline TrialList parse_trials(std::istream& is, const std::string& name = "<trials>") {
  TrialList t;
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    const auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 3 || (toks[0] != "0" && toks[0] != "1")) {
      throw ParseError(name, no, "expected '<0|1> <enroll> <test>'");
    }
    t.trials.push_back({toks[0] == "1", toks[1], toks[2]});
  }
  return t;
}

inline TrialList parse_trials(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return parse_trials(is, path);
}

}  // namespace magphase
