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
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "magphase/audio_io.hpp"
#include "magphase/rng.hpp"

namespace mp = magphase;

namespace {

// Hand-built WAV header so unsupported layouts can be produced.
std::vector<unsigned char> wav_bytes(std::uint16_t format, std::uint16_t channels, std::uint32_t rate,
                                     std::uint16_t bits, const std::vector<std::int16_t>& data) {
  std::string s = "RIFF";
  const auto data_bytes = static_cast<std::uint32_t>(data.size() * 2);
  mp::detail::append_le(s, 36 + data_bytes, 4);
  s += "WAVEfmt ";
  mp::detail::append_le(s, 16, 4);
  mp::detail::append_le(s, format, 2);
  mp::detail::append_le(s, channels, 2);
  mp::detail::append_le(s, rate, 4);
  mp::detail::append_le(s, rate * channels * bits / 8, 4);
  mp::detail::append_le(s, static_cast<std::uint32_t>(channels * bits / 8), 2);
  mp::detail::append_le(s, bits, 2);
  s += "data";
  mp::detail::append_le(s, data_bytes, 4);
  for (auto v : data) mp::detail::append_le(s, static_cast<std::uint16_t>(v), 2);
  return {s.begin(), s.end()};
}

mp::WavErrorCode error_code(const std::vector<unsigned char>& bytes) {
  try {
    mp::parse_wav(bytes);
  } catch (const mp::WavError& e) {
    return e.code();
  }
  ADD_FAILURE() << "parse_wav did not throw";
  return mp::WavErrorCode::kIo;
}

mp::Waveform ramp_waveform(double seconds) {
  mp::Waveform w;
  w.samples.resize(static_cast<std::size_t>(std::llround(seconds * mp::kSampleRate)));
  for (std::size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = static_cast<double>(i % 1000) / 1000.0;
  return w;
}

}  // namespace

TEST(ReadWav, OneSecondMonoFileHas16000Samples) {
  const auto w = mp::parse_wav(wav_bytes(1, 1, 16000, 16, std::vector<std::int16_t>(16000, 5)));
  EXPECT_EQ(w.samples.size(), 16000u);
  EXPECT_EQ(w.sample_rate, 16000);
  EXPECT_DOUBLE_EQ(w.duration_s(), 1.0);
}

TEST(ReadWav, MaxPositiveSampleScalesBy32768) {
  const auto w = mp::parse_wav(wav_bytes(1, 1, 16000, 16, {32767, -32768, 0}));
  EXPECT_EQ(w.samples[0], 0.999969482421875);
  EXPECT_EQ(w.samples[1], -1.0);
  EXPECT_EQ(w.samples[2], 0.0);
}

TEST(ReadWav, RejectedLayoutsHaveDistinctCodes) {
  EXPECT_EQ(error_code(wav_bytes(1, 2, 16000, 16, {1, 2})), mp::WavErrorCode::kChannelCount);
  EXPECT_EQ(error_code(wav_bytes(1, 1, 8000, 16, {1, 2})), mp::WavErrorCode::kSampleRate);
  EXPECT_EQ(error_code(wav_bytes(3, 1, 16000, 32, {1, 2})), mp::WavErrorCode::kUnsupportedEncoding);
  EXPECT_EQ(error_code(wav_bytes(1, 1, 16000, 8, {1, 2})), mp::WavErrorCode::kUnsupportedEncoding);
  auto cut = wav_bytes(1, 1, 16000, 16, {1, 2, 3, 4});
  cut.resize(cut.size() - 3);
  EXPECT_EQ(error_code(cut), mp::WavErrorCode::kTruncated);
  EXPECT_EQ(error_code({'R', 'I', 'F', 'X'}), mp::WavErrorCode::kNotRiff);
}

TEST(ReadWav, MissingFileIsAnIoError) {
  try {
    mp::read_wav("/nonexistent/dir/none.wav");
    FAIL();
  } catch (const mp::WavError& e) {
    EXPECT_EQ(e.code(), mp::WavErrorCode::kIo);
  }
}

TEST(ReadWav, WriteThenReadIsIdentityOnTheQuantizationGrid) {
  mp::Rng rng(3);
  mp::Waveform w;
  for (int i = 0; i < 4000; ++i) w.samples.push_back(static_cast<double>(static_cast<int>(rng.below(65536)) - 32768) / 32768.0);
  const auto path = std::filesystem::temp_directory_path() / "magphase_test_roundtrip.wav";
  mp::write_wav(path.string(), w);
  const auto r = mp::read_wav(path.string());
  std::filesystem::remove(path);
  ASSERT_EQ(r.samples.size(), w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_EQ(r.samples[i], w.samples[i]);
}

TEST(ReadWav, OffGridValuesRoundToNearestStep) {
  mp::Waveform w;
  w.samples = {0.3, -0.7, 1.5, -1.5};
  const auto bytes = mp::encode_wav(w);
  const auto r = mp::parse_wav({bytes.begin(), bytes.end()});
  EXPECT_LE(std::abs(r.samples[0] - 0.3), 0.5 / 32768.0);
  EXPECT_LE(std::abs(r.samples[1] + 0.7), 0.5 / 32768.0);
  EXPECT_EQ(r.samples[2], 32767.0 / 32768.0);
  EXPECT_EQ(r.samples[3], -1.0);
}

TEST(SegmentSliding, FiveSecondsGivesThreeSegments) {
  const auto w = ramp_waveform(5.0);
  const auto segs = mp::segment_sliding(w);
  ASSERT_EQ(segs.size(), 3u);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    EXPECT_EQ(segs[i].source_offset, i * 16000);
    ASSERT_EQ(segs[i].samples.size(), 48000u);
    EXPECT_EQ(segs[i].samples[123], w.samples[i * 16000 + 123]);
  }
}

TEST(SegmentSliding, ExactlyThreeSecondsGivesOneSegment) {
  const auto segs = mp::segment_sliding(ramp_waveform(3.0));
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].source_offset, 0u);
  EXPECT_EQ(segs[0].samples.size(), 48000u);
}

TEST(SegmentSliding, ShortInputIsRepeatedCyclically) {
  mp::Waveform w = ramp_waveform(2.0);
  w.samples[0] = -0.25;
  const auto segs = mp::segment_sliding(w);
  ASSERT_EQ(segs.size(), 1u);
  ASSERT_EQ(segs[0].samples.size(), 48000u);
  for (std::size_t i = 0; i < 48000; ++i) ASSERT_EQ(segs[0].samples[i], w.samples[i % 32000]);
}

TEST(SegmentSliding, OffsetsStepByExactlyOneHop) {
  const auto segs = mp::segment_sliding(ramp_waveform(9.5), 3.0, 1.0);
  ASSERT_EQ(segs.size(), 7u);
  for (std::size_t i = 1; i < segs.size(); ++i) EXPECT_EQ(segs[i].source_offset - segs[i - 1].source_offset, 16000u);
  for (const auto& s : segs) EXPECT_EQ(s.samples.size(), 48000u);
}

TEST(SegmentSliding, EmptyInputThrows) {
  EXPECT_THROW(mp::segment_sliding(mp::Waveform{}), std::invalid_argument);
}

TEST(ParseManifest, ReadsEntriesInOrder) {
  std::istringstream is("spk1 a.wav\n\nspk2 b.wav\nspk1 c.wav\n");
  const auto m = mp::parse_manifest(is);
  ASSERT_EQ(m.entries.size(), 3u);
  EXPECT_EQ(m.entries[0].speaker_id, "spk1");
  EXPECT_EQ(m.entries[0].path, "a.wav");
  EXPECT_EQ(m.entries[2].path, "c.wav");
}

TEST(ParseManifest, EmptyInputGivesEmptyManifest) {
  std::istringstream is("");
  EXPECT_TRUE(mp::parse_manifest(is).entries.empty());
}

TEST(ParseManifest, MalformedLineNamesItsLineNumber) {
  std::istringstream is("spk1 a.wav\nspk2 b.wav extra\n");
  try {
    mp::parse_manifest(is, "m.txt");
    FAIL();
  } catch (const mp::ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("m.txt:2"), std::string::npos);
  }
}

TEST(ParseTrials, TargetFlagAndPaths) {
  std::istringstream is("1 e.wav t.wav\n0 e.wav u.wav\n");
  const auto t = mp::parse_trials(is);
  ASSERT_EQ(t.trials.size(), 2u);
  EXPECT_TRUE(t.trials[0].is_target);
  EXPECT_EQ(t.trials[0].enroll, "e.wav");
  EXPECT_EQ(t.trials[0].test, "t.wav");
  EXPECT_FALSE(t.trials[1].is_target);
}

TEST(ParseTrials, BadLabelNamesItsLineNumber) {
  std::istringstream is("1 e.wav t.wav\n1 e.wav t.wav\n2 e.wav t.wav\n");
  try {
    mp::parse_trials(is);
    FAIL();
  } catch (const mp::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}
