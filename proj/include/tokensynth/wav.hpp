#pragma once

// Minimal RIFF/WAVE reader and writer for mono 16-bit PCM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tokensynth/error.hpp"

namespace tokensynth {

struct Audio {
  std::vector<float> samples;
  int sample_rate = 16000;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

namespace wav_detail {

inline std::uint32_t le32(const std::uint8_t* p) {
  return p[0] | p[1] << 8 | p[2] << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
inline std::uint16_t le16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline void put32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put16(std::vector<std::uint8_t>& o, std::uint16_t v) {
  o.push_back(static_cast<std::uint8_t>(v));
  o.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace wav_detail

// Accepts 16-bit PCM or 32-bit float, any channel count (downmixed to mono).
inline Audio read_wav(const std::filesystem::path& path) {
  using namespace wav_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file: " + path.string());
  std::vector<std::uint8_t> d((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
  if (d.size() < 12 || std::memcmp(d.data(), "RIFF", 4) || std::memcmp(d.data() + 8, "WAVE", 4)) {
    throw ParseError(0, path.string() + ": not a RIFF/WAVE file");
  }
  int format = 0, channels = 0, bits = 0;
  Audio audio;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= d.size()) {
    const std::uint32_t len = le32(d.data() + pos + 4);
    const std::uint8_t* body = d.data() + pos + 8;
    if (pos + 8 + len > d.size()) throw ParseError(pos, path.string() + ": chunk overruns file");
    if (!std::memcmp(d.data() + pos, "fmt ", 4)) {
      if (len < 16) throw ParseError(pos, path.string() + ": fmt chunk too short");
      format = le16(body);
      channels = le16(body + 2);
      audio.sample_rate = static_cast<int>(le32(body + 4));
      bits = le16(body + 14);
      have_fmt = true;
    } else if (!std::memcmp(d.data() + pos, "data", 4)) {
      if (!have_fmt) throw ParseError(pos, path.string() + ": data before fmt");
      if (channels < 1) throw ParseError(pos, path.string() + ": zero channels");
      const bool pcm16 = format == 1 && bits == 16;
      const bool f32 = format == 3 && bits == 32;
      if (!pcm16 && !f32) {
        throw ParseError(pos, path.string() + ": only 16-bit PCM or 32-bit float WAV is supported");
      }
      const std::size_t frame_bytes = static_cast<std::size_t>(channels) * bits / 8;
      const std::size_t frames = len / frame_bytes;
      audio.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
          const std::uint8_t* p = body + i * frame_bytes + c * bits / 8;
          if (pcm16) {
            acc += static_cast<std::int16_t>(le16(p)) / 32768.0;
          } else {
            float v;
            std::memcpy(&v, p, 4);
            acc += v;
          }
        }
        audio.samples[i] = static_cast<float>(acc / channels);
      }
      return audio;
    }
    pos += 8 + len + (len & 1);
  }
  throw ParseError(pos, path.string() + ": no data chunk");
}

inline void write_wav(const Audio& audio, const std::filesystem::path& path) {
  using namespace wav_detail;
  std::vector<std::uint8_t> o;
  const std::uint32_t data_len = static_cast<std::uint32_t>(audio.samples.size() * 2);
  for (char c : std::string("RIFF")) o.push_back(static_cast<std::uint8_t>(c));
  put32(o, 36 + data_len);
  for (char c : std::string("WAVEfmt ")) o.push_back(static_cast<std::uint8_t>(c));
  put32(o, 16);
  put16(o, 1);
  put16(o, 1);
  put32(o, static_cast<std::uint32_t>(audio.sample_rate));
  put32(o, static_cast<std::uint32_t>(audio.sample_rate) * 2);
  put16(o, 2);
  put16(o, 16);
  for (char c : std::string("data")) o.push_back(static_cast<std::uint8_t>(c));
  put32(o, data_len);
  for (float s : audio.samples) {
    if (std::isnan(s)) throw NumericError("NaN sample in " + path.string());
    const long q = std::clamp(std::lround(static_cast<double>(s) * 32768.0), -32768L, 32767L);
    put16(o, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write WAV file: " + path.string());
  out.write(reinterpret_cast<const char*>(o.data()), static_cast<std::streamsize>(o.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace tokensynth
