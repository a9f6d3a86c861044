#pragma once

// Standard MIDI File (type 0/1) reading and writing for NoteSequence.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "tokensynth/error.hpp"
#include "tokensynth/midi_tok.hpp"

namespace tokensynth {

// Events that were present in the file but have no NoteSequence equivalent.
struct MidiReadReport {
  int format = 0;
  int tracks = 0;
  int ignored_controller = 0;
  int ignored_program_change = 0;
  int ignored_pitch_bend = 0;
  int ignored_aftertouch = 0;
  int ignored_sysex = 0;
  int unmatched_note_off = 0;
  int unterminated_notes = 0;
  int dropped_out_of_clip = 0;
  int merged_duplicates = 0;
};

namespace smf_detail {

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}

  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ >= data_.size(); }

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] << 8 | data_[pos_ + 1]);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = v << 8 | data_[pos_ + i];
    pos_ += 4;
    return v;
  }
  std::uint32_t varlen() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8();
      v = v << 7 | (b & 0x7F);
      if (!(b & 0x80)) return v;
    }
    throw ParseError(pos_, "variable-length quantity longer than 4 bytes");
  }
  std::uint8_t peek() const {
    if (pos_ >= data_.size()) throw ParseError(pos_, "unexpected end of MIDI data");
    return data_[pos_];
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::string tag() {
    need(4);
    std::string t(data_.begin() + pos_, data_.begin() + pos_ + 4);
    pos_ += 4;
    return t;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw ParseError(pos_, "unexpected end of MIDI data");
  }

  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

struct RawNote {
  std::uint64_t on_tick;
  std::uint64_t off_tick;
  int pitch;
  int velocity;
};

inline void put_varlen(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[4];
  int n = 0;
  buf[n++] = v & 0x7F;
  while (v >>= 7) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n--) out.push_back(buf[n]);
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace smf_detail

inline NoteSequence parse_midi(const std::vector<std::uint8_t>& data,
                               MidiReadReport* report = nullptr) {
  using namespace smf_detail;
  MidiReadReport rep;
  Reader r(data);
  if (r.tag() != "MThd") throw ParseError(0, "missing MThd header");
  const std::uint32_t header_len = r.u32();
  if (header_len < 6) throw ParseError(4, "MThd chunk too short");
  rep.format = r.u16();
  const int ntracks = r.u16();
  const std::uint16_t division = r.u16();
  r.skip(header_len - 6);
  if (rep.format > 1) throw ParseError(8, "SMF format 2 is not supported");
  if (division & 0x8000) throw ParseError(12, "SMPTE time division is not supported");
  if (division == 0) throw ParseError(12, "zero ticks per quarter note");
  rep.tracks = ntracks;

  std::map<std::uint64_t, std::uint32_t> tempo;  // tick -> us per quarter
  std::vector<RawNote> raw;

  for (int t = 0; t < ntracks; ++t) {
    if (r.at_end()) throw ParseError(r.pos(), "fewer tracks than declared");
    const std::size_t chunk_at = r.pos();
    const std::string tag = r.tag();
    const std::uint32_t len = r.u32();
    if (tag != "MTrk") {
      r.skip(len);
      --t;
      continue;
    }
    const std::size_t end = r.pos() + len;
    if (end > data.size()) throw ParseError(chunk_at, "track chunk overruns file");
    std::uint64_t tick = 0;
    std::uint8_t running = 0;
    // (channel, pitch) -> FIFO of (tick, velocity)
    std::map<std::pair<int, int>, std::deque<std::pair<std::uint64_t, int>>> open;
    while (r.pos() < end) {
      tick += r.varlen();
      std::uint8_t status = r.peek();
      if (status & 0x80) {
        r.u8();
        if (status < 0xF0) running = status;
      } else {
        if (!running) throw ParseError(r.pos(), "data byte without running status");
        status = running;
      }
      if (status == 0xFF) {
        const std::uint8_t type = r.u8();
        const std::uint32_t mlen = r.varlen();
        if (type == 0x51 && mlen == 3) {
          const std::uint32_t us = static_cast<std::uint32_t>(r.u8()) << 16 |
                                   static_cast<std::uint32_t>(r.u8()) << 8 | r.u8();
          tempo[tick] = us;
        } else if (type == 0x2F) {
          r.skip(mlen);
          break;
        } else {
          r.skip(mlen);
        }
        continue;
      }
      if (status == 0xF0 || status == 0xF7) {
        r.skip(r.varlen());
        ++rep.ignored_sysex;
        continue;
      }
      const int kind = status & 0xF0;
      const int channel = status & 0x0F;
      switch (kind) {
        case 0x80:
        case 0x90: {
          const int pitch = r.u8() & 0x7F;
          const int vel = r.u8() & 0x7F;
          auto& q = open[{channel, pitch}];
          if (kind == 0x90 && vel > 0) {
            q.emplace_back(tick, vel);
          } else if (q.empty()) {
            ++rep.unmatched_note_off;
          } else {
            raw.push_back({q.front().first, tick, pitch, q.front().second});
            q.pop_front();
          }
          break;
        }
        case 0xA0:
          r.skip(2);
          ++rep.ignored_aftertouch;
          break;
        case 0xB0:
          r.skip(2);
          ++rep.ignored_controller;
          break;
        case 0xC0:
          r.skip(1);
          ++rep.ignored_program_change;
          break;
        case 0xD0:
          r.skip(1);
          ++rep.ignored_aftertouch;
          break;
        case 0xE0:
          r.skip(2);
          ++rep.ignored_pitch_bend;
          break;
        default:
          throw ParseError(r.pos(), "unsupported MIDI status byte");
      }
    }
    for (auto& [key, q] : open) rep.unterminated_notes += static_cast<int>(q.size());
    if (r.pos() > end) throw ParseError(end, "event runs past end of track");
    r.skip(end - r.pos());
  }

  // Tempo map: seconds at tick.
  if (!tempo.count(0)) tempo[0] = 500000;
  auto seconds_at = [&](std::uint64_t tick) {
    double s = 0.0;
    for (auto it = tempo.begin(); it != tempo.end() && it->first < tick; ++it) {
      const auto next = std::next(it);
      const std::uint64_t seg_end =
          next == tempo.end() ? tick : std::min<std::uint64_t>(next->first, tick);
      s += static_cast<double>(seg_end - it->first) * it->second * 1e-6 / division;
    }
    return s;
  };

  std::vector<NoteEvent> notes;
  const double clip_s = kClipTicks * kTickSeconds;
  for (const auto& n : raw) {
    const double on = seconds_at(n.on_tick);
    double off = std::min(seconds_at(n.off_tick), clip_s);
    if (off <= on) off = on + kTickSeconds;  // zero-length note-on/off pairs
    try {
      notes.push_back(quantize_note(on, off, n.pitch, n.velocity));
    } catch (const InvalidArgument&) {
      ++rep.dropped_out_of_clip;
    }
  }
  const std::size_t before = notes.size();
  NoteSequence seq = NoteSequence::canonical(std::move(notes));
  rep.merged_duplicates = static_cast<int>(before - seq.notes.size());
  if (report) *report = rep;
  return seq;
}

inline NoteSequence read_midi_file(const std::filesystem::path& path,
                                   MidiReadReport* report = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open MIDI file: " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  try {
    return parse_midi(data, report);
  } catch (const ParseError& e) {
    throw ParseError(e.index(), path.string() + ": " + e.what());
  }
}

// Type-0 file at 120 BPM with 50 ticks per quarter, so one file tick is one
// 10 ms grid step.
inline std::vector<std::uint8_t> serialize_midi(const NoteSequence& seq) {
  using namespace smf_detail;
  seq.validate();
  struct Ev {
    int tick;
    int order;  // note-offs before note-ons at the same tick
    std::uint8_t status, a, b;
  };
  std::vector<Ev> evs;
  for (const auto& n : seq.notes) {
    evs.push_back({n.onset_ticks, 1, 0x90, static_cast<std::uint8_t>(n.pitch),
                   static_cast<std::uint8_t>(bucket_to_velocity(n.velocity_bucket))});
    evs.push_back({n.offset_ticks, 0, 0x80, static_cast<std::uint8_t>(n.pitch), 0});
  }
  std::stable_sort(evs.begin(), evs.end(), [](const Ev& x, const Ev& y) {
    return std::tie(x.tick, x.order) < std::tie(y.tick, y.order);
  });

  std::vector<std::uint8_t> track;
  put_varlen(track, 0);
  for (std::uint8_t b : {0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20}) track.push_back(b);
  int last = 0;
  for (const auto& e : evs) {
    put_varlen(track, static_cast<std::uint32_t>(e.tick - last));
    last = e.tick;
    track.push_back(e.status);
    track.push_back(e.a);
    track.push_back(e.b);
  }
  put_varlen(track, 0);
  for (std::uint8_t b : {0xFF, 0x2F, 0x00}) track.push_back(b);

  std::vector<std::uint8_t> out = {'M', 'T', 'h', 'd'};
  put_u32(out, 6);
  put_u16(out, 0);
  put_u16(out, 1);
  put_u16(out, 50);
  for (char c : std::string("MTrk")) out.push_back(static_cast<std::uint8_t>(c));
  put_u32(out, static_cast<std::uint32_t>(track.size()));
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

inline void write_midi_file(const NoteSequence& seq, const std::filesystem::path& path) {
  const auto bytes = serialize_midi(seq);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write MIDI file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace tokensynth
