#pragma once

// Note events on a 10 ms grid and the four-token-per-note MIDI vocabulary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "tokensynth/error.hpp"

namespace tokensynth {

inline constexpr int kTicksPerSecond = 100;
inline constexpr double kTickSeconds = 0.010;
inline constexpr int kClipTicks = 500;
inline constexpr int kNumPitches = 128;
inline constexpr int kNumVelocityBuckets = 4;

struct NoteEvent {
  int onset_ticks = 0;
  int offset_ticks = 1;
  int pitch = 60;
  int velocity_bucket = 0;

  bool valid(int clip_ticks = kClipTicks) const {
    return onset_ticks >= 0 && onset_ticks < clip_ticks && offset_ticks >= 0 &&
           offset_ticks < clip_ticks && onset_ticks < offset_ticks &&
           pitch >= 0 && pitch < kNumPitches && velocity_bucket >= 0 &&
           velocity_bucket < kNumVelocityBuckets;
  }

  double onset_seconds() const { return onset_ticks * kTickSeconds; }
  double offset_seconds() const { return offset_ticks * kTickSeconds; }

  friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

// Canonical order: (onset, pitch, offset).
inline bool note_order(const NoteEvent& a, const NoteEvent& b) {
  return std::tie(a.onset_ticks, a.pitch, a.offset_ticks) <
         std::tie(b.onset_ticks, b.pitch, b.offset_ticks);
}

inline bool same_note_key(const NoteEvent& a, const NoteEvent& b) {
  return a.onset_ticks == b.onset_ticks && a.pitch == b.pitch &&
         a.offset_ticks == b.offset_ticks;
}

struct NoteSequence {
  std::vector<NoteEvent> notes;
  int clip_ticks = kClipTicks;

  // Sorts into canonical order and drops repeated (onset, offset, pitch)
  // triples, keeping the first occurrence.
  static NoteSequence canonical(std::vector<NoteEvent> notes,
                                int clip_ticks = kClipTicks) {
    std::stable_sort(notes.begin(), notes.end(), note_order);
    notes.erase(std::unique(notes.begin(), notes.end(), same_note_key),
                notes.end());
    return NoteSequence{std::move(notes), clip_ticks};
  }

  void validate() const {
    if (clip_ticks <= 0 || clip_ticks > kClipTicks) {
      throw InvalidArgument("clip_ticks out of range: " +
                            std::to_string(clip_ticks));
    }
    for (std::size_t i = 0; i < notes.size(); ++i) {
      if (!notes[i].valid(clip_ticks)) {
        throw InvalidArgument("invalid note at position " + std::to_string(i));
      }
      if (i > 0) {
        if (note_order(notes[i], notes[i - 1])) {
          throw InvalidArgument("notes not in canonical order at position " +
                                std::to_string(i));
        }
        if (same_note_key(notes[i], notes[i - 1])) {
          throw InvalidArgument("duplicate note at position " +
                                std::to_string(i));
        }
      }
    }
  }

  bool empty() const { return notes.empty(); }
  std::size_t size() const { return notes.size(); }

  friend bool operator==(const NoteSequence&, const NoteSequence&) = default;
};

// MIDI velocity 1..127 to one of four uniform buckets.
inline int velocity_to_bucket(int velocity) {
  if (velocity < 1 || velocity > 127) {
    throw InvalidArgument("velocity must be in 1..127, got " +
                          std::to_string(velocity));
  }
  return std::min((velocity - 1) / 32, kNumVelocityBuckets - 1);
}

// Upper edge of each bucket, so bucket_to_velocity round-trips exactly.
inline int bucket_to_velocity(int bucket) {
  static constexpr int kEdges[kNumVelocityBuckets] = {32, 64, 96, 127};
  if (bucket < 0 || bucket >= kNumVelocityBuckets) {
    throw InvalidArgument("velocity bucket out of range");
  }
  return kEdges[bucket];
}

inline NoteEvent quantize_note(double onset_s, double offset_s, int pitch,
                               int velocity_midi) {
  if (pitch < 0 || pitch >= kNumPitches) {
    throw InvalidArgument("pitch out of range: " + std::to_string(pitch));
  }
  if (!std::isfinite(onset_s) || !std::isfinite(offset_s)) {
    throw InvalidArgument("non-finite note time");
  }
  if (!(offset_s > onset_s)) {
    throw InvalidArgument("note duration must be positive");
  }
  if (onset_s < 0.0) {
    throw InvalidArgument("negative onset");
  }
  auto to_tick = [](double s) {
    const long t = std::lround(s / kTickSeconds);
    return static_cast<int>(std::clamp<long>(t, 0, kClipTicks - 1));
  };
  NoteEvent ev;
  ev.onset_ticks = to_tick(onset_s);
  ev.offset_ticks = std::max(to_tick(offset_s), ev.onset_ticks + 1);
  if (ev.offset_ticks > kClipTicks - 1) {
    throw InvalidArgument("note collapses to zero length at the clip boundary");
  }
  ev.pitch = pitch;
  ev.velocity_bucket = velocity_to_bucket(velocity_midi);
  return ev;
}

struct IdSpan {
  int first = 0;
  int size = 0;

  int last() const { return first + size - 1; }
  bool contains(int id) const { return id >= first && id < first + size; }

  friend bool operator==(const IdSpan&, const IdSpan&) = default;
};

// Layout: PAD = 0, onset | offset | pitch | velocity spans, then BOS_MIDI,
// EOS_MIDI and BOS_AUDIO.
struct MidiVocab {
  IdSpan onset{1, kClipTicks};
  IdSpan offset{1 + kClipTicks, kClipTicks};
  IdSpan pitch{1 + 2 * kClipTicks, kNumPitches};
  IdSpan velocity{1 + 2 * kClipTicks + kNumPitches, kNumVelocityBuckets};
  int pad = 0;
  int bos_midi = 1 + 2 * kClipTicks + kNumPitches + kNumVelocityBuckets;
  int eos_midi = bos_midi + 1;
  int bos_audio = bos_midi + 2;

  int size() const { return bos_audio + 1; }

  bool is_special(int id) const {
    return id == pad || id == bos_midi || id == eos_midi || id == bos_audio;
  }

  // Spans must be disjoint, contiguous, and followed by the specials.
  void validate() const {
    if (pad != 0 || onset.first != 1 || offset.first != onset.first + onset.size ||
        pitch.first != offset.first + offset.size ||
        velocity.first != pitch.first + pitch.size ||
        bos_midi != velocity.first + velocity.size || eos_midi != bos_midi + 1 ||
        bos_audio != bos_midi + 2) {
      throw IncompatibleError("MIDI vocabulary spans are not contiguous");
    }
    if (onset.size != kClipTicks || offset.size != kClipTicks ||
        pitch.size != kNumPitches || velocity.size != kNumVelocityBuckets) {
      throw IncompatibleError("MIDI vocabulary span sizes differ from this build");
    }
  }

  friend bool operator==(const MidiVocab&, const MidiVocab&) = default;
};

struct MidiTokenSeq {
  std::vector<int> tokens;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const MidiTokenSeq&, const MidiTokenSeq&) = default;
};

inline MidiTokenSeq tokenize(const NoteSequence& seq,
                             const MidiVocab& vocab = MidiVocab{}) {
  seq.validate();
  MidiTokenSeq out;
  out.tokens.reserve(seq.notes.size() * 4);
  for (const auto& n : seq.notes) {
    out.tokens.push_back(vocab.onset.first + n.onset_ticks);
    out.tokens.push_back(vocab.offset.first + n.offset_ticks);
    out.tokens.push_back(vocab.pitch.first + n.pitch);
    out.tokens.push_back(vocab.velocity.first + n.velocity_bucket);
  }
  return out;
}

namespace detail {

// Decodes one onset/offset/pitch/velocity group starting at tokens[at].
// Returns the index of the first offending token, or -1 on success.
inline long decode_group(std::span<const int> ids, std::span<const std::size_t> where,
                         std::size_t at, const MidiVocab& vocab, NoteEvent& note) {
  const IdSpan* spans[4] = {&vocab.onset, &vocab.offset, &vocab.pitch,
                            &vocab.velocity};
  for (int k = 0; k < 4; ++k) {
    if (!spans[k]->contains(ids[at + k])) return static_cast<long>(where[at + k]);
  }
  note.onset_ticks = ids[at] - vocab.onset.first;
  note.offset_ticks = ids[at + 1] - vocab.offset.first;
  note.pitch = ids[at + 2] - vocab.pitch.first;
  note.velocity_bucket = ids[at + 3] - vocab.velocity.first;
  if (note.offset_ticks <= note.onset_ticks) return static_cast<long>(where[at + 1]);
  return -1;
}

inline void strip_specials(const MidiTokenSeq& tokens, const MidiVocab& vocab,
                           std::vector<int>& ids, std::vector<std::size_t>& where) {
  for (std::size_t i = 0; i < tokens.tokens.size(); ++i) {
    const int id = tokens.tokens[i];
    if (vocab.is_special(id)) continue;
    ids.push_back(id);
    where.push_back(i);
  }
}

}  // namespace detail

// Strict inverse of tokenize. Throws ParseError naming the offending index in
// the original (unstripped) token list.
inline NoteSequence detokenize(const MidiTokenSeq& tokens,
                               const MidiVocab& vocab = MidiVocab{}) {
  std::vector<int> ids;
  std::vector<std::size_t> where;
  detail::strip_specials(tokens, vocab, ids, where);
  if (ids.size() % 4 != 0) {
    throw ParseError(where.empty() ? 0 : where[ids.size() - ids.size() % 4],
                     "token count is not a multiple of 4");
  }
  std::vector<NoteEvent> notes;
  notes.reserve(ids.size() / 4);
  for (std::size_t g = 0; g < ids.size(); g += 4) {
    NoteEvent n;
    const long bad = detail::decode_group(ids, where, g, vocab, n);
    if (bad >= 0) {
      throw ParseError(static_cast<std::size_t>(bad),
                       "malformed note group (expected onset, offset, pitch, velocity)");
    }
    notes.push_back(n);
  }
  return NoteSequence::canonical(std::move(notes));
}

struct LenientDecode {
  NoteSequence notes;
  int dropped_groups = 0;
};

// Decoder for model output: malformed groups are skipped instead of fatal.
// A group that fails realigns the cursor on the next onset id.
inline LenientDecode detokenize_lenient(const MidiTokenSeq& tokens,
                                        const MidiVocab& vocab = MidiVocab{}) {
  std::vector<int> ids;
  std::vector<std::size_t> where;
  detail::strip_specials(tokens, vocab, ids, where);
  LenientDecode out;
  std::vector<NoteEvent> notes;
  std::size_t g = 0;
  while (g < ids.size()) {
    if (g + 4 > ids.size()) {
      ++out.dropped_groups;
      break;
    }
    NoteEvent n;
    if (detail::decode_group(ids, where, g, vocab, n) < 0) {
      notes.push_back(n);
      g += 4;
      continue;
    }
    ++out.dropped_groups;
    ++g;
    while (g < ids.size() && !vocab.onset.contains(ids[g])) ++g;
  }
  out.notes = NoteSequence::canonical(std::move(notes));
  return out;
}

}  // namespace tokensynth
