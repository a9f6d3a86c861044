#include <gtest/gtest.h>

#include <random>

#include "tokensynth/midi_tok.hpp"

using namespace tokensynth;

namespace {

NoteSequence random_sequence(std::mt19937_64& rng, int max_notes) {
  std::uniform_int_distribution<int> count(0, max_notes), onset(0, 498), pitch(0, 127), vel(0, 3);
  std::vector<NoteEvent> notes;
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    NoteEvent e;
    e.onset_ticks = onset(rng);
    e.offset_ticks = std::uniform_int_distribution<int>(e.onset_ticks + 1, 499)(rng);
    e.pitch = pitch(rng);
    e.velocity_bucket = vel(rng);
    notes.push_back(e);
  }
  return NoteSequence::canonical(std::move(notes));
}

}  // namespace

TEST(Vocab, LayoutAndSize) {
  const MidiVocab v;
  EXPECT_EQ(v.pad, 0);
  EXPECT_EQ(v.onset.first, 1);
  EXPECT_EQ(v.offset.first, 501);
  EXPECT_EQ(v.pitch.first, 1001);
  EXPECT_EQ(v.velocity.first, 1129);
  // 500 + 500 + 128 + 4 + 4 specials
  EXPECT_EQ(v.size(), 1136);
  EXPECT_NO_THROW(v.validate());
  for (int id = 0; id < v.size(); ++id) {
    const int owners = v.onset.contains(id) + v.offset.contains(id) + v.pitch.contains(id) +
                       v.velocity.contains(id) + v.is_special(id);
    EXPECT_EQ(owners, 1) << id;
  }
}

TEST(Quantize, Examples) {
  EXPECT_EQ(quantize_note(0.0, 0.5, 60, 100), (NoteEvent{0, 50, 60, 3}));
  EXPECT_EQ(quantize_note(0.004, 0.0041, 60, 1), (NoteEvent{0, 1, 60, 0}));
  EXPECT_THROW(quantize_note(4.999, 5.0, 127, 64), InvalidArgument);
  EXPECT_THROW(quantize_note(0.0, 0.5, 128, 64), InvalidArgument);
  EXPECT_THROW(quantize_note(0.5, 0.5, 60, 64), InvalidArgument);
}

TEST(Quantize, VelocityBuckets) {
  EXPECT_EQ(velocity_to_bucket(1), 0);
  EXPECT_EQ(velocity_to_bucket(32), 0);
  EXPECT_EQ(velocity_to_bucket(33), 1);
  EXPECT_EQ(velocity_to_bucket(64), 1);
  EXPECT_EQ(velocity_to_bucket(65), 2);
  EXPECT_EQ(velocity_to_bucket(96), 2);
  EXPECT_EQ(velocity_to_bucket(97), 3);
  EXPECT_EQ(velocity_to_bucket(127), 3);
  for (int b = 0; b < 4; ++b) EXPECT_EQ(velocity_to_bucket(bucket_to_velocity(b)), b);
}

TEST(Tokenize, SingleNote) {
  const NoteSequence s = NoteSequence::canonical({{0, 50, 60, 3}});
  const MidiVocab v;
  const auto t = tokenize(s);
  EXPECT_EQ(t.tokens, (std::vector<int>{v.onset.first + 0, v.offset.first + 50, v.pitch.first + 60,
                                         v.velocity.first + 3}));
  EXPECT_EQ(detokenize(t), s);
}

TEST(Tokenize, EmptyAndThreeNotes) {
  EXPECT_TRUE(tokenize(NoteSequence{}).tokens.empty());
  const NoteSequence s = NoteSequence::canonical({{100, 120, 64, 1}, {0, 10, 60, 0}, {0, 30, 55, 2}});
  const auto t = tokenize(s);
  ASSERT_EQ(t.size(), 12u);
  std::vector<int> expect;
  for (const auto& n : s.notes) {
    const auto one = tokenize(NoteSequence::canonical({n}));
    expect.insert(expect.end(), one.tokens.begin(), one.tokens.end());
  }
  EXPECT_EQ(t.tokens, expect);
  EXPECT_EQ(s.notes[0].pitch, 55);
}

TEST(Tokenize, CanonicalOrderAndDedup) {
  const auto s = NoteSequence::canonical({{5, 9, 60, 1}, {5, 9, 60, 2}, {5, 8, 60, 0}, {2, 9, 70, 0}});
  ASSERT_EQ(s.notes.size(), 3u);
  EXPECT_EQ(s.notes[0].onset_ticks, 2);
  EXPECT_EQ(s.notes[1].offset_ticks, 8);
  EXPECT_NO_THROW(s.validate());
}

TEST(Detokenize, ErrorsNameIndex) {
  const MidiVocab v;
  MidiTokenSeq bad{{v.pitch.first + 60, v.onset.first, v.offset.first + 5, v.velocity.first}};
  try {
    detokenize(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.index(), 0u);
  }
  // Specials are skipped but indices refer to the original list.
  MidiTokenSeq bad2{{v.bos_midi, v.onset.first, v.offset.first + 5, v.offset.first + 60, v.velocity.first}};
  try {
    detokenize(bad2);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.index(), 3u);
  }
  EXPECT_THROW(detokenize(MidiTokenSeq{{v.onset.first}}), ParseError);
  // offset before onset
  EXPECT_THROW(detokenize(MidiTokenSeq{{v.onset.first + 9, v.offset.first + 3, v.pitch.first, v.velocity.first}}),
               ParseError);
}

TEST(Detokenize, LenientResyncs) {
  const MidiVocab v;
  const auto good = tokenize(NoteSequence::canonical({{0, 10, 60, 1}, {20, 30, 62, 2}}));
  MidiTokenSeq mixed;
  mixed.tokens = {v.pitch.first + 1, v.velocity.first};
  mixed.tokens.insert(mixed.tokens.end(), good.tokens.begin(), good.tokens.end());
  mixed.tokens.push_back(v.onset.first + 40);
  const auto dec = detokenize_lenient(mixed);
  EXPECT_EQ(dec.notes, detokenize(good));
  EXPECT_EQ(dec.dropped_groups, 2);
}

TEST(TokenizeProperty, RoundtripLengthMonotone) {
  std::mt19937_64 rng(7);
  const MidiVocab v;
  for (int trial = 0; trial < 500; ++trial) {
    const auto s = random_sequence(rng, 20);
    const auto t = tokenize(s);
    ASSERT_EQ(t.size(), 4 * s.notes.size());
    ASSERT_EQ(detokenize(t), s);
    int last = -1;
    for (std::size_t i = 0; i < t.size(); i += 4) {
      ASSERT_TRUE(v.onset.contains(t.tokens[i]));
      ASSERT_GE(t.tokens[i], last);
      last = t.tokens[i];
    }
  }
}

TEST(NoteSequence, ValidateRejects) {
  NoteSequence s;
  s.notes = {{10, 5, 60, 0}};
  EXPECT_THROW(s.validate(), InvalidArgument);
  s.notes = {{10, 20, 60, 0}, {5, 20, 60, 0}};
  EXPECT_THROW(s.validate(), InvalidArgument);
  s.notes = {{10, 20, 60, 4}};
  EXPECT_THROW(s.validate(), InvalidArgument);
}
