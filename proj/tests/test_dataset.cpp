#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "tokensynth/dataset.hpp"

using namespace tokensynth;

namespace {

double peak(const std::vector<float>& x) {
  double p = 0;
  for (float v : x) p = std::max(p, static_cast<double>(std::abs(v)));
  return p;
}

double correlation(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

const NoteSampleBank& bank4() {
  static const NoteSampleBank b = build_toy_bank(4, 77);
  return b;
}

}  // namespace

TEST(Bank, DeterministicAndDistinct) {
  const auto& a = bank4();
  const auto b = build_toy_bank(4, 77);
  EXPECT_EQ(a.size(), 4);
  EXPECT_EQ(a.instruments, b.instruments);
  // Each stored pitch/velocity key covers the corpus range.
  for (const auto& inst : a.instruments) EXPECT_EQ(inst.size(), 17u * 4u);
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      EXPECT_LT(std::abs(correlation(bank_sample(a, i, 60, 2), bank_sample(a, j, 60, 2))), 0.99);
    }
  }
  EXPECT_THROW(build_toy_bank(0, 1), InvalidArgument);
}

TEST(Bank, PitchCoverage) {
  const auto& b = bank4();
  EXPECT_FALSE(bank_sample(b, 0, 37, 0).empty());
  EXPECT_FALSE(bank_sample(b, 0, 90, 0).empty());
  EXPECT_THROW(bank_sample(b, 0, 10, 0), InvalidArgument);
  EXPECT_THROW(bank_sample(b, 4, 60, 0), InvalidArgument);
}

TEST(Render, EmptyIsSilentAndLengthFixed) {
  const auto pcm = render_clip(bank4(), 0, NoteSequence{});
  EXPECT_EQ(pcm.size(), 80000u);
  EXPECT_EQ(peak(pcm), 0.0);
}

TEST(Render, NoteLandsAtOnset) {
  const auto pcm = render_clip_raw(bank4(), 1, NoteSequence::canonical({{100, 150, 60, 3}}));
  EXPECT_EQ(peak({pcm.begin(), pcm.begin() + 16000}), 0.0);
  EXPECT_GT(peak({pcm.begin() + 16000, pcm.begin() + 24000}), 0.01);
  // Released by offset + release time.
  const auto tail_from = static_cast<std::size_t>((1.5 + bank4().recipes[1].release_s) * 16000) + 1;
  EXPECT_EQ(peak({pcm.begin() + tail_from, pcm.end()}), 0.0);
}

TEST(Render, LinearInNotesAndVelocity) {
  const NoteEvent a{0, 100, 60, 3}, b{200, 300, 67, 3};
  const auto sa = render_clip_raw(bank4(), 2, NoteSequence::canonical({a}));
  const auto sb = render_clip_raw(bank4(), 2, NoteSequence::canonical({b}));
  const auto sab = render_clip_raw(bank4(), 2, NoteSequence::canonical({a, b}));
  for (std::size_t i = 0; i < sab.size(); i += 97) EXPECT_NEAR(sab[i], sa[i] + sb[i], 1e-6);
  const auto soft = render_clip_raw(bank4(), 0, NoteSequence::canonical({{0, 100, 60, 0}}));
  const auto loud = render_clip_raw(bank4(), 0, NoteSequence::canonical({{0, 100, 60, 3}}));
  EXPECT_NEAR(peak(soft) / peak(loud), 0.25, 0.1);
}

TEST(Render, PeakBound) {
  std::vector<NoteEvent> chord;
  for (int p = 48; p < 72; p += 2) chord.push_back({0, 300, p, 3});
  const auto pcm = render_clip(bank4(), 0, NoteSequence::canonical(chord));
  EXPECT_LE(peak(pcm), std::pow(10.0, -1.0 / 20.0) + 1e-6);
}

TEST(Effects, IdentityWhenDisabled) {
  const auto pcm = render_clip(bank4(), 0, NoteSequence::canonical({{0, 100, 60, 2}}));
  EXPECT_EQ(apply_effects(pcm, EffectChainParams{}, 16000), pcm);
}

TEST(Effects, EnableRatesAndRanges) {
  int eq = 0, dist = 0, rev = 0;
  const int n = 10000;
  const EffectRanges r;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_effect_chain(mix_seed(3, i));
    eq += p.eq_enabled;
    dist += p.distortion_enabled;
    rev += p.reverb_enabled;
    ASSERT_GE(p.drive, r.drive_min);
    ASSERT_LE(p.drive, r.drive_max);
    ASSERT_GE(p.reverb_wet, r.wet_min);
    ASSERT_LE(p.reverb_wet, r.wet_max);
    for (const auto& b : p.eq) {
      ASSERT_GE(b.gain_db, r.eq_gain_db_min);
      ASSERT_LE(b.gain_db, r.eq_gain_db_max);
    }
  }
  for (int c : {eq, dist, rev}) EXPECT_NEAR(static_cast<double>(c) / n, 0.5, 0.02);
  EXPECT_EQ(sample_effect_chain(42), sample_effect_chain(42));
}

TEST(Effects, ReverbAddsTailDistortionBounded) {
  const auto pcm = render_clip(bank4(), 3, NoteSequence::canonical({{0, 50, 60, 3}}));
  EffectChainParams p;
  p.reverb_enabled = true;
  p.reverb_decay_s = 1.5;
  p.reverb_wet = 0.5;
  const auto wet = apply_effects(pcm, p, 16000);
  const std::size_t from = static_cast<std::size_t>(1.2 * 16000);
  EXPECT_GT(peak({wet.begin() + from, wet.end()}), peak({pcm.begin() + from, pcm.end()}));
  EffectChainParams d;
  d.distortion_enabled = true;
  d.drive = 10.0;
  EXPECT_LE(peak(apply_effects(pcm, d, 16000)), 1.0);
}

TEST(Pair, Invariants) {
  const auto corpus = random_corpus(8, 5);
  const auto ex = make_pair(bank4(), corpus, 2, false, 99);
  EXPECT_NE(ex.reference_notes, ex.target_notes);
  EXPECT_EQ(ex.reference_pcm, render_clip(bank4(), 2, ex.reference_notes));
  EXPECT_FALSE(ex.effects.any());
  const auto wet = make_pair(bank4(), corpus, 2, true, 99);
  EXPECT_EQ(wet.target_notes, ex.target_notes);
  EXPECT_THROW(make_pair(bank4(), {corpus[0]}, 0, false, 1), InvalidArgument);
  EXPECT_THROW(make_pair(bank4(), {corpus[0], corpus[0]}, 0, false, 1), InvalidArgument);
}

TEST(Corpus, OptionsRespected) {
  CorpusOptions o;
  o.min_notes = 2;
  o.max_notes = 5;
  o.min_pitch = 50;
  o.max_pitch = 60;
  o.onset_grid = 25;
  o.min_duration_ticks = 25;
  o.max_duration_ticks = 100;
  o.monophonic = true;
  for (const auto& s : random_corpus(300, 8, o)) {
    ASSERT_GE(s.notes.size(), 2u);
    ASSERT_LE(s.notes.size(), 5u);
    for (std::size_t i = 0; i < s.notes.size(); ++i) {
      const auto& n = s.notes[i];
      ASSERT_EQ(n.onset_ticks % 25, 0);
      ASSERT_GE(n.pitch, 50);
      ASSERT_LE(n.pitch, 60);
      if (i + 1 < s.notes.size()) ASSERT_LE(n.offset_ticks, s.notes[i + 1].onset_ticks);
    }
  }
  for (const auto& s : random_corpus(300, 9)) {
    ASSERT_NO_THROW(s.validate());
    ASSERT_LE(s.notes.size(), 16u);
  }
}

TEST(Dataset, DoublingAndManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "ts_dataset";
  std::filesystem::remove_all(dir);
  DatasetOptions opt;
  opt.size = 10;
  opt.augment_fraction = 1.0;
  opt.test_fraction = 0.2;
  opt.seed = 4;
  const auto rows = build_dataset(bank4(), random_corpus(16, 6), opt, dir);
  EXPECT_EQ(rows.size(), 20u);
  const auto back = read_manifest(dir / "manifest.jsonl");
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].id, rows[i].id);
    EXPECT_EQ(back[i].effects, rows[i].effects);
    EXPECT_TRUE(std::filesystem::exists(dir / back[i].target_wav));
    EXPECT_TRUE(std::filesystem::exists(dir / back[i].reference_midi));
  }
  EXPECT_EQ(rows[0].id, "000000");
  EXPECT_EQ(rows[1].variant, "wet");
  EXPECT_EQ(rows[19].split, "test");
  EXPECT_EQ(rows[0].split, "train");

  opt.augment_fraction = 0.0;
  EXPECT_EQ(build_dataset(bank4(), random_corpus(16, 6), opt, dir / "dry").size(), 10u);
  opt.size = 0;
  EXPECT_THROW(build_dataset(bank4(), random_corpus(16, 6), opt, dir / "none"), InvalidArgument);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, ManifestParseErrorNamesLine) {
  const auto path = std::filesystem::temp_directory_path() / "ts_bad_manifest.jsonl";
  {
    std::ofstream out(path);
    out << "{\"id\":\"1\"}\n";
  }
  try {
    read_manifest(path);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.index(), 1u);
  }
  std::filesystem::remove(path);
}
