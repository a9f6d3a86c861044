#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "tokensynth/model.hpp"
#include "tokensynth/train.hpp"

using namespace tokensynth;

namespace {

ModelConfig tiny(ModelMode mode, int depth = 2, int k = 8) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_emb = 8;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.depth = depth;
  c.codebook_size = k;
  c.mode = mode;
  c.max_seq = 64;
  c.d_clap = 4;
  return c;
}

AudioTokens random_audio(int frames, int depth, int k, std::mt19937_64& rng) {
  AudioTokens a = AudioTokens::zeros(frames, depth, TokenLayout::aligned);
  for (auto& v : a.grid) v = 1 + static_cast<int>(rng() % k);
  return a;
}

TimbreEmbedding random_timbre(int dim, std::mt19937_64& rng) {
  std::normal_distribution<float> g;
  TimbreEmbedding e;
  for (int i = 0; i < dim; ++i) e.vector.push_back(g(rng));
  return e;
}

TrainingExample example(const ModelConfig& c, std::mt19937_64& rng, int frames = 5) {
  TrainingExample ex;
  if (c.mode == ModelMode::conditional) ex.timbre = random_timbre(c.d_clap, rng);
  NoteSequence notes;
  do {
    notes = oracle::random_notes(rng, 2);
  } while (notes.empty());
  ex.midi = tokenize(notes);
  ex.audio = random_audio(frames, c.depth, c.codebook_size, rng);
  return ex;
}

}  // namespace

TEST(Layout, ConditionalLengthOneNote) {
  const ModelConfig c = tiny(ModelMode::conditional);
  std::mt19937_64 rng(1);
  const auto e = random_timbre(c.d_clap, rng);
  const auto midi = tokenize(NoteSequence::canonical({{0, 50, 60, 3}}));
  const auto seq = build_sequence(c, &e, &midi, delay_apply(random_audio(5, 2, 8, rng)));
  EXPECT_EQ(seq.layout.length, 1 + 4 + 1 + (5 + 2 - 1));
  EXPECT_EQ(seq.steps[0].kind, StepKind::timbre);
  EXPECT_EQ(seq.steps[5].token, MidiVocab{}.bos_audio);
  EXPECT_EQ(seq.steps[6].kind, StepKind::audio);
}

TEST(Layout, OtherModes) {
  std::mt19937_64 rng(2);
  const auto audio = delay_apply(random_audio(5, 2, 8, rng));
  const auto midi = tokenize(NoteSequence::canonical({{0, 50, 60, 3}}));
  const auto u = build_sequence(tiny(ModelMode::unconditional), nullptr, nullptr, audio);
  EXPECT_EQ(u.layout.length, 1 + 6);
  const auto t = build_sequence(tiny(ModelMode::transcription), nullptr, &midi, audio);
  EXPECT_EQ(t.layout.length, 6 + 1 + 4);
  EXPECT_EQ(t.steps[6].token, MidiVocab{}.bos_midi);
  EXPECT_EQ(t.layout.predict_count, 5);
  const auto e = random_timbre(4, rng);
  EXPECT_THROW(build_sequence(tiny(ModelMode::unconditional), &e, nullptr, audio), InvalidArgument);
  EXPECT_THROW(build_sequence(tiny(ModelMode::conditional), nullptr, &midi, audio), InvalidArgument);
  EXPECT_THROW(build_sequence(tiny(ModelMode::transcription), &e, &midi, audio), InvalidArgument);
}

TEST(Loss, UniformLogits) {
  std::mt19937_64 rng(3);
  const auto delayed = delay_apply(random_audio(7, 3, 256, rng));
  nn::Mat<double> logits = nn::Mat<double>::Zero(delayed.rows(), 3 * 256);
  const auto lv = loss_eq1(logits, delayed, 256);
  EXPECT_NEAR(lv.mean, std::log(256.0), 1e-12);
  EXPECT_EQ(lv.count, 21);
}

TEST(Loss, MatchesOracleAndGradient) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 2.0);
  const auto delayed = delay_apply(random_audio(3, 2, 6, rng));
  nn::Mat<double> logits(delayed.rows(), 12);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
  nn::Mat<double> d;
  const auto lv = loss_eq1(logits, delayed, 6, &d);
  EXPECT_NEAR(lv.sum, static_cast<double>(oracle::eq1_loss(logits, delayed, 6)), 1e-9);
  // d(sum)/d(logit) by central differences.
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    auto lp = logits, lm = logits;
    lp.data()[i] += 1e-6;
    lm.data()[i] -= 1e-6;
    const double num = (loss_eq1(lp, delayed, 6).sum - loss_eq1(lm, delayed, 6).sum) / 2e-6;
    EXPECT_NEAR(num, d.data()[i], 1e-6);
  }
}

TEST(Loss, LargeMarginNearZeroAndEmptyMask) {
  AudioTokens a = AudioTokens::zeros(2, 1, TokenLayout::aligned);
  a.grid = {2, 3};
  const auto delayed = delay_apply(a);
  nn::Mat<double> logits = nn::Mat<double>::Zero(2, 4);
  logits(0, 1) = 50;
  logits(1, 2) = 50;
  EXPECT_LT(loss_eq1(logits, delayed, 4).sum, 1e-12);
  Targets t;
  t.heads = 1;
  t.classes = 4;
  t.ids = {-1, -1};
  EXPECT_THROW(masked_cross_entropy(logits, t), InvalidArgument);
}

TEST(Transformer, GradientCheckAllModes) {
  for (ModelMode mode : {ModelMode::conditional, ModelMode::unconditional, ModelMode::transcription}) {
    const ModelConfig c = tiny(mode);
    Transformer<double> m(c, 9);
    std::mt19937_64 rng(10);
    const auto seq = sequence_for(c, example(c, rng));
    const auto gc = oracle::gradient_check(m, seq, 60, 11);
    EXPECT_GE(gc.probed, 60);
    EXPECT_LT(gc.max_rel, 1e-4) << to_string(mode);
  }
}

TEST(Transformer, ShapesAndDeterminism) {
  const ModelConfig c = tiny(ModelMode::conditional, 3, 8);
  std::mt19937_64 rng(12);
  const auto seq = sequence_for(c, example(c, rng, 6));
  Transformer<float> a(c, 5), b(c, 5);
  const auto la = a.forward(seq), lb = b.forward(seq);
  EXPECT_EQ(la.rows(), 6 + 3 - 1);
  EXPECT_EQ(la.cols(), 3 * 8);
  EXPECT_TRUE((la.array() == lb.array()).all());
}

TEST(Transformer, Causality) {
  const ModelConfig c = tiny(ModelMode::conditional);
  Transformer<double> m(c, 13);
  std::mt19937_64 rng(14);
  auto seq = sequence_for(c, example(c, rng, 6));
  const auto base = m.forward(seq);
  // Changing the audio token on row r only affects logits of rows >= r + 1
  // (output row i is produced at input position predict_begin + i).
  for (int r = 0; r < seq.audio.rows(); ++r) {
    for (int d = 0; d < c.depth; ++d) {
      auto s2 = seq;
      if (s2.audio.at(r, d) == 0) continue;
      s2.audio.at(r, d) = s2.audio.at(r, d) % c.codebook_size + 1;
      const auto out = m.forward(s2);
      for (int i = 0; i <= r; ++i) ASSERT_TRUE((out.row(i).array() == base.row(i).array()).all()) << r << " " << i;
    }
  }
}

TEST(Transformer, SessionMatchesFullForward) {
  const ModelConfig c = tiny(ModelMode::conditional);
  Transformer<double> m(c, 15);
  std::mt19937_64 rng(16);
  const auto seq = sequence_for(c, example(c, rng));
  const auto full = m.forward(seq);
  Transformer<double>::Session s(m);
  int out_row = 0;
  for (int p = 0; p < seq.layout.length; ++p) {
    const auto row = s.append(seq.steps[p], seq);
    if (p >= seq.layout.predict_begin && out_row < full.rows()) {
      EXPECT_LT((row - full.row(out_row)).cwiseAbs().maxCoeff(), 1e-10);
      ++out_row;
    }
  }
  EXPECT_EQ(out_row, full.rows());
}

TEST(Transformer, UnconditionalHasNoConditioningPath) {
  const ModelConfig c = tiny(ModelMode::unconditional);
  Transformer<float> m(c, 1);
  EXPECT_EQ(m.params().find("timbre_proj.0.weight"), nullptr);
  std::mt19937_64 rng(2);
  auto ex = example(c, rng);
  const auto a = m.forward(sequence_for(c, ex));
  ex.midi = tokenize(NoteSequence::canonical({{3, 9, 40, 0}}));
  ex.timbre = random_timbre(4, rng);
  const auto b = m.forward(sequence_for(c, ex));
  EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(Training, OverfitsRepeatedBatch) {
  ModelConfig c = tiny(ModelMode::conditional, 2, 16);
  c.d_emb = 32;
  c.d_ff = 64;
  Transformer<float> m(c, 3);
  std::mt19937_64 rng(4);
  std::vector<TrainingExample> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(example(c, rng, 8));
  nn::Adam<float> adam;
  adam.lr = 3e-3;
  const double initial = train_step(m, batch, adam, rng).loss;
  double last = initial;
  for (int s = 0; s < 199; ++s) last = train_step(m, batch, adam, rng).loss;
  EXPECT_LT(last, 0.1 * initial);
}

TEST(Training, ZeroLearningRateLeavesWeights) {
  const ModelConfig c = tiny(ModelMode::transcription);
  Transformer<float> m(c, 3);
  std::vector<nn::Mat<float>> before;
  for (const auto& p : m.params()) before.push_back(p.value);
  std::mt19937_64 rng(5);
  nn::Adam<float> adam;
  adam.lr = 0.0;
  train_step(m, {example(c, rng)}, adam, rng);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE((m.params()[i].value.array() == before[i].array()).all());
}

TEST(Training, LrSchedule) {
  TrainOptions o;
  o.steps = 100;
  o.lr = 1.0;
  o.warmup_steps = 10;
  o.min_lr_ratio = 0.1;
  EXPECT_NEAR(o.lr_at(0), 0.1, 1e-3);
  EXPECT_NEAR(o.lr_at(99), 0.1, 1e-3);
  EXPECT_GT(o.lr_at(20), o.lr_at(80));
}

TEST(Checkpoint, SaveLoadBitExact) {
  const ModelConfig c = tiny(ModelMode::conditional);
  Transformer<float> m(c, 21);
  std::mt19937_64 rng(22);
  const auto seq = sequence_for(c, example(c, rng));
  const auto path = std::filesystem::temp_directory_path() / "ts_model.bin";
  save_checkpoint(m, MidiVocab{}, FrameSpec{}, path);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.config, c);
  EXPECT_TRUE((ck.model.forward(seq).array() == m.forward(seq).array()).all());
  EXPECT_NO_THROW(ck.require(ModelMode::conditional, 2, 8));
  EXPECT_THROW(ck.require(ModelMode::conditional, 3, 8), IncompatibleError);
  EXPECT_THROW(ck.require(ModelMode::unconditional, 2, 8), IncompatibleError);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(load_checkpoint(path), ParseError);
  std::filesystem::remove(path);
}

TEST(Config, Presets) {
  const auto t = ModelConfig::preset("toy");
  EXPECT_EQ(t.layers, 2);
  EXPECT_EQ(t.heads, 4);
  EXPECT_EQ(t.d_emb, 128);
  EXPECT_EQ(t.d_ff, 512);
  EXPECT_DOUBLE_EQ(t.dropout, 0.1);
  const auto p = ModelConfig::preset("full");
  EXPECT_EQ(p.layers, 12);
  EXPECT_EQ(p.heads, 16);
  EXPECT_EQ(p.d_emb, 1024);
  EXPECT_EQ(p.d_ff, 4096);
  EXPECT_THROW(ModelConfig::preset("huge"), InvalidArgument);
  ModelConfig bad = t;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  const nn::Adam<float> adam;
  EXPECT_DOUBLE_EQ(adam.lr, 1e-4);
  EXPECT_DOUBLE_EQ(adam.beta1, 0.9);
  EXPECT_DOUBLE_EQ(adam.beta2, 0.999);
  EXPECT_EQ(TrainOptions{}.batch_size, 8);
}
