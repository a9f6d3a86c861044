#pragma once

// Decoder-only transformer over mixed timbre / MIDI / multi-codebook audio
// sequences, with D parallel audio heads or a single MIDI head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tokensynth/codec.hpp"
#include "tokensynth/error.hpp"
#include "tokensynth/io.hpp"
#include "tokensynth/midi_tok.hpp"
#include "tokensynth/nn.hpp"
#include "tokensynth/timbre.hpp"

namespace tokensynth {

enum class ModelMode : std::uint8_t { conditional = 0, unconditional = 1, transcription = 2 };

inline std::string to_string(ModelMode m) {
  switch (m) {
    case ModelMode::conditional: return "cond";
    case ModelMode::unconditional: return "uncond";
    case ModelMode::transcription: return "transcribe";
  }
  return "?";
}

inline ModelMode parse_mode(const std::string& s) {
  if (s == "cond" || s == "conditional") return ModelMode::conditional;
  if (s == "uncond" || s == "unconditional") return ModelMode::unconditional;
  if (s == "transcribe" || s == "transcription") return ModelMode::transcription;
  throw InvalidArgument("unknown model mode: " + s);
}

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int d_emb = 128;
  int d_ff = 512;
  double dropout = 0.1;
  int depth = 4;            // D
  int codebook_size = 256;  // K_a
  int midi_vocab = MidiVocab{}.size();
  ModelMode mode = ModelMode::conditional;
  int max_seq = 512;
  int d_clap = SpectralFeaturizer::kDim;
  // Extra learned embedding indexed by audio row (frame time), with onset and
  // offset token embeddings initialized on the same time code.
  bool frame_embedding = true;

  static ModelConfig toy() { return {}; }
  static ModelConfig full() {
    ModelConfig c;
    c.layers = 12;
    c.heads = 16;
    c.d_emb = 1024;
    c.d_ff = 4096;
    c.dropout = 0.1;
    c.max_seq = 2048;
    c.d_clap = 512;
    return c;
  }
  static ModelConfig preset(const std::string& name) {
    if (name == "toy") return toy();
    if (name == "full") return full();
    throw InvalidArgument("unknown model preset: " + name);
  }

  int head_dim() const { return d_emb / heads; }

  void validate() const {
    if (layers < 1 || heads < 1 || d_emb < 1 || d_ff < 1 || max_seq < 2) {
      throw InvalidArgument("model dimensions must be positive");
    }
    if (d_emb % heads != 0) throw InvalidArgument("d_emb must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("dropout must be in [0, 1)");
    if (depth < 1 || codebook_size < 2) throw InvalidArgument("audio vocabulary must be non-trivial");
    if (midi_vocab != MidiVocab{}.size()) throw IncompatibleError("MIDI vocabulary size mismatch");
    if (mode == ModelMode::conditional && d_clap < 1) throw InvalidArgument("d_clap must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class StepKind : std::uint8_t { timbre, token, audio };

struct Step {
  StepKind kind = StepKind::token;
  int token = 0;  // MIDI-vocabulary id for token steps
  int row = -1;   // row of the delayed grid for audio steps
};

// Span positions in a built sequence.
struct SequenceLayout {
  int timbre_pos = -1;
  int midi_begin = -1;
  int midi_len = 0;
  int bos_pos = -1;  // BOS_AUDIO, or BOS_MIDI in transcription mode
  int audio_begin = -1;
  int audio_rows = 0;
  int predict_begin = 0;  // first position whose output is scored
  int predict_count = 0;
  int length = 0;
};

struct ModelSequence {
  ModelMode mode = ModelMode::conditional;
  std::vector<Step> steps;
  std::vector<float> timbre;  // raw embedding, conditional mode only
  AudioTokens audio;          // delayed layout
  std::vector<int> midi;      // MIDI ids in the sequence (targets in transcription)
  SequenceLayout layout;
};

// CONDITIONAL:   [timbre][MIDI ...][BOS_AUDIO][audio rows ...]
// UNCONDITIONAL: [BOS_AUDIO][audio rows ...]
// TRANSCRIPTION: [audio rows ...][BOS_MIDI][MIDI ...]
inline ModelSequence build_sequence(const ModelConfig& cfg, const TimbreEmbedding* timbre,
                                    const MidiTokenSeq* midi, const AudioTokens& audio,
                                    const MidiVocab& vocab = MidiVocab{}) {
  if (audio.layout != TokenLayout::delayed) throw InvalidArgument("build_sequence expects delayed audio tokens");
  if (audio.depth != cfg.depth) throw IncompatibleError("audio depth does not match model depth");
  ModelSequence s;
  s.mode = cfg.mode;
  s.audio = audio;
  auto& L = s.layout;
  auto push_audio = [&] {
    L.audio_begin = static_cast<int>(s.steps.size());
    L.audio_rows = audio.rows();
    for (int r = 0; r < audio.rows(); ++r) s.steps.push_back({StepKind::audio, 0, r});
  };
  auto push_midi = [&] {
    L.midi_begin = static_cast<int>(s.steps.size());
    L.midi_len = static_cast<int>(midi->tokens.size());
    for (int id : midi->tokens) {
      if (vocab.is_special(id) || id < 0 || id >= vocab.size()) {
        throw InvalidArgument("MIDI sequence contains a special or out-of-range id");
      }
      s.steps.push_back({StepKind::token, id, -1});
    }
    s.midi = midi->tokens;
  };
  switch (cfg.mode) {
    case ModelMode::conditional:
      if (!timbre) throw InvalidArgument("conditional model requires a timbre embedding");
      if (!midi) throw InvalidArgument("conditional model requires MIDI tokens");
      if (timbre->dim() != static_cast<std::size_t>(cfg.d_clap)) {
        throw IncompatibleError("timbre embedding dimension does not match model d_clap");
      }
      s.timbre = timbre->vector;
      L.timbre_pos = 0;
      s.steps.push_back({StepKind::timbre, 0, -1});
      push_midi();
      L.bos_pos = static_cast<int>(s.steps.size());
      s.steps.push_back({StepKind::token, vocab.bos_audio, -1});
      push_audio();
      L.predict_begin = L.bos_pos;
      L.predict_count = audio.rows();
      break;
    case ModelMode::unconditional:
      if (timbre || midi) throw InvalidArgument("unconditional model takes no timbre or MIDI conditioning");
      L.bos_pos = 0;
      s.steps.push_back({StepKind::token, vocab.bos_audio, -1});
      push_audio();
      L.predict_begin = 0;
      L.predict_count = audio.rows();
      break;
    case ModelMode::transcription:
      if (timbre) throw InvalidArgument("transcription model takes no timbre embedding");
      if (!midi) throw InvalidArgument("transcription model requires a MIDI target span");
      push_audio();
      L.bos_pos = static_cast<int>(s.steps.size());
      s.steps.push_back({StepKind::token, vocab.bos_midi, -1});
      push_midi();
      L.predict_begin = L.bos_pos;
      L.predict_count = L.midi_len + 1;  // last MIDI token predicts EOS_MIDI
      break;
  }
  L.length = static_cast<int>(s.steps.size());
  return s;
}

// Target classes per scored position and head; -1 marks masked cells.
struct Targets {
  int heads = 1;
  int classes = 0;
  std::vector<int> ids;  // predict_count x heads

  long count() const { return std::count_if(ids.begin(), ids.end(), [](int v) { return v >= 0; }); }
};

inline Targets targets_for(const ModelConfig& cfg, const ModelSequence& s,
                           const MidiVocab& vocab = MidiVocab{}) {
  Targets t;
  if (cfg.mode == ModelMode::transcription) {
    t.heads = 1;
    t.classes = cfg.midi_vocab;
    for (int id : s.midi) t.ids.push_back(id);
    t.ids.push_back(vocab.eos_midi);
    return t;
  }
  t.heads = cfg.depth;
  t.classes = cfg.codebook_size;
  t.ids.resize(static_cast<std::size_t>(s.audio.rows()) * cfg.depth);
  for (int r = 0; r < s.audio.rows(); ++r) {
    for (int d = 0; d < cfg.depth; ++d) {
      const int id = s.audio.at(r, d);
      t.ids[static_cast<std::size_t>(r) * cfg.depth + d] = id == kAudioPad ? -1 : id - 1;
    }
  }
  return t;
}

struct LossValue {
  double sum = 0.0;
  double mean = 0.0;
  long count = 0;
};

// Sum over scored cells of -log softmax(logits)[target]. `logits` holds
// `heads` blocks of `classes` columns per row. If `dlogits` is given it
// receives d(sum)/d(logits) * grad_scale.
template <class T>
LossValue masked_cross_entropy(const nn::Mat<T>& logits, const Targets& targets,
                               nn::Mat<T>* dlogits = nullptr, double grad_scale = 1.0) {
  const Eigen::Index rows = logits.rows();
  if (logits.cols() != static_cast<Eigen::Index>(targets.heads) * targets.classes ||
      targets.ids.size() != static_cast<std::size_t>(rows) * targets.heads) {
    throw InvalidArgument("logit and target shapes disagree");
  }
  LossValue lv;
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (int h = 0; h < targets.heads; ++h) {
      const int target = targets.ids[static_cast<std::size_t>(r) * targets.heads + h];
      if (target < 0) continue;
      if (target >= targets.classes) throw InvalidArgument("target id out of range");
      const auto row = logits.row(r).segment(static_cast<Eigen::Index>(h) * targets.classes, targets.classes);
      const T mx = row.maxCoeff();
      const T z = (row.array() - mx).exp().sum();
      const T lse = mx + std::log(z);
      lv.sum += static_cast<double>(lse - row[target]);
      ++lv.count;
      if (dlogits) {
        auto g = dlogits->row(r).segment(static_cast<Eigen::Index>(h) * targets.classes, targets.classes);
        g = ((row.array() - lse).exp() * static_cast<T>(grad_scale)).matrix();
        g[target] -= static_cast<T>(grad_scale);
      }
    }
  }
  if (lv.count == 0) throw InvalidArgument("loss mask is empty");
  lv.mean = lv.sum / static_cast<double>(lv.count);
  return lv;
}

// Total cross-entropy over all codebooks of a delayed grid; PAD cells are
// masked out.
template <class T>
LossValue loss_eq1(const nn::Mat<T>& logits, const AudioTokens& delayed, int codebook_size,
                   nn::Mat<T>* dlogits = nullptr) {
  if (delayed.layout != TokenLayout::delayed) throw InvalidArgument("loss expects delayed targets");
  if (logits.rows() != delayed.rows()) throw InvalidArgument("logit rows do not match target rows");
  Targets t;
  t.heads = delayed.depth;
  t.classes = codebook_size;
  t.ids.resize(delayed.grid.size());
  for (std::size_t i = 0; i < delayed.grid.size(); ++i) {
    t.ids[i] = delayed.grid[i] == kAudioPad ? -1 : delayed.grid[i] - 1;
  }
  return masked_cross_entropy(logits, t, dlogits);
}

template <class T>
class Transformer {
 public:
  using Mat = nn::Mat<T>;
  using RowVec = nn::RowVec<T>;

  struct Block {
    nn::LayerNorm<T> ln1;
    nn::Linear<T> qkv;
    nn::Linear<T> proj;
    nn::LayerNorm<T> ln2;
    nn::Linear<T> fc1;
    nn::Linear<T> fc2;
  };

  struct BlockCache {
    typename nn::LayerNorm<T>::Cache ln1, ln2;
    Mat x_in, a_in, qkv, attn, h, f_in, f_pre, f_act, drop_attn, drop_ffn;
    std::vector<Mat> probs;
  };

  struct Workspace {
    const ModelSequence* seq = nullptr;
    typename ProjectionHead<T>::Cache proj;
    Mat emb_drop;
    std::vector<BlockCache> blocks;
    typename nn::LayerNorm<T>::Cache lnf;
    Mat final_hidden;  // predicted positions only, after the final norm
  };

  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;

  explicit Transformer(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d_emb;
    midi_emb_ = &params_.add("midi_emb", cfg_.midi_vocab, d);
    for (int k = 0; k < cfg_.depth; ++k) {
      audio_emb_.push_back(&params_.add("audio_emb." + std::to_string(k), cfg_.codebook_size + 1, d));
    }
    pos_emb_ = &params_.add("pos_emb", cfg_.max_seq, d);
    if (cfg_.frame_embedding) frame_emb_ = &params_.add("frame_emb", cfg_.max_seq, d);
    if (cfg_.mode == ModelMode::conditional) proj_ = ProjectionHead<T>(params_, cfg_.d_clap, d);
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "block." + std::to_string(l);
      blocks_.push_back({nn::LayerNorm<T>(params_, p + ".ln1", d), nn::Linear<T>(params_, p + ".qkv", d, 3 * d),
                         nn::Linear<T>(params_, p + ".proj", d, d), nn::LayerNorm<T>(params_, p + ".ln2", d),
                         nn::Linear<T>(params_, p + ".fc1", d, cfg_.d_ff),
                         nn::Linear<T>(params_, p + ".fc2", cfg_.d_ff, d)});
    }
    lnf_ = nn::LayerNorm<T>(params_, "ln_f", d);
    if (cfg_.mode == ModelMode::transcription) {
      head_ = nn::Linear<T>(params_, "head.midi", d, cfg_.midi_vocab);
    } else {
      head_ = nn::Linear<T>(params_, "head.audio", d, static_cast<Eigen::Index>(cfg_.depth) * cfg_.codebook_size);
    }
    initialize(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  int head_count() const { return cfg_.mode == ModelMode::transcription ? 1 : cfg_.depth; }
  int head_classes() const {
    return cfg_.mode == ModelMode::transcription ? cfg_.midi_vocab : cfg_.codebook_size;
  }

  // Logits for the scored span (layout.predict_count rows, heads*classes
  // columns). Dropout is active iff `dropout_rng` is given.
  Mat forward(const ModelSequence& s, Workspace* ws = nullptr, std::mt19937_64* dropout_rng = nullptr) const {
    if (s.mode != cfg_.mode) throw IncompatibleError("sequence mode does not match model mode");
    const Mat h = hidden_states(s, ws, dropout_rng);
    const int begin = s.layout.predict_begin, count = s.layout.predict_count;
    Mat normed = lnf_.forward(h.middleRows(begin, count), ws ? &ws->lnf : nullptr);
    Mat logits = head_.forward(normed);
    if (ws) ws->final_hidden = std::move(normed);
    return logits;
  }

  // Accumulates parameter gradients for d(loss)/d(logits).
  void backward(const Workspace& ws, const Mat& dlogits) {
    const ModelSequence& s = *ws.seq;
    const int T_len = s.layout.length;
    Mat dnormed = head_.backward(ws.final_hidden, dlogits);
    Mat dh = Mat::Zero(T_len, cfg_.d_emb);
    dh.middleRows(s.layout.predict_begin, s.layout.predict_count) = lnf_.backward(ws.lnf, dnormed);
    for (int l = cfg_.layers - 1; l >= 0; --l) dh = block_backward(blocks_[l], ws.blocks[l], dh);
    dh = nn::Dropout<T>::backward(ws.emb_drop, dh);
    embed_backward(s, ws, dh);
  }

  // Incremental decoding with per-layer key/value caches (eval mode).
  class Session {
   public:
    explicit Session(const Transformer& model) : m_(model) {
      const int d = m_.cfg_.d_emb;
      keys_.assign(m_.cfg_.layers, Mat(m_.cfg_.max_seq, d));
      values_.assign(m_.cfg_.layers, Mat(m_.cfg_.max_seq, d));
    }

    int length() const { return len_; }

    // Appends one step and returns the logits row (heads*classes) at it.
    RowVec append(const Step& step, const ModelSequence& context) {
      if (len_ >= m_.cfg_.max_seq) throw InvalidArgument("sequence exceeds max_seq");
      RowVec x = m_.embed_step(step, context, len_);
      const int d = m_.cfg_.d_emb, dh = m_.cfg_.head_dim();
      const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
      for (int l = 0; l < m_.cfg_.layers; ++l) {
        const Block& b = m_.blocks_[l];
        const Mat a = b.ln1.forward(x, nullptr);
        const Mat qkv = b.qkv.forward(a);
        keys_[l].row(len_) = qkv.block(0, d, 1, d);
        values_[l].row(len_) = qkv.block(0, 2 * d, 1, d);
        Mat attn(1, d);
        for (int h = 0; h < m_.cfg_.heads; ++h) {
          const auto q = qkv.block(0, h * dh, 1, dh);
          const auto K = keys_[l].block(0, h * dh, len_ + 1, dh);
          const auto V = values_[l].block(0, h * dh, len_ + 1, dh);
          RowVec sc = (q * K.transpose()) * scale;
          const T mx = sc.maxCoeff();
          sc = (sc.array() - mx).exp().matrix();
          sc /= sc.sum();
          attn.block(0, h * dh, 1, dh) = sc * V;
        }
        x = x + b.proj.forward(attn);
        const Mat f = b.fc2.forward(nn::Gelu<T>::forward(b.fc1.forward(b.ln2.forward(x, nullptr))));
        x = x + f;
      }
      ++len_;
      return m_.head_.forward(m_.lnf_.forward(x, nullptr));
    }

   private:
    const Transformer& m_;
    std::vector<Mat> keys_, values_;
    int len_ = 0;
  };

  RowVec embed_step(const Step& step, const ModelSequence& s, int position) const {
    RowVec x;
    switch (step.kind) {
      case StepKind::timbre: {
        Mat e(1, cfg_.d_clap);
        for (int i = 0; i < cfg_.d_clap; ++i) e(0, i) = static_cast<T>(s.timbre.at(i));
        x = proj_.forward(e, nullptr);
        break;
      }
      case StepKind::token:
        x = midi_emb_->value.row(step.token);
        break;
      case StepKind::audio:
        x = RowVec::Zero(cfg_.d_emb);
        for (int k = 0; k < cfg_.depth; ++k) x += audio_emb_[k]->value.row(s.audio.at(step.row, k));
        if (frame_emb_) x += frame_emb_->value.row(step.row);
        break;
    }
    return x + pos_emb_->value.row(position);
  }

 private:
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double resid_std = 0.02 / std::sqrt(2.0 * cfg_.layers);
    for (auto& p : params_) {
      if (p.name.ends_with(".bias") || p.name.ends_with(".shift")) continue;
      if (p.name.ends_with(".gain")) continue;
      const bool resid = p.name.ends_with(".proj.weight") || p.name.ends_with(".fc2.weight");
      nn::init_normal(p.value, resid ? resid_std : 0.02, rng);
    }
    if (frame_emb_) {
      // Onset/offset ticks share the frame-time code of the row they land on.
      const MidiVocab vocab;
      const double frames_per_tick = 0.5;
      constexpr double kAmp = 0.03;
      for (int r = 0; r < cfg_.max_seq; ++r) {
        frame_emb_->value.row(r) = nn::sinusoid<T>(r, cfg_.d_emb, kAmp);
      }
      for (int tick = 0; tick < kClipTicks; ++tick) {
        const RowVec code = nn::sinusoid<T>(tick * frames_per_tick, cfg_.d_emb, kAmp);
        midi_emb_->value.row(vocab.onset.first + tick) += code;
        midi_emb_->value.row(vocab.offset.first + tick) += code;
      }
    }
  }

  Mat hidden_states(const ModelSequence& s, Workspace* ws, std::mt19937_64* rng) const {
    const int T_len = s.layout.length;
    if (T_len > cfg_.max_seq) {
      throw InvalidArgument("sequence length " + std::to_string(T_len) + " exceeds max_seq " +
                            std::to_string(cfg_.max_seq));
    }
    if (static_cast<int>(s.steps.size()) != T_len) throw InvalidArgument("sequence layout is inconsistent");
    Mat x(T_len, cfg_.d_emb);
    for (int t = 0; t < T_len; ++t) {
      const Step& st = s.steps[t];
      if (st.kind == StepKind::timbre) {
        Mat e(1, cfg_.d_clap);
        for (int i = 0; i < cfg_.d_clap; ++i) e(0, i) = static_cast<T>(s.timbre.at(i));
        x.row(t) = proj_.forward(e, ws ? &ws->proj : nullptr).row(0) + pos_emb_->value.row(t);
      } else {
        x.row(t) = embed_step(st, s, t);
      }
    }
    if (ws) {
      ws->seq = &s;
      ws->blocks.resize(cfg_.layers);
    }
    x = nn::Dropout<T>::forward(x, cfg_.dropout, rng, ws ? &ws->emb_drop : nullptr);
    for (int l = 0; l < cfg_.layers; ++l) x = block_forward(blocks_[l], x, ws ? &ws->blocks[l] : nullptr, rng);
    return x;
  }

  Mat block_forward(const Block& b, const Mat& x, BlockCache* c, std::mt19937_64* rng) const {
    const int T_len = static_cast<int>(x.rows());
    const int d = cfg_.d_emb, dh = cfg_.head_dim();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    typename nn::LayerNorm<T>::Cache ln1c;
    Mat a = b.ln1.forward(x, &ln1c);
    Mat qkv = b.qkv.forward(a);
    Mat attn(T_len, d);
    std::vector<Mat> probs(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h) {
      const auto Q = qkv.middleCols(h * dh, dh);
      const auto K = qkv.middleCols(d + h * dh, dh);
      const auto V = qkv.middleCols(2 * d + h * dh, dh);
      Mat P = (Q * K.transpose()) * scale;
      for (int i = 0; i < T_len; ++i) {
        const T mx = P.row(i).head(i + 1).maxCoeff();
        auto live = P.row(i).head(i + 1);
        live = (live.array() - mx).exp().matrix();
        live /= live.sum();
        if (i + 1 < T_len) P.row(i).tail(T_len - i - 1).setZero();
      }
      attn.middleCols(h * dh, dh).noalias() = P * V;
      probs[h] = std::move(P);
    }
    Mat drop_attn, drop_ffn;
    Mat h = x + nn::Dropout<T>::forward(b.proj.forward(attn), cfg_.dropout, rng, &drop_attn);
    typename nn::LayerNorm<T>::Cache ln2c;
    Mat f_in = b.ln2.forward(h, &ln2c);
    Mat f_pre = b.fc1.forward(f_in);
    Mat f_act = nn::Gelu<T>::forward(f_pre);
    Mat y = h + nn::Dropout<T>::forward(b.fc2.forward(f_act), cfg_.dropout, rng, &drop_ffn);
    if (c) {
      c->x_in = x;
      c->ln1 = std::move(ln1c);
      c->a_in = std::move(a);
      c->qkv = std::move(qkv);
      c->probs = std::move(probs);
      c->attn = std::move(attn);
      c->drop_attn = std::move(drop_attn);
      c->h = std::move(h);
      c->ln2 = std::move(ln2c);
      c->f_in = std::move(f_in);
      c->f_pre = std::move(f_pre);
      c->f_act = std::move(f_act);
      c->drop_ffn = std::move(drop_ffn);
    }
    return y;
  }

  Mat block_backward(const Block& b, const BlockCache& c, const Mat& dy) const {
    const int d = cfg_.d_emb, dh = cfg_.head_dim();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    // FFN branch.
    Mat dff = nn::Dropout<T>::backward(c.drop_ffn, dy);
    Mat dact = b.fc2.backward(c.f_act, dff);
    Mat dpre = nn::Gelu<T>::backward(c.f_pre, dact);
    Mat dfin = b.fc1.backward(c.f_in, dpre);
    Mat dh_res = dy + b.ln2.backward(c.ln2, dfin);
    // Attention branch.
    Mat dproj = nn::Dropout<T>::backward(c.drop_attn, dh_res);
    Mat dattn = b.proj.backward(c.attn, dproj);
    Mat dqkv(c.qkv.rows(), c.qkv.cols());
    for (int h = 0; h < cfg_.heads; ++h) {
      const auto Q = c.qkv.middleCols(h * dh, dh);
      const auto K = c.qkv.middleCols(d + h * dh, dh);
      const auto V = c.qkv.middleCols(2 * d + h * dh, dh);
      const Mat& P = c.probs[h];
      const auto dO = dattn.middleCols(h * dh, dh);
      Mat dP = dO * V.transpose();
      dqkv.middleCols(2 * d + h * dh, dh).noalias() = P.transpose() * dO;
      const auto rowdot = (P.array() * dP.array()).rowwise().sum();
      Mat dS = (P.array() * (dP.array().colwise() - rowdot)).matrix() * scale;
      dqkv.middleCols(h * dh, dh).noalias() = dS * K;
      dqkv.middleCols(d + h * dh, dh).noalias() = dS.transpose() * Q;
    }
    Mat da = b.qkv.backward(c.a_in, dqkv);
    return dh_res + b.ln1.backward(c.ln1, da);
  }

  void embed_backward(const ModelSequence& s, const Workspace& ws, const Mat& dx) {
    for (int t = 0; t < s.layout.length; ++t) {
      const Step& st = s.steps[t];
      pos_emb_->grad.row(t) += dx.row(t);
      switch (st.kind) {
        case StepKind::timbre:
          proj_.backward(ws.proj, dx.row(t));
          break;
        case StepKind::token:
          midi_emb_->grad.row(st.token) += dx.row(t);
          break;
        case StepKind::audio:
          for (int k = 0; k < cfg_.depth; ++k) audio_emb_[k]->grad.row(s.audio.at(st.row, k)) += dx.row(t);
          if (frame_emb_) frame_emb_->grad.row(st.row) += dx.row(t);
          break;
      }
    }
  }

  ModelConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Param<T>* midi_emb_ = nullptr;
  std::vector<nn::Param<T>*> audio_emb_;
  nn::Param<T>* pos_emb_ = nullptr;
  nn::Param<T>* frame_emb_ = nullptr;
  ProjectionHead<T> proj_;
  std::vector<Block> blocks_;
  nn::LayerNorm<T> lnf_;
  nn::Linear<T> head_;
};

// One training example: target audio tokens (aligned), MIDI, optional timbre.
struct TrainingExample {
  std::optional<TimbreEmbedding> timbre;
  MidiTokenSeq midi;
  AudioTokens audio;  // aligned
};

inline ModelSequence sequence_for(const ModelConfig& cfg, const TrainingExample& ex) {
  const AudioTokens delayed = delay_apply(ex.audio);
  switch (cfg.mode) {
    case ModelMode::conditional:
      if (!ex.timbre) throw InvalidArgument("conditional training example lacks a timbre embedding");
      return build_sequence(cfg, &*ex.timbre, &ex.midi, delayed);
    case ModelMode::unconditional:
      return build_sequence(cfg, nullptr, nullptr, delayed);
    case ModelMode::transcription:
      return build_sequence(cfg, nullptr, &ex.midi, delayed);
  }
  throw InvalidArgument("bad mode");
}

struct StepStats {
  double loss = 0.0;  // mean per scored token over the batch
  long tokens = 0;
  double grad_norm = 0.0;
};

// One optimizer update on the mean per-token cross-entropy of the batch.
template <class T>
StepStats train_step(Transformer<T>& model, const std::vector<TrainingExample>& batch,
                     nn::Adam<T>& opt, std::mt19937_64& rng) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const ModelConfig& cfg = model.config();
  std::vector<ModelSequence> seqs;
  std::vector<Targets> targets;
  long total = 0;
  for (const auto& ex : batch) {
    seqs.push_back(sequence_for(cfg, ex));
    targets.push_back(targets_for(cfg, seqs.back()));
    total += targets.back().count();
  }
  if (total == 0) throw InvalidArgument("batch has no scored tokens");
  model.params().zero_grad();
  double sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    typename Transformer<T>::Workspace ws;
    const auto logits = model.forward(seqs[i], &ws, cfg.dropout > 0 ? &rng : nullptr);
    nn::Mat<T> dlogits;
    const LossValue lv = masked_cross_entropy(logits, targets[i], &dlogits, 1.0 / static_cast<double>(total));
    if (!std::isfinite(lv.sum)) {
      std::ostringstream msg;
      msg << "non-finite loss on batch item " << i << " (sequence length " << seqs[i].layout.length
          << ", step " << opt.step << ")";
      throw NumericError(msg.str());
    }
    sum += lv.sum;
    model.backward(ws, dlogits);
  }
  StepStats st;
  st.loss = sum / static_cast<double>(total);
  st.tokens = total;
  st.grad_norm = opt.update(model.params());
  return st;
}

// Mean per-token loss in eval mode.
template <class T>
double evaluate_loss(const Transformer<T>& model, const std::vector<TrainingExample>& examples) {
  double sum = 0.0;
  long count = 0;
  for (const auto& ex : examples) {
    const auto seq = sequence_for(model.config(), ex);
    const auto lv = masked_cross_entropy(model.forward(seq), targets_for(model.config(), seq));
    sum += lv.sum;
    count += lv.count;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

inline constexpr char kModelMagic[8] = {'T', 'S', 'M', 'O', 'D', 'E', 'L', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

struct Checkpoint {
  ModelConfig config;
  MidiVocab vocab;
  FrameSpec frame_spec;
  Transformer<float> model;

  // Throws if this checkpoint cannot consume/produce the given token layout.
  void require(ModelMode mode, int depth, int codebook_size) const {
    if (config.mode != mode) {
      throw IncompatibleError("checkpoint mode is " + to_string(config.mode) + ", expected " + to_string(mode));
    }
    if (config.depth != depth || config.codebook_size != codebook_size) {
      throw IncompatibleError("checkpoint audio vocabulary (D=" + std::to_string(config.depth) +
                              ", K_a=" + std::to_string(config.codebook_size) + ") does not match (D=" +
                              std::to_string(depth) + ", K_a=" + std::to_string(codebook_size) + ")");
    }
  }
};

inline void save_checkpoint(const Transformer<float>& model, const MidiVocab& vocab, const FrameSpec& spec,
                            const std::filesystem::path& path) {
  const ModelConfig& c = model.config();
  io::BinaryWriter w(path);
  w.bytes(kModelMagic, sizeof kModelMagic);
  w.u32(kModelVersion);
  for (int v : {c.layers, c.heads, c.d_emb, c.d_ff}) w.i32(v);
  w.f64(c.dropout);
  for (int v : {c.depth, c.codebook_size, c.midi_vocab, static_cast<int>(c.mode), c.max_seq, c.d_clap,
                c.frame_embedding ? 1 : 0}) {
    w.i32(v);
  }
  for (const IdSpan* s : {&vocab.onset, &vocab.offset, &vocab.pitch, &vocab.velocity}) {
    w.i32(s->first);
    w.i32(s->size);
  }
  for (int v : {vocab.pad, vocab.bos_midi, vocab.eos_midi, vocab.bos_audio}) w.i32(v);
  for (int v : {spec.sample_rate, spec.hop, spec.window, spec.mel_bins}) w.i32(v);
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rows()));
    w.u32(static_cast<std::uint32_t>(p.value.cols()));
    w.f32s(std::span<const float>(p.value.data(), static_cast<std::size_t>(p.value.size())));
  }
  w.close();
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kModelMagic, sizeof magic)) throw ParseError(0, path.string() + ": not a model checkpoint");
  if (const auto v = r.u32(); v != kModelVersion) {
    throw IncompatibleError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  }
  ModelConfig c;
  c.layers = r.i32();
  c.heads = r.i32();
  c.d_emb = r.i32();
  c.d_ff = r.i32();
  c.dropout = r.f64();
  c.depth = r.i32();
  c.codebook_size = r.i32();
  c.midi_vocab = r.i32();
  const int mode = r.i32();
  if (mode < 0 || mode > 2) throw ParseError(0, path.string() + ": bad mode field");
  c.mode = static_cast<ModelMode>(mode);
  c.max_seq = r.i32();
  c.d_clap = r.i32();
  c.frame_embedding = r.i32() != 0;
  MidiVocab vocab;
  for (IdSpan* s : {&vocab.onset, &vocab.offset, &vocab.pitch, &vocab.velocity}) {
    s->first = r.i32();
    s->size = r.i32();
  }
  vocab.pad = r.i32();
  vocab.bos_midi = r.i32();
  vocab.eos_midi = r.i32();
  vocab.bos_audio = r.i32();
  vocab.validate();
  FrameSpec spec;
  spec.sample_rate = r.i32();
  spec.hop = r.i32();
  spec.window = r.i32();
  spec.mel_bins = r.i32();
  spec.validate();
  constexpr int kMaxDim = 1 << 16;
  if (c.layers > 256 || c.d_emb > kMaxDim || c.d_ff > kMaxDim || c.max_seq > kMaxDim || c.d_clap > kMaxDim ||
      c.codebook_size > kMaxDim || c.depth > 64) {
    throw ParseError(0, path.string() + ": implausible model dimensions");
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw IncompatibleError(path.string() + ": " + e.what());
  }
  Transformer<float> model(c, 0);
  const std::uint32_t n = r.u32();
  if (n != model.params().size()) throw IncompatibleError(path.string() + ": parameter count mismatch");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    const std::uint32_t rows = r.u32(), cols = r.u32();
    auto* p = model.params().find(name);
    if (!p) throw IncompatibleError(path.string() + ": unknown parameter " + name);
    if (p->value.rows() != rows || p->value.cols() != cols) {
      throw IncompatibleError(path.string() + ": shape mismatch for " + name);
    }
    r.f32s(std::span<float>(p->value.data(), static_cast<std::size_t>(p->value.size())));
  }
  r.expect_end();
  return Checkpoint{c, vocab, spec, std::move(model)};
}

}  // namespace tokensynth
