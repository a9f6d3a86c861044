#pragma once

// Autoregressive generation of delayed audio tokens with nucleus sampling and
// classifier-free guidance (every step, or only at the first note onset).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tokensynth/codec.hpp"
#include "tokensynth/error.hpp"
#include "tokensynth/midi_tok.hpp"
#include "tokensynth/model.hpp"
#include "tokensynth/timbre.hpp"

namespace tokensynth {

struct SamplerConfig {
  double top_p = 0.95;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_frames = 0;  // 0: derive from the clip length

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
    if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
    if (max_frames < 0) throw InvalidArgument("max_frames must be non-negative");
  }
};

enum class GuidanceMode { none, all_steps, first_note };

inline GuidanceMode parse_guidance(const std::string& s) {
  if (s == "none") return GuidanceMode::none;
  if (s == "all") return GuidanceMode::all_steps;
  if (s == "first-note") return GuidanceMode::first_note;
  throw InvalidArgument("unknown guidance mode: " + s + " (expected none|all|first-note)");
}

struct GuidanceConfig {
  double gamma = 1.0;
  GuidanceMode mode = GuidanceMode::none;
  std::string uncond_checkpoint;

  void validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("gamma must be finite and >= 0");
  }
};

// Uniform double in [0, 1) from the top 53 bits; stable across platforms.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Smallest prefix of ids (descending probability, lower id first on ties)
// whose cumulative mass reaches p, with renormalized probabilities.
inline std::vector<std::pair<int, double>> nucleus(std::span<const float> logits, double p,
                                                   double temperature = 1.0) {
  if (logits.empty()) throw InvalidArgument("empty logits");
  if (!(p > 0.0 && p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  const std::size_t n = logits.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) {
    if (std::isnan(v)) throw NumericError("NaN logit");
    mx = std::max(mx, static_cast<double>(v) / temperature);
  }
  std::vector<double> prob(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += prob[i] = std::exp(logits[i] / temperature - mx);
  for (auto& v : prob) v /= z;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return prob[a] > prob[b]; });
  std::vector<std::pair<int, double>> kept;
  double mass = 0.0;
  for (int id : order) {
    kept.emplace_back(id, prob[id]);
    mass += prob[id];
    if (mass >= p) break;
  }
  for (auto& [id, q] : kept) q /= mass;
  return kept;
}

inline int top_p_filter(std::span<const float> logits, double p, double temperature, std::mt19937_64& rng) {
  const auto kept = nucleus(logits, p, temperature);
  const double u = uniform01(rng);
  double acc = 0.0;
  for (const auto& [id, q] : kept) {
    acc += q;
    if (u < acc) return id;
  }
  return kept.back().first;
}

// uncond + gamma * (cond - uncond), evaluated as gamma*cond + (1-gamma)*uncond
// so gamma = 1 and gamma = 0 reproduce their inputs exactly.
inline std::vector<float> cfg_combine(std::span<const float> cond, std::span<const float> uncond, double gamma) {
  if (cond.size() != uncond.size()) throw InvalidArgument("guidance logit shapes differ");
  std::vector<float> out(cond.size());
  for (std::size_t i = 0; i < cond.size(); ++i) {
    out[i] = static_cast<float>(gamma * cond[i] + (1.0 - gamma) * uncond[i]);
  }
  return out;
}

// Frame of the earliest onset: floor(onset_seconds * frame_rate), computed in
// integers. In the delayed layout this is also the row where codebook 1 of
// that frame is predicted.
inline int first_note_frame(const NoteSequence& seq, const FrameSpec& spec) {
  if (seq.notes.empty()) throw InvalidArgument("first_note_frame needs at least one note");
  int first = seq.notes.front().onset_ticks;
  for (const auto& n : seq.notes) first = std::min(first, n.onset_ticks);
  const long long num = static_cast<long long>(first) * spec.sample_rate;
  const long long den = static_cast<long long>(kTicksPerSecond) * spec.hop;
  return static_cast<int>(num / den);
}

struct GuidedStepTrace {
  int row = 0;
  std::vector<float> cond, uncond, guided;
};

struct GenerateOptions {
  // Called for every guided step with the logits involved.
  std::function<void(const GuidedStepTrace&)> on_guided_step;
};

struct GenerateResult {
  AudioTokens tokens;  // aligned
  std::vector<int> guided_rows;
};

inline GenerateResult generate(const Transformer<float>& cond_model, const Transformer<float>* uncond_model,
                               const TimbreEmbedding& timbre, const NoteSequence& notes,
                               const FrameSpec& spec, const SamplerConfig& scfg, const GuidanceConfig& gcfg,
                               const GenerateOptions& opts = {}) {
  scfg.validate();
  gcfg.validate();
  const ModelConfig& cc = cond_model.config();
  if (cc.mode != ModelMode::conditional) throw IncompatibleError("generation needs a conditional checkpoint");
  const bool guided = gcfg.mode != GuidanceMode::none;
  if (guided) {
    if (!uncond_model) throw InvalidArgument("guidance requires an unconditional model");
    const ModelConfig& uc = uncond_model->config();
    if (uc.mode != ModelMode::unconditional) throw IncompatibleError("guidance checkpoint is not unconditional");
    if (uc.depth != cc.depth || uc.codebook_size != cc.codebook_size) {
      throw IncompatibleError("conditional and unconditional vocabularies differ");
    }
  }
  notes.validate();
  int frames = spec.frames_for_seconds(notes.clip_ticks * kTickSeconds);
  if (scfg.max_frames > 0) frames = std::min(frames, scfg.max_frames);
  const int depth = cc.depth;
  const int rows = frames + depth - 1;
  int guide_row = -1;
  if (gcfg.mode == GuidanceMode::first_note) {
    guide_row = first_note_frame(notes, spec);
    if (guide_row >= rows) throw InvalidArgument("first-note step lies beyond the generated sequence");
  }

  const MidiVocab vocab;
  const MidiTokenSeq midi = tokenize(notes, vocab);
  ModelSequence ctx;
  ctx.mode = ModelMode::conditional;
  ctx.timbre = timbre.vector;
  ctx.audio = AudioTokens::zeros(frames, depth, TokenLayout::delayed);
  if (timbre.dim() != static_cast<std::size_t>(cc.d_clap)) {
    throw IncompatibleError("timbre embedding dimension does not match checkpoint");
  }
  const int prefix = 1 + static_cast<int>(midi.size()) + 1;
  if (prefix + rows - 1 > cc.max_seq) throw InvalidArgument("sequence exceeds the model's max_seq");

  typename Transformer<float>::Session cond(cond_model);
  cond.append({StepKind::timbre, 0, -1}, ctx);
  for (int id : midi.tokens) cond.append({StepKind::token, id, -1}, ctx);
  auto cond_logits = cond.append({StepKind::token, vocab.bos_audio, -1}, ctx);

  std::optional<typename Transformer<float>::Session> uncond;
  nn::RowVec<float> uncond_logits;
  if (guided) {
    uncond.emplace(*uncond_model);
    uncond_logits = uncond->append({StepKind::token, vocab.bos_audio, -1}, ctx);
  }

  std::mt19937_64 rng(scfg.seed);
  GenerateResult result;
  const int k = cc.codebook_size;
  for (int r = 0; r < rows; ++r) {
    const bool guide_here = gcfg.mode == GuidanceMode::all_steps || r == guide_row;
    std::vector<float> logits(cond_logits.data(), cond_logits.data() + cond_logits.size());
    if (guide_here) {
      std::span<const float> u(uncond_logits.data(), static_cast<std::size_t>(uncond_logits.size()));
      std::vector<float> g = cfg_combine(logits, u, gcfg.gamma);
      if (opts.on_guided_step) opts.on_guided_step({r, logits, std::vector<float>(u.begin(), u.end()), g});
      logits = std::move(g);
      result.guided_rows.push_back(r);
    }
    for (int d = 0; d < depth; ++d) {
      if (!AudioTokens::delayed_cell_live(r, d, frames)) continue;
      const std::span<const float> head(logits.data() + static_cast<std::size_t>(d) * k, k);
      ctx.audio.at(r, d) = top_p_filter(head, scfg.top_p, scfg.temperature, rng) + 1;
    }
    if (r + 1 < rows) {
      cond_logits = cond.append({StepKind::audio, 0, r}, ctx);
      // After the first-note step the unconditional stream is no longer needed.
      if (uncond && gcfg.mode == GuidanceMode::first_note && r >= guide_row) uncond.reset();
      if (uncond) uncond_logits = uncond->append({StepKind::audio, 0, r}, ctx);
    }
  }
  result.tokens = delay_undo(ctx.audio);
  return result;
}

}  // namespace tokensynth
