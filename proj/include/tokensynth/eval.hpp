#pragma once

// Objective metrics: multi-scale spectral loss, embedding cosine score and
// note-level F-score through a transcription model.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokensynth/codec.hpp"
#include "tokensynth/dataset.hpp"
#include "tokensynth/dsp.hpp"
#include "tokensynth/error.hpp"
#include "tokensynth/midi_file.hpp"
#include "tokensynth/midi_tok.hpp"
#include "tokensynth/model.hpp"
#include "tokensynth/timbre.hpp"
#include "tokensynth/wav.hpp"

namespace tokensynth {

struct MssConfig {
  std::vector<int> fft_sizes = {2048, 1024, 512, 256, 128, 64};
  double overlap = 0.75;
  double eps = 1e-7;

  void validate() const {
    if (fft_sizes.empty()) throw InvalidArgument("mss needs at least one FFT size");
    for (int n : fft_sizes) {
      if (n < 2 || (n & (n - 1)) != 0) throw InvalidArgument("FFT sizes must be powers of two");
    }
    if (!(overlap >= 0.0 && overlap < 1.0)) throw InvalidArgument("overlap must be in [0, 1)");
    if (!(eps > 0.0)) throw InvalidArgument("eps must be positive");
  }
};

namespace eval_detail {

inline RowMatrixD stft_magnitude(std::span<const float> x, int n_fft, int hop) {
  const auto spec = dsp::stft(x, n_fft, hop);
  RowMatrixD mag(static_cast<Eigen::Index>(spec.size()), n_fft / 2 + 1);
  for (std::size_t f = 0; f < spec.size(); ++f) {
    for (int k = 0; k <= n_fft / 2; ++k) mag(static_cast<Eigen::Index>(f), k) = std::abs(spec[f][k]);
  }
  return mag;
}

}  // namespace eval_detail

// Sum over FFT sizes of mean |S_a - S_b| + mean |log(S_a + eps) - log(S_b + eps)|.
// The shorter input is zero-padded.
inline double mss_loss(std::span<const float> a, std::span<const float> b, const MssConfig& cfg = {}) {
  cfg.validate();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a[i])) throw NumericError("NaN in first input at sample " + std::to_string(i));
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (std::isnan(b[i])) throw NumericError("NaN in second input at sample " + std::to_string(i));
  }
  const std::size_t n = std::max(a.size(), b.size());
  std::vector<float> pa(a.begin(), a.end()), pb(b.begin(), b.end());
  pa.resize(n, 0.0f);
  pb.resize(n, 0.0f);
  if (n == 0) return 0.0;
  double total = 0.0;
  for (int fft : cfg.fft_sizes) {
    const int hop = std::max(1, static_cast<int>(std::lround(fft * (1.0 - cfg.overlap))));
    const auto sa = eval_detail::stft_magnitude(pa, fft, hop);
    const auto sb = eval_detail::stft_magnitude(pb, fft, hop);
    const double lin = (sa - sb).cwiseAbs().mean();
    const double lg = ((sa.array() + cfg.eps).log() - (sb.array() + cfg.eps).log()).abs().mean();
    total += lin + lg;
  }
  return total;
}

inline double clap_score(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw InvalidArgument("embedding dimensions differ");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw InvalidArgument("zero-norm embedding");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

inline double clap_score(const TimbreEmbedding& a, const TimbreEmbedding& b) { return clap_score(a.vector, b.vector); }

// ---------------------------------------------------------------------------
// Note matching

struct NoteMatchConfig {
  double onset_tol = 0.05;
  double offset_min_tol = 0.05;
  double offset_ratio = 0.2;
  bool use_offset = true;

  void validate() const {
    if (!(onset_tol > 0.0) || !(offset_min_tol > 0.0) || !(offset_ratio >= 0.0)) {
      throw InvalidArgument("note match tolerances must be positive");
    }
  }
};

struct MatchScore {
  double precision = 0.0;
  double recall = 0.0;
  double f_score = 0.0;
  int matches = 0;
};

inline bool notes_admissible(const NoteEvent& ref, const NoteEvent& est, const NoteMatchConfig& cfg) {
  // Ticks are 10 ms; a small slack absorbs binary rounding of the tolerance.
  constexpr double kSlack = 1e-9;
  if (ref.pitch != est.pitch) return false;
  const double donset = std::abs(ref.onset_ticks - est.onset_ticks) * kTickSeconds;
  if (donset > cfg.onset_tol + kSlack) return false;
  if (!cfg.use_offset) return true;
  const double dur = (ref.offset_ticks - ref.onset_ticks) * kTickSeconds;
  const double tol = std::max(cfg.offset_min_tol, cfg.offset_ratio * dur);
  return std::abs(ref.offset_ticks - est.offset_ticks) * kTickSeconds <= tol + kSlack;
}

inline MatchScore score_from_counts(int matches, std::size_t n_ref, std::size_t n_est) {
  MatchScore s;
  s.matches = matches;
  if (n_ref == 0 && n_est == 0) {
    s.precision = s.recall = s.f_score = 1.0;
    return s;
  }
  s.precision = n_est ? static_cast<double>(matches) / n_est : 0.0;
  s.recall = n_ref ? static_cast<double>(matches) / n_ref : 0.0;
  s.f_score = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

// Maximum bipartite matching via augmenting paths.
inline MatchScore match_notes(const NoteSequence& ref, const NoteSequence& est, const NoteMatchConfig& cfg = {}) {
  cfg.validate();
  const std::size_t nr = ref.notes.size(), ne = est.notes.size();
  std::vector<std::vector<int>> adj(nr);
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < ne; ++j) {
      if (notes_admissible(ref.notes[i], est.notes[j], cfg)) adj[i].push_back(static_cast<int>(j));
    }
  }
  std::vector<int> est_owner(ne, -1);
  std::vector<char> seen;
  std::function<bool(int)> augment = [&](int i) {
    for (int j : adj[i]) {
      if (seen[j]) continue;
      seen[j] = 1;
      if (est_owner[j] < 0 || augment(est_owner[j])) {
        est_owner[j] = i;
        return true;
      }
    }
    return false;
  };
  int matches = 0;
  for (std::size_t i = 0; i < nr; ++i) {
    seen.assign(ne, 0);
    if (augment(static_cast<int>(i))) ++matches;
  }
  return score_from_counts(matches, nr, ne);
}

// ---------------------------------------------------------------------------
// Transcription

struct TranscribeOptions {
  int max_tokens = 0;       // 0: fill up to max_seq
  bool constrain = true;    // restrict each argmax to the id span the grammar expects
};

struct Transcription {
  NoteSequence notes;
  int dropped_groups = 0;
  bool hit_budget = false;
  MidiTokenSeq tokens;
};

inline Transcription transcribe_tokens(const Transformer<float>& model, const AudioTokens& aligned,
                                       const TranscribeOptions& opt = {}) {
  const ModelConfig& cfg = model.config();
  if (cfg.mode != ModelMode::transcription) {
    throw IncompatibleError("transcribe needs a transcription checkpoint, got " + to_string(cfg.mode));
  }
  if (aligned.depth != cfg.depth) throw IncompatibleError("audio depth does not match the transcription model");
  const MidiVocab vocab;
  ModelSequence ctx;
  ctx.mode = ModelMode::transcription;
  ctx.audio = delay_apply(aligned);
  const int rows = ctx.audio.rows();
  if (rows + 1 >= cfg.max_seq) throw InvalidArgument("audio too long for the transcription model");
  int budget = cfg.max_seq - rows - 1;
  if (opt.max_tokens > 0) budget = std::min(budget, opt.max_tokens);

  Transformer<float>::Session session(model);
  for (int r = 0; r < rows; ++r) session.append({StepKind::audio, 0, r}, ctx);
  auto logits = session.append({StepKind::token, vocab.bos_midi, -1}, ctx);

  Transcription out;
  const IdSpan* spans[4] = {&vocab.onset, &vocab.offset, &vocab.pitch, &vocab.velocity};
  int last_onset = -1;
  for (int i = 0; i < budget; ++i) {
    const int slot = i % 4;
    int best = -1;
    float best_v = -std::numeric_limits<float>::infinity();
    auto consider = [&](int id) {
      if (logits[id] > best_v) {
        best_v = logits[id];
        best = id;
      }
    };
    if (opt.constrain) {
      if (slot == 0) consider(vocab.eos_midi);
      const IdSpan& s = *spans[slot];
      int lo = s.first, hi = s.first + s.size;
      // Onsets are non-decreasing in canonical order; offsets follow onsets.
      if (slot == 0) {
        if (last_onset >= 0) lo = s.first + last_onset;
        hi = s.first + kClipTicks - 1;
      }
      if (slot == 1) lo = s.first + last_onset + 1;
      for (int id = lo; id < hi; ++id) consider(id);
    } else {
      for (int id = 0; id < cfg.midi_vocab; ++id) consider(id);
    }
    if (best == vocab.eos_midi) break;
    if (slot == 0 && vocab.onset.contains(best)) last_onset = best - vocab.onset.first;
    out.tokens.tokens.push_back(best);
    if (i + 1 == budget) {
      out.hit_budget = true;
      break;
    }
    logits = session.append({StepKind::token, best, -1}, ctx);
  }
  const LenientDecode dec = detokenize_lenient(out.tokens, vocab);
  out.notes = dec.notes;
  out.dropped_groups = dec.dropped_groups;
  return out;
}

inline Transcription transcribe(const Transformer<float>& model, const RvqCodec& codec, std::span<const float> pcm,
                                const TranscribeOptions& opt = {}) {
  if (model.config().mode != ModelMode::transcription) {
    throw IncompatibleError("transcribe needs a transcription checkpoint, got " + to_string(model.config().mode));
  }
  if (codec.depth() != model.config().depth || codec.codebook_size() != model.config().codebook_size) {
    throw IncompatibleError("codec and transcription model vocabularies differ");
  }
  const MelAnalyzer analyzer(codec.frame_spec());
  return transcribe_tokens(model, codec.encode(analyzer.analyze(pcm)), opt);
}

// ---------------------------------------------------------------------------
// Run evaluation

// Output naming used by batch synthesis: {id}_{variant}_{condition}.wav with
// condition "ref" (timbre from the reference clip) or "tgt" (Ref=Tgt).
inline std::string output_name(const ManifestRow& row, const std::string& condition) {
  return row.id + "_" + row.variant + "_" + condition + ".wav";
}

inline const std::vector<std::string>& eval_conditions() {
  static const std::vector<std::string> c = {"tgt", "ref"};
  return c;
}

struct EvalRow {
  std::string id;
  std::string variant;
  std::string condition;
  double mss = 0.0;
  double clap = 0.0;
  std::optional<MatchScore> notes;
  int dropped_groups = 0;
};

struct EvalGroup {
  std::string name;
  int count = 0;
  double mss = 0.0;
  double clap = 0.0;
  double precision = 0.0, recall = 0.0, f_score = 0.0;
  int f_count = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::string> missing;
  std::vector<EvalGroup> groups;
};

struct EvalInputs {
  std::filesystem::path dataset_dir;
  std::filesystem::path outputs_dir;
  const SpectralFeaturizer* featurizer = nullptr;
  const Transformer<float>* transcriber = nullptr;
  const RvqCodec* codec = nullptr;
  MssConfig mss;
  NoteMatchConfig match;
};

inline std::vector<EvalGroup> aggregate(const std::vector<EvalRow>& rows) {
  std::map<std::string, EvalGroup> groups;
  auto add = [&](const std::string& name, const EvalRow& r) {
    EvalGroup& g = groups[name];
    g.name = name;
    ++g.count;
    g.mss += r.mss;
    g.clap += r.clap;
    if (r.notes) {
      ++g.f_count;
      g.precision += r.notes->precision;
      g.recall += r.notes->recall;
      g.f_score += r.notes->f_score;
    }
  };
  for (const auto& r : rows) {
    const std::string cond = r.condition == "tgt" ? "Ref=Tgt" : "Ref";
    add(cond + " " + r.variant, r);
    add("All", r);
  }
  std::vector<EvalGroup> out;
  for (const char* name : {"Ref=Tgt dry", "Ref=Tgt wet", "Ref dry", "Ref wet", "All"}) {
    auto it = groups.find(name);
    if (it == groups.end()) continue;
    EvalGroup g = it->second;
    g.mss /= g.count;
    g.clap /= g.count;
    if (g.f_count) {
      g.precision /= g.f_count;
      g.recall /= g.f_count;
      g.f_score /= g.f_count;
    }
    out.push_back(g);
  }
  return out;
}

// Rows are evaluated in id order. A manifest row counts as missing when none
// of its condition outputs exist; the report covers whatever was found.
inline EvalReport evaluate_run(std::vector<ManifestRow> manifest, const EvalInputs& in) {
  if (!in.featurizer) throw InvalidArgument("evaluation needs a timbre featurizer");
  if (in.transcriber && !in.codec) throw InvalidArgument("transcription scoring needs a codec");
  std::sort(manifest.begin(), manifest.end(), [](const ManifestRow& a, const ManifestRow& b) {
    return std::tie(a.id, a.variant) < std::tie(b.id, b.variant);
  });
  EvalReport report;
  for (const auto& row : manifest) {
    bool any = false;
    for (const auto& cond : eval_conditions()) {
      const auto out_path = in.outputs_dir / output_name(row, cond);
      if (!std::filesystem::exists(out_path)) continue;
      any = true;
      const Audio out = read_wav(out_path);
      const Audio tgt = read_wav(in.dataset_dir / row.target_wav);
      if (out.sample_rate != tgt.sample_rate) {
        throw IncompatibleError(out_path.string() + ": sample rate differs from the target");
      }
      EvalRow r;
      r.id = row.id;
      r.variant = row.variant;
      r.condition = cond;
      r.mss = mss_loss(out.samples, tgt.samples, in.mss);
      const auto e_out = in.featurizer->embed_audio(out.samples);
      const auto e_tgt = in.featurizer->embed_audio(tgt.samples);
      r.clap = clap_score(e_out, e_tgt);
      if (in.transcriber) {
        const NoteSequence ref_notes = read_midi_file(in.dataset_dir / row.target_midi);
        const Transcription t = transcribe(*in.transcriber, *in.codec, out.samples);
        r.notes = match_notes(ref_notes, t.notes, in.match);
        r.dropped_groups = t.dropped_groups;
      }
      report.rows.push_back(std::move(r));
    }
    if (!any) report.missing.push_back(row.id + " (" + row.variant + ")");
  }
  report.groups = aggregate(report.rows);
  return report;
}

inline std::string summary_table(const EvalReport& r) {
  std::ostringstream o;
  o << std::left << std::setw(14) << "Condition" << std::right << std::setw(6) << "n" << std::setw(12) << "MSS Loss"
    << std::setw(12) << "CLAP Score" << std::setw(10) << "F-Score" << "\n";
  o << std::fixed;
  for (const auto& g : r.groups) {
    o << std::left << std::setw(14) << g.name << std::right << std::setw(6) << g.count << std::setw(12)
      << std::setprecision(4) << g.mss << std::setw(12) << g.clap << std::setw(10);
    if (g.f_count) {
      o << g.f_score;
    } else {
      o << "-";
    }
    o << "\n";
  }
  if (!r.missing.empty()) o << "missing outputs: " << r.missing.size() << "\n";
  return o.str();
}

inline void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream rows(dir / "eval_rows.jsonl");
  if (!rows) throw IoError("cannot write report in " + dir.string());
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"id", row.id},   {"variant", row.variant}, {"condition", row.condition},
                        {"mss", row.mss}, {"clap", row.clap},       {"dropped_groups", row.dropped_groups}};
    if (row.notes) {
      j["precision"] = row.notes->precision;
      j["recall"] = row.notes->recall;
      j["f_score"] = row.notes->f_score;
    }
    rows << j.dump() << "\n";
  }
  for (const auto& m : r.missing) rows << nlohmann::json{{"missing", m}}.dump() << "\n";
  std::ofstream summary(dir / "summary.txt");
  summary << summary_table(r);
  if (!rows || !summary) throw IoError("report write failed in " + dir.string());
}

}  // namespace tokensynth
