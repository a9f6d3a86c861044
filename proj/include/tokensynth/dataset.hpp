#pragma once

// Procedural note-sample bank, clip rendering, effect-chain augmentation and
// paired (reference, target) dataset construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokensynth/error.hpp"
#include "tokensynth/midi_file.hpp"
#include "tokensynth/midi_tok.hpp"
#include "tokensynth/wav.hpp"

namespace tokensynth {

// splitmix64; used to derive independent per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline constexpr std::array<double, kNumVelocityBuckets> kVelocityGain = {0.25, 0.5, 0.75, 1.0};

// Additive-synthesis recipe for one procedural instrument.
struct InstrumentRecipe {
  int harmonics = 12;
  double rolloff = 1.0;       // harmonic k amplitude ~ k^-rolloff
  double even_gain = 1.0;     // extra gain on even harmonics
  double inharmonicity = 0.0;
  double decay_s = 1.0;       // fundamental amplitude time constant
  double brightness_decay = 0.0;  // higher harmonics decay faster by (1 + b*k)
  double attack_s = 0.01;
  double release_s = 0.1;
  double noise = 0.0;
  double vibrato_depth = 0.0;  // relative frequency deviation
  double vibrato_hz = 5.0;
  double formant_hz = 0.0;     // 0 disables the spectral bump
  double formant_gain = 0.0;
};

struct NoteSampleBank {
  int sample_rate = 16000;
  double sample_seconds = 2.5;
  std::vector<InstrumentRecipe> recipes;
  // instrument -> (pitch, velocity bucket) -> samples
  std::vector<std::map<std::pair<int, int>, std::vector<float>>> instruments;

  int size() const { return static_cast<int>(instruments.size()); }
};

inline constexpr int kCorpusPitchMin = 36;
inline constexpr int kCorpusPitchMax = 84;
inline constexpr int kBankPitchStep = 3;
inline constexpr int kMaxPitchShift = 6;

namespace dataset_detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

// Archetypes keep instruments audibly distinct: plucked, organ-like,
// reed-like (odd harmonics), soft/breathy.
inline InstrumentRecipe make_recipe(int index, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  InstrumentRecipe r;
  switch (index % 4) {
    case 0:  // plucked, bright, fast decay
      r.harmonics = 20;
      r.rolloff = uniform(rng, 0.8, 1.1);
      r.even_gain = 1.0;
      r.decay_s = uniform(rng, 0.35, 0.6);
      r.brightness_decay = uniform(rng, 0.15, 0.3);
      r.attack_s = 0.002;
      r.release_s = 0.05;
      r.inharmonicity = uniform(rng, 0.0002, 0.0008);
      break;
    case 1:  // organ: sustained, few strong low harmonics
      r.harmonics = 6;
      r.rolloff = uniform(rng, 0.3, 0.6);
      r.even_gain = uniform(rng, 0.8, 1.0);
      r.decay_s = 20.0;
      r.attack_s = uniform(rng, 0.02, 0.04);
      r.release_s = 0.08;
      break;
    case 2:  // reed: odd harmonics, formant, vibrato
      r.harmonics = 16;
      r.rolloff = uniform(rng, 0.5, 0.8);
      r.even_gain = uniform(rng, 0.05, 0.15);
      r.decay_s = uniform(rng, 3.0, 6.0);
      r.attack_s = uniform(rng, 0.03, 0.06);
      r.release_s = 0.12;
      r.vibrato_depth = uniform(rng, 0.003, 0.008);
      r.vibrato_hz = uniform(rng, 4.5, 6.0);
      r.formant_hz = uniform(rng, 1200.0, 2000.0);
      r.formant_gain = uniform(rng, 2.0, 4.0);
      break;
    default:  // soft: near-sine with breath noise, slow attack
      r.harmonics = 3;
      r.rolloff = uniform(rng, 2.0, 2.8);
      r.even_gain = uniform(rng, 0.3, 0.6);
      r.decay_s = uniform(rng, 1.5, 2.5);
      r.attack_s = uniform(rng, 0.08, 0.12);
      r.release_s = 0.2;
      r.noise = uniform(rng, 0.05, 0.1);
      break;
  }
  // Instruments beyond the first four get larger parameter jitter.
  if (index >= 4) {
    r.rolloff *= uniform(rng, 0.7, 1.4);
    r.decay_s *= uniform(rng, 0.6, 1.6);
    r.attack_s *= uniform(rng, 0.5, 2.0);
  }
  return r;
}

inline double midi_to_hz(double pitch) { return 440.0 * std::pow(2.0, (pitch - 69.0) / 12.0); }

inline std::vector<float> synth_note(const InstrumentRecipe& r, int pitch, int velocity_bucket, int sample_rate,
                                     double seconds, std::uint64_t seed) {
  const std::size_t n = static_cast<std::size_t>(seconds * sample_rate);
  std::vector<double> out(n, 0.0);
  const double f0 = midi_to_hz(pitch);
  const double nyquist = 0.5 * sample_rate;
  // Louder notes are slightly brighter.
  const double vel_bright = 0.85 + 0.1 * velocity_bucket;
  std::vector<double> amp, freq, tau;
  for (int k = 1; k <= r.harmonics; ++k) {
    const double f = k * f0 * std::sqrt(1.0 + r.inharmonicity * k * k);
    if (f >= 0.9 * nyquist) break;
    double a = std::pow(k, -r.rolloff / vel_bright);
    if (k % 2 == 0) a *= r.even_gain;
    if (r.formant_hz > 0) {
      const double d = std::log2(f / r.formant_hz);
      a *= 1.0 + r.formant_gain * std::exp(-d * d / 0.18);
    }
    amp.push_back(a);
    freq.push_back(f);
    tau.push_back(r.decay_s / (1.0 + r.brightness_decay * (k - 1)));
  }
  double norm = 0.0;
  for (double a : amp) norm += a;
  std::mt19937_64 rng(seed);
  double noise_state = 0.0;
  std::vector<double> phase(amp.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    const double vib = 1.0 + r.vibrato_depth * std::sin(2.0 * std::numbers::pi * r.vibrato_hz * t);
    double s = 0.0;
    for (std::size_t k = 0; k < amp.size(); ++k) {
      phase[k] += 2.0 * std::numbers::pi * freq[k] * vib / sample_rate;
      s += amp[k] * std::exp(-t / tau[k]) * std::sin(phase[k]);
    }
    s /= norm;
    if (r.noise > 0) {
      noise_state = 0.7 * noise_state + 0.3 * uniform(rng, -1.0, 1.0);
      s += r.noise * noise_state * std::exp(-t / (2.0 * r.decay_s));
    }
    const double attack = std::min(1.0, t / r.attack_s);
    out[i] = 0.8 * s * attack;
  }
  return std::vector<float>(out.begin(), out.end());
}

// Linear-interpolation resampling by a pitch ratio (2^(semitones/12)).
inline std::vector<float> pitch_shift(const std::vector<float>& x, int semitones) {
  if (semitones == 0) return x;
  const double ratio = std::pow(2.0, semitones / 12.0);
  std::vector<float> y(x.size(), 0.0f);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double src = i * ratio;
    const std::size_t j = static_cast<std::size_t>(src);
    if (j + 1 >= x.size()) break;
    const double frac = src - j;
    y[i] = static_cast<float>((1.0 - frac) * x[j] + frac * x[j + 1]);
  }
  return y;
}

}  // namespace dataset_detail

// Bank pitches every kBankPitchStep semitones over the corpus range; other
// pitches are served by shifting the nearest stored one.
inline NoteSampleBank build_toy_bank(int n_instruments, std::uint64_t seed, int sample_rate = 16000) {
  if (n_instruments < 1) throw InvalidArgument("bank needs at least one instrument");
  NoteSampleBank bank;
  bank.sample_rate = sample_rate;
  for (int i = 0; i < n_instruments; ++i) {
    bank.recipes.push_back(dataset_detail::make_recipe(i, seed));
    std::map<std::pair<int, int>, std::vector<float>> samples;
    for (int p = kCorpusPitchMin; p <= kCorpusPitchMax; p += kBankPitchStep) {
      for (int v = 0; v < kNumVelocityBuckets; ++v) {
        const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(i * 100000 + p * 10 + v));
        samples[{p, v}] = dataset_detail::synth_note(bank.recipes[i], p, v, sample_rate, bank.sample_seconds, s);
      }
    }
    bank.instruments.push_back(std::move(samples));
  }
  return bank;
}

inline std::vector<float> bank_sample(const NoteSampleBank& bank, int instrument, int pitch, int velocity_bucket) {
  if (instrument < 0 || instrument >= bank.size()) throw InvalidArgument("instrument not in bank");
  const auto& samples = bank.instruments[instrument];
  int best = -1;
  for (const auto& [key, pcm] : samples) {
    if (key.second != velocity_bucket) continue;
    if (best < 0 || std::abs(key.first - pitch) < std::abs(best - pitch)) best = key.first;
  }
  if (best < 0 || std::abs(best - pitch) > kMaxPitchShift) {
    throw InvalidArgument("no sample within " + std::to_string(kMaxPitchShift) + " semitones of pitch " +
                          std::to_string(pitch));
  }
  return dataset_detail::pitch_shift(samples.at({best, velocity_bucket}), pitch - best);
}

// Overlap-add without peak normalization.
inline std::vector<float> render_clip_raw(const NoteSampleBank& bank, int instrument, const NoteSequence& notes) {
  notes.validate();
  if (instrument < 0 || instrument >= bank.size()) throw InvalidArgument("instrument not in bank");
  const std::size_t length = static_cast<std::size_t>(notes.clip_ticks) * bank.sample_rate / kTicksPerSecond;
  std::vector<double> acc(length, 0.0);
  const double release = bank.recipes[instrument].release_s;
  for (const auto& n : notes.notes) {
    const auto pcm = bank_sample(bank, instrument, n.pitch, n.velocity_bucket);
    const std::size_t start = static_cast<std::size_t>(n.onset_ticks) * bank.sample_rate / kTicksPerSecond;
    const std::size_t stop = static_cast<std::size_t>(n.offset_ticks) * bank.sample_rate / kTicksPerSecond;
    const std::size_t rel = static_cast<std::size_t>(release * bank.sample_rate);
    const double gain = kVelocityGain[n.velocity_bucket];
    for (std::size_t i = 0; i < pcm.size(); ++i) {
      const std::size_t at = start + i;
      if (at >= length || at >= stop + rel) break;
      double env = 1.0;
      if (at >= stop) env = 1.0 - static_cast<double>(at - stop) / static_cast<double>(rel);
      acc[at] += gain * env * pcm[i];
    }
  }
  return std::vector<float>(acc.begin(), acc.end());
}

// Peak-normalizes to -1 dBFS only if the mix would clip.
inline std::vector<float> render_clip(const NoteSampleBank& bank, int instrument, const NoteSequence& notes) {
  auto pcm = render_clip_raw(bank, instrument, notes);
  float peak = 0.0f;
  for (float s : pcm) peak = std::max(peak, std::abs(s));
  if (peak > 1.0f) {
    const float scale = static_cast<float>(std::pow(10.0, -1.0 / 20.0) / peak);
    for (auto& s : pcm) s *= scale;
  }
  return pcm;
}

// ---------------------------------------------------------------------------
// Effects

struct EqBand {
  double center_hz = 1000.0;
  double gain_db = 0.0;
  double q = 1.0;
  friend bool operator==(const EqBand&, const EqBand&) = default;
};

struct EffectChainParams {
  bool eq_enabled = false;
  std::array<EqBand, 3> eq{};
  bool distortion_enabled = false;
  double drive = 1.0;
  bool reverb_enabled = false;
  double reverb_decay_s = 1.0;
  double reverb_wet = 0.3;
  std::uint64_t seed = 0;

  bool any() const { return eq_enabled || distortion_enabled || reverb_enabled; }
  friend bool operator==(const EffectChainParams&, const EffectChainParams&) = default;
};

struct EffectRanges {
  double eq_gain_db_min = -9.0, eq_gain_db_max = 9.0;
  double eq_center_min = 100.0, eq_center_max = 8000.0;  // log-uniform
  double eq_q_min = 0.5, eq_q_max = 4.0;
  double drive_min = 1.0, drive_max = 10.0;
  double decay_min = 0.3, decay_max = 2.0;
  double wet_min = 0.1, wet_max = 0.5;
  double enable_probability = 0.5;
};

// Every parameter is drawn regardless of its flag, so flags and values come
// from fixed stream positions.
inline EffectChainParams sample_effect_chain(std::uint64_t seed, const EffectRanges& ranges = {}) {
  using dataset_detail::uniform;
  std::mt19937_64 rng(mix_seed(seed, 0xEFFEC7));
  EffectChainParams p;
  p.seed = seed;
  p.eq_enabled = uniform(rng, 0.0, 1.0) < ranges.enable_probability;
  p.distortion_enabled = uniform(rng, 0.0, 1.0) < ranges.enable_probability;
  p.reverb_enabled = uniform(rng, 0.0, 1.0) < ranges.enable_probability;
  for (auto& b : p.eq) {
    b.center_hz = std::exp(uniform(rng, std::log(ranges.eq_center_min), std::log(ranges.eq_center_max)));
    b.gain_db = uniform(rng, ranges.eq_gain_db_min, ranges.eq_gain_db_max);
    b.q = uniform(rng, ranges.eq_q_min, ranges.eq_q_max);
  }
  p.drive = uniform(rng, ranges.drive_min, ranges.drive_max);
  p.reverb_decay_s = uniform(rng, ranges.decay_min, ranges.decay_max);
  p.reverb_wet = uniform(rng, ranges.wet_min, ranges.wet_max);
  return p;
}

namespace dataset_detail {

// RBJ peaking-EQ biquad, transposed direct form II.
inline void peaking_eq(std::vector<double>& x, double sr, const EqBand& band) {
  const double center = std::min(band.center_hz, 0.45 * sr);
  const double A = std::pow(10.0, band.gain_db / 40.0);
  const double w0 = 2.0 * std::numbers::pi * center / sr;
  const double alpha = std::sin(w0) / (2.0 * band.q);
  const double cw = std::cos(w0);
  const double a0 = 1.0 + alpha / A;
  const double b0 = (1.0 + alpha * A) / a0, b1 = -2.0 * cw / a0, b2 = (1.0 - alpha * A) / a0;
  const double a1 = -2.0 * cw / a0, a2 = (1.0 - alpha / A) / a0;
  double z1 = 0.0, z2 = 0.0;
  for (auto& v : x) {
    const double y = b0 * v + z1;
    z1 = b1 * v - a1 * y + z2;
    z2 = b2 * v - a2 * y;
    v = y;
  }
}

inline void waveshape(std::vector<double>& x, double drive) {
  const double norm = std::tanh(drive);
  for (auto& v : x) v = std::tanh(drive * v) / norm;
}

// Schroeder reverb: four parallel feedback combs, two series allpasses.
inline void reverb(std::vector<double>& x, double sr, double decay_s, double wet) {
  static constexpr double kCombMs[4] = {29.7, 37.1, 41.1, 43.7};
  static constexpr double kAllpassMs[2] = {5.0, 1.7};
  std::vector<double> sum(x.size(), 0.0);
  for (double ms : kCombMs) {
    const std::size_t delay = static_cast<std::size_t>(ms * 1e-3 * sr);
    const double g = std::pow(10.0, -3.0 * (ms * 1e-3) / decay_s);
    std::vector<double> buf(delay, 0.0);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double y = buf[idx];
      buf[idx] = x[i] + g * y;
      idx = (idx + 1) % delay;
      sum[i] += y * 0.25;
    }
  }
  for (double ms : kAllpassMs) {
    const std::size_t delay = static_cast<std::size_t>(ms * 1e-3 * sr);
    const double g = 0.7;
    std::vector<double> buf(delay, 0.0);
    std::size_t idx = 0;
    for (auto& v : sum) {
      const double delayed = buf[idx];
      const double y = -g * v + delayed;
      buf[idx] = v + g * y;
      idx = (idx + 1) % delay;
      v = y;
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (1.0 - wet) * x[i] + wet * sum[i];
}

}  // namespace dataset_detail

// Fixed order: EQ, distortion, reverb.
inline std::vector<float> apply_effects(const std::vector<float>& pcm, const EffectChainParams& p, int sample_rate) {
  if (!p.any()) return pcm;
  std::vector<double> x(pcm.begin(), pcm.end());
  if (p.eq_enabled) {
    for (const auto& b : p.eq) dataset_detail::peaking_eq(x, sample_rate, b);
  }
  if (p.distortion_enabled) dataset_detail::waveshape(x, p.drive);
  if (p.reverb_enabled) dataset_detail::reverb(x, sample_rate, p.reverb_decay_s, p.reverb_wet);
  std::vector<float> out(x.size());
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  const double scale = peak > 1.0 ? std::pow(10.0, -1.0 / 20.0) / peak : 1.0;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * scale);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus and pairing

struct CorpusOptions {
  int min_notes = 1;
  int max_notes = 16;
  int min_pitch = kCorpusPitchMin;
  int max_pitch = kCorpusPitchMax;
  int min_duration_ticks = 10;
  int max_duration_ticks = 150;
  int onset_grid = 1;       // onsets and durations snapped to multiples of this
  bool monophonic = false;  // notes never overlap
};

inline NoteSequence random_clip(std::mt19937_64& rng, const CorpusOptions& opt = {}) {
  const int g = std::max(1, opt.onset_grid);
  const int slots = (kClipTicks - 1 - opt.min_duration_ticks) / g + 1;
  std::uniform_int_distribution<int> count(opt.min_notes, opt.max_notes);
  std::uniform_int_distribution<int> pitch(opt.min_pitch, opt.max_pitch);
  std::uniform_int_distribution<int> slot(0, slots - 1);
  std::uniform_int_distribution<int> dur(opt.min_duration_ticks, opt.max_duration_ticks);
  std::uniform_int_distribution<int> vel(0, kNumVelocityBuckets - 1);
  const int n = opt.monophonic ? std::min(count(rng), slots) : count(rng);
  std::vector<int> onsets;
  if (opt.monophonic) {
    std::vector<int> all(slots);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    onsets.assign(all.begin(), all.begin() + n);
    std::sort(onsets.begin(), onsets.end());
  } else {
    for (int i = 0; i < n; ++i) onsets.push_back(slot(rng));
  }
  std::vector<NoteEvent> notes;
  for (int i = 0; i < n; ++i) {
    NoteEvent e;
    e.onset_ticks = onsets[i] * g;
    int d = dur(rng);
    if (g > 1) d = std::max(g, d / g * g);
    int end = kClipTicks - 1;
    if (opt.monophonic && i + 1 < n) end = onsets[i + 1] * g;
    e.offset_ticks = std::min(e.onset_ticks + d, end);
    e.pitch = pitch(rng);
    e.velocity_bucket = vel(rng);
    notes.push_back(e);
  }
  return NoteSequence::canonical(std::move(notes));
}

inline std::vector<NoteSequence> random_corpus(int size, std::uint64_t seed, const CorpusOptions& opt = {}) {
  std::vector<NoteSequence> out;
  out.reserve(size);
  for (int i = 0; i < size; ++i) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    out.push_back(random_clip(rng, opt));
  }
  return out;
}

// Reads every .mid/.midi file in a directory (sorted by name).
inline std::vector<NoteSequence> load_corpus_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (ext == ".mid" || ext == ".midi") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<NoteSequence> out;
  for (const auto& f : files) out.push_back(read_midi_file(f));
  return out;
}

struct PairedExample {
  std::vector<float> reference_pcm;
  std::vector<float> target_pcm;
  NoteSequence reference_notes;
  NoteSequence target_notes;
  int instrument = 0;
  EffectChainParams effects;
};

inline PairedExample make_pair(const NoteSampleBank& bank, const std::vector<NoteSequence>& corpus, int instrument,
                               bool augment, std::uint64_t seed, const EffectRanges& ranges = {}) {
  if (corpus.size() < 2) throw InvalidArgument("corpus needs at least two clips to form a pair");
  std::mt19937_64 rng(mix_seed(seed, 0xA11));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  constexpr int kMaxRetries = 32;
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    const std::size_t ref = pick(rng), tgt = pick(rng);
    if (ref == tgt || corpus[ref] == corpus[tgt]) continue;
    PairedExample ex;
    ex.instrument = instrument;
    ex.reference_notes = corpus[ref];
    ex.target_notes = corpus[tgt];
    ex.reference_pcm = render_clip(bank, instrument, ex.reference_notes);
    ex.target_pcm = render_clip(bank, instrument, ex.target_notes);
    if (augment) {
      ex.effects = sample_effect_chain(mix_seed(seed, 0xFE), ranges);
      ex.reference_pcm = apply_effects(ex.reference_pcm, ex.effects, bank.sample_rate);
      ex.target_pcm = apply_effects(ex.target_pcm, ex.effects, bank.sample_rate);
    }
    return ex;
  }
  throw InvalidArgument("could not draw two distinct clips after " + std::to_string(kMaxRetries) + " attempts");
}

struct ManifestRow {
  std::string id;
  std::string variant;  // "dry" or "wet"
  int instrument = 0;
  std::string reference_wav;
  std::string target_wav;
  std::string target_midi;
  std::string reference_midi;
  EffectChainParams effects;
  std::string split = "train";
};

inline nlohmann::json to_json(const EffectChainParams& p) {
  nlohmann::json eq = nlohmann::json::array();
  for (const auto& b : p.eq) eq.push_back({{"center_hz", b.center_hz}, {"gain_db", b.gain_db}, {"q", b.q}});
  return {{"eq_enabled", p.eq_enabled},
          {"eq", eq},
          {"distortion_enabled", p.distortion_enabled},
          {"drive", p.drive},
          {"reverb_enabled", p.reverb_enabled},
          {"reverb_decay_s", p.reverb_decay_s},
          {"reverb_wet", p.reverb_wet},
          {"seed", p.seed}};
}

inline EffectChainParams effects_from_json(const nlohmann::json& j) {
  EffectChainParams p;
  p.eq_enabled = j.at("eq_enabled");
  for (std::size_t i = 0; i < p.eq.size(); ++i) {
    p.eq[i].center_hz = j.at("eq").at(i).at("center_hz");
    p.eq[i].gain_db = j.at("eq").at(i).at("gain_db");
    p.eq[i].q = j.at("eq").at(i).at("q");
  }
  p.distortion_enabled = j.at("distortion_enabled");
  p.drive = j.at("drive");
  p.reverb_enabled = j.at("reverb_enabled");
  p.reverb_decay_s = j.at("reverb_decay_s");
  p.reverb_wet = j.at("reverb_wet");
  p.seed = j.at("seed");
  return p;
}

inline nlohmann::json to_json(const ManifestRow& r) {
  return {{"id", r.id},
          {"variant", r.variant},
          {"instrument", r.instrument},
          {"reference_wav", r.reference_wav},
          {"target_wav", r.target_wav},
          {"target_midi", r.target_midi},
          {"reference_midi", r.reference_midi},
          {"effects", to_json(r.effects)},
          {"split", r.split}};
}

inline ManifestRow manifest_row_from_json(const nlohmann::json& j) {
  ManifestRow r;
  r.id = j.at("id");
  r.variant = j.at("variant");
  r.instrument = j.at("instrument");
  r.reference_wav = j.at("reference_wav");
  r.target_wav = j.at("target_wav");
  r.target_midi = j.at("target_midi");
  r.reference_midi = j.value("reference_midi", "");
  r.effects = effects_from_json(j.at("effects"));
  r.split = j.value("split", "train");
  return r;
}

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  std::vector<ManifestRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(manifest_row_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, path.string() + ": bad manifest record: " + e.what());
    }
  }
  return rows;
}

struct DatasetOptions {
  int size = 10;
  double augment_fraction = 0.0;  // fraction of base examples that also get a wet copy
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
  EffectRanges ranges;
};

// Writes {id}_{ref|tgt}_{dry|wet}.wav, {id}.mid (target) and {id}_ref.mid,
// plus manifest.jsonl in out_dir. Returns the manifest rows.
inline std::vector<ManifestRow> build_dataset(const NoteSampleBank& bank, const std::vector<NoteSequence>& corpus,
                                              const DatasetOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.size < 1) throw InvalidArgument("dataset size must be at least 1");
  if (opt.augment_fraction < 0.0 || opt.augment_fraction > 1.0) {
    throw InvalidArgument("augment_fraction must be in [0, 1]");
  }
  if (bank.size() < 1) throw InvalidArgument("empty sample bank");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const int wet_count = static_cast<int>(std::lround(opt.augment_fraction * opt.size));
  const int test_begin = opt.size - static_cast<int>(std::lround(opt.test_fraction * opt.size));
  std::vector<ManifestRow> rows;
  for (int i = 0; i < opt.size; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "%06d", i);
    const int instrument = i % bank.size();
    const std::uint64_t seed = mix_seed(opt.seed, static_cast<std::uint64_t>(i));
    PairedExample dry = make_pair(bank, corpus, instrument, false, seed, opt.ranges);
    const auto mid = out_dir / (std::string(id) + ".mid");
    const auto ref_mid = out_dir / (std::string(id) + "_ref.mid");
    write_midi_file(dry.target_notes, mid);
    write_midi_file(dry.reference_notes, ref_mid);
    auto emit = [&](const PairedExample& ex, const std::string& variant) {
      ManifestRow row;
      row.id = id;
      row.variant = variant;
      row.instrument = instrument;
      row.reference_wav = std::string(id) + "_ref_" + variant + ".wav";
      row.target_wav = std::string(id) + "_tgt_" + variant + ".wav";
      row.target_midi = mid.filename().string();
      row.reference_midi = ref_mid.filename().string();
      row.effects = ex.effects;
      row.split = i >= test_begin ? "test" : "train";
      write_wav({ex.reference_pcm, bank.sample_rate}, out_dir / row.reference_wav);
      write_wav({ex.target_pcm, bank.sample_rate}, out_dir / row.target_wav);
      rows.push_back(row);
    };
    emit(dry, "dry");
    if (i < wet_count) {
      PairedExample wet = dry;
      wet.effects = sample_effect_chain(mix_seed(seed, 0xFE), opt.ranges);
      wet.reference_pcm = apply_effects(dry.reference_pcm, wet.effects, bank.sample_rate);
      wet.target_pcm = apply_effects(dry.target_pcm, wet.effects, bank.sample_rate);
      emit(wet, "wet");
    }
  }
  std::ofstream out(out_dir / "manifest.jsonl");
  if (!out) throw IoError("cannot write manifest in " + out_dir.string());
  for (const auto& r : rows) out << to_json(r).dump() << "\n";
  if (!out) throw IoError("manifest write failed in " + out_dir.string());
  return rows;
}

}  // namespace tokensynth
