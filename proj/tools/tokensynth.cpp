#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tokensynth/codec.hpp"
#include "tokensynth/dataset.hpp"
#include "tokensynth/error.hpp"
#include "tokensynth/eval.hpp"
#include "tokensynth/midi_file.hpp"
#include "tokensynth/model.hpp"
#include "tokensynth/sampler.hpp"
#include "tokensynth/timbre.hpp"
#include "tokensynth/train.hpp"
#include "tokensynth/wav.hpp"

namespace fs = std::filesystem;
using namespace tokensynth;

namespace {

CLI::App* g_app = nullptr;

// Effective configuration (file values merged with flags) plus the seed.
void snapshot(const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir);
  std::ofstream cfg(dir / "config.ini");
  cfg << g_app->config_to_str(true, false);
  std::ofstream(dir / "seed.txt") << seed << "\n";
  if (!cfg) throw IoError("cannot write config snapshot in " + dir.string());
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " path is required");
  if (!fs::exists(p)) throw IoError(what + " not found: " + p.string());
}

std::vector<ManifestRow> rows_for_split(const fs::path& dataset, const std::string& split) {
  const fs::path manifest = dataset / "manifest.jsonl";
  require_file(manifest, "manifest");
  auto rows = read_manifest(manifest);
  if (split != "all") {
    std::erase_if(rows, [&](const ManifestRow& r) { return r.split != split; });
  }
  if (rows.empty()) throw InvalidArgument("no manifest rows in split '" + split + "' of " + manifest.string());
  return rows;
}

std::vector<float> load_pcm(const fs::path& p, const FrameSpec& spec) {
  const Audio a = read_wav(p);
  if (a.sample_rate != spec.sample_rate) {
    throw IncompatibleError(p.string() + ": sample rate " + std::to_string(a.sample_rate) + ", expected " +
                            std::to_string(spec.sample_rate));
  }
  return a.samples;
}

TimbreEmbedding embedding_from(const fs::path& p, const SpectralFeaturizer& f) {
  require_file(p, "timbre source");
  if (p.extension() == ".wav") return f.embed(p);
  return load_embedding_file(p, f.dim());
}

// ---------------------------------------------------------------------------

struct BuildDatasetArgs {
  fs::path out;
  int size = 100;
  double augment_fraction = 0.0;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
  int instruments = 4;
  std::uint64_t bank_seed = 1;
  fs::path corpus_dir;
  int corpus_size = 256;
  std::uint64_t corpus_seed = 2;
  EffectRanges ranges;
};

void cmd_build_dataset(const BuildDatasetArgs& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  std::vector<NoteSequence> corpus;
  if (!a.corpus_dir.empty()) {
    if (!fs::is_directory(a.corpus_dir)) throw IoError("corpus directory not found: " + a.corpus_dir.string());
    corpus = load_corpus_dir(a.corpus_dir);
  } else {
    corpus = random_corpus(a.corpus_size, a.corpus_seed);
  }
  const auto bank = build_toy_bank(a.instruments, a.bank_seed);
  DatasetOptions opt;
  opt.size = a.size;
  opt.augment_fraction = a.augment_fraction;
  opt.test_fraction = a.test_fraction;
  opt.seed = a.seed;
  opt.ranges = a.ranges;
  const auto rows = build_dataset(bank, corpus, opt, a.out);
  snapshot(a.out, a.seed);
  std::cout << "wrote " << rows.size() << " manifest rows to " << (a.out / "manifest.jsonl").string() << "\n";
}

struct TrainCodecArgs {
  fs::path dataset;
  fs::path out;
  std::string split = "train";
  int depth = 4;
  int codebook_size = 256;
  int iterations = 25;
  int frames = 16384;
  std::uint64_t seed = 0;
};

void cmd_train_codec(const TrainCodecArgs& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  const auto rows = rows_for_split(a.dataset, a.split);
  const FrameSpec spec;
  const MelAnalyzer analyzer(spec);
  std::vector<RowMatrixF> mels;
  Eigen::Index total = 0;
  for (const auto& r : rows) {
    mels.push_back(analyzer.analyze(load_pcm(a.dataset / r.target_wav, spec)));
    total += mels.back().rows();
  }
  const Eigen::Index n = std::min<Eigen::Index>(a.frames, total);
  std::mt19937_64 rng(mix_seed(a.seed, 1));
  RowMatrixF sample(n, spec.mel_bins);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& m = mels[rng() % mels.size()];
    sample.row(i) = m.row(static_cast<Eigen::Index>(rng() % m.rows()));
  }
  RvqTrainOptions opt;
  opt.depth = a.depth;
  opt.codebook_size = a.codebook_size;
  opt.iterations = a.iterations;
  opt.seed = a.seed;
  const RvqCodec codec = rvq_train(sample, spec, opt);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  codec.save(a.out);
  const auto err = codec.stage_errors(sample);
  std::cout << "codec D=" << codec.depth() << " K=" << codec.codebook_size() << " residual mse";
  for (double e : err) std::cout << " " << e;
  std::cout << "\n";
}

struct TrainArgs {
  std::string mode = "cond";
  fs::path dataset;
  fs::path codec;
  fs::path run_dir;
  std::string split = "train";
  std::string preset = "toy";
  TrainOptions opt;
  int log_every = 50;
};

void cmd_train(TrainArgs a) {
  if (a.run_dir.empty()) throw ConfigError("--run-dir is required");
  require_file(a.codec, "codec");
  const ModelMode mode = parse_mode(a.mode);
  const auto rows = rows_for_split(a.dataset, a.split);
  const RvqCodec codec = RvqCodec::load(a.codec);
  const FrameSpec spec = codec.frame_spec();
  const MelAnalyzer analyzer(spec);
  const SpectralFeaturizer featurizer(spec);

  ModelConfig mc = ModelConfig::preset(a.preset);
  mc.mode = mode;
  mc.depth = codec.depth();
  mc.codebook_size = codec.codebook_size();
  mc.d_clap = static_cast<int>(featurizer.dim());
  mc.validate();

  std::vector<TrainingExample> data;
  for (const auto& r : rows) {
    TrainingExample ex;
    ex.audio = encode_audio(codec, analyzer, load_pcm(a.dataset / r.target_wav, spec));
    if (mode != ModelMode::unconditional) ex.midi = tokenize(read_midi_file(a.dataset / r.target_midi));
    if (mode == ModelMode::conditional) ex.timbre = featurizer.embed(a.dataset / r.reference_wav);
    data.push_back(std::move(ex));
  }
  snapshot(a.run_dir, a.opt.seed);
  Transformer<float> model(mc, mix_seed(a.opt.seed, 7));
  nn::Adam<float> adam;
  std::ofstream log(a.run_dir / "losses.csv");
  log << "step,loss,lr\n";
  train_model(model, data, a.opt, adam, [&](int step, const StepStats& st) {
    log << step << "," << st.loss << "," << a.opt.lr_at(step) << "\n";
    if (a.log_every > 0 && step % a.log_every == 0) std::cerr << "step " << step << " loss " << st.loss << "\n";
  });
  const auto path = a.run_dir / "model.bin";
  save_checkpoint(model, MidiVocab{}, spec, path);
  std::ofstream(a.run_dir / "metrics.json") << nlohmann::json{{"train_loss", evaluate_loss(model, data)},
                                                              {"examples", data.size()}}
                                                   .dump(2)
                                            << "\n";
  std::cout << "saved " << path.string() << "\n";
}

struct SynthArgs {
  fs::path checkpoint;
  fs::path codec;
  fs::path uncond_checkpoint;
  fs::path midi;
  fs::path timbre_audio;
  fs::path timbre_file;
  std::optional<double> alpha;
  bool renormalize = false;
  double top_p = 0.95;
  double temperature = 1.0;
  double gamma = 1.0;
  std::string guidance = "none";
  std::uint64_t seed = 0;
  int griffin_lim_iters = MelAnalyzer::kGriffinLimIterations;
  fs::path out;
  fs::path tokens_out;
  fs::path dataset;
  fs::path out_dir;
  std::string split = "test";
};

struct Synthesizer {
  Checkpoint cond;
  std::optional<Checkpoint> uncond;
  RvqCodec codec;
  MelAnalyzer analyzer;
  SpectralFeaturizer featurizer;
  SamplerConfig sampler;
  GuidanceConfig guidance;
  int gl_iters;

  explicit Synthesizer(const SynthArgs& a)
      : cond(load_checkpoint((require_file(a.checkpoint, "checkpoint"), a.checkpoint))),
        codec(RvqCodec::load((require_file(a.codec, "codec"), a.codec))),
        analyzer(codec.frame_spec()),
        featurizer(codec.frame_spec()),
        gl_iters(a.griffin_lim_iters) {
    cond.require(ModelMode::conditional, codec.depth(), codec.codebook_size());
    if (!(cond.frame_spec == codec.frame_spec())) throw IncompatibleError("checkpoint and codec frame specs differ");
    sampler.top_p = a.top_p;
    sampler.temperature = a.temperature;
    sampler.seed = a.seed;
    sampler.validate();
    guidance.gamma = a.gamma;
    guidance.mode = parse_guidance(a.guidance);
    guidance.validate();
    if (guidance.mode != GuidanceMode::none) {
      require_file(a.uncond_checkpoint, "unconditional checkpoint");
      uncond.emplace(load_checkpoint(a.uncond_checkpoint));
      uncond->require(ModelMode::unconditional, codec.depth(), codec.codebook_size());
    }
  }

  GenerateResult run(const TimbreEmbedding& e, const NoteSequence& notes, std::uint64_t seed,
                     std::vector<float>* pcm) const {
    SamplerConfig sc = sampler;
    sc.seed = seed;
    const auto g = generate(cond.model, uncond ? &uncond->model : nullptr, e, notes, codec.frame_spec(), sc, guidance);
    const auto& spec = codec.frame_spec();
    const auto samples = static_cast<std::size_t>(notes.clip_ticks * kTickSeconds * spec.sample_rate);
    *pcm = analyzer.synthesize(codec.decode(g.tokens), samples, gl_iters);
    return g;
  }
};

void cmd_synthesize(const SynthArgs& a) {
  const Synthesizer s(a);
  if (!a.dataset.empty()) {
    if (a.out_dir.empty()) throw ConfigError("batch synthesis needs --out-dir");
    const auto rows = rows_for_split(a.dataset, a.split);
    snapshot(a.out_dir, a.seed);
    std::size_t k = 0;
    for (const auto& r : rows) {
      const NoteSequence notes = read_midi_file(a.dataset / r.target_midi);
      for (const auto& cond : eval_conditions()) {
        const fs::path src = a.dataset / (cond == "tgt" ? r.target_wav : r.reference_wav);
        std::vector<float> pcm;
        s.run(s.featurizer.embed(src), notes, mix_seed(a.seed, k++), &pcm);
        write_wav({pcm, s.codec.frame_spec().sample_rate}, a.out_dir / output_name(r, cond));
      }
    }
    std::cout << "wrote " << k << " clips to " << a.out_dir.string() << "\n";
    return;
  }
  if (a.out.empty()) throw ConfigError("--out is required (or --dataset/--out-dir for batch mode)");
  require_file(a.midi, "MIDI");
  const NoteSequence notes = read_midi_file(a.midi);
  TimbreEmbedding e;
  if (!a.timbre_audio.empty() && !a.timbre_file.empty()) {
    if (!a.alpha) throw ConfigError("--alpha is required when both --timbre-audio and --timbre-file are given");
    e = interpolate(embedding_from(a.timbre_audio, s.featurizer), embedding_from(a.timbre_file, s.featurizer),
                    *a.alpha, a.renormalize);
  } else if (!a.timbre_audio.empty() || !a.timbre_file.empty()) {
    if (a.alpha) throw ConfigError("--alpha interpolates two embeddings; give both --timbre-audio and --timbre-file");
    e = embedding_from(a.timbre_audio.empty() ? a.timbre_file : a.timbre_audio, s.featurizer);
  } else {
    throw ConfigError("a timbre source is required (--timbre-audio and/or --timbre-file)");
  }
  std::vector<float> pcm;
  const auto g = s.run(e, notes, a.seed, &pcm);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  write_wav({pcm, s.codec.frame_spec().sample_rate}, a.out);
  if (!a.tokens_out.empty()) {
    nlohmann::json j = {{"frames", g.tokens.frames},
                        {"depth", g.tokens.depth},
                        {"tokens", g.tokens.grid},
                        {"guided_rows", g.guided_rows}};
    std::ofstream(a.tokens_out) << j.dump() << "\n";
  }
  std::cout << "wrote " << a.out.string() << "\n";
}

struct TranscribeArgs {
  fs::path checkpoint;
  fs::path codec;
  fs::path audio;
  fs::path out;
};

void cmd_transcribe(const TranscribeArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.codec, "codec");
  require_file(a.audio, "audio");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const RvqCodec codec = RvqCodec::load(a.codec);
  const Transcription t = transcribe(ck.model, codec, load_pcm(a.audio, codec.frame_spec()));
  if (!a.out.empty()) write_midi_file(t.notes, a.out);
  for (const auto& n : t.notes.notes) {
    std::printf("%6.2f %6.2f pitch %3d vel %d\n", n.onset_ticks * kTickSeconds, n.offset_ticks * kTickSeconds, n.pitch,
                n.velocity_bucket);
  }
  if (t.dropped_groups) std::cerr << "dropped " << t.dropped_groups << " malformed token groups\n";
}

struct EvaluateArgs {
  fs::path dataset;
  fs::path outputs;
  fs::path report;
  fs::path transcriber;
  fs::path codec;
  std::string split = "all";
};

void cmd_evaluate(const EvaluateArgs& a) {
  if (a.report.empty()) throw ConfigError("--report is required");
  if (!fs::is_directory(a.outputs)) throw IoError("outputs directory not found: " + a.outputs.string());
  const auto rows = rows_for_split(a.dataset, a.split);
  const SpectralFeaturizer featurizer;
  std::optional<Checkpoint> tr;
  std::optional<RvqCodec> codec;
  if (!a.transcriber.empty()) {
    require_file(a.codec, "codec");
    codec.emplace(RvqCodec::load(a.codec));
    tr.emplace(load_checkpoint(a.transcriber));
    tr->require(ModelMode::transcription, codec->depth(), codec->codebook_size());
  }
  EvalInputs in;
  in.dataset_dir = a.dataset;
  in.outputs_dir = a.outputs;
  in.featurizer = &featurizer;
  in.transcriber = tr ? &tr->model : nullptr;
  in.codec = codec ? &*codec : nullptr;
  const EvalReport rep = evaluate_run(rows, in);
  if (rep.rows.empty()) throw IoError("no synthesized outputs found in " + a.outputs.string());
  write_report(rep, a.report);
  snapshot(a.report, 0);
  std::cout << summary_table(rep);
}

struct InterpolateArgs {
  fs::path a;
  fs::path b;
  double alpha = 0.5;
  bool renormalize = false;
  fs::path out;
};

void cmd_interpolate(const InterpolateArgs& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  const SpectralFeaturizer f;
  const auto e = interpolate(embedding_from(a.a, f), embedding_from(a.b, f), a.alpha, a.renormalize);
  write_embedding_file(e, a.out);
  std::cout << "wrote " << a.out.string() << " (dim " << e.dim() << ")\n";
}

void add_range(CLI::App* c, const std::string& name, double& lo, double& hi, const std::string& help) {
  c->add_option_function<std::pair<double, double>>(
       name, [&lo, &hi](const std::pair<double, double>& v) { lo = v.first, hi = v.second; }, help)
      ->default_str(std::to_string(lo) + " " + std::to_string(hi));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-based neural synthesizer: dataset, codec, models, synthesis and evaluation"};
  g_app = &app;
  app.set_config("--config", "", "INI/TOML config file; [section] names match subcommands; flags override it")
      ->envname("TOKENSYNTH_CONFIG");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  BuildDatasetArgs bd;
  auto* c_bd = app.add_subcommand("build-dataset", "Render paired reference/target clips and a manifest");
  c_bd->add_option("--out", bd.out, "Output directory");
  c_bd->add_option("--size", bd.size, "Number of base examples")->capture_default_str();
  c_bd->add_option("--augment-fraction", bd.augment_fraction, "Fraction of examples that also get a wet copy")
      ->capture_default_str();
  c_bd->add_option("--test-fraction", bd.test_fraction, "Fraction of examples in the test split")->capture_default_str();
  c_bd->add_option("--seed", bd.seed, "Build seed")->capture_default_str();
  c_bd->add_option("--instruments", bd.instruments, "Procedural instruments in the bank")->capture_default_str();
  c_bd->add_option("--bank-seed", bd.bank_seed, "Bank seed")->capture_default_str();
  c_bd->add_option("--corpus-dir", bd.corpus_dir, "Directory of .mid files (default: procedural corpus)");
  c_bd->add_option("--corpus-size", bd.corpus_size, "Procedural corpus size")->capture_default_str();
  c_bd->add_option("--corpus-seed", bd.corpus_seed, "Procedural corpus seed")->capture_default_str();
  add_range(c_bd, "--eq-gain-db", bd.ranges.eq_gain_db_min, bd.ranges.eq_gain_db_max, "EQ gain range (dB)");
  add_range(c_bd, "--eq-center-hz", bd.ranges.eq_center_min, bd.ranges.eq_center_max, "EQ center range, log-uniform");
  add_range(c_bd, "--eq-q", bd.ranges.eq_q_min, bd.ranges.eq_q_max, "EQ Q range");
  add_range(c_bd, "--drive", bd.ranges.drive_min, bd.ranges.drive_max, "Waveshaper drive range");
  add_range(c_bd, "--reverb-decay", bd.ranges.decay_min, bd.ranges.decay_max, "Reverb decay range (s)");
  add_range(c_bd, "--reverb-wet", bd.ranges.wet_min, bd.ranges.wet_max, "Reverb wet mix range");
  c_bd->add_option("--effect-probability", bd.ranges.enable_probability, "Per-effect enable probability")
      ->capture_default_str();

  TrainCodecArgs tc;
  auto* c_tc = app.add_subcommand("train-codec", "Fit the residual vector quantizer on dataset audio");
  c_tc->add_option("--dataset", tc.dataset, "Dataset directory");
  c_tc->add_option("--out", tc.out, "Codec file to write");
  c_tc->add_option("--split", tc.split, "Manifest split (train|test|all)")->capture_default_str();
  c_tc->add_option("--depth", tc.depth, "Codebooks D")->capture_default_str();
  c_tc->add_option("--codebook-size", tc.codebook_size, "Entries per codebook K_a")->capture_default_str();
  c_tc->add_option("--iterations", tc.iterations, "k-means iterations per stage")->capture_default_str();
  c_tc->add_option("--frames", tc.frames, "Training frames sampled from the dataset")->capture_default_str();
  c_tc->add_option("--seed", tc.seed, "Seed")->capture_default_str();

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a conditional, unconditional or transcription model");
  c_tr->add_option("--mode", tr.mode, "cond|uncond|transcribe")
      ->check(CLI::IsMember({"cond", "uncond", "transcribe"}))
      ->capture_default_str();
  c_tr->add_option("--dataset", tr.dataset, "Dataset directory");
  c_tr->add_option("--codec", tr.codec, "Codec file");
  c_tr->add_option("--run-dir", tr.run_dir, "Run directory (checkpoint, losses, config snapshot)");
  c_tr->add_option("--split", tr.split, "Manifest split")->capture_default_str();
  c_tr->add_option("--preset", tr.preset, "Model preset (toy|full)")->capture_default_str();
  tr.opt.steps = 2000;
  tr.opt.lr = 1e-3;
  tr.opt.warmup_steps = 50;
  tr.opt.min_lr_ratio = 0.1;
  c_tr->add_option("--steps", tr.opt.steps, "Optimizer steps")->capture_default_str();
  c_tr->add_option("--batch-size", tr.opt.batch_size, "Batch size")->capture_default_str();
  c_tr->add_option("--lr", tr.opt.lr, "Peak learning rate")->capture_default_str();
  c_tr->add_option("--warmup", tr.opt.warmup_steps, "Linear warmup steps")->capture_default_str();
  c_tr->add_option("--min-lr-ratio", tr.opt.min_lr_ratio, "Cosine floor as a fraction of --lr (1 = constant)")
      ->capture_default_str();
  c_tr->add_option("--grad-clip", tr.opt.grad_clip, "Global gradient norm clip (0 = off)")->capture_default_str();
  c_tr->add_option("--seed", tr.opt.seed, "Seed")->capture_default_str();
  c_tr->add_option("--log-every", tr.log_every, "Print loss every N steps (0 = quiet)")->capture_default_str();

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synthesize", "Generate audio for MIDI in the timbre of a reference");
  c_sy->add_option("--checkpoint", sy.checkpoint, "Conditional model checkpoint");
  c_sy->add_option("--codec", sy.codec, "Codec file");
  c_sy->add_option("--uncond-checkpoint", sy.uncond_checkpoint, "Unconditional checkpoint (needed for guidance)");
  c_sy->add_option("--midi", sy.midi, "MIDI file to render");
  c_sy->add_option("--timbre-audio", sy.timbre_audio, "Reference WAV");
  c_sy->add_option("--timbre-file", sy.timbre_file, "Embedding file (text dim=<d> header, or .f32)");
  c_sy->add_option("--alpha", sy.alpha, "With both timbre sources: alpha*file + (1-alpha)*audio");
  c_sy->add_flag("--renormalize", sy.renormalize, "L2-normalize an interpolated embedding");
  c_sy->add_option("--top-p", sy.top_p, "Nucleus mass")->capture_default_str();
  c_sy->add_option("--temperature", sy.temperature, "Softmax temperature")->capture_default_str();
  c_sy->add_option("--gamma", sy.gamma, "Guidance scale")->capture_default_str();
  c_sy->add_option("--guidance", sy.guidance, "none|all|first-note")
      ->check(CLI::IsMember({"none", "all", "first-note"}))
      ->capture_default_str();
  c_sy->add_option("--seed", sy.seed, "Sampling seed")->capture_default_str();
  c_sy->add_option("--griffin-lim-iters", sy.griffin_lim_iters, "Phase reconstruction iterations")
      ->capture_default_str();
  c_sy->add_option("--out", sy.out, "Output WAV");
  c_sy->add_option("--tokens-out", sy.tokens_out, "Also write generated tokens as JSON");
  c_sy->add_option("--dataset", sy.dataset, "Batch mode: dataset directory");
  c_sy->add_option("--out-dir", sy.out_dir, "Batch mode: writes {id}_{variant}_{tgt|ref}.wav");
  c_sy->add_option("--split", sy.split, "Batch mode: manifest split")->capture_default_str();

  TranscribeArgs ta;
  auto* c_ta = app.add_subcommand("transcribe", "Transcribe a WAV to notes with a transcription model");
  c_ta->add_option("--checkpoint", ta.checkpoint, "Transcription checkpoint");
  c_ta->add_option("--codec", ta.codec, "Codec file");
  c_ta->add_option("--audio", ta.audio, "Input WAV");
  c_ta->add_option("--out", ta.out, "Output MIDI file");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Score synthesized outputs against dataset targets");
  c_ev->add_option("--dataset", ev.dataset, "Dataset directory");
  c_ev->add_option("--outputs", ev.outputs, "Directory of synthesized WAVs");
  c_ev->add_option("--report", ev.report, "Report directory");
  c_ev->add_option("--transcriber", ev.transcriber, "Transcription checkpoint (enables F-score)");
  c_ev->add_option("--codec", ev.codec, "Codec file (with --transcriber)");
  c_ev->add_option("--split", ev.split, "Manifest split")->capture_default_str();

  InterpolateArgs ip;
  auto* c_ip = app.add_subcommand("interpolate-embed", "Blend two timbre embeddings: alpha*b + (1-alpha)*a");
  c_ip->add_option("--a", ip.a, "First source (WAV or embedding file)");
  c_ip->add_option("--b", ip.b, "Second source (WAV or embedding file)");
  c_ip->add_option("--alpha", ip.alpha, "Blend factor")->capture_default_str();
  c_ip->add_flag("--renormalize", ip.renormalize, "L2-normalize the result");
  c_ip->add_option("--out", ip.out, "Embedding file to write (.f32 for binary)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ConfigError& e) {
    app.exit(e);
    return static_cast<int>(ErrorCategory::config);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorCategory::invalid_argument);
  }

  try {
    if (c_bd->parsed()) cmd_build_dataset(bd);
    if (c_tc->parsed()) cmd_train_codec(tc);
    if (c_tr->parsed()) cmd_train(tr);
    if (c_sy->parsed()) cmd_synthesize(sy);
    if (c_ta->parsed()) cmd_transcribe(ta);
    if (c_ev->parsed()) cmd_evaluate(ev);
    if (c_ip->parsed()) cmd_interpolate(ip);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
