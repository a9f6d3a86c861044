#pragma once

// Training loop over in-memory examples, and conversion of rendered audio
// into model inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "tokensynth/codec.hpp"
#include "tokensynth/error.hpp"
#include "tokensynth/midi_tok.hpp"
#include "tokensynth/model.hpp"
#include "tokensynth/nn.hpp"
#include "tokensynth/timbre.hpp"

namespace tokensynth {

struct TrainOptions {
  int steps = 1000;
  int batch_size = 8;
  double lr = 1e-4;
  double min_lr_ratio = 1.0;  // < 1 enables cosine decay towards lr * ratio
  int warmup_steps = 0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 0) throw InvalidArgument("steps must be non-negative");
    if (batch_size < 1) throw InvalidArgument("batch size must be positive");
    if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
    if (!(min_lr_ratio > 0.0 && min_lr_ratio <= 1.0)) throw InvalidArgument("min_lr_ratio must be in (0, 1]");
    if (warmup_steps < 0) throw InvalidArgument("warmup_steps must be non-negative");
    if (grad_clip < 0.0) throw InvalidArgument("grad_clip must be non-negative");
  }

  double lr_at(int step) const {
    double scale = 1.0;
    if (warmup_steps > 0 && step < warmup_steps) scale = (step + 1.0) / warmup_steps;
    if (min_lr_ratio < 1.0 && steps > 0) {
      const double progress = std::clamp(static_cast<double>(step) / steps, 0.0, 1.0);
      scale *= min_lr_ratio + (1.0 - min_lr_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    return lr * scale;
  }
};

using StepCallback = std::function<void(int step, const StepStats&)>;

// Shuffled passes over `data`; returns the per-step losses.
template <class T>
std::vector<double> train_model(Transformer<T>& model, const std::vector<TrainingExample>& data,
                                const TrainOptions& opt, nn::Adam<T>& adam, const StepCallback& on_step = {}) {
  opt.validate();
  if (data.empty()) throw InvalidArgument("no training examples");
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  adam.grad_clip = opt.grad_clip;
  std::vector<double> losses;
  losses.reserve(opt.steps);
  std::vector<TrainingExample> batch;
  for (int step = 0; step < opt.steps; ++step) {
    batch.clear();
    while (static_cast<int>(batch.size()) < opt.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    adam.lr = opt.lr_at(step);
    const StepStats st = train_step(model, batch, adam, rng);
    losses.push_back(st.loss);
    if (on_step) on_step(step, st);
  }
  return losses;
}

// Mel frames -> aligned audio tokens for one clip, padded/truncated to the
// clip's frame count.
inline AudioTokens encode_audio(const RvqCodec& codec, const MelAnalyzer& analyzer, std::span<const float> pcm,
                                double clip_seconds = kClipTicks * kTickSeconds) {
  const int frames = analyzer.spec().frames_for_seconds(clip_seconds);
  RowMatrixF mel = analyzer.analyze(pcm, clip_seconds);
  if (mel.rows() != frames) {
    RowMatrixF fixed = RowMatrixF::Constant(frames, mel.cols(), static_cast<float>(kLogFloorDb));
    const Eigen::Index n = std::min<Eigen::Index>(frames, mel.rows());
    fixed.topRows(n) = mel.topRows(n);
    mel = std::move(fixed);
  }
  return codec.encode(mel);
}

}  // namespace tokensynth
