#pragma once

// Toy residual-vector-quantization codec over log-mel frames, with the
// multi-codebook delay pattern used to serialize its tokens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tokensynth/dsp.hpp"
#include "tokensynth/error.hpp"
#include "tokensynth/io.hpp"

namespace tokensynth {

inline constexpr int kAudioPad = 0;
inline constexpr double kLogFloorDb = -80.0;

struct FrameSpec {
  int sample_rate = 16000;
  int hop = 320;
  int window = 1024;
  int mel_bins = 64;

  double frame_rate() const { return static_cast<double>(sample_rate) / hop; }

  int frames_for_samples(std::size_t samples) const { return dsp::frame_count(samples, hop); }
  int frames_for_seconds(double seconds) const {
    return static_cast<int>(std::ceil(seconds * sample_rate / hop - 1e-9));
  }

  void validate() const {
    if (sample_rate <= 0 || hop <= 0 || window <= 0 || mel_bins <= 0) {
      throw InvalidArgument("frame spec fields must be positive");
    }
    if (hop > window) throw InvalidArgument("hop must not exceed window");
    if (window & (window - 1)) throw InvalidArgument("window must be a power of two");
  }

  friend bool operator==(const FrameSpec&, const FrameSpec&) = default;
};

// Log-mel front end. Output rows are frames, columns mel bins, values in dB
// relative to full scale with a floor at kLogFloorDb.
class MelAnalyzer {
 public:
  explicit MelAnalyzer(FrameSpec spec = {})
      : spec_(spec),
        filterbank_((spec.validate(),
                     dsp::mel_filterbank(spec.mel_bins, spec.window, spec.sample_rate))) {}

  const FrameSpec& spec() const { return spec_; }
  const RowMatrixD& filterbank() const { return filterbank_; }

  RowMatrixF analyze(std::span<const float> pcm, double max_seconds = 5.0) const {
    for (std::size_t i = 0; i < pcm.size(); ++i) {
      if (!std::isfinite(pcm[i])) throw InvalidArgument("non-finite sample at " + std::to_string(i));
    }
    if (pcm.size() > static_cast<std::size_t>(std::llround(max_seconds * spec_.sample_rate))) {
      throw InvalidArgument("audio longer than clip length");
    }
    const RowMatrixD mag = dsp::magnitude_spectrogram(pcm, spec_.window, spec_.hop);
    const RowMatrixD mel = mag * filterbank_.transpose();
    const double floor = std::pow(10.0, kLogFloorDb / 20.0);
    RowMatrixF out(mel.rows(), mel.cols());
    for (Eigen::Index i = 0; i < mel.rows(); ++i) {
      for (Eigen::Index j = 0; j < mel.cols(); ++j) {
        out(i, j) = static_cast<float>(20.0 * std::log10(std::max(mel(i, j), floor)));
      }
    }
    return out;
  }

  // Approximate inverse of analyze: non-negative least squares for the linear
  // spectrum (multiplicative updates), then Griffin-Lim.
  std::vector<float> synthesize(const RowMatrixF& frames, std::size_t samples,
                                int griffin_lim_iterations = kGriffinLimIterations) const {
    if (frames.cols() != spec_.mel_bins) throw InvalidArgument("mel frame width mismatch");
    const double floor = std::pow(10.0, kLogFloorDb / 20.0);
    RowMatrixD mel(frames.rows(), frames.cols());
    for (Eigen::Index i = 0; i < mel.rows(); ++i) {
      for (Eigen::Index j = 0; j < mel.cols(); ++j) {
        const double lin = std::pow(10.0, frames(i, j) / 20.0);
        mel(i, j) = lin <= floor * 1.0001 ? 0.0 : lin;
      }
    }
    const RowMatrixD& fb = filterbank_;
    const RowMatrixD gram = fb.transpose() * fb;
    RowMatrixD mag = mel * fb;
    const RowMatrixD target = mel * fb;
    for (int it = 0; it < kNnlsIterations; ++it) {
      const RowMatrixD denom = mag * gram;
      mag = (mag.array() * target.array() / (denom.array() + 1e-12)).matrix();
    }
    return dsp::griffin_lim(mag, spec_.window, spec_.hop, samples, griffin_lim_iterations);
  }

  static constexpr int kGriffinLimIterations = 32;
  static constexpr int kNnlsIterations = 20;

 private:
  FrameSpec spec_;
  RowMatrixD filterbank_;
};

enum class TokenLayout : std::uint8_t { aligned = 0, delayed = 1 };

// Token grid, row-major (rows x depth). Valid ids are 1..K_a, kAudioPad = 0.
struct AudioTokens {
  std::vector<int> grid;
  int frames = 0;  // N
  int depth = 0;   // D
  TokenLayout layout = TokenLayout::aligned;

  int rows() const { return layout == TokenLayout::aligned ? frames : frames + depth - 1; }
  int& at(int row, int d) { return grid[static_cast<std::size_t>(row) * depth + d]; }
  int at(int row, int d) const { return grid[static_cast<std::size_t>(row) * depth + d]; }

  static AudioTokens zeros(int frames, int depth, TokenLayout layout) {
    AudioTokens t;
    t.frames = frames;
    t.depth = depth;
    t.layout = layout;
    t.grid.assign(static_cast<std::size_t>(t.rows()) * depth, kAudioPad);
    return t;
  }

  // In the delayed layout, cell (row, d) holds a real token iff
  // d <= row <= frames - 1 + d.
  static bool delayed_cell_live(int row, int d, int frames) {
    return row >= d && row <= frames - 1 + d;
  }

  friend bool operator==(const AudioTokens&, const AudioTokens&) = default;
};

inline AudioTokens delay_apply(const AudioTokens& aligned) {
  if (aligned.layout != TokenLayout::aligned) throw InvalidArgument("delay_apply expects aligned tokens");
  if (aligned.depth < 1 || aligned.frames < 1) throw InvalidArgument("empty token grid");
  AudioTokens out = AudioTokens::zeros(aligned.frames, aligned.depth, TokenLayout::delayed);
  for (int t = 0; t < aligned.frames; ++t) {
    for (int d = 0; d < aligned.depth; ++d) out.at(t + d, d) = aligned.at(t, d);
  }
  return out;
}

inline AudioTokens delay_undo(const AudioTokens& delayed) {
  if (delayed.layout != TokenLayout::delayed) throw InvalidArgument("delay_undo expects delayed tokens");
  if (delayed.grid.size() != static_cast<std::size_t>(delayed.rows()) * delayed.depth) {
    throw InvalidArgument("delayed grid size does not match its shape");
  }
  for (int r = 0; r < delayed.rows(); ++r) {
    for (int d = 0; d < delayed.depth; ++d) {
      const bool live = AudioTokens::delayed_cell_live(r, d, delayed.frames);
      const bool pad = delayed.at(r, d) == kAudioPad;
      if (live == pad) {
        throw ParseError(static_cast<std::size_t>(r) * delayed.depth + d,
                         live ? "PAD inside the delayed token body"
                              : "non-PAD id in the delay margin");
      }
    }
  }
  AudioTokens out = AudioTokens::zeros(delayed.frames, delayed.depth, TokenLayout::aligned);
  for (int t = 0; t < delayed.frames; ++t) {
    for (int d = 0; d < delayed.depth; ++d) out.at(t, d) = delayed.at(t + d, d);
  }
  return out;
}

struct RvqTrainOptions {
  int depth = 4;
  int codebook_size = 256;
  int iterations = 25;
  std::uint64_t seed = 1234;
};

class RvqCodec {
 public:
  RvqCodec() = default;
  RvqCodec(FrameSpec spec, std::vector<RowMatrixF> codebooks)
      : spec_(spec), codebooks_(std::move(codebooks)) {
    if (codebooks_.empty()) throw InvalidArgument("codec needs at least one codebook");
    for (const auto& cb : codebooks_) {
      if (cb.rows() != codebooks_[0].rows() || cb.cols() != spec_.mel_bins) {
        throw InvalidArgument("codebook shape mismatch");
      }
    }
  }

  bool trained() const { return !codebooks_.empty(); }
  int depth() const { return static_cast<int>(codebooks_.size()); }
  int codebook_size() const { return trained() ? static_cast<int>(codebooks_[0].rows()) : 0; }
  int dim() const { return spec_.mel_bins; }
  const FrameSpec& frame_spec() const { return spec_; }
  const RowMatrixF& codebook(int d) const { return codebooks_.at(d); }

  // Greedy residual assignment; ids are 1-based.
  AudioTokens encode(const RowMatrixF& frames) const {
    require_trained();
    if (frames.cols() != dim()) throw InvalidArgument("frame width does not match codec");
    const int n = static_cast<int>(frames.rows());
    AudioTokens tokens = AudioTokens::zeros(n, depth(), TokenLayout::aligned);
    RowMatrixF residual = frames;
    for (int d = 0; d < depth(); ++d) {
      const auto ids = nearest(codebooks_[d], residual);
      for (int t = 0; t < n; ++t) {
        tokens.at(t, d) = ids[t] + 1;
        residual.row(t) -= codebooks_[d].row(ids[t]);
      }
    }
    return tokens;
  }

  RowMatrixF decode(const AudioTokens& tokens) const {
    require_trained();
    if (tokens.layout != TokenLayout::aligned) throw InvalidArgument("decode expects aligned tokens");
    if (tokens.depth != depth()) throw IncompatibleError("token depth does not match codec depth");
    RowMatrixF out = RowMatrixF::Zero(tokens.frames, dim());
    for (int t = 0; t < tokens.frames; ++t) {
      for (int d = 0; d < depth(); ++d) {
        const int id = tokens.at(t, d);
        if (id == kAudioPad) {
          throw ParseError(static_cast<std::size_t>(t) * depth() + d, "PAD id in aligned tokens");
        }
        if (id < 1 || id > codebook_size()) {
          throw ParseError(static_cast<std::size_t>(t) * depth() + d, "audio token id out of range");
        }
        out.row(t) += codebooks_[d].row(id - 1);
      }
    }
    return out;
  }

  // Mean squared residual (per element) after each stage, index 0 = input energy.
  std::vector<double> stage_errors(const RowMatrixF& frames) const {
    require_trained();
    std::vector<double> errs;
    RowMatrixF residual = frames;
    const double count = static_cast<double>(frames.size());
    errs.push_back(residual.cast<double>().squaredNorm() / count);
    for (int d = 0; d < depth(); ++d) {
      const auto ids = nearest(codebooks_[d], residual);
      for (Eigen::Index t = 0; t < residual.rows(); ++t) residual.row(t) -= codebooks_[d].row(ids[t]);
      errs.push_back(residual.cast<double>().squaredNorm() / count);
    }
    return errs;
  }

  // Index of the nearest row of `codebook` for each row of `x`; ties go to
  // the lowest index.
  static std::vector<int> nearest(const RowMatrixF& codebook, const RowMatrixF& x) {
    const Eigen::VectorXf norms = codebook.rowwise().squaredNorm();
    std::vector<int> ids(x.rows());
    constexpr Eigen::Index kBlock = 1024;
    for (Eigen::Index start = 0; start < x.rows(); start += kBlock) {
      const Eigen::Index len = std::min(kBlock, x.rows() - start);
      const RowMatrixF cross = x.middleRows(start, len) * codebook.transpose();
      for (Eigen::Index i = 0; i < len; ++i) {
        int best = 0;
        float best_d = std::numeric_limits<float>::infinity();
        for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
          const float dist = norms[k] - 2.0f * cross(i, k);
          if (dist < best_d) {
            best_d = dist;
            best = static_cast<int>(k);
          }
        }
        ids[start + i] = best;
      }
    }
    return ids;
  }

  void save(const std::filesystem::path& path) const;
  static RvqCodec load(const std::filesystem::path& path);

 private:
  void require_trained() const {
    if (!trained()) throw InvalidArgument("codec is not trained");
  }

  FrameSpec spec_;
  std::vector<RowMatrixF> codebooks_;
};

namespace codec_detail {

inline std::size_t count_distinct_rows(const RowMatrixF& x, std::size_t stop_at) {
  std::set<std::vector<float>> seen;
  for (Eigen::Index i = 0; i < x.rows() && seen.size() < stop_at; ++i) {
    seen.emplace(x.row(i).data(), x.row(i).data() + x.cols());
  }
  return seen.size();
}

// Lloyd's k-means. Initialization: k distinct rows chosen by a seeded shuffle
// (padded with jittered copies if fewer than k distinct rows exist). Empty
// clusters are re-seeded at the worst-fit point. Ends on a centroid update so
// the codebook never increases the error over the zero codebook.
inline RowMatrixF kmeans(const RowMatrixF& x, int k, int iterations, std::mt19937_64& rng) {
  const Eigen::Index n = x.rows(), dim = x.cols();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  RowMatrixF centroids(k, dim);
  std::set<std::vector<float>> used;
  int filled = 0;
  for (Eigen::Index i : order) {
    if (filled == k) break;
    std::vector<float> row(x.row(i).data(), x.row(i).data() + dim);
    if (used.insert(row).second) centroids.row(filled++) = x.row(i);
  }
  const int distinct = filled;
  while (filled < k) {
    centroids.row(filled) = centroids.row(filled % std::max(distinct, 1));
    centroids(filled, filled % dim) += 1e-3f * static_cast<float>(1 + filled / dim);
    ++filled;
  }

  for (int it = 0; it < iterations; ++it) {
    const auto ids = RvqCodec::nearest(centroids, x);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, dim);
    std::vector<long> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(ids[i]) += x.row(i).cast<double>();
      ++counts[ids[i]];
    }
    std::vector<std::pair<double, Eigen::Index>> fit;
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centroids.row(c) = (sums.row(c) / static_cast<double>(counts[c])).cast<float>();
        continue;
      }
      if (fit.empty()) {
        fit.reserve(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          fit.emplace_back((x.row(i) - centroids.row(ids[i])).squaredNorm(), i);
        }
        std::sort(fit.begin(), fit.end(), [](const auto& a, const auto& b) {
          return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
      }
      // Take the next worst-fit point not already used for a re-seed.
      const auto& [err, idx] = fit.front();
      centroids.row(c) = x.row(idx);
      fit.erase(fit.begin());
      (void)err;
    }
  }

  // Codebook entries must be distinct ids.
  std::set<std::vector<float>> rows;
  for (int c = 0; c < k; ++c) {
    std::vector<float> row(centroids.row(c).data(), centroids.row(c).data() + dim);
    int bump = 1;
    while (!rows.insert(row).second) {
      centroids(c, c % dim) += 1e-4f * static_cast<float>(bump++);
      row.assign(centroids.row(c).data(), centroids.row(c).data() + dim);
    }
  }
  return centroids;
}

}  // namespace codec_detail

inline RvqCodec rvq_train(const RowMatrixF& frames, const FrameSpec& spec,
                          const RvqTrainOptions& opt = {}) {
  if (opt.depth < 1 || opt.codebook_size < 1) throw InvalidArgument("depth and codebook size must be positive");
  if (frames.cols() != spec.mel_bins) throw InvalidArgument("frame width does not match frame spec");
  const std::size_t distinct =
      codec_detail::count_distinct_rows(frames, static_cast<std::size_t>(opt.codebook_size));
  if (distinct <= 1) throw InvalidArgument("degenerate training data: all frames identical");
  if (distinct < static_cast<std::size_t>(opt.codebook_size)) {
    throw InvalidArgument("need at least " + std::to_string(opt.codebook_size) +
                          " distinct frames, found " + std::to_string(distinct));
  }
  std::mt19937_64 rng(opt.seed);
  std::vector<RowMatrixF> books;
  RowMatrixF residual = frames;
  for (int d = 0; d < opt.depth; ++d) {
    RowMatrixF cb = codec_detail::kmeans(residual, opt.codebook_size, opt.iterations, rng);
    const auto ids = RvqCodec::nearest(cb, residual);
    for (Eigen::Index t = 0; t < residual.rows(); ++t) residual.row(t) -= cb.row(ids[t]);
    books.push_back(std::move(cb));
  }
  return RvqCodec(spec, std::move(books));
}

inline constexpr char kCodecMagic[8] = {'T', 'S', 'C', 'O', 'D', 'E', 'C', '1'};
inline constexpr std::uint32_t kCodecVersion = 1;

inline void RvqCodec::save(const std::filesystem::path& path) const {
  require_trained();
  io::BinaryWriter w(path);
  w.bytes(kCodecMagic, sizeof kCodecMagic);
  w.u32(kCodecVersion);
  w.u32(static_cast<std::uint32_t>(depth()));
  w.u32(static_cast<std::uint32_t>(codebook_size()));
  w.u32(static_cast<std::uint32_t>(dim()));
  w.u32(static_cast<std::uint32_t>(spec_.sample_rate));
  w.u32(static_cast<std::uint32_t>(spec_.hop));
  w.u32(static_cast<std::uint32_t>(spec_.window));
  w.u32(static_cast<std::uint32_t>(spec_.mel_bins));
  for (const auto& cb : codebooks_) w.f32s(std::span<const float>(cb.data(), cb.size()));
  w.close();
}

inline RvqCodec RvqCodec::load(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCodecMagic, sizeof magic)) throw ParseError(0, path.string() + ": not a codec checkpoint");
  if (const auto v = r.u32(); v != kCodecVersion) {
    throw IncompatibleError(path.string() + ": unsupported codec version " + std::to_string(v));
  }
  const int depth = static_cast<int>(r.u32());
  const int k = static_cast<int>(r.u32());
  const int dim = static_cast<int>(r.u32());
  FrameSpec spec;
  spec.sample_rate = static_cast<int>(r.u32());
  spec.hop = static_cast<int>(r.u32());
  spec.window = static_cast<int>(r.u32());
  spec.mel_bins = static_cast<int>(r.u32());
  if (depth < 1 || depth > 64 || k < 1 || k > (1 << 20) || dim != spec.mel_bins) {
    throw ParseError(12, path.string() + ": implausible codec header");
  }
  spec.validate();
  std::vector<RowMatrixF> books;
  for (int d = 0; d < depth; ++d) {
    RowMatrixF cb(k, dim);
    r.f32s(std::span<float>(cb.data(), cb.size()));
    books.push_back(std::move(cb));
  }
  r.expect_end();
  return RvqCodec(spec, std::move(books));
}

}  // namespace tokensynth
