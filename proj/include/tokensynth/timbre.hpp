#pragma once

// Timbre embeddings: providers, interpolation and the projection head that
// maps them into the transformer's embedding space.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "tokensynth/codec.hpp"
#include "tokensynth/error.hpp"
#include "tokensynth/io.hpp"
#include "tokensynth/nn.hpp"
#include "tokensynth/wav.hpp"

namespace tokensynth {

enum class EmbeddingSource { audio, text_file, interpolated };

struct TimbreEmbedding {
  std::vector<float> vector;
  EmbeddingSource source = EmbeddingSource::audio;
  bool silent = false;  // input had no active frames; vector is canonical

  std::size_t dim() const { return vector.size(); }
};

inline double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

// e_alpha = alpha * e_t + (1 - alpha) * e_a, without renormalization unless
// `renormalize` is set. alpha outside [0, 1] extrapolates.
inline TimbreEmbedding interpolate(const TimbreEmbedding& e_a, const TimbreEmbedding& e_t,
                                   double alpha, bool renormalize = false) {
  if (e_a.dim() != e_t.dim()) throw InvalidArgument("embedding dimensions differ");
  if (!std::isfinite(alpha)) throw InvalidArgument("alpha must be finite");
  TimbreEmbedding out;
  out.source = EmbeddingSource::interpolated;
  out.vector.resize(e_a.dim());
  for (std::size_t i = 0; i < e_a.dim(); ++i) {
    out.vector[i] = static_cast<float>(alpha * e_t.vector[i] + (1.0 - alpha) * e_a.vector[i]);
  }
  if (renormalize) {
    const double n = l2_norm(out.vector);
    if (n > 0.0) {
      for (auto& x : out.vector) x = static_cast<float>(x / n);
    }
  }
  return out;
}

// Text format: a `dim=<d>` header line then whitespace-separated floats.
// Files ending in `.f32` hold raw little-endian float32 values instead.
inline TimbreEmbedding load_embedding_file(const std::filesystem::path& path, std::size_t expected_dim) {
  TimbreEmbedding e;
  e.source = EmbeddingSource::text_file;
  if (path.extension() == ".f32") {
    io::BinaryReader r(path);
    if (r.remaining() % 4 != 0) throw ParseError(0, path.string() + ": size is not a multiple of 4");
    e.vector.resize(r.remaining() / 4);
    r.f32s(e.vector);
  } else {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embedding file: " + path.string());
    std::string header;
    std::getline(in, header);
    if (header.rfind("dim=", 0) != 0) throw ParseError(0, path.string() + ": missing dim=<d> header");
    std::size_t dim = 0;
    try {
      dim = std::stoul(header.substr(4));
    } catch (const std::exception&) {
      throw ParseError(0, path.string() + ": bad dim header");
    }
    std::string tok;
    while (in >> tok) {
      try {
        std::size_t used = 0;
        const float v = std::stof(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        e.vector.push_back(v);
      } catch (const std::out_of_range&) {
        throw NumericError(path.string() + ": value out of range: " + tok);
      } catch (const std::exception&) {
        if (tok == "nan" || tok == "NaN" || tok == "inf" || tok == "-inf") {
          throw NumericError(path.string() + ": non-finite value");
        }
        throw ParseError(e.vector.size(), path.string() + ": not a number: " + tok);
      }
    }
    if (e.vector.size() != dim) {
      throw ParseError(e.vector.size(), path.string() + ": header says " + std::to_string(dim) +
                                            " values, found " + std::to_string(e.vector.size()));
    }
  }
  for (std::size_t i = 0; i < e.vector.size(); ++i) {
    if (!std::isfinite(e.vector[i])) throw NumericError(path.string() + ": non-finite value at " + std::to_string(i));
  }
  if (e.vector.size() != expected_dim) {
    throw IncompatibleError(path.string() + ": embedding has dimension " + std::to_string(e.vector.size()) +
                            ", expected " + std::to_string(expected_dim));
  }
  return e;
}

inline void write_embedding_file(const TimbreEmbedding& e, const std::filesystem::path& path) {
  if (path.extension() == ".f32") {
    io::BinaryWriter w(path);
    w.f32s(e.vector);
    w.close();
    return;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embedding file: " + path.string());
  out << "dim=" << e.vector.size() << "\n" << std::setprecision(std::numeric_limits<float>::max_digits10);
  for (std::size_t i = 0; i < e.vector.size(); ++i) out << e.vector[i] << (i + 1 == e.vector.size() ? "\n" : " ");
  if (!out) throw IoError("write failed: " + path.string());
}

class TimbreProvider {
 public:
  virtual ~TimbreProvider() = default;
  virtual std::size_t dim() const = 0;
  // Embeds whatever `source` names: a WAV file for audio providers, an
  // embedding file for file providers.
  virtual TimbreEmbedding embed(const std::filesystem::path& source) const = 0;
};

// Deterministic stand-in for an audio encoder. Features over active log-mel
// frames: per-band mean of frame-relative level, per-band standard deviation
// of absolute level, and mean/std of spectral centroid and bandwidth. The
// result is L2-normalized.
class SpectralFeaturizer : public TimbreProvider {
 public:
  static constexpr int kBands = 30;
  static constexpr int kDim = 2 * kBands + 4;
  static constexpr double kActiveThresholdDb = -60.0;
  static constexpr double kMinSeconds = 0.5;

  explicit SpectralFeaturizer(FrameSpec spec = {}) : analyzer_(spec) {}

  std::size_t dim() const override { return kDim; }

  TimbreEmbedding embed(const std::filesystem::path& source) const override {
    const Audio a = read_wav(source);
    if (a.sample_rate != analyzer_.spec().sample_rate) {
      throw IncompatibleError(source.string() + ": sample rate " + std::to_string(a.sample_rate) +
                              " differs from the analyzer's " + std::to_string(analyzer_.spec().sample_rate));
    }
    return embed_audio(a.samples);
  }

  TimbreEmbedding embed_audio(std::span<const float> pcm) const {
    const auto& spec = analyzer_.spec();
    if (pcm.size() < static_cast<std::size_t>(kMinSeconds * spec.sample_rate)) {
      throw InvalidArgument("timbre reference shorter than 0.5 s");
    }
    return embed_frames(analyzer_.analyze(pcm, std::numeric_limits<double>::infinity()));
  }

  TimbreEmbedding embed_frames(const RowMatrixF& mel) const {
    const int bins = static_cast<int>(mel.cols());
    std::vector<int> band_of(bins);
    for (int b = 0; b < bins; ++b) band_of[b] = std::min(kBands - 1, b * kBands / bins);

    std::vector<double> shape_sum(kBands, 0.0), level_sum(kBands, 0.0), level_sq(kBands, 0.0);
    std::vector<int> band_size(kBands, 0);
    for (int b = 0; b < bins; ++b) ++band_size[band_of[b]];
    double c_sum = 0.0, c_sq = 0.0, w_sum = 0.0, w_sq = 0.0;
    int active = 0;
    std::vector<double> band(kBands);
    for (Eigen::Index t = 0; t < mel.rows(); ++t) {
      if (mel.row(t).maxCoeff() < kActiveThresholdDb) continue;
      ++active;
      std::fill(band.begin(), band.end(), 0.0);
      for (int b = 0; b < bins; ++b) band[band_of[b]] += mel(t, b);
      double frame_mean = 0.0;
      for (int k = 0; k < kBands; ++k) {
        band[k] /= band_size[k];
        frame_mean += band[k] / kBands;
      }
      for (int k = 0; k < kBands; ++k) {
        shape_sum[k] += band[k] - frame_mean;
        level_sum[k] += band[k];
        level_sq[k] += band[k] * band[k];
      }
      // Centroid and bandwidth over mel bins, weighted by level above floor.
      double wsum = 0.0, m1 = 0.0, m2 = 0.0;
      for (int b = 0; b < bins; ++b) {
        const double w = mel(t, b) - kLogFloorDb;
        wsum += w;
        m1 += w * b;
        m2 += w * b * b;
      }
      const double centroid = wsum > 0 ? m1 / wsum : 0.0;
      const double spread = wsum > 0 ? std::sqrt(std::max(0.0, m2 / wsum - centroid * centroid)) : 0.0;
      c_sum += centroid / bins;
      c_sq += (centroid / bins) * (centroid / bins);
      w_sum += spread / bins;
      w_sq += (spread / bins) * (spread / bins);
    }

    TimbreEmbedding e;
    e.source = EmbeddingSource::audio;
    e.vector.assign(kDim, 0.0f);
    if (active == 0) {
      e.silent = true;
      std::fill(e.vector.begin(), e.vector.end(), static_cast<float>(1.0 / std::sqrt(kDim)));
      return e;
    }
    auto std_of = [&](double s, double sq) {
      const double m = s / active;
      return std::sqrt(std::max(0.0, sq / active - m * m));
    };
    for (int k = 0; k < kBands; ++k) {
      e.vector[k] = static_cast<float>(shape_sum[k] / active / 20.0);
      e.vector[kBands + k] = static_cast<float>(std_of(level_sum[k], level_sq[k]) / 20.0);
    }
    e.vector[2 * kBands + 0] = static_cast<float>(c_sum / active - 0.5);
    e.vector[2 * kBands + 1] = static_cast<float>(std_of(c_sum, c_sq));
    e.vector[2 * kBands + 2] = static_cast<float>(w_sum / active);
    e.vector[2 * kBands + 3] = static_cast<float>(std_of(w_sum, w_sq));
    const double n = l2_norm(e.vector);
    for (auto& x : e.vector) x = static_cast<float>(x / n);
    return e;
  }

 private:
  MelAnalyzer analyzer_;
};

class EmbeddingFileProvider : public TimbreProvider {
 public:
  explicit EmbeddingFileProvider(std::size_t dim) : dim_(dim) {}
  std::size_t dim() const override { return dim_; }
  TimbreEmbedding embed(const std::filesystem::path& source) const override {
    return load_embedding_file(source, dim_);
  }

 private:
  std::size_t dim_;
};

// Two affine maps with a GELU between: d_clap -> d_emb -> d_emb.
template <class T>
struct ProjectionHead {
  nn::Linear<T> first;
  nn::Linear<T> second;

  struct Cache {
    nn::Mat<T> input, hidden_pre, hidden;
  };

  ProjectionHead() = default;
  ProjectionHead(nn::ParamSet<T>& ps, Eigen::Index d_clap, Eigen::Index d_emb)
      : first(ps, "timbre_proj.0", d_clap, d_emb), second(ps, "timbre_proj.1", d_emb, d_emb) {}

  Eigen::Index input_dim() const { return first.weight->value.rows(); }
  Eigen::Index output_dim() const { return second.weight->value.cols(); }

  nn::Mat<T> forward(const nn::Mat<T>& e, Cache* cache) const {
    nn::Mat<T> pre = first.forward(e);
    nn::Mat<T> h = nn::Gelu<T>::forward(pre);
    nn::Mat<T> out = second.forward(h);
    if (cache) {
      cache->input = e;
      cache->hidden_pre = std::move(pre);
      cache->hidden = std::move(h);
    }
    return out;
  }

  // Accumulates parameter gradients; returns d(loss)/d(e).
  nn::Mat<T> backward(const Cache& c, const nn::Mat<T>& dout) const {
    const nn::Mat<T> dh = second.backward(c.hidden, dout);
    const nn::Mat<T> dpre = nn::Gelu<T>::backward(c.hidden_pre, dh);
    return first.backward(c.input, dpre);
  }
};

}  // namespace tokensynth
