#pragma once

// STFT / ISTFT, mel filterbank and Griffin-Lim phase reconstruction.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tokensynth/error.hpp"

namespace tokensynth {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace dsp {

// FFTW planning is not thread-safe; execution on plan-owned buffers is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    if (n < 2) throw InvalidArgument("FFT size must be at least 2");
    time_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    freq_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard lock(fftw_planner_mutex());
    forward_ = fftw_plan_dft_r2c_1d(n, time_, freq_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(n, freq_, time_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(time_);
    fftw_free(freq_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  int size() const { return n_; }
  int bins() const { return n_ / 2 + 1; }

  std::span<double> time() { return {time_, static_cast<std::size_t>(n_)}; }
  std::complex<double>* freq() { return reinterpret_cast<std::complex<double>*>(freq_); }

  void forward() { fftw_execute(forward_); }
  // Unnormalized: result is n times the inverse transform.
  void inverse() { fftw_execute(inverse_); }

 private:
  int n_;
  double* time_ = nullptr;
  fftw_complex* freq_ = nullptr;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

inline int frame_count(std::size_t samples, int hop) {
  return static_cast<int>((samples + hop - 1) / hop);
}

// Centered frames: frame f covers [f*hop - n_fft/2, f*hop + n_fft/2), zero
// outside the signal. Returns frames x bins complex spectrum.
inline std::vector<std::vector<std::complex<double>>> stft(std::span<const float> x,
                                                           int n_fft, int hop) {
  RealFft fft(n_fft);
  const auto window = hann_window(n_fft);
  const int frames = frame_count(x.size(), hop);
  std::vector<std::vector<std::complex<double>>> out(frames);
  auto buf = fft.time();
  for (int f = 0; f < frames; ++f) {
    const long start = static_cast<long>(f) * hop - n_fft / 2;
    for (int i = 0; i < n_fft; ++i) {
      const long s = start + i;
      buf[i] = (s >= 0 && s < static_cast<long>(x.size())) ? x[s] * window[i] : 0.0;
    }
    fft.forward();
    out[f].assign(fft.freq(), fft.freq() + fft.bins());
  }
  return out;
}

// Inverse of stft by weighted overlap-add; output has `samples` samples.
inline std::vector<float> istft(const std::vector<std::vector<std::complex<double>>>& spec,
                                int n_fft, int hop, std::size_t samples) {
  RealFft fft(n_fft);
  const auto window = hann_window(n_fft);
  std::vector<double> acc(samples, 0.0), norm(samples, 0.0);
  for (std::size_t f = 0; f < spec.size(); ++f) {
    std::copy(spec[f].begin(), spec[f].end(), fft.freq());
    fft.inverse();
    auto buf = fft.time();
    const long start = static_cast<long>(f) * hop - n_fft / 2;
    for (int i = 0; i < n_fft; ++i) {
      const long s = start + i;
      if (s < 0 || s >= static_cast<long>(samples)) continue;
      acc[s] += buf[i] / n_fft * window[i];
      norm[s] += window[i] * window[i];
    }
  }
  std::vector<float> y(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    y[s] = norm[s] > 1e-8 ? static_cast<float>(acc[s] / norm[s]) : 0.0f;
  }
  return y;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Center frequencies of `n_mels` triangular filters spanning [0, sr/2].
inline std::vector<double> mel_centers(int n_mels, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> c(n_mels);
  for (int m = 0; m < n_mels; ++m) c[m] = mel_to_hz(top * (m + 1) / (n_mels + 1));
  return c;
}

// n_mels x bins matrix of triangular weights with unit peak.
inline RowMatrixD mel_filterbank(int n_mels, int n_fft, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) edges[i] = mel_to_hz(top * i / (n_mels + 1));
  const int bins = n_fft / 2 + 1;
  RowMatrixD fb = RowMatrixD::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = k * sample_rate / n_fft;
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb(m, k) = w;
    }
  }
  return fb;
}

// Magnitude spectrogram (frames x bins) scaled so a full-scale sinusoid at a
// bin center reads 1.0.
inline RowMatrixD magnitude_spectrogram(std::span<const float> x, int n_fft, int hop) {
  const auto spec = stft(x, n_fft, hop);
  const double scale = 2.0 / (0.5 * n_fft);
  RowMatrixD mag(static_cast<Eigen::Index>(spec.size()), n_fft / 2 + 1);
  for (std::size_t f = 0; f < spec.size(); ++f) {
    for (int k = 0; k <= n_fft / 2; ++k) mag(f, k) = std::abs(spec[f][k]) * scale;
  }
  return mag;
}

// Griffin-Lim: recovers a signal whose STFT magnitude approximates `mag`
// (frames x bins, same scaling as magnitude_spectrogram).
inline std::vector<float> griffin_lim(const RowMatrixD& mag, int n_fft, int hop,
                                      std::size_t samples, int iterations,
                                      unsigned seed = 0) {
  const double scale = 2.0 / (0.5 * n_fft);
  const int frames = static_cast<int>(mag.rows());
  const int bins = static_cast<int>(mag.cols());
  std::vector<std::vector<std::complex<double>>> spec(frames,
                                                      std::vector<std::complex<double>>(bins));
  // Deterministic pseudo-random initial phase.
  std::uint64_t state = 0x9E3779B97F4A7C15ull ^ seed;
  for (int f = 0; f < frames; ++f) {
    for (int k = 0; k < bins; ++k) {
      state = state * 6364136223846793005ull + 1442695040888963407ull;
      const double phase = 2.0 * std::numbers::pi * static_cast<double>(state >> 11) * 0x1.0p-53;
      spec[f][k] = std::polar(mag(f, k) / scale, phase);
    }
  }
  std::vector<float> y = istft(spec, n_fft, hop, samples);
  for (int it = 0; it < iterations; ++it) {
    const auto est = stft(y, n_fft, hop);
    for (int f = 0; f < frames; ++f) {
      for (int k = 0; k < bins; ++k) {
        const double a = std::abs(est[f][k]);
        const std::complex<double> unit = a > 1e-12 ? est[f][k] / a : std::complex<double>(1.0, 0.0);
        spec[f][k] = unit * (mag(f, k) / scale);
      }
    }
    y = istft(spec, n_fft, hop, samples);
  }
  return y;
}

}  // namespace dsp
}  // namespace tokensynth
