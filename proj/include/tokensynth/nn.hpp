#pragma once

// Building blocks with explicit forward/backward passes. Every layer follows
// the row convention y = x W + b, with x holding one position per row.

#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tokensynth/error.hpp"

namespace tokensynth::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
};

// Owns all trainable tensors. Addresses stay stable as parameters are added.
template <class T>
class ParamSet {
 public:
  Param<T>& add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    for (const auto& p : items_) {
      if (p.name == name) throw InvalidArgument("duplicate parameter name: " + name);
    }
    items_.push_back({std::move(name), Mat<T>::Zero(rows, cols), Mat<T>::Zero(rows, cols)});
    return items_.back();
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : items_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : items_) p.grad.setZero();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t size() const { return items_.size(); }
  Param<T>& operator[](std::size_t i) { return items_[i]; }
  const Param<T>& operator[](std::size_t i) const { return items_[i]; }

 private:
  std::deque<Param<T>> items_;
};

template <class T>
void init_normal(Mat<T>& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <class T>
struct Linear {
  Param<T>* weight = nullptr;  // in x out
  Param<T>* bias = nullptr;    // 1 x out

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, Eigen::Index in, Eigen::Index out)
      : weight(&ps.add(name + ".weight", in, out)), bias(&ps.add(name + ".bias", 1, out)) {}

  Mat<T> forward(const Mat<T>& x) const {
    Mat<T> y = x * weight->value;
    y.rowwise() += bias->value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) const {
    weight->grad.noalias() += x.transpose() * dy;
    bias->grad.row(0) += dy.colwise().sum();
    return dy * weight->value.transpose();
  }
};

template <class T>
struct LayerNorm {
  Param<T>* gain = nullptr;
  Param<T>* shift = nullptr;
  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
  };

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, Eigen::Index dim)
      : gain(&ps.add(name + ".gain", 1, dim)), shift(&ps.add(name + ".shift", 1, dim)) {
    gain->value.setOnes();
  }

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat<T> xhat(n, d);
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const T mean = x.row(i).mean();
      const T var = (x.row(i).array() - mean).square().mean();
      rstd[i] = T(1) / std::sqrt(var + T(kEps));
      xhat.row(i) = (x.row(i).array() - mean) * rstd[i];
    }
    Mat<T> y = (xhat.array().rowwise() * gain->value.row(0).array()).matrix();
    y.rowwise() += shift->value.row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dy) const {
    gain->grad.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    shift->grad.row(0) += dy.colwise().sum();
    const Mat<T> dxhat = (dy.array().rowwise() * gain->value.row(0).array()).matrix();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const T m1 = dxhat.row(i).mean();
      const T m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
      dx.row(i) = (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2) * c.rstd[i];
    }
    return dx;
  }
};

// tanh approximation of GELU.
template <class T>
struct Gelu {
  static T value(T x) {
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
  }
  static T derivative(T x) {
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T inner = k * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(inner);
    const T sech2 = T(1) - th * th;
    return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * k * (T(1) + T(3 * 0.044715) * x * x);
  }

  static Mat<T> forward(const Mat<T>& x) { return x.unaryExpr([](T v) { return value(v); }); }
  static Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) {
    return (dy.array() * x.unaryExpr([](T v) { return derivative(v); }).array()).matrix();
  }
};

// Inverted dropout. An empty mask means identity.
template <class T>
struct Dropout {
  static Mat<T> forward(const Mat<T>& x, double rate, std::mt19937_64* rng, Mat<T>* mask) {
    if (rate <= 0.0 || rng == nullptr) {
      if (mask) mask->resize(0, 0);
      return x;
    }
    std::bernoulli_distribution keep(1.0 - rate);
    Mat<T> m(x.rows(), x.cols());
    const T scale = static_cast<T>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : T(0);
    Mat<T> y = (x.array() * m.array()).matrix();
    if (mask) *mask = std::move(m);
    return y;
  }
  static Mat<T> backward(const Mat<T>& mask, const Mat<T>& dy) {
    if (mask.size() == 0) return dy;
    return (dy.array() * mask.array()).matrix();
  }
};

// Row-wise log-softmax.
template <class T>
Mat<T> log_softmax(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

template <class T>
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  long step = 0;
  std::vector<Mat<T>> m, v;

  // Returns the pre-clip global gradient norm.
  double update(ParamSet<T>& params) {
    if (m.size() != params.size()) {
      m.clear();
      v.clear();
      for (const auto& p : params) {
        m.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
        v.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
      }
    }
    double norm2 = 0.0;
    for (const auto& p : params) norm2 += static_cast<double>(p.grad.squaredNorm());
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const T clip = static_cast<T>(grad_clip > 0.0 && norm > grad_clip ? grad_clip / norm : 1.0);
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T alpha = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T e = static_cast<T>(eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      const auto g = (p.grad.array() * clip);
      m[i].array() = b1 * m[i].array() + (T(1) - b1) * g;
      v[i].array() = b2 * v[i].array() + (T(1) - b2) * g * g;
      if (lr != 0.0) {
        p.value.array() -= alpha * m[i].array() / ((v[i].array() * inv_bc2).sqrt() + e);
      }
    }
    return norm;
  }
};

// Sinusoidal code of a (possibly fractional) time index, used to initialize
// time-aligned embedding rows.
template <class T>
RowVec<T> sinusoid(double t, Eigen::Index dim, double scale) {
  RowVec<T> out(dim);
  for (Eigen::Index i = 0; i < dim; i += 2) {
    const double freq = std::pow(1000.0, -static_cast<double>(i) / static_cast<double>(dim));
    out[i] = static_cast<T>(scale * std::sin(t * freq));
    if (i + 1 < dim) out[i + 1] = static_cast<T>(scale * std::cos(t * freq));
  }
  return out;
}

}  // namespace tokensynth::nn
