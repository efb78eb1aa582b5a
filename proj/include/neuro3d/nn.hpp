#pragma once

#include "neuro3d/autodiff.hpp"
#include "neuro3d/random.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuro3d::nn {

using ad::Index;
using ad::Matrix;
using ad::Var;

template <typename T>
struct NamedParameter {
  std::string name;
  Var<T> var;
  bool decay = true;
};

/// Ordered, named view over the trainable tensors of a model.
template <typename T>
class ParameterSet {
 public:
  void add(std::string name, Var<T> var, bool decay = true) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::logic_error("duplicate parameter name: " + name);
    }
    params_.push_back({std::move(name), std::move(var), decay});
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }
  const NamedParameter<T>& operator[](std::size_t i) const { return params_[i]; }

  Var<T> find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p.var;
    }
    throw std::out_of_range("no parameter named " + name);
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.var.value().size());
    return n;
  }

  /// Appends another set under a name prefix.
  void extend(const ParameterSet& other) {
    for (const auto& p : other.params_) add(p.name, p.var, p.decay);
  }

 private:
  std::vector<NamedParameter<T>> params_;
};

template <typename T>
Matrix<T> uniform_matrix(Index rows, Index cols, T bound, RandomStream& rng) {
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return m;
}

template <typename T>
Matrix<T> normal_matrix(Index rows, Index cols, T stddev, RandomStream& rng) {
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
  return m;
}

/// y = x·W + b, W is (in × out).
template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  Linear() = default;
  Linear(Index in, Index out, RandomStream& rng, bool with_bias = true) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in));
    weight = ad::parameter<T>(uniform_matrix<T>(in, out, bound, rng));
    if (with_bias) bias = ad::parameter<T>(uniform_matrix<T>(1, out, bound, rng));
  }

  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }

  Var<T> operator()(const Var<T>& x) const { return ad::linear(x, weight, bias); }

  void collect(ParameterSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".weight", weight);
    if (bias.defined()) ps.add(prefix + ".bias", bias, false);
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gain;
  Var<T> bias;

  LayerNorm() = default;
  explicit LayerNorm(Index width)
      : gain(ad::parameter<T>(Matrix<T>::Ones(1, width))), bias(ad::parameter<T>(Matrix<T>::Zero(1, width))) {}

  Var<T> operator()(const Var<T>& x) const { return ad::layer_norm(x, gain, bias); }

  void collect(ParameterSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".gain", gain, false);
    ps.add(prefix + ".bias", bias, false);
  }
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.95;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight-decay Adam. Moment buffers are keyed by parameter name so
/// they can be checkpointed.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParameterSet<T>& ps) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto& p : ps) {
      if (!p.var.has_grad()) continue;
      auto& value = p.var.mutable_value();
      const Matrix<T>& g = p.var.grad();
      auto [it, inserted] = moments_.try_emplace(p.name);
      if (inserted) {
        it->second.m = Matrix<T>::Zero(value.rows(), value.cols());
        it->second.v = Matrix<T>::Zero(value.rows(), value.cols());
      }
      auto& m = it->second.m;
      auto& v = it->second.v;
      if (p.decay && cfg_.weight_decay > 0) value *= static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
      m = static_cast<T>(cfg_.beta1) * m + static_cast<T>(1.0 - cfg_.beta1) * g;
      v = static_cast<T>(cfg_.beta2) * v + static_cast<T>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const T step_size = static_cast<T>(cfg_.lr / bc1);
      const T inv_bc2 = static_cast<T>(1.0 / bc2);
      const T eps = static_cast<T>(cfg_.eps);
      value.array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
    }
  }

  long long steps() const { return steps_; }
  void set_steps(long long s) { steps_ = s; }
  const AdamWConfig& config() const { return cfg_; }

  struct Moments {
    Matrix<T> m;
    Matrix<T> v;
  };
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  AdamWConfig cfg_;
  long long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& ps, double max_norm) {
  double sq = 0;
  for (const auto& p : ps) {
    if (p.var.has_grad()) sq += static_cast<double>(p.var.grad().squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : ps) {
      if (p.var.has_grad()) p.var.node()->grad *= factor;
    }
  }
  return norm;
}

/// Fixed sinusoidal encoding, rows = positions.
template <typename T>
Matrix<T> sinusoidal_table(Index positions, Index width) {
  Matrix<T> pe(positions, width);
  for (Index pos = 0; pos < positions; ++pos) {
    for (Index i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * freq;
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

/// Sinusoidal embedding of a single scalar (e.g. a diffusion step).
template <typename T>
Matrix<T> sinusoidal_embedding(double value, Index width) {
  Matrix<T> e(1, width);
  const Index half = width / 2;
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e(0, i) = static_cast<T>(std::sin(value * freq));
    e(0, i + half) = static_cast<T>(std::cos(value * freq));
  }
  if (width % 2) e(0, width - 1) = T(0);
  return e;
}

}  // namespace neuro3d::nn
