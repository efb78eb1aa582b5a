#pragma once

// Conditional DDPM over point clouds with an epsilon-predicting per-point
// denoiser.

#include "neuro3d/autodiff.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/pointcloud.hpp"
#include "neuro3d/random.hpp"

#include "json.hpp"

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace neuro3d::diffusion {

using ad::Index;
using ad::Matrix;
using ad::Var;

/// Tables indexed by step t = 1..T (stored at t-1). `model_step[t-1]` is the
/// step the denoiser is told about; it differs from t only for respaced
/// sampling schedules.
struct Schedule {
  std::vector<double> beta, alpha, alpha_bar, sigma;
  std::vector<int> model_step;

  int steps() const { return static_cast<int>(beta.size()); }
  double alpha_bar_prev(int t) const { return t <= 1 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 2)]; }
  double b(int t) const { return beta[idx(t)]; }
  double a(int t) const { return alpha[idx(t)]; }
  double ab(int t) const { return alpha_bar[idx(t)]; }
  double s(int t) const { return sigma[idx(t)]; }

  std::size_t idx(int t) const {
    if (t < 1 || t > steps()) throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return static_cast<std::size_t>(t - 1);
  }
};

namespace detail {

inline void fill_from_alpha_bar(Schedule& s) {
  const std::size_t n = s.alpha_bar.size();
  s.beta.resize(n);
  s.alpha.resize(n);
  s.sigma.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double prev = i == 0 ? 1.0 : s.alpha_bar[i - 1];
    s.alpha[i] = s.alpha_bar[i] / prev;
    s.beta[i] = 1.0 - s.alpha[i];
    s.sigma[i] = std::sqrt(s.beta[i] * (1.0 - prev) / (1.0 - s.alpha_bar[i]));
  }
}

}  // namespace detail

/// Linear beta schedule; sigma_t^2 is the posterior variance.
inline Schedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: need at least one step");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end && (steps == 1 || beta_start < beta_end))) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start < beta_end < 1");
  }
  Schedule s;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  s.sigma.resize(s.beta.size());
  s.model_step.resize(s.beta.size());
  double prod = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    s.beta[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    const double prev = prod;
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
    s.sigma[i] = std::sqrt(s.beta[i] * (1.0 - prev) / (1.0 - prod));
    s.model_step[i] = t;
  }
  return s;
}

/// Evenly strided subset of `count` steps (always including 1 and T), with
/// betas recomputed so that alpha_bar matches the full schedule at the kept
/// steps.
inline Schedule respace(const Schedule& full, int count) {
  const int T = full.steps();
  if (count < 1 || count > T) throw std::invalid_argument("respace: step count must lie in [1, T]");
  Schedule s;
  for (int k = 0; k < count; ++k) {
    const int t = count == 1 ? T : 1 + static_cast<int>(std::llround(static_cast<double>(k) * (T - 1) / (count - 1)));
    s.model_step.push_back(t);
    s.alpha_bar.push_back(full.ab(t));
  }
  detail::fill_from_alpha_bar(s);
  return s;
}

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int sample_steps = 50;
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = {{"steps", c.steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}, {"sample_steps", c.sample_steps}};
}
inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  c.steps = j.at("steps");
  c.beta_start = j.at("beta_start");
  c.beta_end = j.at("beta_end");
  c.sample_steps = j.at("sample_steps");
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename Derived1, typename Derived2>
Points q_sample(const Eigen::MatrixBase<Derived1>& x0, int t, const Eigen::MatrixBase<Derived2>& eps, const Schedule& s) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw std::invalid_argument("q_sample: noise shape differs from cloud");
  const double ab = s.ab(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

/// x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * noise; no noise at t = 1.
template <typename D1, typename D2, typename D3>
Points p_sample_step(const Eigen::MatrixBase<D1>& xt, int t, const Eigen::MatrixBase<D2>& eps_hat, const Schedule& s,
                     const Eigen::MatrixBase<D3>& noise) {
  if (xt.rows() != eps_hat.rows() || xt.cols() != eps_hat.cols() || noise.rows() != xt.rows() || noise.cols() != xt.cols()) {
    throw std::invalid_argument("p_sample_step: shape mismatch");
  }
  Points mean = (xt - (s.b(t) / std::sqrt(1.0 - s.ab(t))) * eps_hat) / std::sqrt(s.a(t));
  if (t > 1) mean += s.s(t) * noise;
  return mean;
}

struct DenoiserConfig {
  Index cond_dim = 1024;
  Index time_dim = 128;
  std::vector<Index> widths{128, 256, 256};
  Index head_width = 256;
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"cond_dim", c.cond_dim}, {"time_dim", c.time_dim}, {"widths", c.widths}, {"head_width", c.head_width}};
}
inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.cond_dim = j.at("cond_dim");
  c.time_dim = j.at("time_dim");
  c.widths = j.at("widths").get<std::vector<Index>>();
  c.head_width = j.at("head_width");
}

/// Per-point MLP with FiLM conditioning on (time, feature), a global
/// max-pooled context concatenated back to every point, and a linear head.
template <typename T>
struct Denoiser {
  DenoiserConfig cfg;
  nn::Linear<T> time1, time2, cond;
  std::vector<nn::Linear<T>> layers, films;
  nn::Linear<T> head1, head2;

  Denoiser() = default;
  Denoiser(const DenoiserConfig& c, RandomStream& rng)
      : cfg(c), time1(c.time_dim, c.time_dim, rng), time2(c.time_dim, c.time_dim, rng), cond(c.cond_dim, c.time_dim, rng) {
    if (c.widths.empty()) throw std::invalid_argument("Denoiser: need at least one per-point layer");
    Index in = 3;
    for (Index w : c.widths) {
      layers.emplace_back(in, w, rng);
      films.emplace_back(c.time_dim, 2 * w, rng);
      in = w;
    }
    head1 = nn::Linear<T>(2 * in, c.head_width, rng);
    head2 = nn::Linear<T>(c.head_width, 3, rng);
  }

  /// x: (B*N × 3) rows grouped per cloud; steps: B model steps; cond: B × cond_dim.
  Var<T> operator()(const Var<T>& x, std::span<const int> steps, const Var<T>& condition) const {
    const Index b = static_cast<Index>(steps.size());
    if (b == 0 || x.rows() % b != 0 || x.cols() != 3) throw ad::ShapeError("denoise: point matrix shape");
    if (condition.rows() != b || condition.cols() != cfg.cond_dim) throw ad::ShapeError("denoise: condition shape");
    const Index n = x.rows() / b;
    Matrix<T> temb(b, cfg.time_dim);
    for (Index i = 0; i < b; ++i) temb.row(i) = nn::sinusoidal_embedding<T>(steps[static_cast<std::size_t>(i)], cfg.time_dim);
    auto ctx = ad::silu(time2(ad::silu(time1(ad::constant<T>(temb)))) + cond(condition));
    Var<T> h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Index w = layers[l].out_features();
      auto film = films[l](ctx);
      auto scale = ad::broadcast_groups(ad::add_scalar(ad::slice_cols(film, 0, w), T(1)), n);
      auto shift = ad::broadcast_groups(ad::slice_cols(film, w, w), n);
      h = ad::silu(layers[l](h) * scale + shift);
    }
    auto global = ad::broadcast_groups(ad::group_max(h, n), n);
    auto out = head2(ad::silu(head1(ad::concat_cols(h, global))));
    if (!out.value().allFinite()) throw std::runtime_error("non-finite activations in denoiser");
    return out;
  }

  void collect(nn::ParameterSet<T>& ps, const std::string& p = "denoiser") const {
    time1.collect(ps, p + ".time1");
    time2.collect(ps, p + ".time2");
    cond.collect(ps, p + ".cond");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].collect(ps, p + ".layer" + std::to_string(l));
      films[l].collect(ps, p + ".film" + std::to_string(l));
    }
    head1.collect(ps, p + ".head1");
    head2.collect(ps, p + ".head2");
  }
};

/// Mean squared error between the injected noise and the prediction for
/// x_t built from x0 (B*N × 3), per-cloud steps and noise.
template <typename T, typename Predictor>
Var<T> diffusion_loss(const Matrix<T>& x0, std::span<const int> steps, const Matrix<T>& eps, const Schedule& s,
                      Predictor&& predict) {
  const Index b = static_cast<Index>(steps.size());
  if (b == 0 || x0.rows() % b != 0 || eps.rows() != x0.rows() || eps.cols() != x0.cols()) {
    throw ad::ShapeError("diffusion_loss: shape mismatch");
  }
  const Index n = x0.rows() / b;
  Matrix<T> xt(x0.rows(), x0.cols());
  std::vector<int> model_steps(steps.size());
  for (Index i = 0; i < b; ++i) {
    const int t = steps[static_cast<std::size_t>(i)];
    const T ca = static_cast<T>(std::sqrt(s.ab(t)));
    const T cb = static_cast<T>(std::sqrt(1.0 - s.ab(t)));
    xt.middleRows(i * n, n) = ca * x0.middleRows(i * n, n) + cb * eps.middleRows(i * n, n);
    model_steps[static_cast<std::size_t>(i)] = s.model_step[s.idx(t)];
  }
  Var<T> pred = predict(ad::constant<T>(xt), std::span<const int>(model_steps));
  return ad::mse(pred, ad::constant<T>(eps));
}

template <typename T>
Var<T> diffusion_loss(const Matrix<T>& x0, std::span<const int> steps, const Matrix<T>& eps, const Schedule& s,
                      const Denoiser<T>& net, const Var<T>& condition) {
  return diffusion_loss<T>(x0, steps, eps, s, [&](const Var<T>& xt, std::span<const int> ms) { return net(xt, ms, condition); });
}

/// Ancestral sampling of one cloud per condition row. Cloud i draws all of
/// its noise from RandomStream(seeds[i]), so results do not depend on how
/// clouds are batched.
template <typename T>
std::vector<PointCloud> sample(const Denoiser<T>& net, const Matrix<T>& conditions, const Schedule& s, Index points,
                               std::span<const std::uint64_t> seeds) {
  const Index b = conditions.rows();
  if (static_cast<Index>(seeds.size()) != b) throw std::invalid_argument("sample: one seed per condition required");
  if (points < 1) throw std::invalid_argument("sample: need at least one point");
  ad::NoGradGuard guard;
  std::vector<RandomStream> rngs;
  for (auto seed : seeds) rngs.emplace_back(seed);
  Points x(b * points, 3);
  for (Index i = 0; i < b; ++i) {
    for (Index r = 0; r < points; ++r) {
      for (int c = 0; c < 3; ++c) x(i * points + r, c) = rngs[static_cast<std::size_t>(i)].normal();
    }
  }
  const auto cond = ad::constant<T>(conditions);
  Points noise(b * points, 3);
  for (int t = s.steps(); t >= 1; --t) {
    std::vector<int> ms(static_cast<std::size_t>(b), s.model_step[s.idx(t)]);
    const Matrix<T> eps_hat = net(ad::constant<T>(x.cast<T>()), ms, cond).value();
    if (t > 1) {
      for (Index i = 0; i < b; ++i) {
        for (Index r = 0; r < points; ++r) {
          for (int c = 0; c < 3; ++c) noise(i * points + r, c) = rngs[static_cast<std::size_t>(i)].normal();
        }
      }
    } else {
      noise.setZero();
    }
    x = p_sample_step(x, t, eps_hat.template cast<double>(), s, noise);
  }
  std::vector<PointCloud> out(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) out[static_cast<std::size_t>(i)].points = x.middleRows(i * points, points);
  return out;
}

}  // namespace neuro3d::diffusion
