#pragma once

// Geometry/appearance projection heads, class heads and the training losses.

#include "neuro3d/autodiff.hpp"
#include "neuro3d/nn.hpp"

#include "json.hpp"

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace neuro3d::decouple {

using ad::Index;
using ad::Matrix;
using ad::Var;

inline constexpr Index kFeatureDim = 1024;
inline constexpr Index kColorClasses = 6;

struct LossConfig {
  double alpha = 0.01;
  double gamma = 0.1;
  double temperature = 0.07;  // initial value of the learnable temperature

  void validate() const {
    if (alpha < 0 || alpha > 1) throw std::invalid_argument("LossConfig: alpha must lie in [0, 1]");
    if (gamma < 0) throw std::invalid_argument("LossConfig: gamma must be non-negative");
    if (!(temperature > 0)) throw std::invalid_argument("LossConfig: temperature must be positive");
  }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"alpha", c.alpha}, {"gamma", c.gamma}, {"temperature", c.temperature}};
}
inline void from_json(const nlohmann::json& j, LossConfig& c) {
  c.alpha = j.at("alpha");
  c.gamma = j.at("gamma");
  c.temperature = j.at("temperature");
}

template <typename T>
struct Mlp2 {
  nn::Linear<T> l1, l2;
  Mlp2() = default;
  Mlp2(Index in, Index hidden, Index out, RandomStream& rng) : l1(in, hidden, rng), l2(hidden, out, rng) {}
  Var<T> operator()(const Var<T>& x) const { return l2(ad::gelu(l1(x))); }
  void collect(nn::ParameterSet<T>& ps, const std::string& p) const {
    l1.collect(ps, p + ".l1");
    l2.collect(ps, p + ".l2");
  }
};

template <typename T>
struct DecoupledFeatures {
  Var<T> geometry;
  Var<T> appearance;
};

template <typename T>
struct DecoupleHeads {
  Index feature_dim = kFeatureDim;
  Index shape_classes = 72;
  Mlp2<T> geometry, appearance;
  nn::Linear<T> shape_head, color_head;
  Var<T> log_scale;  // log(1 / temperature)

  DecoupleHeads() = default;
  DecoupleHeads(Index d_model, Index shape_classes_, RandomStream& rng, double temperature = 0.07,
                Index feature_dim_ = kFeatureDim)
      : feature_dim(feature_dim_), shape_classes(shape_classes_),
        geometry(d_model, feature_dim_, feature_dim_, rng), appearance(d_model, feature_dim_, feature_dim_, rng),
        shape_head(feature_dim_, shape_classes_, rng), color_head(feature_dim_, kColorClasses, rng),
        log_scale(ad::parameter<T>(Matrix<T>::Constant(1, 1, static_cast<T>(std::log(1.0 / temperature))))) {}

  DecoupledFeatures<T> operator()(const Var<T>& pooled) const { return {geometry(pooled), appearance(pooled)}; }

  /// Collects the projection heads and temperature; class heads only when
  /// they take part in the loss.
  void collect(nn::ParameterSet<T>& ps, bool with_class_heads = true, const std::string& p = "decouple") const {
    geometry.collect(ps, p + ".geometry");
    appearance.collect(ps, p + ".appearance");
    ps.add(p + ".log_scale", log_scale, false);
    if (with_class_heads) {
      shape_head.collect(ps, p + ".shape_head");
      color_head.collect(ps, p + ".color_head");
    }
  }
};

/// Symmetric InfoNCE over the B×B cosine-similarity matrix scaled by
/// exp(log_scale), mixed with MSE between the unit-normalized vectors.
template <typename T>
Var<T> align_loss(const Var<T>& f, const Var<T>& fv, const Var<T>& log_scale, double alpha) {
  if (f.rows() != fv.rows() || f.cols() != fv.cols()) throw ad::ShapeError("align_loss: feature shapes differ");
  if (alpha < 0 || alpha > 1) throw std::invalid_argument("align_loss: alpha must lie in [0, 1]");
  const Index b = f.rows();
  auto fn = ad::l2_normalize_rows(f);
  auto vn = ad::l2_normalize_rows(fv);
  auto mse = ad::mse(fn, vn);
  if (alpha == 0) return mse;
  if (b < 2) throw std::invalid_argument("align_loss: the contrastive term needs a batch of at least 2");
  std::vector<int> diag(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
  auto logits = ad::exp(log_scale) * ad::matmul(fn, ad::transpose(vn));
  auto contrastive = ad::scale(ad::cross_entropy<T>(logits, diag) + ad::cross_entropy<T>(ad::transpose(logits), diag), T(0.5));
  if (alpha == 1) return contrastive;
  return ad::scale(contrastive, static_cast<T>(alpha)) + ad::scale(mse, static_cast<T>(1 - alpha));
}

template <typename T>
Var<T> categorical_loss(const DecoupledFeatures<T>& f, std::span<const int> shape_labels, std::span<const int> color_labels,
                        const DecoupleHeads<T>& heads) {
  return ad::cross_entropy<T>(heads.shape_head(f.geometry), shape_labels) +
         ad::cross_entropy<T>(heads.color_head(f.appearance), color_labels);
}

template <typename T>
struct LossBreakdown {
  Var<T> total;
  T align_geometry = 0;
  T align_appearance = 0;
  T categorical = 0;
};

template <typename T>
LossBreakdown<T> total_loss(const DecoupledFeatures<T>& f, const Var<T>& fv, std::span<const int> shape_labels,
                            std::span<const int> color_labels, const DecoupleHeads<T>& heads, const LossConfig& cfg) {
  LossBreakdown<T> out;
  auto ag = align_loss(f.geometry, fv, heads.log_scale, cfg.alpha);
  auto aa = align_loss(f.appearance, fv, heads.log_scale, cfg.alpha);
  out.align_geometry = ag.item();
  out.align_appearance = aa.item();
  out.total = ag + aa;
  if (cfg.gamma > 0) {
    auto lc = categorical_loss(f, shape_labels, color_labels, heads);
    out.categorical = lc.item();
    out.total = out.total + ad::scale(lc, static_cast<T>(cfg.gamma));
  }
  return out;
}

}  // namespace neuro3d::decouple
