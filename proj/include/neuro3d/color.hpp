#pragma once

// Six-entry color palette, majority-vote dominant color, and the object-level
// coloring model.

#include "neuro3d/autodiff.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/pointcloud.hpp"

#include "json.hpp"

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuro3d::color {

using ad::Index;
using ad::Matrix;
using ad::Var;

inline constexpr int kClasses = 6;

struct PaletteEntry {
  std::string name;
  Eigen::RowVector3d rgb;
};

struct Palette {
  std::vector<PaletteEntry> entries;

  static Palette standard() {
    return {{{"red", {0.85, 0.15, 0.15}},
             {"green", {0.15, 0.70, 0.20}},
             {"blue", {0.15, 0.30, 0.85}},
             {"yellow", {0.95, 0.85, 0.15}},
             {"white", {0.85, 0.85, 0.85}},
             {"black", {0.12, 0.12, 0.12}}}};
  }

  int size() const { return static_cast<int>(entries.size()); }
  const Eigen::RowVector3d& rgb(int k) const { return entries.at(static_cast<std::size_t>(k)).rgb; }

  void validate() const {
    if (size() != kClasses) throw std::invalid_argument("palette must have exactly 6 entries");
    for (int i = 0; i < size(); ++i) {
      const auto& c = rgb(i);
      if ((c.array() < 0).any() || (c.array() > 1).any()) throw std::invalid_argument("palette entry " + entries[static_cast<std::size_t>(i)].name + " outside [0,1]");
      for (int j = 0; j < i; ++j) {
        if ((rgb(j) - c).norm() == 0) throw std::invalid_argument("palette entries must be pairwise distinct");
      }
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& e : entries) j[e.name] = {e.rgb(0), e.rgb(1), e.rgb(2)};
    return j;
  }

  /// Entry order in the file defines the class indices.
  static Palette from_json(const nlohmann::ordered_json& j) {
    Palette p;
    for (const auto& [name, v] : j.items()) {
      if (!v.is_array() || v.size() != 3) throw std::invalid_argument("palette entry " + name + " must be [r, g, b]");
      p.entries.push_back({name, {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()}});
    }
    p.validate();
    return p;
  }
};

/// Index of the palette centroid nearest to `rgb`; ties go to the lower index.
inline int nearest_entry(const Eigen::RowVector3d& rgb, const Palette& palette) {
  int best = 0;
  double best_d = (rgb - palette.rgb(0)).squaredNorm();
  for (int k = 1; k < palette.size(); ++k) {
    const double d = (rgb - palette.rgb(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

/// Plurality class from per-class counts, ties to the lowest index.
inline int plurality(std::span<const long long> counts) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(counts.size()); ++k) {
    if (counts[static_cast<std::size_t>(k)] > counts[static_cast<std::size_t>(best)]) best = k;
  }
  return best;
}

inline int dominant_color(const PointCloud& gt, const Palette& palette) {
  if (gt.size() == 0) throw std::invalid_argument("dominant_color: empty cloud");
  if (!gt.has_colors()) throw std::invalid_argument("dominant_color: cloud has no colors");
  std::vector<long long> counts(static_cast<std::size_t>(palette.size()), 0);
  for (Index i = 0; i < gt.size(); ++i) ++counts[static_cast<std::size_t>(nearest_entry(gt.colors.row(i), palette))];
  return plurality(counts);
}

struct ColorModelConfig {
  Index feature_dim = 1024;
  Index point_width = 64;
  Index global_width = 128;
  Index hidden = 128;
};

inline void to_json(nlohmann::json& j, const ColorModelConfig& c) {
  j = {{"feature_dim", c.feature_dim}, {"point_width", c.point_width}, {"global_width", c.global_width}, {"hidden", c.hidden}};
}
inline void from_json(const nlohmann::json& j, ColorModelConfig& c) {
  c.feature_dim = j.at("feature_dim");
  c.point_width = j.at("point_width");
  c.global_width = j.at("global_width");
  c.hidden = j.at("hidden");
}

/// Per-point MLP, max-pool over points, concatenated with a projection of
/// the appearance feature, then a two-layer classifier over the palette.
template <typename T>
struct ColorModel {
  ColorModelConfig cfg;
  nn::Linear<T> p1, p2, appearance, h1, h2;

  ColorModel() = default;
  ColorModel(const ColorModelConfig& c, RandomStream& rng)
      : cfg(c), p1(3, c.point_width, rng), p2(c.point_width, c.global_width, rng), appearance(c.feature_dim, c.global_width, rng),
        h1(2 * c.global_width, c.hidden, rng), h2(c.hidden, kClasses, rng) {}

  /// points: (B*N × 3) grouped per cloud; f_a: B × feature_dim. Returns B × 6 logits.
  Var<T> operator()(const Var<T>& points, const Var<T>& f_a) const {
    const Index b = f_a.rows();
    if (b == 0 || points.rows() % b != 0 || points.cols() != 3) throw ad::ShapeError("color model: point matrix shape");
    const Index n = points.rows() / b;
    auto g = ad::group_max(ad::silu(p2(ad::silu(p1(points)))), n);
    auto a = ad::silu(appearance(f_a));
    return h2(ad::silu(h1(ad::concat_cols(g, a))));
  }

  void collect(nn::ParameterSet<T>& ps, const std::string& p = "color") const {
    p1.collect(ps, p + ".p1");
    p2.collect(ps, p + ".p2");
    appearance.collect(ps, p + ".appearance");
    h1.collect(ps, p + ".h1");
    h2.collect(ps, p + ".h2");
  }
};

template <typename T>
Var<T> color_loss(const Var<T>& logits, std::span<const int> labels) {
  if (logits.cols() != kClasses) throw ad::ShapeError("color_loss: expected 6 logits per object");
  return ad::cross_entropy<T>(logits, labels);
}

/// Predicts one palette class for the object and paints every point with it.
template <typename T>
PointCloud colorize(const PointCloud& x, const Eigen::VectorXd& f_a, const ColorModel<T>& model, const Palette& palette) {
  ad::NoGradGuard guard;
  const Matrix<T> logits = model(ad::constant<T>(x.points.cast<T>()), ad::constant<T>(Matrix<T>(f_a.transpose().cast<T>()))).value();
  Index cls = 0;
  for (Index k = 1; k < logits.cols(); ++k) {
    if (logits(0, k) > logits(0, cls)) cls = k;
  }
  PointCloud out = x;
  out.colors = palette.rgb(static_cast<int>(cls)).replicate(x.size(), 1);
  out.dominant_color = static_cast<int>(cls);
  return out;
}

}  // namespace neuro3d::color
