#include "neuro3d/color.hpp"
#include "neuro3d/gradcheck.hpp"

#include <gtest/gtest.h>

namespace {

using namespace neuro3d;
using color::Palette;
using ad::Matrix;

PointCloud colored_cloud(const std::vector<int>& classes, const Palette& pal, RandomStream& rng, double jitter = 0.03) {
  PointCloud c;
  c.points.resize(static_cast<Eigen::Index>(classes.size()), 3);
  c.colors.resize(c.points.rows(), 3);
  for (Eigen::Index i = 0; i < c.points.rows(); ++i) {
    c.points.row(i) << rng.normal(), rng.normal(), rng.normal();
    Eigen::RowVector3d rgb = pal.rgb(classes[static_cast<std::size_t>(i)]);
    for (int k = 0; k < 3; ++k) rgb(k) = std::clamp(rgb(k) + jitter * rng.uniform(-1, 1), 0.0, 1.0);
    c.colors.row(i) = rgb;
  }
  return c;
}

std::vector<int> repeated(std::initializer_list<std::pair<int, int>> counts) {
  std::vector<int> v;
  for (auto [cls, n] : counts) v.insert(v.end(), static_cast<std::size_t>(n), cls);
  return v;
}

TEST(DominantColor, Plurality) {
  const auto pal = Palette::standard();
  RandomStream rng(1);
  // red 5, blue 3, green 2.
  EXPECT_EQ(color::dominant_color(colored_cloud(repeated({{2, 3}, {0, 5}, {1, 2}}), pal, rng), pal), 0);
  EXPECT_EQ(color::dominant_color(colored_cloud(repeated({{4, 9}}), pal, rng, 0.0), pal), 4);
  EXPECT_EQ(color::dominant_color(colored_cloud(repeated({{1, 4}, {0, 4}}), pal, rng), pal), 0);
  EXPECT_EQ(color::dominant_color(colored_cloud(repeated({{5, 4}, {3, 4}}), pal, rng), pal), 3);
}

TEST(DominantColor, Errors) {
  const auto pal = Palette::standard();
  EXPECT_THROW(color::dominant_color(PointCloud{}, pal), std::invalid_argument);
  PointCloud bare;
  bare.points = Points::Zero(3, 3);
  EXPECT_THROW(color::dominant_color(bare, pal), std::invalid_argument);
}

TEST(DominantColor, DuplicatingWinnerNeverChangesIt) {
  const auto pal = Palette::standard();
  RandomStream rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> cls(40);
    for (int& c : cls) c = static_cast<int>(rng.below(6));
    auto cloud = colored_cloud(cls, pal, rng);
    const int winner = color::dominant_color(cloud, pal);
    for (int extra = 1; extra <= 5; ++extra) {
      PointCloud more = cloud;
      more.points.conservativeResize(cloud.size() + extra, 3);
      more.colors.conservativeResize(cloud.size() + extra, 3);
      for (int e = 0; e < extra; ++e) {
        more.points.row(cloud.size() + e).setZero();
        more.colors.row(cloud.size() + e) = pal.rgb(winner);
      }
      EXPECT_EQ(color::dominant_color(more, pal), winner);
    }
  }
}

TEST(Palette, JsonRoundTripKeepsOrder) {
  const auto pal = Palette::standard();
  const auto back = Palette::from_json(nlohmann::ordered_json::parse(pal.to_json().dump()));
  ASSERT_EQ(back.size(), 6);
  for (int k = 0; k < 6; ++k) {
    EXPECT_EQ(back.entries[static_cast<std::size_t>(k)].name, pal.entries[static_cast<std::size_t>(k)].name);
    EXPECT_EQ(back.rgb(k), pal.rgb(k));
  }
  auto dup = pal.to_json();
  dup["black"] = dup["red"];
  EXPECT_THROW(Palette::from_json(dup), std::invalid_argument);
}

color::ColorModelConfig small_model() {
  color::ColorModelConfig c;
  c.feature_dim = 12;
  c.point_width = 8;
  c.global_width = 8;
  c.hidden = 10;
  return c;
}

TEST(Colorize, DeterministicPaintedAndPermutationInvariant) {
  const auto pal = Palette::standard();
  RandomStream rng(3);
  color::ColorModel<double> model(small_model(), rng);
  RandomStream data(4);
  PointCloud x;
  x.points = nn::normal_matrix<double>(50, 3, 1.0, data);
  Eigen::VectorXd fa(12);
  for (int i = 0; i < 12; ++i) fa(i) = data.normal();
  const auto a = color::colorize(x, fa, model, pal);
  const auto b = color::colorize(x, fa, model, pal);
  EXPECT_EQ(a.dominant_color, b.dominant_color);
  ASSERT_TRUE(a.has_colors());
  for (Eigen::Index i = 0; i < a.size(); ++i) EXPECT_EQ(a.colors.row(i), pal.rgb(a.dominant_color));
  // Painting then voting returns the predicted class.
  EXPECT_EQ(color::dominant_color(a, pal), a.dominant_color);
  PointCloud shuffled = x;
  std::vector<int> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), data.engine());
  for (int i = 0; i < 50; ++i) shuffled.points.row(i) = x.points.row(perm[static_cast<std::size_t>(i)]);
  EXPECT_EQ(color::colorize(shuffled, fa, model, pal).dominant_color, a.dominant_color);
}

TEST(ColorLoss, UniformAndMargin) {
  auto uniform = ad::constant<double>(Matrix<double>::Zero(3, 6));
  const std::vector<int> labels{0, 3, 5};
  EXPECT_NEAR(color::color_loss(uniform, labels).item(), std::log(6.0), 1e-12);
  EXPECT_NEAR(color::color_loss(uniform, labels).item(), 1.7918, 5e-5);
  Matrix<double> m = Matrix<double>::Zero(3, 6);
  for (int r = 0; r < 3; ++r) m(r, labels[static_cast<std::size_t>(r)]) = 80.0;
  EXPECT_LT(color::color_loss(ad::constant(m), labels).item(), 1e-30);
  const std::vector<int> bad{0, 6, 1};
  EXPECT_THROW(color::color_loss(uniform, bad), std::out_of_range);
}

class ColorGradients : public ::testing::TestWithParam<int> {};

TEST_P(ColorGradients, MatchFiniteDifferences) {
  RandomStream rng(10 + static_cast<std::uint64_t>(GetParam()));
  auto cfg = small_model();
  cfg.point_width = 4 + static_cast<int>(rng.below(6));
  cfg.hidden = 4 + static_cast<int>(rng.below(6));
  color::ColorModel<double> model(cfg, rng);
  nn::ParameterSet<double> ps;
  model.collect(ps);
  const int n = 3 + static_cast<int>(rng.below(5));
  auto pts = ad::constant(nn::normal_matrix<double>(3 * n, 3, 1.0, rng));
  auto fa = ad::constant(nn::normal_matrix<double>(3, cfg.feature_dim, 1.0, rng));
  const std::vector<int> labels{static_cast<int>(rng.below(6)), static_cast<int>(rng.below(6)), static_cast<int>(rng.below(6))};
  auto report = check_gradients(ps, [&] { return color::color_loss(model(pts, fa), labels); });
  EXPECT_LE(report.max_rel_error(), 1e-4) << report.worst()->name;
}

INSTANTIATE_TEST_SUITE_P(RandomConfigs, ColorGradients, ::testing::Range(0, 5));

TEST(ColorModel, LearnsColorEncodedInAppearanceFeature) {
  const auto pal = Palette::standard();
  color::ColorModelConfig cfg;
  cfg.feature_dim = 32;
  cfg.point_width = 16;
  cfg.global_width = 16;
  cfg.hidden = 32;
  RandomStream rng(5);
  color::ColorModel<float> model(cfg, rng);
  nn::ParameterSet<float> ps;
  model.collect(ps);
  nn::AdamW<float> opt;
  Matrix<float> codes = nn::normal_matrix<float>(6, 32, 1.0f, rng);
  auto make_batch = [&](int b, RandomStream& r, Matrix<float>& pts, Matrix<float>& fa, std::vector<int>& y) {
    pts = nn::normal_matrix<float>(b * 32, 3, 1.0f, r);
    fa.resize(b, 32);
    y.resize(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      y[static_cast<std::size_t>(i)] = static_cast<int>(r.below(6));
      fa.row(i) = codes.row(y[static_cast<std::size_t>(i)]) + 0.3f * nn::normal_matrix<float>(1, 32, 1.0f, r);
    }
  };
  Matrix<float> pts, fa;
  std::vector<int> y;
  for (int step = 0; step < 300; ++step) {
    make_batch(32, rng, pts, fa, y);
    ps.zero_grad();
    color::color_loss(model(ad::constant(pts), ad::constant(fa)), y).backward();
    opt.step(ps);
  }
  RandomStream test_rng(6);
  make_batch(400, test_rng, pts, fa, y);
  int correct = 0;
  for (int i = 0; i < 400; ++i) {
    PointCloud c;
    c.points = pts.middleRows(i * 32, 32).cast<double>();
    if (color::colorize(c, fa.row(i).transpose().cast<double>(), model, pal).dominant_color == y[static_cast<std::size_t>(i)]) ++correct;
  }
  EXPECT_GE(correct / 4.0, 95.0);
}

}  // namespace
