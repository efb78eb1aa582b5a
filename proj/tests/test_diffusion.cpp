#include "neuro3d/diffusion.hpp"
#include "neuro3d/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace {

using namespace neuro3d;
using diffusion::Schedule;
using ad::Matrix;

TEST(Schedule, LinearDefaultTerminalState) {
  const auto s = diffusion::make_schedule(1000, 1e-4, 0.02);
  // Oracle: direct product of (1 - beta_t) in long double.
  long double prod = 1;
  for (int t = 1; t <= 1000; ++t) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * (t - 1) / 999.0L);
  EXPECT_NEAR(s.ab(1000), static_cast<double>(prod), 1e-15);
  EXPECT_LT(s.ab(1000), 1e-4);
  for (int t = 1; t <= 1000; ++t) {
    EXPECT_TRUE(std::isfinite(s.b(t)) && std::isfinite(s.s(t)));
    EXPECT_GE(s.s(t), 0.0);
    if (t > 1) {
      EXPECT_LT(s.ab(t), s.ab(t - 1));
      EXPECT_GT(s.b(t), s.b(t - 1));
    }
  }
  EXPECT_EQ(s.s(1), 0.0);
}

TEST(Schedule, SingleStep) {
  const auto s = diffusion::make_schedule(1, 0.3, 0.5);
  EXPECT_DOUBLE_EQ(s.ab(1), 1 - 0.3);
}

TEST(Schedule, InvalidRangesRejected) {
  EXPECT_THROW(diffusion::make_schedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(diffusion::make_schedule(10, 0.02, 0.01), std::invalid_argument);
  EXPECT_THROW(diffusion::make_schedule(10, 0.01, 1.0), std::invalid_argument);
  EXPECT_THROW(diffusion::make_schedule(0, 0.01, 0.02), std::invalid_argument);
  const auto s = diffusion::make_schedule(10, 0.01, 0.02);
  EXPECT_THROW(s.ab(0), std::out_of_range);
  EXPECT_THROW(s.ab(11), std::out_of_range);
}

TEST(Schedule, RespacedKeepsMarginals) {
  const auto full = diffusion::make_schedule(1000, 1e-4, 0.02);
  const auto r = diffusion::respace(full, 50);
  ASSERT_EQ(r.steps(), 50);
  EXPECT_EQ(r.model_step.front(), 1);
  EXPECT_EQ(r.model_step.back(), 1000);
  for (int k = 1; k <= 50; ++k) {
    EXPECT_DOUBLE_EQ(r.ab(k), full.ab(r.model_step[static_cast<std::size_t>(k - 1)]));
    EXPECT_GT(r.b(k), 0.0);
    EXPECT_LT(r.b(k), 1.0);
    EXPECT_GE(r.s(k), 0.0);
  }
  // Identity respacing reproduces the full schedule.
  const auto same = diffusion::respace(full, 1000);
  for (int t = 1; t <= 1000; t += 37) EXPECT_NEAR(same.b(t), full.b(t), 1e-12);
}

TEST(QSample, Limits) {
  const auto s = diffusion::make_schedule(1000, 1e-4, 0.02);
  RandomStream rng(1);
  Points x0(20, 3), eps(20, 3);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    x0.data()[i] = rng.normal();
    eps.data()[i] = rng.normal();
  }
  const Points zero = Points::Zero(20, 3);
  EXPECT_LT((diffusion::q_sample(x0, 300, zero, s) - std::sqrt(s.ab(300)) * x0).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((diffusion::q_sample(x0, 1000, eps, s) - eps).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_THROW(diffusion::q_sample(x0, 5, Points::Zero(19, 3), s), std::invalid_argument);
}

// Stepwise forward chain x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) e versus
// the closed-form marginal N(sqrt(abar_t) x0, 1 - abar_t).
TEST(QSample, MarkovChainMatchesClosedForm) {
  const auto s = diffusion::make_schedule(1000, 1e-4, 0.02);
  constexpr int kTrials = 100000;
  const double x0 = 0.8;
  RandomStream rng(2);
  std::vector<double> x(kTrials, x0);
  for (int t = 1; t <= 1000; ++t) {
    const double ca = std::sqrt(s.a(t)), cb = std::sqrt(s.b(t));
    for (double& v : x) v = ca * v + cb * rng.normal();
    if (t == 10 || t == 100 || t == 1000) {
      double m = 0, m2 = 0;
      for (double v : x) m += v;
      m /= kTrials;
      for (double v : x) m2 += (v - m) * (v - m);
      const double sd = std::sqrt(m2 / (kTrials - 1));
      const double mean_cf = std::sqrt(s.ab(t)) * x0;
      const double sd_cf = std::sqrt(1 - s.ab(t));
      // Mean relative to the marginal's RMS scale (the mean itself vanishes at T).
      EXPECT_LE(std::abs(m - mean_cf), 0.01 * std::hypot(mean_cf, sd_cf)) << "t=" << t;
      EXPECT_LE(std::abs(sd - sd_cf), 0.01 * sd_cf) << "t=" << t;
    }
  }
}

TEST(PSampleStep, InvertsQSampleAtStepOne) {
  const auto s = diffusion::make_schedule(1000, 1e-4, 0.02);
  RandomStream rng(3);
  Points x0(10, 3), eps(10, 3), noise(10, 3);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    x0.data()[i] = rng.normal();
    eps.data()[i] = rng.normal();
    noise.data()[i] = rng.normal();
  }
  const Points x1 = diffusion::q_sample(x0, 1, eps, s);
  // Noise is ignored at t = 1.
  EXPECT_LT((diffusion::p_sample_step(x1, 1, eps, s, noise) - x0).cwiseAbs().maxCoeff(), 1e-12);
  const Points zero = Points::Zero(10, 3);
  const Points a = diffusion::p_sample_step(x1, 7, eps, s, zero);
  EXPECT_EQ(a, diffusion::p_sample_step(x1, 7, eps, s, zero));
  EXPECT_EQ(a.rows(), 10);
  EXPECT_NE(a, diffusion::p_sample_step(x1, 7, eps, s, noise));
}

diffusion::DenoiserConfig tiny_denoiser(RandomStream& rng) {
  diffusion::DenoiserConfig c;
  c.cond_dim = 3 + static_cast<int>(rng.below(4));
  c.time_dim = 4 + 2 * static_cast<int>(rng.below(3));
  c.widths = {4 + static_cast<int>(rng.below(3)), 5};
  c.head_width = 6;
  return c;
}

TEST(Denoiser, PermutationEquivariantAndConditioned) {
  diffusion::DenoiserConfig c;
  c.cond_dim = 16;
  c.time_dim = 16;
  c.widths = {16, 32, 32};
  c.head_width = 32;
  RandomStream rng(4);
  diffusion::Denoiser<double> net(c, rng);
  RandomStream data(5);
  Matrix<double> x = nn::normal_matrix<double>(2 * 30, 3, 1.0, data);
  Matrix<double> cond = nn::normal_matrix<double>(2, 16, 1.0, data);
  const std::vector<int> steps{17, 640};
  const Matrix<double> y = net(ad::constant(x), steps, ad::constant(cond)).value();
  std::vector<int> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), data.engine());
  Matrix<double> xp = x;
  for (int i = 0; i < 30; ++i) xp.row(30 + i) = x.row(30 + perm[static_cast<std::size_t>(i)]);
  const Matrix<double> yp = net(ad::constant(xp), steps, ad::constant(cond)).value();
  EXPECT_LT((yp.topRows(30) - y.topRows(30)).cwiseAbs().maxCoeff(), 1e-12);
  for (int i = 0; i < 30; ++i) {
    EXPECT_LT((yp.row(30 + i) - y.row(30 + perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-6);
  }
  Matrix<double> cond2 = cond;
  cond2.row(0) = nn::normal_matrix<double>(1, 16, 1.0, data);
  const Matrix<double> y2 = net(ad::constant(x), steps, ad::constant(cond2)).value();
  EXPECT_GT((y2.topRows(30) - y.topRows(30)).norm(), 1e-6);
  EXPECT_EQ(y2.bottomRows(30), y.bottomRows(30));  // clouds do not interact
  EXPECT_EQ(net(ad::constant(x), steps, ad::constant(cond)).value(), y);
}

TEST(DiffusionLoss, OracleAndZeroPredictors) {
  const auto s = diffusion::make_schedule(100, 1e-4, 0.02);
  RandomStream rng(6);
  Matrix<double> x0 = nn::normal_matrix<double>(4 * 5000, 3, 1.0, rng);
  Matrix<double> eps = nn::normal_matrix<double>(4 * 5000, 3, 1.0, rng);
  const std::vector<int> steps{1, 30, 60, 100};
  auto oracle = [&](const ad::Var<double>&, std::span<const int>) { return ad::constant(eps); };
  EXPECT_EQ(diffusion::diffusion_loss<double>(x0, steps, eps, s, oracle).item(), 0.0);
  auto zero = [&](const ad::Var<double>& xt, std::span<const int>) {
    return ad::constant<double>(Matrix<double>::Zero(xt.rows(), 3));
  };
  const double l0 = diffusion::diffusion_loss<double>(x0, steps, eps, s, zero).item();
  EXPECT_NEAR(l0, eps.squaredNorm() / static_cast<double>(eps.size()), 1e-12);
  EXPECT_NEAR(l0, 1.0, 0.02);
}

class DenoiserGradients : public ::testing::TestWithParam<int> {};

TEST_P(DenoiserGradients, LossMatchesFiniteDifferences) {
  RandomStream cfg_rng(10 + static_cast<std::uint64_t>(GetParam()));
  const auto c = tiny_denoiser(cfg_rng);
  RandomStream rng(20 + static_cast<std::uint64_t>(GetParam()));
  diffusion::Denoiser<double> net(c, rng);
  nn::ParameterSet<double> ps;
  net.collect(ps);
  const auto s = diffusion::make_schedule(50, 1e-3, 0.05);
  RandomStream data(30 + static_cast<std::uint64_t>(GetParam()));
  const int n = 3 + static_cast<int>(cfg_rng.below(4));
  Matrix<double> x0 = nn::normal_matrix<double>(2 * n, 3, 1.0, data);
  Matrix<double> eps = nn::normal_matrix<double>(2 * n, 3, 1.0, data);
  auto cond = ad::constant(nn::normal_matrix<double>(2, c.cond_dim, 1.0, data));
  const std::vector<int> steps{1 + static_cast<int>(data.below(50)), 1 + static_cast<int>(data.below(50))};
  auto report = check_gradients(ps, [&] { return diffusion::diffusion_loss<double>(x0, steps, eps, s, net, cond); });
  EXPECT_LE(report.max_rel_error(), 1e-4) << report.worst()->name;
}

INSTANTIATE_TEST_SUITE_P(RandomConfigs, DenoiserGradients, ::testing::Range(0, 5));

TEST(Sample, DeterministicBatchInvariantAndFinite) {
  diffusion::DenoiserConfig c;
  c.cond_dim = 8;
  c.time_dim = 16;
  c.widths = {16, 16};
  c.head_width = 16;
  RandomStream rng(7);
  diffusion::Denoiser<float> net(c, rng);
  const auto sched = diffusion::respace(diffusion::make_schedule(1000, 1e-4, 0.02), 50);
  RandomStream data(8);
  Matrix<float> cond = nn::normal_matrix<float>(3, 8, 1.0f, data);
  const std::vector<std::uint64_t> seeds{11, 12, 13};
  const auto a = diffusion::sample<float>(net, cond, sched, 64, seeds);
  const auto b = diffusion::sample<float>(net, cond, sched, 64, seeds);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].points, b[i].points);
    EXPECT_TRUE(a[i].points.allFinite());
    EXPECT_EQ(a[i].size(), 64);
  }
  const std::vector<std::uint64_t> one{12};
  const auto single = diffusion::sample<float>(net, Matrix<float>(cond.row(1)), sched, 64, one);
  EXPECT_EQ(single[0].points, a[1].points);
}

TEST(NormalizeCloud, Cases) {
  RandomStream rng(9);
  Points p(200, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal();
  PointCloud c{p, {}, -1};
  const auto n = normalize_cloud(c);
  EXPECT_LT(n.cloud.points.colwise().mean().norm(), 1e-12);
  EXPECT_NEAR(n.cloud.points.rowwise().norm().maxCoeff(), 1.0, 1e-12);
  const auto again = normalize_cloud(n.cloud);
  EXPECT_LT((again.cloud.points - n.cloud.points).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT((denormalize_cloud(n.cloud, n.transform).points - p).cwiseAbs().maxCoeff(), 1e-6);

  // Centroid (5,5,5), radius 2.
  Points q(6, 3);
  q << 7, 5, 5, 3, 5, 5, 5, 7, 5, 5, 3, 5, 5, 5, 7, 5, 5, 3;
  const auto nq = normalize_cloud(PointCloud{q, {}, -1});
  EXPECT_LT((nq.transform.centroid - Eigen::RowVector3d(5, 5, 5)).norm(), 1e-12);
  EXPECT_DOUBLE_EQ(nq.transform.scale, 2.0);
  EXPECT_NEAR(nq.cloud.points.rowwise().norm().maxCoeff(), 1.0, 1e-12);

  Points single(1, 3);
  single << 1, 2, 3;
  const auto ns = normalize_cloud(PointCloud{single, {}, -1});
  EXPECT_EQ(ns.transform.scale, 1.0);
  EXPECT_EQ(ns.cloud.points.norm(), 0.0);
  EXPECT_THROW(normalize_cloud(PointCloud{}), std::invalid_argument);
}

}  // namespace
