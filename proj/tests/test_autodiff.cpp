#include "neuro3d/gradcheck.hpp"
#include "neuro3d/nn.hpp"

#include <gtest/gtest.h>

#include <array>
#include <vector>

namespace {

using neuro3d::RandomStream;
using neuro3d::ad::Matrix;
using neuro3d::ad::Var;
namespace ad = neuro3d::ad;
namespace nn = neuro3d::nn;

Matrix<double> rand_mat(int r, int c, RandomStream& rng) { return nn::normal_matrix<double>(r, c, 1.0, rng); }

TEST(Autodiff, LinearForwardMatchesEigen) {
  RandomStream rng(1);
  Matrix<double> x = rand_mat(4, 3, rng), w = rand_mat(3, 5, rng), b = rand_mat(1, 5, rng);
  auto y = ad::linear(ad::constant(x), ad::constant(w), ad::constant(b));
  Matrix<double> expect = x * w;
  expect.rowwise() += b.row(0);
  EXPECT_LT((y.value() - expect).norm(), 1e-12);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, NoGradGuardSkipsGraph) {
  RandomStream rng(2);
  auto w = ad::parameter(rand_mat(2, 2, rng));
  ad::NoGradGuard guard;
  auto y = ad::matmul(w, w);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, ElementwiseAndBroadcastGradients) {
  RandomStream rng(3);
  nn::ParameterSet<double> ps;
  auto a = ad::parameter(rand_mat(3, 4, rng));
  auto row = ad::parameter(rand_mat(1, 4, rng));
  auto s = ad::parameter(rand_mat(1, 1, rng));
  ps.add("a", a);
  ps.add("row", row);
  ps.add("s", s);
  auto report = neuro3d::check_gradients(ps, [&] {
    auto y = (a * row + s) - ad::scale(a, 0.5);
    return ad::mean(ad::square(ad::gelu(y)) + ad::silu(ad::exp(ad::scale(y, 0.1))));
  });
  EXPECT_LT(report.max_rel_error(), 1e-6);
}

TEST(Autodiff, StructuralOpGradients) {
  RandomStream rng(4);
  nn::ParameterSet<double> ps;
  auto a = ad::parameter(rand_mat(6, 3, rng));
  auto b = ad::parameter(rand_mat(6, 2, rng));
  auto c = ad::parameter(rand_mat(2, 5, rng));
  ps.add("a", a);
  ps.add("b", b);
  ps.add("c", c);
  auto report = neuro3d::check_gradients(ps, [&] {
    auto ab = ad::concat_cols(a, b);                        // 6x5
    auto pooled = ad::group_mean(ab, 3);                    // 2x5
    auto maxed = ad::group_max(ab, 2);                      // 3x5
    auto back = ad::broadcast_groups(pooled, 3);            // 6x5
    std::array<Var<double>, 2> parts{ad::slice_rows(back, 1, 4), maxed};
    auto stacked = ad::concat_rows<double>(parts);          // 7x5
    auto prod = ad::matmul(ad::transpose(c), ad::slice_cols(c, 1, 3));  // 5x3
    return ad::sum(ad::matmul(stacked, prod));
  });
  EXPECT_LT(report.max_rel_error(), 1e-6);
}

TEST(Autodiff, LayerNormAndNormalizeGradients) {
  RandomStream rng(5);
  nn::ParameterSet<double> ps;
  auto x = ad::parameter(rand_mat(4, 6, rng));
  auto g = ad::parameter(rand_mat(1, 6, rng));
  auto b = ad::parameter(rand_mat(1, 6, rng));
  ps.add("x", x);
  ps.add("g", g);
  ps.add("b", b);
  Matrix<double> target = rand_mat(4, 6, rng);
  auto report = neuro3d::check_gradients(ps, [&] {
    auto y = ad::l2_normalize_rows(ad::layer_norm(x, g, b));
    return ad::mse(y, ad::constant(target));
  });
  EXPECT_LT(report.max_rel_error(), 1e-6);
}

TEST(Autodiff, AttentionGradientsAndRowSums) {
  RandomStream rng(6);
  nn::ParameterSet<double> ps;
  auto q = ad::parameter(rand_mat(2 * 3, 8, rng));
  auto k = ad::parameter(rand_mat(2 * 5, 8, rng));
  auto v = ad::parameter(rand_mat(2 * 5, 8, rng));
  ps.add("q", q);
  ps.add("k", k);
  ps.add("v", v);
  std::vector<Matrix<double>> weights;
  auto out = ad::attention(q, k, v, 2, 2, &weights);
  ASSERT_EQ(out.rows(), 6);
  ASSERT_EQ(weights.size(), 4u);
  for (const auto& w : weights) {
    for (int r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-12);
  }
  Matrix<double> target = rand_mat(6, 8, rng);
  auto report = neuro3d::check_gradients(ps, [&] {
    return ad::mse(ad::attention(q, k, v, 2, 2), ad::constant(target));
  });
  EXPECT_LT(report.max_rel_error(), 1e-6);
}

TEST(Autodiff, CrossEntropyValueAndGradient) {
  nn::ParameterSet<double> ps;
  auto logits = ad::parameter<double>(Matrix<double>::Zero(2, 6));
  ps.add("logits", logits);
  std::vector<int> labels{1, 4};
  EXPECT_NEAR(ad::cross_entropy<double>(logits, labels).item(), std::log(6.0), 1e-12);
  RandomStream rng(7);
  logits.mutable_value() = rand_mat(2, 6, rng);
  auto report = neuro3d::check_gradients(ps, [&] { return ad::cross_entropy<double>(logits, labels); });
  EXPECT_LT(report.max_rel_error(), 1e-6);
  std::vector<int> bad{0, 6};
  EXPECT_THROW(ad::cross_entropy<double>(logits, bad), std::out_of_range);
}

TEST(Autodiff, ShapeErrors) {
  auto a = ad::constant<double>(Matrix<double>::Zero(2, 3));
  auto b = ad::constant<double>(Matrix<double>::Zero(2, 3));
  EXPECT_THROW(ad::matmul(a, b), ad::ShapeError);
  auto c = ad::constant<double>(Matrix<double>::Zero(3, 2));
  EXPECT_THROW(a + c, ad::ShapeError);
  EXPECT_THROW(ad::group_mean(a, 4), ad::ShapeError);
}

TEST(Autodiff, SharedSubgraphAccumulates) {
  auto x = ad::parameter<double>(Matrix<double>::Constant(1, 1, 3.0));
  auto y = x * x + x;  // dy/dx = 2x + 1
  ad::sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 7.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  nn::ParameterSet<double> ps;
  auto p = ad::parameter<double>(Matrix<double>::Constant(1, 2, 1.0));
  ps.add("p", p, false);
  ad::sum(ad::scale(p, 3.0)).backward();
  nn::AdamW<double> opt({.lr = 0.1, .beta1 = 0.95, .beta2 = 0.999, .eps = 0.0, .weight_decay = 0.0});
  opt.step(ps);
  // Bias-corrected first step is lr * sign(g).
  EXPECT_NEAR(p.value()(0, 0), 0.9, 1e-12);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  nn::ParameterSet<double> ps;
  auto p = ad::parameter<double>(Matrix<double>::Zero(1, 2));
  ps.add("p", p);
  ad::sum(ad::linear(p, ad::constant<double>(Matrix<double>::Ones(2, 1) * 0.0), Var<double>()) +
          ad::matmul(p, ad::constant<double>((Matrix<double>(2, 1) << 3.0, 4.0).finished())))
      .backward();
  EXPECT_NEAR(nn::clip_grad_norm(ps, 1.0), 5.0, 1e-12);
  EXPECT_NEAR(p.grad().norm(), 1.0, 1e-9);
}

}  // namespace
