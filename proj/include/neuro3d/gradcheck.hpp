#pragma once

// Central finite-difference check of reverse-mode gradients.

#include "neuro3d/nn.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace neuro3d {

struct GradCheckEntry {
  std::string name;
  double rel_error = 0;
  double analytic_norm = 0;
  double numeric_norm = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  const GradCheckEntry* worst() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries) {
      if (!w || e.rel_error > w->rel_error) w = &e;
    }
    return w;
  }
};

/// Compares d(loss)/d(param) from backward() with (f(p+h) - f(p-h)) / 2h for
/// every entry of every tensor in `params`. The error per tensor is
/// ||analytic - numeric|| / max(||analytic||, ||numeric||), or the absolute
/// difference when both norms fall below `floor`.
inline GradCheckReport check_gradients(nn::ParameterSet<double>& params,
                                       const std::function<ad::Var<double>()>& loss_fn,
                                       double step = 1e-4, double floor = 1e-10) {
  params.zero_grad();
  ad::Var<double> loss = loss_fn();
  loss.backward();

  GradCheckReport report;
  for (auto& p : params) {
    auto& value = p.var.mutable_value();
    ad::Matrix<double> analytic =
        p.var.has_grad() ? p.var.grad() : ad::Matrix<double>::Zero(value.rows(), value.cols());
    ad::Matrix<double> numeric(value.rows(), value.cols());
    {
      ad::NoGradGuard guard;
      for (ad::Index i = 0; i < value.size(); ++i) {
        const double orig = value.data()[i];
        value.data()[i] = orig + step;
        const double fp = loss_fn().item();
        value.data()[i] = orig - step;
        const double fm = loss_fn().item();
        value.data()[i] = orig;
        numeric.data()[i] = (fp - fm) / (2 * step);
      }
    }
    const double an = analytic.norm();
    const double nn_ = numeric.norm();
    const double diff = (analytic - numeric).norm();
    const double denom = std::max(an, nn_);
    GradCheckEntry e;
    e.name = p.name;
    e.analytic_norm = an;
    e.numeric_norm = nn_;
    e.rel_error = denom < floor ? diff : diff / denom;
    report.entries.push_back(e);
  }
  params.zero_grad();
  return report;
}

}  // namespace neuro3d
