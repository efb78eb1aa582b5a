#include "neuro3d/synth.hpp"

#include <gtest/gtest.h>

#include <complex>
#include <filesystem>

namespace {

using namespace neuro3d;
using namespace neuro3d::synth;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("neuro3d_test_synth_" + name);
  fs::remove_all(p);
  return p;
}

TEST(Shapes, SphereRadiiBoundedByDeformation) {
  SynthConfig cfg;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto c = gen_cloud(0, 2, seed, cfg);
    const Eigen::VectorXd r = c.points.rowwise().norm();
    EXPECT_NEAR(r.maxCoeff(), 1.0, 1e-12);
    // Shrink factors lie in [1 - 0.15, 1]; the rest allows for the sample
    // centroid (sd about 0.013 per axis at 2048 points).
    EXPECT_GE(r.minCoeff(), 1.0 - cfg.deformation - 0.06);
  }
}

TEST(Shapes, FixedSeedsAreBitIdentical) {
  SynthConfig cfg;
  for (int k = 0; k < kFamilies; ++k) {
    const auto a = gen_cloud(k, 1, 99, cfg), b = gen_cloud(k, 1, 99, cfg), c = gen_cloud(k, 1, 100, cfg);
    EXPECT_EQ(a.points, b.points);
    EXPECT_EQ(a.colors, b.colors);
    EXPECT_NE(a.points, c.points);
  }
}

// Archimedes: the height of a uniform point on a sphere is uniform on [-1, 1].
TEST(Shapes, SphereSamplingIsAreaUniform) {
  const auto c = prototype_cloud(0, 40000, 3);
  std::array<int, 10> bins{};
  for (Eigen::Index i = 0; i < c.size(); ++i) ++bins[static_cast<std::size_t>(std::min(9, static_cast<int>((c.points(i, 2) + 1) * 5)))];
  for (int b : bins) EXPECT_NEAR(b / 40000.0, 0.1, 0.006);
}

TEST(Shapes, CylinderCapFractionMatchesArea) {
  const auto c = prototype_cloud(3, 40000, 4);
  // Caps are the points at the extreme heights.
  const double top = c.points.col(2).maxCoeff(), bottom = c.points.col(2).minCoeff();
  int caps = 0;
  for (Eigen::Index i = 0; i < c.size(); ++i) caps += std::abs(c.points(i, 2) - top) < 1e-9 || std::abs(c.points(i, 2) - bottom) < 1e-9;
  const double r = 0.6, h = 1.0;
  const double expected = 2 * r * r / (2 * r * r + 4 * r * h);
  EXPECT_NEAR(caps / 40000.0, expected, 0.01);
}

TEST(Shapes, InterClassExceedsIntraClass) {
  SynthConfig cfg;
  EXPECT_NO_THROW(self_check(cfg, color::Palette::standard()));
  const auto s1 = gen_cloud(0, 0, 1, cfg), s2 = gen_cloud(0, 0, 2, cfg), box = gen_cloud(1, 0, 1, cfg);
  EXPECT_GT(eval::chamfer(s1, box), eval::chamfer(s1, s2));
}

TEST(Shapes, DominantColorIsTheLabel) {
  SynthConfig cfg;
  const auto pal = color::Palette::standard();
  for (int col = 0; col < 6; ++col) EXPECT_EQ(color::dominant_color(gen_cloud(col % kFamilies, col, 7, cfg), pal), col);
}

// Averaged periodogram slope between 2 and 60 Hz at 250 Hz.
TEST(PinkNoise, UnitRmsAndOneOverFSpectrum) {
  RandomStream rng(5);
  const int n = 1024, segments = 40;
  std::vector<double> freqs, power;
  for (int k = 8; k <= 256; k *= 2) freqs.push_back(k);
  power.assign(freqs.size(), 0.0);
  for (int s = 0; s < segments; ++s) {
    std::vector<float> x(n);
    pink_noise(x, rng);
    double ms = 0;
    for (float v : x) ms += v * v;
    EXPECT_NEAR(ms / n, 1.0, 1e-4);
    for (std::size_t f = 0; f < freqs.size(); ++f) {
      std::complex<double> acc = 0;
      for (int i = 0; i < n; ++i) acc += static_cast<double>(x[static_cast<std::size_t>(i)]) * std::polar(1.0, -2 * std::numbers::pi * freqs[f] * i / n);
      power[f] += std::norm(acc);
    }
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double m = static_cast<double>(freqs.size());
  for (std::size_t f = 0; f < freqs.size(); ++f) {
    const double lx = std::log(freqs[f]), ly = std::log(power[f]);
    sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly;
  }
  const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  EXPECT_NEAR(slope, -1.0, 0.2);
}

double correlation(std::span<const float> a, std::span<const float> b) {
  Eigen::Map<const Eigen::VectorXf> x(a.data(), static_cast<Eigen::Index>(a.size())), y(b.data(), static_cast<Eigen::Index>(b.size()));
  const Eigen::VectorXd xc = x.cast<double>().array() - x.cast<double>().mean();
  const Eigen::VectorXd yc = y.cast<double>().array() - y.cast<double>().mean();
  return xc.dot(yc) / (xc.norm() * yc.norm());
}

TEST(Eeg, ZeroSnrIgnoresTheClass) {
  SynthConfig cfg;
  const EegModel model(cfg);
  const auto a = gen_eeg(model, 0, 0, 0.0, 11), b = gen_eeg(model, 5, 3, 0.0, 11);
  EXPECT_EQ(a.static_trial, b.static_trial);
  EXPECT_EQ(a.dynamic_trial, b.dynamic_trial);
}

TEST(Eeg, HighSnrApproachesTemplate) {
  SynthConfig cfg;
  const EegModel model(cfg);
  const auto p = gen_eeg(model, 2, 4, 1e6, 12);
  const Eigen::MatrixXd s = model.signal(2, 4, signal::StimulusKind::Static, cfg.rate, 250);
  std::vector<float> tmpl(8 * 250);
  for (int c = 0; c < 8; ++c) {
    for (int i = 0; i < 250; ++i) tmpl[static_cast<std::size_t>(c * 250 + i)] = static_cast<float>(s(c, i));
  }
  EXPECT_GT(correlation({p.static_trial.data(), tmpl.size()}, tmpl), 0.99999);
  // Non-informative channels carry only the scaled noise.
  double ms = 0;
  for (std::size_t i = 8 * 250; i < p.static_trial.size(); ++i) ms += p.static_trial[i] * p.static_trial[i];
  EXPECT_NEAR(std::sqrt(ms / static_cast<double>(p.static_trial.size() - 8 * 250)), 1e-6, 1e-9);
}

TEST(Eeg, SameClassTrialsCorrelateAtSnr4) {
  SynthConfig cfg;
  const EegModel model(cfg);
  double total = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = gen_eeg(model, 1, 1, 4.0, 100 + s), b = gen_eeg(model, 1, 1, 4.0, 200 + s);
    EXPECT_NE(a.static_trial, b.static_trial);
    total += correlation(a.static_trial, b.static_trial);
  }
  EXPECT_GT(total / 20, 0.5);
}

// Nearest-class-mean accuracy on informative channels of static trials.
double template_accuracy(double snr, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.snr = snr;
  cfg.seed = seed;
  cfg.instances_per_class = 12;
  const EegModel model(cfg);
  const auto table = stimulus_table(cfg);
  const auto train = gen_split(cfg, model, table, true), test = gen_split(cfg, model, table, false);
  const Eigen::Index dim = 8 * 250;
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(cfg.n_classes, dim);
  std::vector<int> counts(static_cast<std::size_t>(cfg.n_classes), 0);
  for (std::size_t t = 0; t < train.static_epochs.trials(); ++t) {
    const int y = train.static_epochs.labels[t].object_class;
    means.row(y) += Eigen::Map<const Eigen::VectorXf>(train.static_epochs.trial(t).data(), dim).cast<double>().transpose();
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int k = 0; k < cfg.n_classes; ++k) means.row(k) /= counts[static_cast<std::size_t>(k)];
  int correct = 0;
  for (std::size_t t = 0; t < test.static_epochs.trials(); ++t) {
    const Eigen::RowVectorXd x = Eigen::Map<const Eigen::VectorXf>(test.static_epochs.trial(t).data(), dim).cast<double>().transpose();
    Eigen::Index best;
    (means.rowwise() - x).rowwise().squaredNorm().minCoeff(&best);
    correct += best == test.static_epochs.labels[t].object_class;
  }
  return 100.0 * correct / static_cast<double>(test.static_epochs.trials());
}

TEST(Eeg, AccuracyProxyMonotoneInSnr) {
  std::vector<double> acc;
  for (double snr : {0.0, 1.0, 4.0, 16.0}) {
    double a = 0;
    for (std::uint64_t seed : {1, 2, 3}) a += template_accuracy(snr, seed) / 3;
    acc.push_back(a);
  }
  for (std::size_t i = 1; i < acc.size(); ++i) EXPECT_GE(acc[i], acc[i - 1]) << "snr index " << i;
  EXPECT_NEAR(acc[0], 12.5, 10.0);
  EXPECT_GT(acc[2], 90.0);
}

TEST(Dataset, DefaultSplitAndRepetitions) {
  SynthConfig cfg;
  const auto table = stimulus_table(cfg);
  for (int k = 0; k < cfg.n_classes; ++k) {
    int train = 0, test = 0;
    for (const auto& r : table) {
      if (r.object_class == k) (r.train ? train : test)++;
    }
    EXPECT_EQ(train, 8);
    EXPECT_EQ(test, 2);
  }
  std::array<int, 6> colors{};
  for (const auto& r : table) {
    if (r.train) ++colors[static_cast<std::size_t>(r.color_class)];
  }
  for (int c : colors) EXPECT_GT(c, 0);
  const EegModel model(cfg);
  auto small = cfg;
  const auto test = gen_split(small, model, table, false);
  std::map<int, int> reps;
  for (const auto& l : test.static_epochs.labels) ++reps[l.stimulus_id];
  ASSERT_EQ(reps.size(), 16u);
  for (auto [id, n] : reps) EXPECT_EQ(n, 4);
  const auto train = gen_split(small, model, table, true);
  EXPECT_EQ(train.dynamic_epochs.trials(), 64u * 2);
  EXPECT_EQ(train.dynamic_epochs.samples, 1500u);
}

SynthConfig small_disk_config() {
  SynthConfig cfg;
  cfg.n_classes = 3;
  cfg.instances_per_class = 3;
  cfg.train_instances = 2;
  cfg.points_per_cloud = 256;
  cfg.dynamic_samples = 300;
  cfg.visual_dim = 32;
  cfg.seed = 5;
  return cfg;
}

TEST(Dataset, DiskOutputIsDeterministicAndComplete) {
  const auto cfg = small_disk_config();
  const auto a = scratch("a"), b = scratch("b");
  const auto ea = gen_dataset(cfg, a.string());
  const auto eb = gen_dataset(cfg, b.string());
  ASSERT_EQ(ea.size(), eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) EXPECT_EQ(ea[i].fnv1a64, eb[i].fnv1a64) << ea[i].path;
  EXPECT_EQ(io::read_file((a / "manifest.json").string()), io::read_file((b / "manifest.json").string()));
  EXPECT_NO_THROW(verify_manifest(a.string()));

  const auto st = io::read_epochs((a / "eeg" / "test_static.e3de").string());
  EXPECT_EQ(st.trials(), 3u * 4);
  const auto cloud = read_ply((a / "clouds" / cloud_filename(4)).string());
  EXPECT_EQ(cloud.size(), 256);
  EXPECT_TRUE(cloud.has_colors());
  const auto labels = nlohmann::json::parse(io::read_text((a / "labels.json").string()));
  EXPECT_EQ(labels["stimuli"].size(), 9u);
  EXPECT_EQ(color::dominant_color(cloud, color::Palette::standard()), labels["stimuli"][4]["color_class"].get<int>());
  const auto vis = visual::FileProvider::load((a / "visual" / "features.json").string());
  EXPECT_EQ(vis.dim(), 32);
  EXPECT_NO_THROW(visual::visual_feature({4, 1, 2, 180}, vis));

  const auto raw = io::read_raw((a / "raw" / "sample.e3dr").string());
  EXPECT_EQ(raw.rate, 1000.0);
  const auto pre = signal::preprocess(raw, {});
  EXPECT_EQ(pre.static_epochs.rate, 250.0);
  EXPECT_EQ(pre.static_epochs.trials(), 4u);
  EXPECT_EQ(pre.dynamic_epochs.samples, 1500u);
  EXPECT_TRUE(pre.rejected.empty());

  // Tampering is detected.
  io::write_text((a / "labels.json").string(), "{}");
  EXPECT_THROW(verify_manifest(a.string()), std::runtime_error);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, ConfigValidation) {
  SynthConfig cfg;
  cfg.snr = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.n_classes = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.train_instances = 10;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  nlohmann::json j = cfg;
  EXPECT_EQ(j.get<SynthConfig>().seed, cfg.seed);
}

}  // namespace
