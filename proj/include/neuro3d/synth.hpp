#pragma once

// Paired synthetic data: parametric colored shapes and class/color-driven
// multichannel responses with pink background noise.

#include "neuro3d/color.hpp"
#include "neuro3d/epoch_io.hpp"
#include "neuro3d/eval.hpp"
#include "neuro3d/montage.hpp"
#include "neuro3d/pointcloud.hpp"
#include "neuro3d/random.hpp"
#include "neuro3d/signal.hpp"
#include "neuro3d/visual.hpp"

#include "json.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

namespace neuro3d::synth {

using signal::EpochSet;
using signal::StimulusKind;

inline constexpr int kFamilies = 8;

inline const std::array<std::string, kFamilies>& family_names() {
  static const std::array<std::string, kFamilies> n{"sphere", "box", "torus", "cylinder", "cone", "ellipsoid", "pyramid", "capsule"};
  return n;
}

struct SynthConfig {
  int n_classes = 8;
  int instances_per_class = 10;
  int train_instances = 8;
  int train_repetitions = 2;
  int test_repetitions = 4;
  int points_per_cloud = 2048;
  double snr = 4.0;
  int channels = static_cast<int>(montage::kChannels);
  double rate = 250.0;
  int static_samples = 250;
  int dynamic_samples = 1500;
  int template_dim = 8;
  double deformation = 0.15;
  double main_color_fraction = 0.8;
  int visual_dim = 1024;
  bool write_raw = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2 || n_classes > kFamilies) throw std::invalid_argument("synth: n_classes must be in [2, 8]");
    if (snr < 0 || !std::isfinite(snr)) throw std::invalid_argument("synth: snr must be finite and >= 0");
    if (train_instances < 1 || train_instances >= instances_per_class) throw std::invalid_argument("synth: need 1 <= train_instances < instances_per_class");
    if (train_repetitions < 1 || test_repetitions < 1) throw std::invalid_argument("synth: repetitions must be positive");
    if (points_per_cloud < 16) throw std::invalid_argument("synth: points_per_cloud must be >= 16");
    if (channels < static_cast<int>(montage::kInformative)) throw std::invalid_argument("synth: need at least 8 channels");
    if (rate <= 0 || static_samples < 1 || dynamic_samples < 1) throw std::invalid_argument("synth: bad epoch geometry");
    if (template_dim < 1) throw std::invalid_argument("synth: template_dim must be positive");
    if (deformation < 0 || deformation >= 0.5) throw std::invalid_argument("synth: deformation must be in [0, 0.5)");
    if (main_color_fraction <= 0.5 || main_color_fraction > 1) throw std::invalid_argument("synth: main_color_fraction must be in (0.5, 1]");
    if (visual_dim < 8) throw std::invalid_argument("synth: visual_dim must be >= 8");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"n_classes", c.n_classes},
       {"instances_per_class", c.instances_per_class},
       {"train_instances", c.train_instances},
       {"train_repetitions", c.train_repetitions},
       {"test_repetitions", c.test_repetitions},
       {"points_per_cloud", c.points_per_cloud},
       {"snr", c.snr},
       {"channels", c.channels},
       {"rate", c.rate},
       {"static_samples", c.static_samples},
       {"dynamic_samples", c.dynamic_samples},
       {"template_dim", c.template_dim},
       {"deformation", c.deformation},
       {"main_color_fraction", c.main_color_fraction},
       {"visual_dim", c.visual_dim},
       {"write_raw", c.write_raw},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.n_classes = j.at("n_classes");
  c.instances_per_class = j.at("instances_per_class");
  c.train_instances = j.at("train_instances");
  c.train_repetitions = j.at("train_repetitions");
  c.test_repetitions = j.at("test_repetitions");
  c.points_per_cloud = j.at("points_per_cloud");
  c.snr = j.at("snr");
  c.channels = j.at("channels");
  c.rate = j.at("rate");
  c.static_samples = j.at("static_samples");
  c.dynamic_samples = j.at("dynamic_samples");
  c.template_dim = j.at("template_dim");
  c.deformation = j.at("deformation");
  c.main_color_fraction = j.at("main_color_fraction");
  c.visual_dim = j.at("visual_dim");
  c.write_raw = j.at("write_raw");
  c.seed = j.at("seed");
}

// --- shapes -----------------------------------------------------------------

namespace detail {

constexpr double kPi = std::numbers::pi;

inline Eigen::RowVector3d unit_sphere(RandomStream& rng) {
  Eigen::RowVector3d v;
  do {
    v << rng.normal(), rng.normal(), rng.normal();
  } while (v.squaredNorm() < 1e-24);
  return v.normalized();
}

inline Eigen::RowVector3d triangle(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b, const Eigen::RowVector3d& c,
                                   RandomStream& rng) {
  const double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
  return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c;
}

/// Picks an index with probability proportional to `w`.
template <std::size_t N>
int pick(const std::array<double, N>& w, RandomStream& rng) {
  double total = 0;
  for (double x : w) total += x;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i + 1 < N; ++i) {
    if (u < w[i]) return static_cast<int>(i);
    u -= w[i];
  }
  return static_cast<int>(N - 1);
}

inline Eigen::RowVector3d surface_point(int family, RandomStream& rng) {
  switch (family) {
    case 0: return unit_sphere(rng);
    case 1: {
      const double a = 1.0, b = 0.8, c = 0.6;
      const int f = pick<3>({b * c, a * c, a * b}, rng);
      const double s = rng.uniform() < 0.5 ? -1 : 1;
      const double u = rng.uniform(-1, 1), v = rng.uniform(-1, 1);
      if (f == 0) return {s * a, u * b, v * c};
      if (f == 1) return {u * a, s * b, v * c};
      return {u * a, v * b, s * c};
    }
    case 2: {
      const double big = 1.0, small = 0.35;
      const double u = rng.uniform(0, 2 * kPi);
      double v;
      do {
        v = rng.uniform(0, 2 * kPi);
      } while (rng.uniform() * (big + small) > big + small * std::cos(v));
      return {(big + small * std::cos(v)) * std::cos(u), (big + small * std::cos(v)) * std::sin(u), small * std::sin(v)};
    }
    case 3: {
      const double r = 0.6, h = 1.0;
      const double phi = rng.uniform(0, 2 * kPi);
      if (pick<2>({2 * kPi * r * 2 * h, 2 * kPi * r * r}, rng) == 0) return {r * std::cos(phi), r * std::sin(phi), rng.uniform(-h, h)};
      const double rr = r * std::sqrt(rng.uniform());
      return {rr * std::cos(phi), rr * std::sin(phi), rng.uniform() < 0.5 ? -h : h};
    }
    case 4: {
      const double r = 0.8, h = 1.6, apex = 0.8;
      const double phi = rng.uniform(0, 2 * kPi);
      const double slant = std::hypot(r, h);
      if (pick<2>({kPi * r * slant, kPi * r * r}, rng) == 0) {
        const double s = std::sqrt(rng.uniform());
        return {s * r * std::cos(phi), s * r * std::sin(phi), apex - s * h};
      }
      const double rr = r * std::sqrt(rng.uniform());
      return {rr * std::cos(phi), rr * std::sin(phi), apex - h};
    }
    case 5: {
      const double a = 1.0, b = 0.6, c = 0.35;
      const double gmax = std::max({b * c, a * c, a * b});
      Eigen::RowVector3d x;
      do {
        x = unit_sphere(rng);
      } while (rng.uniform() * gmax > std::sqrt(std::pow(b * c * x(0), 2) + std::pow(a * c * x(1), 2) + std::pow(a * b * x(2), 2)));
      return {a * x(0), b * x(1), c * x(2)};
    }
    case 6: {
      const double w = 0.9, zb = -0.7;
      const Eigen::RowVector3d apex(0, 0, 0.9);
      const std::array<Eigen::RowVector3d, 4> base{Eigen::RowVector3d(-w, -w, zb), Eigen::RowVector3d(w, -w, zb), Eigen::RowVector3d(w, w, zb),
                                                   Eigen::RowVector3d(-w, w, zb)};
      const double side = 0.5 * (2 * w) * std::hypot(w, apex(2) - zb);
      const int f = pick<5>({side, side, side, side, 4 * w * w}, rng);
      if (f < 4) return triangle(apex, base[static_cast<std::size_t>(f)], base[static_cast<std::size_t>((f + 1) % 4)], rng);
      return {rng.uniform(-w, w), rng.uniform(-w, w), zb};
    }
    default: {
      const double r = 0.45, half = 0.7;
      if (pick<2>({2 * kPi * r * 2 * half, 4 * kPi * r * r}, rng) == 0) {
        const double phi = rng.uniform(0, 2 * kPi);
        return {r * std::cos(phi), r * std::sin(phi), rng.uniform(-half, half)};
      }
      Eigen::RowVector3d p = r * unit_sphere(rng);
      p(2) += p(2) >= 0 ? half : -half;
      return p;
    }
  }
}

}  // namespace detail

/// Undeformed surface sample of a family, normalized.
inline PointCloud prototype_cloud(int family, int points, std::uint64_t seed) {
  if (family < 0 || family >= kFamilies) throw std::out_of_range("synth: shape family " + std::to_string(family));
  RandomStream rng(seed);
  PointCloud c;
  c.points.resize(points, 3);
  for (int i = 0; i < points; ++i) c.points.row(i) = detail::surface_point(family, rng);
  return normalize_cloud(c).cloud;
}

/// Family surface with per-axis shrink factors in [1 - deformation, 1],
/// normalized, with per-point colors drawn around `color`.
inline PointCloud gen_cloud(int family, int color, std::uint64_t deform_seed, const SynthConfig& cfg,
                            const color::Palette& palette = color::Palette::standard()) {
  if (family < 0 || family >= kFamilies) throw std::out_of_range("synth: shape family " + std::to_string(family));
  if (color < 0 || color >= palette.size()) throw std::out_of_range("synth: color class " + std::to_string(color));
  RandomStream rng(deform_seed);
  const Eigen::RowVector3d scale(1 - cfg.deformation * rng.uniform(), 1 - cfg.deformation * rng.uniform(), 1 - cfg.deformation * rng.uniform());
  PointCloud c;
  c.points.resize(cfg.points_per_cloud, 3);
  c.colors.resize(cfg.points_per_cloud, 3);
  for (int i = 0; i < cfg.points_per_cloud; ++i) {
    c.points.row(i) = detail::surface_point(family, rng).cwiseProduct(scale);
    int k = color;
    if (rng.uniform() >= cfg.main_color_fraction) k = (color + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(palette.size() - 1)))) % palette.size();
    for (int a = 0; a < 3; ++a) c.colors(i, a) = std::clamp(palette.rgb(k)(a) + 0.04 * rng.uniform(-1, 1), 0.0, 1.0);
  }
  c.dominant_color = color;
  return normalize_cloud(c).cloud;
}

// --- responses --------------------------------------------------------------

/// Unit-RMS 1/f noise from a parallel bank of one-pole filters driven by one
/// white sequence. Filter states start from their joint stationary law.
inline void pink_noise(std::span<float> out, RandomStream& rng) {
  static constexpr std::array<double, 6> pole{0.99886, 0.99332, 0.96900, 0.86650, 0.55000, -0.7616};
  static constexpr std::array<double, 6> gain{0.0555179, 0.0750759, 0.1538520, 0.3104856, 0.5329522, -0.0168980};
  static const Eigen::Matrix<double, 6, 6> chol = [] {
    Eigen::Matrix<double, 6, 6> cov;
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) cov(i, j) = gain[static_cast<std::size_t>(i)] * gain[static_cast<std::size_t>(j)] / (1 - pole[static_cast<std::size_t>(i)] * pole[static_cast<std::size_t>(j)]);
    }
    return Eigen::Matrix<double, 6, 6>(cov.llt().matrixL());
  }();
  Eigen::Matrix<double, 6, 1> z;
  for (int i = 0; i < 6; ++i) z(i) = rng.normal();
  const Eigen::Matrix<double, 6, 1> init = chol * z;
  std::array<double, 6> state{};
  for (std::size_t k = 0; k < 6; ++k) state[k] = init(static_cast<Eigen::Index>(k));
  double held = 0.115926 * rng.normal();
  std::vector<double> buf(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double w = rng.normal();
    double y = held + 0.5362 * w;
    for (std::size_t k = 0; k < 6; ++k) {
      state[k] = pole[k] * state[k] + gain[k] * w;
      y += state[k];
    }
    held = 0.115926 * w;
    buf[i] = y;
  }
  double ms = 0;
  for (double v : buf) ms += v * v;
  const double inv = buf.empty() ? 1.0 : 1.0 / std::sqrt(ms / static_cast<double>(buf.size()));
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = static_cast<float>(buf[i] * inv);
}

/// Fixed seeded templates: each class and each color owns template_dim
/// sinusoids; a fixed mixing matrix projects them onto the informative
/// channels, and a stimulus-kind envelope shapes them in time.
class EegModel {
 public:
  explicit EegModel(const SynthConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    RandomStream rng(derive_seed(cfg.seed, {0xEE6}));
    const int d = cfg.template_dim;
    auto make = [&](int count) {
      std::vector<Wave> w(static_cast<std::size_t>(count * d));
      for (auto& x : w) x = {rng.normal(), rng.uniform(2.0, 30.0), rng.uniform(0, 2 * std::numbers::pi)};
      return w;
    };
    class_waves_ = make(cfg.n_classes);
    color_waves_ = make(color::kClasses);
    mixing_ = Eigen::MatrixXd(montage::kInformative, 2 * d);
    for (auto& v : mixing_.reshaped()) v = rng.normal() / std::sqrt(2.0 * d);
  }

  const SynthConfig& config() const { return cfg_; }

  static double envelope(StimulusKind kind, double t) {
    if (t < 0) return 0;
    return kind == StimulusKind::Static ? (t / 0.15) * std::exp(1 - t / 0.15) : 1 - std::exp(-t / 0.25);
  }

  /// Noise-free informative-channel response (8 × samples), unit RMS.
  Eigen::MatrixXd signal(int cls, int color, StimulusKind kind, double rate, std::size_t samples) const {
    if (cls < 0 || cls >= cfg_.n_classes || color < 0 || color >= color::kClasses) throw std::out_of_range("synth: label outside model");
    const int d = cfg_.template_dim;
    Eigen::MatrixXd src(2 * d, static_cast<Eigen::Index>(samples));
    for (std::size_t s = 0; s < samples; ++s) {
      const double t = static_cast<double>(s) / rate;
      const double env = envelope(kind, t);
      for (int j = 0; j < d; ++j) {
        src(j, static_cast<Eigen::Index>(s)) = env * class_waves_[static_cast<std::size_t>(cls * d + j)](t);
        src(d + j, static_cast<Eigen::Index>(s)) = env * color_waves_[static_cast<std::size_t>(color * d + j)](t);
      }
    }
    Eigen::MatrixXd out = mixing_ * src;
    const double rms = std::sqrt(out.squaredNorm() / static_cast<double>(out.size()));
    return rms > 0 ? Eigen::MatrixXd(out / rms) : out;
  }

  /// One trial: gain-jittered signal on channels 0..7 plus pink noise scaled
  /// by 1/snr on every channel; snr = 0 gives noise alone.
  void trial(int cls, int color, StimulusKind kind, double snr, RandomStream& rng, std::span<float> out) const {
    const std::size_t samples = kind == StimulusKind::Static ? static_cast<std::size_t>(cfg_.static_samples) : static_cast<std::size_t>(cfg_.dynamic_samples);
    const std::size_t channels = static_cast<std::size_t>(cfg_.channels);
    if (out.size() != channels * samples) throw std::invalid_argument("synth: trial buffer size");
    const double noise_scale = snr > 0 ? 1.0 / snr : 1.0;
    for (std::size_t c = 0; c < channels; ++c) pink_noise(out.subspan(c * samples, samples), rng);
    for (auto& v : out) v = static_cast<float>(v * noise_scale);
    if (snr == 0) return;
    const double g = rng.uniform(0.8, 1.2);
    const auto s = signal(cls, color, kind, cfg_.rate, samples);
    for (std::size_t c = 0; c < montage::kInformative; ++c) {
      for (std::size_t i = 0; i < samples; ++i) out[c * samples + i] += static_cast<float>(g * s(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)));
    }
  }

 private:
  struct Wave {
    double amp = 0, freq = 0, phase = 0;
    double operator()(double t) const { return amp * std::sin(2 * std::numbers::pi * freq * t + phase); }
  };

  SynthConfig cfg_;
  std::vector<Wave> class_waves_, color_waves_;
  Eigen::MatrixXd mixing_;
};

struct TrialPair {
  std::vector<float> static_trial;   // channels × static_samples
  std::vector<float> dynamic_trial;  // channels × dynamic_samples
};

inline TrialPair gen_eeg(const EegModel& model, int cls, int color, double snr, std::uint64_t seed) {
  if (snr < 0) throw std::invalid_argument("synth: snr must be >= 0");
  const auto& c = model.config();
  TrialPair p;
  p.static_trial.resize(static_cast<std::size_t>(c.channels * c.static_samples));
  p.dynamic_trial.resize(static_cast<std::size_t>(c.channels * c.dynamic_samples));
  RandomStream rng(seed);
  model.trial(cls, color, StimulusKind::Static, snr, rng, p.static_trial);
  model.trial(cls, color, StimulusKind::Dynamic, snr, rng, p.dynamic_trial);
  return p;
}

// --- datasets ---------------------------------------------------------------

struct StimulusRecord {
  int stimulus_id = 0;
  int object_class = 0;
  int color_class = 0;
  int instance = 0;
  bool train = true;
  std::uint64_t deform_seed = 0;
};

inline std::vector<StimulusRecord> stimulus_table(const SynthConfig& cfg) {
  std::vector<StimulusRecord> out;
  for (int k = 0; k < cfg.n_classes; ++k) {
    for (int i = 0; i < cfg.instances_per_class; ++i) {
      StimulusRecord r;
      r.stimulus_id = k * cfg.instances_per_class + i;
      r.object_class = k;
      r.color_class = (k + i) % color::kClasses;
      r.instance = i;
      r.train = i < cfg.train_instances;
      r.deform_seed = derive_seed(cfg.seed, {0xC10D, static_cast<std::uint64_t>(r.stimulus_id)});
      out.push_back(r);
    }
  }
  return out;
}

struct EpochSplit {
  EpochSet static_epochs, dynamic_epochs;
};

/// Trials for one split, repetition-major (all stimuli once, then again).
inline EpochSplit gen_split(const SynthConfig& cfg, const EegModel& model, const std::vector<StimulusRecord>& table, bool train) {
  EpochSplit s;
  const int reps = train ? cfg.train_repetitions : cfg.test_repetitions;
  for (auto [e, kind, n] : {std::tuple{&s.static_epochs, StimulusKind::Static, cfg.static_samples},
                            std::tuple{&s.dynamic_epochs, StimulusKind::Dynamic, cfg.dynamic_samples}}) {
    e->kind = kind;
    e->rate = cfg.rate;
    e->channels = static_cast<std::size_t>(cfg.channels);
    e->samples = static_cast<std::size_t>(n);
  }
  for (int rep = 0; rep < reps; ++rep) {
    for (const auto& r : table) {
      if (r.train != train) continue;
      const auto seed = derive_seed(cfg.seed, {0x7A1, static_cast<std::uint64_t>(r.stimulus_id), static_cast<std::uint64_t>(rep)});
      const auto p = gen_eeg(model, r.object_class, r.color_class, cfg.snr, seed);
      const signal::TrialLabel label{r.stimulus_id, r.object_class, r.color_class, 0, rep};
      s.static_epochs.labels.push_back(label);
      s.dynamic_epochs.labels.push_back(label);
      s.static_epochs.data.insert(s.static_epochs.data.end(), p.static_trial.begin(), p.static_trial.end());
      s.dynamic_epochs.data.insert(s.dynamic_epochs.data.end(), p.dynamic_trial.begin(), p.dynamic_trial.end());
    }
  }
  return s;
}

/// Continuous 1 kHz recording of the first two training stimuli, two
/// repetitions each, with line noise and drift, for the preprocessing path.
inline signal::RawRecording gen_raw(const SynthConfig& cfg, const EegModel& model, const std::vector<StimulusRecord>& table) {
  signal::RawRecording rec;
  rec.rate = 1000.0;
  rec.channels = static_cast<std::size_t>(cfg.channels);
  std::vector<const StimulusRecord*> picks;
  for (const auto& r : table) {
    if (r.train && picks.size() < 2) picks.push_back(&r);
  }
  const std::size_t lead = 2000, static_len = 1000, dynamic_len = 6000, gap = 1000;
  struct Placement {
    std::size_t onset;
    StimulusKind kind;
    const StimulusRecord* rec;
  };
  std::vector<Placement> plan;
  std::size_t t = lead;
  for (int rep = 0; rep < 2; ++rep) {
    for (const auto* r : picks) {
      plan.push_back({t, StimulusKind::Static, r});
      t += static_len + gap;
      plan.push_back({t, StimulusKind::Dynamic, r});
      t += dynamic_len + gap;
    }
  }
  rec.samples = t;
  rec.data.assign(rec.channels * rec.samples, 0.0f);
  RandomStream rng(derive_seed(cfg.seed, {0x2A3}));
  const double noise_scale = cfg.snr > 0 ? 1.0 / cfg.snr : 1.0;
  for (std::size_t c = 0; c < rec.channels; ++c) {
    std::span<float> ch(rec.data.data() + c * rec.samples, rec.samples);
    pink_noise(ch, rng);
    const double phase = rng.uniform(0, 2 * std::numbers::pi), drift = rng.normal();
    for (std::size_t s = 0; s < rec.samples; ++s) {
      const double sec = static_cast<double>(s) / rec.rate;
      ch[s] = static_cast<float>(ch[s] * noise_scale + 0.5 * std::sin(2 * std::numbers::pi * 50.0 * sec + phase) + 0.3 * drift * sec / 40.0);
    }
  }
  for (const auto& p : plan) {
    const std::size_t len = p.kind == StimulusKind::Static ? static_len : dynamic_len;
    rec.events.push_back({p.onset, p.rec->stimulus_id, p.kind, p.rec->object_class, p.rec->color_class});
    if (cfg.snr == 0) continue;
    const auto sig = model.signal(p.rec->object_class, p.rec->color_class, p.kind, rec.rate, len);
    for (std::size_t c = 0; c < montage::kInformative; ++c) {
      for (std::size_t s = 0; s < len; ++s) rec.at(c, p.onset + s) += static_cast<float>(sig(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(s)));
    }
  }
  return rec;
}

/// Largest intra-class Chamfer must stay below the smallest inter-class one
/// among the first instances; throws otherwise.
inline void self_check(const SynthConfig& cfg, const color::Palette& palette) {
  SynthConfig small = cfg;
  small.points_per_cloud = std::min(cfg.points_per_cloud, 512);
  std::vector<PointCloud> first, second;
  for (int k = 0; k < cfg.n_classes; ++k) {
    first.push_back(gen_cloud(k, 0, derive_seed(cfg.seed, {0x5E1F, static_cast<std::uint64_t>(k), 0}), small, palette));
    second.push_back(gen_cloud(k, 0, derive_seed(cfg.seed, {0x5E1F, static_cast<std::uint64_t>(k), 1}), small, palette));
  }
  for (int k = 0; k < cfg.n_classes; ++k) {
    const double intra = eval::chamfer(first[static_cast<std::size_t>(k)], second[static_cast<std::size_t>(k)]);
    for (int j = 0; j < cfg.n_classes; ++j) {
      if (j == k) continue;
      const double inter = eval::chamfer(first[static_cast<std::size_t>(k)], first[static_cast<std::size_t>(j)]);
      if (!(inter > intra)) {
        throw std::runtime_error("synth self-check failed: " + family_names()[static_cast<std::size_t>(k)] + " vs " +
                                 family_names()[static_cast<std::size_t>(j)] + " inter-class Chamfer " + std::to_string(inter) +
                                 " <= intra-class " + std::to_string(intra));
      }
    }
  }
}

inline std::string cloud_filename(int stimulus_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "stim_%04d.ply", stimulus_id);
  return buf;
}

struct ManifestEntry {
  std::string path;
  std::uintmax_t bytes = 0;
  std::string fnv1a64;
};

/// Writes the whole dataset under `dir` and returns the manifest entries.
/// Layout: eeg/{train,test}_{static,dynamic}.e3de, clouds/stim_NNNN.ply,
/// visual/features.json (+ .f32), raw/sample.e3dr, labels.json, manifest.json.
inline std::vector<ManifestEntry> gen_dataset(const SynthConfig& cfg, const std::string& dir,
                                              const color::Palette& palette = color::Palette::standard()) {
  cfg.validate();
  palette.validate();
  namespace fs = std::filesystem;
  self_check(cfg, palette);
  for (const char* sub : {"eeg", "clouds", "visual", "raw"}) fs::create_directories(fs::path(dir) / sub);
  const EegModel model(cfg);
  const auto table = stimulus_table(cfg);
  std::vector<std::string> written;

  for (bool train : {true, false}) {
    const auto split = gen_split(cfg, model, table, train);
    const std::string name = train ? "train" : "test";
    io::write_epochs((fs::path(dir) / "eeg" / (name + "_static.e3de")).string(), split.static_epochs);
    io::write_epochs((fs::path(dir) / "eeg" / (name + "_dynamic.e3de")).string(), split.dynamic_epochs);
    written.push_back("eeg/" + name + "_static.e3de");
    written.push_back("eeg/" + name + "_dynamic.e3de");
  }

  nlohmann::ordered_json labels = nlohmann::ordered_json::array();
  const visual::StubProvider stub(derive_seed(cfg.seed, {0x515}), cfg.visual_dim);
  std::vector<int> ids;
  std::vector<float> feats;
  for (const auto& r : table) {
    const auto cloud = gen_cloud(r.object_class, r.color_class, r.deform_seed, cfg, palette);
    const std::string rel = "clouds/" + cloud_filename(r.stimulus_id);
    write_ply((fs::path(dir) / rel).string(), cloud,
              {"stimulus " + std::to_string(r.stimulus_id), "shape " + family_names()[static_cast<std::size_t>(r.object_class)],
               "color " + palette.entries[static_cast<std::size_t>(r.color_class)].name});
    written.push_back(rel);
    labels.push_back({{"stimulus_id", r.stimulus_id},
                      {"object_class", r.object_class},
                      {"shape", family_names()[static_cast<std::size_t>(r.object_class)]},
                      {"color_class", r.color_class},
                      {"color", palette.entries[static_cast<std::size_t>(r.color_class)].name},
                      {"instance", r.instance},
                      {"split", r.train ? "train" : "test"},
                      {"deform_seed", r.deform_seed},
                      {"cloud", rel}});
    const visual::Stimulus s{r.stimulus_id, r.object_class, r.color_class, visual::kVideoFrames};
    const auto frames = visual::select_frames(s.frame_count);
    ids.push_back(r.stimulus_id);
    for (int slot = 0; slot < visual::kDefaultFrames; ++slot) {
      const auto f = stub.frame_feature(s, slot, frames[static_cast<std::size_t>(slot)]);
      for (Eigen::Index i = 0; i < f.size(); ++i) feats.push_back(static_cast<float>(f(i)));
    }
  }
  visual::FileProvider::save((fs::path(dir) / "visual" / "features.json").string(), cfg.visual_dim, visual::kDefaultFrames, ids, feats);
  written.push_back("visual/features.json");
  written.push_back("visual/features.f32");

  if (cfg.write_raw) {
    io::write_raw((fs::path(dir) / "raw" / "sample.e3dr").string(), gen_raw(cfg, model, table));
    written.push_back("raw/sample.e3dr");
  }

  nlohmann::ordered_json lj;
  lj["format"] = "neuro3d-labels";
  lj["version"] = 1;
  lj["shapes"] = std::vector<std::string>(family_names().begin(), family_names().begin() + cfg.n_classes);
  lj["palette"] = palette.to_json();
  lj["stimuli"] = labels;
  io::write_text((fs::path(dir) / "labels.json").string(), lj.dump(1) + "\n");
  written.push_back("labels.json");

  std::vector<ManifestEntry> entries;
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (const auto& rel : written) {
    const auto full = (fs::path(dir) / rel).string();
    ManifestEntry e{rel, fs::file_size(full), io::file_checksum(full)};
    files.push_back({{"path", e.path}, {"bytes", e.bytes}, {"fnv1a64", e.fnv1a64}});
    entries.push_back(e);
  }
  nlohmann::ordered_json m;
  m["format"] = "neuro3d-synth-manifest";
  m["version"] = 1;
  m["config"] = nlohmann::json(cfg);
  m["files"] = files;
  io::write_text((fs::path(dir) / "manifest.json").string(), m.dump(1) + "\n");
  return entries;
}

/// Recomputes every checksum listed in manifest.json; throws on mismatch.
inline void verify_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto m = nlohmann::json::parse(io::read_text((fs::path(dir) / "manifest.json").string()));
  for (const auto& f : m.at("files")) {
    const auto full = (fs::path(dir) / f.at("path").get<std::string>()).string();
    if (io::file_checksum(full) != f.at("fnv1a64").get<std::string>()) throw std::runtime_error("checksum mismatch for " + full);
  }
}

}  // namespace neuro3d::synth
