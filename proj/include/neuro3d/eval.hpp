#pragma once

// Classification and generation benchmarks, point-cloud metrics, and
// electrode saliency analyses.

#include "neuro3d/autodiff.hpp"
#include "neuro3d/kdtree.hpp"
#include "neuro3d/montage.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/pointcloud.hpp"
#include "neuro3d/random.hpp"
#include "neuro3d/signal.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace neuro3d::eval {

using signal::EpochSet;

inline constexpr double kDefaultTau = 0.05;
inline constexpr int kReportSchema = 1;
inline constexpr const char* kChamferConvention = "mean squared nearest-neighbor distance, both directions summed, x100";

// --- ranking ----------------------------------------------------------------

/// 0-based rank of `label` among the candidate classes (all classes when
/// `candidates` is empty). Equal scores rank the lower class index first.
inline int rank_of(const Eigen::Ref<const Eigen::RowVectorXd>& scores, int label, std::span<const int> candidates = {}) {
  if (label < 0 || label >= scores.size()) throw std::out_of_range("rank_of: label outside score vector");
  const double s = scores(label);
  auto beats = [&](int j) { return scores(j) > s || (scores(j) == s && j < label); };
  int rank = 0;
  if (candidates.empty()) {
    for (int j = 0; j < scores.size(); ++j) rank += j != label && beats(j);
  } else {
    for (int j : candidates) rank += j != label && beats(j);
  }
  return rank;
}

/// Percentage of rows whose label is among the k highest scores.
inline double topk_accuracy(const Eigen::MatrixXd& scores, std::span<const int> labels, int k) {
  if (scores.rows() == 0) throw std::invalid_argument("topk_accuracy: no trials");
  if (static_cast<std::size_t>(scores.rows()) != labels.size()) throw std::invalid_argument("topk_accuracy: label count mismatch");
  if (k < 1 || k > scores.cols()) throw std::invalid_argument("topk_accuracy: need 1 <= k <= classes");
  long long hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) hits += rank_of(scores.row(i), labels[static_cast<std::size_t>(i)]) < k;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(scores.rows());
}

/// Row-wise softmax probability assigned to each row's label.
inline Eigen::VectorXd label_probability(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  Eigen::VectorXd p(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double z = (logits.row(i).array() - m).exp().sum();
    p(i) = std::exp(logits(i, labels[static_cast<std::size_t>(i)]) - m) / z;
  }
  return p;
}

// --- N-way top-K over generated clouds --------------------------------------

class PointCloudClassifier {
 public:
  virtual ~PointCloudClassifier() = default;
  virtual int classes() const = 0;
  /// One finite score per class, higher is more likely.
  virtual Eigen::VectorXd scores(const PointCloud& cloud) const = 0;
};

/// gt plus n_way-1 distinct distractors drawn uniformly from the other classes.
inline std::vector<int> nway_candidates(int classes, int gt, int n_way, RandomStream& rng) {
  if (gt < 0 || gt >= classes) throw std::out_of_range("nway: ground-truth class outside classifier range");
  if (n_way < 2 || n_way > classes) throw std::invalid_argument("nway: need 2 <= n_way <= classes");
  std::vector<int> others;
  for (int c = 0; c < classes; ++c) {
    if (c != gt) others.push_back(c);
  }
  for (int i = 0; i < n_way - 1; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(others.size() - static_cast<std::size_t>(i))));
    std::swap(others[static_cast<std::size_t>(i)], others[static_cast<std::size_t>(j)]);
  }
  std::vector<int> cand(others.begin(), others.begin() + (n_way - 1));
  cand.push_back(gt);
  std::sort(cand.begin(), cand.end());
  return cand;
}

inline bool nway_hit(const Eigen::VectorXd& scores, int gt, std::span<const int> candidates, int k) {
  if (!scores.allFinite()) throw std::runtime_error("classifier returned non-finite scores");
  if (k < 1 || k > static_cast<int>(candidates.size())) throw std::invalid_argument("nway: need 1 <= k <= n_way");
  return rank_of(scores.transpose(), gt, candidates) < k;
}

inline bool nway_topk(const PointCloud& generated, int gt, const PointCloudClassifier& classifier, int n_way, int k,
                      std::uint64_t seed) {
  RandomStream rng(seed);
  const auto cand = nway_candidates(classifier.classes(), gt, n_way, rng);
  return nway_hit(classifier.scores(generated), gt, cand, k);
}

struct NwaySpec {
  int n_way = 2;
  int k = 1;
  std::string name() const { return std::to_string(n_way) + "-way top-" + std::to_string(k); }
};

inline std::vector<NwaySpec> default_nway_specs() { return {{2, 1}, {10, 3}}; }

struct ProtocolResult {
  std::vector<NwaySpec> specs;
  std::vector<double> average;   // mean hit rate x100 over the 5 samples, per spec
  std::vector<double> best;      // hit x100 of the selected sample, per spec
  std::vector<int> best_index;   // selected sample, per spec
  int geometry_best = 0;         // sample whose geometry metrics populate the best column
  double average_chamfer = 0, best_chamfer = 0;
  double average_f1 = 0, best_f1 = 0;
  bool has_geometry = false;
};

/// Selects the sample ranking gt highest among the candidates, breaking ties
/// by the larger gt score and then the lower sample index.
inline int select_best(std::span<const Eigen::VectorXd> scores, int gt, std::span<const int> candidates) {
  int best = 0;
  int best_rank = rank_of(scores[0].transpose(), gt, candidates);
  for (int i = 1; i < static_cast<int>(scores.size()); ++i) {
    const int r = rank_of(scores[static_cast<std::size_t>(i)].transpose(), gt, candidates);
    if (r < best_rank || (r == best_rank && scores[static_cast<std::size_t>(i)](gt) > scores[static_cast<std::size_t>(best)](gt))) {
      best = i;
      best_rank = r;
    }
  }
  return best;
}

/// Average and best-of-5 n-way hits from precomputed classifier scores.
/// Each spec draws one distractor set shared by the five samples.
inline ProtocolResult protocol_5sample_scores(std::span<const Eigen::VectorXd> scores, int gt, std::span<const NwaySpec> specs,
                                              std::uint64_t seed) {
  if (scores.size() != 5) throw std::invalid_argument("protocol_5sample: exactly 5 samples required, got " + std::to_string(scores.size()));
  const int classes = static_cast<int>(scores[0].size());
  for (const auto& s : scores) {
    if (s.size() != classes || !s.allFinite()) throw std::runtime_error("protocol_5sample: inconsistent or non-finite scores");
  }
  ProtocolResult r;
  r.specs.assign(specs.begin(), specs.end());
  for (std::size_t si = 0; si < specs.size(); ++si) {
    RandomStream rng(derive_seed(seed, {static_cast<std::uint64_t>(si)}));
    const auto cand = nway_candidates(classes, gt, specs[si].n_way, rng);
    double hits = 0;
    for (const auto& s : scores) hits += nway_hit(s, gt, cand, specs[si].k);
    const int b = select_best(scores, gt, cand);
    r.average.push_back(100.0 * hits / 5.0);
    r.best.push_back(nway_hit(scores[static_cast<std::size_t>(b)], gt, cand, specs[si].k) ? 100.0 : 0.0);
    r.best_index.push_back(b);
  }
  r.geometry_best = select_best(scores, gt, {});
  return r;
}

// --- geometry metrics -------------------------------------------------------

inline double mean_nearest_sq(const Points& from, const KdTree& to) {
  double acc = 0;
  for (Eigen::Index i = 0; i < from.rows(); ++i) acc += to.nearest_sq(from.row(i));
  return acc / static_cast<double>(from.rows());
}

/// Unscaled Chamfer distance: squared nearest-neighbor distances, averaged
/// per direction and summed.
inline double chamfer_raw(const Points& a, const Points& b) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("chamfer: empty cloud");
  const KdTree ta(a), tb(b);
  return mean_nearest_sq(a, tb) + mean_nearest_sq(b, ta);
}

/// Chamfer distance in reported units (x100).
inline double chamfer(const PointCloud& a, const PointCloud& b) { return 100.0 * chamfer_raw(a.points, b.points); }

struct F1Counts {
  Eigen::Index a_matched = 0, a_total = 0;  // a-points within tau of b
  Eigen::Index b_matched = 0, b_total = 0;  // b-points within tau of a

  double precision() const { return static_cast<double>(a_matched) / static_cast<double>(a_total); }
  double recall() const { return static_cast<double>(b_matched) / static_cast<double>(b_total); }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0 ? 0.0 : 200.0 * p * r / (p + r);
  }
};

inline F1Counts f1_counts(const Points& a, const Points& b, double tau) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("f1: empty cloud");
  if (!(tau > 0)) throw std::invalid_argument("f1: tau must be positive");
  const double t2 = tau * tau;
  const KdTree ta(a), tb(b);
  F1Counts c;
  c.a_total = a.rows();
  c.b_total = b.rows();
  for (Eigen::Index i = 0; i < a.rows(); ++i) c.a_matched += tb.nearest_sq(a.row(i)) <= t2;
  for (Eigen::Index i = 0; i < b.rows(); ++i) c.b_matched += ta.nearest_sq(b.row(i)) <= t2;
  return c;
}

/// F-score in percent at distance threshold tau.
inline double f1(const PointCloud& a, const PointCloud& b, double tau = kDefaultTau) { return f1_counts(a.points, b.points, tau).f1(); }

/// Full Table-4 protocol for one stimulus: n-way hits from the classifier plus
/// Chamfer/F1 against the reference cloud when one is given.
inline ProtocolResult protocol_5sample(std::span<const PointCloud> samples, int gt, const PointCloudClassifier& classifier,
                                       std::span<const NwaySpec> specs, std::uint64_t seed, const PointCloud* reference = nullptr,
                                       double tau = kDefaultTau) {
  if (samples.size() != 5) throw std::invalid_argument("protocol_5sample: exactly 5 samples required, got " + std::to_string(samples.size()));
  std::vector<Eigen::VectorXd> scores;
  for (const auto& s : samples) scores.push_back(classifier.scores(s));
  auto r = protocol_5sample_scores(scores, gt, specs, seed);
  if (reference) {
    r.has_geometry = true;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double cd = chamfer(samples[i], *reference);
      const double f = f1(samples[i], *reference, tau);
      r.average_chamfer += cd / 5.0;
      r.average_f1 += f / 5.0;
      if (static_cast<int>(i) == r.geometry_best) {
        r.best_chamfer = cd;
        r.best_f1 = f;
      }
    }
  }
  return r;
}

// --- point-cloud classifier -------------------------------------------------

struct PointNetConfig {
  int classes = 8;
  std::vector<ad::Index> widths{64, 128, 256};
  ad::Index head = 128;
  int points = 256;  // points per cloud during training and scoring
};

inline void to_json(nlohmann::json& j, const PointNetConfig& c) {
  j = {{"classes", c.classes}, {"widths", c.widths}, {"head", c.head}, {"points", c.points}};
}
inline void from_json(const nlohmann::json& j, PointNetConfig& c) {
  c.classes = j.at("classes");
  c.widths = j.at("widths").get<std::vector<ad::Index>>();
  c.head = j.at("head");
  c.points = j.at("points");
}

/// Shared per-point MLP, max-pool, two-layer head.
template <typename T>
struct PointNet {
  PointNetConfig cfg;
  std::vector<nn::Linear<T>> layers;
  nn::Linear<T> head1, head2;

  PointNet() = default;
  PointNet(const PointNetConfig& c, RandomStream& rng) : cfg(c) {
    if (c.classes < 2 || c.widths.empty()) throw std::invalid_argument("PointNet: need >= 2 classes and >= 1 layer");
    ad::Index in = 3;
    for (ad::Index w : c.widths) {
      layers.emplace_back(in, w, rng);
      in = w;
    }
    head1 = nn::Linear<T>(in, c.head, rng);
    head2 = nn::Linear<T>(c.head, c.classes, rng);
  }

  /// points: (B*N × 3) grouped per cloud; returns B × classes logits.
  ad::Var<T> operator()(const ad::Var<T>& points, ad::Index batch) const {
    if (batch <= 0 || points.rows() % batch != 0) throw ad::ShapeError("PointNet: point rows not divisible by batch");
    auto h = points;
    for (const auto& l : layers) h = ad::silu(l(h));
    auto g = ad::group_max(h, points.rows() / batch);
    return head2(ad::silu(head1(g)));
  }

  void collect(nn::ParameterSet<T>& ps, const std::string& p = "pointnet") const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(ps, p + ".layer" + std::to_string(i));
    head1.collect(ps, p + ".head1");
    head2.collect(ps, p + ".head2");
  }
};

/// Deterministic subset of `count` points (with replacement only when the
/// cloud is smaller than `count`).
inline Points subsample(const Points& pts, int count, RandomStream& rng) {
  if (pts.rows() == 0) throw std::invalid_argument("subsample: empty cloud");
  Points out(count, 3);
  if (pts.rows() >= count) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(pts.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (int i = 0; i < count; ++i) {
      const auto j = i + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(pts.rows() - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      out.row(i) = pts.row(idx[static_cast<std::size_t>(i)]);
    }
  } else {
    for (int i = 0; i < count; ++i) out.row(i) = pts.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(pts.rows()))));
  }
  return out;
}

class PointNetClassifier : public PointCloudClassifier {
 public:
  PointNetClassifier() = default;
  PointNetClassifier(PointNet<float> net, std::uint64_t seed) : net_(std::move(net)), seed_(seed) {}

  int classes() const override { return net_.cfg.classes; }

  /// Log-softmax scores on a seeded subsample of the normalized cloud.
  Eigen::VectorXd scores(const PointCloud& cloud) const override {
    ad::NoGradGuard guard;
    RandomStream rng(seed_);
    const Points pts = subsample(normalize_cloud(cloud).cloud.points, net_.cfg.points, rng);
    const ad::Matrix<float> logits = net_(ad::constant<float>(pts.cast<float>()), 1).value();
    Eigen::VectorXd s = logits.row(0).transpose().cast<double>();
    if (!s.allFinite()) throw std::runtime_error("PointNet classifier produced non-finite scores");
    const double m = s.maxCoeff();
    return s.array() - (m + std::log((s.array() - m).exp().sum()));
  }

  PointNet<float>& net() { return net_; }
  const PointNet<float>& net() const { return net_; }
  std::uint64_t seed() const { return seed_; }

 private:
  PointNet<float> net_;
  std::uint64_t seed_ = 0;
};

struct PointNetTraining {
  int steps = 300;
  int batch = 16;
  double lr = 1e-3;
  double jitter = 0.01;
};

/// Trains on labelled clouds with random subsampling, scaling and jitter.
inline PointNetClassifier train_pointnet(std::span<const PointCloud> clouds, std::span<const int> labels, const PointNetConfig& cfg,
                                         const PointNetTraining& tr, std::uint64_t seed) {
  if (clouds.empty() || clouds.size() != labels.size()) throw std::invalid_argument("train_pointnet: need matching clouds and labels");
  RandomStream init(derive_seed(seed, {1}));
  PointNet<float> net(cfg, init);
  nn::ParameterSet<float> ps;
  net.collect(ps);
  nn::AdamWConfig oc;
  oc.lr = tr.lr;
  nn::AdamW<float> opt(oc);
  std::vector<Points> normalized;
  for (const auto& c : clouds) normalized.push_back(normalize_cloud(c).cloud.points);
  RandomStream rng(derive_seed(seed, {2}));
  ad::Matrix<float> batch_pts(static_cast<ad::Index>(tr.batch) * cfg.points, 3);
  std::vector<int> y(static_cast<std::size_t>(tr.batch));
  for (int step = 0; step < tr.steps; ++step) {
    for (int b = 0; b < tr.batch; ++b) {
      const auto i = static_cast<std::size_t>(rng.below(clouds.size()));
      y[static_cast<std::size_t>(b)] = labels[i];
      Points p = subsample(normalized[i], cfg.points, rng) * rng.uniform(0.9, 1.1);
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        for (int k = 0; k < 3; ++k) p(r, k) += tr.jitter * rng.normal();
      }
      batch_pts.middleRows(static_cast<ad::Index>(b) * cfg.points, cfg.points) = p.cast<float>();
    }
    ps.zero_grad();
    auto loss = ad::cross_entropy<float>(net(ad::constant(batch_pts), tr.batch), y);
    if (!std::isfinite(loss.item())) throw std::runtime_error("train_pointnet: non-finite loss at step " + std::to_string(step));
    loss.backward();
    opt.step(ps);
  }
  return PointNetClassifier(std::move(net), derive_seed(seed, {3}));
}

// --- electrode ablation -----------------------------------------------------

/// Maps (static epochs, dynamic epochs) to trials × classes logits.
using TrialScorer = std::function<Eigen::MatrixXd(const EpochSet&, const EpochSet&)>;

inline EpochSet zero_channels(const EpochSet& x, std::span<const std::size_t> channels) {
  EpochSet out = x;
  for (std::size_t c : channels) {
    if (c >= x.channels) throw std::out_of_range("zero_channels: channel index " + std::to_string(c));
    for (std::size_t t = 0; t < x.trials(); ++t) {
      std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>((t * x.channels + c) * x.samples), x.samples, 0.0f);
    }
  }
  return out;
}

inline Eigen::MatrixXd checked_scores(const TrialScorer& scorer, const EpochSet& st, const EpochSet& dy, std::size_t trials) {
  Eigen::MatrixXd s = scorer(st, dy);
  if (static_cast<std::size_t>(s.rows()) != trials || s.cols() < 2) throw std::runtime_error("scorer returned a malformed score matrix");
  if (!s.allFinite()) throw std::runtime_error("scorer returned non-finite scores");
  return s;
}

inline void check_ablation_inputs(const EpochSet& st, const EpochSet& dy, std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("ablation: empty test set");
  if (st.trials() != labels.size() || dy.trials() != labels.size()) throw std::invalid_argument("ablation: trial counts differ");
  if (st.channels != dy.channels) throw std::invalid_argument("ablation: channel counts differ");
}

struct ChannelSaliency {
  std::string name;
  std::size_t index = 0;
  double accuracy_drop = 0;  // top-1 accuracy points lost when zeroed
  double saliency = 0;       // mean true-class probability lost, x100
};

struct ChannelAblationResult {
  double baseline_accuracy = 0;
  double baseline_confidence = 0;
  std::vector<ChannelSaliency> channels;  // channel index order

  std::vector<ChannelSaliency> by_name() const {
    auto v = channels;
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return v;
  }
};

/// Scores for several classification tasks from one pass over the trials.
using MultiTaskScorer = std::function<std::vector<Eigen::MatrixXd>(const EpochSet&, const EpochSet&)>;

/// Zeroes one channel at a time in both signal streams and records the loss
/// in top-1 accuracy and in mean true-class probability, averaged over the
/// tasks (one label vector per task).
inline ChannelAblationResult channel_ablation(const MultiTaskScorer& scorer, std::span<const std::vector<int>> labels, const EpochSet& st,
                                              const EpochSet& dy, std::span<const std::string> names = montage::channel_names()) {
  if (labels.empty()) throw std::invalid_argument("channel_ablation: no tasks");
  for (const auto& l : labels) check_ablation_inputs(st, dy, l);
  if (names.size() != st.channels) throw std::invalid_argument("channel_ablation: need one name per channel");
  const double tasks = static_cast<double>(labels.size());
  auto measure = [&](const EpochSet& s, const EpochSet& d) {
    const auto scores = scorer(s, d);
    if (scores.size() != labels.size()) throw std::runtime_error("scorer returned the wrong number of tasks");
    std::pair<double, double> acc_conf{0, 0};
    for (std::size_t t = 0; t < labels.size(); ++t) {
      const auto& x = scores[t];
      if (static_cast<std::size_t>(x.rows()) != labels[t].size() || x.cols() < 2) throw std::runtime_error("scorer returned a malformed score matrix");
      if (!x.allFinite()) throw std::runtime_error("scorer returned non-finite scores");
      acc_conf.first += topk_accuracy(x, labels[t], 1) / tasks;
      acc_conf.second += 100.0 * label_probability(x, labels[t]).mean() / tasks;
    }
    return acc_conf;
  };
  ChannelAblationResult r;
  std::tie(r.baseline_accuracy, r.baseline_confidence) = measure(st, dy);
  for (std::size_t c = 0; c < st.channels; ++c) {
    const std::size_t one[1] = {c};
    const auto [acc, conf] = measure(zero_channels(st, one), zero_channels(dy, one));
    r.channels.push_back({names[c], c, r.baseline_accuracy - acc, r.baseline_confidence - conf});
  }
  return r;
}

inline ChannelAblationResult channel_ablation(const TrialScorer& scorer, const EpochSet& st, const EpochSet& dy, std::span<const int> labels,
                                              std::span<const std::string> names = montage::channel_names()) {
  const std::vector<std::vector<int>> one = {std::vector<int>(labels.begin(), labels.end())};
  return channel_ablation([&](const EpochSet& s, const EpochSet& d) { return std::vector<Eigen::MatrixXd>{scorer(s, d)}; }, one, st, dy, names);
}

struct RegionCell {
  std::string region;
  std::string condition;
  double accuracy = 0;  // top-k with the region zeroed
  double drop = 0;      // baseline minus accuracy
};

struct RegionAblationResult {
  int k = 5;
  std::vector<std::pair<std::string, double>> baseline;  // per condition
  std::vector<RegionCell> cells;                         // region-major

  const RegionCell& cell(const std::string& region, const std::string& condition) const {
    for (const auto& c : cells) {
      if (c.region == region && c.condition == condition) return c;
    }
    throw std::out_of_range("no region cell " + region + "/" + condition);
  }
};

/// Zeroes every channel of one region at a time and reports top-k accuracy
/// for each named signal condition.
inline RegionAblationResult region_ablation(const std::vector<std::pair<std::string, TrialScorer>>& conditions, const EpochSet& st,
                                            const EpochSet& dy, std::span<const int> labels, const montage::RegionMap& regions,
                                            int k = 5) {
  check_ablation_inputs(st, dy, labels);
  montage::validate_partition(regions, st.channels);
  if (conditions.empty()) throw std::invalid_argument("region_ablation: no signal conditions");
  RegionAblationResult r;
  r.k = k;
  for (const auto& [name, scorer] : conditions) r.baseline.emplace_back(name, topk_accuracy(checked_scores(scorer, st, dy, labels.size()), labels, k));
  for (const auto& region : montage::region_names()) {
    const auto it = regions.find(region);
    if (it == regions.end()) throw std::invalid_argument("region_ablation: missing region " + region);
    const EpochSet zs = zero_channels(st, it->second), zd = zero_channels(dy, it->second);
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
      const double acc = topk_accuracy(checked_scores(conditions[ci].second, zs, zd, labels.size()), labels, k);
      r.cells.push_back({region, conditions[ci].first, acc, r.baseline[ci].second - acc});
    }
  }
  return r;
}

// --- report -----------------------------------------------------------------

enum class MetricKind { Accuracy, Chamfer, F1, Value };

inline const char* to_string(MetricKind k) {
  switch (k) {
    case MetricKind::Accuracy: return "accuracy";
    case MetricKind::Chamfer: return "chamfer";
    case MetricKind::F1: return "f1";
    default: return "value";
  }
}

struct Metric {
  std::string name;
  MetricKind kind = MetricKind::Value;
  double value = 0;
};

struct EvalReport {
  int subject = 0;
  std::string mode = "fused";
  long long n_trials = 0;
  std::uint64_t seed = 0;
  double tau = kDefaultTau;
  std::vector<Metric> metrics;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  void add(std::string name, MetricKind kind, double value) {
    check(kind, value, name);
    metrics.push_back({std::move(name), kind, value});
  }

  double get(const std::string& name) const {
    for (const auto& m : metrics) {
      if (m.name == name) return m.value;
    }
    throw std::out_of_range("report has no metric " + name);
  }

  static void check(MetricKind kind, double v, const std::string& name) {
    const bool ok = std::isfinite(v) && (kind == MetricKind::Value || (kind == MetricKind::Chamfer ? v >= 0 : (v >= 0 && v <= 100)));
    if (!ok) throw std::invalid_argument("metric " + name + " out of range: " + std::to_string(v));
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["format"] = "neuro3d-eval";
    j["schema_version"] = kReportSchema;
    j["metadata"] = {{"subject", subject}, {"mode", mode},         {"n_trials", n_trials},
                     {"seed", seed},       {"f1_tau", tau},        {"chamfer_convention", kChamferConvention}};
    auto arr = nlohmann::ordered_json::array();
    for (const auto& m : metrics) arr.push_back({{"name", m.name}, {"kind", to_string(m.kind)}, {"value", m.value}});
    j["metrics"] = arr;
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }
};

}  // namespace neuro3d::eval
