#pragma once

// Datasets, model bundles and the three training stages: encoder with
// decoupling heads, point-cloud decoder on frozen geometry features, and
// color model on frozen appearance features.

#include "neuro3d/checkpoint.hpp"
#include "neuro3d/color.hpp"
#include "neuro3d/config.hpp"
#include "neuro3d/decouple.hpp"
#include "neuro3d/diffusion.hpp"
#include "neuro3d/encoder.hpp"
#include "neuro3d/epoch_io.hpp"
#include "neuro3d/eval.hpp"
#include "neuro3d/pointcloud.hpp"
#include "neuro3d/synth.hpp"
#include "neuro3d/visual.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace neuro3d::train {

using ad::Index;
using signal::EpochSet;
namespace fs = std::filesystem;

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- dataset -----------------------------------------------------------------

struct StimulusInfo {
  int stimulus_id = 0;
  int object_class = 0;
  int color_class = 0;
  bool train = true;
  std::string cloud;  // path relative to the dataset root; empty when held in memory
};

struct Dataset {
  std::string dir;
  std::vector<std::string> shapes;
  color::Palette palette = color::Palette::standard();
  std::map<int, StimulusInfo> stimuli;
  std::map<int, Eigen::VectorXd> visual;   // unit-norm visual feature per stimulus
  std::map<int, PointCloud> clouds;        // only for in-memory datasets
  EpochSet train_static, train_dynamic;
  EpochSet test_static, test_dynamic;      // repetitions averaged

  int classes() const { return static_cast<int>(shapes.size()); }

  const StimulusInfo& info(int id) const {
    const auto it = stimuli.find(id);
    if (it == stimuli.end()) throw std::out_of_range("unknown stimulus " + std::to_string(id));
    return it->second;
  }

  PointCloud cloud(int id) const {
    if (const auto it = clouds.find(id); it != clouds.end()) return it->second;
    const auto& s = info(id);
    if (s.cloud.empty()) throw std::runtime_error("no point cloud stored for stimulus " + std::to_string(id));
    return read_ply((fs::path(dir) / s.cloud).string());
  }

  const Eigen::VectorXd& visual_feature(int id) const {
    const auto it = visual.find(id);
    if (it == visual.end()) throw std::runtime_error("no visual feature for stimulus " + std::to_string(id));
    return it->second;
  }

  std::vector<int> stimulus_ids(bool train) const {
    std::vector<int> out;
    for (const auto& [id, s] : stimuli) {
      if (s.train == train) out.push_back(id);
    }
    return out;
  }
};

inline int repetitions_per_stimulus(const EpochSet& x) {
  if (x.trials() == 0) return 0;
  std::map<int, int> counts;
  for (const auto& l : x.labels) ++counts[l.stimulus_id];
  const int first = counts.begin()->second;
  for (const auto& [id, n] : counts) {
    if (n != first) throw std::runtime_error("stimulus " + std::to_string(id) + " has " + std::to_string(n) + " repetitions, others have " + std::to_string(first));
  }
  return first;
}

inline void check_paired(const EpochSet& st, const EpochSet& dy, const std::string& what) {
  st.validate();
  dy.validate();
  if (st.trials() != dy.trials()) throw std::runtime_error(what + ": static and dynamic epoch counts differ");
  for (std::size_t i = 0; i < st.trials(); ++i) {
    if (st.labels[i].stimulus_id != dy.labels[i].stimulus_id || st.labels[i].repetition != dy.labels[i].repetition) {
      throw std::runtime_error(what + ": static and dynamic trials are not paired at index " + std::to_string(i));
    }
  }
}

/// Reads a dataset directory as written by the synth command.
inline Dataset load_dataset(const std::string& dir, int frames = visual::kDefaultFrames) {
  const fs::path root(dir);
  if (!fs::exists(root / "labels.json")) {
    throw std::runtime_error("no dataset at " + dir + " (labels.json missing; run `neuro3d synth` first)");
  }
  Dataset ds;
  ds.dir = dir;
  const auto lj = nlohmann::ordered_json::parse(io::read_text((root / "labels.json").string()));
  if (lj.at("format") != "neuro3d-labels") throw io::FormatError("labels.json has an unexpected format");
  ds.shapes = lj.at("shapes").get<std::vector<std::string>>();
  ds.palette = color::Palette::from_json(lj.at("palette"));
  for (const auto& s : lj.at("stimuli")) {
    StimulusInfo i;
    i.stimulus_id = s.at("stimulus_id");
    i.object_class = s.at("object_class");
    i.color_class = s.at("color_class");
    i.train = s.at("split") == "train";
    i.cloud = s.at("cloud");
    ds.stimuli[i.stimulus_id] = i;
  }
  auto eeg = [&](const char* name) { return io::read_epochs((root / "eeg" / name).string()); };
  ds.train_static = eeg("train_static.e3de");
  ds.train_dynamic = eeg("train_dynamic.e3de");
  check_paired(ds.train_static, ds.train_dynamic, "training split");
  const auto ts = eeg("test_static.e3de"), td = eeg("test_dynamic.e3de");
  check_paired(ts, td, "test split");
  const int reps = repetitions_per_stimulus(ts);
  ds.test_static = signal::average_repetitions(ts, signal::SplitMode::Test, reps);
  ds.test_dynamic = signal::average_repetitions(td, signal::SplitMode::Test, reps);

  const auto provider = visual::FileProvider::load((root / "visual" / "features.json").string());
  if (frames > provider.frames()) throw std::runtime_error("visual features hold fewer frames than requested");
  for (const auto& [id, s] : ds.stimuli) {
    ds.visual[id] = visual::visual_feature({id, s.object_class, s.color_class, visual::kVideoFrames}, provider, frames);
  }
  for (const auto* e : {&ds.train_static, &ds.test_static}) {
    for (const auto& l : e->labels) {
      const auto& s = ds.info(l.stimulus_id);
      if (s.object_class != l.object_class || s.color_class != l.color_class) {
        throw std::runtime_error("epoch labels disagree with labels.json for stimulus " + std::to_string(l.stimulus_id));
      }
    }
  }
  return ds;
}

/// Builds a dataset in memory from the generator. Test trials are only
/// generated when `with_test` is set.
inline Dataset synthesize_dataset(const synth::SynthConfig& cfg, bool with_test, bool with_clouds = true,
                                  int frames = visual::kDefaultFrames) {
  cfg.validate();
  Dataset ds;
  ds.shapes.assign(synth::family_names().begin(), synth::family_names().begin() + cfg.n_classes);
  const synth::EegModel model(cfg);
  const auto table = synth::stimulus_table(cfg);
  const visual::StubProvider stub(derive_seed(cfg.seed, {0x515}), cfg.visual_dim);
  for (const auto& r : table) {
    ds.stimuli[r.stimulus_id] = {r.stimulus_id, r.object_class, r.color_class, r.train, ""};
    ds.visual[r.stimulus_id] = visual::visual_feature({r.stimulus_id, r.object_class, r.color_class, visual::kVideoFrames}, stub, frames);
    if (with_clouds) ds.clouds[r.stimulus_id] = synth::gen_cloud(r.object_class, r.color_class, r.deform_seed, cfg, ds.palette);
  }
  auto tr = synth::gen_split(cfg, model, table, true);
  ds.train_static = std::move(tr.static_epochs);
  ds.train_dynamic = std::move(tr.dynamic_epochs);
  if (with_test) {
    auto te = synth::gen_split(cfg, model, table, false);
    ds.test_static = signal::average_repetitions(te.static_epochs, signal::SplitMode::Test, cfg.test_repetitions);
    ds.test_dynamic = signal::average_repetitions(te.dynamic_epochs, signal::SplitMode::Test, cfg.test_repetitions);
  }
  return ds;
}

inline std::vector<float> gather(const EpochSet& x, std::span<const std::size_t> idx) {
  std::vector<float> out;
  out.reserve(idx.size() * x.trial_size());
  for (auto i : idx) {
    const auto t = x.trial(i);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

inline EpochSet subset(const EpochSet& x, std::span<const std::size_t> idx) {
  EpochSet out = EpochSet::empty_like(x, x.samples);
  out.labels.clear();
  for (auto i : idx) out.labels.push_back(x.labels[i]);
  out.data = gather(x, idx);
  return out;
}

inline std::vector<int> object_labels(const EpochSet& x) {
  std::vector<int> out;
  for (const auto& l : x.labels) out.push_back(l.object_class);
  return out;
}

inline std::vector<int> color_labels(const EpochSet& x) {
  std::vector<int> out;
  for (const auto& l : x.labels) out.push_back(l.color_class);
  return out;
}

/// Unit-normalized feature scaled to norm sqrt(d), so entries are O(1) when
/// fed to the decoder and color model.
template <typename Derived>
Eigen::VectorXf condition_vector(const Eigen::MatrixBase<Derived>& f) {
  Eigen::VectorXf v = f.template cast<float>();
  const float n = v.norm();
  if (!(n > 0) || !std::isfinite(n)) throw std::runtime_error("condition_vector: degenerate feature");
  return v * (std::sqrt(static_cast<float>(v.size())) / n);
}

// --- encoder bundle ----------------------------------------------------------

struct Features {
  Eigen::MatrixXd geometry;    // trials × feature_dim
  Eigen::MatrixXd appearance;  // trials × feature_dim
};

struct Prototypes {
  Eigen::MatrixXd object;  // classes × feature_dim, unit rows
  Eigen::MatrixXd color;   // 6 × feature_dim, unit rows
};

/// Mean visual feature per object class and per color class over the
/// training stimuli.
inline Prototypes prototypes(const Dataset& ds) {
  const Index d = ds.visual.begin()->second.size();
  Prototypes p{Eigen::MatrixXd::Zero(ds.classes(), d), Eigen::MatrixXd::Zero(color::kClasses, d)};
  for (const auto& [id, s] : ds.stimuli) {
    if (!s.train) continue;
    p.object.row(s.object_class) += ds.visual_feature(id).transpose();
    p.color.row(s.color_class) += ds.visual_feature(id).transpose();
  }
  for (auto* m : {&p.object, &p.color}) {
    for (Index r = 0; r < m->rows(); ++r) {
      const double n = m->row(r).norm();
      if (n > 0) m->row(r) /= n;
    }
  }
  return p;
}

struct EncoderModel {
  encoder::EncoderConfig cfg;
  int classes = 0;
  Index feature_dim = decouple::kFeatureDim;
  double temperature = 0.07;
  bool class_heads = true;
  encoder::Encoder<float> enc;
  decouple::DecoupleHeads<float> heads;

  EncoderModel() = default;
  EncoderModel(const encoder::EncoderConfig& c, int classes_, Index feature_dim_, double temperature_, bool class_heads_, RandomStream& rng)
      : cfg(c), classes(classes_), feature_dim(feature_dim_), temperature(temperature_), class_heads(class_heads_), enc(c, rng),
        heads(c.d_model, classes_, rng, temperature_, feature_dim_) {}

  nn::ParameterSet<float> params() const {
    nn::ParameterSet<float> ps;
    enc.collect(ps);
    heads.collect(ps, class_heads);
    return ps;
  }

  nlohmann::json architecture() const {
    return {{"encoder", cfg}, {"classes", classes}, {"feature_dim", feature_dim}, {"temperature", temperature}, {"class_heads", class_heads}};
  }

  static EncoderModel from_checkpoint(const ckpt::Checkpoint& c) {
    if (c.kind != "encoder") throw std::runtime_error("expected an encoder checkpoint, got '" + c.kind + "'");
    const auto& a = c.architecture;
    RandomStream rng(0);
    EncoderModel m(a.at("encoder").get<encoder::EncoderConfig>(), a.at("classes").get<int>(), a.at("feature_dim").get<Index>(),
                   a.at("temperature").get<double>(), a.at("class_heads").get<bool>(), rng);
    auto ps = m.params();
    ckpt::restore(c, ps);
    return m;
  }

  /// Signal-stream hook: switches which streams feed the aggregator without
  /// touching the weights.
  EncoderModel with_mode(encoder::FusionMode mode) const {
    EncoderModel m = *this;
    m.enc.cfg.mode = mode;
    return m;
  }

  ad::Var<float> pooled(std::span<const float> st, std::span<const float> dy, Index batch) const {
    return enc.encode(encoder::TrialBatch<float>{batch, st, dy});
  }

  ad::Var<float> pooled(const EpochSet& st, const EpochSet& dy, std::span<const std::size_t> idx) const {
    const auto s = gather(st, idx), d = gather(dy, idx);
    return pooled(s, d, static_cast<Index>(idx.size()));
  }

  Features features(const EpochSet& st, const EpochSet& dy, std::size_t chunk = 32) const {
    ad::NoGradGuard guard;
    check_paired(st, dy, "features");
    Features f{Eigen::MatrixXd(static_cast<Index>(st.trials()), feature_dim), Eigen::MatrixXd(static_cast<Index>(st.trials()), feature_dim)};
    for (std::size_t start = 0; start < st.trials(); start += chunk) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(st.trials(), start + chunk); ++i) idx.push_back(i);
      const auto out = heads(pooled(st, dy, idx));
      f.geometry.middleRows(static_cast<Index>(start), static_cast<Index>(idx.size())) = out.geometry.value().cast<double>();
      f.appearance.middleRows(static_cast<Index>(start), static_cast<Index>(idx.size())) = out.appearance.value().cast<double>();
    }
    return f;
  }

  /// Trials × classes scores: class-head logits, or temperature-scaled
  /// cosine similarity to visual prototypes when the heads were not trained.
  Eigen::MatrixXd object_scores(const Features& f, const Prototypes* p = nullptr) const {
    return scores(f.geometry, heads.shape_head, p ? &p->object : nullptr);
  }
  Eigen::MatrixXd color_scores(const Features& f, const Prototypes* p = nullptr) const {
    return scores(f.appearance, heads.color_head, p ? &p->color : nullptr);
  }

 private:
  Eigen::MatrixXd scores(const Eigen::MatrixXd& x, const nn::Linear<float>& head, const Eigen::MatrixXd* proto) const {
    ad::NoGradGuard guard;
    if (class_heads) return head(ad::constant<float>(x.cast<float>())).value().cast<double>();
    if (!proto) throw std::runtime_error("model was trained without class heads; prototype features are required for scoring");
    Eigen::MatrixXd xn = x;
    for (Index r = 0; r < xn.rows(); ++r) xn.row(r) /= std::max(xn.row(r).norm(), 1e-12);
    return std::exp(static_cast<double>(heads.log_scale.value()(0, 0))) * xn * proto->transpose();
  }
};

inline eval::TrialScorer object_scorer(const EncoderModel& m, const Prototypes* p = nullptr) {
  return [&m, p](const EpochSet& st, const EpochSet& dy) { return m.object_scores(m.features(st, dy), p); };
}

// --- shared training loop ----------------------------------------------------

struct LoopSpec {
  std::string kind;
  int steps = 1;
  int checkpoint_every = 0;
  int log_every = 0;
  double grad_clip = 0;
  std::string out_dir;  // empty: nothing written
  std::vector<std::string> columns;  // loss components reported after the total
  nlohmann::json architecture = nlohmann::json::object();
  nlohmann::json run_config = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  std::ostream* log = nullptr;
};

inline std::string checkpoint_name(long long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06lld.n3ck", step);
  return buf;
}

inline std::string latest_checkpoint(const std::string& stage_dir) { return (fs::path(stage_dir) / "latest.n3ck").string(); }

inline std::string format_row(long long step, std::span<const double> values, double grad_norm) {
  std::ostringstream os;
  os << step;
  char buf[40];
  for (double v : values) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, ",%.9g", grad_norm);
  os << buf;
  return os.str();
}

/// Loss rows already on disk for steps up to `through`, so a resumed run
/// rewrites the same CSV it would have produced uninterrupted.
inline std::vector<std::string> read_rows(const std::string& csv, long long through) {
  std::vector<std::string> rows;
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= through) rows.push_back(line);
  }
  return rows;
}

struct LoopResult {
  long long steps = 0;
  double final_loss = 0;
  std::string checkpoint;
};

/// Runs steps (start, spec.steps]. `step_fn(rng)` computes the loss, calls
/// backward and returns {total, components...}; the loop clips, steps the
/// optimizer, logs and checkpoints.
template <typename StepFn>
LoopResult run_loop(const LoopSpec& spec, nn::ParameterSet<float>& ps, nn::AdamW<float>& opt, RandomStream& rng, long long start,
                    StepFn&& step_fn) {
  const std::string stage_dir = spec.out_dir.empty() ? "" : (fs::path(spec.out_dir) / spec.kind).string();
  const std::string csv = stage_dir.empty() ? "" : (fs::path(stage_dir) / "loss.csv").string();
  std::vector<std::string> rows;
  if (!stage_dir.empty()) {
    fs::create_directories(stage_dir);
    if (start > 0) rows = read_rows(csv, start);
  }
  std::string header = "step,loss";
  for (const auto& c : spec.columns) header += "," + c;
  header += ",grad_norm";

  LoopResult result;
  result.steps = start;
  auto save = [&](long long step) {
    if (stage_dir.empty()) return;
    ckpt::Checkpoint c;
    c.kind = spec.kind;
    c.step = step;
    c.architecture = spec.architecture;
    c.run_config = spec.run_config;
    c.extra = spec.extra;
    c.rng_state = rng.serialize();
    ckpt::capture(c, ps, &opt);
    const auto path = (fs::path(stage_dir) / checkpoint_name(step)).string();
    ckpt::save(path, c);
    ckpt::save(latest_checkpoint(stage_dir), c);
    std::string text = header + "\n";
    for (const auto& r : rows) text += r + "\n";
    io::write_text(csv, text);
    result.checkpoint = latest_checkpoint(stage_dir);
  };

  for (long long step = start + 1; step <= spec.steps; ++step) {
    ps.zero_grad();
    std::vector<double> values;
    try {
      values = step_fn(rng);
    } catch (const encoder::NonFiniteError& e) {
      throw TrainingDiverged(spec.kind + " training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    std::string bad_grad;
    for (const auto& p : ps) {
      if (p.var.has_grad() && !p.var.grad().allFinite()) {
        bad_grad = p.name;
        break;
      }
    }
    const bool finite = std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    if (!finite || !bad_grad.empty()) {
      std::ostringstream msg;
      msg << spec.kind << " training diverged at step " << step << ": loss";
      for (std::size_t i = 0; i < values.size(); ++i) msg << (i ? " " + spec.columns[i - 1] : std::string()) << "=" << values[i];
      if (!bad_grad.empty()) msg << "; first non-finite gradient in " << bad_grad;
      msg << "; last checkpoint: " << (result.checkpoint.empty() ? "none" : result.checkpoint)
          << ". Lower optimizer.lr or enable optimizer.grad_clip.";
      throw TrainingDiverged(msg.str());
    }
    const double norm = nn::clip_grad_norm(ps, spec.grad_clip > 0 ? spec.grad_clip : std::numeric_limits<double>::infinity());
    opt.step(ps);
    rows.push_back(format_row(step, values, norm));
    result.steps = step;
    result.final_loss = values[0];
    if (spec.log && spec.log_every > 0 && (step % spec.log_every == 0 || step == spec.steps)) {
      *spec.log << spec.kind << " step " << step << "/" << spec.steps << " loss " << values[0] << " grad_norm " << norm << "\n";
    }
    if ((spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0) || step == spec.steps) save(step);
  }
  if (start >= spec.steps && !stage_dir.empty()) result.checkpoint = latest_checkpoint(stage_dir);
  return result;
}

/// Loads `resume` (when non-empty) into the parameters, optimizer and data
/// stream; returns the step to continue from.
inline long long resume_from(const std::string& resume, const std::string& kind, const nlohmann::json& architecture,
                             nn::ParameterSet<float>& ps, nn::AdamW<float>& opt, RandomStream& rng) {
  if (resume.empty()) return 0;
  const auto c = ckpt::load(resume);
  if (c.kind != kind) throw std::runtime_error("cannot resume " + kind + " training from a " + c.kind + " checkpoint");
  if (c.architecture != architecture) throw std::runtime_error("checkpoint architecture differs from the configured " + kind + " model");
  ckpt::restore(c, ps, &opt);
  rng.deserialize(c.rng_state);
  return c.step;
}

/// `count` distinct indices from [0, n); depends only on the stream state so
/// that resumed runs draw the same batches.
inline void draw_without_replacement(std::vector<std::size_t>& pool, std::size_t count, RandomStream& rng, std::vector<std::size_t>& out) {
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  out.clear();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
}

// --- stage 1: encoder --------------------------------------------------------

struct EncoderRun {
  EncoderModel model;
  LoopResult loop;
};

/// Permutation of a batch's label side; identity unless the shuffled-label
/// control is enabled. Drawn afresh per batch so no trial-to-label pairing
/// persists across steps. Consumes no randomness when `shuffle` is false.
inline std::vector<std::size_t> label_permutation(std::size_t n, bool shuffle, RandomStream& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (shuffle) {
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.below(i))]);
  }
  return perm;
}

/// Training-time augmentation of one trial in place: a random gain and
/// additive white noise scaled to the trial's RMS.
inline void augment_trial(std::span<float> x, double gain_range, double noise, RandomStream& rng) {
  if (gain_range == 0 && noise == 0) return;
  const double gain = gain_range > 0 ? rng.uniform(1.0 - gain_range, 1.0 + gain_range) : 1.0;
  double sq = 0;
  for (float v : x) sq += static_cast<double>(v) * v;
  const double sd = noise * std::sqrt(sq / static_cast<double>(x.size()));
  for (auto& v : x) v = static_cast<float>(gain * v + (sd > 0 ? sd * rng.normal() : 0.0));
}

inline EncoderRun train_encoder(const config::RunConfig& rc, const Dataset& ds, const std::string& out_dir = "",
                                const std::string& resume = "", std::ostream* log = nullptr) {
  const auto& tr = rc.train_encoder;
  const auto& st = ds.train_static;
  const auto& dy = ds.train_dynamic;
  check_paired(st, dy, "training split");
  if (st.channels != static_cast<std::size_t>(rc.encoder.channels) || st.samples != static_cast<std::size_t>(rc.encoder.static_samples) ||
      dy.samples != static_cast<std::size_t>(rc.encoder.dynamic_samples)) {
    throw std::runtime_error("training epochs do not match the encoder configuration (channels/static_samples/dynamic_samples)");
  }
  if (static_cast<std::size_t>(tr.batch) > st.trials()) {
    throw std::runtime_error("train_encoder.batch (" + std::to_string(tr.batch) + ") exceeds the " + std::to_string(st.trials()) + " training trials");
  }
  if (ds.visual_feature(st.labels[0].stimulus_id).size() != rc.feature_dim) throw std::runtime_error("visual feature size differs from feature_dim");

  RandomStream init(derive_seed(rc.seed, {0xE4C0}));
  EncoderRun run{EncoderModel(rc.encoder, ds.classes(), rc.feature_dim, rc.loss.temperature, rc.loss.gamma > 0, init), {}};
  auto ps = run.model.params();
  nn::AdamW<float> opt(rc.optimizer.adamw);
  RandomStream rng(derive_seed(rc.seed, {0xBA7C}));
  const long long start = resume_from(resume, "encoder", run.model.architecture(), ps, opt, rng);

  std::vector<std::size_t> pool(st.trials());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  std::vector<std::size_t> idx;
  const Index b = tr.batch;

  LoopSpec spec;
  spec.kind = "encoder";
  spec.steps = tr.steps;
  spec.checkpoint_every = tr.checkpoint_every;
  spec.log_every = tr.log_every;
  spec.grad_clip = rc.optimizer.grad_clip;
  spec.out_dir = out_dir;
  spec.columns = {"align_geometry", "align_appearance", "categorical"};
  spec.architecture = run.model.architecture();
  spec.run_config = rc;
  spec.extra = {{"shuffle_labels", tr.shuffle_labels}};
  spec.log = log;

  run.loop = run_loop(spec, ps, opt, rng, start, [&](RandomStream& r) {
    draw_without_replacement(pool, static_cast<std::size_t>(b), r, idx);
    const auto perm = label_permutation(idx.size(), tr.shuffle_labels, r);
    std::vector<int> shapes, colors;
    ad::Matrix<float> fv(b, rc.feature_dim);
    for (Index i = 0; i < b; ++i) {
      const auto& l = st.labels[idx[perm[static_cast<std::size_t>(i)]]];
      shapes.push_back(l.object_class);
      colors.push_back(l.color_class);
      fv.row(i) = ds.visual_feature(l.stimulus_id).transpose().cast<float>();
    }
    auto xs = gather(st, idx), xd = gather(dy, idx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      augment_trial({xs.data() + i * st.trial_size(), st.trial_size()}, tr.augment_gain, tr.augment_noise, r);
      augment_trial({xd.data() + i * dy.trial_size(), dy.trial_size()}, tr.augment_gain, tr.augment_noise, r);
    }
    const auto f = run.model.heads(run.model.pooled(xs, xd, b));
    auto loss = decouple::total_loss<float>(f, ad::constant<float>(fv), shapes, colors, run.model.heads, rc.loss);
    loss.total.backward();
    return std::vector<double>{loss.total.item(), loss.align_geometry, loss.align_appearance, loss.categorical};
  });
  return run;
}

// --- stage 2: decoder --------------------------------------------------------

/// Training pairs for the conditional models: condition rows and, for each,
/// the index of its target cloud.
struct ConditionedClouds {
  Eigen::MatrixXf conditions;  // pairs × cond_dim
  std::vector<int> cloud_index;
  std::vector<PointCloud> clouds;  // normalized
  std::vector<int> cloud_labels;   // dominant color per cloud (color stage)
};

/// Geometry (or appearance) features of every training trial paired with its
/// stimulus' cloud.
inline ConditionedClouds conditioned_clouds(const EncoderModel& m, const Dataset& ds, bool appearance) {
  const auto f = m.features(ds.train_static, ds.train_dynamic);
  const auto& x = appearance ? f.appearance : f.geometry;
  ConditionedClouds cc;
  cc.conditions.resize(x.rows(), x.cols());
  std::map<int, int> slot;
  for (Index i = 0; i < x.rows(); ++i) {
    cc.conditions.row(i) = condition_vector(x.row(i).transpose()).transpose();
    const int id = ds.train_static.labels[static_cast<std::size_t>(i)].stimulus_id;
    auto [it, inserted] = slot.try_emplace(id, static_cast<int>(cc.clouds.size()));
    if (inserted) {
      cc.clouds.push_back(normalize_cloud(ds.cloud(id)).cloud);
      cc.cloud_labels.push_back(ds.info(id).color_class);
    }
    cc.cloud_index.push_back(it->second);
  }
  return cc;
}

inline Points subsample_points(const Points& pts, int count, RandomStream& rng) { return eval::subsample(pts, count, rng); }

struct DecoderRun {
  diffusion::Denoiser<float> net;
  LoopResult loop;
};

inline nlohmann::json decoder_architecture(const config::RunConfig& rc) {
  return {{"denoiser", rc.denoiser}, {"schedule", rc.schedule}};
}

inline DecoderRun train_decoder(const config::RunConfig& rc, const ConditionedClouds& data, const std::string& out_dir = "",
                                const std::string& resume = "", std::ostream* log = nullptr) {
  const auto& tr = rc.train_decoder;
  if (data.conditions.rows() == 0 || data.conditions.cols() != rc.denoiser.cond_dim) {
    throw std::runtime_error("decoder training needs condition rows of width denoiser.cond_dim");
  }
  RandomStream init(derive_seed(rc.seed, {0xDEC0}));
  DecoderRun run{diffusion::Denoiser<float>(rc.denoiser, init), {}};
  nn::ParameterSet<float> ps;
  run.net.collect(ps);
  nn::AdamW<float> opt(rc.optimizer.adamw);
  RandomStream rng(derive_seed(rc.seed, {0xDEC1}));
  const auto arch = decoder_architecture(rc);
  const long long start = resume_from(resume, "decoder", arch, ps, opt, rng);
  const auto schedule = diffusion::make_schedule(rc.schedule.steps, rc.schedule.beta_start, rc.schedule.beta_end);

  LoopSpec spec;
  spec.kind = "decoder";
  spec.steps = tr.steps;
  spec.checkpoint_every = tr.checkpoint_every;
  spec.log_every = tr.log_every;
  spec.grad_clip = rc.optimizer.grad_clip;
  spec.out_dir = out_dir;
  spec.architecture = arch;
  spec.run_config = rc;
  spec.log = log;

  const Index b = tr.batch, n = tr.points;
  run.loop = run_loop(spec, ps, opt, rng, start, [&](RandomStream& r) {
    ad::Matrix<float> x0(b * n, 3), eps(b * n, 3), cond(b, data.conditions.cols());
    std::vector<int> steps(static_cast<std::size_t>(b));
    for (Index i = 0; i < b; ++i) {
      const auto k = static_cast<Index>(r.below(static_cast<std::uint64_t>(data.conditions.rows())));
      cond.row(i) = data.conditions.row(k);
      const auto& cloud = data.clouds[static_cast<std::size_t>(data.cloud_index[static_cast<std::size_t>(k)])];
      x0.middleRows(i * n, n) = subsample_points(cloud.points, static_cast<int>(n), r).cast<float>();
      steps[static_cast<std::size_t>(i)] = 1 + static_cast<int>(r.below(static_cast<std::uint64_t>(schedule.steps())));
    }
    for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<float>(r.normal());
    auto loss = diffusion::diffusion_loss<float>(x0, steps, eps, schedule, run.net, ad::constant<float>(cond));
    loss.backward();
    return std::vector<double>{loss.item()};
  });
  return run;
}

inline diffusion::Denoiser<float> load_decoder(const std::string& path) {
  const auto c = ckpt::load(path);
  if (c.kind != "decoder") throw std::runtime_error("expected a decoder checkpoint at " + path + ", got '" + c.kind + "'");
  RandomStream rng(0);
  diffusion::Denoiser<float> net(c.architecture.at("denoiser").get<diffusion::DenoiserConfig>(), rng);
  nn::ParameterSet<float> ps;
  net.collect(ps);
  ckpt::restore(c, ps);
  return net;
}

inline diffusion::Schedule sampling_schedule(const diffusion::ScheduleConfig& c) {
  return diffusion::respace(diffusion::make_schedule(c.steps, c.beta_start, c.beta_end), c.sample_steps);
}

// --- stage 3: color ----------------------------------------------------------

struct ColorRun {
  color::ColorModel<float> model;
  LoopResult loop;
};

inline ColorRun train_color(const config::RunConfig& rc, const ConditionedClouds& data, const std::string& out_dir = "",
                            const std::string& resume = "", std::ostream* log = nullptr) {
  const auto& tr = rc.train_color;
  if (data.conditions.rows() == 0 || data.conditions.cols() != rc.color_model.feature_dim) {
    throw std::runtime_error("color training needs condition rows of width color_model.feature_dim");
  }
  if (data.cloud_labels.size() != data.clouds.size()) throw std::runtime_error("color training needs one label per cloud");
  RandomStream init(derive_seed(rc.seed, {0xC0C0}));
  ColorRun run{color::ColorModel<float>(rc.color_model, init), {}};
  nn::ParameterSet<float> ps;
  run.model.collect(ps);
  nn::AdamW<float> opt(rc.optimizer.adamw);
  RandomStream rng(derive_seed(rc.seed, {0xC0C1}));
  const nlohmann::json arch = {{"color_model", rc.color_model}};
  const long long start = resume_from(resume, "color", arch, ps, opt, rng);

  LoopSpec spec;
  spec.kind = "color";
  spec.steps = tr.steps;
  spec.checkpoint_every = tr.checkpoint_every;
  spec.log_every = tr.log_every;
  spec.grad_clip = rc.optimizer.grad_clip;
  spec.out_dir = out_dir;
  spec.architecture = arch;
  spec.run_config = rc;
  spec.log = log;

  const Index b = tr.batch, n = tr.points;
  run.loop = run_loop(spec, ps, opt, rng, start, [&](RandomStream& r) {
    ad::Matrix<float> pts(b * n, 3), cond(b, data.conditions.cols());
    std::vector<int> labels(static_cast<std::size_t>(b));
    for (Index i = 0; i < b; ++i) {
      const auto k = static_cast<Index>(r.below(static_cast<std::uint64_t>(data.conditions.rows())));
      cond.row(i) = data.conditions.row(k);
      const auto c = static_cast<std::size_t>(data.cloud_index[static_cast<std::size_t>(k)]);
      pts.middleRows(i * n, n) = subsample_points(data.clouds[c].points, static_cast<int>(n), r).cast<float>();
      labels[static_cast<std::size_t>(i)] = data.cloud_labels[c];
    }
    auto loss = color::color_loss<float>(run.model(ad::constant<float>(pts), ad::constant<float>(cond)), labels);
    loss.backward();
    return std::vector<double>{loss.item()};
  });
  return run;
}

inline color::ColorModel<float> load_color(const std::string& path) {
  const auto c = ckpt::load(path);
  if (c.kind != "color") throw std::runtime_error("expected a color checkpoint at " + path + ", got '" + c.kind + "'");
  RandomStream rng(0);
  color::ColorModel<float> m(c.architecture.at("color_model").get<color::ColorModelConfig>(), rng);
  nn::ParameterSet<float> ps;
  m.collect(ps);
  ckpt::restore(c, ps);
  return m;
}

inline EncoderModel load_encoder(const std::string& path) { return EncoderModel::from_checkpoint(ckpt::load(path)); }

}  // namespace neuro3d::train
