#pragma once

// Stage orchestration shared by the command-line tool and the acceptance
// harness: run-directory layout, sampling, evaluation and ablation.

#include "neuro3d/training.hpp"

#include <filesystem>
#include <ostream>

namespace neuro3d::pipeline {

namespace fs = std::filesystem;
using train::Dataset;
using train::EncoderModel;

/// Run directory layout: <root>/{encoder,decoder,color}/ hold loss.csv and
/// checkpoints, samples/ the generated clouds, eval/ and ablation/ reports.
struct RunPaths {
  fs::path root;
  fs::path stage(const std::string& kind) const { return root / kind; }
  std::string latest(const std::string& kind) const { return train::latest_checkpoint(stage(kind).string()); }
  fs::path samples() const { return root / "samples"; }
  fs::path eval() const { return root / "eval"; }
  fs::path ablation() const { return root / "ablation"; }
};

inline std::string sample_filename(int stimulus_id, int sample, std::uint64_t seed) {
  char buf[80];
  std::snprintf(buf, sizeof buf, "stim_%04d_k%d_seed%016llx.ply", stimulus_id, sample, static_cast<unsigned long long>(seed));
  return buf;
}

inline std::uint64_t sample_seed(std::uint64_t base, int stimulus_id, int sample) {
  return derive_seed(base, {0x5A4, static_cast<std::uint64_t>(stimulus_id), static_cast<std::uint64_t>(sample)});
}

struct SampleEntry {
  int stimulus_id = 0;
  int sample = 0;
  std::uint64_t seed = 0;
  std::string file;
  int predicted_color = -1;
};

/// Test-split features keyed by stimulus id (one averaged trial each).
inline std::map<int, Eigen::Index> test_rows(const Dataset& ds) {
  std::map<int, Eigen::Index> rows;
  for (std::size_t i = 0; i < ds.test_static.trials(); ++i) rows[ds.test_static.labels[i].stimulus_id] = static_cast<Eigen::Index>(i);
  return rows;
}

/// Draws `rc.sample.samples` clouds per stimulus from its averaged test
/// trial, paints them with the color model and writes PLY files plus an
/// index.json under `out_dir`.
inline std::vector<SampleEntry> sample_stimuli(const config::RunConfig& rc, const Dataset& ds, const EncoderModel& enc,
                                               const diffusion::Denoiser<float>& decoder, const color::ColorModel<float>& colors,
                                               std::vector<int> ids, const std::string& out_dir, std::ostream* log = nullptr) {
  const auto rows = test_rows(ds);
  if (ids.empty()) {
    for (const auto& [id, r] : rows) ids.push_back(id);
  }
  const auto f = enc.features(ds.test_static, ds.test_dynamic);
  const auto schedule = train::sampling_schedule(rc.schedule);
  fs::create_directories(out_dir);
  std::vector<SampleEntry> entries;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (int id : ids) {
    const auto it = rows.find(id);
    if (it == rows.end()) throw std::runtime_error("stimulus " + std::to_string(id) + " has no test trials");
    const Eigen::VectorXf g = train::condition_vector(f.geometry.row(it->second).transpose());
    const Eigen::VectorXd a = train::condition_vector(f.appearance.row(it->second).transpose()).cast<double>();
    ad::Matrix<float> cond(rc.sample.samples, g.size());
    std::vector<std::uint64_t> seeds;
    for (int k = 0; k < rc.sample.samples; ++k) {
      cond.row(k) = g.transpose();
      seeds.push_back(sample_seed(rc.seed, id, k));
    }
    const auto clouds = diffusion::sample<float>(decoder, cond, schedule, rc.sample.points, seeds);
    for (int k = 0; k < rc.sample.samples; ++k) {
      const auto painted = color::colorize(clouds[static_cast<std::size_t>(k)], a, colors, ds.palette);
      SampleEntry e{id, k, seeds[static_cast<std::size_t>(k)], sample_filename(id, k, seeds[static_cast<std::size_t>(k)]), painted.dominant_color};
      write_ply((fs::path(out_dir) / e.file).string(), painted,
                {"stimulus " + std::to_string(id), "sample " + std::to_string(k), "seed " + std::to_string(e.seed),
                 "color " + ds.palette.entries[static_cast<std::size_t>(e.predicted_color)].name});
      index.push_back({{"stimulus_id", id}, {"sample", k}, {"seed", e.seed}, {"file", e.file}, {"predicted_color", e.predicted_color}});
      entries.push_back(e);
    }
    if (log) *log << "sampled stimulus " << id << "\n";
  }
  nlohmann::ordered_json j;
  j["format"] = "neuro3d-samples";
  j["version"] = 1;
  j["samples_per_stimulus"] = rc.sample.samples;
  j["points"] = rc.sample.points;
  j["entries"] = index;
  io::write_text((fs::path(out_dir) / "index.json").string(), j.dump(1) + "\n");
  return entries;
}

inline std::vector<SampleEntry> read_sample_index(const std::string& dir) {
  const auto path = (fs::path(dir) / "index.json").string();
  if (!fs::exists(path)) throw std::runtime_error("no samples at " + dir + " (run `neuro3d sample` first)");
  const auto j = nlohmann::json::parse(io::read_text(path));
  if (j.at("format") != "neuro3d-samples") throw io::FormatError(path + " is not a sample index");
  std::vector<SampleEntry> out;
  for (const auto& e : j.at("entries")) {
    out.push_back({e.at("stimulus_id"), e.at("sample"), e.at("seed"), e.at("file"), e.at("predicted_color")});
  }
  return out;
}

/// Specs with n_way clipped to the number of classes available.
inline std::vector<eval::NwaySpec> effective_specs(const std::vector<eval::NwaySpec>& specs, int classes) {
  std::vector<eval::NwaySpec> out;
  for (auto s : specs) {
    s.n_way = std::min(s.n_way, classes);
    s.k = std::min(s.k, s.n_way);
    out.push_back(s);
  }
  return out;
}

struct EvalOptions {
  std::string samples_dir;   // empty: classification metrics only
  bool chance_self_test = false;
  std::ostream* log = nullptr;
};

struct ChanceCheck {
  std::string name;
  double measured = 0;
  double expected = 0;
  double tolerance = 0;
  bool ok() const { return std::abs(measured - expected) <= tolerance; }
};

/// Runs the metric code on uniformly random scores; each rate must land
/// within five binomial standard errors of k/n.
inline std::vector<ChanceCheck> chance_self_test(int classes, const std::vector<int>& object_topk, const std::vector<int>& color_topk,
                                                 const std::vector<eval::NwaySpec>& specs, std::uint64_t seed, int trials = 20000) {
  RandomStream rng(derive_seed(seed, {0xC4A7}));
  std::vector<ChanceCheck> out;
  auto band = [&](double p) { return 100.0 * 5.0 * std::sqrt(p * (1 - p) / trials); };
  auto table = [&](const std::string& prefix, int n, const std::vector<int>& ks) {
    Eigen::MatrixXd s(trials, n);
    std::vector<int> y(static_cast<std::size_t>(trials));
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = rng.uniform();
    for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    for (int k : ks) {
      if (k > n) continue;
      const double p = static_cast<double>(k) / n;
      out.push_back({prefix + "_top" + std::to_string(k), eval::topk_accuracy(s, y, k), 100.0 * p, band(p)});
    }
  };
  table("chance.object", classes, object_topk);
  table("chance.color", color::kClasses, color_topk);
  for (const auto& spec : effective_specs(specs, classes)) {
    double hits = 0;
    for (int t = 0; t < trials; ++t) {
      Eigen::VectorXd s(classes);
      for (int c = 0; c < classes; ++c) s(c) = rng.uniform();
      const int gt = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
      const auto cand = eval::nway_candidates(classes, gt, spec.n_way, rng);
      hits += eval::nway_hit(s, gt, cand, spec.k);
    }
    const double p = static_cast<double>(spec.k) / spec.n_way;
    out.push_back({"chance.nway." + std::to_string(spec.n_way) + "way_top" + std::to_string(spec.k), 100.0 * hits / trials, 100.0 * p, band(p)});
  }
  return out;
}

inline std::string metric_name(const eval::NwaySpec& s) { return std::to_string(s.n_way) + "way_top" + std::to_string(s.k); }

/// Classification metrics on the averaged test split and, when samples
/// exist, the five-sample generation protocol with geometry and color.
inline eval::EvalReport evaluate(const config::RunConfig& rc, const Dataset& ds, const EncoderModel& enc, const EvalOptions& opt = {}) {
  eval::EvalReport report;
  report.mode = encoder::to_string(enc.enc.cfg.mode);
  report.n_trials = static_cast<long long>(ds.test_static.trials());
  report.seed = rc.eval.seed;
  report.tau = rc.eval.tau;
  const int classes = ds.classes();

  const auto protos = train::prototypes(ds);
  const auto f = enc.features(ds.test_static, ds.test_dynamic);
  const auto obj = train::object_labels(ds.test_static), col = train::color_labels(ds.test_static);
  const auto so = enc.object_scores(f, &protos), sc = enc.color_scores(f, &protos);
  nlohmann::ordered_json skipped = nlohmann::ordered_json::array();
  for (int k : rc.eval.object_topk) {
    if (k > classes) {
      skipped.push_back("object_top" + std::to_string(k));
      continue;
    }
    report.add("object_top" + std::to_string(k), eval::MetricKind::Accuracy, eval::topk_accuracy(so, obj, k));
  }
  for (int k : rc.eval.color_topk) report.add("color_top" + std::to_string(k), eval::MetricKind::Accuracy, eval::topk_accuracy(sc, col, k));
  report.extra["classes"] = classes;
  report.extra["scoring"] = enc.class_heads ? "class heads" : "visual prototypes";
  if (!skipped.empty()) report.extra["skipped_metrics"] = skipped;

  if (!opt.samples_dir.empty()) {
    const auto entries = read_sample_index(opt.samples_dir);
    std::map<int, std::vector<SampleEntry>> by_stim;
    for (const auto& e : entries) by_stim[e.stimulus_id].push_back(e);
    const auto specs = effective_specs(rc.eval.nway, classes);
    nlohmann::ordered_json spec_info = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < specs.size(); ++i) {
      spec_info.push_back({{"requested", metric_name(rc.eval.nway[i])}, {"effective", metric_name(specs[i])}});
    }
    report.extra["nway_specs"] = spec_info;

    std::vector<PointCloud> train_clouds;
    std::vector<int> train_labels;
    for (const auto& [id, s] : ds.stimuli) {
      if (!s.train) continue;
      train_clouds.push_back(ds.cloud(id));
      train_labels.push_back(s.object_class);
    }
    auto pcfg = rc.eval.classifier;
    pcfg.classes = classes;
    if (opt.log) *opt.log << "training the point-cloud classifier on " << train_clouds.size() << " reference clouds\n";
    const auto clf = eval::train_pointnet(train_clouds, train_labels, pcfg, rc.eval.classifier_training, derive_seed(rc.eval.seed, {0x9C1}));

    std::vector<double> avg(specs.size(), 0.0), best(specs.size(), 0.0);
    double cd_avg = 0, cd_best = 0, f1_avg = 0, f1_best = 0, color_avg = 0, color_best = 0;
    int n = 0;
    for (const auto& [id, list] : by_stim) {
      if (list.size() != 5) throw std::runtime_error("stimulus " + std::to_string(id) + " has " + std::to_string(list.size()) + " samples; the protocol needs 5");
      std::vector<PointCloud> clouds;
      for (const auto& e : list) clouds.push_back(read_ply((fs::path(opt.samples_dir) / e.file).string()));
      const auto& info = ds.info(id);
      const auto reference = normalize_cloud(ds.cloud(id)).cloud;
      const auto r = eval::protocol_5sample(clouds, info.object_class, clf, specs, derive_seed(rc.eval.seed, {0x5E7, static_cast<std::uint64_t>(id)}),
                                            &reference, rc.eval.tau);
      for (std::size_t s = 0; s < specs.size(); ++s) {
        avg[s] += r.average[s];
        best[s] += r.best[s];
      }
      cd_avg += r.average_chamfer;
      cd_best += r.best_chamfer;
      f1_avg += r.average_f1;
      f1_best += r.best_f1;
      double hits = 0;
      for (const auto& e : list) hits += e.predicted_color == info.color_class;
      color_avg += 100.0 * hits / 5.0;
      color_best += list[static_cast<std::size_t>(r.geometry_best)].predicted_color == info.color_class ? 100.0 : 0.0;
      ++n;
    }
    if (n == 0) throw std::runtime_error("sample index at " + opt.samples_dir + " is empty");
    for (std::size_t s = 0; s < specs.size(); ++s) {
      report.add("generation.average." + metric_name(specs[s]), eval::MetricKind::Accuracy, avg[s] / n);
      report.add("generation.best." + metric_name(specs[s]), eval::MetricKind::Accuracy, best[s] / n);
    }
    report.add("generation.average.chamfer", eval::MetricKind::Chamfer, cd_avg / n);
    report.add("generation.best.chamfer", eval::MetricKind::Chamfer, cd_best / n);
    report.add("generation.average.f1", eval::MetricKind::F1, f1_avg / n);
    report.add("generation.best.f1", eval::MetricKind::F1, f1_best / n);
    report.add("generation.average.color_top1", eval::MetricKind::Accuracy, color_avg / n);
    report.add("generation.best.color_top1", eval::MetricKind::Accuracy, color_best / n);
    report.extra["generation_stimuli"] = n;
  }

  if (opt.chance_self_test) {
    bool all_ok = true;
    nlohmann::ordered_json checks = nlohmann::ordered_json::array();
    for (const auto& c : chance_self_test(classes, rc.eval.object_topk, rc.eval.color_topk, rc.eval.nway, rc.eval.seed)) {
      report.add(c.name, eval::MetricKind::Accuracy, c.measured);
      checks.push_back({{"name", c.name}, {"expected", c.expected}, {"tolerance", c.tolerance}, {"ok", c.ok()}});
      all_ok = all_ok && c.ok();
    }
    report.extra["chance_self_test"] = {{"passed", all_ok}, {"checks", checks}};
  }
  return report;
}

inline std::string report_csv(const eval::EvalReport& r) {
  std::string out = "metric,kind,value\n";
  char buf[64];
  for (const auto& m : r.metrics) {
    std::snprintf(buf, sizeof buf, "%.6f", m.value);
    out += m.name + "," + eval::to_string(m.kind) + "," + buf + "\n";
  }
  return out;
}

inline void write_report(const eval::EvalReport& r, const std::string& dir) {
  fs::create_directories(dir);
  io::write_text((fs::path(dir) / "report.json").string(), r.to_json().dump(1) + "\n");
  io::write_text((fs::path(dir) / "report.csv").string(), report_csv(r));
}

// --- ablation ----------------------------------------------------------------

/// Channel saliency over both decoded attributes, object and color.
inline eval::ChannelAblationResult channel_ablation(const Dataset& ds, const EncoderModel& enc) {
  const auto protos = train::prototypes(ds);
  const std::vector<std::vector<int>> labels = {train::object_labels(ds.test_static), train::color_labels(ds.test_static)};
  const eval::MultiTaskScorer scorer = [&](const train::EpochSet& st, const train::EpochSet& dy) {
    const auto f = enc.features(st, dy);
    return std::vector<Eigen::MatrixXd>{enc.object_scores(f, &protos), enc.color_scores(f, &protos)};
  };
  return eval::channel_ablation(scorer, labels, ds.test_static, ds.test_dynamic);
}

/// Condition models for region ablation: the fused checkpoint plus static
/// and dynamic variants, either dedicated checkpoints or the fused weights
/// with one stream switched off.
struct RegionModels {
  EncoderModel fused, static_only, dynamic_only;
};

inline RegionModels region_models(const EncoderModel& fused, const std::string& static_ckpt = "", const std::string& dynamic_ckpt = "") {
  RegionModels m{fused, fused.with_mode(encoder::FusionMode::Static), fused.with_mode(encoder::FusionMode::Dynamic)};
  if (!static_ckpt.empty()) m.static_only = train::load_encoder(static_ckpt);
  if (!dynamic_ckpt.empty()) m.dynamic_only = train::load_encoder(dynamic_ckpt);
  return m;
}

inline eval::RegionAblationResult region_ablation(const Dataset& ds, const RegionModels& models, int k) {
  const auto protos = train::prototypes(ds);
  std::vector<std::pair<std::string, eval::TrialScorer>> conditions = {
      {"static", train::object_scorer(models.static_only, &protos)},
      {"dynamic", train::object_scorer(models.dynamic_only, &protos)},
      {"fused", train::object_scorer(models.fused, &protos)}};
  return eval::region_ablation(conditions, ds.test_static, ds.test_dynamic, train::object_labels(ds.test_static), montage::default_regions(),
                               std::min(k, ds.classes()));
}

inline void write_channel_ablation(const eval::ChannelAblationResult& r, const std::string& dir) {
  fs::create_directories(dir);
  std::string csv = "channel,index,accuracy_drop,saliency\n";
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  char buf[96];
  for (const auto& c : r.channels) {
    std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f\n", c.index, c.accuracy_drop, c.saliency);
    csv += c.name + buf;
    arr.push_back({{"channel", c.name}, {"index", c.index}, {"accuracy_drop", c.accuracy_drop}, {"saliency", c.saliency}});
  }
  nlohmann::ordered_json j;
  j["format"] = "neuro3d-channel-ablation";
  j["version"] = 1;
  j["baseline_accuracy"] = r.baseline_accuracy;
  j["baseline_confidence"] = r.baseline_confidence;
  j["channels"] = arr;
  io::write_text((fs::path(dir) / "channels.csv").string(), csv);
  io::write_text((fs::path(dir) / "channels.json").string(), j.dump(1) + "\n");
}

inline void write_region_ablation(const eval::RegionAblationResult& r, const std::string& dir) {
  fs::create_directories(dir);
  std::string csv = "region,condition,top" + std::to_string(r.k) + "_accuracy,drop\n";
  nlohmann::ordered_json cells = nlohmann::ordered_json::array(), base = nlohmann::ordered_json::object();
  char buf[64];
  for (const auto& c : r.cells) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", c.accuracy, c.drop);
    csv += c.region + "," + c.condition + buf;
    cells.push_back({{"region", c.region}, {"condition", c.condition}, {"accuracy", c.accuracy}, {"drop", c.drop}});
  }
  for (const auto& [name, acc] : r.baseline) base[name] = acc;
  nlohmann::ordered_json j;
  j["format"] = "neuro3d-region-ablation";
  j["version"] = 1;
  j["k"] = r.k;
  j["baseline"] = base;
  j["cells"] = cells;
  io::write_text((fs::path(dir) / "regions.csv").string(), csv);
  io::write_text((fs::path(dir) / "regions.json").string(), j.dump(1) + "\n");
}

}  // namespace neuro3d::pipeline
