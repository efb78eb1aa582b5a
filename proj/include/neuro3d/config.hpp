#pragma once

// Run configuration: every tunable of the pipeline in one JSON document.
// User files are merged over the defaults; unknown keys are errors.

#include "neuro3d/color.hpp"
#include "neuro3d/decouple.hpp"
#include "neuro3d/diffusion.hpp"
#include "neuro3d/encoder.hpp"
#include "neuro3d/eval.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/signal.hpp"
#include "neuro3d/synth.hpp"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <string>

namespace neuro3d {

namespace signal {
inline void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"band_lo", c.band_lo},         {"band_hi", c.band_hi},
       {"notch", c.notch},             {"notch_q", c.notch_q},
       {"target_rate", c.target_rate}, {"baseline_window", c.baseline_window},
       {"shrinkage", c.shrinkage},     {"static_seconds", c.static_seconds},
       {"dynamic_seconds", c.dynamic_seconds}};
}
inline void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  c.band_lo = j.at("band_lo");
  c.band_hi = j.at("band_hi");
  c.notch = j.at("notch");
  c.notch_q = j.at("notch_q");
  c.target_rate = j.at("target_rate");
  c.baseline_window = j.at("baseline_window");
  c.shrinkage = j.at("shrinkage");
  c.static_seconds = j.at("static_seconds");
  c.dynamic_seconds = j.at("dynamic_seconds");
}
}  // namespace signal

namespace nn {
inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}
inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  c.lr = j.at("lr");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.weight_decay = j.at("weight_decay");
}
}  // namespace nn

namespace eval {
inline void to_json(nlohmann::json& j, const NwaySpec& s) { j = {{"n_way", s.n_way}, {"k", s.k}}; }
inline void from_json(const nlohmann::json& j, NwaySpec& s) {
  s.n_way = j.at("n_way");
  s.k = j.at("k");
}
inline void to_json(nlohmann::json& j, const PointNetTraining& t) {
  j = {{"steps", t.steps}, {"batch", t.batch}, {"lr", t.lr}, {"jitter", t.jitter}};
}
inline void from_json(const nlohmann::json& j, PointNetTraining& t) {
  t.steps = j.at("steps");
  t.batch = j.at("batch");
  t.lr = j.at("lr");
  t.jitter = j.at("jitter");
}
}  // namespace eval

namespace config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  nn::AdamWConfig adamw;
  double grad_clip = 1.0;  // global L2 norm; 0 disables clipping
};

struct EncoderTraining {
  int steps = 120;
  int batch = 64;
  int checkpoint_every = 50;
  int log_every = 10;
  bool shuffle_labels = false;  // permutation control: breaks the trial-to-label pairing
  double augment_noise = 1.0;   // additive Gaussian noise, in units of the trial's RMS
  double augment_gain = 0.1;    // per-trial gain drawn from U(1 - g, 1 + g)
};

struct DecoderTraining {
  int steps = 2000;
  int batch = 8;
  int points = 512;
  int checkpoint_every = 500;
  int log_every = 50;
};

struct ColorTraining {
  int steps = 300;
  int batch = 16;
  int points = 256;
  int checkpoint_every = 100;
  int log_every = 25;
};

struct SampleConfig {
  int samples = 5;
  int points = 512;
};

struct EvalConfig {
  std::uint64_t seed = 0;
  double tau = eval::kDefaultTau;
  std::vector<eval::NwaySpec> nway = eval::default_nway_specs();
  std::vector<int> object_topk{1, 5};
  std::vector<int> color_topk{1, 2};
  eval::PointNetConfig classifier;
  eval::PointNetTraining classifier_training;
  int region_k = 5;
};

struct RunConfig {
  std::string data_dir = "data";
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;
  ad::Index feature_dim = decouple::kFeatureDim;
  int visual_frames = visual::kDefaultFrames;
  signal::PreprocessConfig preprocess;
  synth::SynthConfig synth;
  encoder::EncoderConfig encoder;
  decouple::LossConfig loss;
  diffusion::ScheduleConfig schedule;
  diffusion::DenoiserConfig denoiser;
  color::ColorModelConfig color_model;
  OptimizerConfig optimizer;
  EncoderTraining train_encoder;
  DecoderTraining train_decoder;
  ColorTraining train_color;
  SampleConfig sample;
  EvalConfig eval;

  void validate() const;
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = c.adamw;
  j["grad_clip"] = c.grad_clip;
}
inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c.adamw = j.get<nn::AdamWConfig>();
  c.grad_clip = j.at("grad_clip");
}

inline void to_json(nlohmann::json& j, const EncoderTraining& c) {
  j = {{"steps", c.steps},
       {"batch", c.batch},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"shuffle_labels", c.shuffle_labels},
       {"augment_noise", c.augment_noise},
       {"augment_gain", c.augment_gain}};
}
inline void from_json(const nlohmann::json& j, EncoderTraining& c) {
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.checkpoint_every = j.at("checkpoint_every");
  c.log_every = j.at("log_every");
  c.shuffle_labels = j.at("shuffle_labels");
  c.augment_noise = j.at("augment_noise");
  c.augment_gain = j.at("augment_gain");
}

inline void to_json(nlohmann::json& j, const DecoderTraining& c) {
  j = {{"steps", c.steps}, {"batch", c.batch}, {"points", c.points}, {"checkpoint_every", c.checkpoint_every}, {"log_every", c.log_every}};
}
inline void from_json(const nlohmann::json& j, DecoderTraining& c) {
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.points = j.at("points");
  c.checkpoint_every = j.at("checkpoint_every");
  c.log_every = j.at("log_every");
}

inline void to_json(nlohmann::json& j, const ColorTraining& c) {
  j = {{"steps", c.steps}, {"batch", c.batch}, {"points", c.points}, {"checkpoint_every", c.checkpoint_every}, {"log_every", c.log_every}};
}
inline void from_json(const nlohmann::json& j, ColorTraining& c) {
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.points = j.at("points");
  c.checkpoint_every = j.at("checkpoint_every");
  c.log_every = j.at("log_every");
}

inline void to_json(nlohmann::json& j, const SampleConfig& c) { j = {{"samples", c.samples}, {"points", c.points}}; }
inline void from_json(const nlohmann::json& j, SampleConfig& c) {
  c.samples = j.at("samples");
  c.points = j.at("points");
}

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"seed", c.seed},
       {"tau", c.tau},
       {"nway", c.nway},
       {"object_topk", c.object_topk},
       {"color_topk", c.color_topk},
       {"classifier", c.classifier},
       {"classifier_training", c.classifier_training},
       {"region_k", c.region_k}};
}
inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.seed = j.at("seed");
  c.tau = j.at("tau");
  c.nway = j.at("nway").get<std::vector<eval::NwaySpec>>();
  c.object_topk = j.at("object_topk").get<std::vector<int>>();
  c.color_topk = j.at("color_topk").get<std::vector<int>>();
  c.classifier = j.at("classifier").get<eval::PointNetConfig>();
  c.classifier_training = j.at("classifier_training").get<eval::PointNetTraining>();
  c.region_k = j.at("region_k");
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"data_dir", c.data_dir},
       {"output_dir", c.output_dir},
       {"seed", c.seed},
       {"feature_dim", c.feature_dim},
       {"visual_frames", c.visual_frames},
       {"preprocess", c.preprocess},
       {"synth", c.synth},
       {"encoder", c.encoder},
       {"loss", c.loss},
       {"schedule", c.schedule},
       {"denoiser", c.denoiser},
       {"color_model", c.color_model},
       {"optimizer", c.optimizer},
       {"train_encoder", c.train_encoder},
       {"train_decoder", c.train_decoder},
       {"train_color", c.train_color},
       {"sample", c.sample},
       {"eval", c.eval}};
}
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  c.data_dir = j.at("data_dir");
  c.output_dir = j.at("output_dir");
  c.seed = j.at("seed");
  c.feature_dim = j.at("feature_dim");
  c.visual_frames = j.at("visual_frames");
  c.preprocess = j.at("preprocess").get<signal::PreprocessConfig>();
  c.synth = j.at("synth").get<synth::SynthConfig>();
  c.encoder = j.at("encoder").get<encoder::EncoderConfig>();
  c.loss = j.at("loss").get<decouple::LossConfig>();
  c.schedule = j.at("schedule").get<diffusion::ScheduleConfig>();
  c.denoiser = j.at("denoiser").get<diffusion::DenoiserConfig>();
  c.color_model = j.at("color_model").get<color::ColorModelConfig>();
  c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.train_encoder = j.at("train_encoder").get<EncoderTraining>();
  c.train_decoder = j.at("train_decoder").get<DecoderTraining>();
  c.train_color = j.at("train_color").get<ColorTraining>();
  c.sample = j.at("sample").get<SampleConfig>();
  c.eval = j.at("eval").get<EvalConfig>();
}

namespace detail {

inline const char* kind_name(const nlohmann::json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

/// Overlays `user` onto `base` in place. Objects merge key by key; anything
/// else is replaced whole, provided the JSON kinds agree.
inline void merge(nlohmann::json& base, const nlohmann::json& user, const std::string& where) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown configuration key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it->is_object()) throw ConfigError("configuration key '" + key + "' must be an object");
      merge(slot, *it, key);
      continue;
    }
    const bool both_numbers = slot.is_number() && it->is_number();
    if (!both_numbers && std::string(kind_name(slot)) != kind_name(*it)) {
      throw ConfigError("configuration key '" + key + "' must be a " + kind_name(slot) + ", got " + kind_name(*it));
    }
    if (slot.is_number_unsigned() && it->is_number_integer() && it->get<long long>() < 0) {
      throw ConfigError("configuration key '" + key + "' must be non-negative");
    }
    if (slot.is_number_integer() && it->is_number_float()) {
      throw ConfigError("configuration key '" + key + "' must be an integer");
    }
    slot = *it;
  }
}

inline void positive(long long v, const char* what) {
  if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
}

}  // namespace detail

inline void RunConfig::validate() const {
  try {
    preprocess.validate();
    synth.validate();
    encoder.validate();
    loss.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  detail::positive(feature_dim, "feature_dim");
  detail::positive(visual_frames, "visual_frames");
  if (denoiser.cond_dim != feature_dim) throw ConfigError("denoiser.cond_dim must equal feature_dim");
  if (color_model.feature_dim != feature_dim) throw ConfigError("color_model.feature_dim must equal feature_dim");
  if (synth.visual_dim != feature_dim) throw ConfigError("synth.visual_dim must equal feature_dim");
  if (encoder.channels != synth.channels) throw ConfigError("encoder.channels must equal synth.channels");
  if (encoder.static_samples != synth.static_samples || encoder.dynamic_samples != synth.dynamic_samples) {
    throw ConfigError("encoder epoch lengths must match synth epoch lengths");
  }
  if (schedule.sample_steps < 1 || schedule.sample_steps > schedule.steps) {
    throw ConfigError("schedule.sample_steps must lie in [1, schedule.steps]");
  }
  if (denoiser.widths.empty()) throw ConfigError("denoiser.widths must not be empty");
  for (auto [v, what] : {std::pair{train_encoder.steps, "train_encoder.steps"}, {train_encoder.checkpoint_every, "train_encoder.checkpoint_every"},
                         {train_encoder.log_every, "train_encoder.log_every"}, {train_decoder.steps, "train_decoder.steps"},
                         {train_decoder.batch, "train_decoder.batch"}, {train_decoder.points, "train_decoder.points"},
                         {train_decoder.checkpoint_every, "train_decoder.checkpoint_every"}, {train_decoder.log_every, "train_decoder.log_every"},
                         {train_color.steps, "train_color.steps"}, {train_color.batch, "train_color.batch"},
                         {train_color.points, "train_color.points"}, {train_color.checkpoint_every, "train_color.checkpoint_every"},
                         {train_color.log_every, "train_color.log_every"}, {sample.samples, "sample.samples"},
                         {sample.points, "sample.points"}, {eval.region_k, "eval.region_k"}}) {
    detail::positive(v, what);
  }
  if (train_encoder.batch < 2) throw ConfigError("train_encoder.batch must be at least 2 (contrastive loss)");
  if (train_encoder.augment_noise < 0) throw ConfigError("train_encoder.augment_noise must be non-negative");
  if (train_encoder.augment_gain < 0 || train_encoder.augment_gain >= 1) throw ConfigError("train_encoder.augment_gain must lie in [0, 1)");
  if (optimizer.grad_clip < 0) throw ConfigError("optimizer.grad_clip must be non-negative");
  if (!(optimizer.adamw.lr > 0)) throw ConfigError("optimizer.lr must be positive");
  if (!(eval.tau > 0)) throw ConfigError("eval.tau must be positive");
  for (const auto& s : eval.nway) {
    if (s.n_way < 2 || s.k < 1 || s.k > s.n_way) throw ConfigError("eval.nway entries need n_way >= 2 and 1 <= k <= n_way");
  }
  for (int k : eval.object_topk) detail::positive(k, "eval.object_topk entries");
  for (int k : eval.color_topk) {
    if (k < 1 || k > color::kClasses) throw ConfigError("eval.color_topk entries must lie in [1, 6]");
  }
}

inline nlohmann::json default_json() { return nlohmann::json(RunConfig{}); }

inline RunConfig from_user_json(const nlohmann::json& user) {
  if (!user.is_object()) throw ConfigError("configuration must be a JSON object");
  nlohmann::json merged = default_json();
  detail::merge(merged, user, "");
  RunConfig c;
  try {
    c = merged.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load(const std::string& path) {
  nlohmann::json user;
  try {
    user = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse configuration " + path + ": " + e.what());
  } catch (const std::runtime_error&) {
    throw ConfigError("cannot read configuration " + path);
  }
  return from_user_json(user);
}

/// Root for relative paths: $NEURO3D_DATA_DIR when set, else the working
/// directory.
inline std::filesystem::path data_root() {
  if (const char* env = std::getenv("NEURO3D_DATA_DIR"); env && *env) return env;
  return std::filesystem::current_path();
}

inline std::string resolve(const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path.string() : (data_root() / path).lexically_normal().string();
}

}  // namespace config
}  // namespace neuro3d
