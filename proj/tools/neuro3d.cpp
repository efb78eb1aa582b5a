// neuro3d: command-line front end for the EEG-to-3D pipeline.

#include "neuro3d/pipeline.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <optional>

using namespace neuro3d;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::string data_dir;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool quiet = false;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

config::RunConfig load_config(const Globals& g) {
  auto rc = g.config_path.empty() ? config::RunConfig{} : config::load(g.config_path);
  if (!g.data_dir.empty()) rc.data_dir = g.data_dir;
  if (!g.run_dir.empty()) rc.output_dir = g.run_dir;
  rc.data_dir = config::resolve(rc.data_dir);
  rc.output_dir = config::resolve(rc.output_dir);
  return rc;
}

/// Clears `dir` for a fresh run. Existing non-empty output is only replaced
/// under --force.
void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " already exists and is not empty; pass --force to overwrite it");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

std::ostream* log_stream(const Globals& g) { return g.quiet ? nullptr : &std::cerr; }

std::string or_default(const std::string& given, const std::string& fallback) { return given.empty() ? fallback : given; }

void check_exists(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw std::runtime_error(path + " not found; " + hint);
}

// --- commands ------------------------------------------------------------------

struct SynthArgs {
  std::optional<double> snr;
  std::optional<int> classes;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  auto rc = load_config(g);
  auto cfg = rc.synth;
  if (g.seed) cfg.seed = *g.seed;
  if (a.snr) cfg.snr = *a.snr;
  if (a.classes) cfg.n_classes = *a.classes;
  prepare_output(rc.data_dir, g.force);
  const auto files = synth::gen_dataset(cfg, rc.data_dir);
  std::cout << "wrote " << files.size() + 1 << " files to " << rc.data_dir << "\n";
  return 0;
}

struct PreprocessArgs {
  std::string input;
  std::string out;
};

int cmd_preprocess(const Globals& g, const PreprocessArgs& a) {
  const auto rc = load_config(g);
  const std::string input = config::resolve(or_default(a.input, (fs::path(rc.data_dir) / "raw" / "sample.e3dr").string()));
  const fs::path out = config::resolve(or_default(a.out, (fs::path(rc.output_dir) / "preprocessed").string()));
  check_exists(input, "pass --input with a raw E3DR recording");
  const auto rec = io::read_raw(input);
  const auto r = signal::preprocess(rec, rc.preprocess);
  prepare_output(out, g.force);
  io::write_epochs((out / "static.e3de").string(), r.static_epochs);
  io::write_epochs((out / "dynamic.e3de").string(), r.dynamic_epochs);
  nlohmann::ordered_json rej = nlohmann::ordered_json::array();
  for (const auto& e : r.rejected) {
    rej.push_back({{"event_index", e.event_index}, {"sample", e.sample}, {"stimulus_id", e.stimulus_id}, {"reason", e.reason}});
    if (!g.quiet) std::cerr << "rejected event " << e.event_index << " (stimulus " << e.stimulus_id << "): " << e.reason << "\n";
  }
  io::write_text((out / "rejected.json").string(), nlohmann::ordered_json{{"rejected", rej}}.dump(1) + "\n");
  std::cout << "static epochs " << r.static_epochs.trials() << ", dynamic epochs " << r.dynamic_epochs.trials() << ", rejected "
            << r.rejected.size() << " -> " << out.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string resume;
  std::string encoder;
  std::optional<int> steps;
  std::string mode;
  bool shuffle_labels = false;
};

/// Starts a stage directory: fresh runs need it empty (or --force); resumed
/// runs keep it.
void prepare_stage(const fs::path& dir, const TrainArgs& a, const Globals& g) {
  if (a.resume.empty()) prepare_output(dir, g.force);
}

int cmd_train_encoder(const Globals& g, const TrainArgs& a) {
  auto rc = load_config(g);
  if (g.seed) rc.seed = *g.seed;
  if (a.steps) rc.train_encoder.steps = *a.steps;
  if (!a.mode.empty()) rc.encoder.mode = encoder::fusion_mode_from_string(a.mode);
  if (a.shuffle_labels) rc.train_encoder.shuffle_labels = true;
  rc.validate();
  const pipeline::RunPaths paths{rc.output_dir};
  const auto ds = train::load_dataset(rc.data_dir, rc.visual_frames);
  prepare_stage(paths.stage("encoder"), a, g);
  const auto run = train::train_encoder(rc, ds, rc.output_dir, a.resume.empty() ? "" : config::resolve(a.resume), log_stream(g));
  const auto f = run.model.features(ds.test_static, ds.test_dynamic);
  const auto protos = train::prototypes(ds);
  std::cout << "encoder trained for " << run.loop.steps << " steps, final loss " << run.loop.final_loss << "; test object top-1 "
            << eval::topk_accuracy(run.model.object_scores(f, &protos), train::object_labels(ds.test_static), 1) << " -> "
            << run.loop.checkpoint << "\n";
  return 0;
}

std::string encoder_path(const TrainArgs& a, const pipeline::RunPaths& p) {
  const auto path = a.encoder.empty() ? p.latest("encoder") : config::resolve(a.encoder);
  check_exists(path, "run `neuro3d train-encoder` first or pass --encoder");
  return path;
}

int cmd_train_decoder(const Globals& g, const TrainArgs& a, bool color_stage) {
  auto rc = load_config(g);
  if (g.seed) rc.seed = *g.seed;
  if (a.steps) (color_stage ? rc.train_color.steps : rc.train_decoder.steps) = *a.steps;
  rc.validate();
  const pipeline::RunPaths paths{rc.output_dir};
  const auto enc = train::load_encoder(encoder_path(a, paths));
  const auto ds = train::load_dataset(rc.data_dir, rc.visual_frames);
  const auto data = train::conditioned_clouds(enc, ds, color_stage);
  const std::string resume = a.resume.empty() ? "" : config::resolve(a.resume);
  if (color_stage) {
    prepare_stage(paths.stage("color"), a, g);
    const auto run = train::train_color(rc, data, rc.output_dir, resume, log_stream(g));
    std::cout << "color model trained for " << run.loop.steps << " steps, final loss " << run.loop.final_loss << " -> " << run.loop.checkpoint << "\n";
  } else {
    prepare_stage(paths.stage("decoder"), a, g);
    const auto run = train::train_decoder(rc, data, rc.output_dir, resume, log_stream(g));
    std::cout << "decoder trained for " << run.loop.steps << " steps, final loss " << run.loop.final_loss << " -> " << run.loop.checkpoint << "\n";
  }
  return 0;
}

struct SampleArgs {
  std::vector<int> stimuli;
  std::string encoder, decoder, color;
  std::optional<int> samples;
};

int cmd_sample(const Globals& g, const SampleArgs& a) {
  auto rc = load_config(g);
  if (g.seed) rc.seed = *g.seed;
  if (a.samples) rc.sample.samples = *a.samples;
  rc.validate();
  const pipeline::RunPaths paths{rc.output_dir};
  auto pick = [&](const std::string& given, const char* kind) {
    const auto p = given.empty() ? paths.latest(kind) : config::resolve(given);
    check_exists(p, std::string("run `neuro3d train-") + kind + "` first or pass --" + kind);
    return p;
  };
  const auto enc = train::load_encoder(pick(a.encoder, "encoder"));
  const auto dec = train::load_decoder(pick(a.decoder, "decoder"));
  const auto col = train::load_color(pick(a.color, "color"));
  const auto ds = train::load_dataset(rc.data_dir, rc.visual_frames);
  prepare_output(paths.samples(), g.force);
  const auto entries = pipeline::sample_stimuli(rc, ds, enc, dec, col, a.stimuli, paths.samples().string(), log_stream(g));
  std::cout << "wrote " << entries.size() << " sampled clouds to " << paths.samples().string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string encoder;
  bool chance = false;
  bool no_samples = false;
};

int cmd_evaluate(const Globals& g, const EvalArgs& a) {
  auto rc = load_config(g);
  if (g.seed) rc.eval.seed = *g.seed;
  const pipeline::RunPaths paths{rc.output_dir};
  const auto path = a.encoder.empty() ? paths.latest("encoder") : config::resolve(a.encoder);
  check_exists(path, "run `neuro3d train-encoder` first or pass --encoder");
  const auto enc = train::load_encoder(path);
  const auto ds = train::load_dataset(rc.data_dir, rc.visual_frames);
  pipeline::EvalOptions opt;
  opt.chance_self_test = a.chance;
  opt.log = log_stream(g);
  if (!a.no_samples && fs::exists(paths.samples() / "index.json")) opt.samples_dir = paths.samples().string();
  const auto report = pipeline::evaluate(rc, ds, enc, opt);
  prepare_output(paths.eval(), g.force);
  pipeline::write_report(report, paths.eval().string());
  std::cout << pipeline::report_csv(report);
  if (a.chance && !report.extra.at("chance_self_test").at("passed").get<bool>()) {
    std::cerr << "error: chance self-test failed; see " << (paths.eval() / "report.json").string() << "\n";
    return 3;
  }
  return 0;
}

struct AblateArgs {
  std::string mode = "channel";
  std::string encoder, static_ckpt, dynamic_ckpt;
};

int cmd_ablate(const Globals& g, const AblateArgs& a) {
  const auto rc = load_config(g);
  const pipeline::RunPaths paths{rc.output_dir};
  const auto path = a.encoder.empty() ? paths.latest("encoder") : config::resolve(a.encoder);
  check_exists(path, "run `neuro3d train-encoder` first or pass --encoder");
  const auto enc = train::load_encoder(path);
  const auto ds = train::load_dataset(rc.data_dir, rc.visual_frames);
  const auto out = paths.ablation() / a.mode;
  if (a.mode == "channel") {
    const auto r = pipeline::channel_ablation(ds, enc);
    prepare_output(out, g.force);
    pipeline::write_channel_ablation(r, out.string());
    auto ranked = r.channels;
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.saliency > y.saliency; });
    std::cout << "baseline top-1 " << r.baseline_accuracy << "; most salient:";
    for (std::size_t i = 0; i < std::min<std::size_t>(8, ranked.size()); ++i) std::cout << " " << ranked[i].name;
    std::cout << "\n";
  } else {
    const auto models = pipeline::region_models(enc, a.static_ckpt.empty() ? "" : config::resolve(a.static_ckpt),
                                                a.dynamic_ckpt.empty() ? "" : config::resolve(a.dynamic_ckpt));
    const auto r = pipeline::region_ablation(ds, models, rc.eval.region_k);
    prepare_output(out, g.force);
    pipeline::write_region_ablation(r, out.string());
    for (const auto& c : r.cells) std::cout << c.region << " " << c.condition << " drop " << c.drop << "\n";
  }
  std::cout << "-> " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neuro3d: EEG to colored 3D point clouds"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON run configuration merged over the defaults")->check(CLI::ExistingFile);
  app.add_option("--data", g.data_dir, "dataset directory (default: config data_dir)");
  app.add_option("--run", g.run_dir, "run output directory (default: config output_dir)");
  app.add_option("--seed", g.seed, "seed for the invoked command");
  app.add_flag("--force", g.force, "overwrite existing outputs");
  app.add_flag("-q,--quiet", g.quiet, "suppress progress logging");
  app.footer("Relative paths resolve against $NEURO3D_DATA_DIR when it is set.");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--snr", sa.snr, "signal-to-noise ratio")->check(CLI::NonNegativeNumber);
  synth->add_option("--classes", sa.classes, "number of shape classes")->check(CLI::Range(2, 8));

  PreprocessArgs pa;
  auto* prep = app.add_subcommand("preprocess", "epoch a raw E3DR recording");
  prep->add_option("--input", pa.input, "raw recording (default: <data>/raw/sample.e3dr)");
  prep->add_option("--out", pa.out, "output directory (default: <run>/preprocessed)");

  TrainArgs te, td, tc;
  auto* tenc = app.add_subcommand("train-encoder", "train the EEG encoder and decoupling heads");
  tenc->add_option("--resume", te.resume, "checkpoint to resume from");
  tenc->add_option("--steps", te.steps, "override train_encoder.steps")->check(CLI::PositiveNumber);
  tenc->add_option("--mode", te.mode, "signal streams")->check(CLI::IsMember({"fused", "static", "dynamic"}));
  tenc->add_flag("--shuffle-labels", te.shuffle_labels, "permutation control");
  auto* tdec = app.add_subcommand("train-decoder", "train the point-cloud diffusion decoder");
  tdec->add_option("--resume", td.resume, "checkpoint to resume from");
  tdec->add_option("--encoder", td.encoder, "encoder checkpoint (default: <run>/encoder/latest.n3ck)");
  tdec->add_option("--steps", td.steps, "override train_decoder.steps")->check(CLI::PositiveNumber);
  auto* tcol = app.add_subcommand("train-color", "train the color model");
  tcol->add_option("--resume", tc.resume, "checkpoint to resume from");
  tcol->add_option("--encoder", tc.encoder, "encoder checkpoint (default: <run>/encoder/latest.n3ck)");
  tcol->add_option("--steps", tc.steps, "override train_color.steps")->check(CLI::PositiveNumber);

  SampleArgs sm;
  auto* samp = app.add_subcommand("sample", "generate colored clouds for test stimuli");
  samp->add_option("--stimulus", sm.stimuli, "stimulus ids (default: all test stimuli)");
  samp->add_option("--samples", sm.samples, "clouds per stimulus")->check(CLI::PositiveNumber);
  samp->add_option("--encoder", sm.encoder, "encoder checkpoint");
  samp->add_option("--decoder", sm.decoder, "decoder checkpoint");
  samp->add_option("--color", sm.color, "color checkpoint");

  EvalArgs ev;
  auto* evl = app.add_subcommand("evaluate", "classification and generation metrics");
  evl->add_option("--encoder", ev.encoder, "encoder checkpoint");
  evl->add_flag("--chance-self-test", ev.chance, "also score random predictions and check they land at chance");
  evl->add_flag("--no-samples", ev.no_samples, "skip generation metrics");

  AblateArgs ab;
  auto* abl = app.add_subcommand("ablate", "electrode and region ablation");
  abl->add_option("--mode", ab.mode, "channel or region")->check(CLI::IsMember({"channel", "region"}));
  abl->add_option("--encoder", ab.encoder, "fused encoder checkpoint");
  abl->add_option("--static-checkpoint", ab.static_ckpt, "encoder trained on static epochs only");
  abl->add_option("--dynamic-checkpoint", ab.dynamic_ckpt, "encoder trained on dynamic epochs only");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(g, sa);
    if (*prep) return cmd_preprocess(g, pa);
    if (*tenc) return cmd_train_encoder(g, te);
    if (*tdec) return cmd_train_decoder(g, td, false);
    if (*tcol) return cmd_train_decoder(g, tc, true);
    if (*samp) return cmd_sample(g, sm);
    if (*evl) return cmd_evaluate(g, ev);
    if (*abl) return cmd_ablate(g, ab);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
