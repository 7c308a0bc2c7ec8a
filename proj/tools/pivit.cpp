// pivit: command-line driver for data synthesis, training, evaluation and
// ablation sweeps.

#include <CLI11.hpp>
#include <chrono>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>

#include "pivit/ablation.hpp"
#include "pivit/checkpoint.hpp"
#include "pivit/data.hpp"
#include "pivit/error.hpp"
#include "pivit/evalkit.hpp"
#include "pivit/sim3d.hpp"
#include "pivit/skelmap.hpp"
#include "pivit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pivit;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t workers = 1;
  std::string config;
  std::vector<std::string> overrides;
};

std::string version_text() {
  std::string s = std::string("pivit ") + PIVIT_VERSION + "\n";
  s += std::string("checkpoint     ") + ckpt::kFormatTag + "\n";
  s += std::string("map-cache      ") + skelmap::kMapFormatTag + "\n";
  s += std::string("feature-cache  ") + sim3d::kFeatureCacheTag + "\n";
  s += std::string("pose-schema    ") + data::kPoseSchemaTag + "\n";
  s += std::string("dataset        ") + data::kDatasetFormatTag + "\n";
  s += std::string("clip           ") + data::kClipFormatTag;
  return s;
}

trainer::TrainConfig load_config(const Globals& g, const std::vector<std::string>& extra = {}) {
  json doc = trainer::default_config_document();
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw ConfigError("cannot read config '" + g.config + "'");
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + g.config + "': " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config '" + g.config + "' must be a JSON object");
    doc.merge_patch(file);
  }
  for (const auto& s : extra) trainer::apply_override(doc, s);
  for (const auto& s : g.overrides) trainer::apply_override(doc, s);
  if (g.seed_given) doc["seed"] = g.seed;
  return trainer::train_config_from_json(doc);
}

void check_dataset(const trainer::TrainConfig& cfg, const data::Dataset& ds, const std::string& dir) {
  if (ds.samples.empty()) throw DataError("dataset '" + dir + "' is empty");
  if (ds.num_classes != cfg.model.classes)
    throw ConfigError("dataset '" + dir + "' has " + std::to_string(ds.num_classes) + " classes, model.classes is " +
                      std::to_string(cfg.model.classes));
  const auto& clip = ds.samples.front().clip;
  if (clip.frames != cfg.model.frames || clip.height != cfg.model.height || clip.width != cfg.model.width)
    throw ConfigError("dataset clips are " + std::to_string(clip.frames) + "x" + std::to_string(clip.height) + "x" +
                      std::to_string(clip.width) + ", model expects " + std::to_string(cfg.model.frames) + "x" +
                      std::to_string(cfg.model.height) + "x" + std::to_string(cfg.model.width));
  const auto& s = ds.samples.front();
  const std::size_t joints = s.pose2d ? s.pose2d->joints : s.pose3d ? s.pose3d->joints : cfg.joints;
  if (joints != cfg.joints)
    throw ConfigError("dataset poses have " + std::to_string(joints) + " joints, config joints is " +
                      std::to_string(cfg.joints));
}

std::unique_ptr<sim3d::ReferenceProvider> obtain_provider(const trainer::TrainConfig& cfg, const std::string& path,
                                                          const std::vector<data::LabeledSample>& train) {
  if (!path.empty()) {
    auto p = sim3d::ReferenceProvider::load(path);
    if (p->descriptor().d_s != cfg.sim3d.d_s)
      throw ConfigError("provider '" + path + "' has d_s " + std::to_string(p->descriptor().d_s) + ", config sim3d.d_s is " +
                        std::to_string(cfg.sim3d.d_s));
    return p;
  }
  std::cerr << "note: no --provider given; pretraining the reference provider on the training set\n";
  sim3d::PretrainReport rep;
  auto p = sim3d::ReferenceProvider::pretrain(train, {}, cfg.provider, &rep);
  std::cerr << "note: provider train accuracy " << rep.train_accuracy << "\n";
  return p;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

void warn_absent(const evalkit::EvalReport& r) {
  if (r.absent_classes.empty()) return;
  std::cerr << "WARNING: " << r.absent_classes.size() << " class(es) absent from the eval split are excluded from mCA:";
  for (auto c : r.absent_classes) std::cerr << ' ' << c;
  std::cerr << "\n";
}

// ---------------------------------------------------------------------------

int cmd_synth(const Globals& g, data::SyntheticSpec spec, std::size_t holdout, const std::string& out) {
  spec.seed = g.seed;
  spec.validate();
  spec.clips_per_class += holdout;
  const auto samples = data::generate_synthetic(spec);
  auto [train, eval] = trainer::split_holdout(samples, holdout);
  data::write_dataset(fs::path(out) / "train", {spec.num_classes, train});
  if (!eval.empty()) data::write_dataset(fs::path(out) / "eval", {spec.num_classes, eval});
  std::cout << "wrote " << train.size() << " training and " << eval.size() << " held-out samples to " << out << "\n";
  return 0;
}

int cmd_build_maps(const Globals& g, const std::string& data_dir, const std::string& out) {
  const auto cfg = load_config(g);
  const auto ds = data::read_dataset(data_dir);
  check_dataset(cfg, ds, data_dir);
  fs::create_directories(out);
  std::size_t bits = 0;
  for (const auto& s : ds.samples) {
    const auto map = trainer::build_sample_map(cfg, s);
    for (auto b : map.y) bits += b;
    skelmap::write_map_file(fs::path(out) / (s.clip.id + ".map"), map);
  }
  std::cout << "wrote " << ds.samples.size() << " " << skelmap::to_string(cfg.sim2d.variant) << " maps (" << bits
            << " set bits) to " << out << "\n";
  return 0;
}

int cmd_pretrain_provider(const Globals& g, const std::string& data_dir, const std::string& holdout_dir,
                          const std::string& out, const std::string& features_out) {
  const auto cfg = load_config(g);
  const auto train = data::read_dataset(data_dir);
  check_dataset(cfg, train, data_dir);
  data::Dataset holdout;
  if (!holdout_dir.empty()) holdout = data::read_dataset(holdout_dir);
  sim3d::PretrainReport rep;
  auto provider = sim3d::ReferenceProvider::pretrain(train.samples, holdout.samples, cfg.provider, &rep);
  provider->save(out);
  if (!features_out.empty()) {
    fs::create_directories(features_out);
    for (const data::Dataset* set : std::initializer_list<const data::Dataset*>{&train, &holdout})
      for (const auto& s : set->samples)
        if (s.pose3d)
          sim3d::write_feature_cache(fs::path(features_out) / (s.clip.id + ".feat"), provider->produce(*s.pose3d),
                                     provider->descriptor(), provider->weight_hash());
  }
  json report = {{"train_accuracy", rep.train_accuracy},
                 {"holdout_accuracy", holdout.samples.empty() ? json(nullptr) : json(rep.holdout_accuracy)},
                 {"final_epoch_loss", rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back()},
                 {"d_s", provider->descriptor().d_s},
                 {"weight_hash", provider->weight_hash()}};
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& data_dir, const std::string& out, const std::string& provider_path,
              const std::string& log_path, bool baseline, const std::string& maps_dir, const std::string& holdout_dir) {
  std::vector<std::string> extra;
  if (baseline) extra = {"sim2d.layers=[]", "sim3d.layers=[]"};
  const auto cfg = load_config(g, extra);
  const auto ds = data::read_dataset(data_dir);
  check_dataset(cfg, ds, data_dir);
  std::unique_ptr<sim3d::ReferenceProvider> provider;
  if (cfg.needs_provider()) provider = obtain_provider(cfg, provider_path, ds.samples);

  const auto start = std::chrono::steady_clock::now();
  trainer::Trainer t(cfg, provider.get());
  if (!maps_dir.empty()) t.set_map_cache(maps_dir);
  const auto prepared = t.prepare(ds.samples, g.workers);
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw Error("cannot write '" + log_path + "'");
  }
  trainer::LossBundle last;
  t.fit(prepared, [&](const trainer::StepRecord& r) {
    last = r.loss;
    if (log) log << r.to_json().dump() << "\n";
  });
  ckpt::save(out, trainer::training_checkpoint(t.model()));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const auto model = trainer::strip(t.model());
  const auto train_report = evalkit::evaluate(model, ds.samples, g.workers);
  json summary = {{"checkpoint", out},      {"seconds", seconds},          {"last_step", last.to_json()},
                  {"train_top1", train_report.top1}, {"train_mca", train_report.mca}};
  if (!holdout_dir.empty()) {
    const auto holdout = data::read_dataset(holdout_dir, false);
    const auto r = evalkit::evaluate(model, holdout.samples, g.workers);
    warn_absent(r);
    summary["holdout_top1"] = r.top1;
    summary["holdout_mca"] = r.mca;
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_eval(const Globals& g, const std::string& ckpt_path, const std::string& data_dir, const std::string& preds_path,
             const std::string& report_path) {
  const auto c = ckpt::load(ckpt_path);
  std::vector<evalkit::Prediction> preds;
  std::size_t classes = 0;
  if (c.kind == "reference-provider") {
    const auto provider = sim3d::ReferenceProvider::from_checkpoint(c);
    const auto ds = data::read_dataset(data_dir, true);
    classes = provider->config().classes;
    for (const auto& s : ds.samples) {
      if (!s.pose3d) throw DataError("sample '" + s.clip.id + "' has no 3D pose for the provider");
      preds.push_back({s.clip.id, s.clip.label, provider->probe_logits(*s.pose3d)});
    }
  } else {
    const auto model = trainer::load_backbone(c);
    const auto ds = data::read_dataset(data_dir, false);
    classes = model.config().classes;
    preds = evalkit::predict(model, ds.samples, g.workers);
  }
  const auto report = evalkit::report_from_predictions(preds, classes);
  warn_absent(report);
  if (!preds_path.empty()) evalkit::write_predictions(preds_path, preds);
  if (!report_path.empty()) write_json(report_path, report.to_json());
  std::cout << report.to_text();
  return 0;
}

int cmd_strip(const std::string& in, const std::string& out) {
  const auto c = trainer::strip_checkpoint(ckpt::load(in));
  ckpt::save(out, c);
  std::size_t params = 0;
  for (const auto& e : c.entries) params += e.value.size();
  std::cout << "wrote " << out << " (" << c.entries.size() << " tensors, " << params << " parameters)\n";
  return 0;
}

int cmd_fuse(const std::string& rgb_path, const std::string& pose_path, double w_rgb, double w_pose,
             const std::string& preds_path, const std::string& report_path) {
  const auto rgb = evalkit::read_predictions(rgb_path), pose = evalkit::read_predictions(pose_path);
  std::map<std::string, const evalkit::Prediction*> by_id;
  for (const auto& p : pose) by_id[p.id] = &p;
  if (rgb.empty()) throw DataError("no RGB predictions in '" + rgb_path + "'");
  const std::size_t classes = rgb.front().logits.size();
  std::vector<evalkit::Prediction> fused, pose_aligned;
  for (const auto& p : rgb) {
    auto it = by_id.find(p.id);
    if (it == by_id.end()) throw DataError("sample '" + p.id + "' has no pose prediction");
    auto probs = trainer::late_fuse(p.logits, it->second->logits, {w_rgb, w_pose});
    for (double& v : probs) v = std::log(std::max(v, 1e-300));
    fused.push_back({p.id, p.label, probs});
    pose_aligned.push_back(*it->second);
  }
  const auto r_rgb = evalkit::report_from_predictions(rgb, classes);
  const auto r_pose = evalkit::report_from_predictions(pose_aligned, classes);
  const auto r_fused = evalkit::report_from_predictions(fused, classes);
  if (!preds_path.empty()) evalkit::write_predictions(preds_path, fused);
  if (!report_path.empty())
    write_json(report_path, {{"rgb", r_rgb.to_json()}, {"pose", r_pose.to_json()}, {"fused", r_fused.to_json()}});
  std::printf("%-8s %8s %8s\n", "stream", "top1", "mCA");
  for (auto [name, r] : {std::pair{"rgb", &r_rgb}, {"pose", &r_pose}, {"fused", &r_fused}})
    std::printf("%-8s %8.4f %8.4f\n", name, r->top1, r->mca);
  return 0;
}

int cmd_ablate(const Globals& g, const std::string& axis, const std::string& data_dir, const std::string& holdout_dir,
               std::size_t holdout_per_class, const std::string& provider_path, const std::string& out) {
  const auto cfg = load_config(g);
  const auto& axes = ablation::axis_names();
  if (std::find(axes.begin(), axes.end(), axis) == axes.end()) throw ConfigError("unknown ablation axis '" + axis + "'");
  const auto ds = data::read_dataset(data_dir);
  check_dataset(cfg, ds, data_dir);
  std::vector<data::LabeledSample> train, holdout;
  if (!holdout_dir.empty()) {
    train = ds.samples;
    holdout = data::read_dataset(holdout_dir, false).samples;
  } else {
    std::tie(train, holdout) = trainer::split_holdout(ds.samples, holdout_per_class);
  }
  const bool needs_provider = axis != "map-variant" && axis != "placement-2dsim";
  std::unique_ptr<sim3d::ReferenceProvider> provider;
  if (needs_provider) provider = obtain_provider(cfg, provider_path, train);
  ablation::Inputs in{cfg, &train, &holdout, provider.get(), g.workers,
                      [](const std::string& msg) { std::cerr << msg << "\n"; }};
  const auto table = ablation::run(axis, in);
  if (!out.empty()) write_json(out, table.to_json());
  std::cout << table.to_text();
  return table.complete() ? 0 : 1;
}

int cmd_analyze(const Globals& g, const std::string& ckpt_path, const std::string& data_dir,
                const std::vector<std::string>& compare, const std::string& out) {
  (void)g;
  if (!compare.empty()) {
    const auto a = evalkit::read_predictions(compare.at(0)), b = evalkit::read_predictions(compare.at(1));
    if (a.empty() || b.empty()) throw DataError("empty prediction file");
    const std::size_t classes = a.front().logits.size();
    const auto cmp = evalkit::compare_runs(evalkit::report_from_predictions(a, classes),
                                           evalkit::report_from_predictions(b, classes));
    if (!out.empty()) write_json(out, cmp.to_json());
    std::cout << cmp.to_text();
    return 0;
  }
  if (ckpt_path.empty() || data_dir.empty()) throw ConfigError("analyze needs CHECKPOINT and --data, or --compare A B");
  const auto model = trainer::load_backbone(ckpt::load(ckpt_path));
  const auto ds = data::read_dataset(data_dir, true);
  const auto profile = evalkit::joint_token_distance_profile(model, ds.samples);
  if (!out.empty()) write_json(out, {{"joint_token_distance", profile}});
  std::printf("%-6s %12s\n", "layer", "distance");
  for (std::size_t l = 0; l < profile.size(); ++l) std::printf("%-6zu %12.6f\n", l + 1, profile[l]);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pose-induced video transformer toolkit"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.set_version_flag("--version", version_text());

  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed (overrides the config seed)");
  app.add_option("--workers", g.workers, "Worker threads for data preparation and inference")->check(CLI::Range(1, 256));
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--set", g.overrides, "Dotted config override key=value (repeatable, last wins)");

  data::SyntheticSpec spec;
  std::size_t holdout_per_class = 8;
  std::string out, data_dir, holdout_dir, provider_path, log_path, maps_dir, features_out, preds_path, report_path;
  std::string ckpt_in, axis, rgb_path, pose_path;
  std::vector<std::string> compare;
  bool baseline = false;
  double w_rgb = 0.5, w_pose = 0.5;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic video+pose dataset");
  synth->add_option("--out", out, "Output directory (train/ and eval/ are created)")->required();
  synth->add_option("--classes", spec.num_classes);
  synth->add_option("--clips-per-class", spec.clips_per_class, "Training clips per class");
  synth->add_option("--frames", spec.frames);
  synth->add_option("--height", spec.height);
  synth->add_option("--width", spec.width);
  synth->add_option("--joints", spec.joints);
  synth->add_option("--amplitude", spec.motion_amplitude);
  synth->add_option("--radius", spec.render_radius);
  synth->add_option("--holdout-per-class", holdout_per_class, "Extra clips per class written to eval/");

  auto* build_maps = app.add_subcommand("build-maps", "Precompute token-skeleton map files");
  build_maps->add_option("--data", data_dir)->required();
  build_maps->add_option("--out", out)->required();

  auto* pretrain = app.add_subcommand("pretrain-provider", "Pretrain and lock the reference skeleton provider");
  pretrain->add_option("--data", data_dir)->required();
  pretrain->add_option("--holdout", holdout_dir);
  pretrain->add_option("--out", out)->required();
  pretrain->add_option("--features-out", features_out, "Also write per-sample feature cache files here");

  auto* train = app.add_subcommand("train", "Train the backbone with the enabled modules");
  train->add_option("--data", data_dir)->required();
  train->add_option("--out", out)->required();
  train->add_option("--provider", provider_path);
  train->add_option("--log", log_path, "JSON-lines training log");
  train->add_flag("--baseline", baseline, "Disable both induction modules");
  train->add_option("--maps", maps_dir, "Directory of cached map files");
  train->add_option("--holdout", holdout_dir, "Evaluate this dataset after training");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (no poses needed for video models)");
  eval->add_option("checkpoint", ckpt_in)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--predictions", preds_path, "Write one JSON line per sample");
  eval->add_option("--report", report_path, "Write the report as JSON");

  std::string strip_out;
  auto* strip = app.add_subcommand("strip", "Remove all train-only modules from a checkpoint");
  strip->add_option("input", ckpt_in)->required();
  strip->add_option("output", strip_out)->required();

  auto* fuse = app.add_subcommand("fuse", "Late-fuse RGB and pose prediction dumps");
  fuse->add_option("--rgb", rgb_path)->required();
  fuse->add_option("--pose", pose_path)->required();
  fuse->add_option("--weight-rgb", w_rgb);
  fuse->add_option("--weight-pose", w_pose);
  fuse->add_option("--predictions", preds_path);
  fuse->add_option("--report", report_path);

  auto* ablate = app.add_subcommand("ablate", "Sweep one ablation axis and print its table");
  ablate->add_option("--axis", axis, "head|kd|placement-3dsim|map-variant|3dsim-classifier|placement-2dsim")->required();
  ablate->add_option("--data", data_dir)->required();
  ablate->add_option("--holdout", holdout_dir);
  ablate->add_option("--holdout-per-class", holdout_per_class, "Used when --holdout is not given");
  ablate->add_option("--provider", provider_path);
  ablate->add_option("--out", out, "Write the table as JSON");

  auto* analyze = app.add_subcommand("analyze", "Joint-token distance profile, or compare two prediction dumps");
  analyze->add_option("checkpoint", ckpt_in);
  analyze->add_option("--data", data_dir);
  analyze->add_option("--compare", compare, "Two prediction files A B")->expected(2);
  analyze->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (*synth) return cmd_synth(g, spec, holdout_per_class, out);
    if (*build_maps) return cmd_build_maps(g, data_dir, out);
    if (*pretrain) return cmd_pretrain_provider(g, data_dir, holdout_dir, out, features_out);
    if (*train) return cmd_train(g, data_dir, out, provider_path, log_path, baseline, maps_dir, holdout_dir);
    if (*eval) return cmd_eval(g, ckpt_in, data_dir, preds_path, report_path);
    if (*strip) return cmd_strip(ckpt_in, strip_out);
    if (*fuse) return cmd_fuse(rgb_path, pose_path, w_rgb, w_pose, preds_path, report_path);
    if (*ablate) return cmd_ablate(g, axis, data_dir, holdout_dir, holdout_per_class, provider_path, out);
    if (*analyze) return cmd_analyze(g, ckpt_in, data_dir, compare, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
