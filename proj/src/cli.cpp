#include "carid/cli.hpp"

#include <csignal>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <pthread.h>
#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "CLI11.hpp"
#include "carid/checkpoint.hpp"
#include "carid/config.hpp"
#include "carid/dataset.hpp"
#include "carid/hpo.hpp"
#include "carid/rng.hpp"
#include "carid/serve.hpp"
#include "carid/train_config.hpp"
#include "carid/trainer.hpp"

namespace carid::cli {

namespace {

namespace fs = std::filesystem;

struct Globals {
  std::string config_root = "configs";
  std::string config_file;
  std::string run_dir;
  std::optional<std::int64_t> seed;
  std::string model;
  std::vector<std::string> sets;
};

struct Context {
  ConfigNode config;
  fs::path run_dir;
  std::ostream& out;
  std::ostream& err;
};

const ConfigNode& at(const ConfigNode& node, std::string_view path) {
  const auto* v = node.find_path(path);
  if (!v) throw Error(Errc::invalid_config, std::string(path) + " is missing");
  return *v;
}

// Composes (or reloads) the configuration, applies the global flags and
// writes the result to <run-dir>/config.yaml before any work starts.
Context prepare(const Globals& g, ValidationMode mode, std::ostream& out, std::ostream& err) {
  std::vector<std::string> overrides;
  ConfigNode config;
  if (!g.config_file.empty()) {
    if (!g.model.empty()) overrides.push_back("model.name=" + g.model);
    if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
    overrides.insert(overrides.end(), g.sets.begin(), g.sets.end());
    config = compose_resolved(load_yaml_file(g.config_file), overrides);
  } else {
    if (!g.model.empty()) overrides.push_back("model=" + g.model);
    if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
    overrides.insert(overrides.end(), g.sets.begin(), g.sets.end());
    config = compose_root(g.config_root, overrides);
  }
  if (mode == ValidationMode::tune) {
    const auto violations = validate(config, mode);
    if (!violations.empty()) throw Error(Errc::invalid_config, format_violations(violations));
  }
  fs::path run_dir = g.run_dir.empty() ? fs::path("runs") / at(config, "name").as_string() : fs::path(g.run_dir);
  fs::create_directories(run_dir);
  save_yaml_file(config, run_dir / "config.yaml");
  return Context{std::move(config), std::move(run_dir), out, err};
}

fs::path data_root(const ConfigNode& config) { return at(config, "data.root").as_string(); }

// Loads the annotation file (or an explicit manifest), drops records whose
// images could not be read, and assigns splits where the file has none.
DatasetManifest load_dataset(const Context& ctx, const std::string& manifest_path) {
  const auto& cfg = ctx.config;
  const fs::path root = data_root(cfg);
  const fs::path annotations =
      manifest_path.empty() ? root / at(cfg, "data.annotations").as_string() : fs::path(manifest_path);
  auto loaded = load_manifest(root, annotations, at(cfg, "data.source_tag").as_string());
  auto manifest = std::move(loaded.manifest);
  if (!loaded.report.ok()) {
    std::set<std::string> bad;
    for (const auto& issue : loaded.report.issues) {
      ctx.err << "warning: " << issue.path << ": " << issue.message << '\n';
      bad.insert(issue.path);
    }
    std::erase_if(manifest.records, [&](const ImageRecord& r) { return bad.count(r.image_path.string()) > 0; });
  }
  const bool unassigned = std::any_of(manifest.records.begin(), manifest.records.end(),
                                      [](const ImageRecord& r) { return r.split == Split::unassigned; });
  if (unassigned) {
    manifest = stratified_split(manifest, split_ratios_from(cfg), static_cast<std::uint64_t>(at(cfg, "seed").as_int()));
  }
  return manifest;
}

ModelOptions model_options(const ConfigNode& cfg) {
  ModelOptions o;
  o.weights_dir = at(cfg, "model.weights_dir").as_string();
  o.seed = static_cast<std::uint64_t>(at(cfg, "seed").as_int());
  return o;
}

fs::path metrics_path(const Context& ctx) { return ctx.run_dir / at(ctx.config, "logger.metrics_file").as_string(); }

void print_epoch(std::ostream& out, const EpochMetrics& m) {
  out << "epoch " << m.epoch << "  train_loss " << std::fixed << std::setprecision(4) << m.train_loss
      << "  train_acc " << m.train_accuracy << "  val_loss " << m.val_loss << "  val_acc " << m.val_accuracy
      << "  lr " << std::defaultfloat << m.lr << '\n';
}

// ---------------------------------------------------------------------------

int cmd_prepare_data(const Context& ctx, const std::string& manifest_path) {
  const auto& cfg = ctx.config;
  const fs::path root = data_root(cfg);
  const fs::path annotations =
      manifest_path.empty() ? root / at(cfg, "data.annotations").as_string() : fs::path(manifest_path);
  auto loaded = load_manifest(root, annotations, at(cfg, "data.source_tag").as_string());
  {
    std::ofstream report(ctx.run_dir / "load_report.jsonl");
    loaded.report.write_jsonl(report);
  }
  auto manifest = std::move(loaded.manifest);
  std::set<std::string> bad;
  for (const auto& issue : loaded.report.issues) bad.insert(issue.path);
  std::erase_if(manifest.records, [&](const ImageRecord& r) { return bad.count(r.image_path.string()) > 0; });
  const std::size_t loaded_count = manifest.records.size();

  std::size_t dropped = 0;
  if (at(cfg, "data.dedup.enabled").as_bool()) {
    auto dedup = dedup_by_perceptual_hash(manifest.records, static_cast<int>(at(cfg, "data.dedup.hash_size").as_int()),
                                          static_cast<int>(at(cfg, "data.dedup.threshold").as_int()),
                                          static_cast<unsigned>(at(cfg, "data.num_workers").as_int()));
    std::ofstream log(ctx.run_dir / "dedup_report.jsonl");
    for (const auto& d : dedup.dropped) {
      log << nlohmann::json{{"dropped", d.record.image_path.string()},
                            {"duplicate_of", d.duplicate_of.image_path.string()},
                            {"distance", d.distance}}
                 .dump()
          << '\n';
    }
    for (const auto& f : dedup.failures) {
      log << nlohmann::json{{"error", to_string(f.code)}, {"path", f.path}, {"message", f.message}}.dump() << '\n';
    }
    dropped = dedup.dropped.size() + dedup.failures.size();
    manifest.records = std::move(dedup.kept);
  }
  manifest = stratified_split(manifest, split_ratios_from(cfg), static_cast<std::uint64_t>(at(cfg, "seed").as_int()));
  const auto out_file = ctx.run_dir / "manifest.csv";
  write_manifest_csv(manifest, root, out_file);
  ctx.out << "records " << loaded_count << "  issues " << loaded.report.issues.size() << "  duplicates " << dropped
          << "  train " << manifest.count(Split::train) << "  val " << manifest.count(Split::val) << "  test "
          << manifest.count(Split::test) << '\n'
          << "manifest written to " << out_file.string() << '\n';
  return kOk;
}

int cmd_train(const Context& ctx, const std::string& manifest_path) {
  const auto& cfg = ctx.config;
  const auto manifest = load_dataset(ctx, manifest_path);
  const auto tc = train_config_from(cfg);
  const auto policy = policy_from(cfg);
  auto model = build_model(backbone_spec_from(cfg), manifest.num_classes, tc.dropout_rate, model_options(cfg));

  TrainOptions options;
  options.metrics_file = metrics_path(ctx);
  fs::remove(options.metrics_file);
  options.cache_images = at(cfg, "data.cache_images").as_bool();
  options.on_epoch = [&](const EpochMetrics& m) { print_epoch(ctx.out, m); };
  const auto result = train(model, manifest, policy, tc, options);

  nlohmann::json summary = {{"best_epoch", result.best_epoch}, {"best", to_json(result.best)}};
  auto history = nlohmann::json::array();
  for (const auto& m : result.history) history.push_back(to_json(m));
  summary["history"] = history;
  if (manifest.count(Split::test) > 0) {
    ImageSource images(options.cache_images);
    const auto test = evaluate(model, manifest, Split::test, policy, tc.batch_size, &images);
    summary["test"] = {{"accuracy", test.accuracy}, {"loss", test.loss}};
    ctx.out << "test_acc " << test.accuracy << "  test_loss " << test.loss << '\n';
  }

  auto meta = make_meta(model, manifest.class_names, policy);
  meta.config_yaml = to_yaml(cfg);
  meta.metrics = to_json(result.best);
  meta.epoch = result.best_epoch;
  const auto ckpt = ctx.run_dir / "checkpoint.ckpt";
  save_checkpoint(model, meta, ckpt);
  std::ofstream(ctx.run_dir / "summary.json") << summary.dump(2) << '\n';
  ctx.out << "best epoch " << result.best_epoch << " (val_acc " << result.best.val_accuracy << "), checkpoint "
          << ckpt.string() << '\n';
  return kOk;
}

int cmd_tune(const Context& ctx, const std::string& manifest_path, std::optional<int> n_trials_flag,
             std::optional<int> epochs_flag) {
  const auto& cfg = ctx.config;
  const auto manifest = load_dataset(ctx, manifest_path);
  const int n_trials = n_trials_flag.value_or(static_cast<int>(at(cfg, "hpo.n_trials").as_int()));
  const int epochs = epochs_flag.value_or(static_cast<int>(at(cfg, "hpo.epochs").as_int()));
  if (n_trials < 1) throw Error(Errc::invalid_argument, "--n-trials must be >= 1");
  if (epochs < 1) throw Error(Errc::invalid_argument, "--epochs must be >= 1");

  TpeOptions tpe;
  tpe.gamma = at(cfg, "hpo.gamma").as_double();
  tpe.n_startup = static_cast<int>(at(cfg, "hpo.n_startup").as_int());
  tpe.n_candidates = static_cast<int>(at(cfg, "hpo.n_candidates").as_int());
  const auto space = define_space();
  const StudyStore store(ctx.run_dir / at(cfg, "hpo.study_file").as_string());

  auto apply_params = [&](const ParamMap& params) {
    ConfigNode trial_cfg = cfg;
    for (const auto& [name, value] : params) {
      std::visit([&](const auto& v) { trial_cfg.set_path(name, ConfigNode(v)); }, value);
    }
    trial_cfg.set_path("trainer.epochs", ConfigNode(static_cast<std::int64_t>(epochs)));
    const auto violations = validate(trial_cfg);
    if (!violations.empty()) throw Error(Errc::invalid_config, format_violations(violations));
    return trial_cfg;
  };

  const Objective objective = [&](const Trial& trial) {
    const auto trial_cfg = apply_params(trial.params);
    const auto tc = train_config_from(trial_cfg);
    auto model = build_model(backbone_spec_from(trial_cfg), manifest.num_classes, tc.dropout_rate,
                             model_options(trial_cfg));
    TrainOptions options;
    options.metrics_file = ctx.run_dir / "trials" / std::to_string(trial.id) / "metrics.jsonl";
    fs::remove(options.metrics_file);
    options.cache_images = at(trial_cfg, "data.cache_images").as_bool();
    const auto result = train(model, manifest, policy_from(trial_cfg), tc, options);
    ctx.out << "trial " << trial.id << "  val_acc " << result.best.val_accuracy << '\n';
    return result.best.val_accuracy;
  };

  const auto study = run_study(objective, space, n_trials, static_cast<std::uint64_t>(at(cfg, "seed").as_int()), tpe,
                               &store);
  const auto& best = best_trial(study);
  auto best_cfg = apply_params(best.params);
  best_cfg.set_path("trainer.epochs", at(cfg, "trainer.epochs"));
  save_yaml_file(best_cfg, ctx.run_dir / "best_config.yaml");
  ctx.out << "best trial " << best.id << "  val_acc " << *best.objective << '\n';
  for (const auto& [name, value] : best.params) ctx.out << "  " << name << " = " << render(value) << '\n';
  ctx.out << "study written to " << store.path().string() << '\n';
  return kOk;
}

int cmd_eval(const Context& ctx, const std::string& checkpoint, const std::string& manifest_path,
             const std::string& split_name, bool json) {
  const auto split = parse_split(split_name);
  if (!split || *split == Split::unassigned) throw Error(Errc::invalid_argument, "unknown split " + split_name);
  auto ckp = load_checkpoint(checkpoint);
  const auto manifest = load_dataset(ctx, manifest_path);
  if (manifest.num_classes != ckp.meta.num_classes) {
    throw Error(Errc::invalid_argument, "dataset has " + std::to_string(manifest.num_classes) +
                                            " classes, checkpoint has " + std::to_string(ckp.meta.num_classes));
  }
  const auto batch = static_cast<int>(at(ctx.config, "data.batch_size").as_int());
  const auto result = evaluate(ckp.model, manifest, *split, ckp.meta.eval_policy(), batch);
  nlohmann::json report = {{"split", split_name},
                           {"model_version", ckp.model_version},
                           {"accuracy", result.accuracy},
                           {"loss", result.loss},
                           {"count", result.labels.size()},
                           {"per_class_accuracy", result.per_class_accuracy}};
  std::ofstream(ctx.run_dir / ("eval_" + split_name + ".json")) << report.dump(2) << '\n';
  if (json) {
    ctx.out << report.dump() << '\n';
  } else {
    ctx.out << split_name << "  accuracy " << result.accuracy << "  loss " << result.loss << "  ("
            << result.labels.size() << " images)\n";
  }
  return kOk;
}

int cmd_serve(const Context& ctx, const std::string& checkpoint, std::optional<int> port,
              std::optional<double> max_upload_mb, std::optional<std::string> host) {
  const auto& cfg = ctx.config;
  auto model = ServingModel::load(checkpoint);
  ServeOptions options;
  options.host = host.value_or(at(cfg, "serve.host").as_string());
  options.port = port.value_or(static_cast<int>(at(cfg, "serve.port").as_int()));
  const double mb = max_upload_mb.value_or(at(cfg, "serve.max_upload_mb").as_double());
  if (!(mb > 0)) throw Error(Errc::invalid_argument, "--max-upload-mb must be > 0");
  options.max_upload_bytes = static_cast<std::size_t>(mb * 1024.0 * 1024.0);
  options.default_top_k = std::min(static_cast<int>(at(cfg, "serve.top_k").as_int()), model->num_classes());
  options.threads = static_cast<int>(at(cfg, "serve.threads").as_int());
  options.cors_origin = at(cfg, "serve.cors_origin").as_string();
  if (at(cfg, "serve.audit_log").as_bool()) options.audit_dir = ctx.run_dir / at(cfg, "serve.audit_dir").as_string();
  std::ofstream access_file;
  const auto& access = at(cfg, "serve.access_log").as_string();
  if (access.empty()) {
    options.access_log = &ctx.err;
  } else {
    access_file.open(ctx.run_dir / access, std::ios::app);
    options.access_log = &access_file;
  }

  // Block the stop signals here so every server thread inherits the mask and
  // a dedicated thread can wait for them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Server server(model, options);
  const int bound = server.bind();
  if (bound < 0) throw Error(Errc::io_error, "cannot bind " + options.host + ":" + std::to_string(options.port));
  ctx.out << "serving " << model->model_version() << " on http://" << options.host << ":" << bound << '\n'
          << std::flush;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  server.listen();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return kOk;
}

int cmd_export(const Context& ctx, const std::string& checkpoint, const std::string& out_dir) {
  auto model = ServingModel::load(checkpoint);
  const fs::path dir = out_dir.empty() ? ctx.run_dir / "export" : fs::path(out_dir);
  fs::create_directories(dir);
  fs::copy_file(checkpoint, dir / "model.ckpt", fs::copy_options::overwrite_existing);
  auto labels = nlohmann::json::array();
  for (std::size_t i = 0; i < model->class_names().size(); ++i) {
    const auto& name = model->class_names()[i];
    const auto label = parse_class_name(name);
    labels.push_back({{"class_id", i}, {"class_name", name}, {"make", label.make}, {"model_name", label.model_name}});
  }
  std::ofstream(dir / "labels.json") << nlohmann::json{{"schema_version", kApiSchemaVersion}, {"labels", labels}}.dump(2)
                                     << '\n';
  const auto& meta = model->meta();
  nlohmann::json card = {{"schema_version", kApiSchemaVersion},
                         {"model_version", model->model_version()},
                         {"backbone", meta.spec.name},
                         {"num_classes", meta.num_classes},
                         {"input_size", {meta.output_height, meta.output_width}},
                         {"normalization", {{"mean", meta.normalization.mean}, {"std", meta.normalization.std}}},
                         {"epoch", meta.epoch},
                         {"metrics", meta.metrics}};
  std::ofstream(dir / "model_card.json") << card.dump(2) << '\n';
  std::ofstream(dir / "config.yaml") << meta.config_yaml;
  ctx.out << "exported " << model->model_version() << " to " << dir.string() << '\n';
  return kOk;
}

int cmd_dump_augmented(const Context& ctx, const std::string& manifest_path, int count, const std::string& out_dir,
                       const std::string& split_name, int epoch) {
  const auto split = parse_split(split_name);
  if (!split || *split == Split::unassigned) throw Error(Errc::invalid_argument, "unknown split " + split_name);
  if (count < 1) throw Error(Errc::invalid_argument, "--count must be >= 1");
  const auto manifest = load_dataset(ctx, manifest_path);
  const auto policy = policy_from(ctx.config);
  const auto seed = static_cast<std::uint64_t>(at(ctx.config, "seed").as_int());
  const auto records = manifest.records_in(*split);
  if (records.empty()) throw Error(Errc::empty_split, split_name + " split is empty");
  const fs::path dir = out_dir.empty() ? ctx.run_dir / "augmented" : fs::path(out_dir);
  fs::create_directories(dir);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(count), records.size());
  for (std::size_t i = 0; i < n; ++i) {
    // Same per-sample stream the trainer uses for this epoch.
    const auto key = derive_key({seed, hash_label("sample"), static_cast<std::uint64_t>(epoch), i});
    ApplyTrace trace;
    const auto tensor = apply(policy, load_cropped(records[i]), key, &trace);
    cv::Mat rgb = denormalize(tensor, policy.normalization);
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    bgr.convertTo(bgr, CV_8U, 255.0);
    std::string fired;
    for (std::size_t t = 0; t < trace.fired.size(); ++t) {
      if (trace.fired[t]) fired += std::string(fired.empty() ? "" : "+") + std::string(to_string(policy.transforms[t].kind));
    }
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    cv::imwrite((dir / name).string(), bgr);
    ctx.out << name << "  class " << records[i].class_id << "  " << (fired.empty() ? "-" : fired) << '\n';
  }
  ctx.out << "wrote " << n << " images to " << dir.string() << '\n';
  return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Car make/model classifier: data preparation, training, tuning, evaluation and serving.", "carid"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  Globals g;
  std::int64_t seed = 0;
  app.add_option("--config-root", g.config_root, "Directory holding defaults.yaml and the group directories")
      ->capture_default_str();
  app.add_option("--config", g.config_file, "Resolved config.yaml to re-run instead of composing from --config-root");
  app.add_option("--run-dir", g.run_dir, "Output directory (default: runs/<name>)");
  auto* seed_opt = app.add_option("--seed", seed, "Global seed (overrides the config)");
  app.add_option("--model", g.model, "Backbone to use, e.g. efficientnetv2_b2");
  app.add_option("--set", g.sets, "Dotted config override path=value (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  std::string manifest, checkpoint, out_dir, split = "test";
  bool json = false;
  std::optional<int> n_trials, epochs, port;
  std::optional<double> max_upload_mb;
  std::optional<std::string> host;
  int count = 8;
  int aug_epoch = 1;

  auto* prepare_cmd = app.add_subcommand("prepare-data", "Load annotations, drop near-duplicates, assign splits");
  prepare_cmd->add_option("--annotations", manifest, "Annotation CSV (default: data.root/data.annotations)");

  auto* train_cmd = app.add_subcommand("train", "Fine-tune a backbone and write a checkpoint");
  train_cmd->add_option("--manifest", manifest, "Annotation CSV with splits (default: data.root/data.annotations)");

  auto* tune_cmd = app.add_subcommand("tune", "Hyperparameter search with a Parzen-estimator sampler");
  tune_cmd->add_option("--manifest", manifest, "Annotation CSV with splits (default: data.root/data.annotations)");
  tune_cmd->add_option("--n-trials", n_trials, "Number of trials (default: hpo.n_trials)");
  tune_cmd->add_option("--epochs", epochs, "Epochs per trial (default: hpo.epochs)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--manifest", manifest, "Annotation CSV with splits (default: data.root/data.annotations)");
  eval_cmd->add_option("--split", split, "train, val or test")->capture_default_str();
  eval_cmd->add_flag("--json", json, "Print the report as one JSON object");

  auto* serve_cmd = app.add_subcommand("serve", "Serve predictions over HTTP");
  serve_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  serve_cmd->add_option("--host", host, "Bind address (default: serve.host)");
  serve_cmd->add_option("--port", port, "Port, 0 for any free port (default: serve.port)");
  serve_cmd->add_option("--max-upload-mb", max_upload_mb, "Upload size cap in MB (default: serve.max_upload_mb)");

  auto* export_cmd = app.add_subcommand("export", "Write a serving bundle: checkpoint, labels and model card");
  export_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  export_cmd->add_option("--out", out_dir, "Output directory (default: <run-dir>/export)");

  auto* dump_cmd = app.add_subcommand("dump-augmented", "Write augmented training images for inspection");
  dump_cmd->add_option("--manifest", manifest, "Annotation CSV with splits (default: data.root/data.annotations)");
  dump_cmd->add_option("--count", count, "Number of images")->capture_default_str();
  dump_cmd->add_option("--split", split, "Split to sample from")->default_str("train");
  dump_cmd->add_option("--epoch", aug_epoch, "Epoch whose augmentation streams to reproduce")->capture_default_str();
  dump_cmd->add_option("--out", out_dir, "Output directory (default: <run-dir>/augmented)");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> args(argv.size() > 1 ? argv.begin() + 1 : argv.end(), argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }
  if (*seed_opt) g.seed = seed;
  if (dump_cmd->parsed() && !dump_cmd->get_option("--split")->count()) split = "train";

  try {
    const auto mode = tune_cmd->parsed() ? ValidationMode::tune : ValidationMode::train;
    const auto ctx = prepare(g, mode, out, err);
    if (prepare_cmd->parsed()) return cmd_prepare_data(ctx, manifest);
    if (train_cmd->parsed()) return cmd_train(ctx, manifest);
    if (tune_cmd->parsed()) return cmd_tune(ctx, manifest, n_trials, epochs);
    if (eval_cmd->parsed()) return cmd_eval(ctx, checkpoint, manifest, split, json);
    if (serve_cmd->parsed()) return cmd_serve(ctx, checkpoint, port, max_upload_mb, host);
    if (export_cmd->parsed()) return cmd_export(ctx, checkpoint, out_dir);
    if (dump_cmd->parsed()) return cmd_dump_augmented(ctx, manifest, count, out_dir, split, aug_epoch);
  } catch (const NanLossError& e) {
    err << "error: " << e.what() << " (" << e.history().size() << " epochs completed)\n";
    return kOperationalError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kOperationalError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kOperationalError;
  }
  return kUsageError;
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  return dispatch(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace carid::cli
