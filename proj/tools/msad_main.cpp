// msad: single entry point for parameter audits, training, evaluation,
// cross-validation, Grad-CAM rendering and synthetic data generation.
//
// Subcommands: params | train | eval | crossval | gradcam | synth
// Exit codes: 0 success, 1 contract/validation failure, 2 I/O or parse failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "msadnet/checkpoint.hpp"
#include "msadnet/gradcam.hpp"
#include "msadnet/param_audit.hpp"
#include "msadnet/synthetic.hpp"
#include "msadnet/train.hpp"

namespace fs = std::filesystem;
using msad::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--out", args.out_dir, "output directory (created if absent)");
  cmd->add_option("--override", args.overrides,
                  "config override as dotted.key=value (repeatable)");
  cmd->add_option("--seed", args.seed, "override the run seed")
      ->each([&args](const std::string&) { args.seed_given = true; });
  cmd->add_option("--threads", args.threads, "worker threads for the kernels");
}

json default_config() {
  json doc;
  doc["seed"] = 42;
  doc["model"] = msad::ModelConfig{};
  doc["train"] = msad::TrainConfig{};
  doc["synth"] = {{"classes", 4}, {"per_class", 60}, {"size", 112}, {"noise", 0.03}};
  return doc;
}

void deep_merge(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      deep_merge(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

json parse_override_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return json(raw);  // unquoted strings (e.g. schedule=adaptive)
  }
}

void apply_override(json& doc, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw msad::ConfigError(msad::str("override '", kv, "' is not of the form key=value"));
  std::string key = kv.substr(0, eq);
  const json value = parse_override_value(kv.substr(eq + 1));

  std::vector<std::string> segments;
  std::size_t pos = 0;
  while (pos <= key.size()) {
    const auto dot = key.find('.', pos);
    segments.push_back(key.substr(pos, dot == std::string::npos ? dot : dot - pos));
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }

  // bare keys resolve against the section that defines them
  static const char* kSections[] = {"model", "train", "synth"};
  if (!doc.contains(segments.front())) {
    for (const char* section : kSections) {
      if (doc[section].is_object() && doc[section].contains(segments.front())) {
        segments.insert(segments.begin(), section);
        break;
      }
    }
  }
  if (!doc.contains(segments.front()))
    throw msad::ConfigError(msad::str("override '", key, "' matches no config key"));

  json* node = &doc;
  for (std::size_t i = 0; i + 1 < segments.size(); ++i) {
    if (!node->contains(segments[i]) || !(*node)[segments[i]].is_object())
      throw msad::ConfigError(msad::str("override '", key, "' matches no config key"));
    node = &(*node)[segments[i]];
  }
  if (!node->contains(segments.back()))
    throw msad::ConfigError(msad::str("override '", key, "' matches no config key"));
  (*node)[segments.back()] = value;
}

struct RunContext {
  json doc;
  msad::ModelConfig model;
  msad::TrainConfig train;
  msad::SyntheticSpec synth;
  std::uint64_t seed = 42;
  fs::path out;
};

msad::SyntheticSpec synth_from(const json& j, std::uint64_t seed) {
  msad::SyntheticSpec s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "classes") s.num_classes = it.value().get<std::size_t>();
      else if (k == "per_class") s.images_per_class = it.value().get<std::size_t>();
      else if (k == "size") s.image_size = it.value().get<std::size_t>();
      else if (k == "noise") s.noise = it.value().get<double>();
      else if (k == "background") s.background = it.value().get<double>();
      else throw msad::ConfigError(msad::str("synth config: unknown key '", k, "'"));
    } catch (const json::exception& e) {
      throw msad::ConfigError(msad::str("synth config: bad value for '", k, "': ", e.what()));
    }
  }
  s.seed = seed;
  return s;
}

RunContext make_context(const CommonArgs& args) {
  json doc = default_config();
  if (!args.config_path.empty()) {
    std::ifstream is(args.config_path);
    if (!is)
      throw msad::IoError(msad::str("cannot open config '", args.config_path, "'"));
    json file;
    try {
      is >> file;
    } catch (const json::exception& e) {
      throw msad::ParseError(
          msad::str("config '", args.config_path, "' is not valid JSON: ", e.what()));
    }
    deep_merge(doc, file);
  }
  for (const auto& kv : args.overrides) apply_override(doc, kv);
  if (args.seed_given) doc["seed"] = args.seed;

  static const char* kKnown[] = {"seed", "model", "train", "synth",
                                 "command", "data", "out", "threads"};
  for (auto it = doc.begin(); it != doc.end(); ++it)
    if (std::find_if(std::begin(kKnown), std::end(kKnown), [&](const char* k) {
          return it.key() == k;
        }) == std::end(kKnown))
      throw msad::ConfigError(msad::str("config: unknown top-level key '", it.key(), "'"));

  RunContext ctx;
  ctx.doc = doc;
  ctx.seed = doc.at("seed").get<std::uint64_t>();
  // one seed drives every stream
  ctx.doc["model"]["seed"] = ctx.seed;
  ctx.doc["train"]["seed"] = ctx.seed;
  ctx.model = ctx.doc.at("model").get<msad::ModelConfig>();
  msad::validate(ctx.model);
  ctx.train = ctx.doc.at("train").get<msad::TrainConfig>();
  msad::validate(ctx.train);
  ctx.synth = synth_from(ctx.doc.at("synth"), ctx.seed);
  ctx.out = fs::path(args.out_dir);
  return ctx;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw msad::IoError(msad::str("cannot open '", path.string(), "' for writing"));
  os << content;
  if (!os) throw msad::IoError(msad::str("write to '", path.string(), "' failed"));
}

void write_snapshot(const RunContext& ctx, const std::string& command,
                    const json& extra = json::object()) {
  json snap = ctx.doc;
  snap["command"] = command;
  for (auto it = extra.begin(); it != extra.end(); ++it) snap[it.key()] = it.value();
  write_text(ctx.out / "resolved_config.json", snap.dump(2) + "\n");
}

msad::DatasetManifest load_manifest(const std::string& root) {
  const fs::path mpath = fs::path(root) / "manifest.json";
  if (fs::exists(mpath)) return msad::read_manifest(mpath.string());
  return msad::scan_dataset(root);
}

template <typename T>
msad::SplitPlan plan_for(const msad::DatasetManifest& manifest,
                         const msad::LoadedDataset<T>& data,
                         const msad::TrainConfig& train) {
  if (manifest.source == msad::DatasetSource::PreSplitTree) {
    msad::SplitPlan plan;
    plan.train = data.partition_indices(msad::Partition::Train);
    plan.valid = data.partition_indices(msad::Partition::Valid);
    plan.test = data.partition_indices(msad::Partition::Test);
    plan.weights = {0, 0, 0};
    return plan;
  }
  return msad::stratified_split(data.labels, train.split_weights, train.seed);
}

// ---------------------------------------------------------------------------
// Subcommand bodies (templated on the numeric precision)
// ---------------------------------------------------------------------------

template <typename T>
int run_params(RunContext& ctx) {
  auto model = msad::build_msadnet<T>(ctx.model);
  auto report = msad::audit(model);
  write_text(ctx.out / "params.txt", msad::param_report_text(report));
  write_text(ctx.out / "params.json", msad::param_report_json(report).dump(2) + "\n");
  std::cout << msad::param_report_text(report);
  msad::require_consistent(report);
  return 0;
}

template <typename T>
int run_train(RunContext& ctx, const std::string& data_root) {
  const auto manifest = load_manifest(data_root);
  auto data = msad::load_dataset<T>(manifest, ctx.model.input_size,
                                    ctx.model.input_channels);
  if (data.num_classes() != ctx.model.num_classes)
    throw msad::ConfigError(msad::str("dataset has ", data.num_classes(),
                                      " classes but model.num_classes is ",
                                      ctx.model.num_classes));
  const auto plan = plan_for(manifest, data, ctx.train);
  std::cout << "training on " << plan.train.size() << " samples, validating on "
            << plan.valid.size() << ", holding out " << plan.test.size() << "\n";

  auto model = msad::build_msadnet<T>(ctx.model);
  const std::string ckpt = (ctx.out / "checkpoint.msad").string();
  json run_doc = ctx.doc;
  run_doc["command"] = "train";
  run_doc["data"] = data_root;

  auto result = msad::fit<T>(
      model, data, plan, ctx.train,
      [&](msad::ModelGraph<T>& m, const msad::EpochRecord& rec) {
        msad::save_checkpoint(ckpt, m, run_doc);
        std::cout << "epoch " << rec.epoch << ": train_loss=" << rec.train_loss
                  << " train_acc=" << rec.train_acc << " val_loss=" << rec.val_loss
                  << " val_acc=" << rec.val_acc << " lr=" << rec.lr << " ("
                  << rec.seconds << "s)\n";
      });

  msad::save_checkpoint(ckpt, model, run_doc);  // best weights when early stopping
  write_text(ctx.out / "history.csv", msad::history_csv(result.history));
  write_text(ctx.out / "history.json", msad::history_json(result.history).dump(2) + "\n");
  std::cout << "checkpoint: " << ckpt << "\n"
            << "mean secs/ep: " << result.mean_seconds_per_epoch() << "\n";
  return 0;
}

template <typename T>
int run_eval(RunContext& ctx, const std::string& checkpoint,
             const std::string& data_root, const std::string& split) {
  auto model = msad::load_checkpoint<T>(checkpoint);
  const json stored = msad::read_checkpoint_config(checkpoint);
  msad::TrainConfig train = ctx.train;
  if (stored.contains("run") && stored["run"].contains("train"))
    train = stored["run"]["train"].get<msad::TrainConfig>();

  const auto manifest = load_manifest(data_root);
  auto data = msad::load_dataset<T>(manifest, model.config.input_size,
                                    model.config.input_channels);
  std::vector<std::size_t> indices;
  if (split == "all") {
    indices.resize(data.count());
    std::iota(indices.begin(), indices.end(), 0);
  } else {
    const auto plan = plan_for(manifest, data, train);
    indices = split == "train" ? plan.train : split == "valid" ? plan.valid : plan.test;
  }
  if (indices.empty()) throw msad::ValueError(msad::str("split '", split, "' is empty"));

  auto report = msad::evaluate(model, data, indices, train.batch_size);
  write_text(ctx.out / "metrics.txt", msad::metrics_text(report));
  write_text(ctx.out / "metrics.json", msad::metrics_json(report).dump(2) + "\n");
  write_text(ctx.out / "confusion.csv", msad::confusion_csv(report));
  std::cout << msad::metrics_text(report);
  return 0;
}

template <typename T>
int run_crossval(RunContext& ctx, const std::string& data_root, int k) {
  const auto manifest = load_manifest(data_root);
  auto data = msad::load_dataset<T>(manifest, ctx.model.input_size,
                                    ctx.model.input_channels);
  auto result = msad::crossval<T>(ctx.model, data, k, ctx.train,
                                  [&](int fold, const msad::MetricsReport& m) {
                                    std::cout << "fold" << fold + 1
                                              << ": accuracy=" << m.accuracy << "\n";
                                  });
  write_text(ctx.out / "crossval.txt", msad::crossval_text(result));
  write_text(ctx.out / "crossval.json", msad::crossval_json(result).dump(2) + "\n");
  std::cout << msad::crossval_text(result);
  return 0;
}

template <typename T>
int run_gradcam(RunContext& ctx, const std::string& checkpoint,
                const std::string& image_path, int target_class,
                std::string tap, double alpha) {
  auto model = msad::load_checkpoint<T>(checkpoint);
  if (tap.empty()) tap = "block5_out";

  std::vector<fs::path> inputs;
  if (fs::is_directory(image_path)) {
    for (const auto& e : fs::directory_iterator(image_path))
      if (e.is_regular_file() && msad::detail::is_pnm_file(e.path()))
        inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty())
      throw msad::IoError(msad::str("no PNM images under '", image_path, "'"));
  } else {
    inputs.emplace_back(image_path);
  }

  for (const auto& p : inputs) {
    msad::ImageBuffer img = msad::load_pnm(p.string());
    if (img.height != model.config.input_size || img.width != model.config.input_size)
      img = msad::resize_bilinear(img, model.config.input_size, model.config.input_size);
    auto tensor = msad::to_tensor<T>(img, model.config.input_channels);

    int cls = target_class;
    if (cls < 0) {
      msad::NoGradGuard guard;
      auto result = model.forward(tensor, msad::BnMode::Infer);
      cls = msad::argmax_rows(result.probs)[0];
    }
    auto heat = msad::gradcam(model, tensor, cls, tap);
    const std::string stem = p.stem().string();
    msad::save_pnm((ctx.out / (stem + "_map.pgm")).string(), msad::heatmap_to_image(heat));
    msad::save_pnm((ctx.out / (stem + "_overlay.ppm")).string(),
                   msad::overlay(img, heat, alpha));
    std::cout << stem << ": class " << cls << " (tap " << heat.tap << ") -> "
              << (ctx.out / (stem + "_map.pgm")).string() << "\n";
  }
  return 0;
}

int run_synth(RunContext& ctx) {
  auto manifest = msad::generate_synthetic(ctx.synth, ctx.out.string());
  std::cout << "generated " << manifest.samples.size() << " images over "
            << manifest.class_names.size() << " classes under " << ctx.out.string()
            << "\n";
  return 0;
}

template <typename Fn>
int dispatch_precision(const std::string& precision, Fn&& fn) {
  if (precision == "float64") return fn(double{});
  return fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MSAD-Net micro-framework: audit, train, evaluate and explain"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string data_root, checkpoint, image_path, split = "test";
  int kfolds = 5;
  int target_class = -1;
  std::string tap;
  double alpha = 0.4;

  CLI::App* params = app.add_subcommand("params", "closed-form parameter audit");
  add_common(params, args);

  CLI::App* train = app.add_subcommand("train", "train on a dataset directory");
  add_common(train, args);
  train->add_option("--data", data_root, "dataset root")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, args);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data_root, "dataset root")->required();
  eval->add_option("--split", split, "train|valid|test|all")
      ->check(CLI::IsMember({"train", "valid", "test", "all"}));

  CLI::App* crossval = app.add_subcommand("crossval", "stratified k-fold cross-validation");
  add_common(crossval, args);
  crossval->add_option("--data", data_root, "dataset root")->required();
  crossval->add_option("--k", kfolds, "fold count");

  CLI::App* gradcam = app.add_subcommand("gradcam", "write Grad-CAM heatmaps");
  add_common(gradcam, args);
  gradcam->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  gradcam->add_option("--image", image_path, "PNM image or directory of images")->required();
  gradcam->add_option("--class", target_class, "target class (default: argmax)");
  gradcam->add_option("--tap", tap, "activation tap name");
  gradcam->add_option("--alpha", alpha, "overlay blend factor");

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    msad::set_num_threads(args.threads);
    RunContext ctx = make_context(args);
    fs::create_directories(ctx.out);

    if (app.got_subcommand(params)) {
      write_snapshot(ctx, "params");
      return dispatch_precision(ctx.model.precision,
                                [&](auto tag) { return run_params<decltype(tag)>(ctx); });
    }
    if (app.got_subcommand(train)) {
      write_snapshot(ctx, "train", {{"data", data_root}});
      return dispatch_precision(ctx.model.precision, [&](auto tag) {
        return run_train<decltype(tag)>(ctx, data_root);
      });
    }
    if (app.got_subcommand(eval)) {
      write_snapshot(ctx, "eval", {{"data", data_root}, {"checkpoint", checkpoint},
                                   {"split", split}});
      const json stored = msad::read_checkpoint_config(checkpoint);
      const std::string precision =
          stored.at("model").at("precision").get<std::string>();
      return dispatch_precision(precision, [&](auto tag) {
        return run_eval<decltype(tag)>(ctx, checkpoint, data_root, split);
      });
    }
    if (app.got_subcommand(crossval)) {
      write_snapshot(ctx, "crossval", {{"data", data_root}, {"k", kfolds}});
      return dispatch_precision(ctx.model.precision, [&](auto tag) {
        return run_crossval<decltype(tag)>(ctx, data_root, kfolds);
      });
    }
    if (app.got_subcommand(gradcam)) {
      write_snapshot(ctx, "gradcam",
                     {{"checkpoint", checkpoint}, {"image", image_path}});
      const json stored = msad::read_checkpoint_config(checkpoint);
      const std::string precision =
          stored.at("model").at("precision").get<std::string>();
      return dispatch_precision(precision, [&](auto tag) {
        return run_gradcam<decltype(tag)>(ctx, checkpoint, image_path, target_class,
                                          tap, alpha);
      });
    }
    if (app.got_subcommand(synth)) {
      write_snapshot(ctx, "synth");
      return run_synth(ctx);
    }
    return 1;
  } catch (const msad::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const msad::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const msad::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
