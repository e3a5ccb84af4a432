#include "changedet/cli.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "changedet/config.hpp"
#include "changedet/errors.hpp"
#include "changedet/serialize.hpp"
#include "changedet/training.hpp"

namespace changedet {

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string device = "cpu";
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required) {
  cmd->add_option("--config", args.config_path, "JSON configuration file");
  auto* out = cmd->add_option("--out", args.out_dir, "output directory for this run");
  if (out_required) out->required();
  cmd->add_option("--set", args.overrides, "config override, key.path=value");
  cmd->add_option("--seed", args.seed, "seed overriding train.seed and pseudo.seed")
      ->each([&args](const std::string&) { args.seed_given = true; });
  cmd->add_option("--device", args.device, "compute device (only cpu is available)");
}

AppConfig load_app_config(const CommonArgs& args) {
  if (args.device != "cpu") {
    throw ConfigError("unsupported device '" + args.device + "'; only cpu is available");
  }
  std::optional<fs::path> file;
  if (!args.config_path.empty()) file = args.config_path;
  std::optional<std::uint64_t> seed;
  if (args.seed_given) seed = args.seed;
  return AppConfig::load(file, args.overrides, seed);
}

std::vector<SourceDataset> load_sources(const AppConfig& config) {
  const auto specs = config.sources();
  if (specs.empty()) {
    throw ConfigError("no pseudo-change sources configured (pseudo.sources is empty)");
  }
  const int tile_size = config.manifest().tile_size;
  std::vector<SourceDataset> sources;
  for (const auto& spec : specs) {
    sources.push_back(
        load_seg_source(spec.dir, spec.name, spec.keep_class, spec.num_classes, tile_size));
  }
  return sources;
}

ChangeDetNet build_model(const AppConfig& config, std::uint64_t seed) {
  Rng init_rng = Rng(seed).fork(1);
  return ChangeDetNet(config.model(), init_rng);
}

void load_model_checkpoint(const fs::path& path, const AppConfig& config, ChangeDetNet& model) {
  const CheckpointMeta meta = read_checkpoint_meta(path);
  if (meta.config_hash != config.arch_hash()) {
    throw ConfigError("checkpoint " + path.string() +
                      " was produced under a different architecture configuration");
  }
  load_checkpoint(path, model, nullptr);
}

int cmd_build_pseudo(const CommonArgs& args, int count_override) {
  AppConfig config = load_app_config(args);
  DatasetManifest manifest = config.manifest();
  if (count_override > 0) manifest.samples_per_epoch = count_override;
  const std::vector<SourceDataset> sources = load_sources(config);

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  config.write_effective(out_dir / "config.json");
  export_dataset(manifest, sources, out_dir);

  std::cout << "wrote " << manifest.samples_per_epoch << " pseudo-change pairs to "
            << out_dir.string() << "\n";
  std::cout << manifest.to_json() << "\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& args) {
  AppConfig config = load_app_config(args);
  const TrainConfig train_cfg = config.train(TrainPhase::pretrain);
  const DatasetManifest manifest = config.manifest();
  const std::vector<SourceDataset> sources = load_sources(config);

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  config.write_effective(out_dir / "config.json");

  ChangeDetNet model = build_model(config, train_cfg.seed);
  run_pretrain(model, train_cfg, manifest, sources, config.augment_config(), config.normalizer(),
               out_dir, config.arch_hash());
  std::cout << "pre-training finished after " << train_cfg.epochs << " epochs; checkpoints in "
            << out_dir.string() << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& dataset_dir,
                 const std::string& val_dataset_dir, const std::string& init_from) {
  AppConfig config = load_app_config(args);
  const TrainConfig train_cfg = config.train(TrainPhase::finetune);

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  config.write_effective(out_dir / "config.json");

  std::optional<ChangePairDataset> train;
  std::optional<ChangePairDataset> val;
  const double holdout = config.val_fraction();
  if (!val_dataset_dir.empty()) {
    train.emplace(dataset_dir);
    val.emplace(val_dataset_dir);
  } else if (holdout > 0.0) {
    const ChangePairDataset full(dataset_dir);
    const auto n = static_cast<std::size_t>(full.size());
    auto val_count = static_cast<std::size_t>(std::lround(holdout * static_cast<double>(n)));
    val_count = std::min(std::max<std::size_t>(val_count, 1), n - 1);
    std::vector<std::string> train_names(full.names().begin(), full.names().end() - val_count);
    std::vector<std::string> val_names(full.names().end() - val_count, full.names().end());
    train.emplace(dataset_dir, std::move(train_names), true);
    val.emplace(dataset_dir, std::move(val_names), true);
  } else {
    train.emplace(dataset_dir);
  }

  ChangeDetNet model = build_model(config, train_cfg.seed);
  std::optional<fs::path> init;
  if (!init_from.empty()) init = init_from;
  run_finetune(model, train_cfg, *train, val ? &*val : nullptr, config.normalizer(), out_dir,
               config.arch_hash(), init);
  std::cout << "fine-tuning finished after " << train_cfg.epochs << " epochs; checkpoints in "
            << out_dir.string() << "\n";
  return 0;
}

ConfusionCounts evaluate_prediction_dir(const ChangePairDataset& dataset, const fs::path& pred_dir,
                                        double threshold, bool per_image) {
  std::vector<ConfusionCounts> counts;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const std::string& name = dataset.names()[i];
    const ChangePair pair = dataset.load(i);
    const ag::Tensor truth = stack_masks({&pair.label});

    ConfusionCounts c;
    const fs::path binary_path = pred_dir / "binary" / (name + ".png");
    const fs::path prob_path = pred_dir / "prob" / (name + ".png");
    const fs::path flat_path = pred_dir / (name + ".png");
    if (fs::exists(binary_path)) {
      ag::Tensor pred = gray_to_prob(read_png(binary_path));
      c = confusion_binary(pred, truth);
    } else if (fs::exists(prob_path)) {
      c = confusion(gray_to_prob(read_png(prob_path)), truth, threshold);
    } else if (fs::exists(flat_path)) {
      c = confusion(gray_to_prob(read_png(flat_path)), truth, threshold);
    } else {
      throw IoError("no prediction found for '" + name + "' under " + pred_dir.string());
    }
    if (per_image) {
      std::cout << name << ": " << metrics_to_text(report(c)) << "\n";
    }
    counts.push_back(c);
  }
  return accumulate(counts);
}

int cmd_evaluate(const CommonArgs& args, const std::string& dataset_dir,
                 const std::string& checkpoint, const std::string& pred_dir,
                 const std::string& branch_name, double threshold_flag, bool per_image) {
  AppConfig config = load_app_config(args);
  const double threshold = threshold_flag > 0.0 ? threshold_flag : config.threshold();
  const ChangePairDataset dataset(dataset_dir);

  MetricsReport result;
  if (!pred_dir.empty()) {
    result = report(evaluate_prediction_dir(dataset, pred_dir, threshold, per_image));
  } else {
    if (checkpoint.empty()) {
      throw ConfigError("evaluate needs --checkpoint (or --pred-dir for exported maps)");
    }
    ChangeDetNet model = build_model(config, config.train(TrainPhase::finetune).seed);
    load_model_checkpoint(checkpoint, config, model);
    const PredictBranch branch = parse_predict_branch(branch_name);
    if (per_image) {
      std::vector<ConfusionCounts> counts;
      for (std::size_t i = 0; i < dataset.size(); ++i) {
        const ChangePair pair = dataset.load(i);
        const MetricsReport one =
            evaluate_pairs(model, {pair}, threshold, branch, config.normalizer());
        std::cout << pair.name << ": " << metrics_to_text(one) << "\n";
        counts.push_back(one.counts);
      }
      result = report(accumulate(counts));
    } else {
      result = evaluate_dataset(model, dataset, threshold, branch, config.normalizer());
    }
  }

  std::cout << metrics_to_text(result) << "\n";
  if (!args.out_dir.empty()) {
    const fs::path out_dir(args.out_dir);
    fs::create_directories(out_dir);
    config.write_effective(out_dir / "config.json");
    std::ofstream text(out_dir / "metrics.txt", std::ios::trunc);
    text << metrics_to_text(result) << "\n";
    std::ofstream jsonf(out_dir / "metrics.json", std::ios::trunc);
    jsonf << metrics_to_json(result) << "\n";
  }
  return 0;
}

int cmd_predict(const CommonArgs& args, const std::string& dataset_dir,
                const std::string& checkpoint, const std::string& branch_name,
                double threshold_flag, bool float_maps) {
  AppConfig config = load_app_config(args);
  const double threshold = threshold_flag > 0.0 ? threshold_flag : config.threshold();
  const PredictBranch branch = parse_predict_branch(branch_name);
  const ChangePairDataset dataset(dataset_dir, /*require_labels=*/false);

  ChangeDetNet model = build_model(config, config.train(TrainPhase::finetune).seed);
  if (!checkpoint.empty()) load_model_checkpoint(checkpoint, config, model);
  model.set_training(false);
  const Normalizer normalizer = config.normalizer();

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir / "prob");
  fs::create_directories(out_dir / "binary");
  if (float_maps) fs::create_directories(out_dir / "float");
  config.write_effective(out_dir / "config.json");

  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const ChangePair pair = dataset.load(i);
    const ag::Tensor a = stack_images({normalizer(pair.image_a)});
    const ag::Tensor b = stack_images({normalizer(pair.image_b)});
    ModelOutput out = model.forward(a, b, TrainPhase::finetune);
    const ag::Var& selected = branch == PredictBranch::semantic      ? out.semantic
                              : branch == PredictBranch::difference ? out.difference
                                                                    : out.fused;
    const ag::Tensor& probs = selected.value();

    const int h = static_cast<int>(probs.dim(2));
    const int w = static_cast<int>(probs.dim(3));
    ImageU8 prob_png(h, w, 1);
    ImageU8 binary_png(h, w, 1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const float p = probs.at(0, 0, y, x);
        prob_png.at(y, x, 0) = static_cast<std::uint8_t>(std::lround(p * 255.0f));
        binary_png.at(y, x, 0) = p >= threshold ? 255 : 0;
      }
    }
    write_png(out_dir / "prob" / (pair.name + ".png"), prob_png);
    write_png(out_dir / "binary" / (pair.name + ".png"), binary_png);
    if (float_maps) {
      TensorArchive archive;
      nlohmann::json meta;
      meta["kind"] = "probability-map";
      meta["name"] = pair.name;
      meta["branch"] = branch_name;
      archive.meta_json = meta.dump();
      archive.tensors.emplace_back("probs", probs);
      save_archive(out_dir / "float" / (pair.name + ".cdt"), archive);
    }
  }
  std::cout << "wrote " << dataset.size() << " change maps to " << out_dir.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"bi-temporal change detection: pseudo-change data, training, evaluation"};
  app.require_subcommand(1);

  CommonArgs common;

  auto* build = app.add_subcommand("build-pseudo", "export a pseudo-change dataset");
  int count_override = 0;
  add_common(build, common, /*out_required=*/true);
  build->add_option("--count", count_override, "number of pairs (overrides pseudo.count)");

  auto* pretrain = app.add_subcommand("pretrain", "pre-train on the pseudo-change stream");
  add_common(pretrain, common, true);

  auto* finetune = app.add_subcommand("finetune", "fine-tune on a labeled change dataset");
  std::string ft_dataset, ft_val_dataset, ft_init;
  add_common(finetune, common, true);
  finetune->add_option("--dataset", ft_dataset, "bi-temporal dataset directory")->required();
  finetune->add_option("--val-dataset", ft_val_dataset, "validation dataset directory");
  finetune->add_option("--init-from", ft_init, "pre-training checkpoint to initialize from");

  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint or exported maps");
  std::string ev_dataset, ev_checkpoint, ev_pred_dir, ev_branch = "fused";
  double ev_threshold = 0.0;
  bool ev_per_image = false;
  add_common(evaluate, common, false);
  evaluate->add_option("--dataset", ev_dataset, "labeled dataset directory")->required();
  evaluate->add_option("--checkpoint", ev_checkpoint, "checkpoint to evaluate");
  evaluate->add_option("--pred-dir", ev_pred_dir, "directory of exported change maps");
  evaluate->add_option("--branch", ev_branch, "semantic, difference, or fused");
  evaluate->add_option("--threshold", ev_threshold, "binarization threshold");
  evaluate->add_flag("--per-image", ev_per_image, "print a per-image breakdown");

  auto* predict = app.add_subcommand("predict", "export change maps for every pair");
  std::string pr_dataset, pr_checkpoint, pr_branch = "fused";
  double pr_threshold = 0.0;
  bool pr_float_maps = false;
  add_common(predict, common, true);
  predict->add_option("--dataset", pr_dataset, "bi-temporal dataset directory")->required();
  predict->add_option("--checkpoint", pr_checkpoint, "checkpoint to load");
  predict->add_option("--branch", pr_branch, "semantic, difference, or fused");
  predict->add_option("--threshold", pr_threshold, "binarization threshold");
  predict->add_flag("--float-maps", pr_float_maps, "also export lossless float maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (build->parsed()) return cmd_build_pseudo(common, count_override);
    if (pretrain->parsed()) return cmd_pretrain(common);
    if (finetune->parsed()) return cmd_finetune(common, ft_dataset, ft_val_dataset, ft_init);
    if (evaluate->parsed()) {
      return cmd_evaluate(common, ev_dataset, ev_checkpoint, ev_pred_dir, ev_branch, ev_threshold,
                          ev_per_image);
    }
    if (predict->parsed()) {
      return cmd_predict(common, pr_dataset, pr_checkpoint, pr_branch, pr_threshold,
                         pr_float_maps);
    }
    std::cerr << "no subcommand given\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const CapacityError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace changedet
