#include "changedet/config.hpp"

#include <fstream>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

using json = nlohmann::json;

json default_config() {
  return json{
      {"encoder",
       {{"variant", "synthetic-test"},
        {"weights_path", ""},
        {"seed", 7},
        {"adapter_channels", 64},
        {"normalize",
         {{"mean", {0.485, 0.456, 0.406}}, {"std", {0.229, 0.224, 0.225}}}}}},
      {"decoder", {{"base_channels", 64}, {"attention_reduction", 16}}},
      {"fusion", {{"strategy", "learnable"}}},
      {"seg", {{"classes", 2}}},
      {"train",
       {{"seed", 0},
        {"batch_size", 4},
        {"momentum", 0.9},
        {"weight_decay", 0.0005},
        {"gamma", 0.97},
        {"lambda", 1.0},
        {"threshold", 0.5},
        {"val_fraction", 0.0},
        {"pretrain", {{"lr", 0.1}, {"epochs", 200}, {"samples_per_epoch", 9000}}},
        {"finetune", {{"lr", 0.01}, {"epochs", 50}}}}},
      {"pseudo",
       {{"seed", 0},
        {"tile_size", 512},
        {"count", 9000},
        {"sources", json::array()},
        {"augment",
         {{"p_hflip", 0.5},
          {"p_vflip", 0.5},
          {"p_rot90", 1.0},
          {"arbitrary_rotation", false},
          {"p_rotate_any", 0.5},
          {"p_noise", 0.5},
          {"noise_std", 0.02}}}}},
  };
}

// Overlays `user` onto `base`, requiring every user key to exist in the
// defaults so typos fail loudly. Arrays and scalars replace wholesale.
void merge_into(json& base, const json& user, const std::string& prefix) {
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) {
      throw ConfigError("unknown config key '" + path + "'");
    }
    if (base[key].is_object() && value.is_object()) {
      merge_into(base[key], value, path);
    } else if (base[key].is_object() != value.is_object()) {
      throw ConfigError("config key '" + path + "' has the wrong structure");
    } else {
      base[key] = value;
    }
  }
}

void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like key.path=value, got '" + assignment + "'");
  }
  const std::string key_path = assignment.substr(0, eq);
  const std::string value_text = assignment.substr(eq + 1);

  json* node = &root;
  std::size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    const auto dot = key_path.find('.', start);
    parts.push_back(key_path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
      throw ConfigError("unknown config key '" + key_path + "'");
    }
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  if (!node->contains(leaf)) {
    throw ConfigError("unknown config key '" + key_path + "'");
  }
  if ((*node)[leaf].is_object()) {
    throw ConfigError("config key '" + key_path + "' is a section, not a value");
  }

  json parsed = json::parse(value_text, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value_text;  // plain strings need no quotes
  (*node)[leaf] = parsed;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t hash = 1469598103934665603ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 1099511628211ULL;
  }
  return hash;
}

std::array<float, 3> read_triplet(const json& node, const char* key) {
  const auto values = node.at(key).get<std::vector<double>>();
  if (values.size() != 3) {
    throw ConfigError(std::string("encoder.normalize.") + key + " needs exactly 3 values");
  }
  return {static_cast<float>(values[0]), static_cast<float>(values[1]),
          static_cast<float>(values[2])};
}

}  // namespace

AppConfig AppConfig::load(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed_override) {
  AppConfig cfg;
  cfg.raw_ = default_config();

  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    json user;
    try {
      user = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("bad JSON in " + file->string() + ": " + e.what());
    }
    merge_into(cfg.raw_, user, "");
  }
  for (const auto& assignment : overrides) {
    apply_override(cfg.raw_, assignment);
  }
  if (seed_override) {
    cfg.raw_["train"]["seed"] = *seed_override;
    cfg.raw_["pseudo"]["seed"] = *seed_override;
  }
  return cfg;
}

ModelConfig AppConfig::model() const {
  ModelConfig m;
  const json& enc = raw_.at("encoder");
  m.variant = parse_backbone_variant(enc.at("variant").get<std::string>());
  m.weights_path = enc.at("weights_path").get<std::string>();
  m.encoder_seed = enc.at("seed").get<std::uint64_t>();
  m.adapter_channels = enc.at("adapter_channels").get<int>();
  m.base_channels = raw_.at("decoder").at("base_channels").get<int>();
  m.attention_reduction = raw_.at("decoder").at("attention_reduction").get<int>();
  m.fusion_strategy = parse_fusion_strategy(raw_.at("fusion").at("strategy").get<std::string>());
  m.seg_classes = raw_.at("seg").at("classes").get<int>();
  if (m.adapter_channels <= 0 || m.base_channels <= 0) {
    throw ConfigError("channel widths must be positive");
  }
  return m;
}

Normalizer AppConfig::normalizer() const {
  const json& norm = raw_.at("encoder").at("normalize");
  Normalizer n;
  n.mean = read_triplet(norm, "mean");
  n.std = read_triplet(norm, "std");
  for (float s : n.std) {
    if (s <= 0.0f) throw ConfigError("normalization std must be positive");
  }
  return n;
}

TrainConfig AppConfig::train(TrainPhase phase) const {
  const json& t = raw_.at("train");
  const json& p = t.at(phase == TrainPhase::pretrain ? "pretrain" : "finetune");
  TrainConfig cfg;
  cfg.phase = phase;
  cfg.lr0 = p.at("lr").get<double>();
  cfg.epochs = p.at("epochs").get<int>();
  cfg.samples_per_epoch = phase == TrainPhase::pretrain ? p.at("samples_per_epoch").get<int>() : 0;
  cfg.batch_size = t.at("batch_size").get<int>();
  cfg.gamma = t.at("gamma").get<double>();
  cfg.lambda_seg = t.at("lambda").get<float>();
  cfg.momentum = t.at("momentum").get<float>();
  cfg.weight_decay = t.at("weight_decay").get<float>();
  cfg.threshold = t.at("threshold").get<double>();
  cfg.seed = t.at("seed").get<std::uint64_t>();
  if (cfg.lr0 <= 0.0) throw ConfigError("learning rate must be positive");
  if (cfg.lambda_seg < 0.0f) throw ConfigError("lambda must be non-negative");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0) {
    throw ConfigError("epochs and batch size must be positive");
  }
  return cfg;
}

DatasetManifest AppConfig::manifest() const {
  const json& ps = raw_.at("pseudo");
  DatasetManifest m;
  for (const auto& spec : sources()) {
    m.source_names.push_back(spec.name);
    m.proportions.push_back(spec.proportion);
  }
  m.tile_size = ps.at("tile_size").get<int>();
  m.samples_per_epoch = ps.at("count").get<int>();
  m.seed = ps.at("seed").get<std::uint64_t>();
  m.validate();
  return m;
}

AugmentConfig AppConfig::augment_config() const {
  const json& a = raw_.at("pseudo").at("augment");
  AugmentConfig cfg;
  cfg.p_hflip = a.at("p_hflip").get<double>();
  cfg.p_vflip = a.at("p_vflip").get<double>();
  cfg.p_rot90 = a.at("p_rot90").get<double>();
  cfg.arbitrary_rotation = a.at("arbitrary_rotation").get<bool>();
  cfg.p_rotate_any = a.at("p_rotate_any").get<double>();
  cfg.p_noise = a.at("p_noise").get<double>();
  cfg.noise_std = a.at("noise_std").get<double>();
  return cfg;
}

std::vector<SourceSpec> AppConfig::sources() const {
  std::vector<SourceSpec> out;
  for (const auto& entry : raw_.at("pseudo").at("sources")) {
    SourceSpec spec;
    spec.name = entry.at("name").get<std::string>();
    spec.dir = entry.at("dir").get<std::string>();
    spec.keep_class = entry.value("keep_class", -1);
    spec.num_classes = entry.value("num_classes", 2);
    spec.proportion = entry.value("proportion", 1.0);
    out.push_back(std::move(spec));
  }
  return out;
}

double AppConfig::threshold() const { return raw_.at("train").at("threshold").get<double>(); }

double AppConfig::val_fraction() const {
  return raw_.at("train").at("val_fraction").get<double>();
}

std::uint64_t AppConfig::arch_hash() const {
  json arch;
  arch["encoder"] = {{"variant", raw_.at("encoder").at("variant")},
                     {"adapter_channels", raw_.at("encoder").at("adapter_channels")}};
  arch["decoder"] = raw_.at("decoder");
  arch["fusion"] = raw_.at("fusion");
  arch["seg"] = raw_.at("seg");
  return fnv1a(arch.dump());
}

void AppConfig::write_effective(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << raw_.dump(2) << "\n";
}

}  // namespace changedet
