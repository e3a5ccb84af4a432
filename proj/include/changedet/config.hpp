#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "changedet/dataset.hpp"
#include "changedet/model.hpp"
#include "changedet/pseudochange.hpp"
#include "changedet/training.hpp"

namespace changedet {

// A pseudo-change source dataset entry from the config.
struct SourceSpec {
  std::string name;
  std::filesystem::path dir;
  int keep_class = -1;  // -1: masks are already binary
  int num_classes = 2;
  double proportion = 1.0;
};

// Effective configuration: compiled-in defaults, overlaid by an optional
// JSON file, overlaid by --set key=value pairs. Unknown keys are rejected.
class AppConfig {
 public:
  static AppConfig load(const std::optional<std::filesystem::path>& file,
                        const std::vector<std::string>& overrides,
                        std::optional<std::uint64_t> seed_override);

  ModelConfig model() const;
  Normalizer normalizer() const;
  TrainConfig train(TrainPhase phase) const;
  DatasetManifest manifest() const;
  AugmentConfig augment_config() const;
  std::vector<SourceSpec> sources() const;
  double threshold() const;
  double val_fraction() const;

  // Stable digest of the architecture-determining subtree; stored in
  // checkpoints to catch incompatible fine-tuning initializations.
  std::uint64_t arch_hash() const;

  void write_effective(const std::filesystem::path& path) const;
  const nlohmann::json& raw() const { return raw_; }

 private:
  nlohmann::json raw_;
};

}  // namespace changedet
