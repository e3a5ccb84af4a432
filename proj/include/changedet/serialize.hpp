#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "changedet/tensor.hpp"

namespace changedet {

// Named-tensor container used for backbone weight files, checkpoints, and
// lossless probability-map export. Layout: magic, version, JSON header with
// caller metadata plus a tensor directory, then raw little-endian float32
// payloads in directory order. Round-trips preserve float bits exactly.
struct TensorArchive {
  std::string meta_json;  // arbitrary caller metadata, serialized JSON object
  std::vector<std::pair<std::string, ag::Tensor>> tensors;

  const ag::Tensor* find(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);

// Throws IoError for a missing, truncated, or foreign file.
TensorArchive load_archive(const std::filesystem::path& path);

}  // namespace changedet
