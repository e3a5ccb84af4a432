#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "changedet/image_io.hpp"
#include "changedet/pseudochange.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

// Per-channel standardization applied after decoding to [0,1] floats.
struct Normalizer {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};

  ag::Tensor operator()(const ag::Tensor& image01) const;
};

// 8-bit image -> (3, H, W) floats in [0,1]; grayscale replicates channels.
ag::Tensor to_image_tensor(const ImageU8& image);
// (3, H, W) floats -> 8-bit RGB, clamped to [0,1] and rounded.
ImageU8 image_to_u8(const ag::Tensor& image01);

// Grayscale {0,255} (or already {0,1}) -> binary mask; anything else is a
// DomainError.
Mask to_binary_mask(const ImageU8& image);
// Grayscale class-id grid taken verbatim.
Mask to_class_mask(const ImageU8& image);
ImageU8 mask_to_u8(const Mask& mask);
// Grayscale intensities -> (1, 1, H, W) probabilities value/255.
ag::Tensor gray_to_prob(const ImageU8& image);

// Batch assembly.
ag::Tensor stack_images(const std::vector<ag::Tensor>& images);      // (N,3,H,W)
ag::Tensor stack_masks(const std::vector<const Mask*>& masks);       // (N,1,H,W) 0/1 floats
ag::Tensor stack_class_masks(const std::vector<const Mask*>& masks); // (N,H,W) ids as floats

struct ChangePair {
  std::string name;
  ag::Tensor image_a;  // (3,H,W) in [0,1]
  ag::Tensor image_b;
  Mask label;  // empty when the dataset has no labels
};

// Bi-temporal directory dataset: A/<name>.png, B/<name>.png, and (unless
// labels are optional and absent) label/<name>.png with change = 255.
class ChangePairDataset {
 public:
  explicit ChangePairDataset(const std::filesystem::path& dir, bool require_labels = true);
  // Restricts the dataset to an explicit name subset (for holdout splits).
  ChangePairDataset(const std::filesystem::path& dir, std::vector<std::string> names,
                    bool require_labels);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  bool has_labels() const { return has_labels_; }
  const std::filesystem::path& dir() const { return dir_; }

  ChangePair load(std::size_t index) const;

 private:
  void check_listing(bool require_labels) const;

  std::filesystem::path dir_;
  std::vector<std::string> names_;
  bool has_labels_ = false;
};

// Loads a single-temporal segmentation source laid out as images/<name>.png
// + masks/<name>.png, pre-tiled to tile_size. keep_class >= 0 selects one
// class of a multi-class grid; otherwise masks must already be binary.
SourceDataset load_seg_source(const std::filesystem::path& dir, const std::string& name,
                              int keep_class, int num_classes, int tile_size);

}  // namespace changedet
