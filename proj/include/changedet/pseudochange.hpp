#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "changedet/rng.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

// Dense 8-bit label grid; binary masks hold {0,1}, class grids hold ids.
struct Mask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width), v(static_cast<std::size_t>(height) * width, fill) {}

  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  bool same_shape(const Mask& o) const { return h == o.h && w == o.w; }
};

// One single-temporal segmentation sample: image as (3, H, W) floats in
// [0, 1] plus its mask.
struct SegSample {
  ag::Tensor image;
  Mask mask;
};

// Synthetic bi-temporal pair assembled from two segmentation samples; the
// change label is the pixelwise XOR of the two segmentation masks.
struct PseudoChangeSample {
  ag::Tensor image_a;
  ag::Tensor image_b;
  Mask seg_a;
  Mask seg_b;
  Mask change;
};

struct SourceDataset {
  std::string name;
  std::vector<SegSample> samples;
};

struct DatasetManifest {
  std::vector<std::string> source_names;
  std::vector<double> proportions;  // must sum to 1
  int tile_size = 512;              // must be a multiple of 32
  int samples_per_epoch = 9000;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
};

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_rot90 = 1.0;  // quarter-turn count drawn uniformly from {0,1,2,3}
  bool arbitrary_rotation = false;
  double p_rotate_any = 0.5;  // only used when arbitrary_rotation is set
  double p_noise = 0.5;
  double noise_std = 0.02;  // Gaussian, in units of the [0,1] intensity range
};

// Pixelwise XOR of two binary masks. Throws ShapeError on shape mismatch and
// DomainError on values outside {0,1}.
Mask xor_label(const Mask& a, const Mask& b);

// Binary mask selecting one class of a multi-class grid.
Mask filter_category(const Mask& classes, int keep_class, int num_classes);

// Splits into non-overlapping size x size tiles, zero-padding the remainder
// in both image and mask. Tile count is ceil(H/size) * ceil(W/size).
std::vector<SegSample> tile(const SegSample& sample, int size);

// Draws a source per the manifest proportions, then two distinct sample
// indices, and assembles the pair with its XOR label.
PseudoChangeSample sample_pair(const DatasetManifest& manifest,
                               const std::vector<SourceDataset>& sources, Rng& rng);

// One identical geometric transform for both images and all three masks;
// noise perturbs the images only, so the XOR identity survives.
PseudoChangeSample augment(const PseudoChangeSample& sample, const AugmentConfig& cfg, Rng& rng);

// Writes manifest.samples_per_epoch pairs under out_dir in the bi-temporal
// layout (A/, B/, label/, segA/, segB/) plus manifest.json. Deterministic:
// one manifest produces byte-identical output.
void export_dataset(const DatasetManifest& manifest, const std::vector<SourceDataset>& sources,
                    const std::filesystem::path& out_dir);

}  // namespace changedet
