#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "changedet/nn.hpp"

namespace changedet {

// Four feature levels at strides 4, 8, 16, 32 of the input resolution.
struct FeaturePyramid {
  std::array<ag::Var, 4> levels;
};

enum class BackboneVariant { foundation_x, foundation_s, synthetic_test };

BackboneVariant parse_backbone_variant(const std::string& name);
std::string backbone_variant_name(BackboneVariant variant);

struct BackboneLayerSpec {
  int in_channels = 0;
  int out_channels = 0;
  int stride = 2;
  int kernel = 3;
};

struct BackboneSpec {
  std::vector<BackboneLayerSpec> layers;
  std::array<int, 4> taps{};  // layer indices whose outputs form the pyramid

  static BackboneSpec for_variant(BackboneVariant variant);
};

// Frozen convolutional backbone behind the pyramid contract. Parameters are
// never trainable: they live outside the module/parameter registry and no
// gradient graph is built through them.
class Encoder {
 public:
  // foundation-* variants load weights from a tensor archive at weights_path;
  // synthetic-test synthesizes fixed weights from `seed` and needs no file.
  static Encoder load(const std::filesystem::path& weights_path, BackboneVariant variant,
                      std::uint64_t seed = 7);

  // Writes a weight archive matching `variant`, for bootstrapping and tests.
  static void write_weights(const std::filesystem::path& path, BackboneVariant variant, Rng& rng);

  // images: (N, 3, H, W) with H, W multiples of 32.
  FeaturePyramid extract(const ag::Tensor& images) const;

  BackboneVariant variant() const { return variant_; }
  const BackboneSpec& spec() const { return spec_; }
  std::array<int, 4> pyramid_channels() const;
  std::size_t trainable_parameter_count() const { return 0; }

  // Copies of every weight tensor, for bit-compare freezing audits.
  std::vector<std::pair<std::string, ag::Tensor>> snapshot() const;

 private:
  Encoder(BackboneVariant variant, BackboneSpec spec) : variant_(variant), spec_(std::move(spec)) {}

  BackboneVariant variant_;
  BackboneSpec spec_;
  std::vector<ag::Var> weights_;  // requires_grad = false
  std::vector<ag::Var> biases_;
};

// Per-level trainable block (1x1 convolution + batch norm + ReLU) mapping
// every pyramid level to a shared channel width.
class Adapter : public nn::Module {
 public:
  Adapter(const std::array<int, 4>& in_channels, int out_channels, Rng& rng);

  FeaturePyramid forward(const FeaturePyramid& pyramid);

  int out_channels() const { return out_channels_; }

 private:
  std::array<int, 4> in_channels_;
  int out_channels_;
  std::vector<std::unique_ptr<nn::ConvBlock>> blocks_;
};

}  // namespace changedet
