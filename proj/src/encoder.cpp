#include "changedet/encoder.hpp"

#include <cmath>
#include <utility>

#include <nlohmann/json.hpp>

#include "changedet/errors.hpp"
#include "changedet/serialize.hpp"

namespace changedet {

namespace {

using json = nlohmann::json;

ag::Tensor random_conv_weight(int out_ch, int in_ch, int kernel, Rng& rng) {
  ag::Tensor w({out_ch, in_ch, kernel, kernel});
  const float bound = std::sqrt(6.0f / (static_cast<float>(in_ch) * kernel * kernel));
  for (int64_t i = 0; i < w.numel(); ++i) {
    w.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
  }
  return w;
}

std::string layer_weight_key(std::size_t i) { return "layer" + std::to_string(i) + ".weight"; }
std::string layer_bias_key(std::size_t i) { return "layer" + std::to_string(i) + ".bias"; }

}  // namespace

BackboneVariant parse_backbone_variant(const std::string& name) {
  if (name == "foundation-x") return BackboneVariant::foundation_x;
  if (name == "foundation-s") return BackboneVariant::foundation_s;
  if (name == "synthetic-test") return BackboneVariant::synthetic_test;
  throw ConfigError("unknown encoder variant '" + name +
                    "' (expected foundation-x, foundation-s, or synthetic-test)");
}

std::string backbone_variant_name(BackboneVariant variant) {
  switch (variant) {
    case BackboneVariant::foundation_x: return "foundation-x";
    case BackboneVariant::foundation_s: return "foundation-s";
    case BackboneVariant::synthetic_test: return "synthetic-test";
  }
  return "?";
}

BackboneSpec BackboneSpec::for_variant(BackboneVariant variant) {
  std::vector<int> widths;
  switch (variant) {
    case BackboneVariant::foundation_x: widths = {32, 64, 128, 256, 320}; break;
    case BackboneVariant::foundation_s: widths = {16, 32, 64, 128, 160}; break;
    case BackboneVariant::synthetic_test: widths = {16, 24, 32, 48, 64}; break;
  }
  BackboneSpec spec;
  int in_ch = 3;
  for (int out_ch : widths) {
    spec.layers.push_back({in_ch, out_ch, 2, 3});
    in_ch = out_ch;
  }
  spec.taps = {1, 2, 3, 4};  // strides 4, 8, 16, 32
  return spec;
}

Encoder Encoder::load(const std::filesystem::path& weights_path, BackboneVariant variant,
                      std::uint64_t seed) {
  Encoder enc(variant, BackboneSpec::for_variant(variant));

  if (variant == BackboneVariant::synthetic_test) {
    Rng rng(seed);
    for (const auto& layer : enc.spec_.layers) {
      enc.weights_.push_back(
          ag::Var::leaf(random_conv_weight(layer.out_channels, layer.in_channels, layer.kernel, rng),
                        /*requires_grad=*/false));
      enc.biases_.push_back(ag::Var::leaf(ag::Tensor({layer.out_channels}, 0.0f), false));
    }
    return enc;
  }

  TensorArchive archive = load_archive(weights_path);
  const json meta = json::parse(archive.meta_json);
  const std::string file_variant = meta.value("variant", std::string("?"));
  if (file_variant != backbone_variant_name(variant)) {
    throw ShapeError("backbone variant mismatch: file " + weights_path.string() + " holds '" +
                     file_variant + "', requested '" + backbone_variant_name(variant) + "'");
  }
  for (std::size_t i = 0; i < enc.spec_.layers.size(); ++i) {
    const auto& layer = enc.spec_.layers[i];
    const ag::Tensor* w = archive.find(layer_weight_key(i));
    const ag::Tensor* b = archive.find(layer_bias_key(i));
    if (!w || !b) {
      throw ShapeError("backbone file " + weights_path.string() + " is missing layer" +
                       std::to_string(i));
    }
    const std::vector<int64_t> want_w = {layer.out_channels, layer.in_channels, layer.kernel,
                                         layer.kernel};
    const std::vector<int64_t> want_b = {layer.out_channels};
    if (w->shape() != want_w || b->shape() != want_b) {
      throw ShapeError("backbone shape mismatch at layer" + std::to_string(i) + ": expected weight (" +
                       std::to_string(layer.out_channels) + "," + std::to_string(layer.in_channels) +
                       "," + std::to_string(layer.kernel) + "," + std::to_string(layer.kernel) +
                       "), file has " + w->shape_str());
    }
    enc.weights_.push_back(ag::Var::leaf(*w, false));
    enc.biases_.push_back(ag::Var::leaf(*b, false));
  }
  return enc;
}

void Encoder::write_weights(const std::filesystem::path& path, BackboneVariant variant, Rng& rng) {
  const BackboneSpec spec = BackboneSpec::for_variant(variant);
  TensorArchive archive;
  json meta;
  meta["kind"] = "backbone";
  meta["variant"] = backbone_variant_name(variant);
  archive.meta_json = meta.dump();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    archive.tensors.emplace_back(
        layer_weight_key(i), random_conv_weight(layer.out_channels, layer.in_channels, layer.kernel, rng));
    archive.tensors.emplace_back(layer_bias_key(i), ag::Tensor({layer.out_channels}, 0.0f));
  }
  save_archive(path, archive);
}

FeaturePyramid Encoder::extract(const ag::Tensor& images) const {
  if (images.rank() != 4 || images.shape()[1] != 3) {
    throw ShapeError("encoder expects (N, 3, H, W) input, got " + images.shape_str());
  }
  const int h = images.shape()[2];
  const int w = images.shape()[3];
  if (h % 32 != 0 || w % 32 != 0) {
    throw ShapeError("encoder input height and width must be multiples of 32, got " +
                     std::to_string(h) + "x" + std::to_string(w));
  }

  FeaturePyramid pyramid;
  ag::Var x = ag::Var::leaf(images, false);
  std::size_t tap_slot = 0;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    x = ag::relu(ag::conv2d(x, weights_[i], biases_[i], spec_.layers[i].stride,
                            spec_.layers[i].kernel / 2));
    if (tap_slot < pyramid.levels.size() &&
        spec_.taps[tap_slot] == static_cast<int>(i)) {
      pyramid.levels[tap_slot] = x;
      ++tap_slot;
    }
  }
  if (tap_slot != pyramid.levels.size()) {
    throw ShapeError("backbone tap specification did not produce 4 levels");
  }
  return pyramid;
}

std::array<int, 4> Encoder::pyramid_channels() const {
  std::array<int, 4> channels{};
  for (std::size_t k = 0; k < channels.size(); ++k) {
    channels[k] = spec_.layers[spec_.taps[k]].out_channels;
  }
  return channels;
}

std::vector<std::pair<std::string, ag::Tensor>> Encoder::snapshot() const {
  std::vector<std::pair<std::string, ag::Tensor>> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.emplace_back(layer_weight_key(i), weights_[i].value());
    out.emplace_back(layer_bias_key(i), biases_[i].value());
  }
  return out;
}

Adapter::Adapter(const std::array<int, 4>& in_channels, int out_channels, Rng& rng)
    : in_channels_(in_channels), out_channels_(out_channels) {
  for (std::size_t k = 0; k < in_channels_.size(); ++k) {
    blocks_.push_back(std::make_unique<nn::ConvBlock>(in_channels_[k], out_channels_, rng, 1));
    register_module("level" + std::to_string(k), *blocks_[k]);
  }
}

FeaturePyramid Adapter::forward(const FeaturePyramid& pyramid) {
  FeaturePyramid out;
  for (std::size_t k = 0; k < pyramid.levels.size(); ++k) {
    const auto& shape = pyramid.levels[k].shape();
    if (shape.size() != 4 || shape[1] != in_channels_[k]) {
      throw ShapeError("adapter level " + std::to_string(k) + " expects " +
                       std::to_string(in_channels_[k]) + " channels, got " +
                       pyramid.levels[k].value().shape_str());
    }
    out.levels[k] = blocks_[k]->forward(pyramid.levels[k]);
  }
  return out;
}

}  // namespace changedet
