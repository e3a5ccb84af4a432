#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "changedet/decoder.hpp"
#include "changedet/encoder.hpp"
#include "changedet/fusion.hpp"

namespace changedet {

enum class TrainPhase { pretrain, finetune };
enum class PredictBranch { semantic, difference, fused };

PredictBranch parse_predict_branch(const std::string& name);

// Proxy per-image segmentation classifier attached during pre-training: conv
// block + per-class conv, bilinear upsample of the logits, channel softmax.
class SegHead : public nn::Module {
 public:
  SegHead(int64_t in_channels, int64_t num_classes, Rng& rng);

  // decoded: finest decoded feature; returns (N, K, out_h, out_w), rows
  // summing to 1 over K.
  ag::Var forward(const ag::Var& decoded, int64_t out_h, int64_t out_w);

  int64_t num_classes() const { return num_classes_; }

 private:
  int64_t num_classes_;
  nn::ConvBlock block_;
  nn::Conv2d classifier_;
};

struct ModelConfig {
  BackboneVariant variant = BackboneVariant::synthetic_test;
  std::string weights_path;
  std::uint64_t encoder_seed = 7;
  int adapter_channels = 64;
  int base_channels = 64;
  int attention_reduction = 16;
  FusionStrategy fusion_strategy = FusionStrategy::learnable;
  int seg_classes = 2;
};

struct ModelOutput {
  ag::Var semantic;    // (N,1,H,W) change probabilities, semantic branch
  ag::Var difference;  // (N,1,H,W) change probabilities, difference branch
  ag::Var fused;       // defined in the finetune phase only
  ag::Var seg_a;       // (N,K,H,W) class probabilities, pretrain phase only
  ag::Var seg_b;
};

// The full network: frozen encoder, trainable adapter, the two decoder
// branches, learnable fusion, and the pre-training segmentation head. The
// encoder lives outside the module registry, so checkpoints never contain
// its weights and no optimizer can reach them.
class ChangeDetNet : public nn::Module {
 public:
  ChangeDetNet(const ModelConfig& cfg, Rng& rng);

  ModelOutput forward(const ag::Tensor& images_a, const ag::Tensor& images_b, TrainPhase phase);

  // Parameters updated in the given phase: adapter, both decoders, and the
  // segmentation head when pre-training or the fusion weight when
  // fine-tuning.
  std::vector<std::pair<std::string, ag::Var>> trainable_parameters(TrainPhase phase) const;

  const ModelConfig& config() const { return cfg_; }
  Encoder& encoder() { return encoder_; }
  Adapter& adapter() { return adapter_; }
  SemanticDecoder& semantic_decoder() { return semantic_; }
  DifferenceDecoder& difference_decoder() { return difference_; }
  Fusion& fusion() { return fusion_; }
  SegHead& seg_head() { return seg_; }

 private:
  ModelConfig cfg_;
  Encoder encoder_;
  Adapter adapter_;
  SemanticDecoder semantic_;
  DifferenceDecoder difference_;
  Fusion fusion_;
  SegHead seg_;
};

}  // namespace changedet
