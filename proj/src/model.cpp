#include "changedet/model.hpp"

#include "changedet/errors.hpp"

namespace changedet {

PredictBranch parse_predict_branch(const std::string& name) {
  if (name == "semantic") return PredictBranch::semantic;
  if (name == "difference") return PredictBranch::difference;
  if (name == "fused") return PredictBranch::fused;
  throw ConfigError("unknown branch '" + name + "' (expected semantic, difference, or fused)");
}

SegHead::SegHead(int64_t in_channels, int64_t num_classes, Rng& rng)
    : num_classes_(num_classes),
      block_(in_channels, in_channels, rng),
      classifier_(in_channels, num_classes, 1, 1, rng) {
  register_module("block", block_);
  register_module("classifier", classifier_);
}

ag::Var SegHead::forward(const ag::Var& decoded, int64_t out_h, int64_t out_w) {
  const ag::Var logits = classifier_.forward(block_.forward(decoded));
  return ag::softmax_channels(ag::upsample_bilinear(logits, out_h, out_w));
}

ChangeDetNet::ChangeDetNet(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      encoder_(Encoder::load(cfg.weights_path, cfg.variant, cfg.encoder_seed)),
      adapter_(encoder_.pyramid_channels(), cfg.adapter_channels, rng),
      semantic_(cfg.adapter_channels, cfg.base_channels, rng),
      difference_(cfg.adapter_channels, cfg.base_channels, cfg.attention_reduction, 4, rng),
      fusion_(cfg.fusion_strategy),
      seg_(cfg.base_channels, cfg.seg_classes, rng) {
  register_module("adapter", adapter_);
  register_module("semantic", semantic_);
  register_module("difference", difference_);
  register_module("fusion", fusion_);
  register_module("seg_head", seg_);
}

ModelOutput ChangeDetNet::forward(const ag::Tensor& images_a, const ag::Tensor& images_b,
                                  TrainPhase phase) {
  if (!images_a.same_shape(images_b)) {
    throw ShapeError("temporal images disagree: " + images_a.shape_str() + " vs " +
                     images_b.shape_str());
  }
  const int64_t out_h = images_a.dim(2);
  const int64_t out_w = images_a.dim(3);

  const FeaturePyramid pyr_a = adapter_.forward(encoder_.extract(images_a));
  const FeaturePyramid pyr_b = adapter_.forward(encoder_.extract(images_b));

  ModelOutput out;
  SemanticOutput sem = semantic_.forward(pyr_a, pyr_b, out_h, out_w);
  out.semantic = sem.probs;
  out.difference = difference_.forward(pyr_a, pyr_b, out_h, out_w);

  if (phase == TrainPhase::pretrain) {
    out.seg_a = seg_.forward(sem.finest, out_h, out_w);
    out.seg_b = seg_.forward(sem.finest_prime, out_h, out_w);
  } else {
    out.fused = fusion_.forward(out.semantic, out.difference);
  }
  return out;
}

std::vector<std::pair<std::string, ag::Var>> ChangeDetNet::trainable_parameters(
    TrainPhase phase) const {
  const std::string drop =
      phase == TrainPhase::pretrain ? "fusion." : "seg_head.";
  std::vector<std::pair<std::string, ag::Var>> out;
  for (auto& [name, param] : named_parameters()) {
    if (name.rfind(drop, 0) == 0) continue;
    out.emplace_back(name, param);
  }
  return out;
}

}  // namespace changedet
