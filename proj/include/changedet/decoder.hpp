#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "changedet/encoder.hpp"
#include "changedet/nn.hpp"

namespace changedet {

// One declared input of a dense-grid decoding unit. Scales are 1-based with
// 1 the finest pyramid level; depth counts units at one scale.
struct GridInput {
  enum class Kind {
    feature_pair,            // adapted features of both temporal images at `scale`
    same_scale_unit,         // earlier unit output (scale, depth)
    upsampled_unit,          // deconvolved unit output from (scale, depth)
    upsampled_feature_pair,  // deconvolved feature pair from `scale`
  };
  Kind kind;
  int scale = 0;
  int depth = 0;  // 0 for feature inputs

  bool operator==(const GridInput&) const = default;
};

struct GridUnitPlan {
  int scale = 0;
  int depth = 0;
  std::vector<GridInput> inputs;
};

// Wiring of the densely connected difference decoder over `num_scales`
// pyramid levels, in dependency order. Unit (i, j) exists iff i + j <=
// num_scales + 1; it reads the feature pair at scale i, every earlier unit at
// scale i, and the upsampled unit (i+1, j-1). Depth-1 units upsample the
// next-coarser feature pair instead; the coarsest unit has nothing below it.
std::vector<GridUnitPlan> dense_grid_plan(int num_scales);

// Optional deconvolution upsampler for the next-coarser input, then two conv
// blocks over the channel-concatenated inputs.
class DecodingUnit : public nn::Module {
 public:
  // concat_channels counts every input after upsampling (including the
  // deconvolution output); up_in_channels == 0 disables the upsampler.
  DecodingUnit(int64_t concat_channels, int64_t up_in_channels, int64_t out_channels, Rng& rng);

  // same_scale: inputs already at this unit's resolution; coarser: tensor to
  // deconvolve first (undefined when the unit has no upsampler).
  ag::Var forward(const std::vector<ag::Var>& same_scale, const ag::Var& coarser);

 private:
  std::unique_ptr<nn::ConvTranspose2d> up_;
  nn::ConvBlock block_a_;
  nn::ConvBlock block_b_;
};

// Conv block + single-channel conv, bilinear upsampling of the logits to the
// requested resolution, then sigmoid.
class ChangeHead : public nn::Module {
 public:
  ChangeHead(int64_t in_channels, int64_t mid_channels, Rng& rng);

  ag::Var logits(const ag::Var& x);
  ag::Var forward(const ag::Var& x, int64_t out_h, int64_t out_w);

 private:
  nn::ConvBlock block_;
  nn::Conv2d final_;
};

struct SemanticOutput {
  ag::Var probs;         // (N, 1, H, W) change probabilities
  ag::Var finest;        // finest decoded feature of the first image
  ag::Var finest_prime;  // finest decoded feature of the second image
};

// Decodes each temporal image independently with one shared set of decoding
// units, concatenates the two finest decoded features, and predicts change.
class SemanticDecoder : public nn::Module {
 public:
  SemanticDecoder(int in_channels, int channels, Rng& rng);

  SemanticOutput forward(const FeaturePyramid& a, const FeaturePyramid& b, int64_t out_h,
                         int64_t out_w);

  int channels() const { return channels_; }

 private:
  ag::Var decode_stream(const FeaturePyramid& p);

  int in_channels_;
  int channels_;
  std::vector<std::unique_ptr<DecodingUnit>> units_;  // coarse to fine
  ChangeHead head_;
};

// Densely connected multi-scale difference decoder: builds the unit grid from
// concatenated bi-temporal features, gathers every finest-scale unit output,
// reweights channels with the attention gate, and predicts change.
class DifferenceDecoder : public nn::Module {
 public:
  DifferenceDecoder(int in_channels, int channels, int attention_reduction, int num_scales,
                    Rng& rng);

  ag::Var forward(const FeaturePyramid& a, const FeaturePyramid& b, int64_t out_h, int64_t out_w);

  const std::vector<GridUnitPlan>& plan() const { return plan_; }
  // Value shapes of every grid unit from the most recent forward, plan-ordered.
  const std::vector<std::vector<int64_t>>& last_grid_shapes() const { return last_grid_shapes_; }

 private:
  int in_channels_;
  int channels_;
  int num_scales_;
  std::vector<GridUnitPlan> plan_;
  std::vector<std::unique_ptr<DecodingUnit>> units_;  // parallel to plan_
  nn::ChannelAttention attention_;
  ChangeHead head_;
  std::vector<std::vector<int64_t>> last_grid_shapes_;
};

}  // namespace changedet
