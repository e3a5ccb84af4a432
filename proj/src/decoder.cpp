#include "changedet/decoder.hpp"

#include <string>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

void check_pyramid_pair(const FeaturePyramid& a, const FeaturePyramid& b) {
  for (std::size_t k = 0; k < a.levels.size(); ++k) {
    if (!a.levels[k].defined() || !b.levels[k].defined()) {
      throw ShapeError("pyramid level " + std::to_string(k) + " is missing");
    }
    if (a.levels[k].shape() != b.levels[k].shape()) {
      throw ShapeError("temporal pyramids disagree at level " + std::to_string(k) + ": " +
                       a.levels[k].value().shape_str() + " vs " + b.levels[k].value().shape_str());
    }
  }
}

}  // namespace

std::vector<GridUnitPlan> dense_grid_plan(int num_scales) {
  std::vector<GridUnitPlan> plan;
  for (int depth = 1; depth <= num_scales; ++depth) {
    for (int scale = num_scales + 1 - depth; scale >= 1; --scale) {
      GridUnitPlan unit;
      unit.scale = scale;
      unit.depth = depth;
      unit.inputs.push_back({GridInput::Kind::feature_pair, scale, 0});
      for (int k = 1; k < depth; ++k) {
        unit.inputs.push_back({GridInput::Kind::same_scale_unit, scale, k});
      }
      if (depth == 1) {
        if (scale < num_scales) {
          unit.inputs.push_back({GridInput::Kind::upsampled_feature_pair, scale + 1, 0});
        }
      } else {
        unit.inputs.push_back({GridInput::Kind::upsampled_unit, scale + 1, depth - 1});
      }
      plan.push_back(std::move(unit));
    }
  }
  return plan;
}

DecodingUnit::DecodingUnit(int64_t concat_channels, int64_t up_in_channels, int64_t out_channels,
                           Rng& rng)
    : block_a_(concat_channels, out_channels, rng), block_b_(out_channels, out_channels, rng) {
  if (up_in_channels > 0) {
    up_ = std::make_unique<nn::ConvTranspose2d>(up_in_channels, out_channels, rng);
    register_module("up", *up_);
  }
  register_module("block_a", block_a_);
  register_module("block_b", block_b_);
}

ag::Var DecodingUnit::forward(const std::vector<ag::Var>& same_scale, const ag::Var& coarser) {
  std::vector<ag::Var> parts = same_scale;
  if (up_) {
    parts.push_back(up_->forward(coarser));
  }
  return block_b_.forward(block_a_.forward(ag::concat_channels(parts)));
}

ChangeHead::ChangeHead(int64_t in_channels, int64_t mid_channels, Rng& rng)
    : block_(in_channels, mid_channels, rng), final_(mid_channels, 1, 3, 1, rng) {
  register_module("block", block_);
  register_module("final", final_);
}

ag::Var ChangeHead::logits(const ag::Var& x) {
  if (!x.value().all_finite()) {
    throw NumericError("change head received non-finite features");
  }
  return final_.forward(block_.forward(x));
}

ag::Var ChangeHead::forward(const ag::Var& x, int64_t out_h, int64_t out_w) {
  return ag::sigmoid(ag::upsample_bilinear(logits(x), out_h, out_w));
}

SemanticDecoder::SemanticDecoder(int in_channels, int channels, Rng& rng)
    : in_channels_(in_channels), channels_(channels), head_(2 * channels, channels, rng) {
  for (int k = 0; k < 3; ++k) {
    const int64_t up_in = (k == 0) ? in_channels : channels;
    units_.push_back(
        std::make_unique<DecodingUnit>(in_channels + channels, up_in, channels, rng));
    register_module("unit" + std::to_string(k), *units_[k]);
  }
  register_module("head", head_);
}

ag::Var SemanticDecoder::decode_stream(const FeaturePyramid& p) {
  ag::Var decoded = p.levels[3];
  for (int k = 0; k < 3; ++k) {
    decoded = units_[k]->forward({p.levels[2 - k]}, decoded);
  }
  return decoded;
}

SemanticOutput SemanticDecoder::forward(const FeaturePyramid& a, const FeaturePyramid& b,
                                        int64_t out_h, int64_t out_w) {
  check_pyramid_pair(a, b);
  SemanticOutput out;
  out.finest = decode_stream(a);
  out.finest_prime = decode_stream(b);
  out.probs = head_.forward(ag::concat_channels({out.finest, out.finest_prime}), out_h, out_w);
  return out;
}

DifferenceDecoder::DifferenceDecoder(int in_channels, int channels, int attention_reduction,
                                     int num_scales, Rng& rng)
    : in_channels_(in_channels),
      channels_(channels),
      num_scales_(num_scales),
      plan_(dense_grid_plan(num_scales)),
      attention_(static_cast<int64_t>(num_scales) * channels, attention_reduction, rng),
      head_(static_cast<int64_t>(num_scales) * channels, channels, rng) {
  for (const auto& unit : plan_) {
    int64_t concat = 0;
    int64_t up_in = 0;
    for (const auto& input : unit.inputs) {
      switch (input.kind) {
        case GridInput::Kind::feature_pair: concat += 2 * in_channels_; break;
        case GridInput::Kind::same_scale_unit: concat += channels_; break;
        case GridInput::Kind::upsampled_unit:
          up_in = channels_;
          concat += channels_;
          break;
        case GridInput::Kind::upsampled_feature_pair:
          up_in = 2 * in_channels_;
          concat += channels_;
          break;
      }
    }
    units_.push_back(std::make_unique<DecodingUnit>(concat, up_in, channels_, rng));
    register_module("unit" + std::to_string(unit.scale) + "_" + std::to_string(unit.depth),
                    *units_.back());
  }
  register_module("attention", attention_);
  register_module("head", head_);
}

ag::Var DifferenceDecoder::forward(const FeaturePyramid& a, const FeaturePyramid& b, int64_t out_h,
                                   int64_t out_w) {
  check_pyramid_pair(a, b);

  std::vector<ag::Var> pairs(num_scales_);
  for (int scale = 1; scale <= num_scales_; ++scale) {
    pairs[scale - 1] = ag::concat_channels({a.levels[scale - 1], b.levels[scale - 1]});
  }

  // grid[(scale - 1) * num_scales_ + (depth - 1)] holds unit output (scale, depth)
  std::vector<ag::Var> grid(static_cast<std::size_t>(num_scales_) * num_scales_);
  auto grid_at = [&](int scale, int depth) -> ag::Var& {
    return grid[static_cast<std::size_t>(scale - 1) * num_scales_ + (depth - 1)];
  };

  last_grid_shapes_.clear();
  for (std::size_t u = 0; u < plan_.size(); ++u) {
    const auto& unit = plan_[u];
    std::vector<ag::Var> same_scale;
    ag::Var coarser;
    for (const auto& input : unit.inputs) {
      switch (input.kind) {
        case GridInput::Kind::feature_pair: same_scale.push_back(pairs[input.scale - 1]); break;
        case GridInput::Kind::same_scale_unit:
          same_scale.push_back(grid_at(input.scale, input.depth));
          break;
        case GridInput::Kind::upsampled_unit: coarser = grid_at(input.scale, input.depth); break;
        case GridInput::Kind::upsampled_feature_pair: coarser = pairs[input.scale - 1]; break;
      }
    }
    ag::Var out = units_[u]->forward(same_scale, coarser);
    last_grid_shapes_.push_back(out.shape());
    grid_at(unit.scale, unit.depth) = out;
  }

  std::vector<ag::Var> finest;
  for (int depth = 1; depth <= num_scales_; ++depth) {
    finest.push_back(grid_at(1, depth));
  }
  const ag::Var gated = attention_.forward(ag::concat_channels(finest));
  return head_.forward(gated, out_h, out_w);
}

}  // namespace changedet
