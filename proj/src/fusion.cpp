#include "changedet/fusion.hpp"

#include <cmath>

#include "changedet/errors.hpp"

namespace changedet {

FusionStrategy parse_fusion_strategy(const std::string& name) {
  if (name == "learnable") return FusionStrategy::learnable;
  if (name == "max") return FusionStrategy::max;
  if (name == "mean") return FusionStrategy::mean;
  throw ConfigError("unknown fusion strategy '" + name + "' (expected learnable, max, or mean)");
}

std::string fusion_strategy_name(FusionStrategy strategy) {
  switch (strategy) {
    case FusionStrategy::learnable: return "learnable";
    case FusionStrategy::max: return "max";
    case FusionStrategy::mean: return "mean";
  }
  return "?";
}

Fusion::Fusion(FusionStrategy strategy) : strategy_(strategy) {
  omega_ = register_parameter("omega", ag::Tensor::scalar(0.0f));
}

ag::Var Fusion::forward(const ag::Var& semantic, const ag::Var& difference) {
  if (semantic.shape() != difference.shape()) {
    throw ShapeError("fusion inputs disagree: " + semantic.value().shape_str() + " vs " +
                     difference.value().shape_str());
  }
  switch (strategy_) {
    case FusionStrategy::learnable: {
      const ag::Var w = ag::sigmoid(omega_);
      return ag::add(ag::mul_scalar_var(semantic, w),
                     ag::mul_scalar_var(difference, ag::sub_from(1.0f, w)));
    }
    case FusionStrategy::mean:
      return ag::scale(ag::add(semantic, difference), 0.5f);
    case FusionStrategy::max:
      return ag::emax(semantic, difference);
  }
  throw ConfigError("unreachable fusion strategy");
}

float Fusion::semantic_weight() const {
  return 1.0f / (1.0f + std::exp(-omega_.value()[0]));
}

}  // namespace changedet
