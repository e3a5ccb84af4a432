#pragma once

#include <string>

#include "changedet/nn.hpp"

namespace changedet {

enum class FusionStrategy { learnable, max, mean };

FusionStrategy parse_fusion_strategy(const std::string& name);
std::string fusion_strategy_name(FusionStrategy strategy);

// Combines the two branch probability maps. The learnable strategy takes the
// convex combination sigmoid(omega) * semantic + (1 - sigmoid(omega)) *
// difference with a single trainable logit omega, initialized to 0 so
// training starts at equal weighting.
class Fusion : public nn::Module {
 public:
  explicit Fusion(FusionStrategy strategy);

  ag::Var forward(const ag::Var& semantic, const ag::Var& difference);

  FusionStrategy strategy() const { return strategy_; }
  ag::Var& omega() { return omega_; }
  float semantic_weight() const;  // sigmoid(omega), the current mixing weight

 private:
  FusionStrategy strategy_;
  ag::Var omega_;
};

}  // namespace changedet
