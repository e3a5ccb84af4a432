#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "changedet/ops.hpp"
#include "changedet/rng.hpp"

namespace changedet::nn {

using ag::Tensor;
using ag::Var;

/// Base class providing a named registry for parameters, buffers and
/// submodules, a train/eval flag, and state-dict (de)serialization hooks.
class Module {
 public:
  virtual ~Module() = default;
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  void set_training(bool on) {
    training_ = on;
    for (auto& [name, m] : children_) m->set_training(on);
  }
  bool training() const { return training_; }

  /// Flat list of (dotted-name, parameter) pairs, depth first.
  std::vector<std::pair<std::string, Var>> named_parameters(const std::string& prefix = "") const;
  std::vector<Var> parameters() const;

  /// Parameters plus persistent buffers (e.g. batch-norm running stats).
  void collect_state(const std::string& prefix, std::map<std::string, Tensor>& out) const;
  /// Loads tensors saved by collect_state; throws ShapeError on missing or
  /// mismatched entries.
  void load_state(const std::string& prefix, const std::map<std::string, Tensor>& in);

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

 protected:
  Var& register_parameter(const std::string& name, Tensor init);
  Tensor& register_buffer(const std::string& name, Tensor init);
  void register_module(const std::string& name, Module& m) { children_.emplace_back(name, &m); }

 private:
  bool training_ = true;
  std::vector<std::pair<std::string, std::unique_ptr<Var>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
};

/// 2-D convolution layer. Bias is omitted when the layer is immediately
/// followed by batch norm (the BN shift makes it redundant).
class Conv2d : public Module {
 public:
  Conv2d(int64_t in_ch, int64_t out_ch, int kernel, int stride, Rng& rng, bool bias = true);

  Var forward(const Var& x) const { return ag::conv2d(x, weight_, bias_, stride_, pad_); }
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }

 private:
  int stride_, pad_;
  Var weight_, bias_;
};

/// Stride-2 deconvolution upsampler (2x2 kernel).
class ConvTranspose2d : public Module {
 public:
  ConvTranspose2d(int64_t in_ch, int64_t out_ch, Rng& rng);
  Var forward(const Var& x) const { return ag::conv_transpose2x2(x, weight_, bias_); }

 private:
  Var weight_, bias_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int64_t channels, float momentum = 0.1f, float eps = 1e-5f);
  Var forward(const Var& x) {
    return ag::batch_norm2d(x, gamma_, beta_, *running_mean_, *running_var_, training(), momentum_,
                            eps_);
  }

 private:
  float momentum_, eps_;
  Var gamma_, beta_;
  Tensor* running_mean_;  // aliases the registered buffers
  Tensor* running_var_;
};

class Linear : public Module {
 public:
  Linear(int64_t in_f, int64_t out_f, Rng& rng);
  Var forward(const Var& x) const { return ag::linear(x, weight_, bias_); }

 private:
  Var weight_, bias_;
};

/// conv 3x3 + batch norm + ReLU, the decoding-unit building block.
class ConvBlock : public Module {
 public:
  ConvBlock(int64_t in_ch, int64_t out_ch, Rng& rng, int kernel = 3);
  Var forward(const Var& x) {
    return ag::relu(bn_.forward(conv_.forward(x)));
  }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

/// Squeeze-excitation channel gate: global average pool, two-layer
/// bottleneck, sigmoid, per-channel rescale.
class ChannelAttention : public Module {
 public:
  ChannelAttention(int64_t channels, int reduction, Rng& rng);
  Var forward(const Var& x) const;
  /// The gate alone, shape (N, C), values in (0, 1).
  Var gate(const Var& x) const;

 private:
  Linear fc1_, fc2_;
};

}  // namespace changedet::nn
