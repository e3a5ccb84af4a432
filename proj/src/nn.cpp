#include "changedet/nn.hpp"

#include <cmath>

#include "changedet/errors.hpp"

namespace changedet::nn {

namespace {

Tensor uniform_init(std::vector<int64_t> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

std::vector<std::pair<std::string, Var>> Module::named_parameters(const std::string& prefix) const {
  std::vector<std::pair<std::string, Var>> out;
  for (const auto& [name, p] : params_) out.emplace_back(prefix + name, *p);
  for (const auto& [name, m] : children_) {
    auto sub = m->named_parameters(prefix + name + ".");
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<Var> Module::parameters() const {
  std::vector<Var> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

void Module::collect_state(const std::string& prefix, std::map<std::string, Tensor>& out) const {
  for (const auto& [name, p] : params_) out[prefix + name] = p->value();
  for (const auto& [name, b] : buffers_) out[prefix + name] = *b;
  for (const auto& [name, m] : children_) m->collect_state(prefix + name + ".", out);
}

void Module::load_state(const std::string& prefix, const std::map<std::string, Tensor>& in) {
  auto fetch = [&](const std::string& key, const Tensor& current) -> const Tensor& {
    auto it = in.find(key);
    if (it == in.end()) throw ShapeError("state dict missing tensor '" + key + "'");
    if (it->second.shape() != current.shape()) {
      throw ShapeError("state dict tensor '" + key + "' has shape " + it->second.shape_str() +
                       ", expected " + current.shape_str());
    }
    return it->second;
  };
  for (auto& [name, p] : params_) p->value() = fetch(prefix + name, p->value());
  for (auto& [name, b] : buffers_) *b = fetch(prefix + name, *b);
  for (auto& [name, m] : children_) m->load_state(prefix + name + ".", in);
}

Var& Module::register_parameter(const std::string& name, Tensor init) {
  params_.emplace_back(name, std::make_unique<Var>(Var::leaf(std::move(init), true)));
  return *params_.back().second;
}

Tensor& Module::register_buffer(const std::string& name, Tensor init) {
  buffers_.emplace_back(name, std::make_unique<Tensor>(std::move(init)));
  return *buffers_.back().second;
}

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int kernel, int stride, Rng& rng, bool bias)
    : stride_(stride), pad_(kernel / 2) {
  const double fan_in = static_cast<double>(in_ch) * kernel * kernel;
  const double bound = std::sqrt(6.0 / fan_in);
  weight_ = register_parameter("weight", uniform_init({out_ch, in_ch, kernel, kernel}, bound, rng));
  if (bias) {
    bias_ = register_parameter("bias", uniform_init({out_ch}, 1.0 / std::sqrt(fan_in), rng));
  }
}

ConvTranspose2d::ConvTranspose2d(int64_t in_ch, int64_t out_ch, Rng& rng) {
  const double fan_in = static_cast<double>(in_ch);  // each output sees one input pixel
  const double bound = std::sqrt(6.0 / fan_in);
  weight_ = register_parameter("weight", uniform_init({in_ch, out_ch, 2, 2}, bound, rng));
  bias_ = register_parameter("bias", uniform_init({out_ch}, 1.0 / std::sqrt(fan_in), rng));
}

BatchNorm2d::BatchNorm2d(int64_t channels, float momentum, float eps)
    : momentum_(momentum), eps_(eps) {
  gamma_ = register_parameter("weight", Tensor({channels}, 1.0f));
  beta_ = register_parameter("bias", Tensor({channels}, 0.0f));
  running_mean_ = &register_buffer("running_mean", Tensor({channels}, 0.0f));
  running_var_ = &register_buffer("running_var", Tensor({channels}, 1.0f));
}

Linear::Linear(int64_t in_f, int64_t out_f, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_f));
  weight_ = register_parameter("weight", uniform_init({out_f, in_f}, bound, rng));
  bias_ = register_parameter("bias", uniform_init({out_f}, 1.0 / std::sqrt(static_cast<double>(in_f)), rng));
}

ConvBlock::ConvBlock(int64_t in_ch, int64_t out_ch, Rng& rng, int kernel)
    : conv_(in_ch, out_ch, kernel, 1, rng, /*bias=*/false), bn_(out_ch) {
  register_module("conv", conv_);
  register_module("bn", bn_);
}

ChannelAttention::ChannelAttention(int64_t channels, int reduction, Rng& rng)
    : fc1_(channels, std::max<int64_t>(channels / std::max(reduction, 1), 4), rng),
      fc2_(std::max<int64_t>(channels / std::max(reduction, 1), 4), channels, rng) {
  register_module("fc1", fc1_);
  register_module("fc2", fc2_);
}

Var ChannelAttention::gate(const Var& x) const {
  return ag::sigmoid(fc2_.forward(ag::relu(fc1_.forward(ag::global_avg_pool(x)))));
}

Var ChannelAttention::forward(const Var& x) const { return ag::channel_scale(x, gate(x)); }

}  // namespace changedet::nn
