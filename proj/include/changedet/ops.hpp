#pragma once

#include <vector>

#include "changedet/autograd.hpp"

namespace changedet::ag {

/// 2-D convolution. x: (N,Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout) or undefined.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

/// Stride-2 transposed convolution with a 2x2 kernel (the deconvolution
/// upsampler). x: (N,Cin,H,W), w: (Cin,Cout,2,2), b: (Cout) or undefined.
/// Output: (N,Cout,2H,2W).
Var conv_transpose2x2(const Var& x, const Var& w, const Var& b);

/// Batch normalization over (N,H,W) per channel. In training mode the batch
/// statistics are used and the running buffers are updated in place; in eval
/// mode the running buffers are used.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, float momentum, float eps);

Var relu(const Var& x);
Var sigmoid(const Var& x);

/// Softmax over the channel dimension of an NCHW tensor.
Var softmax_channels(const Var& x);

/// Concatenates NCHW tensors along the channel dimension.
Var concat_channels(const std::vector<Var>& xs);

/// Bilinear resize with corner-aligned sampling (output corners copy input
/// corners exactly).
Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w);

/// (N,C,H,W) -> (N,C) spatial mean.
Var global_avg_pool(const Var& x);

/// Fully connected layer. x: (N,F), w: (O,F), b: (O) or undefined.
Var linear(const Var& x, const Var& w, const Var& b);

/// Multiplies each channel plane of x (N,C,H,W) by s (N,C).
Var channel_scale(const Var& x, const Var& s);

/// Sum of all elements, double-accumulated, as a (1) tensor.
Var sum_all(const Var& x);

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var emax(const Var& a, const Var& b);  // elementwise max; ties route grad to a
Var scale(const Var& x, float c);
Var mul_scalar_var(const Var& x, const Var& s);  // s has shape (1)
Var sub_from(float c, const Var& x);             // c - x

/// Mean binary cross-entropy between probabilities p and a {0,1} target.
/// Probabilities are clamped to [eps, 1-eps]; the sum is accumulated in
/// double. Throws DomainError on non-binary targets.
Var bce_mean(const Var& p, const Tensor& target, float clamp_eps = 1e-7f);

/// Mean categorical cross-entropy. probs: (N,K,H,W) class probabilities,
/// target: (N,H,W) class indices stored as floats.
Var ce_mean(const Var& probs, const Tensor& target, float clamp_eps = 1e-7f);

}  // namespace changedet::ag
