#pragma once

#include <vector>

#include "nudiff/tensor.hpp"

namespace nudiff {

// Low-level layer math on [N,C,H,W] activations with explicit backward
// passes. Backward functions accumulate into parameter gradients (+=) and
// return input gradients, so call sites control zeroing.

// x [N,Cin,H,W] * w [Cout,Cin,Kh,Kw] (+ b [Cout]) -> [N,Cout,Ho,Wo]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride, int pad,
                     Tensor* dx, Tensor* dw, Tensor* db);

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& dy);

// Normalizes over (channels-per-group, H, W) per sample per group, then
// applies optional per-channel gain/bias. ctx (when given) receives xhat and
// the per-(n,group) inverse stddev for the backward pass.
struct GroupNormCtx {
  Tensor xhat;
  std::vector<double> inv_std;
};
Tensor group_norm(const Tensor& x, int groups, const Tensor* gain, const Tensor* bias,
                  GroupNormCtx* ctx);
Tensor group_norm_backward(const Tensor& dy, int groups, const Tensor* gain,
                           const GroupNormCtx& ctx, Tensor* dgain, Tensor* dbias);

Tensor resize_nearest(const Tensor& x, int h2, int w2);
// Scatter-adds dy [N,C,H2,W2] back onto the (h,w) source grid.
Tensor resize_nearest_backward(const Tensor& dy, int h, int w);

// Single-head scaled dot-product attention over flattened spatial positions.
// q/k/v/out weights are 1x1 projections [C,C] with biases [C]; residual added.
struct AttnCtx {
  Tensor q, k, v;     // [N,C,HW]
  Tensor attn;        // [N,HW,HW], rows sum to 1
  Tensor o;           // pre-output-projection [N,C,HW]
};
Tensor attention(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                 const Tensor& bk, const Tensor& wv, const Tensor& bv, const Tensor& wo,
                 const Tensor& bo, AttnCtx* ctx);
Tensor attention_backward(const Tensor& x, const Tensor& dy, const Tensor& wq, const Tensor& wk,
                          const Tensor& wv, const Tensor& wo, const AttnCtx& ctx, Tensor* dwq,
                          Tensor* dbq, Tensor* dwk, Tensor* dbk, Tensor* dwv, Tensor* dbv,
                          Tensor* dwo, Tensor* dbo);

}  // namespace nudiff
