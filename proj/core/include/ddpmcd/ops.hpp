#pragma once

#include <vector>

#include "ddpmcd/tensor.hpp"

namespace ddpmcd {

// Elementwise binary ops with NumPy-style right-aligned broadcasting.
// Operands must share a dtype.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// Elementwise max; on exact ties the gradient routes to the first operand.
Tensor maximum(const Tensor& a, const Tensor& b);

// Scalar variants.
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// Elementwise unary.
Tensor neg(const Tensor& a);
Tensor abs(const Tensor& a);  // subgradient 0 at 0
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdim);
Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdim);

// Shape ops. reshape shares the underlying buffer; the others copy.
Tensor reshape(const Tensor& a, const Shape& new_shape);
Tensor permute(const Tensor& a, const std::vector<int>& dims);
Tensor concat(const std::vector<Tensor>& ts, int axis);
// Nearest-neighbor 2x upsampling of an [N,C,H,W] tensor.
Tensor upsample_nearest2x(const Tensor& a);

// Batched matrix product: [..., m, k] x [..., k, n] -> [..., m, n] with
// broadcasting over the leading batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// 2-D convolution over [N,C,H,W] with weight [Cout,Cin,KH,KW], optional bias
// [Cout], symmetric zero padding. Differentiable w.r.t. input, weight, bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0);
Tensor conv2d_nobias(const Tensor& input, const Tensor& weight,
                     int stride = 1, int padding = 0);

// Numerically stable softmax along `axis`.
Tensor softmax(const Tensor& a, int axis);

// Fused group normalization with per-channel affine: x [N,C,H,W], gamma and
// beta [C], C divisible by groups.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps = 1e-5);

// Mean-reduced losses.
Tensor mse_loss(const Tensor& pred, const Tensor& target);
// logits: [N,C,...]; labels: integer-valued tensor of shape logits minus
// axis 1, entries in [0, C). Mean-reduced cross entropy.
Tensor ce_loss(const Tensor& logits, const Tensor& labels);

// Non-differentiating utility: clamps values into [lo, hi] (detached result).
Tensor clamp(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Broadcast result shape of two operand shapes; DimensionError naming the
// offending axes when incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace ddpmcd
