#pragma once

#include "okd/tensor.hpp"

namespace okd {

// Differentiable array operations. Every function returns an untracked tensor
// when none of its operands is tracked, otherwise it records a node on the
// operands' tape.

/// Dilated 2-D cross-correlation (no kernel flip).
/// input [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] -> [B,Cout,H',W'] with
/// H' = H + 2*padding - dilation*(k-1).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Index dilation = 1, Index padding = 0);

/// Windowed max. Gradient goes to the first maximum in row-major window order.
Tensor maxpool2d(const Tensor& input, Index kernel = 2, Index stride = 2);

/// Average over bins [floor(i*H/out_h), ceil((i+1)*H/out_h)) per axis.
Tensor adaptive_avg_pool(const Tensor& input, Index out_h, Index out_w);

/// Uniform window average, no padding.
Tensor avg_pool2d(const Tensor& input, Index kernel, Index stride = 1);

/// [B,M,K] x [B,K,N] -> [B,M,N]
Tensor bmm(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

// Binary ops take equal shapes, or one operand with a single element which is
// broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scalar_mul(const Tensor& x, Scalar c);
Tensor add_scalar(const Tensor& x, Scalar c);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Largest element; the gradient goes to its first occurrence.
Tensor max_value(const Tensor& x);
/// Sum over one axis; the axis is kept with extent 1.
Tensor sum(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, Shape shape);
/// Swaps the last two axes.
Tensor transpose2d_last(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& x, Scalar c) { return scalar_mul(x, c); }
inline Tensor operator*(Scalar c, const Tensor& x) { return scalar_mul(x, c); }
inline Tensor operator+(const Tensor& x, Scalar c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x) { return scalar_mul(x, -1.0); }

/// Number of threads op kernels may use; read once from OKD_THREADS.
int kernel_threads();

}  // namespace okd
