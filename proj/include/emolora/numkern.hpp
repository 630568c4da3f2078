#pragma once

#include <cstddef>
#include <functional>

#include "emolora/tensor.hpp"

// Dense kernels with hand-written backward passes for the handful of layer
// types the toy synthesizer uses. Every product accumulates in double and
// rounds the result to float once, in a fixed order, so results are
// bit-reproducible in single-threaded execution.
namespace emolora::nk {

// a [m x k] * b [k x n]. Per output the sum runs over k in increasing order.
Tensor matmul(const Tensor& a, const Tensor& b);

// x [T x in], w [out x in], b [out] -> x w^T + b, shape [T x out].
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);

// Accumulates dL/dw and dL/db into w.grad / b.grad when those params are
// trainable (frozen params are left untouched) and returns dL/dx.
Tensor linear_backward(const Tensor& x, const Tensor& grad_out, Param& w, Param& b);

// grad_out [T x out] * w [out x in] -> [T x in]. Input gradient only.
Tensor linear_input_grad(const Tensor& grad_out, const Tensor& w);

// Adds grad_out^T x into dst ([out x in]) scaled by `scale`.
void accumulate_outer(const Tensor& grad_out, const Tensor& x, Tensor& dst, double scale = 1.0);

// Same-length zero-padded unfold: x [T x in] -> [T x in*k], column i*k + j
// holds x[t + j - (k-1)/2, i]. This matches the flattening of a kernel
// stored as [out x in x k].
Tensor im2col(const Tensor& x, std::size_t k);
// Adjoint of im2col.
Tensor col2im(const Tensor& cols, std::size_t in, std::size_t k);

// x [T x in], kernel [out x in x k] with odd k, b [out] -> [T x out].
// Cross-correlation over time with (k-1)/2 zero frames on each side.
Tensor conv1d_forward(const Tensor& x, const Tensor& kernel, const Tensor& b);
Tensor conv1d_backward(const Tensor& x, const Tensor& grad_out, Param& kernel, Param& b);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& pre, const Tensor& grad_out);
Tensor tanh(const Tensor& x);
// Takes the tanh *output*.
Tensor tanh_backward(const Tensor& out, const Tensor& grad_out);
Tensor softplus(const Tensor& x);
Tensor softplus_backward(const Tensor& pre, const Tensor& grad_out);

double mse_loss(const Tensor& pred, const Tensor& target);
// d mse / d pred.
Tensor mse_grad(const Tensor& pred, const Tensor& target);

// Central differences of f with respect to every coordinate of p. f must
// read p by reference; each coordinate is perturbed in place and restored
// bitwise. The divisor is the perturbation actually applied after rounding
// to float, computed in double.
Tensor finite_diff_grad(const std::function<double()>& f, Param& p, double eps = 1e-3);

} // namespace emolora::nk
