#pragma once

#include "lpsr/autograd.hpp"

// Differentiable tensor ops recorded on a Tape. Image tensors are NHWC.
// Convolution weights are [KH, KW, Cin, Cout]; transposed-convolution
// weights are [KH, KW, Cout, Cin].

namespace lpsr {

enum class Mode { Train, Eval };

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor);
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a);
template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a);

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x);
template <typename Scalar>
Var<Scalar> leaky_relu(Var<Scalar> x, Scalar slope = Scalar(0.2));
template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x);
template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> x);
// log(p / (1 - p)) with p clamped to [eps, 1 - eps]; zero gradient where clamped.
template <typename Scalar>
Var<Scalar> logit(Var<Scalar> p, Scalar eps);

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Index stride, Index pad);
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, Index stride, Index pad);
template <typename Scalar>
Var<Scalar> conv_transpose2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, Index stride, Index pad);

// Per-channel batch normalization over N, H, W. In Train mode batch
// statistics are used and the running buffers are updated in place.
template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Parameter<Scalar>& running_mean,
                       Parameter<Scalar>& running_var, Mode mode, Scalar momentum = Scalar(0.1),
                       Scalar eps = Scalar(1e-5));

template <typename Scalar>
Var<Scalar> max_pool2(Var<Scalar> x);
template <typename Scalar>
Var<Scalar> upsample_nearest2(Var<Scalar> x);
// Separable Keys cubic (a = -0.5) upsampling by an integer factor, pixel-centre
// aligned with replicated borders. The output is not clamped.
template <typename Scalar>
Var<Scalar> upsample_bicubic(Var<Scalar> x, Index factor);

// [N, H, W, C] -> [N, 1, W, H*C]: stacks every row of a column into channels.
template <typename Scalar>
Var<Scalar> fold_rows(Var<Scalar> x);
template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> x);
template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape);

// x: [N, F], weight: [F, O], bias: [O].
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias);

// x: [N, ..., C], v: [N, C]; v is added to every spatial position of sample n.
template <typename Scalar>
Var<Scalar> add_broadcast(Var<Scalar> x, Var<Scalar> v);

// Row-wise softmax over the trailing dimension.
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x);

// Plain (non-recorded) helpers used by ops and by value-only callers.
namespace kernels {

template <typename Scalar>
RowMatrix<Scalar> im2col(const Tensor<Scalar>& x, Index kh, Index kw, Index stride, Index pad, Index oh, Index ow);

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, Tensor<Scalar>& x, Index kh, Index kw, Index stride, Index pad, Index oh,
            Index ow);

// [n * factor, n] interpolation matrix used by upsample_bicubic along one axis.
template <typename Scalar>
RowMatrix<Scalar> bicubic_matrix(Index n, Index factor);

inline Index conv_out(Index in, Index k, Index stride, Index pad) { return (in + 2 * pad - k) / stride + 1; }

}  // namespace kernels

}  // namespace lpsr
