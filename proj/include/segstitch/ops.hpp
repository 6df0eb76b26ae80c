#pragma once

#include <optional>

#include "segstitch/tensor.hpp"

namespace segstitch {

// Tensor operations. Every function is differentiable: when an input sits on
// a live tape the op appends a backward record, and gradients flow on
// backward(). Binary ops broadcast numpy-style over trailing axes.

// --- elementwise -----------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> scale(const TensorT<T>& x, T s);
template <typename T>
TensorT<T> neg(const TensorT<T>& x);
template <typename T>
TensorT<T> sin_op(const TensorT<T>& x);
template <typename T>
TensorT<T> square(const TensorT<T>& x);
template <typename T>
TensorT<T> tanh_op(const TensorT<T>& x);
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x);

template <typename T>
TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <typename T>
TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <typename T>
TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }
template <typename T>
TensorT<T> operator-(const TensorT<T>& x) { return neg(x); }

// --- linear algebra ---------------------------------------------------------

// a [..., m, k] x b [..., k, n] -> [..., m, n]. Leading axes must match
// exactly, or b may be rank-2 and is then shared across a's batch.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

// Softmax over the last axis, max-subtracted for overflow safety.
template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x);

// --- reductions --------------------------------------------------------------

enum class Reduce { kSum, kMean };

template <typename T>
TensorT<T> reduce(const TensorT<T>& x, Reduce op, const std::vector<int>& axes,
                  bool keepdims = false);
template <typename T>
TensorT<T> sum_all(const TensorT<T>& x);
template <typename T>
TensorT<T> mean_all(const TensorT<T>& x);

// --- shape ops ---------------------------------------------------------------

// One extent may be -1 and is inferred.
template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape);
template <typename T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm);
template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x);
template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis);
template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int64_t start, int64_t len);
// Zero padding, lo/hi per axis.
template <typename T>
TensorT<T> pad(const TensorT<T>& x, const std::vector<int64_t>& lo,
               const std::vector<int64_t>& hi);

// Token grid [gx*gy*gz, C] -> [windows*wx*wy*wz, C] grouped by window. The
// window extents must tile the grid exactly. window_merge inverts.
struct WindowLayout {
  int64_t gx = 1, gy = 1, gz = 1;  // token grid
  int64_t wx = 1, wy = 1, wz = 1;  // window extents
  int64_t tokens() const { return gx * gy * gz; }
  int64_t window_tokens() const { return wx * wy * wz; }
  int64_t windows() const { return tokens() / window_tokens(); }
  void validate() const;
};

template <typename T>
TensorT<T> window_partition(const TensorT<T>& x, const WindowLayout& layout);
template <typename T>
TensorT<T> window_merge(const TensorT<T>& x, const WindowLayout& layout);

// --- convolution / normalization ---------------------------------------------

// x [B,Cin,H,W,D], w [Cout,Cin,k,k,k] with k odd, bias [Cout].
template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& bias, int stride, int padding);

// Adjoint of conv3d at padding 0: x [B,Cout,H,W,D], w [Cout,Cin,k,k,k],
// bias [Cin]; output extents (H-1)*stride + k.
template <typename T>
TensorT<T> conv_transpose3d(const TensorT<T>& x, const TensorT<T>& w,
                            const TensorT<T>& bias, int stride);

// x [B,C,...], per-sample per-group normalization, then gamma/beta per channel.
template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, int groups, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps = T(1e-5));

// x [..., C] normalized per row over the last axis.
template <typename T>
TensorT<T> layer_norm_lastdim(const TensorT<T>& x, const TensorT<T>& gamma,
                              const TensorT<T>& beta, T eps = T(1e-5));

// --- autodiff ----------------------------------------------------------------

// Seeds d(root)/d(root)=1 and replays the tape. Root must be scalar.
// Repeated calls without zero_grad accumulate.
template <typename T>
void backward(TensorT<T>& root);

// --- misc --------------------------------------------------------------------

template <typename T>
TensorT<T> random_uniform(Shape shape, Rng& rng, T lo = T(-1), T hi = T(1));
template <typename T>
TensorT<T> random_normal(Shape shape, Rng& rng, T sigma = T(1));
template <typename T>
TensorT<T> truncated_normal(Shape shape, Rng& rng, T sigma);

// Throws if any element is non-finite (used by checked mode and the trainer).
template <typename T>
void require_finite(const TensorT<T>& x, const char* where);

template <typename T>
bool all_finite(const TensorT<T>& x);

// argmax over axis 1 of [B,K,...] -> int labels [B,...]
template <typename T>
std::vector<uint8_t> argmax_channels(const TensorT<T>& logits);

}  // namespace segstitch
