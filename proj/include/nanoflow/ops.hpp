#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "nanoflow/tensor.hpp"

namespace nf {

// Differentiable primitives. Every op checks its result for NaN/Inf and throws
// NumericError naming the op; domain violations throw DomainError.

// Linear algebra (2-D).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// log |det W| of a square matrix; gradient W^{-T}.
Tensor logabsdet(const Tensor& w);

// Convolution on channels-last feature maps.
//   x: [B, H, W, Cin], kernel: [kh, kw, Cin, Cout] -> [B, H, W, Cout]
// Width is always zero-padded "same" (kw odd). Height is "same" (kh odd) or
// causal: output row h sees input rows h - (kh-1)*dilation_h ... h.
enum class Padding { Same, Causal };

struct ConvOptions {
  std::size_t dilation_h = 1;
  std::size_t dilation_w = 1;
  Padding pad_h = Padding::Same;
};

Tensor conv2d(const Tensor& x, const Tensor& kernel, const ConvOptions& opts = {});
// x: [B, L, Cin], kernel: [k, Cin, Cout].
Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t dilation, Padding pad);

enum class UnaryOp { Exp, Log, Tanh, Sigmoid, Neg, Relu, Softplus, Sqrt, Square };
Tensor unary(UnaryOp op, const Tensor& x);

inline Tensor exp(const Tensor& x) { return unary(UnaryOp::Exp, x); }
inline Tensor log(const Tensor& x) { return unary(UnaryOp::Log, x); }
inline Tensor tanh(const Tensor& x) { return unary(UnaryOp::Tanh, x); }
inline Tensor sigmoid(const Tensor& x) { return unary(UnaryOp::Sigmoid, x); }
inline Tensor neg(const Tensor& x) { return unary(UnaryOp::Neg, x); }
inline Tensor relu(const Tensor& x) { return unary(UnaryOp::Relu, x); }
inline Tensor softplus(const Tensor& x) { return unary(UnaryOp::Softplus, x); }
inline Tensor sqrt(const Tensor& x) { return unary(UnaryOp::Sqrt, x); }
inline Tensor square(const Tensor& x) { return unary(UnaryOp::Square, x); }

// b may equal a's shape, be a per-channel vector [C] matching a's last axis,
// be a batch-broadcast [1, ...] matching a's trailing axes, or hold one value.
enum class BinaryOp { Add, Sub, Mul, Div };
Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b);

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryOp::Div, a, b); }

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
// Gradient is zero where the input was clipped.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [B, ...] -> [B]
Tensor sum_except_batch(const Tensor& x);

// out[i] = x[source[i]], or 0 where source[i] < 0. Gradient scatters back.
using GatherIndex = std::shared_ptr<const std::vector<std::ptrdiff_t>>;
Tensor gather(const Tensor& x, Shape out_shape, GatherIndex source);

// Along the last axis.
Tensor softmax_last(const Tensor& x);
Tensor cumsum_last(const Tensor& x);
// x: [..., m], index: one entry per leading position -> [...]
Tensor take_last(const Tensor& x, std::span<const std::size_t> index);

// out = mask ? a : b elementwise; a and b share a shape.
Tensor where(std::span<const unsigned char> mask, const Tensor& a, const Tensor& b);

namespace linalg {

// Row-major n x n LU with partial pivoting; returns false when singular.
struct LU {
  std::size_t n = 0;
  std::vector<double> lu;
  std::vector<std::size_t> perm;
  int sign = 1;
};
bool lu_decompose(std::span<const double> a, std::size_t n, LU& out);
double lu_logabsdet(const LU& lu);
std::vector<double> lu_inverse(const LU& lu);
std::vector<double> inverse(std::span<const double> a, std::size_t n);

}  // namespace linalg

}  // namespace nf
