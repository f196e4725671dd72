#include "nanoflow/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nanoflow/errors.hpp"
#include "nanoflow/ops.hpp"

namespace nf {

namespace {

constexpr double kMinDerivative = 1e-3;
// softplus(kDerivativeShift) + kMinDerivative == 1, so zero raw derivatives
// give unit slopes.
const double kDerivativeShift = std::log(std::expm1(1.0 - kMinDerivative));

double softplus_scalar(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Tensor zeros_batch(std::size_t batch) { return Tensor(Shape{batch}, 0.0); }

Shape params_shape(const Shape& x_shape, std::size_t arity) {
  Shape s = x_shape;
  s.back() *= arity;
  return s;
}

void check_params(const Tensor& raw, const Shape& x_shape, std::size_t arity) {
  if (raw.shape() != params_shape(x_shape, arity))
    throw DimensionError("estimator produced " + shape_str(raw.shape()) + ", coupling needs " +
                         shape_str(params_shape(x_shape, arity)));
}

}  // namespace

// ---------------------------------------------------------------------------
// GroupPartition

GroupPartition::GroupPartition(std::size_t groups, std::size_t axis, std::size_t axis_length)
    : groups_(groups), axis_(axis), length_(axis_length) {
  if (groups < 2) throw ConfigError("group count must be at least 2");
  if (axis_length % groups != 0)
    throw ConfigError("group count " + std::to_string(groups) + " does not divide axis length " +
                      std::to_string(axis_length));
}

std::vector<std::size_t> GroupPartition::element_groups(const Shape& shape) const {
  if (axis_ >= shape.size() || shape[axis_] != length_)
    throw DimensionError("partition axis does not match tensor shape " + shape_str(shape));
  std::size_t inner = 1;
  for (std::size_t d = axis_ + 1; d < shape.size(); ++d) inner *= shape[d];
  std::vector<std::size_t> out(shape_numel(shape));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = group_of((i / inner) % length_);
  return out;
}

// ---------------------------------------------------------------------------
// affine coupling

CouplingParams split_affine_params(const Tensor& raw, const Shape& x_shape) {
  check_params(raw, x_shape, 2);
  const std::size_t n = shape_numel(x_shape);
  const std::size_t sizes[] = {1, 1};
  auto parts = split(reshape(raw, {n, 2}), 1, sizes);
  return {reshape(parts[0], x_shape), reshape(parts[1], x_shape)};
}

FlowResult affine_forward(const Tensor& x, const GroupPartition& partition, const EstimatorFn& estimator) {
  partition.element_groups(x.shape());  // validates the layout
  CouplingParams p = split_affine_params(estimator(x), x.shape());
  Tensor log_sigma = clamp(p.log_sigma, -kLogSigmaBound, kLogSigmaBound);
  Tensor z = add(mul(x, exp(log_sigma)), p.mu);
  return {z, sum_except_batch(log_sigma)};
}

Tensor affine_inverse(const Tensor& z, const GroupPartition& partition, const EstimatorFn& estimator) {
  NoGradGuard no_grad;
  const auto groups = partition.element_groups(z.shape());
  std::vector<double> x(z.numel(), 0.0);
  for (std::size_t g = 0; g < partition.groups(); ++g) {
    CouplingParams p = split_affine_params(estimator(Tensor(z.shape(), x)), z.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (groups[i] != g) continue;
      const double ls = p.log_sigma.data()[i];
      if (std::abs(ls) > kLogSigmaBound)
        throw NumericError("affine inverse: |log sigma| = " + std::to_string(std::abs(ls)) + " exceeds 30");
      x[i] = (z.data()[i] - p.mu.data()[i]) / std::exp(ls);
    }
  }
  return Tensor(z.shape(), std::move(x));
}

// ---------------------------------------------------------------------------
// rational-quadratic spline

namespace {

// Knot positions -B + cumsum(sizes), first pinned to -B and last to +B.
Tensor knot_positions(const Tensor& sizes, double bound) {
  const std::size_t n = sizes.dim(0), bins = sizes.dim(1);
  const Tensor parts[] = {Tensor({n, 1}, 0.0), cumsum_last(sizes)};
  Tensor knots = add_scalar(concat(parts, 1), -bound);
  std::vector<unsigned char> last(n * (bins + 1), 0);
  for (std::size_t r = 0; r < n; ++r) last[r * (bins + 1) + bins] = 1;
  return where(last, Tensor({n, bins + 1}, bound), knots);
}

// Scalar mirror of the tensor path above, operation for operation, so the
// inverse sees bit-identical knots.
struct ScalarKnots {
  std::vector<double> xs, ys, ds;
};

void softmax_scaled(const double* raw, std::size_t m, double scale, std::vector<double>& out) {
  out.resize(m);
  const double mx = *std::max_element(raw, raw + m);
  double s = 0.0;
  for (std::size_t j = 0; j < m; ++j) s += (out[j] = std::exp(raw[j] - mx));
  for (std::size_t j = 0; j < m; ++j) out[j] /= s;
  for (std::size_t j = 0; j < m; ++j) out[j] *= scale;
}

void scalar_knots(const double* raw, const SplineOptions& o, ScalarKnots& k) {
  const std::size_t b = o.bins;
  const double bound = o.tail_bound;
  std::vector<double> w, h;
  softmax_scaled(raw, b, 2.0 * bound, w);
  softmax_scaled(raw + b, b, 2.0 * bound, h);
  k.xs.assign(b + 1, 0.0);
  k.ys.assign(b + 1, 0.0);
  double cw = 0.0, ch = 0.0;
  k.xs[0] = 0.0 + -bound;
  k.ys[0] = 0.0 + -bound;
  for (std::size_t j = 0; j < b; ++j) {
    k.xs[j + 1] = (cw += w[j]) + -bound;
    k.ys[j + 1] = (ch += h[j]) + -bound;
  }
  k.xs[b] = bound;
  k.ys[b] = bound;
  k.ds.assign(b + 1, 1.0);
  for (std::size_t j = 0; j + 1 < b; ++j) k.ds[j + 1] = softplus_scalar(raw[2 * b + j] + kDerivativeShift) + kMinDerivative;
}

void check_spline_args(const Tensor& x, const Tensor& raw, const SplineOptions& o) {
  if (o.bins < 2) throw ConfigError("spline needs at least 2 bins");
  if (!(o.tail_bound > 0.0)) throw ConfigError("spline tail bound must be positive");
  if (raw.rank() != 2 || raw.dim(0) != x.numel() || raw.dim(1) != o.arity())
    throw DimensionError("spline parameters must be [N, 3*bins-1], got " + shape_str(raw.shape()));
}

}  // namespace

std::pair<Tensor, Tensor> rq_spline(const Tensor& x_in, const Tensor& raw, const SplineOptions& o) {
  check_spline_args(x_in, raw, o);
  const std::size_t n = x_in.numel(), b = o.bins;
  const double bound = o.tail_bound;
  Tensor x = reshape(x_in, {n});

  const std::size_t sizes[] = {b, b, b - 1};
  auto parts = split(raw, 1, sizes);
  Tensor widths = mul_scalar(softmax_last(parts[0]), 2.0 * bound);
  Tensor heights = mul_scalar(softmax_last(parts[1]), 2.0 * bound);
  Tensor inner = add_scalar(softplus(add_scalar(parts[2], kDerivativeShift)), kMinDerivative);
  const Tensor dparts[] = {Tensor({n, 1}, 1.0), inner, Tensor({n, 1}, 1.0)};
  Tensor derivs = concat(dparts, 1);
  Tensor kx = knot_positions(widths, bound);
  Tensor ky = knot_positions(heights, bound);

  std::vector<unsigned char> inside(n);
  std::vector<std::size_t> bin(n), next(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    inside[i] = v >= -bound && v <= bound;
    const double xin = inside[i] ? v : 0.0;
    std::size_t k = 0;
    // strict comparison: a value sitting on a knot belongs to the left bin
    for (std::size_t j = 1; j < b; ++j) k += kx.data()[i * (b + 1) + j] < xin;
    bin[i] = k;
    next[i] = k + 1;
  }
  Tensor zero({n}, 0.0);
  Tensor xin = where(inside, x, zero);
  Tensor xk = take_last(kx, bin), xk1 = take_last(kx, next);
  Tensor yk = take_last(ky, bin), yk1 = take_last(ky, next);
  Tensor dk = take_last(derivs, bin), dk1 = take_last(derivs, next);
  Tensor wk = sub(xk1, xk), hk = sub(yk1, yk);
  Tensor s = div(hk, wk);
  Tensor xi = div(sub(xin, xk), wk);
  Tensor one_minus = add_scalar(neg(xi), 1.0);
  Tensor xi_om = mul(xi, one_minus);
  Tensor den = add(s, mul(sub(add(dk1, dk), mul_scalar(s, 2.0)), xi_om));
  Tensor num = mul(hk, add(mul(s, square(xi)), mul(dk, xi_om)));
  Tensor y_spline = add(yk, div(num, den));
  Tensor dnum = mul(square(s), add(add(mul(dk1, square(xi)), mul(mul_scalar(s, 2.0), xi_om)), mul(dk, square(one_minus))));
  Tensor log_deriv = sub(log(dnum), mul_scalar(log(den), 2.0));
  return {where(inside, y_spline, x), where(inside, log_deriv, zero)};
}

Tensor rq_spline_inverse_elementwise(const Tensor& y_in, const Tensor& raw, const SplineOptions& o) {
  check_spline_args(y_in, raw, o);
  const std::size_t n = y_in.numel(), b = o.bins, arity = o.arity();
  const double bound = o.tail_bound;
  std::vector<double> out(n);
  ScalarKnots k;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = y_in.data()[i];
    if (y < -bound || y > bound) {
      out[i] = y;
      continue;
    }
    scalar_knots(raw.data().data() + i * arity, o, k);
    std::size_t j = 0;
    for (std::size_t t = 1; t < b; ++t) j += k.ys[t] < y;
    const double wk = k.xs[j + 1] - k.xs[j], hk = k.ys[j + 1] - k.ys[j];
    const double s = hk / wk;
    const double dk = k.ds[j], dk1 = k.ds[j + 1];
    const double dy = y - k.ys[j];
    const double mix = dk1 + dk - 2.0 * s;
    const double a = hk * (s - dk) + dy * mix;
    const double bq = hk * dk - dy * mix;
    const double c = -s * dy;
    const double disc = std::max(bq * bq - 4.0 * a * c, 0.0);
    const double xi = (2.0 * c) / (-bq - std::sqrt(disc));
    out[i] = xi * wk + k.xs[j];
  }
  return Tensor(y_in.shape(), std::move(out));
}

FlowResult rq_spline_forward(const Tensor& x, const GroupPartition& partition, const EstimatorFn& estimator,
                             const SplineOptions& opts) {
  partition.element_groups(x.shape());
  Tensor raw = estimator(x);
  check_params(raw, x.shape(), opts.arity());
  auto [y, log_deriv] = rq_spline(x, reshape(raw, {x.numel(), opts.arity()}), opts);
  return {reshape(y, x.shape()), sum_except_batch(reshape(log_deriv, x.shape()))};
}

Tensor rq_spline_inverse(const Tensor& z, const GroupPartition& partition, const EstimatorFn& estimator,
                         const SplineOptions& opts) {
  NoGradGuard no_grad;
  const auto groups = partition.element_groups(z.shape());
  std::vector<double> x(z.numel(), 0.0);
  for (std::size_t g = 0; g < partition.groups(); ++g) {
    Tensor raw = estimator(Tensor(z.shape(), x));
    check_params(raw, z.shape(), opts.arity());
    Tensor rec = rq_spline_inverse_elementwise(z, reshape(raw, {z.numel(), opts.arity()}), opts);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (groups[i] == g) x[i] = rec.data()[i];
  }
  return Tensor(z.shape(), std::move(x));
}

// ---------------------------------------------------------------------------
// actnorm

FlowResult actnorm_forward(const Tensor& x, const Tensor& log_scale, const Tensor& bias) {
  const std::size_t C = x.shape().back();
  if (log_scale.numel() != C || bias.numel() != C) throw DimensionError("actnorm parameters must match channels");
  const std::size_t B = x.dim(0);
  const double positions = static_cast<double>(x.numel() / (B * C));
  Tensor z = mul(add(x, bias), exp(log_scale));
  Tensor ld = add(zeros_batch(B), mul_scalar(sum(log_scale), positions));
  return {z, ld};
}

Tensor actnorm_inverse(const Tensor& z, const Tensor& log_scale, const Tensor& bias) {
  NoGradGuard no_grad;
  return sub(mul(z, exp(neg(log_scale))), bias);
}

void ActNorm::initialize(const Tensor& x) {
  const std::size_t C = x.shape().back();
  const std::size_t rows = x.numel() / C;
  std::vector<double> m(C, 0.0), v(C, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) m[c] += x.data()[r * C + c];
  for (auto& e : m) e /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = x.data()[r * C + c] - m[c];
      v[c] += d * d;
    }
  auto ls = log_scale_.mutable_data();
  auto bs = bias_.mutable_data();
  for (std::size_t c = 0; c < C; ++c) {
    bs[c] = -m[c];
    ls[c] = -0.5 * std::log(std::max(v[c] / static_cast<double>(rows), 1e-6));
  }
}

// ---------------------------------------------------------------------------
// permutations

Tensor reverse_groups(const Tensor& x, const GroupPartition& partition) {
  const auto& shape = x.shape();
  partition.element_groups(shape);
  std::size_t inner = 1;
  for (std::size_t d = partition.axis() + 1; d < shape.size(); ++d) inner *= shape[d];
  const std::size_t len = partition.axis_length(), gs = partition.group_size(), G = partition.groups();
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t outer = i / (inner * len);
    const std::size_t pos = (i / inner) % len;
    const std::size_t src_pos = (G - 1 - pos / gs) * gs + pos % gs;
    (*idx)[i] = static_cast<std::ptrdiff_t>((outer * len + src_pos) * inner + i % inner);
  }
  return gather(x, shape, idx);
}

FlowResult ReversePermutation::forward(const Tensor& x) const {
  return {reverse_groups(x, partition_), zeros_batch(x.dim(0))};
}

namespace {

void check_invertible(const Tensor& weight) {
  if (weight.rank() != 2 || weight.dim(0) != weight.dim(1))
    throw DimensionError("invertible 1x1 convolution needs a square weight");
  linalg::LU lu;
  if (!linalg::lu_decompose(weight.data(), weight.dim(0), lu) || linalg::lu_logabsdet(lu) < std::log(1e-12))
    throw InvertibilityError("invertible 1x1 convolution weight is singular (|det W| <= 1e-12)");
}

}  // namespace

FlowResult inv_conv_forward(const Tensor& x, const Tensor& weight) {
  check_invertible(weight);
  const std::size_t C = x.shape().back();
  if (weight.dim(0) != C) throw DimensionError("inv_conv weight does not match channel count");
  const std::size_t rows = x.numel() / C, B = x.dim(0);
  Tensor z = reshape(matmul(reshape(x, {rows, C}), transpose(weight)), x.shape());
  Tensor ld = add(zeros_batch(B), mul_scalar(logabsdet(weight), static_cast<double>(rows / B)));
  return {z, ld};
}

Tensor inv_conv_inverse(const Tensor& z, const Tensor& weight) {
  check_invertible(weight);
  NoGradGuard no_grad;
  const std::size_t C = z.shape().back();
  Tensor inv({C, C}, linalg::inverse(weight.data(), C));
  return reshape(matmul(reshape(z, {z.numel() / C, C}), transpose(inv)), z.shape());
}

// ---------------------------------------------------------------------------
// multi-scale

Tensor squeeze2x2(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("squeeze expects [B,H,W,C]");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H % 2 || W % 2) throw DimensionError("squeeze needs even spatial dims, got " + shape_str(x.shape()));
  const std::size_t h = H / 2, w = W / 2;
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(x.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t q = 0; q < 4; ++q)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t y = 2 * i + q / 2, xx = 2 * j + q % 2;
            (*idx)[o++] = static_cast<std::ptrdiff_t>(((b * H + y) * W + xx) * C + c);
          }
  return gather(x, {B, h, w, 4 * C}, idx);
}

Tensor unsqueeze2x2(const Tensor& z) {
  if (z.rank() != 4 || z.dim(3) % 4) throw DimensionError("unsqueeze expects [B,h,w,4C]");
  const std::size_t B = z.dim(0), h = z.dim(1), w = z.dim(2), C = z.dim(3) / 4;
  const std::size_t H = 2 * h, W = 2 * w;
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(z.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t q = (y % 2) * 2 + xx % 2;
          (*idx)[((b * H + y) * W + xx) * C + c] =
              static_cast<std::ptrdiff_t>(((b * h + y / 2) * w + xx / 2) * 4 * C + q * C + c);
        }
  return gather(z, {B, H, W, C}, idx);
}

FlowResult Squeeze::forward(const Tensor& x) const { return {squeeze2x2(x), zeros_batch(x.dim(0))}; }

Tensor standard_normal_log_prob(const Tensor& z) {
  const double per_elem = -0.5 * std::log(2.0 * std::numbers::pi);
  const std::size_t per_item = z.numel() / z.dim(0);
  return add_scalar(mul_scalar(sum_except_batch(square(z)), -0.5), per_elem * static_cast<double>(per_item));
}

FactorOutResult factor_out(const Tensor& x) {
  const std::size_t C = x.shape().back();
  if (C % 2) throw DimensionError("factor_out needs an even channel count");
  const std::size_t sizes[] = {C / 2, C / 2};
  auto parts = split(x, x.rank() - 1, sizes);
  return {parts[0], parts[1], standard_normal_log_prob(parts[1])};
}

Tensor unfactor(const Tensor& kept, const Tensor& factored) {
  const Tensor parts[] = {kept, factored};
  return concat(parts, kept.rank() - 1);
}

// ---------------------------------------------------------------------------
// relayout

Relayout::Relayout(Shape in_item, Shape out_item, std::vector<std::ptrdiff_t> out_to_in)
    : in_item_(std::move(in_item)), out_item_(std::move(out_item)), forward_index_(std::move(out_to_in)) {
  const std::size_t n = shape_numel(in_item_);
  if (shape_numel(out_item_) != n || forward_index_.size() != n)
    throw DimensionError("relayout must be a permutation of the item elements");
  inverse_index_.assign(n, -1);
  for (std::size_t j = 0; j < n; ++j) {
    const auto src = forward_index_[j];
    if (src < 0 || static_cast<std::size_t>(src) >= n || inverse_index_[src] != -1)
      throw DimensionError("relayout index is not a permutation");
    inverse_index_[src] = static_cast<std::ptrdiff_t>(j);
  }
}

namespace {

Tensor apply_item_permutation(const Tensor& x, const Shape& in_item, const Shape& out_item,
                              const std::vector<std::ptrdiff_t>& perm) {
  const std::size_t n = shape_numel(in_item);
  if (x.numel() % n != 0 || x.dim(0) * n != x.numel())
    throw DimensionError("relayout input " + shape_str(x.shape()) + " does not match item shape " +
                         shape_str(in_item));
  const std::size_t B = x.dim(0);
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(B * n);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < n; ++j) (*idx)[b * n + j] = static_cast<std::ptrdiff_t>(b * n) + perm[j];
  Shape out{B};
  out.insert(out.end(), out_item.begin(), out_item.end());
  return gather(x, out, idx);
}

}  // namespace

FlowResult Relayout::forward(const Tensor& x) const {
  return {apply_item_permutation(x, in_item_, out_item_, forward_index_), zeros_batch(x.dim(0))};
}

Tensor Relayout::inverse(const Tensor& z) const {
  return apply_item_permutation(z, out_item_, in_item_, inverse_index_);
}

// ---------------------------------------------------------------------------
// composition

void FlowComposition::add(std::shared_ptr<const Bijection> step) { steps_.emplace_back(std::move(step)); }

void FlowComposition::add_factor_out() { steps_.emplace_back(FactorOutStep{}); }

std::size_t FlowComposition::bijection_count() const {
  return static_cast<std::size_t>(std::count_if(steps_.begin(), steps_.end(), [](const auto& s) {
    return std::holds_alternative<std::shared_ptr<const Bijection>>(s);
  }));
}

FlowComposition::Evaluation FlowComposition::evaluate(const Tensor& x, const StepHook& hook) const {
  const std::size_t B = x.dim(0);
  Evaluation ev;
  ev.log_det = zeros_batch(B);
  ev.log_prior = zeros_batch(B);
  Tensor h = x;
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    if (const auto* step = std::get_if<std::shared_ptr<const Bijection>>(&steps_[i])) {
      const Bijection& bij = **step;
      if (hook) hook(i, bij, h);
      FlowResult r;
      try {
        r = bij.forward(h);
      } catch (const NumericError& e) {
        throw NumericError("flow step " + std::to_string(i) + " (" + bij.name() + "): " + e.what());
      }
      h = r.z;
      ev.log_det = nf::add(ev.log_det, r.log_det);
    } else {
      FactorOutResult fo = factor_out(h);
      ev.latents.factored.push_back(fo.factored);
      ev.log_prior = nf::add(ev.log_prior, fo.log_prior);
      h = fo.kept;
    }
  }
  ev.log_prior = nf::add(ev.log_prior, standard_normal_log_prob(h));
  ev.latents.final = h;
  ev.log_prob = nf::add(ev.log_prior, ev.log_det);
  return ev;
}

Tensor FlowComposition::inverse(const Latents& latents) const {
  NoGradGuard no_grad;
  Tensor h = latents.final;
  std::size_t factored = latents.factored.size();
  for (std::size_t i = steps_.size(); i-- > 0;) {
    if (const auto* step = std::get_if<std::shared_ptr<const Bijection>>(&steps_[i])) {
      try {
        h = (*step)->inverse(h);
      } catch (const NumericError& e) {
        throw NumericError("inverse of flow step " + std::to_string(i) + " (" + (*step)->name() + "): " + e.what());
      }
    } else {
      if (factored == 0) throw ContractError("latents hold fewer factored pieces than the model needs");
      h = unfactor(h, latents.factored[--factored]);
    }
  }
  return h;
}

FlowComposition::Latents FlowComposition::sample_latents(const Shape& input_shape, std::size_t n,
                                                         double temperature, Rng& rng) const {
  if (!(temperature > 0.0)) throw ContractError("temperature must be positive");
  NoGradGuard no_grad;
  Shape one = input_shape;
  one[0] = 1;
  const Evaluation probe = evaluate(Tensor(one, 0.0));
  auto draw = [&](const Tensor& like) {
    Shape s = like.shape();
    s[0] = n;
    std::vector<double> v(shape_numel(s));
    for (auto& e : v) e = temperature * rng.normal();
    return Tensor(s, std::move(v));
  };
  Latents out;
  for (const auto& f : probe.latents.factored) out.factored.push_back(draw(f));
  out.final = draw(probe.latents.final);
  return out;
}

Tensor total_log_likelihood(const Tensor& x, const FlowComposition& model) { return model.log_likelihood(x); }

}  // namespace nf
