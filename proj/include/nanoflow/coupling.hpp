#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "nanoflow/rng.hpp"
#include "nanoflow/tensor.hpp"

namespace nf {

// Contiguous equal-size groups X_1..X_G along one axis of a tensor.
// groups == axis length is fully autoregressive, groups == 2 is bipartite.
class GroupPartition {
 public:
  GroupPartition(std::size_t groups, std::size_t axis, std::size_t axis_length);

  std::size_t groups() const { return groups_; }
  std::size_t axis() const { return axis_; }
  std::size_t axis_length() const { return length_; }
  std::size_t group_size() const { return length_ / groups_; }
  std::size_t group_of(std::size_t position) const { return position / group_size(); }

  // Group id of every element of a tensor with this shape.
  std::vector<std::size_t> element_groups(const Shape& shape) const;

 private:
  std::size_t groups_, axis_, length_;
};

// Maps a context tensor (same shape as the coupled tensor) to raw per-element
// parameters: the last axis grows by the parameter arity, element (..., c)
// owning entries c*arity .. c*arity + arity - 1. Parameters for group i may
// only depend on groups < i.
using EstimatorFn = std::function<Tensor(const Tensor& context)>;

struct CouplingParams {
  Tensor mu;
  Tensor log_sigma;
};

inline constexpr double kLogSigmaBound = 30.0;

struct FlowResult {
  Tensor z;
  Tensor log_det;  // [B]
};

// Affine coupling Z_i = sigma_i * X_i + mu_i for every group, evaluated in a
// single estimator pass; log sigma is clamped to +-30.
FlowResult affine_forward(const Tensor& x, const GroupPartition& partition, const EstimatorFn& estimator);
// Recovers groups 1..G in order, each from the already recovered X_<i.
Tensor affine_inverse(const Tensor& z, const GroupPartition& partition, const EstimatorFn& estimator);
CouplingParams split_affine_params(const Tensor& raw, const Shape& x_shape);

struct SplineOptions {
  std::size_t bins = 8;
  double tail_bound = 3.0;
  std::size_t arity() const { return 3 * bins - 1; }
};

// Monotonic rational-quadratic spline on [-B, B], identity outside, applied
// elementwise. x: [N], raw: [N, 3*bins-1] (bin widths, bin heights, interior
// knot derivatives). Returns (y, log dy/dx), both [N]. All-zero raw parameters
// give the identity.
std::pair<Tensor, Tensor> rq_spline(const Tensor& x, const Tensor& raw, const SplineOptions& opts);
// Inverse of rq_spline for the same raw parameters (no gradient).
Tensor rq_spline_inverse_elementwise(const Tensor& y, const Tensor& raw, const SplineOptions& opts);

FlowResult rq_spline_forward(const Tensor& x, const GroupPartition& partition, const EstimatorFn& estimator,
                             const SplineOptions& opts);
Tensor rq_spline_inverse(const Tensor& z, const GroupPartition& partition, const EstimatorFn& estimator,
                         const SplineOptions& opts);

// Channel-wise affine on the last axis: z = scale * (x + bias).
FlowResult actnorm_forward(const Tensor& x, const Tensor& log_scale, const Tensor& bias);
Tensor actnorm_inverse(const Tensor& z, const Tensor& log_scale, const Tensor& bias);

// Emits groups in order G..1 along the partition axis (an involution).
Tensor reverse_groups(const Tensor& x, const GroupPartition& partition);
// Per-position channel mix z = W x over the last axis; log_det = positions * log|det W|.
FlowResult inv_conv_forward(const Tensor& x, const Tensor& weight);
Tensor inv_conv_inverse(const Tensor& z, const Tensor& weight);

// [B, H, W, C] -> [B, H/2, W/2, 4C]; output channel (dy*2 + dx)*C + c holds
// input pixel (2i+dy, 2j+dx) channel c.
Tensor squeeze2x2(const Tensor& x);
Tensor unsqueeze2x2(const Tensor& x);

// Standard normal log-density summed per batch element, in nats.
Tensor standard_normal_log_prob(const Tensor& z);

struct FactorOutResult {
  Tensor kept;
  Tensor factored;
  Tensor log_prior;  // [B]
};
// Splits the last axis in half; the second half is scored under N(0, 1).
FactorOutResult factor_out(const Tensor& x);
Tensor unfactor(const Tensor& kept, const Tensor& factored);

// Invertible step with exact log-determinant.
class Bijection {
 public:
  virtual ~Bijection() = default;
  virtual FlowResult forward(const Tensor& x) const = 0;
  virtual Tensor inverse(const Tensor& z) const = 0;
  virtual std::string name() const = 0;
};

class AffineCoupling final : public Bijection {
 public:
  AffineCoupling(GroupPartition partition, EstimatorFn estimator)
      : partition_(partition), estimator_(std::move(estimator)) {}
  FlowResult forward(const Tensor& x) const override { return affine_forward(x, partition_, estimator_); }
  Tensor inverse(const Tensor& z) const override { return affine_inverse(z, partition_, estimator_); }
  std::string name() const override { return "affine_coupling"; }

 private:
  GroupPartition partition_;
  EstimatorFn estimator_;
};

class SplineCoupling final : public Bijection {
 public:
  SplineCoupling(GroupPartition partition, EstimatorFn estimator, SplineOptions opts)
      : partition_(partition), estimator_(std::move(estimator)), opts_(opts) {}
  FlowResult forward(const Tensor& x) const override { return rq_spline_forward(x, partition_, estimator_, opts_); }
  Tensor inverse(const Tensor& z) const override { return rq_spline_inverse(z, partition_, estimator_, opts_); }
  std::string name() const override { return "rq_spline_coupling"; }

 private:
  GroupPartition partition_;
  EstimatorFn estimator_;
  SplineOptions opts_;
};

class ActNorm final : public Bijection {
 public:
  ActNorm(Tensor log_scale, Tensor bias) : log_scale_(std::move(log_scale)), bias_(std::move(bias)) {}
  FlowResult forward(const Tensor& x) const override { return actnorm_forward(x, log_scale_, bias_); }
  Tensor inverse(const Tensor& z) const override { return actnorm_inverse(z, log_scale_, bias_); }
  std::string name() const override { return "actnorm"; }
  // Sets bias and scale so this batch leaves with per-channel mean 0, variance 1.
  void initialize(const Tensor& x);

 private:
  Tensor log_scale_, bias_;
};

class ReversePermutation final : public Bijection {
 public:
  explicit ReversePermutation(GroupPartition partition) : partition_(partition) {}
  FlowResult forward(const Tensor& x) const override;
  Tensor inverse(const Tensor& z) const override { return reverse_groups(z, partition_); }
  std::string name() const override { return "reverse"; }

 private:
  GroupPartition partition_;
};

class InvConv1x1 final : public Bijection {
 public:
  explicit InvConv1x1(Tensor weight) : weight_(std::move(weight)) {}
  FlowResult forward(const Tensor& x) const override { return inv_conv_forward(x, weight_); }
  Tensor inverse(const Tensor& z) const override { return inv_conv_inverse(z, weight_); }
  std::string name() const override { return "inv_conv"; }

 private:
  Tensor weight_;
};

class Squeeze final : public Bijection {
 public:
  FlowResult forward(const Tensor& x) const override;
  Tensor inverse(const Tensor& z) const override { return unsqueeze2x2(z); }
  std::string name() const override { return "squeeze"; }
};

// Fixed reindexing between two layouts of the same data (log_det 0).
class Relayout final : public Bijection {
 public:
  Relayout(Shape in_item, Shape out_item, std::vector<std::ptrdiff_t> out_to_in);
  FlowResult forward(const Tensor& x) const override;
  Tensor inverse(const Tensor& z) const override;
  std::string name() const override { return "relayout"; }

 private:
  Shape in_item_, out_item_;
  std::vector<std::ptrdiff_t> forward_index_, inverse_index_;
};

struct FactorOutStep {};

// z = f^K o ... o f^1 (x) with standard normal prior; factor-out steps send
// half of the remaining channels to the prior early.
class FlowComposition {
 public:
  struct Latents {
    std::vector<Tensor> factored;  // in factor-out order
    Tensor final;
  };
  struct Evaluation {
    Latents latents;
    Tensor log_det;    // [B], sum over steps
    Tensor log_prior;  // [B], factored pieces + final
    Tensor log_prob;   // [B]
  };

  void add(std::shared_ptr<const Bijection> step);
  void add_factor_out();
  std::size_t size() const { return steps_.size(); }
  std::size_t bijection_count() const;

  // Step hook lets callers inspect the input of each bijection (actnorm init).
  using StepHook = std::function<void(std::size_t step_index, const Bijection&, const Tensor& input)>;
  Evaluation evaluate(const Tensor& x, const StepHook& hook = {}) const;
  Tensor log_likelihood(const Tensor& x) const { return evaluate(x).log_prob; }
  Tensor inverse(const Latents& latents) const;
  // Latent shapes for a batch of inputs shaped like x.
  Latents sample_latents(const Shape& input_shape, std::size_t n, double temperature, Rng& rng) const;

  const std::vector<std::variant<std::shared_ptr<const Bijection>, FactorOutStep>>& steps() const { return steps_; }

 private:
  std::vector<std::variant<std::shared_ptr<const Bijection>, FactorOutStep>> steps_;
};

// log P_X(x) = log P_Z(z) + sum_k log|det J_k|, per batch element, in nats.
Tensor total_log_likelihood(const Tensor& x, const FlowComposition& model);

}  // namespace nf
