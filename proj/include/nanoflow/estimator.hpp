#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nanoflow/coupling.hpp"
#include "nanoflow/params.hpp"
#include "nanoflow/rng.hpp"
#include "nanoflow/tensor.hpp"

namespace nf {

// How the K flows share estimator parameters.
//   baseline  every flow owns a full network
//   naive     one network for all flows, flow index ignored
//   decomp    shared trunk, per-flow projection heads
//   nanoflow  shared trunk conditioned on a per-flow embedding, per-flow heads
enum class Scheme { Baseline, Naive, Decomp, NanoFlow };

std::string to_string(Scheme s);
Scheme scheme_from_string(std::string_view s);

// Grid: items are [rows, cols, channels] and the rows are the coupling groups;
// the trunk is a stack of causal residual conv layers over rows.
// Image: items are [height, width, channels] and channel blocks are the
// coupling groups; the trunk runs once per group on a channel-masked input.
enum class TrunkKind { Grid, Image };

struct Injections {
  bool concat = false;
  bool additive = false;
  bool gate = false;
  bool any() const { return concat || additive || gate; }
};

// Parses "additive+gate", "concat", "none", ...
Injections injections_from_string(std::string_view s);
std::string to_string(const Injections& inj);

struct EstimatorConfig {
  Scheme scheme = Scheme::Baseline;
  TrunkKind kind = TrunkKind::Grid;
  std::size_t flows = 8;
  std::size_t hidden = 32;
  std::size_t layers = 3;
  // Number of bottom trunk layers shared across flows. Defaults to 0 for the
  // baseline and to all layers for the other schemes.
  std::optional<std::size_t> shared_layers;
  std::size_t embed_dim = 0;
  Injections injections;
  // One additive projection per (flow, layer) instead of per layer.
  bool per_flow_projection = false;
  // Additive biases stored as precomputed per-(flow, layer) buffers.
  bool biases_cached = false;
  std::size_t arity = 2;
  Shape item;  // [rows, cols, channels]
  // Channel groups (image trunks only).
  std::size_t groups = 2;

  std::size_t effective_shared_layers() const;
  bool start_shared() const { return effective_shared_layers() >= 1; }
  bool head_shared() const { return scheme == Scheme::Naive && effective_shared_layers() == layers; }
  // Extra input channels contributed by a concatenated embedding.
  std::size_t concat_channels() const;
  void validate() const;
};

// X_cat: appends e_k reshaped to [rows, cols, D/(rows*cols)] (channel-major
// over the embedding vector) to every batch item along the channel axis.
Tensor inject_concat(const Tensor& x, const Tensor& e_k);
// h + W_l^T e_k as a per-channel bias. e_k: [1, D], w_l: [D, H].
Tensor inject_additive(const Tensor& h, const Tensor& e_k, const Tensor& w_l);
// exp(delta) * h per channel.
Tensor inject_gate(const Tensor& h, const Tensor& delta);

class Estimator {
 public:
  // Registers all tensors in `store` under `prefix`. Initial values depend
  // only on the seed of `rng` and each tensor's name.
  Estimator(EstimatorConfig config, ParamStore& store, const Rng& rng, std::string prefix = "");

  const EstimatorConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  // Raw coupling parameters for flow k (0-based) given a context shaped
  // [B, rows, cols, channels]. Output is [B, rows, cols, channels * arity].
  Tensor estimate(const Tensor& context, std::size_t k) const;

  // Per-(flow, layer) additive bias e_k W_l under the names cache_additive_biases
  // gives the buffers of the cached model.
  std::vector<std::pair<std::string, Tensor>> projected_biases() const;
  static std::string cache_name(const std::string& prefix, std::size_t k, std::size_t l);

  double max_abs_gate() const;

 private:
  struct Layer {
    Tensor w, b;
  };
  struct FlowParams {
    Layer start;
    std::vector<Layer> layers;
    Layer head;
    Tensor embedding;               // [1, D]
    std::vector<Tensor> additive;   // per layer: [D, H] projection, or [1, H] cached bias
    std::vector<Tensor> gate;       // per layer [H]
  };

  Tensor run_trunk(const Tensor& input, const FlowParams& p) const;
  Tensor grid_estimate(const Tensor& context, const FlowParams& p) const;
  Tensor image_estimate(const Tensor& context, const FlowParams& p) const;

  EstimatorConfig cfg_;
  std::string prefix_;
  Tensor start_emb_w_;  // concat weights for the embedding channels
  std::vector<FlowParams> flows_;
  std::shared_ptr<const std::vector<std::ptrdiff_t>> shift_index_;
};

// Binds flow k of a shared estimator as a coupling conditioner.
EstimatorFn bind_flow(std::shared_ptr<const Estimator> estimator, std::size_t k);

}  // namespace nf
