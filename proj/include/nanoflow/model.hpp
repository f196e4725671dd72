#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "nanoflow/coupling.hpp"
#include "nanoflow/estimator.hpp"
#include "nanoflow/params.hpp"
#include "nanoflow/rng.hpp"

namespace nf {

// flat: items are vectors [dim], reshaped row-major to a [G, dim/G] grid.
// sequence: items are signals [length], laid out column-wise so row g holds
//   samples g, g+G, g+2G, ... and consecutive samples sit in consecutive rows.
// image: items are [height, width, channels], processed multi-scale.
enum class Layout { Flat, Sequence, Image };
enum class CouplingKind { Affine, RqSpline };
enum class PermutationKind { Reverse, InvConv };

std::string to_string(Layout l);
std::string to_string(CouplingKind c);
std::string to_string(PermutationKind p);

struct ModelConfig {
  Scheme scheme = Scheme::Baseline;
  Layout layout = Layout::Flat;
  std::size_t flows = 8;   // K (per scale for images)
  std::size_t groups = 2;  // G
  std::size_t dim = 2;
  std::size_t length = 64;
  std::size_t height = 8, width = 8, channels = 1;
  std::size_t scales = 2;

  std::size_t hidden = 32;
  std::size_t layers = 3;
  std::optional<std::size_t> shared_layers;
  std::size_t embed_dim = 0;
  std::optional<Injections> injections;  // layout default when unset
  bool per_flow_projection = false;
  bool biases_cached = false;

  CouplingKind coupling = CouplingKind::Affine;
  SplineOptions spline;
  std::optional<PermutationKind> permutation;  // reverse for grids, inv_conv for images
  std::optional<bool> actnorm;                 // off for grids, on for images
  std::uint64_t seed = 0;

  Injections effective_injections() const;
  PermutationKind effective_permutation() const;
  bool effective_actnorm() const;
  // Shape of one data item as fed to the model.
  Shape item_shape() const;
  std::size_t data_dims() const { return shape_numel(item_shape()); }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Parameter counts per ledger bucket. Non-trainable buffers (cached biases)
// are not counted.
struct ParameterLedger {
  std::size_t trunk = 0;
  std::size_t head = 0;
  std::size_t embedding = 0;
  std::size_t injection = 0;
  std::size_t flow = 0;
  std::size_t total() const { return trunk + head + embedding + injection + flow; }
  std::size_t estimator_total() const { return trunk + head + embedding + injection; }
  nlohmann::json to_json() const;
};

class FlowModel {
 public:
  explicit FlowModel(ModelConfig config);
  FlowModel(FlowModel&&) = default;
  FlowModel& operator=(FlowModel&&) = default;
  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const FlowComposition& flow() const { return flow_; }
  const std::vector<std::shared_ptr<Estimator>>& estimators() const { return estimators_; }

  // [n] + item shape
  Shape batch_shape(std::size_t n) const;

  FlowComposition::Evaluation evaluate(const Tensor& x) const;
  // log p(x) in nats per batch element.
  Tensor log_likelihood(const Tensor& x) const { return evaluate(x).log_prob; }
  // Draws z ~ N(0, T^2 I) and inverts the flow (flows run K..1, so each
  // estimator receives its embedding in reverse order). Needs n >= 1.
  Tensor sample(std::size_t n, double temperature, Rng& rng) const;
  Tensor inverse(const FlowComposition::Latents& latents) const { return flow_.inverse(latents); }

  // Data-dependent actnorm initialization from one batch; no-op without actnorm.
  void initialize_actnorm(const Tensor& x);
  bool actnorm_initialized() const { return actnorm_initialized_; }
  void set_actnorm_initialized(bool on) { actnorm_initialized_ = on; }

  // Largest |log sigma| (affine) seen per coupling on x; diagnostic only.
  std::vector<double> coupling_log_sigma_peaks(const Tensor& x) const;
  double max_abs_gate() const;

  FlowModel clone() const;
  // Copies every tensor value from other (same names and shapes).
  void copy_values_from(const FlowModel& other);

 private:
  ModelConfig cfg_;
  ParamStore store_;
  FlowComposition flow_;
  std::vector<std::shared_ptr<Estimator>> estimators_;
  std::unordered_map<std::size_t, std::shared_ptr<ActNorm>> actnorms_;  // by step index
  std::unordered_map<std::size_t, EstimatorFn> affine_conditioners_;     // by step index
  bool actnorm_initialized_ = false;
};

FlowModel build_model(const ModelConfig& config);
ParameterLedger count_parameters(const FlowModel& model);

// Folds every additive embedding projection into fixed per-(flow, layer)
// bias buffers. Outputs are unchanged bit for bit.
FlowModel cache_additive_biases(const FlowModel& model);

// Checkpoint directory: manifest.json (config, tensor table) + params.nftn.
void save_checkpoint(const FlowModel& model, const std::filesystem::path& dir);
FlowModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace nf
