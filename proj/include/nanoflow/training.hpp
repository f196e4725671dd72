#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nanoflow/data.hpp"
#include "nanoflow/errors.hpp"
#include "nanoflow/model.hpp"
#include "nanoflow/rng.hpp"

namespace nf {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// One bias-corrected Adam update over params using their accumulated grads
// (a param without a grad counts as zero grad). Returns false and leaves
// everything untouched if any gradient is non-finite.
bool adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamOptions& opts = {});

// initial_lr * 0.5^floor(iteration / halve_every)
double lr_schedule(std::size_t iteration, double initial_lr, std::size_t halve_every);

// Rescales grads so their joint L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

// Elementwise mean of every tensor (trainable or not) over models of
// identical topology.
FlowModel checkpoint_average(std::span<const FlowModel* const> models);

// (x + u) / levels with u ~ U[0, 1); x must hold integers in [0, levels).
Tensor dequantize(const Tensor& x_int, std::size_t levels, Rng& rng);
// Bits per dimension of a log-likelihood ll (nats, per item) of data scaled
// into [0, 1) from `levels` integer levels.
double bpd(double ll, std::size_t dims, std::size_t levels = 256);

struct TrainConfig {
  std::size_t iterations = 5000;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t halve_every = 2000;
  std::size_t checkpoint_every = 200;
  std::size_t average_window = 5;
  double clip_norm = 100.0;
  std::size_t log_every = 100;
  std::size_t eval_batch = 256;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct MetricsRow {
  std::size_t iteration = 0;
  double train_nll = 0;              // nats per dimension, current batch
  std::optional<double> eval_ll;     // nats per dimension, test split
  std::optional<double> bpd;         // images only
  double lr = 0;
  double grad_norm = 0;
  double wall_seconds = 0;
  std::size_t param_total = 0;
  std::vector<std::string> warnings;

  // Field names are stable; wall_seconds is null when timing is off.
  nlohmann::json to_json(bool timing = true) const;
};

// JSON-lines writer for MetricsRow.
class MetricsSink {
 public:
  explicit MetricsSink(std::ostream& os, bool timing = true) : os_(os), timing_(timing) {}
  void write(const MetricsRow& row);

 private:
  std::ostream& os_;
  bool timing_;
};

// Thrown when the loss exceeds 1e6 or turns non-finite.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::size_t iteration) : NumericError(what), iteration(iteration) {}
  std::size_t iteration;
};

struct TrainResult {
  double initial_eval_ll = 0;  // nats per dimension before training
  double final_eval_ll = 0;    // nats per dimension, averaged model
  std::optional<double> final_bpd;
  std::size_t skipped_steps = 0;
  std::size_t averaged_checkpoints = 0;
  std::vector<MetricsRow> rows;
};

// Mean log-likelihood per dimension (nats) of data under model, evaluated in
// batches without gradients. Integer data is dequantized with rng.
double mean_log_likelihood(const FlowModel& model, const Tensor& data, bool integer_valued, std::size_t levels,
                           std::size_t batch, Rng& rng);

// Maximum-likelihood training. The model is replaced by the average of the
// last average_window checkpoints (taken every checkpoint_every iterations).
TrainResult train(FlowModel& model, const Dataset& data, const TrainConfig& config, MetricsSink* sink = nullptr);

}  // namespace nf
