#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nanoflow/data.hpp"
#include "nanoflow/model.hpp"
#include "nanoflow/training.hpp"

namespace nf {

enum class ExperimentKind { Grid, SchemeComparison, LlrSweep, SharedLayersAblation, KScaling, CouplingComparison };
std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);

// Where the training data comes from.
//   two_moons | rings | gaussian_grid : n records of 2-dim toy data
//   seq1d                              : n AR(2) sequences of `length`
//   images                             : patches from a tensor file at `path`
//   synthetic_images                   : `images` generated height x width pictures, then patched
struct DataSpec {
  std::string kind = "two_moons";
  std::size_t n = 20000;
  std::size_t length = 64;
  std::uint64_t seed = 0;
  std::string path;
  std::size_t patch = 8;
  std::size_t channels = 1;
  std::size_t images = 64;
  std::size_t height = 32;
  std::size_t width = 32;

  nlohmann::json to_json() const;
  static DataSpec from_json(const nlohmann::json& j);
};

Dataset make_dataset(const DataSpec& spec);

struct ExperimentSpec {
  std::string id;
  ExperimentKind kind = ExperimentKind::Grid;
  nlohmann::json model = nlohmann::json::object();     // base ModelConfig
  nlohmann::json training = nlohmann::json::object();  // base TrainConfig
  DataSpec data;
  // Model-config key -> list of values; combinations are the cartesian
  // product with keys in sorted order and the last key varying fastest.
  nlohmann::json sweep = nlohmann::json::object();
  std::vector<std::uint64_t> seeds{0};
  std::string out;     // default output directory; may be empty
  nlohmann::json raw;  // the document this spec was parsed from

  static ExperimentSpec from_json(const nlohmann::json& j);
};

struct Combination {
  std::size_t index = 0;
  std::string label;       // "key=value;key=value" over the swept keys
  nlohmann::json values;   // swept key -> value
  nlohmann::json model;    // fully resolved ModelConfig json (seed excluded)
};

// Applies the experiment's default axes, drops keys a scheme does not use
// (embed_dim and injections outside nanoflow, shared_layers for baseline),
// removes duplicate configurations and validates every combination.
std::vector<Combination> resolve(const ExperimentSpec& spec);

struct ResultRow {
  std::string experiment;
  std::size_t combo = 0;
  std::string label;
  std::string scheme;
  std::uint64_t seed = 0;
  ParameterLedger ledger;
  double initial_ll = 0;  // nats per dim
  double final_ll = 0;    // nats per dim
  std::optional<double> bpd;
  bool diverged = false;
  std::string note;
  std::size_t skipped_steps = 0;
  double runtime_seconds = 0;

  // Lower is better: bpd for image data, otherwise -final_ll.
  double metric() const { return bpd ? *bpd : -final_ll; }
  // CSV fields; runtime is the last column and the only one that is not
  // reproducible.
  std::vector<std::string> csv_fields(bool with_runtime = true) const;
  static const std::vector<std::string>& csv_header();
};

struct Aggregate {
  std::size_t combo = 0;
  std::string label;
  std::string scheme;
  std::size_t runs = 0;
  std::size_t diverged = 0;
  std::size_t param_total = 0;
  double mean = 0;  // of metric()
  double sem = 0;   // sample sd / sqrt(n); 0 for fewer than two runs
  double mean_ll = 0;

  static const std::vector<std::string>& csv_header();
  std::vector<std::string> csv_fields() const;
};

struct Verdict {
  std::string name;
  bool passed = false;
  bool advisory = false;  // reported but never fails the experiment
  std::string detail;
  nlohmann::json to_json() const;
};

struct ResultTable {
  std::string experiment;
  std::vector<Combination> combos;
  std::vector<ResultRow> rows;  // combo-major, then seed in spec order

  std::vector<Aggregate> aggregates() const;
  std::size_t diverged() const;
  void write_csv(const std::filesystem::path& path) const;
  void write_aggregate_csv(const std::filesystem::path& path) const;
};

struct ExperimentResult {
  ResultTable table;
  std::vector<Verdict> verdicts;
  bool passed() const;  // every non-advisory verdict
};

struct RunOptions {
  std::size_t threads = 1;
  std::optional<std::filesystem::path> out;  // outputs are only written when set
  bool save_checkpoints = false;
};

// Trains one (combination, seed) cell. Divergence is recorded in the row,
// not thrown.
ResultRow run_cell(const ExperimentSpec& spec, const Combination& combo, std::uint64_t seed, const Dataset& data,
                   std::ostream* metrics = nullptr, const std::filesystem::path* checkpoint_dir = nullptr);

ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& options = {});

// Named entry points; each checks its own preconditions and forces its kind.
ExperimentResult run_scheme_comparison(ExperimentSpec spec, const RunOptions& options = {});
ExperimentResult run_llr_sweep(ExperimentSpec spec, const RunOptions& options = {});
ExperimentResult run_shared_layers_ablation(ExperimentSpec spec, const RunOptions& options = {});
ExperimentResult run_k_scaling(ExperimentSpec spec, const RunOptions& options = {});
ExperimentResult run_coupling_comparison(ExperimentSpec spec, const RunOptions& options = {});

// Verdicts are pure functions of the table (plus the spec for ledgers).
std::vector<Verdict> ordering_verdicts(const ResultTable& table);
std::vector<Verdict> llr_verdicts(const ResultTable& table);
std::vector<Verdict> ablation_verdicts(const ResultTable& table);
std::vector<Verdict> k_scaling_verdicts(const ResultTable& table);
std::vector<Verdict> coupling_verdicts(const ResultTable& table);

// Per-seed LLR = LL(baseline) - LL(nanoflow) for each group count.
struct LlrPoint {
  std::size_t groups = 0;
  std::vector<double> llr;  // one per seed with both runs finite
  double mean = 0, sem = 0;
};
std::vector<LlrPoint> llr_points(const ResultTable& table);

// Calls fn(i) for i in [0, n) on up to `threads` workers. The first
// exception (by index) is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// Writes samples.nftn and, for image models with 1 or 3 channels, an 8-bit
// samples.pgm / samples.ppm grid of ceil(sqrt(n)) columns. n = 0 writes
// nothing. Returns the written paths.
std::vector<std::filesystem::path> dump_samples(const FlowModel& model, std::size_t n, double temperature,
                                                std::uint64_t seed, const std::filesystem::path& out);

// Maximum |x - f^{-1}(f(x))| over x.
double round_trip_error(const FlowModel& model, const Tensor& x);

}  // namespace nf
