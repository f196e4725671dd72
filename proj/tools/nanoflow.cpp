// Command-line front end: train, sample, ledger, sweep.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "nanoflow/experiments.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

void add_common(CLI::App* app, Common& c, bool config_required) {
  app->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile)->required(config_required);
  app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "seed override");
  app->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw nf::FormatError("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw nf::ConfigError(path + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw nf::FormatError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// {"model": {...}, "training": {...}, "data": {...}}
int cmd_train(const Common& c) {
  const json doc = read_json(c.config);
  for (const auto& [key, _] : doc.items())
    if (key != "model" && key != "training" && key != "data")
      throw nf::ConfigError("unknown train config key '" + key + "'");
  nf::ModelConfig mc = nf::ModelConfig::from_json(doc.value("model", json::object()));
  nf::TrainConfig tc = nf::TrainConfig::from_json(doc.value("training", json::object()));
  const nf::DataSpec ds = nf::DataSpec::from_json(doc.value("data", json::object()));
  if (c.seed) mc.seed = tc.seed = *c.seed;
  const fs::path out = c.out.empty() ? fs::path("train_out") : fs::path(c.out);
  fs::create_directories(out);

  const nf::Dataset data = nf::make_dataset(ds);
  nf::FlowModel model = nf::build_model(mc);
  const nf::ParameterLedger ledger = nf::count_parameters(model);
  std::cout << "parameters: " << ledger.to_json().dump() << '\n';

  std::ofstream metrics(out / "metrics.jsonl");
  nf::MetricsSink sink(metrics);
  const nf::TrainResult r = nf::train(model, data, tc, &sink);
  nf::save_checkpoint(model, out / "checkpoint");

  json result{{"model", mc.to_json()},
              {"training", tc.to_json()},
              {"data", ds.to_json()},
              {"ledger", ledger.to_json()},
              {"initial_eval_ll", r.initial_eval_ll},
              {"final_eval_ll", r.final_eval_ll},
              {"skipped_steps", r.skipped_steps},
              {"averaged_checkpoints", r.averaged_checkpoints}};
  result["final_bpd"] = r.final_bpd ? json(*r.final_bpd) : json(nullptr);
  write_json(out / "result.json", result);
  std::cout << "eval ll per dim: " << r.initial_eval_ll << " -> " << r.final_eval_ll;
  if (r.final_bpd) std::cout << " (" << *r.final_bpd << " bpd)";
  std::cout << "\ncheckpoint: " << (out / "checkpoint").string() << '\n';
  return 0;
}

// {"checkpoint": dir, "n": 64, "temperature": 1.0}; flags override the file.
int cmd_sample(const Common& c, std::string checkpoint, std::optional<std::size_t> n, std::optional<double> temperature) {
  json doc = c.config.empty() ? json::object() : read_json(c.config);
  for (const auto& [key, _] : doc.items())
    if (key != "checkpoint" && key != "n" && key != "temperature")
      throw nf::ConfigError("unknown sample config key '" + key + "'");
  if (checkpoint.empty()) checkpoint = doc.value("checkpoint", std::string());
  if (checkpoint.empty()) throw nf::ConfigError("sample needs a checkpoint (--checkpoint or config)");
  const std::size_t count = n.value_or(doc.value("n", std::size_t{64}));
  const double t = temperature.value_or(doc.value("temperature", 1.0));
  const nf::FlowModel model = nf::load_checkpoint(checkpoint);
  const fs::path out = c.out.empty() ? fs::path("samples") : fs::path(c.out);
  const auto files = nf::dump_samples(model, count, t, c.seed.value_or(0), out);
  if (files.empty()) std::cout << "no samples requested\n";
  for (const auto& f : files) std::cout << f.string() << '\n';
  return 0;
}

// Accepts a bare model config or a document with a "model" member.
int cmd_ledger(const Common& c) {
  json doc = read_json(c.config);
  if (doc.contains("model")) doc = doc["model"];
  nf::ModelConfig mc = nf::ModelConfig::from_json(doc);
  if (c.seed) mc.seed = *c.seed;
  const nf::FlowModel model = nf::build_model(mc);
  json out = nf::count_parameters(model).to_json();
  out["model"] = mc.to_json();
  std::cout << out.dump(2) << '\n';
  if (!c.out.empty()) write_json(fs::path(c.out) / "ledger.json", out);
  return 0;
}

int cmd_sweep(const Common& c) {
  json doc = read_json(c.config);
  nf::ExperimentSpec spec = nf::ExperimentSpec::from_json(doc);
  if (c.seed) spec.seeds = {*c.seed};
  nf::RunOptions opts;
  opts.threads = c.threads;
  const std::string out = !c.out.empty() ? c.out : spec.out.empty() ? "sweep_out/" + spec.id : spec.out;
  opts.out = out;
  const nf::ExperimentResult r = nf::run_experiment(spec, opts);
  for (const auto& a : r.table.aggregates())
    std::cout << a.label << ": metric " << a.mean << " +- " << a.sem << " (runs " << a.runs << ", diverged "
              << a.diverged << ", params " << a.param_total << ")\n";
  for (const auto& v : r.verdicts)
    std::cout << (v.passed ? "PASS " : v.advisory ? "NOTE " : "FAIL ") << v.name << ": " << v.detail << '\n';
  std::cout << "outputs: " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalizing flows with shared estimators"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint;
  std::optional<std::size_t> n;
  std::optional<double> temperature;

  auto* train = app.add_subcommand("train", "train one model");
  add_common(train, common, true);
  auto* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
  add_common(sample, common, false);
  sample->add_option("--checkpoint", checkpoint, "checkpoint directory");
  sample->add_option("--n", n, "number of samples");
  sample->add_option("--temperature", temperature, "prior temperature");
  auto* ledger = app.add_subcommand("ledger", "print the parameter ledger of a model config");
  add_common(ledger, common, true);
  auto* sweep = app.add_subcommand("sweep", "run an experiment spec");
  add_common(sweep, common, true);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(common);
    if (*sample) return cmd_sample(common, checkpoint, n, temperature);
    if (*ledger) return cmd_ledger(common);
    if (*sweep) return cmd_sweep(common);
  } catch (const nf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const nf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
