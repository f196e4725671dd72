#include "nanoflow/training.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "nanoflow/ops.hpp"

namespace nf {

using nlohmann::json;

bool adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamOptions& opts) {
  for (const auto& p : params)
    for (double g : p.grad())
      if (!std::isfinite(g)) return false;
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("Adam state does not match the parameter list");
  ++state.step;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    const auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) throw ContractError("Adam state shape mismatch");
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = opts.beta1 * m[j] + (1 - opts.beta1) * g;
      v[j] = opts.beta2 * v[j] + (1 - opts.beta2) * g * g;
      data[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opts.eps);
    }
  }
  return true;
}

double lr_schedule(std::size_t iteration, double initial_lr, std::size_t halve_every) {
  if (halve_every == 0) throw ConfigError("halve_every must be positive");
  return initial_lr * std::ldexp(1.0, -static_cast<int>(std::min<std::size_t>(iteration / halve_every, 1074)));
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double scale = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto& g = p.impl()->grad;
      for (auto& x : g) x *= scale;
    }
  }
  return norm;
}

FlowModel checkpoint_average(std::span<const FlowModel* const> models) {
  if (models.empty()) throw ContractError("checkpoint_average needs at least one checkpoint");
  const FlowModel& first = *models.front();
  const auto& ref = first.params().entries();
  for (const FlowModel* m : models) {
    const auto& e = m->params().entries();
    if (e.size() != ref.size()) throw ContractError("checkpoint topologies differ");
    for (std::size_t i = 0; i < e.size(); ++i)
      if (e[i].name != ref[i].name || e[i].tensor.shape() != ref[i].tensor.shape())
        throw ContractError("checkpoint topologies differ at " + ref[i].name);
  }
  FlowModel out = first.clone();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    // running mean: equal inputs come back unchanged, bit for bit
    std::vector<double> acc(ref[i].tensor.numel(), 0.0);
    double seen = 0;
    for (const FlowModel* m : models) {
      seen += 1;
      const auto d = m->params().entries()[i].tensor.data();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += (d[j] - acc[j]) / seen;
    }
    out.params().assign(ref[i].name, acc);
  }
  return out;
}

Tensor dequantize(const Tensor& x_int, std::size_t levels, Rng& rng) {
  std::vector<double> out(x_int.numel());
  const double L = static_cast<double>(levels);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = x_int.data()[i];
    if (x < 0 || x >= L || x != std::floor(x))
      throw DataError("dequantize: value " + std::to_string(x) + " is not an integer in [0, " + std::to_string(levels) + ")");
    out[i] = (x + rng.uniform()) / L;
  }
  return Tensor(x_int.shape(), std::move(out));
}

double bpd(double ll, std::size_t dims, std::size_t levels) {
  const double d = static_cast<double>(dims);
  return -(ll - d * std::log(static_cast<double>(levels))) / (d * std::numbers::ln2);
}

void TrainConfig::validate() const {
  if (batch_size == 0 || halve_every == 0 || checkpoint_every == 0 || average_window == 0 || log_every == 0 ||
      eval_batch == 0)
    throw ConfigError("training sizes and intervals must be positive");
  if (!(lr > 0) || !(clip_norm > 0)) throw ConfigError("lr and clip_norm must be positive");
  if (iterations > 0 && average_window * checkpoint_every > iterations)
    throw ConfigError("average_window * checkpoint_every exceeds iterations");
}

json TrainConfig::to_json() const {
  return json{{"iterations", iterations},         {"batch_size", batch_size},   {"lr", lr},
              {"halve_every", halve_every},       {"checkpoint_every", checkpoint_every},
              {"average_window", average_window}, {"clip_norm", clip_norm},     {"log_every", log_every},
              {"eval_batch", eval_batch},         {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  static const std::set<std::string> known = {"iterations",     "batch_size", "lr",        "halve_every",
                                              "checkpoint_every", "average_window", "clip_norm", "log_every",
                                              "eval_batch",     "seed"};
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown training config key '" + key + "'");
  try {
    TrainConfig c;
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.halve_every = j.value("halve_every", c.halve_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.average_window = j.value("average_window", c.average_window);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.log_every = j.value("log_every", c.log_every);
    c.eval_batch = j.value("eval_batch", c.eval_batch);
    c.seed = j.value("seed", c.seed);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
}

json MetricsRow::to_json(bool timing) const {
  json j{{"iteration", iteration}, {"train_nll", train_nll}, {"lr", lr},
         {"grad_norm", grad_norm}, {"param_total", param_total}};
  j["eval_ll"] = eval_ll ? json(*eval_ll) : json(nullptr);
  j["bpd"] = bpd ? json(*bpd) : json(nullptr);
  j["wall_seconds"] = timing ? json(wall_seconds) : json(nullptr);
  j["warnings"] = warnings;
  return j;
}

void MetricsSink::write(const MetricsRow& row) { os_ << row.to_json(timing_).dump() << '\n'; }

namespace {

Tensor slice_rows(const Tensor& data, std::size_t begin, std::size_t count) {
  const std::size_t per = data.numel() / data.dim(0);
  Shape s = data.shape();
  s[0] = count;
  const auto first = data.data().begin() + static_cast<std::ptrdiff_t>(begin * per);
  return Tensor(s, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * per)));
}

Tensor sample_batch(const Tensor& data, std::size_t batch, Rng& rng) {
  const std::size_t N = data.dim(0), per = data.numel() / N;
  Shape s = data.shape();
  s[0] = batch;
  std::vector<double> v(batch * per);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t r = rng.below(N);
    std::copy_n(data.data().begin() + static_cast<std::ptrdiff_t>(r * per), per, v.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return Tensor(s, std::move(v));
}

std::string divergence_report(const FlowModel& model, const Tensor& batch, double loss, std::size_t iteration) {
  std::ostringstream os;
  os << "training diverged at iteration " << iteration << " (loss " << loss << ")";
  try {
    const auto peaks = model.coupling_log_sigma_peaks(batch);
    if (!peaks.empty()) {
      os << "; per-flow max |log sigma|:";
      for (std::size_t k = 0; k < peaks.size(); ++k)
        os << ' ' << k << '=' << peaks[k] << (peaks[k] >= kLogSigmaBound ? "(saturated)" : "");
    }
  } catch (const Error& e) {
    os << "; log sigma stats unavailable: " << e.what();
  }
  return os.str();
}

}  // namespace

double mean_log_likelihood(const FlowModel& model, const Tensor& data, bool integer_valued, std::size_t levels,
                           std::size_t batch, Rng& rng) {
  NoGradGuard no_grad;
  const std::size_t N = data.dim(0), dims = data.numel() / N;
  double total = 0;
  for (std::size_t begin = 0; begin < N; begin += batch) {
    const std::size_t count = std::min(batch, N - begin);
    Tensor x = slice_rows(data, begin, count);
    if (integer_valued) x = dequantize(x, levels, rng);
    const Tensor ll = model.log_likelihood(x);
    for (double v : ll.data()) total += v;
  }
  return total / static_cast<double>(N * dims);
}

TrainResult train(FlowModel& model, const Dataset& data, const TrainConfig& cfg, MetricsSink* sink) {
  cfg.validate();
  TrainResult result;
  const Rng root(cfg.seed);
  const std::size_t dims = model.config().data_dims();
  if (data.item_shape() != model.config().item_shape())
    throw DimensionError("dataset items " + shape_str(data.item_shape()) + " do not match the model input " +
                         shape_str(model.config().item_shape()));
  auto eval = [&](const FlowModel& m) {
    Rng eval_rng = root.fork(3);
    return mean_log_likelihood(m, data.test, data.integer_valued, data.levels, cfg.eval_batch, eval_rng);
  };
  auto bpd_of = [&](double ll_per_dim) -> std::optional<double> {
    if (!data.integer_valued) return std::nullopt;
    return bpd(ll_per_dim * static_cast<double>(dims), dims, data.levels);
  };
  if (cfg.iterations == 0) {
    result.initial_eval_ll = result.final_eval_ll = eval(model);
    result.final_bpd = bpd_of(result.final_eval_ll);
    return result;
  }

  Rng batch_rng = root.fork(1), noise_rng = root.fork(2);
  auto next_batch = [&] {
    Tensor x = sample_batch(data.train, cfg.batch_size, batch_rng);
    return data.integer_valued ? dequantize(x, data.levels, noise_rng) : x;
  };

  if (!model.actnorm_initialized()) {
    Rng init_rng = root.fork(4);
    Tensor x = sample_batch(data.train, std::max<std::size_t>(cfg.batch_size, 256), init_rng);
    if (data.integer_valued) x = dequantize(x, data.levels, init_rng);
    model.initialize_actnorm(x);
  }
  result.initial_eval_ll = eval(model);

  std::vector<Tensor> params = model.params().trainable();
  AdamState adam;
  const std::size_t param_total = count_parameters(model).total();
  const std::size_t first_snapshot = cfg.iterations - cfg.average_window * cfg.checkpoint_every;
  std::vector<FlowModel> snapshots;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Tensor x = next_batch();
    const double lr = lr_schedule(it, cfg.lr, cfg.halve_every);
    double loss_value = 0, grad_norm = 0;
    model.params().zero_grad();
    try {
      GradTape tape;
      const Tensor loss = mul_scalar(mean(model.log_likelihood(x)), -1.0 / static_cast<double>(dims));
      loss_value = loss.item();
      if (!(loss_value < 1e6)) throw NumericError("loss " + std::to_string(loss_value));
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw TrainingDiverged(divergence_report(model, x, loss_value, it) + ": " + e.what(), it);
    }
    grad_norm = clip_grad_norm(params, cfg.clip_norm);
    if (!adam_step(params, adam, lr)) ++result.skipped_steps;

    const std::size_t done = it + 1;
    if (done > first_snapshot && (done - first_snapshot) % cfg.checkpoint_every == 0) snapshots.push_back(model.clone());

    if (done % cfg.log_every == 0 || done == cfg.iterations) {
      MetricsRow row;
      row.iteration = done;
      row.train_nll = loss_value;
      row.lr = lr;
      row.grad_norm = grad_norm;
      row.param_total = param_total;
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (model.max_abs_gate() > 30.0) row.warnings.push_back("gate |delta| exceeds 30");
      if (result.skipped_steps > 0) row.warnings.push_back(std::to_string(result.skipped_steps) + " steps skipped on non-finite gradients");
      if (done == cfg.iterations) {
        std::vector<const FlowModel*> ptrs;
        for (const auto& s : snapshots) ptrs.push_back(&s);
        if (!ptrs.empty()) model.copy_values_from(checkpoint_average(ptrs));
        result.averaged_checkpoints = ptrs.size();
        result.final_eval_ll = eval(model);
        result.final_bpd = bpd_of(result.final_eval_ll);
        row.eval_ll = result.final_eval_ll;
        row.bpd = result.final_bpd;
      }
      if (sink) sink->write(row);
      result.rows.push_back(std::move(row));
    }
  }
  model.params().zero_grad();
  return result;
}

}  // namespace nf
