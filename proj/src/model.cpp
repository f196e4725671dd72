#include "nanoflow/model.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "nanoflow/errors.hpp"
#include "nanoflow/ops.hpp"
#include "nanoflow/tensor_io.hpp"

namespace nf {

using nlohmann::json;

std::string to_string(Layout l) {
  switch (l) {
    case Layout::Flat: return "flat";
    case Layout::Sequence: return "sequence";
    case Layout::Image: return "image";
  }
  return "?";
}
std::string to_string(CouplingKind c) { return c == CouplingKind::Affine ? "affine" : "rq_spline"; }
std::string to_string(PermutationKind p) { return p == PermutationKind::Reverse ? "reverse" : "inv_conv"; }

namespace {

Layout layout_from_string(const std::string& s) {
  if (s == "flat") return Layout::Flat;
  if (s == "sequence") return Layout::Sequence;
  if (s == "image") return Layout::Image;
  throw ConfigError("unknown layout '" + s + "'");
}
CouplingKind coupling_from_string(const std::string& s) {
  if (s == "affine") return CouplingKind::Affine;
  if (s == "rq_spline") return CouplingKind::RqSpline;
  throw ConfigError("unknown coupling '" + s + "'");
}
PermutationKind permutation_from_string(const std::string& s) {
  if (s == "reverse") return PermutationKind::Reverse;
  if (s == "inv_conv") return PermutationKind::InvConv;
  throw ConfigError("unknown permutation '" + s + "'");
}

bool is_grid(Layout l) { return l != Layout::Image; }

}  // namespace

Injections ModelConfig::effective_injections() const {
  if (scheme != Scheme::NanoFlow) return {};
  if (injections) return *injections;
  return is_grid(layout) ? Injections{false, true, true} : Injections{true, false, true};
}

PermutationKind ModelConfig::effective_permutation() const {
  if (permutation) return *permutation;
  return is_grid(layout) ? PermutationKind::Reverse : PermutationKind::InvConv;
}

bool ModelConfig::effective_actnorm() const { return actnorm.value_or(!is_grid(layout)); }

Shape ModelConfig::item_shape() const {
  switch (layout) {
    case Layout::Flat: return {dim};
    case Layout::Sequence: return {length};
    case Layout::Image: return {height, width, channels};
  }
  return {};
}

void ModelConfig::validate() const {
  if (flows == 0) throw ConfigError("flows must be positive");
  if (groups < 2) throw ConfigError("groups must be at least 2");
  if (coupling == CouplingKind::RqSpline && (spline.bins < 2 || !(spline.tail_bound > 0)))
    throw ConfigError("spline needs bins >= 2 and tail_bound > 0");
  if ((embed_dim > 0) != (scheme == Scheme::NanoFlow))
    throw ConfigError("embed_dim must be set for nanoflow and only for nanoflow");
  if (injections && injections->any() && scheme != Scheme::NanoFlow)
    throw ConfigError("injections are only meaningful for nanoflow");
  if (is_grid(layout)) {
    const std::size_t n = layout == Layout::Flat ? dim : length;
    if (n == 0 || n % groups != 0)
      throw ConfigError("groups " + std::to_string(groups) + " must divide the data length " + std::to_string(n));
    if (effective_permutation() == PermutationKind::InvConv)
      throw ConfigError("inv_conv permutation needs an image layout");
  } else {
    if (scales == 0) throw ConfigError("scales must be positive");
    const std::size_t f = std::size_t{1} << scales;
    if (height % f != 0 || width % f != 0)
      throw ConfigError("image size must be divisible by 2^scales");
    std::size_t c = channels;
    for (std::size_t s = 0; s < scales; ++s) {
      c *= 4;
      if (c % groups != 0) throw ConfigError("groups must divide the channel count at every scale");
      if (s + 1 < scales) {
        if (c % 2 != 0) throw ConfigError("factor-out needs an even channel count");
        c /= 2;
      }
    }
  }
}

json ModelConfig::to_json() const {
  json j{{"scheme", nf::to_string(scheme)},
         {"layout", nf::to_string(layout)},
         {"flows", flows},
         {"groups", groups},
         {"hidden", hidden},
         {"layers", layers},
         {"embed_dim", embed_dim},
         {"per_flow_projection", per_flow_projection},
         {"biases_cached", biases_cached},
         {"coupling", nf::to_string(coupling)},
         {"bins", spline.bins},
         {"tail_bound", spline.tail_bound},
         {"permutation", nf::to_string(effective_permutation())},
         {"actnorm", effective_actnorm()},
         {"seed", seed}};
  j["shared_layers"] = shared_layers ? json(*shared_layers) : json(nullptr);
  j["injections"] = nf::to_string(effective_injections());
  switch (layout) {
    case Layout::Flat: j["dim"] = dim; break;
    case Layout::Sequence: j["length"] = length; break;
    case Layout::Image:
      j["height"] = height;
      j["width"] = width;
      j["channels"] = channels;
      j["scales"] = scales;
      break;
  }
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  static const std::set<std::string> known = {
      "scheme", "layout",     "flows",       "groups",  "hidden",   "layers",        "embed_dim",
      "shared_layers",        "injections",  "per_flow_projection", "biases_cached", "coupling",
      "bins",   "tail_bound", "permutation", "actnorm", "seed",     "dim",           "length",
      "height", "width",      "channels",    "scales"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  try {
    ModelConfig c;
    c.scheme = scheme_from_string(j.value("scheme", std::string("baseline")));
    c.layout = layout_from_string(j.value("layout", std::string("flat")));
    c.flows = j.value("flows", c.flows);
    c.groups = j.value("groups", c.groups);
    c.dim = j.value("dim", c.dim);
    c.length = j.value("length", c.length);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.channels = j.value("channels", c.channels);
    c.scales = j.value("scales", c.scales);
    c.hidden = j.value("hidden", c.hidden);
    c.layers = j.value("layers", c.layers);
    if (j.contains("shared_layers") && !j["shared_layers"].is_null()) c.shared_layers = j["shared_layers"].get<std::size_t>();
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    if (j.contains("injections")) {
      const Injections inj = injections_from_string(j["injections"].get<std::string>());
      if (inj.any() || c.scheme == Scheme::NanoFlow) c.injections = inj;
    }
    c.per_flow_projection = j.value("per_flow_projection", false);
    c.biases_cached = j.value("biases_cached", false);
    c.coupling = coupling_from_string(j.value("coupling", std::string("affine")));
    c.spline.bins = j.value("bins", c.spline.bins);
    c.spline.tail_bound = j.value("tail_bound", c.spline.tail_bound);
    if (j.contains("permutation")) c.permutation = permutation_from_string(j["permutation"].get<std::string>());
    if (j.contains("actnorm")) c.actnorm = j["actnorm"].get<bool>();
    c.seed = j.value("seed", c.seed);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
}

json ParameterLedger::to_json() const {
  return json{{"trunk", trunk},         {"head", head}, {"embedding", embedding},
              {"injection", injection}, {"flow", flow}, {"total", total()}};
}

namespace {

// Random orthogonal matrix (Gram-Schmidt on Gaussian columns).
std::vector<double> random_rotation(std::size_t n, Rng rng) {
  std::vector<double> q(n * n);
  for (auto& v : q) v = rng.normal();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += q[i * n + j] * q[i * n + p];
      for (std::size_t i = 0; i < n; ++i) q[i * n + j] -= dot * q[i * n + p];
    }
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += q[i * n + j] * q[i * n + j];
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) q[i * n + j] /= norm;
  }
  return q;
}

}  // namespace

FlowModel::FlowModel(ModelConfig config) : cfg_(std::move(config)) {
  cfg_.validate();
  const Rng root(cfg_.seed);
  const std::size_t K = cfg_.flows, G = cfg_.groups;
  const std::size_t arity = cfg_.coupling == CouplingKind::Affine ? 2 : cfg_.spline.arity();

  EstimatorConfig base;
  base.scheme = cfg_.scheme;
  base.flows = K;
  base.hidden = cfg_.hidden;
  base.layers = cfg_.layers;
  base.shared_layers = cfg_.shared_layers;
  base.embed_dim = cfg_.embed_dim;
  base.injections = cfg_.effective_injections();
  base.per_flow_projection = cfg_.per_flow_projection;
  base.biases_cached = cfg_.biases_cached;
  base.arity = arity;
  base.groups = G;

  auto add_actnorm = [&](const std::string& prefix, std::size_t k, std::size_t channels) {
    const std::string tag = prefix + "actnorm.f" + std::to_string(k);
    Tensor ls = store_.add(tag + ".log_scale", {channels}, std::vector<double>(channels, 0.0), Component::Flow);
    Tensor b = store_.add(tag + ".bias", {channels}, std::vector<double>(channels, 0.0), Component::Flow);
    auto an = std::make_shared<ActNorm>(ls, b);
    actnorms_[flow_.size()] = an;
    flow_.add(an);
  };
  auto add_coupling = [&](const GroupPartition& part, const std::shared_ptr<Estimator>& est, std::size_t k) {
    EstimatorFn fn = bind_flow(est, k);
    if (cfg_.coupling == CouplingKind::Affine) {
      affine_conditioners_[flow_.size()] = fn;
      flow_.add(std::make_shared<AffineCoupling>(part, fn));
    } else {
      flow_.add(std::make_shared<SplineCoupling>(part, fn, cfg_.spline));
    }
  };

  if (is_grid(cfg_.layout)) {
    const std::size_t n = cfg_.data_dims(), W = n / G;
    std::vector<std::ptrdiff_t> out_to_in(n);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t w = 0; w < W; ++w)
        out_to_in[g * W + w] = static_cast<std::ptrdiff_t>(cfg_.layout == Layout::Flat ? g * W + w : w * G + g);
    flow_.add(std::make_shared<Relayout>(cfg_.item_shape(), Shape{G, W, 1}, std::move(out_to_in)));

    EstimatorConfig ec = base;
    ec.kind = TrunkKind::Grid;
    ec.item = {G, W, 1};
    auto est = std::make_shared<Estimator>(ec, store_, root);
    estimators_.push_back(est);
    const GroupPartition part(G, 1, G);
    for (std::size_t k = 0; k < K; ++k) {
      if (cfg_.effective_actnorm()) add_actnorm("", k, 1);
      add_coupling(part, est, k);
      flow_.add(std::make_shared<ReversePermutation>(part));
    }
    return;
  }

  std::size_t h = cfg_.height, w = cfg_.width, c = cfg_.channels;
  for (std::size_t s = 0; s < cfg_.scales; ++s) {
    flow_.add(std::make_shared<Squeeze>());
    h /= 2;
    w /= 2;
    c *= 4;
    const std::string prefix = "s" + std::to_string(s) + ".";
    EstimatorConfig ec = base;
    ec.kind = TrunkKind::Image;
    ec.item = {h, w, c};
    auto est = std::make_shared<Estimator>(ec, store_, root, prefix);
    estimators_.push_back(est);
    const GroupPartition part(G, 3, c);
    for (std::size_t k = 0; k < K; ++k) {
      if (cfg_.effective_actnorm()) add_actnorm(prefix, k, c);
      if (cfg_.effective_permutation() == PermutationKind::InvConv) {
        const std::string name = prefix + "invconv.f" + std::to_string(k) + ".w";
        Tensor wt = store_.add(name, {c, c}, random_rotation(c, root.fork(stable_hash(name))), Component::Flow);
        flow_.add(std::make_shared<InvConv1x1>(wt));
      } else {
        flow_.add(std::make_shared<ReversePermutation>(part));
      }
      add_coupling(part, est, k);
    }
    if (s + 1 < cfg_.scales) {
      flow_.add_factor_out();
      c /= 2;
    }
  }
}

Shape FlowModel::batch_shape(std::size_t n) const {
  Shape s{n};
  for (auto d : cfg_.item_shape()) s.push_back(d);
  return s;
}

FlowComposition::Evaluation FlowModel::evaluate(const Tensor& x) const {
  const Shape expect = batch_shape(x.rank() > 0 ? x.dim(0) : 1);
  if (x.shape() != expect)
    throw DimensionError("model input " + shape_str(x.shape()) + " does not match " + shape_str(expect));
  return flow_.evaluate(x);
}

Tensor FlowModel::sample(std::size_t n, double temperature, Rng& rng) const {
  if (n == 0) throw ContractError("sample needs n >= 1");
  return flow_.inverse(flow_.sample_latents(batch_shape(1), n, temperature, rng));
}

void FlowModel::initialize_actnorm(const Tensor& x) {
  if (actnorms_.empty()) {
    actnorm_initialized_ = true;
    return;
  }
  NoGradGuard no_grad;
  flow_.evaluate(x, [this](std::size_t i, const Bijection&, const Tensor& input) {
    auto it = actnorms_.find(i);
    if (it != actnorms_.end()) it->second->initialize(input);
  });
  actnorm_initialized_ = true;
}

std::vector<double> FlowModel::coupling_log_sigma_peaks(const Tensor& x) const {
  NoGradGuard no_grad;
  std::vector<std::pair<std::size_t, double>> found;
  flow_.evaluate(x, [&](std::size_t i, const Bijection&, const Tensor& input) {
    auto it = affine_conditioners_.find(i);
    if (it == affine_conditioners_.end()) return;
    const Tensor raw = it->second(input);
    double peak = 0.0;
    for (std::size_t j = 1; j < raw.numel(); j += 2) peak = std::max(peak, std::abs(raw.data()[j]));
    found.emplace_back(i, peak);
  });
  std::vector<double> out;
  for (const auto& [_, v] : found) out.push_back(v);
  return out;
}

double FlowModel::max_abs_gate() const {
  double m = 0.0;
  for (const auto& e : estimators_) m = std::max(m, e->max_abs_gate());
  return m;
}

void FlowModel::copy_values_from(const FlowModel& other) {
  for (const auto& e : other.store_.entries()) store_.assign(e.name, e.tensor.data());
  actnorm_initialized_ = other.actnorm_initialized_;
}

FlowModel FlowModel::clone() const {
  FlowModel m(cfg_);
  m.copy_values_from(*this);
  return m;
}

FlowModel build_model(const ModelConfig& config) { return FlowModel(config); }

ParameterLedger count_parameters(const FlowModel& model) {
  ParameterLedger l;
  for (const auto& e : model.params().entries()) {
    if (!e.trainable) continue;
    const std::size_t n = e.tensor.numel();
    switch (e.component) {
      case Component::Trunk: l.trunk += n; break;
      case Component::Head: l.head += n; break;
      case Component::Embedding: l.embedding += n; break;
      case Component::Injection: l.injection += n; break;
      case Component::Flow: l.flow += n; break;
      case Component::Cache: break;
    }
  }
  return l;
}

FlowModel cache_additive_biases(const FlowModel& model) {
  const ModelConfig& cfg = model.config();
  if (cfg.biases_cached) return model.clone();
  if (cfg.scheme != Scheme::NanoFlow || !cfg.effective_injections().additive)
    throw ConfigError("bias caching needs a nanoflow model with additive injection");
  ModelConfig cached_cfg = cfg;
  cached_cfg.biases_cached = true;
  FlowModel out(cached_cfg);
  for (const auto& e : model.params().entries())
    if (out.params().contains(e.name)) out.params().assign(e.name, e.tensor.data());
  for (const auto& est : model.estimators())
    for (const auto& [name, value] : est->projected_biases()) out.params().assign(name, value.data());
  out.set_actnorm_initialized(model.actnorm_initialized());
  return out;
}

namespace {
constexpr const char* kManifest = "manifest.json";
constexpr const char* kParams = "params.nftn";
}  // namespace

void save_checkpoint(const FlowModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json table = json::array();
  std::vector<Tensor> tensors;
  for (const auto& e : model.params().entries()) {
    table.push_back({{"name", e.name},
                     {"shape", e.tensor.shape()},
                     {"component", to_string(e.component)},
                     {"trainable", e.trainable}});
    tensors.push_back(e.tensor);
  }
  json manifest{{"format", "nanoflow-checkpoint"},
                {"version", 1},
                {"config", model.config().to_json()},
                {"actnorm_initialized", model.actnorm_initialized()},
                {"tensors", table}};
  std::ofstream os(dir / kManifest);
  if (!os) throw FormatError("cannot write " + (dir / kManifest).string());
  os << manifest.dump(2) << '\n';
  save_tensors(dir / kParams, tensors);
}

FlowModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / kManifest);
  if (!is) throw FormatError("cannot open " + (dir / kManifest).string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format", std::string()) != "nanoflow-checkpoint" || manifest.value("version", 0) != 1)
    throw FormatError("not a version-1 nanoflow checkpoint");
  FlowModel model(ModelConfig::from_json(manifest.at("config")));
  const auto tensors = load_tensors(dir / kParams);
  const auto& table = manifest.at("tensors");
  const auto& entries = model.params().entries();
  if (table.size() != entries.size() || tensors.size() != entries.size())
    throw FormatError("checkpoint tensor count does not match the model built from its config");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (table[i].at("name").get<std::string>() != entries[i].name || tensors[i].shape() != entries[i].tensor.shape())
      throw FormatError("checkpoint tensor " + std::to_string(i) + " does not match " + entries[i].name);
    model.params().assign(entries[i].name, tensors[i].data());
  }
  model.set_actnorm_initialized(manifest.value("actnorm_initialized", false));
  return model;
}

}  // namespace nf
