#include "nanoflow/estimator.hpp"

#include <algorithm>
#include <cmath>

#include "nanoflow/errors.hpp"
#include "nanoflow/ops.hpp"

namespace nf {

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::Baseline: return "baseline";
    case Scheme::Naive: return "naive";
    case Scheme::Decomp: return "decomp";
    case Scheme::NanoFlow: return "nanoflow";
  }
  return "?";
}

Scheme scheme_from_string(std::string_view s) {
  if (s == "baseline") return Scheme::Baseline;
  if (s == "naive") return Scheme::Naive;
  if (s == "decomp") return Scheme::Decomp;
  if (s == "nanoflow") return Scheme::NanoFlow;
  throw ConfigError("unknown scheme '" + std::string(s) + "'");
}

Injections injections_from_string(std::string_view s) {
  Injections inj;
  if (s == "none" || s.empty()) return inj;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t end = std::min(s.find('+', pos), s.size());
    const std::string_view tok = s.substr(pos, end - pos);
    if (tok == "concat")
      inj.concat = true;
    else if (tok == "additive")
      inj.additive = true;
    else if (tok == "gate")
      inj.gate = true;
    else
      throw ConfigError("unknown injection mode '" + std::string(tok) + "'");
    pos = end + 1;
  }
  return inj;
}

std::string to_string(const Injections& inj) {
  std::string out;
  auto append = [&](const char* tok) { out += out.empty() ? tok : std::string("+") + tok; };
  if (inj.concat) append("concat");
  if (inj.additive) append("additive");
  if (inj.gate) append("gate");
  return out.empty() ? "none" : out;
}

std::size_t EstimatorConfig::effective_shared_layers() const {
  if (shared_layers) return *shared_layers;
  return scheme == Scheme::Baseline ? 0 : layers;
}

std::size_t EstimatorConfig::concat_channels() const {
  if (!injections.concat || item.size() != 3) return 0;
  return embed_dim / (item[0] * item[1]);
}

void EstimatorConfig::validate() const {
  if (flows == 0 || hidden == 0 || layers == 0 || arity == 0) throw ConfigError("flows, hidden, layers, arity must be positive");
  if (item.size() != 3 || shape_numel(item) == 0) throw ConfigError("estimator item shape must be [rows, cols, channels]");
  const std::size_t s = effective_shared_layers();
  if (s > layers) throw ConfigError("shared_layers exceeds layers");
  if (scheme == Scheme::Baseline && s != 0) throw ConfigError("baseline scheme shares no layers");
  if ((embed_dim > 0) != (scheme == Scheme::NanoFlow))
    throw ConfigError("embed_dim is set exactly for the nanoflow scheme");
  if (scheme != Scheme::NanoFlow && injections.any()) throw ConfigError("injections require the nanoflow scheme");
  if (scheme == Scheme::NanoFlow && !injections.any()) throw ConfigError("nanoflow needs at least one injection mode");
  if (injections.concat && embed_dim % (item[0] * item[1]) != 0)
    throw ConfigError("concat injection needs embed_dim divisible by rows*cols = " + std::to_string(item[0] * item[1]));
  if ((biases_cached || per_flow_projection) && !injections.additive)
    throw ConfigError("bias caching and per-flow projections need additive injection");
  if (kind == TrunkKind::Grid && item[0] < 2) throw ConfigError("grid trunk needs at least two rows (groups)");
  if (kind == TrunkKind::Image && (groups < 2 || item[2] % groups != 0))
    throw ConfigError("image trunk needs groups >= 2 dividing the channel count");
}

Tensor inject_concat(const Tensor& x, const Tensor& e_k) {
  if (x.rank() != 4) throw DimensionError("inject_concat expects [B, H, W, C]");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t D = e_k.numel();
  if (D % (H * W) != 0)
    throw ConfigError("embedding size " + std::to_string(D) + " not divisible by H*W = " + std::to_string(H * W));
  const std::size_t extra = D / (H * W);
  auto index = std::make_shared<std::vector<std::ptrdiff_t>>(B * H * W * extra);
  std::size_t i = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t c = 0; c < extra; ++c) (*index)[i++] = static_cast<std::ptrdiff_t>((c * H + r) * W + w);
  const Tensor parts[] = {x, gather(e_k, {B, H, W, extra}, index)};
  return concat(parts, 3);
}

Tensor inject_additive(const Tensor& h, const Tensor& e_k, const Tensor& w_l) {
  const Tensor bias = matmul(reshape(e_k, {1, e_k.numel()}), w_l);
  return add(h, reshape(bias, {bias.numel()}));
}

Tensor inject_gate(const Tensor& h, const Tensor& delta) { return mul(h, exp(delta)); }

namespace {

std::string flow_tag(std::size_t k) { return "f" + std::to_string(k) + "."; }
std::string layer_tag(std::size_t l) { return "l" + std::to_string(l); }

}  // namespace

std::string Estimator::cache_name(const std::string& prefix, std::size_t k, std::size_t l) {
  return prefix + "cache." + flow_tag(k) + layer_tag(l);
}

Estimator::Estimator(EstimatorConfig config, ParamStore& store, const Rng& rng, std::string prefix)
    : cfg_(std::move(config)), prefix_(std::move(prefix)) {
  cfg_.validate();
  const std::size_t K = cfg_.flows, H = cfg_.hidden, L = cfg_.layers, D = cfg_.embed_dim;
  const std::size_t C = cfg_.item[2], s = cfg_.effective_shared_layers();
  const bool grid = cfg_.kind == TrunkKind::Grid;
  const bool per_flow_heads = cfg_.scheme == Scheme::Decomp || cfg_.scheme == Scheme::NanoFlow;
  const Component head_component = per_flow_heads ? Component::Head : Component::Trunk;
  const std::size_t grid_kw = cfg_.item[1] >= 3 ? 3 : 1;

  auto make = [&](const std::string& name, Shape shape, double bound, Component comp) {
    const std::string full = prefix_ + name;
    if (store.contains(full)) return store.get(full);
    const std::size_t n = shape_numel(shape);
    return store.add(full, std::move(shape), bound > 0 ? uniform_init(n, bound, rng.fork(stable_hash(full)))
                                                       : std::vector<double>(n, 0.0),
                     comp);
  };
  auto conv_layer = [&](const std::string& name, std::size_t kh, std::size_t kw, std::size_t ci, std::size_t co,
                        Component comp) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(kh * kw * ci));
    return Layer{make(name + ".w", {kh, kw, ci, co}, bound, comp), make(name + ".b", {co}, 0.0, comp)};
  };

  const std::size_t start_k = grid ? 1 : 3;
  if (cfg_.injections.concat && cfg_.start_shared()) {
    const std::size_t extra = cfg_.concat_channels();
    const double bound = 1.0 / std::sqrt(static_cast<double>(start_k * start_k * (C + extra)));
    start_emb_w_ = make("inject.start_emb.w", {start_k, start_k, extra, H}, bound, Component::Injection);
  }

  flows_.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    FlowParams& p = flows_[k];
    const std::string own = flow_tag(k);
    p.start = conv_layer((cfg_.start_shared() ? "" : own) + "trunk.start", start_k, start_k, C, H,
                         Component::Trunk);
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t kh = grid ? 2 : (l % 2 == 0 ? 1 : 3);
      const std::size_t kw = grid ? grid_kw : kh;
      p.layers.push_back(conv_layer((l < s ? "" : own) + "trunk." + layer_tag(l), kh, kw, H, H, Component::Trunk));
    }
    const std::string head_name = cfg_.head_shared() ? "head" : own + "head";
    p.head = Layer{make(head_name + ".w", {1, 1, H, C * cfg_.arity}, 0.0, head_component),
                   make(head_name + ".b", {C * cfg_.arity}, 0.0, head_component)};

    if (cfg_.scheme != Scheme::NanoFlow) continue;
    {
      const std::string full = prefix_ + "embed." + own.substr(0, own.size() - 1);
      p.embedding = store.add(full, {1, D}, normal_init(D, 0.01, rng.fork(stable_hash(full))), Component::Embedding);
    }
    for (std::size_t l = 0; l < s; ++l) {
      if (cfg_.injections.additive) {
        if (cfg_.biases_cached) {
          p.additive.push_back(store.add(cache_name(prefix_, k, l), {1, H}, std::vector<double>(H, 0.0),
                                         Component::Cache, false));
        } else {
          const std::string name = (cfg_.per_flow_projection ? "inject." + own : std::string("inject.")) + layer_tag(l) + ".proj";
          const std::string full = prefix_ + name;
          if (store.contains(full)) {
            p.additive.push_back(store.get(full));
          } else {
            p.additive.push_back(store.add(full, {D, H},
                                           normal_init(D * H, 1.0 / std::sqrt(static_cast<double>(D)),
                                                       rng.fork(stable_hash(full))),
                                           Component::Injection));
          }
        }
      }
      if (cfg_.injections.gate)
        p.gate.push_back(make("inject." + own + layer_tag(l) + ".gate", {H}, 0.0, Component::Injection));
    }
  }
}

Tensor Estimator::run_trunk(const Tensor& input, const FlowParams& p) const {
  const bool grid = cfg_.kind == TrunkKind::Grid;
  const std::size_t s = cfg_.effective_shared_layers();
  Tensor h;
  if (start_emb_w_.defined()) {
    const Tensor kernels[] = {p.start.w, start_emb_w_};
    h = conv2d(inject_concat(input, p.embedding), concat(kernels, 2));
  } else {
    h = conv2d(input, p.start.w);
  }
  h = add(h, p.start.b);
  if (!grid) h = relu(h);

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    ConvOptions opts;
    if (grid) {
      opts.pad_h = Padding::Causal;
      opts.dilation_h = std::size_t{1} << std::min<std::size_t>(l, 20);
    }
    Tensor pre = add(conv2d(h, p.layers[l].w, opts), p.layers[l].b);
    if (l < s && cfg_.scheme == Scheme::NanoFlow) {
      if (cfg_.injections.additive) {
        pre = cfg_.biases_cached ? add(pre, reshape(p.additive[l], {cfg_.hidden}))
                                 : inject_additive(pre, p.embedding, p.additive[l]);
      }
      if (cfg_.injections.gate) pre = inject_gate(pre, p.gate[l]);
    }
    h = add(h, grid ? tanh(pre) : relu(pre));
  }
  return add(conv2d(h, p.head.w), p.head.b);
}

Tensor Estimator::grid_estimate(const Tensor& context, const FlowParams& p) const {
  // Row r sees rows < r only: shift down by one, zero-filling row 0.
  const std::size_t B = context.dim(0), R = context.dim(1), row = context.dim(2) * context.dim(3);
  auto index = std::make_shared<std::vector<std::ptrdiff_t>>(context.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t j = 0; j < row; ++j)
        (*index)[(b * R + r) * row + j] = r == 0 ? -1 : static_cast<std::ptrdiff_t>((b * R + r - 1) * row + j);
  return run_trunk(gather(context, context.shape(), index), p);
}

Tensor Estimator::image_estimate(const Tensor& context, const FlowParams& p) const {
  const std::size_t B = context.dim(0), C = context.dim(3), G = cfg_.groups, gs = C / G;
  const std::size_t P = cfg_.arity;
  // Pass i sees only channel groups < i; all passes run as one stacked batch.
  std::vector<Tensor> masked;
  for (std::size_t i = 0; i < G; ++i) {
    std::vector<double> m(C, 0.0);
    std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(i * gs), 1.0);
    masked.push_back(mul(context, Tensor({C}, std::move(m))));
  }
  const Tensor out = run_trunk(concat(masked, 0), p);  // [G*B, h, w, C*P]
  const std::size_t per_item = out.numel() / (G * B), CP = C * P;
  auto index = std::make_shared<std::vector<std::ptrdiff_t>>(B * per_item);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < per_item; ++j) {
      const std::size_t group = (j % CP) / P / gs;
      (*index)[b * per_item + j] = static_cast<std::ptrdiff_t>((group * B + b) * per_item + j);
    }
  Shape shape = out.shape();
  shape[0] = B;
  return gather(out, shape, index);
}

Tensor Estimator::estimate(const Tensor& context, std::size_t k) const {
  if (k >= cfg_.flows)
    throw ContractError("flow index " + std::to_string(k) + " out of range for K = " + std::to_string(cfg_.flows));
  if (context.rank() != 4 || context.dim(1) != cfg_.item[0] || context.dim(2) != cfg_.item[1] ||
      context.dim(3) != cfg_.item[2])
    throw DimensionError("estimator context " + shape_str(context.shape()) + " does not match item " +
                         shape_str(cfg_.item));
  return cfg_.kind == TrunkKind::Grid ? grid_estimate(context, flows_[k]) : image_estimate(context, flows_[k]);
}

std::vector<std::pair<std::string, Tensor>> Estimator::projected_biases() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (cfg_.scheme != Scheme::NanoFlow || !cfg_.injections.additive) return out;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < flows_.size(); ++k)
    for (std::size_t l = 0; l < flows_[k].additive.size(); ++l) {
      const Tensor& a = flows_[k].additive[l];
      out.emplace_back(cache_name(prefix_, k, l),
                       cfg_.biases_cached ? a : matmul(reshape(flows_[k].embedding, {1, cfg_.embed_dim}), a));
    }
  return out;
}

double Estimator::max_abs_gate() const {
  double m = 0.0;
  for (const auto& f : flows_)
    for (const auto& g : f.gate)
      for (double v : g.data()) m = std::max(m, std::abs(v));
  return m;
}

EstimatorFn bind_flow(std::shared_ptr<const Estimator> estimator, std::size_t k) {
  return [est = std::move(estimator), k](const Tensor& context) { return est->estimate(context, k); };
}

}  // namespace nf
