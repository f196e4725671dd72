#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "doctest.h"
#include "nanoflow/errors.hpp"
#include "nanoflow/model.hpp"
#include "oracles.hpp"

using namespace nf;
using oracle::max_abs_diff;
using oracle::random_tensor;
using oracle::values_equal;

namespace {

ModelConfig seq_config(Scheme scheme, std::size_t K = 4) {
  ModelConfig c;
  c.scheme = scheme;
  c.layout = Layout::Sequence;
  c.length = 16;
  c.groups = 4;
  c.flows = K;
  c.hidden = 8;
  c.layers = 2;
  if (scheme == Scheme::NanoFlow) c.embed_dim = 8;
  c.seed = 3;
  return c;
}

ModelConfig image_config(Scheme scheme) {
  ModelConfig c;
  c.scheme = scheme;
  c.layout = Layout::Image;
  c.height = 8;
  c.width = 8;
  c.channels = 1;
  c.scales = 2;
  c.flows = 2;
  c.groups = 2;
  c.hidden = 6;
  c.layers = 2;
  if (scheme == Scheme::NanoFlow) c.embed_dim = 16;
  c.seed = 4;
  return c;
}

// Perturbs estimator tensors; heads get a tenth of the scale so that log
// sigma stays moderate when K couplings compose.
void randomize(FlowModel& m, Rng& rng, double scale) {
  for (const auto& e : m.params().entries()) {
    if (!e.trainable || e.component == Component::Flow) continue;
    const bool head = e.name.find("head.") != std::string::npos;
    std::vector<double> v(e.tensor.data().begin(), e.tensor.data().end());
    for (auto& x : v) x += rng.uniform(-scale, scale) * (head ? 0.1 : 1.0);
    m.params().assign(e.name, v);
  }
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nanoflow_test_model_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("config json round trip and validation") {
  for (const ModelConfig& c : {seq_config(Scheme::NanoFlow), image_config(Scheme::Decomp)}) {
    const ModelConfig back = ModelConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
  }
  CHECK_THROWS_AS(ModelConfig::from_json({{"scheme", "naive"}, {"hiden", 4}}), ConfigError);
  ModelConfig bad = seq_config(Scheme::Baseline);
  bad.embed_dim = 4;
  CHECK_THROWS_AS(build_model(bad), ConfigError);
  bad = seq_config(Scheme::Naive);
  bad.groups = 5;
  CHECK_THROWS_AS(build_model(bad), ConfigError);
  bad = image_config(Scheme::Naive);
  bad.height = 6;
  CHECK_THROWS_AS(build_model(bad), ConfigError);
}

TEST_CASE("build counts per scheme") {
  ModelConfig c = seq_config(Scheme::Naive, 8);
  FlowModel naive = build_model(c);
  std::size_t heads = 0;
  for (const auto& e : naive.params().entries())
    if (e.name.find("head.w") != std::string::npos) ++heads;
  CHECK(heads == 1);
  CHECK(count_parameters(naive).head == 0);

  FlowModel nano = build_model(seq_config(Scheme::NanoFlow, 8));
  std::size_t nano_heads = 0, embeds = 0, starts = 0;
  for (const auto& e : nano.params().entries()) {
    if (e.name.find("head.w") != std::string::npos) ++nano_heads;
    if (e.component == Component::Embedding) ++embeds;
    if (e.name.find("trunk.start.w") != std::string::npos) ++starts;
  }
  CHECK(nano_heads == 8);
  CHECK(embeds == 8);
  CHECK(starts == 1);
  CHECK(count_parameters(nano).embedding == 8 * 8);
}

TEST_CASE("same seed gives byte-identical checkpoints") {
  for (Scheme s : {Scheme::Baseline, Scheme::NanoFlow}) {
    const auto a = temp_dir("seed_a"), b = temp_dir("seed_b");
    save_checkpoint(build_model(image_config(s)), a);
    save_checkpoint(build_model(image_config(s)), b);
    CHECK(read_bytes(a / "params.nftn") == read_bytes(b / "params.nftn"));
    CHECK(read_bytes(a / "manifest.json") == read_bytes(b / "manifest.json"));
    ModelConfig other = image_config(s);
    other.seed = 5;
    save_checkpoint(build_model(other), b);
    CHECK(read_bytes(a / "params.nftn") != read_bytes(b / "params.nftn"));
  }
}

TEST_CASE("ledger identities over random configs") {
  Rng rng(20);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig c;
    const bool image = rng.uniform() < 0.3;
    const std::size_t K = 1 + rng.below(9), H = 2 + rng.below(10), L = 1 + rng.below(3);
    c.flows = K;
    c.hidden = H;
    c.layers = L;
    c.seed = rng.next_u64();
    if (image) {
      c.layout = Layout::Image;
      c.height = c.width = 4;
      c.scales = 1 + rng.below(2);
      c.channels = 1;
      c.groups = 2;
    } else {
      c.layout = rng.uniform() < 0.5 ? Layout::Flat : Layout::Sequence;
      c.groups = std::size_t{2} << rng.below(3);
      const std::size_t n = c.groups * (1 + rng.below(4));
      c.dim = n;
      c.length = n;
    }
    if (rng.uniform() < 0.5) {
      c.coupling = CouplingKind::RqSpline;
      c.spline.bins = 2 + rng.below(4);
    }
    const std::size_t C0 = image ? 4 * c.channels : 1;
    const std::size_t arity = c.coupling == CouplingKind::Affine ? 2 : c.spline.arity();

    auto ledger = [&](Scheme s, std::size_t D, Injections inj, bool per_flow = false) {
      ModelConfig m = c;
      m.scheme = s;
      m.embed_dim = D;
      if (s == Scheme::NanoFlow) m.injections = inj;
      m.per_flow_projection = per_flow;
      return count_parameters(build_model(m));
    };
    const ParameterLedger base = ledger(Scheme::Baseline, 0, {});
    const ParameterLedger naive = ledger(Scheme::Naive, 0, {});
    const ParameterLedger decomp = ledger(Scheme::Decomp, 0, {});
    CHECK(base.trunk == K * naive.trunk);
    CHECK(base.flow == naive.flow);
    // The head of the naive network moves into K per-flow heads.
    const std::size_t scales = image ? c.scales : 1;
    std::size_t head_total = 0, channels = C0;
    for (std::size_t s = 0; s < scales; ++s) {
      head_total += H * channels * arity + channels * arity;
      channels = channels * 2;  // factor-out halves, next squeeze quadruples
    }
    CHECK(decomp.head == K * head_total);
    CHECK(decomp.trunk + head_total == naive.trunk);

    // Embedding size compatible with every scale's spatial area.
    const std::size_t D = image ? 16 * (1 + rng.below(2)) : c.groups * (c.dim / c.groups) * (1 + rng.below(3));
    for (Injections inj : {Injections{false, true, true}, Injections{true, false, true}, Injections{true, true, false}}) {
      const bool per_flow = inj.additive && rng.uniform() < 0.3;
      const ParameterLedger nano = ledger(Scheme::NanoFlow, D, inj, per_flow);
      std::size_t expect_inj = 0;
      std::size_t h = image ? c.height / 2 : c.groups, w = image ? c.width / 2 : c.dim / c.groups;
      for (std::size_t s = 0; s < scales; ++s) {
        const std::size_t kk = image ? 9 : 1;
        if (inj.concat) expect_inj += kk * (D / (h * w)) * H;
        if (inj.additive) expect_inj += (per_flow ? K : 1) * L * D * H;
        if (inj.gate) expect_inj += K * L * H;
        h /= 2;
        w /= 2;
      }
      CHECK(nano.injection == expect_inj);
      CHECK(nano.total() - decomp.total() == scales * K * D + expect_inj);
      CHECK(nano.embedding == scales * K * D);
    }
  }
}

TEST_CASE("desk configuration parameter efficiency") {
  ModelConfig c;
  c.layout = Layout::Sequence;
  c.length = 256;
  c.groups = 16;
  c.flows = 8;
  c.hidden = 64;
  c.layers = 4;
  auto total = [&](Scheme s, std::size_t K) {
    ModelConfig m = c;
    m.scheme = s;
    m.flows = K;
    m.embed_dim = s == Scheme::NanoFlow ? 64 : 0;
    return count_parameters(build_model(m)).total();
  };
  const double ratio = static_cast<double>(total(Scheme::NanoFlow, 8)) / static_cast<double>(total(Scheme::Baseline, 8));
  CHECK(ratio < 0.2);
  CHECK(static_cast<double>(total(Scheme::NanoFlow, 16)) < 1.1 * static_cast<double>(total(Scheme::NanoFlow, 8)));
  CHECK(total(Scheme::Baseline, 16) - total(Scheme::Baseline, 8) == total(Scheme::Baseline, 8));
}

TEST_CASE("sequence layout is column-major over groups") {
  ModelConfig c = seq_config(Scheme::Naive);
  FlowModel m = build_model(c);  // identity at init, even number of reversals
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const auto ev = m.evaluate(Tensor({1, 16}, v));
  CHECK(ev.latents.final.shape() == Shape{1, 4, 4, 1});
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t w = 0; w < 4; ++w) CHECK(ev.latents.final.data()[g * 4 + w] == static_cast<double>(w * 4 + g));
}

TEST_CASE("round trips through every model family") {
  Rng rng(21);
  for (Scheme s : {Scheme::Baseline, Scheme::Naive, Scheme::Decomp, Scheme::NanoFlow}) {
    for (int fam = 0; fam < 3; ++fam) {
      ModelConfig c = fam == 2 ? image_config(s) : seq_config(s);
      if (fam == 1) c.coupling = CouplingKind::RqSpline;
      FlowModel m = build_model(c);
      const Tensor x = random_tensor(m.batch_shape(3), rng, -1.5, 1.5);
      if (fam == 2) m.initialize_actnorm(x);
      randomize(m, rng, 0.3);
      const auto ev = m.evaluate(x);
      CHECK(max_abs_diff(m.inverse(ev.latents), x) < 1e-6);
    }
  }
}

TEST_CASE("sampling") {
  ModelConfig c;
  c.scheme = Scheme::NanoFlow;
  c.layout = Layout::Flat;
  c.dim = 2;
  c.groups = 2;
  c.flows = 4;
  c.hidden = 8;
  c.layers = 2;
  c.embed_dim = 4;
  FlowModel m = build_model(c);

  // Identity at init: samples are the prior draws themselves.
  Rng a(9), b(9);
  const Tensor s = m.sample(5, 0.7, a);
  for (std::size_t i = 0; i < 10; ++i) CHECK(s.data()[i] == 0.7 * b.normal());

  Rng rng(10);
  randomize(m, rng, 0.3);
  Rng c1(11);
  const Tensor cold = m.sample(6, 1e-13, c1);
  const Tensor at_zero = m.inverse({{}, Tensor({1, 2, 1, 1}, 0.0)});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t d = 0; d < 2; ++d) CHECK(std::abs(cold.data()[i * 2 + d] - at_zero.data()[d]) < 1e-9);
  CHECK_THROWS_AS(m.sample(0, 1.0, rng), ContractError);
  CHECK_THROWS_AS(m.sample(2, 0.0, rng), ContractError);
}

TEST_CASE("density integrates to one on a 2-d grid") {
  ModelConfig c;
  c.scheme = Scheme::Decomp;
  c.layout = Layout::Flat;
  c.dim = 2;
  c.groups = 2;
  c.flows = 4;
  c.hidden = 8;
  c.layers = 2;
  FlowModel m = build_model(c);
  Rng rng(12);
  randomize(m, rng, 0.4);
  const double lo = -6, hi = 6;
  const std::size_t n = 480;
  const double step = (hi - lo) / n;
  double total = 0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> pts(2 * n);
    for (std::size_t j = 0; j < n; ++j) {
      pts[2 * j] = lo + (i + 0.5) * step;
      pts[2 * j + 1] = lo + (j + 0.5) * step;
    }
    const Tensor lp = m.log_likelihood(Tensor({n, 2}, pts));
    for (double v : lp.data()) total += std::exp(v) * step * step;
  }
  CHECK(std::abs(total - 1.0) < 1e-2);
}

TEST_CASE("scheme reductions") {
  Rng rng(13);
  // decomp with every head equal to the naive head computes naive.
  FlowModel naive = build_model(seq_config(Scheme::Naive));
  FlowModel decomp = build_model(seq_config(Scheme::Decomp));
  randomize(naive, rng, 0.3);
  for (const auto& e : naive.params().entries()) {
    if (decomp.params().contains(e.name)) decomp.params().assign(e.name, e.tensor.data());
    if (e.name.rfind("head.", 0) == 0)
      for (std::size_t k = 0; k < 4; ++k) decomp.params().assign("f" + std::to_string(k) + "." + e.name, e.tensor.data());
  }
  const Tensor x = random_tensor(naive.batch_shape(4), rng);
  CHECK(values_equal(naive.log_likelihood(x), decomp.log_likelihood(x)));

  // nanoflow with zeroed injections computes decomp.
  FlowModel nano = build_model(seq_config(Scheme::NanoFlow));
  for (const auto& e : nano.params().entries()) {
    if (decomp.params().contains(e.name)) nano.params().assign(e.name, decomp.params().get(e.name).data());
    else if (e.component == Component::Injection) nano.params().assign(e.name, std::vector<double>(e.tensor.numel(), 0.0));
  }
  CHECK(values_equal(nano.log_likelihood(x), decomp.log_likelihood(x)));
}

TEST_CASE("bias caching") {
  Rng rng(14);
  ModelConfig c = seq_config(Scheme::NanoFlow);
  FlowModel m = build_model(c);
  randomize(m, rng, 0.3);
  FlowModel cached = cache_additive_biases(m);
  const Tensor x = random_tensor(m.batch_shape(5), rng);
  const auto a = m.evaluate(x), b = cached.evaluate(x);
  CHECK(values_equal(a.log_prob, b.log_prob));
  CHECK(values_equal(a.latents.final, b.latents.final));
  Rng r1(3), r2(3);
  CHECK(values_equal(m.sample(4, 1.0, r1), cached.sample(4, 1.0, r2)));
  CHECK(count_parameters(m).total() - count_parameters(cached).total() == c.layers * c.embed_dim * c.hidden);
  std::size_t entries = 0;
  for (const auto& e : cached.params().entries())
    if (e.component == Component::Cache) {
      ++entries;
      CHECK(e.tensor.numel() == c.hidden);
    }
  CHECK(entries == c.flows * c.layers);
  CHECK_THROWS_AS(cache_additive_biases(build_model(seq_config(Scheme::Decomp))), ConfigError);

  // a cached model survives a checkpoint round trip
  const auto dir = temp_dir("cached");
  save_checkpoint(cached, dir);
  CHECK(values_equal(load_checkpoint(dir).log_likelihood(x), b.log_prob));
}

TEST_CASE("checkpoint round trip and validation") {
  Rng rng(15);
  FlowModel m = build_model(image_config(Scheme::NanoFlow));
  const Tensor x = random_tensor(m.batch_shape(2), rng, 0.0, 1.0);
  m.initialize_actnorm(x);
  randomize(m, rng, 0.2);
  const auto dir = temp_dir("ckpt");
  save_checkpoint(m, dir);
  FlowModel back = load_checkpoint(dir);
  CHECK(back.actnorm_initialized());
  CHECK(values_equal(back.log_likelihood(x), m.log_likelihood(x)));

  FlowModel c = m.clone();
  CHECK(values_equal(c.log_likelihood(x), m.log_likelihood(x)));

  {
    std::ofstream os(dir / "params.nftn", std::ios::binary | std::ios::app);
    os << "junk";
  }
  CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  std::filesystem::remove(dir / "manifest.json");
  CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
}

TEST_CASE("actnorm data initialization") {
  Rng rng(16);
  FlowModel m = build_model(image_config(Scheme::Baseline));
  CHECK(!m.actnorm_initialized());
  const Tensor x = random_tensor(m.batch_shape(8), rng, 0.0, 1.0);
  m.initialize_actnorm(x);
  CHECK(m.actnorm_initialized());
  // The first actnorm sees the squeezed input and must whiten it.
  const Tensor squeezed = squeeze2x2(x);
  const Tensor ls = m.params().get("s0.actnorm.f0.log_scale"), b = m.params().get("s0.actnorm.f0.bias");
  const Tensor z = actnorm_forward(squeezed, ls, b).z;
  const std::size_t C = 4, rows = z.numel() / C;
  for (std::size_t ch = 0; ch < C; ++ch) {
    double mean = 0;
    for (std::size_t r = 0; r < rows; ++r) mean += z.data()[r * C + ch];
    CHECK(std::abs(mean / rows) < 1e-9);
  }
}
