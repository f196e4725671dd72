#include <cmath>
#include <numbers>

#include "doctest.h"
#include "nanoflow/errors.hpp"
#include "nanoflow/estimator.hpp"
#include "nanoflow/gradcheck.hpp"
#include "oracles.hpp"

using namespace nf;
using oracle::random_tensor;
using oracle::values_equal;

namespace {

EstimatorConfig grid_config(Scheme scheme, Injections inj = {}) {
  EstimatorConfig c;
  c.scheme = scheme;
  c.kind = TrunkKind::Grid;
  c.flows = 4;
  c.hidden = 6;
  c.layers = 2;
  c.item = {4, 3, 1};
  c.arity = 2;
  if (scheme == Scheme::NanoFlow) {
    c.embed_dim = 12;
    c.injections = inj.any() ? inj : Injections{false, true, true};
  }
  return c;
}

EstimatorConfig image_config(Scheme scheme, Injections inj = {}) {
  EstimatorConfig c;
  c.scheme = scheme;
  c.kind = TrunkKind::Image;
  c.flows = 3;
  c.hidden = 5;
  c.layers = 2;
  c.item = {2, 2, 4};
  c.groups = 2;
  c.arity = 2;
  if (scheme == Scheme::NanoFlow) {
    c.embed_dim = 8;
    c.injections = inj.any() ? inj : Injections{true, false, true};
  }
  return c;
}

// Fills every zero-initialized tensor with random values so that heads,
// gates and biases all influence the output.
void randomize(ParamStore& store, Rng& rng, double scale = 0.5) {
  for (const auto& e : store.entries()) {
    std::vector<double> v(e.tensor.numel());
    for (auto& x : v) x = rng.uniform(-scale, scale);
    store.assign(e.name, v);
  }
}

Shape batch_shape(const EstimatorConfig& c, std::size_t B) { return {B, c.item[0], c.item[1], c.item[2]}; }

const Injections kAllCombos[] = {
    {true, false, false}, {false, true, false}, {false, false, true}, {true, true, false},
    {true, false, true},  {false, true, true},  {true, true, true},
};

}  // namespace

TEST_CASE("scheme and injection names round trip") {
  for (Scheme s : {Scheme::Baseline, Scheme::Naive, Scheme::Decomp, Scheme::NanoFlow})
    CHECK(scheme_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(scheme_from_string("glow"), ConfigError);
  for (const auto& inj : kAllCombos) {
    const Injections back = injections_from_string(to_string(inj));
    CHECK(back.concat == inj.concat);
    CHECK(back.additive == inj.additive);
    CHECK(back.gate == inj.gate);
  }
  CHECK(!injections_from_string("none").any());
  CHECK_THROWS_AS(injections_from_string("additive+film"), ConfigError);
}

TEST_CASE("configuration validation") {
  auto c = grid_config(Scheme::Baseline);
  c.embed_dim = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = grid_config(Scheme::NanoFlow);
  c.injections = {};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = grid_config(Scheme::NanoFlow, {true, false, false});
  c.embed_dim = 13;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = grid_config(Scheme::Decomp);
  c.shared_layers = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = grid_config(Scheme::NanoFlow, {false, false, true});
  c.biases_cached = true;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = image_config(Scheme::Naive);
  c.groups = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("estimate dispatch per scheme") {
  Rng rng(1);
  const Tensor ctx = random_tensor(batch_shape(grid_config(Scheme::Naive), 3), rng);

  SUBCASE("naive ignores the flow index") {
    ParamStore store;
    Estimator est(grid_config(Scheme::Naive), store, Rng(2));
    randomize(store, rng);
    CHECK(values_equal(est.estimate(ctx, 0), est.estimate(ctx, 3)));
    CHECK(store.count(Component::Head) == 0);
  }
  SUBCASE("decomp with equal heads gives equal outputs") {
    ParamStore store;
    Estimator est(grid_config(Scheme::Decomp), store, Rng(2));
    CHECK(values_equal(est.estimate(ctx, 0), est.estimate(ctx, 2)));
  }
  SUBCASE("baseline flows are independent networks") {
    ParamStore store;
    Estimator est(grid_config(Scheme::Baseline), store, Rng(2));
    randomize(store, rng);
    CHECK(oracle::max_abs_diff(est.estimate(ctx, 0), est.estimate(ctx, 1)) > 0.0);
    CHECK_THROWS_AS(est.estimate(ctx, 4), ContractError);
  }
  SUBCASE("nanoflow flows diverge after one training step") {
    ParamStore store;
    Estimator est(grid_config(Scheme::NanoFlow), store, Rng(2));
    Tensor weights = random_tensor({3, 4, 3, 2}, rng);
    {
      GradTape tape;
      Tensor loss = sum(add(mul(est.estimate(ctx, 0), weights), mul(est.estimate(ctx, 1), weights)));
      tape.backward(loss);
    }
    for (const auto& e : store.entries()) {
      if (!e.tensor.has_grad()) continue;
      std::vector<double> v(e.tensor.data().begin(), e.tensor.data().end());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.1 * e.tensor.grad()[i];
      store.assign(e.name, v);
    }
    CHECK(oracle::max_abs_diff(est.estimate(ctx, 0), est.estimate(ctx, 1)) > 0.0);
  }
  CHECK_THROWS_AS(
      [] {
        ParamStore store;
        Estimator est(grid_config(Scheme::Naive), store, Rng(0));
        est.estimate(Tensor({1, 4, 2, 1}, 0.0), 0);
      }(),
      DimensionError);
}

TEST_CASE("inject_concat layout") {
  // D = H*W: a single extra channel holding e_k row-major.
  Tensor x({2, 2, 3, 1}, 0.0);
  Tensor e = Tensor::from({1, 2, 3, 4, 5, 6});
  Tensor out = inject_concat(x, e);
  CHECK(out.shape() == Shape{2, 2, 3, 2});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 6; ++p) CHECK(out.data()[(b * 6 + p) * 2 + 1] == e.data()[p]);

  // 2 channels of 2x2 plus D = 8 gives 4 channels; embedding channel c at
  // (r, w) holds e[(c*2 + r)*2 + w].
  Tensor x2({1, 2, 2, 2}, {10, 11, 12, 13, 14, 15, 16, 17});
  Tensor e2 = Tensor::from({0, 1, 2, 3, 4, 5, 6, 7});
  Tensor o2 = inject_concat(x2, e2);
  CHECK(o2.shape() == Shape{1, 2, 2, 4});
  const std::vector<double> expect = {10, 11, 0, 4, 12, 13, 1, 5, 14, 15, 2, 6, 16, 17, 3, 7};
  CHECK(std::vector<double>(o2.data().begin(), o2.data().end()) == expect);

  CHECK_THROWS_AS(inject_concat(x2, Tensor::from({1, 2, 3})), ConfigError);
}

TEST_CASE("inject_additive and inject_gate") {
  Rng rng(3);
  Tensor h = random_tensor({2, 3, 3, 4}, rng);
  Tensor e = random_tensor({1, 5}, rng);
  CHECK(values_equal(inject_additive(h, e, Tensor({5, 4}, 0.0)), h));

  Tensor w = random_tensor({5, 4}, rng);
  Tensor out = inject_additive(h, e, w);
  for (std::size_t c = 0; c < 4; ++c) {
    double bias = 0;
    for (std::size_t d = 0; d < 5; ++d) bias += e.data()[d] * w.data()[d * 4 + c];
    for (std::size_t p = 0; p < 18; ++p)
      CHECK(out.data()[p * 4 + c] - h.data()[p * 4 + c] == doctest::Approx(bias).epsilon(1e-12));
  }

  CHECK(values_equal(inject_gate(h, Tensor({4}, 0.0)), h));
  Tensor doubled = inject_gate(h, Tensor({4}, std::numbers::ln2));
  for (std::size_t i = 0; i < h.numel(); ++i) CHECK(doubled.data()[i] == doctest::Approx(2 * h.data()[i]).epsilon(1e-15));
  Tensor delta = random_tensor({4}, rng);
  Tensor gated = inject_gate(h, delta);
  for (std::size_t p = 0; p < 18; ++p)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(gated.data()[p * 4 + c] / h.data()[p * 4 + c] == doctest::Approx(std::exp(delta.data()[c])).epsilon(1e-12));
}

TEST_CASE("causality: group i parameters ignore groups >= i") {
  Rng rng(4);
  for (Scheme scheme : {Scheme::Baseline, Scheme::Naive, Scheme::Decomp, Scheme::NanoFlow}) {
    for (bool image : {false, true}) {
      const EstimatorConfig cfg = image ? image_config(scheme) : grid_config(scheme);
      ParamStore store;
      Estimator est(cfg, store, Rng(5));
      randomize(store, rng);
      const std::size_t G = image ? cfg.groups : cfg.item[0];
      const Tensor x = random_tensor(batch_shape(cfg, 2), rng);
      for (std::size_t k = 0; k < cfg.flows; ++k) {
        const Tensor base = est.estimate(x, k);
        for (std::size_t i = 0; i < G; ++i) {
          // Perturb every element of groups >= i.
          Tensor y = x.clone();
          auto yd = y.mutable_data();
          const std::size_t rows = cfg.item[0], cols = cfg.item[1], C = cfg.item[2];
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t w = 0; w < cols; ++w)
                for (std::size_t c = 0; c < C; ++c) {
                  const std::size_t g = image ? c / (C / G) : r;
                  if (g >= i) yd[((b * rows + r) * cols + w) * C + c] += 1.7;
                }
          const Tensor moved = est.estimate(y, k);
          const std::size_t P = cfg.arity;
          bool same = true, changed_later = false;
          for (std::size_t j = 0; j < base.numel(); ++j) {
            const std::size_t c = (j % (C * P)) / P;
            const std::size_t r = (j / (C * P) / cols) % rows;
            const std::size_t g = image ? c / (C / G) : r;
            if (g == i && base.data()[j] != moved.data()[j]) same = false;
            if (g > i && base.data()[j] != moved.data()[j]) changed_later = true;
          }
          CHECK(same);
          if (i + 1 < G && i == 0) CHECK(changed_later);
        }
      }
    }
  }
}

TEST_CASE("identity at init: zeroed injections reproduce decomp exactly") {
  Rng rng(6);
  for (bool image : {false, true}) {
    for (const auto& inj : kAllCombos) {
      const EstimatorConfig nano_cfg = image ? image_config(Scheme::NanoFlow, inj) : grid_config(Scheme::NanoFlow, inj);
      if (inj.concat && nano_cfg.embed_dim % (nano_cfg.item[0] * nano_cfg.item[1]) != 0) continue;
      const EstimatorConfig dec_cfg = image ? image_config(Scheme::Decomp) : grid_config(Scheme::Decomp);
      ParamStore nano_store, dec_store;
      Estimator nano(nano_cfg, nano_store, Rng(7));
      Estimator dec(dec_cfg, dec_store, Rng(7));
      // Shared names carry identical values; give them random content.
      for (const auto& e : dec_store.entries()) {
        std::vector<double> v(e.tensor.numel());
        for (auto& x : v) x = rng.uniform(-0.5, 0.5);
        dec_store.assign(e.name, v);
        nano_store.assign(e.name, v);
      }
      for (const auto& e : nano_store.entries()) {
        if (e.component == Component::Embedding) {
          std::vector<double> v(e.tensor.numel());
          for (auto& x : v) x = rng.normal();
          nano_store.assign(e.name, v);
        } else if (e.component == Component::Injection) {
          nano_store.assign(e.name, std::vector<double>(e.tensor.numel(), 0.0));
        }
      }
      const Tensor x = random_tensor(batch_shape(dec_cfg, 3), rng);
      for (std::size_t k = 0; k < dec_cfg.flows; ++k) CHECK(values_equal(nano.estimate(x, k), dec.estimate(x, k)));
    }
  }
}

TEST_CASE("cached additive biases are bit-exact and drop the projections") {
  Rng rng(8);
  for (bool per_flow : {false, true}) {
    EstimatorConfig cfg = grid_config(Scheme::NanoFlow, {false, true, true});
    cfg.per_flow_projection = per_flow;
    ParamStore store;
    Estimator est(cfg, store, Rng(9));
    randomize(store, rng);

    EstimatorConfig cached_cfg = cfg;
    cached_cfg.biases_cached = true;
    ParamStore cached_store;
    Estimator cached(cached_cfg, cached_store, Rng(9));
    for (const auto& e : cached_store.entries())
      if (store.contains(e.name)) cached_store.assign(e.name, store.get(e.name).data());
    const auto biases = est.projected_biases();
    CHECK(biases.size() == cfg.flows * cfg.layers);
    for (const auto& [name, value] : biases) {
      CHECK(cached_store.get(name).shape() == Shape{1, cfg.hidden});
      cached_store.assign(name, value.data());
    }
    const Tensor x = random_tensor(batch_shape(cfg, 2), rng);
    for (std::size_t k = 0; k < cfg.flows; ++k) CHECK(values_equal(est.estimate(x, k), cached.estimate(x, k)));

    const std::size_t proj = (per_flow ? cfg.flows : 1) * cfg.layers * cfg.embed_dim * cfg.hidden;
    CHECK(store.count_trainable() - cached_store.count_trainable() == proj);
    CHECK(cached_store.count(Component::Cache) == cfg.flows * cfg.layers * cfg.hidden);
  }
}

TEST_CASE("embedding and gate initialization") {
  ParamStore store;
  Estimator est(grid_config(Scheme::NanoFlow), store, Rng(10));
  double sq = 0;
  std::size_t n = 0;
  for (const auto& e : store.entries()) {
    if (e.component == Component::Embedding)
      for (double v : e.tensor.data()) {
        sq += v * v;
        ++n;
      }
    if (e.name.find(".gate") != std::string::npos)
      for (double v : e.tensor.data()) CHECK(v == 0.0);
  }
  CHECK(n == 4 * 12);
  CHECK(std::sqrt(sq / n) == doctest::Approx(0.01).epsilon(0.3));
  CHECK(est.max_abs_gate() == 0.0);
}

TEST_CASE("estimator gradients match finite differences") {
  Rng rng(11);
  for (Scheme scheme : {Scheme::Baseline, Scheme::Naive, Scheme::Decomp, Scheme::NanoFlow}) {
    for (bool image : {false, true}) {
      const EstimatorConfig cfg = image ? image_config(scheme, {true, true, true}) : grid_config(scheme, {false, true, true});
      ParamStore store;
      Estimator est(cfg, store, Rng(12));
      randomize(store, rng, 0.4);
      const Tensor x = random_tensor(batch_shape(cfg, 2), rng);
      Shape out_shape = batch_shape(cfg, 2);
      out_shape[3] *= cfg.arity;
      for (int point = 0; point < 3; ++point) {
        const Tensor weights = random_tensor(out_shape, rng);
        const std::size_t k = static_cast<std::size_t>(point) % cfg.flows;
        auto loss = [&] { return sum(mul(tanh(est.estimate(x, k)), weights)); };
        for (const auto& e : store.entries()) {
          if (!e.trainable) continue;
          const double err = finite_diff_check_leaf(loss, e.tensor, 1e-6);
          INFO(to_string(scheme), (image ? " image " : " grid "), e.name, " point ", point);
          CHECK(err < 1e-4);
        }
      }
    }
  }
}
