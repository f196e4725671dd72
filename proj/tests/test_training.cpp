#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "nanoflow/ops.hpp"
#include "nanoflow/training.hpp"
#include "oracles.hpp"

using namespace nf;
using oracle::values_equal;

namespace {

ModelConfig flat2d(Scheme scheme) {
  ModelConfig c;
  c.scheme = scheme;
  c.layout = Layout::Flat;
  c.dim = 2;
  c.groups = 2;
  c.flows = 4;
  c.hidden = 16;
  c.layers = 2;
  if (scheme == Scheme::NanoFlow) c.embed_dim = 4;
  c.seed = 5;
  return c;
}

TrainConfig quick(std::size_t iterations) {
  TrainConfig t;
  t.iterations = iterations;
  t.batch_size = 64;
  t.lr = 3e-3;
  t.halve_every = 1000;
  t.checkpoint_every = 50;
  t.average_window = 2;
  t.log_every = 50;
  t.seed = 9;
  return t;
}

}  // namespace

TEST_CASE("adam matches a hand-rolled scalar reference") {
  Tensor p = Tensor::param({2}, {1.0, -2.0});
  std::vector<Tensor> params{p};
  AdamState st;
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  const double grads[3][2] = {{0.5, -1.0}, {0.1, 3.0}, {-2.0, 0.0}};
  for (int t = 0; t < 3; ++t) {
    p.impl()->grad.assign(grads[t], grads[t] + 2);
    REQUIRE(adam_step(params, st, 0.01));
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[t][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t][i] * grads[t][i];
      const double mh = m[i] / (1 - std::pow(0.9, t + 1)), vh = v[i] / (1 - std::pow(0.999, t + 1));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(p.data()[0] == doctest::Approx(ref[0]).epsilon(1e-14));
  CHECK(p.data()[1] == doctest::Approx(ref[1]).epsilon(1e-14));
  // first step moves each coordinate by lr against the gradient sign
  Tensor q = Tensor::param({1}, {0.0});
  std::vector<Tensor> qs{q};
  AdamState s2;
  q.impl()->grad = {123.0};
  adam_step(qs, s2, 0.05);
  CHECK(q.data()[0] == doctest::Approx(-0.05).epsilon(1e-9));
}

TEST_CASE("adam skips non-finite gradients") {
  Tensor p = Tensor::param({2}, {1.0, 2.0});
  std::vector<Tensor> params{p};
  AdamState st;
  p.impl()->grad = {1.0, std::nan("")};
  CHECK_FALSE(adam_step(params, st, 0.1));
  CHECK(st.step == 0);
  CHECK(p.data()[0] == 1.0);
}

TEST_CASE("learning-rate schedule halves on schedule") {
  CHECK(lr_schedule(0, 1e-3, 100) == 1e-3);
  CHECK(lr_schedule(99, 1e-3, 100) == 1e-3);
  CHECK(lr_schedule(100, 1e-3, 100) == 5e-4);
  CHECK(lr_schedule(350, 1e-3, 100) == 1.25e-4);
  CHECK_THROWS_AS(lr_schedule(1, 1e-3, 0), ConfigError);
}

TEST_CASE("gradient clipping") {
  Tensor p = Tensor::param({2}, {0.0, 0.0});
  std::vector<Tensor> params{p};
  p.impl()->grad = {30.0, 40.0};
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(50.0));
  CHECK(p.grad()[0] == doctest::Approx(6.0));
  CHECK(p.grad()[1] == doctest::Approx(8.0));
  CHECK(clip_grad_norm(params, 100.0) == doctest::Approx(10.0));
  CHECK(p.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("checkpoint averaging is an elementwise mean") {
  FlowModel a = build_model(flat2d(Scheme::NanoFlow));
  FlowModel b = a.clone();
  for (const auto& e : b.params().entries()) {
    std::vector<double> v(e.tensor.data().begin(), e.tensor.data().end());
    for (auto& x : v) x += 2.0;
    b.params().assign(e.name, v);
  }
  const FlowModel* ptrs[] = {&a, &b};
  const FlowModel avg = checkpoint_average(ptrs);
  for (std::size_t i = 0; i < avg.params().entries().size(); ++i) {
    const auto& ea = a.params().entries()[i].tensor;
    const auto& em = avg.params().entries()[i].tensor;
    for (std::size_t j = 0; j < ea.numel(); ++j) CHECK(em.data()[j] == doctest::Approx(ea.data()[j] + 1.0));
  }
  FlowModel other = build_model(flat2d(Scheme::Naive));
  const FlowModel* bad[] = {&a, &other};
  CHECK_THROWS_AS(checkpoint_average(bad), ContractError);
  CHECK_THROWS_AS(checkpoint_average(std::span<const FlowModel* const>{}), ContractError);
}

TEST_CASE("dequantization and bits per dim") {
  CHECK(bpd(0.0, 64, 256) == doctest::Approx(8.0));
  CHECK(bpd(-64 * std::numbers::ln2, 64, 256) == doctest::Approx(9.0));

  // A uniform density on [0, 1)^d assigns ll = 0, which is exactly 8 bits
  // per dim of the discrete data; every dequantized point must stay inside
  // its own bin.
  Rng rng(4);
  Tensor x({1000, 3}, 0.0);
  for (auto& v : x.mutable_data()) v = static_cast<double>(rng.below(256));
  const Tensor y = dequantize(x, 256, rng);
  double mean_offset = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double u = y.data()[i] * 256 - x.data()[i];
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean_offset += u;
  }
  CHECK(std::abs(mean_offset / 3000 - 0.5) < 4 * std::sqrt(1.0 / 12 / 3000));
  CHECK_THROWS_AS(dequantize(Tensor({1}, {256.0}), 256, rng), DataError);
  CHECK_THROWS_AS(dequantize(Tensor({1}, {1.5}), 256, rng), DataError);
  CHECK_THROWS_AS(dequantize(Tensor({1}, {-1.0}), 256, rng), DataError);
}

TEST_CASE("training config json") {
  TrainConfig t = quick(300);
  CHECK(TrainConfig::from_json(t.to_json()).to_json() == t.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"iterationz", 1}}), ConfigError);
  t.average_window = 100;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = quick(300);
  t.lr = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("identity-initialized model scores the prior") {
  // zero heads make every coupling the identity, so before any update the
  // eval ll equals the standard-normal log density per dim
  const Dataset ds = gen_toy2d("rings", 1000, 1);
  FlowModel m = build_model(flat2d(Scheme::Decomp));
  Rng rng(0);
  const double ll = mean_log_likelihood(m, ds.test, false, 256, 64, rng);
  double ref = 0;
  for (double x : ds.test.data()) ref += -0.5 * x * x - 0.5 * std::log(2 * std::numbers::pi);
  CHECK(ll == doctest::Approx(ref / ds.test.numel()).epsilon(1e-12));

  const FlowModel before = m.clone();
  const TrainResult r = train(m, ds, quick(0));
  CHECK(r.rows.empty());
  CHECK(r.final_eval_ll == doctest::Approx(ref / ds.test.numel()).epsilon(1e-12));
  for (std::size_t i = 0; i < m.params().entries().size(); ++i)
    CHECK(values_equal(m.params().entries()[i].tensor, before.params().entries()[i].tensor));
}

TEST_CASE("loss gradient matches finite differences on a head bias") {
  const Dataset ds = gen_toy2d("two_moons", 200, 3);
  FlowModel m = build_model(flat2d(Scheme::NanoFlow));
  const Tensor x = ds.train;
  const std::string name = "f1.head.b";
  REQUIRE(m.params().contains(name));
  auto loss = [&] {
    NoGradGuard g;
    return -mean(m.log_likelihood(x)).item() / 2;
  };
  m.params().zero_grad();
  {
    GradTape tape;
    tape.backward(mul_scalar(mean(m.log_likelihood(x)), -0.5));
  }
  const Tensor b = m.params().get(name);
  const std::vector<double> g(b.grad().begin(), b.grad().end());
  std::vector<double> v(b.data().begin(), b.data().end());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double h = 1e-6, orig = v[i];
    v[i] = orig + h;
    m.params().assign(name, v);
    const double up = loss();
    v[i] = orig - h;
    m.params().assign(name, v);
    const double down = loss();
    v[i] = orig;
    m.params().assign(name, v);
    CHECK(oracle::rel_err(g[i], (up - down) / (2 * h)) < 1e-5);
  }
}

TEST_CASE("training on two moons") {
  const Dataset ds = gen_toy2d("two_moons", 4000, 2);
  FlowModel a = build_model(flat2d(Scheme::NanoFlow));
  std::ostringstream log_a;
  MetricsSink sink_a(log_a, false);
  const TrainResult r = train(a, ds, quick(600), &sink_a);
  MESSAGE("eval ll per dim: " << r.initial_eval_ll << " -> " << r.final_eval_ll);
  CHECK(r.final_eval_ll > r.initial_eval_ll + 0.2);
  CHECK(r.averaged_checkpoints == 2);
  CHECK(r.rows.size() == 12);
  CHECK(r.rows.back().train_nll < r.rows.front().train_nll);
  CHECK(r.rows.back().eval_ll.has_value());
  CHECK_FALSE(r.final_bpd.has_value());

  SUBCASE("same seed reproduces the metrics byte for byte") {
    FlowModel b = build_model(flat2d(Scheme::NanoFlow));
    std::ostringstream log_b;
    MetricsSink sink_b(log_b, false);
    train(b, ds, quick(600), &sink_b);
    CHECK(log_a.str() == log_b.str());
    CHECK(log_a.str().find("\"wall_seconds\":null") != std::string::npos);
  }

  SUBCASE("trained density integrates to one") {
    NoGradGuard g;
    const std::size_t n = 400;
    const double lo = -6, hi = 6, h = (hi - lo) / n;
    std::vector<double> pts;
    pts.reserve(2 * n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        pts.push_back(lo + (i + 0.5) * h);
        pts.push_back(lo + (j + 0.5) * h);
      }
    const Tensor ll = a.log_likelihood(Tensor({n * n, 2}, pts));
    double mass = 0;
    for (double v : ll.data()) mass += std::exp(v) * h * h;
    CHECK(mass == doctest::Approx(1.0).epsilon(2e-2));
  }

  SUBCASE("samples have finite likelihood") {
    Rng rng(1);
    const Tensor s = a.sample(256, 1.0, rng);
    NoGradGuard g;
    const Tensor ll = a.log_likelihood(s);
    for (double v : ll.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("training rejects mismatched data") {
  const Dataset ds = gen_seq1d(50, 8, 1);
  FlowModel m = build_model(flat2d(Scheme::Naive));
  CHECK_THROWS_AS(train(m, ds, quick(200)), DimensionError);
}

TEST_CASE("image training reports bits per dim") {
  const auto file = std::filesystem::temp_directory_path() / "nanoflow_test_training_images.nftn";
  write_synthetic_images(file, 4, 16, 16, 1, 3);
  const Dataset ds = load_image_patches(file, 4, 1);
  ModelConfig c;
  c.scheme = Scheme::Naive;
  c.layout = Layout::Image;
  c.height = 4;
  c.width = 4;
  c.channels = 1;
  c.scales = 1;
  c.flows = 2;
  c.groups = 2;
  c.hidden = 8;
  c.layers = 2;
  FlowModel m = build_model(c);
  TrainConfig t = quick(40);
  t.batch_size = 8;
  t.checkpoint_every = 10;
  t.log_every = 20;
  const TrainResult r = train(m, ds, t);
  REQUIRE(r.final_bpd.has_value());
  CHECK(std::isfinite(*r.final_bpd));
  CHECK(*r.final_bpd == doctest::Approx(bpd(r.final_eval_ll * 16, 16, 256)));
  CHECK(m.actnorm_initialized());
}

TEST_CASE("adam limiting cases") {
  SUBCASE("zero grad leaves params and decays moments") {
    Tensor p = Tensor::param({1}, {1.5});
    std::vector<Tensor> ps{p};
    AdamState st;
    p.impl()->grad = {2.0};
    adam_step(ps, st, 0.1);
    const double after_first = p.data()[0], m0 = st.m[0][0], v0 = st.v[0][0];
    p.impl()->grad = {0.0};
    adam_step(ps, st, 0.0);
    CHECK(p.data()[0] == after_first);
    CHECK(st.m[0][0] == doctest::Approx(0.9 * m0));
    CHECK(st.v[0][0] == doctest::Approx(0.999 * v0));
  }
  SUBCASE("constant gradient steps approach lr * sign(g)") {
    Tensor p = Tensor::param({2}, {0.0, 0.0});
    std::vector<Tensor> ps{p};
    AdamState st;
    double prev[2] = {0, 0};
    for (int t = 0; t < 5000; ++t) {
      prev[0] = p.data()[0];
      prev[1] = p.data()[1];
      p.impl()->grad = {0.3, -7.0};
      adam_step(ps, st, 1e-3);
    }
    CHECK(p.data()[0] - prev[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(p.data()[1] - prev[1] == doctest::Approx(1e-3).epsilon(1e-6));
  }
}

TEST_CASE("checkpoint averaging symmetries") {
  FlowModel a = build_model(flat2d(Scheme::Decomp));
  // give the zero-initialized heads some values too
  for (const auto& e : a.params().entries()) {
    std::vector<double> v(e.tensor.data().begin(), e.tensor.data().end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.01 * static_cast<double>(i % 7) - 0.02;
    a.params().assign(e.name, v);
  }
  FlowModel neg = a.clone();
  for (const auto& e : neg.params().entries()) {
    std::vector<double> v(e.tensor.data().begin(), e.tensor.data().end());
    for (auto& x : v) x = -x;
    neg.params().assign(e.name, v);
  }
  const FlowModel* copies[] = {&a, &a, &a};
  const FlowModel* pair[] = {&a, &neg};
  const FlowModel same = checkpoint_average(copies), zero = checkpoint_average(pair);
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    CHECK(values_equal(same.params().entries()[i].tensor, a.params().entries()[i].tensor));
    for (double x : zero.params().entries()[i].tensor.data()) CHECK(x == 0.0);
  }
  CHECK(count_parameters(same).total() == count_parameters(a).total());
}

TEST_CASE("prior-only bpd on dequantized zeros matches quadrature") {
  // Identity model, data all zero: x = u / 256 per dim, so
  // E[ll] per dim = -0.5 ln(2 pi) - E[u^2] / (2 * 256^2) with u ~ U[0, 1).
  const std::size_t dims = 16, n = 4000;
  double expected = 0;
  const std::size_t q = 100000;
  for (std::size_t i = 0; i < q; ++i) {
    const double x = (i + 0.5) / q / 256.0;
    expected += (-0.5 * std::log(2 * std::numbers::pi) - 0.5 * x * x) / q;
  }
  FlowModel m = build_model([] {
    ModelConfig c;
    c.scheme = Scheme::Decomp;
    c.layout = Layout::Flat;
    c.dim = 16;
    c.groups = 4;
    c.flows = 2;
    c.hidden = 8;
    c.layers = 1;
    return c;
  }());
  Rng rng(8);
  const double ll = mean_log_likelihood(m, Tensor({n, dims}, 0.0), true, 256, 500, rng);
  CHECK(bpd(ll * dims, dims) == doctest::Approx(bpd(expected * dims, dims)).epsilon(1e-3));
}
