#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "nanoflow/data.hpp"
#include "nanoflow/errors.hpp"
#include "nanoflow/tensor_io.hpp"
#include "oracles.hpp"

using namespace nf;
using oracle::values_equal;

namespace {

std::vector<double> all_values(const Dataset& ds) {
  std::vector<double> v(ds.test.data().begin(), ds.test.data().end());
  v.insert(v.end(), ds.train.data().begin(), ds.train.data().end());
  return v;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("nanoflow_test_data_" + name);
}

}  // namespace

TEST_CASE("toy2d generators") {
  for (const char* kind : {"two_moons", "rings", "gaussian_grid"}) {
    const Dataset a = gen_toy2d(kind, 5000, 7), b = gen_toy2d(kind, 5000, 7);
    CHECK(values_equal(a.train, b.train));
    CHECK(values_equal(a.test, b.test));
    CHECK(a.test.dim(0) == 500);
    CHECK(a.train.shape() == Shape{4500, 2});
    const auto v = all_values(a);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, s = 0;
      for (std::size_t i = c; i < v.size(); i += 2) m += v[i];
      m /= 5000;
      for (std::size_t i = c; i < v.size(); i += 2) s += (v[i] - m) * (v[i] - m);
      CHECK(std::abs(m) < 1e-12);
      CHECK(std::abs(s / 5000 - 1.0) < 1e-12);
    }
  }
  CHECK_THROWS_AS(gen_toy2d("spirals", 1000, 0), ConfigError);
  CHECK_THROWS_AS(gen_toy2d("rings", 99, 0), ConfigError);
}

TEST_CASE("gaussian grid columns are equally populated") {
  const std::size_t n = 90000;
  const Dataset ds = gen_toy2d("gaussian_grid", n, 11);
  const auto v = all_values(ds);
  std::size_t left = 0;
  for (std::size_t i = 0; i < v.size(); i += 2) left += v[i] < -0.6 ? 1 : 0;
  const double p = 1.0 / 3.0;
  CHECK(std::abs(static_cast<double>(left) - n * p) < 4 * std::sqrt(n * p * (1 - p)));
}

TEST_CASE("two moons labels are balanced") {
  const std::size_t n = 10000;
  const Dataset ds = gen_toy2d("two_moons", n, 3);
  std::size_t ones = 0;
  for (int l : ds.train_labels) ones += l;
  for (int l : ds.test_labels) ones += l;
  CHECK(ds.train_labels.size() + ds.test_labels.size() == n);
  CHECK(std::abs(static_cast<double>(ones) - n / 2.0) < 4 * std::sqrt(n * 0.25));
}

TEST_CASE("seq1d") {
  SUBCASE("white noise has no lag-1 correlation") {
    const std::size_t n = 200, L = 512;
    const Dataset ds = gen_seq1d(n, L, 5, {0.0, 0.0, 0});
    const auto v = all_values(ds);
    double num = 0, den = 0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t t = 0; t < L; ++t) {
        den += v[s * L + t] * v[s * L + t];
        if (t + 1 < L) num += v[s * L + t] * v[s * L + t + 1];
      }
    CHECK(std::abs(num / den) < 4.0 / std::sqrt(static_cast<double>(n * L)));
  }
  SUBCASE("determinism and normalization") {
    const Dataset a = gen_seq1d(400, 256, 9), b = gen_seq1d(400, 256, 9);
    CHECK(values_equal(a.train, b.train));
    const auto v = all_values(a);
    double s = 0;
    for (double x : v) s += x * x;
    CHECK(std::abs(s / v.size() - 1.0) < 0.02);
    // the default process is strongly autocorrelated
    double num = 0;
    for (std::size_t i = 0; i + 1 < 256; ++i) num += v[i] * v[i + 1];
    CHECK(num / 255 > 0.5);
  }
}

TEST_CASE("splits are disjoint and cover every record") {
  const Dataset ds = gen_seq1d(123, 16, 1);
  std::set<std::size_t> test(ds.test_records.begin(), ds.test_records.end());
  for (auto r : ds.train_records) CHECK(test.count(r) == 0);
  CHECK(ds.test_records.size() + ds.train_records.size() == 123);
  CHECK(ds.test_records.front() == 0);
}

TEST_CASE("image patches") {
  const auto file = temp_path("images.nftn");
  write_synthetic_images(file, 3, 20, 17, 1, 4);
  const Dataset ds = load_image_patches(file, 8, 1);
  CHECK(ds.integer_valued);
  // floor(20/8) * floor(17/8) = 4 patches per image
  CHECK(ds.train.dim(0) + ds.test.dim(0) == 12);
  CHECK(ds.item_shape() == Shape{8, 8, 1});

  // channel count must match the file
  save_tensor(file, Tensor({16, 24, 1}, 0.0));
  CHECK_THROWS_AS(load_image_patches(file, 8, 3), DataError);

  Rng rng(2);
  std::vector<double> img(16 * 24 * 2);
  for (auto& x : img) x = static_cast<double>(rng.below(256));
  std::vector<double> dup;
  for (int copy = 0; copy < 2; ++copy) dup.insert(dup.end(), img.begin(), img.end());
  save_tensor(file, Tensor({2, 16, 24, 2}, dup));
  const Dataset two = load_image_patches(file, 8, 2);
  // records 0..5 come from image 0; the test split holds record 0 only.
  std::vector<double> first;
  first.insert(first.end(), two.test.data().begin(), two.test.data().end());
  first.insert(first.end(), two.train.data().begin(), two.train.data().begin() + 5 * 128);
  const Tensor back = reassemble_patches(Tensor({6, 8, 8, 2}, first), 16, 24);
  CHECK(values_equal(back, Tensor({16, 24, 2}, img)));

  save_tensor(file, Tensor({1, 8, 8, 1}, 0.5));
  CHECK_THROWS_AS(load_image_patches(file, 8, 1), DataError);
  {
    std::ofstream os(file, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(load_image_patches(file, 8, 1), FormatError);
}

TEST_CASE("constant-zero image gives zero patches") {
  const auto file = temp_path("zeros.nftn");
  save_tensor(file, Tensor({10, 8, 16, 1}, 0.0));
  const Dataset ds = load_image_patches(file, 8, 1);
  CHECK(ds.train.dim(0) + ds.test.dim(0) == 20);
  for (double x : ds.train.data()) CHECK(x == 0.0);
}

TEST_CASE("dataset directory round trip") {
  const Dataset ds = gen_toy2d("two_moons", 300, 2);
  const auto dir = temp_path("dir");
  std::filesystem::remove_all(dir);
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  CHECK(values_equal(back.train, ds.train));
  CHECK(values_equal(back.test, ds.test));
  CHECK(back.kind == "two_moons");
  CHECK(back.seed == 2);
  CHECK(back.train_labels == ds.train_labels);
  CHECK(back.manifest() == ds.manifest());
}
