#include "nanoflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "nanoflow/errors.hpp"
#include "nanoflow/rng.hpp"
#include "nanoflow/tensor_io.hpp"

namespace nf {

using nlohmann::json;

Shape Dataset::item_shape() const {
  const Tensor& t = train.defined() ? train : test;
  return Shape(t.shape().begin() + 1, t.shape().end());
}

json Dataset::manifest() const {
  return json{{"kind", kind},
              {"seed", seed},
              {"train", train.defined() ? train.dim(0) : 0},
              {"test", test.defined() ? test.dim(0) : 0},
              {"item_shape", item_shape()},
              {"integer_valued", integer_valued},
              {"levels", levels}};
}

namespace {

// Splits [n, item...] values so that the first 10% of records become test.
void split_records(Dataset& ds, const Shape& item, std::vector<double> values, std::size_t n,
                   const std::vector<int>& labels = {}) {
  const std::size_t per = shape_numel(item), n_test = n / 10;
  if (n_test == 0 || n_test == n) throw DataError("need at least 10 records to form both splits");
  Shape test_shape{n_test}, train_shape{n - n_test};
  test_shape.insert(test_shape.end(), item.begin(), item.end());
  train_shape.insert(train_shape.end(), item.begin(), item.end());
  const auto cut = values.begin() + static_cast<std::ptrdiff_t>(n_test * per);
  ds.test = Tensor(test_shape, std::vector<double>(values.begin(), cut));
  ds.train = Tensor(train_shape, std::vector<double>(cut, values.end()));
  ds.test_records.resize(n_test);
  ds.train_records.resize(n - n_test);
  for (std::size_t i = 0; i < n; ++i) (i < n_test ? ds.test_records[i] : ds.train_records[i - n_test]) = i;
  if (!labels.empty()) {
    ds.test_labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_test));
    ds.train_labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(n_test), labels.end());
  }
}

void standardize_columns(std::vector<double>& v, std::size_t cols) {
  const std::size_t rows = v.size() / cols;
  for (std::size_t c = 0; c < cols; ++c) {
    double m = 0, s = 0;
    for (std::size_t r = 0; r < rows; ++r) m += v[r * cols + c];
    m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) s += (v[r * cols + c] - m) * (v[r * cols + c] - m);
    s = std::sqrt(s / static_cast<double>(rows));
    for (std::size_t r = 0; r < rows; ++r) v[r * cols + c] = (v[r * cols + c] - m) / s;
  }
}

}  // namespace

Dataset gen_toy2d(const std::string& kind, std::size_t n, std::uint64_t seed) {
  if (kind != "two_moons" && kind != "rings" && kind != "gaussian_grid")
    throw ConfigError("unknown toy dataset '" + kind + "'");
  if (n < 100) throw ConfigError("toy datasets need n >= 100");
  Rng rng(seed);
  std::vector<double> v(2 * n);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0, y = 0;
    if (kind == "two_moons") {
      const int moon = static_cast<int>(rng.below(2));
      const double t = std::numbers::pi * rng.uniform();
      x = moon == 0 ? std::cos(t) : 1.0 - std::cos(t);
      y = moon == 0 ? std::sin(t) : 0.5 - std::sin(t);
      x += 0.05 * rng.normal();
      y += 0.05 * rng.normal();
      labels.push_back(moon);
    } else if (kind == "rings") {
      const double r = rng.below(2) == 0 ? 1.0 : 2.0;
      const double t = 2 * std::numbers::pi * rng.uniform();
      x = r * std::cos(t) + 0.08 * rng.normal();
      y = r * std::sin(t) + 0.08 * rng.normal();
    } else {
      const auto cell = rng.below(9);
      x = 2.0 * (static_cast<double>(cell % 3) - 1.0) + 0.2 * rng.normal();
      y = 2.0 * (static_cast<double>(cell / 3) - 1.0) + 0.2 * rng.normal();
    }
    v[2 * i] = x;
    v[2 * i + 1] = y;
  }
  standardize_columns(v, 2);
  Dataset ds;
  ds.kind = kind;
  ds.seed = seed;
  split_records(ds, {2}, std::move(v), n, labels);
  return ds;
}

Dataset gen_seq1d(std::size_t n, std::size_t length, std::uint64_t seed, const Ar2Options& ar) {
  if (n < 10 || length == 0) throw ConfigError("gen_seq1d needs n >= 10 and length > 0");
  Rng rng(seed);
  std::vector<double> v(n * length);
  for (std::size_t i = 0; i < n; ++i) {
    double x1 = 0, x2 = 0;
    for (std::size_t t = 0; t < ar.burn_in + length; ++t) {
      const double x = ar.phi1 * x1 + ar.phi2 * x2 + rng.normal();
      x2 = x1;
      x1 = x;
      if (t >= ar.burn_in) v[i * length + t - ar.burn_in] = x;
    }
  }
  // one global scale: every position shares the stationary distribution
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) s += (x - m) * (x - m);
  s = std::sqrt(s / static_cast<double>(v.size()));
  for (auto& x : v) x = (x - m) / s;
  Dataset ds;
  ds.kind = "seq1d";
  ds.seed = seed;
  split_records(ds, {length}, std::move(v), n);
  return ds;
}

Dataset load_image_patches(const std::filesystem::path& source, std::size_t patch, std::size_t channels) {
  Tensor images = load_tensor(source);
  if (images.rank() == 3) images = Tensor({1, images.dim(0), images.dim(1), images.dim(2)}, std::vector<double>(images.data().begin(), images.data().end()));
  if (images.rank() != 4) throw DataError("image file must hold [N, H, W, C] or [H, W, C]");
  const std::size_t N = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3);
  if (C != channels) throw DataError("image file has " + std::to_string(C) + " channels, expected " + std::to_string(channels));
  for (double x : images.data())
    if (x < 0 || x > 255 || x != std::floor(x)) throw DataError("image values must be integers in 0..255");
  const std::size_t ph = H / patch, pw = W / patch, count = N * ph * pw;
  if (count == 0) throw DataError("images smaller than one patch");
  std::vector<double> v;
  v.reserve(count * patch * patch * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j)
        for (std::size_t r = 0; r < patch; ++r)
          for (std::size_t c = 0; c < patch; ++c)
            for (std::size_t ch = 0; ch < C; ++ch)
              v.push_back(images.data()[((n * H + i * patch + r) * W + j * patch + c) * C + ch]);
  Dataset ds;
  ds.kind = "image_patches";
  ds.integer_valued = true;
  ds.levels = 256;
  split_records(ds, {patch, patch, C}, std::move(v), count);
  return ds;
}

Tensor reassemble_patches(const Tensor& patches, std::size_t height, std::size_t width) {
  const std::size_t P = patches.dim(1), C = patches.dim(3);
  const std::size_t ph = height / P, pw = width / P;
  if (patches.dim(0) != ph * pw) throw DimensionError("patch count does not tile the image");
  std::vector<double> img(ph * P * pw * P * C, 0.0);
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t j = 0; j < pw; ++j)
      for (std::size_t r = 0; r < P; ++r)
        for (std::size_t c = 0; c < P; ++c)
          for (std::size_t ch = 0; ch < C; ++ch)
            img[((i * P + r) * (pw * P) + j * P + c) * C + ch] = patches.data()[(((i * pw + j) * P + r) * P + c) * C + ch];
  return Tensor({ph * P, pw * P, C}, std::move(img));
}

void write_synthetic_images(const std::filesystem::path& path, std::size_t n, std::size_t height, std::size_t width,
                            std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * height * width * channels);
  for (std::size_t i = 0; i < n; ++i) {
    const double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1), base = rng.uniform(0.2, 0.8);
    struct Blob {
      double x, y, r, a;
    };
    std::vector<Blob> blobs(3);
    for (auto& b : blobs) b = {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.3), rng.uniform(-0.5, 0.5)};
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double u = (x + 0.5) / width, w = (y + 0.5) / height;
        double val = base + 0.3 * (gx * (u - 0.5) + gy * (w - 0.5));
        for (const auto& b : blobs)
          val += b.a * std::exp(-((u - b.x) * (u - b.x) + (w - b.y) * (w - b.y)) / (2 * b.r * b.r));
        for (std::size_t c = 0; c < channels; ++c) {
          const double shade = val * (1.0 - 0.15 * static_cast<double>(c));
          v[((i * height + y) * width + x) * channels + c] = std::clamp(std::round(255.0 * shade), 0.0, 255.0);
        }
      }
  }
  save_tensor(path, Tensor({n, height, width, channels}, std::move(v)));
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_tensor(dir / "train.nftn", ds.train);
  save_tensor(dir / "test.nftn", ds.test);
  json m = ds.manifest();
  if (!ds.train_labels.empty()) {
    m["train_labels"] = ds.train_labels;
    m["test_labels"] = ds.test_labels;
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw FormatError("cannot write dataset manifest in " + dir.string());
  os << m.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("cannot open " + (dir / "manifest.json").string());
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad dataset manifest: ") + e.what());
  }
  Dataset ds;
  ds.kind = m.value("kind", std::string());
  ds.seed = m.value("seed", std::uint64_t{0});
  ds.integer_valued = m.value("integer_valued", false);
  ds.levels = m.value("levels", std::size_t{256});
  ds.train = load_tensor(dir / "train.nftn");
  ds.test = load_tensor(dir / "test.nftn");
  if (ds.train.dim(0) != m.value("train", std::size_t{0}) || ds.test.dim(0) != m.value("test", std::size_t{0}))
    throw FormatError("dataset split sizes disagree with the manifest");
  const std::size_t n_test = ds.test.dim(0);
  for (std::size_t i = 0; i < n_test; ++i) ds.test_records.push_back(i);
  for (std::size_t i = 0; i < ds.train.dim(0); ++i) ds.train_records.push_back(n_test + i);
  if (m.contains("train_labels")) {
    ds.train_labels = m["train_labels"].get<std::vector<int>>();
    ds.test_labels = m["test_labels"].get<std::vector<int>>();
  }
  return ds;
}

}  // namespace nf
