#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "nanoflow/tensor.hpp"

namespace nf {

// Train/test split of one dataset. Records are numbered in generation (or
// file) order and the first 10% form the test split.
struct Dataset {
  std::string kind;
  std::uint64_t seed = 0;
  Tensor train;  // [N_train, item...]
  Tensor test;   // [N_test, item...]
  bool integer_valued = false;
  std::size_t levels = 256;
  std::vector<std::size_t> train_records, test_records;
  std::vector<int> train_labels, test_labels;  // two_moons only

  Shape item_shape() const;
  nlohmann::json manifest() const;
};

// two_moons, rings, gaussian_grid (3x3); each coordinate standardized to
// zero mean and unit variance over all n records.
Dataset gen_toy2d(const std::string& kind, std::size_t n, std::uint64_t seed);

struct Ar2Options {
  double phi1 = 1.6;
  double phi2 = -0.8;
  std::size_t burn_in = 100;
};
// n independent AR(2) sequences with N(0, 1) innovations, standardized over
// all samples.
Dataset gen_seq1d(std::size_t n, std::size_t length, std::uint64_t seed, const Ar2Options& ar = {});

// Non-overlapping patch x patch tiles (image-major, then row, then column)
// from a tensor-core file holding [N, H, W, C] (or [H, W, C]) integers 0..255.
Dataset load_image_patches(const std::filesystem::path& source, std::size_t patch = 8, std::size_t channels = 1);
// Inverse of the tiling for one source image; patches in tiling order.
Tensor reassemble_patches(const Tensor& patches, std::size_t height, std::size_t width);
// Smooth random 8-bit images (blobs over gradients) for desk experiments.
void write_synthetic_images(const std::filesystem::path& path, std::size_t n, std::size_t height, std::size_t width,
                            std::size_t channels, std::uint64_t seed);

// Directory with manifest.json, train.nftn, test.nftn.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace nf
