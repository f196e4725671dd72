#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "nanoflow/tensor.hpp"

namespace nf {

// Binary tensor record: "NFTN", u32 version, u32 rank, u32 dims[rank], then
// little-endian f64 payload in row-major order.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

// A file holds one or more consecutive records.
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> load_tensors(const std::filesystem::path& path);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace nf
