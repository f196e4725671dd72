#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nanoflow/rng.hpp"
#include "nanoflow/tensor.hpp"

namespace nf {

// Ledger bucket a tensor is counted under.
enum class Component { Trunk, Head, Embedding, Injection, Flow, Cache };

std::string to_string(Component c);
Component component_from_string(std::string_view s);

struct ParamEntry {
  std::string name;
  Tensor tensor;
  Component component;
  bool trainable;
};

// Named, ordered collection of model tensors. Trainable entries are gradient
// leaves; non-trainable entries are buffers.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values, Component component,
             bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const ParamEntry& entry(const std::string& name) const;
  const Tensor& get(const std::string& name) const { return entry(name).tensor; }
  // Overwrites values in place, keeping every handle to the tensor valid.
  void assign(const std::string& name, std::span<const double> values);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;
  std::size_t count(Component c) const;
  std::size_t count_trainable() const;
  void zero_grad();

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// 64-bit FNV-1a; used to derive a per-tensor RNG stream from its name so that
// initial values do not depend on construction order.
std::uint64_t stable_hash(std::string_view s);

std::vector<double> uniform_init(std::size_t n, double bound, Rng rng);
std::vector<double> normal_init(std::size_t n, double stddev, Rng rng);

}  // namespace nf
