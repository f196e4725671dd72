#include "nanoflow/params.hpp"

#include <algorithm>

#include "nanoflow/errors.hpp"

namespace nf {

namespace {
constexpr std::string_view kComponentNames[] = {"trunk", "head", "embedding", "injection", "flow", "cache"};
}

std::string to_string(Component c) { return std::string(kComponentNames[static_cast<int>(c)]); }

Component component_from_string(std::string_view s) {
  for (int i = 0; i < 6; ++i)
    if (kComponentNames[i] == s) return static_cast<Component>(i);
  throw FormatError("unknown parameter component '" + std::string(s) + "'");
}

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values, Component component,
                       bool trainable) {
  if (contains(name)) throw ContractError("duplicate parameter name " + name);
  Tensor t = trainable ? Tensor::param(std::move(shape), std::move(values)) : Tensor(std::move(shape), std::move(values));
  index_.emplace(name, entries_.size());
  entries_.push_back({name, t, component, trainable});
  return t;
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + name);
  return entries_[it->second];
}

void ParamStore::assign(const std::string& name, std::span<const double> values) {
  Tensor t = entry(name).tensor;
  if (values.size() != t.numel())
    throw DimensionError("assign " + name + ": " + std::to_string(values.size()) + " values for shape " +
                         shape_str(t.shape()));
  std::copy(values.begin(), values.end(), t.mutable_data().begin());
}

std::vector<Tensor> ParamStore::trainable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

std::size_t ParamStore::count(Component c) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.component == c) n += e.tensor.numel();
  return n;
}

std::size_t ParamStore::count_trainable() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<double> uniform_init(std::size_t n, double bound, Rng rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

std::vector<double> normal_init(std::size_t n, double stddev, Rng rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

}  // namespace nf
