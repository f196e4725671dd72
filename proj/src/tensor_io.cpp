#include "nanoflow/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "nanoflow/errors.hpp"

namespace nf {

namespace {

constexpr char kMagic[4] = {'N', 'F', 'T', 'N'};

template <typename T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("truncated tensor record");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kTensorFormatVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  } else {
    for (double v : t.data()) put_le<double>(os, v);
  }
  if (!os) throw FormatError("failed writing tensor record");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated tensor record");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad tensor magic");
  const auto version = get_le<std::uint32_t>(is);
  if (version != kTensorFormatVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const auto rank = get_le<std::uint32_t>(is);
  if (rank == 0 || rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_le<std::uint32_t>(is);
    if (d == 0) throw FormatError("zero tensor dimension");
  }
  std::vector<double> values(shape_numel(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double))))
      throw FormatError("truncated tensor payload");
  } else {
    for (auto& v : values) v = get_le<double>(is);
  }
  return Tensor(std::move(shape), std::move(values));
}

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& t : tensors) write_tensor(os, t);
}

std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<Tensor> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor(is));
  return out;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) { save_tensors(path, {t}); }

Tensor load_tensor(const std::filesystem::path& path) {
  auto all = load_tensors(path);
  if (all.size() != 1) throw FormatError(path.string() + " holds " + std::to_string(all.size()) + " tensors");
  return all.front();
}

}  // namespace nf
