#include "clstm/serialize.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace clstm {

namespace {
constexpr char kMagic[4] = {'S', 'T', 'N', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
  // host is little-endian; write raw
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("tensor blob truncated");
  return v;
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  write_le<std::uint32_t>(os, kVersion);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) write_le<std::uint64_t>(os, e);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad tensor blob magic");
  auto version = read_le<std::uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported tensor blob version " +
                             std::to_string(version));
  auto rank = read_le<std::uint32_t>(is);
  Shape shape(rank);
  for (auto& e : shape)
    e = static_cast<std::size_t>(read_le<std::uint64_t>(is));
  std::vector<double> data(numel(shape));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("tensor blob payload truncated");
  return Tensor::from(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor(is);
}

}  // namespace clstm
