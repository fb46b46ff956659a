#include "moex/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace moex {
namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'X', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error(path.string() + ": truncated checkpoint");
  return v;
}

}  // namespace

void write_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const Shape4 s = t.value.shape();
    for (Index d : {s.n, s.c, s.h, s.w}) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path.string() + ": not a checkpoint");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = get<std::uint32_t>(in, path);
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    if (len > 4096) throw std::runtime_error(path.string() + ": implausible tensor name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    Index dims[4];
    for (auto& d : dims) {
      const auto v = get<std::uint64_t>(in, path);
      if (v > (1u << 30)) throw std::runtime_error(path.string() + ": implausible tensor dimension");
      d = static_cast<Index>(v);
    }
    Tensor4<double> value(Shape4{dims[0], dims[1], dims[2], dims[3]});
    in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path.string() + ": truncated checkpoint");
    out.push_back({std::move(name), std::move(value)});
  }
  return out;
}

}  // namespace moex
