#include "xnet/xten.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace xnet {

namespace {

constexpr char kMagic[4] = {'X', 'T', 'E', 'N'};

template <typename U>
U byteswap(U v) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(bytes[i], bytes[sizeof(U) - 1 - i]);
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

template <typename U>
void write_le(std::ostream& os, U v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError(std::string("truncated ") + what);
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  return v;
}

}  // namespace

namespace io {

void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }

std::uint32_t read_u32(std::istream& is, const char* what) { return read_le<std::uint32_t>(is, what); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const char* what, std::uint32_t max_length) {
  const auto n = read_u32(is, what);
  if (n > max_length) throw FormatError(std::string("implausible length for ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError(std::string("truncated ") + what);
  return s;
}

}  // namespace io

template <Real T>
void write_xten(std::ostream& os, const Tensor<T>& tensor) {
  os.write(kMagic, 4);
  write_le<std::uint8_t>(os, kXtenVersion);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(tensor.ndim()));
  for (Index d : tensor.shape()) write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    const auto v = tensor.data();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  } else {
    for (T x : tensor.data()) write_le(os, x);
  }
  if (!os) throw IoError("failed writing XTEN record");
}

template <Real T>
Tensor<T> read_xten(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated XTEN header");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad XTEN magic");
  const auto version = read_le<std::uint8_t>(is, "XTEN header");
  if (version != kXtenVersion) throw FormatError("unsupported XTEN version " + std::to_string(version));
  const auto dtype = read_le<std::uint8_t>(is, "XTEN header");
  if (dtype > 1) throw FormatError("unknown XTEN dtype " + std::to_string(dtype));
  if (dtype != static_cast<std::uint8_t>(dtype_of<T>())) throw FormatError("XTEN dtype does not match the requested type");
  const auto ndim = read_le<std::uint8_t>(is, "XTEN header");
  Shape shape(ndim);
  Index n = 1;
  for (auto& d : shape) {
    d = read_le<std::uint32_t>(is, "XTEN dims");
    if (d == 0) throw FormatError("XTEN dimension of size 0");
    n *= d;
    if (n > (Index(1) << 34)) throw FormatError("implausible XTEN size");
  }
  Buffer<T> data(static_cast<std::size_t>(n));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)))) {
      throw FormatError("truncated XTEN payload");
    }
  } else {
    for (auto& x : data) x = read_le<T>(is, "XTEN payload");
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <Real T>
void save_xten(const std::filesystem::path& path, const Tensor<T>& tensor) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_xten(os, tensor);
}

template <Real T>
Tensor<T> load_xten(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_xten<T>(is);
}

template void write_xten(std::ostream&, const Tensor<float>&);
template void write_xten(std::ostream&, const Tensor<double>&);
template Tensor<float> read_xten<float>(std::istream&);
template Tensor<double> read_xten<double>(std::istream&);
template void save_xten(const std::filesystem::path&, const Tensor<float>&);
template void save_xten(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_xten<float>(const std::filesystem::path&);
template Tensor<double> load_xten<double>(const std::filesystem::path&);

}  // namespace xnet
