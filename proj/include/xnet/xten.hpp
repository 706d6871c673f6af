#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "xnet/tensor.hpp"

namespace xnet {

// XTEN record: "XTEN", u8 version (1), u8 dtype (0 = f32, 1 = f64), u8 ndim,
// ndim × u32 LE dims, then raw LE elements in row-major order.
inline constexpr std::uint8_t kXtenVersion = 1;

template <Real T>
void write_xten(std::ostream& os, const Tensor<T>& tensor);

/// Reads one record; throws FormatError on bad magic, version, dtype or a short read.
template <Real T>
Tensor<T> read_xten(std::istream& is);

template <Real T>
void save_xten(const std::filesystem::path& path, const Tensor<T>& tensor);

template <Real T>
Tensor<T> load_xten(const std::filesystem::path& path);

namespace io {

void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is, const char* what);
void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is, const char* what, std::uint32_t max_length = 1u << 30);

}  // namespace io

}  // namespace xnet
