#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "canopy/tensor.hpp"

// TNSR/1 on-disk layout:
//   "TNSR" | u8 version=1 | u8 dtype (0 f64, 1 f32) | u32le rank |
//   rank x u32le extents | row-major little-endian payload
namespace canopy::io {

std::vector<std::uint8_t> encode_tnsr(const Tensor& t);
Tensor decode_tnsr(const std::vector<std::uint8_t>& bytes);

void write_tnsr(const std::filesystem::path& path, const Tensor& t);
Tensor read_tnsr(const std::filesystem::path& path);

}  // namespace canopy::io
