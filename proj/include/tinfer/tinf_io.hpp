#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tinfer/tensor.hpp"

namespace tinfer {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// TINF v1: "TINF", u32 version, u32 count, then per tensor
/// u16 name length, name bytes, u8 dtype, u8 rank, rank x u64 extents, raw
/// little-endian data. All integers little-endian.
inline constexpr std::uint32_t kTinfVersion = 1;

void write_tinf(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tinf(std::istream& in);

std::string serialize_tinf(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> deserialize_tinf(const std::string& bytes);

void save_tinf(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tinf(const std::filesystem::path& path);

}  // namespace tinfer
