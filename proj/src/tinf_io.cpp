#include "tinfer/tinf_io.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace tinfer {

namespace {

template <typename UInt>
void put_le(std::ostream& out, UInt value) {
  std::array<char, sizeof(UInt)> buf;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) buf[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(buf.data(), buf.size());
}

template <typename UInt>
UInt get_le(std::istream& in) {
  std::array<unsigned char, sizeof(UInt)> buf;
  if (!in.read(reinterpret_cast<char*>(buf.data()), buf.size())) {
    throw Error(ErrorKind::Format, "truncated TINF stream");
  }
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(buf[i]) << (8 * i);
  return value;
}

}  // namespace

void write_tinf(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write("TINF", 4);
  put_le<std::uint32_t>(out, kTinfVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    if (name.size() > 0xFFFF) throw Error(ErrorKind::Format, "tensor name too long");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.dtype()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
    for (auto extent : tensor.shape()) put_le<std::uint64_t>(out, extent);
    if (tensor.dtype() == DType::F16) {
      for (Half h : tensor.data<Half>()) put_le<std::uint16_t>(out, std::bit_cast<std::uint16_t>(h));
    } else {
      for (float f : tensor.data<float>()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing TINF stream");
}

std::vector<NamedTensor> read_tinf(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "TINF") throw Error(ErrorKind::Format, "bad TINF magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kTinfVersion) {
    throw Error(ErrorKind::Format, "unsupported TINF version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(in);
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = get_le<std::uint16_t>(in);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw Error(ErrorKind::Format, "truncated tensor name");
    const auto dtype_code = get_le<std::uint8_t>(in);
    if (dtype_code > 1) throw Error(ErrorKind::Format, "unknown dtype code " + std::to_string(dtype_code));
    const auto dtype = static_cast<DType>(dtype_code);
    const auto rank = get_le<std::uint8_t>(in);
    Tensor::Shape shape(rank);
    for (auto& extent : shape) extent = get_le<std::uint64_t>(in);
    Tensor tensor(shape, dtype);
    if (dtype == DType::F16) {
      for (Half& h : tensor.mutable_data<Half>()) h = std::bit_cast<Half>(get_le<std::uint16_t>(in));
    } else {
      for (float& f : tensor.mutable_data<float>()) f = std::bit_cast<float>(get_le<std::uint32_t>(in));
    }
    tensors.push_back({std::move(name), std::move(tensor)});
  }
  return tensors;
}

std::string serialize_tinf(const std::vector<NamedTensor>& tensors) {
  std::ostringstream out(std::ios::binary);
  write_tinf(out, tensors);
  return std::move(out).str();
}

std::vector<NamedTensor> deserialize_tinf(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_tinf(in);
}

void save_tinf(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_tinf(out, tensors);
}

std::vector<NamedTensor> load_tinf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_tinf(in);
}

}  // namespace tinfer
