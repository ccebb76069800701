#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sparsepat/core/tensor.hpp"

namespace sparsepat {

/// Versioned binary tensor container.
///
/// Layout (all integers little-endian):
///   magic "SPTC" | u32 version | u32 tensor count
///   per tensor: u32 name length | name bytes | u32 rank | u64 dims[rank]
///               | float32 values (row-major)
///
/// Values are stored as float32, so a write/read cycle rounds doubles to the
/// nearest float.
struct TensorFile {
  static constexpr std::uint32_t kVersion = 1;
  std::map<std::string, Matrix> tensors;

  const Matrix& at(const std::string& name) const;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

/// Rounds every entry to float precision, matching what a round trip through
/// the container produces.
void round_to_float(Matrix& m);

// Little-endian primitive writers shared by the packed formats.
namespace binio {
void put_u8(std::string& out, std::uint8_t v);
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f32(std::string& out, float v);
void put_str(std::string& out, const std::string& s);

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string str();
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const;
  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_all(const std::filesystem::path& path);
/// Writes to a sibling temp file then renames over the destination.
void write_atomic(const std::filesystem::path& path, const std::string& data);
}  // namespace binio

}  // namespace sparsepat
