#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace sparsepat {

/// Incremental SHA-256; hex digest on finish().
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  void update(std::string_view s);
  std::string finish();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace sparsepat
