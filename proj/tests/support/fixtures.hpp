#pragma once

#include <filesystem>
#include <string>

#include "sparsepat/registry.hpp"

namespace testsupport {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Pattern n (1-based id). Even n are annotated with agreement 1.0.
sparsepat::registry::PatternRecord make_pattern(std::size_t n);

/// Store with a registry of `n_patterns`. With `with_head`, also a feature
/// matrix over 12 records (r000..r011) and a 2-target head over the first
/// min(n, 8) patterns.
void seed_store(const std::filesystem::path& store, std::size_t n_patterns, bool with_head);

/// Path of the CLI binary under test.
std::filesystem::path cli_path();

/// Runs a shell command, returns (exit status, stdout).
std::pair<int, std::string> run_capture(const std::string& command);

}  // namespace testsupport
