#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/core/tensor.hpp"
#include "sparsepat/embedstore.hpp"

namespace sparsepat::synthgen {

/// Planted-factor benchmark definition.
struct SyntheticSpec {
  std::size_t n_factors = 64;
  std::size_t d_img = 64;
  std::size_t d_txt = 64;
  std::size_t target_dim = 32;
  std::size_t k_true = 8;
  double noise_sigma = 0.01;
  /// Per label: factor indices; the label is 1 iff any listed factor is active.
  std::vector<std::vector<std::size_t>> label_rules;
  std::vector<std::string> label_names;  // defaults to target_<i>
  std::size_t n_samples = 5000;
  std::size_t n_patients = 1000;
  std::uint64_t seed = 1;
  /// Unset: orthonormalize whenever n_factors <= input_dim.
  std::optional<bool> orthogonal;

  std::size_t input_dim() const { return d_img + d_txt; }
  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

struct GroundTruth {
  Matrix dictionary;  // n_factors x input_dim, unit rows
  Matrix mixing;      // n_factors x target_dim, unit rows
  bool orthogonal = false;
  std::vector<std::vector<std::size_t>> supports;  // per sample, ascending
  std::vector<std::vector<double>> coefficients;   // aligned with supports
  std::vector<std::vector<std::size_t>> label_rules;
};

struct Benchmark {
  embedstore::Dataset dataset;
  Matrix targets;  // n_samples x target_dim, row-aligned with dataset records
  GroundTruth truth;
};

Benchmark generate_benchmark(const SyntheticSpec& spec);

/// Template excerpt naming every active factor with its coefficient.
std::string factor_excerpt(const std::vector<std::size_t>& support,
                           const std::vector<double>& coefficients);

/// Factor indices mentioned as "factor-<n>" in an excerpt.
std::vector<std::size_t> factors_in_excerpt(const std::string& excerpt);

struct AtomMatch {
  std::size_t learned;
  std::size_t truth;
  double cosine;
};

struct MatchReport {
  std::vector<AtomMatch> pairs;  // only pairs at or above min_cos, by descending cosine
  double recovery_rate = 0.0;    // matched / truth count
};

/// Greedy one-to-one matching by descending cosine between unit-norm learned
/// atoms (rows) and unit-norm true atoms (rows).
MatchReport match_atoms(const Matrix& learned, const Matrix& truth, double min_cos = 0.8);

// Persistence ----------------------------------------------------------------

struct TruthPaths {
  std::filesystem::path root;
  std::filesystem::path json() const { return root / "ground_truth.json"; }
  std::filesystem::path tensors() const { return root / "ground_truth.bin"; }
  std::filesystem::path targets() const { return root / "synthetic_targets.bin"; }
  std::filesystem::path spec() const { return root / "synth_spec.json"; }
};

void save_benchmark(const std::filesystem::path& store, const SyntheticSpec& spec,
                    const Benchmark& bench);
GroundTruth load_ground_truth(const std::filesystem::path& store);
Matrix load_synthetic_targets(const std::filesystem::path& store);
bool has_ground_truth(const std::filesystem::path& store);

}  // namespace sparsepat::synthgen
