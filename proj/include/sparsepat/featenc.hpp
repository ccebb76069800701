#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/core/tensor.hpp"
#include "sparsepat/kernels/kernels.hpp"
#include "sparsepat/registry.hpp"
#include "sparsepat/transcoder.hpp"

namespace sparsepat::featenc {

using kernels::SparseRow;

/// Accepted patterns in pattern_id order. Column j of every feature matrix is
/// pattern_ids[j].
struct PatternSet {
  std::vector<std::string> pattern_ids;
  std::vector<std::vector<patterns::NeuronRef>> members;

  std::size_t size() const { return pattern_ids.size(); }
};

/// Throws ConfigError when the registry has no accepted pattern.
PatternSet accepted_patterns(const registry::Registry& reg);

/// Per row: mean member-neuron code for each pattern, nonzeros only.
std::vector<SparseRow> pattern_activations(const transcoder::Ensemble& ensemble,
                                           const PatternSet& patterns, const Matrix& inputs);

/// Population used for the percentile.
enum class ThresholdBasis {
  positive,  // strictly positive activations only; < min_positive of them gives 0
  all        // every sample, zeros included
};

std::string to_string(ThresholdBasis b);
ThresholdBasis threshold_basis_from_string(const std::string& s);

/// Nearest-rank percentile: the ceil(q/100 * n)-th smallest value.
/// Throws std::invalid_argument on an empty input or q outside (0, 100].
double nearest_rank(std::vector<double> values, double q);

struct ThresholdConfig {
  double percentile = 75.0;
  std::size_t min_positive = 20;
  ThresholdBasis basis = ThresholdBasis::positive;
};

/// One threshold per pattern column from training activations.
std::vector<double> compute_pattern_thresholds(const std::vector<SparseRow>& activations,
                                               std::size_t n_patterns,
                                               const ThresholdConfig& config = {});

struct FeatureVector {
  std::string record_id;
  std::vector<std::uint32_t> index;  // pattern columns, ascending
  std::vector<double> value;         // > 0
  bool normalized = false;

  std::size_t nnz() const { return index.size(); }
};

/// Zeroes values <= threshold, keeps the k_active largest (ties to the lower
/// column) and L2-normalizes whatever survives.
FeatureVector encode_row(std::string record_id, const SparseRow& activations,
                         const std::vector<double>& thresholds, std::size_t k_active = 30);

struct FeatureMatrix {
  std::vector<std::string> pattern_ids;
  std::size_t k_active = 30;
  std::vector<FeatureVector> rows;

  const FeatureVector* find(const std::string& record_id) const;
};

/// Full encoder: ensemble codes, pattern means, thresholds, top-K, norm.
FeatureMatrix encode(const transcoder::Ensemble& ensemble, const PatternSet& patterns,
                     const std::vector<double>& thresholds, const Matrix& inputs,
                     const std::vector<std::string>& record_ids, std::size_t k_active = 30);

/// Triplets (row, column, value) in `bin`; ids and sizes in the JSON header.
struct FeaturePaths {
  std::filesystem::path bin;
  std::filesystem::path header;
};

void save_features(const FeaturePaths& paths, const FeatureMatrix& features);
FeatureMatrix load_features(const FeaturePaths& paths);

nlohmann::json thresholds_to_json(const PatternSet& patterns, const std::vector<double>& thresholds,
                                  const ThresholdConfig& config);
/// Thresholds reordered to `patterns`; throws ConfigError when one is missing.
std::vector<double> thresholds_from_json(const nlohmann::json& j, const PatternSet& patterns);

}  // namespace sparsepat::featenc
