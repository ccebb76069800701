#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/featenc.hpp"

namespace sparsepat::interphead {

struct ClassWeights {
  double pos = 1.0;
  double neg = 1.0;
};

/// w_pos = N / (2 N_pos), w_neg = N / (2 N_neg). Throws ConfigError naming
/// `target` when either class is absent.
ClassWeights class_weights(const std::vector<int>& labels, const std::string& target);

/// sign(w) * max(|w| - lambda, 0)
double soft_threshold(double w, double lambda);

enum class Solver { saga, prox_gd };

struct HeadConfig {
  double alpha = 0.01;
  Solver solver = Solver::saga;
  std::size_t max_passes = 1000;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

nlohmann::json config_to_json(const HeadConfig& c);
HeadConfig config_from_json(const nlohmann::json& j);

/// Training problem for one target. Rows with label < 0 (unknown) are
/// dropped by the caller.
struct Problem {
  std::vector<const featenc::FeatureVector*> rows;
  std::vector<int> labels;  // 0 or 1
  std::size_t n_features = 0;
  ClassWeights weights;
};

/// Weighted mean logistic loss (no penalty) and its gradient.
double smooth_loss(const Problem& problem, const std::vector<double>& w, double b,
                   std::vector<double>* grad_w = nullptr, double* grad_b = nullptr);

struct TargetHead {
  std::string name;
  bool trained = false;
  std::string skipped;  // reason when not trained
  std::vector<double> weights;
  double bias = 0.0;
  ClassWeights class_weights;
  std::size_t passes = 0;
  bool converged = false;
  double objective = 0.0;

  std::size_t nonzero() const;
};

struct HeadModel {
  double alpha = 0.01;
  std::vector<std::string> pattern_ids;
  std::vector<std::string> descriptions;  // annotation per pattern, may be empty
  std::vector<TargetHead> targets;

  /// By name or decimal index. Throws ConfigError when unknown or untrained.
  const TargetHead& target(const std::string& key) const;
};

/// Fits one target. Throws NumericError on divergence.
TargetHead fit_target(const Problem& problem, const std::string& name, const HeadConfig& config);

/// Fits every target. `labels[t][i]` is 0, 1 or -1 (unknown). Single-class
/// targets are skipped with a warning on stderr.
HeadModel train_head(const featenc::FeatureMatrix& features,
                     const std::vector<std::vector<int>>& labels,
                     const std::vector<std::string>& target_names, const HeadConfig& config);

struct Contribution {
  std::string pattern_id;
  double activation = 0.0;
  double weight = 0.0;
  double contribution = 0.0;
  std::string description;
};

struct AttributionReport {
  std::string record_id;
  std::string target;
  double logit = 0.0;
  double probability = 0.0;
  double bias = 0.0;
  std::vector<Contribution> contributions;  // |contribution| descending, ties by column
};

/// The logit is bias plus the contributions summed in report order, so the
/// completeness identity holds exactly.
AttributionReport attribute(const HeadModel& head, const featenc::FeatureVector& feature,
                            const std::string& target);
double predict(const HeadModel& head, const featenc::FeatureVector& feature,
               const std::string& target);

double sigmoid(double z);

nlohmann::json to_json(const AttributionReport& r);
nlohmann::json to_json(const HeadModel& h);
HeadModel head_from_json(const nlohmann::json& j);
void save_head(const std::filesystem::path& path, const HeadModel& head);
HeadModel load_head(const std::filesystem::path& path);

}  // namespace sparsepat::interphead
