#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/core/tensor.hpp"
#include "sparsepat/kernels/kernels.hpp"

namespace sparsepat::transcoder {

using kernels::SparseRow;

/// Keeps the k largest entries of v (ties to the lower index) and zeroes the
/// rest. Throws std::invalid_argument unless 1 <= k <= v.size().
std::vector<double> top_k(std::span<const double> v, std::size_t k);

/// Linear encoder, ReLU, Top-K, linear decoder.
///
/// Weights are stored neuron-major: row j of `encoder` holds neuron j's input
/// weights and row j of `decoder` its output atom.
struct TranscoderModel {
  Matrix encoder;                    // m x d_in
  std::vector<double> encoder_bias;  // m
  Matrix decoder;                    // m x d_out
  std::vector<double> decoder_bias;  // d_out
  std::size_t k = 32;

  std::size_t input_dim() const { return encoder.cols(); }
  std::size_t latent_dim() const { return encoder.rows(); }
  std::size_t output_dim() const { return decoder.cols(); }

  static TranscoderModel init(std::size_t d_in, std::size_t latent, std::size_t d_out,
                              std::size_t k, std::uint64_t seed);
  static TranscoderModel zeros(std::size_t d_in, std::size_t latent, std::size_t d_out,
                               std::size_t k);
  void validate() const;

  friend bool operator==(const TranscoderModel&, const TranscoderModel&) = default;
};

struct Encoded {
  SparseRow codes;
  std::vector<double> recon;
};

Encoded tc_forward(const TranscoderModel& model, std::span<const double> x);

/// Sparse codes for every row of `x`.
void encode_batch(const TranscoderModel& model, const Matrix& x, std::vector<SparseRow>& codes);
/// b_dec + sum of code-weighted decoder atoms.
void decode_batch(const TranscoderModel& model, const std::vector<SparseRow>& codes, Matrix& recon);

/// mean_i ||recon_i - target_i||^2 / d_out
double reconstruction_loss(const TranscoderModel& model, const Matrix& inputs,
                           const Matrix& targets);

enum class Optimizer { adam, full_batch_gd };

struct TranscoderConfig {
  std::size_t latent = 512;
  std::size_t k = 32;
  double lr = 3e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double subset_fraction = 0.95;

  void validate() const;
};

nlohmann::json config_to_json(const TranscoderConfig& c);
TranscoderConfig config_from_json(const nlohmann::json& j);

struct TrainOutcome {
  TranscoderModel model;
  double final_loss = 0.0;            // full-data loss after the last epoch
  std::vector<double> epoch_losses;   // full-data loss after each epoch
};

/// Minimizes reconstruction_loss with Adam (mini-batches) or plain full-batch
/// gradient descent. Throws NumericError on a non-finite loss.
TrainOutcome train_transcoder(const Matrix& inputs, const Matrix& targets,
                              const TranscoderConfig& config, std::uint64_t seed);

/// Loss and parameter gradients for one batch; exposed for gradient checks.
struct Gradients {
  Matrix encoder, decoder;
  std::vector<double> encoder_bias, decoder_bias;
};
double loss_and_gradients(const TranscoderModel& model, const Matrix& inputs,
                          const Matrix& targets, Gradients& grads);

// Ensemble -------------------------------------------------------------------

struct MemberRecord {
  std::size_t id = 0;
  std::uint64_t seed = 0;
  std::string subset_digest;
  std::size_t subset_size = 0;
  double final_loss = 0.0;
  bool ok = true;
  std::string error;
};

struct EnsembleManifest {
  std::uint64_t seed = 0;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::string target_kind;  // penultimate | logits | synthetic
  TranscoderConfig config;
  std::vector<MemberRecord> members;
};

nlohmann::json manifest_to_json(const EnsembleManifest& m);
EnsembleManifest manifest_from_json(const nlohmann::json& j);

/// Seed used to initialize member i.
std::uint64_t member_seed(std::uint64_t seed, std::size_t member);
/// Sorted row indices of member i's training subset.
std::vector<std::size_t> member_subset(std::size_t n_rows, double fraction, std::uint64_t seed,
                                       std::size_t member);
/// Digest of the record ids in a subset.
std::string subset_digest(const std::vector<std::string>& row_ids,
                          const std::vector<std::size_t>& subset);

struct Ensemble {
  EnsembleManifest manifest;
  std::vector<std::optional<TranscoderModel>> members;  // nullopt for failed members

  std::size_t size() const { return members.size(); }
};

/// Trains members in parallel. A member that throws is marked failed in the
/// manifest; the others still train.
Ensemble train_ensemble(const Matrix& inputs, const Matrix& targets,
                        const std::vector<std::string>& row_ids, std::size_t n_members,
                        const TranscoderConfig& config, std::uint64_t seed,
                        const std::string& target_kind = "penultimate");

void save_ensemble(const std::filesystem::path& dir, const Ensemble& ensemble);
Ensemble load_ensemble(const std::filesystem::path& dir);

}  // namespace sparsepat::transcoder
