#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "sparsepat/core/rng.hpp"
#include "sparsepat/core/tensor.hpp"
#include "sparsepat/embedstore.hpp"

namespace sparsepat::mlpcls {

/// x if x > theta, else 0.
inline double jump_relu(double x, double theta) { return x > theta ? x : 0.0; }

/// Affine layer y = x W + b with W stored in x out.
struct DenseLayer {
  Matrix weight;
  std::vector<double> bias;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// d_img -> h1 -> h2 -> L, JumpReLU after the two hidden layers, inverted
/// dropout after each activation in train mode.
struct ClassifierModel {
  DenseLayer hidden1;
  DenseLayer hidden2;
  DenseLayer output;
  double theta = 0.03;
  double dropout = 0.3;

  std::size_t input_dim() const { return hidden1.weight.rows(); }
  std::size_t penultimate_dim() const { return hidden2.weight.cols(); }
  std::size_t num_labels() const { return output.weight.cols(); }

  /// He-normal weights, zero biases.
  static ClassifierModel init(std::size_t d_in, std::size_t h1, std::size_t h2, std::size_t labels,
                              double theta, double dropout, std::uint64_t seed);
  /// Every parameter zero.
  static ClassifierModel zeros(std::size_t d_in, std::size_t h1, std::size_t h2,
                               std::size_t labels);
  void validate() const;

  friend bool operator==(const ClassifierModel&, const ClassifierModel&) = default;
};

enum class Mode { train, eval };

struct Forward {
  std::vector<double> logits;
  std::vector<double> penultimate;
};

/// Single-sample forward. `rng` is only drawn from in train mode.
Forward forward(const ClassifierModel& model, std::span<const double> x, Mode mode, Rng* rng);

/// Batched forward; rows of the outputs follow rows of `x`.
void forward_batch(const ClassifierModel& model, const Matrix& x, Mode mode, Rng* rng,
                   Matrix& logits, Matrix* penultimate);

/// Mean over unmasked cells of the numerically stable binary cross-entropy.
/// Throws when every cell is masked.
double bce_loss(const Matrix& logits, const Matrix& labels, const Matrix& mask);

/// bce_loss plus its gradient with respect to the logits.
double bce_loss_grad(const Matrix& logits, const Matrix& labels, const Matrix& mask,
                     Matrix& dlogits);

/// 0.5 * lr_max * (1 + cos(pi t / T)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max);

/// Parameter gradients in the layout of ClassifierModel.
struct Gradients {
  Matrix w1, w2, w3;
  std::vector<double> b1, b2, b3;
};

/// Loss and analytic gradients of bce_loss(forward(x)). In train mode the
/// dropout masks come from `rng`.
double loss_and_gradients(const ClassifierModel& model, const Matrix& x, const Matrix& labels,
                          const Matrix& mask, Mode mode, Rng* rng, Gradients& grads);

struct TrainConfig {
  double lr_max = 3e-4;
  double weight_decay = 0.01;
  std::size_t epochs = 20;
  std::size_t patience = 3;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  std::size_t h1 = 512;
  std::size_t h2 = 256;
  double theta = 0.03;
  double dropout = 0.3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  embedstore::UnknownPolicy unknown_policy = embedstore::UnknownPolicy::zero;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch;  // 1-based
  double train_loss;
  double val_loss;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

struct TrainResult {
  ClassifierModel model;
  TrainHistory history;
};

/// AdamW with cosine schedule over all steps; early stopping on validation
/// loss; returns the best-validation snapshot.
TrainResult train_classifier(const Matrix& train_x, const Matrix& train_y, const Matrix& train_mask,
                             const Matrix& val_x, const Matrix& val_y, const Matrix& val_mask,
                             const TrainConfig& config);

/// Convenience overload over the dataset's train and val splits.
TrainResult train_classifier(const embedstore::Dataset& dataset, const TrainConfig& config);

/// Eval-mode penultimate activations, one row per input row.
Matrix extract_penultimate(const ClassifierModel& model, const Matrix& x);
/// Eval-mode logits.
Matrix extract_logits(const ClassifierModel& model, const Matrix& x);

/// Mean over labels of per-label accuracy at probability 0.5.
double mean_label_accuracy(const Matrix& logits, const Matrix& labels, const Matrix& mask);

nlohmann::json history_to_json(const TrainHistory& h);

void save_model(const std::filesystem::path& stem, const ClassifierModel& model,
                const nlohmann::json& metadata);
ClassifierModel load_model(const std::filesystem::path& stem);

}  // namespace sparsepat::mlpcls
