#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sparsepat/core/tensor.hpp"

namespace sparsepat::embedstore {

enum class Split : std::uint8_t { unassigned = 0, train = 1, val = 2, test = 3 };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Label cell: 0, 1, or unknown (uncertain / not mentioned).
enum class Label : std::int8_t { negative = 0, positive = 1, unknown = -1 };

struct EmbeddingRecord {
  std::string record_id;
  std::string patient_id;
  std::vector<float> image_embedding;
  std::vector<float> text_embedding;
  std::vector<Label> labels;
  std::string report_excerpt;
  Split split = Split::unassigned;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0, unassigned = 0;
  std::size_t total() const { return train + val + test + unassigned; }
  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

struct DatasetManifest {
  std::size_t d_img = 512;
  std::size_t d_txt = 512;
  std::size_t num_labels = 14;
  std::vector<std::string> label_names;
  SplitCounts counts;
  std::string digest;

  /// Default CheXpert-style label names for `num_labels`.
  static DatasetManifest with_dims(std::size_t d_img, std::size_t d_txt,
                                   std::vector<std::string> label_names);
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// How `unknown` labels enter the classifier loss.
enum class UnknownPolicy { zero, mask };

/// Ingested dataset. Immutable apart from split assignment.
class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetManifest manifest, std::vector<EmbeddingRecord> records);

  const DatasetManifest& manifest() const noexcept { return manifest_; }
  const std::vector<EmbeddingRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  std::size_t input_dim() const noexcept { return manifest_.d_img + manifest_.d_txt; }

  std::optional<std::size_t> index_of(const std::string& record_id) const;
  const EmbeddingRecord& at(const std::string& record_id) const;

  /// Record indices in `split`, in dataset order.
  std::vector<std::size_t> indices(Split split) const;

  /// Joint input [image ‖ text] for the given records.
  Matrix joint_inputs(const std::vector<std::size_t>& idx) const;
  /// Image embeddings only.
  Matrix image_inputs(const std::vector<std::size_t>& idx) const;
  /// Label matrix (0/1) plus mask (1 = counts toward the loss).
  void label_matrix(const std::vector<std::size_t>& idx, UnknownPolicy policy, Matrix& labels,
                    Matrix& mask) const;

  /// Applies split labels and refreshes manifest counts.
  void apply_splits(const std::vector<Split>& splits);

 private:
  void refresh_counts();

  DatasetManifest manifest_;
  std::vector<EmbeddingRecord> records_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

/// Keeps at most `max_tokens` whitespace-delimited tokens (Unicode
/// whitespace). Inputs within the budget are returned unchanged; longer ones
/// are cut right after the last kept token, preserving original spacing.
std::string truncate_excerpt(const std::string& text, std::size_t max_tokens = 256);

/// Parses one JSONL line into a record and checks it against the manifest
/// dims. `line_no` is 1-based and only used in error messages.
EmbeddingRecord parse_record(const std::string& line, const DatasetManifest& manifest,
                             std::size_t line_no);
nlohmann::json record_to_json(const EmbeddingRecord& r);

/// Reads a JSONL file, validates every record, computes the digest.
Dataset ingest_records(const std::filesystem::path& path, DatasetManifest manifest);

/// Dims and label count inferred from the first line of a JSONL file.
DatasetManifest infer_manifest(const std::filesystem::path& path);

/// SHA-256 over the canonical packed form of the records with split
/// information excluded, so assigning splits does not change the digest.
std::string dataset_digest(const std::vector<EmbeddingRecord>& records,
                           const DatasetManifest& manifest);

/// Packed little-endian binary encoding. `include_split` is false for the
/// digest form.
std::string pack_records(const std::vector<EmbeddingRecord>& records,
                         const DatasetManifest& manifest, bool include_split);
std::vector<EmbeddingRecord> unpack_records(const std::string& bytes, DatasetManifest& manifest);

struct SplitRatios {
  double train = 0.8, val = 0.1, test = 0.1;
};

/// Patient-level split. Each patient is hashed with the seed onto [0, 1);
/// patients are visited in hash order and bucketed by where the midpoint of
/// their records falls in the cumulative record mass. Depends only on the seed
/// and the patient set, never on record order.
std::vector<Split> assign_splits(const Dataset& dataset, SplitRatios ratios, std::uint64_t seed);

/// The unit-interval position used by assign_splits; exposed for tests.
double patient_position(std::uint64_t seed, const std::string& patient_id);

// Store layout --------------------------------------------------------------

/// On-disk store: records.bin (packed), records.jsonl, manifest.json.
struct StorePaths {
  std::filesystem::path root;
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path records_bin() const { return root / "records.bin"; }
  std::filesystem::path records_jsonl() const { return root / "records.jsonl"; }
};

void save_dataset(const StorePaths& store, const Dataset& dataset);
Dataset load_dataset(const StorePaths& store);
void write_jsonl(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records);

}  // namespace sparsepat::embedstore
