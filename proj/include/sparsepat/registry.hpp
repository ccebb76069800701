#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/core/error.hpp"
#include "sparsepat/patterns.hpp"

namespace sparsepat::registry {

enum class Status { pending, accepted, rejected };
enum class Category { cardiac, pulmonary, pleural, structural, device, artifact };
enum class Verdict { accept, reject };

std::string to_string(Status s);
std::string to_string(Category c);
std::string to_string(Verdict v);
Status status_from_string(const std::string& s);
/// Throws ValidationError for anything outside the six categories.
Category category_from_string(const std::string& s);
Verdict verdict_from_string(const std::string& s);

inline constexpr double kMinAgreement = 0.8;

struct Annotation {
  std::string description;
  Category category = Category::artifact;
  std::optional<double> agreement;  // set once verified on holdout exemplars
};

struct PatternRecord {
  std::string pattern_id;
  std::vector<patterns::NeuronRef> members;
  std::vector<double> centroid;
  patterns::ActivationGallery gallery;      // of the representative member
  std::vector<patterns::Exemplar> holdout;  // next-ranked probe records, disjoint from the gallery
  double consistency = 0.0;
  double threshold = 0.0;  // 75th-percentile activation threshold
  std::optional<Annotation> annotation;
  Status status = Status::pending;
  bool needs_review = false;
  std::string last_error;
};

nlohmann::json to_json(const PatternRecord& p);
PatternRecord pattern_from_json(const nlohmann::json& j);
/// Compact listing form used by the index and the HTTP list endpoint.
nlohmann::json summary_json(const PatternRecord& p);

struct AuditEntry {
  std::size_t seq = 0;
  std::string timestamp;
  std::string pattern_id;
  Verdict verdict = Verdict::reject;
  std::string reviewer;
  std::string note;
  Status prior_status = Status::pending;
  Status new_status = Status::pending;
};

nlohmann::json to_json(const AuditEntry& e);
AuditEntry audit_from_json(const nlohmann::json& j);

/// Verdict rejected by a registry rule (maps to HTTP 409).
class ConflictError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Unknown pattern id (maps to HTTP 404).
class NotFoundError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Directory-backed pattern store: one JSON file per pattern, an index, and
/// an append-only audit log. Reads may run concurrently; writes are
/// serialized.
class Registry {
 public:
  /// Writes a fresh registry, replacing any previous one in `dir`.
  static Registry create(const std::filesystem::path& dir, std::vector<PatternRecord> patterns);
  /// Loads an existing registry.
  static Registry open(const std::filesystem::path& dir);
  static bool exists(const std::filesystem::path& dir);

  Registry(Registry&& other) noexcept;

  std::vector<PatternRecord> list() const;
  std::optional<PatternRecord> find(const std::string& pattern_id) const;
  PatternRecord get(const std::string& pattern_id) const;  // NotFoundError
  std::vector<PatternRecord> accepted() const;
  std::size_t size() const;

  /// Replaces a pattern's mutable fields (annotation, flags, threshold,
  /// error). Status changes must go through record_verdict.
  void update(const PatternRecord& updated);

  /// Appends the audit entry (flushed) and then persists the new status.
  PatternRecord record_verdict(const std::string& pattern_id, Verdict verdict,
                               const std::string& reviewer, const std::string& note);

  std::vector<AuditEntry> audit_log() const;

  /// Status map obtained by applying `log` to all-pending patterns.
  static std::map<std::string, Status> replay(const std::vector<std::string>& pattern_ids,
                                              const std::vector<AuditEntry>& log);

  const std::filesystem::path& dir() const { return dir_; }

 private:
  explicit Registry(std::filesystem::path dir) : dir_(std::move(dir)) {}
  void write_pattern(const PatternRecord& p) const;
  void write_index() const;
  std::filesystem::path pattern_path(const std::string& id) const;
  std::filesystem::path audit_path() const { return dir_ / "audit.jsonl"; }

  std::filesystem::path dir_;
  std::map<std::string, PatternRecord> patterns_;
  std::size_t next_seq_ = 1;
  mutable std::shared_mutex mutex_;
};

/// "p00042"
std::string make_pattern_id(std::size_t n);

}  // namespace sparsepat::registry
