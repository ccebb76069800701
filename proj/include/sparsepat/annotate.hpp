#pragma once

#include <chrono>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/registry.hpp"

namespace sparsepat::annotate {

class AnnotationError : public std::runtime_error {
 public:
  enum class Kind { transport, parse };
  AnnotationError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }
  bool retryable() const noexcept { return kind_ == Kind::transport; }

 private:
  Kind kind_;
};

struct AnnotationResult {
  std::string description;
  registry::Category category = registry::Category::artifact;
};

/// Names a pattern from its gallery and judges whether held-out exemplars
/// match a description.
class AnnotationClient {
 public:
  virtual ~AnnotationClient() = default;
  virtual AnnotationResult annotate(const registry::PatternRecord& pattern) = 0;
  virtual bool affirms(const std::string& description, const patterns::Exemplar& exemplar) = 0;
};

/// Offline deterministic client for planted-factor data. The description
/// names the factor mentioned by most gallery excerpts (ties to the lower
/// index) and carries a short gallery hash; an exemplar is affirmed iff its
/// excerpt mentions that factor.
class MockClient final : public AnnotationClient {
 public:
  AnnotationResult annotate(const registry::PatternRecord& pattern) override;
  bool affirms(const std::string& description, const patterns::Exemplar& exemplar) override;
};

/// Sends one JSON request body and returns the response body. Throws
/// AnnotationError(kind=transport) on connection failures and non-2xx status.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string post_json(const std::string& body) = 0;
};

struct HttpConfig {
  std::string base_url;                 // e.g. https://api.example.com
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string token_env = "ANNOTATION_API_TOKEN";
  std::chrono::seconds timeout{60};
};

std::unique_ptr<Transport> make_http_transport(const HttpConfig& config);

/// Chat-completion client. Requests follow the common
/// {"model", "messages": [{"role", "content"}]} schema and the reply is read
/// from choices[0].message.content, which must itself be a JSON object.
class ChatClient final : public AnnotationClient {
 public:
  ChatClient(std::unique_ptr<Transport> transport, std::string model)
      : transport_(std::move(transport)), model_(std::move(model)) {}
  AnnotationResult annotate(const registry::PatternRecord& pattern) override;
  bool affirms(const std::string& description, const patterns::Exemplar& exemplar) override;

 private:
  std::string complete(const std::string& system, const std::string& user);
  std::unique_ptr<Transport> transport_;
  std::string model_;
};

std::string annotation_prompt(const registry::PatternRecord& pattern);
std::string verification_prompt(const std::string& description, const patterns::Exemplar& exemplar);
nlohmann::json chat_request(const std::string& model, const std::string& system,
                            const std::string& user);
/// choices[0].message.content; AnnotationError(parse) when absent.
std::string chat_content(const std::string& response_body);
/// {"description", "category"}; AnnotationError(parse) on schema violations.
AnnotationResult parse_annotation(const std::string& content);
/// {"match": bool}
bool parse_verification(const std::string& content);

/// Annotates one pattern and stores the outcome. On failure the pattern
/// stays pending and the error text is recorded. Returns false on failure.
bool annotate_pattern(AnnotationClient& client, registry::Registry& reg, const std::string& pattern_id);

/// Fraction of holdout exemplars affirmed. Throws ConfigError on an empty
/// holdout or one that overlaps the gallery.
double verify_annotation(AnnotationClient& client, const registry::PatternRecord& pattern,
                         const std::vector<patterns::Exemplar>& holdout);

/// verify_annotation on the stored holdout; records agreement and sets
/// needs_review when it is below 0.8.
bool verify_pattern(AnnotationClient& client, registry::Registry& reg, const std::string& pattern_id);

}  // namespace sparsepat::annotate
