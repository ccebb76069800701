#include "sparsepat/annotate.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include "sparsepat/core/digest.hpp"
#include "sparsepat/synthgen.hpp"

namespace sparsepat::annotate {

using nlohmann::json;
using registry::Category;
using registry::PatternRecord;

namespace {

constexpr Category kCategoryCycle[] = {Category::cardiac,    Category::pulmonary, Category::pleural,
                                       Category::structural, Category::device,    Category::artifact};

std::string gallery_hash(const patterns::ActivationGallery& g) {
  Sha256 h;
  for (const auto& e : g.exemplars) {
    h.update(e.record_id);
    h.update(json(e.activation).dump());
    h.update(e.excerpt);
  }
  return h.finish().substr(0, 8);
}

}  // namespace

AnnotationResult MockClient::annotate(const PatternRecord& pattern) {
  const auto& ex = pattern.gallery.exemplars;
  if (ex.empty()) throw AnnotationError(AnnotationError::Kind::parse, "empty gallery");
  std::map<std::size_t, std::size_t> counts;
  for (const auto& e : ex) {
    std::set<std::size_t> seen;
    for (auto f : synthgen::factors_in_excerpt(e.excerpt)) {
      if (seen.insert(f).second) ++counts[f];
    }
  }
  const std::string tag = gallery_hash(pattern.gallery);
  if (counts.empty()) return {"unattributed pattern [" + tag + "]", Category::artifact};
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  const auto factor = best->first;
  return {"pattern dominated by factor-" + std::to_string(factor) + " [" + tag + "]",
          kCategoryCycle[factor % 6]};
}

bool MockClient::affirms(const std::string& description, const patterns::Exemplar& exemplar) {
  const auto named = synthgen::factors_in_excerpt(description);
  if (named.empty()) return false;
  const auto present = synthgen::factors_in_excerpt(exemplar.excerpt);
  return std::find(present.begin(), present.end(), named.front()) != present.end();
}

// Chat protocol ----------------------------------------------------------------

namespace {

constexpr const char* kAnnotateSystem =
    "You label latent features of a chest X-ray classifier. Reply with a JSON object "
    "{\"description\": string, \"category\": one of cardiac|pulmonary|pleural|structural|device|artifact}.";
constexpr const char* kVerifySystem =
    "You check whether a case shows a described radiological pattern. Reply with a JSON object "
    "{\"match\": true|false}.";

}  // namespace

std::string annotation_prompt(const PatternRecord& p) {
  std::ostringstream s;
  s << "Pattern " << p.pattern_id << " activation statistics: frequency=" << p.gallery.frequency
    << ", mean=" << p.gallery.mean_activation << ", max=" << p.gallery.max_activation << ".\n";
  s << "Top activating cases (activation, report excerpt):\n";
  for (std::size_t i = 0; i < p.gallery.exemplars.size(); ++i) {
    const auto& e = p.gallery.exemplars[i];
    s << i + 1 << ". [" << e.record_id << "] activation=" << e.activation << ": " << e.excerpt
      << "\n";
  }
  s << "Identify the common radiological pattern and classify it.";
  return s.str();
}

std::string verification_prompt(const std::string& description, const patterns::Exemplar& e) {
  return "Described pattern: " + description + "\nCase [" + e.record_id +
         "] report excerpt: " + e.excerpt + "\nDoes this case show the described pattern?";
}

json chat_request(const std::string& model, const std::string& system, const std::string& user) {
  return {{"model", model},
          {"temperature", 0},
          {"messages",
           json::array({{{"role", "system"}, {"content", system}},
                        {{"role", "user"}, {"content", user}}})}};
}

std::string chat_content(const std::string& body) {
  try {
    const auto j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw AnnotationError(AnnotationError::Kind::parse,
                          std::string("malformed chat response: ") + e.what());
  }
}

namespace {
json parse_object(const std::string& content) {
  // Tolerate a fenced code block around the object.
  const auto open = content.find('{');
  const auto close = content.rfind('}');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw AnnotationError(AnnotationError::Kind::parse, "response carries no JSON object");
  }
  try {
    return json::parse(content.substr(open, close - open + 1));
  } catch (const json::exception& e) {
    throw AnnotationError(AnnotationError::Kind::parse, std::string("invalid JSON: ") + e.what());
  }
}
}  // namespace

AnnotationResult parse_annotation(const std::string& content) {
  const auto j = parse_object(content);
  if (!j.contains("description") || !j["description"].is_string() ||
      j["description"].get<std::string>().empty()) {
    throw AnnotationError(AnnotationError::Kind::parse, "annotation lacks a description");
  }
  if (!j.contains("category") || !j["category"].is_string()) {
    throw AnnotationError(AnnotationError::Kind::parse, "annotation lacks a category");
  }
  AnnotationResult r;
  r.description = j["description"].get<std::string>();
  try {
    r.category = registry::category_from_string(j["category"].get<std::string>());
  } catch (const ValidationError& e) {
    throw AnnotationError(AnnotationError::Kind::parse, e.what());
  }
  return r;
}

bool parse_verification(const std::string& content) {
  const auto j = parse_object(content);
  if (!j.contains("match") || !j["match"].is_boolean()) {
    throw AnnotationError(AnnotationError::Kind::parse, "verification lacks a boolean 'match'");
  }
  return j["match"].get<bool>();
}

std::string ChatClient::complete(const std::string& system, const std::string& user) {
  return chat_content(transport_->post_json(chat_request(model_, system, user).dump()));
}

AnnotationResult ChatClient::annotate(const PatternRecord& pattern) {
  if (pattern.gallery.exemplars.empty()) {
    throw AnnotationError(AnnotationError::Kind::parse, "empty gallery");
  }
  return parse_annotation(complete(kAnnotateSystem, annotation_prompt(pattern)));
}

bool ChatClient::affirms(const std::string& description, const patterns::Exemplar& exemplar) {
  return parse_verification(complete(kVerifySystem, verification_prompt(description, exemplar)));
}

namespace {

class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(HttpConfig config) : config_(std::move(config)) {
    if (config_.base_url.empty()) throw ConfigError("annotation client needs a base_url");
  }

  std::string post_json(const std::string& body) override {
    httplib::Client cli(config_.base_url);
    cli.set_connection_timeout(config_.timeout);
    cli.set_read_timeout(config_.timeout);
    cli.set_write_timeout(config_.timeout);
    httplib::Headers headers;
    if (const char* token = std::getenv(config_.token_env.c_str()); token && *token) {
      headers.emplace("Authorization", std::string("Bearer ") + token);
    }
    auto res = cli.Post(config_.path, headers, body, "application/json");
    if (!res) {
      throw AnnotationError(AnnotationError::Kind::transport,
                            "request failed: " + httplib::to_string(res.error()));
    }
    if (res->status < 200 || res->status >= 300) {
      throw AnnotationError(AnnotationError::Kind::transport,
                            "annotation endpoint returned HTTP " + std::to_string(res->status));
    }
    return res->body;
  }

 private:
  HttpConfig config_;
};

}  // namespace

std::unique_ptr<Transport> make_http_transport(const HttpConfig& config) {
  return std::make_unique<HttpTransport>(config);
}

// Registry integration -----------------------------------------------------------

bool annotate_pattern(AnnotationClient& client, registry::Registry& reg, const std::string& id) {
  auto p = reg.get(id);
  if (p.gallery.exemplars.empty()) {
    p.last_error = "parse: empty gallery";
    reg.update(p);
    return false;
  }
  try {
    auto r = client.annotate(p);
    p.annotation = registry::Annotation{r.description, r.category, std::nullopt};
    p.last_error.clear();
    reg.update(p);
    return true;
  } catch (const AnnotationError& e) {
    p.last_error = std::string(e.retryable() ? "transport (retryable): " : "parse: ") + e.what();
    reg.update(p);
    return false;
  }
}

double verify_annotation(AnnotationClient& client, const PatternRecord& pattern,
                         const std::vector<patterns::Exemplar>& holdout) {
  if (!pattern.annotation) throw ConfigError("pattern " + pattern.pattern_id + " is not annotated");
  if (holdout.empty()) throw ConfigError("verification needs a non-empty holdout");
  std::set<std::string> gallery_ids;
  for (const auto& e : pattern.gallery.exemplars) gallery_ids.insert(e.record_id);
  for (const auto& e : holdout) {
    if (gallery_ids.count(e.record_id)) {
      throw ConfigError("holdout exemplar " + e.record_id + " is also a gallery exemplar");
    }
  }
  std::size_t yes = 0;
  for (const auto& e : holdout) {
    if (client.affirms(pattern.annotation->description, e)) ++yes;
  }
  return static_cast<double>(yes) / static_cast<double>(holdout.size());
}

bool verify_pattern(AnnotationClient& client, registry::Registry& reg, const std::string& id) {
  auto p = reg.get(id);
  if (!p.annotation) return false;
  try {
    const double agreement = verify_annotation(client, p, p.holdout);
    p.annotation->agreement = agreement;
    p.needs_review = agreement < registry::kMinAgreement;
    p.last_error.clear();
  } catch (const AnnotationError& e) {
    p.last_error = std::string(e.retryable() ? "transport (retryable): " : "parse: ") + e.what();
    reg.update(p);
    return false;
  } catch (const ConfigError& e) {
    p.last_error = e.what();
    p.needs_review = true;
    reg.update(p);
    return false;
  }
  reg.update(p);
  return true;
}

}  // namespace sparsepat::annotate
