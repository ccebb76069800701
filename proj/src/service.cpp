#include "sparsepat/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>

#include "sparsepat/core/error.hpp"
#include "sparsepat/pipeline.hpp"

namespace sparsepat::service {

using nlohmann::json;

json error_body(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

namespace {

void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

void fail(httplib::Response& res, int status, const std::string& code, const std::string& msg) {
  send(res, status, error_body(code, msg));
}

std::optional<std::size_t> parse_positive(const std::string& s) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || v == 0) return std::nullopt;
  return v;
}

constexpr std::size_t kPageSize = 50;
constexpr std::size_t kMaxPageSize = 500;

}  // namespace

Service::Service(ServiceConfig config)
    : config_(std::move(config)), server_(std::make_unique<httplib::Server>()) {
  routes();
}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  if (!server_->bind_to_port(host, port)) {
    throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void Service::listen() { server_->listen_after_bind(); }
void Service::stop() {
  if (server_ && server_->is_running()) server_->stop();
}
void Service::wait_until_ready() const { server_->wait_until_ready(); }

registry::Registry* Service::registry() {
  std::lock_guard lock(load_mutex_);
  if (!registry_) {
    const auto dir = pipeline::Store{config_.store}.registry();
    if (!registry::Registry::exists(dir)) return nullptr;
    registry_.emplace(registry::Registry::open(dir));
  }
  return &*registry_;
}

std::shared_ptr<const interphead::HeadModel> Service::head() {
  std::lock_guard lock(load_mutex_);
  if (!head_) {
    const auto path = pipeline::Store{config_.store}.head();
    if (!std::filesystem::exists(path)) return nullptr;
    head_ = std::make_shared<const interphead::HeadModel>(interphead::load_head(path));
  }
  return head_;
}

std::shared_ptr<const featenc::FeatureMatrix> Service::features() {
  std::lock_guard lock(load_mutex_);
  if (!features_) {
    const auto paths = pipeline::Store{config_.store}.features();
    if (!std::filesystem::exists(paths.bin) || !std::filesystem::exists(paths.header)) {
      return nullptr;
    }
    features_ = std::make_shared<const featenc::FeatureMatrix>(featenc::load_features(paths));
  }
  return features_;
}

void Service::routes() {
  auto& s = *server_;

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "unknown error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    fail(res, 500, "internal", msg);
  });

  s.Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
    send(res, 200, {{"status", "ok"}, {"version", SPARSEPAT_VERSION}});
  });

  s.Get("/api/patterns", [this](const httplib::Request& req, httplib::Response& res) {
    std::optional<registry::Status> status;
    std::optional<registry::Category> category;
    std::size_t page = 1, page_size = kPageSize;
    try {
      if (req.has_param("status") && !req.get_param_value("status").empty()) {
        status = registry::status_from_string(req.get_param_value("status"));
      }
      if (req.has_param("category") && !req.get_param_value("category").empty()) {
        category = registry::category_from_string(req.get_param_value("category"));
      }
    } catch (const ConfigError& e) {
      return fail(res, 400, "invalid_verdict", e.what());
    }
    if (req.has_param("page")) {
      auto v = parse_positive(req.get_param_value("page"));
      if (!v) return fail(res, 400, "invalid_verdict", "page must be a positive integer");
      page = *v;
    }
    if (req.has_param("page_size")) {
      auto v = parse_positive(req.get_param_value("page_size"));
      if (!v || *v > kMaxPageSize) {
        return fail(res, 400, "invalid_verdict",
                    "page_size must be an integer in [1, " + std::to_string(kMaxPageSize) + "]");
      }
      page_size = *v;
    }
    std::vector<registry::PatternRecord> all;
    if (auto* reg = registry()) all = reg->list();  // id order
    std::vector<const registry::PatternRecord*> hit;
    for (const auto& p : all) {
      if (status && p.status != *status) continue;
      if (category && (!p.annotation || p.annotation->category != *category)) continue;
      hit.push_back(&p);
    }
    json items = json::array();
    const std::size_t begin = (page - 1) * page_size;
    for (std::size_t i = begin; i < hit.size() && i < begin + page_size; ++i) {
      items.push_back(registry::summary_json(*hit[i]));
    }
    send(res, 200,
         {{"patterns", std::move(items)},
          {"total", hit.size()},
          {"page", page},
          {"page_size", page_size},
          {"pages", (hit.size() + page_size - 1) / page_size}});
  });

  s.Get(R"(/api/patterns/([^/]+)/gallery)", [this](const httplib::Request& req,
                                                   httplib::Response& res) {
    const std::string id = req.matches[1];
    auto* reg = registry();
    if (!reg) return fail(res, 404, "not_found", "registry missing (run discover)");
    auto p = reg->find(id);
    if (!p) return fail(res, 404, "not_found", "unknown pattern " + id);
    json ex = json::array();
    for (const auto& e : p->gallery.exemplars) {
      json item = e;
      if (!config_.assets.empty() &&
          std::filesystem::exists(config_.assets / (e.record_id + ".png"))) {
        item["thumbnail"] = "/assets/" + e.record_id + ".png";
      }
      ex.push_back(std::move(item));
    }
    json annotation = nullptr;
    if (p->annotation) {
      annotation = {{"description", p->annotation->description},
                    {"category", registry::to_string(p->annotation->category)},
                    {"agreement", p->annotation->agreement ? json(*p->annotation->agreement)
                                                           : json(nullptr)}};
    }
    send(res, 200,
         {{"pattern_id", p->pattern_id},
          {"status", registry::to_string(p->status)},
          {"neuron", p->gallery.neuron},
          {"members", p->members},
          {"exemplars", std::move(ex)},
          {"frequency", p->gallery.frequency},
          {"mean_activation", p->gallery.mean_activation},
          {"max_activation", p->gallery.max_activation},
          {"consistency", p->consistency},
          {"threshold", p->threshold},
          {"needs_review", p->needs_review},
          {"annotation", std::move(annotation)}});
  });

  s.Post(R"(/api/patterns/([^/]+)/verdict)", [this](const httplib::Request& req,
                                                    httplib::Response& res) {
    if (!config_.token.empty()) {
      const auto auth = req.get_header_value("Authorization");
      if (auth != "Bearer " + config_.token) {
        return fail(res, 401, "unauthorized", "missing or wrong token");
      }
    }
    const std::string id = req.matches[1];
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return fail(res, 400, "invalid_verdict", "body is not valid JSON");
    }
    if (!body.is_object() || !body.contains("verdict") || !body["verdict"].is_string()) {
      return fail(res, 400, "invalid_verdict", "verdict must be \"accept\" or \"reject\"");
    }
    registry::Verdict verdict;
    try {
      verdict = registry::verdict_from_string(body["verdict"].get<std::string>());
    } catch (const ConfigError& e) {
      return fail(res, 400, "invalid_verdict", e.what());
    }
    const auto reviewer = body.value("reviewer", std::string{});
    const auto note = body.value("note", std::string{});
    if (reviewer.empty()) return fail(res, 400, "invalid_verdict", "reviewer is required");
    auto* reg = registry();
    if (!reg) return fail(res, 404, "not_found", "registry missing (run discover)");
    try {
      const auto updated = reg->record_verdict(id, verdict, reviewer, note);
      send(res, 200, registry::summary_json(updated));
    } catch (const registry::NotFoundError& e) {
      fail(res, 404, "not_found", e.what());
    } catch (const registry::ConflictError& e) {
      fail(res, 409, "conflict", e.what());
    } catch (const ValidationError& e) {
      fail(res, 400, "invalid_verdict", e.what());
    }
  });

  s.Get(R"(/api/records/([^/]+)/attribution/([^/]+))", [this](const httplib::Request& req,
                                                              httplib::Response& res) {
    const std::string record = req.matches[1];
    const std::string target = req.matches[2];
    auto h = head();
    if (!h) return fail(res, 404, "not_found", "head model missing (run train-head)");
    auto f = features();
    if (!f) return fail(res, 404, "not_found", "feature matrix missing (run encode)");
    const auto* fv = f->find(record);
    if (!fv) return fail(res, 404, "not_found", "no features for record " + record + " (run encode)");
    interphead::AttributionReport report;
    try {
      report = interphead::attribute(*h, *fv, target);
    } catch (const ConfigError& e) {
      return fail(res, 404, "not_found", e.what());
    }
    double z = report.bias;
    for (const auto& c : report.contributions) z += c.contribution;
    if (z - report.logit != 0.0) {
      return fail(res, 500, "internal", "attribution does not sum to the logit");
    }
    send(res, 200, interphead::to_json(report));
  });

  if (!config_.assets.empty()) {
    if (!s.set_mount_point("/assets", config_.assets.string())) {
      throw ConfigError("assets directory not found: " + config_.assets.string());
    }
  }

  s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty()) {
      fail(res, res.status, res.status == 404 ? "not_found" : "internal",
           "no route for " + req.method + " " + req.path);
    }
  });
}

}  // namespace sparsepat::service
