#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "sparsepat/featenc.hpp"
#include "sparsepat/interphead.hpp"
#include "sparsepat/registry.hpp"

namespace httplib {
class Server;
}

namespace sparsepat::service {

struct ServiceConfig {
  std::filesystem::path store;
  std::filesystem::path assets;  // optional: <record_id>.png thumbnails
  std::string token;             // optional shared token for verdict POSTs
};

/// {"error": {"code", "message"}}
nlohmann::json error_body(const std::string& code, const std::string& message);

/// HTTP facade over a store directory. Handlers are safe to run
/// concurrently; registry writes are serialized by the registry.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();
  void wait_until_ready() const;

 private:
  void routes();
  std::shared_ptr<const interphead::HeadModel> head();
  std::shared_ptr<const featenc::FeatureMatrix> features();
  registry::Registry* registry();

  ServiceConfig config_;
  std::unique_ptr<httplib::Server> server_;
  std::mutex load_mutex_;
  std::optional<registry::Registry> registry_;
  std::shared_ptr<const interphead::HeadModel> head_;
  std::shared_ptr<const featenc::FeatureMatrix> features_;
};

}  // namespace sparsepat::service
