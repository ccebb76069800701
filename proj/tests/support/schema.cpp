#include "schema.hpp"

#include <fstream>
#include <map>

namespace testsupport {

namespace {

using nlohmann::json;

bool has_type(const json& v, const std::string& t) {
  if (t == "null") return v.is_null();
  if (t == "boolean") return v.is_boolean();
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "integer") return v.is_number_integer();
  if (t == "number") return v.is_number();
  return false;
}

class Validator {
 public:
  explicit Validator(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const json& load(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    std::ifstream in(dir_ / name);
    if (!in) throw std::runtime_error("missing schema " + name);
    return cache_.emplace(name, json::parse(in)).first->second;
  }

  void check(const json& v, const json& s, const std::string& at, std::vector<std::string>& errs) {
    if (s.contains("$ref")) return check(v, load(s["$ref"].get<std::string>()), at, errs);
    if (s.contains("type")) {
      bool ok = false;
      if (s["type"].is_array()) {
        for (const auto& t : s["type"]) ok = ok || has_type(v, t.get<std::string>());
      } else {
        ok = has_type(v, s["type"].get<std::string>());
      }
      if (!ok) {
        errs.push_back(at + ": expected type " + s["type"].dump() + ", got " + v.type_name());
        return;
      }
    }
    if (s.contains("enum")) {
      bool found = false;
      for (const auto& e : s["enum"]) found = found || e == v;
      if (!found) errs.push_back(at + ": " + v.dump() + " not in enum");
    }
    if (v.is_number()) {
      const double x = v.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>()) errs.push_back(at + ": below minimum");
      if (s.contains("maximum") && x > s["maximum"].get<double>()) errs.push_back(at + ": above maximum");
      if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>()) {
        errs.push_back(at + ": not above exclusiveMinimum");
      }
    }
    if (v.is_object()) {
      for (const auto& r : s.value("required", json::array())) {
        if (!v.contains(r.get<std::string>())) errs.push_back(at + ": missing " + r.get<std::string>());
      }
      const auto props = s.value("properties", json::object());
      for (const auto& [k, sub] : v.items()) {
        if (props.contains(k)) {
          check(sub, props[k], at + "." + k, errs);
        } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
          errs.push_back(at + ": unexpected key " + k);
        }
      }
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) {
        errs.push_back(at + ": too few items");
      }
      if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) {
        errs.push_back(at + ": too many items");
      }
      if (s.contains("items")) {
        for (std::size_t i = 0; i < v.size(); ++i) {
          check(v[i], s["items"], at + "[" + std::to_string(i) + "]", errs);
        }
      }
    }
  }

 private:
  std::filesystem::path dir_;
  std::map<std::string, json> cache_;
};

}  // namespace

std::vector<std::string> validate(const nlohmann::json& doc, const std::filesystem::path& dir,
                                  const std::string& name) {
  Validator v(dir);
  std::vector<std::string> errs;
  v.check(doc, v.load(name), "$", errs);
  return errs;
}

std::filesystem::path schema_dir() { return SPARSEPAT_SCHEMA_DIR; }

}  // namespace testsupport
