#include "sparsepat/registry.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#include "sparsepat/core/tensor_io.hpp"

namespace sparsepat::registry {

using nlohmann::json;

std::string to_string(Status s) {
  switch (s) {
    case Status::pending: return "pending";
    case Status::accepted: return "accepted";
    case Status::rejected: return "rejected";
  }
  return "pending";
}

std::string to_string(Category c) {
  switch (c) {
    case Category::cardiac: return "cardiac";
    case Category::pulmonary: return "pulmonary";
    case Category::pleural: return "pleural";
    case Category::structural: return "structural";
    case Category::device: return "device";
    case Category::artifact: return "artifact";
  }
  return "artifact";
}

std::string to_string(Verdict v) { return v == Verdict::accept ? "accept" : "reject"; }

Status status_from_string(const std::string& s) {
  if (s == "pending") return Status::pending;
  if (s == "accepted") return Status::accepted;
  if (s == "rejected") return Status::rejected;
  throw ValidationError("unknown status '" + s + "'");
}

Category category_from_string(const std::string& s) {
  static const std::map<std::string, Category> kMap = {
      {"cardiac", Category::cardiac},       {"pulmonary", Category::pulmonary},
      {"pleural", Category::pleural},       {"structural", Category::structural},
      {"device", Category::device},         {"artifact", Category::artifact}};
  auto it = kMap.find(s);
  if (it == kMap.end()) throw ValidationError("unknown category '" + s + "'");
  return it->second;
}

Verdict verdict_from_string(const std::string& s) {
  if (s == "accept") return Verdict::accept;
  if (s == "reject") return Verdict::reject;
  throw ValidationError("verdict must be 'accept' or 'reject', got '" + s + "'");
}

std::string make_pattern_id(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%05zu", n);
  return buf;
}

json to_json(const PatternRecord& p) {
  json j{{"pattern_id", p.pattern_id},
         {"members", p.members},
         {"centroid", p.centroid},
         {"gallery", p.gallery},
         {"holdout", p.holdout},
         {"consistency", p.consistency},
         {"threshold", p.threshold},
         {"status", to_string(p.status)},
         {"needs_review", p.needs_review},
         {"last_error", p.last_error},
         {"annotation", nullptr}};
  if (p.annotation) {
    j["annotation"] = {{"description", p.annotation->description},
                       {"category", to_string(p.annotation->category)},
                       {"agreement", p.annotation->agreement ? json(*p.annotation->agreement)
                                                             : json(nullptr)}};
  }
  return j;
}

PatternRecord pattern_from_json(const json& j) {
  PatternRecord p;
  p.pattern_id = j.at("pattern_id").get<std::string>();
  p.members = j.at("members").get<std::vector<patterns::NeuronRef>>();
  p.centroid = j.at("centroid").get<std::vector<double>>();
  p.gallery = j.at("gallery").get<patterns::ActivationGallery>();
  p.holdout = j.at("holdout").get<std::vector<patterns::Exemplar>>();
  p.consistency = j.at("consistency").get<double>();
  p.threshold = j.at("threshold").get<double>();
  p.status = status_from_string(j.at("status").get<std::string>());
  p.needs_review = j.value("needs_review", false);
  p.last_error = j.value("last_error", std::string{});
  if (j.contains("annotation") && !j.at("annotation").is_null()) {
    const auto& a = j.at("annotation");
    Annotation ann;
    ann.description = a.at("description").get<std::string>();
    ann.category = category_from_string(a.at("category").get<std::string>());
    if (a.contains("agreement") && !a.at("agreement").is_null()) {
      ann.agreement = a.at("agreement").get<double>();
    }
    p.annotation = std::move(ann);
  }
  if (p.members.empty()) throw ValidationError("pattern " + p.pattern_id + " has no member neurons");
  return p;
}

json summary_json(const PatternRecord& p) {
  json j{{"pattern_id", p.pattern_id},
         {"status", to_string(p.status)},
         {"category", nullptr},
         {"description", nullptr},
         {"agreement", nullptr},
         {"frequency", p.gallery.frequency},
         {"max_activation", p.gallery.max_activation},
         {"member_count", p.members.size()},
         {"needs_review", p.needs_review}};
  if (p.annotation) {
    j["category"] = to_string(p.annotation->category);
    j["description"] = p.annotation->description;
    if (p.annotation->agreement) j["agreement"] = *p.annotation->agreement;
  }
  return j;
}

json to_json(const AuditEntry& e) {
  return {{"seq", e.seq},
          {"timestamp", e.timestamp},
          {"pattern_id", e.pattern_id},
          {"verdict", to_string(e.verdict)},
          {"reviewer", e.reviewer},
          {"note", e.note},
          {"prior_status", to_string(e.prior_status)},
          {"new_status", to_string(e.new_status)}};
}

AuditEntry audit_from_json(const json& j) {
  AuditEntry e;
  e.seq = j.at("seq").get<std::size_t>();
  e.timestamp = j.at("timestamp").get<std::string>();
  e.pattern_id = j.at("pattern_id").get<std::string>();
  e.verdict = verdict_from_string(j.at("verdict").get<std::string>());
  e.reviewer = j.at("reviewer").get<std::string>();
  e.note = j.value("note", std::string{});
  e.prior_status = status_from_string(j.at("prior_status").get<std::string>());
  e.new_status = status_from_string(j.at("new_status").get<std::string>());
  return e;
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char date[32];
  std::strftime(date, sizeof date, "%Y-%m-%dT%H:%M:%S", &tm);
  char frac[8];
  std::snprintf(frac, sizeof frac, ".%03dZ", static_cast<int>(ms));
  return std::string(date) + frac;
}

std::vector<AuditEntry> read_audit(const std::filesystem::path& path) {
  std::vector<AuditEntry> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(audit_from_json(json::parse(line)));
  }
  return out;
}

}  // namespace

Registry::Registry(Registry&& other) noexcept
    : dir_(std::move(other.dir_)),
      patterns_(std::move(other.patterns_)),
      next_seq_(other.next_seq_) {}

std::filesystem::path Registry::pattern_path(const std::string& id) const {
  return dir_ / "patterns" / (id + ".json");
}

bool Registry::exists(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "index.json");
}

Registry Registry::create(const std::filesystem::path& dir, std::vector<PatternRecord> patterns) {
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "patterns");
  Registry r(dir);
  for (auto& p : patterns) {
    if (!r.patterns_.emplace(p.pattern_id, p).second) {
      throw ValidationError("duplicate pattern_id " + p.pattern_id);
    }
  }
  for (const auto& [_, p] : r.patterns_) r.write_pattern(p);
  r.write_index();
  std::ofstream(r.audit_path(), std::ios::trunc).flush();
  return r;
}

Registry Registry::open(const std::filesystem::path& dir) {
  if (!exists(dir)) throw PrerequisiteError("no pattern registry in " + dir.string(), "discover");
  Registry r(dir);
  const auto index = json::parse(binio::read_all(dir / "index.json"));
  for (const auto& entry : index.at("patterns")) {
    const auto id = entry.at("pattern_id").get<std::string>();
    r.patterns_.emplace(id, pattern_from_json(json::parse(binio::read_all(r.pattern_path(id)))));
  }
  const auto log = read_audit(r.audit_path());
  r.next_seq_ = log.empty() ? 1 : log.back().seq + 1;
  return r;
}

void Registry::write_pattern(const PatternRecord& p) const {
  binio::write_atomic(pattern_path(p.pattern_id), to_json(p).dump(2) + "\n");
}

void Registry::write_index() const {
  json list = json::array();
  for (const auto& [_, p] : patterns_) list.push_back(summary_json(p));
  binio::write_atomic(dir_ / "index.json",
                      json{{"format_version", 1}, {"count", patterns_.size()}, {"patterns", list}}
                              .dump(2) + "\n");
}

std::vector<PatternRecord> Registry::list() const {
  std::shared_lock lock(mutex_);
  std::vector<PatternRecord> out;
  out.reserve(patterns_.size());
  for (const auto& [_, p] : patterns_) out.push_back(p);
  return out;
}

std::optional<PatternRecord> Registry::find(const std::string& id) const {
  std::shared_lock lock(mutex_);
  auto it = patterns_.find(id);
  if (it == patterns_.end()) return std::nullopt;
  return it->second;
}

PatternRecord Registry::get(const std::string& id) const {
  auto p = find(id);
  if (!p) throw NotFoundError("unknown pattern_id '" + id + "'");
  return *p;
}

std::vector<PatternRecord> Registry::accepted() const {
  std::shared_lock lock(mutex_);
  std::vector<PatternRecord> out;
  for (const auto& [_, p] : patterns_) {
    if (p.status == Status::accepted) out.push_back(p);
  }
  return out;
}

std::size_t Registry::size() const {
  std::shared_lock lock(mutex_);
  return patterns_.size();
}

void Registry::update(const PatternRecord& updated) {
  std::unique_lock lock(mutex_);
  auto it = patterns_.find(updated.pattern_id);
  if (it == patterns_.end()) throw NotFoundError("unknown pattern_id '" + updated.pattern_id + "'");
  const Status status = it->second.status;
  it->second = updated;
  it->second.status = status;
  write_pattern(it->second);
  write_index();
}

PatternRecord Registry::record_verdict(const std::string& id, Verdict verdict,
                                       const std::string& reviewer, const std::string& note) {
  std::unique_lock lock(mutex_);
  auto it = patterns_.find(id);
  if (it == patterns_.end()) throw NotFoundError("unknown pattern_id '" + id + "'");
  auto& p = it->second;
  if (verdict == Verdict::accept) {
    if (!p.annotation) throw ConflictError("pattern " + id + " cannot be accepted without an annotation");
    if (!p.annotation->agreement || *p.annotation->agreement < kMinAgreement) {
      throw ConflictError("pattern " + id + " needs verified agreement >= 0.8 before acceptance");
    }
  }
  if (reviewer.empty()) throw ValidationError("verdict needs a reviewer");

  AuditEntry e;
  e.seq = next_seq_;
  e.timestamp = utc_now();
  e.pattern_id = id;
  e.verdict = verdict;
  e.reviewer = reviewer;
  e.note = note;
  e.prior_status = p.status;
  e.new_status = verdict == Verdict::accept ? Status::accepted : Status::rejected;
  {
    std::ofstream log(audit_path(), std::ios::app);
    if (!log) throw std::runtime_error("cannot append to " + audit_path().string());
    log << to_json(e).dump() << '\n';
    log.flush();
    if (!log) throw std::runtime_error("audit append failed");
  }
  ++next_seq_;
  p.status = e.new_status;
  if (verdict == Verdict::accept) p.needs_review = false;
  write_pattern(p);
  write_index();
  return p;
}

std::vector<AuditEntry> Registry::audit_log() const {
  std::shared_lock lock(mutex_);
  return read_audit(audit_path());
}

std::map<std::string, Status> Registry::replay(const std::vector<std::string>& ids,
                                               const std::vector<AuditEntry>& log) {
  std::map<std::string, Status> out;
  for (const auto& id : ids) out[id] = Status::pending;
  for (const auto& e : log) {
    out[e.pattern_id] = e.verdict == Verdict::accept ? Status::accepted : Status::rejected;
  }
  return out;
}

}  // namespace sparsepat::registry
