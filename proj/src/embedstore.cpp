#include "sparsepat/embedstore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <unordered_set>

#include "sparsepat/core/digest.hpp"
#include "sparsepat/core/error.hpp"
#include "sparsepat/core/tensor_io.hpp"

namespace sparsepat::embedstore {

using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw ValidationError("unknown split '" + s + "'");
}

DatasetManifest DatasetManifest::with_dims(std::size_t d_img, std::size_t d_txt,
                                           std::vector<std::string> label_names) {
  DatasetManifest m;
  m.d_img = d_img;
  m.d_txt = d_txt;
  m.num_labels = label_names.size();
  m.label_names = std::move(label_names);
  return m;
}

void to_json(json& j, const DatasetManifest& m) {
  j = json{{"d_img", m.d_img},
           {"d_txt", m.d_txt},
           {"num_labels", m.num_labels},
           {"label_names", m.label_names},
           {"counts",
            {{"train", m.counts.train},
             {"val", m.counts.val},
             {"test", m.counts.test},
             {"unassigned", m.counts.unassigned},
             {"total", m.counts.total()}}},
           {"digest", m.digest}};
}

void from_json(const json& j, DatasetManifest& m) {
  m.d_img = j.at("d_img").get<std::size_t>();
  m.d_txt = j.at("d_txt").get<std::size_t>();
  m.label_names = j.at("label_names").get<std::vector<std::string>>();
  m.num_labels = j.value("num_labels", m.label_names.size());
  if (m.d_img == 0 || m.d_txt == 0 || m.num_labels == 0) {
    throw ValidationError("manifest dims and label count must be positive");
  }
  if (m.label_names.size() != m.num_labels) {
    throw ValidationError("manifest label_names length differs from num_labels");
  }
  if (j.contains("counts")) {
    const auto& c = j.at("counts");
    m.counts.train = c.value("train", std::size_t{0});
    m.counts.val = c.value("val", std::size_t{0});
    m.counts.test = c.value("test", std::size_t{0});
    m.counts.unassigned = c.value("unassigned", std::size_t{0});
    if (c.contains("total") && c.at("total").get<std::size_t>() != m.counts.total()) {
      throw ValidationError("manifest split counts do not sum to total");
    }
  }
  m.digest = j.value("digest", std::string{});
}

// Dataset --------------------------------------------------------------------

Dataset::Dataset(DatasetManifest manifest, std::vector<EmbeddingRecord> records)
    : manifest_(std::move(manifest)), records_(std::move(records)) {
  by_id_.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (!by_id_.emplace(records_[i].record_id, i).second) {
      throw ValidationError("duplicate record_id '" + records_[i].record_id + "'");
    }
  }
  refresh_counts();
  manifest_.digest = dataset_digest(records_, manifest_);
}

std::optional<std::size_t> Dataset::index_of(const std::string& record_id) const {
  auto it = by_id_.find(record_id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

const EmbeddingRecord& Dataset::at(const std::string& record_id) const {
  auto idx = index_of(record_id);
  if (!idx) throw ValidationError("unknown record_id '" + record_id + "'");
  return records_[*idx];
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].split == split) out.push_back(i);
  }
  return out;
}

Matrix Dataset::joint_inputs(const std::vector<std::size_t>& idx) const {
  Matrix x(idx.size(), input_dim());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& rec = records_[idx[r]];
    auto row = x.row(r);
    std::copy(rec.image_embedding.begin(), rec.image_embedding.end(), row.begin());
    std::copy(rec.text_embedding.begin(), rec.text_embedding.end(),
              row.begin() + static_cast<std::ptrdiff_t>(manifest_.d_img));
  }
  return x;
}

Matrix Dataset::image_inputs(const std::vector<std::size_t>& idx) const {
  Matrix x(idx.size(), manifest_.d_img);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& rec = records_[idx[r]];
    std::copy(rec.image_embedding.begin(), rec.image_embedding.end(), x.row(r).begin());
  }
  return x;
}

void Dataset::label_matrix(const std::vector<std::size_t>& idx, UnknownPolicy policy,
                           Matrix& labels, Matrix& mask) const {
  labels = Matrix(idx.size(), manifest_.num_labels);
  mask = Matrix(idx.size(), manifest_.num_labels, 1.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& rec = records_[idx[r]];
    for (std::size_t l = 0; l < manifest_.num_labels; ++l) {
      switch (rec.labels[l]) {
        case Label::positive: labels(r, l) = 1.0; break;
        case Label::negative: break;
        case Label::unknown:
          if (policy == UnknownPolicy::mask) mask(r, l) = 0.0;
          break;
      }
    }
  }
}

void Dataset::apply_splits(const std::vector<Split>& splits) {
  if (splits.size() != records_.size()) throw ConfigError("split assignment size mismatch");
  for (std::size_t i = 0; i < splits.size(); ++i) records_[i].split = splits[i];
  refresh_counts();
}

void Dataset::refresh_counts() {
  SplitCounts c;
  for (const auto& r : records_) {
    switch (r.split) {
      case Split::train: ++c.train; break;
      case Split::val: ++c.val; break;
      case Split::test: ++c.test; break;
      case Split::unassigned: ++c.unassigned; break;
    }
  }
  manifest_.counts = c;
}

// Excerpts -------------------------------------------------------------------

namespace {

// Length of the whitespace code point starting at s[i], or 0 when s[i] does
// not start one.
std::size_t whitespace_len(const std::string& s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  if (c == ' ' || (c >= 0x09 && c <= 0x0d)) return 1;
  auto byte = [&](std::size_t k) -> unsigned {
    return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0u;
  };
  if (c == 0xc2 && (byte(1) == 0x85 || byte(1) == 0xa0)) return 2;  // NEL, NBSP
  if (c == 0xe1 && byte(1) == 0x9a && byte(2) == 0x80) return 3;      // U+1680
  if (c == 0xe2 && byte(1) == 0x80) {
    const unsigned b = byte(2);
    if ((b >= 0x80 && b <= 0x8a) || b == 0xa8 || b == 0xa9 || b == 0xaf) return 3;
  }
  if (c == 0xe2 && byte(1) == 0x81 && byte(2) == 0x9f) return 3;  // U+205F
  if (c == 0xe3 && byte(1) == 0x80 && byte(2) == 0x80) return 3;  // U+3000
  return 0;
}

}  // namespace

std::string truncate_excerpt(const std::string& text, std::size_t max_tokens) {
  if (max_tokens == 0) throw ConfigError("truncate_excerpt: max_tokens must be >= 1");
  std::size_t tokens = 0;
  std::size_t last_end = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::size_t w = whitespace_len(text, i)) {
      i += w;
      continue;
    }
    if (tokens == max_tokens) return text.substr(0, last_end);
    ++tokens;
    while (i < text.size() && whitespace_len(text, i) == 0) ++i;
    last_end = i;
  }
  return text;
}

// Records --------------------------------------------------------------------

namespace {

std::string where(std::size_t line_no, const std::string& id) {
  std::string s = "line " + std::to_string(line_no);
  if (!id.empty()) s += " (record '" + id + "')";
  return s;
}

std::vector<float> parse_embedding(const json& j, const char* field, std::size_t dim,
                                   std::size_t line_no, const std::string& id) {
  const auto& arr = j.at(field);
  if (!arr.is_array()) throw ValidationError(where(line_no, id) + ": " + field + " must be an array");
  if (arr.size() != dim) {
    throw ValidationError(where(line_no, id) + ": " + field + " has length " +
                          std::to_string(arr.size()) + ", manifest declares " +
                          std::to_string(dim));
  }
  std::vector<float> out;
  out.reserve(dim);
  for (const auto& v : arr) {
    if (!v.is_number()) {
      throw ValidationError(where(line_no, id) + ": " + field + " has a non-numeric entry");
    }
    const auto f = static_cast<float>(v.get<double>());
    if (!std::isfinite(f)) {
      throw ValidationError(where(line_no, id) + ": " + field + " has a non-finite entry");
    }
    out.push_back(f);
  }
  return out;
}

}  // namespace

EmbeddingRecord parse_record(const std::string& line, const DatasetManifest& manifest,
                             std::size_t line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(where(line_no, "") + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw ValidationError(where(line_no, "") + ": record must be an object");
  EmbeddingRecord r;
  try {
    r.record_id = j.at("record_id").get<std::string>();
    r.patient_id = j.at("patient_id").get<std::string>();
    if (r.record_id.empty()) throw ValidationError(where(line_no, "") + ": empty record_id");
    r.image_embedding = parse_embedding(j, "image_embedding", manifest.d_img, line_no, r.record_id);
    r.text_embedding = parse_embedding(j, "text_embedding", manifest.d_txt, line_no, r.record_id);
    const auto& labels = j.at("labels");
    if (!labels.is_array() || labels.size() != manifest.num_labels) {
      throw ValidationError(where(line_no, r.record_id) + ": labels must have length " +
                            std::to_string(manifest.num_labels));
    }
    for (const auto& v : labels) {
      if (v.is_null()) {
        r.labels.push_back(Label::unknown);
      } else if (v.is_number_integer() && (v == 0 || v == 1 || v == -1)) {
        r.labels.push_back(static_cast<Label>(v.get<int>()));
      } else {
        throw ValidationError(where(line_no, r.record_id) +
                              ": labels must be 0, 1, or null/-1 for unknown");
      }
    }
    r.report_excerpt = j.value("report_excerpt", std::string{});
    if (j.contains("split")) r.split = split_from_string(j.at("split").get<std::string>());
  } catch (const json::exception& e) {
    throw ValidationError(where(line_no, r.record_id) + ": " + e.what());
  }
  return r;
}

json record_to_json(const EmbeddingRecord& r) {
  json labels = json::array();
  for (auto l : r.labels) {
    if (l == Label::unknown) {
      labels.push_back(nullptr);
    } else {
      labels.push_back(static_cast<int>(l));
    }
  }
  return json{{"record_id", r.record_id},
              {"patient_id", r.patient_id},
              {"image_embedding", r.image_embedding},
              {"text_embedding", r.text_embedding},
              {"labels", labels},
              {"report_excerpt", r.report_excerpt},
              {"split", to_string(r.split)}};
}

Dataset ingest_records(const std::filesystem::path& path, DatasetManifest manifest) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open input " + path.string());
  if (manifest.label_names.size() != manifest.num_labels) {
    throw ConfigError("manifest label_names length differs from num_labels");
  }
  std::vector<EmbeddingRecord> records;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto rec = parse_record(line, manifest, line_no);
    if (!seen.insert(rec.record_id).second) {
      throw ValidationError(where(line_no, rec.record_id) + ": duplicate record_id");
    }
    records.push_back(std::move(rec));
  }
  return Dataset(std::move(manifest), std::move(records));
}

DatasetManifest infer_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open input " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = json::parse(line);
    std::vector<std::string> names;
    for (std::size_t l = 0; l < j.at("labels").size(); ++l) names.push_back("label_" + std::to_string(l));
    return DatasetManifest::with_dims(j.at("image_embedding").size(), j.at("text_embedding").size(),
                                      std::move(names));
  }
  throw ValidationError(path.string() + ": no records");
}

// Packed form ----------------------------------------------------------------

namespace {
constexpr char kRecMagic[4] = {'S', 'P', 'R', 'C'};
constexpr std::uint32_t kRecVersion = 1;
}  // namespace

std::string pack_records(const std::vector<EmbeddingRecord>& records,
                         const DatasetManifest& manifest, bool include_split) {
  using namespace binio;
  std::string out(kRecMagic, 4);
  put_u32(out, kRecVersion);
  put_u32(out, static_cast<std::uint32_t>(manifest.d_img));
  put_u32(out, static_cast<std::uint32_t>(manifest.d_txt));
  put_u32(out, static_cast<std::uint32_t>(manifest.num_labels));
  for (const auto& n : manifest.label_names) put_str(out, n);
  put_u8(out, include_split ? 1 : 0);
  put_u64(out, records.size());
  for (const auto& r : records) {
    put_str(out, r.record_id);
    put_str(out, r.patient_id);
    for (float v : r.image_embedding) put_f32(out, v);
    for (float v : r.text_embedding) put_f32(out, v);
    for (auto l : r.labels) put_u8(out, static_cast<std::uint8_t>(static_cast<std::int8_t>(l)));
    put_str(out, r.report_excerpt);
    if (include_split) put_u8(out, static_cast<std::uint8_t>(r.split));
  }
  return out;
}

std::vector<EmbeddingRecord> unpack_records(const std::string& bytes, DatasetManifest& manifest) {
  binio::Reader in(bytes);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(in.u8());
  if (std::memcmp(magic, kRecMagic, 4) != 0) throw ValidationError("not a packed record file");
  if (in.u32() != kRecVersion) throw ValidationError("unsupported packed record version");
  manifest.d_img = in.u32();
  manifest.d_txt = in.u32();
  manifest.num_labels = in.u32();
  manifest.label_names.clear();
  for (std::size_t l = 0; l < manifest.num_labels; ++l) manifest.label_names.push_back(in.str());
  const bool has_split = in.u8() != 0;
  const auto n = in.u64();
  std::vector<EmbeddingRecord> records(n);
  for (auto& r : records) {
    r.record_id = in.str();
    r.patient_id = in.str();
    r.image_embedding.resize(manifest.d_img);
    r.text_embedding.resize(manifest.d_txt);
    for (float& v : r.image_embedding) v = in.f32();
    for (float& v : r.text_embedding) v = in.f32();
    r.labels.resize(manifest.num_labels);
    for (auto& l : r.labels) {
      const auto b = static_cast<std::int8_t>(in.u8());
      if (b != 0 && b != 1 && b != -1) throw ValidationError("packed label out of range");
      l = static_cast<Label>(b);
    }
    r.report_excerpt = in.str();
    if (has_split) {
      const auto s = in.u8();
      if (s > 3) throw ValidationError("packed split out of range");
      r.split = static_cast<Split>(s);
    }
  }
  if (!in.at_end()) throw ValidationError("trailing bytes in packed record file");
  return records;
}

std::string dataset_digest(const std::vector<EmbeddingRecord>& records,
                           const DatasetManifest& manifest) {
  return sha256_hex(pack_records(records, manifest, false));
}

// Splits ---------------------------------------------------------------------

double patient_position(std::uint64_t seed, const std::string& patient_id) {
  std::string buf;
  binio::put_u64(buf, seed);
  buf += patient_id;
  const std::string hex = sha256_hex(buf);
  const std::uint64_t top = std::stoull(hex.substr(0, 13), nullptr, 16);  // 52 bits
  return static_cast<double>(top) * 0x1.0p-52;
}

std::vector<Split> assign_splits(const Dataset& dataset, SplitRatios ratios, std::uint64_t seed) {
  if (dataset.size() == 0) throw ConfigError("assign_splits: empty dataset");
  if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0)) {
    throw ConfigError("split ratios must be positive");
  }
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1");
  }
  std::map<std::string, std::size_t> per_patient;
  for (const auto& r : dataset.records()) ++per_patient[r.patient_id];

  struct Entry {
    double pos;
    const std::string* id;
    std::size_t n;
  };
  std::vector<Entry> order;
  order.reserve(per_patient.size());
  for (const auto& [id, n] : per_patient) order.push_back({patient_position(seed, id), &id, n});
  std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
    return a.pos < b.pos || (a.pos == b.pos && *a.id < *b.id);
  });

  const double total = static_cast<double>(dataset.size());
  std::map<std::string, Split> patient_split;
  double cumulative = 0.0;
  for (const auto& e : order) {
    const double mid = (cumulative + 0.5 * static_cast<double>(e.n)) / total;
    Split s = Split::test;
    if (mid < ratios.train) {
      s = Split::train;
    } else if (mid < ratios.train + ratios.val) {
      s = Split::val;
    }
    patient_split.emplace(*e.id, s);
    cumulative += static_cast<double>(e.n);
  }

  std::vector<Split> out;
  out.reserve(dataset.size());
  for (const auto& r : dataset.records()) out.push_back(patient_split.at(r.patient_id));
  return out;
}

// Store ----------------------------------------------------------------------

void write_jsonl(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  binio::write_atomic(path, out);
}

void save_dataset(const StorePaths& store, const Dataset& dataset) {
  std::filesystem::create_directories(store.root);
  binio::write_atomic(store.records_bin(),
                      pack_records(dataset.records(), dataset.manifest(), true));
  write_jsonl(store.records_jsonl(), dataset.records());
  binio::write_atomic(store.manifest(), json(dataset.manifest()).dump(2) + "\n");
}

Dataset load_dataset(const StorePaths& store) {
  if (!std::filesystem::exists(store.records_bin())) {
    throw PrerequisiteError("no dataset in " + store.root.string(), "ingest");
  }
  DatasetManifest manifest = json::parse(binio::read_all(store.manifest())).get<DatasetManifest>();
  const std::string expected = manifest.digest;
  auto records = unpack_records(binio::read_all(store.records_bin()), manifest);
  Dataset ds(std::move(manifest), std::move(records));
  if (!expected.empty() && ds.manifest().digest != expected) {
    throw ValidationError("dataset digest mismatch in " + store.root.string());
  }
  return ds;
}

}  // namespace sparsepat::embedstore
