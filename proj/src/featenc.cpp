#include "sparsepat/featenc.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <stdexcept>

#include "sparsepat/core/error.hpp"
#include "sparsepat/core/tensor_io.hpp"

namespace sparsepat::featenc {

using nlohmann::json;

PatternSet accepted_patterns(const registry::Registry& reg) {
  PatternSet set;
  for (const auto& p : reg.accepted()) {  // accepted() is in id order
    set.pattern_ids.push_back(p.pattern_id);
    set.members.push_back(p.members);
  }
  if (set.size() == 0) throw ConfigError("no accepted patterns in the registry");
  return set;
}

std::vector<SparseRow> pattern_activations(const transcoder::Ensemble& ensemble,
                                           const PatternSet& patterns, const Matrix& inputs) {
  // (member, neuron) -> pattern columns that include it
  std::vector<std::map<std::uint32_t, std::vector<std::uint32_t>>> owners(ensemble.size());
  std::vector<double> inv_count(patterns.size());
  for (std::size_t p = 0; p < patterns.size(); ++p) {
    const auto& members = patterns.members[p];
    if (members.empty()) throw ConfigError("pattern " + patterns.pattern_ids[p] + " has no members");
    inv_count[p] = 1.0 / static_cast<double>(members.size());
    for (const auto& n : members) {
      if (n.member >= ensemble.size() || !ensemble.members[n.member]) {
        throw ConfigError("pattern " + patterns.pattern_ids[p] + " references unavailable member " +
                          std::to_string(n.member));
      }
      if (n.neuron >= ensemble.members[n.member]->latent_dim()) {
        throw ConfigError("pattern " + patterns.pattern_ids[p] + " references neuron " +
                          patterns::to_string(n) + " out of range");
      }
      owners[n.member][static_cast<std::uint32_t>(n.neuron)].push_back(
          static_cast<std::uint32_t>(p));
    }
  }

  const std::size_t n = inputs.rows();
  std::vector<std::vector<double>> dense(n, std::vector<double>(patterns.size(), 0.0));
  std::vector<SparseRow> codes;
  for (std::size_t m = 0; m < ensemble.size(); ++m) {
    if (owners[m].empty()) continue;
    transcoder::encode_batch(*ensemble.members[m], inputs, codes);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = codes[i];
      for (std::size_t t = 0; t < c.nnz(); ++t) {
        auto it = owners[m].find(c.index[t]);
        if (it == owners[m].end()) continue;
        for (auto p : it->second) dense[i][p] += c.value[t];
      }
    }
  }

  std::vector<SparseRow> out(n);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < patterns.size(); ++p) {
      const double v = dense[i][p] * inv_count[p];
      if (v > 0.0) {
        out[i].index.push_back(static_cast<std::uint32_t>(p));
        out[i].value.push_back(v);
      }
    }
  }
  return out;
}

std::string to_string(ThresholdBasis b) { return b == ThresholdBasis::positive ? "positive" : "all"; }

ThresholdBasis threshold_basis_from_string(const std::string& s) {
  if (s == "positive") return ThresholdBasis::positive;
  if (s == "all") return ThresholdBasis::all;
  throw ConfigError("unknown threshold basis '" + s + "' (expected positive|all)");
}

double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("nearest_rank: empty input");
  if (!(q > 0.0 && q <= 100.0)) throw std::invalid_argument("nearest_rank: q outside (0, 100]");
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1),
                   values.end());
  return values[rank - 1];
}

std::vector<double> compute_pattern_thresholds(const std::vector<SparseRow>& activations,
                                               std::size_t n_patterns,
                                               const ThresholdConfig& config) {
  if (n_patterns == 0) throw ConfigError("no accepted patterns to threshold");
  std::vector<std::vector<double>> per(n_patterns);
  for (const auto& row : activations) {
    for (std::size_t t = 0; t < row.nnz(); ++t) {
      if (row.index[t] >= n_patterns) throw std::out_of_range("activation column out of range");
      if (row.value[t] > 0.0) per[row.index[t]].push_back(row.value[t]);
    }
  }
  std::vector<double> tau(n_patterns, 0.0);
  for (std::size_t p = 0; p < n_patterns; ++p) {
    auto& v = per[p];
    if (config.basis == ThresholdBasis::positive) {
      if (v.size() < config.min_positive || v.empty()) continue;
    } else {
      if (v.empty()) continue;
      v.resize(activations.size(), 0.0);
    }
    tau[p] = nearest_rank(std::move(v), config.percentile);
  }
  return tau;
}

FeatureVector encode_row(std::string record_id, const SparseRow& activations,
                         const std::vector<double>& thresholds, std::size_t k_active) {
  FeatureVector fv;
  fv.record_id = std::move(record_id);
  std::vector<std::pair<std::uint32_t, double>> kept;
  for (std::size_t t = 0; t < activations.nnz(); ++t) {
    const auto p = activations.index[t];
    if (p >= thresholds.size()) throw std::out_of_range("activation column out of range");
    const double v = activations.value[t];
    if (v > thresholds[p] && v > 0.0) kept.emplace_back(p, v);
  }
  if (kept.size() > k_active) {
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    kept.resize(k_active);
    std::sort(kept.begin(), kept.end());
  }
  double sq = 0.0;
  for (const auto& [p, v] : kept) sq += v * v;
  const double norm = std::sqrt(sq);
  for (const auto& [p, v] : kept) {
    fv.index.push_back(p);
    fv.value.push_back(v / norm);
  }
  fv.normalized = !kept.empty();
  return fv;
}

const FeatureVector* FeatureMatrix::find(const std::string& record_id) const {
  for (const auto& r : rows) {
    if (r.record_id == record_id) return &r;
  }
  return nullptr;
}

FeatureMatrix encode(const transcoder::Ensemble& ensemble, const PatternSet& patterns,
                     const std::vector<double>& thresholds, const Matrix& inputs,
                     const std::vector<std::string>& record_ids, std::size_t k_active) {
  if (patterns.size() == 0) throw ConfigError("registry has no accepted patterns");
  if (thresholds.size() != patterns.size()) {
    throw ConfigError("threshold count differs from accepted pattern count");
  }
  if (record_ids.size() != inputs.rows()) throw std::invalid_argument("record id count mismatch");
  const auto acts = pattern_activations(ensemble, patterns, inputs);
  FeatureMatrix fm;
  fm.pattern_ids = patterns.pattern_ids;
  fm.k_active = k_active;
  fm.rows.resize(acts.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < acts.size(); ++i) {
    fm.rows[i] = encode_row(record_ids[i], acts[i], thresholds, k_active);
  }
  return fm;
}

namespace {
constexpr char kMagic[] = "SPFT";
}

void save_features(const FeaturePaths& paths, const FeatureMatrix& f) {
  std::string out(kMagic, 4);
  binio::put_u32(out, 1);
  std::uint64_t nnz = 0;
  for (const auto& r : f.rows) nnz += r.nnz();
  binio::put_u64(out, nnz);
  for (std::size_t i = 0; i < f.rows.size(); ++i) {
    const auto& r = f.rows[i];
    for (std::size_t t = 0; t < r.nnz(); ++t) {
      binio::put_u32(out, static_cast<std::uint32_t>(i));
      binio::put_u32(out, r.index[t]);
      binio::put_u64(out, std::bit_cast<std::uint64_t>(r.value[t]));
    }
  }
  json header = {{"format", "sparse-triplets-f64"},
                 {"rows", f.rows.size()},
                 {"cols", f.pattern_ids.size()},
                 {"nnz", nnz},
                 {"k_active", f.k_active},
                 {"pattern_ids", f.pattern_ids}};
  json ids = json::array();
  json norm = json::array();
  for (const auto& r : f.rows) {
    ids.push_back(r.record_id);
    norm.push_back(r.normalized);
  }
  header["record_ids"] = std::move(ids);
  header["normalized"] = std::move(norm);
  binio::write_atomic(paths.bin, out);
  binio::write_atomic(paths.header, header.dump(1) + "\n");
}

FeatureMatrix load_features(const FeaturePaths& paths) {
  json header;
  try {
    header = json::parse(binio::read_all(paths.header));
  } catch (const json::exception& e) {
    throw ConfigError("corrupt feature header " + paths.header.string() + ": " + e.what());
  }
  binio::Reader in(binio::read_all(paths.bin));
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(in.u8()));
  if (magic != std::string(kMagic, 4) || in.u32() != 1) {
    throw ConfigError("not a feature matrix file: " + paths.bin.string());
  }
  FeatureMatrix f;
  f.pattern_ids = header.at("pattern_ids").get<std::vector<std::string>>();
  f.k_active = header.at("k_active").get<std::size_t>();
  const auto ids = header.at("record_ids").get<std::vector<std::string>>();
  const auto norm = header.at("normalized").get<std::vector<bool>>();
  f.rows.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    f.rows[i].record_id = ids[i];
    f.rows[i].normalized = norm.at(i);
  }
  const auto nnz = in.u64();
  for (std::uint64_t t = 0; t < nnz; ++t) {
    const auto r = in.u32();
    const auto c = in.u32();
    const auto v = std::bit_cast<double>(in.u64());
    if (r >= f.rows.size() || c >= f.pattern_ids.size()) {
      throw ConfigError("feature triplet out of range in " + paths.bin.string());
    }
    f.rows[r].index.push_back(c);
    f.rows[r].value.push_back(v);
  }
  if (!in.at_end()) throw ConfigError("trailing bytes in " + paths.bin.string());
  return f;
}

json thresholds_to_json(const PatternSet& patterns, const std::vector<double>& thresholds,
                        const ThresholdConfig& config) {
  json t = json::object();
  for (std::size_t p = 0; p < patterns.size(); ++p) t[patterns.pattern_ids[p]] = thresholds.at(p);
  return {{"percentile", config.percentile},
          {"min_positive", config.min_positive},
          {"basis", to_string(config.basis)},
          {"thresholds", t}};
}

std::vector<double> thresholds_from_json(const json& j, const PatternSet& patterns) {
  const auto& t = j.at("thresholds");
  std::vector<double> out;
  for (const auto& id : patterns.pattern_ids) {
    if (!t.contains(id)) {
      throw ConfigError("no threshold for accepted pattern " + id + "; rerun thresholds");
    }
    out.push_back(t.at(id).get<double>());
  }
  return out;
}

}  // namespace sparsepat::featenc
