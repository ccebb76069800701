#include "sparsepat/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <regex>
#include <set>

#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/core/tensor_io.hpp"

namespace sparsepat::synthgen {

using nlohmann::json;

namespace {
constexpr std::uint64_t kDictionaryStream = 0xD1C7;
constexpr std::uint64_t kMixingStream = 0x313C;
constexpr std::uint64_t kSampleStream = 0x5A3B1E;
constexpr double kCoefLo = 0.5;
constexpr double kCoefHi = 1.5;
}  // namespace

void SyntheticSpec::validate() const {
  if (n_factors == 0 || d_img == 0 || d_txt == 0 || target_dim == 0) {
    throw ConfigError("synth spec: dims and n_factors must be positive");
  }
  if (k_true == 0 || k_true > n_factors) throw ConfigError("synth spec: need 1 <= k_true <= n_factors");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw ConfigError("synth spec: noise_sigma must be finite and >= 0");
  }
  if (label_rules.empty()) throw ConfigError("synth spec: at least one label rule is required");
  for (const auto& rule : label_rules) {
    if (rule.empty()) throw ConfigError("synth spec: empty label rule");
    for (auto f : rule) {
      if (f >= n_factors) {
        throw ConfigError("synth spec: label rule references factor " + std::to_string(f) +
                          " but n_factors is " + std::to_string(n_factors));
      }
    }
  }
  if (!label_names.empty() && label_names.size() != label_rules.size()) {
    throw ConfigError("synth spec: label_names length differs from label_rules");
  }
  if (n_samples == 0 || n_patients == 0) throw ConfigError("synth spec: empty sample or patient count");
  if (orthogonal.value_or(false) && n_factors > input_dim()) {
    throw ConfigError("synth spec: cannot orthogonalize " + std::to_string(n_factors) +
                      " factors in " + std::to_string(input_dim()) + " dimensions");
  }
}

void to_json(json& j, const SyntheticSpec& s) {
  j = json{{"n_factors", s.n_factors},     {"d_img", s.d_img},
           {"d_txt", s.d_txt},             {"target_dim", s.target_dim},
           {"k_true", s.k_true},           {"noise_sigma", s.noise_sigma},
           {"label_rules", s.label_rules}, {"label_names", s.label_names},
           {"n_samples", s.n_samples},     {"n_patients", s.n_patients},
           {"seed", s.seed}};
  if (s.orthogonal) j["orthogonal"] = *s.orthogonal;
}

void from_json(const json& j, SyntheticSpec& s) {
  static const std::set<std::string> kKeys = {
      "n_factors", "d_img",     "d_txt",     "input_dim",  "target_dim", "k_true", "noise_sigma",
      "label_rules", "label_names", "n_samples", "n_patients", "seed",      "orthogonal"};
  for (const auto& [k, _] : j.items()) {
    if (!kKeys.count(k)) throw ConfigError("synth spec: unknown key '" + k + "'");
  }
  s.n_factors = j.value("n_factors", s.n_factors);
  if (j.contains("input_dim") && !j.contains("d_img")) {
    const auto in = j.at("input_dim").get<std::size_t>();
    s.d_img = in / 2;
    s.d_txt = in - s.d_img;
  }
  s.d_img = j.value("d_img", s.d_img);
  s.d_txt = j.value("d_txt", s.d_txt);
  s.target_dim = j.value("target_dim", s.target_dim);
  s.k_true = j.value("k_true", s.k_true);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.label_rules = j.value("label_rules", s.label_rules);
  s.label_names = j.value("label_names", s.label_names);
  s.n_samples = j.value("n_samples", s.n_samples);
  s.n_patients = j.value("n_patients", s.n_patients);
  s.seed = j.value("seed", s.seed);
  if (j.contains("orthogonal")) s.orthogonal = j.at("orthogonal").get<bool>();
  if (j.contains("input_dim") && j.at("input_dim").get<std::size_t>() != s.input_dim()) {
    throw ConfigError("synth spec: input_dim differs from d_img + d_txt");
  }
}

namespace {

Matrix gaussian_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

// Modified Gram-Schmidt over rows.
void orthonormalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto ri = m.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      auto rj = m.row(j);
      const double p = dot(ri, rj);
      for (std::size_t c = 0; c < ri.size(); ++c) ri[c] -= p * rj[c];
    }
    if (l2_norm(ri) < 1e-10) throw NumericError("dictionary orthonormalization degenerated");
    normalize(ri);
  }
}

}  // namespace

std::string factor_excerpt(const std::vector<std::size_t>& support,
                           const std::vector<double>& coefficients) {
  std::string out = "synthetic study:";
  for (std::size_t i = 0; i < support.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " factor-%zu (%.2f)%s", support[i], coefficients[i],
                  i + 1 < support.size() ? ";" : ".");
    out += buf;
  }
  return out;
}

std::vector<std::size_t> factors_in_excerpt(const std::string& excerpt) {
  static const std::regex kFactor(R"(factor-(\d+))");
  std::vector<std::size_t> out;
  for (auto it = std::sregex_iterator(excerpt.begin(), excerpt.end(), kFactor);
       it != std::sregex_iterator(); ++it) {
    out.push_back(std::stoul((*it)[1].str()));
  }
  return out;
}

Benchmark generate_benchmark(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t M = spec.n_factors;
  const std::size_t in_dim = spec.input_dim();
  const bool orthogonal = spec.orthogonal.value_or(M <= in_dim);

  GroundTruth truth;
  truth.orthogonal = orthogonal;
  truth.label_rules = spec.label_rules;
  {
    Rng rng(derive_seed(spec.seed, kDictionaryStream));
    truth.dictionary = gaussian_rows(M, in_dim, rng);
    if (orthogonal) {
      orthonormalize_rows(truth.dictionary);
    } else {
      for (std::size_t i = 0; i < M; ++i) normalize(truth.dictionary.row(i));
    }
  }
  {
    Rng rng(derive_seed(spec.seed, kMixingStream));
    truth.mixing = gaussian_rows(M, spec.target_dim, rng);
    for (std::size_t i = 0; i < M; ++i) normalize(truth.mixing.row(i));
  }

  const std::size_t n = spec.n_samples;
  const std::size_t L = spec.label_rules.size();
  truth.supports.resize(n);
  truth.coefficients.resize(n);
  Matrix targets(n, spec.target_dim);
  std::vector<embedstore::EmbeddingRecord> records(n);

  std::vector<std::string> names = spec.label_names;
  if (names.empty()) {
    for (std::size_t l = 0; l < L; ++l) names.push_back("target_" + std::to_string(l));
  }

#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(derive_seed(spec.seed, kSampleStream), i));
    auto support = rng.sample_without_replacement(M, spec.k_true);
    std::sort(support.begin(), support.end());
    std::vector<double> coef(support.size());
    for (double& c : coef) c = rng.uniform(kCoefLo, kCoefHi);

    std::vector<double> x(in_dim, 0.0);
    auto t = targets.row(i);
    for (std::size_t s = 0; s < support.size(); ++s) {
      auto d = truth.dictionary.row(support[s]);
      auto mix = truth.mixing.row(support[s]);
      for (std::size_t c = 0; c < in_dim; ++c) x[c] += coef[s] * d[c];
      for (std::size_t c = 0; c < t.size(); ++c) t[c] += coef[s] * mix[c];
    }
    if (spec.noise_sigma > 0.0) {
      for (double& v : x) v += spec.noise_sigma * rng.normal();
    }

    auto& rec = records[i];
    char id[32];
    std::snprintf(id, sizeof id, "rec_%06zu", i);
    rec.record_id = id;
    std::snprintf(id, sizeof id, "patient_%05zu", i % spec.n_patients);
    rec.patient_id = id;
    rec.image_embedding.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(spec.d_img));
    rec.text_embedding.assign(x.begin() + static_cast<std::ptrdiff_t>(spec.d_img), x.end());
    rec.labels.resize(L, embedstore::Label::negative);
    for (std::size_t l = 0; l < L; ++l) {
      for (auto f : spec.label_rules[l]) {
        if (std::binary_search(support.begin(), support.end(), f)) {
          rec.labels[l] = embedstore::Label::positive;
          break;
        }
      }
    }
    rec.report_excerpt = factor_excerpt(support, coef);
    truth.supports[i] = std::move(support);
    truth.coefficients[i] = std::move(coef);
  }

  auto manifest = embedstore::DatasetManifest::with_dims(spec.d_img, spec.d_txt, std::move(names));
  return Benchmark{embedstore::Dataset(std::move(manifest), std::move(records)), std::move(targets),
                   std::move(truth)};
}

MatchReport match_atoms(const Matrix& learned, const Matrix& truth, double min_cos) {
  MatchReport report;
  if (learned.rows() == 0 || truth.rows() == 0) return report;
  if (learned.cols() != truth.cols()) throw ConfigError("match_atoms: atom dims differ");
  for (const Matrix* m : {&learned, &truth}) {
    for (std::size_t i = 0; i < m->rows(); ++i) {
      if (std::abs(l2_norm(m->row(i)) - 1.0) > 1e-6) {
        throw ConfigError("match_atoms: atoms must be unit-normalized");
      }
    }
  }
  std::vector<AtomMatch> all;
  all.reserve(learned.rows() * truth.rows());
  for (std::size_t i = 0; i < learned.rows(); ++i) {
    for (std::size_t j = 0; j < truth.rows(); ++j) {
      const double c = dot(learned.row(i), truth.row(j));
      if (c >= min_cos) all.push_back({i, j, c});
    }
  }
  std::sort(all.begin(), all.end(), [](const AtomMatch& a, const AtomMatch& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    if (a.truth != b.truth) return a.truth < b.truth;
    return a.learned < b.learned;
  });
  std::vector<bool> used_l(learned.rows(), false), used_t(truth.rows(), false);
  for (const auto& m : all) {
    if (used_l[m.learned] || used_t[m.truth]) continue;
    used_l[m.learned] = used_t[m.truth] = true;
    report.pairs.push_back(m);
  }
  report.recovery_rate = static_cast<double>(report.pairs.size()) / static_cast<double>(truth.rows());
  return report;
}

// Persistence ----------------------------------------------------------------

void save_benchmark(const std::filesystem::path& store, const SyntheticSpec& spec,
                    const Benchmark& bench) {
  TruthPaths paths{store};
  std::filesystem::create_directories(store);
  TensorFile tensors;
  tensors.tensors["dictionary"] = bench.truth.dictionary;
  tensors.tensors["mixing"] = bench.truth.mixing;
  write_tensor_file(paths.tensors(), tensors);
  TensorFile targets;
  targets.tensors["targets"] = bench.targets;
  write_tensor_file(paths.targets(), targets);

  json j{{"n_factors", bench.truth.dictionary.rows()},
         {"input_dim", bench.truth.dictionary.cols()},
         {"target_dim", bench.truth.mixing.cols()},
         {"orthogonal", bench.truth.orthogonal},
         {"label_rules", bench.truth.label_rules},
         {"record_ids", json::array()},
         {"supports", bench.truth.supports},
         {"coefficients", bench.truth.coefficients}};
  for (const auto& r : bench.dataset.records()) j["record_ids"].push_back(r.record_id);
  binio::write_atomic(paths.json(), j.dump() + "\n");
  binio::write_atomic(paths.spec(), json(spec).dump(2) + "\n");
}

bool has_ground_truth(const std::filesystem::path& store) {
  return std::filesystem::exists(TruthPaths{store}.json());
}

GroundTruth load_ground_truth(const std::filesystem::path& store) {
  TruthPaths paths{store};
  if (!has_ground_truth(store)) {
    throw PrerequisiteError("no ground truth in " + store.string(), "synth");
  }
  const auto j = json::parse(binio::read_all(paths.json()));
  const auto tensors = read_tensor_file(paths.tensors());
  GroundTruth t;
  t.dictionary = tensors.at("dictionary");
  t.mixing = tensors.at("mixing");
  // Float storage perturbs unit norms in the last bits.
  for (std::size_t i = 0; i < t.dictionary.rows(); ++i) normalize(t.dictionary.row(i));
  for (std::size_t i = 0; i < t.mixing.rows(); ++i) normalize(t.mixing.row(i));
  t.orthogonal = j.at("orthogonal").get<bool>();
  t.label_rules = j.at("label_rules").get<std::vector<std::vector<std::size_t>>>();
  t.supports = j.at("supports").get<std::vector<std::vector<std::size_t>>>();
  t.coefficients = j.at("coefficients").get<std::vector<std::vector<double>>>();
  return t;
}

Matrix load_synthetic_targets(const std::filesystem::path& store) {
  TruthPaths paths{store};
  if (!std::filesystem::exists(paths.targets())) {
    throw PrerequisiteError("no synthetic targets in " + store.string(), "synth");
  }
  return read_tensor_file(paths.targets()).at("targets");
}

}  // namespace sparsepat::synthgen
