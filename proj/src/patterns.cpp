#include "sparsepat/patterns.hpp"

#include <algorithm>
#include <cmath>

#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"

namespace sparsepat::patterns {

using nlohmann::json;

std::string to_string(const NeuronRef& n) {
  return "t" + std::to_string(n.member) + ":n" + std::to_string(n.neuron);
}

void to_json(json& j, const NeuronRef& n) {
  j = json{{"transcoder_id", n.member}, {"neuron_index", n.neuron}};
}

void from_json(const json& j, NeuronRef& n) {
  n.member = j.at("transcoder_id").get<std::size_t>();
  n.neuron = j.at("neuron_index").get<std::size_t>();
}

void to_json(json& j, const Exemplar& e) {
  j = json{{"record_id", e.record_id}, {"activation", e.activation}, {"excerpt", e.excerpt}};
}

void from_json(const json& j, Exemplar& e) {
  e.record_id = j.at("record_id").get<std::string>();
  e.activation = j.at("activation").get<double>();
  e.excerpt = j.value("excerpt", std::string{});
}

void to_json(json& j, const ActivationGallery& g) {
  j = json{{"neuron", g.neuron},
           {"exemplars", g.exemplars},
           {"frequency", g.frequency},
           {"mean_activation", g.mean_activation},
           {"max_activation", g.max_activation}};
}

void from_json(const json& j, ActivationGallery& g) {
  g.neuron = j.at("neuron").get<NeuronRef>();
  g.exemplars = j.at("exemplars").get<std::vector<Exemplar>>();
  g.frequency = j.at("frequency").get<double>();
  g.mean_activation = j.at("mean_activation").get<double>();
  g.max_activation = j.at("max_activation").get<double>();
}

ProbeActivations::ProbeActivations(const transcoder::Ensemble& ensemble, const Matrix& inputs,
                                   std::vector<std::string> record_ids)
    : record_ids_(std::move(record_ids)) {
  if (record_ids_.size() != inputs.rows()) throw ConfigError("probe ids do not match inputs");
  hits_.resize(ensemble.size());
  for (std::size_t m = 0; m < ensemble.size(); ++m) {
    if (!ensemble.members[m]) continue;
    const auto& model = *ensemble.members[m];
    std::vector<transcoder::SparseRow> codes;
    transcoder::encode_batch(model, inputs, codes);
    auto& per_neuron = hits_[m];
    per_neuron.assign(model.latent_dim(), {});
    for (std::size_t i = 0; i < codes.size(); ++i) {
      for (std::size_t a = 0; a < codes[i].nnz(); ++a) {
        per_neuron[codes[i].index[a]].push_back({static_cast<std::uint32_t>(i), codes[i].value[a]});
      }
    }
  }
}

std::vector<std::size_t> select_probe(const embedstore::Dataset& dataset, std::size_t probe_size,
                                      std::uint64_t seed) {
  auto train = dataset.indices(embedstore::Split::train);
  if (train.empty()) throw PrerequisiteError("probe needs a non-empty train split", "split");
  if (probe_size == 0) throw ConfigError("probe size must be >= 1");
  Rng rng(derive_seed(seed, 0x9B0BE));
  auto pick = rng.sample_without_replacement(train.size(), probe_size);
  std::vector<std::size_t> out;
  out.reserve(pick.size());
  for (auto p : pick) out.push_back(train[p]);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<NeuronStats> compute_activation_stats(const ProbeActivations& probe) {
  if (probe.probe_size() == 0) throw ConfigError("activation stats need a non-empty probe");
  std::vector<NeuronStats> out;
  const double n = static_cast<double>(probe.probe_size());
  for (std::size_t m = 0; m < probe.members(); ++m) {
    for (std::size_t j = 0; j < probe.latent(m); ++j) {
      NeuronStats s;
      s.neuron = {m, j};
      const auto& hits = probe.hits(s.neuron);
      double sum = 0.0;
      for (const auto& h : hits) {
        sum += h.value;
        s.max_activation = std::max(s.max_activation, h.value);
      }
      s.frequency = static_cast<double>(hits.size()) / n;
      s.mean_activation = hits.empty() ? 0.0 : sum / static_cast<double>(hits.size());
      out.push_back(s);
    }
  }
  return out;
}

std::vector<Exemplar> ranked_exemplars(const NeuronRef& neuron, const ProbeActivations& probe,
                                       std::size_t begin, std::size_t count,
                                       const ExcerptLookup& excerpts) {
  auto hits = probe.hits(neuron);
  const auto& ids = probe.record_ids();
  std::sort(hits.begin(), hits.end(), [&](const auto& a, const auto& b) {
    if (a.value != b.value) return a.value > b.value;
    return ids[a.sample] < ids[b.sample];
  });
  std::vector<Exemplar> out;
  for (std::size_t r = begin; r < hits.size() && r < begin + count; ++r) {
    const auto& id = ids[hits[r].sample];
    out.push_back({id, hits[r].value, excerpts ? excerpts(id) : std::string{}});
  }
  return out;
}

ActivationGallery build_gallery(const NeuronStats& stats, const ProbeActivations& probe,
                                std::size_t top_n, const ExcerptLookup& excerpts) {
  ActivationGallery g;
  g.neuron = stats.neuron;
  g.frequency = stats.frequency;
  g.mean_activation = stats.mean_activation;
  g.max_activation = stats.max_activation;
  g.exemplars = ranked_exemplars(stats.neuron, probe, 0, top_n, excerpts);
  return g;
}

bool filter_frequency(double frequency, double lo, double hi) {
  return frequency >= lo && frequency <= hi;
}

ConsistencyResult consistency_score(std::span<const std::vector<double>> emb, double threshold) {
  ConsistencyResult r;
  if (emb.size() < 2) {
    r.reason = "needs at least 2 exemplars, got " + std::to_string(emb.size());
    return r;
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < emb.size(); ++i) {
    for (std::size_t j = i + 1; j < emb.size(); ++j) {
      total += cosine(emb[i], emb[j]);
      ++pairs;
    }
  }
  r.score = total / static_cast<double>(pairs);
  r.pass = r.score >= threshold;
  return r;
}

std::vector<Cluster> cluster_duplicates(std::vector<Candidate> candidates, double cos_threshold) {
  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.max_activation != b.max_activation) return a.max_activation > b.max_activation;
    return a.neuron < b.neuron;
  });
  std::vector<Cluster> clusters;
  std::vector<std::vector<double>> sums;  // raw member decoder columns
  for (auto& c : candidates) {
    std::vector<double> atom = c.decoder_atom;
    normalize(atom);
    bool placed = false;
    for (std::size_t k = 0; k < clusters.size(); ++k) {
      if (dot(atom, clusters[k].centroid) >= cos_threshold) {
        clusters[k].members.push_back(c.neuron);
        for (std::size_t d = 0; d < atom.size(); ++d) sums[k][d] += c.decoder_atom[d];
        clusters[k].centroid = sums[k];
        normalize(clusters[k].centroid);
        placed = true;
        break;
      }
    }
    if (!placed) {
      clusters.push_back({{c.neuron}, atom});
      sums.push_back(c.decoder_atom);
    }
  }
  return clusters;
}

}  // namespace sparsepat::patterns
