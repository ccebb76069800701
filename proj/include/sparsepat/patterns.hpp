#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/core/tensor.hpp"
#include "sparsepat/embedstore.hpp"
#include "sparsepat/transcoder.hpp"

namespace sparsepat::patterns {

/// One latent unit of one ensemble member.
struct NeuronRef {
  std::size_t member = 0;
  std::size_t neuron = 0;
  auto operator<=>(const NeuronRef&) const = default;
};

std::string to_string(const NeuronRef& n);
void to_json(nlohmann::json& j, const NeuronRef& n);
void from_json(const nlohmann::json& j, NeuronRef& n);

/// Codes of every ensemble member on a fixed probe set, plus an inverted
/// per-neuron index for gallery building.
class ProbeActivations {
 public:
  struct Hit {
    std::uint32_t sample;
    double value;
  };

  ProbeActivations(const transcoder::Ensemble& ensemble, const Matrix& inputs,
                   std::vector<std::string> record_ids);

  std::size_t probe_size() const { return record_ids_.size(); }
  std::size_t members() const { return hits_.size(); }
  std::size_t latent(std::size_t member) const { return hits_[member].size(); }
  const std::vector<std::string>& record_ids() const { return record_ids_; }
  /// Nonzero activations of one neuron in probe order.
  const std::vector<Hit>& hits(const NeuronRef& n) const { return hits_[n.member][n.neuron]; }

 private:
  std::vector<std::string> record_ids_;
  std::vector<std::vector<std::vector<Hit>>> hits_;  // [member][neuron]
};

/// Probe sample: `probe_size` train-split records drawn with `seed`,
/// returned in dataset order.
std::vector<std::size_t> select_probe(const embedstore::Dataset& dataset, std::size_t probe_size,
                                      std::uint64_t seed);

struct NeuronStats {
  NeuronRef neuron;
  double frequency = 0.0;       // fraction of probe samples with activation > 0
  double mean_activation = 0.0;  // over nonzero activations
  double max_activation = 0.0;
};

/// Stats for every neuron of every healthy member. Throws on an empty probe.
std::vector<NeuronStats> compute_activation_stats(const ProbeActivations& probe);

struct Exemplar {
  std::string record_id;
  double activation = 0.0;
  std::string excerpt;
};

struct ActivationGallery {
  NeuronRef neuron;
  std::vector<Exemplar> exemplars;  // descending activation, ties to lower record_id
  double frequency = 0.0;
  double mean_activation = 0.0;
  double max_activation = 0.0;
};

void to_json(nlohmann::json& j, const Exemplar& e);
void from_json(const nlohmann::json& j, Exemplar& e);
void to_json(nlohmann::json& j, const ActivationGallery& g);
void from_json(const nlohmann::json& j, ActivationGallery& g);

using ExcerptLookup = std::function<std::string(const std::string& record_id)>;

/// Probe records ranked by this neuron's activation, positions
/// [begin, begin + count). Zero activations are never ranked.
std::vector<Exemplar> ranked_exemplars(const NeuronRef& neuron, const ProbeActivations& probe,
                                       std::size_t begin, std::size_t count,
                                       const ExcerptLookup& excerpts);

ActivationGallery build_gallery(const NeuronStats& stats, const ProbeActivations& probe,
                                std::size_t top_n, const ExcerptLookup& excerpts);

/// Inclusive band check.
bool filter_frequency(double frequency, double lo = 0.001, double hi = 0.5);

struct ConsistencyResult {
  double score = 0.0;
  bool pass = false;
  std::string reason;  // set when the score could not be computed
};

/// Mean pairwise cosine of the exemplar text embeddings.
ConsistencyResult consistency_score(std::span<const std::vector<double>> text_embeddings,
                                    double threshold = 0.5);

struct Candidate {
  NeuronRef neuron;
  std::vector<double> decoder_atom;
  double max_activation = 0.0;
};

struct Cluster {
  std::vector<NeuronRef> members;  // founder first
  std::vector<double> centroid;    // unit-normalized mean of member atoms
};

/// Greedy duplicate clustering. Candidates are visited by descending max
/// activation (ties by neuron ref); each joins the first existing cluster with
/// centroid cosine >= threshold, otherwise founds a new one.
std::vector<Cluster> cluster_duplicates(std::vector<Candidate> candidates,
                                        double cos_threshold = 0.9);

}  // namespace sparsepat::patterns
