#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <set>
#include <thread>

#include "fixtures.hpp"
#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/patterns.hpp"
#include "sparsepat/registry.hpp"
#include "sparsepat/synthgen.hpp"

using namespace sparsepat;
using namespace sparsepat::patterns;
using testsupport::TempDir;

namespace {

struct Planted {
  synthgen::Benchmark bench;
  Matrix inputs;
  std::vector<std::string> ids;
};

Planted planted(std::size_t k_true, double noise, std::size_t n = 2000) {
  synthgen::SyntheticSpec s;
  s.n_factors = 64;
  s.d_img = 64;
  s.d_txt = 64;
  s.target_dim = 32;
  s.k_true = k_true;
  s.noise_sigma = noise;
  s.label_rules = {{0}};
  s.n_samples = n;
  s.n_patients = n / 4;
  s.seed = 13;
  Planted p{synthgen::generate_benchmark(s), {}, {}};
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  p.inputs = p.bench.dataset.joint_inputs(all);
  for (const auto& r : p.bench.dataset.records()) p.ids.push_back(r.record_id);
  return p;
}

// A transcoder whose neurons are exactly the planted atoms; the negative bias
// suppresses rounding-level activations of absent factors.
transcoder::Ensemble oracle_ensemble(const synthgen::GroundTruth& truth, std::size_t k) {
  const std::size_t M = truth.dictionary.rows();
  auto m = transcoder::TranscoderModel::zeros(truth.dictionary.cols(), M, truth.mixing.cols(), k);
  m.encoder = truth.dictionary;
  m.decoder = truth.mixing;
  m.encoder_bias.assign(M, -0.1);
  transcoder::Ensemble e;
  e.manifest.members.resize(1);
  e.members.push_back(m);
  return e;
}

ExcerptLookup excerpts_of(const embedstore::Dataset& ds) {
  return [&ds](const std::string& id) { return ds.at(id).report_excerpt; };
}

std::vector<double> text_of(const embedstore::EmbeddingRecord& r) {
  return {r.text_embedding.begin(), r.text_embedding.end()};
}

}  // namespace

TEST(Stats, ZeroEncoderRowNeverFires) {
  const auto p = planted(8, 0.01, 300);
  auto e = oracle_ensemble(p.bench.truth, 8);
  auto& m = *e.members[0];
  std::fill(m.encoder.row(5).begin(), m.encoder.row(5).end(), 0.0);
  m.encoder_bias[5] = 0.0;
  const ProbeActivations probe(e, p.inputs, p.ids);
  const auto stats = compute_activation_stats(probe);
  ASSERT_EQ(stats.size(), 64u);
  for (const auto& s : stats) {
    EXPECT_GE(s.frequency, 0.0);
    EXPECT_LE(s.frequency, 1.0);
  }
  EXPECT_EQ(stats[5].frequency, 0.0);
  const ProbeActivations empty(e, Matrix(0, p.inputs.cols()), {});
  EXPECT_THROW(compute_activation_stats(empty), ConfigError);
}

TEST(Stats, RecoveredAtomFrequencyMatchesPlantedRate) {
  const auto p = planted(8, 0.01, 1000);
  const ProbeActivations probe(oracle_ensemble(p.bench.truth, 8), p.inputs, p.ids);
  for (const auto& s : compute_activation_stats(probe)) {
    EXPECT_NEAR(s.frequency, 8.0 / 64.0, 0.05) << to_string(s.neuron);
    EXPECT_GT(s.mean_activation, 0.0);
    EXPECT_GE(s.max_activation, s.mean_activation);
  }
}

TEST(Gallery, EmptyForSilentNeuronAndSortedOtherwise) {
  const auto p = planted(8, 0.01, 500);
  auto e = oracle_ensemble(p.bench.truth, 8);
  e.members[0]->encoder_bias[3] = -100.0;
  const ProbeActivations probe(e, p.inputs, p.ids);
  const auto stats = compute_activation_stats(probe);
  const auto lookup = excerpts_of(p.bench.dataset);
  EXPECT_TRUE(build_gallery(stats[3], probe, 10, lookup).exemplars.empty());
  const auto g = build_gallery(stats[7], probe, 10, lookup);
  ASSERT_EQ(g.exemplars.size(), 10u);
  for (std::size_t i = 1; i < g.exemplars.size(); ++i) {
    EXPECT_GE(g.exemplars[i - 1].activation, g.exemplars[i].activation);
  }
  EXPECT_EQ(g.exemplars[0].activation, stats[7].max_activation);
}

TEST(Gallery, NoiselessMatchedNeuronShowsOnlyItsFactor) {
  const auto p = planted(8, 0.0, 1000);
  const ProbeActivations probe(oracle_ensemble(p.bench.truth, 8), p.inputs, p.ids);
  const auto stats = compute_activation_stats(probe);
  const auto lookup = excerpts_of(p.bench.dataset);
  for (std::size_t f = 0; f < 64; ++f) {
    for (const auto& ex : build_gallery(stats[f], probe, 10, lookup).exemplars) {
      const auto i = *p.bench.dataset.index_of(ex.record_id);
      const auto& sup = p.bench.truth.supports[i];
      EXPECT_TRUE(std::binary_search(sup.begin(), sup.end(), f)) << ex.record_id << " factor " << f;
    }
  }
}

TEST(Gallery, TiesBreakTowardLowerRecordId) {
  transcoder::Ensemble e;
  auto m = transcoder::TranscoderModel::zeros(1, 1, 1, 1);
  m.encoder(0, 0) = 1.0;
  e.manifest.members.resize(1);
  e.members.push_back(m);
  Matrix x(4, 1, 2.0);
  x(2, 0) = 1.0;
  const ProbeActivations probe(e, x, {"d", "b", "a", "c"});
  const auto stats = compute_activation_stats(probe);
  const auto g = build_gallery(stats[0], probe, 3, [](const std::string&) { return ""; });
  ASSERT_EQ(g.exemplars.size(), 3u);
  EXPECT_EQ(g.exemplars[0].record_id, "b");
  EXPECT_EQ(g.exemplars[1].record_id, "c");
  EXPECT_EQ(g.exemplars[2].record_id, "d");
  const auto rest = ranked_exemplars(stats[0].neuron, probe, 3, 10, [](const std::string&) { return ""; });
  ASSERT_EQ(rest.size(), 1u);
  EXPECT_EQ(rest[0].record_id, "a");
}

TEST(Filter, FrequencyBandInclusive) {
  EXPECT_FALSE(filter_frequency(0.0));
  EXPECT_TRUE(filter_frequency(0.25));
  EXPECT_TRUE(filter_frequency(0.001));
  EXPECT_TRUE(filter_frequency(0.5));
  EXPECT_FALSE(filter_frequency(0.5000001));
}

TEST(Consistency, Examples) {
  const std::vector<std::vector<double>> same{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}};
  EXPECT_NEAR(consistency_score(same).score, 1.0, 1e-15);
  EXPECT_TRUE(consistency_score(same).pass);
  const std::vector<std::vector<double>> orth{{1, 0}, {0, 1}};
  EXPECT_NEAR(consistency_score(orth).score, 0.0, 1e-15);
  EXPECT_FALSE(consistency_score(orth).pass);
  const std::vector<std::vector<double>> one{{1, 0}};
  const auto r = consistency_score(one);
  EXPECT_FALSE(r.pass);
  EXPECT_FALSE(r.reason.empty());
}

TEST(Consistency, SingleFactorTemplatesScoreHigh) {
  const auto p = planted(1, 0.01, 2000);
  std::map<std::size_t, std::vector<std::vector<double>>> by_factor;
  for (std::size_t i = 0; i < p.bench.dataset.size(); ++i) {
    auto& v = by_factor[p.bench.truth.supports[i][0]];
    if (v.size() < 10) v.push_back(text_of(p.bench.dataset.records()[i]));
  }
  for (const auto& [f, embs] : by_factor) {
    ASSERT_GE(embs.size(), 2u);
    EXPECT_GE(consistency_score(embs).score, 0.9) << "factor " << f;
  }
}

TEST(Cluster, IdenticalAtomsMergeOrthogonalStaySingle) {
  std::vector<Candidate> c{
      {{0, 4}, {1, 0, 0}, 2.0},
      {{1, 9}, {1, 0, 0}, 3.0},
      {{1, 2}, {0, 1, 0}, 1.0},
      {{2, 2}, {0, 0, 1}, 1.0},
  };
  const auto clusters = cluster_duplicates(c, 0.9);
  ASSERT_EQ(clusters.size(), 3u);
  EXPECT_EQ(clusters[0].members, (std::vector<NeuronRef>{{1, 9}, {0, 4}}));  // founder first
  EXPECT_NEAR(l2_norm(clusters[0].centroid), 1.0, 1e-15);
  EXPECT_EQ(clusters[1].members.size(), 1u);
  EXPECT_EQ(clusters[2].members.size(), 1u);
  EXPECT_EQ(cluster_duplicates(c, 0.9).size(), clusters.size());
}

TEST(Cluster, EnsembleReplicasCollapseToPlantedCount) {
  const auto p = planted(8, 0.0, 10);
  std::vector<Candidate> c;
  Rng rng(3);
  for (std::size_t member = 0; member < 8; ++member) {
    for (std::size_t f = 0; f < 64; ++f) {
      std::vector<double> atom(p.bench.truth.mixing.row(f).begin(), p.bench.truth.mixing.row(f).end());
      for (auto& v : atom) v += 0.02 * rng.normal();
      normalize(atom);
      c.push_back({{member, f}, atom, rng.uniform(1.0, 2.0)});
    }
  }
  const auto clusters = cluster_duplicates(c, 0.9);
  EXPECT_GE(clusters.size(), 56u);
  EXPECT_LE(clusters.size(), 80u);
}

TEST(Probe, TrainOnlyDeterministicDatasetOrder) {
  auto p = planted(8, 0.01, 400);
  auto& ds = p.bench.dataset;
  ds.apply_splits(embedstore::assign_splits(ds, {}, 2));
  const auto a = select_probe(ds, 100, 5);
  EXPECT_EQ(a, select_probe(ds, 100, 5));
  ASSERT_EQ(a.size(), 100u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  for (auto i : a) EXPECT_EQ(ds.records()[i].split, embedstore::Split::train);
}

// Registry -------------------------------------------------------------------

TEST(Registry, VerdictRules) {
  TempDir dir("reg");
  auto reg = registry::Registry::create(dir.path(), {testsupport::make_pattern(1),
                                                     testsupport::make_pattern(2)});
  EXPECT_EQ(reg.record_verdict("p00002", registry::Verdict::accept, "ann", "").status,
            registry::Status::accepted);
  EXPECT_THROW(reg.record_verdict("p00001", registry::Verdict::accept, "ann", ""),
               registry::ConflictError);
  EXPECT_EQ(reg.get("p00001").status, registry::Status::pending);
  EXPECT_THROW(reg.record_verdict("p09999", registry::Verdict::reject, "ann", ""),
               registry::NotFoundError);
  EXPECT_THROW(reg.record_verdict("p00001", registry::Verdict::reject, "", ""), ValidationError);

  auto low = reg.get("p00002");
  low.annotation->agreement = 0.7;
  reg.update(low);
  EXPECT_THROW(reg.record_verdict("p00002", registry::Verdict::accept, "ann", ""),
               registry::ConflictError);
}

TEST(Registry, TwoVerdictsLastWinsAndReplayMatches) {
  TempDir dir("reg");
  {
    auto reg = registry::Registry::create(dir.path(), {testsupport::make_pattern(4)});
    reg.record_verdict("p00004", registry::Verdict::accept, "a", "looks right");
    reg.record_verdict("p00004", registry::Verdict::reject, "b", "changed mind");
  }
  const auto reg = registry::Registry::open(dir.path());
  const auto log = reg.audit_log();
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[0].prior_status, registry::Status::pending);
  EXPECT_EQ(log[1].prior_status, registry::Status::accepted);
  EXPECT_EQ(log[1].reviewer, "b");
  EXPECT_FALSE(log[0].timestamp.empty());
  EXPECT_EQ(reg.get("p00004").status, registry::Status::rejected);
  EXPECT_EQ(registry::Registry::replay({"p00004"}, log).at("p00004"), registry::Status::rejected);
}

TEST(Registry, ConcurrentVerdictsSerializeAndReplay) {
  TempDir dir("reg");
  std::vector<registry::PatternRecord> ps;
  for (std::size_t n = 1; n <= 20; ++n) ps.push_back(testsupport::make_pattern(n));
  auto reg = registry::Registry::create(dir.path(), ps);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&reg, t] {
      for (std::size_t n = 2; n <= 20; n += 2) {
        const auto v = (n / 2 + t) % 2 ? registry::Verdict::accept : registry::Verdict::reject;
        reg.record_verdict(registry::make_pattern_id(n), v, "t" + std::to_string(t), "");
      }
    });
  }
  for (auto& t : threads) t.join();
  const auto log = reg.audit_log();
  ASSERT_EQ(log.size(), 40u);
  for (std::size_t i = 0; i < log.size(); ++i) EXPECT_EQ(log[i].seq, i + 1);
  std::vector<std::string> ids;
  for (const auto& p : ps) ids.push_back(p.pattern_id);
  const auto replayed = registry::Registry::replay(ids, log);
  const auto reopened = registry::Registry::open(dir.path());
  for (const auto& p : reopened.list()) EXPECT_EQ(replayed.at(p.pattern_id), p.status) << p.pattern_id;
}

TEST(Registry, RoundTripPreservesRecords) {
  TempDir dir("reg");
  auto p = testsupport::make_pattern(6);
  p.threshold = 0.125;
  p.needs_review = true;
  p.last_error = "transport (retryable): timeout";
  registry::Registry::create(dir.path(), {p});
  const auto back = registry::Registry::open(dir.path()).get("p00006");
  EXPECT_EQ(registry::to_json(back), registry::to_json(p));
}

TEST(Registry, CategoryValidation) {
  EXPECT_EQ(registry::category_from_string("pleural"), registry::Category::pleural);
  EXPECT_THROW(registry::category_from_string("lung"), ValidationError);
}
