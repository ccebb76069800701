#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsepat/annotate.hpp"
#include "sparsepat/embedstore.hpp"
#include "sparsepat/featenc.hpp"
#include "sparsepat/interphead.hpp"
#include "sparsepat/mlpcls.hpp"
#include "sparsepat/synthgen.hpp"
#include "sparsepat/transcoder.hpp"

namespace sparsepat::pipeline {

namespace fs = std::filesystem;

struct IngestConfig {
  fs::path input;
  std::size_t max_excerpt_tokens = 256;
};

struct EnsembleConfig {
  transcoder::TranscoderConfig transcoder;
  std::size_t members = 8;
  std::string target = "penultimate";  // penultimate | logits | synthetic
};

struct DiscoverConfig {
  std::size_t probe_size = 1000;
  std::size_t top_n = 10;
  std::size_t holdout = 10;
  double freq_lo = 0.001;
  double freq_hi = 0.5;
  double consistency = 0.5;
  double cluster_cos = 0.9;
};

struct AnnotateConfig {
  std::string client = "mock";  // mock | http
  annotate::HttpConfig http;
};

struct CurateConfig {
  std::string reviewer = "auto-curator";
  std::string note = "agreement threshold met";
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  fs::path assets;
  std::string token_env;  // when set, verdict POSTs need this token
};

struct PipelineConfig {
  fs::path store = "store";
  std::uint64_t seed = 1;
  IngestConfig ingest;
  embedstore::SplitRatios split;
  std::optional<synthgen::SyntheticSpec> synth;
  mlpcls::TrainConfig classifier;
  EnsembleConfig ensemble;
  DiscoverConfig discover;
  AnnotateConfig annotate;
  CurateConfig curate;
  featenc::ThresholdConfig thresholds;
  std::size_t k_active = 30;
  interphead::HeadConfig head;
  ServeConfig serve;
};

nlohmann::json to_json(const PipelineConfig& c);
/// Applies the keys of `j` on top of `base`. Unknown keys throw ConfigError.
PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base = {});
PipelineConfig load_config(const fs::path& path);

/// Artifact locations inside a store directory.
struct Store {
  fs::path root;

  embedstore::StorePaths dataset() const { return {root}; }
  fs::path classifier() const { return root / "classifier"; }  // stem
  fs::path extracted() const { return root / "penultimate.bin"; }
  fs::path ensemble() const { return root / "transcoders"; }
  fs::path registry() const { return root / "registry"; }
  fs::path thresholds() const { return root / "thresholds.json"; }
  featenc::FeaturePaths features() const {
    return {root / "features.bin", root / "features.json"};
  }
  fs::path head() const { return root / "head.json"; }
  fs::path stage_manifest(const std::string& stage) const {
    return root / "stages" / (stage + ".json");
  }
  fs::path effective_config() const { return root / "config.effective.json"; }
  fs::path summary() const { return root / "e2e_summary.json"; }
};

// Stages. Each reads the artifacts of earlier stages from the store and
// writes its own plus a stage manifest. Missing inputs raise
// PrerequisiteError naming the stage to run first.
void run_ingest(const PipelineConfig& c);
void run_split(const PipelineConfig& c);
void run_synth(const PipelineConfig& c);
void run_train_classifier(const PipelineConfig& c);
void run_extract(const PipelineConfig& c);
void run_train_transcoders(const PipelineConfig& c);
void run_discover(const PipelineConfig& c);
void run_annotate(const PipelineConfig& c);
/// Accepts every pattern whose verified agreement meets the threshold.
void run_curate(const PipelineConfig& c);
void run_verdict(const PipelineConfig& c, const std::string& pattern_id, const std::string& verdict,
                 const std::string& reviewer, const std::string& note);
/// Accepted patterns with annotations as one JSON document.
nlohmann::json run_curate_export(const PipelineConfig& c);
void run_thresholds(const PipelineConfig& c);
void run_encode(const PipelineConfig& c);
void run_train_head(const PipelineConfig& c);
/// Attribution report JSON for one record and target.
nlohmann::json run_explain(const PipelineConfig& c, const std::string& record_id,
                           const std::string& target);

/// Oracle evaluation of a synthetic store against its ground truth: atom
/// recovery, per-target test accuracy, top-attribution rule rate, sparsity.
nlohmann::json run_evaluate(const PipelineConfig& c);

/// Every stage on a synthetic benchmark followed by oracle evaluation. The
/// summary holds no timings or paths, so one seed gives identical bytes.
nlohmann::json run_e2e(const PipelineConfig& c);

/// Serialized form used for summary files: sorted keys, 2-space indent.
std::string dump_summary(const nlohmann::json& summary);

/// Writes the effective configuration into the store.
void echo_config(const PipelineConfig& c);

}  // namespace sparsepat::pipeline
