#include "sparsepat/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "sparsepat/core/digest.hpp"
#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/core/tensor_io.hpp"
#include "sparsepat/patterns.hpp"
#include "sparsepat/registry.hpp"

namespace sparsepat::pipeline {

using nlohmann::json;

namespace {

void log(const std::string& stage, const std::string& msg) {
  std::fprintf(stderr, "[%s] %s\n", stage.c_str(), msg.c_str());
}

std::string unknown_policy_name(embedstore::UnknownPolicy p) {
  return p == embedstore::UnknownPolicy::zero ? "zero" : "mask";
}

embedstore::UnknownPolicy unknown_policy_from(const std::string& s) {
  if (s == "zero") return embedstore::UnknownPolicy::zero;
  if (s == "mask") return embedstore::UnknownPolicy::mask;
  throw ConfigError("classifier.unknown_policy must be zero or mask, got '" + s + "'");
}

// Keys in `over` must exist in `base`; sections are checked recursively.
void check_keys(const json& over, const json& base, const std::string& where) {
  if (!over.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [k, v] : over.items()) {
    const auto path = where.empty() ? k : where + "." + k;
    if (!base.contains(k)) throw ConfigError("unknown config key '" + path + "'");
    if (k == "synth" && where.empty()) continue;  // validated by the spec parser
    if (base[k].is_object() && !v.is_null()) check_keys(v, base[k], path);
  }
}

}  // namespace

json to_json(const PipelineConfig& c) {
  const auto& k = c.classifier;
  json tc = transcoder::config_to_json(c.ensemble.transcoder);
  tc["members"] = c.ensemble.members;
  tc["target"] = c.ensemble.target;
  return {
      {"store", c.store.string()},
      {"seed", c.seed},
      {"ingest",
       {{"input", c.ingest.input.string()}, {"max_excerpt_tokens", c.ingest.max_excerpt_tokens}}},
      {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
      {"synth", c.synth ? json(*c.synth) : json(nullptr)},
      {"classifier",
       {{"lr", k.lr_max},
        {"weight_decay", k.weight_decay},
        {"epochs", k.epochs},
        {"patience", k.patience},
        {"batch_size", k.batch_size},
        {"h1", k.h1},
        {"h2", k.h2},
        {"theta", k.theta},
        {"dropout", k.dropout},
        {"beta1", k.beta1},
        {"beta2", k.beta2},
        {"eps", k.eps},
        {"unknown_policy", unknown_policy_name(k.unknown_policy)}}},
      {"transcoders", tc},
      {"discover",
       {{"probe_size", c.discover.probe_size},
        {"top_n", c.discover.top_n},
        {"holdout", c.discover.holdout},
        {"freq_lo", c.discover.freq_lo},
        {"freq_hi", c.discover.freq_hi},
        {"consistency", c.discover.consistency},
        {"cluster_cos", c.discover.cluster_cos}}},
      {"annotate",
       {{"client", c.annotate.client},
        {"base_url", c.annotate.http.base_url},
        {"path", c.annotate.http.path},
        {"model", c.annotate.http.model},
        {"token_env", c.annotate.http.token_env},
        {"timeout_s", c.annotate.http.timeout.count()}}},
      {"curate", {{"reviewer", c.curate.reviewer}, {"note", c.curate.note}}},
      {"thresholds",
       {{"percentile", c.thresholds.percentile},
        {"min_positive", c.thresholds.min_positive},
        {"basis", featenc::to_string(c.thresholds.basis)}}},
      {"encode", {{"k_active", c.k_active}}},
      {"head", interphead::config_to_json(c.head)},
      {"serve",
       {{"host", c.serve.host},
        {"port", c.serve.port},
        {"assets", c.serve.assets.string()},
        {"token_env", c.serve.token_env}}},
  };
}

PipelineConfig config_from_json(const json& over, PipelineConfig base) {
  json full = to_json(base);
  check_keys(over, full, "");
  for (const auto& [k, v] : over.items()) {
    if (v.is_object() && full[k].is_object()) {
      for (const auto& [kk, vv] : v.items()) full[k][kk] = vv;
    } else {
      full[k] = v;
    }
  }
  PipelineConfig c;
  try {
    c.store = full.at("store").get<std::string>();
    c.seed = full.at("seed").get<std::uint64_t>();
    c.ingest.input = full["ingest"].at("input").get<std::string>();
    c.ingest.max_excerpt_tokens = full["ingest"].at("max_excerpt_tokens").get<std::size_t>();
    c.split = {full["split"].at("train").get<double>(), full["split"].at("val").get<double>(),
               full["split"].at("test").get<double>()};
    if (!full["synth"].is_null()) c.synth = full["synth"].get<synthgen::SyntheticSpec>();
    const auto& k = full["classifier"];
    c.classifier.lr_max = k.at("lr").get<double>();
    c.classifier.weight_decay = k.at("weight_decay").get<double>();
    c.classifier.epochs = k.at("epochs").get<std::size_t>();
    c.classifier.patience = k.at("patience").get<std::size_t>();
    c.classifier.batch_size = k.at("batch_size").get<std::size_t>();
    c.classifier.h1 = k.at("h1").get<std::size_t>();
    c.classifier.h2 = k.at("h2").get<std::size_t>();
    c.classifier.theta = k.at("theta").get<double>();
    c.classifier.dropout = k.at("dropout").get<double>();
    c.classifier.beta1 = k.at("beta1").get<double>();
    c.classifier.beta2 = k.at("beta2").get<double>();
    c.classifier.eps = k.at("eps").get<double>();
    c.classifier.unknown_policy = unknown_policy_from(k.at("unknown_policy").get<std::string>());
    json tc = full["transcoders"];
    c.ensemble.members = tc.at("members").get<std::size_t>();
    c.ensemble.target = tc.at("target").get<std::string>();
    tc.erase("members");
    tc.erase("target");
    const auto opt = tc.at("optimizer").get<std::string>();
    if (opt != "adam" && opt != "full_batch_gd") {
      throw ConfigError("transcoders.optimizer must be adam or full_batch_gd");
    }
    c.ensemble.transcoder = transcoder::config_from_json(tc);
    const auto& d = full["discover"];
    c.discover = {d.at("probe_size").get<std::size_t>(), d.at("top_n").get<std::size_t>(),
                  d.at("holdout").get<std::size_t>(),    d.at("freq_lo").get<double>(),
                  d.at("freq_hi").get<double>(),         d.at("consistency").get<double>(),
                  d.at("cluster_cos").get<double>()};
    const auto& a = full["annotate"];
    c.annotate.client = a.at("client").get<std::string>();
    c.annotate.http.base_url = a.at("base_url").get<std::string>();
    c.annotate.http.path = a.at("path").get<std::string>();
    c.annotate.http.model = a.at("model").get<std::string>();
    c.annotate.http.token_env = a.at("token_env").get<std::string>();
    c.annotate.http.timeout = std::chrono::seconds(a.at("timeout_s").get<std::int64_t>());
    c.curate.reviewer = full["curate"].at("reviewer").get<std::string>();
    c.curate.note = full["curate"].at("note").get<std::string>();
    const auto& t = full["thresholds"];
    c.thresholds.percentile = t.at("percentile").get<double>();
    c.thresholds.min_positive = t.at("min_positive").get<std::size_t>();
    c.thresholds.basis = featenc::threshold_basis_from_string(t.at("basis").get<std::string>());
    c.k_active = full["encode"].at("k_active").get<std::size_t>();
    c.head = interphead::config_from_json(full["head"]);
    const auto& s = full["serve"];
    c.serve.host = s.at("host").get<std::string>();
    c.serve.port = s.at("port").get<int>();
    c.serve.assets = s.at("assets").get<std::string>();
    c.serve.token_env = s.at("token_env").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (c.annotate.client != "mock" && c.annotate.client != "http") {
    throw ConfigError("annotate.client must be mock or http");
  }
  const auto& target = c.ensemble.target;
  if (target != "penultimate" && target != "logits" && target != "synthetic") {
    throw ConfigError("transcoders.target must be penultimate, logits or synthetic");
  }
  if (c.k_active == 0) throw ConfigError("encode.k_active must be positive");
  if (c.ensemble.members == 0) throw ConfigError("transcoders.members must be positive");
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(binio::read_all(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string dump_summary(const json& summary) { return summary.dump(2) + "\n"; }

void echo_config(const PipelineConfig& c) {
  fs::create_directories(c.store);
  binio::write_atomic(Store{c.store}.effective_config(), to_json(c).dump(2) + "\n");
}

// Shared helpers ---------------------------------------------------------------

namespace {

Store store_of(const PipelineConfig& c) { return Store{c.store}; }

void require(const fs::path& p, const std::string& what, const std::string& stage) {
  if (!fs::exists(p)) {
    throw PrerequisiteError(what + " missing at " + p.string() + "; run `sparsepat " + stage +
                                "` first",
                            stage);
  }
}

std::string digest_of(const fs::path& p) { return fs::exists(p) ? sha256_file(p) : ""; }

void write_stage(const PipelineConfig& c, const std::string& stage, const json& inputs,
                 const json& outputs, const json& extra = json::object()) {
  const auto path = store_of(c).stage_manifest(stage);
  fs::create_directories(path.parent_path());
  json j = {{"stage", stage},  {"version", SPARSEPAT_VERSION}, {"seed", c.seed},
            {"inputs", inputs}, {"outputs", outputs},          {"details", extra}};
  binio::write_atomic(path, j.dump(2) + "\n");
}

embedstore::Dataset load_store_dataset(const PipelineConfig& c) {
  const auto s = store_of(c);
  require(s.dataset().manifest(), "dataset", "ingest");
  require(s.dataset().records_bin(), "dataset records", "ingest");
  return embedstore::load_dataset(s.dataset());
}

std::vector<std::size_t> train_indices(const embedstore::Dataset& ds) {
  auto idx = ds.indices(embedstore::Split::train);
  if (idx.empty()) {
    throw PrerequisiteError("dataset has no train split; run `sparsepat split` first", "split");
  }
  return idx;
}

std::vector<std::string> ids_of(const embedstore::Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::string> ids;
  ids.reserve(idx.size());
  for (auto i : idx) ids.push_back(ds.records()[i].record_id);
  return ids;
}

Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
  }
  return out;
}

transcoder::Ensemble load_store_ensemble(const PipelineConfig& c) {
  const auto dir = store_of(c).ensemble();
  require(dir / "ensemble.json", "transcoder ensemble", "train-transcoders");
  return transcoder::load_ensemble(dir);
}

registry::Registry open_registry(const PipelineConfig& c) {
  const auto dir = store_of(c).registry();
  if (!registry::Registry::exists(dir)) {
    throw PrerequisiteError("pattern registry missing at " + dir.string() +
                                "; run `sparsepat discover` first",
                            "discover");
  }
  return registry::Registry::open(dir);
}

std::unique_ptr<annotate::AnnotationClient> make_client(const AnnotateConfig& a) {
  if (a.client == "mock") return std::make_unique<annotate::MockClient>();
  if (a.http.model.empty()) throw ConfigError("annotate.model is required for the http client");
  return std::make_unique<annotate::ChatClient>(annotate::make_http_transport(a.http), a.http.model);
}

std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

}  // namespace

// Stages -------------------------------------------------------------------------

void run_ingest(const PipelineConfig& c) {
  if (c.ingest.input.empty()) throw ConfigError("ingest needs an input JSONL file (--input)");
  if (!fs::exists(c.ingest.input)) {
    throw ConfigError("input file not found: " + c.ingest.input.string());
  }
  auto manifest = embedstore::infer_manifest(c.ingest.input);
  auto ds = embedstore::ingest_records(c.ingest.input, manifest);
  std::vector<embedstore::EmbeddingRecord> records = ds.records();
  bool truncated = false;
  for (auto& r : records) {
    auto t = embedstore::truncate_excerpt(r.report_excerpt, c.ingest.max_excerpt_tokens);
    if (t != r.report_excerpt) {
      r.report_excerpt = std::move(t);
      truncated = true;
    }
  }
  if (truncated) ds = embedstore::Dataset(ds.manifest(), std::move(records));
  fs::create_directories(c.store);
  embedstore::save_dataset(store_of(c).dataset(), ds);
  log("ingest", std::to_string(ds.size()) + " records, digest " + ds.manifest().digest);
  write_stage(c, "ingest", {{"input", sha256_file(c.ingest.input)}},
              {{"dataset", ds.manifest().digest}});
}

void run_split(const PipelineConfig& c) {
  auto ds = load_store_dataset(c);
  ds.apply_splits(embedstore::assign_splits(ds, c.split, derive_seed(c.seed, 0x5e1)));
  embedstore::save_dataset(store_of(c).dataset(), ds);
  const auto& n = ds.manifest().counts;
  log("split", "train " + std::to_string(n.train) + ", val " + std::to_string(n.val) + ", test " +
                   std::to_string(n.test));
  write_stage(c, "split", {{"dataset", ds.manifest().digest}},
              {{"records", digest_of(store_of(c).dataset().records_bin())}},
              {{"train", n.train}, {"val", n.val}, {"test", n.test}});
}

void run_synth(const PipelineConfig& c) {
  if (!c.synth) throw ConfigError("synth needs a benchmark spec (--spec or config 'synth')");
  const auto bench = synthgen::generate_benchmark(*c.synth);
  fs::create_directories(c.store);
  embedstore::save_dataset(store_of(c).dataset(), bench.dataset);
  synthgen::save_benchmark(c.store, *c.synth, bench);
  log("synth", std::to_string(bench.dataset.size()) + " records, " +
                   std::to_string(c.synth->n_factors) + " planted factors");
  write_stage(c, "synth", {{"spec", json(*c.synth)}},
              {{"dataset", bench.dataset.manifest().digest},
               {"ground_truth", digest_of(synthgen::TruthPaths{c.store}.json())}});
}

void run_train_classifier(const PipelineConfig& c) {
  auto ds = load_store_dataset(c);
  train_indices(ds);
  auto cfg = c.classifier;
  cfg.seed = derive_seed(c.seed, 0xc1a5);
  const auto result = mlpcls::train_classifier(ds, cfg);
  const auto stem = store_of(c).classifier();
  json meta = {{"dataset", ds.manifest().digest},
               {"label_names", ds.manifest().label_names},
               {"history", mlpcls::history_to_json(result.history)}};
  mlpcls::save_model(stem, result.model, meta);
  log("train-classifier", "best epoch " + std::to_string(result.history.best_epoch) +
                              ", val loss " + std::to_string(result.history.best_val_loss));
  auto bin = stem;
  bin += ".bin";
  write_stage(c, "train-classifier", {{"dataset", ds.manifest().digest}},
              {{"classifier", digest_of(bin)}}, mlpcls::history_to_json(result.history));
}

void run_extract(const PipelineConfig& c) {
  auto ds = load_store_dataset(c);
  const auto model = mlpcls::load_model(store_of(c).classifier());
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto x = ds.image_inputs(all);
  TensorFile f;
  f.tensors["penultimate"] = mlpcls::extract_penultimate(model, x);
  f.tensors["logits"] = mlpcls::extract_logits(model, x);
  write_tensor_file(store_of(c).extracted(), f);
  log("extract", std::to_string(ds.size()) + " rows of dim " +
                     std::to_string(model.penultimate_dim()));
  auto bin = store_of(c).classifier();
  bin += ".bin";
  write_stage(c, "extract", {{"dataset", ds.manifest().digest}, {"classifier", digest_of(bin)}},
              {{"extracted", digest_of(store_of(c).extracted())}});
}

void run_train_transcoders(const PipelineConfig& c) {
  auto ds = load_store_dataset(c);
  const auto idx = train_indices(ds);
  const auto inputs = ds.joint_inputs(idx);
  Matrix all_targets;
  json input_digests = {{"dataset", ds.manifest().digest}};
  if (c.ensemble.target == "synthetic") {
    if (!synthgen::has_ground_truth(c.store)) {
      throw PrerequisiteError("synthetic targets need a synthetic store; run `sparsepat synth` first",
                              "synth");
    }
    all_targets = synthgen::load_synthetic_targets(c.store);
    input_digests["targets"] = digest_of(synthgen::TruthPaths{c.store}.targets());
  } else {
    require(store_of(c).extracted(), "classifier embeddings", "extract");
    all_targets = read_tensor_file(store_of(c).extracted()).at(c.ensemble.target);
    input_digests["targets"] = digest_of(store_of(c).extracted());
  }
  if (all_targets.rows() != ds.size()) {
    throw PrerequisiteError("target rows do not match the dataset; rerun `sparsepat " +
                                std::string(c.ensemble.target == "synthetic" ? "synth" : "extract") +
                                "`",
                            c.ensemble.target == "synthetic" ? "synth" : "extract");
  }
  const auto targets = select_rows(all_targets, idx);
  auto ensemble = transcoder::train_ensemble(inputs, targets, ids_of(ds, idx), c.ensemble.members,
                                             c.ensemble.transcoder, derive_seed(c.seed, 0x7c),
                                             c.ensemble.target);
  std::size_t ok = 0;
  for (const auto& m : ensemble.manifest.members) {
    if (m.ok) ++ok;
    else log("train-transcoders", "member " + std::to_string(m.id) + " failed: " + m.error);
  }
  if (ok == 0) throw NumericError("every transcoder member failed");
  transcoder::save_ensemble(store_of(c).ensemble(), ensemble);
  log("train-transcoders", std::to_string(ok) + "/" + std::to_string(ensemble.size()) +
                               " members trained");
  write_stage(c, "train-transcoders", input_digests,
              {{"ensemble", digest_of(store_of(c).ensemble() / "ensemble.json")}},
              transcoder::manifest_to_json(ensemble.manifest));
}

void run_discover(const PipelineConfig& c) {
  const auto& d = c.discover;
  auto ds = load_store_dataset(c);
  train_indices(ds);
  const auto ensemble = load_store_ensemble(c);
  const auto probe_idx = patterns::select_probe(ds, d.probe_size, derive_seed(c.seed, 0xd15c));
  const auto probe = patterns::ProbeActivations(ensemble, ds.joint_inputs(probe_idx),
                                                ids_of(ds, probe_idx));
  const auto stats = patterns::compute_activation_stats(probe);
  const patterns::ExcerptLookup excerpt = [&ds](const std::string& id) {
    return ds.at(id).report_excerpt;
  };

  std::vector<patterns::ActivationGallery> galleries(stats.size());
  std::vector<double> consistency(stats.size(), 0.0);
  std::vector<char> freq_pass(stats.size(), 0), cons_pass(stats.size(), 0);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t i = 0; i < stats.size(); ++i) {
    if (!patterns::filter_frequency(stats[i].frequency, d.freq_lo, d.freq_hi)) continue;
    freq_pass[i] = 1;
    galleries[i] = patterns::build_gallery(stats[i], probe, d.top_n, excerpt);
    std::vector<std::vector<double>> text;
    for (const auto& e : galleries[i].exemplars) text.push_back(to_double(ds.at(e.record_id).text_embedding));
    const auto cs = patterns::consistency_score(text, d.consistency);
    consistency[i] = cs.score;
    cons_pass[i] = cs.pass ? 1 : 0;
  }

  std::vector<patterns::Candidate> candidates;
  std::map<patterns::NeuronRef, std::size_t> where;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    if (!freq_pass[i] || !cons_pass[i]) continue;
    const auto& n = stats[i].neuron;
    const auto& row = ensemble.members[n.member]->decoder.row(n.neuron);
    candidates.push_back({n, std::vector<double>(row.begin(), row.end()), stats[i].max_activation});
    where[n] = i;
  }
  const auto clusters = patterns::cluster_duplicates(candidates, d.cluster_cos);

  std::vector<registry::PatternRecord> records;
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    const auto& cl = clusters[k];
    // Representative: the member whose atom is closest to the centroid.
    std::size_t rep = 0;
    double best = -2.0;
    for (std::size_t m = 0; m < cl.members.size(); ++m) {
      const auto& n = cl.members[m];
      const double cs = cosine(ensemble.members[n.member]->decoder.row(n.neuron), cl.centroid);
      if (cs > best) {
        best = cs;
        rep = m;
      }
    }
    const auto i = where.at(cl.members[rep]);
    registry::PatternRecord p;
    p.pattern_id = registry::make_pattern_id(k + 1);
    p.members = cl.members;
    p.centroid = cl.centroid;
    p.gallery = galleries[i];
    p.holdout = patterns::ranked_exemplars(cl.members[rep], probe, d.top_n, d.holdout, excerpt);
    p.consistency = consistency[i];
    records.push_back(std::move(p));
  }
  const auto n_freq = static_cast<std::size_t>(std::count(freq_pass.begin(), freq_pass.end(), 1));
  auto reg = registry::Registry::create(store_of(c).registry(), std::move(records));
  log("discover", std::to_string(stats.size()) + " neurons, " + std::to_string(n_freq) +
                      " pass frequency, " + std::to_string(candidates.size()) +
                      " pass consistency, " + std::to_string(reg.size()) + " patterns");
  write_stage(c, "discover",
              {{"dataset", ds.manifest().digest},
               {"ensemble", digest_of(store_of(c).ensemble() / "ensemble.json")}},
              {{"registry", digest_of(store_of(c).registry() / "index.json")}},
              {{"neurons", stats.size()},
               {"frequency_pass", n_freq},
               {"consistency_pass", candidates.size()},
               {"patterns", reg.size()},
               {"probe_size", probe.probe_size()}});
}

void run_annotate(const PipelineConfig& c) {
  auto reg = open_registry(c);
  auto client = make_client(c.annotate);
  std::size_t annotated = 0, verified = 0, failed = 0, flagged = 0;
  for (const auto& p : reg.list()) {
    if (p.status != registry::Status::pending) continue;
    if (p.annotation && p.annotation->agreement && p.last_error.empty()) continue;
    if (!p.annotation || !p.last_error.empty()) {
      if (!annotate::annotate_pattern(*client, reg, p.pattern_id)) {
        ++failed;
        continue;
      }
      ++annotated;
    }
    if (annotate::verify_pattern(*client, reg, p.pattern_id)) {
      ++verified;
      if (reg.get(p.pattern_id).needs_review) ++flagged;
    } else {
      ++failed;
    }
  }
  log("annotate", std::to_string(annotated) + " annotated, " + std::to_string(verified) +
                      " verified, " + std::to_string(flagged) + " flagged for review, " +
                      std::to_string(failed) + " failed");
  write_stage(c, "annotate", {{"client", c.annotate.client}},
              {{"registry", digest_of(store_of(c).registry() / "index.json")}},
              {{"annotated", annotated}, {"verified", verified}, {"flagged", flagged},
               {"failed", failed}});
}

void run_curate(const PipelineConfig& c) {
  auto reg = open_registry(c);
  std::size_t accepted = 0;
  for (const auto& p : reg.list()) {
    if (p.status != registry::Status::pending || !p.annotation || !p.annotation->agreement) continue;
    if (*p.annotation->agreement < registry::kMinAgreement) continue;
    reg.record_verdict(p.pattern_id, registry::Verdict::accept, c.curate.reviewer, c.curate.note);
    ++accepted;
  }
  log("curate", std::to_string(accepted) + " patterns accepted");
  write_stage(c, "curate", json::object(),
              {{"audit", digest_of(store_of(c).registry() / "audit.jsonl")}},
              {{"accepted", accepted}});
}

void run_verdict(const PipelineConfig& c, const std::string& id, const std::string& verdict,
                 const std::string& reviewer, const std::string& note) {
  auto reg = open_registry(c);
  const auto p = reg.record_verdict(id, registry::verdict_from_string(verdict), reviewer, note);
  log("verdict", id + " -> " + registry::to_string(p.status));
}

json run_curate_export(const PipelineConfig& c) {
  auto reg = open_registry(c);
  json out = {{"patterns", json::array()}};
  for (const auto& p : reg.accepted()) out["patterns"].push_back(registry::to_json(p));
  out["count"] = out["patterns"].size();
  binio::write_atomic(c.store / "curated.json", out.dump(2) + "\n");
  write_stage(c, "curate-export", {{"registry", digest_of(store_of(c).registry() / "index.json")}},
              {{"curated", digest_of(c.store / "curated.json")}});
  return out;
}

void run_thresholds(const PipelineConfig& c) {
  auto reg = open_registry(c);
  const auto set = featenc::accepted_patterns(reg);
  auto ds = load_store_dataset(c);
  const auto idx = train_indices(ds);
  const auto ensemble = load_store_ensemble(c);
  const auto acts = featenc::pattern_activations(ensemble, set, ds.joint_inputs(idx));
  const auto tau = featenc::compute_pattern_thresholds(acts, set.size(), c.thresholds);
  binio::write_atomic(store_of(c).thresholds(),
                      featenc::thresholds_to_json(set, tau, c.thresholds).dump(2) + "\n");
  for (std::size_t p = 0; p < set.size(); ++p) {
    auto rec = reg.get(set.pattern_ids[p]);
    rec.threshold = tau[p];
    reg.update(rec);
  }
  log("thresholds", std::to_string(set.size()) + " accepted patterns");
  write_stage(c, "thresholds",
              {{"registry", digest_of(store_of(c).registry() / "index.json")},
               {"dataset", ds.manifest().digest}},
              {{"thresholds", digest_of(store_of(c).thresholds())}});
}

void run_encode(const PipelineConfig& c) {
  auto reg = open_registry(c);
  const auto set = featenc::accepted_patterns(reg);
  require(store_of(c).thresholds(), "pattern thresholds", "thresholds");
  const auto tau = featenc::thresholds_from_json(
      json::parse(binio::read_all(store_of(c).thresholds())), set);
  auto ds = load_store_dataset(c);
  const auto ensemble = load_store_ensemble(c);
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto fm = featenc::encode(ensemble, set, tau, ds.joint_inputs(all), ids_of(ds, all),
                                  c.k_active);
  featenc::save_features(store_of(c).features(), fm);
  std::size_t max_active = 0;
  for (const auto& r : fm.rows) max_active = std::max(max_active, r.nnz());
  log("encode", std::to_string(fm.rows.size()) + " records, at most " +
                    std::to_string(max_active) + " active patterns");
  write_stage(c, "encode", {{"thresholds", digest_of(store_of(c).thresholds())}},
              {{"features", digest_of(store_of(c).features().bin)}},
              {{"max_active", max_active}});
}

namespace {

std::vector<std::vector<int>> split_labels(const embedstore::Dataset& ds,
                                           const std::vector<std::size_t>& idx) {
  const auto L = ds.manifest().num_labels;
  std::vector<std::vector<int>> y(L, std::vector<int>(idx.size(), -1));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& labels = ds.records()[idx[r]].labels;
    for (std::size_t t = 0; t < L; ++t) y[t][r] = static_cast<int>(labels[t]);
  }
  return y;
}

featenc::FeatureMatrix feature_rows(const featenc::FeatureMatrix& fm,
                                    const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> at;
  for (std::size_t i = 0; i < fm.rows.size(); ++i) at[fm.rows[i].record_id] = i;
  featenc::FeatureMatrix out;
  out.pattern_ids = fm.pattern_ids;
  out.k_active = fm.k_active;
  for (const auto& id : ids) {
    auto it = at.find(id);
    if (it == at.end()) {
      throw PrerequisiteError("record " + id + " has no features; run `sparsepat encode` first",
                              "encode");
    }
    out.rows.push_back(fm.rows[it->second]);
  }
  return out;
}

featenc::FeatureMatrix load_store_features(const PipelineConfig& c) {
  const auto paths = store_of(c).features();
  require(paths.bin, "feature matrix", "encode");
  require(paths.header, "feature header", "encode");
  return featenc::load_features(paths);
}

}  // namespace

void run_train_head(const PipelineConfig& c) {
  auto ds = load_store_dataset(c);
  const auto idx = train_indices(ds);
  const auto fm = load_store_features(c);
  const auto train = feature_rows(fm, ids_of(ds, idx));
  auto cfg = c.head;
  cfg.seed = derive_seed(c.seed, 0x4ead);
  auto head = interphead::train_head(train, split_labels(ds, idx), ds.manifest().label_names, cfg);
  if (registry::Registry::exists(store_of(c).registry())) {
    auto reg = open_registry(c);
    for (const auto& id : head.pattern_ids) {
      auto p = reg.find(id);
      head.descriptions.push_back(p && p->annotation ? p->annotation->description : "");
    }
  }
  interphead::save_head(store_of(c).head(), head);
  json nz = json::object();
  for (const auto& t : head.targets) {
    if (t.trained) nz[t.name] = t.nonzero();
  }
  log("train-head", "nonzero weights " + nz.dump());
  write_stage(c, "train-head", {{"features", digest_of(store_of(c).features().bin)}},
              {{"head", digest_of(store_of(c).head())}}, {{"nonzero", nz}});
}

json run_explain(const PipelineConfig& c, const std::string& record_id, const std::string& target) {
  require(store_of(c).head(), "head model", "train-head");
  const auto head = interphead::load_head(store_of(c).head());
  const auto fm = load_store_features(c);
  const auto* fv = fm.find(record_id);
  if (!fv) {
    throw PrerequisiteError("record " + record_id + " has no features; run `sparsepat encode` first",
                            "encode");
  }
  return interphead::to_json(interphead::attribute(head, *fv, target));
}

// End to end -----------------------------------------------------------------------

namespace {

Matrix unit_rows(const std::vector<std::vector<double>>& rows, std::size_t dim) {
  Matrix m(rows.size(), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    normalize(m.row(r));
  }
  return m;
}

double round6(double x) { return std::round(x * 1e6) / 1e6; }

}  // namespace

json run_e2e(const PipelineConfig& c) {
  if (!c.synth) throw ConfigError("e2e needs a synthetic benchmark spec (--spec or config 'synth')");
  fs::create_directories(c.store);
  echo_config(c);
  run_synth(c);
  run_split(c);
  run_train_classifier(c);
  run_extract(c);
  run_train_transcoders(c);
  run_discover(c);
  run_annotate(c);
  run_curate(c);
  run_curate_export(c);
  run_thresholds(c);
  run_encode(c);
  run_train_head(c);
  return run_evaluate(c);
}

json run_evaluate(const PipelineConfig& c) {
  if (!synthgen::has_ground_truth(c.store)) {
    throw PrerequisiteError("evaluation needs a synthetic store; run `sparsepat synth` first",
                            "synth");
  }
  require(store_of(c).head(), "head model", "train-head");
  const auto truth = synthgen::load_ground_truth(c.store);
  const auto ensemble = load_store_ensemble(c);
  auto ds = load_store_dataset(c);
  auto reg = open_registry(c);
  const auto head = interphead::load_head(store_of(c).head());
  const auto fm = load_store_features(c);
  const auto dim = truth.mixing.cols();
  if (truth.supports.size() != ds.records().size()) {
    throw ConfigError("ground truth does not match the dataset; re-run `sparsepat synth`");
  }

  // Pooled decoder atoms of every healthy member.
  std::vector<std::vector<double>> atoms;
  for (const auto& m : ensemble.members) {
    if (!m) continue;
    for (std::size_t j = 0; j < m->latent_dim(); ++j) {
      const auto row = m->decoder.row(j);
      if (l2_norm(row) > 0.0) atoms.emplace_back(row.begin(), row.end());
    }
  }
  const auto pooled = synthgen::match_atoms(unit_rows(atoms, dim), truth.mixing, 0.8);

  // Accepted patterns against planted factors.
  const auto accepted = reg.accepted();
  std::vector<std::vector<double>> centroids;
  for (const auto& p : accepted) centroids.push_back(p.centroid);
  const auto acc_match = synthgen::match_atoms(unit_rows(centroids, dim), truth.mixing, 0.8);
  std::map<std::string, long> factor_of;  // pattern id -> nearest factor at cos >= 0.8, else -1
  for (std::size_t p = 0; p < accepted.size(); ++p) {
    long best = -1;
    double best_cos = 0.8;
    for (std::size_t f = 0; f < truth.mixing.rows(); ++f) {
      const double cs = cosine(accepted[p].centroid, truth.mixing.row(f));
      if (cs >= best_cos) {
        best_cos = cs;
        best = static_cast<long>(f);
      }
    }
    factor_of[accepted[p].pattern_id] = best;
  }

  // Detector identity (diagnostic): the factor whose support best matches
  // where the pattern survives encoding on train records, F1 >= 0.8, else -1.
  const auto train_idx = ds.indices(embedstore::Split::train);
  const auto train = feature_rows(fm, ids_of(ds, train_idx));
  const auto n_f = truth.mixing.rows();
  const auto n_p = fm.pattern_ids.size();
  std::vector<std::size_t> fires(n_p, 0), support(n_f, 0);
  std::vector<std::vector<std::size_t>> both(n_p, std::vector<std::size_t>(n_f, 0));
  for (std::size_t r = 0; r < train_idx.size(); ++r) {
    const auto& sup = truth.supports.at(train_idx[r]);
    for (auto f : sup) ++support[f];
    for (auto col : train.rows[r].index) {
      ++fires[col];
      for (auto f : sup) ++both[col][f];
    }
  }
  std::map<std::string, long> detects;
  for (std::size_t p = 0; p < n_p; ++p) {
    long best = -1;
    double best_f1 = 0.8;
    for (std::size_t f = 0; f < n_f; ++f) {
      const auto denom = fires[p] + support[f];
      if (denom == 0) continue;
      const double f1 = 2.0 * static_cast<double>(both[p][f]) / static_cast<double>(denom);
      if (f1 >= best_f1) {
        best_f1 = f1;
        best = static_cast<long>(f);
      }
    }
    detects[fm.pattern_ids[p]] = best;
  }
  const auto in_rule = [](const std::vector<std::size_t>& rule, long f) {
    return f >= 0 && std::find(rule.begin(), rule.end(), static_cast<std::size_t>(f)) != rule.end();
  };

  const auto test_idx = ds.indices(embedstore::Split::test);
  const auto test = feature_rows(fm, ids_of(ds, test_idx));
  json targets = json::array();
  for (std::size_t t = 0; t < head.targets.size(); ++t) {
    const auto& th = head.targets[t];
    json e = {{"name", th.name}, {"trained", th.trained}};
    if (!th.trained) {
      targets.push_back(std::move(e));
      continue;
    }
    const auto& rule = truth.label_rules.at(t);
    std::size_t n = 0, correct = 0, positives = 0, rule_top = 0, detector_top = 0, exact = 0;
    for (std::size_t r = 0; r < test_idx.size(); ++r) {
      const auto y = ds.records()[test_idx[r]].labels[t];
      const auto rep = interphead::attribute(head, test.rows[r], th.name);
      double z = rep.bias;
      for (const auto& ct : rep.contributions) z += ct.contribution;
      if (z - rep.logit == 0.0) ++exact;
      const bool pred = rep.probability >= 0.5;
      if (y != embedstore::Label::unknown) {
        ++n;
        if (pred == (y == embedstore::Label::positive)) ++correct;
      }
      if (!pred) continue;
      ++positives;
      if (rep.contributions.empty()) continue;
      const auto& top = rep.contributions.front().pattern_id;
      if (in_rule(rule, factor_of.at(top))) ++rule_top;
      if (in_rule(rule, detects.at(top))) ++detector_top;
    }
    e["test_accuracy"] = round6(n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0);
    e["positive_predictions"] = positives;
    e["top_attribution_rule_rate"] =
        round6(positives ? static_cast<double>(rule_top) / static_cast<double>(positives) : 0.0);
    e["top_attribution_detector_rate"] =
        round6(positives ? static_cast<double>(detector_top) / static_cast<double>(positives) : 0.0);
    e["nonzero_weights"] = th.nonzero();
    e["attribution_exact"] = exact == test_idx.size();
    e["converged"] = th.converged;
    targets.push_back(std::move(e));
  }

  std::size_t max_active = 0, total_active = 0;
  for (const auto& r : fm.rows) {
    max_active = std::max(max_active, r.nnz());
    total_active += r.nnz();
  }
  json members = json::array();
  for (const auto& m : ensemble.manifest.members) {
    members.push_back({{"id", m.id}, {"ok", m.ok}, {"final_loss", round6(m.final_loss)}});
  }
  const auto disc = json::parse(binio::read_all(store_of(c).stage_manifest("discover")));
  json summary = {
      {"version", SPARSEPAT_VERSION},
      {"seed", c.seed},
      {"dataset_digest", ds.manifest().digest},
      {"n_factors", truth.mixing.rows()},
      {"transcoder_target", ensemble.manifest.target_kind},
      {"ensemble", members},
      {"recovery_rate", round6(pooled.recovery_rate)},
      {"matched_atoms", pooled.pairs.size()},
      {"patterns",
       {{"neurons", disc["details"]["neurons"]},
        {"frequency_pass", disc["details"]["frequency_pass"]},
        {"consistency_pass", disc["details"]["consistency_pass"]},
        {"discovered", reg.size()},
        {"accepted", accepted.size()},
        {"accepted_recovery", round6(acc_match.recovery_rate)}}},
      {"features",
       {{"max_active", max_active},
        {"mean_active",
         round6(fm.rows.empty() ? 0.0
                                : static_cast<double>(total_active) /
                                      static_cast<double>(fm.rows.size()))},
        {"k_active", c.k_active}}},
      {"head", {{"alpha", head.alpha}}},
      {"targets", targets},
  };
  binio::write_atomic(store_of(c).summary(), dump_summary(summary));
  write_stage(c, "evaluate", {{"dataset", ds.manifest().digest}},
              {{"summary", digest_of(store_of(c).summary())}});
  return summary;
}

}  // namespace sparsepat::pipeline
