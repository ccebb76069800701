// sparsepat command line: one subcommand per pipeline stage.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>

#include "sparsepat/core/error.hpp"
#include "sparsepat/core/tensor_io.hpp"
#include "sparsepat/pipeline.hpp"
#include "sparsepat/service.hpp"

namespace sp = sparsepat;
namespace pl = sparsepat::pipeline;

namespace {

sp::service::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

struct Common {
  std::string config;
  std::string store;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "pipeline config JSON");
  sub->add_option("--store", c.store, "store directory");
  sub->add_option("--seed", c.seed, "global seed");
}

pl::PipelineConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? pl::PipelineConfig{} : pl::load_config(c.config);
  if (!c.store.empty()) cfg.store = c.store;
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

sp::synthgen::SyntheticSpec load_spec(const std::string& path) {
  try {
    return nlohmann::json::parse(sp::binio::read_all(path)).get<sp::synthgen::SyntheticSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw sp::ConfigError("bad synth spec " + path + ": " + e.what());
  } catch (const sp::PrerequisiteError&) {
    throw sp::ConfigError("synth spec not found: " + path);
  }
}

template <class T>
void set_if(const std::optional<T>& v, T& dst) {
  if (v) dst = *v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparsepat: sparse interpretable patterns for multilabel embedding classifiers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", SPARSEPAT_VERSION);

  Common common;
  std::string input, spec, pattern, verdict, reviewer, note, record, target, out, client,
      assets, host, basis;
  std::optional<double> lr, alpha, train_r, val_r, test_r, consistency, percentile;
  std::optional<std::size_t> epochs, members, latent, topk, probe, k_active, top_n;
  std::optional<int> port;
  std::string tc_target, token_env;

  auto* ingest = app.add_subcommand("ingest", "validate and store embedding records (JSONL)");
  add_common(ingest, common);
  ingest->add_option("--input", input, "records JSONL")->required();

  auto* split = app.add_subcommand("split", "patient-level train/val/test split");
  add_common(split, common);
  split->add_option("--train", train_r);
  split->add_option("--val", val_r);
  split->add_option("--test", test_r);

  auto* synth = app.add_subcommand("synth", "generate a planted-factor benchmark");
  add_common(synth, common);
  synth->add_option("--spec", spec, "benchmark spec JSON");
  synth->add_option("--out", common.store, "store directory");

  auto* tcls = app.add_subcommand("train-classifier", "train the multilabel MLP");
  add_common(tcls, common);
  tcls->add_option("--epochs", epochs);
  tcls->add_option("--lr", lr);

  auto* extract = app.add_subcommand("extract", "penultimate embeddings and logits");
  add_common(extract, common);

  auto* ttc = app.add_subcommand("train-transcoders", "train the transcoder ensemble");
  add_common(ttc, common);
  ttc->add_option("--members", members);
  ttc->add_option("--latent", latent);
  ttc->add_option("--topk", topk);
  ttc->add_option("--epochs", epochs);
  ttc->add_option("--lr", lr);
  ttc->add_option("--target", tc_target, "penultimate | logits | synthetic");

  auto* discover = app.add_subcommand("discover", "galleries, filters, duplicate clustering");
  add_common(discover, common);
  discover->add_option("--probe", probe);
  discover->add_option("--top-n", top_n);
  discover->add_option("--consistency", consistency);

  auto* annotate = app.add_subcommand("annotate", "annotate and verify pending patterns");
  add_common(annotate, common);
  annotate->add_option("--client", client, "mock | http");

  auto* curate = app.add_subcommand("curate", "accept patterns with verified agreement");
  add_common(curate, common);

  auto* verdict_cmd = app.add_subcommand("verdict", "record a curation verdict");
  add_common(verdict_cmd, common);
  verdict_cmd->add_option("--pattern", pattern)->required();
  verdict_cmd->add_option("--verdict", verdict, "accept | reject")->required();
  verdict_cmd->add_option("--reviewer", reviewer)->required();
  verdict_cmd->add_option("--note", note);

  auto* export_cmd = app.add_subcommand("curate-export", "write accepted patterns");
  add_common(export_cmd, common);

  auto* thresholds = app.add_subcommand("thresholds", "per-pattern activation thresholds");
  add_common(thresholds, common);
  thresholds->add_option("--percentile", percentile);
  thresholds->add_option("--basis", basis, "positive | all");

  auto* encode = app.add_subcommand("encode", "sparse feature vectors for every record");
  add_common(encode, common);
  encode->add_option("--k-active", k_active);

  auto* thead = app.add_subcommand("train-head", "L1 logistic head per target");
  add_common(thead, common);
  thead->add_option("--alpha", alpha);

  auto* explain = app.add_subcommand("explain", "attribution report for one record");
  add_common(explain, common);
  explain->add_option("--record", record)->required();
  explain->add_option("--target", target, "target name or index")->required();

  auto* serve = app.add_subcommand("serve", "HTTP API over a store");
  add_common(serve, common);
  serve->add_option("--port", port);
  serve->add_option("--host", host);
  serve->add_option("--assets", assets, "thumbnail directory");
  serve->add_option("--token-env", token_env, "env var holding the verdict token");

  auto* evaluate = app.add_subcommand("evaluate", "score a synthetic store against its ground truth");
  add_common(evaluate, common);

  auto* e2e = app.add_subcommand("e2e", "every stage on a synthetic benchmark");
  add_common(e2e, common);
  e2e->add_option("--spec", spec, "benchmark spec JSON");
  e2e->add_option("--out", out, "copy of the summary JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    auto cfg = resolve(common);
    if (!input.empty()) cfg.ingest.input = input;
    if (!spec.empty()) cfg.synth = load_spec(spec);
    set_if(train_r, cfg.split.train);
    set_if(val_r, cfg.split.val);
    set_if(test_r, cfg.split.test);
    if (tcls->parsed()) {
      set_if(epochs, cfg.classifier.epochs);
      set_if(lr, cfg.classifier.lr_max);
    }
    if (ttc->parsed()) {
      set_if(members, cfg.ensemble.members);
      set_if(latent, cfg.ensemble.transcoder.latent);
      set_if(topk, cfg.ensemble.transcoder.k);
      set_if(epochs, cfg.ensemble.transcoder.epochs);
      set_if(lr, cfg.ensemble.transcoder.lr);
      if (!tc_target.empty()) cfg.ensemble.target = tc_target;
    }
    set_if(probe, cfg.discover.probe_size);
    set_if(top_n, cfg.discover.top_n);
    set_if(consistency, cfg.discover.consistency);
    if (!client.empty()) cfg.annotate.client = client;
    set_if(percentile, cfg.thresholds.percentile);
    if (!basis.empty()) cfg.thresholds.basis = sp::featenc::threshold_basis_from_string(basis);
    set_if(k_active, cfg.k_active);
    set_if(alpha, cfg.head.alpha);
    set_if(port, cfg.serve.port);
    if (!host.empty()) cfg.serve.host = host;
    if (!assets.empty()) cfg.serve.assets = assets;
    if (!token_env.empty()) cfg.serve.token_env = token_env;
    // Round trip through JSON so flag values get the same validation as file values.
    cfg = pl::config_from_json(pl::to_json(cfg));

    if (!serve->parsed() && !explain->parsed() && !export_cmd->parsed() && !evaluate->parsed()) pl::echo_config(cfg);

    if (ingest->parsed()) pl::run_ingest(cfg);
    else if (split->parsed()) pl::run_split(cfg);
    else if (synth->parsed()) pl::run_synth(cfg);
    else if (tcls->parsed()) pl::run_train_classifier(cfg);
    else if (extract->parsed()) pl::run_extract(cfg);
    else if (ttc->parsed()) pl::run_train_transcoders(cfg);
    else if (discover->parsed()) pl::run_discover(cfg);
    else if (annotate->parsed()) pl::run_annotate(cfg);
    else if (curate->parsed()) pl::run_curate(cfg);
    else if (verdict_cmd->parsed()) pl::run_verdict(cfg, pattern, verdict, reviewer, note);
    else if (export_cmd->parsed()) std::cout << pl::run_curate_export(cfg).dump(2) << "\n";
    else if (thresholds->parsed()) pl::run_thresholds(cfg);
    else if (encode->parsed()) pl::run_encode(cfg);
    else if (thead->parsed()) pl::run_train_head(cfg);
    else if (explain->parsed()) std::cout << pl::run_explain(cfg, record, target).dump() << "\n";
    else if (serve->parsed()) {
      sp::service::ServiceConfig sc{cfg.store, cfg.serve.assets, {}};
      if (!cfg.serve.token_env.empty()) {
        const char* tok = std::getenv(cfg.serve.token_env.c_str());
        if (!tok || !*tok) throw sp::ConfigError("token variable " + cfg.serve.token_env + " is empty");
        sc.token = tok;
      }
      sp::service::Service svc(sc);
      const int bound = svc.bind(cfg.serve.host, cfg.serve.port);
      g_service = &svc;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::fprintf(stderr, "[serve] listening on http://%s:%d\n", cfg.serve.host.c_str(), bound);
      svc.listen();
      g_service = nullptr;
    } else if (evaluate->parsed()) {
      std::cout << pl::dump_summary(pl::run_evaluate(cfg));
    } else if (e2e->parsed()) {
      const auto summary = pl::run_e2e(cfg);
      const auto text = pl::dump_summary(summary);
      if (!out.empty()) sp::binio::write_atomic(out, text);
      std::cout << text;
    }
  } catch (const sp::PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const sp::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
