// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <httplib.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "schema.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/core/tensor_io.hpp"
#include "sparsepat/embedstore.hpp"
#include "sparsepat/interphead.hpp"
#include "sparsepat/kernels/kernels.hpp"
#include "sparsepat/mlpcls.hpp"
#include "sparsepat/pipeline.hpp"
#include "sparsepat/registry.hpp"
#include "sparsepat/service.hpp"
#include "sparsepat/synthgen.hpp"

namespace sp = sparsepat;
namespace fs = std::filesystem;
using nlohmann::json;
using testsupport::rel_err;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

void check_top_k() {
  sp::Rng rng(2024);
  std::size_t mismatches = 0;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::uint32_t> got;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = 4 + rng.below(2045);
    const std::size_t k = 1 + rng.below(n);
    std::vector<double> v(n);
    const bool ties = i % 3 == 0;
    for (auto& x : v) x = ties ? std::floor(rng.uniform(-4.0, 4.0)) : rng.normal();
    sp::kernels::top_k_indices(v, k, got);

    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] > v[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    if (order != got) ++mismatches;
  }
  const double secs = seconds_since(t0);
  report(mismatches == 0 && secs < 10.0, "topk_oracle",
         std::to_string(mismatches) + " mismatches of 10000, " + fmt("%.2f s", secs));
}

// ---------------------------------------------------------------------------

double classifier_worst_grad_error(int& instances) {
  using namespace sp::mlpcls;
  double worst = 0.0;
  instances = 0;
  for (std::uint64_t seed = 1; instances < 20; ++seed) {
    const std::size_t d = 3 + seed % 4, h1 = 4 + seed % 3, h2 = 3 + seed % 2, L = 2 + seed % 2;
    auto m = ClassifierModel::init(d, h1, h2, L, 0.03, 0.3, 500 + seed);
    sp::Rng rng(seed);
    for (auto* b : {&m.hidden1.bias, &m.hidden2.bias, &m.output.bias}) {
      for (auto& x : *b) x = 0.1 * rng.normal();
    }
    sp::Matrix x(6, d), y(6, L), mask(6, L, 1.0);
    for (auto& v : x.data()) v = rng.normal();
    for (auto& v : y.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;

    // skip instances with a pre-activation within 1e-3 of the JumpReLU step
    bool near_kink = false;
    for (std::size_t i = 0; i < x.rows() && !near_kink; ++i) {
      const auto p1 = testsupport::affine_ref(x.row(i), m.hidden1.weight.data(),
                                              m.hidden1.weight.cols(), m.hidden1.bias);
      std::vector<double> a1(p1.size());
      for (std::size_t j = 0; j < p1.size(); ++j) {
        near_kink |= std::abs(p1[j] - m.theta) < 1e-3;
        a1[j] = p1[j] > m.theta ? p1[j] : 0.0;
      }
      const auto p2 = testsupport::affine_ref(a1, m.hidden2.weight.data(),
                                              m.hidden2.weight.cols(), m.hidden2.bias);
      for (double v : p2) near_kink |= std::abs(v - m.theta) < 1e-3;
    }
    if (near_kink) continue;
    ++instances;

    const auto loss_at = [&] {
      Gradients unused;
      return loss_and_gradients(m, x, y, mask, Mode::eval, nullptr, unused);
    };
    Gradients g;
    loss_and_gradients(m, x, y, mask, Mode::eval, nullptr, g);
    const auto check = [&](std::vector<double>& params, const std::vector<double>& grad) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        worst = std::max(worst, rel_err(grad[i], testsupport::central_diff(loss_at, params[i], 1e-6)));
      }
    };
    check(m.hidden1.weight.data(), g.w1.data());
    check(m.hidden2.weight.data(), g.w2.data());
    check(m.output.weight.data(), g.w3.data());
    check(m.hidden1.bias, g.b1);
    check(m.hidden2.bias, g.b2);
    check(m.output.bias, g.b3);
  }
  return worst;
}

double head_worst_grad_error(int& instances) {
  using namespace sp::interphead;
  double worst = 0.0;
  instances = 0;
  for (std::uint64_t seed = 1; instances < 20; ++seed) {
    sp::Rng rng(seed);
    const std::size_t P = 6 + seed % 10, n = 30;
    std::vector<sp::featenc::FeatureVector> rows(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::uint32_t j = 0; j < P; ++j) {
        if (rng.uniform() < 0.4) {
          rows[i].index.push_back(j);
          rows[i].value.push_back(rng.uniform(0.05, 1.0));
        }
      }
      labels[i] = i % 3 == 0 ? 1 : 0;
    }
    Problem pb;
    for (const auto& r : rows) pb.rows.push_back(&r);
    pb.labels = labels;
    pb.n_features = P;
    pb.weights = class_weights(labels, "t");
    std::vector<double> w(P);
    for (auto& x : w) x = rng.normal();
    double b = 0.5 * rng.normal();
    std::vector<double> gw;
    double gb = 0.0;
    smooth_loss(pb, w, b, &gw, &gb);
    const auto f = [&] { return smooth_loss(pb, w, b); };
    for (std::size_t j = 0; j < P; ++j) {
      worst = std::max(worst, rel_err(gw[j], testsupport::central_diff(f, w[j], 1e-6)));
    }
    worst = std::max(worst, rel_err(gb, testsupport::central_diff(f, b, 1e-6)));
    ++instances;
  }
  return worst;
}

void check_gradients() {
  int nc = 0, nh = 0;
  const double ec = classifier_worst_grad_error(nc);
  report(ec <= 1e-4 && nc >= 20, "gradcheck_classifier",
         std::to_string(nc) + " instances, worst rel err " + fmt("%.2e", ec));
  const double eh = head_worst_grad_error(nh);
  report(eh <= 1e-5 && nh >= 20, "gradcheck_head",
         std::to_string(nh) + " instances, worst rel err " + fmt("%.2e", eh));
}

// ---------------------------------------------------------------------------

void check_splits() {
  sp::synthgen::SyntheticSpec spec;
  spec.n_factors = 8;
  spec.d_img = 4;
  spec.d_txt = 4;
  spec.target_dim = 4;
  spec.k_true = 2;
  spec.n_samples = 5000;
  spec.n_patients = 1000;
  spec.label_rules = {{0}};
  spec.seed = 3;
  const auto ds = sp::synthgen::generate_benchmark(spec).dataset;
  double worst_dev = 0.0;
  std::size_t leaks = 0;
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const auto s = sp::embedstore::assign_splits(ds, {0.8, 0.1, 0.1}, seed);
    std::map<sp::embedstore::Split, double> frac;
    std::map<std::string, std::set<sp::embedstore::Split>> per_patient;
    for (std::size_t i = 0; i < s.size(); ++i) {
      frac[s[i]] += 1.0 / static_cast<double>(s.size());
      per_patient[ds.records()[i].patient_id].insert(s[i]);
    }
    worst_dev = std::max({worst_dev, std::abs(frac[sp::embedstore::Split::train] - 0.8),
                          std::abs(frac[sp::embedstore::Split::val] - 0.1),
                          std::abs(frac[sp::embedstore::Split::test] - 0.1)});
    for (const auto& [_, set] : per_patient) leaks += set.size() != 1;
  }
  report(leaks == 0 && worst_dev <= 0.03, "split_integrity",
         std::to_string(leaks) + " patients in >1 split, worst fraction deviation " +
             fmt("%.4f", worst_dev));
}

// ---------------------------------------------------------------------------

sp::pipeline::PipelineConfig e2e_config(const fs::path& store) {
  const fs::path dir = SPARSEPAT_CONFIG_DIR;
  auto cfg = sp::pipeline::load_config(dir / "e2e_desk.json");
  cfg.synth = json::parse(sp::binio::read_all(dir / "synth_small.json"))
                  .get<sp::synthgen::SyntheticSpec>();
  cfg.store = store;
  return cfg;
}

void check_e2e_metrics(const json& s, double secs) {
  const double rec = s.at("recovery_rate").get<double>();
  report(rec >= 0.80 && secs <= 600.0, "dictionary_recovery",
         "recovery " + fmt("%.4f", rec) + " (" + std::to_string(s.at("matched_atoms").get<int>()) +
             "/" + std::to_string(s.at("n_factors").get<int>()) + "), e2e " + fmt("%.0f s", secs));

  for (const auto& t : s.at("targets")) {
    const auto name = t.at("name").get<std::string>();
    if (!t.at("trained").get<bool>()) {
      report(false, "e2e_" + name, "target not trained");
      continue;
    }
    const double acc = t.at("test_accuracy").get<double>();
    const double rule = t.at("top_attribution_rule_rate").get<double>();
    report(acc >= 0.90 && rule >= 0.90, "e2e_" + name,
           "test accuracy " + fmt("%.3f", acc) + ", top attribution in rule " + fmt("%.3f", rule) +
               " over " + std::to_string(t.at("positive_predictions").get<int>()) + " positives");
  }
}

void check_sparsity(const sp::pipeline::PipelineConfig& base) {
  const sp::pipeline::Store store{base.store};
  const auto fm = sp::featenc::load_features(store.features());
  std::size_t max_active = 0;
  for (const auto& r : fm.rows) max_active = std::max(max_active, r.nnz());
  report(max_active <= 30, "sparsity_active",
         "max active patterns " + std::to_string(max_active) + " over " +
             std::to_string(fm.rows.size()) + " records");

  std::map<std::string, std::vector<std::size_t>> nz;
  const double alphas[] = {0.001, 0.01, 0.1, 1.0};
  for (double a : alphas) {
    auto cfg = base;
    cfg.head.alpha = a;
    sp::pipeline::run_train_head(cfg);
    for (const auto& t : sp::interphead::load_head(store.head()).targets) {
      nz[t.name].push_back(t.trained ? t.nonzero() : 0);
    }
  }
  sp::pipeline::run_train_head(base);  // leave the configured head in place

  bool cap = true, mono = true;
  std::string detail;
  for (const auto& [name, v] : nz) {
    cap &= v[1] <= 64;
    mono &= std::is_sorted(v.rbegin(), v.rend());
    detail += name + "=";
    for (std::size_t i = 0; i < v.size(); ++i) detail += (i ? "/" : "") + std::to_string(v[i]);
    detail += " ";
  }
  report(cap, "sparsity_head_weights", "nonzero at alpha 0.01 <= 64: " + detail);
  report(mono, "sparsity_monotone_alpha", "alpha 0.001/0.01/0.1/1: " + detail);
}

void check_completeness(const sp::pipeline::PipelineConfig& cfg) {
  const sp::pipeline::Store store{cfg.store};
  const auto head = sp::interphead::load_head(store.head());
  const auto fm = sp::featenc::load_features(store.features());
  const auto ds = sp::embedstore::load_dataset(store.dataset());
  std::set<std::string> test_ids;
  for (auto i : ds.indices(sp::embedstore::Split::test)) test_ids.insert(ds.records()[i].record_id);
  std::size_t checked = 0, bad = 0;
  for (const auto& row : fm.rows) {
    if (!test_ids.count(row.record_id)) continue;
    for (const auto& t : head.targets) {
      if (!t.trained) continue;
      const auto r = sp::interphead::attribute(head, row, t.name);
      double z = r.bias;
      for (const auto& c : r.contributions) z += c.contribution;
      bad += z != r.logit;
      ++checked;
    }
  }
  report(checked > 0 && bad == 0, "attribution_completeness",
         std::to_string(bad) + " inexact of " + std::to_string(checked) + " record/target pairs");
}

void check_service(const sp::pipeline::PipelineConfig& cfg) {
  const fs::path schemas = testsupport::schema_dir();
  std::vector<std::string> problems;
  const auto validate = [&](const std::string& body, const std::string& schema, const std::string& what) {
    json j;
    try {
      j = json::parse(body);
    } catch (const json::exception&) {
      problems.push_back(what + ": not JSON");
      return j;
    }
    for (const auto& e : testsupport::validate(j, schemas, schema)) problems.push_back(what + ": " + e);
    return j;
  };

  sp::service::Service svc({cfg.store, {}, {}});
  const int port = svc.bind("127.0.0.1", 0);
  std::thread th([&] { svc.listen(); });
  svc.wait_until_ready();
  httplib::Client c("127.0.0.1", port);
  c.set_read_timeout(30, 0);

  std::size_t bit_exact = 0, compared = 0, verdicts = 0;
  bool replay_ok = false;
  try {
    auto res = c.Get("/api/patterns?page_size=500");
    const auto list = validate(res ? res->body : "", "pattern_list.schema.json", "list");
    std::vector<std::string> ids;
    for (const auto& p : list.value("patterns", json::array())) ids.push_back(p["pattern_id"]);
    if (ids.empty()) problems.push_back("list: empty registry");

    for (std::size_t i = 0; i < ids.size(); i += std::max<std::size_t>(1, ids.size() / 20)) {
      res = c.Get("/api/patterns/" + ids[i] + "/gallery");
      validate(res ? res->body : "", "gallery.schema.json", "gallery " + ids[i]);
    }

    // reject a few pending patterns; the accepted set stays as curated
    for (const auto& p : list.value("patterns", json::array())) {
      if (verdicts >= 6 || p["status"] != "pending") continue;
      const json body = {{"verdict", "reject"}, {"reviewer", "acceptance"}, {"note", "spot check"}};
      res = c.Post("/api/patterns/" + p["pattern_id"].get<std::string>() + "/verdict", body.dump(),
                   "application/json");
      if (!res || res->status != 200) problems.push_back("verdict: status " + (res ? std::to_string(res->status) : "none"));
      validate(res ? res->body : "", "pattern_summary.schema.json", "verdict");
      ++verdicts;
    }
    res = c.Post("/api/patterns/nope/verdict", R"({"verdict":"accept","reviewer":"a"})", "application/json");
    validate(res ? res->body : "", "error.schema.json", "verdict 404");

    const auto head = sp::interphead::load_head(sp::pipeline::Store{cfg.store}.head());
    const auto fm = sp::featenc::load_features(sp::pipeline::Store{cfg.store}.features());
    for (std::size_t r = 0; r < fm.rows.size(); r += fm.rows.size() / 10) {
      for (const auto& t : head.targets) {
        const auto& rec = fm.rows[r].record_id;
        res = c.Get("/api/records/" + rec + "/attribution/" + t.name);
        validate(res ? res->body : "", "attribution.schema.json", "attribution " + rec);
        const auto [code, out] = testsupport::run_capture(
            testsupport::cli_path().string() + " explain --store '" + cfg.store.string() +
            "' --record " + rec + " --target " + t.name);
        ++compared;
        if (res && code == 0 && out == res->body + "\n") ++bit_exact;
      }
    }
  } catch (const std::exception& e) {
    problems.push_back(std::string("exception: ") + e.what());
  }
  svc.stop();
  th.join();

  const auto reg = sp::registry::Registry::open(sp::pipeline::Store{cfg.store}.registry());
  std::vector<std::string> all;
  for (const auto& p : reg.list()) all.push_back(p.pattern_id);
  const auto replayed = sp::registry::Registry::replay(all, reg.audit_log());
  replay_ok = true;
  for (const auto& p : reg.list()) replay_ok &= replayed.at(p.pattern_id) == p.status;

  report(problems.empty(), "service_schemas",
         problems.empty() ? "list, gallery, verdict and attribution responses valid"
                          : std::to_string(problems.size()) + " problems, first: " + problems[0]);
  report(replay_ok && verdicts > 0, "service_audit_replay",
         std::to_string(reg.audit_log().size()) + " audit entries replay to the stored statuses");
  report(compared > 0 && bit_exact == compared, "service_cli_bit_exact",
         std::to_string(bit_exact) + "/" + std::to_string(compared) + " explain outputs identical");
}

}  // namespace

int main() {
  std::printf("acceptance run\n");
  check_top_k();
  check_gradients();
  check_splits();

  testsupport::TempDir a("accept-a"), b("accept-b");
  const auto cfg_a = e2e_config(a.path() / "store");
  const auto cfg_b = e2e_config(b.path() / "store");

  auto t0 = std::chrono::steady_clock::now();
  std::string summary_a, summary_b;
  try {
    summary_a = sp::pipeline::dump_summary(sp::pipeline::run_e2e(cfg_a));
  } catch (const std::exception& e) {
    report(false, "e2e", std::string("pipeline failed: ") + e.what());
    return 1;
  }
  check_e2e_metrics(json::parse(summary_a), seconds_since(t0));
  check_completeness(cfg_a);
  check_service(cfg_a);
  check_sparsity(cfg_a);

  try {
    summary_b = sp::pipeline::dump_summary(sp::pipeline::run_e2e(cfg_b));
  } catch (const std::exception& e) {
    summary_b = std::string("failed: ") + e.what();
  }
  report(summary_a == summary_b, "determinism",
         summary_a == summary_b ? "two e2e runs gave byte-identical summaries ("
                                      + std::to_string(summary_a.size()) + " bytes)"
                                : "summaries differ");

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
