#include "sparsepat/interphead.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>

#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/core/tensor_io.hpp"

namespace sparsepat::interphead {

using nlohmann::json;

ClassWeights class_weights(const std::vector<int>& labels, const std::string& target) {
  std::size_t pos = 0, neg = 0;
  for (int y : labels) {
    if (y == 1) ++pos;
    else if (y == 0) ++neg;
  }
  if (pos == 0 || neg == 0) {
    throw ConfigError("target '" + target + "' has a single class (" + std::to_string(pos) +
                      " positive, " + std::to_string(neg) + " negative)");
  }
  const double n = static_cast<double>(pos + neg);
  return {n / (2.0 * static_cast<double>(pos)), n / (2.0 * static_cast<double>(neg))};
}

double soft_threshold(double w, double lambda) {
  if (w > lambda) return w - lambda;
  if (w < -lambda) return w + lambda;
  return 0.0;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

// log(1 + exp(z)) without overflow
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double margin(const featenc::FeatureVector& a, const std::vector<double>& w, double b) {
  double z = b;
  for (std::size_t t = 0; t < a.nnz(); ++t) z += w[a.index[t]] * a.value[t];
  return z;
}

double cost(const Problem& pb, std::size_t i) {
  return pb.labels[i] == 1 ? pb.weights.pos : pb.weights.neg;
}

void check_problem(const Problem& pb) {
  if (pb.rows.size() != pb.labels.size()) throw std::invalid_argument("rows/labels size mismatch");
  if (pb.rows.empty()) throw ConfigError("head training set is empty");
  for (auto* r : pb.rows) {
    for (auto c : r->index) {
      if (c >= pb.n_features) throw std::out_of_range("feature column out of range");
    }
  }
}

// Upper bound on the smoothness constant of every per-sample loss.
double lipschitz(const Problem& pb) {
  double l = 0.0;
  for (std::size_t i = 0; i < pb.rows.size(); ++i) {
    double sq = 1.0;
    for (double v : pb.rows[i]->value) sq += v * v;
    l = std::max(l, cost(pb, i) * sq / 4.0);
  }
  return l;
}

double objective(const Problem& pb, const std::vector<double>& w, double b, double alpha) {
  double l1 = 0.0;
  for (double x : w) l1 += std::abs(x);
  return smooth_loss(pb, w, b) + alpha * l1;
}

bool finite(const std::vector<double>& w, double b) {
  return std::isfinite(b) && std::all_of(w.begin(), w.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

double smooth_loss(const Problem& pb, const std::vector<double>& w, double b,
                   std::vector<double>* grad_w, double* grad_b) {
  const double n = static_cast<double>(pb.rows.size());
  if (grad_w) grad_w->assign(pb.n_features, 0.0);
  if (grad_b) *grad_b = 0.0;
  double loss = 0.0;
  for (std::size_t i = 0; i < pb.rows.size(); ++i) {
    const auto& a = *pb.rows[i];
    const double z = margin(a, w, b);
    const double c = cost(pb, i);
    const int y = pb.labels[i];
    // -y log s(z) - (1-y) log(1-s(z)) = softplus(z) - y z
    loss += c * (softplus(z) - (y ? z : 0.0));
    const double g = c * (sigmoid(z) - y) / n;
    if (grad_w) {
      for (std::size_t t = 0; t < a.nnz(); ++t) (*grad_w)[a.index[t]] += g * a.value[t];
    }
    if (grad_b) *grad_b += g;
  }
  return loss / n;
}

std::size_t TargetHead::nonzero() const {
  return static_cast<std::size_t>(std::count_if(weights.begin(), weights.end(),
                                                [](double x) { return x != 0.0; }));
}

const TargetHead& HeadModel::target(const std::string& key) const {
  const TargetHead* found = nullptr;
  for (const auto& t : targets) {
    if (t.name == key) found = &t;
  }
  if (!found) {
    std::size_t idx = 0;
    auto [p, ec] = std::from_chars(key.data(), key.data() + key.size(), idx);
    if (ec == std::errc() && p == key.data() + key.size() && idx < targets.size()) {
      found = &targets[idx];
    }
  }
  if (!found) throw ConfigError("unknown target '" + key + "'");
  if (!found->trained) {
    throw ConfigError("target '" + found->name + "' was not trained: " + found->skipped);
  }
  return *found;
}

namespace {

TargetHead fit_saga(const Problem& pb, const HeadConfig& cfg, TargetHead head) {
  const std::size_t n = pb.rows.size();
  const std::size_t p = pb.n_features;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double step = 1.0 / lipschitz(pb);
  const double shrink = step * cfg.alpha;

  std::vector<double> w(p, 0.0);
  double b = 0.0;
  // Gradient memory: one scalar per sample for a linear model.
  std::vector<double> memory(n);
  std::vector<double> avg_w(p, 0.0);
  double avg_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = *pb.rows[i];
    memory[i] = cost(pb, i) * (sigmoid(margin(a, w, b)) - pb.labels[i]);
    for (std::size_t t = 0; t < a.nnz(); ++t) avg_w[a.index[t]] += memory[i] * a.value[t] * inv_n;
    avg_b += memory[i] * inv_n;
  }

  Rng rng(derive_seed(cfg.seed, 0x5a6a));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> w_prev;
  for (std::size_t pass = 1; pass <= cfg.max_passes; ++pass) {
    rng.shuffle(order);
    w_prev = w;
    const double b_prev = b;
    for (auto i : order) {
      const auto& a = *pb.rows[i];
      const double g = cost(pb, i) * (sigmoid(margin(a, w, b)) - pb.labels[i]);
      const double delta = g - memory[i];
      for (std::size_t j = 0; j < p; ++j) w[j] -= step * avg_w[j];
      for (std::size_t t = 0; t < a.nnz(); ++t) w[a.index[t]] -= step * delta * a.value[t];
      for (std::size_t j = 0; j < p; ++j) w[j] = soft_threshold(w[j], shrink);
      b -= step * (delta + avg_b);
      for (std::size_t t = 0; t < a.nnz(); ++t) avg_w[a.index[t]] += delta * a.value[t] * inv_n;
      avg_b += delta * inv_n;
      memory[i] = g;
    }
    if (!finite(w, b)) {
      throw NumericError("head training diverged on target '" + head.name + "' at pass " +
                         std::to_string(pass));
    }
    double change = std::abs(b - b_prev);
    for (std::size_t j = 0; j < p; ++j) change = std::max(change, std::abs(w[j] - w_prev[j]));
    head.passes = pass;
    if (change < cfg.tol) {
      head.converged = true;
      break;
    }
  }
  head.weights = std::move(w);
  head.bias = b;
  return head;
}

TargetHead fit_prox_gd(const Problem& pb, const HeadConfig& cfg, TargetHead head) {
  const double step = 1.0 / lipschitz(pb);
  std::vector<double> w(pb.n_features, 0.0), gw;
  double b = 0.0, gb = 0.0;
  for (std::size_t it = 1; it <= cfg.max_passes; ++it) {
    smooth_loss(pb, w, b, &gw, &gb);
    double change = step * std::abs(gb);
    b -= step * gb;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double next = soft_threshold(w[j] - step * gw[j], step * cfg.alpha);
      change = std::max(change, std::abs(next - w[j]));
      w[j] = next;
    }
    if (!finite(w, b)) {
      throw NumericError("head training diverged on target '" + head.name + "' at iteration " +
                         std::to_string(it));
    }
    head.passes = it;
    if (change < cfg.tol) {
      head.converged = true;
      break;
    }
  }
  head.weights = std::move(w);
  head.bias = b;
  return head;
}

}  // namespace

TargetHead fit_target(const Problem& pb, const std::string& name, const HeadConfig& cfg) {
  if (!(cfg.alpha >= 0.0)) throw ConfigError("head alpha must be >= 0");
  if (cfg.max_passes == 0) throw ConfigError("head max_passes must be positive");
  check_problem(pb);
  TargetHead head;
  head.name = name;
  head.trained = true;
  head.class_weights = pb.weights;
  head = cfg.solver == Solver::saga ? fit_saga(pb, cfg, std::move(head))
                                    : fit_prox_gd(pb, cfg, std::move(head));
  head.objective = objective(pb, head.weights, head.bias, cfg.alpha);
  return head;
}

HeadModel train_head(const featenc::FeatureMatrix& features,
                     const std::vector<std::vector<int>>& labels,
                     const std::vector<std::string>& target_names, const HeadConfig& cfg) {
  if (labels.size() != target_names.size()) throw std::invalid_argument("target count mismatch");
  HeadModel model;
  model.alpha = cfg.alpha;
  model.pattern_ids = features.pattern_ids;
  model.targets.resize(labels.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t].size() != features.rows.size()) {
      model.targets[t].name = target_names[t];
      model.targets[t].skipped = "label count differs from feature rows";
      continue;
    }
    Problem pb;
    pb.n_features = features.pattern_ids.size();
    for (std::size_t i = 0; i < features.rows.size(); ++i) {
      if (labels[t][i] < 0) continue;
      pb.rows.push_back(&features.rows[i]);
      pb.labels.push_back(labels[t][i]);
    }
    try {
      pb.weights = class_weights(pb.labels, target_names[t]);
    } catch (const ConfigError& e) {
      model.targets[t].name = target_names[t];
      model.targets[t].skipped = e.what();
#pragma omp critical(head_log)
      std::cerr << "warning: skipping " << e.what() << "\n";
      continue;
    }
    HeadConfig local = cfg;
    local.seed = derive_seed(cfg.seed, t);
    model.targets[t] = fit_target(pb, target_names[t], local);
  }
  for (const auto& t : model.targets) {
    if (t.trained && t.weights.size() != model.pattern_ids.size()) {
      throw std::logic_error("head weight size mismatch");
    }
  }
  return model;
}

AttributionReport attribute(const HeadModel& head, const featenc::FeatureVector& f,
                            const std::string& target) {
  const auto& t = head.target(target);
  AttributionReport r;
  r.record_id = f.record_id;
  r.target = t.name;
  r.bias = t.bias;
  std::vector<std::size_t> cols;
  for (std::size_t k = 0; k < f.nnz(); ++k) {
    const auto c = f.index[k];
    if (c >= t.weights.size()) throw ConfigError("feature column outside the head's pattern set");
    if (f.value[k] == 0.0) continue;
    Contribution ct;
    ct.pattern_id = head.pattern_ids[c];
    ct.activation = f.value[k];
    ct.weight = t.weights[c];
    ct.contribution = ct.weight * ct.activation;
    if (c < head.descriptions.size()) ct.description = head.descriptions[c];
    r.contributions.push_back(std::move(ct));
    cols.push_back(c);
  }
  std::vector<std::size_t> order(cols.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double x = std::abs(r.contributions[a].contribution);
    const double y = std::abs(r.contributions[b].contribution);
    return x != y ? x > y : cols[a] < cols[b];
  });
  std::vector<Contribution> sorted;
  sorted.reserve(order.size());
  for (auto i : order) sorted.push_back(std::move(r.contributions[i]));
  r.contributions = std::move(sorted);

  double z = r.bias;
  for (const auto& c : r.contributions) z += c.contribution;
  r.logit = z;
  r.probability = sigmoid(z);
  return r;
}

double predict(const HeadModel& head, const featenc::FeatureVector& f, const std::string& target) {
  return attribute(head, f, target).probability;
}

json to_json(const AttributionReport& r) {
  json cs = json::array();
  for (const auto& c : r.contributions) {
    json e = {{"pattern_id", c.pattern_id},
              {"activation", c.activation},
              {"weight", c.weight},
              {"contribution", c.contribution}};
    if (!c.description.empty()) e["description"] = c.description;
    cs.push_back(std::move(e));
  }
  return {{"record_id", r.record_id}, {"target", r.target},       {"logit", r.logit},
          {"probability", r.probability}, {"bias", r.bias}, {"contributions", std::move(cs)}};
}

json config_to_json(const HeadConfig& c) {
  return {{"alpha", c.alpha},
          {"solver", c.solver == Solver::saga ? "saga" : "prox_gd"},
          {"max_passes", c.max_passes},
          {"tol", c.tol},
          {"seed", c.seed}};
}

HeadConfig config_from_json(const json& j) {
  HeadConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "alpha") c.alpha = v.get<double>();
    else if (k == "solver") {
      const auto s = v.get<std::string>();
      if (s == "saga") c.solver = Solver::saga;
      else if (s == "prox_gd") c.solver = Solver::prox_gd;
      else throw ConfigError("unknown head solver '" + s + "'");
    } else if (k == "max_passes") c.max_passes = v.get<std::size_t>();
    else if (k == "tol") c.tol = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown key in head config: " + k);
  }
  return c;
}

// Weights are stored as exact bit patterns next to readable values so a
// reloaded head predicts bit-identically.
json to_json(const HeadModel& h) {
  json targets = json::array();
  for (const auto& t : h.targets) {
    json e = {{"name", t.name}, {"trained", t.trained}};
    if (!t.trained) {
      e["skipped"] = t.skipped;
      targets.push_back(std::move(e));
      continue;
    }
    json ws = json::array();
    for (std::size_t j = 0; j < t.weights.size(); ++j) {
      if (t.weights[j] == 0.0) continue;
      ws.push_back({{"pattern_id", h.pattern_ids[j]},
                    {"weight", t.weights[j]},
                    {"bits", std::bit_cast<std::uint64_t>(t.weights[j])}});
    }
    e["bias"] = t.bias;
    e["bias_bits"] = std::bit_cast<std::uint64_t>(t.bias);
    e["class_weights"] = {{"pos", t.class_weights.pos}, {"neg", t.class_weights.neg}};
    e["nonzero"] = t.nonzero();
    e["passes"] = t.passes;
    e["converged"] = t.converged;
    e["objective"] = t.objective;
    e["weights"] = std::move(ws);
    targets.push_back(std::move(e));
  }
  return {{"alpha", h.alpha},
          {"pattern_ids", h.pattern_ids},
          {"descriptions", h.descriptions},
          {"targets", std::move(targets)}};
}

HeadModel head_from_json(const json& j) {
  HeadModel h;
  h.alpha = j.at("alpha").get<double>();
  h.pattern_ids = j.at("pattern_ids").get<std::vector<std::string>>();
  h.descriptions = j.value("descriptions", std::vector<std::string>{});
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < h.pattern_ids.size(); ++i) col[h.pattern_ids[i]] = i;
  for (const auto& e : j.at("targets")) {
    TargetHead t;
    t.name = e.at("name").get<std::string>();
    t.trained = e.at("trained").get<bool>();
    if (!t.trained) {
      t.skipped = e.value("skipped", "");
      h.targets.push_back(std::move(t));
      continue;
    }
    t.bias = std::bit_cast<double>(e.at("bias_bits").get<std::uint64_t>());
    t.class_weights = {e.at("class_weights").at("pos").get<double>(),
                       e.at("class_weights").at("neg").get<double>()};
    t.passes = e.value("passes", std::size_t{0});
    t.converged = e.value("converged", false);
    t.objective = e.value("objective", 0.0);
    t.weights.assign(h.pattern_ids.size(), 0.0);
    for (const auto& w : e.at("weights")) {
      auto it = col.find(w.at("pattern_id").get<std::string>());
      if (it == col.end()) throw ConfigError("head weight references unknown pattern");
      t.weights[it->second] = std::bit_cast<double>(w.at("bits").get<std::uint64_t>());
    }
    h.targets.push_back(std::move(t));
  }
  return h;
}

void save_head(const std::filesystem::path& path, const HeadModel& head) {
  binio::write_atomic(path, to_json(head).dump(1) + "\n");
}

HeadModel load_head(const std::filesystem::path& path) {
  try {
    return head_from_json(json::parse(binio::read_all(path)));
  } catch (const json::exception& e) {
    throw ConfigError("corrupt head file " + path.string() + ": " + e.what());
  }
}

}  // namespace sparsepat::interphead
