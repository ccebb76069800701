#include "sparsepat/transcoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "sparsepat/core/digest.hpp"
#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/core/tensor_io.hpp"

namespace sparsepat::transcoder {

using nlohmann::json;

std::vector<double> top_k(std::span<const double> v, std::size_t k) {
  std::vector<std::uint32_t> idx;
  kernels::top_k_indices(v, k, idx);
  std::vector<double> out(v.size(), 0.0);
  for (auto i : idx) out[i] = v[i];
  return out;
}

TranscoderModel TranscoderModel::init(std::size_t d_in, std::size_t latent, std::size_t d_out,
                                      std::size_t k, std::uint64_t seed) {
  TranscoderModel m = zeros(d_in, latent, d_out, k);
  Rng rng(derive_seed(seed, 0x7C0DE));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (double& w : m.encoder.data()) w = scale * rng.normal();
  for (std::size_t j = 0; j < latent; ++j) {
    auto enc = m.encoder.row(j);
    auto dec = m.decoder.row(j);
    for (std::size_t c = 0; c < d_out; ++c) dec[c] = enc[c % d_in];
    normalize(dec);
  }
  return m;
}

TranscoderModel TranscoderModel::zeros(std::size_t d_in, std::size_t latent, std::size_t d_out,
                                       std::size_t k) {
  TranscoderModel m;
  m.encoder = Matrix(latent, d_in);
  m.encoder_bias.assign(latent, 0.0);
  m.decoder = Matrix(latent, d_out);
  m.decoder_bias.assign(d_out, 0.0);
  m.k = k;
  m.validate();
  return m;
}

void TranscoderModel::validate() const {
  if (encoder.rows() == 0 || encoder.cols() == 0 || decoder.cols() == 0) {
    throw ConfigError("transcoder dims must be positive");
  }
  if (decoder.rows() != encoder.rows() || encoder_bias.size() != encoder.rows() ||
      decoder_bias.size() != decoder.cols()) {
    throw ConfigError("transcoder parameter shapes disagree");
  }
  if (k < 1 || k > latent_dim()) {
    throw ConfigError("transcoder k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(latent_dim()) + "]");
  }
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!finite(encoder.data()) || !finite(decoder.data()) || !finite(encoder_bias) ||
      !finite(decoder_bias)) {
    throw NumericError("transcoder has non-finite parameters");
  }
}

void encode_batch(const TranscoderModel& model, const Matrix& x, std::vector<SparseRow>& codes) {
  if (x.cols() != model.input_dim()) {
    throw ConfigError("transcoder input has dimension " + std::to_string(x.cols()) +
                      ", expected " + std::to_string(model.input_dim()));
  }
  Matrix pre;
  kernels::gemm_nt(x, model.encoder, model.encoder_bias, pre);
  kernels::relu_top_k_rows(pre, model.k, codes);
}

void decode_batch(const TranscoderModel& model, const std::vector<SparseRow>& codes, Matrix& recon) {
  recon = Matrix(codes.size(), model.output_dim());
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(codes.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    auto out = recon.row(static_cast<std::size_t>(i));
    std::copy(model.decoder_bias.begin(), model.decoder_bias.end(), out.begin());
    const auto& c = codes[static_cast<std::size_t>(i)];
    for (std::size_t a = 0; a < c.nnz(); ++a) {
      auto atom = model.decoder.row(c.index[a]);
      const double v = c.value[a];
      for (std::size_t d = 0; d < out.size(); ++d) out[d] += v * atom[d];
    }
  }
}

Encoded tc_forward(const TranscoderModel& model, std::span<const double> x) {
  Matrix in(1, x.size());
  std::copy(x.begin(), x.end(), in.row(0).begin());
  std::vector<SparseRow> codes;
  encode_batch(model, in, codes);
  Matrix recon;
  decode_batch(model, codes, recon);
  return {std::move(codes[0]), std::vector<double>(recon.data())};
}

double reconstruction_loss(const TranscoderModel& model, const Matrix& inputs,
                           const Matrix& targets) {
  if (inputs.rows() != targets.rows() || targets.cols() != model.output_dim()) {
    throw ConfigError("transcoder inputs and targets are not aligned");
  }
  std::vector<SparseRow> codes;
  encode_batch(model, inputs, codes);
  Matrix recon;
  decode_batch(model, codes, recon);
  double total = 0.0;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    const double d = recon.data()[i] - targets.data()[i];
    total += d * d;
  }
  return total / static_cast<double>(inputs.rows() * model.output_dim());
}

double loss_and_gradients(const TranscoderModel& model, const Matrix& x, const Matrix& t,
                          Gradients& g) {
  if (x.rows() != t.rows() || t.cols() != model.output_dim()) {
    throw ConfigError("transcoder inputs and targets are not aligned");
  }
  const std::size_t B = x.rows();
  const std::size_t m = model.latent_dim();
  const std::size_t d_in = model.input_dim();
  const std::size_t d_out = model.output_dim();

  std::vector<SparseRow> codes;
  encode_batch(model, x, codes);
  Matrix recon;
  decode_batch(model, codes, recon);

  // r_i = dL/drecon_i
  Matrix r(B, d_out);
  double loss = 0.0;
  const double scale = 2.0 / static_cast<double>(B * d_out);
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = recon.data()[i] - t.data()[i];
    loss += d * d;
    r.data()[i] = scale * d;
  }
  loss /= static_cast<double>(B * d_out);

  g.decoder_bias.assign(d_out, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    auto ri = r.row(i);
    for (std::size_t d = 0; d < d_out; ++d) g.decoder_bias[d] += ri[d];
  }

  // Per-neuron activity lists so each neuron's gradient row is owned by one
  // thread and reduced in sample order.
  struct Hit {
    std::uint32_t sample;
    double code;
    double dpre;
  };
  std::vector<std::vector<Hit>> hits(m);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& c = codes[i];
    for (std::size_t a = 0; a < c.nnz(); ++a) {
      const auto j = c.index[a];
      const double dcode = dot(model.decoder.row(j), r.row(i));
      hits[j].push_back({static_cast<std::uint32_t>(i), c.value[a], dcode});
    }
  }

  g.encoder = Matrix(m, d_in);
  g.decoder = Matrix(m, d_out);
  g.encoder_bias.assign(m, 0.0);
  const std::ptrdiff_t mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t jj = 0; jj < mm; ++jj) {
    const auto j = static_cast<std::size_t>(jj);
    auto ge = g.encoder.row(j);
    auto gd = g.decoder.row(j);
    double gb = 0.0;
    for (const auto& h : hits[j]) {
      auto xi = x.row(h.sample);
      auto ri = r.row(h.sample);
      for (std::size_t c = 0; c < d_in; ++c) ge[c] += h.dpre * xi[c];
      for (std::size_t d = 0; d < d_out; ++d) gd[d] += h.code * ri[d];
      gb += h.dpre;
    }
    g.encoder_bias[j] = gb;
  }
  return loss;
}

void TranscoderConfig::validate() const {
  if (latent == 0 || k == 0 || k > latent) throw ConfigError("transcoder config: need 1 <= k <= latent");
  if (!(lr > 0.0) || epochs == 0 || batch_size == 0) {
    throw ConfigError("transcoder config: lr, epochs and batch size must be positive");
  }
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) {
    throw ConfigError("transcoder config: subset_fraction must be in (0, 1]");
  }
}

json config_to_json(const TranscoderConfig& c) {
  return {{"latent", c.latent},
          {"k", c.k},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"optimizer", c.optimizer == Optimizer::adam ? "adam" : "full_batch_gd"},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"subset_fraction", c.subset_fraction}};
}

TranscoderConfig config_from_json(const json& j) {
  TranscoderConfig c;
  c.latent = j.at("latent").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.optimizer = j.at("optimizer").get<std::string>() == "adam" ? Optimizer::adam
                                                               : Optimizer::full_batch_gd;
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.subset_fraction = j.at("subset_fraction").get<double>();
  return c;
}

namespace {

struct Adam {
  std::vector<double> m, v;
  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  void step(std::vector<double>& p, const std::vector<double>& g, const TranscoderConfig& c,
            std::size_t t) {
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(p.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      p[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
    }
  }
};

void sgd_step(std::vector<double>& p, const std::vector<double>& g, double lr) {
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

Matrix gather(const Matrix& src, const std::vector<std::size_t>& order, std::size_t b,
              std::size_t e) {
  Matrix out(e - b, src.cols());
  for (std::size_t r = b; r < e; ++r) {
    auto s = src.row(order[r]);
    std::copy(s.begin(), s.end(), out.row(r - b).begin());
  }
  return out;
}

}  // namespace

TrainOutcome train_transcoder(const Matrix& inputs, const Matrix& targets,
                              const TranscoderConfig& config, std::uint64_t seed) {
  config.validate();
  if (inputs.rows() == 0 || inputs.rows() != targets.rows()) {
    throw ConfigError("train_transcoder: inputs and targets must be non-empty and row-aligned");
  }
  const auto finite = [](const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
  };
  if (!finite(inputs) || !finite(targets)) {
    throw NumericError("train_transcoder: inputs or targets contain non-finite values");
  }
  TrainOutcome out;
  out.model = TranscoderModel::init(inputs.cols(), config.latent, targets.cols(), config.k, seed);
  auto& model = out.model;
  Rng rng(derive_seed(seed, 0x5B0FF));

  Adam a_enc(model.encoder.size()), a_benc(model.encoder_bias.size());
  Adam a_dec(model.decoder.size()), a_bdec(model.decoder_bias.size());
  Gradients g;
  std::size_t step = 0;

  const std::size_t n = inputs.rows();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.optimizer == Optimizer::full_batch_gd) {
      const double loss = loss_and_gradients(model, inputs, targets, g);
      if (!std::isfinite(loss)) throw NumericError("transcoder loss is non-finite");
      sgd_step(model.encoder.data(), g.encoder.data(), config.lr);
      sgd_step(model.encoder_bias, g.encoder_bias, config.lr);
      sgd_step(model.decoder.data(), g.decoder.data(), config.lr);
      sgd_step(model.decoder_bias, g.decoder_bias, config.lr);
    } else {
      rng.shuffle(order);
      for (std::size_t b = 0; b < n; b += config.batch_size) {
        const std::size_t e = std::min(b + config.batch_size, n);
        const Matrix bx = gather(inputs, order, b, e);
        const Matrix bt = gather(targets, order, b, e);
        const double loss = loss_and_gradients(model, bx, bt, g);
        if (!std::isfinite(loss)) {
          throw NumericError("transcoder loss is non-finite in epoch " + std::to_string(epoch + 1));
        }
        ++step;
        a_enc.step(model.encoder.data(), g.encoder.data(), config, step);
        a_benc.step(model.encoder_bias, g.encoder_bias, config, step);
        a_dec.step(model.decoder.data(), g.decoder.data(), config, step);
        a_bdec.step(model.decoder_bias, g.decoder_bias, config, step);
      }
    }
    const double full = reconstruction_loss(model, inputs, targets);
    if (!std::isfinite(full)) {
      throw NumericError("transcoder loss is non-finite after epoch " + std::to_string(epoch + 1));
    }
    out.epoch_losses.push_back(full);
  }
  out.final_loss = out.epoch_losses.back();
  return out;
}

// Ensemble -------------------------------------------------------------------

std::uint64_t member_seed(std::uint64_t seed, std::size_t member) {
  return derive_seed(seed, 0xE5E0000ULL + member);
}

std::vector<std::size_t> member_subset(std::size_t n_rows, double fraction, std::uint64_t seed,
                                       std::size_t member) {
  Rng rng(derive_seed(seed, 0x50B5E7000ULL + member));
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_rows)));
  auto idx = rng.sample_without_replacement(n_rows, std::max<std::size_t>(k, 1));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::string subset_digest(const std::vector<std::string>& row_ids,
                          const std::vector<std::size_t>& subset) {
  Sha256 h;
  for (auto i : subset) {
    h.update(row_ids.at(i));
    h.update(std::string_view("\n", 1));
  }
  return h.finish();
}

Ensemble train_ensemble(const Matrix& inputs, const Matrix& targets,
                        const std::vector<std::string>& row_ids, std::size_t n_members,
                        const TranscoderConfig& config, std::uint64_t seed,
                        const std::string& target_kind) {
  config.validate();
  if (n_members == 0) throw ConfigError("ensemble size must be >= 1");
  if (row_ids.size() != inputs.rows()) throw ConfigError("row ids do not match inputs");

  Ensemble ens;
  ens.manifest.seed = seed;
  ens.manifest.input_dim = inputs.cols();
  ens.manifest.output_dim = targets.cols();
  ens.manifest.target_kind = target_kind;
  ens.manifest.config = config;
  ens.manifest.members.resize(n_members);
  ens.members.resize(n_members);

  const std::ptrdiff_t nm = static_cast<std::ptrdiff_t>(n_members);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t ii = 0; ii < nm; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    auto& rec = ens.manifest.members[i];
    rec.id = i;
    rec.seed = member_seed(seed, i);
    try {
      const auto subset = member_subset(inputs.rows(), config.subset_fraction, seed, i);
      rec.subset_digest = subset_digest(row_ids, subset);
      rec.subset_size = subset.size();
      const Matrix x = gather(inputs, subset, 0, subset.size());
      const Matrix t = gather(targets, subset, 0, subset.size());
      auto outcome = train_transcoder(x, t, config, rec.seed);
      rec.final_loss = outcome.final_loss;
      ens.members[i] = std::move(outcome.model);
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
  }
  return ens;
}

json manifest_to_json(const EnsembleManifest& m) {
  json members = json::array();
  for (const auto& r : m.members) {
    json jr{{"id", r.id},
            {"seed", r.seed},
            {"subset_digest", r.subset_digest},
            {"subset_size", r.subset_size},
            {"final_loss", r.final_loss},
            {"status", r.ok ? "ok" : "failed"}};
    if (!r.ok) jr["error"] = r.error;
    members.push_back(std::move(jr));
  }
  return {{"format_version", 1},
          {"seed", m.seed},
          {"input_dim", m.input_dim},
          {"output_dim", m.output_dim},
          {"target_kind", m.target_kind},
          {"ensemble_size", m.members.size()},
          {"config", config_to_json(m.config)},
          {"members", members}};
}

EnsembleManifest manifest_from_json(const json& j) {
  EnsembleManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.input_dim = j.at("input_dim").get<std::size_t>();
  m.output_dim = j.at("output_dim").get<std::size_t>();
  m.target_kind = j.at("target_kind").get<std::string>();
  m.config = config_from_json(j.at("config"));
  for (const auto& jr : j.at("members")) {
    MemberRecord r;
    r.id = jr.at("id").get<std::size_t>();
    r.seed = jr.at("seed").get<std::uint64_t>();
    r.subset_digest = jr.at("subset_digest").get<std::string>();
    r.subset_size = jr.at("subset_size").get<std::size_t>();
    r.final_loss = jr.at("final_loss").get<double>();
    r.ok = jr.at("status").get<std::string>() == "ok";
    r.error = jr.value("error", std::string{});
    m.members.push_back(std::move(r));
  }
  if (m.members.size() != j.at("ensemble_size").get<std::size_t>()) {
    throw ValidationError("ensemble manifest member count differs from ensemble_size");
  }
  return m;
}

namespace {
std::filesystem::path member_path(const std::filesystem::path& dir, std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "member_%03zu.bin", i);
  return dir / name;
}
Matrix row_of(const std::vector<double>& v) {
  Matrix m(1, v.size());
  std::copy(v.begin(), v.end(), m.row(0).begin());
  return m;
}
}  // namespace

void save_ensemble(const std::filesystem::path& dir, const Ensemble& ens) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ens.members.size(); ++i) {
    if (!ens.members[i]) continue;
    const auto& m = *ens.members[i];
    TensorFile f;
    f.tensors["encoder.weight"] = m.encoder;
    f.tensors["encoder.bias"] = row_of(m.encoder_bias);
    f.tensors["decoder.weight"] = m.decoder;
    f.tensors["decoder.bias"] = row_of(m.decoder_bias);
    write_tensor_file(member_path(dir, i), f);
  }
  binio::write_atomic(dir / "ensemble.json", manifest_to_json(ens.manifest).dump(2) + "\n");
}

Ensemble load_ensemble(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "ensemble.json")) {
    throw PrerequisiteError("no transcoder ensemble in " + dir.string(), "train-transcoders");
  }
  Ensemble ens;
  ens.manifest = manifest_from_json(json::parse(binio::read_all(dir / "ensemble.json")));
  for (const auto& rec : ens.manifest.members) {
    if (!rec.ok) {
      ens.members.emplace_back(std::nullopt);
      continue;
    }
    const auto f = read_tensor_file(member_path(dir, rec.id));
    TranscoderModel m;
    m.encoder = f.at("encoder.weight");
    m.encoder_bias = f.at("encoder.bias").data();
    m.decoder = f.at("decoder.weight");
    m.decoder_bias = f.at("decoder.bias").data();
    m.k = ens.manifest.config.k;
    m.validate();
    ens.members.emplace_back(std::move(m));
  }
  return ens;
}

}  // namespace sparsepat::transcoder
