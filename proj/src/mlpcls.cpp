#include "sparsepat/mlpcls.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "sparsepat/core/error.hpp"
#include "sparsepat/core/tensor_io.hpp"
#include "sparsepat/kernels/kernels.hpp"

namespace sparsepat::mlpcls {

using nlohmann::json;

namespace {

DenseLayer make_layer(std::size_t in, std::size_t out, Rng* rng) {
  DenseLayer l{Matrix(in, out), std::vector<double>(out, 0.0)};
  if (rng != nullptr) {
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (double& w : l.weight.data()) w = scale * rng->normal();
  }
  return l;
}

bool all_finite(const DenseLayer& l) {
  for (double v : l.weight.data()) {
    if (!std::isfinite(v)) return false;
  }
  for (double v : l.bias) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Activations kept for the backward pass.
struct Cache {
  Matrix z1, h1, z2, h2, logits;
  Matrix keep1, keep2;  // dropout multipliers; empty in eval mode
};

void dropout_mask(Matrix& keep, std::size_t rows, std::size_t cols, double p, Rng& rng) {
  keep = Matrix(rows, cols);
  const double scale = 1.0 / (1.0 - p);
  for (double& k : keep.data()) k = rng.uniform() >= p ? scale : 0.0;
}

void activate(const Matrix& z, double theta, const Matrix& keep, Matrix& h) {
  h = Matrix(z.rows(), z.cols());
  const bool drop = !keep.empty();
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double a = jump_relu(z.data()[i], theta);
    h.data()[i] = drop ? a * keep.data()[i] : a;
  }
}

void run_forward(const ClassifierModel& m, const Matrix& x, Mode mode, Rng* rng, Cache& c) {
  const bool train = mode == Mode::train && m.dropout > 0.0;
  if (train && rng == nullptr) throw ConfigError("train-mode forward needs an rng");
  kernels::gemm_nn(x, m.hidden1.weight, m.hidden1.bias, c.z1);
  if (train) {
    dropout_mask(c.keep1, c.z1.rows(), c.z1.cols(), m.dropout, *rng);
  } else {
    c.keep1 = Matrix();
  }
  activate(c.z1, m.theta, c.keep1, c.h1);
  kernels::gemm_nn(c.h1, m.hidden2.weight, m.hidden2.bias, c.z2);
  if (train) {
    dropout_mask(c.keep2, c.z2.rows(), c.z2.cols(), m.dropout, *rng);
  } else {
    c.keep2 = Matrix();
  }
  activate(c.z2, m.theta, c.keep2, c.h2);
  kernels::gemm_nn(c.h2, m.output.weight, m.output.bias, c.logits);
}

std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> s(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) s[j] += r[j];
  }
  return s;
}

// dz = dh * keep * 1[z > theta]
void activation_backward(const Matrix& dh, const Matrix& z, const Matrix& keep, double theta,
                         Matrix& dz) {
  dz = Matrix(z.rows(), z.cols());
  const bool drop = !keep.empty();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z.data()[i] > theta) dz.data()[i] = drop ? dh.data()[i] * keep.data()[i] : dh.data()[i];
  }
}

void check_input(const ClassifierModel& m, std::size_t cols) {
  if (cols != m.input_dim()) {
    throw ConfigError("classifier input has dimension " + std::to_string(cols) + ", expected " +
                      std::to_string(m.input_dim()));
  }
}

}  // namespace

ClassifierModel ClassifierModel::init(std::size_t d_in, std::size_t h1, std::size_t h2,
                                      std::size_t labels, double theta, double dropout,
                                      std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xC1A55));
  ClassifierModel m;
  m.hidden1 = make_layer(d_in, h1, &rng);
  m.hidden2 = make_layer(h1, h2, &rng);
  m.output = make_layer(h2, labels, &rng);
  m.theta = theta;
  m.dropout = dropout;
  m.validate();
  return m;
}

ClassifierModel ClassifierModel::zeros(std::size_t d_in, std::size_t h1, std::size_t h2,
                                       std::size_t labels) {
  ClassifierModel m;
  m.hidden1 = make_layer(d_in, h1, nullptr);
  m.hidden2 = make_layer(h1, h2, nullptr);
  m.output = make_layer(h2, labels, nullptr);
  return m;
}

void ClassifierModel::validate() const {
  if (hidden1.weight.cols() != hidden2.weight.rows() ||
      hidden2.weight.cols() != output.weight.rows() ||
      hidden1.bias.size() != hidden1.weight.cols() ||
      hidden2.bias.size() != hidden2.weight.cols() || output.bias.size() != output.weight.cols()) {
    throw ConfigError("classifier layer shapes do not chain");
  }
  if (!(theta >= 0.0) || !std::isfinite(theta)) throw ConfigError("JumpReLU theta must be finite and >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (!all_finite(hidden1) || !all_finite(hidden2) || !all_finite(output)) {
    throw NumericError("classifier has non-finite parameters");
  }
}

void forward_batch(const ClassifierModel& model, const Matrix& x, Mode mode, Rng* rng,
                   Matrix& logits, Matrix* penultimate) {
  check_input(model, x.cols());
  Cache c;
  run_forward(model, x, mode, rng, c);
  logits = std::move(c.logits);
  if (penultimate != nullptr) *penultimate = std::move(c.h2);
}

Forward forward(const ClassifierModel& model, std::span<const double> x, Mode mode, Rng* rng) {
  Matrix in(1, x.size());
  std::copy(x.begin(), x.end(), in.row(0).begin());
  Matrix logits, pen;
  forward_batch(model, in, mode, rng, logits, &pen);
  return {std::vector<double>(logits.data()), std::vector<double>(pen.data())};
}

double bce_loss_grad(const Matrix& logits, const Matrix& labels, const Matrix& mask,
                     Matrix& dlogits) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols() ||
      mask.rows() != labels.rows() || mask.cols() != labels.cols()) {
    throw ConfigError("bce_loss: shape mismatch");
  }
  double count = 0.0;
  for (double m : mask.data()) count += m != 0.0 ? 1.0 : 0.0;
  if (count == 0.0) throw ConfigError("bce_loss: every cell is masked");
  dlogits = Matrix(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask.data()[i] == 0.0) continue;
    const double z = logits.data()[i];
    const double y = labels.data()[i];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    dlogits.data()[i] = (p - y) / count;
  }
  return total / count;
}

double bce_loss(const Matrix& logits, const Matrix& labels, const Matrix& mask) {
  Matrix unused;
  return bce_loss_grad(logits, labels, mask, unused);
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total steps must be >= 1");
  const double t = static_cast<double>(std::min(step, total_steps));
  return 0.5 * lr_max * (1.0 + std::cos(M_PI * t / static_cast<double>(total_steps)));
}

double loss_and_gradients(const ClassifierModel& model, const Matrix& x, const Matrix& labels,
                          const Matrix& mask, Mode mode, Rng* rng, Gradients& g) {
  check_input(model, x.cols());
  Cache c;
  run_forward(model, x, mode, rng, c);
  Matrix d3;
  const double loss = bce_loss_grad(c.logits, labels, mask, d3);

  kernels::gemm_tn(c.h2, d3, g.w3);
  g.b3 = column_sums(d3);
  Matrix dh2, dz2;
  kernels::gemm_nt(d3, model.output.weight, {}, dh2);
  activation_backward(dh2, c.z2, c.keep2, model.theta, dz2);

  kernels::gemm_tn(c.h1, dz2, g.w2);
  g.b2 = column_sums(dz2);
  Matrix dh1, dz1;
  kernels::gemm_nt(dz2, model.hidden2.weight, {}, dh1);
  activation_backward(dh1, c.z1, c.keep1, model.theta, dz1);

  kernels::gemm_tn(x, dz1, g.w1);
  g.b1 = column_sums(dz1);
  return loss;
}

void TrainConfig::validate() const {
  if (!(lr_max > 0) || !(weight_decay >= 0) || epochs == 0 || patience == 0 || batch_size == 0 ||
      h1 == 0 || h2 == 0) {
    throw ConfigError("classifier config: lr, epochs, patience, batch size and widths must be positive");
  }
  if (patience > epochs) throw ConfigError("classifier config: patience exceeds epochs");
}

namespace {

// AdamW state for one parameter block.
struct AdamSlot {
  std::vector<double> m, v;
  explicit AdamSlot(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& p, const std::vector<double>& g, double lr, double wd,
            const TrainConfig& c, std::size_t t) {
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= lr * wd * p[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
    }
  }
};

Matrix gather_rows(const Matrix& src, const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t end) {
  Matrix out(end - begin, src.cols());
  for (std::size_t r = begin; r < end; ++r) {
    auto s = src.row(order[r]);
    std::copy(s.begin(), s.end(), out.row(r - begin).begin());
  }
  return out;
}

double eval_loss(const ClassifierModel& m, const Matrix& x, const Matrix& y, const Matrix& mask) {
  Matrix logits;
  forward_batch(m, x, Mode::eval, nullptr, logits, nullptr);
  return bce_loss(logits, y, mask);
}

}  // namespace

TrainResult train_classifier(const Matrix& train_x, const Matrix& train_y, const Matrix& train_mask,
                             const Matrix& val_x, const Matrix& val_y, const Matrix& val_mask,
                             const TrainConfig& config) {
  config.validate();
  if (train_x.rows() == 0 || val_x.rows() == 0) {
    throw ConfigError("train_classifier: train and val splits must be non-empty");
  }
  if (train_y.rows() != train_x.rows() || val_y.rows() != val_x.rows() ||
      train_y.cols() != val_y.cols() || train_x.cols() != val_x.cols()) {
    throw ConfigError("train_classifier: inputs and labels are not aligned");
  }

  TrainResult result;
  ClassifierModel model = ClassifierModel::init(train_x.cols(), config.h1, config.h2,
                                                train_y.cols(), config.theta, config.dropout,
                                                config.seed);
  Rng rng(derive_seed(config.seed, 0x7A1B));

  AdamSlot s_w1(model.hidden1.weight.size()), s_b1(model.hidden1.bias.size());
  AdamSlot s_w2(model.hidden2.weight.size()), s_b2(model.hidden2.bias.size());
  AdamSlot s_w3(model.output.weight.size()), s_b3(model.output.bias.size());

  const std::size_t n = train_x.rows();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  std::size_t step = 0;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  ClassifierModel best = model;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  Gradients g;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < n; b += config.batch_size) {
      const std::size_t e = std::min(b + config.batch_size, n);
      const Matrix bx = gather_rows(train_x, order, b, e);
      const Matrix by = gather_rows(train_y, order, b, e);
      const Matrix bm = gather_rows(train_mask, order, b, e);
      double loss;
      try {
        loss = loss_and_gradients(model, bx, by, bm, Mode::train, &rng, g);
      } catch (const ConfigError&) {
        continue;  // batch with every label masked
      }
      if (!std::isfinite(loss)) {
        throw NumericError("classifier training diverged in epoch " + std::to_string(epoch) +
                           "; last finite epoch " + std::to_string(epoch - 1));
      }
      epoch_loss += loss * static_cast<double>(e - b);
      const double lr = cosine_lr(step, total_steps, config.lr_max);
      ++step;
      s_w1.step(model.hidden1.weight.data(), g.w1.data(), lr, config.weight_decay, config, step);
      s_b1.step(model.hidden1.bias, g.b1, lr, config.weight_decay, config, step);
      s_w2.step(model.hidden2.weight.data(), g.w2.data(), lr, config.weight_decay, config, step);
      s_b2.step(model.hidden2.bias, g.b2, lr, config.weight_decay, config, step);
      s_w3.step(model.output.weight.data(), g.w3.data(), lr, config.weight_decay, config, step);
      s_b3.step(model.output.bias, g.b3, lr, config.weight_decay, config, step);
    }
    const double val = eval_loss(model, val_x, val_y, val_mask);
    if (!std::isfinite(val)) {
      throw NumericError("classifier validation loss is non-finite in epoch " +
                         std::to_string(epoch) + "; last finite epoch " + std::to_string(epoch - 1));
    }
    result.history.epochs.push_back({epoch, epoch_loss / static_cast<double>(n), val});
    if (val < best_val) {
      best_val = val;
      best = model;
      result.history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      result.history.stopped_early = epoch < config.epochs;
      break;
    }
  }
  result.history.best_val_loss = best_val;
  result.model = std::move(best);
  return result;
}

TrainResult train_classifier(const embedstore::Dataset& dataset, const TrainConfig& config) {
  using embedstore::Split;
  const auto tr = dataset.indices(Split::train);
  const auto va = dataset.indices(Split::val);
  if (tr.empty() || va.empty()) {
    throw PrerequisiteError("train_classifier needs non-empty train and val splits", "split");
  }
  Matrix ty, tm, vy, vm;
  dataset.label_matrix(tr, config.unknown_policy, ty, tm);
  dataset.label_matrix(va, config.unknown_policy, vy, vm);
  return train_classifier(dataset.image_inputs(tr), ty, tm, dataset.image_inputs(va), vy, vm,
                          config);
}

Matrix extract_penultimate(const ClassifierModel& model, const Matrix& x) {
  Matrix logits, pen;
  forward_batch(model, x, Mode::eval, nullptr, logits, &pen);
  return pen;
}

Matrix extract_logits(const ClassifierModel& model, const Matrix& x) {
  Matrix logits;
  forward_batch(model, x, Mode::eval, nullptr, logits, nullptr);
  return logits;
}

double mean_label_accuracy(const Matrix& logits, const Matrix& labels, const Matrix& mask) {
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l < labels.cols(); ++l) {
    double correct = 0.0, count = 0.0;
    for (std::size_t i = 0; i < labels.rows(); ++i) {
      if (mask(i, l) == 0.0) continue;
      const bool pred = logits(i, l) > 0.0;
      correct += pred == (labels(i, l) > 0.5) ? 1.0 : 0.0;
      count += 1.0;
    }
    if (count > 0) {
      acc += correct / count;
      ++used;
    }
  }
  return used == 0 ? 0.0 : acc / static_cast<double>(used);
}

json history_to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  }
  return {{"epochs", epochs},
          {"best_epoch", h.best_epoch},
          {"best_val_loss", h.best_val_loss},
          {"stopped_early", h.stopped_early}};
}

namespace {
Matrix as_row(const std::vector<double>& v) {
  Matrix m(1, v.size());
  std::copy(v.begin(), v.end(), m.row(0).begin());
  return m;
}
std::vector<double> from_row(const Matrix& m) { return m.data(); }
}  // namespace

void save_model(const std::filesystem::path& stem, const ClassifierModel& model,
                const json& metadata) {
  TensorFile f;
  f.tensors["hidden1.weight"] = model.hidden1.weight;
  f.tensors["hidden1.bias"] = as_row(model.hidden1.bias);
  f.tensors["hidden2.weight"] = model.hidden2.weight;
  f.tensors["hidden2.bias"] = as_row(model.hidden2.bias);
  f.tensors["output.weight"] = model.output.weight;
  f.tensors["output.bias"] = as_row(model.output.bias);
  auto bin = stem;
  bin += ".bin";
  write_tensor_file(bin, f);
  json meta = metadata;
  meta["format_version"] = 1;
  meta["kind"] = "classifier";
  meta["d_img"] = model.input_dim();
  meta["h1"] = model.hidden1.weight.cols();
  meta["h2"] = model.penultimate_dim();
  meta["num_labels"] = model.num_labels();
  meta["theta"] = model.theta;
  meta["dropout"] = model.dropout;
  auto js = stem;
  js += ".json";
  binio::write_atomic(js, meta.dump(2) + "\n");
}

ClassifierModel load_model(const std::filesystem::path& stem) {
  auto bin = stem;
  bin += ".bin";
  auto js = stem;
  js += ".json";
  if (!std::filesystem::exists(bin) || !std::filesystem::exists(js)) {
    throw PrerequisiteError("no classifier at " + stem.string(), "train-classifier");
  }
  const auto f = read_tensor_file(bin);
  const auto meta = json::parse(binio::read_all(js));
  ClassifierModel m;
  m.hidden1 = {f.at("hidden1.weight"), from_row(f.at("hidden1.bias"))};
  m.hidden2 = {f.at("hidden2.weight"), from_row(f.at("hidden2.bias"))};
  m.output = {f.at("output.weight"), from_row(f.at("output.bias"))};
  m.theta = meta.at("theta").get<double>();
  m.dropout = meta.at("dropout").get<double>();
  m.validate();
  return m;
}

}  // namespace sparsepat::mlpcls
