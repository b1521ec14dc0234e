#include "bilbo/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>

#include <zlib.h>

#include "bilbo/report.hpp"

namespace bilbo {

namespace {

constexpr char kMagic[4] = {'B', 'V', 'A', 'E'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::size_t kEvalChunk = 1000;

Tensor as_row(const Eigen::VectorXd& v) {
  return Tensor::from_eigen(RowMatrix(v.transpose()));
}

Var affine(Var h, const std::vector<Var>& p, const DenseLayer& layer) {
  return add_rowwise(matmul(h, p[layer.weight]), p[layer.bias]);
}

RowMatrix affine(const RowMatrix& h, const std::vector<Tensor>& p, const DenseLayer& layer) {
  RowMatrix out = h * p[layer.weight].mat();
  out.rowwise() += p[layer.bias].mat().row(0);
  return out;
}

RowMatrix softplus_of(const RowMatrix& a) {
  return a.unaryExpr([](double v) { return softplus(v); });
}

bool needs_batch_moments(ObjectiveMode mode) { return mode != ObjectiveMode::ElboLearnedSigma; }

// Little-endian byte sink/source for checkpoints.
struct Writer {
  std::vector<std::uint8_t> bytes;
  template <class T>
  void put(T v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
};

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  template <class T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw ParseError("checkpoint: truncated", pos);
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

}  // namespace

void ModelSpec::validate() const {
  if (data_dim == 0 || latent_dim == 0) throw ContractError("ModelSpec: dims must be positive");
  if (hidden_layers > 0 && hidden_units == 0) {
    throw ContractError("ModelSpec: hidden layers need hidden_units > 0");
  }
}

ModelSpec ModelSpec::for_objective(std::size_t data_dim, std::size_t latent_dim,
                                   const ObjectiveSpec& objective) {
  ModelSpec spec;
  spec.data_dim = data_dim;
  spec.latent_dim = latent_dim;
  spec.encoder_var_head = objective.mode == ObjectiveMode::ElboLearnedSigma;
  spec.decoder_std_head = objective.likelihood.kind == LikelihoodKind::GaussianLearned;
  return spec;
}

MlpVae::MlpVae(const ModelSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  const std::size_t width = spec_.hidden_units;
  std::size_t in = spec_.data_dim;
  for (std::size_t l = 0; l < spec_.hidden_layers; ++l) {
    encoder_.push_back(add_layer(in, width, rng));
    in = width;
  }
  enc_mean_ = add_layer(in, spec_.latent_dim, rng);
  if (spec_.encoder_var_head) enc_var_ = add_layer(in, spec_.latent_dim, rng);

  in = spec_.latent_dim;
  for (std::size_t l = 0; l < spec_.hidden_layers; ++l) {
    decoder_.push_back(add_layer(in, width, rng));
    in = width;
  }
  dec_mean_ = add_layer(in, spec_.data_dim, rng);
  if (spec_.decoder_std_head) dec_std_ = add_layer(in, spec_.data_dim, rng);
  prior_var_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(spec_.latent_dim));
}

DenseLayer MlpVae::add_layer(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  Tensor w = Tensor::matrix(in, out);
  for (double& v : w.storage()) v = rng.uniform(-bound, bound);
  DenseLayer layer{params_.size(), params_.size() + 1};
  params_.push_back(std::move(w));
  params_.push_back(Tensor::matrix(1, out));
  return layer;
}

std::size_t MlpVae::parameter_count() const {
  std::size_t total = 0;
  for (const Tensor& p : params_) total += p.size();
  return total;
}

void MlpVae::set_latent_scale(double c) {
  if (!(c > 0.0) || !std::isfinite(c)) throw ContractError("set_latent_scale: c must be > 0");
  latent_scale_ = c;
}

std::vector<Var> MlpVae::bind(Tape& tape, bool trainable) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const Tensor& p : params_) out.push_back(trainable ? tape.parameter(p) : tape.constant(p));
  return out;
}

Encoded MlpVae::encode(const std::vector<Var>& p, Var x) const {
  Var h = x;
  for (const DenseLayer& layer : encoder_) h = relu(affine(h, p, layer));
  Encoded out;
  out.mu = affine(h, p, enc_mean_);
  if (latent_scale_ != 1.0) out.mu = scale(out.mu, latent_scale_);
  if (spec_.encoder_var_head) {
    Var var = square(softplus(affine(h, p, enc_var_)));
    if (latent_scale_ != 1.0) var = scale(var, latent_scale_ * latent_scale_);
    out.var = clamp_min(var, kMinVariance);
  }
  return out;
}

Decoded MlpVae::decode(const std::vector<Var>& p, Var z) const {
  Var h = latent_scale_ != 1.0 ? scale(z, 1.0 / latent_scale_) : z;
  for (const DenseLayer& layer : decoder_) h = relu(affine(h, p, layer));
  Decoded out;
  out.mean = affine(h, p, dec_mean_);
  if (spec_.decoder_std_head) out.stddev = softplus(affine(h, p, dec_std_));
  return out;
}

namespace {

RowMatrix encoder_trunk(const MlpVae& model, const RowMatrix& x) {
  RowMatrix h = x;
  for (const DenseLayer& layer : model.encoder_layers()) {
    h = affine(h, model.params(), layer).cwiseMax(0.0);
  }
  return h;
}

}  // namespace

Eigen::VectorXd MlpVae::encode_mean(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != spec_.data_dim) {
    throw DimensionError("encode_mean: x has wrong length");
  }
  const RowMatrix h = encoder_trunk(*this, x.transpose());
  return latent_scale_ * affine(h, params_, enc_mean_).row(0).transpose();
}

Eigen::VectorXd MlpVae::encode_var(const Eigen::VectorXd& x) const {
  if (!spec_.encoder_var_head) throw ContractError("encode_var: model has no variance head");
  if (static_cast<std::size_t>(x.size()) != spec_.data_dim) {
    throw DimensionError("encode_var: x has wrong length");
  }
  const RowMatrix h = encoder_trunk(*this, x.transpose());
  const Eigen::VectorXd sd = softplus_of(affine(h, params_, enc_var_)).row(0).transpose();
  return (latent_scale_ * latent_scale_ * sd.array().square()).max(kMinVariance).matrix();
}

Eigen::VectorXd MlpVae::decode_mean(const Eigen::VectorXd& z) const {
  if (static_cast<std::size_t>(z.size()) != spec_.latent_dim) {
    throw DimensionError("decode_mean: z has wrong length");
  }
  RowMatrix h = z.transpose() / latent_scale_;
  for (const DenseLayer& layer : decoder_) h = affine(h, params_, layer).cwiseMax(0.0);
  return affine(h, params_, dec_mean_).row(0).transpose();
}

StepStatus adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                     AdamState& state, double lr) {
  if (grads.size() != params.size()) throw DimensionError("adam_step: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i], grads[i], "adam_step");
    if (!grads[i].all_finite()) return StepStatus::NonFiniteGradient;
  }
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.push_back(Tensor::matrix(p.rows(), p.cols()));
      state.v.push_back(Tensor::matrix(p.rows(), p.cols()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].storage().data();
    auto m = state.m[i].storage().data();
    auto v = state.v[i].storage().data();
    const auto g = grads[i].data();
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.epsilon);
    }
  }
  return StepStatus::Applied;
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double f = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.storage()) v *= f;
    }
  }
  return norm;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ContractError("TrainConfig: batch_size must be >= 2");
  if (epochs < 1) throw ContractError("TrainConfig: epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning_rate must be > 0");
  if (latent_dim < 1) throw ContractError("TrainConfig: latent_dim must be >= 1");
  if (eval_every < 1) throw ContractError("TrainConfig: eval_every must be >= 1");
  if (!(clip_norm > 0.0)) throw ContractError("TrainConfig: clip_norm must be > 0");
  objective.validate();
}

TrainResult train(const Dataset& data, const TrainConfig& config) {
  config.validate();
  data.validate();
  ModelSpec spec = ModelSpec::for_objective(data.dim(), config.latent_dim, config.objective);
  spec.hidden_units = config.hidden_units;
  spec.hidden_layers = config.hidden_layers;
  Rng init = Rng(config.seed).split(0);
  return train(data, config, MlpVae(spec, init));
}

TrainResult train(const Dataset& data, const TrainConfig& config, MlpVae model) {
  config.validate();
  data.validate();
  const ObjectiveSpec& objective = config.objective;
  const ModelSpec& spec = model.spec();
  if (spec.data_dim != data.dim()) throw DimensionError("train: model and data dims differ");
  if (objective.sigma_const.size() != 0 &&
      static_cast<std::size_t>(objective.sigma_const.size()) != spec.latent_dim) {
    throw DimensionError("train: sigma_const length differs from the latent dim");
  }
  if (spec.encoder_var_head != (objective.mode == ObjectiveMode::ElboLearnedSigma)) {
    throw ContractError("train: encoder variance head must match the objective mode");
  }
  if (objective.mode != ObjectiveMode::ElboLearnedSigma) model.set_sigma_const(objective.sigma_const);

  Rng root(config.seed);
  Rng order_rng = root.split(1);
  Rng noise_rng = root.split(2);

  const std::size_t count = data.size();
  const std::size_t m = data.dim();
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  AdamState adam;
  MetricsLog log;
  std::size_t consecutive_bad = 0;
  const auto xs = data.xs.mat();

  for (std::size_t epoch = 0; epoch < config.epochs && !log.diverged; ++epoch) {
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    std::size_t start = 0;
    while (start < count && !log.diverged) {
      std::size_t end = std::min(start + config.batch_size, count);
      if (needs_batch_moments(objective.mode) && count - end == 1) end = count;
      const std::size_t rows = end - start;
      Tensor batch = Tensor::matrix(rows, m);
      for (std::size_t r = 0; r < rows; ++r) {
        batch.mat().row(static_cast<Eigen::Index>(r)) = xs.row(static_cast<Eigen::Index>(order[start + r]));
      }
      start = end;
      ++log.steps;

      Tape tape;
      const std::vector<Var> p = model.bind(tape, true);
      Var x = tape.constant(std::move(batch));
      const Encoded enc = model.encode(p, x);
      const DecodeFn decode = [&](Var z) { return model.decode(p, z); };
      ObjectiveTerms terms = objective_value(x, enc, decode, objective, noise_rng);
      log.clamps += terms.clamps;
      const double value = terms.value.value().item();

      bool bad = !std::isfinite(value);
      if (!bad) {
        tape.backward(neg(terms.value));
        std::vector<Tensor> grads;
        grads.reserve(p.size());
        for (const Var& v : p) grads.push_back(v.grad());
        const double norm = clip_global_norm(grads, config.clip_norm);
        if (std::isfinite(norm) && norm > config.clip_norm) ++log.clip_events;
        bad = adam_step(model.params(), grads, adam, config.learning_rate) != StepStatus::Applied;
      }
      if (bad) {
        ++log.skipped_steps;
        if (++consecutive_bad >= 2) {
          log.diverged = true;
          std::ostringstream os;
          os << "non-finite loss or gradient on two consecutive steps; step=" << log.steps
             << " epoch=" << epoch << " objective=" << value
             << " kl=" << terms.kl.value().item() << " loglik=" << terms.loglik.value().item()
             << " trS2=" << terms.s2.sum() << " baggins_floors=" << log.clamps.baggins_floors
             << " variance_clamps=" << log.clamps.variance_clamps;
          log.diagnostic = os.str();
        }
      } else {
        consecutive_bad = 0;
      }

      if (log.steps % config.eval_every == 0) {
        MetricsRow row;
        row.step = log.steps;
        row.objective = value;
        row.kl_term = terms.kl.value().item();
        row.loglik_term = terms.loglik.value().item();
        row.tr_s2 = terms.s2.sum();
        row.tr_mb = enc.mu.value().mat().array().square().colwise().mean().sum();
        row.baggins_t_median = median(terms.baggins_t);
        row.likelihood_var_median = median(terms.likelihood_var);
        log.rows.push_back(row);
      }
    }
  }
  // Learned-variance runs train against N(0, I); the others float the prior.
  if (objective.mode != ObjectiveMode::ElboLearnedSigma && !log.diverged) {
    model.set_prior_var(dataset_prior(model, data));
  }
  return {std::move(model), std::move(log)};
}

DiagGaussian posterior(const MlpVae& model, const Eigen::VectorXd& x) {
  Eigen::VectorXd mu = model.encode_mean(x);
  if (model.spec().encoder_var_head) return {std::move(mu), model.encode_var(x)};
  if (model.sigma_const().size() != mu.size()) {
    throw ContractError("posterior: model has neither a variance head nor sigma_const");
  }
  return {std::move(mu), model.sigma_const()};
}

Eigen::VectorXd dataset_prior(const MlpVae& model, const Dataset& data) {
  const auto xs = data.xs.mat();
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.spec().latent_dim));
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const DiagGaussian q = posterior(model, xs.row(i).transpose());
    acc += q.var + q.mean.cwiseAbs2();
  }
  return acc / static_cast<double>(xs.rows());
}

double evaluate_bound(const MlpVae& model, const Dataset& data, const ObjectiveSpec& objective,
                      int mc_samples, Rng& rng) {
  if (mc_samples < 1) throw ContractError("evaluate_bound: mc_samples must be >= 1");
  ObjectiveSpec spec = objective;
  spec.mc_samples = mc_samples;
  spec.validate();
  data.validate();
  if (model.spec().data_dim != data.dim()) {
    throw DimensionError("evaluate_bound: model and data dims differ");
  }
  const bool learned = spec.mode == ObjectiveMode::ElboLearnedSigma;
  if (learned != model.spec().encoder_var_head) {
    throw ContractError("evaluate_bound: encoder variance head must match the objective mode");
  }
  const auto xs = data.xs.mat();
  const std::size_t count = data.size();

  // Constant-variance modes: S^2 = Sigma + M with M over the whole dataset.
  Eigen::VectorXd s2;
  if (!learned) {
    Eigen::VectorXd m_all = Eigen::VectorXd::Zero(spec.sigma_const.size());
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      m_all += model.encode_mean(xs.row(i).transpose()).cwiseAbs2();
    }
    s2 = spec.sigma_const + m_all / static_cast<double>(count);
  }

  double total = 0.0;
  for (std::size_t start = 0; start < count; start += kEvalChunk) {
    const std::size_t rows = std::min(kEvalChunk, count - start);
    Tape tape;
    const std::vector<Var> p = model.bind(tape, false);
    Var x = tape.constant(Tensor::from_eigen(
        RowMatrix(xs.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(rows)))));
    const Encoded enc = model.encode(p, x);
    const DecodeFn decode = [&](Var z) { return model.decode(p, z); };
    double value = 0.0;
    if (learned) {
      value = objective_value(x, enc, decode, spec, rng).value.value().item();
    } else {
      Var sigma_row = tape.constant(as_row(spec.sigma_const));
      Var prior = tape.constant(as_row(s2));
      value = elbo(x, enc.mu, sigma_row, prior, decode, spec, rng).value.value().item();
    }
    total += value * static_cast<double>(rows);
  }
  return total / static_cast<double>(count);
}

void save_checkpoint(const MlpVae& model, const std::filesystem::path& path) {
  const ModelSpec& spec = model.spec();
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.data_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.latent_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.hidden_units));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.hidden_layers));
  w.put<std::uint32_t>((spec.encoder_var_head ? 1u : 0u) | (spec.decoder_std_head ? 2u : 0u));
  w.put<double>(model.latent_scale());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.sigma_const().size()));
  for (double v : model.sigma_const()) w.put<double>(v);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.prior_var().size()));
  for (double v : model.prior_var()) w.put<double>(v);
  w.put<std::uint64_t>(model.parameter_count());
  for (const Tensor& p : model.params()) {
    for (double v : p.data()) w.put<double>(v);
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, w.bytes.data(), static_cast<uInt>(w.bytes.size())));
  w.put<std::uint32_t>(crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
}

MlpVae load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ParseError("checkpoint: bad magic, expected BVAE", 0);
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, 4);
  const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  if (crc != stored) throw ParseError("checkpoint: CRC32 mismatch", body);

  Reader r{bytes, 4};
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version), 4);
  }
  ModelSpec spec;
  spec.data_dim = r.get<std::uint32_t>();
  spec.latent_dim = r.get<std::uint32_t>();
  spec.hidden_units = r.get<std::uint32_t>();
  spec.hidden_layers = r.get<std::uint32_t>();
  const auto flags = r.get<std::uint32_t>();
  spec.encoder_var_head = flags & 1u;
  spec.decoder_std_head = flags & 2u;
  const auto scale_factor = r.get<double>();
  const auto read_vector = [&r]() {
    Eigen::VectorXd v(r.get<std::uint32_t>());
    for (double& e : v) e = r.get<double>();
    return v;
  };
  Eigen::VectorXd sigma = read_vector();
  Eigen::VectorXd prior = read_vector();

  Rng unused(0);
  MlpVae model(spec, unused);
  const std::size_t offset = r.pos;
  if (r.get<std::uint64_t>() != model.parameter_count()) {
    throw ParseError("checkpoint: parameter count does not match the layer sizes", offset);
  }
  for (Tensor& p : model.params_) {
    for (double& v : p.storage()) v = r.get<double>();
  }
  if (r.pos != body) throw ParseError("checkpoint: trailing bytes before checksum", r.pos);
  model.latent_scale_ = scale_factor;
  model.sigma_const_ = std::move(sigma);
  model.prior_var_ = std::move(prior);
  return model;
}

}  // namespace bilbo
