#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bilbo/autodiff.hpp"
#include "bilbo/data.hpp"
#include "bilbo/gaussian.hpp"
#include "bilbo/objectives.hpp"
#include "bilbo/rng.hpp"
#include "bilbo/tensor.hpp"

namespace bilbo {

/// Layer sizes and optional heads. hidden_layers == 0 gives a linear VAE.
struct ModelSpec {
  std::size_t data_dim = 0;
  std::size_t latent_dim = 0;
  std::size_t hidden_units = 200;
  /// ReLU layers before each head; 3 plus the head makes four dense layers.
  std::size_t hidden_layers = 3;
  /// SoftPlus std head on the encoder (learned posterior variance).
  bool encoder_var_head = false;
  /// SoftPlus std head on the decoder (learned likelihood variance).
  bool decoder_std_head = false;

  void validate() const;
  /// Heads implied by the objective: encoder variances only for
  /// elbo-learned, decoder std only for the GaussianLearned likelihood.
  static ModelSpec for_objective(std::size_t data_dim, std::size_t latent_dim,
                                 const ObjectiveSpec& objective);
};

/// Indices of a dense layer's weight (in x out) and bias (1 x out).
struct DenseLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

/// Encoder/decoder MLP pair with a flat parameter list.
class MlpVae {
 public:
  MlpVae() = default;
  /// Kaiming-uniform weights with bound sqrt(6 / fan_in), zero biases.
  MlpVae(const ModelSpec& spec, Rng& rng);

  const ModelSpec& spec() const { return spec_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::size_t parameter_count() const;

  /// Fixed factor c multiplying encoder outputs (and c^2 the learned
  /// variances) with 1/c applied to decoder inputs. Not trained.
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double c);

  /// Prior variance S^2 used for sampling: ones for learned-variance runs,
  /// the floating prior over the training set otherwise.
  const Eigen::VectorXd& prior_var() const { return prior_var_; }
  void set_prior_var(Eigen::VectorXd s2) { prior_var_ = std::move(s2); }
  /// Constant posterior variance used in training; empty for learned runs.
  const Eigen::VectorXd& sigma_const() const { return sigma_const_; }
  void set_sigma_const(Eigen::VectorXd s) { sigma_const_ = std::move(s); }

  /// Puts every parameter on the tape, as trainable leaves or constants.
  std::vector<Var> bind(Tape& tape, bool trainable) const;
  Encoded encode(const std::vector<Var>& p, Var x) const;
  Decoded decode(const std::vector<Var>& p, Var z) const;

  // Tape-free single-example passes for probes and finite differences.
  Eigen::VectorXd encode_mean(const Eigen::VectorXd& x) const;
  /// Learned posterior variances; requires the encoder variance head.
  Eigen::VectorXd encode_var(const Eigen::VectorXd& x) const;
  Eigen::VectorXd decode_mean(const Eigen::VectorXd& z) const;

  const std::vector<DenseLayer>& encoder_layers() const { return encoder_; }
  const std::vector<DenseLayer>& decoder_layers() const { return decoder_; }
  const DenseLayer& encoder_mean_head() const { return enc_mean_; }

 private:
  DenseLayer add_layer(std::size_t in, std::size_t out, Rng& rng);

  ModelSpec spec_;
  std::vector<Tensor> params_;
  std::vector<DenseLayer> encoder_, decoder_;
  DenseLayer enc_mean_, enc_var_, dec_mean_, dec_std_;
  double latent_scale_ = 1.0;
  Eigen::VectorXd prior_var_;
  Eigen::VectorXd sigma_const_;

  friend MlpVae load_checkpoint(const std::filesystem::path& path);
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> m, v;
};

enum class StepStatus { Applied, NonFiniteGradient };

/// Bias-corrected Adam update. A non-finite gradient leaves parameters and
/// state untouched and is reported. Throws DimensionError on shape mismatch.
StepStatus adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                     AdamState& state, double lr);

/// Scales grads so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 300;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  ObjectiveSpec objective;
  std::size_t latent_dim = 2;
  /// Log every this many steps.
  std::size_t eval_every = 1;
  double clip_norm = 100.0;
  std::size_t hidden_units = 200;
  std::size_t hidden_layers = 3;

  void validate() const;
};

struct MetricsRow {
  std::size_t step = 0;
  double objective = 0.0;
  double kl_term = 0.0;
  double loglik_term = 0.0;
  double tr_s2 = 0.0;
  /// NaN when the likelihood is not BAGGINS.
  double baggins_t_median = 0.0;
  double tr_mb = 0.0;
  /// NaN unless the decoder has a std head.
  double likelihood_var_median = 0.0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;
  std::size_t steps = 0;
  std::size_t clip_events = 0;
  std::size_t skipped_steps = 0;
  ClampStats clamps;
  bool diverged = false;
  std::string diagnostic;
};

struct TrainResult {
  MlpVae model;
  MetricsLog log;
};

/// Shuffled minibatch training. Streams split from the seed: 0 init,
/// 1 data order, 2 objective noise. A final batch of one example is merged
/// into the previous batch. Two consecutive non-finite losses (or gradients)
/// halt training with log.diverged set.
TrainResult train(const Dataset& data, const TrainConfig& config);

/// Same, continuing from an existing model.
TrainResult train(const Dataset& data, const TrainConfig& config, MlpVae model);

/// Mean bound per example over the whole dataset, without gradients. The
/// constant-variance modes take M over the full dataset, so the bound is the
/// ELBO under the optimal floating prior.
double evaluate_bound(const MlpVae& model, const Dataset& data, const ObjectiveSpec& objective,
                      int mc_samples, Rng& rng);

/// Posterior for one example: learned variances or the model's sigma_const.
DiagGaussian posterior(const MlpVae& model, const Eigen::VectorXd& x);

/// Optimal prior over the dataset: mean of var + mu^2.
Eigen::VectorXd dataset_prior(const MlpVae& model, const Dataset& data);

/// Little-endian "BVAE" file with a trailing CRC32.
void save_checkpoint(const MlpVae& model, const std::filesystem::path& path);
/// Throws ParseError on bad magic, version, size or checksum.
MlpVae load_checkpoint(const std::filesystem::path& path);

}  // namespace bilbo
