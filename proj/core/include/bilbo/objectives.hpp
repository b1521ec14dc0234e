#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bilbo/autodiff.hpp"
#include "bilbo/gaussian.hpp"
#include "bilbo/rng.hpp"

namespace bilbo {

enum class ObjectiveMode { ElboLearnedSigma, ElboConstSigma, Bilbo, BilboBaggins };

/// CLI spelling: elbo-learned, elbo-const, bilbo, bilbo-baggins.
std::string_view to_string(ObjectiveMode mode);
std::optional<ObjectiveMode> parse_objective_mode(std::string_view name);

/// Which bound is optimised and with which constants.
struct ObjectiveSpec {
  ObjectiveMode mode = ObjectiveMode::Bilbo;
  /// Constant posterior variance (diagonal); unused by ElboLearnedSigma.
  Eigen::VectorXd sigma_const;
  LikelihoodSpec likelihood;
  /// Reparameterised draws per example.
  int mc_samples = 1;

  void validate() const;
};

/// Batch second moment M_B = mean(mu * mu) and the floating prior S^2 = Sigma + M_B.
struct BatchMoments {
  Eigen::VectorXd m_b;
  Eigen::VectorXd s2;
};

/// Optimal diagonal prior: mean over examples of (var + mu * mu).
Eigen::VectorXd optimal_prior(std::span<const DiagGaussian> posteriors);

BatchMoments floating_prior(const Eigen::VectorXd& m_b, const Eigen::VectorXd& sigma_const);

/// M_B from a B x n matrix of posterior means, then the floating prior.
BatchMoments batch_moments(const Eigen::Ref<const RowMatrix>& batch_mu,
                           const Eigen::VectorXd& sigma_const);

/// Lower bound on the BAGGINS isotropic likelihood variance.
inline constexpr double kBagginsFloor = 1e-12;

struct BagginsVariance {
  double t = 0.0;
  bool floored = false;
};

/// Isotropic likelihood variance t = tau |x - nu|^2 / tr(Sigma^-1 S^2), floored.
BagginsVariance baggins_variance(const Eigen::VectorXd& x, const Eigen::VectorXd& decoded_mean,
                                 const Eigen::VectorXd& sigma_const, const Eigen::VectorXd& s2,
                                 double tau);

/// Decoder callback: latent batch (B x n) to likelihood parameters.
using DecodeFn = std::function<Decoded(Var z)>;

/// Encoder output for a batch. `var` is present only with learned variances.
struct Encoded {
  Var mu;
  std::optional<Var> var;
};

/// A bound evaluated on a batch, with the pieces the training log reports.
struct ObjectiveTerms {
  /// Batch mean of the bound (maximised).
  Var value;
  /// Batch mean of the information/KL cost (value = loglik - kl).
  Var kl;
  /// Batch mean of the expected log-likelihood term.
  Var loglik;
  /// Prior variance S^2 in force for this batch.
  Eigen::VectorXd s2;
  /// Per draw BAGGINS variances (empty for other likelihoods).
  std::vector<double> baggins_t;
  /// Per element learned likelihood variances, GaussianLearned only.
  std::vector<double> likelihood_var;
  ClampStats clamps;
};

/// Differentiable floating prior Sigma + column_means(mu^2), 1 x n.
Var floating_prior(Var mu, const Eigen::VectorXd& sigma_const);

/// Gaussian ELBO: -KL(q || N(0, prior_var)) + mean_k log p(x | z_k).
/// `var` is B x n (learned) or 1 x n (constant); `prior_var` is 1 x n.
ObjectiveTerms elbo(Var x, Var mu, Var var, Var prior_var, const DecodeFn& decode,
                    const ObjectiveSpec& spec, Rng& rng);

/// Batch Information Lower Bound with M_B taken from `mu`; gradients reach
/// the encoder means through M_B.
ObjectiveTerms bilbo(Var x, Var mu, const Eigen::VectorXd& sigma_const, const DecodeFn& decode,
                     const LikelihoodSpec& likelihood, int mc_samples, Rng& rng);

/// Fused BILBO with BAGGINS likelihood variances.
ObjectiveTerms bilbo_baggins(Var x, Var mu, const Eigen::VectorXd& sigma_const,
                             const DecodeFn& decode, double tau, int mc_samples, Rng& rng);

/// Routes a batch to the bound named by spec.mode. ElboLearnedSigma uses the
/// encoder variances and a standard normal prior; the constant-variance modes
/// use spec.sigma_const with the floating prior.
ObjectiveTerms objective_value(Var x, const Encoded& encoded, const DecodeFn& decode,
                               const ObjectiveSpec& spec, Rng& rng);

/// Single-example ELBO on plain vectors.
double elbo(const Eigen::VectorXd& x, const DiagGaussian& q, const Eigen::VectorXd& prior_var,
            const DecodeFn& decode, const ObjectiveSpec& spec, Rng& rng);

}  // namespace bilbo
