#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "bilbo/autodiff.hpp"
#include "bilbo/rng.hpp"

namespace bilbo {

/// Floor applied where network outputs become variances.
inline constexpr double kMinVariance = 1e-10;

/// Diagonal-covariance Gaussian. Variances, not standard deviations, are
/// stored; a prior N(0, S^2) keeps S^2 in `var`.
struct DiagGaussian {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;

  DiagGaussian() = default;
  DiagGaussian(Eigen::VectorXd mean_, Eigen::VectorXd var_);

  Eigen::Index dim() const { return mean.size(); }
  /// Throws ContractError on length mismatch or non-positive variance.
  void validate() const;
  double log_density(const Eigen::VectorXd& z) const;
};

enum class LikelihoodKind { BernoulliLogits, GaussianFixed, GaussianLearned, GaussianBaggins };

std::string_view to_string(LikelihoodKind kind);

struct LikelihoodSpec {
  LikelihoodKind kind = LikelihoodKind::GaussianFixed;
  /// Isotropic variance T, used by GaussianFixed.
  double fixed_var = 1.0;
  /// Information factor tau, used by GaussianBaggins.
  double tau = 0.0;

  static LikelihoodSpec bernoulli() { return {LikelihoodKind::BernoulliLogits, 1.0, 0.0}; }
  static LikelihoodSpec gaussian_fixed(double t) { return {LikelihoodKind::GaussianFixed, t, 0.0}; }
  static LikelihoodSpec gaussian_learned() { return {LikelihoodKind::GaussianLearned, 1.0, 0.0}; }
  static LikelihoodSpec baggins(double tau) { return {LikelihoodKind::GaussianBaggins, 1.0, tau}; }

  void validate() const;
};

/// Counters for boundary clamps and floors hit while evaluating objectives.
struct ClampStats {
  std::size_t variance_clamps = 0;
  std::size_t baggins_floors = 0;

  ClampStats& operator+=(const ClampStats& o) {
    variance_clamps += o.variance_clamps;
    baggins_floors += o.baggins_floors;
    return *this;
  }
};

/// Likelihood parameters produced by a decoder for a batch of latent codes.
struct Decoded {
  /// B x m means (or Bernoulli logits).
  Var mean;
  /// B x m standard deviations; present only for learned-variance heads.
  std::optional<Var> stddev;
};

/// mu + sqrt(var) * eps with eps ~ N(0, I).
Eigen::VectorXd sample_reparam(const DiagGaussian& q, Rng& rng);

/// Differentiable reparameterised draw for a batch. `mu` is B x n; `var` is
/// B x n or a shared 1 x n row; `eps` is B x n standard normal noise.
Var sample_reparam(Var mu, Var var, const Tensor& eps);

/// KL(q || N(0, diag(prior_var))).
double kl_to_prior(const DiagGaussian& q, const Eigen::VectorXd& prior_var);

/// Per-example KL to a diagonal prior, B x 1. `var` is B x n or 1 x n;
/// `prior_var` is 1 x n and may carry gradients.
Var kl_to_prior(Var mu, Var var, Var prior_var);

/// Exact log p(x | decoded). BernoulliLogits treats `decoded_mean` as logits;
/// GaussianLearned requires `decoded_logstd`. GaussianBaggins needs a
/// per-example variance and is rejected here (see objectives).
double log_likelihood(const Eigen::VectorXd& x, const Eigen::VectorXd& decoded_mean,
                      const LikelihoodSpec& spec,
                      const std::optional<Eigen::VectorXd>& decoded_logstd = std::nullopt);

/// Per-example log-likelihood on the tape, B x 1.
Var log_likelihood(Var x, const Decoded& decoded, const LikelihoodSpec& spec,
                   ClampStats* stats = nullptr);

/// Per-example log N(x; mean, t_b I), B x 1, with t a B x 1 column.
Var isotropic_gaussian_log_likelihood(Var x, Var mean, Var t);

}  // namespace bilbo
