#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "bilbo/gaussian.hpp"
#include "bilbo/report.hpp"
#include "bilbo/rng.hpp"
#include "bilbo/tensor.hpp"

// Closed-form identities of Gaussian VAEs, evaluated without any training.
// These serve as ground truth for the trained models and for each other.
namespace bilbo::theory {

/// A frozen ensemble {x_i, N(mu_i, Sigma_i)} with a prior S^2.
struct TheoryDataset {
  RowMatrix xs;  // N x m
  std::vector<DiagGaussian> posteriors;
  Eigen::VectorXd prior_var;

  Eigen::Index size() const { return xs.rows(); }
  Eigen::Index data_dim() const { return xs.cols(); }
  Eigen::Index latent_dim() const {
    return posteriors.empty() ? 0 : posteriors.front().dim();
  }
  void validate() const;
};

/// Log of the smallest positive double; below it a plain density is zero.
inline constexpr double kLogUnderflow = -745.0;

struct DecoderEstimate {
  Eigen::VectorXd value;
  /// Every posterior density underflowed at z; value is the x of the
  /// Mahalanobis-nearest posterior.
  bool extrapolated = false;
};

struct JacobianEstimate {
  Eigen::MatrixXd value;  // m x n
  bool extrapolated = false;
};

/// Posterior-weighted average of the data, weights N(z; mu_i, Sigma_i)
/// normalised in log space.
DecoderEstimate optimal_decoder(const Eigen::VectorXd& z, const TheoryDataset& ds);

/// d nu / d z = sum_i w_i (nu - x_i)(z - mu_i)^T Sigma_i^-1 / sum_i w_i.
/// Orientation is m x n; the sign follows from differentiating the weights
/// and is confirmed against central differences in the test suite.
JacobianEstimate optimal_decoder_jacobian(const Eigen::VectorXd& z, const TheoryDataset& ds);

/// Central-difference Jacobian of f at z.
Eigen::MatrixXd finite_difference_jacobian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& z,
    double h);

/// Exact log evidence under unit-variance data noise, given the latent code z,
/// decoder Jacobian J (m x n) and residual x - nu(z).
double exact_log_evidence_unit_t(const Eigen::VectorXd& z, const Eigen::VectorXd& prior_var,
                                 const Eigen::MatrixXd& jacobian, const Eigen::VectorXd& residual);

/// Exact log evidence under diagonal Gaussian data noise T.
double exact_log_evidence_gaussian_t(const Eigen::VectorXd& mu, const Eigen::VectorXd& prior_var,
                                     const Eigen::MatrixXd& jacobian,
                                     const Eigen::VectorXd& residual,
                                     const Eigen::VectorXd& noise_var);

/// Noise-free limit (square J): the change-of-variables log density.
double exact_log_evidence_noise_free(const Eigen::VectorXd& mu, const Eigen::VectorXd& prior_var,
                                     const Eigen::MatrixXd& jacobian);

/// H = S^-2 + J^T J.
Eigen::MatrixXd information_matrix(const Eigen::VectorXd& prior_var,
                                   const Eigen::MatrixXd& jacobian);

/// Exact gap 1/2 (tr(H Sigma) - log det(e H Sigma)) for a full SPD Sigma.
double elbo_evidence_gap(const Eigen::VectorXd& prior_var, const Eigen::MatrixXd& jacobian,
                         const Eigen::MatrixXd& sigma);

/// Gap on the diagonal representation: uses diag(H) with diagonal Sigma,
/// 1/2 sum_j (h_j s_j - 1 - log(h_j s_j)).
double elbo_evidence_gap_diag(const Eigen::VectorXd& prior_var, const Eigen::MatrixXd& jacobian,
                              const Eigen::VectorXd& sigma);

/// tr(A Sigma) - log det(e Sigma).
double trace_log_objective(const Eigen::MatrixXd& a, const Eigen::MatrixXd& sigma);

struct TraceLogOptions {
  int steps = 20000;
  int probes = 8;
  double step_size = 0.05;
  /// Optimise a full SPD Sigma; otherwise a diagonal one.
  bool full = true;
};

struct TraceLogResult {
  Eigen::MatrixXd sigma_star;
  /// Objective evaluated exactly at sigma_star.
  double value = 0.0;
  /// Mean probe estimate v^T A v - log det(e Sigma) over the averaging phase.
  double probe_estimate = 0.0;
};

/// Minimises tr(A Sigma) - log det(e Sigma) using only probes v^T A v (and
/// their gradients A v) with v ~ N(0, Sigma). Iterates are averaged over the
/// second half of the run. Throws ContractError unless A is SPD.
TraceLogResult trace_log_min(const Eigen::MatrixXd& a, const TraceLogOptions& options, Rng& rng);

/// Per-example diagonal information h_i = diag(S^-2 + J_i^T J_i) and its
/// ensemble moments.
struct HessianStats {
  std::vector<Eigen::VectorXd> h;
  Eigen::VectorXd mean;
  /// Population variance over the ensemble divided by mean^2, per entry.
  Eigen::VectorXd relative_variance;
};

HessianStats hessian_stats(std::vector<Eigen::VectorXd> diagonals);
HessianStats hessian_stats(const Eigen::VectorXd& prior_var,
                           std::span<const Eigen::MatrixXd> jacobians);

/// 1/4 tr cv^2[H]; needs at least two examples.
double constant_sigma_penalty(const HessianStats& stats);

struct PenaltyCheck {
  double penalty = 0.0;
  /// Ensemble mean of the diagonal gap at Sigma~ = E[H]^-1.
  double direct_gap = 0.0;
  /// Bound on |direct_gap - penalty| from the cubic Taylor remainder.
  double remainder_bound = 0.0;
};

PenaltyCheck penalty_vs_direct_gap(const HessianStats& stats);

/// Probe access to a trained model for stationarity checks.
struct AutoencoderProbe {
  std::function<DiagGaussian(const Eigen::VectorXd& x)> encode;
  std::function<Eigen::VectorXd(const Eigen::VectorXd& z)> decode_mean;
};

struct StationarityReport {
  /// ||mu - S^2 J^T T^-1 (x - nu(mu))|| / ||mu|| per example.
  std::vector<double> mean_residual;
  /// ||Sigma^-1 - (S^-2 + J^T J / T)||_F / ||Sigma^-1||_F per example.
  std::vector<double> precision_residual;
  double mean_residual_median = 0.0;
  double precision_residual_median = 0.0;
  Report summary;
};

/// J is taken by central differences of the decoder at mu with step
/// 1e-4 * max(1, |mu|_inf), independently of the autodiff tape.
StationarityReport stationarity_residuals(const AutoencoderProbe& model,
                                          const Eigen::Ref<const RowMatrix>& xs,
                                          const Eigen::VectorXd& prior_var,
                                          double likelihood_var = 1.0);

using MeanFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& z)>;

/// Monte-Carlo check of the per-example identities
///   d/dmu    E_q[log N(x; nu(z), I)] = -(nu(mu) - x)^T J
///   d/dSigma E_q[log N(x; nu(z), I)] = -1/2 diag(J^T J)
/// with no 1/N population factor. The left sides are central differences of
/// a common-random-number estimator; J is a central difference at mu.
struct GradientIdentityReport {
  Eigen::VectorXd dmu_mc, dmu_se, dmu_identity;
  Eigen::VectorXd dsigma_mc, dsigma_se, dsigma_identity;

  /// Largest |mc - identity| / se over all components.
  double max_standard_score() const;
  /// ||mc - identity|| over mean and variance components together.
  double discrepancy() const;
};

GradientIdentityReport mc_gradient_identities(const Eigen::VectorXd& x, const DiagGaussian& q,
                                              const MeanFn& decoder, std::size_t n_samples,
                                              Rng& rng, double fd_step = 1e-4);

}  // namespace bilbo::theory
