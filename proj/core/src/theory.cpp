#include "bilbo/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace bilbo::theory {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double log_det_spd(const Eigen::MatrixXd& m, const char* op) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    throw ContractError(std::string(op) + ": matrix is not positive definite");
  }
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

void require_jacobian(const Eigen::MatrixXd& j, Eigen::Index n, const char* op) {
  if (j.cols() != n) {
    throw DimensionError(std::string(op) + ": Jacobian has " + std::to_string(j.cols()) +
                         " columns, latent dim is " + std::to_string(n));
  }
}

void require_spd(const Eigen::MatrixXd& a, const char* op) {
  if (a.rows() != a.cols() || a.rows() == 0) {
    throw ContractError(std::string(op) + ": matrix must be square and non-empty");
  }
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ContractError(std::string(op) + ": matrix is not symmetric");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) {
    throw ContractError(std::string(op) + ": matrix is not positive definite");
  }
}

// Streaming mean and variance.
struct Welford {
  Eigen::VectorXd mean;
  Eigen::VectorXd m2;
  std::size_t count = 0;

  explicit Welford(Eigen::Index n) : mean(Eigen::VectorXd::Zero(n)), m2(Eigen::VectorXd::Zero(n)) {}

  void push(const Eigen::VectorXd& v) {
    ++count;
    const Eigen::VectorXd delta = v - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta.cwiseProduct(v - mean);
  }
  Eigen::VectorXd standard_error() const {
    const double c = static_cast<double>(count);
    return (m2 / (c - 1.0) / c).cwiseSqrt();
  }
};

struct LogWeights {
  Eigen::VectorXd lw;
  double max = -std::numeric_limits<double>::infinity();
  Eigen::Index argmax = 0;
};

LogWeights log_weights(const Eigen::VectorXd& z, const TheoryDataset& ds) {
  LogWeights out;
  out.lw.resize(ds.size());
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    out.lw[i] = ds.posteriors[static_cast<std::size_t>(i)].log_density(z);
    if (out.lw[i] > out.max) {
      out.max = out.lw[i];
      out.argmax = i;
    }
  }
  return out;
}

Eigen::Index nearest_posterior(const Eigen::VectorXd& z, const TheoryDataset& ds) {
  Eigen::Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const DiagGaussian& q = ds.posteriors[static_cast<std::size_t>(i)];
    const double d = ((z - q.mean).array().square() / q.var.array()).sum();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

}  // namespace

void TheoryDataset::validate() const {
  if (xs.rows() < 1) throw ContractError("TheoryDataset: needs at least one example");
  if (static_cast<Eigen::Index>(posteriors.size()) != xs.rows()) {
    throw DimensionError("TheoryDataset: one posterior per data row is required");
  }
  const Eigen::Index n = latent_dim();
  for (const DiagGaussian& q : posteriors) {
    q.validate();
    if (q.dim() != n) throw DimensionError("TheoryDataset: posteriors differ in dimension");
  }
  if (prior_var.size() != n) throw DimensionError("TheoryDataset: prior_var length mismatch");
}

DecoderEstimate optimal_decoder(const Eigen::VectorXd& z, const TheoryDataset& ds) {
  if (z.size() != ds.latent_dim()) throw DimensionError("optimal_decoder: z length mismatch");
  const LogWeights w = log_weights(z, ds);
  if (w.max < kLogUnderflow) {
    return {ds.xs.row(nearest_posterior(z, ds)).transpose(), true};
  }
  const Eigen::VectorXd weights = (w.lw.array() - w.max).exp().matrix();
  return {ds.xs.transpose() * weights / weights.sum(), false};
}

JacobianEstimate optimal_decoder_jacobian(const Eigen::VectorXd& z, const TheoryDataset& ds) {
  if (z.size() != ds.latent_dim()) {
    throw DimensionError("optimal_decoder_jacobian: z length mismatch");
  }
  const LogWeights w = log_weights(z, ds);
  if (w.max < kLogUnderflow) {
    return {Eigen::MatrixXd::Zero(ds.data_dim(), ds.latent_dim()), true};
  }
  const Eigen::VectorXd weights = (w.lw.array() - w.max).exp().matrix();
  const double total = weights.sum();
  const Eigen::VectorXd nu = ds.xs.transpose() * weights / total;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(ds.data_dim(), ds.latent_dim());
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const DiagGaussian& q = ds.posteriors[static_cast<std::size_t>(i)];
    const Eigen::VectorXd scaled = ((z - q.mean).array() / q.var.array()).matrix();
    jac.noalias() += weights[i] * (nu - ds.xs.row(i).transpose()) * scaled.transpose();
  }
  return {jac / total, false};
}

Eigen::MatrixXd finite_difference_jacobian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& z,
    double h) {
  Eigen::MatrixXd jac;
  Eigen::VectorXd zp = z;
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    zp[j] = z[j] + h;
    const Eigen::VectorXd up = f(zp);
    zp[j] = z[j] - h;
    const Eigen::VectorXd down = f(zp);
    zp[j] = z[j];
    if (j == 0) jac.resize(up.size(), z.size());
    jac.col(j) = (up - down) / (2.0 * h);
  }
  return jac;
}

Eigen::MatrixXd information_matrix(const Eigen::VectorXd& prior_var,
                                   const Eigen::MatrixXd& jacobian) {
  require_jacobian(jacobian, prior_var.size(), "information_matrix");
  Eigen::MatrixXd h = jacobian.transpose() * jacobian;
  h.diagonal() += prior_var.cwiseInverse();
  return h;
}

double exact_log_evidence_unit_t(const Eigen::VectorXd& z, const Eigen::VectorXd& prior_var,
                                 const Eigen::MatrixXd& jacobian,
                                 const Eigen::VectorXd& residual) {
  require_jacobian(jacobian, prior_var.size(), "exact_log_evidence_unit_t");
  if (z.size() != prior_var.size() || residual.size() != jacobian.rows()) {
    throw DimensionError("exact_log_evidence_unit_t: length mismatch");
  }
  const double m = static_cast<double>(residual.size());
  // det(J^T J S^2 + I) = det(S J^T J S + I) by similarity with S.
  const Eigen::VectorXd s = prior_var.cwiseSqrt();
  Eigen::MatrixXd inner = s.asDiagonal() * (jacobian.transpose() * jacobian) * s.asDiagonal();
  inner.diagonal().array() += 1.0;
  return -0.5 * (m * kLog2Pi + (z.array().square() / prior_var.array()).sum() +
                 residual.squaredNorm() + log_det_spd(inner, "exact_log_evidence_unit_t"));
}

double exact_log_evidence_gaussian_t(const Eigen::VectorXd& mu, const Eigen::VectorXd& prior_var,
                                     const Eigen::MatrixXd& jacobian,
                                     const Eigen::VectorXd& residual,
                                     const Eigen::VectorXd& noise_var) {
  require_jacobian(jacobian, prior_var.size(), "exact_log_evidence_gaussian_t");
  if (mu.size() != prior_var.size() || residual.size() != jacobian.rows() ||
      noise_var.size() != residual.size()) {
    throw DimensionError("exact_log_evidence_gaussian_t: length mismatch");
  }
  if ((noise_var.array() <= 0.0).any()) {
    throw ContractError("exact_log_evidence_gaussian_t: noise variance must be positive");
  }
  const double m = static_cast<double>(residual.size());
  Eigen::MatrixXd cov = jacobian * prior_var.asDiagonal() * jacobian.transpose();
  cov.diagonal() += noise_var;
  return -0.5 * (m * kLog2Pi + (mu.array().square() / prior_var.array()).sum() +
                 (residual.array().square() / noise_var.array()).sum() +
                 log_det_spd(cov, "exact_log_evidence_gaussian_t"));
}

double exact_log_evidence_noise_free(const Eigen::VectorXd& mu, const Eigen::VectorXd& prior_var,
                                     const Eigen::MatrixXd& jacobian) {
  require_jacobian(jacobian, prior_var.size(), "exact_log_evidence_noise_free");
  if (jacobian.rows() != jacobian.cols()) {
    throw ContractError("exact_log_evidence_noise_free: needs a square Jacobian");
  }
  const double m = static_cast<double>(jacobian.rows());
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(jacobian);
  const double log_abs_det_j = lu.matrixLU().diagonal().array().abs().log().sum();
  const double log_det = 2.0 * log_abs_det_j + prior_var.array().log().sum();
  return -0.5 * (m * kLog2Pi + (mu.array().square() / prior_var.array()).sum() + log_det);
}

double elbo_evidence_gap(const Eigen::VectorXd& prior_var, const Eigen::MatrixXd& jacobian,
                         const Eigen::MatrixXd& sigma) {
  const Eigen::MatrixXd h = information_matrix(prior_var, jacobian);
  if (sigma.rows() != h.rows() || sigma.cols() != h.cols()) {
    throw DimensionError("elbo_evidence_gap: Sigma shape mismatch");
  }
  const double n = static_cast<double>(h.rows());
  const double trace = (h * sigma).trace();
  return 0.5 * (trace - n - log_det_spd(h, "elbo_evidence_gap") -
                log_det_spd(sigma, "elbo_evidence_gap"));
}

double elbo_evidence_gap_diag(const Eigen::VectorXd& prior_var, const Eigen::MatrixXd& jacobian,
                              const Eigen::VectorXd& sigma) {
  require_jacobian(jacobian, prior_var.size(), "elbo_evidence_gap_diag");
  if (sigma.size() != prior_var.size()) {
    throw DimensionError("elbo_evidence_gap_diag: Sigma length mismatch");
  }
  if ((sigma.array() <= 0.0).any()) {
    throw ContractError("elbo_evidence_gap_diag: Sigma must be positive");
  }
  const Eigen::ArrayXd h =
      prior_var.array().inverse() + jacobian.colwise().squaredNorm().transpose().array();
  const Eigen::ArrayXd lambda = h * sigma.array();
  return 0.5 * (lambda - 1.0 - lambda.log()).sum();
}

double trace_log_objective(const Eigen::MatrixXd& a, const Eigen::MatrixXd& sigma) {
  const double n = static_cast<double>(a.rows());
  return (a * sigma).trace() - n - log_det_spd(sigma, "trace_log_objective");
}

TraceLogResult trace_log_min(const Eigen::MatrixXd& a, const TraceLogOptions& options, Rng& rng) {
  require_spd(a, "trace_log_min");
  if (options.steps < 2 || options.probes < 1 || !(options.step_size > 0.0)) {
    throw ContractError("trace_log_min: steps >= 2, probes >= 1 and step_size > 0 required");
  }
  const Eigen::Index n = a.rows();
  const double dn = static_cast<double>(n);
  const int burn_in = options.steps / 2;
  // Constant step while burning in, then 1/k decay so the averaged Sigma
  // carries less of the multiplicative-noise bias.
  const auto eta_at = [&](int step) {
    const double k = step < burn_in ? 0.0 : static_cast<double>(step - burn_in);
    return options.step_size / (1.0 + k / 1000.0);
  };

  Eigen::MatrixXd sigma_sum = Eigen::MatrixXd::Zero(n, n);
  double probe_sum = 0.0;
  int averaged = 0;

  if (options.full) {
    // Sigma = L L^T. The update L <- L (I - eta (G - I)) uses G, an unbiased
    // probe estimate of L^T A L, and is fixed exactly where L^T A L = I.
    Eigen::MatrixXd l = Eigen::MatrixXd::Identity(n, n);
    for (int step = 0; step < options.steps; ++step) {
      Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
      double quad = 0.0;
      for (int p = 0; p < options.probes; ++p) {
        const Eigen::VectorXd eps = rng.normal_vector(n);
        const Eigen::VectorXd v = l * eps;
        const Eigen::VectorXd av = a * v;
        quad += v.dot(av);
        g.noalias() += (l.transpose() * av) * eps.transpose();
      }
      g /= options.probes;
      quad /= options.probes;
      const Eigen::MatrixXd sym = 0.5 * (g + g.transpose());
      if (step >= burn_in) {
        const Eigen::MatrixXd sigma = l * l.transpose();
        sigma_sum += sigma;
        probe_sum += quad - dn - log_det_spd(sigma, "trace_log_min");
        ++averaged;
      }
      l = l * (Eigen::MatrixXd::Identity(n, n) - eta_at(step) * (sym - Eigen::MatrixXd::Identity(n, n)));
    }
  } else {
    // Diagonal Sigma; the same multiplicative rule on the variances.
    Eigen::VectorXd s = Eigen::VectorXd::Ones(n);
    for (int step = 0; step < options.steps; ++step) {
      Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
      double quad = 0.0;
      for (int p = 0; p < options.probes; ++p) {
        const Eigen::VectorXd v = (s.array().sqrt() * rng.normal_vector(n).array()).matrix();
        const Eigen::VectorXd av = a * v;
        quad += v.dot(av);
        g += av.cwiseProduct(v);
      }
      g /= options.probes;
      quad /= options.probes;
      if (step >= burn_in) {
        sigma_sum += Eigen::MatrixXd(s.asDiagonal());
        probe_sum += quad - dn - s.array().log().sum();
        ++averaged;
      }
      s = s.cwiseProduct((Eigen::VectorXd::Ones(n) - eta_at(step) * (g - Eigen::VectorXd::Ones(n))));
      s = s.cwiseMax(1e-12);
    }
  }
  TraceLogResult result;
  result.sigma_star = sigma_sum / averaged;
  result.value = trace_log_objective(a, result.sigma_star);
  result.probe_estimate = probe_sum / averaged;
  return result;
}

HessianStats hessian_stats(std::vector<Eigen::VectorXd> diagonals) {
  if (diagonals.empty()) throw ContractError("hessian_stats: empty ensemble");
  const Eigen::Index n = diagonals.front().size();
  HessianStats stats;
  stats.mean = Eigen::VectorXd::Zero(n);
  for (const auto& h : diagonals) {
    if (h.size() != n) throw DimensionError("hessian_stats: inconsistent dimensions");
    stats.mean += h;
  }
  const double count = static_cast<double>(diagonals.size());
  stats.mean /= count;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(n);
  for (const auto& h : diagonals) var += (h - stats.mean).cwiseAbs2();
  var /= count;
  stats.relative_variance = var.cwiseQuotient(stats.mean.cwiseAbs2());
  stats.h = std::move(diagonals);
  return stats;
}

HessianStats hessian_stats(const Eigen::VectorXd& prior_var,
                           std::span<const Eigen::MatrixXd> jacobians) {
  std::vector<Eigen::VectorXd> diagonals;
  diagonals.reserve(jacobians.size());
  for (const Eigen::MatrixXd& j : jacobians) {
    require_jacobian(j, prior_var.size(), "hessian_stats");
    diagonals.push_back(prior_var.cwiseInverse() + j.colwise().squaredNorm().transpose());
  }
  return hessian_stats(std::move(diagonals));
}

double constant_sigma_penalty(const HessianStats& stats) {
  if (stats.h.size() < 2) throw ContractError("constant_sigma_penalty: needs >= 2 examples");
  return 0.25 * stats.relative_variance.sum();
}

PenaltyCheck penalty_vs_direct_gap(const HessianStats& stats) {
  PenaltyCheck check;
  check.penalty = constant_sigma_penalty(stats);
  double gap = 0.0;
  double bound = 0.0;
  for (const Eigen::VectorXd& h : stats.h) {
    const Eigen::ArrayXd lambda = h.array() / stats.mean.array();
    gap += 0.5 * (lambda - 1.0 - lambda.log()).sum();
    const Eigen::ArrayXd lo = lambda.min(1.0);
    bound += 0.5 * ((lambda - 1.0).abs().cube() / (3.0 * lo.cube())).sum();
  }
  const double count = static_cast<double>(stats.h.size());
  check.direct_gap = gap / count;
  check.remainder_bound = bound / count;
  return check;
}

StationarityReport stationarity_residuals(const AutoencoderProbe& model,
                                          const Eigen::Ref<const RowMatrix>& xs,
                                          const Eigen::VectorXd& prior_var,
                                          double likelihood_var) {
  if (!(likelihood_var > 0.0)) throw ContractError("stationarity_residuals: T must be > 0");
  StationarityReport report;
  std::size_t degenerate = 0;
  const Eigen::VectorXd prior_precision = prior_var.cwiseInverse();
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const Eigen::VectorXd x = xs.row(i).transpose();
    const DiagGaussian q = model.encode(x);
    const Eigen::VectorXd nu = model.decode_mean(q.mean);
    const double h = 1e-4 * std::max(1.0, q.mean.cwiseAbs().maxCoeff());
    const Eigen::MatrixXd j = finite_difference_jacobian(model.decode_mean, q.mean, h);

    const Eigen::VectorXd predicted =
        prior_var.cwiseProduct(j.transpose() * (x - nu)) / likelihood_var;
    const double mu_norm = q.mean.norm();
    if (mu_norm > 0.0) {
      report.mean_residual.push_back((q.mean - predicted).norm() / mu_norm);
    } else {
      ++degenerate;
    }

    Eigen::MatrixXd target = j.transpose() * j / likelihood_var;
    target.diagonal() += prior_precision;
    const Eigen::MatrixXd precision = q.var.cwiseInverse().asDiagonal();
    report.precision_residual.push_back((precision - target).norm() / precision.norm());
  }
  report.mean_residual_median = median(report.mean_residual);
  report.precision_residual_median = median(report.precision_residual);
  report.summary["mean_residual"] = summarize(report.mean_residual, degenerate);
  report.summary["precision_residual"] = summarize(report.precision_residual);
  return report;
}

double GradientIdentityReport::max_standard_score() const {
  const Eigen::ArrayXd zmu = (dmu_mc - dmu_identity).array().abs() / dmu_se.array();
  const Eigen::ArrayXd zs = (dsigma_mc - dsigma_identity).array().abs() / dsigma_se.array();
  return std::max(zmu.maxCoeff(), zs.maxCoeff());
}

double GradientIdentityReport::discrepancy() const {
  return std::sqrt((dmu_mc - dmu_identity).squaredNorm() +
                   (dsigma_mc - dsigma_identity).squaredNorm());
}

GradientIdentityReport mc_gradient_identities(const Eigen::VectorXd& x, const DiagGaussian& q,
                                              const MeanFn& decoder, std::size_t n_samples,
                                              Rng& rng, double fd_step) {
  q.validate();
  if (n_samples < 2) throw ContractError("mc_gradient_identities: needs >= 2 samples");
  const Eigen::Index n = q.dim();
  const Eigen::VectorXd nu = decoder(q.mean);
  if (nu.size() != x.size()) throw DimensionError("mc_gradient_identities: decoder output size");
  const double h_mu = fd_step * std::max(1.0, q.mean.cwiseAbs().maxCoeff());
  const Eigen::MatrixXd j = finite_difference_jacobian(decoder, q.mean, h_mu);

  GradientIdentityReport report;
  report.dmu_identity = j.transpose() * (x - nu);
  report.dsigma_identity = -0.5 * j.colwise().squaredNorm().transpose();

  // Only the residual term of log N(x; nu(z), I) depends on z.
  const auto loglik = [&](const Eigen::VectorXd& z) { return -0.5 * (x - decoder(z)).squaredNorm(); };

  Welford mu_acc(n);
  Welford sigma_acc(n);
  Eigen::VectorXd dmu(n);
  Eigen::VectorXd dsigma(n);
  const Eigen::VectorXd sd = q.var.cwiseSqrt();
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Eigen::VectorXd eps = rng.normal_vector(n);
    Eigen::VectorXd z = q.mean + sd.cwiseProduct(eps);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double base = z[k];
      z[k] = base + h_mu;
      const double up = loglik(z);
      z[k] = base - h_mu;
      const double down = loglik(z);
      dmu[k] = (up - down) / (2.0 * h_mu);

      const double h_var = fd_step * q.var[k];
      z[k] = q.mean[k] + std::sqrt(q.var[k] + h_var) * eps[k];
      const double up_s = loglik(z);
      z[k] = q.mean[k] + std::sqrt(q.var[k] - h_var) * eps[k];
      const double down_s = loglik(z);
      dsigma[k] = (up_s - down_s) / (2.0 * h_var);
      z[k] = base;
    }
    mu_acc.push(dmu);
    sigma_acc.push(dsigma);
  }
  report.dmu_mc = mu_acc.mean;
  report.dmu_se = mu_acc.standard_error();
  report.dsigma_mc = sigma_acc.mean;
  report.dsigma_se = sigma_acc.standard_error();
  return report;
}

}  // namespace bilbo::theory
