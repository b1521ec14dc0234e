#include "bilbo/objectives.hpp"

#include <cmath>
#include <string>

namespace bilbo {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Tensor as_row(const Eigen::VectorXd& v) {
  Tensor t = Tensor::matrix(1, static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) t[static_cast<std::size_t>(i)] = v[i];
  return t;
}

Eigen::VectorXd row_values(const Var& v) { return v.value().to_vector(); }

void require_sigma(const Eigen::VectorXd& sigma_const, Eigen::Index n, const char* op) {
  if (sigma_const.size() != n) {
    throw DimensionError(std::string(op) + ": sigma_const has " +
                         std::to_string(sigma_const.size()) + " entries, latent dim is " +
                         std::to_string(n));
  }
  if ((sigma_const.array() <= 0.0).any()) {
    throw ContractError(std::string(op) + ": sigma_const must be positive");
  }
}

struct LikelihoodPass {
  Var mean_loglik;
  std::vector<double> baggins_t;
  std::vector<double> likelihood_var;
  ClampStats clamps;
};

// Batch mean over examples of the K-sample average of log p(x | z_k).
// `baggins_trace` is tr(Sigma^-1 S^2), held constant inside T.
LikelihoodPass expected_loglik(Var x, Var mu, Var var, const DecodeFn& decode,
                               const LikelihoodSpec& spec, int mc_samples, Rng& rng,
                               double baggins_trace) {
  LikelihoodPass pass;
  std::optional<Var> total;
  for (int k = 0; k < mc_samples; ++k) {
    Tensor eps = rng.normal_tensor(mu.rows(), mu.cols());
    Var z = sample_reparam(mu, var, eps);
    Decoded dec = decode(z);
    Var ll;
    if (spec.kind == LikelihoodKind::GaussianBaggins) {
      Var sq = row_sums(square(sub(x, dec.mean)));
      std::size_t floors = 0;
      Var t = clamp_min(scale(sq, spec.tau / baggins_trace), kBagginsFloor, &floors);
      pass.clamps.baggins_floors += floors;
      const auto tv = t.value().data();
      pass.baggins_t.insert(pass.baggins_t.end(), tv.begin(), tv.end());
      ll = isotropic_gaussian_log_likelihood(x, dec.mean, t);
    } else {
      ll = log_likelihood(x, dec, spec, &pass.clamps);
      if (dec.stddev) {
        for (double s : dec.stddev->value().data()) {
          pass.likelihood_var.push_back(std::max(s * s, kMinVariance));
        }
      }
    }
    Var m = mean(ll);
    total = total ? add(*total, m) : m;
  }
  pass.mean_loglik = scale(*total, 1.0 / mc_samples);
  return pass;
}

ObjectiveTerms finish(Var kl, LikelihoodPass pass, Eigen::VectorXd s2) {
  ObjectiveTerms terms;
  terms.kl = kl;
  terms.loglik = pass.mean_loglik;
  terms.value = sub(pass.mean_loglik, kl);
  terms.s2 = std::move(s2);
  terms.baggins_t = std::move(pass.baggins_t);
  terms.likelihood_var = std::move(pass.likelihood_var);
  terms.clamps = pass.clamps;
  return terms;
}

}  // namespace

std::string_view to_string(ObjectiveMode mode) {
  switch (mode) {
    case ObjectiveMode::ElboLearnedSigma: return "elbo-learned";
    case ObjectiveMode::ElboConstSigma: return "elbo-const";
    case ObjectiveMode::Bilbo: return "bilbo";
    case ObjectiveMode::BilboBaggins: return "bilbo-baggins";
  }
  return "unknown";
}

std::optional<ObjectiveMode> parse_objective_mode(std::string_view name) {
  for (auto mode : {ObjectiveMode::ElboLearnedSigma, ObjectiveMode::ElboConstSigma,
                    ObjectiveMode::Bilbo, ObjectiveMode::BilboBaggins}) {
    if (to_string(mode) == name) return mode;
  }
  return std::nullopt;
}

void ObjectiveSpec::validate() const {
  switch (mode) {
    case ObjectiveMode::ElboLearnedSigma:
    case ObjectiveMode::ElboConstSigma:
    case ObjectiveMode::Bilbo:
    case ObjectiveMode::BilboBaggins:
      break;
    default:
      throw ContractError("ObjectiveSpec: unknown mode " + std::to_string(static_cast<int>(mode)));
  }
  if (mc_samples < 1) throw ContractError("ObjectiveSpec: mc_samples must be >= 1");
  likelihood.validate();
  if (mode != ObjectiveMode::ElboLearnedSigma) {
    if (sigma_const.size() == 0 || (sigma_const.array() <= 0.0).any()) {
      throw ContractError("ObjectiveSpec: sigma_const must be non-empty and positive");
    }
  }
  if (mode == ObjectiveMode::BilboBaggins &&
      likelihood.kind != LikelihoodKind::GaussianBaggins) {
    throw ContractError("ObjectiveSpec: bilbo-baggins requires the GaussianBaggins likelihood");
  }
  if (likelihood.kind == LikelihoodKind::GaussianBaggins && sigma_const.size() == 0) {
    throw ContractError("ObjectiveSpec: GaussianBaggins needs sigma_const for tr(Sigma^-1 S^2)");
  }
}

Eigen::VectorXd optimal_prior(std::span<const DiagGaussian> posteriors) {
  if (posteriors.empty()) throw ContractError("optimal_prior: empty posterior list");
  const Eigen::Index n = posteriors.front().dim();
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
  for (const DiagGaussian& q : posteriors) {
    q.validate();
    if (q.dim() != n) throw DimensionError("optimal_prior: posteriors differ in dimension");
    acc += q.var + q.mean.cwiseProduct(q.mean);
  }
  return acc / static_cast<double>(posteriors.size());
}

BatchMoments floating_prior(const Eigen::VectorXd& m_b, const Eigen::VectorXd& sigma_const) {
  if (m_b.size() != sigma_const.size()) throw DimensionError("floating_prior: length mismatch");
  if ((m_b.array() < 0.0).any()) throw ContractError("floating_prior: m_b must be >= 0");
  if ((sigma_const.array() <= 0.0).any()) {
    throw ContractError("floating_prior: sigma_const must be > 0");
  }
  return {m_b, sigma_const + m_b};
}

BatchMoments batch_moments(const Eigen::Ref<const RowMatrix>& batch_mu,
                           const Eigen::VectorXd& sigma_const) {
  if (batch_mu.rows() == 0) throw ContractError("batch_moments: empty batch");
  const Eigen::VectorXd m_b = batch_mu.array().square().colwise().mean().transpose();
  return floating_prior(m_b, sigma_const);
}

BagginsVariance baggins_variance(const Eigen::VectorXd& x, const Eigen::VectorXd& decoded_mean,
                                 const Eigen::VectorXd& sigma_const, const Eigen::VectorXd& s2,
                                 double tau) {
  if (!(tau > 0.0)) throw ContractError("baggins_variance: tau must be > 0");
  if (x.size() != decoded_mean.size() || sigma_const.size() != s2.size()) {
    throw DimensionError("baggins_variance: length mismatch");
  }
  const double trace = (s2.array() / sigma_const.array()).sum();
  if (!(trace > 0.0)) throw ContractError("baggins_variance: tr(Sigma^-1 S^2) must be > 0");
  const double t = tau * (x - decoded_mean).squaredNorm() / trace;
  if (t < kBagginsFloor) return {kBagginsFloor, true};
  return {t, false};
}

Var floating_prior(Var mu, const Eigen::VectorXd& sigma_const) {
  require_sigma(sigma_const, static_cast<Eigen::Index>(mu.cols()), "floating_prior");
  Var m_b = column_means(square(mu));
  return add(m_b, mu.tape().constant(as_row(sigma_const)));
}

ObjectiveTerms elbo(Var x, Var mu, Var var, Var prior_var, const DecodeFn& decode,
                    const ObjectiveSpec& spec, Rng& rng) {
  if (spec.mc_samples < 1) throw ContractError("elbo: mc_samples must be >= 1");
  spec.likelihood.validate();
  const Eigen::VectorXd s2 = row_values(prior_var);
  double trace = 0.0;
  if (spec.likelihood.kind == LikelihoodKind::GaussianBaggins) {
    require_sigma(spec.sigma_const, s2.size(), "elbo");
    trace = (s2.array() / spec.sigma_const.array()).sum();
  }
  Var kl = mean(kl_to_prior(mu, var, prior_var));
  LikelihoodPass pass =
      expected_loglik(x, mu, var, decode, spec.likelihood, spec.mc_samples, rng, trace);
  return finish(kl, std::move(pass), s2);
}

ObjectiveTerms bilbo(Var x, Var mu, const Eigen::VectorXd& sigma_const, const DecodeFn& decode,
                     const LikelihoodSpec& likelihood, int mc_samples, Rng& rng) {
  if (mu.rows() == 0) throw ContractError("bilbo: empty batch");
  if (mc_samples < 1) throw ContractError("bilbo: mc_samples must be >= 1");
  likelihood.validate();
  require_sigma(sigma_const, static_cast<Eigen::Index>(mu.cols()), "bilbo");
  Tape& tape = mu.tape();
  Var sigma_row = tape.constant(as_row(sigma_const));
  Var m_b = column_means(square(mu));
  // -1/2 log det(I + Sigma^-1 M_B) for diagonal inputs.
  Var info = scale(sum(log(shift(div(m_b, sigma_row), 1.0))), 0.5);
  const Eigen::VectorXd s2 = sigma_const + row_values(m_b);
  const double trace = (s2.array() / sigma_const.array()).sum();
  LikelihoodPass pass =
      expected_loglik(x, mu, sigma_row, decode, likelihood, mc_samples, rng, trace);
  return finish(info, std::move(pass), s2);
}

ObjectiveTerms bilbo_baggins(Var x, Var mu, const Eigen::VectorXd& sigma_const,
                             const DecodeFn& decode, double tau, int mc_samples, Rng& rng) {
  if (!(tau > 0.0)) throw ContractError("bilbo_baggins: tau must be > 0");
  if (mu.rows() == 0) throw ContractError("bilbo_baggins: empty batch");
  if (mc_samples < 1) throw ContractError("bilbo_baggins: mc_samples must be >= 1");
  require_sigma(sigma_const, static_cast<Eigen::Index>(mu.cols()), "bilbo_baggins");
  Tape& tape = mu.tape();
  Var sigma_row = tape.constant(as_row(sigma_const));
  Var ratio = shift(div(column_means(square(mu)), sigma_row), 1.0);  // diag(I + Sigma^-1 M_B)
  Var log_det = sum(log(ratio));
  Var trace = sum(ratio);
  const double trace_value = trace.value().item();
  const double m = static_cast<double>(x.cols());

  ObjectiveTerms terms;
  std::optional<Var> noise_total;
  for (int k = 0; k < mc_samples; ++k) {
    Tensor eps = rng.normal_tensor(mu.rows(), mu.cols());
    Var z = sample_reparam(mu, sigma_row, eps);
    Decoded dec = decode(z);
    Var sq = row_sums(square(sub(x, dec.mean)));
    std::size_t floors = 0;
    Var t = clamp_min(scale(sq, tau / trace_value), kBagginsFloor, &floors);
    terms.clamps.baggins_floors += floors;
    const auto tv = t.value().data();
    terms.baggins_t.insert(terms.baggins_t.end(), tv.begin(), tv.end());
    // log det(2 pi T) with T = t I_m
    Var log_det_t = mean(shift(scale(log(t), m), m * kLog2Pi));
    noise_total = noise_total ? add(*noise_total, log_det_t) : log_det_t;
  }
  Var noise = scale(*noise_total, 1.0 / mc_samples);
  terms.value = scale(add(add(log_det, scale(trace, 1.0 / tau)), noise), -0.5);
  terms.kl = scale(log_det, 0.5);
  terms.loglik = add(terms.value, terms.kl);
  terms.s2 = sigma_const + row_values(column_means(square(stop_gradient(mu))));
  return terms;
}

ObjectiveTerms objective_value(Var x, const Encoded& encoded, const DecodeFn& decode,
                               const ObjectiveSpec& spec, Rng& rng) {
  spec.validate();
  Tape& tape = x.tape();
  const std::size_t n = encoded.mu.cols();
  const bool learned = spec.mode == ObjectiveMode::ElboLearnedSigma;
  if (learned != encoded.var.has_value()) {
    throw ContractError("objective_value: encoder variances are present iff mode is elbo-learned");
  }
  switch (spec.mode) {
    case ObjectiveMode::ElboLearnedSigma: {
      Var prior = tape.constant(Tensor::matrix(1, n, 1.0));
      return elbo(x, encoded.mu, *encoded.var, prior, decode, spec, rng);
    }
    case ObjectiveMode::ElboConstSigma: {
      Var sigma_row = tape.constant(as_row(spec.sigma_const));
      Var prior = floating_prior(encoded.mu, spec.sigma_const);
      return elbo(x, encoded.mu, sigma_row, prior, decode, spec, rng);
    }
    case ObjectiveMode::Bilbo:
      return bilbo(x, encoded.mu, spec.sigma_const, decode, spec.likelihood, spec.mc_samples, rng);
    case ObjectiveMode::BilboBaggins:
      return bilbo_baggins(x, encoded.mu, spec.sigma_const, decode, spec.likelihood.tau,
                           spec.mc_samples, rng);
  }
  throw ContractError("objective_value: unknown mode");
}

double elbo(const Eigen::VectorXd& x, const DiagGaussian& q, const Eigen::VectorXd& prior_var,
            const DecodeFn& decode, const ObjectiveSpec& spec, Rng& rng) {
  q.validate();
  if (prior_var.size() != q.dim()) throw DimensionError("elbo: prior length mismatch");
  Tape tape;
  Var xv = tape.constant(as_row(x));
  Var mu = tape.constant(as_row(q.mean));
  Var var = tape.constant(as_row(q.var));
  Var prior = tape.constant(as_row(prior_var));
  return elbo(xv, mu, var, prior, decode, spec, rng).value.value().item();
}

}  // namespace bilbo
