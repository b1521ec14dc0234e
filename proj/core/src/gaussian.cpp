#include "bilbo/gaussian.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace bilbo {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

bool is_shared_row(const Var& v, std::size_t batch) {
  return v.value().rank() == 2 && v.rows() == 1 && batch != 1;
}

}  // namespace

DiagGaussian::DiagGaussian(Eigen::VectorXd mean_, Eigen::VectorXd var_)
    : mean(std::move(mean_)), var(std::move(var_)) {
  validate();
}

void DiagGaussian::validate() const {
  if (mean.size() != var.size()) {
    throw ContractError("DiagGaussian: mean has " + std::to_string(mean.size()) +
                        " entries but var has " + std::to_string(var.size()));
  }
  for (Eigen::Index i = 0; i < var.size(); ++i) {
    if (!(var[i] > 0.0)) throw ContractError("DiagGaussian: variance must be positive");
  }
}

double DiagGaussian::log_density(const Eigen::VectorXd& z) const {
  const Eigen::ArrayXd d = (z - mean).array();
  return -0.5 * (static_cast<double>(dim()) * kLog2Pi + var.array().log().sum() +
                 (d.square() / var.array()).sum());
}

std::string_view to_string(LikelihoodKind kind) {
  switch (kind) {
    case LikelihoodKind::BernoulliLogits: return "bernoulli";
    case LikelihoodKind::GaussianFixed: return "gaussian-fixed";
    case LikelihoodKind::GaussianLearned: return "gaussian-learned";
    case LikelihoodKind::GaussianBaggins: return "gaussian-baggins";
  }
  return "unknown";
}

void LikelihoodSpec::validate() const {
  if (kind == LikelihoodKind::GaussianFixed && !(fixed_var > 0.0)) {
    throw ContractError("GaussianFixed likelihood needs fixed_var > 0");
  }
  if (kind == LikelihoodKind::GaussianBaggins && !(tau > 0.0)) {
    throw ContractError("GaussianBaggins likelihood needs tau > 0");
  }
}

Eigen::VectorXd sample_reparam(const DiagGaussian& q, Rng& rng) {
  q.validate();
  return q.mean + (q.var.array().sqrt() * rng.normal_vector(q.dim()).array()).matrix();
}

Var sample_reparam(Var mu, Var var, const Tensor& eps) {
  Tape& tape = mu.tape();
  Var noise = tape.constant(eps);
  require_same_shape(mu.value(), eps, "sample_reparam");
  Var sd = sqrt(var);
  if (is_shared_row(var, mu.rows())) return add(mu, mul_rowwise(noise, sd));
  return add(mu, mul(sd, noise));
}

double kl_to_prior(const DiagGaussian& q, const Eigen::VectorXd& prior_var) {
  q.validate();
  if (prior_var.size() != q.dim()) throw DimensionError("kl_to_prior: prior length mismatch");
  const Eigen::ArrayXd ratio = q.var.array() / prior_var.array();
  const Eigen::ArrayXd mahal = q.mean.array().square() / prior_var.array();
  return 0.5 * (ratio + mahal - 1.0 - ratio.log()).sum();
}

Var kl_to_prior(Var mu, Var var, Var prior_var) {
  const std::size_t batch = mu.rows();
  Var mahal = row_sums(div_rowwise(square(mu), prior_var));
  if (is_shared_row(var, batch)) {
    Var ratio = div(var, prior_var);
    Var per_dim = sub(shift(ratio, -1.0), log(ratio));
    return scale(add_rowwise(mahal, sum(per_dim)), 0.5);
  }
  Var ratio = div_rowwise(var, prior_var);
  Var per_dim = sub(shift(ratio, -1.0), log(ratio));
  return scale(add(mahal, row_sums(per_dim)), 0.5);
}

double log_likelihood(const Eigen::VectorXd& x, const Eigen::VectorXd& decoded_mean,
                      const LikelihoodSpec& spec,
                      const std::optional<Eigen::VectorXd>& decoded_logstd) {
  spec.validate();
  if (x.size() != decoded_mean.size()) throw DimensionError("log_likelihood: length mismatch");
  const bool wants_scale = spec.kind == LikelihoodKind::GaussianLearned;
  if (wants_scale != decoded_logstd.has_value()) {
    throw ContractError("log_likelihood: decoded_logstd is required exactly for GaussianLearned");
  }
  const double m = static_cast<double>(x.size());
  switch (spec.kind) {
    case LikelihoodKind::BernoulliLogits: {
      double total = 0.0;
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        // x log s(l) + (1 - x) log s(-l) = x l - softplus(l)
        total += x[i] * decoded_mean[i] - softplus(decoded_mean[i]);
      }
      return total;
    }
    case LikelihoodKind::GaussianFixed:
      return -0.5 * (m * (kLog2Pi + std::log(spec.fixed_var)) +
                     (x - decoded_mean).squaredNorm() / spec.fixed_var);
    case LikelihoodKind::GaussianLearned: {
      if (decoded_logstd->size() != x.size()) {
        throw DimensionError("log_likelihood: logstd length mismatch");
      }
      const Eigen::ArrayXd var = (2.0 * decoded_logstd->array()).exp().max(kMinVariance);
      return -0.5 * (m * kLog2Pi + var.log().sum() +
                     ((x - decoded_mean).array().square() / var).sum());
    }
    case LikelihoodKind::GaussianBaggins:
      throw ContractError(
          "log_likelihood: GaussianBaggins variance is per example; use baggins_variance");
  }
  throw ContractError("log_likelihood: unknown likelihood kind");
}

Var log_likelihood(Var x, const Decoded& decoded, const LikelihoodSpec& spec, ClampStats* stats) {
  spec.validate();
  require_same_shape(x.value(), decoded.mean.value(), "log_likelihood");
  const bool wants_scale = spec.kind == LikelihoodKind::GaussianLearned;
  if (wants_scale != decoded.stddev.has_value()) {
    throw ContractError("log_likelihood: decoder scale head present iff GaussianLearned");
  }
  const double m = static_cast<double>(x.cols());
  switch (spec.kind) {
    case LikelihoodKind::BernoulliLogits: {
      Var logits = decoded.mean;
      return row_sums(sub(mul(x, logits), softplus(logits)));
    }
    case LikelihoodKind::GaussianFixed: {
      Var sq = row_sums(square(sub(x, decoded.mean)));
      return shift(scale(sq, -0.5 / spec.fixed_var),
                   -0.5 * m * (kLog2Pi + std::log(spec.fixed_var)));
    }
    case LikelihoodKind::GaussianLearned: {
      std::size_t clamps = 0;
      Var var = clamp_min(square(*decoded.stddev), kMinVariance, &clamps);
      if (stats) stats->variance_clamps += clamps;
      Var per = add(log(var), div(square(sub(x, decoded.mean)), var));
      return shift(scale(row_sums(per), -0.5), -0.5 * m * kLog2Pi);
    }
    case LikelihoodKind::GaussianBaggins:
      throw ContractError(
          "log_likelihood: GaussianBaggins variance is per example; use baggins_variance");
  }
  throw ContractError("log_likelihood: unknown likelihood kind");
}

Var isotropic_gaussian_log_likelihood(Var x, Var mean, Var t) {
  const double m = static_cast<double>(x.cols());
  Var sq = row_sums(square(sub(x, mean)));
  Var mahal = div(sq, t);
  Var logdet = shift(scale(log(t), m), m * kLog2Pi);
  return scale(add(logdet, mahal), -0.5);
}

}  // namespace bilbo
