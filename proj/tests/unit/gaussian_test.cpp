#include <gtest/gtest.h>

#include <cmath>

#include "bilbo/gaussian.hpp"

namespace bilbo {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

TEST(DiagGaussian, RejectsBadVariance) {
  EXPECT_THROW(DiagGaussian(vec({0.0}), vec({0.0})).validate(), ContractError);
  EXPECT_THROW(DiagGaussian(vec({0.0, 1.0}), vec({1.0})).validate(), ContractError);
  EXPECT_NO_THROW(DiagGaussian(vec({0.0}), vec({1e-12})).validate());
}

TEST(DiagGaussian, LogDensityDirect) {
  const DiagGaussian q(vec({1.0, -1.0}), vec({4.0, 0.25}));
  const Eigen::VectorXd z = vec({2.0, 0.0});
  const double expected = -0.5 * (2 * kLog2Pi + std::log(4.0) + std::log(0.25) + 1.0 / 4.0 + 1.0 / 0.25);
  EXPECT_NEAR(q.log_density(z), expected, 1e-14);
}

TEST(SampleReparam, TinyVarianceConcentrates) {
  Rng rng(1);
  const DiagGaussian q(vec({5.0}), vec({1e-12}));
  for (int i = 0; i < 1000; ++i) EXPECT_NEAR(sample_reparam(q, rng)[0], 5.0, 6e-6);
}

TEST(SampleReparam, StandardNormalMean) {
  Rng rng(2);
  const int n = 100000;
  const DiagGaussian q(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3));
  Eigen::VectorXd s = Eigen::VectorXd::Zero(3);
  for (int i = 0; i < n; ++i) s += sample_reparam(q, rng);
  for (Eigen::Index j = 0; j < 3; ++j) EXPECT_LT(std::abs(s[j] / n), 4.0 / std::sqrt(n));
}

TEST(SampleReparam, EmpiricalVariance) {
  Rng rng(3);
  const int n = 100000;
  const DiagGaussian q(vec({1.0, 2.0}), vec({4.0, 9.0}));
  Eigen::VectorXd s = Eigen::VectorXd::Zero(2), s2 = Eigen::VectorXd::Zero(2);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd z = sample_reparam(q, rng);
    s += z;
    s2 += z.cwiseProduct(z);
  }
  const Eigen::VectorXd mean = s / n;
  const Eigen::VectorXd var = s2 / n - mean.cwiseProduct(mean);
  EXPECT_NEAR(var[0] / 4.0, 1.0, 0.05);
  EXPECT_NEAR(var[1] / 9.0, 1.0, 0.05);
}

TEST(SampleReparam, TapeGradientMatchesFiniteDifferences) {
  // f(z) = sum(exp(z) * z) with eps frozen.
  Rng rng(4);
  const Tensor eps = rng.normal_tensor(3, 2);
  const Tensor mu0 = rng.normal_tensor(3, 2);
  const Tensor var0 = Tensor::matrix(1, 2, {0.7, 1.3});
  const auto loss = [&](const Tensor& mu, Tensor* grad) {
    Tape tape;
    const Var m = tape.parameter(mu);
    const Var z = sample_reparam(m, tape.constant(var0), eps);
    const Var l = sum(mul(exp(z), z));
    if (grad) {
      tape.backward(l);
      *grad = m.grad();
    }
    return l.value().item();
  };
  Tensor g;
  loss(mu0, &g);
  for (std::size_t i = 0; i < mu0.size(); ++i) {
    Tensor up = mu0, down = mu0;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double fd = (loss(up, nullptr) - loss(down, nullptr)) / 2e-5;
    EXPECT_NEAR(g[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(KlToPrior, ZeroWhenEqual) {
  const DiagGaussian q(Eigen::VectorXd::Zero(3), vec({0.5, 2.0, 3.0}));
  EXPECT_NEAR(kl_to_prior(q, q.var), 0.0, 1e-15);
}

TEST(KlToPrior, MeanOnly) {
  const DiagGaussian q(vec({1.0, 0.0}), Eigen::VectorXd::Ones(2));
  EXPECT_NEAR(kl_to_prior(q, Eigen::VectorXd::Ones(2)), 0.5, 1e-15);
}

TEST(KlToPrior, MatchesMonteCarlo) {
  const DiagGaussian q(vec({1.0, 2.0}), vec({0.5, 2.0}));
  const DiagGaussian p(Eigen::VectorXd::Zero(2), vec({1.0, 4.0}));
  Rng rng(5);
  const int n = 1000000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd z = sample_reparam(q, rng);
    const double d = q.log_density(z) - p.log_density(z);
    s += d;
    s2 += d * d;
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_LT(std::abs(kl_to_prior(q, p.var) - mean), 3.0 * se);
}

TEST(KlToPrior, NonNegativeOnRandomPosteriors) {
  Rng rng(6);
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(5));
    Eigen::VectorXd mu = rng.normal_vector(n), var(n), prior(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      var[j] = std::exp(rng.uniform(-3.0, 3.0));
      prior[j] = std::exp(rng.uniform(-3.0, 3.0));
    }
    EXPECT_GT(kl_to_prior(DiagGaussian(mu, var), prior), 0.0);
  }
}

TEST(KlToPrior, TapeAgreesWithScalar) {
  Rng rng(7);
  const Tensor mu = rng.normal_tensor(4, 3);
  const Tensor var = Tensor::matrix(1, 3, {0.3, 1.0, 2.5});
  const Tensor prior = Tensor::matrix(1, 3, {1.5, 0.7, 4.0});
  Tape tape;
  const Tensor kl = kl_to_prior(tape.constant(mu), tape.constant(var), tape.constant(prior)).value();
  ASSERT_EQ(kl.size(), 4u);
  for (std::size_t b = 0; b < 4; ++b) {
    const DiagGaussian q(mu.row(b), var.to_vector());
    EXPECT_NEAR(kl[b], kl_to_prior(q, prior.to_vector()), 1e-13);
  }
}

TEST(LogLikelihood, UnitGaussianZeroResidual) {
  const Eigen::VectorXd x = vec({0.3, -2.0});
  EXPECT_NEAR(log_likelihood(x, x, LikelihoodSpec::gaussian_fixed(1.0)), -kLog2Pi, 1e-15);
}

TEST(LogLikelihood, BernoulliUniformLogits) {
  EXPECT_NEAR(log_likelihood(vec({1, 0, 1}), Eigen::VectorXd::Zero(3), LikelihoodSpec::bernoulli()),
              3.0 * std::log(0.5), 1e-15);
}

TEST(LogLikelihood, GaussianFixedVarianceTwo) {
  const double expected = -std::log(4.0 * M_PI) - 0.5;
  EXPECT_NEAR(log_likelihood(vec({1, 1}), vec({0, 0}), LikelihoodSpec::gaussian_fixed(2.0)),
              expected, 1e-14);
}

TEST(LogLikelihood, BernoulliExtremeLogitsStayFinite) {
  const double v = log_likelihood(vec({1, 0}), vec({-800, 800}), LikelihoodSpec::bernoulli());
  EXPECT_NEAR(v, -1600.0, 1e-9);
}

TEST(LogLikelihood, LearnedMatchesDirectDensity) {
  const Eigen::VectorXd x = vec({0.5, -1.0});
  const Eigen::VectorXd mean = vec({0.0, 0.0});
  const Eigen::VectorXd logstd = vec({std::log(0.5), std::log(2.0)});
  const double expected = -0.5 * (2 * kLog2Pi + std::log(0.25) + std::log(4.0) + 0.25 / 0.25 + 1.0 / 4.0);
  EXPECT_NEAR(log_likelihood(x, mean, LikelihoodSpec::gaussian_learned(), logstd), expected, 1e-14);
}

TEST(LogLikelihood, KindArgumentMismatch) {
  const Eigen::VectorXd x = vec({0.5});
  EXPECT_THROW(log_likelihood(x, x, LikelihoodSpec::gaussian_learned()), ContractError);
  EXPECT_THROW(log_likelihood(x, x, LikelihoodSpec::gaussian_fixed(1.0), x), ContractError);
  EXPECT_THROW(log_likelihood(x, x, LikelihoodSpec::baggins(1.0)), ContractError);
  EXPECT_THROW(LikelihoodSpec::gaussian_fixed(0.0).validate(), ContractError);
  EXPECT_THROW(LikelihoodSpec::baggins(-1.0).validate(), ContractError);
}

TEST(LogLikelihood, TapeAgreesWithScalar) {
  Rng rng(8);
  const Tensor x = rng.normal_tensor(3, 4);
  const Tensor mean = rng.normal_tensor(3, 4);
  Tensor sd(mean.shape());
  for (double& v : sd.storage()) v = rng.uniform(0.3, 2.0);
  const std::vector<LikelihoodSpec> specs = {LikelihoodSpec::bernoulli(),
                                             LikelihoodSpec::gaussian_fixed(0.7),
                                             LikelihoodSpec::gaussian_learned()};
  for (const LikelihoodSpec& spec : specs) {
    Tape tape;
    Decoded d{tape.constant(mean), std::nullopt};
    if (spec.kind == LikelihoodKind::GaussianLearned) d.stddev = tape.constant(sd);
    const Tensor ll = log_likelihood(tape.constant(x), d, spec).value();
    for (std::size_t b = 0; b < 3; ++b) {
      std::optional<Eigen::VectorXd> logstd;
      if (d.stddev) logstd = sd.row(b).array().log().matrix();
      EXPECT_NEAR(ll[b], log_likelihood(x.row(b), mean.row(b), spec, logstd), 1e-12)
          << to_string(spec.kind);
    }
  }
}

TEST(IsotropicGaussian, PerExampleVariance) {
  Tape tape;
  const Tensor x = Tensor::matrix(2, 2, {1, 1, 0, 2});
  const Tensor t = Tensor::matrix(2, 1, {2.0, 0.5});
  const Tensor ll = isotropic_gaussian_log_likelihood(tape.constant(x),
                                                      tape.constant(Tensor::matrix(2, 2)),
                                                      tape.constant(t))
                        .value();
  EXPECT_NEAR(ll[0], -std::log(4.0 * M_PI) - 0.5, 1e-14);
  EXPECT_NEAR(ll[1], -std::log(M_PI) - 4.0, 1e-14);
}

}  // namespace
}  // namespace bilbo
