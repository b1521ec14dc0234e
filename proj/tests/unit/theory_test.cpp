#include <gtest/gtest.h>

#include <cmath>

#include "bilbo/model.hpp"
#include "bilbo/theory.hpp"

namespace bilbo::theory {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Eigen::MatrixXd m(r, c);
  for (double& v : m.reshaped()) v = rng.normal();
  return m;
}

Eigen::MatrixXd random_spd(Eigen::Index n, Rng& rng) {
  const Eigen::MatrixXd g = random_matrix(n, n, rng);
  Eigen::MatrixXd a = g * g.transpose() / static_cast<double>(n);
  a.diagonal().array() += 0.5;
  return 0.5 * (a + a.transpose());
}

TheoryDataset random_dataset(Eigen::Index count, Eigen::Index n, Eigen::Index m, Rng& rng) {
  TheoryDataset ds;
  ds.xs = random_matrix(count, m, rng);
  for (Eigen::Index i = 0; i < count; ++i) {
    Eigen::VectorXd var(n);
    for (double& v : var) v = rng.uniform(0.3, 1.5);
    ds.posteriors.emplace_back(rng.normal_vector(n), var);
  }
  ds.prior_var = Eigen::VectorXd::Ones(n);
  return ds;
}

TEST(OptimalDecoder, SingleIslandReturnsItsData) {
  Rng rng(1);
  const TheoryDataset ds = random_dataset(1, 2, 3, rng);
  for (int k = 0; k < 10; ++k) {
    const DecoderEstimate est = optimal_decoder(3.0 * rng.normal_vector(2), ds);
    EXPECT_LT((est.value - ds.xs.row(0).transpose()).norm(), 1e-15);
  }
}

TEST(OptimalDecoder, SymmetricPairAveragesAtMidpoint) {
  TheoryDataset ds;
  ds.xs = RowMatrix(2, 2);
  ds.xs << 1.0, 4.0, 3.0, -2.0;
  ds.posteriors = {DiagGaussian(vec({1.0}), vec({0.7})), DiagGaussian(vec({-1.0}), vec({0.7}))};
  ds.prior_var = vec({1.0});
  const DecoderEstimate est = optimal_decoder(vec({0.0}), ds);
  EXPECT_NEAR(est.value[0], 2.0, 1e-15);
  EXPECT_NEAR(est.value[1], 1.0, 1e-15);
}

TEST(OptimalDecoder, MatchesNaiveWeightedAverage) {
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    const TheoryDataset ds = random_dataset(3, 2, 3, rng);
    const Eigen::VectorXd z = rng.normal_vector(2);
    Eigen::VectorXd num = Eigen::VectorXd::Zero(3);
    double den = 0.0;
    for (Eigen::Index i = 0; i < 3; ++i) {
      const DiagGaussian& q = ds.posteriors[static_cast<std::size_t>(i)];
      double w = 1.0;
      for (Eigen::Index j = 0; j < 2; ++j) {
        const double d = z[j] - q.mean[j];
        w *= std::exp(-0.5 * d * d / q.var[j]) / std::sqrt(2.0 * M_PI * q.var[j]);
      }
      num += w * ds.xs.row(i).transpose();
      den += w;
    }
    const Eigen::VectorXd direct = num / den;
    EXPECT_LT((optimal_decoder(z, ds).value - direct).norm() / direct.norm(), 1e-12);
  }
}

TEST(OptimalDecoder, StaysInsideConvexHull) {
  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const TheoryDataset ds = random_dataset(6, 2, 3, rng);
    const Eigen::VectorXd v = optimal_decoder(2.0 * rng.normal_vector(2), ds).value;
    const Eigen::VectorXd lo = ds.xs.colwise().minCoeff().transpose();
    const Eigen::VectorXd hi = ds.xs.colwise().maxCoeff().transpose();
    EXPECT_TRUE(((v - lo).array() >= -1e-12).all() && ((hi - v).array() >= -1e-12).all());
  }
}

TEST(OptimalDecoder, UnderflowFallsBackToNearestIsland) {
  Rng rng(4);
  TheoryDataset ds = random_dataset(3, 1, 2, rng);
  ds.posteriors[0] = DiagGaussian(vec({0.0}), vec({1e-4}));
  ds.posteriors[1] = DiagGaussian(vec({5.0}), vec({1e-4}));
  ds.posteriors[2] = DiagGaussian(vec({-5.0}), vec({1e-4}));
  const DecoderEstimate est = optimal_decoder(vec({40.0}), ds);
  EXPECT_TRUE(est.extrapolated);
  EXPECT_EQ(est.value, ds.xs.row(1).transpose());
  EXPECT_TRUE(optimal_decoder_jacobian(vec({40.0}), ds).extrapolated);
  // Largest log weight is about -722, so exp() of it is subnormal.
  const DecoderEstimate near = optimal_decoder(vec({0.38}), ds);
  EXPECT_FALSE(near.extrapolated);
  EXPECT_TRUE(near.value.allFinite());
}

TEST(OptimalDecoderJacobian, SingleIslandIsZero) {
  Rng rng(5);
  const TheoryDataset ds = random_dataset(1, 3, 2, rng);
  const JacobianEstimate j = optimal_decoder_jacobian(rng.normal_vector(3), ds);
  EXPECT_EQ(j.value.rows(), 2);
  EXPECT_EQ(j.value.cols(), 3);
  EXPECT_EQ(j.value.norm(), 0.0);
}

TEST(OptimalDecoderJacobian, MatchesCentralDifferences) {
  Rng rng(6);
  for (int k = 0; k < 20; ++k) {
    const TheoryDataset ds = random_dataset(5, 3, 4, rng);
    const Eigen::VectorXd z = ds.posteriors[0].mean + 0.5 * rng.normal_vector(3);
    const Eigen::MatrixXd j = optimal_decoder_jacobian(z, ds).value;
    const Eigen::MatrixXd fd = finite_difference_jacobian(
        [&ds](const Eigen::VectorXd& v) { return optimal_decoder(v, ds).value; }, z, 1e-5);
    EXPECT_LT((j - fd).norm() / fd.norm(), 1e-5);
  }
}

TEST(OptimalDecoderJacobian, PositiveAtMidpointWhenDataFollowsMeans) {
  TheoryDataset ds;
  ds.xs = RowMatrix(2, 1);
  ds.xs << -1.0, 1.0;
  ds.posteriors = {DiagGaussian(vec({-1.0}), vec({0.5})), DiagGaussian(vec({1.0}), vec({0.5}))};
  ds.prior_var = vec({1.0});
  const double j = optimal_decoder_jacobian(vec({0.0}), ds).value(0, 0);
  const double fd = finite_difference_jacobian(
      [&ds](const Eigen::VectorXd& v) { return optimal_decoder(v, ds).value; }, vec({0.0}), 1e-5)(0, 0);
  EXPECT_GT(j, 0.0);
  EXPECT_NEAR(j, fd, 1e-8);
  // Weight ratio exp(4 z) gives nu(z) = tanh(2 z), slope 2 at 0.
  EXPECT_NEAR(j, 2.0, 1e-12);
}

TEST(ExactEvidence, PureNoise) {
  EXPECT_NEAR(exact_log_evidence_unit_t(vec({0.0}), vec({1.0}), Eigen::MatrixXd::Zero(1, 1), vec({0.0})),
              -0.5 * kLog2Pi, 1e-15);
}

TEST(ExactEvidence, DeterminantLemma) {
  const Eigen::MatrixXd j = (Eigen::MatrixXd(2, 1) << 0.6, -1.3).finished();
  const double v = exact_log_evidence_unit_t(vec({0.0}), vec({1.0}), j, Eigen::VectorXd::Zero(2));
  EXPECT_NEAR(v, -0.5 * (2 * kLog2Pi + std::log(1.0 + j.squaredNorm())), 1e-14);
}

// x = w z + g with z ~ N(0, s2), g ~ N(0, 1). The posterior mode is
// mu = w s2 x / (w^2 s2 + 1) and the evidence formula at mu is exact.
double linear_evidence(double x, double w, double s2) {
  const double mu = w * s2 * x / (w * w * s2 + 1.0);
  return exact_log_evidence_unit_t(vec({mu}), vec({s2}), Eigen::MatrixXd::Constant(1, 1, w),
                                   vec({x - w * mu}));
}

TEST(ExactEvidence, LinearModelMatchesMarginalDensity) {
  const double w = 1.7, s2 = 0.8, var = w * w * s2 + 1.0;
  for (double x : {-3.0, -0.4, 0.0, 1.1, 5.0}) {
    const double analytic = -0.5 * (kLog2Pi + std::log(var) + x * x / var);
    EXPECT_NEAR(linear_evidence(x, w, s2), analytic, 1e-13);
  }
}

TEST(ExactEvidence, IntegratesToOne) {
  const double w = 1.3, s2 = 2.0, sd = std::sqrt(w * w * s2 + 1.0);
  const int n = 20000;
  const double lo = -10.0 * sd, hi = 10.0 * sd, h = (hi - lo) / n;
  double total = 0.0;  // Simpson
  for (int i = 0; i <= n; ++i) {
    const double c = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    total += c * std::exp(linear_evidence(lo + i * h, w, s2));
  }
  EXPECT_NEAR(total * h / 3.0, 1.0, 1e-6);
}

TEST(ExactEvidence, GaussianTReducesToUnitT) {
  Rng rng(7);
  for (int k = 0; k < 20; ++k) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(3));
    const Eigen::Index m = 1 + static_cast<Eigen::Index>(rng.below(5));
    const Eigen::VectorXd mu = rng.normal_vector(n), r = rng.normal_vector(m);
    const Eigen::VectorXd s2 = (rng.normal_vector(n).array().square() + 0.2).matrix();
    const Eigen::MatrixXd j = random_matrix(m, n, rng);
    EXPECT_NEAR(exact_log_evidence_gaussian_t(mu, s2, j, r, Eigen::VectorXd::Ones(m)),
                exact_log_evidence_unit_t(mu, s2, j, r), 1e-10);
  }
}

TEST(ExactEvidence, NoiseFreeLimit) {
  Rng rng(8);
  const Eigen::VectorXd mu = rng.normal_vector(3), s2 = vec({0.5, 1.0, 2.0});
  const Eigen::MatrixXd j = random_matrix(3, 3, rng) + 2.0 * Eigen::MatrixXd::Identity(3, 3);
  const double limit = exact_log_evidence_noise_free(mu, s2, j);
  const double near = exact_log_evidence_gaussian_t(mu, s2, j, Eigen::VectorXd::Zero(3),
                                                    Eigen::VectorXd::Constant(3, 1e-8));
  EXPECT_NEAR(near, limit, 1e-4);
  const double direct = -0.5 * (3 * kLog2Pi + (mu.array().square() / s2.array()).sum() +
                                std::log((j * s2.asDiagonal() * j.transpose()).determinant()));
  EXPECT_NEAR(limit, direct, 1e-12);
}

TEST(ExactEvidence, ScalingNoiseShiftsNormalisation) {
  const Eigen::MatrixXd j = Eigen::MatrixXd::Zero(4, 2);
  const Eigen::VectorXd mu = vec({0.3, -0.2}), s2 = vec({1.0, 2.0}), t = vec({0.5, 1.0, 2.0, 3.0});
  const double base = exact_log_evidence_gaussian_t(mu, s2, j, Eigen::VectorXd::Zero(4), t);
  const double c = 7.0;
  EXPECT_NEAR(exact_log_evidence_gaussian_t(mu, s2, j, Eigen::VectorXd::Zero(4), c * t) - base,
              -2.0 * std::log(c), 1e-13);
}

TEST(EvidenceGap, ZeroAtInverseInformation) {
  Rng rng(9);
  for (int k = 0; k < 100; ++k) {
    const Eigen::VectorXd s2 = (rng.normal_vector(3).array().square() + 0.2).matrix();
    const Eigen::MatrixXd j = random_matrix(4, 3, rng);
    const Eigen::MatrixXd h = information_matrix(s2, j);
    EXPECT_NEAR(elbo_evidence_gap(s2, j, h.inverse()), 0.0, 1e-12);
    EXPECT_TRUE(((h.diagonal() - s2.cwiseInverse()).array() >= 0).all());
  }
}

TEST(EvidenceGap, EigenvalueFormAndScaledOptimum) {
  Rng rng(10);
  for (int k = 0; k < 50; ++k) {
    const Eigen::VectorXd s2 = (rng.normal_vector(3).array().square() + 0.2).matrix();
    const Eigen::MatrixXd j = random_matrix(3, 3, rng);
    const Eigen::MatrixXd h = information_matrix(s2, j);
    const double delta = rng.uniform(-0.5, 0.5);
    EXPECT_NEAR(elbo_evidence_gap(s2, j, h.inverse() * (1.0 + delta)),
                1.5 * (delta - std::log1p(delta)), 1e-12);

    const Eigen::MatrixXd sigma = random_spd(3, rng);
    const Eigen::VectorXd lambda = Eigen::EigenSolver<Eigen::MatrixXd>(h * sigma).eigenvalues().real();
    const double expected = 0.5 * (lambda.array() - 1.0 - lambda.array().log()).sum();
    const double gap = elbo_evidence_gap(s2, j, sigma);
    EXPECT_NEAR(gap, expected, 1e-10 * std::max(1.0, expected));
    EXPECT_GE(gap, 0.0);
  }
}

TEST(EvidenceGap, DiagonalFormAgreesWhenInformationIsDiagonal) {
  // Orthogonal columns make J^T J diagonal.
  Rng rng(11);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(5, 3, rng));
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(5, 3);
  const Eigen::MatrixXd j = q * vec({2.0, 0.5, 1.5}).asDiagonal();
  const Eigen::VectorXd s2 = vec({1.0, 3.0, 0.4}), sigma = vec({0.2, 0.9, 0.5});
  EXPECT_NEAR(elbo_evidence_gap_diag(s2, j, sigma),
              elbo_evidence_gap(s2, j, Eigen::MatrixXd(sigma.asDiagonal())), 1e-12);
}

TEST(TraceLog, AnalyticMinimiser) {
  Rng rng(12);
  for (int k = 0; k < 20; ++k) {
    const Eigen::MatrixXd a = random_spd(1 + static_cast<Eigen::Index>(rng.below(4)), rng);
    EXPECT_NEAR(trace_log_objective(a, a.inverse()), std::log(a.determinant()), 1e-10);
  }
}

TEST(TraceLog, IdentityMinimumIsZero) {
  Rng rng(13);
  const TraceLogResult r = trace_log_min(Eigen::MatrixXd::Identity(3, 3), {}, rng);
  EXPECT_NEAR(r.value, 0.0, 1e-3);
  EXPECT_LT((r.sigma_star - Eigen::MatrixXd::Identity(3, 3)).norm(), 0.05);
}

TEST(TraceLog, DiagonalAnalyticSolution) {
  Rng rng(14);
  TraceLogOptions opts;
  opts.full = false;
  const TraceLogResult r = trace_log_min(Eigen::Vector2d(2.0, 5.0).asDiagonal(), opts, rng);
  EXPECT_NEAR(r.value, std::log(10.0), 1e-3);
  EXPECT_NEAR(r.sigma_star(0, 0), 0.5, 0.02);
  EXPECT_NEAR(r.sigma_star(1, 1), 0.2, 0.01);
  EXPECT_EQ(r.sigma_star(0, 1), 0.0);
}

TEST(TraceLog, ProbedFullMinimumMatchesLogDet) {
  Rng rng(15);
  const Eigen::MatrixXd a = random_spd(4, rng);
  const TraceLogResult r = trace_log_min(a, {}, rng);
  const double log_det = 2.0 * Eigen::LLT<Eigen::MatrixXd>(a).matrixL().toDenseMatrix().diagonal().array().log().sum();
  EXPECT_NEAR(r.value, log_det, 1e-3);
  EXPECT_NEAR(r.probe_estimate, log_det, 0.05);
}

TEST(TraceLog, RejectsNonSpd) {
  Rng rng(16);
  EXPECT_THROW(trace_log_min(Eigen::Vector2d(1.0, -1.0).asDiagonal(), {}, rng), ContractError);
  Eigen::Matrix2d asym;
  asym << 2.0, 1.0, 0.0, 2.0;
  EXPECT_THROW(trace_log_min(asym, {}, rng), ContractError);
}

TEST(Penalty, HomogeneousEnsembleVanishes) {
  const HessianStats s = hessian_stats(std::vector<Eigen::VectorXd>(5, vec({2.0, 0.3})));
  EXPECT_EQ(constant_sigma_penalty(s), 0.0);
}

TEST(Penalty, TwoPointHandComputation) {
  const HessianStats s = hessian_stats({vec({1.0}), vec({3.0})});
  EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(s.relative_variance[0], 0.25);
  EXPECT_DOUBLE_EQ(constant_sigma_penalty(s), 1.0 / 16.0);
}

TEST(Penalty, NeedsTwoExamples) {
  EXPECT_THROW(constant_sigma_penalty(hessian_stats({vec({1.0})})), ContractError);
}

TEST(Penalty, MatchesDirectGapWithinCubicRemainder) {
  Rng rng(17);
  for (int k = 0; k < 20; ++k) {
    const Eigen::VectorXd s2 = vec({1.0, 0.5});
    const Eigen::MatrixXd j0 = random_matrix(3, 2, rng);
    std::vector<Eigen::MatrixXd> js;
    for (int i = 0; i < 100; ++i) js.push_back(j0 + 0.03 * random_matrix(3, 2, rng));
    const HessianStats stats = hessian_stats(s2, js);
    ASSERT_LT(stats.relative_variance.cwiseSqrt().maxCoeff(), 0.1);
    for (const Eigen::VectorXd& h : stats.h) {
      EXPECT_TRUE(((h - s2.cwiseInverse()).array() >= -1e-15).all());
    }
    const PenaltyCheck c = penalty_vs_direct_gap(stats);
    EXPECT_LE(std::abs(c.direct_gap - c.penalty), c.remainder_bound);
    EXPECT_GT(c.penalty, 0.0);
    // The direct gap is the ensemble mean of the diagonal gap at E[H]^-1.
    double direct = 0.0;
    for (const Eigen::VectorXd& h : stats.h) {
      const Eigen::ArrayXd l = h.array() / stats.mean.array();
      direct += 0.5 * (l - 1.0 - l.log()).sum();
    }
    EXPECT_NEAR(c.direct_gap, direct / static_cast<double>(stats.h.size()), 1e-14);
  }
}

TEST(Stationarity, ClosedFormLinearModelIsStationary) {
  // pPCA with diagonal W^T W: the exact posterior is diagonal and the
  // encoder below is the true posterior.
  Rng rng(18);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(4, 2, rng));
  const Eigen::MatrixXd u = qr.householderQ() * Eigen::MatrixXd::Identity(4, 2);
  const Eigen::MatrixXd w = u * vec({2.0, 1.2}).asDiagonal();
  const double t = 0.7;
  const Eigen::MatrixXd wtw = w.transpose() * w;
  const Eigen::VectorXd post_var = (1.0 + wtw.diagonal().array() / t).inverse().matrix();
  const Eigen::MatrixXd enc = post_var.asDiagonal() * w.transpose() / t;
  const AutoencoderProbe probe{
      [&](const Eigen::VectorXd& x) { return DiagGaussian(enc * x, post_var); },
      [&](const Eigen::VectorXd& z) -> Eigen::VectorXd { return w * z; }};
  const RowMatrix xs = random_matrix(50, 4, rng);
  const StationarityReport rep = stationarity_residuals(probe, xs, Eigen::VectorXd::Ones(2), t);
  EXPECT_LT(rep.mean_residual_median, 1e-6);
  EXPECT_LT(rep.precision_residual_median, 1e-6);
  EXPECT_EQ(rep.summary.at("mean_residual").n, 50u);
  const nlohmann::json j = to_json(rep.summary);
  EXPECT_TRUE(j.at("precision_residual").contains("p90"));
  EXPECT_TRUE(j.at("mean_residual").contains("flags"));
}

TEST(Stationarity, UntrainedModelIsFarFromStationary) {
  Rng rng(19);
  ModelSpec spec;
  spec.data_dim = 5;
  spec.latent_dim = 2;
  spec.hidden_units = 32;
  MlpVae model(spec, rng);
  model.set_sigma_const(Eigen::VectorXd::Ones(2));
  model.set_prior_var(Eigen::VectorXd::Ones(2));
  const AutoencoderProbe probe{[&](const Eigen::VectorXd& x) { return posterior(model, x); },
                               [&](const Eigen::VectorXd& z) { return model.decode_mean(z); }};
  const RowMatrix xs = 3.0 * random_matrix(100, 5, rng);
  const StationarityReport rep = stationarity_residuals(probe, xs, Eigen::VectorXd::Ones(2));
  EXPECT_GT(rep.mean_residual_median, 0.1);
  EXPECT_GT(rep.precision_residual_median, 0.1);
}

TEST(GradientIdentities, LinearDecoderExactToMonteCarloTolerance) {
  Rng rng(20);
  const Eigen::MatrixXd w = random_matrix(3, 2, rng);
  const Eigen::VectorXd b = rng.normal_vector(3), x = rng.normal_vector(3);
  const DiagGaussian q(rng.normal_vector(2), vec({0.4, 1.3}));
  const GradientIdentityReport rep = mc_gradient_identities(
      x, q, [&](const Eigen::VectorXd& z) -> Eigen::VectorXd { return w * z + b; }, 1000000, rng);
  EXPECT_LT(rep.max_standard_score(), 3.0);
  // d/dSigma is -1/2 diag(W^T W), with no population factor.
  EXPECT_LT((rep.dsigma_identity + 0.5 * (w.transpose() * w).diagonal()).norm(), 1e-6);
  const Eigen::VectorXd dmu = -w.transpose() * (w * q.mean + b - x);
  EXPECT_LT((rep.dmu_identity - dmu).norm(), 1e-6);
}

TEST(GradientIdentities, DiscrepancyShrinksWithCurvature) {
  Rng rng(21);
  const Eigen::MatrixXd w = random_matrix(3, 2, rng);
  const Eigen::MatrixXd c = random_matrix(3, 2, rng);
  const Eigen::VectorXd x = rng.normal_vector(3);
  const DiagGaussian q(vec({0.3, -0.5}), vec({0.5, 0.8}));
  std::vector<double> disc;
  for (double curvature : {1.0, 0.3, 0.1, 0.0}) {
    Rng r(22);
    const GradientIdentityReport rep = mc_gradient_identities(
        x, q,
        [&](const Eigen::VectorXd& z) -> Eigen::VectorXd {
          return w * z + curvature * c * z.cwiseProduct(z);
        },
        200000, r);
    disc.push_back(rep.discrepancy());
  }
  for (std::size_t i = 1; i < disc.size(); ++i) EXPECT_LT(disc[i], disc[i - 1]);
}

}  // namespace
}  // namespace bilbo::theory
