#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>

#include "bilbo/gaussian.hpp"
#include "bilbo/objectives.hpp"
#include "bilbo/parallel.hpp"
#include "bilbo/report.hpp"
#include "bilbo/theory.hpp"
#include "bilbo_cli/app.hpp"

namespace bilbo::cli {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (double& v : m.reshaped()) v = rng.normal();
  return m;
}

Eigen::MatrixXd random_spd(Eigen::Index n, Rng& rng) {
  const Eigen::MatrixXd g = random_matrix(n, n, rng);
  Eigen::MatrixXd a = g * g.transpose() / static_cast<double>(n);
  a.diagonal().array() += 0.5;
  return 0.5 * (a + a.transpose());
}

Eigen::VectorXd random_positive(Eigen::Index n, double lo, double hi, Rng& rng) {
  Eigen::VectorXd v(n);
  for (double& e : v) e = rng.uniform(lo, hi);
  return v;
}

Eigen::Index pick_dim(const VerifyOptions& o, std::size_t hi, Rng& rng) {
  if (o.dim) return static_cast<Eigen::Index>(*o.dim);
  return static_cast<Eigen::Index>(1 + rng.below(hi));
}

CheckResult decoder_oracle(const VerifyOptions& o) {
  // Log-sum-exp decoder vs a direct weighted average of the densities.
  constexpr std::size_t kInstances = 100;
  std::vector<double> errors(kInstances);
  parallel_for(kInstances, [&](std::size_t k) {
    Rng rng(derive_seed(o.seed, 1000 + k));
    const Eigen::Index n = pick_dim(o, 3, rng);
    const auto count = static_cast<Eigen::Index>(2 + rng.below(9));
    const Eigen::Index m = static_cast<Eigen::Index>(1 + rng.below(4));
    theory::TheoryDataset ds;
    ds.xs = random_matrix(count, m, rng);
    for (Eigen::Index i = 0; i < count; ++i) {
      ds.posteriors.emplace_back(random_matrix(n, 1, rng).col(0), random_positive(n, 0.3, 1.5, rng));
    }
    ds.prior_var = Eigen::VectorXd::Ones(n);
    const Eigen::VectorXd z = ds.posteriors[0].mean + 0.5 * random_matrix(n, 1, rng).col(0);
    Eigen::VectorXd num = Eigen::VectorXd::Zero(m);
    double den = 0.0;
    for (Eigen::Index i = 0; i < count; ++i) {
      const auto& q = ds.posteriors[static_cast<std::size_t>(i)];
      double w = 1.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double d = z[j] - q.mean[j];
        w *= std::exp(-0.5 * d * d / q.var[j]) / std::sqrt(2.0 * M_PI * q.var[j]);
      }
      num += w * ds.xs.row(i).transpose();
      den += w;
    }
    const Eigen::VectorXd direct = num / den;
    const auto est = theory::optimal_decoder(z, ds);
    errors[k] = (est.value - direct).norm() / std::max(direct.norm(), 1e-300);
  });
  const double med = median(errors);
  return {"decoder-oracle", "median relative error vs direct average", med, 1e-12, med < 1e-12,
          "100 instances"};
}

CheckResult decoder_jacobian(const VerifyOptions& o) {
  constexpr std::size_t kInstances = 100;
  std::vector<double> errors(kInstances);
  std::vector<int> extrapolated(kInstances, 0);
  parallel_for(kInstances, [&](std::size_t k) {
    Rng rng(derive_seed(o.seed, 2000 + k));
    const Eigen::Index n = pick_dim(o, 3, rng);
    const auto count = static_cast<Eigen::Index>(1 + rng.below(10));
    const Eigen::Index m = static_cast<Eigen::Index>(1 + rng.below(4));
    theory::TheoryDataset ds;
    ds.xs = random_matrix(count, m, rng);
    for (Eigen::Index i = 0; i < count; ++i) {
      ds.posteriors.emplace_back(random_matrix(n, 1, rng).col(0), random_positive(n, 0.3, 1.5, rng));
    }
    ds.prior_var = Eigen::VectorXd::Ones(n);
    const auto anchor = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(count)));
    const Eigen::VectorXd z = ds.posteriors[anchor].mean + 0.5 * random_matrix(n, 1, rng).col(0);
    const auto analytic = theory::optimal_decoder_jacobian(z, ds);
    extrapolated[k] = analytic.extrapolated;
    const Eigen::MatrixXd j = analytic.value * (1.0 + o.perturb_jacobian);
    const Eigen::MatrixXd fd = theory::finite_difference_jacobian(
        [&ds](const Eigen::VectorXd& v) { return theory::optimal_decoder(v, ds).value; }, z, 1e-5);
    errors[k] = (j - fd).norm() / std::max(fd.norm(), 1e-12);
  });
  const double med = median(errors);
  const auto flags = static_cast<std::size_t>(std::count(extrapolated.begin(), extrapolated.end(), 1));
  return {"decoder-jacobian", "median relative error vs central differences", med, 1e-5,
          med < 1e-5 && flags == 0, "100 instances, extrapolated=" + std::to_string(flags)};
}

std::vector<CheckResult> trace_log(const VerifyOptions& o) {
  constexpr std::size_t kMatrices = 20;
  std::vector<double> analytic(kMatrices), probed(kMatrices);
  parallel_for(kMatrices, [&](std::size_t k) {
    Rng rng(derive_seed(o.seed, 3000 + k));
    const Eigen::Index n = pick_dim(o, 4, rng);
    const Eigen::MatrixXd a = random_spd(n, rng);
    const double log_det = std::log(a.determinant());
    analytic[k] = std::abs(theory::trace_log_objective(a, a.inverse()) - log_det);
    theory::TraceLogOptions opts;
    probed[k] = std::abs(theory::trace_log_min(a, opts, rng).value - log_det);
  });
  const double worst_a = *std::max_element(analytic.begin(), analytic.end());
  const double worst_p = *std::max_element(probed.begin(), probed.end());
  return {{"trace-log", "max |f(A^-1) - log det A|", worst_a, 1e-10, worst_a < 1e-10,
           "20 SPD matrices"},
          {"trace-log-probed", "max |probed minimum - log det A|", worst_p, 1e-3, worst_p < 1e-3,
           "20 SPD matrices, probe-only gradients"}};
}

std::vector<CheckResult> gap(const VerifyOptions& o) {
  constexpr std::size_t kDraws = 1000;
  std::vector<double> at_opt(kDraws), elsewhere(kDraws);
  parallel_for(kDraws, [&](std::size_t k) {
    Rng rng(derive_seed(o.seed, 4000 + k));
    const Eigen::Index n = pick_dim(o, 4, rng);
    const Eigen::Index m = static_cast<Eigen::Index>(1 + rng.below(5));
    const Eigen::VectorXd s2 = random_positive(n, 0.2, 3.0, rng);
    const Eigen::MatrixXd j = random_matrix(m, n, rng);
    const Eigen::MatrixXd h = theory::information_matrix(s2, j);
    at_opt[k] = std::abs(theory::elbo_evidence_gap(s2, j, h.inverse()));
    elsewhere[k] = theory::elbo_evidence_gap(s2, j, random_spd(n, rng));
  });
  const double worst_opt = *std::max_element(at_opt.begin(), at_opt.end());
  const double lowest = *std::min_element(elsewhere.begin(), elsewhere.end());
  return {{"gap-stationary", "max |gap| at Sigma = H^-1", worst_opt, 1e-10, worst_opt < 1e-10,
           "1000 draws"},
          {"gap-nonnegative", "min gap at random SPD Sigma", lowest, 0.0, lowest >= 0.0,
           "1000 draws"}};
}

CheckResult penalty(const VerifyOptions& o) {
  constexpr std::size_t kEnsembles = 50;
  constexpr std::size_t kMembers = 200;
  std::vector<double> slack(kEnsembles);
  std::vector<double> max_cv(kEnsembles);
  parallel_for(kEnsembles, [&](std::size_t k) {
    Rng rng(derive_seed(o.seed, 5000 + k));
    const Eigen::Index n = pick_dim(o, 4, rng);
    const Eigen::Index m = n + static_cast<Eigen::Index>(rng.below(4));
    const Eigen::VectorXd s2 = random_positive(n, 0.5, 2.0, rng);
    const Eigen::MatrixXd j0 = random_matrix(m, n, rng);
    const double spread = rng.uniform(0.005, 0.05);
    std::vector<Eigen::MatrixXd> js;
    for (std::size_t i = 0; i < kMembers; ++i) js.push_back(j0 + spread * random_matrix(m, n, rng));
    const theory::HessianStats stats = theory::hessian_stats(s2, js);
    max_cv[k] = stats.relative_variance.cwiseSqrt().maxCoeff();
    const theory::PenaltyCheck c = theory::penalty_vs_direct_gap(stats);
    slack[k] = std::abs(c.direct_gap - c.penalty) / std::max(c.remainder_bound, 1e-300);
  });
  const double worst = *std::max_element(slack.begin(), slack.end());
  const double cv = *std::max_element(max_cv.begin(), max_cv.end());
  char detail[96];
  std::snprintf(detail, sizeof detail, "50 ensembles, max cv %.3g", cv);
  return {"penalty", "max |direct gap - penalty| / cubic remainder bound", worst, 1.0,
          worst <= 1.0 && cv < 0.1, detail};
}

CheckResult gradient_identities(const VerifyOptions& o) {
  constexpr std::size_t kInstances = 3;
  std::vector<double> scores(kInstances);
  for (std::size_t k = 0; k < kInstances; ++k) {
    Rng rng(derive_seed(o.seed, 6000 + k));
    const Eigen::Index n = pick_dim(o, 3, rng);
    const Eigen::Index m = static_cast<Eigen::Index>(1 + rng.below(4));
    const Eigen::MatrixXd w = random_matrix(m, n, rng);
    const Eigen::VectorXd b = random_matrix(m, 1, rng).col(0);
    const Eigen::VectorXd x = random_matrix(m, 1, rng).col(0);
    const DiagGaussian q(random_matrix(n, 1, rng).col(0), random_positive(n, 0.2, 2.0, rng));
    const auto rep = theory::mc_gradient_identities(
        x, q, [&](const Eigen::VectorXd& z) -> Eigen::VectorXd { return w * z + b; },
        o.mc_samples, rng);
    scores[k] = rep.max_standard_score();
  }
  const double worst = *std::max_element(scores.begin(), scores.end());
  return {"gradient-identities", "max |MC - identity| / SE", worst, 3.0, worst < 3.0,
          std::to_string(kInstances) + " linear decoders, " + std::to_string(o.mc_samples) +
              " samples"};
}

std::vector<CheckResult> fused_bilbo(const VerifyOptions& o) {
  constexpr std::size_t kBatches = 20;
  std::vector<double> value_err(kBatches), grad_rel(kBatches);
  for (std::size_t k = 0; k < kBatches; ++k) {
    Rng rng(derive_seed(o.seed, 7000 + k));
    const Eigen::Index n = pick_dim(o, 3, rng);
    const auto m = static_cast<std::size_t>(2 + rng.below(6));
    const auto batch = static_cast<std::size_t>(2 + rng.below(15));
    const double tau = rng.uniform(0.1, 5.0);
    const Eigen::VectorXd sigma = random_positive(n, 0.3, 2.0, rng);
    const Tensor xs = rng.normal_tensor(batch, m);
    const Tensor mus = rng.normal_tensor(batch, static_cast<std::size_t>(n));
    const Tensor w = rng.normal_tensor(static_cast<std::size_t>(n), m);
    const std::uint64_t noise_seed = derive_seed(o.seed, 7500 + k);

    auto evaluate = [&](bool fused, Eigen::VectorXd* grad) {
      Tape tape;
      Var x = tape.constant(xs);
      Var mu = tape.parameter(mus);
      Var wv = tape.constant(w);
      const DecodeFn decode = [&](Var z) { return Decoded{matmul(z, wv), std::nullopt}; };
      Rng noise(noise_seed);
      ObjectiveTerms t = fused ? bilbo_baggins(x, mu, sigma, decode, tau, 2, noise)
                               : bilbo(x, mu, sigma, decode, LikelihoodSpec::baggins(tau), 2, noise);
      tape.backward(t.value);
      *grad = mu.grad().to_vector();
      return t.value.value().item();
    };
    Eigen::VectorXd g_fused, g_plain;
    const double v_fused = evaluate(true, &g_fused);
    const double v_plain = evaluate(false, &g_plain);
    value_err[k] = std::abs(v_fused - v_plain);
    grad_rel[k] = (g_fused - g_plain).norm() / std::max(g_plain.norm(), 1e-300);
  }
  const double worst = *std::max_element(value_err.begin(), value_err.end());
  char detail[128];
  std::snprintf(detail, sizeof detail,
                "20 batches; encoder-mean gradients differ, median relative %.3g",
                median(grad_rel));
  return {{"fused-bilbo", "max |fused - unfused BILBO with BAGGINS|", worst, 1e-10, worst < 1e-10,
           detail}};
}

std::vector<CheckResult> ppca_stationarity(const VerifyOptions& o) {
  // Closed-form linear VAE at the pPCA maximum likelihood solution: decoder
  // W = U (L - T)^1/2, b = data mean; encoder mu = (T + W^T W)^-1 W^T (x - b),
  // Sigma = (I + W^T W / T)^-1 with prior N(0, I).
  Rng rng(derive_seed(o.seed, 8000));
  SyntheticSpec spec;
  spec.kind = SyntheticKind::LinearManifold;
  spec.m = 5;
  spec.n_true = 2;
  spec.variances = Eigen::Vector2d(9.0, 4.0);
  spec.noise_std = 1.0;
  spec.count = 5000;
  spec.seed = derive_seed(o.seed, 8001);
  const Dataset data = gen_synthetic(spec);
  const double t = 1.0;
  const auto xs = data.xs.mat();
  const Eigen::VectorXd b = xs.colwise().mean().transpose();
  const RowMatrix centered = xs.rowwise() - b.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(xs.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index n = 2;
  const Eigen::Index m = cov.rows();
  const Eigen::MatrixXd u = eig.eigenvectors().rightCols(n);
  const Eigen::VectorXd l = eig.eigenvalues().tail(n);
  const Eigen::MatrixXd w = u * (l.array() - t).sqrt().matrix().asDiagonal();
  const Eigen::MatrixXd wtw = w.transpose() * w;
  Eigen::MatrixXd enc = wtw;
  enc.diagonal().array() += t;
  const Eigen::MatrixXd enc_map = enc.inverse() * w.transpose();
  const Eigen::VectorXd post_var = (1.0 + wtw.diagonal().array() / t).inverse().matrix();

  const theory::AutoencoderProbe probe{
      [&](const Eigen::VectorXd& x) { return DiagGaussian(enc_map * (x - b), post_var); },
      [&](const Eigen::VectorXd& z) -> Eigen::VectorXd { return w * z + b; }};
  const theory::StationarityReport rep =
      theory::stationarity_residuals(probe, xs.topRows(500), Eigen::VectorXd::Ones(n), t);

  // ELBO in closed form for the linear decoder, against the pPCA evidence
  // with the same parameters (shifted by the mean).
  double elbo = 0.0;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const Eigen::VectorXd x = xs.row(i).transpose();
    const DiagGaussian q = probe.encode(x);
    const double kl = kl_to_prior(q, Eigen::VectorXd::Ones(n));
    const double expected_sq = (x - w * q.mean - b).squaredNorm() + (wtw.diagonal().array() * q.var.array()).sum();
    elbo += -0.5 * (static_cast<double>(m) * (kLog2Pi + std::log(t)) + expected_sq / t) - kl;
  }
  elbo /= static_cast<double>(xs.rows());
  const double evidence = ppca_log_evidence(centered, w, Eigen::VectorXd::Ones(n), t);
  const double gap_value = std::abs(elbo - evidence);
  (void)rng;
  return {{"ppca-mean-residual", "median mean-stationarity residual", rep.mean_residual_median,
           1e-6, rep.mean_residual_median < 1e-6, "closed-form linear VAE, 500 examples"},
          {"ppca-precision-residual", "median precision-stationarity residual",
           rep.precision_residual_median, 1e-6, rep.precision_residual_median < 1e-6,
           "closed-form linear VAE, 500 examples"},
          {"ppca-elbo", "|ELBO - pPCA log evidence| per example", gap_value, 1e-9,
           gap_value < 1e-9, "at the stationary point"}};
}

}  // namespace

const std::vector<std::string>& identity_check_names() {
  static const std::vector<std::string> names = {
      "decoder-oracle", "decoder-jacobian", "trace-log",   "gap",
      "penalty",        "appendix",         "fused-bilbo", "ppca-stationarity"};
  return names;
}

std::vector<CheckResult> run_identity_suite(const VerifyOptions& options) {
  for (const std::string& name : options.only) {
    const auto& names = identity_check_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw UsageError("unknown check '" + name + "'");
    }
  }
  if (options.dim && (*options.dim < 1 || *options.dim > 16)) {
    throw UsageError("--dim must be in [1, 16]");
  }
  if (options.mc_samples < 2) throw UsageError("--samples must be >= 2");
  const auto selected = [&](const std::string& name) {
    return options.only.empty() ||
           std::find(options.only.begin(), options.only.end(), name) != options.only.end();
  };
  std::vector<CheckResult> out;
  const auto append = [&out](std::vector<CheckResult> r) {
    out.insert(out.end(), r.begin(), r.end());
  };
  if (selected("decoder-oracle")) out.push_back(decoder_oracle(options));
  if (selected("decoder-jacobian")) out.push_back(decoder_jacobian(options));
  if (selected("trace-log")) append(trace_log(options));
  if (selected("gap")) append(gap(options));
  if (selected("penalty")) out.push_back(penalty(options));
  if (selected("appendix")) out.push_back(gradient_identities(options));
  if (selected("fused-bilbo")) append(fused_bilbo(options));
  if (selected("ppca-stationarity")) append(ppca_stationarity(options));
  return out;
}

void print_check_table(const std::vector<CheckResult>& results, std::ostream& out) {
  char line[512];
  std::snprintf(line, sizeof line, "%-24s %-6s %-12s %-10s %s\n", "check", "status", "value",
                "tolerance", "metric");
  out << line;
  for (const CheckResult& r : results) {
    std::snprintf(line, sizeof line, "%-24s %-6s %-12.4g %-10.3g %s (%s)\n", r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.value, r.tolerance, r.metric.c_str(),
                  r.detail.c_str());
    out << line;
  }
}

}  // namespace bilbo::cli
