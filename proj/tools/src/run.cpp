#include <cmath>
#include <cstdio>
#include <fstream>

#include "bilbo/report.hpp"
#include "bilbo/theory.hpp"
#include "bilbo_cli/app.hpp"

namespace bilbo::cli {

namespace {

constexpr std::size_t kResidualProbe = 500;

bool has_mnist(const RunOptions& o) { return !o.mnist_images.empty(); }

std::string resolved_likelihood(const RunOptions& o) {
  if (!o.likelihood.empty()) return o.likelihood;
  if (o.objective == "bilbo-baggins") return "baggins";
  if (has_mnist(o) && o.lambda == 1.0) return "bernoulli";
  return "gaussian";
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

nlohmann::json to_json(const RunOptions& o) {
  nlohmann::json j;
  j["objective"] = o.objective;
  j["sigma"] = o.sigma;
  j["tau"] = o.tau ? nlohmann::json(*o.tau) : nlohmann::json(nullptr);
  j["lambda"] = o.lambda;
  j["latent"] = o.latent;
  j["epochs"] = o.epochs;
  j["batch"] = o.batch;
  j["lr"] = o.lr;
  j["seed"] = o.seed;
  j["likelihood"] = resolved_likelihood(o);
  j["noise_var"] = o.noise_var;
  j["mc_samples"] = o.mc_samples;
  j["hidden_layers"] = o.hidden_layers;
  j["hidden_units"] = o.hidden_units;
  j["eval_every"] = o.eval_every;
  j["eval_samples"] = o.eval_samples;
  j["mnist_images"] = o.mnist_images;
  j["mnist_labels"] = o.mnist_labels;
  j["test_images"] = o.test_images;
  j["test_labels"] = o.test_labels;
  j["limit"] = o.limit;
  j["synthetic"] = o.synthetic;
  j["count"] = o.count;
  j["data_dim"] = o.data_dim;
  j["variances"] = o.variances;
  j["noise_std"] = o.noise_std ? nlohmann::json(*o.noise_std) : nlohmann::json(nullptr);
  return j;
}

RunOptions run_options_from_json(const nlohmann::json& j) {
  RunOptions o;
  try {
    o.objective = j.at("objective").get<std::string>();
    o.sigma = j.at("sigma").get<double>();
    if (!j.at("tau").is_null()) o.tau = j.at("tau").get<double>();
    o.lambda = j.at("lambda").get<double>();
    o.latent = j.at("latent").get<std::size_t>();
    o.epochs = j.at("epochs").get<std::size_t>();
    o.batch = j.at("batch").get<std::size_t>();
    o.lr = j.at("lr").get<double>();
    o.seed = j.at("seed").get<std::uint64_t>();
    o.likelihood = j.at("likelihood").get<std::string>();
    o.noise_var = j.at("noise_var").get<double>();
    o.mc_samples = j.at("mc_samples").get<int>();
    o.hidden_layers = j.at("hidden_layers").get<std::size_t>();
    o.hidden_units = j.at("hidden_units").get<std::size_t>();
    o.eval_every = j.at("eval_every").get<std::size_t>();
    o.eval_samples = j.at("eval_samples").get<std::size_t>();
    o.mnist_images = j.at("mnist_images").get<std::string>();
    o.mnist_labels = j.at("mnist_labels").get<std::string>();
    o.test_images = j.at("test_images").get<std::string>();
    o.test_labels = j.at("test_labels").get<std::string>();
    o.limit = j.at("limit").get<std::size_t>();
    o.synthetic = j.at("synthetic").get<std::string>();
    o.count = j.at("count").get<std::size_t>();
    o.data_dim = j.at("data_dim").get<std::size_t>();
    o.variances = j.at("variances").get<std::vector<double>>();
    if (!j.at("noise_std").is_null()) o.noise_std = j.at("noise_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("manifest config is incomplete: ") + e.what());
  }
  return o;
}

TrainConfig make_train_config(const RunOptions& o) {
  TrainConfig config;
  const auto mode = parse_objective_mode(o.objective);
  if (!mode) throw UsageError("unknown --objective '" + o.objective + "'");
  config.objective.mode = *mode;
  if (o.latent < 1) throw UsageError("--latent must be >= 1");
  if (!(o.sigma > 0.0)) throw UsageError("--sigma must be > 0");
  if (!(o.lambda > 0.0)) throw UsageError("--lambda must be > 0");
  if (o.mc_samples < 1) throw UsageError("--mc must be >= 1");
  if (o.eval_samples < 1) throw UsageError("--eval-samples must be >= 1");
  if (*mode != ObjectiveMode::ElboLearnedSigma) {
    config.objective.sigma_const =
        Eigen::VectorXd::Constant(static_cast<Eigen::Index>(o.latent), o.sigma * o.sigma);
  }

  const std::string lik = resolved_likelihood(o);
  if (lik == "bernoulli") {
    if (!has_mnist(o)) throw UsageError("the Bernoulli likelihood needs MNIST pixels in [0, 1]");
    if (o.lambda != 1.0) throw UsageError("--lambda != 1 requires a Gaussian likelihood");
    config.objective.likelihood = LikelihoodSpec::bernoulli();
  } else if (lik == "gaussian") {
    if (!(o.noise_var > 0.0)) throw UsageError("--noise-var must be > 0");
    config.objective.likelihood = LikelihoodSpec::gaussian_fixed(o.noise_var);
  } else if (lik == "learned") {
    config.objective.likelihood = LikelihoodSpec::gaussian_learned();
  } else if (lik == "baggins") {
    if (!o.tau) throw UsageError("--tau is required with the BAGGINS likelihood");
    if (!(*o.tau > 0.0)) throw UsageError("--tau must be > 0");
    if (*mode == ObjectiveMode::ElboLearnedSigma) {
      throw UsageError("BAGGINS needs a constant posterior variance");
    }
    config.objective.likelihood = LikelihoodSpec::baggins(*o.tau);
  } else {
    throw UsageError("unknown --likelihood '" + lik + "'");
  }
  if (*mode == ObjectiveMode::BilboBaggins && lik != "baggins") {
    throw UsageError("bilbo-baggins requires the BAGGINS likelihood");
  }
  config.objective.mc_samples = o.mc_samples;
  config.latent_dim = o.latent;
  config.epochs = o.epochs;
  config.batch_size = o.batch;
  config.learning_rate = o.lr;
  config.seed = o.seed;
  config.eval_every = o.eval_every;
  config.hidden_layers = o.hidden_layers;
  config.hidden_units = o.hidden_units;
  try {
    config.validate();
  } catch (const std::logic_error& e) {
    throw UsageError(e.what());
  }
  return config;
}

Dataset make_dataset(const RunOptions& o) {
  if (has_mnist(o) && !o.synthetic.empty()) {
    throw UsageError("give either --mnist-images or --synthetic, not both");
  }
  if (has_mnist(o)) {
    std::optional<std::filesystem::path> labels;
    if (!o.mnist_labels.empty()) labels = o.mnist_labels;
    return load_idx(o.mnist_images, labels, o.limit, o.lambda);
  }
  if (o.synthetic.empty()) throw UsageError("no data: pass --mnist-images or --synthetic");
  const auto kind = parse_synthetic_kind(o.synthetic);
  if (!kind) throw UsageError("unknown --synthetic '" + o.synthetic + "'");

  SyntheticSpec spec;
  spec.kind = *kind;
  spec.seed = derive_seed(o.seed, 100);
  spec.count = o.count ? o.count : 10000;
  switch (*kind) {
    case SyntheticKind::AnisotropicGaussian:
      spec.variances = Eigen::Vector2d(4.0, 0.25);
      spec.noise_std = 0.0;
      spec.m = 2;
      break;
    case SyntheticKind::LinearManifold:
      spec.variances = Eigen::Vector2d(9.0, 4.0);
      spec.noise_std = 1.0;
      spec.m = 5;
      break;
    case SyntheticKind::RingMixture:
      spec.variances = Eigen::VectorXd();
      spec.m = 2;
      break;
  }
  if (!o.variances.empty()) {
    spec.variances = Eigen::Map<const Eigen::VectorXd>(o.variances.data(),
                                                       static_cast<Eigen::Index>(o.variances.size()));
  }
  spec.n_true = *kind == SyntheticKind::RingMixture ? 2 : static_cast<std::size_t>(spec.variances.size());
  if (o.data_dim) spec.m = o.data_dim;
  else spec.m = std::max(spec.m, spec.n_true);
  if (o.noise_std) spec.noise_std = *o.noise_std;
  if (o.limit) spec.count = std::min(spec.count, o.limit);
  try {
    Dataset ds = gen_synthetic(spec);
    return o.lambda == 1.0 ? ds : ds.scaled(o.lambda);
  } catch (const std::logic_error& e) {
    throw UsageError(e.what());
  }
}

std::optional<Dataset> make_test_dataset(const RunOptions& o) {
  if (o.test_images.empty()) return std::nullopt;
  std::optional<std::filesystem::path> labels;
  if (!o.test_labels.empty()) labels = o.test_labels;
  return load_idx(o.test_images, labels, 0, o.lambda);
}

RunSummary execute_run(const RunOptions& o) {
  const TrainConfig config = make_train_config(o);
  const Dataset data = make_dataset(o);
  const std::optional<Dataset> test = make_test_dataset(o);
  if (test && test->dim() != data.dim()) throw UsageError("test images differ in size from train");

  RunSummary summary;
  summary.result = train(data, config);
  const Dataset& eval = test ? *test : data;
  summary.bound_split = test ? "test" : "train";
  const MlpVae& model = summary.result.model;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (summary.result.log.diverged) {
    summary.final_bound = summary.residual_median = summary.residual_p90 = nan;
    summary.recon_rms_over_lambda = nan;
    return summary;
  }
  Rng eval_rng = Rng(o.seed).split(3);
  summary.final_bound = evaluate_bound(model, eval, config.objective,
                                       static_cast<int>(o.eval_samples), eval_rng);

  const auto xs = eval.xs.mat();
  const bool logits = config.objective.likelihood.kind == LikelihoodKind::BernoulliLogits;
  double sq = 0.0;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const Eigen::VectorXd x = xs.row(i).transpose();
    Eigen::VectorXd rec = model.decode_mean(model.encode_mean(x));
    if (logits) rec = rec.unaryExpr(&sigmoid);
    sq += (rec - x).squaredNorm();
  }
  summary.recon_rms_over_lambda = std::sqrt(sq / static_cast<double>(xs.size())) / o.lambda;

  summary.residual_median = summary.residual_p90 = nan;
  if (config.objective.likelihood.kind == LikelihoodKind::GaussianFixed) {
    const theory::AutoencoderProbe probe{
        [&model](const Eigen::VectorXd& x) { return posterior(model, x); },
        [&model](const Eigen::VectorXd& z) { return model.decode_mean(z); }};
    const auto rows = std::min<Eigen::Index>(xs.rows(), kResidualProbe);
    const theory::StationarityReport rep = theory::stationarity_residuals(
        probe, xs.topRows(rows), model.prior_var(), config.objective.likelihood.fixed_var);
    summary.residual_median = rep.summary.at("mean_residual").median;
    summary.residual_p90 = rep.summary.at("mean_residual").p90;
  }
  return summary;
}

void write_metrics_csv(const MetricsLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kMetricsHeader << '\n';
  char buf[256];
  for (const MetricsRow& r : log.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.objective,
                  r.kl_term, r.loglik_term, r.tr_s2, r.baggins_t_median);
    out << buf;
  }
}

}  // namespace bilbo::cli
