#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <ostream>

#include <CLI11.hpp>

#include "bilbo/model.hpp"
#include "bilbo_cli/app.hpp"

#ifndef BILBO_KIT_VERSION_STRING
#define BILBO_KIT_VERSION_STRING "unknown"
#endif

namespace bilbo::cli {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::system_clock;

std::string utc_timestamp(Clock::time_point t) {
  const std::time_t tt = Clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const fs::path& dir, const std::string& command, nlohmann::json config,
                    const std::vector<std::string>& outputs, nlohmann::json result,
                    Clock::time_point start) {
  nlohmann::json m;
  m["schema"] = 1;
  m["command"] = command;
  m["version"] = BILBO_KIT_VERSION_STRING;
  m["config"] = std::move(config);
  m["start"] = utc_timestamp(start);
  m["end"] = utc_timestamp(Clock::now());
  m["output_dir"] = fs::absolute(dir).string();
  m["outputs"] = outputs;
  m["csv_schema"] = {{"metrics.csv", 1}, {"scatter.csv", 1}, {"sweep.csv", 1}};
  m["result"] = std::move(result);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << m.dump(2) << '\n';
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create output directory " + dir.string() + ": " + ec.message());
}

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--objective", o.objective, "elbo-learned, elbo-const, bilbo or bilbo-baggins");
  cmd->add_option("--sigma", o.sigma, "constant posterior std; Sigma = sigma^2 I");
  cmd->add_option("--tau", o.tau, "BAGGINS information factor");
  cmd->add_option("--lambda", o.lambda, "data scale factor");
  cmd->add_option("--latent", o.latent, "latent dimension");
  cmd->add_option("--epochs", o.epochs);
  cmd->add_option("--batch", o.batch);
  cmd->add_option("--lr", o.lr);
  cmd->add_option("--seed", o.seed);
  cmd->add_option("--likelihood", o.likelihood, "bernoulli, gaussian, learned or baggins");
  cmd->add_option("--noise-var", o.noise_var, "fixed Gaussian likelihood variance T");
  cmd->add_option("--mc", o.mc_samples, "latent draws per example in training");
  cmd->add_option("--hidden-layers", o.hidden_layers);
  cmd->add_option("--hidden-units", o.hidden_units);
  cmd->add_option("--eval-every", o.eval_every, "log every N steps");
  cmd->add_option("--eval-samples", o.eval_samples, "latent draws for the final bound");
  cmd->add_option("--mnist-images", o.mnist_images);
  cmd->add_option("--mnist-labels", o.mnist_labels);
  cmd->add_option("--test-images", o.test_images, "held-out IDX images for the final bound");
  cmd->add_option("--test-labels", o.test_labels);
  cmd->add_option("--limit", o.limit, "keep at most N training examples");
  cmd->add_option("--synthetic", o.synthetic, "ring, gaussian or linear");
  cmd->add_option("--count", o.count, "synthetic example count");
  cmd->add_option("--data-dim", o.data_dim, "synthetic data dimension m");
  cmd->add_option("--variances", o.variances, "synthetic latent variances");
  cmd->add_option("--noise-std", o.noise_std, "synthetic isotropic noise std");
  cmd->add_option("--out", o.out, "output directory");
}

nlohmann::json summary_json(const RunSummary& s) {
  const MetricsLog& log = s.result.log;
  return {{"final_bound", number_or_null(s.final_bound)},
          {"bound_split", s.bound_split},
          {"steps", log.steps},
          {"clip_events", log.clip_events},
          {"skipped_steps", log.skipped_steps},
          {"variance_clamps", log.clamps.variance_clamps},
          {"baggins_floors", log.clamps.baggins_floors},
          {"diverged", log.diverged},
          {"diagnostic", log.diagnostic},
          {"residual_median", number_or_null(s.residual_median)},
          {"recon_rms_over_lambda", number_or_null(s.recon_rms_over_lambda)}};
}

int cmd_train(RunOptions o, const std::string& from_manifest, bool out_given, std::ostream& out,
              std::ostream& err) {
  const auto start = Clock::now();
  if (!from_manifest.empty()) {
    std::ifstream in(from_manifest);
    if (!in) throw UsageError("cannot open manifest " + from_manifest);
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("manifest is not valid JSON: ") + e.what());
    }
    const std::string out_dir = o.out;
    o = run_options_from_json(m.at("config"));
    o.out = out_given ? out_dir : m.at("output_dir").get<std::string>() + "-replay";
  }
  make_train_config(o);  // reject bad flags before touching the file system
  const fs::path dir = o.out;
  prepare_dir(dir);
  const RunSummary s = execute_run(o);
  write_metrics_csv(s.result.log, dir / "metrics.csv");
  std::vector<std::string> outputs = {"metrics.csv"};
  if (!s.result.log.diverged) {
    save_checkpoint(s.result.model, dir / "model.bvae");
    outputs.push_back("model.bvae");
  }
  nlohmann::json config = to_json(o);
  if (!from_manifest.empty()) config["replayed_from"] = from_manifest;
  write_manifest(dir, "train", config, outputs, summary_json(s), start);
  if (s.result.log.diverged) {
    err << "training diverged: " << s.result.log.diagnostic << '\n';
    return kDiverged;
  }
  out << "steps " << s.result.log.steps << ", " << s.bound_split << " bound per example "
      << s.final_bound << ", outputs in " << dir.string() << '\n';
  return kOk;
}

int cmd_verify(const VerifyOptions& v, std::ostream& out, std::ostream& err) {
  const std::vector<CheckResult> results = run_identity_suite(v);
  print_check_table(results, out);
  int failures = 0;
  for (const CheckResult& r : results) {
    if (!r.passed) {
      ++failures;
      err << "FAILED " << r.name << ": " << r.metric << " = " << r.value << " (tolerance "
          << r.tolerance << ")\n";
    }
  }
  return failures ? kVerifyFailed : kOk;
}

int cmd_sweep(RunOptions o, const std::string& axis, std::vector<double> values, std::ostream& out,
              std::ostream& err) {
  const auto start = Clock::now();
  if (axis != "tau" && axis != "lambda" && axis != "sigma") {
    throw UsageError("--axis must be tau, lambda or sigma");
  }
  if (values.empty()) {
    if (axis == "tau") values = {0.1, 0.2, 0.5, 1.0, 5.0};
    else if (axis == "lambda") values = {0.5, 1.0, 10.0, 100.0};
    else values = {0.1, 1.0, 10.0};
  }
  if (axis == "lambda" && o.likelihood.empty() && o.objective != "bilbo-baggins") {
    o.likelihood = "gaussian";
  }
  if (axis == "tau" && !o.tau) o.tau = values.front();
  std::vector<RunOptions> points;
  for (double v : values) {
    RunOptions p = o;
    if (axis == "tau") p.tau = v;
    else if (axis == "lambda") p.lambda = v;
    else p.sigma = v;
    make_train_config(p);
    points.push_back(p);
  }
  const fs::path dir = o.out;
  prepare_dir(dir);
  std::ofstream csv(dir / "sweep.csv");
  if (!csv) throw std::runtime_error("cannot write sweep.csv");
  csv << kSweepHeader << '\n';
  std::vector<std::string> outputs = {"sweep.csv"};
  nlohmann::json results = nlohmann::json::array();
  bool diverged = false;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const RunSummary s = execute_run(points[i]);
    const std::string metrics = "metrics_" + std::to_string(i) + ".csv";
    write_metrics_csv(s.result.log, dir / metrics);
    outputs.push_back(metrics);
    char row[512];
    std::snprintf(row, sizeof row, "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", axis.c_str(),
                  values[i], s.final_bound, s.residual_median, s.residual_p90,
                  s.recon_rms_over_lambda, s.result.log.diverged ? 1 : 0);
    csv << row;
    csv.flush();
    results.push_back(summary_json(s));
    diverged = diverged || s.result.log.diverged;
    out << axis << "=" << values[i] << ": bound " << s.final_bound << '\n';
  }
  nlohmann::json config = to_json(o);
  config["axis"] = axis;
  config["values"] = values;
  write_manifest(dir, "sweep", config, outputs, {{"points", results}}, start);
  if (diverged) {
    err << "at least one sweep point diverged; see sweep.csv\n";
    return kDiverged;
  }
  return kOk;
}

int cmd_export_scatter(const RunOptions& o, const std::string& checkpoint, std::ostream& out) {
  const auto start = Clock::now();
  const MlpVae model = load_checkpoint(checkpoint);
  if (model.spec().latent_dim != 2) {
    throw UsageError("export-scatter needs a 2-D latent space, checkpoint has " +
                     std::to_string(model.spec().latent_dim));
  }
  const Dataset data = make_dataset(o);
  if (data.dim() != model.spec().data_dim) throw UsageError("data dimension differs from model");
  const fs::path dir = o.out;
  prepare_dir(dir);
  std::ofstream csv(dir / "scatter.csv");
  if (!csv) throw std::runtime_error("cannot write scatter.csv");
  csv << kScatterHeader << '\n';
  const auto xs = data.xs.mat();
  char row[256];
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const DiagGaussian q = posterior(model, xs.row(i).transpose());
    const int label = data.labels ? (*data.labels)[static_cast<std::size_t>(i)] : -1;
    std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g,%.17g,%d\n", q.mean[0], q.mean[1], q.var[0],
                  q.var[1], label);
    csv << row;
  }
  nlohmann::json config = to_json(o);
  config["checkpoint"] = checkpoint;
  write_manifest(dir, "export-scatter", config, {"scatter.csv"}, {{"rows", xs.rows()}}, start);
  out << "wrote " << xs.rows() << " rows to " << (dir / "scatter.csv").string() << '\n';
  return kOk;
}

int cmd_sample(const std::string& checkpoint, std::size_t count, std::uint64_t seed,
               const std::string& likelihood, const std::string& out_dir, std::ostream& out) {
  const auto start = Clock::now();
  if (likelihood != "bernoulli" && likelihood != "gaussian") {
    throw UsageError("--likelihood must be bernoulli or gaussian for sampling");
  }
  const MlpVae model = load_checkpoint(checkpoint);
  const fs::path dir = out_dir;
  prepare_dir(dir);
  Rng rng(seed);
  const Eigen::VectorXd sd = model.prior_var().cwiseSqrt();
  std::ofstream bin(dir / "samples.f64", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write samples.f64");
  for (std::size_t i = 0; i < count; ++i) {
    const Eigen::VectorXd z = sd.cwiseProduct(rng.normal_vector(sd.size()));
    Eigen::VectorXd x = model.decode_mean(z);
    if (likelihood == "bernoulli") x = x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    bin.write(reinterpret_cast<const char*>(x.data()), static_cast<std::streamsize>(x.size() * sizeof(double)));
  }
  const nlohmann::json config = {{"checkpoint", checkpoint}, {"count", count}, {"seed", seed},
                                 {"likelihood", likelihood}};
  write_manifest(dir, "sample", config, {"samples.f64"},
                 {{"rows", count}, {"cols", model.spec().data_dim}, {"dtype", "f64 little-endian"}},
                 start);
  out << "wrote " << count << " x " << model.spec().data_dim << " samples\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gaussian VAE experiments: training, identity checks, sweeps and exports",
               "bilbo_kit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(BILBO_KIT_VERSION_STRING));

  RunOptions train_opts;
  std::string from_manifest;
  CLI::App* train = app.add_subcommand("train", "train one model");
  add_run_options(train, train_opts);
  train->add_option("--from-manifest", from_manifest, "replay the config of an earlier run");

  VerifyOptions verify_opts;
  std::size_t verify_dim = 0;
  CLI::App* verify = app.add_subcommand("verify", "run the identity suite");
  verify->add_option("--only", verify_opts.only, "run only the named checks");
  verify->add_option("--dim", verify_dim, "fix the latent dimension of random instances");
  verify->add_option("--perturb-jacobian", verify_opts.perturb_jacobian,
                     "scale the analytic decoder Jacobian by (1 + eps) (negative control)");
  verify->add_option("--seed", verify_opts.seed);
  verify->add_option("--samples", verify_opts.mc_samples, "Monte-Carlo draws for gradient checks");

  RunOptions sweep_opts;
  std::string axis;
  std::vector<double> values;
  CLI::App* sweep = app.add_subcommand("sweep", "train one model per grid value");
  add_run_options(sweep, sweep_opts);
  sweep->add_option("--axis", axis, "tau, lambda or sigma")->required();
  sweep->add_option("--values", values, "grid values");

  RunOptions scatter_opts;
  std::string scatter_ckpt;
  CLI::App* scatter = app.add_subcommand("export-scatter", "posterior means and variances per example");
  add_run_options(scatter, scatter_opts);
  scatter->add_option("--checkpoint", scatter_ckpt)->required();

  std::string sample_ckpt, sample_lik = "bernoulli", sample_out = "bilbo_samples";
  std::size_t sample_count = 64;
  std::uint64_t sample_seed = 0;
  CLI::App* sample = app.add_subcommand("sample", "decode draws from the stored prior");
  sample->add_option("--checkpoint", sample_ckpt)->required();
  sample->add_option("--count", sample_count);
  sample->add_option("--seed", sample_seed);
  sample->add_option("--likelihood", sample_lik, "bernoulli applies a sigmoid to the decoder");
  sample->add_option("--out", sample_out);

  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (train->parsed()) {
      return cmd_train(train_opts, from_manifest, train->count("--out") > 0, out, err);
    }
    if (verify->parsed()) {
      if (verify->count("--dim")) verify_opts.dim = verify_dim;
      return cmd_verify(verify_opts, out, err);
    }
    if (sweep->parsed()) return cmd_sweep(sweep_opts, axis, values, out, err);
    if (scatter->parsed()) return cmd_export_scatter(scatter_opts, scatter_ckpt, out);
    if (sample->parsed()) {
      return cmd_sample(sample_ckpt, sample_count, sample_seed, sample_lik, sample_out, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace bilbo::cli
