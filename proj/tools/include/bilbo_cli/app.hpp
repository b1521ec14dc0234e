#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bilbo/data.hpp"
#include "bilbo/model.hpp"
#include "bilbo/objectives.hpp"

namespace bilbo::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kDiverged = 3 };

/// Bad flags or an inconsistent configuration; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything needed to rebuild a dataset and a training run. Serialised
/// verbatim into manifest.json so a run can be replayed.
struct RunOptions {
  std::string objective = "bilbo";
  double sigma = 1.0;
  std::optional<double> tau;
  double lambda = 1.0;
  std::size_t latent = 2;
  std::size_t epochs = 1;
  std::size_t batch = 300;
  double lr = 0.001;
  std::uint64_t seed = 0;
  /// bernoulli, gaussian, learned or baggins; empty picks a default.
  std::string likelihood;
  double noise_var = 1.0;
  int mc_samples = 1;
  std::size_t hidden_layers = 3;
  std::size_t hidden_units = 200;
  std::size_t eval_every = 1;
  std::size_t eval_samples = 1;

  std::string mnist_images;
  std::string mnist_labels;
  std::string test_images;
  std::string test_labels;
  std::size_t limit = 0;

  std::string synthetic;
  std::size_t count = 0;
  std::size_t data_dim = 0;
  std::vector<double> variances;
  std::optional<double> noise_std;

  std::string out = "bilbo_run";
};

nlohmann::json to_json(const RunOptions& o);
RunOptions run_options_from_json(const nlohmann::json& j);

/// Resolved objective and training configuration. Throws UsageError.
TrainConfig make_train_config(const RunOptions& o);
/// Training data (scaled by lambda). Throws UsageError when no source is given.
Dataset make_dataset(const RunOptions& o);
/// Held-out data when test paths are given.
std::optional<Dataset> make_test_dataset(const RunOptions& o);

/// Outcome of one training run, as reported in manifests and sweeps.
struct RunSummary {
  TrainResult result;
  double final_bound = 0.0;
  std::string bound_split;
  double residual_median = 0.0;
  double residual_p90 = 0.0;
  /// RMS of x - decode(encode(x)) divided by lambda.
  double recon_rms_over_lambda = 0.0;
};

RunSummary execute_run(const RunOptions& o);

/// metrics.csv header, schema version 1.
inline constexpr const char* kMetricsHeader =
    "step,objective,kl_term,loglik_term,trS2,baggins_t_median";
inline constexpr const char* kScatterHeader = "mu_1,mu_2,sigma2_1,sigma2_2,label";
inline constexpr const char* kSweepHeader =
    "axis,value,final_bound,residual_median,residual_p90,recon_rms_over_lambda,diverged";

void write_metrics_csv(const MetricsLog& log, const std::filesystem::path& path);

struct VerifyOptions {
  std::vector<std::string> only;
  std::optional<std::size_t> dim;
  double perturb_jacobian = 0.0;
  std::uint64_t seed = 12345;
  std::size_t mc_samples = 1000000;
};

struct CheckResult {
  std::string name;
  std::string metric;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

/// Names accepted by --only.
const std::vector<std::string>& identity_check_names();

/// Runs the identity suite; throws UsageError for unknown check names.
std::vector<CheckResult> run_identity_suite(const VerifyOptions& options);

void print_check_table(const std::vector<CheckResult>& results, std::ostream& out);

/// Full command line entry point; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bilbo::cli
