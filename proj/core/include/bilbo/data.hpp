#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bilbo/tensor.hpp"

namespace bilbo {

/// Malformed input file; `offset` is the byte position where parsing failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Generating parameters of a linear-Gaussian dataset:
/// x = A u + noise, u ~ N(0, diag(latent_var)), noise ~ N(0, noise_var I).
struct LinearTruth {
  Eigen::MatrixXd a;  // m x n_true
  Eigen::VectorXd latent_var;
  double noise_var = 0.0;
};

struct Dataset {
  Tensor xs;  // N x m
  std::optional<std::vector<int>> labels;
  double scale_lambda = 1.0;
  std::string meta;
  /// Image geometry for IDX data; zero otherwise.
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;
  std::optional<LinearTruth> truth;

  std::size_t size() const { return xs.rows(); }
  std::size_t dim() const { return xs.cols(); }
  /// Throws ContractError unless N >= 1, lambda > 0 and every value is finite.
  void validate() const;

  /// Rows [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const;
  /// Multiplies every value by `lambda` (compounding any earlier scale).
  Dataset scaled(double lambda) const;
};

/// Reads big-endian IDX image (magic 0x00000803) and optional label
/// (0x00000801) files. Pixels map to [0, 1] and are then multiplied by
/// lambda. limit == 0 keeps every image.
Dataset load_idx(const std::filesystem::path& images,
                 const std::optional<std::filesystem::path>& labels, std::size_t limit = 0,
                 double lambda = 1.0);

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                      std::size_t count, std::size_t rows, std::size_t cols);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// Inverse of the load scaling: round(x / lambda * 255) per value.
std::vector<std::uint8_t> to_pixel_bytes(const Dataset& ds);

enum class SyntheticKind { AnisotropicGaussian, LinearManifold, RingMixture };

/// CLI spelling: gaussian, linear, ring.
std::string_view to_string(SyntheticKind kind);
std::optional<SyntheticKind> parse_synthetic_kind(std::string_view name);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::AnisotropicGaussian;
  std::size_t n_true = 2;
  std::size_t m = 2;
  /// Latent variances, n_true entries.
  Eigen::VectorXd variances;
  double noise_std = 0.0;
  std::size_t count = 10000;
  std::uint64_t seed = 0;
  // RingMixture only.
  std::size_t ring_components = 8;
  double ring_radius = 4.0;
  double ring_bump_std = 0.3;

  void validate() const;
};

/// AnisotropicGaussian pads N(0, diag(variances)) with zero coordinates up to
/// m; LinearManifold uses random orthonormal columns for A; RingMixture places
/// Gaussian bumps on a circle and embeds the plane with orthonormal columns.
/// Isotropic noise of std noise_std is added in every case.
Dataset gen_synthetic(const SyntheticSpec& spec);

/// Mean log density of the rows of xs under N(0, A diag(latent_var) A^T + T I).
double ppca_log_evidence(const Eigen::Ref<const RowMatrix>& xs, const Eigen::MatrixXd& a,
                         const Eigen::VectorXd& latent_var, double likelihood_var);

/// Same, using the dataset's generating parameters. Throws ContractError when
/// the dataset has no linear ground truth.
double ppca_log_evidence(const Dataset& ds, double likelihood_var);

}  // namespace bilbo
