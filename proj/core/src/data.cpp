#include "bilbo/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "bilbo/rng.hpp"

namespace bilbo {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::string& what) {
  if (offset + 4 > bytes.size()) throw ParseError(what + ": truncated header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// m x k matrix with orthonormal columns.
Eigen::MatrixXd random_orthonormal(std::size_t m, std::size_t k, Rng& rng) {
  Eigen::MatrixXd g(m, k);
  for (Eigen::Index j = 0; j < g.cols(); ++j) g.col(j) = rng.normal_vector(g.rows());
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(m, k);
}

}  // namespace

void Dataset::validate() const {
  if (xs.rank() != 2 || xs.rows() < 1) throw ContractError("Dataset: needs an N x m matrix, N >= 1");
  if (!(scale_lambda > 0.0)) throw ContractError("Dataset: lambda must be > 0");
  if (!xs.all_finite()) throw ContractError("Dataset: non-finite values");
  if (labels && labels->size() != xs.rows()) throw ContractError("Dataset: label count mismatch");
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw DimensionError("Dataset::slice: range exceeds dataset");
  Dataset out = *this;
  out.xs = Tensor::from_eigen(RowMatrix(xs.mat().middleRows(static_cast<Eigen::Index>(begin),
                                                            static_cast<Eigen::Index>(count))));
  if (labels) {
    out.labels = std::vector<int>(labels->begin() + static_cast<std::ptrdiff_t>(begin),
                                  labels->begin() + static_cast<std::ptrdiff_t>(begin + count));
  }
  return out;
}

Dataset Dataset::scaled(double lambda) const {
  if (!(lambda > 0.0)) throw ContractError("Dataset::scaled: lambda must be > 0");
  Dataset out = *this;
  for (double& v : out.xs.storage()) v *= lambda;
  out.scale_lambda *= lambda;
  if (out.truth) {
    out.truth->a *= lambda;
    out.truth->noise_var *= lambda * lambda;
  }
  return out;
}

Dataset load_idx(const std::filesystem::path& images,
                 const std::optional<std::filesystem::path>& labels, std::size_t limit,
                 double lambda) {
  if (!(lambda > 0.0)) throw ContractError("load_idx: lambda must be > 0");
  const std::vector<std::uint8_t> img = read_file(images);
  const std::string name = images.filename().string();
  if (read_be32(img, 0, name) != kImageMagic) {
    throw ParseError(name + ": bad image magic, expected 0x00000803", 0);
  }
  const std::size_t count = read_be32(img, 4, name);
  const std::size_t rows = read_be32(img, 8, name);
  const std::size_t cols = read_be32(img, 12, name);
  const std::size_t pixels = rows * cols;
  if (pixels == 0) throw ParseError(name + ": zero image size", 8);
  if (img.size() != 16 + count * pixels) {
    throw ParseError(name + ": payload holds " + std::to_string(img.size() - 16) +
                         " bytes, header declares " + std::to_string(count * pixels),
                     std::min(img.size(), 16 + count * pixels));
  }
  if (count == 0) throw ParseError(name + ": no images", 4);

  std::optional<std::vector<int>> label_values;
  if (labels) {
    const std::vector<std::uint8_t> lab = read_file(*labels);
    const std::string lname = labels->filename().string();
    if (read_be32(lab, 0, lname) != kLabelMagic) {
      throw ParseError(lname + ": bad label magic, expected 0x00000801", 0);
    }
    const std::size_t lcount = read_be32(lab, 4, lname);
    if (lcount != count) {
      throw ParseError(lname + ": " + std::to_string(lcount) + " labels for " +
                           std::to_string(count) + " images",
                       4);
    }
    if (lab.size() != 8 + lcount) {
      throw ParseError(lname + ": label payload size mismatch", std::min(lab.size(), 8 + lcount));
    }
    label_values = std::vector<int>(lab.begin() + 8, lab.end());
  }

  const std::size_t keep = limit == 0 ? count : std::min(limit, count);
  Dataset ds;
  ds.xs = Tensor::matrix(keep, pixels);
  auto out = ds.xs.storage().begin();
  const double scale = lambda / 255.0;
  for (std::size_t i = 0; i < keep * pixels; ++i) out[static_cast<std::ptrdiff_t>(i)] = img[16 + i] * scale;
  if (label_values) {
    label_values->resize(keep);
    ds.labels = std::move(label_values);
  }
  ds.scale_lambda = lambda;
  ds.image_rows = rows;
  ds.image_cols = cols;
  ds.meta = "idx:" + images.string();
  return ds;
}

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                      std::size_t count, std::size_t rows, std::size_t cols) {
  if (pixels.size() != count * rows * cols) {
    throw DimensionError("write_idx_images: payload size does not match count x rows x cols");
  }
  std::vector<std::uint8_t> bytes;
  bytes.reserve(16 + pixels.size());
  put_be32(bytes, kImageMagic);
  put_be32(bytes, static_cast<std::uint32_t>(count));
  put_be32(bytes, static_cast<std::uint32_t>(rows));
  put_be32(bytes, static_cast<std::uint32_t>(cols));
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file(path, bytes);
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> bytes;
  put_be32(bytes, kLabelMagic);
  put_be32(bytes, static_cast<std::uint32_t>(labels.size()));
  bytes.insert(bytes.end(), labels.begin(), labels.end());
  write_file(path, bytes);
}

std::vector<std::uint8_t> to_pixel_bytes(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(ds.xs.size());
  for (double v : ds.xs.data()) {
    const double p = std::round(v / ds.scale_lambda * 255.0);
    if (p < 0.0 || p > 255.0) throw ContractError("to_pixel_bytes: value outside the pixel range");
    out.push_back(static_cast<std::uint8_t>(p));
  }
  return out;
}

std::string_view to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::AnisotropicGaussian: return "gaussian";
    case SyntheticKind::LinearManifold: return "linear";
    case SyntheticKind::RingMixture: return "ring";
  }
  return "unknown";
}

std::optional<SyntheticKind> parse_synthetic_kind(std::string_view name) {
  for (auto kind : {SyntheticKind::AnisotropicGaussian, SyntheticKind::LinearManifold,
                    SyntheticKind::RingMixture}) {
    if (to_string(kind) == name) return kind;
  }
  return std::nullopt;
}

void SyntheticSpec::validate() const {
  if (m == 0 || count == 0) throw ContractError("SyntheticSpec: m and count must be positive");
  if (noise_std < 0.0) throw ContractError("SyntheticSpec: noise_std must be >= 0");
  if (kind == SyntheticKind::RingMixture) {
    if (m < 2) throw ContractError("SyntheticSpec: ring data needs m >= 2");
    if (ring_components == 0 || !(ring_bump_std >= 0.0)) {
      throw ContractError("SyntheticSpec: ring needs components >= 1 and bump std >= 0");
    }
    return;
  }
  if (n_true == 0 || n_true > m) throw ContractError("SyntheticSpec: need 1 <= n_true <= m");
  if (static_cast<std::size_t>(variances.size()) != n_true) {
    throw DimensionError("SyntheticSpec: expected " + std::to_string(n_true) + " variances");
  }
  if ((variances.array() < 0.0).any()) throw ContractError("SyntheticSpec: variances must be >= 0");
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng basis_rng = root.split(0);
  Rng sample_rng = root.split(1);
  const auto m = static_cast<Eigen::Index>(spec.m);
  RowMatrix xs(static_cast<Eigen::Index>(spec.count), m);
  Dataset ds;

  if (spec.kind == SyntheticKind::RingMixture) {
    const Eigen::MatrixXd embed =
        spec.m == 2 ? Eigen::MatrixXd::Identity(2, 2) : random_orthonormal(spec.m, 2, basis_rng);
    std::vector<int> labels(spec.count);
    const double two_pi = 2.0 * std::acos(-1.0);
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      const auto k = static_cast<int>(sample_rng.below(spec.ring_components));
      const double angle = two_pi * k / static_cast<double>(spec.ring_components);
      Eigen::Vector2d p(spec.ring_radius * std::cos(angle), spec.ring_radius * std::sin(angle));
      p += spec.ring_bump_std * sample_rng.normal_vector(2);
      xs.row(i) = (embed * p).transpose() + spec.noise_std * sample_rng.normal_vector(m).transpose();
      labels[static_cast<std::size_t>(i)] = k;
    }
    ds.labels = std::move(labels);
  } else {
    LinearTruth truth;
    if (spec.kind == SyntheticKind::AnisotropicGaussian) {
      truth.a = Eigen::MatrixXd::Identity(m, static_cast<Eigen::Index>(spec.n_true));
    } else {
      truth.a = random_orthonormal(spec.m, spec.n_true, basis_rng);
    }
    truth.latent_var = spec.variances;
    truth.noise_var = spec.noise_std * spec.noise_std;
    const Eigen::VectorXd sd = spec.variances.cwiseSqrt();
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      const Eigen::VectorXd u = sd.cwiseProduct(sample_rng.normal_vector(sd.size()));
      xs.row(i) = (truth.a * u).transpose() + spec.noise_std * sample_rng.normal_vector(m).transpose();
    }
    ds.truth = std::move(truth);
  }
  ds.xs = Tensor::from_eigen(xs);
  ds.meta = "synthetic:" + std::string(to_string(spec.kind)) + " seed=" + std::to_string(spec.seed);
  return ds;
}

double ppca_log_evidence(const Eigen::Ref<const RowMatrix>& xs, const Eigen::MatrixXd& a,
                         const Eigen::VectorXd& latent_var, double likelihood_var) {
  if (!(likelihood_var > 0.0)) throw ContractError("ppca_log_evidence: T must be > 0");
  if (a.rows() != xs.cols() || a.cols() != latent_var.size()) {
    throw DimensionError("ppca_log_evidence: A, latent variances and data disagree");
  }
  const double m = static_cast<double>(xs.cols());
  Eigen::MatrixXd cov = a * latent_var.asDiagonal() * a.transpose();
  cov.diagonal().array() += likelihood_var;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd lambda = eig.eigenvalues();
  const double log_det = lambda.array().log().sum();
  const Eigen::MatrixXd proj = xs * eig.eigenvectors();  // N x m in the eigenbasis
  const Eigen::VectorXd quad = proj.array().square().matrix() * lambda.cwiseInverse();
  return -0.5 * (m * kLog2Pi + log_det) - 0.5 * quad.mean();
}

double ppca_log_evidence(const Dataset& ds, double likelihood_var) {
  if (!ds.truth) throw ContractError("ppca_log_evidence: dataset has no linear ground truth");
  return ppca_log_evidence(ds.xs.mat(), ds.truth->a, ds.truth->latent_var, likelihood_var);
}

}  // namespace bilbo
