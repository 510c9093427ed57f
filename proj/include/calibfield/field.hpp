#pragma once

#include "calibfield/dataset.hpp"
#include "calibfield/net.hpp"
#include "calibfield/optim.hpp"
#include "calibfield/types.hpp"

#include <filesystem>
#include <limits>
#include <optional>
#include <vector>

namespace calibfield {

struct KernelConfig {
  double sigma = 0.3;

  void validate() const;
};

struct LossConfig {
  double lambda = 1e-2;
  double m_min = 20.0;

  void validate() const;
};

inline constexpr Index kDefaultChunk = 1024;
inline constexpr double kStarvationMass = 1e-300;

/// W(i,j) = exp(-|Q_i - B_j|^2 / sigma^2). Distances are accumulated one
/// coordinate at a time in a fixed order, so every entry is bitwise the same
/// whatever rows are evaluated together.
Eigen::MatrixXd kernel_weights(const Eigen::Ref<const Eigen::MatrixXd>& query,
                               const Eigen::Ref<const Eigen::MatrixXd>& bank, double sigma);

struct FieldEstimate {
  Eigen::VectorXd values;
  Eigen::VectorXd masses;
  std::vector<bool> starved;
  double sigma = 0.0;
  Index bank_size = 0;

  Index size() const { return values.size(); }
  Index starved_count() const;
};

/// Nadaraya-Watson average of bank residuals around each query. Queries are
/// processed in chunks of `chunk` rows; the q x b weight matrix is never held
/// in full.
FieldEstimate estimate_field(const Eigen::Ref<const Eigen::MatrixXd>& query,
                             const Eigen::Ref<const Eigen::MatrixXd>& bank_embeddings,
                             const Eigen::Ref<const Eigen::VectorXd>& bank_residuals, const KernelConfig& kernel,
                             Index chunk = kDefaultChunk);

/// Identity representation: the bank's stored embeddings are the geometry.
FieldEstimate estimate_field(const Eigen::Ref<const Eigen::MatrixXd>& query, const NeighbourBank& bank,
                             const KernelConfig& kernel, Index chunk = kDefaultChunk);

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  double mean_mass = 0.0;
  Matrix<Scalar> grad;  // dLoss / dEmbeddings
};

/// Minibatch discovery objective
///   -(1/n) sum_i dhat_i^2 + lambda (1/n) sum_i max(0, m_min - m_i)^2
/// with kernel sums over the whole batch including j = i.
template <typename Scalar>
LossResult<Scalar> discovery_loss(const Eigen::Ref<const Matrix<Scalar>>& embeddings,
                                  const Eigen::Ref<const Vector<Scalar>>& residuals, const KernelConfig& kernel,
                                  const LossConfig& loss);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double mean_mass = 0.0;
  double val_proxy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_proxy = std::numeric_limits<double>::infinity();

  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  NetParams<float> params;
  TrainHistory history;
};

/// Eval-mode representation of raw inputs, in double for kernel evaluation.
Eigen::MatrixXd embed(const NetParams<float>& params, const Eigen::Ref<const Eigen::MatrixXd>& x);

/// Adam on the discovery objective with per-epoch proxy early stopping. The
/// returned parameters are those of the best-proxy epoch (epoch 0 = init).
TrainResult train_field(const Dataset& train, const Dataset& val, const NetArch& arch, const KernelConfig& kernel,
                        const LossConfig& loss, const TrainConfig& config);

/// A trained representation together with the neighbour bank it smooths over.
struct FieldModel {
  NetParams<float> params;
  NeighbourBank bank;
  KernelConfig kernel;

  FieldModel(NetParams<float> p, NeighbourBank b, KernelConfig k);

  FieldEstimate predict(const Eigen::Ref<const Eigen::MatrixXd>& x) const;

 private:
  Eigen::MatrixXd bank_embedded_;
};

}  // namespace calibfield
