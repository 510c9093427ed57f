#pragma once

#include "calibfield/types.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace calibfield {

/// Mean squared difference between forecasts and outcomes.
double brier(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y);

struct ReliabilityBin {
  double lo = 0.0;
  double hi = 0.0;
  double mean_conf = 0.0;
  double accuracy = 0.0;
  Index count = 0;

  bool empty() const { return count == 0; }
};

struct ReliabilityDiagram {
  std::vector<ReliabilityBin> bins;

  /// Largest |accuracy - mean_conf| over nonempty bins.
  double max_deviation() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Equal-width bins on [0,1]; a confidence of exactly 1 lands in the last bin.
/// Empty bins keep zero means and a zero count.
ReliabilityDiagram binned_reliability(const Eigen::Ref<const Eigen::VectorXd>& f,
                                      const Eigen::Ref<const Eigen::VectorXd>& y, int n_bins = 10);

struct SmeceResult {
  double value = 0.0;
  double bandwidth = 0.0;
  int iterations = 0;
  double fixed_point_residual = 0.0;
};

/// Smoothed calibration error at a fixed bandwidth: mean over samples of the
/// absolute kernel-smoothed residual, with a Gaussian kernel of standard
/// deviation sigma reflected at 0 and 1.
double smoothed_ece(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                    double sigma);

/// Bandwidth chosen as the fixed point sigma = smoothed_ece(sigma).
SmeceResult smece(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y);

/// Absent when either input has zero variance.
std::optional<double> pearson(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);
std::optional<double> spearman(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

/// 1-based ranks with ties replaced by their average rank.
Eigen::VectorXd average_ranks(const Eigen::Ref<const Eigen::VectorXd>& v);

}  // namespace calibfield
