#pragma once

#include "calibfield/dataset.hpp"

#include <array>
#include <cmath>

namespace calibfield {

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Three Gaussian clusters in the plane. Each cluster carries a logit shift
/// that separates the true conditional probability from the reported
/// confidence. Confidence ranges of the shifted clusters overlap, so their
/// opposite errors cancel when examples are grouped by confidence.
struct ThreeClusterSpec {
  Index n = 10000;
  std::array<Eigen::Vector2d, 3> cluster_centers{Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(3.0, 0.0),
                                                 Eigen::Vector2d(1.5, 2.6)};
  double cluster_std = 0.6;
  Eigen::Vector2d logit_direction = Eigen::Vector2d(1.0, -1.0) * (1.5 / std::sqrt(2.0));
  double logit_noise_std = 0.5;
  std::array<double, 3> shifts{-1.0, 0.0, 1.0};
  std::uint64_t seed = 0;

  void validate() const;
};

/// Uniform inputs on the unit square with logit shift A sin(2 pi k u.x).
struct SinusoidSpec {
  Index n = 10000;
  double amplitude = 0.6;
  int frequency = 3;
  Eigen::Vector2d direction = Eigen::Vector2d(1.0, 0.0);
  Eigen::Vector2d logit_direction = Eigen::Vector2d(1.0, -1.0) * (1.5 / std::sqrt(2.0));
  double logit_noise_std = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  double shift(const Eigen::Vector2d& x) const;
};

/// Group labels are cluster ids; true_field = eta - f.
Dataset gen_three_cluster(const ThreeClusterSpec& spec);

Dataset gen_sinusoidal(const SinusoidSpec& spec);

}  // namespace calibfield
