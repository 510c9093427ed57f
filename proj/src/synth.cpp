#include "calibfield/synth.hpp"

#include "calibfield/rng.hpp"

#include <numbers>

namespace calibfield {

namespace {

// f = sigm(l), eta = sigm(l + shift), y ~ Bernoulli(eta), delta = eta - f.
void fill_outcomes(Dataset& ds, const Eigen::VectorXd& logits, const Eigen::VectorXd& shifts,
                   std::uint64_t seed) {
  const Index n = logits.size();
  Rng labels(seed, Stream::Labels);
  ds.confidences.resize(n);
  ds.outcomes.resize(n);
  ds.true_field = Eigen::VectorXd(n);
  for (Index i = 0; i < n; ++i) {
    const double f = sigmoid(logits(i));
    const double eta = sigmoid(logits(i) + shifts(i));
    ds.confidences(i) = f;
    ds.outcomes(i) = labels.bernoulli(eta) ? 1.0 : 0.0;
    (*ds.true_field)(i) = eta - f;
  }
}

}  // namespace

void ThreeClusterSpec::validate() const {
  if (n < 3) throw ConfigError("three_cluster: n must be at least 3");
  if (!(cluster_std > 0.0)) throw ConfigError("three_cluster: cluster_std must be positive");
  if (!(logit_noise_std >= 0.0)) throw ConfigError("three_cluster: logit_noise_std must be >= 0");
}

void SinusoidSpec::validate() const {
  if (n < 1) throw ConfigError("sinusoidal: n must be at least 1");
  if (!(amplitude >= 0.0)) throw ConfigError("sinusoidal: amplitude must be >= 0");
  if (frequency < 1) throw ConfigError("sinusoidal: frequency k must be a positive integer");
  if (std::abs(direction.norm() - 1.0) > 1e-12) throw ConfigError("sinusoidal: direction u must be a unit vector");
  if (!(logit_noise_std >= 0.0)) throw ConfigError("sinusoidal: logit_noise_std must be >= 0");
}

double SinusoidSpec::shift(const Eigen::Vector2d& x) const {
  return amplitude * std::sin(2.0 * std::numbers::pi * frequency * direction.dot(x));
}

Dataset gen_three_cluster(const ThreeClusterSpec& spec) {
  spec.validate();
  Rng membership(spec.seed, Stream::Membership);
  Rng positions(spec.seed, Stream::Positions);
  Rng noise(spec.seed, Stream::LogitNoise);

  Dataset ds;
  ds.embeddings.resize(spec.n, 2);
  ds.group_labels = Eigen::VectorXi(spec.n);
  Eigen::VectorXd logits(spec.n);
  Eigen::VectorXd shifts(spec.n);
  for (Index i = 0; i < spec.n; ++i) {
    const int c = static_cast<int>(membership.below(3));
    const auto& center = spec.cluster_centers[static_cast<std::size_t>(c)];
    const double x0 = center.x() + spec.cluster_std * positions.normal();
    const double x1 = center.y() + spec.cluster_std * positions.normal();
    ds.embeddings(i, 0) = x0;
    ds.embeddings(i, 1) = x1;
    (*ds.group_labels)(i) = c;
    logits(i) = spec.logit_direction.x() * x0 + spec.logit_direction.y() * x1 +
                spec.logit_noise_std * noise.normal();
    shifts(i) = spec.shifts[static_cast<std::size_t>(c)];
  }
  fill_outcomes(ds, logits, shifts, spec.seed);
  ds.group_names = {"cluster0", "cluster1", "cluster2"};
  return ds;
}

Dataset gen_sinusoidal(const SinusoidSpec& spec) {
  spec.validate();
  Rng positions(spec.seed, Stream::Positions);
  Rng noise(spec.seed, Stream::LogitNoise);

  Dataset ds;
  ds.embeddings.resize(spec.n, 2);
  Eigen::VectorXd logits(spec.n);
  Eigen::VectorXd shifts(spec.n);
  for (Index i = 0; i < spec.n; ++i) {
    const Eigen::Vector2d x(positions.uniform(), positions.uniform());
    ds.embeddings.row(i) = x.transpose();
    logits(i) = spec.logit_direction.dot(x) + spec.logit_noise_std * noise.normal();
    shifts(i) = spec.shift(x);
  }
  fill_outcomes(ds, logits, shifts, spec.seed);
  return ds;
}

}  // namespace calibfield
