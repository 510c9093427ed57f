#include "calibfield/metrics.hpp"
#include "calibfield/rng.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace calibfield;
using Eigen::VectorXd;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST_CASE("brier by hand") {
  CHECK(brier(vec({0.8, 0.3, 0.6, 0.1}), vec({1, 0, 0, 0})) == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(brier(vec({1.0, 0.0}), vec({1, 0})) == 0.0);
}

TEST_CASE("reliability bins: edges, the f = 1 case and empty bins") {
  const auto d = binned_reliability(vec({0.05, 0.15, 0.15, 1.0}), vec({0, 1, 0, 1}), 10);
  REQUIRE(d.bins.size() == 10);
  CHECK(d.bins[0].count == 1);
  CHECK(d.bins[1].count == 2);
  CHECK(d.bins[1].accuracy == doctest::Approx(0.5));
  CHECK(d.bins[1].mean_conf == doctest::Approx(0.15));
  CHECK(d.bins[9].count == 1);
  CHECK(d.bins[5].empty());
  CHECK(d.bins[5].mean_conf == 0.0);
  CHECK(d.bins[3].lo == doctest::Approx(0.3));
  CHECK(d.bins[3].hi == doctest::Approx(0.4));
  CHECK(d.max_deviation() == doctest::Approx(0.35));
}

TEST_CASE("a calibrated forecaster stays inside binomial noise in every bin") {
  Rng rng(3, Stream::Probe);
  const Index n = 20000;
  VectorXd f(n), y(n);
  for (Index i = 0; i < n; ++i) {
    f[i] = rng.uniform();
    y[i] = rng.bernoulli(f[i]) ? 1.0 : 0.0;
  }
  const auto d = binned_reliability(f, y, 10);
  for (const auto& b : d.bins) {
    REQUIRE(b.count > 0);
    const double se = std::sqrt(b.mean_conf * (1.0 - b.mean_conf) / static_cast<double>(b.count));
    CHECK(std::abs(b.accuracy - b.mean_conf) < 4.0 * se + 1e-12);
  }
}

TEST_CASE("smoothed_ece matches the direct reflected sum") {
  Rng rng(4, Stream::Probe);
  const Index n = 300;
  VectorXd f(n), y(n);
  for (Index i = 0; i < n; ++i) {
    f[i] = rng.uniform();
    y[i] = rng.bernoulli(std::clamp(f[i] + 0.2, 0.0, 1.0)) ? 1.0 : 0.0;
  }
  for (double s : {0.01, 0.05, 0.2, 0.7}) {
    CHECK(smoothed_ece(f, y, s) == doctest::Approx(oracle::smoothed_ece(f, y, s)).epsilon(1e-10));
  }
}

TEST_CASE("smece is a fixed point and shrinks under calibration") {
  Rng rng(5, Stream::Probe);
  const Index n = 3000;
  VectorXd f(n), good(n), bad(n);
  for (Index i = 0; i < n; ++i) {
    f[i] = rng.uniform();
    const double u = rng.uniform();
    good[i] = u < f[i] ? 1.0 : 0.0;
    bad[i] = u < f[i] * f[i] ? 1.0 : 0.0;
  }
  const SmeceResult g = smece(f, good);
  const SmeceResult b = smece(f, bad);
  CHECK(g.fixed_point_residual <= 1e-6);
  CHECK(std::abs(smoothed_ece(f, good, g.bandwidth) - g.bandwidth) <= 1e-6);
  CHECK(g.value < 0.03);
  CHECK(b.value > 0.1);
}

TEST_CASE("smece on two samples") {
  const SmeceResult r = smece(vec({0.2, 0.8}), vec({0, 1}));
  CHECK(r.value >= 0.0);
  CHECK(r.value <= 1.0);
  CHECK(r.fixed_point_residual <= 1e-6);
  // Perfect hits: the only error is smoothing across the two points.
  const SmeceResult s = smece(vec({0.0, 1.0}), vec({0, 1}));
  CHECK(s.value < 1e-3);
}

TEST_CASE("pearson and spearman") {
  const VectorXd a = vec({1, 2, 3, 4, 5});
  CHECK(*pearson(a, 2.0 * a.array() + 1.0) == doctest::Approx(1.0));
  CHECK(*spearman(a, vec({10, 8, 5, 1, -3})) == doctest::Approx(-1.0));
  CHECK_FALSE(pearson(a, VectorXd::Constant(5, 2.0)).has_value());
  CHECK_FALSE(pearson(vec({1}), vec({1})).has_value());
}

TEST_CASE("average ranks handle ties like the oracle") {
  const VectorXd v = vec({3, 1, 3, 2, 3, 1});
  const VectorXd r = average_ranks(v);
  const auto want = oracle::ranks(v);
  for (Index i = 0; i < v.size(); ++i) CHECK(r[i] == doctest::Approx(want[static_cast<std::size_t>(i)]));
  CHECK(r[0] == doctest::Approx(5.0));
  CHECK(r[1] == doctest::Approx(1.5));
  const VectorXd w = vec({0.1, 0.4, 0.2, 0.5, 0.3, 0.05});
  const auto rw = oracle::ranks(w);
  CHECK(*spearman(v, w) == doctest::Approx(oracle::pearson(oracle::ranks(v), rw)).epsilon(1e-12));
}

TEST_CASE("length mismatches are configuration errors") {
  CHECK_THROWS_AS(brier(vec({0.1, 0.2}), vec({1})), ConfigError);
}
