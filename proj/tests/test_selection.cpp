#include "calibfield/selection.hpp"
#include "calibfield/synth.hpp"

#include <doctest.h>

using namespace calibfield;
using Eigen::VectorXd;

namespace {

FieldEstimate field_of(const VectorXd& v) {
  FieldEstimate e;
  e.values = v;
  e.masses = VectorXd::Ones(v.size());
  e.starved.assign(static_cast<std::size_t>(v.size()), false);
  return e;
}

GridCell cell(double sigma, double lambda, double proxy) { return {sigma, lambda, proxy, 0, std::nullopt}; }

}  // namespace

TEST_CASE("proxy with a zero field is the Brier score; an exact field gives zero") {
  VectorXd f(3), y(3);
  f << 0.2, 0.7, 0.5;
  y << 0, 1, 1;
  CHECK(proxy_brier(f, y, field_of(VectorXd::Zero(3))) == doctest::Approx((0.04 + 0.09 + 0.25) / 3.0));
  CHECK(proxy_brier(f, y, field_of(y - f)) == 0.0);
  // Unclipped: a field pushing past 1 is still scored on the raw sum.
  VectorXd big(3);
  big << 0.0, 0.5, 0.0;
  CHECK(proxy_brier(f, y, field_of(big)) == doctest::Approx((0.04 + 0.04 + 0.25) / 3.0));
}

TEST_CASE("selection prefers the smallest proxy, then larger sigma, then larger lambda") {
  CHECK(select_cell({cell(0.1, 0, 0.3), cell(0.3, 0, 0.2), cell(1.0, 0, 0.25)}) == 1);
  CHECK(select_cell({cell(0.1, 0, 0.2), cell(0.3, 0, 0.2)}) == 1);
  CHECK(select_cell({cell(0.3, 0.01, 0.2), cell(0.3, 0, 0.2)}) == 0);
  CHECK(select_cell({cell(1.0, 0, 0.2), cell(0.3, 0.01, 0.2)}) == 0);
  CHECK_THROWS_AS(select_cell({}), ConfigError);
}

TEST_CASE("diagnostics by hand") {
  const std::vector<double> proxies{0.3, 0.1, 0.2, 0.4};
  const std::vector<double> oracle{0.2, 0.9, 0.3, 0.5};
  const auto d = selection_diagnostics(proxies, oracle, 1);
  REQUIRE(d.spearman);
  // Rank differences 1, 0, 1, -2: 1 - 6 * 6 / (4 * 15).
  CHECK(*d.spearman == doctest::Approx(0.4));
  CHECK(d.spread == doctest::Approx(0.7));
  CHECK(d.regret == 0.0);
  CHECK(selection_diagnostics(proxies, oracle, 0).regret == doctest::Approx(0.7));
}

TEST_CASE("flat oracle or a single cell leaves spearman absent") {
  CHECK_FALSE(selection_diagnostics({0.1, 0.2}, {0.5, 0.5}, 0).spearman);
  const auto single = selection_diagnostics({0.1}, {0.5}, 0);
  CHECK_FALSE(single.spearman);
  CHECK(single.regret == 0.0);
  CHECK(single.spread == 0.0);
}

TEST_CASE("grid search: sigma-major order, oracle scoring, job count invariance") {
  ThreeClusterSpec spec;
  spec.n = 600;
  const Dataset ds = gen_three_cluster(spec);
  const Splits s = split(ds, SplitSpec{});
  const NetArch arch{2, 16, 1, 8, 0.1, true};
  HyperGrid grid;
  grid.sigmas = {0.3, 1.0};
  grid.lambdas = {0.0, 0.01};
  TrainConfig config;
  config.max_epochs = 2;
  config.batch_size = 128;
  const SelectionResult one = grid_search(s.train, s.val, arch, grid, config, &s.test, 1);
  const SelectionResult two = grid_search(s.train, s.val, arch, grid, config, &s.test, 2);
  REQUIRE(one.cells.size() == 4);
  CHECK(one.cells[0].sigma == 0.3);
  CHECK(one.cells[1].lambda == 0.01);
  CHECK(one.cells[2].sigma == 1.0);
  CHECK(one.diagnostics.has_value());
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(one.cells[i].proxy == two.cells[i].proxy);
    CHECK(one.runs[i].params == two.runs[i].params);
    CHECK(one.cells[i].oracle_corr.has_value());
  }
  CHECK(one.chosen == two.chosen);
  CHECK(one.chosen == select_cell(one.cells));

  const SelectionResult blind = grid_search(s.train, s.val, arch, grid, config);
  CHECK_FALSE(blind.diagnostics.has_value());
  CHECK_FALSE(blind.cells[0].oracle_corr.has_value());
}

TEST_CASE("grid validation") {
  HyperGrid grid;
  grid.sigmas = {};
  CHECK_THROWS_AS(grid.validate(), ConfigError);
  grid.sigmas = {-1.0};
  CHECK_THROWS_AS(grid.validate(), ConfigError);
}
