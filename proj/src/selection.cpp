#include "calibfield/selection.hpp"

#include "calibfield/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <thread>

namespace calibfield {

double proxy_brier(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                   const FieldEstimate& field) {
  if (f.size() != y.size() || f.size() != field.size()) {
    throw ConfigError("proxy_brier: confidence, outcome and field lengths differ");
  }
  if (f.size() == 0) throw ConfigError("proxy_brier: empty validation set");
  return (y - f - field.values).squaredNorm() / static_cast<double>(f.size());
}

void HyperGrid::validate() const {
  if (sigmas.empty() || lambdas.empty()) throw ConfigError("grid needs at least one sigma and one lambda");
  for (double s : sigmas) KernelConfig{s}.validate();
  for (double l : lambdas) LossConfig{l, m_min}.validate();
}

void SelectionResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "sigma,lambda,proxy,oracle_corr\n";
  char line[160];
  for (const auto& c : cells) {
    std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g,", c.sigma, c.lambda, c.proxy);
    out << line;
    if (c.oracle_corr) {
      std::snprintf(line, sizeof(line), "%.17g", *c.oracle_corr);
      out << line;
    }
    out << '\n';
  }
}

Index select_cell(const std::vector<GridCell>& cells) {
  if (cells.empty()) throw ConfigError("select_cell: no cells");
  Index best = 0;
  for (Index i = 1; i < static_cast<Index>(cells.size()); ++i) {
    const auto& c = cells[static_cast<std::size_t>(i)];
    const auto& b = cells[static_cast<std::size_t>(best)];
    if (c.proxy < b.proxy ||
        (c.proxy == b.proxy && (c.sigma > b.sigma || (c.sigma == b.sigma && c.lambda > b.lambda)))) {
      best = i;
    }
  }
  return best;
}

SelectionDiagnostics selection_diagnostics(const std::vector<double>& proxies, const std::vector<double>& oracle,
                                           Index chosen) {
  if (proxies.size() != oracle.size() || proxies.empty()) {
    throw ConfigError("selection_diagnostics: proxy and oracle lists must be nonempty and equally long");
  }
  if (chosen < 0 || chosen >= static_cast<Index>(oracle.size())) throw ConfigError("selection_diagnostics: bad index");
  SelectionDiagnostics d;
  const auto [omin, omax] = std::minmax_element(oracle.begin(), oracle.end());
  d.spread = *omax - *omin;
  d.regret = *omax - oracle[static_cast<std::size_t>(chosen)];
  if (proxies.size() >= 2) {
    const Eigen::Map<const Eigen::VectorXd> p(proxies.data(), static_cast<Index>(proxies.size()));
    const Eigen::Map<const Eigen::VectorXd> o(oracle.data(), static_cast<Index>(oracle.size()));
    d.spearman = spearman(-p, o);
  }
  return d;
}

namespace {

template <typename Error>
[[noreturn]] void rethrow_annotated(const Error& e, const GridCell& cell) {
  char where[96];
  std::snprintf(where, sizeof(where), " [cell sigma=%g lambda=%g]", cell.sigma, cell.lambda);
  throw Error(std::string(e.what()) + where);
}

}  // namespace

SelectionResult grid_search(const Dataset& train, const Dataset& val, const NetArch& arch, const HyperGrid& grid,
                            const TrainConfig& config, const Dataset* oracle, int jobs) {
  grid.validate();
  const bool scored = oracle != nullptr && oracle->true_field.has_value();

  SelectionResult result;
  for (double s : grid.sigmas) {
    for (double l : grid.lambdas) result.cells.push_back({s, l, 0.0, 0, std::nullopt});
  }
  const auto count = result.cells.size();
  result.runs.resize(count);
  std::vector<std::exception_ptr> errors(count);

  auto run_cell = [&](std::size_t i) {
    auto& cell = result.cells[i];
    try {
      const KernelConfig kernel{cell.sigma};
      const LossConfig loss{cell.lambda, grid.m_min};
      result.runs[i] = train_field(train, val, arch, kernel, loss, config);
      cell.proxy = result.runs[i].history.best_proxy;
      cell.best_epoch = result.runs[i].history.best_epoch;
      if (scored) {
        const FieldModel model(result.runs[i].params, sample_bank(train, config.bank_cap, config.seed), kernel);
        cell.oracle_corr = pearson(model.predict(oracle->embeddings).values, *oracle->true_field);
      }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const auto workers = static_cast<std::size_t>(std::clamp<int>(jobs, 1, static_cast<int>(count)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) run_cell(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < count; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const NumericalError& e) {
      rethrow_annotated(e, result.cells[i]);
    } catch (const DataError& e) {
      rethrow_annotated(e, result.cells[i]);
    } catch (const ConfigError& e) {
      rethrow_annotated(e, result.cells[i]);
    }
  }

  result.chosen = select_cell(result.cells);
  if (scored) {
    std::vector<double> proxies;
    std::vector<double> oracles;
    for (const auto& c : result.cells) {
      proxies.push_back(c.proxy);
      // A constant field carries no recovered structure.
      oracles.push_back(c.oracle_corr.value_or(0.0));
    }
    result.diagnostics = selection_diagnostics(proxies, oracles, result.chosen);
  }
  return result;
}

}  // namespace calibfield
