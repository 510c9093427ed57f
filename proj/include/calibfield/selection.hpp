#pragma once

#include "calibfield/field.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace calibfield {

/// Validation Brier score of the unclipped additive correction f + dhat.
/// Needs only confidences, outcomes and the estimate, never the true field.
double proxy_brier(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                   const FieldEstimate& field);

struct HyperGrid {
  std::vector<double> sigmas{0.03, 0.1, 0.3, 1.0};
  std::vector<double> lambdas{0.0, 1e-2};
  double m_min = 20.0;

  Index size() const { return static_cast<Index>(sigmas.size() * lambdas.size()); }
  void validate() const;
};

struct GridCell {
  double sigma = 0.0;
  double lambda = 0.0;
  double proxy = 0.0;
  int best_epoch = 0;
  std::optional<double> oracle_corr;
};

struct SelectionDiagnostics {
  std::optional<double> spearman;
  double spread = 0.0;
  double regret = 0.0;
};

struct SelectionResult {
  std::vector<GridCell> cells;  // sigma-major, lambda-minor
  std::vector<TrainResult> runs;
  Index chosen = 0;
  std::optional<SelectionDiagnostics> diagnostics;

  const GridCell& chosen_cell() const { return cells[static_cast<std::size_t>(chosen)]; }
  const TrainResult& chosen_run() const { return runs[static_cast<std::size_t>(chosen)]; }
  void write_csv(const std::filesystem::path& path) const;
};

/// Index of the smallest proxy; exact ties go to the larger sigma, then the
/// larger lambda.
Index select_cell(const std::vector<GridCell>& cells);

/// Spearman between -proxy and oracle (absent with fewer than two cells or a
/// flat surface), spread O_max - O_min and regret O* - O(chosen).
SelectionDiagnostics selection_diagnostics(const std::vector<double>& proxies, const std::vector<double>& oracle,
                                           Index chosen);

/// One training run per cell, all with the same seed. When `oracle` carries a
/// true field, each cell is scored by Corr(dhat, delta) on it and diagnostics
/// are attached. Cells run on up to `jobs` threads; the result does not depend
/// on the job count.
SelectionResult grid_search(const Dataset& train, const Dataset& val, const NetArch& arch, const HyperGrid& grid,
                            const TrainConfig& config, const Dataset* oracle = nullptr, int jobs = 1);

}  // namespace calibfield
