#pragma once

#include "calibfield/config.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace calibfield {

/// Command-line values that take precedence over the config file and the
/// environment.
struct CommandOverrides {
  std::filesystem::path config_path;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<int> bootstrap;
  std::optional<int> permutation_null;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<double> epsilon;
  std::optional<std::string> format;
};

/// File, then CALIBFIELD_* environment, then command-line values.
RunConfig resolve_config(const CommandOverrides& overrides);

/// Synthetic generator or file loader, according to the config.
Dataset load_dataset(const RunConfig& config);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Writes the dataset and manifest.json. Needs a synthetic source.
void cmd_generate(const RunConfig& config);

/// Trains one field at config.kernel / config.loss; writes checkpoint.bin,
/// checkpoint.json, history.csv.
void cmd_train(const RunConfig& config);

/// Grid search; writes grid.csv, selection.json and the chosen checkpoint.
void cmd_sweep(const RunConfig& config);

/// Test-split report for raw, corrected, isotonic and temperature-scaled
/// confidences.
nlohmann::json cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint);

/// Regime audit with optional bootstrap, permutation null and seed suites.
nlohmann::json cmd_audit(const RunConfig& config, const std::filesystem::path& checkpoint);

/// Metadata written next to a checkpoint: same path with a .json extension.
std::filesystem::path checkpoint_metadata_path(const std::filesystem::path& checkpoint);

}  // namespace calibfield
