#pragma once

#include "calibfield/audit.hpp"
#include "calibfield/dataset.hpp"
#include "calibfield/field.hpp"
#include "calibfield/recal.hpp"
#include "calibfield/selection.hpp"
#include "calibfield/synth.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace calibfield {

enum class DataSource { ThreeCluster, Sinusoidal, File };

struct DatasetConfig {
  DataSource source = DataSource::ThreeCluster;
  std::filesystem::path path;
  FileFormat format = FileFormat::Csv;
  ThreeClusterSpec three_cluster;
  SinusoidSpec sinusoid;
};

struct AuditConfig {
  SliceMetric metric = SliceMetric::Smece;
  int bootstrap = 0;
  int permutation_null = 0;
  NullMode null_mode = NullMode::Outcomes;
  std::vector<std::uint64_t> seeds;
  std::vector<double> raw_sigmas{0.03, 0.1, 0.3, 1.0, 3.0, 10.0};
};

/// One document holding every knob of a run. Defaults are materialized when
/// the config is written back out.
struct RunConfig {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::filesystem::path output_dir = "out";
  DatasetConfig dataset;
  SplitSpec split;
  std::string arch_preset = "synthetic";
  NetArch arch;
  KernelConfig kernel;
  LossConfig loss;
  TrainConfig train;
  HyperGrid grid;
  RegimeConfig regime;
  CorrectionConfig correction;
  AuditConfig audit;
  int reliability_bins = 10;

  void validate() const;
};

/// Applies CALIBFIELD_<KEY>__<SUBKEY>=value overrides from `env` onto `doc`.
/// Keys are lower-cased; values parse as JSON when possible, else as strings.
void apply_env_overrides(nlohmann::json& doc, const std::map<std::string, std::string>& env);

/// Reads the process environment for CALIBFIELD_* variables.
std::map<std::string, std::string> calibfield_environment();

/// Builds a config from a (possibly partial) document. The global seed fills
/// every sub-seed that the document leaves unset; the architecture's input
/// dimension is fixed later from the data.
RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& config);

/// File (may be empty for all defaults) + environment.
nlohmann::json load_config_document(const std::filesystem::path& path);

}  // namespace calibfield
