#pragma once

#include "calibfield/types.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace calibfield {

/// Aligned (embedding, confidence, outcome) triples. Residuals y - f are
/// derived on demand and never stored.
struct Dataset {
  Eigen::MatrixXd embeddings;  // n x d
  Eigen::VectorXd confidences;
  Eigen::VectorXd outcomes;
  std::optional<Eigen::VectorXd> true_field;
  std::optional<Eigen::VectorXi> group_labels;
  // Sidecar name table for group ids; may be empty when ids are bare integers.
  std::vector<std::string> group_names;

  Index size() const { return confidences.size(); }
  Index dim() const { return embeddings.cols(); }

  Eigen::VectorXd residuals() const { return outcomes - confidences; }

  /// Throws DataError naming the first offending row (1-based).
  void validate() const;

  /// Rows in the given order. Optional columns are carried along.
  Dataset subset(std::span<const Index> rows) const;
};

enum class FileFormat { Csv, Jsonl, Binary };

FileFormat parse_format(const std::string& name);
std::string format_name(FileFormat format);
/// Guess from the extension: .csv, .jsonl, anything else is binary-columnar.
FileFormat format_from_path(const std::filesystem::path& path);

Dataset load_triples(const std::filesystem::path& path, FileFormat format);
void save_triples(const Dataset& ds, const std::filesystem::path& path, FileFormat format);

struct SplitSpec {
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> val;
  std::vector<Index> test;
};

/// Seeded uniform permutation; val and test get floor(n * frac) rows, train
/// absorbs the remainder.
SplitIndices split_indices(Index n, const SplitSpec& spec);

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

Splits split(const Dataset& ds, const SplitSpec& spec);

/// Training neighbours used as the support of every kernel average at
/// evaluation time.
struct NeighbourBank {
  Eigen::MatrixXd embeddings;  // b x d
  Eigen::VectorXd residuals;
  std::vector<Index> source_indices;  // rows of the train split, increasing
  Index cap = 0;

  Index size() const { return residuals.size(); }
};

inline constexpr Index kDefaultBankCap = 20000;

/// Full train split in original order when it fits under the cap, otherwise a
/// seeded uniform sample without replacement (returned in increasing index
/// order).
NeighbourBank sample_bank(const Dataset& train, Index cap, std::uint64_t seed);

}  // namespace calibfield
