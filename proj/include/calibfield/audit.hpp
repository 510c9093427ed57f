#pragma once

#include "calibfield/dataset.hpp"
#include "calibfield/field.hpp"
#include "calibfield/rng.hpp"
#include "calibfield/selection.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <vector>

namespace calibfield {

struct RegimeConfig {
  double epsilon = 0.05;
  std::vector<double> sweep{0.01, 0.05, 0.10, 0.15};

  void validate() const;
};

enum class Regime : std::uint8_t { Over, Under, Good };

const char* regime_name(Regime r);

/// over: dhat < -eps, under: dhat > eps, good otherwise.
struct RegimeSlices {
  std::vector<Regime> labels;
  double epsilon = 0.0;

  Index count(Regime r) const;
  double fraction(Regime r) const;
  bool present(Regime r) const { return count(r) > 0; }
  std::vector<Index> indices(Regime r) const;
};

RegimeSlices slice_regimes(const Eigen::Ref<const Eigen::VectorXd>& delta, double epsilon);
RegimeSlices slice_regimes(const FieldEstimate& field, const RegimeConfig& config);

enum class SliceMetric { Smece, Brier };

SliceMetric parse_metric(const std::string& name);
const char* metric_name(SliceMetric m);

double evaluate_metric(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                       SliceMetric metric);

struct SliceGap {
  double global = 0.0;
  std::optional<double> over;
  std::optional<double> under;
  std::optional<Regime> worst;
  std::optional<double> gap;  // absent when both signed slices are empty
};

SliceGap worst_slice_gap(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                         const RegimeSlices& slices, SliceMetric metric);

/// Metric on an explicit subset of rows; absent for an empty subset.
std::optional<double> metric_on(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                                const std::vector<Index>& rows, SliceMetric metric);

struct Heterogeneity {
  double mean = 0.0;
  double std = 0.0;  // population (divide by n)
};

Heterogeneity heterogeneity_stats(const Eigen::Ref<const Eigen::VectorXd>& delta);

struct Interval {
  double point = 0.0;
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  Index replicates = 0;
};

/// Linear-interpolated quantile of a sample, q in [0,1].
double quantile(std::vector<double> values, double q);

/// Global metric, metric on the fixed worst slice and their gap, recomputed
/// on the rows picked by `rows` (labels stay attached to their rows).
struct ReplicateValues {
  double global = 0.0;
  std::optional<double> slice;
  std::optional<double> gap;
  double slice_fraction = 0.0;
};

ReplicateValues evaluate_replicate(const Eigen::Ref<const Eigen::VectorXd>& f,
                                   const Eigen::Ref<const Eigen::VectorXd>& y, const RegimeSlices& slices,
                                   std::optional<Regime> worst, const std::vector<Index>& rows, SliceMetric metric);

struct BootstrapReport {
  int replicates = 0;
  std::optional<Regime> worst;
  Interval global;
  std::optional<Interval> slice;
  std::optional<Interval> gap;
  std::optional<Interval> slice_fraction;
  Index empty_slice_replicates = 0;
};

/// Percentile 95% intervals from B resamples with replacement of the
/// evaluation rows; the field and slice labels are held fixed.
BootstrapReport bootstrap_ci(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                             const RegimeSlices& slices, SliceMetric metric, int replicates, std::uint64_t seed);

/// Everything needed to rerun representation learning, selection and slicing.
struct PipelineConfig {
  NetArch arch;
  HyperGrid grid;
  TrainConfig train;
  RegimeConfig regime;
  SliceMetric metric = SliceMetric::Smece;
  int jobs = 1;
};

struct PipelineRun {
  double sigma = 0.0;
  double lambda = 0.0;
  double proxy = 0.0;
  NetParams<float> params;
  FieldEstimate test_field;
  Heterogeneity heterogeneity;
  SliceGap gap;
};

/// Grid search on train/val, then the selected field on the test split with
/// the train bank. Test outcomes are read only for the final slice metrics.
PipelineRun run_pipeline(const Dataset& train, const Dataset& val, const Dataset& test, const PipelineConfig& config);

/// Copy of `ds` with outcomes shuffled among its rows.
Dataset permute_outcomes(const Dataset& ds, Rng& rng);

/// Copy of `ds` with (confidence, outcome) pairs shuffled among its rows, so
/// every residual survives intact but lands on another input.
Dataset permute_pairs(const Dataset& ds, Rng& rng);

/// Outcomes permutes y alone, which leaves E[r | x] = mean(y) - f(x): null
/// fields still vary wherever f does. Pairs moves whole residuals and gives a
/// flat null field, at the price of tiny, noisy signed slices.
enum class NullMode { Outcomes, Pairs };
NullMode parse_null_mode(const std::string& name);
const char* null_mode_name(NullMode m);

struct NullSummary {
  NullMode mode = NullMode::Outcomes;
  int permutations = 0;
  double real_std = 0.0;
  std::optional<double> real_gap;
  double null_std_mean = 0.0;
  double null_std_sd = 0.0;
  double null_gap_mean = 0.0;
  double null_gap_sd = 0.0;
  double null_gap_p95 = 0.0;
  int null_gap_absent = 0;
  std::vector<double> null_stds;
  std::vector<std::optional<double>> null_gaps;
};

/// P reruns with train and val permuted separately. Absent null gaps count as
/// zero in the summary statistics.
NullSummary permutation_null_audit(const Dataset& train, const Dataset& val, const Dataset& test,
                                   const PipelineConfig& config, int permutations, std::uint64_t seed,
                                   const PipelineRun& real, NullMode mode = NullMode::Outcomes);

struct StabilitySummary {
  std::vector<std::uint64_t> seeds;
  double corr_mean = 0.0;
  double corr_sd = 0.0;
  double sign_mean = 0.0;
  double sign_sd = 0.0;
  std::vector<double> pair_corr;
  std::vector<double> pair_sign;
  std::vector<double> field_std;
  std::vector<std::optional<double>> gaps;
};

/// Fraction of rows with matching sign among rows where both fields are
/// nonzero; absent when no such row exists.
std::optional<double> sign_agreement(const Eigen::Ref<const Eigen::VectorXd>& a,
                                     const Eigen::Ref<const Eigen::VectorXd>& b);

StabilitySummary seed_stability_audit(const Dataset& train, const Dataset& val, const Dataset& test,
                                      const PipelineConfig& config, const std::vector<std::uint64_t>& seeds);

struct SweepRow {
  double epsilon = 0.0;
  std::optional<double> smece_gap;
  std::optional<double> brier_gap;
  std::optional<Regime> slice;
  double slice_fraction = 0.0;
};

std::vector<SweepRow> threshold_sweep(const Eigen::Ref<const Eigen::VectorXd>& f,
                                      const Eigen::Ref<const Eigen::VectorXd>& y,
                                      const Eigen::Ref<const Eigen::VectorXd>& delta, const std::vector<double>& sweep);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

struct GeometryReport {
  double raw_sigma = 0.0;
  Heterogeneity raw;
  Heterogeneity learned;
  std::optional<double> raw_gap;
  std::optional<double> learned_gap;
  std::optional<double> gap_difference;  // learned - raw
};

/// Identity representation with its bandwidth picked by the validation proxy
/// (ties to the larger sigma), set beside a learned field on the same split.
GeometryReport raw_vs_learned(const Dataset& train, const Dataset& val, const Dataset& test,
                              const std::vector<double>& raw_sigmas, const FieldEstimate& learned_test_field,
                              const RegimeConfig& regime, SliceMetric metric, Index bank_cap, std::uint64_t seed);

nlohmann::json to_json(const SliceGap& g);
nlohmann::json to_json(const Heterogeneity& h);
nlohmann::json to_json(const Interval& i);
nlohmann::json to_json(const BootstrapReport& b);
nlohmann::json to_json(const NullSummary& s);
nlohmann::json to_json(const StabilitySummary& s);
nlohmann::json to_json(const GeometryReport& g);
nlohmann::json to_json(const std::vector<SweepRow>& rows);

}  // namespace calibfield
