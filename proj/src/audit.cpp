#include "calibfield/audit.hpp"

#include "calibfield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace calibfield {

void RegimeConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be >= 0");
  for (double e : sweep) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("sweep thresholds must be >= 0");
  }
}

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::Over:
      return "over";
    case Regime::Under:
      return "under";
    case Regime::Good:
      return "good";
  }
  return "?";
}

Index RegimeSlices::count(Regime r) const { return static_cast<Index>(std::count(labels.begin(), labels.end(), r)); }

double RegimeSlices::fraction(Regime r) const {
  return labels.empty() ? 0.0 : static_cast<double>(count(r)) / static_cast<double>(labels.size());
}

std::vector<Index> RegimeSlices::indices(Regime r) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == r) out.push_back(static_cast<Index>(i));
  }
  return out;
}

RegimeSlices slice_regimes(const Eigen::Ref<const Eigen::VectorXd>& delta, double epsilon) {
  RegimeConfig{epsilon, {}}.validate();
  RegimeSlices s;
  s.epsilon = epsilon;
  s.labels.reserve(static_cast<std::size_t>(delta.size()));
  for (Index i = 0; i < delta.size(); ++i) {
    s.labels.push_back(delta[i] < -epsilon ? Regime::Over : delta[i] > epsilon ? Regime::Under : Regime::Good);
  }
  return s;
}

RegimeSlices slice_regimes(const FieldEstimate& field, const RegimeConfig& config) {
  return slice_regimes(field.values, config.epsilon);
}

SliceMetric parse_metric(const std::string& name) {
  if (name == "smece") return SliceMetric::Smece;
  if (name == "brier") return SliceMetric::Brier;
  throw ConfigError("unknown slice metric '" + name + "' (expected smece or brier)");
}

const char* metric_name(SliceMetric m) { return m == SliceMetric::Smece ? "smece" : "brier"; }

double evaluate_metric(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                       SliceMetric metric) {
  return metric == SliceMetric::Smece ? smece(f, y).value : brier(f, y);
}

std::optional<double> metric_on(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                                const std::vector<Index>& rows, SliceMetric metric) {
  if (rows.empty()) return std::nullopt;
  Eigen::VectorXd fs(static_cast<Index>(rows.size()));
  Eigen::VectorXd ys(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    fs[static_cast<Index>(k)] = f[rows[k]];
    ys[static_cast<Index>(k)] = y[rows[k]];
  }
  return evaluate_metric(fs, ys, metric);
}

SliceGap worst_slice_gap(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                         const RegimeSlices& slices, SliceMetric metric) {
  if (f.size() != y.size() || static_cast<std::size_t>(f.size()) != slices.labels.size()) {
    throw ConfigError("worst_slice_gap: confidences, outcomes and slice labels differ in length");
  }
  SliceGap g;
  g.global = evaluate_metric(f, y, metric);
  g.over = metric_on(f, y, slices.indices(Regime::Over), metric);
  g.under = metric_on(f, y, slices.indices(Regime::Under), metric);
  if (g.over && (!g.under || *g.over >= *g.under)) {
    g.worst = Regime::Over;
    g.gap = *g.over - g.global;
  } else if (g.under) {
    g.worst = Regime::Under;
    g.gap = *g.under - g.global;
  }
  return g;
}

Heterogeneity heterogeneity_stats(const Eigen::Ref<const Eigen::VectorXd>& delta) {
  if (delta.size() == 0) throw ConfigError("heterogeneity_stats: empty field");
  Heterogeneity h;
  h.mean = delta.mean();
  h.std = std::sqrt((delta.array() - h.mean).square().mean());
  return h;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

ReplicateValues evaluate_replicate(const Eigen::Ref<const Eigen::VectorXd>& f,
                                   const Eigen::Ref<const Eigen::VectorXd>& y, const RegimeSlices& slices,
                                   std::optional<Regime> worst, const std::vector<Index>& rows, SliceMetric metric) {
  ReplicateValues v;
  v.global = *metric_on(f, y, rows, metric);
  if (worst) {
    std::vector<Index> in_slice;
    for (Index r : rows) {
      if (slices.labels[static_cast<std::size_t>(r)] == *worst) in_slice.push_back(r);
    }
    v.slice_fraction = static_cast<double>(in_slice.size()) / static_cast<double>(rows.size());
    v.slice = metric_on(f, y, in_slice, metric);
    if (v.slice) v.gap = *v.slice - v.global;
  }
  return v;
}

namespace {

Interval summarize(double point, const std::vector<double>& draws) {
  Interval iv;
  iv.point = point;
  iv.replicates = static_cast<Index>(draws.size());
  if (draws.empty()) {
    iv.mean = iv.lo = iv.hi = point;
    return iv;
  }
  iv.mean = std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(draws.size());
  iv.lo = quantile(draws, 0.025);
  iv.hi = quantile(draws, 0.975);
  return iv;
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

}  // namespace

BootstrapReport bootstrap_ci(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                             const RegimeSlices& slices, SliceMetric metric, int replicates, std::uint64_t seed) {
  if (replicates < 100) throw ConfigError("bootstrap needs at least 100 replicates");
  const Index n = f.size();
  if (n == 0 || y.size() != n || static_cast<Index>(slices.labels.size()) != n) {
    throw ConfigError("bootstrap_ci: inputs must be nonempty and aligned");
  }

  BootstrapReport report;
  report.replicates = replicates;
  report.worst = worst_slice_gap(f, y, slices, metric).worst;

  std::vector<Index> identity(static_cast<std::size_t>(n));
  std::iota(identity.begin(), identity.end(), Index{0});
  const ReplicateValues point = evaluate_replicate(f, y, slices, report.worst, identity, metric);

  std::vector<double> globals;
  std::vector<double> slice_values;
  std::vector<double> gaps;
  std::vector<double> fractions;
  std::vector<Index> rows(static_cast<std::size_t>(n));
  for (int b = 0; b < replicates; ++b) {
    Rng rng(seed, Stream::Bootstrap, static_cast<std::uint64_t>(b));
    for (auto& r : rows) r = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    const ReplicateValues v = evaluate_replicate(f, y, slices, report.worst, rows, metric);
    globals.push_back(v.global);
    if (report.worst) {
      fractions.push_back(v.slice_fraction);
      if (v.slice) {
        slice_values.push_back(*v.slice);
        gaps.push_back(*v.gap);
      } else {
        ++report.empty_slice_replicates;
      }
    }
  }
  report.global = summarize(point.global, globals);
  if (report.worst) {
    report.slice = summarize(*point.slice, slice_values);
    report.gap = summarize(*point.gap, gaps);
    report.slice_fraction = summarize(point.slice_fraction, fractions);
  }
  return report;
}

PipelineRun run_pipeline(const Dataset& train, const Dataset& val, const Dataset& test, const PipelineConfig& config) {
  config.regime.validate();
  const SelectionResult sel = grid_search(train, val, config.arch, config.grid, config.train, nullptr, config.jobs);
  PipelineRun run;
  const GridCell& cell = sel.chosen_cell();
  run.sigma = cell.sigma;
  run.lambda = cell.lambda;
  run.proxy = cell.proxy;
  run.params = sel.chosen_run().params;
  const FieldModel model(run.params, sample_bank(train, config.train.bank_cap, config.train.seed),
                         KernelConfig{cell.sigma});
  run.test_field = model.predict(test.embeddings);
  run.heterogeneity = heterogeneity_stats(run.test_field.values);
  run.gap = worst_slice_gap(test.confidences, test.outcomes, slice_regimes(run.test_field, config.regime),
                            config.metric);
  return run;
}

Dataset permute_outcomes(const Dataset& ds, Rng& rng) {
  Dataset out = ds;
  std::vector<Index> order(static_cast<std::size_t>(ds.size()));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order.begin(), order.end());
  for (Index i = 0; i < ds.size(); ++i) out.outcomes[i] = ds.outcomes[order[static_cast<std::size_t>(i)]];
  return out;
}

Dataset permute_pairs(const Dataset& ds, Rng& rng) {
  Dataset out = ds;
  std::vector<Index> order(static_cast<std::size_t>(ds.size()));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order.begin(), order.end());
  for (Index i = 0; i < ds.size(); ++i) {
    const Index src = order[static_cast<std::size_t>(i)];
    out.confidences[i] = ds.confidences[src];
    out.outcomes[i] = ds.outcomes[src];
  }
  return out;
}

NullMode parse_null_mode(const std::string& name) {
  if (name == "pairs") return NullMode::Pairs;
  if (name == "outcomes") return NullMode::Outcomes;
  throw ConfigError("unknown null mode '" + name + "' (expected pairs or outcomes)");
}

const char* null_mode_name(NullMode m) { return m == NullMode::Pairs ? "pairs" : "outcomes"; }

NullSummary permutation_null_audit(const Dataset& train, const Dataset& val, const Dataset& test,
                                   const PipelineConfig& config, int permutations, std::uint64_t seed,
                                   const PipelineRun& real, NullMode mode) {
  if (permutations < 2) throw ConfigError("permutation null needs at least 2 permutations");
  const auto permute = mode == NullMode::Pairs ? permute_pairs : permute_outcomes;
  NullSummary s;
  s.mode = mode;
  s.permutations = permutations;
  s.real_std = real.heterogeneity.std;
  s.real_gap = real.gap.gap;
  std::vector<double> gaps;
  for (int p = 0; p < permutations; ++p) {
    Rng rng(seed, Stream::Permutation, static_cast<std::uint64_t>(p));
    const Dataset train_p = permute(train, rng);
    const Dataset val_p = permute(val, rng);
    PipelineRun run;
    try {
      run = run_pipeline(train_p, val_p, test, config);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " [permutation " + std::to_string(p) + "]");
    }
    s.null_stds.push_back(run.heterogeneity.std);
    s.null_gaps.push_back(run.gap.gap);
    if (!run.gap.gap) ++s.null_gap_absent;
    gaps.push_back(run.gap.gap.value_or(0.0));
  }
  std::tie(s.null_std_mean, s.null_std_sd) = mean_sd(s.null_stds);
  std::tie(s.null_gap_mean, s.null_gap_sd) = mean_sd(gaps);
  s.null_gap_p95 = quantile(gaps, 0.95);
  return s;
}

std::optional<double> sign_agreement(const Eigen::Ref<const Eigen::VectorXd>& a,
                                     const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size()) throw ConfigError("sign_agreement: length mismatch");
  Index both = 0;
  Index agree = 0;
  for (Index i = 0; i < a.size(); ++i) {
    if (a[i] == 0.0 || b[i] == 0.0) continue;
    ++both;
    if ((a[i] > 0.0) == (b[i] > 0.0)) ++agree;
  }
  if (both == 0) return std::nullopt;
  return static_cast<double>(agree) / static_cast<double>(both);
}

StabilitySummary seed_stability_audit(const Dataset& train, const Dataset& val, const Dataset& test,
                                      const PipelineConfig& config, const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 2) throw ConfigError("seed stability needs at least 2 seeds");
  StabilitySummary s;
  s.seeds = seeds;
  std::vector<Eigen::VectorXd> fields;
  for (std::uint64_t seed : seeds) {
    PipelineConfig c = config;
    c.train.seed = seed;
    const PipelineRun run = run_pipeline(train, val, test, c);
    fields.push_back(run.test_field.values);
    s.field_std.push_back(run.heterogeneity.std);
    s.gaps.push_back(run.gap.gap);
  }
  for (std::size_t i = 0; i < fields.size(); ++i) {
    for (std::size_t j = i + 1; j < fields.size(); ++j) {
      s.pair_corr.push_back(pearson(fields[i], fields[j]).value_or(0.0));
      s.pair_sign.push_back(sign_agreement(fields[i], fields[j]).value_or(0.0));
    }
  }
  std::tie(s.corr_mean, s.corr_sd) = mean_sd(s.pair_corr);
  std::tie(s.sign_mean, s.sign_sd) = mean_sd(s.pair_sign);
  return s;
}

std::vector<SweepRow> threshold_sweep(const Eigen::Ref<const Eigen::VectorXd>& f,
                                      const Eigen::Ref<const Eigen::VectorXd>& y,
                                      const Eigen::Ref<const Eigen::VectorXd>& delta, const std::vector<double>& sweep) {
  if (sweep.empty()) throw ConfigError("threshold sweep needs at least one epsilon");
  std::vector<SweepRow> rows;
  const double global_brier = brier(f, y);
  for (double eps : sweep) {
    const RegimeSlices slices = slice_regimes(delta, eps);
    const SliceGap g = worst_slice_gap(f, y, slices, SliceMetric::Smece);
    SweepRow row;
    row.epsilon = eps;
    row.smece_gap = g.gap;
    row.slice = g.worst;
    if (g.worst) {
      const auto members = slices.indices(*g.worst);
      row.brier_gap = *metric_on(f, y, members, SliceMetric::Brier) - global_brier;
      row.slice_fraction = slices.fraction(*g.worst);
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", *v);
  return buf;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epsilon,slice,smece_gap,brier_gap,slice_fraction\n";
  for (const auto& r : rows) {
    out << opt_str(r.epsilon) << ',' << (r.slice ? regime_name(*r.slice) : "") << ',' << opt_str(r.smece_gap) << ','
        << opt_str(r.brier_gap) << ',' << opt_str(r.slice_fraction) << '\n';
  }
}

GeometryReport raw_vs_learned(const Dataset& train, const Dataset& val, const Dataset& test,
                              const std::vector<double>& raw_sigmas, const FieldEstimate& learned_test_field,
                              const RegimeConfig& regime, SliceMetric metric, Index bank_cap, std::uint64_t seed) {
  if (raw_sigmas.empty()) throw ConfigError("raw_vs_learned needs at least one bandwidth");
  const NeighbourBank bank = sample_bank(train, bank_cap, seed);
  GeometryReport report;
  double best = std::numeric_limits<double>::infinity();
  for (double s : raw_sigmas) {
    const double proxy = proxy_brier(val.confidences, val.outcomes, estimate_field(val.embeddings, bank, KernelConfig{s}));
    if (proxy < best || (proxy == best && s > report.raw_sigma)) {
      best = proxy;
      report.raw_sigma = s;
    }
  }
  const FieldEstimate raw = estimate_field(test.embeddings, bank, KernelConfig{report.raw_sigma});
  report.raw = heterogeneity_stats(raw.values);
  report.learned = heterogeneity_stats(learned_test_field.values);
  report.raw_gap = worst_slice_gap(test.confidences, test.outcomes, slice_regimes(raw, regime), metric).gap;
  report.learned_gap =
      worst_slice_gap(test.confidences, test.outcomes, slice_regimes(learned_test_field, regime), metric).gap;
  if (report.raw_gap && report.learned_gap) report.gap_difference = *report.learned_gap - *report.raw_gap;
  return report;
}

nlohmann::json to_json(const SliceGap& g) {
  return {{"global", g.global},
          {"over", opt_json(g.over)},
          {"under", opt_json(g.under)},
          {"worst_slice", g.worst ? nlohmann::json(regime_name(*g.worst)) : nlohmann::json(nullptr)},
          {"gap", opt_json(g.gap)}};
}

nlohmann::json to_json(const Heterogeneity& h) { return {{"mean", h.mean}, {"std", h.std}}; }

nlohmann::json to_json(const Interval& i) {
  return {{"point", i.point}, {"mean", i.mean}, {"ci95", {i.lo, i.hi}}, {"replicates", i.replicates}};
}

nlohmann::json to_json(const BootstrapReport& b) {
  nlohmann::json j{{"replicates", b.replicates},
                   {"worst_slice", b.worst ? nlohmann::json(regime_name(*b.worst)) : nlohmann::json(nullptr)},
                   {"global", to_json(b.global)},
                   {"empty_slice_replicates", b.empty_slice_replicates}};
  j["slice"] = b.slice ? to_json(*b.slice) : nlohmann::json(nullptr);
  j["gap"] = b.gap ? to_json(*b.gap) : nlohmann::json(nullptr);
  j["slice_fraction"] = b.slice_fraction ? to_json(*b.slice_fraction) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const NullSummary& s) {
  nlohmann::json gaps = nlohmann::json::array();
  for (const auto& g : s.null_gaps) gaps.push_back(opt_json(g));
  return {{"mode", null_mode_name(s.mode)},
          {"permutations", s.permutations},
          {"std_real", s.real_std},
          {"null_std", {{"mean", s.null_std_mean}, {"sd", s.null_std_sd}}},
          {"gap_real", opt_json(s.real_gap)},
          {"null_gap", {{"mean", s.null_gap_mean}, {"sd", s.null_gap_sd}, {"p95", s.null_gap_p95}}},
          {"null_gap_absent", s.null_gap_absent},
          {"null_stds", s.null_stds},
          {"null_gaps", gaps}};
}

nlohmann::json to_json(const StabilitySummary& s) {
  nlohmann::json gaps = nlohmann::json::array();
  for (const auto& g : s.gaps) gaps.push_back(opt_json(g));
  return {{"seeds", s.seeds},
          {"field_corr", {{"mean", s.corr_mean}, {"sd", s.corr_sd}, {"pairs", s.pair_corr}}},
          {"sign_agreement", {{"mean", s.sign_mean}, {"sd", s.sign_sd}, {"pairs", s.pair_sign}}},
          {"field_std", s.field_std},
          {"worst_slice_gap", gaps}};
}

nlohmann::json to_json(const GeometryReport& g) {
  return {{"raw_sigma", g.raw_sigma},        {"raw", to_json(g.raw)},
          {"learned", to_json(g.learned)},   {"raw_gap", opt_json(g.raw_gap)},
          {"learned_gap", opt_json(g.learned_gap)}, {"gap_learned_minus_raw", opt_json(g.gap_difference)}};
}

nlohmann::json to_json(const std::vector<SweepRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"epsilon", r.epsilon},
                   {"slice", r.slice ? nlohmann::json(regime_name(*r.slice)) : nlohmann::json(nullptr)},
                   {"smece_gap", opt_json(r.smece_gap)},
                   {"brier_gap", opt_json(r.brier_gap)},
                   {"slice_fraction", r.slice_fraction}});
  }
  return arr;
}

}  // namespace calibfield
