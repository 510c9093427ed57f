#include "calibfield/commands.hpp"

#include "calibfield/metrics.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace calibfield {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void write_json(const json& doc, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

void prepare_output(const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw DataError("cannot create output directory " + config.output_dir.string() + ": " + ec.message());
}

json arch_json(const NetArch& a) {
  return {{"input_dim", a.input_dim},       {"hidden_width", a.hidden_width}, {"hidden_layers", a.hidden_layers},
          {"output_dim", a.output_dim},     {"dropout", a.dropout},           {"normalize_output", a.normalize_output}};
}

// The architecture's input width is only known once data is loaded.
RunConfig with_input_dim(RunConfig config, const Dataset& ds) {
  config.arch.input_dim = ds.dim();
  config.arch.validate();
  return config;
}

void write_resolved(const RunConfig& config) { write_json(config_to_json(config), config.output_dir / "resolved_config.json"); }

struct LoadedModel {
  json meta;
  NetParams<float> params;
  double sigma = 0.0;
  Index bank_cap = 0;
  std::uint64_t bank_seed = 0;
};

void save_model(const RunConfig& config, const NetParams<float>& params, double sigma, double lambda,
                const TrainHistory& history) {
  const fs::path ckpt = config.output_dir / "checkpoint.bin";
  save_checkpoint(params, ckpt);
  history.write_csv(config.output_dir / "history.csv");
  json meta = {{"checkpoint", ckpt.filename().string()},
               {"sha256", sha256_file(ckpt)},
               {"sigma", sigma},
               {"lambda", lambda},
               {"m_min", config.loss.m_min},
               {"bank_cap", config.train.bank_cap},
               {"bank_seed", config.train.seed},
               {"best_epoch", history.best_epoch},
               {"best_proxy", history.best_proxy},
               {"arch", arch_json(params.arch)}};
  write_json(meta, checkpoint_metadata_path(ckpt));
}

LoadedModel load_model(const fs::path& checkpoint) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint: a checkpoint path is required");
  if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  const fs::path meta_path = checkpoint_metadata_path(checkpoint);
  std::ifstream in(meta_path);
  if (!in) throw DataError("checkpoint metadata not found: " + meta_path.string());
  LoadedModel m;
  try {
    m.meta = json::parse(in);
    m.sigma = m.meta.at("sigma").get<double>();
    m.bank_cap = m.meta.at("bank_cap").get<Index>();
    m.bank_seed = m.meta.at("bank_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  m.params = load_checkpoint<float>(checkpoint);
  return m;
}

void check_dims(const LoadedModel& m, const Dataset& ds) {
  if (m.params.arch.input_dim != ds.dim())
    throw DataError("checkpoint expects " + std::to_string(m.params.arch.input_dim) + "-dimensional inputs, data has " +
                    std::to_string(ds.dim()));
}

json slice_counts(const RegimeSlices& s) {
  json out;
  for (Regime r : {Regime::Over, Regime::Under, Regime::Good})
    out[regime_name(r)] = {{"count", s.count(r)}, {"fraction", s.fraction(r)}};
  return out;
}

json condition_report(const Eigen::VectorXd& f, const Eigen::VectorXd& y, const RegimeSlices& slices) {
  json out;
  out["global"] = smece(f, y).value;
  out["brier"] = brier(f, y);
  for (Regime r : {Regime::Over, Regime::Under, Regime::Good})
    out[regime_name(r)] = opt(metric_on(f, y, slices.indices(r), SliceMetric::Smece));
  return out;
}

void write_field_csv(const fs::path& path, const Dataset& test, const FieldEstimate& field, const RegimeSlices& slices,
                     const Eigen::VectorXd& corrected, const Eigen::VectorXd& iso, const Eigen::VectorXd& ts) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "row,confidence,outcome,dhat,mass,regime,corrected,isotonic,temperature";
  if (test.true_field) out << ",true_field";
  out << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (Index i = 0; i < test.size(); ++i) {
    out << i << ',' << num(test.confidences[i]) << ',' << num(test.outcomes[i]) << ',' << num(field.values[i]) << ','
        << num(field.masses[i]) << ',' << regime_name(slices.labels[static_cast<std::size_t>(i)]) << ','
        << num(corrected[i]) << ',' << num(iso[i]) << ',' << num(ts[i]);
    if (test.true_field) out << ',' << num((*test.true_field)[i]);
    out << '\n';
  }
}

void write_matrix_csv(const fs::path& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  for (Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << 'z' << j;
  out << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", m(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
}

PipelineConfig pipeline_config(const RunConfig& c) {
  return PipelineConfig{c.arch, c.grid, c.train, c.regime, c.audit.metric, c.jobs};
}

}  // namespace

fs::path checkpoint_metadata_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p.replace_extension(".json");
  return p;
}

RunConfig resolve_config(const CommandOverrides& o) {
  json doc = load_config_document(o.config_path);
  if (o.out) doc["output_dir"] = o.out->string();
  if (o.seed) doc["seed"] = *o.seed;
  if (o.jobs) doc["jobs"] = *o.jobs;
  if (o.bootstrap) doc["audit"]["bootstrap"] = *o.bootstrap;
  if (o.permutation_null) doc["audit"]["permutation_null"] = *o.permutation_null;
  if (o.seeds) doc["audit"]["seeds"] = *o.seeds;
  if (o.epsilon) doc["regime"]["epsilon"] = *o.epsilon;
  if (o.format) doc["dataset"]["format"] = *o.format;
  RunConfig config = config_from_json(doc);
  config.validate();
  return config;
}

Dataset load_dataset(const RunConfig& config) {
  switch (config.dataset.source) {
    case DataSource::ThreeCluster: return gen_three_cluster(config.dataset.three_cluster);
    case DataSource::Sinusoidal: return gen_sinusoidal(config.dataset.sinusoid);
    case DataSource::File:
      if (!fs::exists(config.dataset.path)) throw DataError("dataset not found: " + config.dataset.path.string());
      return load_triples(config.dataset.path, config.dataset.format);
  }
  throw ConfigError("dataset.source: unhandled source");
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw DataError("sha256: digest initialisation failed");
  }
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

void cmd_generate(const RunConfig& config) {
  if (config.dataset.source == DataSource::File)
    throw ConfigError("dataset.source: generate needs three_cluster or sinusoidal");
  prepare_output(config);
  const Dataset ds = load_dataset(config);
  const std::string ext = format_name(config.dataset.format);
  const fs::path file = config.output_dir / ("dataset." + ext);
  save_triples(ds, file, config.dataset.format);

  const json resolved = config_to_json(config);
  const bool tc = config.dataset.source == DataSource::ThreeCluster;
  const std::string source = resolved["dataset"]["source"];
  json manifest = {{"source", source},
                   {"spec", resolved["dataset"][tc ? "three_cluster" : "sinusoidal"]},
                   {"seed", tc ? config.dataset.three_cluster.seed : config.dataset.sinusoid.seed},
                   {"rows", ds.size()},
                   {"dim", ds.dim()},
                   {"format", ext},
                   {"files", json::array()}};
  manifest["files"].push_back({{"path", file.filename().string()}, {"sha256", sha256_file(file)}});
  // Group names travel in a sidecar next to the data file.
  fs::path sidecar = file;
  sidecar += ".groups.json";
  if (fs::exists(sidecar))
    manifest["files"].push_back({{"path", sidecar.filename().string()}, {"sha256", sha256_file(sidecar)}});
  write_json(manifest, config.output_dir / "manifest.json");
  write_resolved(config);
}

void cmd_train(const RunConfig& base) {
  const Dataset ds = load_dataset(base);
  const RunConfig config = with_input_dim(base, ds);
  prepare_output(config);
  write_resolved(config);
  const Splits sp = split(ds, config.split);
  const TrainResult result = train_field(sp.train, sp.val, config.arch, config.kernel, config.loss, config.train);
  save_model(config, result.params, config.kernel.sigma, config.loss.lambda, result.history);
}

void cmd_sweep(const RunConfig& base) {
  const Dataset ds = load_dataset(base);
  const RunConfig config = with_input_dim(base, ds);
  prepare_output(config);
  write_resolved(config);
  const Splits sp = split(ds, config.split);
  const Dataset* oracle = sp.test.true_field ? &sp.test : nullptr;
  const SelectionResult sel = grid_search(sp.train, sp.val, config.arch, config.grid, config.train, oracle, config.jobs);
  sel.write_csv(config.output_dir / "grid.csv");

  json cells = json::array();
  for (const auto& c : sel.cells)
    cells.push_back({{"sigma", c.sigma},
                     {"lambda", c.lambda},
                     {"proxy", c.proxy},
                     {"best_epoch", c.best_epoch},
                     {"oracle_corr", opt(c.oracle_corr)}});
  const GridCell& chosen = sel.chosen_cell();
  json doc = {{"cells", cells},
              {"chosen", {{"index", sel.chosen}, {"sigma", chosen.sigma}, {"lambda", chosen.lambda}}}};
  if (sel.diagnostics)
    doc["diagnostics"] = {{"spearman", opt(sel.diagnostics->spearman)},
                          {"spread", sel.diagnostics->spread},
                          {"regret", sel.diagnostics->regret}};
  write_json(doc, config.output_dir / "selection.json");

  RunConfig chosen_config = config;
  chosen_config.loss.lambda = chosen.lambda;
  save_model(chosen_config, sel.chosen_run().params, chosen.sigma, chosen.lambda, sel.chosen_run().history);
}

json cmd_evaluate(const RunConfig& base, const fs::path& checkpoint) {
  const LoadedModel model = load_model(checkpoint);
  const Dataset ds = load_dataset(base);
  check_dims(model, ds);
  const RunConfig config = with_input_dim(base, ds);
  prepare_output(config);
  const Splits sp = split(ds, config.split);

  // Train rows only; validation and test never enter the bank.
  const FieldModel field_model(model.params, sample_bank(sp.train, model.bank_cap, model.bank_seed),
                               KernelConfig{model.sigma});
  const FieldEstimate val_field = field_model.predict(sp.val.embeddings);
  const FieldEstimate test_field = field_model.predict(sp.test.embeddings);

  const AlphaSelection alpha =
      select_alpha(sp.val.confidences, sp.val.outcomes, val_field.values, config.correction.alpha_grid);
  const TempScaler ts = fit_temperature(sp.train.confidences, sp.train.outcomes);
  const IsotonicMap iso = fit_isotonic(sp.train.confidences, sp.train.outcomes);

  const Eigen::VectorXd& f = sp.test.confidences;
  const Eigen::VectorXd& y = sp.test.outcomes;
  const Eigen::VectorXd corrected = range_aware_correct(f, test_field.values, alpha.alpha);
  const Eigen::VectorXd f_iso = apply_isotonic(iso, f);
  const Eigen::VectorXd f_ts = apply_temperature(f, ts.temperature);
  const RegimeSlices slices = slice_regimes(test_field, config.regime);

  const bool in_range = (corrected.array() >= 0.0).all() && (corrected.array() <= 1.0).all();
  if (!in_range) throw NumericalError("corrected confidences left [0,1]");

  json conditions = {{"raw", condition_report(f, y, slices)},
                     {"corrected", condition_report(corrected, y, slices)},
                     {"isotonic", condition_report(f_iso, y, slices)},
                     {"temperature", condition_report(f_ts, y, slices)}};
  json improvement;
  for (const char* cond : {"corrected", "isotonic", "temperature"}) {
    for (const char* key : {"global", "over", "under", "good"}) {
      const json& raw = conditions["raw"][key];
      const json& now = conditions[cond][key];
      improvement[cond][key] = raw.is_null() ? json(nullptr) : json(raw.get<double>() - now.get<double>());
    }
  }

  json scores = json::array();
  for (const auto& s : alpha.scores) scores.push_back({{"alpha", s.alpha}, {"smece", s.smece}, {"brier", s.brier}});
  json report = {{"config", config_to_json(config)},
                 {"checkpoint", model.meta},
                 {"test_rows", sp.test.size()},
                 {"epsilon", config.regime.epsilon},
                 {"slices", slice_counts(slices)},
                 {"field",
                  {{"heterogeneity", to_json(heterogeneity_stats(test_field.values))},
                   {"starved", test_field.starved_count()},
                   {"mean_mass", test_field.masses.mean()}}},
                 {"alpha", {{"selected", alpha.alpha}, {"scores", scores}}},
                 {"conditions", conditions},
                 {"improvement", improvement},
                 {"corrected_in_range", in_range}};
  if (sp.test.true_field) report["field"]["oracle_corr"] = opt(pearson(test_field.values, *sp.test.true_field));

  json recal = {{"range_aware", range_aware_json(alpha.alpha)},
                {"temperature", to_json(ts)},
                {"isotonic", to_json(iso)}};
  write_json(recal, config.output_dir / "recalibrators.json");
  write_json(report, config.output_dir / "report.json");
  write_resolved(config);
  binned_reliability(f, y, config.reliability_bins).write_csv(config.output_dir / "reliability_raw.csv");
  binned_reliability(corrected, y, config.reliability_bins).write_csv(config.output_dir / "reliability_corrected.csv");
  binned_reliability(f_iso, y, config.reliability_bins).write_csv(config.output_dir / "reliability_isotonic.csv");
  binned_reliability(f_ts, y, config.reliability_bins).write_csv(config.output_dir / "reliability_temperature.csv");
  write_field_csv(config.output_dir / "field.csv", sp.test, test_field, slices, corrected, f_iso, f_ts);
  write_matrix_csv(config.output_dir / "embeddings.csv", embed(model.params, sp.test.embeddings));
  return report;
}

json cmd_audit(const RunConfig& base, const fs::path& checkpoint) {
  const LoadedModel model = load_model(checkpoint);
  const Dataset ds = load_dataset(base);
  check_dims(model, ds);
  const RunConfig config = with_input_dim(base, ds);
  prepare_output(config);
  const Splits sp = split(ds, config.split);

  const FieldModel field_model(model.params, sample_bank(sp.train, model.bank_cap, model.bank_seed),
                               KernelConfig{model.sigma});
  const FieldEstimate field = field_model.predict(sp.test.embeddings);
  const Eigen::VectorXd& f = sp.test.confidences;
  const Eigen::VectorXd& y = sp.test.outcomes;
  const RegimeSlices slices = slice_regimes(field, config.regime);
  const SliceGap gap = worst_slice_gap(f, y, slices, config.audit.metric);
  const Heterogeneity het = heterogeneity_stats(field.values);

  const auto sweep = threshold_sweep(f, y, field.values, config.regime.sweep);
  write_sweep_csv(sweep, config.output_dir / "sweep.csv");

  json report = {{"config", config_to_json(config)},
                 {"checkpoint", model.meta},
                 {"seed", config.seed},
                 {"metric", metric_name(config.audit.metric)},
                 {"epsilon", config.regime.epsilon},
                 {"slices", slice_counts(slices)},
                 {"slice_gap", to_json(gap)},
                 {"heterogeneity", to_json(het)},
                 {"sweep", to_json(sweep)}};
  if (sp.test.true_field) report["oracle_corr"] = opt(pearson(field.values, *sp.test.true_field));

  report["geometry"] = to_json(raw_vs_learned(sp.train, sp.val, sp.test, config.audit.raw_sigmas, field,
                                              config.regime, config.audit.metric, model.bank_cap, model.bank_seed));

  if (config.audit.bootstrap > 0)
    report["bootstrap"] = to_json(bootstrap_ci(f, y, slices, config.audit.metric, config.audit.bootstrap, config.seed));

  const PipelineConfig pipe = pipeline_config(config);
  if (config.audit.permutation_null > 0) {
    // The null is compared against the same pipeline run on real labels, not
    // against the supplied checkpoint, so both sides share one selection rule.
    const PipelineRun real = run_pipeline(sp.train, sp.val, sp.test, pipe);
    json null = to_json(
        permutation_null_audit(sp.train, sp.val, sp.test, pipe, config.audit.permutation_null, config.seed, real,
                               config.audit.null_mode));
    null["real_sigma"] = real.sigma;
    null["real_lambda"] = real.lambda;
    report["permutation_null"] = null;
  }
  if (!config.audit.seeds.empty())
    report["seed_stability"] = to_json(seed_stability_audit(sp.train, sp.val, sp.test, pipe, config.audit.seeds));

  write_json(report, config.output_dir / "audit.json");
  write_resolved(config);
  return report;
}

}  // namespace calibfield
